//! Benchmark-synthesis and evaluation engine for vision-language models.
//!
//! The pipeline turns a capability demand into a graded, diversity-constrained,
//! self-validated visual question-answering benchmark, runs candidate models
//! against it, and aggregates the scores and bias analyses.

pub mod aspects;
pub mod descriptions;
pub mod evaluation;
pub mod gateway;
pub mod imaging;
pub mod numeric;
pub mod pipeline;
pub mod prompts;
pub mod runstore;
pub mod seeds;
pub mod testcases;

pub use aspects::{AspectId, AspectTree, FineAspect, GeneralAspect, UserInput};
pub use descriptions::{DescriptionRecord, Difficulty, SemanticGraph};
pub use gateway::{
    BackendConfig, BackendId, BackendKind, ExaminerPool, Gateway, ModelRequest, ModelResponse,
};
pub use imaging::{AlignmentReport, ErrorRecord, ValidatedImage, ValidationQuestion, Verdict};
pub use numeric::{Percent, Ratio};
pub use runstore::{RunConfig, RunManifest, RunStore};
pub use testcases::{AdjustedOptionSet, DraftQuestion, Letter, TestCase};
