//! Shared builders for the criterion benchmarks.

use vqabench_core::descriptions::SemanticGraph;
use vqabench_core::evaluation::ScoreBook;
use vqabench_core::numeric::Percent;
use vqabench_core::testcases::{CaseDraft, CaseProvenance, Letter};
use vqabench_core::{AspectId, Difficulty};

/// A graph with `nodes` words and roughly 35% edge density, seeded.
pub fn graph_with_nodes(nodes: usize, iteration: u32) -> SemanticGraph {
    use rand::Rng;
    let words: Vec<String> = (0..nodes).map(|i| format!("word{i:03}")).collect();
    let mut rng = vqabench_core::seeds::derive_rng(17, &format!("bench-graph/{nodes}"));
    let mut edges = Vec::new();
    for i in 0..nodes {
        for j in (i + 1)..nodes {
            if rng.gen_bool(0.35) {
                edges.push((i, j));
            }
        }
    }
    SemanticGraph::from_edges(
        words.iter().map(|w| w.as_str()),
        edges
            .iter()
            .map(|(i, j)| (words[*i].as_str(), words[*j].as_str())),
        iteration,
        3,
    )
}

pub fn case_drafts(count: usize) -> Vec<CaseDraft> {
    (0..count)
        .map(|i| CaseDraft {
            id: format!("case-{i:04}"),
            image_path: format!("images/{i}.png"),
            aspect_id: AspectId::new(0, 0),
            aspect_name: "bench".into(),
            difficulty: Difficulty::Easy,
            question: format!("Question {i}?"),
            correct_text: format!("right-{i}"),
            distractors: vec![format!("w{i}-1"), format!("w{i}-2"), format!("w{i}-3")],
            provenance: CaseProvenance {
                generator_examiner: "e".into(),
                adjuster_examiner: None,
                adjusted: false,
                adjustment_fallback: false,
                replaced_slot: None,
                draft_options: Default::default(),
                draft_reference: Letter::A,
                adversarial_text: None,
                image_attempts: 1,
                image_forced: false,
            },
        })
        .collect()
}

/// A full 9-model x 5-input x 3-difficulty book of preset cells.
pub fn full_book() -> ScoreBook {
    let mut book = ScoreBook::new();
    for model in 0..9i64 {
        for input in ["basic", "spatial", "semantic", "reasoning", "atmospheric"] {
            for (d, difficulty) in Difficulty::ALL.into_iter().enumerate() {
                let value = 2000 + (model * 731 + d as i64 * 997) % 6000;
                book.set_cell(
                    format!("model-{model}").as_str().into(),
                    input,
                    difficulty,
                    Percent::from_hundredths(value),
                );
            }
        }
    }
    book
}
