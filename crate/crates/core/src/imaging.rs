//! Image generation with self-validation.
//!
//! Each description gets an image; six typed yes/no questions probe whether
//! the image matches the description; the answer ratio is triaged against
//! the difficulty's threshold into accept, accept-with-errors, or
//! regenerate. Failed checks become error records that the question stage
//! must steer around.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptions::DescriptionRecord;
use crate::gateway::{BackendId, ExaminerPool, Gateway, GatewayError, ModelRequest, RequestTag};
use crate::numeric::Ratio;
use crate::prompts;
use crate::seeds;

/// The twelve consistency-check types, with `other` as the catch-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Object,
    Human,
    Animal,
    Food,
    Activity,
    Attribute,
    Counting,
    Color,
    Material,
    Spatial,
    Location,
    Shape,
    Other,
}

impl ElementType {
    /// Parse a label; unknown labels coerce to `Other` (flagged true).
    pub fn parse_lenient(label: &str) -> (ElementType, bool) {
        let t = match label.trim().to_lowercase().as_str() {
            "object" => ElementType::Object,
            "human" => ElementType::Human,
            "animal" => ElementType::Animal,
            "food" => ElementType::Food,
            "activity" => ElementType::Activity,
            "attribute" => ElementType::Attribute,
            "counting" => ElementType::Counting,
            "color" => ElementType::Color,
            "material" => ElementType::Material,
            "spatial" => ElementType::Spatial,
            "location" => ElementType::Location,
            "shape" => ElementType::Shape,
            "other" => ElementType::Other,
            _ => return (ElementType::Other, true),
        };
        (t, false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationQuestion {
    pub question: String,
    pub choices: Vec<String>,
    pub reference: String,
    pub element_type: ElementType,
    pub element: String,
    /// True when the examiner emitted an unknown element type label.
    #[serde(default)]
    pub coerced_type: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsweredQuestion {
    pub question: ValidationQuestion,
    /// Normalized observed answer, or `"unparsable"`.
    pub observed: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub element_type: ElementType,
    pub element: String,
    pub failed_question: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Accept,
    AcceptWithErrors,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub questions: Vec<AnsweredQuestion>,
    pub score: Ratio,
    pub verdict: Verdict,
    pub errors: Vec<ErrorRecord>,
}

/// A stored image: its description key, where the bytes live, how many
/// attempts it took, and the final report. Stored verdicts are never
/// `Regenerate`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatedImage {
    pub description: DescriptionRecord,
    pub image_path: String,
    pub attempts: u32,
    pub report: AlignmentReport,
    /// True when the attempt cap forced keeping the best sub-threshold
    /// attempt.
    pub forced: bool,
}

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("alignment score needs at least one question")]
    ZeroQuestions,
    #[error("could not parse {got} validation questions (need 6) after {attempts} attempts")]
    ParseFailure { got: usize, attempts: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub const VALIDATION_QUESTION_COUNT: usize = 6;

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawValidationQuestion {
    question: String,
    choices: Vec<String>,
    answer: String,
    element_type: String,
    element: String,
}

/// Lenient structured extraction: a JSON array if the reply is one, else
/// every balanced top-level object found in the text.
pub fn parse_validation_questions(text: &str) -> Vec<ValidationQuestion> {
    let mut raws: Vec<RawValidationQuestion> = Vec::new();
    if let Ok(list) = serde_json::from_str::<Vec<RawValidationQuestion>>(text.trim()) {
        raws = list;
    } else {
        for chunk in balanced_objects(text) {
            if let Ok(raw) = serde_json::from_str::<RawValidationQuestion>(&chunk) {
                raws.push(raw);
            }
        }
    }
    raws.into_iter()
        .filter_map(|raw| {
            let reference = normalize_answer(&raw.answer);
            let choices: Vec<String> = raw.choices.iter().map(|c| normalize_answer(c)).collect();
            if choices.is_empty() || !choices.contains(&reference) {
                return None;
            }
            let (element_type, coerced_type) = ElementType::parse_lenient(&raw.element_type);
            Some(ValidationQuestion {
                question: raw.question,
                choices,
                reference,
                element_type,
                element: raw.element,
                coerced_type,
            })
        })
        .collect()
}

/// Scan for balanced `{ ... }` spans outside string literals.
pub fn balanced_objects(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push(text[start..=i].to_string());
                }
            }
            _ => {}
        }
    }
    spans
}

fn normalize_answer(raw: &str) -> String {
    raw.trim()
        .trim_matches(['"', '\'', '.', '!', ',', ':', ';'])
        .trim()
        .to_lowercase()
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// One examiner call producing exactly six typed questions for a
/// description, with bounded re-prompting on shortfall.
pub fn generate_validation_questions(
    gateway: &Gateway,
    examiner: &BackendId,
    description: &DescriptionRecord,
    retry_budget: u32,
) -> Result<Vec<ValidationQuestion>, ImagingError> {
    let mut best = 0usize;
    for attempt in 0..=retry_budget {
        let prompt = prompts::align_questions(&description.prompt_text, attempt);
        let request =
            ModelRequest::text(RequestTag::AlignQuestions, prompts::SYSTEM_EXAMINER, prompt);
        let response = gateway.complete(examiner, &request)?;
        let mut questions = parse_validation_questions(&response.text);
        if questions.len() >= VALIDATION_QUESTION_COUNT {
            questions.truncate(VALIDATION_QUESTION_COUNT);
            return Ok(questions);
        }
        best = best.max(questions.len());
    }
    Err(ImagingError::ParseFailure {
        got: best,
        attempts: retry_budget + 1,
    })
}

/// Ask the answering examiner one validation question about the image. The
/// examiner sees only the image and the question, never the description. A
/// reply matching no choice is re-asked once, then recorded as
/// `"unparsable"` (which counts as incorrect).
pub fn answer_validation_question(
    gateway: &Gateway,
    examiner: &BackendId,
    image: &[u8],
    question: &ValidationQuestion,
) -> Result<AnsweredQuestion, ImagingError> {
    let mut observed = "unparsable".to_string();
    for attempt in 0..2 {
        let prompt = prompts::align_answer(&question.question, &question.choices, attempt);
        let request = ModelRequest::text(RequestTag::AlignAnswer, prompts::SYSTEM_EXAMINER, prompt)
            .with_image(image.to_vec());
        let response = gateway.complete(examiner, &request)?;
        if let Some(matched) = match_choice(&response.text, &question.choices) {
            observed = matched;
            break;
        }
    }
    let correct = observed == question.reference;
    Ok(AnsweredQuestion {
        question: question.clone(),
        observed,
        correct,
    })
}

/// Match a raw reply against the choices: a JSON `answer` field if present,
/// else the normalized full text.
fn match_choice(raw: &str, choices: &[String]) -> Option<String> {
    let mut candidates = Vec::new();
    for chunk in balanced_objects(raw) {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&chunk) {
            if let Some(answer) = value.get("answer").and_then(|a| a.as_str()) {
                candidates.push(normalize_answer(answer));
            }
        }
    }
    candidates.push(normalize_answer(raw));
    candidates.into_iter().find(|c| choices.contains(c))
}

/// Exact alignment score: correct / total.
pub fn alignment_score(answered: &[AnsweredQuestion]) -> Result<Ratio, ImagingError> {
    if answered.is_empty() {
        return Err(ImagingError::ZeroQuestions);
    }
    let correct = answered.iter().filter(|a| a.correct).count() as u32;
    Ok(Ratio::new(correct, answered.len() as u32).expect("non-empty"))
}

/// The three-way threshold rule. `zeta` must lie in (0, 1].
pub fn triage(score: Ratio, zeta: Ratio) -> Verdict {
    debug_assert!(zeta > Ratio::new(0, 1).unwrap() && zeta <= Ratio::ONE);
    if score < zeta {
        Verdict::Regenerate
    } else if score.is_one() {
        Verdict::Accept
    } else {
        Verdict::AcceptWithErrors
    }
}

impl AlignmentReport {
    /// Assemble a report; errors are recorded exactly when the verdict is
    /// accept-with-errors.
    pub fn from_answers(
        answered: Vec<AnsweredQuestion>,
        zeta: Ratio,
    ) -> Result<Self, ImagingError> {
        let score = alignment_score(&answered)?;
        let verdict = triage(score, zeta);
        let errors = if verdict == Verdict::AcceptWithErrors {
            failures(&answered)
        } else {
            Vec::new()
        };
        Ok(AlignmentReport {
            questions: answered,
            score,
            verdict,
            errors,
        })
    }
}

fn failures(answered: &[AnsweredQuestion]) -> Vec<ErrorRecord> {
    answered
        .iter()
        .filter(|a| !a.correct)
        .map(|a| ErrorRecord {
            element_type: a.question.element_type,
            element: a.question.element.clone(),
            failed_question: a.question.question.clone(),
        })
        .collect()
}

/// The full generate-validate-triage loop for one description. Returns the
/// image bytes with their metadata; on hitting the attempt cap the
/// best-scoring attempt is kept as accept-with-errors and flagged.
#[allow(clippy::too_many_arguments)]
pub fn validate_image(
    gateway: &Gateway,
    pool: &ExaminerPool,
    image_backend: &BackendId,
    description: &DescriptionRecord,
    zeta: Ratio,
    max_attempts: u32,
    retry_budget: u32,
    image_path: String,
) -> Result<(Vec<u8>, ValidatedImage), ImagingError> {
    assert!(max_attempts >= 1, "max_attempts must be at least 1");
    let key_base = format!(
        "{}/{}/{}",
        description.aspect_id, description.difficulty, description.index
    );

    // One examiner writes all six questions for this description.
    let question_examiner = pool.pick(seeds::derive_u64(
        pool.rng_seed,
        &format!("alignq/{key_base}"),
    ));
    let questions =
        generate_validation_questions(gateway, question_examiner, description, retry_budget)?;

    let mut best: Option<(Ratio, u32, Vec<u8>, Vec<AnsweredQuestion>)> = None;
    for attempt in 1..=max_attempts {
        let prompt = if attempt == 1 {
            description.prompt_text.clone()
        } else {
            // Regeneration request: same description, distinct nonce.
            format!("{}\n[regeneration {attempt}]", description.prompt_text)
        };
        let image = gateway.generate_image(image_backend, &prompt)?;

        // A fresh answering examiner per attempt.
        let answer_examiner = pool.pick(seeds::derive_u64(
            pool.rng_seed,
            &format!("aligna/{key_base}/a{attempt}"),
        ));
        let mut answered = Vec::with_capacity(questions.len());
        for question in &questions {
            answered.push(answer_validation_question(
                gateway,
                answer_examiner,
                &image,
                question,
            )?);
        }
        let report = AlignmentReport::from_answers(answered, zeta)?;
        if report.verdict != Verdict::Regenerate {
            let validated = ValidatedImage {
                description: description.clone(),
                image_path,
                attempts: attempt,
                report,
                forced: false,
            };
            return Ok((image, validated));
        }
        let score = report.score;
        if best.as_ref().is_none_or(|(s, _, _, _)| score > *s) {
            best = Some((score, attempt, image, report.questions));
        }
    }

    // Cap reached: keep the best attempt, flag it, and record every failed
    // question as an error.
    let (score, _attempt, image, answered) = best.expect("at least one attempt ran");
    let errors = failures(&answered);
    let validated = ValidatedImage {
        description: description.clone(),
        image_path,
        attempts: max_attempts,
        report: AlignmentReport {
            questions: answered,
            score,
            verdict: Verdict::AcceptWithErrors,
            errors,
        },
        forced: true,
    };
    Ok((image, validated))
}
