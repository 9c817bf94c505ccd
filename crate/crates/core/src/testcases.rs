//! Test-case production: one four-option single-answer question per
//! validated image, hardened by error-driven option adjustment and laid out
//! with exactly balanced correct-option positions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::aspects::AspectId;
use crate::descriptions::Difficulty;
use crate::gateway::{BackendId, Gateway, GatewayError, ModelRequest, RequestTag};
use crate::imaging::{ErrorRecord, ValidatedImage};
use crate::prompts;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn as_char(&self) -> char {
        match self {
            Letter::A => 'A',
            Letter::B => 'B',
            Letter::C => 'C',
            Letter::D => 'D',
        }
    }

    pub fn from_char(c: char) -> Option<Letter> {
        match c.to_ascii_uppercase() {
            'A' => Some(Letter::A),
            'B' => Some(Letter::B),
            'C' => Some(Letter::C),
            'D' => Some(Letter::D),
            _ => None,
        }
    }
}

impl std::fmt::Display for Letter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Error)]
pub enum TestcaseError {
    #[error("could not parse a question after {attempts} attempts")]
    ParseFailure { attempts: u32 },
    #[error("question output carries no usable reference letter")]
    ReferenceLetterMissing,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// The examiner's question before adjustment and positioning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftQuestion {
    pub question: String,
    pub options: BTreeMap<Letter, String>,
    pub reference: Letter,
    pub examiner: BackendId,
    pub difficulty: Difficulty,
    pub aspect_id: AspectId,
}

impl DraftQuestion {
    pub fn correct_text(&self) -> &str {
        &self.options[&self.reference]
    }

    pub fn distractor_letters(&self) -> Vec<Letter> {
        Letter::ALL
            .iter()
            .copied()
            .filter(|l| *l != self.reference)
            .collect()
    }
}

/// The option set after error-driven adjustment. The correct text is always
/// byte-identical to the draft's; exactly one distractor differs unless the
/// collision fallback kept the draft unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustedOptionSet {
    pub options: BTreeMap<Letter, String>,
    pub reference: Letter,
    pub replaced_slot: Option<Letter>,
    pub adversarial_text: Option<String>,
    pub adjuster: BackendId,
    /// Set when the adversarial text kept colliding with an existing option
    /// and the draft was kept unchanged.
    pub fallback: bool,
}

impl AdjustedOptionSet {
    /// An identity adjustment, used when the adjustment stage is switched
    /// off.
    pub fn unchanged(draft: &DraftQuestion) -> Self {
        AdjustedOptionSet {
            options: draft.options.clone(),
            reference: draft.reference,
            replaced_slot: None,
            adversarial_text: None,
            adjuster: draft.examiner.clone(),
            fallback: false,
        }
    }
}

/// Provenance kept with every emitted case, including the full pre-position
/// draft so the adjustment can be audited from artifacts alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseProvenance {
    pub generator_examiner: BackendId,
    pub adjuster_examiner: Option<BackendId>,
    pub adjusted: bool,
    pub adjustment_fallback: bool,
    pub replaced_slot: Option<Letter>,
    pub draft_options: BTreeMap<Letter, String>,
    pub draft_reference: Letter,
    pub adversarial_text: Option<String>,
    pub image_attempts: u32,
    pub image_forced: bool,
}

/// A positioned, answerable test case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub image_path: String,
    pub aspect_id: AspectId,
    pub aspect_name: String,
    pub difficulty: Difficulty,
    pub question: String,
    pub options: BTreeMap<Letter, String>,
    pub reference: Letter,
    pub provenance: CaseProvenance,
}

// ---------------------------------------------------------------------------
// Question generation
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawQuestion {
    question: String,
    options: BTreeMap<String, String>,
    reference_answer: String,
}

fn parse_question_output(
    text: &str,
) -> Result<(String, BTreeMap<Letter, String>, Letter), TestcaseError> {
    for chunk in crate::imaging::balanced_objects(text) {
        let Ok(raw) = serde_json::from_str::<RawQuestion>(&chunk) else {
            continue;
        };
        let mut options = BTreeMap::new();
        for (key, value) in &raw.options {
            let letter = key.trim().chars().next().and_then(Letter::from_char);
            if let Some(letter) = letter {
                if !value.trim().is_empty() {
                    options.insert(letter, value.trim().to_string());
                }
            }
        }
        if options.len() != 4 {
            continue;
        }
        let texts: std::collections::BTreeSet<String> =
            options.values().map(|t| t.to_lowercase()).collect();
        if texts.len() != 4 {
            continue;
        }
        let reference = raw
            .reference_answer
            .trim()
            .chars()
            .next()
            .and_then(Letter::from_char)
            .ok_or(TestcaseError::ReferenceLetterMissing)?;
        if raw.question.trim().is_empty() {
            continue;
        }
        return Ok((raw.question.trim().to_string(), options, reference));
    }
    Err(TestcaseError::ParseFailure { attempts: 1 })
}

/// One examiner call producing the draft question. Error elements recorded
/// during self-validation are injected into the prompt's avoid clause.
pub fn generate_question(
    gateway: &Gateway,
    examiner: &BackendId,
    image: &ValidatedImage,
    aspect_name: &str,
    retry_budget: u32,
) -> Result<DraftQuestion, TestcaseError> {
    let error_elements: Vec<String> = image
        .report
        .errors
        .iter()
        .map(|e: &ErrorRecord| e.element.clone())
        .collect();
    let description = &image.description;
    let mut last_reference_missing = false;
    for attempt in 0..=retry_budget {
        let prompt = prompts::question(
            aspect_name,
            &description.prompt_text,
            description.difficulty,
            &error_elements,
            attempt,
        );
        let request = ModelRequest::text(RequestTag::Question, prompts::SYSTEM_EXAMINER, prompt);
        let response = gateway.complete(examiner, &request)?;
        match parse_question_output(&response.text) {
            Ok((question, options, reference)) => {
                return Ok(DraftQuestion {
                    question,
                    options,
                    reference,
                    examiner: examiner.clone(),
                    difficulty: description.difficulty,
                    aspect_id: description.aspect_id.clone(),
                })
            }
            Err(TestcaseError::ReferenceLetterMissing) => last_reference_missing = true,
            Err(_) => last_reference_missing = false,
        }
    }
    if last_reference_missing {
        Err(TestcaseError::ReferenceLetterMissing)
    } else {
        Err(TestcaseError::ParseFailure {
            attempts: retry_budget + 1,
        })
    }
}

// ---------------------------------------------------------------------------
// Error-driven option adjustment
// ---------------------------------------------------------------------------

/// Show the adjuster the question with every current option (the truth
/// deliberately among the "wrong answers"), take its plausible alternative,
/// and splice that over one seeded-random distractor. A reply colliding
/// with an existing option gets one re-prompt; a second collision keeps the
/// draft unchanged with the fallback flag set.
pub fn adjust_options(
    gateway: &Gateway,
    adjuster: &BackendId,
    draft: &DraftQuestion,
    master_seed: u64,
    case_key: &str,
) -> Result<AdjustedOptionSet, TestcaseError> {
    let wrong_answers: Vec<String> = draft.options.values().cloned().collect();
    let existing: Vec<String> = wrong_answers.iter().map(|t| t.to_lowercase()).collect();

    let mut adversarial = None;
    for attempt in 0..2 {
        let prompt = prompts::option_adjust(&draft.question, &wrong_answers, attempt);
        let request =
            ModelRequest::text(RequestTag::OptionAdjust, prompts::SYSTEM_EXAMINER, prompt);
        let response = gateway.complete(adjuster, &request)?;
        let text = response
            .text
            .lines()
            .next()
            .unwrap_or("")
            .trim()
            .trim_matches('"')
            .to_string();
        if !text.is_empty() && !existing.contains(&text.to_lowercase()) {
            adversarial = Some(text);
            break;
        }
    }

    let Some(adversarial) = adversarial else {
        return Ok(AdjustedOptionSet {
            options: draft.options.clone(),
            reference: draft.reference,
            replaced_slot: None,
            adversarial_text: None,
            adjuster: adjuster.clone(),
            fallback: true,
        });
    };

    let distractors = draft.distractor_letters();
    let mut rng = seeds::derive_rng(master_seed, &format!("adjust-slot/{case_key}"));
    let slot = distractors[rng.gen_range(0..distractors.len())];
    let mut options = draft.options.clone();
    options.insert(slot, adversarial.clone());
    Ok(AdjustedOptionSet {
        options,
        reference: draft.reference,
        replaced_slot: Some(slot),
        adversarial_text: Some(adversarial),
        adjuster: adjuster.clone(),
        fallback: false,
    })
}

// ---------------------------------------------------------------------------
// Position assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Seeded permutation of (A, B, C, D) per block of four cases: exact
    /// 25% per letter in every complete block.
    Balanced,
    /// Every correct answer at A (the position-bias probe).
    AllA,
}

/// Everything needed to position one case.
#[derive(Debug, Clone)]
pub struct CaseDraft {
    pub id: String,
    pub image_path: String,
    pub aspect_id: AspectId,
    pub aspect_name: String,
    pub difficulty: Difficulty,
    pub question: String,
    pub correct_text: String,
    pub distractors: Vec<String>,
    pub provenance: CaseProvenance,
}

impl CaseDraft {
    /// Flatten an adjusted option set: correct text plus the three
    /// distractors in draft letter order.
    pub fn from_adjusted(
        id: String,
        image: &ValidatedImage,
        aspect_name: &str,
        draft: &DraftQuestion,
        adjusted: &AdjustedOptionSet,
    ) -> Self {
        let correct_text = adjusted.options[&adjusted.reference].clone();
        let distractors = adjusted
            .options
            .iter()
            .filter(|(letter, _)| **letter != adjusted.reference)
            .map(|(_, text)| text.clone())
            .collect();
        CaseDraft {
            id,
            image_path: image.image_path.clone(),
            aspect_id: draft.aspect_id.clone(),
            aspect_name: aspect_name.to_string(),
            difficulty: draft.difficulty,
            question: draft.question.clone(),
            correct_text,
            distractors,
            provenance: CaseProvenance {
                generator_examiner: draft.examiner.clone(),
                adjuster_examiner: Some(adjusted.adjuster.clone()),
                adjusted: adjusted.replaced_slot.is_some(),
                adjustment_fallback: adjusted.fallback,
                replaced_slot: adjusted.replaced_slot,
                draft_options: draft.options.clone(),
                draft_reference: draft.reference,
                adversarial_text: adjusted.adversarial_text.clone(),
                image_attempts: image.attempts,
                image_forced: image.forced,
            },
        }
    }
}

/// Lay out the ordered case stream. Balanced mode walks blocks of four,
/// each block a fresh seeded permutation of the letters, so any
/// multiple-of-four stream has an exactly uniform correct-letter histogram;
/// an incomplete tail block uses a prefix of its permutation. Distractors
/// fill the remaining slots in seeded random order.
pub fn assign_positions(
    cases: Vec<CaseDraft>,
    mode: PositionMode,
    master_seed: u64,
) -> Vec<TestCase> {
    let mode_key = match mode {
        PositionMode::Balanced => "balanced",
        PositionMode::AllA => "all-a",
    };
    let mut out = Vec::with_capacity(cases.len());
    for (index, case) in cases.into_iter().enumerate() {
        let correct_letter = match mode {
            PositionMode::AllA => Letter::A,
            PositionMode::Balanced => {
                let block = index / 4;
                let mut letters = Letter::ALL;
                let mut rng =
                    seeds::derive_rng(master_seed, &format!("positions/{mode_key}/block/{block}"));
                letters.shuffle(&mut rng);
                letters[index % 4]
            }
        };
        let mut slots: Vec<Letter> = Letter::ALL
            .iter()
            .copied()
            .filter(|l| *l != correct_letter)
            .collect();
        let mut rng = seeds::derive_rng(master_seed, &format!("positions/{mode_key}/case/{index}"));
        let mut distractors = case.distractors.clone();
        distractors.shuffle(&mut rng);
        slots.shuffle(&mut rng);

        let mut options = BTreeMap::new();
        options.insert(correct_letter, case.correct_text.clone());
        for (slot, text) in slots.into_iter().zip(distractors) {
            options.insert(slot, text);
        }
        out.push(TestCase {
            id: case.id,
            image_path: case.image_path,
            aspect_id: case.aspect_id,
            aspect_name: case.aspect_name,
            difficulty: case.difficulty,
            question: case.question,
            options,
            reference: correct_letter,
            provenance: case.provenance,
        });
    }
    out
}

/// Correct-letter histogram in (A, B, C, D) order.
pub fn letter_histogram(cases: &[TestCase]) -> [usize; 4] {
    let mut histogram = [0usize; 4];
    for case in cases {
        histogram[case.reference as usize] += 1;
    }
    histogram
}
