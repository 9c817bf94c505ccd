//! Candidate evaluation and score aggregation.
//!
//! Responses are parsed for the mandated `[[X]]` letter; anything
//! unparseable is labeled by the judge backend against the reference
//! answer. The score book indexes every judgment by (candidate, user input,
//! difficulty, aspect) and derives the accuracy tables, deviation rates,
//! examiner variances, and ranking matrices.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::aspects::AspectId;
use crate::descriptions::Difficulty;
use crate::gateway::{BackendId, Gateway, GatewayError, ModelRequest, RequestTag};
use crate::imaging::balanced_objects;
use crate::numeric::Percent;
use crate::prompts;
use crate::testcases::{Letter, PositionMode, TestCase};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("accuracy over an empty judgment set")]
    EmptySet,
    #[error(
        "missing cell: candidate {candidate}, user input {user_input}, difficulty {difficulty}"
    )]
    MissingCell {
        candidate: String,
        user_input: String,
        difficulty: Difficulty,
    },
    #[error("deviation rate undefined for a zero baseline score")]
    ZeroBaseline,
    #[error("variance needs at least two per-examiner scores")]
    InsufficientSamples,
    #[error("duplicate judgment for candidate {candidate} on case {case_id}")]
    DuplicateJudgment { candidate: String, case_id: String },
    #[error("candidate response carries no image but withhold was not requested")]
    MissingImage,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

// ---------------------------------------------------------------------------
// Candidate responses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub case_id: String,
    pub candidate: BackendId,
    pub raw_text: String,
    pub parsed: Option<Letter>,
    pub image_withheld: bool,
}

/// First occurrence of a double-bracketed single letter A-D,
/// case-insensitive. Anything else is unparsed.
pub fn parse_choice(text: &str) -> Option<Letter> {
    let bytes = text.as_bytes();
    for i in 0..bytes.len().saturating_sub(4) {
        if &bytes[i..i + 2] == b"[[" && bytes[i + 3] == b']' && bytes[i + 4] == b']' {
            if let Some(letter) = Letter::from_char(bytes[i + 2] as char) {
                return Some(letter);
            }
        }
    }
    None
}

/// Put one test case to a candidate. The image travels with the request
/// unless `withhold_image` is set (the answer-leakage protocol keeps the
/// prompt identical and simply omits the payload).
pub fn ask_candidate(
    gateway: &Gateway,
    candidate: &BackendId,
    case: &TestCase,
    image: Option<Vec<u8>>,
    withhold_image: bool,
) -> Result<CandidateResponse, EvalError> {
    let options: Vec<(char, &str)> = case
        .options
        .iter()
        .map(|(letter, text)| (letter.as_char(), text.as_str()))
        .collect();
    let prompt = prompts::candidate_answer(&case.aspect_name, &case.question, &options);
    let mut request = ModelRequest::text(
        RequestTag::CandidateAnswer,
        prompts::SYSTEM_CANDIDATE,
        prompt,
    );
    if !withhold_image {
        request = request.with_image(image.ok_or(EvalError::MissingImage)?);
    }
    let response = gateway.complete(candidate, &request)?;
    Ok(CandidateResponse {
        case_id: case.id.clone(),
        candidate: candidate.clone(),
        parsed: parse_choice(&response.text),
        raw_text: response.text,
        image_withheld: withhold_image,
    })
}

// ---------------------------------------------------------------------------
// Judging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMethod {
    Parsed,
    Judged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub correct: bool,
    pub method: JudgeMethod,
    /// Set when the judge itself answered unusably and the response was
    /// conservatively recorded incorrect.
    pub judge_flagged: bool,
}

fn parse_judge_verdict(text: &str) -> Option<bool> {
    for chunk in balanced_objects(text) {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&chunk) {
            for key in ["matches_reference", "correct", "verdict"] {
                match value.get(key) {
                    Some(serde_json::Value::Bool(b)) => return Some(*b),
                    Some(serde_json::Value::String(s)) => match s.trim().to_lowercase().as_str() {
                        "yes" | "true" => return Some(true),
                        "no" | "false" => return Some(false),
                        _ => {}
                    },
                    _ => {}
                }
            }
        }
    }
    match text.trim().to_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Label one response. A parseable letter is compared directly to the
/// reference with no backend call; otherwise the judge backend decides
/// whether the free-form text selects the reference option. With
/// `judge_always` the judge is consulted even for parseable replies.
pub fn judge(
    gateway: &Gateway,
    judge_backend: &BackendId,
    case: &TestCase,
    response: &CandidateResponse,
    judge_always: bool,
    retry_budget: u32,
) -> Result<Judgment, EvalError> {
    if !judge_always {
        if let Some(letter) = response.parsed {
            return Ok(Judgment {
                correct: letter == case.reference,
                method: JudgeMethod::Parsed,
                judge_flagged: false,
            });
        }
    }
    let options: Vec<(char, &str)> = case
        .options
        .iter()
        .map(|(letter, text)| (letter.as_char(), text.as_str()))
        .collect();
    let reference_text = case.options[&case.reference].as_str();
    for attempt in 0..=retry_budget {
        let prompt = prompts::judge(
            &case.question,
            &options,
            case.reference.as_char(),
            reference_text,
            &response.raw_text,
            attempt,
        );
        let request = ModelRequest::text(RequestTag::Judge, prompts::SYSTEM_EXAMINER, prompt);
        let reply = gateway.complete(judge_backend, &request)?;
        if let Some(correct) = parse_judge_verdict(&reply.text) {
            return Ok(Judgment {
                correct,
                method: JudgeMethod::Judged,
                judge_flagged: false,
            });
        }
    }
    Ok(Judgment {
        correct: false,
        method: JudgeMethod::Judged,
        judge_flagged: true,
    })
}

// ---------------------------------------------------------------------------
// Accuracy and the score book
// ---------------------------------------------------------------------------

/// 100 x correct / total at two decimals.
pub fn accuracy<I: IntoIterator<Item = bool>>(outcomes: I) -> Result<Percent, EvalError> {
    let mut correct = 0u64;
    let mut total = 0u64;
    for outcome in outcomes {
        total += 1;
        if outcome {
            correct += 1;
        }
    }
    Percent::from_counts(correct, total).map_err(|_| EvalError::EmptySet)
}

/// One judged response with everything the aggregations key on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub candidate: BackendId,
    pub user_input: String,
    pub difficulty: Difficulty,
    pub aspect_id: AspectId,
    pub case_id: String,
    /// Examiner that generated the question (for the variance analysis).
    pub examiner: BackendId,
    pub layout: PositionMode,
    pub image_withheld: bool,
    pub correct: bool,
    pub method: JudgeMethod,
}

impl JudgmentRecord {
    /// The default evaluation scope: balanced layout, image shown.
    fn in_default_scope(&self) -> bool {
        self.layout == PositionMode::Balanced && !self.image_withheld
    }
}

type CellKey = (BackendId, String, Difficulty);

/// Judgments plus cached/preset per-cell accuracies. A cell is
/// (candidate, user input, difficulty) under the default scope; aggregation
/// reads cells, and cells can be computed from raw judgments or preset
/// directly (for reproducing published tables).
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ScoreBook {
    records: Vec<JudgmentRecord>,
    preset_cells: BTreeMap<CellKey, Percent>,
    #[serde(skip)]
    seen: BTreeSet<(BackendId, String, u8)>,
}

fn scope_tag(layout: PositionMode, withheld: bool) -> u8 {
    match (layout, withheld) {
        (PositionMode::Balanced, false) => 0,
        (PositionMode::Balanced, true) => 1,
        (PositionMode::AllA, false) => 2,
        (PositionMode::AllA, true) => 3,
    }
}

impl ScoreBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, record: JudgmentRecord) -> Result<(), EvalError> {
        let key = (
            record.candidate.clone(),
            record.case_id.clone(),
            scope_tag(record.layout, record.image_withheld),
        );
        if !self.seen.insert(key) {
            return Err(EvalError::DuplicateJudgment {
                candidate: record.candidate.to_string(),
                case_id: record.case_id.clone(),
            });
        }
        self.records.push(record);
        Ok(())
    }

    /// Preset one default-scope cell accuracy (bypassing raw judgments).
    pub fn set_cell(
        &mut self,
        candidate: BackendId,
        user_input: &str,
        difficulty: Difficulty,
        value: Percent,
    ) {
        self.preset_cells
            .insert((candidate, user_input.to_string(), difficulty), value);
    }

    pub fn records(&self) -> &[JudgmentRecord] {
        &self.records
    }

    pub fn candidates(&self) -> Vec<BackendId> {
        let mut set: BTreeSet<BackendId> =
            self.records.iter().map(|r| r.candidate.clone()).collect();
        set.extend(self.preset_cells.keys().map(|(c, _, _)| c.clone()));
        set.into_iter().collect()
    }

    pub fn user_inputs(&self) -> Vec<String> {
        let mut set: BTreeSet<String> = self.records.iter().map(|r| r.user_input.clone()).collect();
        set.extend(self.preset_cells.keys().map(|(_, u, _)| u.clone()));
        set.into_iter().collect()
    }

    pub fn difficulties(&self) -> Vec<Difficulty> {
        let mut set: BTreeSet<Difficulty> = self.records.iter().map(|r| r.difficulty).collect();
        set.extend(self.preset_cells.keys().map(|(_, _, d)| *d));
        set.into_iter().collect()
    }

    /// Default-scope cell accuracy: preset value if present, else computed
    /// from raw judgments.
    pub fn cell(
        &self,
        candidate: &BackendId,
        user_input: &str,
        difficulty: Difficulty,
    ) -> Option<Percent> {
        if let Some(value) =
            self.preset_cells
                .get(&(candidate.clone(), user_input.to_string(), difficulty))
        {
            return Some(*value);
        }
        let outcomes: Vec<bool> = self
            .records
            .iter()
            .filter(|r| {
                r.in_default_scope()
                    && &r.candidate == candidate
                    && r.user_input == user_input
                    && r.difficulty == difficulty
            })
            .map(|r| r.correct)
            .collect();
        accuracy(outcomes).ok()
    }

    fn require_cell(
        &self,
        candidate: &BackendId,
        user_input: &str,
        difficulty: Difficulty,
    ) -> Result<Percent, EvalError> {
        self.cell(candidate, user_input, difficulty)
            .ok_or_else(|| EvalError::MissingCell {
                candidate: candidate.to_string(),
                user_input: user_input.to_string(),
                difficulty,
            })
    }

    /// Accuracy over an arbitrary slice of the raw judgments.
    pub fn accuracy_where(
        &self,
        predicate: impl Fn(&JudgmentRecord) -> bool,
    ) -> Result<Percent, EvalError> {
        accuracy(
            self.records
                .iter()
                .filter(|r| predicate(r))
                .map(|r| r.correct),
        )
    }

    /// Per-(user input, difficulty) averages across candidates plus the
    /// per-user-input average of those difficulty cells.
    pub fn aggregate_user_input_table(&self) -> Result<UserInputTable, EvalError> {
        let difficulties = self.difficulties();
        let candidates = self.candidates();
        let mut rows = Vec::new();
        for user_input in self.user_inputs() {
            let mut cells = Vec::new();
            for &difficulty in &difficulties {
                let mut values = Vec::new();
                for candidate in &candidates {
                    values.push(self.require_cell(candidate, &user_input, difficulty)?);
                }
                cells.push(Percent::mean(&values).expect("candidates non-empty"));
            }
            let average = Percent::mean(&cells).expect("difficulties non-empty");
            rows.push(UserInputRow {
                user_input,
                cells,
                average,
            });
        }
        Ok(UserInputTable { difficulties, rows })
    }

    /// Per-(candidate, difficulty) averages across user inputs plus the
    /// candidate's overall average over every (input, difficulty) cell.
    pub fn aggregate_model_table(&self) -> Result<ModelTable, EvalError> {
        let difficulties = self.difficulties();
        let user_inputs = self.user_inputs();
        let mut rows = Vec::new();
        for candidate in self.candidates() {
            let mut cells = Vec::new();
            let mut all_cells = Vec::new();
            for &difficulty in &difficulties {
                let mut values = Vec::new();
                for user_input in &user_inputs {
                    let value = self.require_cell(&candidate, user_input, difficulty)?;
                    values.push(value);
                    all_cells.push(value);
                }
                cells.push(Percent::mean(&values).expect("user inputs non-empty"));
            }
            let overall = Percent::mean(&all_cells).expect("cells non-empty");
            rows.push(ModelRow {
                candidate,
                cells,
                overall,
            });
        }
        Ok(ModelTable { difficulties, rows })
    }

    /// Rank candidates per (user input, difficulty); rank 1 is the highest
    /// accuracy, ties share the minimum rank.
    pub fn ranking_matrix(&self) -> Result<RankingMatrix, EvalError> {
        let mut rows = Vec::new();
        for user_input in self.user_inputs() {
            for difficulty in self.difficulties() {
                let mut scored: Vec<(BackendId, Percent)> = Vec::new();
                for candidate in self.candidates() {
                    scored.push((
                        candidate.clone(),
                        self.require_cell(&candidate, &user_input, difficulty)?,
                    ));
                }
                rows.push(RankingRow {
                    user_input: user_input.clone(),
                    difficulty,
                    ranks: rank_by_accuracy(scored),
                });
            }
        }
        Ok(RankingMatrix { rows })
    }
}

/// Standard competition ranking: ties share the smallest rank, and the
/// following rank skips accordingly.
pub fn rank_by_accuracy(mut scored: Vec<(BackendId, Percent)>) -> Vec<(BackendId, u32)> {
    scored.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut ranks = Vec::with_capacity(scored.len());
    let mut current_rank = 1u32;
    let mut previous: Option<Percent> = None;
    for (position, (candidate, value)) in scored.into_iter().enumerate() {
        if previous != Some(value) {
            current_rank = position as u32 + 1;
        }
        previous = Some(value);
        ranks.push((candidate, current_rank));
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInputTable {
    pub difficulties: Vec<Difficulty>,
    pub rows: Vec<UserInputRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInputRow {
    pub user_input: String,
    pub cells: Vec<Percent>,
    pub average: Percent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTable {
    pub difficulties: Vec<Difficulty>,
    pub rows: Vec<ModelRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRow {
    pub candidate: BackendId,
    pub cells: Vec<Percent>,
    pub overall: Percent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingMatrix {
    pub rows: Vec<RankingRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRow {
    pub user_input: String,
    pub difficulty: Difficulty,
    pub ranks: Vec<(BackendId, u32)>,
}

// ---------------------------------------------------------------------------
// Bias analyses
// ---------------------------------------------------------------------------

/// R = (S_A - S_U) / S_U, the relative gain from stacking correct answers
/// at position A.
pub fn deviation_rate(s_a: f64, s_u: f64) -> Result<f64, EvalError> {
    if s_u == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok((s_a - s_u) / s_u)
}

/// Population variance of per-examiner scores (Welford's recurrence).
pub fn examiner_variance(scores: &[f64]) -> Result<f64, EvalError> {
    if scores.len() < 2 {
        return Err(EvalError::InsufficientSamples);
    }
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, &score) in scores.iter().enumerate() {
        let delta = score - mean;
        mean += delta / (i as f64 + 1.0);
        m2 += delta * (score - mean);
    }
    Ok(m2 / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::script::ScriptedTransport;
    use crate::gateway::{BackendConfig, BackendKind};
    use std::collections::BTreeMap;

    fn case(reference: Letter) -> TestCase {
        let mut options = BTreeMap::new();
        options.insert(Letter::A, "apple".to_string());
        options.insert(Letter::B, "pear".to_string());
        options.insert(Letter::C, "plum".to_string());
        options.insert(Letter::D, "fig".to_string());
        TestCase {
            id: "g01f01:easy:000".into(),
            image_path: "images/x.png".into(),
            aspect_id: AspectId::new(0, 0),
            aspect_name: "Fruit Naming".into(),
            difficulty: Difficulty::Easy,
            question: "Which fruit is shown?".into(),
            options,
            reference,
            provenance: crate::testcases::CaseProvenance {
                generator_examiner: "e".into(),
                adjuster_examiner: None,
                adjusted: false,
                adjustment_fallback: false,
                replaced_slot: None,
                draft_options: BTreeMap::new(),
                draft_reference: Letter::A,
                adversarial_text: None,
                image_attempts: 1,
                image_forced: false,
            },
        }
    }

    fn response(raw: &str) -> CandidateResponse {
        CandidateResponse {
            case_id: "g01f01:easy:000".into(),
            candidate: "cand".into(),
            raw_text: raw.to_string(),
            parsed: parse_choice(raw),
            image_withheld: false,
        }
    }

    #[test]
    fn parse_choice_variants() {
        assert_eq!(parse_choice("[[B]] because the dog..."), Some(Letter::B));
        assert_eq!(parse_choice("The answer is C."), None);
        assert_eq!(parse_choice("[[a]] ... [[D]]"), Some(Letter::A));
        assert_eq!(parse_choice("[[E]] then [[c]]"), Some(Letter::C));
        assert_eq!(parse_choice("[[ A ]]"), None);
        assert_eq!(parse_choice(""), None);
    }

    #[test]
    fn ask_candidate_attaches_image_unless_withheld() {
        let script = ScriptedTransport::texts(&["[[A]] first", "[[B]] second"]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("cand", BackendKind::ChatVision),
            Box::new(script.clone_handle()),
        )]);
        let c = case(Letter::A);
        let with = ask_candidate(&gw, &"cand".into(), &c, Some(vec![1, 2, 3]), false).unwrap();
        assert!(!with.image_withheld);
        let without = ask_candidate(&gw, &"cand".into(), &c, None, true).unwrap();
        assert!(without.image_withheld);
        let requests = script.requests();
        assert_eq!(requests[0].images.len(), 1);
        assert_eq!(requests[1].images.len(), 0);
        // identical prompt text either way; only the payload is dropped
        assert_eq!(requests[0].user_text, requests[1].user_text);
        // withholding requires no bytes, but normal mode does
        assert!(matches!(
            ask_candidate(&gw, &"cand".into(), &c, None, false),
            Err(EvalError::MissingImage)
        ));
    }

    #[test]
    fn judge_skips_backend_for_parsed_letters() {
        let script = ScriptedTransport::texts(&[]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("judge", BackendKind::ChatVision),
            Box::new(script.clone_handle()),
        )]);
        let judgment = judge(
            &gw,
            &"judge".into(),
            &case(Letter::B),
            &response("[[B]] it is"),
            false,
            2,
        )
        .unwrap();
        assert!(judgment.correct);
        assert_eq!(judgment.method, JudgeMethod::Parsed);
        assert_eq!(script.calls(), 0);

        let judgment = judge(
            &gw,
            &"judge".into(),
            &case(Letter::C),
            &response("[[B]] it is"),
            false,
            2,
        )
        .unwrap();
        assert!(!judgment.correct);
    }

    #[test]
    fn unparseable_routes_to_judge() {
        let script = ScriptedTransport::texts(&["{\"matches_reference\": \"yes\"}"]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("judge", BackendKind::ChatVision),
            Box::new(script.clone_handle()),
        )]);
        let judgment = judge(
            &gw,
            &"judge".into(),
            &case(Letter::B),
            &response("I choose pear."),
            false,
            2,
        )
        .unwrap();
        assert!(judgment.correct);
        assert_eq!(judgment.method, JudgeMethod::Judged);
        assert_eq!(script.calls(), 1);
    }

    #[test]
    fn judge_always_overrides_parse() {
        let script = ScriptedTransport::texts(&["{\"matches_reference\": \"no\"}"]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("judge", BackendKind::ChatVision),
            Box::new(script.clone_handle()),
        )]);
        let judgment = judge(
            &gw,
            &"judge".into(),
            &case(Letter::B),
            &response("[[B]] sure"),
            true,
            2,
        )
        .unwrap();
        assert!(!judgment.correct);
        assert_eq!(judgment.method, JudgeMethod::Judged);
        assert_eq!(script.calls(), 1);
    }

    #[test]
    fn unusable_judge_reply_flags_incorrect() {
        let script = ScriptedTransport::texts(&["hmm", "not sure", "perhaps"]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("judge", BackendKind::ChatVision),
            Box::new(script),
        )]);
        let judgment = judge(
            &gw,
            &"judge".into(),
            &case(Letter::B),
            &response("free text"),
            false,
            2,
        )
        .unwrap();
        assert!(!judgment.correct);
        assert!(judgment.judge_flagged);
    }

    #[test]
    fn accuracy_arithmetic() {
        let outcomes: Vec<bool> = (0..209).map(|i| i < 161).collect();
        assert_eq!(accuracy(outcomes).unwrap().to_string(), "77.03%");
        assert_eq!(accuracy(vec![true, true]).unwrap().to_string(), "100.00%");
        assert!(matches!(
            accuracy(Vec::<bool>::new()),
            Err(EvalError::EmptySet)
        ));
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let a = vec![true, false, true, true, false];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(accuracy(a).unwrap(), accuracy(b).unwrap());
    }

    fn record(
        candidate: &str,
        input: &str,
        difficulty: Difficulty,
        case_id: &str,
        correct: bool,
    ) -> JudgmentRecord {
        JudgmentRecord {
            candidate: candidate.into(),
            user_input: input.to_string(),
            difficulty,
            aspect_id: AspectId::new(0, 0),
            case_id: case_id.to_string(),
            examiner: "e".into(),
            layout: PositionMode::Balanced,
            image_withheld: false,
            correct,
            method: JudgeMethod::Parsed,
        }
    }

    #[test]
    fn duplicate_judgments_rejected() {
        let mut book = ScoreBook::new();
        book.add(record("c", "basic", Difficulty::Easy, "x", true))
            .unwrap();
        assert!(matches!(
            book.add(record("c", "basic", Difficulty::Easy, "x", false)),
            Err(EvalError::DuplicateJudgment { .. })
        ));
    }

    #[test]
    fn single_candidate_table_equals_its_accuracy() {
        let mut book = ScoreBook::new();
        for difficulty in Difficulty::ALL {
            for i in 0..4 {
                book.add(record(
                    "c",
                    "basic",
                    difficulty,
                    &format!("{difficulty}-{i}"),
                    i < 3,
                ))
                .unwrap();
            }
        }
        let table = book.aggregate_user_input_table().unwrap();
        assert_eq!(table.rows.len(), 1);
        for cell in &table.rows[0].cells {
            assert_eq!(cell.to_string(), "75.00%");
        }
        assert_eq!(table.rows[0].average.to_string(), "75.00%");
    }

    #[test]
    fn missing_cell_is_reported() {
        let mut book = ScoreBook::new();
        book.add(record("c1", "basic", Difficulty::Easy, "a", true))
            .unwrap();
        book.add(record("c2", "basic", Difficulty::Medium, "b", true))
            .unwrap();
        assert!(matches!(
            book.aggregate_user_input_table(),
            Err(EvalError::MissingCell { .. })
        ));
    }

    #[test]
    fn two_path_equality_judgments_vs_preset_cells() {
        let mut raw = ScoreBook::new();
        let mut seeded = crate::seeds::derive_rng(5, "two-path");
        use rand::Rng;
        for candidate in ["c1", "c2", "c3"] {
            for input in ["basic", "spatial"] {
                for difficulty in Difficulty::ALL {
                    for i in 0..20 {
                        let correct = seeded.gen_bool(0.6);
                        raw.add(record(
                            candidate,
                            input,
                            difficulty,
                            &format!("{input}-{difficulty}-{i}"),
                            correct,
                        ))
                        .unwrap();
                    }
                }
            }
        }
        let mut cached = ScoreBook::new();
        for candidate in raw.candidates() {
            for input in raw.user_inputs() {
                for difficulty in raw.difficulties() {
                    cached.set_cell(
                        candidate.clone(),
                        &input,
                        difficulty,
                        raw.cell(&candidate, &input, difficulty).unwrap(),
                    );
                }
            }
        }
        assert_eq!(
            raw.aggregate_user_input_table().unwrap(),
            cached.aggregate_user_input_table().unwrap()
        );
        assert_eq!(
            raw.aggregate_model_table().unwrap(),
            cached.aggregate_model_table().unwrap()
        );
    }

    #[test]
    fn deviation_rate_formula() {
        assert!((deviation_rate(0.6, 0.5).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(deviation_rate(0.5, 0.5).unwrap(), 0.0);
        assert!(matches!(
            deviation_rate(0.5, 0.0),
            Err(EvalError::ZeroBaseline)
        ));
    }

    #[test]
    fn examiner_variance_basics() {
        assert_eq!(examiner_variance(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!((examiner_variance(&[0.4, 0.6]).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(
            examiner_variance(&[0.4]),
            Err(EvalError::InsufficientSamples)
        ));
    }

    #[test]
    fn ranking_shares_minimum_rank_on_ties() {
        let scored = vec![
            ("a".into(), Percent::from_hundredths(9000)),
            ("b".into(), Percent::from_hundredths(9000)),
            ("c".into(), Percent::from_hundredths(5000)),
        ];
        let ranks = rank_by_accuracy(scored);
        let by_name: BTreeMap<String, u32> =
            ranks.into_iter().map(|(c, r)| (c.to_string(), r)).collect();
        assert_eq!(by_name["a"], 1);
        assert_eq!(by_name["b"], 1);
        assert_eq!(by_name["c"], 3);
    }

    #[test]
    fn single_candidate_ranks_first_everywhere() {
        let mut book = ScoreBook::new();
        for difficulty in Difficulty::ALL {
            book.add(record(
                "solo",
                "basic",
                difficulty,
                &format!("{difficulty}"),
                true,
            ))
            .unwrap();
        }
        let matrix = book.ranking_matrix().unwrap();
        assert!(matrix
            .rows
            .iter()
            .all(|row| row.ranks == vec![("solo".into(), 1)]));
    }
}
