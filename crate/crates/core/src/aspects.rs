//! Hierarchical aspect generation: a user demand becomes n general aspects,
//! each with m fine-grained aspects. The n x m fine-grained aspects are the
//! benchmark's unit of work; general aspects group them.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

use crate::gateway::{BackendId, Gateway, GatewayError, ModelRequest, RequestTag};
use crate::prompts;

/// The capability demand that seeds a benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UserInput {
    /// Short label, such as `basic` or a custom name.
    pub name: String,
    /// Free-form statement of the capability to test.
    pub demand: String,
}

impl UserInput {
    pub fn new(name: impl Into<String>, demand: impl Into<String>) -> Self {
        UserInput {
            name: name.into(),
            demand: demand.into(),
        }
    }

    /// The five stock capability areas.
    pub fn standard(name: &str) -> Option<Self> {
        let demand = match name {
            "basic" => "Recognize and identify the individual objects, characters, and scenes shown in an image.",
            "spatial" => "Interpret the arrangement and positioning of objects: depth, distance, orientation, foreground and background.",
            "semantic" => "Interpret higher-level meaning: roles, interactions, and the narrative the elements form together.",
            "reasoning" => "Infer outcomes and causal connections between elements, and judge what is likely given the visual cues.",
            "atmospheric" => "Read the mood, tone, and emotional ambiance the image conveys.",
            _ => return None,
        };
        Some(UserInput::new(name, demand))
    }

    /// Filesystem-safe slug for directory names.
    pub fn slug(&self) -> String {
        slugify(&self.name)
    }
}

pub fn slugify(text: &str) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

/// Stable identifier of one fine-grained aspect: `g01f03` is the third fine
/// aspect under the first general aspect. Sorts in tree order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AspectId(pub String);

impl AspectId {
    pub fn new(general_index: usize, fine_index: usize) -> Self {
        AspectId(format!("g{:02}f{:02}", general_index + 1, fine_index + 1))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AspectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FineAspect {
    pub name: String,
    pub introduction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GeneralAspect {
    pub name: String,
    pub fine: Vec<FineAspect>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AspectTree {
    pub user_input: UserInput,
    pub general_count: u32,
    pub fine_count: u32,
    pub general: Vec<GeneralAspect>,
}

impl AspectTree {
    /// All fine aspects in tree order with their stable ids.
    pub fn fine_aspects(&self) -> Vec<(AspectId, &GeneralAspect, &FineAspect)> {
        let mut out = Vec::new();
        for (gi, general) in self.general.iter().enumerate() {
            for (fi, fine) in general.fine.iter().enumerate() {
                out.push((AspectId::new(gi, fi), general, fine));
            }
        }
        out
    }

    pub fn fine_total(&self) -> usize {
        self.general.iter().map(|g| g.fine.len()).sum()
    }

    /// Checks the structural invariants: n general aspects, m fine aspects
    /// each, case-folded fine names unique tree-wide.
    pub fn validate(&self) -> Result<(), AspectError> {
        if self.general.len() != self.general_count as usize {
            return Err(AspectError::WrongShape(format!(
                "expected {} general aspects, found {}",
                self.general_count,
                self.general.len()
            )));
        }
        let mut names = BTreeSet::new();
        for general in &self.general {
            if general.fine.len() != self.fine_count as usize {
                return Err(AspectError::WrongShape(format!(
                    "general aspect `{}` has {} fine aspects, expected {}",
                    general.name,
                    general.fine.len(),
                    self.fine_count
                )));
            }
            for fine in &general.fine {
                if fine.name.trim().is_empty() || fine.introduction.trim().is_empty() {
                    return Err(AspectError::WrongShape(format!(
                        "fine aspect under `{}` has an empty name or introduction",
                        general.name
                    )));
                }
                if !names.insert(fine.name.to_lowercase()) {
                    return Err(AspectError::WrongShape(format!(
                        "duplicate fine aspect name `{}`",
                        fine.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AspectError {
    #[error("aspect count must be at least 1")]
    ZeroCount,
    #[error("no complete aspect blocks in examiner output")]
    ZeroCompleteBlocks,
    #[error("could not assemble {wanted} aspects after {attempts} attempts (got {got})")]
    ParseFailure {
        wanted: usize,
        got: usize,
        attempts: u32,
    },
    #[error("malformed aspect tree: {0}")]
    WrongShape(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One parsed block: a general aspect name and the complete
/// (fine name, introduction) pairs beneath it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AspectBlock {
    pub general: String,
    pub fine: Vec<(String, String)>,
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let trimmed = line
        .trim_start_matches(['-', '*', '+', ' ', '\t', '>'])
        .trim();
    // tolerate numbered list markers like "3." or "3)"
    let trimmed = match trimmed.split_once(['.', ')']) {
        Some((head, rest)) if head.chars().all(|c| c.is_ascii_digit()) && !head.is_empty() => {
            rest.trim_start()
        }
        _ => trimmed,
    };
    let rest = trimmed.strip_prefix(label)?;
    let rest = rest.trim_start().strip_prefix(':')?;
    Some(rest.trim().trim_matches(['[', ']']).trim())
}

fn fine_label(line: &str) -> Option<&str> {
    strip_label(line, "Fined-grained Aspect")
        .or_else(|| strip_label(line, "Fine-grained Aspect"))
        .or_else(|| strip_label(line, "Fine-Grained Aspect"))
}

/// Line-oriented extraction of general/fine aspect blocks, tolerant to list
/// markers and stray surrounding text. Fine entries missing their
/// `Introduction:` line are dropped; everything else is kept.
pub fn parse_aspect_block(text: &str) -> Result<Vec<AspectBlock>, AspectError> {
    let mut blocks: Vec<AspectBlock> = Vec::new();
    let mut pending_fine: Option<String> = None;
    for line in text.lines() {
        if let Some(name) = strip_label(line, "General Aspect") {
            if !name.is_empty() {
                pending_fine = None;
                blocks.push(AspectBlock {
                    general: name.to_string(),
                    fine: Vec::new(),
                });
            }
        } else if let Some(name) = fine_label(line) {
            pending_fine = (!name.is_empty()).then(|| name.to_string());
        } else if let Some(intro) = strip_label(line, "Introduction") {
            if let (Some(name), Some(block)) = (pending_fine.take(), blocks.last_mut()) {
                if !intro.is_empty() {
                    block.fine.push((name, intro.to_string()));
                }
            }
        }
    }
    if blocks.is_empty() {
        return Err(AspectError::ZeroCompleteBlocks);
    }
    Ok(blocks)
}

/// Extraction for fine-aspect-only responses (no `General Aspect:` lines).
pub fn parse_fine_pairs(text: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for line in text.lines() {
        if let Some(name) = fine_label(line) {
            pending = (!name.is_empty()).then(|| name.to_string());
        } else if let Some(intro) = strip_label(line, "Introduction") {
            if let Some(name) = pending.take() {
                if !intro.is_empty() {
                    pairs.push((name, intro.to_string()));
                }
            }
        }
    }
    pairs
}

/// Ask the examiner for exactly `n` general aspects, re-prompting on
/// shortfall up to `retry_budget` extra attempts.
pub fn generate_general_aspects(
    gateway: &Gateway,
    examiner: &BackendId,
    user_input: &UserInput,
    n: u32,
    retry_budget: u32,
) -> Result<Vec<String>, AspectError> {
    if n == 0 {
        return Err(AspectError::ZeroCount);
    }
    let mut names: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for attempt in 0..=retry_budget {
        let prompt = prompts::aspect_general(&user_input.name, &user_input.demand, n, attempt);
        let request =
            ModelRequest::text(RequestTag::AspectGeneral, prompts::SYSTEM_EXAMINER, prompt);
        let response = gateway.complete(examiner, &request)?;
        if let Ok(blocks) = parse_aspect_block(&response.text) {
            for block in blocks {
                if seen.insert(block.general.to_lowercase()) {
                    names.push(block.general);
                }
            }
        }
        if names.len() >= n as usize {
            names.truncate(n as usize);
            return Ok(names);
        }
    }
    Err(AspectError::ParseFailure {
        wanted: n as usize,
        got: names.len(),
        attempts: retry_budget + 1,
    })
}

/// Ask the examiner for exactly `m` fine aspects under one general aspect.
/// Names colliding (case-folded) with `taken` or with each other are
/// discarded and refilled by re-prompting.
pub fn generate_fine_aspects(
    gateway: &Gateway,
    examiner: &BackendId,
    user_input: &UserInput,
    general: &str,
    m: u32,
    taken: &BTreeSet<String>,
    retry_budget: u32,
) -> Result<Vec<FineAspect>, AspectError> {
    if m == 0 {
        return Err(AspectError::ZeroCount);
    }
    let mut fine: Vec<FineAspect> = Vec::new();
    let mut seen: BTreeSet<String> = taken.clone();
    for attempt in 0..=retry_budget {
        let taken_list: Vec<String> = seen.iter().cloned().collect();
        let prompt = prompts::aspect_fine(
            &user_input.name,
            &user_input.demand,
            general,
            m,
            &taken_list,
            attempt,
        );
        let request = ModelRequest::text(RequestTag::AspectFine, prompts::SYSTEM_EXAMINER, prompt);
        let response = gateway.complete(examiner, &request)?;
        for (name, introduction) in parse_fine_pairs(&response.text) {
            if seen.insert(name.to_lowercase()) {
                fine.push(FineAspect { name, introduction });
            }
        }
        if fine.len() >= m as usize {
            fine.truncate(m as usize);
            return Ok(fine);
        }
    }
    Err(AspectError::ParseFailure {
        wanted: m as usize,
        got: fine.len(),
        attempts: retry_budget + 1,
    })
}

/// Build the whole tree: one examiner call for the general layer, one per
/// general aspect for the fine layer.
pub fn build_tree(
    gateway: &Gateway,
    pool: &crate::gateway::ExaminerPool,
    user_input: &UserInput,
    n: u32,
    m: u32,
    retry_budget: u32,
) -> Result<AspectTree, AspectError> {
    let general_examiner = pool.pick(crate::seeds::derive_u64(pool.rng_seed, "aspects/general"));
    let names = generate_general_aspects(gateway, general_examiner, user_input, n, retry_budget)?;

    let mut taken: BTreeSet<String> = BTreeSet::new();
    let mut general = Vec::new();
    for (index, name) in names.into_iter().enumerate() {
        let examiner = pool.pick(crate::seeds::derive_u64(
            pool.rng_seed,
            &format!("aspects/fine/{index}"),
        ));
        let fine = generate_fine_aspects(
            gateway,
            examiner,
            user_input,
            &name,
            m,
            &taken,
            retry_budget,
        )?;
        for f in &fine {
            taken.insert(f.name.to_lowercase());
        }
        general.push(GeneralAspect { name, fine });
    }

    let tree = AspectTree {
        user_input: user_input.clone(),
        general_count: n,
        fine_count: m,
        general,
    };
    tree.validate()?;
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::script::{ScriptStep, ScriptedTransport};
    use crate::gateway::{BackendConfig, BackendKind, ExaminerPool};

    const TWO_BLOCK_FIXTURE: &str = "\
General Aspect: Object Recognition
Fined-grained Aspect: Small Object Detection
Introduction: Checks whether tiny items are found.
Fined-grained Aspect: Texture Naming
Introduction: Checks whether surface materials are named.
General Aspect: Scene Layout
Fined-grained Aspect: Depth Ordering
Introduction: Checks which object is in front.
";

    #[test]
    fn parses_canonical_two_block_fixture() {
        let blocks = parse_aspect_block(TWO_BLOCK_FIXTURE).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].general, "Object Recognition");
        assert_eq!(blocks[0].fine.len(), 2);
        assert_eq!(blocks[1].fine[0].0, "Depth Ordering");
    }

    #[test]
    fn empty_text_is_zero_complete_blocks() {
        assert!(matches!(
            parse_aspect_block(""),
            Err(AspectError::ZeroCompleteBlocks)
        ));
    }

    #[test]
    fn fine_block_missing_introduction_is_dropped() {
        let fixture = "\
General Aspect: One
Fined-grained Aspect: Kept
Introduction: Has an introduction.
Fined-grained Aspect: Dropped
General Aspect: Two
Fined-grained Aspect: Also Kept
Introduction: Fine.
";
        let blocks = parse_aspect_block(fixture).unwrap();
        assert_eq!(blocks[0].fine.len(), 1);
        assert_eq!(blocks[0].fine[0].0, "Kept");
        assert_eq!(blocks[1].fine.len(), 1);
    }

    #[test]
    fn tolerates_list_markers_and_brackets() {
        let fixture = "\
- General Aspect: [Color Reading]
  * Fined-grained Aspect: [Hue Matching]
    Introduction: [Matches hues across regions.]
";
        let blocks = parse_aspect_block(fixture).unwrap();
        assert_eq!(blocks[0].general, "Color Reading");
        assert_eq!(
            blocks[0].fine[0],
            (
                "Hue Matching".to_string(),
                "Matches hues across regions.".to_string()
            )
        );
    }

    #[test]
    fn block_order_noise_does_not_change_content() {
        // Shuffling complete blocks yields the same set of pairs.
        let shuffled = "\
General Aspect: Scene Layout
Fined-grained Aspect: Depth Ordering
Introduction: Checks which object is in front.
General Aspect: Object Recognition
Fined-grained Aspect: Texture Naming
Introduction: Checks whether surface materials are named.
Fined-grained Aspect: Small Object Detection
Introduction: Checks whether tiny items are found.
";
        let collect = |text: &str| -> BTreeSet<(String, String)> {
            parse_aspect_block(text)
                .unwrap()
                .into_iter()
                .flat_map(|b| b.fine)
                .collect()
        };
        assert_eq!(collect(TWO_BLOCK_FIXTURE), collect(shuffled));
    }

    #[test]
    fn zero_count_rejected() {
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 1);
        let err = generate_general_aspects(
            &gw,
            &"e".into(),
            &UserInput::standard("basic").unwrap(),
            0,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, AspectError::ZeroCount));
    }

    #[test]
    fn mock_tree_has_exactly_n_by_m_fine_aspects() {
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 7);
        let pool = ExaminerPool::new(vec!["e".into()], 7).unwrap();
        let tree = build_tree(&gw, &pool, &UserInput::standard("basic").unwrap(), 4, 6, 3).unwrap();
        assert_eq!(tree.general.len(), 4);
        assert_eq!(tree.fine_total(), 24);
        tree.validate().unwrap();
    }

    #[test]
    fn parsed_names_match_canned_mock_reply() {
        // The tree must echo exactly what the backend said.
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 11);
        let user = UserInput::standard("spatial").unwrap();
        let prompt = prompts::aspect_general(&user.name, &user.demand, 4, 0);
        let raw = gw
            .complete(
                &"e".into(),
                &ModelRequest::text(RequestTag::AspectGeneral, prompts::SYSTEM_EXAMINER, prompt),
            )
            .unwrap();
        let canned: Vec<String> = parse_aspect_block(&raw.text)
            .unwrap()
            .into_iter()
            .map(|b| b.general)
            .collect();
        let parsed = generate_general_aspects(&gw, &"e".into(), &user, 4, 0).unwrap();
        assert_eq!(parsed, canned);
    }

    #[test]
    fn duplicate_fine_names_trigger_reprompt() {
        // First reply collides with an already-taken name; the builder must
        // re-prompt and fill the gap from the second reply.
        let script = ScriptedTransport::new(vec![
            ScriptStep::Text("Fined-grained Aspect: Taken Name\nIntroduction: Collides.\nFined-grained Aspect: Fresh One\nIntroduction: Good.\n".into()),
            ScriptStep::Text("Fined-grained Aspect: Second Fresh\nIntroduction: Also good.\n".into()),
        ]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("e", BackendKind::ChatVision),
            Box::new(script),
        )]);
        let mut taken = BTreeSet::new();
        taken.insert("taken name".to_string());
        let fine = generate_fine_aspects(
            &gw,
            &"e".into(),
            &UserInput::standard("basic").unwrap(),
            "General",
            2,
            &taken,
            2,
        )
        .unwrap();
        let names: Vec<&str> = fine.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, vec!["Fresh One", "Second Fresh"]);
    }

    #[test]
    fn m_of_one_yields_singleton() {
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 7);
        let fine = generate_fine_aspects(
            &gw,
            &"e".into(),
            &UserInput::standard("basic").unwrap(),
            "General",
            1,
            &BTreeSet::new(),
            2,
        )
        .unwrap();
        assert_eq!(fine.len(), 1);
        assert!(!fine[0].introduction.is_empty());
    }

    #[test]
    fn parse_shortfall_exhausts_budget() {
        let script = ScriptedTransport::texts(&["no blocks here", "still nothing", "nope"]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("e", BackendKind::ChatVision),
            Box::new(script),
        )]);
        let err = generate_general_aspects(
            &gw,
            &"e".into(),
            &UserInput::standard("basic").unwrap(),
            2,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, AspectError::ParseFailure { attempts: 3, .. }));
    }

    #[test]
    fn slugify_flattens_odd_names() {
        assert_eq!(slugify("Basic Understanding!"), "basic-understanding");
        assert_eq!(slugify("  spatial  "), "spatial");
    }
}
