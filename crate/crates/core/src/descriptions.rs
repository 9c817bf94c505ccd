//! Diverse description generation under a semantic-graph constraint.
//!
//! Each (fine aspect, difficulty) stream owns a word graph. Every generated
//! description contributes a topic word plus 4-6 keywords; the topic is
//! connected to each keyword, then the highest-degree words are excluded and
//! fed back to the next prompt as an avoid-list, steering the stream away
//! from overused vocabulary.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::aspects::{AspectId, FineAspect};
use crate::gateway::{ExaminerPool, Gateway, GatewayError, ModelRequest, RequestTag};
use crate::prompts;
use crate::seeds;

/// Difficulty grade of a description (and later of its question).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Difficulty> {
        match s.trim().to_lowercase().as_str() {
            "easy" => Some(Difficulty::Easy),
            "medium" => Some(Difficulty::Medium),
            "hard" => Some(Difficulty::Hard),
            _ => None,
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum DescriptionError {
    #[error("description output missing field `{0}`")]
    MissingField(&'static str),
    #[error("keyword count {0} outside the 4-6 range")]
    KeywordCount(usize),
    #[error("cannot exclude `{0}`: not a graph node")]
    NonMemberExclusion(String),
    #[error("could not parse a description after {attempts} attempts")]
    ParseFailure { attempts: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Undirected word graph with degree bookkeeping and the cumulative
/// avoid-list of excluded words. Word identity is case-folded exact match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticGraph {
    adjacency: BTreeMap<String, BTreeSet<String>>,
    excluded_history: BTreeSet<String>,
    iteration: u32,
    keep_floor: usize,
}

pub const DEFAULT_KEEP_FLOOR: usize = 3;

impl SemanticGraph {
    pub fn new(keep_floor: usize) -> Self {
        SemanticGraph {
            adjacency: BTreeMap::new(),
            excluded_history: BTreeSet::new(),
            iteration: 0,
            keep_floor,
        }
    }

    /// Rebuild a graph state directly from an edge list (for replay tools
    /// and oracle tests). Self-pairs are dropped and words case-folded.
    pub fn from_edges<'a>(
        words: impl IntoIterator<Item = &'a str>,
        edges: impl IntoIterator<Item = (&'a str, &'a str)>,
        iteration: u32,
        keep_floor: usize,
    ) -> Self {
        let mut graph = SemanticGraph::new(keep_floor);
        graph.iteration = iteration;
        for word in words {
            graph.adjacency.entry(fold(word)).or_default();
        }
        for (a, b) in edges {
            let (a, b) = (fold(a), fold(b));
            if a == b || a.is_empty() || b.is_empty() {
                continue;
            }
            graph
                .adjacency
                .entry(a.clone())
                .or_default()
                .insert(b.clone());
            graph.adjacency.entry(b).or_default().insert(a);
        }
        graph
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.adjacency.contains_key(&fold(word))
    }

    pub fn degree(&self, word: &str) -> usize {
        self.adjacency.get(&fold(word)).map_or(0, |n| n.len())
    }

    pub fn excluded_history(&self) -> &BTreeSet<String> {
        &self.excluded_history
    }

    pub fn neighbors(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.adjacency.get(&fold(word))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &String> {
        self.adjacency.keys()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(|n| n.len()).sum::<usize>() / 2
    }

    /// Add a topic word and its keywords, connecting the topic to each
    /// keyword (self-pairs dropped, multi-edges collapsed). Increments the
    /// iteration counter. A previously excluded word that reappears here is
    /// back in circulation, so it leaves the avoid history.
    pub fn update(&mut self, topic: &str, keywords: &[String]) {
        self.iteration += 1;
        let topic = fold(topic);
        self.admit(&topic);
        for keyword in keywords {
            let keyword = fold(keyword);
            if keyword == topic || keyword.is_empty() {
                continue;
            }
            self.admit(&keyword);
            self.adjacency
                .get_mut(&topic)
                .expect("topic admitted")
                .insert(keyword.clone());
            self.adjacency
                .get_mut(&keyword)
                .expect("keyword admitted")
                .insert(topic.clone());
        }
    }

    fn admit(&mut self, word: &str) {
        self.excluded_history.remove(word);
        self.adjacency.entry(word.to_string()).or_default();
    }

    /// The words the degree-based rule excludes at the current iteration:
    /// the min(e, max(0, |nodes| - keep_floor)) highest-degree nodes, ties
    /// broken toward the lexicographically smaller word. Equals brute-force
    /// subset enumeration of the same size.
    pub fn exclusion_set(&self) -> BTreeSet<String> {
        let budget =
            (self.iteration as usize).min(self.node_count().saturating_sub(self.keep_floor));
        let mut ranked: Vec<(&String, usize)> =
            self.adjacency.iter().map(|(w, n)| (w, n.len())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
            .into_iter()
            .take(budget)
            .map(|(w, _)| w.clone())
            .collect()
    }

    /// Remove the given nodes and their incident edges, appending them to
    /// the avoid history.
    pub fn apply_exclusion(&mut self, excluded: &BTreeSet<String>) -> Result<(), DescriptionError> {
        for word in excluded {
            if !self.adjacency.contains_key(word) {
                return Err(DescriptionError::NonMemberExclusion(word.clone()));
            }
        }
        for word in excluded {
            let neighbors = self.adjacency.remove(word).expect("membership checked");
            for neighbor in neighbors {
                if let Some(set) = self.adjacency.get_mut(&neighbor) {
                    set.remove(word);
                }
            }
            self.excluded_history.insert(word.clone());
        }
        Ok(())
    }

    /// Sha256 over the canonical serialization; recorded in transcripts so a
    /// replay can be checked for byte-identical state.
    pub fn snapshot_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_vec(self).expect("graph serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn fold(word: &str) -> String {
    word.trim().to_lowercase()
}

/// One parsed description with its diversity bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub aspect_id: AspectId,
    pub difficulty: Difficulty,
    pub prompt_text: String,
    pub topic_word: String,
    pub keywords: Vec<String>,
    /// Graph iteration that produced this record (1-based).
    pub iteration: u32,
    /// Position within the stream's quota (0-based).
    pub index: u32,
}

/// Raw fields parsed out of one examiner reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDescription {
    pub prompt_text: String,
    pub topic_word: String,
    pub keywords: Vec<String>,
}

/// Extract the `Prompt:` / `Topic word:` / `Key word:` fields. Keywords are
/// comma-split, trimmed of brackets and whitespace, and case-folded.
pub fn parse_description_output(text: &str) -> Result<ParsedDescription, DescriptionError> {
    let mut prompt_text = None;
    let mut topic_word = None;
    let mut keywords: Option<Vec<String>> = None;
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', ' ']);
        if let Some(rest) = labeled(line, "Prompt") {
            prompt_text = Some(rest.to_string());
        } else if let Some(rest) = labeled(line, "Topic word") {
            let word = rest.split_whitespace().next().unwrap_or("").to_lowercase();
            if !word.is_empty() {
                topic_word = Some(word);
            }
        } else if let Some(rest) = labeled(line, "Key word").or_else(|| labeled(line, "Key words"))
        {
            let list: Vec<String> = rest
                .split(',')
                .map(|w| w.trim().trim_matches(['[', ']', '.']).trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect();
            if !list.is_empty() {
                keywords = Some(list);
            }
        }
    }
    let prompt_text = prompt_text.ok_or(DescriptionError::MissingField("Prompt"))?;
    let topic_word = topic_word.ok_or(DescriptionError::MissingField("Topic word"))?;
    let keywords = keywords.ok_or(DescriptionError::MissingField("Key word"))?;
    if !(4..=6).contains(&keywords.len()) {
        return Err(DescriptionError::KeywordCount(keywords.len()));
    }
    Ok(ParsedDescription {
        prompt_text,
        topic_word,
        keywords,
    })
}

fn labeled<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let rest = line.strip_prefix(label)?;
    let rest = rest.trim_start().strip_prefix(':')?;
    Some(rest.trim().trim_matches(['[', ']']).trim())
}

/// Transcript entry persisted per iteration, sufficient to replay the graph
/// fold byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptionTranscript {
    pub v: u32,
    pub iteration: u32,
    pub rendered_prompt: String,
    pub raw_text: String,
    pub record: DescriptionRecord,
    /// Words removed by the exclusion step after this record's update.
    pub excluded: Vec<String>,
    pub graph_hash: String,
    /// Set when the examiner reused an avoided word even after the one
    /// permitted re-prompt.
    pub avoid_violation: bool,
}

/// Generate the stream's `quota` descriptions, threading the semantic graph
/// between iterations.
#[allow(clippy::too_many_arguments)]
pub fn generate_descriptions(
    gateway: &Gateway,
    pool: &ExaminerPool,
    aspect_id: &AspectId,
    aspect: &FineAspect,
    difficulty: Difficulty,
    graph: &mut SemanticGraph,
    quota: u32,
    retry_budget: u32,
) -> Result<Vec<DescriptionTranscript>, DescriptionError> {
    let mut transcripts = Vec::new();
    for index in 0..quota {
        let avoid: Vec<String> = graph.excluded_history().iter().cloned().collect();
        let draw_key = format!("describe/{aspect_id}/{difficulty}/{index}");
        let examiner = pool.pick(seeds::derive_u64(pool.rng_seed, &draw_key));

        let mut accepted: Option<(String, String, ParsedDescription, bool)> = None;
        let mut parse_attempt = 0u32;
        let mut avoid_retried = false;
        while accepted.is_none() {
            let rendered = prompts::description(
                &aspect.name,
                &aspect.introduction,
                difficulty,
                &avoid,
                parse_attempt,
            );
            let request = ModelRequest::text(
                RequestTag::Description,
                prompts::SYSTEM_EXAMINER,
                rendered.clone(),
            );
            let response = gateway.complete(examiner, &request)?;
            match parse_description_output(&response.text) {
                Ok(parsed) => {
                    let violating = parsed
                        .keywords
                        .iter()
                        .chain(std::iter::once(&parsed.topic_word))
                        .any(|w| avoid.contains(w));
                    if violating && !avoid_retried {
                        // One re-prompt for an avoid-list violation, then
                        // accept with a warning in the transcript.
                        avoid_retried = true;
                        parse_attempt += 1;
                        continue;
                    }
                    accepted = Some((rendered, response.text, parsed, violating));
                }
                Err(_) if parse_attempt < retry_budget => {
                    parse_attempt += 1;
                }
                Err(_) => {
                    return Err(DescriptionError::ParseFailure {
                        attempts: parse_attempt + 1,
                    })
                }
            }
        }
        let (rendered_prompt, raw_text, parsed, avoid_violation) =
            accepted.expect("loop exits via accept or error");

        graph.update(&parsed.topic_word, &parsed.keywords);
        let excluded = graph.exclusion_set();
        graph.apply_exclusion(&excluded)?;

        let record = DescriptionRecord {
            aspect_id: aspect_id.clone(),
            difficulty,
            prompt_text: parsed.prompt_text,
            topic_word: parsed.topic_word,
            keywords: parsed.keywords,
            iteration: graph.iteration(),
            index,
        };
        transcripts.push(DescriptionTranscript {
            v: 1,
            iteration: graph.iteration(),
            rendered_prompt,
            raw_text,
            record,
            excluded: excluded.into_iter().collect(),
            graph_hash: graph.snapshot_hash(),
            avoid_violation,
        });
    }
    Ok(transcripts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::script::ScriptedTransport;
    use crate::gateway::{BackendConfig, BackendKind};

    fn graph() -> SemanticGraph {
        SemanticGraph::new(0)
    }

    #[test]
    fn update_builds_star_topology() {
        let mut g = graph();
        g.update("beach", &["sand".into(), "wave".into()]);
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.degree("beach"), 2);
        assert_eq!(g.degree("sand"), 1);
    }

    #[test]
    fn resubmitted_topic_gains_degree() {
        let mut g = graph();
        g.update("beach", &["sand".into(), "wave".into()]);
        g.update("beach", &["gull".into()]);
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.degree("beach"), 3);
    }

    #[test]
    fn self_pair_dropped() {
        let mut g = graph();
        g.update("beach", &["beach".into(), "sand".into()]);
        assert_eq!(g.degree("beach"), 1);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn exclusion_prefers_high_degree_then_lexicographic() {
        let mut g = graph();
        // degrees: a:3 (hub), others 1
        g.update("a", &["x".into(), "y".into(), "z".into()]);
        assert_eq!(g.iteration(), 1);
        let ex = g.exclusion_set();
        assert_eq!(ex.into_iter().collect::<Vec<_>>(), vec!["a".to_string()]);

        // four nodes all tied at degree 2 resolve lexicographically
        let mut g2 = graph();
        g2.update("a", &["x".into(), "y".into()]);
        g2.update("b", &["x".into(), "y".into()]);
        g2.iteration = 1; // consider only one exclusion slot
        let ex = g2.exclusion_set();
        assert_eq!(ex.into_iter().collect::<Vec<_>>(), vec!["a".to_string()]);
    }

    #[test]
    fn keep_floor_caps_removals() {
        let mut g = SemanticGraph::new(3);
        for _ in 0..5 {
            g.update("hub", &["a".into(), "b".into(), "c".into()]);
        }
        // e = 5, |nodes| = 4, keep_floor = 3 -> exclude exactly 1
        assert_eq!(g.iteration(), 5);
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.exclusion_set().len(), 1);
    }

    #[test]
    fn apply_exclusion_removes_nodes_and_edges() {
        let mut g = graph();
        g.update("beach", &["sand".into(), "wave".into()]);
        let mut ex = BTreeSet::new();
        ex.insert("beach".to_string());
        g.apply_exclusion(&ex).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 0);
        assert!(g.excluded_history().contains("beach"));
    }

    #[test]
    fn empty_exclusion_is_identity() {
        let mut g = graph();
        g.update("beach", &["sand".into()]);
        let before = g.clone();
        g.apply_exclusion(&BTreeSet::new()).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn non_member_exclusion_rejected() {
        let mut g = graph();
        g.update("beach", &["sand".into()]);
        let mut ex = BTreeSet::new();
        ex.insert("mountain".to_string());
        assert!(matches!(
            g.apply_exclusion(&ex),
            Err(DescriptionError::NonMemberExclusion(_))
        ));
    }

    #[test]
    fn degrees_stay_consistent_after_exclusion() {
        let mut g = graph();
        g.update("hub", &["a".into(), "b".into(), "c".into(), "d".into()]);
        g.update("a", &["b".into(), "e".into(), "f".into(), "g".into()]);
        let ex = g.exclusion_set();
        g.apply_exclusion(&ex).unwrap();
        for (word, neighbors) in &g.adjacency {
            for n in neighbors {
                assert!(
                    g.adjacency[n].contains(word),
                    "edge {word}-{n} not symmetric"
                );
            }
        }
    }

    #[test]
    fn parse_canonical_description() {
        let text = "Aspect: Depth Ordering\nPrompt: A weathered canoe on a misty lake at dawn.\nTopic word: canoe\nKey word: lake, mist, dawn, paddle, reflection\n";
        let parsed = parse_description_output(text).unwrap();
        assert_eq!(parsed.topic_word, "canoe");
        assert_eq!(parsed.keywords.len(), 5);
        assert_eq!(
            parsed.prompt_text,
            "A weathered canoe on a misty lake at dawn."
        );
    }

    #[test]
    fn missing_keyword_line_is_missing_field() {
        let text = "Prompt: A canoe.\nTopic word: canoe\n";
        assert!(matches!(
            parse_description_output(text),
            Err(DescriptionError::MissingField("Key word"))
        ));
    }

    #[test]
    fn keywords_normalized_from_noisy_fixture() {
        let text = "Prompt: P.\nTopic word: [Canoe]\nKey word: [ Lake ,  MIST, dawn , paddle ]\n";
        let parsed = parse_description_output(text).unwrap();
        assert_eq!(parsed.topic_word, "canoe");
        assert_eq!(parsed.keywords, vec!["lake", "mist", "dawn", "paddle"]);
    }

    #[test]
    fn keyword_count_bounds_enforced() {
        let three = "Prompt: P.\nTopic word: t\nKey word: a, b, c\n";
        assert!(matches!(
            parse_description_output(three),
            Err(DescriptionError::KeywordCount(3))
        ));
        let seven = "Prompt: P.\nTopic word: t\nKey word: a, b, c, d, e, f, g\n";
        assert!(matches!(
            parse_description_output(seven),
            Err(DescriptionError::KeywordCount(7))
        ));
    }

    #[test]
    fn first_render_has_empty_avoid_list() {
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 5);
        let pool = ExaminerPool::new(vec!["e".into()], 5).unwrap();
        let mut g = SemanticGraph::new(DEFAULT_KEEP_FLOOR);
        let aspect = FineAspect {
            name: "Texture Naming".into(),
            introduction: "Names surface materials.".into(),
        };
        let transcripts = generate_descriptions(
            &gw,
            &pool,
            &AspectId::new(0, 0),
            &aspect,
            Difficulty::Easy,
            &mut g,
            1,
            3,
        )
        .unwrap();
        assert_eq!(transcripts.len(), 1);
        assert!(transcripts[0]
            .rendered_prompt
            .contains("Avoid using the following words in your new description: none"));
    }

    #[test]
    fn avoided_word_triggers_exactly_one_reprompt() {
        // Scripted examiner returns an avoided topic once, then a clean one.
        let violating = "Prompt: A beach.\nTopic word: beach\nKey word: sand, wave, gull, shell\n";
        let clean = "Prompt: A canyon.\nTopic word: canyon\nKey word: rock, river, cliff, dust\n";
        let script = ScriptedTransport::texts(&[violating, clean]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("e", BackendKind::ChatVision),
            Box::new(script),
        )]);
        let pool = ExaminerPool::new(vec!["e".into()], 1).unwrap();
        let mut g = SemanticGraph::new(0);
        g.update("beach", &["x".into(), "y".into(), "z".into(), "w".into()]);
        let ex = g.exclusion_set();
        g.apply_exclusion(&ex).unwrap();
        assert!(g.excluded_history().contains("beach"));

        let aspect = FineAspect {
            name: "A".into(),
            introduction: "B.".into(),
        };
        let transcripts = generate_descriptions(
            &gw,
            &pool,
            &AspectId::new(0, 0),
            &aspect,
            Difficulty::Easy,
            &mut g,
            1,
            3,
        )
        .unwrap();
        assert_eq!(transcripts[0].record.topic_word, "canyon");
        assert!(!transcripts[0].avoid_violation);
    }

    #[test]
    fn persistent_violation_accepted_with_warning() {
        let violating = "Prompt: A beach.\nTopic word: beach\nKey word: sand, wave, gull, shell\n";
        let script = ScriptedTransport::texts(&[violating, violating]);
        let gw = Gateway::with_transports(vec![(
            BackendConfig::mock("e", BackendKind::ChatVision),
            Box::new(script),
        )]);
        let pool = ExaminerPool::new(vec!["e".into()], 1).unwrap();
        let mut g = SemanticGraph::new(0);
        g.update("beach", &["x".into(), "y".into(), "z".into(), "w".into()]);
        let ex = g.exclusion_set();
        g.apply_exclusion(&ex).unwrap();

        let aspect = FineAspect {
            name: "A".into(),
            introduction: "B.".into(),
        };
        let transcripts = generate_descriptions(
            &gw,
            &pool,
            &AspectId::new(0, 0),
            &aspect,
            Difficulty::Easy,
            &mut g,
            1,
            3,
        )
        .unwrap();
        assert!(transcripts[0].avoid_violation);
        assert_eq!(transcripts[0].record.topic_word, "beach");
        // re-admission keeps the invariant: no node is ever also in history
        for word in g.excluded_history() {
            assert!(!g.contains(word), "`{word}` is both a node and excluded");
        }
    }

    #[test]
    fn graph_state_is_pure_fold_of_transcript() {
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 5);
        let pool = ExaminerPool::new(vec!["e".into()], 5).unwrap();
        let aspect = FineAspect {
            name: "Texture Naming".into(),
            introduction: "Names surface materials.".into(),
        };
        let mut live = SemanticGraph::new(DEFAULT_KEEP_FLOOR);
        let transcripts = generate_descriptions(
            &gw,
            &pool,
            &AspectId::new(0, 0),
            &aspect,
            Difficulty::Medium,
            &mut live,
            8,
            3,
        )
        .unwrap();

        let mut replay = SemanticGraph::new(DEFAULT_KEEP_FLOOR);
        for t in &transcripts {
            replay.update(&t.record.topic_word, &t.record.keywords);
            let ex: BTreeSet<String> = t.excluded.iter().cloned().collect();
            replay.apply_exclusion(&ex).unwrap();
            assert_eq!(replay.snapshot_hash(), t.graph_hash);
        }
        assert_eq!(replay, live);
    }

    #[test]
    fn records_carry_requested_difficulty() {
        let gw = Gateway::mock(vec![BackendConfig::mock("e", BackendKind::ChatVision)], 5);
        let pool = ExaminerPool::new(vec!["e".into()], 5).unwrap();
        let aspect = FineAspect {
            name: "N".into(),
            introduction: "I.".into(),
        };
        for d in Difficulty::ALL {
            let mut g = SemanticGraph::new(DEFAULT_KEEP_FLOOR);
            let ts =
                generate_descriptions(&gw, &pool, &AspectId::new(1, 2), &aspect, d, &mut g, 3, 3)
                    .unwrap();
            assert!(ts.iter().all(|t| t.record.difficulty == d));
        }
    }
}
