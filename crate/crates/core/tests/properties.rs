//! Property tests for the invariants that must hold over arbitrary
//! inputs rather than fixed fixtures.

use proptest::prelude::*;
use std::collections::BTreeSet;

use vqabench_core::descriptions::SemanticGraph;
use vqabench_core::evaluation::accuracy;
use vqabench_core::imaging::{triage, Verdict};
use vqabench_core::numeric::Ratio;
use vqabench_core::testcases::{
    assign_positions, letter_histogram, CaseDraft, CaseProvenance, Letter, PositionMode,
};

proptest! {
    /// The three-way verdict rule is total and exclusive over every
    /// rational score in [0,1] and every threshold in (0,1].
    #[test]
    fn triage_is_a_partition(num in 0u32..=60, den in 1u32..=60, zn in 1u32..=10, zd in 1u32..=10) {
        prop_assume!(num <= den);
        prop_assume!(zn <= zd);
        let score = Ratio::new(num, den).unwrap();
        let zeta = Ratio::new(zn, zd).unwrap();
        let verdict = triage(score, zeta);
        let below = (num as u64) * (zd as u64) < (zn as u64) * (den as u64);
        let exact = num == den;
        let expected = if below {
            Verdict::Regenerate
        } else if exact {
            Verdict::Accept
        } else {
            Verdict::AcceptWithErrors
        };
        prop_assert_eq!(verdict, expected);
    }

    /// Stored degrees always equal recomputed incident-edge counts, edges
    /// stay symmetric, and no node ever sits in the avoid history, no
    /// matter the update/exclusion sequence.
    #[test]
    fn graph_degrees_stay_consistent(steps in proptest::collection::vec((0usize..8, proptest::collection::vec(0usize..8, 1..5)), 1..20)) {
        let vocab = ["ash", "bay", "cove", "dune", "elm", "firth", "glen", "heath"];
        let mut graph = SemanticGraph::new(2);
        for (topic, keywords) in steps {
            let keyword_words: Vec<String> = keywords.iter().map(|k| vocab[*k].to_string()).collect();
            graph.update(vocab[topic], &keyword_words);
            let excluded = graph.exclusion_set();
            graph.apply_exclusion(&excluded).unwrap();

            let nodes: Vec<String> = graph.nodes().cloned().collect();
            let mut degree_sum = 0usize;
            for word in &nodes {
                let neighbors = graph.neighbors(word).unwrap();
                prop_assert_eq!(graph.degree(word), neighbors.len());
                degree_sum += neighbors.len();
                for neighbor in neighbors {
                    prop_assert!(graph.contains(neighbor), "edge to a removed node");
                    prop_assert!(graph.neighbors(neighbor).unwrap().contains(word), "asymmetric edge");
                    prop_assert_ne!(neighbor, word, "self-loop");
                }
            }
            prop_assert_eq!(degree_sum, 2 * graph.edge_count());

            for word in &excluded {
                prop_assert!(!graph.contains(word));
                prop_assert!(graph.excluded_history().contains(word));
            }
            for word in graph.excluded_history() {
                prop_assert!(!graph.contains(word));
            }
        }
    }

    /// Accuracy ignores judgment order.
    #[test]
    fn accuracy_permutation_invariant(mut outcomes in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let forward = accuracy(outcomes.clone()).unwrap();
        // cheap deterministic shuffle
        let len = outcomes.len();
        for i in 0..len {
            let j = ((seed as usize).wrapping_mul(31).wrapping_add(i * 17)) % len;
            outcomes.swap(i, j);
        }
        prop_assert_eq!(accuracy(outcomes).unwrap(), forward);
    }

    /// Any multiple-of-4 case stream gets an exactly uniform correct-letter
    /// histogram in balanced mode, and the correct text sits at the
    /// reference letter.
    #[test]
    fn balanced_blocks_exactly_uniform(blocks in 1usize..40, seed in any::<u64>()) {
        let count = blocks * 4;
        let drafts: Vec<CaseDraft> = (0..count).map(|i| CaseDraft {
            id: format!("c{i}"),
            image_path: String::new(),
            aspect_id: vqabench_core::AspectId::new(0, 0),
            aspect_name: "a".into(),
            difficulty: vqabench_core::Difficulty::Easy,
            question: "q".into(),
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
        }).collect();
        let cases = assign_positions(drafts, PositionMode::Balanced, seed);
        prop_assert_eq!(letter_histogram(&cases), [blocks, blocks, blocks, blocks]);
        for (i, case) in cases.iter().enumerate() {
            prop_assert_eq!(&case.options[&case.reference], &format!("right-{i}"));
            let texts: BTreeSet<&String> = case.options.values().collect();
            prop_assert_eq!(texts.len(), 4);
        }
    }

    /// Ratio decimal parsing is exact: parsing "0.d..." equals the integer
    /// fraction it denotes.
    #[test]
    fn ratio_decimal_parse_is_exact(num in 0u32..=1000) {
        let text = format!("{}.{:03}", num / 1000, num % 1000);
        let parsed: Ratio = text.parse().unwrap();
        prop_assert_eq!(parsed, Ratio::new(num, 1000).unwrap());
    }
}
