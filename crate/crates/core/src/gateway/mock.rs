//! Seeded deterministic mock transport.
//!
//! Every reply is a pure function of (backend seed, request tag, request
//! text, attached image bytes). Replies follow the same structured formats
//! the real prompts mandate, so every downstream parser sees realistic
//! input without a network.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendConfig, BackendKind, MockProfile, ModelRequest, RawReply, RequestTag, Transport,
    TransportError,
};

pub struct MockTransport {
    seed: u64,
}

impl MockTransport {
    pub fn new(seed: u64) -> Self {
        MockTransport { seed }
    }

    fn rng_for(&self, request: &ModelRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0x1d]);
        hasher.update(request.tag.as_str().as_bytes());
        hasher.update([0x1d]);
        hasher.update(request.user_text.as_bytes());
        for image in &request.images {
            hasher.update([0x1d]);
            hasher.update(image);
        }
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }
}

impl Transport for MockTransport {
    fn execute(
        &self,
        config: &BackendConfig,
        request: &ModelRequest,
    ) -> Result<RawReply, TransportError> {
        let mut rng = self.rng_for(request);
        if config.kind == BackendKind::TextToImage {
            return Ok(RawReply {
                text: String::new(),
                image: Some(synthetic_png(&mut rng)),
            });
        }
        let text = match request.tag {
            RequestTag::AspectGeneral => general_aspects(&mut rng, &request.user_text),
            RequestTag::AspectFine => fine_aspects(&mut rng, &request.user_text),
            RequestTag::Description => description(&mut rng, &request.user_text),
            RequestTag::AlignQuestions => align_questions(&mut rng, &request.user_text),
            RequestTag::AlignAnswer => align_answer(&mut rng),
            RequestTag::Question => question(&mut rng),
            RequestTag::OptionAdjust => option_adjust(&mut rng, &request.user_text),
            RequestTag::CandidateAnswer => candidate_answer(&mut rng, config.mock_profile),
            RequestTag::Judge => judge(&mut rng),
            RequestTag::ImageGen => {
                return Err(TransportError::Fatal(
                    "image-gen request on a chat backend".into(),
                ))
            }
        };
        Ok(RawReply { text, image: None })
    }
}

// ---------------------------------------------------------------------------
// Word pools
// ---------------------------------------------------------------------------

const ADJECTIVES: &[&str] = &[
    "weathered",
    "gleaming",
    "crimson",
    "azure",
    "amber",
    "foggy",
    "sunlit",
    "moonlit",
    "rustic",
    "polished",
    "tangled",
    "frosted",
    "dusty",
    "vivid",
    "pale",
    "speckled",
    "curved",
    "angular",
    "woven",
    "carved",
    "glassy",
    "mossy",
    "striped",
    "faded",
    "bright",
    "shadowed",
    "narrow",
    "broad",
    "quiet",
    "busy",
    "ancient",
    "modern",
    "wind-swept",
    "snow-dusted",
    "rain-soaked",
    "golden",
];

const NOUNS: &[&str] = &[
    "lighthouse",
    "orchard",
    "canoe",
    "lantern",
    "bridge",
    "market",
    "violin",
    "kettle",
    "bicycle",
    "harbor",
    "meadow",
    "staircase",
    "greenhouse",
    "fountain",
    "hammock",
    "windmill",
    "anchor",
    "terrace",
    "satchel",
    "easel",
    "compass",
    "tram",
    "pier",
    "vineyard",
    "courtyard",
    "sled",
    "telescope",
    "aviary",
    "quarry",
    "chapel",
    "mosaic",
    "barge",
    "pagoda",
    "cabin",
    "silo",
    "jetty",
    "gazebo",
    "atrium",
    "loft",
    "kiln",
    "waterfall",
    "dune",
    "glacier",
    "reef",
    "plateau",
    "canyon",
    "grove",
    "marsh",
    "tundra",
    "cliff",
];

const SETTINGS: &[&str] = &[
    "beside a copper fence",
    "under a violet sky",
    "near a drifting fog bank",
    "along a cobbled lane",
    "beneath paper lanterns",
    "at the edge of a tidal pool",
    "inside a glass conservatory",
    "on a terraced hillside",
    "next to a rusted railcar",
    "under strings of festival lights",
    "beside a frozen brook",
    "within a walled garden",
    "near a painted mural",
    "on a floating dock",
    "along a chalk cliff path",
    "under a canopy of maples",
    "at a quiet crossroads",
    "beside stacked crates",
];

const DETAILS: &[&str] = &[
    "long shadows stretching across the ground",
    "soft reflections on wet stone",
    "steam curling upward",
    "scattered petals in the foreground",
    "a distant flock of birds",
    "light filtering through slats",
    "ripples spreading outward",
    "footprints leading away",
    "hanging tools on a pegboard",
    "a half-open door",
    "patched sails catching wind",
    "chalk marks on the pavement",
];

const APTITUDES: &[&str] = &[
    "Recognition",
    "Localization",
    "Discrimination",
    "Interpretation",
    "Detection",
    "Assessment",
    "Comparison",
    "Tracking",
    "Identification",
    "Reading",
];

const SUBJECT_AREAS: &[&str] = &[
    "Object",
    "Scene",
    "Texture",
    "Contour",
    "Lighting",
    "Color",
    "Layout",
    "Material",
    "Gesture",
    "Signage",
    "Foreground",
    "Background",
    "Silhouette",
    "Pattern",
    "Surface",
    "Boundary",
    "Count",
    "Pose",
    "Depth",
    "Motion",
    "Occlusion",
    "Symmetry",
    "Proportion",
    "Perspective",
];

const ELEMENT_TYPES: &[&str] = &[
    "object",
    "human",
    "animal",
    "food",
    "activity",
    "attribute",
    "counting",
    "color",
    "material",
    "spatial",
    "location",
    "shape",
];

// ---------------------------------------------------------------------------
// Prompt-scraping helpers. The mock behaves like an instruction follower:
// counts and avoid-lists are read back out of the rendered prompt.
// ---------------------------------------------------------------------------

fn requested_count(user_text: &str, marker: &str, fallback: usize) -> usize {
    let Some(pos) = user_text.find(marker) else {
        return fallback;
    };
    let rest = &user_text[pos + marker.len()..];
    let digits: String = rest
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().unwrap_or(fallback)
}

fn avoid_words(user_text: &str) -> Vec<String> {
    for line in user_text.lines() {
        if let Some(pos) = line.find("Avoid using the following words") {
            let rest = &line[pos..];
            if let Some(colon) = rest.find(':') {
                return rest[colon + 1..]
                    .split(',')
                    .map(|w| w.trim().to_lowercase())
                    .filter(|w| !w.is_empty() && w != "none")
                    .collect();
            }
        }
    }
    Vec::new()
}

/// Content words of the description echoed in a prompt, for element picking.
fn content_words(text: &str) -> Vec<String> {
    let mut words: Vec<String> = text
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| w.len() > 3)
        .map(|w| w.to_lowercase())
        .collect();
    words.dedup();
    words.sort();
    words.dedup();
    words
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

// ---------------------------------------------------------------------------
// Per-stage canned replies
// ---------------------------------------------------------------------------

fn general_aspects(rng: &mut ChaCha8Rng, user_text: &str) -> String {
    let n = requested_count(user_text, "Come up with", 4);
    let mut out = String::new();
    let mut used = std::collections::BTreeSet::new();
    while used.len() < n {
        let name = format!("{} {}", pick(rng, SUBJECT_AREAS), pick(rng, APTITUDES));
        if used.insert(name.clone()) {
            out.push_str(&format!("General Aspect: {name}\n"));
        }
    }
    out
}

fn fine_aspects(rng: &mut ChaCha8Rng, user_text: &str) -> String {
    let m = requested_count(user_text, "Create", 6);
    let mut out = String::new();
    let mut used = std::collections::BTreeSet::new();
    while used.len() < m {
        let name = format!(
            "{} {} {}",
            pick(rng, SUBJECT_AREAS),
            pick(rng, SUBJECT_AREAS).to_lowercase(),
            pick(rng, APTITUDES).to_lowercase(),
        );
        if !used.insert(name.clone()) {
            continue;
        }
        out.push_str(&format!(
            "Fined-grained Aspect: {name}\nIntroduction: Checks whether the model can handle {} cues when asked about {}.\n",
            pick(rng, SUBJECT_AREAS).to_lowercase(),
            pick(rng, NOUNS),
        ));
    }
    out
}

fn description(rng: &mut ChaCha8Rng, user_text: &str) -> String {
    let avoid = avoid_words(user_text);
    let pick_clean = |rng: &mut ChaCha8Rng, pool: &[&'static str]| -> String {
        for _ in 0..24 {
            let w = pick(rng, pool);
            if !avoid.iter().any(|a| a == w) {
                return w.to_string();
            }
        }
        pick(rng, pool).to_string()
    };
    let topic = pick_clean(rng, NOUNS);
    let adj = pick_clean(rng, ADJECTIVES);
    let setting = pick(rng, SETTINGS);
    let detail = pick(rng, DETAILS);
    let keyword_count = rng.gen_range(4..=6usize);
    let mut keywords: Vec<String> = Vec::new();
    while keywords.len() < keyword_count {
        let w = pick_clean(rng, NOUNS);
        if w != topic && !keywords.contains(&w) {
            keywords.push(w);
        }
    }
    format!(
        "Aspect: as requested\nPrompt: A {adj} {topic} {setting}, with {detail} and a {} {} nearby.\nTopic word: {topic}\nKey word: {}\n",
        pick_clean(rng, ADJECTIVES),
        keywords[0],
        keywords.join(", "),
    )
}

fn align_questions(rng: &mut ChaCha8Rng, user_text: &str) -> String {
    let words = content_words(user_text);
    let mut items = Vec::new();
    for i in 0..6 {
        let element = if words.is_empty() {
            pick(rng, NOUNS).to_string()
        } else {
            words[rng.gen_range(0..words.len())].clone()
        };
        let element_type = ELEMENT_TYPES[rng.gen_range(0..ELEMENT_TYPES.len())];
        items.push(serde_json::json!({
            "caption": format!("check {i}"),
            "question": format!("Is there a {element} visible in the image?"),
            "choices": ["yes", "no"],
            "answer": "yes",
            "element_type": element_type,
            "element": element,
        }));
    }
    serde_json::to_string_pretty(&items).expect("static json")
}

fn align_answer(rng: &mut ChaCha8Rng) -> String {
    // Skewed toward agreement so most images clear their threshold while a
    // realistic minority fails and exercises regeneration.
    let answer = if rng.gen_range(0..100) < 92 {
        "yes"
    } else {
        "no"
    };
    format!("{{\"answer\": \"{answer}\"}}")
}

fn question(rng: &mut ChaCha8Rng) -> String {
    let subject = pick(rng, NOUNS);
    let mut texts = std::collections::BTreeSet::new();
    while texts.len() < 4 {
        texts.insert(format!(
            "the {} {}",
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS)
        ));
    }
    let options: Vec<String> = texts.into_iter().collect();
    let reference = ["A", "B", "C", "D"][rng.gen_range(0..4)];
    serde_json::json!({
        "question": format!("Which element appears closest to the {subject}?"),
        "options": {
            "A": options[0],
            "B": options[1],
            "C": options[2],
            "D": options[3],
        },
        "reference_answer": reference,
    })
    .to_string()
}

fn option_adjust(rng: &mut ChaCha8Rng, user_text: &str) -> String {
    // The prompt lists answers we must not repeat; honor it like a model would.
    let forbidden: Vec<String> = user_text
        .lines()
        .skip_while(|l| !l.starts_with("wrong answers:"))
        .flat_map(|l| l.trim_start_matches("wrong answers:").split(';'))
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    for _ in 0..16 {
        let candidate = format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS));
        if !forbidden.contains(&candidate.to_lowercase()) {
            return candidate;
        }
    }
    format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
}

fn candidate_answer(rng: &mut ChaCha8Rng, profile: MockProfile) -> String {
    let letter = ["A", "B", "C", "D"][rng.gen_range(0..4)];
    match profile {
        MockProfile::AlwaysA => "[[A]] The first option matches what the image shows.".to_string(),
        MockProfile::Standard => {
            format!("[[{letter}]] That option lines up with the scene.")
        }
        MockProfile::Noisy => {
            if rng.gen_range(0..100) < 25 {
                format!("Looking at the picture, I would say the answer is {letter}.")
            } else {
                format!("[[{letter}]] That option lines up with the scene.")
            }
        }
    }
}

fn judge(rng: &mut ChaCha8Rng) -> String {
    let verdict = if rng.gen_bool(0.5) { "yes" } else { "no" };
    format!("{{\"matches_reference\": \"{verdict}\"}}")
}

/// A 64x64 RGB PNG whose pixels are a pure function of the request hash.
fn synthetic_png(rng: &mut ChaCha8Rng) -> Vec<u8> {
    const SIDE: u32 = 64;
    let mut pixels = vec![0u8; (SIDE * SIDE * 3) as usize];
    rng.fill(pixels.as_mut_slice());
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, SIDE, SIDE);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header");
        writer.write_image_data(&pixels).expect("png body");
    }
    out
}
