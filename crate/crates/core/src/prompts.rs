//! Prompt templates for every examiner duty, plus the difficulty rubrics
//! injected into description and question generation.
//!
//! The labeled output formats here (`General Aspect:`, `Topic word:`,
//! `[[A]]`, the JSON blocks) are wire formats: the parsers in the sibling
//! modules and the mock transport both key off them.

use crate::descriptions::Difficulty;

/// Replace `{name}` placeholders for the given keys only, leaving every
/// other brace (for example JSON examples) untouched.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Appended to re-prompts so a retry is a distinct request (and therefore a
/// distinct mock reply) while staying deterministic.
pub fn retry_nonce(attempt: u32) -> String {
    if attempt == 0 {
        String::new()
    } else {
        format!("\n(Revision request {attempt}: your previous reply could not be used; answer again in the exact format.)")
    }
}

pub const SYSTEM_EXAMINER: &str = "You are an assistant that designs rigorous test material for large vision-language models. Follow the requested output format exactly.";

pub const SYSTEM_CANDIDATE: &str = "You are a vision-language model under evaluation. Answer the question about the provided image.";

// ---------------------------------------------------------------------------
// Aspect generation
// ---------------------------------------------------------------------------

const ASPECT_GENERAL_TEMPLATE: &str = "\
We are assembling a benchmark that tests the capability area below, stated by the user.

Capability area: {name}
What it covers: {demand}

Come up with {n} general aspects for this capability area. Each general aspect is a high-level evaluation dimension; together they must cover the area without overlapping in meaning. Every aspect must be testable with a single image.
List the aspects without numbering them.{nonce}

Respond strictly in the following format:
General Aspect: [Aspect]
";

pub fn aspect_general(name: &str, demand: &str, n: u32, attempt: u32) -> String {
    fill(
        ASPECT_GENERAL_TEMPLATE,
        &[
            ("name", name),
            ("demand", demand),
            ("n", &n.to_string()),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

const ASPECT_FINE_TEMPLATE: &str = "\
We are assembling a benchmark that tests the capability area below, stated by the user.

Capability area: {name}
What it covers: {demand}
General aspect under consideration: {general}

Create {m} fined-grained aspects within this general aspect, do not go beyond. Each fine-grained aspect names one specific, image-testable skill and comes with a one-sentence introduction explaining what the skill requires. Aspects must test the understanding of a single image, and must not repeat each other or these already-used names: {taken}.
List the aspects without numbering them.{nonce}

Respond strictly in the following format:
Fined-grained Aspect: [Aspect]
Introduction: [Introduction]
";

pub fn aspect_fine(
    name: &str,
    demand: &str,
    general: &str,
    m: u32,
    taken: &[String],
    attempt: u32,
) -> String {
    let taken = if taken.is_empty() {
        "none".to_string()
    } else {
        taken.join(", ")
    };
    fill(
        ASPECT_FINE_TEMPLATE,
        &[
            ("name", name),
            ("demand", demand),
            ("general", general),
            ("m", &m.to_string()),
            ("taken", &taken),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

// ---------------------------------------------------------------------------
// Difficulty rubrics
// ---------------------------------------------------------------------------

pub fn description_rubric(difficulty: Difficulty) -> &'static str {
    match difficulty {
        Difficulty::Easy => {
            "Easy: one subject with minor supporting complexity, against a minimally distracting background. \
             Add one subtle challenge such as fine texture, a simple interaction, or a slight lighting variation, \
             while keeping the composition simple and clear."
        }
        Difficulty::Medium => {
            "Medium: multiple objects interacting naturally in a believable environment, with layered depth, \
             spatial coherence, and secondary details such as shadows or splashes. The scene should read as one \
             moderately dynamic moment."
        }
        Difficulty::Hard => {
            "Hard: a high-complexity scene with 3-4 interdependent main elements, or a combination of dynamic \
             features such as motion, light interplay, challenging perspective, or atmospheric conditions, while \
             maintaining clarity, logic, and detailed textures."
        }
    }
}

pub fn question_rubric(difficulty: Difficulty) -> &'static str {
    match difficulty {
        Difficulty::Easy => {
            "Easy: ask about a simple, prominent, explicit detail that basic observation settles immediately \
             (a color, the presence of a single item, an obvious shape). No inference should be needed."
        }
        Difficulty::Medium => {
            "Medium: require a moderate amount of observation and inference, such as the relative position of \
             objects, an action taking place, or the context of the scene. The answer is clear but not \
             immediately obvious."
        }
        Difficulty::Hard => {
            "Hard: require interpreting several elements working together, a subtler interaction, or a detail \
             that is visible but not the focus, such as relative positioning in a crowded scene or a lighting \
             change that alters an object's appearance. Stay concrete; do not become abstract."
        }
    }
}

// ---------------------------------------------------------------------------
// Description generation
// ---------------------------------------------------------------------------

const DESCRIPTION_TEMPLATE: &str = "\
Convert the aspect below into one prompt for a text-to-image model. The image it produces will be used to test large vision-language models.

1. Carefully follow the given aspect: {aspect}, its introduction: {introduction}.
2. Compose the prompt from simple, clear phrases; avoid overly complex wording.
3. Prefer elements that are genuinely challenging to recognize, such as unusual combinations or subtle details.
4. Difficulty requirements for this request: {rubric}
5. Provide one overarching topic word that encapsulates the essence of your description.
6. List 4-6 key words that are closely related to your description and crucial for understanding the image.
7. Avoid using the following words in your new description: {avoid}
8. The required difficulty level is: {level}
9. Use clear and accurate words and a clear logical flow; do not use abstract words.
10. Output only the fields below, nothing else.{nonce}

Respond strictly in the following format:
Aspect: {aspect}
Prompt: [Your detailed image description]
Topic word: [One word that captures the essence of the description]
Key word: [Word1, Word2, Word3,...]
";

pub fn description(
    aspect: &str,
    introduction: &str,
    difficulty: Difficulty,
    avoid: &[String],
    attempt: u32,
) -> String {
    let avoid = if avoid.is_empty() {
        "none".to_string()
    } else {
        avoid.join(", ")
    };
    fill(
        DESCRIPTION_TEMPLATE,
        &[
            ("aspect", aspect),
            ("introduction", introduction),
            ("rubric", description_rubric(difficulty)),
            ("avoid", &avoid),
            ("level", difficulty.as_str()),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

// ---------------------------------------------------------------------------
// Self-validation
// ---------------------------------------------------------------------------

const ALIGN_QUESTIONS_TEMPLATE: &str = "\
Given the image description below, generate six questions with only one correct choice each that verify whether an image actually matches the description.

Description: {description}

Classify each question's concept into a type (object, human, animal, food, activity, attribute, counting, color, material, spatial, location, shape, other), name the element it checks, and keep the choices to yes/no.{nonce}

Respond strictly as a JSON array of six objects in the following format:
[
  {
    \"caption\": \"the description\",
    \"question\": \"Your question here\",
    \"choices\": [\"yes\", \"no\"],
    \"answer\": \"give your correct answer\",
    \"element_type\": \"Type of the element\",
    \"element\": \"Element name\"
  }
]
";

pub fn align_questions(description: &str, attempt: u32) -> String {
    fill(
        ALIGN_QUESTIONS_TEMPLATE,
        &[
            ("description", description),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

const ALIGN_ANSWER_TEMPLATE: &str = "\
Given the image below, answer the question: {question} from the choices: {choices} based on the image.
Directly give the answer as JSON:{nonce}
{
  \"answer\": \"your choice\"
}
";

pub fn align_answer(question: &str, choices: &[String], attempt: u32) -> String {
    fill(
        ALIGN_ANSWER_TEMPLATE,
        &[
            ("question", question),
            ("choices", &choices.join(", ")),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

// ---------------------------------------------------------------------------
// Test case generation
// ---------------------------------------------------------------------------

const QUESTION_TEMPLATE: &str = "\
Convert the image description below into one question testing a large vision-language model on the given aspect. The model will see the image generated from this description, not the description itself.

1. Carefully analyze the given aspect. Aspect: {aspect}.
2. Generate a suitable question based on the image description to test ability in that aspect.
3. Difficulty requirements for this question: {rubric}
4. Avoid overly complicated language or details unrelated to the image.
5. Due to potential discrepancies in image generation, we have detected the following errors: {errors}. Do not reference these elements in your question. If the description does not spell out how something specific looks, do not ask about that either.
6. The required difficulty level is: {level}
7. Generate a four-option single-choice question. Options must be clearly differentiated: exactly one option may satisfy the question.{nonce}

Image generation prompt: {prompt}
Aspect: {aspect}

Directly output the generated question in the following JSON format:
{
  \"question\": \"[your question]\",
  \"options\": {
    \"A\": \"[Option A]\",
    \"B\": \"[Option B]\",
    \"C\": \"[Option C]\",
    \"D\": \"[Option D]\"
  },
  \"reference_answer\": \"A or B or C or D\"
}
Without any other information, and remember only one option in the reference answer.
";

pub fn question(
    aspect: &str,
    prompt_text: &str,
    difficulty: Difficulty,
    error_elements: &[String],
    attempt: u32,
) -> String {
    let errors = if error_elements.is_empty() {
        "none".to_string()
    } else {
        error_elements.join(", ")
    };
    fill(
        QUESTION_TEMPLATE,
        &[
            ("aspect", aspect),
            ("rubric", question_rubric(difficulty)),
            ("errors", &errors),
            ("level", difficulty.as_str()),
            ("prompt", prompt_text),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

const OPTION_ADJUST_TEMPLATE: &str = "\
Answer the question below from your own knowledge, without any image.
- Some incorrect answers are provided below. You must not make the same mistakes.
- Your answer needs to be semantically and factually distinct from every given incorrect answer.
- Do not say you cannot see the image; just answer from your knowledge.
- Keep the answer concise, with straightforward words.{nonce}

question: {question}
wrong answers: {wrong}

Directly give your answer, without reasoning or other information.
";

pub fn option_adjust(question: &str, wrong_answers: &[String], attempt: u32) -> String {
    fill(
        OPTION_ADJUST_TEMPLATE,
        &[
            ("question", question),
            ("wrong", &wrong_answers.join("; ")),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

// ---------------------------------------------------------------------------
// Candidate answering and judging
// ---------------------------------------------------------------------------

const CANDIDATE_TEMPLATE: &str = "\
In order to test your ability with pictures, we have a question about the {aspect} area. Please answer based on your knowledge in this area and your understanding of pictures.
Given the image below, answer the question: {question} based on the image.
Options:
{options}
Give the final answer strictly in the format [[A]] (strictly add [[ ]] around the choice, and the content inside the brackets must be the choice, such as A, B, C, D), then a brief explanation. Directly output your answer in this format.
If you cannot read the picture, just answer based on your text ability.
";

pub fn candidate_answer(aspect: &str, question: &str, options: &[(char, &str)]) -> String {
    let options_text: Vec<String> = options
        .iter()
        .map(|(letter, text)| format!("{letter}: {text}"))
        .collect();
    fill(
        CANDIDATE_TEMPLATE,
        &[
            ("aspect", aspect),
            ("question", question),
            ("options", &options_text.join("\n")),
        ],
    )
}

const JUDGE_TEMPLATE: &str = "\
You are grading one answer to a multiple-choice question.

question: {question}
options:
{options}
reference answer: {reference_letter}: {reference_text}

candidate response:
{response}

Does the candidate response select the reference answer? Reply strictly as JSON:{nonce}
{
  \"matches_reference\": \"yes or no\"
}
";

pub fn judge(
    question: &str,
    options: &[(char, &str)],
    reference_letter: char,
    reference_text: &str,
    response: &str,
    attempt: u32,
) -> String {
    let options_text: Vec<String> = options
        .iter()
        .map(|(letter, text)| format!("{letter}: {text}"))
        .collect();
    fill(
        JUDGE_TEMPLATE,
        &[
            ("question", question),
            ("options", &options_text.join("\n")),
            ("reference_letter", &reference_letter.to_string()),
            ("reference_text", reference_text),
            ("response", response),
            ("nonce", &retry_nonce(attempt)),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_only_named_keys() {
        let out = fill("{a} and {b} keep {\"json\": 1}", &[("a", "x"), ("b", "y")]);
        assert_eq!(out, "x and y keep {\"json\": 1}");
    }

    #[test]
    fn question_prompt_carries_error_elements() {
        let rendered = question(
            "Count Detection",
            "A forest with glowing plants",
            Difficulty::Medium,
            &["glowing plants".to_string()],
            0,
        );
        assert!(rendered.contains("following errors: glowing plants."));
        assert!(rendered.contains("four-option single-choice"));
    }

    #[test]
    fn empty_error_list_renders_none() {
        let rendered = question("Aspect", "Prompt", Difficulty::Easy, &[], 0);
        assert!(rendered.contains("following errors: none."));
    }

    #[test]
    fn rubrics_nonempty_for_all_levels() {
        for d in Difficulty::ALL {
            assert!(!description_rubric(d).is_empty());
            assert!(!question_rubric(d).is_empty());
        }
    }
}
