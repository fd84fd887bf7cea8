//! Caption, continuation, and instruction-prompt text generation.
//!
//! Captions are an injective template over the attribute tuple, so a caption
//! can be parsed back to its identity. Continuations are deterministic
//! functions of the caption: the same target text regardless of whether the
//! model sees the caption or the image, which is the property the two-input
//! distillation setup depends on. A real language model's continuations can
//! be substituted through an external caption → continuation map.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::identity::{IdentitySpec, BAGS, BUILDS, HATS, HUES};
use crate::tokenizer::{DialogueTurn, IMAGE_CONTINUATION_INSTRUCTION};

pub const MAX_CONTINUATION_WORDS: usize = 20;

/// Diverse instruction pool for the baseline recipe, one drawn uniformly per
/// image-text pair. The image block is prepended by `build_dialogue`.
pub const BASELINE_PROMPTS: [&str; 20] = [
    "Describe the appearance of the person in the image, focusing on their attire.",
    "What is the person in the picture wearing from head to toe?",
    "Give a detailed description of the clothing worn by the person shown.",
    "Summarize the outfit and build of the person in this photo.",
    "Tell me what garments and colors the pictured person has on.",
    "List the visible clothing items of the person in the image.",
    "How would you describe the style and dress of this person?",
    "Provide a full account of the person, including shirt, pants and shoes.",
    "What colors dominate the outfit of the person in the picture?",
    "Describe the person with attention to any hat or bag they carry.",
    "Characterize the appearance and clothing combination of the pictured person.",
    "Write a short description of what the person is wearing.",
    "Identify the clothing and accessories on the person in this image.",
    "Explain what the person looks like, starting with their clothes.",
    "Describe this person so another observer could recognize them.",
    "Note the shirt, trousers and footwear of the person shown here.",
    "What outfit is the person in the image dressed in?",
    "Report the visible attire and body type of the pictured person.",
    "Detail the clothing colors worn by the person in the photo.",
    "Give an appearance summary for the person captured in this image.",
];

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Deterministic caption, 13 to 23 words depending on hat and bag.
pub fn gen_caption(spec: &IdentitySpec) -> String {
    let mut s = format!(
        "a {} person wearing a {} shirt and {} pants with {} shoes",
        BUILDS[spec.build], HUES[spec.shirt], HUES[spec.pants], HUES[spec.shoes]
    );
    if spec.hat != 0 {
        s.push_str(&format!(" and a {} hat", HATS[spec.hat]));
    }
    if spec.bag != 0 {
        s.push_str(&format!(" carrying a bag on the {}", BAGS[spec.bag]));
    }
    s
}

/// Recover the attribute tuple from a generated caption. The returned spec
/// has `id = 0`; only the attributes are meaningful.
pub fn parse_caption(caption: &str) -> Result<IdentitySpec> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let bad = || Error::Data(format!("unrecognized caption: {caption:?}"));
    let lookup = |table: &[&str], w: &str| table.iter().position(|t| *t == w);

    if words.len() < 13 || words[0] != "a" || words[2] != "person" || words[3] != "wearing" {
        return Err(bad());
    }
    let build = lookup(&BUILDS, words[1]).ok_or_else(bad)?;
    if words[4] != "a" || words[6] != "shirt" || words[7] != "and" {
        return Err(bad());
    }
    let shirt = lookup(&HUES, words[5]).ok_or_else(bad)?;
    if words[9] != "pants" || words[10] != "with" || words[12] != "shoes" {
        return Err(bad());
    }
    let pants = lookup(&HUES, words[8]).ok_or_else(bad)?;
    let shoes = lookup(&HUES, words[11]).ok_or_else(bad)?;

    let mut pos = 13;
    let mut hat = 0;
    let mut bag = 0;
    if words.len() >= pos + 4 && words[pos] == "and" {
        if words[pos + 1] != "a" || words[pos + 3] != "hat" {
            return Err(bad());
        }
        hat = lookup(&HATS, words[pos + 2]).filter(|&h| h != 0).ok_or_else(bad)?;
        pos += 4;
    }
    if words.len() >= pos + 6 && words[pos] == "carrying" {
        if words[pos + 1..pos + 5] != ["a", "bag", "on", "the"] {
            return Err(bad());
        }
        bag = lookup(&BAGS, words[pos + 5]).filter(|&b| b != 0).ok_or_else(bad)?;
        pos += 6;
    }
    if pos != words.len() {
        return Err(bad());
    }
    Ok(IdentitySpec {
        id: 0,
        shirt,
        pants,
        shoes,
        hat,
        bag,
        build,
    })
}

/// Template continuation keyed on every attribute of the caption, so the
/// continuation target carries the same identity information the caption
/// does; 16 to 19 words. Errors on captions the template grammar cannot
/// parse.
pub fn gen_continuation(caption: &str) -> Result<String> {
    let spec = parse_caption(caption)?;
    let opening = match spec.build {
        0 => "they stride past,",
        _ => "they amble by,",
    };
    let hat = match spec.hat {
        0 => "no hat,".to_string(),
        h => format!("a {} hat,", HATS[h]),
    };
    let bag = match spec.bag {
        0 => "no bag".to_string(),
        b => format!("a bag slung {}", BAGS[b]),
    };
    Ok(format!(
        "{opening} the {} shirt above {} pants and {} shoes, {hat} {bag}",
        HUES[spec.shirt], HUES[spec.pants], HUES[spec.shoes]
    ))
}

/// Continuation for a caption, preferring an external caption → text map
/// (e.g. outputs of a real LLM) when one is supplied. External entries are
/// held to the same word limit.
pub fn continuation_for(
    caption: &str,
    external: Option<&BTreeMap<String, String>>,
) -> Result<String> {
    if let Some(map) = external {
        if let Some(text) = map.get(caption) {
            if word_count(text) >= MAX_CONTINUATION_WORDS {
                return Err(Error::Data(format!(
                    "external continuation has {} words, limit {}",
                    word_count(text),
                    MAX_CONTINUATION_WORDS
                )));
            }
            return Ok(text.clone());
        }
        // fall through: the template still covers generated captions
    }
    gen_continuation(caption)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DialogueMode {
    /// Fixed continuation instruction; target = continuation text.
    CommonInstruction,
    /// One of 20 prompts drawn uniformly; target = the caption itself.
    BaselinePrompt,
}

/// Assemble the single training turn for one image.
pub fn build_dialogue(
    caption: &str,
    continuation: &str,
    mode: DialogueMode,
    rng: &mut ChaCha8Rng,
) -> Result<DialogueTurn> {
    if continuation.trim().is_empty() {
        return Err(Error::Data("empty continuation".into()));
    }
    match mode {
        DialogueMode::CommonInstruction => Ok(DialogueTurn {
            instruction: IMAGE_CONTINUATION_INSTRUCTION.to_string(),
            answer: continuation.to_string(),
        }),
        DialogueMode::BaselinePrompt => {
            let prompt = BASELINE_PROMPTS[rng.gen_range(0..BASELINE_PROMPTS.len())];
            Ok(DialogueTurn {
                instruction: format!("<Img> <ImageFeature> </Img>. {prompt}"),
                answer: caption.to_string(),
            })
        }
    }
}
