//! Word-level tokenizer and dialogue formatting.
//!
//! The text side of the pipeline is deliberately small: captions and
//! continuations come from closed templates, so a word vocabulary suffices.
//! `format_dialogue` turns (instruction, answer) turns into one token
//! sequence with role markers, reserved `<img>` slots where projected image
//! features get spliced in, and a loss mask that selects answer tokens only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Continuation instruction applied to caption text. Issued to the text-only
/// oracle that produces each caption's continuation target.
pub const TEXT_CONTINUATION_INSTRUCTION: &str =
    "Continue the following text in a coherent and engaging style with less than 20 words.";

/// Continuation instruction applied to an image. The `<ImageFeature>`
/// placeholder expands to one `<img>` slot per visual patch token; role
/// markers are added by `format_dialogue`, not embedded in this string.
pub const IMAGE_CONTINUATION_INSTRUCTION: &str = "continue the following image <Img> \
     <ImageFeature> </Img>. When continuing, focus on the persons in the picture and \
     generate a continuation related to the persons.";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const IMG: usize = 4;
pub const HUMAN: usize = 5;
pub const ASSISTANT: usize = 6;
pub const IMG_OPEN: usize = 7;
pub const IMG_CLOSE: usize = 8;

pub const RESERVED: [&str; 9] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<img>",
    "###Human:",
    "###Assistant:",
    "<Img>",
    "</Img>",
];

/// Placeholder inside instruction text that stands for the image's projected
/// patch tokens.
pub const IMAGE_FEATURE_PLACEHOLDER: &str = "<ImageFeature>";

/// Lowercase words, splitting on anything that is not alphanumeric.
pub fn normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Count normalized words across the corpus, keep those with
    /// count ≥ `min_count`, and assign ids after the reserved block in
    /// frequency-descending then lexicographic order.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_text = false;
        for text in corpus {
            saw_text = true;
            for w in normalize(text.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        if !saw_text {
            return Err(Error::Tokenizer("empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(w, _)| w));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved block is always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Normalized words to ids; out-of-vocabulary words become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .iter()
            .map(|w| self.token_to_id.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.id_to_token.get(id).ok_or(Error::IndexOutOfRange {
                what: "token id",
                index: id,
                size: self.id_to_token.len(),
            })?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for tok in &self.id_to_token {
            writeln!(text, "{tok}").expect("string write");
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuild from an id-ordered token list, validating the reserved block.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < RESERVED.len() {
            return Err(Error::Tokenizer(format!(
                "vocabulary too short: {} tokens",
                id_to_token.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *r {
                return Err(Error::Tokenizer(format!(
                    "reserved token {i} is {:?}, expected {r:?}",
                    id_to_token[i]
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

/// One instruction/answer exchange. Only answers are scored by the LM loss.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DialogueTurn {
    pub instruction: String,
    pub answer: String,
}

/// Token ids with a per-position loss mask and the positions holding
/// projected image features.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<f64>,
    pub image_slots: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lay out dialogue turns as
/// `<bos>` then per turn `###Human:` instruction `###Assistant:` answer `<eos>`,
/// expanding `<ImageFeature>` into `num_image_slots` `<img>` positions. The
/// loss mask covers exactly each answer's tokens plus its closing `<eos>`.
pub fn format_dialogue(
    turns: &[DialogueTurn],
    vocab: &Vocabulary,
    num_image_slots: usize,
) -> Result<TokenSequence> {
    if turns.is_empty() {
        return Err(Error::Tokenizer("dialogue has no turns".into()));
    }
    let mut seq = TokenSequence {
        ids: vec![BOS],
        loss_mask: vec![0.0],
        image_slots: Vec::new(),
    };
    for turn in turns {
        if normalize(&turn.answer).is_empty() {
            return Err(Error::Tokenizer("empty continuation target".into()));
        }
        seq.ids.push(HUMAN);
        seq.loss_mask.push(0.0);
        for raw in turn.instruction.split_whitespace() {
            let trimmed = raw.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | '!' | '?'));
            match trimmed {
                "<Img>" => {
                    seq.ids.push(IMG_OPEN);
                    seq.loss_mask.push(0.0);
                }
                "</Img>" => {
                    seq.ids.push(IMG_CLOSE);
                    seq.loss_mask.push(0.0);
                }
                IMAGE_FEATURE_PLACEHOLDER => {
                    for _ in 0..num_image_slots {
                        seq.image_slots.push(seq.ids.len());
                        seq.ids.push(IMG);
                        seq.loss_mask.push(0.0);
                    }
                }
                _ => {
                    for id in vocab.encode(raw) {
                        seq.ids.push(id);
                        seq.loss_mask.push(0.0);
                    }
                }
            }
        }
        seq.ids.push(ASSISTANT);
        seq.loss_mask.push(0.0);
        for id in vocab.encode(&turn.answer) {
            seq.ids.push(id);
            seq.loss_mask.push(1.0);
        }
        seq.ids.push(EOS);
        seq.loss_mask.push(1.0);
    }
    Ok(seq)
}
