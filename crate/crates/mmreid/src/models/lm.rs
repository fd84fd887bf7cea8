//! Causal transformer language model and the projection feeding it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::blocks;
use crate::models::params::ParamSet;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalLmConfig {
    pub vocab: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for CausalLmConfig {
    fn default() -> Self {
        CausalLmConfig {
            vocab: 256,
            d_lm: 64,
            layers: 3,
            heads: 4,
            max_len: 160,
        }
    }
}

impl CausalLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.vocab > 256 {
            return Err(Error::Config(format!(
                "vocab size {} outside 1..=256",
                self.vocab
            )));
        }
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_lm {}",
                self.heads, self.d_lm
            )));
        }
        if self.layers == 0 || self.max_len == 0 {
            return Err(Error::Config("lm needs layers >= 1 and max_len >= 1".into()));
        }
        Ok(())
    }
}

/// Affine map from visual features `[n, d_v]` into LM embedding space
/// `[n, d_lm]`.
pub fn project(tape: &mut Tape, f_v: Var, params: &ParamSet) -> Result<Var> {
    blocks::linear(tape, f_v, params, "proj")
}

pub fn init_projection(d_v: usize, d_lm: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    blocks::init_linear(params, "proj", d_v, d_lm, rng);
}

pub fn init_lm(cfg: &CausalLmConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    params.insert_randn("lm.tok_embed", vec![cfg.vocab, cfg.d_lm], cfg.d_lm, rng);
    params.insert_randn("lm.pos", vec![cfg.max_len, cfg.d_lm], cfg.d_lm, rng);
    for l in 0..cfg.layers {
        blocks::init_transformer_block(params, &format!("lm.l{l}"), cfg.d_lm, rng);
    }
    blocks::init_layer_norm(params, "lm.ln_f", cfg.d_lm);
    blocks::init_linear(params, "lm.head", cfg.d_lm, cfg.vocab, rng);
}

pub struct LmOutput {
    /// `[L, vocab]` next-token logits.
    pub logits: Var,
    /// `[L, d_lm]` final-layer hidden states after the output norm.
    pub hidden: Var,
}

/// Run the causal LM over a token sequence, splicing projected image
/// embeddings into the `<img>` slot positions. Position `i`'s outputs
/// depend only on positions `<= i`.
pub fn lm_forward(
    tape: &mut Tape,
    seq: &TokenSequence,
    image_embeds: Option<Var>,
    cfg: &CausalLmConfig,
    params: &ParamSet,
) -> Result<LmOutput> {
    let len = seq.len();
    if len == 0 {
        return Err(Error::Empty("token sequence"));
    }
    if len > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_len,
        });
    }
    for &id in &seq.ids {
        if id >= cfg.vocab {
            return Err(Error::TargetOutOfRange {
                target: id,
                classes: cfg.vocab,
            });
        }
    }

    let tok_embed = params.bind(tape, "lm.tok_embed")?;
    let mut x = tape.select_rows(tok_embed, &seq.ids)?;
    match (image_embeds, seq.image_slots.is_empty()) {
        (Some(embeds), false) => {
            let rows = tape.shape(embeds).0;
            if rows != seq.image_slots.len() {
                return Err(Error::SlotMismatch {
                    seq: seq.image_slots.len(),
                    provided: rows,
                });
            }
            x = tape.replace_rows(x, embeds, &seq.image_slots)?;
        }
        (None, true) => {}
        (Some(embeds), true) => {
            let rows = tape.shape(embeds).0;
            return Err(Error::SlotMismatch {
                seq: 0,
                provided: rows,
            });
        }
        (None, false) => {
            return Err(Error::SlotMismatch {
                seq: seq.image_slots.len(),
                provided: 0,
            });
        }
    }

    let pos_table = params.bind(tape, "lm.pos")?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.select_rows(pos_table, &positions)?;
    let mut x = tape.add(x, pos)?;
    for l in 0..cfg.layers {
        x = blocks::transformer_block(tape, x, params, &format!("lm.l{l}"), cfg.heads, true)?;
    }
    let hidden = blocks::layer_norm(tape, x, params, "lm.ln_f")?;
    let logits = blocks::linear(tape, hidden, params, "lm.head")?;
    Ok(LmOutput { logits, hidden })
}

/// How LM latents at image-slot positions collapse into one embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPool {
    MeanSlots,
    LastSlot,
}

/// `[1, d_lm]` summary of the hidden states at image-slot positions.
pub fn pool_image_latents(
    tape: &mut Tape,
    hidden: Var,
    image_slots: &[usize],
    pool: LatentPool,
) -> Result<Var> {
    if image_slots.is_empty() {
        return Err(Error::Empty("image slots"));
    }
    match pool {
        LatentPool::MeanSlots => {
            let rows = tape.select_rows(hidden, image_slots)?;
            tape.mean_axis0(rows)
        }
        LatentPool::LastSlot => tape.select_rows(hidden, &image_slots[image_slots.len() - 1..]),
    }
}
