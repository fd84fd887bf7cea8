//! Patch-transformer visual encoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::blocks;
use crate::models::params::ParamSet;

/// Which feature map leaves the encoder: the input to the last transformer
/// layer or its output. Both pass through the final layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    PreLastLayer,
    PostLastLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub tap_point: TapPoint,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            height: 64,
            width: 32,
            channels: 3,
            patch: 8,
            d_v: 64,
            layers: 2,
            heads: 4,
            tap_point: TapPoint::PostLastLayer,
        }
    }
}

impl VisualEncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixel_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_v {}",
                self.heads, self.d_v
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

pub fn init_encoder(cfg: &VisualEncoderConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    blocks::init_linear(params, "enc.embed", cfg.patch_dim(), cfg.d_v, rng);
    params.insert_randn("enc.pos", vec![cfg.num_patches(), cfg.d_v], cfg.d_v, rng);
    for l in 0..cfg.layers {
        blocks::init_transformer_block(params, &format!("enc.l{l}"), cfg.d_v, rng);
    }
    blocks::init_layer_norm(params, "enc.ln_f", cfg.d_v);
}

/// Rearrange interleaved-RGB pixels into a `[num_patches, patch_dim]`
/// matrix, patches in row-major grid order.
pub fn patchify(pixels: &[f64], cfg: &VisualEncoderConfig) -> Result<Tensor> {
    if pixels.len() != cfg.pixel_len() {
        return Err(Error::BadShape {
            op: "patchify",
            expected: format!("{} pixel values", cfg.pixel_len()),
            got: vec![pixels.len()],
        });
    }
    let (p, w, ch) = (cfg.patch, cfg.width, cfg.channels);
    let grid_w = cfg.width / p;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..cfg.height / p {
        for pc in 0..grid_w {
            for y in 0..p {
                for x in 0..p {
                    let base = (((pr * p + y) * w) + pc * p + x) * ch;
                    out.extend_from_slice(&pixels[base..base + ch]);
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Per-patch features `[num_patches, d_v]` at the configured tap point.
pub fn encode_image(
    tape: &mut Tape,
    pixels: &[f64],
    cfg: &VisualEncoderConfig,
    params: &ParamSet,
) -> Result<Var> {
    let patches = patchify(pixels, cfg)?;
    let x = tape.leaf(&patches)?;
    let x = blocks::linear(tape, x, params, "enc.embed")?;
    let pos = params.bind(tape, "enc.pos")?;
    let mut x = tape.add(x, pos)?;
    let mut tapped = None;
    for l in 0..cfg.layers {
        if cfg.tap_point == TapPoint::PreLastLayer && l == cfg.layers - 1 {
            tapped = Some(x);
        }
        x = blocks::transformer_block(tape, x, params, &format!("enc.l{l}"), cfg.heads, false)?;
    }
    let tapped = tapped.unwrap_or(x);
    blocks::layer_norm(tape, tapped, params, "enc.ln_f")
}

/// Retrieval embedding `[1, d_v]`: mean over patch features. This is the
/// representation used for stage-2 training and all test-time ranking.
pub fn reid_embed(
    tape: &mut Tape,
    pixels: &[f64],
    cfg: &VisualEncoderConfig,
    params: &ParamSet,
) -> Result<Var> {
    let feats = encode_image(tape, pixels, cfg, params)?;
    tape.mean_axis0(feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup() -> (VisualEncoderConfig, ParamSet, Vec<f64>) {
        let cfg = VisualEncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        init_encoder(&cfg, &mut params, &mut rng);
        let pixels: Vec<f64> = (0..cfg.pixel_len()).map(|_| rng.gen::<f64>()).collect();
        (cfg, params, pixels)
    }

    #[test]
    fn default_config_gives_32_patches() {
        let cfg = VisualEncoderConfig::default();
        assert_eq!(cfg.num_patches(), 32);
        assert_eq!(cfg.patch_dim(), 192);
        cfg.validate().unwrap();
    }

    #[test]
    fn patchify_places_pixels() {
        let cfg = VisualEncoderConfig {
            height: 4,
            width: 4,
            channels: 1,
            patch: 2,
            ..VisualEncoderConfig::default()
        };
        let pixels: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let t = patchify(&pixels, &cfg).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        // top-left patch: pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        // top-right patch
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (cfg, params, pixels) = setup();
        let run = || {
            let mut tape = Tape::new();
            let f = encode_image(&mut tape, &pixels, &cfg, &params).unwrap();
            assert_eq!(tape.shape(f), (32, 64));
            tape.value(f).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tap_points_differ() {
        let (mut cfg, params, pixels) = setup();
        let mut tape = Tape::new();
        cfg.tap_point = TapPoint::PostLastLayer;
        let post = encode_image(&mut tape, &pixels, &cfg, &params).unwrap();
        cfg.tap_point = TapPoint::PreLastLayer;
        let pre = encode_image(&mut tape, &pixels, &cfg, &params).unwrap();
        let linf = tape
            .value(post)
            .iter()
            .zip(tape.value(pre))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn reid_embed_is_patch_mean() {
        let (cfg, params, pixels) = setup();
        let mut tape = Tape::new();
        let feats = encode_image(&mut tape, &pixels, &cfg, &params).unwrap();
        let emb = reid_embed(&mut tape, &pixels, &cfg, &params).unwrap();
        assert_eq!(tape.shape(emb), (1, 64));
        let f = tape.value(feats);
        for j in 0..64 {
            let mean: f64 = (0..32).map(|i| f[i * 64 + j]).sum::<f64>() / 32.0;
            assert!((tape.value(emb)[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_count_mismatch_rejected() {
        let (cfg, params, _) = setup();
        let mut tape = Tape::new();
        assert!(encode_image(&mut tape, &[0.0; 7], &cfg, &params).is_err());
    }
}
