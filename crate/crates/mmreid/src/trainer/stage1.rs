//! Pretraining loop: image → encoder → projection → causal LM over the
//! dialogue, with the latent ID/triplet terms joining the objective whenever
//! the mix weight leaves room for them.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::error::{Error, Result};
use crate::losses::{id_loss, lm_nll, overall_loss, triplet_loss, TripletConfig};
use crate::models::blocks;
use crate::models::checkpoint::{config_set_json, save_checkpoint};
use crate::models::encoder::{encode_image, init_encoder, VisualEncoderConfig};
use crate::models::lm::{
    init_lm, init_projection, lm_forward, pool_image_latents, project, CausalLmConfig, LatentPool,
};
use crate::models::params::ParamSet;
use crate::synthdata::dataset::{make_dialogue_sample, Dataset};
use crate::tokenizer::format_dialogue;
use crate::trainer::{
    build_training_vocab, channel_means, check_batch_fits, clip_global_norm, pk_sample, steps_for,
    HistoryWriter, LossRecord, PixelCache, Recipe, Stage, TrainConfig, TrainOutcome,
};

/// Stage-1 pretraining for any recipe with continuation or caption targets.
/// Writes `losses.jsonl` and `checkpoints/<stage>.ckpt` under `out_dir`.
pub fn pretrain(
    dataset: &Dataset,
    enc_cfg: &VisualEncoderConfig,
    lm_cfg: &CausalLmConfig,
    cfg: &TrainConfig,
    recipe: Recipe,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if cfg.stage != recipe.stage() {
        return Err(Error::Config(format!(
            "recipe {} runs in stage {}, config says {}",
            recipe.name(),
            recipe.stage().tag(),
            cfg.stage.tag()
        )));
    }
    check_batch_fits(cfg, dataset)?;

    let vocab = build_training_vocab(dataset)?;
    let mut lm_cfg = lm_cfg.clone();
    lm_cfg.vocab = vocab.len();
    lm_cfg.validate()?;

    let lambda = recipe.effective_lambda(cfg.lambda);
    let mode = recipe.dialogue_mode();
    let tri_cfg = TripletConfig {
        margin: cfg.margin,
        ..TripletConfig::default()
    };
    tri_cfg.validate()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1111_0000_0001);
    let mut params = ParamSet::new();
    init_encoder(enc_cfg, &mut params, &mut init_rng);
    init_projection(enc_cfg.d_v, lm_cfg.d_lm, &mut params, &mut init_rng);
    init_lm(&lm_cfg, &mut params, &mut init_rng);
    if lambda < 1.0 {
        blocks::init_linear(
            &mut params,
            "idhead.s1",
            lm_cfg.d_lm,
            dataset.num_train_classes(),
            &mut init_rng,
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1111_0000_0002);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let toggles = cfg.toggles();
    let fill = channel_means(dataset, &dataset.train)?;
    let mut cache = PixelCache::new();
    let mut history = HistoryWriter::create(&out_dir.join("losses.jsonl"))?;

    let total_steps = steps_for(cfg.epochs, dataset.train.len(), cfg.p, cfg.k);
    for step in 0..total_steps {
        let result = run_step(
            dataset, enc_cfg, &lm_cfg, cfg, &vocab, lambda, mode, &tri_cfg, &mut params,
            &mut adam, &toggles, fill, &mut cache, &mut rng, step,
        );
        match result {
            Ok(rec) => history.push(rec)?,
            Err(e @ Error::NonFinite { .. }) => {
                return Err(Error::TrainAborted {
                    step,
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }

    let mut config = BTreeMap::new();
    config.insert("stage".to_string(), cfg.stage.tag().to_string());
    config.insert("recipe".to_string(), recipe.name().to_string());
    config.insert("lambda".to_string(), lambda.to_string());
    config.insert("lr".to_string(), cfg.lr.to_string());
    config.insert("p".to_string(), cfg.p.to_string());
    config.insert("k".to_string(), cfg.k.to_string());
    config.insert("epochs".to_string(), cfg.epochs.to_string());
    config.insert("steps".to_string(), total_steps.to_string());
    config.insert("seed".to_string(), cfg.seed.to_string());
    config.insert(
        "train_ids".to_string(),
        dataset.num_train_classes().to_string(),
    );
    config.insert(
        "data_style".to_string(),
        dataset.config.style.tag().to_string(),
    );
    config_set_json(&mut config, "encoder_config", enc_cfg)?;
    config_set_json(&mut config, "lm_config", &lm_cfg)?;
    config_set_json(&mut config, "vocab", &vocab.tokens().to_vec())?;

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt_path = ckpt_dir.join(format!("{}.ckpt", cfg.stage.tag()));
    save_checkpoint(&ckpt_path, &config, &params)?;

    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        history: history.finish()?,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    dataset: &Dataset,
    enc_cfg: &VisualEncoderConfig,
    lm_cfg: &CausalLmConfig,
    cfg: &TrainConfig,
    vocab: &crate::tokenizer::Vocabulary,
    lambda: f64,
    mode: crate::synthdata::captions::DialogueMode,
    tri_cfg: &TripletConfig,
    params: &mut ParamSet,
    adam: &mut Adam,
    toggles: &crate::trainer::AugmentToggles,
    fill: [f64; 3],
    cache: &mut PixelCache,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<LossRecord> {
    let batch = pk_sample(&dataset.train, cfg.p, cfg.k, rng)?;
    #[cfg(debug_assertions)]
    batch.check(cfg.p, cfg.k)?;

    let mut tape = Tape::new();
    let mut nlls = Vec::with_capacity(batch.records.len());
    let mut pooled = Vec::with_capacity(batch.records.len());
    for rec in &batch.records {
        let raw = cache.get(dataset, rec)?.to_vec();
        let px = crate::trainer::augment(&raw, toggles, fill, rng);
        let feats = encode_image(&mut tape, &px, enc_cfg, params)?;
        let f_lm = project(&mut tape, feats, params)?;
        let sample = make_dialogue_sample(dataset, rec, mode, rng)?;
        let seq = format_dialogue(&sample.turns, vocab, enc_cfg.num_patches())?;
        let out = lm_forward(&mut tape, &seq, Some(f_lm), lm_cfg, params)?;
        nlls.push(lm_nll(&mut tape, out.logits, &seq)?);
        if lambda < 1.0 {
            pooled.push(pool_image_latents(
                &mut tape,
                out.hidden,
                &seq.image_slots,
                LatentPool::MeanSlots,
            )?);
        }
    }

    let mut lm_sum = nlls[0];
    for &v in &nlls[1..] {
        lm_sum = tape.add(lm_sum, v)?;
    }
    let lm_mean = tape.scale(lm_sum, 1.0 / nlls.len() as f64)?;

    let (overall, id_val, tri_val) = if lambda < 1.0 {
        let latents = tape.concat_rows(&pooled)?;
        let logits = blocks::linear(&mut tape, latents, params, "idhead.s1")?;
        let idl = id_loss(&mut tape, logits, &batch.labels)?;
        let tri = triplet_loss(&mut tape, latents, &batch.labels, tri_cfg)?;
        let overall = overall_loss(&mut tape, lm_mean, idl, tri, lambda)?;
        (
            overall,
            tape.scalar_value(idl),
            tape.scalar_value(tri),
        )
    } else {
        (lm_mean, 0.0, 0.0)
    };

    let record = LossRecord {
        step,
        lm_nll: tape.scalar_value(lm_mean),
        id_loss: id_val,
        triplet_loss: tri_val,
        overall: tape.scalar_value(overall),
        lambda,
        lr: cfg.lr,
    };

    tape.backward(overall)?;
    let mut grads: BTreeMap<String, Vec<f64>> = tape
        .param_grads()
        .map(|(n, g)| (n.to_string(), g.to_vec()))
        .collect();
    drop(tape);
    if let Some(c) = cfg.clip_grad {
        clip_global_norm(&mut grads, c);
    }
    adam.step(params.iter_mut().filter_map(|(name, t)| {
        grads
            .get(name)
            .map(|g| (name, t.data_mut(), Some(g.as_slice())))
    }))?;
    Ok(record)
}

/// Multimodal pretraining (any recipe except the plain baseline).
pub fn train_stage1(
    dataset: &Dataset,
    enc_cfg: &VisualEncoderConfig,
    lm_cfg: &CausalLmConfig,
    cfg: &TrainConfig,
    recipe: Recipe,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if recipe == Recipe::Baseline {
        return Err(Error::Config(
            "the baseline recipe trains through train_baseline".into(),
        ));
    }
    pretrain(dataset, enc_cfg, lm_cfg, cfg, recipe, out_dir)
}

/// Caption-prediction pretraining with the diverse prompt pool and no
/// latent ID/triplet terms.
pub fn train_baseline(
    dataset: &Dataset,
    enc_cfg: &VisualEncoderConfig,
    lm_cfg: &CausalLmConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::BaselinePretrain {
        return Err(Error::Config(format!(
            "baseline training requires stage {}, config says {}",
            Stage::BaselinePretrain.tag(),
            cfg.stage.tag()
        )));
    }
    pretrain(dataset, enc_cfg, lm_cfg, cfg, Recipe::Baseline, out_dir)
}
