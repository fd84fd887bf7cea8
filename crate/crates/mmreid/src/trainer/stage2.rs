//! ReID fine-tuning: the visual encoder alone, a fresh identity head on the
//! mean-pooled patch features, and the ID + triplet objective. No language
//! model, no projection; the result evaluates with encoder weights only.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::error::{Error, Result};
use crate::losses::{id_loss, triplet_loss, TripletConfig};
use crate::models::blocks;
use crate::models::checkpoint::{config_set_json, save_checkpoint, Checkpoint};
use crate::models::encoder::{init_encoder, reid_embed, VisualEncoderConfig};
use crate::models::params::ParamSet;
use crate::synthdata::dataset::Dataset;
use crate::trainer::{
    channel_means, check_batch_fits, clip_global_norm, pk_sample, steps_for, HistoryWriter,
    LossRecord, PixelCache, Stage, TrainConfig, TrainOutcome,
};

/// Fine-tune from a pretrained checkpoint's encoder, or from scratch when
/// `init` is absent. Writes `losses.jsonl` and `checkpoints/reid.ckpt`
/// under `out_dir`.
pub fn train_stage2(
    dataset: &Dataset,
    enc_cfg: &VisualEncoderConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Reid {
        return Err(Error::Config(format!(
            "fine-tuning requires stage {}, config says {}",
            Stage::Reid.tag(),
            cfg.stage.tag()
        )));
    }
    check_batch_fits(cfg, dataset)?;

    // an initial checkpoint fixes the architecture; otherwise the caller's
    let enc_cfg: VisualEncoderConfig = match init {
        Some(ck) => ck.get_json("encoder_config")?,
        None => enc_cfg.clone(),
    };
    enc_cfg.validate()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2222_0000_0001);
    let mut params = ParamSet::new();
    match init {
        Some(ck) => {
            ck.params.copy_prefix_into("enc.", &mut params);
            if !params.contains("enc.embed.w") {
                return Err(Error::Checkpoint(
                    "initial checkpoint has no encoder weights".into(),
                ));
            }
        }
        None => init_encoder(&enc_cfg, &mut params, &mut init_rng),
    }
    blocks::init_linear(
        &mut params,
        "idhead.s2",
        enc_cfg.d_v,
        dataset.num_train_classes(),
        &mut init_rng,
    );

    let tri_cfg = TripletConfig {
        margin: cfg.margin,
        ..TripletConfig::default()
    };
    tri_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2222_0000_0002);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let toggles = cfg.toggles();
    let fill = channel_means(dataset, &dataset.train)?;
    let mut cache = PixelCache::new();
    let mut history = HistoryWriter::create(&out_dir.join("losses.jsonl"))?;

    let total_steps = steps_for(cfg.reid_epochs, dataset.train.len(), cfg.p, cfg.k);
    for step in 0..total_steps {
        let result = (|| -> Result<LossRecord> {
            let batch = pk_sample(&dataset.train, cfg.p, cfg.k, &mut rng)?;
            #[cfg(debug_assertions)]
            batch.check(cfg.p, cfg.k)?;

            let mut tape = Tape::new();
            let mut rows = Vec::with_capacity(batch.records.len());
            for rec in &batch.records {
                let raw = cache.get(dataset, rec)?.to_vec();
                let px = crate::trainer::augment(&raw, &toggles, fill, &mut rng);
                rows.push(reid_embed(&mut tape, &px, &enc_cfg, &params)?);
            }
            let embeds = tape.concat_rows(&rows)?;
            let logits = blocks::linear(&mut tape, embeds, &params, "idhead.s2")?;
            let idl = id_loss(&mut tape, logits, &batch.labels)?;
            let tri = triplet_loss(&mut tape, embeds, &batch.labels, &tri_cfg)?;
            let overall = tape.add(idl, tri)?;

            let record = LossRecord {
                step,
                lm_nll: 0.0,
                id_loss: tape.scalar_value(idl),
                triplet_loss: tape.scalar_value(tri),
                overall: tape.scalar_value(overall),
                lambda: 0.0,
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
        })();
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
    config.insert("stage".to_string(), Stage::Reid.tag().to_string());
    config.insert("lr".to_string(), cfg.lr.to_string());
    config.insert("p".to_string(), cfg.p.to_string());
    config.insert("k".to_string(), cfg.k.to_string());
    config.insert("epochs".to_string(), cfg.reid_epochs.to_string());
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
    if let Some(ck) = init {
        if let Some(recipe) = ck.config.get("recipe") {
            config.insert("pretrain_recipe".to_string(), recipe.clone());
        }
    }
    config_set_json(&mut config, "encoder_config", &enc_cfg)?;

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt_path = ckpt_dir.join("reid.ckpt");
    save_checkpoint(&ckpt_path, &config, &params)?;

    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        history: history.finish()?,
    })
}
