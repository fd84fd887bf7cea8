//! Command implementations behind the binary. Each takes a resolved
//! [`RunConfig`], produces its artifacts under the output directory, and
//! reports through an [`ExperimentManifest`] that is written whether the
//! run succeeds or fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::{file_digest_short, ExperimentManifest};
use super::verify::{gradcheck_suite, selftest_suite, GRAD_SEEDS, GRAD_TOLERANCE};
use crate::error::{Error, Result};
use crate::eval::{embed_records, evaluate, evaluate_dataset, rank_list_text, EvalReport};
use crate::models::checkpoint::load_checkpoint;
use crate::synthdata::dataset::{build_dataset, continuations_from_file, load_dataset, Dataset};
use crate::synthdata::dataset_stats;
use crate::trainer::{
    train_baseline, train_stage1, train_stage2, Recipe, Stage, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CliCommand {
    GenData,
    Pretrain,
    TrainReid,
    Eval,
    CrossEval,
    Ablate,
    GradCheck,
    SelfTest,
}

impl CliCommand {
    pub fn name(self) -> &'static str {
        match self {
            CliCommand::GenData => "gen-data",
            CliCommand::Pretrain => "pretrain",
            CliCommand::TrainReid => "train-reid",
            CliCommand::Eval => "eval",
            CliCommand::CrossEval => "cross-eval",
            CliCommand::Ablate => "ablate",
            CliCommand::GradCheck => "gradcheck",
            CliCommand::SelfTest => "selftest",
        }
    }
}

/// One parsed command line: what to run and the fully resolved config.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: CliCommand,
    pub config: RunConfig,
    pub recipe: Recipe,
    /// `ablate --seeds N` override.
    pub seeds: Option<usize>,
}

/// Run one command end to end. The manifest lands in the output directory
/// in every case; the error (if any) is re-raised after it is written.
pub fn run(inv: &Invocation) -> Result<ExperimentManifest> {
    let out = inv.config.out_dir().to_path_buf();
    fs::create_dir_all(&out)?;
    let recipe_tag = (inv.command == CliCommand::Pretrain).then(|| inv.recipe.name());
    let mut man = ExperimentManifest::begin(inv.command.name(), recipe_tag, &inv.config)?;
    let t0 = Instant::now();
    let result = dispatch(inv, &out, &mut man);
    man.add_timing("total", t0.elapsed().as_secs_f64());
    match result {
        Ok(()) => {
            man.status = "ok".to_string();
            man.write(&out)?;
            Ok(man)
        }
        Err(e) => {
            man.status = "failed".to_string();
            man.failure = Some(e.to_string());
            let _ = man.write(&out);
            Err(e)
        }
    }
}

fn dispatch(inv: &Invocation, out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    match inv.command {
        CliCommand::GenData => gen_data(&inv.config, out, man),
        CliCommand::Pretrain => pretrain_cmd(&inv.config, inv.recipe, out, man),
        CliCommand::TrainReid => train_reid_cmd(&inv.config, out, man),
        CliCommand::Eval => eval_cmd(&inv.config, out, man),
        CliCommand::CrossEval => cross_eval_cmd(&inv.config, out, man),
        CliCommand::Ablate => ablate_cmd(&inv.config, inv.seeds, out, man),
        CliCommand::GradCheck => gradcheck_cmd(out, man),
        CliCommand::SelfTest => selftest_cmd(out, man),
    }
}

/// Load the configured dataset with a usage-grade error when it is not
/// there, instead of a raw file-not-found from deep inside the loader.
fn load_input_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join("manifest.json").exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run gen-data first or set paths.dataset",
            dir.display()
        )));
    }
    load_dataset(&dir)
}

fn gen_data(cfg: &RunConfig, out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    let dest = cfg.dataset_dir();
    prepare_dataset_dir(&dest)?;
    let external = match &cfg.paths.continuations {
        Some(p) => Some(continuations_from_file(p)?),
        None => None,
    };
    let t = Instant::now();
    let ds = build_dataset(&cfg.data, &dest, external.as_ref())?;
    man.add_timing("build_dataset", t.elapsed().as_secs_f64());

    let stats = dataset_stats(&ds);
    man.add_metric("train_ids", stats.train_ids as f64);
    man.add_metric("query_ids", stats.query_ids as f64);
    man.add_metric("gallery_ids", stats.gallery_ids as f64);
    man.add_metric("train_images", stats.train_images as f64);
    man.add_metric("query_images", stats.query_images as f64);
    man.add_metric("gallery_images", stats.gallery_images as f64);
    man.add_metric("cameras", stats.cameras as f64);
    man.add_artifact(out, &dest.join("manifest.json"));
    println!(
        "dataset at {}: {} train / {} query / {} gallery images ({} + {} identities, {} cams, style {})",
        dest.display(),
        stats.train_images,
        stats.query_images,
        stats.gallery_images,
        stats.train_ids,
        stats.query_ids,
        stats.cameras,
        ds.config.style.tag(),
    );
    Ok(())
}

/// gen-data regenerates over a previous dataset, but refuses to clobber a
/// directory that does not look like one.
fn prepare_dataset_dir(dest: &Path) -> Result<()> {
    if dest.exists() {
        if dest.join("manifest.json").exists() {
            fs::remove_dir_all(dest)?;
        } else if fs::read_dir(dest)?.next().is_some() {
            return Err(Error::Config(format!(
                "refusing to overwrite {}: exists and is not a dataset directory",
                dest.display()
            )));
        }
    }
    Ok(())
}

fn pretrain_cmd(
    cfg: &RunConfig,
    recipe: Recipe,
    out: &Path,
    man: &mut ExperimentManifest,
) -> Result<()> {
    let ds = load_input_dataset(cfg)?;
    let mut tcfg = cfg.train.clone();
    tcfg.stage = recipe.stage();
    let t = Instant::now();
    let outcome = match recipe {
        Recipe::Baseline => train_baseline(&ds, &cfg.model.encoder, &cfg.model.lm, &tcfg, out)?,
        _ => train_stage1(&ds, &cfg.model.encoder, &cfg.model.lm, &tcfg, recipe, out)?,
    };
    man.add_timing("pretrain", t.elapsed().as_secs_f64());
    record_training(man, out, &outcome);
    if let Some(last) = outcome.history.last() {
        println!(
            "pretrained {} for {} steps: lm {:.4} id {:.4} triplet {:.4} overall {:.4}",
            recipe.name(),
            last.step + 1,
            last.lm_nll,
            last.id_loss,
            last.triplet_loss,
            last.overall,
        );
    }
    println!("checkpoint at {}", outcome.checkpoint.display());
    Ok(())
}

fn train_reid_cmd(cfg: &RunConfig, out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    let ds = load_input_dataset(cfg)?;
    let init_path = resolve_init_checkpoint(cfg, out)?;
    let init = match &init_path {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    match &init_path {
        Some(p) => println!("fine-tuning from {}", p.display()),
        None => println!("no pretraining checkpoint found, training the encoder from scratch"),
    }
    let mut tcfg = cfg.train.clone();
    tcfg.stage = Stage::Reid;
    let t = Instant::now();
    let outcome = train_stage2(&ds, &cfg.model.encoder, &tcfg, init.as_ref(), out)?;
    man.add_timing("train_reid", t.elapsed().as_secs_f64());
    record_training(man, out, &outcome);
    if let Some(last) = outcome.history.last() {
        println!(
            "fine-tuned for {} steps: id {:.4} triplet {:.4} overall {:.4}",
            last.step + 1,
            last.id_loss,
            last.triplet_loss,
            last.overall,
        );
    }
    println!("checkpoint at {}", outcome.checkpoint.display());
    Ok(())
}

/// Fine-tuning starts from, in order: the explicit `paths.checkpoint`, the
/// `train.init_checkpoint` field, or whatever stage-1 checkpoint already
/// sits under the output directory. No candidate means from scratch.
fn resolve_init_checkpoint(cfg: &RunConfig, out: &Path) -> Result<Option<PathBuf>> {
    if let Some(p) = &cfg.paths.checkpoint {
        return existing(p).map(Some);
    }
    if let Some(p) = &cfg.train.init_checkpoint {
        return existing(Path::new(p)).map(Some);
    }
    for tag in ["mllmreid_pretrain", "baseline_pretrain"] {
        let p = out.join("checkpoints").join(format!("{tag}.ckpt"));
        if p.exists() {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

fn existing(p: &Path) -> Result<PathBuf> {
    if p.exists() {
        Ok(p.to_path_buf())
    } else {
        Err(Error::Config(format!("checkpoint {} not found", p.display())))
    }
}

fn resolve_eval_checkpoint(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    if let Some(p) = &cfg.paths.checkpoint {
        return existing(p);
    }
    let conventional = out.join("checkpoints").join("reid.ckpt");
    if conventional.exists() {
        return Ok(conventional);
    }
    Err(Error::Config(format!(
        "no checkpoint at {}; set paths.checkpoint",
        conventional.display()
    )))
}

fn record_training(man: &mut ExperimentManifest, out: &Path, outcome: &TrainOutcome) {
    man.add_artifact(out, &outcome.checkpoint);
    man.add_artifact(out, &out.join("losses.jsonl"));
    if let Some(last) = outcome.history.last() {
        man.add_metric("final_overall", last.overall);
        man.add_metric("final_lm_nll", last.lm_nll);
        man.add_metric("final_id_loss", last.id_loss);
        man.add_metric("final_triplet", last.triplet_loss);
    }
    man.add_metric("steps", outcome.history.len() as f64);
}

fn eval_cmd(cfg: &RunConfig, out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    let ds = load_input_dataset(cfg)?;
    let ckpt_path = resolve_eval_checkpoint(cfg, out)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let ckpt_id = file_digest_short(&ckpt_path)?;

    let t = Instant::now();
    let q = embed_records(&ckpt, &ds, &ds.query)?;
    let g = embed_records(&ckpt, &ds, &ds.gallery)?;
    man.add_timing("embed", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let protocol = format!("in-domain:{}", ds.config.style.tag());
    let report = evaluate(&q, &g, cfg.eval.metric, &protocol, &ckpt_id)?;
    man.add_timing("evaluate", t.elapsed().as_secs_f64());

    let path = write_json(out, "eval.json", &report)?;
    man.add_artifact(out, &path);
    if cfg.eval.rank_top_k > 0 {
        let ranks = rank_list_text(&q, &g, cfg.eval.metric, cfg.eval.rank_top_k)?;
        let rp = out.join("ranks.txt");
        fs::write(&rp, ranks)?;
        man.add_artifact(out, &rp);
    }
    man.add_metric("map", report.map);
    man.add_metric("rank1", report.rank1);
    man.add_metric("valid_queries", report.num_valid_queries as f64);
    println!(
        "mAP {:.4}  R1 {:.4}  ({} valid queries, checkpoint {ckpt_id})",
        report.map, report.rank1, report.num_valid_queries
    );
    Ok(())
}

fn cross_eval_cmd(cfg: &RunConfig, out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    let source = load_input_dataset(cfg)?;
    let target = match &cfg.paths.target_dataset {
        Some(p) if !p.join("manifest.json").exists() => {
            return Err(Error::Config(format!(
                "no dataset at {}; check paths.target_dataset",
                p.display()
            )))
        }
        Some(p) => load_dataset(p)?,
        None => {
            // no target given: generate the shifted counterpart of the
            // source benchmark on the fly
            let mut dcfg = source.config;
            dcfg.style = dcfg.style.other();
            let dest = out.join("dataset-shifted");
            prepare_dataset_dir(&dest)?;
            let t = Instant::now();
            let ds = build_dataset(&dcfg, &dest, None)?;
            man.add_timing("build_shifted_dataset", t.elapsed().as_secs_f64());
            man.add_artifact(out, &dest.join("manifest.json"));
            ds
        }
    };
    let ckpt_path = resolve_eval_checkpoint(cfg, out)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let ckpt_id = file_digest_short(&ckpt_path)?;

    let t = Instant::now();
    let report =
        crate::eval::cross_dataset_eval(&ckpt, &source, &target, cfg.eval.metric, &ckpt_id)?;
    man.add_timing("evaluate", t.elapsed().as_secs_f64());

    let path = write_json(out, "eval.json", &report)?;
    man.add_artifact(out, &path);
    man.add_metric("source_map", report.source.map);
    man.add_metric("source_rank1", report.source.rank1);
    man.add_metric("target_map", report.target.map);
    man.add_metric("target_rank1", report.target.rank1);
    man.add_metric("map_transfer_drop", report.source.map - report.target.map);
    println!(
        "{}: mAP {:.4}  R1 {:.4}",
        report.source.protocol, report.source.map, report.source.rank1
    );
    println!(
        "{}: mAP {:.4}  R1 {:.4}",
        report.target.protocol, report.target.map, report.target.rank1
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub recipe: String,
    pub label: String,
    pub map_mean: f64,
    pub map_sd: f64,
    pub rank1_mean: f64,
    pub rank1_sd: f64,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: usize,
    pub rows: Vec<AblationRow>,
}

fn ablate_cmd(
    cfg: &RunConfig,
    seeds_flag: Option<usize>,
    out: &Path,
    man: &mut ExperimentManifest,
) -> Result<()> {
    let seeds = seeds_flag.unwrap_or(cfg.ablate.seeds);
    if seeds == 0 {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }

    // all recipes and seeds share one benchmark dataset
    let ds_dir = cfg.dataset_dir();
    let dataset = if ds_dir.join("manifest.json").exists() {
        load_dataset(&ds_dir)?
    } else {
        prepare_dataset_dir(&ds_dir)?;
        let t = Instant::now();
        let ds = build_dataset(&cfg.data, &ds_dir, None)?;
        man.add_timing("build_dataset", t.elapsed().as_secs_f64());
        ds
    };

    let mut rows = Vec::new();
    for recipe in Recipe::ALL {
        let mut runs = Vec::new();
        for i in 0..seeds {
            let seed = cfg.train.seed.wrapping_add(i as u64);
            let run_dir = out
                .join("ablate")
                .join(recipe.name())
                .join(format!("seed{i:02}"));
            let t = Instant::now();
            let report = ablation_pipeline(cfg, recipe, seed, &dataset, &run_dir)?;
            let secs = t.elapsed().as_secs_f64();
            man.add_timing(&format!("{}_seed{i:02}", recipe.name()), secs);
            println!(
                "{:>9} seed {seed}: mAP {:.4}  R1 {:.4}  ({secs:.1}s)",
                recipe.name(),
                report.map,
                report.rank1
            );
            runs.push(AblationRun {
                seed,
                map: report.map,
                rank1: report.rank1,
            });
        }
        rows.push(summarize_row(recipe, runs));
    }

    let summary = AblationSummary { seeds, rows };
    let path = write_json(out, "ablation.json", &summary)?;
    man.add_artifact(out, &path);
    for row in &summary.rows {
        man.add_metric(&format!("{}_map_mean", row.recipe), row.map_mean);
        man.add_metric(&format!("{}_rank1_mean", row.recipe), row.rank1_mean);
    }
    print!("{}", ablation_table(&summary));
    Ok(())
}

/// One full pipeline at a reduced schedule: stage-1 with the recipe,
/// stage-2 from its checkpoint, then retrieval scoring. Each stage keeps
/// its own loss history in a subdirectory.
fn ablation_pipeline(
    cfg: &RunConfig,
    recipe: Recipe,
    seed: u64,
    dataset: &Dataset,
    run_dir: &Path,
) -> Result<EvalReport> {
    let mut t1 = cfg.train.clone();
    t1.seed = seed;
    t1.p = cfg.ablate.p;
    t1.k = cfg.ablate.k;
    t1.epochs = cfg.ablate.epochs;
    t1.reid_epochs = cfg.ablate.reid_epochs;
    t1.stage = recipe.stage();
    let stage1 = match recipe {
        Recipe::Baseline => train_baseline(
            dataset,
            &cfg.model.encoder,
            &cfg.model.lm,
            &t1,
            &run_dir.join("stage1"),
        )?,
        _ => train_stage1(
            dataset,
            &cfg.model.encoder,
            &cfg.model.lm,
            &t1,
            recipe,
            &run_dir.join("stage1"),
        )?,
    };

    let init = load_checkpoint(&stage1.checkpoint)?;
    let mut t2 = t1.clone();
    t2.stage = Stage::Reid;
    let stage2 = train_stage2(
        dataset,
        &cfg.model.encoder,
        &t2,
        Some(&init),
        &run_dir.join("stage2"),
    )?;

    let ckpt = load_checkpoint(&stage2.checkpoint)?;
    let ckpt_id = file_digest_short(&stage2.checkpoint)?;
    let report = evaluate_dataset(
        &ckpt,
        dataset,
        cfg.eval.metric,
        &format!("ablate:{}", recipe.name()),
        &ckpt_id,
    )?;
    write_json(run_dir, "eval.json", &report)?;
    Ok(report)
}

fn summarize_row(recipe: Recipe, runs: Vec<AblationRun>) -> AblationRow {
    let label = match recipe {
        Recipe::Baseline => "baseline",
        Recipe::Common => "+common",
        Recipe::Syncreid => "+syncreid",
        Recipe::Full => "+both",
    };
    let maps: Vec<f64> = runs.iter().map(|r| r.map).collect();
    let r1s: Vec<f64> = runs.iter().map(|r| r.rank1).collect();
    let (map_mean, map_sd) = mean_sd(&maps);
    let (rank1_mean, rank1_sd) = mean_sd(&r1s);
    AblationRow {
        recipe: recipe.name().to_string(),
        label: label.to_string(),
        map_mean,
        map_sd,
        rank1_mean,
        rank1_sd,
        runs,
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Table-shaped summary, percentages, one row per recipe variant.
pub fn ablation_table(summary: &AblationSummary) -> String {
    let mut t = String::new();
    t.push_str(&format!(
        "{:<11} {:>5} {:>14} {:>14}\n",
        "variant", "seeds", "mAP (%)", "R1 (%)"
    ));
    for row in &summary.rows {
        t.push_str(&format!(
            "{:<11} {:>5} {:>7.1} ± {:>4.1} {:>7.1} ± {:>4.1}\n",
            row.label,
            row.runs.len(),
            row.map_mean * 100.0,
            row.map_sd * 100.0,
            row.rank1_mean * 100.0,
            row.rank1_sd * 100.0,
        ));
    }
    t
}

fn gradcheck_cmd(out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    let t = Instant::now();
    let cases = gradcheck_suite(GRAD_SEEDS)?;
    man.add_timing("gradcheck", t.elapsed().as_secs_f64());
    let path = write_json(out, "gradcheck.json", &cases)?;
    man.add_artifact(out, &path);

    let mut worst = 0.0f64;
    let mut first_fail: Option<String> = None;
    for c in &cases {
        let ok = c.max_rel_error <= GRAD_TOLERANCE;
        println!(
            "{} {:<32} max rel err {:.3e}  ({} entries, {} seeds)",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.entries,
            c.seeds
        );
        worst = worst.max(c.max_rel_error);
        if !ok && first_fail.is_none() {
            first_fail = Some(c.name.clone());
        }
    }
    man.add_metric("max_rel_error", worst);
    man.add_metric("cases", cases.len() as f64);
    if let Some(name) = first_fail {
        return Err(Error::Data(format!(
            "gradient check failed on `{name}`: max rel error above {GRAD_TOLERANCE:.0e}"
        )));
    }
    println!("all {} gradient cases within {GRAD_TOLERANCE:.0e}", cases.len());
    Ok(())
}

fn selftest_cmd(out: &Path, man: &mut ExperimentManifest) -> Result<()> {
    let t = Instant::now();
    let cases = selftest_suite();
    man.add_timing("selftest", t.elapsed().as_secs_f64());
    let path = write_json(out, "selftest.json", &cases)?;
    man.add_artifact(out, &path);

    let mut first_fail: Option<String> = None;
    for c in &cases {
        println!(
            "{} {:<34} {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.passed && first_fail.is_none() {
            first_fail = Some(c.name.clone());
        }
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    man.add_metric("passed", (cases.len() - failed) as f64);
    man.add_metric("failed", failed as f64);
    if let Some(name) = first_fail {
        return Err(Error::Data(format!("selftest failed on `{name}`")));
    }
    println!("all {} self-test properties hold", cases.len());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::manifest::ExperimentManifest;
    use crate::synthdata::dataset::DataConfig;

    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig {
            train_ids: 4,
            eval_ids: 3,
            imgs_per_id: 3,
            cams: 2,
            ..DataConfig::default()
        };
        cfg.model.encoder.d_v = 16;
        cfg.model.encoder.layers = 1;
        cfg.model.encoder.heads = 2;
        cfg.model.lm.d_lm = 16;
        cfg.model.lm.layers = 1;
        cfg.model.lm.heads = 2;
        cfg.train.p = 2;
        cfg.train.k = 2;
        cfg.train.epochs = 1;
        cfg.train.reid_epochs = 1;
        cfg.out = Some(out.to_path_buf());
        cfg
    }

    fn run_cmd(cfg: &RunConfig, command: CliCommand) -> Result<ExperimentManifest> {
        run(&Invocation {
            command,
            config: cfg.clone(),
            recipe: Recipe::Full,
            seeds: None,
        })
    }

    #[test]
    fn pipeline_chains_through_one_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());

        let man = run_cmd(&cfg, CliCommand::GenData).unwrap();
        assert_eq!(man.status, "ok");
        assert_eq!(man.metrics["train_images"], 12.0);
        assert!(dir.path().join("dataset/manifest.json").exists());

        let man = run_cmd(&cfg, CliCommand::Pretrain).unwrap();
        assert!(dir.path().join("checkpoints/mllmreid_pretrain.ckpt").exists());
        assert!(man.metrics["final_overall"].is_finite());
        assert_eq!(man.recipe.as_deref(), Some("full"));

        let man = run_cmd(&cfg, CliCommand::TrainReid).unwrap();
        assert!(dir.path().join("checkpoints/reid.ckpt").exists());
        assert!(man.metrics["steps"] >= 1.0);

        let man = run_cmd(&cfg, CliCommand::Eval).unwrap();
        assert!(dir.path().join("eval.json").exists());
        assert!(dir.path().join("ranks.txt").exists());
        assert!(man.metrics["map"] > 0.0 && man.metrics["map"] <= 1.0);

        let loaded = ExperimentManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.command, "eval");
        assert_eq!(loaded.status, "ok");
        assert!(loaded.artifacts.contains(&"eval.json".to_string()));
    }

    #[test]
    fn failure_still_writes_manifest_with_cause() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        // eval with no dataset and no checkpoint must fail
        let err = run_cmd(&cfg, CliCommand::Eval).unwrap_err();
        let man = ExperimentManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(man.status, "failed");
        let cause = man.failure.expect("failure cause recorded");
        assert_eq!(cause, err.to_string());
    }

    #[test]
    fn gen_data_refuses_to_clobber_foreign_directories() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        let foreign = dir.path().join("precious");
        fs::create_dir_all(&foreign).unwrap();
        fs::write(foreign.join("notes.txt"), "do not delete").unwrap();
        cfg.paths.dataset = Some(foreign.clone());
        let err = run_cmd(&cfg, CliCommand::GenData).unwrap_err();
        assert!(err.to_string().contains("refusing to overwrite"));
        assert!(foreign.join("notes.txt").exists());
        // but regenerating over an actual dataset is fine
        cfg.paths.dataset = None;
        run_cmd(&cfg, CliCommand::GenData).unwrap();
        run_cmd(&cfg, CliCommand::GenData).unwrap();
    }

    #[test]
    fn cross_eval_generates_shifted_target() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        run_cmd(&cfg, CliCommand::GenData).unwrap();
        run_cmd(&cfg, CliCommand::TrainReid).unwrap(); // scratch encoder
        let man = run_cmd(&cfg, CliCommand::CrossEval).unwrap();
        assert!(dir.path().join("dataset-shifted/manifest.json").exists());
        assert!(man.metrics.contains_key("source_map"));
        assert!(man.metrics.contains_key("target_map"));
        let report: crate::eval::CrossEvalReport = serde_json::from_str(
            &fs::read_to_string(dir.path().join("eval.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report.source.protocol, "in-domain:a");
        assert_eq!(report.target.protocol, "cross-domain:a->b");
    }

    #[test]
    fn selftest_command_reports_green() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out = Some(dir.path().to_path_buf());
        let man = run_cmd(&cfg, CliCommand::SelfTest).unwrap();
        assert_eq!(man.metrics["failed"], 0.0);
        assert!(dir.path().join("selftest.json").exists());
    }

    #[test]
    fn mean_sd_basics() {
        let (m, s) = mean_sd(&[2.0, 4.0, 6.0]);
        assert_eq!(m, 4.0);
        assert!((s - 2.0).abs() < 1e-12);
        let (m1, s1) = mean_sd(&[3.5]);
        assert_eq!((m1, s1), (3.5, 0.0));
    }

    #[test]
    fn ablation_table_shape() {
        let rows = [Recipe::Baseline, Recipe::Common, Recipe::Syncreid, Recipe::Full]
            .into_iter()
            .map(|r| {
                summarize_row(
                    r,
                    vec![
                        AblationRun { seed: 7, map: 0.41, rank1: 0.52 },
                        AblationRun { seed: 8, map: 0.45, rank1: 0.56 },
                    ],
                )
            })
            .collect();
        let summary = AblationSummary { seeds: 2, rows };
        let table = ablation_table(&summary);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5, "header plus four variants");
        assert!(lines[1].starts_with("baseline"));
        assert!(lines[2].starts_with("+common"));
        assert!(lines[3].starts_with("+syncreid"));
        assert!(lines[4].starts_with("+both"));
        assert!(lines[1].contains('±'));
    }
}
