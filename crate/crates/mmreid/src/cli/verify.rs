//! Runtime self-checking: the gradient suite behind `gradcheck` and the
//! invariant suite behind `selftest`. Both run from the shipped binary on
//! a clean checkout, so they rely on nothing outside the library.

use rand::prelude::SliceRandom;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::Serialize;

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::error::Result;
use crate::eval::{brute_force_oracle, evaluate, EmbeddingMatrix};
use crate::losses::{
    id_loss, lm_nll, overall_loss, pairwise_distances, triplet_loss, Distance, Reduction,
    TripletConfig,
};
use crate::synthdata::dataset::{build_dataset, DataConfig};
use crate::synthdata::{
    continuation_for, gen_caption, parse_caption, reference_benchmark, word_count, DatasetStats,
    IdentitySpec, ATTRIBUTE_SPACE, MAX_CONTINUATION_WORDS,
};
use crate::tokenizer::TokenSequence;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 10;
const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub seeds: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTestCase {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Result<Tensor> {
    let data = (0..r * c).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(vec![r, c], data)
}

/// Magnitudes in `[min_abs, max_abs]` with random sign: keeps inputs away
/// from the kinks of relu and clamp during finite differencing.
fn signed_away(
    rng: &mut ChaCha8Rng,
    r: usize,
    c: usize,
    min_abs: f64,
    max_abs: f64,
) -> Result<Tensor> {
    let data = (0..r * c)
        .map(|_| {
            let mag = rng.gen_range(min_abs..max_abs);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(vec![r, c], data)
}

/// Shuffled grid plus small jitter: all elements distinct by at least
/// ~0.4, so row max/min picks are stable under the probe step.
fn spread(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Result<Tensor> {
    let mut order: Vec<usize> = (0..r * c).collect();
    order.shuffle(rng);
    let data = order
        .iter()
        .map(|&k| k as f64 * 0.5 + rng.gen_range(-0.05..0.05))
        .collect();
    Tensor::from_vec(vec![r, c], data)
}

/// Reduce a non-scalar op output to a scalar through a fixed, nowhere-zero
/// weighting so every output element contributes to the checked gradient.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let (r, c) = tape.shape(v);
    if (r, c) == (1, 1) {
        return Ok(v);
    }
    let w: Vec<f64> = (0..r * c)
        .map(|i| 0.25 + ((i * 37 % 13) as f64 - 6.0) * 0.11)
        .collect();
    let wt = tape.leaf(&Tensor::from_vec(vec![r, c], w)?)?;
    let weighted = tape.mul(v, wt)?;
    tape.sum(weighted)
}

fn run_case<G, F>(
    out: &mut Vec<GradCase>,
    seeds: u64,
    name: &str,
    gen: G,
    f: F,
) -> Result<()>
where
    G: Fn(&mut ChaCha8Rng) -> Result<Vec<(&'static str, Tensor)>>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6763_6865 ^ s.wrapping_mul(0x9e37_79b9));
        let inputs = gen(&mut rng)?;
        let report = grad_check(&f, &inputs, GRAD_EPS)?;
        worst = worst.max(report.max_rel_error);
        entries += report.entries_checked;
    }
    out.push(GradCase {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
        seeds,
    });
    Ok(())
}

/// Central-difference checks for every differentiable tape op and every
/// loss, each over `seeds` random instances.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();

    run_case(
        &mut out,
        seeds,
        "add",
        |r| Ok(vec![("a", uniform(r, 2, 3, -2.0, 2.0)?), ("b", uniform(r, 2, 3, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.add(v[0], v[1])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "sub",
        |r| Ok(vec![("a", uniform(r, 2, 3, -2.0, 2.0)?), ("b", uniform(r, 2, 3, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.sub(v[0], v[1])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "mul",
        |r| Ok(vec![("a", uniform(r, 2, 3, -2.0, 2.0)?), ("b", uniform(r, 2, 3, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.mul(v[0], v[1])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "scale",
        |r| Ok(vec![("a", uniform(r, 3, 2, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.scale(v[0], 1.7)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "add_scalar",
        |r| Ok(vec![("a", uniform(r, 3, 2, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.add_scalar(v[0], -0.9)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "relu",
        |r| Ok(vec![("a", signed_away(r, 3, 4, 0.2, 1.5)?)]),
        |t, v| {
            let x = t.relu(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "gelu",
        |r| Ok(vec![("a", uniform(r, 3, 4, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.gelu(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "sqrt0",
        |r| Ok(vec![("a", uniform(r, 3, 4, 0.3, 2.0)?)]),
        |t, v| {
            let x = t.sqrt0(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "clamp_min",
        |r| {
            // values on both sides of the threshold, none within 0.2 of it
            let below = uniform(r, 2, 3, -1.0, 0.3)?;
            let above = uniform(r, 2, 3, 0.7, 2.0)?;
            let mixed: Vec<f64> = below
                .data()
                .iter()
                .zip(above.data())
                .enumerate()
                .map(|(i, (b, a))| if i % 2 == 0 { *b } else { *a })
                .collect();
            Ok(vec![("a", Tensor::from_vec(vec![2, 3], mixed)?)])
        },
        |t, v| {
            let x = t.clamp_min(v[0], 0.5)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "recip",
        |r| Ok(vec![("a", signed_away(r, 3, 3, 0.4, 2.0)?)]),
        |t, v| {
            let x = t.recip(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "matmul",
        |r| Ok(vec![("a", uniform(r, 2, 3, -1.5, 1.5)?), ("b", uniform(r, 3, 4, -1.5, 1.5)?)]),
        |t, v| {
            let x = t.matmul(v[0], v[1])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "transpose",
        |r| Ok(vec![("a", uniform(r, 2, 5, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.transpose(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "add_row_broadcast",
        |r| Ok(vec![("a", uniform(r, 3, 4, -2.0, 2.0)?), ("row", uniform(r, 1, 4, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.add_row_broadcast(v[0], v[1])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "add_col_broadcast",
        |r| Ok(vec![("a", uniform(r, 3, 4, -2.0, 2.0)?), ("col", uniform(r, 3, 1, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.add_col_broadcast(v[0], v[1])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "layer_norm",
        |r| {
            Ok(vec![
                ("x", uniform(r, 3, 6, -2.0, 2.0)?),
                ("gamma", uniform(r, 1, 6, 0.5, 1.5)?),
                ("beta", uniform(r, 1, 6, -1.0, 1.0)?),
            ])
        },
        |t, v| {
            let x = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "softmax_rows",
        |r| Ok(vec![("a", uniform(r, 3, 5, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.softmax_rows(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "causal_softmax_rows",
        |r| Ok(vec![("a", uniform(r, 4, 4, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.causal_softmax_rows(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "softmax_cross_entropy",
        |r| Ok(vec![("logits", uniform(r, 5, 6, -2.0, 2.0)?)]),
        |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 5, 1, 3], None),
    )?;
    run_case(
        &mut out,
        seeds,
        "softmax_cross_entropy_weighted",
        |r| Ok(vec![("logits", uniform(r, 5, 6, -2.0, 2.0)?)]),
        |t, v| t.softmax_cross_entropy(v[0], &[4, 2, 0, 1, 3], Some(&[1.0, 0.0, 2.0, 0.5, 0.0])),
    )?;
    run_case(
        &mut out,
        seeds,
        "select_rows",
        |r| Ok(vec![("a", uniform(r, 5, 3, -2.0, 2.0)?)]),
        |t, v| {
            // repeated index exercises gradient accumulation
            let x = t.select_rows(v[0], &[0, 2, 2, 4])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "replace_rows",
        |r| Ok(vec![("base", uniform(r, 5, 3, -2.0, 2.0)?), ("rows", uniform(r, 2, 3, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.replace_rows(v[0], v[1], &[1, 3])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "slice_cols",
        |r| Ok(vec![("a", uniform(r, 3, 6, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.slice_cols(v[0], 1, 3)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "concat_cols",
        |r| {
            Ok(vec![
                ("a", uniform(r, 3, 2, -2.0, 2.0)?),
                ("b", uniform(r, 3, 1, -2.0, 2.0)?),
                ("c", uniform(r, 3, 3, -2.0, 2.0)?),
            ])
        },
        |t, v| {
            let x = t.concat_cols(&[v[0], v[1], v[2]])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "concat_rows",
        |r| {
            Ok(vec![
                ("a", uniform(r, 2, 4, -2.0, 2.0)?),
                ("b", uniform(r, 1, 4, -2.0, 2.0)?),
                ("c", uniform(r, 3, 4, -2.0, 2.0)?),
            ])
        },
        |t, v| {
            let x = t.concat_rows(&[v[0], v[1], v[2]])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "row_sum",
        |r| Ok(vec![("a", uniform(r, 3, 4, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.row_sum(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "mean_axis0",
        |r| Ok(vec![("a", uniform(r, 4, 3, -2.0, 2.0)?)]),
        |t, v| {
            let x = t.mean_axis0(v[0])?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "sum",
        |r| Ok(vec![("a", uniform(r, 3, 4, -2.0, 2.0)?)]),
        |t, v| t.sum(v[0]),
    )?;
    run_case(
        &mut out,
        seeds,
        "mean",
        |r| Ok(vec![("a", uniform(r, 3, 4, -2.0, 2.0)?)]),
        |t, v| t.mean(v[0]),
    )?;
    run_case(
        &mut out,
        seeds,
        "masked_row_max",
        |r| Ok(vec![("a", spread(r, 4, 4)?)]),
        |t, v| {
            let mask = checkerboard_mask(4, 4);
            let x = t.masked_row_max(v[0], &mask)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "masked_row_min",
        |r| Ok(vec![("a", spread(r, 4, 4)?)]),
        |t, v| {
            let mask = checkerboard_mask(4, 4);
            let x = t.masked_row_min(v[0], &mask)?;
            project(t, x)
        },
    )?;

    run_case(
        &mut out,
        seeds,
        "loss_lm_nll",
        |r| Ok(vec![("logits", uniform(r, 6, 7, -2.0, 2.0)?)]),
        |t, v| {
            let seq = TokenSequence {
                ids: vec![1, 4, 0, 6, 2, 5],
                loss_mask: vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
                image_slots: vec![],
            };
            lm_nll(t, v[0], &seq)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "loss_id",
        |r| Ok(vec![("logits", uniform(r, 6, 5, -2.0, 2.0)?)]),
        |t, v| id_loss(t, v[0], &[0, 3, 1, 4, 2, 0]),
    )?;
    run_case(
        &mut out,
        seeds,
        "pairwise_euclidean",
        |r| Ok(vec![("e", uniform(r, 4, 3, -1.0, 1.0)?)]),
        |t, v| {
            let x = pairwise_distances(t, v[0], Distance::Euclidean)?;
            project(t, x)
        },
    )?;
    run_case(
        &mut out,
        seeds,
        "pairwise_cosine",
        |r| Ok(vec![("e", signed_away(r, 4, 3, 0.3, 1.0)?)]),
        |t, v| {
            let x = pairwise_distances(t, v[0], Distance::Cosine)?;
            project(t, x)
        },
    )?;
    for (name, cfg) in [
        (
            "loss_triplet_mean",
            TripletConfig {
                margin: 0.3,
                distance: Distance::Euclidean,
                reduction: Reduction::Mean,
            },
        ),
        (
            "loss_triplet_sum",
            TripletConfig {
                margin: 0.3,
                distance: Distance::Euclidean,
                reduction: Reduction::Sum,
            },
        ),
        (
            "loss_triplet_cosine",
            TripletConfig {
                margin: 0.3,
                distance: Distance::Cosine,
                reduction: Reduction::Mean,
            },
        ),
    ] {
        run_case(
            &mut out,
            seeds,
            name,
            |r| Ok(vec![("e", signed_away(r, 4, 4, 0.2, 1.0)?)]),
            move |t, v| triplet_loss(t, v[0], &[0, 0, 1, 1], &cfg),
        )?;
    }
    for (name, lambda) in [
        ("loss_overall_lambda_0", 0.0),
        ("loss_overall_lambda_03", 0.3),
        ("loss_overall_lambda_1", 1.0),
    ] {
        run_case(
            &mut out,
            seeds,
            name,
            |r| {
                Ok(vec![
                    ("lm", uniform(r, 1, 1, 0.2, 2.0)?),
                    ("id", uniform(r, 1, 1, 0.2, 2.0)?),
                    ("tri", uniform(r, 1, 1, 0.2, 2.0)?),
                ])
            },
            move |t, v| overall_loss(t, v[0], v[1], v[2], lambda),
        )?;
    }

    Ok(out)
}

fn checkerboard_mask(r: usize, c: usize) -> Vec<bool> {
    // every row keeps at least one selected element
    (0..r * c)
        .map(|k| (k / c + k % c) % 2 == 0 || k % c == 1)
        .collect()
}

fn run_self_check(
    out: &mut Vec<SelfTestCase>,
    name: &str,
    check: impl FnOnce() -> Result<(bool, String)>,
) {
    let (passed, detail) = match check() {
        Ok(pair) => pair,
        Err(e) => (false, format!("errored: {e}")),
    };
    out.push(SelfTestCase {
        name: name.to_string(),
        passed,
        detail,
    });
}

/// Fast end-to-end invariant suite: closed-form loss values, oracle
/// agreement, data contracts, and rebuild determinism.
pub fn selftest_suite() -> Vec<SelfTestCase> {
    let mut out = Vec::new();

    run_self_check(&mut out, "id-loss-uniform-logits", || {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![4, 7]))?;
        let loss = id_loss(&mut tape, logits, &[0, 3, 6, 2])?;
        let got = tape.scalar_value(loss);
        let want = (7.0f64).ln();
        Ok(((got - want).abs() <= 1e-9, format!("got {got}, want ln 7 = {want}")))
    });

    run_self_check(&mut out, "lm-nll-uniform-logits", || {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![3, 11]))?;
        let seq = TokenSequence {
            ids: vec![1, 4, 9],
            loss_mask: vec![0.0, 0.0, 1.0],
            image_slots: vec![],
        };
        let loss = lm_nll(&mut tape, logits, &seq)?;
        let got = tape.scalar_value(loss);
        let want = (11.0f64).ln();
        Ok(((got - want).abs() <= 1e-9, format!("got {got}, want ln 11 = {want}")))
    });

    run_self_check(&mut out, "triplet-identical-embeddings", || {
        let mut tape = Tape::new();
        let e = tape.leaf(&Tensor::from_vec(vec![4, 3], vec![0.5; 12])?)?;
        let cfg = TripletConfig {
            margin: 0.3,
            distance: Distance::Euclidean,
            reduction: Reduction::Sum,
        };
        let loss = triplet_loss(&mut tape, e, &[0, 0, 1, 1], &cfg)?;
        let got = tape.scalar_value(loss);
        let want = 4.0 * 0.3;
        Ok((got == want, format!("got {got}, want P*K*margin = {want} exactly")))
    });

    run_self_check(&mut out, "overall-lambda-identities", || {
        let (l, i, tr) = (1.3, 0.7, 0.4);
        let mut vals = Vec::new();
        for lambda in [0.0, 0.3, 1.0] {
            let mut tape = Tape::new();
            let lm = tape.leaf(&Tensor::from_vec(vec![1, 1], vec![l])?)?;
            let id = tape.leaf(&Tensor::from_vec(vec![1, 1], vec![i])?)?;
            let tri = tape.leaf(&Tensor::from_vec(vec![1, 1], vec![tr])?)?;
            let o = overall_loss(&mut tape, lm, id, tri, lambda)?;
            vals.push(tape.scalar_value(o));
        }
        let ok = vals[0] == i + tr
            && vals[2] == l
            && (vals[1] - (0.3 * l + 0.7 * (i + tr))).abs() <= 1e-12;
        Ok((ok, format!("lambda 0/0.3/1 gave {vals:?}")))
    });

    run_self_check(&mut out, "triplet-matches-enumeration", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7472_6970);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
            let rows: Vec<Vec<f64>> = (0..16)
                .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let mut tape = Tape::new();
            let e = tape.leaf(&Tensor::from_vec(vec![16, 8], flat)?)?;
            let cfg = TripletConfig::default();
            let loss = triplet_loss(&mut tape, e, &labels, &cfg)?;
            let got = tape.scalar_value(loss);
            let want = enumerated_triplet(&rows, &labels, cfg.margin);
            worst = worst.max((got - want).abs());
        }
        Ok((worst <= 1e-10, format!("max |tape - enumeration| = {worst:.3e}")))
    });

    run_self_check(&mut out, "retrieval-matches-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6576_616c);
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let (q, g) = random_retrieval_instance(&mut rng, 30, 120, 10, 4, 8);
            let fast = evaluate(&q, &g, Distance::Euclidean, "selftest", "-")?;
            let slow = brute_force_oracle(&q, &g, Distance::Euclidean, "selftest", "-")?;
            worst = worst.max((fast.map - slow.map).abs());
            worst = worst.max((fast.rank1 - slow.rank1).abs());
            for (a, b) in fast.cmc.iter().zip(&slow.cmc) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst <= 1e-9, format!("max |fast - oracle| = {worst:.3e}")))
    });

    run_self_check(&mut out, "perfect-embeddings-score-one", || {
        let onehot = |id: usize| {
            let mut v = vec![0.0; 5];
            v[id] = 1.0;
            v
        };
        let q = EmbeddingMatrix::new((0..5).map(onehot).collect(), (0..5).collect(), vec![0; 5])?;
        let g = EmbeddingMatrix::new(
            (0..5).chain(0..5).map(onehot).collect(),
            (0..5).chain(0..5).collect(),
            vec![1; 10],
        )?;
        let r = evaluate(&q, &g, Distance::Euclidean, "selftest", "-")?;
        Ok((r.map == 1.0 && r.rank1 == 1.0, format!("mAP {} R1 {}", r.map, r.rank1)))
    });

    run_self_check(&mut out, "ap-ranks-one-and-three", || {
        let q = EmbeddingMatrix::new(vec![vec![0.0]], vec![1], vec![0])?;
        let g = EmbeddingMatrix::new(
            vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4]],
            vec![1, 9, 1, 8],
            vec![1, 1, 1, 1],
        )?;
        let r = evaluate(&q, &g, Distance::Euclidean, "selftest", "-")?;
        let want = 5.0 / 6.0;
        Ok(((r.map - want).abs() <= 1e-12, format!("AP {} want {want}", r.map)))
    });

    run_self_check(&mut out, "reference-stats-market1501", || {
        let want = DatasetStats {
            query_ids: 750,
            gallery_ids: 750,
            train_ids: 751,
            query_images: 3368,
            gallery_images: 19732,
            train_images: 12936,
            cameras: 6,
        };
        let got = reference_benchmark("Market1501")
            .ok_or_else(|| crate::error::Error::Data("Market1501 row missing".into()))?;
        Ok((*got == want, format!("bundled row {got:?}")))
    });

    run_self_check(&mut out, "continuations-under-word-limit", || {
        let mut longest = 0usize;
        for combo in 0..ATTRIBUTE_SPACE {
            let spec = IdentitySpec::from_combo(0, combo)?;
            let caption = gen_caption(&spec);
            let cont = continuation_for(&caption, None)?;
            longest = longest.max(word_count(&cont));
        }
        Ok((
            longest < MAX_CONTINUATION_WORDS,
            format!("longest over all {ATTRIBUTE_SPACE} identities: {longest} words"),
        ))
    });

    run_self_check(&mut out, "captions-parse-back", || {
        for combo in (0..ATTRIBUTE_SPACE).step_by(37) {
            let spec = IdentitySpec::from_combo(0, combo)?;
            let parsed = parse_caption(&gen_caption(&spec))?;
            if (
                parsed.shirt,
                parsed.pants,
                parsed.shoes,
                parsed.hat,
                parsed.bag,
                parsed.build,
            ) != (spec.shirt, spec.pants, spec.shoes, spec.hat, spec.bag, spec.build)
            {
                return Ok((false, format!("combo {combo} did not round trip")));
            }
        }
        Ok((true, "sampled combos round trip".to_string()))
    });

    run_self_check(&mut out, "dataset-rebuild-byte-identical", || {
        let cfg = DataConfig {
            train_ids: 4,
            eval_ids: 2,
            imgs_per_id: 2,
            cams: 2,
            ..DataConfig::default()
        };
        let base = scratch_dir("rebuild")?;
        let (d1, d2) = (base.join("one"), base.join("two"));
        let res = (|| -> Result<(bool, String)> {
            build_dataset(&cfg, &d1, None)?;
            build_dataset(&cfg, &d2, None)?;
            let m1 = std::fs::read(d1.join("manifest.json"))?;
            let m2 = std::fs::read(d2.join("manifest.json"))?;
            if m1 != m2 {
                return Ok((false, "manifests differ".to_string()));
            }
            let rel = "train/0000_c0_00.ppm";
            let p1 = std::fs::read(d1.join(rel))?;
            let p2 = std::fs::read(d2.join(rel))?;
            Ok((p1 == p2, format!("{rel}: {} bytes compared", p1.len())))
        })();
        let _ = std::fs::remove_dir_all(&base);
        res
    });

    run_self_check(&mut out, "euclidean-distance-root-two", || {
        let mut tape = Tape::new();
        let e = tape.leaf(&Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0])?)?;
        let d = pairwise_distances(&mut tape, e, Distance::Euclidean)?;
        let got = tape.value(d)[1];
        let want = 2.0f64.sqrt();
        Ok(((got - want).abs() <= 1e-12, format!("d = {got}, want sqrt 2")))
    });

    out
}

/// Batch-hard loss recovered by enumerating (anchor, positive, negative)
/// triples directly: hardest positive by max over same-label pairs,
/// hardest negative by min over cross-label pairs.
fn enumerated_triplet(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = rows.len();
    let dist = |a: usize, b: usize| -> f64 {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for a in 0..n {
        let mut hardest_pos = 0.0f64;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..n {
            if labels[j] == labels[a] {
                hardest_pos = hardest_pos.max(dist(a, j));
            } else {
                hardest_neg = hardest_neg.min(dist(a, j));
            }
        }
        total += (margin + hardest_pos - hardest_neg).max(0.0);
    }
    total / n as f64
}

fn random_retrieval_instance(
    rng: &mut ChaCha8Rng,
    n_query: usize,
    n_gallery: usize,
    n_ids: usize,
    n_cams: usize,
    dim: usize,
) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let centroids: Vec<Vec<f64>> = (0..n_ids)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut make = |n: usize| {
        let mut embs = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut cams = Vec::with_capacity(n);
        for i in 0..n {
            let id = i % n_ids;
            let e: Vec<f64> = centroids[id]
                .iter()
                .map(|c| c + rng.gen_range(-0.3..0.3))
                .collect();
            embs.push(e);
            ids.push(id);
            cams.push(rng.gen_range(0..n_cams));
        }
        EmbeddingMatrix::new(embs, ids, cams).expect("well-formed instance")
    };
    (make(n_query), make(n_gallery))
}

fn scratch_dir(tag: &str) -> Result<std::path::PathBuf> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "mmreid-selftest-{}-{tag}-{n}",
        std::process::id()
    ));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_at_tolerance() {
        let cases = gradcheck_suite(3).unwrap();
        assert!(cases.len() >= 35, "expected full op coverage, got {}", cases.len());
        for c in &cases {
            assert!(
                c.max_rel_error <= GRAD_TOLERANCE,
                "{}: max rel error {:.3e}",
                c.name,
                c.max_rel_error
            );
            assert!(c.entries > 0);
        }
    }

    #[test]
    fn self_suite_passes_clean() {
        let cases = selftest_suite();
        assert!(cases.len() >= 12);
        for c in &cases {
            assert!(c.passed, "{} failed: {}", c.name, c.detail);
        }
    }

    #[test]
    fn enumerated_triplet_margin_only_when_identical() {
        let rows = vec![vec![0.5, 0.5]; 4];
        let v = enumerated_triplet(&rows, &[0, 0, 1, 1], 0.3);
        assert_eq!(v, 0.3);
    }
}
