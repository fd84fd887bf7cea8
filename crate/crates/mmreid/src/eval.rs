//! Retrieval evaluation: Rank-1, mAP, and the CMC curve under the standard
//! cross-camera protocol, plus an independent brute-force oracle and the
//! source → target cross-dataset harness.
//!
//! Protocol, per query: gallery items sharing both the query's identity and
//! its camera are excluded; the rest are ranked by ascending distance with
//! ties broken by gallery index; AP is the mean of precision at each
//! relevant rank. Queries left without any same-identity gallery item are
//! skipped and surface only through `num_valid_queries`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Distance;
use crate::models::checkpoint::Checkpoint;
use crate::models::encoder::{reid_embed, VisualEncoderConfig};
use crate::synthdata::dataset::{Dataset, ImageRecord};

/// Embeddings with aligned identity and camera labels.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub embeddings: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn new(embeddings: Vec<Vec<f64>>, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        if embeddings.len() != ids.len() || embeddings.len() != cams.len() {
            return Err(Error::Data(format!(
                "embedding rows {} vs ids {} vs cams {}",
                embeddings.len(),
                ids.len(),
                cams.len()
            )));
        }
        if embeddings.is_empty() {
            return Err(Error::Empty("embedding matrix"));
        }
        let dim = embeddings[0].len();
        for (i, row) in embeddings.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Data(format!(
                    "embedding row {i} has dim {}, expected {dim}",
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "embedding matrix",
                    index: i * dim + j,
                });
            }
        }
        Ok(EmbeddingMatrix {
            embeddings,
            ids,
            cams,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub map: f64,
    /// cmc[k] = fraction of valid queries with a correct match in the top k+1.
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
    pub protocol: String,
    pub checkpoint_id: String,
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
}

pub fn distance_matrix(
    query: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    metric: Distance,
) -> Result<Vec<Vec<f64>>> {
    if query.dim() != gallery.dim() {
        return Err(Error::Data(format!(
            "query dim {} vs gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let out = query
        .embeddings
        .iter()
        .map(|q| {
            gallery
                .embeddings
                .iter()
                .map(|g| match metric {
                    Distance::Euclidean => q
                        .iter()
                        .zip(g)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt(),
                    Distance::Cosine => {
                        let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
                        let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let ng: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
                        1.0 - dot / (nq * ng).max(1e-12)
                    }
                })
                .collect()
        })
        .collect();
    Ok(out)
}

pub fn evaluate(
    query: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    metric: Distance,
    protocol: &str,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    let dist = distance_matrix(query, gallery, metric)?;
    let g = gallery.len();

    let mut per_query_ap = Vec::new();
    let mut first_hit = Vec::new();
    for (qi, drow) in dist.iter().enumerate() {
        let qid = query.ids[qi];
        let qcam = query.cams[qi];
        let mut cand: Vec<usize> = (0..g)
            .filter(|&j| !(gallery.ids[j] == qid && gallery.cams[j] == qcam))
            .collect();
        let relevant = cand.iter().filter(|&&j| gallery.ids[j] == qid).count();
        if relevant == 0 {
            continue;
        }
        cand.sort_by(|&a, &b| {
            drow[a]
                .partial_cmp(&drow[b])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first = None;
        for (rank0, &j) in cand.iter().enumerate() {
            if gallery.ids[j] == qid {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first.is_none() {
                    first = Some(rank0);
                }
            }
        }
        per_query_ap.push(ap / relevant as f64);
        first_hit.push(first.expect("relevant > 0"));
    }

    let n = per_query_ap.len();
    if n == 0 {
        return Err(Error::Eval(
            "no query has a valid cross-camera gallery match".into(),
        ));
    }
    let mut cmc = vec![0.0; g];
    for &f in &first_hit {
        cmc[f] += 1.0;
    }
    let mut acc = 0.0;
    for c in &mut cmc {
        acc += *c;
        *c = acc / n as f64;
    }
    Ok(EvalReport {
        rank1: cmc[0],
        map: per_query_ap.iter().sum::<f64>() / n as f64,
        cmc,
        num_valid_queries: n,
        protocol: protocol.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
        per_query_ap,
    })
}

/// Deliberately naive recomputation of [`evaluate`]: explicit per-element
/// distances, selection sort, an explicit relevance list, and top-k scans
/// for the CMC curve. Shares no code with the fast path.
pub fn brute_force_oracle(
    query: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    metric: Distance,
    protocol: &str,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if query.dim() != gallery.dim() {
        return Err(Error::Data("oracle: dim mismatch".into()));
    }
    let mut per_query_ap = Vec::new();
    let mut ranked_relevance: Vec<Vec<bool>> = Vec::new();

    for qi in 0..query.len() {
        // pairwise distances, one scalar at a time
        let mut pairs: Vec<(f64, usize)> = Vec::new();
        for gj in 0..gallery.len() {
            if gallery.ids[gj] == query.ids[qi] && gallery.cams[gj] == query.cams[qi] {
                continue;
            }
            let mut d = 0.0;
            match metric {
                Distance::Euclidean => {
                    for k in 0..query.dim() {
                        let diff = query.embeddings[qi][k] - gallery.embeddings[gj][k];
                        d += diff * diff;
                    }
                    d = d.sqrt();
                }
                Distance::Cosine => {
                    let mut dot = 0.0;
                    let mut nq = 0.0;
                    let mut ng = 0.0;
                    for k in 0..query.dim() {
                        dot += query.embeddings[qi][k] * gallery.embeddings[gj][k];
                        nq += query.embeddings[qi][k] * query.embeddings[qi][k];
                        ng += gallery.embeddings[gj][k] * gallery.embeddings[gj][k];
                    }
                    d = 1.0 - dot / (nq.sqrt() * ng.sqrt()).max(1e-12);
                }
            }
            pairs.push((d, gj));
        }

        // selection sort; strict < keeps the earliest index on ties
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(pairs.len());
        let mut used = vec![false; pairs.len()];
        for _ in 0..pairs.len() {
            let mut best: Option<usize> = None;
            for (p, pair) in pairs.iter().enumerate() {
                if used[p] {
                    continue;
                }
                match best {
                    None => best = Some(p),
                    Some(b) => {
                        if pair.0 < pairs[b].0 {
                            best = Some(p);
                        }
                    }
                }
            }
            let b = best.unwrap();
            used[b] = true;
            sorted.push(pairs[b]);
        }

        let relevance: Vec<bool> = sorted
            .iter()
            .map(|&(_, gj)| gallery.ids[gj] == query.ids[qi])
            .collect();
        let total_relevant = relevance.iter().filter(|&&r| r).count();
        if total_relevant == 0 {
            continue;
        }

        let mut precisions = Vec::new();
        for pos in 0..relevance.len() {
            if relevance[pos] {
                let in_top = relevance[..=pos].iter().filter(|&&r| r).count();
                precisions.push(in_top as f64 / (pos + 1) as f64);
            }
        }
        per_query_ap.push(precisions.iter().sum::<f64>() / precisions.len() as f64);
        ranked_relevance.push(relevance);
    }

    if per_query_ap.is_empty() {
        return Err(Error::Eval("oracle: no valid queries".into()));
    }
    let n = per_query_ap.len() as f64;
    let mut cmc = Vec::with_capacity(gallery.len());
    for k in 1..=gallery.len() {
        let mut hits = 0;
        for rel in &ranked_relevance {
            let top = k.min(rel.len());
            if rel[..top].iter().any(|&r| r) {
                hits += 1;
            }
        }
        cmc.push(hits as f64 / n);
    }
    Ok(EvalReport {
        rank1: cmc[0],
        map: per_query_ap.iter().sum::<f64>() / n,
        cmc,
        num_valid_queries: per_query_ap.len(),
        protocol: protocol.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
        per_query_ap,
    })
}

/// Run every listed image through the encoder of a trained checkpoint.
pub fn embed_records(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    records: &[ImageRecord],
) -> Result<EmbeddingMatrix> {
    let cfg: VisualEncoderConfig = ckpt.get_json("encoder_config")?;
    let mut embeddings = Vec::with_capacity(records.len());
    let mut ids = Vec::with_capacity(records.len());
    let mut cams = Vec::with_capacity(records.len());
    for rec in records {
        let pixels = dataset.load_pixels(rec)?;
        let mut tape = crate::autodiff::Tape::new();
        let emb = reid_embed(&mut tape, &pixels, &cfg, &ckpt.params)?;
        embeddings.push(tape.value(emb).to_vec());
        ids.push(rec.label);
        cams.push(rec.cam);
    }
    EmbeddingMatrix::new(embeddings, ids, cams)
}

/// Evaluate one dataset's query/gallery split with a checkpoint's encoder.
pub fn evaluate_dataset(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    metric: Distance,
    protocol: &str,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    let q = embed_records(ckpt, dataset, &dataset.query)?;
    let g = embed_records(ckpt, dataset, &dataset.gallery)?;
    evaluate(&q, &g, metric, protocol, checkpoint_id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossEvalReport {
    pub source: EvalReport,
    pub target: EvalReport,
}

/// Source → target transfer evaluation: the same checkpoint scored on its
/// own eval split and on a shifted dataset.
pub fn cross_dataset_eval(
    ckpt: &Checkpoint,
    source: &Dataset,
    target: &Dataset,
    metric: Distance,
    checkpoint_id: &str,
) -> Result<CrossEvalReport> {
    let src_tag = source.config.style.tag();
    let tgt_tag = target.config.style.tag();
    let source_report = evaluate_dataset(
        ckpt,
        source,
        metric,
        &format!("in-domain:{src_tag}"),
        checkpoint_id,
    )?;
    let target_report = evaluate_dataset(
        ckpt,
        target,
        metric,
        &format!("cross-domain:{src_tag}->{tgt_tag}"),
        checkpoint_id,
    )?;
    Ok(CrossEvalReport {
        source: source_report,
        target: target_report,
    })
}

/// Plain-text top-k rank list per query, for eyeballing retrievals.
pub fn rank_list_text(
    query: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    metric: Distance,
    top_k: usize,
) -> Result<String> {
    let dist = distance_matrix(query, gallery, metric)?;
    let mut out = String::new();
    for (qi, drow) in dist.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&j| !(gallery.ids[j] == query.ids[qi] && gallery.cams[j] == query.cams[qi]))
            .collect();
        order.sort_by(|&a, &b| drow[a].partial_cmp(&drow[b]).unwrap().then(a.cmp(&b)));
        out.push_str(&format!(
            "query {qi} (id {} cam {}):",
            query.ids[qi], query.cams[qi]
        ));
        for &j in order.iter().take(top_k) {
            let mark = if gallery.ids[j] == query.ids[qi] { "+" } else { "-" };
            out.push_str(&format!(
                " {mark}g{j}(id {} cam {} d {:.4})",
                gallery.ids[j], gallery.cams[j], drow[j]
            ));
        }
        out.push('\n');
    }
    Ok(out)
}
