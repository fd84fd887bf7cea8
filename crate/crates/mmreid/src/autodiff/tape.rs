//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its output value, a zeroed
//! gradient buffer, and enough context to run its backward rule. Nodes are
//! created strictly after their inputs, so creation order is a topological
//! order and `backward` is a single reverse sweep. A tape is rebuilt for
//! every forward pass and can be consumed by `backward` exactly once.
//!
//! All tape values are 2-D row-major `[rows, cols]`; scalars are `[1, 1]`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Transpose(usize),
    /// `[m,n] + [1,n]`, the second operand added to every row.
    AddRowBroadcast(usize, usize),
    /// `[m,n] + [m,1]`, the second operand added to every column.
    AddColBroadcast(usize, usize),
    Relu(usize),
    Gelu(usize),
    /// `sqrt(max(x, 0))` with subgradient 0 at the clamp.
    Sqrt0(usize),
    ClampMin(usize, f64),
    Recip(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        rstd: Vec<f64>,
        mean: Vec<f64>,
    },
    SoftmaxRows(usize),
    /// Row-wise softmax over columns `j <= i` only; strictly-upper entries are zero.
    CausalSoftmaxRows(usize),
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        weight_sum: f64,
    },
    SelectRows(usize, Vec<usize>),
    ReplaceRows {
        base: usize,
        rows: usize,
        positions: Vec<usize>,
    },
    SliceCols {
        src: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RowSum(usize),
    MeanAxis0(usize),
    Sum(usize),
    Mean(usize),
    MaskedRowMax { src: usize, argsel: Vec<usize> },
    MaskedRowMin { src: usize, argsel: Vec<usize> },
}

struct Node {
    rows: usize,
    cols: usize,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.idx]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.idx][0]
    }

    /// Gradient of the most recent `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.idx]
    }

    /// Named parameter leaves bound to this tape, with their gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .map(|(name, var)| (name.as_str(), self.grads[var.idx].as_slice()))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(())
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if let Some(i) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name(&op),
                index: i,
            });
        }
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.nodes.push(Node { rows, cols, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    // ── inputs ──────────────────────────────────────────────────────────

    /// Constant input; no gradient is reported for it.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    /// Trainable leaf. Rebinding the same name returns the original node, so
    /// a parameter used in several places gets one accumulated gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let (r, c) = t.dims2();
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let v = zip_map(&self.values[a.idx], &self.values[b.idx], |x, y| x + y);
        self.push(r, c, v, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let v = zip_map(&self.values[a.idx], &self.values[b.idx], |x, y| x - y);
        self.push(r, c, v, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let v = zip_map(&self.values[a.idx], &self.values[b.idx], |x, y| x * y);
        self.push(r, c, v, Op::Mul(a.idx, b.idx))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx].iter().map(|x| x * s).collect();
        self.push(r, c, v, Op::Scale(a.idx, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx].iter().map(|x| x + s).collect();
        self.push(r, c, v, Op::AddScalar(a.idx))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx].iter().map(|x| x.max(0.0)).collect();
        self.push(r, c, v, Op::Relu(a.idx))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx].iter().map(|&x| gelu(x)).collect();
        self.push(r, c, v, Op::Gelu(a.idx))
    }

    pub fn sqrt0(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx]
            .iter()
            .map(|x| x.max(0.0).sqrt())
            .collect();
        self.push(r, c, v, Op::Sqrt0(a.idx))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx].iter().map(|x| x.max(min)).collect();
        self.push(r, c, v, Op::ClampMin(a.idx, min))
    }

    /// Elementwise `1/x`. A zero input surfaces as the non-finite check.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let v = self.values[a.idx].iter().map(|x| 1.0 / x).collect();
        self.push(r, c, v, Op::Recip(a.idx))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, &self.values[a.idx], &self.values[b.idx], m, k, n);
        self.push(m, n, out, Op::Matmul(a.idx, b.idx))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let src = &self.values[a.idx];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a.idx))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: vec![m, n],
                rhs: vec![rr, rc],
            });
        }
        let rv = &self.values[row.idx];
        let v = self.values[a.idx]
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push(m, n, v, Op::AddRowBroadcast(a.idx, row.idx))
    }

    pub fn add_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check(a)?;
        self.check(col)?;
        let (m, n) = self.shape(a);
        let (cr, cc) = self.shape(col);
        if cr != m || cc != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                lhs: vec![m, n],
                rhs: vec![cr, cc],
            });
        }
        let cv = &self.values[col.idx];
        let mut v = Vec::with_capacity(m * n);
        for (i, chunk) in self.values[a.idx].chunks(n).enumerate() {
            v.extend(chunk.iter().map(|x| x + cv[i]));
        }
        self.push(m, n, v, Op::AddColBroadcast(a.idx, col.idx))
    }

    // ── normalization / softmax ─────────────────────────────────────────

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= 0.0 {
            return Err(Error::BadShape {
                op: "layer_norm",
                expected: "eps > 0".into(),
                got: vec![],
            });
        }
        let (m, n) = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let (r, c) = self.shape(v);
            if r != 1 || c != n {
                return Err(Error::BadShape {
                    op: "layer_norm",
                    expected: format!("{name} of shape [1, {n}]"),
                    got: vec![r, c],
                });
            }
        }
        let g = self.values[gamma.idx].clone();
        let b = self.values[beta.idx].clone();
        let mut out = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = &self.values[x.idx][i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        self.push(
            m,
            n,
            out,
            Op::LayerNormRows {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                rstd: rstds,
                mean: means,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values[a.idx][i * n..(i + 1) * n];
            softmax_into(&mut out[i * n..(i + 1) * n], row);
        }
        self.push(m, n, out, Op::SoftmaxRows(a.idx))
    }

    /// Softmax restricted to `j <= i` per row; needs a square input.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        if m != n {
            return Err(Error::BadShape {
                op: "causal_softmax_rows",
                expected: "square attention scores".into(),
                got: vec![m, n],
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values[a.idx][i * n..i * n + i + 1];
            softmax_into(&mut out[i * n..i * n + i + 1], row);
        }
        self.push(m, n, out, Op::CausalSoftmaxRows(a.idx))
    }

    /// Mean over (optionally weighted) rows of `-log softmax(logits)[target]`,
    /// stabilized by row-max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        self.check(logits)?;
        let (m, c) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::BadShape {
                op: "softmax_cross_entropy",
                expected: format!("{m} targets"),
                got: vec![targets.len()],
            });
        }
        if let Some(w) = weights {
            if w.len() != m {
                return Err(Error::BadShape {
                    op: "softmax_cross_entropy",
                    expected: format!("{m} row weights"),
                    got: vec![w.len()],
                });
            }
        }
        for &t in targets {
            if t >= c {
                return Err(Error::TargetOutOfRange {
                    target: t,
                    classes: c,
                });
            }
        }
        let weight_sum = match weights {
            Some(w) => w.iter().sum::<f64>(),
            None => m as f64,
        };
        if weight_sum <= 0.0 {
            return Err(Error::EmptyLossMask);
        }
        let mut total = 0.0;
        for i in 0..m {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let row = &self.values[logits.idx][i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += w * (lse - row[targets[i]]);
        }
        let value = total / weight_sum;
        self.push(
            1,
            1,
            vec![value],
            Op::SoftmaxXent {
                logits: logits.idx,
                targets: targets.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                weight_sum,
            },
        )
    }

    // ── gather / scatter / reshape ──────────────────────────────────────

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: i,
                    size: m,
                });
            }
            out.extend_from_slice(&self.values[a.idx][i * n..(i + 1) * n]);
        }
        self.push(indices.len(), n, out, Op::SelectRows(a.idx, indices.to_vec()))
    }

    /// Copy of `base` with row `positions[k]` replaced by row `k` of `rows`.
    pub fn replace_rows(&mut self, base: Var, rows: Var, positions: &[usize]) -> Result<Var> {
        self.check(base)?;
        self.check(rows)?;
        let (m, n) = self.shape(base);
        let (pr, pc) = self.shape(rows);
        if pc != n || pr != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "replace_rows",
                lhs: vec![positions.len(), n],
                rhs: vec![pr, pc],
            });
        }
        let mut out = self.values[base.idx].clone();
        for (k, &p) in positions.iter().enumerate() {
            if p >= m {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: p,
                    size: m,
                });
            }
            out[p * n..(p + 1) * n].copy_from_slice(&self.values[rows.idx][k * n..(k + 1) * n]);
        }
        self.push(
            m,
            n,
            out,
            Op::ReplaceRows {
                base: base.idx,
                rows: rows.idx,
                positions: positions.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "column slice end",
                index: start + len,
                size: n,
            });
        }
        let src = &self.values[a.idx];
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(m, len, out, Op::SliceCols { src: a.idx, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols input"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r],
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, c) = self.shape(p);
                out.extend_from_slice(&self.values[p.idx][i * c..(i + 1) * c]);
            }
        }
        self.push(m, total, out, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows input"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: vec![c],
                });
            }
            rows += r;
            out.extend_from_slice(&self.values[p.idx]);
        }
        self.push(rows, n, out, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        let v = self.values[a.idx]
            .chunks(n)
            .map(|row| row.iter().sum())
            .collect();
        self.push(m, 1, v, Op::RowSum(a.idx))
    }

    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        if m == 0 {
            return Err(Error::Empty("mean_axis0 input"));
        }
        let mut v = vec![0.0; n];
        for row in self.values[a.idx].chunks(n) {
            for (acc, x) in v.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for acc in &mut v {
            *acc /= m as f64;
        }
        self.push(1, n, v, Op::MeanAxis0(a.idx))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.values[a.idx].iter().sum();
        self.push(1, 1, vec![v], Op::Sum(a.idx))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let len = self.values[a.idx].len();
        if len == 0 {
            return Err(Error::Empty("mean input"));
        }
        let v = self.values[a.idx].iter().sum::<f64>() / len as f64;
        self.push(1, 1, vec![v], Op::Mean(a.idx))
    }

    /// Per-row max over entries where `mask` is true. Ties select the lowest
    /// column index, so the backward route is deterministic.
    pub fn masked_row_max(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.masked_row_extremum(a, mask, true)
    }

    pub fn masked_row_min(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.masked_row_extremum(a, mask, false)
    }

    fn masked_row_extremum(&mut self, a: Var, mask: &[bool], is_max: bool) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.shape(a);
        if mask.len() != m * n {
            return Err(Error::BadShape {
                op: "masked_row_extremum",
                expected: format!("mask of {} entries", m * n),
                got: vec![mask.len()],
            });
        }
        let mut out = vec![0.0; m];
        let mut argsel = vec![0usize; m];
        for i in 0..m {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if !mask[i * n + j] {
                    continue;
                }
                let v = self.values[a.idx][i * n + j];
                let better = match best {
                    None => true,
                    Some((_, bv)) => {
                        if is_max {
                            v > bv
                        } else {
                            v < bv
                        }
                    }
                };
                if better {
                    best = Some((j, v));
                }
            }
            let (j, v) = best.ok_or(Error::Empty("masked row selection"))?;
            out[i] = v;
            argsel[i] = i * n + j;
        }
        let op = if is_max {
            Op::MaskedRowMax { src: a.idx, argsel }
        } else {
            Op::MaskedRowMin { src: a.idx, argsel }
        };
        self.push(m, 1, out, op)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients stay
    /// readable through [`Tape::grad`] and [`Tape::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        self.consumed = true;
        self.grads[loss.idx][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (earlier, current) = self.grads.split_at_mut(i);
            let g = current[0].as_slice();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            let vals = &self.values;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut earlier[*a], g, 1.0);
                    axpy(&mut earlier[*b], g, 1.0);
                }
                Op::Sub(a, b) => {
                    axpy(&mut earlier[*a], g, 1.0);
                    axpy(&mut earlier[*b], g, -1.0);
                }
                Op::Mul(a, b) => {
                    // a and b may alias when squaring
                    if a == b {
                        let da = &mut earlier[*a];
                        for k in 0..g.len() {
                            da[k] += 2.0 * g[k] * vals[*a][k];
                        }
                    } else {
                        let (va, vb) = (&vals[*a], &vals[*b]);
                        for k in 0..g.len() {
                            earlier[*a][k] += g[k] * vb[k];
                        }
                        for k in 0..g.len() {
                            earlier[*b][k] += g[k] * va[k];
                        }
                    }
                }
                Op::Scale(a, s) => axpy(&mut earlier[*a], g, *s),
                Op::AddScalar(a) => axpy(&mut earlier[*a], g, 1.0),
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = self.nodes[*b].cols;
                    matmul_bwd_a(&mut earlier[*a], g, &vals[*b], m, k, n);
                    matmul_bwd_b(&mut earlier[*b], g, &vals[*a], m, k, n);
                }
                Op::Transpose(a) => {
                    let (ar, ac) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let da = &mut earlier[*a];
                    for p in 0..ar {
                        for q in 0..ac {
                            da[p * ac + q] += g[q * ar + p];
                        }
                    }
                }
                Op::AddRowBroadcast(a, row) => {
                    axpy(&mut earlier[*a], g, 1.0);
                    let n = self.nodes[*row].cols;
                    let drow = &mut earlier[*row];
                    for chunk in g.chunks(n) {
                        for (d, x) in drow.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
                Op::AddColBroadcast(a, col) => {
                    axpy(&mut earlier[*a], g, 1.0);
                    let n = node.cols;
                    let dcol = &mut earlier[*col];
                    for (i, chunk) in g.chunks(n).enumerate() {
                        dcol[i] += chunk.iter().sum::<f64>();
                    }
                }
                Op::Relu(a) => {
                    let da = &mut earlier[*a];
                    for k in 0..g.len() {
                        if vals[*a][k] > 0.0 {
                            da[k] += g[k];
                        }
                    }
                }
                Op::Gelu(a) => {
                    let da = &mut earlier[*a];
                    for k in 0..g.len() {
                        da[k] += g[k] * gelu_deriv(vals[*a][k]);
                    }
                }
                Op::Sqrt0(a) => {
                    let da = &mut earlier[*a];
                    for k in 0..g.len() {
                        let x = vals[*a][k];
                        if x > 0.0 {
                            da[k] += g[k] * 0.5 / vals[i][k];
                        }
                    }
                }
                Op::ClampMin(a, min) => {
                    let da = &mut earlier[*a];
                    for k in 0..g.len() {
                        if vals[*a][k] > *min {
                            da[k] += g[k];
                        }
                    }
                }
                Op::Recip(a) => {
                    let da = &mut earlier[*a];
                    for k in 0..g.len() {
                        let y = vals[i][k];
                        da[k] -= g[k] * y * y;
                    }
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    rstd,
                    mean,
                } => {
                    let n = node.cols;
                    let gam = &vals[*gamma];
                    for (i_row, grow) in g.chunks(n).enumerate() {
                        let xrow = &vals[*x][i_row * n..(i_row + 1) * n];
                        let (mu, rs) = (mean[i_row], rstd[i_row]);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * rs;
                            let dxhat = grow[j] * gam[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            earlier[*gamma][j] += grow[j] * xhat;
                            earlier[*beta][j] += grow[j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * rs;
                            let dxhat = grow[j] * gam[j];
                            earlier[*x][i_row * n + j] +=
                                rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = node.cols;
                    for (i_row, grow) in g.chunks(n).enumerate() {
                        let y = &vals[i][i_row * n..(i_row + 1) * n];
                        let dot: f64 = grow.iter().zip(y).map(|(gk, yk)| gk * yk).sum();
                        let da = &mut earlier[*a][i_row * n..(i_row + 1) * n];
                        for j in 0..n {
                            da[j] += y[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::CausalSoftmaxRows(a) => {
                    let n = node.cols;
                    for i_row in 0..node.rows {
                        let lim = i_row + 1;
                        let y = &vals[i][i_row * n..i_row * n + lim];
                        let grow = &g[i_row * n..i_row * n + lim];
                        let dot: f64 = grow.iter().zip(y).map(|(gk, yk)| gk * yk).sum();
                        let da = &mut earlier[*a][i_row * n..i_row * n + lim];
                        for j in 0..lim {
                            da[j] += y[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    weight_sum,
                } => {
                    let gs = g[0];
                    let c = self.nodes[*logits].cols;
                    for (i_row, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i_row]);
                        if w == 0.0 {
                            continue;
                        }
                        let row = &vals[*logits][i_row * c..(i_row + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let dl = &mut earlier[*logits][i_row * c..(i_row + 1) * c];
                        let coeff = gs * w / weight_sum;
                        for j in 0..c {
                            let p = (row[j] - max).exp() / denom;
                            dl[j] += coeff * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                Op::SelectRows(a, indices) => {
                    let n = node.cols;
                    let da = &mut earlier[*a];
                    for (k, &src_row) in indices.iter().enumerate() {
                        for j in 0..n {
                            da[src_row * n + j] += g[k * n + j];
                        }
                    }
                }
                Op::ReplaceRows {
                    base,
                    rows,
                    positions,
                } => {
                    let n = node.cols;
                    let replaced: std::collections::HashSet<usize> =
                        positions.iter().copied().collect();
                    for i_row in 0..node.rows {
                        if replaced.contains(&i_row) {
                            continue;
                        }
                        for j in 0..n {
                            earlier[*base][i_row * n + j] += g[i_row * n + j];
                        }
                    }
                    for (k, &p) in positions.iter().enumerate() {
                        for j in 0..n {
                            earlier[*rows][k * n + j] += g[p * n + j];
                        }
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let n = self.nodes[*src].cols;
                    let da = &mut earlier[*src];
                    for i_row in 0..node.rows {
                        for j in 0..*len {
                            da[i_row * n + start + j] += g[i_row * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    let total = node.cols;
                    for &p in parts {
                        let c = self.nodes[p].cols;
                        for i_row in 0..node.rows {
                            for j in 0..c {
                                earlier[p][i_row * c + j] += g[i_row * total + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].rows * self.nodes[p].cols;
                        axpy(&mut earlier[p], &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                Op::RowSum(a) => {
                    let n = self.nodes[*a].cols;
                    let da = &mut earlier[*a];
                    for (i_row, gi) in g.iter().enumerate() {
                        for j in 0..n {
                            da[i_row * n + j] += gi;
                        }
                    }
                }
                Op::MeanAxis0(a) => {
                    let m = self.nodes[*a].rows;
                    let n = node.cols;
                    let inv = 1.0 / m as f64;
                    let da = &mut earlier[*a];
                    for i_row in 0..m {
                        for j in 0..n {
                            da[i_row * n + j] += g[j] * inv;
                        }
                    }
                }
                Op::Sum(a) => axpy_scalar(&mut earlier[*a], g[0]),
                Op::Mean(a) => {
                    let len = earlier[*a].len();
                    axpy_scalar(&mut earlier[*a], g[0] / len as f64);
                }
                Op::MaskedRowMax { src, argsel } | Op::MaskedRowMin { src, argsel } => {
                    let da = &mut earlier[*src];
                    for (i_row, &flat) in argsel.iter().enumerate() {
                        da[flat] += g[i_row];
                    }
                }
            }
        }
        Ok(())
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn axpy_scalar(dst: &mut [f64], s: f64) {
    for d in dst.iter_mut() {
        *d += s;
    }
}

/// out[m,n] += a[m,k] @ b[k,n], i-k-j order so the inner loop streams rows.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// da[m,k] += g[m,n] @ b[k,n]^T — row-dot-row, both contiguous.
fn matmul_bwd_a(da: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            da[i * k + kk] += dot;
        }
    }
}

/// db[k,n] += a[m,k]^T @ g[m,n].
fn matmul_bwd_b(db: &mut [f64], g: &[f64], a: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

fn softmax_into(out: &mut [f64], row: &[f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::AddRowBroadcast(..) => "add_row_broadcast",
        Op::AddColBroadcast(..) => "add_col_broadcast",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Sqrt0(..) => "sqrt0",
        Op::ClampMin(..) => "clamp_min",
        Op::Recip(..) => "recip",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::CausalSoftmaxRows(..) => "causal_softmax_rows",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        Op::SelectRows(..) => "select_rows",
        Op::ReplaceRows { .. } => "replace_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::RowSum(..) => "row_sum",
        Op::MeanAxis0(..) => "mean_axis0",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MaskedRowMax { .. } => "masked_row_max",
        Op::MaskedRowMin { .. } => "masked_row_min",
    }
}
