//! Sparse Linear Attention and the dense reference attention.
//!
//! The sparse branch keeps the top `k = max(1, ⌈λN⌉)` scores of every query
//! row and runs a masked softmax over them. The linear branch is kernelized
//! attention with feature map `φ(x) = ELU(x) + 1`. The two are combined as
//! `O = O_sparse + O_lin · W_Oᵀ`, with `W_O` the only trainable projection.
//!
//! Projection matrices use the `[d_out × d_in]` layout, so `Q = X · W_Qᵀ`.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlinear::linear;
use crate::tensor::{Mask, ParamId, ParamStore, ParamVars, Tape, Tensor, Var};

/// Denominator guard of the linear branch.
pub const LINEAR_EPS: f32 = 1e-8;

/// Keys kept per query: `max(1, ⌈λ·n⌉)`, capped at `n`.
///
/// The product is nudged down by 1e-6 before the ceiling so that ratios like
/// 0.3 · 10 do not round up to an extra key.
pub fn keep_count(n: usize, keep_ratio: f32) -> usize {
    let raw = (keep_ratio as f64 * n as f64 - 1e-6).ceil();
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Keep exactly `k` entries per row: the largest scores, lower column index
/// first among equal scores.
pub fn top_k_mask(scores: &Tensor, k: usize) -> Result<Mask> {
    let (m, n) = (scores.rows(), scores.cols());
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-k with k={k} over {n} columns")));
    }
    let mut keep = vec![false; m * n];
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for i in 0..m {
        let row = scores.row(i);
        idx.clear();
        idx.extend(0..n);
        if k < n {
            let by_rank = |&a: &usize, &b: &usize| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            };
            idx.select_nth_unstable_by(k - 1, by_rank);
        }
        for &j in &idx[..k] {
            keep[i * n + j] = true;
        }
    }
    Mask::new(m, n, keep)
}

/// `S = Q·Kᵀ / √d`.
pub fn scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d = tape.value(q)?.cols();
    if d == 0 {
        return Err(Error::InvalidArgument("attention with d = 0".into()));
    }
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    tape.scale(s, 1.0 / (d as f32).sqrt())
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<()> {
    let (tq, tk, tv) = (tape.value(q)?, tape.value(k)?, tape.value(v)?);
    if tq.shape() != tk.shape() || tk.rows() != tv.rows() {
        return Err(Error::shape("attention", tq.shape(), tk.shape()));
    }
    Ok(())
}

/// `Softmax(Q·Kᵀ/√d) · V`.
pub fn dense_attention_qkv(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(tape, q, k, v)?;
    let s = scores(tape, q, k)?;
    let a = tape.softmax_rows(s, None)?;
    tape.matmul(a, v)
}

/// Top-k masked softmax attention. The mask is recomputed from the current
/// scores and treated as a constant by the backward pass.
pub fn sparse_branch(tape: &mut Tape, q: Var, k: Var, v: Var, keep_ratio: f32) -> Result<Var> {
    check_qkv(tape, q, k, v)?;
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::InvalidArgument(format!("keep ratio {keep_ratio} outside [0, 1]")));
    }
    let s = scores(tape, q, k)?;
    let n = tape.value(s)?.cols();
    let mask = top_k_mask(tape.value(s)?, keep_count(n, keep_ratio))?;
    let a = tape.softmax_rows(s, Some(&mask))?;
    tape.matmul(a, v)
}

/// `(φ(Q)·T) ⊘ (φ(Q)·z)` with `T = φ(K)ᵀV` and `z = φ(K)ᵀ1`.
pub fn linear_branch(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(tape, q, k, v)?;
    let n = tape.value(k)?.rows();
    let phi_q = tape.elu_plus_one(q)?;
    let phi_k = tape.elu_plus_one(k)?;
    let phi_kt = tape.transpose(phi_k)?;
    let summary = tape.matmul(phi_kt, v)?;
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let z = tape.matmul(phi_kt, ones)?;
    let num = tape.matmul(phi_q, summary)?;
    let den = tape.matmul(phi_q, z)?;
    let den = tape.add_scalar(den, LINEAR_EPS)?;
    tape.div_col(num, den)
}

/// `O_sparse + O_lin · W_Oᵀ` from precomputed projections.
pub fn sla_combine(tape: &mut Tape, q: Var, k: Var, v: Var, w_o: Var, keep_ratio: f32) -> Result<Var> {
    let sparse = sparse_branch(tape, q, k, v, keep_ratio)?;
    let lin = linear_branch(tape, q, k, v)?;
    let proj = linear(tape, lin, w_o, None)?;
    tape.add(sparse, proj)
}

/// Parameter handles of one SLA module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub keep_ratio: f32,
}

/// Tape variables of one SLA module.
#[derive(Debug, Clone, Copy)]
pub struct SlaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl SlaParams {
    /// Registers `{prefix}.w_q/w_k/w_v` frozen with the given values and a
    /// trainable zero `{prefix}.w_o`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        qkv: [Tensor; 3],
        keep_ratio: f32,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_ratio) {
            return Err(Error::InvalidArgument(format!("keep ratio {keep_ratio} outside [0, 1]")));
        }
        let d = qkv[0].rows();
        if qkv.iter().any(|w| w.shape() != [d, d]) {
            return Err(Error::shape("sla", qkv[0].shape(), qkv[1].shape()));
        }
        let [q, k, v] = qkv;
        Ok(SlaParams {
            w_q: store.insert(format!("{prefix}.w_q"), q, false)?,
            w_k: store.insert(format!("{prefix}.w_k"), k, false)?,
            w_v: store.insert(format!("{prefix}.w_v"), v, false)?,
            w_o: store.insert(format!("{prefix}.w_o"), Tensor::zeros(&[d, d]), true)?,
            keep_ratio,
        })
    }

    /// Random frozen projections with std `1/√d`.
    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        keep_ratio: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d as f32).sqrt();
        let qkv = [
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[d, d], std, rng),
        ];
        Self::register(store, prefix, qkv, keep_ratio)
    }

    pub fn bind(&self, params: &ParamVars) -> SlaVars {
        SlaVars {
            w_q: params.var(self.w_q),
            w_k: params.var(self.w_k),
            w_v: params.var(self.w_v),
            w_o: params.var(self.w_o),
        }
    }
}

pub fn project_qkv(tape: &mut Tape, x: Var, w: &SlaVars) -> Result<(Var, Var, Var)> {
    Ok((
        linear(tape, x, w.w_q, None)?,
        linear(tape, x, w.w_k, None)?,
        linear(tape, x, w.w_v, None)?,
    ))
}

/// Dense attention of `x` through the frozen projections (no output projection).
pub fn dense_attention(tape: &mut Tape, x: Var, w: &SlaVars) -> Result<Var> {
    let (q, k, v) = project_qkv(tape, x, w)?;
    dense_attention_qkv(tape, q, k, v)
}

pub fn sla_forward(tape: &mut Tape, x: Var, w: &SlaVars, keep_ratio: f32) -> Result<Var> {
    let (q, k, v) = project_qkv(tape, x, w)?;
    sla_combine(tape, q, k, v, w.w_o, keep_ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Dense,
    Sla,
}

/// Closed-form multiply-add counts (2 per MAC) of one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttentionFlops {
    pub scores: u64,
    pub mix: u64,
    pub softmax: u64,
    pub linear_branch: u64,
    pub out_proj: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.scores + self.mix + self.softmax + self.linear_branch + self.out_proj
    }

    /// Softmax-attention part only: scores, softmax and weighted sum.
    pub fn score_and_mix(&self) -> u64 {
        self.scores + self.mix + self.softmax
    }
}

/// Dense: `2N²d + 2N²d + N²`. SLA with `k` kept keys per query:
/// `2N²d + 2Nkd + Nk + 6Nd² + 2Nd²`. Full scores are computed before masking,
/// so only the softmax and the weighted sum shrink with `k`.
pub fn attention_flops_breakdown(n: u64, d: u64, keep_ratio: f32, variant: AttentionVariant) -> AttentionFlops {
    match variant {
        AttentionVariant::Dense => AttentionFlops {
            scores: 2 * n * n * d,
            mix: 2 * n * n * d,
            softmax: n * n,
            ..Default::default()
        },
        AttentionVariant::Sla => {
            let k = keep_count(n as usize, keep_ratio) as u64;
            AttentionFlops {
                scores: 2 * n * n * d,
                mix: 2 * n * k * d,
                softmax: n * k,
                linear_branch: 6 * n * d * d,
                out_proj: 2 * n * d * d,
            }
        }
    }
}

pub fn attention_flops(n: u64, d: u64, keep_ratio: f32, variant: AttentionVariant) -> u64 {
    attention_flops_breakdown(n, d, keep_ratio, variant).total()
}
