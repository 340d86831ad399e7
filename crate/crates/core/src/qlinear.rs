//! Linear layers with FP8 fake quantization, the selective quantization
//! policy, and the weight-only FP8 deployment form.
//!
//! Weights use the `[d_out × d_in]` layout and `y = x · Wᵀ + b`.

use std::sync::Arc;

use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{fake_quant_ste, quantize_scaled, QuantAxis, QuantizedTensor};
use crate::tensor::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};

/// `x · Wᵀ + b` on the tape.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FakeQuantLinear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub enable_act_quant: bool,
    pub enabled: bool,
}

/// Forward result with the quantized operands kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FqOutput {
    pub y: Var,
    /// Per-token fake-quantized input, or the input itself.
    pub xq: Var,
    /// Per-output-row fake-quantized weight, or the weight itself.
    pub wq: Var,
}

/// `y = Xq · Wqᵀ + b`. When `enabled` is false this is exactly [`linear`].
pub fn fq_forward(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    enable_act_quant: bool,
    enabled: bool,
) -> Result<FqOutput> {
    let (xw, ww) = (tape.value(x)?, tape.value(w)?);
    if !xw.is_matrix() || !ww.is_matrix() || xw.cols() != ww.cols() {
        return Err(Error::shape("fq_forward", xw.shape(), ww.shape()));
    }
    if !enabled {
        let y = linear(tape, x, w, b)?;
        return Ok(FqOutput { y, xq: x, wq: w });
    }
    let xq = if enable_act_quant {
        fake_quant_ste(tape, x, QuantAxis::PerToken)?
    } else {
        x
    };
    let wq = fake_quant_ste(tape, w, QuantAxis::PerOutputRow)?;
    let y = linear(tape, xq, wq, b)?;
    Ok(FqOutput { y, xq, wq })
}

impl FakeQuantLinear {
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<FqOutput> {
        fq_forward(
            tape,
            x,
            params.var(self.weight),
            self.bias.map(|b| params.var(b)),
            self.enable_act_quant,
            self.enabled,
        )
    }
}

/// Closed-form gradients of `sum(G ⊙ y)` for `y = Xq · Wqᵀ + b` under the
/// straight-through rule: `(G · Wq, Gᵀ · Xq, colsum G)`. Plain loops, used as
/// a reference for the tape.
pub fn fq_backward_closed_form(g: &Tensor, xq: &Tensor, wq: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d_out) = (g.rows(), g.cols());
    let d_in = xq.cols();
    if xq.rows() != n || wq.rows() != d_out || wq.cols() != d_in {
        return Err(Error::shape("fq_backward", g.shape(), wq.shape()));
    }
    let mut gx = vec![0.0f32; n * d_in];
    for i in 0..n {
        for j in 0..d_in {
            let s: f64 = (0..d_out).map(|o| g.get(i, o) as f64 * wq.get(o, j) as f64).sum();
            gx[i * d_in + j] = s as f32;
        }
    }
    let mut gw = vec![0.0f32; d_out * d_in];
    for o in 0..d_out {
        for j in 0..d_in {
            let s: f64 = (0..n).map(|i| g.get(i, o) as f64 * xq.get(i, j) as f64).sum();
            gw[o * d_in + j] = s as f32;
        }
    }
    let gb = (0..d_out)
        .map(|o| (0..n).map(|i| g.get(i, o) as f64).sum::<f64>() as f32)
        .collect();
    Ok((
        Tensor::new(vec![n, d_in], gx)?,
        Tensor::new(vec![d_out, d_in], gw)?,
        Tensor::new(vec![1, d_out], gb)?,
    ))
}

/// FP8 codes + per-row scales for the weight, full-precision bias and
/// activations. The dequantized weight is computed once at construction.
#[derive(Debug, Clone)]
pub struct WeightOnlyLinear {
    weight: QuantizedTensor,
    bias: Option<Tensor>,
    dequantized: Tensor,
}

impl WeightOnlyLinear {
    pub fn new(weight: QuantizedTensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.axis() != QuantAxis::PerOutputRow || weight.shape().len() != 2 {
            return Err(Error::InvalidArgument(
                "weight-only linear needs a per-output-row quantized matrix".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.numel() != weight.shape()[0] {
                return Err(Error::shape("weight_only", weight.shape(), b.shape()));
            }
        }
        let dequantized = weight.dequantize();
        Ok(WeightOnlyLinear {
            weight,
            bias,
            dequantized,
        })
    }

    pub fn weight(&self) -> &QuantizedTensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn dequantized_weight(&self) -> &Tensor {
        &self.dequantized
    }

    pub fn weight_bytes(&self) -> usize {
        self.weight.nbytes()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.value(x)?;
        if xw.cols() != self.dequantized.cols() {
            return Err(Error::shape("weight_only", xw.shape(), self.dequantized.shape()));
        }
        let w = tape.constant(self.dequantized.clone());
        let b = self.bias.as_ref().map(|b| tape.constant(b.clone()));
        linear(tape, x, w, b)
    }

    /// Forward without a caller-managed tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y)?.clone())
    }
}

#[derive(Debug, Clone)]
pub enum LinearMode {
    Full,
    FakeQuant { enable_act_quant: bool },
    WeightOnly(Arc<WeightOnlyLinear>),
}

/// A named linear layer of a model.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub mode: LinearMode,
}

impl Linear {
    pub fn new(name: impl Into<String>, weight: ParamId, bias: Option<ParamId>) -> Self {
        Linear {
            name: name.into(),
            weight,
            bias,
            mode: LinearMode::Full,
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self.mode, LinearMode::Full)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.numel() + self.bias.map_or(0, |b| store.get(b).tensor.numel())
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.cols()
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.rows()
    }

    pub fn as_fake_quant(&self) -> FakeQuantLinear {
        let (enable_act_quant, enabled) = match self.mode {
            LinearMode::FakeQuant { enable_act_quant } => (enable_act_quant, true),
            _ => (false, false),
        };
        FakeQuantLinear {
            weight: self.weight,
            bias: self.bias,
            enable_act_quant,
            enabled,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        match &self.mode {
            LinearMode::WeightOnly(wo) => wo.forward(tape, x),
            _ => Ok(self.as_fake_quant().forward(tape, params, x)?.y),
        }
    }
}

/// Which linears are fake-quantized: name matches an include glob, matches
/// no exclude glob, and holds at least `min_params` parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantPolicy {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub min_params: usize,
}

impl Default for QuantPolicy {
    /// Attention and MLP linears; norms, embedding and head stay full precision.
    fn default() -> Self {
        QuantPolicy {
            include: vec!["blocks.*.attn.*".into(), "blocks.*.mlp.*".into()],
            exclude: vec!["*norm*".into()],
            min_params: 0,
        }
    }
}

impl QuantPolicy {
    pub fn all() -> Self {
        QuantPolicy {
            include: vec!["*".into()],
            exclude: Vec::new(),
            min_params: 0,
        }
    }

    pub fn none() -> Self {
        QuantPolicy {
            include: Vec::new(),
            exclude: Vec::new(),
            min_params: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.include.iter().chain(&self.exclude) {
            Pattern::new(p).map_err(|e| Error::Config(format!("bad glob {p:?}: {e}")))?;
        }
        Ok(())
    }

    fn any_match(patterns: &[String], name: &str) -> bool {
        patterns
            .iter()
            .any(|p| Pattern::new(p).map(|p| p.matches(name)).unwrap_or(false))
    }

    pub fn matches(&self, name: &str, num_params: usize) -> bool {
        Self::any_match(&self.include, name)
            && !Self::any_match(&self.exclude, name)
            && num_params >= self.min_params
    }
}

/// Switch every matching full-precision linear to fake quantization and
/// return how many were converted. Layers already quantized are left alone.
pub fn apply_policy<'a>(
    layers: impl IntoIterator<Item = &'a mut Linear>,
    store: &ParamStore,
    policy: &QuantPolicy,
    enable_act_quant: bool,
) -> usize {
    let mut converted = 0;
    let mut matched = 0;
    for layer in layers {
        if !policy.matches(&layer.name, layer.num_params(store)) {
            continue;
        }
        matched += 1;
        if matches!(layer.mode, LinearMode::Full) {
            layer.mode = LinearMode::FakeQuant { enable_act_quant };
            converted += 1;
        }
    }
    if matched == 0 && !policy.include.is_empty() {
        log::warn!("quantization policy {policy:?} matched no linear layers");
    }
    converted
}

/// Freeze the current weight of `layer` into FP8 codes and scales.
pub fn export_weight_only(layer: &Linear, store: &ParamStore) -> Result<WeightOnlyLinear> {
    if let LinearMode::WeightOnly(wo) = &layer.mode {
        return Ok(wo.as_ref().clone());
    }
    let w = &store.get(layer.weight).tensor;
    let q = quantize_scaled(w, QuantAxis::PerOutputRow)?;
    let bias = layer.bias.map(|b| {
        let t = &store.get(b).tensor;
        Tensor::from_parts(vec![1, t.numel()], t.data().to_vec())
    });
    WeightOnlyLinear::new(q, bias)
}
