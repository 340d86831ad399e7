//! Toy transformer used as frozen teacher and SLA student.
//!
//! Layout (pre-norm): `embed → L × [x + attn(norm1(x)); x + mlp(norm2(x))] → head`.
//! Parameter names are stable and shared between teacher and student; the
//! student only adds `blocks.{i}.attn.w_o.weight`.

use std::sync::Arc;

use glob::Pattern;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlinear::{apply_policy, Linear, LinearMode, QuantPolicy};
use crate::sla::{dense_attention_qkv, linear_branch, sparse_branch, AttentionVariant};
use crate::tensor::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub seq_len: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 64,
            d_in: 32,
            d_out: 32,
            seq_len: 128,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.d_in == 0 || self.d_out == 0 || self.seq_len == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("all model dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        let y = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let y = tape.mul_row(y, params.var(self.gamma))?;
        tape.add_row(y, params.var(self.beta))
    }
}

#[derive(Debug, Clone)]
pub enum AttentionKind {
    Dense,
    Sla { w_o: Linear, keep_ratio: f32 },
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub name: String,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub kind: AttentionKind,
}

impl Attention {
    pub fn variant(&self) -> AttentionVariant {
        match self.kind {
            AttentionKind::Dense => AttentionVariant::Dense,
            AttentionKind::Sla { .. } => AttentionVariant::Sla,
        }
    }

    pub fn keep_ratio(&self) -> f32 {
        match self.kind {
            AttentionKind::Dense => 1.0,
            AttentionKind::Sla { keep_ratio, .. } => keep_ratio,
        }
    }

    /// Attention over `batch` independent sequences stacked along the rows.
    fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var, batch: usize) -> Result<Var> {
        let q = self.w_q.forward(tape, params, x)?;
        let k = self.w_k.forward(tape, params, x)?;
        let v = self.w_v.forward(tape, params, x)?;
        let seq = tape.value(x)?.rows() / batch;
        let mut sparse = Vec::with_capacity(batch);
        let mut lin = Vec::with_capacity(batch);
        for b in 0..batch {
            let qs = tape.slice_rows(q, b * seq, seq)?;
            let ks = tape.slice_rows(k, b * seq, seq)?;
            let vs = tape.slice_rows(v, b * seq, seq)?;
            match &self.kind {
                AttentionKind::Dense => sparse.push(dense_attention_qkv(tape, qs, ks, vs)?),
                AttentionKind::Sla { keep_ratio, .. } => {
                    sparse.push(sparse_branch(tape, qs, ks, vs, *keep_ratio)?);
                    lin.push(linear_branch(tape, qs, ks, vs)?);
                }
            }
        }
        let sparse = tape.concat_rows(&sparse)?;
        match &self.kind {
            AttentionKind::Dense => Ok(sparse),
            AttentionKind::Sla { w_o, .. } => {
                let lin = tape.concat_rows(&lin)?;
                let proj = w_o.forward(tape, params, lin)?;
                tape.add(sparse, proj)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Output of an attention module captured during one forward pass.
#[derive(Debug, Clone)]
pub struct HookRecord {
    pub module: String,
    pub value: Tensor,
    /// Tape node of the output; `None` once detached.
    pub node: Option<Var>,
}

impl HookRecord {
    pub fn detached(mut self) -> Self {
        self.node = None;
        self
    }
}

pub struct ForwardOutput {
    /// `(B·N) × d_out`.
    pub output: Var,
    pub records: Vec<HookRecord>,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    OutProj,
}

struct Builder<F> {
    store: ParamStore,
    init: F,
}

impl<F> Builder<F>
where
    F: FnMut(&str, &[usize], ParamKind) -> Result<Tensor>,
{
    fn param(&mut self, name: String, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        let t = (self.init)(&name, shape, kind)?;
        if t.shape() != shape {
            return Err(Error::shape("init", shape, t.shape()));
        }
        self.store.insert(name, t, kind == ParamKind::OutProj)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let w = self.param(format!("{name}.weight"), &[d_out, d_in], ParamKind::Weight)?;
        let b = if bias {
            Some(self.param(format!("{name}.bias"), &[1, d_out], ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Linear::new(name, w, b))
    }

    fn out_proj(&mut self, name: &str, d: usize) -> Result<Linear> {
        let w = self.param(format!("{name}.weight"), &[d, d], ParamKind::OutProj)?;
        Ok(Linear::new(name, w, None))
    }

    fn norm(&mut self, name: String, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.param(format!("{name}.gamma"), &[1, d], ParamKind::Gamma)?,
            beta: self.param(format!("{name}.beta"), &[1, d], ParamKind::Beta)?,
            name,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    store: ParamStore,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
    hooks: Vec<String>,
}

impl ToyTransformer {
    /// Builds the module tree, drawing each parameter from `init` in a fixed
    /// order. `keep_ratio` selects SLA attention with an extra trainable
    /// `w_o`; everything else is registered frozen.
    pub fn build(
        config: ModelConfig,
        keep_ratio: Option<f32>,
        init: impl FnMut(&str, &[usize], ParamKind) -> Result<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(r) = keep_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("keep ratio {r} outside [0, 1]")));
            }
        }
        let d = config.d_model;
        let mut b = Builder {
            store: ParamStore::new(),
            init,
        };
        let embed = b.linear("embed", config.d_in, d, true)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("blocks.{i}");
            let norm1 = b.norm(format!("{p}.norm1"), d)?;
            let an = format!("{p}.attn");
            let w_q = b.linear(&format!("{an}.w_q"), d, d, false)?;
            let w_k = b.linear(&format!("{an}.w_k"), d, d, false)?;
            let w_v = b.linear(&format!("{an}.w_v"), d, d, false)?;
            let kind = match keep_ratio {
                None => AttentionKind::Dense,
                Some(keep_ratio) => AttentionKind::Sla {
                    w_o: b.out_proj(&format!("{an}.w_o"), d)?,
                    keep_ratio,
                },
            };
            let norm2 = b.norm(format!("{p}.norm2"), d)?;
            let fc1 = b.linear(&format!("{p}.mlp.fc1"), d, config.mlp_hidden, true)?;
            let fc2 = b.linear(&format!("{p}.mlp.fc2"), config.mlp_hidden, d, true)?;
            blocks.push(Block {
                norm1,
                attn: Attention {
                    name: an,
                    w_q,
                    w_k,
                    w_v,
                    kind,
                },
                norm2,
                fc1,
                fc2,
            });
        }
        let head = b.linear("head", d, config.d_out, true)?;
        Ok(ToyTransformer {
            config,
            store: b.store,
            embed,
            blocks,
            head,
            hooks: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_student(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.attn.kind, AttentionKind::Sla { .. }))
    }

    /// SLA keep ratio of the first block, or 1 for dense attention.
    pub fn keep_ratio(&self) -> f32 {
        self.blocks.first().map_or(1.0, |b| b.attn.keep_ratio())
    }

    /// All linear layers in forward order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.embed];
        for b in &self.blocks {
            out.extend([&b.attn.w_q, &b.attn.w_k, &b.attn.w_v]);
            if let AttentionKind::Sla { w_o, .. } = &b.attn.kind {
                out.push(w_o);
            }
            out.extend([&b.fc1, &b.fc2]);
        }
        out.push(&self.head);
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend([&mut b.attn.w_q, &mut b.attn.w_k, &mut b.attn.w_v]);
            if let AttentionKind::Sla { w_o, .. } = &mut b.attn.kind {
                out.push(w_o);
            }
            out.extend([&mut b.fc1, &mut b.fc2]);
        }
        out.push(&mut self.head);
        out
    }

    pub fn attention_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.attn.name.as_str()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.num_trainable() as f64 / self.num_params().max(1) as f64
    }

    /// Convert policy-matched linears to fake quantization.
    pub fn apply_policy(&mut self, policy: &QuantPolicy, enable_act_quant: bool) -> usize {
        let store = std::mem::take(&mut self.store);
        let n = apply_policy(self.linears_mut(), &store, policy, enable_act_quant);
        self.store = store;
        n
    }

    /// Replace every fake-quantized linear by its weight-only FP8 form.
    pub fn export_weight_only(&mut self) -> Result<usize> {
        let store = std::mem::take(&mut self.store);
        let mut n = 0;
        let result = (|| {
            for layer in self.linears_mut() {
                if let LinearMode::FakeQuant { .. } = layer.mode {
                    let wo = crate::qlinear::export_weight_only(layer, &store)?;
                    layer.mode = LinearMode::WeightOnly(Arc::new(wo));
                    n += 1;
                }
            }
            Ok(())
        })();
        self.store = store;
        result.map(|_| n)
    }

    /// Switch weight+activation fake quantization to weight-only.
    pub fn disable_act_quant(&mut self) {
        for layer in self.linears_mut() {
            if let LinearMode::FakeQuant { enable_act_quant } = &mut layer.mode {
                *enable_act_quant = false;
            }
        }
    }

    /// Capture outputs of attention modules whose name matches `pattern`.
    pub fn register_hooks(&mut self, pattern: &str) -> Result<Vec<String>> {
        let pat = Pattern::new(pattern).map_err(|e| Error::InvalidArgument(format!("bad glob {pattern:?}: {e}")))?;
        let names: Vec<String> = self
            .attention_names()
            .into_iter()
            .filter(|n| pat.matches(n))
            .map(str::to_owned)
            .collect();
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "hook pattern {pattern:?} matches no attention module"
            )));
        }
        self.hooks = names.clone();
        Ok(names)
    }

    pub fn hooks(&self) -> &[String] {
        &self.hooks
    }

    pub fn clear_hooks(&mut self) {
        self.hooks.clear();
    }

    /// Forward on `tape`. `x` is `B × N × d_in` (or `N × d_in`).
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, x: &Tensor) -> Result<ForwardOutput> {
        let (batch, seq) = match *x.shape() {
            [b, n, c] if c == self.config.d_in => (b, n),
            [n, c] if c == self.config.d_in => (1, n),
            _ => {
                return Err(Error::shape(
                    "model_forward",
                    x.shape(),
                    &[0, self.config.seq_len, self.config.d_in],
                ))
            }
        };
        if batch == 0 || seq == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let xv = tape.constant(x.as_matrix());
        let mut h = self.embed.forward(tape, params, xv)?;
        let mut records = Vec::new();
        for block in &self.blocks {
            let a_in = block.norm1.forward(tape, params, h)?;
            let a = block.attn.forward(tape, params, a_in, batch)?;
            if self.hooks.iter().any(|n| *n == block.attn.name) {
                records.push(HookRecord {
                    module: block.attn.name.clone(),
                    value: tape.value(a)?.clone(),
                    node: Some(a),
                });
            }
            h = tape.add(h, a)?;
            let m_in = block.norm2.forward(tape, params, h)?;
            let m = block.fc1.forward(tape, params, m_in)?;
            let m = tape.gelu(m)?;
            let m = block.fc2.forward(tape, params, m)?;
            h = tape.add(h, m)?;
        }
        let output = self.head.forward(tape, params, h)?;
        Ok(ForwardOutput {
            output,
            records,
            batch,
            seq_len: seq,
        })
    }

    /// Gradient-free forward; returns the `B × N × d_out` output and detached
    /// hook records.
    pub fn predict_with_records(&self, x: &Tensor) -> Result<(Tensor, Vec<HookRecord>)> {
        let mut tape = Tape::new();
        let params = self.store.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &params, x)?;
        let y = tape.value(out.output)?;
        let shape = if x.shape().len() == 3 {
            vec![out.batch, out.seq_len, self.config.d_out]
        } else {
            vec![out.seq_len, self.config.d_out]
        };
        let records = out.records.into_iter().map(HookRecord::detached).collect();
        Ok((y.reshaped(&shape)?, records))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_records(x)?.0)
    }
}

/// Dense teacher with seeded random weights, all frozen.
pub fn build_teacher(config: ModelConfig, seed: u64) -> Result<ToyTransformer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ToyTransformer::build(config, None, |_, shape, kind| {
        Ok(match kind {
            ParamKind::Weight => Tensor::randn(shape, 1.0 / (shape[1] as f32).sqrt(), &mut rng),
            ParamKind::Bias => Tensor::randn(shape, 0.02, &mut rng),
            ParamKind::Gamma => Tensor::ones(shape),
            ParamKind::Beta | ParamKind::OutProj => Tensor::zeros(shape),
        })
    })
}

/// SLA student: teacher weights copied and frozen, zero trainable `w_o` per
/// block. Quantization modes are not inherited.
pub fn derive_student(teacher: &ToyTransformer, keep_ratio: f32) -> Result<ToyTransformer> {
    if teacher.is_student() {
        return Err(Error::InvalidArgument("derive_student expects a dense teacher".into()));
    }
    let src = teacher.params();
    ToyTransformer::build(teacher.config, Some(keep_ratio), |name, shape, kind| match kind {
        ParamKind::OutProj => Ok(Tensor::zeros(shape)),
        _ => src
            .by_name(name)
            .map(|g| g.tensor.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("teacher has no parameter {name}"))),
    })
}
