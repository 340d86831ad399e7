//! Layer-wise quantization sensitivity and efficiency accounting.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionKind, ToyTransformer};
use crate::qlinear::LinearMode;
use crate::sla::attention_flops;
use crate::tensor::{self, Tensor};

/// Kurtosis convention used by [`sensitivity_score`].
pub const KURTOSIS_CONVENTION: &str = "pearson";

const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub dyn_range: f64,
    pub outlier_frac: f64,
    pub kurtosis: f64,
    pub score: f64,
}

/// `S = 0.4·max|W|/10 + 0.3·r_out + 0.3·kurt/10`, with population moments and
/// outliers beyond 3σ from the mean.
pub fn sensitivity_score(w: &Tensor) -> Result<Sensitivity> {
    sensitivity_of(w.data())
}

pub fn sensitivity_of(w: &[f32]) -> Result<Sensitivity> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("sensitivity of an empty tensor".into()));
    }
    let n = w.len() as f64;
    let dyn_range = w.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let (outlier_frac, kurtosis) = if std < DEGENERATE_STD {
        (0.0, 0.0)
    } else {
        let outliers = w.iter().filter(|&&x| (x as f64 - mean).abs() > 3.0 * std).count();
        let m4 = w.iter().map(|&x| (x as f64 - mean).powi(4)).sum::<f64>() / n;
        (outliers as f64 / n, m4 / (var * var))
    };
    let score = 0.4 * dyn_range / 10.0 + 0.3 * outlier_frac + 0.3 * kurtosis / 10.0;
    Ok(Sensitivity {
        dyn_range,
        outlier_frac,
        kurtosis,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub name: String,
    pub num_params: usize,
    pub dyn_range: f64,
    pub outlier_frac: f64,
    pub kurtosis: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub kurtosis_convention: String,
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> Result<String> {
        crate::distill::to_csv(&self.layers)
    }
}

/// One entry per linear layer, highest score first. Ties keep forward order.
pub fn model_report(model: &ToyTransformer) -> Result<SensitivityReport> {
    let store = model.params();
    let mut layers = Vec::new();
    for l in model.linears() {
        let w = match &l.mode {
            LinearMode::WeightOnly(wo) => wo.dequantized_weight(),
            _ => &store.get(l.weight).tensor,
        };
        let s = sensitivity_score(w)?;
        layers.push(LayerSensitivity {
            name: l.name.clone(),
            num_params: w.numel(),
            dyn_range: s.dyn_range,
            outlier_frac: s.outlier_frac,
            kurtosis: s.kurtosis,
            score: s.score,
        });
    }
    layers.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(SensitivityReport {
        kurtosis_convention: KURTOSIS_CONVENTION.into(),
        layers,
    })
}

/// Forward FLOPs for one sequence of length `n`: attention token mixing
/// (including the SLA linear branch and output projection) and every other
/// linear layer (`2·n·d_in·d_out` plus `n·d_out` for a bias).
pub fn model_flops(model: &ToyTransformer, n: u64) -> (u64, u64) {
    let d = model.config().d_model as u64;
    let store = model.params();
    let attn: u64 = model
        .blocks
        .iter()
        .map(|b| attention_flops(n, d, b.attn.keep_ratio(), b.attn.variant()))
        .sum();
    let out_projs: Vec<&str> = model
        .blocks
        .iter()
        .filter_map(|b| match &b.attn.kind {
            AttentionKind::Sla { w_o, .. } => Some(w_o.name.as_str()),
            AttentionKind::Dense => None,
        })
        .collect();
    let linear: u64 = model
        .linears()
        .into_iter()
        .filter(|l| !out_projs.contains(&l.name.as_str()))
        .map(|l| {
            let (i, o) = (l.in_features(store) as u64, l.out_features(store) as u64);
            2 * n * i * o + if l.bias.is_some() { n * o } else { 0 }
        })
        .sum();
    (attn, linear)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBytes {
    /// Every parameter stored as f32.
    pub full: u64,
    /// Weight-only FP8 layers counted as codes plus f32 scales.
    pub deployed: u64,
    /// f32 bytes of the weights that are stored as FP8 when deployed.
    pub quantized_weights_full: u64,
    /// FP8 codes plus scales of those same weights.
    pub quantized_weights_fp8: u64,
}

pub fn param_bytes(model: &ToyTransformer) -> ParamBytes {
    let full = 4 * model.num_params() as u64;
    let mut pb = ParamBytes {
        full,
        deployed: full,
        ..Default::default()
    };
    for l in model.linears() {
        if let LinearMode::WeightOnly(wo) = &l.mode {
            let f32_bytes = 4 * wo.dequantized_weight().numel() as u64;
            let fp8_bytes = wo.weight_bytes() as u64;
            pb.quantized_weights_full += f32_bytes;
            pb.quantized_weights_fp8 += fp8_bytes;
            pb.deployed = pb.deployed - f32_bytes + fp8_bytes;
        }
    }
    pb
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffReport {
    pub variant: String,
    pub seq_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub keep_ratio: f32,
    pub attention_flops: u64,
    pub linear_flops: u64,
    pub total_flops: u64,
    pub param_bytes: ParamBytes,
    /// High-water mark of live tensor bytes during one forward, above the
    /// bytes already live before it.
    pub peak_bytes: u64,
    pub warmup: usize,
    pub latency_s: Vec<f64>,
    pub mean_latency_s: f64,
    pub min_latency_s: f64,
}

/// Time `repeats` single-sequence forwards after `warmup` untimed ones.
/// Runs on the calling thread; peak memory comes from the per-thread tracker.
pub fn benchmark(
    model: &ToyTransformer,
    variant: &str,
    seq_len: usize,
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<EffReport> {
    if repeats < 3 || warmup < 1 {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs repeats >= 3 and warmup >= 1, got {repeats} and {warmup}"
        )));
    }
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be >= 1".into()));
    }
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[1, seq_len, cfg.d_in], 1.0, &mut rng);

    for _ in 0..warmup {
        model.predict(&x)?;
    }
    let base = tensor::live_bytes();
    tensor::reset_peak();
    let mut latency_s = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let y = model.predict(&x)?;
        latency_s.push(t.elapsed().as_secs_f64());
        drop(y);
    }
    let peak_bytes = tensor::peak_bytes().saturating_sub(base) as u64;

    let (attention_flops, linear_flops) = model_flops(model, seq_len as u64);
    let mean = latency_s.iter().sum::<f64>() / repeats as f64;
    let min = latency_s.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EffReport {
        variant: variant.into(),
        seq_len,
        d_model: cfg.d_model,
        layers: cfg.layers,
        keep_ratio: model.keep_ratio(),
        attention_flops,
        linear_flops,
        total_flops: attention_flops + linear_flops,
        param_bytes: param_bytes(model),
        peak_bytes,
        warmup,
        latency_s,
        mean_latency_s: mean,
        min_latency_s: min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_teacher, derive_student, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            d_in: 4,
            d_out: 3,
            seq_len: 16,
            mlp_hidden: 12,
        }
    }

    #[test]
    fn constant_tensor_hits_degenerate_guard() {
        let s = sensitivity_score(&Tensor::ones(&[3, 3])).unwrap();
        assert_eq!((s.dyn_range, s.outlier_frac, s.kurtosis), (1.0, 0.0, 0.0));
        assert!((s.score - 0.04).abs() < 1e-15);
        assert!(sensitivity_score(&Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn report_covers_every_linear_sorted() {
        let mut m = derive_student(&build_teacher(small(), 1).unwrap(), 0.5).unwrap();
        let r = model_report(&m).unwrap();
        assert_eq!(r.layers.len(), m.linears().len());
        assert!(r.layers.windows(2).all(|w| w[0].score >= w[1].score));
        m.apply_policy(&Default::default(), false);
        m.export_weight_only().unwrap();
        assert_eq!(model_report(&m).unwrap().layers.len(), m.linears().len());
    }

    #[test]
    fn flops_dense_model() {
        let m = build_teacher(small(), 0).unwrap();
        let (a, l) = model_flops(&m, 16);
        assert_eq!(a, 2 * (4 * 16 * 16 * 8 + 16 * 16));
        // embed 4→8, per block q,k,v 8→8 no bias, fc1 8→12, fc2 12→8, head 8→3
        let lin = |i: u64, o: u64, b: bool| 2 * 16 * i * o + if b { 16 * o } else { 0 };
        let expected = lin(4, 8, true)
            + 2 * (3 * lin(8, 8, false) + lin(8, 12, true) + lin(12, 8, true))
            + lin(8, 3, true);
        assert_eq!(l, expected);
    }

    #[test]
    fn benchmark_repeats_and_bytes() {
        let mut m = derive_student(&build_teacher(small(), 0).unwrap(), 0.25).unwrap();
        assert!(benchmark(&m, "x", 16, 2, 1, 0).is_err());
        let r = benchmark(&m, "sla", 16, 4, 1, 0).unwrap();
        assert_eq!(r.latency_s.len(), 4);
        assert!(r.peak_bytes > 0);
        assert_eq!(r.param_bytes.full, r.param_bytes.deployed);
        m.apply_policy(&Default::default(), false);
        m.export_weight_only().unwrap();
        let r = benchmark(&m, "sla_fp8", 16, 3, 1, 0).unwrap();
        assert!(r.param_bytes.deployed < r.param_bytes.full);
    }
}
