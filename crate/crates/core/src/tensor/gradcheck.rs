//! Central finite-difference gradient checking.
//!
//! The scalar objective is `Σ out ⊙ R` for a random fixed `R`. Analytic
//! gradients come from the tape; numeric ones re-run the forward function on
//! perturbed copies and accumulate the objective in `f64`, so the check uses
//! nothing from the backward pass.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub rtol: f64,
    /// Step is `step_scale · max(1, |x|)`.
    pub step_scale: f32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rtol: 1e-3,
            step_scale: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(1, |a|, |n|)` seen.
    pub max_rel_err: f64,
    pub rtol: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.rtol
    }
}

fn objective(out: &Tensor, weights: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

fn forward_value<F>(inputs: &[Tensor], f: &F) -> Result<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out)?.clone())
}

pub fn check_gradients<F, R>(
    inputs: &[Tensor],
    f: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.value(out)?.shape().to_vec();
    let weights = Tensor::rand_uniform(&out_shape, -1.0, 1.0, rng);
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        rtol: cfg.rtol,
        checked: 0,
        worst: None,
    };
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = cfg.step_scale * x.abs().max(1.0);
            let (xp, xm) = (x + h, x - h);
            perturbed[i].data_mut()[j] = xp;
            let fp = objective(&forward_value(&perturbed, &f)?, &weights);
            perturbed[i].data_mut()[j] = xm;
            let fm = objective(&forward_value(&perturbed, &f)?, &weights);
            perturbed[i].data_mut()[j] = x;

            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = analytic.map_or(0.0, |g| g.data()[j] as f64);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
