//! Partial attention distillation and the FP8-aware QAT loop.
//!
//! The student objective is `task + γ · kd`, where `task` is the MSE to the
//! teacher's full-precision outputs and `kd` averages the per-module MSE
//! between student and (detached) teacher attention outputs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_student, HookRecord, ModelConfig, ToyTransformer};
use crate::qlinear::QuantPolicy;
use crate::tensor::{Sgd, Tape, Tensor, Var};

pub const HOOK_PATTERN: &str = "*attn*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f32,
    pub lr: f32,
    pub lr_qat_divisor: f32,
    pub epochs_qat: usize,
    /// Full-precision epochs at the undivided learning rate before QAT.
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub enable_act_quant: bool,
    pub keep_ratio: f32,
    /// Fake quantization during the QAT stage; off trains in full precision.
    pub qat: bool,
    /// Include the distillation term in the objective at all.
    pub use_kd: bool,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub policy: QuantPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.1,
            lr: 1e-2,
            lr_qat_divisor: 10.0,
            epochs_qat: 1,
            pretrain_epochs: 0,
            batch: 4,
            enable_act_quant: true,
            keep_ratio: 0.2,
            qat: true,
            use_kd: true,
            train_samples: 64,
            eval_samples: 8,
            policy: QuantPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.lr_qat_divisor > 0.0 && self.lr_qat_divisor.is_finite()) {
            return bad("lr_qat_divisor must be > 0");
        }
        if self.epochs_qat < 1 {
            return bad("epochs_qat must be >= 1");
        }
        if self.batch < 1 || self.train_samples < self.batch {
            return bad("need batch >= 1 and train_samples >= batch");
        }
        if self.eval_samples < 1 {
            return bad("eval_samples must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.keep_ratio) {
            return bad("keep_ratio must lie in [0, 1]");
        }
        self.policy.validate()
    }

    pub fn qat_lr(&self) -> f32 {
        self.lr / self.lr_qat_divisor
    }
}

/// `(1/L) Σ_l MSE(student_l, stopgrad(teacher_l))`.
pub fn attn_kd_loss(tape: &mut Tape, teacher: &[HookRecord], student: &[HookRecord]) -> Result<Var> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "distillation needs matching non-empty record lists, got {} teacher / {} student",
            teacher.len(),
            student.len()
        )));
    }
    let mut terms = Vec::with_capacity(teacher.len());
    for (t, s) in teacher.iter().zip(student) {
        if t.module != s.module {
            return Err(Error::InvalidArgument(format!(
                "record mismatch: {} vs {}",
                t.module, s.module
            )));
        }
        if t.value.shape() != s.value.shape() {
            return Err(Error::shape("attn_kd_loss", t.value.shape(), s.value.shape()));
        }
        let s_node = match s.node {
            Some(n) => n,
            None => tape.constant(s.value.clone()),
        };
        let t_const = tape.constant(t.value.clone());
        terms.push(tape.mse(s_node, t_const)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f32)
}

/// `task + γ · kd`.
pub fn total_loss(tape: &mut Tape, task: Var, kd: Var, gamma: f32) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be >= 0")));
    }
    let weighted = tape.scale(kd, gamma)?;
    tape.add(task, weighted)
}

/// MSE between the student output and teacher targets of the same numel and
/// trailing dim.
pub fn toy_task_loss(tape: &mut Tape, output: Var, targets: &Tensor) -> Result<Var> {
    let out = tape.value(output)?;
    if out.numel() != targets.numel() || out.cols() != targets.cols() {
        return Err(Error::shape("toy_task_loss", out.shape(), targets.shape()));
    }
    let t = tape.constant(targets.reshaped(out.shape())?);
    tape.mse(output, t)
}

/// Synthetic inputs with teacher outputs as targets.
#[derive(Debug, Clone)]
pub struct ToyData {
    /// `batch × N × d_in` per step.
    pub train_inputs: Vec<Tensor>,
    pub train_targets: Vec<Tensor>,
    pub eval_inputs: Tensor,
    pub eval_targets: Tensor,
}

impl ToyData {
    pub fn generate(teacher: &ToyTransformer, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let m = teacher.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let steps = cfg.train_samples / cfg.batch;
        let mut train_inputs = Vec::with_capacity(steps);
        let mut train_targets = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x = Tensor::randn(&[cfg.batch, m.seq_len, m.d_in], 1.0, &mut rng);
            train_targets.push(teacher.predict(&x)?);
            train_inputs.push(x);
        }
        let eval_inputs = Tensor::randn(&[cfg.eval_samples, m.seq_len, m.d_in], 1.0, &mut rng);
        let eval_targets = teacher.predict(&eval_inputs)?;
        Ok(ToyData {
            train_inputs,
            train_targets,
            eval_inputs,
            eval_targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Qat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub task_loss: f32,
    pub kd_loss: f32,
    pub total_loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// 0 is the evaluation before the first step of the stage.
    pub epoch: usize,
    pub stage: Stage,
    pub after_step: usize,
    pub eval_mse: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub stage: Stage,
    pub wall_time_s: f64,
}

/// Losses and evaluations are deterministic for a fixed seed; wall times are
/// kept apart in `timings` and are excluded from equality and serialization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    #[serde(skip)]
    pub timings: Vec<EpochTiming>,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.evals == other.evals
    }
}

impl TrainLog {
    pub fn first_eval(&self, stage: Stage) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.stage == stage)
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    pub fn steps_csv(&self) -> Result<String> {
        to_csv(&self.steps)
    }

    pub fn evals_csv(&self) -> Result<String> {
        to_csv(&self.evals)
    }
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Mean squared error of the student against eval targets.
pub fn evaluate(student: &ToyTransformer, data: &ToyData) -> Result<f32> {
    let y = student.predict(&data.eval_inputs)?;
    let diff_sq: f64 = y
        .data()
        .iter()
        .zip(data.eval_targets.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((diff_sq / y.numel() as f64) as f32)
}

struct Trainer<'a> {
    teacher: ToyTransformer,
    student: &'a mut ToyTransformer,
    data: &'a ToyData,
    cfg: &'a TrainConfig,
    log: &'a mut TrainLog,
    step: usize,
}

impl Trainer<'_> {
    fn run_stage(&mut self, stage: Stage, epochs: usize, lr: f32) -> Result<()> {
        let sgd = Sgd::new(lr);
        self.log.evals.push(EvalRecord {
            epoch: 0,
            stage,
            after_step: self.step,
            eval_mse: evaluate(self.student, self.data)?,
        });
        for epoch in 1..=epochs {
            let start = Instant::now();
            for (x, y) in self.data.train_inputs.iter().zip(&self.data.train_targets) {
                self.train_step(&sgd, stage, epoch, x, y)?;
            }
            self.log.timings.push(EpochTiming {
                epoch,
                stage,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            let eval_mse = evaluate(self.student, self.data)?;
            if !eval_mse.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!("eval MSE {eval_mse} after epoch {epoch}"),
                });
            }
            log::info!("{stage:?} epoch {epoch}: eval mse {eval_mse:.6e}");
            self.log.evals.push(EvalRecord {
                epoch,
                stage,
                after_step: self.step,
                eval_mse,
            });
        }
        Ok(())
    }

    fn train_step(&mut self, sgd: &Sgd, stage: Stage, epoch: usize, x: &Tensor, y: &Tensor) -> Result<()> {
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let (_, teacher_records) = self.teacher.predict_with_records(x)?;

        let mut tape = Tape::new();
        let params = self.student.params().bind(&mut tape);
        let out = self.student.forward(&mut tape, &params, x).map_err(diverged)?;
        let task = toy_task_loss(&mut tape, out.output, y).map_err(diverged)?;
        let kd = attn_kd_loss(&mut tape, &teacher_records, &out.records).map_err(diverged)?;
        let total = if self.cfg.use_kd {
            total_loss(&mut tape, task, kd, self.cfg.gamma).map_err(diverged)?
        } else {
            task
        };
        let rec = StepRecord {
            step,
            epoch,
            stage,
            task_loss: tape.value(task)?.item(),
            kd_loss: tape.value(kd)?.item(),
            total_loss: tape.value(total)?.item(),
        };
        if !rec.total_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("total loss {}", rec.total_loss),
            });
        }
        let grads = params.collect(&tape.backward(total)?);
        drop(tape);
        sgd.step(self.student.params_mut(), &grads)?;
        self.log.steps.push(rec);
        self.step += 1;
        Ok(())
    }
}

fn trainer<'a>(
    teacher: &ToyTransformer,
    student: &'a mut ToyTransformer,
    data: &'a ToyData,
    cfg: &'a TrainConfig,
    log: &'a mut TrainLog,
) -> Result<Trainer<'a>> {
    if teacher.is_student() || !student.is_student() {
        return Err(Error::InvalidArgument("expected a dense teacher and an SLA student".into()));
    }
    if teacher.config() != student.config() {
        return Err(Error::InvalidArgument("teacher and student dims differ".into()));
    }
    let mut teacher = teacher.clone();
    teacher.register_hooks(HOOK_PATTERN)?;
    student.register_hooks(HOOK_PATTERN)?;
    let step = log.steps.len();
    Ok(Trainer {
        teacher,
        student,
        data,
        cfg,
        log,
        step,
    })
}

/// Full-precision adaptation at the base learning rate.
pub fn run_pretrain(
    teacher: &ToyTransformer,
    student: &mut ToyTransformer,
    data: &ToyData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if student.linears().iter().any(|l| l.is_quantized()) {
        return Err(Error::InvalidArgument("pretraining expects a full-precision student".into()));
    }
    let mut t = trainer(teacher, student, data, cfg, log)?;
    t.run_stage(Stage::Pretrain, cfg.pretrain_epochs, cfg.lr)
}

/// QAT stage at `lr / lr_qat_divisor`. The student keeps whatever
/// quantization modes the policy gave it; only trainable groups move.
pub fn run_qat(
    teacher: &ToyTransformer,
    student: &mut ToyTransformer,
    data: &ToyData,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    let mut t = trainer(teacher, student, data, cfg, &mut log)?;
    t.run_stage(Stage::Qat, cfg.epochs_qat, cfg.qat_lr())?;
    Ok(log)
}

/// Result of [`train`].
pub struct TrainRun {
    pub teacher: ToyTransformer,
    pub student: ToyTransformer,
    pub data: ToyData,
    pub log: TrainLog,
    pub converted_layers: usize,
}

/// End to end: teacher, student, optional full-precision stage, policy, QAT.
pub fn train(model: ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainRun> {
    cfg.validate()?;
    let teacher = crate::model::build_teacher(model, seed)?;
    let mut student = derive_student(&teacher, cfg.keep_ratio)?;
    let data = ToyData::generate(&teacher, cfg, seed)?;
    let mut log = TrainLog::default();
    if cfg.pretrain_epochs > 0 {
        run_pretrain(&teacher, &mut student, &data, cfg, &mut log)?;
    }
    let converted_layers = if cfg.qat {
        student.apply_policy(&cfg.policy, cfg.enable_act_quant)
    } else {
        0
    };
    let qat_log = run_qat(&teacher, &mut student, &data, cfg)?;
    let offset = log.steps.len();
    log.steps.extend(qat_log.steps.into_iter().map(|mut s| {
        s.step += offset;
        s
    }));
    log.evals.extend(qat_log.evals.into_iter().map(|mut e| {
        e.after_step += offset;
        e
    }));
    log.timings.extend(qat_log.timings);
    Ok(TrainRun {
        teacher,
        student,
        data,
        log,
        converted_layers,
    })
}
