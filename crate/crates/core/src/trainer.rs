//! Optimization loop: poly learning-rate decay, Adam moments, L1 loss.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{random_crop_pair, Dataset};
use crate::domain::Image;
use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, MetricsReport, MetricsSummary};
use crate::variants::Dehazer;

/// Global gradient-norm bound used when clipping is switched on.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr0: f64,
    pub power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight λ of the per-head auxiliary L1 term.
    pub aux_weight: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Probability of a horizontal flip per sample.
    pub flip_prob: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Held-out evaluation period; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Periodic checkpoint period; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::reside()
    }
}

impl TrainConfig {
    /// Schedule for the large indoor training set.
    pub fn reside() -> Self {
        Self {
            max_iters: 40_000,
            batch_size: 16,
            crop: 256,
            lr0: 2e-4,
            power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            aux_weight: 0.0,
            clip_grad_norm: None,
            flip_prob: 0.5,
            seed: 0,
            log_every: 50,
            eval_every: 2000,
            checkpoint_every: 2000,
        }
    }

    /// Schedule for the small outdoor set.
    pub fn ohaze() -> Self {
        Self {
            max_iters: 20_000,
            ..Self::reside()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iters < 1 {
            return fail("max_iters must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return fail("power must be positive");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.crop < 1 {
            return fail("crop must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.aux_weight >= 0.0) {
            return fail("aux_weight must be non-negative");
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return fail("clip_grad_norm must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("flip_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `lr0 · (1 − iter / max_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iters || cfg.max_iters == 0 {
        return Err(Error::IterOutOfRange {
            iter,
            max_iters: cfg.max_iters,
        });
    }
    if iter == 0 {
        return Ok(cfg.lr0);
    }
    let frac = 1.0 - iter as f64 / cfg.max_iters as f64;
    Ok(cfg.lr0 * frac.powf(cfg.power))
}

fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `L1(J_f, gt) + λ · Σ_k L1(J_k, gt) / K`, as a differentiable scalar.
pub fn loss(pred: &Tensor, components: &[&Tensor], gt: &Tensor, aux_weight: f64) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", pred.dims(), gt.dims())));
    }
    let main = l1(pred, gt)?;
    if aux_weight == 0.0 || components.is_empty() {
        return Ok(main);
    }
    let mut aux = l1(components[0], gt)?;
    for c in &components[1..] {
        aux = (aux + l1(c, gt)?)?;
    }
    let scale = aux_weight / components.len() as f64;
    Ok((main + aux.affine(scale, 0.0)?)?)
}

/// Scalar value of [`loss`] on images.
pub fn loss_value(pred: &Image, components: &[&Image], gt: &Image, aux_weight: f64) -> Result<f64> {
    let dev = candle_core::Device::Cpu;
    let t = |i: &Image| i.to_tensor(&dev, DType::F64);
    let comps = components.iter().map(|c| t(c)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = comps.iter().collect();
    Ok(loss(&t(pred)?, &refs, &t(gt)?, aux_weight)?.to_scalar::<f64>()?)
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub hazy: Tensor,
    pub clear: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    /// Number of completed optimizer steps.
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsSummary>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
    pub final_eval: Option<MetricsSummary>,
    /// Best held-out PSNR and the step count it was reached at.
    pub best: Option<(usize, f64)>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Optimizer state bound to one model.
pub struct Trainer<'m> {
    model: &'m Dehazer,
    cfg: TrainConfig,
    vars: Vec<Var>,
    opt: AdamW,
    rng: ChaCha8Rng,
    iter: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Dehazer, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vars: Vec<Var> = model.params().vars().into_iter().map(|(_, v)| v).collect();
        let params = ParamsAdamW {
            lr: cfg.lr0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        };
        Ok(Self {
            model,
            cfg: cfg.clone(),
            vars: vars.clone(),
            opt: AdamW::new(vars, params)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Draws `batch_size` random crops (with replacement) from `data`.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::ZeroSamples(data.name().to_string()));
        }
        let mut ids = Vec::with_capacity(self.cfg.batch_size);
        let mut hazy = Vec::with_capacity(self.cfg.batch_size);
        let mut clear = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.random_range(0..data.len());
            let s = random_crop_pair(&data.get(idx)?, self.cfg.crop, self.cfg.flip_prob, &mut self.rng)?;
            ids.push(s.id);
            hazy.push(s.hazy);
            clear.push(s.clear);
        }
        let dev = self.model.device();
        let dt = self.model.dtype();
        Ok(Batch {
            ids,
            hazy: Image::batch_to_tensor(&hazy.iter().collect::<Vec<_>>(), dev, dt)?,
            clear: Image::batch_to_tensor(&clear.iter().collect::<Vec<_>>(), dev, dt)?,
        })
    }

    fn loss_tensor(&self, batch: &Batch) -> Result<Tensor> {
        let pass = self.model.forward_batch(&batch.hazy)?;
        let comps: Vec<&Tensor> = pass.components.iter().map(|c| &c.prediction).collect();
        loss(&pass.fused, &comps, &batch.clear, self.cfg.aux_weight)
    }

    /// Loss of the current parameters on `batch`, without a step.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        scalar(&self.loss_tensor(batch)?)
    }

    /// One optimizer step at the given learning rate. Returns the loss
    /// measured before the update.
    pub fn step_with_lr(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let l = self.loss_tensor(batch)?;
        let value = scalar(&l)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                dump: String::new(),
            });
        }
        let mut grads = l.backward()?;
        if let Some(max) = self.cfg.clip_grad_norm {
            clip_grad_norm(&self.vars, &mut grads, max)?;
        }
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        self.iter += 1;
        Ok(value)
    }

    /// One step on the poly schedule.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let lr = poly_lr(self.iter, &self.cfg)?;
        self.step_with_lr(batch, lr)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(vars: &[Var], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = g.affine(scale, 0.0)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Runs the model over every sample, clamping predictions to `[0, 1]`.
/// `sink` receives each prediction (for saving).
pub fn evaluate_model(
    model: &Dehazer,
    data: &Dataset,
    mut sink: impl FnMut(&str, &Image) -> Result<()>,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::ZeroSamples(data.name().to_string()));
    }
    let mut report = MetricsReport::default();
    for i in 0..data.len() {
        let s = data.get(i)?;
        let pred = model.dehaze(&s.hazy)?.image;
        sink(&s.id, &pred)?;
        report.images.push(ImageMetrics::compute(&s.id, &pred, &s.clear)?);
    }
    Ok(report)
}

/// Passthrough baseline: scores the hazy inputs themselves.
pub fn evaluate_identity(data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::ZeroSamples(data.name().to_string()));
    }
    let mut report = MetricsReport::default();
    for i in 0..data.len() {
        let s = data.get(i)?;
        report.images.push(ImageMetrics::compute(&s.id, &s.hazy, &s.clear)?);
    }
    Ok(report)
}

fn dump_batch(dir: &Path, batch: &Batch, iter: usize, lr: f64, value: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::output(dir, e))?;
    let n = batch.hazy.dim(0)?;
    for b in 0..n {
        for (name, t) in [("hazy", &batch.hazy), ("clear", &batch.clear)] {
            let img = Image::from_tensor(&t.narrow(0, b, 1)?)?;
            img.clamp_unit()?.save_png(dir.join(format!("{b:02}_{name}.png")))?;
        }
    }
    let info = serde_json::json!({ "iter": iter, "lr": lr, "loss": value.to_string(), "ids": batch.ids });
    let path = dir.join("batch.json");
    fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::output(&path, e))
}

/// Paths under a training run directory.
pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoints").join("final.ckpt")
}

pub fn best_checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoints").join("best.ckpt")
}

/// Trains `model` in place for `cfg.max_iters` steps.
///
/// With `out` set, writes `train_log.jsonl` and checkpoints under it; with
/// `holdout` set, evaluates every `eval_every` steps and at the end, keeping
/// the best checkpoint by PSNR.
pub fn train(
    model: &Dehazer,
    cfg: &TrainConfig,
    data: &Dataset,
    holdout: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::ZeroSamples(data.name().to_string()));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let snapshot = serde_json::to_value(cfg)?;
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::output(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::output(&path, e))?, path))
        }
        None => None,
    };
    let mut outcome = TrainOutcome {
        losses: Vec::with_capacity(cfg.max_iters),
        log: Vec::new(),
        final_eval: None,
        best: None,
        final_checkpoint: None,
        best_checkpoint: None,
    };

    for iter in 0..cfg.max_iters {
        let lr = poly_lr(iter, cfg)?;
        let batch = trainer.next_batch(data)?;
        let value = match trainer.step_with_lr(&batch, lr) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss { iter, .. }) => {
                let dir = match out {
                    Some(d) => d.join(format!("nonfinite_iter{iter:06}")),
                    None => std::env::temp_dir().join(format!("cl2s_nonfinite_{}_{iter:06}", std::process::id())),
                };
                let dump = match dump_batch(&dir, &batch, iter, lr, f64::NAN) {
                    Ok(()) => dir.display().to_string(),
                    Err(e) => format!("(dump failed: {e})"),
                };
                log::error!("non-finite loss at iteration {iter}; batch dumped to {dump}");
                return Err(Error::NonFiniteLoss { iter, dump });
            }
            Err(e) => return Err(e),
        };
        outcome.losses.push(value);
        let done = iter + 1;
        let last = done == cfg.max_iters;

        let eval = match holdout {
            Some(h) if last || (cfg.eval_every > 0 && done % cfg.eval_every == 0) => {
                let summary = evaluate_model(model, h, |_, _| Ok(()))?.summary();
                if outcome.best.is_none_or(|(_, p)| summary.psnr > p) {
                    outcome.best = Some((done, summary.psnr));
                    if let Some(dir) = out {
                        let path = best_checkpoint_path(dir);
                        checkpoint::save_checkpoint(model, &path, done, Some(trainer.rng()), Some(snapshot.clone()))?;
                        outcome.best_checkpoint = Some(path);
                    }
                }
                Some(summary)
            }
            _ => None,
        };

        if done == 1 || last || eval.is_some() || (cfg.log_every > 0 && done % cfg.log_every == 0) {
            let rec = LogRecord {
                iter: done,
                lr,
                loss: value,
                eval: eval.clone(),
            };
            match &rec.eval {
                Some(e) => log::info!(
                    "iter {done:>6}  lr {lr:.3e}  loss {value:.5}  eval psnr {:.3} ssim {:.4}",
                    e.psnr,
                    e.ssim
                ),
                None => log::info!("iter {done:>6}  lr {lr:.3e}  loss {value:.5}"),
            }
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::output(path.clone(), e))?;
            }
            outcome.log.push(rec);
        }
        if last {
            outcome.final_eval = eval;
        }

        if let Some(dir) = out {
            if !last && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let path = dir.join("checkpoints").join(format!("iter_{done:06}.ckpt"));
                checkpoint::save_checkpoint(model, &path, done, Some(trainer.rng()), Some(snapshot.clone()))?;
            }
        }
    }

    if let Some(dir) = out {
        let path = final_checkpoint_path(dir);
        checkpoint::save_checkpoint(model, &path, cfg.max_iters, Some(trainer.rng()), Some(snapshot))?;
        outcome.final_checkpoint = Some(path);
    }
    Ok(outcome)
}
