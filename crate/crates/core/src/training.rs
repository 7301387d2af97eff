//! Training loop for the force estimator.
//!
//! Each example is an `L`-sample history followed by an `H`-step rollout. At
//! every rollout step the next input row is the ground-truth force with the
//! epoch's teacher-forcing probability and the model's own estimate
//! otherwise; gradients flow back through the fed-back estimates. The loss is
//! a weighted sum of the MSE and a thresholded relative error, optimized with
//! Adam under a step learning-rate schedule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Normalization, Params, XhapModel, D_TOP};
use crate::par::{map_range, Execution};
use crate::tensor::Matrix;
use crate::traces::Trace;

/// Losses larger than this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Examples per gradient chunk. Chunks are reduced in index order, so the
/// summed gradient does not depend on how chunks are scheduled.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub lambda_mse: f64,
    pub lambda_rel: f64,
    /// Relative-error exclusion threshold in newtons.
    pub tau: f64,
    pub rollout_horizon: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Spacing between consecutive example start indices in a trace.
    pub stride: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr0: 1e-3,
            lr_step: 10,
            lr_gamma: 0.5,
            lambda_mse: 0.5,
            lambda_rel: 0.5,
            tau: 0.01,
            rollout_horizon: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stride: 1,
            seed: 1,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("train.lr0", "must be positive"));
        }
        if self.lr_step == 0 {
            return Err(Error::invalid("train.lr_step", "must be at least 1"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::invalid("train.lr_gamma", "must lie in (0, 1]"));
        }
        if self.lambda_mse < 0.0 || self.lambda_rel < 0.0 {
            return Err(Error::invalid("train.lambda_mse", "loss weights must be non-negative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("train.tau", "must be positive"));
        }
        if self.rollout_horizon == 0 {
            return Err(Error::invalid("train.rollout_horizon", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("train.stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Step schedule: `lr0 · γ^⌊e / step⌋` for zero-based epoch `e`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

/// Linear teacher-forcing decay `1 − e/E`.
pub fn teacher_forcing_prob(epoch: usize, total: usize) -> f64 {
    assert!(total > 0 && epoch <= total, "epoch {epoch} outside 0..={total}");
    1.0 - epoch as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub mse: f64,
    pub rel: f64,
    pub total: f64,
}

/// Composite loss over an `H × 3` block (newtons) and its gradient with
/// respect to `pred`. The relative term averages `|p − y| / |y|` over entries
/// with `|y| > tau` and vanishes when there are none.
pub fn composite_loss(
    pred: &[[f64; 3]],
    truth: &[[f64; 3]],
    lambda_mse: f64,
    lambda_rel: f64,
    tau: f64,
) -> (LossParts, Vec<[f64; 3]>) {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths");
    let n = (pred.len() * D_TOP) as f64;
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut members = 0usize;
    for (p, y) in pred.iter().zip(truth) {
        for c in 0..D_TOP {
            let e = p[c] - y[c];
            sq += e * e;
            if y[c].abs() > tau {
                rel += e.abs() / y[c].abs();
                members += 1;
            }
        }
    }
    let mse = sq / n;
    let rel = if members > 0 { rel / members as f64 } else { 0.0 };
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(p, y)| {
            std::array::from_fn(|c| {
                let e = p[c] - y[c];
                let mut g = lambda_mse * 2.0 * e / n;
                if y[c].abs() > tau && e != 0.0 {
                    // subgradient 0 at the kink
                    g += lambda_rel * e.signum() / (y[c].abs() * members as f64);
                }
                g
            })
        })
        .collect();
    let parts = LossParts {
        mse,
        rel,
        total: lambda_mse * mse + lambda_rel * rel,
    };
    (parts, grad)
}

/// Start of one training example inside a dataset trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleRef {
    pub trace: usize,
    pub start: usize,
}

/// Normalized traces plus the example index. Traces are used as given; trim
/// them before building a dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub history_len: usize,
    pub horizon: usize,
    forces_raw: Vec<Vec<[f64; 3]>>,
    forces: Vec<Vec<[f64; 3]>>,
    ops: Vec<Vec<[f64; 6]>>,
    pub examples: Vec<ExampleRef>,
}

impl Dataset {
    /// Every `stride`-th window that leaves room for `horizon` targets.
    pub fn from_traces(
        traces: &[Trace],
        norm: &Normalization,
        history_len: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self> {
        if history_len == 0 || horizon == 0 || stride == 0 {
            return Err(Error::invalid("dataset", "history, horizon and stride must be positive"));
        }
        let mut ds = Dataset {
            history_len,
            horizon,
            forces_raw: Vec::new(),
            forces: Vec::new(),
            ops: Vec::new(),
            examples: Vec::new(),
        };
        for (i, tr) in traces.iter().enumerate() {
            let span = history_len + horizon;
            if tr.len() >= span {
                ds.examples.extend(
                    (0..=tr.len() - span)
                        .step_by(stride)
                        .map(|start| ExampleRef { trace: i, start }),
                );
            }
            ds.forces_raw.push(tr.forces());
            ds.forces.push(tr.samples.iter().map(|s| norm.force_in(&s.force)).collect());
            ds.ops.push(tr.samples.iter().map(|s| norm.op_in(&s.operator())).collect());
        }
        if ds.examples.is_empty() {
            return Err(Error::invalid("dataset", "no trace is long enough for one example"));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn history(&self, ex: ExampleRef) -> &[[f64; 3]] {
        &self.forces[ex.trace][ex.start..ex.start + self.history_len]
    }

    fn targets_raw(&self, ex: ExampleRef) -> &[[f64; 3]] {
        let s = ex.start + self.history_len;
        &self.forces_raw[ex.trace][s..s + self.horizon]
    }

    fn targets_norm(&self, ex: ExampleRef) -> &[[f64; 3]] {
        let s = ex.start + self.history_len;
        &self.forces[ex.trace][s..s + self.horizon]
    }

    fn op_window(&self, ex: ExampleRef, offset: usize) -> &[[f64; 6]] {
        let s = ex.start + offset;
        &self.ops[ex.trace][s..s + self.history_len]
    }
}

fn rows<const N: usize>(data: &[[f64; N]]) -> Matrix {
    Matrix::from_vec(data.len(), N, data.iter().flatten().copied().collect())
}

/// Rollout predictions (newtons) for one example under a forcing mask.
fn rollout_forward(
    model: &XhapModel,
    data: &Dataset,
    ex: ExampleRef,
    forcing: &[bool],
    keep_caches: bool,
) -> (Vec<[f64; 3]>, Vec<crate::model::StepCache>) {
    let l = data.history_len;
    let mut buf: Vec<[f64; 3]> = data.history(ex).to_vec();
    let truth = data.targets_norm(ex);
    let mut preds = Vec::with_capacity(data.horizon);
    let mut caches = Vec::new();
    for k in 0..data.horizon {
        let cache = model.forward_cached(rows(&buf[k..k + l]), rows(data.op_window(ex, k)));
        preds.push(model.normalization.force_out(&cache.y));
        buf.push(if forcing[k] { truth[k] } else { cache.y });
        if keep_caches {
            caches.push(cache);
        }
    }
    (preds, caches)
}

/// Loss of one example and its gradient accumulated into `grads`.
fn example_gradient(
    model: &XhapModel,
    data: &Dataset,
    ex: ExampleRef,
    forcing: &[bool],
    cfg: &TrainConfig,
    grads: &mut Params,
) -> LossParts {
    let l = data.history_len;
    let h = data.horizon;
    let (preds, caches) = rollout_forward(model, data, ex, forcing, true);
    let (parts, d_pred) =
        composite_loss(&preds, data.targets_raw(ex), cfg.lambda_mse, cfg.lambda_rel, cfg.tau);

    let std = model.normalization.force_std;
    // gradient reaching each normalized estimate through later input windows
    let mut d_feed = vec![[0.0; 3]; h];
    for k in (0..h).rev() {
        let d_y: [f64; 3] = std::array::from_fn(|c| d_pred[k][c] * std[c] + d_feed[k][c]);
        let d_x = model.backward(&caches[k], &d_y, grads);
        for j in 0..l {
            let m = k + j;
            if m >= l && !forcing[m - l] {
                for c in 0..D_TOP {
                    d_feed[m - l][c] += d_x.get(j, c);
                }
            }
        }
    }
    parts
}

/// Mean loss and mean gradient over a batch, with one forcing mask (one
/// entry per rollout step) per example.
pub fn batch_gradient(
    model: &XhapModel,
    data: &Dataset,
    batch: &[ExampleRef],
    forcing: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<(Params, LossParts)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    assert_eq!(batch.len(), forcing.len(), "one forcing mask per example");
    let chunks = batch.len().div_ceil(CHUNK);
    let partial = map_range(cfg.execution, chunks, |ci| {
        let mut g = Params::zeros(&model.config);
        let mut sum = LossParts::default();
        let end = ((ci + 1) * CHUNK).min(batch.len());
        for i in ci * CHUNK..end {
            let p = example_gradient(model, data, batch[i], &forcing[i], cfg, &mut g);
            sum.mse += p.mse;
            sum.rel += p.rel;
            sum.total += p.total;
        }
        (g, sum)
    });
    let mut iter = partial.into_iter();
    let (mut grads, mut loss) = iter.next().expect("at least one chunk");
    for (g, s) in iter {
        grads.add_assign(&g);
        loss.mse += s.mse;
        loss.rel += s.rel;
        loss.total += s.total;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    loss.mse *= inv;
    loss.rel *= inv;
    loss.total *= inv;
    Ok((grads, loss))
}

/// Mean batch loss without gradients (used for finite-difference checks).
pub fn batch_loss(
    model: &XhapModel,
    data: &Dataset,
    batch: &[ExampleRef],
    forcing: &[Vec<bool>],
    cfg: &TrainConfig,
) -> LossParts {
    let mut sum = LossParts::default();
    for (ex, mask) in batch.iter().zip(forcing) {
        let (preds, _) = rollout_forward(model, data, *ex, mask, false);
        let (p, _) = composite_loss(&preds, data.targets_raw(*ex), cfg.lambda_mse, cfg.lambda_rel, cfg.tau);
        sum.mse += p.mse;
        sum.rel += p.rel;
        sum.total += p.total;
    }
    let inv = 1.0 / batch.len() as f64;
    LossParts {
        mse: sum.mse * inv,
        rel: sum.rel * inv,
        total: sum.total * inv,
    }
}

/// One-step-ahead mean squared error in N², averaged over channels.
pub fn validation_mse(model: &XhapModel, data: &Dataset, exec: Execution) -> f64 {
    let chunks = data.len().div_ceil(64);
    let sums = map_range(exec, chunks, |ci| {
        let end = ((ci + 1) * 64).min(data.len());
        data.examples[ci * 64..end]
            .iter()
            .map(|&ex| {
                let cache = model.forward_cached(rows(data.history(ex)), rows(data.op_window(ex, 0)));
                let p = model.normalization.force_out(&cache.y);
                let y = data.targets_raw(ex)[0];
                (0..D_TOP).map(|c| (p[c] - y[c]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
    });
    sums.iter().sum::<f64>() / (data.len() * D_TOP) as f64
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    pub fn new(model: &XhapModel) -> Self {
        Adam {
            m: Params::zeros(&model.config),
            v: Params::zeros(&model.config),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            let (p, g) = (p.as_mut_slice(), g.as_slice());
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub eps: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Validation MSE of the model before the first update.
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_mse)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mse,eps,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                e.epoch, e.train_loss, e.val_mse, e.eps, e.lr
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Draws one Bernoulli(`eps`) teacher-forcing decision per rollout step.
pub fn draw_forcing<R: Rng + ?Sized>(rng: &mut R, eps: f64, horizon: usize) -> Vec<bool> {
    (0..horizon).map(|_| rng.random::<f64>() < eps).collect()
}

/// Trains `model` and returns the weights with the best validation MSE.
pub fn train(
    mut model: XhapModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(XhapModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.history_len != model.config.history_len || val_set.history_len != model.config.history_len {
        return Err(Error::Shape {
            context: "training data",
            expected: format!("history length {}", model.config.history_len),
            actual: format!("{} / {}", train_set.history_len, val_set.history_len),
        });
    }
    if train_set.horizon != cfg.rollout_horizon {
        return Err(Error::Shape {
            context: "training data",
            expected: format!("rollout horizon {}", cfg.rollout_horizon),
            actual: train_set.horizon.to_string(),
        });
    }

    let mut history = TrainHistory {
        initial_val_mse: validation_mse(&model, val_set, cfg.execution),
        ..Default::default()
    };
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let eps = teacher_forcing_prob(epoch, cfg.epochs);
        let lr = cfg.learning_rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<ExampleRef> = idx.iter().map(|&i| train_set.examples[i]).collect();
            let forcing: Vec<Vec<bool>> = batch
                .iter()
                .map(|_| draw_forcing(&mut rng, eps, cfg.rollout_horizon))
                .collect();
            let (grads, loss) = batch_gradient(&model, train_set, &batch, &forcing, cfg)?;
            if !loss.total.is_finite() {
                let culprit = grads.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite(format!("epoch {epoch}: {culprit}")));
            }
            if loss.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.total,
                });
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}: gradient of {name}")));
            }
            adam.step(&mut model.params, &grads, lr, cfg);
            if let Some(name) = model.params.first_non_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}: parameter {name}")));
            }
            loss_sum += loss.total;
            batches += 1;
        }

        let val_mse = validation_mse(&model, val_set, cfg.execution);
        let train_loss = loss_sum / batches as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.4e}, val mse {val_mse:.4e}, eps {eps:.3}, lr {lr:.2e}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
            eps,
            lr,
        });
        if val_mse < best.0 {
            best = (val_mse, model.clone(), epoch);
        }
    }
    history.best_epoch = best.2;
    Ok((best.1, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_loss_examples() {
        let (p, _) = composite_loss(&[[1.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]], 0.5, 0.5, 0.01);
        assert_eq!(p.total, 0.0);

        let (p, _) = composite_loss(&[[1.1, 0.0, 0.0]], &[[1.0, 0.0, 0.0]], 0.5, 0.5, 0.01);
        assert!((p.mse - 0.01 / 3.0).abs() < 1e-15);
        assert!((p.rel - 0.1).abs() < 1e-14);
        assert!((p.total - 0.051_666_666_666_666_67).abs() < 1e-14);

        let (p, _) = composite_loss(&[[0.5, 0.2, 0.0]], &[[0.005, -0.01, 0.0]], 0.5, 0.5, 0.01);
        assert_eq!(p.rel, 0.0);
        assert_eq!(p.total, 0.5 * p.mse);
    }

    #[test]
    fn composite_loss_gradient_matches_differences() {
        let pred = [[0.3, -0.2, 1.4], [0.0, 0.7, -0.5]];
        let truth = [[0.2, 0.005, 1.0], [-0.3, 0.9, -0.4]];
        let (_, g) = composite_loss(&pred, &truth, 0.3, 0.7, 0.01);
        let eps = 1e-7;
        for t in 0..2 {
            for c in 0..3 {
                let mut up = pred;
                up[t][c] += eps;
                let mut dn = pred;
                dn[t][c] -= eps;
                let fd = (composite_loss(&up, &truth, 0.3, 0.7, 0.01).0.total
                    - composite_loss(&dn, &truth, 0.3, 0.7, 0.01).0.total)
                    / (2.0 * eps);
                assert!((fd - g[t][c]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn forcing_schedule() {
        assert_eq!(teacher_forcing_prob(0, 50), 1.0);
        assert_eq!(teacher_forcing_prob(50, 50), 0.0);
        assert_eq!(teacher_forcing_prob(25, 50), 0.5);
    }

    #[test]
    fn learning_rate_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert_eq!(cfg.learning_rate(9), 1e-3);
        assert_eq!(cfg.learning_rate(10), 5e-4);
        assert_eq!(cfg.learning_rate(25), 1e-3 * 0.25);
    }

    #[test]
    fn relative_term_ignores_small_truth_entries() {
        let pred = [[1.0, 2.0, 3.0]];
        let a = composite_loss(&pred, &[[0.5, 0.004, 3.5]], 0.5, 0.5, 0.01).0;
        let b = composite_loss(&pred, &[[0.5, -0.009, 3.5]], 0.5, 0.5, 0.01).0;
        assert_eq!(a.rel, b.rel);
    }
}
