//! The cross-attention GRU force estimator.
//!
//! Two GRU encoders summarise the teleoperator force history and the operator
//! position/velocity history. The last teleoperator state queries the operator
//! sequence through multi-head attention, and a two-layer ReLU head maps the
//! fused vector `[r_top; a]` to the next force sample. Inputs and outputs are
//! z-scored with statistics stored alongside the weights, so the public
//! interface speaks raw newtons and metres.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionCache, AttentionParams};
use crate::error::{Error, Result};
use crate::gru::{GruCache, GruParams};
use crate::math::fmt9;
use crate::tensor::Matrix;
use crate::traces::Trace;

pub const D_TOP: usize = 3;
pub const D_OP: usize = 6;
pub const CHECKPOINT_HEADER: &str = "xhap-ckpt v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// History length L in samples.
    pub history_len: usize,
    /// Latent width D.
    pub latent: usize,
    pub heads: usize,
    /// Width of the prediction head's hidden layer.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history_len: 64,
            latent: 128,
            heads: 8,
            hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.latent / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 {
            return Err(Error::invalid("model.history_len", "must be at least 1"));
        }
        if self.heads == 0 || self.latent == 0 || !self.latent.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "model.latent",
                format!("{} is not divisible into {} heads", self.latent, self.heads),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("model.hidden", "must be at least 1"));
        }
        Ok(())
    }
}

/// Two-layer feed-forward head: `W2 · ReLU(W1 z + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl HeadParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        HeadParams {
            w1: Matrix::zeros(hidden, input),
            b1: Matrix::zeros(hidden, 1),
            w2: Matrix::zeros(D_TOP, hidden),
            b2: Matrix::zeros(D_TOP, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        HeadParams {
            w1: Matrix::uniform(hidden, input, b1, rng),
            b1: Matrix::uniform(hidden, 1, b1, rng),
            w2: Matrix::uniform(D_TOP, hidden, b2, rng),
            b2: Matrix::uniform(D_TOP, 1, b2, rng),
        }
    }
}

/// Every trainable tensor of the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub gru_top: GruParams,
    pub gru_op: GruParams,
    pub attention: AttentionParams,
    pub head: HeadParams,
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        Params {
            gru_top: GruParams::zeros(D_TOP, config.latent),
            gru_op: GruParams::zeros(D_OP, config.latent),
            attention: AttentionParams::zeros(config.latent, config.heads),
            head: HeadParams::zeros(2 * config.latent, config.hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        Params {
            gru_top: GruParams::init(D_TOP, config.latent, rng),
            gru_op: GruParams::init(D_OP, config.latent, rng),
            attention: AttentionParams::init(config.latent, config.heads, rng),
            head: HeadParams::init(2 * config.latent, config.hidden, rng),
        }
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(16);
        for (n, m) in self.gru_top.tensors() {
            out.push((format!("gru_top.{n}"), m));
        }
        for (n, m) in self.gru_op.tensors() {
            out.push((format!("gru_op.{n}"), m));
        }
        for (n, m) in self.attention.tensors() {
            out.push((format!("attention.{n}"), m));
        }
        let h = &self.head;
        out.push(("head.w1".into(), &h.w1));
        out.push(("head.b1".into(), &h.b1));
        out.push(("head.w2".into(), &h.w2));
        out.push(("head.b2".into(), &h.b2));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(16);
        for (n, m) in self.gru_top.tensors_mut() {
            out.push((format!("gru_top.{n}"), m));
        }
        for (n, m) in self.gru_op.tensors_mut() {
            out.push((format!("gru_op.{n}"), m));
        }
        for (n, m) in self.attention.tensors_mut() {
            out.push((format!("attention.{n}"), m));
        }
        let h = &mut self.head;
        out.push(("head.w1".into(), &mut h.w1));
        out.push(("head.b1".into(), &mut h.b1));
        out.push(("head.w2".into(), &mut h.w2));
        out.push(("head.b2".into(), &mut h.b2));
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.tensors_mut() {
            m.scale(factor);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(n, _)| n)
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub force_mean: [f64; D_TOP],
    pub force_std: [f64; D_TOP],
    pub op_mean: [f64; D_OP],
    pub op_std: [f64; D_OP],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            force_mean: [0.0; D_TOP],
            force_std: [1.0; D_TOP],
            op_mean: [0.0; D_OP],
            op_std: [1.0; D_OP],
        }
    }
}

impl Normalization {
    /// Statistics over every sample of the given (training) traces. Channels
    /// with negligible spread keep unit scale.
    pub fn fit(traces: &[Trace]) -> Result<Self> {
        let n: usize = traces.iter().map(Trace::len).sum();
        if n == 0 {
            return Err(Error::invalid("traces", "cannot fit normalization on no samples"));
        }
        let mut fm = MeanVar::<D_TOP>::default();
        let mut om = MeanVar::<D_OP>::default();
        for s in traces.iter().flat_map(|t| &t.samples) {
            fm.push(&s.force);
            om.push(&s.operator());
        }
        let (force_mean, force_std) = fm.finish();
        let (op_mean, op_std) = om.finish();
        Ok(Normalization {
            force_mean,
            force_std,
            op_mean,
            op_std,
        })
    }

    pub fn force_in(&self, f: &[f64; D_TOP]) -> [f64; D_TOP] {
        std::array::from_fn(|c| (f[c] - self.force_mean[c]) / self.force_std[c])
    }

    pub fn force_out(&self, y: &[f64; D_TOP]) -> [f64; D_TOP] {
        std::array::from_fn(|c| y[c] * self.force_std[c] + self.force_mean[c])
    }

    pub fn op_in(&self, o: &[f64; D_OP]) -> [f64; D_OP] {
        std::array::from_fn(|c| (o[c] - self.op_mean[c]) / self.op_std[c])
    }
}

struct MeanVar<const N: usize> {
    n: f64,
    sum: [f64; N],
    sum_sq: [f64; N],
}

impl<const N: usize> Default for MeanVar<N> {
    fn default() -> Self {
        MeanVar {
            n: 0.0,
            sum: [0.0; N],
            sum_sq: [0.0; N],
        }
    }
}

impl<const N: usize> MeanVar<N> {
    fn push(&mut self, v: &[f64; N]) {
        self.n += 1.0;
        for c in 0..N {
            self.sum[c] += v[c];
            self.sum_sq[c] += v[c] * v[c];
        }
    }

    fn finish(&self) -> ([f64; N], [f64; N]) {
        let mean: [f64; N] = std::array::from_fn(|c| self.sum[c] / self.n);
        let std = std::array::from_fn(|c| {
            let var = (self.sum_sq[c] / self.n - mean[c] * mean[c]).max(0.0);
            let s = var.sqrt();
            if s > 1e-9 {
                s
            } else {
                1.0
            }
        });
        (mean, std)
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub top: GruCache,
    pub op: GruCache,
    pub attn: AttentionCache,
    fused: Vec<f64>,
    pre_relu: Vec<f64>,
    hidden: Vec<f64>,
    /// Normalized output.
    pub y: [f64; D_TOP],
}

#[derive(Debug, Clone, PartialEq)]
pub struct XhapModel {
    pub config: ModelConfig,
    pub params: Params,
    pub normalization: Normalization,
}

impl XhapModel {
    /// Fresh model with seeded uniform initialization and identity
    /// normalization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(XhapModel {
            config,
            params: Params::init(&config, &mut rng),
            normalization: Normalization::default(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Normalized input matrices for a window given in raw units.
    pub fn encode_inputs(&self, forces: &[[f64; 3]], ops: &[[f64; 6]]) -> (Matrix, Matrix) {
        let nm = &self.normalization;
        let top = forces.iter().flat_map(|f| nm.force_in(f)).collect();
        let op = ops.iter().flat_map(|o| nm.op_in(o)).collect();
        (
            Matrix::from_vec(forces.len(), D_TOP, top),
            Matrix::from_vec(ops.len(), D_OP, op),
        )
    }

    /// Forward pass on normalized inputs, keeping every activation.
    pub fn forward_cached(&self, x_top: Matrix, x_op: Matrix) -> StepCache {
        assert_eq!(x_top.rows(), x_op.rows(), "force and operator windows must align");
        let p = &self.params;
        let d = self.config.latent;
        let top = p.gru_top.forward(x_top);
        let op = p.gru_op.forward(x_op);
        let attn = p.attention.forward(top.last(), &op.h);

        let mut fused = Vec::with_capacity(2 * d);
        fused.extend_from_slice(top.last());
        fused.extend_from_slice(&attn.out);
        let (pre_relu, hidden, y) = self.head(&fused);
        StepCache {
            top,
            op,
            attn,
            fused,
            pre_relu,
            hidden,
            y,
        }
    }

    /// Accumulates parameter gradients for `d_y` (gradient with respect to
    /// the normalized output) and returns the gradient with respect to the
    /// normalized force window.
    pub fn backward(&self, cache: &StepCache, d_y: &[f64; D_TOP], grads: &mut Params) -> Matrix {
        let p = &self.params;
        let d = self.config.latent;
        let steps = cache.top.h.rows();

        grads.head.w2.add_outer(d_y, &cache.hidden);
        for (g, v) in grads.head.b2.as_mut_slice().iter_mut().zip(d_y) {
            *g += v;
        }
        let mut d_hidden = vec![0.0; cache.hidden.len()];
        p.head.w2.t_matvec_add(d_y, &mut d_hidden);
        for (dh, &u) in d_hidden.iter_mut().zip(&cache.pre_relu) {
            if u <= 0.0 {
                *dh = 0.0;
            }
        }
        grads.head.w1.add_outer(&d_hidden, &cache.fused);
        for (g, v) in grads.head.b1.as_mut_slice().iter_mut().zip(&d_hidden) {
            *g += v;
        }
        let mut d_fused = vec![0.0; 2 * d];
        p.head.w1.t_matvec_add(&d_hidden, &mut d_fused);

        let (d_query, d_seq) = p.attention.backward(
            &cache.attn,
            cache.top.last(),
            &cache.op.h,
            &d_fused[d..],
            &mut grads.attention,
        );
        p.gru_op.backward(&cache.op, &d_seq, &mut grads.gru_op, false);

        let mut d_top = Matrix::zeros(steps, d);
        let last = d_top.row_mut(steps - 1);
        for j in 0..d {
            last[j] = d_fused[j] + d_query[j];
        }
        p.gru_top
            .backward(&cache.top, &d_top, &mut grads.gru_top, true)
            .expect("input gradient requested")
    }

    /// One-step force estimate in newtons from raw-unit windows of equal length.
    pub fn predict(&self, forces: &[[f64; 3]], ops: &[[f64; 6]]) -> [f64; 3] {
        let (x_top, x_op) = self.encode_inputs(forces, ops);
        assert_eq!(x_top.rows(), x_op.rows(), "force and operator windows must align");
        let p = &self.params;
        let top = p.gru_top.forward(x_top);
        let op = p.gru_op.forward(x_op);
        let mut fused = top.last().to_vec();
        fused.extend(p.attention.apply(top.last(), &op.h));
        let (_, _, y) = self.head(&fused);
        self.normalization.force_out(&y)
    }

    /// Prediction head on `[r_top; a]`: pre-activation, hidden layer and the
    /// normalized output.
    fn head(&self, fused: &[f64]) -> (Vec<f64>, Vec<f64>, [f64; D_TOP]) {
        let h = &self.params.head;
        let mut pre_relu = h.b1.as_slice().to_vec();
        h.w1.matvec_add(fused, &mut pre_relu);
        let hidden: Vec<f64> = pre_relu.iter().map(|&u| u.max(0.0)).collect();
        let mut y = [0.0; D_TOP];
        y.copy_from_slice(h.b2.as_slice());
        h.w2.matvec_add(&hidden, &mut y);
        (pre_relu, hidden, y)
    }

    /// Autoregressive rollout over `horizon` steps.
    ///
    /// `forces` and `ops` are the aligned sliding windows; after each
    /// prediction the estimate is appended to `forces` and the next vector of
    /// `op_stream` to `ops`, dropping the oldest rows. The operator stream
    /// must provide at least `horizon − 1` vectors.
    pub fn rollout(
        &self,
        forces: &mut Vec<[f64; 3]>,
        ops: &mut Vec<[f64; 6]>,
        op_stream: &[[f64; 6]],
        horizon: usize,
    ) -> Result<Vec<[f64; 3]>> {
        if horizon == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        if forces.len() != ops.len() || forces.is_empty() {
            return Err(Error::Shape {
                context: "rollout windows",
                expected: format!("{} aligned rows", forces.len()),
                actual: format!("{} operator rows", ops.len()),
            });
        }
        if op_stream.len() + 1 < horizon {
            return Err(Error::Shape {
                context: "rollout operator stream",
                expected: format!("at least {} vectors", horizon - 1),
                actual: op_stream.len().to_string(),
            });
        }
        let mut out = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let y = self.predict(forces, ops);
            out.push(y);
            forces.remove(0);
            forces.push(y);
            if k + 1 < horizon {
                ops.remove(0);
                ops.push(op_stream[k]);
            }
        }
        Ok(out)
    }

    /// Text checkpoint: header, config line, normalization and weights, one
    /// tensor per line as `name RxC values…` with 9 significant digits.
    pub fn to_checkpoint_string(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_HEADER}");
        let _ = writeln!(
            s,
            "config history_len={} latent={} heads={} hidden={}",
            c.history_len, c.latent, c.heads, c.hidden
        );
        let nm = &self.normalization;
        write_tensor(&mut s, "norm.force_mean", 3, 1, &nm.force_mean);
        write_tensor(&mut s, "norm.force_std", 3, 1, &nm.force_std);
        write_tensor(&mut s, "norm.op_mean", 6, 1, &nm.op_mean);
        write_tensor(&mut s, "norm.op_std", 6, 1, &nm.op_std);
        for (name, m) in self.params.tensors() {
            write_tensor(&mut s, &name, m.rows(), m.cols(), m.as_slice());
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, path)
    }

    /// Parses a checkpoint; `origin` is only used in error messages.
    pub fn from_checkpoint_str(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(err(1, format!("expected header `{CHECKPOINT_HEADER}`"))),
        }
        let (cl, config_line) = lines.next().ok_or_else(|| err(2, "missing config line".into()))?;
        let config = parse_config_line(config_line).map_err(|m| err(cl, m))?;
        config.validate().map_err(|e| err(cl, e.to_string()))?;

        let mut params = Params::zeros(&config);
        let mut norm = Normalization::default();
        let mut seen = std::collections::HashSet::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default().to_string();
            let shape = parts.next().ok_or_else(|| err(ln, format!("{name}: missing shape")))?;
            let (rows, cols) = parse_shape(shape).ok_or_else(|| err(ln, format!("{name}: bad shape `{shape}`")))?;
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(ln, format!("{name}: {e}")))?;
            if values.len() != rows * cols {
                return Err(err(ln, format!("{name}: expected {} values, found {}", rows * cols, values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(ln, format!("{name}: non-finite value")));
            }
            if !seen.insert(name.clone()) {
                return Err(err(ln, format!("duplicate tensor `{name}`")));
            }
            let target: Option<&mut [f64]> = match name.as_str() {
                "norm.force_mean" => Some(&mut norm.force_mean),
                "norm.force_std" => Some(&mut norm.force_std),
                "norm.op_mean" => Some(&mut norm.op_mean),
                "norm.op_std" => Some(&mut norm.op_std),
                _ => None,
            };
            if let Some(t) = target {
                if t.len() != values.len() || cols != 1 {
                    return Err(err(ln, format!("{name}: expected shape {}x1", t.len())));
                }
                t.copy_from_slice(&values);
                continue;
            }
            let mut tensors = params.tensors_mut();
            let (_, m) = tensors
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| err(ln, format!("unknown tensor `{name}`")))?;
            if (m.rows(), m.cols()) != (rows, cols) {
                return Err(err(ln, format!("{name}: expected shape {}, found {shape}", m.shape_string())));
            }
            m.as_mut_slice().copy_from_slice(&values);
        }
        let expected = params.tensors().len() + 4;
        if seen.len() != expected {
            let missing: Vec<String> = params
                .tensors()
                .into_iter()
                .map(|(n, _)| n)
                .chain(["norm.force_mean", "norm.force_std", "norm.op_mean", "norm.op_std"].map(String::from))
                .filter(|n| !seen.contains(n))
                .collect();
            return Err(err(text.lines().count(), format!("missing tensors: {}", missing.join(", "))));
        }
        Ok(XhapModel {
            config,
            params,
            normalization: norm,
        })
    }
}

fn write_tensor(s: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    let _ = write!(s, "{name} {rows}x{cols}");
    for v in values {
        s.push(' ');
        s.push_str(&fmt9(*v));
    }
    s.push('\n');
}

fn parse_shape(s: &str) -> Option<(usize, usize)> {
    let (r, c) = s.split_once('x')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

fn parse_config_line(line: &str) -> std::result::Result<ModelConfig, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("config") {
        return Err("expected `config` line".into());
    }
    let mut c = ModelConfig::default();
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad config entry `{kv}`"))?;
        let v: usize = v.parse().map_err(|_| format!("bad value for {k}: `{v}`"))?;
        match k {
            "history_len" => c.history_len = v,
            "latent" => c.latent = v,
            "heads" => c.heads = v,
            "hidden" => c.hidden = v,
            _ => return Err(format!("unknown config entry `{k}`")),
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn tiny(latent: usize, heads: usize, l: usize, seed: u64) -> XhapModel {
        let config = ModelConfig {
            history_len: l,
            latent,
            heads,
            hidden: 5,
        };
        let mut m = XhapModel::new(config, seed).unwrap();
        m.normalization.force_mean = [0.1, -0.2, 0.3];
        m.normalization.force_std = [2.0, 0.5, 1.5];
        m
    }

    fn window(l: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 6]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..l).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let o = (0..l).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        (f, o)
    }

    #[test]
    fn default_parameter_count_is_about_178k() {
        let m = XhapModel::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.param_count(), 177_155);
        assert!((m.param_count() as f64 - 178_000.0).abs() <= 0.05 * 178_000.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny(8, 2, 6, 3);
        let (f, o) = window(6, 4);
        let a = m.predict(&f, &o);
        let b = m.predict(&f, &o);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    /// Scalar re-derivation of the whole forward pass with explicit indices
    /// and no shared kernels.
    fn scalar_forward(m: &XhapModel, f: &[[f64; 3]], o: &[[f64; 6]]) -> [f64; 3] {
        let d = m.config.latent;
        let p = &m.params;
        let gru = |g: &GruParams, xs: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let w = |mat: &Matrix, r: usize, c: usize| mat.as_slice()[r * mat.cols() + c];
            let mut h = vec![0.0; d];
            let mut out = Vec::new();
            for x in xs {
                let mut nh = vec![0.0; d];
                for j in 0..d {
                    let lin = |row: usize, with_h: bool| -> (f64, f64) {
                        let mut a = w(&g.b_ih, row, 0);
                        for (c, xv) in x.iter().enumerate() {
                            a += w(&g.w_ih, row, c) * xv;
                        }
                        let mut b = w(&g.b_hh, row, 0);
                        if with_h {
                            for (c, hv) in h.iter().enumerate() {
                                b += w(&g.w_hh, row, c) * hv;
                            }
                        }
                        (a, b)
                    };
                    let (zi, zh) = lin(j, true);
                    let (ri, rh) = lin(d + j, true);
                    let (ni, nh_) = lin(2 * d + j, true);
                    let z = sigmoid(zi + zh);
                    let r = sigmoid(ri + rh);
                    let n = (ni + r * nh_).tanh();
                    nh[j] = (1.0 - z) * n + z * h[j];
                }
                h = nh;
                out.push(h.clone());
            }
            out
        };
        let nm = &m.normalization;
        let xt = f.iter().map(|v| nm.force_in(v).to_vec()).collect();
        let xo = o.iter().map(|v| nm.op_in(v).to_vec()).collect();
        let ht = gru(&p.gru_top, xt);
        let ho = gru(&p.gru_op, xo);
        let r = ht.last().unwrap().clone();
        let mv = |mat: &Matrix, v: &[f64]| -> Vec<f64> {
            (0..mat.rows())
                .map(|i| (0..mat.cols()).map(|j| mat.get(i, j) * v[j]).sum())
                .collect()
        };
        let q = mv(&p.attention.w_q, &r);
        let ks: Vec<Vec<f64>> = ho.iter().map(|s| mv(&p.attention.w_k, s)).collect();
        let vs: Vec<Vec<f64>> = ho.iter().map(|s| mv(&p.attention.w_v, s)).collect();
        let dh = m.config.head_dim();
        let mut cat = vec![0.0; d];
        for i in 0..m.config.heads {
            let sc: Vec<f64> = ks
                .iter()
                .map(|k| (0..dh).map(|c| k[i * dh + c] * q[i * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = sc.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for (t, v) in vs.iter().enumerate() {
                for c in 0..dh {
                    cat[i * dh + c] += e[t] / tot * v[i * dh + c];
                }
            }
        }
        let a = mv(&p.attention.w_o, &cat);
        let z: Vec<f64> = r.iter().chain(&a).copied().collect();
        let u = mv(&p.head.w1, &z);
        let hid: Vec<f64> = u.iter().enumerate().map(|(i, v)| (v + p.head.b1.get(i, 0)).max(0.0)).collect();
        let y = mv(&p.head.w2, &hid);
        nm.force_out(&std::array::from_fn(|c| y[c] + p.head.b2.get(c, 0)))
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        let m = tiny(4, 2, 3, 7);
        let (f, o) = window(3, 8);
        let fast = m.predict(&f, &o);
        let slow = scalar_forward(&m, &f, &o);
        for c in 0..3 {
            assert!((fast[c] - slow[c]).abs() < 1e-10, "{fast:?} vs {slow:?}");
        }
    }

    #[test]
    fn rollout_of_one_step_is_one_forward() {
        let m = tiny(8, 2, 5, 9);
        let (f, o) = window(5, 10);
        let direct = m.predict(&f, &o);
        let (mut fb, mut ob) = (f.clone(), o.clone());
        let out = m.rollout(&mut fb, &mut ob, &[], 1).unwrap();
        assert_eq!(out, vec![direct]);
    }

    #[test]
    fn rollout_feeds_back_and_is_causal() {
        let m = tiny(8, 2, 5, 11);
        let (f, o) = window(5, 12);
        let (_, stream) = window(4, 13);
        let (mut f3, mut o3) = (f.clone(), o.clone());
        let three = m.rollout(&mut f3, &mut o3, &stream, 3).unwrap();
        let (mut f2, mut o2) = (f.clone(), o.clone());
        let two = m.rollout(&mut f2, &mut o2, &stream, 2).unwrap();
        assert_eq!(&three[..2], &two[..]);
        assert_eq!(&f3[2..], &three[..]);
        assert_eq!(f3.len(), 5);
        assert!(m.rollout(&mut f.clone(), &mut o.clone(), &stream[..1], 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_stable() {
        let m = tiny(8, 2, 4, 14);
        let text = m.to_checkpoint_string();
        let back = XhapModel::from_checkpoint_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back.config, m.config);
        // values are rounded to 9 significant digits on the first write only
        assert_eq!(back.to_checkpoint_string(), text);
        for ((_, a), (_, b)) in back.params.tensors().into_iter().zip(m.params.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        let m = tiny(8, 2, 4, 15);
        let text = m.to_checkpoint_string();
        let p = Path::new("ckpt");
        assert!(XhapModel::from_checkpoint_str("nonsense\n", p).is_err());
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        let e = XhapModel::from_checkpoint_str(&truncated, p).unwrap_err();
        assert!(e.to_string().contains("missing tensors"), "{e}");
        let renamed = text.replace("head.b2", "head.bogus");
        assert!(XhapModel::from_checkpoint_str(&renamed, p).unwrap_err().to_string().contains("unknown tensor"));
    }
}
