//! Toy-scale training of the two prediction nets: the noise head
//! `eps_theta(x, t)` and the scalar squared-norm head `t_theta(x, t)`.
//!
//! The nets are small tanh MLPs with manual backpropagation and a
//! decoupled-weight-decay Adam optimizer, written directly against
//! `ndarray` so the crate carries no autodiff dependency. Inputs are the
//! state `x` rescaled by `1/sqrt(sigma_t^2 + 1)` (keeping the first layer
//! in range across the wide VE/EDM noise spans) concatenated with eight
//! sinusoidal time features. Training is single-threaded and deterministic
//! per seed; evaluation of a trained net is pure and thread-safe.

use crate::access::{df_tm_trace, trace_via_vjp, ScoreProvider, TraceProvider};
use crate::error::{DfError, Result};
use crate::oracle::{fisher_trace, DiracDataset};
use crate::schedule::NoiseSchedule;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

/// Number of sinusoidal time features appended to the state input.
pub const N_TIME_FEATURES: usize = 8;

/// Sinusoidal embedding of the diffusion time: `sin/cos(pi 2^j t)` for
/// `j = 0..4`.
pub fn time_features(t: f64) -> [f64; N_TIME_FEATURES] {
    let mut out = [0.0; N_TIME_FEATURES];
    for j in 0..N_TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * (1 << j) as f64;
        out[2 * j] = (w * t).sin();
        out[2 * j + 1] = (w * t).cos();
    }
    out
}

/// One dense layer, also reused as the holder for its gradient and for the
/// optimizer moments.
#[derive(Debug, Clone)]
pub struct Layer {
    /// Weight matrix, `n_out x n_in`.
    pub w: Array2<f64>,
    /// Bias vector, `n_out`.
    pub b: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// A fully-connected tanh MLP with a linear output layer.
#[derive(Debug, Clone)]
pub struct MlpNet {
    /// Dense layers from input to output; all but the last are followed by
    /// tanh.
    pub layers: Vec<Layer>,
}

impl MlpNet {
    /// Xavier-uniform initialization with the given layer widths.
    pub fn init(n_in: usize, hidden: &[usize], n_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_in == 0 || n_out == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(DfError::InvalidArgument(
                "mlp layer widths must be positive".into(),
            ));
        }
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-limit..limit)
            });
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(MlpNet { layers })
    }

    /// Convenience constructor seeding its own generator.
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(n_in, hidden, n_out, &mut rng)
    }

    /// Input width of the first layer.
    pub fn n_in(&self) -> usize {
        self.layers[0].w.ncols()
    }

    /// Output width of the last layer.
    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].w.nrows()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass for a batch, one row per sample.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.activations(input)?.pop().expect("nonempty"))
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &Array1<f64>) -> Result<Array1<f64>> {
        let batch = input
            .view()
            .insert_axis(Axis(0))
            .to_owned();
        let out = self.forward_batch(&batch)?;
        Ok(out.row(0).to_owned())
    }

    /// All layer activations including the input; the last entry is the
    /// network output.
    fn activations(&self, input: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if input.ncols() != self.n_in() {
            return Err(DfError::DimensionMismatch {
                context: "mlp input",
                expected: self.n_in(),
                got: input.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w.t());
            for mut row in z.rows_mut() {
                row += &layer.b;
            }
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Weighted mean-squared-error loss and its parameter gradients.
    ///
    /// The loss is `weight / B * sum_rows |out - target|^2`; gradients come
    /// from a manual reverse pass through the tanh stack.
    pub fn backprop_mse(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
        weight: f64,
    ) -> Result<(f64, Vec<Layer>)> {
        let weights = Array1::from_elem(input.nrows(), weight);
        self.backprop_mse_rows(input, target, &weights)
    }

    /// As [`MlpNet::backprop_mse`] but with a per-row loss weight, for
    /// time-dependent `lambda_t` policies:
    /// `1/B * sum_rows w_row |out - target|^2`.
    pub fn backprop_mse_rows(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
        row_weights: &Array1<f64>,
    ) -> Result<(f64, Vec<Layer>)> {
        if target.ncols() != self.n_out()
            || target.nrows() != input.nrows()
            || row_weights.len() != input.nrows()
        {
            return Err(DfError::DimensionMismatch {
                context: "mlp target",
                expected: self.n_out() * input.nrows(),
                got: target.ncols() * target.nrows(),
            });
        }
        let acts = self.activations(input)?;
        let batch = input.nrows() as f64;
        let resid = &acts[acts.len() - 1] - target;
        let loss = resid
            .rows()
            .into_iter()
            .zip(row_weights.iter())
            .map(|(r, w)| w / batch * r.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>();

        let n_layers = self.layers.len();
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        // d_out holds dL/dZ of the layer being processed.
        let mut d_out = resid;
        for (mut row, w) in d_out.rows_mut().into_iter().zip(row_weights.iter()) {
            row *= 2.0 * w / batch;
        }
        for l in (0..n_layers).rev() {
            grads[l].w = d_out.t().dot(&acts[l]);
            grads[l].b = d_out.sum_axis(Axis(0));
            if l > 0 {
                // Through the tanh that produced acts[l].
                let mut d_in = d_out.dot(&self.layers[l].w);
                d_in.zip_mut_with(&acts[l], |g, a| *g *= 1.0 - a * a);
                d_out = d_in;
            }
        }
        Ok((loss, grads))
    }

    /// Serialize to a JSON shape header line followed by the raw
    /// little-endian f64 parameters (weights row-major, then biases, per
    /// layer).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let shapes: Vec<[usize; 2]> = self
            .layers
            .iter()
            .map(|l| [l.w.nrows(), l.w.ncols()])
            .collect();
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &CheckpointHeader { shapes })
            .map_err(|e| DfError::Parse {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        out.write_all(b"\n")?;
        for layer in &self.layers {
            for v in layer.w.iter().chain(layer.b.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`MlpNet::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let parse_err = |reason: String| DfError::Parse {
            path: path.display().to_string(),
            reason,
        };
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header: CheckpointHeader = serde_json::from_str(header.trim_end())
            .map_err(|e| parse_err(format!("bad checkpoint header: {e}")))?;
        if header.shapes.is_empty() {
            return Err(parse_err("checkpoint has no layers".into()));
        }
        for pair in header.shapes.windows(2) {
            if pair[1][1] != pair[0][0] {
                return Err(parse_err("inconsistent layer shapes".into()));
            }
        }
        let mut layers = Vec::with_capacity(header.shapes.len());
        let mut buf = [0u8; 8];
        let mut next = |reader: &mut BufReader<std::fs::File>| -> Result<f64> {
            reader
                .read_exact(&mut buf)
                .map_err(|_| parse_err("checkpoint body shorter than its header claims".into()))?;
            Ok(f64::from_le_bytes(buf))
        };
        for [n_out, n_in] in header.shapes {
            if n_out == 0 || n_in == 0 {
                return Err(parse_err("zero layer width".into()));
            }
            let mut w = Array2::zeros((n_out, n_in));
            for v in w.iter_mut() {
                *v = next(&mut reader)?;
            }
            let mut b = Array1::zeros(n_out);
            for v in b.iter_mut() {
                *v = next(&mut reader)?;
            }
            layers.push(Layer { w, b });
        }
        let mut rest = [0u8; 1];
        if reader.read(&mut rest)? != 0 {
            return Err(parse_err("checkpoint body longer than its header claims".into()));
        }
        Ok(MlpNet { layers })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    shapes: Vec<[usize; 2]>,
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamW {
    pub fn new(net: &MlpNet, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: net.layers.iter().map(Layer::zeros_like).collect(),
            v: net.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    /// One optimizer step in place.
    pub fn apply(&mut self, net: &mut MlpNet, grads: &[Layer]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (l, grad) in grads.iter().enumerate() {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            };
            let layer = &mut net.layers[l];
            for ((p, &g), (m, v)) in layer
                .w
                .iter_mut()
                .zip(grad.w.iter())
                .zip(self.m[l].w.iter_mut().zip(self.v[l].w.iter_mut()))
            {
                update(p, g, m, v);
            }
            for ((p, &g), (m, v)) in layer
                .b
                .iter_mut()
                .zip(grad.b.iter())
                .zip(self.m[l].b.iter_mut().zip(self.v[l].b.iter_mut()))
            {
                update(p, g, m, v);
            }
        }
    }
}

/// Per-sample loss weight `lambda_t` as a function of the draw time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    /// A constant multiplier; the default is 1.
    Constant(f64),
    /// `sigma_t^2`, the classical score-matching reweighting.
    SigmaSquared,
}

impl LossWeight {
    pub fn weight(&self, sched: &NoiseSchedule, t: f64) -> f64 {
        match self {
            LossWeight::Constant(c) => *c,
            LossWeight::SigmaSquared => {
                let s = sched.sigma_unchecked(t);
                s * s
            }
        }
    }
}

/// Minibatch training configuration shared by both heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub loss_weight: LossWeight,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            n_steps: 20_000,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            hidden: vec![64, 64, 64],
            loss_weight: LossWeight::Constant(1.0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_steps == 0 {
            return Err(DfError::InvalidArgument(
                "batch_size and n_steps must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DfError::InvalidArgument(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(DfError::InvalidArgument(
                "weight_decay must be non-negative and finite".into(),
            ));
        }
        Ok(())
    }
}

/// A trained net with its per-step loss curve.
pub struct TrainOutcome {
    pub net: MlpNet,
    pub loss_history: Vec<f64>,
}

/// Sample `n` points uniformly from the black squares of a 4x4
/// checkerboard tiling of `[-2, 2]^2`.
pub fn gen_chessboard(n: usize, seed: u64) -> Result<DiracDataset> {
    if n == 0 {
        return Err(DfError::InvalidArgument(
            "chessboard sample count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        // Black cells are those with even i+j; pick one of the 8 uniformly.
        let i = rng.random_range(0..4u32);
        let j = 2 * rng.random_range(0..2u32) + (i % 2);
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        rows.push(vec![
            -2.0 + i as f64 + u,
            -2.0 + j as f64 + v,
        ]);
    }
    DiracDataset::from_rows(&rows)
}

/// Network input: the state rescaled by `1/sqrt(sigma_t^2 + 1)` followed by
/// the sinusoidal time features.
pub fn assemble_input(sched: &NoiseSchedule, x: &Array1<f64>, t: f64) -> Array1<f64> {
    let sigma = sched.sigma_unchecked(t);
    let scale = 1.0 / (sigma * sigma + 1.0).sqrt();
    let feats = time_features(t);
    let mut out = Array1::zeros(x.len() + N_TIME_FEATURES);
    for (i, v) in x.iter().enumerate() {
        out[i] = v * scale;
    }
    for (j, f) in feats.iter().enumerate() {
        out[x.len() + j] = *f;
    }
    out
}

enum TrainTarget {
    Eps,
    SquaredNorm,
}

fn train_inner(
    ds: &DiracDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    target_kind: TrainTarget,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = ds.dim();
    let n_out = match target_kind {
        TrainTarget::Eps => d,
        TrainTarget::SquaredNorm => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = MlpNet::init(d + N_TIME_FEATURES, &cfg.hidden, n_out, &mut rng)?;
    let mut opt = AdamW::new(&net, cfg.learning_rate, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.n_steps);

    let mut input = Array2::zeros((cfg.batch_size, d + N_TIME_FEATURES));
    let mut target = Array2::zeros((cfg.batch_size, n_out));
    let mut weights = Array1::zeros(cfg.batch_size);
    for step in 0..cfg.n_steps {
        // One draw per row: data point, time, noise.
        for b in 0..cfg.batch_size {
            let t: f64 = rng.random_range(sched.t_min..sched.t_max);
            let alpha = sched.alpha_unchecked(t);
            let sigma = sched.sigma_unchecked(t);
            let scale = 1.0 / (sigma * sigma + 1.0).sqrt();
            let y = ds.point(rng.random_range(0..ds.n()));
            let mut sq = 0.0;
            for i in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                let x_t = alpha * y[i] + sigma * eps;
                input[[b, i]] = x_t * scale;
                if let TrainTarget::Eps = target_kind {
                    target[[b, i]] = eps;
                }
                sq += y[i] * y[i];
            }
            for (j, f) in time_features(t).iter().enumerate() {
                input[[b, d + j]] = *f;
            }
            if let TrainTarget::SquaredNorm = target_kind {
                target[[b, 0]] = sq / d as f64;
            }
            weights[b] = cfg.loss_weight.weight(sched, t);
        }
        let (loss, grads) = net.backprop_mse_rows(&input, &target, &weights)?;
        if !loss.is_finite() {
            return Err(DfError::Training(format!(
                "loss diverged to {loss} at step {step}"
            )));
        }
        opt.apply(&mut net, &grads);
        history.push(loss);
    }
    Ok(TrainOutcome {
        net,
        loss_history: history,
    })
}

/// Train the noise head by minimizing
/// `E lambda_t |eps - eps_theta(alpha_t y + sigma_t eps, t)|^2` with
/// `t ~ U[t_min, t_max]`, `eps ~ N(0, I)`, `y` drawn from the dataset.
pub fn train_eps(ds: &DiracDataset, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_inner(ds, sched, cfg, TrainTarget::Eps)
}

/// Train the scalar head toward the squared-norm target `|y|^2 / d` of the
/// clean sample behind each diffused draw.
pub fn train_tm(ds: &DiracDataset, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_inner(ds, sched, cfg, TrainTarget::SquaredNorm)
}

/// Noise prediction by a trained net. Jacobian probes use plain central
/// finite differences with a fixed step of 1e-4, the honest stand-in for
/// autodiff at this scale.
pub struct MlpScoreProvider<'a> {
    net: &'a MlpNet,
    sched: NoiseSchedule,
}

impl<'a> MlpScoreProvider<'a> {
    pub fn new(net: &'a MlpNet, sched: NoiseSchedule) -> Result<Self> {
        if net.n_in() <= N_TIME_FEATURES || net.n_out() != net.n_in() - N_TIME_FEATURES {
            return Err(DfError::InvalidArgument(
                "eps net must map d state dims plus time features to d outputs".into(),
            ));
        }
        Ok(MlpScoreProvider { net, sched })
    }

    fn check(&self, x: &Array1<f64>, t: f64) -> Result<()> {
        self.sched.check_time(t)?;
        let d = self.net.n_in() - N_TIME_FEATURES;
        if x.len() != d {
            return Err(DfError::DimensionMismatch {
                context: "eps net input",
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }
}

const NET_FD_STEP: f64 = 1e-4;

impl ScoreProvider for MlpScoreProvider<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn eps(&self, x: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        self.check(x, t)?;
        self.net.forward(&assemble_input(&self.sched, x, t))
    }

    fn eps_jvp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(Array1::zeros(x.len()));
        }
        let h = NET_FD_STEP;
        let dir = v / norm;
        let ep = self.eps(&(x + &(h * &dir)), t)?;
        let em = self.eps(&(x - &(h * &dir)), t)?;
        Ok((ep - em) * (norm / (2.0 * h)))
    }

    fn eps_vjp(&self, x: &Array1<f64>, t: f64, v: &Array1<f64>) -> Result<Array1<f64>> {
        let h = NET_FD_STEP;
        let d = x.len();
        let mut out = Array1::zeros(d);
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..d {
            xp[i] += h;
            xm[i] -= h;
            let ep = self.eps(&xp, t)?;
            let em = self.eps(&xm, t)?;
            let dp: f64 = ep.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let dm: f64 = em.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            out[i] = (dp - dm) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        Ok(out)
    }

    fn eps_jac_diag_sum(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        let h = NET_FD_STEP;
        let mut acc = 0.0;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..x.len() {
            xp[i] += h;
            xm[i] -= h;
            let ep = self.eps(&xp, t)?;
            let em = self.eps(&xm, t)?;
            acc += (ep[i] - em[i]) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        Ok(acc)
    }
}

/// Squared-norm prediction by a trained scalar net.
pub struct MlpTraceProvider<'a> {
    net: &'a MlpNet,
    sched: NoiseSchedule,
}

impl<'a> MlpTraceProvider<'a> {
    pub fn new(net: &'a MlpNet, sched: NoiseSchedule) -> Result<Self> {
        if net.n_in() <= N_TIME_FEATURES || net.n_out() != 1 {
            return Err(DfError::InvalidArgument(
                "squared-norm net must map d state dims plus time features to one output".into(),
            ));
        }
        Ok(MlpTraceProvider { net, sched })
    }
}

impl TraceProvider for MlpTraceProvider<'_> {
    fn t_pred(&self, x: &Array1<f64>, t: f64) -> Result<f64> {
        self.sched.check_time(t)?;
        let d = self.net.n_in() - N_TIME_FEATURES;
        if x.len() != d {
            return Err(DfError::DimensionMismatch {
                context: "squared-norm net input",
                expected: d,
                got: x.len(),
            });
        }
        Ok(self.net.forward(&assemble_input(&self.sched, x, t))?[0])
    }
}

/// One row of the trace-error table.
#[derive(Debug, Clone, Serialize)]
pub struct TraceErrorRow {
    pub t: f64,
    /// Aggregate relative error of the finite-difference VJP trace on the
    /// eps net.
    pub vjp_rel_err: f64,
    /// Aggregate relative error of the two-net surrogate trace.
    pub df_tm_rel_err: f64,
}

/// Relative trace errors of the VJP route and the two-net surrogate against
/// the exact dataset trace over `n_eval_points` diffused draws per grid
/// time.
///
/// Each row reports the aggregate ratio `sum |est - exact| / sum |exact|`
/// rather than a mean of per-point ratios: on flat regions of the density
/// the exact trace passes through zero, where a per-point ratio is
/// unbounded no matter how accurate the estimator is.
pub fn eval_trace_table(
    eps_net: &MlpNet,
    tm_net: &MlpNet,
    ds: &DiracDataset,
    sched: &NoiseSchedule,
    t_grid: &[f64],
    n_eval_points: usize,
    seed: u64,
) -> Result<Vec<TraceErrorRow>> {
    if n_eval_points == 0 {
        return Err(DfError::InvalidArgument(
            "trace table needs at least one evaluation point".into(),
        ));
    }
    let sp = MlpScoreProvider::new(eps_net, *sched)?;
    let tp = MlpTraceProvider::new(tm_net, *sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        sched.check_time(t)?;
        let alpha = sched.alpha_unchecked(t);
        let sigma = sched.sigma_unchecked(t);
        // Diffused evaluation points, drawn sequentially so the table is
        // deterministic, then scored in parallel against immutable nets.
        let points: Vec<Array1<f64>> = (0..n_eval_points)
            .map(|_| {
                let y = ds.point(rng.random_range(0..ds.n()));
                y.iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        alpha * v + sigma * z
                    })
                    .collect()
            })
            .collect();
        let errs: Vec<(f64, f64, f64)> = points
            .par_iter()
            .map(|x| -> Result<(f64, f64, f64)> {
                let exact = fisher_trace(ds, sched, x, t)?;
                let vjp = trace_via_vjp(&sp, x, t)?;
                let tm = df_tm_trace(&tp, &sp, x, t)?;
                Ok(((vjp - exact).abs(), (tm - exact).abs(), exact.abs()))
            })
            .collect::<Result<_>>()?;
        let denom = errs
            .iter()
            .map(|e| e.2)
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        rows.push(TraceErrorRow {
            t,
            vjp_rel_err: errs.iter().map(|e| e.0).sum::<f64>() / denom,
            df_tm_rel_err: errs.iter().map(|e| e.1).sum::<f64>() / denom,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    fn quick_cfg(seed: u64, n_steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            n_steps,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed,
            hidden: vec![16, 16],
            loss_weight: LossWeight::Constant(1.0),
        }
    }

    #[test]
    fn time_features_are_bounded_and_start_at_cosine_one() {
        let f = time_features(0.0);
        for j in 0..4 {
            assert_eq!(f[2 * j], 0.0);
            assert_eq!(f[2 * j + 1], 1.0);
        }
        let g = time_features(0.73);
        assert!(g.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(f, g);
    }

    #[test]
    fn backprop_matches_finite_differences_on_a_2_4_1_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = MlpNet::init(2, &[4], 1, &mut rng).unwrap();
        let input = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
        let (_, grads) = net.backprop_mse(&input, &target, 1.0).unwrap();

        let h = 1e-5;
        let mut check = |l: usize, idx: (usize, usize), is_bias: bool, got: f64| {
            let read = |net: &MlpNet| -> f64 {
                net.backprop_mse(&input, &target, 1.0).unwrap().0
            };
            let orig = if is_bias {
                net.layers[l].b[idx.0]
            } else {
                net.layers[l].w[idx]
            };
            let set = |net: &mut MlpNet, v: f64| {
                if is_bias {
                    net.layers[l].b[idx.0] = v;
                } else {
                    net.layers[l].w[idx] = v;
                }
            };
            set(&mut net, orig + h);
            let lp = read(&net);
            set(&mut net, orig - h);
            let lm = read(&net);
            set(&mut net, orig);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (got - fd).abs() / fd.abs().max(got.abs()).max(1e-12);
            assert!(
                rel < 1e-4,
                "layer {l} {} {:?}: backprop {got} vs fd {fd} (rel {rel})",
                if is_bias { "bias" } else { "weight" },
                idx
            );
        };
        for l in 0..2 {
            let (rows, cols) = (grads[l].w.nrows(), grads[l].w.ncols());
            for r in 0..rows {
                for c in 0..cols {
                    check(l, (r, c), false, grads[l].w[[r, c]]);
                }
            }
            for r in 0..grads[l].b.len() {
                check(l, (r, 0), true, grads[l].b[r]);
            }
        }
    }

    #[test]
    fn optimizer_ignores_zero_gradients_without_weight_decay() {
        let net0 = MlpNet::new(3, &[5], 2, 42).unwrap();
        let mut net = net0.clone();
        let zeros: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        let mut opt = AdamW::new(&net, 1e-2, 0.0);
        for _ in 0..3 {
            opt.apply(&mut net, &zeros);
        }
        for (a, b) in net0.layers.iter().zip(net.layers.iter()) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn chessboard_covers_black_squares_uniformly() {
        let n = 2000;
        let ds = gen_chessboard(n, 5).unwrap();
        assert_eq!(ds.n(), n);
        let mut counts = [0usize; 8];
        for k in 0..n {
            let p = ds.point(k);
            assert!(p.iter().all(|v| (-2.0..2.0).contains(v)), "outside the board");
            let i = (p[0] + 2.0).floor() as i64;
            let j = (p[1] + 2.0).floor() as i64;
            assert_eq!((i + j) % 2, 0, "point {p} lies on a white square");
            // Black squares enumerate as (i, j/2).
            counts[(i * 2 + j / 2) as usize] += 1;
        }
        // Multinomial 3-sigma band around n/8.
        let expect = n as f64 / 8.0;
        let sd = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sd,
                "square count {c} outside 3 sigma of {expect}"
            );
        }
    }

    #[test]
    fn eps_training_learns_the_single_point_optimum() {
        let ds = DiracDataset::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let sched = NoiseSchedule::ve_default();
        let mut cfg = quick_cfg(7, 6000);
        cfg.hidden = vec![32, 32];
        let out = train_eps(&ds, &sched, &cfg).unwrap();

        // Smoothed loss decays (window 100).
        let sm = |r: std::ops::Range<usize>| -> f64 {
            out.loss_history[r.clone()].iter().sum::<f64>() / r.len() as f64
        };
        let early = sm(0..100);
        let late = sm(out.loss_history.len() - 100..out.loss_history.len());
        assert!(late < early, "smoothed loss rose: {early} -> {late}");

        // Held-out batch beats the predict-zero baseline E|eps|^2 = d.
        let sp = MlpScoreProvider::new(&out.net, sched).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut held_out = 0.0;
        let m = 256;
        for _ in 0..m {
            let t: f64 = rng.random_range(sched.t_min..sched.t_max);
            let alpha = sched.alpha_unchecked(t);
            let sigma = sched.sigma_unchecked(t);
            let mut x = arr1(&[0.0, 0.0]);
            let mut eps = arr1(&[0.0, 0.0]);
            for i in 0..2 {
                eps[i] = rng.sample::<f64, _>(StandardNormal);
                x[i] = alpha * ds.point(0)[i] + sigma * eps[i];
            }
            let pred = sp.eps(&x, t).unwrap();
            held_out += (&pred - &eps).iter().map(|e| e * e).sum::<f64>();
        }
        held_out /= m as f64;
        assert!(held_out < 2.0, "held-out loss {held_out} not below baseline d=2");

        // The optimum is eps*(x, t) = (x - alpha y)/sigma; RMS over a grid
        // of in-distribution states must be small.
        let mut sq_sum = 0.0;
        let mut count = 0;
        for &t in &[0.25, 0.55, 0.85] {
            let alpha = sched.alpha_unchecked(t);
            let sigma = sched.sigma_unchecked(t);
            for ui in [-1.0, 0.0, 1.0] {
                for vj in [-1.0, 0.0, 1.0] {
                    let x = arr1(&[
                        alpha * 0.3 + sigma * ui,
                        alpha * -0.4 + sigma * vj,
                    ]);
                    let want = arr1(&[ui, vj]);
                    let got = sp.eps(&x, t).unwrap();
                    sq_sum += (&got - &want).iter().map(|e| e * e).sum::<f64>();
                    count += 2;
                }
            }
        }
        let rms = (sq_sum / count as f64).sqrt();
        assert!(rms < 0.05, "trained eps net RMS {rms} vs closed-form optimum");
    }

    #[test]
    fn tm_training_learns_the_single_point_constant() {
        let ds = DiracDataset::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let sched = NoiseSchedule::ve_default();
        let out = train_tm(&ds, &sched, &quick_cfg(3, 3000)).unwrap();
        let tp = MlpTraceProvider::new(&out.net, sched).unwrap();
        // Optimal output is the constant |y|^2 / d = 0.125.
        for &t in &[0.2, 0.5, 0.8] {
            let alpha = sched.alpha_unchecked(t);
            let sigma = sched.sigma_unchecked(t);
            for u in [-1.0, 0.0, 1.0] {
                let x = arr1(&[alpha * 0.3 + sigma * u, alpha * -0.4 - sigma * u]);
                let got = tp.t_pred(&x, t).unwrap();
                assert_abs_diff_eq!(got, 0.125, epsilon = 0.02);
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = DiracDataset::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let sched = NoiseSchedule::ve_default();
        let a = train_eps(&ds, &sched, &quick_cfg(9, 120)).unwrap();
        let b = train_eps(&ds, &sched, &quick_cfg(9, 120)).unwrap();
        for (la, lb) in a.net.layers.iter().zip(b.net.layers.iter()) {
            assert!(la
                .w
                .iter()
                .zip(lb.w.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(la
                .b
                .iter()
                .zip(lb.b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn squared_norm_fit_improves_with_training_budget() {
        let ds = DiracDataset::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.5], vec![0.5, 0.0]])
            .unwrap();
        let sched = NoiseSchedule::ve_default();
        let rms_vs_oracle = |net: &MlpNet| -> f64 {
            let tp = MlpTraceProvider::new(net, sched).unwrap();
            let mut sq = 0.0;
            let mut count = 0;
            for &t in &[0.3, 0.6, 0.9] {
                let sigma = sched.sigma_unchecked(t);
                for i in 0..5 {
                    for j in 0..5 {
                        let x = arr1(&[
                            0.25 + sigma * (i as f64 - 2.0) / 2.0,
                            0.25 + sigma * (j as f64 - 2.0) / 2.0,
                        ]);
                        let want = crate::oracle::t_oracle(&ds, &sched, &x, t).unwrap();
                        let got = tp.t_pred(&x, t).unwrap();
                        sq += (got - want) * (got - want);
                        count += 1;
                    }
                }
            }
            (sq / count as f64).sqrt()
        };
        // Same seed: the longer run shares the short run's exact prefix.
        let early = train_tm(&ds, &sched, &quick_cfg(21, 300)).unwrap();
        let late = train_tm(&ds, &sched, &quick_cfg(21, 1500)).unwrap();
        let (r_early, r_late) = (rms_vs_oracle(&early.net), rms_vs_oracle(&late.net));
        assert!(
            r_late < r_early,
            "more steps did not improve the fit: {r_early} -> {r_late}"
        );
    }

    #[test]
    fn checkpoints_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = MlpNet::new(10, &[16, 16], 2, 99).unwrap();
        net.save(&path).unwrap();
        let back = MlpNet::load(&path).unwrap();
        assert_eq!(net.layers.len(), back.layers.len());
        for (a, b) in net.layers.iter().zip(back.layers.iter()) {
            assert!(a.w.iter().zip(b.w.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.b.iter().zip(b.b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // Corrupt header.
        std::fs::write(&path, b"not json\n").unwrap();
        assert!(matches!(MlpNet::load(&path), Err(DfError::Parse { .. })));
        // Truncated body.
        let good = dir.path().join("good.ckpt");
        net.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 9]).unwrap();
        assert!(MlpNet::load(&good).is_err());
    }

    #[test]
    fn providers_validate_dimensions_and_time() {
        let net = MlpNet::new(2 + N_TIME_FEATURES, &[8], 2, 1).unwrap();
        let sched = NoiseSchedule::ve_default();
        let sp = MlpScoreProvider::new(&net, sched).unwrap();
        assert!(matches!(
            sp.eps(&arr1(&[1.0, 2.0, 3.0]), 0.5),
            Err(DfError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            sp.eps(&arr1(&[1.0, 2.0]), 2.0),
            Err(DfError::TimeOutOfRange { .. })
        ));
        // A scalar net is not an eps net.
        let tm = MlpNet::new(2 + N_TIME_FEATURES, &[8], 1, 1).unwrap();
        assert!(MlpScoreProvider::new(&tm, sched).is_err());
        assert!(MlpTraceProvider::new(&net, sched).is_err());
    }

    #[test]
    fn trace_table_has_one_row_per_grid_time() {
        let ds = gen_chessboard(64, 2).unwrap();
        let sched = NoiseSchedule::ve_default();
        let eps = MlpNet::new(2 + N_TIME_FEATURES, &[8], 2, 3).unwrap();
        let tm = MlpNet::new(2 + N_TIME_FEATURES, &[8], 1, 4).unwrap();
        let grid = [0.2, 0.6, 1.0];
        let rows = eval_trace_table(&eps, &tm, &ds, &sched, &grid, 8, 10).unwrap();
        assert_eq!(rows.len(), grid.len());
        for (row, &t) in rows.iter().zip(grid.iter()) {
            assert_eq!(row.t, t);
            assert!(row.vjp_rel_err.is_finite() && row.vjp_rel_err >= 0.0);
            assert!(row.df_tm_rel_err.is_finite() && row.df_tm_rel_err >= 0.0);
        }
    }
}
