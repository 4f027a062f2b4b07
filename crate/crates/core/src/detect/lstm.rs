//! Single-layer LSTM one-step-ahead residual predictor.
//!
//! The alarm statistic is the mean squared one-step prediction error over
//! the last `n` ticks, in normalized units.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean_std, DetectError, Detector, DetectorKind, DetectorVerdict, Hysteresis, ResidualSample, ResidualSplit};

pub const LSTM_FORMAT_VERSION: u32 = 1;

/// Training residual std below this is treated as this.
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub window: usize,
    pub hidden: usize,
    /// Number of one-step errors averaged into the score.
    pub horizon: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_decay: f64,
    pub lr_step: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Threshold = mean + `threshold_sigmas` std of held-out scores.
    pub threshold_sigmas: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            window: 20,
            hidden: 32,
            horizon: 5,
            epochs: 100,
            batch: 64,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_step: 30,
            clip_norm: 1.0,
            threshold_sigmas: 4.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LSTM cell and linear head. Gate blocks are stacked in the order input,
/// forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub hidden: usize,
    /// `4H` input weights.
    pub wx: DVector<f64>,
    /// `4H x H` recurrent weights.
    pub u: DMatrix<f64>,
    pub b: DVector<f64>,
    pub w_out: DVector<f64>,
    pub b_out: f64,
}

impl LstmWeights {
    pub fn zeros(hidden: usize) -> Self {
        LstmWeights {
            hidden,
            wx: DVector::zeros(4 * hidden),
            u: DMatrix::zeros(4 * hidden, hidden),
            b: DVector::zeros(4 * hidden),
            w_out: DVector::zeros(hidden),
            b_out: 0.0,
        }
    }

    /// Uniform in `+-1/sqrt(H)`, forget-gate bias 1.
    pub fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        let mut w = LstmWeights::zeros(hidden);
        for v in w.wx.iter_mut().chain(w.u.iter_mut()).chain(w.b.iter_mut()).chain(w.w_out.iter_mut()) {
            *v = rng.random_range(-a..a);
        }
        w.b.rows_mut(hidden, hidden).fill(1.0);
        w
    }

    pub fn len(&self) -> usize {
        let h = self.hidden;
        4 * h + 4 * h * h + 4 * h + h + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.wx.iter());
        v.extend(self.u.iter());
        v.extend(self.b.iter());
        v.extend(self.w_out.iter());
        v.push(self.b_out);
        v
    }

    pub fn from_flat(hidden: usize, flat: &[f64]) -> Self {
        let h = hidden;
        let mut w = LstmWeights::zeros(h);
        assert_eq!(flat.len(), w.len());
        let (a, rest) = flat.split_at(4 * h);
        let (u, rest) = rest.split_at(4 * h * h);
        let (b, rest) = rest.split_at(4 * h);
        let (wo, rest) = rest.split_at(h);
        w.wx.copy_from_slice(a);
        w.u.copy_from_slice(u);
        w.b.copy_from_slice(b);
        w.w_out.copy_from_slice(wo);
        w.b_out = rest[0];
        w
    }

    /// Prediction after running the cell over `xs` (normalized inputs).
    pub fn predict(&self, xs: &[f64]) -> f64 {
        let h = self.hidden;
        let mut hs = DVector::<f64>::zeros(h);
        let mut cs = DVector::<f64>::zeros(h);
        for &x in xs {
            let pre = &self.u * &hs + &self.wx * x + &self.b;
            for j in 0..h {
                let i = sigmoid(pre[j]);
                let f = sigmoid(pre[h + j]);
                let g = pre[2 * h + j].tanh();
                let o = sigmoid(pre[3 * h + j]);
                cs[j] = f * cs[j] + i * g;
                hs[j] = o * cs[j].tanh();
            }
        }
        self.w_out.dot(&hs) + self.b_out
    }

    /// Mean squared error of a batch and its gradient by backpropagation
    /// through time. `inputs` is `T x B` (one column per sequence).
    pub fn loss_and_grad(&self, inputs: &DMatrix<f64>, targets: &[f64]) -> (f64, LstmWeights) {
        let h = self.hidden;
        let (steps, batch) = inputs.shape();
        let mut hs = vec![DMatrix::<f64>::zeros(h, batch)];
        let mut cs = vec![DMatrix::<f64>::zeros(h, batch)];
        let mut gates = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut pre = &self.u * &hs[t];
            for (j, mut col) in pre.column_iter_mut().enumerate() {
                col.axpy(inputs[(t, j)], &self.wx, 1.0);
                col += &self.b;
            }
            for j in 0..batch {
                for r in 0..h {
                    pre[(r, j)] = sigmoid(pre[(r, j)]);
                    pre[(h + r, j)] = sigmoid(pre[(h + r, j)]);
                    pre[(2 * h + r, j)] = pre[(2 * h + r, j)].tanh();
                    pre[(3 * h + r, j)] = sigmoid(pre[(3 * h + r, j)]);
                }
            }
            let mut c = DMatrix::<f64>::zeros(h, batch);
            let mut hn = DMatrix::zeros(h, batch);
            for j in 0..batch {
                for r in 0..h {
                    let cv = pre[(h + r, j)] * cs[t][(r, j)] + pre[(r, j)] * pre[(2 * h + r, j)];
                    c[(r, j)] = cv;
                    hn[(r, j)] = pre[(3 * h + r, j)] * cv.tanh();
                }
            }
            gates.push(pre);
            cs.push(c);
            hs.push(hn);
        }
        let pred = (self.w_out.transpose() * &hs[steps]).add_scalar(self.b_out);
        let inv_b = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut dpred = DMatrix::<f64>::zeros(1, batch);
        for j in 0..batch {
            let e = pred[(0, j)] - targets[j];
            loss += e * e * inv_b;
            dpred[(0, j)] = 2.0 * e * inv_b;
        }

        let mut grad = LstmWeights::zeros(h);
        grad.w_out = (&hs[steps] * dpred.transpose()).column(0).into_owned();
        grad.b_out = dpred.sum();
        let mut dh = &self.w_out * &dpred;
        let mut dc = DMatrix::<f64>::zeros(h, batch);
        let mut dpre = DMatrix::<f64>::zeros(4 * h, batch);
        for t in (0..steps).rev() {
            let g = &gates[t];
            for j in 0..batch {
                for r in 0..h {
                    let (i, f, cand, o) = (g[(r, j)], g[(h + r, j)], g[(2 * h + r, j)], g[(3 * h + r, j)]);
                    let tc = cs[t + 1][(r, j)].tanh();
                    let dcv = dc[(r, j)] + dh[(r, j)] * o * (1.0 - tc * tc);
                    dpre[(r, j)] = dcv * cand * i * (1.0 - i);
                    dpre[(h + r, j)] = dcv * cs[t][(r, j)] * f * (1.0 - f);
                    dpre[(2 * h + r, j)] = dcv * i * (1.0 - cand * cand);
                    dpre[(3 * h + r, j)] = dh[(r, j)] * tc * o * (1.0 - o);
                    dc[(r, j)] = dcv * f;
                }
            }
            grad.wx += &dpre * inputs.row(t).transpose();
            grad.u += &dpre * hs[t].transpose();
            grad.b += dpre.column_sum();
            dh = self.u.transpose() * &dpre;
        }
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
}

impl TrainReport {
    /// True when the trailing `span`-epoch average loss never rises by more
    /// than `tol` (relative) from one epoch to the next.
    pub fn trailing_average_nonincreasing(&self, span: usize, tol: f64) -> bool {
        let avg: Vec<f64> = self.epoch_losses.windows(span).map(|w| w.iter().sum::<f64>() / span as f64).collect();
        avg.windows(2).all(|w| w[1] <= w[0] * (1.0 + tol))
    }
}

/// Trained predictor with normalization and alarm threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LstmFile", into = "LstmFile")]
pub struct LstmModel {
    pub window: usize,
    pub horizon: usize,
    pub hysteresis_m: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub threshold: f64,
    pub weights: LstmWeights,
}

fn training_windows(traces: &[Vec<ResidualSample>], window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ti, tr) in traces.iter().enumerate() {
        let mut run = 0;
        for (i, s) in tr.iter().enumerate() {
            run = if s.valid { run + 1 } else { 0 };
            if run > window {
                out.push((ti, i));
            }
        }
    }
    out
}

impl LstmModel {
    pub fn normalize(&self, z: f64) -> f64 {
        (z - self.norm_mean) / self.norm_std
    }

    /// Normalized prediction of the sample following `raw` (the last
    /// `window` residuals, meters).
    pub fn predict_next(&self, raw: &[f64]) -> f64 {
        let xs: Vec<f64> = raw.iter().map(|&z| self.normalize(z)).collect();
        self.weights.predict(&xs)
    }

    /// Score over `raw`, whose last `window + horizon` entries are used:
    /// the mean of the last `horizon` squared one-step errors.
    pub fn score_window(&self, raw: &[f64]) -> Option<f64> {
        let (w, n) = (self.window, self.horizon);
        if raw.len() < w + n {
            return None;
        }
        let raw = &raw[raw.len() - w - n..];
        let sum: f64 = (0..n)
            .map(|j| {
                let e = self.normalize(raw[j + w]) - self.predict_next(&raw[j..j + w]);
                e * e
            })
            .sum();
        Some(sum / n as f64)
    }

    /// Trains on the training split and sets the threshold from scores on
    /// the held-out split.
    pub fn train(split: &ResidualSplit, cfg: &LstmConfig, hysteresis_m: usize, seed: u64) -> Result<(Self, TrainReport), DetectError> {
        if cfg.window == 0 || cfg.hidden == 0 || cfg.horizon == 0 || cfg.batch == 0 || cfg.epochs == 0 {
            return Err(DetectError::Config("lstm window, hidden, horizon, batch and epochs must be >= 1".into()));
        }
        if !(cfg.learning_rate > 0.0 && cfg.clip_norm > 0.0 && cfg.lr_decay > 0.0 && cfg.lr_step > 0) {
            return Err(DetectError::Config("lstm learning rate, decay, step and clip must be > 0".into()));
        }
        let windows = training_windows(&split.train, cfg.window);
        if windows.is_empty() {
            return Err(DetectError::InsufficientData(format!(
                "lstm needs at least {} consecutive valid residuals",
                cfg.window + 1
            )));
        }
        let (norm_mean, std) = mean_std(split.train.iter().flatten().filter_map(ResidualSample::value));
        let norm_std = std.max(STD_FLOOR);
        let norm = |z: f64| (z - norm_mean) / norm_std;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = LstmWeights::init(cfg.hidden, &mut rng);
        let mut params = weights.to_flat();
        let mut m = vec![0.0; params.len()];
        let mut v = vec![0.0; params.len()];
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut step = 0;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let lr = cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_step) as i32);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let mut inputs = DMatrix::zeros(cfg.window, chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for (j, &k) in chunk.iter().enumerate() {
                    let (ti, end) = windows[k];
                    let tr = &split.train[ti];
                    for t in 0..cfg.window {
                        inputs[(t, j)] = norm(tr[end - cfg.window + t].z);
                    }
                    targets.push(norm(tr[end].z));
                }
                let (loss, grad) = weights.loss_and_grad(&inputs, &targets);
                total += loss * chunk.len() as f64;
                let mut g = grad.to_flat();
                let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !gnorm.is_finite() {
                    return Err(DetectError::Diverged { epoch, loss: gnorm });
                }
                if gnorm > cfg.clip_norm {
                    g.iter_mut().for_each(|x| *x *= cfg.clip_norm / gnorm);
                }
                step += 1;
                let (c1, c2) = (1.0 - beta1.powi(step), 1.0 - beta2.powi(step));
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                weights = LstmWeights::from_flat(cfg.hidden, &params);
            }
            let epoch_loss = total / windows.len() as f64;
            if !epoch_loss.is_finite() {
                return Err(DetectError::Diverged { epoch, loss: epoch_loss });
            }
            log::debug!("lstm epoch {epoch}: loss {epoch_loss:.6}");
            losses.push(epoch_loss);
        }

        let mut model = LstmModel {
            window: cfg.window,
            horizon: cfg.horizon,
            hysteresis_m,
            norm_mean,
            norm_std,
            threshold: f64::INFINITY,
            weights,
        };
        let mut scores = Vec::new();
        for tr in &split.holdout {
            let mut det = LstmDetector::new(model.clone());
            scores.extend(tr.iter().filter_map(|s| det.step(s).score));
        }
        if scores.is_empty() {
            return Err(DetectError::InsufficientData(format!(
                "lstm threshold needs {} consecutive valid held-out residuals",
                cfg.window + cfg.horizon
            )));
        }
        let (mu, sd) = mean_std(scores.iter().copied());
        model.threshold = mu + cfg.threshold_sigmas * sd;
        Ok((model, TrainReport { epoch_losses: losses, samples: windows.len() }))
    }

    pub fn to_json(&self) -> Result<String, DetectError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DetectError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Streaming scorer. Windows with invalid samples yield no decision.
#[derive(Debug, Clone)]
pub struct LstmDetector {
    model: LstmModel,
    samples: VecDeque<Option<f64>>,
    errors: VecDeque<Option<f64>>,
    hyst: Hysteresis,
}

impl LstmDetector {
    pub fn new(model: LstmModel) -> Self {
        let hyst = Hysteresis::new(model.hysteresis_m);
        LstmDetector { samples: VecDeque::new(), errors: VecDeque::new(), model, hyst }
    }

    pub fn model(&self) -> &LstmModel {
        &self.model
    }
}

impl Detector for LstmDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Lstm
    }

    fn step(&mut self, sample: &ResidualSample) -> DetectorVerdict {
        let w = self.model.window;
        if self.samples.len() == w + 1 {
            self.samples.pop_front();
        }
        self.samples.push_back(sample.value());
        let err = if self.samples.len() == w + 1 {
            self.samples.iter().copied().collect::<Option<Vec<f64>>>().map(|raw| {
                let e = self.model.normalize(raw[w]) - self.model.predict_next(&raw[..w]);
                e * e
            })
        } else {
            None
        };
        if self.errors.len() == self.model.horizon {
            self.errors.pop_front();
        }
        self.errors.push_back(err);
        let score = if self.errors.len() == self.model.horizon {
            self.errors.iter().copied().sum::<Option<f64>>().map(|s| s / self.model.horizon as f64)
        } else {
            None
        };
        let alarm = self.hyst.update(score.map(|s| s > self.model.threshold));
        DetectorVerdict { t: sample.t, alarm, score, threshold: self.model.threshold }
    }

    fn reset(&mut self) {
        self.samples.clear();
        self.errors.clear();
        self.hyst.reset();
    }
}

/// Analytic versus central-difference gradients of one random batch.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - n| / max(|a|, |n|)` over entries with either above
    /// `1e-7`.
    pub max_rel_err: f64,
}

pub fn finite_difference_check(window: usize, hidden: usize, batch: usize, step: f64, seed: u64) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = LstmWeights::init(hidden, &mut rng);
    // Spread the weights so that gates are not all near saturation or zero.
    for v in w.u.iter_mut().chain(w.wx.iter_mut()) {
        *v *= 2.0;
    }
    w.b_out = 0.1;
    let inputs = DMatrix::from_fn(window, batch, |_, _| rng.random_range(-2.0..2.0));
    let targets: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = w.loss_and_grad(&inputs, &targets).1.to_flat();
    let base = w.to_flat();
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + step;
            let up = LstmWeights::from_flat(hidden, &p).loss_and_grad(&inputs, &targets).0;
            p[i] = base[i] - step;
            let down = LstmWeights::from_flat(hidden, &p).loss_and_grad(&inputs, &targets).0;
            (up - down) / (2.0 * step)
        })
        .collect();
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-7)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    GradientCheck { analytic, numeric, max_rel_err }
}

#[derive(Serialize, Deserialize)]
struct GateFile {
    w_x: Vec<f64>,
    w_h: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GatesFile {
    input: GateFile,
    forget: GateFile,
    cell: GateFile,
    output: GateFile,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    w: Vec<f64>,
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LstmFile {
    format_version: u32,
    window: usize,
    hidden: usize,
    horizon: usize,
    hysteresis_m: usize,
    norm_mean: f64,
    norm_std: f64,
    threshold: f64,
    gates: GatesFile,
    head: HeadFile,
}

impl From<LstmModel> for LstmFile {
    fn from(m: LstmModel) -> Self {
        let w = &m.weights;
        let h = w.hidden;
        let gate = |k: usize| GateFile {
            w_x: w.wx.rows(k * h, h).iter().copied().collect(),
            w_h: (0..h).map(|r| w.u.row(k * h + r).iter().copied().collect()).collect(),
            b: w.b.rows(k * h, h).iter().copied().collect(),
        };
        LstmFile {
            format_version: LSTM_FORMAT_VERSION,
            window: m.window,
            hidden: h,
            horizon: m.horizon,
            hysteresis_m: m.hysteresis_m,
            norm_mean: m.norm_mean,
            norm_std: m.norm_std,
            threshold: m.threshold,
            gates: GatesFile { input: gate(0), forget: gate(1), cell: gate(2), output: gate(3) },
            head: HeadFile { w: w.w_out.iter().copied().collect(), b: w.b_out },
        }
    }
}

impl TryFrom<LstmFile> for LstmModel {
    type Error = String;

    fn try_from(f: LstmFile) -> Result<Self, String> {
        if f.format_version != LSTM_FORMAT_VERSION {
            return Err(format!("unsupported lstm format {}", f.format_version));
        }
        let h = f.hidden;
        if h == 0 || f.window == 0 || f.horizon == 0 {
            return Err("hidden, window and horizon must be >= 1".into());
        }
        if !(f.norm_std > 0.0 && f.norm_std.is_finite() && f.norm_mean.is_finite()) {
            return Err("normalization std must be finite and > 0".into());
        }
        let mut w = LstmWeights::zeros(h);
        for (k, g) in [&f.gates.input, &f.gates.forget, &f.gates.cell, &f.gates.output].into_iter().enumerate() {
            if g.w_x.len() != h || g.b.len() != h || g.w_h.len() != h || g.w_h.iter().any(|r| r.len() != h) {
                return Err(format!("gate {k} has wrong shape for hidden size {h}"));
            }
            for r in 0..h {
                w.wx[k * h + r] = g.w_x[r];
                w.b[k * h + r] = g.b[r];
                for c in 0..h {
                    w.u[(k * h + r, c)] = g.w_h[r][c];
                }
            }
        }
        if f.head.w.len() != h {
            return Err("head has wrong shape".into());
        }
        w.w_out.copy_from_slice(&f.head.w);
        w.b_out = f.head.b;
        if !w.to_flat().iter().all(|v| v.is_finite()) {
            return Err("non-finite weight".into());
        }
        Ok(LstmModel {
            window: f.window,
            horizon: f.horizon,
            hysteresis_m: f.hysteresis_m,
            norm_mean: f.norm_mean,
            norm_std: f.norm_std,
            threshold: f.threshold,
            weights: w,
        })
    }
}
