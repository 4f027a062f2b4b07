use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantile, DetectError, Detector, DetectorKind, DetectorVerdict, Hysteresis, ResidualSample, ResidualSplit};

pub const IFOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IForestConfig {
    pub trees: usize,
    pub subsample: usize,
    /// Consecutive residuals per feature vector; first differences are
    /// appended.
    pub window: usize,
}

impl Default for IForestConfig {
    fn default() -> Self {
        IForestConfig { trees: 100, subsample: 256, window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Internal { feature: usize, split: f64, left: usize, right: usize },
    External { size: usize },
}

/// Node list with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<TreeNode>,
}

/// Average unsuccessful-search path length in a binary search tree of `n`
/// points, `2 H(n-1) - 2 (n-1) / n`, with exact harmonic numbers.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let harmonic: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
    2.0 * harmonic - 2.0 * (n - 1) as f64 / n as f64
}

impl IsolationTree {
    fn grow(points: &[&[f64]], max_depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.build(points.to_vec(), 0, max_depth, rng);
        tree
    }

    fn build(&mut self, points: Vec<&[f64]>, depth: usize, max_depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::External { size: points.len() });
        if depth >= max_depth || points.len() <= 1 {
            return id;
        }
        let dims = points[0].len();
        let spread: Vec<(usize, f64, f64)> = (0..dims)
            .filter_map(|d| {
                let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
                let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
                (hi > lo).then_some((d, lo, hi))
            })
            .collect();
        if spread.is_empty() {
            return id;
        }
        let (feature, lo, hi) = spread[rng.random_range(0..spread.len())];
        let split = rng.random_range(lo..hi);
        let (l, r): (Vec<&[f64]>, Vec<&[f64]>) = points.into_iter().partition(|p| p[feature] < split);
        let left = self.build(l, depth + 1, max_depth, rng);
        let right = self.build(r, depth + 1, max_depth, rng);
        self.nodes[id] = TreeNode::Internal { feature, split, left, right };
        id
    }

    /// Depth of the external node reached by `x`, plus the expected extra
    /// depth for the points it still holds.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match &self.nodes[node] {
                TreeNode::Internal { feature, split, left, right } => {
                    node = if x[*feature] < *split { *left } else { *right };
                    depth += 1.0;
                }
                TreeNode::External { size } => return depth + average_path_length(*size),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IForestModel {
    pub format_version: u32,
    pub window: usize,
    /// Subsample size actually used per tree.
    pub subsample: usize,
    pub trees: Vec<IsolationTree>,
    pub threshold: f64,
    pub hysteresis_m: usize,
}

/// Raw window followed by its first differences.
pub fn features(window: &[f64]) -> Vec<f64> {
    let mut f = window.to_vec();
    f.extend(window.windows(2).map(|w| w[1] - w[0]));
    f
}

fn valid_windows(trace: &[ResidualSample], len: usize) -> Vec<Vec<f64>> {
    trace
        .windows(len)
        .filter(|w| w.iter().all(|s| s.valid))
        .map(|w| features(&w.iter().map(|s| s.z).collect::<Vec<_>>()))
        .collect()
}

impl IForestModel {
    /// Grows `trees` isolation trees on random size-`subsample` subsets.
    pub fn fit(data: &[Vec<f64>], cfg: &IForestConfig, seed: u64) -> Result<Self, DetectError> {
        if cfg.trees == 0 || cfg.subsample < 2 || cfg.window < 2 {
            return Err(DetectError::Config("iforest needs trees >= 1, subsample >= 2, window >= 2".into()));
        }
        if data.len() < cfg.subsample {
            return Err(DetectError::InsufficientData(format!(
                "iforest needs {} feature windows, got {}",
                cfg.subsample,
                data.len()
            )));
        }
        let max_depth = (cfg.subsample as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..cfg.trees)
            .map(|_| {
                let idx = sample(&mut rng, data.len(), cfg.subsample);
                let pts: Vec<&[f64]> = idx.iter().map(|i| data[i].as_slice()).collect();
                IsolationTree::grow(&pts, max_depth, &mut rng)
            })
            .collect();
        Ok(IForestModel {
            format_version: IFOREST_FORMAT_VERSION,
            window: cfg.window,
            subsample: cfg.subsample,
            trees,
            // Scores never exceed one.
            threshold: 1.0,
            hysteresis_m: 1,
        })
    }

    /// Fits on the training split; the threshold is the `1 - fa_budget`
    /// quantile of held-out scores.
    pub fn calibrate(
        split: &ResidualSplit,
        cfg: &IForestConfig,
        fa_budget: f64,
        hysteresis_m: usize,
        seed: u64,
    ) -> Result<Self, DetectError> {
        let data: Vec<Vec<f64>> = split.train.iter().flat_map(|t| valid_windows(t, cfg.window)).collect();
        let mut model = IForestModel::fit(&data, cfg, seed)?;
        model.hysteresis_m = hysteresis_m;
        let scores: Vec<f64> =
            split.holdout.iter().flat_map(|t| valid_windows(t, cfg.window)).map(|f| model.score(&f)).collect();
        if scores.is_empty() {
            return Err(DetectError::InsufficientData("iforest needs held-out windows".into()));
        }
        model.threshold = quantile(&scores, 1.0 - fa_budget);
        Ok(model)
    }

    /// Anomaly score `2^(-E[h(x)] / c(psi))` of a feature vector.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mean_h = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean_h / average_path_length(self.subsample))
    }

    pub fn to_json(&self) -> Result<String, DetectError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DetectError> {
        let m: IForestModel = serde_json::from_str(s)?;
        if m.format_version != IFOREST_FORMAT_VERSION {
            return Err(DetectError::InvalidModel(format!("unsupported iforest format {}", m.format_version)));
        }
        if m.trees.is_empty() || m.window < 2 || m.subsample < 2 {
            return Err(DetectError::InvalidModel("empty forest or bad window".into()));
        }
        let dims = 2 * m.window - 1;
        for t in &m.trees {
            for n in &t.nodes {
                if let TreeNode::Internal { feature, split, left, right } = n {
                    if *feature >= dims || !split.is_finite() || *left >= t.nodes.len() || *right >= t.nodes.len() {
                        return Err(DetectError::InvalidModel("malformed tree node".into()));
                    }
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct IForestDetector {
    model: IForestModel,
    buf: VecDeque<Option<f64>>,
    hyst: Hysteresis,
}

impl IForestDetector {
    pub fn new(model: IForestModel) -> Self {
        let hyst = Hysteresis::new(model.hysteresis_m);
        IForestDetector { buf: VecDeque::with_capacity(model.window), model, hyst }
    }
}

impl Detector for IForestDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Iforest
    }

    fn step(&mut self, sample: &ResidualSample) -> DetectorVerdict {
        if self.buf.len() == self.model.window {
            self.buf.pop_front();
        }
        self.buf.push_back(sample.value());
        let score = if self.buf.len() == self.model.window {
            self.buf.iter().copied().collect::<Option<Vec<f64>>>().map(|w| self.model.score(&features(&w)))
        } else {
            None
        };
        let alarm = self.hyst.update(score.map(|s| s > self.model.threshold));
        DetectorVerdict { t: sample.t, alarm, score, threshold: self.model.threshold }
    }

    fn reset(&mut self) {
        self.buf.clear();
        self.hyst.reset();
    }
}
