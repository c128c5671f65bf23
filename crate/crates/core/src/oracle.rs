//! Learned stopping for prompt optimization: labeling of trajectories,
//! a small window classifier, and the stop rules that read its output.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cl::csv_err;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::graph::{Graph, Tensor};
use crate::nn::{hash_bytes, read_layers, write_layers, Mlp, OutputActivation};
use crate::optim::Optimizer;

/// Feature vectors per window.
pub const WINDOW: usize = 3;
pub const WINDOW_DIM: usize = WINDOW * FeatureVector::LEN;
/// Consecutive target predictions that end a fixed-rule optimization.
pub const FIXED_STOP_STEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StopRule {
    /// At least `n` positives among the last `k` predictions.
    NOfK { n: usize, k: usize },
    /// The last `n` predictions are all positive.
    Consecutive { n: usize },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::NOfK { n: 2, k: 3 }
    }
}

/// Applies `rule` to oracle outputs, oldest first. A prediction is positive
/// when it is at least `threshold`. Too short a history never stops.
pub fn should_stop(predictions: &[f64], rule: StopRule, threshold: f64) -> bool {
    let (n, k) = match rule {
        StopRule::NOfK { n, k } => (n, k),
        StopRule::Consecutive { n } => (n, n),
    };
    if k == 0 || predictions.len() < k {
        return false;
    }
    let positives = predictions[predictions.len() - k..]
        .iter()
        .filter(|&&p| p >= threshold)
        .count();
    positives >= n
}

/// True once the last four argmax predictions all equal `target`.
pub fn fixed_stop(history: &[usize], target: usize) -> bool {
    history.len() >= FIXED_STOP_STEPS && history[history.len() - FIXED_STOP_STEPS..].iter().all(|&p| p == target)
}

/// Three consecutive feature vectors, oldest first, as the oracle sees them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryWindow(pub [FeatureVector; WINDOW]);

fn relative_to(v: f64, start: f64) -> f64 {
    if start.abs() > 1e-12 {
        v / start
    } else {
        v
    }
}

impl TrajectoryWindow {
    /// Window ending at `features[end]`, where `features[0]` is the start of
    /// the trajectory. Similarity, feature dot product and feature spread
    /// start at levels set by the classifier and the conditioning pool, so
    /// the oracle sees them as ratios to their value at the start. Quality
    /// is left as is.
    pub fn ending_at(features: &[FeatureVector], end: usize) -> Option<Self> {
        if end + 1 < WINDOW || end >= features.len() {
            return None;
        }
        let z0 = features[0];
        let rel = |z: FeatureVector| FeatureVector {
            ssim: relative_to(z.ssim, z0.ssim),
            feature_dot: relative_to(z.feature_dot, z0.feature_dot),
            feature_std: relative_to(z.feature_std, z0.feature_std),
            ..z
        };
        let s = end + 1 - WINDOW;
        Some(Self([rel(features[s]), rel(features[s + 1]), rel(features[s + 2])]))
    }

    pub fn flatten(&self) -> [f64; WINDOW_DIM] {
        let mut out = [0.0; WINDOW_DIM];
        for (i, z) in self.0.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&z.to_array());
        }
        out
    }
}

/// Frozen window classifier with its input standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleNet {
    net: Mlp,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl OracleNet {
    pub fn new(net: Mlp, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if net.input_dim() != mean.len() || mean.len() != std.len() || net.output_dim() != 1 {
            return Err(Error::shape("oracle network and scaler disagree"));
        }
        Ok(Self { net, mean, std })
    }

    fn standardize(&self, rows: &Tensor) -> Tensor {
        let mut t = rows.clone();
        for (j, mut col) in t.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        t
    }

    fn logits(&self, rows: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.standardize(rows))?.0.column(0).to_vec())
    }

    /// Probability that the window is at or past the stopping point, kept
    /// strictly inside `(0, 1)`.
    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        let row =
            Tensor::from_shape_vec((1, window.len()), window.to_vec()).map_err(|e| Error::shape(e.to_string()))?;
        Ok(squash(self.logits(&row)?[0]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_layers(&mut out, self.net.layers());
        out
    }

    /// Hash over the network block and the scaler.
    pub fn hash(&self) -> String {
        let mut bytes = self.to_bytes();
        for v in self.mean.iter().chain(&self.std) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        hash_bytes(&bytes)
    }

    pub fn verify(&self, expected: &str) -> Result<()> {
        let found = self.hash();
        if found != expected {
            return Err(Error::FrozenViolation {
                expected: expected.to_string(),
                found,
            });
        }
        Ok(())
    }

    /// Writes `oracle.bin` and `oracle.json` into `dir`.
    pub fn save(&self, dir: &Path, report: &OracleReport) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("oracle.bin"), self.to_bytes())?;
        let manifest = OracleManifest {
            mean: self.mean.clone(),
            std: self.std.clone(),
            hash: self.hash(),
            report: report.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("oracle.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, OracleManifest)> {
        let bin = dir.join("oracle.bin");
        let json = dir.join("oracle.json");
        for p in [&bin, &json] {
            if !p.exists() {
                return Err(Error::MissingCheckpoint(p.clone()));
            }
        }
        let manifest: OracleManifest =
            serde_json::from_str(&std::fs::read_to_string(json)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bytes = std::fs::read(bin)?;
        let mut cur = bytes.as_slice();
        let net = Mlp::from_layers(read_layers(&mut cur)?, OutputActivation::Identity)?;
        if !cur.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after oracle block".into()));
        }
        let oracle = Self::new(net, manifest.mean.clone(), manifest.std.clone())?;
        oracle.verify(&manifest.hash)?;
        Ok((oracle, manifest))
    }
}

fn squash(logit: f64) -> f64 {
    (1.0 / (1.0 + (-logit).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleManifest {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub hash: String,
    pub report: OracleReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub trajectory: usize,
    pub iteration: usize,
    pub features: [f64; WINDOW_DIM],
    pub label: bool,
}

/// Target probability and features at one iteration of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub target_prob: f64,
    pub features: FeatureVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub quality_floor: f64,
    /// Percentile of iteration-0 feature spread that sets the diversity floor.
    pub diversity_percentile: f64,
    /// Multiplier applied to that percentile.
    pub diversity_scale: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            theta_lo: 0.2,
            theta_hi: 0.6,
            quality_floor: 0.5,
            diversity_percentile: 0.1,
            diversity_scale: 0.25,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.theta_lo
            && self.theta_lo <= self.theta_hi
            && self.theta_hi <= 1.0
            && (0.0..=1.0).contains(&self.diversity_percentile)
            && self.diversity_scale >= 0.0;
        if !ok {
            return Err(Error::Config("labeling band must satisfy 0 <= lo <= hi <= 1".into()));
        }
        Ok(())
    }
}

/// Earliest iteration whose target probability lies in the band with enough
/// diversity and quality.
pub fn stop_label(points: &[TrajectoryPoint], cfg: &LabelConfig, diversity_floor: f64) -> Option<usize> {
    points.iter().position(|p| {
        (cfg.theta_lo..=cfg.theta_hi).contains(&p.target_prob)
            && p.features.feature_std >= diversity_floor
            && p.features.quality >= cfg.quality_floor
    })
}

/// Nearest-rank percentile of `values`, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Every window of a trajectory, negative before `label` and positive from
/// it on.
pub fn windows_for(trajectory: usize, features: &[FeatureVector], label: usize) -> Vec<LabeledWindow> {
    (WINDOW - 1..features.len())
        .map(|end| LabeledWindow {
            trajectory,
            iteration: end,
            features: TrajectoryWindow::ending_at(features, end).expect("in range").flatten(),
            label: end >= label,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub windows: Vec<LabeledWindow>,
    /// Stop label per input trajectory, `None` when discarded.
    pub labels: Vec<Option<usize>>,
    pub discarded: usize,
    pub diversity_floor: f64,
}

/// Labels trajectories given as per-iteration points. The diversity floor is
/// a scaled percentile of the iteration-0 feature spread across all
/// trajectories.
pub fn label_trajectories(trajectories: &[Vec<TrajectoryPoint>], cfg: &LabelConfig) -> Result<LabeledSet> {
    cfg.validate()?;
    let starts: Vec<f64> = trajectories
        .iter()
        .filter_map(|t| t.first().map(|p| p.features.feature_std))
        .collect();
    let diversity_floor = cfg.diversity_scale * percentile(&starts, cfg.diversity_percentile)?;
    let mut windows = Vec::new();
    let mut labels = Vec::with_capacity(trajectories.len());
    for (id, points) in trajectories.iter().enumerate() {
        let label = stop_label(points, cfg, diversity_floor);
        if let Some(l) = label {
            let feats: Vec<FeatureVector> = points.iter().map(|p| p.features).collect();
            windows.extend(windows_for(id, &feats, l));
        }
        labels.push(label);
    }
    let discarded = labels.iter().filter(|l| l.is_none()).count();
    if discarded == trajectories.len() {
        return Err(Error::NoLabeledTrajectories);
    }
    Ok(LabeledSet {
        windows,
        labels,
        discarded,
        diversity_floor,
    })
}

/// Splits windows into train and validation by whole trajectories.
pub fn split_by_trajectory(
    windows: &[LabeledWindow],
    val_fraction: f64,
    seed: u64,
) -> (Vec<LabeledWindow>, Vec<LabeledWindow>) {
    let mut ids: Vec<usize> = windows.iter().map(|w| w.trajectory).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ids.len() as f64 * val_fraction).ceil() as usize).min(ids.len().saturating_sub(1));
    let val_ids: std::collections::HashSet<usize> = ids[..n_val].iter().copied().collect();
    windows.iter().cloned().partition(|w| !val_ids.contains(&w.trajectory))
}

pub const WINDOW_CSV_HEADER: [&str; 15] = [
    "trajectory",
    "iteration",
    "f0",
    "f1",
    "f2",
    "f3",
    "f4",
    "f5",
    "f6",
    "f7",
    "f8",
    "f9",
    "f10",
    "f11",
    "label",
];

pub fn write_windows_csv<W: Write>(windows: &[LabeledWindow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WINDOW_CSV_HEADER).map_err(csv_err)?;
    for win in windows {
        let mut rec = vec![win.trajectory.to_string(), win.iteration.to_string()];
        rec.extend(win.features.iter().map(|v| v.to_string()));
        rec.push(u8::from(win.label).to_string());
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Feature ranking as `rank,feature,importance`.
pub fn write_ranking_csv<W: Write>(ranking: &[(String, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "feature", "importance"]).map_err(csv_err)?;
    for (i, (name, v)) in ranking.iter().enumerate() {
        w.write_record([(i + 1).to_string(), name.clone(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 20,
            batch_size: 32,
            hidden: 32,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub train_windows: usize,
    pub val_windows: usize,
}

fn to_matrix(windows: &[LabeledWindow]) -> (Tensor, Vec<f64>) {
    let x = Tensor::from_shape_fn((windows.len(), WINDOW_DIM), |(i, j)| windows[i].features[j]);
    let y = windows.iter().map(|w| f64::from(u8::from(w.label))).collect();
    (x, y)
}

fn bce_and_accuracy(oracle: &OracleNet, x: &Tensor, y: &[f64]) -> Result<(f64, f64)> {
    let logits = oracle.logits(x)?;
    let n = y.len().max(1) as f64;
    let loss = logits
        .iter()
        .zip(y)
        .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    let acc = logits.iter().zip(y).filter(|(&l, &t)| (l >= 0.0) == (t > 0.5)).count() as f64 / n;
    Ok((loss, acc))
}

/// Adam on binary cross-entropy with early stopping on validation loss.
/// Returns the parameters of the best validation epoch.
pub fn train_oracle(
    train: &[LabeledWindow],
    val: &[LabeledWindow],
    cfg: &OracleTrainConfig,
) -> Result<(OracleNet, OracleReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("oracle training or validation set"));
    }
    let positives = train.iter().filter(|w| w.label).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::SingleClassLabels);
    }
    let (x, y) = to_matrix(train);
    let (xv, yv) = to_matrix(val);
    let mean: Vec<f64> = x.columns().into_iter().map(|c| c.mean().unwrap_or(0.0)).collect();
    let std: Vec<f64> = x
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, &m)| {
            let s = (c.mapv(|v| (v - m).powi(2)).mean().unwrap_or(0.0)).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Mlp::new(&[WINDOW_DIM, cfg.hidden, 1], OutputActivation::Identity, &mut rng);
    let mut oracle = OracleNet::new(net, mean, std)?;
    let xs = oracle.standardize(&x);
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut best = (f64::INFINITY, 0usize, oracle.net.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let bound = oracle.net.bind(&mut g, true);
            let xb = g.constant(xs.select(ndarray::Axis(0), idx));
            let (out, _) = bound.forward(&mut g, xb)?;
            let targets: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let loss = g.bce_with_logits(out, &targets)?;
            let grads = g.backward(loss)?;
            opt.step(&mut oracle.net.params_mut(), &bound.grads(&grads))?;
        }
        let (vl, _) = bce_and_accuracy(&oracle, &xv, &yv)?;
        if vl < best.0 {
            best = (vl, epoch, oracle.net.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    oracle.net = best.2;
    let (val_loss, val_accuracy) = bce_and_accuracy(&oracle, &xv, &yv)?;
    let report = OracleReport {
        epochs_run,
        best_epoch: best.1,
        val_loss,
        val_accuracy,
        train_windows: train.len(),
        val_windows: val.len(),
    };
    Ok((oracle, report))
}

/// Permutation importance of each column under a logistic probe trained on
/// all columns: the mean rise in probe BCE when the column is shuffled.
/// Sorted by importance, highest first.
pub fn select_features(names: &[&str], rows: &[Vec<f64>], labels: &[bool], seed: u64) -> Result<Vec<(String, f64)>> {
    const REPEATS: usize = 5;
    const EPOCHS: usize = 300;
    let d = names.len();
    if rows.is_empty() || rows.len() != labels.len() || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows disagree with names or labels"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClassLabels);
    }
    let mut x = Tensor::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    for mut col in x.columns_mut() {
        let m = col.mean().unwrap_or(0.0);
        let s = col.mapv(|v| (v - m).powi(2)).mean().unwrap_or(0.0).sqrt();
        let s = if s > 1e-12 { s } else { 1.0 };
        col.mapv_inplace(|v| (v - m) / s);
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Mlp::new(&[d, 1], OutputActivation::Identity, &mut rng);
    let mut opt = Optimizer::adam(0.05);
    let bce = |probe: &Mlp, x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let bound = probe.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, _) = bound.forward(&mut g, xv)?;
        let l = g.bce_with_logits(out, &y)?;
        Ok(g.scalar(l))
    };
    for _ in 0..EPOCHS {
        let mut g = Graph::new();
        let bound = probe.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let (out, _) = bound.forward(&mut g, xv)?;
        let loss = g.bce_with_logits(out, &y)?;
        let grads = g.backward(loss)?;
        opt.step(&mut probe.params_mut(), &bound.grads(&grads))?;
    }
    let base = bce(&probe, &x)?;
    let mut scores = Vec::with_capacity(d);
    for (j, name) in names.iter().enumerate() {
        let mut rise = 0.0;
        for _ in 0..REPEATS {
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            perm.shuffle(&mut rng);
            let mut xp = x.clone();
            for (i, &p) in perm.iter().enumerate() {
                xp[[i, j]] = x[[p, j]];
            }
            rise += bce(&probe, &xp)? - base;
        }
        scores.push((name.to_string(), rise / REPEATS as f64));
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scores)
}
