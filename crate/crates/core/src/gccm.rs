//! Geometric consistency confidence module.
//!
//! Small subsets of putative matches are scored by a classifier that sees only
//! their coordinates. Each match receives the mean score of the subsets it was
//! drawn into, and matches whose mean does not exceed a threshold are dropped.
//!
//! Subsets are canonicalised before scoring: on each image side the subset
//! centroid is removed and coordinates are divided by `rms · sqrt(K − 1)`, the
//! largest distance any member can have from the centroid, so every entry lies
//! in [−1, 1]. Members are ordered by A-side x, then y. Rotation is kept.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::GCCM_FORMAT_VERSION;
use crate::geometry::{centroid, rms_radius, Point2};
use crate::matcher::MatchSet;
use crate::nn::{self, Activation, DenseNet, Loss, ModelFile, Sample, TrainConfig};
use crate::rng::{self, tags};
use crate::synthdata::PairTask;

pub const DEFAULT_SUBSET_SIZE: usize = 4;
pub const DEFAULT_MIN_COVERAGE: usize = 8;
/// Mean number of subsets per match when no budget is given.
pub const DEFAULT_SUBSETS_PER_MATCH: usize = 64;
/// Below this RMS radius (pixels) a side is scaled by the image half-diagonal.
pub const MIN_RADIUS: f64 = 1.0;
pub const CANONICALIZATION: &str = "centroid-rms-sqrt(k-1), members sorted by a.x then a.y";

/// Normalise one side in place.
fn normalise_side(points: &[Point2], half_diagonal: f64) -> Vec<Point2> {
    let c = centroid(points);
    let r = rms_radius(points, c);
    let k = points.len().max(2) as f64;
    let s = if r < MIN_RADIUS {
        half_diagonal
    } else {
        r * (k - 1.0).sqrt()
    };
    points.iter().map(|&p| (p - c) * (1.0 / s)).collect()
}

/// Feature vector of a subset: `(x_A, y_A, x_B, y_B)` per member.
///
/// `half_diagonals` are the fallback scales of image A and B.
pub fn canonicalize_subset(pairs: &[(Point2, Point2)], half_diagonals: (f64, f64)) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&u, &v| {
        let (a, b) = (pairs[u].0, pairs[v].0);
        a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
    });
    let a: Vec<Point2> = order.iter().map(|&k| pairs[k].0).collect();
    let b: Vec<Point2> = order.iter().map(|&k| pairs[k].1).collect();
    let na = normalise_side(&a, half_diagonals.0);
    let nb = normalise_side(&b, half_diagonals.1);
    let mut out = Vec::with_capacity(4 * pairs.len());
    for (p, q) in na.iter().zip(&nb) {
        for v in [p.x, p.y, q.x, q.y] {
            out.push(v.clamp(-1.0, 1.0));
        }
    }
    out
}

/// Half-diagonal of a square image of side `size`.
pub fn half_diagonal(size: usize) -> f64 {
    size as f64 * std::f64::consts::SQRT_2 / 2.0
}

/// Fallback scale when the image size is unknown: half-diagonal of the
/// keypoints' bounding box.
pub fn half_diagonal_of(points: &[Point2]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    (0.5 * ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()).max(1.0)
}

/// Anything that maps a canonical feature vector to a confidence in [0, 1].
pub trait SubsetScorer: Sync {
    fn score(&self, features: &[f64]) -> f64;
}

/// Scorer returning a fixed value, for tests and ablations.
pub struct ConstantScorer(pub f64);

impl SubsetScorer for ConstantScorer {
    fn score(&self, _: &[f64]) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GccmMeta {
    pub stage: String,
    pub tasks: usize,
    pub samples: usize,
    pub seed: u64,
    pub heldout_accuracy: Option<f64>,
}

impl Default for GccmMeta {
    fn default() -> Self {
        Self {
            stage: "untrained".into(),
            tasks: 0,
            samples: 0,
            seed: 0,
            heldout_accuracy: None,
        }
    }
}

/// The subset classifier `4K → 64 → 64 → 1` (relu, relu, sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct GccmModel {
    net: DenseNet,
    subset_size: usize,
    pub meta: GccmMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct GccmHeader {
    format_version: u32,
    subset_size: usize,
    canonicalization: String,
    #[serde(flatten)]
    meta: GccmMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct GccmFile {
    gccm: GccmHeader,
    model: ModelFile,
}

impl GccmModel {
    pub fn new(subset_size: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(subset_size, &[64, 64], seed)
    }

    pub fn with_hidden(subset_size: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if subset_size < 2 {
            return Err(Error::Argument(format!("subset size {subset_size} < 2")));
        }
        let mut dims = vec![4 * subset_size];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Sigmoid);
        let net = DenseNet::new(&dims, &acts, rng::derive(seed, tags::INIT))?;
        Self::from_net(net, subset_size, GccmMeta::default())
    }

    pub fn from_net(net: DenseNet, subset_size: usize, meta: GccmMeta) -> Result<Self> {
        net.validate()?;
        if net.input_dim() != 4 * subset_size || net.output_dim() != 1 {
            return Err(Error::Argument(format!(
                "gccm net must map {} -> 1, got {} -> {}",
                4 * subset_size,
                net.input_dim(),
                net.output_dim()
            )));
        }
        if net.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::Argument("gccm net must end in a sigmoid".into()));
        }
        Ok(Self { net, subset_size, meta })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn subset_size(&self) -> usize {
        self.subset_size
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GccmFile {
            gccm: GccmHeader {
                format_version: GCCM_FORMAT_VERSION,
                subset_size: self.subset_size,
                canonicalization: CANONICALIZATION.into(),
                meta: self.meta.clone(),
            },
            model: ModelFile::from(&self.net),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GccmFile = serde_json::from_str(text)?;
        if file.gccm.format_version != GCCM_FORMAT_VERSION {
            return Err(Error::format(
                0,
                format!("gccm format version {}", file.gccm.format_version),
            ));
        }
        Self::from_net(file.model.into_net()?, file.gccm.subset_size, file.gccm.meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl SubsetScorer for GccmModel {
    fn score(&self, features: &[f64]) -> f64 {
        self.net.forward(features).map(|o| o[0]).unwrap_or(0.0)
    }
}

/// A subset of a match set and its canonical features.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSample {
    pub member_indices: Vec<usize>,
    pub features: Vec<f64>,
}

/// `c_k` for one subset.
pub fn score_subset(model: &GccmModel, s: &SubsetSample) -> f64 {
    model.score(&s.features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Random subsets drawn before the coverage pass; `None` means
    /// `64 · |initial| / K`.
    pub n_subsets: Option<usize>,
    pub tau: f64,
    pub min_coverage: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_subsets: None,
            tau: DEFAULT_TAU,
            min_coverage: DEFAULT_MIN_COVERAGE,
            seed: 0,
        }
    }
}

/// Default pruning threshold on the mean subset confidence.
pub const DEFAULT_TAU: f64 = 0.05;

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Argument(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if self.n_subsets == Some(0) {
            return Err(Error::Argument("n_subsets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    /// Mean subset score per initial match, in initial order.
    pub confidence: Vec<f64>,
    pub subsets_seen: Vec<usize>,
    pub tau: f64,
    pub initial: MatchSet,
    pub final_set: MatchSet,
    /// True when verification was skipped and `final_set` is the initial set.
    pub unverified: bool,
}

impl VerificationResult {
    /// Re-threshold without re-scoring.
    pub fn with_tau(&self, tau: f64, min_coverage: usize) -> VerificationResult {
        if self.unverified {
            return VerificationResult { tau, ..self.clone() };
        }
        let keep: Vec<bool> = self
            .confidence
            .iter()
            .zip(&self.subsets_seen)
            .map(|(&c, &n)| c > tau && n >= min_coverage)
            .collect();
        VerificationResult {
            tau,
            final_set: self.initial.filter_mask(&keep),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let per_match = self
            .initial
            .matches
            .iter()
            .zip(self.confidence.iter().zip(&self.subsets_seen))
            .map(|(m, (&c, &n))| MatchConfidence {
                i: m.i,
                j: m.j,
                confidence: c,
                subsets_seen: n,
            })
            .collect();
        Ok(serde_json::to_string(&VerificationFile {
            format_version: GCCM_FORMAT_VERSION,
            tau: self.tau,
            unverified: self.unverified,
            per_match,
            final_matches: self.final_set.clone(),
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchConfidence {
    i: usize,
    j: usize,
    confidence: f64,
    subsets_seen: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct VerificationFile {
    format_version: u32,
    tau: f64,
    unverified: bool,
    per_match: Vec<MatchConfidence>,
    #[serde(rename = "final")]
    final_matches: MatchSet,
}

/// Draw the subsets: `n` uniform `k`-subsets, then top up any match seen
/// fewer than `min_coverage` times with subsets built around it.
pub fn draw_subsets(m: usize, k: usize, n: usize, min_coverage: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, tags::SUBSETS);
    let mut subsets: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut seen = vec![0usize; m];
    for _ in 0..n {
        let mut s = sample_indices(&mut rng, m, k).into_vec();
        s.sort_unstable();
        for &x in &s {
            seen[x] += 1;
        }
        subsets.push(s);
    }
    for x in 0..m {
        while seen[x] < min_coverage {
            let mut s = vec![x];
            while s.len() < k {
                let y = rng.random_range(0..m);
                if !s.contains(&y) {
                    s.push(y);
                }
            }
            s.sort_unstable();
            for &y in &s {
                seen[y] += 1;
            }
            subsets.push(s);
        }
    }
    subsets
}

/// Verify with any scorer. `half_diagonals` are the fallback scales of A and B.
pub fn verify_with(
    scorer: &dyn SubsetScorer,
    subset_size: usize,
    initial: &MatchSet,
    kp_a: &[Point2],
    kp_b: &[Point2],
    half_diagonals: (f64, f64),
    cfg: &VerifyConfig,
) -> Result<VerificationResult> {
    cfg.validate()?;
    let m = initial.len();
    if m < subset_size {
        return Err(Error::InsufficientMatches {
            needed: subset_size,
            got: m,
        });
    }
    let coords = initial.coordinates(kp_a, kp_b);
    let n = cfg
        .n_subsets
        .unwrap_or_else(|| (DEFAULT_SUBSETS_PER_MATCH * m / subset_size).max(1));
    let subsets = draw_subsets(m, subset_size, n, cfg.min_coverage, cfg.seed);

    // Scores are collected in subset order, so the reduction below is
    // independent of how rayon splits the work.
    let scores: Vec<f64> = subsets
        .par_iter()
        .map(|s| {
            let pairs: Vec<(Point2, Point2)> = s.iter().map(|&x| coords[x]).collect();
            scorer.score(&canonicalize_subset(&pairs, half_diagonals))
        })
        .collect();

    let mut sum = vec![0.0; m];
    let mut seen = vec![0usize; m];
    for (s, &c) in subsets.iter().zip(&scores) {
        for &x in s {
            sum[x] += c;
            seen[x] += 1;
        }
    }
    let confidence: Vec<f64> = sum.iter().zip(&seen).map(|(&s, &n)| s / n as f64).collect();
    let keep: Vec<bool> = confidence
        .iter()
        .zip(&seen)
        .map(|(&c, &n)| c > cfg.tau && n >= cfg.min_coverage)
        .collect();
    Ok(VerificationResult {
        final_set: initial.filter_mask(&keep),
        confidence,
        subsets_seen: seen,
        tau: cfg.tau,
        initial: initial.clone(),
        unverified: false,
    })
}

pub fn verify(
    model: &GccmModel,
    initial: &MatchSet,
    kp_a: &[Point2],
    kp_b: &[Point2],
    half_diagonals: (f64, f64),
    cfg: &VerifyConfig,
) -> Result<VerificationResult> {
    verify_with(model, model.subset_size, initial, kp_a, kp_b, half_diagonals, cfg)
}

/// [`verify`], but with too few matches the initial set is returned
/// unfiltered and flagged instead of failing.
pub fn verify_or_passthrough(
    model: &GccmModel,
    initial: &MatchSet,
    kp_a: &[Point2],
    kp_b: &[Point2],
    half_diagonals: (f64, f64),
    cfg: &VerifyConfig,
) -> Result<VerificationResult> {
    match verify(model, initial, kp_a, kp_b, half_diagonals, cfg) {
        Err(Error::InsufficientMatches { needed, got }) => {
            log::warn!("gccm: {got} matches < {needed}, returning the initial set unverified");
            Ok(VerificationResult {
                confidence: vec![1.0; initial.len()],
                subsets_seen: vec![0; initial.len()],
                tau: cfg.tau,
                initial: initial.clone(),
                final_set: initial.clone(),
                unverified: true,
            })
        }
        other => other,
    }
}

/// How negatives are built from positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Minimum B-side jitter, pixels. Must exceed the gt tolerance tenfold.
    pub jitter_min: f64,
    pub jitter_max: f64,
    /// Probability that a corrupted member gets a wrong index (else jitter).
    pub wrong_index_fraction: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            jitter_min: 30.0,
            jitter_max: 150.0,
            wrong_index_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSubset {
    pub task: usize,
    pub sample: SubsetSample,
    pub label: bool,
}

impl LabeledSubset {
    pub fn to_training_sample(&self) -> Sample {
        Sample {
            input: self.sample.features.clone(),
            target: vec![if self.label { 1.0 } else { 0.0 }],
        }
    }
}

/// Build a labeled subset set: `n_pos` positives drawn from gt matches and
/// `n_neg` negatives made by corrupting 1 to K members of a positive.
pub fn make_gccm_training_set(
    tasks: &[PairTask],
    subset_size: usize,
    n_pos: usize,
    n_neg: usize,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<Vec<LabeledSubset>> {
    let tol = tasks.iter().map(|t| t.gt_tolerance).fold(0.0, f64::max);
    if !(corruption.jitter_min >= 10.0 * tol && corruption.jitter_min > 0.0) {
        return Err(Error::Argument(format!(
            "negative jitter {} px must be at least 10 x gt tolerance ({} px)",
            corruption.jitter_min,
            10.0 * tol
        )));
    }
    if !(corruption.jitter_max >= corruption.jitter_min) || !(0.0..=1.0).contains(&corruption.wrong_index_fraction) {
        return Err(Error::Argument("invalid corruption config".into()));
    }
    let usable: Vec<usize> = tasks
        .iter()
        .enumerate()
        .filter_map(|(k, t)| {
            if t.gt_matches.len() >= subset_size && t.keypoints_b.len() > subset_size {
                Some(k)
            } else {
                log::warn!("task {k}: {} gt matches, skipped", t.gt_matches.len());
                None
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Argument(format!("no task has {subset_size} or more gt matches")));
    }
    if n_pos != n_neg {
        log::warn!("unbalanced gccm training set: {n_pos} positives, {n_neg} negatives");
    }

    let mut rng = rng::stream(seed, tags::GCCM_SAMPLES);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for k in 0..n_pos + n_neg {
        let ti = usable[rng.random_range(0..usable.len())];
        let task = &tasks[ti];
        let half = (half_diagonal(task.image_size), half_diagonal(task.image_size));
        let members = sample_indices(&mut rng, task.gt_matches.len(), subset_size).into_vec();
        let mut pairs: Vec<(Point2, Point2)> = members
            .iter()
            .map(|&g| {
                let (i, j) = task.gt_matches[g];
                (task.keypoints_a[i], task.keypoints_b[j])
            })
            .collect();
        let label = k < n_pos;
        if label {
            for (p, q) in &pairs {
                let r = task.gt_transform.apply(*p).dist(*q);
                assert!(r <= task.gt_tolerance, "positive member residual {r}");
            }
        } else {
            let n_bad = rng.random_range(1..=subset_size);
            let bad = sample_indices(&mut rng, subset_size, n_bad).into_vec();
            for &b in &bad {
                let truth = task.gt_transform.apply(pairs[b].0);
                let wrong_index = rng.random_bool(corruption.wrong_index_fraction);
                pairs[b].1 = if wrong_index {
                    let mut q;
                    let mut tries = 0;
                    loop {
                        q = task.keypoints_b[rng.random_range(0..task.keypoints_b.len())];
                        tries += 1;
                        if q.dist(truth) > task.gt_tolerance || tries > 100 {
                            break;
                        }
                    }
                    q
                } else {
                    let r = rng.random_range(corruption.jitter_min..=corruption.jitter_max);
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    pairs[b].1 + Point2::new(r * a.cos(), r * a.sin())
                };
            }
        }
        out.push(LabeledSubset {
            task: ti,
            sample: SubsetSample {
                member_indices: members,
                features: canonicalize_subset(&pairs, half),
            },
            label,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GccmTrainOutcome {
    pub model: GccmModel,
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

/// Fraction of samples classified correctly at 0.5.
pub fn accuracy(model: &GccmModel, samples: &[LabeledSubset]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .par_iter()
        .filter(|s| (model.score(&s.sample.features) > 0.5) == s.label)
        .count();
    correct as f64 / samples.len() as f64
}

/// Seeded 80/20 split.
pub fn split_heldout(samples: &[LabeledSubset], seed: u64) -> (Vec<LabeledSubset>, Vec<LabeledSubset>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(seed, tags::SPLIT));
    let n_train = samples.len() - samples.len() / 5;
    let train = order[..n_train].iter().map(|&k| samples[k].clone()).collect();
    let held = order[n_train..].iter().map(|&k| samples[k].clone()).collect();
    (train, held)
}

/// Train `model` further on `samples` (binary cross-entropy, 80/20 split).
pub fn train_gccm_from(
    model: GccmModel,
    samples: &[LabeledSubset],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<GccmTrainOutcome> {
    let pos = samples.iter().filter(|s| s.label).count();
    let neg = samples.len() - pos;
    if pos < 100 || neg < 100 {
        return Err(Error::Argument(format!(
            "gccm training needs >= 100 samples per class, got {pos} positive / {neg} negative"
        )));
    }
    let (train_set, held) = split_heldout(samples, cfg.seed);
    let data: Vec<Sample> = train_set.iter().map(LabeledSubset::to_training_sample).collect();
    let subset_size = model.subset_size;
    let mut meta = model.meta.clone();
    let outcome = nn::train(model.net, &data, cfg, Loss::BinaryCrossEntropy)?;
    let mut tasks: Vec<usize> = samples.iter().map(|s| s.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    meta.stage = stage.to_string();
    meta.tasks = tasks.len();
    meta.samples = samples.len();
    meta.seed = cfg.seed;
    let mut trained = GccmModel::from_net(outcome.net, subset_size, meta)?;
    let heldout_accuracy = accuracy(&trained, &held);
    let train_accuracy = accuracy(&trained, &train_set);
    trained.meta.heldout_accuracy = Some(heldout_accuracy);
    Ok(GccmTrainOutcome {
        model: trained,
        loss_curve: outcome.loss_curve,
        train_accuracy,
        heldout_accuracy,
        n_train: train_set.len(),
        n_heldout: held.len(),
    })
}

/// Train a fresh classifier.
pub fn train_gccm(samples: &[LabeledSubset], cfg: &TrainConfig) -> Result<GccmTrainOutcome> {
    let k = samples
        .first()
        .map(|s| s.sample.features.len() / 4)
        .ok_or_else(|| Error::Argument("empty gccm training set".into()))?;
    train_gccm_from(GccmModel::new(k, cfg.seed)?, samples, cfg, "pretrain")
}

/// Default schedule for the subset classifier.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        batch_size: 64,
        epochs: 30,
        seed,
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::Match;

    fn square() -> Vec<(Point2, Point2)> {
        vec![
            (Point2::new(0.0, 0.0), Point2::new(10.0, 10.0)),
            (Point2::new(4.0, 0.0), Point2::new(14.0, 10.0)),
            (Point2::new(0.0, 4.0), Point2::new(10.0, 14.0)),
            (Point2::new(4.0, 4.0), Point2::new(14.0, 14.0)),
        ]
    }

    #[test]
    fn canonical_values() {
        let f = canonicalize_subset(&square(), (100.0, 100.0));
        // centroid (2, 2), rms radius sqrt(8), scale sqrt(8)·sqrt(3)
        let s = 2.0 / (8.0f64.sqrt() * 3.0f64.sqrt());
        assert!((f[0] + s).abs() < 1e-15 && (f[1] + s).abs() < 1e-15);
        assert_eq!(&f[0..2], &f[2..4]);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn order_invariant() {
        let mut p = square();
        let f = canonicalize_subset(&p, (1.0, 1.0));
        p.reverse();
        assert_eq!(canonicalize_subset(&p, (1.0, 1.0)), f);
    }

    #[test]
    fn tiny_subset_uses_fallback_scale() {
        let p: Vec<_> = square().into_iter().map(|(a, b)| (a * 0.01, b)).collect();
        let f = canonicalize_subset(&p, (10.0, 10.0));
        assert!((f[0] + 0.02 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn zero_last_layer_gives_half() {
        let mut m = GccmModel::new(4, 1).unwrap();
        let last = m.net_mut().layers_mut().last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        let f = canonicalize_subset(&square(), (1.0, 1.0));
        assert_eq!(m.score(&f), 0.5);
    }

    fn chain(n: usize) -> (MatchSet, Vec<Point2>) {
        let kp: Vec<Point2> = (0..n)
            .map(|k| Point2::new(k as f64 * 7.0, (k * k % 11) as f64 * 5.0))
            .collect();
        let ms = MatchSet::new(n, n, (0..n).map(|k| Match { i: k, j: k, score: 0.9 }).collect()).unwrap();
        (ms, kp)
    }

    #[test]
    fn constant_scorers() {
        let (ms, kp) = chain(12);
        let cfg = VerifyConfig {
            tau: 0.99,
            ..Default::default()
        };
        let r = verify_with(&ConstantScorer(1.0), 4, &ms, &kp, &kp, (100.0, 100.0), &cfg).unwrap();
        assert_eq!(r.final_set, ms);
        let r = verify_with(&ConstantScorer(0.0), 4, &ms, &kp, &kp, (100.0, 100.0), &cfg).unwrap();
        assert!(r.final_set.is_empty());
        assert!(r.subsets_seen.iter().all(|&n| n >= DEFAULT_MIN_COVERAGE));
    }

    #[test]
    fn too_few_matches() {
        let (ms, kp) = chain(3);
        let m = GccmModel::new(4, 0).unwrap();
        let err = verify(&m, &ms, &kp, &kp, (1.0, 1.0), &VerifyConfig::default());
        assert!(matches!(err, Err(Error::InsufficientMatches { needed: 4, got: 3 })));
        let r = verify_or_passthrough(&m, &ms, &kp, &kp, (1.0, 1.0), &VerifyConfig::default()).unwrap();
        assert!(r.unverified);
        assert_eq!(r.final_set, ms);
    }

    #[test]
    fn coverage_top_up() {
        let subsets = draw_subsets(40, 4, 3, 8, 5);
        let mut seen = [0; 40];
        for s in &subsets {
            assert_eq!(s.len(), 4);
            let mut d = s.clone();
            d.dedup();
            assert_eq!(d.len(), 4);
            for &x in s {
                seen[x] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n >= 8));
    }

    #[test]
    fn json_round_trip() {
        let m = GccmModel::new(4, 3).unwrap();
        let back = GccmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(v["gccm"]["subset_size"], 4);
    }
}
