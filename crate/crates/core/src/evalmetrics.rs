//! Precision, inlier counts, target registration error and the benchmark
//! harness that runs every registered method over a task list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{ransac_similarity, RansacConfig};
use crate::descriptors::{fuse, DescriptorSet, FusionNet};
use crate::error::{Error, Result};
use crate::formats::REPORT_FORMAT_VERSION;
use crate::gccm::{half_diagonal, verify_or_passthrough, GccmModel, VerificationResult, VerifyConfig};
use crate::geometry::{similarity_fit, tps_fit, Point2};
use crate::matcher::{apply_gt_labels, match_initial, DescriptorChoice, MatchSet, MatcherConfig};
use crate::synthdata::PairTask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionResult {
    pub precision: f64,
    pub n_inliers: usize,
    pub n_predicted: usize,
}

/// Fraction of predicted matches labeled correct; 0 for an empty prediction.
pub fn precision(labels: &[bool]) -> PrecisionResult {
    let n_inliers = labels.iter().filter(|&&l| l).count();
    if labels.is_empty() {
        log::debug!("precision of an empty match set reported as 0");
    }
    PrecisionResult {
        precision: n_inliers as f64 / labels.len().max(1) as f64,
        n_inliers,
        n_predicted: labels.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreEstimator {
    Tps { lambda: f64 },
    Similarity,
}

impl Default for TreEstimator {
    fn default() -> Self {
        TreEstimator::Tps { lambda: 1.0 }
    }
}

impl TreEstimator {
    pub fn min_matches(&self) -> usize {
        match self {
            TreEstimator::Tps { .. } => 3,
            TreEstimator::Similarity => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreResult {
    /// Mean error over all ground-truth A keypoints.
    pub tre_gt: f64,
    /// Mean error over the A keypoints of the predicted matches.
    pub tre_pred: f64,
}

/// Fit the estimator to `final_set`, then measure how far it puts A keypoints
/// from their true B positions. `None` if too few matches or the fit fails.
pub fn tre(final_set: &MatchSet, task: &PairTask, estimator: TreEstimator) -> Option<TreResult> {
    if final_set.len() < estimator.min_matches() || task.gt_matches.is_empty() {
        return None;
    }
    let pairs = final_set.coordinates(&task.keypoints_a, &task.keypoints_b);
    let fitted: Box<dyn Fn(Point2) -> Point2> = match estimator {
        TreEstimator::Tps { lambda } => {
            let (src, dst): (Vec<Point2>, Vec<Point2>) = pairs.into_iter().unzip();
            let t = tps_fit(&src, &dst, lambda).ok()?;
            Box::new(move |p| t.apply(p))
        }
        TreEstimator::Similarity => {
            let s = similarity_fit(&pairs).ok()?;
            Box::new(move |p| s.apply(p))
        }
    };
    let tre_gt = task
        .gt_matches
        .iter()
        .map(|&(i, j)| fitted(task.keypoints_a[i]).dist(task.keypoints_b[j]))
        .sum::<f64>()
        / task.gt_matches.len() as f64;
    let tre_pred = final_set
        .matches
        .iter()
        .map(|m| {
            let p = task.keypoints_a[m.i];
            fitted(p).dist(task.gt_transform.apply(p))
        })
        .sum::<f64>()
        / final_set.len() as f64;
    Some(TreResult { tre_gt, tre_pred })
}

/// The five registered pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "matcher-only")]
    MatcherOnly,
    #[serde(rename = "matcher+semantic")]
    MatcherSemantic,
    #[serde(rename = "matcher+gccm")]
    MatcherGccm,
    #[serde(rename = "matcher+semantic+gccm")]
    MatcherSemanticGccm,
    #[serde(rename = "matcher+ransac")]
    MatcherRansac,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::MatcherOnly,
        Method::MatcherSemantic,
        Method::MatcherGccm,
        Method::MatcherSemanticGccm,
        Method::MatcherRansac,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::MatcherOnly => "matcher-only",
            Method::MatcherSemantic => "matcher+semantic",
            Method::MatcherGccm => "matcher+gccm",
            Method::MatcherSemanticGccm => "matcher+semantic+gccm",
            Method::MatcherRansac => "matcher+ransac",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }

    pub fn uses_semantic(&self) -> bool {
        matches!(self, Method::MatcherSemantic | Method::MatcherSemanticGccm)
    }

    pub fn uses_gccm(&self) -> bool {
        matches!(self, Method::MatcherGccm | Method::MatcherSemanticGccm)
    }
}

/// Models and settings shared by all methods.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub fusion: Option<FusionNet>,
    pub gccm: Option<GccmModel>,
    pub matcher: MatcherConfig,
    pub verify: VerifyConfig,
    pub ransac: RansacConfig,
    pub tre: TreEstimator,
}

impl Pipeline {
    pub fn new(fusion: Option<FusionNet>, gccm: Option<GccmModel>) -> Self {
        Self {
            fusion,
            gccm,
            matcher: MatcherConfig::default(),
            verify: VerifyConfig::default(),
            ransac: RansacConfig::default(),
            tre: TreEstimator::default(),
        }
    }

    /// Settings that shape results, hashed into reports.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "matcher": self.matcher,
            "verify": self.verify,
            "ransac": self.ransac,
            "tre": self.tre,
            "fusion": self.fusion.as_ref().map(|f| sha256_hex(f.to_json().unwrap_or_default().as_bytes())),
            "gccm": self.gccm.as_ref().map(|g| sha256_hex(g.to_json().unwrap_or_default().as_bytes())),
        })
    }

    /// Descriptor sets for a method: fused when it uses semantics.
    pub fn descriptors(&self, method: Method, task: &PairTask) -> Result<(DescriptorSet, DescriptorSet)> {
        let (a, b) = match (&task.descriptors_a, &task.descriptors_b) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Precondition("task has no descriptors".into())),
        };
        if method.uses_semantic() {
            let fusion = self
                .fusion
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("{} needs a fusion model", method.tag())))?;
            Ok((fuse(a, fusion)?, fuse(b, fusion)?))
        } else {
            Ok((a.clone(), b.clone()))
        }
    }

    /// Match and verify one task. Descriptor fusion is done before the clock
    /// starts; the returned time covers matching and verification only.
    pub fn run(&self, method: Method, task: &PairTask) -> Result<MethodOutput> {
        let (da, db) = self.descriptors(method, task)?;
        let matcher = MatcherConfig {
            descriptors: if method.uses_semantic() {
                DescriptorChoice::Fused
            } else {
                DescriptorChoice::Local
            },
            ..self.matcher
        };
        let start = Instant::now();
        let initial = match_initial(&da, &db, &matcher)?;
        let (final_set, verification) = match method {
            Method::MatcherOnly | Method::MatcherSemantic => (initial.clone(), None),
            Method::MatcherGccm | Method::MatcherSemanticGccm => {
                let model = self
                    .gccm
                    .as_ref()
                    .ok_or_else(|| Error::Precondition(format!("{} needs a gccm model", method.tag())))?;
                let half = half_diagonal(task.image_size);
                let v = verify_or_passthrough(
                    model,
                    &initial,
                    &task.keypoints_a,
                    &task.keypoints_b,
                    (half, half),
                    &self.verify,
                )?;
                (v.final_set.clone(), Some(v))
            }
            Method::MatcherRansac => {
                if initial.len() < 2 {
                    (initial.clone(), None)
                } else {
                    let r = ransac_similarity(&initial, &task.keypoints_a, &task.keypoints_b, &self.ransac)?;
                    (r.inliers, None)
                }
            }
        };
        let wall_time = start.elapsed().as_secs_f64();
        Ok(MethodOutput {
            initial,
            final_set,
            verification,
            wall_time,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub initial: MatchSet,
    pub final_set: MatchSet,
    pub verification: Option<VerificationResult>,
    pub wall_time: f64,
}

/// Metrics for one (method, task) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub precision: f64,
    pub n_inliers: usize,
    pub n_predicted: usize,
    pub n_initial: usize,
    pub n_initial_correct: usize,
    pub n_gt: usize,
    pub tre_gt: Option<f64>,
    pub tre_pred: Option<f64>,
    pub unit: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl TaskRow {
    fn failed(task: usize, unit: &str, e: &Error) -> Self {
        Self {
            task,
            precision: 0.0,
            n_inliers: 0,
            n_predicted: 0,
            n_initial: 0,
            n_initial_correct: 0,
            n_gt: 0,
            tre_gt: None,
            tre_pred: None,
            unit: unit.into(),
            error: Some(e.to_string()),
            wall_time: 0.0,
        }
    }
}

/// Score a prediction against a task.
pub fn evaluate(
    task_index: usize,
    task: &PairTask,
    initial: &MatchSet,
    final_set: &MatchSet,
    estimator: TreEstimator,
) -> TaskRow {
    let p = precision(&apply_gt_labels(final_set, task));
    let init = precision(&apply_gt_labels(initial, task));
    let t = tre(final_set, task, estimator);
    TaskRow {
        task: task_index,
        precision: p.precision,
        n_inliers: p.n_inliers,
        n_predicted: p.n_predicted,
        n_initial: init.n_predicted,
        n_initial_correct: init.n_inliers,
        n_gt: task.gt_matches.len(),
        tre_gt: t.map(|t| t.tre_gt),
        tre_pred: t.map(|t| t.tre_pred),
        unit: task.meta.unit.clone(),
        error: None,
        wall_time: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; zeros for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_tasks: usize,
    pub n_failed: usize,
    pub precision: MeanStd,
    /// Total inliers over total predictions.
    pub pooled_precision: f64,
    pub n_inliers: MeanStd,
    pub n_predicted: MeanStd,
    /// Correct matches kept over correct matches in the initial set, pooled.
    pub retained_recall: f64,
    pub tre_gt: MeanStd,
    pub tre_pred: MeanStd,
    pub tre_undefined: usize,
}

impl Aggregate {
    pub fn from_rows(rows: &[TaskRow]) -> Self {
        let ok: Vec<&TaskRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let col = |f: &dyn Fn(&TaskRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let inl: usize = ok.iter().map(|r| r.n_inliers).sum();
        let pred: usize = ok.iter().map(|r| r.n_predicted).sum();
        let init_ok: usize = ok.iter().map(|r| r.n_initial_correct).sum();
        let tre_gt: Vec<f64> = ok.iter().filter_map(|r| r.tre_gt).collect();
        let tre_pred: Vec<f64> = ok.iter().filter_map(|r| r.tre_pred).collect();
        Self {
            n_tasks: rows.len(),
            n_failed: rows.len() - ok.len(),
            precision: MeanStd::of(&col(&|r| r.precision)),
            pooled_precision: inl as f64 / pred.max(1) as f64,
            n_inliers: MeanStd::of(&col(&|r| r.n_inliers as f64)),
            n_predicted: MeanStd::of(&col(&|r| r.n_predicted as f64)),
            retained_recall: inl as f64 / init_ok.max(1) as f64,
            tre_gt: MeanStd::of(&tre_gt),
            tre_pred: MeanStd::of(&tre_pred),
            tre_undefined: ok.len() - tre_gt.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub aggregate: Aggregate,
    pub rows: Vec<TaskRow>,
}

/// Benchmark results. Wall times are kept out of the serialised report so
/// that equal runs produce identical files; see [`EvalReport::timing_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub methods: Vec<MethodReport>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Run every method on every task. Tasks run in parallel; each run is
/// sequential internally so its wall time is per pair.
pub fn benchmark(methods: &[Method], tasks: &[PairTask], pipeline: &Pipeline, seed: u64) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Argument("benchmark needs at least one task".into()));
    }
    let pipeline = Pipeline {
        verify: VerifyConfig {
            seed,
            ..pipeline.verify
        },
        ransac: RansacConfig {
            seed,
            ..pipeline.ransac
        },
        ..pipeline.clone()
    };
    let config = pipeline.snapshot();
    let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
    let mut reports = Vec::with_capacity(methods.len());
    for &method in methods {
        let rows: Vec<TaskRow> = tasks
            .par_iter()
            .enumerate()
            .map(|(k, task)| match pipeline.run(method, task) {
                Ok(out) => {
                    let mut row = evaluate(k, task, &out.initial, &out.final_set, pipeline.tre);
                    row.wall_time = out.wall_time;
                    row
                }
                Err(e) => {
                    log::warn!("{} on task {k}: {e}", method.tag());
                    TaskRow::failed(k, &task.meta.unit, &e)
                }
            })
            .collect();
        reports.push(MethodReport {
            method,
            aggregate: Aggregate::from_rows(&rows),
            rows,
        });
    }
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        seed,
        config_hash,
        config,
        methods: reports,
    })
}

impl EvalReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-method wall time statistics and per-task times, seconds.
    pub fn timing_json(&self) -> Result<String> {
        let mut out = BTreeMap::new();
        for r in &self.methods {
            let times: Vec<f64> = r.rows.iter().map(|row| row.wall_time).collect();
            out.insert(
                r.method.tag(),
                serde_json::json!({ "wall_time": MeanStd::of(&times), "per_task": times }),
            );
        }
        Ok(serde_json::to_string_pretty(&out)?)
    }

    /// Aligned text table, one row per method.
    pub fn to_table(&self) -> String {
        let unit = self
            .methods
            .iter()
            .flat_map(|m| m.rows.first())
            .map(|r| r.unit.clone())
            .next()
            .unwrap_or_else(|| "px".into());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>18} {:>16} {:>18} {:>10} {:>12}",
            "method",
            "precision (%)",
            "# inliers",
            format!("TRE ({unit})"),
            "recall",
            "time (s)"
        );
        for r in &self.methods {
            let a = &r.aggregate;
            let times: Vec<f64> = r.rows.iter().map(|row| row.wall_time).collect();
            let _ = writeln!(
                s,
                "{:<24} {:>18} {:>16} {:>18} {:>10.3} {:>12.4}",
                r.method.tag(),
                format!("{:.1} ± {:.1}", 100.0 * a.precision.mean, 100.0 * a.precision.std),
                format!("{:.1} ± {:.1}", a.n_inliers.mean, a.n_inliers.std),
                format!("{:.2} ± {:.2}", a.tre_gt.mean, a.tre_gt.std),
                a.retained_recall,
                MeanStd::of(&times).mean
            );
        }
        s
    }

    /// One line per (method, task).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,task,precision,n_inliers,n_predicted,n_initial,n_initial_correct,n_gt,tre_gt,tre_pred,unit,error\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.methods {
            for row in &r.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.method.tag(),
                    row.task,
                    row.precision,
                    row.n_inliers,
                    row.n_predicted,
                    row.n_initial,
                    row.n_initial_correct,
                    row.n_gt,
                    opt(row.tre_gt),
                    opt(row.tre_pred),
                    row.unit,
                    row.error.as_deref().unwrap_or("").replace(',', ";")
                );
            }
        }
        s
    }
}
