//! Putative matching: dual-softmax scoring over descriptor similarities with a
//! mutual-argmax consistency check.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorMatrix, DescriptorSet};
use crate::error::{Error, Result};
use crate::formats::MATCH_FORMAT_VERSION;
use crate::geometry::{Point2, ThinPlateSpline};
use crate::synthdata::PairTask;

/// One correspondence `i ∈ A`, `j ∈ B` with a score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

impl From<(usize, usize, f64)> for Match {
    fn from((i, j, score): (usize, usize, f64)) -> Self {
        Match { i, j, score }
    }
}

impl From<Match> for (usize, usize, f64) {
    fn from(m: Match) -> Self {
        (m.i, m.j, m.score)
    }
}

/// A one-to-one set of scored correspondences between two keypoint sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub n_a: usize,
    pub n_b: usize,
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn empty(n_a: usize, n_b: usize) -> Self {
        Self {
            n_a,
            n_b,
            matches: Vec::new(),
        }
    }

    /// Build and validate: indices in range, scores in [0, 1], one-to-one.
    pub fn new(n_a: usize, n_b: usize, matches: Vec<Match>) -> Result<Self> {
        let set = Self { n_a, n_b, matches };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen_a = vec![false; self.n_a];
        let mut seen_b = vec![false; self.n_b];
        for m in &self.matches {
            if m.i >= self.n_a || m.j >= self.n_b {
                return Err(Error::Argument(format!(
                    "match ({}, {}) out of range for sizes ({}, {})",
                    m.i, m.j, self.n_a, self.n_b
                )));
            }
            if !(0.0..=1.0).contains(&m.score) {
                return Err(Error::Argument(format!("match score {} outside [0, 1]", m.score)));
            }
            if std::mem::replace(&mut seen_a[m.i], true) || std::mem::replace(&mut seen_b[m.j], true) {
                return Err(Error::Argument(format!("match ({}, {}) breaks one-to-one", m.i, m.j)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matches.iter().map(|m| (m.i, m.j))
    }

    /// Subset keeping the matches whose position is flagged in `keep`.
    pub fn filter_mask(&self, keep: &[bool]) -> MatchSet {
        MatchSet {
            n_a: self.n_a,
            n_b: self.n_b,
            matches: self
                .matches
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(m, _)| *m)
                .collect(),
        }
    }

    /// Coordinate pairs of every match.
    pub fn coordinates(&self, a: &[Point2], b: &[Point2]) -> Vec<(Point2, Point2)> {
        self.matches.iter().map(|m| (a[m.i], b[m.j])).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MatchFile {
            format_version: MATCH_FORMAT_VERSION,
            set: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MatchFile = serde_json::from_str(text)?;
        if file.format_version != MATCH_FORMAT_VERSION {
            return Err(Error::format(0, format!("match file version {}", file.format_version)));
        }
        file.set.validate()?;
        Ok(file.set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchFile {
    format_version: u32,
    #[serde(flatten)]
    set: MatchSet,
}

/// Which descriptor matrix the matcher reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorChoice {
    /// Fused if both sets carry them, local otherwise.
    #[default]
    Auto,
    Fused,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub temperature: f64,
    pub min_score: f64,
    pub descriptors: DescriptorChoice,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            min_score: 0.0,
            descriptors: DescriptorChoice::Auto,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Argument(format!(
                "min_score must be in [0, 1], got {}",
                self.min_score
            )));
        }
        Ok(())
    }
}

fn pick(ds: &DescriptorSet, choice: DescriptorChoice, other_has_fused: bool) -> Result<&DescriptorMatrix> {
    match choice {
        DescriptorChoice::Local => Ok(ds.local()),
        DescriptorChoice::Fused => ds
            .fused()
            .ok_or_else(|| Error::Precondition("fused descriptors requested but absent".into())),
        DescriptorChoice::Auto => Ok(match ds.fused() {
            Some(f) if other_has_fused => f,
            _ => ds.local(),
        }),
    }
}

/// Row-softmax times column-softmax of `sim / temperature` (`na × nb`, row-major).
pub fn dual_softmax(sim: &[f64], na: usize, nb: usize, temperature: f64) -> Vec<f64> {
    let inv_t = 1.0 / temperature;
    let scaled: Vec<f64> = sim.iter().map(|s| s * inv_t).collect();
    let mut out = vec![0.0; na * nb];
    for i in 0..na {
        let row = &scaled[i * nb..(i + 1) * nb];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..nb {
            out[i * nb + j] = (row[j] - m).exp() / z;
        }
    }
    for j in 0..nb {
        let m = (0..na).map(|i| scaled[i * nb + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..na).map(|i| (scaled[i * nb + j] - m).exp()).sum();
        for i in 0..na {
            out[i * nb + j] *= (scaled[i * nb + j] - m).exp() / z;
        }
    }
    out
}

/// Mutual argmax over a score matrix; ties go to the lowest index.
pub fn mutual_matches(scores: &[f64], na: usize, nb: usize, min_score: f64) -> Vec<Match> {
    let mut col_best = vec![0usize; nb];
    for j in 0..nb {
        let mut best = 0;
        for i in 1..na {
            if scores[i * nb + j] > scores[best * nb + j] {
                best = i;
            }
        }
        col_best[j] = best;
    }
    let mut out = Vec::new();
    for i in 0..na {
        let row = &scores[i * nb..(i + 1) * nb];
        let mut best = 0;
        for j in 1..nb {
            if row[j] > row[best] {
                best = j;
            }
        }
        if col_best[best] == i && row[best] >= min_score {
            out.push(Match {
                i,
                j: best,
                score: row[best].clamp(0.0, 1.0),
            });
        }
    }
    out
}

pub fn match_initial(a: &DescriptorSet, b: &DescriptorSet, cfg: &MatcherConfig) -> Result<MatchSet> {
    cfg.validate()?;
    let both_fused = a.fused().is_some() && b.fused().is_some();
    let da = pick(a, cfg.descriptors, both_fused)?;
    let db = pick(b, cfg.descriptors, both_fused)?;
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return Ok(MatchSet::empty(na, nb));
    }
    if da.dim() != db.dim() {
        return Err(Error::Argument(format!(
            "descriptor dimensions differ: {} vs {}",
            da.dim(),
            db.dim()
        )));
    }
    let mut sim = vec![0.0; na * nb];
    for i in 0..na {
        let ra = da.row(i);
        for j in 0..nb {
            sim[i * nb + j] = ra.iter().zip(db.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum();
        }
    }
    let scores = dual_softmax(&sim, na, nb, cfg.temperature);
    Ok(MatchSet {
        n_a: na,
        n_b: nb,
        matches: mutual_matches(&scores, na, nb, cfg.min_score),
    })
}

/// Correct iff `|gt(p_i^A) − p_j^B| ≤ tolerance`.
pub fn label_matches(
    m: &MatchSet,
    kp_a: &[Point2],
    kp_b: &[Point2],
    gt: &ThinPlateSpline,
    tolerance: f64,
) -> Vec<bool> {
    m.matches
        .iter()
        .map(|mm| gt.apply(kp_a[mm.i]).dist(kp_b[mm.j]) <= tolerance)
        .collect()
}

pub fn apply_gt_labels(m: &MatchSet, task: &PairTask) -> Vec<bool> {
    label_matches(
        m,
        &task.keypoints_a,
        &task.keypoints_b,
        &task.gt_transform,
        task.gt_tolerance,
    )
}
