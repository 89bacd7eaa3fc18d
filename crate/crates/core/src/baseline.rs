//! RANSAC verification with a global similarity (optionally affine) model.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{affine_fit, similarity_fit, AffineTransform, Point2, SimilarityTransform, TransformJson};
use crate::matcher::MatchSet;
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Fit affine models from 3 samples instead of similarities from 2.
    pub affine: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 3.0,
            min_inliers: 4,
            seed: 0,
            affine: false,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.min_inliers == 0 {
            return Err(Error::Argument("iterations and min_inliers must be positive".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::Argument(format!(
                "inlier_threshold must be > 0, got {}",
                self.inlier_threshold
            )));
        }
        Ok(())
    }

    fn sample_size(&self) -> usize {
        if self.affine {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RansacModel {
    Similarity(SimilarityTransform),
    Affine(AffineTransform),
}

impl RansacModel {
    pub fn apply(&self, p: Point2) -> Point2 {
        match self {
            RansacModel::Similarity(s) => s.apply(p),
            RansacModel::Affine(a) => a.apply(p),
        }
    }

    pub fn to_json(&self) -> TransformJson {
        match self {
            RansacModel::Similarity(s) => TransformJson::from(s),
            RansacModel::Affine(a) => TransformJson::from(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub inliers: MatchSet,
    /// `None` when no hypothesis reached `min_inliers`.
    pub model: Option<RansacModel>,
    pub iterations_run: usize,
}

impl RansacResult {
    pub fn found_consensus(&self) -> bool {
        self.model.is_some()
    }
}

/// Hypothesise-and-verify. Iteration `k` draws its sample from its own
/// substream, so the result does not depend on the worker count, and the
/// best hypothesis is the one with most inliers (earliest iteration on ties).
pub fn ransac_similarity(
    initial: &MatchSet,
    kp_a: &[Point2],
    kp_b: &[Point2],
    cfg: &RansacConfig,
) -> Result<RansacResult> {
    cfg.validate()?;
    let m = initial.len();
    let s = cfg.sample_size();
    if m < s {
        return Err(Error::InsufficientMatches { needed: s, got: m });
    }
    let pairs = initial.coordinates(kp_a, kp_b);
    let thr_sq = cfg.inlier_threshold * cfg.inlier_threshold;
    let base = rng::derive(cfg.seed, tags::RANSAC);

    let count = |model: &RansacModel| {
        pairs
            .iter()
            .filter(|(p, q)| model.apply(*p).dist_sq(*q) <= thr_sq)
            .count()
    };

    let best = (0..cfg.iterations)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = rng::stream(base, k as u64);
            let idx = sample_indices(&mut rng, m, s).into_vec();
            let sample: Vec<(Point2, Point2)> = idx.iter().map(|&x| pairs[x]).collect();
            let model = if cfg.affine {
                RansacModel::Affine(affine_fit(&sample).ok()?)
            } else {
                RansacModel::Similarity(similarity_fit(&sample).ok()?)
            };
            Some((count(&model), k, model))
        })
        .reduce_with(|x, y| if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x });

    match best {
        Some((n, _, model)) if n >= cfg.min_inliers => {
            let keep: Vec<bool> = pairs
                .iter()
                .map(|(p, q)| model.apply(*p).dist_sq(*q) <= thr_sq)
                .collect();
            Ok(RansacResult {
                inliers: initial.filter_mask(&keep),
                model: Some(model),
                iterations_run: cfg.iterations,
            })
        }
        _ => {
            log::debug!("ransac: no hypothesis reached {} inliers", cfg.min_inliers);
            Ok(RansacResult {
                inliers: MatchSet::empty(initial.n_a, initial.n_b),
                model: None,
                iterations_run: cfg.iterations,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::Match;

    #[test]
    fn exact_similarity_recovered() {
        let truth = SimilarityTransform::new(1.3, 0.4, Point2::new(5.0, -2.0)).unwrap();
        let a: Vec<Point2> = (0..20)
            .map(|k| Point2::new((k * 13 % 17) as f64 * 9.0, (k * 7 % 19) as f64 * 8.0))
            .collect();
        let b: Vec<Point2> = a.iter().map(|&p| truth.apply(p)).collect();
        let ms = MatchSet::new(20, 20, (0..20).map(|k| Match { i: k, j: k, score: 1.0 }).collect()).unwrap();
        let r = ransac_similarity(&ms, &a, &b, &RansacConfig::default()).unwrap();
        assert_eq!(r.inliers.len(), 20);
        let Some(RansacModel::Similarity(s)) = r.model else {
            panic!()
        };
        assert!((s.scale - 1.3).abs() < 1e-6 && (s.rotation - 0.4).abs() < 1e-6);
        assert!(s.translation.dist(truth.translation) < 1e-6);
    }

    #[test]
    fn too_few() {
        let ms = MatchSet::new(1, 1, vec![Match { i: 0, j: 0, score: 1.0 }]).unwrap();
        let p = [Point2::new(0.0, 0.0)];
        assert!(matches!(
            ransac_similarity(&ms, &p, &p, &RansacConfig::default()),
            Err(Error::InsufficientMatches { .. })
        ));
    }

    #[test]
    fn bad_threshold() {
        let cfg = RansacConfig {
            inlier_threshold: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
