//! 2-D points and the transforms used for deformation synthesis, RANSAC model
//! fitting and registration-error evaluation.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::TRANSFORM_FORMAT_VERSION;

/// A point in image coordinates (x to the right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(&self, other: Point2) -> f64 {
        (*self - other).norm()
    }

    pub fn dist_sq(&self, other: Point2) -> f64 {
        (*self - other).norm_sq()
    }

    pub fn dot(&self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn rotate(&self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

pub fn centroid(points: &[Point2]) -> Point2 {
    if points.is_empty() {
        return Point2::default();
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2::new(sx / n, sy / n)
}

/// Root-mean-square distance of `points` from `center`.
pub fn rms_radius(points: &[Point2], center: Point2) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let s: f64 = points.iter().map(|p| p.dist_sq(center)).sum();
    (s / points.len() as f64).sqrt()
}

/// `p -> scale * R(rotation) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Point2,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: Point2::default(),
        }
    }

    pub fn new(scale: f64, rotation: f64, translation: Point2) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Argument(format!("similarity scale must be > 0, got {scale}")));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        p.rotate(self.rotation) * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let scale = 1.0 / self.scale;
        let rotation = -self.rotation;
        let translation = (self.translation * -scale).rotate(rotation);
        Self {
            scale,
            rotation,
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation + other.rotation,
            translation: self.apply(other.translation),
        }
    }

    /// Equivalent 2×3 affine matrix, row-major.
    pub fn to_affine(&self) -> AffineTransform {
        let (s, c) = self.rotation.sin_cos();
        let k = self.scale;
        AffineTransform {
            matrix: [k * c, -k * s, self.translation.x, k * s, k * c, self.translation.y],
        }
    }
}

/// Least-squares similarity between paired points.
///
/// Treating points as complex numbers, the optimal `a = s·e^{iθ}` is
/// `Σ conj(u)·v / Σ|u|²` over centred sources `u` and targets `v`.
pub fn similarity_fit(pairs: &[(Point2, Point2)]) -> Result<SimilarityTransform> {
    if pairs.len() < 2 {
        return Err(Error::Argument(format!(
            "similarity fit needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Argument("non-finite point in similarity fit".into()));
    }
    let src: Vec<Point2> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point2> = pairs.iter().map(|p| p.1).collect();
    let cs = centroid(&src);
    let cd = centroid(&dst);

    let mut re = 0.0;
    let mut im = 0.0;
    let mut denom = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let u = *s - cs;
        let v = *d - cd;
        re += u.x * v.x + u.y * v.y;
        im += u.x * v.y - u.y * v.x;
        denom += u.norm_sq();
    }
    let spread = src.iter().map(|p| p.norm_sq()).fold(0.0, f64::max).max(1.0);
    if denom <= 1e-18 * spread {
        return Err(Error::Degenerate("similarity fit: source points coincide".into()));
    }
    let ar = re / denom;
    let ai = im / denom;
    let scale = (ar * ar + ai * ai).sqrt();
    if scale <= 0.0 {
        return Err(Error::Degenerate("similarity fit: zero scale".into()));
    }
    let rotation = ai.atan2(ar);
    let translation = Point2::new(cd.x - (ar * cs.x - ai * cs.y), cd.y - (ai * cs.x + ar * cs.y));
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// General 2×3 affine map, row-major: `[a, b, tx, c, d, ty]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [f64; 6],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.matrix;
        Point2::new(m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5])
    }
}

/// Least-squares affine fit; needs three non-collinear sources.
pub fn affine_fit(pairs: &[(Point2, Point2)]) -> Result<AffineTransform> {
    if pairs.len() < 3 {
        return Err(Error::Argument(format!(
            "affine fit needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len();
    let mut design = DMatrix::<f64>::zeros(n, 3);
    let mut bx = DVector::<f64>::zeros(n);
    let mut by = DVector::<f64>::zeros(n);
    for (k, (s, d)) in pairs.iter().enumerate() {
        design[(k, 0)] = s.x;
        design[(k, 1)] = s.y;
        design[(k, 2)] = 1.0;
        bx[k] = d.x;
        by[k] = d.y;
    }
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    if sv.min() <= 1e-10 * smax {
        return Err(Error::Degenerate("affine fit: collinear sources".into()));
    }
    let px = svd.solve(&bx, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let py = svd.solve(&by, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(AffineTransform {
        matrix: [px[0], px[1], px[2], py[0], py[1], py[2]],
    })
}

/// Radial basis of the 2-D thin-plate spline, `U(r) = r² log r`, `U(0) = 0`.
#[inline]
pub fn tps_kernel(r_sq: f64) -> f64 {
    if r_sq <= 0.0 {
        0.0
    } else {
        0.5 * r_sq * r_sq.ln()
    }
}

/// Thin-plate spline `f(p) = A·[p;1] + Σ_k w_k U(|p − c_k|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinPlateSpline {
    control_points: Vec<Point2>,
    /// Row-major 2×3: `[a, b, tx, c, d, ty]`.
    affine: [f64; 6],
    weights: Vec<Point2>,
    lambda: f64,
}

const DEGENERACY_RATIO: f64 = 1e-10;

impl ThinPlateSpline {
    /// The identity transform, anchored on the given control points.
    pub fn identity(control_points: Vec<Point2>) -> Self {
        let weights = vec![Point2::default(); control_points.len()];
        Self {
            control_points,
            affine: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            weights,
            lambda: 0.0,
        }
    }

    /// Assemble from raw parts, checking shapes and side conditions.
    pub fn from_parts(
        control_points: Vec<Point2>,
        affine: [f64; 6],
        weights: Vec<Point2>,
        lambda: f64,
    ) -> Result<Self> {
        if control_points.len() != weights.len() {
            return Err(Error::Argument(format!(
                "tps: {} control points but {} weights",
                control_points.len(),
                weights.len()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Argument(format!("tps: lambda must be >= 0, got {lambda}")));
        }
        let finite =
            control_points.iter().chain(&weights).all(Point2::is_finite) && affine.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Argument("tps: non-finite parameter".into()));
        }
        let tps = Self {
            control_points,
            affine,
            weights,
            lambda,
        };
        let scale = tps.weight_scale();
        if tps.side_condition_residual() > 1e-6 * scale.max(1e-12) {
            return Err(Error::Argument("tps: weights violate side conditions".into()));
        }
        Ok(tps)
    }

    pub fn control_points(&self) -> &[Point2] {
        &self.control_points
    }

    pub fn affine(&self) -> [f64; 6] {
        self.affine
    }

    pub fn weights(&self) -> &[Point2] {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn weight_scale(&self) -> f64 {
        let mut s = 0.0f64;
        for (w, c) in self.weights.iter().zip(&self.control_points) {
            s = s.max(w.x.abs().max(w.y.abs()) * (1.0 + c.norm()));
        }
        s
    }

    /// Largest violation of `Σw = 0`, `Σ w·x = 0`, `Σ w·y = 0`, relative to
    /// the weight magnitudes (0 for a spline without kernel weights).
    pub fn side_condition_residual(&self) -> f64 {
        let mut sums = [0.0f64; 6];
        let mut mags = [0.0f64; 6];
        for (w, c) in self.weights.iter().zip(&self.control_points) {
            let terms = [w.x, w.y, w.x * c.x, w.y * c.x, w.x * c.y, w.y * c.y];
            for k in 0..6 {
                sums[k] += terms[k];
                mags[k] += terms[k].abs();
            }
        }
        (0..6)
            .map(|k| if mags[k] > 0.0 { sums[k].abs() / mags[k] } else { 0.0 })
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let a = &self.affine;
        let mut x = a[0] * p.x + a[1] * p.y + a[2];
        let mut y = a[3] * p.x + a[4] * p.y + a[5];
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let u = tps_kernel(p.dist_sq(*c));
            x += w.x * u;
            y += w.y * u;
        }
        Point2::new(x, y)
    }

    /// Jacobian `[[dfx/dx, dfx/dy], [dfy/dx, dfy/dy]]` at `p`.
    pub fn jacobian(&self, p: Point2) -> [[f64; 2]; 2] {
        let a = &self.affine;
        let mut j = [[a[0], a[1]], [a[3], a[4]]];
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let d = p - *c;
            let r_sq = d.norm_sq();
            if r_sq <= 0.0 {
                continue;
            }
            // d/dp (½ r² ln r²) = (ln r² + 1) · d
            let g = r_sq.ln() + 1.0;
            j[0][0] += w.x * g * d.x;
            j[0][1] += w.x * g * d.y;
            j[1][0] += w.y * g * d.x;
            j[1][1] += w.y * g * d.y;
        }
        j
    }

    /// Follow the spline with a similarity: the result maps `p -> sim(self(p))`.
    pub fn then_similarity(&self, sim: &SimilarityTransform) -> ThinPlateSpline {
        let (s, c) = sim.rotation.sin_cos();
        let k = sim.scale;
        let lin = |v: Point2| Point2::new(k * (c * v.x - s * v.y), k * (s * v.x + c * v.y));
        let a = &self.affine;
        let col_x = lin(Point2::new(a[0], a[3]));
        let col_y = lin(Point2::new(a[1], a[4]));
        let t = lin(Point2::new(a[2], a[5])) + sim.translation;
        ThinPlateSpline {
            control_points: self.control_points.clone(),
            affine: [col_x.x, col_y.x, t.x, col_x.y, col_y.y, t.y],
            weights: self.weights.iter().map(|w| lin(*w)).collect(),
            lambda: self.lambda,
        }
    }

    /// Largest kernel-weight magnitude; zero means the map is purely affine.
    pub fn max_weight(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.x.abs().max(w.y.abs()))
            .fold(0.0, f64::max)
    }
}

/// Fit a thin-plate spline mapping `source[k]` to `target[k]`.
///
/// `lambda` weights the bending energy; 0 interpolates exactly. The system is
/// assembled in centred, unit-RMS coordinates (where the regulariser becomes
/// `lambda / s²`) and the solution is mapped back to the input frame.
pub fn tps_fit(source: &[Point2], target: &[Point2], lambda: f64) -> Result<ThinPlateSpline> {
    if source.len() != target.len() {
        return Err(Error::Argument(format!(
            "tps fit: {} sources but {} targets",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Argument(format!(
            "tps fit needs at least 3 control points, got {}",
            source.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("tps fit: lambda must be >= 0, got {lambda}")));
    }
    if source.iter().chain(target).any(|p| !p.is_finite()) {
        return Err(Error::Argument("tps fit: non-finite point".into()));
    }

    let n = source.len();
    let mean = centroid(source);
    let s = rms_radius(source, mean);
    if s <= 0.0 {
        return Err(Error::Degenerate("tps fit: all control points coincide".into()));
    }
    let norm: Vec<Point2> = source.iter().map(|p| (*p - mean) * (1.0 / s)).collect();
    let lambda_n = lambda / (s * s);

    let dim = n + 3;
    let mut sys = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            sys[(i, j)] = tps_kernel(norm[i].dist_sq(norm[j]));
        }
        sys[(i, i)] += lambda_n;
        let poly = [1.0, norm[i].x, norm[i].y];
        for (k, v) in poly.iter().enumerate() {
            sys[(i, n + k)] = *v;
            sys[(n + k, i)] = *v;
        }
    }

    let sv = sys.clone().singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    if !(smin > DEGENERACY_RATIO * smax) {
        return Err(Error::Degenerate(format!(
            "tps fit: singular system (σmin/σmax = {:.3e}); control points collinear or repeated",
            smin / smax
        )));
    }

    let mut rhs = DMatrix::<f64>::zeros(dim, 2);
    for (i, t) in target.iter().enumerate() {
        rhs[(i, 0)] = t.x;
        rhs[(i, 1)] = t.y;
    }
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("tps fit: LU solve failed".into()))?;

    // Back to the input frame. With p' = (p - m)/s:
    //   w = w'/s²,  U(|p'-c'|) = U(|p-c|)/s² - (ln s / s²)|p-c|²,
    // and the side conditions reduce Σ w'|p-c|² to the constant Σ w'|c|².
    let inv_s2 = 1.0 / (s * s);
    let ln_s = s.ln();
    let mut weights = Vec::with_capacity(n);
    let mut shift = [0.0f64; 2];
    for i in 0..n {
        let wp = [sol[(i, 0)], sol[(i, 1)]];
        let c2 = source[i].norm_sq();
        for d in 0..2 {
            shift[d] += wp[d] * c2;
        }
        weights.push(Point2::new(wp[0] * inv_s2, wp[1] * inv_s2));
    }
    let mut affine = [0.0f64; 6];
    for d in 0..2 {
        let a0 = sol[(n, d)];
        let ax = sol[(n + 1, d)] / s;
        let ay = sol[(n + 2, d)] / s;
        let c0 = a0 - ax * mean.x - ay * mean.y - ln_s * inv_s2 * shift[d];
        affine[3 * d] = ax;
        affine[3 * d + 1] = ay;
        affine[3 * d + 2] = c0;
    }

    Ok(ThinPlateSpline {
        control_points: source.to_vec(),
        affine,
        weights,
        lambda,
    })
}

/// Serializable transform in the shared JSON transform format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TransformJson {
    Tps {
        control_points: Vec<[f64; 2]>,
        affine: [f64; 6],
        weights: Vec<[f64; 2]>,
        lambda: f64,
    },
    Similarity {
        scale: f64,
        rotation: f64,
        translation: [f64; 2],
    },
    Affine {
        matrix: [f64; 6],
    },
}

impl From<&ThinPlateSpline> for TransformJson {
    fn from(t: &ThinPlateSpline) -> Self {
        TransformJson::Tps {
            control_points: t.control_points.iter().map(|&p| p.into()).collect(),
            affine: t.affine,
            weights: t.weights.iter().map(|&p| p.into()).collect(),
            lambda: t.lambda,
        }
    }
}

impl From<&SimilarityTransform> for TransformJson {
    fn from(t: &SimilarityTransform) -> Self {
        TransformJson::Similarity {
            scale: t.scale,
            rotation: t.rotation,
            translation: t.translation.into(),
        }
    }
}

impl From<&AffineTransform> for TransformJson {
    fn from(t: &AffineTransform) -> Self {
        TransformJson::Affine { matrix: t.matrix }
    }
}

impl TransformJson {
    pub fn into_tps(self) -> Result<ThinPlateSpline> {
        match self {
            TransformJson::Tps {
                control_points,
                affine,
                weights,
                lambda,
            } => ThinPlateSpline::from_parts(
                control_points.into_iter().map(Point2::from).collect(),
                affine,
                weights.into_iter().map(Point2::from).collect(),
                lambda,
            ),
            other => Err(Error::Argument(format!(
                "expected a tps transform, found {}",
                other.kind()
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TransformJson::Tps { .. } => "tps",
            TransformJson::Similarity { .. } => "similarity",
            TransformJson::Affine { .. } => "affine",
        }
    }

    /// Apply whichever transform this is.
    pub fn apply(&self, p: Point2) -> Result<Point2> {
        Ok(match self {
            TransformJson::Tps { .. } => self.clone().into_tps()?.apply(p),
            TransformJson::Similarity {
                scale,
                rotation,
                translation,
            } => SimilarityTransform::new(*scale, *rotation, Point2::from(*translation))?.apply(p),
            TransformJson::Affine { matrix } => AffineTransform { matrix: *matrix }.apply(p),
        })
    }
}

/// A transform as written to disk, with its schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub transform: TransformJson,
}

impl TransformFile {
    pub fn new(transform: TransformJson) -> Self {
        Self {
            format_version: TRANSFORM_FORMAT_VERSION,
            transform,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<TransformJson> {
        let file: TransformFile = serde_json::from_str(text)?;
        if file.format_version != TRANSFORM_FORMAT_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("transform format version {}", file.format_version),
            });
        }
        Ok(file.transform)
    }
}
