//! Keypoint descriptor sets, semantic feature maps and descriptor fusion.
//!
//! A [`DescriptorSet`] carries the keypoints of one image with up to three
//! row-aligned descriptor matrices: local (patch) descriptors, semantic
//! vectors sampled bilinearly from a dense [`FeatureMap`], and fused
//! descriptors produced by [`fuse`] through a [`FusionNet`].

mod context;
mod format;
mod fusion;

pub use context::{context_feature_map, ContextConfig};
pub use format::{
    read_descriptors, read_descriptors_from, read_feature_map, read_feature_map_from, write_descriptors,
    write_descriptors_to, write_feature_map, write_feature_map_to,
};
pub use fusion::{dual_softmax_nll, train_fusion, FusionExample, FusionNet, FusionTrainOutcome};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::raster::{reflect, Image};

/// Row-major `rows × dim` matrix of `f32`, the storage precision of the
/// interchange format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::Argument("descriptor matrix with zero columns but data".into()));
        }
        if dim > 0 && !data.len().is_multiple_of(dim) {
            return Err(Error::Argument(format!(
                "descriptor buffer of {} values is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<Self> {
        let mut data = Vec::new();
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Argument(format!(
                    "row {k} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Where a descriptor set came from. Not stored in the interchange file;
/// sets read from disk are tagged `External`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorSource {
    BuiltinPatch,
    External,
}

#[derive(Debug, Clone)]
pub struct DescriptorSet {
    keypoints: Vec<Point2>,
    local: DescriptorMatrix,
    semantic: Option<DescriptorMatrix>,
    fused: Option<DescriptorMatrix>,
    source: DescriptorSource,
}

/// Payload equality: keypoints and matrices, ignoring `source`.
impl PartialEq for DescriptorSet {
    fn eq(&self, other: &Self) -> bool {
        self.keypoints.len() == other.keypoints.len()
            && self
                .keypoints
                .iter()
                .zip(&other.keypoints)
                .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits())
            && self.local == other.local
            && self.semantic == other.semantic
            && self.fused == other.fused
    }
}

/// Tolerance on the unit norm of fused rows.
pub const FUSED_NORM_TOLERANCE: f64 = 1e-6;

impl DescriptorSet {
    pub fn new(
        keypoints: Vec<Point2>,
        local: DescriptorMatrix,
        semantic: Option<DescriptorMatrix>,
        fused: Option<DescriptorMatrix>,
        source: DescriptorSource,
    ) -> Result<Self> {
        let n = keypoints.len();
        if keypoints.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument("non-finite keypoint".into()));
        }
        let check = |name: &str, m: &DescriptorMatrix| -> Result<()> {
            let rows = if m.dim == 0 { n } else { m.rows() };
            if rows != n {
                return Err(Error::Argument(format!("{name} has {rows} rows for {n} keypoints")));
            }
            Ok(())
        };
        check("local", &local)?;
        if let Some(m) = &semantic {
            check("semantic", m)?;
        }
        if let Some(m) = &fused {
            check("fused", m)?;
            for (k, row) in m.iter_rows().enumerate().take(n) {
                let norm = row_norm(row);
                if norm > 0.0 && (norm - 1.0).abs() > FUSED_NORM_TOLERANCE {
                    return Err(Error::Argument(format!("fused row {k} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(Self {
            keypoints,
            local,
            semantic,
            fused,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn keypoints(&self) -> &[Point2] {
        &self.keypoints
    }

    pub fn local(&self) -> &DescriptorMatrix {
        &self.local
    }

    pub fn semantic(&self) -> Option<&DescriptorMatrix> {
        self.semantic.as_ref()
    }

    pub fn fused(&self) -> Option<&DescriptorMatrix> {
        self.fused.as_ref()
    }

    pub fn source(&self) -> DescriptorSource {
        self.source
    }

    /// Attach semantic vectors sampled from `map` at every keypoint.
    pub fn with_semantic_from(mut self, map: &FeatureMap) -> Result<Self> {
        let rows = self
            .keypoints
            .iter()
            .map(|&p| bilinear_sample(map, p))
            .collect::<Result<Vec<_>>>()?;
        self.semantic = Some(DescriptorMatrix::from_rows(map.channels(), rows)?);
        self.fused = None;
        Ok(self)
    }

    pub fn with_semantic(mut self, semantic: DescriptorMatrix) -> Result<Self> {
        if semantic.rows() != self.len() && !(self.is_empty() && semantic.rows() == 0) {
            return Err(Error::Argument("semantic rows do not match keypoints".into()));
        }
        self.semantic = Some(semantic);
        self.fused = None;
        Ok(self)
    }

    /// Indices of all-zero local rows (flat patches).
    pub fn degenerate_rows(&self) -> Vec<usize> {
        self.local
            .iter_rows()
            .enumerate()
            .take(self.len())
            .filter(|(_, r)| r.iter().all(|&v| v == 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Keep only the listed rows, in the listed order.
    pub fn select(&self, indices: &[usize]) -> DescriptorSet {
        let pick = |m: &DescriptorMatrix| DescriptorMatrix {
            dim: m.dim,
            data: indices.iter().flat_map(|&i| m.row(i).iter().copied()).collect(),
        };
        DescriptorSet {
            keypoints: indices.iter().map(|&i| self.keypoints[i]).collect(),
            local: pick(&self.local),
            semantic: self.semantic.as_ref().map(pick),
            fused: self.fused.as_ref().map(pick),
            source: self.source,
        }
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Dense `height × width × channels` grid; cell `(r, c)` describes image
/// position `(c · stride, r · stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    stride: f32,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: f32, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Argument("feature map dimensions must be positive".into()));
        }
        if !(stride >= 1.0 && stride.is_finite()) {
            return Err(Error::Argument(format!(
                "feature map stride must be >= 1, got {stride}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "feature map buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature map has non-finite entries".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> f32 {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let off = (r * self.width + c) * self.channels;
        &self.data[off..off + self.channels]
    }
}

/// Channel-wise bilinear interpolation at image position `p`.
///
/// Feature coordinates are `p / stride`. Positions up to half a cell beyond
/// the outermost cells are clamped onto them; anything further is an error.
pub fn bilinear_sample(map: &FeatureMap, p: Point2) -> Result<Vec<f64>> {
    let stride = map.stride as f64;
    let u = p.x / stride;
    let v = p.y / stride;
    let umax = (map.width - 1) as f64;
    let vmax = (map.height - 1) as f64;
    if !(u >= -0.5 && v >= -0.5 && u <= umax + 0.5 && v <= vmax + 0.5) {
        return Err(Error::OutOfBounds { x: p.x, y: p.y });
    }
    let u = u.clamp(0.0, umax);
    let v = v.clamp(0.0, vmax);
    let c0 = (u.floor() as usize).min(map.width.saturating_sub(2));
    let r0 = (v.floor() as usize).min(map.height.saturating_sub(2));
    let c1 = (c0 + 1).min(map.width - 1);
    let r1 = (r0 + 1).min(map.height - 1);
    let fu = u - c0 as f64;
    let fv = v - r0 as f64;
    let (a, b, c, d) = (map.cell(r0, c0), map.cell(r0, c1), map.cell(r1, c0), map.cell(r1, c1));
    Ok((0..map.channels)
        .map(|k| {
            let top = a[k] as f64 * (1.0 - fu) + b[k] as f64 * fu;
            let bottom = c[k] as f64 * (1.0 - fu) + d[k] as f64 * fu;
            top * (1.0 - fv) + bottom * fv
        })
        .collect())
}

/// Default patch side; gives 225-dimensional local descriptors.
pub const DEFAULT_PATCH: usize = 15;

/// Mean-subtracted, L2-normalised square patches around each keypoint.
///
/// Pixels are read bilinearly at sub-pixel keypoint offsets, with reflected
/// borders. Flat patches (no contrast) yield all-zero rows.
pub fn compute_patch_descriptor(image: &Image, keypoints: &[Point2], patch: usize) -> Result<DescriptorSet> {
    if patch.is_multiple_of(2) || patch == 0 {
        return Err(Error::Argument(format!("patch size must be odd, got {patch}")));
    }
    let half = (patch / 2) as f64;
    let dim = patch * patch;
    let mut data = Vec::with_capacity(keypoints.len() * dim);
    let mut flat = 0usize;
    let mut buf = vec![0.0f64; dim];
    for &kp in keypoints {
        if !kp.is_finite() {
            return Err(Error::Argument("non-finite keypoint".into()));
        }
        for dy in 0..patch {
            for dx in 0..patch {
                let x = kp.x + dx as f64 - half;
                let y = kp.y + dy as f64 - half;
                buf[dy * patch + dx] = sample_reflect(image, x, y);
            }
        }
        let mean = buf.iter().sum::<f64>() / dim as f64;
        buf.iter_mut().for_each(|v| *v -= mean);
        let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Relative guard: rounding in the mean leaves ~1e-16 residue on flat patches.
        if norm <= 1e-9 * (1.0 + mean.abs()) * (dim as f64).sqrt() {
            flat += 1;
            data.extend(std::iter::repeat_n(0.0f32, dim));
        } else {
            data.extend(buf.iter().map(|v| (v / norm) as f32));
        }
    }
    if flat > 0 {
        log::warn!(
            "{flat} of {} patch descriptors are degenerate (flat patch)",
            keypoints.len()
        );
    }
    DescriptorSet::new(
        keypoints.to_vec(),
        DescriptorMatrix::new(dim, data)?,
        None,
        None,
        DescriptorSource::BuiltinPatch,
    )
}

fn sample_reflect(image: &Image, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let (w, h) = (image.width(), image.height());
    let g = |xx: isize, yy: isize| image.get(reflect(xx, w), reflect(yy, h));
    let top = g(xi, yi) * (1.0 - fx) + g(xi + 1, yi) * fx;
    let bottom = g(xi, yi + 1) * (1.0 - fx) + g(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Fuse local and semantic descriptors: each row is `normalize(net([local; semantic]))`.
pub fn fuse(ds: &DescriptorSet, fusion: &FusionNet) -> Result<DescriptorSet> {
    let semantic = ds.semantic.as_ref().ok_or_else(|| {
        Error::Precondition("fusion needs semantic descriptors; run local-only matching instead".into())
    })?;
    let (dl, dsem) = (ds.local.dim(), semantic.dim());
    if dl != fusion.local_dim() || dsem != fusion.semantic_dim() {
        return Err(Error::Argument(format!(
            "fusion net expects ({}, {}) inputs, descriptor set has ({dl}, {dsem})",
            fusion.local_dim(),
            fusion.semantic_dim()
        )));
    }
    let mut data = Vec::with_capacity(ds.len() * fusion.output_dim());
    let mut input = Vec::with_capacity(dl + dsem);
    for i in 0..ds.len() {
        input.clear();
        input.extend(ds.local.row(i).iter().map(|&v| v as f64));
        input.extend(semantic.row(i).iter().map(|&v| v as f64));
        let out = fusion.net().forward(&input)?;
        data.extend(normalize(&out).into_iter().map(|v| v as f32));
    }
    let mut out = ds.clone();
    out.fused = Some(DescriptorMatrix::new(fusion.output_dim(), data)?);
    Ok(out)
}

/// L2 normalisation; the zero vector maps to itself.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNet, Layer};

    fn map_2x2() -> FeatureMap {
        FeatureMap::new(2, 2, 1, 1.0, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn sample_on_cell_returns_cell() {
        let data: Vec<f32> = (0..3 * 4 * 2).map(|v| v as f32 * 0.5).collect();
        let map = FeatureMap::new(3, 4, 2, 1.0, data).unwrap();
        let v = bilinear_sample(&map, Point2::new(2.0, 1.0)).unwrap();
        let cell = map.cell(1, 2);
        assert_eq!(v, vec![cell[0] as f64, cell[1] as f64]);
    }

    #[test]
    fn sample_between_four_cells_is_mean() {
        let v = bilinear_sample(&map_2x2(), Point2::new(0.5, 0.5)).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sample_constant_map() {
        let map = FeatureMap::new(5, 6, 3, 8.0, vec![0.25; 90]).unwrap();
        for p in [Point2::new(0.0, 0.0), Point2::new(13.7, 29.1), Point2::new(43.9, 35.5)] {
            let v = bilinear_sample(&map, p).unwrap();
            assert!(v.iter().all(|x| (x - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn sample_clamps_within_half_cell() {
        let map = map_2x2();
        let v = bilinear_sample(&map, Point2::new(-0.4, 1.4)).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!(matches!(
            bilinear_sample(&map, Point2::new(-0.6, 0.0)),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(bilinear_sample(&map, Point2::new(0.0, 1.6)).is_err());
    }

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let img = Image::from_vec(20, 20, vec![0.3; 400]).unwrap();
        let ds = compute_patch_descriptor(&img, &[Point2::new(10.0, 10.0), Point2::new(1.0, 1.0)], 5).unwrap();
        assert!(ds.local().data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.degenerate_rows(), vec![0, 1]);
    }

    #[test]
    fn patch_descriptor_affine_intensity_invariance() {
        let data: Vec<f64> = (0..400).map(|i| (i * 37 % 101) as f64 / 101.0).collect();
        let img = Image::from_vec(20, 20, data).unwrap();
        let img2 = img.map(|v| 2.0 * v + 0.1);
        let kps = [Point2::new(4.3, 7.8), Point2::new(0.0, 19.0), Point2::new(12.0, 12.0)];
        let a = compute_patch_descriptor(&img, &kps, 7).unwrap();
        let b = compute_patch_descriptor(&img2, &kps, 7).unwrap();
        for (x, y) in a.local().data().iter().zip(b.local().data()) {
            assert!((x - y).abs() < 1e-6);
        }
        for row in a.local().iter_rows() {
            assert!((row_norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn even_patch_rejected() {
        let img = Image::new(8, 8);
        assert!(compute_patch_descriptor(&img, &[], 4).is_err());
    }

    #[test]
    fn fuse_identity_with_zero_semantic() {
        let local = DescriptorMatrix::new(2, vec![3.0, 4.0, 0.6, 0.8]).unwrap();
        let sem = DescriptorMatrix::new(1, vec![0.0, 0.0]).unwrap();
        let ds = DescriptorSet::new(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)],
            local,
            Some(sem),
            None,
            DescriptorSource::External,
        )
        .unwrap();
        let mut layer = Layer::zeros(3, 3, Activation::None);
        for k in 0..3 {
            layer.weights[k * 3 + k] = 1.0;
        }
        let fusion = FusionNet::new(DenseNet::from_layers(vec![layer]).unwrap(), 2, 1).unwrap();
        let out = fuse(&ds, &fusion).unwrap();
        let f = out.fused().unwrap();
        let expect = [0.6f32, 0.8, 0.0];
        for row in f.iter_rows() {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() < 1e-7);
            }
        }
        assert_eq!(out.local(), ds.local());
    }

    #[test]
    fn fuse_empty_set() {
        let ds = DescriptorSet::new(
            vec![],
            DescriptorMatrix::empty(4),
            Some(DescriptorMatrix::empty(2)),
            None,
            DescriptorSource::External,
        )
        .unwrap();
        let fusion = FusionNet::with_defaults(4, 2, 3).unwrap();
        let out = fuse(&ds, &fusion).unwrap();
        assert_eq!(out.fused().unwrap().rows(), 0);
    }

    #[test]
    fn fuse_requires_semantic() {
        let ds = DescriptorSet::new(
            vec![Point2::new(0.0, 0.0)],
            DescriptorMatrix::new(2, vec![1.0, 0.0]).unwrap(),
            None,
            None,
            DescriptorSource::External,
        )
        .unwrap();
        let fusion = FusionNet::with_defaults(2, 1, 0).unwrap();
        assert!(matches!(fuse(&ds, &fusion), Err(Error::Precondition(_))));
    }

    #[test]
    fn rows_must_match_keypoints() {
        let err = DescriptorSet::new(
            vec![Point2::new(0.0, 0.0)],
            DescriptorMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            None,
            None,
            DescriptorSource::External,
        );
        assert!(err.is_err());
    }
}
