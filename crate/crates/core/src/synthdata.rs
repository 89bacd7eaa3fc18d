//! Synthetic neuron scenes, two simulated imaging modalities, smooth random
//! deformations and the matching tasks built from them.
//!
//! Every generator is a pure function of its configuration and seed.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{
    compute_patch_descriptor, context_feature_map, read_descriptors, write_descriptors, ContextConfig, DescriptorSet,
    DEFAULT_PATCH,
};
use crate::error::{Error, Result};
use crate::formats::TASK_FORMAT_VERSION;
use crate::geometry::{tps_fit, Point2, SimilarityTransform, ThinPlateSpline, TransformFile, TransformJson};
use crate::raster::Image;
use crate::rng::{self, tags};

/// Distance under which a warped keypoint counts as the true correspondence.
pub const DEFAULT_GT_TOLERANCE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_neurons: usize,
    /// Range of the Gaussian major-axis sigma, pixels.
    pub blob_radius_range: (f64, f64),
    /// Minor/major axis ratio range.
    pub aspect_range: (f64, f64),
    pub intensity_range: (f64, f64),
    /// Each neuron gets 0 to this many neurites.
    pub max_neurites: usize,
    /// Neurite length range, pixels.
    pub neurite_length_range: (f64, f64),
    /// Peak amplitude of the fine background texture (0 disables it).
    pub texture_amplitude: f64,
    /// Correlation length of the background texture, pixels.
    pub texture_sigma: f64,
    /// Minimum distance between blob centres, pixels.
    pub min_separation: f64,
    /// Blob centres stay this far from the border.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            n_neurons: 50,
            blob_radius_range: (2.5, 6.0),
            aspect_range: (0.45, 1.0),
            intensity_range: (0.35, 1.0),
            max_neurites: 3,
            neurite_length_range: (6.0, 16.0),
            texture_amplitude: 0.3,
            texture_sigma: 2.0,
            min_separation: 16.0,
            margin: 8.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.blob_radius_range;
        let (a0, a1) = self.aspect_range;
        let (i0, i1) = self.intensity_range;
        let mut problems = Vec::new();
        if self.image_size < 16 {
            problems.push("image_size must be at least 16".to_string());
        }
        if self.n_neurons == 0 {
            problems.push("n_neurons must be positive".to_string());
        }
        if !(r0 > 0.0 && r0 <= r1) {
            problems.push(format!("blob_radius_range {r0}..{r1} invalid"));
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            problems.push(format!("aspect_range {a0}..{a1} invalid"));
        }
        if !(0.0 <= i0 && i0 <= i1 && i1 <= 1.0) {
            problems.push(format!("intensity_range {i0}..{i1} must lie in [0, 1]"));
        }
        let (l0, l1) = self.neurite_length_range;
        if !(l0 > 0.0 && l0 <= l1) {
            problems.push(format!("neurite_length_range {l0}..{l1} invalid"));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_sigma > 0.0) {
            problems.push("texture_amplitude must be >= 0 and texture_sigma > 0".to_string());
        }
        if !(self.min_separation >= 2.0) {
            problems.push("min_separation must be at least 2 px".to_string());
        }
        if !(self.margin >= 0.0 && 2.0 * self.margin < self.image_size as f64) {
            problems.push("margin does not fit the image".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Argument(format!("scene config: {}", problems.join("; "))))
        }
    }
}

/// A thin process leaving the soma, fading towards its tip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neurite {
    pub angle: f64,
    pub length: f64,
    pub width: f64,
}

/// One neuron: an elliptical Gaussian soma with optional neurites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Point2,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub angle: f64,
    pub intensity: f64,
    pub neurites: Vec<Neurite>,
}

/// Relative brightness of neurites at the soma.
const NEURITE_GAIN: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub keypoints: Vec<Point2>,
    pub blobs: Vec<Blob>,
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn render_blobs(size: usize, blobs: &[Blob]) -> Image {
    let mut img = Image::new(size, size);
    for b in blobs {
        let longest = b.neurites.iter().map(|n| n.length + 3.0 * n.width).fold(0.0, f64::max);
        let reach = (3.5 * b.sigma_major).max(longest).ceil() as isize;
        let dirs: Vec<(Point2, &Neurite)> = b
            .neurites
            .iter()
            .map(|n| (Point2::new(n.angle.cos(), n.angle.sin()), n))
            .collect();
        let (s, c) = b.angle.sin_cos();
        let cx = b.center.x.round() as isize;
        let cy = b.center.y.round() as isize;
        for y in (cy - reach).max(0)..=(cy + reach).min(size as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(size as isize - 1) {
                let dx = x as f64 - b.center.x;
                let dy = y as f64 - b.center.y;
                let u = (c * dx + s * dy) / b.sigma_major;
                let v = (-s * dx + c * dy) / b.sigma_minor;
                let mut val = b.intensity * (-0.5 * (u * u + v * v)).exp();
                for (d, n) in &dirs {
                    let t = (dx * d.x + dy * d.y).clamp(0.0, n.length);
                    let (ex, ey) = (dx - t * d.x, dy - t * d.y);
                    let fade = 1.0 - 0.7 * t / n.length;
                    let w =
                        NEURITE_GAIN * b.intensity * fade * (-(ex * ex + ey * ey) / (2.0 * n.width * n.width)).exp();
                    val = val.max(w);
                }
                let (xu, yu) = (x as usize, y as usize);
                let cur = img.get(xu, yu);
                img.set(xu, yu, cur.max(val));
            }
        }
    }
    img
}

fn place_blobs(cfg: &SceneConfig) -> Result<Vec<Blob>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, tags::SCENE);
    let lo = cfg.margin;
    let hi = cfg.image_size as f64 - 1.0 - cfg.margin;
    let min_sq = cfg.min_separation * cfg.min_separation;
    let mut blobs: Vec<Blob> = Vec::with_capacity(cfg.n_neurons);
    let max_attempts = 10_000 * cfg.n_neurons;
    let mut attempts = 0;
    while blobs.len() < cfg.n_neurons {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Argument(format!(
                "cannot place {} blobs {} px apart in a {} px image",
                cfg.n_neurons, cfg.min_separation, cfg.image_size
            )));
        }
        let p = Point2::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        if blobs.iter().any(|b| b.center.dist_sq(p) < min_sq) {
            continue;
        }
        let sigma_major = uniform(&mut rng, cfg.blob_radius_range);
        let aspect = uniform(&mut rng, cfg.aspect_range);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = uniform(&mut rng, cfg.intensity_range);
        let n_neurites = rng.random_range(0..=cfg.max_neurites);
        let neurites = (0..n_neurites)
            .map(|_| Neurite {
                angle: rng.random_range(0.0..std::f64::consts::TAU),
                length: uniform(&mut rng, cfg.neurite_length_range),
                width: rng.random_range(0.8..1.5),
            })
            .collect();
        blobs.push(Blob {
            center: p,
            sigma_major,
            sigma_minor: sigma_major * aspect,
            angle,
            intensity,
            neurites,
        });
    }
    Ok(blobs)
}

/// Blurred white noise, standardised, rectified and scaled to peak near 1.
fn background_texture(size: usize, sigma: f64, seed: u64) -> Image {
    let mut rng = rng::stream(seed, tags::TEXTURE);
    let mut noise = Image::new(size, size);
    for v in noise.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let blurred = noise.gaussian_blur(sigma);
    let n = blurred.data().len() as f64;
    let std = (blurred.data().iter().map(|v| v * v).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    blurred.map(|v| (v / (3.0 * std)).clamp(0.0, 1.0))
}

/// Render neurons at seeded positions; keypoints are the soma centres.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    let blobs = place_blobs(cfg)?;
    let mut image = render_blobs(cfg.image_size, &blobs);
    if cfg.texture_amplitude > 0.0 {
        let tex = background_texture(cfg.image_size, cfg.texture_sigma, cfg.seed);
        for (v, t) in image.data_mut().iter_mut().zip(tex.data()) {
            *v = (*v + cfg.texture_amplitude * t).min(1.0);
        }
    }
    Ok(Scene {
        image,
        keypoints: blobs.iter().map(|b| b.center).collect(),
        blobs,
    })
}

/// Appearance model of one imaging modality.
///
/// Applied in order: Gaussian blur, contrast remap `offset + gain · v^gamma`,
/// signal-dependent noise `noise · sqrt(v + 0.01) · N(0, 1)`, clamp to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStyle {
    pub name: String,
    pub blur_sigma: f64,
    pub gamma: f64,
    pub gain: f64,
    pub offset: f64,
    pub noise: f64,
}

impl ModalityStyle {
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            blur_sigma: 0.0,
            gamma: 1.0,
            gain: 1.0,
            offset: 0.0,
            noise: 0.0,
        }
    }

    /// Sharp, lightly noisy, linear response.
    pub fn modality_a() -> Self {
        Self {
            name: "modality_a".into(),
            blur_sigma: 0.8,
            gamma: 1.0,
            gain: 1.0,
            offset: 0.0,
            noise: 0.04,
        }
    }

    /// Blurrier, noisier, compressed response on a raised background.
    pub fn modality_b() -> Self {
        Self {
            name: "modality_b".into(),
            blur_sigma: 2.0,
            gamma: 0.55,
            gain: 0.7,
            offset: 0.12,
            noise: 0.08,
        }
    }

    /// Variant `k` of `n` around this style: gamma and noise are spread
    /// symmetrically, standing in for different projection settings.
    pub fn variant(&self, k: usize, n: usize) -> Self {
        if n <= 1 {
            return self.clone();
        }
        let t = k as f64 / (n - 1) as f64 - 0.5; // -0.5 ..= 0.5
        Self {
            name: format!("{}#{k}", self.name),
            gamma: self.gamma * (1.0 + 0.5 * t),
            noise: self.noise * (1.0 + 0.8 * t),
            blur_sigma: self.blur_sigma * (1.0 + 0.4 * t),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.blur_sigma >= 0.0 && self.gamma > 0.0 && self.gain > 0.0 && self.noise >= 0.0;
        if !ok {
            return Err(Error::Argument(format!("invalid modality style {self:?}")));
        }
        Ok(())
    }
}

pub fn render_modality(image: &Image, style: &ModalityStyle, seed: u64) -> Result<Image> {
    style.validate()?;
    let mut out = image.gaussian_blur(style.blur_sigma);
    let mut rng = rng::stream(seed, tags::MODALITY_NOISE);
    for v in out.data_mut() {
        let base = v.max(0.0);
        let mut x = if style.gamma == 1.0 {
            base
        } else {
            base.powf(style.gamma)
        };
        x = style.offset + style.gain * x;
        if style.noise > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            x += style.noise * (x + 0.01).sqrt() * z;
        }
        *v = x.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    /// Control points per axis.
    pub grid: usize,
    /// Std of the random control-point displacements, pixels.
    pub displacement_sigma: f64,
    /// Global rotation jitter bound, radians.
    pub max_rotation: f64,
    /// Global scale jitter bound, as a fraction.
    pub max_scale_jitter: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            displacement_sigma: 0.05 * 512.0,
            max_rotation: 0.1,
            max_scale_jitter: 0.05,
        }
    }
}

/// Control displacements are resampled beyond this many sigmas.
pub const DISPLACEMENT_TRUNCATION: f64 = 4.0;
/// Deformations whose Jacobian determinant falls below this anywhere are
/// rejected as folding/tearing.
pub const MIN_JACOBIAN_DET: f64 = 0.2;

impl DeformConfig {
    pub fn with_sigma_fraction(image_size: usize, fraction: f64) -> Self {
        Self {
            displacement_sigma: fraction * image_size as f64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::Degenerate(format!("deformation grid {} < 2", self.grid)));
        }
        if !(self.displacement_sigma >= 0.0) || !(self.max_rotation >= 0.0) {
            return Err(Error::Argument(
                "displacement_sigma and max_rotation must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.max_scale_jitter) {
            return Err(Error::Argument("max_scale_jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}

fn control_grid(grid: usize, image_size: usize) -> Vec<Point2> {
    let span = (image_size - 1) as f64;
    let mut pts = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            pts.push(Point2::new(
                span * gx as f64 / (grid - 1) as f64,
                span * gy as f64 / (grid - 1) as f64,
            ));
        }
    }
    pts
}

fn min_jacobian_det(t: &ThinPlateSpline, image_size: usize) -> f64 {
    let step = (image_size / 16).max(1);
    let mut worst = f64::INFINITY;
    for y in (0..image_size).step_by(step) {
        for x in (0..image_size).step_by(step) {
            let j = t.jacobian(Point2::new(x as f64, y as f64));
            worst = worst.min(j[0][0] * j[1][1] - j[0][1] * j[1][0]);
        }
    }
    worst
}

/// Random smooth deformation: a control grid, jittered by a global
/// similarity about the image centre plus truncated Gaussian displacements,
/// interpolated by a thin-plate spline.
pub fn sample_deformation(cfg: &DeformConfig, image_size: usize, seed: u64) -> Result<ThinPlateSpline> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, tags::DEFORM);
    let src = control_grid(cfg.grid, image_size);
    let c = (image_size - 1) as f64 / 2.0;
    let center = Point2::new(c, c);
    let limit = DISPLACEMENT_TRUNCATION * cfg.displacement_sigma;
    for _ in 0..100 {
        let rot = if cfg.max_rotation > 0.0 {
            rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
        } else {
            0.0
        };
        let scale = 1.0
            + if cfg.max_scale_jitter > 0.0 {
                rng.random_range(-cfg.max_scale_jitter..=cfg.max_scale_jitter)
            } else {
                0.0
            };
        let dst: Vec<Point2> = src
            .iter()
            .map(|&p| {
                let base = center + (p - center).rotate(rot) * scale;
                let d = loop {
                    let dx: f64 = StandardNormal.sample(&mut rng);
                    let dy: f64 = StandardNormal.sample(&mut rng);
                    let d = Point2::new(dx, dy) * cfg.displacement_sigma;
                    if d.norm() <= limit {
                        break d;
                    }
                };
                base + d
            })
            .collect();
        let t = tps_fit(&src, &dst, 0.0)?;
        if min_jacobian_det(&t, image_size) >= MIN_JACOBIAN_DET {
            return Ok(t);
        }
    }
    Err(Error::Degenerate(
        "could not sample a fold-free deformation in 100 attempts; lower displacement_sigma".into(),
    ))
}

/// Numerical inverse of a smooth spline: start from the spline fitted on the
/// swapped control pairs and polish with Newton steps.
pub struct SplineInverse<'a> {
    forward: &'a ThinPlateSpline,
    backward: ThinPlateSpline,
}

impl<'a> SplineInverse<'a> {
    pub fn new(forward: &'a ThinPlateSpline) -> Result<Self> {
        let src = forward.control_points();
        let dst: Vec<Point2> = src.iter().map(|&p| forward.apply(p)).collect();
        Ok(Self {
            forward,
            backward: tps_fit(&dst, src, 0.0)?,
        })
    }

    pub fn apply(&self, q: Point2) -> Point2 {
        let mut p = self.backward.apply(q);
        for _ in 0..4 {
            let r = q - self.forward.apply(p);
            if r.norm() < 1e-9 {
                break;
            }
            let j = self.forward.jacobian(p);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-12 {
                break;
            }
            p = p + Point2::new(
                (j[1][1] * r.x - j[0][1] * r.y) / det,
                (-j[1][0] * r.x + j[0][0] * r.y) / det,
            );
        }
        p
    }
}

/// Warp an image forward through `t`: `out(t(p)) = image(p)`.
pub fn warp_image(image: &Image, t: &ThinPlateSpline) -> Result<Image> {
    let inv = SplineInverse::new(t)?;
    Ok(image.warp_backward(|q| inv.apply(q), 8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pretrain,
    Crossmodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: TaskKind,
    pub modality_a: String,
    pub modality_b: String,
    pub seed: u64,
    /// Control displacement sigma in pixels.
    pub difficulty: f64,
    pub rotation: f64,
    pub contrast_variant: usize,
    pub unit: String,
}

/// One matching problem with ground truth.
#[derive(Debug, Clone)]
pub struct PairTask {
    pub keypoints_a: Vec<Point2>,
    pub keypoints_b: Vec<Point2>,
    pub descriptors_a: Option<DescriptorSet>,
    pub descriptors_b: Option<DescriptorSet>,
    /// Maps A to B.
    pub gt_transform: ThinPlateSpline,
    pub gt_matches: Vec<(usize, usize)>,
    pub gt_tolerance: f64,
    pub image_size: usize,
    pub meta: TaskMeta,
    pub images: Option<(Image, Image)>,
}

impl PairTask {
    /// Check indices and the ground-truth residual of every gt match.
    pub fn validate(&self) -> Result<()> {
        for &(i, j) in &self.gt_matches {
            if i >= self.keypoints_a.len() || j >= self.keypoints_b.len() {
                return Err(Error::Argument(format!("gt match ({i}, {j}) out of range")));
            }
            let r = self.gt_transform.apply(self.keypoints_a[i]).dist(self.keypoints_b[j]);
            if r > self.gt_tolerance {
                return Err(Error::Argument(format!(
                    "gt match ({i}, {j}) has residual {r:.3} > {}",
                    self.gt_tolerance
                )));
            }
        }
        Ok(())
    }

    /// Coordinates of the ground-truth pairs.
    pub fn gt_pairs(&self) -> Vec<(Point2, Point2)> {
        self.gt_matches
            .iter()
            .map(|&(i, j)| (self.keypoints_a[i], self.keypoints_b[j]))
            .collect()
    }
}

/// What to materialise when building tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    /// Render images and compute descriptors. Without it only geometry is built.
    pub render: bool,
    pub keep_images: bool,
    pub patch: usize,
    pub context: ContextConfig,
    pub gt_tolerance: f64,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            render: true,
            keep_images: false,
            patch: DEFAULT_PATCH,
            context: ContextConfig::default(),
            gt_tolerance: DEFAULT_GT_TOLERANCE,
        }
    }
}

impl TaskOptions {
    pub fn geometry_only() -> Self {
        Self {
            render: false,
            ..Self::default()
        }
    }
}

fn describe(image: &Image, keypoints: &[Point2], opts: &TaskOptions) -> Result<DescriptorSet> {
    let map = context_feature_map(image, &opts.context)?;
    compute_patch_descriptor(image, keypoints, opts.patch)?.with_semantic_from(&map)
}

fn inside(p: Point2, size: usize) -> bool {
    let hi = (size - 1) as f64;
    p.x >= 0.0 && p.y >= 0.0 && p.x <= hi && p.y <= hi
}

/// Warp keypoints, drop those leaving the image and optionally shuffle the
/// survivors. Returns B keypoints and gt pairs.
fn warp_keypoints(
    kps: &[Point2],
    t: &ThinPlateSpline,
    size: usize,
    shuffle: Option<&mut rng::Rng>,
) -> (Vec<Point2>, Vec<(usize, usize)>) {
    let kept: Vec<(usize, Point2)> = kps
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, t.apply(p)))
        .filter(|(_, q)| inside(*q, size))
        .collect();
    let mut order: Vec<usize> = (0..kept.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    let mut kb = vec![Point2::default(); kept.len()];
    let mut gt = Vec::with_capacity(kept.len());
    for (slot, &k) in order.iter().enumerate() {
        kb[slot] = kept[k].1;
        gt.push((kept[k].0, slot));
    }
    gt.sort_unstable();
    (kb, gt)
}

/// Single-modality task: an image and its deformed copy.
pub fn make_pretrain_task(
    scene_cfg: &SceneConfig,
    deform_cfg: &DeformConfig,
    seed: u64,
    opts: &TaskOptions,
) -> Result<PairTask> {
    let scene_cfg = SceneConfig {
        seed: rng::derive(seed, tags::SCENE),
        ..scene_cfg.clone()
    };
    let size = scene_cfg.image_size;
    let gt = sample_deformation(deform_cfg, size, rng::derive(seed, tags::DEFORM))?;
    let style = ModalityStyle::modality_a();
    let (kp_a, blobs) = if opts.render {
        let s = generate_scene(&scene_cfg)?;
        (s.keypoints.clone(), Some(s))
    } else {
        let s = generate_scene_geometry(&scene_cfg)?;
        (s, None)
    };
    let (kp_b, gt_matches) = warp_keypoints(&kp_a, &gt, size, None);

    let (descriptors_a, descriptors_b, images) = match blobs {
        Some(scene) => {
            let img_a = render_modality(&scene.image, &style, rng::derive(seed, 100))?;
            let warped = warp_image(&scene.image, &gt)?;
            let img_b = render_modality(&warped, &style, rng::derive(seed, 101))?;
            let da = describe(&img_a, &kp_a, opts)?;
            let db = describe(&img_b, &kp_b, opts)?;
            (Some(da), Some(db), opts.keep_images.then_some((img_a, img_b)))
        }
        None => (None, None, None),
    };
    let task = PairTask {
        keypoints_a: kp_a,
        keypoints_b: kp_b,
        descriptors_a,
        descriptors_b,
        gt_transform: gt,
        gt_matches,
        gt_tolerance: opts.gt_tolerance,
        image_size: size,
        meta: TaskMeta {
            kind: TaskKind::Pretrain,
            modality_a: style.name.clone(),
            modality_b: style.name,
            seed,
            difficulty: deform_cfg.displacement_sigma,
            rotation: 0.0,
            contrast_variant: 0,
            unit: "px".into(),
        },
        images,
    };
    task.validate()?;
    Ok(task)
}

/// Soma centres only, without rendering (same positions as [`generate_scene`]).
pub fn generate_scene_geometry(cfg: &SceneConfig) -> Result<Vec<Point2>> {
    Ok(place_blobs(cfg)?.into_iter().map(|b| b.center).collect())
}

/// Cross-modal augmentation grid: `rotations × contrast_variants` tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotations: usize,
    /// Rotations are spread evenly over `[-rotation_span, rotation_span]`.
    pub rotation_span: f64,
    pub contrast_variants: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotations: 10,
            rotation_span: 0.15,
            contrast_variants: 5,
        }
    }
}

impl AugmentConfig {
    pub fn count(&self) -> usize {
        self.rotations * self.contrast_variants
    }

    pub fn angles(&self) -> Vec<f64> {
        if self.rotations <= 1 {
            return vec![0.0];
        }
        (0..self.rotations)
            .map(|k| -self.rotation_span + 2.0 * self.rotation_span * k as f64 / (self.rotations - 1) as f64)
            .collect()
    }
}

/// One scene seen by both modalities, the B side deformed, expanded over the
/// augmentation grid.
pub fn make_crossmodal_task(
    scene_cfg: &SceneConfig,
    deform_cfg: &DeformConfig,
    aug: &AugmentConfig,
    seed: u64,
    opts: &TaskOptions,
) -> Result<Vec<PairTask>> {
    if aug.rotations == 0 || aug.contrast_variants == 0 {
        return Err(Error::Argument("augmentation grid is empty".into()));
    }
    let scene_cfg = SceneConfig {
        seed: rng::derive(seed, tags::SCENE),
        ..scene_cfg.clone()
    };
    let size = scene_cfg.image_size;
    let base = sample_deformation(deform_cfg, size, rng::derive(seed, tags::DEFORM))?;
    let style_a = ModalityStyle::modality_a();
    let style_b = ModalityStyle::modality_b();
    let c = (size - 1) as f64 / 2.0;
    let center = Point2::new(c, c);

    let scene = if opts.render {
        Some(generate_scene(&scene_cfg)?)
    } else {
        None
    };
    let kp_a = match &scene {
        Some(s) => s.keypoints.clone(),
        None => generate_scene_geometry(&scene_cfg)?,
    };
    let (img_a, desc_a) = match &scene {
        Some(s) => {
            let img = render_modality(&s.image, &style_a, rng::derive(seed, 100))?;
            let d = describe(&img, &kp_a, opts)?;
            (Some(img), Some(d))
        }
        None => (None, None),
    };

    let mut tasks = Vec::with_capacity(aug.count());
    for (ri, &angle) in aug.angles().iter().enumerate() {
        // rotation about the image centre
        let rot = SimilarityTransform::new(1.0, angle, center - center.rotate(angle))?;
        let gt = base.then_similarity(&rot);
        let warped = match &scene {
            Some(s) => Some(warp_image(&s.image, &gt)?),
            None => None,
        };
        for ci in 0..aug.contrast_variants {
            let k = (ri * aug.contrast_variants + ci) as u64;
            let task_seed = rng::derive(seed, 1000 + k);
            let mut shuffle_rng = rng::stream(task_seed, tags::SHUFFLE_B);
            let (kp_b, gt_matches) = warp_keypoints(&kp_a, &gt, size, Some(&mut shuffle_rng));
            let style = style_b.variant(ci, aug.contrast_variants);
            let (desc_b, img_b) = match &warped {
                Some(w) => {
                    let img = render_modality(w, &style, rng::derive(task_seed, 101))?;
                    (Some(describe(&img, &kp_b, opts)?), Some(img))
                }
                None => (None, None),
            };
            let images = match (&img_a, img_b) {
                (Some(a), Some(b)) if opts.keep_images => Some((a.clone(), b)),
                _ => None,
            };
            let task = PairTask {
                keypoints_a: kp_a.clone(),
                keypoints_b: kp_b,
                descriptors_a: desc_a.clone(),
                descriptors_b: desc_b,
                gt_transform: gt.clone(),
                gt_matches,
                gt_tolerance: opts.gt_tolerance,
                image_size: size,
                meta: TaskMeta {
                    kind: TaskKind::Crossmodal,
                    modality_a: style_a.name.clone(),
                    modality_b: style.name.clone(),
                    seed: task_seed,
                    difficulty: deform_cfg.displacement_sigma,
                    rotation: angle,
                    contrast_variant: ci,
                    unit: "px".into(),
                },
                images,
            };
            task.validate()?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// `count` pretraining tasks with seeds derived from `seed`.
pub fn make_pretrain_tasks(
    scene_cfg: &SceneConfig,
    deform_cfg: &DeformConfig,
    count: usize,
    seed: u64,
    opts: &TaskOptions,
) -> Result<Vec<PairTask>> {
    (0..count)
        .into_par_iter()
        .map(|k| make_pretrain_task(scene_cfg, deform_cfg, rng::derive(seed, k as u64), opts))
        .collect()
}

/// Cross-modal tasks for `pairs` base scenes, each expanded by `aug`.
pub fn make_crossmodal_tasks(
    scene_cfg: &SceneConfig,
    deform_cfg: &DeformConfig,
    aug: &AugmentConfig,
    pairs: usize,
    seed: u64,
    opts: &TaskOptions,
) -> Result<Vec<PairTask>> {
    let nested: Vec<Vec<PairTask>> = (0..pairs)
        .into_par_iter()
        .map(|k| make_crossmodal_task(scene_cfg, deform_cfg, aug, rng::derive(seed, k as u64), opts))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskFile {
    format_version: u32,
    image_size: usize,
    gt_tolerance: f64,
    meta: TaskMeta,
}

const TASK_FILE: &str = "task.json";

/// Persist a task as a directory: `task.json`, `gt_transform.json`,
/// `gt_matches.json`, `a.nmds`, `b.nmds` and (when kept) 16-bit PNG images.
pub fn save_task(task: &PairTask, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (da, db) = match (&task.descriptors_a, &task.descriptors_b) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Precondition("only rendered tasks can be saved".into())),
    };
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(
        TASK_FILE,
        serde_json::to_string_pretty(&TaskFile {
            format_version: TASK_FORMAT_VERSION,
            image_size: task.image_size,
            gt_tolerance: task.gt_tolerance,
            meta: task.meta.clone(),
        })?,
    )?;
    write(
        "gt_transform.json",
        TransformFile::new(TransformJson::from(&task.gt_transform)).to_json()?,
    )?;
    write("gt_matches.json", serde_json::to_string(&task.gt_matches)?)?;
    write_descriptors(da, &dir.join("a.nmds"))?;
    write_descriptors(db, &dir.join("b.nmds"))?;
    if let Some((ia, ib)) = &task.images {
        ia.save_png16(&dir.join("image_a.png"))?;
        ib.save_png16(&dir.join("image_b.png"))?;
    }
    Ok(())
}

pub fn load_task(dir: &Path) -> Result<PairTask> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let file: TaskFile = serde_json::from_str(&read(TASK_FILE)?)?;
    if file.format_version != TASK_FORMAT_VERSION {
        return Err(Error::format(0, format!("task format version {}", file.format_version)));
    }
    let gt = TransformFile::from_json(&read("gt_transform.json")?)?;
    let gt_matches: Vec<(usize, usize)> = serde_json::from_str(&read("gt_matches.json")?)?;
    let da = read_descriptors(&dir.join("a.nmds"))?;
    let db = read_descriptors(&dir.join("b.nmds"))?;
    let images = {
        let (pa, pb) = (dir.join("image_a.png"), dir.join("image_b.png"));
        if pa.exists() && pb.exists() {
            Some((Image::load_png(&pa)?, Image::load_png(&pb)?))
        } else {
            None
        }
    };
    let task = PairTask {
        keypoints_a: da.keypoints().to_vec(),
        keypoints_b: db.keypoints().to_vec(),
        descriptors_a: Some(da),
        descriptors_b: Some(db),
        gt_transform: gt.into_tps()?,
        gt_matches,
        gt_tolerance: file.gt_tolerance,
        image_size: file.image_size,
        meta: file.meta,
        images,
    };
    task.validate()?;
    Ok(task)
}

/// Task directories listed in a `manifest.json`, or every subdirectory
/// holding a `task.json`, sorted by name.
pub fn list_task_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let manifest = root.join("manifest.json");
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        return Ok(m.tasks.iter().map(|t| root.join(t)).collect());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(TASK_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: TaskKind,
    pub seed: u64,
    pub tasks: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene(n: usize, seed: u64) -> SceneConfig {
        SceneConfig {
            image_size: 128,
            n_neurons: n,
            min_separation: 10.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn single_blob_peak_at_keypoint() {
        let cfg = SceneConfig {
            intensity_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            max_neurites: 0,
            texture_amplitude: 0.0,
            ..small_scene(1, 4)
        };
        let s = generate_scene(&cfg).unwrap();
        assert_eq!(s.keypoints.len(), 1);
        let (x, y) = s.image.argmax();
        let kp = s.keypoints[0];
        assert!((x as f64 - kp.x).abs() <= 0.5 + 1e-9 && (y as f64 - kp.y).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn scene_is_deterministic() {
        let a = generate_scene(&small_scene(10, 3)).unwrap();
        let b = generate_scene(&small_scene(10, 3)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.keypoints, b.keypoints);
        assert_eq!(generate_scene_geometry(&small_scene(10, 3)).unwrap(), a.keypoints);
    }

    #[test]
    fn keypoints_respect_bounds_and_separation() {
        let cfg = SceneConfig {
            seed: 8,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg).unwrap();
        assert_eq!(s.keypoints.len(), 50);
        for (i, p) in s.keypoints.iter().enumerate() {
            assert!(s.image.contains(*p));
            for q in &s.keypoints[i + 1..] {
                assert!(p.dist(*q) >= 2.0);
            }
        }
    }

    #[test]
    fn identity_style_is_identity() {
        let s = generate_scene(&small_scene(5, 1)).unwrap();
        let out = render_modality(&s.image, &ModalityStyle::identity(), 9).unwrap();
        assert_eq!(out, s.image);
    }

    #[test]
    fn noiseless_style_is_deterministic_in_input() {
        let s = generate_scene(&small_scene(5, 1)).unwrap();
        let style = ModalityStyle {
            noise: 0.0,
            ..ModalityStyle::modality_b()
        };
        assert_eq!(
            render_modality(&s.image, &style, 1).unwrap(),
            render_modality(&s.image, &style, 2).unwrap()
        );
    }

    #[test]
    fn zero_deformation_is_identity() {
        let cfg = DeformConfig {
            displacement_sigma: 0.0,
            max_rotation: 0.0,
            max_scale_jitter: 0.0,
            grid: 4,
        };
        let t = sample_deformation(&cfg, 256, 5).unwrap();
        for p in [
            Point2::new(0.0, 0.0),
            Point2::new(100.5, 37.25),
            Point2::new(255.0, 255.0),
        ] {
            assert!(t.apply(p).dist(p) < 1e-9);
        }
    }

    #[test]
    fn one_control_per_axis_is_degenerate() {
        let cfg = DeformConfig {
            grid: 1,
            ..Default::default()
        };
        assert!(matches!(sample_deformation(&cfg, 256, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn inverse_round_trips() {
        let t = sample_deformation(&DeformConfig::default(), 512, 2).unwrap();
        let inv = SplineInverse::new(&t).unwrap();
        for p in [
            Point2::new(10.0, 20.0),
            Point2::new(256.0, 300.0),
            Point2::new(480.0, 60.0),
        ] {
            assert!(t.apply(inv.apply(p)).dist(p) < 1e-6);
        }
    }

    #[test]
    fn identity_pretrain_task() {
        let deform = DeformConfig {
            displacement_sigma: 0.0,
            max_rotation: 0.0,
            max_scale_jitter: 0.0,
            grid: 3,
        };
        let t = make_pretrain_task(&small_scene(8, 0), &deform, 1, &TaskOptions::default()).unwrap();
        assert_eq!(t.keypoints_a.len(), t.keypoints_b.len());
        for (a, b) in t.keypoints_a.iter().zip(&t.keypoints_b) {
            assert!(a.dist(*b) < 1e-9);
        }
        assert_eq!(t.gt_matches, (0..8).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn crossmodal_grid_size() {
        let aug = AugmentConfig {
            rotations: 1,
            contrast_variants: 1,
            rotation_span: 0.1,
        };
        let tasks = make_crossmodal_task(
            &small_scene(8, 0),
            &DeformConfig::with_sigma_fraction(128, 0.03),
            &aug,
            3,
            &TaskOptions::geometry_only(),
        )
        .unwrap();
        assert_eq!(tasks.len(), 1);
    }
}
