//! The fusion perceptron and its contrastive training.
//!
//! Training pulls fused descriptors of ground-truth correspondences together
//! under the same dual-softmax used by the matcher: for every known pair
//! `(i, j)` the loss is `-½ (log P_row(i, j) + log P_col(i, j))` over the
//! similarity matrix of L2-normalised outputs divided by a temperature.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{normalize, DescriptorSet};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, ForwardCache, Gradients, ModelFile, OptimizerState, TrainConfig};
use crate::rng::{self, tags};

pub const DEFAULT_FUSED_DIM: usize = 128;
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    net: DenseNet,
    local_dim: usize,
    semantic_dim: usize,
}

impl FusionNet {
    pub fn new(net: DenseNet, local_dim: usize, semantic_dim: usize) -> Result<Self> {
        net.validate()?;
        if net.input_dim() != local_dim + semantic_dim {
            return Err(Error::Argument(format!(
                "fusion net input {} != {local_dim} + {semantic_dim}",
                net.input_dim()
            )));
        }
        Ok(Self {
            net,
            local_dim,
            semantic_dim,
        })
    }

    /// One hidden ReLU layer of width 256 and a linear 128-d output.
    pub fn with_defaults(local_dim: usize, semantic_dim: usize, seed: u64) -> Result<Self> {
        Self::with_shape(local_dim, semantic_dim, DEFAULT_HIDDEN, DEFAULT_FUSED_DIM, seed)
    }

    pub fn with_shape(local_dim: usize, semantic_dim: usize, hidden: usize, out: usize, seed: u64) -> Result<Self> {
        let net = DenseNet::new(
            &[local_dim + semantic_dim, hidden, out],
            &[Activation::Relu, Activation::None],
            seed,
        )?;
        Self::new(net, local_dim, semantic_dim)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FusionFile {
            fusion: FusionHeader {
                local_dim: self.local_dim,
                semantic_dim: self.semantic_dim,
            },
            model: ModelFile::from(&self.net),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FusionFile = serde_json::from_str(text)?;
        Self::new(file.model.into_net()?, file.fusion.local_dim, file.fusion.semantic_dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn input_row(&self, ds: &DescriptorSet, i: usize) -> Vec<f64> {
        let mut v = ds.local().row_f64(i);
        if let Some(sem) = ds.semantic() {
            v.extend(sem.row(i).iter().map(|&x| x as f64));
        }
        v
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FusionHeader {
    local_dim: usize,
    semantic_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FusionFile {
    fusion: FusionHeader,
    model: ModelFile,
}

/// One training pair: two descriptor sets with local and semantic rows plus
/// the ground-truth correspondences between them.
#[derive(Debug, Clone)]
pub struct FusionExample {
    pub a: DescriptorSet,
    pub b: DescriptorSet,
    pub matches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct FusionTrainOutcome {
    pub fusion: FusionNet,
    pub loss_curve: Vec<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Dual-softmax negative log-likelihood of `matches` and its gradients with
/// respect to both descriptor matrices (rows given as slices).
pub fn dual_softmax_nll(
    da: &[Vec<f64>],
    db: &[Vec<f64>],
    matches: &[(usize, usize)],
    temperature: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (na, nb) = (da.len(), db.len());
    let dim = da.first().or(db.first()).map_or(0, Vec::len);
    let mut ga = vec![vec![0.0; dim]; na];
    let mut gb = vec![vec![0.0; dim]; nb];
    if matches.is_empty() || na == 0 || nb == 0 {
        return (0.0, ga, gb);
    }
    let inv_t = 1.0 / temperature;
    let mut s = vec![0.0; na * nb];
    for i in 0..na {
        for j in 0..nb {
            s[i * nb + j] = da[i].iter().zip(&db[j]).map(|(x, y)| x * y).sum::<f64>() * inv_t;
        }
    }
    let mut prow = s.clone();
    for i in 0..na {
        softmax_in_place(&mut prow[i * nb..(i + 1) * nb]);
    }
    let mut pcol = vec![0.0; na * nb];
    let mut col = vec![0.0; na];
    for j in 0..nb {
        for i in 0..na {
            col[i] = s[i * nb + j];
        }
        softmax_in_place(&mut col);
        for i in 0..na {
            pcol[i * nb + j] = col[i];
        }
    }

    let w = 0.5 / matches.len() as f64;
    let mut loss = 0.0;
    let mut ds = vec![0.0; na * nb];
    for &(i, j) in matches {
        loss -= w * (prow[i * nb + j].max(1e-300).ln() + pcol[i * nb + j].max(1e-300).ln());
        for jj in 0..nb {
            ds[i * nb + jj] += w * prow[i * nb + jj];
        }
        for ii in 0..na {
            ds[ii * nb + j] += w * pcol[ii * nb + j];
        }
        ds[i * nb + j] -= 2.0 * w;
    }
    for i in 0..na {
        for j in 0..nb {
            let g = ds[i * nb + j] * inv_t;
            if g == 0.0 {
                continue;
            }
            ga[i].iter_mut().zip(&db[j]).for_each(|(a, b)| *a += g * b);
            gb[j].iter_mut().zip(&da[i]).for_each(|(b, a)| *b += g * a);
        }
    }
    (loss, ga, gb)
}

/// Gradient through `d = z / |z|`.
fn normalize_backward(z: &[f64], dd: &[f64]) -> Vec<f64> {
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; z.len()];
    }
    let proj: f64 = z.iter().zip(dd).map(|(a, b)| a * b).sum::<f64>() / n;
    z.iter().zip(dd).map(|(zi, gi)| (gi - zi / n * proj) / n).collect()
}

/// Loss of one example and (optionally) its parameter gradients.
pub(crate) fn example_loss(
    fusion: &FusionNet,
    ex: &FusionExample,
    temperature: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let fwd = |ds: &DescriptorSet| -> Result<Vec<ForwardCache>> {
        (0..ds.len())
            .map(|i| fusion.net.forward_cached(&fusion.input_row(ds, i)))
            .collect()
    };
    let ca = fwd(&ex.a)?;
    let cb = fwd(&ex.b)?;
    let da: Vec<Vec<f64>> = ca.iter().map(|c| normalize(c.output())).collect();
    let db: Vec<Vec<f64>> = cb.iter().map(|c| normalize(c.output())).collect();
    let (loss, ga, gb) = dual_softmax_nll(&da, &db, &ex.matches, temperature);
    if let Some(grads) = grads {
        for (cache, g) in ca.iter().zip(&ga).chain(cb.iter().zip(&gb)) {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let dz = normalize_backward(cache.output(), g);
            fusion.net.backward_cached(cache, &dz, grads)?;
        }
    }
    Ok(loss)
}

fn check_example(fusion: &FusionNet, ex: &FusionExample, k: usize) -> Result<()> {
    for ds in [&ex.a, &ex.b] {
        let sem = ds.semantic().map_or(0, |m| m.dim());
        if ds.local().dim() != fusion.local_dim || sem != fusion.semantic_dim {
            return Err(Error::Argument(format!(
                "fusion example {k}: descriptor dims ({}, {sem}) do not fit the net",
                ds.local().dim()
            )));
        }
    }
    if ex.matches.iter().any(|&(i, j)| i >= ex.a.len() || j >= ex.b.len()) {
        return Err(Error::Argument(format!("fusion example {k}: match index out of range")));
    }
    Ok(())
}

/// Train the fusion net on ground-truth correspondences; one example is one
/// image pair, `cfg.batch_size` pairs are averaged per step.
pub fn train_fusion(
    fusion: FusionNet,
    examples: &[FusionExample],
    cfg: &TrainConfig,
    temperature: f64,
) -> Result<FusionTrainOutcome> {
    cfg.validate()?;
    if !(temperature > 0.0) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    if examples.is_empty() {
        return Err(Error::Argument("no fusion training examples".into()));
    }
    for (k, ex) in examples.iter().enumerate() {
        check_example(&fusion, ex, k)?;
    }
    let mut fusion = fusion;
    let mut rng = rng::stream(cfg.seed, tags::FUSION);
    let mut opt = OptimizerState::new(&fusion.net, cfg.optimizer, cfg.learning_rate);
    let mut grads = Gradients::zeros_like(&fusion.net);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &k in batch {
                batch_loss += example_loss(&fusion, &examples[k], temperature, Some(&mut grads))?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            grads
                .weights
                .iter_mut()
                .chain(grads.bias.iter_mut())
                .for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            if cfg.learning_rate > 0.0 {
                opt.apply(&mut fusion.net, &grads);
            }
        }
        curve.push(total / examples.len() as f64);
        log::debug!("fusion epoch {epoch}: loss {:.5}", curve[epoch]);
    }
    Ok(FusionTrainOutcome {
        fusion,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{DescriptorMatrix, DescriptorSource};
    use crate::geometry::Point2;
    use rand::Rng;

    fn random_set(n: usize, dl: usize, ds: usize, seed: u64) -> DescriptorSet {
        let mut r = rng::from_seed(seed);
        let local = DescriptorMatrix::new(dl, (0..n * dl).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
        let sem = DescriptorMatrix::new(ds, (0..n * ds).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
        let kps = (0..n).map(|i| Point2::new(i as f64, 0.0)).collect();
        DescriptorSet::new(kps, local, Some(sem), None, DescriptorSource::External).unwrap()
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut r = rng::from_seed(3);
        let mut da: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let db: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let m = [(0, 1), (2, 3), (3, 0)];
        let (_, ga, _) = dual_softmax_nll(&da, &db, &m, 0.5);
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let orig = da[i][k];
                da[i][k] = orig + h;
                let lp = dual_softmax_nll(&da, &db, &m, 0.5).0;
                da[i][k] = orig - h;
                let lm = dual_softmax_nll(&da, &db, &m, 0.5).0;
                da[i][k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - ga[i][k]).abs() < 1e-6, "{fd} vs {}", ga[i][k]);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let fusion = FusionNet::with_shape(4, 3, 6, 5, 17).unwrap();
        let ex = FusionExample {
            a: random_set(4, 4, 3, 1),
            b: random_set(5, 4, 3, 2),
            matches: vec![(0, 0), (1, 2), (3, 4)],
        };
        let mut g = Gradients::zeros_like(fusion.net());
        example_loss(&fusion, &ex, 0.2, Some(&mut g)).unwrap();
        let h = 1e-6;
        let mut probe = fusion.clone();
        for layer in 0..2 {
            for p in 0..probe.net.layers()[layer].weights.len() {
                let orig = probe.net.layers()[layer].weights[p];
                probe.net.layers_mut()[layer].weights[p] = orig + h;
                let lp = example_loss(&probe, &ex, 0.2, None).unwrap();
                probe.net.layers_mut()[layer].weights[p] = orig - h;
                let lm = example_loss(&probe, &ex, 0.2, None).unwrap();
                probe.net.layers_mut()[layer].weights[p] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.weights[layer][p];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {layer} param {p}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn training_reduces_loss() {
        let fusion = FusionNet::with_shape(4, 3, 16, 8, 5).unwrap();
        let a = random_set(6, 4, 3, 10);
        let b = a.select(&[3, 1, 4, 0, 5, 2]);
        let ex = FusionExample {
            a,
            b,
            matches: vec![(0, 3), (1, 1), (2, 5), (3, 0), (4, 2), (5, 4)],
        };
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 1,
            ..Default::default()
        };
        let out = train_fusion(fusion, &[ex], &cfg, 0.1).unwrap();
        assert!(
            out.loss_curve.last().unwrap() < &(out.loss_curve[0] * 0.5),
            "{:?}",
            out.loss_curve
        );
    }

    #[test]
    fn json_round_trip() {
        let f = FusionNet::with_shape(3, 2, 4, 3, 1).unwrap();
        assert_eq!(FusionNet::from_json(&f.to_json().unwrap()).unwrap(), f);
    }
}
