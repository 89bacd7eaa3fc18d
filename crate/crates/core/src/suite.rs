//! Standard benchmark suites: held-out test tasks plus the recipe that trains
//! the fusion net and the two-stage subset classifier they are scored with.

use serde::{Deserialize, Serialize};

use crate::descriptors::{train_fusion, FusionExample, FusionNet};
use crate::error::{Error, Result};
use crate::evalmetrics::{benchmark, EvalReport, Method, Pipeline};
use crate::gccm::{
    accuracy, default_train_config, make_gccm_training_set, train_gccm, train_gccm_from, CorruptionConfig, GccmModel,
    GccmTrainOutcome, LabeledSubset, DEFAULT_SUBSET_SIZE,
};
use crate::nn::TrainConfig;
use crate::rng;
use crate::synthdata::{
    make_crossmodal_tasks, make_pretrain_tasks, AugmentConfig, DeformConfig, PairTask, SceneConfig, TaskOptions,
};

/// Seed offsets keeping every data split disjoint.
mod purpose {
    pub const TEST: u64 = 1;
    pub const CROSSMODAL_TRAIN: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const PRETRAIN_SAMPLES: u64 = 4;
    pub const FINETUNE_SAMPLES: u64 = 5;
    pub const FUSION_TRAIN: u64 = 6;
    pub const GCCM_TRAIN: u64 = 7;
    pub const HELDOUT_TASKS: u64 = 8;
    pub const HELDOUT_SAMPLES: u64 = 9;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub name: String,
    pub scene: SceneConfig,
    /// Deformation of the test tasks.
    pub deform: DeformConfig,
    pub test_pairs: usize,
    pub test_aug: AugmentConfig,
    /// Deformation of all training tasks.
    pub train_deform: DeformConfig,
    /// Cross-modal training pairs; expanded by `train_aug`.
    pub train_pairs: usize,
    pub train_aug: AugmentConfig,
    pub fusion_train: TrainConfig,
    pub fusion_temperature: f64,
    pub pretrain_tasks: usize,
    pub pretrain_samples_per_class: usize,
    pub pretrain: TrainConfig,
    pub finetune_samples_per_class: usize,
    pub finetune: TrainConfig,
    pub corruption: CorruptionConfig,
}

impl SuiteConfig {
    /// 100 cross-modal test tasks (25 scenes × 2 rotations × 2 contrast
    /// variants), 512² images, 50 neurons, displacement sigma 5 % of the side.
    pub fn default_suite() -> Self {
        let scene = SceneConfig::default();
        let deform = DeformConfig::with_sigma_fraction(scene.image_size, 0.05);
        Self {
            name: "default".into(),
            scene,
            deform: deform.clone(),
            test_pairs: 25,
            test_aug: AugmentConfig {
                rotations: 2,
                rotation_span: 0.15,
                contrast_variants: 2,
            },
            train_deform: deform,
            train_pairs: 12,
            train_aug: AugmentConfig {
                rotations: 5,
                rotation_span: 0.15,
                contrast_variants: 2,
            },
            fusion_train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 4,
                epochs: 20,
                ..TrainConfig::default()
            },
            fusion_temperature: 0.1,
            pretrain_tasks: 2000,
            pretrain_samples_per_class: 10_000,
            pretrain: default_train_config(0),
            finetune_samples_per_class: 3000,
            finetune: TrainConfig {
                learning_rate: 5e-4,
                batch_size: 64,
                epochs: 10,
                ..TrainConfig::default()
            },
            corruption: CorruptionConfig::default(),
        }
    }

    /// The default suite with test deformations at 10 % of the side.
    pub fn nonrigid_suite() -> Self {
        let base = Self::default_suite();
        Self {
            name: "nonrigid".into(),
            deform: DeformConfig::with_sigma_fraction(base.scene.image_size, 0.10),
            ..base
        }
    }

    /// A small suite for smoke tests: 8 test tasks, light training.
    pub fn smoke_suite() -> Self {
        let base = Self::default_suite();
        Self {
            name: "smoke".into(),
            test_pairs: 2,
            train_pairs: 2,
            train_aug: AugmentConfig {
                rotations: 2,
                rotation_span: 0.15,
                contrast_variants: 1,
            },
            fusion_train: TrainConfig {
                epochs: 2,
                ..base.fusion_train
            },
            pretrain_tasks: 50,
            pretrain_samples_per_class: 300,
            pretrain: TrainConfig {
                epochs: 3,
                ..base.pretrain
            },
            finetune_samples_per_class: 150,
            finetune: TrainConfig {
                epochs: 2,
                ..base.finetune
            },
            ..base
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_suite()),
            "nonrigid" => Ok(Self::nonrigid_suite()),
            "smoke" => Ok(Self::smoke_suite()),
            other => Err(Error::Argument(format!(
                "unknown suite {other:?} (expected default, nonrigid or smoke)"
            ))),
        }
    }

    pub fn test_tasks(&self, seed: u64) -> Result<Vec<PairTask>> {
        make_crossmodal_tasks(
            &self.scene,
            &self.deform,
            &self.test_aug,
            self.test_pairs,
            rng::derive(seed, purpose::TEST),
            &TaskOptions::default(),
        )
    }

    /// Rendered cross-modal training tasks, shared by fusion training and
    /// classifier fine-tuning.
    pub fn crossmodal_train_tasks(&self, seed: u64) -> Result<Vec<PairTask>> {
        make_crossmodal_tasks(
            &self.scene,
            &self.train_deform,
            &self.train_aug,
            self.train_pairs,
            rng::derive(seed, purpose::CROSSMODAL_TRAIN),
            &TaskOptions::default(),
        )
    }

    pub fn pretrain_tasks(&self, seed: u64) -> Result<Vec<PairTask>> {
        make_pretrain_tasks(
            &self.scene,
            &self.train_deform,
            self.pretrain_tasks,
            rng::derive(seed, purpose::PRETRAIN),
            &TaskOptions::geometry_only(),
        )
    }

    /// Labeled subsets from cross-modal tasks disjoint from all training data.
    pub fn heldout_crossmodal_samples(&self, seed: u64, per_class: usize) -> Result<Vec<LabeledSubset>> {
        let tasks = make_crossmodal_tasks(
            &self.scene,
            &self.train_deform,
            &self.train_aug,
            self.train_pairs,
            rng::derive(seed, purpose::HELDOUT_TASKS),
            &TaskOptions::geometry_only(),
        )?;
        make_gccm_training_set(
            &tasks,
            DEFAULT_SUBSET_SIZE,
            per_class,
            per_class,
            &self.corruption,
            rng::derive(seed, purpose::HELDOUT_SAMPLES),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SuiteModels {
    pub fusion: FusionNet,
    pub fusion_loss: Vec<f64>,
    pub gccm_pretrain: GccmTrainOutcome,
    pub gccm_finetune: GccmTrainOutcome,
}

impl SuiteModels {
    /// The fine-tuned classifier used by the pipeline.
    pub fn gccm(&self) -> &GccmModel {
        &self.gccm_finetune.model
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline::new(Some(self.fusion.clone()), Some(self.gccm().clone()))
    }
}

pub fn fusion_examples(tasks: &[PairTask]) -> Result<Vec<FusionExample>> {
    tasks
        .iter()
        .map(|t| match (&t.descriptors_a, &t.descriptors_b) {
            (Some(a), Some(b)) => Ok(FusionExample {
                a: a.clone(),
                b: b.clone(),
                matches: t.gt_matches.clone(),
            }),
            _ => Err(Error::Precondition("fusion training needs rendered tasks".into())),
        })
        .collect()
}

/// Train the fusion net, pretrain the classifier on single-modality tasks and
/// fine-tune it on the cross-modal training tasks.
pub fn train_models(cfg: &SuiteConfig, seed: u64) -> Result<SuiteModels> {
    let crossmodal = cfg.crossmodal_train_tasks(seed)?;
    let examples = fusion_examples(&crossmodal)?;
    let local_dim = examples[0].a.local().dim();
    let semantic_dim = examples[0].a.semantic().map_or(0, |m| m.dim());
    let fusion_seed = rng::derive(seed, purpose::FUSION_TRAIN);
    let fusion_cfg = TrainConfig {
        seed: fusion_seed,
        ..cfg.fusion_train
    };
    let fusion = train_fusion(
        FusionNet::with_defaults(local_dim, semantic_dim, fusion_seed)?,
        &examples,
        &fusion_cfg,
        cfg.fusion_temperature,
    )?;
    log::info!("fusion trained on {} pairs", examples.len());

    let pretrain_tasks = cfg.pretrain_tasks(seed)?;
    let pre_samples = make_gccm_training_set(
        &pretrain_tasks,
        DEFAULT_SUBSET_SIZE,
        cfg.pretrain_samples_per_class,
        cfg.pretrain_samples_per_class,
        &cfg.corruption,
        rng::derive(seed, purpose::PRETRAIN_SAMPLES),
    )?;
    let gccm_seed = rng::derive(seed, purpose::GCCM_TRAIN);
    let pre = train_gccm(
        &pre_samples,
        &TrainConfig {
            seed: gccm_seed,
            ..cfg.pretrain
        },
    )?;
    log::info!("gccm pretrain held-out accuracy {:.4}", pre.heldout_accuracy);

    let ft_samples = make_gccm_training_set(
        &crossmodal,
        DEFAULT_SUBSET_SIZE,
        cfg.finetune_samples_per_class,
        cfg.finetune_samples_per_class,
        &cfg.corruption,
        rng::derive(seed, purpose::FINETUNE_SAMPLES),
    )?;
    let ft = train_gccm_from(
        pre.model.clone(),
        &ft_samples,
        &TrainConfig {
            seed: gccm_seed,
            ..cfg.finetune
        },
        "finetune",
    )?;
    log::info!("gccm finetune held-out accuracy {:.4}", ft.heldout_accuracy);
    Ok(SuiteModels {
        fusion: fusion.fusion,
        fusion_loss: fusion.loss_curve,
        gccm_pretrain: pre,
        gccm_finetune: ft,
    })
}

/// Cross-modal held-out accuracy of the pretrained and fine-tuned classifiers.
pub fn crossmodal_accuracies(cfg: &SuiteConfig, models: &SuiteModels, seed: u64) -> Result<(f64, f64)> {
    let held = cfg.heldout_crossmodal_samples(seed, 2000)?;
    Ok((
        accuracy(&models.gccm_pretrain.model, &held),
        accuracy(models.gccm(), &held),
    ))
}

/// Train the models and benchmark all registered methods on the test tasks.
pub fn run_suite(cfg: &SuiteConfig, seed: u64) -> Result<(EvalReport, SuiteModels)> {
    let models = train_models(cfg, seed)?;
    let tasks = cfg.test_tasks(seed)?;
    let report = benchmark(&Method::ALL, &tasks, &models.pipeline(), seed)?;
    Ok((report, models))
}
