use std::path::{Path, PathBuf};

use serde_json::json;

use neurmatch::baseline::{ransac_similarity, RansacConfig};
use neurmatch::descriptors::{fuse, read_descriptors, read_feature_map, train_fusion, DescriptorSet, FusionNet};
use neurmatch::evalmetrics::{benchmark, sha256_hex, EvalReport, Method, Pipeline};
use neurmatch::gccm::{
    accuracy, half_diagonal, half_diagonal_of, make_gccm_training_set, split_heldout, train_gccm_from,
    verify_or_passthrough, GccmModel, GccmTrainOutcome, VerifyConfig, DEFAULT_SUBSET_SIZE,
};
use neurmatch::matcher::{match_initial, MatchSet, MatcherConfig};
use neurmatch::nn::TrainConfig;
use neurmatch::rng;
use neurmatch::suite::{fusion_examples, train_models, SuiteConfig};
use neurmatch::synthdata::{
    list_task_dirs, load_task, make_crossmodal_tasks, make_pretrain_tasks, save_task, AugmentConfig, Manifest,
    PairTask, TaskKind, TaskOptions,
};
use neurmatch::Point2;

use crate::config::{OutputFormat, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::{BenchArgs, EvalArgs, GenCommand, InspectArgs, MatchArgs, Stage, TrainCommand, TrainGccmArgs};
use crate::{Verifier, VerifyArgs};

/// Seed tags for the streams the CLI derives from the master seed.
mod purpose {
    pub const GEN: u64 = 101;
    pub const FUSION: u64 = 102;
    pub const GCCM_TASKS: u64 = 103;
    pub const GCCM_SAMPLES: u64 = 104;
    pub const GCCM_TRAIN: u64 = 105;
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn metrics_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("metrics.json"))
}

pub fn gen(cfg: &RunConfig, cmd: GenCommand) -> CliResult<()> {
    let seed = rng::derive(cfg.seed, purpose::GEN);
    let (tasks, kind, out) = match cmd {
        GenCommand::Pretrain { count, out } => {
            if count == 0 {
                return Err(usage("--count must be positive"));
            }
            let opts = TaskOptions {
                keep_images: out.keep_images,
                ..cfg.task.clone()
            };
            let tasks = make_pretrain_tasks(&cfg.scene, &cfg.deform, count, seed, &opts)?;
            (tasks, TaskKind::Pretrain, out)
        }
        GenCommand::Crossmodal { pairs, aug, out } => {
            if pairs == 0 {
                return Err(usage("--pairs must be positive"));
            }
            let augment = match aug {
                Some(n) => augment_for(&cfg.augment, n)?,
                None => cfg.augment.clone(),
            };
            let opts = TaskOptions {
                keep_images: out.keep_images,
                ..cfg.task.clone()
            };
            let tasks = make_crossmodal_tasks(&cfg.scene, &cfg.deform, &augment, pairs, seed, &opts)?;
            (tasks, TaskKind::Crossmodal, out)
        }
    };
    let names: Vec<String> = (0..tasks.len()).map(|k| format!("task_{k:05}")).collect();
    for (task, name) in tasks.iter().zip(&names) {
        save_task(task, &out.out.join(name))?;
    }
    let manifest = Manifest {
        kind,
        seed: cfg.seed,
        tasks: names,
    };
    write_file(&out.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {} tasks to {}", tasks.len(), out.out.display());
    Ok(())
}

/// Split `n` augmentations into rotations × contrast variants, keeping the
/// configured number of contrast variants when it divides `n`.
fn augment_for(base: &AugmentConfig, n: usize) -> CliResult<AugmentConfig> {
    if n == 0 {
        return Err(usage("--aug must be positive"));
    }
    let contrast = (1..=base.contrast_variants.min(n))
        .rev()
        .find(|c| n.is_multiple_of(*c))
        .unwrap_or(1);
    Ok(AugmentConfig {
        rotations: n / contrast,
        contrast_variants: contrast,
        ..base.clone()
    })
}

fn load_tasks(dir: &Path) -> CliResult<Vec<PairTask>> {
    let dirs = list_task_dirs(dir)?;
    if dirs.is_empty() {
        return Err(CliError::Data(format!("{} holds no tasks", dir.display())));
    }
    let tasks = dirs
        .iter()
        .map(|d| load_task(d))
        .collect::<neurmatch::Result<Vec<_>>>()?;
    log::info!("loaded {} tasks from {}", tasks.len(), dir.display());
    Ok(tasks)
}

pub fn train(cfg: &RunConfig, cmd: TrainCommand) -> CliResult<()> {
    match cmd {
        TrainCommand::Fusion { tasks, out, metrics } => train_fusion_cmd(cfg, &tasks, &out, metrics),
        TrainCommand::Gccm(args) => train_gccm_cmd(cfg, args),
    }
}

fn train_fusion_cmd(cfg: &RunConfig, tasks: &Path, out: &Path, metrics: Option<PathBuf>) -> CliResult<()> {
    let tasks = load_tasks(tasks)?;
    let examples = fusion_examples(&tasks)?;
    let local_dim = examples[0].a.local().dim();
    let semantic_dim = examples[0].a.semantic().map_or(0, |m| m.dim());
    let seed = rng::derive(cfg.seed, purpose::FUSION);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.fusion.train
    };
    let outcome = train_fusion(
        FusionNet::with_defaults(local_dim, semantic_dim, seed)?,
        &examples,
        &train_cfg,
        cfg.fusion.temperature,
    )?;
    let text = outcome.fusion.to_json()?;
    write_file(out, &text)?;
    let report = json!({
        "model": out.file_name().map(|n| n.to_string_lossy().into_owned()),
        "model_sha256": sha256_hex(text.as_bytes()),
        "pairs": examples.len(),
        "local_dim": local_dim,
        "semantic_dim": semantic_dim,
        "train": train_cfg,
        "loss_curve": outcome.loss_curve,
    });
    write_file(&metrics_path(out, metrics), serde_json::to_string_pretty(&report)?)?;
    log::info!(
        "fusion trained on {} pairs, final loss {:.4}",
        examples.len(),
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_gccm_cmd(cfg: &RunConfig, args: TrainGccmArgs) -> CliResult<()> {
    let init = match (args.stage, &args.init) {
        (Stage::Finetune, None) => return Err(usage("--stage finetune needs --init MODEL")),
        (Stage::Pretrain, Some(_)) => return Err(usage("--init is only valid with --stage finetune")),
        (Stage::Finetune, Some(p)) => Some(GccmModel::load(p)?),
        (Stage::Pretrain, None) => None,
    };
    let task_seed = rng::derive(cfg.seed, purpose::GCCM_TASKS);
    let tasks = match &args.tasks {
        Some(dir) => load_tasks(dir)?,
        None => match args.stage {
            Stage::Pretrain => make_pretrain_tasks(
                &cfg.scene,
                &cfg.deform,
                args.count,
                task_seed,
                &TaskOptions::geometry_only(),
            )?,
            Stage::Finetune => make_crossmodal_tasks(
                &cfg.scene,
                &cfg.deform,
                &cfg.augment,
                args.pairs,
                task_seed,
                &TaskOptions::geometry_only(),
            )?,
        },
    };
    let (per_class, base_cfg, stage) = match args.stage {
        Stage::Pretrain => (cfg.gccm.pretrain_samples_per_class, cfg.gccm.pretrain, "pretrain"),
        Stage::Finetune => (cfg.gccm.finetune_samples_per_class, cfg.gccm.finetune, "finetune"),
    };
    let per_class = args.samples.unwrap_or(per_class);
    let samples = make_gccm_training_set(
        &tasks,
        DEFAULT_SUBSET_SIZE,
        per_class,
        per_class,
        &cfg.gccm.corruption,
        rng::derive(cfg.seed, purpose::GCCM_SAMPLES),
    )?;
    let train_cfg = TrainConfig {
        seed: rng::derive(cfg.seed, purpose::GCCM_TRAIN),
        ..base_cfg
    };
    let start = match &init {
        Some(m) => m.clone(),
        None => GccmModel::new(DEFAULT_SUBSET_SIZE, train_cfg.seed)?,
    };
    let outcome: GccmTrainOutcome = train_gccm_from(start, &samples, &train_cfg, stage)?;
    // Accuracy of the starting model on the same held-out split, so the
    // effect of fine-tuning can be read off the metrics file.
    let init_heldout = init.as_ref().map(|m| {
        let (_, held) = split_heldout(&samples, train_cfg.seed);
        accuracy(m, &held)
    });
    let text = outcome.model.to_json()?;
    write_file(&args.out, &text)?;
    let report = json!({
        "stage": stage,
        "model": args.out.file_name().map(|n| n.to_string_lossy().into_owned()),
        "model_sha256": sha256_hex(text.as_bytes()),
        "tasks": tasks.len(),
        "n_train": outcome.n_train,
        "n_heldout": outcome.n_heldout,
        "train_accuracy": outcome.train_accuracy,
        "heldout_accuracy": outcome.heldout_accuracy,
        "init_heldout_accuracy": init_heldout,
        "train": train_cfg,
        "loss_curve": outcome.loss_curve,
    });
    write_file(
        &metrics_path(&args.out, args.metrics),
        serde_json::to_string_pretty(&report)?,
    )?;
    log::info!(
        "gccm {stage}: {} samples from {} tasks, held-out accuracy {:.4}",
        samples.len(),
        tasks.len(),
        outcome.heldout_accuracy
    );
    Ok(())
}

fn load_side(path: &Path, map: Option<&PathBuf>) -> CliResult<DescriptorSet> {
    let ds = read_descriptors(path)?;
    Ok(match map {
        Some(m) => ds.with_semantic_from(&read_feature_map(m)?)?,
        None => ds,
    })
}

pub fn match_cmd(cfg: &RunConfig, args: MatchArgs) -> CliResult<()> {
    let mut a = load_side(&args.a, args.feature_map_a.as_ref())?;
    let mut b = load_side(&args.b, args.feature_map_b.as_ref())?;
    if let Some(path) = &args.fusion {
        let fusion = FusionNet::load(path)?;
        a = fuse(&a, &fusion)?;
        b = fuse(&b, &fusion)?;
    }
    let matcher = MatcherConfig {
        temperature: args.temperature.unwrap_or(cfg.matcher.temperature),
        min_score: args.min_score.unwrap_or(cfg.matcher.min_score),
        ..cfg.matcher
    };
    matcher.validate()?;
    let set = match_initial(&a, &b, &matcher)?;
    write_file(&args.out, set.to_json()?)?;
    log::info!(
        "{} initial matches between {} and {} keypoints",
        set.len(),
        a.len(),
        b.len()
    );
    Ok(())
}

pub fn verify(cfg: &RunConfig, args: VerifyArgs) -> CliResult<()> {
    let initial = MatchSet::load(&args.matches)?;
    let kp_a = read_descriptors(&args.a)?.keypoints().to_vec();
    let kp_b = read_descriptors(&args.b)?.keypoints().to_vec();
    if initial.n_a != kp_a.len() || initial.n_b != kp_b.len() {
        return Err(CliError::Data(format!(
            "match set is {}×{} but descriptor files hold {}×{} keypoints",
            initial.n_a,
            initial.n_b,
            kp_a.len(),
            kp_b.len()
        )));
    }
    match args.method {
        Verifier::Gccm => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| usage("--method gccm needs --model"))?;
            let model = GccmModel::load(path)?;
            let vcfg = VerifyConfig {
                tau: args.tau.unwrap_or(cfg.verify.tau),
                seed: cfg.seed,
                ..cfg.verify
            };
            vcfg.validate()?;
            let half = half_diagonals(args.image_size, &kp_a, &kp_b);
            let result = verify_or_passthrough(&model, &initial, &kp_a, &kp_b, half, &vcfg)?;
            if result.unverified {
                log::warn!(
                    "fewer than {} initial matches; passing them through unverified",
                    model.subset_size()
                );
            }
            result.save(&args.out)?;
            log::info!(
                "kept {} of {} matches at tau {}",
                result.final_set.len(),
                initial.len(),
                vcfg.tau
            );
        }
        Verifier::Ransac => {
            if args.tau.is_some() {
                return Err(usage("--tau applies to --method gccm only"));
            }
            let rcfg = RansacConfig {
                seed: cfg.seed,
                ..cfg.ransac
            };
            let r = ransac_similarity(&initial, &kp_a, &kp_b, &rcfg)?;
            let doc = json!({
                "format_version": neurmatch::formats::MATCH_FORMAT_VERSION,
                "method": "ransac",
                "model": r.model.map(|m| m.to_json()),
                "iterations": r.iterations_run,
                "final": r.inliers,
            });
            write_file(&args.out, serde_json::to_string(&doc)?)?;
            log::info!("ransac kept {} of {} matches", r.inliers.len(), initial.len());
        }
    }
    Ok(())
}

fn half_diagonals(image_size: Option<usize>, a: &[Point2], b: &[Point2]) -> (f64, f64) {
    match image_size {
        Some(s) => (half_diagonal(s), half_diagonal(s)),
        None => (half_diagonal_of(a), half_diagonal_of(b)),
    }
}

fn parse_methods(tags: &[String]) -> CliResult<Option<Vec<Method>>> {
    if tags.is_empty() {
        return Ok(None);
    }
    tags.iter()
        .map(|t| Method::parse(t.trim()).map_err(CliError::from))
        .collect::<CliResult<Vec<_>>>()
        .map(Some)
}

fn configure(cfg: &RunConfig, mut p: Pipeline) -> Pipeline {
    p.matcher = cfg.matcher;
    p.verify = cfg.verify;
    p.ransac = cfg.ransac;
    p.tre = cfg.tre;
    p
}

fn emit_report(cfg: &RunConfig, report: &EvalReport) -> CliResult<()> {
    match cfg.format {
        OutputFormat::Table => emit(&report.to_table()),
        OutputFormat::Json => emit(&(report.to_json()? + "\n")),
        OutputFormat::Csv => emit(&report.to_csv()),
    }
}

pub fn eval(cfg: &RunConfig, args: EvalArgs) -> CliResult<()> {
    let tasks = load_tasks(&args.tasks)?;
    let fusion = args.fusion.as_deref().map(FusionNet::load).transpose()?;
    let gccm = args.gccm.as_deref().map(GccmModel::load).transpose()?;
    let methods = match parse_methods(&args.methods)? {
        Some(m) => {
            for method in &m {
                if method.uses_semantic() && fusion.is_none() {
                    return Err(usage(format!("{} needs --fusion", method.tag())));
                }
                if method.uses_gccm() && gccm.is_none() {
                    return Err(usage(format!("{} needs --gccm", method.tag())));
                }
            }
            m
        }
        None => Method::ALL
            .into_iter()
            .filter(|m| (!m.uses_semantic() || fusion.is_some()) && (!m.uses_gccm() || gccm.is_some()))
            .collect(),
    };
    let pipeline = configure(cfg, Pipeline::new(fusion, gccm));
    let report = benchmark(&methods, &tasks, &pipeline, cfg.seed)?;
    if let Some(path) = &args.out {
        write_file(path, report.to_json()?)?;
    }
    if let Some(path) = &args.timing {
        write_file(path, report.timing_json()?)?;
    }
    emit_report(cfg, &report)
}

pub fn bench(cfg: &RunConfig, args: BenchArgs) -> CliResult<()> {
    let suite = SuiteConfig::by_name(&args.suite)?;
    let methods = parse_methods(&args.methods)?.unwrap_or_else(|| Method::ALL.to_vec());
    log::info!("suite {}: training models (seed {})", suite.name, cfg.seed);
    let models = train_models(&suite, cfg.seed)?;
    let tasks = suite.test_tasks(cfg.seed)?;
    log::info!(
        "suite {}: benchmarking {} methods on {} tasks",
        suite.name,
        methods.len(),
        tasks.len()
    );
    let report = benchmark(&methods, &tasks, &configure(cfg, models.pipeline()), cfg.seed)?;
    if let Some(dir) = &args.out {
        write_file(&dir.join("report.json"), report.to_json()?)?;
        write_file(&dir.join("timing.json"), report.timing_json()?)?;
        write_file(&dir.join("fusion.json"), models.fusion.to_json()?)?;
        write_file(&dir.join("gccm_pretrain.json"), models.gccm_pretrain.model.to_json()?)?;
        write_file(&dir.join("gccm.json"), models.gccm().to_json()?)?;
        let training = json!({
            "suite": suite,
            "fusion_loss": models.fusion_loss,
            "gccm_pretrain": {
                "heldout_accuracy": models.gccm_pretrain.heldout_accuracy,
                "train_accuracy": models.gccm_pretrain.train_accuracy,
                "loss_curve": models.gccm_pretrain.loss_curve,
            },
            "gccm_finetune": {
                "heldout_accuracy": models.gccm_finetune.heldout_accuracy,
                "train_accuracy": models.gccm_finetune.train_accuracy,
                "loss_curve": models.gccm_finetune.loss_curve,
            },
        });
        write_file(&dir.join("training.json"), serde_json::to_string_pretty(&training)?)?;
        log::info!("wrote report and models to {}", dir.display());
    }
    emit_report(cfg, &report)
}

pub fn inspect(args: InspectArgs) -> CliResult<()> {
    let v = crate::inspect::inspect(&args.file, args.summary)?;
    emit(&(serde_json::to_string_pretty(&v)? + "\n"))
}

pub fn print_config(cfg: &RunConfig) -> CliResult<()> {
    match cfg.format {
        OutputFormat::Json => emit(&(serde_json::to_string_pretty(cfg)? + "\n")),
        _ => emit(&cfg.to_toml()?),
    }
}
