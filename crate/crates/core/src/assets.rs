//! Building the frozen assets a continual run depends on: the pretrained
//! generator and the stopping oracle. Both are built from classes disjoint
//! from the evaluation benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cl::{DreamStrategy, Learner, MethodConfig};
use crate::config::RunConfig;
use crate::dreaming::{optimize_prompt, DreamConfig, DreamTrajectory, StopKind, Stopper};
use crate::error::{Error, Result};
use crate::features::CANDIDATE_NAMES;
use crate::generator::{pretrain_generator, FrozenGenerator, GeneratorManifest, PretrainConfig, Prompt};
use crate::heads::HeadTable;
use crate::nn::{classifier, Mlp, DEFAULT_CLASSIFIER_HIDDEN};
use crate::oracle::{
    label_trajectories, select_features, should_stop, split_by_trajectory, train_oracle, LabelConfig, LabeledSet,
    OracleNet, OracleReport, OracleTrainConfig, StopRule, TrajectoryWindow,
};
use crate::pipeline::{run_pipeline_observed, Assets};
use crate::synth::{make_disjoint_bank, make_generator_set, task_sizes, BenchmarkSpec, TaskStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSetConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Multiplier on the benchmark's parameter jitter.
    pub jitter_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorSetConfig {
    fn default() -> Self {
        Self {
            classes: 80,
            samples_per_class: 60,
            jitter_scale: 5.0,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleBuildConfig {
    pub bank_classes: usize,
    /// Tasks after the first in the bank's continual run.
    pub bank_post_first_tasks: usize,
    pub samples_per_class: usize,
    pub bank_seed: u64,
    /// Training of the bank classifier across its tasks.
    pub bank_method: MethodConfig,
    /// Also label runs against classifiers from a dreaming run on the bank.
    pub dream_contexts: bool,
    /// Optimization runs per bank class.
    pub seeds_per_class: usize,
    pub max_iterations: usize,
    pub probe_size: usize,
    pub prompt_learning_rate: f64,
    pub val_fraction: f64,
    pub run_seed: u64,
    pub label: LabelConfig,
    pub train: OracleTrainConfig,
}

impl Default for OracleBuildConfig {
    fn default() -> Self {
        Self {
            bank_classes: 16,
            bank_post_first_tasks: 4,
            samples_per_class: 100,
            bank_seed: 21,
            bank_method: MethodConfig::default(),
            dream_contexts: true,
            seeds_per_class: 3,
            max_iterations: 500,
            probe_size: 8,
            prompt_learning_rate: 0.1,
            val_fraction: 0.25,
            run_seed: 1,
            label: LabelConfig::default(),
            train: OracleTrainConfig::default(),
        }
    }
}

/// Generator-pretraining set for `benchmark`, then the pretrained generator.
pub fn build_generator(
    benchmark: &TaskStream,
    set: &GeneratorSetConfig,
    cfg: &PretrainConfig,
) -> Result<(FrozenGenerator, GeneratorManifest)> {
    let data = make_generator_set(
        set.classes,
        set.samples_per_class,
        benchmark.grid,
        set.seed,
        &[benchmark],
        set.jitter_scale,
    )?;
    let task = &data.tasks[0];
    pretrain_generator(&task.train, &task.test, cfg)
}

/// Classifier state after one task of the bank's continual run.
#[derive(Clone, Debug)]
pub struct BankContext {
    pub task: usize,
    pub net: Mlp,
    pub table: HeadTable,
}

/// Trains a classifier through the tasks of `bank` without dreams,
/// snapshotting it after each task.
pub fn bank_contexts(bank: &TaskStream, method: &MethodConfig, seed: u64) -> Result<Vec<BankContext>> {
    method.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = classifier(bank.pixels(), &DEFAULT_CLASSIFIER_HIDDEN, bank.num_classes(), &mut rng);
    let mut learner = Learner::new(net, method.clone());
    let mut out = Vec::with_capacity(bank.tasks.len());
    for (t, task) in bank.tasks.iter().enumerate() {
        learner.assign_free(&task.classes)?;
        learner.train_task(task, t, None, &mut rng)?;
        out.push(BankContext {
            task: t,
            net: learner.net.clone(),
            table: learner.table.clone(),
        });
    }
    Ok(out)
}

/// Classifier snapshots taken before each dreaming phase of a dreaming run
/// on `bank`. Prompt optimization in that run stops by the fixed rule, so no
/// oracle is needed.
pub fn dreaming_contexts(
    bank: &TaskStream,
    method: &MethodConfig,
    generator: &FrozenGenerator,
    seed: u64,
) -> Result<Vec<BankContext>> {
    let cfg = RunConfig {
        method: MethodConfig {
            dreams: true,
            strategy: DreamStrategy::D2lReplace,
            ..method.clone()
        },
        dream: DreamConfig {
            stop: StopKind::Fixed,
            ..DreamConfig::default()
        },
        ..RunConfig::default()
    };
    let assets = Assets {
        generator: Some(generator),
        oracle: None,
    };
    let mut out = Vec::new();
    run_pipeline_observed(&cfg, bank, assets, seed, &mut |view| {
        out.push(BankContext {
            task: view.task,
            net: view.learner.net.clone(),
            table: view.learner.table.clone(),
        })
    })?;
    Ok(out)
}

/// One uninterrupted optimization run on a bank class.
#[derive(Clone, Debug)]
pub struct BankTrajectory {
    /// Index into the contexts the run was collected from.
    pub context: usize,
    pub task: usize,
    pub class: usize,
    pub seed: usize,
    pub trajectory: DreamTrajectory,
}

/// Full-length optimization runs for every class of every context, several
/// seeds each, in parallel. A class is optimized against the classifier
/// snapshot taken after its own task, conditioning on the other classes of
/// that task. Each run owns an RNG derived from `run_seed`, the context,
/// the class and the seed index, so results do not depend on scheduling.
pub fn collect_trajectories(
    bank: &TaskStream,
    contexts: &[BankContext],
    generator: &FrozenGenerator,
    cfg: &OracleBuildConfig,
    record_candidates: bool,
) -> Result<Vec<BankTrajectory>> {
    let dream_cfg = DreamConfig {
        learning_rate: cfg.prompt_learning_rate,
        max_iterations: cfg.max_iterations,
        probe_size: cfg.probe_size,
        stop: StopKind::Never,
        ..DreamConfig::default()
    };
    let jobs: Vec<(usize, &BankContext, usize, usize)> = contexts
        .iter()
        .enumerate()
        .flat_map(|(k, ctx)| {
            bank.tasks[ctx.task]
                .classes
                .iter()
                .flat_map(move |&c| (0..cfg.seeds_per_class).map(move |s| (k, ctx, c, s)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(k, ctx, class, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(job_seed(cfg.run_seed, &[k as u64, class as u64, seed as u64]));
            let task = &bank.tasks[ctx.task];
            let pool = task.train.filter(|l| l != class).images;
            let prompt = Prompt::new(&bank.classes[class].label(), generator.dims())?;
            let head = ctx
                .table
                .head_of_real(class)
                .ok_or_else(|| Error::invalid(format!("bank class {class} has no head")))?;
            let (_, trajectory) = optimize_prompt(
                &ctx.net,
                generator,
                prompt,
                head,
                &ctx.table.active_mask(),
                &pool,
                &dream_cfg,
                Stopper::Never,
                record_candidates,
                &mut rng,
            )?;
            Ok(BankTrajectory {
                context: k,
                task: ctx.task,
                class,
                seed,
                trajectory,
            })
        })
        .collect()
}

fn job_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// First iteration at which `oracle` would have stopped the recorded run.
pub fn oracle_stop_iteration(
    oracle: &OracleNet,
    trajectory: &DreamTrajectory,
    rule: StopRule,
    threshold: f64,
) -> Result<Option<usize>> {
    let feats: Vec<_> = trajectory.records.iter().map(|r| r.features).collect();
    let mut probs = Vec::new();
    for end in 0..feats.len() {
        if let Some(w) = TrajectoryWindow::ending_at(&feats, end) {
            probs.push(oracle.predict(&w.flatten())?);
            if end > 0 && should_stop(&probs, rule, threshold) {
                return Ok(Some(end));
            }
        }
    }
    Ok(None)
}

#[derive(Clone, Debug)]
pub struct OracleArtifacts {
    pub oracle: OracleNet,
    pub report: OracleReport,
    pub labeled: LabeledSet,
    pub trajectories: Vec<BankTrajectory>,
    /// Permutation importance of the candidate bank, highest first.
    pub ranking: Vec<(String, f64)>,
    pub bank: TaskStream,
}

/// The disjoint bank used to label trajectories. `exclude` lists streams
/// whose cells the bank must avoid.
pub fn oracle_bank(benchmark: &TaskStream, cfg: &OracleBuildConfig, exclude: &[&TaskStream]) -> Result<TaskStream> {
    let mut all = vec![benchmark];
    all.extend_from_slice(exclude);
    let bank = make_disjoint_bank(
        cfg.bank_classes,
        cfg.samples_per_class,
        benchmark.grid,
        cfg.bank_seed,
        &all,
    )?;
    bank.regroup(&task_sizes(cfg.bank_classes, cfg.bank_post_first_tasks)?)
}

/// Labels full-length runs on a disjoint bank and trains the oracle on them.
pub fn build_oracle(
    benchmark: &TaskStream,
    generator: &FrozenGenerator,
    cfg: &OracleBuildConfig,
    exclude: &[&TaskStream],
) -> Result<OracleArtifacts> {
    let bank = oracle_bank(benchmark, cfg, exclude)?;
    let mut contexts = bank_contexts(&bank, &cfg.bank_method, cfg.run_seed)?;
    if cfg.dream_contexts {
        contexts.extend(dreaming_contexts(&bank, &cfg.bank_method, generator, cfg.run_seed)?);
    }
    let trajectories = collect_trajectories(&bank, &contexts, generator, cfg, true)?;
    let points: Vec<_> = trajectories.iter().map(|t| t.trajectory.points()).collect();
    let labeled = label_trajectories(&points, &cfg.label)?;
    let (train, val) = split_by_trajectory(&labeled.windows, cfg.val_fraction, cfg.run_seed);
    let (oracle, report) = train_oracle(&train, &val, &cfg.train)?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (t, label) in trajectories.iter().zip(&labeled.labels) {
        let Some(label) = label else { continue };
        for r in &t.trajectory.records {
            let cand = r
                .candidates
                .as_ref()
                .ok_or_else(|| Error::invalid("candidates were not recorded"))?;
            rows.push(cand.clone());
            labels.push(r.iteration >= *label);
        }
    }
    let ranking = select_features(&CANDIDATE_NAMES, &rows, &labels, cfg.run_seed)?;
    Ok(OracleArtifacts {
        oracle,
        report,
        labeled,
        trajectories,
        ranking,
        bank,
    })
}

/// Stop iterations of two oracles, trained on disjoint banks, compared on
/// the second bank's trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub trajectories: usize,
    /// Trajectories on which both oracles stopped.
    pub compared: usize,
    pub mean_abs_deviation: f64,
    pub max_iterations: usize,
}

pub fn generalization_check(
    benchmark: &TaskStream,
    generator: &FrozenGenerator,
    cfg: &OracleBuildConfig,
) -> Result<GeneralizationReport> {
    let a = build_oracle(benchmark, generator, cfg, &[])?;
    generalization_against(benchmark, generator, cfg, &a)
}

/// [`generalization_check`] with the first oracle already built from `cfg`.
pub fn generalization_against(
    benchmark: &TaskStream,
    generator: &FrozenGenerator,
    cfg: &OracleBuildConfig,
    a: &OracleArtifacts,
) -> Result<GeneralizationReport> {
    let other = OracleBuildConfig {
        bank_seed: cfg.bank_seed.wrapping_add(1),
        ..cfg.clone()
    };
    let b = build_oracle(benchmark, generator, &other, &[&a.bank])?;
    let threshold = 0.5;
    let rule = StopRule::default();
    let mut diffs = Vec::new();
    for t in &b.trajectories {
        let sa = oracle_stop_iteration(&a.oracle, &t.trajectory, rule, threshold)?;
        let sb = oracle_stop_iteration(&b.oracle, &t.trajectory, rule, threshold)?;
        if let (Some(x), Some(y)) = (sa, sb) {
            diffs.push(x.abs_diff(y) as f64);
        }
    }
    Ok(GeneralizationReport {
        trajectories: b.trajectories.len(),
        compared: diffs.len(),
        mean_abs_deviation: if diffs.is_empty() {
            f64::NAN
        } else {
            diffs.iter().sum::<f64>() / diffs.len() as f64
        },
        max_iterations: cfg.max_iterations,
    })
}

/// Asset-building configuration: the benchmark to stay disjoint from, the
/// generator and its data, and the oracle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssetConfig {
    pub benchmark: BenchmarkSpec,
    pub generator_set: GeneratorSetConfig,
    pub pretrain: PretrainConfig,
    pub oracle: OracleBuildConfig,
}
