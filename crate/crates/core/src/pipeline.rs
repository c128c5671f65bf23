//! One continual run end to end, and the multi-seed driver around it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cl::{
    assign_real_classes, csv_err, write_epoch_rows, AssignmentCall, DreamSampler, DreamStrategy, EpochLog, Learner,
    MethodConfig, StepLoss, EPOCH_LOG_HEADER,
};
use crate::config::RunConfig;
use crate::dreaming::{
    dump_dream, generate_dream_class, optimize_prompt, regenerate_pool, remove_dreams, update_inventory, DreamClass,
    DreamInventory, InventoryUpdate, NewDream, OnlineDreams, StopKind, StopReason, Stopper,
};
use crate::error::{Error, Result};
use crate::generator::{FrozenGenerator, Prompt};
use crate::heads::HeadRole;
use crate::metrics::{
    count_leaks, evaluate_classes, random_baseline, train_joint_classifier, write_results_csv, AccuracyMatrix,
    LeakCount, Replacement, ResultRow,
};
use crate::nn::{classifier, Mlp, DEFAULT_CLASSIFIER_HIDDEN};
use crate::oracle::OracleNet;
use crate::synth::{make_benchmark, Task, TaskStream};

/// Frozen networks a run reads but never updates.
#[derive(Clone, Copy, Debug, Default)]
pub struct Assets<'a> {
    pub generator: Option<&'a FrozenGenerator>,
    pub oracle: Option<&'a OracleNet>,
}

/// Loaded asset checkpoints.
#[derive(Clone, Debug, Default)]
pub struct LoadedAssets {
    pub generator: Option<FrozenGenerator>,
    pub oracle: Option<OracleNet>,
}

impl LoadedAssets {
    /// Loads whatever `cfg` needs: nothing without dreams, the generator
    /// with them, and the oracle when it decides stopping.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mut out = Self::default();
        if cfg.method.dreams {
            out.generator = Some(FrozenGenerator::load(&cfg.assets.generator)?.0);
            if cfg.dream.stop == StopKind::Oracle {
                out.oracle = Some(OracleNet::load(&cfg.assets.oracle)?.0);
            }
        }
        Ok(out)
    }

    pub fn view(&self) -> Assets<'_> {
        Assets {
            generator: self.generator.as_ref(),
            oracle: self.oracle.as_ref(),
        }
    }
}

/// One prompt optimization and where its dream landed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DreamEvent {
    pub source_class: usize,
    pub target_head: usize,
    pub iterations: usize,
    pub reason: StopReason,
    pub initial_target_prob: f64,
    pub stop_target_prob: f64,
    pub stop_features: [f64; 4],
    /// Per recorded iteration: target probability and oracle output.
    pub target_probs: Vec<f64>,
    pub oracle_probs: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TaskEvents {
    pub task: usize,
    pub assignment: Option<AssignmentCall>,
    pub removed_dreams: Vec<usize>,
    pub dreams: Vec<DreamEvent>,
    pub inventory: Option<InventoryUpdate>,
    pub active_dreams: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: Vec<TaskEvents>,
    pub matrix: AccuracyMatrix,
    pub dreaming_phases: usize,
    /// Assignment and mapping calls verified by exhaustive search.
    pub exhaustive_checks: usize,
    pub replacements: Vec<Replacement>,
    pub generator_hash: Option<(String, String)>,
    pub oracle_hash: Option<(String, String)>,
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochLog>,
    pub head_width: usize,
    pub wall_clock_secs: f64,
    /// Every dream placed during the run, with the head it was given.
    #[serde(skip)]
    pub placed_dreams: Vec<(DreamClass, usize)>,
}

impl RunRecord {
    pub fn stop_target_probs(&self) -> Vec<f64> {
        self.tasks
            .iter()
            .flat_map(|t| t.dreams.iter().map(|d| d.stop_target_prob))
            .collect()
    }
}

/// Short name of a method variant, e.g. `er-ace+d2l`.
pub fn run_label(m: &MethodConfig) -> String {
    match m.strategy {
        DreamStrategy::None => m.method.name().to_string(),
        DreamStrategy::D2lReplace => format!("{}+d2l", m.method.name()),
        DreamStrategy::AtBeginning => format!("{}+d2l-at-beginning", m.method.name()),
        DreamStrategy::Incremental => format!("{}+d2l-incremental", m.method.name()),
    }
}

fn sampler<'a>(
    cfg: &RunConfig,
    generator: &'a FrozenGenerator,
    inventory: &DreamInventory,
    learner: &Learner,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn DreamSampler + 'a>> {
    if cfg.dream.online {
        Ok(Box::new(OnlineDreams::new(
            generator,
            inventory,
            &learner.table,
            &learner.buffer,
        )))
    } else {
        Ok(Box::new(regenerate_pool(
            generator,
            inventory,
            &learner.table,
            &learner.buffer,
            cfg.dream.samples_per_class,
            rng,
        )?))
    }
}

/// Optimizes one prompt per class of `task` and generates its dataset.
/// Classes run in parallel, each on an RNG seeded from `rng` in class order.
fn dream_task(
    cfg: &RunConfig,
    stream: &TaskStream,
    task: &Task,
    task_index: usize,
    learner: &Learner,
    assets: Assets<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<NewDream>, Vec<DreamEvent>)> {
    let generator = assets
        .generator
        .ok_or_else(|| Error::Config("dreaming needs a generator".into()))?;
    let stopper = match cfg.dream.stop {
        StopKind::Oracle => Stopper::Oracle {
            oracle: assets
                .oracle
                .ok_or_else(|| Error::Config("oracle stopping needs an oracle".into()))?,
            rule: cfg.dream.rule,
            threshold: cfg.dream.threshold,
        },
        StopKind::Fixed => Stopper::Fixed,
        StopKind::Never => Stopper::Never,
    };
    let mask = learner.table.active_mask();
    let seeds: Vec<u64> = task.classes.iter().map(|_| rng.random()).collect();
    let results: Vec<Result<(NewDream, DreamEvent)>> = task
        .classes
        .par_iter()
        .zip(seeds)
        .map(|(&c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = learner
                .table
                .head_of_real(c)
                .ok_or_else(|| Error::invalid(format!("class {c} has no head")))?;
            let pool = task.train.filter(|l| l != c).images;
            let prompt = Prompt::new(&stream.classes[c].label(), generator.dims())?;
            let (prompt, trajectory) = optimize_prompt(
                &learner.net,
                generator,
                prompt,
                target,
                &mask,
                &pool,
                &cfg.dream,
                stopper,
                false,
                &mut rng,
            )?;
            let dataset = generate_dream_class(
                generator,
                &prompt,
                &learner.buffer,
                cfg.dream.samples_per_class,
                &mut rng,
            )?;
            let last = trajectory.last();
            let event = DreamEvent {
                source_class: c,
                target_head: target,
                iterations: trajectory.iterations(),
                reason: trajectory.reason,
                initial_target_prob: trajectory.records[0].target_prob,
                stop_target_prob: last.target_prob,
                stop_features: last.features.to_array(),
                target_probs: trajectory.records.iter().map(|r| r.target_prob).collect(),
                oracle_probs: trajectory.records.iter().map(|r| r.oracle_prob).collect(),
            };
            Ok((
                NewDream {
                    prompt,
                    source_class: c,
                    created_task: task_index,
                    trajectory,
                    dataset,
                },
                event,
            ))
        })
        .collect();
    let mut dreams = Vec::with_capacity(results.len());
    let mut events = Vec::with_capacity(results.len());
    for r in results {
        let (d, e) = r?;
        dreams.push(d);
        events.push(e);
    }
    Ok((dreams, events))
}

fn evaluate_column(stream: &TaskStream, learner: &Learner, matrix: &mut AccuracyMatrix, after: usize) -> Result<()> {
    for (i, task) in stream.tasks.iter().enumerate().take(after) {
        let (c, _) = evaluate_classes(&learner.net, &learner.table, &task.test, &task.classes)?;
        matrix.set(i, after, c)?;
    }
    Ok(())
}

/// Runs every task of `stream` with the seed's RNG. The first task is
/// trained alone and, with dreams on, followed by dreaming and a fine-tune
/// on real and dream data. Later tasks map their classes to heads, train,
/// and dream, except the last, which only trains.
///
/// `A[t][t]` is measured right after task `t`'s classes receive heads.
pub fn run_pipeline(cfg: &RunConfig, stream: &TaskStream, assets: Assets<'_>, seed: u64) -> Result<RunRecord> {
    run_pipeline_observed(cfg, stream, assets, seed, &mut |_| {})
}

/// The learner as a dreaming phase begins.
#[derive(Clone, Copy, Debug)]
pub struct PhaseView<'a> {
    pub task: usize,
    pub learner: &'a Learner,
}

/// [`run_pipeline`] calling `observe` before every dreaming phase.
pub fn run_pipeline_observed(
    cfg: &RunConfig,
    stream: &TaskStream,
    assets: Assets<'_>,
    seed: u64,
    observe: &mut dyn FnMut(PhaseView<'_>),
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let m = &cfg.method;
    let gen_before = assets.generator.map(FrozenGenerator::hash);
    let oracle_before = assets.oracle.map(OracleNet::hash);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = classifier(
        stream.pixels(),
        &DEFAULT_CLASSIFIER_HIDDEN,
        stream.num_classes(),
        &mut rng,
    );
    let mut learner = Learner::new(net, m.clone());
    let mut inventory = DreamInventory::default();
    let mut matrix = AccuracyMatrix::new(stream.tasks.iter().map(|t| t.test.len()).collect());
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    let mut replacements = Vec::new();
    let mut phases = 0;
    let mut checks = 0;
    let mut placed_dreams = Vec::new();
    let last = stream.tasks.len() - 1;

    for (t, task) in stream.tasks.iter().enumerate() {
        let mut ev = TaskEvents {
            task: t,
            ..TaskEvents::default()
        };
        if t > 0 && m.dreams {
            let before = learner.table.clone();
            let call = assign_real_classes(&learner.net, task, &mut learner.table, m.assignment)?;
            call.check()?;
            checks += 1;
            for &(class, head) in &call.assigned {
                if let HeadRole::Dream(id) = before.role(head) {
                    let d = inventory
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("dream {id} missing from inventory")))?;
                    replacements.push(Replacement {
                        task: t,
                        class,
                        head,
                        dream_id: id,
                        dream_source: d.source_class,
                        stop_samples: d.stop_samples.clone(),
                    });
                }
            }
            remove_dreams(&mut inventory, &call.evicted);
            inventory.validate(&learner.table)?;
            ev.removed_dreams = call.evicted.clone();
            ev.assignment = Some(call);
        } else {
            learner.assign_free(&task.classes)?;
        }
        let (c, _) = evaluate_classes(&learner.net, &learner.table, &task.test, &task.classes)?;
        matrix.set(t, t, c)?;

        if t == 0 && m.dreams {
            learner.bootstrap_task1(task, t, &mut rng)?;
        } else if m.dreams && !inventory.is_empty() {
            let generator = assets.generator.expect("checked by dream_task before any dream exists");
            let mut dreams = sampler(cfg, generator, &inventory, &learner, &mut rng)?;
            learner.train_task(task, t, Some(dreams.as_mut()), &mut rng)?;
        } else {
            learner.train_task(task, t, None, &mut rng)?;
        }

        let dreams_here = m.dreams && t < last && (t == 0 || m.strategy != DreamStrategy::AtBeginning);
        if dreams_here {
            observe(PhaseView {
                task: t,
                learner: &learner,
            });
            let (new, events) = dream_task(cfg, stream, task, t, &learner, assets, &mut rng)?;
            let update = update_inventory(
                m.strategy,
                new,
                &mut inventory,
                &mut learner.table,
                &mut learner.net,
                &mut rng,
            )?;
            for call in &update.mappings {
                call.check()?;
                checks += 1;
            }
            for &(id, head) in &update.placed {
                if let Some(d) = inventory.get(id) {
                    placed_dreams.push((d.clone(), head));
                }
            }
            ev.dreams = events;
            ev.inventory = Some(update);
            phases += 1;
            if t == 0 {
                let generator = assets.generator.expect("dream_task succeeded");
                let mut dreams = sampler(cfg, generator, &inventory, &learner, &mut rng)?;
                learner.finetune_mixture(task, t, dreams.as_mut(), &mut rng)?;
            }
        }
        ev.active_dreams = inventory.len();
        tasks.push(ev);
        evaluate_column(stream, &learner, &mut matrix, t + 1)?;
    }

    let generator_hash = check_frozen(gen_before, assets.generator.map(FrozenGenerator::hash))?;
    let oracle_hash = check_frozen(oracle_before, assets.oracle.map(OracleNet::hash))?;
    Ok(RunRecord {
        label: run_label(m),
        seed,
        config_hash: cfg.snapshot_hash()?,
        tasks,
        matrix,
        dreaming_phases: phases,
        exhaustive_checks: checks,
        replacements,
        generator_hash,
        oracle_hash,
        steps: learner.steps,
        epochs: learner.epochs,
        head_width: learner.table.width(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        placed_dreams,
    })
}

fn check_frozen(before: Option<String>, after: Option<String>) -> Result<Option<(String, String)>> {
    match (before, after) {
        (Some(b), Some(a)) if a != b => Err(Error::FrozenViolation { expected: b, found: a }),
        (Some(b), Some(a)) => Ok(Some((b, a))),
        _ => Ok(None),
    }
}

/// A finished run with its metrics.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub row: ResultRow,
    pub leaks: LeakCount,
}

/// Metrics shared by every run on one benchmark.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub baseline: Vec<f64>,
    pub joint: Mlp,
}

impl Evaluation {
    pub fn new(cfg: &RunConfig, stream: &TaskStream) -> Result<Self> {
        let seeds: Vec<u64> = (0..cfg.eval.random_inits as u64)
            .map(|i| cfg.eval.random_seed + i)
            .collect();
        Ok(Self {
            baseline: random_baseline(stream, stream.num_classes(), &seeds)?,
            joint: train_joint_classifier(stream, cfg.eval.joint_epochs, cfg.eval.joint_seed)?,
        })
    }

    pub fn score(&self, cfg: &RunConfig, record: RunRecord) -> Result<RunOutcome> {
        let leaks = count_leaks(&record.replacements, &self.joint)?;
        let row = ResultRow {
            method: record.label.clone(),
            buffer: cfg.method.buffer_capacity,
            seed: record.seed,
            faa: record.matrix.faa(),
            fwt: record.matrix.fwt(&self.baseline)?,
            leaks: leaks.leaks,
            leak_fraction: leaks.fraction,
        };
        Ok(RunOutcome { record, row, leaks })
    }
}

/// Runs every seed of `cfg` in parallel and scores the results, in seed
/// order.
pub fn run_seeds(
    cfg: &RunConfig,
    stream: &TaskStream,
    assets: Assets<'_>,
    eval: &Evaluation,
) -> Result<Vec<RunOutcome>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| eval.score(cfg, run_pipeline(cfg, stream, assets, seed)?))
        .collect()
}

pub fn run_dir_name(row: &ResultRow) -> String {
    format!("{}-b{}-s{}", row.method, row.buffer, row.seed)
}

/// Writes a self-describing run directory: config snapshot, record, metrics,
/// accuracy matrix and plot, epoch log, and optionally the final dreams.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome, grid: usize, dump_dreams: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.snapshot()?)?;
    let json = serde_json::to_string_pretty(&outcome.record).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(dir.join("record.json"), json)?;
    write_results_csv(
        std::slice::from_ref(&outcome.row),
        fs::File::create(dir.join("metrics.csv"))?,
    )?;
    outcome
        .record
        .matrix
        .write_csv(fs::File::create(dir.join("accuracy.csv"))?)?;
    fs::write(dir.join("accuracy.svg"), outcome.record.matrix.to_svg())?;
    let mut log = csv::Writer::from_writer(fs::File::create(dir.join("epochs.csv"))?);
    log.write_record(EPOCH_LOG_HEADER).map_err(csv_err)?;
    write_epoch_rows(&outcome.record.epochs, &run_dir_name(&outcome.row), &mut log)?;
    log.flush()?;
    if dump_dreams {
        for (dream, head) in &outcome.record.placed_dreams {
            dump_dream(&dir.join("dreams"), dream, *head, &dream.stop_samples, grid)?;
        }
    }
    Ok(())
}

/// Runs `cfg` over its seeds, writing one directory per run plus
/// `results.csv` under `cfg.output_dir`. Returns the outcomes.
pub fn run_experiment(cfg: &RunConfig, dump_dreams: bool) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let assets = LoadedAssets::load(cfg)?;
    let stream = make_benchmark(&cfg.benchmark)?;
    let eval = Evaluation::new(cfg, &stream)?;
    let outcomes = run_seeds(cfg, &stream, assets.view(), &eval)?;
    fs::create_dir_all(&cfg.output_dir)?;
    for o in &outcomes {
        let dir: PathBuf = cfg.output_dir.join(run_dir_name(&o.row));
        write_run_dir(&dir, cfg, o, stream.grid, dump_dreams)?;
    }
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_results_csv(&rows, fs::File::create(cfg.output_dir.join("results.csv"))?)?;
    Ok(outcomes)
}
