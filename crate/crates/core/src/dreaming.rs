//! Dream classes: soft prompts optimized against the classifier through the
//! frozen generator, the datasets they generate, and their output heads.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cl::{argmax_masked, csv_err, DreamSampler, DreamStrategy};
use crate::error::{Error, Result};
use crate::features::{compute_candidate_bank, compute_features, FeatureVector};
use crate::generator::{FrozenGenerator, Prompt};
use crate::graph::{masked_softmax, Graph, Tensor};
use crate::heads::HeadTable;
use crate::nn::Mlp;
use crate::optim::Optimizer;
use crate::oracle::{fixed_stop, should_stop, OracleNet, StopRule, TrajectoryPoint, TrajectoryWindow};
use crate::replay::ReplayBuffer;
use crate::synth::SampleBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopKind {
    Oracle,
    Fixed,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreamConfig {
    pub samples_per_class: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Conditions in the fixed batch used for per-iteration statistics.
    pub probe_size: usize,
    pub stop: StopKind,
    pub rule: StopRule,
    pub threshold: f64,
    /// Generate dream samples at draw time instead of once per task.
    pub online: bool,
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 50,
            learning_rate: 0.1,
            max_iterations: 500,
            probe_size: 8,
            stop: StopKind::Oracle,
            rule: StopRule::default(),
            threshold: 0.5,
            online: false,
        }
    }
}

/// How prompt optimization decides to stop.
#[derive(Clone, Copy, Debug)]
pub enum Stopper<'a> {
    Oracle {
        oracle: &'a OracleNet,
        rule: StopRule,
        threshold: f64,
    },
    Fixed,
    Never,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Oracle,
    Fixed,
    Cap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Number of prompt updates applied so far.
    pub iteration: usize,
    pub soft: Vec<f64>,
    /// Mean `-log p(target)` on the probe batch.
    pub loss: f64,
    /// Mean `p(target)` on the probe batch.
    pub target_prob: f64,
    pub features: FeatureVector,
    /// Oracle output for the window ending here, once three records exist.
    pub oracle_prob: Option<f64>,
    /// Argmax on the sample that produced this update (none at iteration 0).
    pub prediction: Option<usize>,
    pub candidates: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DreamTrajectory {
    pub target_head: usize,
    pub records: Vec<IterationRecord>,
    pub reason: StopReason,
    /// Probe batch generated with the final prompt.
    pub stop_samples: Tensor,
    pub probe_conditions: Tensor,
}

impl DreamTrajectory {
    /// Prompt updates performed.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("iteration 0 is always recorded")
    }

    pub fn points(&self) -> Vec<TrajectoryPoint> {
        self.records
            .iter()
            .map(|r| TrajectoryPoint {
                target_prob: r.target_prob,
                features: r.features,
            })
            .collect()
    }
}

/// `-log p(target | G(x, prompt))` for one batch and its gradient with
/// respect to the soft prompt. Softmax runs over the heads in `mask`.
#[allow(clippy::too_many_arguments)]
pub fn prompt_loss(
    net: &Mlp,
    generator: &FrozenGenerator,
    x: &Tensor,
    soft: &Tensor,
    text: &Tensor,
    noise: &Tensor,
    target: usize,
    mask: &[bool],
) -> Result<(f64, Tensor, Tensor)> {
    let mut g = Graph::new();
    let bg = generator.bind(&mut g);
    let classifier = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let sv = g.leaf(soft.clone());
    let tv = g.constant(text.clone());
    let nv = g.constant(noise.clone());
    let out = bg.forward(&mut g, xv, sv, tv, nv)?;
    let (logits, _) = classifier.forward(&mut g, out)?;
    let targets = vec![target; x.nrows()];
    let loss = g.cross_entropy(logits, &targets, Some(mask))?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads.get(sv), g.value(logits).clone()))
}

struct Probe<'a> {
    net: &'a Mlp,
    generator: &'a FrozenGenerator,
    conditions: Tensor,
    noise: Tensor,
    target: usize,
    mask: &'a [bool],
    candidates: bool,
}

impl Probe<'_> {
    fn record(
        &self,
        iteration: usize,
        prompt: &Prompt,
        prediction: Option<usize>,
    ) -> Result<(IterationRecord, Tensor)> {
        let samples = self.generator.generate(&self.conditions, prompt, &self.noise)?;
        let (logits, _) = self.net.forward(&samples)?;
        let probs = masked_softmax(&logits, Some(self.mask));
        let p = probs.column(self.target);
        let target_prob = p.mean().unwrap_or(0.0);
        let loss = p.iter().map(|&v| -v.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / p.len() as f64;
        let features = compute_features(&samples, &self.conditions, self.net, self.generator)?;
        let candidates = if self.candidates {
            let bank = compute_candidate_bank(
                &samples,
                &self.conditions,
                self.net,
                self.generator,
                self.target,
                self.mask,
            )?;
            Some(bank.into_iter().map(|(_, v)| v).collect())
        } else {
            None
        };
        Ok((
            IterationRecord {
                iteration,
                soft: prompt.soft.clone(),
                loss,
                target_prob,
                features,
                oracle_prob: None,
                prediction,
                candidates,
            },
            samples,
        ))
    }
}

/// Optimizes the soft part of `prompt` so generated images are classified
/// as `target`, conditioning on rows of `pool` (images of other classes).
/// Statistics are recorded after every update on a fixed probe batch.
#[allow(clippy::too_many_arguments)]
pub fn optimize_prompt(
    net: &Mlp,
    generator: &FrozenGenerator,
    mut prompt: Prompt,
    target: usize,
    mask: &[bool],
    pool: &Tensor,
    cfg: &DreamConfig,
    stopper: Stopper<'_>,
    record_candidates: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Prompt, DreamTrajectory)> {
    if pool.nrows() == 0 {
        return Err(Error::Empty("conditioning pool"));
    }
    if !mask.get(target).copied().unwrap_or(false) {
        return Err(Error::TargetOutsideMask { target });
    }
    if cfg.probe_size == 0 {
        return Err(Error::invalid("probe_size must be positive"));
    }
    let probe_idx: Vec<usize> = (0..cfg.probe_size).map(|_| rng.random_range(0..pool.nrows())).collect();
    let probe = Probe {
        net,
        generator,
        conditions: pool.select(ndarray::Axis(0), &probe_idx),
        noise: generator.sample_noise(cfg.probe_size, rng),
        target,
        mask,
        candidates: record_candidates,
    };
    let text = prompt.text_row();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let (first, mut samples) = probe.record(0, &prompt, None)?;
    let mut records = vec![first];
    let mut predictions = Vec::new();
    let mut oracle_probs = Vec::new();
    let mut reason = StopReason::Cap;
    for it in 1..=cfg.max_iterations {
        let i = rng.random_range(0..pool.nrows());
        let x = pool.select(ndarray::Axis(0), &[i]);
        let noise = generator.sample_noise(1, rng);
        let mut soft = prompt.soft_row();
        let (loss, grad, logits) = prompt_loss(net, generator, &x, &soft, &text, &noise, target, mask)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("prompt loss".into()));
        }
        let pred = argmax_masked(logits.row(0).iter().copied(), mask).expect("target is in the mask");
        predictions.push(pred);
        opt.step(&mut [&mut soft], &[grad])?;
        prompt.soft = soft.into_raw_vec_and_offset().0;
        let (mut rec, s) = probe.record(it, &prompt, Some(pred))?;
        samples = s;
        let feats: Vec<FeatureVector> = records.iter().map(|r| r.features).chain([rec.features]).collect();
        if let Stopper::Oracle { oracle, .. } = stopper {
            if let Some(w) = TrajectoryWindow::ending_at(&feats, feats.len() - 1) {
                let p = oracle.predict(&w.flatten())?;
                rec.oracle_prob = Some(p);
                oracle_probs.push(p);
            }
        }
        records.push(rec);
        let stop = match stopper {
            Stopper::Oracle { rule, threshold, .. } => {
                should_stop(&oracle_probs, rule, threshold).then_some(StopReason::Oracle)
            }
            Stopper::Fixed => fixed_stop(&predictions, target).then_some(StopReason::Fixed),
            Stopper::Never => None,
        };
        if let Some(r) = stop {
            reason = r;
            break;
        }
    }
    let trajectory = DreamTrajectory {
        target_head: target,
        records,
        reason,
        stop_samples: samples,
        probe_conditions: probe.conditions,
    };
    Ok((prompt, trajectory))
}

/// `count` samples conditioned on buffer images with fresh noise.
pub fn generate_dream_class(
    generator: &FrozenGenerator,
    prompt: &Prompt,
    buffer: &ReplayBuffer,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let cond = buffer.sample_conditions(count, rng)?;
    let noise = generator.sample_noise(count, rng);
    generator.generate(&cond.0, prompt, &noise)
}

/// Record of one dream-to-head mapping, kept for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingCall {
    pub available: Vec<usize>,
    /// Mean `-log softmax` of each available head over the dream dataset.
    pub losses: Vec<f64>,
    pub chosen: usize,
}

impl MappingCall {
    /// Compares the choice with every available head.
    pub fn check(&self) -> Result<()> {
        let k = self
            .available
            .iter()
            .position(|&h| h == self.chosen)
            .ok_or_else(|| Error::invalid("mapped head is not available"))?;
        let best = self.losses[k];
        let ok = self
            .losses
            .iter()
            .enumerate()
            .all(|(i, &l)| l > best || (l == best && self.available[i] >= self.chosen));
        if !ok {
            return Err(Error::invalid(format!(
                "mapping to head {} is not the exhaustive minimum",
                self.chosen
            )));
        }
        Ok(())
    }
}

/// Picks the non-real head (outside `excluded`) with the lowest mean
/// negative log-likelihood on `samples`, lowest index on ties.
pub fn map_dream_class(net: &Mlp, samples: &Tensor, table: &HeadTable, excluded: &[usize]) -> Result<MappingCall> {
    let available: Vec<usize> = table
        .available_heads()
        .into_iter()
        .filter(|h| !excluded.contains(h))
        .collect();
    if available.is_empty() {
        return Err(Error::NoAvailableHead("no non-real head left for a dream".into()));
    }
    if samples.nrows() == 0 {
        return Err(Error::Empty("dream dataset"));
    }
    let (logits, _) = net.forward(samples)?;
    let probs = masked_softmax(&logits, None);
    let losses: Vec<f64> = available
        .iter()
        .map(|&h| {
            let col = probs.column(h);
            col.iter().map(|&p| -p.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / col.len() as f64
        })
        .collect();
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(MappingCall {
        chosen: available[best],
        available,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DreamClass {
    pub id: usize,
    pub prompt: Prompt,
    pub source_class: usize,
    pub created_task: usize,
    pub stop_iteration: usize,
    pub stop_features: FeatureVector,
    pub stop_target_prob: f64,
    pub stop_samples: Tensor,
    /// Mean probability of the dream's head on its dataset when mapped.
    pub creation_likelihood: f64,
}

/// A freshly optimized dream awaiting a head.
#[derive(Clone, Debug)]
pub struct NewDream {
    pub prompt: Prompt,
    pub source_class: usize,
    pub created_task: usize,
    pub trajectory: DreamTrajectory,
    pub dataset: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DreamInventory {
    dreams: BTreeMap<usize, DreamClass>,
    next_id: usize,
}

impl DreamInventory {
    pub fn len(&self) -> usize {
        self.dreams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dreams.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&DreamClass> {
        self.dreams.get(&id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.dreams.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DreamClass> {
        self.dreams.values()
    }

    pub fn remove(&mut self, id: usize) -> Option<DreamClass> {
        self.dreams.remove(&id)
    }

    fn allocate(&mut self) -> usize {
        self.next_id += 1;
        self.next_id - 1
    }

    /// Checks that exactly the active dreams occupy heads.
    pub fn validate(&self, table: &HeadTable) -> Result<()> {
        if self.ids() != table.dream_ids() {
            return Err(Error::invalid("dream inventory and head table disagree"));
        }
        Ok(())
    }
}

/// What one inventory update did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InventoryUpdate {
    /// `(dream id, head)` for each new dream.
    pub placed: Vec<(usize, usize)>,
    pub evicted: Vec<usize>,
    pub mappings: Vec<MappingCall>,
    pub appended_heads: usize,
}

/// Gives every new dream a head according to `strategy`.
pub fn update_inventory(
    strategy: DreamStrategy,
    new: Vec<NewDream>,
    inventory: &mut DreamInventory,
    table: &mut HeadTable,
    net: &mut Mlp,
    rng: &mut ChaCha8Rng,
) -> Result<InventoryUpdate> {
    let mut report = InventoryUpdate::default();
    if new.is_empty() {
        return Ok(report);
    }
    let heads: Vec<usize> = match strategy {
        DreamStrategy::None => return Err(Error::invalid("dream strategy `none` creates no dreams")),
        DreamStrategy::D2lReplace | DreamStrategy::AtBeginning => Vec::new(),
        DreamStrategy::Incremental => {
            net.append_outputs(new.len(), rng)?;
            let r = table.append_free(new.len());
            report.appended_heads = new.len();
            r.collect()
        }
    };
    let mut taken = Vec::new();
    for (k, dream) in new.into_iter().enumerate() {
        let head = if strategy == DreamStrategy::Incremental {
            heads[k]
        } else {
            let call = map_dream_class(net, &dream.dataset, table, &taken)?;
            let h = call.chosen;
            report.mappings.push(call);
            h
        };
        let id = inventory.allocate();
        if let Some(old) = table.assign_dream(id, head)? {
            inventory.remove(old);
            report.evicted.push(old);
        }
        taken.push(head);
        let probs = masked_softmax(&net.forward(&dream.dataset)?.0, None);
        let last = dream.trajectory.last();
        inventory.dreams.insert(
            id,
            DreamClass {
                id,
                prompt: dream.prompt,
                source_class: dream.source_class,
                created_task: dream.created_task,
                stop_iteration: last.iteration,
                stop_features: last.features,
                stop_target_prob: last.target_prob,
                stop_samples: dream.trajectory.stop_samples,
                creation_likelihood: probs.column(head).mean().unwrap_or(0.0),
            },
        );
        report.placed.push((id, head));
    }
    inventory.validate(table)?;
    table.validate()?;
    Ok(report)
}

/// Drops dreams whose heads were taken by real classes.
pub fn remove_dreams(inventory: &mut DreamInventory, ids: &[usize]) {
    for id in ids {
        inventory.remove(*id);
    }
}

/// Regenerates a dataset for every active dream from its retained prompt.
pub fn regenerate_pool(
    generator: &FrozenGenerator,
    inventory: &DreamInventory,
    table: &HeadTable,
    buffer: &ReplayBuffer,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<crate::cl::DreamPool> {
    let mut classes = Vec::with_capacity(inventory.len());
    for d in inventory.iter() {
        let head = table
            .head_of_dream(d.id)
            .ok_or_else(|| Error::invalid(format!("dream {} has no head", d.id)))?;
        classes.push((head, generate_dream_class(generator, &d.prompt, buffer, count, rng)?));
    }
    Ok(crate::cl::DreamPool { classes })
}

/// Draw-time generation: each sample is produced from a freshly drawn
/// condition. Conditions come from a snapshot of the buffer taken when the
/// sampler is built.
pub struct OnlineDreams<'a> {
    generator: &'a FrozenGenerator,
    prompts: Vec<(usize, Prompt)>,
    buffer: ReplayBuffer,
}

impl<'a> OnlineDreams<'a> {
    pub fn new(
        generator: &'a FrozenGenerator,
        inventory: &DreamInventory,
        table: &HeadTable,
        buffer: &ReplayBuffer,
    ) -> Self {
        let prompts = inventory
            .iter()
            .filter_map(|d| table.head_of_dream(d.id).map(|h| (h, d.prompt.clone())))
            .collect();
        Self {
            generator,
            prompts,
            buffer: buffer.clone(),
        }
    }
}

impl DreamSampler for OnlineDreams<'_> {
    fn is_empty(&self) -> bool {
        self.prompts.is_empty() || self.buffer.is_empty()
    }

    fn draw(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Result<SampleBatch> {
        if self.prompts.is_empty() {
            return Err(Error::Empty("dream inventory"));
        }
        let mut images = Tensor::zeros((count, self.generator.dims().pixels));
        let mut labels = Vec::with_capacity(count);
        for r in 0..count {
            let (head, prompt) = &self.prompts[rng.random_range(0..self.prompts.len())];
            let img = generate_dream_class(self.generator, prompt, &self.buffer, 1, rng)?;
            images.row_mut(r).assign(&img.row(0));
            labels.push(*head);
        }
        Ok(SampleBatch { images, labels })
    }
}

/// Writes a plain (P2) 8-bit PGM.
pub fn write_pgm<W: Write>(pixels: &[f64], grid: usize, mut out: W) -> Result<()> {
    writeln!(out, "P2\n{grid} {grid}\n255")?;
    for row in pixels.chunks(grid) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// One directory per dream with its samples as PGM, `prompt.csv`, and a
/// one-row `manifest.csv`.
pub fn dump_dream(dir: &Path, dream: &DreamClass, head: usize, samples: &Tensor, grid: usize) -> Result<()> {
    let d = dir.join(format!("dream_{:03}", dream.id));
    std::fs::create_dir_all(&d)?;
    for (i, row) in samples.rows().into_iter().enumerate() {
        let f = std::fs::File::create(d.join(format!("sample_{i:03}.pgm")))?;
        write_pgm(&row.to_vec(), grid, std::io::BufWriter::new(f))?;
    }
    let mut w = csv::Writer::from_path(d.join("prompt.csv")).map_err(csv_err)?;
    w.write_record(dream.prompt.soft.iter().map(|v| v.to_string()))
        .map_err(csv_err)?;
    w.flush()?;
    let mut w = csv::Writer::from_path(d.join("manifest.csv")).map_err(csv_err)?;
    w.write_record([
        "dream_id",
        "source_class",
        "created_task",
        "head",
        "stop_iteration",
        "ssim",
        "feature_dot",
        "quality",
        "feature_std",
    ])
    .map_err(csv_err)?;
    let z = dream.stop_features;
    w.write_record([
        dream.id.to_string(),
        dream.source_class.to_string(),
        dream.created_task.to_string(),
        head.to_string(),
        dream.stop_iteration.to_string(),
        z.ssim.to_string(),
        z.feature_dot.to_string(),
        z.quality.to_string(),
        z.feature_std.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
