//! Continual training: the task-1 bootstrap, the combined stream and
//! rehearsal objective, ER / ER-ACE / fine-tune, and real-class head
//! assignment.

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{masked_softmax, Graph, Tensor};
use crate::heads::HeadTable;
use crate::nn::Mlp;
use crate::optim::Optimizer;
use crate::replay::{Offer, ReplayBuffer};
use crate::synth::{SampleBatch, Split, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Finetune,
    Er,
    ErAce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::ErAce => "er-ace",
        }
    }

    pub fn rehearses(self) -> bool {
        self != Method::Finetune
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DreamStrategy {
    D2lReplace,
    AtBeginning,
    Incremental,
    None,
}

/// When stream samples are offered to the buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertCadence {
    PerEpoch,
    FirstEpochOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentRule {
    Greedy,
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub dreams: bool,
    pub strategy: DreamStrategy,
    pub cadence: InsertCadence,
    pub assignment: AssignmentRule,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Er,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.03,
            buffer_capacity: 200,
            dreams: false,
            strategy: DreamStrategy::None,
            cadence: InsertCadence::PerEpoch,
            assignment: AssignmentRule::Greedy,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dreams == (self.strategy == DreamStrategy::None) {
            return Err(Error::Config(
                "dream strategy must be `none` exactly when dreams are disabled".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.method.rehearses() && self.buffer_capacity == 0 {
            return Err(Error::Config(format!(
                "{} needs a positive buffer capacity",
                self.method.name()
            )));
        }
        Ok(())
    }
}

/// Source of labelled dream samples during training. Labels are head indices.
pub trait DreamSampler {
    fn is_empty(&self) -> bool;
    fn draw(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Result<SampleBatch>;
}

/// Pre-generated dream datasets, one per head, drawn class-balanced.
#[derive(Clone, Debug, Default)]
pub struct DreamPool {
    pub classes: Vec<(usize, Tensor)>,
}

impl DreamSampler for DreamPool {
    fn is_empty(&self) -> bool {
        self.classes.iter().all(|(_, s)| s.nrows() == 0)
    }

    fn draw(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Result<SampleBatch> {
        use rand::Rng;
        let pool: Vec<&(usize, Tensor)> = self.classes.iter().filter(|(_, s)| s.nrows() > 0).collect();
        if pool.is_empty() {
            return Err(Error::Empty("dream inventory"));
        }
        let width = pool[0].1.ncols();
        let mut images = Tensor::zeros((count, width));
        let mut labels = Vec::with_capacity(count);
        for r in 0..count {
            let (head, samples) = pool[rng.random_range(0..pool.len())];
            let i = rng.random_range(0..samples.nrows());
            images.row_mut(r).assign(&samples.row(i));
            labels.push(*head);
        }
        Ok(SampleBatch { images, labels })
    }
}

/// Heads the stream cross-entropy may use.
pub fn stream_mask(method: Method, table: &HeadTable, current_heads: &[usize], stream_heads: &[usize]) -> Vec<bool> {
    match method {
        Method::Finetune | Method::Er => table.active_mask(),
        Method::ErAce => {
            let mut mask = table.mask(|r| matches!(r, crate::heads::HeadRole::Dream(_)));
            for &h in current_heads.iter().chain(stream_heads) {
                mask[h] = true;
            }
            mask
        }
    }
}

/// Heads the rehearsal cross-entropy may use: every seen real class.
pub fn buffer_mask(table: &HeadTable) -> Vec<bool> {
    table.real_mask()
}

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub ce: f64,
    pub cl: f64,
    pub total: f64,
}

/// The combined loss evaluated on fixed logits: stream CE plus, when a
/// rehearsal batch is given, the buffer CE. Returns `(ce, cl)`.
pub fn combined_loss(
    method: Method,
    table: &HeadTable,
    current_heads: &[usize],
    stream: (&Tensor, &[usize]),
    rehearsal: Option<(&Tensor, &[usize])>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let mask = stream_mask(method, table, current_heads, stream.1);
    let logits = g.constant(stream.0.clone());
    let ce = g.cross_entropy(logits, stream.1, Some(&mask))?;
    let ce = g.scalar(ce);
    let cl = match rehearsal {
        Some((l, y)) if method.rehearses() => {
            let logits = g.constant(l.clone());
            let v = g.cross_entropy(logits, y, Some(&buffer_mask(table)))?;
            g.scalar(v)
        }
        _ => 0.0,
    };
    Ok((ce, cl))
}

/// One gradient step on `CE(stream) + CE(rehearsal)`. Returns the losses and
/// the number of the first `real_rows` stream rows predicted correctly
/// (argmax over the stream mask, before the update).
pub fn train_step(
    net: &mut Mlp,
    opt: &mut Optimizer,
    stream: &SampleBatch,
    stream_mask: &[bool],
    rehearsal: Option<(&SampleBatch, &[bool])>,
    real_rows: usize,
) -> Result<(StepLoss, usize)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let x = g.constant(stream.images.clone());
    let (logits, _) = bound.forward(&mut g, x)?;
    let ce = g.cross_entropy(logits, &stream.labels, Some(stream_mask))?;
    let correct = count_correct(g.value(logits), &stream.labels[..real_rows], stream_mask);
    let (total, cl) = match rehearsal {
        Some((batch, mask)) => {
            let xb = g.constant(batch.images.clone());
            let (lb, _) = bound.forward(&mut g, xb)?;
            let cl = g.cross_entropy(lb, &batch.labels, Some(mask))?;
            (g.add(ce, cl)?, Some(cl))
        }
        None => (ce, None),
    };
    let losses = StepLoss {
        ce: g.scalar(ce),
        cl: cl.map_or(0.0, |v| g.scalar(v)),
        total: g.scalar(total),
    };
    let grads = g.backward(total)?;
    let grads = bound.grads(&grads);
    opt.step(&mut net.params_mut(), &grads)?;
    Ok((losses, correct))
}

fn count_correct(logits: &Tensor, targets: &[usize], mask: &[bool]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax_masked(logits.row(i).iter().copied(), mask) == Some(t))
        .count()
}

/// Index of the largest permitted value; ties go to the lower index.
pub fn argmax_masked(values: impl Iterator<Item = f64>, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in values.enumerate() {
        if mask[j] && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_cl: f64,
    pub train_acc: f64,
}

/// Classifier, head table, buffer and logs of one continual run.
#[derive(Clone, Debug)]
pub struct Learner {
    pub net: Mlp,
    pub table: HeadTable,
    pub buffer: ReplayBuffer,
    pub cfg: MethodConfig,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLoss>,
    opt: Optimizer,
}

impl Learner {
    pub fn new(net: Mlp, cfg: MethodConfig) -> Self {
        let table = HeadTable::new(net.output_dim());
        let buffer = ReplayBuffer::new(cfg.buffer_capacity, net.input_dim());
        let opt = Optimizer::sgd(cfg.learning_rate);
        Self {
            net,
            table,
            buffer,
            cfg,
            epochs: Vec::new(),
            steps: Vec::new(),
            opt,
        }
    }

    fn heads_of(&self, classes: &[usize]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|&c| {
                self.table
                    .head_of_real(c)
                    .ok_or_else(|| Error::invalid(format!("class {c} has no head")))
            })
            .collect()
    }

    fn stream_batch(&self, train: &Split, idx: &[usize]) -> Result<SampleBatch> {
        let part = train.select(idx);
        Ok(SampleBatch {
            labels: self.heads_of(&part.labels)?,
            images: part.images,
        })
    }

    fn offer(&mut self, train: &Split, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<()> {
        for &i in idx {
            let row = train.images.row(i);
            let image = row.as_slice().expect("standard layout");
            self.buffer.reservoir_insert(Offer::real(image, train.labels[i]), rng)?;
        }
        Ok(())
    }

    fn inserts_in(&self, epoch: usize) -> bool {
        self.cfg.cadence == InsertCadence::PerEpoch || epoch == 0
    }

    /// Puts `classes` on the lowest free heads.
    pub fn assign_free(&mut self, classes: &[usize]) -> Result<()> {
        for &c in classes {
            let head = *self
                .table
                .free_heads()
                .first()
                .ok_or_else(|| Error::NoAvailableHead(format!("no free head for class {c}")))?;
            self.table.assign_real(c, head)?;
        }
        Ok(())
    }

    /// Cross-entropy training on the first task's real classes only.
    pub fn bootstrap_task1(&mut self, task: &Task, task_index: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let heads = self.heads_of(&task.classes)?;
        let mut mask = vec![false; self.table.width()];
        for &h in &heads {
            mask[h] = true;
        }
        let n = task.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(rng);
            let mut acc = EpochAccumulator::default();
            for idx in order.chunks(self.cfg.batch_size) {
                let batch = self.stream_batch(&task.train, idx)?;
                let (loss, correct) = train_step(&mut self.net, &mut self.opt, &batch, &mask, None, idx.len())?;
                acc.push(loss, correct, idx.len());
                self.steps.push(loss);
                if self.inserts_in(epoch) {
                    self.offer(&task.train, idx, rng)?;
                }
            }
            self.epochs.push(acc.finish(task_index, epoch));
        }
        Ok(())
    }

    /// Training on the equal mixture of first-task data and dreams. The
    /// buffer is neither read nor written.
    pub fn finetune_mixture(
        &mut self,
        task: &Task,
        task_index: usize,
        dreams: &mut dyn DreamSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if dreams.is_empty() {
            return Err(Error::Empty("dream inventory"));
        }
        let mask = self.table.active_mask();
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let offset = self.epochs_for(task_index);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(rng);
            let mut acc = EpochAccumulator::default();
            for idx in order.chunks(self.cfg.batch_size) {
                let real = self.stream_batch(&task.train, idx)?;
                let dream = dreams.draw(idx.len(), rng)?;
                let stream = stack(&real, &dream)?;
                let (loss, correct) = train_step(&mut self.net, &mut self.opt, &stream, &mask, None, idx.len())?;
                acc.push(loss, correct, idx.len());
                self.steps.push(loss);
            }
            self.epochs.push(acc.finish(task_index, offset + epoch));
        }
        Ok(())
    }

    fn epochs_for(&self, task_index: usize) -> usize {
        self.epochs.iter().filter(|e| e.task == task_index).count()
    }

    /// Stream and rehearsal training on a later task. Per step the RNG is
    /// consumed in a fixed order: dream batch, rehearsal batch, reservoir
    /// offers.
    pub fn train_task(
        &mut self,
        task: &Task,
        task_index: usize,
        mut dreams: Option<&mut dyn DreamSampler>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if let Some(d) = dreams.as_deref() {
            if d.is_empty() {
                return Err(Error::Empty("dream inventory"));
            }
        }
        let current = self.heads_of(&task.classes)?;
        let bmask = buffer_mask(&self.table);
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let offset = self.epochs_for(task_index);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(rng);
            let mut acc = EpochAccumulator::default();
            for idx in order.chunks(self.cfg.batch_size) {
                let real = self.stream_batch(&task.train, idx)?;
                let stream = match dreams.as_deref_mut() {
                    Some(d) => stack(&real, &d.draw(idx.len(), rng)?)?,
                    None => real,
                };
                let smask = stream_mask(self.cfg.method, &self.table, &current, &stream.labels);
                let rehearsal = if self.cfg.method.rehearses() && !self.buffer.is_empty() {
                    let mut b = self.buffer.sample_rehearsal(self.cfg.batch_size, rng)?;
                    b.labels = self.heads_of(&b.labels)?;
                    Some(b)
                } else {
                    None
                };
                let (loss, correct) = train_step(
                    &mut self.net,
                    &mut self.opt,
                    &stream,
                    &smask,
                    rehearsal.as_ref().map(|b| (b, bmask.as_slice())),
                    idx.len(),
                )?;
                acc.push(loss, correct, idx.len());
                self.steps.push(loss);
                if self.inserts_in(epoch) {
                    self.offer(&task.train, idx, rng)?;
                }
            }
            self.epochs.push(acc.finish(task_index, offset + epoch));
        }
        Ok(())
    }

    /// Appends one CSV row per logged epoch.
    pub fn write_epoch_log<W: std::io::Write>(&self, run_id: &str, out: &mut csv::Writer<W>) -> Result<()> {
        write_epoch_rows(&self.epochs, run_id, out)
    }
}

/// Rows in [`EPOCH_LOG_HEADER`] order; the header itself is not written.
pub fn write_epoch_rows<W: std::io::Write>(epochs: &[EpochLog], run_id: &str, out: &mut csv::Writer<W>) -> Result<()> {
    for e in epochs {
        out.write_record([
            run_id.to_string(),
            e.task.to_string(),
            e.epoch.to_string(),
            e.loss_ce.to_string(),
            e.loss_cl.to_string(),
            e.train_acc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub const EPOCH_LOG_HEADER: [&str; 6] = ["run_id", "task", "epoch", "loss_ce", "loss_cl", "train_acc"];

fn stack(a: &SampleBatch, b: &SampleBatch) -> Result<SampleBatch> {
    Ok(SampleBatch {
        images: concatenate(Axis(0), &[a.images.view(), b.images.view()]).map_err(|e| Error::shape(e.to_string()))?,
        labels: a.labels.iter().chain(&b.labels).copied().collect(),
    })
}

#[derive(Default)]
struct EpochAccumulator {
    ce: f64,
    cl: f64,
    steps: usize,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn push(&mut self, loss: StepLoss, correct: usize, seen: usize) {
        self.ce += loss.ce;
        self.cl += loss.cl;
        self.steps += 1;
        self.correct += correct;
        self.seen += seen;
    }

    fn finish(self, task: usize, epoch: usize) -> EpochLog {
        let steps = self.steps.max(1) as f64;
        EpochLog {
            task,
            epoch,
            loss_ce: self.ce / steps,
            loss_cl: self.cl / steps,
            train_acc: self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

/// Mean softmax probability of every head over `images`.
pub fn mean_likelihoods(net: &Mlp, images: &Tensor) -> Result<Vec<f64>> {
    if images.nrows() == 0 {
        return Err(Error::Empty("probe batch"));
    }
    let (logits, _) = net.forward(images)?;
    let probs = masked_softmax(&logits, None);
    Ok(probs.mean_axis(Axis(0)).expect("non-empty").to_vec())
}

/// Record of one real-class assignment, kept for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentCall {
    pub classes: Vec<usize>,
    pub dream_heads: Vec<usize>,
    /// `likelihood[i][j]`: mean probability of `dream_heads[j]` on class `classes[i]`.
    pub likelihood: Vec<Vec<f64>>,
    pub rule: AssignmentRule,
    /// `(class, head)` in assignment order.
    pub assigned: Vec<(usize, usize)>,
    pub evicted: Vec<usize>,
}

/// Repeatedly takes the largest remaining (class, head) likelihood. Ties go
/// to the lower head, then the lower class. Returns a column per row.
pub fn greedy_assignment(likelihood: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = likelihood.len();
    let cols = likelihood.first().map_or(0, Vec::len);
    let mut out = vec![None; rows];
    let mut used = vec![false; cols];
    for _ in 0..rows.min(cols) {
        let mut best: Option<(usize, usize, f64)> = None;
        for j in 0..cols {
            if used[j] {
                continue;
            }
            for (i, row) in likelihood.iter().enumerate() {
                if out[i].is_none() && best.is_none_or(|(_, _, b)| row[j] > b) {
                    best = Some((i, j, row[j]));
                }
            }
        }
        let (i, j, _) = best.expect("a free pair remains");
        out[i] = Some(j);
        used[j] = true;
    }
    out
}

/// Maximum-total-likelihood assignment of `min(rows, cols)` pairs by dynamic
/// programming over row subsets.
pub fn optimal_assignment(likelihood: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let rows = likelihood.len();
    let cols = likelihood.first().map_or(0, Vec::len);
    if rows > 16 {
        return Err(Error::invalid(
            "optimal assignment supports at most 16 classes per task",
        ));
    }
    let target = rows.min(cols);
    let states = 1usize << rows;
    // best[k][mask]: best sum using the first k columns with rows `mask` taken
    let mut best = vec![vec![f64::NEG_INFINITY; states]; cols + 1];
    let mut choice = vec![vec![usize::MAX; states]; cols + 1];
    best[0][0] = 0.0;
    for k in 0..cols {
        for mask in 0..states {
            let base = best[k][mask];
            if base == f64::NEG_INFINITY {
                continue;
            }
            if base > best[k + 1][mask] {
                best[k + 1][mask] = base;
                choice[k + 1][mask] = usize::MAX;
            }
            for i in 0..rows {
                if mask & (1 << i) == 0 {
                    let next = mask | (1 << i);
                    let v = base + likelihood[i][k];
                    if v > best[k + 1][next] {
                        best[k + 1][next] = v;
                        choice[k + 1][next] = i;
                    }
                }
            }
        }
    }
    let mut mask = (0..states)
        .filter(|m| m.count_ones() as usize == target)
        .fold(None, |acc: Option<usize>, m| match acc {
            Some(a) if best[cols][a] >= best[cols][m] => Some(a),
            _ => Some(m),
        })
        .expect("some subset has the target size");
    let mut out = vec![None; rows];
    for k in (1..=cols).rev() {
        let i = choice[k][mask];
        if i != usize::MAX {
            out[i] = Some(k - 1);
            mask &= !(1 << i);
        }
    }
    Ok(out)
}

/// Every way of pairing `min(rows, cols)` rows with distinct columns.
pub fn enumerate_assignments(rows: usize, cols: usize) -> Vec<Vec<Option<usize>>> {
    fn go(
        i: usize,
        rows: usize,
        cols: usize,
        left: usize,
        used: &mut [bool],
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == rows {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        if rows - i > left {
            cur.push(None);
            go(i + 1, rows, cols, left, used, cur, out);
            cur.pop();
        }
        if left > 0 {
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    cur.push(Some(j));
                    go(i + 1, rows, cols, left - 1, used, cur, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
    }
    let mut out = Vec::new();
    go(
        0,
        rows,
        cols,
        rows.min(cols),
        &mut vec![false; cols],
        &mut Vec::new(),
        &mut out,
    );
    out
}

fn sorted_desc(likelihood: &[Vec<f64>], picks: &[Option<usize>]) -> Vec<f64> {
    let mut v: Vec<f64> = picks
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|j| likelihood[i][j]))
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Compares `picks` with exhaustive enumeration. Greedy picks must reach the
/// lexicographically largest descending-sorted likelihood vector, optimal
/// picks the largest sum.
pub fn check_assignment(likelihood: &[Vec<f64>], picks: &[Option<usize>], rule: AssignmentRule) -> Result<()> {
    let rows = likelihood.len();
    let cols = likelihood.first().map_or(0, Vec::len);
    let all = enumerate_assignments(rows, cols);
    let ok = match rule {
        AssignmentRule::Greedy => {
            let best = all
                .iter()
                .map(|a| sorted_desc(likelihood, a))
                .max_by(|a, b| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or_default();
            sorted_desc(likelihood, picks) == best
        }
        AssignmentRule::Optimal => {
            let sum = |a: &[Option<usize>]| sorted_desc(likelihood, a).iter().sum::<f64>();
            let best = all.iter().map(|a| sum(a)).fold(f64::NEG_INFINITY, f64::max);
            all.is_empty() || (sum(picks) - best).abs() <= 1e-12 * best.abs().max(1.0)
        }
    };
    let count = picks.iter().filter(|p| p.is_some()).count();
    if !ok || count != rows.min(cols) {
        return Err(Error::invalid(format!(
            "assignment {picks:?} disagrees with exhaustive search"
        )));
    }
    Ok(())
}

impl AssignmentCall {
    /// Column picks per class, recovered from `assigned`.
    pub fn picks(&self) -> Vec<Option<usize>> {
        self.classes
            .iter()
            .map(|c| {
                self.assigned
                    .iter()
                    .find(|(k, _)| k == c)
                    .and_then(|(_, h)| self.dream_heads.iter().position(|d| d == h))
            })
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        check_assignment(&self.likelihood, &self.picks(), self.rule)
    }
}

/// Places the classes of `task` on dream heads by likelihood, falling back
/// to the lowest free heads. Dreams on reused heads are evicted.
pub fn assign_real_classes(
    net: &Mlp,
    task: &Task,
    table: &mut HeadTable,
    rule: AssignmentRule,
) -> Result<AssignmentCall> {
    let dream_heads = table.dream_heads();
    let mut likelihood = Vec::with_capacity(task.classes.len());
    for &c in &task.classes {
        let probe = task.train.filter(|l| l == c);
        let probs = mean_likelihoods(net, &probe.images)?;
        likelihood.push(dream_heads.iter().map(|&h| probs[h]).collect::<Vec<f64>>());
    }
    let picks = match rule {
        AssignmentRule::Greedy => greedy_assignment(&likelihood),
        AssignmentRule::Optimal => optimal_assignment(&likelihood)?,
    };
    let leftovers = picks.iter().filter(|p| p.is_none()).count();
    let free = table.free_heads();
    if leftovers > free.len() {
        return Err(Error::NoAvailableHead(format!(
            "{leftovers} classes left for {} free heads",
            free.len()
        )));
    }
    let mut order: Vec<(usize, usize)> = picks
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|j| (i, j)))
        .collect();
    order.sort_by(|a, b| {
        likelihood[b.0][b.1]
            .total_cmp(&likelihood[a.0][a.1])
            .then(a.1.cmp(&b.1))
    });
    let mut assigned = Vec::new();
    let mut evicted = Vec::new();
    for (i, j) in order {
        let (class, head) = (task.classes[i], dream_heads[j]);
        evicted.extend(table.assign_real(class, head)?);
        assigned.push((class, head));
    }
    let mut free = free.into_iter();
    for (i, p) in picks.iter().enumerate() {
        if p.is_none() {
            let head = free.next().expect("checked above");
            table.assign_real(task.classes[i], head)?;
            assigned.push((task.classes[i], head));
        }
    }
    table.validate()?;
    Ok(AssignmentCall {
        classes: task.classes.clone(),
        dream_heads,
        likelihood,
        rule,
        assigned,
        evicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn greedy_resolves_conflicts_by_likelihood() {
        // both classes prefer column 0; class 1 is more confident
        let l = vec![vec![0.6, 0.3], vec![0.9, 0.1]];
        assert_eq!(greedy_assignment(&l), vec![Some(1), Some(0)]);
        let l = vec![vec![0.9, 0.8], vec![0.85, 0.1]];
        assert_eq!(greedy_assignment(&l), vec![Some(0), Some(1)]);
        assert_eq!(optimal_assignment(&l).unwrap(), vec![Some(1), Some(0)]);
    }

    #[test]
    fn more_classes_than_heads_leaves_gaps() {
        let l = vec![vec![0.2], vec![0.5], vec![0.1]];
        assert_eq!(greedy_assignment(&l), vec![None, Some(0), None]);
        assert_eq!(optimal_assignment(&l).unwrap(), vec![None, Some(0), None]);
        let empty: Vec<Vec<f64>> = vec![vec![], vec![]];
        assert_eq!(greedy_assignment(&empty), vec![None, None]);
    }

    #[test]
    fn er_and_er_ace_agree_on_a_single_task() {
        let mut table = HeadTable::new(2);
        table.assign_real(0, 0).unwrap();
        table.assign_real(1, 1).unwrap();
        let logits = array![[1.0, -0.5], [0.2, 0.3]];
        let y = [0usize, 1];
        let er = combined_loss(Method::Er, &table, &[0, 1], (&logits, &y), Some((&logits, &y))).unwrap();
        let ace = combined_loss(Method::ErAce, &table, &[0, 1], (&logits, &y), Some((&logits, &y))).unwrap();
        assert_eq!(er, ace);
        let expected = ((1.0f64.exp() + (-0.5f64).exp()).ln() - 1.0 + (0.2f64.exp() + 0.3f64.exp()).ln() - 0.3) / 2.0;
        assert!((er.0 - expected).abs() < 1e-12);
        assert!((er.1 - expected).abs() < 1e-12);
    }

    #[test]
    fn er_ace_ignores_absent_old_heads() {
        let mut table = HeadTable::new(3);
        table.assign_real(0, 0).unwrap();
        table.assign_real(1, 1).unwrap();
        table.assign_real(2, 2).unwrap();
        let y = [1usize];
        let a = array![[0.3, 0.5, -0.1]];
        let b = array![[9.0, 0.5, -0.1]];
        let la = combined_loss(Method::ErAce, &table, &[1, 2], (&a, &y), None).unwrap();
        let lb = combined_loss(Method::ErAce, &table, &[1, 2], (&b, &y), None).unwrap();
        assert_eq!(la, lb);
        let er = combined_loss(Method::Er, &table, &[1, 2], (&b, &y), None).unwrap();
        assert!(er.0 > lb.0);
    }

    #[test]
    fn config_validation() {
        assert!(MethodConfig::default().validate().is_ok());
        let cfg = MethodConfig {
            dreams: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MethodConfig {
            strategy: DreamStrategy::Incremental,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MethodConfig {
            method: Method::ErAce,
            buffer_capacity: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn masked_argmax_breaks_ties_low() {
        assert_eq!(argmax_masked([1.0, 3.0, 3.0].into_iter(), &[true, true, true]), Some(1));
        assert_eq!(
            argmax_masked([1.0, 3.0, 3.0].into_iter(), &[true, false, true]),
            Some(2)
        );
        assert_eq!(argmax_masked([1.0].into_iter(), &[false]), None);
    }
}
