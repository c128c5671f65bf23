//! Procedural class-incremental image benchmark.
//!
//! Each class is a cell in a discrete lattice of pattern parameters: five
//! pattern families, each with a few parameter axes and a handful of levels
//! per axis. Samples are the cell's pattern rendered with every parameter
//! jittered by up to ±5% of its axis range, plus Gaussian pixel noise,
//! clamped to `[0, 1]`. Adjacent levels on every axis are further apart than
//! the total jitter span, so two distinct cells never render the same image.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tensor;

pub const DEFAULT_GRID: usize = 12;
pub const PIXEL_NOISE: f64 = 0.05;
pub const JITTER_FRACTION: f64 = 0.05;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Blob,
    Stripe,
    Ring,
    Checker,
    Cross,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Blob,
        Family::Stripe,
        Family::Ring,
        Family::Checker,
        Family::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Blob => "blob",
            Family::Stripe => "stripe",
            Family::Ring => "ring",
            Family::Checker => "checker",
            Family::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Parameter axes, in rendering order.
    pub fn axes(self) -> &'static [Axis] {
        match self {
            Family::Blob => &BLOB,
            Family::Stripe => &STRIPE,
            Family::Ring => &RING,
            Family::Checker => &CHECKER,
            Family::Cross => &CROSS,
        }
    }

    pub fn cell_count(self) -> usize {
        self.axes().iter().map(|a| a.levels.len()).product()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub struct Axis {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub levels: &'static [f64],
}

impl Axis {
    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }
}

const POS3: &[f64] = &[0.25, 0.5, 0.75];

static BLOB: [Axis; 3] = [
    Axis {
        name: "cx",
        lo: 0.2,
        hi: 0.8,
        levels: POS3,
    },
    Axis {
        name: "cy",
        lo: 0.2,
        hi: 0.8,
        levels: POS3,
    },
    Axis {
        name: "radius",
        lo: 0.08,
        hi: 0.32,
        levels: &[0.1, 0.18, 0.28],
    },
];
static STRIPE: [Axis; 3] = [
    Axis {
        name: "frequency",
        lo: 1.0,
        hi: 4.0,
        levels: &[1.5, 2.5, 3.5],
    },
    Axis {
        name: "rotation",
        lo: 0.0,
        hi: 180.0,
        levels: &[0.0, 45.0, 90.0, 135.0],
    },
    Axis {
        name: "phase",
        lo: 0.0,
        hi: 1.0,
        levels: &[0.0, 0.5],
    },
];
static RING: [Axis; 4] = [
    Axis {
        name: "cx",
        lo: 0.3,
        hi: 0.7,
        levels: &[0.4, 0.6],
    },
    Axis {
        name: "cy",
        lo: 0.3,
        hi: 0.7,
        levels: &[0.4, 0.6],
    },
    Axis {
        name: "radius",
        lo: 0.15,
        hi: 0.4,
        levels: &[0.2, 0.32],
    },
    Axis {
        name: "thickness",
        lo: 0.03,
        hi: 0.12,
        levels: &[0.05, 0.1],
    },
];
static CHECKER: [Axis; 2] = [
    Axis {
        name: "frequency",
        lo: 1.5,
        hi: 4.5,
        levels: &[2.0, 3.0, 4.0],
    },
    Axis {
        name: "rotation",
        lo: 0.0,
        hi: 90.0,
        levels: &[0.0, 30.0, 60.0],
    },
];
static CROSS: [Axis; 4] = [
    Axis {
        name: "cx",
        lo: 0.3,
        hi: 0.7,
        levels: &[0.35, 0.5, 0.65],
    },
    Axis {
        name: "cy",
        lo: 0.3,
        hi: 0.7,
        levels: &[0.35, 0.5, 0.65],
    },
    Axis {
        name: "thickness",
        lo: 0.05,
        hi: 0.2,
        levels: &[0.08, 0.16],
    },
    Axis {
        name: "rotation",
        lo: 0.0,
        hi: 90.0,
        levels: &[0.0, 45.0],
    },
];

/// A lattice cell: the family plus one level index per axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub family: Family,
    pub levels: Vec<usize>,
}

impl Cell {
    pub fn params(&self) -> Vec<f64> {
        self.family
            .axes()
            .iter()
            .zip(&self.levels)
            .map(|(a, &l)| a.levels[l])
            .collect()
    }

    pub fn key(&self) -> String {
        let idx: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        format!("{}-{}", self.family, idx.join("."))
    }
}

/// Every cell of the lattice, in a fixed order.
pub fn universe() -> Vec<Cell> {
    let mut out = Vec::new();
    for family in Family::ALL {
        let axes = family.axes();
        let mut idx = vec![0usize; axes.len()];
        loop {
            out.push(Cell {
                family,
                levels: idx.clone(),
            });
            let mut k = axes.len();
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < axes[k].levels.len() {
                    break;
                }
                idx[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX {
                break;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub cell: Cell,
    pub params: Vec<f64>,
    /// Half-width of the uniform jitter on each parameter.
    pub jitter: Vec<f64>,
}

impl ClassSpec {
    pub fn new(id: usize, cell: Cell) -> Self {
        let params = cell.params();
        let jitter = cell.family.axes().iter().map(|a| JITTER_FRACTION * a.range()).collect();
        Self {
            id,
            cell,
            params,
            jitter,
        }
    }

    pub fn family(&self) -> Family {
        self.cell.family
    }

    /// Label string used for the text-prompt embedding.
    pub fn label(&self) -> String {
        format!("{}-{}", self.id, self.cell.key())
    }

    /// Renders the pattern with the given parameter values (no noise).
    pub fn render(&self, params: &[f64], grid: usize) -> Vec<f64> {
        render(self.cell.family, params, grid)
    }

    /// One noisy sample.
    pub fn sample<R: Rng + ?Sized>(&self, grid: usize, rng: &mut R) -> Vec<f64> {
        let params: Vec<f64> = self
            .params
            .iter()
            .zip(&self.jitter)
            .map(|(&p, &j)| p + rng.random_range(-j..=j))
            .collect();
        let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
        let mut img = self.render(&params, grid);
        for v in &mut img {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
        img
    }
}

fn gauss(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

fn render(family: Family, p: &[f64], grid: usize) -> Vec<f64> {
    let mut img = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let u = (j as f64 + 0.5) / grid as f64;
            let v = (i as f64 + 0.5) / grid as f64;
            let value = match family {
                Family::Blob => {
                    let d = ((u - p[0]).powi(2) + (v - p[1]).powi(2)).sqrt();
                    gauss(d, p[2])
                }
                Family::Stripe => {
                    let th = p[1].to_radians();
                    let s = u * th.cos() + v * th.sin();
                    0.5 + 0.5 * (2.0 * PI * (p[0] * s + p[2])).cos()
                }
                Family::Ring => {
                    let d = ((u - p[0]).powi(2) + (v - p[1]).powi(2)).sqrt();
                    gauss(d - p[2], p[3] / 2.0)
                }
                Family::Checker => {
                    let th = p[1].to_radians();
                    let (du, dv) = (u - 0.5, v - 0.5);
                    let ru = du * th.cos() + dv * th.sin();
                    let rv = -du * th.sin() + dv * th.cos();
                    let s = (PI * p[0] * ru).sin() * (PI * p[0] * rv).sin();
                    0.5 + 0.5 * (4.0 * s).tanh()
                }
                Family::Cross => {
                    let th = p[3].to_radians();
                    let (du, dv) = (u - p[0], v - p[1]);
                    let ru = du * th.cos() + dv * th.sin();
                    let rv = -du * th.sin() + dv * th.cos();
                    gauss(ru, p[2] / 2.0).max(gauss(rv, p[2] / 2.0))
                }
            };
            img.push(value);
        }
    }
    img
}

/// Images (one per row) with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn empty(width: usize) -> Self {
        Self {
            images: Tensor::zeros((0, width)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.ncols()
    }

    /// Rows whose label satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Split {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            images: self.images.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Split]) -> Split {
        let width = parts.first().map_or(0, |p| p.width());
        let views: Vec<_> = parts.iter().map(|p| p.images.view()).collect();
        Split {
            images: if views.is_empty() {
                Tensor::zeros((0, width))
            } else {
                ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
            },
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        }
    }
}

/// A sampled mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub grid: usize,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes.len()).collect()
    }

    /// Task index (0-based) holding `class`.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }

    pub fn all_train(&self) -> Split {
        Split::concat(&self.tasks.iter().map(|t| &t.train).collect::<Vec<_>>())
    }

    pub fn all_test(&self) -> Split {
        Split::concat(&self.tasks.iter().map(|t| &t.test).collect::<Vec<_>>())
    }

    /// The same classes and samples split into consecutive tasks of the
    /// given sizes, in class-id order.
    pub fn regroup(&self, sizes: &[usize]) -> Result<TaskStream> {
        if sizes.iter().sum::<usize>() != self.num_classes() || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "task sizes {sizes:?} do not partition {} classes",
                self.num_classes()
            )));
        }
        let train = self.all_train();
        let test = self.all_test();
        let mut next = 0;
        let tasks = sizes
            .iter()
            .map(|&n| {
                let classes: Vec<usize> = (next..next + n).collect();
                next += n;
                let keep = |l: usize| classes.contains(&l);
                Task {
                    train: train.filter(keep),
                    test: test.filter(keep),
                    classes: classes.clone(),
                }
            })
            .collect();
        Ok(TaskStream {
            grid: self.grid,
            seed: self.seed,
            classes: self.classes.clone(),
            tasks,
        })
    }

    pub fn cells(&self) -> HashSet<Cell> {
        self.classes.iter().map(|c| c.cell.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    /// Number of tasks after the first.
    pub post_first_tasks: usize,
    pub samples_per_class: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            post_first_tasks: 4,
            samples_per_class: 100,
            grid: DEFAULT_GRID,
            seed: 7,
        }
    }
}

/// Class counts per task: the first task takes half the classes (rounded
/// up), the rest are split equally over `post_first_tasks` tasks.
pub fn task_sizes(num_classes: usize, post_first_tasks: usize) -> Result<Vec<usize>> {
    let first = num_classes.div_ceil(2);
    let rest = num_classes - first;
    if post_first_tasks == 0 {
        return if rest == 0 {
            Ok(vec![first])
        } else {
            Err(Error::invalid("classes remain but no post-first tasks were requested"))
        };
    }
    if rest % post_first_tasks != 0 || rest == 0 {
        return Err(Error::invalid(format!(
            "{rest} remaining classes cannot be split equally over {post_first_tasks} tasks"
        )));
    }
    let mut sizes = vec![first];
    sizes.extend(std::iter::repeat_n(rest / post_first_tasks, post_first_tasks));
    Ok(sizes)
}

fn class_seed(seed: u64, salt: u64, class: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.rotate_left(17) ^ (class as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn build_stream(
    classes: Vec<ClassSpec>,
    sizes: &[usize],
    samples_per_class: usize,
    grid: usize,
    seed: u64,
    salt: u64,
) -> TaskStream {
    let width = grid * grid;
    let n_train = ((samples_per_class as f64) * TRAIN_FRACTION).round() as usize;
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut next = 0;
    for &size in sizes {
        let members: Vec<usize> = (next..next + size).collect();
        next += size;
        let mut train = Vec::new();
        let mut train_labels = Vec::new();
        let mut test = Vec::new();
        let mut test_labels = Vec::new();
        for &c in &members {
            let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, salt, c));
            for s in 0..samples_per_class {
                let img = classes[c].sample(grid, &mut rng);
                if s < n_train {
                    train.extend(img);
                    train_labels.push(c);
                } else {
                    test.extend(img);
                    test_labels.push(c);
                }
            }
        }
        tasks.push(Task {
            classes: members,
            train: Split {
                images: Tensor::from_shape_vec((train_labels.len(), width), train).expect("sized"),
                labels: train_labels,
            },
            test: Split {
                images: Tensor::from_shape_vec((test_labels.len(), width), test).expect("sized"),
                labels: test_labels,
            },
        });
    }
    TaskStream {
        grid,
        seed,
        classes,
        tasks,
    }
}

fn validate_sizes(samples_per_class: usize, grid: usize) -> Result<()> {
    if samples_per_class < 20 {
        return Err(Error::invalid("samples_per_class must be at least 20"));
    }
    if grid < 4 {
        return Err(Error::invalid("grid must be at least 4"));
    }
    Ok(())
}

/// Builds a class-incremental benchmark from randomly chosen lattice cells.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<TaskStream> {
    if spec.num_classes < 4 || spec.num_classes % 2 != 0 {
        return Err(Error::invalid("num_classes must be even and at least 4"));
    }
    validate_sizes(spec.samples_per_class, spec.grid)?;
    let sizes = task_sizes(spec.num_classes, spec.post_first_tasks)?;
    let mut cells = universe();
    if spec.num_classes > cells.len() {
        return Err(Error::Exhausted {
            requested: spec.num_classes,
            available: cells.len(),
        });
    }
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let classes = cells
        .into_iter()
        .take(spec.num_classes)
        .enumerate()
        .map(|(id, cell)| ClassSpec::new(id, cell))
        .collect();
    Ok(build_stream(
        classes,
        &sizes,
        spec.samples_per_class,
        spec.grid,
        spec.seed,
        0,
    ))
}

/// A single-task bank of classes whose cells appear in none of `exclude`.
pub fn make_disjoint_bank(
    num_classes: usize,
    samples_per_class: usize,
    grid: usize,
    seed: u64,
    exclude: &[&TaskStream],
) -> Result<TaskStream> {
    bank_with_jitter(num_classes, samples_per_class, grid, seed, exclude, 1.0, 1)
}

/// Like [`make_disjoint_bank`] but with parameter jitter scaled by
/// `jitter_scale`, giving a broader distribution for generator pretraining.
pub fn make_generator_set(
    num_classes: usize,
    samples_per_class: usize,
    grid: usize,
    seed: u64,
    exclude: &[&TaskStream],
    jitter_scale: f64,
) -> Result<TaskStream> {
    if !(jitter_scale.is_finite() && jitter_scale >= 0.0) {
        return Err(Error::invalid("jitter_scale must be finite and non-negative"));
    }
    bank_with_jitter(num_classes, samples_per_class, grid, seed, exclude, jitter_scale, 2)
}

fn bank_with_jitter(
    num_classes: usize,
    samples_per_class: usize,
    grid: usize,
    seed: u64,
    exclude: &[&TaskStream],
    jitter_scale: f64,
    salt: u64,
) -> Result<TaskStream> {
    validate_sizes(samples_per_class, grid)?;
    if num_classes == 0 {
        return Err(Error::invalid("bank needs at least one class"));
    }
    let used: HashSet<Cell> = exclude.iter().flat_map(|s| s.cells()).collect();
    let mut free: Vec<Cell> = universe().into_iter().filter(|c| !used.contains(c)).collect();
    if num_classes > free.len() {
        return Err(Error::Exhausted {
            requested: num_classes,
            available: free.len(),
        });
    }
    free.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xD15_701E7));
    let classes = free
        .into_iter()
        .take(num_classes)
        .enumerate()
        .map(|(id, cell)| {
            let mut spec = ClassSpec::new(id, cell);
            spec.jitter.iter_mut().for_each(|j| *j *= jitter_scale);
            spec
        })
        .collect();
    Ok(build_stream(
        classes,
        &[num_classes],
        samples_per_class,
        grid,
        seed,
        salt,
    ))
}

/// Uniform draw with replacement.
pub fn sample_batch<R: Rng + ?Sized>(set: &Split, batch_size: usize, rng: &mut R) -> Result<SampleBatch> {
    if set.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..set.len())).collect();
    let picked = set.select(&idx);
    Ok(SampleBatch {
        images: picked.images,
        labels: picked.labels,
    })
}

const SAMPLE_MAGIC: &[u8; 4] = b"D2LS";

/// Writes `manifest.csv` (one row per class) and `samples.bin`.
///
/// `samples.bin`: magic `D2LS`, `u32` version 1, `u32` grid, `u64` sample
/// count, then per sample `u32` class id, `u8` split (0 train, 1 test) and
/// `grid * grid` `f64` pixels. All little-endian.
pub fn export_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    manifest
        .write_record(["class_id", "task", "family", "cell", "params", "seed"])
        .map_err(csv_err)?;
    for c in &stream.classes {
        let params: Vec<String> = c.params.iter().map(|p| p.to_string()).collect();
        let task = stream.task_of(c.id).map_or(String::new(), |t| t.to_string());
        manifest
            .write_record([
                c.id.to_string(),
                task,
                c.family().to_string(),
                c.cell
                    .levels
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                params.join(";"),
                stream.seed.to_string(),
            ])
            .map_err(csv_err)?;
    }
    manifest.flush()?;

    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(stream.grid as u32).to_le_bytes());
    let total: usize = stream.tasks.iter().map(|t| t.train.len() + t.test.len()).sum();
    out.extend_from_slice(&(total as u64).to_le_bytes());
    for task in &stream.tasks {
        for (split, tag) in [(&task.train, 0u8), (&task.test, 1u8)] {
            for (row, &label) in split.images.rows().into_iter().zip(&split.labels) {
                out.extend_from_slice(&(label as u32).to_le_bytes());
                out.push(tag);
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    std::fs::File::create(dir.join("samples.bin"))?.write_all(&out)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a stream written by [`export_stream`].
pub fn import_stream(dir: &Path) -> Result<TaskStream> {
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    let mut classes = Vec::new();
    let mut task_of = Vec::new();
    let mut seed = 0;
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Checkpoint(format!("manifest: bad {what}"));
        let id: usize = rec[0].parse().map_err(|_| bad("class_id"))?;
        let task: usize = rec[1].parse().map_err(|_| bad("task"))?;
        let family = Family::parse(&rec[2]).ok_or_else(|| bad("family"))?;
        let levels = rec[3]
            .split(';')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("cell"))?;
        seed = rec[5].parse().map_err(|_| bad("seed"))?;
        if levels.len() != family.axes().len() || levels.iter().zip(family.axes()).any(|(&l, a)| l >= a.levels.len()) {
            return Err(bad("cell"));
        }
        if id != classes.len() {
            return Err(bad("class order"));
        }
        classes.push(ClassSpec::new(id, Cell { family, levels }));
        task_of.push(task);
    }

    let bytes = std::fs::read(dir.join("samples.bin"))?;
    let mut cur = bytes.as_slice();
    if cur.len() < 20 || &cur[..4] != SAMPLE_MAGIC {
        return Err(Error::Checkpoint("samples.bin: bad header".into()));
    }
    cur = &cur[4..];
    let version = crate::nn::read_u32(&mut cur)?;
    if version != 1 {
        return Err(Error::Checkpoint(format!("samples.bin: version {version}")));
    }
    let grid = crate::nn::read_u32(&mut cur)? as usize;
    let total = u64::from_le_bytes(cur[..8].try_into().expect("8 bytes")) as usize;
    cur = &cur[8..];
    let width = grid * grid;
    let n_tasks = task_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut parts: Vec<[(Vec<f64>, Vec<usize>); 2]> = (0..n_tasks)
        .map(|_| [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())])
        .collect();
    for _ in 0..total {
        let label = crate::nn::read_u32(&mut cur)? as usize;
        if cur.is_empty() {
            return Err(Error::Checkpoint("samples.bin: truncated".into()));
        }
        let tag = cur[0] as usize;
        cur = &cur[1..];
        let pixels = crate::nn::read_f64s(&mut cur, width)?;
        if label >= classes.len() || tag > 1 {
            return Err(Error::Checkpoint("samples.bin: bad record".into()));
        }
        let slot = &mut parts[task_of[label]][tag];
        slot.0.extend(pixels);
        slot.1.push(label);
    }
    let tasks = parts
        .into_iter()
        .enumerate()
        .map(|(t, [train, test])| {
            let make = |(px, labels): (Vec<f64>, Vec<usize>)| Split {
                images: Tensor::from_shape_vec((labels.len(), width), px).expect("sized"),
                labels,
            };
            Task {
                classes: (0..classes.len()).filter(|&c| task_of[c] == t).collect(),
                train: make(train),
                test: make(test),
            }
        })
        .collect();
    Ok(TaskStream {
        grid,
        seed,
        classes,
        tasks,
    })
}
