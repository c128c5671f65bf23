//! Accuracy matrix, final average accuracy, forward transfer, leak counting
//! and seed aggregation.

use std::fmt;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cl::{argmax_masked, csv_err, Learner, MethodConfig};
use crate::error::{Error, Result};
use crate::heads::HeadTable;
use crate::nn::{classifier, Mlp, DEFAULT_CLASSIFIER_HIDDEN};
use crate::synth::{Split, Task, TaskStream};
use crate::Tensor;

/// `(correct, total)` on the test samples of `classes`, predicting by argmax
/// over real-class heads only. Classes without a head count as wrong.
pub fn evaluate_classes(net: &Mlp, table: &HeadTable, test: &Split, classes: &[usize]) -> Result<(usize, usize)> {
    let part = test.filter(|l| classes.contains(&l));
    if part.is_empty() {
        return Ok((0, 0));
    }
    let (logits, _) = net.forward(&part.images)?;
    let mask = table.real_mask();
    let correct = part
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let pred = argmax_masked(logits.row(i).iter().copied(), &mask);
            pred.is_some() && pred == table.head_of_real(label)
        })
        .count();
    Ok((correct, part.len()))
}

/// `A[i][j]`: accuracy on task `i` after training through `j` tasks, with
/// `j = 0` the untrained network. Stored as counts so the union accuracy is
/// exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    totals: Vec<usize>,
    correct: Vec<Vec<usize>>,
}

impl AccuracyMatrix {
    /// `totals[i]` is the number of test samples of task `i`.
    pub fn new(totals: Vec<usize>) -> Self {
        let t = totals.len();
        Self {
            correct: vec![vec![0; t + 1]; t],
            totals,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.totals.len()
    }

    pub fn totals(&self) -> &[usize] {
        &self.totals
    }

    pub fn set(&mut self, task: usize, after: usize, correct: usize) -> Result<()> {
        if task >= self.num_tasks() || after > self.num_tasks() {
            return Err(Error::invalid(format!("entry ({task}, {after}) outside the matrix")));
        }
        if correct > self.totals[task] {
            return Err(Error::invalid(format!(
                "{correct} correct out of {} samples",
                self.totals[task]
            )));
        }
        self.correct[task][after] = correct;
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> f64 {
        match self.totals[task] {
            0 => 0.0,
            n => self.correct[task][after] as f64 / n as f64,
        }
    }

    /// Accuracy on the union of all test sets after the last task.
    pub fn faa(&self) -> f64 {
        let t = self.num_tasks();
        let n: usize = self.totals.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let c: usize = self.correct.iter().map(|row| row[t]).sum();
        c as f64 / n as f64
    }

    /// Size-weighted mean of the last column. Equal to [`Self::faa`] up to
    /// rounding.
    pub fn faa_weighted(&self) -> f64 {
        let t = self.num_tasks();
        let n: usize = self.totals.iter().sum();
        if n == 0 {
            return 0.0;
        }
        (0..t).map(|i| self.get(i, t) * self.totals[i] as f64).sum::<f64>() / n as f64
    }

    /// Mean over tasks `2..=T` of `A[t][t-1] - baseline[t]`.
    pub fn fwt(&self, baseline: &[f64]) -> Result<f64> {
        fwt(&self.transfer_entries(), baseline)
    }

    /// `A[t][t-1]` for every task, the first being the untrained network.
    pub fn transfer_entries(&self) -> Vec<f64> {
        (0..self.num_tasks()).map(|t| self.get(t, t)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["task".to_string()];
        header.extend((0..=self.num_tasks()).map(|j| format!("after_{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.num_tasks() {
            let mut row = vec![(i + 1).to_string()];
            row.extend((0..=self.num_tasks()).map(|j| format!("{:.6}", self.get(i, j))));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Standalone SVG with one line per task: its accuracy after each
    /// training stage from the one that introduced it.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const PAD: f64 = 40.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        ];
        let t = self.num_tasks().max(1);
        let x = |j: usize| PAD + (W - 2.0 * PAD) * (j as f64 - 1.0) / (t.max(2) - 1) as f64;
        let y = |a: f64| H - PAD - (H - 2.0 * PAD) * a;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        );
        s += &format!(
            "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>\n",
            H - PAD,
            W - PAD
        );
        for j in 1..=t {
            s += &format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{j}</text>\n",
                x(j),
                H - PAD + 16.0
            );
        }
        for a in [0.0, 0.5, 1.0] {
            s += &format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{a:.1}</text>\n",
                PAD - 4.0,
                y(a) + 4.0
            );
        }
        for i in 0..self.num_tasks() {
            let pts: Vec<String> = (i + 1..=self.num_tasks())
                .map(|j| format!("{:.1},{:.1}", x(j), y(self.get(i, j))))
                .collect();
            s += &format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                COLORS[i % COLORS.len()],
                pts.join(" ")
            );
        }
        s += "</svg>\n";
        s
    }
}

/// Mean over `t = 2..=T` of `transfer[t] - baseline[t]`, where `transfer[t]`
/// is the accuracy on task `t` before training on it.
pub fn fwt(transfer: &[f64], baseline: &[f64]) -> Result<f64> {
    if transfer.len() < 2 {
        return Err(Error::invalid("forward transfer needs at least two tasks"));
    }
    if baseline.len() != transfer.len() {
        return Err(Error::shape(format!(
            "{} baseline entries for {} tasks",
            baseline.len(),
            transfer.len()
        )));
    }
    let sum: f64 = transfer[1..].iter().zip(&baseline[1..]).map(|(a, b)| a - b).sum();
    Ok(sum / (transfer.len() - 1) as f64)
}

/// Head table giving the classes of tasks `0..=task` the lowest heads in
/// stream order.
pub fn table_through(stream: &TaskStream, task: usize, width: usize) -> Result<HeadTable> {
    let mut table = HeadTable::new(width);
    let mut head = 0;
    for t in &stream.tasks[..=task] {
        for &c in &t.classes {
            table.assign_real(c, head)?;
            head += 1;
        }
    }
    Ok(table)
}

/// Per-task accuracy of freshly initialized networks, averaged over
/// `seeds`. Task `t` is scored among the heads of tasks `0..=t`.
pub fn random_baseline(stream: &TaskStream, width: usize, seeds: &[u64]) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(Error::Empty("random baseline seeds"));
    }
    let mut acc = vec![0.0; stream.tasks.len()];
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = classifier(stream.pixels(), &DEFAULT_CLASSIFIER_HIDDEN, width, &mut rng);
        for (t, task) in stream.tasks.iter().enumerate() {
            let table = table_through(stream, t, width)?;
            let (c, n) = evaluate_classes(&net, &table, &task.test, &task.classes)?;
            if n > 0 {
                acc[t] += c as f64 / n as f64;
            }
        }
    }
    Ok(acc.into_iter().map(|a| a / seeds.len() as f64).collect())
}

/// Classifier trained offline on every class of `stream` at once, class `c`
/// on head `c`.
pub fn train_joint_classifier(stream: &TaskStream, epochs: usize, seed: u64) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = stream.num_classes();
    let net = classifier(stream.pixels(), &DEFAULT_CLASSIFIER_HIDDEN, n, &mut rng);
    let mut learner = Learner::new(
        net,
        MethodConfig {
            epochs,
            ..MethodConfig::default()
        },
    );
    let task = Task {
        classes: (0..n).collect(),
        train: stream.all_train(),
        test: stream.all_test(),
    };
    learner.assign_free(&task.classes)?;
    learner.bootstrap_task1(&task, 0, &mut rng)?;
    Ok(learner.net)
}

/// A real class taking over a head that held a dream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub task: usize,
    pub class: usize,
    pub head: usize,
    pub dream_id: usize,
    pub dream_source: usize,
    #[serde(skip)]
    pub stop_samples: Tensor,
}

/// Most frequent argmax of `net` over `samples`; ties go to the lower class.
pub fn majority_class(net: &Mlp, samples: &Tensor) -> Result<usize> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("dream samples"));
    }
    let (logits, _) = net.forward(samples)?;
    let mask = vec![true; logits.ncols()];
    let mut votes = vec![0usize; logits.ncols()];
    for row in logits.rows() {
        if let Some(j) = argmax_masked(row.iter().copied(), &mask) {
            votes[j] += 1;
        }
    }
    let mut best = 0;
    for (j, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakCount {
    pub leaks: usize,
    pub replacements: usize,
    pub fraction: f64,
}

/// A replacement leaks when the joint classifier already reads the dream's
/// stop-time samples as the incoming class.
pub fn count_leaks(replacements: &[Replacement], joint: &Mlp) -> Result<LeakCount> {
    let mut leaks = 0;
    for r in replacements {
        if majority_class(joint, &r.stop_samples)? == r.class {
            leaks += 1;
        }
    }
    let fraction = if replacements.is_empty() {
        0.0
    } else {
        leaks as f64 / replacements.len() as f64
    };
    Ok(LeakCount {
        leaks,
        replacements: replacements.len(),
        fraction,
    })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(4);
        write!(f, "{:.p$} ± {:.p$}", self.mean, self.std)
    }
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub buffer: usize,
    pub seed: u64,
    #[serde(rename = "FAA")]
    pub faa: f64,
    #[serde(rename = "FWT")]
    pub fwt: f64,
    pub leaks: usize,
    pub leak_fraction: f64,
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["method", "buffer", "seed", "FAA", "FWT", "leaks", "leak_fraction"])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Seed aggregate for one `(method, buffer)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub buffer: usize,
    pub faa: MeanStd,
    pub fwt: MeanStd,
    pub leak_fraction: MeanStd,
}

/// Groups rows by `(method, buffer)` in order of first appearance.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.buffer);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, buffer)| {
            let group: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.method == method && r.buffer == buffer)
                .collect();
            let col = |f: fn(&ResultRow) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
            Summary {
                faa: MeanStd::of(&col(|r| r.faa)),
                fwt: MeanStd::of(&col(|r| r.fwt)),
                leak_fraction: MeanStd::of(&col(|r| r.leak_fraction)),
                method,
                buffer,
            }
        })
        .collect()
}

/// Aligned text table of summaries, values in percent.
pub fn summary_table(summaries: &[Summary]) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>18} {:>18} {:>6}\n",
        "method", "buffer", "FAA", "FWT", "runs"
    );
    for m in summaries {
        let pct = |v: MeanStd| MeanStd {
            mean: 100.0 * v.mean,
            std: 100.0 * v.std,
            n: v.n,
        };
        s += &format!(
            "{:<16} {:>6} {:>18} {:>18} {:>6}\n",
            m.method,
            m.buffer,
            format!("{:.2}", pct(m.faa)),
            format!("{:.2}", pct(m.fwt)),
            m.faa.n
        );
    }
    s
}

/// Bar chart of FAA and FWT per summary with one-std whiskers. The value
/// axis spans `[-1, 1]`.
pub fn summary_svg(summaries: &[Summary]) -> String {
    const ROW: f64 = 36.0;
    const LABEL: f64 = 170.0;
    const PLOT: f64 = 360.0;
    const PAD: f64 = 24.0;
    let w = LABEL + PLOT + PAD;
    let h = 2.0 * PAD + ROW * summaries.len().max(1) as f64;
    let zero = LABEL + PLOT / 2.0;
    let x = |v: f64| zero + v.clamp(-1.0, 1.0) * PLOT / 2.0;
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    s += &format!(
        "<line x1=\"{zero}\" y1=\"{PAD}\" x2=\"{zero}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        h - PAD
    );
    s += &format!(
        "<text x=\"{:.1}\" y=\"16\" font-size=\"11\" fill=\"#1f77b4\">FAA</text><text x=\"{:.1}\" y=\"16\" font-size=\"11\" fill=\"#ff7f0e\">FWT</text>\n",
        LABEL,
        LABEL + 40.0
    );
    for (i, m) in summaries.iter().enumerate() {
        let top = PAD + ROW * i as f64;
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{} b{}</text>\n",
            LABEL - 6.0,
            top + ROW / 2.0 + 4.0,
            m.method,
            m.buffer
        );
        for (k, (v, color)) in [(m.faa, "#1f77b4"), (m.fwt, "#ff7f0e")].into_iter().enumerate() {
            if !v.mean.is_finite() {
                continue;
            }
            let y = top + 4.0 + k as f64 * 14.0;
            let (a, b) = (x(0.0).min(x(v.mean)), x(0.0).max(x(v.mean)));
            s += &format!(
                "<rect x=\"{a:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"12\" fill=\"{color}\"/>\n",
                b - a
            );
            let std = if v.std.is_finite() { v.std } else { 0.0 };
            s += &format!(
                "<line x1=\"{:.1}\" y1=\"{2:.1}\" x2=\"{:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>\n",
                x(v.mean - std),
                x(v.mean + std),
                y + 6.0
            );
        }
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faa_of_two_equal_tasks() {
        let mut m = AccuracyMatrix::new(vec![10, 10]);
        m.set(0, 2, 5).unwrap();
        m.set(1, 2, 3).unwrap();
        assert!((m.faa() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn fwt_direct_arithmetic() {
        let v = fwt(&[0.0, 0.4, 0.3], &[0.0, 0.2, 0.25]).unwrap();
        assert!((v - 0.125).abs() < 1e-15);
    }

    #[test]
    fn sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(format!("{m:.1}"), "2.0 ± 1.0");
    }
}
