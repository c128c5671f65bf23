//! Checks shared by the focused suites and the acceptance target.
#![allow(dead_code)]

use d2l::cl::{train_step, Method};
use d2l::config::RunConfig;
use d2l::dreaming::prompt_loss;
use d2l::generator::{FrozenGenerator, GeneratorDims, Prompt};
use d2l::nn::{classifier, Mlp, OutputActivation, DEFAULT_CLASSIFIER_HIDDEN};
use d2l::optim::Optimizer;
use d2l::pipeline::{run_pipeline, Assets};
use d2l::replay::{Offer, ReplayBuffer};
use d2l::synth::{make_benchmark, SampleBatch, TaskStream};
use d2l::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Masked softmax cross-entropy from logits, written out per row.
pub fn scalar_ce(logits: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let m = row
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| (v - m).exp())
            .sum();
        total += -(row[t] - m - z.ln());
    }
    total / targets.len() as f64
}

/// Largest relative error over classifier parameters, one network per seed.
pub fn classifier_layers(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&[6, 5, 4, 5], OutputActivation::Identity, &mut rng);
        let x = random(3, 6, &mut rng);
        let mask = [true, true, false, true, true];
        let targets = [0, 3, 4];

        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let (logits, _) = bound.forward(&mut g, xv).unwrap();
        let loss = g.cross_entropy(logits, &targets, Some(&mask)).unwrap();
        let grads = bound.grads(&g.backward(loss).unwrap());
        assert!((g.scalar(loss) - scalar_ce(g.value(logits), &targets, &mask)).abs() < 1e-12);

        for (p, grad) in grads.iter().enumerate() {
            for idx in 0..grad.len() {
                let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
                let orig = net.params()[p][[r, c]];
                net.params_mut()[p][[r, c]] = orig + H;
                let up = scalar_ce(&net.forward(&x).unwrap().0, &targets, &mask);
                net.params_mut()[p][[r, c]] = orig - H;
                let down = scalar_ce(&net.forward(&x).unwrap().0, &targets, &mask);
                net.params_mut()[p][[r, c]] = orig;
                worst = worst.max(rel_err(grad[[r, c]], (up - down) / (2.0 * H)));
            }
        }
    }
    worst
}

fn small_generator(rng: &mut ChaCha8Rng) -> FrozenGenerator {
    let dims = GeneratorDims {
        pixels: 9,
        embed: 4,
        soft: 3,
        text: 3,
        noise: 2,
        enc_hidden: 6,
        dec_hidden: 7,
    };
    let enc = Mlp::new(&[9, 6, 4], OutputActivation::Identity, rng);
    let dec = Mlp::new(&[4 + 3 + 3 + 2, 7, 9], OutputActivation::Sigmoid, rng);
    FrozenGenerator::from_parts(enc, dec, dims, 1.0).unwrap()
}

/// Largest relative error of a random projection of the generator output
/// with respect to the soft prompt.
pub fn generate_wrt_soft_prompt(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = small_generator(&mut rng);
        let mut prompt = Prompt::new(&format!("c{seed}"), gen.dims()).unwrap();
        prompt.soft = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random(4, 9, &mut rng);
        let noise = gen.sample_noise(4, &mut rng);
        // Random projection to a scalar.
        let w = random(4, 9, &mut rng);

        let mut g = Graph::new();
        let bound = gen.bind(&mut g);
        let xv = g.constant(x.clone());
        let sv = g.leaf(prompt.soft_row());
        let tv = g.constant(prompt.text_row());
        let nv = g.constant(noise.clone());
        let out = bound.forward(&mut g, xv, sv, tv, nv).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let total = g.sum(prod);
        let grad = g.backward(total).unwrap().get(sv);

        let project = |p: &Prompt| (gen.generate(&x, p, &noise).unwrap() * &w).sum();
        for j in 0..3 {
            let orig = prompt.soft[j];
            prompt.soft[j] = orig + H;
            let up = project(&prompt);
            prompt.soft[j] = orig - H;
            let down = project(&prompt);
            prompt.soft[j] = orig;
            worst = worst.max(rel_err(grad[[0, j]], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Largest relative error of the prompt loss gradient.
pub fn prompt_optimization_loss(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = small_generator(&mut rng);
        let net = Mlp::new(&[9, 6, 5], OutputActivation::Identity, &mut rng);
        let mut prompt = Prompt::new(&format!("c{seed}"), gen.dims()).unwrap();
        prompt.soft = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random(1, 9, &mut rng);
        let noise = gen.sample_noise(1, &mut rng);
        let mask = [true, true, true, false, true];
        let target = (seed % 3) as usize;
        let text = prompt.text_row();

        let (loss, grad, _) = prompt_loss(&net, &gen, &x, &prompt.soft_row(), &text, &noise, target, &mask).unwrap();
        let direct = |p: &Prompt| {
            let logits = net.forward(&gen.generate(&x, p, &noise).unwrap()).unwrap().0;
            scalar_ce(&logits, &[target], &mask)
        };
        assert!((loss - direct(&prompt)).abs() < 1e-12);
        for j in 0..3 {
            let orig = prompt.soft[j];
            prompt.soft[j] = orig + H;
            let up = direct(&prompt);
            prompt.soft[j] = orig - H;
            let down = direct(&prompt);
            prompt.soft[j] = orig;
            worst = worst.max(rel_err(grad[[0, j]], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Per-item inclusion counts of a `capacity` reservoir after offering
/// `stream` items, over `trials` independent fills.
pub fn inclusion_counts(capacity: usize, stream: usize, trials: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; stream];
    let pixel = [0.0];
    for _ in 0..trials {
        let mut buf = ReplayBuffer::new(capacity, 1);
        for i in 0..stream {
            buf.reservoir_insert(Offer::real(&pixel, i), &mut rng).unwrap();
        }
        for &l in buf.labels() {
            counts[l] += 1;
        }
    }
    counts
}

/// Reference rehearsal loop. Class `c` of the k-th seen class sits on head k.
pub fn plain_rehearsal(cfg: &RunConfig, stream: &TaskStream, seed: u64) -> Vec<(u64, u64, u64)> {
    let m = &cfg.method;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = classifier(
        stream.pixels(),
        &DEFAULT_CLASSIFIER_HIDDEN,
        stream.num_classes(),
        &mut rng,
    );
    let mut opt = Optimizer::sgd(m.learning_rate);
    let mut buffer = ReplayBuffer::new(m.buffer_capacity, stream.pixels());
    let mut head_of = vec![usize::MAX; stream.num_classes()];
    let mut seen = 0;
    let mut steps = Vec::new();
    for task in &stream.tasks {
        for &c in &task.classes {
            head_of[c] = seen;
            seen += 1;
        }
        let seen_mask: Vec<bool> = (0..stream.num_classes()).map(|h| h < seen).collect();
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        for _ in 0..m.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(m.batch_size) {
                let part = task.train.select(idx);
                let batch = SampleBatch {
                    labels: part.labels.iter().map(|&c| head_of[c]).collect(),
                    images: part.images,
                };
                let smask: Vec<bool> = match m.method {
                    Method::ErAce => (0..stream.num_classes())
                        .map(|h| batch.labels.contains(&h) || task.classes.iter().any(|&c| head_of[c] == h))
                        .collect(),
                    _ => seen_mask.clone(),
                };
                let rehearsal = if buffer.is_empty() {
                    None
                } else {
                    let mut b = buffer.sample_rehearsal(m.batch_size, &mut rng).unwrap();
                    b.labels.iter_mut().for_each(|l| *l = head_of[*l]);
                    Some(b)
                };
                let (loss, _) = train_step(
                    &mut net,
                    &mut opt,
                    &batch,
                    &smask,
                    rehearsal.as_ref().map(|b| (b, seen_mask.as_slice())),
                    idx.len(),
                )
                .unwrap();
                steps.push((loss.ce.to_bits(), loss.cl.to_bits(), loss.total.to_bits()));
                for &i in idx {
                    let row = task.train.images.row(i);
                    buffer
                        .reservoir_insert(Offer::real(row.as_slice().unwrap(), task.train.labels[i]), &mut rng)
                        .unwrap();
                }
            }
        }
    }
    steps
}

/// Runs the pipeline without dreams and compares its per-step losses bit for
/// bit with [`plain_rehearsal`].
pub fn matches_plain_rehearsal(method: Method, seeds: &[u64]) -> Result<usize, String> {
    let mut cfg = RunConfig::default();
    cfg.method.method = method;
    cfg.method.epochs = 3;
    let stream = make_benchmark(&cfg.benchmark).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for &seed in seeds {
        let record = run_pipeline(&cfg, &stream, Assets::default(), seed).map_err(|e| e.to_string())?;
        if record.dreaming_phases != 0 || !record.replacements.is_empty() {
            return Err("a run without dreams dreamt".into());
        }
        let got: Vec<(u64, u64, u64)> = record
            .steps
            .iter()
            .map(|s| (s.ce.to_bits(), s.cl.to_bits(), s.total.to_bits()))
            .collect();
        let want = plain_rehearsal(&cfg, &stream, seed);
        if got != want {
            let at = got.iter().zip(&want).position(|(a, b)| a != b);
            return Err(format!(
                "{} seed {seed}: {} vs {} steps, first difference at {at:?}",
                method.name(),
                got.len(),
                want.len()
            ));
        }
        compared += got.len();
    }
    Ok(compared)
}
