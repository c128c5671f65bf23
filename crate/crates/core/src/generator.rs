//! A frozen conditional generator: an image encoder and a decoder that takes
//! the image embedding, a prompt (soft part plus text part) and noise.
//!
//! Pretraining mixes two kinds of rows. Reconstruction rows feed Gaussian
//! noise into the soft-prompt slot and ask for the condition back. Morph rows
//! feed `(1 - a) * P(y)` into the slot, where `P` is a linear prompt encoder
//! used only during pretraining, and ask for `a * x + (1 - a) * y`. The soft
//! slot therefore learns to steer outputs away from the condition and toward
//! other images, and large prompts override the condition.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{hash_bytes, read_layers, write_layers, BoundMlp, Mlp, OutputActivation};
use crate::optim::Optimizer;
use crate::synth::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorDims {
    pub pixels: usize,
    pub embed: usize,
    pub soft: usize,
    pub text: usize,
    pub noise: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        Self {
            pixels: 144,
            embed: 32,
            soft: 16,
            text: 16,
            noise: 8,
            enc_hidden: 64,
            dec_hidden: 96,
        }
    }
}

impl GeneratorDims {
    fn decoder_input(&self) -> usize {
        self.embed + self.soft + self.text + self.noise
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub dims: GeneratorDims,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard deviation of the soft-slot noise on reconstruction rows.
    pub prompt_noise: f64,
    /// Fraction of each batch made of morph rows.
    pub morph_fraction: f64,
    /// Held-out reconstruction MSE the generator must reach.
    pub loss_ceiling: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dims: GeneratorDims::default(),
            steps: 10000,
            batch_size: 32,
            learning_rate: 1e-3,
            prompt_noise: 0.5,
            morph_fraction: 0.5,
            loss_ceiling: 0.03,
            seed: 11,
        }
    }
}

/// Unit-norm embedding of the phrase "An image of class <label>".
pub fn text_embed(label: &str, dim: usize) -> Result<Tensor> {
    if label.is_empty() {
        return Err(Error::invalid("empty class label"));
    }
    let digest = Sha256::digest(format!("An image of class {label}").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(unit_row(dim, &mut rng))
}

fn unit_row<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor {
    let v = Tensor::from_shape_simple_fn((1, dim), || rng.sample::<f64, _>(StandardNormal));
    let norm = v.mapv(|x| x * x).sum().sqrt();
    v / norm
}

/// A learnable soft prompt paired with a fixed text embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub label: String,
    pub soft: Vec<f64>,
    text: Vec<f64>,
}

impl Prompt {
    /// Zero soft part; text part from [`text_embed`].
    pub fn new(label: &str, dims: &GeneratorDims) -> Result<Self> {
        Ok(Self {
            label: label.to_string(),
            soft: vec![0.0; dims.soft],
            text: text_embed(label, dims.text)?.into_raw_vec_and_offset().0,
        })
    }

    pub fn text(&self) -> &[f64] {
        &self.text
    }

    pub fn soft_row(&self) -> Tensor {
        Tensor::from_shape_vec((1, self.soft.len()), self.soft.clone()).expect("row shape")
    }

    pub fn text_row(&self) -> Tensor {
        Tensor::from_shape_vec((1, self.text.len()), self.text.clone()).expect("row shape")
    }

    /// `[soft, text]`.
    pub fn condition(&self) -> Vec<f64> {
        self.soft.iter().chain(&self.text).copied().collect()
    }
}

/// Generator parameters placed on a graph as constants.
pub struct BoundGenerator {
    enc: BoundMlp,
    dec: BoundMlp,
}

impl BoundGenerator {
    /// Decodes `x` under the given prompt parts and noise. Single-row prompt
    /// parts are broadcast over the batch.
    pub fn forward(&self, g: &mut Graph, x: Var, soft: Var, text: Var, noise: Var) -> Result<Var> {
        let rows = g.shape(x).0;
        let (e, _) = self.enc.forward(g, x)?;
        let soft = broadcast(g, soft, rows)?;
        let text = broadcast(g, text, rows)?;
        let z = g.concat_cols(&[e, soft, text, noise])?;
        Ok(self.dec.forward(g, z)?.0)
    }
}

fn broadcast(g: &mut Graph, v: Var, rows: usize) -> Result<Var> {
    match g.shape(v).0 {
        r if r == rows => Ok(v),
        1 => g.repeat_rows(v, rows),
        r => Err(Error::shape(format!("{r} prompt rows for a batch of {rows}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub seed: u64,
    pub steps: usize,
    pub bank_hash: String,
    pub dims: GeneratorDims,
    pub prompt_noise: f64,
    pub morph_fraction: f64,
    pub quality_scale: f64,
    pub final_loss: f64,
    pub heldout_error: f64,
    pub mean_image_error: f64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenGenerator {
    encoder: Mlp,
    decoder: Mlp,
    dims: GeneratorDims,
    quality_scale: f64,
}

impl FrozenGenerator {
    pub fn from_parts(encoder: Mlp, decoder: Mlp, dims: GeneratorDims, quality_scale: f64) -> Result<Self> {
        if encoder.input_dim() != dims.pixels
            || encoder.output_dim() != dims.embed
            || decoder.input_dim() != dims.decoder_input()
            || decoder.output_dim() != dims.pixels
        {
            return Err(Error::shape("generator networks disagree with dimensions"));
        }
        Ok(Self {
            encoder,
            decoder,
            dims,
            quality_scale,
        })
    }

    pub fn dims(&self) -> &GeneratorDims {
        &self.dims
    }

    /// `lambda` in `Q = exp(-lambda * reconstruction error)`.
    pub fn quality_scale(&self) -> f64 {
        self.quality_scale
    }

    pub fn bind(&self, g: &mut Graph) -> BoundGenerator {
        BoundGenerator {
            enc: self.encoder.bind(g, false),
            dec: self.decoder.bind(g, false),
        }
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor {
        Tensor::from_shape_simple_fn((rows, self.dims.noise), || rng.sample(StandardNormal))
    }

    fn run(&self, x: &Tensor, soft: &Tensor, text: &Tensor, noise: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.dims.pixels || noise.dim() != (x.nrows(), self.dims.noise) {
            return Err(Error::shape(format!(
                "generate on {:?} with noise {:?}",
                x.dim(),
                noise.dim()
            )));
        }
        if soft.ncols() != self.dims.soft || text.ncols() != self.dims.text {
            return Err(Error::shape("prompt width disagrees with generator"));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let vars = [x, soft, text, noise].map(|t| g.constant(t.clone()));
        let out = bound.forward(&mut g, vars[0], vars[1], vars[2], vars[3])?;
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    /// One output row per condition row.
    pub fn generate(&self, x: &Tensor, prompt: &Prompt, noise: &Tensor) -> Result<Tensor> {
        self.run(x, &prompt.soft_row(), &prompt.text_row(), noise)
    }

    /// Decodes with an all-zero prompt and zero noise.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let soft = Tensor::zeros((1, self.dims.soft));
        let text = Tensor::zeros((1, self.dims.text));
        let noise = Tensor::zeros((x.nrows(), self.dims.noise));
        self.run(x, &soft, &text, &noise)
    }

    /// Per-row mean squared reconstruction error.
    pub fn recon_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        let r = self.reconstruct(x)?;
        Ok((x - &r)
            .rows()
            .into_iter()
            .map(|row| row.mapv(|d| d * d).mean().unwrap_or(0.0))
            .collect())
    }

    /// Per-row quality proxy in (0, 1].
    pub fn quality(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .recon_errors(x)?
            .into_iter()
            .map(|e| (-self.quality_scale * e).exp())
            .collect())
    }

    /// Two consecutive checkpoint blocks: encoder, then decoder.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_layers(&mut out, self.encoder.layers());
        write_layers(&mut out, self.decoder.layers());
        out
    }

    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }

    /// Fails with [`Error::FrozenViolation`] unless the parameters hash to
    /// `expected`.
    pub fn verify(&self, expected: &str) -> Result<()> {
        let found = self.hash();
        if found != expected {
            return Err(Error::FrozenViolation {
                expected: expected.to_string(),
                found,
            });
        }
        Ok(())
    }

    /// Writes `generator.bin` and `generator.json` into `dir`.
    pub fn save(&self, dir: &Path, manifest: &GeneratorManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("generator.bin"), self.to_bytes())?;
        let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("generator.json"), json)?;
        Ok(())
    }

    /// Loads a checkpoint and checks it against its manifest hash.
    pub fn load(dir: &Path) -> Result<(Self, GeneratorManifest)> {
        let bin = dir.join("generator.bin");
        let json = dir.join("generator.json");
        for p in [&bin, &json] {
            if !p.exists() {
                return Err(Error::MissingCheckpoint(p.clone()));
            }
        }
        let manifest: GeneratorManifest =
            serde_json::from_str(&std::fs::read_to_string(json)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bytes = std::fs::read(bin)?;
        let mut cur = bytes.as_slice();
        let encoder = Mlp::from_layers(read_layers(&mut cur)?, OutputActivation::Identity)?;
        let decoder = Mlp::from_layers(read_layers(&mut cur)?, OutputActivation::Sigmoid)?;
        if !cur.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after generator blocks".into()));
        }
        let gen = Self::from_parts(encoder, decoder, manifest.dims, manifest.quality_scale)?;
        gen.verify(&manifest.hash)?;
        Ok((gen, manifest))
    }
}

/// SHA-256 over the pixels and labels of a split.
pub fn split_hash(split: &Split) -> String {
    let mut h = Sha256::new();
    for v in split.images.iter() {
        h.update(v.to_le_bytes());
    }
    for &l in &split.labels {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains the encoder and decoder on `train`, then checks held-out
/// reconstruction on `heldout` against the configured ceiling.
pub fn pretrain_generator(
    train: &Split,
    heldout: &Split,
    cfg: &PretrainConfig,
) -> Result<(FrozenGenerator, GeneratorManifest)> {
    let d = cfg.dims;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Empty("generator pretraining set"));
    }
    if train.width() != d.pixels {
        return Err(Error::shape(format!(
            "images of {} pixels, generator expects {}",
            train.width(),
            d.pixels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Mlp::new(&[d.pixels, d.enc_hidden, d.embed], OutputActivation::Identity, &mut rng);
    let mut decoder = Mlp::new(
        &[d.decoder_input(), d.dec_hidden, d.pixels],
        OutputActivation::Sigmoid,
        &mut rng,
    );
    let mut prompt_enc = Mlp::new(&[d.pixels, d.soft], OutputActivation::Identity, &mut rng);
    let mut opts = [
        Optimizer::adam(cfg.learning_rate),
        Optimizer::adam(cfg.learning_rate),
        Optimizer::adam(cfg.learning_rate),
    ];
    let b = cfg.batch_size.max(1);
    let n = train.len();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let xi: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let yi: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let x = train.images.select(ndarray::Axis(0), &xi);
        let y = train.images.select(ndarray::Axis(0), &yi);
        // per row: coefficient on P(y), soft-slot noise, and target
        let mut coef = Tensor::zeros((b, d.soft));
        let mut slot_noise = Tensor::zeros((b, d.soft));
        let mut target = x.clone();
        for r in 0..b {
            if rng.random::<f64>() < cfg.morph_fraction {
                let a: f64 = rng.random();
                coef.row_mut(r).fill(1.0 - a);
                let mix = &x.row(r) * a + &y.row(r) * (1.0 - a);
                target.row_mut(r).assign(&mix);
            } else {
                for v in slot_noise.row_mut(r) {
                    *v = cfg.prompt_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let mut text = Tensor::zeros((b, d.text));
        for r in 0..b {
            text.row_mut(r).assign(&unit_row(d.text, &mut rng).row(0));
        }
        let noise = Tensor::from_shape_simple_fn((b, d.noise), || rng.sample(StandardNormal));

        let mut g = Graph::new();
        let enc = encoder.bind(&mut g, true);
        let dec = decoder.bind(&mut g, true);
        let pe = prompt_enc.bind(&mut g, true);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let (e, _) = enc.forward(&mut g, xv)?;
        let (py, _) = pe.forward(&mut g, yv)?;
        let cv = g.constant(coef);
        let scaled = g.mul(py, cv)?;
        let nv = g.constant(slot_noise);
        let soft = g.add(scaled, nv)?;
        let tv = g.constant(text);
        let ev = g.constant(noise);
        let z = g.concat_cols(&[e, soft, tv, ev])?;
        let (out, _) = dec.forward(&mut g, z)?;
        let loss = g.mse(out, &target)?;
        final_loss = g.scalar(loss);
        let grads = g.backward(loss)?;
        opts[0].step(&mut encoder.params_mut(), &enc.grads(&grads))?;
        opts[1].step(&mut decoder.params_mut(), &dec.grads(&grads))?;
        opts[2].step(&mut prompt_enc.params_mut(), &pe.grads(&grads))?;
    }

    let mut gen = FrozenGenerator::from_parts(encoder, decoder, d, 1.0)?;
    let heldout_error = mean(&gen.recon_errors(&heldout.images)?);
    let mean_image = heldout.images.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let mean_image_error = (&heldout.images - &mean_image).mapv(|v| v * v).mean().unwrap_or(0.0);
    if !(heldout_error < cfg.loss_ceiling) {
        return Err(Error::GeneratorUnusable {
            loss: heldout_error,
            ceiling: cfg.loss_ceiling,
        });
    }
    let typical = median(gen.recon_errors(&train.images)?);
    gen.quality_scale = -(0.8f64).ln() / typical.max(f64::MIN_POSITIVE);
    let manifest = GeneratorManifest {
        seed: cfg.seed,
        steps: cfg.steps,
        bank_hash: split_hash(train),
        dims: d,
        prompt_noise: cfg.prompt_noise,
        morph_fraction: cfg.morph_fraction,
        quality_scale: gen.quality_scale,
        final_loss,
        heldout_error,
        mean_image_error,
        hash: gen.hash(),
    };
    Ok((gen, manifest))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
