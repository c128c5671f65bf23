//! Dense feed-forward networks built on [`Graph`].
//!
//! Layers are affine maps separated by rectifiers; the last layer is followed
//! by an optional sigmoid. The activation feeding the last layer is exposed as
//! the network's feature embedding.

use std::path::Path;

use ndarray::{concatenate, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Tensor, Var};

const MAGIC: &[u8; 4] = b"D2L1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `[inputs, outputs]`
    pub weight: Tensor,
    /// `[1, outputs]`
    pub bias: Tensor,
}

impl Affine {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Tensor::from_shape_simple_fn((inputs, outputs), || dist.sample(rng)),
            bias: Tensor::from_shape_simple_fn((1, outputs), || dist.sample(rng)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros((inputs, outputs)),
            bias: Tensor::zeros((1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Affine>,
    output: OutputActivation,
}

/// Parameters of an [`Mlp`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<(Var, Var)>,
    output: OutputActivation,
}

impl BoundMlp {
    /// Returns `(output, features)`; features is the activation feeding the
    /// final affine layer.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<(Var, Var)> {
        let mut h = input;
        let mut features = input;
        let last = self.params.len() - 1;
        for (i, &(w, b)) in self.params.iter().enumerate() {
            if i == last {
                features = h;
            }
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i != last {
                h = g.relu(h);
            }
        }
        if self.output == OutputActivation::Sigmoid {
            h = g.sigmoid(h);
        }
        Ok((h, features))
    }

    /// Parameter gradients in the order of [`Mlp::params_mut`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .flat_map(|&(w, b)| [grads.get(w), grads.get(b)])
            .collect()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.params.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Mlp {
    /// `sizes` lists layer widths from input to output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs an input and an output width");
        let layers = sizes.windows(2).map(|w| Affine::init(w[0], w[1], rng)).collect();
        Self { layers, output }
    }

    pub fn from_layers(layers: Vec<Affine>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        for l in &layers {
            if l.bias.dim() != (1, l.outputs()) {
                return Err(Error::shape("bias width differs from layer output"));
            }
        }
        Ok(Self { layers, output })
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").inputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.leaf(l.weight.clone()), g.leaf(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp {
            params,
            output: self.output,
        }
    }

    /// Inference pass returning `(outputs, features)`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "batch width {} for network input {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let (out, features) = bound.forward(&mut g, x)?;
        g.check_finite()?;
        Ok((g.value(out).clone(), g.value(features).clone()))
    }

    /// Appends `count` output units. New weights and biases are drawn from
    /// normals whose mean and standard deviation match the existing output
    /// layer.
    pub fn append_outputs<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<()> {
        let last = self.layers.last_mut().expect("non-empty");
        if last.weight.is_empty() {
            return Err(Error::invalid("cannot derive statistics from an empty output layer"));
        }
        let stats = |t: &Tensor| {
            let mean = t.mean().unwrap_or(0.0);
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
            (mean, var.sqrt())
        };
        let (wm, ws) = stats(&last.weight);
        let (bm, bs) = stats(&last.bias);
        let wdist = Normal::new(wm, ws).map_err(|e| Error::invalid(e.to_string()))?;
        let bdist = Normal::new(bm, bs).map_err(|e| Error::invalid(e.to_string()))?;
        let new_w = Tensor::from_shape_simple_fn((last.inputs(), count), || wdist.sample(rng));
        let new_b = Tensor::from_shape_simple_fn((1, count), || bdist.sample(rng));
        last.weight =
            concatenate(Axis(1), &[last.weight.view(), new_w.view()]).map_err(|e| Error::shape(e.to_string()))?;
        last.bias = concatenate(Axis(1), &[last.bias.view(), new_b.view()]).map_err(|e| Error::shape(e.to_string()))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_layers(&mut out, &self.layers);
        out
    }

    pub fn from_bytes(bytes: &[u8], output: OutputActivation) -> Result<Self> {
        let mut cursor = bytes;
        let layers = read_layers(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cursor.len())));
        }
        Self::from_layers(layers, output)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, output: OutputActivation) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?, output)
    }

    /// SHA-256 of the checkpoint encoding, hex encoded.
    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Appends one checkpoint block: magic `D2L1`, `u32` version, `u32` layer
/// count, then per layer `u32` inputs, `u32` outputs, the row-major weight
/// matrix and the bias row as `f64`. Everything little-endian.
pub fn write_layers(out: &mut Vec<u8>, layers: &[Affine]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
        for v in l.weight.iter().chain(l.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn take<'a>(cursor: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cursor.len() < n {
        return Err(Error::Checkpoint("unexpected end of data".into()));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

pub(crate) fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().expect("4 bytes")))
}

pub(crate) fn read_f64s(cursor: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let raw = take(
        cursor,
        n.checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
    )?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Reads one block written by [`write_layers`], advancing `cursor`.
pub fn read_layers(cursor: &mut &[u8]) -> Result<Vec<Affine>> {
    if take(cursor, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(cursor)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(cursor)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let inputs = read_u32(cursor)? as usize;
        let outputs = read_u32(cursor)? as usize;
        let weight = read_f64s(cursor, inputs * outputs)?;
        let bias = read_f64s(cursor, outputs)?;
        let weight = Tensor::from_shape_vec((inputs, outputs), weight).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bias = Tensor::from_shape_vec((1, outputs), bias).map_err(|e| Error::Checkpoint(e.to_string()))?;
        layers.push(Affine { weight, bias });
    }
    Ok(layers)
}

/// The continual classifier: `input -> 128 -> 64 -> heads` by default.
pub fn classifier<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], head_width: usize, rng: &mut R) -> Mlp {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(head_width);
    Mlp::new(&sizes, OutputActivation::Identity, rng)
}

pub const DEFAULT_CLASSIFIER_HIDDEN: [usize; 2] = [128, 64];

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Mlp::from_layers(
            vec![Affine::zeros(4, 3), Affine::zeros(3, 2)],
            OutputActivation::Identity,
        )
        .unwrap();
        let (out, feats) = net.forward(&array![[1.0, -2.0, 3.0, 0.5]]).unwrap();
        assert_eq!(out, Tensor::zeros((1, 2)));
        assert_eq!(feats.dim(), (1, 3));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Affine {
            weight: Tensor::eye(3),
            bias: Tensor::zeros((1, 3)),
        };
        let net = Mlp::from_layers(vec![layer], OutputActivation::Identity).unwrap();
        let v = array![[0.25, -4.0, 9.5]];
        assert_eq!(net.forward(&v).unwrap().0, v);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = classifier(144, &DEFAULT_CLASSIFIER_HIDDEN, 16, &mut rng);
        let x = Tensor::from_shape_fn((5, 144), |(i, j)| ((i * 31 + j) % 17) as f64 / 17.0);
        let (a, fa) = net.forward(&x).unwrap();
        let (b, fb) = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(a.dim(), (5, 16));
        assert_eq!(fa.dim(), (5, 64));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = classifier(10, &[4], 2, &mut rng);
        assert!(matches!(net.forward(&Tensor::zeros((1, 9))), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = classifier(6, &[5, 4], 3, &mut rng);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"D2L1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let back = Mlp::from_bytes(&bytes, OutputActivation::Identity).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.hash(), net.hash());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Mlp::from_bytes(&bad, OutputActivation::Identity).is_err());
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 3], OutputActivation::Identity).is_err());
    }

    #[test]
    fn appended_outputs_follow_existing_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = classifier(8, &[64], 10, &mut rng);
        net.append_outputs(400, &mut rng).unwrap();
        assert_eq!(net.output_dim(), 410);
        let w = &net.layers()[1].weight;
        let old = w.slice(ndarray::s![.., ..10]);
        let new = w.slice(ndarray::s![.., 10..]);
        let mean = |v: &ndarray::ArrayView2<f64>| v.mean().unwrap();
        assert!((mean(&old) - mean(&new)).abs() < 0.02);
    }
}
