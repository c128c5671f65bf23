//! Bounded rehearsal buffer filled by reservoir sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::synth::SampleBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    Dream,
}

/// An item offered to the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Offer<'a> {
    pub image: &'a [f64],
    pub label: usize,
    pub origin: Origin,
}

impl<'a> Offer<'a> {
    pub fn real(image: &'a [f64], label: usize) -> Self {
        Self {
            image,
            label,
            origin: Origin::Real,
        }
    }
}

/// Generator conditioning images drawn from the buffer. Carries no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    width: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, width: usize) -> Self {
        Self {
            capacity,
            width,
            images: Vec::with_capacity(capacity),
            labels: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Offers one item. Returns the slot it was written to, if any.
    pub fn reservoir_insert<R: Rng + ?Sized>(&mut self, item: Offer<'_>, rng: &mut R) -> Result<Option<usize>> {
        if item.origin != Origin::Real {
            return Err(Error::DreamInBuffer);
        }
        if item.image.len() != self.width {
            return Err(Error::shape(format!(
                "image of {} pixels for a buffer of width {}",
                item.image.len(),
                self.width
            )));
        }
        self.seen += 1;
        if self.capacity == 0 {
            return Ok(None);
        }
        if self.images.len() < self.capacity {
            self.images.push(item.image.to_vec());
            self.labels.push(item.label);
            return Ok(Some(self.images.len() - 1));
        }
        let j = rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            let j = j as usize;
            self.images[j].copy_from_slice(item.image);
            self.labels[j] = item.label;
            Ok(Some(j))
        } else {
            Ok(None)
        }
    }

    fn draw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        if count == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok((0..count).map(|_| rng.random_range(0..self.len())).collect())
    }

    fn gather(&self, idx: &[usize]) -> Tensor {
        Tensor::from_shape_fn((idx.len(), self.width), |(r, c)| self.images[idx[r]][c])
    }

    /// Uniform draw with replacement over stored items.
    pub fn sample_rehearsal<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<SampleBatch> {
        let idx = self.draw(batch_size, rng)?;
        Ok(SampleBatch {
            images: self.gather(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Stored images only, for use as generator conditions.
    pub fn sample_conditions<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Conditions> {
        let idx = self.draw(count, rng)?;
        Ok(Conditions(self.gather(&idx)))
    }

    /// Encoding: magic `D2LB`, `u32` version 1, `u64` capacity, `u64` seen
    /// count, `u32` width, `u32` stored count, then per item `u32` label and
    /// `width` `f64` pixels. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"D2LB");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&self.seen.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (img, &label) in self.images.iter().zip(&self.labels) {
            out.extend_from_slice(&(label as u32).to_le_bytes());
            for v in img {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("buffer: {m}"));
        if bytes.len() < 32 || &bytes[..4] != b"D2LB" {
            return Err(bad("bad header"));
        }
        let mut cur = &bytes[4..];
        if crate::nn::read_u32(&mut cur)? != 1 {
            return Err(bad("unsupported version"));
        }
        let u64_at = |c: &mut &[u8]| -> u64 {
            let v = u64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            *c = &c[8..];
            v
        };
        let capacity = u64_at(&mut cur) as usize;
        let seen = u64_at(&mut cur);
        let width = crate::nn::read_u32(&mut cur)? as usize;
        let count = crate::nn::read_u32(&mut cur)? as usize;
        if count > capacity || count as u64 > seen {
            return Err(bad("stored count exceeds capacity or seen count"));
        }
        let mut buf = Self::new(capacity, width);
        buf.seen = seen;
        for _ in 0..count {
            buf.labels.push(crate::nn::read_u32(&mut cur)? as usize);
            buf.images.push(crate::nn::read_f64s(&mut cur, width)?);
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(buf)
    }
}
