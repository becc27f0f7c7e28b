//! Named parameter storage that outlives the per-step tape.
//!
//! Layers hold [`ParamId`] handles; before each forward pass the store is
//! bound onto a fresh tape as leaves ([`ParamStore::bind`]) and gradients are
//! collected back after `backward`. Non-trainable entries carry persistent
//! layer state (spectral-norm power-iteration vectors) so checkpointing and
//! exact resume fall out of one serialization path.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use fargan_tensor::{Tape, TensorId};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamEntry {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Ordered collection of named tensors owned by one network.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> ParamId {
        self.insert(name, data, shape, true)
    }

    /// Persistent but non-trainable state (ignored by optimizers).
    pub fn add_state(&mut self, name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> ParamId {
        self.insert(name, data, shape, false)
    }

    fn insert(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: &[usize],
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            data,
            shape: shape.to_vec(),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].data
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Replace entry data by name, checking shapes. Used by weight import.
    pub fn load_named(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if e.shape != shape {
            return Err(Error::config(format!(
                "parameter `{name}` has shape {:?}, file provides {:?}",
                e.shape, shape
            )));
        }
        e.data = data;
        Ok(())
    }

    /// Push every entry onto `tape` as a leaf, in store order.
    /// `trainable` gates gradient tracking for the whole binding; entries
    /// flagged non-trainable never require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                tape.leaf(e.data.clone(), &e.shape, trainable && e.trainable)
                    .expect("stored shape always matches data")
            })
            .collect();
        Binding { ids }
    }

    /// Gradients for every entry after a backward pass (`None` when the
    /// entry was not part of the graph or is non-trainable).
    pub fn collect_grads(&self, tape: &Tape, binding: &Binding) -> Vec<Option<Vec<f64>>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, _)| tape.grad(binding.ids[i]).map(<[f64]>::to_vec))
            .collect()
    }
}

/// Tape leaves for one bound store, aligned with entry order.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }
}

/// He-style normal init for convolution weights.
pub fn conv_init(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| gaussian(rng) * std).collect()
}

/// Standard normal draw on the caller's stream.
pub fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Splitmix-style stream derivation so independent consumers (noise, data
/// sampling, init) never share a raw seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fargan_tensor::DType;
    use rand::SeedableRng;

    #[test]
    fn bind_and_collect_roundtrip() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![1.0, 2.0], &[2]);
        let state = store.add_state("u", vec![0.5], &[1]);

        let mut tape = Tape::new(DType::F64);
        let b = store.bind(&mut tape, true);
        assert!(tape.requires_grad(b.get(w)));
        assert!(!tape.requires_grad(b.get(state)));

        let x = b.get(w);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let grads = store.collect_grads(&tape, &b);
        assert_eq!(grads[0].as_deref().unwrap(), &[2.0, 4.0]);
        assert!(grads[1].is_none());
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(17, 1);
        let b = derive_seed(17, 2);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(17, 1));
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..20_000).map(|_| gaussian(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
