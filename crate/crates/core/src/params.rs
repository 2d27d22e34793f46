//! Named, ordered collection of learnable tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    PosEmbed,
    MaskToken,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            tensor: tensor.with_requires_grad(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Replaces the values of parameter `id`, keeping its shape.
    pub fn assign(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if values.len() != entry.tensor.numel() {
            return Err(Error::Shape(format!(
                "assigning {} values to `{}` of shape {:?}",
                values.len(),
                entry.name,
                entry.tensor.shape()
            )));
        }
        entry.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Copies values for every parameter whose name and shape match an entry
    /// of `source`. Returns the names that were copied.
    pub fn load_matching<'a>(
        &mut self,
        source: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        let mut mismatched = Vec::new();
        for (name, t) in source {
            if let Some(id) = self.find(name) {
                let dst = &self.entries[id.0].tensor;
                if dst.shape() != t.shape() {
                    mismatched.push(format!("{name}: expected {:?}, found {:?}", dst.shape(), t.shape()));
                    continue;
                }
                self.assign(id, t.data())?;
                loaded.push(name.to_string());
            }
        }
        if !mismatched.is_empty() {
            return Err(Error::Load(format!("shape mismatch for {}", mismatched.join("; "))));
        }
        Ok(loaded)
    }
}

/// Truncated normal initialization at ±2σ, the usual ViT scheme.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("numel matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn load_matching_reports_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Weight, Tensor::zeros(&[2, 2]));
        let other = Tensor::zeros(&[3]);
        let err = store.load_matching([("w", &other)]).unwrap_err();
        assert!(err.to_string().contains("w: expected [2, 2]"));
    }
}
