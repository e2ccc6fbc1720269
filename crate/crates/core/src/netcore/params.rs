use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Index of a named block inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot(pub(crate) usize, pub(crate) usize);

impl Slot {
    #[inline]
    pub fn get<'a>(&self, flat: &'a [f64]) -> &'a [f64] {
        &flat[self.0..self.0 + self.1]
    }

    #[inline]
    pub fn get_mut<'a>(&self, flat: &'a mut [f64]) -> &'a mut [f64] {
        &mut flat[self.0..self.0 + self.1]
    }

    pub fn range(&self) -> Range<usize> {
        self.0..self.0 + self.1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += len;
        self.specs.push(spec);
        Slot(self.total - len, len)
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Name of the block that owns flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&str> {
        self.specs.iter().find(|s| s.range().contains(&i)).map(|s| s.name.as_str())
    }
}

/// Every learnable array of the model, stored in one flat vector so the
/// optimizer, checkpointing and gradient checks treat them uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total];
        Self { layout, values }
    }

    pub fn named(&self) -> BTreeMap<&str, &[f64]> {
        self.layout
            .specs
            .iter()
            .map(|s| (s.name.as_str(), &self.values[s.range()]))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn fill_normal<R: Rng + ?Sized>(dst: &mut [f64], std: f64, rng: &mut R) {
    for v in dst {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * z;
    }
}
