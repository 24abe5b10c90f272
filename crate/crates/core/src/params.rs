//! Named parameter sets stored as one flat vector in name order.

use std::collections::BTreeMap;

use irkd_autograd::{Gradients, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

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

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameters laid out contiguously, sorted by name. The layout is the
/// flattening order used for gradient inner products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl ParamSet {
    /// Zero-initialised set with the given named shapes.
    pub fn zeros(shapes: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut sorted: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (name, shape) in shapes {
            if sorted.insert(name.clone(), shape).is_some() {
                return Err(Error::Config(format!("duplicate parameter name '{name}'")));
            }
        }
        let mut offset = 0;
        let specs: Vec<ParamSpec> = sorted
            .into_iter()
            .map(|(name, shape)| {
                let s = ParamSpec {
                    name,
                    shape,
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        Ok(Self {
            specs,
            values: vec![0.0; offset],
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn spec(&self, name: &str) -> Result<&ParamSpec> {
        self.specs
            .binary_search_by(|s| s.name.as_str().cmp(name))
            .map(|i| &self.specs[i])
            .map_err(|_| Error::State(format!("no parameter named '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.spec(name).is_ok()
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let r = self.spec(name)?.range();
        Ok(&self.values[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.spec(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let s = self.spec(name)?;
        Ok(Tensor::new(&s.shape, self.values[s.range()].to_vec()))
    }

    /// Replace all values, keeping the layout.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {}",
                values.len(),
                self.values.len()
            )));
        }
        self.values = values;
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.specs == other.specs
    }

    /// Put every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .specs
            .iter()
            .map(|s| {
                let t = Tensor::new(&s.shape, self.values[s.range()].to_vec());
                let v = if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                };
                (s.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Flat gradient in layout order; disconnected parameters get zeros.
    pub fn gradient(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for s in &self.specs {
            if let Some(g) = bound.vars.get(&s.name).and_then(|v| grads.get(*v)) {
                out[s.range()].copy_from_slice(g.data());
            }
        }
        out
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of one [`ParamSet`] placed on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Node of a parameter. Names come from the model's own layout, so a
    /// missing name is a programming error.
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
