use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a named tensor inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat storage of every trainable real of one model, with a parallel
/// gradient buffer.
///
/// Values are kept representable in single precision: initialization and
/// every optimizer step round them through `f32`, so a checkpoint written as
/// raw 32-bit reals restores the exact in-memory state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
    grads: Vec<f64>,
    trainable: bool,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn round_single(v: f64) -> f64 {
    v as f32 as f64
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            trainable: true,
        }
    }

    /// Registers a tensor, filling it from `init`.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> ParamId {
        let offset = self.values.len();
        self.specs.push(ParamSpec {
            name: name.to_string(),
            rows,
            cols,
            offset,
        });
        self.values.extend((0..rows * cols).map(|_| round_single(init())));
        self.grads.resize(self.values.len(), 0.0);
        ParamId(self.specs.len() - 1)
    }

    pub fn add_constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, rows, cols, || value)
    }

    /// Uniform init with the given standard deviation.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let bound = std * 3f64.sqrt();
        self.add(name, rows, cols, || {
            if bound == 0.0 {
                0.0
            } else {
                rng.gen_range(-bound..bound)
            }
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let s = &self.specs[id.0];
        Tensor::from_parts(s.rows, s.cols, self.values[s.offset..s.offset + s.len()].to_vec())
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        let span = s.offset..s.offset + s.len();
        &mut self.values[span]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `flat` (laid out like this store) into the gradient buffer.
    pub fn accumulate_grads(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.grads.len() {
            return Err(Error::shape(
                "accumulate_grads",
                format!("{} values for store of {}", flat.len(), self.grads.len()),
            ));
        }
        for (g, f) in self.grads.iter_mut().zip(flat) {
            *g += f;
        }
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Marks the store as a constant source: tape leaves carry no gradient.
    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to single precision.
    pub fn round_to_single(&mut self) {
        self.values.iter_mut().for_each(|v| *v = round_single(*v));
    }

    /// Replaces the contents of a named tensor; used by checkpoint loading.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let dst = self.slice_mut(id);
        if dst.len() != data.len() {
            return Err(Error::shape("set", format!("{} values into {}", data.len(), dst.len())));
        }
        dst.copy_from_slice(data);
        Ok(())
    }
}
