use crate::error::{Error, Result};

/// Handle to one named block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the flat value buffer, in elements.
    pub offset: usize,
    pub len: usize,
}

impl BlockInfo {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter storage with a parallel gradient buffer and Adam moments.
///
/// Every block lives in one contiguous `values` vector so that gradient
/// checks, optimizer updates and checkpoints can treat the whole model as a
/// single vector. Gradients accumulate until [`ParamStore::zero_grads`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<BlockInfo>,
    values: Vec<f64>,
    grads: Vec<f64>,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    pub(crate) steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> Result<BlockId> {
        let name = name.into();
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::config(format!("duplicate parameter block `{name}`")));
        }
        let len: usize = shape.iter().product();
        if len == 0 {
            return Err(Error::config(format!("parameter block `{name}` is empty")));
        }
        let offset = self.values.len();
        self.values.extend((0..len).map(|_| init()));
        self.grads.resize(offset + len, 0.0);
        self.first_moment.resize(offset + len, 0.0);
        self.second_moment.resize(offset + len, 0.0);
        self.blocks.push(BlockInfo {
            name,
            shape: shape.to_vec(),
            offset,
            len,
        });
        Ok(BlockId(self.blocks.len() - 1))
    }

    pub fn block(&self, id: BlockId) -> &BlockInfo {
        &self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block_values(&self, id: BlockId) -> &[f64] {
        &self.values[self.blocks[id.0].range()]
    }

    pub fn block_values_mut(&mut self, id: BlockId) -> &mut [f64] {
        let r = self.blocks[id.0].range();
        &mut self.values[r]
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn block_grads(&self, id: BlockId) -> &[f64] {
        &self.grads[self.blocks[id.0].range()]
    }

    /// Splits into read-only values and the mutable gradient buffer, which
    /// is what a backward pass needs.
    pub fn values_and_grads_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// A zeroed buffer with the same layout as the gradient buffer.
    pub fn grad_buffer(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// `grads += scale * other`
    pub fn accumulate_grads(&mut self, other: &[f64], scale: f64) {
        assert_eq!(other.len(), self.grads.len(), "gradient layout mismatch");
        for (g, o) in self.grads.iter_mut().zip(other) {
            *g += scale * o;
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| *g *= s);
    }

    /// Number of optimizer steps applied so far.
    pub fn optimizer_steps(&self) -> u64 {
        self.steps
    }

    /// Clears gradients, Adam moments and the step counter so a new
    /// optimization phase starts from the current values.
    pub fn reset_optimizer(&mut self) {
        self.zero_grads();
        self.first_moment.iter_mut().for_each(|m| *m = 0.0);
        self.second_moment.iter_mut().for_each(|m| *m = 0.0);
        self.steps = 0;
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Same block names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.blocks == other.blocks
    }

    /// Replaces all values, keeping the layout. Used when loading checkpoints.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: store has {}, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn from_parts(blocks: Vec<BlockInfo>, values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            blocks,
            values,
            grads: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }
}
