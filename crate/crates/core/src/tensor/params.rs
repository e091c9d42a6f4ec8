use ndarray::Array2;

use crate::error::{Error, Result};

/// Index of a named block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

/// Ordered collection of named parameter matrices. Bias vectors are stored as
/// `1 × n` blocks. Gradients use a store of identical layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> BlockId {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter block `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        BlockId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: BlockId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: BlockId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: BlockId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn index_of(&self, name: &str) -> Option<BlockId> {
        self.names.iter().position(|n| n == name).map(BlockId)
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.values.len()).map(BlockId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (BlockId(i), n.as_str(), v))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Array2::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self, ids: &[BlockId]) -> bool {
        ids.iter()
            .all(|&id| self.values[id.0].iter().all(|x| x.is_finite()))
    }

    /// Overwrites every block of `self` with the block of the same name in
    /// `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let id = other
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
            let src = other.get(id);
            if src.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` has shape {:?}, expected {:?}",
                    src.dim(),
                    value.dim()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }
}
