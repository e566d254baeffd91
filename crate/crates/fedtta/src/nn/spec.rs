use crate::{Error, Result};

/// Shape of the classifier: input width plus one width per hidden block.
///
/// Every hidden block is `Dense -> BatchNorm -> ReLU`; the head is a
/// single-unit `Dense -> Sigmoid`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input_dim: usize,
    hidden_dims: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if hidden_dims.is_empty() {
            return Err(Error::InvalidSpec(
                "at least one hidden block is required".into(),
            ));
        }
        if let Some(&bad) = hidden_dims.iter().find(|&&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "hidden widths must be positive, got {bad}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    /// Fan-in of each dense layer, hidden blocks first, head last.
    pub fn fan_ins(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims
    }
}
