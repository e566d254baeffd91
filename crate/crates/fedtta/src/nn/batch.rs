use ndarray::{Array1, Array2};

use crate::{Error, Result};

/// A minibatch: `n x d` features and, when training, n labels in {0, 1}
/// (1 = real face, 0 = presentation attack).
#[derive(Debug, Clone)]
pub struct Batch {
    x: Array2<f64>,
    y: Option<Array1<f64>>,
}

impl Batch {
    pub fn labeled(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidLabel(bad));
        }
        Self::validate_features(&x)?;
        Ok(Self { x, y: Some(y) })
    }

    pub fn unlabeled(x: Array2<f64>) -> Result<Self> {
        Self::validate_features(&x)?;
        Ok(Self { x, y: None })
    }

    fn validate_features(x: &Array2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("batch has no rows".into()));
        }
        if x.ncols() == 0 {
            return Err(Error::EmptyInput("batch has no feature columns".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Labels, or an error for an unlabeled batch.
    pub fn labels(&self) -> Result<&Array1<f64>> {
        self.y
            .as_ref()
            .ok_or_else(|| Error::EmptyInput("batch carries no labels".into()))
    }
}
