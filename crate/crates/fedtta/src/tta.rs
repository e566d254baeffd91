//! Test-time adaptation on an unlabeled stream.
//!
//! The deployed model sees batches of raw features only. Each batch is
//! normalized with its own statistics, and the batch-norm affine parameters
//! are nudged to minimize the mean prediction entropy. Everything else,
//! dense layers and running statistics alike, stays bitwise untouched.

use ndarray::{Array1, Array2};

use crate::nn::{
    adam_step, backward, entropy_loss, forward, AdamState, Batch, ForwardMode, NetworkSpec,
    Parameters,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtaMode {
    /// Parameter and optimizer state carry over from batch to batch.
    Online,
    /// Every batch restarts from the source model.
    Episodic,
}

#[derive(Debug, Clone)]
pub struct TtaConfig {
    pub lr: f64,
    /// Gradient steps taken on each batch. Zero disables adaptation.
    pub steps_per_batch: usize,
    /// Batch size callers should slice the stream into.
    pub adapt_batch_size: usize,
    pub mode: TtaMode,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            steps_per_batch: 1,
            adapt_batch_size: 64,
            mode: TtaMode::Online,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "adaptation learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.adapt_batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "adaptation batch size must be at least 2, got {}",
                self.adapt_batch_size
            )));
        }
        Ok(())
    }
}

/// One gradient step's effect, for logging.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub batch_index: usize,
    pub step: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub params: Parameters,
    pub trace: Vec<TraceStep>,
}

impl Adaptation {
    pub fn trace_lines(&self) -> Vec<String> {
        self.trace
            .iter()
            .map(|t| {
                format!(
                    "batch {} step {} entropy {:.6} -> {:.6} delta {:.6}",
                    t.batch_index, t.step, t.entropy_before, t.entropy_after, t.delta_norm
                )
            })
            .collect()
    }
}

fn batch_entropy(params: &Parameters, spec: &NetworkSpec, batch: &Batch) -> Result<f64> {
    let pass = forward(params, spec, batch, ForwardMode::AdaptBatchStats)?;
    Ok(entropy_loss(&pass.probs)?.0)
}

/// Adapts `source` to the stream. No labels are accepted anywhere in this
/// path. With `steps_per_batch` 0 the source model is returned bitwise
/// unchanged and the trace is empty.
pub fn adapt(
    source: &Parameters,
    spec: &NetworkSpec,
    stream: &[Array2<f64>],
    cfg: &TtaConfig,
) -> Result<Adaptation> {
    cfg.validate()?;
    source.check_spec(spec)?;
    if stream.is_empty() {
        return Err(Error::EmptyInput("adaptation stream has no batches".into()));
    }
    for (i, b) in stream.iter().enumerate() {
        if b.nrows() < 2 {
            return Err(Error::BatchTooSmall {
                got: b.nrows(),
                need: 2,
            });
        }
        if b.ncols() != spec.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "stream batch {i} has {} features, network expects {}",
                b.ncols(),
                spec.input_dim()
            )));
        }
    }
    if cfg.steps_per_batch == 0 {
        return Ok(Adaptation {
            params: source.clone(),
            trace: Vec::new(),
        });
    }

    let mask = source.affine_mask();
    let mut params = source.clone();
    let mut adam = AdamState::new(&params);
    let mut trace = Vec::new();

    for (batch_index, x) in stream.iter().enumerate() {
        if cfg.mode == TtaMode::Episodic {
            params = source.clone();
            adam = AdamState::new(&params);
        }
        let batch = Batch::unlabeled(x.clone())?;
        for step in 0..cfg.steps_per_batch {
            let pass = forward(&params, spec, &batch, ForwardMode::AdaptBatchStats)?;
            let (entropy_before, dloss) = entropy_loss(&pass.probs)?;
            let grads = backward(&params, spec, &pass.cache, &dloss)?;
            let (next, next_adam) = adam_step(&params, &grads, &adam, cfg.lr, Some(&mask))?;
            let delta_norm = next
                .to_flat()
                .iter()
                .zip(params.to_flat().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            params = next;
            adam = next_adam;
            let entropy_after = batch_entropy(&params, spec, &batch)?;
            trace.push(TraceStep {
                batch_index,
                step,
                entropy_before,
                entropy_after,
                delta_norm,
            });
        }
    }

    Ok(Adaptation { params, trace })
}

/// Which normalization statistics scoring uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    /// Stored running statistics; works for any batch size.
    Running,
    /// Statistics of the scored batch itself; needs at least two rows.
    Batch,
}

/// Scores a feature matrix, returning realness probabilities.
pub fn predict(
    params: &Parameters,
    spec: &NetworkSpec,
    x: &Array2<f64>,
    stats: StatsSource,
) -> Result<Array1<f64>> {
    let mode = match stats {
        StatsSource::Running => ForwardMode::Eval,
        StatsSource::Batch => ForwardMode::AdaptBatchStats,
    };
    let batch = Batch::unlabeled(x.clone())?;
    Ok(forward(params, spec, &batch, mode)?.probs)
}
