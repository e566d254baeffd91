use ndarray::{Array1, Array2, Axis};

use super::{clamp_prob, Batch, LayerParams, NetworkSpec, Parameters, BN_EPS, BN_MOMENTUM};
use crate::{Error, Result};

/// Which statistics batch-norm layers use.
///
/// `Train` and `AdaptBatchStats` both normalize with statistics of the current
/// batch; only `Train` also writes new running statistics into the pass
/// output. `Eval` uses the stored running statistics and touches nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
    AdaptBatchStats,
}

impl ForwardMode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, ForwardMode::Train | ForwardMode::AdaptBatchStats)
    }
}

/// Exponentially averaged statistics for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Everything backward needs about one hidden block.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub std: Array1<f64>,
    pub x_hat: Array2<f64>,
    pub y_affine: Array2<f64>,
}

/// Intermediate activations of one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: ForwardMode,
    pub n: usize,
    pub blocks: Vec<BlockCache>,
    pub head_input: Array2<f64>,
    pub p_raw: Array1<f64>,
}

/// Output of [`forward`]: clamped probabilities of the real class, the cache
/// for backprop, and (Train mode only) the updated running statistics.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probs: Array1<f64>,
    pub cache: ForwardCache,
    pub updated_running_stats: Option<Vec<RunningStats>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn batch_stats(z: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = z.mean_axis(Axis(0)).expect("batch validated nonempty");
    let var = z.var_axis(Axis(0), 0.0);
    (mean, var)
}

/// One pass through the network. Pure: callers commit Train-mode running
/// statistics explicitly via [`Parameters::set_running_stats`].
pub fn forward(
    params: &Parameters,
    spec: &NetworkSpec,
    batch: &Batch,
    mode: ForwardMode,
) -> Result<ForwardPass> {
    params.check_spec(spec)?;
    let x = batch.features();
    if x.ncols() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, spec expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    let n = x.nrows();
    if mode.uses_batch_stats() && n < 2 {
        return Err(Error::BatchTooSmall { got: n, need: 2 });
    }

    let mut act = x.to_owned();
    let mut blocks = Vec::new();
    let mut updated = if mode == ForwardMode::Train {
        Some(Vec::new())
    } else {
        None
    };

    let layers = params.layers();
    let hidden = (layers.len() - 1) / 2;
    for b in 0..hidden {
        let (weight, bias) = match &layers[2 * b] {
            LayerParams::Dense { weight, bias } => (weight, bias),
            _ => unreachable!("dense layers sit at even indices"),
        };
        let (gamma, beta, running_mean, running_var) = match &layers[2 * b + 1] {
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => (gamma, beta, running_mean, running_var),
            _ => unreachable!("batch-norm layers sit at odd indices"),
        };

        let z = act.dot(&weight.t()) + bias;
        let (mean, var) = if mode.uses_batch_stats() {
            batch_stats(&z)
        } else {
            (running_mean.clone(), running_var.clone())
        };
        if let Some(stats) = updated.as_mut() {
            stats.push(RunningStats {
                mean: running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM,
                var: running_var * (1.0 - BN_MOMENTUM) + &var * BN_MOMENTUM,
            });
        }
        let std = var.mapv(|v| (v + BN_EPS).sqrt());
        let x_hat = (&z - &mean) / &std;
        let y_affine = &x_hat * gamma + beta;
        let out = y_affine.mapv(|v| v.max(0.0));
        blocks.push(BlockCache {
            x_in: act,
            mean,
            var,
            std,
            x_hat,
            y_affine,
        });
        act = out;
    }

    let (head_w, head_b) = match layers.last().expect("head layer present") {
        LayerParams::Dense { weight, bias } => (weight, bias),
        _ => unreachable!("head is a dense layer"),
    };
    let z_out = act.dot(&head_w.t()) + head_b;
    let p_raw = z_out.column(0).mapv(sigmoid);
    let probs = p_raw.mapv(clamp_prob);

    Ok(ForwardPass {
        probs,
        cache: ForwardCache {
            mode,
            n,
            blocks,
            head_input: act,
            p_raw,
        },
        updated_running_stats: updated,
    })
}

impl Parameters {
    /// Commit Train-mode running statistics, one entry per batch-norm layer.
    pub fn set_running_stats(&mut self, stats: &[RunningStats]) -> Result<()> {
        let bn_count = self
            .layers()
            .iter()
            .filter(|l| matches!(l, LayerParams::BatchNorm { .. }))
            .count();
        if stats.len() != bn_count {
            return Err(Error::ShapeMismatch(format!(
                "{} stat entries for {} batch-norm layers",
                stats.len(),
                bn_count
            )));
        }
        let mut next = stats.iter();
        for layer in self.layers_mut() {
            if let LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                let s = next.next().expect("count checked above");
                if s.mean.len() != running_mean.len() || s.var.len() != running_var.len() {
                    return Err(Error::ShapeMismatch(
                        "running statistics width mismatch".into(),
                    ));
                }
                running_mean.assign(&s.mean);
                running_var.assign(&s.var);
            }
        }
        Ok(())
    }
}
