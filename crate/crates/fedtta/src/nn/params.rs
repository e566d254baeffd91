use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::NetworkSpec;
use crate::{Error, Result};

/// Role of one entry in the canonical flat layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    DenseWeight,
    DenseBias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    /// Running statistics are state, not trainable parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }

    pub fn affine(self) -> bool {
        matches!(self, TensorKind::Gamma | TensorKind::Beta)
    }
}

/// One layer's arrays. Dense weights are `out x in`, row-major.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Dense {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
    },
}

impl LayerParams {
    fn entry_count(&self) -> usize {
        match self {
            LayerParams::Dense { weight, bias } => weight.len() + bias.len(),
            LayerParams::BatchNorm { gamma, .. } => 4 * gamma.len(),
        }
    }
}

/// All parameters of one network in a fixed order: per hidden block
/// `weight, bias, gamma, beta, running_mean, running_var`, then the head's
/// `weight, bias`. The affine mask is true exactly on gamma/beta entries and
/// is derived from that layout, so it can never drift out of sync.
#[derive(Debug, Clone)]
pub struct Parameters {
    layers: Vec<LayerParams>,
}

/// Gradients mirror [`Parameters`] array for array; running-statistic slots
/// are always zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<LayerParams>,
}

/// Per-entry boolean mask over the canonical flat layout.
#[derive(Debug, Clone)]
pub struct ParamMask(pub(crate) Vec<bool>);

impl ParamMask {
    /// True exactly on gamma and beta entries.
    pub fn affine(params: &Parameters) -> Self {
        ParamMask(params.entry_kinds().iter().map(|k| k.affine()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn true_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// A named array view used by the checkpoint container.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn layer_names(index: usize, layer: &LayerParams) -> Vec<(String, TensorKind)> {
    match layer {
        LayerParams::Dense { .. } => {
            let stem = if index.is_multiple_of(2) {
                format!("dense{}", index / 2)
            } else {
                unreachable!("dense layers sit at even indices")
            };
            vec![
                (format!("{stem}.weight"), TensorKind::DenseWeight),
                (format!("{stem}.bias"), TensorKind::DenseBias),
            ]
        }
        LayerParams::BatchNorm { .. } => {
            let stem = format!("bn{}", index / 2);
            vec![
                (format!("{stem}.gamma"), TensorKind::Gamma),
                (format!("{stem}.beta"), TensorKind::Beta),
                (format!("{stem}.running_mean"), TensorKind::RunningMean),
                (format!("{stem}.running_var"), TensorKind::RunningVar),
            ]
        }
    }
}

impl Parameters {
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Structural template with every entry zero.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut layers = Vec::new();
        let fan = spec.fan_ins();
        for (i, &h) in spec.hidden_dims().iter().enumerate() {
            layers.push(LayerParams::Dense {
                weight: Array2::zeros((h, fan[i])),
                bias: Array1::zeros(h),
            });
            layers.push(LayerParams::BatchNorm {
                gamma: Array1::zeros(h),
                beta: Array1::zeros(h),
                running_mean: Array1::zeros(h),
                running_var: Array1::zeros(h),
            });
        }
        let last = *spec.hidden_dims().last().expect("validated nonempty");
        layers.push(LayerParams::Dense {
            weight: Array2::zeros((1, last)),
            bias: Array1::zeros(1),
        });
        Self { layers }
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().map(|l| l.entry_count()).sum()
    }

    /// Entry kinds in canonical order, one per flat entry.
    pub fn entry_kinds(&self) -> Vec<TensorKind> {
        let mut kinds = Vec::with_capacity(self.entry_count());
        for layer in &self.layers {
            match layer {
                LayerParams::Dense { weight, bias } => {
                    kinds.extend(std::iter::repeat_n(TensorKind::DenseWeight, weight.len()));
                    kinds.extend(std::iter::repeat_n(TensorKind::DenseBias, bias.len()));
                }
                LayerParams::BatchNorm { gamma, .. } => {
                    let w = gamma.len();
                    kinds.extend(std::iter::repeat_n(TensorKind::Gamma, w));
                    kinds.extend(std::iter::repeat_n(TensorKind::Beta, w));
                    kinds.extend(std::iter::repeat_n(TensorKind::RunningMean, w));
                    kinds.extend(std::iter::repeat_n(TensorKind::RunningVar, w));
                }
            }
        }
        kinds
    }

    pub fn affine_mask(&self) -> ParamMask {
        ParamMask::affine(self)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.entry_count());
        for layer in &self.layers {
            match layer {
                LayerParams::Dense { weight, bias } => {
                    flat.extend(weight.iter());
                    flat.extend(bias.iter());
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    flat.extend(gamma.iter());
                    flat.extend(beta.iter());
                    flat.extend(running_mean.iter());
                    flat.extend(running_var.iter());
                }
            }
        }
        flat
    }

    /// Same structure, values replaced from a flat slice in canonical order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.entry_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat slice has {} entries, parameters have {}",
                flat.len(),
                self.entry_count()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for layer in &mut out.layers {
            match layer {
                LayerParams::Dense { weight, bias } => {
                    take(weight.as_slice_mut().expect("standard layout"));
                    take(bias.as_slice_mut().expect("standard layout"));
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    take(gamma.as_slice_mut().expect("standard layout"));
                    take(beta.as_slice_mut().expect("standard layout"));
                    take(running_mean.as_slice_mut().expect("standard layout"));
                    take(running_var.as_slice_mut().expect("standard layout"));
                }
            }
        }
        Ok(out)
    }

    pub fn same_shape(&self, other: &Parameters) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (
                    LayerParams::Dense { weight: wa, bias: ba },
                    LayerParams::Dense { weight: wb, bias: bb },
                ) => wa.dim() == wb.dim() && ba.len() == bb.len(),
                (LayerParams::BatchNorm { gamma: ga, .. }, LayerParams::BatchNorm { gamma: gb, .. }) => {
                    ga.len() == gb.len()
                }
                _ => false,
            })
    }

    /// Bit-for-bit equality of every entry.
    pub fn bitwise_eq(&self, other: &Parameters) -> bool {
        self.same_shape(other)
            && self
                .to_flat()
                .iter()
                .zip(other.to_flat())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Errors unless these parameters fit the given spec exactly.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        let template = Parameters::zeros(spec);
        if self.same_shape(&template) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "parameters do not match the network spec".into(),
            ))
        }
    }

    /// Named arrays in canonical order, for serialization.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let names = layer_names(i, layer);
            match layer {
                LayerParams::Dense { weight, bias } => {
                    let head = i == self.layers.len() - 1;
                    let fix = |n: String| {
                        if head {
                            n.replace(&format!("dense{}", i / 2), "head")
                        } else {
                            n
                        }
                    };
                    out.push(NamedTensor {
                        name: fix(names[0].0.clone()),
                        shape: vec![weight.nrows(), weight.ncols()],
                        data: weight.iter().copied().collect(),
                    });
                    out.push(NamedTensor {
                        name: fix(names[1].0.clone()),
                        shape: vec![bias.len()],
                        data: bias.to_vec(),
                    });
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    for (j, arr) in [gamma, beta, running_mean, running_var].iter().enumerate() {
                        out.push(NamedTensor {
                            name: names[j].0.clone(),
                            shape: vec![arr.len()],
                            data: arr.to_vec(),
                        });
                    }
                }
            }
        }
        out
    }

    /// SHA-256 over shapes and little-endian entry bytes, hex-encoded.
    pub fn checksum_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for tensor in self.named_tensors() {
            hasher.update((tensor.shape.len() as u64).to_le_bytes());
            for d in &tensor.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &tensor.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

impl Gradients {
    pub(crate) fn from_layers(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn to_flat(&self) -> Vec<f64> {
        Parameters {
            layers: self.layers.clone(),
        }
        .to_flat()
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().map(|l| l.entry_count()).sum()
    }
}

/// Fresh parameters: dense weights drawn from N(0, 1/fan_in), biases zero,
/// gamma one, beta zero, running mean zero, running variance one.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let fan = spec.fan_ins();
    let dense = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("positive std");
        let weight = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
        LayerParams::Dense {
            weight,
            bias: Array1::zeros(rows),
        }
    };
    for (i, &h) in spec.hidden_dims().iter().enumerate() {
        layers.push(dense(&mut rng, h, fan[i]));
        layers.push(LayerParams::BatchNorm {
            gamma: Array1::ones(h),
            beta: Array1::zeros(h),
            running_mean: Array1::zeros(h),
            running_var: Array1::ones(h),
        });
    }
    let last = *spec.hidden_dims().last().expect("validated nonempty");
    layers.push(dense(&mut rng, 1, last));
    Parameters { layers }
}
