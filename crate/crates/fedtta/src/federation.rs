//! Federated training over per-center datasets.
//!
//! Each round every data center copies the global model, runs a few epochs of
//! local minibatch training on its own split, and sends the resulting
//! parameters back. Raw samples never leave a center; only parameter arrays
//! are exchanged. The server averages all client arrays element-wise,
//! including batch-norm running statistics, with equal weights.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::DomainDataset;
use crate::nn::{
    adam_step, backward, bce_loss, forward, AdamState, Batch, ForwardMode, NetworkSpec, Parameters,
};
use crate::{Error, Result};

/// Rounds with relative mean-loss change below this count toward a plateau.
const PLATEAU_REL_TOL: f64 = 1e-4;
/// Consecutive plateau rounds needed before training stops early.
const PLATEAU_ROUNDS: usize = 5;

#[derive(Debug, Clone)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            local_epochs: 3,
            lr: 1e-2,
            batch_size: 64,
            seed: 7,
            early_stop: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: Parameters,
    /// Mean minibatch loss over the last local epoch. None when no step ran.
    pub final_epoch_loss: Option<f64>,
}

fn client_rng(seed: u64, client: usize, round: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(client as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(round as u64).to_le_bytes());
    key[24..32].copy_from_slice(&u64::from_le_bytes(*b"fedbatch").to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Runs one center's local training for one round. Deterministic in
/// (seed, client, round); optimizer state is fresh each call.
pub fn data_center_update(
    client: usize,
    round: usize,
    global: &Parameters,
    dataset: &DomainDataset,
    spec: &NetworkSpec,
    cfg: &FedConfig,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    global.check_spec(spec)?;
    let (x, y) = dataset.split_xy(crate::datagen::Split::Train);
    if x.nrows() < 2 {
        return Err(Error::BatchTooSmall {
            got: x.nrows(),
            need: 2,
        });
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset {} has {} features, network expects {}",
            dataset.id(),
            x.ncols(),
            spec.input_dim()
        )));
    }

    let mut params = global.clone();
    let mut adam = AdamState::new(&params);
    let mut rng = client_rng(cfg.seed, client, round);
    let mut final_epoch_loss = None;

    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut bx = ndarray::Array2::zeros((chunk.len(), x.ncols()));
            let mut by = ndarray::Array1::zeros(chunk.len());
            for (i, &row) in chunk.iter().enumerate() {
                bx.row_mut(i).assign(&x.row(row));
                by[i] = y[row];
            }
            let batch = Batch::labeled(bx, by)?;
            let pass = forward(&params, spec, &batch, ForwardMode::Train)?;
            let stats = pass
                .updated_running_stats
                .as_ref()
                .expect("train mode returns stats")
                .clone();
            let (loss, dloss) = bce_loss(&pass.probs, batch.labels()?)?;
            let grads = backward(&params, spec, &pass.cache, &dloss)?;
            let (next, next_adam) = adam_step(&params, &grads, &adam, cfg.lr, None)?;
            params = next;
            adam = next_adam;
            params.set_running_stats(&stats)?;
            losses.push(loss);
        }
        if !losses.is_empty() {
            final_epoch_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
    }

    Ok(ClientUpdate {
        params,
        final_epoch_loss,
    })
}

/// Equal-weight element-wise mean of client parameters, running statistics
/// included. Each entry is reduced in a canonical sorted order, so the result
/// is bitwise invariant to client permutation, and averaging identical
/// clients returns them bitwise unchanged.
pub fn aggregate(updates: &[Parameters]) -> Result<Parameters> {
    let first = updates
        .first()
        .ok_or_else(|| Error::EmptyInput("aggregate of zero clients".into()))?;
    for (i, u) in updates.iter().enumerate().skip(1) {
        if !first.same_shape(u) {
            return Err(Error::ShapeMismatch(format!(
                "client {i} parameters do not match client 0"
            )));
        }
    }
    let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.to_flat()).collect();
    let k = flats.len() as f64;
    let mut out = vec![0.0; flats[0].len()];
    let mut vals = vec![0.0; flats.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        for (v, flat) in vals.iter_mut().zip(&flats) {
            *v = flat[i];
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let base = vals[0];
        let sum: f64 = vals.iter().map(|v| v - base).sum();
        *slot = base + sum / k;
    }
    first.with_flat(&out)
}

/// One aggregation round as seen by the server.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub client_losses: Vec<Option<f64>>,
    pub mean_loss: Option<f64>,
    pub checksum: String,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub params: Parameters,
    pub history: Vec<RoundRecord>,
    pub stopped_early: bool,
}

impl TrainingRun {
    /// Per-round log lines. Wall time is deliberately left out so reruns of
    /// the same configuration produce identical text.
    pub fn history_lines(&self) -> Vec<String> {
        self.history
            .iter()
            .map(|r| {
                let losses: Vec<String> = r
                    .client_losses
                    .iter()
                    .map(|l| match l {
                        Some(v) => format!("{v:.6}"),
                        None => "-".to_string(),
                    })
                    .collect();
                let mean = match r.mean_loss {
                    Some(v) => format!("{v:.6}"),
                    None => "-".to_string(),
                };
                format!(
                    "round {} mean_loss {} clients {} checksum {}",
                    r.round,
                    mean,
                    losses.join(","),
                    r.checksum
                )
            })
            .collect()
    }
}

/// Full federated loop: initialize from the seed, clients train in parallel,
/// aggregate, repeat. With `early_stop` the loop ends once the mean client
/// loss plateaus for several consecutive rounds.
pub fn run_federated_training(
    datasets: &[DomainDataset],
    spec: &NetworkSpec,
    cfg: &FedConfig,
) -> Result<TrainingRun> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::EmptyInput("no data centers".into()));
    }
    let mut params = crate::nn::init_network(spec, cfg.seed);
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut stopped_early = false;
    let mut plateau = 0usize;
    let mut prev_mean: Option<f64> = None;

    for round in 0..cfg.rounds {
        let start = Instant::now();
        let results: Vec<Result<ClientUpdate>> = datasets
            .par_iter()
            .enumerate()
            .map(|(k, ds)| data_center_update(k, round, &params, ds, spec, cfg))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for (k, res) in results.into_iter().enumerate() {
            updates.push(res.map_err(|e| Error::Client {
                index: k,
                source: Box::new(e),
            })?);
        }
        params = aggregate(
            &updates
                .iter()
                .map(|u| u.params.clone())
                .collect::<Vec<_>>(),
        )?;
        let client_losses: Vec<Option<f64>> =
            updates.iter().map(|u| u.final_epoch_loss).collect();
        let known: Vec<f64> = client_losses.iter().filter_map(|l| *l).collect();
        let mean_loss = if known.is_empty() {
            None
        } else {
            Some(known.iter().sum::<f64>() / known.len() as f64)
        };
        history.push(RoundRecord {
            round,
            client_losses,
            mean_loss,
            checksum: params.checksum_hex(),
            wall_secs: start.elapsed().as_secs_f64(),
        });

        if cfg.early_stop {
            if let (Some(prev), Some(cur)) = (prev_mean, mean_loss) {
                let rel = (cur - prev).abs() / prev.abs().max(1e-12);
                if rel < PLATEAU_REL_TOL {
                    plateau += 1;
                } else {
                    plateau = 0;
                }
                if plateau >= PLATEAU_ROUNDS {
                    stopped_early = true;
                }
            }
        }
        prev_mean = mean_loss;
        if stopped_early {
            break;
        }
    }

    Ok(TrainingRun {
        params,
        history,
        stopped_early,
    })
}
