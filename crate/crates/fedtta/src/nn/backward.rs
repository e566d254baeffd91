use ndarray::{Array1, Axis};

use super::{ForwardCache, Gradients, LayerParams, NetworkSpec, Parameters, PROB_CLAMP};
use crate::{Error, Result};

fn check_cache(params: &Parameters, spec: &NetworkSpec, cache: &ForwardCache) -> Result<()> {
    let hidden = spec.hidden_dims();
    if cache.blocks.len() != hidden.len() {
        return Err(Error::StaleCache(format!(
            "{} cached blocks for {} hidden layers",
            cache.blocks.len(),
            hidden.len()
        )));
    }
    let fan = spec.fan_ins();
    for (b, block) in cache.blocks.iter().enumerate() {
        if block.x_in.dim() != (cache.n, fan[b]) || block.x_hat.dim() != (cache.n, hidden[b]) {
            return Err(Error::StaleCache(format!("block {b} shape drift")));
        }
    }
    if cache.head_input.dim() != (cache.n, *hidden.last().expect("nonempty")) {
        return Err(Error::StaleCache("head input shape drift".into()));
    }
    if cache.p_raw.len() != cache.n {
        return Err(Error::StaleCache("probability count drift".into()));
    }
    params.check_spec(spec)
}

/// Gradients of a scalar loss with respect to every trainable entry, given
/// the loss gradient with respect to the clamped probabilities. Running
/// statistics always receive zero.
pub fn backward(
    params: &Parameters,
    spec: &NetworkSpec,
    cache: &ForwardCache,
    dloss_dp: &Array1<f64>,
) -> Result<Gradients> {
    check_cache(params, spec, cache)?;
    if dloss_dp.len() != cache.n {
        return Err(Error::ShapeMismatch(format!(
            "{} loss gradients for {} rows",
            dloss_dp.len(),
            cache.n
        )));
    }

    let layers = params.layers();
    let hidden = cache.blocks.len();

    // Head: sigmoid derivative, zero where the clamp was active.
    let dp_dz = cache.p_raw.mapv(|s| {
        if s <= PROB_CLAMP || s >= 1.0 - PROB_CLAMP {
            0.0
        } else {
            s * (1.0 - s)
        }
    });
    let dz = (dloss_dp * &dp_dz).insert_axis(Axis(1));
    let head_w = match layers.last().expect("head present") {
        LayerParams::Dense { weight, .. } => weight,
        _ => unreachable!("head is dense"),
    };
    let d_head_w = dz.t().dot(&cache.head_input);
    let d_head_b = dz.sum_axis(Axis(0));
    let mut d_act = dz.dot(head_w);

    let mut reversed = vec![LayerParams::Dense {
        weight: d_head_w,
        bias: d_head_b,
    }];

    for b in (0..hidden).rev() {
        let block = &cache.blocks[b];
        let gamma = match &layers[2 * b + 1] {
            LayerParams::BatchNorm { gamma, .. } => gamma,
            _ => unreachable!("batch-norm layers sit at odd indices"),
        };
        let weight = match &layers[2 * b] {
            LayerParams::Dense { weight, .. } => weight,
            _ => unreachable!("dense layers sit at even indices"),
        };

        let relu_mask = block.y_affine.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let d_y = &d_act * &relu_mask;
        let d_gamma = (&d_y * &block.x_hat).sum_axis(Axis(0));
        let d_beta = d_y.sum_axis(Axis(0));
        let d_xhat = &d_y * gamma;

        let d_z = if cache.mode.uses_batch_stats() {
            // Batch statistics depend on every row, hence the two correction
            // terms.
            let m1 = d_xhat.mean_axis(Axis(0)).expect("n >= 2");
            let m2 = (&d_xhat * &block.x_hat)
                .mean_axis(Axis(0))
                .expect("n >= 2");
            ((&d_xhat - &m1) - &(&block.x_hat * &m2)) / &block.std
        } else {
            &d_xhat / &block.std
        };

        let d_w = d_z.t().dot(&block.x_in);
        let d_b = d_z.sum_axis(Axis(0));
        d_act = d_z.dot(weight);

        let width = gamma.len();
        reversed.push(LayerParams::BatchNorm {
            gamma: d_gamma,
            beta: d_beta,
            running_mean: Array1::zeros(width),
            running_var: Array1::zeros(width),
        });
        reversed.push(LayerParams::Dense {
            weight: d_w,
            bias: d_b,
        });
    }

    reversed.reverse();
    Ok(Gradients::from_layers(reversed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        bce_loss, entropy_loss, forward, init_network, Batch, ForwardMode, TensorKind,
    };
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        Batch::labeled(x, y).unwrap()
    }

    #[test]
    fn zero_upstream_gradient_yields_zero_gradients() {
        let spec = NetworkSpec::new(3, vec![4]).unwrap();
        let params = init_network(&spec, 2);
        let batch = random_batch(6, 3, 0);
        let pass = forward(&params, &spec, &batch, ForwardMode::Train).unwrap();
        let grads = backward(&params, &spec, &pass.cache, &Array1::zeros(6)).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
        assert_eq!(grads.entry_count(), params.entry_count());
    }

    #[test]
    fn running_stat_slots_stay_zero() {
        let spec = NetworkSpec::new(3, vec![4, 2]).unwrap();
        let params = init_network(&spec, 2);
        let batch = random_batch(8, 3, 1);
        let pass = forward(&params, &spec, &batch, ForwardMode::Train).unwrap();
        let (_, dp) = bce_loss(&pass.probs, batch.labels().unwrap()).unwrap();
        let grads = backward(&params, &spec, &pass.cache, &dp).unwrap();
        let kinds = params.entry_kinds();
        for (g, k) in grads.to_flat().iter().zip(kinds) {
            if !k.trainable() {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn entropy_gradient_is_exactly_zero_for_a_silent_head() {
        // Zeroed head weights and bias force p = 0.5 everywhere.
        let spec = NetworkSpec::new(3, vec![4]).unwrap();
        let params = init_network(&spec, 7);
        let kinds = params.entry_kinds();
        let mut flat = params.to_flat();
        let head_start = flat.len() - 5;
        for v in &mut flat[head_start..] {
            *v = 0.0;
        }
        let params = params.with_flat(&flat).unwrap();
        let batch = random_batch(10, 3, 3);
        let pass = forward(&params, &spec, &batch, ForwardMode::AdaptBatchStats).unwrap();
        assert!(pass.probs.iter().all(|&p| p == 0.5));
        let (_, dp) = entropy_loss(&pass.probs).unwrap();
        let grads = backward(&params, &spec, &pass.cache, &dp).unwrap();
        for (g, k) in grads.to_flat().iter().zip(kinds) {
            if k == TensorKind::DenseBias {
                assert_eq!(*g, 0.0);
            }
        }
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quick_finite_difference_smoke() {
        let spec = NetworkSpec::new(3, vec![4]).unwrap();
        let params = init_network(&spec, 13);
        let batch = random_batch(8, 3, 13);
        let pass = forward(&params, &spec, &batch, ForwardMode::Train).unwrap();
        let (_, dp) = bce_loss(&pass.probs, batch.labels().unwrap()).unwrap();
        let grads = backward(&params, &spec, &pass.cache, &dp).unwrap();
        let flat_g = grads.to_flat();
        let flat_p = params.to_flat();
        let h = 1e-5;
        for i in (0..flat_p.len()).step_by(7) {
            let mut hi = flat_p.clone();
            let mut lo = flat_p.clone();
            hi[i] += h;
            lo[i] -= h;
            let loss_at = |vals: &[f64]| {
                let p = params.with_flat(vals).unwrap();
                let pass = forward(&p, &spec, &batch, ForwardMode::Train).unwrap();
                bce_loss(&pass.probs, batch.labels().unwrap()).unwrap().0
            };
            let fd = (loss_at(&hi) - loss_at(&lo)) / (2.0 * h);
            let diff = (flat_g[i] - fd).abs();
            assert!(
                diff <= 1e-4 * flat_g[i].abs().max(fd.abs()).max(1e-4),
                "entry {i}: analytic {} vs fd {fd}",
                flat_g[i]
            );
        }
    }

    #[test]
    fn rejects_mismatched_upstream_length() {
        let spec = NetworkSpec::new(3, vec![4]).unwrap();
        let params = init_network(&spec, 2);
        let batch = random_batch(6, 3, 0);
        let pass = forward(&params, &spec, &batch, ForwardMode::Train).unwrap();
        assert!(backward(&params, &spec, &pass.cache, &Array1::zeros(5)).is_err());
    }

    #[test]
    fn rejects_a_cache_from_another_architecture() {
        let spec_a = NetworkSpec::new(3, vec![4]).unwrap();
        let spec_b = NetworkSpec::new(3, vec![5]).unwrap();
        let params_a = init_network(&spec_a, 2);
        let params_b = init_network(&spec_b, 2);
        let batch = random_batch(6, 3, 0);
        let pass = forward(&params_b, &spec_b, &batch, ForwardMode::Train).unwrap();
        let err = backward(&params_a, &spec_a, &pass.cache, &Array1::zeros(6)).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }
}
