//! Acceptance gate: one pass/fail line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedtta::datagen::{
    attack_split_benchmark, default_benchmark, leave_one_out_split, make_domain, sweep_benchmark,
    AttackStyle, DomainShift, DomainSpec,
};
use fedtta::federation::{aggregate, data_center_update, run_federated_training, FedConfig};
use fedtta::harness::{run_baseline, run_experiment, Baseline, ExperimentConfig};
use fedtta::metrics::{auc, eer, hter, roc_curve, trapezoid_area, ScoredSet};
use fedtta::nn::{
    backward, bce_loss, entropy_loss, forward, init_network, Batch, ForwardMode, NetworkSpec,
    Parameters,
};
use fedtta::tta::{adapt, TtaConfig, TtaMode};

fn verdict(name: &str, errors: &[String]) {
    let ok = errors.is_empty();
    println!("acceptance {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {}", errors.join("; "));
}

fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let input = rng.gen_range(3..=6);
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2))
        .map(|_| rng.gen_range(3..=5))
        .collect();
    NetworkSpec::new(input, hidden).unwrap()
}

fn random_params(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Parameters {
    let base = init_network(spec, rng.gen());
    let flat: Vec<f64> = base
        .to_flat()
        .iter()
        .map(|v| v + rng.gen_range(-0.3..0.3))
        .collect();
    base.with_flat(&flat).unwrap()
}

fn random_batch(spec: &NetworkSpec, rows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, spec.input_dim()), |_| rng.gen_range(-2.0..2.0))
}

const FD_STEP: f64 = 1e-5;

fn fd_gradient(params: &Parameters, objective: &dyn Fn(&Parameters) -> f64) -> Vec<f64> {
    let flat = params.to_flat();
    (0..flat.len())
        .map(|i| {
            let mut hi = flat.clone();
            hi[i] += FD_STEP;
            let mut lo = flat.clone();
            lo[i] -= FD_STEP;
            let up = objective(&params.with_flat(&hi).unwrap());
            let down = objective(&params.with_flat(&lo).unwrap());
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn gradient_mismatch(analytic: &[f64], fd: &[f64]) -> Option<(usize, f64, f64)> {
    analytic.iter().zip(fd).enumerate().find_map(|(i, (a, f))| {
        let tol = (1e-4 * a.abs().max(f.abs())).max(1e-8);
        ((a - f).abs() > tol).then_some((i, *a, *f))
    })
}

#[test]
fn gradient_oracle() {
    let start = Instant::now();
    let mut errors = Vec::new();
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + case);
        let spec = random_spec(&mut rng);
        let params = random_params(&spec, &mut rng);
        let x = random_batch(&spec, rng.gen_range(4..=7), &mut rng);
        let y = Array1::from_shape_fn(x.nrows(), |_| f64::from(rng.gen_range(0..2u8)));
        let batch = Batch::unlabeled(x).unwrap();

        let pass = forward(&params, &spec, &batch, ForwardMode::Train).unwrap();
        let (_, dp) = bce_loss(&pass.probs, &y).unwrap();
        let analytic = backward(&params, &spec, &pass.cache, &dp).unwrap().to_flat();
        let fd = fd_gradient(&params, &|p| {
            let pass = forward(p, &spec, &batch, ForwardMode::Train).unwrap();
            bce_loss(&pass.probs, &y).unwrap().0
        });
        if let Some((i, a, f)) = gradient_mismatch(&analytic, &fd) {
            errors.push(format!("bce case {case} entry {i}: analytic {a} fd {f}"));
        }

        let pass = forward(&params, &spec, &batch, ForwardMode::AdaptBatchStats).unwrap();
        let (_, dp) = entropy_loss(&pass.probs).unwrap();
        let analytic = backward(&params, &spec, &pass.cache, &dp).unwrap().to_flat();
        let fd = fd_gradient(&params, &|p| {
            let pass = forward(p, &spec, &batch, ForwardMode::AdaptBatchStats).unwrap();
            entropy_loss(&pass.probs).unwrap().0
        });
        if let Some((i, a, f)) = gradient_mismatch(&analytic, &fd) {
            errors.push(format!("entropy case {case} entry {i}: analytic {a} fd {f}"));
        }
    }
    if start.elapsed().as_secs_f64() >= 30.0 {
        errors.push(format!("took {:.1}s", start.elapsed().as_secs_f64()));
    }
    verdict("gradient oracle", &errors);
}

fn max_abs_diff(a: &Parameters, b: &Parameters) -> f64 {
    a.to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn aggregation_exactness() {
    let mut errors = Vec::new();
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + case);
        let spec = random_spec(&mut rng);
        let k = 1 + (case as usize) % 6;
        let updates: Vec<Parameters> = (0..k).map(|_| random_params(&spec, &mut rng)).collect();
        let agg = aggregate(&updates).unwrap();

        let flats: Vec<Vec<f64>> = updates.iter().map(|p| p.to_flat()).collect();
        let naive: Vec<f64> = (0..flats[0].len())
            .map(|i| flats.iter().map(|f| f[i]).sum::<f64>() / k as f64)
            .collect();
        let naive = updates[0].with_flat(&naive).unwrap();
        if max_abs_diff(&agg, &naive) > 1e-12 {
            errors.push(format!("case {case}: mean off by {}", max_abs_diff(&agg, &naive)));
        }

        let identity = aggregate(&updates[..1]).unwrap();
        if max_abs_diff(&identity, &updates[0]) > 1e-12 {
            errors.push(format!("case {case}: K=1 not identity"));
        }

        let mut shuffled = updates.clone();
        shuffled.reverse();
        shuffled.rotate_left(case as usize % k);
        if max_abs_diff(&aggregate(&shuffled).unwrap(), &agg) > 1e-12 {
            errors.push(format!("case {case}: permutation changed the mean"));
        }

        let others: Vec<Parameters> = (0..k).map(|_| random_params(&spec, &mut rng)).collect();
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let combos: Vec<Parameters> = updates
            .iter()
            .zip(&others)
            .map(|(x, y)| {
                let flat: Vec<f64> = x
                    .to_flat()
                    .iter()
                    .zip(y.to_flat())
                    .map(|(xv, yv)| a * xv + b * yv)
                    .collect();
                x.with_flat(&flat).unwrap()
            })
            .collect();
        let lhs = aggregate(&combos).unwrap();
        let rhs: Vec<f64> = aggregate(&updates)
            .unwrap()
            .to_flat()
            .iter()
            .zip(aggregate(&others).unwrap().to_flat())
            .map(|(xv, yv)| a * xv + b * yv)
            .collect();
        let rhs = updates[0].with_flat(&rhs).unwrap();
        if max_abs_diff(&lhs, &rhs) > 1e-12 {
            errors.push(format!("case {case}: linearity off by {}", max_abs_diff(&lhs, &rhs)));
        }
    }
    verdict("aggregation exactness", &errors);
}

#[test]
fn freeze_contract() {
    let mut errors = Vec::new();
    for (case, mode, batches, steps) in [
        (0u64, TtaMode::Online, 20usize, 10usize),
        (1, TtaMode::Episodic, 8, 25),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(3_000 + case);
        let spec = NetworkSpec::new(6, vec![8, 4]).unwrap();
        let params = random_params(&spec, &mut rng);
        let stream: Vec<Array2<f64>> = (0..batches)
            .map(|_| random_batch(&spec, rng.gen_range(8..=16), &mut rng))
            .collect();
        let cfg = TtaConfig {
            steps_per_batch: steps,
            mode,
            ..TtaConfig::default()
        };
        let adapted = adapt(&params, &spec, &stream, &cfg).unwrap();
        if adapted.trace.len() < 200 {
            errors.push(format!("case {case}: only {} steps", adapted.trace.len()));
        }
        let kinds = params.entry_kinds();
        let before = params.to_flat();
        let after = adapted.params.to_flat();
        let frozen_moved = kinds
            .iter()
            .zip(before.iter().zip(&after))
            .filter(|(kind, (b, a))| !kind.affine() && b.to_bits() != a.to_bits())
            .count();
        if frozen_moved > 0 {
            errors.push(format!("case {case}: {frozen_moved} frozen entries moved"));
        }
        let affine_moved = kinds
            .iter()
            .zip(before.iter().zip(&after))
            .any(|(kind, (b, a))| kind.affine() && b.to_bits() != a.to_bits());
        if !affine_moved {
            errors.push(format!("case {case}: adaptation was a no-op"));
        }
    }
    verdict("freeze contract", &errors);
}

#[test]
fn entropy_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4_000);
    let spec = NetworkSpec::new(6, vec![8, 4]).unwrap();
    let params = random_params(&spec, &mut rng);
    let stream: Vec<Array2<f64>> = (0..50)
        .map(|_| random_batch(&spec, rng.gen_range(8..=16), &mut rng))
        .collect();
    let cfg = TtaConfig {
        lr: 1e-4,
        steps_per_batch: 1,
        mode: TtaMode::Online,
        ..TtaConfig::default()
    };
    let adapted = adapt(&params, &spec, &stream, &cfg).unwrap();
    let mut errors = Vec::new();
    if adapted.trace.len() != 50 {
        errors.push(format!("{} trace steps for 50 batches", adapted.trace.len()));
    }
    for step in &adapted.trace {
        if step.entropy_after > step.entropy_before + 1e-8 {
            errors.push(format!(
                "batch {}: entropy rose {} -> {}",
                step.batch_index, step.entropy_before, step.entropy_after
            ));
        }
    }
    verdict("entropy descent", &errors);
}

fn brute_rates(scores: &[f64], labels: &[bool], tau: f64) -> (f64, f64) {
    let mut accepted_attacks = 0usize;
    let mut rejected_reals = 0usize;
    let mut attacks = 0usize;
    let mut reals = 0usize;
    for (&s, &real) in scores.iter().zip(labels) {
        if real {
            reals += 1;
            if s < tau {
                rejected_reals += 1;
            }
        } else {
            attacks += 1;
            if s >= tau {
                accepted_attacks += 1;
            }
        }
    }
    (
        accepted_attacks as f64 / attacks as f64,
        rejected_reals as f64 / reals as f64,
    )
}

fn brute_eer(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best: Option<(f64, f64, f64)> = None;
    for tau in distinct {
        let (far, frr) = brute_rates(scores, labels, tau);
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0, tau));
        }
    }
    let (_, value, tau) = best.unwrap();
    (value, tau)
}

fn brute_roc(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let reals = labels.iter().filter(|&&l| l).count() as f64;
    let attacks = labels.len() as f64 - reals;
    let mut points = vec![(0.0, 0.0)];
    for &tau in distinct.iter().rev() {
        let hit_attacks = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| !**l && **s >= tau)
            .count();
        let hit_reals = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **l && **s >= tau)
            .count();
        points.push((hit_attacks as f64 / attacks, hit_reals as f64 / reals));
    }
    if *points.last().unwrap() != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }
    points
}

fn brute_pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
            let (real, attack) = match (li, lj) {
                (true, false) => (si, sj),
                (false, true) => (sj, si),
                _ => continue,
            };
            pairs += 1.0;
            if real > attack {
                wins += 1.0;
            } else if real == attack {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn metric_oracles() {
    let grid = [0.05, 0.1, 0.1, 0.2, 0.35, 0.35, 0.6, 0.6, 0.7, 0.8, 0.9, 0.9];
    let mut errors = Vec::new();
    let mut cases = 0usize;
    for n in 2..=grid.len() {
        let scores = grid[..n].to_vec();
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
            cases += 1;

            let (value, tau) = eer(&set).unwrap();
            let (brute_value, brute_tau) = brute_eer(&scores, &labels);
            if value != brute_value || tau != brute_tau {
                errors.push(format!("n={n} mask={mask}: eer ({value},{tau}) vs brute ({brute_value},{brute_tau})"));
            }

            for tau in scores.iter().copied().chain([0.0, 0.5, 1.0]) {
                let op = hter(&set, tau).unwrap();
                let (far, frr) = brute_rates(&scores, &labels, tau);
                if op.far != far || op.frr != frr || op.hter != (far + frr) / 2.0 {
                    errors.push(format!("n={n} mask={mask} tau={tau}: hter mismatch"));
                }
            }

            let curve = roc_curve(&set).unwrap();
            if curve != brute_roc(&scores, &labels) {
                errors.push(format!("n={n} mask={mask}: roc mismatch"));
            }

            let pairwise = brute_pairwise_auc(&scores, &labels);
            let rank_based = auc(&set).unwrap();
            if (pairwise - rank_based).abs() > 1e-12 {
                errors.push(format!("n={n} mask={mask}: auc {rank_based} vs pairwise {pairwise}"));
            }
            if (pairwise - trapezoid_area(&curve)).abs() > 1e-12 {
                errors.push(format!("n={n} mask={mask}: trapezoid vs pairwise"));
            }

            if errors.len() > 5 {
                verdict("metric oracles", &errors);
            }
        }
    }
    if cases != 8_166 {
        errors.push(format!("enumerated {cases} cases"));
    }

    let hand = ScoredSet::new(vec![0.1, 0.4, 0.35, 0.8], vec![false, false, true, true]).unwrap();
    if auc(&hand).unwrap() != 0.75 {
        errors.push(format!("hand case auc {}", auc(&hand).unwrap()));
    }
    verdict("metric oracles", &errors);
}

fn tiny_domain_spec(id: &str, rotation_deg: f64, t0: f64) -> DomainSpec {
    let mut attack_offset = Array1::zeros(4);
    attack_offset[1] = 1.8;
    DomainSpec {
        id: id.to_string(),
        n_real: 60,
        n_attack: 60,
        base_dim: 4,
        shift: DomainShift {
            rotation: rotation_deg.to_radians(),
            translation: Array1::from(vec![t0, -t0, t0 / 2.0, 0.5]),
            scale: Array1::ones(4),
        },
        attack_offset,
        noise_sigma: 0.2,
        attack_style: AttackStyle::Print,
    }
}

fn report_bits(row: &fedtta::harness::EvaluationRow) -> Vec<u64> {
    let r = row.outcome.as_ref().unwrap();
    let mut bits = vec![
        r.threshold.to_bits(),
        r.far.to_bits(),
        r.frr.to_bits(),
        r.hter.to_bits(),
        r.eer.to_bits(),
        r.auc.to_bits(),
    ];
    for (x, y) in &r.roc {
        bits.push(x.to_bits());
        bits.push(y.to_bits());
    }
    bits
}

#[test]
fn degenerate_equivalences() {
    let mut errors = Vec::new();
    let domains: Vec<_> = [("eq_a", 0.0, 0.8), ("eq_b", 25.0, -0.6), ("eq_c", 50.0, 0.4)]
        .iter()
        .enumerate()
        .map(|(i, (id, rot, t0))| {
            make_domain(&tiny_domain_spec(id, *rot, *t0), 40 + i as u64).unwrap()
        })
        .collect();
    let spec = NetworkSpec::new(4, vec![6, 3]).unwrap();
    let fed = FedConfig {
        rounds: 4,
        local_epochs: 2,
        batch_size: 32,
        ..FedConfig::default()
    };

    let run = run_federated_training(&domains[..1], &spec, &fed).unwrap();
    let mut manual = init_network(&spec, fed.seed);
    for round in 0..fed.rounds {
        manual = data_center_update(0, round, &manual, &domains[0], &spec, &fed)
            .unwrap()
            .params;
    }
    if !run.params.bitwise_eq(&manual) {
        errors.push("K=1 run differs from plain local training".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let update = random_params(&spec, &mut rng);
    let copies = vec![update.clone(); 5];
    if !aggregate(&copies).unwrap().bitwise_eq(&update) {
        errors.push("identical-client aggregate differs from the client".into());
    }

    let (centers, user) = leave_one_out_split(&domains[..2], 1).unwrap();
    let tta = TtaConfig::default();
    let single = run_baseline(Baseline::Single, &centers, &user, &[6, 3], &fed, &tta).unwrap();
    let fused = run_baseline(Baseline::Fused, &centers, &user, &[6, 3], &fed, &tta).unwrap();
    if report_bits(&single[0]) != report_bits(&fused[0]) {
        errors.push("Fused(K=1) differs from Single".into());
    }

    let (centers, user) = leave_one_out_split(&domains, 2).unwrap();
    let disabled = TtaConfig {
        steps_per_batch: 0,
        ..TtaConfig::default()
    };
    let plain = run_baseline(Baseline::Fed, &centers, &user, &[6, 3], &fed, &tta).unwrap();
    let frozen = run_baseline(Baseline::FedTta, &centers, &user, &[6, 3], &fed, &disabled).unwrap();
    if report_bits(&plain[0]) != report_bits(&frozen[0]) {
        errors.push("FedTta with adaptation disabled differs from Fed".into());
    }

    verdict("degenerate equivalences", &errors);
}

#[test]
fn benchmark_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        domain_specs: default_benchmark(),
        data_seed: 11,
        hidden_dims: vec![16, 8],
        fed: FedConfig::default(),
        tta: TtaConfig::default(),
        baselines: Baseline::ALL.to_vec(),
        out_dir: dir.path().to_path_buf(),
    };
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let summary = |b| report.summary_for(b).unwrap();
    let auc = [
        summary(Baseline::Single).avg_auc,
        summary(Baseline::Fused).avg_auc,
        summary(Baseline::Fed).avg_auc,
        summary(Baseline::FedTta).avg_auc,
    ];
    let hter = [
        summary(Baseline::Single).avg_hter,
        summary(Baseline::Fused).avg_hter,
        summary(Baseline::Fed).avg_hter,
        summary(Baseline::FedTta).avg_hter,
    ];

    let mut errors = Vec::new();
    if !(auc[0] < auc[1] && auc[1] <= auc[2] && auc[2] < auc[3]) {
        errors.push(format!("auc ladder broken: {auc:?}"));
    }
    if auc[3] - auc[0] < 0.05 {
        errors.push(format!("fedtta-single auc gap {}", auc[3] - auc[0]));
    }
    if !(hter[0] > hter[1] && hter[1] >= hter[2] && hter[2] > hter[3]) {
        errors.push(format!("hter ladder broken: {hter:?}"));
    }
    if elapsed >= 300.0 {
        errors.push(format!("took {elapsed:.0}s"));
    }
    verdict("benchmark ladder", &errors);
}

#[test]
fn center_count_trend() {
    let specs = sweep_benchmark();
    let domains: Vec<_> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| make_domain(s, 11u64.wrapping_add(i as u64)).unwrap())
        .collect();
    let (centers, user) = leave_one_out_split(&domains, domains.len() - 1).unwrap();
    let fed = FedConfig::default();
    let tta = TtaConfig::default();
    let auc_with = |k: usize| {
        let rows = run_baseline(Baseline::FedTta, &centers[..k], &user, &[16, 8], &fed, &tta)
            .unwrap();
        rows[0].outcome.as_ref().unwrap().auc
    };
    let two = auc_with(2);
    let four = auc_with(4);
    let mut errors = Vec::new();
    if four < two + 0.02 {
        errors.push(format!("2 centers auc {two}, 4 centers auc {four}"));
    }
    verdict("center count trend", &errors);
}

#[test]
fn attack_split_generalization() {
    let specs = attack_split_benchmark();
    let domains: Vec<_> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| make_domain(s, 11u64.wrapping_add(i as u64)).unwrap())
        .collect();
    let (centers, user) = leave_one_out_split(&domains, 2).unwrap();
    let fed = FedConfig::default();
    let tta = TtaConfig::default();
    let fused = run_baseline(Baseline::Fused, &centers, &user, &[16, 8], &fed, &tta).unwrap();
    let fedtta = run_baseline(Baseline::FedTta, &centers, &user, &[16, 8], &fed, &tta).unwrap();
    let fused_auc = fused[0].outcome.as_ref().unwrap().auc;
    let fedtta_auc = fedtta[0].outcome.as_ref().unwrap().auc;
    let mut errors = Vec::new();
    if fedtta_auc <= fused_auc + 0.02 {
        errors.push(format!("fused auc {fused_auc}, fedtta auc {fedtta_auc}"));
    }
    verdict("attack split generalization", &errors);
}

fn run_bench(out_dir: &Path) {
    let output = Command::new(env!("CARGO_BIN_EXE_fedtta"))
        .args([
            "bench",
            "--benchmark",
            "default",
            "--data-seed",
            "11",
            "--rounds",
            "6",
            "--out-dir",
        ])
        .arg(out_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "bench run failed");
}

fn roc_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("roc_") && n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn bench_determinism() {
    let root = tempfile::tempdir().unwrap();
    let first = root.path().join("first");
    let second = root.path().join("second");
    run_bench(&first);
    run_bench(&second);

    let mut errors = Vec::new();
    let report_a = std::fs::read(first.join("report.txt")).unwrap();
    let report_b = std::fs::read(second.join("report.txt")).unwrap();
    if report_a != report_b {
        errors.push("report.txt differs between runs".into());
    }
    let rocs = roc_files(&first);
    if rocs.is_empty() {
        errors.push("no roc files written".into());
    }
    if rocs != roc_files(&second) {
        errors.push("roc file sets differ".into());
    }
    for name in &rocs {
        if std::fs::read(first.join(name)).unwrap() != std::fs::read(second.join(name)).unwrap() {
            errors.push(format!("{name} differs between runs"));
        }
    }
    verdict("bench determinism", &errors);
}
