use ndarray::Array2;
use pamsurv::eval::quantile;
use pamsurv::synth::{
    generate_cloud, generate_dataset, invert_cumulative_hazard, read_dataset, simulate_time, write_dataset,
    SimConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(seed: u64) -> SimConfig {
    SimConfig {
        n_points: 16,
        seed,
        ..SimConfig::default()
    }
}

/// Per-axis coordinate deciles, sorted within each axis.
fn quantile_features(cloud: &Array2<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..3 {
        let col: Vec<f64> = cloud.column(c).to_vec();
        for k in 1..10 {
            out.push(quantile(&col, k as f64 / 10.0).unwrap());
        }
    }
    out
}

#[test]
fn classes_are_separable_by_nearest_centroid() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut centroids = vec![vec![0.0; 27]; 3];
    let n_fit = 50;
    for class in 0..3u8 {
        for _ in 0..n_fit {
            let f = quantile_features(&generate_cloud(class, 1024, 0.01, &mut rng).unwrap());
            for (c, v) in centroids[class as usize].iter_mut().zip(f) {
                *c += v / n_fit as f64;
            }
        }
    }
    let mut correct = 0;
    for i in 0..300 {
        let class = (i % 3) as u8;
        let f = quantile_features(&generate_cloud(class, 1024, 0.01, &mut rng).unwrap());
        let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let pred = (0..3).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        correct += (pred == class as usize) as usize;
    }
    assert!(correct as f64 / 300.0 >= 0.99, "accuracy {}", correct as f64 / 300.0);
}

#[test]
fn constant_hazard_matches_truncated_exponential_mean() {
    let h: f64 = 0.2;
    let cfg = SimConfig {
        baseline_coefs: [h.ln(), 0.0, 0.0],
        cens_rate: 0.0,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut sum, mut n) = (0.0, 0usize);
    for _ in 0..100_000 {
        let (t, status) = simulate_time(&cfg, 0.0, 0.0, 0, &mut rng, cfg.grid_step);
        if status {
            sum += t;
            n += 1;
        }
    }
    let tau = cfg.admin_cens;
    let expected = 1.0 / h - tau * (-h * tau).exp() / (1.0 - (-h * tau).exp());
    let mean = sum / n as f64;
    assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
}

#[test]
fn event_times_follow_fine_grid_distribution() {
    let cfg = SimConfig {
        cens_rate: 0.0,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draws = Vec::new();
    while draws.len() < 10_000 {
        let (t, status) = simulate_time(&cfg, 0.3, 0.6, 1, &mut rng, cfg.grid_step);
        if status {
            draws.push(t);
        }
    }
    draws.sort_by(f64::total_cmp);
    // oracle cumulative hazard on a 10x finer midpoint grid
    let fine = cfg.grid_step / 10.0;
    let n_cells = (cfg.admin_cens / fine).round() as usize;
    let mut cum = vec![0.0; n_cells + 1];
    for k in 0..n_cells {
        let mid = (k as f64 + 0.5) * fine;
        cum[k + 1] = cum[k] + pamsurv::synth::hazard_true(&cfg, mid, 0.3, 0.6, 1) * fine;
    }
    let lambda = |t: f64| {
        let k = ((t / fine).floor() as usize).min(n_cells - 1);
        cum[k] + (cum[k + 1] - cum[k]) * (t / fine - k as f64)
    };
    let total = 1.0 - (-cum[n_cells]).exp();
    let cdf = |t: f64| (1.0 - (-lambda(t)).exp()) / total;
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = cdf(t);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn finer_simulation_grid_barely_moves_mean_time() {
    let cfg = SimConfig::default();
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..5000u64 {
        let x1 = (i % 97) as f64 / 97.0;
        let x2 = (i % 89) as f64 / 89.0;
        let class = (i % 3) as u8;
        let target = -(1.0 - (i as f64 + 0.5) / 5000.0f64).ln();
        a += invert_cumulative_hazard(&cfg, x1, x2, class, cfg.grid_step, target).min(cfg.admin_cens);
        b += invert_cumulative_hazard(&cfg, x1, x2, class, cfg.grid_step / 10.0, target).min(cfg.admin_cens);
    }
    assert!((a - b).abs() / b < 0.005);
}

#[test]
fn censoring_share_and_class_ordering_across_seeds() {
    let mut ordered = 0;
    for seed in 0..10 {
        let data = generate_dataset(&small_cfg(seed)).unwrap();
        let all: Vec<_> = data.train.iter().chain(&data.val).chain(&data.test).collect();
        let censored = all.iter().filter(|r| !r.status).count() as f64 / all.len() as f64;
        assert!((0.05..=0.60).contains(&censored), "seed {seed}: censored share {censored}");
        for r in &all {
            assert!(r.time > 0.0 && r.time <= 10.0);
            if r.time == 10.0 {
                assert!(!r.status);
            }
        }
        let median = |class: u8| {
            let t: Vec<f64> = all.iter().filter(|r| r.true_class == Some(class)).map(|r| r.time).collect();
            quantile(&t, 0.5).unwrap()
        };
        ordered += (median(2) > median(1)) as usize;
    }
    assert!(ordered >= 9, "class ordering held in {ordered}/10 seeds");
}

#[test]
fn features_are_uniform() {
    let mut passes = 0;
    for seed in 0..10 {
        let data = generate_dataset(&small_cfg(seed)).unwrap();
        let n = data.train.len() as f64;
        let critical = 1.628 / n.sqrt();
        let ok = (0..2).all(|f| {
            let mut x: Vec<f64> = data.train.iter().map(|r| r.features[f]).collect();
            x.sort_by(f64::total_cmp);
            let d = x
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
                .fold(0.0, f64::max);
            d < critical
        });
        passes += ok as usize;
    }
    assert!(passes >= 9);
}

#[test]
fn generation_is_deterministic_and_survives_disk_round_trip() {
    let cfg = SimConfig {
        n_train: 30,
        n_val: 5,
        n_test: 7,
        n_points: 32,
        seed: 3,
        ..SimConfig::default()
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let m1 = write_dataset(dir.path(), &cfg, &a).unwrap();
    let (m2, back) = read_dataset(dir.path(), true).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(back, a);
    let other = tempfile::tempdir().unwrap();
    let m3 = write_dataset(other.path(), &cfg, &b).unwrap();
    assert_eq!(m1, m3);
}
