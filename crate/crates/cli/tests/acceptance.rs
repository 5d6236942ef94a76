//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (uncaptured, so it shows up in the normal `cargo test` output) and then
//! asserts. The tests take a shared lock so their runtimes are measured alone.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, Axis};
use pamsurv::basis::{bspline_design, difference_penalty, SplineSpec};
use pamsurv::deepnet::{encode, loss_and_grads, prepare_subjects, DeepPamModel, EncoderParams, EncoderSpec, SubjectBlock};
use pamsurv::eval::{brier_score, censoring_km};
use pamsurv::pam::{
    build_design, fit_pam, penalized_nll, penalized_nll_gradient, predict_hazard, PsiSelection, SmoothBasis,
    StructuredSpec,
};
use pamsurv::ped::{make_cut_points, transform_to_ped, CutPoints, CutStrategy, SurvivalRecord};
use pamsurv::synth::{generate_dataset, SimConfig};
use pamsurv_cli::models::fit_correct;
use pamsurv_cli::{cmd_experiment, ExperimentConfig, ModelKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, title: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance {id:>2}] {verdict} {title} ({:.1} s): {detail}",
        elapsed.as_secs_f64()
    );
}

fn names(n: &[&str]) -> Vec<String> {
    n.iter().map(|s| s.to_string()).collect()
}

#[test]
fn acceptance_01_intercept_only_pam_is_the_exponential_mle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let mut records: Vec<SurvivalRecord<f64>> = (0..n)
            .map(|i| SurvivalRecord::new(i, rng.random_range(0.01..8.0), rng.random_bool(0.5), vec![]))
            .collect();
        records[0].status = true;
        let t_max = records.iter().map(|r| r.time).fold(0.0, f64::max);
        let cuts = CutPoints::new(vec![0.0, t_max]).unwrap();
        let ped = transform_to_ped(&records, &cuts, &[]).unwrap();
        let fit = fit_pam(&ped, &StructuredSpec::intercept_only(), PsiSelection::Fixed(vec![])).unwrap();
        let events = records.iter().filter(|r| r.status).count() as f64;
        let exposure: f64 = records.iter().map(|r| r.time).sum();
        worst = worst.max((predict_hazard(&fit, &[], 0.5 * t_max) - events / exposure).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-8 && elapsed < Duration::from_secs(1);
    report(1, "exponential MLE oracle", pass, elapsed, &format!("max |h - D/T| = {worst:.2e} over 50 datasets"));
    assert!(pass);
}

fn toy_deep_model(seed: u64) -> (Vec<SurvivalRecord<f64>>, DeepPamModel<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<SurvivalRecord<f64>> = (0..8)
        .map(|i| {
            let mut r = SurvivalRecord::new(i, rng.random_range(0.2..3.0), i % 3 != 2, vec![rng.random_range(-1.0..1.0)]);
            r.cloud = Some(Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0)));
            r
        })
        .collect();
    let cuts = make_cut_points(&records, CutStrategy::EventTimes).unwrap();
    let ped = transform_to_ped(&records, &cuts, &names(&["x1"])).unwrap();
    let spec = StructuredSpec::with_baseline(SmoothBasis::cubic(5)).linear("x1");
    let warm = fit_pam(&ped, &spec, PsiSelection::Fixed(vec![0.7])).unwrap();
    let enc = EncoderSpec {
        point_mlp_dims: vec![3, 6, 5],
        global_mlp_dims: vec![5, 4, 3],
        l2: 0.05,
    };
    let mut model = DeepPamModel::from_warm_start(&warm, &enc, seed).unwrap();
    model.params.gamma.mapv_inplace(|_| rng.random_range(-0.8..0.8));
    // positive biases keep ReLUs away from their kinks
    for l in model.params.encoder.layers_mut() {
        l.b.mapv_inplace(|_| rng.random_range(0.0..0.3));
    }
    (records, model)
}

#[test]
fn acceptance_02_analytic_gradients_match_central_differences() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();

    // (a) penalized Poisson nll
    let mut worst_pam = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..20 {
        let records: Vec<SurvivalRecord<f64>> = (0..15)
            .map(|i| SurvivalRecord::new(i, rng.random_range(0.1..4.0), rng.random_bool(0.7), vec![rng.random_range(-1.0..1.0)]))
            .collect();
        let cuts = CutPoints::new(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let ped = transform_to_ped(&records, &cuts, &names(&["x"])).unwrap();
        let spec = StructuredSpec::with_baseline(SmoothBasis::cubic(5)).smooth("x", SmoothBasis::cubic(6));
        let (layout, design) = build_design(&ped, &spec).unwrap();
        let penalties = layout.penalties();
        let t: Array1<f64> = ped.rows.iter().map(|r| r.t_risk).collect();
        let d: Array1<f64> = ped.rows.iter().map(|r| if r.status { 1.0 } else { 0.0 }).collect();
        let psi = vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)];
        let w: Array1<f64> = (0..layout.n_columns).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |w: &Array1<f64>| penalized_nll(w.view(), design.view(), t.view(), d.view(), &psi, &penalties).unwrap();
        let g = penalized_nll_gradient(w.view(), design.view(), t.view(), d.view(), &psi, &penalties).unwrap();
        let h = 1e-6;
        let fd: Array1<f64> = (0..w.len())
            .map(|k| {
                let mut up = w.clone();
                up[k] += h;
                let mut down = w.clone();
                down[k] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        let rel = (&g - &fd).mapv(|v| v * v).sum().sqrt() / fd.mapv(|v| v * v).sum().sqrt().max(1e-12);
        worst_pam = worst_pam.max(rel);
    }

    // (b) every parameter block of the joint model
    let mut worst_deep = 0.0f64;
    for seed in 0..3 {
        let (records, model) = toy_deep_model(seed);
        let subjects = prepare_subjects(&records, &model.cuts, &model.layout).unwrap();
        let batch: Vec<&SubjectBlock<f64>> = subjects[..3].iter().collect();
        let psi = model.psi.clone();
        let analytic = loss_and_grads(&batch, &model, &psi, 0.375, 0).unwrap().grads;
        let mut probe = model.clone();
        let h = 1e-6;
        for b in 0..model.params.blocks().len() {
            let len = model.params.blocks()[b].len();
            let mut fd = vec![0.0; len];
            for k in 0..len {
                let orig = model.params.blocks()[b][k];
                probe.params.blocks_mut()[b][k] = orig + h;
                let up = loss_and_grads(&batch, &probe, &psi, 0.375, 0).unwrap().loss;
                probe.params.blocks_mut()[b][k] = orig - h;
                let down = loss_and_grads(&batch, &probe, &psi, 0.375, 0).unwrap().loss;
                probe.params.blocks_mut()[b][k] = orig;
                fd[k] = (up - down) / (2.0 * h);
            }
            let g = analytic.blocks()[b];
            let diff = g.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
            let size = fd.iter().map(|f| f * f).sum::<f64>().sqrt().max(1e-8);
            worst_deep = worst_deep.max(diff / size);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_pam < 1e-5 && worst_deep < 1e-4 && elapsed < Duration::from_secs(30);
    report(
        2,
        "gradient suites",
        pass,
        elapsed,
        &format!("penalized nll rel err {worst_pam:.2e}, joint model rel err {worst_deep:.2e}"),
    );
    assert!(pass);
}

#[test]
fn acceptance_03_spline_identities() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_unity = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut null_ok = true;
    for _ in 0..300 {
        let degree = rng.random_range(0..5);
        let m = (degree + 1 + rng.random_range(0..10)).max(2);
        let lo = rng.random_range(-5.0..5.0);
        let hi = lo + rng.random_range(0.1..20.0);
        let order = rng.random_range(1..m.min(5));
        let spec = SplineSpec::new(degree, m, lo, hi, order).unwrap();
        let x: Array1<f64> = (0..60).map(|_| rng.random_range(lo..=hi)).collect();
        let b = bspline_design(x.view(), &spec).unwrap();
        for row in b.rows() {
            worst_unity = worst_unity.max((row.sum() - 1.0).abs());
        }
        let s = difference_penalty::<f64>(m, order).unwrap();
        let eig = DMatrix::from_fn(m, m, |i, j| s.matrix[[i, j]]).symmetric_eigenvalues();
        let scale = eig.iter().fold(1.0f64, |a, &e| a.max(e.abs()));
        min_eig = min_eig.min(eig.min() / scale);
        let null = eig.iter().filter(|&&e| e.abs() < 1e-9 * scale).count();
        null_ok &= null == order;
    }
    let elapsed = start.elapsed();
    let pass = worst_unity <= 1e-10 && min_eig >= -1e-12 && null_ok && elapsed < Duration::from_secs(5);
    report(
        3,
        "spline identities",
        pass,
        elapsed,
        &format!("max |sum B - 1| = {worst_unity:.2e}, min scaled eigenvalue {min_eig:.2e}, null dim = order: {null_ok}"),
    );
    assert!(pass);
}

fn random_cuts(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cuts = vec![0.0];
    for _ in 0..rng.random_range(1..15) {
        let next = cuts.last().unwrap() + rng.random_range(0.05..2.0);
        cuts.push(next);
    }
    cuts
}

/// Per-subject (events, exposure) from a PED transform.
fn ped_totals(records: &[SurvivalRecord<f64>], cuts: &CutPoints<f64>) -> Vec<(usize, f64)> {
    let ped = transform_to_ped(records, cuts, &names(&["x"])).unwrap();
    let mut out = vec![(0, 0.0); records.len()];
    for row in &ped.rows {
        let e = &mut out[row.id as usize];
        e.0 += row.status as usize;
        e.1 += row.t_risk;
    }
    out
}

#[test]
fn acceptance_04_ped_conservation() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let records: Vec<SurvivalRecord<f64>> = (0..n)
            .map(|i| SurvivalRecord::new(i, rng.random_range(0.01..15.0), rng.random_bool(0.6), vec![0.0]))
            .collect();
        let raw = random_cuts(&mut rng);
        let cuts = CutPoints::new(raw.clone()).unwrap();
        let last = cuts.last();
        let totals = ped_totals(&records, &cuts);
        for (r, &(events, exposure)) in records.iter().zip(&totals) {
            counts_ok &= events == (r.status && r.time <= last) as usize;
            worst = worst.max((exposure - r.time.min(last)).abs());
        }
        // inserting extra cuts inside the range never changes the totals
        let mut refined = raw;
        for _ in 0..rng.random_range(1..4) {
            refined.push(rng.random_range(0.0..last));
        }
        refined.sort_by(|a, b| a.partial_cmp(b).unwrap());
        refined.dedup();
        let finer = ped_totals(&records, &CutPoints::new(refined).unwrap());
        for (a, b) in totals.iter().zip(&finer) {
            counts_ok &= a.0 == b.0;
            worst = worst.max((a.1 - b.1).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = counts_ok && worst <= 1e-12 && elapsed < Duration::from_secs(10);
    report(
        4,
        "PED conservation",
        pass,
        elapsed,
        &format!("1000 datasets, events conserved: {counts_ok}, max exposure error {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn acceptance_05_encoder_symmetry() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let spec = EncoderSpec::default();
    let params = EncoderParams::<f64>::init(&spec, &mut rng);

    // end-to-end model with the default encoder
    let records: Vec<SurvivalRecord<f64>> = (0..30)
        .map(|i| {
            let mut r = SurvivalRecord::new(i, rng.random_range(0.2..5.0), i % 4 != 0, vec![rng.random(), rng.random()]);
            r.cloud = Some(Array2::from_shape_fn((16, 3), |_| rng.random_range(-1.0..1.0)));
            r
        })
        .collect();
    let cuts = make_cut_points(&records, CutStrategy::EventTimes).unwrap();
    let ped = transform_to_ped(&records, &cuts, &names(&["x1", "x2"])).unwrap();
    let pam_spec = StructuredSpec::with_baseline(SmoothBasis::cubic(6)).linear("x1").linear("x2");
    let warm = fit_pam(&ped, &pam_spec, PsiSelection::Fixed(vec![1.0])).unwrap();
    let mut model = DeepPamModel::from_warm_start(&warm, &spec, 9).unwrap();
    model.params.gamma.mapv_inplace(|_| rng.random_range(-0.5..0.5));

    let mut all_equal = true;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let cloud = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = cloud.select(Axis(0), &perm);
        let doubled = concatenate(Axis(0), &[cloud.view(), permuted.view()]).unwrap();
        let z = encode(cloud.view(), &params).unwrap();
        all_equal &= encode(permuted.view(), &params).unwrap() == z;
        all_equal &= encode(doubled.view(), &params).unwrap() == z;

        let mut rec = SurvivalRecord::new(0, 1.0, true, vec![rng.random(), rng.random()]);
        rec.cloud = Some(cloud);
        let base = model.curve(&rec).unwrap();
        for other in [permuted, doubled] {
            rec.cloud = Some(other);
            all_equal &= model.curve(&rec).unwrap().log_hazard_by_interval() == base.log_hazard_by_interval();
        }
    }
    let elapsed = start.elapsed();
    let pass = all_equal && elapsed < Duration::from_secs(5);
    report(
        5,
        "encoder symmetry",
        pass,
        elapsed,
        &format!("100 clouds, latent and hazards bit-identical under permutation/duplication: {all_equal}"),
    );
    assert!(pass);
}

#[test]
fn acceptance_06_brier_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let rec = |id, t, d| SurvivalRecord::new(id, t, d, vec![]);
    let data = vec![rec(0, 1.0, true), rec(1, 2.0, false), rec(2, 3.0, true), rec(3, 4.0, false)];
    let g = censoring_km(&data).unwrap();
    let preds = [0.8, 0.6, 0.5, 0.3];
    let curves: Vec<_> = preds.iter().map(|&s| move |_: f64| s).collect();
    // G = 1 before 2 and 2/3 after: 0.8^2/1, censored before t, 0.5^2/(2/3), 0.7^2/(2/3)
    let expected = (0.64 + 0.0 + 0.375 + 0.735) / 4.0;
    let bs = brier_score(&data, &curves, 2.5, &g).unwrap().bs;
    let fixture_err = (bs - expected).abs();

    let uncensored: Vec<SurvivalRecord<f64>> = (0..25).map(|i| rec(i, 0.3 + 0.4 * i as f64, true)).collect();
    let g = censoring_km(&uncensored).unwrap();
    let half: Vec<_> = uncensored.iter().map(|_| |_: f64| 0.5).collect();
    let const_err = (1..20)
        .map(|k| (brier_score(&uncensored, &half, 0.5 * k as f64, &g).unwrap().bs - 0.25).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = fixture_err <= 1e-12 && const_err <= 1e-12 && elapsed < Duration::from_secs(1);
    report(
        6,
        "Brier oracle",
        pass,
        elapsed,
        &format!("fixture BS {bs:.12} vs {expected}, constant-predictor error {const_err:.1e}"),
    );
    assert!(pass);
}

#[test]
fn acceptance_07_08_benchmark_ordering_and_class_effects() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempdir().unwrap();
    let cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let rep = cmd_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let per_replicate = elapsed / cfg.n_replicates as u32;

    let rel = |m| rep.row(m, "q50").and_then(|r| r.mean_rel_ibs).unwrap_or(f64::NAN);
    let (km, base, deep) = (rel(ModelKind::Km), rel(ModelKind::PamBaseline), rel(ModelKind::Deeppam));
    let ordering = km > base && base > deep && deep >= -1.0 && deep < 0.5 * base;
    let pass7 = !rep.failed() && ordering && elapsed < Duration::from_secs(20 * 60);
    report(
        7,
        "benchmark ordering at the median horizon",
        pass7,
        elapsed,
        &format!(
            "mean relative IBS km {km:.2} > pam_baseline {base:.2} > deeppam {deep:.2} (>= -1, < half of baseline); {:.0} s per replicate",
            per_replicate.as_secs_f64()
        ),
    );

    let evals: Vec<_> = rep.replicates.iter().filter_map(|r| r.evaluation.as_ref()).collect();
    let offsets = |m| -> Vec<[f64; 2]> { evals.iter().filter_map(|e| e.score(m).and_then(|s| s.class_offsets)).collect() };
    let deep_off = offsets(ModelKind::Deeppam);
    let base_off = offsets(ModelKind::PamBaseline);
    let gamma = cfg.sim.gamma;
    let deep_hits = deep_off
        .iter()
        .filter(|o| (o[0] - gamma[0]).abs() <= 0.3 && (o[1] - gamma[1]).abs() <= 0.3)
        .count();
    let base_max = base_off.iter().flat_map(|o| o.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let pass8 = evals.len() == 10 && deep_hits >= 7 && base_off.len() == 10 && base_max <= 0.1;
    let shown: Vec<String> = deep_off.iter().map(|o| format!("({:.2}, {:.2})", o[0], o[1])).collect();
    report(
        8,
        "class log-hazard offsets",
        pass8,
        elapsed,
        &format!(
            "deeppam within 0.3 of {gamma:?} in {deep_hits}/10 replicates {}; baseline max |offset| {base_max:.3}",
            shown.join(" ")
        ),
    );
    assert!(pass7 && pass8);
}

#[test]
fn acceptance_09_correct_pam_recovers_class_effects() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.cuts = CutStrategy::Grid {
        n_intervals: 100,
        t_max: 10.0,
    };
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    for seed in 0..5 {
        let sim = SimConfig {
            n_train: 5000,
            n_points: 1,
            seed: 900 + seed,
            ..SimConfig::default()
        };
        let data = generate_dataset(&sim).unwrap();
        let fit = fit_correct(&data, &cfg).unwrap();
        g1.push(fit.linear_coefficient("class1").unwrap());
        g2.push(fit.linear_coefficient("class2").unwrap());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let (m1, m2) = (median(&mut g1), median(&mut g2));
    let elapsed = start.elapsed();
    let gamma = cfg.sim.gamma;
    let pass = (m1 - gamma[0]).abs() <= 0.15 && (m2 - gamma[1]).abs() <= 0.15 && elapsed < Duration::from_secs(120);
    report(
        9,
        "correct PAM recovers class effects",
        pass,
        elapsed,
        &format!("median estimates ({m1:.3}, {m2:.3}) vs {gamma:?} over 5 seeds at n_train = 5000"),
    );
    assert!(pass);
}

#[test]
fn acceptance_10_experiment_is_deterministic() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.sim.n_train = 250;
    cfg.sim.n_val = 60;
    cfg.sim.n_test = 90;
    cfg.sim.n_points = 64;
    cfg.sim.seed = 77;
    cfg.train.max_epochs = 4;
    cfg.n_replicates = 2;
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = dir.path().join(run);
        cmd_experiment(&cfg).unwrap();
        tables.push(std::fs::read(cfg.output_dir.join("table2.csv")).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = tables[0] == tables[1] && !tables[0].is_empty();
    report(
        10,
        "deterministic experiment",
        pass,
        elapsed,
        &format!("two runs, table2.csv byte-identical ({} bytes): {pass}", tables[0].len()),
    );
    assert!(pass);
}
