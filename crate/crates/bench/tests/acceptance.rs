//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tsc::dataio::{gen_synthetic_lines, line_pattern, PatchSource};
use tsc::trainer::{evaluate, train};
use tsc::{
    build_generators, feature_sign, lasso_objective, matexp_param_grad, transform_matrix, GeneratorSet,
    PatchBatch, QuadratureRule, TrainConfig, TransformParams, GROUP_DIM,
};
use tsc_bench::commands::{compare_row, load_split};
use tsc_bench::config::{parse_rows, SYNTHETIC};
use tsc_bench::report::{DofReport, REFERENCE_LAYOUTS};
use tsc_bench::RunConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_params(rng: &mut ChaCha8Rng, bound: f64) -> TransformParams<f64> {
    TransformParams(std::array::from_fn(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn criterion_1() -> Outcome {
    // Reference rows in table order, with the 1x64 entry as the formula gives it.
    let expected = [
        ((1, 64), 483, 6336),
        ((1, 128), 867, 12672),
        ((8, 8), 1176, 6336),
        ((4, 16), 780, 6336),
        ((8, 8), 1176, 6336),
        ((4, 16), 780, 6336),
        ((16, 16), 3120, 25344),
        ((8, 32), 2328, 25344),
    ];
    let mut bad = Vec::new();
    for ((t, b), tsc, sc) in expected {
        let r = DofReport::new(t, b, 100);
        if (r.df_tsc, r.df_sc) != (tsc, sc) {
            bad.push(format!("{t}x{b}: {} / {}", r.df_tsc, r.df_sc));
        }
        let flagged = r.note.as_deref().is_some_and(|n| n.contains("447") && n.contains("483"));
        if flagged != ((t, b) == (1, 64)) {
            bad.push(format!("{t}x{b}: discrepancy flag {flagged}"));
        }
    }
    let ratios: Vec<String> = REFERENCE_LAYOUTS.iter().map(|&(t, b)| DofReport::new(t, b, 100).ratio_text()).collect();
    if ratios != ["13.11", "14.61", "5.38", "8.12", "8.12", "10.88"] {
        bad.push(format!("ratios {ratios:?}"));
    }
    outcome(bad.is_empty(), if bad.is_empty() { "all rows exact, 1x64 flagged (483 vs 447)".into() } else { bad.join("; ") })
}

fn fd_linear(gens: &GeneratorSet<f64>, x: &TransformParams<f64>, c: &DMatrix<f64>, h: f64) -> [f64; GROUP_DIM] {
    let f = |y: &TransformParams<f64>| frobenius(c, &transform_matrix(gens, y).unwrap());
    std::array::from_fn(|j| {
        let (mut p, mut m) = (*x, *x);
        p[j] += h;
        m[j] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

fn criterion_2() -> Outcome {
    let gens = build_generators::<f64>(8).unwrap();
    let rule = QuadratureRule::gauss_legendre(16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let (mut worst_large, mut worst_small) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let bound = if i < 10 { 0.5 } else { 0.1 };
        let x = random_params(&mut rng, bound);
        let c = random_matrix(&mut rng, 64, 64);
        let g = matexp_param_grad(&gens, &x, &c, &rule).unwrap();
        let fd = fd_linear(&gens, &x, &c, 1e-5);
        for j in 0..GROUP_DIM {
            let rel = (g[j] - fd[j]).abs() / fd[j].abs().max(1e-12);
            if bound <= 0.1 {
                worst_small = worst_small.max(rel);
            } else {
                worst_large = worst_large.max(rel);
            }
        }
    }
    outcome(
        worst_large < 1e-3 && worst_small < 1e-4,
        format!("max rel error {worst_large:.2e} (|x|<=0.5), {worst_small:.2e} (|x|<=0.1)"),
    )
}

fn criterion_3() -> Outcome {
    let gens = build_generators::<f64>(8).unwrap();
    let exact_rule = QuadratureRule::gauss_legendre(32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let samples = 10_000;
    let mut worst_z = 0.0f64;
    for _ in 0..5 {
        let x = random_params(&mut rng, 0.5);
        let c = random_matrix(&mut rng, 64, 64);
        let exact = matexp_param_grad(&gens, &x, &c, &exact_rule).unwrap();
        let mut sum = [0.0; GROUP_DIM];
        let mut sum_sq = [0.0; GROUP_DIM];
        for _ in 0..samples {
            let rule = QuadratureRule::stochastic(1, &mut rng).unwrap();
            let g = matexp_param_grad(&gens, &x, &c, &rule).unwrap();
            for j in 0..GROUP_DIM {
                sum[j] += g[j];
                sum_sq[j] += g[j] * g[j];
            }
        }
        let n = samples as f64;
        for j in 0..GROUP_DIM {
            let mean = sum[j] / n;
            let var = (sum_sq[j] - n * mean * mean) / (n - 1.0);
            let se = (var / n).sqrt();
            worst_z = worst_z.max((mean - exact[j]).abs() / se.max(f64::MIN_POSITIVE));
        }
    }
    outcome(worst_z < 3.0, format!("max |mean - exact| = {worst_z:.2} standard errors over 30 components"))
}

/// Sum of random sinusoids strictly below the Nyquist frequency.
fn band_limited_patch(rng: &mut ChaCha8Rng, side: usize) -> DVector<f64> {
    let w = 2.0 * std::f64::consts::PI / side as f64;
    let half = (side as i64 - 1) / 2;
    let mut terms = Vec::new();
    for _ in 0..6 {
        let kx = rng.random_range(-half..=half) as f64;
        let ky = rng.random_range(-half..=half) as f64;
        terms.push((kx, ky, rng.random::<f64>() * 6.3, rng.random::<f64>() + 0.2));
    }
    DVector::from_fn(side * side, |p, _| {
        let (r, c) = ((p / side) as f64, (p % side) as f64);
        terms.iter().map(|&(kx, ky, ph, a)| a * (w * (kx * c + ky * r) + ph).cos()).sum()
    })
}

/// Circular shift: output pixel (r, c) takes input pixel (r - dy, c - dx).
fn circular_shift(side: usize, img: &DVector<f64>, dx: i64, dy: i64) -> DVector<f64> {
    let s = side as i64;
    DVector::from_fn(side * side, |p, _| {
        let (r, c) = ((p / side) as i64, (p % side) as i64);
        img[((r - dy).rem_euclid(s) * s + (c - dx).rem_euclid(s)) as usize]
    })
}

fn criterion_4() -> Outcome {
    let side = 8;
    let gens = build_generators::<f64>(side).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut worst_shift = 0.0f64;
    for _ in 0..5 {
        let img = band_limited_patch(&mut rng, side);
        for d in [-2i64, -1, 1, 2] {
            for (dx, dy) in [(d, 0), (0, d)] {
                let mut x = TransformParams::zero();
                x[0] = dx as f64;
                x[1] = dy as f64;
                let got = transform_matrix(&gens, &x).unwrap() * &img;
                let want = circular_shift(side, &img, dx, dy);
                worst_shift = worst_shift.max((got - &want).norm() / want.norm());
            }
        }
    }
    let eye = DMatrix::<f64>::identity(64, 64);
    let identity_err = (transform_matrix(&gens, &TransformParams::zero()).unwrap() - &eye).amax();
    let mut worst_inverse = 0.0f64;
    for _ in 0..50 {
        let x = random_params(&mut rng, 1.0);
        let prod = transform_matrix(&gens, &x).unwrap() * transform_matrix(&gens, &x.scaled(-1.0)).unwrap();
        worst_inverse = worst_inverse.max((prod - &eye).amax());
    }
    outcome(
        worst_shift < 1e-3 && identity_err <= 1e-12 && worst_inverse <= 1e-8,
        format!("shift rel L2 {worst_shift:.2e}, |T(0)-I| {identity_err:.1e}, |T(x)T(-x)-I| {worst_inverse:.2e}"),
    )
}

/// Minimum of the objective over every sign pattern's sign-consistent stationary point.
fn brute_force(dict: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
    let k = dict.ncols();
    let mut best = y.norm_squared();
    for code in 1..3usize.pow(k as u32) {
        let (mut c, mut support, mut signs) = (code, Vec::new(), Vec::new());
        for j in 0..k {
            match c % 3 {
                1 => {
                    support.push(j);
                    signs.push(1.0);
                }
                2 => {
                    support.push(j);
                    signs.push(-1.0);
                }
                _ => {}
            }
            c /= 3;
        }
        if support.len() > dict.nrows() {
            continue;
        }
        let sub = dict.select_columns(&support);
        let Some(chol) = sub.tr_mul(&sub).cholesky() else { continue };
        let ws = chol.solve(&(sub.tr_mul(y) - DVector::from_vec(signs.clone()) * (lambda / 2.0)));
        if ws.iter().zip(&signs).any(|(w, s)| w * s <= 0.0) {
            continue;
        }
        let mut w = DVector::zeros(k);
        for (i, &j) in support.iter().enumerate() {
            w[j] = ws[i];
        }
        best = best.min(lasso_objective(dict, y, &w, lambda).unwrap());
    }
    best
}

fn kkt_residual(dict: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, lambda: f64) -> f64 {
    let grad = dict.tr_mul(&(dict * w - y)) * 2.0;
    (0..w.len())
        .map(|j| if w[j] != 0.0 { (grad[j] + lambda * w[j].signum()).abs() } else { (grad[j].abs() - lambda).max(0.0) })
        .fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let (mut worst_obj, mut worst_kkt) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let m = rng.random_range(2..=10);
        let k = rng.random_range(1..=8);
        let dict = random_matrix(&mut rng, m, k);
        let y = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda = rng.random_range(0.01..3.0);
        let w = feature_sign(&dict, &y, lambda).unwrap();
        let got = lasso_objective(&dict, &y, w.weights(), lambda).unwrap();
        let want = brute_force(&dict, &y, lambda);
        worst_obj = worst_obj.max((got - want).abs() / want.max(1.0));
        worst_kkt = worst_kkt.max(kkt_residual(&dict, &y, w.weights(), lambda));
    }
    outcome(
        worst_obj <= 1e-8 && worst_kkt < 1e-8,
        format!("max objective gap {worst_obj:.1e}, max KKT residual {worst_kkt:.1e}"),
    )
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus")
}

fn criterion_6() -> Outcome {
    let cfg = RunConfig {
        train: TrainConfig {
            side: 8,
            lambda_w: 0.4,
            epochs: 200,
            init_translation_sigma: Some(1.0),
            seed: 1,
            ..TrainConfig::default()
        },
        data: Some(corpus().to_string_lossy().into_owned()),
        patches: 50_000,
        holdout: 0.1,
        sc_epochs: None,
        rows: parse_rows("0.4:4x8").unwrap(),
    };
    let (pool, held) = load_split(&cfg).unwrap();
    assert_eq!(held.len(), 5000);
    let row = compare_row(&cfg, 0.4, 4, 8, &pool, &held).unwrap();
    let ratio = row.tsc_mse / row.sc_mse;
    let sparsity_gap = (row.tsc_sparsity - row.sc_sparsity).abs() / row.sc_sparsity;
    let df_ok = 3 * row.df_tsc < row.df_sc;
    outcome(
        ratio <= 1.35 && sparsity_gap <= 0.35 && df_ok,
        format!(
            "mse {:.4} vs {:.4} (ratio {ratio:.3}), sparsity {:.2} vs {:.2} (gap {:.0}%), df {} vs {}",
            row.tsc_mse,
            row.sc_mse,
            row.tsc_sparsity,
            row.sc_sparsity,
            sparsity_gap * 100.0,
            row.df_tsc,
            row.df_sc
        ),
    )
}

fn line_templates() -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for pos in 0..8 {
        for pattern in [line_pattern(8, Some(pos), None), line_pattern(8, None, Some(pos))] {
            let centered = pattern.add_scalar(-pattern.mean());
            out.push(centered.normalize());
        }
    }
    out
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let pool = gen_synthetic_lines::<f64, _>(20_000, 8, &mut rng).unwrap();
    let held = gen_synthetic_lines::<f64, _>(2_000, 8, &mut rng).unwrap();
    let cfg = TrainConfig {
        side: 8,
        trees: 2,
        branching: 8,
        lambda_w: 0.4,
        epochs: 200,
        init_translation_sigma: Some(2.0),
        seed: 10,
        ..TrainConfig::default()
    };
    let (forest, _) = train(&cfg, &pool).unwrap();
    let leaves = forest.materialize_leaves(&build_generators(8).unwrap()).unwrap();
    let eval = evaluate(&leaves, &held, cfg.lambda_w).unwrap();
    let mse_fraction = eval.mse / held.constant_predictor_mse();
    let worst_corr = line_templates()
        .iter()
        .map(|t| leaves.column_iter().map(|l| (l.dot(t) / l.norm()).abs()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    outcome(
        mse_fraction <= 0.2 && worst_corr > 0.8,
        format!(
            "(a) held-out mse {:.1}% of constant predictor [{}]; (b) weakest template's best |corr| {worst_corr:.3} [{}]",
            mse_fraction * 100.0,
            if mse_fraction <= 0.2 { "ok" } else { "fail" },
            if worst_corr > 0.8 { "ok" } else { "fail" }
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("data = {SYNTHETIC}\ntrees = 2\nbranching = 4\npatches = 1000\nbatch_size = 400\nepochs = 10\nreinit_every = 3\n"),
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_tsc-bench"))
            .args(["--quiet", "--seed", "77", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .arg("train")
            .status()
            .unwrap();
        assert!(status.success());
        (std::fs::read(out.join("metrics.txt")).unwrap(), std::fs::read(out.join("model.tsc")).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    outcome(a == b, format!("metrics {} bytes, model {} bytes, identical: {}", a.0.len(), a.1.len(), a == b))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    let raw = DMatrix::from_fn(36, 300, |_, _| rng.random::<f64>());
    let pool = PatchBatch::from_raw(6, raw, vec![PatchSource::Unknown; 300]).unwrap();
    let cfg = TrainConfig {
        side: 6,
        trees: 2,
        branching: 4,
        lambda_w: 0.0,
        lambda_base: 0.0,
        backtracking: true,
        epochs: 50,
        batch_size: 300,
        seed: 9,
        ..TrainConfig::default()
    };
    let (_, metrics) = train(&cfg, &pool).unwrap();
    let mut violations = 0;
    let mut excused = 0;
    for pair in metrics.epochs.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.loss.total > prev.loss.total * (1.0 + 1e-12) {
            if prev.reinits > 0 {
                excused += 1;
            } else {
                violations += 1;
            }
        }
    }
    let first = metrics.epochs[0].loss.total;
    let last = metrics.epochs.last().unwrap().loss.total;
    outcome(
        violations == 0 && metrics.epochs.len() == 50,
        format!("{violations} increases outside re-init epochs ({excused} after re-init); mse {first:.4} -> {last:.4}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 DOF table", criterion_1),
        ("2 gradient vs finite differences", criterion_2),
        ("3 stochastic gradient unbiased", criterion_3),
        ("4 group action oracle", criterion_4),
        ("5 feature-sign exactness", criterion_5),
        ("6 desk-scale comparison", criterion_6),
        ("7 synthetic double lines", criterion_7),
        ("8 determinism", criterion_8),
        ("9 monotone mse", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {status} ({:.1}s) {}", start.elapsed().as_secs_f64(), result.detail);
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
