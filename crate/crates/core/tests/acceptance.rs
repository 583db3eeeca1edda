//! Acceptance checks, run in order inside one test so the timed ones do not
//! share the CPU. Each prints a PASS or FAIL line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use contime::data::{self, SynthConfig};
use contime::gru::{self, GruCellParams, LagState};
use contime::metrics;
use contime::model::{self, Branches, ContimeParams, ModelDims};
use contime::ode::{self, Direction, IntegrationConfig, SolverConfig};
use contime::ops::Eager;
use contime::run::{self, DataSource, RunConfig};
use contime::spline::{fit_regular, path_derivative, path_value};
use contime::tensor::Matrix;
use contime::training::{self, LossConfig, LossMode, PreparedWindow, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// written to the real stdout so the lines survive the test harness capture
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn within(elapsed: Duration, limit: Duration) {
    assert!(elapsed < limit, "took {elapsed:?}, limit {limit:?}");
}

fn spline_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut probes = 0;
    for _ in 0..10 {
        let (n, f) = (rng.gen_range(4..30), rng.gen_range(1..4));
        let values = rand_matrix(&mut rng, n, f, 5.0);
        let path = fit_regular(&values).unwrap();
        for k in 0..n {
            let v = path_value(&path, k as f64).unwrap();
            for (a, b) in v.iter().zip(values.row(k)) {
                assert!((a - b).abs() <= 1e-12, "knot {k}: {a} vs {b}");
            }
        }
        for _ in 0..100 {
            // central differences that stay inside one cubic piece
            let t: f64 = rng.gen_range(0.0..(n - 1) as f64);
            let gap = (t - t.floor()).min(t.floor() + 1.0 - t);
            if gap < 1e-4 {
                continue;
            }
            let h = (gap / 2.0).min(1e-5);
            let d = path_derivative(&path, t).unwrap();
            let (p, m) = (path_value(&path, t + h).unwrap(), path_value(&path, t - h).unwrap());
            for j in 0..f {
                let fd = (p[j] - m[j]) / (2.0 * h);
                assert!(rel(d[j], fd, 1e-3) < 1e-5, "t={t}: {} vs {fd}", d[j]);
            }
            probes += 1;
        }
    }
    assert!(probes >= 950, "only {probes} probes");
    within(start.elapsed(), Duration::from_secs(1));
}

/// Smooth control path and lag trajectory with their exact derivatives.
fn control(t: f64) -> (Vec<f64>, Vec<f64>) {
    (
        vec![(1.3 * t).sin(), 0.5 * (0.7 * t).cos() + 0.2 * t],
        vec![1.3 * (1.3 * t).cos(), -0.35 * (0.7 * t).sin() + 0.2],
    )
}

fn lag_path(t: f64) -> (Vec<f64>, Vec<f64>) {
    (
        vec![(0.9 * t).tanh(), 0.4 * (2.1 * t).sin(), -0.3 + 0.1 * t * t, (0.5 * t).cos()],
        vec![0.9 / (0.9 * t).cosh().powi(2), 0.84 * (2.1 * t).cos(), 0.2 * t, -0.5 * (0.5 * t).sin()],
    )
}

fn gate_calculus() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cell = GruCellParams::init(4, 2, &mut rng);
    let at = |t: f64| {
        let (x, _) = control(t);
        let (h, dh) = lag_path(t);
        let lag = LagState { h_lag: h, dh_lag: dh };
        let g = gru::gate_states(&mut Eager, &cell, &x, &lag).unwrap();
        let state = gru::hidden_state(&g, &lag);
        (g, state, lag)
    };
    let eps = 1e-5;
    let fd = |p: f64, m: f64| (p - m) / (2.0 * eps);
    let mut checked = 0;
    for k in 0..40 {
        let t = 0.05 + 0.1 * k as f64;
        let (g, _, lag) = at(t);
        let (_, dx) = control(t);
        let d = gru::gate_derivatives(&mut Eager, &cell, &dx, &lag, &g).unwrap();
        let dh = gru::hidden_derivative(&mut Eager, &g, &d, &lag).unwrap();
        let (gp, hp, _) = at(t + eps);
        let (gm, hm, _) = at(t - eps);
        for i in 0..4 {
            for (name, an, num) in [
                ("dz/dt", d.dz_dt[i], fd(gp.z[i], gm.z[i])),
                ("dg/dt", d.dg_dt[i], fd(gp.g[i], gm.g[i])),
                ("dr/dt", d.dr_dt[i], fd(gp.r[i], gm.r[i])),
                ("dh/dt", dh[i], fd(hp[i], hm[i])),
            ] {
                assert!(rel(an, num, 1e-3) < 1e-4, "{name}[{i}] at t={t}: {an} vs {num}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 640);
    within(start.elapsed(), Duration::from_secs(5));
}

fn terminal_state(cell: &GruCellParams, path: &contime::spline::ContinuousPath, h0: &[f64], step: f64, tau: f64) -> Vec<f64> {
    let (lo, hi) = path.span();
    let cfg = IntegrationConfig {
        step,
        lag_interval: tau,
        direction: Direction::Forward,
        t_start: lo,
        t_end: hi,
    };
    let traj = ode::integrate_hidden(&mut Eager, cell, path, h0.to_vec(), &cfg).unwrap();
    traj.terminal().0.clone()
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn solver_order() {
    let h = ode::rk4_step(&mut Eager, |_: &mut Eager, _t: f64, h: &Vec<f64>| Ok(vec![-h[0]]), 0.0, &vec![1.0], 0.1)
        .unwrap();
    let mut y = vec![1.0];
    for k in 0..10 {
        y = ode::rk4_step(&mut Eager, |_: &mut Eager, _t: f64, h: &Vec<f64>| Ok(vec![-h[0]]), 0.1 * k as f64, &y, 0.1)
            .unwrap();
    }
    assert!((y[0] - (-1.0f64).exp()).abs() < 1e-6, "{} vs e^-1", y[0]);
    assert!(h[0] < 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cell = GruCellParams::init(5, 2, &mut rng);
    let path = fit_regular(&rand_matrix(&mut rng, 9, 2, 1.0)).unwrap();
    let h0: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect();
    // the delay is held at 1/2 so every run solves the same problem
    let tau = 0.5;
    let reference = terminal_state(&cell, &path, &h0, 1.0 / 512.0, tau);
    let steps = [0.25, 0.125, 0.0625, 0.03125];
    let errs: Vec<f64> = steps.iter().map(|&s| dist(&terminal_state(&cell, &path, &h0, s, tau), &reference)).collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    say!("    errors [{}], orders {orders:.2?}", sci(&errs));
    for o in &orders {
        assert!(*o >= 3.5, "order {o}");
    }
}

fn gradient_check() {
    let start = Instant::now();
    let dims = ModelDims {
        hidden: 4,
        features: 2,
        input_len: 8,
        pred_len: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ContimeParams::init(dims, &mut rng).unwrap();
    let input = rand_matrix(&mut rng, 8, 2, 1.0);
    let target = rand_matrix(&mut rng, 4, 2, 1.0);
    let win = PreparedWindow::new(&data::Window {
        start: 0,
        last_obs: input.row(7).to_vec(),
        input,
        target,
    })
    .unwrap();
    let solver = SolverConfig::default();
    let loss = LossConfig {
        alpha: 0.9,
        beta: 0.1,
        mode: LossMode::TaskDelta,
        ..Default::default()
    };
    let (_, grads) = training::window_gradient(&params, &win, &solver, &loss, true, Branches::Both).unwrap();
    let total = |p: &ContimeParams| training::window_eval(p, &win, &solver, &loss, true).unwrap().total;

    let mut analytic = Vec::new();
    grads.visit(|name, v| analytic.push((name.to_string(), v.clone())));
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, g) in &analytic {
        for (k, &gk) in g.iter().enumerate() {
            let eps = 1e-6;
            let nudge = |d: f64| {
                let mut p = params.clone();
                p.visit_mut(|n, v| {
                    if n == name {
                        v[k] += d;
                    }
                });
                total(&p)
            };
            let fd = (nudge(eps) - nudge(-eps)) / (2.0 * eps);
            let r = rel(gk, fd, 1e-6);
            worst = worst.max(r);
            assert!(r < 1e-4, "{name}[{k}]: tape {gk} vs fd {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, params.num_parameters());
    say!("    {checked} parameters, worst relative error {worst:.2e}");
    within(start.elapsed(), Duration::from_secs(60));
}

/// Minimum over every monotone path from corner to corner.
fn brute_dtw(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]) * (a[i] - b[j]);
        let n = a.len();
        if i == n - 1 && j == n - 1 {
            *best = best.min(acc);
            return;
        }
        if i + 1 < n && j + 1 < n {
            walk(a, b, i + 1, j + 1, acc, best);
        }
        if i + 1 < n {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < n {
            walk(a, b, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn dtw_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let p = rng.gen_range(1..=6);
        let a: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (cost, _) = metrics::dtw(&a, &b).unwrap();
        assert_eq!(cost, brute_dtw(&a, &b), "{a:?} {b:?}");
        assert_eq!(metrics::tdi(&a, &a).unwrap(), 0.0);
        assert_eq!(metrics::tdi(&b, &b).unwrap(), 0.0);
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (hard, _) = metrics::dtw(&a, &b).unwrap();
        for gamma in [1e-3, 0.1, 1.0] {
            let (soft, _) = metrics::soft_dtw(&a, &b, gamma).unwrap();
            assert!(soft <= hard, "gamma {gamma}: soft {soft} > hard {hard}");
            if gamma == 1e-3 {
                worst = worst.max(hard - soft);
                assert!((soft - hard).abs() < 1e-2, "soft {soft} vs hard {hard}");
            }
        }
    }
    say!("    largest hard − soft gap at gamma 1e-3: {worst:.2e}");
}

fn derivative_head_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let dims = ModelDims {
            hidden: rng.gen_range(2..7),
            features: rng.gen_range(1..4),
            input_len: rng.gen_range(4..10),
            pred_len: rng.gen_range(1..6),
        };
        let mut params = ContimeParams::init(dims, &mut rng).unwrap();
        params.head_b.iter_mut().for_each(|b| *b = rng.gen_range(-3.0..3.0));
        let path = fit_regular(&rand_matrix(&mut rng, dims.input_len, dims.features, 1.0)).unwrap();
        let out = model::forward_on(&params, &path, &SolverConfig::default(), Branches::Both).unwrap();
        let direct: Vec<f64> = params
            .head_w
            .chunks(dims.hidden)
            .map(|row| row.iter().zip(&out.dh_terminal).fold(0.0, |s, (w, d)| s + w * d))
            .collect();
        assert_eq!(out.y_hat_dt.as_slice(), direct.as_slice());
    }
}

fn shift_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (p, f) = (rng.gen_range(1..10), rng.gen_range(1..4));
        let y = rand_matrix(&mut rng, p, f, 1e3);
        let last: Vec<f64> = (0..f).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let shifted = model::apply_shift(&y, &last).unwrap();
        assert_eq!(shifted.row(0), last.as_slice());

        let d = model::target_differences(&y, &last).unwrap();
        let d_shifted = model::target_differences(&shifted, &last).unwrap();
        // differences of y and of y + c agree from the second row on
        for i in 1..p {
            for j in 0..f {
                let (a, b) = (d.row(i)[j], d_shifted.row(i)[j]);
                assert!((a - b).abs() <= 1e-12 * (1.0 + y.row(i)[j].abs() + y.row(i - 1)[j].abs()), "{a} vs {b}");
            }
        }
    }
    // the derivative head never sees the shift
    let dims = ModelDims {
        hidden: 4,
        features: 2,
        input_len: 6,
        pred_len: 3,
    };
    let params = ContimeParams::init(dims, &mut rng).unwrap();
    let input = rand_matrix(&mut rng, 6, 2, 1.0);
    let win = PreparedWindow::new(&data::Window {
        start: 0,
        last_obs: input.row(5).to_vec(),
        input,
        target: rand_matrix(&mut rng, 3, 2, 1.0),
    })
    .unwrap();
    let loss = LossConfig::default();
    let solver = SolverConfig::default();
    let on = training::window_eval(&params, &win, &solver, &loss, true).unwrap();
    let off = training::window_eval(&params, &win, &solver, &loss, false).unwrap();
    assert_eq!(on.delta_t, off.delta_t);
    assert_ne!(on.task, off.task);
}

struct AblationRun {
    tdi: f64,
    mse: f64,
}

fn ablation_run(seed: u64, loss: &LossConfig, splits: &data::Dataset) -> AblationRun {
    let (t, p) = (36, 12);
    let train = data::window(&splits.splits.train, t, p, 3).unwrap();
    let val = data::window(&splits.splits.val, t, p, 1).unwrap();
    let test = data::window(&splits.splits.test, t, p, 1).unwrap();
    let cfg = TrainConfig {
        input_len: t,
        pred_len: p,
        epochs: 20,
        seed,
        learning_rate: 0.002,
        hidden_dim: 16,
        batch_size: 32,
        solver: SolverConfig::new(0.5),
        ..Default::default()
    };
    let init = ContimeParams::init(cfg.dims(1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let out = training::train(&train, &val, init, &cfg, loss).unwrap();
    let preds: Vec<Matrix> = test
        .iter()
        .map(|w| {
            let path = fit_regular(&w.input).unwrap();
            let y = model::forward_on(&out.best, &path, &cfg.solver, Branches::Both).unwrap().y_hat;
            model::apply_shift(&y, &w.last_obs).unwrap()
        })
        .collect();
    let truths: Vec<Matrix> = test.iter().map(|w| w.target.clone()).collect();
    let m = metrics::evaluate(&preds, &truths).unwrap();
    AblationRun { tdi: m.tdi, mse: m.mse }
}

fn ablation_direction() {
    let start = Instant::now();
    let cfg = SynthConfig::new(3000, 8, 7);
    let ds = data::standardize(data::Dataset::from_table(data::SYNTH_NAME, data::synth_table(&cfg).unwrap(), 48).unwrap())
        .unwrap();
    let task_only = LossConfig {
        alpha: 0.9,
        beta: 0.0,
        mode: LossMode::TaskOnly,
        ..Default::default()
    };
    let task_delta = LossConfig {
        alpha: 0.9,
        beta: 0.1,
        mode: LossMode::TaskDelta,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for seed in 0..3 {
        let a = ablation_run(seed, &task_only, &ds);
        let b = ablation_run(seed, &task_delta, &ds);
        say!(
            "    seed {seed}: task-only TDI {:.4} MSE {:.4} | task+delta TDI {:.4} MSE {:.4}",
            a.tdi, a.mse, b.tdi, b.mse
        );
        rows.push((a, b));
    }
    let mean = |f: &dyn Fn(&(AblationRun, AblationRun)) -> f64| rows.iter().map(f).sum::<f64>() / 3.0;
    let (tdi_task, tdi_delta) = (mean(&|r| r.0.tdi), mean(&|r| r.1.tdi));
    let (mse_task, mse_delta) = (mean(&|r| r.0.mse), mean(&|r| r.1.mse));
    say!("    mean TDI {tdi_task:.4} -> {tdi_delta:.4}, mean MSE {mse_task:.4} -> {mse_delta:.4}");
    assert!(tdi_delta < tdi_task, "TDI {tdi_delta} not below {tdi_task}");
    assert!(mse_delta <= 2.0 * mse_task, "MSE {mse_delta} above twice {mse_task}");
    within(start.elapsed(), Duration::from_secs(600));
}

fn well_posedness() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cell = GruCellParams::init(6, 2, &mut rng);
    let path = fit_regular(&rand_matrix(&mut rng, 12, 2, 1.0)).unwrap();
    let h0: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = terminal_state(&cell, &path, &h0, 0.5, 0.5);
    let deltas: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
        .iter()
        .map(|eps| {
            let moved: Vec<f64> = h0.iter().zip(&dir).map(|(h, d)| h + eps * d).collect();
            dist(&terminal_state(&cell, &path, &moved, 0.5, 0.5), &base)
        })
        .collect();
    let ratios: Vec<f64> = deltas.windows(2).map(|w| w[0] / w[1]).collect();
    say!("    deltas [{}], ratios {ratios:.3?}", sci(&deltas));
    assert!(deltas.iter().all(|d| *d > 0.0 && d.is_finite()));
    for r in ratios {
        assert!((1.5..=2.5).contains(&r), "ratio {r}");
    }
}

fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(DataSource::Synth(SynthConfig::new(600, 8, 1)));
    cfg.train.input_len = 16;
    cfg.train.pred_len = 6;
    cfg.train.hidden_dim = 6;
    cfg.train.epochs = 5;
    cfg.train_stride = 4;
    cfg.train.seed = 3;
    cfg.out_dir = dir.path().join("a");
    let a = run::cmd_train(&cfg).unwrap();
    cfg.out_dir = dir.path().join("b");
    let b = run::cmd_train(&cfg).unwrap();
    let (ha, hb) = (std::fs::read(&a.history).unwrap(), std::fs::read(&b.history).unwrap());
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);
}

fn data_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [10usize, 100, 101, 999, 3000] {
        let r = data::split_70_10_20(n, 1).unwrap();
        let train = (n as f64 * 0.7).floor() as usize;
        let val = (n as f64 * 0.1).floor() as usize;
        assert_eq!((r.train.len(), r.val.len(), r.test.len()), (train, val, n - train - val), "n = {n}");
        assert_eq!((r.train.start, r.train.end, r.val.end, r.test.end), (0, r.val.start, r.test.start, n));
    }

    let n = 1000;
    let values = Matrix::from_vec(n, 3, (0..3 * n).map(|k| 5.0 * (k as f64 * 0.01).sin() + rng.gen_range(10.0..20.0)).collect())
        .unwrap();
    let table = data::RawTable {
        dates: (0..n).map(|i| i.to_string()).collect(),
        feature_names: vec!["a".into(), "b".into(), "c".into()],
        values,
    };
    let ds = data::standardize(data::Dataset::from_table("t", table, 1).unwrap()).unwrap();
    let train = &ds.splits.train;
    for j in 0..3 {
        let col = train.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-10, "std {}", var.sqrt());
    }

    for _ in 0..20 {
        let t = rng.gen_range(2..40);
        let p = rng.gen_range(1..20);
        let len = t + p + rng.gen_range(0..200);
        let m = Matrix::from_vec(len, 1, (0..len).map(|k| k as f64).collect()).unwrap();
        let w = data::window(&m, t, p, 1).unwrap();
        assert_eq!(w.len(), len - t - p + 1, "N={len} T={t} P={p}");
        let last = w.last().unwrap();
        assert_eq!(last.target.row(p - 1)[0], (len - 1) as f64);
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 11] = [
        ("spline correctness", spline_correctness),
        ("gate-derivative calculus", gate_calculus),
        ("solver order", solver_order),
        ("end-to-end gradient check", gradient_check),
        ("DTW oracle", dtw_oracle),
        ("derivative-head identity", derivative_head_identity),
        ("shift contract", shift_contract),
        ("ablation direction", ablation_direction),
        ("well-posedness", well_posedness),
        ("determinism", determinism),
        ("data pipeline", data_pipeline),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => say!("criterion {:>2} {name}: PASS ({secs:.2} s)", k + 1),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                say!("criterion {:>2} {name}: FAIL ({secs:.2} s) {msg}", k + 1);
                failed.push(k + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
