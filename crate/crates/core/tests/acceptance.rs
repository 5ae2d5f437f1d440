//! End-to-end acceptance criteria. Every criterion prints one PASS/FAIL
//! line with its measured value, tolerance and wall time; the test fails
//! if any criterion fails.
//!
//! The d = 10 runs use a reduced network (k = 4, width 32, 32 draws per
//! condition) so the suite fits its time budget on a single core.

use cmflow::cli::{self, RunConfig};
use cmflow::data::{generate_sparse_precision, sample_gaussian, Dataset, GroundTruth};
use cmflow::diffcore::kernels::SosParams;
use cmflow::eval::{
    componentwise_median, credible_intervals, cross_validate_glasso, decade_grid, edge_pairs, edge_set, entry_labels,
    f1_score, log_grid, map_reference_path, path_mse, posterior_samples, select_lambda, solution_path,
};
use cmflow::flow::sos::sos_inverse;
use cmflow::flow::{Flow, FlowConfig, FlowMode, FlowParameters, Range};
use cmflow::linalg::is_spd;
use cmflow::target::{gen_normal_log_density, GGMTarget};
use cmflow::train::{self, AnnealingSchedule, KlBatch, TrainConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::{Duration, Instant};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn within(elapsed: Duration, minutes: u64) -> bool {
    elapsed < Duration::from_secs(60 * minutes)
}

/// Initial parameters pushed away from the near-identity start.
fn perturbed_flow(cfg: FlowConfig, seed: u64, scale: f64) -> Flow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = FlowParameters::init(cfg, &mut rng);
    for v in &mut p.values {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    Flow::new(p).unwrap()
}

fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for c in 0..x.len() {
        let shifted = |h: f64| {
            let mut y = x.to_vec();
            y[c] += h;
            f(&y)
        };
        let (p1, m1, p2, m2) = (shifted(eps), shifted(-eps), shifted(2.0 * eps), shifted(-2.0 * eps));
        for r in 0..m {
            jac[(r, c)] = (8.0 * (p1[r] - m1[r]) - (p2[r] - m2[r])) / (12.0 * eps);
        }
    }
    jac
}

/// Plain training run; `anneal` continues from the `T = 1` fit down to
/// `Tn = 0.01` over `(epochs, cooling steps)`.
struct Fit {
    bayes: Flow,
    map: Option<Flow>,
}

#[derive(Clone, Copy)]
struct Arch {
    width: usize,
    k: usize,
    samples: usize,
}

const FULL: Arch = Arch {
    width: 64,
    k: 8,
    samples: 64,
};
const REDUCED: Arch = Arch {
    width: 32,
    k: 4,
    samples: 32,
};

fn fit(
    target: &GGMTarget,
    lambda: Range,
    q: Range,
    arch: Arch,
    epochs: usize,
    anneal: Option<(usize, usize)>,
    seed: u64,
) -> Fit {
    let mut fc = FlowConfig::full(target.dim(), lambda, q);
    fc.hidden_width = arch.width;
    fc.k = arch.k;
    let params = FlowParameters::init(fc, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut cfg = TrainConfig::new(lambda, q);
    cfg.samples = arch.samples;
    cfg.seed = train::stream_seed(seed, 3, 0);
    cfg.log_every = 0;
    cfg.schedule = AnnealingSchedule {
        t0: 1.0,
        tn: 1.0,
        n_steps: 0,
        epochs_total: epochs,
    };
    let first = train::train(params, target, &cfg).unwrap();
    let bayes = Flow::new(first.map.params.clone()).unwrap();
    let map = anneal.map(|(epochs_total, n_steps)| {
        cfg.schedule = AnnealingSchedule {
            t0: 1.0,
            tn: 0.01,
            n_steps,
            epochs_total,
        };
        cfg.seed = train::stream_seed(seed, 3, 1);
        Flow::new(train::train(first.map.params, target, &cfg).unwrap().map.params).unwrap()
    });
    Fit { bayes, map }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let lambda = Range::new(0.5, 5.0);
    let q = Range::new(0.25, 2.0);
    let mut worst: f64 = 0.0;
    for (m, mode) in [FlowMode::Full { d: 2 }, FlowMode::Full { d: 3 }, FlowMode::Block { s: 2, t: 2 }]
        .into_iter()
        .enumerate()
    {
        let mut cfg = FlowConfig::full(2, lambda, q);
        cfg.mode = mode;
        let flow = perturbed_flow(cfg, 10 + m as u64, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + m as u64);
        for _ in 0..5 {
            let z: Vec<f64> = (0..flow.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let (lam, qq) = (rng.random_range(0.5..5.0), rng.random_range(0.25..2.0));
            let jac = numeric_jacobian(|x| flow.composite(x, lam, qq).unwrap().0, &z, 1e-4);
            let numeric = jac.determinant().abs().ln();
            let (_, analytic) = flow.composite(&z, lam, qq).unwrap();
            worst = worst.max(((numeric - analytic) / analytic).abs());
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        name: "Jacobian exactness",
        pass: worst <= 1e-6 && within(elapsed, 1),
        detail: format!("max relative log-det error {worst:.2e} (tol 1e-6)"),
        elapsed,
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let lambda = Range::new(0.5, 5.0);
    let q = Range::new(0.25, 1.0);
    let gt = generate_sparse_precision(3, 0.5, 1);
    let target = sample_gaussian(&gt, 20, 2).target().unwrap();
    let mut cfg = FlowConfig::full(3, lambda, q);
    cfg.hidden_width = 16;
    cfg.k = 4;
    let mut worst: f64 = 0.0;
    for draw in 0..20u64 {
        let mut flow = perturbed_flow(cfg.clone(), 100 + draw, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let conditions = train::sample_conditions(lambda, q, 4, &mut rng);
        let batch = KlBatch::draw(flow.dim(), conditions, 8, draw, 0);
        let theta = flow.params().values.clone();
        let (_, grad) = train::kl_loss(&flow, &batch, &target, 1.0).unwrap();
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..theta.len())).collect();
        for &c in &coords {
            let h = 1e-4 * theta[c].abs().max(1.0);
            let mut loss_at = |delta: f64| {
                let mut t = theta.clone();
                t[c] += delta;
                flow.set_values(&t);
                train::kl_loss(&flow, &batch, &target, 1.0).unwrap().0
            };
            let numeric = (8.0 * (loss_at(h) - loss_at(-h)) - (loss_at(2.0 * h) - loss_at(-2.0 * h))) / (12.0 * h);
            // entries far below the gradient scale are measured against it
            let scale = grad[c].abs().max(numeric.abs()).max(1e-3 * gmax);
            worst = worst.max((grad[c] - numeric).abs() / scale);
        }
        flow.set_values(&theta);
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 2,
        name: "Gradient exactness",
        pass: worst <= 1e-5 && within(elapsed, 2),
        detail: format!("max relative gradient error {worst:.2e} over 20 draws (tol 1e-5)"),
        elapsed,
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let gt = GroundTruth::from_omega(DMatrix::from_row_slice(2, 2, &[2.0, -1.2, -1.2, 2.0]), 0.0);
    let target = sample_gaussian(&gt, 60, 11).target().unwrap();
    // d = 2 is cheap enough for a larger Monte-Carlo batch, which steadies the tails
    let arch = Arch { samples: 256, ..FULL };
    let fit = fit(&target, Range::new(0.5, 2.0), Range::new(0.5, 1.0), arch, 3000, None, 1);
    let samples = posterior_samples(&fit.bayes, 1.0, 1.0, 20_000, 5).unwrap();
    let flow_ci = credible_intervals(&samples, 0.9, (1.0, 1.0, 1.0)).unwrap();
    let table = cli::oracle_table(&target, 1.0, 1.0, 121).unwrap();
    let mut worst: f64 = 0.0;
    for e in 0..3 {
        let (lo, hi) = table.interval(e, 0.9);
        worst = worst
            .max((flow_ci.lower[e] - lo).abs() / lo.abs())
            .max((flow_ci.upper[e] - hi).abs() / hi.abs());
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 3,
        name: "Oracle posterior match",
        pass: worst <= 0.05 && within(elapsed, 10),
        detail: format!("max relative 90% endpoint error {worst:.4} (tol 0.05)"),
        elapsed,
    }
}

/// Criteria 4 and 6 share one annealed d = 5 run.
fn criteria_4_and_6() -> (Outcome, Outcome) {
    let start = Instant::now();
    let lambda = Range::new(0.5, 25.0);
    let gt = generate_sparse_precision(5, 0.5, 21);
    let ds = sample_gaussian(&gt, 50, 22);
    let target = ds.target().unwrap();
    let fit = fit(&target, lambda, Range::new(1.0, 1.0), FULL, 1000, Some((2100, 20)), 1);
    let map = fit.map.unwrap();
    let grid = log_grid(lambda.min, lambda.max, 20);
    let path = solution_path(&map, 0.01, &grid, 1.0, 256, 3).unwrap();
    let reference = map_reference_path(&ds.scatter, ds.n(), &grid).unwrap();
    let mse = path_mse(&path, &reference).unwrap();
    let elapsed = start.elapsed();
    let c4 = Outcome {
        id: 4,
        name: "MAP path recovery",
        pass: mse <= 0.1 && within(elapsed, 15),
        detail: format!("path MSE {mse:.4} over 20 grid points (tol 0.1)"),
        elapsed,
    };

    let start = Instant::now();
    let (mut shrunk, mut total) = (0, 0);
    for lam in log_grid(lambda.min, lambda.max, 5) {
        let at = |flow: &Flow, t: f64| {
            credible_intervals(&posterior_samples(flow, lam, 1.0, 4000, 7).unwrap(), 0.9, (lam, 1.0, t)).unwrap()
        };
        let (warm, cold) = (at(&fit.bayes, 1.0), at(&map, 0.01));
        for (c, w) in cold.std_dev.iter().zip(&warm.std_dev) {
            total += 1;
            shrunk += usize::from(c <= w);
        }
    }
    let frac = shrunk as f64 / total as f64;
    let c6 = Outcome {
        id: 6,
        name: "Annealing shrinkage",
        pass: frac >= 0.95,
        detail: format!("sd(Tn) <= sd(T=1) for {shrunk}/{total} entries = {frac:.3} (need >= 0.95)"),
        elapsed: start.elapsed(),
    };
    (c4, c6)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let lambda = Range::new(0.5, 50.0);
    let gt = generate_sparse_precision(10, 0.7, 31);
    let ds = sample_gaussian(&gt, 50, 32);
    let target = ds.target().unwrap();
    let fit = fit(&target, lambda, Range::new(1.0, 1.0), REDUCED, 2000, None, 1);
    let grid = decade_grid(lambda.min, lambda.max, 20);
    let cmf = select_lambda(&fit.bayes, &target, &grid, 1.0, 2048, 9).unwrap().best;
    // the same grid in the penalized-likelihood convention, ρ = 2λ/n
    let n = ds.n() as f64;
    let penalties: Vec<f64> = grid.iter().map(|l| 2.0 * l / n).collect();
    let cv = cross_validate_glasso(&ds.x, &penalties, 5).unwrap().best * n / 2.0;
    let gap = (cmf / cv).ln().abs();
    let elapsed = start.elapsed();
    Outcome {
        id: 5,
        name: "Model selection agreement",
        pass: gap <= 1.3f64.ln() && within(elapsed, 20),
        detail: format!(
            "lambda*_CMF {cmf:.3} vs lambda*_CV {cv:.3}: |log ratio| {gap:.3} (tol {:.3})",
            1.3f64.ln()
        ),
        elapsed,
    }
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let lambda = Range::new(1.0, 100.0);
    let grid = decade_grid(lambda.min, lambda.max, 20);
    let (mut f1_sub, mut f1_l1) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let gt = generate_sparse_precision(10, 0.7, 100 + seed);
        let target = sample_gaussian(&gt, 5, 200 + seed).target().unwrap();
        let fit = fit(&target, lambda, Range::new(0.25, 1.0), REDUCED, 1500, None, seed);
        for (q, out) in [(0.25, &mut f1_sub), (1.0, &mut f1_l1)] {
            let best = select_lambda(&fit.bayes, &target, &grid, q, 1024, 9).unwrap().best;
            let samples = posterior_samples(&fit.bayes, best, q, 2000, 5).unwrap();
            let summary = credible_intervals(&samples, 0.9, (best, q, 1.0)).unwrap();
            out.push(f1_score(&edge_pairs(&edge_set(&summary)), &gt.edges));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (sub, l1) = (mean(&f1_sub), mean(&f1_l1));
    let elapsed = start.elapsed();
    Outcome {
        id: 7,
        name: "Sub-l1 F1 advantage",
        pass: sub >= l1 && within(elapsed, 30),
        detail: format!("mean F1 q=0.25 {sub:.3} {f1_sub:.2?} vs q=1 {l1:.3} {f1_l1:.2?}"),
        elapsed,
    }
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let lambda = Range::new(0.5, 25.0);
    let labels = entry_labels(5, 0);
    let (mut wins, mut trials) = (0, 0);
    for seed in 0..5u64 {
        let gt = generate_sparse_precision(5, 0.3, 300 + seed);
        let target = sample_gaussian(&gt, 50, 400 + seed).target().unwrap();
        let fit = fit(&target, lambda, Range::new(0.25, 1.0), REDUCED, 1000, Some((2100, 20)), seed);
        let map = fit.map.unwrap();
        for lam in log_grid(lambda.min, lambda.max, 5) {
            let l1 = componentwise_median(&posterior_samples(&map, lam, 1.0, 256, 3).unwrap());
            let sub = componentwise_median(&posterior_samples(&map, lam, 0.25, 256, 3).unwrap());
            for (e, &(i, j)) in labels.iter().enumerate() {
                if i != j && gt.omega[(i, j)] != 0.0 {
                    trials += 1;
                    wins += usize::from(sub[e].abs() >= l1[e].abs());
                }
            }
        }
    }
    let frac = wins as f64 / trials as f64;
    Outcome {
        id: 8,
        name: "Shrinkage reduction",
        pass: frac >= 0.8,
        detail: format!("|MAP q=0.25| >= |MAP q=1| in {wins}/{trials} trials = {frac:.3} (need >= 0.8)"),
        elapsed: start.elapsed(),
    }
}

/// Adaptive Simpson on `[a, b]`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for q in [0.25, 0.5, 1.0, 2.0] {
        for lambda in [0.5, 3.0] {
            // x = (u²/λ)^{1/q} maps the half line onto a Gaussian-like
            // integrand in u, smooth at the origin for every q here
            let integrand = |u: f64| {
                if u == 0.0 {
                    return if q == 2.0 { 2.0 * gen_normal_log_density(0.0, lambda, q).exp() / (q * lambda.sqrt()) } else { 0.0 };
                }
                let s = u * u / lambda;
                let x = s.powf(1.0 / q);
                let dx = x / (q * s) * 2.0 * u / lambda;
                gen_normal_log_density(x, lambda, q).exp() * dx
            };
            let mass = 2.0 * simpson(&integrand, 0.0, 12.0, 1e-12);
            worst = worst.max((mass - 1.0).abs());
        }
    }
    Outcome {
        id: 9,
        name: "Density normalization",
        pass: worst <= 1e-6,
        detail: format!("max |mass - 1| {worst:.2e} over 8 (q, lambda) pairs (tol 1e-6)"),
        elapsed: start.elapsed(),
    }
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let lambda = Range::new(0.1, 10.0);
    let q = Range::new(0.25, 2.0);
    let gt = generate_sparse_precision(4, 0.5, 41);
    let ds = sample_gaussian(&gt, 30, 42);
    let targets = [
        (FlowMode::Full { d: 4 }, GGMTarget::full(ds.scatter.clone(), ds.n()).unwrap()),
        (FlowMode::Block { s: 2, t: 2 }, GGMTarget::block(ds.scatter.clone(), ds.n(), 2).unwrap()),
    ];
    let (mut bad, mut drawn) = (0, 0);
    for (m, (mode, target)) in targets.iter().enumerate() {
        let mut fc = FlowConfig::full(4, lambda, q);
        fc.mode = *mode;
        fc.hidden_width = 32;
        let params = FlowParameters::init(fc, &mut ChaCha8Rng::seed_from_u64(m as u64));
        let mut cfg = TrainConfig::new(lambda, q);
        cfg.log_every = 0;
        cfg.schedule = AnnealingSchedule {
            t0: 1.0,
            tn: 1.0,
            n_steps: 0,
            epochs_total: 400,
        };
        let flow = Flow::new(train::train(params, target, &cfg).unwrap().map.params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + m as u64);
        for (c, (lam, qq)) in train::sample_conditions(lambda, q, 50, &mut rng).into_iter().enumerate() {
            // Ω itself in full mode, Ω11 in block mode
            for s in posterior_samples(&flow, lam, qq, 100, c as u64).unwrap() {
                drawn += 1;
                bad += usize::from(!is_spd(&s.omega));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut round_trip: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=12);
        let raw: Vec<f64> = (0..3 * k + 3).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let params = SosParams::from_raw(&raw, k, rng.random_range(1.0..10.0));
        let z = 4.0 * rng.sample::<f64, _>(StandardNormal);
        let back = sos_inverse(params.forward(z).0, &params, 1e-12).unwrap();
        round_trip = round_trip.max((back - z).abs());
    }
    Outcome {
        id: 10,
        name: "Structural invariants",
        pass: bad == 0 && drawn == 10_000 && round_trip <= 1e-8,
        detail: format!("{bad}/{drawn} non-SPD samples; SoS inverse max error {round_trip:.2e} (tol 1e-8)"),
        elapsed: start.elapsed(),
    }
}

fn criterion_11() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let gt = generate_sparse_precision(3, 0.5, 5);
    let ds: Dataset = sample_gaussian(&gt, 20, 6);
    let data = root.path().join("data.csv");
    ds.write_csv(&data).unwrap();
    let run = |name: &str| {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.data.input = Some(data.clone());
        cfg.flow.hidden_width = 16;
        cfg.train.schedule.epochs_total = 120;
        cfg.train.schedule.n_steps = 5;
        cfg.train.log_every = 0;
        cfg.output.dir = root.path().join(name);
        std::fs::create_dir_all(&cfg.output.dir).unwrap();
        let art = cli::cmd_train(&cfg).unwrap();
        let read = |p: &std::path::Path| std::fs::read(p).unwrap();
        let checkpoints = std::fs::read_dir(&cfg.output.dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt"))
            .count();
        (read(art.bayes.as_ref().unwrap()), read(&art.map), read(&art.trace), checkpoints)
    };
    let (a, b) = (run("a"), run("b"));
    let same = a.0 == b.0 && a.1 == b.1 && a.2 == b.2;
    Outcome {
        id: 11,
        name: "Determinism",
        pass: same && a.3 == 2,
        detail: format!("checkpoints and trace byte-identical: {same}; checkpoints emitted: {}", a.3),
        elapsed: start.elapsed(),
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    let mut report = |o: Outcome| {
        println!(
            "criterion {:>2} {:<26} {}  {}  [{:.1}s]",
            o.id,
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            o.elapsed.as_secs_f64()
        );
        results.push((o.id, o.pass));
    };
    report(criterion_1());
    report(criterion_2());
    report(criterion_9());
    report(criterion_10());
    report(criterion_11());
    report(criterion_3());
    let (c4, c6) = criteria_4_and_6();
    report(c4);
    report(c6);
    report(criterion_5());
    report(criterion_7());
    report(criterion_8());
    let failed: Vec<u32> = results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
