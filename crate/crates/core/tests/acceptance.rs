//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Run all with `cargo test -p ssvn --test acceptance`; pass criterion numbers
//! after `--` to run a subset.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ssvn::diagnostics::{pp_curve, pp_sup_deviation};
use ssvn::harness::{parse_config, run, Reference, RunStatus, SamplerConfig};
use ssvn::random::{substream, Purpose, ZeroNoise};
use ssvn::svgd::scores;
use ssvn::svn::curvature_blocks;
use ssvn::{
    apply_k, assemble_svn_hessian, damp_hessian, ensemble_moments, mmd, permute_basis, ssvgd_noise,
    ssvn_step_cg, ssvn_step_cholesky, svgd_step, svgd_velocity, svn_block_diagonal_step,
    v_det_finite_difference, Bandwidth, Basis, CgOptions, DoubleBanana, DoubleBananaParams,
    Ensemble, Field, Gaussian, GramBundle, HessianOperator, HybridRosenbrock,
    HybridRosenbrockParams, KernelSpec, MetricMode, SvnFlags, SvnOptions, Target,
};

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Combine sub-checks: passes only if all pass.
fn all(parts: Vec<(bool, String)>) -> Outcome {
    let pass = parts.iter().all(|p| p.0);
    let detail = parts
        .into_iter()
        .map(|(ok, d)| format!("{}{d}", if ok { "" } else { "FAILED " }))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}

fn rosenbrock(n1: usize, n2: usize, a: f64, b: f64) -> HybridRosenbrock {
    HybridRosenbrock::new(HybridRosenbrockParams::new(n1, n2, a, b)).unwrap()
}

fn random_ensemble(n: usize, d: usize, seed: u64, spread: f64) -> Ensemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d)
        .map(|_| rng.random_range(-spread..spread))
        .collect();
    Ensemble::new(Field::from_vec(n, d, data).unwrap()).unwrap()
}

fn uniform_init(n: usize, d: usize, seed: u64) -> Ensemble {
    let mut rng = substream(seed, Purpose::Init, 0);
    let data = (0..n * d).map(|_| rng.random_range(-6.0..6.0)).collect();
    Ensemble::new(Field::from_vec(n, d, data).unwrap()).unwrap()
}

fn fixed_kernel(d: usize) -> KernelSpec {
    let metric = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 + 0.2 * i as f64 } else { 0.1 });
    KernelSpec::new(d as f64 * 0.8, metric, MetricMode::Fixed).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Structural identities

fn criterion_1() -> Outcome {
    let (n, d) = (3, 2);
    let ens = random_ensemble(n, d, 11, 1.5);
    let kernel = fixed_kernel(d);
    let inv_n = 1.0 / n as f64;
    // Diffusion matrix from pointwise kernel evaluations.
    let kval = |m: usize, j: usize| kernel.eval(ens.particle(m), ens.particle(j)).unwrap();
    let k_dense = DMatrix::from_fn(n * d, n * d, |a, b| {
        if a % d == b % d {
            kval(a / d, b / d) * inv_n
        } else {
            0.0
        }
    });
    let block_diag = DMatrix::from_fn(n * d, n * d, |a, b| {
        if a / n == b / n {
            kval(a % n, b % n) * inv_n
        } else {
            0.0
        }
    });
    let p = DMatrix::from_fn(n * d, n * d, |row, col| {
        let mut e = vec![0.0; n * d];
        e[col] = 1.0;
        permute_basis(&e, n, d, Basis::ParticleToDimension).unwrap()[row]
    });
    let conjugated = &p * &k_dense * p.transpose();
    let perm_exact = conjugated == block_diag;

    let gram = GramBundle::build(&kernel, &ens).unwrap();
    let v = random_ensemble(n, d, 12, 1.0).positions;
    let kv = apply_k(&gram, &v).unwrap();
    let kv_err = max_abs(kv.as_slice(), (&k_dense * v.to_dvector()).as_slice());

    // Hessian-vector product against the dense damped Hessian.
    let target = rosenbrock(2, 1, 0.5, 0.5);
    let ens_h = random_ensemble(3, 2, 13, 1.5);
    let gram_h = GramBundle::build(&kernel, &ens_h).unwrap();
    let c = curvature_blocks(&target, &ens_h, true).unwrap();
    let dense_h = damp_hessian(
        assemble_svn_hessian(&gram_h, &c, SvnFlags::default()).unwrap(),
        &gram_h,
        0.01,
    )
    .unwrap()
    .matrix()
    .clone();
    let op = HessianOperator::new(GramBundle::build(&kernel, &ens_h).unwrap(), c, 0.01).unwrap();
    let mut hvp_err: f64 = 0.0;
    for seed in 0..10 {
        let probe = random_ensemble(3, 2, 100 + seed, 1.0).positions;
        let fast = op.hvp(&probe).unwrap();
        hvp_err = hvp_err.max(max_abs(
            fast.as_slice(),
            (&dense_h * probe.to_dvector()).as_slice(),
        ));
    }

    // SVGD velocity against K grad ln pi + div K, with the divergence
    // contracted from pointwise kernel gradients.
    let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]);
    let gauss = Gaussian::new(vec![0.2, -0.1], cov).unwrap();
    let s = scores(&gauss, &ens).unwrap();
    let velocity = svgd_velocity(&gram, &s).unwrap();
    let mut dense_v = &k_dense * s.to_dvector();
    for m in 0..n {
        for j in 0..n {
            // d/dz_j of k(z_m, z_j); on the diagonal both arguments move.
            let mut g = kernel.grad1(ens.particle(j), ens.particle(m)).unwrap();
            if j == m {
                let g1 = kernel.grad1(ens.particle(m), ens.particle(j)).unwrap();
                g.iter_mut().zip(g1).for_each(|(a, b)| *a += b);
            }
            for i in 0..d {
                dense_v[m * d + i] += g[i] * inv_n;
            }
        }
    }
    let v_err = max_abs(velocity.as_slice(), dense_v.as_slice());

    // Block-diagonal SVN against the diagonal blocks of the assembled Hessian.
    let full = SvnFlags {
        gauss_newton: true,
        h2_block_diagonal: false,
    };
    let ens_b = random_ensemble(4, 2, 14, 1.5);
    let gram_b = GramBundle::build(&kernel, &ens_b).unwrap();
    let c_b = curvature_blocks(&target, &ens_b, true).unwrap();
    let h_full = assemble_svn_hessian(&gram_b, &c_b, full).unwrap();
    let vel_b = svgd_velocity(&gram_b, &scores(&target, &ens_b).unwrap()).unwrap();
    let tau = 0.3;
    let stepped = svn_block_diagonal_step(&ens_b, &target, &kernel, tau, true).unwrap();
    let mut bd_err: f64 = 0.0;
    for m in 0..4 {
        let alpha = h_full
            .block(m, m)
            .lu()
            .solve(&DVector::from_column_slice(vel_b.row(m)))
            .unwrap();
        let expect: Vec<f64> = ens_b
            .particle(m)
            .iter()
            .zip(alpha.iter())
            .map(|(z, a)| z + tau * a)
            .collect();
        bd_err = bd_err.max(max_abs(stepped.particle(m), &expect));
    }

    all(vec![
        (perm_exact, format!("P K P' == D_K exactly: {perm_exact}")),
        (kv_err < 1e-12, format!("apply_K err {kv_err:.1e}")),
        (hvp_err < 1e-10, format!("hvp err {hvp_err:.1e}")),
        (v_err < 1e-12, format!("velocity err {v_err:.1e}")),
        (
            bd_err < 1e-12,
            format!("block-diagonal SVN err {bd_err:.1e}"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// 2. Derivatives

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
    diff / scale
}

fn criterion_2() -> Outcome {
    let targets: Vec<(&str, Box<dyn Target>)> = vec![
        ("rosenbrock-2d", Box::new(rosenbrock(2, 1, 0.5, 0.5))),
        ("rosenbrock-5d", Box::new(rosenbrock(3, 2, 10.0, 30.0))),
        ("rosenbrock-10d", Box::new(rosenbrock(4, 3, 30.0, 20.0))),
        (
            "double-banana",
            Box::new(DoubleBanana::new(DoubleBananaParams::default()).unwrap()),
        ),
        (
            "gaussian-3d",
            Box::new(
                Gaussian::new(
                    vec![0.5, -1.0, 2.0],
                    DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]),
                )
                .unwrap(),
            ),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut parts = Vec::new();
    for (name, t) in &targets {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = t.grad_log_density(&x).unwrap();
            let fd = fd_gradient(|y| t.log_density(y).unwrap(), &x);
            worst = worst.max(rel_err(&g, &fd));
        }
        parts.push((worst < 1e-5, format!("{name} score {worst:.1e}")));
    }
    for d in [2, 5] {
        let metric = {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(d, d)
        };
        let kernel = KernelSpec::new(d as f64, metric, MetricMode::Fixed).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g = kernel.grad1(&x, &y).unwrap();
            let fd = fd_gradient(|p| kernel.eval(p, &y).unwrap(), &x);
            let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let diff = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // Kernel values lie in (0, 1]; tiny gradients are compared absolutely.
            worst = worst.max(if scale > 1e-3 {
                diff / scale
            } else {
                diff / 1e-3
            });
        }
        parts.push((worst < 1e-5, format!("kernel d={d} grad {worst:.1e}")));
    }
    all(parts)
}

// ---------------------------------------------------------------------------
// 3. Noise covariances

/// Accumulates `E[x x']` of zero-mean draws.
struct SecondMoment {
    sum: DMatrix<f64>,
    count: usize,
}

impl SecondMoment {
    fn new(dim: usize) -> Self {
        Self {
            sum: DMatrix::zeros(dim, dim),
            count: 0,
        }
    }

    fn push(&mut self, x: &[f64]) {
        let v = DVector::from_column_slice(x);
        self.sum.ger(1.0, &v, &v, 1.0);
        self.count += 1;
    }

    /// Largest `|empirical - truth|` in units of the Gaussian standard error
    /// `sqrt((S_ii S_jj + S_ij^2) / n)` of each entry.
    fn worst_z(&self, truth: &DMatrix<f64>) -> f64 {
        let emp = &self.sum / self.count as f64;
        let mut worst: f64 = 0.0;
        for i in 0..truth.nrows() {
            for j in 0..truth.ncols() {
                let se = ((truth[(i, i)] * truth[(j, j)] + truth[(i, j)].powi(2))
                    / self.count as f64)
                    .sqrt()
                    .max(1e-12);
                worst = worst.max((emp[(i, j)] - truth[(i, j)]).abs() / se);
            }
        }
        worst
    }
}

const NOISE_DRAWS: usize = 100_000;

fn criterion_3() -> Outcome {
    let mut parts = Vec::new();
    let target = rosenbrock(2, 1, 0.5, 0.5);
    let kernel = KernelSpec::with_mode(2, MetricMode::AveragedGaussNewton);

    // sSVGD noise against 2K.
    let ens = random_ensemble(4, 2, 31, 1.0);
    let gram = GramBundle::build(&fixed_kernel(2), &ens).unwrap();
    let two_k = ssvn::config_space::dense_k(&gram) * 2.0;
    let mut acc = SecondMoment::new(8);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..NOISE_DRAWS {
        acc.push(ssvgd_noise(&gram, &mut rng).unwrap().as_slice());
    }
    let z = acc.worst_z(&two_k);
    parts.push((z < 4.0, format!("sSVGD noise max z {z:.2}")));

    // N(0, H) draws against the dense undamped Hessian.
    for (n, d, seed) in [(4usize, 2usize, 33u64), (2, 1, 34)] {
        let t: Box<dyn Target> = if d == 2 {
            Box::new(rosenbrock(2, 1, 0.5, 0.5))
        } else {
            Box::new(Gaussian::new(vec![0.0], DMatrix::from_element(1, 1, 0.7)).unwrap())
        };
        let ens = random_ensemble(n, d, seed, 1.0);
        let gram = GramBundle::build(&KernelSpec::isotropic(d), &ens).unwrap();
        let c = curvature_blocks(t.as_ref(), &ens, true).unwrap();
        let dense = assemble_svn_hessian(&gram, &c, SvnFlags::default())
            .unwrap()
            .matrix()
            .clone();
        let op = HessianOperator::new(gram, c, 0.0).unwrap();
        let mut acc = SecondMoment::new(n * d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..NOISE_DRAWS {
            acc.push(op.sample_noise(&mut rng).unwrap().as_slice());
        }
        let z = acc.worst_z(&dense);
        parts.push((z < 4.0, format!("N(0,H) N={n} d={d} max z {z:.2}")));
    }

    // sSVN diffusion term against 2N K H_lambda^{-1} K, read off the step
    // as the difference between a stochastic and a noise-free step at tau = 1.
    let ens = random_ensemble(4, 2, 35, 1.5);
    let opts = SvnOptions {
        tau: 1.0,
        lambda: 0.01,
        flags: SvnFlags::default(),
    };
    let base = ssvn_step_cholesky(&ens, &target, &kernel, &opts, false, &mut ZeroNoise).unwrap();
    let gn = curvature_blocks(&target, &ens, true).unwrap();
    let resolved = ssvn::metric_update(&kernel, &ens, &target, Some(&gn)).unwrap();
    let gram = GramBundle::build(&kernel.with_metric(resolved).unwrap(), &ens).unwrap();
    let h = damp_hessian(
        assemble_svn_hessian(&gram, &gn, SvnFlags::default()).unwrap(),
        &gram,
        0.01,
    )
    .unwrap()
    .matrix()
    .clone();
    let k = ssvn::config_space::dense_k(&gram);
    let truth = &k * h.lu().try_inverse().unwrap() * &k * (2.0 * 4.0);
    let mut acc = SecondMoment::new(8);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..NOISE_DRAWS {
        let s = ssvn_step_cholesky(&ens, &target, &kernel, &opts, true, &mut rng).unwrap();
        let diff: Vec<f64> = s
            .positions
            .as_slice()
            .iter()
            .zip(base.positions.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        acc.push(&diff);
    }
    let z = acc.worst_z(&truth);
    parts.push((z < 4.0, format!("sSVN diffusion max z {z:.2}")));
    all(parts)
}

// ---------------------------------------------------------------------------
// 4. Stationarity

/// Mean of replicate estimates and its standard error.
fn replicate_summary(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

/// Mean and standard error by non-overlapping batch means.
fn batch_summary(series: &[f64], batches: usize) -> (f64, f64) {
    let len = series.len() / batches;
    let means: Vec<f64> = series
        .chunks_exact(len)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    replicate_summary(&means)
}

fn criterion_4() -> Outcome {
    let mut parts = Vec::new();

    // sSVGD, 2D standard Gaussian, N = 20. Each replicate starts from exact
    // draws, so the pooled statistics test invariance of the product density;
    // standard errors come from the spread over independent replicates.
    let target = Gaussian::standard(2);
    let kernel = KernelSpec::with_mode(2, MetricMode::AveragedGaussNewton);
    let (replicates, burn_in, kept, n) = (20usize, 200usize, 250usize, 20usize);
    let stats: Vec<[f64; 5]> = (0..replicates)
        .map(|r| {
            let mut init_rng = substream(41, Purpose::Init, r as u64);
            let mut ens = Ensemble::new(target.sample(n, &mut init_rng).unwrap()).unwrap();
            let mut acc = [0.0; 5];
            for t in 0..burn_in + kept {
                let mut rng = substream(41 + r as u64, Purpose::SvgdNoise, t as u64);
                ens = svgd_step(&ens, &target, &kernel, 0.005, true, &mut rng).unwrap();
                if t >= burn_in {
                    for p in ens.positions.rows() {
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[0] * p[0];
                        acc[3] += p[0] * p[1];
                        acc[4] += p[1] * p[1];
                    }
                }
            }
            let count = (kept * n) as f64;
            let mut s = acc.map(|v| v / count);
            s[2] -= s[0] * s[0];
            s[3] -= s[0] * s[1];
            s[4] -= s[1] * s[1];
            s
        })
        .collect();
    let truth = [0.0, 0.0, 1.0, 0.0, 1.0];
    let labels = ["mean1", "mean2", "cov11", "cov12", "cov22"];
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for k in 0..5 {
        let (est, se) = replicate_summary(&stats.iter().map(|s| s[k]).collect::<Vec<_>>());
        let z = (est - truth[k]).abs() / se;
        worst = worst.max(z);
        detail.push(format!("{} {est:.3}", labels[k]));
    }
    parts.push((
        worst < 3.0,
        format!("sSVGD N=20 ({}) max z {worst:.2}", detail.join(" ")),
    ));

    // sSVN, one particle, 1D Gaussian with mean 1 and variance 2.
    let target = Gaussian::new(vec![1.0], DMatrix::from_element(1, 1, 2.0)).unwrap();
    let kernel = KernelSpec::with_mode(1, MetricMode::AveragedGaussNewton);
    let opts = SvnOptions {
        tau: 0.01,
        lambda: 0.01,
        flags: SvnFlags::default(),
    };
    let mut init_rng = substream(42, Purpose::Init, 0);
    let mut ens = Ensemble::new(target.sample(1, &mut init_rng).unwrap()).unwrap();
    let (burn_in, kept) = (2_000usize, 100_000usize);
    let mut xs = Vec::with_capacity(kept);
    for t in 0..burn_in + kept {
        let mut rng = substream(42, Purpose::SvnNoise, t as u64);
        ens = ssvn_step_cholesky(&ens, &target, &kernel, &opts, true, &mut rng).unwrap();
        if t >= burn_in {
            xs.push(ens.particle(0)[0]);
        }
    }
    let (mean, se_mean) = batch_summary(&xs, 50);
    let sq: Vec<f64> = xs.iter().map(|x| (x - 1.0).powi(2)).collect();
    let (var, se_var) = batch_summary(&sq, 50);
    let z_mean = (mean - 1.0).abs() / se_mean;
    let z_var = (var - 2.0).abs() / se_var;
    parts.push((
        z_mean < 3.0 && z_var < 3.0,
        format!("sSVN N=1 mean {mean:.3} (z {z_mean:.2}) var {var:.3} (z {z_var:.2})"),
    ));
    all(parts)
}

// ---------------------------------------------------------------------------
// 5. Deterministic correction oracle

fn criterion_5() -> Outcome {
    let flags = SvnFlags::default();
    let kernel = KernelSpec::with_mode(1, MetricMode::AveragedGaussNewton);
    let single = Gaussian::new(vec![0.5], DMatrix::from_element(1, 1, 0.8)).unwrap();
    let ens = Ensemble::from_rows(&[[1.7]]).unwrap();
    let v = v_det_finite_difference(&ens, &single, &kernel, 0.01, flags, 1e-4).unwrap();
    let zero = v.as_slice()[0].abs();

    let target = Gaussian::new(vec![0.3], DMatrix::from_element(1, 1, 1.5)).unwrap();
    let pair = Ensemble::from_rows(&[[-0.4], [0.9]]).unwrap();
    let h = 1e-3;
    let coarse = v_det_finite_difference(&pair, &target, &kernel, 0.01, flags, h).unwrap();
    let fine = v_det_finite_difference(&pair, &target, &kernel, 0.01, flags, h / 2.0).unwrap();
    let extrapolated: Vec<f64> = coarse
        .as_slice()
        .iter()
        .zip(fine.as_slice())
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect();
    let gap = max_abs(fine.as_slice(), &extrapolated);
    let magnitude = fine.norm();
    all(vec![
        (zero < 1e-6, format!("N=1 Gaussian |v_det| {zero:.1e}")),
        (
            gap < 1e-6 && magnitude > 1e-3,
            format!("N=2 d=1 Richardson gap {gap:.1e} (|v_det| {magnitude:.3})"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// 6. Two-dimensional Hybrid Rosenbrock, MMD decay

fn criterion_6() -> Outcome {
    let target = rosenbrock(2, 1, 0.5, 0.5);
    let kernel = KernelSpec::with_mode(2, MetricMode::AveragedGaussNewton);
    let mut gt_rng = substream(61, Purpose::GroundTruth, 0);
    let truth = target.sample(300, &mut gt_rng).unwrap();
    let opts = SvnOptions::default();
    let mut parts = Vec::new();
    for stochastic in [true, false] {
        let mut ens = uniform_init(100, 2, 62);
        let initial = mmd(&ens.positions, &truth, Bandwidth::Auto).unwrap();
        for t in 1..=200u64 {
            let mut rng = substream(62, Purpose::SvnNoise, t);
            ens = ssvn_step_cholesky(&ens, &target, &kernel, &opts, stochastic, &mut rng).unwrap();
        }
        let last = mmd(&ens.positions, &truth, Bandwidth::Auto).unwrap();
        let ratio = last / initial;
        let name = if stochastic { "sSVN" } else { "SVN" };
        parts.push((
            ratio <= 0.2,
            format!("{name} MMD {initial:.3e} -> {last:.3e} (ratio {ratio:.3})"),
        ));
    }
    all(parts)
}

// ---------------------------------------------------------------------------
// 7 and 8. Five-dimensional Hybrid Rosenbrock moments and efficiency

const ROSENBROCK_5D: &str = r#"{"name": "hybrid_rosenbrock", "n2": 2, "n1": 3, "a": 10, "b": 30}"#;
const CONVERGENCE_WINDOW: usize = 10;

struct FiveDim {
    truth_mean: Vec<f64>,
    truth_var: Vec<f64>,
    ssvn_final: (Vec<f64>, Vec<f64>),
    ssvgd_final: (Vec<f64>, Vec<f64>),
    ssvn_converged: Option<usize>,
    ssvgd_converged: Option<usize>,
    ssvgd_iterations: usize,
    ssvn_evals: u64,
    ssvgd_evals: u64,
}

fn finish_record(meta: &Path) -> Value {
    let text = std::fs::read_to_string(meta).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

/// Moments of the ensembles of iterations `first..=last`, pooled from the trace.
fn pooled_moments(trace: &Path, first: usize, last: usize) -> (Vec<f64>, Vec<f64>) {
    let text = std::fs::read_to_string(trace).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .filter_map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            let iter: usize = fields[0].parse().unwrap();
            (first..=last)
                .contains(&iter)
                .then(|| fields[2..].iter().map(|v| v.parse().unwrap()).collect())
        })
        .collect();
    assert_eq!(rows.len(), 100 * (last - first + 1));
    ensemble_moments(&Field::from_rows(&rows).unwrap()).unwrap()
}

fn five_dim_config(method: &str, iterations: usize, reference: &Reference) -> SamplerConfig {
    let mut cfg = parse_config(&format!(
        r#"{{"method": "{method}", "target": {ROSENBROCK_5D}, "N": 100, "L": {iterations}, "seed": 71}}"#
    ))
    .unwrap();
    cfg.reference = Some(reference.clone());
    cfg.validate().unwrap();
    cfg
}

fn run_five_dim() -> FiveDim {
    let target = rosenbrock(3, 2, 10.0, 30.0);
    let mut gt_rng = substream(70, Purpose::GroundTruth, 0);
    let truth = target.sample(1_000_000, &mut gt_rng).unwrap();
    let (truth_mean, truth_var) = ensemble_moments(&truth).unwrap();
    let reference = Reference {
        mean: truth_mean.clone(),
        variance: truth_var.clone(),
        mean_tol: 0.2,
        variance_rel_tol: 0.3,
        window: CONVERGENCE_WINDOW,
    };
    let dir = tempfile::tempdir().unwrap();

    let ssvn_dir = dir.path().join("ssvn");
    let art = run(
        &five_dim_config("ssvn_chol", 200, &reference),
        &ssvn_dir,
        None,
    )
    .unwrap();
    assert_eq!(art.status, RunStatus::Completed);
    let ssvn_meta = finish_record(&art.meta);
    let ssvn_converged = ssvn_meta["converged_at"].as_u64().map(|v| v as usize);
    let ssvn_final = pooled_moments(&art.trace, 101, 200);
    let ssvn_evals = ssvn_meta["gradient_evaluations"].as_u64().unwrap();

    // sSVGD runs ten times as long as sSVN needed, so the meta record can
    // show whether it gets there within that budget.
    let ssvgd_iterations = (10 * ssvn_converged.unwrap_or(200)).max(200);
    let ssvgd_dir = dir.path().join("ssvgd");
    let art = run(
        &five_dim_config("ssvgd", ssvgd_iterations, &reference),
        &ssvgd_dir,
        None,
    )
    .unwrap();
    assert_eq!(art.status, RunStatus::Completed);
    let ssvgd_meta = finish_record(&art.meta);
    FiveDim {
        truth_mean,
        truth_var,
        ssvn_final,
        ssvgd_final: pooled_moments(&art.trace, 101, 200),
        ssvn_converged,
        ssvgd_converged: ssvgd_meta["converged_at"].as_u64().map(|v| v as usize),
        ssvgd_iterations,
        ssvn_evals,
        ssvgd_evals: ssvgd_meta["gradient_evaluations"].as_u64().unwrap(),
    }
}

/// Moments are taken over the pooled iterations 101 to 200.
fn criterion_7(r: &FiveDim) -> Outcome {
    let sd: Vec<f64> = r.truth_var.iter().map(|v| v.sqrt()).collect();
    let (mean, var) = &r.ssvn_final;
    let mean_err = mean
        .iter()
        .zip(&r.truth_mean)
        .zip(&sd)
        .map(|((m, t), s)| (m - t).abs() / s)
        .fold(0.0, f64::max);
    let var_err = var
        .iter()
        .zip(&r.truth_var)
        .map(|(v, t)| (v - t).abs() / t)
        .fold(0.0, f64::max);
    let s11 = |v: &[f64]| (v[0] - r.truth_var[0]).abs();
    let ssvn_s11 = s11(var);
    let ssvgd_s11 = s11(&r.ssvgd_final.1);
    all(vec![
        (
            mean_err <= 0.2,
            format!("sSVN iterations 101-200 worst mean err {mean_err:.3} sd"),
        ),
        (
            var_err <= 0.3,
            format!("worst variance rel err {var_err:.3}"),
        ),
        (
            ssvgd_s11 > ssvn_s11,
            format!("sigma11 err sSVGD {ssvgd_s11:.4} vs sSVN {ssvn_s11:.4}"),
        ),
    ])
}

fn criterion_8(r: &FiveDim) -> Outcome {
    let Some(ssvn_at) = r.ssvn_converged else {
        return Outcome::new(false, "sSVN never reached the moment tolerance");
    };
    // Not converging within the run counts as needing more than its length.
    let ssvgd_at = r.ssvgd_converged.unwrap_or(r.ssvgd_iterations + 1);
    let ratio = ssvgd_at as f64 / ssvn_at as f64;
    let evals_ssvn = ssvn_at as u64 * 100;
    let evals_ssvgd = ssvgd_at as u64 * 100;
    Outcome::new(
        ratio >= 10.0,
        format!(
            "converged at sSVN {ssvn_at} vs sSVGD {} ({} grads vs >= {evals_ssvgd}; ratio {ratio:.1}; totals {} / {})",
            r.ssvgd_converged.map_or(format!("> {}", r.ssvgd_iterations), |v| v.to_string()),
            evals_ssvn,
            r.ssvn_evals,
            r.ssvgd_evals,
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. CG and Cholesky agreement

fn criterion_9() -> Outcome {
    let target = rosenbrock(2, 1, 0.5, 0.5);
    let kernel = KernelSpec::with_mode(2, MetricMode::AveragedGaussNewton);
    let ens = random_ensemble(3, 2, 91, 1.5);
    let opts = SvnOptions::default();
    let tight = CgOptions {
        rel_tol: 1e-10,
        max_iter: Some(100),
    };
    let chol = ssvn_step_cholesky(&ens, &target, &kernel, &opts, false, &mut ZeroNoise).unwrap();
    let (cg, _) =
        ssvn_step_cg(&ens, &target, &kernel, &opts, &tight, false, &mut ZeroNoise).unwrap();
    let det_err = max_abs(chol.positions.as_slice(), cg.positions.as_slice());

    let draws = 10_000;
    let mut sums = [vec![0.0; 6], vec![0.0; 6]];
    let mut squares = [vec![0.0; 6], vec![0.0; 6]];
    let mut rng_chol = ChaCha8Rng::seed_from_u64(92);
    let mut rng_cg = ChaCha8Rng::seed_from_u64(93);
    for _ in 0..draws {
        let a = ssvn_step_cholesky(&ens, &target, &kernel, &opts, true, &mut rng_chol).unwrap();
        let (b, _) =
            ssvn_step_cg(&ens, &target, &kernel, &opts, &tight, true, &mut rng_cg).unwrap();
        for (k, out) in [a, b].iter().enumerate() {
            for (i, (x, z)) in out
                .positions
                .as_slice()
                .iter()
                .zip(ens.positions.as_slice())
                .enumerate()
            {
                let step = x - z;
                sums[k][i] += step;
                squares[k][i] += step * step;
            }
        }
    }
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        let mean = |k: usize| sums[k][i] / n;
        let var = |k: usize| squares[k][i] / n - mean(k).powi(2);
        let se = (var(0) / n + var(1) / n).sqrt();
        worst = worst.max((mean(0) - mean(1)).abs() / se);
    }
    all(vec![
        (
            det_err < 1e-8,
            format!("deterministic step diff {det_err:.1e}"),
        ),
        (
            worst < 4.0,
            format!("mean stochastic step max z {worst:.2}"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// 10. Ten-dimensional Hybrid Rosenbrock, P-P agreement

fn criterion_10() -> Outcome {
    let target = rosenbrock(4, 3, 30.0, 20.0);
    let kernel = KernelSpec::with_mode(10, MetricMode::Identity);
    let opts = SvnOptions::default();
    let mut ens = uniform_init(100, 10, 101);
    let mut pool: Vec<Ensemble> = Vec::new();
    for t in 1..=300u64 {
        let mut rng = substream(101, Purpose::SvnNoise, t);
        ens = ssvn_step_cholesky(&ens, &target, &kernel, &opts, true, &mut rng).unwrap();
        if t > 200 {
            pool.push(ens.clone());
        }
    }
    let samples = ssvn::pool_samples(&pool, 100).unwrap();
    let mut gt_rng = substream(100, Purpose::GroundTruth, 0);
    let truth = target.sample(100_000, &mut gt_rng).unwrap();
    let curve = pp_curve(&samples, &truth).unwrap();
    let sup = pp_sup_deviation(&curve);
    let per_dim: Vec<String> = curve
        .iter()
        .map(|c| format!("{:.3}", pp_sup_deviation(std::slice::from_ref(c))))
        .collect();
    Outcome::new(
        sup < 0.1,
        format!("sup |q - p| {sup:.3} (per dimension {})", per_dim.join(" ")),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let selected = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let mut failures = 0;
    let mut report = |k: usize, name: &str, start: Instant, outcome: Outcome| {
        println!(
            "{} criterion {k:>2} {name}: {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failures += 1;
        }
    };

    let simple: [Criterion; 6] = [
        (1, "structural identities", criterion_1),
        (2, "derivatives", criterion_2),
        (3, "noise covariances", criterion_3),
        (4, "stationarity", criterion_4),
        (5, "deterministic correction", criterion_5),
        (6, "2D Hybrid Rosenbrock MMD", criterion_6),
    ];
    for (k, name, f) in simple {
        if selected(k) {
            let start = Instant::now();
            report(k, name, start, f());
        }
    }
    if selected(7) || selected(8) {
        let start = Instant::now();
        let five = run_five_dim();
        if selected(7) {
            report(7, "5D Hybrid Rosenbrock moments", start, criterion_7(&five));
        }
        if selected(8) {
            report(
                8,
                "gradient-evaluation efficiency",
                start,
                criterion_8(&five),
            );
        }
    }
    if selected(9) {
        let start = Instant::now();
        report(9, "CG / Cholesky agreement", start, criterion_9());
    }
    if selected(10) {
        let start = Instant::now();
        report(10, "10D Hybrid Rosenbrock P-P", start, criterion_10());
    }
    if failures > 0 {
        println!("{failures} criterion checks failed");
        std::process::exit(1);
    }
}
