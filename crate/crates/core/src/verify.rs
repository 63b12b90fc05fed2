//! Runtime verification suites: finite-difference gradient checks and
//! equivalence checks of the FFT routines against direct spatial oracles.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionParams;
use crate::error::Result;
use crate::fusion::{FusionKernel, FusionParams};
use crate::imaging::Tensor3;
use crate::spectral::{cf_backward, cf_solve, circular_cross_correlate, CfConfig, Plane};
use crate::training::{batch_loss_and_grad, logistic_loss, make_label_map, FusionModel, PreparedSample};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients near zero are judged
/// on absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: String,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<CheckRow>,
}

impl Report {
    pub fn push(&mut self, suite: &str, name: impl Into<String>, error: f64, tolerance: f64) {
        self.rows.push(CheckRow {
            suite: suite.to_string(),
            name: name.into(),
            error,
            tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    /// Fixed-width table, one row per check.
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:<34} {:>12} {:>10}  result\n", "suite", "check", "error", "tolerance");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<34} {:>12.3e} {:>10.0e}  {}",
                r.suite,
                r.name,
                r.error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `x`.
pub fn max_gradient_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    worst
}

/// Circular correlation by the defining sum `out[u] = Σ_k Σ_i t_k[i] · s_k[i + u]`.
pub fn brute_force_correlation(t: &Tensor3, s: &Tensor3) -> Plane {
    let (h, w, c) = s.shape();
    Plane::from_fn(h, w, |ur, uc| {
        let mut acc = 0.0;
        for r in 0..t.height() {
            for col in 0..t.width() {
                for k in 0..c {
                    acc += t.get(r, col, k) * s.get((r + ur) % h, (col + uc) % w, k);
                }
            }
        }
        acc
    })
}

/// Ridge regression over every circular shift, solved densely:
/// `(AᵀA + λI) w = Aᵀy` with `A[u, (k, i)] = z_k[i + u]`.
pub fn dense_ridge(z: &Tensor3, y: &Plane, lambda: f64) -> Tensor3 {
    let (h, w, c) = z.shape();
    let n = h * w;
    let p = n * c;
    let col = |k: usize, i: usize| k * n + i;
    let mut a = vec![0.0; n * p];
    for ur in 0..h {
        for uc in 0..w {
            let u = ur * w + uc;
            for k in 0..c {
                for ir in 0..h {
                    for ic in 0..w {
                        a[u * p + col(k, ir * w + ic)] = z.get((ir + ur) % h, (ic + uc) % w, k);
                    }
                }
            }
        }
    }
    let mut m = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            m[i * p + j] = (0..n).map(|u| a[u * p + i] * a[u * p + j]).sum();
        }
        m[i * p + i] += lambda;
        rhs[i] = (0..n).map(|u| a[u * p + i] * y.data()[u]).sum();
    }
    let sol = gaussian_elimination(m, rhs, p);
    Tensor3::from_fn(h, w, c, |r, cc, k| sol[col(k, r * w + cc)])
}

/// Solves a dense `n × n` system with partial pivoting.
fn gaussian_elimination(mut m: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))
            .unwrap_or(k);
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
        }
        let d = m[k * n + k];
        for i in k + 1..n {
            let f = m[i * n + k] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i * n + j] * x[j]).sum();
        x[i] = (b[i] - s) / m[i * n + i];
    }
    x
}

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

/// `cf_backward` against differences of `Σ G ⊙ cf_solve(z)`.
pub fn check_cf_backward(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (5, 6, 2);
    let z = random_tensor(&mut rng, h, w, c);
    let y = random_plane(&mut rng, h, w);
    let g = random_tensor(&mut rng, h, w, c);
    let cfg = CfConfig {
        lambda: 0.5,
        ..CfConfig::default()
    };
    let analytic = cf_backward(&g, &z, &y, &cfg)?;
    let mut f = |x: &[f64]| {
        let zt = Tensor3::new(h, w, c, x.to_vec()).expect("shape");
        let wt = cf_solve(&zt, &y, &cfg).expect("solve");
        wt.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    Ok(max_gradient_error(&mut f, z.data(), analytic.data()))
}

/// `logistic_loss` gradient on a random 5×5 map.
pub fn check_logistic_loss(seed: u64, balance: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Plane::from_fn(5, 5, |_, _| rng.random_range(-3.0..3.0));
    let label = make_label_map(5, 1.0)?;
    let (_, grad) = logistic_loss(&v, &label, balance)?;
    let mut f = |x: &[f64]| {
        let p = Plane::new(5, 5, x.to_vec()).expect("shape");
        logistic_loss(&p, &label, balance).expect("loss").0
    };
    Ok(max_gradient_error(&mut f, v.data(), grad.data()))
}

/// Random prepared samples for two branches of 4 and 3 channels on
/// `side × side` maps.
pub fn random_samples(rng: &mut ChaCha8Rng, count: usize, side: usize) -> Result<Vec<PreparedSample>> {
    let label = make_label_map(side, 1.5)?;
    Ok((0..count)
        .map(|_| {
            let channel_responses = [4usize, 3]
                .iter()
                .map(|c| (0..*c).map(|_| random_plane(rng, side, side)).collect())
                .collect();
            let pooled = [4usize, 3]
                .iter()
                .map(|c| (0..*c).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect();
            PreparedSample {
                channel_responses,
                pooled,
                label: label.clone(),
            }
        })
        .collect())
}

/// A model with 3×3 fusion kernels and attention weights large enough that
/// the ReLU and sigmoid are in their non-trivial ranges.
pub fn random_model(rng: &mut ChaCha8Rng) -> FusionModel {
    let kernel = |rng: &mut ChaCha8Rng| {
        FusionKernel::new(3, (0..9).map(|_| rng.random_range(-0.5..0.5)).collect()).expect("odd side")
    };
    let fusion = FusionParams {
        kernels: vec![kernel(rng), kernel(rng)],
        scale: rng.random_range(0.5..1.5),
        bias: rng.random_range(-0.2..0.2),
    };
    let attention = [4usize, 3]
        .iter()
        .map(|c| {
            let mut a = AttentionParams::zeros(*c, 0.5);
            let flat: Vec<f64> = (0..a.num_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
            a.assign(&flat);
            a
        })
        .collect();
    FusionModel { fusion, attention }
}

/// Gradient of the mean batch loss over every trainable parameter, reported
/// per parameter group.
pub fn check_training_gradients(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = random_samples(&mut rng, 2, 7)?;
    let model = random_model(&mut rng);
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let (_, grad) = batch_loss_and_grad(&refs, &model, true)?;
    let x = model.flatten();
    let layout = model.layout();

    let mut groups: Vec<(String, std::ops::Range<usize>)> = Vec::new();
    for (d, start) in layout.kernel_starts.iter().enumerate() {
        let len = model.fusion.kernels[d].data().len();
        groups.push((format!("fusion kernel k{}", d + 1), *start..start + len));
    }
    groups.push(("fusion scale s".into(), layout.scale..layout.scale + 1));
    groups.push(("fusion bias b".into(), layout.bias..layout.bias + 1));
    for (d, start) in layout.attention.iter().enumerate() {
        let len = model.attention[d].num_params();
        groups.push((format!("attention branch {}", d + 1), *start..start + len));
    }

    let mut probe_model = model.clone();
    let mut f = |p: &[f64]| {
        probe_model.assign(p);
        batch_loss_and_grad(&refs, &probe_model, true).expect("batch").0
    };
    let mut out = Vec::with_capacity(groups.len());
    for (name, range) in groups {
        let mut worst = 0.0f64;
        let mut probe = x.clone();
        for i in range {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            worst = worst.max(rel_error(grad[i], (up - down) / (2.0 * FD_STEP)));
        }
        out.push((name, worst));
    }
    Ok(out)
}

pub const GRADCHECK_SEEDS: [u64; 3] = [0, 1, 2];

/// Every finite-difference suite across [`GRADCHECK_SEEDS`].
pub fn gradcheck() -> Result<Report> {
    let mut report = Report::default();
    for seed in GRADCHECK_SEEDS {
        report.push("cf_backward", format!("dz seed {seed}"), check_cf_backward(seed)?, GRAD_TOLERANCE);
        for balance in [true, false] {
            report.push(
                "logistic_loss",
                format!("dv seed {seed} balance {}", if balance { "on" } else { "off" }),
                check_logistic_loss(seed, balance)?,
                GRAD_TOLERANCE,
            );
        }
        for (name, err) in check_training_gradients(seed)? {
            report.push("train_fusion", format!("{name} seed {seed}"), err, GRAD_TOLERANCE);
        }
    }
    Ok(report)
}

/// FFT correlation against the defining sum on random `8×8×3` instances.
pub fn check_fft_correlation(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = random_tensor(&mut rng, 8, 8, 3);
        let s = random_tensor(&mut rng, 8, 8, 3);
        worst = worst.max(circular_cross_correlate(&t, &s)?.max_abs_diff(&brute_force_correlation(&t, &s)));
    }
    Ok(worst)
}

/// Valid-mode correlation of a smaller template against the defining sum.
pub fn check_valid_correlation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = random_tensor(&mut rng, 3, 4, 2);
    let s = random_tensor(&mut rng, 9, 8, 2);
    let fast = circular_cross_correlate(&t, &s)?;
    let full = brute_force_correlation(&t, &s);
    let slow = Plane::from_fn(fast.height(), fast.width(), |r, c| full.get(r, c));
    Ok(fast.max_abs_diff(&slow))
}

/// Relative difference between `cf_solve` and the dense ridge solution.
pub fn check_cf_solve(seed: u64, h: usize, w: usize, c: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor(&mut rng, h, w, c);
    let y = random_plane(&mut rng, h, w);
    let cfg = CfConfig {
        lambda: 0.1,
        ..CfConfig::default()
    };
    let fast = cf_solve(&z, &y, &cfg)?;
    let dense = dense_ridge(&z, &y, cfg.lambda);
    let norm = dense.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = fast
        .data()
        .iter()
        .zip(dense.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm.max(f64::MIN_POSITIVE))
}

/// Oracle equivalence suites.
pub fn selftest() -> Result<Report> {
    let mut report = Report::default();
    report.push("correlation", "fft vs sum, 20 x 8x8x3", check_fft_correlation(0, 20)?, 1e-5);
    report.push("correlation", "valid mode 3x4 over 9x8", check_valid_correlation(1)?, 1e-9);
    for (h, w, c) in [(6, 6, 1), (4, 4, 2), (5, 3, 3)] {
        report.push("cf_solve", format!("dense ridge {h}x{w}x{c}"), check_cf_solve(7, h, w, c)?, 1e-5);
    }
    Ok(report)
}
