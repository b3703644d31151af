//! Numerical checks of the inequalities behind the imitation guarantees.
//!
//! Every check reports a *slack*: how far the measured quantity is from
//! violating its inequality. Negative slack is a violation. The zero-sum
//! subspace is always represented by the Helmert basis from [`crate::linalg`].
//!
//! The KL comparison uses the per-prefix average `L = mean_t Δᵀ Γ̂ Δ` with
//! `Δ = Proj(ŝ − s)`, i.e. twice the pretraining loss.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bandit::check_simplex;
use crate::error::{IcpoError, Result};
use crate::exec::Exec;
use crate::linalg;
use crate::lsa::{two_channel_logits, TwoChannelParams};
use crate::pretrain::{self, empirical_stats, fisher_matrix, generate_dataset, PretrainDataset};
use crate::teacher::{mix_policy, softmax, TeacherConfig};

/// Restricted eigenvalue range `(λ_min, λ_max)` of `F(p)` on `1⊥`.
pub fn fisher_spectrum_check(p: &DVector<f64>, gamma: f64) -> Result<(f64, f64)> {
    check_simplex(p.as_slice())?;
    let floor = gamma / p.len() as f64;
    if let Some(&value) = p.iter().find(|&&x| x < floor - 1e-12) {
        return Err(IcpoError::NotMixture { value, floor });
    }
    let eig = linalg::restricted_eigenvalues(&fisher_matrix(p)?, &linalg::helmert_basis(p.len()));
    Ok((eig[0], eig[eig.len() - 1]))
}

/// `‖softmax(u) − softmax(v)‖ / ‖u − v‖` for `u − v ∈ 1⊥`; zero when `u = v`.
pub fn softmax_lipschitz_check(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(IcpoError::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    let d = u - v;
    if (linalg::project(&d) - &d).norm() > 1e-10 {
        return Err(IcpoError::Domain(
            "logit difference must lie in the zero-sum subspace".into(),
        ));
    }
    let n = d.norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok(softmax_difference(v, &d).norm() / n)
}

/// `softmax(u + d) − softmax(u)` without the cancellation of subtracting two
/// nearly equal vectors: entry `i` is `p_i Σ_j p_j e^{d_j} expm1(d_i − d_j) / Σ_j p_j e^{d_j}`.
pub fn softmax_difference(u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
    let p = softmax(u);
    let shift = d.max();
    let weights = DVector::from_fn(p.len(), |j, _| p[j] * (d[j] - shift).exp());
    let total = weights.sum();
    DVector::from_fn(p.len(), |i, _| {
        p[i] * weights
            .iter()
            .zip(d.iter())
            .map(|(wj, dj)| wj * (d[i] - dj).exp_m1())
            .sum::<f64>()
            / total
    })
}

/// `KL(p ‖ q)` in nats; both arguments must respect the floor `γ/K`.
pub fn kl_divergence(p: &DVector<f64>, q: &DVector<f64>, gamma: f64) -> Result<f64> {
    let floor = gamma / p.len() as f64;
    for x in p.iter().chain(q.iter()) {
        if *x < floor - 1e-12 || *x <= 0.0 {
            return Err(IcpoError::NotMixture { value: *x, floor });
        }
    }
    Ok(p.iter()
        .zip(q.iter())
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Both sides of the KL / Fisher-loss comparison over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichSample {
    /// `mean_t Δᵀ Γ̂ Δ`.
    pub loss: f64,
    /// `mean_t KL(p_{t+1} ‖ p̂_{t+1})`.
    pub mean_kl: f64,
    /// `(1−γ)²/4`.
    pub lower_factor: f64,
    /// `K/(4γ)`.
    pub upper_factor: f64,
    pub per_prefix_loss: Vec<f64>,
    pub per_prefix_kl: Vec<f64>,
}

impl SandwichSample {
    pub fn lower_slack(&self) -> f64 {
        self.mean_kl - self.lower_factor * self.loss
    }

    pub fn upper_slack(&self) -> f64 {
        self.upper_factor * self.loss - self.mean_kl
    }

    pub fn holds(&self) -> bool {
        self.lower_slack() >= -1e-10 && self.upper_slack() >= -1e-10
    }
}

/// Evaluates teacher-vs-student KL and the Fisher loss on the same pairs.
pub fn kl_sandwich_check(tc: &TwoChannelParams, ds: &PretrainDataset) -> Result<SandwichSample> {
    let gamma = ds.config.gamma();
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(IcpoError::Domain(format!(
            "gamma must be in (0, 1), got {gamma}"
        )));
    }
    let k = ds.arms();
    let mut weight = DMatrix::zeros(k, k);
    let mut failure = None;
    for traj in &ds.trajectories {
        traj.for_each_pair(|pair| match fisher_matrix(pair.fisher_policy) {
            Ok(f) => weight += f,
            Err(e) => failure = Some(e),
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    weight /= ds.pair_count() as f64;

    let mut per_prefix_loss = Vec::with_capacity(ds.pair_count());
    let mut per_prefix_kl = Vec::with_capacity(ds.pair_count());
    let mut failure = None;
    for traj in &ds.trajectories {
        traj.for_each_pair(|pair| {
            let step = || -> Result<(f64, f64)> {
                let s = two_channel_logits(pair.prefix, tc)?;
                let delta = linalg::project(&(&s - pair.label));
                let student = mix_policy(&s, gamma)?.probs;
                Ok((
                    delta.dot(&(&weight * &delta)),
                    kl_divergence(pair.next_policy, &student, gamma)?,
                ))
            };
            match step() {
                Ok((l, kl)) => {
                    per_prefix_loss.push(l);
                    per_prefix_kl.push(kl);
                }
                Err(e) => failure = Some(e),
            }
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let m = per_prefix_loss.len() as f64;
    Ok(SandwichSample {
        loss: per_prefix_loss.iter().sum::<f64>() / m,
        mean_kl: per_prefix_kl.iter().sum::<f64>() / m,
        lower_factor: (1.0 - gamma).powi(2) / 4.0,
        upper_factor: k as f64 / (4.0 * gamma),
        per_prefix_loss,
        per_prefix_kl,
    })
}

/// Minimum eigenvalue of the `2K x 2K` moment restricted to `S = 1⊥ ⊕ 1⊥`.
pub fn sigma_min_restricted(sigma: &DMatrix<f64>) -> f64 {
    let k = sigma.nrows() / 2;
    linalg::restricted_eigenvalues(sigma, &linalg::channel_basis(k))[0]
}

/// `μ = λ_min(Γ̂|1⊥) · λ_min(Σ̄̂|S)`.
pub fn pl_constant(gamma: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let g = linalg::restricted_eigenvalues(gamma, &linalg::helmert_basis(gamma.nrows()))[0];
    g * sigma_min_restricted(sigma)
}

/// Largest relative error between the analytic gradient and central
/// differences of the quadratic loss, over every entry of `W̄`.
pub fn gradient_fd_error(w: &DMatrix<f64>, fs: &pretrain::FisherStats, h: f64) -> f64 {
    let analytic = pretrain::gradient_w(w, fs);
    let mut numeric = DMatrix::zeros(w.nrows(), w.ncols());
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            numeric[(i, j)] = (pretrain::loss_quadratic_w(&plus, fs)
                - pretrain::loss_quadratic_w(&minus, fs))
                / (2.0 * h);
        }
    }
    (numeric - &analytic).norm() / analytic.norm().max(f64::MIN_POSITIVE)
}

/// Outcome of one lemma check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub samples: usize,
    pub worst_slack: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(id: &str, samples: usize, worst_slack: f64, tol: f64) -> Self {
        Self {
            id: id.into(),
            samples,
            worst_slack,
            passed: worst_slack >= -tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaSuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl LemmaSuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, id: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.id == id)
    }
}

/// Settings for [`run_lemma_suite`]. Missing fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaSuiteOptions {
    pub seed: u64,
    /// Random draws for the spectrum and Lipschitz sweeps.
    pub samples: usize,
    /// Random student draws for the KL comparison.
    pub sandwich_draws: usize,
    /// Entry scale of the random perturbation added to the teacher channel.
    pub sandwich_scale: f64,
    /// Teacher for the KL comparison dataset.
    pub sandwich_teacher: TeacherConfig,
    pub sandwich_trajectories: usize,
    pub sandwich_horizon: usize,
    /// Teacher with positive coverage margin for the moment checks.
    pub margin_teacher: TeacherConfig,
    pub margin_trajectories: usize,
    pub margin_horizon: usize,
    /// Random points for the finite-difference gradient check.
    pub fd_points: usize,
}

impl Default for LemmaSuiteOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            samples: 10_000,
            sandwich_draws: 50,
            sandwich_scale: 0.5,
            sandwich_teacher: TeacherConfig::with_identity(10, 1.0, 0.2, 0.1, 1.0, 0.5)
                .expect("valid preset"),
            sandwich_trajectories: 100,
            sandwich_horizon: 30,
            margin_teacher: TeacherConfig::with_identity(5, 0.5, 0.5, 0.1, 1.0, 0.1)
                .expect("valid preset"),
            margin_trajectories: 200,
            margin_horizon: 20,
            fd_points: 100,
        }
    }
}

const ARM_CHOICES: [usize; 3] = [2, 5, 10];

fn normal_vector(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(k, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random `γ`-mixture: `(1−γ) softmax(z) + γ/K` with logits of random scale.
pub fn random_mixture(rng: &mut ChaCha8Rng, k: usize, gamma: f64) -> DVector<f64> {
    let scale = 10f64.powf(rng.random_range(-1.0..1.5));
    let z = normal_vector(rng, k, scale);
    mix_policy(&z, gamma).expect("finite logits").probs
}

fn spectrum_sweep(opts: &LemmaSuiteOptions, exec: Exec) -> Result<CheckResult> {
    let slacks = exec.try_map(opts.samples, |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0B1);
        rng.set_stream(i as u64);
        let k = ARM_CHOICES[i % ARM_CHOICES.len()];
        let gamma = rng.random_range(0.01..0.99);
        let p = random_mixture(&mut rng, k, gamma);
        let (lo, hi) = fisher_spectrum_check(&p, gamma)?;
        Ok((lo - gamma / k as f64).min(0.5 - hi))
    })?;
    Ok(CheckResult::new(
        "fisher_spectrum",
        slacks.len(),
        slacks.into_iter().fold(f64::INFINITY, f64::min),
        1e-12,
    ))
}

fn lipschitz_sweep(opts: &LemmaSuiteOptions, exec: Exec) -> Result<CheckResult> {
    let slacks = exec.try_map(opts.samples, |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0B2);
        rng.set_stream(i as u64);
        let k = ARM_CHOICES[i % ARM_CHOICES.len()];
        let base_scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let step_scale = 10f64.powf(rng.random_range(-4.0..1.0));
        let u = normal_vector(&mut rng, k, base_scale);
        let d = linalg::project(&normal_vector(&mut rng, k, step_scale));
        Ok(0.5 - softmax_lipschitz_check(&(&u + d), &u)?)
    })?;
    Ok(CheckResult::new(
        "softmax_lipschitz",
        slacks.len(),
        slacks.into_iter().fold(f64::INFINITY, f64::min),
        1e-12,
    ))
}

/// Random students around the teacher channel: `c Proj[V U] + scale · Proj(Z)`.
pub fn random_students(
    cfg: &TeacherConfig,
    draws: usize,
    scale: f64,
    seed: u64,
) -> Vec<TwoChannelParams> {
    let k = cfg.arms();
    let teacher = TwoChannelParams::teacher(cfg);
    (0..draws)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A1);
            rng.set_stream(i as u64);
            let wn = &teacher.wn + normal_matrix(&mut rng, k, k, scale);
            let wg = &teacher.wg + normal_matrix(&mut rng, k, k, scale);
            TwoChannelParams::from_projected(&wn, &wg)
        })
        .collect()
}

fn sandwich_sweep(opts: &LemmaSuiteOptions, exec: Exec) -> Result<CheckResult> {
    let ds = generate_dataset(
        &opts.sandwich_teacher,
        opts.sandwich_trajectories,
        opts.sandwich_horizon,
        opts.seed,
        exec,
    )?;
    let students = random_students(
        &opts.sandwich_teacher,
        opts.sandwich_draws,
        opts.sandwich_scale,
        opts.seed,
    );
    let slacks = exec.try_map(students.len(), |i| -> Result<f64> {
        let s = kl_sandwich_check(&students[i], &ds)?;
        // Relative slack so that draws with different loss magnitudes are comparable.
        let scale = s.mean_kl.max(f64::MIN_POSITIVE);
        Ok((s.lower_slack() / scale).min(s.upper_slack() / scale))
    })?;
    Ok(CheckResult::new(
        "kl_sandwich",
        slacks.len(),
        slacks.into_iter().fold(f64::INFINITY, f64::min),
        1e-10,
    ))
}

fn margin_checks(opts: &LemmaSuiteOptions, exec: Exec) -> Result<Vec<CheckResult>> {
    let cfg = &opts.margin_teacher;
    let ds = generate_dataset(
        cfg,
        opts.margin_trajectories,
        opts.margin_horizon,
        opts.seed ^ 0xB8,
        exec,
    )?;
    let fs = empirical_stats(&ds, exec)?;
    let sigma_min = sigma_min_restricted(&fs.sigma);
    let k = cfg.arms();
    let mu = pl_constant(&fs.gamma, &fs.sigma);
    let gamma_floor = linalg::restricted_eigenvalues(&fs.gamma, &linalg::helmert_basis(k))[0]
        - cfg.gamma() / k as f64;
    let fd = exec.map(opts.fd_points, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xB7);
        rng.set_stream(i as u64);
        let w = normal_matrix(&mut rng, k, 2 * k, 1.0);
        1e-6 - gradient_fd_error(&w, &fs, 1e-5)
    });
    Ok(vec![
        CheckResult::new("fisher_weight_floor", 1, gamma_floor, 1e-10),
        CheckResult {
            id: "restricted_moment_pd".into(),
            samples: fs.samples,
            worst_slack: sigma_min,
            passed: sigma_min > 0.0,
        },
        CheckResult::new(
            "pl_constant",
            1,
            mu - cfg.gamma() / k as f64 * sigma_min,
            1e-12,
        ),
        CheckResult::new(
            "gradient_fd",
            fd.len(),
            fd.into_iter().fold(f64::INFINITY, f64::min),
            0.0,
        ),
    ])
}

/// Runs every check and collects the JSON-serialisable report.
pub fn run_lemma_suite(opts: &LemmaSuiteOptions, exec: Exec) -> Result<LemmaSuiteReport> {
    let mut checks = vec![
        spectrum_sweep(opts, exec)?,
        lipschitz_sweep(opts, exec)?,
        sandwich_sweep(opts, exec)?,
    ];
    checks.extend(margin_checks(opts, exec)?);
    Ok(LemmaSuiteReport {
        seed: opts.seed,
        checks,
    })
}
