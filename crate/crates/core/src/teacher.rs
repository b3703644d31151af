//! The expert policy optimizer: FTRL-style logits with a visit penalty and a
//! γ-mixed softmax policy.
//!
//! Logits follow `s_{t+1} = (c/t) (U g_t + V n_t)` with `U = H⁻¹` and
//! `V = -λ H⁻¹`; the empty history maps to zero logits (uniform policy).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bandit::History;
use crate::error::{IcpoError, Result};
use crate::linalg;

/// Teacher and environment constants. Construct through [`TeacherSettings`]
/// (or [`TeacherConfig::new`]) so the derived `U`, `V` are always consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TeacherSettings", into = "TeacherSettings")]
pub struct TeacherConfig {
    arms: usize,
    c: f64,
    gamma: f64,
    lambda: f64,
    h: DMatrix<f64>,
    tau_w: f64,
    sigma_xi: f64,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
}

fn default_lambda() -> f64 {
    0.1
}

/// Plain, serializable form of [`TeacherConfig`] as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSettings {
    /// Number of arms `K`.
    pub k: usize,
    /// Step-size constant (`η_t = c / t`).
    pub c: f64,
    /// Exploration mix in `[0, 1)`.
    pub gamma: f64,
    /// Visit-penalty multiplier.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Task prior standard deviation.
    pub tau_w: f64,
    /// Reward noise standard deviation.
    pub sigma_xi: f64,
    /// Regularizer `H` as rows; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
}

impl TryFrom<TeacherSettings> for TeacherConfig {
    type Error = IcpoError;

    fn try_from(s: TeacherSettings) -> Result<Self> {
        let h = match &s.h {
            None => DMatrix::identity(s.k, s.k),
            Some(rows) => {
                if rows.len() != s.k || rows.iter().any(|r| r.len() != s.k) {
                    return Err(IcpoError::InvalidConfig(format!(
                        "regularizer must be {0}x{0}",
                        s.k
                    )));
                }
                DMatrix::from_fn(s.k, s.k, |i, j| rows[i][j])
            }
        };
        TeacherConfig::new(s.k, s.c, s.gamma, s.lambda, h, s.tau_w, s.sigma_xi)
    }
}

impl From<TeacherConfig> for TeacherSettings {
    fn from(cfg: TeacherConfig) -> Self {
        let identity = cfg.h == DMatrix::identity(cfg.arms, cfg.arms);
        TeacherSettings {
            k: cfg.arms,
            c: cfg.c,
            gamma: cfg.gamma,
            lambda: cfg.lambda,
            tau_w: cfg.tau_w,
            sigma_xi: cfg.sigma_xi,
            h: (!identity).then(|| {
                cfg.h
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect()
            }),
        }
    }
}

impl TeacherConfig {
    pub fn new(
        arms: usize,
        c: f64,
        gamma: f64,
        lambda: f64,
        h: DMatrix<f64>,
        tau_w: f64,
        sigma_xi: f64,
    ) -> Result<Self> {
        let bad = |msg: String| Err(IcpoError::InvalidConfig(msg));
        if arms < 2 {
            return bad(format!("need at least 2 arms, got {arms}"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return bad(format!("step constant c must be > 0, got {c}"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return bad(format!("gamma must lie in [0, 1), got {gamma}"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {lambda}"));
        }
        if !(tau_w >= 0.0 && tau_w.is_finite()) || !(sigma_xi >= 0.0 && sigma_xi.is_finite()) {
            return bad("tau_w and sigma_xi must be finite and >= 0".into());
        }
        if h.nrows() != arms || h.ncols() != arms || !linalg::all_finite(&h) {
            return bad(format!("regularizer must be a finite {arms}x{arms} matrix"));
        }
        if linalg::max_abs(&(&h - h.transpose())) > 1e-12 {
            return bad("regularizer must be symmetric".into());
        }
        let min_eig = linalg::sym_eigenvalues(&h)[0];
        if min_eig <= 1e-10 {
            return bad(format!(
                "regularizer must be positive definite (min eigenvalue {min_eig:.3e})"
            ));
        }
        let u = match h.clone().cholesky() {
            Some(chol) => linalg::symmetrize(&chol.inverse()),
            None => return bad("regularizer is not positive definite".into()),
        };
        let residual = linalg::max_abs(&(&u * &h - DMatrix::identity(arms, arms)));
        if residual > 1e-10 {
            return bad(format!(
                "regularizer is too ill-conditioned (|UH - I| = {residual:.3e})"
            ));
        }
        let v = &u * -lambda;
        Ok(Self {
            arms,
            c,
            gamma,
            lambda,
            h,
            tau_w,
            sigma_xi,
            u,
            v,
        })
    }

    /// Identity regularizer, which is also the default.
    pub fn with_identity(
        arms: usize,
        c: f64,
        gamma: f64,
        lambda: f64,
        tau_w: f64,
        sigma_xi: f64,
    ) -> Result<Self> {
        Self::new(
            arms,
            c,
            gamma,
            lambda,
            DMatrix::identity(arms, arms),
            tau_w,
            sigma_xi,
        )
    }

    pub fn arms(&self) -> usize {
        self.arms
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn tau_w(&self) -> f64 {
        self.tau_w
    }
    pub fn sigma_xi(&self) -> f64 {
        self.sigma_xi
    }
    /// `U = H⁻¹`.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }
    /// `V = -λ H⁻¹`.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn settings(&self) -> TeacherSettings {
        self.clone().into()
    }
}

/// Logits together with the γ-mixed policy they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPolicy {
    pub logits: DVector<f64>,
    pub probs: DVector<f64>,
}

pub fn teacher_logits(history: &History, cfg: &TeacherConfig) -> Result<DVector<f64>> {
    if history.arms() != cfg.arms {
        return Err(IcpoError::Dimension {
            expected: cfg.arms,
            got: history.arms(),
        });
    }
    let t = history.len();
    if t == 0 {
        return Ok(DVector::zeros(cfg.arms));
    }
    let eta = cfg.c / t as f64;
    Ok((&cfg.u * history.reward_sums() + &cfg.v * history.counts()) * eta)
}

/// Numerically stable softmax.
pub fn softmax(s: &DVector<f64>) -> DVector<f64> {
    let max = s.max();
    let e = s.map(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

/// `(1 - γ) softmax(s) + γ/K`.
pub fn mix_policy(s: &DVector<f64>, gamma: f64) -> Result<MixedPolicy> {
    if !s.iter().all(|x| x.is_finite()) {
        return Err(IcpoError::Numeric("logits".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(IcpoError::Domain(format!("gamma {gamma} outside [0, 1]")));
    }
    let k = s.len() as f64;
    let probs = softmax(s).map(|p| (1.0 - gamma) * p + gamma / k);
    Ok(MixedPolicy {
        logits: s.clone(),
        probs,
    })
}

/// Coverage margin `c_λ = τ_w γ/K − (1−γ) c ‖U‖ σ_ξ² / 2`. Advisory only.
pub fn coverage_margin(cfg: &TeacherConfig) -> f64 {
    let k = cfg.arms as f64;
    cfg.tau_w * cfg.gamma / k
        - (1.0 - cfg.gamma) * cfg.c * linalg::op_norm(&cfg.u) * cfg.sigma_xi.powi(2) / 2.0
}
