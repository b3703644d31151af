//! One-layer linear self-attention student.
//!
//! Three equivalent views of the same next-step logits are provided:
//!
//! * [`lsa_forward`]: the attention map `E + W^PV E (Eᵀ W^KQ E) / ρ` applied to
//!   the full embedding matrix;
//! * [`closed_form_logits`]: the query-column closed form `q_x + R G_t b / t`,
//!   built from the history Gram matrix without materialising `E`;
//! * [`two_channel_logits`]: the projected form `(W_n n_t + W_g g_t) / t` in
//!   terms of an effective operator pair.
//!
//! The projected identity between the last two needs the parameters in
//! normal form *and* a vanishing query self-interaction
//! `(1ᵀΦ₁) Proj(W^PV_11 q_x)`; see [`LsaParams::query_self_interaction`].
//! When that term is non-zero the projected closed form equals the
//! two-channel logits plus `query_self_interaction / t`.

use nalgebra::{DMatrix, DVector};

use crate::bandit::History;
use crate::error::{IcpoError, Result};
use crate::linalg;
use crate::teacher::TeacherConfig;

/// Violation above which [`extract_two_channel`] refuses the parameters.
pub const NORMAL_FORM_TOL: f64 = 1e-8;
/// Tolerance on `1ᵀW = 0` for [`TwoChannelParams::new`].
pub const ZERO_SUM_TOL: f64 = 1e-10;

/// Full attention parameters, both `(K+1) x (K+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    pub pv: DMatrix<f64>,
    pub kq: DMatrix<f64>,
}

/// The query token appended after the history columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub x: DVector<f64>,
    pub r: f64,
}

impl Query {
    /// `q_x = 1_K`, `q_r = 0`.
    pub fn standard(arms: usize) -> Self {
        Self {
            x: linalg::ones(arms),
            r: 0.0,
        }
    }

    fn stacked(&self) -> DVector<f64> {
        let k = self.x.len();
        DVector::from_fn(k + 1, |i, _| if i < k { self.x[i] } else { self.r })
    }
}

impl LsaParams {
    pub fn zeros(arms: usize) -> Self {
        Self {
            pv: DMatrix::zeros(arms + 1, arms + 1),
            kq: DMatrix::zeros(arms + 1, arms + 1),
        }
    }

    pub fn new(pv: DMatrix<f64>, kq: DMatrix<f64>) -> Result<Self> {
        let d = pv.nrows();
        if d < 3 || pv.ncols() != d || kq.nrows() != d || kq.ncols() != d {
            return Err(IcpoError::InvalidConfig(
                "attention matrices must be square (K+1)x(K+1) with K >= 2".into(),
            ));
        }
        Ok(Self { pv, kq })
    }

    pub fn arms(&self) -> usize {
        self.pv.nrows() - 1
    }

    /// `b = W^KQ q` split as `(Φ₁, φ₂)` for the standard query.
    pub fn transformed_query(&self) -> (DVector<f64>, f64) {
        let k = self.arms();
        let b = &self.kq * Query::standard(k).stacked();
        (b.rows(0, k).into_owned(), b[k])
    }

    /// Norm of the centred value column `Proj(W^PV[0..K, K])`. With the
    /// standard query (`q_r = 0`, `q_x = 1`) this is the only normal-form
    /// condition that can fail.
    pub fn normal_form_violation(&self) -> f64 {
        let k = self.arms();
        let column = self
            .pv
            .view((0, k), (k, 1))
            .into_owned()
            .column(0)
            .into_owned();
        linalg::project(&column).norm()
    }

    pub fn is_normal_form(&self) -> bool {
        self.normal_form_violation() <= 1e-12
    }

    /// `(1ᵀΦ₁) · Proj(W^PV_11 q_x)`: the contribution of the query token's own
    /// Gram block to the projected logits, scaled by `1/t` in the closed form.
    pub fn query_self_interaction(&self) -> DVector<f64> {
        let k = self.arms();
        let (phi1, _) = self.transformed_query();
        let pv11 = self.pv.view((0, 0), (k, k));
        linalg::project(&(pv11 * linalg::ones(k))) * phi1.sum()
    }
}

/// Effective operator pair acting on normalised counts and reward sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoChannelParams {
    pub wn: DMatrix<f64>,
    pub wg: DMatrix<f64>,
}

impl TwoChannelParams {
    /// Validates shapes and that both operators map into the zero-sum subspace (`1ᵀW = 0`).
    pub fn new(wn: DMatrix<f64>, wg: DMatrix<f64>) -> Result<Self> {
        let k = wn.nrows();
        if k < 2 || wn.ncols() != k || wg.nrows() != k || wg.ncols() != k {
            return Err(IcpoError::Dimension {
                expected: k,
                got: wg.nrows(),
            });
        }
        if !linalg::all_finite(&wn) || !linalg::all_finite(&wg) {
            return Err(IcpoError::Numeric("two-channel operators".into()));
        }
        let worst = wn.row_sum().amax().max(wg.row_sum().amax());
        if worst > ZERO_SUM_TOL * (1.0 + linalg::max_abs(&wn).max(linalg::max_abs(&wg))) {
            return Err(IcpoError::InvalidConfig(format!(
                "two-channel operators must have zero column sums (worst {worst:.3e})"
            )));
        }
        Ok(Self { wn, wg })
    }

    /// Projects arbitrary operators onto the zero-sum subspace.
    pub fn from_projected(wn: &DMatrix<f64>, wg: &DMatrix<f64>) -> Self {
        Self {
            wn: linalg::project_rows(wn),
            wg: linalg::project_rows(wg),
        }
    }

    pub fn zeros(arms: usize) -> Self {
        Self {
            wn: DMatrix::zeros(arms, arms),
            wg: DMatrix::zeros(arms, arms),
        }
    }

    /// The exact teacher channel `c · Proj[V U]`.
    pub fn teacher(cfg: &TeacherConfig) -> Self {
        Self::from_projected(&(cfg.v() * cfg.c()), &(cfg.u() * cfg.c()))
    }

    pub fn arms(&self) -> usize {
        self.wn.nrows()
    }

    /// `[W_n W_g]` as a `K x 2K` matrix.
    pub fn concat(&self) -> DMatrix<f64> {
        let k = self.arms();
        let mut out = DMatrix::zeros(k, 2 * k);
        out.view_mut((0, 0), (k, k)).copy_from(&self.wn);
        out.view_mut((0, k), (k, k)).copy_from(&self.wg);
        out
    }

    pub fn from_concat(w: &DMatrix<f64>) -> Result<Self> {
        let k = w.nrows();
        if w.ncols() != 2 * k {
            return Err(IcpoError::Dimension {
                expected: 2 * k,
                got: w.ncols(),
            });
        }
        Self::new(w.columns(0, k).into_owned(), w.columns(k, k).into_owned())
    }
}

/// Embedding `E^(t)`: history columns `(x_s; r_s)` followed by the query column.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub DMatrix<f64>);

impl EmbeddingMatrix {
    pub fn history_len(&self) -> usize {
        self.0.ncols() - 1
    }
}

pub fn build_embedding(history: &History, q_x: &DVector<f64>, q_r: f64) -> Result<EmbeddingMatrix> {
    let k = history.arms();
    if q_x.len() != k {
        return Err(IcpoError::Dimension {
            expected: k,
            got: q_x.len(),
        });
    }
    let t = history.len();
    let mut e = DMatrix::zeros(k + 1, t + 1);
    for (s, step) in history.steps().iter().enumerate() {
        e[(step.action, s)] = 1.0;
        e[(k, s)] = step.reward;
    }
    e.view_mut((0, t), (k, 1)).copy_from(q_x);
    e[(k, t)] = q_r;
    Ok(EmbeddingMatrix(e))
}

/// `E + W^PV E (Eᵀ W^KQ E) / ρ`.
pub fn lsa_forward(e: &EmbeddingMatrix, params: &LsaParams, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho > 0.0) {
        return Err(IcpoError::InvalidConfig(format!(
            "normaliser rho must be > 0, got {rho}"
        )));
    }
    let e = &e.0;
    if e.nrows() != params.pv.nrows() {
        return Err(IcpoError::Dimension {
            expected: params.pv.nrows(),
            got: e.nrows(),
        });
    }
    let attention = e.transpose() * &params.kq * e / rho;
    Ok(e + &params.pv * e * attention)
}

/// Rows `1..K` of the final column of a forward-pass output.
pub fn query_logits(output: &DMatrix<f64>) -> DVector<f64> {
    let k = output.nrows() - 1;
    output
        .view((0, output.ncols() - 1), (k, 1))
        .column(0)
        .into_owned()
}

/// Logits `q_x + R G_t b / t` from the Gram matrix of the history
/// statistics. The empty history returns `q_x`.
pub fn closed_form_logits(history: &History, params: &LsaParams) -> Result<DVector<f64>> {
    let k = history.arms();
    if params.arms() != k {
        return Err(IcpoError::Dimension {
            expected: params.arms(),
            got: k,
        });
    }
    let query = Query::standard(k);
    let t = history.len();
    if t == 0 {
        return Ok(query.x);
    }
    // G_t = [[Diag(n) + q_x q_xᵀ, g], [gᵀ, Σ r²]] (q_r = 0 contributes nothing else).
    let n = history.counts();
    let g = history.reward_sums();
    let r_sq: f64 = history.steps().iter().map(|s| s.reward * s.reward).sum();
    let mut gram = DMatrix::zeros(k + 1, k + 1);
    gram.view_mut((0, 0), (k, k))
        .copy_from(&(DMatrix::from_diagonal(n) + &query.x * query.x.transpose()));
    gram.view_mut((0, k), (k, 1)).copy_from(g);
    gram.view_mut((k, 0), (1, k)).copy_from(&g.transpose());
    gram[(k, k)] = r_sq + query.r * query.r;
    let b = &params.kq * query.stacked();
    let r = params.pv.rows(0, k);
    Ok(&query.x + r * (gram * b) / t as f64)
}

/// Projected logits `(W_n n_t + W_g g_t) / t`; zero for the empty history.
pub fn two_channel_logits(history: &History, tc: &TwoChannelParams) -> Result<DVector<f64>> {
    let k = history.arms();
    if tc.arms() != k {
        return Err(IcpoError::Dimension {
            expected: tc.arms(),
            got: k,
        });
    }
    let t = history.len();
    if t == 0 {
        return Ok(DVector::zeros(k));
    }
    Ok((&tc.wn * history.counts() + &tc.wg * history.reward_sums()) / t as f64)
}

/// `W_n = Proj(W^PV_11 Diag(Φ₁))`, `W_g = Proj(φ₂ W^PV_11)`.
pub fn extract_two_channel(params: &LsaParams) -> Result<TwoChannelParams> {
    let violation = params.normal_form_violation();
    if violation > NORMAL_FORM_TOL {
        return Err(IcpoError::NotNormalForm { violation });
    }
    let k = params.arms();
    let (phi1, phi2) = params.transformed_query();
    let pv11 = params.pv.view((0, 0), (k, k)).into_owned();
    let wn = &pv11 * DMatrix::from_diagonal(&phi1);
    let wg = &pv11 * phi2;
    Ok(TwoChannelParams::from_projected(&wn, &wg))
}

/// Attention weights whose two-channel extraction is `c · Proj[V U]`:
/// `W^PV_11 = c H⁻¹`, `W^KQ_11 = -λ I`, bottom row of `W^KQ` equal to `1/K`.
pub fn realize_teacher_params(cfg: &TeacherConfig) -> LsaParams {
    let k = cfg.arms();
    let mut params = LsaParams::zeros(k);
    params
        .pv
        .view_mut((0, 0), (k, k))
        .copy_from(&(cfg.u() * cfg.c()));
    params
        .kq
        .view_mut((0, 0), (k, k))
        .copy_from(&(DMatrix::identity(k, k) * -cfg.lambda()));
    for j in 0..k {
        params.kq[(k, j)] = 1.0 / k as f64;
    }
    params
}

/// Centering projection `I - 11ᵀ/K`.
pub fn project(v: &DVector<f64>) -> DVector<f64> {
    linalg::project(v)
}
