//! Variable-metric HPE driver for `0 in T(z)`.
//!
//! The driver never computes steps. An instance hands it
//! `(z_k, z~_k, r_k, eta_k, M_k)` with the preimage `z_{k-1} - z_k` of
//! `r_k = M_k (z_{k-1} - z_k)`; the driver certifies the relative error
//! condition, accumulates ergodic averages and evaluates the pointwise,
//! ergodic and Fejer-type bounds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{BlockDiagOperator, Vector, RANGE_TOL};

/// Relative slack allowed in the error condition.
pub const HPE_TOL: f64 = 1e-8;
/// Relative tolerance for `r_k = M_k (z_{k-1} - z_k)`.
pub const RECONSTRUCTION_TOL: f64 = 1e-10;
/// Relative tolerance of every `lhs <= rhs` rate-bound assertion.
pub const BOUND_REL_TOL: f64 = 1e-6;
pub const BOUND_ABS_TOL: f64 = 1e-12;
pub const FEJER_ABS_TOL: f64 = 1e-8;
pub const FEJER_REL_TOL: f64 = 1e-6;
/// Lower bound `-EPS_NONNEG_TOL * scale` accepted for ergodic epsilons.
pub const EPS_NONNEG_TOL: f64 = 1e-10;
pub const DEFAULT_TRANSPORT_SAMPLES: usize = 1000;

/// Absolute rounding floor of a quadratic form `|u - v|^2_M` whose inputs
/// have norm at most `scale`: `dim lambda_max(M) (4 eps scale)^2`.
pub fn rounding_floor(metric: &BlockDiagOperator, scale: f64) -> f64 {
    let lmax = metric.blocks().iter().map(|b| b.max_eigenvalue()).fold(0.0, f64::max);
    metric.dim() as f64 * lmax * (4.0 * f64::EPSILON * scale).powi(2)
}

pub fn bound_holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + BOUND_REL_TOL) + BOUND_ABS_TOL
}

/// One iteration handed to the driver.
#[derive(Debug, Clone)]
pub struct HpeIterate {
    pub k: usize,
    pub z: Vector,
    pub z_tilde: Vector,
    pub r: Vector,
    /// `z_{k-1} - z_k`
    pub preimage: Vector,
    pub eta: f64,
    pub metric: BlockDiagOperator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorCheck {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

/// `lhs <= rhs` assertion with its margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

impl BoundCheck {
    pub fn new(k: usize, lhs: f64, rhs: f64) -> Self {
        Self { k, lhs, rhs, slack: rhs - lhs, pass: bound_holds(lhs, rhs) }
    }
}

/// Constants of the pointwise and ergodic rate bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateBounds {
    /// Upper bound on the distance from `z_0` to the solution set in `M_0`.
    pub d0: f64,
    pub eta0: f64,
    pub c_s: f64,
    pub c_p: f64,
    pub sigma: f64,
    pub e: f64,
    pub e_hat: f64,
}

impl RateBounds {
    pub fn new(d0: f64, eta0: f64, c_s: f64, c_p: f64, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if !(d0 >= 0.0 && eta0 >= 0.0 && c_s >= 0.0 && c_p >= 1.0) || !(d0 + eta0 + c_s + c_p).is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "rate constants out of range: d0 = {d0}, eta0 = {eta0}, C_S = {c_s}, C_P = {c_p}"
            )));
        }
        let e = (1.0 + c_p) * (c_p.sqrt() + c_s * c_p) + c_s * c_p.powf(1.5);
        let e_hat = 2.0 * c_p * (1.0 + c_s) * (sigma * c_p / (1.0 - sigma) + 2.0 * (1.0 + c_p));
        Ok(Self { d0, eta0, c_s, c_p, sigma, e, e_hat })
    }

    fn mass(&self) -> f64 {
        self.d0 * self.d0 + self.eta0
    }

    /// `sqrt([2(1+sigma) C_P (d0^2 + eta0) + 2(1-sigma) eta0] / ((1-sigma) k))`
    pub fn pointwise_rhs(&self, k: usize) -> f64 {
        let s = self.sigma;
        ((2.0 * (1.0 + s) * self.c_p * self.mass() + 2.0 * (1.0 - s) * self.eta0) / ((1.0 - s) * k as f64)).sqrt()
    }

    /// `E sqrt(d0^2 + eta0) / k`
    pub fn ergodic_res_rhs(&self, k: usize) -> f64 {
        self.e * self.mass().sqrt() / k as f64
    }

    /// `E^ (d0^2 + eta0) / k`
    pub fn ergodic_eps_rhs(&self, k: usize) -> f64 {
        self.e_hat * self.mass() / k as f64
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::InvalidSchedule(format!("sigma must lie in [0, 1), got {sigma}")));
    }
    Ok(())
}

/// What the driver keeps per accepted iterate (no operators).
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub k: usize,
    pub z_tilde: Vector,
    pub r: Vector,
    pub eta: f64,
    /// `|r_k|*_{M_k} = |z_{k-1} - z_k|_{M_k}`
    pub dual_res: f64,
    /// Per-block `|.|_{M_k}` of the preimage.
    pub block_dual_res: Vec<f64>,
    /// `|z_{k-1} - z~_k|^2_{M_k}`
    pub gap_sq: f64,
    pub error_check: ErrorCheck,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointwiseCertificate {
    pub k: usize,
    pub best_i: usize,
    pub dual_res_best: f64,
    pub bound: BoundCheck,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicCertificate {
    pub k: usize,
    #[serde(skip)]
    pub z_tilde_a: Vector,
    #[serde(skip)]
    pub r_a: Vector,
    pub eps: f64,
    /// Floating-point scale of the epsilon accumulation.
    pub eps_scale: f64,
    pub eps_nonneg: bool,
    /// `+inf` when `r_a` is outside the range of `M_k`.
    pub dual_res: f64,
    pub in_range: bool,
    pub res_bound: BoundCheck,
    pub eps_bound: BoundCheck,
}

impl ErgodicCertificate {
    pub fn pass(&self) -> bool {
        self.eps_nonneg && self.in_range && self.res_bound.pass && self.eps_bound.pass
    }
}

/// Sequential VM-HPE state for one run.
#[derive(Debug, Clone)]
pub struct HpeState {
    sigma: f64,
    eta0: f64,
    z0: Vector,
    m0: BlockDiagOperator,
    bounds: Option<RateBounds>,
    z: Vector,
    eta: f64,
    metric: BlockDiagOperator,
    history: Vec<HistoryEntry>,
    // ergodic sums, shifted by `z~_1` to limit cancellation
    shift: Option<Vector>,
    sum_zt: Vector,
    sum_r: Vector,
    sum_inner: f64,
    sum_abs_inner: f64,
    sum_gap_sq: f64,
}

impl HpeState {
    pub fn new(sigma: f64, z0: Vector, eta0: f64, m0: BlockDiagOperator) -> Result<Self> {
        check_sigma(sigma)?;
        if !(eta0 >= 0.0 && eta0.is_finite()) {
            return Err(Error::InvalidSchedule(format!("eta0 must be finite and >= 0, got {eta0}")));
        }
        if z0.len() != m0.dim() {
            return Err(Error::DimensionMismatch { expected: m0.dim(), found: z0.len() });
        }
        let n = z0.len();
        Ok(Self {
            sigma,
            eta0,
            z: z0.clone(),
            z0,
            eta: eta0,
            metric: m0.clone(),
            m0,
            bounds: None,
            history: Vec::new(),
            shift: None,
            sum_zt: Vector::zeros(n),
            sum_r: Vector::zeros(n),
            sum_inner: 0.0,
            sum_abs_inner: 0.0,
            sum_gap_sq: 0.0,
        })
    }

    pub fn with_bounds(mut self, bounds: RateBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn z0(&self) -> &Vector {
        &self.z0
    }

    pub fn anchor(&self) -> &BlockDiagOperator {
        &self.m0
    }

    pub fn bounds(&self) -> Option<&RateBounds> {
        self.bounds.as_ref()
    }

    /// Index of the last accepted iterate (0 before the first).
    pub fn k(&self) -> usize {
        self.history.len()
    }

    pub fn z(&self) -> &Vector {
        &self.z
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn metric(&self) -> &BlockDiagOperator {
        &self.metric
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// `|z_k - z~_k|^2_{M_k} + eta_k <= sigma |z_{k-1} - z~_k|^2_{M_k} + eta_{k-1}`,
    /// evaluated against the current `z_{k-1}`.
    pub fn check_error_condition(&self, it: &HpeIterate, prev_eta: f64) -> Result<ErrorCheck> {
        let lhs = it.metric.seminorm_sq(&(&it.z - &it.z_tilde))? + it.eta;
        let rhs = self.sigma * it.metric.seminorm_sq(&(&self.z - &it.z_tilde))? + prev_eta;
        let slack = rhs - lhs;
        let scale = self.z.norm() + it.z.norm() + it.z_tilde.norm();
        let floor = rounding_floor(&it.metric, scale);
        Ok(ErrorCheck { k: it.k, lhs, rhs, slack, pass: slack >= -HPE_TOL * rhs - floor })
    }

    fn check_iterate(&self, it: &HpeIterate) -> Result<()> {
        let n = self.z0.len();
        if it.k != self.k() + 1 {
            return Err(Error::InvalidIndex { k: it.k, reason: format!("expected iterate {}", self.k() + 1) });
        }
        for (name, v) in [("z", &it.z), ("z_tilde", &it.z_tilde), ("r", &it.r), ("preimage", &it.preimage)] {
            if v.len() != n {
                return Err(Error::InconsistentIterate { k: it.k, reason: format!("{name} has length {} (expected {n})", v.len()) });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InconsistentIterate { k: it.k, reason: format!("{name} is not finite") });
            }
        }
        if it.metric.dim() != n {
            return Err(Error::InconsistentIterate { k: it.k, reason: "metric dimension mismatch".into() });
        }
        if !(it.eta >= 0.0 && it.eta.is_finite()) {
            return Err(Error::InconsistentIterate { k: it.k, reason: format!("eta = {} is negative", it.eta) });
        }
        let step = &self.z - &it.z;
        let drift = (&it.preimage - &step).norm();
        if drift > RECONSTRUCTION_TOL * (1.0 + self.z.norm() + it.z.norm()) {
            return Err(Error::InconsistentIterate { k: it.k, reason: format!("preimage differs from z_(k-1) - z_k by {drift:e}") });
        }
        let recon = (&it.r - it.metric.apply(&it.preimage)?).norm();
        if recon > RECONSTRUCTION_TOL * (1.0 + it.r.norm()) {
            return Err(Error::InconsistentIterate { k: it.k, reason: format!("r differs from M(z_(k-1) - z_k) by {recon:e}") });
        }
        Ok(())
    }

    /// Verifies and records an iterate; returns its error-condition check.
    pub fn accept(&mut self, it: HpeIterate) -> Result<ErrorCheck> {
        self.check_iterate(&it)?;
        let error_check = self.check_error_condition(&it, self.eta)?;
        let blocks = it.metric.block_seminorms_sq(&it.preimage)?;
        let dual_res = blocks.iter().sum::<f64>().sqrt();
        let gap_sq = it.metric.seminorm_sq(&(&self.z - &it.z_tilde))?;

        let shift = self.shift.get_or_insert_with(|| it.z_tilde.clone());
        let centered = &it.z_tilde - &*shift;
        self.sum_zt += &centered;
        self.sum_r += &it.r;
        self.sum_inner += it.r.dot(&centered);
        self.sum_abs_inner += it.r.norm() * centered.norm();
        self.sum_gap_sq += gap_sq;

        self.history.push(HistoryEntry {
            k: it.k,
            z_tilde: it.z_tilde,
            r: it.r,
            eta: it.eta,
            dual_res,
            block_dual_res: blocks.into_iter().map(f64::sqrt).collect(),
            gap_sq,
            error_check,
        });
        self.z = it.z;
        self.eta = it.eta;
        self.metric = it.metric;
        Ok(error_check)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidIndex { k, reason: format!("certificates need 1 <= k <= {}", self.k()) });
        }
        Ok(())
    }

    fn require_bounds(&self) -> Result<&RateBounds> {
        self.bounds.as_ref().ok_or(Error::MissingBounds)
    }

    /// Smallest `i <= k` minimizing `|r_i|*_{M_i}`, checked against the
    /// pointwise bound.
    pub fn pointwise_certificate(&self, k: usize) -> Result<PointwiseCertificate> {
        self.check_k(k)?;
        let bounds = self.require_bounds()?;
        let (best_i, dual_res_best) = self.history[..k]
            .iter()
            .map(|h| (h.k, h.dual_res))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        Ok(PointwiseCertificate { k, best_i, dual_res_best, bound: BoundCheck::new(k, dual_res_best, bounds.pointwise_rhs(k)) })
    }

    /// Ergodic averages `z~^a_k`, `r^a_k` at `k`.
    pub fn ergodic_averages(&self) -> Result<(Vector, Vector)> {
        let k = self.k();
        self.check_k(k)?;
        let shift = self.shift.as_ref().expect("shift is set at the first iterate");
        let kf = k as f64;
        Ok((&self.sum_zt / kf + shift, &self.sum_r / kf))
    }

    /// `eps^a_k` from the accumulators and its floating-point scale.
    pub fn ergodic_eps(&self) -> Result<(f64, f64)> {
        let k = self.k();
        self.check_k(k)?;
        let kf = k as f64;
        let (zt_c, r_a) = (&self.sum_zt / kf, &self.sum_r / kf);
        let eps = self.sum_inner / kf - r_a.dot(&zt_c);
        let scale = 1.0 + self.sum_abs_inner / kf + r_a.norm() * zt_c.norm();
        Ok((eps, scale))
    }

    /// `(1/k) sum <r_i, z~_i - z~^a_k>` by direct summation.
    pub fn ergodic_eps_direct(&self) -> Result<f64> {
        let (zt_a, _) = self.ergodic_averages()?;
        let k = self.k() as f64;
        Ok(self.history.iter().map(|h| h.r.dot(&(&h.z_tilde - &zt_a))).sum::<f64>() / k)
    }

    /// Ergodic certificate at the current `k`; the residual dual norm uses
    /// the pseudo-inverse of `M_k`, since `r^a_k` has no single preimage.
    pub fn ergodic_certificate(&self) -> Result<ErgodicCertificate> {
        let k = self.k();
        self.check_k(k)?;
        let bounds = self.require_bounds()?;
        let (z_tilde_a, r_a) = self.ergodic_averages()?;
        let (eps, eps_scale) = self.ergodic_eps()?;
        let dual_res = self.metric.dual_seminorm_general(&r_a, RANGE_TOL)?;
        let in_range = dual_res.is_finite();
        Ok(ErgodicCertificate {
            k,
            z_tilde_a,
            r_a,
            eps,
            eps_scale,
            eps_nonneg: eps >= -EPS_NONNEG_TOL * eps_scale,
            dual_res,
            in_range,
            res_bound: BoundCheck::new(k, dual_res, bounds.ergodic_res_rhs(k)),
            eps_bound: BoundCheck::new(k, eps, bounds.ergodic_eps_rhs(k)),
        })
    }

    /// `|z* - z_k|^2_{M_k} + eta_k + (1 - sigma) sum_i |z_{i-1} - z~_i|^2_{M_i}
    ///  <= C_P (|z* - z_0|^2_{M_0} + eta_0)` at the current `k`.
    pub fn fejer_check(&self, z_star: &Vector) -> Result<BoundCheck> {
        let k = self.k();
        self.check_k(k)?;
        let bounds = self.require_bounds()?;
        let lhs = self.metric.seminorm_sq(&(z_star - &self.z))? + self.eta + (1.0 - self.sigma) * self.sum_gap_sq;
        let rhs = bounds.c_p * (self.m0.seminorm_sq(&(z_star - &self.z0))? + self.eta0);
        let slack = rhs - lhs;
        Ok(BoundCheck { k, lhs, rhs, slack, pass: slack >= -FEJER_ABS_TOL - FEJER_REL_TOL * rhs })
    }
}

/// Sampler of graph points `(z', v')` with `v' in T(z')`.
pub trait MonotoneOracle {
    fn sample(&self, rng: &mut ChaCha8Rng, center: &Vector, scale: f64) -> Result<(Vector, Vector)>;
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MembershipReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest `<r_a - v', z_a - z'> + eps_a` over the samples.
    pub worst_margin: f64,
    pub pass: bool,
}

/// Sampled check of `r_a in T^{eps_a}(z_a)`:
/// `<r_a - v', z_a - z'> >= -eps_a` for sampled graph points.
pub fn transportation_check<O: MonotoneOracle + ?Sized>(
    oracle: &O,
    z_a: &Vector,
    r_a: &Vector,
    eps_a: f64,
    samples: usize,
    seed: u64,
) -> Result<MembershipReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 1.0 + z_a.amax();
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for i in 0..samples {
        // cycle through scales so both nearby and far points are probed
        let scale = base * [1e-3, 1e-1, 1.0, 10.0][i % 4];
        let (z, v) = oracle.sample(&mut rng, z_a, scale)?;
        let inner = (r_a - &v).dot(&(z_a - &z));
        let margin = inner + eps_a;
        let tol = 1e-9 * (1.0 + eps_a.abs() + (r_a - &v).norm() * (z_a - &z).norm());
        if margin < -tol {
            violations += 1;
        }
        worst = worst.min(margin);
    }
    Ok(MembershipReport { samples, violations, worst_margin: worst, pass: violations == 0 })
}

/// `T(z) = K z + q` with `K + K'` positive semidefinite.
#[derive(Debug, Clone)]
pub struct AffineOracle {
    pub k: crate::linalg::Matrix,
    pub q: Vector,
}

impl MonotoneOracle for AffineOracle {
    fn sample(&self, rng: &mut ChaCha8Rng, center: &Vector, scale: f64) -> Result<(Vector, Vector)> {
        use rand::Rng;
        let z = Vector::from_fn(center.len(), |i, _| center[i] + scale * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let v = &self.k * &z + &self.q;
        Ok((z, v))
    }
}
