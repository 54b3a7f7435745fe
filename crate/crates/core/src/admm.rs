//! Variable-metric proximal ADMM:
//!
//! ```text
//! x_k = argmin f(x) - <g_{k-1}, Ax> + 1/2 |Ax + By_{k-1} - b|^2_{H_k} + 1/2 |x - x_{k-1}|^2_{R_k}
//! y_k = argmin g(y) - <g_{k-1}, By> + 1/2 |Ax_k + By - b|^2_{H_k}     + 1/2 |y - y_{k-1}|^2_{S_k}
//! g_k = g_{k-1} - theta H_k (Ax_k + By_k - b)
//! ```
//!
//! Every step is embedded into the VM-HPE driver with
//! `z = (x, y, gamma)`, `z~ = (x, y, gamma~)`, `sigma = sigma_theta` and
//! `eta_0 = tau_theta d0^2`, so the error condition and all rate bounds are
//! checked on the fly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hpe::{bound_holds, BoundCheck, ErgodicCertificate, ErrorCheck, HpeIterate, HpeState, MonotoneOracle, RateBounds, EPS_NONNEG_TOL};
use crate::linalg::{concat, BlockDiagOperator, Matrix, PsdOperator, Vector, RANGE_TOL};
use crate::problems::{FunctionDescriptor, ProblemSpec};
use crate::schedule::{assemble_mk, check_theta, MetricSchedule};

pub const DEFAULT_SIGMA_MARGIN: f64 = 1e-3;
const SIGMA_GRID: usize = 10_000;
const SIGMA_BISECT_TOL: f64 = 1e-10;
/// Relative tolerance of the closed-form subdifferential tests.
pub const MEMBERSHIP_TOL: f64 = 1e-8;
/// Relative tolerance of `r_gamma = Ax + By - b`.
pub const GAMMA_IDENTITY_TOL: f64 = 1e-12;
pub const DEFAULT_EPS_SAMPLES: usize = 200;
/// Reference solutions with a larger KKT residual get a warning.
pub const REFERENCE_WARN_RESIDUAL: f64 = 1e-9;

/// The 2x2 matrix whose definiteness governs admissible `sigma`.
pub fn m_theta(theta: f64, sigma: f64) -> [[f64; 2]; 2] {
    let off = (sigma + theta - 1.0) * (1.0 - theta);
    [[sigma * (1.0 + theta) - 1.0, off], [off, sigma - (1.0 - theta).powi(2)]]
}

/// All four admissibility conditions for `sigma`, strictly.
pub fn sigma_feasible(theta: f64, sigma: f64) -> bool {
    let m = m_theta(theta, sigma);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let floor = (1.0 - theta).powi(2).max(1.0 - theta).max(1.0 / (1.0 + theta));
    let sqrt2 = std::f64::consts::SQRT_2;
    det > 0.0 && m[0][0] > 0.0 && floor < sigma && (sigma + theta - 1.0) * (4.0 - 2.0 * sqrt2) / (sqrt2 * theta) < sigma
}

/// `tau_theta = 8 (sigma + theta - 1) max{1, theta / (2 - theta)} / theta^{3/2}`
pub fn tau_theta(theta: f64, sigma: f64) -> f64 {
    8.0 * (sigma + theta - 1.0) * 1f64.max(theta / (2.0 - theta)) / theta.powf(1.5)
}

/// `theta` with its error parameter `sigma_theta` and inflation `tau_theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaParams {
    pub theta: f64,
    pub sigma: f64,
    /// Feasibility boundary located by grid search and bisection.
    pub sigma_min: f64,
    pub tau: f64,
    pub margin: f64,
    /// Set when `sigma_min + margin` reached 1 and had to be pulled back.
    pub clamped: bool,
}

impl ThetaParams {
    /// Smallest feasible `sigma` on a `10^4`-point grid (every larger grid
    /// point feasible too), refined by bisection and shifted up by `margin`.
    pub fn new(theta: f64, margin: f64) -> Result<Self> {
        check_theta(theta)?;
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::InvalidSchedule(format!("sigma margin must lie in [0, 1), got {margin}")));
        }
        let grid = |j: usize| j as f64 / SIGMA_GRID as f64;
        let mut first = None;
        for j in (1..SIGMA_GRID).rev() {
            if sigma_feasible(theta, grid(j)) {
                first = Some(j);
            } else {
                break;
            }
        }
        let (mut lo, mut hi) = match first {
            Some(j) => (grid(j - 1), grid(j)),
            None => {
                // near the golden ratio the feasible set is thinner than
                // the grid spacing; refine geometrically towards 1
                let mut lo = grid(SIGMA_GRID - 1);
                let mut hi = None;
                for e in 5..=12 {
                    let s = 1.0 - 10f64.powi(-e);
                    if sigma_feasible(theta, s) {
                        hi = Some(s);
                        break;
                    }
                    lo = s;
                }
                (lo, hi.ok_or(Error::NoFeasibleSigma(theta))?)
            }
        };
        while hi - lo > SIGMA_BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            if sigma_feasible(theta, mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let sigma_min = hi;
        let (mut sigma, mut clamped) = (sigma_min + margin, false);
        if sigma >= 1.0 {
            sigma = 0.5 * (sigma_min + 1.0);
            clamped = true;
        }
        if !sigma_feasible(theta, sigma) {
            return Err(Error::NoFeasibleSigma(theta));
        }
        Ok(Self { theta, sigma, sigma_min, tau: tau_theta(theta, sigma), margin, clamped })
    }

    /// `[(sigma - (theta-1)^2) / theta^2, sqrt2 (sigma + theta - 1) / theta]`
    pub fn eta_coefficients(&self) -> (f64, f64) {
        let (s, t) = (self.sigma, self.theta);
        ((s - (t - 1.0).powi(2)) / (t * t), std::f64::consts::SQRT_2 * (s + t - 1.0) / t)
    }

    /// Pointwise bound coefficient:
    /// `sqrt([2(1+sigma) C_P (1+tau) + 2(1-sigma) tau] / (1-sigma))`.
    pub fn pointwise_coefficient(&self, c_p: f64) -> f64 {
        let (s, tau) = (self.sigma, self.tau);
        ((2.0 * (1.0 + s) * c_p * (1.0 + tau) + 2.0 * (1.0 - s) * tau) / (1.0 - s)).sqrt()
    }
}

fn optimality_check(f: &FunctionDescriptor, x: &Vector, p: &Matrix, c: &Vector, which: &str) -> Result<()> {
    let v = c - p * x;
    let dist = f.subdiff_distance(x, &v)?;
    let tol = MEMBERSHIP_TOL * (1.0 + c.norm() + (p * x).norm());
    if !(dist <= tol) {
        return Err(Error::SubproblemCheck(format!("{which}: optimality residual {dist:e} exceeds {tol:e}")));
    }
    Ok(())
}

/// Exact `x`-update, verified by the optimality inclusion
/// `0 in df(x) - A'(gamma - H(Ax + By - b)) + R(x - x_prev)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_x_subproblem(
    f: &FunctionDescriptor,
    gamma_prev: &Vector,
    y_prev: &Vector,
    x_prev: &Vector,
    h: &PsdOperator,
    r: &PsdOperator,
    a: &Matrix,
    b_mat: &Matrix,
    b: &Vector,
) -> Result<Vector> {
    let at_h = a.transpose() * h.matrix();
    let p = &at_h * a + r.matrix();
    let c = a.transpose() * gamma_prev - &at_h * (b_mat * y_prev - b) + r.matrix() * x_prev;
    let x = f.minimize_with_quadratic(&p, &c, x_prev)?;
    optimality_check(f, &x, &p, &c, "x-subproblem")?;
    Ok(x)
}

/// Exact `y`-update with `x_k` fixed; mirror of [`solve_x_subproblem`].
#[allow(clippy::too_many_arguments)]
pub fn solve_y_subproblem(
    g: &FunctionDescriptor,
    gamma_prev: &Vector,
    x_k: &Vector,
    y_prev: &Vector,
    h: &PsdOperator,
    s: &PsdOperator,
    a: &Matrix,
    b_mat: &Matrix,
    b: &Vector,
) -> Result<Vector> {
    let bt_h = b_mat.transpose() * h.matrix();
    let p = &bt_h * b_mat + s.matrix();
    let c = b_mat.transpose() * gamma_prev - &bt_h * (a * x_k - b) + s.matrix() * y_prev;
    let y = g.minimize_with_quadratic(&p, &c, y_prev)?;
    optimality_check(g, &y, &p, &c, "y-subproblem")?;
    Ok(y)
}

/// `(gamma_k, gamma~_k)`.
#[allow(clippy::too_many_arguments)]
pub fn update_multiplier(
    gamma_prev: &Vector,
    h: &PsdOperator,
    theta: f64,
    x_k: &Vector,
    y_k: &Vector,
    y_prev: &Vector,
    a: &Matrix,
    b_mat: &Matrix,
    b: &Vector,
) -> (Vector, Vector) {
    let ax = a * x_k;
    let gamma = gamma_prev - h.matrix() * (&ax + b_mat * y_k - b) * theta;
    let gamma_tilde = gamma_prev - h.matrix() * (&ax + b_mat * y_prev - b);
    #[cfg(debug_assertions)]
    {
        let hb_dy = h.matrix() * (b_mat * (y_k - y_prev));
        let dg = &gamma - gamma_prev;
        let lhs1 = &gamma_tilde - &gamma;
        let rhs1 = &dg * ((1.0 - theta) / theta) + &hb_dy;
        let lhs2 = &gamma_tilde - gamma_prev;
        let rhs2 = &dg / theta + &hb_dy;
        let scale = 1.0 + gamma_prev.norm() + gamma.norm() / theta + hb_dy.norm();
        debug_assert!((lhs1 - rhs1).norm() <= 1e-10 * scale, "multiplier identity (a) violated");
        debug_assert!((lhs2 - rhs2).norm() <= 1e-10 * scale, "multiplier identity (b) violated");
    }
    (gamma, gamma_tilde)
}

/// `sqrt(|x0 - x*|^2_{R_0} + |y0 - y*|^2_{B'H_0B + S_0} + |g0 - g*|^2_{theta^{-1} H_0^{-1}})`,
/// an upper bound on the distance from `z0` to the solution set.
#[allow(clippy::too_many_arguments)]
pub fn compute_d0_admm(
    b_mat: &Matrix,
    z0: (&Vector, &Vector, &Vector),
    z_star: (&Vector, &Vector, &Vector),
    h0: &PsdOperator,
    r0: &PsdOperator,
    s0: &PsdOperator,
    theta: f64,
) -> Result<f64> {
    let m0 = assemble_mk(h0, r0, s0, b_mat, theta)?;
    let diff = concat(&[&(z0.0 - z_star.0), &(z0.1 - z_star.1), &(z0.2 - z_star.2)]);
    m0.seminorm(&diff)
}

/// One reference point `z* = (x*, y*, gamma*)` with its KKT residual.
#[derive(Debug, Clone)]
pub struct ReferencePoint {
    pub x: Vector,
    pub y: Vector,
    pub gamma: Vector,
    pub kkt_residual: f64,
}

impl From<crate::problems::ReferenceSolution> for ReferencePoint {
    fn from(s: crate::problems::ReferenceSolution) -> Self {
        Self { x: s.x, y: s.y, gamma: s.gamma, kkt_residual: s.kkt_residual }
    }
}

impl ReferencePoint {
    pub fn z(&self) -> Vector {
        concat(&[&self.x, &self.y, &self.gamma])
    }
}

/// Closed-form checks of the pointwise inclusions of one iterate.
#[derive(Debug, Clone, Serialize)]
pub struct MembershipCheck {
    pub k: usize,
    /// Distance from `r_x + A' gamma~` to `df(x_k)`.
    pub dist_x: f64,
    pub dist_y: f64,
    /// `|r_gamma - (Ax_k + By_k - b)|`
    pub gamma_err: f64,
    pub tol_x: f64,
    pub tol_y: f64,
    pub tol_gamma: f64,
    pub pass: bool,
    pub violation: Option<String>,
}

/// One VM-PADMM iteration with its residual triple and operators.
#[derive(Debug, Clone)]
pub struct AdmmIterate {
    pub k: usize,
    pub x: Vector,
    pub y: Vector,
    pub gamma: Vector,
    pub gamma_tilde: Vector,
    pub r_x: Vector,
    pub r_y: Vector,
    pub r_gamma: Vector,
    /// `(x_{k-1} - x_k, y_{k-1} - y_k, gamma_{k-1} - gamma_k)`
    pub preimage: (Vector, Vector, Vector),
    pub eta: f64,
    pub h: PsdOperator,
    pub r_op: PsdOperator,
    pub s_op: PsdOperator,
    pub metric: BlockDiagOperator,
    /// Dual seminorms of the three residuals (via preimages).
    pub res: [f64; 3],
    pub membership: MembershipCheck,
    pub error_check: ErrorCheck,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointwiseKkt {
    pub k: usize,
    pub best_i: usize,
    pub res: [f64; 3],
    pub res_max: f64,
    pub bound: BoundCheck,
    pub memberships_ok: bool,
    pub violation: Option<String>,
}

/// Result of the sampled `eps`-subdifferential test
/// `f(x') >= f(x) + <v, x' - x> - eps`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpsSubgradientReport {
    pub samples: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicKkt {
    pub k: usize,
    pub res: [f64; 3],
    pub res_max: f64,
    pub eps_x: f64,
    pub eps_y: f64,
    pub eps_sum: f64,
    pub eps_nonneg: bool,
    pub res_bound: BoundCheck,
    pub eps_bound: BoundCheck,
    /// `|eps_x + eps_y - eps^a_k| / scale`
    pub decomposition_rel_err: f64,
    pub decomposition_ok: bool,
    pub gamma_identity_ok: bool,
    pub eps_membership_x: Option<EpsSubgradientReport>,
    pub eps_membership_y: Option<EpsSubgradientReport>,
    pub hpe: ErgodicCertificate,
}

impl ErgodicKkt {
    pub fn pass(&self) -> bool {
        self.eps_nonneg
            && self.res_bound.pass
            && self.eps_bound.pass
            && self.decomposition_ok
            && self.gamma_identity_ok
            && self.eps_membership_x.is_none_or(|r| r.pass)
            && self.eps_membership_y.is_none_or(|r| r.pass)
    }
}

#[derive(Debug, Clone)]
struct IterRecord {
    res: [f64; 3],
    res_max: f64,
    membership_ok: bool,
    violation: Option<String>,
}

/// Running sums for one block of the ergodic sequences, centered at the
/// first iterate.
#[derive(Debug, Clone)]
struct BlockErgodic {
    shift: Option<Vector>,
    sum_pt: Vector,
    sum_v: Vector,
    inner: f64,
    abs_inner: f64,
}

impl BlockErgodic {
    fn new(n: usize) -> Self {
        Self { shift: None, sum_pt: Vector::zeros(n), sum_v: Vector::zeros(n), inner: 0.0, abs_inner: 0.0 }
    }

    /// Adds a point and its subgradient `v = r + K' gamma~`.
    fn push(&mut self, pt: &Vector, v: &Vector) {
        let shift = self.shift.get_or_insert_with(|| pt.clone());
        let c = pt - &*shift;
        self.inner += v.dot(&c);
        self.abs_inner += v.norm() * c.norm();
        self.sum_pt += &c;
        self.sum_v += v;
    }

    /// `(point average, subgradient average, eps, eps scale)`
    fn summary(&self, k: usize) -> (Vector, Vector, f64, f64) {
        let kf = k as f64;
        let shift = self.shift.as_ref().expect("at least one iterate");
        let (c_avg, v_avg) = (&self.sum_pt / kf, &self.sum_v / kf);
        let eps = self.inner / kf - v_avg.dot(&c_avg);
        let scale = self.abs_inner / kf + v_avg.norm() * c_avg.norm();
        (c_avg + shift, v_avg, eps, scale)
    }
}

/// Certified VM-PADMM run on one problem.
#[derive(Debug, Clone)]
pub struct VmPadmm<'a> {
    problem: &'a ProblemSpec,
    schedule: &'a MetricSchedule,
    params: ThetaParams,
    bounds: RateBounds,
    m0: BlockDiagOperator,
    x: Vector,
    y: Vector,
    gamma: Vector,
    hpe: HpeState,
    erg_x: BlockErgodic,
    erg_y: BlockErgodic,
    sum_gamma_tilde: Vector,
    sum_r: (Vector, Vector, Vector),
    gamma_identity_scale: f64,
    records: Vec<IterRecord>,
}

impl<'a> VmPadmm<'a> {
    /// Starts at `z0` (zeros when `None`) with `d0` an upper bound on the
    /// `M_0`-distance from `z0` to the solution set; `eta_0 = tau d0^2`.
    pub fn new(
        problem: &'a ProblemSpec,
        schedule: &'a MetricSchedule,
        params: ThetaParams,
        z0: Option<(Vector, Vector, Vector)>,
        d0: f64,
    ) -> Result<Self> {
        let (x, y, gamma) = z0.unwrap_or_else(|| (Vector::zeros(problem.nx()), Vector::zeros(problem.ny()), Vector::zeros(problem.m())));
        if x.len() != problem.nx() || y.len() != problem.ny() || gamma.len() != problem.m() {
            return Err(Error::InvalidProblem("initial point has the wrong dimensions".into()));
        }
        if schedule.k_max() < 1 || schedule.config().k_max == 0 {
            return Err(Error::InvalidSchedule("schedule horizon must be >= 1".into()));
        }
        let m0 = schedule.metric_at(0, params.theta, None)?;
        let eta0 = params.tau * d0 * d0;
        let bounds = RateBounds::new(d0, eta0, schedule.c_s(), schedule.c_p(), params.sigma)?;
        let hpe = HpeState::new(params.sigma, concat(&[&x, &y, &gamma]), eta0, m0.clone())?.with_bounds(bounds);
        Ok(Self {
            problem,
            schedule,
            params,
            bounds,
            m0,
            erg_x: BlockErgodic::new(x.len()),
            erg_y: BlockErgodic::new(y.len()),
            sum_gamma_tilde: Vector::zeros(gamma.len()),
            sum_r: (Vector::zeros(x.len()), Vector::zeros(y.len()), Vector::zeros(gamma.len())),
            x,
            y,
            gamma,
            hpe,
            gamma_identity_scale: 0.0,
            records: Vec::new(),
        })
    }

    /// `d0` for starting point `z0` (zeros when `None`) against a reference point.
    pub fn d0_for(
        problem: &ProblemSpec,
        schedule: &MetricSchedule,
        theta: f64,
        z0: Option<&(Vector, Vector, Vector)>,
        reference: &ReferencePoint,
    ) -> Result<f64> {
        let ops = schedule.realize(0)?;
        let zeros = (Vector::zeros(problem.nx()), Vector::zeros(problem.ny()), Vector::zeros(problem.m()));
        let z0 = z0.unwrap_or(&zeros);
        compute_d0_admm(
            &problem.b_mat,
            (&z0.0, &z0.1, &z0.2),
            (&reference.x, &reference.y, &reference.gamma),
            &ops.h,
            &ops.r,
            &ops.s,
            theta,
        )
    }

    pub fn params(&self) -> &ThetaParams {
        &self.params
    }

    pub fn bounds(&self) -> &RateBounds {
        &self.bounds
    }

    pub fn hpe(&self) -> &HpeState {
        &self.hpe
    }

    pub fn anchor(&self) -> &BlockDiagOperator {
        &self.m0
    }

    pub fn k(&self) -> usize {
        self.records.len()
    }

    pub fn point(&self) -> (&Vector, &Vector, &Vector) {
        (&self.x, &self.y, &self.gamma)
    }

    /// Pointwise bound for the ADMM residuals at `k`.
    pub fn pointwise_rhs(&self, k: usize) -> f64 {
        self.bounds.d0 / (k as f64).sqrt() * self.params.pointwise_coefficient(self.bounds.c_p)
    }

    /// `sqrt(1 + tau) E d0 / k`
    pub fn ergodic_res_rhs(&self, k: usize) -> f64 {
        (1.0 + self.params.tau).sqrt() * self.bounds.e * self.bounds.d0 / k as f64
    }

    /// `(1 + tau) E^ d0^2 / k`
    pub fn ergodic_eps_rhs(&self, k: usize) -> f64 {
        (1.0 + self.params.tau) * self.bounds.e_hat * self.bounds.d0.powi(2) / k as f64
    }

    /// One iteration: subproblems, multiplier, residual triple, `eta_k`, and
    /// acceptance by the HPE driver.
    pub fn step(&mut self) -> Result<AdmmIterate> {
        let k = self.k() + 1;
        let p = self.problem;
        let (a, bm, b) = (&p.a, &p.b_mat, &p.b);
        let ops = self.schedule.realize(k)?;
        let theta = self.params.theta;

        let x = solve_x_subproblem(&p.f, &self.gamma, &self.y, &self.x, &ops.h, &ops.r, a, bm, b)?;
        let y = solve_y_subproblem(&p.g, &self.gamma, &x, &self.y, &ops.h, &ops.s, a, bm, b)?;
        let (gamma, gamma_tilde) = update_multiplier(&self.gamma, &ops.h, theta, &x, &y, &self.y, a, bm, b);

        let metric = self.schedule.metric_at(k, theta, Some(&self.m0))?;
        let dx = &self.x - &x;
        let dy = &self.y - &y;
        let dg = &self.gamma - &gamma;
        let r_x = metric.block(0).apply(&dx)?;
        let r_y = metric.block(1).apply(&dy)?;
        let r_gamma = metric.block(2).apply(&dg)?;

        let (c_gamma, c_y) = self.params.eta_coefficients();
        let eta = c_gamma * metric.block(2).seminorm_sq(&dg)? + c_y * ops.s.seminorm_sq(&dy)?;

        // closed-form inclusions
        let at_gt = a.transpose() * &gamma_tilde;
        let bt_gt = bm.transpose() * &gamma_tilde;
        let dist_x = p.f.subdiff_distance(&x, &(&r_x + &at_gt))?;
        let dist_y = p.g.subdiff_distance(&y, &(&r_y + &bt_gt))?;
        let residual = p.constraint_residual(&x, &y);
        let gamma_err = (&r_gamma - &residual).norm();
        let tol_x = MEMBERSHIP_TOL * (1.0 + r_x.norm() + at_gt.norm());
        let tol_y = MEMBERSHIP_TOL * (1.0 + r_y.norm() + bt_gt.norm());
        // r_gamma goes through gamma_{k-1} - gamma_k, so its rounding scales
        // with |gamma| through theta^{-1} H^{-1}
        let gamma_scale = residual.norm() + metric.block(2).max_eigenvalue() * (self.gamma.norm() + gamma.norm());
        let tol_gamma = GAMMA_IDENTITY_TOL * gamma_scale;
        self.gamma_identity_scale = self.gamma_identity_scale.max(gamma_scale + (a * &x).norm() + (bm * &y).norm() + b.norm());
        let mut violation = None;
        if !(dist_x <= tol_x) {
            violation = Some(format!("k = {k}: r_x not in df(x) - A'gamma~ (distance {dist_x:e})"));
        } else if !(dist_y <= tol_y) {
            violation = Some(format!("k = {k}: r_y not in dg(y) - B'gamma~ (distance {dist_y:e})"));
        } else if !(gamma_err <= tol_gamma) {
            violation = Some(format!("k = {k}: r_gamma differs from Ax + By - b by {gamma_err:e}"));
        }
        let membership = MembershipCheck {
            k,
            dist_x,
            dist_y,
            gamma_err,
            tol_x,
            tol_y,
            tol_gamma,
            pass: violation.is_none(),
            violation,
        };

        let z = concat(&[&x, &y, &gamma]);
        let preimage = concat(&[&dx, &dy, &dg]);
        let r = concat(&[&r_x, &r_y, &r_gamma]);
        let error_check = self.hpe.accept(HpeIterate {
            k,
            z,
            z_tilde: concat(&[&x, &y, &gamma_tilde]),
            r,
            preimage,
            eta,
            metric: metric.clone(),
        })?;
        let blocks = &self.hpe.history()[k - 1].block_dual_res;
        let res = [blocks[0], blocks[1], blocks[2]];

        self.erg_x.push(&x, &(&r_x + &at_gt));
        self.erg_y.push(&y, &(&r_y + &bt_gt));
        self.sum_gamma_tilde += &gamma_tilde;
        self.sum_r.0 += &r_x;
        self.sum_r.1 += &r_y;
        self.sum_r.2 += &r_gamma;
        self.records.push(IterRecord {
            res,
            res_max: res[0].max(res[1]).max(res[2]),
            membership_ok: membership.pass,
            violation: membership.violation.clone(),
        });

        let iterate = AdmmIterate {
            k,
            x: x.clone(),
            y: y.clone(),
            gamma: gamma.clone(),
            gamma_tilde,
            r_x,
            r_y,
            r_gamma,
            preimage: (dx, dy, dg),
            eta,
            h: ops.h,
            r_op: ops.r,
            s_op: ops.s,
            metric,
            res,
            membership,
            error_check,
        };
        self.x = x;
        self.y = y;
        self.gamma = gamma;
        Ok(iterate)
    }

    /// Smallest `i <= k` minimizing the largest of the three residual dual
    /// norms, checked against the pointwise bound.
    pub fn pointwise_kkt_certificate(&self, k: usize) -> Result<PointwiseKkt> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidIndex { k, reason: format!("need 1 <= k <= {}", self.k()) });
        }
        let (best, rec) = self.records[..k]
            .iter()
            .enumerate()
            .fold(None::<(usize, &IterRecord)>, |best, (i, r)| match best {
                Some((_, b)) if b.res_max <= r.res_max => best,
                _ => Some((i, r)),
            })
            .expect("k >= 1");
        let rhs = self.pointwise_rhs(k);
        Ok(PointwiseKkt {
            k,
            best_i: best + 1,
            res: rec.res,
            res_max: rec.res_max,
            bound: BoundCheck::new(k, rec.res_max, rhs),
            memberships_ok: rec.membership_ok,
            violation: rec.violation.clone(),
        })
    }

    /// Ergodic averages `(x^a, y^a, gamma~^a)` at the current `k`.
    pub fn ergodic_point(&self) -> Result<(Vector, Vector, Vector)> {
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidIndex { k, reason: "no iterates yet".into() });
        }
        let (xa, _, _, _) = self.erg_x.summary(k);
        let (ya, _, _, _) = self.erg_y.summary(k);
        Ok((xa, ya, &self.sum_gamma_tilde / k as f64))
    }

    /// Ergodic certificate at the current `k`. `eps_samples = 0` skips the
    /// sampled `eps`-subdifferential tests.
    pub fn ergodic_kkt_certificate(&self, eps_samples: usize, seed: u64) -> Result<ErgodicKkt> {
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidIndex { k, reason: "no iterates yet".into() });
        }
        let kf = k as f64;
        let p = self.problem;
        let (xa, vxa, eps_x, scale_x) = self.erg_x.summary(k);
        let (ya, vya, eps_y, scale_y) = self.erg_y.summary(k);
        let (rxa, rya, rga) = (&self.sum_r.0 / kf, &self.sum_r.1 / kf, &self.sum_r.2 / kf);
        let metric = self.hpe.metric();
        let res = [
            metric.block(0).dual_seminorm_general(&rxa, RANGE_TOL)?,
            metric.block(1).dual_seminorm_general(&rya, RANGE_TOL)?,
            metric.block(2).dual_seminorm_general(&rga, RANGE_TOL)?,
        ];
        let res_max = res[0].max(res[1]).max(res[2]);
        let eps_sum = eps_x + eps_y;
        let hpe = self.hpe.ergodic_certificate()?;
        let scale = scale_x + scale_y + hpe.eps_scale;
        let decomposition_rel_err = if scale > 0.0 { (eps_sum - hpe.eps).abs() / scale } else { (eps_sum - hpe.eps).abs() };
        let eps_nonneg = eps_x >= -EPS_NONNEG_TOL * (1.0 + scale_x) && eps_y >= -EPS_NONNEG_TOL * (1.0 + scale_y);
        let gamma_err = (p.constraint_residual(&xa, &ya) - &rga).norm();
        let gamma_identity_ok = gamma_err <= 1e-10 * (1.0 + self.gamma_identity_scale);
        let (eps_membership_x, eps_membership_y) = if eps_samples > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                Some(eps_subgradient_check(&p.f, &xa, &vxa, eps_x, eps_samples, &mut rng)),
                Some(eps_subgradient_check(&p.g, &ya, &vya, eps_y, eps_samples, &mut rng)),
            )
        } else {
            (None, None)
        };
        Ok(ErgodicKkt {
            k,
            res,
            res_max,
            eps_x,
            eps_y,
            eps_sum,
            eps_nonneg,
            res_bound: BoundCheck::new(k, res_max, self.ergodic_res_rhs(k)),
            eps_bound: BoundCheck::new(k, eps_sum, self.ergodic_eps_rhs(k)),
            decomposition_rel_err,
            decomposition_ok: decomposition_rel_err <= 1e-9,
            gamma_identity_ok,
            eps_membership_x,
            eps_membership_y,
            hpe,
        })
    }

    /// Fejer-type bound at the current `k` against a reference point.
    pub fn fejer_check(&self, reference: &ReferencePoint) -> Result<BoundCheck> {
        self.hpe.fejer_check(&reference.z())
    }

    /// `|z_{k-1} - z~_k|^2_{M_k}` decomposition terms, for cross-checks:
    /// `(|dx|^2_R + |B dy|^2_H + |dy|^2_S + |g_{k-1} - g~_k|^2_{M3}, |g_k - g~_k|^2_{M3})`.
    pub fn seminorm_decomposition(it: &AdmmIterate, b_mat: &Matrix, gamma_prev: &Vector) -> Result<(f64, f64)> {
        let (dx, dy, _) = &it.preimage;
        let m3 = it.metric.block(2);
        let gap = it.r_op.seminorm_sq(dx)?
            + it.h.seminorm_sq(&(b_mat * dy))?
            + it.s_op.seminorm_sq(dy)?
            + m3.seminorm_sq(&(gamma_prev - &it.gamma_tilde))?;
        let inner = m3.seminorm_sq(&(&it.gamma - &it.gamma_tilde))?;
        Ok((gap, inner))
    }
}

/// Sampled test of `v in d_eps f(x)`.
pub fn eps_subgradient_check(
    f: &FunctionDescriptor,
    x: &Vector,
    v: &Vector,
    eps: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> EpsSubgradientReport {
    let fx = f.value(x);
    let base = 1.0 + x.amax();
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for i in 0..samples {
        let scale = base * [1e-3, 1e-1, 1.0, 10.0][i % 4];
        let xp = f.sample_domain_point(x, scale, rng);
        let fxp = f.value(&xp);
        let lin = v.dot(&(&xp - x));
        let margin = fxp - fx - lin + eps;
        let tol = 1e-9 * (1.0 + fxp.abs() + fx.abs() + lin.abs() + eps.abs());
        if !(margin >= -tol) {
            violations += 1;
        }
        worst = worst.min(margin);
    }
    EpsSubgradientReport { samples, violations, worst_margin: worst, pass: violations == 0 }
}

/// Graph sampler of the KKT operator
/// `T(x, y, gamma) = (df(x) - A'gamma, dg(y) - B'gamma, Ax + By - b)`.
#[derive(Debug, Clone, Copy)]
pub struct KktOracle<'a> {
    pub problem: &'a ProblemSpec,
}

impl MonotoneOracle for KktOracle<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng, center: &Vector, scale: f64) -> Result<(Vector, Vector)> {
        use rand::Rng;
        let p = self.problem;
        let (nx, ny, m) = (p.nx(), p.ny(), p.m());
        let cx = center.rows(0, nx).into_owned();
        let cy = center.rows(nx, ny).into_owned();
        let x = p.f.sample_domain_point(&cx, scale, rng);
        let y = p.g.sample_domain_point(&cy, scale, rng);
        let gamma = Vector::from_fn(m, |i, _| center[nx + ny + i] + scale * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let vx = p.f.subgradient_sample(&x, rng)? - p.a.transpose() * &gamma;
        let vy = p.g.subgradient_sample(&y, rng)? - p.b_mat.transpose() * &gamma;
        let vg = p.constraint_residual(&x, &y);
        Ok((concat(&[&x, &y, &gamma]), concat(&[&vx, &vy, &vg])))
    }
}

/// Pointwise bound assertion helper used by reports.
pub fn pointwise_bound_holds(res_max: f64, rhs: f64) -> bool {
    bound_holds(res_max, rhs)
}
