//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every inequality is re-evaluated here from dense matrices and stored
//! iterates, independently of the solver's built-in checks.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmpadmm_core::admm::{ReferencePoint, ThetaParams, VmPadmm, DEFAULT_EPS_SAMPLES, DEFAULT_SIGMA_MARGIN};
use vmpadmm_core::linalg::{PsdOperator, SpaceLabel, VectorSpaceTag};
use vmpadmm_core::problems::{generate, reference_solve, GeneratorKind, ProblemSpec};
use vmpadmm_core::schedule::{DecayConfig, DecayLaw, MetricSchedule, OperatorDescriptor, ScheduleConfig};

type V = DVector<f64>;
type M = DMatrix<f64>;

const K_MAX: usize = 500;
const HPE_REL_SLACK: f64 = 1e-8;
const BOUND_REL: f64 = 1e-6;
const FEJER_REL: f64 = 1e-6;
const EPS_NEG_REL: f64 = 1e-10;
const DECOMP_REL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-10;
const DUAL_IDENTITY_TOL: f64 = 1e-9;
/// Iterations at which ergodic quantities are recomputed from scratch.
const CHECKPOINTS: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 200, 500];

struct Tally {
    name: &'static str,
    checks: usize,
    failures: usize,
    worst: f64,
    first_failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self { name, checks: 0, failures: 0, worst: f64::INFINITY, first_failure: None }
    }

    /// Records a check with relative slack `slack` (negative = violated by that much).
    fn record(&mut self, ok: bool, slack: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        self.worst = self.worst.min(slack);
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }

    fn report(&self, extra: &str) -> bool {
        let pass = self.failures == 0 && self.checks > 0;
        println!(
            "{} {}: {} checks, {} failures, worst relative slack {:.3e}{}{}",
            if pass { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.failures,
            self.worst,
            if extra.is_empty() { String::new() } else { format!(", {extra}") },
            self.first_failure.as_ref().map(|s| format!(" [first: {s}]")).unwrap_or_default()
        );
        pass
    }
}

fn qf(m: &M, z: &V) -> f64 {
    z.dot(&(m * z))
}

/// Dual seminorm through the pseudo-inverse; `+inf` off the range.
fn dual_norm_pinv(m: &M, r: &V) -> f64 {
    if r.amax() == 0.0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let lmax = eig.eigenvalues.amax();
    let cut = 1e-12 * lmax.max(f64::MIN_POSITIVE);
    let mut val = 0.0;
    let mut off = 0.0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let c = eig.eigenvectors.column(i).dot(r);
        if l > cut {
            val += c * c / l;
        } else {
            off += c * c;
        }
    }
    if off.sqrt() > 1e-8 * r.norm() {
        f64::INFINITY
    } else {
        val.sqrt()
    }
}

fn blocks_of(z: &V, nx: usize, ny: usize) -> (V, V, V) {
    let m = z.len() - nx - ny;
    (z.rows(0, nx).into_owned(), z.rows(nx, ny).into_owned(), z.rows(nx + ny, m).into_owned())
}

fn rel_slack(lhs: f64, rhs: f64) -> f64 {
    (rhs - lhs) / rhs.abs().max(1e-300)
}

fn instances() -> Vec<ProblemSpec> {
    let mut out = Vec::new();
    let lasso = [[50, 25], [40, 20], [30, 15], [20, 10], [50, 10], [12, 25], [25, 25], [10, 5]];
    for (i, d) in lasso.iter().enumerate() {
        out.push(generate(GeneratorKind::Lasso, d, 100 + i as u64).unwrap());
    }
    for (i, n) in [40, 30, 20, 15, 10, 5].iter().enumerate() {
        out.push(generate(GeneratorKind::BoxQp, &[*n], 200 + i as u64).unwrap());
    }
    let cls = [[20, 15, 10], [10, 10, 10], [15, 5, 8], [8, 12, 6], [30, 20, 12], [5, 5, 3]];
    for (i, d) in cls.iter().enumerate() {
        out.push(generate(GeneratorKind::ConsensusLs, d, 300 + i as u64).unwrap());
    }
    out
}

fn decaying(problem: &ProblemSpec) -> ScheduleConfig {
    let aha = problem.a.transpose() * &problem.a * 2.0;
    let lmax = SymmetricEigen::new(aha).eigenvalues.max();
    ScheduleConfig {
        h: OperatorDescriptor::ScaledIdentity { scale: 2.0 },
        r: OperatorDescriptor::Linearized { tau: 1.01 * lmax },
        s: OperatorDescriptor::ScaledIdentity { scale: 0.5 },
        c: DecayConfig { c0: 1.0, law: DecayLaw::InverseSquare },
        k_max: K_MAX,
    }
}

#[derive(Default)]
struct SweepTallies {
    hpe: Option<Tally>,
    pointwise: Option<Tally>,
    ergodic: Option<Tally>,
    fejer: Option<Tally>,
    membership: Option<Tally>,
    /// HPE checks decided by the rounding floor rather than the relative slack.
    hpe_floor: usize,
    hpe_floor_max_rhs: f64,
}

/// Independent `E`, `E^` from the drift constants.
fn e_constants(c_s: f64, c_p: f64, sigma: f64) -> (f64, f64) {
    let e = (1.0 + c_p) * (c_p.sqrt() + c_s * c_p) + c_s * c_p.powf(1.5);
    let e_hat = 2.0 * c_p * (1.0 + c_s) * (sigma * c_p / (1.0 - sigma) + 2.0 * (1.0 + c_p));
    (e, e_hat)
}

#[allow(clippy::too_many_arguments)]
fn run_instance(
    problem: &ProblemSpec,
    reference: &ReferencePoint,
    theta: f64,
    cfg: ScheduleConfig,
    label: &str,
    t: &mut SweepTallies,
) {
    let (nx, ny) = (problem.nx(), problem.ny());
    let schedule = MetricSchedule::new(cfg, &problem.a, &problem.b_mat).unwrap().validated(true).unwrap();
    let params = ThetaParams::new(theta, DEFAULT_SIGMA_MARGIN).unwrap();
    let d0 = VmPadmm::d0_for(problem, &schedule, theta, None, reference).unwrap();
    let mut solver = VmPadmm::new(problem, &schedule, params, None, d0).unwrap();
    let (sigma, tau) = (params.sigma, params.tau);
    let (c_s, c_p) = (schedule.c_s(), schedule.c_p());
    let (e, e_hat) = e_constants(c_s, c_p, sigma);
    let coef = ((2.0 * (1.0 + sigma) * c_p * (1.0 + tau) + 2.0 * (1.0 - sigma) * tau) / (1.0 - sigma)).sqrt();

    let m0 = solver.anchor().to_dense();
    let z_star = reference.z();
    let z0 = V::zeros(m0.nrows());
    let eta0 = tau * d0 * d0;
    let fejer_rhs = c_p * (qf(&m0, &(&z_star - &z0)) + eta0);

    let mut z_prev = z0.clone();
    let mut eta_prev = eta0;
    let mut gap_sum = 0.0;
    let mut best = f64::INFINITY;
    let mut zt_hist: Vec<V> = Vec::with_capacity(K_MAX);
    let mut r_hist: Vec<V> = Vec::with_capacity(K_MAX);

    for k in 1..=K_MAX {
        let it = solver.step().unwrap();
        let mk = it.metric.to_dense();
        let z = concat3(&it.x, &it.y, &it.gamma);
        let zt = concat3(&it.x, &it.y, &it.gamma_tilde);

        // error condition
        let lhs = qf(&mk, &(&z - &zt)) + it.eta;
        let gap = qf(&mk, &(&z_prev - &zt));
        let rhs = sigma * gap + eta_prev;
        // quadratic forms of differences carry an absolute rounding floor
        let lmax = it.metric.blocks().iter().map(|b| b.max_eigenvalue()).fold(0.0, f64::max);
        let scale = z_prev.norm() + z.norm() + zt.norm();
        let floor = mk.nrows() as f64 * lmax * (4.0 * f64::EPSILON * scale).powi(2);
        let s = rel_slack(lhs, rhs);
        let ok = rhs - lhs >= -HPE_REL_SLACK * rhs - floor;
        let at_floor = ok && s < -HPE_REL_SLACK;
        if at_floor {
            t.hpe_floor += 1;
            t.hpe_floor_max_rhs = t.hpe_floor_max_rhs.max(rhs);
        }
        t.hpe.as_mut().unwrap().record(ok, if at_floor { f64::INFINITY } else { s }, || format!("{label} k={k}: {lhs:e} > {rhs:e} (floor {floor:e})"));
        gap_sum += gap;

        // pointwise: dual norms through preimages, per block
        let pre = &z_prev - &z;
        let (px, py, pg) = blocks_of(&pre, nx, ny);
        let (bx, by, bg) = (it.metric.block(0).matrix(), it.metric.block(1).matrix(), it.metric.block(2).matrix());
        let res = qf(bx, &px).max(0.0).sqrt().max(qf(by, &py).max(0.0).sqrt()).max(qf(bg, &pg).max(0.0).sqrt());
        best = best.min(res);
        let bound = d0 / (k as f64).sqrt() * coef;
        let s = rel_slack(best, bound);
        t.pointwise.as_mut().unwrap().record(s >= -BOUND_REL, s, || format!("{label} k={k}: {best:e} > {bound:e}"));

        // memberships (closed form) at every iterate
        t.membership.as_mut().unwrap().record(it.membership.pass, 0.0, || format!("{label}: {:?}", it.membership.violation));

        // Fejer
        let lhs = qf(&mk, &(&z_star - &z)) + it.eta + (1.0 - sigma) * gap_sum;
        let s = rel_slack(lhs, fejer_rhs);
        t.fejer.as_mut().unwrap().record(s >= -FEJER_REL, s, || format!("{label} k={k}: {lhs:e} > {fejer_rhs:e}"));

        // ergodic, from the solver's running sums at every k
        let samples = DEFAULT_EPS_SAMPLES;
        let erg = solver.ergodic_kkt_certificate(samples, k as u64).unwrap();
        let res_rhs = (1.0 + tau).sqrt() * e * d0 / k as f64;
        let eps_rhs = (1.0 + tau) * e_hat * d0 * d0 / k as f64;
        let s = rel_slack(erg.res_max, res_rhs).min(rel_slack(erg.eps_sum, eps_rhs));
        let ok = s >= -BOUND_REL && erg.eps_nonneg && erg.decomposition_ok;
        t.ergodic.as_mut().unwrap().record(ok, s, || {
            format!("{label} k={k}: res {:e} eps ({:e}, {:e}) nonneg {} decomp {:e}", erg.res_max, erg.eps_x, erg.eps_y, erg.eps_nonneg, erg.decomposition_rel_err)
        });
        {
            let ok = erg.eps_membership_x.is_some_and(|r| r.pass) && erg.eps_membership_y.is_some_and(|r| r.pass);
            t.membership.as_mut().unwrap().record(ok, 0.0, || format!("{label} k={k}: ergodic eps-membership {:?} {:?}", erg.eps_membership_x, erg.eps_membership_y));
        }

        zt_hist.push(zt);
        r_hist.push(it.metric.apply(&pre).unwrap());

        // from-scratch recomputation at checkpoints
        if CHECKPOINTS.contains(&k) {
            let kf = k as f64;
            let zt_a = zt_hist.iter().fold(V::zeros(z.len()), |acc, v| acc + v) / kf;
            let r_a = r_hist.iter().fold(V::zeros(z.len()), |acc, v| acc + v) / kf;
            let (xa, ya, _) = blocks_of(&zt_a, nx, ny);
            let (rxa, rya, rga) = blocks_of(&r_a, nx, ny);
            let mut eps_x = 0.0;
            let mut eps_y = 0.0;
            let mut scale = 0.0;
            for (zti, ri) in zt_hist.iter().zip(&r_hist) {
                let (xi, yi, gti) = blocks_of(zti, nx, ny);
                let (rx, ry, _) = blocks_of(ri, nx, ny);
                let vx = rx + problem.a.transpose() * &gti;
                let vy = ry + problem.b_mat.transpose() * &gti;
                eps_x += vx.dot(&(&xi - &xa)) / kf;
                eps_y += vy.dot(&(&yi - &ya)) / kf;
                scale += (vx.norm() * (&xi - &xa).norm() + vy.norm() * (&yi - &ya).norm()) / kf;
            }
            let eps_total: f64 = zt_hist.iter().zip(&r_hist).map(|(zti, ri)| ri.dot(&(zti - &zt_a))).sum::<f64>() / kf;
            let duals = [dual_norm_pinv(bx, &rxa), dual_norm_pinv(by, &rya), dual_norm_pinv(bg, &rga)];
            let dmax = duals[0].max(duals[1]).max(duals[2]);
            let decomp = (eps_x + eps_y - eps_total).abs() / scale.max(1.0);
            let nonneg = eps_x >= -EPS_NEG_REL * scale.max(1.0) && eps_y >= -EPS_NEG_REL * scale.max(1.0);
            let agree = (eps_x - erg.eps_x).abs() <= 1e-9 * scale.max(1.0) && (eps_y - erg.eps_y).abs() <= 1e-9 * scale.max(1.0);
            let s = rel_slack(dmax, res_rhs).min(rel_slack(eps_x + eps_y, eps_rhs));
            let ok = s >= -BOUND_REL && decomp <= DECOMP_REL && nonneg && agree;
            t.ergodic.as_mut().unwrap().record(ok, s, || {
                format!("{label} k={k} (direct): duals {duals:?} eps ({eps_x:e}, {eps_y:e}) total {eps_total:e} decomp {decomp:e} agree {agree}")
            });
        }
        z_prev = z;
        eta_prev = it.eta;
    }
}

fn concat3(a: &V, b: &V, c: &V) -> V {
    V::from_iterator(a.len() + b.len() + c.len(), a.iter().chain(b.iter()).chain(c.iter()).copied())
}

fn sweep() -> (bool, Vec<String>) {
    let started = Instant::now();
    let mut t = SweepTallies {
        hpe: Some(Tally::new("HPE error condition (sweep, k <= 500)")),
        pointwise: Some(Tally::new("pointwise rate bound (sweep, k <= 500)")),
        ergodic: Some(Tally::new("ergodic rate bounds and eps decomposition (sweep, k <= 500)")),
        fejer: Some(Tally::new("Fejer-type bound (sweep, k <= 500)")),
        membership: Some(Tally::new("membership certificates (closed-form pointwise, sampled ergodic)")),
        hpe_floor: 0,
        hpe_floor_max_rhs: 0.0,
    };
    let mut runs = 0;
    for problem in instances() {
        let reference: ReferencePoint = reference_solve(&problem, 1e-10).unwrap().into();
        for theta in [0.5, 1.0, 1.5] {
            for (kind, cfg) in [("constant", ScheduleConfig::constant(1.0, K_MAX)), ("decaying", decaying(&problem))] {
                let label = format!("{} theta={theta} {kind}", problem.name);
                run_instance(&problem, &reference, theta, cfg, &label, &mut t);
                runs += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let timing = format!("{runs} runs in {secs:.1}s");
    let mut pass = true;
    let mut lines = Vec::new();
    for tally in [&t.hpe, &t.pointwise, &t.ergodic, &t.fejer, &t.membership].into_iter().flatten() {
        let extra = if std::ptr::eq(tally, t.hpe.as_ref().unwrap()) {
            format!("{timing}, {} checks decided by the rounding floor (largest rhs {:.2e})", t.hpe_floor, t.hpe_floor_max_rhs)
        } else {
            timing.clone()
        };
        pass &= tally.report(&extra);
        lines.push(tally.name.to_string());
    }
    (pass, lines)
}

/// Textbook scaled-free ADMM for `1/2|x - c|^2 + lambda |y|_1` s.t. `Ax - y = 0`.
fn textbook_admm(a: &M, c: &V, lambda: f64, beta: f64, iters: usize) -> Vec<(V, V, V)> {
    let (m, n) = a.shape();
    let lhs = M::identity(n, n) + a.transpose() * a * beta;
    let chol = lhs.cholesky().unwrap();
    let (mut y, mut g) = (V::zeros(m), V::zeros(m));
    let mut out = Vec::new();
    for _ in 0..iters {
        let x = chol.solve(&(c + a.transpose() * &g + a.transpose() * &y * beta));
        let ax = a * &x;
        let w = &ax - &g / beta;
        y = w.map(|v| v.signum() * (v.abs() - lambda / beta).max(0.0));
        g -= (&ax - &y) * beta;
        out.push((x, y.clone(), g.clone()));
    }
    out
}

fn admm_oracle() -> bool {
    let mut tally = Tally::new("standard-ADMM oracle equivalence (10 lasso x 3 beta x 100 iters)");
    for seed in 0..10u64 {
        let problem = generate(GeneratorKind::Lasso, &[15 + seed as usize, 8 + seed as usize], 500 + seed).unwrap();
        let (c, lambda) = match (problem.f.kind(), problem.g.kind()) {
            (vmpadmm_core::problems::FunctionKind::Quadratic { q, .. }, vmpadmm_core::problems::FunctionKind::L1 { lambda }) => (-q, *lambda),
            _ => unreachable!(),
        };
        for beta in [0.5, 1.0, 2.0] {
            let expected = textbook_admm(&problem.a, &c, lambda, beta, 100);
            let schedule = MetricSchedule::new(ScheduleConfig::constant(beta, 100), &problem.a, &problem.b_mat).unwrap();
            let params = ThetaParams::new(1.0, DEFAULT_SIGMA_MARGIN).unwrap();
            let mut solver = VmPadmm::new(&problem, &schedule, params, None, 1.0).unwrap();
            let mut worst: f64 = 0.0;
            for (x, y, g) in &expected {
                let it = solver.step().unwrap();
                worst = worst.max((&it.x - x).amax()).max((&it.y - y).amax()).max((&it.gamma - g).amax());
            }
            tally.record(worst <= ORACLE_TOL, 1.0 - worst / ORACLE_TOL, || format!("seed {seed} beta {beta}: max deviation {worst:e}"));
        }
    }
    tally.report("")
}

fn dual_identity() -> bool {
    let mut tally = Tally::new("dual-seminorm identity on 200 PSD operators");
    let mut off_range = 0;
    let mut off_inf = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..200 {
        let n = rng.random_range(2..12);
        let rank = if i % 2 == 0 { n } else { rng.random_range(1..n) };
        let g = M::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        let m = &g * g.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let op = PsdOperator::semidefinite(VectorSpaceTag::new(n, SpaceLabel::Product).unwrap(), m.clone()).unwrap();
        let w = V::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let wn = qf(&m, &w).max(0.0).sqrt();
        let got = op.dual_seminorm_general(&(&m * &w), 1e-8).unwrap();
        let err = (got - wn).abs();
        let tol = DUAL_IDENTITY_TOL * (1.0 + wn);
        tally.record(err <= tol, 1.0 - err / tol, || format!("operator {i}: |{got} - {wn}| = {err:e}"));
        if rank < n {
            // a kernel direction of M is outside its range
            let eig = SymmetricEigen::new(m.clone());
            let j = eig.eigenvalues.imin();
            let r = &m * &w + eig.eigenvectors.column(j).into_owned();
            off_range += 1;
            if op.dual_seminorm_general(&r, 1e-8).unwrap() == f64::INFINITY {
                off_inf += 1;
            }
        }
    }
    tally.record(off_inf == off_range, 0.0, || format!("only {off_inf}/{off_range} off-range inputs gave +inf"));
    tally.report(&format!("{off_inf}/{off_range} off-range inputs -> +inf"))
}

/// Independent admissibility test: eigenvalues of the 2x2 matrix plus the
/// three scalar conditions.
fn admissible(theta: f64, sigma: f64) -> bool {
    let off = (sigma + theta - 1.0) * (1.0 - theta);
    let m = nalgebra::Matrix2::new(sigma * (1.0 + theta) - 1.0, off, off, sigma - (1.0 - theta) * (1.0 - theta));
    let pd = SymmetricEigen::new(m).eigenvalues.min() > 0.0;
    let s2 = 2f64.sqrt();
    pd && [(1.0 - theta).powi(2), 1.0 - theta, 1.0 / (1.0 + theta)].iter().all(|&l| l < sigma)
        && (sigma + theta - 1.0) * (4.0 - 2.0 * s2) / (s2 * theta) < sigma
}

fn sigma_theta() -> bool {
    let mut tally = Tally::new("sigma_theta on a 50-point theta grid in (0.01, 1.60)");
    for j in 0..50 {
        let theta = 0.01 + 1.59 * j as f64 / 49.0;
        let p = ThetaParams::new(theta, DEFAULT_SIGMA_MARGIN).unwrap();
        let ok = admissible(theta, p.sigma) && !admissible(theta, p.sigma_min - 1e-6) && admissible(theta, p.sigma_min + 1e-9);
        let ok = ok && (p.clamped || (p.sigma - p.margin - p.sigma_min).abs() < 1e-12);
        tally.record(ok, 0.0, || format!("theta {theta}: {p:?}"));
    }
    let p = ThetaParams::new(1.0, DEFAULT_SIGMA_MARGIN).unwrap();
    let err = (p.sigma - (0.5 + DEFAULT_SIGMA_MARGIN)).abs();
    tally.record(err <= 1e-6, 1.0 - err / 1e-6, || format!("theta = 1 gives sigma {}", p.sigma));
    tally.report(&format!("theta = 1 -> sigma {:.9}", p.sigma))
}

fn stopping() -> bool {
    let mut tally = Tally::new("stopping remark (lasso seed 7, theta 1, rho 1e-3)");
    let rho = 1e-3;
    let problem = generate(GeneratorKind::Lasso, &[30, 15], 7).unwrap();
    let reference: ReferencePoint = reference_solve(&problem, 1e-10).unwrap().into();
    let schedule = MetricSchedule::new(ScheduleConfig::constant(1.0, 1), &problem.a, &problem.b_mat).unwrap();
    let params = ThetaParams::new(1.0, DEFAULT_SIGMA_MARGIN).unwrap();
    let d0 = VmPadmm::d0_for(&problem, &schedule, 1.0, None, &reference).unwrap();
    let (s, tau, c_p) = (params.sigma, params.tau, schedule.c_p());
    let coef_sq = (2.0 * (1.0 + s) * c_p * (1.0 + tau) + 2.0 * (1.0 - s) * tau) / (1.0 - s);
    let k_bound = (d0 * d0 * coef_sq / (rho * rho)).ceil() as usize;
    let schedule = schedule.with_horizon(k_bound.max(1));
    let mut solver = VmPadmm::new(&problem, &schedule, params, None, d0).unwrap();
    let mut first = None;
    for k in 1..=k_bound {
        let it = solver.step().unwrap();
        if it.res.iter().copied().fold(0.0, f64::max) <= rho {
            first = Some(k);
            break;
        }
    }
    let ok = first.is_some_and(|k| k <= k_bound);
    tally.record(ok, 0.0, || format!("no k <= {k_bound} reached rho"));
    tally.report(&format!("first k = {first:?}, theoretical bound = {k_bound}"))
}

#[test]
fn acceptance() {
    let mut pass = true;
    let (sweep_pass, _) = sweep();
    pass &= sweep_pass;
    pass &= admm_oracle();
    pass &= dual_identity();
    pass &= sigma_theta();
    pass &= stopping();
    assert!(pass, "at least one acceptance criterion failed");
}
