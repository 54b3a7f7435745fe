//! Variable-metric schedules `{H_k}`, `{R_k}`, `{S_k}` with their drift
//! sequence `{c_k}` and the constants `C_S >= sum c_i`, `C_P >= prod (1 + c_i)`.
//!
//! Non-list families share one scalar trajectory `s_k`: `s_0 = 1` and
//! `s_{k+1} = s_k (1 + c_k)^{+1/-1}` alternating up/down, so consecutive
//! operators sit exactly on the boundary of the sandwich
//! `Q_k / (1 + c_k) <= Q_{k+1} <= (1 + c_k) Q_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    block_diag, matrix_leq, BlockDiagOperator, Definiteness, Matrix, PsdOperator, SpaceLabel, VectorSpaceTag,
    ORDER_SLACK_TOL,
};
use crate::problems::matrix_from_rows;

/// Upper end of the admissible relaxation interval, `(1 + sqrt 5) / 2`.
pub const GOLDEN: f64 = 1.618_033_988_749_895;
/// Exclusion margin at both ends of the theta interval.
pub const THETA_EDGE_TOL: f64 = 1e-12;

pub fn check_theta(theta: f64) -> Result<()> {
    if !(theta > THETA_EDGE_TOL && theta < GOLDEN - THETA_EDGE_TOL) {
        return Err(Error::ThetaOutOfRange(theta));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorDescriptor {
    ScaledIdentity { scale: f64 },
    Dense { matrix: Vec<Vec<f64>> },
    /// `R_k = s_k tau I - A' H_k A` (R only).
    Linearized { tau: f64 },
    Zero,
    /// Item `k` is used at index `k`; the last item repeats.
    CustomList { items: Vec<OperatorDescriptor> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DecayLaw {
    /// `c_k = c0 / (k + 1)^2`
    InverseSquare,
    Zero,
    /// `c_k = c0`; not summable, constants only hold up to `k_max`.
    Constant,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub c0: f64,
    pub law: DecayLaw,
}

/// JSON schedule configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "H")]
    pub h: OperatorDescriptor,
    #[serde(rename = "R")]
    pub r: OperatorDescriptor,
    #[serde(rename = "S")]
    pub s: OperatorDescriptor,
    pub c: DecayConfig,
    pub k_max: usize,
}

impl ScheduleConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `H = beta I`, `R = S = 0`, `c_k = 0`: standard ADMM.
    pub fn constant(beta: f64, k_max: usize) -> Self {
        Self {
            h: OperatorDescriptor::ScaledIdentity { scale: beta },
            r: OperatorDescriptor::Zero,
            s: OperatorDescriptor::Zero,
            c: DecayConfig { c0: 0.0, law: DecayLaw::Zero },
            k_max,
        }
    }
}

#[derive(Debug, Clone)]
enum Family {
    /// `Q_k = s_k Q_0`
    Scaled(PsdOperator),
    /// `R_k = s_k tau I - A' H_k A`; `base` is `R_0` when `H` is scaled.
    Linearized { tau: f64, base: PsdOperator },
    List(Vec<PsdOperator>),
}

impl Family {
    fn name(&self) -> &'static str {
        match self {
            Family::Scaled(_) => "scaled",
            Family::Linearized { .. } => "linearized",
            Family::List(_) => "custom_list",
        }
    }
}

/// The three operator families realized at `k`.
#[derive(Debug, Clone)]
pub struct Realized {
    pub h: PsdOperator,
    pub r: PsdOperator,
    pub s: PsdOperator,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichCheck {
    pub k: usize,
    pub family: &'static str,
    pub pass: bool,
    /// Smallest of the two Loewner margins (negative on failure).
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub k_max: usize,
    pub checks: Vec<SandwichCheck>,
    pub sum_c: f64,
    pub prod_c: f64,
    pub c_s: f64,
    pub c_p: f64,
    pub summable: bool,
    pub admm_mode: bool,
    /// Indices with `c_k > 1` (disallowed in ADMM mode).
    pub c_above_one: Vec<usize>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn first_failure(&self) -> Option<&SandwichCheck> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// A validated metric schedule for a fixed pair `(A, B)`.
#[derive(Debug, Clone)]
pub struct MetricSchedule {
    config: ScheduleConfig,
    h: Family,
    r: Family,
    s: Family,
    a: Matrix,
    b_mat: Matrix,
    c_s: f64,
    c_p: f64,
}

fn resolve(desc: &OperatorDescriptor, space: VectorSpaceTag, what: &str, allow_list: bool) -> Result<Family> {
    let wrap = |e: Error| Error::InvalidSchedule(format!("{what}: {e}"));
    let definiteness = if space.label == SpaceLabel::Gamma { Definiteness::Definite } else { Definiteness::Semidefinite };
    match desc {
        OperatorDescriptor::ScaledIdentity { scale } => {
            if !(scale.is_finite() && *scale >= 0.0) || (definiteness == Definiteness::Definite && *scale <= 0.0) {
                return Err(Error::InvalidSchedule(format!("{what}: scale must be {} (got {scale})",
                    if definiteness == Definiteness::Definite { "> 0" } else { ">= 0" })));
            }
            Ok(Family::Scaled(PsdOperator::scaled_identity(space, *scale).map_err(wrap)?))
        }
        OperatorDescriptor::Dense { matrix } => {
            let m = matrix_from_rows(matrix, what).map_err(wrap)?;
            Ok(Family::Scaled(PsdOperator::new(space, m, definiteness).map_err(wrap)?))
        }
        OperatorDescriptor::Zero => {
            if definiteness == Definiteness::Definite {
                return Err(Error::InvalidSchedule(format!("{what}: H must be positive definite, zero is not allowed")));
            }
            Ok(Family::Scaled(PsdOperator::zero(space)))
        }
        OperatorDescriptor::Linearized { .. } => {
            Err(Error::InvalidSchedule(format!("{what}: `linearized` is only available for R")))
        }
        OperatorDescriptor::CustomList { items } => {
            if !allow_list || items.is_empty() {
                return Err(Error::InvalidSchedule(format!("{what}: custom_list must be a nonempty list of plain operators")));
            }
            let ops = items
                .iter()
                .enumerate()
                .map(|(i, item)| match resolve(item, space, &format!("{what}[{i}]"), false)? {
                    Family::Scaled(op) => Ok(op),
                    _ => Err(Error::InvalidSchedule(format!("{what}[{i}]: nested families are not allowed"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Family::List(ops))
        }
    }
}

impl MetricSchedule {
    /// Resolves a configuration against the constraint operators
    /// `A (m x nx)` and `B (m x ny)`.
    pub fn new(config: ScheduleConfig, a: &Matrix, b_mat: &Matrix) -> Result<Self> {
        if a.nrows() != b_mat.nrows() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), found: b_mat.nrows() });
        }
        let c0 = config.c.c0;
        if !(c0.is_finite() && c0 >= 0.0) {
            return Err(Error::InvalidSchedule(format!("c0 must be finite and >= 0, got {c0}")));
        }
        if config.k_max < 1 {
            return Err(Error::InvalidSchedule("k_max must be >= 1".into()));
        }
        let x_space = VectorSpaceTag::new(a.ncols(), SpaceLabel::X)?;
        let y_space = VectorSpaceTag::new(b_mat.ncols(), SpaceLabel::Y)?;
        let g_space = VectorSpaceTag::new(a.nrows(), SpaceLabel::Gamma)?;
        let h = resolve(&config.h, g_space, "H", true)?;
        let s = resolve(&config.s, y_space, "S", true)?;
        let r = match &config.r {
            OperatorDescriptor::Linearized { tau } => {
                if !(tau.is_finite() && *tau >= 0.0) {
                    return Err(Error::InvalidSchedule(format!("R: tau must be finite and >= 0, got {tau}")));
                }
                let h0 = match &h {
                    Family::Scaled(op) => op.clone(),
                    Family::List(ops) => ops[0].clone(),
                    Family::Linearized { .. } => unreachable!("H is never linearized"),
                };
                let base = linearized_r(*tau, 1.0, a, &h0, x_space, 0)?;
                Family::Linearized { tau: *tau, base }
            }
            other => resolve(other, x_space, "R", true)?,
        };
        let mut schedule = Self { config, h, r, s, a: a.clone(), b_mat: b_mat.clone(), c_s: 0.0, c_p: 1.0 };
        let (c_s, c_p) = schedule.constants();
        schedule.c_s = c_s;
        schedule.c_p = c_p;
        Ok(schedule)
    }

    pub fn from_json(text: &str, a: &Matrix, b_mat: &Matrix) -> Result<Self> {
        Self::new(ScheduleConfig::from_json(text)?, a, b_mat)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn k_max(&self) -> usize {
        self.config.k_max
    }

    /// Extends the validation horizon (constants are recomputed).
    pub fn with_horizon(mut self, k_max: usize) -> Self {
        self.config.k_max = k_max.max(1);
        let (c_s, c_p) = self.constants();
        self.c_s = c_s;
        self.c_p = c_p;
        self
    }

    pub fn c(&self, k: usize) -> f64 {
        let DecayConfig { c0, law } = self.config.c;
        match law {
            DecayLaw::InverseSquare => c0 / ((k + 1) as f64).powi(2),
            DecayLaw::Zero => 0.0,
            DecayLaw::Constant => c0,
        }
    }

    /// Whether `sum c_k` converges, so `C_S`, `C_P` hold for every `k`.
    pub fn summable(&self) -> bool {
        self.config.c.law != DecayLaw::Constant || self.config.c.c0 == 0.0
    }

    /// `C_S` upper-bounds `sum_{i<=k} c_i` for all `k` (for all `k <= k_max`
    /// when the law is not summable).
    pub fn c_s(&self) -> f64 {
        self.c_s
    }

    pub fn c_p(&self) -> f64 {
        self.c_p
    }

    fn constants(&self) -> (f64, f64) {
        let k_max = self.config.k_max;
        let (sum, prod) = self.partial_sums(k_max);
        // sum_{i > k_max} c0 / (i + 1)^2 <= c0 / (k_max + 1)
        let tail = match self.config.c.law {
            DecayLaw::InverseSquare => self.config.c.c0 / (k_max + 1) as f64,
            _ => 0.0,
        };
        (sum + tail, prod * tail.exp())
    }

    fn partial_sums(&self, k_max: usize) -> (f64, f64) {
        (0..=k_max).fold((0.0, 1.0), |(s, p), i| {
            let c = self.c(i);
            (s + c, p * (1.0 + c))
        })
    }

    /// Common scale `s_k` of the non-list families.
    pub fn scale(&self, k: usize) -> f64 {
        (0..k).fold(1.0, |s, i| if i % 2 == 0 { s * (1.0 + self.c(i)) } else { s / (1.0 + self.c(i)) })
    }

    fn h_at(&self, k: usize, sk: f64) -> Result<PsdOperator> {
        match &self.h {
            Family::Scaled(op) => op.scaled(sk),
            Family::List(ops) => Ok(ops[k.min(ops.len() - 1)].clone()),
            Family::Linearized { .. } => unreachable!("H is never linearized"),
        }
    }

    fn plain_at(family: &Family, k: usize, sk: f64) -> Option<Result<PsdOperator>> {
        match family {
            Family::Scaled(op) => Some(op.scaled(sk)),
            Family::List(ops) => Some(Ok(ops[k.min(ops.len() - 1)].clone())),
            Family::Linearized { .. } => None,
        }
    }

    /// `(H_k, R_k, S_k)`; index 0 gives the anchor operators.
    pub fn realize(&self, k: usize) -> Result<Realized> {
        let sk = self.scale(k);
        let h = self.h_at(k, sk)?;
        let s = Self::plain_at(&self.s, k, sk).expect("S is never linearized")?;
        let r = match &self.r {
            Family::Linearized { tau, base } => match &self.h {
                Family::Scaled(_) => base.scaled(sk)?,
                _ => linearized_r(*tau, sk, &self.a, &h, base.space(), k)?,
            },
            other => Self::plain_at(other, k, sk).expect("checked above")?,
        };
        Ok(Realized { h, r, s })
    }

    fn all_scaled(&self) -> bool {
        !matches!(self.h, Family::List(_)) && !matches!(self.r, Family::List(_)) && !matches!(self.s, Family::List(_))
    }

    /// `M_k = blkdiag(R_k, B'H_kB + S_k, theta^{-1} H_k^{-1})`.
    ///
    /// When no family is a list, `M_k` is the anchor `M_0` with blocks scaled
    /// by `(s_k, s_k, 1/s_k)`, which reuses the anchor eigendecompositions.
    pub fn metric_at(&self, k: usize, theta: f64, anchor: Option<&BlockDiagOperator>) -> Result<BlockDiagOperator> {
        check_theta(theta)?;
        if self.all_scaled() {
            let sk = self.scale(k);
            return match anchor {
                Some(m0) => m0.scaled_blocks(&[sk, sk, 1.0 / sk]),
                None => {
                    let m0 = self.metric_general(0, theta)?;
                    if k == 0 { Ok(m0) } else { m0.scaled_blocks(&[sk, sk, 1.0 / sk]) }
                }
            };
        }
        self.metric_general(k, theta)
    }

    fn metric_general(&self, k: usize, theta: f64) -> Result<BlockDiagOperator> {
        let ops = self.realize(k)?;
        assemble_mk(&ops.h, &ops.r, &ops.s, &self.b_mat, theta)
    }

    /// Sandwich checks for every family and every `k < k_max`, plus the
    /// drift constants.
    pub fn validate(&self, admm_mode: bool) -> Result<ValidationReport> {
        let k_max = self.config.k_max;
        let mut checks = Vec::with_capacity(3 * k_max);
        let families: [(&'static str, &Family); 3] = [("R", &self.r), ("S", &self.s), ("H", &self.h)];
        let scalar = self.all_scaled();
        let mut prev = if scalar { None } else { Some(self.realize(0)?) };
        for k in 0..k_max {
            let ck = self.c(k);
            if scalar {
                // every family moves by the common ratio s_{k+1} / s_k
                let ratio = self.scale(k + 1) / self.scale(k);
                let slack = (ratio - 1.0 / (1.0 + ck)).min(1.0 + ck - ratio);
                let pass = slack >= -ORDER_SLACK_TOL * (1.0 + ck);
                for (name, _) in families {
                    checks.push(SandwichCheck { k, family: name, pass, slack });
                }
            } else {
                let cur = prev.take().expect("previous operators");
                let next = self.realize(k + 1)?;
                for (name, qk, qn) in [("R", &cur.r, &next.r), ("S", &cur.s, &next.s), ("H", &cur.h, &next.h)] {
                    let (pass, slack) = sandwich(qk.matrix(), qn.matrix(), ck);
                    checks.push(SandwichCheck { k, family: name, pass, slack });
                }
                prev = Some(next);
            }
        }
        let (sum_c, prod_c) = self.partial_sums(k_max);
        let c_above_one: Vec<usize> = if self.c(0) > 1.0 { (0..=k_max).filter(|&k| self.c(k) > 1.0).collect() } else { vec![] };
        let pass = checks.iter().all(|c| c.pass) && (!admm_mode || c_above_one.is_empty());
        Ok(ValidationReport {
            k_max,
            checks,
            sum_c,
            prod_c,
            c_s: self.c_s,
            c_p: self.c_p,
            summable: self.summable(),
            admm_mode,
            c_above_one,
            pass,
        })
    }

    /// Validates and turns the first failure into an error naming `k`.
    pub fn validated(self, admm_mode: bool) -> Result<Self> {
        let report = self.validate(admm_mode)?;
        if let Some(bad) = report.first_failure() {
            return Err(Error::ScheduleViolation { k: bad.k, family: bad.family.to_string() });
        }
        if admm_mode && !report.c_above_one.is_empty() {
            return Err(Error::InvalidSchedule(format!(
                "c_k must lie in [0, 1] for ADMM use; c_{} = {} exceeds 1",
                report.c_above_one[0],
                self.c(report.c_above_one[0])
            )));
        }
        Ok(self)
    }

    pub fn family_kinds(&self) -> [&'static str; 3] {
        [self.h.name(), self.r.name(), self.s.name()]
    }
}

fn linearized_r(tau: f64, sk: f64, a: &Matrix, h: &PsdOperator, space: VectorSpaceTag, k: usize) -> Result<PsdOperator> {
    let aha = a.transpose() * h.matrix() * a;
    let m = Matrix::identity(a.ncols(), a.ncols()) * (sk * tau) - &aha;
    PsdOperator::semidefinite(space, m).map_err(|e| {
        Error::InvalidSchedule(format!("linearized R is not PSD at k = {k} (tau too small for lambda_max(A'H_kA)): {e}"))
    })
}

/// `Q_k / (1 + c) <= Q_{k+1} <= (1 + c) Q_k`, with the worst eigenvalue margin.
fn sandwich(qk: &Matrix, qn: &Matrix, c: f64) -> (bool, f64) {
    let lower = qn - qk / (1.0 + c);
    let upper = qk * (1.0 + c) - qn;
    let min_eig = |m: &Matrix| nalgebra::SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min();
    let slack = min_eig(&lower).min(min_eig(&upper));
    let pass = matrix_leq(&(qk / (1.0 + c)), qn, ORDER_SLACK_TOL) && matrix_leq(qn, &(qk * (1.0 + c)), ORDER_SLACK_TOL);
    (pass, slack)
}

/// `blkdiag(R, B'HB + S, theta^{-1} H^{-1})`.
pub fn assemble_mk(h: &PsdOperator, r: &PsdOperator, s: &PsdOperator, b_mat: &Matrix, theta: f64) -> Result<BlockDiagOperator> {
    check_theta(theta)?;
    if b_mat.nrows() != h.dim() || b_mat.ncols() != s.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), found: b_mat.nrows() });
    }
    let middle = b_mat.transpose() * h.matrix() * b_mat + s.matrix();
    let middle = PsdOperator::semidefinite(s.space(), middle)?;
    let third = h.inverse()?.scaled(1.0 / theta)?;
    block_diag(vec![r.clone(), middle, third])
}
