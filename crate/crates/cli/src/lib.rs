//! Command-line front end: certified single runs and batch sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vmpadmm_core::admm::{ReferencePoint, ThetaParams, VmPadmm, DEFAULT_EPS_SAMPLES, REFERENCE_WARN_RESIDUAL};
use vmpadmm_core::problems::{reference_solve, GeneratorSpec, ProblemSpec};
use vmpadmm_core::schedule::{check_theta, MetricSchedule, ScheduleConfig};

pub const SEED_ENV: &str = "VMPADMM_SEED";
pub const REFERENCE_ACCURACY: f64 = 1e-10;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;

pub const CSV_HEADER: &str = "k,res_x_dual,res_y_dual,res_gamma_dual,res_max,bound_pointwise,erg_res_max,bound_erg_res,\
eps_x_a,eps_y_a,eps_sum,bound_erg_eps,eta_k,hpe_lhs,hpe_rhs,hpe_slack";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Core(#[from] vmpadmm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Where the problem comes from: a JSON file or a generator spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum ProblemSource {
    File(PathBuf),
    Generator(String),
}

impl ProblemSource {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("gen:") {
            ProblemSource::Generator(s.to_string())
        } else {
            ProblemSource::File(PathBuf::from(s))
        }
    }

    fn relative_to(self, base: &Path) -> Self {
        match self {
            ProblemSource::File(p) if p.is_relative() => ProblemSource::File(base.join(p)),
            other => other,
        }
    }

    pub fn load(&self) -> Result<ProblemSpec, CliError> {
        match self {
            ProblemSource::File(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                ProblemSpec::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            ProblemSource::Generator(spec) => Ok(GeneratorSpec::parse(spec)?.generate()?),
        }
    }
}

/// Which verification families count towards the exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VerifyFlags {
    pub hpe: bool,
    pub bounds: bool,
    pub memberships: bool,
    pub fejer: bool,
}

impl Default for VerifyFlags {
    fn default() -> Self {
        Self { hpe: true, bounds: true, memberships: true, fejer: true }
    }
}

impl FromStr for VerifyFlags {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let mut flags = Self { hpe: false, bounds: false, memberships: false, fejer: false };
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match item {
                "hpe" => flags.hpe = true,
                "bounds" => flags.bounds = true,
                "memberships" => flags.memberships = true,
                "fejer" => flags.fejer = true,
                "all" => flags = Self::default(),
                "none" => {}
                other => return Err(CliError::Config(format!("verify: unknown check `{other}`"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub problem: ProblemSource,
    pub schedule: Option<PathBuf>,
    pub theta: f64,
    pub sigma_margin: f64,
    pub max_iters: usize,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Samples per ergodic eps-subdifferential test.
    pub eps_samples: usize,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub verify: VerifyFlags,
}

impl RunConfig {
    pub fn new(problem: ProblemSource, theta: f64) -> Self {
        Self {
            problem,
            schedule: None,
            theta,
            sigma_margin: vmpadmm_core::admm::DEFAULT_SIGMA_MARGIN,
            max_iters: 1000,
            rho: 1e-6,
            eps: 1e-6,
            seed: 0,
            eps_samples: DEFAULT_EPS_SAMPLES,
            log: None,
            report: None,
            verify: VerifyFlags::default(),
        }
    }

    /// Applies `VMPADMM_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self, CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}: not an unsigned integer: `{v}`")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(CliError::Config(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(CliError::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.max_iters < 1 {
            return Err(CliError::Config("max_iters must be >= 1".into()));
        }
        if !(self.sigma_margin >= 0.0 && self.sigma_margin < 1.0) {
            return Err(CliError::Config(format!("sigma_margin must lie in [0, 1), got {}", self.sigma_margin)));
        }
        check_theta(self.theta).map_err(|e| CliError::Config(format!("theta: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Constants {
    pub theta: f64,
    pub sigma_theta: f64,
    pub sigma_boundary: f64,
    pub sigma_clamped: bool,
    pub tau_theta: f64,
    pub c_s: f64,
    pub c_p: f64,
    pub e: f64,
    pub e_hat: f64,
    /// Upper bound on the distance from `z0` to the solution set.
    pub d0: f64,
    pub eta0: f64,
    pub pointwise_coefficient: f64,
    pub reference_kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Check {
    pub pass: bool,
    pub slack: f64,
}

/// All checks of one iteration.
#[derive(Debug, Clone, Serialize)]
pub struct IterationChecks {
    pub k: usize,
    pub hpe: Check,
    pub pointwise: Check,
    pub ergodic_res: Check,
    pub ergodic_eps: Check,
    /// Non-negativity of the two eps terms, their decomposition, and the
    /// ergodic primal identity.
    pub ergodic_consistency: bool,
    pub fejer: Check,
    pub membership: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySummary {
    pub enabled: bool,
    pub checks: usize,
    pub failures: usize,
    pub worst_slack: Option<f64>,
    pub first_failure_k: Option<usize>,
}

impl FamilySummary {
    fn new(enabled: bool) -> Self {
        Self { enabled, checks: 0, failures: 0, worst_slack: None, first_failure_k: None }
    }

    fn add(&mut self, k: usize, pass: bool, slack: Option<f64>) {
        self.checks += 1;
        if let Some(s) = slack {
            self.worst_slack = Some(self.worst_slack.map_or(s, |w: f64| w.min(s)));
        }
        if !pass {
            self.failures += 1;
            self.first_failure_k.get_or_insert(k);
        }
    }

    fn ok(&self) -> bool {
        !self.enabled || self.failures == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub hpe: FamilySummary,
    pub bounds: FamilySummary,
    pub memberships: FamilySummary,
    pub fejer: FamilySummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stopping {
    pub rho: f64,
    pub eps: f64,
    /// First `k` whose own residual triple has dual norms `<= rho`.
    pub first_k_pointwise: Option<usize>,
    /// First `k` with ergodic residuals `<= rho` and `eps_x + eps_y <= eps`.
    pub first_k_ergodic: Option<usize>,
    pub pointwise_status: String,
    pub ergodic_status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub problem: String,
    pub config: RunConfig,
    pub schedule_families: [&'static str; 3],
    pub constants: Constants,
    pub iterations: usize,
    pub summary: Summary,
    pub stopping: Stopping,
    pub warnings: Vec<String>,
    /// Numerical failure that ended the run early.
    pub aborted: Option<String>,
    pub pass: bool,
    pub per_k: Vec<IterationChecks>,
}

impl VerificationReport {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            EXIT_OK
        } else {
            EXIT_VERIFICATION
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Report plus the CSV log text of one run.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub report: VerificationReport,
    pub csv: String,
}

fn load_schedule(cfg: &RunConfig, problem: &ProblemSpec) -> Result<MetricSchedule, CliError> {
    let schedule = match &cfg.schedule {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let sc = ScheduleConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            MetricSchedule::new(sc, &problem.a, &problem.b_mat)?
        }
        None => MetricSchedule::new(ScheduleConfig::constant(1.0, cfg.max_iters), &problem.a, &problem.b_mat)?,
    };
    let schedule = if schedule.summable() {
        let horizon = schedule.k_max().max(cfg.max_iters);
        schedule.with_horizon(horizon)
    } else if cfg.max_iters > schedule.k_max() {
        return Err(CliError::Config(format!(
            "schedule: the drift law is not summable, so max_iters ({}) may not exceed k_max ({})",
            cfg.max_iters,
            schedule.k_max()
        )));
    } else {
        schedule
    };
    Ok(schedule.validated(true)?)
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Runs one certified solve without touching the file system for outputs.
pub fn solve(cfg: &RunConfig) -> Result<SolveOutput, CliError> {
    cfg.validate()?;
    let problem = cfg.problem.load()?;
    let schedule = load_schedule(cfg, &problem)?;
    let params = ThetaParams::new(cfg.theta, cfg.sigma_margin)?;
    let reference: ReferencePoint = reference_solve(&problem, REFERENCE_ACCURACY)?.into();
    let mut warnings = Vec::new();
    if reference.kkt_residual > REFERENCE_WARN_RESIDUAL {
        warnings.push(format!("reference KKT residual {:e} exceeds {REFERENCE_WARN_RESIDUAL:e}; d0 and Fejer checks are looser", reference.kkt_residual));
    }
    if params.clamped {
        warnings.push(format!("sigma margin pulled back: sigma_theta = {}", params.sigma));
    }
    let d0 = VmPadmm::d0_for(&problem, &schedule, cfg.theta, None, &reference)?;
    let mut solver = VmPadmm::new(&problem, &schedule, params, None, d0)?;
    let bounds = *solver.bounds();
    let constants = Constants {
        theta: params.theta,
        sigma_theta: params.sigma,
        sigma_boundary: params.sigma_min,
        sigma_clamped: params.clamped,
        tau_theta: params.tau,
        c_s: bounds.c_s,
        c_p: bounds.c_p,
        e: bounds.e,
        e_hat: bounds.e_hat,
        d0,
        eta0: bounds.eta0,
        pointwise_coefficient: params.pointwise_coefficient(bounds.c_p),
        reference_kkt_residual: reference.kkt_residual,
    };

    let v = cfg.verify;
    let mut summary = Summary {
        hpe: FamilySummary::new(v.hpe),
        bounds: FamilySummary::new(v.bounds),
        memberships: FamilySummary::new(v.memberships),
        fejer: FamilySummary::new(v.fejer),
    };
    let eps_samples = if v.memberships { cfg.eps_samples } else { 0 };
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut per_k = Vec::new();
    let (mut first_pw, mut first_erg) = (None, None);
    let mut aborted = None;

    for k in 1..=cfg.max_iters {
        let it = match solver.step() {
            Ok(it) => it,
            Err(e) => {
                aborted = Some(format!("k = {k}: {e}"));
                break;
            }
        };
        let certs = solver
            .pointwise_kkt_certificate(k)
            .and_then(|pw| Ok((pw, solver.ergodic_kkt_certificate(eps_samples, cfg.seed.wrapping_add(k as u64))?)))
            .and_then(|(pw, erg)| Ok((pw, erg, solver.fejer_check(&reference)?)));
        let (pw, erg, fejer) = match certs {
            Ok(c) => c,
            Err(e) => {
                aborted = Some(format!("k = {k}: {e}"));
                break;
            }
        };

        let hpe = Check { pass: it.error_check.pass, slack: it.error_check.slack };
        let pointwise = Check { pass: pw.bound.pass, slack: pw.bound.slack };
        let ergodic_res = Check { pass: erg.res_bound.pass && erg.hpe.in_range, slack: erg.res_bound.slack };
        let ergodic_eps = Check { pass: erg.eps_bound.pass, slack: erg.eps_bound.slack };
        let ergodic_consistency = erg.eps_nonneg && erg.decomposition_ok && erg.gamma_identity_ok && erg.hpe.pass();
        let fejer_check = Check { pass: fejer.pass, slack: fejer.slack };
        let membership = it.membership.pass
            && erg.eps_membership_x.is_none_or(|r| r.pass)
            && erg.eps_membership_y.is_none_or(|r| r.pass);

        summary.hpe.add(k, hpe.pass, Some(hpe.slack));
        summary.bounds.add(k, pointwise.pass, Some(pointwise.slack));
        summary.bounds.add(k, ergodic_res.pass, Some(ergodic_res.slack));
        summary.bounds.add(k, ergodic_eps.pass, Some(ergodic_eps.slack));
        summary.bounds.add(k, ergodic_consistency, None);
        summary.memberships.add(k, membership, None);
        summary.fejer.add(k, fejer_check.pass, Some(fejer_check.slack));

        let own_max = it.res.iter().copied().fold(0.0, f64::max);
        if first_pw.is_none() && own_max <= cfg.rho {
            first_pw = Some(k);
        }
        if first_erg.is_none() && erg.res_max <= cfg.rho && erg.eps_sum <= cfg.eps {
            first_erg = Some(k);
        }

        let _ = writeln!(
            csv,
            "{k},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            num(it.res[0]),
            num(it.res[1]),
            num(it.res[2]),
            num(pw.res_max),
            num(pw.bound.rhs),
            num(erg.res_max),
            num(erg.res_bound.rhs),
            num(erg.eps_x),
            num(erg.eps_y),
            num(erg.eps_sum),
            num(erg.eps_bound.rhs),
            num(it.eta),
            num(it.error_check.lhs),
            num(it.error_check.rhs),
            num(it.error_check.slack),
        );
        per_k.push(IterationChecks { k, hpe, pointwise, ergodic_res, ergodic_eps, ergodic_consistency, fejer: fejer_check, membership });

        if first_pw.is_some() && first_erg.is_some() {
            break;
        }
    }

    let status = |first: Option<usize>| match first {
        Some(k) => format!("reached at k = {k}"),
        None => "not reached".to_string(),
    };
    let pass = aborted.is_none() && summary.hpe.ok() && summary.bounds.ok() && summary.memberships.ok() && summary.fejer.ok();
    let report = VerificationReport {
        problem: problem.name.clone(),
        config: cfg.clone(),
        schedule_families: schedule.family_kinds(),
        constants,
        iterations: per_k.len(),
        summary,
        stopping: Stopping {
            rho: cfg.rho,
            eps: cfg.eps,
            first_k_pointwise: first_pw,
            first_k_ergodic: first_erg,
            pointwise_status: status(first_pw),
            ergodic_status: status(first_erg),
        },
        warnings,
        aborted,
        pass,
        per_k,
    };
    Ok(SolveOutput { report, csv })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// `solve` plus writing the CSV log and JSON report; returns the exit code.
pub fn run_solve(cfg: &RunConfig) -> Result<(i32, VerificationReport), CliError> {
    let out = solve(cfg)?;
    if let Some(path) = &cfg.log {
        write_file(path, &out.csv)?;
    }
    if let Some(path) = &cfg.report {
        write_file(path, &out.report.to_json())?;
    }
    Ok((out.report.exit_code(), out.report))
}

/// One entry of a batch corpus file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub problem: String,
    pub theta: Option<f64>,
    pub schedule: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub instances: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let corpus: Corpus = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if corpus.instances.is_empty() {
            return Err(CliError::Config(format!("{}: corpus has no instances", path.display())));
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceResult {
    pub index: usize,
    pub problem: String,
    pub status: &'static str,
    pub exit_code: i32,
    pub error: Option<String>,
    pub report: Option<VerificationReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub errored: usize,
    /// Smallest slack per family over all instances.
    pub worst_hpe_slack: Option<f64>,
    pub worst_bound_slack: Option<f64>,
    pub worst_fejer_slack: Option<f64>,
    pub results: Vec<InstanceResult>,
}

impl AggregateReport {
    /// 0 when every instance passed, 2 if any failed verification,
    /// 1 if some only errored.
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 {
            EXIT_VERIFICATION
        } else if self.errored > 0 {
            EXIT_CONFIG
        } else {
            EXIT_OK
        }
    }
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Runs every corpus instance with `template` (problem, theta and schedule
/// replaced per entry). Instances write `<out_dir>/<index>.csv` and
/// `<out_dir>/<index>.json`; the aggregate goes to `<out_dir>/aggregate.json`.
pub fn run_batch(corpus: &Corpus, corpus_dir: &Path, template: &RunConfig, out_dir: Option<&Path>) -> Result<AggregateReport, CliError> {
    let results: Vec<InstanceResult> = corpus
        .instances
        .par_iter()
        .enumerate()
        .map(|(index, entry)| {
            let mut cfg = template.clone();
            cfg.problem = ProblemSource::parse(&entry.problem).relative_to(corpus_dir);
            cfg.theta = entry.theta.unwrap_or(template.theta);
            cfg.schedule = entry.schedule.as_ref().map(|p| if p.is_relative() { corpus_dir.join(p) } else { p.clone() }).or(template.schedule.clone());
            cfg.log = out_dir.map(|d| d.join(format!("{index}.csv")));
            cfg.report = out_dir.map(|d| d.join(format!("{index}.json")));
            match run_solve(&cfg) {
                Ok((code, report)) => InstanceResult {
                    index,
                    problem: entry.problem.clone(),
                    status: if report.pass { "pass" } else { "fail" },
                    exit_code: code,
                    error: None,
                    report: Some(report),
                },
                Err(e) => InstanceResult {
                    index,
                    problem: entry.problem.clone(),
                    status: "error",
                    exit_code: e.exit_code(),
                    error: Some(e.to_string()),
                    report: None,
                },
            }
        })
        .collect();

    let mut agg = AggregateReport {
        instances: results.len(),
        passed: 0,
        failed: 0,
        errored: 0,
        worst_hpe_slack: None,
        worst_bound_slack: None,
        worst_fejer_slack: None,
        results: Vec::new(),
    };
    for r in &results {
        match r.status {
            "pass" => agg.passed += 1,
            "fail" => agg.failed += 1,
            _ => agg.errored += 1,
        }
        if let Some(rep) = &r.report {
            agg.worst_hpe_slack = min_opt(agg.worst_hpe_slack, rep.summary.hpe.worst_slack);
            agg.worst_bound_slack = min_opt(agg.worst_bound_slack, rep.summary.bounds.worst_slack);
            agg.worst_fejer_slack = min_opt(agg.worst_fejer_slack, rep.summary.fejer.worst_slack);
        }
    }
    agg.results = results;
    if let Some(dir) = out_dir {
        write_file(&dir.join("aggregate.json"), &serde_json::to_string_pretty(&agg).expect("aggregate serializes"))?;
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_flags_parse() {
        let f: VerifyFlags = "hpe,fejer".parse().unwrap();
        assert!(f.hpe && f.fejer && !f.bounds && !f.memberships);
        assert_eq!("all".parse::<VerifyFlags>().unwrap(), VerifyFlags::default());
        assert!("hpe,nope".parse::<VerifyFlags>().is_err());
    }

    #[test]
    fn problem_source_parse() {
        assert_eq!(ProblemSource::parse("gen:lasso:10x5:1"), ProblemSource::Generator("gen:lasso:10x5:1".into()));
        assert_eq!(ProblemSource::parse("p.json"), ProblemSource::File("p.json".into()));
        let rel = ProblemSource::parse("p.json").relative_to(Path::new("/data"));
        assert_eq!(rel, ProblemSource::File("/data/p.json".into()));
    }

    #[test]
    fn config_validation() {
        let base = RunConfig::new(ProblemSource::parse("gen:lasso:10x5:1"), 1.0);
        assert!(base.validate().is_ok());
        for bad in [
            RunConfig { rho: 0.0, ..base.clone() },
            RunConfig { eps: -1.0, ..base.clone() },
            RunConfig { max_iters: 0, ..base.clone() },
            RunConfig { theta: 1.62, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(CliError::Config(_))));
        }
    }

    #[test]
    fn small_run_passes_and_logs_every_iteration() {
        let mut cfg = RunConfig::new(ProblemSource::parse("gen:lasso:8x4:3"), 1.0);
        cfg.max_iters = 30;
        cfg.eps_samples = 20;
        let out = solve(&cfg).unwrap();
        assert!(out.report.pass, "{}", out.report.to_json());
        assert_eq!(out.csv.lines().count(), out.report.iterations + 1);
        assert_eq!(out.csv.lines().next().unwrap(), CSV_HEADER);
    }
}
