//! Problem instances `min f(x) + g(y)  s.t.  Ax + By = b`.
//!
//! `f` and `g` are structured descriptors (zero, convex quadratic, scaled
//! l1 norm, box indicator) with closed-form subdifferentials, which lets
//! every inclusion produced by the solver be checked exactly. Seeded
//! generators build a small test corpus whose instances are feasible by
//! construction, and [`reference_solve`] returns a high-accuracy KKT point.

use nalgebra::{Cholesky, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, PsdOperator, SpaceLabel, Vector, VectorSpaceTag};

/// Tolerance used to decide that a box coordinate sits on a face.
const FACE_TOL: f64 = 1e-12;
/// Off-diagonal mass (relative) below which a quadratic term counts as diagonal.
const DIAGONAL_TOL: f64 = 1e-10;
const REFERENCE_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone)]
pub enum FunctionKind {
    Zero,
    /// `1/2 x'Qx + q'x`
    Quadratic { q_mat: Matrix, q: Vector },
    /// `lambda * |x|_1`
    L1 { lambda: f64 },
    /// Indicator of `{ l <= x <= u }`.
    Box { lower: Vector, upper: Vector },
}

/// A closed proper convex function on `R^dim` with a closed-form
/// subdifferential.
#[derive(Debug, Clone)]
pub struct FunctionDescriptor {
    kind: FunctionKind,
    dim: usize,
}

impl FunctionDescriptor {
    pub fn new(kind: FunctionKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidProblem("function dimension must be >= 1".into()));
        }
        match &kind {
            FunctionKind::Zero => {}
            FunctionKind::Quadratic { q_mat, q } => {
                if q_mat.nrows() != dim || q_mat.ncols() != dim || q.len() != dim {
                    return Err(Error::InvalidProblem(format!("quadratic term must be {dim}x{dim} with a length-{dim} linear term")));
                }
                PsdOperator::semidefinite(VectorSpaceTag::new(dim, SpaceLabel::X)?, q_mat.clone())
                    .map_err(|e| Error::InvalidProblem(format!("quadratic Q: {e}")))?;
            }
            FunctionKind::L1 { lambda } => {
                if !(*lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidProblem(format!("l1 weight must be positive, got {lambda}")));
                }
            }
            FunctionKind::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(Error::InvalidProblem(format!("box bounds must have length {dim}")));
                }
                if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
                    return Err(Error::InvalidProblem("box bounds must be finite with l <= u".into()));
                }
            }
        }
        let kind = match kind {
            FunctionKind::Quadratic { q_mat, q } => {
                FunctionKind::Quadratic { q_mat: (&q_mat + q_mat.transpose()) * 0.5, q }
            }
            other => other,
        };
        Ok(Self { kind, dim })
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::new(FunctionKind::Zero, dim)
    }

    pub fn quadratic(q_mat: Matrix, q: Vector) -> Result<Self> {
        let dim = q.len();
        Self::new(FunctionKind::Quadratic { q_mat, q }, dim)
    }

    pub fn l1(lambda: f64, dim: usize) -> Result<Self> {
        Self::new(FunctionKind::L1 { lambda }, dim)
    }

    pub fn boxed(lower: Vector, upper: Vector) -> Result<Self> {
        let dim = lower.len();
        Self::new(FunctionKind::Box { lower, upper }, dim)
    }

    pub fn kind(&self) -> &FunctionKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_smooth_quadratic(&self) -> bool {
        matches!(self.kind, FunctionKind::Zero | FunctionKind::Quadratic { .. })
    }

    fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        Ok(())
    }

    fn on_lower(lower: f64, x: f64) -> bool {
        x <= lower + FACE_TOL * (1.0 + lower.abs())
    }

    fn on_upper(upper: f64, x: f64) -> bool {
        x >= upper - FACE_TOL * (1.0 + upper.abs())
    }

    pub fn in_domain(&self, x: &Vector) -> bool {
        match &self.kind {
            FunctionKind::Box { lower, upper } => x.iter().zip(lower.iter().zip(upper.iter())).all(|(&xi, (&l, &u))| {
                xi >= l - FACE_TOL * (1.0 + l.abs()) && xi <= u + FACE_TOL * (1.0 + u.abs())
            }),
            _ => x.iter().all(|v| v.is_finite()),
        }
    }

    /// Function value; `+inf` outside the domain.
    pub fn value(&self, x: &Vector) -> f64 {
        if x.len() != self.dim || !self.in_domain(x) {
            return f64::INFINITY;
        }
        match &self.kind {
            FunctionKind::Zero | FunctionKind::Box { .. } => 0.0,
            FunctionKind::Quadratic { q_mat, q } => 0.5 * x.dot(&(q_mat * x)) + q.dot(x),
            FunctionKind::L1 { lambda } => lambda * x.lp_norm(1),
        }
    }

    /// Euclidean distance from `v` to the subdifferential at `x`
    /// (`+inf` when `x` is outside the domain).
    pub fn subdiff_distance(&self, x: &Vector, v: &Vector) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(v)?;
        if !self.in_domain(x) {
            return Ok(f64::INFINITY);
        }
        let d = match &self.kind {
            FunctionKind::Zero => v.norm(),
            FunctionKind::Quadratic { q_mat, q } => (q_mat * x + q - v).norm(),
            FunctionKind::L1 { lambda } => x
                .iter()
                .zip(v.iter())
                .map(|(&xi, &vi)| {
                    let gap = if xi > 0.0 {
                        (vi - lambda).abs()
                    } else if xi < 0.0 {
                        (vi + lambda).abs()
                    } else {
                        (vi.abs() - lambda).max(0.0)
                    };
                    gap * gap
                })
                .sum::<f64>()
                .sqrt(),
            FunctionKind::Box { lower, upper } => (0..self.dim)
                .map(|i| {
                    let (lo, hi) = (Self::on_lower(lower[i], x[i]), Self::on_upper(upper[i], x[i]));
                    let gap = match (lo, hi) {
                        (true, true) => 0.0,
                        (true, false) => v[i].max(0.0),
                        (false, true) => (-v[i]).max(0.0),
                        (false, false) => v[i].abs(),
                    };
                    gap * gap
                })
                .sum::<f64>()
                .sqrt(),
        };
        Ok(d)
    }

    /// Canonical subgradient: zero on the l1 kink and in the box interior.
    pub fn subgradient(&self, x: &Vector) -> Result<Vector> {
        self.subgradient_with(x, |_| 0.0, |_| 0.0)
    }

    /// A random element of the subdifferential: uniform on the l1 kink
    /// interval, and an exponential-magnitude normal-cone element on active
    /// box faces.
    pub fn subgradient_sample<R: Rng + ?Sized>(&self, x: &Vector, rng: &mut R) -> Result<Vector> {
        let lambda = match &self.kind {
            FunctionKind::L1 { lambda } => *lambda,
            _ => 0.0,
        };
        let kink: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..=1.0) * lambda).collect();
        let cone: Vec<f64> = (0..self.dim).map(|_| -rng.random::<f64>().ln()).collect();
        self.subgradient_with(x, |i| kink[i], |i| cone[i])
    }

    fn subgradient_with(&self, x: &Vector, kink: impl Fn(usize) -> f64, cone: impl Fn(usize) -> f64) -> Result<Vector> {
        self.check_dim(x)?;
        if !self.in_domain(x) {
            return Err(Error::OutsideDomain(format!("point is outside dom f (dim {})", self.dim)));
        }
        Ok(match &self.kind {
            FunctionKind::Zero => Vector::zeros(self.dim),
            FunctionKind::Quadratic { q_mat, q } => q_mat * x + q,
            FunctionKind::L1 { lambda } => Vector::from_fn(self.dim, |i, _| {
                if x[i] > 0.0 {
                    *lambda
                } else if x[i] < 0.0 {
                    -lambda
                } else {
                    kink(i)
                }
            }),
            FunctionKind::Box { lower, upper } => Vector::from_fn(self.dim, |i, _| {
                match (Self::on_lower(lower[i], x[i]), Self::on_upper(upper[i], x[i])) {
                    (true, true) => 0.0,
                    (true, false) => -cone(i),
                    (false, true) => cone(i),
                    (false, false) => 0.0,
                }
            }),
        })
    }

    /// Draws a point of the domain near `center` (uniform in the box for box
    /// indicators).
    pub fn sample_domain_point<R: Rng + ?Sized>(&self, center: &Vector, scale: f64, rng: &mut R) -> Vector {
        match &self.kind {
            FunctionKind::Box { lower, upper } => Vector::from_fn(self.dim, |i, _| {
                if rng.random::<f64>() < 0.25 {
                    // faces carry most of the interesting structure
                    if rng.random::<bool>() { lower[i] } else { upper[i] }
                } else {
                    lower[i] + (upper[i] - lower[i]) * rng.random::<f64>()
                }
            }),
            _ => Vector::from_fn(self.dim, |i, _| center[i] + scale * rng.sample::<f64, _>(StandardNormal)),
        }
    }

    /// Exact minimizer of `f(x) + 1/2 x'Px - c'x`.
    ///
    /// Smooth descriptors need `P (+Q)` positive definite; the l1 and box
    /// descriptors need `P` diagonal (which the identity or a linearizing
    /// proximal metric provides).
    pub fn minimize_with_quadratic(&self, p: &Matrix, c: &Vector, prev: &Vector) -> Result<Vector> {
        self.check_dim(c)?;
        self.check_dim(prev)?;
        if p.nrows() != self.dim || p.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: p.nrows() });
        }
        match &self.kind {
            FunctionKind::Zero => solve_spd(p, c),
            FunctionKind::Quadratic { q_mat, q } => solve_spd(&(p + q_mat), &(c - q)),
            FunctionKind::L1 { lambda } => {
                let d = diagonal_of(p, "l1")?;
                (0..self.dim)
                    .map(|i| {
                        let shrunk = soft_threshold(c[i], *lambda);
                        if d[i] > 0.0 {
                            Ok(shrunk / d[i])
                        } else if shrunk == 0.0 {
                            Ok(0.0)
                        } else {
                            Err(Error::SingularSystem(format!(
                                "l1 subproblem is unbounded in coordinate {i} (zero curvature, |c| > lambda)"
                            )))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Vector::from_vec)
            }
            FunctionKind::Box { lower, upper } => {
                let d = diagonal_of(p, "box")?;
                Ok(Vector::from_fn(self.dim, |i, _| {
                    if d[i] > 0.0 {
                        (c[i] / d[i]).clamp(lower[i], upper[i])
                    } else if c[i] > 0.0 {
                        upper[i]
                    } else if c[i] < 0.0 {
                        lower[i]
                    } else {
                        prev[i].clamp(lower[i], upper[i])
                    }
                }))
            }
        }
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn diagonal_of(p: &Matrix, what: &str) -> Result<Vec<f64>> {
    let n = p.nrows();
    let diag_max = (0..n).map(|i| p[(i, i)].abs()).fold(1.0f64, f64::max);
    let off = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| p[(i, j)].abs())
        .fold(0.0f64, f64::max);
    if off > DIAGONAL_TOL * diag_max {
        return Err(Error::UnsupportedSubproblem(format!(
            "{what} term requires a diagonal total quadratic (off-diagonal mass {off:e}); use a linearizing proximal metric"
        )));
    }
    Ok((0..n).map(|i| p[(i, i)]).collect())
}

/// Solves `K u = rhs` for symmetric positive definite `K`.
pub(crate) fn solve_spd(k: &Matrix, rhs: &Vector) -> Result<Vector> {
    let sym = (k + k.transpose()) * 0.5;
    let chol = Cholesky::new(sym).ok_or_else(|| Error::SingularSystem("quadratic subproblem is not positive definite".into()))?;
    let u = chol.solve(rhs);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("quadratic subproblem produced a non-finite solution".into()));
    }
    Ok(u)
}

/// `min f(x) + g(y)  s.t.  Ax + By = b`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub seed: Option<u64>,
    pub f: FunctionDescriptor,
    pub g: FunctionDescriptor,
    pub a: Matrix,
    pub b_mat: Matrix,
    pub b: Vector,
}

impl ProblemSpec {
    pub fn new(name: impl Into<String>, f: FunctionDescriptor, g: FunctionDescriptor, a: Matrix, b_mat: Matrix, b: Vector) -> Result<Self> {
        let m = b.len();
        if m == 0 {
            return Err(Error::InvalidProblem("constraint dimension must be >= 1".into()));
        }
        if a.nrows() != m || b_mat.nrows() != m {
            return Err(Error::InvalidProblem(format!("A and B must have {m} rows (got {} and {})", a.nrows(), b_mat.nrows())));
        }
        if a.ncols() != f.dim() {
            return Err(Error::InvalidProblem(format!("A has {} columns but f acts on dim {}", a.ncols(), f.dim())));
        }
        if b_mat.ncols() != g.dim() {
            return Err(Error::InvalidProblem(format!("B has {} columns but g acts on dim {}", b_mat.ncols(), g.dim())));
        }
        if a.iter().chain(b_mat.iter()).chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("A, B and b must be finite".into()));
        }
        Ok(Self { name: name.into(), seed: None, f, g, a, b_mat, b })
    }

    pub fn nx(&self) -> usize {
        self.a.ncols()
    }

    pub fn ny(&self) -> usize {
        self.b_mat.ncols()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn x_space(&self) -> VectorSpaceTag {
        VectorSpaceTag { dim: self.nx(), label: SpaceLabel::X }
    }

    pub fn y_space(&self) -> VectorSpaceTag {
        VectorSpaceTag { dim: self.ny(), label: SpaceLabel::Y }
    }

    pub fn gamma_space(&self) -> VectorSpaceTag {
        VectorSpaceTag { dim: self.m(), label: SpaceLabel::Gamma }
    }

    pub fn constraint_residual(&self, x: &Vector, y: &Vector) -> Vector {
        &self.a * x + &self.b_mat * y - &self.b
    }

    pub fn objective(&self, x: &Vector, y: &Vector) -> f64 {
        self.f.value(x) + self.g.value(y)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        file.into_spec()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemFile::from_spec(self))?)
    }
}

/// JSON descriptor of `f` or `g`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionFile {
    Zero,
    Quadratic {
        #[serde(rename = "Q")]
        q_mat: Vec<Vec<f64>>,
        q: Vec<f64>,
    },
    L1 {
        lambda: f64,
    },
    Box {
        l: Vec<f64>,
        u: Vec<f64>,
    },
}

/// On-disk problem format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub name: String,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b_mat: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub f: FunctionFile,
    pub g: FunctionFile,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::InvalidProblem(format!("{what} must be a nonempty matrix")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidProblem(format!("{what} has ragged rows")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl FunctionFile {
    fn into_descriptor(self, dim: usize, what: &str) -> Result<FunctionDescriptor> {
        let kind = match self {
            FunctionFile::Zero => FunctionKind::Zero,
            FunctionFile::Quadratic { q_mat, q } => FunctionKind::Quadratic {
                q_mat: matrix_from_rows(&q_mat, &format!("{what}.Q"))?,
                q: Vector::from_vec(q),
            },
            FunctionFile::L1 { lambda } => FunctionKind::L1 { lambda },
            FunctionFile::Box { l, u } => FunctionKind::Box { lower: Vector::from_vec(l), upper: Vector::from_vec(u) },
        };
        FunctionDescriptor::new(kind, dim).map_err(|e| Error::InvalidProblem(format!("field `{what}`: {e}")))
    }

    fn from_descriptor(d: &FunctionDescriptor) -> Self {
        match d.kind() {
            FunctionKind::Zero => FunctionFile::Zero,
            FunctionKind::Quadratic { q_mat, q } => {
                FunctionFile::Quadratic { q_mat: matrix_to_rows(q_mat), q: q.iter().copied().collect() }
            }
            FunctionKind::L1 { lambda } => FunctionFile::L1 { lambda: *lambda },
            FunctionKind::Box { lower, upper } => {
                FunctionFile::Box { l: lower.iter().copied().collect(), u: upper.iter().copied().collect() }
            }
        }
    }
}

impl ProblemFile {
    pub fn into_spec(self) -> Result<ProblemSpec> {
        let a = matrix_from_rows(&self.a, "A")?;
        let b_mat = matrix_from_rows(&self.b_mat, "B")?;
        let f = self.f.into_descriptor(a.ncols(), "f")?;
        let g = self.g.into_descriptor(b_mat.ncols(), "g")?;
        ProblemSpec::new(self.name, f, g, a, b_mat, Vector::from_vec(self.b))
    }

    pub fn from_spec(p: &ProblemSpec) -> Self {
        Self {
            name: p.name.clone(),
            a: matrix_to_rows(&p.a),
            b_mat: matrix_to_rows(&p.b_mat),
            b: p.b.iter().copied().collect(),
            f: FunctionFile::from_descriptor(&p.f),
            g: FunctionFile::from_descriptor(&p.g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Lasso,
    BoxQp,
    ConsensusLs,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Lasso => "lasso",
            GeneratorKind::BoxQp => "box_qp",
            GeneratorKind::ConsensusLs => "consensus_ls",
        }
    }

    fn salt(self) -> u64 {
        match self {
            GeneratorKind::Lasso => 0x6c61_7373_6f00,
            GeneratorKind::BoxQp => 0x626f_7871_7000,
            GeneratorKind::ConsensusLs => 0x636f_6e73_6c73,
        }
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(GeneratorKind::Lasso),
            "box_qp" => Ok(GeneratorKind::BoxQp),
            "consensus_ls" => Ok(GeneratorKind::ConsensusLs),
            other => Err(Error::InvalidProblem(format!("unknown generator kind `{other}`"))),
        }
    }
}

/// Parsed `gen:<kind>:<dims>:<seed>` problem source, dims joined by `x`
/// (`lasso:n x m`, `box_qp:n`, `consensus_ls:nx x ny x m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 || parts[0] != "gen" {
            return Err(Error::InvalidProblem(format!("expected gen:<kind>:<dims>:<seed>, got `{s}`")));
        }
        let kind = parts[1].parse()?;
        let dims = parts[2]
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|_| Error::InvalidProblem(format!("bad dimension `{d}` in `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let seed = parts[3].parse().map_err(|_| Error::InvalidProblem(format!("bad seed `{}` in `{s}`", parts[3])))?;
        Ok(Self { kind, dims, seed })
    }

    pub fn generate(&self) -> Result<ProblemSpec> {
        generate(self.kind, &self.dims, self.seed)
    }
}

impl std::fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "gen:{}:{}:{}", self.kind.name(), dims.join("x"), self.seed)
    }
}

const MAX_GEN_DIM: usize = 200;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Strongly convex least-squares quadratic `1/2 |Dx - e|^2 / rows + ridge/2 |x|^2`.
fn least_squares_quadratic(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> Result<FunctionDescriptor> {
    let rows = n + 2;
    let d = gaussian_matrix(rng, rows, n, 1.0);
    let e = gaussian_vector(rng, rows, 1.0);
    let q_mat = d.transpose() * &d / rows as f64 + Matrix::identity(n, n) * ridge;
    let q = -(d.transpose() * e) / rows as f64;
    FunctionDescriptor::quadratic(q_mat, q)
}

/// Deterministic seeded instance generator.
///
/// * `lasso` (`dims = [n, m]`): `f = 1/2 |x - c|^2`, `g = lambda |y|_1`,
///   constraint `Ax - y = 0`.
/// * `box_qp` (`dims = [n]`): strongly convex quadratic `f`, box indicator
///   `g`, constraint `x - y = 0`.
/// * `consensus_ls` (`dims = [nx, ny, m]`): two least-squares blocks coupled
///   by `Ax + By = b`, with `b` built from a sampled feasible pair.
pub fn generate(kind: GeneratorKind, dims: &[usize], seed: u64) -> Result<ProblemSpec> {
    let expected = match kind {
        GeneratorKind::Lasso => 2,
        GeneratorKind::BoxQp => 1,
        GeneratorKind::ConsensusLs => 3,
    };
    if dims.len() != expected || dims.iter().any(|&d| d == 0 || d > MAX_GEN_DIM) {
        return Err(Error::InvalidProblem(format!(
            "{} expects {expected} dimensions in 1..={MAX_GEN_DIM}, got {dims:?}",
            kind.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.salt());
    let spec = GeneratorSpec { kind, dims: dims.to_vec(), seed };
    let mut problem = match kind {
        GeneratorKind::Lasso => {
            let (n, m) = (dims[0], dims[1]);
            let a = gaussian_matrix(&mut rng, m, n, 1.0 / (m as f64).sqrt());
            let c = gaussian_vector(&mut rng, n, 1.0);
            let lambda = rng.random_range(0.1..0.5);
            let f = FunctionDescriptor::quadratic(Matrix::identity(n, n), -c)?;
            let g = FunctionDescriptor::l1(lambda, m)?;
            ProblemSpec::new(spec.to_string(), f, g, a, Matrix::from_diagonal_element(m, m, -1.0), Vector::zeros(m))?
        }
        GeneratorKind::BoxQp => {
            let n = dims[0];
            let f = least_squares_quadratic(&mut rng, n, 0.1)?;
            let lower = Vector::from_fn(n, |_, _| -rng.random_range(0.2..1.0));
            let upper = Vector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
            let g = FunctionDescriptor::boxed(lower, upper)?;
            ProblemSpec::new(spec.to_string(), f, g, Matrix::identity(n, n), Matrix::from_diagonal_element(n, n, -1.0), Vector::zeros(n))?
        }
        GeneratorKind::ConsensusLs => {
            let (nx, ny, m) = (dims[0], dims[1], dims[2]);
            let f = least_squares_quadratic(&mut rng, nx, 0.1)?;
            let g = least_squares_quadratic(&mut rng, ny, 0.1)?;
            let a = gaussian_matrix(&mut rng, m, nx, 1.0 / (m as f64).sqrt());
            let b_mat = gaussian_matrix(&mut rng, m, ny, 1.0 / (m as f64).sqrt());
            let x_hat = gaussian_vector(&mut rng, nx, 1.0);
            let y_hat = gaussian_vector(&mut rng, ny, 1.0);
            let b = &a * &x_hat + &b_mat * &y_hat;
            ProblemSpec::new(spec.to_string(), f, g, a, b_mat, b)?
        }
    };
    problem.seed = Some(seed);
    Ok(problem)
}

/// Residuals of the KKT system `0 in df(x) - A'g`, `0 in dg(y) - B'g`,
/// `Ax + By - b = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub res_x: f64,
    pub res_y: f64,
    pub res_gamma: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.res_x.max(self.res_y).max(self.res_gamma)
    }
}

pub fn kkt_residual(problem: &ProblemSpec, x: &Vector, y: &Vector, gamma: &Vector) -> Result<KktResidual> {
    if gamma.len() != problem.m() {
        return Err(Error::DimensionMismatch { expected: problem.m(), found: gamma.len() });
    }
    let res_x = problem.f.subdiff_distance(x, &(problem.a.transpose() * gamma))?;
    let res_y = problem.g.subdiff_distance(y, &(problem.b_mat.transpose() * gamma))?;
    let res_gamma = problem.constraint_residual(x, y).norm();
    Ok(KktResidual { res_x, res_y, res_gamma })
}

/// High-accuracy KKT point used for `d0` and Fejer-type checks.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub x: Vector,
    pub y: Vector,
    pub gamma: Vector,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves the KKT system directly when `f` and `g` are both smooth
/// quadratics, otherwise runs a long standard ADMM (with a linearizing
/// proximal term where a subproblem would not be separable) until the KKT
/// residual drops below `accuracy`.
pub fn reference_solve(problem: &ProblemSpec, accuracy: f64) -> Result<ReferenceSolution> {
    if !(accuracy >= 1e-12) {
        return Err(Error::InvalidProblem(format!("reference accuracy must be >= 1e-12, got {accuracy}")));
    }
    if problem.f.is_smooth_quadratic() && problem.g.is_smooth_quadratic() {
        if let Some(sol) = direct_kkt_solve(problem)? {
            if sol.kkt_residual <= accuracy {
                return Ok(sol);
            }
        }
    }
    reference_admm(problem, accuracy)
}

fn quadratic_parts(d: &FunctionDescriptor) -> (Matrix, Vector) {
    match d.kind() {
        FunctionKind::Quadratic { q_mat, q } => (q_mat.clone(), q.clone()),
        _ => (Matrix::zeros(d.dim(), d.dim()), Vector::zeros(d.dim())),
    }
}

fn direct_kkt_solve(problem: &ProblemSpec) -> Result<Option<ReferenceSolution>> {
    let (nx, ny, m) = (problem.nx(), problem.ny(), problem.m());
    let n = nx + ny + m;
    let (qf, lf) = quadratic_parts(&problem.f);
    let (qg, lg) = quadratic_parts(&problem.g);
    let mut k = Matrix::zeros(n, n);
    k.view_mut((0, 0), (nx, nx)).copy_from(&qf);
    k.view_mut((nx, nx), (ny, ny)).copy_from(&qg);
    k.view_mut((0, nx + ny), (nx, m)).copy_from(&(-problem.a.transpose()));
    k.view_mut((nx, nx + ny), (ny, m)).copy_from(&(-problem.b_mat.transpose()));
    k.view_mut((nx + ny, 0), (m, nx)).copy_from(&problem.a);
    k.view_mut((nx + ny, nx), (m, ny)).copy_from(&problem.b_mat);
    let mut rhs = Vector::zeros(n);
    rhs.rows_mut(0, nx).copy_from(&(-lf));
    rhs.rows_mut(nx, ny).copy_from(&(-lg));
    rhs.rows_mut(nx + ny, m).copy_from(&problem.b);
    let lu = LU::new(k.clone());
    let Some(mut sol) = lu.solve(&rhs) else { return Ok(None) };
    // two rounds of iterative refinement
    for _ in 0..2 {
        let resid = &rhs - &k * &sol;
        match lu.solve(&resid) {
            Some(delta) => sol += delta,
            None => break,
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let x = sol.rows(0, nx).into_owned();
    let y = sol.rows(nx, ny).into_owned();
    let gamma = sol.rows(nx + ny, m).into_owned();
    let res = kkt_residual(problem, &x, &y, &gamma)?.max();
    Ok(Some(ReferenceSolution { x, y, gamma, kkt_residual: res, iterations: 0 }))
}

/// Proximal metric that keeps a block subproblem solvable: zero when the
/// plain ADMM subproblem is already supported, otherwise the linearizing
/// `tau I - beta K'K`.
fn reference_prox(d: &FunctionDescriptor, k: &Matrix, beta: f64) -> Matrix {
    let n = k.ncols();
    let gram = k.transpose() * k * beta;
    let zero = Matrix::zeros(n, n);
    let probe_c = Vector::from_element(n, 1.0);
    if d.minimize_with_quadratic(&gram, &probe_c, &Vector::zeros(n)).is_ok() {
        return zero;
    }
    let lmax = nalgebra::SymmetricEigen::new(gram.clone()).eigenvalues.max().max(0.0);
    let tau = 1.01 * lmax + 1e-3 * beta;
    Matrix::identity(n, n) * tau - gram
}

fn reference_admm(problem: &ProblemSpec, accuracy: f64) -> Result<ReferenceSolution> {
    let beta = 1.0;
    let (a, bm, b) = (&problem.a, &problem.b_mat, &problem.b);
    let r = reference_prox(&problem.f, a, beta);
    let s = reference_prox(&problem.g, bm, beta);
    let px = a.transpose() * a * beta + &r;
    let py = bm.transpose() * bm * beta + &s;
    let mut x = Vector::zeros(problem.nx());
    let mut y = Vector::zeros(problem.ny());
    let mut gamma = Vector::zeros(problem.m());
    let mut best = f64::INFINITY;
    for it in 1..=REFERENCE_MAX_ITERS {
        let cx = a.transpose() * (&gamma - (bm * &y - b) * beta) + &r * &x;
        let x_new = problem.f.minimize_with_quadratic(&px, &cx, &x)?;
        let cy = bm.transpose() * (&gamma - (a * &x_new - b) * beta) + &s * &y;
        let y_new = problem.g.minimize_with_quadratic(&py, &cy, &y)?;
        gamma -= (a * &x_new + bm * &y_new - b) * beta;
        x = x_new;
        y = y_new;
        let res = kkt_residual(problem, &x, &y, &gamma)?.max();
        best = best.min(res);
        if res <= accuracy {
            return Ok(ReferenceSolution { x, y, gamma, kkt_residual: res, iterations: it });
        }
    }
    Err(Error::ReferenceCap { iterations: REFERENCE_MAX_ITERS, residual: best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn generation_is_deterministic() {
        let p1 = generate(GeneratorKind::Lasso, &[10, 5], 7).unwrap();
        let p2 = generate(GeneratorKind::Lasso, &[10, 5], 7).unwrap();
        assert_eq!(p1.to_json().unwrap(), p2.to_json().unwrap());
        let p3 = generate(GeneratorKind::Lasso, &[10, 5], 8).unwrap();
        assert_ne!(p1.to_json().unwrap(), p3.to_json().unwrap());
    }

    #[test]
    fn generator_rejects_bad_dims() {
        assert!(generate(GeneratorKind::Lasso, &[10], 1).is_err());
        assert!(generate(GeneratorKind::BoxQp, &[0], 1).is_err());
        assert!(generate(GeneratorKind::ConsensusLs, &[10, 10, 201], 1).is_err());
    }

    #[test]
    fn consensus_is_feasible_by_construction() {
        // b = A x_hat + B y_hat, regenerate the same stream to recover the pair
        let p = generate(GeneratorKind::ConsensusLs, &[6, 4, 3], 11).unwrap();
        let sol = reference_solve(&p, 1e-12).unwrap();
        assert!(sol.kkt_residual <= 1e-12);
        assert_eq!(sol.iterations, 0, "quadratic-quadratic instances use the direct KKT solve");
    }

    #[test]
    fn degenerate_box_pins_y() {
        let n = 3;
        let l = v(&[0.3, -0.2, 0.5]);
        let f = FunctionDescriptor::quadratic(Matrix::identity(n, n), v(&[1.0, -2.0, 0.5])).unwrap();
        let g = FunctionDescriptor::boxed(l.clone(), l.clone()).unwrap();
        let p = ProblemSpec::new("pinned", f, g, Matrix::identity(n, n), -Matrix::identity(n, n), Vector::zeros(n)).unwrap();
        let sol = reference_solve(&p, 1e-10).unwrap();
        assert!((&sol.y - &l).amax() < 1e-12);
        assert!(sol.kkt_residual <= 1e-10);
    }

    #[test]
    fn kkt_residual_closed_forms() {
        let q = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let f = FunctionDescriptor::quadratic(q.clone(), v(&[1.0, 1.0])).unwrap();
        let g = FunctionDescriptor::l1(1.0, 2).unwrap();
        let a = Matrix::identity(2, 2);
        let p = ProblemSpec::new("t", f, g, a, -Matrix::identity(2, 2), Vector::zeros(2)).unwrap();
        let x = v(&[0.5, -1.0]);
        let gamma = v(&[0.2, 0.3]);
        let res = kkt_residual(&p, &x, &Vector::zeros(2), &gamma).unwrap();
        let expected = (&q * &x + v(&[1.0, 1.0]) - &gamma).norm();
        assert_eq!(res.res_x, expected);
        // |B'gamma|_inf <= lambda at y = 0
        assert_eq!(res.res_y, 0.0);
    }

    #[test]
    fn subgradient_examples() {
        let g = FunctionDescriptor::l1(1.0, 3).unwrap();
        let x = v(&[2.0, 0.0, -1.0]);
        assert_eq!(g.subgradient(&x).unwrap(), v(&[1.0, 0.0, -1.0]));
        let b = FunctionDescriptor::boxed(v(&[-1.0, -1.0]), v(&[1.0, 1.0])).unwrap();
        assert_eq!(b.subgradient(&v(&[0.2, -0.3])).unwrap(), Vector::zeros(2));
        assert!(matches!(b.subgradient(&v(&[2.0, 0.0])), Err(Error::OutsideDomain(_))));
        let q = FunctionDescriptor::quadratic(Matrix::identity(2, 2) * 3.0, v(&[1.0, 0.0])).unwrap();
        assert_eq!(q.subgradient(&v(&[1.0, 2.0])).unwrap(), v(&[4.0, 6.0]));
    }

    #[test]
    fn sampled_subgradients_are_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = FunctionDescriptor::l1(0.7, 4).unwrap();
        let b = FunctionDescriptor::boxed(v(&[-1.0, 0.0, 0.0, -2.0]), v(&[1.0, 0.0, 1.0, 2.0])).unwrap();
        for _ in 0..100 {
            let x = v(&[0.0, 1.0, -0.5, 0.0]);
            let s = g.subgradient_sample(&x, &mut rng).unwrap();
            assert_eq!(g.subdiff_distance(&x, &s).unwrap(), 0.0);
            let y = v(&[-1.0, 0.0, 1.0, 0.3]);
            let s = b.subgradient_sample(&y, &mut rng).unwrap();
            assert_eq!(b.subdiff_distance(&y, &s).unwrap(), 0.0);
        }
    }

    #[test]
    fn l1_requires_diagonal_curvature() {
        let g = FunctionDescriptor::l1(0.5, 2).unwrap();
        let p = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let err = g.minimize_with_quadratic(&p, &v(&[1.0, 1.0]), &Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedSubproblem(_)));
        let p = Matrix::from_diagonal(&v(&[2.0, 4.0]));
        let x = g.minimize_with_quadratic(&p, &v(&[1.5, 0.3]), &Vector::zeros(2)).unwrap();
        assert_eq!(x, v(&[0.5, 0.0]));
    }

    #[test]
    fn box_minimizer_is_clipped() {
        let b = FunctionDescriptor::boxed(v(&[-1.0, -1.0, -1.0]), v(&[1.0, 1.0, 1.0])).unwrap();
        let p = Matrix::from_diagonal(&v(&[1.0, 2.0, 0.5]));
        let x = b.minimize_with_quadratic(&p, &v(&[3.0, 1.0, -2.0]), &Vector::zeros(3)).unwrap();
        assert_eq!(x, v(&[1.0, 0.5, -1.0]));
    }

    #[test]
    fn json_round_trip_and_field_errors() {
        let p = generate(GeneratorKind::BoxQp, &[4], 2).unwrap();
        let back = ProblemSpec::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), p.to_json().unwrap());
        let bad = r#"{"name":"x","A":[[1.0]],"B":[[1.0]],"b":[0.0],"f":{"type":"l1","lambda":-1.0},"g":{"type":"zero"}}"#;
        let msg = ProblemSpec::from_json(bad).unwrap_err().to_string();
        assert!(msg.contains("`f`"), "{msg}");
    }

    #[test]
    fn generator_spec_parses() {
        let g = GeneratorSpec::parse("gen:lasso:10x5:7").unwrap();
        assert_eq!(g, GeneratorSpec { kind: GeneratorKind::Lasso, dims: vec![10, 5], seed: 7 });
        assert_eq!(g.to_string(), "gen:lasso:10x5:7");
        assert!(GeneratorSpec::parse("gen:nope:3:1").is_err());
        assert!(GeneratorSpec::parse("lasso:10x5:7").is_err());
    }
}
