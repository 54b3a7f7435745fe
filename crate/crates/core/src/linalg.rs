//! Dense operator algebra with degenerate metrics.
//!
//! Every metric in the solver is a selfadjoint positive semidefinite matrix
//! `M`, which induces the seminorm `sqrt(<Mz, z>)` and the extended dual
//! seminorm `sup { <r, z'> : |z'|_M <= 1 }`. The dual seminorm is finite
//! exactly on the range of `M`, and for `r = Mw` it equals `|w|_M`. The
//! solver always knows such a preimage, so [`PsdOperator::dual_seminorm_of_image`]
//! is the primary route; [`PsdOperator::dual_seminorm_general`] goes through
//! the pseudo-inverse and is used where no single preimage exists (averaged
//! residuals) and for cross-checks.

use std::ops::Range;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative symmetry tolerance applied at construction.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest eigenvalue allowed for a semidefinite operator, relative to `max(1, |M|)`.
pub const PSD_TOL: f64 = 1e-10;
/// Smallest eigenvalue of a definite operator, relative to its largest one.
pub const DEFINITE_REL_TOL: f64 = 1e-12;
/// Eigenvalues below this fraction of the largest one span the null space.
pub const RANK_REL_TOL: f64 = 1e-12;
/// Least-squares residual threshold (relative to `|r|`) for range membership.
pub const RANGE_TOL: f64 = 1e-8;
/// Default slack for operator order comparisons.
pub const ORDER_SLACK_TOL: f64 = 1e-10;
/// Condition number above which an operator is not inverted.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceLabel {
    X,
    Y,
    Gamma,
    Product,
}

/// A finite-dimensional real space, identified by its role and dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorSpaceTag {
    pub dim: usize,
    pub label: SpaceLabel,
}

impl VectorSpaceTag {
    pub fn new(dim: usize, label: SpaceLabel) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(format!("{label:?} space must have dim >= 1")));
        }
        Ok(Self { dim, label })
    }

    /// The product space `X x Y x Gamma`.
    pub fn product(x: Self, y: Self, gamma: Self) -> Result<Self> {
        Self::new(x.dim + y.dim + gamma.dim, SpaceLabel::Product)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Definiteness {
    Semidefinite,
    Definite,
}

#[derive(Debug, Clone)]
struct Spectrum {
    values: Vector,
    vectors: Matrix,
}

impl Spectrum {
    fn of(matrix: &Matrix) -> Self {
        let eig = SymmetricEigen::new(matrix.clone());
        Self { values: eig.eigenvalues, vectors: eig.eigenvectors }
    }

    fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn scaled(&self, c: f64) -> Self {
        Self { values: &self.values * c, vectors: self.vectors.clone() }
    }
}

/// Selfadjoint positive (semi)definite operator on a tagged space.
///
/// Immutable after construction. The eigendecomposition computed by the
/// PSD check is cached and reused by the pseudo-inverse and by inversion.
#[derive(Debug, Clone)]
pub struct PsdOperator {
    space: VectorSpaceTag,
    matrix: Matrix,
    definiteness: Definiteness,
    spectrum: OnceLock<Spectrum>,
}

impl PsdOperator {
    /// Validates symmetry and (semi)definiteness, then symmetrizes the
    /// stored matrix exactly.
    pub fn new(space: VectorSpaceTag, matrix: Matrix, definiteness: Definiteness) -> Result<Self> {
        if matrix.nrows() != space.dim || matrix.ncols() != space.dim {
            return Err(Error::DimensionMismatch {
                expected: space.dim,
                found: if matrix.nrows() != space.dim { matrix.nrows() } else { matrix.ncols() },
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDimension("operator has non-finite entries".into()));
        }
        let scale = matrix.amax().max(1.0);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let op = Self { space, matrix, definiteness, spectrum: OnceLock::new() };
        op.check_definiteness()?;
        Ok(op)
    }

    pub fn semidefinite(space: VectorSpaceTag, matrix: Matrix) -> Result<Self> {
        Self::new(space, matrix, Definiteness::Semidefinite)
    }

    pub fn definite(space: VectorSpaceTag, matrix: Matrix) -> Result<Self> {
        Self::new(space, matrix, Definiteness::Definite)
    }

    pub fn identity(space: VectorSpaceTag) -> Self {
        Self::scaled_identity(space, 1.0).expect("identity is definite")
    }

    pub fn scaled_identity(space: VectorSpaceTag, scale: f64) -> Result<Self> {
        let definiteness = if scale > 0.0 { Definiteness::Definite } else { Definiteness::Semidefinite };
        let op = Self {
            space,
            matrix: Matrix::identity(space.dim, space.dim) * scale,
            definiteness,
            spectrum: OnceLock::new(),
        };
        let _ = op.spectrum.set(Spectrum {
            values: Vector::from_element(space.dim, scale),
            vectors: Matrix::identity(space.dim, space.dim),
        });
        op.check_definiteness()?;
        Ok(op)
    }

    pub fn zero(space: VectorSpaceTag) -> Self {
        Self::scaled_identity(space, 0.0).expect("zero is semidefinite")
    }

    pub fn diagonal(space: VectorSpaceTag, diag: &[f64]) -> Result<Self> {
        if diag.len() != space.dim {
            return Err(Error::DimensionMismatch { expected: space.dim, found: diag.len() });
        }
        let definiteness = if diag.iter().all(|&d| d > 0.0) {
            Definiteness::Definite
        } else {
            Definiteness::Semidefinite
        };
        Self::new(space, Matrix::from_diagonal(&Vector::from_column_slice(diag)), definiteness)
    }

    fn check_definiteness(&self) -> Result<()> {
        let spec = self.spectrum();
        let (min, max) = (spec.min(), spec.max());
        if min < -PSD_TOL * max.abs().max(1.0) {
            return Err(Error::NotPsd(min));
        }
        if self.definiteness == Definiteness::Definite && (max <= 0.0 || min < DEFINITE_REL_TOL * max) {
            return Err(Error::NotDefinite { min, max });
        }
        Ok(())
    }

    fn spectrum(&self) -> &Spectrum {
        self.spectrum.get_or_init(|| Spectrum::of(&self.matrix))
    }

    pub fn space(&self) -> VectorSpaceTag {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn definiteness(&self) -> Definiteness {
        self.definiteness
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.spectrum().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.spectrum().max()
    }

    /// `c * M` for `c >= 0`, reusing the cached spectrum.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::InvalidDimension(format!("operator scale must be finite and >= 0, got {c}")));
        }
        let definiteness = if c > 0.0 { self.definiteness } else { Definiteness::Semidefinite };
        let op = Self { space: self.space, matrix: &self.matrix * c, definiteness, spectrum: OnceLock::new() };
        let _ = op.spectrum.set(self.spectrum().scaled(c));
        Ok(op)
    }

    /// Same operator re-tagged onto another space of equal dimension.
    pub fn with_space(&self, space: VectorSpaceTag) -> Result<Self> {
        self.check_dim(space.dim)?;
        let mut op = self.clone();
        op.space = space;
        Ok(op)
    }

    /// Inverse of a definite operator via its eigendecomposition.
    pub fn inverse(&self) -> Result<Self> {
        let spec = self.spectrum();
        let (min, max) = (spec.min(), spec.max());
        if self.definiteness != Definiteness::Definite || min <= 0.0 {
            return Err(Error::NotDefinite { min, max });
        }
        let cond = max / min;
        if cond > MAX_CONDITION {
            return Err(Error::IllConditioned(cond));
        }
        let inv_values = spec.values.map(|v| 1.0 / v);
        let matrix = &spec.vectors * Matrix::from_diagonal(&inv_values) * spec.vectors.transpose();
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let op = Self { space: self.space, matrix, definiteness: Definiteness::Definite, spectrum: OnceLock::new() };
        let _ = op.spectrum.set(Spectrum { values: inv_values, vectors: spec.vectors.clone() });
        Ok(op)
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.space.dim {
            return Err(Error::DimensionMismatch { expected: self.space.dim, found });
        }
        Ok(())
    }

    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        self.check_dim(z.len())?;
        Ok(&self.matrix * z)
    }

    /// `<Mz, z>`, clamped at zero. Fails when the form is negative beyond
    /// `-1e-10 |M| |z|^2`.
    pub fn seminorm_sq(&self, z: &Vector) -> Result<f64> {
        self.check_dim(z.len())?;
        let q = z.dot(&(&self.matrix * z));
        if q < 0.0 {
            let allowed = PSD_TOL * self.matrix.norm() * z.norm_squared();
            if q < -allowed {
                return Err(Error::NegativeForm(q));
            }
            return Ok(0.0);
        }
        Ok(q)
    }

    pub fn seminorm(&self, z: &Vector) -> Result<f64> {
        self.seminorm_sq(z).map(f64::sqrt)
    }

    /// Dual seminorm of `M w`, which equals `|w|_M`.
    pub fn dual_seminorm_of_image(&self, w: &Vector) -> Result<f64> {
        self.seminorm(w)
    }

    /// Dual seminorm of an arbitrary `r`, through the minimum-norm solution
    /// of `M u = r`. Returns `+inf` when `r` is not in the range of `M`
    /// (least-squares residual above `tol * |r|`).
    pub fn dual_seminorm_general(&self, r: &Vector, tol: f64) -> Result<f64> {
        self.check_dim(r.len())?;
        let r_norm = r.norm();
        if r_norm == 0.0 {
            return Ok(0.0);
        }
        let spec = self.spectrum();
        let cutoff = RANK_REL_TOL * spec.max().max(0.0);
        let coeffs = spec.vectors.transpose() * r;
        let mut in_range = Vector::zeros(r.len());
        let mut value = 0.0;
        for (j, &lambda) in spec.values.iter().enumerate() {
            if lambda > cutoff && lambda > 0.0 {
                let c = coeffs[j];
                in_range.axpy(c, &spec.vectors.column(j), 1.0);
                value += c * c / lambda;
            }
        }
        let residual = (r - in_range).norm();
        if residual > tol * r_norm {
            return Ok(f64::INFINITY);
        }
        Ok(value.sqrt())
    }
}

/// `M <= N` in the Loewner order: the smallest eigenvalue of `N - M` is at
/// least `-slack_tol * (1 + |N - M|)`.
pub fn operator_leq(m: &PsdOperator, n: &PsdOperator, slack_tol: f64) -> Result<bool> {
    if m.dim() != n.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), found: n.dim() });
    }
    Ok(matrix_leq(m.matrix(), n.matrix(), slack_tol))
}

/// Loewner comparison on raw symmetric matrices of equal size.
pub fn matrix_leq(m: &Matrix, n: &Matrix, slack_tol: f64) -> bool {
    let diff = n - m;
    let diff = (&diff + diff.transpose()) * 0.5;
    let eig = SymmetricEigen::new(diff).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let norm = eig.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    min >= -slack_tol * (1.0 + norm)
}

/// Block-diagonal operator on a product space.
#[derive(Debug, Clone)]
pub struct BlockDiagOperator {
    blocks: Vec<PsdOperator>,
    offsets: Vec<usize>,
    space: VectorSpaceTag,
}

impl BlockDiagOperator {
    pub fn new(blocks: Vec<PsdOperator>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyBlocks);
        }
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        offsets.push(0);
        for b in &blocks {
            offsets.push(offsets.last().unwrap() + b.dim());
        }
        let label = if blocks.len() == 1 { blocks[0].space().label } else { SpaceLabel::Product };
        let space = VectorSpaceTag::new(*offsets.last().unwrap(), label)?;
        Ok(Self { blocks, offsets, space })
    }

    pub fn blocks(&self) -> &[PsdOperator] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &PsdOperator {
        &self.blocks[i]
    }

    pub fn space(&self) -> VectorSpaceTag {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn block_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found });
        }
        Ok(())
    }

    /// The `i`-th block component of a product-space vector.
    pub fn part(&self, z: &Vector, i: usize) -> Vector {
        let range = self.block_range(i);
        z.rows(range.start, range.len()).into_owned()
    }

    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        self.check_dim(z.len())?;
        let mut out = Vector::zeros(z.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let range = self.block_range(i);
            let part = b.apply(&self.part(z, i))?;
            out.rows_mut(range.start, range.len()).copy_from(&part);
        }
        Ok(out)
    }

    pub fn block_seminorms_sq(&self, z: &Vector) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        self.blocks.iter().enumerate().map(|(i, b)| b.seminorm_sq(&self.part(z, i))).collect()
    }

    pub fn seminorm_sq(&self, z: &Vector) -> Result<f64> {
        Ok(self.block_seminorms_sq(z)?.iter().sum())
    }

    pub fn seminorm(&self, z: &Vector) -> Result<f64> {
        self.seminorm_sq(z).map(f64::sqrt)
    }

    pub fn block_dual_seminorms(&self, r: &Vector, tol: f64) -> Result<Vec<f64>> {
        self.check_dim(r.len())?;
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.dual_seminorm_general(&self.part(r, i), tol))
            .collect()
    }

    /// Dual seminorm of a block-diagonal metric: root-sum-of-squares of the
    /// block dual seminorms.
    pub fn dual_seminorm_general(&self, r: &Vector, tol: f64) -> Result<f64> {
        let parts = self.block_dual_seminorms(r, tol)?;
        Ok(parts.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Blockwise Loewner comparison; block-diagonal operators compare
    /// exactly when every block does.
    pub fn leq(&self, other: &Self, slack_tol: f64) -> Result<bool> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::DimensionMismatch { expected: self.blocks.len(), found: other.blocks.len() });
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if !operator_leq(a, b, slack_tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let blocks = self.blocks.iter().map(|b| b.scaled(c)).collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    /// Scales each block by its own factor.
    pub fn scaled_blocks(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch { expected: self.blocks.len(), found: factors.len() });
        }
        let blocks =
            self.blocks.iter().zip(factors).map(|(b, &c)| b.scaled(c)).collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.dim(), self.dim());
        for (i, b) in self.blocks.iter().enumerate() {
            let range = self.block_range(i);
            out.view_mut((range.start, range.start), (range.len(), range.len())).copy_from(b.matrix());
        }
        out
    }
}

/// Builds the block-diagonal operator; fails on an empty list.
pub fn block_diag(blocks: Vec<PsdOperator>) -> Result<BlockDiagOperator> {
    BlockDiagOperator::new(blocks)
}

/// Concatenates vectors into one product-space vector.
pub fn concat(parts: &[&Vector]) -> Vector {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = Vector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(dim: usize) -> VectorSpaceTag {
        VectorSpaceTag::new(dim, SpaceLabel::X).unwrap()
    }

    fn diag(d: &[f64]) -> PsdOperator {
        PsdOperator::diagonal(space(d.len()), d).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn seminorm_examples() {
        let id = PsdOperator::identity(space(2));
        assert_eq!(id.seminorm(&v(&[3.0, 4.0])).unwrap(), 5.0);
        let m = diag(&[4.0, 0.0]);
        assert_eq!(m.seminorm(&v(&[0.0, 7.0])).unwrap(), 0.0);
        assert_eq!(m.seminorm(&v(&[1.0, 9.0])).unwrap(), 2.0);
    }

    #[test]
    fn seminorm_rejects_dimension_mismatch() {
        let id = PsdOperator::identity(space(2));
        assert!(matches!(id.seminorm(&v(&[1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn construction_rejects_indefinite_and_asymmetric() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(PsdOperator::semidefinite(space(2), m), Err(Error::NotPsd(_))));
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(PsdOperator::semidefinite(space(2), m), Err(Error::NotSymmetric(_))));
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(PsdOperator::definite(space(2), m), Err(Error::NotDefinite { .. })));
    }

    #[test]
    fn dual_of_image_examples() {
        let id = PsdOperator::identity(space(2));
        assert_eq!(id.dual_seminorm_of_image(&v(&[3.0, 4.0])).unwrap(), 5.0);
        let m = diag(&[4.0, 0.0]);
        assert_eq!(m.dual_seminorm_of_image(&v(&[0.5, 123.0])).unwrap(), 1.0);
        assert_eq!(m.dual_seminorm_of_image(&v(&[0.0, 0.0])).unwrap(), 0.0);
    }

    /// Brute-force sup of <r, z'> over sampled z' on the unit seminorm
    /// sphere of diag(4, 0); the free coordinate contributes nothing
    /// because r has no component there.
    #[test]
    fn dual_of_image_matches_sampled_sup() {
        let r = v(&[2.0, 0.0]);
        let mut best = f64::NEG_INFINITY;
        for i in 0..2000 {
            let t = i as f64 / 1999.0 * 2.0 - 1.0;
            // |z'|_M = 2|z1| = 1 at the boundary, z2 arbitrary
            let z = v(&[0.5 * t.signum(), 1e3 * t]);
            let m = diag(&[4.0, 0.0]);
            if m.seminorm(&z).unwrap() <= 1.0 + 1e-12 {
                best = best.max(r.dot(&z));
            }
        }
        assert!((best - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_general_examples() {
        let m = diag(&[4.0, 0.0]);
        assert!((m.dual_seminorm_general(&v(&[2.0, 0.0]), RANGE_TOL).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.dual_seminorm_general(&v(&[0.0, 1.0]), RANGE_TOL).unwrap(), f64::INFINITY);
        let id = PsdOperator::identity(space(2));
        assert!((id.dual_seminorm_general(&v(&[3.0, 4.0]), RANGE_TOL).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn order_examples() {
        let i = PsdOperator::identity(space(2));
        let two = i.scaled(2.0).unwrap();
        assert!(operator_leq(&i, &two, ORDER_SLACK_TOL).unwrap());
        assert!(!operator_leq(&two, &i, ORDER_SLACK_TOL).unwrap());
        assert!(!operator_leq(&diag(&[1.0, 3.0]), &diag(&[2.0, 2.0]), ORDER_SLACK_TOL).unwrap());
        let three = PsdOperator::identity(space(3));
        assert!(operator_leq(&i, &three, ORDER_SLACK_TOL).is_err());
    }

    #[test]
    fn block_diag_examples() {
        let one = |d: f64| diag(&[d]);
        let b = block_diag(vec![one(1.0), one(1.0), one(1.0)]).unwrap();
        assert!((b.seminorm(&v(&[1.0, 1.0, 1.0])).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let b = block_diag(vec![one(4.0), one(0.0), one(1.0)]).unwrap();
        assert!((b.seminorm(&v(&[1.0, 5.0, 2.0])).unwrap() - 8f64.sqrt()).abs() < 1e-15);
        let single = block_diag(vec![diag(&[2.0, 3.0])]).unwrap();
        let z = v(&[1.0, -2.0]);
        assert_eq!(single.seminorm(&z).unwrap(), diag(&[2.0, 3.0]).seminorm(&z).unwrap());
        assert!(matches!(block_diag(vec![]), Err(Error::EmptyBlocks)));
    }

    #[test]
    fn inverse_checks_conditioning() {
        let h = diag(&[2.0, 4.0]);
        let inv = h.inverse().unwrap();
        assert!((inv.matrix() - Matrix::from_diagonal(&v(&[0.5, 0.25]))).amax() < 1e-15);
        let near_singular = Matrix::from_diagonal(&v(&[1.0, 1e-13]));
        assert!(PsdOperator::definite(space(2), near_singular.clone()).is_err());
        let semi = PsdOperator::semidefinite(space(2), near_singular).unwrap();
        assert!(matches!(semi.inverse(), Err(Error::NotDefinite { .. })));
        assert!(matches!(diag(&[1.0, 0.0]).inverse(), Err(Error::NotDefinite { .. })));
    }

    #[test]
    fn scaled_reuses_spectrum() {
        let m = PsdOperator::semidefinite(space(2), Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let s = m.scaled(3.0).unwrap();
        assert!((s.max_eigenvalue() - 9.0).abs() < 1e-12);
        assert!((s.min_eigenvalue() - 3.0).abs() < 1e-12);
    }
}
