//! Small dense symmetric linear algebra and zero-mean Gaussian helpers.
//!
//! Every inverse, quadratic form and determinant in the crate goes through a
//! Cholesky factor held by [`PdMatrix`]; no explicit inverse is formed on the
//! hot paths.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// A square matrix whose entries are symmetric to within roundoff.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, rejecting it if it is not square or not symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let k = m.nrows();
        for i in 0..k {
            for j in (i + 1)..k {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if !(gap <= SYMMETRY_TOL * m[(i, j)].abs().max(1.0)) {
                    return Err(Error::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(Self(m))
    }

    /// Replaces `m` by `(m + mᵀ) / 2`.
    pub fn symmetrized(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let t = m.transpose();
        Ok(Self((m + t) * 0.5))
    }

    pub fn identity(k: usize) -> Self {
        Self(DMatrix::identity(k, k))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// A symmetric positive definite matrix together with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PdMatrix {
    sym: SymMatrix,
    factor: DMatrix<f64>,
}

impl PdMatrix {
    /// Factors `sym`; a non-positive (or non-finite) pivot means the matrix is
    /// not positive definite.
    pub fn new(sym: SymMatrix) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(sym.matrix().clone()).ok_or(Error::NotPositiveDefinite)?;
        let factor = chol.unpack();
        if factor.diagonal().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { sym, factor })
    }

    /// Symmetrizes `m` and factors it.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        Self::new(SymMatrix::symmetrized(m)?)
    }

    pub fn identity(k: usize) -> Self {
        Self {
            sym: SymMatrix::identity(k),
            factor: DMatrix::identity(k, k),
        }
    }

    pub fn dim(&self) -> usize {
        self.sym.dim()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.sym.matrix()
    }

    pub fn sym(&self) -> &SymMatrix {
        &self.sym
    }

    /// Lower-triangular `L` with `L Lᵀ = A`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        chol_solve(self, b)
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: b.nrows(),
            });
        }
        let y = self
            .factor
            .solve_lower_triangular(b)
            .ok_or(Error::NotPositiveDefinite)?;
        self.factor
            .tr_solve_lower_triangular(&y)
            .ok_or(Error::NotPositiveDefinite)
    }

    /// `xᵀ A⁻¹ x`, computed as `‖L⁻¹x‖²`.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let y = self
            .factor
            .solve_lower_triangular(x)
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(y.norm_squared())
    }

    pub fn log_det(&self) -> f64 {
        log_det(self)
    }

    /// Explicit inverse. Only used where a full precision matrix is the
    /// requested output.
    pub fn inverse(&self) -> DMatrix<f64> {
        let k = self.dim();
        let inv = self
            .solve_matrix(&DMatrix::identity(k, k))
            .expect("identity has matching dimension");
        (inv.clone() + inv.transpose()) * 0.5
    }

    /// Leading `k × k` principal block (positive definite whenever `self` is).
    pub fn leading(&self, k: usize) -> Result<PdMatrix> {
        if k == 0 || k > self.dim() {
            return Err(Error::IndexOutOfRange {
                index: k,
                dim: self.dim(),
            });
        }
        Ok(Self {
            sym: SymMatrix(self.matrix().view((0, 0), (k, k)).into_owned()),
            factor: self.factor.view((0, 0), (k, k)).into_owned(),
        })
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Solves `A x = b` by forward and back substitution on the Cholesky factor.
pub fn chol_solve(a: &PdMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.len(),
        });
    }
    let y = a
        .factor
        .solve_lower_triangular(b)
        .ok_or(Error::NotPositiveDefinite)?;
    a.factor
        .tr_solve_lower_triangular(&y)
        .ok_or(Error::NotPositiveDefinite)
}

pub fn log_det(a: &PdMatrix) -> f64 {
    2.0 * a.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `KL(N(0, s1) ‖ N(0, s2))`.
pub fn kl_zero_mean_gaussian(s1: &PdMatrix, s2: &PdMatrix) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::DimensionMismatch {
            expected: s1.dim(),
            found: s2.dim(),
        });
    }
    let k = s1.dim() as f64;
    let trace = s2.solve_matrix(s1.matrix())?.trace();
    Ok(0.5 * (trace - k + s2.log_det() - s1.log_det()))
}

/// Coefficients and residual variance of a leave-one-out linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionParams {
    coeffs: DVector<f64>,
    residual_var: f64,
}

impl RegressionParams {
    pub fn new(coeffs: DVector<f64>, residual_var: f64) -> Result<Self> {
        if !(residual_var > 0.0 && residual_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "residual variance must be positive, got {residual_var}"
            )));
        }
        Ok(Self {
            coeffs,
            residual_var,
        })
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn residual_var(&self) -> f64 {
        self.residual_var
    }
}

/// One leave-one-out model per worker; entry `k` predicts worker `k` from the
/// other workers in ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SslModelSet(Vec<RegressionParams>);

impl SslModelSet {
    pub fn new(models: Vec<RegressionParams>) -> Result<Self> {
        let k = models.len();
        if k == 0 {
            return Err(Error::InvalidParameter("empty model set".into()));
        }
        for m in &models {
            if m.coeffs.len() != k - 1 {
                return Err(Error::DimensionMismatch {
                    expected: k - 1,
                    found: m.coeffs.len(),
                });
            }
        }
        Ok(Self(models))
    }

    pub fn num_workers(&self) -> usize {
        self.0.len()
    }

    pub fn models(&self) -> &[RegressionParams] {
        &self.0
    }

    pub fn get(&self, k: usize) -> Option<&RegressionParams> {
        self.0.get(k)
    }
}

/// Position of worker `other` inside the coefficient vector of model `k`.
#[inline]
pub(crate) fn loo_position(k: usize, other: usize) -> usize {
    debug_assert_ne!(k, other);
    if other < k {
        other
    } else {
        other - 1
    }
}

/// `m` with row and column `k` removed.
pub(crate) fn without_row_col(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    m.clone().remove_row(k).remove_column(k)
}

/// Column `k` of `m` with entry `k` removed.
pub(crate) fn column_without(m: &DMatrix<f64>, k: usize) -> DVector<f64> {
    m.column(k).into_owned().remove_row(k)
}

/// Population regression of coordinate `k` on the others under `N(0, s)`:
/// `u = S₋ₖ₋ₖ⁻¹ S₋ₖₖ`, `ℓ = Sₖₖ − Sₖ₋ₖ u`.
pub fn regression_params_from_cov(s: &PdMatrix, k: usize) -> Result<RegressionParams> {
    let dim = s.dim();
    if dim < 2 {
        return Err(Error::InvalidParameter(
            "leave-one-out regression needs at least two workers".into(),
        ));
    }
    if k >= dim {
        return Err(Error::IndexOutOfRange { index: k, dim });
    }
    let rest = PdMatrix::new(SymMatrix(without_row_col(s.matrix(), k)))?;
    let cross = column_without(s.matrix(), k);
    let u = rest.solve(&cross)?;
    let ell = s.matrix()[(k, k)] - cross.dot(&u);
    RegressionParams::new(u, ell)
}

/// Assembles the matrix whose row `k` is `(1/ℓₖ)·(e_k − u⁽ᵏ⁾ placed off-diagonal)`.
///
/// For models derived from one covariance this is exactly its precision
/// matrix. The result is not symmetrized: inconsistent models give an
/// asymmetric matrix.
pub fn precision_from_regression_params(models: &SslModelSet) -> Result<DMatrix<f64>> {
    let k = models.num_workers();
    let mut out = DMatrix::zeros(k, k);
    for (row, m) in models.models().iter().enumerate() {
        let ell = m.residual_var();
        if !(ell > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "residual variance of worker {row} is not positive"
            )));
        }
        out[(row, row)] = 1.0 / ell;
        for col in (0..k).filter(|&c| c != row) {
            out[(row, col)] = -m.coeffs()[loo_position(row, col)] / ell;
        }
    }
    Ok(out)
}

/// Draws `L z` with `z` i.i.d. standard normal.
pub fn sample_mvn_zero_mean<R: Rng + ?Sized>(s: &PdMatrix, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(s.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    s.factor() * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_pd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m2() -> PdMatrix {
        PdMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0])).unwrap()
    }

    #[test]
    fn solve_identity_and_two_by_two() {
        let x = chol_solve(&PdMatrix::identity(3), &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let x = chol_solve(&m2(), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((x[0] - 0.25).abs() < 1e-15 && (x[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn solve_rejects_wrong_length() {
        let err = chol_solve(&m2(), &DVector::from_vec(vec![1.0])).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, found: 1 });
    }

    #[test]
    fn solve_residual_random_k10() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_pd(10, &mut rng);
        let b = DVector::from_fn(10, |i, _| (i as f64) - 3.5);
        let x = chol_solve(&a, &b).unwrap();
        assert!((a.matrix() * x - &b).norm() <= 1e-8 * b.norm());
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(log_det(&PdMatrix::identity(4)), 0.0);
        let two = PdMatrix::from_matrix(DMatrix::identity(3, 3) * 2.0).unwrap();
        assert!((log_det(&two) - 3.0 * 2f64.ln()).abs() < 1e-14);
        assert!((log_det(&m2()) - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn construction_errors() {
        let non_sym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(SymMatrix::new(non_sym), Err(Error::NotSymmetric { .. })));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(PdMatrix::from_matrix(indefinite).unwrap_err(), Error::NotPositiveDefinite);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(PdMatrix::from_matrix(singular).is_err());
        assert!(matches!(
            SymMatrix::new(DMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn factor_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_pd(12, &mut rng);
        let l = a.factor();
        let rel = (l * l.transpose() - a.matrix()).norm() / a.matrix().norm();
        assert!(rel < 1e-10);
        assert!(l.diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn kl_examples() {
        let a = m2();
        assert!(kl_zero_mean_gaussian(&a, &a).unwrap().abs() < 1e-14);
        let s2 = PdMatrix::from_matrix(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let kl = kl_zero_mean_gaussian(&PdMatrix::identity(1), &s2).unwrap();
        assert!((kl - 0.5 * (0.5 - 1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((kl - 0.09657).abs() < 1e-5);
        assert!(kl_zero_mean_gaussian(&PdMatrix::identity(2), &PdMatrix::identity(3)).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let s1 = random_pd(4, &mut rng);
        let s2 = random_pd(4, &mut rng);
        let log_density = |s: &PdMatrix, x: &DVector<f64>| {
            -0.5 * (s.inv_quad_form(x).unwrap() + s.log_det())
        };
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let x = sample_mvn_zero_mean(&s1, &mut rng);
                log_density(&s1, &x) - log_density(&s2, &x)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let exact = kl_zero_mean_gaussian(&s1, &s2).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn regression_params_examples() {
        let p = regression_params_from_cov(&m2(), 0).unwrap();
        assert!((p.coeffs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.residual_var() - 8.0 / 3.0).abs() < 1e-14);

        let iso = PdMatrix::from_matrix(DMatrix::identity(4, 4) * 2.5).unwrap();
        for k in 0..4 {
            let p = regression_params_from_cov(&iso, k).unwrap();
            assert!(p.coeffs().iter().all(|c| *c == 0.0));
            assert_eq!(p.residual_var(), 2.5);
        }
        assert!(matches!(
            regression_params_from_cov(&m2(), 2),
            Err(Error::IndexOutOfRange { index: 2, dim: 2 })
        ));
        assert!(regression_params_from_cov(&PdMatrix::identity(1), 0).is_err());
    }

    /// Least squares oracle: minimize E[(A_k − uᵀA_{−k})²] by forming the
    /// normal equations from the full covariance with a generic LU solve.
    #[test]
    fn residual_var_is_least_squares_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_pd(8, &mut rng);
        for k in 0..8 {
            let idx: Vec<usize> = (0..8).filter(|&j| j != k).collect();
            let gram = DMatrix::from_fn(7, 7, |i, j| s.matrix()[(idx[i], idx[j])]);
            let cross = DVector::from_fn(7, |i, _| s.matrix()[(idx[i], k)]);
            let u = gram.clone().lu().solve(&cross).unwrap();
            let min = s.matrix()[(k, k)] - 2.0 * u.dot(&cross) + (u.transpose() * &gram * &u)[0];
            let p = regression_params_from_cov(&s, k).unwrap();
            assert!((p.residual_var() - min).abs() < 1e-8);
            assert!((p.coeffs() - u).amax() < 1e-8);
        }
    }

    #[test]
    fn precision_examples() {
        let models = SslModelSet::new(
            (0..2).map(|k| regression_params_from_cov(&m2(), k).unwrap()).collect(),
        )
        .unwrap();
        let p = precision_from_regression_params(&models).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.375, -0.125, -0.125, 0.375]);
        assert!((p - expected).amax() < 1e-15);

        let flat = SslModelSet::new(
            (0..3)
                .map(|_| RegressionParams::new(DVector::zeros(2), 4.0).unwrap())
                .collect(),
        )
        .unwrap();
        let p = precision_from_regression_params(&flat).unwrap();
        assert!((p - DMatrix::identity(3, 3) * 0.25).amax() == 0.0);
    }

    #[test]
    fn precision_round_trip_k12() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_pd(12, &mut rng);
        let models = SslModelSet::new(
            (0..12).map(|k| regression_params_from_cov(&s, k).unwrap()).collect(),
        )
        .unwrap();
        let p = precision_from_regression_params(&models).unwrap();
        assert!((p - s.inverse()).amax() < 1e-8);
    }

    #[test]
    fn model_set_validation() {
        assert!(SslModelSet::new(vec![]).is_err());
        let bad = vec![
            RegressionParams::new(DVector::zeros(2), 1.0).unwrap(),
            RegressionParams::new(DVector::zeros(1), 1.0).unwrap(),
        ];
        assert!(SslModelSet::new(bad).is_err());
        assert!(RegressionParams::new(DVector::zeros(1), 0.0).is_err());
        assert!(RegressionParams::new(DVector::zeros(1), f64::NAN).is_err());
    }

    #[test]
    fn identity_sample_is_raw_normal_draw() {
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let x = sample_mvn_zero_mean(&PdMatrix::identity(3), &mut r1);
        let raw: Vec<f64> = (0..3).map(|_| r2.sample(StandardNormal)).collect();
        assert_eq!(x.as_slice(), raw.as_slice());
    }

    #[test]
    fn sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let four = PdMatrix::from_matrix(DMatrix::from_element(1, 1, 4.0)).unwrap();
        let var = (0..n)
            .map(|_| sample_mvn_zero_mean(&four, &mut rng)[0].powi(2))
            .sum::<f64>()
            / n as f64;
        assert!((3.9..=4.1).contains(&var), "{var}");

        let s = m2();
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let x = sample_mvn_zero_mean(&s, &mut rng);
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!((acc - s.matrix()).amax() < 0.1);
    }

    #[test]
    fn leading_block_matches_refactorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_pd(6, &mut rng);
        let lead = s.leading(4).unwrap();
        let direct = PdMatrix::from_matrix(s.matrix().view((0, 0), (4, 4)).into_owned()).unwrap();
        assert!((lead.factor() - direct.factor()).amax() < 1e-12);
        assert!(s.leading(7).is_err());
    }
}
