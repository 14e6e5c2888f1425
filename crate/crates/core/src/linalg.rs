//! Dense linear-algebra kernels: pseudoinverse, orthogonal projections,
//! numerical rank and norms.
//!
//! Every routine is a pure function of its inputs. Singular-value cutoffs are
//! relative to the largest singular value of the argument.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{DdklError, Result};
use crate::scalar::Real;

/// Default relative singular-value cutoff.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Condition number above which Gram-type inverses are refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Returns an error if any entry is NaN or infinite.
pub fn ensure_finite<T: Real>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DdklError::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

/// Singular values in descending order.
pub fn singular_values<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut sv: Vec<T> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(sv)
}

/// Largest singular value (spectral norm).
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    singular_values(m).iter().copied().next().unwrap_or_else(T::zero)
}

/// The `min(rows, cols)`-th singular value.
pub fn sigma_min<T: Real>(m: &DMatrix<T>) -> T {
    singular_values(m).iter().copied().last().unwrap_or_else(T::zero)
}

/// Moore–Penrose pseudoinverse via SVD with relative cutoff `tol`.
pub fn pinv<T: Real>(m: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    ensure_finite(m, "pseudoinverse argument")?;
    if tol <= T::zero() {
        return Err(DdklError::InvalidInput("pinv tolerance must be positive".into()));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let cutoff = tol * s_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > T::zero() {
            let v_col = v_t.row(idx).transpose();
            let u_col = u.column(idx);
            out.ger(T::one() / s, &v_col, &u_col, T::one());
        }
    }
    Ok(out)
}

/// Numerical rank: number of singular values strictly above `tol * sigma_max`.
pub fn rank<T: Real>(m: &DMatrix<T>, tol: T) -> Result<usize> {
    ensure_finite(m, "rank argument")?;
    let sv = singular_values(m);
    let s_max = match sv.iter().next() {
        Some(&s) if s > T::zero() => s,
        _ => return Ok(0),
    };
    Ok(sv.iter().filter(|&&s| s > tol * s_max).count())
}

/// Frobenius norm.
pub fn frobenius<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}

/// Orthogonal projector onto the row space of `c`: `Cᵀ (C Cᵀ)⁻¹ C`.
///
/// `c` must have full row rank. The result is exactly symmetric.
pub fn orth_projection<T: Real>(c: &DMatrix<T>) -> Result<DMatrix<T>> {
    ensure_finite(c, "observation matrix")?;
    let r = rank(c, T::lit(DEFAULT_TOL))?;
    if r != c.nrows() {
        return Err(DdklError::RankDeficient {
            what: format!("observation matrix ({}x{}) row space", c.nrows(), c.ncols()),
            rank: r,
            required: c.nrows(),
        });
    }
    let gram = c * c.transpose();
    let gram_inv = spd_inverse(&gram, "C Cᵀ")?;
    let p = c.transpose() * gram_inv * c;
    Ok(symmetrize(&p))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] + m[(j, i)]) * half)
}

/// Condition number of a symmetric positive semi-definite matrix.
pub fn spd_condition<T: Real>(m: &DMatrix<T>) -> T {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(max, |a, b| a.min(b));
    if min <= T::zero() {
        T::max_value().unwrap_or_else(T::one)
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive-definite matrix by Cholesky.
///
/// On factorization failure a single jitter of `1e-12 * trace / dim` is added
/// to the diagonal. Matrices whose condition number exceeds
/// [`CONDITION_LIMIT`] are refused.
pub fn spd_inverse<T: Real>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    ensure_finite(m, what)?;
    let n = m.nrows();
    if n != m.ncols() {
        return Err(DdklError::dims(what, "square matrix", format!("{}x{}", n, m.ncols())));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let condition = spd_condition(m);
    if condition.as_f64() > CONDITION_LIMIT {
        return Err(DdklError::IllConditioned {
            what: what.to_string(),
            condition: condition.as_f64(),
            limit: CONDITION_LIMIT,
        });
    }
    let chol = match Cholesky::new(m.clone()) {
        Some(c) => c,
        None => {
            let jitter = T::lit(1e-12) * m.trace() / T::from_count(n);
            let mut shifted = m.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            Cholesky::new(shifted).ok_or_else(|| DdklError::IllConditioned {
                what: what.to_string(),
                condition: f64::INFINITY,
                limit: CONDITION_LIMIT,
            })?
        }
    };
    Ok(symmetrize(&chol.inverse()))
}

/// `(X Xᵀ)⁻¹` for a wide data matrix `x`.
pub fn gram_inverse<T: Real>(x: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    spd_inverse(&(x * x.transpose()), what)
}

/// Vertical concatenation `[a; b]`.
pub fn vstack<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() {
        return Err(DdklError::dims("vstack", a.ncols(), b.ncols()));
    }
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    Ok(out)
}

/// Vertical concatenation of any number of blocks with equal width.
pub fn vstack_all<T: Real>(blocks: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    if let Some(b) = blocks.iter().find(|b| b.ncols() != cols) {
        return Err(DdklError::dims("vstack", cols, b.ncols()));
    }
    let mut out = DMatrix::zeros(blocks.iter().map(|b| b.nrows()).sum(), cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    Ok(out)
}

/// Horizontal concatenation `[a, b]`.
pub fn hstack<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.nrows() != b.nrows() {
        return Err(DdklError::dims("hstack", a.nrows(), b.nrows()));
    }
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        frobenius(&(a - b)) / frobenius(b).max(1e-300)
    }

    #[test]
    fn pinv_of_identity_is_identity() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(pinv(&i2, 1e-12).unwrap(), i2);
    }

    #[test]
    fn pinv_of_projection_is_itself() {
        let d = dmatrix![1.0, 0.0; 0.0, 0.0];
        let p = pinv(&d, 1e-12).unwrap();
        assert!(frobenius(&(p - &d)) < 1e-15);
    }

    #[test]
    fn pinv_matches_adjugate_inverse() {
        // adj([[1,2],[3,4]]) / det = [[4,-2],[-3,1]] / -2
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        let expected = dmatrix![-2.0, 1.0; 1.5, -0.5];
        let p = pinv(&m, 1e-12).unwrap();
        assert!(frobenius(&(p - expected)) < 1e-13);
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let m = dmatrix![1.0, f64::NAN];
        assert!(matches!(pinv(&m, 1e-12), Err(DdklError::InvalidInput(_))));
    }

    #[test]
    fn penrose_identities_on_random_50x30() {
        for seed in 0..3 {
            let a = random(50, 30, seed);
            let ap = pinv(&a, 1e-12).unwrap();
            assert!(rel(&(&a * &ap * &a), &a) <= 1e-10);
            assert!(rel(&(&ap * &a * &ap), &ap) <= 1e-10);
            let aap = &a * &ap;
            let apa = &ap * &a;
            assert!(rel(&aap.transpose(), &aap) <= 1e-10);
            assert!(rel(&apa.transpose(), &apa) <= 1e-10);
        }
    }

    #[test]
    fn axis_projection() {
        let c = dmatrix![1.0, 0.0];
        let p = orth_projection(&c).unwrap();
        assert_eq!(p, dmatrix![1.0, 0.0; 0.0, 0.0]);
    }

    #[test]
    fn projection_of_last_coordinate_row() {
        let c = dmatrix![0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let p = orth_projection(&c).unwrap();
        let mut expected = DMatrix::<f64>::zeros(6, 6);
        expected[(5, 5)] = 1.0;
        assert!(frobenius(&(p - expected)) < 1e-15);
    }

    #[test]
    fn projection_of_two_row_observation_matches_explicit_gram_inverse() {
        let c = dmatrix![0.0, 0.5, 0.25, 0.0, 0.25, 0.0; 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        // C Cᵀ = [[0.375, 0.25], [0.25, 1]], det = 0.3125, inverse by the 2x2 formula.
        let det = 0.375 * 1.0 - 0.25 * 0.25;
        let gi = dmatrix![1.0 / det, -0.25 / det; -0.25 / det, 0.375 / det];
        let expected = c.transpose() * gi * &c;
        let p = orth_projection(&c).unwrap();
        assert!(frobenius(&(&p - &expected)) < 1e-14);
        assert!(frobenius(&(&p * &p - &p)) <= 1e-10);
        assert!(frobenius(&(&p - p.transpose())) <= 1e-12);
    }

    #[test]
    fn projection_rejects_row_rank_deficiency() {
        let c = dmatrix![1.0, 2.0; 2.0, 4.0];
        assert!(matches!(
            orth_projection(&c),
            Err(DdklError::RankDeficient { rank: 1, required: 2, .. })
        ));
    }

    #[test]
    fn rank_trivial_cases() {
        assert_eq!(rank(&DMatrix::<f64>::zeros(3, 3), 1e-12).unwrap(), 0);
        assert_eq!(rank(&DMatrix::<f64>::identity(4, 4), 1e-12).unwrap(), 4);
    }

    #[test]
    fn frobenius_trivial_cases() {
        assert_eq!(frobenius(&DMatrix::<f64>::zeros(2, 2)), 0.0);
        assert!((frobenius(&DMatrix::<f64>::identity(3, 3)) - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius(&dmatrix![3.0, 4.0]), 5.0);
    }

    #[test]
    fn spd_inverse_refuses_singular() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        assert!(matches!(spd_inverse(&m, "test"), Err(DdklError::IllConditioned { .. })));
    }

    #[test]
    fn generic_over_f32() {
        let m = DMatrix::<f32>::identity(3, 3) * 2.0;
        let p = pinv(&m, 1e-6).unwrap();
        assert!((p[(1, 1)] - 0.5).abs() < 1e-6);
        assert_eq!(rank(&m, 1e-6).unwrap(), 3);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_symmetric(seed in 0u64..500, rows in 1usize..5) {
            let c = random(rows, 6, seed);
            let p = orth_projection(&c).unwrap();
            prop_assert!(frobenius(&(&p * &p - &p)) <= 1e-10);
            prop_assert!(frobenius(&(&p - p.transpose())) <= 1e-12);
        }

        #[test]
        fn rank_invariant_under_row_permutation_and_scaling(
            seed in 0u64..500,
            scale in prop::collection::vec(0.1f64..10.0, 6),
            deficient in any::<bool>(),
        ) {
            let mut m = random(6, 5, seed);
            if deficient {
                let r0 = m.row(0).clone_owned();
                m.row_mut(3).copy_from(&(r0 * 2.0));
            }
            let base = rank(&m, 1e-12).unwrap();
            let mut permuted = DMatrix::zeros(6, 5);
            for (i, s) in scale.iter().enumerate() {
                permuted.row_mut(i).copy_from(&(m.row((i + 2) % 6) * *s));
            }
            prop_assert_eq!(rank(&permuted, 1e-12).unwrap(), base);
        }
    }
}
