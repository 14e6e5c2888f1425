//! Closed-form lifted regression, the recursive cross-batch update and
//! observability checks.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::batching::LiftStacks;
use crate::error::{DdklError, Result};
use crate::linalg::{self, hstack, pinv, rank, spd_condition, spd_inverse, CONDITION_LIMIT, DEFAULT_TOL};
use crate::scalar::Real;

const BUNDLE_MAGIC: &str = "ddkl-model";
const BUNDLE_VERSION: u32 = 1;

/// Per-agent lifted model `g(k+1) ≈ A g(k) + B u(k)`, `y ≈ M g`, `x ≈ H g`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub m: DMatrix<T>,
    pub h: DMatrix<T>,
    /// Parameter version of the observable the model was fitted with.
    pub theta_version: u64,
    pub tau: usize,
}

impl<T: Real> KoopmanModel<T> {
    pub fn lift_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `[A, B]`.
    pub fn ab(&self) -> DMatrix<T> {
        hstack(&self.a, &self.b).expect("A and B share the row count")
    }

    /// Splits `[A, B]` into its blocks.
    pub fn split_ab(ab: &DMatrix<T>, r: usize) -> (DMatrix<T>, DMatrix<T>) {
        (ab.columns(0, r).into_owned(), ab.columns(r, ab.ncols() - r).into_owned())
    }

    /// `[[A, B], [M, 0]]` with a zero block of size `n_i x m`.
    pub fn k_matrix(&self) -> DMatrix<T> {
        let (r, m, ni) = (self.a.nrows(), self.b.ncols(), self.m.nrows());
        let mut k = DMatrix::zeros(r + ni, r + m);
        k.view_mut((0, 0), (r, r)).copy_from(&self.a);
        k.view_mut((0, r), (r, m)).copy_from(&self.b);
        k.view_mut((r, 0), (ni, r)).copy_from(&self.m);
        k
    }

    pub fn is_finite(&self) -> bool {
        [&self.a, &self.b, &self.m, &self.h].iter().all(|mat| mat.iter().all(|v| v.is_finite()))
    }

    /// Text bundle: header with dimensions followed by each matrix in
    /// row-major order. `checkpoint` names the observable parameter file.
    pub fn to_bundle(&self, checkpoint: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{BUNDLE_MAGIC} {BUNDLE_VERSION}");
        let _ = writeln!(out, "tau {}", self.tau);
        let _ = writeln!(out, "theta_version {}", self.theta_version);
        let _ = writeln!(out, "checkpoint {checkpoint}");
        for (name, mat) in [("A", &self.a), ("B", &self.b), ("M", &self.m), ("H", &self.h)] {
            let _ = writeln!(out, "matrix {name} {} {}", mat.nrows(), mat.ncols());
            for row in mat.row_iter() {
                let vals: Vec<String> = row.iter().map(ToString::to_string).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
        }
        out
    }

    /// Parses a bundle; returns the model and the checkpoint reference.
    pub fn from_bundle(text: &str) -> Result<(Self, String)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| DdklError::Parse(format!("bundle ends before {what}")));
        let head = next("header")?;
        if head != format!("{BUNDLE_MAGIC} {BUNDLE_VERSION}") {
            return Err(DdklError::Parse(format!("unsupported bundle header `{head}`")));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| DdklError::Parse(format!("expected `{key}`, found `{line}`")))
        };
        let parse_usize = |s: String| s.parse::<usize>().map_err(|e| DdklError::Parse(e.to_string()));
        let tau = parse_usize(field(next("tau")?, "tau")?)?;
        let theta_version = field(next("theta_version")?, "theta_version")?
            .parse::<u64>()
            .map_err(|e| DdklError::Parse(e.to_string()))?;
        let checkpoint = field(next("checkpoint")?, "checkpoint")?;
        let mut mats = Vec::with_capacity(4);
        for name in ["A", "B", "M", "H"] {
            let dims = field(next("matrix header")?, &format!("matrix {name}"))?;
            let dims: Vec<usize> = dims.split_whitespace().map(|d| parse_usize(d.to_string())).collect::<Result<_>>()?;
            let [rows, cols] = dims[..] else {
                return Err(DdklError::Parse(format!("matrix {name} needs two dimensions")));
            };
            let mut mat = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let vals: Vec<T> = next("matrix row")?
                    .split_whitespace()
                    .map(|v| v.parse::<T>().map_err(|_| DdklError::Parse(format!("bad value `{v}` in {name}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(DdklError::dims(format!("bundle matrix {name} row {i}"), cols, vals.len()));
                }
                mat.row_mut(i).iter_mut().zip(vals).for_each(|(d, v)| *d = v);
            }
            mats.push(mat);
        }
        let h = mats.pop().expect("four matrices");
        let m = mats.pop().expect("four matrices");
        let b = mats.pop().expect("four matrices");
        let a = mats.pop().expect("four matrices");
        Ok((Self { a, b, m, h, theta_version, tau }, checkpoint))
    }

    pub fn save_bundle(&self, path: &Path, checkpoint: &str) -> Result<()> {
        std::fs::write(path, self.to_bundle(checkpoint))?;
        Ok(())
    }
}

fn require_full_row_rank<T: Real>(mat: &DMatrix<T>, what: &str) -> Result<()> {
    let r = rank(mat, T::lit(DEFAULT_TOL))?;
    if r < mat.nrows() {
        return Err(DdklError::RankDeficient { what: what.to_string(), rank: r, required: mat.nrows() });
    }
    Ok(())
}

/// `[A, B] = Ḡ [G; U]†`.
pub fn fit_ab<T: Real>(stacks: &LiftStacks<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let chi = stacks.chi();
    require_full_row_rank(&chi, "lifted regressor [G; U] (needs beta >= r + m and full row rank)")?;
    let ab = &stacks.g_next * pinv(&chi, T::lit(DEFAULT_TOL))?;
    Ok(KoopmanModel::split_ab(&ab, stacks.lift_dim()))
}

/// `M = Y G†`.
pub fn fit_m<T: Real>(stacks: &LiftStacks<T>) -> Result<DMatrix<T>> {
    require_full_row_rank(&stacks.g, "lift stack G (needs beta >= r and full row rank)")?;
    Ok(&stacks.y * pinv(&stacks.g, T::lit(DEFAULT_TOL))?)
}

/// Running least-squares state across batches.
///
/// `p_chi` and `p_g` are the inverses of the accumulated Gram matrices
/// `Σ χχᵀ` and `Σ GGᵀ` over every batch absorbed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursiveState<T: Real> {
    pub p_chi: DMatrix<T>,
    pub p_g: DMatrix<T>,
    /// `[A, B]`.
    pub ab: DMatrix<T>,
    pub m: DMatrix<T>,
    pub lift_dim: usize,
}

impl<T: Real> RecursiveState<T> {
    /// One-shot fit on a first batch.
    pub fn from_stacks(stacks: &LiftStacks<T>) -> Result<Self> {
        let (a, b) = fit_ab(stacks)?;
        let m = fit_m(stacks)?;
        let chi = stacks.chi();
        Ok(Self {
            p_chi: spd_inverse(&(&chi * chi.transpose()), "Gram matrix of [G; U]")?,
            p_g: spd_inverse(&(&stacks.g * stacks.g.transpose()), "Gram matrix of G")?,
            ab: hstack(&a, &b)?,
            m,
            lift_dim: stacks.lift_dim(),
        })
    }

    pub fn a(&self) -> DMatrix<T> {
        self.ab.columns(0, self.lift_dim).into_owned()
    }

    pub fn b(&self) -> DMatrix<T> {
        self.ab.columns(self.lift_dim, self.ab.ncols() - self.lift_dim).into_owned()
    }
}

/// One block-RLS step: `W ← W + (T − Wχ) λ χᵀ P`, `P ← P − P χ λ χᵀ P`,
/// with `λ = (I + χᵀ P χ)⁻¹`.
fn block_rls<T: Real>(
    w: &DMatrix<T>,
    p: &DMatrix<T>,
    regressor: &DMatrix<T>,
    target: &DMatrix<T>,
    what: &str,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if regressor.nrows() != p.nrows() {
        return Err(DdklError::dims(format!("{what} regressor rows"), p.nrows(), regressor.nrows()));
    }
    if target.nrows() != w.nrows() || target.ncols() != regressor.ncols() {
        return Err(DdklError::dims(
            format!("{what} target"),
            format!("{}x{}", w.nrows(), regressor.ncols()),
            format!("{}x{}", target.nrows(), target.ncols()),
        ));
    }
    let p_chi = p * regressor;
    let mut inner = regressor.transpose() * &p_chi;
    for i in 0..inner.nrows() {
        inner[(i, i)] += T::one();
    }
    let inner = linalg::symmetrize(&inner);
    let condition = spd_condition(&inner).as_f64();
    if condition > CONDITION_LIMIT {
        return Err(DdklError::IllConditioned { what: format!("{what} update gain"), condition, limit: CONDITION_LIMIT });
    }
    let lambda = spd_inverse(&inner, what)?;
    let gain = &lambda * p_chi.transpose();
    let residual = target - w * regressor;
    let w_new = w + residual * &gain;
    let p_new = linalg::symmetrize(&(p - &p_chi * gain));
    Ok((w_new, p_new))
}

/// Absorbs a new batch into the running fit. The result equals a one-shot fit
/// on the column concatenation of all absorbed stacks.
pub fn recursive_update<T: Real>(state: &RecursiveState<T>, stacks: &LiftStacks<T>) -> Result<RecursiveState<T>> {
    if stacks.lift_dim() != state.lift_dim {
        return Err(DdklError::dims("lift dimension", state.lift_dim, stacks.lift_dim()));
    }
    let (ab, p_chi) = block_rls(&state.ab, &state.p_chi, &stacks.chi(), &stacks.g_next, "[A, B]")?;
    let (m, p_g) = block_rls(&state.m, &state.p_g, &stacks.g, &stacks.y, "M")?;
    Ok(RecursiveState { p_chi, p_g, ab, m, lift_dim: state.lift_dim })
}

/// Column rank of the observability matrix `[H; HA; …; HA^{r-1}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservabilityReport {
    pub rank: usize,
    pub required: usize,
}

impl ObservabilityReport {
    pub fn passed(&self) -> bool {
        self.rank == self.required
    }
}

pub fn observability_matrix<T: Real>(h: &DMatrix<T>, a: &DMatrix<T>) -> DMatrix<T> {
    let r = a.nrows();
    let n = h.nrows();
    let mut obs = DMatrix::zeros(n * r, r);
    let mut block = h.clone();
    for i in 0..r {
        obs.view_mut((i * n, 0), (n, r)).copy_from(&block);
        block = &block * a;
    }
    obs
}

pub fn check_observability<T: Real>(model: &KoopmanModel<T>, tol: T) -> Result<ObservabilityReport> {
    let obs = observability_matrix(&model.h, &model.a);
    Ok(ObservabilityReport { rank: rank(&obs, tol)?, required: model.lift_dim() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn stacks(r: usize, m: usize, ni: usize, beta: usize, seed: u64) -> LiftStacks<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LiftStacks {
            y: random(ni, beta, &mut rng),
            y_next: random(ni, beta, &mut rng),
            u: random(m, beta, &mut rng),
            g: random(r, beta, &mut rng),
            g_next: random(r, beta, &mut rng),
        }
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        frobenius(&(a - b)) / frobenius(b)
    }

    #[test]
    fn exact_model_is_recovered() {
        let mut s = stacks(4, 2, 3, 15, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a0, b0, m0) = (random(4, 4, &mut rng), random(4, 2, &mut rng), random(3, 4, &mut rng));
        s.g_next = &a0 * &s.g + &b0 * &s.u;
        s.y = &m0 * &s.g;
        let (a, b) = fit_ab(&s).unwrap();
        assert!(frobenius(&(a - a0)) < 1e-10 && frobenius(&(b - b0)) < 1e-10);
        assert!(frobenius(&(fit_m(&s).unwrap() - m0)) < 1e-10);
    }

    #[test]
    fn no_inputs_reduces_to_g_pinv() {
        let s = stacks(3, 0, 2, 10, 3);
        let (a, b) = fit_ab(&s).unwrap();
        assert_eq!(b.shape(), (3, 0));
        assert!(frobenius(&(a - &s.g_next * pinv(&s.g, 1e-12).unwrap())) < 1e-12);
    }

    #[test]
    fn matches_normal_equations() {
        let s = stacks(3, 1, 2, 10, 4);
        let chi = s.chi();
        let oracle = &s.g_next * chi.transpose() * (&chi * chi.transpose()).try_inverse().unwrap();
        let (a, b) = fit_ab(&s).unwrap();
        assert!(rel(&hstack(&a, &b).unwrap(), &oracle) < 1e-10);
        let m_oracle = &s.y * s.g.transpose() * (&s.g * s.g.transpose()).try_inverse().unwrap();
        assert!(rel(&fit_m(&s).unwrap(), &m_oracle) < 1e-10);
    }

    #[test]
    fn orthonormal_rows_give_transpose() {
        let mut s = stacks(3, 1, 2, 8, 5);
        let q = random(8, 3, &mut ChaCha8Rng::seed_from_u64(6)).qr().q();
        s.g = q.transpose();
        assert!(frobenius(&(fit_m(&s).unwrap() - &s.y * q)) < 1e-12);
    }

    #[test]
    fn short_batch_is_rank_deficient() {
        let s = stacks(8, 2, 1, 9, 7);
        assert!(matches!(fit_ab(&s), Err(DdklError::RankDeficient { rank: 9, required: 10, .. })));
    }

    #[test]
    fn consistent_batch_leaves_fit_unchanged() {
        let s0 = stacks(3, 1, 2, 12, 8);
        let state = RecursiveState::from_stacks(&s0).unwrap();
        let mut s1 = stacks(3, 1, 2, 6, 9);
        s1.g_next = &state.ab * s1.chi();
        s1.y = &state.m * &s1.g;
        let next = recursive_update(&state, &s1).unwrap();
        assert!(frobenius(&(&next.ab - &state.ab)) < 1e-13);
        assert!(frobenius(&(&next.m - &state.m)) < 1e-13);
    }

    #[test]
    fn single_column_update_matches_sherman_morrison() {
        let s0 = stacks(3, 1, 2, 12, 10);
        let state = RecursiveState::from_stacks(&s0).unwrap();
        let s1 = stacks(3, 1, 2, 1, 11);
        let next = recursive_update(&state, &s1).unwrap();
        // rank-one update: w += (t - w x) xᵀP / (1 + xᵀPx)
        let x = s1.chi();
        let px = &state.p_chi * &x;
        let denom = 1.0 + (x.transpose() * &px)[(0, 0)];
        let expected = &state.ab + (&s1.g_next - &state.ab * &x) * px.transpose() / denom;
        assert!(frobenius(&(next.ab - expected)) < 1e-12);
    }

    fn check_recursion(batches: &[LiftStacks<f64>]) -> (f64, f64, f64) {
        let mut state = RecursiveState::from_stacks(&batches[0]).unwrap();
        for b in &batches[1..] {
            state = recursive_update(&state, b).unwrap();
        }
        let cat = |f: fn(&LiftStacks<f64>) -> &DMatrix<f64>| {
            let cols: Vec<_> = batches.iter().map(f).collect();
            DMatrix::from_columns(&cols.iter().flat_map(|m| m.column_iter()).collect::<Vec<_>>())
        };
        let all = LiftStacks { y: cat(|s| &s.y), y_next: cat(|s| &s.y_next), u: cat(|s| &s.u), g: cat(|s| &s.g), g_next: cat(|s| &s.g_next) };
        let (a, b) = fit_ab(&all).unwrap();
        (rel(&state.a(), &a), rel(&state.b(), &b), rel(&state.m, &fit_m(&all).unwrap()))
    }

    #[test]
    fn recursion_equals_concatenated_fit() {
        let batches: Vec<_> = (0..4).map(|i| stacks(8, 2, 2, 20, 20 + i)).collect();
        let (a, b, m) = check_recursion(&batches);
        assert!(a < 1e-8 && b < 1e-8 && m < 1e-8);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn recursion_equals_concatenated_fit_for_any_split(
            seed in 0u64..10_000,
            count in 3usize..7,
            lens in proptest::collection::vec(1usize..12, 6),
        ) {
            let mut batches = vec![stacks(5, 1, 2, 20, seed)];
            batches.extend((1..count).map(|i| stacks(5, 1, 2, lens[i - 1], seed * 10 + i as u64)));
            let (a, b, m) = check_recursion(&batches);
            proptest::prop_assert!(a < 1e-8 && b < 1e-8 && m < 1e-8, "{a:e} {b:e} {m:e}");
        }
    }

    #[test]
    fn fitted_ab_is_locally_optimal() {
        let s = stacks(4, 2, 1, 20, 12);
        let (a, b) = fit_ab(&s).unwrap();
        let ab = hstack(&a, &b).unwrap();
        let cost = |w: &DMatrix<f64>| frobenius(&(&s.g_next - w * s.chi()));
        let base = cost(&ab);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let d = random(4, 6, &mut rng);
            let d = &d * (1e-3 / frobenius(&d));
            assert!(cost(&(&ab + d)) >= base);
        }
    }

    #[test]
    fn observability_cases() {
        let model = |h: DMatrix<f64>, a: DMatrix<f64>| KoopmanModel {
            b: DMatrix::zeros(a.nrows(), 0),
            m: h.clone(),
            a,
            h,
            theta_version: 0,
            tau: 0,
        };
        let id = model(DMatrix::identity(3, 3), random(3, 3, &mut ChaCha8Rng::seed_from_u64(1)));
        assert!(check_observability(&id, 1e-12).unwrap().passed());
        let shift = model(dmatrix![1.0, 0.0], dmatrix![0.0, 1.0; 0.0, 0.0]);
        assert_eq!(observability_matrix(&shift.h, &shift.a), dmatrix![1.0, 0.0; 0.0, 1.0]);
        assert!(check_observability(&shift, 1e-12).unwrap().passed());
        let diag = model(dmatrix![1.0, 0.0], dmatrix![0.7, 0.0; 0.0, 0.7]);
        let report = check_observability(&diag, 1e-12).unwrap();
        assert_eq!(report.rank, 1);
        assert!(!report.passed());
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = KoopmanModel {
            a: random(3, 3, &mut rng),
            b: random(3, 2, &mut rng),
            m: random(1, 3, &mut rng),
            h: random(4, 3, &mut rng),
            theta_version: 7,
            tau: 2,
        };
        let (back, ckpt) = KoopmanModel::<f64>::from_bundle(&model.to_bundle("net_tau2.txt")).unwrap();
        assert_eq!(back, model);
        assert_eq!(ckpt, "net_tau2.txt");
    }

    #[test]
    fn k_matrix_layout() {
        let model = KoopmanModel {
            a: dmatrix![1.0, 2.0; 3.0, 4.0],
            b: dmatrix![5.0; 6.0],
            m: dmatrix![7.0, 8.0],
            h: DMatrix::zeros(3, 2),
            theta_version: 0,
            tau: 0,
        };
        assert_eq!(model.k_matrix(), dmatrix![1.0, 2.0, 5.0; 3.0, 4.0, 6.0; 7.0, 8.0, 0.0]);
    }
}
