//! Projection consensus for partitioned linear systems `E_i Z = b_i`.
//!
//! Agent `i` starts at the minimum-norm solution of its own block and moves only
//! within the null space of `E_i`, so its constraint holds at every round.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{DdklError, Result};
use crate::linalg::{frobenius, orth_projection, pinv, DEFAULT_TOL};
use crate::network::GraphTopology;
use crate::scalar::Real;

/// Per-agent blocks of a matrix-valued linear system.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusProblem<T: Real> {
    pub e: Vec<DMatrix<T>>,
    pub b: Vec<DMatrix<T>>,
}

impl<T: Real> ConsensusProblem<T> {
    pub fn new(e: Vec<DMatrix<T>>, b: Vec<DMatrix<T>>) -> Result<Self> {
        if e.len() != b.len() || e.is_empty() {
            return Err(DdklError::dims("consensus blocks", e.len(), b.len()));
        }
        let cols = e[0].ncols();
        let width = b[0].ncols();
        for (i, (ei, bi)) in e.iter().zip(&b).enumerate() {
            if ei.ncols() != cols || ei.nrows() != bi.nrows() || bi.ncols() != width {
                return Err(DdklError::dims(
                    format!("consensus block {i}"),
                    format!("E {}x{cols}, b {}x{width}", ei.nrows(), ei.nrows()),
                    format!("E {}x{}, b {}x{}", ei.nrows(), ei.ncols(), bi.nrows(), bi.ncols()),
                ));
            }
        }
        Ok(Self { e, b })
    }

    pub fn agents(&self) -> usize {
        self.e.len()
    }

    /// Stacked `[E_1; …; E_N]`.
    pub fn stacked_e(&self) -> DMatrix<T> {
        stack_rows(&self.e)
    }

    pub fn stacked_b(&self) -> DMatrix<T> {
        stack_rows(&self.b)
    }

    /// Largest `‖E_i Z_i − b_i‖_F` over agents.
    pub fn constraint_residual(&self, iterate: &ConsensusIterate<T>) -> T {
        self.e
            .iter()
            .zip(&self.b)
            .zip(&iterate.z)
            .map(|((e, b), z)| frobenius(&(e * z - b)))
            .fold(T::zero(), |a, v| a.max(v))
    }
}

fn stack_rows<T: Real>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|m| m.nrows()).sum();
    let cols = blocks.first().map_or(0, |m| m.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for m in blocks {
        out.rows_mut(at, m.nrows()).copy_from(m);
        at += m.nrows();
    }
    out
}

/// Current per-agent solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusIterate<T: Real> {
    pub z: Vec<DMatrix<T>>,
    pub s: usize,
    /// Cached `I − P_i`.
    pub complements: Vec<DMatrix<T>>,
}

/// `Z_i(0) = E_i† b_i`.
pub fn init_iterate<T: Real>(problem: &ConsensusProblem<T>) -> Result<ConsensusIterate<T>> {
    let mut z = Vec::with_capacity(problem.agents());
    let mut complements = Vec::with_capacity(problem.agents());
    for (i, (e, b)) in problem.e.iter().zip(&problem.b).enumerate() {
        let p = orth_projection(e).map_err(|err| match err {
            DdklError::RankDeficient { what, rank, required } => {
                DdklError::RankDeficient { what: format!("agent {i}: {what}"), rank, required }
            }
            other => other,
        })?;
        z.push(pinv(e, T::lit(DEFAULT_TOL))? * b);
        complements.push(DMatrix::identity(e.ncols(), e.ncols()) - p);
    }
    Ok(ConsensusIterate { z, s: 0, complements })
}

/// `Z_i + (1/d_i)(I − P_i) Σ_{j∈N_i} (Z_j − Z_i)`.
pub fn projected_update<'a, T: Real>(
    complement: &DMatrix<T>,
    own: &DMatrix<T>,
    neighbors: impl IntoIterator<Item = &'a DMatrix<T>>,
    degree: usize,
) -> DMatrix<T> {
    let mut sum = DMatrix::zeros(own.nrows(), own.ncols());
    for zj in neighbors {
        sum += zj - own;
    }
    own + complement * sum / T::from_count(degree)
}

/// One synchronous round; every agent reads only previous-round blocks.
pub fn consensus_round<T: Real>(iterate: &ConsensusIterate<T>, graph: &GraphTopology) -> ConsensusIterate<T> {
    let z = (0..iterate.z.len())
        .into_par_iter()
        .map(|i| {
            let nbrs = graph.in_neighbors(i).iter().map(|&j| &iterate.z[j]);
            projected_update(&iterate.complements[i], &iterate.z[i], nbrs, graph.degree(i))
        })
        .collect();
    ConsensusIterate { z, s: iterate.s + 1, complements: iterate.complements.clone() }
}

/// Largest pairwise `‖Z_i − Z_j‖_F`.
pub fn max_pairwise_gap<T: Real>(z: &[DMatrix<T>]) -> T {
    let mut gap = T::zero();
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            gap = gap.max(frobenius(&(&z[i] - &z[j])));
        }
    }
    gap
}

/// Least-squares fit of `log e_s ≈ log c + s log γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricFit {
    pub gamma: f64,
    pub r_squared: f64,
}

/// Fits a geometric decay to a positive error sequence indexed from zero.
/// Non-positive entries end the sequence. Returns `None` for fewer than three
/// usable points.
pub fn fit_geometric(errors: &[f64]) -> Option<GeometricFit> {
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .take_while(|e| **e > 0.0 && e.is_finite())
        .enumerate()
        .map(|(s, e)| (s as f64, e.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(GeometricFit { gamma: slope.exp(), r_squared })
}

/// Result of iterating to tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome<T: Real> {
    pub solutions: Vec<DMatrix<T>>,
    pub rounds: usize,
    /// Every agent's last change was at most `eps1`.
    pub converged: bool,
    pub max_gap: T,
    /// Largest per-agent change at each round.
    pub changes: Vec<f64>,
    /// Largest pairwise gap before the first round and after each round.
    pub gaps: Vec<f64>,
    /// Geometric fit of the gap sequence.
    pub gamma: Option<GeometricFit>,
}

impl<T: Real> ConsensusOutcome<T> {
    /// Converged and all agents within `tol` of each other.
    pub fn agreed(&self, tol: T) -> bool {
        self.converged && self.max_gap <= tol
    }
}

pub fn run_to_tolerance<T: Real>(
    problem: &ConsensusProblem<T>,
    graph: &GraphTopology,
    eps1: T,
    max_rounds: usize,
) -> Result<ConsensusOutcome<T>> {
    if eps1 < T::zero() {
        return Err(DdklError::InvalidInput("eps1 must be non-negative".into()));
    }
    if graph.nodes() != problem.agents() {
        return Err(DdklError::dims("graph nodes", problem.agents(), graph.nodes()));
    }
    let mut it = init_iterate(problem)?;
    let mut changes = Vec::new();
    let mut gaps = vec![max_pairwise_gap(&it.z).as_f64()];
    let mut converged = false;
    while it.s < max_rounds {
        let next = consensus_round(&it, graph);
        let change = next
            .z
            .iter()
            .zip(&it.z)
            .map(|(a, b)| frobenius(&(a - b)))
            .fold(T::zero(), |a, v| a.max(v));
        it = next;
        changes.push(change.as_f64());
        gaps.push(max_pairwise_gap(&it.z).as_f64());
        if change <= eps1 {
            converged = true;
            break;
        }
    }
    let floor = gaps[0] * 1e-13;
    let usable: Vec<f64> = gaps.iter().copied().take_while(|g| *g > floor).collect();
    Ok(ConsensusOutcome {
        max_gap: max_pairwise_gap(&it.z),
        solutions: it.z,
        rounds: it.s,
        converged,
        changes,
        gamma: fit_geometric(&usable),
        gaps,
    })
}
