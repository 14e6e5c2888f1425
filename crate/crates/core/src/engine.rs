//! Batch orchestration of the distributed learner and its centralized baseline.
//!
//! Per batch each agent first absorbs the new data into its running
//! least-squares fit, which fixes `K = [[A, B], [M, 0]]`. It then alternates one
//! projection-consensus round on `H` with one gradient step on its observable
//! parameters. Consensus continues after the gradient budget is spent until every
//! agent's change drops below `eps1` or the round cap is reached.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::batching::{build_stacks, DataBatch, LiftStacks};
use crate::consensus::{fit_geometric, max_pairwise_gap, projected_update, GeometricFit};
use crate::error::{DdklError, Result};
use crate::linalg::{frobenius, hstack, pinv, sigma_min, DEFAULT_TOL};
use crate::net::{AdamParams, GradientBuffer, ObservableNet, Optimizer};
use crate::network::{exchange, AgentState, GraphTopology, Payload};
use crate::regression::{check_observability, fit_ab, fit_m, recursive_update, KoopmanModel, RecursiveState};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Consensus on `H` interleaved with training on the full loss.
    Ddkl,
    /// Consensus on the state matrix first, then training on the lifted
    /// regression loss only.
    Ddkl1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    ConstantGd,
    Adam,
}

/// Scaling of the consensus loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusNormalization {
    /// `1 / (β d_i)`.
    PerDegree,
    /// `1 / β`.
    Sum,
}

/// How often neighbor state estimates are refreshed inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeFrequency {
    PerIteration,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub lift_dim: usize,
    pub hidden: Vec<usize>,
    pub w: f64,
    pub w_bar: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    /// Gradient iterations per batch.
    pub max_inner: usize,
    /// Consensus rounds per batch; `None` means `max(S, 10·n·N)`.
    pub consensus_cap: Option<usize>,
    /// Constant gradient step.
    pub alpha: f64,
    pub optimizer: OptimizerMode,
    pub adam: AdamParams,
    pub variant: Variant,
    pub weights_in_inner_loss: bool,
    pub normalization: ConsensusNormalization,
    pub exchange: ExchangeFrequency,
    /// Scalings for the residual bound.
    pub w1_alphas: (f64, f64),
    pub observability_tol: f64,
    /// Standardize each agent's observations with first-window statistics.
    pub standardize_inputs: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            lift_dim: 8,
            hidden: vec![300, 200, 100],
            w: 0.5,
            w_bar: 0.5,
            eps1: 1e-9,
            eps2: 1e-6,
            eps3: 1e-9,
            max_inner: 200,
            consensus_cap: None,
            alpha: 1e-3,
            optimizer: OptimizerMode::ConstantGd,
            adam: AdamParams::default(),
            variant: Variant::Ddkl,
            weights_in_inner_loss: false,
            normalization: ConsensusNormalization::PerDegree,
            exchange: ExchangeFrequency::PerIteration,
            w1_alphas: (1.0, 1.0),
            observability_tol: 1e-10,
            standardize_inputs: true,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.lift_dim == 0 {
            return Err(DdklError::config("engine.lift_dim", "must be at least 1"));
        }
        if !open_unit(self.w) {
            return Err(DdklError::config("engine.w", "must lie in (0, 1)"));
        }
        if !open_unit(self.w_bar) {
            return Err(DdklError::config("engine.w_bar", "must lie in (0, 1)"));
        }
        for (name, v) in [("engine.eps1", self.eps1), ("engine.eps2", self.eps2), ("engine.eps3", self.eps3)] {
            #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN fails too
            if !(v >= 0.0) {
                return Err(DdklError::config(name, "must be non-negative"));
            }
        }
        if self.max_inner == 0 {
            return Err(DdklError::config("engine.max_inner", "S must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DdklError::config("engine.alpha", "step size must be positive"));
        }
        if !(self.w1_alphas.0 > 0.0 && self.w1_alphas.1 > 0.0) {
            return Err(DdklError::config("engine.w1_alphas", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(DdklError::config("engine.hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    fn cap(&self, n: usize, agents: usize) -> usize {
        self.consensus_cap.unwrap_or_else(|| self.max_inner.max(10 * n * agents))
    }

    pub fn make_optimizer<T: Real>(&self, params: usize) -> Optimizer<T> {
        match self.optimizer {
            OptimizerMode::ConstantGd => Optimizer::Gd { alpha: T::lit(self.alpha) },
            OptimizerMode::Adam => Optimizer::adam(self.adam, params),
        }
    }
}

/// Seeds of agent `i`'s observable initialization.
pub fn agent_seed(base: u64, agent: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(agent as u64 + 1)
}

/// Builds agents with Glorot-initialized observables from their observation
/// matrices.
pub fn build_agents<T: Real>(config: &EngineConfig, cs: &[DMatrix<T>]) -> Result<Vec<AgentState<T>>> {
    config.validate()?;
    cs.iter()
        .enumerate()
        .map(|(i, c)| {
            let seed = agent_seed(config.seed, i);
            let net = ObservableNet::glorot(c.nrows(), &config.hidden, config.lift_dim, seed)?;
            let opt = config.make_optimizer(net.param_count());
            AgentState::new(i, c.clone(), net, opt, seed)
        })
        .collect()
}

/// Loss components of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T: Real> {
    pub total: T,
    /// Consensus term.
    pub l1: T,
    /// Lifted regression term (dynamics plus observation).
    pub l2: T,
    pub l2_dynamics: T,
    pub l2_observation: T,
}

/// `(1/β) ‖[Ḡ; Y] − K [G; U]‖²_F`.
pub fn loss_l2<T: Real>(stacks: &LiftStacks<T>, k: &DMatrix<T>) -> Result<T> {
    let (r, ni, m) = (stacks.lift_dim(), stacks.y.nrows(), stacks.input_dim());
    if k.shape() != (r + ni, r + m) {
        return Err(DdklError::dims(
            "K matrix",
            format!("{}x{}", r + ni, r + m),
            format!("{}x{}", k.nrows(), k.ncols()),
        ));
    }
    let target = crate::linalg::vstack(&stacks.g_next, &stacks.y)?;
    let resid = target - k * stacks.chi();
    Ok(resid.norm_squared() / T::from_count(stacks.beta()))
}

/// Consensus term from own estimates and neighbor estimates (self excluded).
pub fn loss_l1<T: Real>(
    own: &DMatrix<T>,
    neighbors: &[&DMatrix<T>],
    degree: usize,
    normalization: ConsensusNormalization,
) -> Result<T> {
    let mut sum = T::zero();
    for nb in neighbors {
        if nb.shape() != own.shape() {
            return Err(DdklError::dims("neighbor estimates", format!("{:?}", own.shape()), format!("{:?}", nb.shape())));
        }
        sum += (own - *nb).norm_squared();
    }
    Ok(sum * consensus_scale(own.ncols(), degree, normalization))
}

fn consensus_scale<T: Real>(beta: usize, degree: usize, normalization: ConsensusNormalization) -> T {
    match normalization {
        ConsensusNormalization::PerDegree => T::one() / T::from_count(beta * degree.max(1)),
        ConsensusNormalization::Sum => T::one() / T::from_count(beta),
    }
}

/// The per-agent training objective with `K`, `H` and neighbor estimates held
/// constant.
#[derive(Debug, Clone)]
pub struct InnerObjective<'a, T: Real> {
    pub batch: &'a DataBatch<T>,
    pub a: &'a DMatrix<T>,
    pub b: &'a DMatrix<T>,
    pub m: &'a DMatrix<T>,
    /// `H` and neighbor estimates `x̂_j(k)` at `k_τ+1 ..= k_τ+β`; `None`
    /// drops the consensus term.
    pub consensus: Option<(&'a DMatrix<T>, Vec<&'a DMatrix<T>>)>,
    pub degree: usize,
    pub normalization: ConsensusNormalization,
    /// `(w, w̄)` when the weighted form is used.
    pub weights: Option<(T, T)>,
}

impl<T: Real> InnerObjective<'_, T> {
    fn coefficients(&self) -> (T, T, T) {
        match self.weights {
            Some((w, wb)) => (w, (T::one() - w) * wb, (T::one() - w) * (T::one() - wb)),
            None => (T::one(), T::one(), T::one()),
        }
    }

    /// Loss and its gradient with respect to the observable parameters.
    pub fn evaluate(&self, net: &ObservableNet<T>) -> Result<(LossBreakdown<T>, GradientBuffer<T>)> {
        self.run(net, true).map(|(l, g)| (l, g.expect("gradient requested")))
    }

    pub fn value(&self, net: &ObservableNet<T>) -> Result<LossBreakdown<T>> {
        self.run(net, false).map(|(l, _)| l)
    }

    fn run(&self, net: &ObservableNet<T>, with_grad: bool) -> Result<(LossBreakdown<T>, Option<GradientBuffer<T>>)> {
        let beta = self.batch.index.beta;
        let cache = net.forward_cached(&self.batch.observations)?;
        let lifts = cache.output();
        let g = lifts.columns(0, beta);
        let g_next = lifts.columns(1, beta);
        let y = self.batch.observations.columns(0, beta);
        if self.a.nrows() != lifts.nrows() || self.m.nrows() != y.nrows() {
            return Err(DdklError::dims("model vs lifts", lifts.nrows(), self.a.nrows()));
        }
        let inv_beta = T::one() / T::from_count(beta);
        let (c1, c_dyn, c_obs) = self.coefficients();

        let r_dyn = g_next - self.a * g - self.b * &self.batch.inputs;
        let r_obs = y - self.m * g;
        let l2_dynamics = r_dyn.norm_squared() * inv_beta;
        let l2_observation = r_obs.norm_squared() * inv_beta;

        let mut l1 = T::zero();
        let mut consensus_resid = None;
        if let Some((h, neighbors)) = &self.consensus {
            let own = *h * g_next;
            let scale = consensus_scale::<T>(beta, self.degree, self.normalization);
            let mut resid_sum = DMatrix::zeros(own.nrows(), own.ncols());
            for nb in neighbors {
                if nb.shape() != own.shape() {
                    return Err(DdklError::dims("neighbor estimates", format!("{:?}", own.shape()), format!("{:?}", nb.shape())));
                }
                let e = &own - *nb;
                l1 += e.norm_squared();
                resid_sum += e;
            }
            l1 *= scale;
            consensus_resid = Some((resid_sum, scale));
        }

        for (term, name, v) in [(1, "consensus", l1), (2, "dynamics", l2_dynamics), (3, "observation", l2_observation)] {
            if !v.is_finite() {
                return Err(DdklError::NumericalFailure { term, name });
            }
        }
        let loss = LossBreakdown {
            total: c1 * l1 + c_dyn * l2_dynamics + c_obs * l2_observation,
            l1,
            l2: l2_dynamics + l2_observation,
            l2_dynamics,
            l2_observation,
        };
        if !with_grad {
            return Ok((loss, None));
        }

        let two = T::lit(2.0);
        let d_next_dyn = &r_dyn * (two * inv_beta * c_dyn);
        let d_g = -(self.a.transpose() * &r_dyn) * (two * inv_beta * c_dyn)
            - (self.m.transpose() * &r_obs) * (two * inv_beta * c_obs);
        let mut upstream = DMatrix::zeros(lifts.nrows(), beta + 1);
        upstream.columns_mut(0, beta).copy_from(&d_g);
        let mut tail = upstream.columns_mut(1, beta);
        tail += d_next_dyn;
        if let (Some((h, _)), Some((resid_sum, scale))) = (&self.consensus, consensus_resid) {
            tail += (h.transpose() * resid_sum) * (two * scale * c1);
        }
        let grad = net.backward(&cache, &upstream)?;
        Ok((loss, Some(grad)))
    }
}

/// Residual bound and its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W1Report {
    pub value: f64,
    pub dynamics: f64,
    pub observation: f64,
    /// Scalings actually used after any shrinking.
    pub alphas: (f64, f64),
}

/// Residual bound for one least-squares row problem `Φ x ≈ t` at its solution
/// `x`: `σ_min([Φ, tα]) (α⁻² + ‖x‖²/(1 − δ²))^{1/2}` with
/// `δ = σ_min([Φ, tα]) / σ_min(Φ)`. `α` is halved until `δ < 1`.
fn tls_row_bound(design: &DMatrix<f64>, target: &[f64], solution: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let (rows, cols) = design.shape();
    if rows <= cols {
        // as many unknowns as equations: the fit is exact
        return Ok((0.0, alpha));
    }
    let s_design = sigma_min(design);
    if s_design <= 0.0 {
        return Err(DdklError::BoundUnavailable("regressor has zero smallest singular value".into()));
    }
    let x_sq: f64 = solution.iter().map(|v| v * v).sum();
    let mut alpha = alpha;
    for _ in 0..64 {
        let mut aug = DMatrix::zeros(rows, cols + 1);
        aug.columns_mut(0, cols).copy_from(design);
        aug.column_mut(cols).iter_mut().zip(target).for_each(|(d, t)| *d = t * alpha);
        let s_aug = sigma_min(&aug);
        let delta = s_aug / s_design;
        if delta < 1.0 {
            return Ok((s_aug * (alpha.powi(-2) + x_sq / (1.0 - delta * delta)).sqrt(), alpha));
        }
        alpha /= 2.0;
    }
    Err(DdklError::BoundUnavailable("delta stays at 1 after shrinking alpha".into()))
}

/// Upper bound on the per-sample lifted-model residuals of a batch, evaluated
/// at the batch least-squares solution `(ab0, m0)`.
pub fn compute_w1<T: Real>(
    stacks: &LiftStacks<T>,
    ab0: &DMatrix<T>,
    m0: &DMatrix<T>,
    alpha1: f64,
    alpha2: f64,
) -> Result<W1Report> {
    if !(alpha1 > 0.0 && alpha2 > 0.0) {
        return Err(DdklError::InvalidInput("bound scalings must be positive".into()));
    }
    let to64 = |m: &DMatrix<T>| m.map(|v| v.as_f64());
    let chi_t = to64(&stacks.chi()).transpose();
    let g_t = to64(&stacks.g).transpose();
    let (g_next, y, ab, m) = (to64(&stacks.g_next), to64(&stacks.y), to64(ab0), to64(m0));
    if ab.shape() != (g_next.nrows(), chi_t.ncols()) || m.shape() != (y.nrows(), g_t.ncols()) {
        return Err(DdklError::dims("bound model", format!("{:?}", (g_next.nrows(), chi_t.ncols())), format!("{:?}", ab.shape())));
    }
    let part = |design: &DMatrix<f64>, targets: &DMatrix<f64>, sol: &DMatrix<f64>, alpha: f64| -> Result<(f64, f64)> {
        let mut sum = 0.0;
        let mut used = alpha;
        for l in 0..targets.nrows() {
            let t: Vec<f64> = targets.row(l).iter().copied().collect();
            let x: Vec<f64> = sol.row(l).iter().copied().collect();
            let (b, a) = tls_row_bound(design, &t, &x, alpha)?;
            sum += b * b;
            used = used.min(a);
        }
        Ok((sum.sqrt(), used))
    };
    let (dynamics, a1) = part(&chi_t, &g_next, &ab, alpha1)?;
    let (observation, a2) = part(&g_t, &y, &m, alpha2)?;
    Ok(W1Report { value: dynamics + observation, dynamics, observation, alphas: (a1, a2) })
}

/// Per-sample residual norms `‖[ḡ_k; y_k] − K [g_k; u_k]‖`.
pub fn sample_residuals<T: Real>(stacks: &LiftStacks<T>, k: &DMatrix<T>) -> Result<Vec<T>> {
    let target = crate::linalg::vstack(&stacks.g_next, &stacks.y)?;
    let resid = target - k * stacks.chi();
    Ok(resid.column_iter().map(|c| c.norm()).collect())
}

/// Gradient-loop activation threshold
/// `W₁² + (1/β) max_{j∈N_i} (‖C_i†Y_i‖² + ‖C_j†Y_j‖²)`.
pub fn activation_threshold(w1: f64, beta: usize, own_rhs: f64, neighbor_rhs: impl IntoIterator<Item = f64>) -> f64 {
    let worst = neighbor_rhs.into_iter().map(|r| own_rhs + r).fold(2.0 * own_rhs, f64::max);
    w1 * w1 + worst / beta as f64
}

/// Monotonicity audit of a loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub monotone: bool,
    /// Indices `s` with `L(s+1) > L(s)`.
    pub violations: Vec<usize>,
    pub max_increase: f64,
    /// Whether `alpha < 2 / L` for the supplied smoothness estimate.
    pub below_quadratic_limit: Option<bool>,
}

/// Checks `L(s+1) ≤ L(s)` for every step. A relative slack of a few ulps
/// absorbs rounding in the loss evaluation.
pub fn descent_check(trace: &[f64], alpha: f64, l_estimate: Option<f64>) -> DescentReport {
    let mut violations = Vec::new();
    let mut max_increase: f64 = 0.0;
    for (s, w) in trace.windows(2).enumerate() {
        let inc = w[1] - w[0];
        if inc > 8.0 * f64::EPSILON * w[0].abs().max(w[1].abs()) || !w[1].is_finite() {
            violations.push(s);
            max_increase = max_increase.max(if inc.is_finite() { inc } else { f64::INFINITY });
        }
    }
    DescentReport {
        monotone: violations.is_empty(),
        violations,
        max_increase,
        below_quadratic_limit: l_estimate.map(|l| alpha < 2.0 / l),
    }
}

/// Outcome of bisecting the largest monotone step size.
#[derive(Debug, Clone, PartialEq)]
pub struct StepThreshold {
    /// Largest probed step with a non-increasing trace.
    pub stable: f64,
    /// Smallest probed step with an increase.
    pub unstable: f64,
    pub probes: Vec<(f64, bool)>,
}

/// Bisects (geometrically) between a stable `lo` and an unstable `hi`.
pub fn bisect_step_threshold(
    mut trace_at: impl FnMut(f64) -> Result<Vec<f64>>,
    lo: f64,
    hi: f64,
    iterations: usize,
) -> Result<StepThreshold> {
    let mut probes = Vec::new();
    let mut check = |a: f64, probes: &mut Vec<(f64, bool)>| -> Result<bool> {
        let ok = descent_check(&trace_at(a)?, a, None).monotone;
        probes.push((a, ok));
        Ok(ok)
    };
    if !check(lo, &mut probes)? {
        return Err(DdklError::InvalidInput(format!("lower step {lo} is not stable")));
    }
    if check(hi, &mut probes)? {
        return Err(DdklError::InvalidInput(format!("upper step {hi} is not unstable")));
    }
    let (mut stable, mut unstable) = (lo, hi);
    for _ in 0..iterations {
        let mid = (stable * unstable).sqrt();
        if check(mid, &mut probes)? {
            stable = mid;
        } else {
            unstable = mid;
        }
    }
    Ok(StepThreshold { stable, unstable, probes })
}

/// Log-log slope of the running minimum of squared gradient norms against the
/// iteration count; a slope near −1 matches a `1/S` decay.
pub fn gradient_decay_exponent(grad_norms: &[f64]) -> Option<f64> {
    let mut best = f64::INFINITY;
    let pts: Vec<(f64, f64)> = grad_norms
        .iter()
        .enumerate()
        .filter_map(|(s, g)| {
            best = best.min(g * g);
            (best > 0.0).then(|| (((s + 1) as f64).ln(), best.ln()))
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub tau: usize,
    pub s: usize,
    pub agent: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub h_gap: f64,
    pub state_err: f64,
    pub grad_norm: f64,
}

/// End-of-batch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub tau: usize,
    /// Consensus rounds executed.
    pub rounds: usize,
    pub consensus_converged: bool,
    pub gradient_steps: Vec<usize>,
    pub activated: Vec<bool>,
    pub w1: Vec<Option<f64>>,
    pub thresholds: Vec<Option<f64>>,
    pub h_gap: f64,
    /// Largest pairwise `‖[A_i, B_i] − [A_j, B_j]‖_F`.
    pub ab_gap: f64,
    /// Mean one-step prediction error per agent, when ground truth is known.
    pub state_err: Vec<Option<f64>>,
    /// Relative state-matrix error `‖S_i − X‖/‖X‖` of the state-consensus
    /// variant.
    pub open_loop_err: Vec<Option<f64>>,
    pub observable: Vec<bool>,
    /// Geometric fit of the consensus gap sequence.
    pub gamma: Option<GeometricFit>,
    /// Per-round largest pairwise gap.
    pub gap_trace: Vec<f64>,
    /// Largest `‖C_i H_i − M_i‖_F` seen over all consensus rounds.
    pub constraint_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
    pub batches: Vec<BatchSummary>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "tau,s,agent,loss,l1,l2,h_gap,state_err,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.tau, r.s, r.agent, r.loss, r.l1, r.l2, r.h_gap, r.state_err, r.grad_norm
            ));
        }
        out
    }
}

/// Mean `‖H(A g(y(k)) + B u(k)) − x(k+1)‖` over a batch.
pub fn prediction_error<T: Real>(
    model: &KoopmanModel<T>,
    net: &ObservableNet<T>,
    batch: &DataBatch<T>,
    truth: &DMatrix<T>,
) -> Result<f64> {
    let errs = prediction_errors(model, net, batch, truth)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Per-sample `‖H(A g(y(k)) + B u(k)) − x(k+1)‖` for `k = k_τ .. k_τ+β−1`.
pub fn prediction_errors<T: Real>(
    model: &KoopmanModel<T>,
    net: &ObservableNet<T>,
    batch: &DataBatch<T>,
    truth: &DMatrix<T>,
) -> Result<Vec<f64>> {
    let beta = batch.index.beta;
    if truth.ncols() != beta + 1 || truth.nrows() != model.h.nrows() {
        return Err(DdklError::dims("ground-truth states", format!("{}x{}", model.h.nrows(), beta + 1), format!("{}x{}", truth.nrows(), truth.ncols())));
    }
    let g = net.forward_batch(&batch.observations.columns(0, beta).into_owned())?;
    let pred = &model.h * (&model.a * g + &model.b * &batch.inputs);
    let err = pred - truth.columns(1, beta);
    Ok(err.column_iter().map(|c| c.norm().as_f64()).collect())
}

/// Multi-agent learner state across batches.
#[derive(Debug, Clone)]
pub struct Engine<T: Real> {
    pub config: EngineConfig,
    pub graph: GraphTopology,
    pub agents: Vec<AgentState<T>>,
    pub metrics: RunMetrics,
    round: u64,
    tau: Option<usize>,
}

/// Per-agent working data of one batch.
struct Work<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    m: DMatrix<T>,
    h: DMatrix<T>,
    rhs: T,
    w1: Option<f64>,
    activated: bool,
    grad_done: bool,
    steps: usize,
}

impl<T: Real> Engine<T> {
    pub fn new(config: EngineConfig, graph: GraphTopology, agents: Vec<AgentState<T>>) -> Result<Self> {
        config.validate()?;
        if agents.len() != graph.nodes() {
            return Err(DdklError::dims("agents vs graph nodes", graph.nodes(), agents.len()));
        }
        let n = agents.first().map(|a| a.state_dim()).unwrap_or(0);
        if agents.iter().any(|a| a.state_dim() != n) {
            return Err(DdklError::InvalidInput("observation matrices disagree on the state dimension".into()));
        }
        if agents.iter().any(|a| a.net.output_dim() != config.lift_dim) {
            return Err(DdklError::config("engine.lift_dim", "observable output width differs from lift dimension"));
        }
        Ok(Self { config, graph, agents, metrics: RunMetrics::default(), round: 0, tau: None })
    }

    pub fn state_dim(&self) -> usize {
        self.agents[0].state_dim()
    }

    fn check_batches(&self, batches: &[DataBatch<T>], truth: Option<&DMatrix<T>>) -> Result<usize> {
        if batches.len() != self.agents.len() {
            return Err(DdklError::dims("batches per agent", self.agents.len(), batches.len()));
        }
        let index = batches[0].index;
        if batches.iter().any(|b| b.index != index) {
            return Err(DdklError::InvalidInput("agents must be partitioned synchronously".into()));
        }
        if let Some(x) = truth {
            if x.ncols() != index.beta + 1 {
                return Err(DdklError::dims("ground-truth columns", index.beta + 1, x.ncols()));
            }
        }
        // the initial window may be a merge of several leading batches
        if let Some(t) = self.tau {
            if index.tau != t + 1 {
                return Err(DdklError::InvalidInput(format!("expected batch {}, got {}", t + 1, index.tau)));
            }
        }
        Ok(index.tau)
    }

    /// Fits the first batch in one shot and sets `H = C_i† M_i`.
    pub fn initialize(&mut self, batches: &[DataBatch<T>], truth: Option<&DMatrix<T>>) -> Result<BatchSummary> {
        if self.tau.is_some() {
            return Err(DdklError::InvalidInput("engine already initialized".into()));
        }
        let tau = self.check_batches(batches, truth)?;
        let standardize = self.config.standardize_inputs;
        self.agents.par_iter_mut().zip(batches).try_for_each(|(agent, batch)| -> Result<()> {
            if standardize {
                agent.net.standardize_to(&batch.observations).map_err(|e| e.at(agent.id, tau))?;
            }
            let stacks = build_stacks(batch, &agent.net).map_err(|e| e.at(agent.id, tau))?;
            let rec = RecursiveState::from_stacks(&stacks).map_err(|e| e.at(agent.id, tau))?;
            let model = KoopmanModel {
                a: rec.a(),
                b: rec.b(),
                h: &agent.c_pinv * &rec.m,
                m: rec.m.clone(),
                theta_version: agent.net.version(),
                tau,
            };
            agent.recursive = Some(rec);
            agent.model = Some(model);
            Ok(())
        })?;
        self.tau = Some(tau);
        let summary = self.finish_batch(tau, batches, truth, 0, true, vec![0; self.agents.len()], vec![false; self.agents.len()], vec![None; self.agents.len()], vec![None; self.agents.len()], vec![None; self.agents.len()], Vec::new())?;
        for (i, agent) in self.agents.iter().enumerate() {
            let model = agent.model.as_ref().expect("model fitted");
            self.metrics.rows.push(MetricRow {
                tau,
                s: 0,
                agent: i,
                loss: f64::NAN,
                l1: 0.0,
                l2: loss_l2(&build_stacks(&batches[i], &agent.net)?, &model.k_matrix())?.as_f64(),
                h_gap: summary.h_gap,
                state_err: summary.state_err[i].unwrap_or(f64::NAN),
                grad_norm: 0.0,
            });
        }
        for row in self.metrics.rows.iter_mut().filter(|r| r.tau == tau) {
            row.loss = row.l2;
        }
        Ok(summary)
    }

    /// Runs the configured variant on the next batch.
    pub fn run_batch(&mut self, batches: &[DataBatch<T>], truth: Option<&DMatrix<T>>) -> Result<BatchSummary> {
        if self.tau.is_none() {
            return self.initialize(batches, truth);
        }
        match self.config.variant {
            Variant::Ddkl => run_batch_ddkl(self, batches, truth),
            Variant::Ddkl1 => run_batch_ddkl1(self, batches, truth),
        }
    }

    /// Step 2: absorbs the batch into every running fit and returns the
    /// per-agent working data with `H(0) = C_i† M_i`.
    fn absorb(&mut self, tau: usize, batches: &[DataBatch<T>]) -> Result<Vec<Work<T>>> {
        let alphas = self.config.w1_alphas;
        self.agents
            .par_iter_mut()
            .zip(batches)
            .map(|(agent, batch)| -> Result<Work<T>> {
                let ctx = |e: DdklError| e.at(agent.id, tau);
                let stacks = build_stacks(batch, &agent.net).map_err(ctx)?;
                let prev = agent.recursive.as_ref().ok_or_else(|| DdklError::InvalidInput("agent not initialized".into()))?;
                let rec = recursive_update(prev, &stacks).map_err(ctx)?;
                let w1 = fit_ab(&stacks)
                    .and_then(|(a, b)| Ok((hstack(&a, &b)?, fit_m(&stacks)?)))
                    .and_then(|(ab, m)| compute_w1(&stacks, &ab, &m, alphas.0, alphas.1));
                let w1 = match w1 {
                    Ok(rep) => Some(rep.value),
                    Err(e) => {
                        log::debug!("agent {} batch {tau}: residual bound unavailable: {e}", agent.id);
                        None
                    }
                };
                let rhs = (&agent.c_pinv * &stacks.y).norm_squared();
                let work = Work {
                    a: rec.a(),
                    b: rec.b(),
                    h: &agent.c_pinv * &rec.m,
                    m: rec.m.clone(),
                    rhs,
                    w1,
                    activated: true,
                    grad_done: false,
                    steps: 0,
                };
                agent.recursive = Some(rec);
                Ok(work)
            })
            .collect()
    }

    fn publish(&mut self, work: &[Work<T>], batches: &[DataBatch<T>], estimates: Option<&[DMatrix<T>]>) -> Result<()> {
        let round = self.round;
        exchange(&mut self.agents, &self.graph, round, |agent| {
            let w = &work[agent.id];
            let est = match estimates {
                Some(frozen) => frozen[agent.id].clone(),
                None => {
                    let beta = batches[agent.id].index.beta;
                    let next = batches[agent.id].observations.columns(1, beta).into_owned();
                    &w.h * agent.net.forward_batch(&next)?
                }
            };
            Ok(Payload { estimates: est, h: w.h.clone(), rhs_norm_sq: w.rhs })
        })?;
        self.round += 1;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_batch(
        &mut self,
        tau: usize,
        batches: &[DataBatch<T>],
        truth: Option<&DMatrix<T>>,
        rounds: usize,
        converged: bool,
        gradient_steps: Vec<usize>,
        activated: Vec<bool>,
        w1: Vec<Option<f64>>,
        thresholds: Vec<Option<f64>>,
        open_loop_err: Vec<Option<f64>>,
        gap_trace: Vec<f64>,
    ) -> Result<BatchSummary> {
        let tol = T::lit(self.config.observability_tol);
        let mut observable = Vec::with_capacity(self.agents.len());
        let mut state_err = Vec::with_capacity(self.agents.len());
        for (agent, batch) in self.agents.iter_mut().zip(batches) {
            let model = agent.model.as_mut().expect("model present");
            model.theta_version = agent.net.version();
            model.tau = tau;
            let report = check_observability(model, tol)?;
            if report.passed() {
                agent.saved = Some(model.clone());
            } else {
                log::warn!(
                    "agent {} batch {tau}: observability rank {} < {}; keeping previous saved model",
                    agent.id,
                    report.rank,
                    report.required
                );
            }
            observable.push(report.passed());
            state_err.push(match truth {
                Some(x) => Some(prediction_error(model, &agent.net, batch, x).map_err(|e| e.at(agent.id, tau))?),
                None => None,
            });
        }
        let hs: Vec<DMatrix<T>> = self.agents.iter().map(|a| a.model.as_ref().expect("model").h.clone()).collect();
        let abs: Vec<DMatrix<T>> = self.agents.iter().map(|a| a.model.as_ref().expect("model").ab()).collect();
        let floor = gap_trace.first().copied().unwrap_or(0.0) * 1e-13;
        let usable: Vec<f64> = gap_trace.iter().copied().take_while(|g| *g > floor).collect();
        let summary = BatchSummary {
            tau,
            rounds,
            consensus_converged: converged,
            gradient_steps,
            activated,
            w1,
            thresholds,
            h_gap: max_pairwise_gap(&hs).as_f64(),
            ab_gap: max_pairwise_gap(&abs).as_f64(),
            state_err,
            open_loop_err,
            observable,
            gamma: fit_geometric(&usable),
            gap_trace,
            constraint_residual: f64::NAN,
        };
        self.metrics.batches.push(summary.clone());
        Ok(summary)
    }

    /// Latest summary.
    pub fn last_summary(&self) -> Option<&BatchSummary> {
        self.metrics.batches.last()
    }
}

/// One batch of the distributed learner with `H`-consensus.
pub fn run_batch_ddkl<T: Real>(
    engine: &mut Engine<T>,
    batches: &[DataBatch<T>],
    truth: Option<&DMatrix<T>>,
) -> Result<BatchSummary> {
    let tau = engine.check_batches(batches, truth)?;
    let mut work = engine.absorb(tau, batches)?;
    let cfg = engine.config.clone();
    let n = engine.state_dim();
    let cap = cfg.cap(n, engine.agents.len());
    let beta = batches[0].index.beta;

    let frozen: Option<Vec<DMatrix<T>>> = match cfg.exchange {
        ExchangeFrequency::PerIteration => None,
        ExchangeFrequency::PerBatch => Some(
            engine
                .agents
                .iter()
                .zip(&work)
                .zip(batches)
                .map(|((a, w), b)| Ok(&w.h * a.net.forward_batch(&b.observations.columns(1, beta).into_owned())?))
                .collect::<Result<_>>()?,
        ),
    };
    engine.publish(&work, batches, frozen.as_deref())?;

    // activation gate
    let mut thresholds = vec![None; work.len()];
    for (i, agent) in engine.agents.iter().enumerate() {
        let Some(w1) = work[i].w1 else { continue };
        let expected = agent.round - 1;
        let mut nbr = Vec::new();
        for &j in engine.graph.in_neighbors(i) {
            nbr.push(agent.store.get(i, j, expected)?.rhs_norm_sq.as_f64());
        }
        let thr = activation_threshold(w1, beta, work[i].rhs.as_f64(), nbr);
        thresholds[i] = Some(thr);
        if cfg.eps2 >= thr {
            work[i].activated = false;
            work[i].grad_done = true;
            log::info!("agent {i} batch {tau}: gradient loop not activated (eps2 {} >= threshold {thr})", cfg.eps2);
        }
    }

    let weights = cfg.weights_in_inner_loss.then(|| (T::lit(cfg.w), T::lit(cfg.w_bar)));
    let eps1 = T::lit(cfg.eps1);
    let eps2 = T::lit(cfg.eps2);
    let mut gap_trace = vec![max_pairwise_gap(&work.iter().map(|w| w.h.clone()).collect::<Vec<_>>()).as_f64()];
    let mut consensus_done = false;
    let mut constraint_residual = work
        .iter()
        .zip(&engine.agents)
        .map(|(w, a)| frobenius(&(&a.c * &w.h - &w.m)).as_f64())
        .fold(0.0, f64::max);
    let mut rounds = 0;
    let mut s = 0;
    while !(consensus_done && work.iter().all(|w| w.grad_done)) && s < cap {
        let graph = &engine.graph;
        let results: Vec<(T, T, MetricRow)> = engine
            .agents
            .par_iter_mut()
            .zip(work.par_iter_mut())
            .zip(batches)
            .map(|((agent, w), batch)| -> Result<(T, T, MetricRow)> {
                let i = agent.id;
                let expected = agent.round - 1;
                let mut change = T::zero();
                if !consensus_done {
                    let mut nbr_h = Vec::with_capacity(graph.degree(i));
                    for &j in graph.in_neighbors(i) {
                        nbr_h.push(&agent.store.get(i, j, expected)?.h);
                    }
                    let next = projected_update(&agent.complement, &w.h, nbr_h, graph.degree(i));
                    change = frobenius(&(&next - &w.h));
                    w.h = next;
                }
                let constraint = frobenius(&(&agent.c * &w.h - &w.m));
                let mut nbr_est = Vec::new();
                for &j in graph.in_neighbors(i).iter().filter(|&&j| j != i) {
                    nbr_est.push(&agent.store.get(i, j, expected)?.estimates);
                }
                let objective = InnerObjective {
                    batch,
                    a: &w.a,
                    b: &w.b,
                    m: &w.m,
                    consensus: Some((&w.h, nbr_est)),
                    degree: graph.degree(i),
                    normalization: cfg.normalization,
                    weights,
                };
                let mut grad_norm = 0.0;
                let loss = if !w.grad_done && s < cfg.max_inner {
                    let (loss, grad) = objective.evaluate(&agent.net).map_err(|e| e.at(i, tau))?;
                    if loss.total <= eps2 {
                        w.grad_done = true;
                    } else {
                        grad_norm = grad.norm().as_f64();
                        agent.optimizer.step(&mut agent.net, &grad).map_err(|e| e.at(i, tau))?;
                        w.steps += 1;
                        if w.steps >= cfg.max_inner {
                            w.grad_done = true;
                        }
                    }
                    loss
                } else {
                    w.grad_done = true;
                    objective.value(&agent.net).map_err(|e| e.at(i, tau))?
                };
                let state_err = match truth {
                    Some(x) => {
                        let model = KoopmanModel { a: w.a.clone(), b: w.b.clone(), m: w.m.clone(), h: w.h.clone(), theta_version: 0, tau };
                        prediction_error(&model, &agent.net, batch, x)?
                    }
                    None => f64::NAN,
                };
                Ok((
                    change,
                    constraint,
                    MetricRow {
                        tau,
                        s,
                        agent: i,
                        loss: loss.total.as_f64(),
                        l1: loss.l1.as_f64(),
                        l2: loss.l2.as_f64(),
                        h_gap: 0.0,
                        state_err,
                        grad_norm,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        if !consensus_done {
            rounds += 1;
            let max_change = results.iter().map(|r| r.0).fold(T::zero(), |a, v| a.max(v));
            for r in &results {
                constraint_residual = constraint_residual.max(r.1.as_f64());
            }
            consensus_done = max_change <= eps1;
        }
        let gap = max_pairwise_gap(&work.iter().map(|w| w.h.clone()).collect::<Vec<_>>()).as_f64();
        gap_trace.push(gap);
        engine.metrics.rows.extend(results.into_iter().map(|(_, _, mut row)| {
            row.h_gap = gap;
            row
        }));
        engine.publish(&work, batches, frozen.as_deref())?;
        s += 1;
    }
    if !consensus_done {
        log::warn!("batch {tau}: consensus did not reach eps1 within {cap} rounds (gap {:e})", gap_trace.last().copied().unwrap_or(f64::NAN));
    }

    for (agent, w) in engine.agents.iter_mut().zip(&work) {
        agent.model = Some(KoopmanModel { a: w.a.clone(), b: w.b.clone(), m: w.m.clone(), h: w.h.clone(), theta_version: 0, tau });
    }
    engine.tau = Some(tau);
    let steps = work.iter().map(|w| w.steps).collect();
    let activated = work.iter().map(|w| w.activated).collect();
    let w1 = work.iter().map(|w| w.w1).collect();
    let n_agents = work.len();
    let mut summary =
        engine.finish_batch(tau, batches, truth, rounds, consensus_done, steps, activated, w1, thresholds, vec![None; n_agents], gap_trace)?;
    summary.constraint_residual = constraint_residual;
    if let Some(last) = engine.metrics.batches.last_mut() {
        last.constraint_residual = constraint_residual;
    }
    Ok(summary)
}

/// One batch of the state-consensus variant: agents agree on the state matrix
/// `S` with `C_i S = Y_i`, train on the lifted regression loss only and set
/// `H_i = S_i G_i†`.
pub fn run_batch_ddkl1<T: Real>(
    engine: &mut Engine<T>,
    batches: &[DataBatch<T>],
    truth: Option<&DMatrix<T>>,
) -> Result<BatchSummary> {
    let tau = engine.check_batches(batches, truth)?;
    let mut work = engine.absorb(tau, batches)?;
    let cfg = engine.config.clone();
    let n = engine.state_dim();
    let cap = cfg.cap(n, engine.agents.len());
    let beta = batches[0].index.beta;
    let tol = T::lit(DEFAULT_TOL);

    // state consensus: the payload `h` slot carries S_i
    let mut states: Vec<DMatrix<T>> = engine
        .agents
        .iter()
        .zip(batches)
        .map(|(a, b)| &a.c_pinv * b.observations.columns(0, beta))
        .collect();
    let publish_states = |engine: &mut Engine<T>, states: &[DMatrix<T>]| -> Result<()> {
        let round = engine.round;
        exchange(&mut engine.agents, &engine.graph, round, |a| {
            Ok(Payload { estimates: DMatrix::zeros(0, 0), h: states[a.id].clone(), rhs_norm_sq: T::zero() })
        })?;
        engine.round += 1;
        Ok(())
    };
    let g_pinv: Vec<DMatrix<T>> = engine
        .agents
        .iter()
        .zip(batches)
        .map(|(a, b)| pinv(&build_stacks(b, &a.net)?.g, tol))
        .collect::<Result<_>>()?;
    let h_of = |states: &[DMatrix<T>]| -> Vec<DMatrix<T>> { states.iter().zip(&g_pinv).map(|(s, gp)| s * gp).collect() };
    publish_states(engine, &states)?;
    let eps3 = T::lit(cfg.eps3);
    let mut gap_trace = vec![max_pairwise_gap(&h_of(&states)).as_f64()];
    let mut rounds = 0;
    let mut converged = false;
    while rounds < cap {
        let graph = &engine.graph;
        let next: Vec<(DMatrix<T>, T)> = engine
            .agents
            .par_iter()
            .map(|agent| -> Result<(DMatrix<T>, T)> {
                let i = agent.id;
                let expected = agent.round - 1;
                let mut nbr = Vec::with_capacity(graph.degree(i));
                for &j in graph.in_neighbors(i) {
                    nbr.push(&agent.store.get(i, j, expected)?.h);
                }
                let own = &agent.store.get(i, i, expected)?.h;
                let z = projected_update(&agent.complement, own, nbr, graph.degree(i));
                let change = frobenius(&(&z - own));
                Ok((z, change))
            })
            .collect::<Result<_>>()?;
        let max_change = next.iter().map(|p| p.1).fold(T::zero(), |a, v| a.max(v));
        states = next.into_iter().map(|p| p.0).collect();
        rounds += 1;
        gap_trace.push(max_pairwise_gap(&h_of(&states)).as_f64());
        publish_states(engine, &states)?;
        if max_change <= eps3 {
            converged = true;
            break;
        }
    }
    let open_loop_err: Vec<Option<f64>> = states
        .iter()
        .map(|s| truth.map(|x| {
            let xs = x.columns(0, beta);
            (s - xs).norm().as_f64() / xs.norm().as_f64().max(f64::MIN_POSITIVE)
        }))
        .collect();

    // training on the lifted regression loss
    let eps2 = T::lit(cfg.eps2);
    let weights = cfg.weights_in_inner_loss.then(|| (T::lit(cfg.w), T::lit(cfg.w_bar)));
    let rows: Vec<Vec<MetricRow>> = engine
        .agents
        .par_iter_mut()
        .zip(work.par_iter_mut())
        .zip(batches)
        .zip(&states)
        .map(|(((agent, w), batch), state)| -> Result<Vec<MetricRow>> {
            let i = agent.id;
            let mut rows = Vec::new();
            let objective = InnerObjective {
                batch,
                a: &w.a,
                b: &w.b,
                m: &w.m,
                consensus: None,
                degree: 1,
                normalization: cfg.normalization,
                weights,
            };
            for s in 0..cfg.max_inner {
                let (loss, grad) = objective.evaluate(&agent.net).map_err(|e| e.at(i, tau))?;
                let done = loss.total <= eps2;
                let grad_norm = if done { 0.0 } else { grad.norm().as_f64() };
                rows.push(MetricRow { tau, s, agent: i, loss: loss.total.as_f64(), l1: 0.0, l2: loss.l2.as_f64(), h_gap: f64::NAN, state_err: f64::NAN, grad_norm });
                if done {
                    break;
                }
                agent.optimizer.step(&mut agent.net, &grad).map_err(|e| e.at(i, tau))?;
                w.steps += 1;
            }
            let g = build_stacks(batch, &agent.net)?.g;
            w.h = state * pinv(&g, tol)?;
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let h_gap = max_pairwise_gap(&work.iter().map(|w| w.h.clone()).collect::<Vec<_>>()).as_f64();
    for row in rows.into_iter().flatten() {
        engine.metrics.rows.push(MetricRow { h_gap, ..row });
    }
    for (agent, w) in engine.agents.iter_mut().zip(&work) {
        agent.model = Some(KoopmanModel { a: w.a.clone(), b: w.b.clone(), m: w.m.clone(), h: w.h.clone(), theta_version: 0, tau });
    }
    engine.tau = Some(tau);
    let steps = work.iter().map(|w| w.steps).collect();
    let n_agents = work.len();
    let w1 = work.iter().map(|w| w.w1).collect();
    engine.finish_batch(tau, batches, truth, rounds, converged, steps, vec![true; n_agents], w1, vec![None; n_agents], open_loop_err, gap_trace)
}

/// Centralized learner on full-state data: one observable, lifted regression
/// loss only, `H = M`.
#[derive(Debug, Clone)]
pub struct Dktv<T: Real> {
    pub config: EngineConfig,
    pub net: ObservableNet<T>,
    pub optimizer: Optimizer<T>,
    pub recursive: Option<RecursiveState<T>>,
    pub model: Option<KoopmanModel<T>>,
    pub losses: Vec<Vec<f64>>,
}

impl<T: Real> Dktv<T> {
    pub fn new(config: EngineConfig, net: ObservableNet<T>) -> Result<Self> {
        config.validate()?;
        let optimizer = config.make_optimizer(net.param_count());
        Ok(Self { config, net, optimizer, recursive: None, model: None, losses: Vec::new() })
    }

    pub fn run_batch(&mut self, batch: &DataBatch<T>) -> Result<&KoopmanModel<T>> {
        let tau = batch.index.tau;
        if self.recursive.is_none() && self.config.standardize_inputs {
            self.net.standardize_to(&batch.observations)?;
        }
        let stacks = build_stacks(batch, &self.net)?;
        let rec = match &self.recursive {
            None => {
                let rec = RecursiveState::from_stacks(&stacks)?;
                self.recursive = Some(rec.clone());
                self.model = Some(KoopmanModel { a: rec.a(), b: rec.b(), m: rec.m.clone(), h: rec.m.clone(), theta_version: self.net.version(), tau });
                self.losses.push(Vec::new());
                return Ok(self.model.as_ref().expect("set"));
            }
            Some(prev) => recursive_update(prev, &stacks)?,
        };
        let (a, b, m) = (rec.a(), rec.b(), rec.m.clone());
        let weights = self.config.weights_in_inner_loss.then(|| (T::lit(self.config.w), T::lit(self.config.w_bar)));
        let objective = InnerObjective {
            batch,
            a: &a,
            b: &b,
            m: &m,
            consensus: None,
            degree: 1,
            normalization: self.config.normalization,
            weights,
        };
        let mut trace = Vec::new();
        for _ in 0..self.config.max_inner {
            let (loss, grad) = objective.evaluate(&self.net)?;
            trace.push(loss.total.as_f64());
            if loss.total <= T::lit(self.config.eps2) {
                break;
            }
            self.optimizer.step(&mut self.net, &grad)?;
        }
        self.losses.push(trace);
        self.recursive = Some(rec);
        self.model = Some(KoopmanModel { a, b, h: m.clone(), m, theta_version: self.net.version(), tau });
        Ok(self.model.as_ref().expect("set"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{partition, BetaSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn batch(ni: usize, m: usize, beta: usize, seed: u64) -> DataBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random(ni, beta + 1, &mut rng);
        let u = random(m, beta, &mut rng);
        partition(0, &y, &u, &BetaSchedule::Constant(beta), None).unwrap().remove(0)
    }

    #[test]
    fn l2_zero_for_exact_data_and_norms_for_zero_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = LiftStacks {
            y: random(2, 9, &mut rng),
            y_next: random(2, 9, &mut rng),
            u: random(1, 9, &mut rng),
            g: random(3, 9, &mut rng),
            g_next: random(3, 9, &mut rng),
        };
        let k0 = DMatrix::zeros(5, 4);
        let expected = (s.g_next.norm_squared() + s.y.norm_squared()) / 9.0;
        assert!((loss_l2(&s, &k0).unwrap() - expected).abs() < 1e-14);
        let k = random(5, 4, &mut rng);
        let mut k_exact = k.clone();
        k_exact.view_mut((3, 3), (2, 1)).fill(0.0);
        s.g_next = k_exact.rows(0, 3) * s.chi();
        s.y = k_exact.view((3, 0), (2, 3)) * &s.g;
        assert!(loss_l2(&s, &k_exact).unwrap() < 1e-28);
    }

    #[test]
    fn l2_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = LiftStacks {
            y: random(2, 7, &mut rng),
            y_next: random(2, 7, &mut rng),
            u: random(2, 7, &mut rng),
            g: random(3, 7, &mut rng),
            g_next: random(3, 7, &mut rng),
        };
        let mut k = random(5, 5, &mut rng);
        k.view_mut((3, 3), (2, 2)).fill(0.0);
        let mut sum = 0.0;
        for col in 0..7 {
            for row in 0..5 {
                let target = if row < 3 { s.g_next[(row, col)] } else { s.y[(row - 3, col)] };
                let mut pred = 0.0;
                for j in 0..5 {
                    let x = if j < 3 { s.g[(j, col)] } else { s.u[(j - 3, col)] };
                    pred += k[(row, j)] * x;
                }
                sum += (target - pred).powi(2);
            }
        }
        assert!((loss_l2(&s, &k).unwrap() - sum / 7.0).abs() < 1e-13);
    }

    #[test]
    fn l1_cases() {
        let own = DMatrix::from_element(2, 3, 1.5);
        assert_eq!(loss_l1(&own, &[&own.clone(), &own.clone()], 3, ConsensusNormalization::PerDegree).unwrap(), 0.0);
        assert_eq!(loss_l1(&own, &[], 1, ConsensusNormalization::PerDegree).unwrap(), 0.0);
        // two agents, hand-set: x̂_1 = H g with H = [1 0; 0 2], g columns (1,1), (0,1)
        let h: DMatrix<f64> = nalgebra::dmatrix![1.0, 0.0; 0.0, 2.0];
        let g = nalgebra::dmatrix![1.0, 0.0; 1.0, 1.0];
        let x1 = &h * g;
        let x2 = nalgebra::dmatrix![0.0, 1.0; 2.0, 0.0];
        // differences: (1,0), (-1,2) -> squares 1 + 1 + 4 = 6; β = 2, d = 2
        assert!((loss_l1(&x1, &[&x2], 2, ConsensusNormalization::PerDegree).unwrap() - 1.5).abs() < 1e-15);
        assert!((loss_l1(&x1, &[&x2], 2, ConsensusNormalization::Sum).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_net_loss_is_observation_energy() {
        let b = batch(2, 1, 6, 3);
        let net = ObservableNet::<f64>::zeros(2, &[4], 3, crate::net::Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, bm, m) = (random(3, 3, &mut rng), random(3, 1, &mut rng), random(2, 3, &mut rng));
        let obj = InnerObjective { batch: &b, a: &a, b: &bm, m: &m, consensus: None, degree: 1, normalization: ConsensusNormalization::PerDegree, weights: None };
        let loss = obj.value(&net).unwrap();
        // G = 0, so only the input term of the dynamics residual survives besides Y
        let expected_obs = b.observations.columns(0, 6).norm_squared() / 6.0;
        assert!((loss.l2_observation - expected_obs).abs() < 1e-14);
        assert!((loss.l2_dynamics - (&bm * &b.inputs).norm_squared() / 6.0).abs() < 1e-14);
    }

    fn fd_check(obj: &InnerObjective<'_, f64>, net: &ObservableNet<f64>) -> f64 {
        let (_, grad) = obj.evaluate(net).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.param_count() {
            let mut tp = net.theta().to_vec();
            let mut tm = tp.clone();
            tp[i] += h;
            tm[i] -= h;
            let (mut np, mut nm) = (net.clone(), net.clone());
            np.set_theta(tp).unwrap();
            nm.set_theta(tm).unwrap();
            let fd = (obj.value(&np).unwrap().total - obj.value(&nm).unwrap().total) / (2.0 * h);
            let an = grad.values[i];
            let scale = an.abs().max(fd.abs());
            if scale > 1e-8 {
                worst = worst.max((an - fd).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let b = batch(4, 2, 10, 5);
        let net = ObservableNet::<f64>::glorot(4, &[8, 5], 3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, bm, m, h) = (random(3, 3, &mut rng), random(3, 2, &mut rng), random(4, 3, &mut rng), random(6, 3, &mut rng));
        let nb1 = random(6, 10, &mut rng);
        let nb2 = random(6, 10, &mut rng);
        for weights in [None, Some((0.3, 0.6))] {
            for normalization in [ConsensusNormalization::PerDegree, ConsensusNormalization::Sum] {
                let obj = InnerObjective {
                    batch: &b,
                    a: &a,
                    b: &bm,
                    m: &m,
                    consensus: Some((&h, vec![&nb1, &nb2])),
                    degree: 3,
                    normalization,
                    weights,
                };
                let err = fd_check(&obj, &net);
                assert!(err < 1e-4, "relative error {err}");
            }
        }
    }

    #[test]
    fn non_finite_loss_names_term() {
        let b = batch(1, 1, 5, 8);
        let net = ObservableNet::<f64>::glorot(1, &[4], 2, 9).unwrap();
        let a = DMatrix::from_element(2, 2, f64::INFINITY);
        let (bm, m) = (DMatrix::zeros(2, 1), DMatrix::zeros(1, 2));
        let obj = InnerObjective { batch: &b, a: &a, b: &bm, m: &m, consensus: None, degree: 1, normalization: ConsensusNormalization::PerDegree, weights: None };
        assert!(matches!(obj.value(&net), Err(DdklError::NumericalFailure { term: 2, .. })));
    }

    #[test]
    fn w1_dominates_residuals() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = LiftStacks {
                y: random(2, 12, &mut rng),
                y_next: random(2, 12, &mut rng),
                u: random(1, 12, &mut rng),
                g: random(4, 12, &mut rng),
                g_next: random(4, 12, &mut rng),
            };
            let (a, b) = fit_ab(&s).unwrap();
            let m = fit_m(&s).unwrap();
            let ab = hstack(&a, &b).unwrap();
            let w1 = compute_w1(&s, &ab, &m, 1.0, 1.0).unwrap();
            let model = KoopmanModel { a, b, m, h: DMatrix::zeros(1, 4), theta_version: 0, tau: 0 };
            let worst = sample_residuals(&s, &model.k_matrix()).unwrap().into_iter().fold(0.0, f64::max);
            assert!(worst <= w1.value, "{worst} > {}", w1.value);
        }
    }

    #[test]
    fn w1_zero_when_fit_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = LiftStacks {
            y: random(2, 12, &mut rng),
            y_next: random(2, 12, &mut rng),
            u: random(1, 12, &mut rng),
            g: random(4, 12, &mut rng),
            g_next: random(4, 12, &mut rng),
        };
        let (a0, b0, m0) = (random(4, 4, &mut rng), random(4, 1, &mut rng), random(2, 4, &mut rng));
        s.g_next = &a0 * &s.g + &b0 * &s.u;
        s.y = &m0 * &s.g;
        let (a, b) = fit_ab(&s).unwrap();
        let m = fit_m(&s).unwrap();
        let w1 = compute_w1(&s, &hstack(&a, &b).unwrap(), &m, 1.0, 1.0).unwrap();
        let model = KoopmanModel { a, b, m, h: DMatrix::zeros(1, 4), theta_version: 0, tau: 0 };
        let worst = sample_residuals(&s, &model.k_matrix()).unwrap().into_iter().fold(0.0, f64::max);
        assert!(worst < 1e-12 && worst <= w1.value + 1e-12);
    }

    #[test]
    fn quadratic_descent_below_two_over_l() {
        // f(x) = 0.5 * L x², gradient step x ← x − αLx
        let l = 4.0;
        let run = |alpha: f64| -> Result<Vec<f64>> {
            let mut x: f64 = 1.0;
            Ok((0..30)
                .map(|_| {
                    let f = 0.5 * l * x * x;
                    x -= alpha * l * x;
                    f
                })
                .collect())
        };
        let good = descent_check(&run(0.4).unwrap(), 0.4, Some(l));
        assert!(good.monotone && good.below_quadratic_limit == Some(true));
        let bad = descent_check(&run(0.6).unwrap(), 0.6, Some(l));
        assert!(!bad.monotone && bad.below_quadratic_limit == Some(false));
        let thr = bisect_step_threshold(run, 0.1, 2.0, 30).unwrap();
        assert!((thr.stable - 0.5).abs() < 1e-6 && thr.unstable > 0.5);
    }

    #[test]
    fn gradient_decay_exponent_of_inverse_sqrt() {
        let norms: Vec<f64> = (1..200).map(|s| 1.0 / (s as f64).sqrt()).collect();
        assert!((gradient_decay_exponent(&norms).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_uses_worst_neighbor() {
        assert_eq!(activation_threshold(0.5, 10, 1.0, [1.0, 3.0, 2.0]), 0.25 + 0.4);
    }
}
