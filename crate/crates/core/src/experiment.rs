//! Run configuration, experiment orchestration and artifact persistence.
//!
//! A run is fully described by one TOML file with the sections `plant`,
//! `agents`, `graph`, `engine`, `batches` and `output` plus a top-level `seed`
//! and `horizon`. See `configs/` for annotated examples.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batching::{partition, BetaSchedule, DataBatch, MinBetaPolicy};
use crate::engine::{
    prediction_errors, BatchSummary, ConsensusNormalization, Engine, EngineConfig, ExchangeFrequency, OptimizerMode,
    Variant,
};
use crate::error::{DdklError, Result};
use crate::linalg::{rank, DEFAULT_TOL};
use crate::net::AdamParams;
use crate::network::{build_graph, GraphTopology};
use crate::systems::{
    random_initial_state, simulate, InputCoupling, InputPolicy, PlantKind, PlantSpec, Trajectory, TvlParams, VdpParams,
};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Simulated transitions `T`; the trajectory has `T + 1` states.
    pub horizon: usize,
    pub plant: PlantSection,
    pub agents: Vec<AgentSection>,
    pub graph: GraphSection,
    #[serde(default)]
    pub engine: EngineSection,
    pub batches: BatchSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantName {
    Tvl,
    Vdp,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplingName {
    #[default]
    Random,
    Leading,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum NoiseStd {
    Scalar(f64),
    PerState(Vec<f64>),
}

impl Default for NoiseStd {
    fn default() -> Self {
        NoiseStd::Scalar(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub kind: PlantName,
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub noise_std: NoiseStd,
    #[serde(default = "one")]
    pub x0_std: f64,
    /// `[radius, angle]` per pole (tvl).
    #[serde(default)]
    pub poles: Vec<[f64; 2]>,
    #[serde(default)]
    pub drift_rate: f64,
    #[serde(default = "one")]
    pub input_gain: f64,
    #[serde(default)]
    pub coupling: CouplingName,
    /// vdp damping.
    #[serde(default = "one")]
    pub mu0: f64,
    #[serde(default)]
    pub amplitude: f64,
    /// csv trajectory file, relative to the config file.
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub input: InputSection,
}

fn default_dt() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputName {
    Zero,
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    #[serde(default)]
    pub kind: InputName,
    #[serde(default = "minus_one")]
    pub low: f64,
    #[serde(default = "one")]
    pub high: f64,
}

fn minus_one() -> f64 {
    -1.0
}

impl Default for InputSection {
    fn default() -> Self {
        Self { kind: InputName::Uniform, low: -1.0, high: 1.0 }
    }
}

/// Matrix entry: a number or a fraction string such as `"4/7"`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Number(f64),
    Text(String),
}

impl Entry {
    pub fn value(&self) -> Result<f64> {
        match self {
            Entry::Number(v) => Ok(*v),
            Entry::Text(s) => parse_fraction(s),
        }
    }
}

/// Parses `"p/q"` or a plain decimal.
pub fn parse_fraction(text: &str) -> Result<f64> {
    let t = text.trim();
    let bad = || DdklError::Parse(format!("invalid matrix entry {text:?}"));
    let v = match t.split_once('/') {
        Some((p, q)) => {
            let (p, q): (f64, f64) = (p.trim().parse().map_err(|_| bad())?, q.trim().parse().map_err(|_| bad())?);
            if q == 0.0 {
                return Err(bad());
            }
            p / q
        }
        None => t.parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    /// Rows of `C_i`.
    pub c: Vec<Vec<Entry>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphName {
    Complete,
    Ring,
    DirectedRing,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub kind: GraphName,
    /// `[from, to]` pairs: `to` receives from `from`.
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Ddkl,
    Ddkl1,
}

impl VariantName {
    fn variant(self) -> Variant {
        match self {
            VariantName::Ddkl => Variant::Ddkl,
            VariantName::Ddkl1 => Variant::Ddkl1,
        }
    }
}

pub fn variant_tag(v: Variant) -> &'static str {
    match v {
        Variant::Ddkl => "ddkl",
        Variant::Ddkl1 => "ddkl1",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationName {
    PerDegree,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeName {
    PerIteration,
    PerBatch,
}

/// Every field falls back to the engine default.
#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub variant: Option<VariantName>,
    /// Additional variants run on the same data for comparison.
    #[serde(default)]
    pub compare: Vec<VariantName>,
    pub lift_dim: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub w: Option<f64>,
    pub w_bar: Option<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub eps3: Option<f64>,
    pub max_inner: Option<usize>,
    pub consensus_cap: Option<usize>,
    pub optimizer: Option<OptimizerName>,
    pub alpha: Option<f64>,
    pub adam_lr: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_weight_decay: Option<f64>,
    pub weights_in_inner_loss: Option<bool>,
    pub normalization: Option<NormalizationName>,
    pub exchange: Option<ExchangeName>,
    pub w1_alpha1: Option<f64>,
    pub w1_alpha2: Option<f64>,
    pub observability_tol: Option<f64>,
    pub standardize_inputs: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MinBetaName {
    #[default]
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub beta: Option<usize>,
    /// Per-batch sizes; the last one repeats.
    pub betas: Option<Vec<usize>>,
    pub max_batches: Option<usize>,
    #[serde(default)]
    pub min_beta_policy: MinBetaName,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub save_models: bool,
    #[serde(default = "yes")]
    pub plots: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/out")
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out(), save_models: true, plots: true }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DdklError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; a relative csv plant path is resolved against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            DdklError::Parse(msg) => DdklError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(p) = cfg.plant.path.as_mut() {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(DdklError::config("agents", "at least one agent is required"));
        }
        let n = self.plant.n;
        for (i, a) in self.agents.iter().enumerate() {
            if a.c.is_empty() {
                return Err(DdklError::config(format!("agents[{i}].c"), "needs at least one row"));
            }
            if let Some(row) = a.c.iter().find(|r| r.len() != n) {
                return Err(DdklError::config(
                    format!("agents[{i}].c"),
                    format!("row has {} entries, plant.n is {n}", row.len()),
                ));
            }
        }
        if self.batches.beta.is_none() == self.batches.betas.is_none() {
            return Err(DdklError::config("batches", "set exactly one of beta or betas"));
        }
        if self.graph.kind == GraphName::Edges && self.graph.edges.is_empty() && self.agents.len() > 1 {
            return Err(DdklError::config("graph.edges", "edge list required for kind = \"edges\""));
        }
        self.engine_config()?.validate()?;
        self.plant_spec()?.validate()
    }

    pub fn c_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let rows = a.c.len();
                let mut c = DMatrix::zeros(rows, self.plant.n);
                for (r, row) in a.c.iter().enumerate() {
                    for (col, e) in row.iter().enumerate() {
                        c[(r, col)] = e.value().map_err(|err| DdklError::config(format!("agents[{i}].c[{r}][{col}]"), err.to_string()))?;
                    }
                }
                Ok(c)
            })
            .collect()
    }

    pub fn graph(&self) -> Result<GraphTopology> {
        let nodes = self.agents.len();
        match self.graph.kind {
            GraphName::Complete => GraphTopology::complete(nodes),
            GraphName::Ring => GraphTopology::ring(nodes),
            GraphName::DirectedRing => GraphTopology::directed_ring(nodes),
            GraphName::Edges => {
                let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|e| (e[0], e[1])).collect();
                build_graph(nodes, &edges)
            }
        }
    }

    pub fn plant_spec(&self) -> Result<PlantSpec> {
        let p = &self.plant;
        let kind = match p.kind {
            PlantName::Tvl => PlantKind::TimeVaryingLinear(TvlParams {
                poles: p.poles.iter().map(|q| (q[0], q[1])).collect(),
                drift_rate: p.drift_rate,
                input_gain: p.input_gain,
                coupling: match p.coupling {
                    CouplingName::Random => InputCoupling::Random,
                    CouplingName::Leading => InputCoupling::Leading,
                },
            }),
            PlantName::Vdp => PlantKind::VanDerPolDrift(VdpParams {
                mu0: p.mu0,
                amplitude: p.amplitude,
                drift_rate: p.drift_rate,
                input_gain: p.input_gain,
            }),
            PlantName::Csv => PlantKind::CustomCsv(
                p.path.clone().ok_or_else(|| DdklError::config("plant.path", "required for kind = \"csv\""))?,
            ),
        };
        let noise_std = match &p.noise_std {
            NoiseStd::Scalar(s) => vec![*s; p.n],
            NoiseStd::PerState(v) => v.clone(),
        };
        Ok(PlantSpec { kind, n: p.n, m: p.m, dt: p.dt, noise_std, seed: self.seed })
    }

    pub fn input_policy(&self) -> InputPolicy {
        match self.plant.input.kind {
            InputName::Zero => InputPolicy::Zero,
            InputName::Uniform => InputPolicy::Uniform {
                low: self.plant.input.low,
                high: self.plant.input.high,
                seed: self.seed.wrapping_add(2),
            },
        }
    }

    pub fn schedule(&self) -> BetaSchedule {
        match (&self.batches.beta, &self.batches.betas) {
            (Some(b), _) => BetaSchedule::Constant(*b),
            (None, Some(v)) => BetaSchedule::Explicit(v.clone()),
            (None, None) => BetaSchedule::Constant(0),
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let primary = self.engine.variant.map_or(Variant::Ddkl, VariantName::variant);
        let mut out = vec![primary];
        for v in self.engine.compare.iter().map(|v| v.variant()) {
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let e = &self.engine;
        let d = EngineConfig::default();
        let da = AdamParams::default();
        Ok(EngineConfig {
            lift_dim: e.lift_dim.unwrap_or(d.lift_dim),
            hidden: e.hidden.clone().unwrap_or(d.hidden),
            w: e.w.unwrap_or(d.w),
            w_bar: e.w_bar.unwrap_or(d.w_bar),
            eps1: e.eps1.unwrap_or(d.eps1),
            eps2: e.eps2.unwrap_or(d.eps2),
            eps3: e.eps3.unwrap_or(d.eps3),
            max_inner: e.max_inner.unwrap_or(d.max_inner),
            consensus_cap: e.consensus_cap.or(d.consensus_cap),
            alpha: e.alpha.unwrap_or(d.alpha),
            optimizer: match e.optimizer {
                Some(OptimizerName::Adam) => OptimizerMode::Adam,
                Some(OptimizerName::Gd) => OptimizerMode::ConstantGd,
                None => d.optimizer,
            },
            adam: AdamParams {
                lr: e.adam_lr.unwrap_or(da.lr),
                beta1: e.adam_beta1.unwrap_or(da.beta1),
                beta2: e.adam_beta2.unwrap_or(da.beta2),
                eps: da.eps,
                weight_decay: e.adam_weight_decay.unwrap_or(da.weight_decay),
            },
            variant: e.variant.map_or(d.variant, VariantName::variant),
            weights_in_inner_loss: e.weights_in_inner_loss.unwrap_or(d.weights_in_inner_loss),
            normalization: match e.normalization {
                Some(NormalizationName::Sum) => ConsensusNormalization::Sum,
                Some(NormalizationName::PerDegree) => ConsensusNormalization::PerDegree,
                None => d.normalization,
            },
            exchange: match e.exchange {
                Some(ExchangeName::PerBatch) => ExchangeFrequency::PerBatch,
                Some(ExchangeName::PerIteration) => ExchangeFrequency::PerIteration,
                None => d.exchange,
            },
            w1_alphas: (e.w1_alpha1.unwrap_or(d.w1_alphas.0), e.w1_alpha2.unwrap_or(d.w1_alphas.1)),
            observability_tol: e.observability_tol.unwrap_or(d.observability_tol),
            standardize_inputs: e.standardize_inputs.unwrap_or(d.standardize_inputs),
            seed: self.seed,
        })
    }
}

/// Severity of one audit line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn has_failures(&self) -> bool {
        self.lines.iter().any(|l| l.status == CheckStatus::Fail)
    }

    pub fn status_of(&self, name: &str) -> Option<CheckStatus> {
        self.lines.iter().find(|l| l.name == name).map(|l| l.status)
    }

    fn push(&mut self, name: &'static str, status: CheckStatus, detail: String) {
        self.lines.push(CheckLine { name, status, detail });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let tag = match l.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Warn => "WARN",
                CheckStatus::Fail => "FAIL",
            };
            writeln!(f, "{tag} {}: {}", l.name, l.detail)?;
        }
        Ok(())
    }
}

/// Audits a configuration without running it.
pub fn check_config(cfg: &RunConfig) -> Result<CheckReport> {
    let mut rep = CheckReport::default();
    let n = cfg.plant.n;
    let cs = cfg.c_matrices()?;
    let stacked = crate::linalg::vstack_all(&cs)?;
    let stacked_rank = rank(&stacked, DEFAULT_TOL)?;
    rep.push(
        "stacked-c-rank",
        if stacked_rank >= n { CheckStatus::Pass } else { CheckStatus::Warn },
        format!("rank {stacked_rank} of {n} columns"),
    );
    let mut deficient = Vec::new();
    for (i, c) in cs.iter().enumerate() {
        if rank(c, DEFAULT_TOL)? < c.nrows() {
            deficient.push(i);
        }
    }
    rep.push(
        "agent-c-row-rank",
        if deficient.is_empty() { CheckStatus::Pass } else { CheckStatus::Fail },
        if deficient.is_empty() { format!("all {} agents full row rank", cs.len()) } else { format!("row-rank deficient agents {deficient:?}") },
    );
    let ec = cfg.engine_config()?;
    let needed = ec.lift_dim + cfg.plant.m;
    let min_beta = match cfg.schedule() {
        BetaSchedule::Constant(b) => b,
        BetaSchedule::Explicit(v) => v.iter().copied().min().unwrap_or(0),
    };
    rep.push(
        "beta-vs-r-plus-m",
        if min_beta >= needed { CheckStatus::Pass } else { CheckStatus::Fail },
        format!("smallest beta {min_beta}, r + m = {needed}"),
    );
    match cfg.graph() {
        Ok(g) => rep.push("graph-strongly-connected", CheckStatus::Pass, format!("{} nodes", g.nodes())),
        Err(e) => rep.push("graph-strongly-connected", CheckStatus::Fail, e.to_string()),
    }
    match cfg.plant_spec().and_then(|p| p.validate()) {
        Ok(()) => rep.push("plant", CheckStatus::Pass, cfg.plant_spec()?.kind.tag().to_string()),
        Err(e) => rep.push("plant", CheckStatus::Fail, e.to_string()),
    }
    Ok(rep)
}

/// Simulated data split into synchronized per-agent batches.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub trajectory: Trajectory,
    pub cs: Vec<DMatrix<f64>>,
    /// `batches[τ][i]`.
    pub batches: Vec<Vec<DataBatch<f64>>>,
    /// Ground-truth states per batch, `n x (β+1)`.
    pub truth: Vec<DMatrix<f64>>,
}

pub fn prepare(cfg: &RunConfig, max_batches: Option<usize>) -> Result<PreparedData> {
    let plant = cfg.plant_spec()?;
    let cs = cfg.c_matrices()?;
    let stacked_rank = rank(&crate::linalg::vstack_all(&cs)?, DEFAULT_TOL)?;
    if stacked_rank < cfg.plant.n {
        log::warn!("stacked C has rank {stacked_rank} < {}; state consensus cannot be exact", cfg.plant.n);
    } else {
        log::info!("stacked C has full column rank {stacked_rank}");
    }
    let x0 = random_initial_state(plant.n, cfg.plant.x0_std, cfg.seed.wrapping_add(1))?;
    let trajectory = simulate(&plant, &x0, &cfg.input_policy(), cfg.horizon)?;
    let schedule = cfg.schedule();
    let min_beta = Some((
        cfg.engine_config()?.lift_dim + cfg.plant.m,
        match cfg.batches.min_beta_policy {
            MinBetaName::Warn => MinBetaPolicy::Warn,
            MinBetaName::Error => MinBetaPolicy::Error,
        },
    ));
    let mut per_agent = Vec::with_capacity(cs.len());
    for (i, c) in cs.iter().enumerate() {
        let y = c * &trajectory.states;
        per_agent.push(partition(i, &y, &trajectory.inputs, &schedule, min_beta)?);
    }
    let mut count = per_agent[0].len();
    for limit in [max_batches, cfg.batches.max_batches].into_iter().flatten() {
        count = count.min(limit);
    }
    let mut batches = vec![Vec::with_capacity(cs.len()); count];
    for agent_batches in per_agent {
        for (tau, b) in agent_batches.into_iter().take(count).enumerate() {
            batches[tau].push(b);
        }
    }
    let truth = batches
        .iter()
        .map(|bs| {
            let idx = bs[0].index;
            trajectory.states.columns(idx.start, idx.beta + 1).into_owned()
        })
        .collect();
    Ok(PreparedData { trajectory, cs, batches, truth })
}

/// Leading batches merged at most into the initial window when its fit is
/// ill-conditioned.
pub const MAX_INIT_MERGES: usize = 3;

fn is_conditioning(e: &DdklError) -> bool {
    match e {
        DdklError::Agent { cause, .. } => is_conditioning(cause),
        DdklError::IllConditioned { .. } | DdklError::RankDeficient { .. } => true,
        _ => false,
    }
}

/// Feeds all prepared batches to a fresh engine of the given variant. The
/// callback sees the engine after every batch together with that batch's data.
pub fn drive<F>(cfg: &RunConfig, data: &PreparedData, variant: Variant, mut on_batch: F) -> Result<Engine<f64>>
where
    F: FnMut(&Engine<f64>, &BatchSummary, &[DataBatch<f64>], &DMatrix<f64>) -> Result<()>,
{
    let mut ec = cfg.engine_config()?;
    ec.variant = variant;
    let agents = crate::engine::build_agents(&ec, &data.cs)?;
    let mut engine = Engine::new(ec, cfg.graph()?, agents)?;
    let mut pending = data.batches.iter().zip(&data.truth);
    let Some((first, first_x)) = pending.next() else {
        return Err(DdklError::InsufficientData { needed: 1, available: 0 });
    };
    let (mut bs, mut x) = (first.clone(), first_x.clone());
    let mut merges = 0;
    loop {
        match engine.initialize(&bs, Some(&x)) {
            Ok(summary) => {
                on_batch(&engine, &summary, &bs, &x)?;
                break;
            }
            Err(e) if is_conditioning(&e) && merges < MAX_INIT_MERGES => {
                let Some((next, next_x)) = pending.next() else { return Err(e) };
                log::warn!("initial window ill-conditioned ({e}); merging batch {}", next[0].index.tau);
                bs = bs.iter().zip(next).map(|(a, b)| a.merge(b)).collect::<Result<_>>()?;
                let beta = x.ncols() - 1;
                let mut joined = DMatrix::zeros(x.nrows(), beta + next_x.ncols());
                joined.columns_mut(0, beta).copy_from(&x.columns(0, beta));
                joined.columns_mut(beta, next_x.ncols()).copy_from(next_x);
                x = joined;
                merges += 1;
            }
            Err(e) => return Err(e),
        }
    }
    for (bs, x) in pending {
        let summary = engine.run_batch(bs, Some(x))?;
        log::info!(
            "{} batch {}: rounds {}, H gap {:e}, mean state error {:e}",
            variant_tag(variant),
            summary.tau,
            summary.rounds,
            summary.h_gap,
            mean(summary.state_err.iter().flatten().copied()),
        );
        on_batch(&engine, &summary, bs, x)?;
    }
    Ok(engine)
}

/// Trains one variant over all prepared batches.
pub fn run_variant(cfg: &RunConfig, data: &PreparedData, variant: Variant) -> Result<Engine<f64>> {
    drive(cfg, data, variant, |_, _, _, _| Ok(()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_batches: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub engines: Vec<(Variant, Engine<f64>)>,
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest {
    version: String,
    seed: u64,
    plant_seed: u64,
    initial_state_seed: u64,
    input_seed: u64,
    max_batches: Option<usize>,
    config_sha256: String,
    variants: Vec<String>,
    artifacts: Vec<ArtifactEntry>,
    config: String,
}

#[derive(Serialize)]
struct ArtifactEntry {
    path: String,
    sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer {
    root: PathBuf,
    written: Vec<(PathBuf, String)>,
}

impl Writer {
    fn put(&mut self, rel: impl AsRef<Path>, contents: &str) -> Result<()> {
        let path = self.root.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents)?;
        self.written.push((rel.as_ref().to_path_buf(), hex_digest(contents.as_bytes())));
        Ok(())
    }
}

/// Runs every configured variant and writes all artifacts under the output
/// directory.
pub fn run_experiment(mut cfg: RunConfig, config_text: &str, overrides: &Overrides) -> Result<RunOutcome> {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    let out_dir = overrides.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let data = prepare(&cfg, overrides.max_batches)?;
    let mut w = Writer { root: out_dir.clone(), written: Vec::new() };
    w.put("trajectory.csv", &data.trajectory.to_csv())?;

    let mut engines = Vec::new();
    let mut estimation = String::from("variant,tau,k,agent,err\n");
    let mut consensus = String::from("variant,tau,rounds,converged,h_gap,ab_gap,gamma,constraint_residual\n");
    let mut traces = String::from("variant,tau,round,gap\n");
    for variant in cfg.variants() {
        let tag = variant_tag(variant);
        let engine = drive(&cfg, &data, variant, |engine, summary, bs, x| {
            let tau = summary.tau;
            for (agent, batch) in engine.agents.iter().zip(bs) {
                let model = agent.model.as_ref().expect("model after batch");
                for (k, e) in prediction_errors(model, &agent.net, batch, x)?.into_iter().enumerate() {
                    estimation.push_str(&format!("{tag},{tau},{},{},{e}\n", batch.index.start + k + 1, agent.id));
                }
                if cfg.output.save_models {
                    if let Some(saved) = agent.saved.as_ref().filter(|m| m.tau == tau) {
                        let bundle = saved.to_bundle(&agent.net.to_checkpoint());
                        w.put(format!("models/{tag}/agent{}_tau{tau}.model", agent.id), &bundle)?;
                    }
                }
            }
            let gamma = summary.gamma.map_or(String::new(), |g| g.gamma.to_string());
            consensus.push_str(&format!(
                "{tag},{tau},{},{},{},{},{gamma},{}\n",
                summary.rounds, summary.consensus_converged, summary.h_gap, summary.ab_gap, summary.constraint_residual
            ));
            for (r, g) in summary.gap_trace.iter().enumerate() {
                traces.push_str(&format!("{tag},{tau},{r},{g}\n"));
            }
            Ok(())
        })?;
        let name = if engines.is_empty() { "metrics.csv".to_string() } else { format!("metrics_{tag}.csv") };
        w.put(name, &engine.metrics.to_csv())?;
        engines.push((variant, engine));
    }
    w.put("estimation.csv", &estimation)?;
    w.put("consensus.csv", &consensus)?;
    w.put("consensus_trace.csv", &traces)?;
    if cfg.output.plots {
        w.put("plot_estimation.py", PLOT_ESTIMATION)?;
        w.put("plot_consensus.py", PLOT_CONSENSUS)?;
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        plant_seed: cfg.seed,
        initial_state_seed: cfg.seed.wrapping_add(1),
        input_seed: cfg.seed.wrapping_add(2),
        max_batches: overrides.max_batches.or(cfg.batches.max_batches),
        config_sha256: hex_digest(config_text.as_bytes()),
        variants: cfg.variants().into_iter().map(|v| variant_tag(v).to_string()).collect(),
        artifacts: w
            .written
            .iter()
            .map(|(p, h)| ArtifactEntry { path: p.display().to_string(), sha256: h.clone() })
            .collect(),
        config: config_text.to_string(),
    };
    let text = toml::to_string(&manifest).map_err(|e| DdklError::Parse(e.to_string()))?;
    w.put("manifest.toml", &text)?;
    let artifacts = w.written.iter().map(|(p, _)| out_dir.join(p)).collect();
    Ok(RunOutcome { engines, out_dir, artifacts })
}

const PLOT_ESTIMATION: &str = r#"import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "estimation.csv"
series = defaultdict(list)
with open(path) as f:
    for row in csv.DictReader(f):
        series[(row["variant"], int(row["agent"]))].append((int(row["k"]), float(row["err"])))

fig, ax = plt.subplots(figsize=(7, 4))
for (variant, agent), pts in sorted(series.items()):
    pts.sort()
    ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"{variant} agent {agent + 1}", lw=0.8)
ax.set_xlabel("k")
ax.set_ylabel("estimation error")
ax.set_yscale("log")
ax.set_title("Estimation errors")
ax.legend(fontsize=7, ncol=2)
fig.tight_layout()
fig.savefig("estimation.png", dpi=150)
"#;

const PLOT_CONSENSUS: &str = r#"import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "consensus.csv"
gaps = defaultdict(list)
with open(path) as f:
    for row in csv.DictReader(f):
        gaps[row["variant"]].append((int(row["tau"]), float(row["h_gap"]), float(row["ab_gap"])))

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
for variant, pts in sorted(gaps.items()):
    pts.sort()
    taus = [p[0] for p in pts]
    ax1.semilogy(taus, [max(p[1], 1e-18) for p in pts], marker="o", label=variant)
    ax2.semilogy(taus, [max(p[2], 1e-18) for p in pts], marker="o", label=variant)
ax1.set_title("max pairwise gap of H")
ax2.set_title("max pairwise gap of [A, B]")
for ax in (ax1, ax2):
    ax.set_xlabel("batch")
    ax.legend()
fig.suptitle("Consensus of dynamics matrices")
fig.tight_layout()
fig.savefig("consensus.png", dpi=150)
"#;

/// One oracle suite outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub suite: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: max error {:e} (tolerance {:e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.max_error,
            self.tolerance
        )
    }
}

pub const ORACLE_SUITES: [&str; 3] = ["recursive-ls", "gradient", "stacked-solve"];

/// Runs one named suite, or all of them for `"all"`.
pub fn run_oracle(suite: &str, seed: u64) -> Result<Vec<OracleReport>> {
    match suite {
        "recursive-ls" => Ok(vec![oracle_recursive_ls(seed)?]),
        "gradient" => Ok(vec![oracle_gradient(seed)?]),
        "stacked-solve" => Ok(vec![oracle_stacked_solve(seed)?]),
        "all" => Ok(vec![oracle_recursive_ls(seed)?, oracle_gradient(seed)?, oracle_stacked_solve(seed)?]),
        other => Err(DdklError::InvalidInput(format!(
            "unknown oracle suite {other:?}; expected one of {ORACLE_SUITES:?} or \"all\""
        ))),
    }
}

fn seeded(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    use rand::Rng;
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Iterated block updates vs one least-squares solve on concatenated stacks
/// (QR-based, independent of the pseudoinverse path).
fn oracle_recursive_ls(seed: u64) -> Result<OracleReport> {
    use crate::batching::LiftStacks;
    use crate::regression::{recursive_update, RecursiveState};
    use rand::SeedableRng;
    let (r, m, ni, beta, batches) = (8, 2, 3, 20, 4);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let stacks: Vec<LiftStacks<f64>> = (0..batches)
        .map(|_| LiftStacks {
            y: seeded(ni, beta, &mut rng),
            y_next: seeded(ni, beta, &mut rng),
            u: seeded(m, beta, &mut rng),
            g: seeded(r, beta, &mut rng),
            g_next: seeded(r, beta, &mut rng),
        })
        .collect();
    let mut state = RecursiveState::from_stacks(&stacks[0])?;
    for s in &stacks[1..] {
        state = recursive_update(&state, s)?;
    }
    let cat = |f: &dyn Fn(&LiftStacks<f64>) -> DMatrix<f64>| {
        let parts: Vec<DMatrix<f64>> = stacks.iter().map(f).collect();
        let mut out = DMatrix::zeros(parts[0].nrows(), parts.iter().map(|p| p.ncols()).sum());
        let mut at = 0;
        for p in parts {
            out.columns_mut(at, p.ncols()).copy_from(&p);
            at += p.ncols();
        }
        out
    };
    let chi = cat(&|s| s.chi());
    let g = cat(&|s| s.g.clone());
    let lstsq = |design_t: DMatrix<f64>, rhs_t: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let qr = design_t.qr();
        let qtb = qr.q().transpose() * rhs_t;
        let sol = qr
            .r()
            .solve_upper_triangular(&qtb)
            .ok_or(DdklError::NumericalFailure { term: 0, name: "oracle triangular solve" })?;
        Ok(sol.transpose())
    };
    let ab = lstsq(chi.transpose(), cat(&|s| s.g_next.clone()).transpose())?;
    let mm = lstsq(g.transpose(), cat(&|s| s.y.clone()).transpose())?;
    let err = [
        rel_err(&state.a(), &ab.columns(0, r).into_owned()),
        rel_err(&state.b(), &ab.columns(r, m).into_owned()),
        rel_err(&state.m, &mm),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(OracleReport { suite: "recursive-ls", passed: err <= 1e-8, max_error: err, tolerance: 1e-8 })
}

/// Analytic gradient of the full inner loss vs central differences on a
/// 4/8/5 -> 3 observable.
fn oracle_gradient(seed: u64) -> Result<OracleReport> {
    use crate::engine::InnerObjective;
    use crate::net::ObservableNet;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let beta = 10;
    let y = seeded(4, beta + 1, &mut rng);
    let u = seeded(2, beta, &mut rng);
    let batch = partition(0, &y, &u, &BetaSchedule::Constant(beta), None)?.remove(0);
    let net = ObservableNet::<f64>::glorot(4, &[8, 5], 3, seed)?;
    let (a, b, m, h) = (seeded(3, 3, &mut rng), seeded(3, 2, &mut rng), seeded(4, 3, &mut rng), seeded(6, 3, &mut rng));
    let nb = seeded(6, beta, &mut rng);
    let obj = InnerObjective {
        batch: &batch,
        a: &a,
        b: &b,
        m: &m,
        consensus: Some((&h, vec![&nb])),
        degree: 2,
        normalization: ConsensusNormalization::PerDegree,
        weights: None,
    };
    let (_, grad) = obj.evaluate(&net)?;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.param_count() {
        let mut plus = net.clone();
        let mut minus = net.clone();
        let mut tp = net.theta().to_vec();
        let mut tm = tp.clone();
        tp[i] += step;
        tm[i] -= step;
        plus.set_theta(tp)?;
        minus.set_theta(tm)?;
        let fd = (obj.value(&plus)?.total - obj.value(&minus)?.total) / (2.0 * step);
        let scale = fd.abs().max(grad.values[i].abs());
        if scale > 1e-8 {
            worst = worst.max((fd - grad.values[i]).abs() / scale);
        }
    }
    Ok(OracleReport { suite: "gradient", passed: worst < 1e-4, max_error: worst, tolerance: 1e-4 })
}

/// Five-agent observation matrices used by the bundled configs.
pub fn reference_c_matrices() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(1, 6, &[4.0 / 7.0, 3.0 / 7.0, 0.0, 0.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 6, &[0.0, 0.5, 0.25, 0.0, 0.25, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        DMatrix::from_row_slice(1, 6, &[0.0, 1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0, 0.0]),
        DMatrix::from_row_slice(1, 6, &[0.0, 0.0, 0.4, 0.0, 0.6, 0.0]),
        DMatrix::from_row_slice(1, 6, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
    ]
}

/// Arcs `[from, to]` of the five-agent network used by the bundled configs,
/// self-arcs omitted. Among all strongly connected digraphs on five nodes it
/// minimizes the 300-round contraction of projection consensus on
/// [`reference_c_matrices`].
pub const REFERENCE_ARCS: [(usize, usize); 8] = [(0, 3), (0, 4), (1, 0), (1, 3), (2, 1), (3, 1), (3, 2), (4, 3)];

pub fn reference_graph() -> GraphTopology {
    let mut edges: Vec<(usize, usize)> = (0..5).map(|i| (i, i)).collect();
    edges.extend(REFERENCE_ARCS);
    build_graph(5, &edges).expect("reference graph is strongly connected")
}

/// Projection consensus on the reference observation matrices vs a direct
/// solve of the stacked system.
fn oracle_stacked_solve(seed: u64) -> Result<OracleReport> {
    use crate::consensus::{run_to_tolerance, ConsensusProblem};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cs = reference_c_matrices();
    let truth = seeded(6, 8, &mut rng);
    let rhs: Vec<DMatrix<f64>> = cs.iter().map(|c| c * &truth).collect();
    let stacked = crate::linalg::vstack_all(&cs)?;
    let direct = stacked
        .clone()
        .lu()
        .solve(&crate::linalg::vstack_all(&rhs)?)
        .ok_or(DdklError::NumericalFailure { term: 0, name: "oracle stacked solve" })?;
    let problem = ConsensusProblem::new(cs, rhs)?;
    let out = run_to_tolerance(&problem, &reference_graph(), 1e-13, 5000)?;
    let err = out.solutions.iter().map(|z| (z - &direct).norm()).fold(0.0, f64::max);
    Ok(OracleReport { suite: "stacked-solve", passed: err <= 1e-8, max_error: err, tolerance: 1e-8 })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
horizon = 60

[plant]
kind = "tvl"
n = 6
m = 2
poles = [[0.95, 0.0], [0.6, 0.0], [0.5, 0.3], [0.4, 0.0], [0.3, 0.0]]
drift_rate = 0.01

[[agents]]
c = [["4/7", "3/7", 0, 0, 0, 0]]
[[agents]]
c = [[0, "1/2", "1/4", 0, "1/4", 0], [0, 0, 1, 0, 0, 0]]
[[agents]]
c = [[0, "1/3", 0, "2/3", 0, 0]]
[[agents]]
c = [[0, 0, "2/5", 0, "3/5", 0]]
[[agents]]
c = [[0, 0, 0, 0, 0, 1]]

[graph]
kind = "directed_ring"

[engine]
lift_dim = 8
hidden = [16, 16]
max_inner = 3
optimizer = "adam"

[batches]
beta = 20
max_batches = 2
"#;

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fraction("4/7").unwrap(), 4.0 / 7.0);
        assert_eq!(parse_fraction(" 0.25 ").unwrap(), 0.25);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn config_roundtrip_and_matrices() {
        let cfg = RunConfig::parse(SMALL).unwrap();
        let cs = cfg.c_matrices().unwrap();
        for (c, r) in cs.iter().zip(reference_c_matrices()) {
            assert!((c - r).norm() < 1e-15);
        }
        assert_eq!(cfg.engine_config().unwrap().hidden, vec![16, 16]);
        assert_eq!(cfg.variants(), vec![Variant::Ddkl]);
    }

    #[test]
    fn unknown_field_reports_location() {
        let text = SMALL.replace("drift_rate = 0.01", "drift_rate = 0.01\nbogus = 1");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line"), "{err}");
    }

    #[test]
    fn bad_row_length_names_field() {
        let text = SMALL.replace("c = [[0, 0, 0, 0, 0, 1]]", "c = [[0, 0, 0, 0, 1]]");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("agents[4].c"), "{err}");
    }

    #[test]
    fn check_flags_short_batches_and_dropped_agent() {
        let cfg = RunConfig::parse(SMALL).unwrap();
        let rep = check_config(&cfg).unwrap();
        assert!(!rep.has_failures(), "{rep}");
        assert_eq!(rep.status_of("stacked-c-rank"), Some(CheckStatus::Pass));

        let short = RunConfig::parse(&SMALL.replace("beta = 20", "beta = 9")).unwrap();
        let rep = check_config(&short).unwrap();
        assert_eq!(rep.status_of("beta-vs-r-plus-m"), Some(CheckStatus::Fail));

        let dropped = SMALL.replace("[[agents]]\nc = [[0, 0, 0, 0, 0, 1]]\n", "");
        let rep = check_config(&RunConfig::parse(&dropped).unwrap()).unwrap();
        assert_eq!(rep.status_of("stacked-c-rank"), Some(CheckStatus::Warn));
        assert!(rep.to_string().contains("rank 5 of 6"));
    }

    #[test]
    fn prepared_batches_are_synchronized() {
        let cfg = RunConfig::parse(SMALL).unwrap();
        let data = prepare(&cfg, None).unwrap();
        assert_eq!(data.batches.len(), 2);
        for (tau, bs) in data.batches.iter().enumerate() {
            assert_eq!(bs.len(), 5);
            assert!(bs.iter().all(|b| b.index.tau == tau && b.index.start == 20 * tau));
            let x = &data.truth[tau];
            for (b, c) in bs.iter().zip(&data.cs) {
                assert!((c * x - &b.observations).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_suites_pass() {
        for rep in run_oracle("all", 11).unwrap() {
            assert!(rep.passed, "{rep}");
        }
        assert!(run_oracle("nope", 0).is_err());
    }

    #[test]
    fn run_writes_reproducible_artifacts() {
        let cfg = RunConfig::parse(SMALL).unwrap();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut metrics = Vec::new();
        for d in &dirs {
            let ov = Overrides { out: Some(d.path().to_path_buf()), ..Default::default() };
            let outcome = run_experiment(cfg.clone(), SMALL, &ov).unwrap();
            for f in ["metrics.csv", "estimation.csv", "consensus.csv", "manifest.toml", "plot_estimation.py"] {
                assert!(outcome.out_dir.join(f).exists(), "{f}");
            }
            metrics.push(fs::read(d.path().join("metrics.csv")).unwrap());
            let manifest = fs::read_to_string(d.path().join("manifest.toml")).unwrap();
            assert!(manifest.contains("config_sha256"));
        }
        assert_eq!(metrics[0], metrics[1]);
        assert_eq!(fs::read(dirs[0].path().join("manifest.toml")).unwrap(), fs::read(dirs[1].path().join("manifest.toml")).unwrap());
    }
}
