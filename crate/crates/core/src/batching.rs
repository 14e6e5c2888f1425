//! Overlapping batch partitioning and lifted data stacks.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{DdklError, Result};
use crate::linalg::vstack;
use crate::net::ObservableNet;
use crate::scalar::Real;

/// Position of batch `τ` in the sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchIndex {
    pub tau: usize,
    /// First sample `k_τ`.
    pub start: usize,
    /// Batch length `β_τ`.
    pub beta: usize,
}

impl BatchIndex {
    /// Last sample index `k_τ + β_τ`, shared with the next batch.
    pub fn end(&self) -> usize {
        self.start + self.beta
    }
}

/// Batch lengths across the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BetaSchedule {
    Constant(usize),
    /// Explicit lengths; the last one repeats once the list is exhausted.
    Explicit(Vec<usize>),
}

impl BetaSchedule {
    pub fn beta(&self, tau: usize) -> usize {
        match self {
            BetaSchedule::Constant(b) => *b,
            BetaSchedule::Explicit(list) => list.get(tau).or(list.last()).copied().unwrap_or(0),
        }
    }

    /// Batch indices covering a stream of `samples` observations. Trailing
    /// samples that do not fill a batch are dropped.
    pub fn indices(&self, samples: usize) -> Result<Vec<BatchIndex>> {
        let mut out = Vec::new();
        let mut start = 0;
        for tau in 0.. {
            let beta = self.beta(tau);
            if beta == 0 {
                return Err(DdklError::config("batches.beta", "batch length must be at least 1"));
            }
            if start + beta >= samples {
                break;
            }
            out.push(BatchIndex { tau, start, beta });
            start += beta;
        }
        if out.is_empty() {
            return Err(DdklError::InsufficientData { needed: self.beta(0) + 1, available: samples });
        }
        Ok(out)
    }
}

/// Reaction to batches shorter than `r + m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinBetaPolicy {
    Warn,
    Error,
}

/// One agent's window of `β + 1` observations and `β` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch<T: Real> {
    pub agent: usize,
    pub index: BatchIndex,
    /// `n_i x (β+1)`, samples `k_τ ..= k_τ + β`.
    pub observations: DMatrix<T>,
    /// `m x β`, samples `k_τ .. k_τ + β`.
    pub inputs: DMatrix<T>,
}

impl<T: Real> DataBatch<T> {
    /// Joins this window with the directly following one; the result carries
    /// the later batch index.
    pub fn merge(&self, next: &DataBatch<T>) -> Result<DataBatch<T>> {
        if next.agent != self.agent || next.index.start != self.index.end() {
            return Err(DdklError::InvalidInput(format!(
                "batches {} and {} of agent {} are not consecutive",
                self.index.tau, next.index.tau, self.agent
            )));
        }
        let beta = self.index.beta + next.index.beta;
        let mut observations = DMatrix::zeros(self.observations.nrows(), beta + 1);
        observations.columns_mut(0, self.index.beta).copy_from(&self.observations.columns(0, self.index.beta));
        observations.columns_mut(self.index.beta, next.index.beta + 1).copy_from(&next.observations);
        let mut inputs = DMatrix::zeros(self.inputs.nrows(), beta);
        inputs.columns_mut(0, self.index.beta).copy_from(&self.inputs);
        inputs.columns_mut(self.index.beta, next.index.beta).copy_from(&next.inputs);
        Ok(DataBatch {
            agent: self.agent,
            index: BatchIndex { tau: next.index.tau, start: self.index.start, beta },
            observations,
            inputs,
        })
    }
}

/// Splits an observation stream into overlapping batches.
///
/// `observations` is `n_i x len` and `inputs` holds at least `len - 1` columns.
/// `min_beta` carries `r + m` and the policy applied when a batch is shorter.
pub fn partition<T: Real>(
    agent: usize,
    observations: &DMatrix<T>,
    inputs: &DMatrix<T>,
    schedule: &BetaSchedule,
    min_beta: Option<(usize, MinBetaPolicy)>,
) -> Result<Vec<DataBatch<T>>> {
    let len = observations.ncols();
    if len >= 1 && inputs.ncols() + 1 < len {
        return Err(DdklError::dims("input stream length", len - 1, inputs.ncols()));
    }
    let indices = schedule.indices(len)?;
    if let Some((required, policy)) = min_beta {
        if let Some(short) = indices.iter().find(|ix| ix.beta < required) {
            let msg = format!(
                "batch {} has length {} < r + m = {required}; lifted data cannot have full row rank",
                short.tau, short.beta
            );
            match policy {
                MinBetaPolicy::Warn => log::warn!("{msg}"),
                MinBetaPolicy::Error => return Err(DdklError::config("batches.beta", msg)),
            }
        }
    }
    Ok(indices
        .into_iter()
        .map(|index| DataBatch {
            agent,
            index,
            observations: observations.columns(index.start, index.beta + 1).into_owned(),
            inputs: inputs.columns(index.start, index.beta).into_owned(),
        })
        .collect())
}

/// Lifted stacks of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftStacks<T: Real> {
    /// `n_i x β` observations at `k_τ .. k_τ+β-1`.
    pub y: DMatrix<T>,
    /// `n_i x β` observations at `k_τ+1 ..= k_τ+β`.
    pub y_next: DMatrix<T>,
    pub u: DMatrix<T>,
    /// `r x β` lifts of `y`.
    pub g: DMatrix<T>,
    /// `r x β` lifts of `y_next`.
    pub g_next: DMatrix<T>,
}

impl<T: Real> LiftStacks<T> {
    pub fn beta(&self) -> usize {
        self.g.ncols()
    }

    pub fn lift_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    /// `χ = [G; U]`.
    pub fn chi(&self) -> DMatrix<T> {
        vstack(&self.g, &self.u).expect("G and U share the column count")
    }

    /// Copy with `y` replaced by another target of the same width, e.g. a
    /// state-matrix estimate.
    pub fn with_target(&self, target: DMatrix<T>) -> Result<Self> {
        if target.ncols() != self.beta() {
            return Err(DdklError::dims("replacement target columns", self.beta(), target.ncols()));
        }
        Ok(Self { y: target, ..self.clone() })
    }

    /// Assembles stacks from explicit lifts of all `β + 1` samples.
    pub fn from_lifts(batch: &DataBatch<T>, lifts: &DMatrix<T>) -> Result<Self> {
        let beta = batch.index.beta;
        if lifts.ncols() != beta + 1 {
            return Err(DdklError::dims("lift columns", beta + 1, lifts.ncols()));
        }
        Ok(Self {
            y: batch.observations.columns(0, beta).into_owned(),
            y_next: batch.observations.columns(1, beta).into_owned(),
            u: batch.inputs.clone(),
            g: lifts.columns(0, beta).into_owned(),
            g_next: lifts.columns(1, beta).into_owned(),
        })
    }
}

/// Lifts every observation of `batch` through `net`.
pub fn build_stacks<T: Real>(batch: &DataBatch<T>, net: &ObservableNet<T>) -> Result<LiftStacks<T>> {
    if net.input_dim() != batch.observations.nrows() {
        return Err(DdklError::dims("observable input", batch.observations.nrows(), net.input_dim()));
    }
    LiftStacks::from_lifts(batch, &net.forward_batch(&batch.observations)?)
}

/// Stacks memoized per `(τ, parameter version)`.
#[derive(Debug, Default)]
pub struct StackCache<T: Real> {
    entries: HashMap<(usize, u64), LiftStacks<T>>,
}

impl<T: Real> StackCache<T> {
    pub fn new() -> Self {
        Self { entries: HashMap::new() }
    }

    pub fn get_or_build(&mut self, batch: &DataBatch<T>, net: &ObservableNet<T>) -> Result<&LiftStacks<T>> {
        let key = (batch.index.tau, net.version());
        if !self.entries.contains_key(&key) {
            let stacks = build_stacks(batch, net)?;
            self.entries.retain(|(tau, _), _| *tau != key.0);
            self.entries.insert(key, stacks);
        }
        Ok(&self.entries[&key])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
