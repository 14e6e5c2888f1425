//! Communication graph, agent containers and the synchronous snapshot exchange.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{DdklError, Result};
use crate::linalg::{orth_projection, pinv, DEFAULT_TOL};
use crate::net::{ObservableNet, Optimizer};
use crate::regression::{KoopmanModel, RecursiveState};
use crate::scalar::Real;

/// Directed graph with self-arcs. An edge `(j, i)` means agent `i` receives
/// from agent `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
}

/// Validates an edge list, adding missing self-arcs and certifying strong
/// connectivity.
pub fn build_graph(nodes: usize, edges: &[(usize, usize)]) -> Result<GraphTopology> {
    if nodes == 0 {
        return Err(DdklError::InvalidInput("graph needs at least one node".into()));
    }
    let mut set = BTreeSet::new();
    for &(from, to) in edges {
        if from >= nodes || to >= nodes {
            return Err(DdklError::InvalidInput(format!("edge ({from}, {to}) references a node outside 0..{nodes}")));
        }
        set.insert((from, to));
    }
    let missing: Vec<usize> = (0..nodes).filter(|&i| !set.contains(&(i, i))).collect();
    if !missing.is_empty() && !edges.is_empty() {
        log::warn!("adding missing self-arcs for nodes {missing:?}");
    }
    set.extend((0..nodes).map(|i| (i, i)));

    let mut in_neighbors = vec![Vec::new(); nodes];
    let mut out_neighbors = vec![Vec::new(); nodes];
    for &(from, to) in &set {
        in_neighbors[to].push(from);
        out_neighbors[from].push(to);
    }
    let reach = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    };
    if let Some(to) = reach(&out_neighbors).iter().position(|s| !s) {
        return Err(DdklError::Disconnected { from: 0, to });
    }
    if let Some(from) = reach(&in_neighbors).iter().position(|s| !s) {
        return Err(DdklError::Disconnected { from, to: 0 });
    }
    Ok(GraphTopology { nodes, edges: set, in_neighbors })
}

impl GraphTopology {
    pub fn complete(nodes: usize) -> Result<Self> {
        let edges: Vec<_> = (0..nodes).flat_map(|i| (0..nodes).map(move |j| (i, j))).collect();
        build_graph(nodes, &edges)
    }

    /// Bidirectional ring.
    pub fn ring(nodes: usize) -> Result<Self> {
        let edges: Vec<_> = (0..nodes)
            .flat_map(|i| [(i, i), (i, (i + 1) % nodes), ((i + 1) % nodes, i)])
            .collect();
        build_graph(nodes, &edges)
    }

    /// `0 → 1 → … → N-1 → 0` with self-arcs.
    pub fn directed_ring(nodes: usize) -> Result<Self> {
        let edges: Vec<_> = (0..nodes).flat_map(|i| [(i, i), (i, (i + 1) % nodes)]).collect();
        build_graph(nodes, &edges)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// `N_i`, including `i` itself, ascending.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    /// `d_i = |N_i|`.
    pub fn degree(&self, i: usize) -> usize {
        self.in_neighbors[i].len()
    }
}

/// Data an agent publishes at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload<T: Real> {
    /// State estimates `x̂(k)`, one column per sample of the current batch.
    pub estimates: DMatrix<T>,
    /// Current `H` (or state-matrix) iterate.
    pub h: DMatrix<T>,
    /// `‖C_i† Y_i‖²_F` of the current batch.
    pub rhs_norm_sq: T,
}

/// In-neighbor payloads from one completed round.
#[derive(Debug, Clone)]
pub struct SnapshotStore<T: Real> {
    round: Option<u64>,
    entries: BTreeMap<usize, Arc<Payload<T>>>,
}

impl<T: Real> Default for SnapshotStore<T> {
    fn default() -> Self {
        Self { round: None, entries: BTreeMap::new() }
    }
}

impl<T: Real> SnapshotStore<T> {
    /// Round the held payloads were published in.
    pub fn round(&self) -> Option<u64> {
        self.round
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn senders(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    /// Payload of `neighbor`, provided the store holds round `expected`.
    pub fn get(&self, agent: usize, neighbor: usize, expected: u64) -> Result<&Payload<T>> {
        match self.round {
            Some(r) if r == expected => {}
            other => {
                return Err(DdklError::RoundSkew { agent, agent_round: other.unwrap_or(u64::MAX), expected })
            }
        }
        self.entries
            .get(&neighbor)
            .map(Arc::as_ref)
            .ok_or(DdklError::MissingSnapshot { agent, neighbor })
    }
}

/// Everything one agent owns.
#[derive(Debug, Clone)]
pub struct AgentState<T: Real> {
    pub id: usize,
    pub c: DMatrix<T>,
    pub c_pinv: DMatrix<T>,
    /// `I - P_i` with `P_i` the projector onto the row space of `C_i`.
    pub complement: DMatrix<T>,
    pub net: ObservableNet<T>,
    pub optimizer: Optimizer<T>,
    /// Latest model, observable or not.
    pub model: Option<KoopmanModel<T>>,
    /// Latest model that passed the observability check.
    pub saved: Option<KoopmanModel<T>>,
    pub recursive: Option<RecursiveState<T>>,
    pub store: SnapshotStore<T>,
    /// Number of completed exchange rounds.
    pub round: u64,
    pub seed: u64,
}

impl<T: Real> AgentState<T> {
    pub fn new(id: usize, c: DMatrix<T>, net: ObservableNet<T>, optimizer: Optimizer<T>, seed: u64) -> Result<Self> {
        if net.input_dim() != c.nrows() {
            return Err(DdklError::dims(format!("agent {id} observable input"), c.nrows(), net.input_dim()));
        }
        let projector = orth_projection(&c).map_err(|e| match e {
            DdklError::RankDeficient { what, rank, required } => {
                DdklError::RankDeficient { what: format!("agent {id}: {what}"), rank, required }
            }
            other => other,
        })?;
        let n = c.ncols();
        Ok(Self {
            id,
            c_pinv: pinv(&c, T::lit(DEFAULT_TOL))?,
            complement: DMatrix::identity(n, n) - projector,
            c,
            net,
            optimizer,
            model: None,
            saved: None,
            recursive: None,
            store: SnapshotStore::default(),
            round: 0,
            seed,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }
}

/// Publishes every agent's payload and delivers to each agent exactly the
/// payloads of its in-neighbors, tagged with the completed `round`.
///
/// Payloads are built from an immutable view of all agents before any store is
/// replaced, so no agent observes another agent's current-round state.
pub fn exchange<T, F>(agents: &mut [AgentState<T>], graph: &GraphTopology, round: u64, payload: F) -> Result<()>
where
    T: Real,
    F: Fn(&AgentState<T>) -> Result<Payload<T>> + Sync,
{
    if agents.len() != graph.nodes() {
        return Err(DdklError::dims("agents vs graph nodes", graph.nodes(), agents.len()));
    }
    if let Some(a) = agents.iter().find(|a| a.round != round) {
        return Err(DdklError::RoundSkew { agent: a.id, agent_round: a.round, expected: round });
    }
    let published: Vec<Arc<Payload<T>>> = agents
        .par_iter()
        .map(|a| payload(a).map(Arc::new))
        .collect::<Result<_>>()?;
    for (i, agent) in agents.iter_mut().enumerate() {
        agent.store = SnapshotStore {
            round: Some(round),
            entries: graph.in_neighbors(i).iter().map(|&j| (j, Arc::clone(&published[j]))).collect(),
        };
        agent.round = round + 1;
    }
    Ok(())
}
