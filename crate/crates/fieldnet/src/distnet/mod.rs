//! Deterministic synchronous network simulator.
//!
//! Each node holds only its own samples, its kernel row and a replicated
//! copy of the hyperparameters. The network solves the partitioned
//! maximum-likelihood problem with neighbor-only communication: sparse
//! matrix-vector products cost one neighbor-exchange round, global sums
//! run over a BFS spanning tree, and the hyperparameter step is computed
//! at the root and broadcast down. Conjugate gradients over these
//! primitives reproduce the centralized solves, so the distributed
//! estimate matches the centralized one to tight tolerances.
//!
//! Every message is validated against the interaction graph and the tree
//! before delivery, payloads are capped at `hyper_dim + 2` scalars, and
//! the whole simulation is sequential and seed-free, so traces and
//! results are bit-identical across runs.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{DynamicsModel, Hyperparameters, SpatialDynamics};
use crate::error::{Error, Result};
use crate::estimator::{gn_direction, sample_starts, MLResult, SolverConfig};
use crate::kernel::CompactKernel;
use crate::model::{InteractionGraph, RegressionGrid, SufficientStats};
use crate::sparse::SparseCovariance;

/// Default relative residual tolerance of the distributed solve.
pub const DEFAULT_CG_TOL: f64 = 1e-10;

/// Tighter tolerance used for the inner solves of the distributed fit, so
/// the iterate sequence tracks the centralized one well below the
/// equivalence tolerances.
const FIT_CG_TOL: f64 = 1e-12;

/// What a message is doing; every message travels along an interaction
/// edge or a tree edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    NeighborExchange,
    ReduceUp,
    BroadcastDown,
}

/// One scalar-vector payload in flight.
#[derive(Debug, Clone)]
pub struct Message {
    pub round: u64,
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
    pub kind: MessageKind,
}

/// Aggregate of one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub phase: &'static str,
    pub messages: usize,
    pub scalars: usize,
}

/// Deterministic record of everything the network sent.
#[derive(Debug, Clone, Default)]
pub struct NetworkTrace {
    rounds: Vec<RoundRecord>,
    edges_seen: BTreeSet<(usize, usize)>,
    total_messages: usize,
    total_scalars: usize,
}

impl NetworkTrace {
    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn total_messages(&self) -> usize {
        self.total_messages
    }

    pub fn total_scalars(&self) -> usize {
        self.total_scalars
    }

    /// Distinct (from, to) pairs that ever carried a message.
    pub fn edges_seen(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges_seen.iter().copied()
    }

    /// Message count summed over rounds with the given phase label.
    pub fn messages_in_phase(&self, phase: &str) -> usize {
        self.rounds.iter().filter(|r| r.phase == phase).map(|r| r.messages).sum()
    }

    pub fn rounds_in_phase(&self, phase: &str) -> usize {
        self.rounds.iter().filter(|r| r.phase == phase).count()
    }

    /// CSV export: one row per round.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,phase,messages,scalars_sent\n");
        for r in &self.rounds {
            out.push_str(&format!("{},{},{},{}\n", r.round, r.phase, r.messages, r.scalars));
        }
        out
    }
}

/// BFS spanning tree over the interaction graph, rooted at node 0,
/// explored lowest-id-first.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// BFS visit order, root first.
    order: Vec<usize>,
    depth: usize,
}

impl SpanningTree {
    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }
}

/// Build the spanning tree; fails with the component list when the graph
/// is disconnected.
pub fn build_tree(graph: &InteractionGraph) -> Result<SpanningTree> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot build a tree over an empty graph".into()));
    }
    let components = graph.components();
    if components.len() > 1 {
        return Err(Error::DisconnectedGraph(components));
    }
    let mut parent = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut level = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &j in graph.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                parent[j] = Some(i);
                children[i].push(j);
                level[j] = level[i] + 1;
                queue.push_back(j);
            }
        }
    }
    let depth = level.iter().copied().max().unwrap_or(0);
    Ok(SpanningTree { parent, children, order, depth })
}

/// Local state of one simulated node.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub location: Vec<f64>,
    /// Sample mean of this node's observations.
    pub xbar: f64,
    /// `sigma^2 / L_i`.
    pub noise_over_samples: f64,
    /// Kernel row over the interaction neighborhood, sorted by neighbor
    /// id, self included; values match the kernel module bit for bit.
    pub kernel_row: Vec<(usize, f64)>,
    pub z: f64,
    pub mu: f64,
    pub gamma: Vec<f64>,
}

/// Phase labels of one CG instance, so traces stay separable.
#[derive(Clone, Copy)]
struct CgPhases {
    setup_up: &'static str,
    setup_down: &'static str,
    matvec: &'static str,
    reduce_up: &'static str,
    reduce_down: &'static str,
}

const CG_PHASES: CgPhases = CgPhases {
    setup_up: "cg_setup_up",
    setup_down: "cg_setup_down",
    matvec: "cg_matvec",
    reduce_up: "cg_reduce_up",
    reduce_down: "cg_broadcast_down",
};

const DYN_PHASES: CgPhases = CgPhases {
    setup_up: "dyn_setup_up",
    setup_down: "dyn_setup_down",
    matvec: "dyn_matvec",
    reduce_up: "dyn_reduce_up",
    reduce_down: "dyn_broadcast_down",
};

/// The two local linear operators the network can apply.
enum CgOperator {
    /// `(K_ss + D) v` over all nodes.
    KernelPlusNoise,
    /// Interior block of the negated Poisson stencil,
    /// `(2 v_i - v_{i-1} - v_{i+1}) / eps^2`; boundary nodes inactive.
    PoissonInterior,
}

/// The simulated network. All public operations advance synchronous
/// rounds on the shared trace.
pub struct Network {
    nodes: Vec<NodeState>,
    graph: InteractionGraph,
    /// Present iff the interaction graph is connected; local operations
    /// (matvec, exchanges) run without it, tree reductions require it.
    tree: Option<SpanningTree>,
    kernel: CompactKernel,
    dynamics: DynamicsModel,
    payload_cap: usize,
    trace: NetworkTrace,
    round: u64,
}

impl Network {
    pub fn new(
        locations: &[Vec<f64>],
        stats: &SufficientStats,
        kss: &SparseCovariance,
        graph: &InteractionGraph,
        kernel: CompactKernel,
        dynamics: DynamicsModel,
    ) -> Result<Self> {
        let n = locations.len();
        if stats.len() != n || graph.len() != n || kss.rows() != n || dynamics.num_points() != n {
            return Err(Error::DimensionMismatch { expected: n, got: stats.len() });
        }
        let tree = match build_tree(graph) {
            Ok(t) => Some(t),
            Err(Error::DisconnectedGraph(_)) => None,
            Err(e) => return Err(e),
        };
        for i in 0..n {
            if kss.row_neighbors(i) != graph.neighbors(i) {
                return Err(Error::InvalidInput(format!(
                    "covariance sparsity of row {i} does not match the interaction graph"
                )));
            }
            for j in dynamics.mean_neighbors(i) {
                if !graph.contains_edge(i, j) {
                    return Err(Error::InvalidInput(format!(
                        "dynamics stencil of node {i} reaches {j} outside the interaction graph"
                    )));
                }
            }
        }
        let hyper_dim = dynamics.hyper_dim();
        let nodes = (0..n)
            .map(|i| NodeState {
                id: i,
                location: locations[i].clone(),
                xbar: stats.xbar[i],
                noise_over_samples: stats.d_diag[i],
                kernel_row: kss.row_iter(i).collect(),
                z: 0.0,
                mu: 0.0,
                gamma: vec![0.0; hyper_dim],
            })
            .collect();
        Ok(Self {
            nodes,
            graph: graph.clone(),
            tree,
            kernel,
            dynamics,
            payload_cap: hyper_dim + 2,
            trace: NetworkTrace::default(),
            round: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    /// The communication tree; `None` when the interaction graph is
    /// disconnected (tree reductions then fail with the component list).
    pub fn tree(&self) -> Option<&SpanningTree> {
        self.tree.as_ref()
    }

    fn require_tree(&self) -> Result<SpanningTree> {
        self.tree
            .clone()
            .ok_or_else(|| Error::DisconnectedGraph(self.graph.components()))
    }

    pub fn trace(&self) -> &NetworkTrace {
        &self.trace
    }

    /// Detach the accumulated trace and start a fresh one.
    pub fn take_trace(&mut self) -> NetworkTrace {
        self.round = 0;
        std::mem::take(&mut self.trace)
    }

    fn edge_allowed(&self, from: usize, to: usize, kind: MessageKind) -> bool {
        match kind {
            MessageKind::NeighborExchange => from != to && self.graph.contains_edge(from, to),
            MessageKind::ReduceUp => {
                self.tree.as_ref().is_some_and(|t| t.parent(from) == Some(to))
            }
            MessageKind::BroadcastDown => {
                self.tree.as_ref().is_some_and(|t| t.parent(to) == Some(from))
            }
        }
    }

    /// Deliver one round of messages; validates edges, payload size and
    /// finiteness, then folds the batch into the trace.
    fn deliver(&mut self, phase: &'static str, messages: Vec<Message>) -> Result<()> {
        let mut scalars = 0;
        for m in &messages {
            if !self.edge_allowed(m.from, m.to, m.kind) {
                return Err(Error::InvalidInput(format!(
                    "message {} -> {} is not an interaction or tree edge",
                    m.from, m.to
                )));
            }
            if m.payload.len() > self.payload_cap {
                return Err(Error::InvalidInput(format!(
                    "payload of {} scalars exceeds the cap of {}",
                    m.payload.len(),
                    self.payload_cap
                )));
            }
            if m.payload.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolverFailure(format!(
                    "non-finite payload on {} -> {}",
                    m.from, m.to
                )));
            }
            scalars += m.payload.len();
            self.trace.edges_seen.insert((m.from, m.to));
        }
        self.trace.total_messages += messages.len();
        self.trace.total_scalars += scalars;
        self.trace.rounds.push(RoundRecord {
            round: self.round,
            phase,
            messages: messages.len(),
            scalars,
        });
        self.round += 1;
        Ok(())
    }

    /// One neighbor-exchange round: every active node sends its scalar to
    /// the listed targets; returns each node's inbox sorted by sender.
    fn exchange(
        &mut self,
        phase: &'static str,
        values: &[f64],
        targets: impl Fn(usize) -> Vec<usize>,
        active: impl Fn(usize) -> bool,
    ) -> Result<Vec<Vec<(usize, f64)>>> {
        let n = self.nodes.len();
        let round = self.round;
        let mut inbox: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut batch = Vec::new();
        for from in 0..n {
            if !active(from) {
                continue;
            }
            for to in targets(from) {
                if !active(to) {
                    continue;
                }
                batch.push(Message {
                    round,
                    from,
                    to,
                    payload: vec![values[from]],
                    kind: MessageKind::NeighborExchange,
                });
                inbox[to].push((from, values[from]));
            }
        }
        self.deliver(phase, batch)?;
        Ok(inbox)
    }

    /// Exact global sum of per-node vectors over the spanning tree: one
    /// up-sweep pulling children in ascending order, one broadcast down.
    /// Every node ends with the same total in 2(N-1) messages.
    pub fn allreduce_sum(&mut self, contribs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.allreduce_phased(contribs, "reduce_up", "broadcast_down")
    }

    fn allreduce_phased(
        &mut self,
        contribs: &[Vec<f64>],
        up_phase: &'static str,
        down_phase: &'static str,
    ) -> Result<Vec<f64>> {
        let n = self.nodes.len();
        if contribs.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: contribs.len() });
        }
        let tree = self.require_tree()?;
        let mut acc: Vec<Vec<f64>> = contribs.to_vec();
        let round = self.round;
        let mut up = Vec::new();
        // Reverse BFS order settles children before their parent pulls
        // them in, in ascending child order.
        for &i in tree.order.iter().rev() {
            for &c in tree.children(i) {
                let child_sum = acc[c].clone();
                up.push(Message {
                    round,
                    from: c,
                    to: i,
                    payload: child_sum.clone(),
                    kind: MessageKind::ReduceUp,
                });
                for (a, b) in acc[i].iter_mut().zip(&child_sum) {
                    *a += b;
                }
            }
        }
        self.deliver(up_phase, up)?;

        let total = acc[0].clone();
        let round = self.round;
        let mut down = Vec::new();
        for &i in &tree.order {
            if let Some(parent) = tree.parent(i) {
                down.push(Message {
                    round,
                    from: parent,
                    to: i,
                    payload: total.clone(),
                    kind: MessageKind::BroadcastDown,
                });
            }
        }
        self.deliver(down_phase, down)?;
        Ok(total)
    }

    /// Root-to-leaves broadcast of one vector; N-1 messages.
    fn broadcast(&mut self, phase: &'static str, value: &[f64]) -> Result<()> {
        let tree = self.require_tree()?;
        let round = self.round;
        let mut down = Vec::new();
        for &i in &tree.order {
            if let Some(parent) = tree.parent(i) {
                down.push(Message {
                    round,
                    from: parent,
                    to: i,
                    payload: value.to_vec(),
                    kind: MessageKind::BroadcastDown,
                });
            }
        }
        self.deliver(phase, down)
    }

    /// Distributed `(K_ss + D) v`: one neighbor-exchange round, then each
    /// node accumulates its noise term followed by its kernel row in
    /// ascending neighbor order - bit-identical to the centralized sparse
    /// matvec.
    pub fn matvec(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec_phased(v, "matvec")
    }

    fn matvec_phased(&mut self, v: &[f64], phase: &'static str) -> Result<Vec<f64>> {
        let n = self.nodes.len();
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
        let graph = self.graph.clone();
        let inbox =
            self.exchange(phase, v, |i| graph.neighbors_without_self(i).collect(), |_| true)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = self.nodes[i].noise_over_samples * v[i];
            for &(j, k) in &self.nodes[i].kernel_row {
                let vj = if j == i {
                    v[i]
                } else {
                    inbox[i].iter().find(|&&(from, _)| from == j).expect("neighbor value").1
                };
                acc += k * vj;
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Conjugate gradients on `(K_ss + D) z = rhs` with one matvec
    /// exchange and two tree all-reduces per iteration. Stops when the
    /// residual norm falls below `tol * ||rhs||`; errors out with the
    /// residual history when `max_iters` is exhausted.
    pub fn solve_spd(
        &mut self,
        rhs: &[f64],
        tol: f64,
        max_iters: usize,
    ) -> Result<(Vec<f64>, usize)> {
        self.cg(CgOperator::KernelPlusNoise, rhs, tol, max_iters, CG_PHASES)
    }

    fn cg(
        &mut self,
        op: CgOperator,
        rhs: &[f64],
        tol: f64,
        max_iters: usize,
        phases: CgPhases,
    ) -> Result<(Vec<f64>, usize)> {
        let n = self.nodes.len();
        let active: Vec<bool> = (0..n).map(|i| op.is_active(self, i)).collect();
        let squares = |v: &[f64], active: &[bool]| -> Vec<Vec<f64>> {
            (0..n).map(|i| vec![if active[i] { v[i] * v[i] } else { 0.0 }]).collect()
        };

        let mut z = vec![0.0; n];
        let mut r: Vec<f64> = (0..n).map(|i| if active[i] { rhs[i] } else { 0.0 }).collect();
        let mut p = r.clone();
        let rr0 =
            self.allreduce_phased(&squares(&r, &active), phases.setup_up, phases.setup_down)?[0];
        if rr0 == 0.0 {
            return Ok((z, 0));
        }
        let norm_rhs = rr0.sqrt();
        let mut rr = rr0;
        let mut residuals = Vec::new();
        for iter in 1..=max_iters {
            let q = op.apply(self, &p, phases.matvec, &active)?;
            let pq_contrib: Vec<Vec<f64>> =
                (0..n).map(|i| vec![if active[i] { p[i] * q[i] } else { 0.0 }]).collect();
            let pq =
                self.allreduce_phased(&pq_contrib, phases.reduce_up, phases.reduce_down)?[0];
            if !(pq > 0.0) {
                return Err(Error::SolverFailure(format!(
                    "conjugate gradients hit non-positive curvature ({pq:e}); system not SPD"
                )));
            }
            let alpha = rr / pq;
            for i in 0..n {
                if active[i] {
                    z[i] += alpha * p[i];
                    r[i] -= alpha * q[i];
                }
            }
            let rr_new =
                self.allreduce_phased(&squares(&r, &active), phases.reduce_up, phases.reduce_down)?
                    [0];
            residuals.push(rr_new.sqrt());
            if rr_new.sqrt() <= tol * norm_rhs {
                return Ok((z, iter));
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                if active[i] {
                    p[i] = r[i] + beta * p[i];
                }
            }
        }
        Err(Error::NonConvergence { residuals })
    }

    /// Distributed mean for the given gamma. Spline means are an entirely
    /// local basis product; Poisson means pin the boundary values, ship
    /// them one hop, and solve the interior system by conjugate gradients
    /// on the dynamics stencil.
    fn mean_distributed(&mut self, gamma: &[f64]) -> Result<Vec<f64>> {
        match self.dynamics.clone() {
            DynamicsModel::Spline(sp) => {
                let basis = sp.linear_basis().expect("spline basis");
                Ok((0..self.nodes.len())
                    .map(|i| (0..gamma.len()).map(|k| basis[(i, k)] * gamma[k]).sum())
                    .collect())
            }
            DynamicsModel::Poisson(p) => {
                let (w1, wn) = p.boundary();
                self.poisson_rhs_solve(gamma, w1, wn, |p, s, g| p.source(s, g))
            }
        }
    }

    /// Distributed solve of the Poisson system with a configurable source
    /// term: boundary nodes pin (and ship) their values, interior nodes
    /// fold them into the right-hand side and run the stencil CG.
    fn poisson_rhs_solve(
        &mut self,
        gamma: &[f64],
        left_value: f64,
        right_value: f64,
        source: impl Fn(&crate::dynamics::Poisson1D, f64, &[f64]) -> f64,
    ) -> Result<Vec<f64>> {
        let p = match &self.dynamics {
            DynamicsModel::Poisson(p) => p.clone(),
            DynamicsModel::Spline(_) => {
                return Err(Error::SolverFailure("not a Poisson model".into()))
            }
        };
        let n = self.nodes.len();
        let eps2 = p.spacing() * p.spacing();

        let round = self.round;
        let boundary = vec![
            Message {
                round,
                from: 0,
                to: 1,
                payload: vec![left_value],
                kind: MessageKind::NeighborExchange,
            },
            Message {
                round,
                from: n - 1,
                to: n - 2,
                payload: vec![right_value],
                kind: MessageKind::NeighborExchange,
            },
        ];
        self.deliver("dyn_boundary", boundary)?;

        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            let s = self.nodes[i].location[0];
            rhs[i] = -source(&p, s, gamma);
            if i == 1 {
                rhs[i] += left_value / eps2;
            }
            if i == n - 2 {
                rhs[i] += right_value / eps2;
            }
        }
        let (mut mu, _) =
            self.cg(CgOperator::PoissonInterior, &rhs, FIT_CG_TOL, 5 * n.max(4), DYN_PHASES)?;
        mu[0] = left_value;
        mu[n - 1] = right_value;
        Ok(mu)
    }

    /// Per-node rows of `d mu / d gamma`; Poisson columns each cost one
    /// distributed stencil solve with zero boundary data.
    fn jacobian_rows_distributed(&mut self, gamma: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.nodes.len();
        let p = self.dynamics.hyper_dim();
        match self.dynamics.clone() {
            DynamicsModel::Spline(sp) => {
                let basis = sp.linear_basis().expect("spline basis");
                Ok((0..n).map(|i| (0..p).map(|k| basis[(i, k)]).collect()).collect())
            }
            DynamicsModel::Poisson(_) => {
                let mut rows = vec![vec![0.0; p]; n];
                for k in 0..p {
                    let col = self.poisson_rhs_solve(gamma, 0.0, 0.0, |p2, s, g| {
                        p2.source_partials(s, g)[k]
                    })?;
                    for i in 0..n {
                        rows[i][k] = col[i];
                    }
                }
                Ok(rows)
            }
        }
    }

    /// Cost, z and mu at `gamma`, all through network rounds.
    fn evaluate_distributed(&mut self, gamma: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let n = self.nodes.len();
        let mu = self.mean_distributed(gamma)?;
        let rhs: Vec<f64> = (0..n).map(|i| mu[i] - self.nodes[i].xbar).collect();
        let (z, _) = self.solve_spd(&rhs, FIT_CG_TOL, 5 * n.max(4))?;
        let az = self.matvec_phased(&z, "cost_matvec")?;
        let contribs: Vec<Vec<f64>> = (0..n).map(|i| vec![z[i] * az[i]]).collect();
        let cost = self.allreduce_phased(&contribs, "cost_reduce_up", "cost_broadcast_down")?[0];
        Ok((cost, z, mu))
    }

    /// Distributed maximum-likelihood fit, replicating the centralized
    /// control flow: linear models solve the normal equations through
    /// distributed solves and tree reductions in one outer step; the
    /// Poisson model runs the same projected Gauss-Newton loop with every
    /// matrix product realized as network rounds. Node state carries the
    /// winning (gamma, z, mu) afterwards.
    pub fn fit_ml(&mut self, init: &Hyperparameters, config: &SolverConfig) -> Result<MLResult> {
        let p = self.dynamics.hyper_dim();
        if init.values.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: init.values.len() });
        }
        if !self.dynamics.domain().contains(&init.values) {
            return Err(Error::InvalidInput("initial hyperparameters outside the domain".into()));
        }

        let result = if self.dynamics.linear_basis().is_some() {
            self.fit_linear(config)?
        } else {
            self.fit_gauss_newton(init, config)?
        };

        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.gamma = result.gamma_ml.values.clone();
            node.z = result.z[i];
            node.mu = result.mu_gamma[i];
        }
        Ok(result)
    }

    fn fit_linear(&mut self, config: &SolverConfig) -> Result<MLResult> {
        let n = self.nodes.len();
        let p = self.dynamics.hyper_dim();
        let domain = self.dynamics.domain().clone();
        let basis_rows = self.jacobian_rows_distributed(&vec![0.0; p])?;

        let mut weighted = vec![vec![0.0; p]; n];
        for k in 0..p {
            let col: Vec<f64> = basis_rows.iter().map(|r| r[k]).collect();
            let (y, _) = self.solve_spd(&col, FIT_CG_TOL, 5 * n.max(4))?;
            for i in 0..n {
                weighted[i][k] = y[i];
            }
        }
        let mut h = DMatrix::zeros(p, p);
        for k in 0..p {
            let contribs: Vec<Vec<f64>> = (0..n)
                .map(|i| basis_rows[i].iter().map(|b| b * weighted[i][k]).collect())
                .collect();
            let col = self.allreduce_phased(&contribs, "ne_reduce_up", "ne_broadcast_down")?;
            for j in 0..p {
                h[(j, k)] = col[j];
            }
        }
        h = (&h + h.transpose()) * 0.5;
        let rhs_contribs: Vec<Vec<f64>> = (0..n)
            .map(|i| weighted[i].iter().map(|w| w * self.nodes[i].xbar).collect())
            .collect();
        let rhs_vec = self.allreduce_phased(&rhs_contribs, "ne_reduce_up", "ne_broadcast_down")?;

        // Root solves the small system and broadcasts the result.
        let rhs = DVector::from_vec(rhs_vec);
        let gamma: Vec<f64> = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SolverFailure("normal equations are singular".into()))?
            .solve(&rhs)
            .iter()
            .copied()
            .collect();
        let gamma = domain.clamp(&gamma);
        self.broadcast("gamma_broadcast", &gamma)?;

        let (cost, z, mu) = self.evaluate_distributed(&gamma)?;
        let grad_contribs: Vec<Vec<f64>> = (0..n)
            .map(|i| basis_rows[i].iter().map(|b| 2.0 * b * z[i]).collect())
            .collect();
        let grad =
            self.allreduce_phased(&grad_contribs, "grad_reduce_up", "grad_broadcast_down")?;
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));

        Ok(MLResult {
            gamma_ml: Hyperparameters::new(gamma.clone(), domain)?,
            z,
            mu_gamma: mu,
            cost,
            iterations: 1,
            converged: true,
            grad_norm,
            best_start: 0,
            gamma_trace: vec![gamma],
            config: config.clone(),
        })
    }

    fn fit_gauss_newton(
        &mut self,
        init: &Hyperparameters,
        config: &SolverConfig,
    ) -> Result<MLResult> {
        let n = self.nodes.len();
        let p = self.dynamics.hyper_dim();
        let domain = self.dynamics.domain().clone();
        let starts = sample_starts(&domain, &init.values, config)?;

        struct Outcome {
            gamma: Vec<f64>,
            cost: f64,
            iterations: usize,
            converged: bool,
            grad_norm: f64,
            trace: Vec<Vec<f64>>,
        }
        let mut best: Option<(usize, Outcome)> = None;

        for (start_idx, start) in starts.iter().enumerate() {
            let mut gamma = domain.clamp(start);
            self.broadcast("gamma_broadcast", &gamma)?;
            let (mut cost, mut z, _mu) = self.evaluate_distributed(&gamma)?;
            let mut trace = vec![gamma.clone()];
            let mut converged = false;
            let mut grad_norm = f64::INFINITY;
            let mut iterations = 0;

            for _ in 0..config.max_iters {
                let jac = self.jacobian_rows_distributed(&gamma)?;
                let grad_contribs: Vec<Vec<f64>> =
                    (0..n).map(|i| jac[i].iter().map(|j| 2.0 * j * z[i]).collect()).collect();
                let grad = self
                    .allreduce_phased(&grad_contribs, "grad_reduce_up", "grad_broadcast_down")?;
                grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                if grad_norm <= config.grad_tol {
                    converged = true;
                    break;
                }

                // Gauss-Newton matrix J^T W J, one column per solve.
                let mut h = DMatrix::zeros(p, p);
                for k in 0..p {
                    let col: Vec<f64> = jac.iter().map(|r| r[k]).collect();
                    let (y, _) = self.solve_spd(&col, FIT_CG_TOL, 5 * n.max(4))?;
                    let contribs: Vec<Vec<f64>> =
                        (0..n).map(|i| jac[i].iter().map(|j| j * y[i]).collect()).collect();
                    let hcol =
                        self.allreduce_phased(&contribs, "gn_reduce_up", "gn_broadcast_down")?;
                    for j in 0..p {
                        h[(j, k)] = hcol[j];
                    }
                }
                h = (&h + h.transpose()) * 0.5;
                let direction = gn_direction(&h, &grad);

                let mut alpha = 1.0;
                let mut accepted = false;
                for _ in 0..config.max_backtracks {
                    let raw: Vec<f64> =
                        gamma.iter().zip(&direction).map(|(g, d)| g + alpha * d).collect();
                    let trial = domain.clamp(&raw);
                    let step: Vec<f64> = trial.iter().zip(&gamma).map(|(t, g)| t - g).collect();
                    if step.iter().all(|s| *s == 0.0) {
                        break;
                    }
                    self.broadcast("gamma_broadcast", &trial)?;
                    let (trial_cost, trial_z, _trial_mu) = self.evaluate_distributed(&trial)?;
                    let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
                    if trial_cost <= cost + config.armijo_slope * slope {
                        gamma = trial;
                        cost = trial_cost;
                        z = trial_z;
                        accepted = true;
                        break;
                    }
                    alpha *= config.backtrack_factor;
                }
                if !accepted {
                    break;
                }
                iterations += 1;
                trace.push(gamma.clone());
            }

            let outcome = Outcome { gamma, cost, iterations, converged, grad_norm, trace };
            let better = match &best {
                None => true,
                Some((_, b)) => outcome.cost < b.cost,
            };
            if better {
                best = Some((start_idx, outcome));
            }
        }

        let (best_start, out) = best.expect("at least one start runs");
        // Leave the network on the winning iterate.
        self.broadcast("gamma_broadcast", &out.gamma)?;
        let (cost, z, mu) = self.evaluate_distributed(&out.gamma)?;
        Ok(MLResult {
            gamma_ml: Hyperparameters::new(out.gamma.clone(), domain)?,
            z,
            mu_gamma: mu,
            cost,
            iterations: out.iterations,
            converged: out.converged,
            grad_norm: out.grad_norm,
            best_start,
            gamma_trace: out.trace,
            config: config.clone(),
        })
    }

    fn effective_neighborhood(&self, point: &[f64]) -> Result<Vec<usize>> {
        let mut effective = Vec::new();
        for j in 0..self.nodes.len() {
            if self.kernel.eval(point, &self.nodes[j].location)? != 0.0 {
                effective.push(j);
            }
        }
        Ok(effective)
    }

    fn map_value(&self, point: &[f64], effective: &[usize]) -> Result<f64> {
        let gamma = self.nodes[0].gamma.clone();
        let single = RegressionGrid::new(vec![point.to_vec()])?;
        let prior = self.dynamics.regression_mean(&gamma, &single)?[0];
        let mut correction = 0.0;
        for &j in effective {
            correction += self.kernel.eval(point, &self.nodes[j].location)? * self.nodes[j].z;
        }
        Ok(prior - correction)
    }

    /// MAP value at one regression point, computed by a virtual node
    /// located there. With the radio range equal to the kernel support,
    /// the virtual node reaches exactly the point's effective
    /// neighborhood, fetching its |N^E_m| z-values as single scalars;
    /// an empty neighborhood returns the prior mean with no traffic.
    /// These fetches are sensor-to-client reads, not sensor-to-sensor
    /// messages, so they are traced under `map_fetch` without entering
    /// the edge ledger.
    pub fn local_map(&mut self, grid: &RegressionGrid, m: usize) -> Result<f64> {
        let point = grid
            .points()
            .get(m)
            .ok_or_else(|| Error::InvalidInput(format!("grid point {m} out of range")))?
            .clone();
        let effective = self.effective_neighborhood(&point)?;
        if !effective.is_empty() {
            for &j in &effective {
                if !self.nodes[j].z.is_finite() {
                    return Err(Error::SolverFailure(format!("non-finite z at node {j}")));
                }
            }
            self.trace.total_messages += effective.len();
            self.trace.total_scalars += effective.len();
            self.trace.rounds.push(RoundRecord {
                round: self.round,
                phase: "map_fetch",
                messages: effective.len(),
                scalars: effective.len(),
            });
            self.round += 1;
        }
        self.map_value(&point, &effective)
    }

    /// MAP value at one regression point queried by an existing sensor
    /// node on the point's behalf. The node reads its own z locally and
    /// fetches the rest over interaction edges; it errors out when the
    /// point's effective neighborhood reaches beyond the querying node's
    /// interaction neighborhood.
    pub fn local_map_from_node(
        &mut self,
        grid: &RegressionGrid,
        m: usize,
        node: usize,
    ) -> Result<f64> {
        let point = grid
            .points()
            .get(m)
            .ok_or_else(|| Error::InvalidInput(format!("grid point {m} out of range")))?
            .clone();
        if node >= self.nodes.len() {
            return Err(Error::InvalidInput(format!("node {node} out of range")));
        }
        let effective = self.effective_neighborhood(&point)?;
        for &j in &effective {
            if j != node && !self.graph.contains_edge(node, j) {
                return Err(Error::InvalidInput(format!(
                    "connectivity assumption violated: effective neighborhood of grid point {m} \
                     includes node {j} outside the reach of querying node {node}"
                )));
            }
        }
        let round = self.round;
        let fetch: Vec<Message> = effective
            .iter()
            .filter(|&&j| j != node)
            .map(|&j| Message {
                round,
                from: j,
                to: node,
                payload: vec![self.nodes[j].z],
                kind: MessageKind::NeighborExchange,
            })
            .collect();
        self.deliver("map_fetch", fetch)?;
        self.map_value(&point, &effective)
    }
}

impl CgOperator {
    fn is_active(&self, net: &Network, i: usize) -> bool {
        match self {
            CgOperator::KernelPlusNoise => true,
            CgOperator::PoissonInterior => i != 0 && i != net.nodes.len() - 1,
        }
    }

    fn apply(
        &self,
        net: &mut Network,
        v: &[f64],
        phase: &'static str,
        active: &[bool],
    ) -> Result<Vec<f64>> {
        match self {
            CgOperator::KernelPlusNoise => net.matvec_phased(v, phase),
            CgOperator::PoissonInterior => {
                let eps2 = match &net.dynamics {
                    DynamicsModel::Poisson(p) => p.spacing() * p.spacing(),
                    DynamicsModel::Spline(_) => {
                        return Err(Error::SolverFailure(
                            "Poisson stencil applied to a spline model".into(),
                        ))
                    }
                };
                let n = net.nodes.len();
                let dynamics = net.dynamics.clone();
                let inbox = net.exchange(
                    phase,
                    v,
                    |i| dynamics.mean_neighbors(i).into_iter().filter(move |&j| j != i).collect(),
                    |i| active[i],
                )?;
                let mut out = vec![0.0; n];
                for i in 0..n {
                    if !active[i] {
                        continue;
                    }
                    let mut acc = 2.0 * v[i];
                    for &(_, vj) in &inbox[i] {
                        acc -= vj;
                    }
                    out[i] = acc / eps2;
                }
                Ok(out)
            }
        }
    }
}
