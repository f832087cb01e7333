//! CVRP instances, construction state, feasibility and cost.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = (f64, f64);

#[derive(Debug, Error, PartialEq)]
pub enum VrpError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("node {node} is infeasible: {reason}")]
    Infeasible { node: usize, reason: String },
    #[error("node index {0} out of range")]
    OutOfRange(usize),
    #[error("construction state violates an invariant: {0}")]
    Invariant(String),
    #[error("tour must start at the depot")]
    MissingDepotStart,
}

/// A CVRP instance. Node 0 is the depot, node `i >= 1` is customer `i - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub depot: Point,
    pub customers: Vec<Point>,
    pub demands: Vec<u32>,
    pub capacity: u32,
}

impl Instance {
    pub fn new(
        depot: Point,
        customers: Vec<Point>,
        demands: Vec<u32>,
        capacity: u32,
    ) -> Result<Self, VrpError> {
        let inst = Self {
            name: None,
            depot,
            customers,
            demands,
            capacity,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn validate(&self) -> Result<(), VrpError> {
        if self.capacity == 0 {
            return Err(VrpError::InvalidInstance("capacity must be positive".into()));
        }
        if self.demands.len() != self.customers.len() {
            return Err(VrpError::InvalidInstance(format!(
                "{} demands for {} customers",
                self.demands.len(),
                self.customers.len()
            )));
        }
        if let Some((i, d)) = self
            .demands
            .iter()
            .enumerate()
            .find(|(_, &d)| d == 0 || d > self.capacity)
        {
            return Err(VrpError::InvalidInstance(format!(
                "customer {} has demand {d} outside 1..={}",
                i + 1,
                self.capacity
            )));
        }
        let finite = |p: &Point| p.0.is_finite() && p.1.is_finite();
        if !finite(&self.depot) || !self.customers.iter().all(finite) {
            return Err(VrpError::InvalidInstance("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn num_customers(&self) -> usize {
        self.customers.len()
    }

    /// Customers plus the depot.
    pub fn num_nodes(&self) -> usize {
        self.customers.len() + 1
    }

    pub fn coord(&self, node: usize) -> Point {
        if node == 0 {
            self.depot
        } else {
            self.customers[node - 1]
        }
    }

    /// Demand of a node; the depot has none.
    pub fn demand(&self, node: usize) -> u32 {
        if node == 0 {
            0
        } else {
            self.demands[node - 1]
        }
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        euclid(self.coord(a), self.coord(b))
    }

    /// Per-node raw features `(x, y, demand / capacity)`, depot first.
    pub fn node_features(&self) -> Vec<[f64; 3]> {
        let cap = f64::from(self.capacity);
        std::iter::once([self.depot.0, self.depot.1, 0.0])
            .chain(
                self.customers
                    .iter()
                    .zip(&self.demands)
                    .map(|(&(x, y), &d)| [x, y, f64::from(d) / cap]),
            )
            .collect()
    }

    pub fn total_demand(&self) -> u64 {
        self.demands.iter().map(|&d| u64::from(d)).sum()
    }
}

pub fn euclid(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// A constructed solution: the visited node sequence (starting at the depot),
/// the log-probability of each move, and the closed tour length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub nodes: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub cost: f64,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    /// Depot-delimited routes, customers only.
    pub fn routes(&self) -> Vec<Vec<usize>> {
        split_routes(&self.nodes)
    }
}

pub fn split_routes(nodes: &[usize]) -> Vec<Vec<usize>> {
    nodes
        .split(|&n| n == 0)
        .filter(|r| !r.is_empty())
        .map(<[usize]>::to_vec)
        .collect()
}

/// Per-trajectory construction state.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    /// Indexed by node; entry 0 (the depot) is unused and stays `false`.
    visited: Vec<bool>,
    load: u32,
    capacity: u32,
    last_node: usize,
    unvisited: usize,
}

impl RolloutState {
    /// Fresh state at the depot with full capacity.
    pub fn new(instance: &Instance) -> Self {
        Self {
            visited: vec![false; instance.num_nodes()],
            load: 0,
            capacity: instance.capacity,
            last_node: 0,
            unvisited: instance.num_customers(),
        }
    }

    /// Fresh state in which only customers in `keep` (node indices) remain to
    /// be served; the rest are treated as already visited.
    pub fn restricted(instance: &Instance, keep: &[usize]) -> Result<Self, VrpError> {
        let mut visited = vec![true; instance.num_nodes()];
        visited[0] = false;
        for &n in keep {
            if n == 0 || n >= instance.num_nodes() {
                return Err(VrpError::OutOfRange(n));
            }
            visited[n] = false;
        }
        let unvisited = visited[1..].iter().filter(|v| !**v).count();
        Ok(Self {
            visited,
            load: 0,
            capacity: instance.capacity,
            last_node: 0,
            unvisited,
        })
    }

    pub fn last_node(&self) -> usize {
        self.last_node
    }

    pub fn is_visited(&self, node: usize) -> bool {
        self.visited[node]
    }

    /// Remaining capacity as a fraction of the vehicle capacity, in `[0, 1]`.
    pub fn remaining_capacity(&self) -> f64 {
        f64::from(self.capacity - self.load) / f64::from(self.capacity)
    }

    pub fn done(&self) -> bool {
        self.unvisited == 0 && self.last_node == 0
    }

    pub fn unvisited(&self) -> usize {
        self.unvisited
    }

    fn customer_fits(&self, instance: &Instance, node: usize) -> bool {
        // Integer comparison of `demand <= capacity - load`: exact, so the
        // normalized-value tolerance is never needed.
        instance.demand(node) <= self.capacity - self.load
    }

    /// Feasible next nodes.
    pub fn feasible_mask(&self, instance: &Instance) -> Result<Vec<bool>, VrpError> {
        if self.done() {
            return Err(VrpError::Invariant("state is already done".into()));
        }
        let mut mask = Vec::with_capacity(self.visited.len());
        mask.push(self.last_node != 0);
        for node in 1..self.visited.len() {
            mask.push(!self.visited[node] && self.customer_fits(instance, node));
        }
        if !mask.iter().any(|&m| m) {
            return Err(VrpError::Invariant(format!(
                "no feasible move from node {} with {} customers left",
                self.last_node, self.unvisited
            )));
        }
        Ok(mask)
    }

    /// Moves to `node`, which must be feasible.
    pub fn apply_move(&mut self, instance: &Instance, node: usize) -> Result<(), VrpError> {
        if node >= self.visited.len() {
            return Err(VrpError::OutOfRange(node));
        }
        if self.done() {
            return Err(VrpError::Infeasible {
                node,
                reason: "construction already finished".into(),
            });
        }
        if node == 0 {
            if self.last_node == 0 {
                return Err(VrpError::Infeasible {
                    node,
                    reason: "already at the depot".into(),
                });
            }
            self.load = 0;
        } else {
            if self.visited[node] {
                return Err(VrpError::Infeasible {
                    node,
                    reason: "already visited".into(),
                });
            }
            if !self.customer_fits(instance, node) {
                return Err(VrpError::Infeasible {
                    node,
                    reason: format!(
                        "demand {} exceeds remaining capacity {}",
                        instance.demand(node),
                        self.capacity - self.load
                    ),
                });
            }
            self.visited[node] = true;
            self.load += instance.demand(node);
            self.unvisited -= 1;
        }
        self.last_node = node;
        Ok(())
    }
}

/// Length of the closed tour: every leg plus the return to the depot.
pub fn tour_cost(instance: &Instance, nodes: &[usize]) -> Result<f64, VrpError> {
    tour_cost_with(instance, nodes, |a, b| instance.dist(a, b))
}

/// Tour length with TSPLIB `EUC_2D` rounding (each leg rounded to the nearest integer).
pub fn tour_cost_rounded(instance: &Instance, nodes: &[usize]) -> Result<f64, VrpError> {
    tour_cost_with(instance, nodes, |a, b| (instance.dist(a, b) + 0.5).floor())
}

fn tour_cost_with(
    instance: &Instance,
    nodes: &[usize],
    dist: impl Fn(usize, usize) -> f64,
) -> Result<f64, VrpError> {
    if nodes.first() != Some(&0) {
        return Err(VrpError::MissingDepotStart);
    }
    if let Some(&bad) = nodes.iter().find(|&&n| n >= instance.num_nodes()) {
        return Err(VrpError::OutOfRange(bad));
    }
    let legs: f64 = nodes.windows(2).map(|w| dist(w[0], w[1])).sum();
    Ok(legs + dist(nodes[nodes.len() - 1], 0))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingDepotStart,
    OutOfRange(usize),
    MissingCustomer(usize),
    DuplicateCustomer(usize),
    Overload { route: usize, load: u64, capacity: u32 },
}

/// Every constraint violation of a node sequence; empty means feasible.
pub fn validate_solution(instance: &Instance, nodes: &[usize]) -> Vec<Violation> {
    let mut out = Vec::new();
    if nodes.first() != Some(&0) {
        out.push(Violation::MissingDepotStart);
    }
    let mut seen = vec![0usize; instance.num_nodes()];
    for &n in nodes {
        if n >= instance.num_nodes() {
            out.push(Violation::OutOfRange(n));
        } else {
            seen[n] += 1;
        }
    }
    for node in 1..instance.num_nodes() {
        match seen[node] {
            0 => out.push(Violation::MissingCustomer(node)),
            1 => {}
            _ => out.push(Violation::DuplicateCustomer(node)),
        }
    }
    for (route, r) in split_routes(nodes).iter().enumerate() {
        let load: u64 = r
            .iter()
            .filter(|&&n| n < instance.num_nodes())
            .map(|&n| u64::from(instance.demand(n)))
            .sum();
        if load > u64::from(instance.capacity) {
            out.push(Violation::Overload {
                route,
                load,
                capacity: instance.capacity,
            });
        }
    }
    out
}
