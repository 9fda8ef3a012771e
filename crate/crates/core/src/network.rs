//! Power network model, JSON case files, bus admittance matrix and its
//! bus-type partition, and graph features for the surrogate models.

use std::collections::VecDeque;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("malformed case file: {0}")]
    Syntax(String),
    #[error("no slack bus")]
    NoSlack,
    #[error("multiple slack buses")]
    MultipleSlack,
    #[error("bus {index} has id {id}; ids must be 0-based and contiguous")]
    BusId { index: usize, id: usize },
    #[error("bus {0}: voltage setpoint must be positive for PV and slack buses")]
    Setpoint(usize),
    #[error("branch {branch}: endpoint {bus} does not exist")]
    Endpoint { branch: usize, bus: usize },
    #[error("branch {0}: from and to bus are the same")]
    SelfLoop(usize),
    #[error("branch {0}: zero series impedance")]
    ZeroImpedance(usize),
    #[error("branch {0}: tap ratio must be positive")]
    NonPositiveTap(usize),
    #[error("network is disconnected ({unreached} buses unreachable from the slack)")]
    Disconnected { unreached: usize },
    #[error("base power must be positive")]
    BaseMva,
    #[error("unknown bundled case '{0}'")]
    UnknownCase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Pq,
    Pv,
    Slack,
}

impl BusKind {
    /// Scalar node-feature encoding.
    pub fn code(self) -> f64 {
        match self {
            BusKind::Pq => 0.0,
            BusKind::Pv => 1.0,
            BusKind::Slack => 2.0,
        }
    }
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusKind::Pq => "PQ",
            BusKind::Pv => "PV",
            BusKind::Slack => "Slack",
        })
    }
}

/// A bus; powers in p.u. on the system base.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub p_gen: f64,
    pub v_setpoint: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
}

impl Bus {
    /// Specified complex injection `(p_gen - p_demand) - j q_demand`.
    pub fn s_spec(&self) -> Complex64 {
        Complex64::new(self.p_gen - self.p_demand, -self.q_demand)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance; half is applied at each end.
    pub b_charging: f64,
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
    pub in_service: bool,
}

/// Validated power network. Construct with [`Network::new`] or
/// [`parse_case`]; fields are read-only afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    base_mva: f64,
    slack: usize,
}

impl Network {
    pub fn new(buses: Vec<Bus>, branches: Vec<Branch>, base_mva: f64) -> Result<Self, NetworkError> {
        if !(base_mva > 0.0) {
            return Err(NetworkError::BaseMva);
        }
        for (index, bus) in buses.iter().enumerate() {
            if bus.id != index {
                return Err(NetworkError::BusId { index, id: bus.id });
            }
            if bus.kind != BusKind::Pq && !(bus.v_setpoint > 0.0) {
                return Err(NetworkError::Setpoint(index));
            }
        }
        let mut slacks = buses.iter().filter(|b| b.kind == BusKind::Slack);
        let slack = match (slacks.next(), slacks.next()) {
            (None, _) => return Err(NetworkError::NoSlack),
            (Some(_), Some(_)) => return Err(NetworkError::MultipleSlack),
            (Some(b), None) => b.id,
        };
        for (k, br) in branches.iter().enumerate() {
            for bus in [br.from_bus, br.to_bus] {
                if bus >= buses.len() {
                    return Err(NetworkError::Endpoint { branch: k, bus });
                }
            }
            if br.from_bus == br.to_bus {
                return Err(NetworkError::SelfLoop(k));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(NetworkError::ZeroImpedance(k));
            }
            if !(br.tap > 0.0) {
                return Err(NetworkError::NonPositiveTap(k));
            }
        }
        let net = Self {
            buses,
            branches,
            base_mva,
            slack,
        };
        let unreached = net.unreachable_count(None);
        if unreached > 0 {
            return Err(NetworkError::Disconnected { unreached });
        }
        Ok(net)
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn kinds(&self) -> Vec<BusKind> {
        self.buses.iter().map(|b| b.kind).collect()
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.in_service)
    }

    pub fn ids_of(&self, kind: BusKind) -> Vec<usize> {
        self.buses.iter().filter(|b| b.kind == kind).map(|b| b.id).collect()
    }

    /// Returns the number of buses not reachable from the slack through
    /// in-service branches, optionally pretending `skip` is out of service.
    fn unreachable_count(&self, skip: Option<usize>) -> usize {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for (k, br) in self.in_service_branches() {
            if Some(k) == skip {
                continue;
            }
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        n - count
    }

    /// Whether taking branch `k` out of service would island part of the grid.
    pub fn outage_islands(&self, k: usize) -> bool {
        self.unreachable_count(Some(k)) > 0
    }

    /// Copy with branch `k` out of service.
    pub fn with_branch_out(&self, k: usize) -> Result<Self, NetworkError> {
        let mut branches = self.branches.clone();
        branches[k].in_service = false;
        Self::new(self.buses.clone(), branches, self.base_mva)
    }

    /// Copy with each bus's demand multiplied by its factor (p and q jointly).
    pub fn with_load_scale(&self, scale: &[f64]) -> Self {
        assert_eq!(scale.len(), self.buses.len(), "one load factor per bus");
        let mut out = self.clone();
        for (bus, &s) in out.buses.iter_mut().zip(scale) {
            bus.p_demand *= s;
            bus.q_demand *= s;
        }
        out
    }

    /// Copy with modified buses and branches; re-validated.
    pub fn map(
        &self,
        bus_fn: impl Fn(&mut Bus),
        branch_fn: impl Fn(&mut Branch),
    ) -> Result<Self, NetworkError> {
        let mut buses = self.buses.clone();
        buses.iter_mut().for_each(bus_fn);
        let mut branches = self.branches.clone();
        branches.iter_mut().for_each(branch_fn);
        Self::new(buses, branches, self.base_mva)
    }

    /// Relabels buses so that old bus `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, NetworkError> {
        let n = self.buses.len();
        assert_eq!(perm.len(), n);
        let mut buses = self.buses.clone();
        for (old, bus) in self.buses.iter().enumerate() {
            let mut b = bus.clone();
            b.id = perm[old];
            buses[perm[old]] = b;
        }
        let branches = self
            .branches
            .iter()
            .map(|br| Branch {
                from_bus: perm[br.from_bus],
                to_bus: perm[br.to_bus],
                ..br.clone()
            })
            .collect();
        Self::new(buses, branches, self.base_mva)
    }

    /// Structural fingerprint used to match checkpoints and datasets to a case.
    pub fn fingerprint(&self) -> NetworkFingerprint {
        NetworkFingerprint {
            n_buses: self.buses.len(),
            n_branches: self.branches.len(),
            kinds: self.buses.iter().map(|b| b.kind.code() as u8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkFingerprint {
    pub n_buses: usize,
    pub n_branches: usize,
    pub kinds: Vec<u8>,
}

// ---------------------------------------------------------------------------
// Case file format

fn default_one() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseBus {
    id: usize,
    kind: BusKind,
    #[serde(default)]
    pd: f64,
    #[serde(default)]
    qd: f64,
    #[serde(default)]
    pg: f64,
    #[serde(default = "default_one")]
    vset: f64,
    #[serde(default)]
    gs: f64,
    #[serde(default)]
    bs: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseBranch {
    from: usize,
    to: usize,
    r: f64,
    x: f64,
    #[serde(default)]
    b: f64,
    #[serde(default = "default_one")]
    tap: f64,
    #[serde(default)]
    shift: f64,
    #[serde(default = "default_true")]
    status: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<CaseBus>,
    branches: Vec<CaseBranch>,
}

/// Parses a JSON case file. All quantities are already in p.u. on
/// `base_mva`, angles in radians.
pub fn parse_case(text: &str) -> Result<Network, NetworkError> {
    let case: CaseFile =
        serde_json::from_str(text).map_err(|e| NetworkError::Syntax(e.to_string()))?;
    let mut buses: Vec<Bus> = case
        .buses
        .into_iter()
        .map(|b| Bus {
            id: b.id,
            kind: b.kind,
            p_demand: b.pd,
            q_demand: b.qd,
            p_gen: b.pg,
            v_setpoint: b.vset,
            shunt_g: b.gs,
            shunt_b: b.bs,
        })
        .collect();
    buses.sort_by_key(|b| b.id);
    let branches = case
        .branches
        .into_iter()
        .map(|b| Branch {
            from_bus: b.from,
            to_bus: b.to,
            r: b.r,
            x: b.x,
            b_charging: b.b,
            tap: b.tap,
            shift: b.shift,
            in_service: b.status,
        })
        .collect();
    Network::new(buses, branches, case.base_mva)
}

/// Serializes a network to the case file format.
pub fn write_case(net: &Network) -> String {
    let case = CaseFile {
        base_mva: net.base_mva,
        buses: net
            .buses
            .iter()
            .map(|b| CaseBus {
                id: b.id,
                kind: b.kind,
                pd: b.p_demand,
                qd: b.q_demand,
                pg: b.p_gen,
                vset: b.v_setpoint,
                gs: b.shunt_g,
                bs: b.shunt_b,
            })
            .collect(),
        branches: net
            .branches
            .iter()
            .map(|b| CaseBranch {
                from: b.from_bus,
                to: b.to_bus,
                r: b.r,
                x: b.x,
                b: b.b_charging,
                tap: b.tap,
                shift: b.shift,
                status: b.in_service,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&case).expect("case serializes")
}

pub const BUNDLED_CASES: [&str; 3] = ["ieee33", "ieee69", "ieee118"];

/// Case text of a bundled IEEE test system.
pub fn bundled_case_text(name: &str) -> Option<&'static str> {
    match name {
        "ieee33" => Some(include_str!("../cases/ieee33.json")),
        "ieee69" => Some(include_str!("../cases/ieee69.json")),
        "ieee118" => Some(include_str!("../cases/ieee118.json")),
        _ => None,
    }
}

pub fn bundled_case(name: &str) -> Result<Network, NetworkError> {
    let text = bundled_case_text(name).ok_or_else(|| NetworkError::UnknownCase(name.to_string()))?;
    parse_case(text)
}

// ---------------------------------------------------------------------------
// Admittance matrix

/// Sparse complex bus admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    y: CsrMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn from_csr(y: CsrMatrix<Complex64>) -> Self {
        assert_eq!(y.nrows(), y.ncols(), "admittance matrix must be square");
        Self { y }
    }

    pub fn csr(&self) -> &CsrMatrix<Complex64> {
        &self.y
    }

    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn get(&self, i: usize, k: usize) -> Complex64 {
        self.y.get(i, k)
    }

    pub fn g(&self, i: usize, k: usize) -> f64 {
        self.y.get(i, k).re
    }

    pub fn b(&self, i: usize, k: usize) -> f64 {
        self.y.get(i, k).im
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        self.y.row(i)
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.y.mul_vec(v)
    }
}

/// Standard Y-bus: series admittance `1/(r + jx)`, half charging at each
/// end, off-nominal tap and phase shift on the from side, bus shunts on the
/// diagonal.
pub fn build_ybus(net: &Network) -> AdmittanceMatrix {
    let n = net.n_buses();
    let mut trip = Vec::with_capacity(4 * net.branches.len() + n);
    for (_, br) in net.in_service_branches() {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let half_b = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = Complex64::from_polar(br.tap, br.shift);
        let ytt = ys + half_b;
        let yff = ytt / (br.tap * br.tap);
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;
        let (f, t) = (br.from_bus, br.to_bus);
        trip.push((f, f, yff));
        trip.push((f, t, yft));
        trip.push((t, f, ytf));
        trip.push((t, t, ytt));
    }
    for bus in &net.buses {
        trip.push((bus.id, bus.id, Complex64::new(bus.shunt_g, bus.shunt_b)));
    }
    AdmittanceMatrix::from_csr(CsrMatrix::from_triplets(n, n, &trip))
}

/// Y-bus rows of the PQ buses split by column bus type.
#[derive(Debug, Clone, PartialEq)]
pub struct YbusPartition {
    pub y_pp: CsrMatrix<Complex64>,
    pub y_pv: CsrMatrix<Complex64>,
    pub y_ps: CsrMatrix<Complex64>,
    /// Global bus id of each PQ partition position.
    pub pq: Vec<usize>,
    pub pv: Vec<usize>,
    pub slack: usize,
}

impl YbusPartition {
    /// Reassembles the PQ rows of the full Y-bus as dense rows.
    pub fn reassemble_pq_rows(&self) -> Vec<Vec<Complex64>> {
        let n = self.pq.len() + self.pv.len() + 1;
        let mut rows = vec![vec![Complex64::new(0.0, 0.0); n]; self.pq.len()];
        for (i, j, v) in self.y_pp.iter() {
            rows[i][self.pq[j]] = v;
        }
        for (i, j, v) in self.y_pv.iter() {
            rows[i][self.pv[j]] = v;
        }
        for (i, _, v) in self.y_ps.iter() {
            rows[i][self.slack] = v;
        }
        rows
    }
}

pub fn partition_ybus(y: &AdmittanceMatrix, kinds: &[BusKind]) -> Result<YbusPartition, NetworkError> {
    let pick = |k: BusKind| -> Vec<usize> {
        kinds
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == k)
            .map(|(i, _)| i)
            .collect()
    };
    let pq = pick(BusKind::Pq);
    let pv = pick(BusKind::Pv);
    let slacks = pick(BusKind::Slack);
    let slack = match slacks.as_slice() {
        [s] => *s,
        [] => return Err(NetworkError::NoSlack),
        _ => return Err(NetworkError::MultipleSlack),
    };
    Ok(YbusPartition {
        y_pp: y.y.submatrix(&pq, &pq),
        y_pv: y.y.submatrix(&pq, &pv),
        y_ps: y.y.submatrix(&pq, &[slack]),
        pq,
        pv,
        slack,
    })
}

// ---------------------------------------------------------------------------
// Graph features

pub const NODE_FEATURES: usize = 5;
pub const EDGE_FEATURES: usize = 3;

/// Node and edge features of a network viewed as a directed graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFeatures {
    /// `[p_demand, q_demand, p_gen, v_setpoint, kind_code]` per bus.
    pub nodes: Vec<[f64; NODE_FEATURES]>,
    /// `(source, target)` per directed edge.
    pub edges: Vec<(usize, usize)>,
    /// `[r, x, b_charging / 2]` per directed edge.
    pub edge_attr: Vec<[f64; EDGE_FEATURES]>,
}

impl GraphFeatures {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

pub fn node_features(net: &Network) -> Vec<[f64; NODE_FEATURES]> {
    net.buses
        .iter()
        .map(|b| [b.p_demand, b.q_demand, b.p_gen, b.v_setpoint, b.kind.code()])
        .collect()
}

/// Each in-service branch contributes the edge pair `from -> to`, `to -> from`.
pub fn to_graph(net: &Network) -> GraphFeatures {
    let mut edges = Vec::new();
    let mut edge_attr = Vec::new();
    for (_, br) in net.in_service_branches() {
        let attr = [br.r, br.x, br.b_charging / 2.0];
        edges.push((br.from_bus, br.to_bus));
        edge_attr.push(attr);
        edges.push((br.to_bus, br.from_bus));
        edge_attr.push(attr);
    }
    GraphFeatures {
        nodes: node_features(net),
        edges,
        edge_attr,
    }
}
