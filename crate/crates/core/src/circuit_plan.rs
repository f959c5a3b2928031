//! Gate budgets, compounded infidelity, and coupling-map packing.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CuaError, Result};
use crate::qemu::NoiseModel;

/// Native-gate counts of a circuit. `depth` is the transpiled depth when it
/// is known and the fully serial bound otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GateBudget {
    pub sx_count: u64,
    pub rz_count: u64,
    pub cz_count: u64,
    pub reset_count: u64,
    pub depth: u64,
}

impl GateBudget {
    pub fn new(sx_count: u64, rz_count: u64, cz_count: u64, reset_count: u64, depth: u64) -> Result<Self> {
        let any = sx_count + rz_count + cz_count + reset_count > 0;
        if any && depth == 0 {
            return Err(CuaError::InvalidConfig("a non-empty circuit has depth >= 1".into()));
        }
        Ok(Self { sx_count, rz_count, cz_count, reset_count, depth })
    }

    /// Budget with only SX and CZ counts known.
    pub fn sx_cz(sx_count: u64, cz_count: u64) -> Self {
        Self { sx_count, rz_count: 0, cz_count, reset_count: 0, depth: sx_count + cz_count }
    }

    pub fn total_gates(&self) -> u64 {
        self.sx_count + self.rz_count + self.cz_count + self.reset_count
    }
}

/// Exact-synthesis SX / CZ counts per block size, n = 2..=8.
const BLOCK_SYNTHESIS: [(usize, u64, u64); 7] = [
    (2, 20, 4),
    (3, 188, 45),
    (4, 992, 273),
    (5, 4_526, 1_331),
    (6, 18_708, 5_534),
    (7, 75_804, 22_396),
    (8, 306_846, 91_000),
];

/// SX/CZ budget of one `2^n x 2^n` block.
pub fn gate_budget_for_block(n_qubits: usize) -> Result<GateBudget> {
    BLOCK_SYNTHESIS
        .iter()
        .find(|(n, _, _)| *n == n_qubits)
        .map(|&(_, sx, cz)| GateBudget::sx_cz(sx, cz))
        .ok_or_else(|| CuaError::InvalidConfig(format!("no gate budget for {n_qubits} qubits (supported: 2..=8)")))
}

/// The transpiled 2-qubit encode-unitary-measure circuit.
pub fn single_block_circuit() -> GateBudget {
    GateBudget { sx_count: 12, rz_count: 9, cz_count: 3, reset_count: 2, depth: 19 }
}

/// One packed wide circuit of 64 two-qubit lanes on 128 qubits.
pub fn packed_lane_circuit() -> GateBudget {
    GateBudget { sx_count: 904, rz_count: 916, cz_count: 192, reset_count: 128, depth: 23 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfidelityReport {
    pub lambda_1q: f64,
    pub lambda_2q: f64,
    pub lambda_total: f64,
    pub epsilon_readout: f64,
}

fn compound(p: f64, count: u64) -> f64 {
    // 1 - (1-p)^count without cancellation for small p
    -((count as f64) * (-p).ln_1p()).exp_m1()
}

/// Compounded gate and readout infidelity of a budget under a noise model.
pub fn gate_infidelity(budget: &GateBudget, noise: &NoiseModel, n_qubits: usize) -> InfidelityReport {
    let lambda_1q = compound(noise.p_sx, budget.sx_count);
    let lambda_2q = compound(noise.p_cz, budget.cz_count);
    let lambda_total = 1.0 - (1.0 - lambda_1q) * (1.0 - lambda_2q);
    let epsilon_readout = compound(noise.p_readout, n_qubits as u64);
    InfidelityReport { lambda_1q, lambda_2q, lambda_total, epsilon_readout }
}

/// One row of the qubit-count noise table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseTableRow {
    pub n_qubits: usize,
    pub block: usize,
    pub budget: GateBudget,
    pub report: InfidelityReport,
}

pub fn noise_table(noise: &NoiseModel) -> Vec<NoiseTableRow> {
    BLOCK_SYNTHESIS
        .iter()
        .map(|&(n, sx, cz)| {
            let budget = GateBudget::sx_cz(sx, cz);
            NoiseTableRow { n_qubits: n, block: 1 << n, budget, report: gate_infidelity(&budget, noise, n) }
        })
        .collect()
}

/// CSV in the column order `nq,block,sx,cz,lambda_1q,lambda_2q,lambda,epsilon_ro`.
pub fn noise_table_csv(rows: &[NoiseTableRow]) -> String {
    let mut s = String::from("nq,block,sx,cz,lambda_1q,lambda_2q,lambda,epsilon_ro\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.n_qubits,
            r.block,
            r.budget.sx_count,
            r.budget.cz_count,
            r.report.lambda_1q,
            r.report.lambda_2q,
            r.report.lambda_total,
            r.report.epsilon_readout
        );
    }
    s
}

/// Undirected qubit connectivity graph. Edges are stored as `(u, v)` with
/// `u < v`, sorted ascending; the position in that list is the edge index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingMap {
    num_qubits: usize,
    edges: Vec<(usize, usize)>,
}

impl CouplingMap {
    pub fn new(num_qubits: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(CuaError::InvalidConfig(format!("self-loop on qubit {u}")));
            }
            if u >= num_qubits || v >= num_qubits {
                return Err(CuaError::IndexOutOfRange { index: u.max(v), len: num_qubits });
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Self { num_qubits, edges: set.into_iter().collect() })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_qubits];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        if self.num_qubits == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.num_qubits];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; self.num_qubits];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Subgraph induced on `qubits`, relabelled in ascending original order
    /// (which keeps the relative edge order).
    pub fn induced(&self, qubits: &[usize]) -> Result<Self> {
        let mut keep: Vec<usize> = qubits.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut relabel = vec![usize::MAX; self.num_qubits];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_qubits {
                return Err(CuaError::IndexOutOfRange { index: old, len: self.num_qubits });
            }
            relabel[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|(u, v)| relabel[*u] != usize::MAX && relabel[*v] != usize::MAX)
            .map(|&(u, v)| (relabel[u], relabel[v]));
        Self::new(keep.len(), edges)
    }

    /// Edge-list text: a `qubits <n>` header then one `u v` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("qubits {}\n", self.num_qubits);
        for (u, v) in &self.edges {
            let _ = writeln!(s, "{u} {v}");
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| CuaError::Parse("empty coupling map".into()))?;
        let n = header
            .strip_prefix("qubits")
            .and_then(|r| r.trim().parse::<usize>().ok())
            .ok_or_else(|| CuaError::Parse(format!("bad header `{header}`")))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(u)), Some(Ok(v)), None) => edges.push((u, v)),
                _ => return Err(CuaError::Parse(format!("bad edge line `{line}`"))),
            }
        }
        Self::new(n, edges)
    }
}

/// Heavy-hexagon lattice of `rows x cols` hexagonal cells: a honeycomb in
/// brick-wall form with one extra qubit on every edge. Lattice sites come
/// first (row-major), then the bridge qubits in edge order.
pub fn heavy_hex_map(rows: usize, cols: usize) -> CouplingMap {
    let rows = rows.max(1);
    let cols = cols.max(1);
    let width = 2 * cols + 2;
    let id = |r: usize, c: usize| r * width + c;
    let n_sites = (rows + 1) * width;
    let mut hex_edges = Vec::new();
    for r in 0..=rows {
        for c in 0..width - 1 {
            hex_edges.push((id(r, c), id(r, c + 1)));
        }
        if r < rows {
            for c in (r % 2..width).step_by(2) {
                hex_edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    // Trim dangling paths so only closed hexagons remain.
    let mut alive = vec![true; n_sites];
    loop {
        let mut deg = vec![0usize; n_sites];
        for &(u, v) in &hex_edges {
            if alive[u] && alive[v] {
                deg[u] += 1;
                deg[v] += 1;
            }
        }
        let mut changed = false;
        for s in 0..n_sites {
            if alive[s] && deg[s] < 2 {
                alive[s] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut relabel = vec![usize::MAX; n_sites];
    let mut next = 0;
    for s in 0..n_sites {
        if alive[s] {
            relabel[s] = next;
            next += 1;
        }
    }
    let kept: Vec<(usize, usize)> = hex_edges
        .into_iter()
        .filter(|(u, v)| alive[*u] && alive[*v])
        .map(|(u, v)| (relabel[u], relabel[v]))
        .collect();
    let mut edges = Vec::with_capacity(2 * kept.len());
    for (i, (u, v)) in kept.iter().enumerate() {
        let bridge = next + i;
        edges.push((*u, bridge));
        edges.push((*v, bridge));
    }
    CouplingMap::new(next + kept.len(), edges).expect("generated indices are in range")
}

/// Scan edges in ascending index order and keep each one whose endpoints are
/// both free, stopping at `max_pairs`.
pub fn greedy_max_matching(map: &CouplingMap, max_pairs: usize) -> Vec<(usize, usize)> {
    let mut used = vec![false; map.num_qubits];
    let mut out = Vec::new();
    for &(u, v) in &map.edges {
        if out.len() >= max_pairs {
            break;
        }
        if !used[u] && !used[v] {
            used[u] = true;
            used[v] = true;
            out.push((u, v));
        }
    }
    out
}

/// Subgraph induced on the qubits of the first `num_lanes` greedy pairs of a
/// device map, together with those qubits in original labels. Greedy
/// matching on the result recovers the same `num_lanes` pairs.
pub fn lane_subgraph(device: &CouplingMap, num_lanes: usize) -> Result<(CouplingMap, Vec<usize>)> {
    let pairs = greedy_max_matching(device, num_lanes);
    if pairs.len() < num_lanes {
        return Err(CuaError::InvalidConfig(format!(
            "device admits only {} disjoint pairs, {num_lanes} requested",
            pairs.len()
        )));
    }
    let mut qubits: Vec<usize> = pairs.iter().flat_map(|&(u, v)| [u, v]).collect();
    qubits.sort_unstable();
    Ok((device.induced(&qubits)?, qubits))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingSchedule {
    pub num_circuits: usize,
    /// `(circuit, lane)` for each block, indexed by block.
    pub assignment: Vec<(usize, usize)>,
}

/// Fill circuits lane by lane in block order.
pub fn packing_schedule(num_blocks: usize, lanes_per_circuit: usize) -> Result<PackingSchedule> {
    if lanes_per_circuit == 0 {
        return Err(CuaError::InvalidConfig("lanes_per_circuit must be >= 1".into()));
    }
    Ok(PackingSchedule {
        num_circuits: num_blocks.div_ceil(lanes_per_circuit),
        assignment: (0..num_blocks).map(|b| (b / lanes_per_circuit, b % lanes_per_circuit)).collect(),
    })
}

pub fn token_circuit_estimate(num_tokens: u64, circuits_per_token: u64) -> u64 {
    num_tokens * circuits_per_token
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_and_range() {
        assert_eq!(gate_budget_for_block(2).unwrap(), GateBudget::sx_cz(20, 4));
        assert_eq!(gate_budget_for_block(3).unwrap(), GateBudget::sx_cz(188, 45));
        assert_eq!(gate_budget_for_block(8).unwrap(), GateBudget::sx_cz(306_846, 91_000));
        assert!(gate_budget_for_block(1).is_err());
        assert!(gate_budget_for_block(9).is_err());
        assert!(GateBudget::new(1, 0, 0, 0, 0).is_err());
        assert_eq!(single_block_circuit().depth, 19);
    }

    #[test]
    fn two_qubit_row() {
        let r = gate_infidelity(&GateBudget::sx_cz(20, 4), &NoiseModel::default(), 2);
        assert!((r.lambda_1q - 0.005).abs() <= 0.001);
        assert!((r.lambda_2q - 0.007).abs() <= 0.001);
        assert!((r.lambda_total - 0.012).abs() <= 0.001);
        assert!((r.epsilon_readout - 0.014).abs() <= 0.001);
        let z = gate_infidelity(&GateBudget::default(), &NoiseModel::default(), 2);
        assert_eq!((z.lambda_1q, z.lambda_2q, z.lambda_total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn compounded_beats_additive_on_three_qubits() {
        let r = gate_infidelity(&GateBudget::sx_cz(188, 45), &NoiseModel::default(), 3);
        let additive = 188.0 * 2.45e-4;
        assert!((r.lambda_1q - 0.045).abs() < (additive - 0.045f64).abs());
        assert!((r.lambda_total - 0.119).abs() <= 0.001);
    }

    #[test]
    fn minimal_heavy_hex_is_bridged_hexagon() {
        let m = heavy_hex_map(1, 1);
        assert_eq!(m.num_qubits(), 12);
        assert_eq!(m.edges().len(), 12);
        assert!(m.degrees().iter().all(|d| *d == 2));
        assert!(m.is_connected());
    }

    #[test]
    fn heavy_hex_degree_bound() {
        for r in 1..5 {
            for c in 1..5 {
                let m = heavy_hex_map(r, c);
                assert!(m.max_degree() <= 3);
                assert!(m.is_connected());
            }
        }
        assert!(heavy_hex_map(4, 6).num_qubits() >= 156);
    }

    #[test]
    fn matching_small_cases() {
        let path = CouplingMap::new(5, (0..4).map(|i| (i, i + 1))).unwrap();
        assert_eq!(greedy_max_matching(&path, 10), vec![(0, 1), (2, 3)]);
        assert_eq!(greedy_max_matching(&path, 1).len(), 1);
        let empty = CouplingMap::new(4, []).unwrap();
        assert!(greedy_max_matching(&empty, 64).is_empty());
    }

    #[test]
    fn coupling_map_validation_and_text() {
        assert!(CouplingMap::new(3, [(1, 1)]).is_err());
        assert!(CouplingMap::new(3, [(0, 3)]).is_err());
        let m = CouplingMap::new(4, [(2, 1), (0, 1), (1, 2)]).unwrap();
        assert_eq!(m.edges(), &[(0, 1), (1, 2)]);
        let back = CouplingMap::from_edge_list(&m.to_edge_list()).unwrap();
        assert_eq!(back, m);
        assert!(CouplingMap::from_edge_list("3\n0 1\n").is_err());
        assert!(CouplingMap::from_edge_list("qubits 3\n0 1 2\n").is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(packing_schedule(1024, 64).unwrap().num_circuits, 16);
        assert_eq!(packing_schedule(144, 72).unwrap().num_circuits, 2);
        assert_eq!(packing_schedule(1, 64).unwrap().num_circuits, 1);
        assert_eq!(packing_schedule(0, 64).unwrap().num_circuits, 0);
        assert!(packing_schedule(4, 0).is_err());
        assert_eq!(token_circuit_estimate(129, 3), 387);
        assert_eq!(token_circuit_estimate(0, 16), 0);
        assert_eq!(token_circuit_estimate(83, 16), 1328);
    }
}
