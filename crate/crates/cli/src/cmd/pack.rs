use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use cua_core::circuit_plan::{greedy_max_matching, heavy_hex_map, packing_schedule, token_circuit_estimate, CouplingMap};

use crate::report::{CliResult, Common, RunDir};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PackSettings {
    pub seed: u64,
    /// Edge-list file (`qubits <n>` header, then `u v` lines). A heavy-hex
    /// lattice is generated when absent.
    pub map: Option<PathBuf>,
    /// Heavy-hex cell rows and columns.
    pub heavy_hex: [usize; 2],
    /// Cap on the number of lanes taken from the greedy matching.
    pub max_lanes: Option<usize>,
    /// Adapter blocks evaluated per token.
    pub num_blocks: usize,
    pub num_tokens: u64,
}

impl Default for PackSettings {
    fn default() -> Self {
        Self { seed: 0, map: None, heavy_hex: [4, 6], max_lanes: Some(64), num_blocks: 1024, num_tokens: 83 }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub max_lanes: Option<usize>,
    #[arg(long)]
    pub num_blocks: Option<usize>,
    #[arg(long)]
    pub num_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackReport {
    pub device_qubits: usize,
    pub num_lanes: usize,
    pub qubits_used: usize,
    pub num_blocks: usize,
    pub circuits_per_token: usize,
    pub num_tokens: u64,
    pub total_circuits: u64,
    pub lanes: Vec<(usize, usize)>,
}

pub fn pack(s: &PackSettings) -> CliResult<PackReport> {
    let device = match &s.map {
        Some(p) => CouplingMap::from_edge_list(
            &fs::read_to_string(p).map_err(|e| format!("cannot read coupling map {}: {e}", p.display()))?,
        )?,
        None => heavy_hex_map(s.heavy_hex[0], s.heavy_hex[1]),
    };
    let lanes = greedy_max_matching(&device, s.max_lanes.unwrap_or(usize::MAX));
    // with no lanes nothing can be scheduled, so the schedule is empty
    let circuits_per_token = if lanes.is_empty() { 0 } else { packing_schedule(s.num_blocks, lanes.len())?.num_circuits };
    Ok(PackReport {
        device_qubits: device.num_qubits(),
        num_lanes: lanes.len(),
        qubits_used: 2 * lanes.len(),
        num_blocks: s.num_blocks,
        circuits_per_token,
        num_tokens: s.num_tokens,
        total_circuits: token_circuit_estimate(s.num_tokens, circuits_per_token as u64),
        lanes,
    })
}

pub fn run(common: &Common, args: &PackArgs) -> CliResult<()> {
    let mut s: PackSettings = common.load()?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    s.map = args.map.clone().or(s.map);
    s.max_lanes = args.max_lanes.or(s.max_lanes);
    s.num_blocks = args.num_blocks.unwrap_or(s.num_blocks);
    s.num_tokens = args.num_tokens.unwrap_or(s.num_tokens);
    let r = pack(&s)?;
    let run = RunDir::create(common, &s, s.seed)?;
    let csv = format!(
        "device_qubits,num_lanes,qubits_used,num_blocks,circuits_per_token,num_tokens,total_circuits\n{},{},{},{},{},{},{}\n",
        r.device_qubits, r.num_lanes, r.qubits_used, r.num_blocks, r.circuits_per_token, r.num_tokens, r.total_circuits
    );
    let mut lanes = String::from("lane,q0,q1\n");
    for (i, (u, v)) in r.lanes.iter().enumerate() {
        let _ = writeln!(lanes, "{i},{u},{v}");
    }
    run.write_csv("lanes.csv", &lanes)?;
    let path = run.write_report("pack", &csv, &r)?;
    println!("{} lanes, {} circuits per token -> {}", r.num_lanes, r.circuits_per_token, path.display());
    Ok(())
}
