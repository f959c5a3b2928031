use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use cua_core::adapter::Transform;
use cua_core::cayley::{assemble_bdu, BlockDiagonalUnitary, SkewBlockParams};
use cua_core::distill::checkpoint::load_checkpoint;
use cua_core::entanglement::{
    brickwork_unitary, effective_bond_dim, haar_bdu, operator_schmidt, operator_schmidt_bdu, stress_scale, Bipartition,
    SchmidtRow, BOND_THRESHOLD,
};
use cua_core::rng::{derive_seed, rng_from};

use crate::report::{CliResult, Common, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Identity,
    Haar,
    Brickwork,
    Stress,
    Checkpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EntangleSettings {
    pub seed: u64,
    pub objects: Vec<Source>,
    pub n_qubits: usize,
    pub block_dim: usize,
    pub brickwork_depths: Vec<usize>,
    pub stress_scales: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EntangleSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: vec![Source::Identity, Source::Haar, Source::Brickwork, Source::Stress],
            n_qubits: 12,
            block_dim: 4,
            brickwork_depths: (1..=6).collect(),
            stress_scales: vec![0.0, 1.0, 2.0, 4.0],
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EntangleArgs {
    #[arg(long, value_enum, value_delimiter = ',')]
    pub objects: Option<Vec<Source>>,
    #[arg(long)]
    pub n_qubits: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntangleRow {
    #[serde(flatten)]
    pub schmidt: SchmidtRow,
    /// Singular values above the bond threshold.
    pub chi: usize,
}

fn log2_exact(d: usize, what: &str) -> CliResult<usize> {
    if d < 2 || !d.is_power_of_two() {
        return Err(format!("{what} {d} is not a power of two").into());
    }
    Ok(d.trailing_zeros() as usize)
}

struct Cuts {
    natural: Bipartition,
    equal: Bipartition,
}

fn cuts(n: usize, block_dim: usize) -> CliResult<Cuts> {
    let m = log2_exact(block_dim, "block_dim")?;
    if n < 2 || m >= n {
        return Err(format!("{n} qubits cannot hold blocks of dimension {block_dim}").into());
    }
    Ok(Cuts { natural: Bipartition::qubits(n - m, n)?, equal: Bipartition::qubits(n / 2, n)? })
}

fn bdu_rows(rows: &mut Vec<EntangleRow>, name: &str, u: &BlockDiagonalUnitary, c: &Cuts) -> CliResult<()> {
    for cut in [c.natural, c.equal] {
        let spec = operator_schmidt_bdu(u, cut)?;
        rows.push(EntangleRow { schmidt: SchmidtRow::new(name, &cut, &spec), chi: effective_bond_dim(&spec, BOND_THRESHOLD) });
    }
    Ok(())
}

pub fn entangle_rows(s: &EntangleSettings) -> CliResult<Vec<EntangleRow>> {
    let n = s.n_qubits;
    let c = cuts(n, s.block_dim)?;
    let dim = 1usize << n;
    let blocks = dim / s.block_dim;
    let mut rows = Vec::new();
    for source in &s.objects {
        match source {
            Source::Identity => bdu_rows(&mut rows, "identity", &BlockDiagonalUnitary::identity(dim, s.block_dim)?, &c)?,
            Source::Haar => {
                let u = haar_bdu(blocks, s.block_dim, derive_seed(s.seed, &[20]))?;
                bdu_rows(&mut rows, &format!("haar_so{}_bdu", s.block_dim), &u, &c)?;
            }
            Source::Stress => {
                let mut rng = rng_from(derive_seed(s.seed, &[21]));
                let k = SkewBlockParams::random(s.block_dim, blocks, 1.0, &mut rng)?;
                for &scale in &s.stress_scales {
                    bdu_rows(&mut rows, &format!("stress_s{scale}"), &stress_scale(&k, scale)?, &c)?;
                }
            }
            Source::Brickwork => {
                let cut = c.natural;
                for &depth in &s.brickwork_depths {
                    let u = brickwork_unitary(n, depth, derive_seed(s.seed, &[22]))?;
                    let spec = operator_schmidt(&u, cut)?;
                    rows.push(EntangleRow {
                        schmidt: SchmidtRow::new(format!("brickwork_d{depth}"), &cut, &spec),
                        chi: effective_bond_dim(&spec, BOND_THRESHOLD),
                    });
                }
            }
            Source::Checkpoint => {
                let path = s.checkpoint.as_ref().ok_or("object `checkpoint` needs --checkpoint")?;
                let model = load_checkpoint(path)?;
                for (site, layer) in model.adapters() {
                    let Transform::Cayley { params, .. } = layer.transform() else {
                        return Err(format!("adapter {} is not a Cayley operator", site.label()).into());
                    };
                    let u = assemble_bdu(params)?;
                    let an = log2_exact(u.input_dim(), "adapter dimension")?;
                    bdu_rows(&mut rows, &format!("adapter:{}", site.label()), &u, &cuts(an, params.block_dim())?)?;
                }
            }
        }
    }
    Ok(rows)
}

fn to_csv(rows: &[EntangleRow]) -> String {
    let mut s = String::from("object,cut,rank_max,rank_achieved,sigma_max,one_minus_sum_sigma4,chi\n");
    for r in rows {
        let x = &r.schmidt;
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{}",
            x.object, x.cut, x.rank_max, x.rank_achieved, x.sigma_max, x.purity_deficit, r.chi
        );
    }
    s
}

pub fn run(common: &Common, args: &EntangleArgs) -> CliResult<()> {
    let mut s: EntangleSettings = common.load()?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(o) = &args.objects {
        s.objects = o.clone();
    }
    s.n_qubits = args.n_qubits.unwrap_or(s.n_qubits);
    s.checkpoint = args.checkpoint.clone().or(s.checkpoint);
    let rows = entangle_rows(&s)?;
    let run = RunDir::create(common, &s, s.seed)?;
    let path = run.write_report("entangle", &to_csv(&rows), &rows)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}
