use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use cua_core::cayley::{assemble_bdu, SkewBlockParams};
use cua_core::circuit_plan::{noise_table, NoiseTableRow};
use cua_core::distill::checkpoint::load_checkpoint;
use cua_core::distill::corpus::DEFAULT_CORPUS_BYTES;
use cua_core::distill::{noise_phase_sweep, NoisePoint};
use cua_core::qemu::{emulate_slice, EmulationMode, NoiseModel};
use cua_core::rng::{derive_seed, rng_from};

use crate::report::{load_corpus, CliResult, Common, RunDir};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSettings {
    pub seed: u64,
    /// Checkpoint with sign-constrained adapters.
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub corpus_bytes: usize,
    pub noise: NoiseModel,
    pub lambdas: Vec<f64>,
    pub mode: EmulationMode,
    pub eval_windows: usize,
    pub shots: Vec<u64>,
    /// Random slices per shot count in the shot-noise sweep.
    pub shot_slices: usize,
    pub block_dim: usize,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: None,
            corpus: None,
            corpus_bytes: DEFAULT_CORPUS_BYTES,
            noise: NoiseModel::default(),
            lambdas: vec![0.0, 0.012, 0.1, 0.5, 1.0],
            mode: EmulationMode::ExactProb,
            eval_windows: 300,
            shots: vec![1024, 2048, 4096, 8192, 16384],
            shot_slices: 1000,
            block_dim: 4,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<u64>>,
    #[arg(long)]
    pub p_sx: Option<f64>,
    #[arg(long)]
    pub p_cz: Option<f64>,
    #[arg(long)]
    pub p_readout: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShotPoint {
    pub shots: u64,
    pub rmse: f64,
}

#[derive(Debug, Serialize)]
struct NoiseReport {
    table: Vec<NoiseTableRow>,
    ppl: Vec<NoisePoint>,
    shot_noise: Vec<ShotPoint>,
}

/// RMSE between sampled and exact reconstructions of random rotated slices,
/// under the block's gate channel, for each shot count.
pub fn shot_sweep(s: &NoiseSettings) -> CliResult<Vec<ShotPoint>> {
    let b = s.block_dim;
    if !b.is_power_of_two() || b < 2 {
        return Err(format!("block_dim {b} is not a power of two").into());
    }
    let mut rng = rng_from(derive_seed(s.seed, &[10]));
    let mut slices = Vec::with_capacity(s.shot_slices);
    for _ in 0..s.shot_slices {
        let p = SkewBlockParams::random(b, 1, 1.0, &mut rng)?;
        let q = assemble_bdu(&p)?.blocks()[0].clone();
        let x: Vec<f64> = (0..b).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        slices.push((q, x));
    }
    let base = s.noise.channel_for_block(b.trailing_zeros() as usize)?;
    s.shots
        .iter()
        .enumerate()
        .map(|(si, &n)| {
            let channel = cua_core::qemu::ChannelParams { n_shots: n, ..base };
            let (mut sq, mut count) = (0.0, 0usize);
            for (i, (q, x)) in slices.iter().enumerate() {
                let exact = emulate_slice(q, x, &channel, EmulationMode::ExactProb, 0)?;
                let sampled = emulate_slice(q, x, &channel, EmulationMode::Sampled, derive_seed(s.seed, &[11, si as u64, i as u64]))?;
                for (a, c) in exact.iter().zip(&sampled) {
                    sq += (a - c).powi(2);
                    count += 1;
                }
            }
            Ok(ShotPoint { shots: n, rmse: (sq / count.max(1) as f64).sqrt() })
        })
        .collect()
}

fn to_csv(r: &NoiseReport) -> String {
    let mut s = String::from("kind,n_qubits,shots,lambda_1q,lambda_2q,lambda,epsilon_ro,value\n");
    for t in &r.table {
        let rep = t.report;
        let _ = writeln!(
            s,
            "table,{},,{},{},{},{},",
            t.n_qubits, rep.lambda_1q, rep.lambda_2q, rep.lambda_total, rep.epsilon_readout
        );
    }
    for p in &r.ppl {
        let _ = writeln!(s, "ppl,,,,,{},,{}", p.lambda, p.ppl);
    }
    for p in &r.shot_noise {
        let _ = writeln!(s, "shot_rmse,,{},,,,,{}", p.shots, p.rmse);
    }
    s
}

pub fn run(common: &Common, args: &NoiseArgs) -> CliResult<()> {
    let mut s: NoiseSettings = common.load()?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    s.checkpoint = args.checkpoint.clone().or(s.checkpoint);
    if let Some(l) = &args.lambdas {
        s.lambdas = l.clone();
    }
    if let Some(v) = &args.shots {
        s.shots = v.clone();
    }
    s.noise.p_sx = args.p_sx.unwrap_or(s.noise.p_sx);
    s.noise.p_cz = args.p_cz.unwrap_or(s.noise.p_cz);
    s.noise.p_readout = args.p_readout.unwrap_or(s.noise.p_readout);
    s.noise.validate()?;
    let ckpt = s.checkpoint.clone().ok_or("noise-sweep needs a checkpoint (--checkpoint)")?;
    let model = load_checkpoint(&ckpt).map_err(|e| format!("cannot load checkpoint {}: {e}", ckpt.display()))?;

    let run = RunDir::create(common, &s, s.seed)?;
    let corpus = load_corpus(s.corpus.as_deref(), s.corpus_bytes)?;
    let report = NoiseReport {
        table: noise_table(&s.noise),
        ppl: noise_phase_sweep(&model, &corpus.heldout, &s.lambdas, s.mode, s.noise.n_shots, s.seed, s.eval_windows)?,
        shot_noise: shot_sweep(&s)?,
    };
    let path = run.write_report("noise_sweep", &to_csv(&report), &report)?;
    println!("{}", path.display());
    Ok(())
}
