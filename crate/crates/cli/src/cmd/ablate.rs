use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use cua_core::adapter::AblationKind;
use cua_core::distill::checkpoint::{load_checkpoint, save_checkpoint};
use cua_core::distill::perplexity;
use cua_core::distill::pipeline::{ablation_study, prepare_with, train_teacher, PipelineConfig};
use cua_core::rng::derive_seed;

use super::load_teacher;
use crate::report::{load_corpus, CliResult, Common, RunDir};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSettings {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    /// Trained student to report alongside the ablations.
    pub checkpoint: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub kinds: Vec<AblationKind>,
    /// Replicates per stochastic ablation.
    pub replicates: u64,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            teacher: None,
            checkpoint: None,
            pipeline: PipelineConfig::default(),
            kinds: AblationKind::ALL.to_vec(),
            replicates: 3,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct Row {
    operator: String,
    replicate: Option<u64>,
    ppl: f64,
}

pub fn run(common: &Common, args: &AblateArgs) -> CliResult<()> {
    let mut s: AblateSettings = common.load()?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    s.teacher = args.teacher.clone().or(s.teacher);
    s.checkpoint = args.checkpoint.clone().or(s.checkpoint);
    s.replicates = args.replicates.unwrap_or(s.replicates);
    s.pipeline.seed = s.seed;
    let run = RunDir::create(common, &s, s.seed)?;
    let corpus = load_corpus(s.corpus.as_deref(), s.pipeline.corpus_bytes)?;
    let teacher = match &s.teacher {
        Some(p) => load_teacher(p)?,
        None => {
            let t = train_teacher(&s.pipeline, &corpus)?;
            save_checkpoint(&t, &run.join("teacher"))?;
            t
        }
    };
    let prep = prepare_with(&s.pipeline, corpus, teacher)?;
    let data = &prep.corpus.heldout;
    let eval = s.pipeline.eval_windows;

    let mut rows = vec![Row { operator: "none".into(), replicate: None, ppl: perplexity(&prep.compressed, data, eval)? }];
    if let Some(p) = &s.checkpoint {
        let student = load_checkpoint(p)?;
        rows.push(Row { operator: "trained".into(), replicate: None, ppl: perplexity(&student, data, eval)? });
    }
    let seeds: Vec<u64> = (0..s.replicates).map(|r| derive_seed(s.seed, &[30, r])).collect();
    let study = ablation_study(&prep.compressed, &prep.sites, &s.kinds, &seeds, data, eval)?;
    for r in study {
        let replicate = seeds.iter().position(|&x| x == r.seed).map(|i| i as u64);
        rows.push(Row { operator: r.kind.name().into(), replicate, ppl: r.ppl });
    }

    let mut csv = String::from("operator,replicate,ppl\n");
    for r in &rows {
        let rep = r.replicate.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{rep},{}", r.operator, r.ppl);
    }
    let path = run.write_report("ablation", &csv, &rows)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}
