use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use cua_core::distill::checkpoint::save_checkpoint;
use cua_core::distill::pipeline::{
    distill, planted_rotation, prepare_with, train_teacher, DistillSummary, PipelineConfig, PlantedConfig, PlantedSummary,
};
use cua_core::distill::sensitivity::scores_csv;
use cua_core::rng::derive_seed;

use super::load_teacher;
use crate::report::{load_corpus, CliResult, Common, RunDir};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub seed: u64,
    /// Raw byte corpus; the generated corpus is used when absent.
    pub corpus: Option<PathBuf>,
    /// Reuse a saved teacher instead of pretraining one.
    pub teacher: Option<PathBuf>,
    /// Run the planted-rotation recovery scenario instead of distillation.
    pub planted: bool,
    pub pipeline: PipelineConfig,
    pub planted_rotation: PlantedConfig,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Adapter training steps (0 keeps the identity adapters).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub planted: bool,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of top-ranked sites to adapt (0 means all).
    #[arg(long)]
    pub num_sites: Option<usize>,
}

fn summary_csv(s: &DistillSummary) -> String {
    format!(
        "seed,sites,adapter_params,steps,teacher_ppl,compressed_ppl,identity_ppl,adapted_ppl\n{},{},{},{},{},{},{},{}\n",
        s.seed,
        s.sites.join(" "),
        s.adapter_params,
        s.steps,
        s.teacher_ppl,
        s.compressed_ppl,
        s.identity_ppl,
        s.adapted_ppl
    )
}

fn planted_csv(s: &PlantedSummary) -> String {
    format!(
        "teacher_ppl,rotated_ppl,recovered_ppl,recovery_ratio\n{},{},{},{}\n",
        s.teacher_ppl, s.rotated_ppl, s.recovered_ppl, s.recovery_ratio
    )
}

pub fn resolve(common: &Common, args: &TrainArgs) -> CliResult<TrainSettings> {
    let mut s: TrainSettings = common.load()?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(steps) = args.steps {
        s.pipeline.train.max_steps = Some(steps);
        s.planted_rotation.train.max_steps = Some(steps);
    }
    if let Some(n) = args.num_sites {
        s.pipeline.num_sites = n;
    }
    s.planted |= args.planted;
    s.teacher = args.teacher.clone().or(s.teacher);
    s.corpus = args.corpus.clone().or(s.corpus);
    s.pipeline.seed = s.seed;
    s.planted_rotation.seed = derive_seed(s.seed, &[3]);
    s.planted_rotation.train.seed = derive_seed(s.seed, &[4]);
    Ok(s)
}

pub fn run(common: &Common, args: &TrainArgs) -> CliResult<()> {
    let s = resolve(common, args)?;
    let run = RunDir::create(common, &s, s.seed)?;
    let corpus = load_corpus(s.corpus.as_deref(), s.pipeline.corpus_bytes)?;
    let teacher = match &s.teacher {
        Some(p) => {
            let t = load_teacher(p)?;
            if t.cfg != s.pipeline.model {
                return Err("teacher checkpoint does not match the configured model".into());
            }
            t
        }
        None => train_teacher(&s.pipeline, &corpus)?,
    };
    save_checkpoint(&teacher, &run.join("teacher"))?;

    if s.planted {
        let (summary, student, report) = planted_rotation(&teacher, &corpus, &s.planted_rotation, s.pipeline.eval_windows)?;
        save_checkpoint(&student, &run.join("checkpoint"))?;
        run.write_csv("metrics.csv", &report.to_csv())?;
        let path = run.write_report("planted", &planted_csv(&summary), &summary)?;
        println!("recovery ratio {:.4} -> {}", summary.recovery_ratio, path.display());
        return Ok(());
    }

    let prep = prepare_with(&s.pipeline, corpus, teacher)?;
    run.write_csv("sensitivity.csv", &scores_csv(&prep.ranking))?;
    let (summary, student, report) = distill(&s.pipeline, &prep)?;
    save_checkpoint(&student, &run.join("checkpoint"))?;
    run.write_csv("metrics.csv", &report.to_csv())?;
    let path = run.write_report("summary", &summary_csv(&summary), &summary)?;
    println!(
        "teacher {:.4}  compressed {:.4}  adapted {:.4} -> {}",
        summary.teacher_ppl,
        summary.compressed_ppl,
        summary.adapted_ppl,
        path.display()
    );
    Ok(())
}
