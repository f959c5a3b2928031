//! End-to-end experiment drivers built from the harness pieces.

use serde::{Deserialize, Serialize};

use crate::adapter::{make_ablation, AblationKind, AdapterMode, AdapterSite, Projection};
use crate::error::{CuaError, Result};
use crate::rng::derive_seed;

use super::corpus::{eval_windows, Corpus};
use super::model::{all_sites, build_toy_lm, insert_adapters, with_fixed_operator, ToyLm, ToyLmConfig};
use super::sensitivity::{sensitivity_rank, top_sites, SensitivityConfig, SensitivityScore};
use super::train::{compress_svd, perplexity, plant_rotation, pretrain, train_adapters, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ToyLmConfig,
    /// Size of the generated corpus when no corpus file is given.
    pub corpus_bytes: usize,
    pub pretrain: TrainConfig,
    pub rank_fraction: f64,
    pub block_dim: usize,
    pub mode: AdapterMode,
    /// How many top-ranked sites get adapters; 0 means every site.
    pub num_sites: usize,
    pub probe_windows: usize,
    pub train: TrainConfig,
    /// Held-out windows per perplexity evaluation.
    pub eval_windows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyLmConfig::default(),
            corpus_bytes: super::corpus::DEFAULT_CORPUS_BYTES,
            pretrain: TrainConfig {
                alpha_kd: 0.0,
                beta: 1.0,
                learning_rate: 3e-3,
                warmup_steps: 50,
                max_steps: Some(800),
                batch_size: 16,
                monotone_window: 0,
                ..TrainConfig::default()
            },
            rank_fraction: 0.5,
            block_dim: 4,
            mode: AdapterMode::SignConstrained,
            num_sites: 7,
            probe_windows: 16,
            train: TrainConfig { learning_rate: 1e-2, warmup_steps: 20, max_steps: Some(300), ..TrainConfig::default() },
            eval_windows: 300,
        }
    }
}

/// Teacher, compressed student, and site ranking.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub teacher: ToyLm,
    pub compressed: ToyLm,
    pub ranking: Vec<SensitivityScore>,
    pub sites: Vec<AdapterSite>,
}

/// Pretrain a teacher with the pipeline's seed and pretraining settings.
pub fn train_teacher(cfg: &PipelineConfig, corpus: &Corpus) -> Result<ToyLm> {
    let mut teacher = build_toy_lm(cfg.model, cfg.seed)?;
    let pc = TrainConfig { seed: derive_seed(cfg.seed, &[1]), ..cfg.pretrain.clone() };
    pretrain(&mut teacher, &corpus.train, &pc)?;
    Ok(teacher)
}

/// Compress the teacher, rank its sites, and pick the adapter sites.
pub fn prepare_with(cfg: &PipelineConfig, corpus: Corpus, teacher: ToyLm) -> Result<Prepared> {
    let compressed = compress_svd(&teacher, cfg.rank_fraction)?;
    let probe = eval_windows(&corpus.train, cfg.model.context_length + 1, cfg.probe_windows.max(1));
    let scfg = SensitivityConfig { block_dim: cfg.block_dim, mode: cfg.mode, ..SensitivityConfig::default() };
    let ranking = sensitivity_rank(&compressed, &probe, &scfg)?;
    let sites = if cfg.num_sites == 0 {
        all_sites(cfg.model.num_layers, cfg.mode)
    } else {
        let mut s = top_sites(&ranking, cfg.num_sites, &Projection::ALL);
        s.sort_by_key(|x| x.index());
        s
    };
    Ok(Prepared { corpus, teacher, compressed, ranking, sites })
}

pub fn prepare(cfg: &PipelineConfig, corpus: Corpus) -> Result<Prepared> {
    let teacher = train_teacher(cfg, &corpus)?;
    prepare_with(cfg, corpus, teacher)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub seed: u64,
    pub sites: Vec<String>,
    pub adapter_params: usize,
    pub steps: usize,
    pub teacher_ppl: f64,
    pub compressed_ppl: f64,
    pub identity_ppl: f64,
    pub adapted_ppl: f64,
}

/// Insert identity adapters at the prepared sites and distil them.
pub fn distill(cfg: &PipelineConfig, prep: &Prepared) -> Result<(DistillSummary, ToyLm, TrainReport)> {
    let heldout = &prep.corpus.heldout;
    let mut student = insert_adapters(&prep.compressed, &prep.sites, cfg.block_dim)?;
    let identity_ppl = perplexity(&student, heldout, cfg.eval_windows)?;
    let tc = TrainConfig { seed: derive_seed(cfg.seed, &[2]), ..cfg.train.clone() };
    let report = if tc.max_steps == Some(0) {
        TrainReport::default()
    } else {
        train_adapters(&mut student, &prep.teacher, &prep.corpus.train, &tc)?
    };
    let summary = DistillSummary {
        seed: cfg.seed,
        sites: prep.sites.iter().map(|s| s.label()).collect(),
        adapter_params: student.num_adapter_params(),
        steps: report.history.len(),
        teacher_ppl: perplexity(&prep.teacher, heldout, cfg.eval_windows)?,
        compressed_ppl: perplexity(&prep.compressed, heldout, cfg.eval_windows)?,
        identity_ppl,
        adapted_ppl: perplexity(&student, heldout, cfg.eval_windows)?,
    };
    Ok((summary, student, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationKind,
    pub seed: u64,
    pub ppl: f64,
}

/// Perplexity of the compressed model with a fixed ablation operator in
/// sign-constrained mode at every given site.
pub fn ablation_study(
    compressed: &ToyLm,
    sites: &[AdapterSite],
    kinds: &[AblationKind],
    seeds: &[u64],
    data: &[u8],
    eval_windows: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &seed in seeds {
            let mut m = compressed.clone();
            for s in sites {
                let d = m.projector(s.layer, s.projection).weight().ncols();
                let op = make_ablation(kind, d, derive_seed(seed, &[s.index() as u64]))?;
                m = with_fixed_operator(&m, s.layer, s.projection, op)?;
            }
            rows.push(AblationRow { kind, seed, ppl: perplexity(&m, data, eval_windows)? });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ablation,seed,ppl\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.kind.name(), r.seed, r.ppl));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub scale: f64,
    pub block_dim: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            scale: 0.5,
            block_dim: 4,
            seed: 3,
            train: TrainConfig { learning_rate: 5e-2, warmup_steps: 20, max_steps: Some(1200), ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSummary {
    pub teacher_ppl: f64,
    pub rotated_ppl: f64,
    pub recovered_ppl: f64,
    /// `recovered / teacher`.
    pub recovery_ratio: f64,
}

/// Rotate every projection of the teacher by a random block rotation and
/// train orthogonal Cayley adapters to undo it.
pub fn planted_rotation(teacher: &ToyLm, corpus: &Corpus, cfg: &PlantedConfig, eval: usize) -> Result<(PlantedSummary, ToyLm, TrainReport)> {
    let sites = all_sites(teacher.cfg.num_layers, AdapterMode::Orthogonal);
    let pairs: Vec<(usize, Projection)> = sites.iter().map(|s| (s.layer, s.projection)).collect();
    let (rotated, _) = plant_rotation(teacher, &pairs, cfg.block_dim, cfg.scale, cfg.seed)?;
    let mut student = insert_adapters(&rotated, &sites, cfg.block_dim)?;
    let teacher_ppl = perplexity(teacher, &corpus.heldout, eval)?;
    let rotated_ppl = perplexity(&student, &corpus.heldout, eval)?;
    let report = train_adapters(&mut student, teacher, &corpus.train, &cfg.train)?;
    let recovered_ppl = perplexity(&student, &corpus.heldout, eval)?;
    if !recovered_ppl.is_finite() {
        return Err(CuaError::Diverged { step: 0, reason: "non-finite perplexity after recovery".into() });
    }
    Ok((PlantedSummary { teacher_ppl, rotated_ppl, recovered_ppl, recovery_ratio: recovered_ppl / teacher_ppl }, student, report))
}
