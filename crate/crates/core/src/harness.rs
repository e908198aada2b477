//! End-to-end operations behind the command-line tool: dataset files,
//! training runs, retrieval and energy reports, and paired ablations.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate, DataConfig, Dataset, Split};
use crate::energy::{energy_report, EnergyConstants, EnergyReport};
use crate::error::{Error, Result};
use crate::model::{BlockKind, Model};
use crate::retrieval::{evaluate, CodeIndex, RelevanceSpec, RetrievalReport};
use crate::swm::SwmVariant;
use crate::train::{encode_dataset, EpochLog, RunConfig, Trainer};

const EVAL_BATCH: usize = 16;

/// Writes the train, db and query splits into `out`.
pub fn gen_data(config: &DataConfig, out: &Path) -> Result<()> {
    for split in Split::ALL {
        generate(config, split)?.save(out, split.name())?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    Dataset::load(dir, split.name())
}

pub fn train(run: &RunConfig, out: Option<&Path>, on_epoch: impl FnMut(&EpochLog)) -> Result<Trainer> {
    let data = generate(&run.data, Split::Train)?;
    let mut trainer = Trainer::new(run.clone())?;
    trainer.fit(&data, out, on_epoch)?;
    Ok(trainer)
}

/// Codes of the database and query sets plus the metric report. Relevance
/// comes from the task's similar-class table.
pub fn retrieve(model: &Model, db: &Dataset, query: &Dataset, bits: Option<usize>, top_n: usize) -> Result<(CodeIndex, RetrievalReport)> {
    if let Some(b) = bits {
        if b != model.config.hash_bits {
            return Err(Error::Config(format!("requested {b}-bit codes from a {}-bit model", model.config.hash_bits)));
        }
    }
    if db.task != query.task {
        return Err(Error::Config(format!("database task {:?} differs from query task {:?}", db.task, query.task)));
    }
    let (db_codes, _) = encode_dataset(model, db, EVAL_BATCH)?;
    let (q_codes, _) = encode_dataset(model, query, EVAL_BATCH)?;
    let index = CodeIndex::new(db_codes, db.labels.clone())?;
    let spec = RelevanceSpec::new(&db.task.similar_pairs());
    let report = evaluate(&q_codes, &query.labels, &index, &spec, top_n)?;
    Ok((index, report))
}

pub fn energy(model: &Model, samples: &Dataset) -> Result<EnergyReport> {
    energy_report(model, &samples.samples, &EnergyConstants::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// 2D wavelets in every mixer.
    #[serde(rename = "2d-swm")]
    Swm2d,
    /// Self-attention blocks in place of every mixer block.
    AllSsa,
    /// Label-only similarity throughout training.
    HardLoss,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Swm2d => "2d-swm",
            Ablation::AllSsa => "all-ssa",
            Ablation::HardLoss => "hard-loss",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut run = base.clone();
        match self {
            Ablation::Swm2d => run.model.swm_variant = SwmVariant::Spatial,
            Ablation::AllSsa => run.model.stages.iter_mut().for_each(|s| s.block = BlockKind::Ssa),
            Ablation::HardLoss => run.training.soft_similarity = false,
        }
        run
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub query_accuracy: f64,
    pub retrieval: RetrievalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.retrieval.top_n);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>9} {:>9} {:>8} {:>8}",
            "variant",
            "epochs",
            "train acc",
            "query acc",
            format!("mAP@{n}"),
            format!("NDCG@{n}")
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>9.4} {:>9.4} {:>8.4} {:>8.4}",
                r.variant, r.epochs, r.train_accuracy, r.query_accuracy, r.retrieval.map, r.retrieval.ndcg
            );
        }
        s
    }
}

/// Trains the base run and the ablated run on the same data and seed and
/// evaluates both on the same database and queries.
pub fn ablate(base: &RunConfig, ablation: Ablation, top_n: usize, mut on_epoch: impl FnMut(&str, &EpochLog)) -> Result<AblationReport> {
    let db = generate(&base.data, Split::Db)?;
    let query = generate(&base.data, Split::Query)?;
    let mut rows = Vec::with_capacity(2);
    for (variant, run) in [("base", base.clone()), (ablation.name(), ablation.apply(base))] {
        let trainer = train(&run, None, |e| on_epoch(variant, e))?;
        rows.push(evaluate_run(variant, &trainer, &db, &query, top_n)?);
    }
    Ok(AblationReport { ablation, seed: base.seed, rows })
}

pub fn evaluate_run(variant: &str, trainer: &Trainer, db: &Dataset, query: &Dataset, top_n: usize) -> Result<AblationRow> {
    let (_, retrieval) = retrieve(&trainer.model, db, query, None, top_n)?;
    let (_, query_accuracy) = encode_dataset(&trainer.model, query, EVAL_BATCH)?;
    Ok(AblationRow {
        variant: variant.to_string(),
        epochs: trainer.log.len(),
        train_accuracy: trainer.log.last().map_or(0.0, |e| e.accuracy),
        query_accuracy,
        retrieval,
    })
}
