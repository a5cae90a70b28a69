//! Dev-set tuning of the biasing weight and threshold, λ sweeps, bias-list
//! size grids and the ablation table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::biasing::EntityScorer;
use crate::corpus::{Corpus, CorpusConfig, Split};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalCondition, Evaluation};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelConfig};
use crate::training::{load_model, train, Objective, TrainingConfig};

/// Settings shared by every evaluation of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub list_seed: u64,
    pub max_len: usize,
    /// Only the first `limit` utterances of a split are decoded.
    pub limit: Option<usize>,
    pub jobs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            list_seed: 5,
            max_len: 64,
            limit: None,
            jobs: 1,
        }
    }
}

impl EvalSettings {
    pub fn condition(&self, list_size: usize, lambda: f64, gamma: f64, scorer: &EntityScorer) -> EvalCondition {
        EvalCondition {
            list_size,
            list_seed: self.list_seed,
            decode: DecodeConfig {
                lambda,
                gamma,
                max_len: self.max_len,
                scorer: scorer.clone(),
            },
        }
    }
}

/// One evaluated (N, λ, γ) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub list_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub report: EvalReport,
}

pub fn evaluate_point(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    settings: &EvalSettings,
    scorer: &EntityScorer,
    list_size: usize,
    lambda: f64,
    gamma: f64,
) -> Result<(GridPoint, Evaluation)> {
    let cond = settings.condition(list_size, lambda, gamma, scorer);
    let eval = evaluate(model, corpus, split, &cond, settings.limit, settings.jobs)?;
    let point = GridPoint {
        list_size,
        lambda,
        gamma,
        report: eval.report.clone(),
    };
    Ok((point, eval))
}

/// Every combination of `sizes` and `(λ, γ)` pairs, sizes outermost.
pub fn evaluate_grid(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    settings: &EvalSettings,
    scorer: &EntityScorer,
    sizes: &[usize],
    pairs: &[(f64, f64)],
) -> Result<Vec<GridPoint>> {
    let mut out = Vec::with_capacity(sizes.len() * pairs.len());
    for &n in sizes {
        for &(lambda, gamma) in pairs {
            out.push(evaluate_point(model, corpus, split, settings, scorer, n, lambda, gamma)?.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneGrid {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub list_size: usize,
    /// Largest relative U-WER increase over the unbiased decode that a
    /// tuned setting may cost.
    pub max_u_wer_increase: f64,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            gammas: (0..10).map(|i| i as f64 / 10.0).collect(),
            list_size: 100,
            max_u_wer_increase: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub lambda: f64,
    pub gamma: f64,
    pub unbiased: EvalReport,
    pub points: Vec<GridPoint>,
}

/// Picks the lowest B-WER among the points whose U-WER stays within the
/// allowed increase over `unbiased`; ties go to the lower WER, then to the
/// earlier grid point. Falls back to the lowest WER when nothing qualifies.
pub fn select_setting(points: &[GridPoint], unbiased: &EvalReport, max_u_wer_increase: f64) -> Option<usize> {
    let limit = unbiased.u_wer().map(|u| u * (1.0 + max_u_wer_increase) + 1e-9);
    let key = |p: &GridPoint| {
        (
            p.report.b_wer().unwrap_or(f64::INFINITY),
            p.report.wer().unwrap_or(f64::INFINITY),
        )
    };
    let admissible: Vec<usize> = (0..points.len())
        .filter(|&i| match (limit, points[i].report.u_wer()) {
            (Some(l), Some(u)) => u <= l,
            _ => true,
        })
        .collect();
    if admissible.is_empty() {
        return (0..points.len()).min_by(|&a, &b| {
            let (wa, wb) = (key(&points[a]).1, key(&points[b]).1);
            wa.total_cmp(&wb).then(a.cmp(&b))
        });
    }
    admissible.into_iter().min_by(|&a, &b| {
        let (ka, kb) = (key(&points[a]), key(&points[b]));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
    })
}

/// Grid search of (λ, γ) on `split`, normally dev.
pub fn tune(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    settings: &EvalSettings,
    scorer: &EntityScorer,
    grid: &TuneGrid,
) -> Result<Tuned> {
    if grid.lambdas.is_empty() || grid.gammas.is_empty() {
        return Err(Error::Config("tuning grid needs at least one lambda and one gamma".into()));
    }
    let unbiased = evaluate_point(model, corpus, split, settings, scorer, 0, 1.0, 0.0)?.0.report;
    let pairs: Vec<(f64, f64)> = grid
        .lambdas
        .iter()
        .flat_map(|&l| grid.gammas.iter().map(move |&g| (l, g)))
        .collect();
    let points = evaluate_grid(model, corpus, split, settings, scorer, &[grid.list_size], &pairs)?;
    let best = select_setting(&points, &unbiased, grid.max_u_wer_increase).expect("non-empty grid");
    log::info!(
        "tuned lambda {} gamma {}: {}",
        points[best].lambda,
        points[best].gamma,
        points[best].report.cell()
    );
    Ok(Tuned {
        lambda: points[best].lambda,
        gamma: points[best].gamma,
        unbiased,
        points,
    })
}

pub const SWEEP_HEADER: &str = "lambda,wer,b_wer,u_wer";

fn rate(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// CSV of a λ sweep.
pub fn format_sweep_csv(points: &[GridPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let s = p.report.summary();
        let _ = writeln!(out, "{},{},{},{}", p.lambda, rate(s.wer), rate(s.b_wer), rate(s.u_wer));
    }
    out
}

/// Human-readable table of grid points.
pub fn format_grid_table(points: &[GridPoint]) -> String {
    let mut out = format!("{:>5}  {:>6}  {:>5}  {}\n", "N", "lambda", "gamma", "WER (B-WER/U-WER)");
    for p in points {
        let _ = writeln!(out, "{:>5}  {:>6}  {:>5}  {}", p.list_size, p.lambda, p.gamma, p.report.cell());
    }
    out
}

/// Ablation rows, mirroring the usual component study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    /// One head trained on the plain likelihood, decoded without biasing.
    A0,
    /// All heads trained on the multi-token loss only, no biasing.
    A1,
    /// All heads, joint loss, learned entity scorer.
    B0,
    /// The A1 model biased with the fixed weighted sum of entity logits.
    B1,
    /// One head, joint loss, learned scorer.
    B2,
    /// Two heads, joint loss, learned scorer.
    B3,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [Self::A0, Self::A1, Self::B0, Self::B1, Self::B2, Self::B3];

    pub fn id(self) -> &'static str {
        match self {
            Self::A0 => "A0",
            Self::A1 => "A1",
            Self::B0 => "B0",
            Self::B1 => "B1",
            Self::B2 => "B2",
            Self::B3 => "B3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation row {s:?}")))
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::A0 => "AED",
            Self::A1 => "MTP (FFN heads)",
            Self::B0 => "MTP + learned scorer",
            Self::B1 => "MTP + heuristic scorer",
            Self::B2 => "1 head + learned scorer",
            Self::B3 => "2 heads + learned scorer",
        }
    }

    pub fn biased(self) -> bool {
        !matches!(self, Self::A0 | Self::A1)
    }
}

/// Everything that determines an ablation row's checkpoint and scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub row: AblationRow,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub scorer: EntityScorer,
}

/// Derives a row's configuration from the full-model configuration.
/// `heuristic_weights` are used by B1 (uniform when `None`).
pub fn ablation_setup(
    row: AblationRow,
    model: &ModelConfig,
    training: &TrainingConfig,
    heuristic_weights: Option<&[f32]>,
) -> Result<AblationSetup> {
    let with_heads = |k: usize| -> Result<(ModelConfig, TrainingConfig)> {
        if k > training.alpha.len() {
            return Err(Error::Config(format!(
                "ablation row needs {k} heads but training.alpha has {}",
                training.alpha.len()
            )));
        }
        Ok((
            ModelConfig {
                mtp_heads: k,
                ..model.clone()
            },
            TrainingConfig {
                alpha: training.alpha[..k].to_vec(),
                ..training.clone()
            },
        ))
    };
    let (m, mut t) = match row {
        AblationRow::A0 | AblationRow::B2 => with_heads(1)?,
        AblationRow::B3 => with_heads(2)?,
        _ => (model.clone(), training.clone()),
    };
    match row {
        AblationRow::A0 => t.objective = Objective::Baseline,
        AblationRow::A1 | AblationRow::B1 => {
            t.objective = Objective::Joint;
            t.entity_loss = false;
        }
        _ => {
            t.objective = Objective::Joint;
            t.entity_loss = true;
        }
    }
    let scorer = match (row, heuristic_weights) {
        (AblationRow::B1, Some(w)) => {
            if w.len() != m.mtp_heads {
                return Err(Error::Config(format!(
                    "heuristic weights have {} entries but the model has {} heads",
                    w.len(),
                    m.mtp_heads
                )));
            }
            EntityScorer::Heuristic { weights: w.to_vec() }
        }
        (AblationRow::B1, None) => EntityScorer::uniform_heuristic(m.mtp_heads),
        _ => EntityScorer::Learned,
    };
    Ok(AblationSetup {
        row,
        model: m,
        training: t,
        scorer,
    })
}

/// Hex SHA-256 of the canonical JSON of `value`, truncated to 16 digits.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json))[..16].to_string())
}

#[derive(Serialize)]
struct TrainingKey<'a> {
    corpus: &'a CorpusConfig,
    model: &'a ModelConfig,
    training: &'a TrainingConfig,
}

/// Hash of what a checkpoint depends on.
pub fn training_hash(corpus: &CorpusConfig, model: &ModelConfig, training: &TrainingConfig) -> Result<String> {
    config_hash(&TrainingKey {
        corpus,
        model,
        training,
    })
}

const TRAINED_MARKER: &str = "trained.json";

/// Trains into `dir`, or loads the best checkpoint of an earlier completed
/// run with the same configuration hash.
pub fn train_or_load(
    corpus: &Corpus,
    model: &ModelConfig,
    training: &TrainingConfig,
    dir: Option<&Path>,
) -> Result<Model> {
    let hash = training_hash(&corpus.config, model, training)?;
    if let Some(dir) = dir {
        let marker = dir.join(TRAINED_MARKER);
        if marker.exists() && fs::read_to_string(&marker)?.trim() == serde_json::to_string(&hash)? {
            log::info!("reusing checkpoint {}", dir.display());
            return load_model(model, &dir.join("best"));
        }
    }
    let out = train(corpus, model, training, dir, false)?;
    if let Some(dir) = dir {
        fs::write(dir.join(TRAINED_MARKER), serde_json::to_string(&hash)? + "\n")?;
    }
    Ok(out.best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub description: String,
    pub heads: usize,
    pub config_hash: String,
    /// Tuned (λ, γ) for biased rows.
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub list_size: usize,
    /// Test report with biasing (biased rows only).
    pub biased: Option<EvalReport>,
    /// Test report of the same checkpoint without a bias list.
    pub unbiased: EvalReport,
}

impl AblationResult {
    /// The report the row is ranked by.
    pub fn headline(&self) -> &EvalReport {
        self.biased.as_ref().unwrap_or(&self.unbiased)
    }
}

#[derive(Serialize)]
struct RowKey<'a> {
    setup: &'a AblationSetup,
    corpus: &'a CorpusConfig,
    settings: &'a EvalSettings,
    grid: &'a TuneGrid,
}

/// Trains (or reuses) the checkpoint of each requested row, tunes (λ, γ) on
/// dev for biased rows and scores test with and without the bias list.
/// Rows sharing a training configuration share one checkpoint.
pub fn run_ablation(
    corpus: &Corpus,
    model: &ModelConfig,
    training: &TrainingConfig,
    heuristic_weights: Option<&[f32]>,
    settings: &EvalSettings,
    grid: &TuneGrid,
    rows: &[AblationRow],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let mut trained: Vec<(String, Model)> = Vec::new();
    let mut results = Vec::with_capacity(rows.len());
    for &row in rows {
        let setup = ablation_setup(row, model, training, heuristic_weights)?;
        let train_hash = training_hash(&corpus.config, &setup.model, &setup.training)?;
        let checkpoint = match trained.iter().find(|(h, _)| *h == train_hash) {
            Some((_, m)) => m.clone(),
            None => {
                log::info!("training ablation row {}", row.id());
                let dir = out_dir.map(|d| d.join(format!("model-{train_hash}")));
                let m = train_or_load(corpus, &setup.model, &setup.training, dir.as_deref())?;
                trained.push((train_hash, m.clone()));
                m
            }
        };
        let unbiased = evaluate_point(&checkpoint, corpus, Split::Test, settings, &setup.scorer, 0, 1.0, 0.0)?
            .0
            .report;
        let (lambda, gamma, biased) = if row.biased() {
            let tuned = tune(&checkpoint, corpus, Split::Dev, settings, &setup.scorer, grid)?;
            let (p, _) = evaluate_point(
                &checkpoint,
                corpus,
                Split::Test,
                settings,
                &setup.scorer,
                grid.list_size,
                tuned.lambda,
                tuned.gamma,
            )?;
            (Some(tuned.lambda), Some(tuned.gamma), Some(p.report))
        } else {
            (None, None, None)
        };
        let hash = config_hash(&RowKey {
            setup: &setup,
            corpus: &corpus.config,
            settings,
            grid,
        })?;
        results.push(AblationResult {
            row,
            description: row.description().to_string(),
            heads: setup.model.mtp_heads,
            config_hash: hash,
            lambda,
            gamma,
            list_size: if row.biased() { grid.list_size } else { 0 },
            biased,
            unbiased,
        });
    }
    Ok(results)
}

pub fn format_ablation_table(results: &[AblationResult]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    let mut out = format!(
        "{:<3}  {:<26}  {:>5}  {:>6}  {:>5}  {:<22}  {:<22}  {}\n",
        "ID", "model", "heads", "lambda", "gamma", "biased WER (B/U)", "no bias WER (B/U)", "config"
    );
    for r in results {
        let _ = writeln!(
            out,
            "{:<3}  {:<26}  {:>5}  {:>6}  {:>5}  {:<22}  {:<22}  {}",
            r.row.id(),
            r.description,
            r.heads,
            opt(r.lambda),
            opt(r.gamma),
            r.biased.as_ref().map(|b| b.cell()).unwrap_or_else(|| "-".into()),
            r.unbiased.cell(),
            r.config_hash
        );
    }
    out
}
