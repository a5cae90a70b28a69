use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use mtpbias_core::biasing::parse_bias_list;
use mtpbias_core::corpus::{generate_corpus, Corpus, Split};
use mtpbias_core::evaluation::{evaluate_with_list, Evaluation};
use mtpbias_core::experiment::{
    config_hash, evaluate_point, format_ablation_table, format_grid_table, format_sweep_csv, run_ablation, tune,
    AblationRow, GridPoint,
};
use mtpbias_core::metrics::EvalReport;
use mtpbias_core::model::Model;
use mtpbias_core::training::{self, load_model};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split {other:?} (train, dev or test)"))),
    }
}

/// Hash of everything except output locations.
pub fn run_hash(cfg: &RunConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a mtpbias_core::model::ModelConfig,
        corpus: &'a mtpbias_core::corpus::CorpusConfig,
        training: &'a mtpbias_core::training::TrainingConfig,
        decode: &'a mtpbias_core::decoding::DecodeConfig,
        eval: &'a crate::config::EvalSection,
    }
    Ok(config_hash(&Key {
        model: &cfg.model,
        corpus: &cfg.corpus,
        training: &cfg.training,
        decode: &cfg.decode,
        eval: &cfg.eval,
    })?)
}

pub fn generate(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.paths.corpus_dir).to_path_buf();
    let corpus = generate_corpus(&cfg.corpus)?;
    corpus.save(&dir)?;
    let resolved = RunConfig {
        paths: crate::config::Paths {
            corpus_dir: dir.clone(),
            ..cfg.paths.clone()
        },
        ..cfg.clone()
    };
    resolved.write_resolved(&dir)?;
    let stats = corpus.inventory.stats();
    println!(
        "corpus written to {}: {} train / {} dev / {} test utterances, {} entities (mean {:.2} tokens, {:.1}% with at most 4)",
        dir.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        stats.entities,
        stats.mean_tokens,
        100.0 * stats.fraction_at_most_4
    );
    Ok(())
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = &cfg.paths.corpus_dir;
    if !dir.join("corpus.json").exists() {
        return Err(CliError::Data(format!(
            "no corpus in {}; run `mtpbias generate` first",
            dir.display()
        )));
    }
    let corpus = Corpus::load(dir)?;
    if corpus.config != cfg.corpus {
        return Err(CliError::Config(format!(
            "the corpus in {} was generated with a different [corpus] section",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn load_checkpoint(cfg: &RunConfig, stem: Option<&Path>) -> Result<Model> {
    let stem = stem
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join("best"));
    Ok(load_model(&cfg.model, &stem)?)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let dir = &cfg.paths.checkpoint_dir;
    cfg.write_resolved(dir)?;
    let out = training::train(&corpus, &cfg.model, &cfg.training, Some(dir), resume)?;
    let last = out.curve.last();
    println!(
        "trained {} steps into {}; best epoch {}; final l_mtp {}",
        last.map_or(0, |p| p.step),
        dir.display(),
        out.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        last.map_or(f32::NAN, |p| p.l_mtp)
    );
    Ok(())
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct DecodeReport<'a> {
    config_hash: String,
    split: &'a str,
    list_size: usize,
    report: &'a EvalReport,
    truncated: usize,
}

pub fn decode(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    bias_list: Option<&Path>,
    list_size: usize,
    split_name: &str,
) -> Result<()> {
    let split = parse_split(split_name)?;
    let corpus = load_corpus(cfg)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let settings = cfg.settings();
    let eval: Evaluation = match bias_list {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read bias list {}: {e}", path.display())))?;
            let list = parse_bias_list(&text, cfg.model.vocab_size)?;
            evaluate_with_list(&model, &corpus, split, &list, &cfg.decode, settings.limit, settings.jobs)?
        }
        None => {
            evaluate_point(
                &model,
                &corpus,
                split,
                &settings,
                &cfg.decode.scorer,
                list_size,
                cfg.decode.lambda,
                cfg.decode.gamma,
            )?
            .1
        }
    };
    let dir = &cfg.paths.reports_dir;
    cfg.write_resolved(dir)?;
    fs::write(dir.join(format!("decode.{split_name}.hyp")), eval.hypotheses_text())?;
    write_report(
        &dir.join(format!("decode.{split_name}.json")),
        &DecodeReport {
            config_hash: run_hash(cfg)?,
            split: split_name,
            list_size: eval.condition.list_size,
            report: &eval.report,
            truncated: eval.truncated(),
        },
    )?;
    println!("{split_name}: WER (B-WER/U-WER) {}", eval.report.cell());
    Ok(())
}

#[derive(Serialize)]
struct GridReport<'a> {
    config_hash: String,
    split: &'a str,
    points: &'a [GridPoint],
}

pub const GRID_HEADER: &str = "list_size,lambda,gamma,wer,b_wer,u_wer";

fn grid_csv(points: &[GridPoint]) -> String {
    let rate = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for p in points {
        let s = p.report.summary();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.list_size,
            p.lambda,
            p.gamma,
            rate(s.wer),
            rate(s.b_wer),
            rate(s.u_wer)
        );
    }
    out
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let settings = cfg.settings();
    let dir = cfg.paths.reports_dir.clone();
    cfg.write_resolved(&dir)?;
    let hyp_dir = dir.join("hyp");
    fs::create_dir_all(&hyp_dir)?;
    let mut points = Vec::new();
    for &n in &cfg.eval.list_sizes {
        for lambda in cfg.lambdas() {
            for gamma in cfg.gammas() {
                let (point, evaluation) =
                    evaluate_point(&model, &corpus, Split::Test, &settings, &cfg.decode.scorer, n, lambda, gamma)?;
                fs::write(
                    hyp_dir.join(format!("N{n}_lambda{lambda}_gamma{gamma}.hyp")),
                    evaluation.hypotheses_text(),
                )?;
                points.push(point);
            }
        }
    }
    write_report(
        &dir.join("eval.json"),
        &GridReport {
            config_hash: run_hash(cfg)?,
            split: "test",
            points: &points,
        },
    )?;
    fs::write(dir.join("eval.csv"), grid_csv(&points))?;
    let table = format_grid_table(&points);
    fs::write(dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Tunes (λ, γ) on dev, then sweeps λ on test at the configured γ.
pub fn sweep(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let settings = cfg.settings();
    let dir = cfg.paths.reports_dir.clone();
    cfg.write_resolved(&dir)?;
    let tuned = tune(&model, &corpus, Split::Dev, &settings, &cfg.decode.scorer, &cfg.eval.tune)?;
    write_report(&dir.join("tune.json"), &tuned)?;
    fs::write(dir.join("tune.txt"), format_grid_table(&tuned.points))?;
    println!("dev-tuned lambda {} gamma {}", tuned.lambda, tuned.gamma);
    let gamma = cfg.decode.gamma;
    let mut points = Vec::new();
    for &lambda in &cfg.eval.sweep_lambdas {
        let (p, _) = evaluate_point(
            &model,
            &corpus,
            Split::Test,
            &settings,
            &cfg.decode.scorer,
            cfg.eval.tune.list_size,
            lambda,
            gamma,
        )?;
        points.push(p);
    }
    write_report(
        &dir.join("sweep.json"),
        &GridReport {
            config_hash: run_hash(cfg)?,
            split: "test",
            points: &points,
        },
    )?;
    let csv = format_sweep_csv(&points);
    fs::write(dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let rows = cfg
        .eval
        .rows
        .iter()
        .map(|r| AblationRow::parse(r))
        .collect::<mtpbias_core::Result<Vec<_>>>()?;
    let dir = cfg.paths.reports_dir.clone();
    cfg.write_resolved(&dir)?;
    let models: PathBuf = dir.join("ablation");
    let results = run_ablation(
        &corpus,
        &cfg.model,
        &cfg.training,
        cfg.eval.heuristic_weights.as_deref(),
        &cfg.settings(),
        &cfg.eval.tune,
        &rows,
        Some(&models),
    )?;
    write_report(&dir.join("ablation.json"), &results)?;
    let table = format_ablation_table(&results);
    fs::write(dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
