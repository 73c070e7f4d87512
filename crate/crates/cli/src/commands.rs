use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::anyhow;
use serde::Serialize;

use xai_class::corpus::{load_corpus, read_pseudo_examples, Corpus, LabelSet, Split};
use xai_class::eval::{evaluate, AttributionMethod, EvalOptions, Evaluation, MetricsReport};
use xai_class::model::load_checkpoint;
use xai_class::oracles::{
    ClassOracle, GenerativeClassOracle, GenerativeSaliencyOracle, HttpGenerator, LexiconClassOracle, LexiconOracleSpec,
    LexiconSaliencyOracle, SaliencyOracle,
};
use xai_class::rounds::{generate_pseudo_labels, GenerationOptions, GenerationStats, Oracles, Progress};
use xai_class::train::{train, TrainOptions, TrainOutput, MODEL_DIR};

use crate::config::{Backend, RunConfig};
use crate::exit::{CliResult, Failure};

pub const METRICS_FILE: &str = "metrics.json";
pub const ATTRIBUTIONS_FILE: &str = "attributions.jsonl";
pub const ABLATION_DIR: &str = "ablation";
pub const ABLATION_CSV: &str = "ablation.csv";

fn labels(cfg: &RunConfig) -> CliResult<LabelSet> {
    cfg.label_set().map_err(Failure::config)
}

fn corpus(path: &Path, labels: &LabelSet, split: Split) -> CliResult<Corpus> {
    let corpus =
        load_corpus(path, labels, split).map_err(|e| Failure::from(e).context(format!("{}", path.display())))?;
    if corpus.is_empty() {
        return Err(Failure::empty(anyhow!("{} has no documents", path.display())));
    }
    Ok(corpus)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(e).context(format!("cannot create {}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    finished_unix_secs: u64,
}

/// Timestamps live only here so the other outputs stay byte-reproducible.
pub fn write_run_metadata(cfg: &RunConfig, command: &str) -> CliResult<()> {
    create_dir(&cfg.paths.out_dir)?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &cfg.paths
            .out_dir
            .join(format!("run_{}.json", command.replace('-', "_"))),
        &RunMetadata {
            command,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
            finished_unix_secs: now,
        },
    )
}

type OraclePair = (Box<dyn ClassOracle>, Box<dyn SaliencyOracle>);

fn build_oracles(cfg: &RunConfig, labels: &LabelSet) -> CliResult<OraclePair> {
    match cfg.oracle.backend {
        Backend::Lexicon => {
            let spec = LexiconOracleSpec::new(labels, cfg.oracle.lexicon.clone())?;
            Ok((
                Box::new(LexiconClassOracle::new(spec.clone())),
                Box::new(LexiconSaliencyOracle::new(spec)),
            ))
        }
        Backend::Remote => {
            let templates = cfg.oracle.prompts.templates().map_err(Failure::config)?;
            let remote = &cfg.oracle.remote;
            let class = HttpGenerator::new(remote.class_endpoint().map_err(Failure::config)?)?;
            let saliency = HttpGenerator::new(remote.saliency_endpoint().map_err(Failure::config)?)?;
            Ok((
                Box::new(GenerativeClassOracle::new(class, templates.clone())),
                Box::new(GenerativeSaliencyOracle::new(saliency, templates)),
            ))
        }
    }
}

pub fn pseudo_gen(cfg: &RunConfig) -> CliResult<GenerationStats> {
    let labels = labels(cfg)?;
    let train_corpus = corpus(&cfg.paths.train, &labels, Split::Train)?;
    let (class, saliency) = build_oracles(cfg, &labels)?;
    let output = cfg.pseudo_path();
    if let Some(parent) = output.parent() {
        create_dir(parent)?;
    }
    create_dir(&cfg.paths.out_dir)?;
    let options = GenerationOptions {
        output: Some(output.clone()),
        workers: cfg.oracle.workers,
    };
    let mut last_logged = 0;
    let mut progress = |p: Progress| {
        if p.done == p.total || p.done >= last_logged + 50 {
            last_logged = p.done;
            log::info!("pseudo-labelled {}/{} documents ({} failed)", p.done, p.total, p.failed);
        }
    };
    let report = generate_pseudo_labels(
        &train_corpus,
        Oracles {
            class: class.as_ref(),
            saliency: saliency.as_ref(),
        },
        &cfg.rounds,
        &options,
        &mut progress,
    )?;
    for failure in &report.failures {
        log::warn!("skipped {}: {}", failure.doc_id, failure.error);
    }
    let stats = report.stats();
    write_json(&cfg.stats_path(), &stats)?;
    log::info!("wrote {}", output.display());
    Ok(stats)
}

pub fn train_model(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let labels = labels(cfg)?;
    let train_corpus = corpus(&cfg.paths.train, &labels, Split::Train)?;
    let pseudo_path = cfg.pseudo_path();
    if !pseudo_path.is_file() {
        return Err(Failure::config(anyhow!(
            "pseudo-label file {} not found; run pseudo-gen first",
            pseudo_path.display()
        )));
    }
    let pseudo = read_pseudo_examples(&pseudo_path, &labels)?;
    let dev = cfg
        .paths
        .dev
        .as_deref()
        .map(|p| corpus(p, &labels, Split::Dev))
        .transpose()?;
    let out_dir = cfg.checkpoint_dir();
    create_dir(&out_dir)?;
    let output = train(
        &pseudo,
        &train_corpus,
        &cfg.model_config(),
        &cfg.train,
        TrainOptions {
            out_dir: Some(&out_dir),
            dev: dev.as_ref(),
        },
    )?;
    Ok(output)
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join(MODEL_DIR)
}

fn evaluate_on(checkpoint: &Path, corpus: &Corpus, explainers: Vec<AttributionMethod>) -> CliResult<Evaluation> {
    let (model, manifest) = load_checkpoint(checkpoint)
        .map_err(|e| Failure::from(e).context(format!("checkpoint {}", checkpoint.display())))?;
    Ok(evaluate(&model, &manifest, corpus, &EvalOptions { explainers })?)
}

pub fn post_hoc_explainers() -> Vec<AttributionMethod> {
    AttributionMethod::ALL
        .into_iter()
        .filter(|m| *m != AttributionMethod::ModelSaliencyHead)
        .collect()
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, explain: bool) -> CliResult<MetricsReport> {
    let labels = labels(cfg)?;
    let test_path = cfg
        .paths
        .test
        .as_deref()
        .ok_or_else(|| Failure::config(anyhow!("paths.test is required for eval")))?;
    let test = corpus(test_path, &labels, Split::Test)?;
    let explainers = if explain { post_hoc_explainers() } else { Vec::new() };
    let evaluation = evaluate_on(checkpoint, &test, explainers)?;
    let dir = cfg.report_dir();
    create_dir(&dir)?;
    write_json(&dir.join(METRICS_FILE), &evaluation.report)?;
    if explain {
        let mut out = BufWriter::new(fs::File::create(dir.join(ATTRIBUTIONS_FILE))?);
        for attribution in &evaluation.attributions {
            serde_json::to_writer(&mut out, attribution)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(evaluation.report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub rounds: usize,
    pub dev: Option<(f64, f64)>,
    pub test: Option<(f64, f64)>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("rounds,dev_micro_f1,dev_macro_f1,test_micro_f1,test_macro_f1\n");
    let cell = |v: Option<(f64, f64)>| match v {
        Some((micro, macro_)) => format!("{micro:.6},{macro_:.6}"),
        None => ",".to_string(),
    };
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.rounds, cell(row.dev), cell(row.test)));
    }
    out
}

/// Full pipeline once per round budget, each in its own sub-directory.
pub fn ablate_rounds(cfg: &RunConfig, budgets: &[usize]) -> CliResult<String> {
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.is_empty() {
        return Err(Failure::config(anyhow!("no round budgets given")));
    }
    let labels = labels(cfg)?;
    let load = |path: &Option<PathBuf>, split| path.as_deref().map(|p| corpus(p, &labels, split)).transpose();
    let dev = load(&cfg.paths.dev, Split::Dev)?;
    let test = load(&cfg.paths.test, Split::Test)?;
    let mut rows = Vec::with_capacity(budgets.len());
    for rounds in budgets {
        let mut sub = cfg.clone();
        sub.rounds.max_rounds = rounds;
        sub.rounds.validate().map_err(Failure::from)?;
        sub.paths.out_dir = cfg.paths.out_dir.join(ABLATION_DIR).join(format!("rounds-{rounds}"));
        sub.paths.pseudo = None;
        sub.paths.checkpoint_dir = None;
        sub.paths.report_dir = None;
        log::info!("ablation: max_rounds = {rounds}");
        pseudo_gen(&sub)?;
        let trained = train_model(&sub)?;
        let checkpoint = trained.checkpoint.expect("training writes a checkpoint");
        let score = |corpus: &Option<Corpus>| -> CliResult<Option<(f64, f64)>> {
            match corpus {
                Some(c) => {
                    let report = evaluate_on(&checkpoint, c, Vec::new())?.report;
                    Ok(Some((report.micro_f1, report.macro_f1)))
                }
                None => Ok(None),
            }
        };
        rows.push(AblationRow {
            rounds,
            dev: score(&dev)?,
            test: score(&test)?,
        });
    }
    let csv = ablation_csv(&rows);
    create_dir(&cfg.paths.out_dir)?;
    fs::write(cfg.paths.out_dir.join(ABLATION_CSV), &csv)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = [
            AblationRow {
                rounds: 0,
                dev: Some((0.5, 0.25)),
                test: None,
            },
            AblationRow {
                rounds: 2,
                dev: None,
                test: Some((1.0, 1.0)),
            },
        ];
        assert_eq!(
            ablation_csv(&rows),
            "rounds,dev_micro_f1,dev_macro_f1,test_micro_f1,test_macro_f1\n\
             0,0.500000,0.250000,,\n\
             2,,,1.000000,1.000000\n"
        );
    }

    #[test]
    fn explain_adds_every_post_hoc_method() {
        let methods = post_hoc_explainers();
        assert_eq!(methods.len(), 3);
        assert!(!methods.contains(&AttributionMethod::ModelSaliencyHead));
    }
}
