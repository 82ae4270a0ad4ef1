//! Pipeline orchestration behind the `dga` binary.

pub mod config;
pub mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::corpus::{BatchStream, Dataset, Splits};
use crate::datrain::{da_train, pretrain, MaskKind, MaskVariant};
use crate::error::{Error, Result};
use crate::evalharness::experiment::{CHECKPOINT_FILE, IMPORTANCE_FILE, METRICS_FILE, RUNS_DIR};
use crate::evalharness::{build_tasks, finetune_classifier, importance_subset, perplexity, run_experiment, SeedStreams};
use crate::gradsuite::{run_grad_checks, GradCheckConfig};
use crate::importance::{estimate_importance, importance_diagnostics, normalize_importance, ImportanceMatrix};
use crate::model::{load_checkpoint, save_checkpoint, EncoderModel};

pub use config::{apply_override, parse_config, AblateConfig, PathsConfig, RunConfig, CONFIG_ECHO_FILE};
pub use report::{emit_report, LOSS_CURVES_CSV, LOSS_CURVES_SVG};

pub const CORPUS_DIR: &str = "corpus";
pub const GENERAL_CHECKPOINT: &str = "general.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const GENERAL_IMPORTANCE: &str = "importance_general.json";
pub const DIAGNOSTICS_JSON: &str = "importance_diagnostics.json";
pub const BUCKETS_CSV: &str = "importance_buckets.csv";
pub const COSINE_CSV: &str = "importance_cosine.csv";
pub const DA_DIR: &str = "da";
pub const FINETUNE_FILE: &str = "finetune.json";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATE_DIR: &str = "ablate";
pub const THREADS_ENV: &str = "DGA_THREADS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    GenCorpus,
    Pretrain,
    Importance,
    DaTrain,
    Finetune { checkpoint: Option<PathBuf> },
    Eval { checkpoint: Option<PathBuf> },
    Ablate,
    GradCheck,
    Report { dir: Option<PathBuf> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenCorpus => "gen-corpus",
            Self::Pretrain => "pretrain",
            Self::Importance => "importance",
            Self::DaTrain => "da-train",
            Self::Finetune { .. } => "finetune",
            Self::Eval { .. } => "eval",
            Self::Ablate => "ablate",
            Self::GradCheck => "grad-check",
            Self::Report { .. } => "report",
        }
    }

    fn writes_run_dir(&self) -> bool {
        !matches!(self, Self::GradCheck | Self::Report { .. })
    }
}

/// Reads the thread cap; the engine is single-threaded, so any positive value is accepted.
pub fn thread_cap(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer (got `{v}`)"))),
        },
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!("{} not found; run `dga {hint}` first", path.display())))
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Splits)> {
    let dir = cfg.paths.run_dir.join(CORPUS_DIR);
    require(&dir, "gen-corpus")?;
    let data = Dataset::load(&dir)?;
    check_vocab(cfg, &data)?;
    let splits = data.split(cfg.eval.heldout_sequences)?;
    Ok((data, splits))
}

fn check_vocab(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "model.vocab_size: vocabulary of {} tokens exceeds {}",
            data.vocab.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

fn load_model(path: &Path, hint: &str) -> Result<EncoderModel> {
    require(path, hint)?;
    Ok(load_checkpoint(path)?)
}

/// Explicit checkpoint, else the domain-trained model, else the general one.
fn resolve_checkpoint(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        require(p, "da-train")?;
        return Ok(p.clone());
    }
    let run = &cfg.paths.run_dir;
    let da = run.join(DA_DIR).join(CHECKPOINT_FILE);
    if da.exists() {
        return Ok(da);
    }
    let general = run.join(GENERAL_CHECKPOINT);
    require(&general, "pretrain")?;
    Ok(general)
}

fn streams(cfg: &RunConfig) -> SeedStreams {
    SeedStreams::new(cfg.seeds[0])
}

fn domain_importance(cfg: &RunConfig, model: &EncoderModel, corpus: &[Vec<usize>], fork: u64) -> Result<ImportanceMatrix> {
    let s = streams(cfg);
    let subset = importance_subset(
        corpus,
        cfg.importance.subset_batches,
        cfg.importance.batch_size,
        cfg.corpus.seq_len_max,
        &s.importance_data().fork(fork),
    )?;
    normalize_importance(&estimate_importance(model, &subset, &s.importance().fork(fork))?)
}

fn gen_corpus(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = Dataset::generate(&cfg.corpus, cfg.corpus_seed)?;
    check_vocab(cfg, &data)?;
    let dir = cfg.paths.run_dir.join(CORPUS_DIR);
    data.save(&dir)?;
    writeln!(
        out,
        "corpus: {} general / {} domain sequences, vocabulary {} -> {}",
        data.general.len(),
        data.domain.len(),
        data.vocab.len(),
        dir.display()
    )?;
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (_, splits) = load_data(cfg)?;
    let s = streams(cfg);
    let mut model = EncoderModel::init(cfg.model.clone(), &s.init())?;
    let mut stream = BatchStream::new(&splits.general_train, cfg.pretrain.batch_size, cfg.corpus.seq_len_max, s.pretrain_data())?;
    let log = pretrain(&mut model, &mut stream, &cfg.pretrain, &s.pretrain())?;
    let run = &cfg.paths.run_dir;
    save_checkpoint(&model, run.join(GENERAL_CHECKPOINT))?;
    fs::write(run.join(PRETRAIN_METRICS), log.to_csv())?;
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        writeln!(out, "pretrain: {} steps, mlm loss {:.4} -> {:.4}", log.steps.len(), first.mlm_loss, last.mlm_loss)?;
    }
    Ok(())
}

fn importance_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (_, splits) = load_data(cfg)?;
    let run = &cfg.paths.run_dir;
    let model = load_model(&run.join(GENERAL_CHECKPOINT), "pretrain")?;
    let domain = domain_importance(cfg, &model, &splits.domain_train, 0)?;
    let general = domain_importance(cfg, &model, &splits.general_train, 1)?;
    fs::write(run.join(IMPORTANCE_FILE), domain.to_json())?;
    fs::write(run.join(GENERAL_IMPORTANCE), general.to_json())?;
    let report = importance_diagnostics(("domain", &domain), &[("general".to_string(), general)])?;
    fs::write(run.join(DIAGNOSTICS_JSON), report.to_json())?;
    fs::write(run.join(BUCKETS_CSV), report.buckets_csv())?;
    fs::write(run.join(COSINE_CSV), report.cosine_csv())?;
    for d in &report.domains {
        writeln!(out, "importance {}: buckets {:?}", d.domain, d.buckets)?;
    }
    writeln!(out, "importance cosine(domain, general) = {:.6}", report.cosine[0][1])?;
    Ok(())
}

fn da_train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let run = &cfg.paths.run_dir;
    let s = streams(cfg);
    let norm = || -> Result<Vec<f32>> {
        let path = run.join(IMPORTANCE_FILE);
        require(&path, "importance")?;
        Ok(ImportanceMatrix::from_json(&fs::read_to_string(&path)?)?.norm()?.to_vec())
    };
    let variant = match cfg.datrain.mask_variant {
        MaskKind::Dga => MaskVariant::Dga(norm()?),
        MaskKind::DomainSpecific => MaskVariant::DomainSpecific(norm()?),
        MaskKind::Random => MaskVariant::Random(s.random_mask_seed(cfg.datrain.random_mask_seed)),
        MaskKind::None => MaskVariant::None,
    };
    let (_, splits) = load_data(cfg)?;
    let mut model = load_model(&run.join(GENERAL_CHECKPOINT), "pretrain")?;
    let mut stream = BatchStream::new(&splits.domain_train, cfg.datrain.batch_size, cfg.corpus.seq_len_max, s.da_data())?;
    let log = da_train(&mut model, &mut stream, &cfg.datrain, &variant, &s.da())?;
    let dir = run.join(DA_DIR);
    fs::create_dir_all(&dir)?;
    save_checkpoint(&model, dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(METRICS_FILE), log.to_csv())?;
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        writeln!(
            out,
            "da-train ({:?}): {} steps, total loss {:.4} -> {:.4}",
            variant.kind(),
            log.steps.len(),
            first.total,
            last.total
        )?;
    }
    Ok(())
}

fn finetune_cmd(cfg: &RunConfig, checkpoint: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let path = resolve_checkpoint(cfg, checkpoint)?;
    let model = load_checkpoint(&path)?;
    let (data, splits) = load_data(cfg)?;
    let (domain, general) = build_tasks(&data.vocab, &data.lexicon, &splits, cfg.model.max_seq_len, &cfg.eval, cfg.corpus_seed)?;
    let s = streams(cfg);
    let mut tasks = serde_json::Map::new();
    for (task, fork) in [(&domain, 0), (&general, 1)] {
        let (_, _, m) = finetune_classifier(&model, task, &cfg.finetune, &s.finetune().fork(fork))?;
        writeln!(out, "finetune {}: accuracy {:.4} macro_f1 {:.4}", task.name, m.accuracy, m.macro_f1)?;
        tasks.insert(task.name.clone(), serde_json::to_value(m)?);
    }
    let report = json!({ "checkpoint": path.display().to_string(), "tasks": tasks });
    fs::write(cfg.paths.run_dir.join(FINETUNE_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let path = resolve_checkpoint(cfg, checkpoint)?;
    let model = load_checkpoint(&path)?;
    let (_, splits) = load_data(cfg)?;
    let ppl = |c: &[Vec<usize>]| perplexity(&model, c, cfg.eval.ppl_seed, cfg.eval.ppl_batch_size);
    let general = ppl(&splits.general_heldout)?;
    let domain = ppl(&splits.domain_heldout)?;
    writeln!(out, "eval: general_ppl {general:.4} domain_ppl {domain:.4}")?;
    let report = json!({ "checkpoint": path.display().to_string(), "general_ppl": general, "domain_ppl": domain });
    fs::write(cfg.paths.run_dir.join(EVAL_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.paths.run_dir.join(ABLATE_DIR);
    let table = run_experiment(&cfg.experiment_plan(dir.clone()))?;
    let echo = cfg.to_toml()?;
    for entry in fs::read_dir(dir.join(RUNS_DIR))? {
        let p = entry?.path();
        if p.is_dir() {
            fs::write(p.join(CONFIG_ECHO_FILE), &echo)?;
        }
    }
    emit_report(&dir)?;
    write!(out, "{}", table.to_csv())?;
    for f in &table.failed {
        writeln!(out, "failed run {} seed {}: {}", f.variant, f.seed, f.error)?;
    }
    Ok(())
}

fn grad_check_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let gc = GradCheckConfig {
        seed: cfg.seeds[0],
        ..GradCheckConfig::default()
    };
    let results = run_grad_checks(&cfg.model, &gc)?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    writeln!(out, "{} checks, {failed} failed", results.len())?;
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} of {} gradient checks failed", results.len())));
    }
    Ok(())
}

/// Runs one subcommand; human-readable progress goes to `out`.
pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    if cmd.writes_run_dir() {
        cfg.echo(&cfg.paths.run_dir)?;
    }
    match cmd {
        Command::GenCorpus => gen_corpus(cfg, out),
        Command::Pretrain => pretrain_cmd(cfg, out),
        Command::Importance => importance_cmd(cfg, out),
        Command::DaTrain => da_train_cmd(cfg, out),
        Command::Finetune { checkpoint } => finetune_cmd(cfg, checkpoint, out),
        Command::Eval { checkpoint } => eval_cmd(cfg, checkpoint, out),
        Command::Ablate => ablate_cmd(cfg, out),
        Command::GradCheck => grad_check_cmd(cfg, out),
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| cfg.paths.run_dir.join(ABLATE_DIR));
            for p in emit_report(&dir)? {
                writeln!(out, "wrote {}", p.display())?;
            }
            Ok(())
        }
    }
}

/// Formats an error as one line for the error stream.
pub fn error_line(e: &Error) -> String {
    format!("error: {}", e.to_string().replace('\n', " "))
}
