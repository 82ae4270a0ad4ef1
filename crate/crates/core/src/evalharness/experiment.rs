//! Multi-seed, multi-variant experiment runner and result aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::finetune::{finetune_classifier, FinetuneConfig};
use super::perplexity::perplexity;
use super::tasks::{marker_task, pair_task, EndTask};
use crate::autodiff::{RngState, Stream};
use crate::corpus::{BatchIter, BatchStream, Dataset, Lexicon, Splits, SyntheticCorpusSpec, Vocab, NUM_RESERVED};
use crate::datrain::{da_train, pretrain, DaTrainConfig, MaskVariant, PretrainConfig, TrainLog, LOG_HEADER};
use crate::error::{Error, Result};
use crate::importance::{estimate_importance, normalize_importance, ImportanceMatrix};
use crate::model::{save_checkpoint, EncoderModel, ModelConfig, TokenBatch};

/// The rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "mlm")]
    Mlm,
    #[serde(rename = "dga")]
    Dga,
    #[serde(rename = "dga-no-contrast")]
    DgaNoContrast,
    #[serde(rename = "dga-random-mask")]
    DgaRandomMask,
    #[serde(rename = "dga-domain-specific")]
    DgaDomainSpecific,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::Mlm,
        Variant::Dga,
        Variant::DgaNoContrast,
        Variant::DgaRandomMask,
        Variant::DgaDomainSpecific,
    ];

    /// Table row label.
    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "Base",
            Self::Mlm => "MLM",
            Self::Dga => "DGA",
            Self::DgaNoContrast => "DGA w/o contrast",
            Self::DgaRandomMask => "DGA random mask",
            Self::DgaDomainSpecific => "DGA domain-specific",
        }
    }

    /// Directory-safe identifier.
    pub fn slug(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Mlm => "mlm",
            Self::Dga => "dga",
            Self::DgaNoContrast => "dga-no-contrast",
            Self::DgaRandomMask => "dga-random-mask",
            Self::DgaDomainSpecific => "dga-domain-specific",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.slug() == s)
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn needs_importance(self) -> bool {
        matches!(self, Self::Dga | Self::DgaNoContrast | Self::DgaDomainSpecific)
    }

    pub fn needs_da_training(self) -> bool {
        self != Self::Base
    }

    /// Mask source and contrast flag, given normalized importance and the
    /// seed for random masks. `None` for the untrained baseline.
    pub fn training_setup(self, norm: Option<&[f32]>, random_seed: u64) -> Result<Option<(MaskVariant, bool)>> {
        let need = || {
            norm.map(<[f32]>::to_vec)
                .ok_or_else(|| Error::Contract(format!("variant {} needs importance scores", self.name())))
        };
        Ok(match self {
            Self::Base => None,
            Self::Mlm => Some((MaskVariant::None, false)),
            Self::Dga => Some((MaskVariant::Dga(need()?), true)),
            Self::DgaNoContrast => Some((MaskVariant::Dga(need()?), false)),
            Self::DgaRandomMask => Some((MaskVariant::Random(random_seed), true)),
            Self::DgaDomainSpecific => Some((MaskVariant::DomainSpecific(need()?), true)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub subset_batches: usize,
    pub batch_size: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            subset_batches: 64,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_sequences: usize,
    pub ppl_seed: u64,
    pub ppl_batch_size: usize,
    pub task_train: usize,
    pub task_test: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_sequences: 500,
            ppl_seed: 1234,
            ppl_batch_size: 64,
            task_train: 400,
            task_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub pretrain_general: bool,
    pub importance: bool,
    pub da_train: bool,
    pub finetune: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            pretrain_general: true,
            importance: true,
            da_train: true,
            finetune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub model: ModelConfig,
    pub corpus: SyntheticCorpusSpec,
    pub corpus_seed: u64,
    pub pretrain: PretrainConfig,
    pub importance: ImportanceConfig,
    pub datrain: DaTrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub stages: Stages,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate(Some(self.model.max_seq_len))?;
        self.datrain.validate()?;
        self.pretrain.as_da_config().validate()?;
        self.finetune.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        for v in &self.variants {
            if v.needs_da_training() && !self.stages.da_train {
                return Err(Error::Config(format!("variant {} requires the da_train stage", v.name())));
            }
            if v.needs_importance() && !self.stages.importance {
                return Err(Error::Config(format!("variant {} requires the importance stage", v.name())));
            }
        }
        if self.stages.importance && self.importance.subset_batches == 0 {
            return Err(Error::Config("importance.subset_batches >= 1".into()));
        }
        Ok(())
    }
}

/// Independent random streams of one seed's pipeline.
#[derive(Debug, Clone)]
pub struct SeedStreams {
    root: RngState,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            root: RngState::new(seed),
        }
    }

    /// Model initialization (the model draws its own `Init` stream).
    pub fn init(&self) -> RngState {
        self.root.clone()
    }

    pub fn pretrain_data(&self) -> RngState {
        self.root.stream(Stream::DataShuffle).fork(0)
    }

    pub fn pretrain(&self) -> RngState {
        self.root.stream(Stream::Custom(10))
    }

    pub fn importance_data(&self) -> RngState {
        self.root.stream(Stream::DataShuffle).fork(1)
    }

    pub fn importance(&self) -> RngState {
        self.root.stream(Stream::Custom(20))
    }

    pub fn da_data(&self) -> RngState {
        self.root.stream(Stream::DataShuffle).fork(2)
    }

    pub fn da(&self) -> RngState {
        self.root.stream(Stream::Custom(30))
    }

    pub fn finetune(&self) -> RngState {
        self.root.stream(Stream::Custom(40))
    }

    pub fn random_mask_seed(&self, base: u64) -> u64 {
        base ^ self.root.seed().rotate_left(17)
    }
}

/// The first `n` shuffled batches of `corpus`.
pub fn importance_subset(corpus: &[Vec<usize>], n: usize, batch_size: usize, seq_len: usize, rng: &RngState) -> Result<Vec<TokenBatch>> {
    let packed = crate::corpus::pack(corpus, seq_len);
    let batches: Vec<TokenBatch> = BatchIter::new(&packed, batch_size, seq_len, rng)?.take(n).collect();
    if batches.len() < n {
        return Err(Error::Config(format!(
            "importance subset wants {n} batches but the corpus yields {}",
            batches.len()
        )));
    }
    Ok(batches)
}

fn ids_of(vocab: &Vocab, pairs: impl Iterator<Item = (String, String)>) -> Vec<(usize, usize)> {
    pairs
        .map(|(h, t)| (vocab.id(&h), vocab.id(&t)))
        .filter(|&(h, t)| h >= NUM_RESERVED && t >= NUM_RESERVED)
        .collect()
}

/// Aspect tasks whose labels depend on domain-only and on general-only
/// word pairs respectively. Shared heads with a domain-specific tail are
/// part of the domain task.
pub fn build_tasks(vocab: &Vocab, lexicon: &Lexicon, splits: &Splits, max_len: usize, eval: &EvalConfig, seed: u64) -> Result<(EndTask, EndTask)> {
    let is_domain_only = |t: &str| t.starts_with('d');
    let is_general_only = |t: &str| t.starts_with('g');
    let domain_pairs = ids_of(
        vocab,
        lexicon
            .domain
            .pairs
            .iter()
            .filter(|p| is_domain_only(&p.head))
            .map(|p| (p.head.clone(), p.tail.clone()))
            .chain(lexicon.polysemy.iter().map(|(h, _, d)| (h.clone(), d.clone()))),
    );
    let general_pairs = ids_of(
        vocab,
        lexicon
            .general
            .pairs
            .iter()
            .filter(|p| is_general_only(&p.head))
            .map(|p| (p.head.clone(), p.tail.clone()))
            .chain(lexicon.polysemy.iter().map(|(h, g, _)| (h.clone(), g.clone()))),
    );
    let tails = |pairs: &[(usize, usize)]| -> Vec<usize> {
        let mut t: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        t.sort_unstable();
        t.dedup();
        t
    };
    let rng = RngState::new(seed).stream(Stream::Custom(50));
    let domain = pair_task(
        "domain",
        &splits.domain_heldout,
        &domain_pairs,
        &tails(&domain_pairs),
        max_len,
        eval.task_train,
        eval.task_test,
        &rng.fork(0),
    )?;
    let general = pair_task(
        "general",
        &splits.general_heldout,
        &general_pairs,
        &tails(&general_pairs),
        max_len,
        eval.task_train,
        eval.task_test,
        &rng.fork(1),
    )?;
    Ok((domain, general))
}

/// Sequence task: does the sentence contain a domain-only marker token?
pub fn build_marker_task(vocab: &Vocab, lexicon: &Lexicon, splits: &Splits, max_len: usize, eval: &EvalConfig, seed: u64) -> Result<EndTask> {
    let marker = lexicon
        .domain_only_tokens
        .iter()
        .map(|t| vocab.id(t))
        .find(|&id| id >= NUM_RESERVED)
        .ok_or_else(|| Error::Task("no domain-only token available as marker".into()))?;
    marker_task(
        &splits.general_heldout,
        marker,
        max_len,
        eval.task_train,
        eval.task_test,
        &RngState::new(seed).stream(Stream::Custom(51)),
    )
}

/// Outcome of one `(variant, seed)` run as persisted in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const IMPORTANCE_FILE: &str = "importance.json";
pub const RUNS_DIR: &str = "runs";

pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{}-seed{seed}", variant.slug())
}

/// State shared by all variants of one seed.
struct SeedContext {
    base: EncoderModel,
    base_general_ppl: f64,
    base_domain_ppl: f64,
    importance: Option<ImportanceMatrix>,
}

struct Shared {
    splits: Splits,
    tasks: Option<(EndTask, EndTask)>,
}

fn prepare_seed(plan: &ExperimentPlan, shared: &Shared, seed: u64) -> Result<SeedContext> {
    let s = SeedStreams::new(seed);
    let mut base = EncoderModel::init(plan.model.clone(), &s.init())?;
    let seq_len = plan.corpus.seq_len_max;
    if plan.stages.pretrain_general {
        let mut stream = BatchStream::new(&shared.splits.general_train, plan.pretrain.batch_size, seq_len, s.pretrain_data())?;
        pretrain(&mut base, &mut stream, &plan.pretrain, &s.pretrain())?;
    }
    let importance = if plan.stages.importance {
        let subset = importance_subset(
            &shared.splits.domain_train,
            plan.importance.subset_batches,
            plan.importance.batch_size,
            seq_len,
            &s.importance_data(),
        )?;
        Some(normalize_importance(&estimate_importance(&base, &subset, &s.importance())?)?)
    } else {
        None
    };
    let ppl = |m: &EncoderModel, c: &[Vec<usize>]| perplexity(m, c, plan.eval.ppl_seed, plan.eval.ppl_batch_size);
    Ok(SeedContext {
        base_general_ppl: ppl(&base, &shared.splits.general_heldout)?,
        base_domain_ppl: ppl(&base, &shared.splits.domain_heldout)?,
        base,
        importance,
    })
}

fn run_variant(plan: &ExperimentPlan, shared: &Shared, ctx: &SeedContext, variant: Variant, seed: u64, dir: &Path) -> Result<BTreeMap<String, f64>> {
    let s = SeedStreams::new(seed);
    let mut model = ctx.base.clone();
    let norm = ctx.importance.as_ref().map(|m| m.norm()).transpose()?;
    let mut log = TrainLog::default();
    if let Some((mask, use_contrast)) = variant.training_setup(norm, s.random_mask_seed(plan.datrain.random_mask_seed))? {
        let cfg = DaTrainConfig {
            mask_variant: mask.kind(),
            use_contrast,
            ..plan.datrain.clone()
        };
        let mut stream = BatchStream::new(&shared.splits.domain_train, cfg.batch_size, plan.corpus.seq_len_max, s.da_data())?;
        log = da_train(&mut model, &mut stream, &cfg, &mask, &s.da())?;
    }
    fs::write(dir.join(METRICS_FILE), strip_wall_clock(&log).to_csv())?;
    save_checkpoint(&model, dir.join(CHECKPOINT_FILE))?;
    if let Some(imp) = &ctx.importance {
        fs::write(dir.join(IMPORTANCE_FILE), imp.to_json())?;
    }

    let mut metrics = BTreeMap::new();
    let ppl = |c: &[Vec<usize>]| perplexity(&model, c, plan.eval.ppl_seed, plan.eval.ppl_batch_size);
    let general_ppl = ppl(&shared.splits.general_heldout)?;
    let domain_ppl = ppl(&shared.splits.domain_heldout)?;
    metrics.insert("general_ppl".into(), general_ppl);
    metrics.insert("domain_ppl".into(), domain_ppl);
    metrics.insert("general_ppl_increase".into(), general_ppl - ctx.base_general_ppl);
    metrics.insert("domain_ppl_decrease".into(), ctx.base_domain_ppl - domain_ppl);
    if let Some((domain_task, general_task)) = &shared.tasks {
        for (name, task, fork) in [("domain_task", domain_task, 0), ("general_task", general_task, 1)] {
            let (_, _, m) = finetune_classifier(&model, task, &plan.finetune, &s.finetune().fork(fork))?;
            metrics.insert(format!("{name}_accuracy"), m.accuracy);
            metrics.insert(format!("{name}_macro_f1"), m.macro_f1);
            metrics.insert(format!("{name}_micro_f1"), m.micro_f1);
        }
    }
    Ok(metrics)
}

/// Wall-clock time is the only nondeterministic log column; experiment
/// artifacts record it as zero so reruns are byte-identical.
fn strip_wall_clock(log: &TrainLog) -> TrainLog {
    let mut out = log.clone();
    for r in &mut out.rows {
        r.wall_ms = 0;
    }
    out
}

/// Runs every `(variant, seed)` pair, writes per-run artifacts below
/// `output_dir/runs/` and the aggregated table to `output_dir/results.{csv,json}`.
///
/// A failing stage marks the affected runs as failed; the table then
/// reports fewer seeds for those cells.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    let data = Dataset::generate(&plan.corpus, plan.corpus_seed)?;
    if data.vocab.len() > plan.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds model.vocab_size {}",
            data.vocab.len(),
            plan.model.vocab_size
        )));
    }
    let splits = data.split(plan.eval.heldout_sequences)?;
    let tasks = if plan.stages.finetune {
        Some(build_tasks(&data.vocab, &data.lexicon, &splits, plan.model.max_seq_len, &plan.eval, plan.corpus_seed)?)
    } else {
        None
    };
    let shared = Shared { splits, tasks };
    let runs = plan.output_dir.join(RUNS_DIR);
    fs::create_dir_all(&runs)?;
    for &seed in &plan.seeds {
        let ctx = prepare_seed(plan, &shared, seed);
        for &variant in &plan.variants {
            let dir = runs.join(run_dir_name(variant, seed));
            fs::create_dir_all(&dir)?;
            let outcome = ctx
                .as_ref()
                .map_err(|e| Error::Contract(format!("seed setup failed: {e}")))
                .and_then(|c| run_variant(plan, &shared, c, variant, seed, &dir));
            let report = match outcome {
                Ok(metrics) => RunReport {
                    variant,
                    seed,
                    ok: true,
                    error: None,
                    metrics,
                },
                Err(e) => {
                    if !dir.join(METRICS_FILE).exists() {
                        fs::write(dir.join(METRICS_FILE), format!("{LOG_HEADER}\n"))?;
                    }
                    RunReport {
                        variant,
                        seed,
                        ok: false,
                        error: Some(e.to_string()),
                        metrics: BTreeMap::new(),
                    }
                }
            };
            fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        }
    }
    let table = aggregate_runs(&plan.output_dir)?;
    table.write(&plan.output_dir)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

/// Mean and sample standard deviation (0 for a single seed) per
/// `(variant, metric)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<ResultRow>,
    pub failed: Vec<FailedRun>,
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";

impl ResultTable {
    pub fn from_reports(reports: &[RunReport]) -> Self {
        let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut cells: BTreeMap<(Variant, String), Vec<f64>> = BTreeMap::new();
        let mut variants: Vec<Variant> = reports.iter().map(|r| r.variant).collect();
        variants.sort_unstable();
        variants.dedup();
        let mut failed = Vec::new();
        for r in reports {
            if !r.ok {
                failed.push(FailedRun {
                    variant: r.variant.name().into(),
                    seed: r.seed,
                    error: r.error.clone().unwrap_or_default(),
                });
                continue;
            }
            for (k, &v) in &r.metrics {
                cells.entry((r.variant, k.clone())).or_default().push(v);
            }
        }
        let mut rows = Vec::with_capacity(cells.len());
        for ((variant, metric), values) in cells {
            let (mean, std) = mean_std(&values);
            rows.push(ResultRow {
                variant: variant.name().into(),
                metric,
                mean,
                std,
                n_seeds: values.len(),
            });
        }
        for v in variants {
            if !rows.iter().any(|r| r.variant == v.name()) {
                rows.push(ResultRow {
                    variant: v.name().into(),
                    metric: "incomplete".into(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    n_seeds: 0,
                });
            }
        }
        Self { seeds, rows, failed }
    }

    /// Cells aggregating fewer runs than there are seeds.
    pub fn incomplete(&self) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.n_seeds < self.seeds.len()).collect()
    }

    pub fn get(&self, variant: Variant, metric: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.variant == variant.name() && r.metric == metric)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,mean,std,n_seeds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.variant, r.metric, r.mean, r.std, r.n_seeds);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RESULTS_CSV), self.to_csv())?;
        fs::write(dir.join(RESULTS_JSON), self.to_json())?;
        Ok(())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Loads every run folder below `dir/runs`, in name order.
pub fn load_run_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>> {
    let runs = dir.join(RUNS_DIR);
    if !runs.is_dir() {
        return Err(Error::Aggregation(format!("missing run directory {}", runs.display())));
    }
    let mut folders: Vec<PathBuf> = fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    folders.sort();
    if folders.is_empty() {
        return Err(Error::Aggregation(format!("no runs found in {}", runs.display())));
    }
    let mut missing = Vec::new();
    for f in &folders {
        for name in [REPORT_FILE, METRICS_FILE] {
            if !f.join(name).is_file() {
                missing.push(f.join(name).display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Aggregation(format!("missing run files: {}", missing.join(", "))));
    }
    folders
        .into_iter()
        .map(|f| {
            let r: RunReport = serde_json::from_str(&fs::read_to_string(f.join(REPORT_FILE))?)?;
            Ok((f, r))
        })
        .collect()
}

pub fn aggregate_runs(dir: &Path) -> Result<ResultTable> {
    let reports: Vec<RunReport> = load_run_reports(dir)?.into_iter().map(|(_, r)| r).collect();
    Ok(ResultTable::from_reports(&reports))
}
