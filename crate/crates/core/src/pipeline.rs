//! Pipeline stages that read and write run directories, and the
//! pretrain → finetune → evaluate comparison harness.
//!
//! Every stage writes `config.resolved` and `seed` into its output
//! directory before doing any work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::finetune::{finetune, format_curve, format_generations, generate_reports, load_model, FinetuneConfig, FinetuneOutput};
use crate::metrics::MetricReport;
use crate::models::DecoderKind;
use crate::pretrain::{format_loss_log, pretrain, PretrainConfig, PretrainMethod, PretrainOutput};
use crate::synth::{read_dataset_splits, Split, ALL_KEYWORDS, LUNG_KEYWORDS};

pub const CONFIG_FILE: &str = "config.resolved";
pub const SEED_FILE: &str = "seed";
pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const LOSS_LOG: &str = "loss.tsv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const CURVE_FILE: &str = "val_curve.tsv";
pub const GENERATIONS_FILE: &str = "generations.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const TABLE_FILE: &str = "table.tsv";
pub const KEYWORD_TABLE_FILE: &str = "keywords.tsv";
pub const TABLE_HEADER: &str = "method\tB-1\tB-2\tB-3\tB-4\tM\tR-L";

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Creates `dir` and records the resolved config and seed in it.
pub fn prepare_run_dir(dir: &Path, config: &KvConfig, seed: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &config.to_text())?;
    write_text(&dir.join(SEED_FILE), &format!("{seed}\n"))
}

/// Pretrains on the training split under `data`, writing the encoder
/// checkpoint and loss log to `out`.
pub fn run_pretrain(data: &Path, cfg: &PretrainConfig, out: &Path) -> Result<PretrainOutput> {
    cfg.validate()?;
    let mut kv = cfg.to_kv();
    kv.set("data", data.display());
    prepare_run_dir(out, &kv, &cfg.seed.to_string())?;
    let ds = read_dataset_splits(data, &[Split::Train])?;
    let result = pretrain(&ds, cfg)?;
    result.checkpoint.write(&out.join(ENCODER_CKPT))?;
    write_text(&out.join(LOSS_LOG), &format_loss_log(&result.log))?;
    Ok(result)
}

/// Fine-tunes on the training split, selecting on validation, with the
/// encoder taken from `encoder_ckpt`.
pub fn run_finetune(data: &Path, encoder_ckpt: &Path, cfg: &FinetuneConfig, out: &Path) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let mut kv = cfg.to_kv();
    kv.set("data", data.display());
    kv.set("encoder_ckpt", encoder_ckpt.display());
    prepare_run_dir(out, &kv, &cfg.seed.to_string())?;
    let ckpt = Checkpoint::read(encoder_ckpt)?;
    let ds = read_dataset_splits(data, &[Split::Train, Split::Val])?;
    let result = finetune(&ds, Some(&ckpt), cfg)?;
    result.checkpoint.write(&out.join(MODEL_CKPT))?;
    write_text(&out.join(CURVE_FILE), &format_curve(&result.curve))?;
    Ok(result)
}

/// Generates reports for `split` and scores them against the references.
pub fn run_evaluate(data: &Path, model_ckpt: &Path, split: Split, out: &Path) -> Result<MetricReport> {
    let ckpt = Checkpoint::read(model_ckpt)?;
    let mut kv = KvConfig::new();
    kv.set("data", data.display());
    kv.set("model_ckpt", model_ckpt.display());
    kv.set("split", split);
    let seed = ckpt.config_value("seed").unwrap_or("0").to_string();
    let (model, vocab) = load_model(&ckpt)?;
    let ds = read_dataset_splits(data, &[split])?;
    if ds.is_empty() {
        return Err(Error::Config(format!("split `{split}` is empty")));
    }
    prepare_run_dir(out, &kv, &seed)?;
    let gens = generate_reports(&model, &vocab, &ds, split)?;
    let tags: Vec<Vec<String>> = ds.manifest.records.iter().map(|r| r.tags.clone()).collect();
    let generated: Vec<String> = gens.iter().map(|g| g.generated.clone()).collect();
    let references: Vec<String> = gens.iter().map(|g| g.reference.clone()).collect();
    let report = MetricReport::compute(&generated, &references, &tags, &ALL_KEYWORDS);
    write_text(&out.join(GENERATIONS_FILE), &format_generations(&gens))?;
    write_text(&out.join(METRICS_FILE), &report.to_text())?;
    Ok(report)
}

/// Epoch counts used by `compare` unless overridden. Scaled so that a
/// two-method, three-seed transformer comparison on the default dataset
/// fits a 15-minute single-core budget.
pub const COMPARE_PRETRAIN_EPOCHS: usize = 8;
pub const COMPARE_FINETUNE_EPOCHS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub methods: Vec<PretrainMethod>,
    pub seeds: Vec<u64>,
    pub decoder: DecoderKind,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Extra `key=value` settings applied to both stages.
    pub overrides: KvConfig,
    /// Cells run concurrently.
    pub workers: usize,
}

impl CompareConfig {
    pub fn new(methods: Vec<PretrainMethod>, seeds: Vec<u64>, decoder: DecoderKind) -> Self {
        Self {
            methods,
            seeds,
            decoder,
            pretrain_epochs: COMPARE_PRETRAIN_EPOCHS,
            finetune_epochs: COMPARE_FINETUNE_EPOCHS,
            overrides: KvConfig::new(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("compare needs at least one method and one seed".into()));
        }
        let mut m = self.methods.clone();
        m.sort_unstable_by_key(|m| m.as_str());
        m.dedup();
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if m.len() != self.methods.len() || s.len() != self.seeds.len() {
            return Err(Error::Config("duplicate method or seed".into()));
        }
        for &method in &self.methods {
            self.pretrain_config(method, 0)?;
        }
        self.finetune_config(0)?;
        Ok(())
    }

    pub fn pretrain_config(&self, method: PretrainMethod, seed: u64) -> Result<PretrainConfig> {
        let mut c = PretrainConfig::from_kv(&self.overrides, Some(method), Some(seed))?;
        c.epochs = self.pretrain_epochs;
        Ok(c)
    }

    pub fn finetune_config(&self, seed: u64) -> Result<FinetuneConfig> {
        let mut c = FinetuneConfig::from_kv(&self.overrides, Some(self.decoder), Some(seed))?;
        c.epochs = self.finetune_epochs;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.overrides.clone();
        let methods: Vec<&str> = self.methods.iter().map(|m| m.as_str()).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        kv.set("methods", methods.join(","));
        kv.set("seeds", seeds.join(","));
        kv.set("decoder", self.decoder);
        kv.set("pretrain_epochs", self.pretrain_epochs);
        kv.set("finetune_epochs", self.finetune_epochs);
        kv
    }
}

/// Scores of one (method, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub method: PretrainMethod,
    pub seed: u64,
    pub metrics: MetricReport,
    /// Reused from an earlier run with the same resolved config.
    pub reused: bool,
}

pub fn cell_dir(out: &Path, method: PretrainMethod, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{method}_seed{seed}"))
}

fn cell_config(cfg: &CompareConfig, data: &Path, method: PretrainMethod, seed: u64) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    kv.set("data", data.display());
    for (k, v) in [
        ("pretrain", cfg.pretrain_config(method, seed)?.to_kv()),
        ("finetune", cfg.finetune_config(seed)?.to_kv()),
    ] {
        for key in v.keys() {
            kv.set(&format!("{k}.{key}"), v.raw(key).unwrap_or_default());
        }
    }
    Ok(kv)
}

/// Runs one cell, or reuses it when its directory already holds metrics
/// produced under the same resolved config.
pub fn run_cell(data: &Path, cfg: &CompareConfig, method: PretrainMethod, seed: u64, out: &Path) -> Result<CellResult> {
    let dir = cell_dir(out, method, seed);
    let kv = cell_config(cfg, data, method, seed)?;
    let metrics_path = dir.join("eval").join(METRICS_FILE);
    let existing = fs::read_to_string(dir.join(CONFIG_FILE)).ok();
    if existing.as_deref() == Some(kv.to_text().as_str()) && metrics_path.exists() {
        let metrics = MetricReport::from_text(&read_text(&metrics_path)?)?;
        log::info!("reusing {method} seed {seed}");
        return Ok(CellResult { method, seed, metrics, reused: true });
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    prepare_run_dir(&dir, &kv, &seed.to_string())?;
    log::info!("running {method} seed {seed}");
    run_pretrain(data, &cfg.pretrain_config(method, seed)?, &dir.join("pretrain"))?;
    run_finetune(
        data,
        &dir.join("pretrain").join(ENCODER_CKPT),
        &cfg.finetune_config(seed)?,
        &dir.join("finetune"),
    )?;
    run_evaluate(data, &dir.join("finetune").join(MODEL_CKPT), Split::Test, &dir.join("eval"))?;
    // Scores go through the printed form so that fresh and reused cells
    // average identically.
    let metrics = MetricReport::from_text(&read_text(&metrics_path)?)?;
    Ok(CellResult { method, seed, metrics, reused: false })
}

/// Seed-averaged table rows, in `methods` order.
pub fn format_table(methods: &[PretrainMethod], cells: &[CellResult]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for &m in methods {
        let rows: Vec<&MetricReport> = cells.iter().filter(|c| c.method == m).map(|c| &c.metrics).collect();
        let mean = |f: &dyn Fn(&MetricReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
        let _ = writeln!(
            out,
            "{m}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            mean(&|r| r.bleu[0]),
            mean(&|r| r.bleu[1]),
            mean(&|r| r.bleu[2]),
            mean(&|r| r.bleu[3]),
            mean(&|r| r.meteor),
            mean(&|r| r.rouge_l),
        );
    }
    out
}

/// Seed-averaged keyword F1 per method, plus the macro average over the
/// lung keywords.
pub fn format_keyword_table(methods: &[PretrainMethod], cells: &[CellResult]) -> String {
    let mut out = String::from("method");
    for kw in ALL_KEYWORDS {
        let _ = write!(out, "\t{kw}");
    }
    out.push_str("\tlung_macro_f1\n");
    for &m in methods {
        let rows: Vec<&MetricReport> = cells.iter().filter(|c| c.method == m).map(|c| &c.metrics).collect();
        let n = rows.len() as f64;
        out.push_str(m.as_str());
        for kw in ALL_KEYWORDS {
            let f: f64 = rows.iter().map(|r| r.keywords.get(kw).map_or(0.0, |s| s.f1)).sum();
            let _ = write!(out, "\t{:.6}", f / n);
        }
        let macro_f1: f64 = rows.iter().map(|r| r.macro_f1(&LUNG_KEYWORDS)).sum();
        let _ = writeln!(out, "\t{:.6}", macro_f1 / n);
    }
    out
}

#[derive(Clone, Debug)]
pub struct CompareOutput {
    pub cells: Vec<CellResult>,
    pub table: String,
    pub keyword_table: String,
}

/// Runs every (method, seed) cell, up to `cfg.workers` at a time, then
/// writes the seed-averaged tables. On failure, finished cells stay on disk
/// and the first error is returned.
pub fn compare(data: &Path, cfg: &CompareConfig, out: &Path) -> Result<CompareOutput> {
    cfg.validate()?;
    let mut kv = cfg.to_kv();
    kv.set("data", data.display());
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    prepare_run_dir(out, &kv, &seeds.join(","))?;

    let jobs: Vec<(PretrainMethod, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let worker = || loop {
        if failed.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(method, seed)) = jobs.get(i) else { break };
        let r = run_cell(data, cfg, method, seed, out);
        if r.is_err() {
            failed.store(true, Ordering::SeqCst);
        }
        results.lock().expect("no poisoned lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..cfg.workers.clamp(1, jobs.len()) {
            s.spawn(worker);
        }
        worker();
    });

    let mut cells = Vec::with_capacity(jobs.len());
    for r in results.into_inner().expect("no poisoned lock").into_iter().flatten() {
        cells.push(r?);
    }
    let table = format_table(&cfg.methods, &cells);
    let keyword_table = format_keyword_table(&cfg.methods, &cells);
    write_text(&out.join(TABLE_FILE), &table)?;
    write_text(&out.join(KEYWORD_TABLE_FILE), &keyword_table)?;
    Ok(CompareOutput { cells, table, keyword_table })
}
