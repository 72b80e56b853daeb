//! One function per subcommand. Each reads its inputs, writes artifacts under `out`,
//! and echoes the resolved configuration as `config.toml`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use imitkd_core::dagger::{regret_sweep, Method, SweepResult};
use imitkd_core::data::{CorpusSplits, Split};
use imitkd_core::decoding::decode_corpus;
use imitkd_core::metrics::{bin_drop, compare_speed, evaluate, perplexity, MetricsReport};
use imitkd_core::optim::Adam;
use imitkd_core::seeds;
use imitkd_core::trainer::{
    build_seqkd_corpus, init_seed, seqinter_finetune, teacher_kbest, train, CorpusKind, TrainConfig, TrainOutcome, TrainSink, Variant,
};
use imitkd_core::{Corpus, PolicyModel, TokenId};
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub fn prepare_out(out: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn load_splits(data: &Path) -> Result<CorpusSplits> {
    CorpusSplits::load(data).with_context(|| format!("loading corpus from {}", data.display()))
}

fn load_model(path: &Path) -> Result<PolicyModel> {
    PolicyModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn split_of<'a>(s: &'a CorpusSplits, split: Split) -> &'a Corpus {
    match split {
        Split::Train => &s.train,
        Split::Valid => &s.valid,
        Split::Test => &s.test,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// NDJSON training log plus model and optimizer state at every validation point.
struct RunSink {
    log: BufWriter<File>,
    checkpoints: PathBuf,
}

impl RunSink {
    fn new(out: &Path) -> Result<Self> {
        let checkpoints = out.join("checkpoints");
        fs::create_dir_all(&checkpoints)?;
        Ok(RunSink { log: BufWriter::new(File::create(out.join("log.ndjson"))?), checkpoints })
    }
}

impl TrainSink for RunSink {
    fn record(&mut self, rec: &imitkd_core::trainer::LogRecord) -> imitkd_core::Result<()> {
        serde_json::to_writer(&mut self.log, rec)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&mut self, iteration: u64, student: &PolicyModel, opt: &Adam) -> imitkd_core::Result<()> {
        student.save(&self.checkpoints.join(format!("step-{iteration}.model")))?;
        let mut w = BufWriter::new(File::create(self.checkpoints.join(format!("step-{iteration}.adam")))?);
        opt.save(&mut w, student.params())?;
        w.flush()?;
        Ok(())
    }
}

/// Deterministic summary of one training run, read back by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub best_iteration: u64,
    pub best_valid: Option<f64>,
    pub diverged_at: Option<u64>,
    pub pool_refreshes: u64,
    pub replaced_total: usize,
    pub params: usize,
}

fn finish_run(out: &Path, cfg: &Config, variant: Variant, outcome: TrainOutcome, splits: &CorpusSplits) -> Result<MetricsReport> {
    outcome.student.save(&out.join("model.bin"))?;
    let (_, mut report) = evaluate(&outcome.student, &splits.test, &cfg.decode, cfg.eval.batch, cfg.threads, cfg.eval.bin_width)?;
    report.perplexity = Some(perplexity(&outcome.student, &splits.test, cfg.eval.batch)?);
    write_metrics(out, &report)?;
    if let Some(i) = outcome.diverged_at {
        log::warn!("training diverged at iteration {i}; saved the best checkpoint before it");
    }
    write_json(
        &out.join("run.json"),
        &RunSummary {
            variant: variant.label(),
            seed: cfg.seed,
            best_iteration: outcome.best_iteration,
            best_valid: outcome.best_metric,
            diverged_at: outcome.diverged_at,
            pool_refreshes: outcome.pool_refreshes,
            replaced_total: outcome.replaced_total,
            params: outcome.student.num_params(),
        },
    )?;
    log::info!("{}: test BLEU {:.2} (best valid at iteration {})", variant, report.bleu, outcome.best_iteration);
    Ok(report)
}

fn write_metrics(out: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(out.join("metrics.json"), report.to_json()?)?;
    fs::write(out.join("metrics.csv"), format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()))?;
    Ok(())
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let splits = imitkd_core::data::gen_toy_translation(&cfg.data)?;
    splits.save(out)?;
    write_json(&out.join("manifest.json"), &splits.manifest(&cfg.data))?;
    log::info!("wrote {} train / {} valid / {} test pairs", splits.train.len(), splits.valid.len(), splits.test.len());
    Ok(())
}

pub fn train_teacher(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let model = PolicyModel::new(cfg.teacher.clone(), splits.vocab.len(), seeds::substream(cfg.seed, "teacher-init"))?;
    let tc = TrainConfig { variant: Variant::VANILLA, ..cfg.teacher_train.clone() };
    let outcome = train(&tc, model, &splits.train, None, Some(&splits.valid), &mut RunSink::new(out)?)?;
    finish_run(out, cfg, Variant::VANILLA, outcome, &splits)?;
    Ok(())
}

pub fn build_seqkd(cfg: &Config, data: &Path, teacher: &Path, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let teacher = load_model(teacher)?;
    let dstar = build_seqkd_corpus(&teacher, &splits.train, cfg.seqkd.beam, cfg.seqkd.max_len, cfg.threads)?;
    dstar.save(&out.join("train.tsv"))?;
    log::info!("wrote {} teacher-labelled pairs (mean length {:.2})", dstar.len(), dstar.mean_target_len());
    Ok(())
}

pub fn distill(cfg: &Config, data: &Path, teacher: Option<&Path>, seqkd: Option<&Path>, variant: Option<Variant>, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let variant = variant.unwrap_or(cfg.distill.variant);
    let teacher = match teacher {
        Some(p) => Some(load_model(p)?),
        None if variant.needs_teacher() => bail!("variant {variant} needs --teacher"),
        None => None,
    };
    let dstar = match (variant.corpus(), seqkd) {
        (CorpusKind::Teacher, Some(p)) => Some(Corpus::load(p, splits.vocab.clone(), Split::Train)?.0),
        (CorpusKind::Teacher, None) => bail!("variant {variant} trains on teacher outputs and needs --seqkd"),
        (CorpusKind::Data, _) => None,
    };
    let corpus = dstar.as_ref().unwrap_or(&splits.train);
    let student = PolicyModel::new(cfg.student.clone(), splits.vocab.len(), init_seed(cfg.seed))?;
    let tc = TrainConfig { variant, ..cfg.distill.clone() };
    let outcome = train(&tc, student, corpus, teacher.as_ref(), Some(&splits.valid), &mut RunSink::new(out)?)?;
    finish_run(out, cfg, variant, outcome, &splits)?;
    Ok(())
}

pub fn seqinter(cfg: &Config, data: &Path, teacher: &Path, student: &Path, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let teacher = load_model(teacher)?;
    let student = load_model(student)?;
    let kbest = teacher_kbest(&teacher, &splits.train, cfg.seqinter.beam, cfg.seqinter.max_len, cfg.threads)?;
    let outcome = seqinter_finetune(student, &kbest, &splits.train, &cfg.seqinter.train, Some(&splits.valid), &mut RunSink::new(out)?)?;
    finish_run(out, cfg, Variant::VANILLA, outcome, &splits)?;
    Ok(())
}

pub fn decode(cfg: &Config, data: &Path, model: &Path, split: Split, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let model = load_model(model)?;
    let corpus = split_of(&splits, split);
    let srcs: Vec<&[TokenId]> = corpus.sources().collect();
    let hyps = decode_corpus(&model, &srcs, &cfg.decode, cfg.eval.batch, cfg.threads)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&splits.vocab.detokenize(&h.tokens));
        text.push('\n');
    }
    fs::write(out.join("hypotheses.txt"), text)?;
    Ok(())
}

pub fn evaluate_cmd(cfg: &Config, data: &Path, model: &Path, split: Split, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let model = load_model(model)?;
    let corpus = split_of(&splits, split);
    let (_, mut report) = evaluate(&model, corpus, &cfg.decode, cfg.eval.batch, cfg.threads, cfg.eval.bin_width)?;
    report.perplexity = Some(perplexity(&model, corpus, cfg.eval.batch)?);
    write_metrics(out, &report)?;
    println!("BLEU {:.2}  ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}", report.bleu, report.rouge1, report.rouge2, report.rouge_l);
    Ok(())
}

#[derive(Serialize)]
struct LengthAnalysis {
    model: String,
    drop: Option<f64>,
    bins: Vec<imitkd_core::metrics::LengthBin>,
}

pub fn analyze_length(cfg: &Config, data: &Path, models: &[PathBuf], split: Split, out: &Path) -> Result<()> {
    ensure!(!models.is_empty(), "analyze-length needs at least one --model");
    let splits = load_splits(data)?;
    let corpus = split_of(&splits, split);
    let mut csv = String::from("model,lo,hi,count,bleu\n");
    let mut all = Vec::new();
    for path in models {
        let model = load_model(path)?;
        let (_, report) = evaluate(&model, corpus, &cfg.decode, cfg.eval.batch, cfg.threads, cfg.eval.bin_width)?;
        let name = path.display().to_string();
        for b in &report.bins {
            csv.push_str(&format!("{name},{},{},{},{}\n", b.lo, b.hi, b.count, b.bleu));
        }
        all.push(LengthAnalysis { model: name, drop: bin_drop(&report.bins), bins: report.bins });
    }
    fs::write(out.join("length_bins.csv"), csv)?;
    write_json(&out.join("length.json"), &all)?;
    Ok(())
}

pub fn bench(cfg: &Config, data: &Path, student: &Path, teacher: &Path, out: &Path) -> Result<()> {
    let splits = load_splits(data)?;
    let (student, teacher) = (load_model(student)?, load_model(teacher)?);
    let srcs: Vec<&[TokenId]> = splits.test.sources().take(cfg.bench.sentences.max(1)).collect();
    let rows = compare_speed(&student, &teacher, &srcs, &cfg.bench.beams, cfg.bench.max_len, cfg.bench.passes)?;
    let mut csv = String::from("beam,student_ms,teacher_ms,ratio,student_params,teacher_params\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.beam, r.student_ms, r.teacher_ms, r.ratio, r.student_params, r.teacher_params));
        println!("K={}: student {:.3} ms/seq, teacher {:.3} ms/seq, ratio {:.2}", r.beam, r.student_ms, r.teacher_ms, r.ratio);
    }
    fs::write(out.join("speed.csv"), csv)?;
    write_json(&out.join("speed.json"), &rows)?;
    Ok(())
}

pub fn dagger_sim(cfg: &Config, out: &Path) -> Result<()> {
    let mut csv = format!("{}\n", SweepResult::CSV_HEADER);
    let mut results = Vec::new();
    for m in [Method::Bc, Method::Dagger] {
        let r = regret_sweep(&cfg.dagger, m)?;
        for line in r.csv_rows() {
            csv.push_str(&line);
            csv.push('\n');
        }
        match r.fit {
            Some(f) => println!("{m}: exponent {:.3}", f.exponent),
            None => println!("{m}: exponent undefined (no mistakes)"),
        }
        results.push(r);
    }
    fs::write(out.join("dagger.csv"), csv)?;
    write_json(&out.join("dagger.json"), &results)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    run: String,
    variant: String,
    seed: u64,
    bleu: f64,
    rouge1: f64,
    rouge2: f64,
    rouge_l: f64,
    perplexity: Option<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    ensure!(!runs.is_empty(), "report needs at least one --runs directory");
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).with_context(|| format!("reading {}/run.json", dir.display()))?)?;
        let m: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json"))?)?;
        rows.push(ReportRow {
            run: dir.display().to_string(),
            variant: summary.variant,
            seed: summary.seed,
            bleu: m.bleu,
            rouge1: m.rouge1,
            rouge2: m.rouge2,
            rouge_l: m.rouge_l,
            perplexity: m.perplexity,
        });
    }
    let mut csv = String::from("run,variant,seed,bleu,rouge1,rouge2,rouge_l,perplexity\n");
    for r in &rows {
        let ppl = r.perplexity.map(|p| p.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.run, r.variant, r.seed, r.bleu, r.rouge1, r.rouge2, r.rouge_l, ppl));
    }
    fs::write(out.join("report.csv"), csv)?;

    let mut variants: Vec<&str> = Vec::new();
    for r in &rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut md = String::from("| variant | runs | median BLEU | median ROUGE-L |\n|---|---|---|---|\n");
    for v in variants {
        let mut b: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.bleu).collect();
        let mut l: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.rouge_l).collect();
        md.push_str(&format!("| {v} | {} | {:.2} | {:.4} |\n", b.len(), median(&mut b), median(&mut l)));
    }
    fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
