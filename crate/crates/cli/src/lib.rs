//! Command-line pipeline over the `adsorbtext` library.
//!
//! Stages exchange files only: structures JSONL → records JSONL → vocabulary
//! → checkpoints → CSV reports. Every command writes a run manifest beside
//! each output.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adsorbtext::encoder::EncoderModel;
use adsorbtext::eval::{self, PredictionSet};
use adsorbtext::graphemb::{load_atom_embeddings, synthetic_graph_embeddings};
use adsorbtext::structures::{parse_structures, SurfaceScope};
use adsorbtext::textgen::{convert_all, group_duplicates, read_records, write_records, ConvertOptions, TextualRecord};
use adsorbtext::tokenizer::{build_vocab, encode_all, TokenSequence, Vocabulary};
use adsorbtext::training::{self, log_csv, LogEntry, ModelInit};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "adsorbtext",
    version,
    about = "Text-based adsorption energy prediction pipeline"
)]
pub struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set lr=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ModelInputs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serialize structures into three-section text records.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bond when distance <= scale * (r_i + r_j).
        #[arg(long, default_value_t = 1.2)]
        cutoff_scale: f64,
        /// Count only surface-layer atoms as interacting.
        #[arg(long)]
        surface_only: bool,
    },
    /// Build the word vocabulary of a record file.
    Vocab {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic stand-in graph embeddings for a structure file.
    SynthGraphemb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        harmonics: usize,
    },
    /// Masked-token pretraining.
    PretrainMlm {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Contrastive pretraining against frozen graph embeddings.
    PretrainGap {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        graphemb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Supervised energy regression.
    Finetune {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint whose encoder body initializes the model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Predict energies; labels are optional.
    Predict {
        #[command(flatten)]
        model: ModelInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAE, R², relaxer uncertainty and duplicate breakdown.
    Eval {
        #[command(flatten)]
        model: ModelInputs,
        /// Directory for the CSV reports; defaults to the checkpoint's.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Share of `<s>` attention per text section.
    AnalyzeAttention {
        #[command(flatten)]
        model: ModelInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group records with identical text.
    AnalyzeDuplicates {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// With `--vocab`, also report MAE inside and outside duplicate groups.
        #[arg(long, requires = "vocab")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// `<s>` embeddings with labels and adsorbate classes.
    ExportEmbeddings {
        #[command(flatten)]
        model: ModelInputs,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Convert { .. } => "convert",
            Self::Vocab { .. } => "vocab",
            Self::SynthGraphemb { .. } => "synth-graphemb",
            Self::PretrainMlm { .. } => "pretrain-mlm",
            Self::PretrainGap { .. } => "pretrain-gap",
            Self::Finetune { .. } => "finetune",
            Self::Predict { .. } => "predict",
            Self::Eval { .. } => "eval",
            Self::AnalyzeAttention { .. } => "analyze-attention",
            Self::AnalyzeDuplicates { .. } => "analyze-duplicates",
            Self::ExportEmbeddings { .. } => "export-embeddings",
        }
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .try_init();
    let started = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let manifest = RunManifest::new(cli.command.name(), &args, started);
    match execute(cli.command, manifest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<TextualRecord>> {
    read_records(path).with_context(|| format!("reading records {}", path.display()))
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    EncoderModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn encode(records: &[TextualRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    let seqs = encode_all(records, vocab, max_len)?;
    let truncated = seqs.iter().filter(|t| t.truncated).count();
    if truncated > 0 {
        log::warn!("{truncated} record(s) longer than max_len {max_len} were truncated");
    }
    Ok(seqs)
}

/// Model, vocabulary, records and their encodings for read-only commands.
fn open_model(
    m: &ModelInputs,
    manifest: &mut RunManifest,
) -> Result<(EncoderModel, Vec<TextualRecord>, Vec<TokenSequence>)> {
    let model = load_model(&m.checkpoint)?;
    let vocab = load_vocab(&m.vocab)?;
    model.check_vocab(&vocab.hash())?;
    if model.config().vocab_size != vocab.len() {
        bail!(
            "checkpoint expects {} tokens, vocabulary has {}",
            model.config().vocab_size,
            vocab.len()
        );
    }
    let records = load_records(&m.records)?;
    let seqs = encode(&records, &vocab, model.config().max_len)?;
    manifest.input("checkpoint", &m.checkpoint);
    manifest.input("vocab", &m.vocab);
    manifest.input("records", &m.records);
    manifest.config = model.config().to_kv();
    Ok((model, records, seqs))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    adsorbtext::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.csv");
    out.with_file_name(name)
}

fn save_training(model: &EncoderModel, log: &[LogEntry], out: &Path, manifest: &mut RunManifest) -> Result<()> {
    model
        .save(out)
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    let lp = log_path(out);
    write_text(&lp, &log_csv(log))?;
    manifest.output("checkpoint", out);
    manifest.output("log", &lp);
    Ok(())
}

struct TrainingInputs {
    cfg: RunConfig,
    vocab: Vocabulary,
    records: Vec<TextualRecord>,
    init: Option<EncoderModel>,
}

fn training_inputs(
    records: &Path,
    vocab: &Path,
    init: Option<&Path>,
    args: &TrainArgs,
    manifest: &mut RunManifest,
) -> Result<TrainingInputs> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides, args.seed)?;
    let vocab_v = load_vocab(vocab)?;
    let records_v = load_records(records)?;
    manifest.input("records", records);
    manifest.input("vocab", vocab);
    if let Some(c) = &args.config {
        manifest.input("config", c);
    }
    let init_model = match init {
        Some(p) => {
            let m = load_model(p)?;
            m.check_vocab(&vocab_v.hash())?;
            if !cfg.model_overrides().is_empty() {
                log::warn!(
                    "model keys in the configuration are ignored; the architecture comes from {}",
                    p.display()
                );
            }
            manifest.input("init", p);
            Some(m)
        }
        None => None,
    };
    manifest.seed = Some(cfg.train.seed);
    Ok(TrainingInputs {
        cfg,
        vocab: vocab_v,
        records: records_v,
        init: init_model,
    })
}

fn execute(command: Command, mut manifest: RunManifest) -> Result<()> {
    match command {
        Command::Convert {
            input,
            out,
            cutoff_scale,
            surface_only,
        } => {
            let structures = parse_structures(&input).with_context(|| format!("reading {}", input.display()))?;
            let opts = ConvertOptions {
                cutoff_scale,
                scope: if surface_only {
                    SurfaceScope::SurfaceOnly
                } else {
                    SurfaceScope::SlabAtoms
                },
            };
            let records = convert_all(&structures, opts)?;
            write_records(&out, &records)?;
            manifest.input("structures", &input);
            manifest.output("records", &out);
            manifest
                .config
                .insert("cutoff_scale".into(), format!("{cutoff_scale:?}"));
            manifest.config.insert("surface_only".into(), surface_only.to_string());
            println!("converted {} structures", records.len());
        }
        Command::Vocab { input, out } => {
            let records = load_records(&input)?;
            let vocab = build_vocab(&records)?;
            vocab.write(&out)?;
            manifest.input("records", &input);
            manifest.output("vocab", &out);
            println!("{} tokens, hash {}", vocab.len(), vocab.hash());
        }
        Command::SynthGraphemb {
            input,
            out,
            seed,
            channels,
            harmonics,
        } => {
            let structures = parse_structures(&input).with_context(|| format!("reading {}", input.display()))?;
            let set = synthetic_graph_embeddings(&structures, seed, channels, harmonics)?;
            set.write(&out)?;
            manifest.input("structures", &input);
            manifest.output("graphemb", &out);
            manifest.seed = Some(seed);
            manifest.config.insert("channels".into(), channels.to_string());
            manifest.config.insert("harmonics".into(), harmonics.to_string());
            println!("{} systems, pooled length {}", set.len(), channels * harmonics);
        }
        Command::PretrainMlm {
            records,
            vocab,
            out,
            init,
            train,
        } => {
            let ti = training_inputs(&records, &vocab, init.as_deref(), &train, &mut manifest)?;
            let model_cfg = match &ti.init {
                Some(m) => m.config().clone(),
                None => ti.cfg.model_config(ti.vocab.len())?,
            };
            let seqs = encode(&ti.records, &ti.vocab, model_cfg.max_len)?;
            let start = match &ti.init {
                Some(m) => ModelInit::Pretrained(m),
                None => ModelInit::Fresh(&model_cfg),
            };
            let (mut model, log) = training::pretrain_mlm(&ti.cfg.train, start, &seqs)?;
            model.vocab_hash = Some(ti.vocab.hash());
            manifest.config = ti.cfg.resolved(Some(&model_cfg));
            save_training(&model, &log, &out, &mut manifest)?;
            report_log(&log);
        }
        Command::PretrainGap {
            records,
            vocab,
            graphemb,
            out,
            init,
            train,
        } => {
            let ti = training_inputs(&records, &vocab, init.as_deref(), &train, &mut manifest)?;
            let provider =
                load_atom_embeddings(&graphemb).with_context(|| format!("reading {}", graphemb.display()))?;
            manifest.input("graphemb", &graphemb);
            let dim = provider.pooled_dim().context("graph embedding file is empty")?;
            let mut model_cfg = match &ti.init {
                Some(m) => m.config().clone(),
                None => ti.cfg.model_config(ti.vocab.len())?,
            };
            if ti.cfg.model_overrides().contains_key("d_graph") && model_cfg.d_graph != dim {
                bail!("d_graph = {} but graph embeddings have length {dim}", model_cfg.d_graph);
            }
            model_cfg.d_graph = dim;
            let seqs = encode(&ti.records, &ti.vocab, model_cfg.max_len)?;
            let resized;
            let start = match &ti.init {
                Some(m) if m.config().d_graph == dim => ModelInit::Pretrained(m),
                Some(m) => {
                    let mut fresh = EncoderModel::new(model_cfg.clone(), ti.cfg.train.seed)?;
                    fresh.load_encoder_body(m)?;
                    resized = fresh;
                    ModelInit::Pretrained(&resized)
                }
                None => ModelInit::Fresh(&model_cfg),
            };
            let (mut model, log) = training::pretrain_contrastive(&ti.cfg.train, start, &seqs, &provider)?;
            model.vocab_hash = Some(ti.vocab.hash());
            manifest.config = ti.cfg.resolved(Some(&model_cfg));
            save_training(&model, &log, &out, &mut manifest)?;
            report_log(&log);
            println!("temperature {:.5}", model.log_tau.exp());
        }
        Command::Finetune {
            records,
            val,
            vocab,
            out,
            init,
            train,
        } => {
            let ti = training_inputs(&records, &vocab, init.as_deref(), &train, &mut manifest)?;
            let model_cfg = match &ti.init {
                Some(m) => m.config().clone(),
                None => ti.cfg.model_config(ti.vocab.len())?,
            };
            let seqs = encode(&ti.records, &ti.vocab, model_cfg.max_len)?;
            let val_seqs = match &val {
                Some(p) => {
                    manifest.input("val", p);
                    encode(&load_records(p)?, &ti.vocab, model_cfg.max_len)?
                }
                None => Vec::new(),
            };
            let start = match &ti.init {
                Some(m) => ModelInit::Pretrained(m),
                None => ModelInit::Fresh(&model_cfg),
            };
            let (mut model, log) = training::finetune(&ti.cfg.train, start, &seqs, &val_seqs)?;
            model.vocab_hash = Some(ti.vocab.hash());
            manifest.config = ti.cfg.resolved(Some(&model_cfg));
            save_training(&model, &log, &out, &mut manifest)?;
            report_log(&log);
        }
        Command::Predict { model, out } => {
            let (m, records, seqs) = open_model(&model, &mut manifest)?;
            let ps = PredictionSet::from_model(&m, &records, &seqs)?;
            write_text(&out, &eval::predictions_csv(&ps)?)?;
            manifest.output("predictions", &out);
            println!("{} predictions", ps.len());
        }
        Command::Eval { model, out_dir } => {
            let (m, records, seqs) = open_model(&model, &mut manifest)?;
            let ps = PredictionSet::from_model(&m, &records, &seqs)?;
            let groups = group_duplicates(&records);
            let summary = evaluate(&ps, &groups)?;
            print!("{}", summary_table(&summary));
            let dir = match out_dir {
                Some(d) => d,
                None => model.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let stem = model
                .checkpoint
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let parity = dir.join(format!("{stem}.parity.csv"));
            let metrics = dir.join(format!("{stem}.metrics.csv"));
            write_text(&parity, &eval::parity_csv(&ps)?)?;
            write_text(&metrics, &metrics_csv(&summary))?;
            manifest.output("parity", &parity);
            manifest.output("metrics", &metrics);
        }
        Command::AnalyzeAttention { model, out } => {
            let (m, _, seqs) = open_model(&model, &mut manifest)?;
            let report = eval::sectional_attention(&m, &seqs)?;
            write_text(&out, &report.to_csv()?)?;
            manifest.output("attention", &out);
            println!(
                "<s> {:.4}  adsorbate {:.4}  catalyst {:.4}  configuration {:.4}",
                report.self_token, report.adsorbate, report.catalyst, report.configuration
            );
        }
        Command::AnalyzeDuplicates {
            records,
            out,
            checkpoint,
            vocab,
        } => {
            let recs = load_records(&records)?;
            manifest.input("records", &records);
            let groups = group_duplicates(&recs);
            let mut csv = String::from("group,size,system_ids,text\n");
            for (g, grp) in groups.groups.iter().enumerate().filter(|(_, g)| g.is_duplicate()) {
                let ids: Vec<&str> = grp.members.iter().map(|&i| recs[i].system_id.as_str()).collect();
                let _ = writeln!(
                    csv,
                    "{g},{},{},\"{}\"",
                    grp.size(),
                    ids.join(";"),
                    grp.text.replace('"', "\"\"")
                );
            }
            let dup_records: usize = groups.duplicates().map(|g| g.size()).sum();
            println!(
                "{} records, {} distinct texts, {} duplicate groups covering {} records",
                recs.len(),
                groups.groups.len(),
                groups.duplicates().count(),
                dup_records
            );
            if let (Some(ck), Some(v)) = (checkpoint, vocab) {
                let inputs = ModelInputs {
                    checkpoint: ck,
                    records: records.clone(),
                    vocab: v,
                };
                let (m, _, seqs) = open_model(&inputs, &mut manifest)?;
                let ps = PredictionSet::from_model(&m, &recs, &seqs)?;
                let b = eval::duplicate_breakdown(&ps, &groups)?;
                let spread = eval::max_within_group_std(&ps, &groups)?;
                println!(
                    "MAE duplicate {} (n={}), unique {} (n={}), max within-group prediction std {spread:e}",
                    fmt_opt(b.mae_duplicate),
                    b.count_duplicate,
                    fmt_opt(b.mae_unique),
                    b.count_unique
                );
            }
            write_text(&out, &csv)?;
            manifest.output("duplicates", &out);
        }
        Command::ExportEmbeddings { model, out } => {
            let (m, records, seqs) = open_model(&model, &mut manifest)?;
            eval::export_embeddings(&m, &records, &seqs, &out)?;
            manifest.output("embeddings", &out);
            println!("{} embeddings of width {}", records.len(), m.config().d_model);
        }
    }
    manifest.finish()
}

fn report_log(log: &[LogEntry]) {
    if let Some(last) = log.iter().rev().find(|e| e.split == "train") {
        println!(
            "epoch {} step {}: train loss {:.6}{}",
            last.epoch,
            last.step,
            last.loss,
            last.mae.map_or(String::new(), |m| format!(", train MAE {m:.4} eV"))
        );
    }
    if let Some(v) = log.iter().rev().find(|e| e.split == "val") {
        println!("validation MAE {:.4} eV", v.mae.unwrap_or(f64::NAN));
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Headline numbers of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub records: usize,
    pub labeled: usize,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub uncertainty: Option<f64>,
    pub duplicates: eval::DuplicateBreakdown,
}

pub fn evaluate(ps: &PredictionSet, groups: &adsorbtext::textgen::DuplicateGroups) -> Result<EvalSummary> {
    let (p, y) = ps.labeled();
    let mae = if p.is_empty() { None } else { Some(eval::mae(&p, &y)?) };
    let r2 = eval::r2(&p, &y).ok();
    Ok(EvalSummary {
        records: ps.len(),
        labeled: p.len(),
        mae,
        r2,
        uncertainty: eval::cross_relaxer_uncertainty(ps).ok(),
        duplicates: eval::duplicate_breakdown(ps, groups)?,
    })
}

fn summary_rows(s: &EvalSummary) -> Vec<(&'static str, String)> {
    let d = &s.duplicates;
    vec![
        ("records", s.records.to_string()),
        ("labeled", s.labeled.to_string()),
        ("mae_ev", fmt_opt(s.mae)),
        ("r2", fmt_opt(s.r2)),
        ("relaxer_uncertainty_ev", fmt_opt(s.uncertainty)),
        ("mae_duplicate_ev", fmt_opt(d.mae_duplicate)),
        ("count_duplicate", d.count_duplicate.to_string()),
        ("mae_unique_ev", fmt_opt(d.mae_unique)),
        ("count_unique", d.count_unique.to_string()),
    ]
}

pub fn summary_table(s: &EvalSummary) -> String {
    let mut out = String::new();
    for (k, v) in summary_rows(s) {
        let _ = writeln!(out, "{k:<24} {v:>12}");
    }
    out
}

fn metrics_csv(s: &EvalSummary) -> String {
    let mut out = String::from("metric,value\n");
    let exact: BTreeMap<&str, Option<f64>> = [
        ("mae_ev", s.mae),
        ("r2", s.r2),
        ("relaxer_uncertainty_ev", s.uncertainty),
        ("mae_duplicate_ev", s.duplicates.mae_duplicate),
        ("mae_unique_ev", s.duplicates.mae_unique),
    ]
    .into_iter()
    .collect();
    for (k, v) in summary_rows(s) {
        let value = match exact.get(k) {
            Some(x) => x.map(eval::fmt_f64).unwrap_or_default(),
            None => v,
        };
        let _ = writeln!(out, "{k},{value}");
    }
    out
}
