use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use medst::corpus::{build_sequences, format_sequence_manifest, ingest_manifest, Vocabulary};
use medst::eval_harness::{emit_report, sentence_similarity_eval, temporal_probe, zeroshot_eval, ProbeResult};
use medst::gradcheck::{grad_check, LossSelector};
use medst::model::Model;
use medst::params::ParamStore;
use medst::synthetic::{generate_corpus, layout, parse_prompts, parse_sentence_pairs, GenSpec, LabelTable};
use medst::temporal_consistency::{beta_rows, parse_beta_csv, write_beta_csv, DistanceMode};
use medst::trainer::{train, TrainConfig, TrainingCorpus, FINAL_CHECKPOINT};

#[derive(Parser)]
#[command(name = "medst", version, about = "Multi-view, temporally consistent image-report pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Group a study manifest into per-patient sequences.
    BuildSequences {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        len: usize,
    },
    /// Write a synthetic corpus with known ground truth.
    GenSynthetic {
        /// TOML file with generator settings; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes model.ckpt and metrics.csv into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on consecutive study pairs.
    EvalTemporal {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Blank every lateral view.
        #[arg(long)]
        no_lateral: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paraphrase vs contradiction scoring of report pairs.
    EvalSentence {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Defaults to vocab.txt next to the pairs file.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt-based finding-present classification.
    EvalZeroshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        no_lateral: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a fixture.
    Gradcheck {
        #[arg(long, value_parser = ["global", "local", "fmc", "rmr", "total"])]
        loss: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Write backward distributions of every multi-study sequence as CSV.
    DumpBeta {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_lateral: bool,
    },
    /// Collect probe results (*.json) and beta.csv from --in into report files.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(FINAL_CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> anyhow::Result<(Model, ParamStore)> {
    let path = checkpoint_path(p);
    let (model, store, _) = Model::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, store))
}

fn load_corpus(model: &Model, dir: &Path) -> anyhow::Result<TrainingCorpus> {
    let cfg = model.config();
    let corpus = TrainingCorpus::load(dir, cfg.image_size, cfg.max_text_len, 4)?;
    if corpus.vocab.len() != cfg.vocab_size {
        bail!("corpus vocabulary has {} entries, checkpoint expects {}", corpus.vocab.len(), cfg.vocab_size);
    }
    Ok(corpus)
}

fn emit(result: &ProbeResult, out: Option<&Path>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(result)?;
    println!("{json}");
    if let Some(p) = out {
        fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildSequences { manifest, out, len } => {
            if len == 0 {
                bail!("--len must be at least 1");
            }
            let seqs = build_sequences(&ingest_manifest(&manifest)?, len);
            fs::write(&out, format_sequence_manifest(&seqs)).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} sequences", seqs.len());
        }
        Command::GenSynthetic { spec, out, seed } => {
            let mut gen = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<GenSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => GenSpec::default(),
            };
            if let Some(s) = seed {
                gen.seed = s;
            }
            let studies = generate_corpus(&gen, &out)?;
            eprintln!("{} studies written to {}", studies.len(), out.display());
        }
        Command::Train { config, corpus, out } => {
            let cfg = TrainConfig::load(&config)?;
            let data = TrainingCorpus::load(&corpus, cfg.image_size, cfg.max_text_len, cfg.seq_len)?;
            let outcome = train(&cfg, &data, Some(&out), |row| {
                if row.loss.step % 50 == 0 {
                    eprintln!("step {} total {:.4} lr {:.3e}", row.loss.step, row.loss.total, row.lr);
                }
            })?;
            eprintln!("{} steps, checkpoint {}", outcome.metrics.len(), out.join(FINAL_CHECKPOINT).display());
        }
        Command::EvalTemporal { ckpt, corpus, folds, no_lateral, out } => {
            let (model, store) = load_model(&ckpt)?;
            let data = load_corpus(&model, &corpus)?;
            let labels = LabelTable::load(&corpus.join(layout::LABELS))?;
            emit(&temporal_probe(&model, &store, &data, &labels, folds, !no_lateral)?, out.as_deref())?;
        }
        Command::EvalSentence { ckpt, pairs, vocab, seed, out } => {
            let (model, store) = load_model(&ckpt)?;
            let vocab_path = vocab.unwrap_or_else(|| pairs.with_file_name(layout::VOCAB));
            let vocab = Vocabulary::load(&vocab_path)?;
            let text = fs::read_to_string(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let pairs = parse_sentence_pairs(&text)?;
            emit(&sentence_similarity_eval(&model, &store, &vocab, &pairs, seed)?, out.as_deref())?;
        }
        Command::EvalZeroshot { ckpt, corpus, prompts, no_lateral, out } => {
            let (model, store) = load_model(&ckpt)?;
            let data = load_corpus(&model, &corpus)?;
            let labels = LabelTable::load(&corpus.join(layout::LABELS))?;
            let text = fs::read_to_string(&prompts).with_context(|| format!("reading {}", prompts.display()))?;
            let (pos, neg) = parse_prompts(&text)?;
            emit(&zeroshot_eval(&model, &store, &data, &labels, &pos, &neg, !no_lateral)?, out.as_deref())?;
        }
        Command::Gradcheck { loss, eps, seed } => {
            let selector: LossSelector = loss.parse()?;
            let r = grad_check(selector, seed, eps);
            println!("{selector}: max relative error {:.3e} at {} ({} entries)", r.max_rel_error, r.worst, r.checked);
        }
        Command::DumpBeta { ckpt, corpus, out, no_lateral } => {
            let (model, store) = load_model(&ckpt)?;
            let data = load_corpus(&model, &corpus)?;
            let encoded = medst::trainer::encode_corpus(&model, &store, &data, !no_lateral)?;
            let mut rows = Vec::new();
            for s in encoded.iter().filter(|s| s.images.len() >= 2) {
                for r in beta_rows(&s.features()?, DistanceMode::SquaredEuclidean) {
                    rows.push((s.sequence_id.clone(), r));
                }
            }
            write_beta_csv(&out, &rows)?;
            eprintln!("{} rows", rows.len());
        }
        Command::Report { input, out } => {
            let mut results = Vec::new();
            let mut beta = Vec::new();
            let mut entries: Vec<PathBuf> = fs::read_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for p in entries {
                match p.extension().and_then(|e| e.to_str()) {
                    Some("json") => {
                        let text = fs::read_to_string(&p)?;
                        results.push(serde_json::from_str::<ProbeResult>(&text).with_context(|| format!("parsing {}", p.display()))?);
                    }
                    Some("csv") if p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("beta")) => {
                        beta.extend(parse_beta_csv(&fs::read_to_string(&p)?)?.into_iter().map(|(_, r)| r));
                    }
                    _ => {}
                }
            }
            emit_report(&results, &beta, &out)?;
            eprintln!("{} results, {} beta rows", results.len(), beta.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
