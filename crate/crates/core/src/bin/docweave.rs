use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use docweave::doc::load_ocr_json;
use docweave::harness::corpus::{load_corpus, load_vocab, save_corpus};
use docweave::harness::train::{inspect_attention, load_pretrained, load_task_model};
use docweave::harness::{eval_run, finetune_run, gen_synthetic_corpus, pretrain_run, Checkpoint, Family, RunConfig, SyntheticSpec};
use docweave::serializer::{layout_order, order_quality, raster_scan_order};

/// Layout-aware document pre-training at desk scale.
///
/// Log level is read from DOCWEAVE_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "docweave", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Raster,
    Layout,
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectOrder {
    Raster,
    Layout,
    File,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory with page images and vocab.txt.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One of single_column, two_column, table, mixed; all families when omitted.
        #[arg(long)]
        family: Option<String>,
        /// Skip writing PNG page images.
        #[arg(long)]
        no_images: bool,
    },
    /// Order the words of one document and score the order against gold.
    Serialize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "layout")]
        method: Method,
        /// Write the permutation as JSON.
        #[arg(long)]
        emit_order: Option<PathBuf>,
    },
    /// Pre-train a fresh model on a corpus directory.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory; defaults to train_data from the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log; standard output when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a task head and report metrics on the evaluation corpus.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pre-trained checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Dump the raw attention scores of one layer and head as CSV.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, value_enum, default_value = "layout")]
        order: InspectOrder,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn log_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout()),
    })
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => bail!("no {what} given on the command line or in the configuration"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            family,
            no_images,
        } => {
            let spec = match family {
                Some(f) => SyntheticSpec::family(f.parse::<Family>()?),
                None => SyntheticSpec::default(),
            };
            let docs = gen_synthetic_corpus(&spec, n, seed)?;
            save_corpus(&out, &docs, &spec.vocab()?, !no_images)?;
            println!("{}", json!({"documents": docs.len(), "out": out}));
        }
        Command::Serialize {
            input,
            method,
            emit_order,
        } => {
            let doc = load_ocr_json(&input)?;
            let order = match method {
                Method::Raster => raster_scan_order(&doc),
                Method::Layout => layout_order(&doc),
            };
            let mut report = json!({"words": doc.len(), "method": order.method});
            if let Some(gold) = &doc.gold_order {
                report["quality"] = serde_json::to_value(order_quality(&order.permutation, gold)?)?;
            }
            if let Some(p) = emit_order {
                let body = json!({"method": order.method, "order": order.permutation});
                std::fs::write(&p, serde_json::to_string_pretty(&body)?).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{report}");
        }
        Command::Pretrain {
            cfg,
            data,
            vocab,
            out,
            log,
        } => {
            let cfg = cfg.load()?;
            let data = required(data, &cfg.train_data, "training data")?;
            let vocab = load_vocab(vocab.as_deref().or(cfg.vocab.as_deref()), &data)?;
            let docs = load_corpus(&data)?;
            let mut sink = log_sink(log.as_deref())?;
            let outcome = pretrain_run(&cfg, &docs, &vocab, Some(&mut *sink))?;
            sink.flush()?;
            outcome.checkpoint(&cfg).save(&out)?;
            eprintln!(
                "{}",
                json!({"initial": outcome.initial, "final": outcome.last, "steps": outcome.steps, "checkpoint": out})
            );
        }
        Command::Finetune {
            cfg,
            init,
            train,
            eval,
            vocab,
            out,
            log,
        } => {
            let cfg = cfg.load()?;
            let train = required(train, &cfg.train_data, "training data")?;
            let eval = required(eval, &cfg.eval_data, "evaluation data")?;
            let vocab = load_vocab(vocab.as_deref().or(cfg.vocab.as_deref()), &train)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let (train_docs, eval_docs) = (load_corpus(&train)?, load_corpus(&eval)?);
            let mut sink = log_sink(log.as_deref())?;
            let outcome = finetune_run(&cfg, init.as_ref(), &train_docs, &eval_docs, &vocab, Some(&mut *sink))?;
            sink.flush()?;
            if let Some(p) = out {
                outcome.checkpoint(&cfg).save(&p)?;
            }
            if log.is_some() {
                println!("{}", serde_json::to_string(&outcome.metrics)?);
            }
        }
        Command::Eval { checkpoint, data, vocab } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, store, model) = load_task_model(&ck)?;
            let vocab = load_vocab(vocab.as_deref(), &data)?;
            let metrics = eval_run(&cfg, &store, &model, &load_corpus(&data)?, &vocab)?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::InspectAttn {
            checkpoint,
            input,
            vocab,
            layer,
            head,
            order,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, store, encoder) = if ck.labels.is_empty() {
                let (cfg, store, model) = load_pretrained(&ck)?;
                (cfg, store, model.encoder)
            } else {
                let (cfg, store, model) = load_task_model(&ck)?;
                (cfg, store, model.encoder)
            };
            let doc = load_ocr_json(&input)?;
            let perm = match order {
                InspectOrder::Raster => raster_scan_order(&doc).permutation,
                InspectOrder::Layout => layout_order(&doc).permutation,
                InspectOrder::File => (0..doc.len()).collect(),
            };
            let vocab = docweave::embedder::Vocab::load(&vocab)?;
            let csv = inspect_attention(&store, &encoder, &doc, &perm, &vocab, cfg.max_text_len, layer, head)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DOCWEAVE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
