//! `xstitch`: generate synthetic corpora, train the cross-stitched encoder,
//! evaluate checkpoints, predict, and verify gradients.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, RunManifest};
use xstitch_core::data::gen::{gen_corpus, Task};
use xstitch_core::data::{batch_pad, decode_tags, save_corpus, RichTag, ROLE_AGENT};
use xstitch_core::data::io::load_records;
use xstitch_core::encoders::Vocab;
use xstitch_core::error::{Error, Result};
use xstitch_core::eval::evaluate;
use xstitch_core::grad_check::{grad_check, GradCheckOpts};
use xstitch_core::model::{batch_forward_backward, batch_loss, Model, Prediction};
use xstitch_core::params::ParamStore;
use xstitch_core::rng::Rng;
use xstitch_core::training::{
    load_checkpoint_into, save_checkpoint, CheckpointMeta, Trainer,
};

#[derive(Parser)]
#[command(name = "xstitch", version, about = "Cross-stitched speech/text encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test JSON-lines plus frames).
    GenData {
        #[arg(long, value_parser = Task::parse)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per a config file; writes best checkpoint, history, manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override config values, e.g. --set train.lr=0.001
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on one dataset split; prints metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write metrics.json and a run manifest here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a checkpoint over an input JSONL file; prints rich text or labels.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Write head-averaged text-over-speech attention maps (JSONL).
        #[arg(long)]
        attn_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { task, n, seed, out } => cmd_gen_data(task, n, seed, &out),
        Command::Train { config, sets } => cmd_train(&config, &sets),
        Command::Eval {
            ckpt,
            data,
            split,
            out_dir,
        } => cmd_eval(&ckpt, &data, &split, out_dir.as_deref()),
        Command::Predict {
            ckpt,
            input,
            attn_out,
            out,
        } => cmd_predict(&ckpt, &input, attn_out.as_deref(), out.as_deref()),
        Command::GradCheck { config, tol, step } => cmd_grad_check(&config, tol, step),
    }
}

fn cmd_gen_data(task: Task, n: usize, seed: u64, out: &Path) -> Result<()> {
    let corpus = gen_corpus(task, n, seed)?;
    save_corpus(out, &corpus)?;
    let manifest = RunManifest::new(
        "gen-data",
        serde_json::json!({ "task": task.as_str(), "n": n, "seed": seed }),
        seed,
    );
    manifest.write(out)?;
    println!(
        "wrote {} train / {} val / {} test utterances to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn build_vocab(train: &[xstitch_core::data::Utterance], cap: Option<usize>) -> Vocab {
    Vocab::build(
        train.iter().flat_map(|u| u.tokens.iter().map(|s| s.as_str())),
        cap,
    )
}

fn cmd_train(config_path: &Path, sets: &[String]) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    for kv in sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    cfg.validate()?;

    let train_set = load_records(&cfg.data_dir.join("train.jsonl"))?;
    let val_set = load_records(&cfg.data_dir.join("val.jsonl"))?;
    let vocab = build_vocab(&train_set, cfg.vocab_cap);

    let mut model_cfg = cfg.model_config();
    model_cfg.vocab_size = vocab.len();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.seed);
    let model = Model::build(&mut store, model_cfg.clone(), &mut rng)?;

    let trainer = Trainer::new(
        model,
        store,
        vocab.clone(),
        train_set,
        val_set,
        cfg.train.clone(),
    )?;
    let outcome = trainer.train()?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ckpt_path = cfg.out_dir.join("best.ckpt");
    let meta = CheckpointMeta {
        config: model_cfg,
        train_config: cfg.train.clone(),
        vocab: vocab.tokens().to_vec(),
        step: outcome.best_step,
        val_metric: Some(outcome.best_val_metric),
        manifest: Vec::new(),
    };
    save_checkpoint(&ckpt_path, &outcome.best_store, &meta)?;

    let history_path = cfg.out_dir.join("history.json");
    let history_json = serde_json::to_string_pretty(&outcome.history)?;
    std::fs::write(&history_path, history_json).map_err(|e| Error::io(&history_path, e))?;

    let mut manifest = RunManifest::new("train", &cfg, cfg.seed);
    manifest.hash_input("config", config_path)?;
    manifest.hash_input("train.jsonl", &cfg.data_dir.join("train.jsonl"))?;
    manifest.hash_input("val.jsonl", &cfg.data_dir.join("val.jsonl"))?;
    manifest.write(&cfg.out_dir)?;

    println!(
        "trained {} epochs; best val metric {:.4} at step {}; checkpoint {}",
        outcome.history.len(),
        outcome.best_val_metric,
        outcome.best_step,
        ckpt_path.display()
    );
    Ok(())
}

/// Rebuild the model wiring from a checkpoint and restore its weights.
fn load_model(ckpt: &Path) -> Result<(Model, ParamStore, Vocab, CheckpointMeta)> {
    let (_, meta_probe) = xstitch_core::training::load_checkpoint(ckpt)?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let model = Model::build(&mut store, meta_probe.config.clone(), &mut rng)?;
    let meta = load_checkpoint_into(ckpt, &mut store)?;
    let mut vocab = Vocab::from_tokens(meta.vocab.clone());
    vocab.reindex();
    Ok((model, store, vocab, meta))
}

fn cmd_eval(ckpt: &Path, data: &Path, split: &str, out_dir: Option<&Path>) -> Result<()> {
    let (model, store, vocab, meta) = load_model(ckpt)?;
    let split_path = data.join(format!("{split}.jsonl"));
    let utts = load_records(&split_path)?;
    let report = evaluate(&model, &store, &vocab, &utts)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");

    if let Some(out_dir) = out_dir {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.json");
        std::fs::write(&metrics_path, &json).map_err(|e| Error::io(&metrics_path, e))?;
        let mut manifest = RunManifest::new(
            "eval",
            serde_json::json!({
                "ckpt": ckpt.display().to_string(),
                "split": split,
                "task": meta.config.task.as_str(),
                "fusion": meta.config.fusion.as_str(),
            }),
            meta.train_config.seed,
        );
        manifest.hash_input("checkpoint", ckpt)?;
        manifest.hash_input("split", &split_path)?;
        manifest.write(out_dir)?;
    }
    Ok(())
}

fn format_roles(tokens: &[String], roles: &[usize]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut start = 0;
    for i in 1..=roles.len() {
        if i == roles.len() || roles[i] != roles[start] {
            let speaker = if roles[start] == ROLE_AGENT { "A" } else { "C" };
            parts.push(format!("{speaker}: {}", tokens[start..i].join(" ")));
            start = i;
        }
    }
    parts.join(" | ")
}

fn cmd_predict(
    ckpt: &Path,
    input: &Path,
    attn_out: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (model, store, vocab, meta) = load_model(ckpt)?;
    let utts = load_records(input)?;
    let mut lines = Vec::new();
    let mut attn_lines = Vec::new();

    for utt in &utts {
        let batch = batch_pad(std::slice::from_ref(utt), &vocab)?;
        let tokens = batch.utt_tokens(0);
        let frames = batch.utt_frames(0);
        let line = if meta.config.task.is_tagging() {
            let pred = model.predict_tags(&store, frames.as_ref(), &tokens)?;
            match meta.config.task {
                Task::Punct => {
                    let tags: Vec<RichTag> = pred
                        .iter()
                        .map(|&id| RichTag::from_id(id))
                        .collect::<Result<_>>()?;
                    format!("{}\t{}", utt.id, decode_tags(&utt.tokens, &tags)?)
                }
                _ => format!("{}\t{}", utt.id, format_roles(&utt.tokens, &pred)),
            }
        } else {
            let token_arg = if tokens.len() > 1 { Some(tokens.as_slice()) } else { None };
            match model.predict_class(&store, frames.as_ref(), token_arg)? {
                Prediction::Class(c) => match meta.config.task {
                    Task::Sentiment => {
                        format!("{}\t{} (sentiment {})", utt.id, c, c as i64 - 3)
                    }
                    _ => format!("{}\t{}", utt.id, c),
                },
                Prediction::Pair(i, e) => format!("{}\tintent={i} entity={e}", utt.id),
            }
        };
        lines.push(line);

        if attn_out.is_some() {
            if let Some(frames) = &frames {
                let map = model.alignment_map(
                    &store,
                    frames,
                    &tokens,
                    xstitch_core::crossstitch::Direction::TextFromSpeech,
                )?;
                let rows: Vec<Vec<f64>> = (0..map.rows()).map(|i| map.row(i).to_vec()).collect();
                attn_lines.push(serde_json::to_string(&serde_json::json!({
                    "id": utt.id,
                    "direction": "text_from_speech",
                    "rows": rows,
                }))?);
            }
        }
    }

    let text = lines.join("\n") + "\n";
    match out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{text}"),
    }
    if let Some(path) = attn_out {
        std::fs::write(path, attn_lines.join("\n") + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_grad_check(config_path: &Path, tol: f64, step: f64) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let corpus = gen_corpus(cfg.task, 30, cfg.seed)?;
    let vocab = build_vocab(&corpus.train, cfg.vocab_cap);

    let mut model_cfg = cfg.model_config();
    model_cfg.vocab_size = vocab.len();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.seed);
    let model = Model::build(&mut store, model_cfg, &mut rng)?;
    // well-scaled parameters keep true gradients above the relative-error
    // floor where finite differences can certify them
    store.randomize(0.35, &mut rng);

    let batch = batch_pad(&corpus.train[..2], &vocab)?;
    store.zero_grads();
    batch_forward_backward(&model, &mut store, &batch)?;

    let model2 = model.clone();
    let batch2 = batch.clone();
    let opts = GradCheckOpts {
        step,
        tol,
        ..Default::default()
    };
    let report = grad_check(
        move |p: &ParamStore| batch_loss(&model2, p, &batch2),
        &mut store,
        &opts,
    )?;
    for row in &report.rows {
        println!(
            "{} {} max_rel_err {:.3e}",
            if row.pass { "PASS" } else { "FAIL" },
            row.name,
            row.max_rel_err
        );
    }
    if report.all_pass() {
        println!("gradient check passed: {} tensors at tol {tol}", report.rows.len());
        Ok(())
    } else {
        let failed = report.rows.iter().filter(|r| !r.pass).count();
        Err(Error::Config(format!(
            "gradient check failed for {failed} tensor(s) at tol {tol}"
        )))
    }
}
