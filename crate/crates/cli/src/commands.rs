//! Subcommand implementations.

use crate::server::{AppState, ClassifyResponse};
use crate::{Command, FormatArg};
use cabert::data::{class_stats, load_dataset, save_dataset_csv, split, synthesize, window, DataFormat};
use cabert::error::{Error, Result};
use cabert::metrics::format_report;
use cabert::model::{
    checkpoint_id, load_checkpoint, predict, CaBertModel, ModelConfig, Prediction,
};
use cabert::tokenizer::{build_vocab, encode, Vocabulary};
use cabert::trainer::{encode_examples, evaluate, train, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

fn resolve_format(format: FormatArg, path: &Path) -> DataFormat {
    match format {
        FormatArg::Csv => DataFormat::Csv,
        FormatArg::Jsonl => DataFormat::Jsonl,
        FormatArg::Auto => match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => DataFormat::Jsonl,
            _ => DataFormat::Csv,
        },
    }
}

fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn history_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".history.json");
    PathBuf::from(s)
}

/// Everything a finished training run leaves behind next to the checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub k: usize,
    pub train_fraction: f64,
    pub history: TrainHistory,
}

fn load_model_bundle(checkpoint: &Path) -> Result<(CaBertModel<f32>, Vocabulary, String)> {
    let model = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(&vocab_path(checkpoint))?;
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary size {} does not match checkpoint vocab_size {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let id = checkpoint_id(checkpoint)?;
    Ok((model, vocab, id))
}

fn classify_one(
    model: &CaBertModel<f32>,
    vocab: &Vocabulary,
    model_id: &str,
    turns: &[String],
) -> Result<ClassifyResponse> {
    let seq = encode(turns, vocab, model.config.max_len)?;
    let logits = model.forward_eval(&[&seq])?;
    let Prediction { label, p_context } = predict(&logits)?[0];
    Ok(ClassifyResponse {
        fetch_context: label,
        p_context,
        model_id: model_id.to_string(),
    })
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            n,
            seed,
            out,
            context_rate,
        } => cmd_synth(n as usize, seed, &out, context_rate),
        Command::Train {
            data,
            format,
            config,
            out,
            k,
            train_fraction,
            vocab_size,
            min_freq,
            d_model,
            n_heads,
            n_layers,
            d_ff,
            max_len,
            dropout,
        } => {
            let train_config = match config {
                Some(path) => TrainConfig::from_file(&path)?,
                None => TrainConfig::default(),
            };
            let model_config = ModelConfig {
                vocab_size: 0, // filled in after the vocabulary is built
                d_model,
                n_heads,
                n_layers,
                d_ff,
                max_len,
                dropout_p: dropout,
                n_classes: 2,
            };
            cmd_train(
                &data,
                resolve_format(format, &data),
                train_config,
                model_config,
                &out,
                k,
                train_fraction,
                vocab_size,
                min_freq,
            )
        }
        Command::Eval {
            checkpoint,
            data,
            format,
            k,
            json,
        } => cmd_eval(&checkpoint, &data, resolve_format(format, &data), k, json),
        Command::Predict {
            checkpoint,
            json,
            turns,
        } => cmd_predict(&checkpoint, &turns, json),
        Command::Serve { checkpoint, bind } => cmd_serve(&checkpoint, &bind),
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path, context_rate: f64) -> Result<()> {
    let records = synthesize(n, seed, context_rate)?;
    save_dataset_csv(&records, out)?;
    print!("{}", class_stats(&records));
    log::info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    format: DataFormat,
    train_config: TrainConfig,
    mut model_config: ModelConfig,
    out: &Path,
    k: usize,
    train_fraction: f64,
    vocab_size: usize,
    min_freq: usize,
) -> Result<()> {
    let records = load_dataset(data, format)?;
    let (train_records, val_records) = split(&records, train_fraction, train_config.seed)?;
    // The vocabulary sees the training fold only; validation tokens the
    // model has never seen map to [UNK].
    let corpus: Vec<&str> = train_records.iter().map(|r| r.chat.as_str()).collect();
    let vocab = build_vocab(&corpus, vocab_size, min_freq)?;
    model_config.vocab_size = vocab.size();
    model_config.validate()?;

    let train_set = encode_examples(&window(&train_records, k), &vocab, model_config.max_len)?;
    let val_set = encode_examples(&window(&val_records, k), &vocab, model_config.max_len)?;
    println!(
        "training on {} examples, validating on {} ({} tokens in vocabulary)",
        train_set.len(),
        val_set.len(),
        vocab.size()
    );

    let model = CaBertModel::init(model_config.clone(), train_config.seed)?;
    let (best, history) = train(model, &train_set, &val_set, &train_config, out)?;
    for (i, epoch) in history.epochs.iter().enumerate() {
        println!(
            "epoch {}/{}: train_loss {:.4}  val_accuracy {:.4}{}",
            i + 1,
            history.epochs.len(),
            epoch.train_loss,
            epoch.validation.accuracy,
            if i == history.best_epoch { "  (best)" } else { "" }
        );
    }
    println!();
    print!(
        "{}",
        format_report(&history.epochs[history.best_epoch].validation)
    );

    vocab.save(&vocab_path(out))?;
    let record = TrainRecord {
        train_config,
        model_config: best.config.clone(),
        k,
        train_fraction,
        history,
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::InvalidArgument(format!("history serialization failed: {e}")))?;
    std::fs::write(history_path(out), json)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, format: DataFormat, k: usize, json: bool) -> Result<()> {
    let (model, vocab, _) = load_model_bundle(checkpoint)?;
    let records = load_dataset(data, format)?;
    let examples = encode_examples(&window(&records, k), &vocab, model.config.max_len)?;
    let report = evaluate(&model, &examples)?;
    if json {
        let line = serde_json::to_string(&report)
            .map_err(|e| Error::InvalidArgument(format!("report serialization failed: {e}")))?;
        println!("{line}");
    } else {
        print!("{}", format_report(&report));
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, turns: &[String], json: bool) -> Result<()> {
    if turns.last().is_none_or(|t| t.trim().is_empty()) {
        return Err(Error::InvalidArgument(
            "predict needs at least one turn and a non-empty current turn".into(),
        ));
    }
    let (model, vocab, model_id) = load_model_bundle(checkpoint)?;
    let response = classify_one(&model, &vocab, &model_id, turns)?;
    if json {
        let line = serde_json::to_string(&response)
            .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
        println!("{line}");
    } else {
        println!(
            "fetch_context={} p_context={:.6} model_id={}",
            response.fetch_context, response.p_context, response.model_id
        );
    }
    Ok(())
}

fn cmd_serve(checkpoint: &Path, bind: &str) -> Result<()> {
    let (model, vocab, model_id) = load_model_bundle(checkpoint)?;
    let state = Arc::new(AppState {
        model,
        vocab,
        model_id,
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(crate::server::serve(state, bind))
}
