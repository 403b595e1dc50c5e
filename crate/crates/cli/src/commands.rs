use std::fs;
use std::path::{Path, PathBuf};

use hls_core::bundle::{
    checkpoint_kind, load_detector, load_encoder, load_pretrain, save_detector, save_pretrain, CheckpointKind,
};
use hls_core::corpus::{
    class_stats, convert_bigvul_csv, load_corpus, save_corpus, split, truncation_stats, CorpusStats, FunctionSample,
};
use hls_core::finetune::{
    inverse_frequency_weights, predict, predict_batch, Detector, FinetuneLossConfig, FinetuneSchedule,
};
use hls_core::hls_model::{HlsModel, ModelConfig};
use hls_core::metrics::{evaluate_reports, export_heatmap, topk_curve_csv, PredictionReport};
use hls_core::pretrain::{pretrain_run, MspConfig, PretrainModel, PretrainSchedule, MAX_DECODE_LEN};
use hls_core::segmenter::{encode, CTokenizer, EncodedSample, Vocab};
use hls_core::tensor::AdamWConfig;
use hls_core::train::write_loss_csv;
use hls_core::{finetune, Detector64, HlsError, PretrainModel64, TrainState64};
use serde::Serialize;

use crate::config::{EvalSplit, RunConfig};
use crate::CliError;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

fn read_corpus(cfg: &RunConfig) -> Result<Vec<FunctionSample>, CliError> {
    let path = cfg.corpus_path()?;
    if !path.exists() {
        return Err(CliError::Usage(format!("corpus {} does not exist", path.display())));
    }
    let corpus = load_corpus(path).map_err(CliError::usage)?;
    if corpus.is_empty() {
        return Err(CliError::Usage(format!("corpus {} is empty", path.display())));
    }
    Ok(corpus)
}

fn build_vocab(cfg: &RunConfig, samples: &[FunctionSample]) -> Result<Vocab, CliError> {
    Vocab::build(samples.iter().map(|s| s.code.as_str()), &CTokenizer, cfg.max_vocab, cfg.min_freq).map_err(CliError::usage)
}

fn encode_all(samples: &[FunctionSample], vocab: &Vocab, m_len: usize) -> Result<Vec<EncodedSample>, CliError> {
    let enc: Vec<EncodedSample> = samples
        .iter()
        .map(|s| encode(s, vocab, &CTokenizer, m_len))
        .collect::<hls_core::Result<_>>()
        .map_err(CliError::usage)?;
    let truncated = enc.iter().filter(|e| e.truncated).count();
    if truncated > 0 {
        log::warn!("{truncated} of {} samples truncated to {m_len} tokens", enc.len());
    }
    Ok(enc)
}

fn model_config(cfg: &RunConfig, vocab_size: usize) -> ModelConfig {
    let mut m = ModelConfig::new(cfg.encoder(vocab_size), cfg.m_len, cfg.t2s);
    m.pooling = cfg.pooling;
    m
}

fn optimizer(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        learning_rate: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

fn check_encoder_config(cfg: &RunConfig, found: &ModelConfig) {
    if found.m_len != cfg.m_len || found.t2s != cfg.t2s {
        log::warn!(
            "checkpoint model uses m_len {} and t2s {}; those override the requested {} and {}",
            found.m_len,
            found.t2s,
            cfg.m_len,
            cfg.t2s
        );
    }
}

/// Runtime errors keep exit code 1; invalid inputs found while training
/// (bad samples, capacity) are usage errors.
fn training_error(e: HlsError) -> CliError {
    match e {
        HlsError::Capacity { .. } | HlsError::Config(_) | HlsError::EmptyCorpus => CliError::usage(e),
        other => CliError::runtime(other),
    }
}

pub fn cmd_convert(cfg: &RunConfig) -> Result<(), CliError> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| CliError::Usage("convert requires --input".into()))?;
    if !input.exists() {
        return Err(CliError::Usage(format!("input {} does not exist", input.display())));
    }
    let out = cfg.out_dir()?;
    cfg.echo()?;
    let (samples, report) = convert_bigvul_csv(input).map_err(CliError::usage)?;
    save_corpus(&out.join("corpus.jsonl"), &samples).map_err(CliError::runtime)?;
    write_json(&out.join("conversion.json"), &report)?;
    println!("converted {} records, skipped {}", report.converted, report.skipped.len());
    Ok(())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = read_corpus(cfg)?;
    let stats = CorpusStats {
        classes: class_stats(&corpus),
        truncation: truncation_stats(&corpus, &CTokenizer, &crate::config::M_LENS),
    };
    print!("{}", stats.to_text());
    if cfg.out.is_some() {
        cfg.echo()?;
        write_json(&cfg.out_dir()?.join("stats.json"), &stats)?;
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let corpus = read_corpus(cfg)?;
    let msp = MspConfig {
        max_decode_len: MAX_DECODE_LEN,
        reduction: cfg.msp_reduction,
        feed_statement: cfg.feed_statement,
    };
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let (vocab, mut pm, mut state): (Vocab, PretrainModel64, TrainState64) = if cfg.resume {
        let from = cfg.checkpoint.clone().unwrap_or_else(|| ckpt_dir.clone());
        let c = load_pretrain::<f64>(&from).map_err(CliError::usage)?;
        let state = c
            .state
            .ok_or_else(|| CliError::Usage(format!("{} holds no training state to resume", from.display())))?;
        (c.vocab, c.model, state)
    } else if let Some(from) = &cfg.checkpoint {
        let c = load_pretrain::<f64>(from).map_err(CliError::usage)?;
        (c.vocab, c.model, TrainState64::new(optimizer(cfg)))
    } else {
        let vocab = build_vocab(cfg, &corpus)?;
        let pm = PretrainModel::new(model_config(cfg, vocab.len()), &msp, cfg.seed).map_err(CliError::usage)?;
        (vocab, pm, TrainState64::new(optimizer(cfg)))
    };
    check_encoder_config(cfg, &pm.encoder.config);
    cfg.echo()?;
    let enc = encode_all(&corpus, &vocab, pm.encoder.config.m_len)?;

    let schedule = PretrainSchedule {
        mlm_steps: cfg.mlm_steps,
        msp_steps: cfg.steps,
        batch_size: cfg.batch,
        optimizer: state.optimizer.config,
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
        msp,
        mask_fraction: cfg.mask_fraction,
    };
    let result = pretrain_run(&enc, &mut pm, &schedule, &mut state, |m, s| {
        save_pretrain(&ckpt_dir, &vocab, m, &msp, Some(s))
    });
    write_loss_csv(&out.join("loss.csv"), &state.history).map_err(CliError::runtime)?;
    result.map_err(training_error)?;
    save_pretrain(&ckpt_dir, &vocab, &pm, &msp, Some(&state)).map_err(CliError::runtime)?;
    let last = state.history.last();
    println!(
        "pretrained {} steps; final loss {}; checkpoint {}",
        state.step,
        last.map_or("n/a".into(), |r| format!("{:.4} ({:.4} per token)", r.loss, r.loss_per_token)),
        ckpt_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FinetuneMetrics {
    best_f1: Option<f64>,
    best_epoch: Option<usize>,
    monitored_split: &'static str,
    epochs: Vec<finetune::EpochSummary>,
    evaluation: hls_core::metrics::MetricsReport,
}

fn truth(enc: &[EncodedSample]) -> Vec<(u8, Vec<usize>)> {
    enc.iter().map(|e| (e.label, e.vulnerable_lines())).collect()
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let corpus = read_corpus(cfg)?;
    let splits = split(&corpus, &cfg.split_spec()).map_err(CliError::usage)?;
    if splits.train.is_empty() {
        return Err(CliError::Usage("training split is empty".into()));
    }
    let last_dir = out.join(LAST_DIR);
    let best_dir = out.join(BEST_DIR);
    let (vocab, mut det, mut state): (Vocab, Detector64, TrainState64) = if cfg.resume {
        let from = cfg.checkpoint.clone().unwrap_or_else(|| last_dir.clone());
        let c = load_detector::<f64>(&from).map_err(CliError::usage)?;
        let state = c
            .state
            .ok_or_else(|| CliError::Usage(format!("{} holds no training state to resume", from.display())))?;
        (c.vocab, c.detector, state)
    } else if let Some(from) = &cfg.checkpoint {
        match checkpoint_kind(from).map_err(CliError::usage)? {
            CheckpointKind::Pretrain => {
                let (vocab, encoder) = load_encoder::<f64>(from).map_err(CliError::usage)?;
                let d_f = cfg.head_hidden.unwrap_or(encoder.hidden());
                (vocab, Detector::new(encoder, d_f, cfg.seed), TrainState64::new(optimizer(cfg)))
            }
            CheckpointKind::Detector => {
                let c = load_detector::<f64>(from).map_err(CliError::usage)?;
                (c.vocab, c.detector, TrainState64::new(optimizer(cfg)))
            }
        }
    } else {
        let vocab = build_vocab(cfg, &splits.train)?;
        let encoder = HlsModel::new(model_config(cfg, vocab.len()), cfg.seed).map_err(CliError::usage)?;
        let d_f = cfg.head_hidden.unwrap_or(encoder.hidden());
        (vocab, Detector::new(encoder, d_f, cfg.seed), TrainState64::new(optimizer(cfg)))
    };
    check_encoder_config(cfg, &det.encoder.config);
    det.heads.threshold = cfg.threshold;
    cfg.echo()?;
    let m_len = det.encoder.config.m_len;
    let train = encode_all(&splits.train, &vocab, m_len)?;
    let eval = encode_all(&splits.evaluation, &vocab, m_len)?;

    let schedule = FinetuneSchedule {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        optimizer: state.optimizer.config,
        seed: cfg.seed,
        loss: FinetuneLossConfig {
            lambda_fine: cfg.lambda_fine,
            class_weights: cfg
                .class_weights
                .then(|| inverse_frequency_weights(&train.iter().map(|e| e.label).collect::<Vec<_>>())),
        },
        freeze_encoder: cfg.freeze_encoder,
        patience: cfg.patience,
    };
    let result = finetune::finetune_run(&train, &eval, &mut det, &schedule, &mut state, |d, s, summary| {
        save_detector(&last_dir, &vocab, d, Some(s))?;
        if summary.improved {
            save_detector(&best_dir, &vocab, d, Some(s))?;
        }
        Ok(())
    });
    write_loss_csv(&out.join("loss.csv"), &state.history).map_err(CliError::runtime)?;
    let summaries = result.map_err(training_error)?;
    save_detector(&last_dir, &vocab, &det, Some(&state)).map_err(CliError::runtime)?;
    if !best_dir.exists() {
        save_detector(&best_dir, &vocab, &det, Some(&state)).map_err(CliError::runtime)?;
    }

    let best = load_detector::<f64>(&best_dir).map_err(CliError::runtime)?.detector;
    let (monitored, name) = if eval.is_empty() { (&train, "train") } else { (&eval, "evaluation") };
    let reports = predict_batch(monitored, &best, cfg.k[0], cfg.batch).map_err(CliError::runtime)?;
    let evaluation = evaluate_reports(&reports, &truth(monitored), &cfg.k, cfg.population).map_err(CliError::runtime)?;
    println!(
        "fine-tuned to epoch {}; eval F1 {:.4} on {} {name} samples; best checkpoint {}",
        state.epoch,
        evaluation.classification.f1,
        monitored.len(),
        best_dir.display()
    );
    write_json(
        &out.join("metrics.json"),
        &FinetuneMetrics {
            best_f1: state.best.map(|b| b.0),
            best_epoch: state.best.map(|b| b.1),
            monitored_split: name,
            epochs: summaries,
            evaluation,
        },
    )
}

/// One line of `predictions.jsonl`: the report plus the ground truth it was
/// scored against.
#[derive(Serialize, serde::Deserialize)]
pub struct ScoredPrediction {
    #[serde(flatten)]
    pub report: PredictionReport,
    pub label: u8,
    pub vulnerable_lines: Vec<usize>,
}

fn select_split(cfg: &RunConfig, corpus: Vec<FunctionSample>) -> Result<Vec<FunctionSample>, CliError> {
    if cfg.eval_split == EvalSplit::All {
        return Ok(corpus);
    }
    let s = split(&corpus, &cfg.split_spec()).map_err(CliError::usage)?;
    Ok(match cfg.eval_split {
        EvalSplit::Train => s.train,
        EvalSplit::Evaluation => s.evaluation,
        _ => s.test,
    })
}

fn detector_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.checkpoint_path()?;
    if !dir.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", dir.display())));
    }
    Ok(dir.to_path_buf())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let ckpt = load_detector::<f64>(&detector_dir(cfg)?).map_err(CliError::usage)?;
    let mut det = ckpt.detector;
    det.heads.threshold = cfg.threshold;
    let samples = select_split(cfg, read_corpus(cfg)?)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("the {} split is empty", cfg.eval_split)));
    }
    cfg.echo()?;
    let enc = encode_all(&samples, &ckpt.vocab, det.encoder.config.m_len)?;
    let reports = predict_batch(&enc, &det, cfg.k[0], cfg.batch).map_err(training_error)?;
    let truth = truth(&enc);
    let metrics = evaluate_reports(&reports, &truth, &cfg.k, cfg.population).map_err(CliError::runtime)?;

    let mut lines = String::new();
    for (r, (label, lines_)) in reports.into_iter().zip(truth) {
        let p = ScoredPrediction {
            report: r,
            label,
            vulnerable_lines: lines_,
        };
        lines.push_str(&serde_json::to_string(&p).expect("serializes"));
        lines.push('\n');
    }
    write_file(&out.join("predictions.jsonl"), &lines)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_file(&out.join("topk.csv"), &topk_curve_csv(&metrics.topk).map_err(CliError::runtime)?)?;
    let c = &metrics.classification;
    println!(
        "{} {} samples: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4}",
        metrics.samples, cfg.eval_split, c.accuracy, c.precision, c.recall, c.f1
    );
    for p in &metrics.topk {
        println!("top-{}% accuracy {:.4} ({} samples, {} excluded)", p.k, p.accuracy, p.counted, p.excluded);
    }
    Ok(())
}

pub fn cmd_explain(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let id = cfg
        .id
        .as_deref()
        .ok_or_else(|| CliError::Usage("explain requires --id".into()))?;
    let ckpt = load_detector::<f64>(&detector_dir(cfg)?).map_err(CliError::usage)?;
    let mut det = ckpt.detector;
    det.heads.threshold = cfg.threshold;
    let corpus = read_corpus(cfg)?;
    let sample = corpus
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Usage(format!("no sample with id {id:?} in the corpus")))?;
    cfg.echo()?;
    let enc = encode_all(std::slice::from_ref(sample), &ckpt.vocab, det.encoder.config.m_len)?;
    let report = predict(&enc[0], &det, cfg.k[0]).map_err(training_error)?;
    let csv = export_heatmap(&report, &sample.code).map_err(CliError::runtime)?;
    write_file(&out.join("heatmap.csv"), &csv)?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{id}: p_vul {:.4}, coarse label {}, {} lines ranked; heatmap {}",
        report.p_vul,
        report.coarse_label,
        report.statements.len(),
        out.join("heatmap.csv").display()
    );
    Ok(())
}
