//! The command implementations behind the `patn` binary.
//!
//! Every command writes the effective configuration to
//! `<out>/config.echo.json` next to its outputs.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{build_corpus, load_corpus, sample_triplets, save_corpus, Corpus, Split};
use crate::encoder::{embed_all, init_params, load_checkpoint, save_checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_split, project2d, save_report, write_projection_csv, EvalReport};
use crate::optim::{save_loss_csv, train, EpochLog, TrainOptions};

pub const CONFIG_ECHO: &str = "config.echo.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const LAMBDA_SWEEP_FILE: &str = "lambda_sweep.csv";

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_json())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSummary {
    pub split: Split,
    pub segments: usize,
    pub hours: f64,
}

/// Generates the synthetic corpus into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<SplitSummary>> {
    prepare_out(cfg, out)?;
    let (_, _, corpus) = build_corpus(&cfg.corpus, cfg.seeds.data)?;
    save_corpus(&corpus, out)?;
    let summary: Vec<SplitSummary> = Split::ALL
        .iter()
        .map(|&split| SplitSummary {
            split,
            segments: corpus.split(split).count(),
            hours: corpus.hours(split),
        })
        .collect();
    for s in &summary {
        println!("{:<9} {:>6} segments {:>10.6} h", s.split.name(), s.segments, s.hours);
    }
    Ok(summary)
}

/// Samples triplets from the training split and trains from a fresh
/// initialisation, using only the seeds in `cfg`.
pub fn train_model(cfg: &RunConfig, corpus: &Corpus) -> Result<(EncoderParams, Vec<EpochLog>)> {
    cfg.validate()?;
    let enc = cfg.model.encoder_config(corpus.num_classes);
    let params = init_params(enc, cfg.seeds.init)?;
    let triplets = sample_triplets(
        corpus,
        Split::Train,
        cfg.schedule.num_triplets,
        cfg.seeds.data,
        cfg.schedule.sampling,
    )?;
    let opts = TrainOptions {
        loss: cfg.loss.clone(),
        adam: cfg.optimizer.clone(),
        schedule: cfg.schedule.clone(),
        shuffle_seed: cfg.seeds.shuffle,
        clip_norm: cfg.model.clip_norm,
        detach_ce: false,
    };
    train(corpus, &triplets, params, &opts, |_, _| {})
}

/// Trains on `corpus_dir` and writes `model.ckpt` and `loss.csv` to `out`.
pub fn cmd_train(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<Vec<EpochLog>> {
    prepare_out(cfg, out)?;
    let corpus = load_corpus(corpus_dir)?;
    let (params, logs) = train_model(cfg, &corpus)?;
    save_checkpoint(&params, &out.join(CHECKPOINT_FILE))?;
    save_loss_csv(&logs, &out.join(LOSS_LOG_FILE))?;
    Ok(logs)
}

fn check_classes(params: &EncoderParams, corpus: &Corpus, checkpoint: &Path) -> Result<()> {
    if params.config.num_classes != corpus.num_classes {
        return Err(Error::format(
            checkpoint,
            format!(
                "checkpoint has {} classes but the corpus has {}",
                params.config.num_classes, corpus.num_classes
            ),
        ));
    }
    Ok(())
}

/// Evaluates a checkpoint on one split, writing `eval_<split>.json` and
/// `sweep_<split>.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, corpus_dir: &Path, split: Split, out: &Path) -> Result<EvalReport> {
    prepare_out(cfg, out)?;
    let params = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    check_classes(&params, &corpus, checkpoint)?;
    let report = evaluate_split(&params, &corpus, split, cfg.seeds.enroll)?;
    save_report(
        &report,
        &out.join(format!("eval_{split}.json")),
        &out.join(format!("sweep_{split}.csv")),
    )?;
    println!(
        "{split}: recall {:.4} at {} FA/hr over {:.6} h",
        report.operating_point.recall, report.operating_point.fa_per_hour, report.total_test_hours
    );
    Ok(report)
}

/// Trains one model per lambda with shared seeds and records dev recall.
///
/// Each model lands in `<out>/lambda_<value>/`; the curve goes to
/// `lambda_sweep.csv`.
pub fn cmd_sweep_lambda(cfg: &RunConfig, corpus_dir: &Path, lambdas: &[f64], out: &Path) -> Result<Vec<(f64, f64)>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("no lambda values given"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::config("loss.lambda", format!("{l} is outside [0, 1]")));
    }
    prepare_out(cfg, out)?;
    let corpus = load_corpus(corpus_dir)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut csv = String::from("lambda,dev_recall_at_1fa\n");
    for &lambda in lambdas {
        let mut run = cfg.clone();
        run.loss.lambda = lambda;
        let dir = out.join(format!("lambda_{lambda}"));
        prepare_out(&run, &dir)?;
        let (params, logs) = train_model(&run, &corpus)?;
        save_checkpoint(&params, &dir.join(CHECKPOINT_FILE))?;
        save_loss_csv(&logs, &dir.join(LOSS_LOG_FILE))?;
        let report = evaluate_split(&params, &corpus, Split::Dev, run.seeds.enroll)?;
        let recall = report.operating_point.recall;
        println!("lambda {lambda}: dev recall {recall:.4}");
        csv.push_str(&format!("{lambda},{recall}\n"));
        rows.push((lambda, recall));
    }
    fs::write(out.join(LAMBDA_SWEEP_FILE), csv)?;
    Ok(rows)
}

/// Writes `projection_<split>.csv` with 2-D PCA coordinates of every
/// segment in `split`.
pub fn cmd_project(cfg: &RunConfig, checkpoint: &Path, corpus_dir: &Path, split: Split, out: &Path) -> Result<usize> {
    prepare_out(cfg, out)?;
    let params = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    check_classes(&params, &corpus, checkpoint)?;
    let segs: Vec<_> = corpus.split(split).collect();
    let frames: Vec<_> = segs.iter().map(|s| &s.frames).collect();
    let embs = embed_all(&params, &frames, 64)?;
    let coords = project2d(&embs)?;
    let words: Vec<&str> = segs.iter().map(|s| corpus.word_name(s.word)).collect();
    let mut buf = Vec::new();
    write_projection_csv(&coords, &words, &mut buf)?;
    fs::write(out.join(format!("projection_{split}.csv")), buf)?;
    Ok(coords.len())
}
