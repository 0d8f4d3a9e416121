use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use rainunet::data::{
    center_crop_resize, cleansing_filter, read_dataset, select_modalities, synth_generate,
    tensor_file, write_dataset, SequenceRecord,
};
use rainunet::gradcheck::{run_suite, summarize, CheckSummary, SuiteOptions};
use rainunet::metrics::{
    binarize, confusion, lead_time_counts, ConfusionCounts, LeadTimeCurve, MetricsReport,
};
use rainunet::model::{read_checkpoint, save_checkpoint};
use rainunet::training::{fit_with, Sample};
use rainunet::{Error, RainUNet, Scalar, Tensor};

use crate::checksums::write_checksums;
use crate::config::{Precision, RunConfig};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const SWA_CHECKPOINT: &str = "swa.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LEAD_TIME_CSV: &str = "lead_time.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const RESOLVED_CONFIG: &str = "config.txt";

fn create_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.require_out()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub records: usize,
    /// Records with fewer target positives than the cleansing threshold.
    pub below_threshold: usize,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthReport> {
    let out = create_out(cfg)?;
    let records: Vec<SequenceRecord> = synth_generate(&cfg.synth)?
        .into_iter()
        .map(|s| s.record)
        .collect();
    write_dataset(&records, out)?;
    write_checksums(out)?;
    let below = records
        .iter()
        .filter(|r| r.positives() < cfg.cleansing_threshold)
        .count();
    println!(
        "synth: wrote {} records to {}",
        records.len(),
        out.display()
    );
    if !records.is_empty() && below == records.len() {
        eprintln!(
            "warning: every record has fewer than {} target positives; cleansing would remove 100%",
            cfg.cleansing_threshold
        );
    } else if below > 0 {
        println!("synth: {below} records fall below the cleansing threshold");
    }
    Ok(SynthReport {
        records: records.len(),
        below_threshold: below,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessReport {
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
}

impl PreprocessReport {
    pub fn removed_fraction(&self) -> f64 {
        if self.input == 0 {
            0.0
        } else {
            self.removed as f64 / self.input as f64
        }
    }
}

/// Modality selection, cleansing, then center crop and resize.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessReport> {
    let data = cfg.require_data()?;
    let records = read_dataset(data)?;
    let input = records.len();
    let selected = records
        .into_par_iter()
        .map(|r| -> rainunet::Result<SequenceRecord> {
            Ok(SequenceRecord {
                input: select_modalities(&r.input, &cfg.channels)?,
                ..r
            })
        })
        .collect::<rainunet::Result<Vec<_>>>()?;
    let (kept, removed) = cleansing_filter(selected, cfg.cleansing_threshold);
    let cropped = kept
        .into_par_iter()
        .map(|r| -> rainunet::Result<SequenceRecord> {
            Ok(SequenceRecord {
                input: center_crop_resize(&r.input, cfg.crop_factor)?,
                ..r
            })
        })
        .collect::<rainunet::Result<Vec<_>>>()?;
    let out = create_out(cfg)?;
    write_dataset(&cropped, out)?;
    write_checksums(out)?;
    let report = PreprocessReport {
        input,
        kept: cropped.len(),
        removed,
    };
    println!(
        "preprocess: kept {} of {} records, removed {:.1}% (channels {}, crop x{})",
        report.kept,
        report.input,
        100.0 * report.removed_fraction(),
        cfg.channels,
        cfg.crop_factor
    );
    Ok(report)
}

fn samples<T: Scalar>(records: &[SequenceRecord]) -> Vec<Sample<T>> {
    records
        .iter()
        .map(|r| Sample {
            input: r.input.cast(),
            target: r.target.to_scalar(),
        })
        .collect()
}

fn check_channels(cfg: &RunConfig, records: &[SequenceRecord]) -> Result<()> {
    if let Some(r) = records.first() {
        let c = r.input.shape()[0];
        if c != cfg.channels.len() {
            bail!(
                "dataset has {c} input channels but channel set {} has {}; run preprocess with the same --channels",
                cfg.channels,
                cfg.channels.len()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    match cfg.precision {
        Precision::Standard => train::<f32>(cfg),
        Precision::Wide => train::<f64>(cfg),
    }
}

fn train<T: Scalar>(cfg: &RunConfig) -> Result<TrainReport> {
    let records = read_dataset(cfg.require_data()?)?;
    check_channels(cfg, &records)?;
    let data = samples::<T>(&records);
    let out = create_out(cfg)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let mut model = RainUNet::<T>::new(cfg.model.clone(), cfg.seed)?;
    println!(
        "train: {} sequences, {} parameters, {} epochs, precision {}",
        data.len(),
        model.num_params(),
        cfg.train.epochs,
        cfg.precision
    );
    let total = cfg.train.epochs;
    let outcome = fit_with(&mut model, &data, &cfg.train, |e| {
        println!(
            "epoch {:>3}/{total} loss {:.6}{}",
            e.epoch,
            e.mean_loss,
            if e.swa { " swa" } else { "" }
        );
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::Diverged { .. }) => {
            let path = out.join(LAST_GOOD_CHECKPOINT);
            save_checkpoint(&model, &path)?;
            write_checksums(out)?;
            return Err(anyhow!(e).context(format!(
                "weights before the failing step saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let mut checkpoints = vec![out.join(FINAL_CHECKPOINT)];
    save_checkpoint(&model, &checkpoints[0])?;
    if let Some(avg) = &outcome.swa {
        let mut swa_model = model.clone();
        swa_model.load_snapshot(avg)?;
        let path = out.join(SWA_CHECKPOINT);
        save_checkpoint(&swa_model, &path)?;
        checkpoints.push(path);
    }
    fs::write(out.join(TRAIN_LOG), outcome.log.to_csv())?;
    write_checksums(out)?;
    for p in &checkpoints {
        println!("train: wrote {}", p.display());
    }
    Ok(TrainReport {
        epochs: outcome.log.epochs.len(),
        final_loss: outcome.log.epochs.last().map(|e| e.mean_loss),
        checkpoints,
    })
}

/// Model from the run config with the checkpoint's weights. Tensor shape
/// mismatches name both shapes; other config differences are listed by key.
pub fn load_model<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<RainUNet<T>> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ck = read_checkpoint::<T>(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let diffs: Vec<String> = config_diffs(&cfg.model, &ck.config)
        .into_iter()
        // The bias init only matters before training.
        .filter(|(k, _, _)| k != "head_bias_init")
        .map(|(k, run, ckpt)| format!("{k}: config {run}, checkpoint {ckpt}"))
        .collect();
    let mut model = RainUNet::<T>::new(cfg.model.clone(), 0)?;
    let loaded = ck.load_into(&mut model);
    match (diffs.is_empty(), loaded) {
        (true, Ok(())) => Ok(model),
        (true, Err(e)) => Err(anyhow!(e).context(format!(
            "checkpoint {} does not fit the configured model",
            path.display()
        ))),
        (false, loaded) => {
            let mut msg = format!(
                "checkpoint {} was trained with a different model config ({})",
                path.display(),
                diffs.join("; ")
            );
            if let Err(e) = loaded {
                msg.push_str(&format!(": {e}"));
            }
            bail!(msg)
        }
    }
}

fn config_diffs(
    a: &rainunet::RainUNetConfig,
    b: &rainunet::RainUNetConfig,
) -> Vec<(String, String, String)> {
    let (ta, tb) = (a.to_text(), b.to_text());
    ta.lines()
        .zip(tb.lines())
        .filter(|(x, y)| x != y)
        .filter_map(|(x, y)| {
            let (k, va) = x.split_once(" = ")?;
            let (_, vb) = y.split_once(" = ")?;
            Some((k.to_string(), va.to_string(), vb.to_string()))
        })
        .collect()
}

fn predict_record<T: Scalar>(model: &RainUNet<T>, r: &SequenceRecord) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(r.input.shape());
    let x = r.input.cast::<T>().reshape(&shape)?;
    Ok(model.predict(&x)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sequences: usize,
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
    pub lead_time: LeadTimeCurve,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    match cfg.precision {
        Precision::Standard => evaluate::<f32>(cfg),
        Precision::Wide => evaluate::<f64>(cfg),
    }
}

fn evaluate<T: Scalar>(cfg: &RunConfig) -> Result<EvalReport> {
    let records = read_dataset(cfg.require_data()?)?;
    check_channels(cfg, &records)?;
    let model = load_model::<T>(cfg, cfg.require_checkpoint()?)?;
    let per_record = records
        .par_iter()
        .map(|r| -> Result<(ConfusionCounts, Vec<ConfusionCounts>)> {
            let p = predict_record(&model, r)?;
            let pred = binarize(&p, cfg.threshold);
            let mut shape = vec![1];
            shape.extend_from_slice(r.target.shape());
            let gt = r.target.reshape(&shape)?;
            Ok((confusion(&pred, &gt)?, lead_time_counts(&pred, &gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = ConfusionCounts::default();
    let mut leads = vec![ConfusionCounts::default(); cfg.model.out_frames];
    for (c, l) in &per_record {
        counts += *c;
        for (acc, v) in leads.iter_mut().zip(l) {
            *acc += *v;
        }
    }
    let metrics = MetricsReport::from_counts(counts);
    let lead_time = LeadTimeCurve::from_counts(&leads);
    let out = create_out(cfg)?;
    fs::write(out.join(METRICS_CSV), metrics.to_csv())?;
    fs::write(out.join(LEAD_TIME_CSV), lead_time.to_csv())?;
    write_checksums(out)?;
    println!("evaluate: {} sequences", records.len());
    for (name, r) in metrics.rows() {
        println!(
            "  {name:<9} {:.6}{}",
            r.value,
            if r.degenerate { " (degenerate)" } else { "" }
        );
    }
    Ok(EvalReport {
        sequences: records.len(),
        counts,
        metrics,
        lead_time,
    })
}

/// Writes `pred_NNNNN.runt` (probabilities, f32) and `mask_NNNNN.runt`
/// (binarized, u8), both `(out_frames, H, W)`, one pair per record in manifest order.
pub fn cmd_predict(cfg: &RunConfig) -> Result<usize> {
    match cfg.precision {
        Precision::Standard => predict::<f32>(cfg),
        Precision::Wide => predict::<f64>(cfg),
    }
}

fn predict<T: Scalar>(cfg: &RunConfig) -> Result<usize> {
    let records = read_dataset(cfg.require_data()?)?;
    check_channels(cfg, &records)?;
    let model = load_model::<T>(cfg, cfg.require_checkpoint()?)?;
    let out = create_out(cfg)?;
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| -> Result<()> {
            let p = predict_record(&model, r)?;
            let p = p.reshape(&p.shape()[1..])?;
            tensor_file::write_tensor(&p.cast::<f32>(), &out.join(format!("pred_{i:05}.runt")))?;
            tensor_file::write_tensor(
                &binarize(&p, cfg.threshold),
                &out.join(format!("mask_{i:05}.runt")),
            )?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    write_checksums(out)?;
    println!(
        "predict: wrote {} predictions to {}",
        records.len(),
        out.display()
    );
    Ok(records.len())
}

/// Runs the gradient-check suite in wide precision.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<CheckSummary>> {
    let mut opts = SuiteOptions {
        seeds: cfg.gradcheck_seeds,
        ..Default::default()
    };
    if let Some(tol) = cfg.gradcheck_tol {
        opts = opts.with_tol(tol);
    }
    let summary = summarize(&run_suite(&opts)?);
    let mut csv = String::from("check,seeds,runs,checked,skipped,max_rel_error,tolerance,pass\n");
    for s in &summary {
        println!(
            "{:<18} {} seeds {:>5} coords max rel {:.3e} tol {:.0e} {}",
            s.check,
            s.seeds,
            s.checked,
            s.max_rel_error,
            s.tolerance,
            if s.pass { "pass" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{:e},{:e},{}\n",
            s.check, s.seeds, s.runs, s.checked, s.skipped, s.max_rel_error, s.tolerance, s.pass
        ));
    }
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(GRADCHECK_CSV), csv)?;
    }
    let failed: Vec<&str> = summary
        .iter()
        .filter(|s| !s.pass)
        .map(|s| s.check)
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(summary)
}
