use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_model, PreparedCase, Prediction, TrainConfig};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::metrics::{confusion, derived_metrics, empirical_auc, mean_std, ConfusionMatrix, DerivedMetrics, StdKind};
use crate::model::{param_count, ModelConfig};
use crate::rng::{substream, substream_seed};

/// Splits case indices into `k` folds with per-class counts that differ by at
/// most one. Each class is shuffled and dealt round-robin; the benign deal
/// starts where the malignant one stopped, so fold sizes stay balanced too.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::config(format!("{k} folds requested for {} cases", labels.len())));
    }
    let mut rng = substream(seed, "folds");
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [Label::Malignant, Label::Benign] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(Error::config(format!("no {class:?} cases to stratify")));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// One-based.
    pub fold_index: usize,
    pub predictions: Vec<Prediction>,
    pub confusion: ConfusionMatrix,
    pub metrics: DerivedMetrics,
    /// Absent when the test fold holds a single class.
    pub auc: Option<f64>,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub param_count: usize,
    pub folds: usize,
    /// Per-fold accuracy in percent.
    pub fold_accuracies: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub fold_aucs: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    pub std_kind: StdKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
}

fn fold_report(fold_index: usize, predictions: Vec<Prediction>, final_loss: Option<f64>) -> Result<FoldReport> {
    let preds: Vec<u8> = predictions.iter().map(|p| p.pred).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let cm = confusion(&preds, &labels)?;
    let auc = if labels.contains(&0) && labels.contains(&1) {
        Some(empirical_auc(&scores, &labels)?)
    } else {
        None
    };
    Ok(FoldReport {
        fold_index,
        predictions,
        confusion: cm,
        metrics: derived_metrics(&cm),
        auc,
        final_train_loss: final_loss,
    })
}

/// Trains on all folds but one and tests on the held-out fold, for each fold.
/// Fold `i` trains with its own seed substream, so a fold's result does not
/// depend on which other folds ran or in what order.
pub fn run_cross_validation(cases: &[PreparedCase], cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<CvResult> {
    cfg.validate()?;
    tcfg.validate()?;
    let labels: Vec<Label> = cases.iter().map(|c| c.label).collect();
    let folds = stratified_folds(&labels, tcfg.folds, tcfg.seed)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (f, test_idx) in folds.iter().enumerate() {
        let train: Vec<PreparedCase> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().map(|&i| cases[i].clone()))
            .collect();
        let test: Vec<PreparedCase> = test_idx.iter().map(|&i| cases[i].clone()).collect();
        let fold_cfg = TrainConfig {
            seed: substream_seed(tcfg.seed, "fold", f as u64),
            ..tcfg.clone()
        };
        log::info!("fold {}/{}: {} train, {} test", f + 1, folds.len(), train.len(), test.len());
        let outcome = train_model(&train, cfg, &fold_cfg)?;
        let preds = evaluate(&outcome.params, cfg, &test)?;
        let report = fold_report(f + 1, preds, outcome.epoch_losses.last().copied())?;
        log::info!(
            "fold {}: accuracy {:.4}, auc {:?}",
            f + 1,
            report.metrics.accuracy.unwrap_or(f64::NAN),
            report.auc
        );
        reports.push(report);
    }
    let summary = summarize(&reports, cfg, tcfg)?;
    Ok(CvResult {
        folds: reports,
        summary,
    })
}

fn summarize(reports: &[FoldReport], cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<CvSummary> {
    let fold_accuracies: Vec<f64> = reports
        .iter()
        .map(|r| 100.0 * r.metrics.accuracy.unwrap_or(0.0))
        .collect();
    let (mean_acc, std_acc) = mean_std(&fold_accuracies, StdKind::Sample)?;
    let fold_aucs: Vec<Option<f64>> = reports.iter().map(|r| r.auc).collect();
    let (mean_auc, std_auc) = match fold_aucs.iter().copied().collect::<Option<Vec<f64>>>() {
        Some(aucs) => {
            let (m, s) = mean_std(&aucs, StdKind::Sample)?;
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(CvSummary {
        local_blocks: cfg.local_blocks,
        global_blocks: cfg.global_blocks,
        param_count: param_count(cfg),
        folds: reports.len(),
        fold_accuracies,
        mean_acc,
        std_acc,
        fold_aucs,
        mean_auc,
        std_auc,
        std_kind: StdKind::Sample,
        model: cfg.clone(),
        train: tcfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub result: CvResult,
}

/// Cross-validates each `(local, global)` split with the same data and seed.
/// All splits must share one block total so every row has the same capacity.
pub fn block_split_sweep(
    cases: &[PreparedCase],
    base: &ModelConfig,
    splits: &[(usize, usize)],
    tcfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    check_splits(splits)?;
    splits
        .iter()
        .map(|&(l, g)| {
            log::info!("split {l} local / {g} global");
            let cfg = base.clone().with_split(l, g);
            Ok(SweepRow {
                local_blocks: l,
                global_blocks: g,
                result: run_cross_validation(cases, &cfg, tcfg)?,
            })
        })
        .collect()
}

pub fn check_splits(splits: &[(usize, usize)]) -> Result<()> {
    let Some(&(l0, g0)) = splits.first() else {
        return Err(Error::config("sweep needs at least one split"));
    };
    if let Some(&(l, g)) = splits.iter().find(|&&(l, g)| l + g != l0 + g0) {
        return Err(Error::config(format!(
            "split {l}:{g} has {} blocks but {l0}:{g0} has {}; a sweep keeps the total fixed",
            l + g,
            l0 + g0
        )));
    }
    Ok(())
}

/// One row per split: per-fold accuracy, mean and spread of accuracy, and AUC.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let folds = rows.first().map_or(0, |r| r.result.summary.folds);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["local_blocks".into(), "global_blocks".into(), "param_count".into()];
    header.extend((1..=folds).map(|i| format!("fold{i}_acc")));
    header.extend(["mean_acc", "std_acc", "mean_auc", "std_auc"].map(String::from));
    let csv_err = |e: csv::Error| Error::Metric(format!("writing sweep table: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for r in rows {
        let s = &r.result.summary;
        let mut rec = vec![
            r.local_blocks.to_string(),
            r.global_blocks.to_string(),
            s.param_count.to_string(),
        ];
        rec.extend(s.fold_accuracies.iter().map(|a| format!("{a:.2}")));
        rec.extend([format!("{:.2}", s.mean_acc), format!("{:.2}", s.std_acc), opt(s.mean_auc), opt(s.std_auc)]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Metric(format!("writing sweep table: {e}")))
}
