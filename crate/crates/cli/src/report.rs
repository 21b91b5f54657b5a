use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use mvt_core::training::CvSummary;

pub fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

pub fn summary_table(s: &CvSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "split {} local / {} global, {} parameters, {} folds",
        s.local_blocks, s.global_blocks, s.param_count, s.folds
    );
    let _ = writeln!(out, "{:>6} {:>10} {:>8}", "fold", "accuracy", "auc");
    for (i, (acc, auc)) in s.fold_accuracies.iter().zip(&s.fold_aucs).enumerate() {
        let _ = writeln!(out, "{:>6} {:>9.2}% {:>8}", i + 1, acc, fmt_opt(*auc, 4));
    }
    let _ = writeln!(out, "accuracy {:.1} ± {:.1}%", s.mean_acc, s.std_acc);
    let _ = writeln!(
        out,
        "auc      {} ± {}",
        fmt_opt(s.mean_auc, 4),
        fmt_opt(s.std_auc, 4)
    );
    out
}

/// Aligns the columns of a CSV table.
fn csv_table(path: &Path) -> anyhow::Result<String> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = vec![r.headers()?.iter().map(String::from).collect::<Vec<_>>()];
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  "));
    }
    Ok(out)
}

pub fn render(path: &Path) -> anyhow::Result<String> {
    let path: PathBuf = if path.is_dir() {
        let sweep = path.join("sweep.csv");
        if sweep.exists() {
            sweep
        } else {
            path.join("summary.json")
        }
    } else {
        path.to_path_buf()
    };
    if !path.exists() {
        return Err(crate::usage(format!("{} does not exist", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => csv_table(&path),
        Some("json") => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let s: CvSummary =
                serde_json::from_str(&text).with_context(|| format!("{} is not a run summary", path.display()))?;
            Ok(summary_table(&s))
        }
        _ => bail!("don't know how to report on {}", path.display()),
    }
}
