//! MAE, per-level diagnostics, rounded-prediction histograms, relative
//! differences across datasets, and their file formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::round_rating;
use crate::error::{GrpError, Result};

/// Mean absolute error after clipping predictions to `[1, c]`.
pub fn mae(preds: &[f64], truths: &[f64], c: usize) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(GrpError::Eval(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(GrpError::Eval("cannot compute MAE of an empty set".into()));
    }
    let hi = c as f64;
    let total: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, r)| (p.clamp(1.0, hi) - r).abs())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Statistics for pairs whose true rating is `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: u32,
    pub count: usize,
    /// `None` when no test pair has this level.
    pub mae: Option<f64>,
    /// Mean of the raw, unclipped predictions.
    pub mean_prediction: Option<f64>,
    /// How many predictions round to this level.
    pub rounded_count: usize,
}

/// Per-level block of a report.
pub fn per_level_report(preds: &[f64], truths: &[u32], c: usize) -> Result<Vec<LevelStats>> {
    if preds.len() != truths.len() {
        return Err(GrpError::Eval(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let hi = c as f64;
    let mut abs_sum = vec![0.0; c];
    let mut pred_sum = vec![0.0; c];
    let mut counts = vec![0usize; c];
    let mut hist = vec![0usize; c];
    for (&p, &r) in preds.iter().zip(truths) {
        if r == 0 || r as usize > c {
            return Err(GrpError::Eval(format!("true rating {r} outside 1..={c}")));
        }
        let k = r as usize - 1;
        counts[k] += 1;
        abs_sum[k] += (p.clamp(1.0, hi) - r as f64).abs();
        pred_sum[k] += p;
        hist[round_rating(p, c) as usize - 1] += 1;
    }
    Ok((0..c)
        .map(|k| {
            let n = counts[k];
            let avg = |s: f64| (n > 0).then(|| s / n as f64);
            LevelStats {
                level: k as u32 + 1,
                count: n,
                mae: avg(abs_sum[k]),
                mean_prediction: avg(pred_sum[k]),
                rounded_count: hist[k],
            }
        })
        .collect())
}

/// Identifies what produced a report.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReportMeta {
    pub dataset: String,
    pub model: String,
    pub variant: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub meta: ReportMeta,
    pub c: usize,
    /// `None` for an empty test set.
    pub overall_mae: Option<f64>,
    pub levels: Vec<LevelStats>,
}

impl ExperimentReport {
    pub fn from_predictions(meta: ReportMeta, preds: &[f64], truths: &[u32], c: usize) -> Result<Self> {
        let levels = per_level_report(preds, truths, c)?;
        let overall_mae = if preds.is_empty() {
            None
        } else {
            let t: Vec<f64> = truths.iter().map(|&r| r as f64).collect();
            Some(mae(preds, &t, c)?)
        };
        Ok(ExperimentReport { meta, c, overall_mae, levels })
    }

    pub fn empty(meta: ReportMeta, c: usize) -> Self {
        ExperimentReport { meta, c, overall_mae: None, levels: Vec::new() }
    }

    pub fn test_size(&self) -> usize {
        self.levels.iter().map(|l| l.count).sum()
    }

    pub fn histogram(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.rounded_count).collect()
    }

    /// Count-weighted MAE over the listed true levels.
    pub fn mae_over_levels(&self, levels: &[u32]) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for l in self.levels.iter().filter(|l| levels.contains(&l.level)) {
            if let Some(m) = l.mae {
                sum += m * l.count as f64;
                n += l.count;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Share of rounded predictions that land on the listed levels.
    pub fn histogram_share(&self, levels: &[u32]) -> f64 {
        let total = self.test_size();
        if total == 0 {
            return 0.0;
        }
        let hit: usize = self
            .levels
            .iter()
            .filter(|l| levels.contains(&l.level))
            .map(|l| l.rounded_count)
            .sum();
        hit as f64 / total as f64
    }

    /// CSV text: `#` metadata lines, a header, one row per level and a
    /// `summary` row. An empty report yields the header only.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# dataset={}", self.meta.dataset);
        let _ = writeln!(s, "# model={}", self.meta.model);
        let _ = writeln!(s, "# variant={}", self.meta.variant);
        let _ = writeln!(s, "# seed={}", self.meta.seed);
        let _ = writeln!(s, "# levels={}", self.c);
        s.push_str("# mae clips predictions to [1, c]; mean_prediction uses raw predictions\n");
        s.push_str("# rounded_count rounds half up then clamps to [1, c]\n");
        s.push_str("level,count,mae,mean_prediction,rounded_count\n");
        if self.levels.is_empty() {
            return s;
        }
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for l in &self.levels {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                l.level,
                l.count,
                opt(l.mae),
                opt(l.mean_prediction),
                l.rounded_count
            );
        }
        let n = self.test_size();
        let mean_all = (n > 0).then(|| {
            self.levels
                .iter()
                .filter_map(|l| l.mean_prediction.map(|m| m * l.count as f64))
                .sum::<f64>()
                / n as f64
        });
        let _ = writeln!(s, "summary,{},{},{},{}", n, opt(self.overall_mae), opt(mean_all), n);
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: String| GrpError::Data(format!("report csv: {m}"));
        let mut meta = ReportMeta::default();
        let mut c = None;
        for line in text.lines().filter_map(|l| l.strip_prefix("# ")) {
            if let Some((k, v)) = line.split_once('=') {
                match k {
                    "dataset" => meta.dataset = v.to_string(),
                    "model" => meta.model = v.to_string(),
                    "variant" => meta.variant = v.to_string(),
                    "seed" => meta.seed = v.parse().map_err(|_| bad(format!("bad seed '{v}'")))?,
                    "levels" => c = Some(v.parse().map_err(|_| bad(format!("bad levels '{v}'")))?),
                    _ => {}
                }
            }
        }
        let c = c.ok_or_else(|| bad("missing levels line".into()))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number '{s}'")))
            }
        };
        let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(format!("bad count '{s}'"))) };
        let mut levels = Vec::new();
        let mut overall_mae = None;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", rec.len())));
            }
            if &rec[0] == "summary" {
                overall_mae = opt(&rec[2])?;
                continue;
            }
            levels.push(LevelStats {
                level: int(&rec[0])? as u32,
                count: int(&rec[1])?,
                mae: opt(&rec[2])?,
                mean_prediction: opt(&rec[3])?,
                rounded_count: int(&rec[4])?,
            });
        }
        Ok(ExperimentReport { meta, c, overall_mae, levels })
    }
}

/// Which file format [`emit`] writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitKind {
    Csv,
    /// One two-column `level value` file per panel.
    PlotData,
}

/// Panels written for plot data, as `(file suffix, value)`.
pub const PLOT_PANELS: [&str; 3] = ["mae", "mean-prediction", "histogram"];

/// Writes the report. For [`EmitKind::Csv`] `path` is the file; for
/// [`EmitKind::PlotData`] files are named `<stem>-<panel>.dat` next to it.
/// Returns every file written.
pub fn emit(report: &ExperimentReport, path: &Path, kind: EmitKind) -> Result<Vec<PathBuf>> {
    match kind {
        EmitKind::Csv => {
            std::fs::write(path, report.to_csv()).map_err(|e| GrpError::io(path, e))?;
            Ok(vec![path.to_path_buf()])
        }
        EmitKind::PlotData => {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report")
                .to_string();
            let dir = path.parent().unwrap_or(Path::new("."));
            let mut written = Vec::new();
            for panel in PLOT_PANELS {
                let mut s = format!("# {} {panel}\n# level value\n", report.meta.model);
                for l in &report.levels {
                    let v = match panel {
                        "mae" => l.mae,
                        "mean-prediction" => l.mean_prediction,
                        _ => Some(l.rounded_count as f64),
                    };
                    let v = v.map(|x| format!("{x:?}")).unwrap_or_else(|| "nan".into());
                    let _ = writeln!(s, "{} {v}", l.level);
                }
                let file = dir.join(format!("{stem}-{panel}.dat"));
                std::fs::write(&file, s).map_err(|e| GrpError::io(&file, e))?;
                written.push(file);
            }
            Ok(written)
        }
    }
}

/// Signed differences `MAE(reference) − MAE(dataset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDifferences {
    pub reference: String,
    /// Every dataset except the reference, in input order.
    pub rows: Vec<(String, f64)>,
    /// Mean over all datasets, the reference counting as 0.
    pub average: Option<f64>,
    pub notes: Vec<String>,
}

pub const REL_DIFF_CONVENTION: &str =
    "difference = MAE(reference) - MAE(dataset); negative when the dataset is harder";

pub fn relative_differences(maes: &[(String, Option<f64>)], reference: &str) -> Result<RelativeDifferences> {
    let base = maes
        .iter()
        .find(|(n, _)| n == reference)
        .ok_or_else(|| GrpError::Eval(format!("reference dataset '{reference}' not present")))?
        .1
        .ok_or_else(|| GrpError::Eval(format!("reference dataset '{reference}' has no MAE")))?;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (name, m) in maes.iter().filter(|(n, _)| n != reference) {
        match m {
            Some(m) => rows.push((name.clone(), base - m)),
            None => notes.push(format!("{name}: missing, omitted")),
        }
    }
    let average = (!rows.is_empty())
        .then(|| rows.iter().map(|(_, d)| d).sum::<f64>() / (rows.len() + 1) as f64);
    Ok(RelativeDifferences { reference: reference.to_string(), rows, average, notes })
}

impl RelativeDifferences {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {REL_DIFF_CONVENTION}\n# reference={}\n", self.reference);
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s.push_str("dataset,difference\n");
        for (n, d) in &self.rows {
            let _ = writeln!(s, "{n},{d:?}");
        }
        if let Some(a) = self.average {
            let _ = writeln!(s, "average,{a:?}");
        }
        s
    }
}

/// Groups reports by dataset name, keeping the last MAE per dataset.
pub fn maes_by_dataset(reports: &[ExperimentReport]) -> Vec<(String, Option<f64>)> {
    let mut m: BTreeMap<&str, Option<f64>> = BTreeMap::new();
    for r in reports {
        m.insert(&r.meta.dataset, r.overall_mae);
    }
    m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
