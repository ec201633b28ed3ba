//! Evaluation: pixel distance errors, `p_k` success rates, density-binned
//! error tables and cumulative error curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub width: u32,
    pub height: u32,
    /// Success thresholds in eval pixels, ascending.
    pub thresholds: Vec<f64>,
    pub density_bins: usize,
    /// Error above which a sample counts as an exceedance in the density table.
    pub exceed_px: f64,
    pub cdf_max: f64,
    pub cdf_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            width: 80,
            height: 60,
            thresholds: vec![3.0, 5.0, 10.0],
            density_bins: 10,
            exceed_px: 3.0,
            cdf_max: 20.0,
            cdf_points: 41,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("eval: resolution must be positive".into()));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0)) || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval: thresholds must be positive and ascending".into()));
        }
        if self.density_bins == 0 || self.cdf_points < 2 || !(self.cdf_max > 0.0) {
            return Err(Error::Config("eval: need density_bins >= 1, cdf_points >= 2, cdf_max > 0".into()));
        }
        Ok(())
    }
}

/// Euclidean distances between normalized predictions and labels after
/// scaling both by `(w, h)`.
pub fn errors(preds: &[[f64; 2]], labels: &[[f64; 2]], scale: (f64, f64)) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::arg("errors", format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let dx = (p[0] - l[0]) * scale.0;
            let dy = (p[1] - l[1]) * scale.1;
            (dx * dx + dy * dy).sqrt()
        })
        .collect())
}

/// Fraction of errors at or below `threshold`.
pub fn p_at(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::arg("p_at", "no errors"));
    }
    if !(threshold > 0.0) {
        return Err(Error::arg("p_at", format!("threshold {threshold} must be positive")));
    }
    Ok(errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub bin: usize,
    pub samples: usize,
    pub exceedances: usize,
    pub mean_error: f64,
    pub mean_events: f64,
    pub min_events: usize,
    pub max_events: usize,
}

/// Sorts samples by event count (ties by position) and splits them into
/// `bins` equal-population bins whose sizes differ by at most one.
pub fn density_analysis(event_counts: &[usize], errors: &[f64], bins: usize, exceed_px: f64) -> Result<Vec<DensityBin>> {
    if event_counts.len() != errors.len() {
        return Err(Error::arg("density_analysis", format!("{} counts for {} errors", event_counts.len(), errors.len())));
    }
    let n = errors.len();
    if bins == 0 || n < bins {
        return Err(Error::arg("density_analysis", format!("{n} samples cannot fill {bins} bins")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (event_counts[i], i));
    Ok((0..bins)
        .map(|b| {
            let members = &order[b * n / bins..(b + 1) * n / bins];
            let len = members.len() as f64;
            DensityBin {
                bin: b,
                samples: members.len(),
                exceedances: members.iter().filter(|&&i| errors[i] > exceed_px).count(),
                mean_error: members.iter().map(|&i| errors[i]).sum::<f64>() / len,
                mean_events: members.iter().map(|&i| event_counts[i] as f64).sum::<f64>() / len,
                min_events: members.iter().map(|&i| event_counts[i]).min().unwrap_or(0),
                max_events: members.iter().map(|&i| event_counts[i]).max().unwrap_or(0),
            }
        })
        .collect())
}

/// Empirical CDF sampled at `points` evenly spaced errors in `[0, max_error]`.
pub fn cumulative_curve(errors: &[f64], max_error: f64, points: usize) -> Vec<(f64, f64)> {
    assert!(points >= 2, "cumulative curve needs at least two points");
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    (0..points)
        .map(|i| {
            let e = max_error * i as f64 / (points - 1) as f64;
            let below = sorted.partition_point(|&v| v <= e);
            (e, below as f64 / n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Free-form name of the pipeline that produced the report.
    pub name: String,
    pub eval_width: u32,
    pub eval_height: u32,
    pub samples: usize,
    pub rates: Vec<Rate>,
    /// Mean Euclidean distance in eval pixels.
    pub mean_distance: f64,
    /// Mean squared Euclidean distance in eval pixels squared.
    pub mean_squared_distance: f64,
    pub density: Vec<DensityBin>,
    /// `(error, fraction at or below)` pairs.
    pub cdf: Vec<(f64, f64)>,
    pub errors: Vec<f64>,
    pub event_counts: Vec<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl MetricsReport {
    /// Builds a report from per-sample errors and the event counts used for density binning.
    pub fn new(name: &str, errors: Vec<f64>, event_counts: Vec<usize>, cfg: &EvalConfig) -> Result<Self> {
        cfg.validate()?;
        let rates = cfg
            .thresholds
            .iter()
            .map(|&t| Ok(Rate { threshold: t, rate: p_at(&errors, t)? }))
            .collect::<Result<Vec<_>>>()?;
        let bins = cfg.density_bins.min(errors.len());
        let density = density_analysis(&event_counts, &errors, bins, cfg.exceed_px)?;
        let n = errors.len() as f64;
        Ok(Self {
            name: name.into(),
            eval_width: cfg.width,
            eval_height: cfg.height,
            samples: errors.len(),
            rates,
            mean_distance: errors.iter().sum::<f64>() / n,
            mean_squared_distance: errors.iter().map(|e| e * e).sum::<f64>() / n,
            density,
            cdf: cumulative_curve(&errors, cfg.cdf_max, cfg.cdf_points),
            errors,
            event_counts,
            meta: serde_json::Value::Null,
        })
    }

    pub fn rate(&self, threshold: f64) -> Option<f64> {
        self.rates.iter().find(|r| r.threshold == threshold).map(|r| r.rate)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid { path: path.into(), msg: format!("not a metrics report: {e}") })
    }

    /// Writes `report.json`, `errors.csv`, `density_bins.csv` and `cdf.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_json(&dir.join("report.json"))?;
        let mut errors = Table::new(&["index", "error_px", "events"]);
        for (i, (e, c)) in self.errors.iter().zip(&self.event_counts).enumerate() {
            errors.push(vec![i.to_string(), e.to_string(), c.to_string()]);
        }
        errors.write_csv(&dir.join("errors.csv"))?;
        combine_density(std::slice::from_ref(self))?.write_csv(&dir.join("density_bins.csv"))?;
        combine_cdf(std::slice::from_ref(self))?.write_csv(&dir.join("cdf.csv"))
    }
}

/// A plain string table for CSV output.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            writeln!(w, "{}", self.header.join(","))?;
            for r in &self.rows {
                writeln!(w, "{}", r.join(","))?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }
}

fn column_names(reports: &[MetricsReport]) -> Vec<String> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| if r.name.is_empty() { format!("report{i}") } else { r.name.replace(',', "_") })
        .collect()
}

/// Side-by-side density bins: one `exceedances`, `mean_error` and
/// `mean_events` column per report. All reports need the same bin count.
pub fn combine_density(reports: &[MetricsReport]) -> Result<Table> {
    let first = reports.first().ok_or_else(|| Error::arg("analyze", "no reports"))?;
    if let Some(r) = reports.iter().find(|r| r.density.len() != first.density.len()) {
        return Err(Error::arg(
            "analyze",
            format!("report {:?} has {} density bins, {:?} has {}", r.name, r.density.len(), first.name, first.density.len()),
        ));
    }
    let names = column_names(reports);
    let mut header = vec!["bin".to_string()];
    for n in &names {
        header.extend([format!("{n}_exceedances"), format!("{n}_mean_error"), format!("{n}_mean_events")]);
    }
    let mut table = Table { header, rows: Vec::new() };
    for b in 0..first.density.len() {
        let mut row = vec![b.to_string()];
        for r in reports {
            let d = &r.density[b];
            row.extend([d.exceedances.to_string(), d.mean_error.to_string(), d.mean_events.to_string()]);
        }
        table.push(row);
    }
    Ok(table)
}

/// Side-by-side cumulative curves; all reports must share the error grid.
pub fn combine_cdf(reports: &[MetricsReport]) -> Result<Table> {
    let first = reports.first().ok_or_else(|| Error::arg("analyze", "no reports"))?;
    for r in reports {
        let same = r.cdf.len() == first.cdf.len() && r.cdf.iter().zip(&first.cdf).all(|(a, b)| a.0 == b.0);
        if !same {
            return Err(Error::arg("analyze", format!("report {:?} uses a different error grid than {:?}", r.name, first.name)));
        }
    }
    let mut header = vec!["error_px".to_string()];
    header.extend(column_names(reports));
    let mut table = Table { header, rows: Vec::new() };
    for (i, &(e, _)) in first.cdf.iter().enumerate() {
        let mut row = vec![e.to_string()];
        row.extend(reports.iter().map(|r| r.cdf[i].1.to_string()));
        table.push(row);
    }
    Ok(table)
}
