//! Summary tables built from saved run artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::read_angles;
use crate::history::AllocationHistory;
use crate::model::ModuleId;

/// Five-number summary plus mean of one round's scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distribution {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            count: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over [0°, 180°].
pub fn angle_histogram(degrees: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = 180.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &d in degrees {
        let i = ((d / width).floor().max(0.0) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub module_labels: Vec<String>,
    /// `("init", ranks)` then one entry per round.
    pub snapshots: Vec<(String, Vec<usize>)>,
    pub score_distributions: Vec<(usize, Distribution)>,
    pub angles: Option<Vec<HistogramBin>>,
}

pub const ANGLE_BINS: usize = 18;

/// Reads a history JSON and, optionally, an angle CSV.
pub fn summarize(history_path: &Path, angles_path: Option<&Path>) -> Result<Summary> {
    let history = AllocationHistory::load_json(history_path)?;
    let angles = match angles_path {
        Some(p) => {
            let rows = read_angles(p)?;
            let degrees: Vec<f64> = rows.iter().map(|r| r.1).collect();
            Some(angle_histogram(&degrees, ANGLE_BINS))
        }
        None => None,
    };
    Ok(from_history(&history, angles))
}

pub fn from_history(history: &AllocationHistory, angles: Option<Vec<HistogramBin>>) -> Summary {
    let snapshots = history.snapshots();
    let labels = (0..history.initial_ranks.len())
        .map(|m| ModuleId(m).label())
        .collect();
    let names = std::iter::once("init".to_string()).chain(history.rounds.iter().map(|r| format!("round {}", r.round)));
    let score_distributions = history
        .rounds
        .iter()
        .filter_map(|r| {
            let report = r.report.as_ref()?;
            let scores: Vec<f64> = report.per_rank.iter().map(|s| s.score).collect();
            Some((r.round, Distribution::of(&scores)?))
        })
        .collect();
    Summary {
        strategy: history.strategy.name().into(),
        module_labels: labels,
        snapshots: names.zip(snapshots).collect(),
        score_distributions,
        angles,
    }
}

impl Summary {
    /// Plain-text tables.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy: {}", self.strategy);
        let _ = writeln!(s, "\nrank allocation per module");
        let _ = write!(s, "{:<10}", "");
        for l in &self.module_labels {
            let _ = write!(s, "{l:>6}");
        }
        let _ = writeln!(s, "{:>7}", "total");
        for (name, ranks) in &self.snapshots {
            let _ = write!(s, "{name:<10}");
            for r in ranks {
                let _ = write!(s, "{r:>6}");
            }
            let _ = writeln!(s, "{:>7}", ranks.iter().sum::<usize>());
        }
        if !self.score_distributions.is_empty() {
            let _ = writeln!(s, "\nscore distribution per round");
            let _ = writeln!(
                s,
                "{:<6}{:>6}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}",
                "round", "n", "min", "q1", "median", "q3", "max", "mean"
            );
            for (round, d) in &self.score_distributions {
                let _ = writeln!(
                    s,
                    "{round:<6}{:>6}{:>12.4e}{:>12.4e}{:>12.4e}{:>12.4e}{:>12.4e}{:>12.4e}",
                    d.count, d.min, d.q1, d.median, d.q3, d.max, d.mean
                );
            }
        }
        if let Some(hist) = &self.angles {
            let total: usize = hist.iter().map(|b| b.count).sum();
            let peak = hist.iter().map(|b| b.count).max().unwrap_or(0).max(1);
            let _ = writeln!(s, "\ngradient angle histogram ({total} steps)");
            for b in hist {
                let bar = "#".repeat((b.count * 40).div_ceil(peak));
                let _ = writeln!(s, "{:>5.0}-{:<5.0}{:>7} {bar}", b.lo, b.hi, b.count);
            }
        }
        s
    }
}
