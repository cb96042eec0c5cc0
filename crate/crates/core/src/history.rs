//! Allocation history and its JSON/CSV exports.

use std::fs::File;
use std::path::Path;

use alora_autodiff::Float;
use serde::{Deserialize, Serialize};

use crate::allocator::ImportanceReport;
use crate::config::Strategy;
use crate::error::{AloraError, Result};
use crate::lora::AllocationDelta;
use crate::model::SuperNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub report: Option<ImportanceReport>,
    pub delta: AllocationDelta,
    /// Active ranks per module after the round.
    pub ranks_after: Vec<usize>,
    pub active_total: usize,
}

impl RoundRecord {
    pub fn new<S: Float>(report: Option<ImportanceReport>, delta: AllocationDelta, net: &SuperNetwork<S>) -> Self {
        Self {
            round: delta.round,
            report,
            delta,
            ranks_after: net.rank_map(),
            active_total: net.active_total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationHistory {
    pub strategy: Strategy,
    pub r_target: usize,
    pub initial_ranks: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
}

/// One row of the flat export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub round: usize,
    pub module_id: usize,
    pub rank_index: usize,
    #[serde(rename = "S_without")]
    pub s_without: Option<f64>,
    #[serde(rename = "S_alone")]
    pub s_alone: Option<f64>,
    #[serde(rename = "IS")]
    pub is: f64,
    pub action: String,
}

impl AllocationHistory {
    pub fn new(strategy: Strategy, r_target: usize, initial_ranks: Vec<usize>) -> Self {
        Self {
            strategy,
            r_target,
            initial_ranks,
            rounds: Vec::new(),
        }
    }

    pub fn push(&mut self, record: RoundRecord) {
        self.rounds.push(record);
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Rank map before any round, then after each round.
    pub fn snapshots(&self) -> Vec<Vec<usize>> {
        std::iter::once(self.initial_ranks.clone())
            .chain(self.rounds.iter().map(|r| r.ranks_after.clone()))
            .collect()
    }

    /// One row per scored rank per round.
    pub fn rows(&self) -> Vec<RankRow> {
        let mut out = Vec::new();
        for rec in &self.rounds {
            let Some(report) = &rec.report else { continue };
            for r in &report.per_rank {
                let pruned = rec.delta.pruned.contains(&(r.module, r.rank));
                out.push(RankRow {
                    round: rec.round,
                    module_id: r.module.0,
                    rank_index: r.rank,
                    s_without: r.s_without,
                    s_alone: r.s_alone,
                    is: r.score,
                    action: if pruned { "pruned" } else { "kept" }.into(),
                });
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| AloraError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AloraError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AloraError::format(path, e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AloraError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let rows = self.rows();
        if rows.is_empty() {
            w.write_record(["round", "module_id", "rank_index", "S_without", "S_alone", "IS", "action"])
                .map_err(|e| AloraError::format(path, e.to_string()))?;
        }
        for row in rows {
            w.serialize(row).map_err(|e| AloraError::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| AloraError::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Vec<RankRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => AloraError::io(path, io),
            other => AloraError::format(path, format!("{other:?}")),
        })?;
        r.deserialize()
            .collect::<std::result::Result<Vec<RankRow>, _>>()
            .map_err(|e| AloraError::format(path, e.to_string()))
    }
}
