//! Experiment reports in JSON and CSV.
//!
//! Accuracies are fractions in `[0, 1]`; GS is computed on percentage
//! points so it is comparable with results tables quoted in percent.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::theory::gs_metric;

/// Histogram L1 between a source and the target domain over codeword cells
/// (`quantized_l1`) and over the finer (codeword, sign pattern) cells
/// (`continuous_l1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub source: usize,
    pub target: usize,
    pub quantized_l1: f64,
    pub continuous_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: usize,
    pub name: String,
    pub seed: u64,
    pub accuracy: f64,
    pub source_val_accuracy: f64,
    pub best_iteration: u64,
    pub perplexity: Option<f64>,
    pub dead_codewords: Option<usize>,
    pub gaps: Vec<PairGap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub domains: Vec<DomainResult>,
    pub average: f64,
    pub gs: f64,
    pub wall_time_secs: f64,
}

fn mean(xs: &[f64]) -> f64 {
    crate::scalar::ordered_sum(xs) / xs.len() as f64
}

fn opt(x: Option<impl ToString>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn new(config_hash: String, seed: u64, domains: Vec<DomainResult>, wall_time_secs: f64) -> Result<Self> {
        if domains.is_empty() {
            return Err(invalid("a report needs at least one domain result"));
        }
        let acc: Vec<f64> = domains.iter().map(|d| d.accuracy).collect();
        let percent: Vec<f64> = acc.iter().map(|a| 100.0 * a).collect();
        Ok(Self { config_hash, seed, average: mean(&acc), gs: gs_metric(&percent)?, domains, wall_time_secs })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Columns: `config_hash,seed,domain,name,accuracy,source_val_accuracy,
    /// best_iteration,perplexity,dead_codewords`, then an `avg` row whose
    /// `accuracy` is the average and `source_val_accuracy` the GS.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,seed,domain,name,accuracy,source_val_accuracy,best_iteration,perplexity,dead_codewords\n");
        for d in &self.domains {
            out += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.config_hash,
                d.seed,
                d.domain,
                d.name,
                d.accuracy,
                d.source_val_accuracy,
                d.best_iteration,
                opt(d.perplexity),
                opt(d.dead_codewords)
            );
        }
        out += &format!("{},{},avg,avg,{},{},,,\n", self.config_hash, self.seed, self.average, self.gs);
        out
    }

    /// Columns: `config_hash,seed,source,target,quantized_l1,continuous_l1`.
    pub fn gaps_csv(&self) -> String {
        let mut out = String::from("config_hash,seed,source,target,quantized_l1,continuous_l1\n");
        for d in &self.domains {
            for g in &d.gaps {
                out += &format!("{},{},{},{},{},{}\n", self.config_hash, d.seed, g.source, g.target, g.quantized_l1, g.continuous_l1);
            }
        }
        out
    }
}

/// Merges per-target reports of one experiment. Reports with different
/// config hashes are refused.
pub fn aggregate(reports: &[ExperimentReport]) -> Result<ExperimentReport> {
    let Some(first) = reports.first() else {
        return Err(invalid("nothing to aggregate"));
    };
    if let Some(other) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(invalid(format!("refusing to aggregate config hashes {} and {}", first.config_hash, other.config_hash)));
    }
    let domains: Vec<DomainResult> = reports.iter().flat_map(|r| r.domains.iter().cloned()).collect();
    let wall = reports.iter().map(|r| r.wall_time_secs).sum();
    ExperimentReport::new(first.config_hash.clone(), first.seed, domains, wall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: String,
    pub description: String,
    pub config_hash: String,
    /// Mean over seeds of the per-seed average target accuracy.
    pub mean_accuracy: f64,
    pub mean_gs: f64,
    pub min_source_val_accuracy: f64,
    pub per_seed: Vec<ExperimentReport>,
}

impl AblationRow {
    pub fn new(id: &str, description: &str, config_hash: String, per_seed: Vec<ExperimentReport>) -> Self {
        let avgs: Vec<f64> = per_seed.iter().map(|r| r.average).collect();
        let gss: Vec<f64> = per_seed.iter().map(|r| r.gs).collect();
        let min_val = per_seed.iter().flat_map(|r| r.domains.iter().map(|d| d.source_val_accuracy)).fold(f64::INFINITY, f64::min);
        Self {
            id: id.to_string(),
            description: description.to_string(),
            config_hash,
            mean_accuracy: mean(&avgs),
            mean_gs: mean(&gss),
            min_source_val_accuracy: min_val,
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub template_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub wall_time_secs: f64,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Columns: `row,description,config_hash,seeds,mean_accuracy,mean_gs,
    /// min_source_val_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,description,config_hash,seeds,mean_accuracy,mean_gs,min_source_val_accuracy\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                r.id,
                r.description,
                r.config_hash,
                r.per_seed.len(),
                r.mean_accuracy,
                r.mean_gs,
                r.min_source_val_accuracy
            );
        }
        out
    }
}
