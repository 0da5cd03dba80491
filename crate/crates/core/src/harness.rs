//! Experiment driver: config parsing, (mode × QPS) sweeps, metric
//! post-processing, and CSV/JSON report emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run, EnergyParams, PolicyConfig, RunConfig, TimingParams};
use crate::metrics::{RunMetrics, RunOutcome};
use crate::model::ModelConfig;
use crate::stack::{NodeTopology, StackMode};
use crate::trace::{load_trace, rescale_qps, synthesize_trace, Trace, TraceError, TraceSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty series")]
    EmptySeries,
    #[error("percentile must lie in [0, 100], got {0}")]
    BadPercentile(f64),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Nearest-rank percentile: the ⌈p/100 · n⌉-th smallest value, no
/// interpolation.
pub fn percentile(series: &[f64], p: f64) -> Result<f64, HarnessError> {
    if series.is_empty() {
        return Err(HarnessError::EmptySeries);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(HarnessError::BadPercentile(p));
    }
    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Largest swept QPS whose p50 end-to-end latency stays within
/// `factor` × the curve's own minimum. Points with `None` latency
/// (infeasible cells) are excluded; an all-infeasible curve yields 0.
pub fn slo_capacity(curve: &[(f64, Option<f64>)], factor: f64) -> f64 {
    let feasible: Vec<(f64, f64)> = curve
        .iter()
        .filter_map(|&(q, l)| l.map(|l| (q, l)))
        .collect();
    let Some(min) = feasible
        .iter()
        .map(|&(_, l)| l)
        .min_by(f64::total_cmp)
    else {
        return 0.0;
    };
    feasible
        .iter()
        .filter(|&&(_, l)| l <= factor * min)
        .map(|&(q, _)| q)
        .fold(0.0, f64::max)
}

/// Pearson correlation; `None` when fewer than two points or a degenerate
/// variance makes it undefined.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Where the requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceSource {
    File { path: PathBuf },
    Synth { preset: String, requests: u32 },
    Spec(TraceSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Preset(String),
    Custom(ModelConfig),
}

/// One experiment: a trace replayed across a (mode × QPS) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelSource,
    pub trace: TraceSource,
    pub modes: Vec<StackMode>,
    pub qps: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Override the node's GPU count (presets use 8).
    #[serde(default)]
    pub gpus: Option<u32>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub timing: TimingParams,
    #[serde(default)]
    pub energy: EnergyParams,
}

fn default_name() -> String {
    "experiment".to_string()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.qps.is_empty() || self.qps.iter().any(|&q| q <= 0.0) {
            return Err(HarnessError::Config(
                "qps list must be non-empty and positive".into(),
            ));
        }
        if self.modes.is_empty() {
            return Err(HarnessError::Config("mode list must be non-empty".into()));
        }
        Ok(())
    }

    pub fn resolve_model(&self) -> Result<ModelConfig, HarnessError> {
        let m = match &self.model {
            ModelSource::Preset(name) => ModelConfig::preset(name)?,
            ModelSource::Custom(m) => m.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn resolve_trace(&self) -> Result<Trace, HarnessError> {
        Ok(match &self.trace {
            TraceSource::File { path } => load_trace(path)?,
            TraceSource::Synth { preset, requests } => {
                synthesize_trace(&TraceSpec::preset(preset, *requests, self.seed)?)?
            }
            TraceSource::Spec(spec) => synthesize_trace(spec)?,
        })
    }

    pub fn run_config(&self, mode: StackMode) -> Result<RunConfig, HarnessError> {
        let mut topo = NodeTopology::preset(mode);
        if let Some(gpus) = self.gpus {
            topo.gpus = gpus;
        }
        Ok(RunConfig {
            model: self.resolve_model()?,
            topo,
            policy: self.policy.clone(),
            timing: self.timing,
            energy: self.energy,
            seed: self.seed,
            collect_policy_events: false,
        })
    }
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: StackMode,
    pub qps: f64,
    pub outcome: RunOutcome,
    /// Token throughput relative to the baseline mode at the same QPS.
    pub normalized_throughput: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: StackMode,
    pub slo_capacity_qps: f64,
    /// exp(mean(ln x)) of normalized throughput over feasible cells.
    pub geomean_normalized_throughput: Option<f64>,
    /// Pearson r between token throughput and energy per token across the
    /// mode's own QPS points.
    pub energy_throughput_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub seed: u64,
    pub qps_grid: Vec<f64>,
    pub baseline_mode: StackMode,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<ModeSummary>,
}

impl SweepResult {
    pub fn cell(&self, mode: StackMode, qps: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.qps == qps)
    }

    pub fn metrics(&self, mode: StackMode, qps: f64) -> Option<&RunMetrics> {
        self.cell(mode, qps).and_then(|c| c.outcome.metrics())
    }

    pub fn summary(&self, mode: StackMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }
}

/// Execute the whole grid. Cells are independent runs and execute in
/// parallel; results are keyed by grid position so interleaving cannot
/// affect any output value. Infeasible cells are recorded and the sweep
/// continues.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;
    let mut grid = Vec::new();
    for mode in &cfg.modes {
        let run_cfg = cfg.run_config(*mode)?;
        for (qi, &qps) in cfg.qps.iter().enumerate() {
            grid.push((*mode, qi, qps, run_cfg.clone()));
        }
    }

    let outcomes: Vec<((StackMode, usize), RunOutcome)> = grid
        .par_iter()
        .map(|(mode, qi, qps, run_cfg)| {
            let scaled = rescale_qps(&trace, *qps).expect("positive qps validated");
            ((*mode, *qi), run(run_cfg, &scaled))
        })
        .collect();
    let by_key: BTreeMap<(StackMode, usize), RunOutcome> = outcomes.into_iter().collect();

    let baseline_mode = if cfg.modes.contains(&StackMode::DedicatedPim) {
        StackMode::DedicatedPim
    } else {
        cfg.modes[0]
    };

    let mut cells = Vec::new();
    for mode in &cfg.modes {
        for (qi, &qps) in cfg.qps.iter().enumerate() {
            let outcome = by_key[&(*mode, qi)].clone();
            let normalized = match (&outcome, &by_key[&(baseline_mode, qi)]) {
                (RunOutcome::Completed(m), RunOutcome::Completed(b))
                    if b.token_throughput > 0.0 =>
                {
                    Some(m.token_throughput / b.token_throughput)
                }
                _ => None,
            };
            cells.push(CellResult {
                mode: *mode,
                qps,
                outcome,
                normalized_throughput: normalized,
            });
        }
    }

    let mut summaries = Vec::new();
    for mode in &cfg.modes {
        let mode_cells: Vec<&CellResult> = cells.iter().filter(|c| c.mode == *mode).collect();
        let curve: Vec<(f64, Option<f64>)> = mode_cells
            .iter()
            .map(|c| {
                let p50 = c
                    .outcome
                    .metrics()
                    .map(|m| m.latency.p50_e2e);
                (c.qps, p50)
            })
            .collect();
        let norms: Vec<f64> = mode_cells
            .iter()
            .filter_map(|c| c.normalized_throughput)
            .filter(|&x| x > 0.0)
            .collect();
        let geomean = if norms.is_empty() {
            None
        } else {
            Some((norms.iter().map(|x| x.ln()).sum::<f64>() / norms.len() as f64).exp())
        };
        let (tput, ept): (Vec<f64>, Vec<f64>) = mode_cells
            .iter()
            .filter_map(|c| c.outcome.metrics())
            .map(|m| (m.token_throughput, m.energy_per_token_j))
            .unzip();
        summaries.push(ModeSummary {
            mode: *mode,
            slo_capacity_qps: slo_capacity(&curve, 2.0),
            geomean_normalized_throughput: geomean,
            energy_throughput_r: pearson(&tput, &ept),
        });
    }

    Ok(SweepResult {
        name: cfg.name.clone(),
        seed: cfg.seed,
        qps_grid: cfg.qps.clone(),
        baseline_mode,
        cells,
        summaries,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

/// Write summary.json plus cells.csv, energy.csv, and slo.csv.
pub fn emit_report(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let summary_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(result)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(&summary_path, json)?;
    written.push(summary_path);

    let cells_path = dir.join("cells.csv");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&cells_path)?);
        writeln!(
            w,
            "mode,qps,feasible,completed,rejected,token_throughput,request_throughput,\
             p50_ttft_s,p95_ttft_s,p50_tbt_s,p95_tbt_s,p50_e2e_s,p95_e2e_s,\
             mean_queue_delay_s,mean_decode_batch,compute_byte_hit_rate,prefix_hit_rate,\
             energy_per_token_j,normalized_throughput"
        )?;
        for c in &result.cells {
            match c.outcome.metrics() {
                Some(m) => {
                    let l = &m.latency;
                    writeln!(
                        w,
                        "{},{},true,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        c.mode.as_str(),
                        fmt(c.qps),
                        m.completed_requests,
                        m.rejected_requests,
                        fmt(m.token_throughput),
                        fmt(m.request_throughput),
                        fmt(l.p50_ttft),
                        fmt(l.p95_ttft),
                        fmt(l.p50_tbt),
                        fmt(l.p95_tbt),
                        fmt(l.p50_e2e),
                        fmt(l.p95_e2e),
                        fmt(m.mean_queue_delay()),
                        fmt(m.mean_decode_batch),
                        fmt(m.hit_rates.compute_byte_hit_rate),
                        fmt(m.hit_rates.prefix_hit_rate),
                        fmt(m.energy_per_token_j),
                        c.normalized_throughput.map(fmt).unwrap_or_default(),
                    )?;
                }
                None => {
                    writeln!(
                        w,
                        "{},{},false,,,,,,,,,,,,,,,,",
                        c.mode.as_str(),
                        fmt(c.qps)
                    )?;
                }
            }
        }
    }
    written.push(cells_path);

    let energy_path = dir.join("energy.csv");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&energy_path)?);
        writeln!(
            w,
            "mode,qps,fc_offchip_j,attn_offchip_j,fc_onchip_j,attn_onchip_j,\
             communication_j,total_j,energy_per_token_j"
        )?;
        for c in &result.cells {
            if let Some(m) = c.outcome.metrics() {
                let e = &m.energy;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    c.mode.as_str(),
                    fmt(c.qps),
                    fmt(e.fc_offchip_j),
                    fmt(e.attn_offchip_j),
                    fmt(e.fc_onchip_j),
                    fmt(e.attn_onchip_j),
                    fmt(e.communication_j),
                    fmt(e.total()),
                    fmt(m.energy_per_token_j),
                )?;
            }
        }
    }
    written.push(energy_path);

    let slo_path = dir.join("slo.csv");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&slo_path)?);
        writeln!(
            w,
            "mode,slo_capacity_qps,geomean_normalized_throughput,energy_throughput_r"
        )?;
        for s in &result.summaries {
            writeln!(
                w,
                "{},{},{},{}",
                s.mode.as_str(),
                fmt(s.slo_capacity_qps),
                s.geomean_normalized_throughput.map(fmt).unwrap_or_default(),
                s.energy_throughput_r.map(fmt).unwrap_or_default(),
            )?;
        }
    }
    written.push(slo_path);

    Ok(written)
}

/// Re-emit the CSV tables from a stored summary.json.
pub fn reemit_report(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let text = std::fs::read_to_string(dir.join("summary.json"))?;
    let result: SweepResult =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
    emit_report(&result, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&s, 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&s, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&[7.0], 13.0).unwrap(), 7.0);
        assert_eq!(percentile(&[7.0], 99.0).unwrap(), 7.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&s, 101.0).is_err());
    }

    #[test]
    fn slo_capacity_from_curve() {
        let curve: Vec<(f64, Option<f64>)> = vec![
            (1.0, Some(1.0)),
            (2.0, Some(1.1)),
            (3.0, Some(1.9)),
            (4.0, Some(5.0)),
        ];
        assert_eq!(slo_capacity(&curve, 2.0), 3.0);

        // flat curve: max swept qps qualifies
        let flat: Vec<(f64, Option<f64>)> =
            vec![(1.0, Some(2.0)), (2.0, Some(2.0)), (8.0, Some(2.0))];
        assert_eq!(slo_capacity(&flat, 2.0), 8.0);

        // raising the factor never lowers capacity
        for f in [1.0, 1.5, 2.0, 3.0, 10.0] {
            let lo = slo_capacity(&curve, f);
            let hi = slo_capacity(&curve, f + 0.5);
            assert!(hi >= lo);
        }

        // infeasible points are excluded; all-infeasible reports 0
        let with_hole: Vec<(f64, Option<f64>)> =
            vec![(1.0, Some(1.0)), (2.0, None), (3.0, Some(1.5))];
        assert_eq!(slo_capacity(&with_hole, 2.0), 3.0);
        assert_eq!(slo_capacity(&[(1.0, None), (2.0, None)], 2.0), 0.0);
    }

    #[test]
    fn slo_result_is_grid_member_or_zero() {
        let grid = [0.5, 1.0, 2.0, 4.0];
        let curve: Vec<(f64, Option<f64>)> = grid
            .iter()
            .enumerate()
            .map(|(i, &q)| (q, Some(1.0 + i as f64)))
            .collect();
        let cap = slo_capacity(&curve, 2.0);
        assert!(cap == 0.0 || grid.contains(&cap));
    }

    #[test]
    fn pearson_signs() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up = [2.0, 4.0, 6.0, 8.0];
        let down = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&xs, &[1.0, 1.0, 1.0, 1.0]).is_none());
        assert!(pearson(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            name = "demo"
            model = "qwen3-4b"
            modes = ["hybrid", "dedicated-pim"]
            qps = [1.0, 2.0]
            seed = 7

            [trace]
            preset = "api-short"
            requests = 50
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.modes.len(), 2);
        assert_eq!(cfg.resolve_model().unwrap().name, "qwen3-4b");
        assert!(matches!(cfg.trace, TraceSource::Synth { .. }));
    }

    #[test]
    fn rejects_bad_grid() {
        let text = r#"
            model = "qwen3-4b"
            modes = ["hybrid"]
            qps = []
            [trace]
            preset = "api-short"
            requests = 10
        "#;
        assert!(ExperimentConfig::from_toml(text).is_err());
    }
}
