//! `transfer`: zero-shot evaluation of ring policies on the bottleneck
//! highway, plus lane-change calibration from the all-human runs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ringflow::highway_env::{run_transfer, write_highway_trace, DelayMetrics, HighwayConfig, LaneChangeRate};
use ringflow::policy::PolicyParams;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::eval::{csv_bytes, load_policy, policy_id, HUMAN_POLICY_ID};
use crate::manifest::{build_hash, RunDir, RunManifest};

/// Lane-change multipliers used to derive ring perturbation rates.
pub const LC_MULTIPLIERS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy_id: String,
    pub seed: u64,
    pub avg_stopped_time: f64,
    pub mean_speed: f64,
    pub throughput: f64,
    pub collisions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneChangeRow {
    pub policy_id: String,
    pub seed: u64,
    pub events: u64,
    pub steps: u64,
    pub per_step: f64,
    pub per_vehicle_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub multiplier: f64,
    pub e_in: f64,
    pub e_out: f64,
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub lane_changes: Vec<LaneChangeRow>,
    pub calibration: Vec<CalibrationRow>,
}

impl TransferReport {
    /// Mean stopped time of one policy across its seeds.
    pub fn mean_stopped_time(&self, policy: &str) -> Option<f64> {
        let xs: Vec<f64> =
            self.summary.iter().filter(|r| r.policy_id == policy).map(|r| r.avg_stopped_time).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

pub fn trajectory_file(policy: &str, seed: u64) -> String {
    format!("trajectories/{policy}_seed{seed}.csv")
}

/// Ring insertion and deletion rates per step for each multiplier.
pub fn calibrate(human_rates: &[LaneChangeRate]) -> Vec<CalibrationRow> {
    if human_rates.is_empty() {
        return Vec::new();
    }
    let base = human_rates.iter().map(|r| r.per_step).sum::<f64>() / human_rates.len() as f64;
    LC_MULTIPLIERS
        .iter()
        .map(|&m| CalibrationRow { multiplier: m, e_in: base * m, e_out: base * m })
        .collect()
}

/// Replace the protocol durations (seconds) when given.
pub fn with_protocol(cfg: &HighwayConfig, warmup: Option<f64>, eval: Option<f64>) -> CliResult<HighwayConfig> {
    let out = HighwayConfig {
        warmup_duration: warmup.unwrap_or(cfg.warmup_duration),
        eval_duration: eval.unwrap_or(cfg.eval_duration),
        ..cfg.clone()
    };
    out.validate()?;
    Ok(out)
}

/// `checkpoints` empty means the all-human baseline only.
pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    include_human: bool,
    seeds: &[u64],
    record: bool,
    out: &Path,
) -> CliResult<TransferReport> {
    if seeds.is_empty() {
        return Err(CliError::Usage("no seeds to run".into()));
    }
    let mut policies: Vec<(String, Option<PolicyParams>)> = Vec::new();
    if include_human || checkpoints.is_empty() {
        policies.push((HUMAN_POLICY_ID.to_string(), None));
    }
    for path in checkpoints {
        policies.push((policy_id(Some(path)), Some(load_policy(path, cfg)?)));
    }
    let unique: BTreeSet<&str> = policies.iter().map(|(id, _)| id.as_str()).collect();
    if unique.len() != policies.len() {
        return Err(CliError::Usage("policy ids (checkpoint file stems) must be distinct".into()));
    }
    let has_human = policies.iter().any(|(_, p)| p.is_none());

    let mut outputs = vec!["summary.csv".to_string(), "lane_change_rate.csv".to_string()];
    if has_human {
        outputs.push("calibration.csv".into());
    }
    if record {
        for (id, _) in &policies {
            outputs.extend(seeds.iter().map(|&s| trajectory_file(id, s)));
        }
    }
    let manifest = RunManifest {
        experiment_id: cfg.run.experiment_id.clone(),
        command: "transfer".into(),
        config_hash: cfg.config_hash(),
        seeds: seeds.to_vec(),
        build_hash: build_hash(),
        outputs,
    };
    let run = RunDir::begin(out, manifest)?;
    run.guard(|run| {
        let mut summary = Vec::new();
        let mut lane_changes = Vec::new();
        let mut human_rates = Vec::new();
        for (id, params) in &policies {
            for &seed in seeds {
                let outcome = run_transfer(&cfg.highway, params.as_ref(), seed, record)?;
                if let Some(rows) = &outcome.trace {
                    let mut buf = Vec::new();
                    write_highway_trace(&mut buf, rows)?;
                    run.write(&trajectory_file(id, seed), &buf)?;
                }
                let DelayMetrics { avg_stopped_time, mean_speed, throughput, collisions, .. } = outcome.metrics;
                log::info!("{id} seed {seed}: stopped {avg_stopped_time:.3} s, speed {mean_speed:.3} m/s");
                summary.push(SummaryRow {
                    policy_id: id.clone(),
                    seed,
                    avg_stopped_time,
                    mean_speed,
                    throughput,
                    collisions,
                });
                let lc = outcome.lane_changes;
                lane_changes.push(LaneChangeRow {
                    policy_id: id.clone(),
                    seed,
                    events: lc.events,
                    steps: lc.steps,
                    per_step: lc.per_step,
                    per_vehicle_second: lc.per_vehicle_second,
                });
                if params.is_none() {
                    human_rates.push(lc);
                }
            }
        }
        run.write("summary.csv", &csv_bytes(&summary)?)?;
        run.write("lane_change_rate.csv", &csv_bytes(&lane_changes)?)?;
        let calibration = calibrate(&human_rates);
        if has_human {
            run.write("calibration.csv", &csv_bytes(&calibration)?)?;
        }
        Ok(TransferReport { dir: run.root().to_path_buf(), summary, lane_changes, calibration })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ringflow::highway_env::measure_lc_rate;

    #[test]
    fn calibration_scales_mean_rate() {
        let rates = [measure_lc_rate(30, 1000, 0, 0.4), measure_lc_rate(50, 1000, 0, 0.4)];
        let rows = calibrate(&rates);
        assert_eq!(rows.len(), 4);
        assert!((rows[1].e_in - 0.04).abs() < 1e-15);
        assert!((rows[3].e_out - 0.16).abs() < 1e-15);
        assert!(calibrate(&[]).is_empty());
    }

    #[test]
    fn short_baseline_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.highway = with_protocol(&cfg.highway, Some(20.0), Some(20.0)).unwrap();
        let rep = cmd_transfer(&cfg, &[], false, &[0, 1], true, dir.path()).unwrap();
        assert_eq!(rep.summary.len(), 2);
        assert_eq!(rep.calibration.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(text.starts_with("policy_id,seed,avg_stopped_time,mean_speed,throughput,collisions\n"));
        assert!(dir.path().join(trajectory_file("human", 1)).exists());
    }

    #[test]
    fn protocol_override_validates() {
        let cfg = HighwayConfig::default();
        assert!(with_protocol(&cfg, Some(-1.0), None).is_err());
        let c = with_protocol(&cfg, Some(600.0), Some(300.0)).unwrap();
        assert_eq!((c.warmup_steps(), c.eval_steps()), (1500, 750));
    }
}
