//! `eval`: deterministic ring episodes for a checkpoint or the all-human
//! baseline.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ringflow::policy::PolicyParams;
use ringflow::rng::derive_seed;
use ringflow::trpo::{run_eval_episode, EvalEpisode};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{build_hash, RunDir, RunManifest};

pub const HUMAN_POLICY_ID: &str = "human";

/// Load a checkpoint and check it against the configured architecture.
pub fn load_policy(path: &Path, cfg: &ExperimentConfig) -> CliResult<PolicyParams> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let params = PolicyParams::read_checkpoint(BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let layout = params.layout();
    let expected_obs = cfg.ring.obs_dim();
    if layout.input != expected_obs || layout.hidden != cfg.train.policy_hidden {
        return Err(CliError::Architecture(format!(
            "{} has obs={} hidden={:?} but the config expects obs={} hidden={:?}",
            path.display(),
            layout.input,
            layout.hidden,
            expected_obs,
            cfg.train.policy_hidden
        )));
    }
    Ok(params)
}

/// Stem of the checkpoint file, or `human`.
pub fn policy_id(checkpoint: Option<&Path>) -> String {
    checkpoint
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| HUMAN_POLICY_ID.to_string())
}

pub fn episode_seeds(base: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|k| derive_seed(base, "eval-episode", k)).collect()
}

#[derive(Debug, Clone, Serialize)]
struct EpisodeRow<'a> {
    policy_id: &'a str,
    episode: usize,
    seed: u64,
    circumference: f64,
    metric_m: f64,
    mean_return: f64,
    min_speed: f64,
    steps: usize,
    collided: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub policy_id: String,
    pub episodes: usize,
    pub mean_m: f64,
    pub std_m: f64,
    pub collisions: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub dir: PathBuf,
    pub summary: EvalSummary,
    pub episodes: Vec<EvalEpisode>,
}

pub fn trace_file(episode: usize) -> String {
    format!("traces/episode_{episode:03}.csv")
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    episodes: usize,
    seed: u64,
    traces: bool,
    out: &Path,
) -> CliResult<EvalReport> {
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let params = checkpoint.map(|p| load_policy(p, cfg)).transpose()?;
    let id = policy_id(checkpoint);
    let seeds = episode_seeds(seed, episodes);
    let mut outputs = vec!["metrics.csv".to_string(), "summary.csv".to_string()];
    if traces {
        outputs.extend((0..episodes).map(trace_file));
    }
    let manifest = RunManifest {
        experiment_id: cfg.run.experiment_id.clone(),
        command: "eval".into(),
        config_hash: cfg.config_hash(),
        seeds: vec![seed],
        build_hash: build_hash(),
        outputs,
    };
    let run = RunDir::begin(out, manifest)?;
    run.guard(|run| {
        let env = cfg.ring_env();
        let mut results = Vec::with_capacity(episodes);
        for (k, &s) in seeds.iter().enumerate() {
            let (ep, trace) = run_eval_episode(params.as_ref(), &env, s, traces)?;
            if let Some(trace) = trace {
                let mut buf = Vec::new();
                trace.write_csv(&mut buf)?;
                run.write(&trace_file(k), &buf)?;
            }
            log::info!("episode {k}: m = {:.4}", ep.metric_m);
            results.push(ep);
        }
        let rows = results.iter().enumerate().map(|(k, e)| EpisodeRow {
            policy_id: &id,
            episode: k,
            seed: e.seed,
            circumference: e.circumference,
            metric_m: e.metric_m,
            mean_return: e.mean_return,
            min_speed: e.min_speed,
            steps: e.steps,
            collided: e.collided,
        });
        run.write("metrics.csv", &csv_bytes(rows)?)?;
        let ms: Vec<f64> = results.iter().map(|e| e.metric_m).collect();
        let (mean_m, std_m) = mean_std(&ms);
        let summary = EvalSummary {
            policy_id: id.clone(),
            episodes,
            mean_m,
            std_m,
            collisions: results.iter().filter(|e| e.collided).count(),
        };
        run.write("summary.csv", &csv_bytes([&summary])?)?;
        Ok(EvalReport { dir: run.root().to_path_buf(), summary, episodes: results })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::checkpoint_bytes;
    use ringflow::mlp::MlpLayout;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&["ring.horizon_steps=150".into(), "train.policy_hidden=[8]".into()])
            .unwrap()
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let params = PolicyParams::zeros(MlpLayout::new(15, &[4]));
        std::fs::write(&path, checkpoint_bytes(&params)).unwrap();
        let err = load_policy(&path, &small_cfg()).unwrap_err();
        assert!(matches!(err, CliError::Architecture(_)), "{err}");
        let ok = PolicyParams::zeros(MlpLayout::new(15, &[8]));
        std::fs::write(&path, checkpoint_bytes(&ok)).unwrap();
        assert_eq!(load_policy(&path, &small_cfg()).unwrap(), ok);
    }

    #[test]
    fn eval_writes_planned_files() {
        let dir = tempfile::tempdir().unwrap();
        let rep = cmd_eval(&small_cfg(), None, 2, 3, true, dir.path()).unwrap();
        assert_eq!(rep.summary.policy_id, HUMAN_POLICY_ID);
        assert_eq!(rep.episodes.len(), 2);
        for f in ["metrics.csv", "summary.csv", "traces/episode_000.csv", "traces/episode_001.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("policy_id,episode,seed,circumference,metric_m"));
        assert_eq!(metrics.lines().count(), 3);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
