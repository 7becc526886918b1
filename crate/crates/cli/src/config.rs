//! Run configuration: a flat `key = value` text file with `#` comments,
//! overridable per key from the command line via `--set key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use lesionlab::dataset::SynthConfig;
use lesionlab::loss::{LossConfig, LossMode};
use lesionlab::model::{NetworkConfig, TrainSchedule};

/// Parsed key-value pairs, later keys winning.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    values: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn from_file(path: &Path) -> Result<KeyValues> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut kv = KeyValues::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected `key = value`", path.display(), idx + 1))?;
            kv.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(kv)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for pair in overrides {
            let (key, value) = pair
                .split_once('=')
                .with_context(|| format!("--set {pair:?}: expected key=value"))?;
            self.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow::anyhow!("config key {key} = {raw:?}: {e}")),
        }
    }

    fn get_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| anyhow::anyhow!("config key {key} = {raw:?}: {e}"))
                })
                .collect(),
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        Ok(SynthConfig {
            n_labels: self.get("synth.n_labels", d.n_labels)?,
            n_train: self.get("synth.n_train", d.n_train)?,
            n_test: self.get("synth.n_test", d.n_test)?,
            missing_rate: self.get("synth.missing_rate", d.missing_rate)?,
            spurious_rate: self.get("synth.spurious_rate", d.spurious_rate)?,
            rng_seed: self.get("synth.seed", d.rng_seed)?,
            patch_px: self.get("synth.patch_px", d.patch_px)?,
        })
    }

    pub fn network_config(&self, n_labels: usize) -> Result<NetworkConfig> {
        let d = NetworkConfig::default();
        let channels = self.get_list("net.channels", &d.channels)?;
        let cfg = NetworkConfig {
            n_stages: self.get("net.stages", channels.len())?,
            channels,
            in_channels: self.get("net.in_channels", d.in_channels)?,
            roi_grid: {
                let g = self.get_list("net.roi_grid", &[d.roi_grid.0, d.roi_grid.1])?;
                if g.len() != 2 {
                    bail!("net.roi_grid wants two comma-separated values");
                }
                (g[0], g[1])
            },
            fc_dim: self.get("net.fc_dim", d.fc_dim)?,
            n_labels,
            bbox_roi_stages: self.get_list("net.bbox_stages", &d.bbox_roi_stages)?,
            patch_roi_stages: self.get_list("net.patch_stages", &d.patch_roi_stages)?,
        };
        Ok(cfg)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let d = LossConfig::default();
        let mode: String = self.get("loss.mode", "weighted_bootstrap".to_string())?;
        let cfg = LossConfig {
            mode: LossMode::from_str(&mode).map_err(|e| anyhow::anyhow!(e))?,
            beta: self.get("loss.beta", d.beta)?,
            eps: self.get("loss.eps", d.eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        let d = TrainSchedule::default();
        Ok(TrainSchedule {
            epochs: self.get("train.epochs", d.epochs)?,
            batch_size: self.get("train.batch", d.batch_size)?,
            lr: self.get("train.lr", d.lr)?,
            lr_after_drop: self.get("train.lr_after_drop", d.lr_after_drop)?,
            lr_drop_epoch: self.get("train.lr_drop_epoch", d.lr_drop_epoch)?,
            momentum: self.get("train.momentum", d.momentum)?,
            seed: self.get("train.seed", d.seed)?,
        })
    }

    pub fn eval_k(&self) -> Result<usize> {
        self.get("eval.k", 5)
    }

    pub fn eval_min_count(&self) -> Result<usize> {
        self.get("eval.min_count", 5)
    }

    /// Labels additionally need strictly more than this many positives in
    /// the mined training set; the default of 0 drops labels that would
    /// train with no positive example at all.
    pub fn eval_min_train_count(&self) -> Result<usize> {
        self.get("eval.min_train_count", 0)
    }

    /// Renders the resolved configuration back out as `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

/// Loads the optional config file and applies `--set` overrides.
pub fn resolve(config_path: Option<&Path>, overrides: &[String]) -> Result<KeyValues> {
    let mut kv = match config_path {
        Some(p) => KeyValues::from_file(p)?,
        None => KeyValues::default(),
    };
    kv.apply_overrides(overrides)?;
    Ok(kv)
}
