//! Flat key-value experiment configuration.
//!
//! The file format is one `key = value` pair per line with `#` comments,
//! keys mirroring the experiment-config field names (`mode`, `epsilon`,
//! `server_epochs`, `client_epochs`, `batch`, `clip`, `seed`, model
//! dimensions, optimizer constants, split fractions, `workers`, ...).
//! Command-line flags are applied after the file, so flags win. The fully
//! resolved configuration is echoed into the run manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use ppfl_core::data::SplitSpec;
use ppfl_core::federation::{ExperimentConfig, Mode};
use ppfl_core::model::PartitionScheme;
use ppfl_core::privacy::Epsilon;

/// Resolved run settings: the experiment config plus runner-level knobs.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub cfg: ExperimentConfig,
    pub split: SplitSpec,
    pub workers: usize,
}

impl RunSettings {
    pub fn desk(mode: Mode, seed: u64) -> Self {
        RunSettings { cfg: ExperimentConfig::desk(mode, seed), split: SplitSpec::default(), workers: 1 }
    }

    /// Every resolved field as flat entries, manifest-ready.
    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let cfg = &self.cfg;
        let mut out = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("mode", cfg.mode.to_string());
        put("epsilon", cfg.dp.epsilon.to_string());
        put("server_epochs", cfg.server_epochs.to_string());
        put("client_epochs", cfg.client_epochs.to_string());
        put("batch", cfg.batch.to_string());
        put("clip", cfg.clip.to_string());
        put("seed", cfg.seed.to_string());
        put("eval_every", cfg.eval_every.to_string());
        put("checkpoint_every", cfg.checkpoint_every.to_string());
        if let Some(b) = cfg.pooled_batch {
            put("pooled_batch", b.to_string());
        }
        put(
            "partition",
            match cfg.scheme() {
                PartitionScheme::EncoderShared => "encoder_shared".to_string(),
                PartitionScheme::AllShared => "all_shared".to_string(),
            },
        );
        put("features", cfg.dims.features.to_string());
        put("window", cfg.dims.window.to_string());
        put("horizon", cfg.dims.horizon.to_string());
        put("hidden", cfg.dims.hidden.to_string());
        put("stack", cfg.dims.stack.to_string());
        put("fc_hidden", cfg.dims.fc_hidden.to_string());
        put("client_beta1", cfg.client_opt.beta1.to_string());
        put("client_beta2", cfg.client_opt.beta2.to_string());
        put("client_eta", cfg.client_opt.eta.to_string());
        put("client_delta", cfg.client_opt.delta.to_string());
        put("server_beta1", cfg.server_opt.beta1.to_string());
        put("server_beta2", cfg.server_opt.beta2.to_string());
        put("server_eta", cfg.server_opt.eta.to_string());
        put("server_delta", cfg.server_opt.delta.to_string());
        put("train_frac", self.split.train.to_string());
        put("val_frac", self.split.val.to_string());
        put("test_frac", self.split.test.to_string());
        put("workers", self.workers.to_string());
        out
    }

    /// Apply one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            value.parse::<T>().with_context(|| format!("bad value for '{key}': '{value}'"))
        }
        let cfg = &mut self.cfg;
        match key {
            "mode" => cfg.mode = Mode::from_str(value).map_err(|e| anyhow::anyhow!("{e}"))?,
            "epsilon" => {
                cfg.dp.epsilon = if value == "off" {
                    Epsilon::Off
                } else {
                    Epsilon::Budget(num::<f64>(key, value)?)
                }
            }
            "server_epochs" => cfg.server_epochs = num(key, value)?,
            "client_epochs" => cfg.client_epochs = num(key, value)?,
            "batch" => cfg.batch = num(key, value)?,
            "clip" => {
                cfg.clip = num(key, value)?;
                cfg.dp.clip = cfg.clip;
            }
            "seed" => cfg.seed = num(key, value)?,
            "eval_every" => cfg.eval_every = num(key, value)?,
            "checkpoint_every" => cfg.checkpoint_every = num(key, value)?,
            "pooled_batch" => cfg.pooled_batch = Some(num(key, value)?),
            "partition" => {
                cfg.partition = Some(match value {
                    "encoder_shared" => PartitionScheme::EncoderShared,
                    "all_shared" => PartitionScheme::AllShared,
                    other => bail!("bad value for 'partition': '{other}'"),
                })
            }
            "features" => cfg.dims.features = num(key, value)?,
            "window" => cfg.dims.window = num(key, value)?,
            "horizon" => cfg.dims.horizon = num(key, value)?,
            "hidden" => cfg.dims.hidden = num(key, value)?,
            "stack" => cfg.dims.stack = num(key, value)?,
            "fc_hidden" => cfg.dims.fc_hidden = num(key, value)?,
            "client_beta1" => cfg.client_opt.beta1 = num(key, value)?,
            "client_beta2" => cfg.client_opt.beta2 = num(key, value)?,
            "client_eta" => cfg.client_opt.eta = num(key, value)?,
            "client_delta" => cfg.client_opt.delta = num(key, value)?,
            "server_beta1" => cfg.server_opt.beta1 = num(key, value)?,
            "server_beta2" => cfg.server_opt.beta2 = num(key, value)?,
            "server_eta" => cfg.server_opt.eta = num(key, value)?,
            "server_delta" => cfg.server_opt.delta = num(key, value)?,
            "train_frac" => self.split.train = num(key, value)?,
            "val_frac" => self.split.val = num(key, value)?,
            "test_frac" => self.split.test = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "profile" => match value {
                "desk" => {
                    let keep = (cfg.mode, cfg.seed);
                    *cfg = ExperimentConfig::desk(keep.0, keep.1);
                }
                "full" => {
                    let keep = (cfg.mode, cfg.seed);
                    *cfg = ExperimentConfig::full_scale(keep.0, keep.1);
                }
                other => bail!("bad value for 'profile': '{other}' (desk|full)"),
            },
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    /// Parse a config file and apply its entries in order.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected 'key = value'", path.display(), i + 1))?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_entries_then_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\nmode = fl\nserver_epochs = 50\nbatch = 16  # trailing comment\n",
        )
        .unwrap();
        let mut settings = RunSettings::desk(Mode::Ppfl, 1);
        settings.apply_file(&path).unwrap();
        assert_eq!(settings.cfg.mode, Mode::Fl);
        assert_eq!(settings.cfg.server_epochs, 50);
        assert_eq!(settings.cfg.batch, 16);
        // Flag-style override wins.
        settings.apply("server_epochs", "7").unwrap();
        assert_eq!(settings.cfg.server_epochs, 7);
    }

    #[test]
    fn epsilon_and_clip_stay_coupled() {
        let mut settings = RunSettings::desk(Mode::Ppfl, 1);
        settings.apply("epsilon", "10").unwrap();
        settings.apply("clip", "120").unwrap();
        assert_eq!(settings.cfg.dp.epsilon, Epsilon::Budget(10.0));
        assert_eq!(settings.cfg.dp.clip, 120.0);
        assert!(settings.cfg.validate().is_ok());
        settings.apply("epsilon", "off").unwrap();
        assert!(settings.cfg.dp.epsilon.is_off());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut settings = RunSettings::desk(Mode::Ppfl, 1);
        assert!(settings.apply("typo_key", "3").is_err());
        assert!(settings.apply("partition", "sideways").is_err());
        assert!(settings.apply("batch", "not-a-number").is_err());
    }

    #[test]
    fn entries_round_trip_through_apply() {
        let settings = RunSettings::desk(Mode::Personalized, 9);
        let entries = settings.to_entries();
        let mut rebuilt = RunSettings::desk(Mode::Ppfl, 1);
        for (k, v) in &entries {
            rebuilt.apply(k, v).unwrap();
        }
        assert_eq!(rebuilt.to_entries(), entries);
    }
}
