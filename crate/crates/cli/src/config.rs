//! Run configuration: a flat `key = value` file merged with `--set` flags.
//!
//! Keys are the architecture keys (`channels`, `hidden`, `kernel`, `steps`,
//! `fire_rate`, `downsample_factor`, `levels`, `flow_mode`) and the training
//! keys (`learning_rate`, `beta1`, `beta2`, `adam_eps`, `iterations`, `seed`,
//! `checkpoint_every`, `patch_size`, `similarity`, `lambda_smooth`,
//! `lambda_seg`, `ncc_window`, `aux_coarse_weight`). Anything else is an
//! error. Flags win over the file.

use std::fs;
use std::path::Path;

use ncamorph::engine::ArchConfig;
use ncamorph::kvtext::KvText;
use ncamorph::optim::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Keys that were set explicitly (file or flag).
    pub given: KvText,
}

pub fn known_keys() -> Vec<&'static str> {
    ArchConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()).copied().collect()
}

/// Parses `key=value` override flags into one table (later flags win).
pub fn parse_sets(sets: &[String]) -> Result<KvText> {
    let mut kv = KvText::default();
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(CliError::Usage(format!("--set expects key=value, got {s:?}")));
        };
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

/// Config problems are the caller's to fix, so they exit like usage errors.
fn usage(e: ncamorph::Error) -> CliError {
    CliError::Usage(e.to_string())
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut given = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                KvText::parse(&text).map_err(usage)?
            }
            None => KvText::default(),
        };
        let overrides = parse_sets(sets)?;
        for key in overrides.keys() {
            given.set(key, overrides.get_str(key).unwrap_or_default());
        }
        given.reject_unknown(&known_keys()).map_err(usage)?;
        let mut arch = ArchConfig::default();
        arch.update_from_kv(&given).map_err(usage)?;
        arch.validate().map_err(usage)?;
        let mut train = TrainConfig::default();
        train.update_from_kv(&given).map_err(usage)?;
        train.validate().map_err(usage)?;
        Ok(Self { arch, train, given })
    }

    /// Every key with its resolved value, sorted.
    pub fn to_text(&self) -> String {
        let mut kv = KvText::default();
        self.arch.write_kv(&mut kv);
        self.train.write_kv(&mut kv);
        kv.to_text()
    }

    /// True when any architecture key was set explicitly.
    pub fn arch_given(&self) -> bool {
        self.given.keys().any(|k| ArchConfig::KEYS.contains(&k))
    }

    pub fn log(&self, command: &str) {
        log::info!("{command}: resolved config\n{}", self.to_text().trim_end());
    }
}
