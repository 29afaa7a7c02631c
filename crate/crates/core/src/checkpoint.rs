//! Checkpoint directories: one `.pmft` file per parameter plus two text files.
//!
//! ```text
//! ckpt/
//!   config.txt                      full run config, as written by `init`
//!   meta.txt                        config_hash, step, params
//!   vfe.local_rgb.block0.attn.wq.pmft
//!   ...
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::pmft::{read_pmft, write_pmft};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

pub const CONFIG_FILE: &str = "config.txt";
pub const META_FILE: &str = "meta.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// [`RunConfig::model_hash`] of the config the parameters belong to.
    pub config_hash: String,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: usize,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        format!(
            "config_hash = {}\nstep = {}\nparams = {}\n",
            self.config_hash, self.step, self.params
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let mut hash = None;
        let mut step = None;
        let mut params = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("checkpoint meta", format!("bad line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: std::num::ParseIntError| Error::config(format!("checkpoint meta {k}"), e.to_string());
            match k {
                "config_hash" => hash = Some(v.to_string()),
                "step" => step = Some(v.parse().map_err(bad)?),
                "params" => params = Some(v.parse().map_err(bad)?),
                other => return Err(Error::config(format!("checkpoint meta {other}"), "unknown key")),
            }
        }
        let missing = |k: &str| Error::config(format!("checkpoint meta {k}"), "missing");
        Ok(CheckpointMeta {
            config_hash: hash.ok_or_else(|| missing("config_hash"))?,
            step: step.ok_or_else(|| missing("step"))?,
            params: params.ok_or_else(|| missing("params"))?,
        })
    }
}

/// Write `store` under `dir`, creating it. Existing parameter files with the
/// same names are overwritten; nothing else in `dir` is touched.
pub fn save_checkpoint<T: Element>(
    dir: impl AsRef<Path>,
    cfg: &RunConfig,
    store: &ParamStore<T>,
    step: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in store.iter() {
        write_pmft(dir.join(format!("{name}.pmft")), t)?;
    }
    let meta = CheckpointMeta {
        config_hash: cfg.model_hash(),
        step,
        params: store.len(),
    };
    let write = |file: &str, text: String| {
        let p = dir.join(file);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(CONFIG_FILE, cfg.to_text())?;
    write(META_FILE, meta.to_text())
}

pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
}

/// Load a checkpoint, checking the hash and that exactly the parameters the
/// config's model needs are present with the right shapes.
pub fn load_checkpoint<T: Element>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
        ));
    }
    let read = |file: &str| {
        let p = dir.join(file);
        fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let config = RunConfig::parse(&read(CONFIG_FILE)?)?;
    let meta = CheckpointMeta::parse(&read(META_FILE)?)?;
    if meta.config_hash != config.model_hash() {
        return Err(Error::config(
            "checkpoint meta config_hash",
            "does not match the stored config",
        ));
    }
    let specs = config.model.param_specs();
    if meta.params != specs.len() {
        return Err(Error::config(
            "checkpoint meta params",
            format!("{} recorded, model has {}", meta.params, specs.len()),
        ));
    }
    let mut params = ParamStore::new();
    for spec in &specs {
        let t = read_pmft::<T>(dir.join(format!("{}.pmft", spec.name)))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: spec.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        params.insert(spec.name.clone(), t);
    }
    Ok(Checkpoint { config, meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn tiny_roundtrip_is_bit_exact() {
        let cfg = RunConfig::preset(Preset::Tiny);
        let store = ParamStore::<f32>::init(&cfg.model.param_specs(), 3);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &store, 17).unwrap();
        let ck = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.meta.step, 17);
        for (name, t) in store.iter() {
            let back = ck.params.get(name).unwrap();
            let same = t
                .data()
                .iter()
                .zip(back.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same && t.shape() == back.shape(), "{name}");
        }
    }

    #[test]
    fn tampered_config_is_detected() {
        let cfg = RunConfig::preset(Preset::Tiny);
        let store = ParamStore::<f32>::init(&cfg.model.param_specs(), 0);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &store, 0).unwrap();
        let p = dir.path().join(CONFIG_FILE);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("model.variant = full", "model.variant = v6");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn missing_directory_and_parameter() {
        assert!(matches!(
            load_checkpoint::<f32>("/nonexistent/ckpt"),
            Err(Error::Io { .. })
        ));
        let cfg = RunConfig::preset(Preset::Tiny);
        let store = ParamStore::<f32>::init(&cfg.model.param_specs(), 0);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &store, 0).unwrap();
        fs::remove_file(dir.path().join("head.fc2.b.pmft")).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Io { .. })));
    }
}
