//! Resumable training state. Everything the loop needs to continue — current
//! and best parameters, optimizer moments, counters — goes into one archive
//! file; random streams are re-derived from (seed, epoch, index), so no
//! generator state is stored. A resumed run replays the exact trajectory of
//! an uninterrupted one.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::{config_entries, config_from_archive, read_archive, write_archive, Archive};
use crate::model::ModelParams;
use crate::scalar::Scalar;

use super::optim::Adam;
use super::TrainConfig;

#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub params: ModelParams<S>,
    pub adam: Adam<S>,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub best: ModelParams<S>,
    pub best_epoch: usize,
    pub best_auc: f64,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(params: ModelParams<S>) -> Self {
        let adam = Adam::new(&params);
        let best = params.clone();
        Self { params, adam, epoch: 0, best, best_epoch: 0, best_auc: f64::NEG_INFINITY }
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut config = config_entries(self.params.config());
        config.push(("epoch".into(), self.epoch.to_string()));
        config.push(("adam_t".into(), self.adam.t.to_string()));
        config.push(("best_epoch".into(), self.best_epoch.to_string()));
        config.push(("best_auc".into(), format!("{}", self.best_auc)));
        for (k, v) in cfg.echo_entries() {
            config.push((k, v));
        }
        let mut tensors = Vec::new();
        let as_f32 = |data: &[S]| data.iter().map(|&v| v.to_f64() as f32).collect::<Vec<f32>>();
        for (i, (name, t)) in self.params.leaves().into_iter().enumerate() {
            tensors.push((format!("param.{name}"), t.shape().to_vec(), as_f32(t.data())));
            tensors.push((format!("adam_m.{name}"), t.shape().to_vec(), as_f32(&self.adam.m[i])));
            tensors.push((format!("adam_v.{name}"), t.shape().to_vec(), as_f32(&self.adam.v[i])));
        }
        for (name, t) in self.best.leaves() {
            tensors.push((format!("best.{name}"), t.shape().to_vec(), as_f32(t.data())));
        }
        write_archive(path, &Archive { config, tensors })
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let archive = read_archive(path)?;
        let model_cfg = config_from_archive(&archive, path)?;
        cfg.check_echo(&archive, path)?;
        let get = |key: &str| -> Result<&str> {
            archive.lookup(key).ok_or_else(|| {
                Error::Format(format!("{}: missing state field {key}", path.display()))
            })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| {
                Error::Format(format!("{}: malformed state field {key}", path.display()))
            })
        };
        let mut params = ModelParams::<S>::init(&model_cfg)?;
        let mut best = ModelParams::<S>::init(&model_cfg)?;
        let sub = |prefix: &str| -> Archive {
            Archive {
                config: archive.config.clone(),
                tensors: archive
                    .tensors
                    .iter()
                    .filter(|(n, _, _)| n.starts_with(prefix))
                    .map(|(n, s, d)| (n[prefix.len()..].to_string(), s.clone(), d.clone()))
                    .collect(),
            }
        };
        params.load_tensors(&sub("param."), path)?;
        best.load_tensors(&sub("best."), path)?;
        let mut adam = Adam::new(&params);
        adam.t = get("adam_t")?.parse().map_err(|_| {
            Error::Format(format!("{}: malformed state field adam_t", path.display()))
        })?;
        let moments = sub("adam_m.");
        let variance = sub("adam_v.");
        for (i, (name, t)) in params.leaves().into_iter().enumerate() {
            for (store, archive_part, tag) in
                [(&mut adam.m, &moments, "adam_m"), (&mut adam.v, &variance, "adam_v")]
            {
                let (_, shape, data) = archive_part
                    .tensors
                    .iter()
                    .find(|(n, _, _)| *n == name)
                    .ok_or_else(|| {
                        Error::Format(format!("{}: missing {tag}.{name}", path.display()))
                    })?;
                if shape.as_slice() != t.shape() {
                    return Err(Error::Format(format!(
                        "{}: {tag}.{name} shape mismatch",
                        path.display()
                    )));
                }
                store[i] = data.iter().map(|&v| S::from_f64(v as f64)).collect();
            }
        }
        let best_auc: f64 = get("best_auc")?.parse().map_err(|_| {
            Error::Format(format!("{}: malformed state field best_auc", path.display()))
        })?;
        Ok(Self {
            params,
            adam,
            epoch: parse_usize("epoch")?,
            best,
            best_epoch: parse_usize("best_epoch")?,
            best_auc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn state_round_trips_exactly() {
        let cfg = ModelConfig {
            maps: 3,
            labels: 2,
            input: (16, 16),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 13,
        };
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let mut state = TrainState::new(params);
        state.epoch = 3;
        state.adam.t = 77;
        state.best_epoch = 2;
        state.best_auc = 0.875;
        for plane in state.adam.m.iter_mut().chain(state.adam.v.iter_mut()) {
            for (j, v) in plane.iter_mut().enumerate() {
                *v = (j as f32 * 0.001).sin() * 0.01;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("state.xpln");
        let tcfg = tiny_train_cfg();
        state.save(&p, &tcfg).unwrap();
        let loaded = TrainState::<f32>::load(&p, &tcfg).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.adam.t, 77);
        assert_eq!(loaded.best_epoch, 2);
        assert_eq!(loaded.best_auc, 0.875);
        assert_eq!(loaded.adam.m, state.adam.m);
        assert_eq!(loaded.adam.v, state.adam.v);
        for ((_, a), (_, b)) in loaded.params.leaves().iter().zip(state.params.leaves().iter()) {
            assert_eq!(a.data(), b.data());
        }
        // saving again must be byte-identical
        let q = dir.path().join("state2.xpln");
        loaded.save(&q, &tcfg).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn mismatched_settings_are_rejected() {
        let cfg = ModelConfig {
            maps: 2,
            labels: 1,
            input: (8, 8),
            in_channels: 1,
            encoder_widths: vec![4],
            decoder_width: 4,
            seed: 1,
        };
        let state = TrainState::new(ModelParams::<f32>::init(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("state.xpln");
        let tcfg = tiny_train_cfg();
        state.save(&p, &tcfg).unwrap();
        let mut other = tiny_train_cfg();
        other.seed = tcfg.seed + 1;
        match TrainState::<f32>::load(&p, &other) {
            Err(Error::Config(msg)) => assert!(msg.contains("seed"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
