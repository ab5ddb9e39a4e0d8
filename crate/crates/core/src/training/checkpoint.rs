//! Model checkpoints: the tensor container with a JSON header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, ModelParams, ModelSpec};
use crate::preprocess::PreprocessConfig;
use crate::tensor::{io, Real, Tensor};
use crate::training::adam::AdamState;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Arch,
    pub input_size: usize,
    pub channel_ladder: [usize; 4],
    pub seed: u64,
    pub epoch: usize,
    pub spec: ModelSpec,
    pub preprocess: PreprocessConfig,
    /// Present when optimizer moments are stored.
    pub adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<T>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(
        spec: &ModelSpec,
        preprocess: &PreprocessConfig,
        params: ModelParams<T>,
        adam: Option<AdamState<T>>,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                arch: spec.arch,
                input_size: spec.input_size,
                channel_ladder: spec.channel_ladder(),
                seed,
                epoch,
                spec: spec.clone(),
                preprocess: preprocess.clone(),
                adam_step: adam.as_ref().map(|a| a.step),
            },
            params,
            adam,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)?;
        let mut entries: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(k, v)| (k.to_string(), v)).collect();
        if let Some(a) = &self.adam {
            entries.extend(a.m.iter().map(|(k, v)| (format!("{M_PREFIX}{k}"), v)));
            entries.extend(a.v.iter().map(|(k, v)| (format!("{V_PREFIX}{k}"), v)));
        }
        Ok(io::encode(&meta, entries.iter().map(|(k, v)| (k.as_str(), *v))))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let file = io::decode::<T>(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&file.meta).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in file.entries {
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                v.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let params = ModelParams::from_map(params);
        params.check(&meta.spec)?;
        let adam = meta.adam_step.map(|step| AdamState { step, m, v });
        Ok(Checkpoint { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, forward};
    use crate::training::adam::{adam_step, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ModelSpec {
        ModelSpec {
            base_channels: 4,
            ..ModelSpec::new(Arch::Wnet, 16)
        }
    }

    #[test]
    fn save_load_forward_is_bitwise_identical() {
        let spec = spec();
        let params: ModelParams<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i * 7) % 13) as f32 / 6.0 - 1.0);
        let before = forward(&params, &spec, &x).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wnt");
        Checkpoint::new(&spec, &PreprocessConfig::new(16), params, None, 1, 3).save(&path).unwrap();
        let ck = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(ck.meta.epoch, 3);
        assert_eq!(ck.meta.channel_ladder, [4, 8, 16, 32]);
        assert_eq!(forward(&ck.params, &spec, &x).unwrap(), before);
    }

    #[test]
    fn resumed_steps_match_uninterrupted() {
        let spec = spec();
        let init: ModelParams<f64> = build(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let grads = |k: f64| -> BTreeMap<String, Tensor<f64>> {
            init.trainable()
                .map(|(n, t)| (n.to_string(), Tensor::from_fn(t.shape(), |i| ((i as f64 + k) * 0.37).sin())))
                .collect()
        };
        let cfg = AdamConfig::default();

        let mut straight = init.clone();
        let mut s = AdamState::default();
        adam_step(&mut straight, &grads(1.0), &mut s, &cfg).unwrap();
        adam_step(&mut straight, &grads(2.0), &mut s, &cfg).unwrap();

        let mut resumed = init.clone();
        let mut s = AdamState::default();
        adam_step(&mut resumed, &grads(1.0), &mut s, &cfg).unwrap();
        let bytes = Checkpoint::new(&spec, &PreprocessConfig::new(16), resumed, Some(s), 0, 1)
            .encode()
            .unwrap();
        let ck = Checkpoint::<f64>::decode(&bytes).unwrap();
        let (mut resumed, mut s) = (ck.params, ck.adam.unwrap());
        adam_step(&mut resumed, &grads(2.0), &mut s, &cfg).unwrap();
        assert_eq!(resumed, straight);
    }

    #[test]
    fn rejects_mismatched_parameters() {
        let spec = spec();
        let mut params: ModelParams<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.insert("enc.conv1.bias", Tensor::zeros(&[5]));
        let bytes = Checkpoint::new(&spec, &PreprocessConfig::new(16), params, None, 0, 0)
            .encode()
            .unwrap();
        assert!(Checkpoint::<f32>::decode(&bytes).is_err());
    }
}
