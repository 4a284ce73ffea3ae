//! The full parameter set: both encoders plus the local-alignment weights,
//! and checkpoint I/O for it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, Encoders, Initializer, Loader, ParamRegistry};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::spatial_alignment::{AlignmentParams, LocalWeights};

/// JSON stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoders: Encoders,
    pub align: AlignmentParams,
}

impl Model {
    fn declare(reg: &mut dyn ParamRegistry, cfg: &EncoderConfig) -> Result<Self> {
        let encoders = Encoders::declare(reg, cfg)?;
        let align = AlignmentParams::declare(reg, cfg.proj_dim)?;
        Ok(Self { encoders, align })
    }

    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::declare(&mut Initializer { store: &mut store, rng: &mut rng }, cfg)?;
        Ok((model, store))
    }

    /// Rebuilds the parameter layout over an existing store, checking every shape.
    pub fn from_store(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        let model = Self::declare(&mut Loader { store }, cfg)?;
        if store.len() != count_params(cfg)? {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoders.config
    }

    pub fn local_weights(&self, store: &ParamStore) -> LocalWeights {
        LocalWeights {
            wq: store.get(self.align.wq).clone(),
            wk: store.get(self.align.wk).clone(),
            wq_patch: store.get(self.align.wq_patch).clone(),
            wk_patch: store.get(self.align.wk_patch).clone(),
        }
    }

    pub fn checkpoint_bytes(&self, store: &ParamStore, step: u64) -> Vec<u8> {
        let meta = CheckpointMeta { encoder: self.config().clone(), step };
        store.to_bytes(&serde_json::to_string(&meta).expect("meta serialises"))
    }

    pub fn save(&self, store: &ParamStore, step: u64, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes(store, step)).map_err(|e| Error::io(path, e))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, ParamStore, CheckpointMeta)> {
        let (meta, store) = ParamStore::from_bytes(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let model = Self::from_store(&meta.encoder, &store)?;
        Ok((model, store, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

fn count_params(cfg: &EncoderConfig) -> Result<usize> {
    struct Counter(usize);
    impl ParamRegistry for Counter {
        fn param(&mut self, _: &str, _: usize, _: usize, _: crate::encoders::Init) -> Result<crate::params::ParamId> {
            self.0 += 1;
            Ok(crate::params::ParamId(self.0 - 1))
        }
    }
    let mut c = Counter(0);
    Model::declare(&mut c, cfg)?;
    Ok(c.0)
}
