//! The full set of learned components and its checkpoint form.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matcher::MatchingHead;
use crate::motion::MotionEncoder;
use crate::nn::{Checkpoint, ParamStore};
use crate::scalar::Scalar;
use crate::transformer::{MotionTransformer, TransformerConfig};

/// Motion encoder, motion transformer and matching head sharing one
/// parameter store.
#[derive(Debug, Clone)]
pub struct MomaModel<T> {
    pub params: ParamStore<T>,
    pub encoder: MotionEncoder,
    pub transformer: MotionTransformer,
    pub head: MatchingHead,
}

impl<T: Scalar> MomaModel<T> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = MotionEncoder::new(&mut params, config.channels, &mut rng)?;
        let transformer = MotionTransformer::new(&mut params, config.clone(), &mut rng)?;
        let head = MatchingHead::new(&mut params, config.channels, &mut rng)?;
        Ok(Self {
            params,
            encoder,
            transformer,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.transformer.config
    }

    pub fn channels(&self) -> usize {
        self.config().channels
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            meta: serde_json::json!({ "model": self.config() }),
            ..Checkpoint::default()
        };
        ck.insert_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TransformerConfig = ck
            .meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string()))
            })?;
        let mut model = Self::new(config, 0)?;
        ck.restore_store("", &mut model.params)?;
        let expected = model.params.len();
        if ck.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {expected}",
                ck.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// The same model with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> MomaModel<U> {
        MomaModel {
            params: self.params.cast(),
            encoder: self.encoder,
            transformer: self.transformer.clone(),
            head: self.head,
        }
    }
}
