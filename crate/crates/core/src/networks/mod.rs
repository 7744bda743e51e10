//! Encoder, weight-shared depth decoder and view-synthesis decoder.

mod config;
mod decoder;
mod encoder;
pub mod layers;
pub mod tensorfile;
pub mod vgg;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewsynth_tensor::{Element, ParamStore, Session, Var};

pub use config::ModelConfig;
pub use decoder::{sigmoid_to_depth, Decoder, DecoderHead};
pub use encoder::{Encoder, EncoderOutput};
pub use tensorfile::{read_tensors, write_tensors, TensorFile};

use crate::warp::WarpOutput;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "viewsynth-checkpoint-v1";

/// All learned components plus their parameters.
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub depth_decoder: Decoder,
    pub nvs_decoder: Decoder,
}

impl<T: Element> Model<T> {
    /// Randomly initialized model; the encoder is then overwritten from
    /// `encoder_weights` when `pretrained_encoder` is set.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &config);
        let depth_decoder = Decoder::new(
            &mut store,
            &mut rng,
            "depth_decoder",
            &config,
            DecoderHead::Depth {
                d_min: config.d_min,
                d_max: config.d_max,
            },
            config.depth_skips,
        );
        let nvs_decoder = Decoder::new(
            &mut store,
            &mut rng,
            "nvs_decoder",
            &config,
            DecoderHead::Image,
            config.nvs_skips,
        );
        let mut model = Self {
            config,
            store,
            encoder,
            depth_decoder,
            nvs_decoder,
        };
        if model.config.pretrained_encoder {
            let path = model.config.encoder_weights.clone().expect("validated");
            model.load_encoder_weights(&path)?;
        }
        Ok(model)
    }

    /// Copies ResNet weights (torchvision names, with or without an
    /// `encoder.` prefix) into the encoder. The embedding head is kept.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<usize> {
        let file = read_tensors::<T>(path)?;
        let mut loaded = 0;
        for (name, value) in file.tensors {
            let name = if name.starts_with("encoder.") {
                name
            } else {
                format!("encoder.{name}")
            };
            if name.starts_with("encoder.fc.") {
                continue;
            }
            let Some(id) = self.store.id(&name) else {
                continue;
            };
            if self.store.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: `{name}` has shape {:?}, model expects {:?}",
                    path.display(),
                    value.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set(id, value);
            loaded += 1;
        }
        if loaded == 0 {
            return Err(Error::Checkpoint(format!(
                "{}: no encoder tensors found",
                path.display()
            )));
        }
        Ok(loaded)
    }

    pub fn num_points(&self) -> usize {
        self.config.num_points()
    }

    pub fn encode<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        image: Var<'g, T>,
    ) -> Result<EncoderOutput<'g, T>> {
        self.encoder.forward(sess, image)
    }

    /// Depth pyramid at scales 1 .. 1/16. Both source- and target-view calls
    /// go through this one decoder.
    pub fn decode_depth<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        z: Var<'g, T>,
        skips: &[WarpOutput<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        self.depth_decoder.forward(sess, z, skips)
    }

    /// RGB pyramid at scales 1 .. 1/16.
    pub fn decode_nvs<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        z: Var<'g, T>,
        skips: &[WarpOutput<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        self.nvs_decoder.forward(sess, z, skips)
    }

    /// Checksum over the parameters whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> f64 {
        self.store
            .checksum(self.store.ids_with_prefix(prefix).collect::<Vec<_>>())
    }

    /// Writes every parameter and buffer with the config and `extra` as
    /// metadata.
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let tensors: Vec<_> = self
            .store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.get(id).clone()))
            .collect();
        let mut meta: HashMap<String, String> = extra
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("dtype".into(), T::DTYPE.into());
        meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        write_tensors(path, &tensors, meta)
    }

    /// Rebuilds a model from a checkpoint; every stored tensor must match a
    /// model parameter by name and shape and vice versa.
    pub fn load(path: &Path) -> Result<(Self, HashMap<String, String>)> {
        let file = read_tensors::<T>(path)?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        match file.metadata.get("format") {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            other => return Err(bad(format!("unsupported format tag {other:?}"))),
        }
        let cfg_json = file
            .metadata
            .get("model_config")
            .ok_or_else(|| bad("missing model_config".into()))?;
        let mut config: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| bad(e.to_string()))?;
        config.pretrained_encoder = false;
        let mut model = Self::new(config, 0)?;
        if file.tensors.len() != model.store.len() {
            return Err(bad(format!(
                "{} tensors stored, model has {}",
                file.tensors.len(),
                model.store.len()
            )));
        }
        for (name, value) in file.tensors {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| bad(format!("unknown tensor `{name}`")))?;
            if model.store.get(id).shape() != value.shape() {
                return Err(bad(format!("shape mismatch for `{name}`")));
            }
            model.store.set(id, value);
        }
        Ok((model, file.metadata))
    }
}
