use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{encode, mean_pool, StubEncoder};
use super::lm::TinyLm;
use super::lora::{attach_qv_adapters, LoraAdapter, LoraTarget};
use super::projection::{project, Projection};
use super::tensor::Matrix;
use super::vocab::Vocab;
use super::weights::{read_weights, write_weights};
use super::{AlignConfig, AlignError};
use crate::octuple::{OctupleToken, QuantConfig};

/// Encoder, projection, language model and adapters with their dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignModel {
    pub config: AlignConfig,
    pub quant: QuantConfig,
    pub encoder: StubEncoder,
    pub projection: Projection,
    pub lm: TinyLm,
    pub adapters: Vec<LoraAdapter>,
}

impl AlignModel {
    /// Seeded random initialization without adapters.
    pub fn new(config: AlignConfig, quant: QuantConfig) -> Result<Self, AlignError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = StubEncoder::new(&quant, config.encoder_dim, config.seed);
        let projection = Projection::new(
            config.encoder_dim,
            config.lm_dim,
            config.prefix_count,
            &mut rng,
        );
        let lm = TinyLm::new(&config, &mut rng);
        Ok(Self {
            config,
            quant,
            encoder,
            projection,
            lm,
            adapters: Vec::new(),
        })
    }

    /// Attaches fresh query/value adapters to every layer if none exist.
    pub fn ensure_adapters(&mut self) {
        if self.adapters.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x6c6f_7261);
            self.adapters = attach_qv_adapters(
                self.config.lm_layers,
                self.config.lm_dim,
                self.config.lora_rank,
                self.config.lora_alpha,
                &mut rng,
            );
        }
    }

    /// Mean-pooled encoder output for a clip.
    pub fn pool(&self, tokens: &[OctupleToken]) -> Result<Vec<f64>, AlignError> {
        mean_pool(&encode(tokens, &self.encoder)?)
    }

    /// Prefix rows for a clip.
    pub fn prefix(&self, tokens: &[OctupleToken]) -> Result<Matrix, AlignError> {
        project(&self.pool(tokens)?, &self.projection)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.projection.named_tensors());
        out.extend(self.lm.named_tensors());
        for a in &self.adapters {
            out.extend(a.named_tensors());
        }
        out
    }

    /// SHA-256 over each parameter group (`encoder`, `projection`, `lm`,
    /// `lora`), hex encoded.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut hashers: BTreeMap<String, Sha256> = BTreeMap::new();
        for (name, m) in self.named_tensors() {
            let group = name.split('.').next().unwrap_or_default().to_string();
            let h = hashers.entry(group).or_default();
            h.update(name.as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hashers
            .into_iter()
            .map(|(k, h)| {
                let digest = h.finalize();
                (k, digest.iter().map(|b| format!("{b:02x}")).collect())
            })
            .collect()
    }

    /// Writes `weights.smaw` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path, vocab: &Vocab, stage: &str) -> Result<(), AlignError> {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        write_weights(&mut buf, self.named_tensors())?;
        crate::io::write_atomic(&dir.join("weights.smaw"), &buf)?;
        let ckpt = Checkpoint {
            config: self.config.clone(),
            quant: self.quant.clone(),
            vocab: vocab.clone(),
            stage: stage.to_string(),
            adapters: self.adapters.iter().map(|a| a.target).collect(),
        };
        let json = serde_json::to_vec_pretty(&ckpt)?;
        crate::io::write_atomic(&dir.join("config.json"), &json)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`AlignModel::save`].
    pub fn load(dir: &Path) -> Result<(Self, Checkpoint), AlignError> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
        let mut model = AlignModel::new(ckpt.config.clone(), ckpt.quant.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.adapters = ckpt
            .adapters
            .iter()
            .map(|&t| {
                LoraAdapter::new(
                    t,
                    model.config.lm_dim,
                    model.config.lm_dim,
                    model.config.lora_rank,
                    model.config.lora_alpha,
                    &mut rng,
                )
            })
            .collect();
        let file = std::fs::File::open(dir.join("weights.smaw"))?;
        let mut tensors: HashMap<String, Matrix> = read_weights(std::io::BufReader::new(file))?
            .into_iter()
            .map(|t| Ok((t.name.clone(), t.to_matrix()?)))
            .collect::<Result<_, AlignError>>()?;
        let mut assign = |name: String, dst: &mut Matrix| -> Result<(), AlignError> {
            let src = tensors
                .remove(&name)
                .ok_or_else(|| AlignError::Weights(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(AlignError::Weights(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
            Ok(())
        };
        for (n, m) in model.encoder.named_tensors_mut() {
            assign(n, m)?;
        }
        for (n, m) in model.projection.named_tensors_mut() {
            assign(n, m)?;
        }
        for (n, m) in model.lm.named_tensors_mut() {
            assign(n, m)?;
        }
        for a in &mut model.adapters {
            for (n, m) in a.named_tensors_mut() {
                assign(n, m)?;
            }
        }
        model.encoder.loaded = true;
        Ok((model, ckpt))
    }
}

/// JSON side of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: AlignConfig,
    pub quant: QuantConfig,
    pub vocab: Vocab,
    pub stage: String,
    pub adapters: Vec<LoraTarget>,
}
