use std::path::Path;

use ndarray::{s, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::transformer::{KvCache, Param, Transformer};
use crate::checkpoint::TensorArchive;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Mat};

pub const BACKBONE_FILE: &str = "backbone.tsa";
pub const BACKBONE_CONFIG_FILE: &str = "backbone.cfg";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_ctx: usize,
    pub vocab_size: usize,
    pub enc_d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_ctx: 512,
            vocab_size: 2000,
            enc_d_model: 128,
            enc_layers: 2,
            enc_heads: 4,
        }
    }
}

impl BackboneConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let d_model = kv.get_or("d_model", d.d_model)?;
        let n_heads = kv.get_or("n_heads", d.n_heads)?;
        let cfg = Self {
            d_model,
            n_layers: kv.get_or("n_layers", d.n_layers)?,
            n_heads,
            max_ctx: kv.get_or("max_ctx", d.max_ctx)?,
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            enc_d_model: kv.get_or("enc_d_model", d_model)?,
            enc_layers: kv.get_or("enc_layers", d.enc_layers)?,
            enc_heads: kv.get_or("enc_heads", n_heads)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("d_model", self.d_model);
        kv.set("n_layers", self.n_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("max_ctx", self.max_ctx);
        kv.set("vocab_size", self.vocab_size);
        kv.set("enc_d_model", self.enc_d_model);
        kv.set("enc_layers", self.enc_layers);
        kv.set("enc_heads", self.enc_heads);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.enc_d_model == 0 || self.enc_heads == 0 || self.enc_d_model % self.enc_heads != 0 {
            return bad(format!(
                "enc_d_model {} must be a positive multiple of enc_heads {}",
                self.enc_d_model, self.enc_heads
            ));
        }
        if self.max_ctx == 0 || self.vocab_size == 0 {
            return bad("max_ctx and vocab_size must be positive".into());
        }
        Ok(())
    }
}

/// The fixed language-model backbone: a causal decoder (prompted model) and a
/// bidirectional encoder (word representations). Never updated after construction.
#[derive(Clone, Debug)]
pub struct FrozenBackbone<F> {
    pub config: BackboneConfig,
    pub decoder: Transformer<Param<F>>,
    pub encoder: Transformer<Param<F>>,
    digest: String,
}

impl<F: Float> FrozenBackbone<F> {
    pub fn new(config: BackboneConfig, decoder: Transformer<Param<F>>, encoder: Transformer<Param<F>>) -> Self {
        let digest = digest_of(&decoder, &encoder);
        Self {
            config,
            decoder,
            encoder,
            digest,
        }
    }

    /// Randomly initialized backbone (used before the self-supervised warm-up and in tests).
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = Transformer::init(&mut rng, config.vocab_size, config.d_model, config.n_layers, config.max_ctx);
        let encoder = Transformer::init(
            &mut rng,
            config.vocab_size,
            config.enc_d_model,
            config.enc_layers,
            config.max_ctx,
        );
        Ok(Self::new(config, decoder, encoder))
    }

    /// Digest recorded at construction.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Digest recomputed from the current weights.
    pub fn current_digest(&self) -> String {
        digest_of(&self.decoder, &self.encoder)
    }

    pub fn verify_frozen(&self, stage: &str) -> Result<()> {
        if self.current_digest() != self.digest {
            return Err(Error::FrozenViolation(stage.to_string()));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Runs `prefix` latent rows followed by `tokens` through the causal decoder.
    ///
    /// Returns the hidden state of every position and logit rows for the final
    /// prefix position (when a prefix is present) and every token position.
    pub fn decoder_forward(&self, prefix: ArrayView2<F>, tokens: &[usize]) -> Result<(Mat<F>, Mat<F>)> {
        let mut cache = KvCache::new(self.config.n_layers, self.config.d_model);
        let p = (prefix.nrows() > 0).then_some(prefix);
        let hidden = self
            .decoder
            .forward_cached(self.config.n_heads, &mut cache, p, tokens, true)?;
        let first = prefix.nrows().saturating_sub(1);
        let logits = self.decoder.logits(hidden.slice(s![first.., ..]));
        Ok((hidden, logits))
    }

    /// Contextualized word representations from the bidirectional encoder (`n × enc_d_model`).
    pub fn encode_bidirectional(&self, tokens: &[usize]) -> Result<Mat<F>> {
        if tokens.is_empty() {
            return Ok(Mat::zeros((0, self.config.enc_d_model)));
        }
        let mut cache = KvCache::new(self.config.enc_layers, self.config.enc_d_model);
        self.encoder
            .forward_cached(self.config.enc_heads, &mut cache, None, tokens, false)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut archive = TensorArchive::new();
        self.decoder.export("decoder.", &mut archive);
        self.encoder.export("encoder.", &mut archive);
        archive.save(&dir.join(BACKBONE_FILE))?;
        self.config.to_kv().save(&dir.join(BACKBONE_CONFIG_FILE))
    }

    /// Loads weights from a tensor archive; the archive defines the frozen digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(BACKBONE_CONFIG_FILE);
        let weights = dir.join(BACKBONE_FILE);
        if !weights.exists() {
            return Err(Error::Staging {
                stage: "backbone".into(),
                missing: format!("{}", weights.display()),
            });
        }
        let config = BackboneConfig::from_kv(&KvConfig::load(&cfg_path)?)?;
        let archive = TensorArchive::load(&weights)?;
        let mut template = Self::random(config.clone(), 0)?;
        template.decoder.import("decoder.", &archive)?;
        template.encoder.import("encoder.", &archive)?;
        Ok(Self::new(config, template.decoder, template.encoder))
    }
}

fn digest_of<F: Float>(decoder: &Transformer<Param<F>>, encoder: &Transformer<Param<F>>) -> String {
    let mut h = Sha256::new();
    let mut feed = |name: &str, p: &Param<F>| {
        h.update(name.as_bytes());
        h.update((p.nrows() as u64).to_le_bytes());
        h.update((p.ncols() as u64).to_le_bytes());
        for v in p.iter() {
            h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
        }
    };
    decoder.visit("decoder.", &mut feed);
    encoder.visit("encoder.", &mut feed);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
