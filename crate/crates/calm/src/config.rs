//! Experiment configuration files.

use std::path::{Path, PathBuf};

use calm_core::backbone::BackboneConfig;
use calm_core::heads::rq::RqConfig;
use calm_core::heads::{HeadConfig, HeadKind};
use calm_core::model::{HeadSpec, ModelConfig};
use calm_core::optim::AdamConfig;
use calm_core::sampling::SamplerConfig;
use calm_core::source::vae::VaeConfig;
use calm_core::source::waveform::WaveformSpec;
use calm_core::source::{MixtureComponent, SourceKind, SyntheticSourceSpec};
use calm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub source: SourceSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub head: HeadSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub vae: VaeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub weight: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    /// `gaussian-ar`, `gaussian-mixture-ar` or `toy-vae`.
    pub kind: String,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    #[serde(default = "d_count")]
    pub count: usize,
    #[serde(default = "d_ar")]
    pub ar_coeff: f64,
    #[serde(default = "d_one")]
    pub innovation_scale: f64,
    #[serde(default)]
    pub mixture: Vec<MixtureEntry>,
    #[serde(default = "d_frame_rate")]
    pub frame_rate: f64,
    /// Trained VAE checkpoint for `toy-vae` corpora.
    #[serde(default)]
    pub vae_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub model_dim: usize,
    pub mlp_dim: Option<usize>,
    pub heads: usize,
    pub layers: usize,
    pub short_layers: usize,
    pub short_context: usize,
    pub short_enabled: bool,
    pub noise_injection: bool,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            model_dim: 32,
            mlp_dim: None,
            heads: 2,
            layers: 1,
            short_layers: 1,
            short_context: 10,
            short_enabled: true,
            noise_injection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    /// `consistency`, `trigflow` or `rq`.
    pub kind: String,
    pub width: usize,
    pub blocks: usize,
    pub mlp_dim: Option<usize>,
    pub time_frequencies: usize,
    pub weight_hidden: usize,
    /// Codebook sizes for the discrete head, one per level.
    pub codebooks: Vec<usize>,
    pub rq_heads: usize,
    pub rq_layers: usize,
    pub rvq_steps: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            kind: "consistency".into(),
            width: 64,
            blocks: 2,
            mlp_dim: None,
            time_frequencies: 16,
            weight_hidden: 32,
            codebooks: vec![16; 8],
            rq_heads: 2,
            rq_layers: 1,
            rvq_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: Option<PathBuf>,
    pub batch_size: usize,
    pub head_batch: usize,
    pub lr: f64,
    pub total_steps: u64,
    pub warmup_steps: Option<u64>,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub ema_decay: Option<f64>,
    pub clip_tangent: bool,
    pub adaptive_weight: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub precision: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            corpus: None,
            batch_size: 32,
            head_batch: 8,
            lr: 1e-3,
            total_steps: 20_000,
            warmup_steps: None,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            ema_decay: None,
            clip_tangent: true,
            adaptive_weight: true,
            checkpoint_every: 1000,
            log_every: 100,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub temperature: f64,
    pub max_frames: usize,
    pub prompt_frames: usize,
    pub allow_untrained: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            steps: 1,
            temperature: 1.0,
            max_frames: 64,
            prompt_frames: 8,
            allow_untrained: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub generations: usize,
    pub embed_dim: usize,
    pub embed_window: usize,
    pub embed_seed: u64,
    pub bootstrap: usize,
    pub bench_runs: usize,
    pub bench_warmups: usize,
    pub oracle_histories: usize,
    pub oracle_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            generations: 200,
            embed_dim: 16,
            embed_window: 4,
            embed_seed: 0,
            bootstrap: 100,
            bench_runs: 20,
            bench_warmups: 3,
            oracle_histories: 50,
            oracle_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub window: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub kl_weight: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Use posterior samples (rather than means) as latents.
    pub sample_posterior: bool,
}

impl Default for VaeSection {
    fn default() -> Self {
        VaeSection {
            window: 32,
            frames: 16,
            latent_dim: 8,
            model_dim: 32,
            heads: 2,
            layers: 1,
            kl_weight: 0.01,
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            sample_posterior: true,
        }
    }
}

fn d_channels() -> usize {
    4
}
fn d_seq_len() -> usize {
    64
}
fn d_count() -> usize {
    1024
}
fn d_ar() -> f64 {
    0.9
}
fn d_one() -> f64 {
    1.0
}
fn d_frame_rate() -> f64 {
    25.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that need no compute: value ranges and referenced files.
    pub fn validate(&self) -> Result<(), CliError> {
        self.source_spec().validate()?;
        self.head_kind()?;
        self.model_config()?;
        self.train_config().validate()?;
        match self.train.precision.as_str() {
            "f32" | "f64" => {}
            p => {
                return Err(CliError::Config(format!(
                    "precision must be f32 or f64, got {p}"
                )))
            }
        }
        for p in [&self.train.corpus, &self.source.vae_checkpoint]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "referenced file {} does not exist",
                    p.display()
                )));
            }
        }
        if self.source.kind == "toy-vae" && self.source.channels != self.vae.latent_dim {
            return Err(CliError::Config(
                "toy-vae channels must equal vae.latent_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn source_kind(&self) -> Result<SourceKind, CliError> {
        match self.source.kind.as_str() {
            "gaussian-ar" => Ok(SourceKind::GaussianAr),
            "gaussian-mixture-ar" | "mixture-ar" => Ok(SourceKind::GaussianMixtureAr),
            "toy-vae" => Ok(SourceKind::ToyVae),
            k => Err(CliError::Config(format!("unknown source kind {k}"))),
        }
    }

    pub fn source_spec(&self) -> SyntheticSourceSpec {
        let s = &self.source;
        let kind = self.source_kind().unwrap_or(SourceKind::GaussianAr);
        let mixture = if s.mixture.is_empty() {
            vec![MixtureComponent {
                weight: 1.0,
                mean: 0.0,
            }]
        } else {
            s.mixture
                .iter()
                .map(|m| MixtureComponent {
                    weight: m.weight,
                    mean: m.mean,
                })
                .collect()
        };
        SyntheticSourceSpec {
            kind,
            channels: s.channels,
            seq_len: s.seq_len,
            frame_rate: s.frame_rate,
            ar_coeff: s.ar_coeff,
            innovation_scale: s.innovation_scale,
            mixture,
        }
    }

    pub fn head_kind(&self) -> Result<HeadKind, CliError> {
        Ok(HeadKind::parse(&self.head.kind)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let b = &self.backbone;
        let mut backbone =
            BackboneConfig::new(self.source.channels, b.model_dim, b.heads, b.layers);
        backbone.mlp_dim = b.mlp_dim.unwrap_or(2 * b.model_dim);
        backbone.short_layers = b.short_layers;
        backbone.short_context = b.short_context;
        backbone.short_enabled = b.short_enabled;
        backbone.noise_injection = b.noise_injection;
        backbone.validate()?;
        let h = &self.head;
        let head = match self.head_kind()? {
            HeadKind::Rq => HeadSpec::Rq(RqConfig {
                cond_dim: b.model_dim,
                sizes: h.codebooks.clone(),
                width: h.width,
                mlp_dim: h.mlp_dim.unwrap_or(2 * h.width),
                heads: h.rq_heads,
                layers: h.rq_layers,
            }),
            kind => {
                let mut hc = HeadConfig::new(self.source.channels, b.model_dim, h.width, h.blocks);
                hc.mlp_dim = h.mlp_dim.unwrap_or(2 * h.width);
                hc.time_frequencies = h.time_frequencies;
                hc.weight_hidden = h.weight_hidden;
                if kind == HeadKind::Consistency {
                    HeadSpec::Consistency(hc)
                } else {
                    HeadSpec::TrigFlow(hc)
                }
            }
        };
        Ok(ModelConfig { backbone, head })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig {
            batch_size: t.batch_size,
            head_batch: t.head_batch,
            lr: t.lr,
            total_steps: t.total_steps,
            warmup_steps: t.warmup_steps,
            adam: AdamConfig {
                weight_decay: t.weight_decay,
                clip_norm: t.clip_norm,
                ..AdamConfig::default()
            },
            seed: self.seed,
            ema_decay: t.ema_decay,
            ..TrainConfig::default()
        };
        cfg.consistency.clip_tangent = t.clip_tangent;
        cfg.consistency.adaptive_weight = t.adaptive_weight;
        cfg
    }

    pub fn sampler_config(&self, seed: u64) -> Result<SamplerConfig, CliError> {
        let s = &self.sample;
        let mut cfg = SamplerConfig::new(
            self.head_kind()?,
            s.steps,
            s.temperature,
            seed,
            s.max_frames,
        );
        cfg.allow_untrained = s.allow_untrained;
        Ok(cfg)
    }

    pub fn waveform_spec(&self) -> WaveformSpec {
        WaveformSpec {
            window: self.vae.window,
            frames: self.vae.frames,
            ..WaveformSpec::default()
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        let v = &self.vae;
        VaeConfig {
            window: v.window,
            latent_dim: v.latent_dim,
            model_dim: v.model_dim,
            mlp_dim: 2 * v.model_dim,
            heads: v.heads,
            layers: v.layers,
            kl_weight: v.kl_weight,
            frame_rate: self.source.frame_rate,
            ..VaeConfig::default()
        }
    }
}
