//! Run configuration loaded from TOML. Every section and key is optional;
//! missing values take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ingest::IngestOptions;
use crate::encoder::optim::AdamWConfig;
use crate::encoder::train::TrainConfig;
use crate::encoder::{EncoderConfig, LossWeights};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{Backend, BBox, GridConfig};
use crate::masking::{MaskSpec, MaskStrategy};
use crate::similarity::Pooling;
use crate::synth::SynthConfig;
use crate::tokenizer::TokenizeOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; section seeds left unset fall back to it.
    pub seed: u64,
    /// Porto CSV or trajectory store. When absent, `synth` generates the data.
    pub input: Option<PathBuf>,
    pub execution: Execution,
    pub synth: SynthConfig,
    pub ingest: IngestOptions,
    pub grid: GridSection,
    pub vocab: VocabSection,
    pub tokenize: TokenizeSection,
    pub mask: MaskSection,
    pub encoder: EncoderSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub trace: TraceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            input: None,
            execution: Execution::default(),
            synth: SynthConfig::default(),
            ingest: IngestOptions::default(),
            grid: GridSection::default(),
            vocab: VocabSection::default(),
            tokenize: TokenizeSection::default(),
            mask: MaskSection::default(),
            encoder: EncoderSection::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            trace: TraceSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub backend: Backend,
    pub bbox: BBox,
    pub r_min: u8,
    pub r_max: u8,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            backend: Backend::Quad,
            bbox: BBox::PORTO,
            r_min: 2,
            r_max: 10,
        }
    }
}

impl GridSection {
    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            backend: self.backend,
            bbox: self.bbox,
            r_min: self.r_min,
            r_max: self.r_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub capacity: u64,
    /// When set, the capacity is searched so the vocabulary has at most
    /// this many cells; `capacity` is then ignored.
    pub target_cells: Option<usize>,
    /// When set, every occupied cell at this single resolution forms the
    /// vocabulary instead of the adaptive construction.
    pub fixed_resolution: Option<u8>,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            capacity: 1000,
            target_cells: None,
            fixed_resolution: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeSection {
    pub dedup: bool,
    pub max_len: usize,
    /// Speed normalizer in m/s; computed from training segments if unset.
    pub v_max: Option<f64>,
    pub v_max_quantile: f64,
}

impl Default for TokenizeSection {
    fn default() -> Self {
        TokenizeSection {
            dedup: false,
            max_len: 192,
            v_max: None,
            v_max_quantile: 0.995,
        }
    }
}

impl TokenizeSection {
    pub fn options(&self) -> TokenizeOptions {
        TokenizeOptions {
            dedup: self.dedup,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub ratio: f64,
    pub avg_span: usize,
    pub strategy: MaskStrategy,
    pub seed: Option<u64>,
}

impl Default for MaskSection {
    fn default() -> Self {
        let d = MaskSpec::default();
        MaskSection {
            ratio: d.ratio,
            avg_span: d.avg_span,
            strategy: d.strategy,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_fusion: usize,
    pub d_ff: usize,
    pub kin_hidden: usize,
    pub rope_split: [usize; 3],
    pub coord_scale: f64,
    pub rope_base: f64,
    pub max_seq_len: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let t = EncoderConfig::toy(4);
        EncoderSection {
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_layers: t.n_layers,
            n_fusion: t.n_fusion,
            d_ff: t.d_ff,
            kin_hidden: t.kin_hidden,
            rope_split: t.rope_split,
            coord_scale: t.coord_scale,
            rope_base: t.rope_base,
            max_seq_len: t.max_seq_len,
        }
    }
}

impl EncoderSection {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_fusion: self.n_fusion,
            d_ff: self.d_ff,
            kin_hidden: self.kin_hidden,
            rope_split: self.rope_split,
            coord_scale: self.coord_scale,
            rope_base: self.rope_base,
            max_seq_len: self.max_seq_len,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Validation trajectories used for held-out accuracy and loss.
    pub eval_size: usize,
    /// Cap on training trajectories (after the split); `None` uses all.
    pub train_limit: Option<usize>,
    pub seed: Option<u64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        TrainSection {
            steps: 2000,
            batch_size: 16,
            eval_every: 200,
            eval_size: 200,
            train_limit: None,
            seed: None,
            lr: 1e-3,
            weight_decay: o.weight_decay,
            warmup_frac: o.warmup_frac,
            clip_norm: o.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_queries: usize,
    pub n_corpus: usize,
    pub seed: Option<u64>,
    pub pooling: Pooling,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_queries: 100,
            n_corpus: 1000,
            seed: None,
            pooling: Pooling::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub enabled: bool,
    /// Steps between trace rows.
    pub interval: usize,
    pub n_queries: usize,
    pub n_corpus: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        TraceSection {
            enabled: false,
            interval: 100,
            n_queries: 20,
            n_corpus: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Canonical TOML form; this exact text is echoed into artifacts.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            ratio: self.mask.ratio,
            avg_span: self.mask.avg_span,
            strategy: self.mask.strategy,
            seed: self.mask.seed.unwrap_or(self.seed),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            seed: t.seed.unwrap_or(self.seed),
            optim: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                warmup_frac: t.warmup_frac,
                clip_norm: t.clip_norm,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn bank_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.grid_config().validate()?;
        self.ingest.bbox.validate()?;
        self.mask_spec().validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        self.encoder.config(crate::vocab::NUM_SPECIAL + 1).validate()?;
        if self.input.is_none() {
            self.synth.validate()?;
        }
        if self.vocab.capacity == 0 {
            return Err(Error::Config("vocab.capacity must be >= 1".into()));
        }
        if let Some(r) = self.vocab.fixed_resolution {
            if r < self.grid.r_min || r > self.grid.r_max {
                return Err(Error::Config(format!("vocab.fixed_resolution {r} outside [r_min, r_max]")));
            }
        }
        if self.tokenize.max_len == 0 || !(0.0..=1.0).contains(&self.tokenize.v_max_quantile) {
            return Err(Error::Config("tokenize.max_len must be >= 1 and v_max_quantile in [0, 1]".into()));
        }
        if self.tokenize.v_max.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("tokenize.v_max must be positive".into()));
        }
        if self.eval.n_queries == 0 || self.eval.n_corpus == 0 {
            return Err(Error::Config("eval bank sizes must be positive".into()));
        }
        if self.trace.enabled && (self.trace.interval == 0 || self.trace.n_queries == 0 || self.trace.n_corpus == 0) {
            return Err(Error::Config("trace interval and bank sizes must be positive".into()));
        }
        Ok(())
    }
}
