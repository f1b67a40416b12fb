//! JSON run configuration with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wgkv_core::corpus::{gen_corpus, CorpusLayout, SyntheticCorpus};
use wgkv_core::engine::{PolicyConfig, PolicyKind};
use wgkv_core::gating::{GateInit, Threshold};
use wgkv_core::model::{ModelConfig, RetrievalPlant, ToyModel};
use wgkv_core::training::{Optimizer, TrainConfig, DEFAULT_EPSILON};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Strength of the planted anchor pattern; 0 gives a plain random model.
    pub plant_strength: f64,
    pub policy: PolicyKind,
    pub window: usize,
    pub sink: usize,
    pub tau: f64,
    pub lambda: f64,
    pub page_size: usize,
    pub topk_budget: Option<usize>,
    pub retrieval_heads: Vec<bool>,
    pub forced_admit_period: Option<usize>,
    pub seed: u64,
    pub train: TrainSettings,
    pub corpus: CorpusSettings,
    pub infer: InferSettings,
    pub sweep: SweepSettings,
    pub bench: BenchSettings,
    pub oracle: OracleSettings,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: Option<f64>,
    pub gate_hidden: usize,
    pub init_std: f64,
    pub init_bias: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub density: f64,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSettings {
    pub prompt_len: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub policies: Vec<PolicyKind>,
    pub prompt_len: usize,
    pub steps: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub appendix_sets: usize,
    pub runs: usize,
    pub prompt_len: usize,
    pub steps: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Trained gates to load; without it, freshly initialised gates are used.
    pub gates: Option<PathBuf>,
    /// Corpus JSON to load; without it, one is generated from `corpus`.
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_seed: 7,
            plant_strength: 0.7,
            policy: PolicyKind::Wgkv,
            window: 256,
            sink: 128,
            tau: 0.1,
            lambda: 0.08,
            page_size: 16,
            topk_budget: None,
            retrieval_heads: Vec::new(),
            forced_admit_period: None,
            seed: 0,
            train: TrainSettings::default(),
            corpus: CorpusSettings::default(),
            infer: InferSettings::default(),
            sweep: SweepSettings::default(),
            bench: BenchSettings::default(),
            oracle: OracleSettings::default(),
            paths: Paths {
                out: PathBuf::from("out"),
                ..Paths::default()
            },
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let init = GateInit::default();
        Self {
            learning_rate: 100.0,
            steps: 100,
            batch_size: 8,
            momentum: Some(0.9),
            gate_hidden: 16,
            init_std: init.weight_std,
            init_bias: init.out_bias,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            count: 200,
            min_len: 128,
            max_len: 128,
            density: 0.03,
            validation: 40,
        }
    }
}

impl Default for InferSettings {
    fn default() -> Self {
        Self {
            prompt_len: 512,
            steps: 32,
        }
    }
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.01, 0.04, 0.08, 0.16],
            taus: vec![0.1],
        }
    }
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            policies: vec![
                PolicyKind::Full,
                PolicyKind::Wgkv,
                PolicyKind::LocalSink,
                PolicyKind::WgkvPlusTopk,
            ],
            prompt_len: 256,
            steps: 32,
            runs: 4,
        }
    }
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            appendix_sets: 10_000,
            runs: 20,
            prompt_len: 256,
            steps: 64,
            tolerance: 1e-8,
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub window: Option<usize>,
    pub policy: Option<String>,
    pub out: Option<PathBuf>,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda {
            self.lambda = l;
        }
        if let Some(t) = o.tau {
            self.tau = t;
        }
        if let Some(w) = o.window {
            self.window = w;
        }
        if let Some(p) = &o.policy {
            self.policy = PolicyKind::parse(p).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Threshold::new(self.tau).map_err(|e| CliError::Usage(e.to_string()))?;
        if self.window == 0 || self.page_size == 0 {
            return usage("window and page size must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return usage(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.plant_strength >= 0.0) {
            return usage("plant strength must be non-negative".into());
        }
        if self.corpus.count == 0 {
            return usage("corpus count must be positive".into());
        }
        if self.infer.prompt_len == 0 || self.bench.prompt_len == 0 || self.oracle.prompt_len == 0 {
            return usage("prompt lengths must be positive".into());
        }
        if self.sweep.lambdas.is_empty() || self.sweep.taus.is_empty() {
            return usage("sweep grids must be non-empty".into());
        }
        if let Some(p) = &self.paths.corpus {
            if !p.is_file() {
                return usage(format!("no such file {}", p.display()));
            }
        }
        if self.paths.out.exists() && !self.paths.out.is_dir() {
            return usage(format!(
                "output path {} is not a directory",
                self.paths.out.display()
            ));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.policy_config(self.policy, self.infer.prompt_len + self.infer.steps)
            .validate_shape(&self.model)?;
        Ok(())
    }

    pub fn threshold(&self) -> Threshold {
        Threshold::new(self.tau).expect("validated")
    }

    pub fn layout(&self) -> Result<CorpusLayout, CliError> {
        Ok(CorpusLayout::for_vocab(self.model.vocab)?)
    }

    pub fn build_model(&self) -> Result<ToyModel, CliError> {
        let plant = RetrievalPlant {
            anchor_ids: self.layout()?.anchor_ids(),
            strength: self.plant_strength,
        };
        Ok(ToyModel::with_retrieval_plant(
            self.model,
            self.model_seed,
            &plant,
        )?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: self.lambda,
            learning_rate: t.learning_rate,
            steps: t.steps,
            window: self.window,
            seed: self.seed,
            optimizer: match t.momentum {
                Some(beta) => Optimizer::Momentum { beta },
                None => Optimizer::Gd,
            },
            batch_size: t.batch_size,
            seq_len: None,
            gate_hidden: t.gate_hidden,
            gate_init: GateInit {
                weight_std: t.init_std,
                out_bias: t.init_bias,
            },
            epsilon: t.epsilon,
        }
    }

    pub fn policy_config(&self, kind: PolicyKind, max_tokens: usize) -> PolicyConfig {
        PolicyConfig {
            kind,
            window: self.window,
            sink: self.sink,
            threshold: Threshold::new(self.tau).unwrap_or_default(),
            retrieval_heads: self.retrieval_heads.clone(),
            topk_budget: self.topk_budget,
            forced_admit_period: self.forced_admit_period,
            page_size: self.page_size,
            max_tokens,
            pool_pages: None,
        }
    }

    /// Training and validation sets: loaded from `paths.corpus` (split by
    /// `corpus.validation`) or generated from two seeds.
    pub fn corpora(&self) -> Result<(SyntheticCorpus, SyntheticCorpus), CliError> {
        let c = &self.corpus;
        if let Some(path) = &self.paths.corpus {
            let text = fs::read_to_string(path)?;
            let corpus: SyntheticCorpus = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad corpus {}: {e}", path.display())))?;
            if corpus.sequences.len() <= c.validation {
                return Err(CliError::Usage(
                    "corpus smaller than the validation split".into(),
                ));
            }
            return Ok(corpus.split_tail(c.validation));
        }
        let layout = self.layout()?;
        let train = gen_corpus(layout, self.seed, c.count, c.min_len, c.max_len, c.density)?;
        let val = gen_corpus(
            layout,
            self.seed ^ 0x5eed,
            c.validation.max(1),
            c.min_len,
            c.max_len,
            c.density,
        )?;
        Ok((train, val))
    }
}

trait ValidateShape {
    fn validate_shape(&self, model: &ModelConfig) -> Result<(), CliError>;
}

impl ValidateShape for PolicyConfig {
    fn validate_shape(&self, model: &ModelConfig) -> Result<(), CliError> {
        if self.topk_budget == Some(0) {
            return Err(CliError::Usage("top-k budget must be at least 1".into()));
        }
        if self.forced_admit_period == Some(0) {
            return Err(CliError::Usage(
                "forced admission period must be positive".into(),
            ));
        }
        if self.kind == PolicyKind::StaticHeads
            && self.retrieval_heads.len() != model.layers * model.kv_heads
        {
            return Err(CliError::Usage(format!(
                "retrieval bitmap has {} entries, expected {}",
                self.retrieval_heads.len(),
                model.layers * model.kv_heads
            )));
        }
        Ok(())
    }
}
