use std::path::{Path, PathBuf};

use headprobe::harness::Metric;
use headprobe::{ModelConfig, PlantSpec, ScoreFn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_min_len() -> usize {
    10
}

fn default_max_len() -> usize {
    3000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub seed: u64,
    /// Overrides the run's model config when present.
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalPool {
    pub name: String,
    /// CSV of samples with a `score` column.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_target_fraction")]
    pub target_fraction: f64,
    /// Extra reference models scored on freshly drawn corpora for the distance matrix.
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub external_pools: Vec<ExternalPool>,
    #[serde(default = "default_pca_components")]
    pub pca_components: usize,
    /// Length of the fixed probe sequence used for PCA; defaults to
    /// `min(16, max_seq_len)`.
    #[serde(default)]
    pub pca_len: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            target_fraction: default_target_fraction(),
            variants: Vec::new(),
            external_pools: Vec::new(),
            pca_components: default_pca_components(),
            pca_len: None,
        }
    }
}

fn default_target_fraction() -> f64 {
    10.0
}

fn default_pca_components() -> usize {
    2
}

fn default_grid() -> Vec<f64> {
    headprobe::calibration::DEFAULT_QUANTILE_GRID.to_vec()
}

fn default_metric() -> Metric {
    Metric::Agreement
}

fn default_tolerance() -> f64 {
    0.01
}

fn default_random_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub precision: Precision,
    pub seed: u64,
    #[serde(default)]
    pub plants: Vec<PlantSpec>,
    pub corpus: CorpusConfig,
    pub score_fns: Vec<ScoreFn>,
    #[serde(default = "default_grid")]
    pub quantile_grid: Vec<f64>,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Absolute tolerance, in metric units, for the max-zeroed summary.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_random_seeds")]
    pub random_seeds: Vec<u64>,
    #[serde(default)]
    pub compare: CompareConfig,
    /// Externally produced records to summarize in the report.
    #[serde(default)]
    pub external_records: Option<PathBuf>,
    /// SHA-256 of the canonical JSON encoding, taken before paths are resolved.
    #[serde(skip)]
    pub hash: String,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.hash = hex::encode(Sha256::digest(
            serde_json::to_vec(&cfg).expect("config serializes"),
        ));
        // Relative paths resolve against the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.external_records.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for pool in &mut cfg.compare.external_pools {
            if pool.path.is_relative() {
                pool.path = base.join(&pool.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pca_len(&self) -> usize {
        self.compare
            .pca_len
            .unwrap_or(self.model.max_seq_len.min(16))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for plant in &self.plants {
            plant
                .validate(&self.model)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.score_fns.is_empty() {
            return bad("score_fns must list at least one score function".into());
        }
        let c = &self.corpus;
        if c.n_sequences == 0 {
            return bad("corpus.n_sequences must be positive".into());
        }
        if c.min_len == 0 || c.min_len > c.max_len {
            return bad(format!(
                "corpus length range [{}, {}] is empty",
                c.min_len, c.max_len
            ));
        }
        if c.max_len > self.model.max_seq_len {
            return bad(format!(
                "corpus.max_len {} exceeds model.max_seq_len {}",
                c.max_len, self.model.max_seq_len
            ));
        }
        if self.quantile_grid.is_empty()
            || self
                .quantile_grid
                .iter()
                .any(|p| !(0.0..=100.0).contains(p))
        {
            return bad("quantile_grid must be non-empty with entries in [0, 100]".into());
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return bad(format!("tolerance {} must be non-negative", self.tolerance));
        }
        if self.random_seeds.is_empty() {
            return bad("random_seeds must not be empty".into());
        }
        let cmp = &self.compare;
        if !(0.0..=100.0).contains(&cmp.target_fraction) {
            return bad(format!(
                "compare.target_fraction {} outside [0, 100]",
                cmp.target_fraction
            ));
        }
        let pca_len = self.pca_len();
        if pca_len == 0 || pca_len > self.model.max_seq_len {
            return bad(format!(
                "compare.pca_len {pca_len} must be in [1, max_seq_len]"
            ));
        }
        if cmp.pca_components == 0 || cmp.pca_components > pca_len * pca_len {
            return bad("compare.pca_components must be in [1, pca_len²]".into());
        }
        for v in &cmp.variants {
            let m = v.model.unwrap_or(self.model);
            m.validate()
                .map_err(|e| CliError::Config(format!("variant {}: {e}", v.name)))?;
            if c.max_len > m.max_seq_len {
                return bad(format!(
                    "variant {}: corpus.max_len exceeds its max_seq_len",
                    v.name
                ));
            }
        }
        let mut names: Vec<&str> = cmp.variants.iter().map(|v| v.name.as_str()).collect();
        names.extend(cmp.external_pools.iter().map(|p| p.name.as_str()));
        names.push(RUN_MODEL_NAME);
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return bad("model names in compare must be unique and differ from `run`".into());
        }
        for path in cmp
            .external_pools
            .iter()
            .map(|p| &p.path)
            .chain(self.external_records.as_ref())
        {
            if !path.exists() {
                return bad(format!("{} does not exist", path.display()));
            }
        }
        Ok(())
    }
}

pub const RUN_MODEL_NAME: &str = "run";
