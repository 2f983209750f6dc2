use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Architecture, WeightsSource};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::pyramid_data::PyramidSpec;
use crate::scale_search::SearchConfig;
use crate::scoring::{FusionMode, ReferenceSize};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub category: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("data"),
            category: "bottle".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// Fraction of defect types that contribute validation images.
    pub coverage: f64,
    /// Share of each selected type moved to validation.
    pub fraction: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            coverage: 1.0,
            fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Also write the heatmap blended over the input image.
    pub overlay: bool,
}

/// Everything a run needs. Loaded from one YAML document; command-line
/// flags override individual keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub teacher: Architecture,
    /// `registry`, `seed:N` or a safetensors path.
    pub weights: String,
    pub scales: Vec<usize>,
    pub levels: Vec<usize>,
    /// Side of the square score maps.
    pub reference_size: usize,
    pub fusion: FusionMode,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub validation: ValidationConfig,
    pub search: SearchConfig,
    pub metrics: MetricConfig,
    pub heatmap: HeatmapConfig,
    pub output: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            teacher: Architecture::WideResnet50,
            weights: "registry".into(),
            scales: PyramidSpec::default().scales,
            levels: vec![2, 3, 4],
            reference_size: 256,
            fusion: FusionMode::Flat,
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            validation: ValidationConfig::default(),
            search: SearchConfig::default(),
            metrics: MetricConfig::default(),
            heatmap: HeatmapConfig::default(),
            output: PathBuf::from("runs/default"),
            seed: 0,
            threads: 1,
        }
    }
}

/// Identity-relevant subset of the config, hashed into the fingerprint.
#[derive(Serialize)]
struct Identity<'a> {
    teacher: Architecture,
    weights: &'a str,
    scales: &'a [usize],
    levels: &'a [usize],
    train: &'a TrainConfig,
    seed: u64,
    category: &'a str,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_yaml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.sync_seed();
        Ok(cfg)
    }

    /// The global seed drives training, initialization and splits.
    pub fn sync_seed(&mut self) {
        self.train.seed = self.seed;
    }

    pub fn weights_source(&self) -> Result<WeightsSource> {
        self.weights.parse()
    }

    pub fn pyramid(&self) -> PyramidSpec {
        PyramidSpec {
            scales: self.scales.clone(),
        }
    }

    pub fn reference(&self) -> ReferenceSize {
        ReferenceSize::square(self.reference_size)
    }

    pub fn max_level(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid().validate()?;
        self.train.validate()?;
        self.weights_source()?;
        let depth = self.teacher.num_levels();
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted != self.levels || sorted[0] < 2 || *sorted.last().unwrap() > depth {
            return Err(Error::Config(format!(
                "levels must be distinct, increasing and within 2..={depth} for {}, got {:?}",
                self.teacher, self.levels
            )));
        }
        if self.reference_size == 0 {
            return Err(Error::Config("reference_size must be positive".into()));
        }
        if let Some(k) = self.search.k {
            let n = self.scales.len() * self.levels.len();
            if k == 0 || k > n {
                return Err(Error::Config(format!("k must be in 1..={n}, got {k}")));
            }
        }
        if self.search.learning_rate < 0.0 || !self.search.learning_rate.is_finite() {
            return Err(Error::Config("search.learning_rate must be finite and non-negative".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Short hash of the settings that determine trained parameters.
    pub fn fingerprint(&self) -> String {
        let id = Identity {
            teacher: self.teacher,
            weights: &self.weights,
            scales: &self.scales,
            levels: &self.levels,
            train: &self.train,
            seed: self.seed,
            category: &self.dataset.category,
        };
        let json = serde_json::to_vec(&id).expect("identity serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{p}` is not a non-negative integer")))
        })
        .collect()
}
