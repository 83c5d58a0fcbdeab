//! Run configuration: a versioned JSON document merged with command-line
//! overrides and validated before any work starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::basis_by_name;
use crate::data::{FlattenOrder, SPLIT_FILES};
use crate::error::{Error, Result};
use crate::model::{
    ModelConfig, DEFAULT_BN_EPSILON, DEFAULT_BN_INIT_SCALE, DEFAULT_BN_INIT_SHIFT, DEFAULT_BN_MOMENTUM,
};
use crate::quantum::entropy_method_by_name;
use crate::train::TrainConfig;

pub const RUN_CONFIG_SCHEMA: u32 = 1;
pub const DEFAULT_D: usize = 8;

/// Where the gzipped IDX files of one dataset live and what they hash to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub base_url: String,
    /// Keyed by `train-images`, `train-labels`, `test-images`, `test-labels`.
    pub files: BTreeMap<String, RemoteFile>,
    pub train_count: usize,
    pub test_count: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteFile {
    pub name: String,
    pub md5: String,
}

impl DatasetSource {
    fn idx(base_url: &str, names_md5: [(&str, &str); 4]) -> Self {
        let files = SPLIT_FILES
            .iter()
            .zip(names_md5)
            .map(|(key, (name, md5))| {
                (
                    key.to_string(),
                    RemoteFile {
                        name: name.to_string(),
                        md5: md5.to_string(),
                    },
                )
            })
            .collect();
        Self {
            base_url: base_url.to_string(),
            files,
            train_count: 60000,
            test_count: 10000,
            num_classes: 10,
        }
    }

    pub fn url(&self, key: &str) -> Option<String> {
        self.files.get(key).map(|f| format!("{}{}", self.base_url, f.name))
    }
}

pub fn default_sources() -> BTreeMap<String, DatasetSource> {
    let mut sources = BTreeMap::new();
    sources.insert(
        "mnist".to_string(),
        DatasetSource::idx(
            "https://ossci-datasets.s3.amazonaws.com/mnist/",
            [
                ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
                ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
                ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
                ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
            ],
        ),
    );
    sources.insert(
        "fashion-mnist".to_string(),
        DatasetSource::idx(
            "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
            [
                ("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
                ("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
                ("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
                ("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
            ],
        ),
    );
    sources
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Images are resized to `side × side`, so `N = side²`.
    pub side: usize,
    /// Base width of the schedule `d_ℓ = d(ℓ+1)`; derived from `n` if unset.
    pub d: Option<usize>,
    /// Basis cutoff; derived from `d` if unset.
    pub n: Option<usize>,
    pub basis: String,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub bn_init_scale: f64,
    pub bn_init_shift: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            side: 16,
            d: None,
            n: None,
            basis: "fourier".into(),
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_init_scale: DEFAULT_BN_INIT_SCALE,
            bn_init_shift: DEFAULT_BN_INIT_SHIFT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: String,
    pub order: FlattenOrder,
    /// Output directory; derived from the other fields if unset.
    pub out: Option<PathBuf>,
    pub entropy_method: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sources: BTreeMap<String, DatasetSource>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA,
            dataset: "mnist".into(),
            order: FlattenOrder::LeftRight,
            out: None,
            entropy_method: "gram".into(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            sources: default_sources(),
        }
    }
}

/// Command-line values that take precedence over the JSON file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub order: Option<FlattenOrder>,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(bytes: &[u8], origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, format!("{} ({origin})", e.into_inner()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies overrides. Setting only one of `d`/`n` clears the other so
    /// the pair stays consistent.
    pub fn apply(&mut self, o: &Overrides) {
        match (o.d, o.n) {
            (Some(d), Some(n)) => {
                self.model.d = Some(d);
                self.model.n = Some(n);
            }
            (Some(d), None) => {
                self.model.d = Some(d);
                self.model.n = None;
            }
            (None, Some(n)) => {
                self.model.d = None;
                self.model.n = Some(n);
            }
            (None, None) => {}
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(order) = o.order {
            self.order = order;
        }
        if let Some(ds) = &o.dataset {
            self.dataset = ds.clone();
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {RUN_CONFIG_SCHEMA})", self.schema_version),
            ));
        }
        for (name, src) in &self.sources {
            for key in SPLIT_FILES {
                if !src.files.contains_key(key) {
                    return Err(Error::config(format!("sources.{name}.files"), format!("missing `{key}`")));
                }
            }
            if src.num_classes == 0 {
                return Err(Error::config(format!("sources.{name}.num_classes"), "must be at least 1"));
            }
        }
        self.source()?;
        entropy_method_by_name(&self.entropy_method).map_err(|e| Error::config("entropy_method", e.to_string()))?;
        self.model_config()?;
        self.train.validate()
    }

    pub fn source(&self) -> Result<&DatasetSource> {
        self.sources.get(&self.dataset).ok_or_else(|| {
            let known: Vec<&str> = self.sources.keys().map(String::as_str).collect();
            Error::config("dataset", format!("unknown dataset `{}` (configured: {})", self.dataset, known.join(", ")))
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.model.side * self.model.side
    }

    /// Resolved `(d, n)`.
    pub fn width_and_cutoff(&self) -> Result<(usize, usize)> {
        let basis = basis_by_name(&self.model.basis).map_err(|e| Error::config("model.basis", e.to_string()))?;
        match (self.model.d, self.model.n) {
            (Some(d), Some(n)) if basis.channels(n) != d => Err(Error::config(
                "model.n",
                format!("the {} basis with n = {n} emits {} channels, not d = {d}", self.model.basis, basis.channels(n)),
            )),
            (Some(d), Some(n)) => Ok((d, n)),
            (None, Some(0)) => Err(Error::config("model.n", "must be at least 1")),
            (None, Some(n)) => Ok((basis.channels(n), n)),
            (d, None) => {
                let d = d.unwrap_or(DEFAULT_D);
                let n = basis.cutoff_for_channels(d).filter(|&n| n > 0).ok_or_else(|| {
                    Error::config("model.d", format!("the {} basis cannot emit {d} channels", self.model.basis))
                })?;
                Ok((d, n))
            }
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let side = self.model.side;
        if side < 2 || !side.is_power_of_two() {
            return Err(Error::config("model.side", format!("{side} is not a power of two ≥ 2")));
        }
        let (d, n) = self.width_and_cutoff()?;
        let mut cfg = ModelConfig::with_schedule(self.n_pixels(), d, &self.model.basis, self.source()?.num_classes)?;
        cfg.cutoff = n;
        cfg.bn_epsilon = self.model.bn_epsilon;
        cfg.bn_momentum = self.model.bn_momentum;
        cfg.bn_init_scale = self.model.bn_init_scale;
        cfg.bn_init_shift = self.model.bn_init_shift;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        if let Some(out) = &self.out {
            return Ok(out.clone());
        }
        let (d, _) = self.width_and_cutoff()?;
        Ok(PathBuf::from("runs").join(format!(
            "{}-d{d}-{}-seed{}",
            self.dataset, self.order, self.train.seed
        )))
    }
}
