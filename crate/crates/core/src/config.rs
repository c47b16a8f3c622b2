//! Flat `key = value` run configuration and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BaselineConfig;
use crate::models::ModelConfig;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

/// Every setting of a run. The component seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub baseline: BaselineConfig,
    pub k: usize,
    /// Training-crop side for augmentation; 0 disables it.
    pub augment_crop: usize,
    pub with_baseline: bool,
    pub probe_iterations: usize,
    pub transfers: usize,
    /// Size of the generated set when `--data synthetic` is given. Its
    /// expression count and resolution follow the model settings.
    pub synthetic_identities: usize,
    pub synthetic_per_pair: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            baseline: BaselineConfig::default(),
            k: 10,
            augment_crop: 0,
            with_baseline: true,
            probe_iterations: 500,
            transfers: 200,
            synthetic_identities: 5,
            synthetic_per_pair: 100,
        }
    }
}

/// Recognized keys in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "image_size",
    "channels",
    "widths",
    "code_dim",
    "noise_dim",
    "n_expressions",
    "n_identities",
    "d_hidden",
    "fusion_dim",
    "local_width",
    "fused_hidden",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "epochs",
    "g_per_d_late",
    "d_acc_threshold",
    "window",
    "pixel_l1_weight",
    "checkpoint_every",
    "stage2_epochs",
    "stage2_batch_size",
    "stage2_learning_rate",
    "stage2_adam_beta1",
    "stage2_adam_beta2",
    "lambda_1",
    "lambda_2",
    "lambda_3",
    "lambda_4",
    "lambda_5",
    "baseline_epochs",
    "baseline_batch_size",
    "k",
    "augment_crop",
    "with_baseline",
    "probe_iterations",
    "transfers",
    "synthetic_identities",
    "synthetic_per_pair",
];

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

fn int(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| config_err(key, format!("expected a nonnegative integer, got `{v}`")))
}

fn positive(key: &str, v: &str) -> Result<usize> {
    match int(key, v)? {
        0 => Err(config_err(key, "must be positive")),
        n => Ok(n),
    }
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| config_err(key, format!("expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(config_err(key, "must be finite"));
    }
    Ok(x)
}

fn nonneg(key: &str, v: &str) -> Result<f64> {
    match real(key, v)? {
        x if x < 0.0 => Err(config_err(key, format!("must be nonnegative, got {x}"))),
        x => Ok(x),
    }
}

fn beta(key: &str, v: &str) -> Result<f64> {
    match real(key, v)? {
        x if (0.0..1.0).contains(&x) => Ok(x),
        x => Err(config_err(key, format!("must lie in [0, 1), got {x}"))),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(key, format!("expected true or false, got `{v}`"))),
    }
}

/// SplitMix64 finalizer over the root seed and a component label.
pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut z = component.bytes().fold(root ^ 0x9E37_79B9_7F4A_7C15, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let (s1, s2) = (&self.stage1, &self.stage2);
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => m.image_size.to_string(),
            "channels" => m.channels.to_string(),
            "widths" => m.widths.map(|w| w.to_string()).join(","),
            "code_dim" => m.code_dim.to_string(),
            "noise_dim" => m.noise_dim.to_string(),
            "n_expressions" => m.n_expressions.to_string(),
            "n_identities" => m.n_identities.to_string(),
            "d_hidden" => m.d_hidden.to_string(),
            "fusion_dim" => m.fusion_dim.to_string(),
            "local_width" => m.local_width.to_string(),
            "fused_hidden" => m.fused_hidden.to_string(),
            "batch_size" => s1.batch_size.to_string(),
            "learning_rate" => s1.learning_rate.to_string(),
            "adam_beta1" => s1.adam_beta1.to_string(),
            "adam_beta2" => s1.adam_beta2.to_string(),
            "epochs" => s1.epochs.to_string(),
            "g_per_d_late" => s1.g_per_d_late.to_string(),
            "d_acc_threshold" => s1.d_acc_threshold.to_string(),
            "window" => s1.window.to_string(),
            "pixel_l1_weight" => s1.pixel_l1_weight.to_string(),
            "checkpoint_every" => s1.checkpoint_every.to_string(),
            "stage2_epochs" => s2.epochs.to_string(),
            "stage2_batch_size" => s2.batch_size.to_string(),
            "stage2_learning_rate" => s2.learning_rate.to_string(),
            "stage2_adam_beta1" => s2.adam_beta1.to_string(),
            "stage2_adam_beta2" => s2.adam_beta2.to_string(),
            "lambda_1" => s2.loss.lambdas[0].to_string(),
            "lambda_2" => s2.loss.lambdas[1].to_string(),
            "lambda_3" => s2.loss.lambdas[2].to_string(),
            "lambda_4" => s2.loss.lambdas[3].to_string(),
            "lambda_5" => s2.loss.lambdas[4].to_string(),
            "baseline_epochs" => self.baseline.epochs.to_string(),
            "baseline_batch_size" => self.baseline.batch_size.to_string(),
            "k" => self.k.to_string(),
            "augment_crop" => self.augment_crop.to_string(),
            "with_baseline" => self.with_baseline.to_string(),
            "probe_iterations" => self.probe_iterations.to_string(),
            "transfers" => self.transfers.to_string(),
            "synthetic_identities" => self.synthetic_identities.to_string(),
            "synthetic_per_pair" => self.synthetic_per_pair.to_string(),
            _ => return None,
        })
    }

    /// Sets one key, checking its type and single-key constraints.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let (s1, s2) = (&mut self.stage1, &mut self.stage2);
        match key {
            "seed" => self.seed = v.parse().map_err(|_| config_err(key, format!("expected an unsigned integer, got `{v}`")))?,
            "image_size" => m.image_size = positive(key, v)?,
            "channels" => m.channels = positive(key, v)?,
            "widths" => {
                let w: Vec<usize> = v.split(',').map(|x| positive(key, x.trim())).collect::<Result<_>>()?;
                m.widths = w.try_into().map_err(|_| config_err(key, "expected four comma-separated widths"))?;
            }
            "code_dim" => m.code_dim = positive(key, v)?,
            "noise_dim" => m.noise_dim = int(key, v)?,
            "n_expressions" => m.n_expressions = positive(key, v)?,
            "n_identities" => m.n_identities = positive(key, v)?,
            "d_hidden" => m.d_hidden = positive(key, v)?,
            "fusion_dim" => m.fusion_dim = positive(key, v)?,
            "local_width" => m.local_width = positive(key, v)?,
            "fused_hidden" => m.fused_hidden = positive(key, v)?,
            "batch_size" => s1.batch_size = positive(key, v)?,
            "learning_rate" => s1.learning_rate = nonneg(key, v)?,
            "adam_beta1" => s1.adam_beta1 = beta(key, v)?,
            "adam_beta2" => s1.adam_beta2 = beta(key, v)?,
            "epochs" => s1.epochs = int(key, v)?,
            "g_per_d_late" => s1.g_per_d_late = positive(key, v)?,
            "d_acc_threshold" => s1.d_acc_threshold = beta(key, v)?,
            "window" => s1.window = positive(key, v)?,
            "pixel_l1_weight" => s1.pixel_l1_weight = nonneg(key, v)?,
            "checkpoint_every" => s1.checkpoint_every = int(key, v)?,
            "stage2_epochs" => s2.epochs = int(key, v)?,
            "stage2_batch_size" => s2.batch_size = positive(key, v)?,
            "stage2_learning_rate" => s2.learning_rate = nonneg(key, v)?,
            "stage2_adam_beta1" => s2.adam_beta1 = beta(key, v)?,
            "stage2_adam_beta2" => s2.adam_beta2 = beta(key, v)?,
            "lambda_1" | "lambda_2" | "lambda_3" | "lambda_4" | "lambda_5" => {
                let i = key.as_bytes()[7] - b'1';
                s2.loss.lambdas[usize::from(i)] = nonneg(key, v)?;
            }
            "baseline_epochs" => self.baseline.epochs = int(key, v)?,
            "baseline_batch_size" => self.baseline.batch_size = positive(key, v)?,
            "k" => self.k = positive(key, v)?,
            "augment_crop" => self.augment_crop = int(key, v)?,
            "with_baseline" => self.with_baseline = boolean(key, v)?,
            "probe_iterations" => self.probe_iterations = positive(key, v)?,
            "transfers" => self.transfers = int(key, v)?,
            "synthetic_identities" => self.synthetic_identities = positive(key, v)?,
            "synthetic_per_pair" => self.synthetic_per_pair = positive(key, v)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        if self.model.image_size % 16 != 0 {
            return Err(config_err("image_size", "must be a multiple of 16"));
        }
        for (key, b) in [("batch_size", self.stage1.batch_size), ("stage2_batch_size", self.stage2.batch_size)] {
            if b < 2 {
                return Err(config_err(key, "must be at least 2"));
            }
        }
        if self.k < 2 {
            return Err(config_err("k", "needs at least 2 folds"));
        }
        if self.augment_crop > self.model.image_size {
            return Err(config_err("augment_crop", "exceeds image_size"));
        }
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(config_err(key, "given twice"));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config { seed: derive_seed(self.seed, "stage1"), ..self.stage1.clone() }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config { seed: derive_seed(self.seed, "stage2"), ..self.stage2.clone() }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig { seed: derive_seed(self.seed, "baseline"), ..self.baseline.clone() }
    }
}

/// Record of one CLI invocation, stored as `manifest.json` in its run
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub code_version: String,
    pub started: String,
    pub finished: Option<String>,
    /// Relative to the run directory.
    pub artifacts: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: &RunConfig) -> Self {
        Self {
            command,
            config: config.to_map(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            artifacts: Vec::new(),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_map(&self.config)
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(MANIFEST_FILE);
        write_atomic(&path, &serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    /// Records the artifacts, checks that each exists and stamps the end time.
    pub fn finalize(&mut self, run_dir: &Path, artifacts: &[PathBuf]) -> Result<PathBuf> {
        for a in artifacts {
            if !a.exists() {
                return Err(Error::InvalidArgument(format!("artifact {} was not written", a.display())));
            }
            let rel = a.strip_prefix(run_dir).unwrap_or(a);
            self.artifacts.push(rel.to_string_lossy().into_owned());
        }
        self.artifacts.sort();
        self.artifacts.dedup();
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.write(run_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// `DEGAN_OUT` if set, else `runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os("DEGAN_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.stage1.batch_size, 150);
        assert_eq!(cfg.stage1.learning_rate, 1e-4);
        assert_eq!(cfg.stage1.adam_beta1, 0.5);
        assert_eq!((cfg.stage1.epochs, cfg.stage2.epochs), (300, 50));
        assert_eq!(cfg.stage2.loss.lambdas, [0.7, 0.6, 0.4, 0.3, 1.0]);
        assert_eq!(cfg.model.code_dim, 350);
    }

    #[test]
    fn named_errors() {
        let key_of = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key_of("lambda_3 = -1"), "lambda_3");
        assert_eq!(key_of("bogus = 1"), "bogus");
        assert_eq!(key_of("epochs = many"), "epochs");
        assert_eq!(key_of("widths = 1,2,3"), "widths");
        assert_eq!(key_of("image_size = 40"), "image_size");
        assert_eq!(key_of("adam_beta1 = 1.5"), "adam_beta1");
        assert_eq!(key_of("k = 3\nk = 4"), "k");
        assert_eq!(key_of("just words"), "line 1");
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("epochs = 30 # short\nwidths = 16, 32, 32, 64\nwith_baseline = false").unwrap();
        assert_eq!(cfg.stage1.epochs, 30);
        assert_eq!(cfg.model.widths, [16, 32, 32, 64]);
        assert!(!cfg.with_baseline);
    }

    #[test]
    fn every_key_is_readable() {
        let cfg = RunConfig::default();
        for k in CONFIG_KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = cfg.clone();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
        assert!(cfg.get("nope").is_none());
    }

    #[test]
    fn seeds_are_split_per_component() {
        let cfg = RunConfig { seed: 9, ..Default::default() };
        let seeds = [cfg.stage1_config().seed, cfg.stage2_config().seed, cfg.baseline_config().seed];
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
        assert_eq!(derive_seed(9, "stage1"), seeds[0]);
        assert_ne!(derive_seed(10, "stage1"), seeds[0]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("seed = 4\nepochs = 2").unwrap();
        let mut m = RunManifest::new(vec!["evaluate".into(), "--k".into(), "5".into()], &cfg);
        m.write(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert!(loaded.finished.is_none());

        let art = dir.path().join("accuracy.csv");
        fs::write(&art, "x").unwrap();
        m.finalize(dir.path(), &[art]).unwrap();
        let loaded = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.artifacts, vec!["accuracy.csv".to_string()]);
        assert!(loaded.finished.is_some());
        assert_eq!(loaded.run_config().unwrap(), cfg);
        assert!(m.finalize(dir.path(), &[dir.path().join("missing")]).is_err());
    }

    proptest! {
        #[test]
        fn parse_serialize_parse(
            seed in any::<u64>(),
            lr in 0.0f64..1.0,
            l in prop::array::uniform5(0.0f64..10.0),
            epochs in 0usize..1000,
            w in prop::array::uniform4(1usize..512),
        ) {
            let mut cfg = RunConfig { seed, ..Default::default() };
            cfg.stage1.learning_rate = lr;
            cfg.stage2.loss.lambdas = l;
            cfg.stage1.epochs = epochs;
            cfg.model.widths = w;
            let once = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(&once, &cfg);
            prop_assert_eq!(RunConfig::parse(&once.to_text()).unwrap(), once);
        }
    }
}
