//! Experiment configuration files.
//!
//! A config is a TOML document with one top-level `seed` and the sections
//! `data`, `model`, `train`, `grid`, `detection`, `output`, `risk` and
//! `ablate`. Every field is optional. Section-level seeds are not accepted:
//! all random streams are derived from the top-level seed (see [`RunSeeds`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_csv, split_dataset, CsvSchema, PiDataset, Split, SynthConfig};
use crate::detection::Method;
use crate::error::{Error, Result};
use crate::linear_risk::SetupSpec;
use crate::model::{AblationFlags, Variant};
use crate::seed::{self, stream};
use crate::training::{Architecture, GridSpec, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub grid: Option<GridSpec>,
    pub detection: DetectionSection,
    pub output: OutputSection,
    pub risk: RiskSection,
    pub ablate: AblateSection,
}

/// Exactly one of `synthetic` and `csv`; with neither, the default
/// synthetic generator is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SynthConfig>,
    /// Relative paths resolve against the config file's directory.
    pub csv: Option<PathBuf>,
    /// Required with `csv`.
    pub num_classes: Option<usize>,
    pub noisy_val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synthetic: None,
            csv: None,
            num_classes: None,
            noisy_val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub prediction_hidden: Vec<usize>,
    pub pi_width: usize,
    pub shared_first_layer: bool,
    /// Replaces the variant's flags when present.
    pub ablation: Option<AblationFlags>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let arch = Architecture::default();
        ModelSection {
            variant: Variant::PiDual,
            prediction_hidden: arch.prediction_hidden,
            pi_width: arch.pi_width,
            shared_first_layer: arch.shared_first_layer,
            ablation: None,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            prediction_hidden: self.prediction_hidden.clone(),
            pi_width: self.pi_width,
            shared_first_layer: self.shared_first_layer,
            ablation: self.ablation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    /// Empty means confidence, plus gate when the model has one.
    pub methods: Vec<Method>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub n2: usize,
    pub pi_scale: f64,
    pub min_singular_value: f64,
    pub max_condition: f64,
    /// Number of independent random designs.
    pub setups: usize,
    /// Swept in place of `n2` when non-empty.
    pub n2_values: Vec<usize>,
    pub sigmas: Vec<f64>,
    /// Mask entries flipped relative to the true noisy-row mask.
    pub flips: Vec<usize>,
    /// Monte-Carlo draws per estimator; 0 skips the simulation.
    pub resamples: usize,
}

impl Default for RiskSection {
    fn default() -> Self {
        let spec = SetupSpec::default();
        RiskSection {
            n: spec.n,
            d: spec.d,
            m: spec.m,
            n2: spec.n2,
            pi_scale: spec.pi_scale,
            min_singular_value: spec.min_singular_value,
            max_condition: spec.max_condition,
            setups: 1,
            n2_values: Vec::new(),
            sigmas: vec![spec.sigma],
            flips: vec![0],
            resamples: 0,
        }
    }
}

impl RiskSection {
    pub fn setup_spec(&self, n2: usize, sigma: f64, seed: u64) -> SetupSpec {
        SetupSpec {
            n: self.n,
            d: self.d,
            m: self.m,
            n2,
            pi_scale: self.pi_scale,
            sigma,
            min_singular_value: self.min_singular_value,
            max_condition: self.max_condition,
            seed,
        }
    }

    pub fn n2_sweep(&self) -> Vec<usize> {
        if self.n2_values.is_empty() {
            vec![self.n2]
        } else {
            self.n2_values.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Seeds of every top-level stream of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub generator: u64,
    pub split: u64,
    pub training: u64,
    pub risk: u64,
}

impl RunSeeds {
    pub fn new(root: u64) -> Self {
        RunSeeds {
            root,
            generator: seed::derive(root, stream::RUN_GENERATOR),
            split: seed::derive(root, stream::RUN_SPLIT),
            training: seed::derive(root, stream::RUN_TRAINING),
            risk: seed::derive(root, stream::RUN_RISK),
        }
    }
}

/// Parsed config plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

const SECTION_SEEDS: [(&str, &str); 3] = [("data", "synthetic"), ("train", ""), ("risk", "")];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse().map_err(|e: toml::de::Error| parse_error(text, e))?;
        for (section, sub) in SECTION_SEEDS {
            let mut table = value.get(section);
            if !sub.is_empty() {
                table = table.and_then(|t| t.get(sub));
            }
            if table.and_then(|t| t.get("seed")).is_some() {
                let path = if sub.is_empty() {
                    format!("{section}.seed")
                } else {
                    format!("{section}.{sub}.seed")
                };
                return Err(Error::config(path, "set the top-level `seed` instead"));
            }
        }
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(text, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::from_toml_str(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.synthetic.is_some() && d.csv.is_some() {
            return Err(Error::config("data", "give either `synthetic` or `csv`, not both"));
        }
        if d.csv.is_some() && d.num_classes.is_none() {
            return Err(Error::config("data.num_classes", "required with `csv`"));
        }
        if !(d.noisy_val_fraction >= 0.0 && d.test_fraction >= 0.0)
            || d.noisy_val_fraction + d.test_fraction >= 1.0
        {
            return Err(Error::config(
                "data.noisy_val_fraction",
                "fractions must be >= 0 and sum to < 1",
            ));
        }
        if let Some(s) = &d.synthetic {
            self.synth_config(s).validate()?;
        }
        self.train.validate()?;
        if self.model.prediction_hidden.contains(&0) {
            return Err(Error::config("model.prediction_hidden", "widths must be >= 1"));
        }
        if self.model.pi_width == 0 {
            return Err(Error::config("model.pi_width", "must be >= 1"));
        }
        if self.risk.setups == 0 {
            return Err(Error::config("risk.setups", "must be >= 1"));
        }
        if self.risk.sigmas.is_empty() {
            return Err(Error::config("risk.sigmas", "needs at least one value"));
        }
        if self.risk.flips.is_empty() {
            return Err(Error::config("risk.flips", "needs at least one value"));
        }
        if self.ablate.variants.is_empty() {
            return Err(Error::config("ablate.variants", "needs at least one variant"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> RunSeeds {
        RunSeeds::new(self.seed)
    }

    /// The synthetic generator config with its derived seed.
    fn synth_config(&self, s: &SynthConfig) -> SynthConfig {
        SynthConfig {
            seed: self.seeds().generator,
            ..s.clone()
        }
    }

    pub fn synthetic(&self) -> Option<SynthConfig> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(s), _) => Some(self.synth_config(s)),
            (None, None) => Some(self.synth_config(&SynthConfig::default())),
            (None, Some(_)) => None,
        }
    }

    /// Training config carrying the derived training seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().training,
            ..self.train.clone()
        }
    }

    /// Grid with empty axes filled from the base config and model variant.
    pub fn grid_spec(&self) -> GridSpec {
        let base = self.train_config();
        match &self.grid {
            None => GridSpec::single(&base, self.model.variant),
            Some(g) => {
                let mut g = g.clone();
                if g.lr.is_empty() {
                    g.lr = vec![base.base_lr];
                }
                if g.weight_decay.is_empty() {
                    g.weight_decay = vec![base.weight_decay];
                }
                if g.random_pi_length.is_empty() {
                    g.random_pi_length = vec![base.random_pi_length];
                }
                if g.variant.is_empty() {
                    g.variant = vec![self.model.variant];
                }
                g
            }
        }
    }

    /// SHA-256 over the canonical JSON form of everything except the
    /// output section. Keys are sorted, so field order in the file does not
    /// matter.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl LoadedConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Builds the dataset: generated and split for synthetic sources; read
    /// from CSV otherwise, keeping the file's split column when it tags any
    /// non-train sample and splitting by the configured fractions if not.
    pub fn dataset(&self) -> Result<PiDataset> {
        let cfg = &self.config;
        let seeds = cfg.seeds();
        let ds = match (cfg.synthetic(), &cfg.data.csv) {
            (Some(s), _) => generate_synthetic(&s)?,
            (None, Some(csv)) => {
                let schema = CsvSchema::with_classes(cfg.data.num_classes.expect("validated"));
                let ds = load_csv(&self.resolve(csv), schema)?;
                if (0..ds.len()).any(|i| ds.split(i) != Split::Train) {
                    return Ok(ds);
                }
                ds
            }
            (None, None) => unreachable!("synthetic() covers the default source"),
        };
        split_dataset(&ds, cfg.data.noisy_val_fraction, cfg.data.test_fraction, seeds.split)
    }
}

fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let row = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        row,
        message: e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(cfg.synthetic().is_some());
        assert_eq!(cfg.grid_spec().points(0).unwrap().len(), 1);
    }

    #[test]
    fn hash_ignores_field_order_and_output() {
        let a = "seed = 3\n[train]\nepochs = 5\nbase_lr = 0.1\n[output]\ndir = \"a\"\n";
        let b = "seed = 3\n[output]\ndir = \"b\"\n[train]\nbase_lr = 0.1\nepochs = 5\n";
        let ha = ExperimentConfig::from_toml_str(a).unwrap().hash();
        let hb = ExperimentConfig::from_toml_str(b).unwrap().hash();
        assert_eq!(ha, hb);
        let hc = ExperimentConfig::from_toml_str("seed = 4\n[train]\nepochs = 5\nbase_lr = 0.1\n")
            .unwrap()
            .hash();
        assert_ne!(ha, hc);
    }

    #[test]
    fn section_seeds_are_rejected() {
        for text in ["[train]\nseed = 1\n", "[data.synthetic]\nseed = 1\n", "[risk]\nseed = 2\n"] {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config { field, .. }) => assert!(field.ends_with("seed"), "{field}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_fields_name_their_path() {
        let err = ExperimentConfig::from_toml_str("[data.synthetic]\nnoise_rate = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field.contains("noise_rate")), "{err}");
        let err = ExperimentConfig::from_toml_str("[data]\ncsv = \"x.csv\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "data.num_classes"));
        let err = ExperimentConfig::from_toml_str("[train]\nepochz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        let err = ExperimentConfig::from_toml_str("[data]\ncsv = \"x.csv\"\nnum_classes = 3\n[data.synthetic]\n")
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "data"));
    }

    #[test]
    fn derived_seeds_follow_the_root() {
        let a = ExperimentConfig::from_toml_str("seed = 1").unwrap();
        let b = ExperimentConfig::from_toml_str("seed = 2").unwrap();
        assert_ne!(a.synthetic().unwrap().seed, b.synthetic().unwrap().seed);
        assert_ne!(a.train_config().seed, b.train_config().seed);
        let s = a.seeds();
        let all = [s.generator, s.split, s.training, s.risk];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn grid_axes_fill_from_base() {
        let cfg = ExperimentConfig::from_toml_str(
            "[model]\nvariant = \"cross_entropy\"\n[train]\nbase_lr = 0.2\n[grid]\nweight_decay = [0.0, 0.001]\n",
        )
        .unwrap();
        let points = cfg.grid_spec().points(cfg.train_config().seed).unwrap();
        assert_eq!(points.len(), 2);
        assert!(points.iter().all(|p| p.lr == 0.2 && p.variant == Variant::CrossEntropy));
        assert_ne!(points[0].seed, points[1].seed);
    }
}
