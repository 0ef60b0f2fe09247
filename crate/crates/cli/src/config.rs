//! Run configuration: preset defaults, config file, then command-line flags.

use std::path::{Path, PathBuf};

use landmark_attack::attack::{AttackConfig, TargetRect};
use landmark_attack::data::{IsbiLayout, PreprocessSpec, Split, SynthConfig};
use landmark_attack::detector::{ModelScale, TrainConfig};
use landmark_attack::metrics::{IsolationCohort, ISBI_SPACING_MM};
use landmark_attack::sweep::SweepCell;
use landmark_attack::CodecConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Isbi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// ISBI dataset root.
    pub root: Option<PathBuf>,
    pub isbi: IsbiLayout,
    pub synth: SynthConfig,
    pub train_images: usize,
    pub test_images: usize,
    /// ISBI split used for evaluation and benchmarks.
    pub eval_split: Split,
    pub spacing_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub attempts_per_image: usize,
    /// Limit on evaluated images; all of the evaluation split when absent.
    pub max_images: Option<usize>,
    pub iteration_grid: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub rect: Option<TargetRect>,
    pub isolation_cohort: IsolationCohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub preset: ModelScale,
    pub data: DataConfig,
    pub preprocess: PreprocessSpec,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn for_preset(preset: ModelScale) -> Self {
        let train = TrainConfig::for_scale(preset);
        let (source, preprocess, spacing_mm, attempts, max_images) = match preset {
            ModelScale::Desk => (DataSource::Synthetic, PreprocessSpec::DESK, 1.0, 1, Some(20)),
            ModelScale::Full => (DataSource::Isbi, PreprocessSpec::ISBI, ISBI_SPACING_MM, 2, None),
        };
        let default_sweep = landmark_attack::sweep::SweepConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            preset,
            data: DataConfig {
                source,
                root: None,
                isbi: IsbiLayout::default(),
                synth: SynthConfig::default(),
                train_images: 200,
                test_images: 50,
                eval_split: Split::Test1,
                spacing_mm,
            },
            preprocess,
            codec: CodecConfig::new(train.sigma, 0.6).expect("preset sigma is valid"),
            train,
            attack: AttackConfig::for_scale(preset),
            benchmark: BenchmarkConfig {
                attempts_per_image: attempts,
                max_images,
                iteration_grid: default_sweep.iteration_grid,
                cells: default_sweep.cells,
                rect: None,
                isolation_cohort: IsolationCohort::default(),
            },
        }
    }

    /// Preset defaults overlaid with the file at `path` (TOML), if any.
    pub fn load(path: Option<&Path>, preset: Option<ModelScale>) -> Result<Self, CliError> {
        let file: Option<toml::Table> = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Some(
                    text.parse::<toml::Table>()
                        .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        let file_preset = file
            .as_ref()
            .and_then(|t| t.get("preset"))
            .map(|v| v.clone().try_into::<ModelScale>())
            .transpose()
            .map_err(|e| CliError::Usage(format!("preset: {e}")))?;
        let preset = preset.or(file_preset).unwrap_or_default();
        let mut base = toml::Table::try_from(Self::for_preset(preset)).expect("config serializes");
        if let Some(file) = file {
            merge(&mut base, file);
        }
        base.insert("preset".into(), toml::Value::try_from(preset).expect("preset serializes"));
        let config: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: landmark_attack::Error| CliError::Usage(e.to_string());
        self.codec.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.attack.validate().map_err(usage)?;
        if !(self.data.spacing_mm.is_finite() && self.data.spacing_mm > 0.0) {
            return Err(CliError::Usage("data.spacing_mm must be positive".into()));
        }
        if self.preprocess.channels == 0 || self.preprocess.width == 0 || self.preprocess.height == 0 {
            return Err(CliError::Usage("preprocess size and channels must be positive".into()));
        }
        if self.benchmark.attempts_per_image == 0 || self.benchmark.cells.is_empty() || self.benchmark.iteration_grid.is_empty() {
            return Err(CliError::Usage("benchmark needs attempts, cells and an iteration grid".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short stable hash of this config plus command-specific inputs; the output location is excluded.
    pub fn hash(&self, command: &str, extra: &impl Serialize) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        let placed = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        h.update(serde_json::to_vec(&placed).expect("config serializes"));
        h.update(serde_json::to_vec(extra).expect("arguments serialize"));
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Independent deterministic RNG for the named purpose.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let digest = Sha256::digest(name.as_bytes());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        rng.set_stream(u64::from_le_bytes(id));
        rng
    }
}

/// Recursive table overlay; scalars and arrays in `over` replace those in `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `ati:8` / `ti:4` style cell lists.
pub fn parse_cells(text: &str) -> Result<Vec<SweepCell>, String> {
    text.split(',')
        .map(|item| {
            let (mode, eps) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("expected MODE:EPSILON, got {item:?}"))?;
            let adaptive = match mode.to_ascii_lowercase().as_str() {
                "ati" => true,
                "ti" => false,
                other => return Err(format!("unknown attack mode {other:?}; use ati or ti")),
            };
            let epsilon = eps.parse::<f64>().map_err(|e| format!("bad epsilon {eps:?}: {e}"))?;
            Ok(SweepCell { adaptive, epsilon })
        })
        .collect()
}

pub fn cell_name(cell: &SweepCell) -> String {
    format!("{}_eps{}", if cell.adaptive { "ati" } else { "ti" }, cell.epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 9\n[train]\nepochs = 3\n[data.synth]\nnoise = 2.0\n").unwrap();
        let c = RunConfig::load(Some(&p), None).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(c.data.synth.noise, 2.0);
        assert_eq!(c.data.synth.width, 128);
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), None), Err(CliError::Usage(_))));
    }

    #[test]
    fn full_preset_training_setup() {
        let c = RunConfig::load(None, Some(ModelScale::Full)).unwrap();
        assert_eq!((c.train.batch_size, c.train.epochs), (8, 230));
        assert_eq!((c.preprocess.width, c.preprocess.height), (640, 800));
        assert_eq!(c.codec.sigma, 40.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::for_preset(ModelScale::Desk);
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        use rand::Rng;
        let c = RunConfig::for_preset(ModelScale::Desk);
        let a: u64 = c.stream("dataset").random();
        let b: u64 = c.stream("dataset").random();
        let t: u64 = c.stream("targets").random();
        assert_eq!(a, b);
        assert_ne!(a, t);
    }

    #[test]
    fn cell_parsing() {
        let cells = parse_cells("ati:8, ti:2.5").unwrap();
        assert_eq!(cells, vec![SweepCell { adaptive: true, epsilon: 8.0 }, SweepCell { adaptive: false, epsilon: 2.5 }]);
        assert!(parse_cells("pgd:8").is_err());
        assert!(parse_cells("ati").is_err());
        assert_eq!(cell_name(&cells[1]), "ti_eps2.5");
    }
}
