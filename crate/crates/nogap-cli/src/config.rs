//! Experiment configuration: a TOML file describing one (problem, variant)
//! run end to end — data generation, model architecture, and optimization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nogap_core::datagen::{GenConfig, Problem};
use nogap_core::gp::{ModelConfig, TrainConfig, Variant};
use nogap_core::wavelet::WaveletName;
use nogap_core::wno::WnoConfig;
use nogap_core::{NogapError, Result};

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// burgers | advection | poisson
    pub problem: String,
    /// nogap | wno_only | gp_zero_mean
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub seed: u64,
    /// All artifacts land under this directory.
    pub out_dir: PathBuf,
    pub data: DataSection,
    /// Required for the nogap and wno_only variants.
    #[serde(default)]
    pub wno: Option<WnoSection>,
    pub training: TrainingSection,
}

fn default_variant() -> String {
    "nogap".to_string()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
    pub resolution: usize,
    /// Burgers viscosity; ignored by the other problems.
    #[serde(default = "default_nu")]
    pub nu: f64,
}

fn default_nu() -> f64 {
    0.1
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WnoSection {
    pub width: usize,
    pub proj_width: usize,
    pub blocks: usize,
    pub levels: usize,
    pub wavelet: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_noise")]
    pub init_noise_variance: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_noise() -> f64 {
    1e-2
}

fn default_log_every() -> usize {
    10
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            NogapError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| NogapError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let problem = self.problem()?;
        let variant = self.variant()?;
        self.gen_config()?.validate()?;
        if variant.uses_wno() {
            let wno = self.wno_config()?.expect("wno config present");
            // Fail early if the decomposition depth does not divide the grid.
            if self.data.resolution % (1 << wno.levels) != 0 {
                return Err(NogapError::Config(format!(
                    "resolution {} is not divisible by 2^levels = {}",
                    self.data.resolution,
                    1 << wno.levels
                )));
            }
        }
        let _ = problem;
        Ok(())
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::parse(&self.problem)
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant)
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            problem: self.problem()?,
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            resolution: self.data.resolution,
            seed: self.seed,
            nu: self.data.nu,
        })
    }

    pub fn wno_config(&self) -> Result<Option<WnoConfig>> {
        let variant = self.variant()?;
        if !variant.uses_wno() {
            return Ok(None);
        }
        let section = self.wno.as_ref().ok_or_else(|| {
            NogapError::Config(format!(
                "variant '{}' needs a [wno] section",
                variant.as_str()
            ))
        })?;
        let spatial_dim = self.problem()?.spatial_dim();
        Ok(Some(WnoConfig {
            lift_width: section.width,
            proj_width: section.proj_width,
            n_blocks: section.blocks,
            levels: section.levels,
            wavelet: WaveletName::parse(&section.wavelet)?,
            spatial_dim,
            in_channels: 1 + spatial_dim,
        }))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant = self.variant()?;
        let mut mc = match variant {
            Variant::Nogap => ModelConfig::nogap(self.wno_config()?.expect("wno present")),
            Variant::WnoOnly => ModelConfig::wno_only(self.wno_config()?.expect("wno present")),
            Variant::GpZeroMean => ModelConfig::gp_zero_mean(),
        };
        mc.init_noise_variance = self.training.init_noise_variance;
        Ok(mc)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.training.iterations,
            learning_rate: self.training.learning_rate,
            seed: self.seed,
            log_every: self.training.log_every,
        }
    }

    /// The TOML text written next to every run's artifacts.
    pub fn echo_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| NogapError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir().join("train.ngpd")
    }

    pub fn test_path(&self) -> PathBuf {
        self.data_dir().join("test.ngpd")
    }

    pub fn variant_dir(&self) -> PathBuf {
        self.out_dir.join(&self.variant)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.variant_dir().join("checkpoint.ngpd")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
problem = "advection"
variant = "nogap"
seed = 7
out_dir = "runs/advection"

[data]
n_train = 200
n_test = 50
resolution = 40

[wno]
width = 32
proj_width = 64
blocks = 2
levels = 2
wavelet = "db8"

[training]
iterations = 100
"#;

    #[test]
    fn parses_and_round_trips() {
        let c: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.training.learning_rate, 1e-3); // default
        assert_eq!(c.training.log_every, 10); // default
        let echoed = c.echo_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(back.problem, "advection");
        assert_eq!(back.data.n_train, 200);
    }

    #[test]
    fn wno_section_maps_to_model_config() {
        let c: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        let mc = c.model_config().unwrap();
        let wno = mc.wno.unwrap();
        assert_eq!(wno.lift_width, 32);
        assert_eq!(wno.in_channels, 2);
        assert_eq!(wno.spatial_dim, 1);
    }

    #[test]
    fn missing_wno_section_rejected_for_nogap() {
        let mut c: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        c.wno = None;
        assert!(c.wno_config().is_err());
        c.variant = "gp_zero_mean".to_string();
        assert!(c.wno_config().unwrap().is_none());
        assert!(c.model_config().is_ok());
    }

    #[test]
    fn indivisible_levels_rejected() {
        let mut c: ExperimentConfig = toml::from_str(EXAMPLE).unwrap();
        c.wno.as_mut().unwrap().levels = 4; // 40 / 2^4 is fractional
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = EXAMPLE.replace("seed = 7", "seed = 7\ntypo_field = 1");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }
}
