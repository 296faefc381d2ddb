use std::path::{Path, PathBuf};

use cwflow_core::cwfa::CWFAConfig;
use cwflow_core::ood::FinetuneConfig;
use cwflow_core::optics::{BeadConfig, OpticsConfig, PhantomConfig};
use cwflow_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Unknown keys are rejected at every level;
/// missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed, copied into the phantom, bead and model seeds.
    pub seed: u64,
    /// Frames simulated per sequence.
    pub frames: usize,
    /// Frames with `index % train_stride == 0` are used for training; the
    /// rest are held out for evaluation.
    pub train_stride: usize,
    pub rl_iterations: usize,
    /// Neurons used for trace correlation in `metrics`.
    pub neurons: usize,
    /// Level scored for out-of-distribution decisions (0 is the finest).
    pub ood_level: usize,
    pub thresholds: usize,
    pub phantom: PhantomConfig,
    pub beads: BeadConfig,
    pub optics: OpticsConfig,
    pub model: CWFAConfig,
    pub finetune: FinetuneConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 60,
            train_stride: 6,
            rl_iterations: 100,
            neurons: 50,
            ood_level: 0,
            thresholds: 1000,
            phantom: PhantomConfig::default(),
            beads: BeadConfig::default(),
            optics: OpticsConfig::default(),
            model: CWFAConfig::default(),
            finetune: FinetuneConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Propagate the master seed and check cross-field constraints.
    pub fn resolve(mut self) -> Result<Self> {
        self.phantom.seed = self.seed;
        self.beads.seed = self.seed;
        self.model.seed = self.seed;
        if self.train_stride == 0 {
            return Err(Error::invalid("train_stride must be positive"));
        }
        self.model.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sede": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"alpah": 0.5}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"model": {"alpha": 0.25}}"#).unwrap();
        assert_eq!(c.model.alpha, 0.25);
        assert_eq!(c.frames, 60);
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig {
            seed: 9,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((c.phantom.seed, c.beads.seed, c.model.seed), (9, 9, 9));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
