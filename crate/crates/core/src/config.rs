//! The JSON run configuration shared by all commands. Every section is
//! optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitConfig, RetargetConfig};
use crate::synth::DatasetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Gaussians on the ground-truth blob robot.
    pub blob_points: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub retarget: RetargetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            blob_points: 3000,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            fit: FitConfig::default(),
            retarget: RetargetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configuration serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.blob_points == 0 {
            return Err(Error::Config("blob_points must be positive".into()));
        }
        let d = &self.dataset;
        if d.poses == 0 || d.views == 0 || d.width == 0 || d.height == 0 {
            return Err(Error::Config(
                "dataset poses, views and image size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        self.train.validate()?;
        self.fit.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejection() {
        let mut c = RunConfig::default();
        c.train.canonical_steps = 17;
        c.fit.lr_pose = 0.125;
        c.dataset.seed = 9;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());

        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let partial = RunConfig::from_json(r#"{"train": {"canonical_steps": 5}}"#).unwrap();
        assert_eq!(partial.train.canonical_steps, 5);
        assert_eq!(partial.train.lbs_steps, TrainConfig::default().lbs_steps);

        for bad in [
            r#"{"bogus": 1}"#,
            r#"{"train": {"canonical_step": 5}}"#,
            r#"{"fit": {"lr_pose": -1}}"#,
            r#"{"dataset": {"views": 0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
