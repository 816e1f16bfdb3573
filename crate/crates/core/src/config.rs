//! Run configuration shared by the command-line tool and the C interface.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_HISTOGRAM_BINS;
use crate::features::FeatureBackend;
use crate::imaging::DEFAULT_TARGET_LONG_SIDE;
use crate::localizer::LocalizeOptions;
use crate::matcher::{MatchParams, DEFAULT_FINE_TEMPERATURE, DEFAULT_TEMPERATURE, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::vehicle_filter::{DetectionFilter, RemovalRule, DEFAULT_MIN_SCORE, VEHICLE_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: FeatureBackend,
    pub temperature: f64,
    pub threshold: f64,
    pub window: usize,
    pub fine_temperature: f64,
    pub min_score: f64,
    pub vehicle_classes: Vec<String>,
    pub use_vehicle_filter: bool,
    pub removal_rule: RemovalRule,
    pub target_long_side: u32,
    pub histogram_bins: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: FeatureBackend::default(),
            temperature: DEFAULT_TEMPERATURE,
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW,
            fine_temperature: DEFAULT_FINE_TEMPERATURE,
            min_score: DEFAULT_MIN_SCORE,
            vehicle_classes: VEHICLE_CLASSES.iter().map(|s| s.to_string()).collect(),
            use_vehicle_filter: true,
            removal_rule: RemovalRule::default(),
            target_long_side: DEFAULT_TARGET_LONG_SIDE,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            temperature: self.temperature,
            threshold: self.threshold,
            window: self.window,
            fine_temperature: self.fine_temperature,
        }
    }

    pub fn detection_filter(&self) -> DetectionFilter {
        DetectionFilter {
            classes: self.vehicle_classes.clone(),
            min_score: self.min_score,
        }
    }

    pub fn localize_options(&self) -> LocalizeOptions {
        LocalizeOptions {
            params: self.match_params(),
            use_vehicle_filter: self.use_vehicle_filter,
            removal_rule: self.removal_rule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.match_params().validate()?;
        self.detection_filter().validate()?;
        if self.histogram_bins < 2 {
            return Err(Error::InvalidInput(format!(
                "histogram_bins must be at least 2, got {}",
                self.histogram_bins
            )));
        }
        if let FeatureBackend::InjectedFile { dir } = &self.backend {
            if !dir.is_dir() {
                return Err(Error::InvalidInput(format!(
                    "feature directory {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// Compact JSON of every setting that can change results. The worker
    /// count is left out since results do not depend on it.
    pub fn echo(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("jobs");
        }
        v.to_string()
    }
}
