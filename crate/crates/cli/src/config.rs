//! Pipeline configuration: one TOML file, every section optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use persona_steer::analytics::ReportOptions;
use persona_steer::cf::CfConfig;
use persona_steer::dataset::{SplitSpec, SyntheticSpec, DEFAULT_REFUSAL_LABELS};
use persona_steer::error::{Error, Result};
use persona_steer::eval::SweepK;
use persona_steer::fingerprint;
use persona_steer::lm::LmConfig;
use persona_steer::spm::SpmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Artifact directory.
    pub out: PathBuf,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub cf: CfConfig,
    pub cluster: ClusterConfig,
    pub analytics: AnalyticsConfig,
    pub lm: LmConfig,
    pub spm: SpmConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("artifacts"),
            data: DataConfig::default(),
            split: SplitSpec::default(),
            cf: CfConfig::default(),
            cluster: ClusterConfig::default(),
            analytics: AnalyticsConfig::default(),
            lm: LmConfig::default(),
            spm: SpmConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Where the survey comes from. Without explicit paths the files written by
/// `gen-synthetic` into the artifact directory are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub questions: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub demographics: Option<PathBuf>,
    pub refusal_labels: Vec<String>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            questions: None,
            responses: None,
            demographics: None,
            refusal_labels: DEFAULT_REFUSAL_LABELS.iter().map(|s| s.to_string()).collect(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Cluster count; the elbow pick when unset.
    pub k: Option<usize>,
    pub elbow_k: Vec<usize>,
    /// Cluster counts for the cluster-persona sweep.
    pub sweep_k: Vec<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            elbow_k: (2..=12).collect(),
            sweep_k: (1..=6).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub report: ReportOptions,
    /// Traits for composition tables; every trait when empty.
    pub traits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub context_k: usize,
    /// Traits used for demographic personas; every trait when empty.
    pub demographic_traits: Vec<String>,
    pub unseen_k: Vec<SweepK>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_k: 5,
            demographic_traits: Vec::new(),
            unseen_k: vec![SweepK::Count(1), SweepK::Count(5), SweepK::Count(10), SweepK::All],
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    /// Use `seed` for every stage that draws random numbers.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.cf.seed = seed;
        self.lm.seed = seed;
        self.spm.seed = seed;
    }

    /// Fingerprint of every setting except the artifact directory.
    pub fn fingerprint(&self) -> String {
        fingerprint::of_value(&Self {
            out: PathBuf::new(),
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(toml::from_str::<PipelineConfig>("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c: PipelineConfig = toml::from_str(
            "out = \"x\"\n[cf]\ndim = 8\n[eval]\nunseen_k = [\"2\", \"all\"]\n[data.synthetic]\nnoise = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.out, PathBuf::from("x"));
        assert_eq!(c.cf.dim, 8);
        assert_eq!(c.cf.batch_size, 2048);
        assert_eq!(c.eval.unseen_k, vec![SweepK::Count(2), SweepK::All]);
        assert_eq!(c.data.synthetic.noise, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[cf]\ndimension = 8\n").is_err());
        assert!(toml::from_str::<PipelineConfig>("[clusters]\nk = 3\n").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&PipelineConfig::default()).unwrap();
        assert_eq!(
            toml::from_str::<PipelineConfig>(&text).unwrap(),
            PipelineConfig::default()
        );
    }
}
