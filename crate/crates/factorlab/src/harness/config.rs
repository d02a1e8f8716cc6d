//! TOML experiment configuration.
//!
//! A config file fully determines a run: the generative world, the training
//! method and its hyperparameters, the network architecture, and the output
//! directory. Unknown keys are rejected so typos fail loudly instead of
//! silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::ArchConfig;
use crate::nn::LayerSpec;
use crate::world::{DomainSetup, WorldConfig};

use super::HarnessError;

/// Training method of an experiment.
///
/// `NoDa` trains on source labels only. `DaNoUsv` adds the adversarial
/// domain branch over the source domains but sees no target data. `DaUsv`
/// additionally feeds unsupervised target images to the domain branch.
/// `Fpda` is `DaUsv` with the factor-preserving gradient mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "nodA")]
    NoDa,
    #[serde(rename = "da_no_usv")]
    DaNoUsv,
    #[serde(rename = "da_usv")]
    DaUsv,
    #[serde(rename = "fpda")]
    Fpda,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::NoDa => "nodA",
            Method::DaNoUsv => "da_no_usv",
            Method::DaUsv => "da_usv",
            Method::Fpda => "fpda",
        }
    }

    /// Whether the domain branch trains at all.
    pub fn uses_domain_branch(self) -> bool {
        self != Method::NoDa
    }

    /// Whether unsupervised target images join the training batches.
    pub fn uses_target_usv(self) -> bool {
        matches!(self, Method::DaUsv | Method::Fpda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub arch: ArchSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Rendered samples per class per domain.
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    /// Alternation chunk of the train/test split.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    pub domains: Vec<DomainSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub id: usize,
    pub marker_side: String,
    pub background: String,
    pub brightness: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub method: Method,
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_mu0")]
    pub mu0: f64,
    #[serde(default)]
    pub assignment: Option<AssignmentSection>,
}

/// Two-group factor assignment for `fpda`. Exactly one of `factor` (a domain
/// factor defined by the world) or `values` (one explicit group label per
/// domain, in `[[world.domains]]` order) must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSection {
    #[serde(default)]
    pub factor: Option<String>,
    #[serde(default)]
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default = "default_conv_filters")]
    pub conv_filters: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_label_hidden")]
    pub label_hidden: Vec<usize>,
    #[serde(default = "default_domain_hidden")]
    pub domain_hidden: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

fn default_image_size() -> usize {
    16
}
fn default_num_classes() -> usize {
    5
}
fn default_noise_sigma() -> f64 {
    0.10
}
fn default_jitter() -> f64 {
    1.5
}
fn default_n_per_class() -> usize {
    40
}
fn default_chunk() -> usize {
    10
}
fn default_epochs() -> usize {
    120
}
fn default_batch_size() -> usize {
    32
}
fn default_mu0() -> f64 {
    0.05
}
fn default_conv_filters() -> Vec<usize> {
    vec![8]
}
fn default_kernel() -> usize {
    3
}
fn default_label_hidden() -> Vec<usize> {
    vec![32]
}
// A hidden layer in the domain head destabilizes the masked adversarial
// game (see the masking module docs), so the default head is linear.
fn default_domain_hidden() -> Vec<usize> {
    Vec::new()
}
fn default_dropout() -> f64 {
    0.25
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            conv_filters: default_conv_filters(),
            kernel: default_kernel(),
            label_hidden: default_label_hidden(),
            domain_hidden: default_domain_hidden(),
            dropout: default_dropout(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML config.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            HarnessError::Config(format!("read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds must list at least one seed".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.experiment.seeds {
            if !seen.insert(s) {
                return bad(format!("experiment.seeds repeats seed {s}"));
            }
        }
        if self.experiment.epochs == 0 {
            return bad("experiment.epochs must be at least 1".into());
        }
        if self.experiment.batch_size == 0 {
            return bad("experiment.batch_size must be at least 1".into());
        }
        if !self.experiment.mu0.is_finite() || self.experiment.mu0 <= 0.0 {
            return bad(format!(
                "experiment.mu0 must be a positive learning rate, got {}",
                self.experiment.mu0
            ));
        }
        match (&self.experiment.assignment, self.experiment.method) {
            (None, Method::Fpda) => {
                return bad(
                    "experiment.assignment is required for method \"fpda\"; \
                     set either assignment.factor or assignment.values"
                        .into(),
                );
            }
            (Some(_), m) if m != Method::Fpda => {
                return bad(format!(
                    "experiment.assignment only applies to method \"fpda\", not \"{}\"",
                    m.name()
                ));
            }
            (Some(a), Method::Fpda) => match (&a.factor, &a.values) {
                (Some(_), Some(_)) | (None, None) => {
                    return bad(
                        "experiment.assignment needs exactly one of `factor` or `values`".into(),
                    );
                }
                (None, Some(values)) => {
                    if values.len() != self.world.domains.len() {
                        return bad(format!(
                            "experiment.assignment.values lists {} entries for {} domains",
                            values.len(),
                            self.world.domains.len()
                        ));
                    }
                }
                (Some(_), None) => {}
            },
            _ => {}
        }
        if self.arch.conv_filters.is_empty() {
            return bad("arch.conv_filters must list at least one stage".into());
        }
        if self.arch.kernel == 0 {
            return bad("arch.kernel must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.arch.dropout) {
            return bad(format!(
                "arch.dropout must lie in [0, 1), got {}",
                self.arch.dropout
            ));
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            image_size: self.world.image_size,
            num_classes: self.world.num_classes,
            noise_sigma: self.world.noise_sigma,
            jitter: self.world.jitter,
            domains: self
                .world
                .domains
                .iter()
                .map(|d| DomainSetup {
                    id: d.id,
                    marker_side: d.marker_side.clone(),
                    background: d.background.clone(),
                    brightness: d.brightness.clone(),
                })
                .collect(),
        }
    }

    /// Architecture for a cell with `num_domains` participating domains. Each
    /// conv stage is conv/relu/pool; the extractor ends flattened.
    pub fn arch_config(&self, num_domains: usize) -> ArchConfig {
        let mut extractor = Vec::new();
        for &filters in &self.arch.conv_filters {
            extractor.push(LayerSpec::Conv2d {
                filters,
                kernel: (self.arch.kernel, self.arch.kernel),
            });
            extractor.push(LayerSpec::Relu);
            extractor.push(LayerSpec::MaxPool2x2);
        }
        extractor.push(LayerSpec::Flatten);
        ArchConfig {
            input_shape: vec![self.world.image_size, self.world.image_size, 3],
            num_classes: self.world.num_classes,
            num_domains,
            extractor,
            label_hidden: self.arch.label_hidden.clone(),
            domain_hidden: self.arch.domain_hidden.clone(),
            dropout: self.arch.dropout,
        }
    }

    /// Hash of the canonical serialized form, recorded in the run manifest.
    pub fn sha256(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A ready-to-run config over the default four-domain world.
pub fn default_config(method: Method, seeds: Vec<u64>, out_dir: PathBuf) -> ExperimentConfig {
    let world = WorldConfig::default();
    ExperimentConfig {
        world: WorldSection {
            image_size: world.image_size,
            num_classes: world.num_classes,
            noise_sigma: world.noise_sigma,
            jitter: world.jitter,
            n_per_class: default_n_per_class(),
            chunk: default_chunk(),
            domains: world
                .domains
                .iter()
                .map(|d| DomainSection {
                    id: d.id,
                    marker_side: d.marker_side.clone(),
                    background: d.background.clone(),
                    brightness: d.brightness.clone(),
                })
                .collect(),
        },
        experiment: ExperimentSection {
            method,
            seeds,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            mu0: default_mu0(),
            assignment: if method == Method::Fpda {
                Some(AssignmentSection {
                    factor: Some("marker_side".into()),
                    values: None,
                })
            } else {
                None
            },
        },
        arch: ArchSection::default(),
        output: OutputSection { dir: out_dir },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[world]
domains = [
  { id = 1, marker_side = "right", background = "checker", brightness = "bright" },
  { id = 2, marker_side = "left", background = "hstripes", brightness = "soft" },
]

[experiment]
method = "da_usv"
seeds = [0, 1]

[output]
dir = "runs/demo"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.world.image_size, 16);
        assert_eq!(cfg.world.num_classes, 5);
        assert!((cfg.world.noise_sigma - 0.10).abs() < 1e-12);
        assert_eq!(cfg.world.n_per_class, 40);
        assert_eq!(cfg.world.chunk, 10);
        assert_eq!(cfg.experiment.method, Method::DaUsv);
        assert_eq!(cfg.experiment.epochs, 120);
        assert_eq!(cfg.experiment.batch_size, 32);
        assert!((cfg.experiment.mu0 - 0.05).abs() < 1e-12);
        assert_eq!(cfg.arch.conv_filters, vec![8]);
        assert_eq!(cfg.arch.label_hidden, vec![32]);
        assert!(cfg.arch.domain_hidden.is_empty());
        assert_eq!(cfg.output.dir, PathBuf::from("runs/demo"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[output]", "[output]\nbogus_key = 3\n");
        let text = text.replace("bogus_key = 3\n\ndir", "dir");
        let err = ExperimentConfig::from_toml(&format!("{text}\nbogus = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn method_names_round_trip() {
        for (name, method) in [
            ("nodA", Method::NoDa),
            ("da_no_usv", Method::DaNoUsv),
            ("da_usv", Method::DaUsv),
            ("fpda", Method::Fpda),
        ] {
            let text = MINIMAL.replace("method = \"da_usv\"", &format!("method = \"{name}\""));
            let text = if method == Method::Fpda {
                text.replace(
                    "seeds = [0, 1]",
                    "seeds = [0, 1]\nassignment = { factor = \"marker_side\" }",
                )
            } else {
                text
            };
            let cfg = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(cfg.experiment.method, method);
            assert_eq!(cfg.experiment.method.name(), name);
        }
        assert!(ExperimentConfig::from_toml(
            &MINIMAL.replace("method = \"da_usv\"", "method = \"dann\"")
        )
        .is_err());
    }

    #[test]
    fn fpda_requires_an_assignment() {
        let text = MINIMAL.replace("method = \"da_usv\"", "method = \"fpda\"");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("experiment.assignment"));

        let both = text.replace(
            "seeds = [0, 1]",
            "seeds = [0, 1]\nassignment = { factor = \"marker_side\", values = [\"a\", \"b\"] }",
        );
        assert!(ExperimentConfig::from_toml(&both)
            .unwrap_err()
            .to_string()
            .contains("exactly one"));

        let short = text.replace(
            "seeds = [0, 1]",
            "seeds = [0, 1]\nassignment = { values = [\"a\"] }",
        );
        assert!(ExperimentConfig::from_toml(&short)
            .unwrap_err()
            .to_string()
            .contains("2 domains"));

        let ok = text.replace(
            "seeds = [0, 1]",
            "seeds = [0, 1]\nassignment = { values = [\"a\", \"b\"] }",
        );
        assert!(ExperimentConfig::from_toml(&ok).is_ok());
    }

    #[test]
    fn assignment_is_rejected_outside_fpda() {
        let text = MINIMAL.replace(
            "seeds = [0, 1]",
            "seeds = [0, 1]\nassignment = { factor = \"marker_side\" }",
        );
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("only applies"));
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        for (from, to, needle) in [
            ("seeds = [0, 1]", "seeds = []", "at least one seed"),
            ("seeds = [0, 1]", "seeds = [3, 3]", "repeats"),
            ("seeds = [0, 1]", "seeds = [0]\nepochs = 0", "epochs"),
            ("seeds = [0, 1]", "seeds = [0]\nbatch_size = 0", "batch_size"),
            ("seeds = [0, 1]", "seeds = [0]\nmu0 = 0.0", "mu0"),
            ("seeds = [0, 1]", "seeds = [0]\nmu0 = -1.0", "mu0"),
        ] {
            let err = ExperimentConfig::from_toml(&MINIMAL.replace(from, to)).unwrap_err();
            assert!(err.to_string().contains(needle), "missing {needle:?} in {err}");
        }
    }

    #[test]
    fn world_and_arch_configs_translate_sections() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let world = cfg.world_config();
        assert_eq!(world.domains.len(), 2);
        assert_eq!(world.domains[1].id, 2);
        assert_eq!(world.domains[1].marker_side, "left");

        let arch = cfg.arch_config(3);
        assert_eq!(arch.num_domains, 3);
        assert_eq!(arch.num_classes, 5);
        assert_eq!(arch.input_shape, vec![16, 16, 3]);
        assert_eq!(arch.extractor.len(), 4);
        assert!(matches!(
            arch.extractor[0],
            LayerSpec::Conv2d {
                filters: 8,
                kernel: (3, 3)
            }
        ));
        assert!(matches!(arch.extractor[3], LayerSpec::Flatten));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
        let c = ExperimentConfig::from_toml(&MINIMAL.replace("seeds = [0, 1]", "seeds = [0, 2]"))
            .unwrap();
        assert_ne!(a.sha256(), c.sha256());
    }

    #[test]
    fn default_config_is_valid_for_every_method() {
        for method in [Method::NoDa, Method::DaNoUsv, Method::DaUsv, Method::Fpda] {
            let cfg = default_config(method, vec![0, 1, 2], PathBuf::from("runs/x"));
            cfg.validate().unwrap();
            assert_eq!(cfg.world.domains.len(), 4);
        }
    }
}
