//! Synthetic factor-based image world. Every image is produced by a fixed
//! compositor from an explicit scene description (class, marker side,
//! background style, brightness level, pose jitter), so the causal link
//! between a generative factor and any downstream transfer failure can be
//! established by construction rather than conjecture.

mod fixture;
mod render;

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::Tensor;

pub use fixture::{load_accuracy_fixture, shipped_fixture_path, FixtureError, TransferFixture};
pub use render::{background_styles, brightness_levels, Mixer};

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("image size {0} is too small; the compositor needs at least 12")]
    ImageTooSmall(usize),
    #[error("classes must lie in 2..=5, got {0}")]
    BadClassCount(usize),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("jitter must lie in [0, 2], got {0}")]
    BadJitter(f64),
    #[error("world needs at least one domain")]
    NoDomains,
    #[error("duplicate domain id {0}")]
    DuplicateDomainId(usize),
    #[error("domains {a} and {b} share identical domain-factor values")]
    DuplicateDomainFactors { a: usize, b: usize },
    #[error("unknown {factor} value `{value}` in domain {domain}")]
    UnknownFactorValue {
        factor: &'static str,
        value: String,
        domain: usize,
    },
    #[error("scene: {0}")]
    BadScene(String),
    #[error("n_per_class must be positive")]
    EmptySampling,
    #[error("chunk size must be positive")]
    ZeroChunk,
    #[error("class {class} has {count} samples, not divisible by 2*chunk = {period}")]
    UnevenSplit {
        class: usize,
        count: usize,
        period: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// What kind of values a generative factor takes.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    Categorical(Vec<String>),
    Continuous { min: f64, max: f64 },
}

/// One generative factor. `domain_factor` means the value is constant within
/// a domain; `task_informative` means the class can be inferred better with
/// this factor's rendering than without it.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDef {
    pub name: String,
    pub kind: FactorKind,
    pub domain_factor: bool,
    pub task_informative: bool,
}

/// Ordered roster of the factors in play. Scene values are positional with
/// respect to this order.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSchema {
    factors: Vec<FactorDef>,
}

impl FactorSchema {
    pub fn factors(&self) -> &[FactorDef] {
        &self.factors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn factor(&self, name: &str) -> Option<&FactorDef> {
        self.factors.iter().find(|f| f.name == name)
    }
}

/// Concrete value of one factor inside a scene: an index into the
/// categorical roster, or a position in the continuous range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorValue {
    Categorical(usize),
    Continuous(f64),
}

/// Full description of one image before rendering. `seed` drives the pixel
/// noise stream and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub values: Vec<FactorValue>,
    pub seed: u64,
}

/// One domain: an id plus a fixed value for every domain factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub id: usize,
    values: BTreeMap<String, String>,
}

impl DomainSpec {
    pub fn new(id: usize, values: BTreeMap<String, String>) -> Self {
        DomainSpec { id, values }
    }

    /// The domain's value of a domain factor, or `None` for factors that
    /// vary within the domain.
    pub fn factor_value(&self, factor: &str) -> Option<&str> {
        self.values.get(factor).map(String::as_str)
    }

    pub fn factor_values(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A bag of rendered samples. `split` is `None` until the set has been
/// partitioned by [`split_train_test`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks all images into one `[n, h, w, c]` tensor with parallel labels.
    pub fn images_and_labels(&self) -> Result<(Tensor, Vec<usize>), WorldError> {
        if self.samples.is_empty() {
            return Err(WorldError::EmptyDataset);
        }
        let images: Vec<Tensor> = self.samples.iter().map(|s| s.image.clone()).collect();
        let stacked = Tensor::stack(&images).expect("uniform shapes by construction");
        let labels = self.samples.iter().map(|s| s.label).collect();
        Ok((stacked, labels))
    }
}

/// Per-domain settings of the three domain factors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSetup {
    pub id: usize,
    pub marker_side: String,
    pub background: String,
    pub brightness: String,
}

/// Generative settings of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    /// Maximum absolute pose offset of the class glyph, in pixels.
    pub jitter: f64,
    pub domains: Vec<DomainSetup>,
}

impl Default for WorldConfig {
    /// Four domains in two marker-side groups: sides run right, left, left,
    /// right so that group membership does not follow domain order. Each
    /// group holds one bright and one soft domain, so brightness varies
    /// across domains without following the grouping and the marker side
    /// stays the dominant difference between the groups.
    fn default() -> Self {
        let d = |id, side: &str, bg: &str, level: &str| DomainSetup {
            id,
            marker_side: side.into(),
            background: bg.into(),
            brightness: level.into(),
        };
        WorldConfig {
            image_size: 16,
            num_classes: 5,
            noise_sigma: 0.10,
            jitter: 1.5,
            domains: vec![
                d(1, "right", "checker", "bright"),
                d(2, "left", "hstripes", "soft"),
                d(3, "left", "gradx", "bright"),
                d(4, "right", "dots", "soft"),
            ],
        }
    }
}

/// A validated world: schema, domain specifications, and the compositor.
#[derive(Debug, Clone)]
pub struct World {
    pub schema: FactorSchema,
    pub domains: Vec<DomainSpec>,
    pub mixer: Mixer,
    pub num_classes: usize,
    jitter: f64,
}

/// Builds the factor schema and domain specifications for a configuration.
/// Domain factors are marker side, background style, and brightness level;
/// class and pose jitter vary within every domain. Two domains with
/// identical domain-factor values are rejected, as the domain label would
/// then not be a function of the factors.
pub fn make_world(config: &WorldConfig) -> Result<World, WorldError> {
    if config.image_size < 12 {
        return Err(WorldError::ImageTooSmall(config.image_size));
    }
    if !(2..=5).contains(&config.num_classes) {
        return Err(WorldError::BadClassCount(config.num_classes));
    }
    if !config.noise_sigma.is_finite() || config.noise_sigma < 0.0 {
        return Err(WorldError::BadNoise(config.noise_sigma));
    }
    if !config.jitter.is_finite() || !(0.0..=2.0).contains(&config.jitter) {
        return Err(WorldError::BadJitter(config.jitter));
    }
    if config.domains.is_empty() {
        return Err(WorldError::NoDomains);
    }

    let sides = vec!["left".to_string(), "right".to_string()];
    let styles: Vec<String> = background_styles().iter().map(|s| s.to_string()).collect();
    let levels: Vec<String> = brightness_levels().iter().map(|(n, _)| n.to_string()).collect();

    for d in &config.domains {
        if !sides.contains(&d.marker_side) {
            return Err(WorldError::UnknownFactorValue {
                factor: "marker_side",
                value: d.marker_side.clone(),
                domain: d.id,
            });
        }
        if !styles.contains(&d.background) {
            return Err(WorldError::UnknownFactorValue {
                factor: "background",
                value: d.background.clone(),
                domain: d.id,
            });
        }
        if !levels.contains(&d.brightness) {
            return Err(WorldError::UnknownFactorValue {
                factor: "brightness",
                value: d.brightness.clone(),
                domain: d.id,
            });
        }
    }
    for (i, a) in config.domains.iter().enumerate() {
        for b in &config.domains[i + 1..] {
            if a.id == b.id {
                return Err(WorldError::DuplicateDomainId(a.id));
            }
            if a.marker_side == b.marker_side
                && a.background == b.background
                && a.brightness == b.brightness
            {
                return Err(WorldError::DuplicateDomainFactors { a: a.id, b: b.id });
            }
        }
    }

    let classes: Vec<String> = (0..config.num_classes).map(|c| format!("c{c}")).collect();
    let schema = FactorSchema {
        factors: vec![
            FactorDef {
                name: "class".into(),
                kind: FactorKind::Categorical(classes),
                domain_factor: false,
                task_informative: true,
            },
            FactorDef {
                name: "marker_side".into(),
                kind: FactorKind::Categorical(sides),
                domain_factor: true,
                // the marker glyph is class-dependent, so its side factor is
                // both a domain factor and task-informative
                task_informative: true,
            },
            FactorDef {
                name: "background".into(),
                kind: FactorKind::Categorical(styles),
                domain_factor: true,
                task_informative: false,
            },
            FactorDef {
                name: "brightness".into(),
                kind: FactorKind::Categorical(levels),
                domain_factor: true,
                task_informative: false,
            },
            FactorDef {
                name: "jitter_x".into(),
                kind: FactorKind::Continuous {
                    min: -config.jitter,
                    max: config.jitter,
                },
                domain_factor: false,
                task_informative: false,
            },
            FactorDef {
                name: "jitter_y".into(),
                kind: FactorKind::Continuous {
                    min: -config.jitter,
                    max: config.jitter,
                },
                domain_factor: false,
                task_informative: false,
            },
        ],
    };

    let domains = config
        .domains
        .iter()
        .map(|d| {
            let mut values = BTreeMap::new();
            values.insert("marker_side".to_string(), d.marker_side.clone());
            values.insert("background".to_string(), d.background.clone());
            values.insert("brightness".to_string(), d.brightness.clone());
            DomainSpec::new(d.id, values)
        })
        .collect();

    Ok(World {
        schema,
        domains,
        mixer: Mixer::new(config.image_size, config.noise_sigma),
        num_classes: config.num_classes,
        jitter: config.jitter,
    })
}

impl World {
    pub fn domain(&self, id: usize) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id)
    }

    /// Builds the scene for one sample of `spec` and class `class`; jitter
    /// and the noise seed come from `rng`.
    fn scene(
        &self,
        spec: &DomainSpec,
        class: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Scene, WorldError> {
        let mut values = Vec::with_capacity(self.schema.factors.len());
        for f in &self.schema.factors {
            let v = match (&f.kind, f.name.as_str()) {
                (FactorKind::Categorical(_), "class") => FactorValue::Categorical(class),
                (FactorKind::Categorical(names), name) => {
                    let chosen = spec.factor_value(name).ok_or_else(|| {
                        WorldError::BadScene(format!("domain {} lacks factor {name}", spec.id))
                    })?;
                    let ix = names.iter().position(|n| n == chosen).ok_or_else(|| {
                        WorldError::BadScene(format!("unknown {name} value {chosen}"))
                    })?;
                    FactorValue::Categorical(ix)
                }
                (FactorKind::Continuous { min, max }, _) => {
                    let v = if min == max { *min } else { rng.random_range(*min..*max) };
                    FactorValue::Continuous(v)
                }
            };
            values.push(v);
        }
        Ok(Scene {
            values,
            seed: rng.next_u64(),
        })
    }

    /// Renders `n_per_class` samples of every class for one domain, in
    /// class-major order. Identical `rng` state reproduces the dataset
    /// exactly.
    pub fn sample_domain(
        &self,
        spec: &DomainSpec,
        n_per_class: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Dataset, WorldError> {
        if n_per_class == 0 {
            return Err(WorldError::EmptySampling);
        }
        let mut samples = Vec::with_capacity(n_per_class * self.num_classes);
        for class in 0..self.num_classes {
            for _ in 0..n_per_class {
                let scene = self.scene(spec, class, rng)?;
                let image = self.mixer.render(&self.schema, &scene)?;
                samples.push(Sample {
                    image,
                    label: class,
                    domain: spec.id,
                });
            }
        }
        Ok(Dataset {
            samples,
            split: None,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// Splits a dataset into equal train/test halves by alternating fixed-size
/// chunks within each class (chunk to train, chunk to test, and so on), so
/// both halves see every part of the sampling sequence. Requires every
/// class count to be divisible by `2 * chunk`.
pub fn split_train_test(
    dataset: &Dataset,
    chunk: usize,
) -> Result<(Dataset, Dataset), WorldError> {
    if chunk == 0 {
        return Err(WorldError::ZeroChunk);
    }
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        per_class.entry(s.label).or_default().push(i);
    }
    let period = 2 * chunk;
    for (&class, indices) in &per_class {
        if indices.len() % period != 0 {
            return Err(WorldError::UnevenSplit {
                class,
                count: indices.len(),
                period,
            });
        }
    }
    let mut to_train = vec![false; dataset.samples.len()];
    for indices in per_class.values() {
        for (pos, &i) in indices.iter().enumerate() {
            to_train[i] = (pos / chunk) % 2 == 0;
        }
    }
    let pick = |keep_train: bool, split| Dataset {
        samples: dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| to_train[*i] == keep_train)
            .map(|(_, s)| s.clone())
            .collect(),
        split: Some(split),
    };
    Ok((pick(true, Split::Train), pick(false, Split::Test)))
}
