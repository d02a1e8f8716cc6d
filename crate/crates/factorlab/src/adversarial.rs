//! Three-branch adversarial adaptation model: a shared feature extractor, a
//! label classifier, and a domain classifier reached through a gradient
//! reversal layer. All randomness is split into per-branch streams so that a
//! change confined to one branch never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    batch_softmax_cross_entropy, LayerSpec, LossError, NetError, Network, Tensor,
};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("model configuration: {0}")]
    BadConfig(String),
    #[error("progress {0} outside [0, 1]")]
    BadProgress(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("batch: {0}")]
    BadBatch(String),
    #[error("mask: {0}")]
    BadMask(String),
    #[error("evaluation needs at least one sample")]
    EmptyEvaluation,
    #[error("adaptation already ran for all {total} steps")]
    StateExhausted { total: usize },
    #[error("total steps must be positive")]
    ZeroTotalSteps,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Architecture of the three branches. The extractor must end in a flat
/// feature vector; each head is a stack of `Dense + Relu (+ Dropout)` blocks
/// followed by a final linear layer producing class or domain logits.
#[derive(Debug, Clone)]
pub struct ArchConfig {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub extractor: Vec<LayerSpec>,
    pub label_hidden: Vec<usize>,
    pub domain_hidden: Vec<usize>,
    pub dropout: f64,
}

impl ArchConfig {
    /// Default desk-scale architecture: two conv/pool stages feeding 32-unit
    /// heads with dropout 0.5.
    pub fn small(input_shape: Vec<usize>, num_classes: usize, num_domains: usize) -> Self {
        ArchConfig {
            input_shape,
            num_classes,
            num_domains,
            extractor: vec![
                LayerSpec::Conv2d {
                    filters: 6,
                    kernel: (3, 3),
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Conv2d {
                    filters: 12,
                    kernel: (3, 3),
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
            ],
            label_hidden: vec![32],
            domain_hidden: vec![32],
            dropout: 0.5,
        }
    }
}

/// Independent random streams for the three branches, all derived from one
/// seed. Initialization and dropout for a branch consume only that branch's
/// stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRngs {
    pub extractor: ChaCha8Rng,
    pub label: ChaCha8Rng,
    pub domain: ChaCha8Rng,
}

impl BranchRngs {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        BranchRngs {
            extractor: stream(0),
            label: stream(1),
            domain: stream(2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub extractor: Network,
    pub label_head: Network,
    pub domain_head: Network,
    pub num_classes: usize,
    pub num_domains: usize,
}

fn head_specs(hidden: &[usize], out: usize, dropout: f64) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for &h in hidden {
        specs.push(LayerSpec::Dense { units: h });
        specs.push(LayerSpec::Relu);
        if dropout > 0.0 {
            specs.push(LayerSpec::Dropout { rate: dropout });
        }
    }
    specs.push(LayerSpec::Dense { units: out });
    specs
}

pub fn build_model(cfg: &ArchConfig, rngs: &mut BranchRngs) -> Result<Model, AdaptError> {
    if cfg.num_classes < 2 {
        return Err(AdaptError::BadConfig(format!(
            "need at least two classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.num_domains == 0 {
        return Err(AdaptError::BadConfig("need at least one domain".into()));
    }
    let extractor = Network::build(cfg.extractor.clone(), &cfg.input_shape, &mut rngs.extractor)?;
    let feat = extractor.output_shape().to_vec();
    if feat.len() != 1 {
        return Err(AdaptError::BadConfig(format!(
            "extractor must end in a flat feature vector, got shape {feat:?}"
        )));
    }
    let label_head = Network::build(
        head_specs(&cfg.label_hidden, cfg.num_classes, cfg.dropout),
        &feat,
        &mut rngs.label,
    )?;
    let domain_head = Network::build(
        head_specs(&cfg.domain_hidden, cfg.num_domains, cfg.dropout),
        &feat,
        &mut rngs.domain,
    )?;
    Ok(Model {
        extractor,
        label_head,
        domain_head,
        num_classes: cfg.num_classes,
        num_domains: cfg.num_domains,
    })
}

/// One training batch. `class_labels[i] = None` marks a sample that
/// participates only in domain classification (e.g. unsupervised target
/// images); every sample always carries a domain label.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Tensor,
    pub class_labels: Vec<Option<usize>>,
    pub domain_labels: Vec<usize>,
}

impl TrainBatch {
    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    fn validate(&self, num_classes: usize, num_domains: usize) -> Result<(), AdaptError> {
        let n = self.batch_size();
        if n == 0 {
            return Err(AdaptError::BadBatch("batch is empty".into()));
        }
        if self.class_labels.len() != n || self.domain_labels.len() != n {
            return Err(AdaptError::BadBatch(format!(
                "batch of {n} images with {} class labels and {} domain labels",
                self.class_labels.len(),
                self.domain_labels.len()
            )));
        }
        if let Some(y) = self.class_labels.iter().flatten().find(|&&y| y >= num_classes) {
            return Err(AdaptError::BadBatch(format!(
                "class label {y} out of range for {num_classes} classes"
            )));
        }
        if let Some(d) = self.domain_labels.iter().find(|&&d| d >= num_domains) {
            return Err(AdaptError::BadBatch(format!(
                "domain label {d} out of range for {num_domains} domains"
            )));
        }
        Ok(())
    }
}

/// Schedule position of an adaptation run. `lambda` follows
/// `2 / (1 + exp(-10 p)) - 1` in the progress fraction `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptationState {
    step: usize,
    total_steps: usize,
}

impl AdaptationState {
    pub fn new(total_steps: usize) -> Result<Self, AdaptError> {
        if total_steps == 0 {
            return Err(AdaptError::ZeroTotalSteps);
        }
        Ok(AdaptationState {
            step: 0,
            total_steps,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn progress(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }

    pub fn lambda(&self) -> f64 {
        lambda_schedule(self.progress()).expect("progress is always in [0, 1]")
    }

    pub fn advance(&mut self) -> Result<(), AdaptError> {
        if self.step >= self.total_steps {
            return Err(AdaptError::StateExhausted {
                total: self.total_steps,
            });
        }
        self.step += 1;
        Ok(())
    }
}

/// Domain-confusion weight for progress `p` in `[0, 1]`: starts at exactly 0,
/// rises monotonically, approaches 1.
pub fn lambda_schedule(p: f64) -> Result<f64, AdaptError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AdaptError::BadProgress(p));
    }
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// Backward rule of the gradient reversal layer: the forward pass is the
/// identity, the backward pass scales the upstream gradient by `-lambda`.
pub fn grl_backward(upstream: &Tensor, lambda: f64) -> Result<Tensor, AdaptError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(AdaptError::BadLambda(lambda));
    }
    let values = upstream.values().iter().map(|&g| -lambda * g).collect();
    Ok(Tensor::new(upstream.shape().to_vec(), values).expect("same shape"))
}

/// Both branch losses of one step, always computed before any mask is
/// applied, so a masked and an unmasked run report identical loss curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub label_loss: f64,
    pub domain_loss: f64,
}

/// Runs forward and backward over all three branches, accumulating parameter
/// gradients. `mask` optionally supplies one multiplier row per sample that
/// is applied to the domain-logit gradient before it propagates anywhere;
/// entries must be 0 or 1 and masked entries become exactly zero. The
/// extractor receives `dLy/dfeat - lambda * dLd/dfeat` (the masked `dLd` on
/// both the head and extractor paths).
pub fn compute_gradients(
    model: &mut Model,
    batch: &TrainBatch,
    lambda: f64,
    mask: Option<&[Vec<f64>]>,
    rngs: &mut BranchRngs,
) -> Result<StepLosses, AdaptError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(AdaptError::BadLambda(lambda));
    }
    batch.validate(model.num_classes, model.num_domains)?;
    let n = batch.batch_size();
    let m = model.num_domains;
    if let Some(masks) = mask {
        if masks.len() != n {
            return Err(AdaptError::BadMask(format!(
                "{} mask rows for a batch of {n}",
                masks.len()
            )));
        }
        for (r, z) in masks.iter().enumerate() {
            if z.len() != m {
                return Err(AdaptError::BadMask(format!(
                    "mask row {r} has {} entries, expected {m}",
                    z.len()
                )));
            }
            if let Some(v) = z.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(AdaptError::BadMask(format!(
                    "mask row {r} contains non-binary entry {v}"
                )));
            }
        }
    }

    let (features, tape_e) = model
        .extractor
        .forward_traced(&batch.images, Some(&mut rngs.extractor))?;
    let (logits_y, tape_y) = model
        .label_head
        .forward_traced(&features, Some(&mut rngs.label))?;
    let (logits_d, tape_d) = model
        .domain_head
        .forward_traced(&features, Some(&mut rngs.domain))?;

    let (label_loss, grad_y) = batch_softmax_cross_entropy(&logits_y, &batch.class_labels)?;
    let domain_targets: Vec<Option<usize>> =
        batch.domain_labels.iter().map(|&d| Some(d)).collect();
    let (domain_loss, mut grad_d) = batch_softmax_cross_entropy(&logits_d, &domain_targets)?;

    if let Some(masks) = mask {
        for (r, z) in masks.iter().enumerate() {
            let row = &mut grad_d.values_mut()[r * m..(r + 1) * m];
            for (g, &keep) in row.iter_mut().zip(z) {
                if keep == 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    let feat_grad_y = model.label_head.backward(&tape_y, &grad_y)?;
    let feat_grad_d = model.domain_head.backward(&tape_d, &grad_d)?;
    let feat_grad = if lambda == 0.0 {
        // skipping the reversed term keeps the extractor path bit-identical
        // to training without a domain branch
        feat_grad_y
    } else {
        let reversed = grl_backward(&feat_grad_d, lambda)?;
        let values = feat_grad_y
            .values()
            .iter()
            .zip(reversed.values())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(feat_grad_y.shape().to_vec(), values).expect("same shape")
    };
    model.extractor.backward(&tape_e, &feat_grad)?;

    Ok(StepLosses {
        label_loss,
        domain_loss,
    })
}

/// One full adversarial update: gradients for all three branches, then an
/// SGD step at `mu` on each. `state` supplies lambda and is not advanced.
pub fn train_step(
    model: &mut Model,
    batch: &TrainBatch,
    state: &AdaptationState,
    mu: f64,
    mask: Option<&[Vec<f64>]>,
    rngs: &mut BranchRngs,
) -> Result<StepLosses, AdaptError> {
    let losses = compute_gradients(model, batch, state.lambda(), mask, rngs)?;
    model.extractor.params.sgd_step(mu)?;
    model.label_head.params.sgd_step(mu)?;
    model.domain_head.params.sgd_step(mu)?;
    Ok(losses)
}

/// Supervised-only update: the domain branch neither runs nor trains. The
/// extractor and label streams are consumed exactly as in [`train_step`].
pub fn train_step_label_only(
    model: &mut Model,
    batch: &TrainBatch,
    mu: f64,
    rngs: &mut BranchRngs,
) -> Result<StepLosses, AdaptError> {
    batch.validate(model.num_classes, model.num_domains)?;
    let (features, tape_e) = model
        .extractor
        .forward_traced(&batch.images, Some(&mut rngs.extractor))?;
    let (logits_y, tape_y) = model
        .label_head
        .forward_traced(&features, Some(&mut rngs.label))?;
    let (label_loss, grad_y) = batch_softmax_cross_entropy(&logits_y, &batch.class_labels)?;
    let feat_grad = model.label_head.backward(&tape_y, &grad_y)?;
    model.extractor.backward(&tape_e, &feat_grad)?;
    model.extractor.params.sgd_step(mu)?;
    model.label_head.params.sgd_step(mu)?;
    Ok(StepLosses {
        label_loss,
        domain_loss: f64::NAN,
    })
}

/// Class predictions: extractor then label head in evaluation mode, softmax,
/// argmax. The lowest index wins ties.
pub fn predict_labels(model: &Model, images: &Tensor) -> Result<Vec<usize>, AdaptError> {
    if images.shape()[0] == 0 {
        return Err(AdaptError::EmptyEvaluation);
    }
    let features = model.extractor.forward(images)?;
    let logits = model.label_head.forward(&features)?;
    let c = model.num_classes;
    let mut out = Vec::with_capacity(logits.shape()[0]);
    for r in 0..logits.shape()[0] {
        let row = logits.row(r);
        let mut best = 0usize;
        // softmax is monotone, so the argmax over probabilities equals the
        // argmax over logits; strict comparison keeps the lowest tied index
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of samples whose predicted class matches `labels`.
pub fn evaluate_accuracy(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64, AdaptError> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(AdaptError::EmptyEvaluation);
    }
    let predictions = predict_labels(model, images)?;
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch(dropout: f64) -> ArchConfig {
        ArchConfig {
            input_shape: vec![6, 6, 1],
            num_classes: 3,
            num_domains: 2,
            extractor: vec![
                LayerSpec::Conv2d {
                    filters: 2,
                    kernel: (3, 3),
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
            ],
            label_hidden: vec![8],
            domain_hidden: vec![8],
            dropout,
        }
    }

    fn random_batch(n: usize, seed: u64, labeled: bool) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 36;
        let images = Tensor::new(
            vec![n, 6, 6, 1],
            (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        TrainBatch {
            images,
            class_labels: (0..n)
                .map(|i| (labeled || i % 2 == 0).then_some(i % 3))
                .collect(),
            domain_labels: (0..n).map(|i| i % 2).collect(),
        }
    }

    #[test]
    fn same_seed_same_initial_parameters() {
        let cfg = tiny_arch(0.5);
        let a = build_model(&cfg, &mut BranchRngs::from_seed(3)).unwrap();
        let b = build_model(&cfg, &mut BranchRngs::from_seed(3)).unwrap();
        for (net_a, net_b) in [
            (&a.extractor, &b.extractor),
            (&a.label_head, &b.label_head),
            (&a.domain_head, &b.domain_head),
        ] {
            for (pa, pb) in net_a.params.iter().zip(net_b.params.iter()) {
                assert_eq!(pa.tensor.values(), pb.tensor.values());
            }
        }
    }

    #[test]
    fn branch_streams_are_independent() {
        // consuming the domain stream must not shift the others
        let a = BranchRngs::from_seed(7);
        let mut b = BranchRngs::from_seed(7);
        let _: f64 = b.domain.random();
        assert_eq!(a.extractor, b.extractor);
        assert_eq!(a.label, b.label);
        assert_ne!(a.domain, b.domain);
    }

    #[test]
    fn spatial_extractor_output_is_rejected() {
        let mut cfg = tiny_arch(0.0);
        cfg.extractor = vec![LayerSpec::Conv2d {
            filters: 2,
            kernel: (3, 3),
        }];
        let err = build_model(&cfg, &mut BranchRngs::from_seed(0)).unwrap_err();
        assert!(err.to_string().contains("flat feature vector"), "{err}");
    }

    #[test]
    fn degenerate_head_counts_are_rejected() {
        let mut cfg = tiny_arch(0.0);
        cfg.num_classes = 1;
        assert!(build_model(&cfg, &mut BranchRngs::from_seed(0)).is_err());
        let mut cfg = tiny_arch(0.0);
        cfg.num_domains = 0;
        assert!(build_model(&cfg, &mut BranchRngs::from_seed(0)).is_err());
    }

    #[test]
    fn lambda_schedule_shape() {
        assert_eq!(lambda_schedule(0.0).unwrap(), 0.0);
        let mid = lambda_schedule(0.5).unwrap();
        assert!((mid - 0.9866142981514305).abs() < 1e-12, "mid {mid}");
        let end = lambda_schedule(1.0).unwrap();
        assert!((1.0 - end) < 1e-3);
        assert!((end - 0.9999092042625952).abs() < 1e-12, "end {end}");
        let mut prev = -1.0;
        for i in 0..=1000 {
            let l = lambda_schedule(i as f64 / 1000.0).unwrap();
            assert!(l > prev, "not strictly increasing at {i}");
            assert!((0.0..1.0).contains(&l) || i == 0);
            prev = l;
        }
        assert!(lambda_schedule(-0.01).is_err());
        assert!(lambda_schedule(1.01).is_err());
        assert!(lambda_schedule(f64::NAN).is_err());
    }

    #[test]
    fn grl_scales_and_negates() {
        let g = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let out = grl_backward(&g, 0.5).unwrap();
        assert_eq!(out.values(), &[-0.5, 1.0, -0.25]);
        let zero = grl_backward(&g, 0.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        // two applications compose multiplicatively
        let twice = grl_backward(&grl_backward(&g, 0.5).unwrap(), 0.25).unwrap();
        for (t, orig) in twice.values().iter().zip(g.values()) {
            assert!((t - 0.125 * orig).abs() < 1e-15);
        }
        assert!(grl_backward(&g, -1.0).is_err());
        assert!(grl_backward(&g, f64::NAN).is_err());
    }

    fn extractor_grads(model: &Model) -> Vec<f64> {
        model
            .extractor
            .params
            .iter()
            .flat_map(|p| p.tensor.grad().unwrap_or(&[]).to_vec())
            .collect()
    }

    #[test]
    fn grl_contract_on_extractor_gradients() {
        // gradient contribution of the domain branch must equal -lambda
        // times the identity-connected contribution
        let cfg = tiny_arch(0.0);
        let batch = random_batch(4, 11, true);
        let grads_at = |lambda: f64| {
            let mut model = build_model(&cfg, &mut BranchRngs::from_seed(5)).unwrap();
            let mut rngs = BranchRngs::from_seed(99);
            compute_gradients(&mut model, &batch, lambda, None, &mut rngs).unwrap();
            extractor_grads(&model)
        };
        // identity contribution, computed by hand from the same tapes
        let identity = {
            let mut model = build_model(&cfg, &mut BranchRngs::from_seed(5)).unwrap();
            let (features, tape_e) = model.extractor.forward_traced(&batch.images, None).unwrap();
            let (logits_d, tape_d) = model.domain_head.forward_traced(&features, None).unwrap();
            let targets: Vec<Option<usize>> =
                batch.domain_labels.iter().map(|&d| Some(d)).collect();
            let (_, grad_d) = batch_softmax_cross_entropy(&logits_d, &targets).unwrap();
            let feat_grad = model.domain_head.backward(&tape_d, &grad_d).unwrap();
            model.extractor.backward(&tape_e, &feat_grad).unwrap();
            extractor_grads(&model)
        };
        let label_only = grads_at(0.0);
        for lambda in [1.0, 0.5] {
            let full = grads_at(lambda);
            for ((f, l), id) in full.iter().zip(&label_only).zip(&identity) {
                let expect = l - lambda * id;
                let scale = f.abs().max(expect.abs()).max(1e-12);
                assert!((f - expect).abs() / scale < 1e-9, "{f} vs {expect}");
            }
        }
    }

    #[test]
    fn extractor_step_ascends_domain_loss() {
        // with no class labels the extractor follows only the reversed
        // domain gradient, so a small step must increase the domain loss
        let cfg = tiny_arch(0.0);
        let mut batch = random_batch(6, 21, true);
        batch.class_labels = vec![None; 6];
        let mut model = build_model(&cfg, &mut BranchRngs::from_seed(2)).unwrap();
        let mut rngs = BranchRngs::from_seed(0);
        let before = compute_gradients(&mut model, &batch, 1.0, None, &mut rngs).unwrap();
        let grad_norm: f64 = extractor_grads(&model).iter().map(|g| g * g).sum();
        assert!(grad_norm > 1e-12, "degenerate test seed");
        model.extractor.params.sgd_step(1e-4).unwrap();
        model.label_head.params.zero_grads();
        model.domain_head.params.zero_grads();
        let mut rngs = BranchRngs::from_seed(0);
        let after = compute_gradients(&mut model, &batch, 1.0, None, &mut rngs).unwrap();
        assert!(
            after.domain_loss > before.domain_loss,
            "{} !> {}",
            after.domain_loss,
            before.domain_loss
        );
    }

    #[test]
    fn domain_head_step_descends_domain_loss() {
        let cfg = tiny_arch(0.0);
        let batch = random_batch(6, 22, true);
        let mut model = build_model(&cfg, &mut BranchRngs::from_seed(2)).unwrap();
        let mut rngs = BranchRngs::from_seed(0);
        let before = compute_gradients(&mut model, &batch, 1.0, None, &mut rngs).unwrap();
        model.domain_head.params.sgd_step(1e-3).unwrap();
        model.label_head.params.zero_grads();
        model.extractor.params.zero_grads();
        let mut rngs = BranchRngs::from_seed(0);
        let after = compute_gradients(&mut model, &batch, 1.0, None, &mut rngs).unwrap();
        assert!(after.domain_loss < before.domain_loss);
    }

    #[test]
    fn lambda_zero_matches_label_only_training_bitwise() {
        let cfg = tiny_arch(0.5);
        let mut full = build_model(&cfg, &mut BranchRngs::from_seed(17)).unwrap();
        let mut solo = build_model(&cfg, &mut BranchRngs::from_seed(17)).unwrap();
        let mut rngs_full = BranchRngs::from_seed(31);
        let mut rngs_solo = BranchRngs::from_seed(31);
        let state = AdaptationState::new(1000).unwrap();
        assert_eq!(state.lambda(), 0.0);
        for step in 0..5 {
            let batch = random_batch(8, 100 + step, true);
            train_step(&mut full, &batch, &state, 0.01, None, &mut rngs_full).unwrap();
            train_step_label_only(&mut solo, &batch, 0.01, &mut rngs_solo).unwrap();
        }
        for (a, b) in [
            (&full.extractor, &solo.extractor),
            (&full.label_head, &solo.label_head),
        ] {
            for (pa, pb) in a.params.iter().zip(b.params.iter()) {
                let bits_a: Vec<u64> = pa.tensor.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = pb.tensor.values().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "{}", pa.name());
            }
        }
    }

    #[test]
    fn all_ones_mask_matches_no_mask_bitwise() {
        let cfg = tiny_arch(0.5);
        let mut masked = build_model(&cfg, &mut BranchRngs::from_seed(23)).unwrap();
        let mut plain = build_model(&cfg, &mut BranchRngs::from_seed(23)).unwrap();
        let mut rngs_m = BranchRngs::from_seed(41);
        let mut rngs_p = BranchRngs::from_seed(41);
        let mut state = AdaptationState::new(10).unwrap();
        for step in 0..5 {
            let batch = random_batch(6, 300 + step, false);
            let ones = vec![vec![1.0; 2]; 6];
            let lm = train_step(&mut masked, &batch, &state, 0.01, Some(&ones), &mut rngs_m).unwrap();
            let lp = train_step(&mut plain, &batch, &state, 0.01, None, &mut rngs_p).unwrap();
            assert_eq!(lm, lp);
            state.advance().unwrap();
        }
        for (a, b) in [
            (&masked.extractor, &plain.extractor),
            (&masked.label_head, &plain.label_head),
            (&masked.domain_head, &plain.domain_head),
        ] {
            for (pa, pb) in a.params.iter().zip(b.params.iter()) {
                let bits_a: Vec<u64> = pa.tensor.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = pb.tensor.values().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "{}", pa.name());
            }
        }
    }

    #[test]
    fn masked_losses_equal_unmasked_losses() {
        // the mask changes updates, never the reported losses
        let cfg = tiny_arch(0.5);
        let mut masked = build_model(&cfg, &mut BranchRngs::from_seed(29)).unwrap();
        let mut plain = build_model(&cfg, &mut BranchRngs::from_seed(29)).unwrap();
        let batch = random_batch(6, 47, false);
        let zeroing = vec![vec![0.0, 1.0]; 6];
        let mut rngs_m = BranchRngs::from_seed(8);
        let mut rngs_p = BranchRngs::from_seed(8);
        let lm = compute_gradients(&mut masked, &batch, 1.0, Some(&zeroing), &mut rngs_m).unwrap();
        let lp = compute_gradients(&mut plain, &batch, 1.0, None, &mut rngs_p).unwrap();
        assert_eq!(lm, lp);
        // but the updates differ
        let gm = extractor_grads(&masked);
        let gp = extractor_grads(&plain);
        assert_ne!(gm, gp);
    }

    #[test]
    fn linear_domain_head_gradient_matches_hand_derivation() {
        // identity extractor, single linear domain layer: dLd/dW = x^T (s - onehot) / n
        let cfg = ArchConfig {
            input_shape: vec![2],
            num_classes: 2,
            num_domains: 2,
            extractor: vec![LayerSpec::Flatten],
            label_hidden: vec![],
            domain_hidden: vec![],
            dropout: 0.0,
        };
        let mut model = build_model(&cfg, &mut BranchRngs::from_seed(1)).unwrap();
        let w = model.domain_head.params.get("l0.weight").unwrap().tensor.values().to_vec();
        let batch = TrainBatch {
            images: Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap(),
            class_labels: vec![Some(1)],
            domain_labels: vec![0],
        };
        let mut rngs = BranchRngs::from_seed(0);
        compute_gradients(&mut model, &batch, 1.0, None, &mut rngs).unwrap();
        let x = [0.3, -0.7];
        let logits = [
            x[0] * w[0] + x[1] * w[2],
            x[0] * w[1] + x[1] * w[3],
        ];
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let z = e[0] + e[1];
        let s = [e[0] / z, e[1] / z];
        let gl = [s[0] - 1.0, s[1]];
        let expect = [x[0] * gl[0], x[0] * gl[1], x[1] * gl[0], x[1] * gl[1]];
        let dw = model.domain_head.params.get("l0.weight").unwrap().tensor.grad().unwrap();
        for (a, b) in dw.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_validation_errors() {
        let cfg = tiny_arch(0.0);
        let mut model = build_model(&cfg, &mut BranchRngs::from_seed(0)).unwrap();
        let mut rngs = BranchRngs::from_seed(0);
        let mut bad = random_batch(4, 0, true);
        bad.domain_labels = vec![0, 1, 2, 0];
        assert!(matches!(
            compute_gradients(&mut model, &bad, 1.0, None, &mut rngs),
            Err(AdaptError::BadBatch(_))
        ));
        let mut bad = random_batch(4, 0, true);
        bad.class_labels[0] = Some(3);
        assert!(compute_gradients(&mut model, &bad, 1.0, None, &mut rngs).is_err());
        let mut bad = random_batch(4, 0, true);
        bad.class_labels.pop();
        assert!(compute_gradients(&mut model, &bad, 1.0, None, &mut rngs).is_err());
        let good = random_batch(4, 0, true);
        let short_mask = vec![vec![1.0; 2]; 3];
        assert!(matches!(
            compute_gradients(&mut model, &good, 1.0, Some(&short_mask), &mut rngs),
            Err(AdaptError::BadMask(_))
        ));
        let nonbinary = vec![vec![0.5, 1.0]; 4];
        assert!(matches!(
            compute_gradients(&mut model, &good, 1.0, Some(&nonbinary), &mut rngs),
            Err(AdaptError::BadMask(_))
        ));
    }

    #[test]
    fn adaptation_state_lifecycle() {
        assert!(matches!(AdaptationState::new(0), Err(AdaptError::ZeroTotalSteps)));
        let mut s = AdaptationState::new(2).unwrap();
        assert_eq!(s.progress(), 0.0);
        s.advance().unwrap();
        assert_eq!(s.progress(), 0.5);
        s.advance().unwrap();
        assert_eq!(s.progress(), 1.0);
        assert!(matches!(s.advance(), Err(AdaptError::StateExhausted { .. })));
    }

    #[test]
    fn prediction_tie_breaks_to_lowest_index() {
        let cfg = ArchConfig {
            input_shape: vec![2],
            num_classes: 3,
            num_domains: 1,
            extractor: vec![LayerSpec::Flatten],
            label_hidden: vec![],
            domain_hidden: vec![],
            dropout: 0.0,
        };
        let mut model = build_model(&cfg, &mut BranchRngs::from_seed(0)).unwrap();
        let w = model.label_head.params.get_mut("l0.weight").unwrap();
        w.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let images = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        assert_eq!(predict_labels(&model, &images).unwrap(), vec![0, 0]);
        let b = model.label_head.params.get_mut("l0.bias").unwrap();
        b.tensor.values_mut().copy_from_slice(&[0.0, 1.0, 1.0]);
        assert_eq!(predict_labels(&model, &images).unwrap(), vec![1, 1]);
    }

    #[test]
    fn accuracy_counts_matches() {
        let cfg = ArchConfig {
            input_shape: vec![2],
            num_classes: 2,
            num_domains: 1,
            extractor: vec![LayerSpec::Flatten],
            label_hidden: vec![],
            domain_hidden: vec![],
            dropout: 0.0,
        };
        let mut model = build_model(&cfg, &mut BranchRngs::from_seed(0)).unwrap();
        let w = model.label_head.params.get_mut("l0.weight").unwrap();
        w.tensor.values_mut().copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
        // logit0 = x0, logit1 = -x0: positive x0 -> class 0
        let images = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.0]).unwrap();
        let acc = evaluate_accuracy(&model, &images, &[0, 1, 0, 0]).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
        assert!(evaluate_accuracy(&model, &images, &[0, 1]).is_err());
    }

    #[test]
    fn full_step_is_deterministic_given_seed() {
        let cfg = tiny_arch(0.5);
        let run = || {
            let mut model = build_model(&cfg, &mut BranchRngs::from_seed(55)).unwrap();
            let mut rngs = BranchRngs::from_seed(66);
            let state = AdaptationState::new(10).unwrap();
            let batch = random_batch(5, 77, false);
            let losses = train_step(&mut model, &batch, &state, 0.02, None, &mut rngs).unwrap();
            let params: Vec<f64> = model
                .extractor
                .params
                .iter()
                .flat_map(|p| p.tensor.values().to_vec())
                .collect();
            (losses, params)
        };
        let (la, ga) = run();
        let (lb, gb) = run();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }
}
