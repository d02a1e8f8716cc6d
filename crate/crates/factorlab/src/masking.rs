//! Factor-preserving masking. A factor assignment labels every training
//! domain with one value of a chosen domain factor; during the adversarial
//! step each sample's domain-logit gradient is masked so that domain
//! confusion is only demanded between domains sharing the sample's factor
//! value. Features that encode the chosen factor therefore escape the
//! adversarial pressure.
//!
//! A practical note on the masked game: an unmasked softmax gradient row
//! sums to zero, but a masked row sums to minus the softmax mass of the
//! masked-out domains. Through the reversal layer that remainder becomes a
//! persistent common-mode push on the extractor whenever the domain head is
//! unconfident, and a hidden relu layer in the domain head can be silenced
//! by it faster than the head gains confidence, which stalls training. A
//! linear domain head (empty `domain_hidden`, the default) separates the
//! groups quickly enough that the push dies out on its own.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::adversarial::{self, AdaptationState, AdaptError, BranchRngs, Model, StepLosses, TrainBatch};
use crate::world::DomainSpec;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("assignment needs at least one domain")]
    Empty,
    #[error("factor name must be non-empty")]
    UnnamedFactor,
    #[error("domain {domain} out of range for {domains} assigned domains")]
    DomainOutOfRange { domain: usize, domains: usize },
    #[error("gradient row has {grad} entries but the mask has {mask}")]
    LengthMismatch { grad: usize, mask: usize },
    #[error("mask entry {0} is not binary")]
    NonBinary(f64),
    #[error("`{factor}` is not a domain factor here (unknown or varying within a domain)")]
    NotADomainFactor { factor: String },
}

/// One factor value per training domain, positionally indexed by the model's
/// domain label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorAssignment {
    factor: String,
    values: Vec<String>,
}

impl FactorAssignment {
    pub fn new(factor: impl Into<String>, values: Vec<String>) -> Result<Self, MaskError> {
        let factor = factor.into();
        if factor.is_empty() {
            return Err(MaskError::UnnamedFactor);
        }
        if values.is_empty() {
            return Err(MaskError::Empty);
        }
        Ok(FactorAssignment { factor, values })
    }

    pub fn factor(&self) -> &str {
        &self.factor
    }

    pub fn num_domains(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, domain: usize) -> Result<&str, MaskError> {
        self.values
            .get(domain)
            .map(String::as_str)
            .ok_or(MaskError::DomainOutOfRange {
                domain,
                domains: self.values.len(),
            })
    }

    /// Domains grouped by shared factor value, each group sorted.
    pub fn groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (k, v) in self.values.iter().enumerate() {
            map.entry(v.as_str()).or_default().push(k);
        }
        map
    }

    pub fn group_count(&self) -> usize {
        self.groups().len()
    }
}

/// Mask for a sample from `domain`: `z[j] = 1` iff domain `j` shares the
/// sample's factor value. The own domain is always unmasked.
pub fn compute_mask(assignment: &FactorAssignment, domain: usize) -> Result<Vec<f64>, MaskError> {
    let own = assignment.value(domain)?;
    Ok(assignment
        .values
        .iter()
        .map(|v| if v == own { 1.0 } else { 0.0 })
        .collect())
}

/// All distinct masks of an assignment, keyed by factor value.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMask {
    assignment: FactorAssignment,
    masks: BTreeMap<String, Vec<f64>>,
}

impl GroupMask {
    pub fn new(assignment: &FactorAssignment) -> Self {
        let mut masks = BTreeMap::new();
        for (value, members) in assignment.groups() {
            let mask = compute_mask(assignment, members[0]).expect("member index is valid");
            masks.insert(value.to_string(), mask);
        }
        GroupMask {
            assignment: assignment.clone(),
            masks,
        }
    }

    pub fn for_value(&self, value: &str) -> Option<&[f64]> {
        self.masks.get(value).map(Vec::as_slice)
    }

    pub fn for_domain(&self, domain: usize) -> Result<&[f64], MaskError> {
        let value = self.assignment.value(domain)?;
        Ok(self.masks[value].as_slice())
    }
}

/// Elementwise product of a gradient row with a binary mask. Masked entries
/// come out exactly zero.
pub fn apply_mask(grad_row: &[f64], z: &[f64]) -> Result<Vec<f64>, MaskError> {
    if grad_row.len() != z.len() {
        return Err(MaskError::LengthMismatch {
            grad: grad_row.len(),
            mask: z.len(),
        });
    }
    if let Some(&v) = z.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(MaskError::NonBinary(v));
    }
    Ok(grad_row
        .iter()
        .zip(z)
        .map(|(&g, &keep)| if keep == 0.0 { 0.0 } else { g })
        .collect())
}

/// Per-sample masks for a batch of domain labels.
pub fn batch_masks(
    assignment: &FactorAssignment,
    domain_labels: &[usize],
) -> Result<Vec<Vec<f64>>, MaskError> {
    domain_labels
        .iter()
        .map(|&d| compute_mask(assignment, d))
        .collect()
}

/// Factor-preserving variant of [`adversarial::train_step`]: identical in
/// every respect except that each sample's domain-logit gradient is masked
/// to its factor group before propagating to either the domain head or the
/// extractor. Reported losses stay pre-mask.
pub fn masked_train_step(
    model: &mut Model,
    batch: &TrainBatch,
    state: &AdaptationState,
    mu: f64,
    assignment: &FactorAssignment,
    rngs: &mut BranchRngs,
) -> Result<StepLosses, AdaptError> {
    if assignment.num_domains() != model.num_domains {
        return Err(AdaptError::BadMask(format!(
            "assignment covers {} domains, model has {}",
            assignment.num_domains(),
            model.num_domains
        )));
    }
    let masks = batch_masks(assignment, &batch.domain_labels)
        .map_err(|e| AdaptError::BadMask(e.to_string()))?;
    adversarial::train_step(model, batch, state, mu, Some(&masks), rngs)
}

/// Reads one domain factor off a list of domain specifications, in list
/// order. Factors that vary within a domain (class, pose) are by definition
/// not recorded on a [`DomainSpec`] and are rejected.
pub fn grouping_from_factor(
    specs: &[DomainSpec],
    factor: &str,
) -> Result<FactorAssignment, MaskError> {
    if specs.is_empty() {
        return Err(MaskError::Empty);
    }
    let values = specs
        .iter()
        .map(|s| {
            s.factor_value(factor)
                .map(str::to_string)
                .ok_or_else(|| MaskError::NotADomainFactor {
                    factor: factor.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    FactorAssignment::new(factor, values)
}
