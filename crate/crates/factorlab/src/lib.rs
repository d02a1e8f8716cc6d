//! A small, fully deterministic laboratory for studying negative transfer in
//! adversarial domain adaptation.
//!
//! The crate bundles four things:
//!
//! * a reverse-mode differentiation engine sized for tiny convolutional
//!   networks ([`nn`]),
//! * a three-branch adversarial adaptation model with a gradient reversal
//!   layer, plus the factor-preserving masking rule that limits domain
//!   confusion to groups of domains sharing a factor value ([`adversarial`],
//!   [`masking`]),
//! * a synthetic image world whose generative factors are known exactly, so
//!   that claims about which factor caused a transfer failure are checkable
//!   ([`world`]),
//! * transfer-matrix analysis (PCA over domain-to-domain accuracy tables) and
//!   an experiment harness that produces byte-stable CSV artifacts
//!   ([`analysis`], [`harness`]).

pub mod adversarial;
pub mod analysis;
pub mod harness;
pub mod masking;
pub mod nn;
pub mod world;
