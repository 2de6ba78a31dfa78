//! Supervised Siamese training for invariant point-cloud networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with a reverse-mode tape and `detach`
//! - [`molgraph`]: conformer records, augmentation and radial graphs
//! - [`encoder`]: continuous-filter message passing, projection MLP, posterior heads
//! - [`objective`]: target, Siamese and l2 terms and their weighted combination
//! - [`metrics`]: smoothness, feature variance, CEV spectrum, ROC-AUC, Spearman
//! - [`trainer`]: sampling weights, batches, Adam, epochs and checkpoint selection
//!
//! Batch gradients and per-molecule evaluation run on rayon when the
//! `parallel` feature is on (the default); [`par::ExecMode`] picks the
//! path at runtime so both can be compared.

pub mod tensor;
pub mod par;
pub mod molgraph;
pub mod encoder;
pub mod objective;
pub mod metrics;
pub mod trainer;
pub mod synthetic;
pub mod seed;
