//! Site-adaptation layers on top of plain federated averaging.
//!
//! - [`moe`]: a per-site mixture of the global model and a private expert.
//! - [`align`]: adversarial alignment of generator features across sites.
//! - [`probe`]: how separable sites remain in generator feature space.

pub mod align;
pub mod moe;
pub mod probe;

pub use align::{
    disc_loss, disc_loss_grads, gen_align_grads, gen_align_loss, run_fed_align, share_features, AlignConfig,
    AlignNode, AlignOutcome, AlignRecord, FeatureBatch,
};
pub use moe::{gate_histogram, mix, moe_forward, moe_train_grads, train_fed_moe, MoEHead, MoeConfig, MoeGrads, MoeNode, MoeOutcome};
pub use probe::{balanced_accuracy, pair_probe, site_probe_accuracy, ProbeConfig, ProbeSite};
