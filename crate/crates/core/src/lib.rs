//! Selective fine-tuning of biased classifiers on balanced synthetic data.
//!
//! A model pretrained on biased real data is fine-tuned on balanced synthetic
//! data, but only in the parameter groups whose gradients are insensitive to
//! the real/synthetic domain gap and sensitive to the group imbalance.
//!
//! * [`net`]: MLP classifier with parameter groups, exact gradients, masked SGD.
//! * [`data`]: planted-bias two-domain simulator, composition, CSV, prompt text.
//! * [`mask`]: sensitivity scores, rankings, top-k intersection and baseline masks.
//! * [`train`]: pretraining, selective fine-tuning, baseline strategies.
//! * [`metrics`]: group accuracies, equalized odds, worst-group accuracy, STD.
//! * [`harness`]: config-driven experiment runner behind the CLI.

pub mod data;
pub mod error;
pub mod harness;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod train;

pub use error::{Error, Result};
