//! Conditional set-expansion model: set-level latent `theta` with a
//! flow-augmented prior, per-slot embeddings `g_i`, and a conditional VAE
//! over individual elements.

mod config;
mod flow;
pub mod gaussian;
mod mlp;
mod model;

pub use config::{AblationFlags, HallucinatorConfig, Variant, ZPrior};
pub use flow::{Coupling, CouplingFlow};
pub use mlp::{Conditioning, ModulatedMlp};
pub use model::{ElboBreakdown, ElboNoise, ElboTerms, HallucinatorModel};
