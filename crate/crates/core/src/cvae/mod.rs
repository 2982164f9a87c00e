//! Context-aware conditional VAE over grid-token sequences.
//!
//! A GRU encoder maps `[token embedding ; c]` inputs to a diagonal Gaussian
//! posterior. A GRU decoder, initialized from `[z ; c]` and also fed `c` at
//! every step, emits a categorical distribution over grid tokens under teacher
//! forcing. Training minimizes the negative one-sample ELBO against a standard
//! normal prior; scoring averages the reconstruction log-likelihood over `L`
//! posterior draws.

pub mod checkpoint;
pub mod context;
pub mod gru;
pub mod model;
pub mod params;
pub mod score;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use context::{AgentTable, ContextBuilder, ContextInput, ContextMode, ContextVector};
pub use model::{
    anomaly_score, decode_loglik, elbo_loss, elbo_loss_with_noise, encode, kl_standard_normal, recon_loglik_mc,
    recon_loglik_mc_with, reparameterize, Example, LatentPosterior, ScoreRecord, LOGVAR_CLAMP,
};
pub use params::{HyperParams, ModelDims, ModelParams, Tensor};
pub use score::{mix_seed, score_sequences};
pub use train::{train, train_from, Adam, TrainOutcome};
