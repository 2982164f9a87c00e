use rayon::prelude::*;

use super::context::ContextBuilder;
use super::model::{anomaly_score, ScoreRecord};
use super::params::ModelParams;
use super::train::seeded_stream;
use crate::error::{Error, Result};
use crate::preprocess::TokenSequence;

const STREAM_SCORE: u64 = 3;

/// splitmix64 finalizer, used to derive per-sequence seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scores every sequence. Each sequence draws its noise from a stream keyed by
/// `(seed, subtraj_id)`, so results do not depend on `threads` or input order.
pub fn score_sequences(
    seqs: &[TokenSequence],
    builder: &ContextBuilder,
    params: &ModelParams,
    samples: usize,
    length_normalize: bool,
    seed: u64,
    threads: usize,
) -> Result<Vec<ScoreRecord>> {
    let score_one = |seq: &TokenSequence| {
        let input = builder.input(seq);
        input.validate(params)?;
        let c = input.vector(params);
        let mut rng = seeded_stream(mix_seed(seed, seq.subtraj_id), STREAM_SCORE);
        anomaly_score(seq.subtraj_id, &seq.agent_id, &seq.tokens, &c, params, samples, length_normalize, &mut rng)
    };
    if threads <= 1 {
        return seqs.iter().map(score_one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| seqs.par_iter().map(score_one).collect())
}
