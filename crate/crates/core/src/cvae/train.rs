use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{batch_loss, check_inputs, standard_normal, Example};
use super::params::{HyperParams, ModelDims, ModelParams};
use crate::error::{Error, Result};

/// Independent RNG streams derived from one seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(grad.named())
            .zip(self.m.named_mut())
            .zip(self.v.named_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean loss of each epoch.
    pub loss_trace: Vec<f64>,
}

pub fn validate_examples(examples: &[Example], params: &ModelParams, hp: &HyperParams) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if ex.tokens.len() > hp.w_max {
            return Err(Error::ShapeMismatch(format!("example {i} has length {} > w_max {}", ex.tokens.len(), hp.w_max)));
        }
        ex.ctx.validate(params)?;
        let c = ex.ctx.vector(params);
        check_inputs(&ex.tokens, &c, params).map_err(|e| Error::ShapeMismatch(format!("example {i}: {e}")))?;
    }
    Ok(())
}

/// Minibatch Adam on the negative ELBO.
pub fn train(examples: &[Example], dims: ModelDims, hp: &HyperParams) -> Result<TrainOutcome> {
    hp.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let params = ModelParams::init(dims, &mut seeded_stream(hp.seed, STREAM_INIT));
    train_from(params, examples, hp)
}

/// Continues training from given parameters.
pub fn train_from(mut params: ModelParams, examples: &[Example], hp: &HyperParams) -> Result<TrainOutcome> {
    validate_examples(examples, &params, hp)?;
    let mut shuffle_rng = seeded_stream(hp.seed, STREAM_SHUFFLE);
    let mut noise_rng = seeded_stream(hp.seed, STREAM_NOISE);
    let mut adam = Adam::new(&params, hp.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_trace = Vec::with_capacity(hp.epochs);
    let mut batch: Vec<&Example> = Vec::with_capacity(hp.batch_size);
    let mut noise = Vec::with_capacity(hp.batch_size);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &examples[i]));
            noise.clear();
            noise.extend(chunk.iter().map(|_| standard_normal(params.dims.d_z, &mut noise_rng)));
            let (loss, grad) = batch_loss(&batch, &params, hp, &noise)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}, gradient finite: {}", grad.is_finite()),
                });
            }
            adam.step(&mut params, &grad);
            epoch_loss += loss * chunk.len() as f64;
        }
        let mean = epoch_loss / examples.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace })
}
