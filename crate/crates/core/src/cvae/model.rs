//! Forward passes, Monte-Carlo reconstruction scoring and the ELBO with its
//! analytic gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::context::{ContextInput, ContextVector};
use super::gru::{self, GruScratch, GruStep};
use super::params::{token_row, HyperParams, ModelParams};
use crate::error::{Error, Result};
use crate::geo::GridToken;

/// `logvar` is clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub subtraj_id: u64,
    pub agent_id: String,
    pub recon_loglik: f64,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(subtraj_id: u64, agent_id: impl Into<String>, recon_loglik: f64) -> Self {
        Self { subtraj_id, agent_id: agent_id.into(), recon_loglik, score: 1.0 - recon_loglik }
    }
}

/// One training or scoring example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<GridToken>,
    pub ctx: ContextInput,
}

pub fn check_inputs(tokens: &[GridToken], c: &ContextVector, params: &ModelParams) -> Result<()> {
    let d = params.dims;
    if tokens.len() < 2 {
        return Err(Error::ShapeMismatch(format!("sequence of length {} (need >= 2)", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|t| t.index() >= d.vocab) {
        return Err(Error::ShapeMismatch(format!("token {} outside vocabulary of {}", t.0, d.vocab)));
    }
    if c.vec.len() != d.context_dim() {
        return Err(Error::ShapeMismatch(format!("context of length {}, expected {}", c.vec.len(), d.context_dim())));
    }
    Ok(())
}

fn rnn_input(params: &ModelParams, row: usize, c: &ContextVector, buf: &mut [f64]) {
    let d_tok = params.dims.d_tok;
    buf[..d_tok].copy_from_slice(params.tok_emb.row(row));
    buf[d_tok..].copy_from_slice(&c.vec);
}

struct EncoderTrace {
    steps: Vec<GruStep>,
    logvar_raw: Vec<f64>,
}

fn encoder_forward(tokens: &[GridToken], c: &ContextVector, params: &ModelParams, trace: bool) -> (LatentPosterior, Option<EncoderTrace>) {
    let d = params.dims;
    let mut scratch = GruScratch::new(d.d_hid);
    let mut x = vec![0.0; d.rnn_input_dim()];
    let mut h = vec![0.0; d.d_hid];
    let mut steps = Vec::new();
    for &t in tokens {
        rnn_input(params, token_row(t.0), c, &mut x);
        if trace {
            let s = gru::step(&params.enc, &x, &h, &mut scratch);
            h.copy_from_slice(&s.h);
            steps.push(s);
        } else {
            gru::step_inplace(&params.enc, &x, &mut h, &mut scratch);
        }
    }
    let mu = params.mu_w.matvec(&h, Some(&params.mu_b));
    let logvar_raw = params.logvar_w.matvec(&h, Some(&params.logvar_b));
    let logvar = logvar_raw.iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
    let post = LatentPosterior { mu, logvar };
    (post, trace.then_some(EncoderTrace { steps, logvar_raw }))
}

/// Posterior `q(z | x, c)` from the final encoder state.
pub fn encode(tokens: &[GridToken], c: &ContextVector, params: &ModelParams) -> Result<LatentPosterior> {
    check_inputs(tokens, c, params)?;
    Ok(encoder_forward(tokens, c, params, false).0)
}

/// `z = mu + exp(logvar / 2) * eps`
pub fn reparameterize(post: &LatentPosterior, eps: &[f64]) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

pub fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_standard_normal(post: &LatentPosterior) -> f64 {
    0.5 * post
        .mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

fn log_softmax_at(logits: &[f64], target: usize) -> (f64, f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    (logits[target] - lse, lse)
}

fn decoder_init(z: &[f64], c: &ContextVector, params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let mut init_in = Vec::with_capacity(z.len() + c.vec.len());
    init_in.extend_from_slice(z);
    init_in.extend_from_slice(&c.vec);
    let h0 = params.init_w.matvec(&init_in, Some(&params.init_b)).into_iter().map(f64::tanh).collect();
    (init_in, h0)
}

/// Teacher-forced `log p(x | z, c)`, summed over steps.
fn decode_sum(tokens: &[GridToken], c: &ContextVector, z: &[f64], params: &ModelParams) -> f64 {
    let d = params.dims;
    let mut scratch = GruScratch::new(d.d_hid);
    let (_, mut h) = decoder_init(z, c, params);
    let mut x = vec![0.0; d.rnn_input_dim()];
    let mut logits = vec![0.0; d.vocab];
    let mut prev = d.bos_row();
    let mut total = 0.0;
    for &t in tokens {
        rnn_input(params, prev, c, &mut x);
        gru::step_inplace(&params.dec, &x, &mut h, &mut scratch);
        params.out_w.matvec_into(&h, Some(&params.out_b), &mut logits);
        total += log_softmax_at(&logits, t.index()).0;
        prev = token_row(t.0);
    }
    total
}

/// Log-likelihood of `tokens` under the decoder, per token when `length_normalize`.
pub fn decode_loglik(
    tokens: &[GridToken],
    c: &ContextVector,
    z: &[f64],
    params: &ModelParams,
    length_normalize: bool,
) -> Result<f64> {
    check_inputs(tokens, c, params)?;
    if z.len() != params.dims.d_z {
        return Err(Error::ShapeMismatch(format!("latent of length {}, expected {}", z.len(), params.dims.d_z)));
    }
    let sum = decode_sum(tokens, c, z, params);
    Ok(if length_normalize { sum / tokens.len() as f64 } else { sum })
}

/// Mean of [`decode_loglik`] over `samples` reparameterized posterior draws.
pub fn recon_loglik_mc(
    tokens: &[GridToken],
    c: &ContextVector,
    params: &ModelParams,
    samples: usize,
    length_normalize: bool,
    rng: &mut impl Rng,
) -> Result<f64> {
    recon_loglik_mc_with(tokens, c, params, samples, length_normalize, |n| standard_normal(n, rng))
}

/// [`recon_loglik_mc`] with an explicit noise source.
pub fn recon_loglik_mc_with(
    tokens: &[GridToken],
    c: &ContextVector,
    params: &ModelParams,
    samples: usize,
    length_normalize: bool,
    mut noise: impl FnMut(usize) -> Vec<f64>,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("need at least one Monte-Carlo sample".into()));
    }
    let post = encode(tokens, c, params)?;
    let mut acc = 0.0;
    for _ in 0..samples {
        let z = reparameterize(&post, &noise(params.dims.d_z));
        acc += decode_sum(tokens, c, &z, params);
    }
    let mean = acc / samples as f64;
    Ok(if length_normalize { mean / tokens.len() as f64 } else { mean })
}

/// `score = 1 - recon_loglik`; higher means less likely under the model.
#[allow(clippy::too_many_arguments)]
pub fn anomaly_score(
    subtraj_id: u64,
    agent_id: &str,
    tokens: &[GridToken],
    c: &ContextVector,
    params: &ModelParams,
    samples: usize,
    length_normalize: bool,
    rng: &mut impl Rng,
) -> Result<ScoreRecord> {
    let ll = recon_loglik_mc(tokens, c, params, samples, length_normalize, rng)?;
    Ok(ScoreRecord::new(subtraj_id, agent_id, ll))
}

/// Mean negative one-sample ELBO over a batch and its gradient. Noise is drawn
/// from `rng`, one `d_z` vector per example in batch order.
pub fn elbo_loss(batch: &[Example], params: &ModelParams, hp: &HyperParams, rng: &mut impl Rng) -> Result<(f64, ModelParams)> {
    let noise: Vec<Vec<f64>> = batch.iter().map(|_| standard_normal(params.dims.d_z, rng)).collect();
    elbo_loss_with_noise(batch, params, hp, &noise)
}

/// Loss terms of one example, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub recon_loglik: f64,
    pub kl: f64,
}

pub fn elbo_loss_with_noise(
    batch: &[Example],
    params: &ModelParams,
    hp: &HyperParams,
    noise: &[Vec<f64>],
) -> Result<(f64, ModelParams)> {
    let refs: Vec<&Example> = batch.iter().collect();
    batch_loss(&refs, params, hp, noise)
}

pub(crate) fn batch_loss(
    batch: &[&Example],
    params: &ModelParams,
    hp: &HyperParams,
    noise: &[Vec<f64>],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    if noise.len() != batch.len() {
        return Err(Error::ShapeMismatch("one noise vector per example required".into()));
    }
    let mut grad = params.zeros_like();
    let coef = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (ex, eps) in batch.iter().zip(noise) {
        let parts = example_backward(ex, params, hp.length_normalize, eps, coef, &mut grad)?;
        loss += coef * (parts.kl - parts.recon_loglik);
    }
    Ok((loss, grad))
}

/// Forward and backward for one example; gradients of `coef * loss` are accumulated into `grad`.
fn example_backward(
    ex: &Example,
    params: &ModelParams,
    length_normalize: bool,
    eps: &[f64],
    coef: f64,
    grad: &mut ModelParams,
) -> Result<LossParts> {
    let d = params.dims;
    ex.ctx.validate(params)?;
    let c = ex.ctx.vector(params);
    check_inputs(&ex.tokens, &c, params)?;
    if eps.len() != d.d_z {
        return Err(Error::ShapeMismatch(format!("noise of length {}, expected {}", eps.len(), d.d_z)));
    }

    let (post, trace) = encoder_forward(&ex.tokens, &c, params, true);
    let trace = trace.expect("traced");
    let z = reparameterize(&post, eps);

    // decoder forward, keeping every step
    let (init_in, h0) = decoder_init(&z, &c, params);
    let mut scratch = GruScratch::new(d.d_hid);
    let mut x = vec![0.0; d.rnn_input_dim()];
    let mut logits = vec![0.0; d.vocab];
    let mut steps = Vec::with_capacity(ex.tokens.len());
    let mut probs = Vec::with_capacity(ex.tokens.len());
    let mut h = h0.clone();
    let mut prev = d.bos_row();
    let mut ll_sum = 0.0;
    for &t in &ex.tokens {
        rnn_input(params, prev, &c, &mut x);
        let s = gru::step(&params.dec, &x, &h, &mut scratch);
        h.copy_from_slice(&s.h);
        params.out_w.matvec_into(&h, Some(&params.out_b), &mut logits);
        let (lp, lse) = log_softmax_at(&logits, t.index());
        ll_sum += lp;
        probs.push(logits.iter().map(|l| (l - lse).exp()).collect::<Vec<f64>>());
        steps.push(s);
        prev = token_row(t.0);
    }
    let norm = if length_normalize { ex.tokens.len() as f64 } else { 1.0 };
    let recon_loglik = ll_sum / norm;
    let kl = kl_standard_normal(&post);

    // decoder backward
    let mut dc = vec![0.0; d.context_dim()];
    let mut dx = vec![0.0; d.rnn_input_dim()];
    let mut dh_next = vec![0.0; d.d_hid];
    let step_coef = coef / norm;
    for t in (0..ex.tokens.len()).rev() {
        let target = ex.tokens[t].index();
        let mut dlogits: Vec<f64> = probs[t].iter().map(|p| step_coef * p).collect();
        dlogits[target] -= step_coef;
        let s = &steps[t];
        grad.out_w.outer_acc(&dlogits, &s.h);
        grad.out_b.add_vec(&dlogits);
        params.out_w.matvec_t_acc(&dlogits, &mut dh_next);
        dx.iter_mut().for_each(|v| *v = 0.0);
        dh_next = gru::step_backward(&params.dec, s, &dh_next, &mut grad.dec, &mut dx);
        let prev_row = if t == 0 { d.bos_row() } else { token_row(ex.tokens[t - 1].0) };
        grad.tok_emb.row_mut(prev_row).iter_mut().zip(&dx[..d.d_tok]).for_each(|(g, v)| *g += v);
        dc.iter_mut().zip(&dx[d.d_tok..]).for_each(|(g, v)| *g += v);
    }

    // decoder initial state
    let da: Vec<f64> = dh_next.iter().zip(&h0).map(|(g, h)| g * (1.0 - h * h)).collect();
    grad.init_w.outer_acc(&da, &init_in);
    grad.init_b.add_vec(&da);
    let mut d_init_in = vec![0.0; init_in.len()];
    params.init_w.matvec_t_acc(&da, &mut d_init_in);
    dc.iter_mut().zip(&d_init_in[d.d_z..]).for_each(|(g, v)| *g += v);

    // reparameterization and KL
    let mut dmu = vec![0.0; d.d_z];
    let mut dlv = vec![0.0; d.d_z];
    for j in 0..d.d_z {
        let (m, lv) = (post.mu[j], post.logvar[j]);
        let dz = d_init_in[j];
        dmu[j] = dz + coef * m;
        let raw = trace.logvar_raw[j];
        dlv[j] = if (-LOGVAR_CLAMP..=LOGVAR_CLAMP).contains(&raw) {
            dz * eps[j] * 0.5 * (0.5 * lv).exp() + coef * 0.5 * (lv.exp() - 1.0)
        } else {
            0.0
        };
    }

    // posterior heads
    let h_last = &trace.steps.last().expect("non-empty").h;
    grad.mu_w.outer_acc(&dmu, h_last);
    grad.mu_b.add_vec(&dmu);
    grad.logvar_w.outer_acc(&dlv, h_last);
    grad.logvar_b.add_vec(&dlv);
    let mut dh = vec![0.0; d.d_hid];
    params.mu_w.matvec_t_acc(&dmu, &mut dh);
    params.logvar_w.matvec_t_acc(&dlv, &mut dh);

    // encoder backward
    for t in (0..ex.tokens.len()).rev() {
        dx.iter_mut().for_each(|v| *v = 0.0);
        dh = gru::step_backward(&params.enc, &trace.steps[t], &dh, &mut grad.enc, &mut dx);
        let row = token_row(ex.tokens[t].0);
        grad.tok_emb.row_mut(row).iter_mut().zip(&dx[..d.d_tok]).for_each(|(g, v)| *g += v);
        dc.iter_mut().zip(&dx[d.d_tok..]).for_each(|(g, v)| *g += v);
    }

    ex.ctx.backward(params, &c, &dc, grad);
    Ok(LossParts { recon_loglik, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::params::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(ids: &[u32]) -> Vec<GridToken> {
        ids.iter().map(|&i| GridToken(i)).collect()
    }

    fn small() -> ModelParams {
        let hp = HyperParams { d_tok: 3, d_agent: 2, d_ctx: 2, d_hid: 4, d_z: 3, ..Default::default() };
        ModelParams::init(ModelDims::new(6, 2, 3, &hp), &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn ctx(p: &ModelParams) -> ContextVector {
        ContextInput { agent_row: Some(1), poi: Some(vec![1.0, 0.0, 2.0]) }.vector(p)
    }

    #[test]
    fn zero_weights_give_bias_posterior() {
        let mut p = small().zeros_like();
        p.mu_b.data = vec![0.5, -1.0, 2.0];
        p.logvar_b.data = vec![0.3, 20.0, -30.0];
        let c = ContextVector { vec: vec![0.0; 4] };
        for seq in [toks(&[1, 2]), toks(&[5, 4, 3, 2])] {
            let post = encode(&seq, &c, &p).unwrap();
            assert_eq!(post.mu, vec![0.5, -1.0, 2.0]);
            assert_eq!(post.logvar, vec![0.3, 10.0, -10.0]);
        }
    }

    #[test]
    fn posterior_depends_on_input() {
        let p = small();
        let c = ctx(&p);
        let a = encode(&toks(&[1, 2, 3]), &c, &p).unwrap();
        let b = encode(&toks(&[4, 0, 5]), &c, &p).unwrap();
        assert_eq!(a.mu.len(), 3);
        assert_eq!(a.logvar.len(), 3);
        assert_ne!(a.mu, b.mu);
    }

    #[test]
    fn shape_errors() {
        let p = small();
        let c = ctx(&p);
        assert!(matches!(encode(&toks(&[1]), &c, &p), Err(Error::ShapeMismatch(_))));
        assert!(matches!(encode(&toks(&[1, 6]), &c, &p), Err(Error::ShapeMismatch(_))));
        let bad = ContextVector { vec: vec![0.0; 3] };
        assert!(matches!(encode(&toks(&[1, 2]), &bad, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reparameterize_cases() {
        let post = LatentPosterior { mu: vec![1.0, -2.0], logvar: vec![0.0, 0.0] };
        assert_eq!(reparameterize(&post, &[0.0, 0.0]), post.mu);
        assert_eq!(reparameterize(&post, &[0.5, -1.5]), vec![1.5, -3.5]);
    }

    #[test]
    fn kl_closed_form_cases() {
        let zero = LatentPosterior { mu: vec![0.0; 4], logvar: vec![0.0; 4] };
        assert_eq!(kl_standard_normal(&zero), 0.0);
        let shifted = LatentPosterior { mu: vec![1.0, 0.0, 0.0], logvar: vec![0.0; 3] };
        assert!((kl_standard_normal(&shifted) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_emission() {
        let hp = HyperParams { d_tok: 2, d_agent: 1, d_ctx: 1, d_hid: 2, d_z: 2, ..Default::default() };
        let mut p = ModelParams::init(ModelDims::new(2, 0, 0, &hp), &mut ChaCha8Rng::seed_from_u64(0));
        p.out_w.data.iter_mut().for_each(|v| *v = 0.0);
        p.out_b.data = vec![0.7, 0.7];
        let c = ContextVector { vec: vec![0.0; 2] };
        let seq = toks(&[0, 1, 1, 0, 1]);
        let sum = decode_loglik(&seq, &c, &[0.3, -0.2], &p, false).unwrap();
        assert!((sum - 5.0 * 0.5f64.ln()).abs() < 1e-12);
        let mean = decode_loglik(&seq, &c, &[0.3, -0.2], &p, true).unwrap();
        assert!((mean - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_emission() {
        let mut p = small();
        p.out_w.data.iter_mut().for_each(|v| *v = 0.0);
        p.out_b.data = vec![-50.0; 6];
        p.out_b.data[2] = 50.0;
        let c = ctx(&p);
        let ll = decode_loglik(&toks(&[2, 2, 2]), &c, &[0.0; 3], &p, true).unwrap();
        assert!(ll <= 0.0 && ll > -1e-20 && ll.is_finite());
    }

    #[test]
    fn mc_with_zero_noise_is_decode_at_mean() {
        let p = small();
        let c = ctx(&p);
        let seq = toks(&[1, 4, 2]);
        let post = encode(&seq, &c, &p).unwrap();
        let direct = decode_loglik(&seq, &c, &post.mu, &p, true).unwrap();
        let mc = recon_loglik_mc_with(&seq, &c, &p, 1, true, |n| vec![0.0; n]).unwrap();
        assert_eq!(direct, mc);
    }

    #[test]
    fn mc_is_seeded() {
        let p = small();
        let c = ctx(&p);
        let seq = toks(&[1, 4, 2]);
        let a = recon_loglik_mc(&seq, &c, &p, 8, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = recon_loglik_mc(&seq, &c, &p, 8, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn score_arithmetic() {
        assert_eq!(ScoreRecord::new(0, "a", 0.0).score, 1.0);
        assert!((ScoreRecord::new(0, "a", -4.2).score - 5.2).abs() < 1e-12);
    }

    #[test]
    fn loss_parts_match_forward() {
        let p = small();
        let hp = HyperParams { length_normalize: true, ..Default::default() };
        let ex = Example { tokens: toks(&[1, 4, 2]), ctx: ContextInput { agent_row: Some(1), poi: Some(vec![1.0, 0.0, 2.0]) } };
        let eps = vec![0.1, -0.4, 0.9];
        let (loss, _) = elbo_loss_with_noise(std::slice::from_ref(&ex), &p, &hp, std::slice::from_ref(&eps)).unwrap();
        let c = ex.ctx.vector(&p);
        let post = encode(&ex.tokens, &c, &p).unwrap();
        let z = reparameterize(&post, &eps);
        let expected = kl_standard_normal(&post) - decode_loglik(&ex.tokens, &c, &z, &p, true).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_batch() {
        let p = small();
        assert!(matches!(elbo_loss_with_noise(&[], &p, &HyperParams::default(), &[]), Err(Error::EmptyInput)));
    }
}
