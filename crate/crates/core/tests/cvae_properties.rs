mod common;

use trajscope_core::cvae::{self, ContextInput, ContextMode, HyperParams, ModelDims, ModelParams};

#[test]
fn analytic_gradient_matches_central_differences() {
    let (at, err) = common::gradient_check(5);
    assert!(err < 1e-4, "worst relative error {err:e} at {at}");
}

#[test]
fn closed_form_kl_agrees_with_monte_carlo() {
    assert_eq!(common::kl_vs_mc(100, 100_000, common::KL_SEED), 0);
}

#[test]
fn memorized_sequences_beat_uniform_and_random() {
    let m = common::memorization(1);
    let floor = (1.0 / m.vocab as f64).ln() + 1.0;
    for ll in &m.train_loglik {
        assert!(*ll > floor, "per-token loglik {ll} not above {floor}");
    }
    assert!(m.train_scores.iter().all(|s| *s < m.random_score));
    assert!(m.epoch50_loss < m.first_loss);
}

#[test]
fn swapping_agent_ids_raises_scores_only_with_agent_context() {
    let with_agent = common::context_separation(ContextMode::AgentId, 2);
    assert!(with_agent >= common::SIGN_TEST_K, "{with_agent} of 32");
    let without = common::context_separation(ContextMode::None, 2);
    assert!(without < common::SIGN_TEST_K, "{without} of 32");
}

#[test]
fn sign_test_threshold() {
    assert!(common::binomial_upper_tail(32, 24) < 0.01);
    assert!(common::binomial_upper_tail(32, 23) >= 0.01);
}

#[test]
fn mc_estimate_concentrates() {
    let hp = HyperParams { d_tok: 4, d_agent: 2, d_ctx: 2, d_hid: 6, d_z: 3, ..HyperParams::default() };
    let params = ModelParams::init(ModelDims::new(10, 0, 0, &hp), &mut common::rng(8));
    let toks = common::toks(&[1, 4, 2, 9]);
    let c = ContextInput::default().vector(&params);
    let spread = |l: usize| {
        let mut r = common::rng(l as u64);
        let xs: Vec<f64> = (0..200).map(|_| cvae::recon_loglik_mc(&toks, &c, &params, l, true, &mut r).unwrap()).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let (s1, s16, s64) = (spread(1), spread(16), spread(64));
    assert!(s16 < s1);
    assert!(s64 < 0.6 * s16, "L=64 spread {s64} vs L=16 spread {s16}");
}

#[test]
fn training_is_bit_identical() {
    let hp = HyperParams { d_tok: 4, d_agent: 2, d_ctx: 2, d_hid: 6, d_z: 2, epochs: 5, batch_size: 3, ..HyperParams::default() };
    let ex: Vec<cvae::Example> = (0..7u32)
        .map(|i| cvae::Example { tokens: common::toks(&[i, (i + 3) % 9, (i * 5) % 9]), ctx: ContextInput::default() })
        .collect();
    let dims = ModelDims::new(9, 0, 0, &hp);
    let a = cvae::train(&ex, dims, &hp).unwrap();
    let b = cvae::train(&ex, dims, &hp).unwrap();
    let bytes = |p: &ModelParams| p.named().iter().flat_map(|(_, t)| t.data.iter().flat_map(|v| v.to_le_bytes())).collect::<Vec<u8>>();
    assert_eq!(bytes(&a.params), bytes(&b.params));
    assert_eq!(a.loss_trace, b.loss_trace);
}

