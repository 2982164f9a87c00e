//! Single-layer GRU cell with an explicit backward pass.
//!
//! ```text
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! u  = sigmoid(W_iu x + b_iu + W_hu h + b_hu)
//! n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - u) * n + u * h
//! ```

use super::params::GruParams;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Values saved by a forward step for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn h + b_hn`
    pub hn: Vec<f64>,
    pub h: Vec<f64>,
}

/// Scratch buffers reused across steps.
pub struct GruScratch {
    gi: Vec<f64>,
    gh: Vec<f64>,
}

impl GruScratch {
    pub fn new(d_hid: usize) -> Self {
        Self { gi: vec![0.0; 3 * d_hid], gh: vec![0.0; 3 * d_hid] }
    }
}

pub fn step(p: &GruParams, x: &[f64], h_prev: &[f64], scratch: &mut GruScratch) -> GruStep {
    let d = h_prev.len();
    p.w_i.matvec_into(x, Some(&p.b_i), &mut scratch.gi);
    p.w_h.matvec_into(h_prev, Some(&p.b_h), &mut scratch.gh);
    let (gi, gh) = (&scratch.gi, &scratch.gh);
    let mut r = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut n = vec![0.0; d];
    let mut h = vec![0.0; d];
    for k in 0..d {
        r[k] = sigmoid(gi[k] + gh[k]);
        u[k] = sigmoid(gi[d + k] + gh[d + k]);
        n[k] = (gi[2 * d + k] + r[k] * gh[2 * d + k]).tanh();
        h[k] = (1.0 - u[k]) * n[k] + u[k] * h_prev[k];
    }
    GruStep { x: x.to_vec(), h_prev: h_prev.to_vec(), r, u, n, hn: gh[2 * d..].to_vec(), h }
}

/// Hidden-state-only forward step, for scoring.
pub fn step_inplace(p: &GruParams, x: &[f64], h: &mut [f64], scratch: &mut GruScratch) {
    let d = h.len();
    p.w_i.matvec_into(x, Some(&p.b_i), &mut scratch.gi);
    p.w_h.matvec_into(h, Some(&p.b_h), &mut scratch.gh);
    let (gi, gh) = (&scratch.gi, &scratch.gh);
    for k in 0..d {
        let r = sigmoid(gi[k] + gh[k]);
        let u = sigmoid(gi[d + k] + gh[d + k]);
        let n = (gi[2 * d + k] + r * gh[2 * d + k]).tanh();
        h[k] = (1.0 - u) * n + u * h[k];
    }
}

/// Backpropagates `dh` (gradient w.r.t. the step output) through one step.
/// Parameter gradients are accumulated into `grad`; gradients w.r.t. the input
/// are added to `dx` and those w.r.t. the previous hidden state are returned.
pub fn step_backward(p: &GruParams, s: &GruStep, dh: &[f64], grad: &mut GruParams, dx: &mut [f64]) -> Vec<f64> {
    let d = dh.len();
    let mut dgi = vec![0.0; 3 * d];
    let mut dgh = vec![0.0; 3 * d];
    let mut dh_prev = vec![0.0; d];
    for k in 0..d {
        let (r, u, n) = (s.r[k], s.u[k], s.n[k]);
        let dn = dh[k] * (1.0 - u);
        let du = dh[k] * (s.h_prev[k] - n);
        dh_prev[k] = dh[k] * u;
        let dan = dn * (1.0 - n * n);
        let dr = dan * s.hn[k];
        let dar = dr * r * (1.0 - r);
        let dau = du * u * (1.0 - u);
        dgi[k] = dar;
        dgi[d + k] = dau;
        dgi[2 * d + k] = dan;
        dgh[k] = dar;
        dgh[d + k] = dau;
        dgh[2 * d + k] = dan * r;
    }
    grad.w_i.outer_acc(&dgi, &s.x);
    grad.b_i.add_vec(&dgi);
    grad.w_h.outer_acc(&dgh, &s.h_prev);
    grad.b_h.add_vec(&dgh);
    p.w_i.matvec_t_acc(&dgi, dx);
    p.w_h.matvec_t_acc(&dgh, &mut dh_prev);
    dh_prev
}
