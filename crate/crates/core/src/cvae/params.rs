use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix. Bias vectors are `rows x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn vector(n: usize) -> Self {
        Self::zeros(n, 1)
    }

    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        Self { rows, cols, data }
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x + bias`
    pub fn matvec_into(&self, x: &[f64], bias: Option<&Tensor>, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = bias.map_or(0.0, |b| b.data[r]);
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
    }

    pub fn matvec(&self, x: &[f64], bias: Option<&Tensor>) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, bias, &mut out);
        out
    }

    /// `out += self^T * g`
    pub fn matvec_t_acc(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
    }

    /// `self += g x^T`
    pub fn outer_acc(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (w, v) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += gr * v;
            }
        }
    }

    pub fn add_vec(&mut self, g: &[f64]) {
        for (d, v) in self.data.iter_mut().zip(g) {
            *d += v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Model and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub d_tok: usize,
    pub d_agent: usize,
    pub d_ctx: usize,
    pub d_hid: usize,
    pub d_z: usize,
    /// Monte-Carlo samples per sequence at scoring time.
    pub mc_samples: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_max: usize,
    pub seed: u64,
    /// Report per-token mean log-likelihood instead of the sequence sum.
    pub length_normalize: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d_tok: 32,
            d_agent: 16,
            d_ctx: 16,
            d_hid: 64,
            d_z: 16,
            mc_samples: 16,
            lr: 1e-3,
            epochs: 30,
            batch_size: 64,
            w_max: 32,
            seed: 42,
            length_normalize: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_tok, self.d_agent, self.d_ctx, self.d_hid, self.d_z];
        if dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples (L) must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.w_max < 2 {
            return Err(Error::Config("batch_size must be >= 1 and w_max >= 2".into()));
        }
        Ok(())
    }
}

/// Sizes that fix every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of grid tokens `V`.
    pub vocab: usize,
    /// Agents seen in training; the agent table has one extra row for unknown agents.
    pub n_agents: usize,
    /// Length of the raw POI context vector (0 when the mode uses no POI context).
    pub poi_dim: usize,
    pub d_tok: usize,
    pub d_agent: usize,
    pub d_ctx: usize,
    pub d_hid: usize,
    pub d_z: usize,
}

impl ModelDims {
    pub fn new(vocab: usize, n_agents: usize, poi_dim: usize, hp: &HyperParams) -> Self {
        Self {
            vocab,
            n_agents,
            poi_dim,
            d_tok: hp.d_tok,
            d_agent: hp.d_agent,
            d_ctx: hp.d_ctx,
            d_hid: hp.d_hid,
            d_z: hp.d_z,
        }
    }

    pub fn context_dim(&self) -> usize {
        self.d_agent + self.d_ctx
    }

    pub fn rnn_input_dim(&self) -> usize {
        self.d_tok + self.context_dim()
    }

    /// Embedding row of the beginning-of-sequence token.
    pub fn bos_row(&self) -> usize {
        self.vocab + 1
    }
}

/// Embedding row of grid token `id`; row 0 is padding.
pub fn token_row(id: u32) -> usize {
    id as usize + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// Input weights, gates stacked as (reset, update, candidate).
    pub w_i: Tensor,
    pub w_h: Tensor,
    pub b_i: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    fn zeros(d_in: usize, d_hid: usize) -> Self {
        Self {
            w_i: Tensor::zeros(3 * d_hid, d_in),
            w_h: Tensor::zeros(3 * d_hid, d_hid),
            b_i: Tensor::vector(3 * d_hid),
            b_h: Tensor::vector(3 * d_hid),
        }
    }

    fn init(d_in: usize, d_hid: usize, rng: &mut impl Rng) -> Self {
        // each gate block gets its own Xavier range
        let mut w_i = Tensor::zeros(3 * d_hid, d_in);
        let mut w_h = Tensor::zeros(3 * d_hid, d_hid);
        for g in 0..3 {
            let bi = Tensor::xavier(d_hid, d_in, rng);
            w_i.data[g * d_hid * d_in..(g + 1) * d_hid * d_in].copy_from_slice(&bi.data);
            let bh = Tensor::xavier(d_hid, d_hid, rng);
            w_h.data[g * d_hid * d_hid..(g + 1) * d_hid * d_hid].copy_from_slice(&bh.data);
        }
        Self { w_i, w_h, b_i: Tensor::vector(3 * d_hid), b_h: Tensor::vector(3 * d_hid) }
    }
}

/// All learnable tensors of the conditional VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `(V + 2) x d_tok`: padding row, one row per grid token, BOS row.
    pub tok_emb: Tensor,
    /// `(n_agents + 1) x d_agent`, row 0 for unknown agents.
    pub agent_emb: Tensor,
    /// `d_ctx x poi_dim`
    pub ctx_proj: Tensor,
    pub enc: GruParams,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
    /// `d_hid x (d_z + d_agent + d_ctx)`
    pub init_w: Tensor,
    pub init_b: Tensor,
    pub dec: GruParams,
    /// `V x d_hid`
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const EMBEDDING_INIT_STD: f64 = 0.1;

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims;
        Self {
            dims,
            tok_emb: Tensor::zeros(d.vocab + 2, d.d_tok),
            agent_emb: Tensor::zeros(d.n_agents + 1, d.d_agent),
            ctx_proj: Tensor::zeros(d.d_ctx, d.poi_dim),
            enc: GruParams::zeros(d.rnn_input_dim(), d.d_hid),
            mu_w: Tensor::zeros(d.d_z, d.d_hid),
            mu_b: Tensor::vector(d.d_z),
            logvar_w: Tensor::zeros(d.d_z, d.d_hid),
            logvar_b: Tensor::vector(d.d_z),
            init_w: Tensor::zeros(d.d_hid, d.d_z + d.context_dim()),
            init_b: Tensor::vector(d.d_hid),
            dec: GruParams::zeros(d.rnn_input_dim(), d.d_hid),
            out_w: Tensor::zeros(d.vocab, d.d_hid),
            out_b: Tensor::vector(d.vocab),
        }
    }

    /// Xavier-uniform matrices, zero biases, `N(0, 0.1^2)` embedding rows.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Self {
        let d = dims;
        Self {
            dims,
            tok_emb: Tensor::normal(d.vocab + 2, d.d_tok, EMBEDDING_INIT_STD, rng),
            agent_emb: Tensor::normal(d.n_agents + 1, d.d_agent, EMBEDDING_INIT_STD, rng),
            ctx_proj: Tensor::xavier(d.d_ctx, d.poi_dim, rng),
            enc: GruParams::init(d.rnn_input_dim(), d.d_hid, rng),
            mu_w: Tensor::xavier(d.d_z, d.d_hid, rng),
            mu_b: Tensor::vector(d.d_z),
            logvar_w: Tensor::xavier(d.d_z, d.d_hid, rng),
            logvar_b: Tensor::vector(d.d_z),
            init_w: Tensor::xavier(d.d_hid, d.d_z + d.context_dim(), rng),
            init_b: Tensor::vector(d.d_hid),
            dec: GruParams::init(d.rnn_input_dim(), d.d_hid, rng),
            out_w: Tensor::xavier(d.vocab, d.d_hid, rng),
            out_b: Tensor::vector(d.vocab),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// Tensors in a fixed order, used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("tok_emb", &self.tok_emb),
            ("agent_emb", &self.agent_emb),
            ("ctx_proj", &self.ctx_proj),
            ("enc_w_i", &self.enc.w_i),
            ("enc_w_h", &self.enc.w_h),
            ("enc_b_i", &self.enc.b_i),
            ("enc_b_h", &self.enc.b_h),
            ("mu_w", &self.mu_w),
            ("mu_b", &self.mu_b),
            ("logvar_w", &self.logvar_w),
            ("logvar_b", &self.logvar_b),
            ("init_w", &self.init_w),
            ("init_b", &self.init_b),
            ("dec_w_i", &self.dec.w_i),
            ("dec_w_h", &self.dec.w_h),
            ("dec_b_i", &self.dec.b_i),
            ("dec_b_h", &self.dec.b_h),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("tok_emb", &mut self.tok_emb),
            ("agent_emb", &mut self.agent_emb),
            ("ctx_proj", &mut self.ctx_proj),
            ("enc_w_i", &mut self.enc.w_i),
            ("enc_w_h", &mut self.enc.w_h),
            ("enc_b_i", &mut self.enc.b_i),
            ("enc_b_h", &mut self.enc.b_h),
            ("mu_w", &mut self.mu_w),
            ("mu_b", &mut self.mu_b),
            ("logvar_w", &mut self.logvar_w),
            ("logvar_b", &mut self.logvar_b),
            ("init_w", &mut self.init_w),
            ("init_b", &mut self.init_b),
            ("dec_w_i", &mut self.dec.w_i),
            ("dec_w_h", &mut self.dec.w_h),
            ("dec_b_i", &mut self.dec.b_i),
            ("dec_b_h", &mut self.dec.b_h),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.named_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_vec(&b.data);
        }
    }
}
