//! Building blocks shared by both towers: linear maps, layer norm,
//! multi-head attention, and the post-norm transformer encoder layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

use super::Result;

pub(crate) const LN_EPS: f32 = 1e-5;

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::param(xavier(rng, in_dim, out_dim), vec![in_dim, out_dim])
                .expect("finite init"),
            bias: Tensor::param(vec![0.0; out_dim], vec![out_dim]).expect("finite init"),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w"), &self.weight),
            (format!("{prefix}.b"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w"), &mut self.weight),
            (format!("{prefix}.b"), &mut self.bias),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::param(vec![1.0; dim], vec![dim]).expect("finite init"),
            bias: Tensor::param(vec![0.0; dim], vec![dim]).expect("finite init"),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gain);
        let b = tape.leaf(&self.bias);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.g"), &self.gain),
            (format!("{prefix}.b"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.g"), &mut self.gain),
            (format!("{prefix}.b"), &mut self.bias),
        ]
    }
}

/// Two fully connected layers with one ReLU between them. Used for the
/// feed-forward sublayer and for the projection heads.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            l1: Linear::init(in_dim, hidden, rng),
            l2: Linear::init(hidden, out_dim, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.l1.apply(tape, x)?;
        let h = tape.relu(h)?;
        self.l2.apply(tape, h)
    }

    /// Project a single vector: z = W2·relu(W1·r + b1) + b2.
    pub fn project(&self, r: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.leaf(r);
        let row = tape.reshape(v, vec![1, r.numel()])?;
        let y = self.apply(&mut tape, row)?;
        let d = tape.shape(y)[1];
        let flat = tape.reshape(y, vec![d])?;
        Ok(tape.extract(flat))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.l1.params(&format!("{prefix}.l1"));
        v.extend(self.l2.params(&format!("{prefix}.l2")));
        v
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.l1.params_mut(&format!("{prefix}.l1"));
        v.extend(self.l2.params_mut(&format!("{prefix}.l2")));
        v
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        debug_assert_eq!(dim % heads, 0);
        MultiHeadAttention {
            wq: Linear::init(dim, dim, rng),
            wk: Linear::init(dim, dim, rng),
            wv: Linear::init(dim, dim, rng),
            wo: Linear::init(dim, dim, rng),
            heads,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let dim = tape.shape(x)[1];
        let hd = dim / self.heads;
        let q = self.wq.apply(tape, x)?;
        let k = self.wk.apply(tape, x)?;
        let v = self.wv.apply(tape, x)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        let scale = 1.0 / (hd as f32).sqrt();
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_tb(qh, kh)?;
            let scaled = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scaled, 1.0)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        self.wo.apply(tape, merged)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.wq.params(&format!("{prefix}.wq"));
        v.extend(self.wk.params(&format!("{prefix}.wk")));
        v.extend(self.wv.params(&format!("{prefix}.wv")));
        v.extend(self.wo.params(&format!("{prefix}.wo")));
        v
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.wq.params_mut(&format!("{prefix}.wq"));
        v.extend(self.wk.params_mut(&format!("{prefix}.wk")));
        v.extend(self.wv.params_mut(&format!("{prefix}.wv")));
        v.extend(self.wo.params_mut(&format!("{prefix}.wo")));
        v
    }
}

/// Post-norm transformer encoder layer:
/// s' = LayerNorm(s + MHA(s)); out = LayerNorm(s' + FFN(s')).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub mha: MultiHeadAttention,
    pub ln1: LayerNormParams,
    pub ffn: Mlp,
    pub ln2: LayerNormParams,
}

impl EncoderLayer {
    pub fn init(dim: usize, heads: usize, ffn_mult: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            mha: MultiHeadAttention::init(dim, heads, rng),
            ln1: LayerNormParams::init(dim),
            ffn: Mlp::init(dim, dim * ffn_mult, dim, rng),
            ln2: LayerNormParams::init(dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let attn = self.mha.apply(tape, x)?;
        let res1 = tape.add(x, attn)?;
        let s1 = self.ln1.apply(tape, res1)?;
        let ff = self.ffn.apply(tape, s1)?;
        let res2 = tape.add(s1, ff)?;
        self.ln2.apply(tape, res2)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.mha.params(&format!("{prefix}.mha"));
        v.extend(self.ln1.params(&format!("{prefix}.ln1")));
        v.extend(self.ffn.params(&format!("{prefix}.ffn")));
        v.extend(self.ln2.params(&format!("{prefix}.ln2")));
        v
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.mha.params_mut(&format!("{prefix}.mha"));
        v.extend(self.ln1.params_mut(&format!("{prefix}.ln1")));
        v.extend(self.ffn.params_mut(&format!("{prefix}.ffn")));
        v.extend(self.ln2.params_mut(&format!("{prefix}.ln2")));
        v
    }
}

/// Draw from N(0, std) into a fresh parameter tensor.
pub(crate) fn normal_param(
    shape: Vec<usize>,
    std: f32,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f32, std).expect("valid std");
    let numel = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::param(data, shape).expect("finite init")
}
