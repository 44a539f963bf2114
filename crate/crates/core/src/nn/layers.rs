use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::uniform;
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::params::{ParamId, ParamSet};

/// Activation used inside feed-forward stacks and the decoder.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Snake,
}

impl Activation {
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Snake => tape.snake(x),
        }
    }
}

fn xavier<F: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = uniform(rng, -bound, bound);
    }
    t
}

pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.alloc(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let b = ps.alloc(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Output layer variant starting at zero (uniform initial softmax,
    /// stable early training).
    pub fn new_zeroed<F: Scalar>(
        ps: &mut ParamSet<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.alloc(format!("{name}.w"), Tensor::zeros(in_dim, out_dim));
        let b = ps.alloc(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, vars[self.w.index()]);
        tape.add_row_broadcast(y, vars[self.b.index()])
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, name: &str, dim: usize) -> Self {
        let gamma = ps.alloc(format!("{name}.gamma"), Tensor::filled(1, dim, F::one()));
        let beta = ps.alloc(format!("{name}.beta"), Tensor::zeros(1, dim));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], x: Var) -> Var {
        tape.layernorm_rows(x, vars[self.gamma.index()], vars[self.beta.index()], fl(self.eps))
    }
}

pub struct Embedding {
    table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = ps.alloc(name.to_string(), xavier(rng, vocab, dim));
        Embedding { table, vocab, dim }
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], ids: &[usize]) -> Var {
        tape.gather_rows(vars[self.table.index()], ids)
    }
}

/// Two-layer per-row MLP; the pause and duration predictors share this shape.
pub struct RowMlp {
    l1: Linear,
    l2: Linear,
    act: Activation,
}

impl RowMlp {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        zero_out: bool,
    ) -> Self {
        let l1 = Linear::new(ps, rng, &format!("{name}.l1"), in_dim, hidden);
        let l2 = if zero_out {
            Linear::new_zeroed(ps, &format!("{name}.l2"), hidden, out_dim)
        } else {
            Linear::new(ps, rng, &format!("{name}.l2"), hidden, out_dim)
        };
        RowMlp {
            l1,
            l2,
            act: Activation::Tanh,
        }
    }

    pub fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], x: Var) -> Var {
        let h = self.l1.fwd(tape, vars, x);
        let h = self.act.apply(tape, h);
        self.l2.fwd(tape, vars, h)
    }
}

struct MultiHeadSelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadSelfAttention {
    fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention dim divisible by heads");
        MultiHeadSelfAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], x: Var) -> Var {
        let q = self.wq.fwd(tape, vars, x);
        let k = self.wk.fwd(tape, vars, x);
        let v = self.wv.fwd(tape, vars, x);
        let dh = self.dim / self.heads;
        let scale: F = fl(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.row_softmax(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        self.wo.fwd(tape, vars, merged)
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadSelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    act: Activation,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
        }
    }
}

/// Pre-norm transformer encoder stack over a row sequence.
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    pub cfg: EncoderConfig,
}

impl TransformerEncoder {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        cfg: EncoderConfig,
    ) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer {
                ln1: LayerNorm::new(ps, &format!("{name}.{i}.ln1"), cfg.dim),
                attn: MultiHeadSelfAttention::new(
                    ps,
                    rng,
                    &format!("{name}.{i}.attn"),
                    cfg.dim,
                    cfg.heads,
                ),
                ln2: LayerNorm::new(ps, &format!("{name}.{i}.ln2"), cfg.dim),
                ff1: Linear::new(ps, rng, &format!("{name}.{i}.ff1"), cfg.dim, cfg.ffn),
                ff2: Linear::new(ps, rng, &format!("{name}.{i}.ff2"), cfg.ffn, cfg.dim),
                act: Activation::Gelu,
            })
            .collect();
        let ln_out = LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.dim);
        TransformerEncoder {
            layers,
            ln_out,
            cfg,
        }
    }

    pub fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], mut x: Var) -> Var {
        for layer in &self.layers {
            let normed = layer.ln1.fwd(tape, vars, x);
            let attended = layer.attn.fwd(tape, vars, normed);
            x = tape.add(x, attended);
            let normed = layer.ln2.fwd(tape, vars, x);
            let h = layer.ff1.fwd(tape, vars, normed);
            let h = layer.act.apply(tape, h);
            let h = layer.ff2.fwd(tape, vars, h);
            x = tape.add(x, h);
        }
        self.ln_out.fwd(tape, vars, x)
    }
}

/// 1-D convolution over the time axis; weights are Cout×(k·Cin).
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.alloc(format!("{name}.w"), xavier(rng, c_out, k * c_in));
        let b = ps.alloc(format!("{name}.b"), Tensor::zeros(1, c_out));
        Conv1d {
            w,
            b,
            k,
            stride,
            pad,
        }
    }

    pub fn fwd<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var], x: Var) -> Var {
        tape.conv1d(
            x,
            vars[self.w.index()],
            vars[self.b.index()],
            self.k,
            self.stride,
            self.pad,
        )
    }
}

/// Fixed sinusoidal position table (rows = positions).
pub fn sinusoidal_positions<F: Scalar>(len: usize, dim: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 * rate;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(p, i, fl(v));
        }
    }
    t
}

/// Sinusoidal embedding of a scalar flow-matching step t ∈ [0,1].
pub fn sinusoidal_time_embedding<F: Scalar>(t: F, dim: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(1, dim);
    let tf = t.to_f64().unwrap_or(0.0);
    for i in 0..dim {
        let rate = 1000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = tf * rate;
        let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        out.set(0, i, fl(v));
    }
    out
}
