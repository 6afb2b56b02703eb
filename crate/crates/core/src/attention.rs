//! Bidirectional multi-head cross-attention with a post-norm residual/FFN
//! block, and pooled global embeddings.
//!
//! The unprimed bank serves the skull (modality A) query direction: its
//! `W_Q` projects skull tokens and its `W_K`, `W_V` project face tokens.
//! The primed bank serves the reverse direction.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameters for one attention direction plus its refinement block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBank {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
}

impl AttentionBank {
    /// All-zero projections and FFN with identity layer norms.
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ffn_w1: Array2::zeros((d, d_ff)),
            ffn_b1: Array2::zeros((1, d_ff)),
            ffn_w2: Array2::zeros((d_ff, d)),
            ffn_b2: Array2::zeros((1, d)),
            ln1_gamma: Array2::ones((1, d)),
            ln1_beta: Array2::zeros((1, d)),
            ln2_gamma: Array2::ones((1, d)),
            ln2_beta: Array2::zeros((1, d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    /// Tensors in a fixed order, with short names.
    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 12] {
        [
            ("WQ", &self.wq),
            ("WK", &self.wk),
            ("WV", &self.wv),
            ("WO", &self.wo),
            ("W1", &self.ffn_w1),
            ("b1", &self.ffn_b1),
            ("W2", &self.ffn_w2),
            ("b2", &self.ffn_b2),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let d_ff = self.ffn_w1.ncols();
        let expect = [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d_ff),
            (1, d_ff),
            (d_ff, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        for ((name, t), want) in self.tensors().iter().zip(expect) {
            if t.dim() != want {
                return Err(Error::shape(format!("attention tensor {name}: {:?}, expected {want:?}", t.dim())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Unprimed bank: skull queries attend to face keys/values.
    pub skull: AttentionBank,
    /// Primed bank: face queries attend to skull keys/values.
    pub face: AttentionBank,
    pub heads: usize,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.skull.dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("token dim {d} not divisible by {} heads", self.heads)));
        }
        self.skull.validate()?;
        self.face.validate()?;
        if self.face.dim() != d || self.face.ffn_w1.ncols() != self.skull.ffn_w1.ncols() {
            return Err(Error::shape("attention banks disagree on dimensions"));
        }
        Ok(())
    }

    pub fn bank(&self, direction: Direction) -> &AttentionBank {
        match direction {
            Direction::SkullQuery => &self.skull,
            Direction::FaceQuery => &self.face,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SkullQuery,
    FaceQuery,
}

/// Tape handles for one [`AttentionBank`].
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl BankVars {
    pub fn record(tape: &mut Tape, bank: &AttentionBank, trainable: bool) -> Self {
        let mut put = |a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        Self {
            wq: put(&bank.wq),
            wk: put(&bank.wk),
            wv: put(&bank.wv),
            wo: put(&bank.wo),
            ffn_w1: put(&bank.ffn_w1),
            ffn_b1: put(&bank.ffn_b1),
            ffn_w2: put(&bank.ffn_w2),
            ffn_b2: put(&bank.ffn_b2),
            ln1_gamma: put(&bank.ln1_gamma),
            ln1_beta: put(&bank.ln1_beta),
            ln2_gamma: put(&bank.ln2_gamma),
            ln2_beta: put(&bank.ln2_beta),
        }
    }

    pub fn vars(&self) -> [Var; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Per-head attention maps and the projected output `concat_h(A_h V_h) W_O`.
pub fn cross_attention_var(tape: &mut Tape, xq: Var, xkv: Var, bank: &BankVars, heads: usize) -> (Var, Vec<Var>) {
    let d = tape.shape(xq).1;
    let dk = d / heads;
    let q = tape.matmul(xq, bank.wq);
    let k = tape.matmul(xkv, bank.wk);
    let v = tape.matmul(xkv, bank.wv);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut maps = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, a, b);
        let kh = tape.slice_cols(k, a, b);
        let vh = tape.slice_cols(v, a, b);
        let logits = tape.matmul_t(qh, kh);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits);
        outs.push(tape.matmul(attn, vh));
        maps.push(attn);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    (tape.matmul(merged, bank.wo), maps)
}

fn layer_norm_affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
    let g = tape.mul_row(n, gamma);
    tape.add_row(g, beta)
}

/// `Y = LN1(X + attn(X, other))`, `out = LN2(Y + FFN(Y))`.
pub fn enhance_one_var(tape: &mut Tape, x: Var, other: Var, bank: &BankVars, heads: usize) -> Var {
    let (attended, _) = cross_attention_var(tape, x, other, bank, heads);
    let res = tape.add(x, attended);
    let y = layer_norm_affine(tape, res, bank.ln1_gamma, bank.ln1_beta);
    let hidden = tape.matmul(y, bank.ffn_w1);
    let hidden = tape.add_row(hidden, bank.ffn_b1);
    let hidden = tape.relu(hidden);
    let ff = tape.matmul(hidden, bank.ffn_w2);
    let ff = tape.add_row(ff, bank.ffn_b2);
    let res2 = tape.add(y, ff);
    layer_norm_affine(tape, res2, bank.ln2_gamma, bank.ln2_beta)
}

/// `(F_s^enh, F_f^enh)` on the tape.
pub fn enhance_var(tape: &mut Tape, ts: Var, tf: Var, skull: &BankVars, face: &BankVars, heads: usize) -> (Var, Var) {
    let s = enhance_one_var(tape, ts, tf, skull, heads);
    let f = enhance_one_var(tape, tf, ts, face, heads);
    (s, f)
}

fn check_tokens(a: &Array2<f64>, b: &Array2<f64>, params: &AttentionParams) -> Result<()> {
    params.validate()?;
    let d = params.dim();
    if a.ncols() != d || b.ncols() != d {
        return Err(Error::shape(format!(
            "token dims {} / {} do not match attention dim {d}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::shape("empty token sequence"));
    }
    Ok(())
}

/// Attention output and per-head attention maps for one direction.
pub fn multi_head_cross_attention_with_maps(
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    params: &AttentionParams,
    direction: Direction,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    check_tokens(xq, xkv, params)?;
    let mut t = Tape::new();
    let bank = BankVars::record(&mut t, params.bank(direction), false);
    let q = t.constant(xq.clone());
    let kv = t.constant(xkv.clone());
    let (out, maps) = cross_attention_var(&mut t, q, kv, &bank, params.heads);
    Ok((t.value(out).clone(), maps.iter().map(|&m| t.value(m).clone()).collect()))
}

pub fn multi_head_cross_attention(
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    params: &AttentionParams,
    direction: Direction,
) -> Result<Array2<f64>> {
    Ok(multi_head_cross_attention_with_maps(xq, xkv, params, direction)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedTokens {
    pub skull: Array2<f64>,
    pub face: Array2<f64>,
}

pub fn enhance(tokens_s: &Array2<f64>, tokens_f: &Array2<f64>, params: &AttentionParams) -> Result<EnhancedTokens> {
    check_tokens(tokens_s, tokens_f, params)?;
    let mut t = Tape::new();
    let sb = BankVars::record(&mut t, &params.skull, false);
    let fb = BankVars::record(&mut t, &params.face, false);
    let ts = t.constant(tokens_s.clone());
    let tf = t.constant(tokens_f.clone());
    let (s, f) = enhance_var(&mut t, ts, tf, &sb, &fb, params.heads);
    Ok(EnhancedTokens {
        skull: t.value(s).clone(),
        face: t.value(f).clone(),
    })
}

/// Mean-pooled, L2-normalised embedding. `degenerate` is set when the
/// pooled mean is zero and the embedding is returned as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub g: Array1<f64>,
    pub degenerate: bool,
}

pub fn global_embed(tokens: &Array2<f64>) -> Result<GlobalEmbedding> {
    if tokens.nrows() == 0 {
        return Err(Error::invalid("global embedding of an empty token sequence"));
    }
    let mut t = Tape::new();
    let x = t.constant(tokens.clone());
    let g = global_embed_var(&mut t, x);
    let g = t.value(g).row(0).to_owned();
    let degenerate = g.iter().all(|&v| v == 0.0);
    if degenerate {
        log::warn!("global embedding: pooled mean is zero");
    }
    Ok(GlobalEmbedding { g, degenerate })
}

/// `Norm(mean_i tokens_i)` as a `1 × d` row.
pub fn global_embed_var(tape: &mut Tape, tokens: Var) -> Var {
    let m = tape.mean_rows(tokens);
    tape.l2_normalize_rows(m)
}
