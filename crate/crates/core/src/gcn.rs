//! Graph convolution over landmark graphs and token construction.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::pooled_projection;
use crate::tape::{Tape, Var};

const GLOBAL_PROJECTION_SEED: u64 = 0x5eed_0002;

/// `D^-1/2 (A_sym + I) D^-1/2` where `A_sym` has an entry wherever either
/// direction of an edge is present.
pub fn normalize_adjacency(edges: &[(usize, usize)], n: usize) -> Result<Array2<f64>> {
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::shape(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let inv_sqrt: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    for ((i, j), v) in a.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `W^(0) .. W^(L-1)`; consecutive shapes must chain.
    pub weights: Vec<Array2<f64>>,
    /// Apply ReLU after the last layer as well.
    pub final_relu: bool,
}

impl GcnParams {
    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.nrows())
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::invalid("GCN needs at least one layer"));
        }
        for pair in self.weights.windows(2) {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::shape(format!(
                    "GCN layers do not chain: {:?} then {:?}",
                    pair[0].dim(),
                    pair[1].dim()
                )));
            }
        }
        Ok(())
    }
}

/// `H^(l+1) = relu(Â H^(l) W^(l))` on the tape.
pub fn gcn_forward_var(tape: &mut Tape, x: Var, adj: Var, weights: &[Var], final_relu: bool) -> Var {
    let mut h = x;
    for (l, &w) in weights.iter().enumerate() {
        let (rows, cols) = (tape.shape(h).0, tape.shape(w).1);
        // apply Â on whichever side keeps the intermediate smaller
        let pre = if tape.shape(h).1 > cols {
            let hw = tape.matmul(h, w);
            tape.matmul(adj, hw)
        } else {
            let ah = tape.matmul(adj, h);
            tape.matmul(ah, w)
        };
        debug_assert_eq!(tape.shape(pre), (rows, cols));
        h = if l + 1 < weights.len() || final_relu {
            tape.relu(pre)
        } else {
            pre
        };
    }
    h
}

pub fn gcn_forward(x: &Array2<f64>, adj: &Array2<f64>, params: &GcnParams) -> Result<Array2<f64>> {
    params.validate()?;
    let n = x.nrows();
    if adj.dim() != (n, n) {
        return Err(Error::shape(format!("adjacency {:?} for {n} nodes", adj.dim())));
    }
    if x.ncols() != params.in_dim() {
        return Err(Error::shape(format!("node features have {} columns, W0 expects {}", x.ncols(), params.in_dim())));
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let av = t.constant(adj.clone());
    let ws: Vec<Var> = params.weights.iter().map(|w| t.constant(w.clone())).collect();
    let h = gcn_forward_var(&mut t, xv, av, &ws, params.final_relu);
    Ok(t.value(h).clone())
}

/// `z = (1/N) Σ_i H_i`.
pub fn global_mean_pool(h: &Array2<f64>) -> Result<Array1<f64>> {
    if h.nrows() == 0 {
        return Err(Error::invalid("mean pooling over zero nodes"));
    }
    Ok(h.mean_axis(Axis(0)).expect("non-empty"))
}

pub enum GlobalSource<'a> {
    Precomputed(&'a [f64]),
    Image(&'a Array2<f64>),
}

/// Global image descriptor of length `d_g`. Precomputed vectors pass
/// through; images are area-pooled to 8×8, projected with a fixed seeded
/// matrix and L2-normalised.
pub fn toy_global_feature(source: Option<GlobalSource<'_>>, d_g: usize) -> Result<Array1<f64>> {
    match source {
        Some(GlobalSource::Precomputed(v)) => {
            if v.len() != d_g {
                return Err(Error::shape(format!("global feature has length {}, expected {d_g}", v.len())));
            }
            Ok(Array1::from(v.to_vec()))
        }
        Some(GlobalSource::Image(img)) => {
            if img.is_empty() {
                return Err(Error::invalid("empty image"));
            }
            Ok(pooled_projection(img, d_g, GLOBAL_PROJECTION_SEED))
        }
        None => Err(Error::invalid("no global feature: neither an image nor a precomputed vector")),
    }
}

/// One token per landmark: `[H_i ‖ f_global]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub d_embed: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// `[z ‖ f_global]`, the pooled graph embedding with the global feature.
    pub fn pooled_fused(&self) -> Array1<f64> {
        self.tokens.mean_axis(Axis(0)).expect("non-empty tokens")
    }

    pub fn global_part(&self) -> Array1<f64> {
        self.tokens.slice(s![0, self.d_embed..]).to_owned()
    }
}

pub fn build_tokens(h: &Array2<f64>, f_global: &Array1<f64>) -> TokenSequence {
    let n = h.nrows();
    let d_embed = h.ncols();
    let mut tokens = Array2::zeros((n, d_embed + f_global.len()));
    tokens.slice_mut(s![.., ..d_embed]).assign(h);
    tokens.slice_mut(s![.., d_embed..]).assign(&f_global.broadcast((n, f_global.len())).unwrap());
    TokenSequence { tokens, d_embed }
}

/// Token construction on the tape; `f_global` is a `1 × d_g` row.
pub fn build_tokens_var(tape: &mut Tape, h: Var, f_global: Var) -> Var {
    let n = tape.shape(h).0;
    let rep = tape.repeat_rows(f_global, n);
    tape.concat_cols(&[h, rep])
}
