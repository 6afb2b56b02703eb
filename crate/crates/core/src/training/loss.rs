//! Similarity matrices, hardest-negative mining and the triplet objective.

use ndarray::Array2;

use crate::error::{Error, Result};

/// `S_ij = g_s,i · g_f,j` for unit-norm rows.
pub fn global_similarity_matrix(g_s: &Array2<f64>, g_f: &Array2<f64>) -> Result<Array2<f64>> {
    if g_s.ncols() != g_f.ncols() {
        return Err(Error::shape(format!("embedding dims differ: {} vs {}", g_s.ncols(), g_f.ncols())));
    }
    Ok(g_s.dot(&g_f.t()))
}

/// `argmax_{j != i} S_ij`, ties to the lowest index.
pub fn mine_hardest_negative(s: &Array2<f64>, i: usize) -> Result<usize> {
    let b = s.ncols();
    if b < 2 {
        return Err(Error::invalid("hardest-negative mining needs at least 2 candidates"));
    }
    if i >= s.nrows() {
        return Err(Error::shape(format!("anchor {i} out of range for {} rows", s.nrows())));
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in s.row(i).iter().enumerate() {
        if j == i {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    Ok(best.expect("b >= 2").0)
}

/// `beta * S + (1 - beta) * tanh(S_OT)`.
pub fn combined_similarity(s_global: f64, s_ot: f64, beta: f64) -> f64 {
    beta * s_global + (1.0 - beta) * s_ot.tanh()
}

/// Mean hinge `max(0, m - sim_pos + sim_neg)`.
pub fn triplet_loss(sim_pos: &[f64], sim_neg: &[f64], margin: f64) -> Result<f64> {
    if sim_pos.len() != sim_neg.len() {
        return Err(Error::shape(format!("{} positives vs {} negatives", sim_pos.len(), sim_neg.len())));
    }
    if sim_pos.is_empty() {
        return Err(Error::invalid("triplet loss over an empty batch"));
    }
    let sum: f64 = sim_pos.iter().zip(sim_neg).map(|(p, n)| (margin + (n - p)).max(0.0)).sum();
    Ok(sum / sim_pos.len() as f64)
}

/// `L_triplet + lambda * L_OT`.
pub fn total_loss(l_triplet: f64, l_ot: f64, lambda_ot: f64) -> f64 {
    l_triplet + lambda_ot * l_ot
}
