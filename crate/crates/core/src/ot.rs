//! Cosine transport costs and entropic optimal transport via log-domain
//! Sinkhorn iterations.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::tape::{lse, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub eps: f64,
    pub iters: usize,
    /// Stop early once the row-marginal violation drops below this.
    pub tol: Option<f64>,
    /// Over-relaxation factor on the potential updates; 1 is plain Sinkhorn.
    pub relaxation: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            iters: 80,
            tol: None,
            relaxation: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn new(eps: f64, iters: usize) -> Self {
        Self {
            eps,
            iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid(format!("sinkhorn eps must be positive, got {}", self.eps)));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::invalid(format!("relaxation must lie in (0, 2), got {}", self.relaxation)));
        }
        Ok(())
    }
}

/// How gradients reach the cost matrix through the OT terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtGradient {
    /// Backpropagate through every Sinkhorn iteration.
    #[default]
    Unrolled,
    /// Treat the plan as a constant; only `C` carries gradient.
    Envelope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub mu: Array1<f64>,
    pub nu: Array1<f64>,
    pub eps: f64,
    /// Iterations actually run.
    pub iters: usize,
}

impl TransportPlan {
    /// Largest absolute deviation of the row and column sums from the marginals.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.plan.sum_axis(Axis(1));
        let cols = self.plan.sum_axis(Axis(0));
        let r = rows.iter().zip(self.mu.iter()).map(|(a, b)| (a - b).abs());
        let c = cols.iter().zip(self.nu.iter()).map(|(a, b)| (a - b).abs());
        r.chain(c).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for row in self.plan.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(",")).expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `C(i, j) = 1 - cos(a_i, b_j)`; a zero row has cosine 0 with everything.
pub fn cosine_cost(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("cost dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost inputs".into()));
    }
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = cosine_cost_var(&mut t, va, vb);
    Ok(t.value(c).clone())
}

pub fn cosine_cost_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let an = tape.l2_normalize_rows(a);
    let bn = tape.l2_normalize_rows(b);
    let cos = tape.matmul_t(an, bn);
    let neg = tape.scale(cos, -1.0);
    tape.offset(neg, 1.0)
}

pub fn uniform_marginal(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

fn check_marginal(m: &Array1<f64>, n: usize, which: &str) -> Result<()> {
    if m.len() != n {
        return Err(Error::shape(format!("{which} marginal has length {}, expected {n}", m.len())));
    }
    if m.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::invalid(format!("{which} marginal must be strictly positive")));
    }
    let s: f64 = m.sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{which} marginal sums to {s}, expected 1")));
    }
    Ok(())
}

fn row_violation(m: &Array2<f64>, u: &Array1<f64>, w: &Array1<f64>, mu: &Array1<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in m.rows().into_iter().enumerate() {
        let s: f64 = row.iter().zip(w.iter()).map(|(x, wj)| (x + u[i] + wj).exp()).sum();
        worst = worst.max((s - mu[i]).abs());
    }
    worst
}

/// Log-domain Sinkhorn on `K = exp(-C/eps)`.
///
/// Returns the plan after the final column update, so column sums match
/// `nu` to rounding and row sums converge towards `mu`.
pub fn sinkhorn(c: &Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = c.dim();
    if n == 0 || m == 0 {
        return Err(Error::shape("empty cost matrix"));
    }
    check_marginal(mu, n, "row")?;
    check_marginal(nu, m, "column")?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let k = c.mapv(|v| -v / cfg.eps);
    let log_mu = mu.mapv(f64::ln);
    let log_nu = nu.mapv(f64::ln);
    let mut u = Array1::<f64>::zeros(n);
    let mut w = Array1::<f64>::zeros(m);
    let omega = cfg.relaxation;
    let mut done = 0;
    for _ in 0..cfg.iters {
        for i in 0..n {
            let target = log_mu[i] - lse(k.row(i).iter().zip(w.iter()).map(|(x, wj)| x + wj));
            u[i] = (1.0 - omega) * u[i] + omega * target;
        }
        for j in 0..m {
            let target = log_nu[j] - lse(k.column(j).iter().zip(u.iter()).map(|(x, ui)| x + ui));
            w[j] = (1.0 - omega) * w[j] + omega * target;
        }
        done += 1;
        if let Some(tol) = cfg.tol {
            if row_violation(&k, &u, &w, mu) <= tol {
                break;
            }
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| (k[[i, j]] + u[i] + w[j]).exp());
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transport plan".into()));
    }
    Ok(TransportPlan {
        plan,
        mu: mu.clone(),
        nu: nu.clone(),
        eps: cfg.eps,
        iters: done,
    })
}

pub fn sinkhorn_uniform(c: &Array2<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    sinkhorn(c, &uniform_marginal(c.nrows()), &uniform_marginal(c.ncols()), cfg)
}

/// Unrolled log-domain Sinkhorn on the tape with uniform marginals.
/// Mirrors [`sinkhorn`] operation for operation; the tolerance exit is
/// ignored so the graph depth is fixed.
pub fn sinkhorn_var(tape: &mut Tape, cost: Var, cfg: &SinkhornConfig) -> Var {
    let (n, m) = tape.shape(cost);
    let k = tape.scale(cost, -1.0 / cfg.eps);
    let log_mu = tape.constant(Array2::from_elem((n, 1), -(n as f64).ln()));
    let log_nu = tape.constant(Array2::from_elem((1, m), -(m as f64).ln()));
    let mut u = tape.constant(Array2::zeros((n, 1)));
    let mut w = tape.constant(Array2::zeros((1, m)));
    let omega = cfg.relaxation;
    let relax = |tape: &mut Tape, old: Var, target: Var| {
        if omega == 1.0 {
            target
        } else {
            let a = tape.scale(old, 1.0 - omega);
            let b = tape.scale(target, omega);
            tape.add(a, b)
        }
    };
    for _ in 0..cfg.iters {
        let kw = tape.add_row(k, w);
        let l = tape.logsumexp_rows(kw);
        let target = tape.sub(log_mu, l);
        u = relax(tape, u, target);
        let ku = tape.add_col(k, u);
        let l = tape.logsumexp_cols(ku);
        let target = tape.sub(log_nu, l);
        w = relax(tape, w, target);
    }
    let kuw = tape.add_col(k, u);
    let kuw = tape.add_row(kuw, w);
    tape.exp(kuw)
}

/// `<T, C>` on the tape, with the plan either unrolled or frozen.
pub fn ot_loss_var(tape: &mut Tape, cost: Var, cfg: &SinkhornConfig, mode: OtGradient) -> Result<Var> {
    let plan = match mode {
        OtGradient::Unrolled => sinkhorn_var(tape, cost, cfg),
        OtGradient::Envelope => {
            let p = sinkhorn_uniform(tape.value(cost), cfg)?;
            tape.constant(p.plan)
        }
    };
    let prod = tape.mul(plan, cost);
    Ok(tape.sum(prod))
}

/// `S_OT = -<T, C>`.
pub fn ot_similarity(plan: &Array2<f64>, cost: &Array2<f64>) -> Result<f64> {
    Ok(-ot_loss(plan, cost)?)
}

/// `<T, C>`.
pub fn ot_loss(plan: &Array2<f64>, cost: &Array2<f64>) -> Result<f64> {
    if plan.dim() != cost.dim() {
        return Err(Error::shape(format!("plan {:?} vs cost {:?}", plan.dim(), cost.dim())));
    }
    Ok((plan * cost).sum())
}

/// `<T, C> - eps * H(T)` with `H(T) = -sum T log T` (`0 log 0 = 0`).
pub fn entropic_objective(plan: &Array2<f64>, cost: &Array2<f64>, eps: f64) -> f64 {
    let entropy: f64 = -plan.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum::<f64>();
    (plan * cost).sum() - eps * entropy
}
