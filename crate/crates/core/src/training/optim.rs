use ndarray::Array2;

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter / gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut **p).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut w = array![[1.0, -2.0]];
        opt.update(&mut [&mut w], &[array![[3.0, -0.5]]]);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-8);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-8);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(0.1, 0.5);
        let mut w = array![[2.0]];
        opt.update(&mut [&mut w], &[array![[0.0]]]);
        assert!((w[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0);
        let mut w = array![[3.0, -4.0]];
        for _ in 0..500 {
            let g = &w * 2.0;
            opt.update(&mut [&mut w], &[g]);
        }
        assert!(w.iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps(), 500);
    }
}
