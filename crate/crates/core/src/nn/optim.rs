use super::layers::Grads;

/// Adam optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, shapes: &Grads) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.0.iter().map(|g| vec![0.0; g.len()]).collect(),
            v: shapes.0.iter().map(|g| vec![0.0; g.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Grads) {
        assert_eq!(params.len(), grads.0.len(), "parameter/gradient count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1, &Grads(vec![vec![0.0; 2]]));
        for _ in 0..500 {
            let g = Grads(vec![x.iter().map(|v| 2.0 * v).collect()]);
            opt.step(vec![x.as_mut_slice()], &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
