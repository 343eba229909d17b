/// Adam without weight decay (β1 = 0.9, β2 = 0.999, ε = 1e-8), with bias
/// correction. One moment pair per parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(block_sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. A zero gradient leaves the parameter
    /// unchanged only while its moments are zero too; with `lr == 0` nothing
    /// moves at all.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "block count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient block count mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (b, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[b], &mut self.v[b], &grads[b]);
            assert_eq!(p.len(), g.len(), "gradient length mismatch");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                if lr == 0.0 {
                    continue;
                }
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate of epoch `e` (0-based): `lr0 · γ^e`.
pub fn learning_rate(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}
