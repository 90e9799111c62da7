use rand::Rng;

/// Fully connected network with ReLU hidden layers and a linear output.
/// Parameters live in one flat vector: per layer, the row-major `out × in`
/// weight block followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer activations from a forward pass; `acts[0]` is the input and the
/// last entry the output.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == param_count(sizes)).then(|| Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).acts.pop().unwrap()
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.sizes[0], "mlp input size");
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + out * inp];
            let b = &self.params[off + out * inp..off + out * inp + out];
            off += out * inp + out;
            let x = &acts[l];
            let y: Vec<f64> = (0..out)
                .map(|o| {
                    let z = b[o] + w[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    if l + 1 < layers {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(y);
        }
        Trace { acts }
    }

    /// Backpropagates `dout` (gradient w.r.t. the output). Parameter
    /// gradients are added into `grad` when given; returns the input gradient.
    pub fn backward(&self, trace: &Trace, dout: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[1] * w[0] + w[1];
        }
        let mut d = dout.to_vec();
        for l in (0..layers).rev() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let x = &trace.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                for o in 0..out {
                    if d[o] != 0.0 {
                        for (gw, xi) in g[off + o * inp..off + (o + 1) * inp].iter_mut().zip(x) {
                            *gw += d[o] * xi;
                        }
                    }
                    g[off + out * inp + o] += d[o];
                }
            }
            let w = &self.params[off..off + out * inp];
            let mut dx = vec![0.0; inp];
            for o in 0..out {
                if d[o] != 0.0 {
                    for (dxi, wi) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *dxi += d[o] * wi;
                    }
                }
            }
            if l > 0 {
                for (dxi, xi) in dx.iter_mut().zip(x) {
                    if *xi <= 0.0 {
                        *dxi = 0.0;
                    }
                }
            }
            d = dx;
        }
        d
    }

    /// `self ← τ·online + (1−τ)·self`
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        assert_eq!(self.sizes, online.sizes, "soft update between different shapes");
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_forward() {
        // 2 -> 2 (relu) -> 1
        let params = vec![
            1.0, -1.0, 0.5, 0.5, // w1
            0.0, -1.0, // b1
            2.0, 3.0,  // w2
            0.25, // b2
        ];
        let net = Mlp::from_params(&[2, 2, 1], params).unwrap();
        // h = relu([1 - 2, 0.5 + 1 - 1]) = [0, 0.5]; y = 1.5 + 0.25
        assert_eq!(net.forward(&[1.0, 2.0]), vec![1.75]);
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[16, 8, 2], &mut rng);
        assert_eq!(net.params().len(), 16 * 8 + 8 + 8 * 2 + 2);
        assert!(net.params()[..136].iter().all(|v| v.abs() <= 0.25));
        assert!(net.params()[136..].iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn soft_update_blend() {
        let mut t = Mlp::from_params(&[1, 1], vec![1.0, 2.0]).unwrap();
        let o = Mlp::from_params(&[1, 1], vec![3.0, -2.0]).unwrap();
        let keep = t.clone();
        t.soft_update_from(&o, 0.0);
        assert_eq!(t, keep);
        t.soft_update_from(&o, 0.01);
        assert!((t.params()[0] - 1.02).abs() < 1e-15);
        assert!((t.params()[1] - 1.96).abs() < 1e-15);
        t.soft_update_from(&o, 1.0);
        assert_eq!(t.params(), o.params());
    }
}
