//! Parameters, layers and the optimizer shared by the VAE and the denoiser.

use diffcore::{DiffError, Tape, Tensor, Var};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace values from `(name, tensor)` pairs; every parameter must be
    /// present with its current shape.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<(), Error> {
        if named.len() != self.names.len() {
            return Err(Error::Schema(format!(
                "params: expected {} tensors, found {}",
                self.names.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Schema(format!("params.{name}: unknown parameter")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Schema(format!(
                    "params.{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    /// Put every parameter on `tape`. Trainable parameters become leaves,
    /// otherwise constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform Glorot initialization for a `[fan_in, fan_out]` weight.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("weight shape")
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, DiffError> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }

    /// Plain evaluation for one row vector.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.w).data();
        let mut y = store.get(self.b).data().to_vec();
        for (i, xi) in x.iter().enumerate() {
            let row = &w[i * self.fan_out..(i + 1) * self.fan_out];
            for (yj, wj) in y.iter_mut().zip(row) {
                *yj += xi * wj;
            }
        }
        y
    }
}

/// Multilayer perceptron with SiLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the layer widths from input to output.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var, DiffError> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, p, x)?;
            if i + 1 < n {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }
}

/// Adam state, serializable for resumable training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Cosine decay to `lr * min_lr_ratio` over `total_steps`.
    pub total_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            total_steps: 1000,
            min_lr_ratio: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let c = &self.config;
        let frac = (self.step as f64 / c.total_steps.max(1) as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cos)
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> f64 {
        let norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
        let c = self.config.clone();
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.learning_rate();
        self.step += 1;
        let b1c = 1.0 - c.beta1.powi(self.step as i32);
        let b2c = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.tensors_mut()[i].data_mut();
            for k in 0..g.numel() {
                let gk = g.data()[k] * scale;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                p[k] -= lr * (m[k] / b1c) / ((v[k] / b2c).sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3.0, -2.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            total_steps: 500,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let sq = tape.square(p.var(id)).unwrap();
            let loss = tape.sum(sq).unwrap();
            let g = tape.backward(loss, &p.vars).unwrap();
            opt.update(&mut store, &g);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let store = ParamStore::new();
        let mut opt = Adam::new(
            AdamConfig {
                total_steps: 10,
                ..Default::default()
            },
            &store,
        );
        assert_eq!(opt.learning_rate(), 1e-3);
        opt.step = 5;
        assert!((opt.learning_rate() - 5e-4).abs() < 1e-15);
        opt.step = 10;
        assert!(opt.learning_rate().abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0]));
        let mut opt = Adam::new(
            AdamConfig {
                clip_norm: 1.0,
                ..Default::default()
            },
            &store,
        );
        let norm = opt.update(&mut store, &[Tensor::vector(vec![1e6])]);
        assert_eq!(norm, 1e6);
        assert!((store.get(id).data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn linear_apply_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 4, 3, &mut rng);
        store.get_mut(l.b).data_mut()[1] = 0.5;
        let x = vec![0.1, -0.2, 0.3, 0.7];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(Tensor::new(vec![1, 4], x.clone()).unwrap());
        let y = l.forward(&mut tape, &p, xv).unwrap();
        let plain = l.apply(&store, &x);
        for (a, b) in tape.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
