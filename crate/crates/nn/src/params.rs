//! Named parameter storage and the Adam optimizer.

use crate::mat::Mat;
use crate::tape::{Grads, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Every store carries a process-unique id so one tape can bind parameters
/// from several models without their [`ParamId`]s colliding.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self { uid: next_uid(), names: Vec::new(), tensors: Vec::new() }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { uid: next_uid(), names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Xavier/Glorot uniform initialization.
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        // Box-Muller keeps this free of a distributions dependency.
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::filled(rows, cols, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_sq).sum()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Mat>) -> Result<(), String> {
        if tensors.len() != self.tensors.len() {
            return Err(format!("expected {} tensors, found {}", self.tensors.len(), tensors.len()));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(format!(
                    "tensor {} ({}) has shape {:?}, expected {:?}",
                    i,
                    self.names[i],
                    new.shape(),
                    old.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    store_uid: u64,
    grads: Vec<Mat>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { store_uid: store.uid, grads: store.tensors.iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect() }
    }

    /// Adds the gradients of every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Grads) {
        for (uid, id, var) in tape.bound_params() {
            if uid != self.store_uid {
                continue;
            }
            if let Some(g) = grads.get(var) {
                self.grads[id.0].add_assign(g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.grads[id.0]
    }

    /// Adds `coeff * θ` for every parameter, the gradient of `coeff / 2 * ‖θ‖²`.
    pub fn add_scaled_params(&mut self, store: &ParamStore, coeff: f64) {
        assert_eq!(store.uid, self.store_uid, "gradient buffer belongs to another store");
        for (g, t) in self.grads.iter_mut().zip(&store.tensors) {
            for (gk, tk) in g.data_mut().iter_mut().zip(t.data()) {
                *gk += coeff * tk;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.scale_assign(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Mat::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.tensors.iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        if lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, param) in store.tensors.iter_mut().enumerate() {
            let g = &grads.grads[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, p) in param.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
