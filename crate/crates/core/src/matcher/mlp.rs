use rand::Rng;
use serde::{Deserialize, Serialize};

/// Width of the hidden ReLU layer.
pub const HIDDEN_DIM: usize = 256;
/// Width of the projected (joint) space.
pub const OUTPUT_DIM: usize = 64;

/// Two fully connected layers with a ReLU in between.
///
/// Weights are row-major: `w1[i * hidden + j]` connects input `i` to hidden
/// unit `j`, and `w2[j * output + k]` connects hidden `j` to output `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub norm: f64,
    pub unit: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * output],
            b2: vec![0.0; output],
        }
    }

    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden, output);
        let a1 = 1.0 / (input as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..=a1));
        let a2 = 1.0 / (hidden as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..=a2));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input, self.hidden, self.output)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// The four parameter tensors in a fixed order: w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Raw (unnormalized) output.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (_, _, z2) = self.layers(x);
        z2
    }

    fn layers(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.input);
        let mut z1 = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            for (z, &w) in z1.iter_mut().zip(row) {
                *z += xi * w;
            }
        }
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let mut z2 = self.b2.clone();
        for (j, &aj) in a1.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let row = &self.w2[j * self.output..(j + 1) * self.output];
            for (z, &w) in z2.iter_mut().zip(row) {
                *z += aj * w;
            }
        }
        (z1, a1, z2)
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Activations {
        let (z1, a1, z2) = self.layers(x);
        let norm = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit = z2.iter().map(|v| v / norm).collect();
        Activations { z1, a1, norm, unit }
    }

    /// Accumulates into `grad` the parameter gradient for an upstream gradient
    /// `d_unit` on the normalized output.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        act: &Activations,
        d_unit: &[f64],
        grad: &mut MlpParams,
    ) {
        let dot: f64 = act.unit.iter().zip(d_unit).map(|(u, d)| u * d).sum();
        let dz2: Vec<f64> = act
            .unit
            .iter()
            .zip(d_unit)
            .map(|(u, d)| (d - u * dot) / act.norm)
            .collect();
        for (g, d) in grad.b2.iter_mut().zip(&dz2) {
            *g += d;
        }
        let mut dz1 = vec![0.0; self.hidden];
        #[allow(clippy::needless_range_loop)]
        for j in 0..self.hidden {
            let row = &self.w2[j * self.output..(j + 1) * self.output];
            let grow = &mut grad.w2[j * self.output..(j + 1) * self.output];
            let aj = act.a1[j];
            let mut da = 0.0;
            for k in 0..self.output {
                grow[k] += aj * dz2[k];
                da += row[k] * dz2[k];
            }
            // ReLU subgradient at zero is taken as 0.
            if act.z1[j] > 0.0 {
                dz1[j] = da;
            }
        }
        for (g, d) in grad.b1.iter_mut().zip(&dz1) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let grow = &mut grad.w1[i * self.hidden..(i + 1) * self.hidden];
            for (g, d) in grow.iter_mut().zip(&dz1) {
                *g += xi * d;
            }
        }
    }

    /// `self -= step * grad`.
    pub(crate) fn descend(&mut self, grad: &MlpParams, step: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= step * gv;
            }
        }
    }
}
