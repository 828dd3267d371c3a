//! Small layer primitives shared by the AMDB branches and the experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spconv::{sparse_conv_with_workers, FmaCount, KernelSpec};
use crate::voxel::SparseVoxelTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                *x = x.max(0.0);
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Normalized exponentials, shifted by the max logit for stability.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Affine map `y = x W + b`, weights `[in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(
        in_features: usize,
        out_features: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let l = Linear {
            in_features,
            out_features,
            weights,
            bias,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weights: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_features * self.out_features
            || self.bias.len() != self.out_features
        {
            return Err(Error::Shape(format!(
                "linear {}x{} has {} weights and {} biases",
                self.in_features,
                self.out_features,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate().take(self.in_features) {
            let row = &self.weights[i * self.out_features..(i + 1) * self.out_features];
            for (acc, &w) in y.iter_mut().zip(row) {
                *acc += xi * w;
            }
        }
        y
    }

    pub fn weight_mut(&mut self, input: usize, output: usize) -> &mut f64 {
        &mut self.weights[input * self.out_features + output]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLayer {
    pub kernel: KernelSpec,
    #[serde(default)]
    pub activation: Activation,
}

/// Submanifold convolutions applied in sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseStack {
    pub layers: Vec<SparseLayer>,
}

impl SparseStack {
    pub fn new(layers: Vec<SparseLayer>) -> Result<Self> {
        let s = SparseStack { layers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].kernel.out_channels() != w[1].kernel.in_channels() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} channels but layer {} expects {}",
                    w[0].kernel.out_channels(),
                    i + 1,
                    w[1].kernel.in_channels()
                )));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.kernel.in_channels())
    }

    /// Output channel count given the input channel count.
    pub fn out_channels(&self, input: usize) -> usize {
        self.layers
            .last()
            .map_or(input, |l| l.kernel.out_channels())
    }

    /// Run every layer; returns the features and the summed multiply-add
    /// counts of the sparse convolutions.
    pub fn forward(
        &self,
        input: &SparseVoxelTensor,
        workers: usize,
    ) -> Result<(SparseVoxelTensor, FmaCount)> {
        self.validate()?;
        let mut x = input.clone();
        let mut fmas = FmaCount {
            sparse_fmas: 0,
            dense_fmas: 0,
            rulebook_pairs: 0,
        };
        for layer in &self.layers {
            let rb = crate::spconv::build_rulebook_with_workers(&x, &layer.kernel, workers)?;
            let c = crate::spconv::fma_count_from_rulebook(&x, &layer.kernel, &rb);
            fmas.sparse_fmas += c.sparse_fmas;
            fmas.dense_fmas += c.dense_fmas;
            fmas.rulebook_pairs += c.rulebook_pairs;
            let y = crate::spconv::apply_rulebook(&x, &layer.kernel, &rb, workers)?;
            x = activate(y, layer.activation)?;
        }
        Ok((x, fmas))
    }

    /// Convenience forward without op counting.
    pub fn apply(&self, input: &SparseVoxelTensor, workers: usize) -> Result<SparseVoxelTensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = activate(
                sparse_conv_with_workers(&x, &layer.kernel, workers)?,
                layer.activation,
            )?;
        }
        Ok(x)
    }
}

fn activate(t: SparseVoxelTensor, act: Activation) -> Result<SparseVoxelTensor> {
    if act == Activation::Identity {
        return Ok(t);
    }
    let c = t.channels();
    let mut feats = t.feats().to_vec();
    act.apply(&mut feats);
    t.with_features(feats, c)
}

/// Dense 2D convolution layer over an `H x W x C` map (channel fastest).
/// Weights are `[tap][c_in][c_out]` with taps row-major over the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    pub kernel: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: Option<Vec<f64>>,
    #[serde(default)]
    pub activation: Activation,
}

impl Conv2dLayer {
    pub fn new(
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        let l = Conv2dLayer {
            kernel,
            in_channels,
            out_channels,
            weights,
            bias,
            activation,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn zeros(kernel: [usize; 2], in_channels: usize, out_channels: usize) -> Self {
        Conv2dLayer {
            kernel,
            in_channels,
            out_channels,
            weights: vec![0.0; kernel[0] * kernel[1] * in_channels * out_channels],
            bias: None,
            activation: Activation::Identity,
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut l = Self::zeros([1, 1], channels, channels);
        for c in 0..channels {
            l.weights[c * channels + c] = 1.0;
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::UnsupportedKernel(format!(
                "2D kernel {:?} must be odd",
                self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape(
                "2D layer channel counts must be positive".into(),
            ));
        }
        let n = self.kernel[0] * self.kernel[1] * self.in_channels * self.out_channels;
        if self.weights.len() != n {
            return Err(Error::Shape(format!(
                "2D kernel needs {n} weights, got {}",
                self.weights.len()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape("2D bias length".into()));
            }
        }
        Ok(())
    }

    pub fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        let tap = ky * self.kernel[1] + kx;
        self.weights[(tap * self.in_channels + ci) * self.out_channels + co]
    }

    /// Zero-padded stride-1 cross-correlation.
    pub fn forward(&self, height: usize, width: usize, input: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if input.len() != height * width * self.in_channels {
            return Err(Error::Shape(format!(
                "{height}x{width} map with {} channels needs {} values, got {}",
                self.in_channels,
                height * width * self.in_channels,
                input.len()
            )));
        }
        let (cin, cout) = (self.in_channels, self.out_channels);
        let half = [self.kernel[0] / 2, self.kernel[1] / 2];
        let mut out = vec![0.0; height * width * cout];
        for y in 0..height {
            for x in 0..width {
                let acc = &mut out[(y * width + x) * cout..(y * width + x + 1) * cout];
                for ky in 0..self.kernel[0] {
                    let sy = y as isize + ky as isize - half[0] as isize;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel[1] {
                        let sx = x as isize + kx as isize - half[1] as isize;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let src = (sy as usize * width + sx as usize) * cin;
                        let tap = ky * self.kernel[1] + kx;
                        for ci in 0..cin {
                            let v = input[src + ci];
                            let w =
                                &self.weights[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(w) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                if let Some(b) = &self.bias {
                    for (a, &bv) in acc.iter_mut().zip(b) {
                        *a += bv;
                    }
                }
            }
        }
        self.activation.apply(&mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Conv2dStack {
    pub layers: Vec<Conv2dLayer>,
}

impl Conv2dStack {
    pub fn new(layers: Vec<Conv2dLayer>) -> Result<Self> {
        let s = Conv2dStack { layers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::Shape(format!(
                    "2D layer {i} emits {} channels but layer {} expects {}",
                    w[0].out_channels,
                    i + 1,
                    w[1].in_channels
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self, input: usize) -> usize {
        self.layers.last().map_or(input, |l| l.out_channels)
    }

    pub fn forward(&self, height: usize, width: usize, input: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let mut x = input.to_vec();
        for l in &self.layers {
            x = l.forward(height, width, &x)?;
        }
        Ok(x)
    }
}
