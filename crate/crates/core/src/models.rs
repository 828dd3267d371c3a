//! JSON model descriptions and built-in weight sets.
//!
//! A sparse kernel in a description is either inline (`size`, channels,
//! `weights`) or a reference `{"weights_file": "...", "bias": [...]}` to a
//! binary kernel file, resolved against the description's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amdb::BackboneSpec;
use crate::error::{Error, Result};
use crate::experts::{BevMap, DetectorSpec, LpeSpec};
use crate::formats::read_kernel;
use crate::nn::{Activation, Conv2dLayer, Conv2dStack, Linear, SparseLayer, SparseStack};
use crate::spconv::KernelSpec;
use crate::voxel::{FeatureRecipe, MeanIntensityRecipe};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSource {
    File {
        weights_file: PathBuf,
        #[serde(default)]
        bias: Option<Vec<f64>>,
    },
    Inline(KernelSpec),
}

impl KernelSource {
    fn resolve(self, base: &Path) -> Result<KernelSpec> {
        match self {
            KernelSource::Inline(k) => {
                // re-run the constructor checks skipped by deserialization
                KernelSpec::new(
                    k.size(),
                    k.in_channels(),
                    k.out_channels(),
                    k.weights().to_vec(),
                    k.bias().map(<[f64]>::to_vec),
                )
            }
            KernelSource::File { weights_file, bias } => {
                let mut k = read_kernel(base.join(weights_file))?;
                k.set_bias(bias)?;
                Ok(k)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseLayerDesc {
    pub kernel: KernelSource,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SparseStackDesc {
    pub layers: Vec<SparseLayerDesc>,
}

impl SparseStackDesc {
    fn resolve(self, base: &Path) -> Result<SparseStack> {
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                Ok(SparseLayer {
                    kernel: l.kernel.resolve(base)?,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SparseStack::new(layers)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackboneDesc {
    pub stack: SparseStackDesc,
    #[serde(default)]
    pub head: Option<Linear>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorDesc {
    pub stack: SparseStackDesc,
    pub class_head: Linear,
    pub score_head: Linear,
    pub box_head: Linear,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<BackboneSpec> {
    let path = path.as_ref();
    let d: BackboneDesc = read_json(path)?;
    Ok(BackboneSpec {
        stack: d.stack.resolve(parent(path))?,
        head: d.head,
    })
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<DetectorSpec> {
    let path = path.as_ref();
    let d: DetectorDesc = read_json(path)?;
    Ok(DetectorSpec {
        stack: d.stack.resolve(parent(path))?,
        class_head: d.class_head,
        score_head: d.score_head,
        box_head: d.box_head,
    })
}

pub fn load_conv2d(path: impl AsRef<Path>) -> Result<Conv2dStack> {
    let s: Conv2dStack = read_json(path.as_ref())?;
    s.validate()?;
    Ok(s)
}

pub fn load_lpe(path: impl AsRef<Path>) -> Result<LpeSpec> {
    let s: LpeSpec = read_json(path.as_ref())?;
    s.validate()?;
    Ok(s)
}

/// Every network the routed pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub backbone: BackboneSpec,
    pub image_branch: Conv2dStack,
    pub lpe: LpeSpec,
    pub vee: DetectorSpec,
    pub ape: DetectorSpec,
}

/// Channel layout shared by the built-in weight sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub image_channels: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            image_channels: 3,
            classes: 3,
        }
    }
}

/// Backbone output channels of the built-in weights:
/// center intensity, center count, neighborhood count, constant zero.
pub const REFERENCE_FEATURES: usize = 4;
/// Image-branch output channels of the built-in weights.
pub const REFERENCE_IMAGE_FEATURES: usize = 2;

impl Models {
    /// Hand-set weights with a predictable response. Voxel objectness is
    /// `logistic(4 * intensity + 0.5 * neighborhood_count - 3)`.
    pub fn reference(dims: ModelDims) -> Result<Models> {
        let vc = MeanIntensityRecipe.channels();
        let f = REFERENCE_FEATURES;
        let mut k = KernelSpec::zeros([3, 3, 3], vc, f)?;
        let center = 13;
        let at = |tap: usize, ci: usize, co: usize| (tap * vc + ci) * f + co;
        k.weights_mut()[at(center, MeanIntensityRecipe::INTENSITY, 0)] = 1.0;
        k.weights_mut()[at(center, MeanIntensityRecipe::COUNT, 1)] = 1.0;
        for tap in 0..27 {
            k.weights_mut()[at(tap, MeanIntensityRecipe::COUNT, 2)] = 1.0;
        }
        let backbone = BackboneSpec {
            stack: SparseStack::new(vec![SparseLayer {
                kernel: k,
                activation: Activation::Relu,
            }])?,
            head: Some(Linear::new(f, 1, vec![4.0, 0.0, 0.5, 0.0], vec![-3.0])?),
        };

        let ic = dims.image_channels;
        let fi = REFERENCE_IMAGE_FEATURES;
        // channel 0: mean of inputs, channel 1: first input
        let mut img = Conv2dLayer::zeros([1, 1], ic, fi);
        for c in 0..ic {
            img.weights[c * fi] = 1.0 / ic as f64;
        }
        img.weights[1] = 1.0;
        let image_branch = Conv2dStack::new(vec![img])?;

        // BEV head: objectness from the voxel count, classes from count,
        // intensity and height in turn
        let bc = BevMap::CHANNELS;
        let oc = 1 + dims.classes;
        let mut head = Conv2dLayer::zeros([1, 1], bc, oc);
        head.weights[BevMap::COUNT * oc] = 2.0;
        head.bias = Some({
            let mut b = vec![0.0; oc];
            b[0] = -1.0;
            b
        });
        for cls in 0..dims.classes {
            head.weights[(cls % bc) * oc + 1 + cls] = 1.0;
        }
        let lpe = LpeSpec {
            head: Conv2dStack::new(vec![head])?,
            score_floor: 0.5,
        };

        Ok(Models {
            backbone,
            image_branch,
            lpe,
            vee: reference_detector(f, dims.classes)?,
            ape: reference_detector(f + fi, dims.classes)?,
        })
    }

    /// Same shapes as [`Models::reference`] with weights drawn uniformly
    /// from `[-0.5, 0.5)`.
    pub fn seeded(seed: u64, dims: ModelDims) -> Result<Models> {
        let mut m = Self::reference(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        for l in &mut m.backbone.stack.layers {
            fill(l.kernel.weights_mut());
        }
        if let Some(h) = &mut m.backbone.head {
            fill(&mut h.weights);
            fill(&mut h.bias);
        }
        for l in m
            .image_branch
            .layers
            .iter_mut()
            .chain(m.lpe.head.layers.iter_mut())
        {
            fill(&mut l.weights);
        }
        for d in [&mut m.vee, &mut m.ape] {
            for l in &mut d.stack.layers {
                fill(l.kernel.weights_mut());
            }
            for h in [&mut d.class_head, &mut d.score_head, &mut d.box_head] {
                fill(&mut h.weights);
                fill(&mut h.bias);
            }
        }
        Ok(m)
    }
}

/// Identity 1x1x1 stack, score from intensity and neighborhood count,
/// classes from the first features, unit-voxel boxes at the voxel center.
fn reference_detector(in_channels: usize, classes: usize) -> Result<DetectorSpec> {
    let mut class_head = Linear::zeros(in_channels, classes);
    for c in 0..classes {
        *class_head.weight_mut(c % in_channels, c) = 1.0;
    }
    let mut score_head = Linear::zeros(in_channels, 1);
    *score_head.weight_mut(0, 0) = 4.0;
    *score_head.weight_mut(2, 0) = 0.5;
    score_head.bias[0] = -3.0;
    Ok(DetectorSpec {
        stack: SparseStack::new(vec![SparseLayer {
            kernel: KernelSpec::identity(in_channels)?,
            activation: Activation::Relu,
        }])?,
        class_head,
        score_head,
        box_head: Linear::zeros(in_channels, DetectorSpec::BOX_OUTPUTS),
    })
}
