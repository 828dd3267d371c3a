//! LiDAR and image branches of the multimodal data bridge: backbone
//! features, per-voxel objectness scores and scored proposal regions.
//!
//! The backbones are small configurable convolution stacks standing in for
//! trained networks; weights come from files or seeded initialization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::PixelFeatureGrid;
use crate::nn::{logistic, Conv2dStack, Linear, SparseStack};
use crate::spconv::FmaCount;
use crate::voxel::{SparseVoxelTensor, VoxelCoord};

/// Axis-aligned 3D box in meters with its objectness confidence.
/// Deserialization validates the box and recomputes the distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProposal")]
pub struct ProposalRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub confidence: f64,
    /// Euclidean norm of the box center.
    pub centroid_distance: f64,
}

impl ProposalRegion {
    pub fn new(min: [f64; 3], max: [f64; 3], confidence: f64) -> Result<Self> {
        if (0..3).any(|a| !(min[a] <= max[a])) {
            return Err(Error::Shape(format!("box min {min:?} exceeds max {max:?}")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::format(
                "proposal",
                format!("confidence {confidence} outside [0, 1]"),
            ));
        }
        let c = center(min, max);
        Ok(ProposalRegion {
            min,
            max,
            confidence,
            centroid_distance: (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt(),
        })
    }

    /// A 1 m cube centred `distance` meters down the +x axis.
    pub fn at_distance(distance: f64, confidence: f64) -> Result<Self> {
        Self::new(
            [distance - 0.5, -0.5, -0.5],
            [distance + 0.5, 0.5, 0.5],
            confidence,
        )
    }

    pub fn center(&self) -> [f64; 3] {
        center(self.min, self.max)
    }

    /// Closed-box containment.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

#[derive(Deserialize)]
struct RawProposal {
    min: [f64; 3],
    max: [f64; 3],
    confidence: f64,
}

impl TryFrom<RawProposal> for ProposalRegion {
    type Error = Error;

    fn try_from(r: RawProposal) -> Result<Self> {
        ProposalRegion::new(r.min, r.max, r.confidence)
    }
}

fn center(min: [f64; 3], max: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| 0.5 * (min[a] + max[a]))
}

/// Sparse backbone followed by a per-voxel logistic score head.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stack: SparseStack,
    /// Maps backbone features to a single objectness logit.
    pub head: Option<Linear>,
}

impl BackboneSpec {
    pub fn validate(&self, in_channels: usize) -> Result<()> {
        self.stack.validate()?;
        if let Some(c) = self.stack.in_channels() {
            if c != in_channels {
                return Err(Error::Shape(format!(
                    "backbone expects {c} input channels, tensor has {in_channels}"
                )));
            }
        }
        if let Some(h) = &self.head {
            h.validate()?;
            let c = self.stack.out_channels(in_channels);
            if h.in_features != c || h.out_features != 1 {
                return Err(Error::Shape(format!(
                    "score head is {}x{}, backbone emits {c} channels",
                    h.in_features, h.out_features
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarBranchOutput {
    pub features: SparseVoxelTensor,
    /// One logistic score per voxel, in feature row order.
    pub scores: Vec<f64>,
    pub fmas: FmaCount,
}

pub fn lidar_branch(input: &SparseVoxelTensor, spec: &BackboneSpec) -> Result<LidarBranchOutput> {
    lidar_branch_with_workers(input, spec, rayon::current_num_threads())
}

pub fn lidar_branch_with_workers(
    input: &SparseVoxelTensor,
    spec: &BackboneSpec,
    workers: usize,
) -> Result<LidarBranchOutput> {
    spec.validate(input.channels())?;
    let (features, fmas) = spec.stack.forward(input, workers)?;
    let scores = match &spec.head {
        Some(h) => features
            .rows()
            .map(|(_, f)| logistic(h.forward(f)[0]))
            .collect(),
        None => vec![0.5; features.len()],
    };
    Ok(LidarBranchOutput {
        features,
        scores,
        fmas,
    })
}

/// Group voxels scoring at least `score_threshold` into 26-connected
/// components. Each component becomes the tight metric box around its cells,
/// with confidence equal to its best member score. Sorted by descending
/// confidence; ties keep discovery order.
pub fn make_proposals(
    tensor: &SparseVoxelTensor,
    scores: &[f64],
    score_threshold: f64,
) -> Result<Vec<ProposalRegion>> {
    if scores.len() != tensor.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} voxels",
            scores.len(),
            tensor.len()
        )));
    }
    let grid = tensor.grid();
    let mut seen = vec![false; tensor.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..tensor.len() {
        if seen[seed] || !(scores[seed] >= score_threshold) {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut lo = tensor.coord(seed);
        let mut hi = lo;
        let mut best = scores[seed];
        while let Some(i) = queue.pop_front() {
            let c = tensor.coord(i);
            lo = VoxelCoord::new(lo.x.min(c.x), lo.y.min(c.y), lo.z.min(c.z));
            hi = VoxelCoord::new(hi.x.max(c.x), hi.y.max(c.y), hi.z.max(c.z));
            best = best.max(scores[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if (dx, dy, dz) == (0, 0, 0) {
                            continue;
                        }
                        if let Some(j) = tensor.coord_lookup(c.offset([dx, dy, dz])) {
                            if !seen[j] && scores[j] >= score_threshold {
                                seen[j] = true;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
        }
        out.push(ProposalRegion::new(
            grid.cell_min(lo),
            grid.cell_max(hi),
            best.clamp(0.0, 1.0),
        )?);
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(out)
}

/// Dense 2D convolution stack over image features; depth and mask pass
/// through unchanged.
pub fn image_branch(image: &PixelFeatureGrid, spec: &Conv2dStack) -> Result<PixelFeatureGrid> {
    if let Some(first) = spec.layers.first() {
        if first.in_channels != image.channels() {
            return Err(Error::Shape(format!(
                "image branch expects {} channels, image has {}",
                first.in_channels,
                image.channels()
            )));
        }
    }
    let feats = spec.forward(image.height(), image.width(), image.feats())?;
    image.with_features(feats, spec.out_channels(image.channels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2dLayer, SparseLayer};
    use crate::spconv::KernelSpec;
    use crate::voxel::VoxelGridSpec;

    fn unit_tensor(coords: &[[i32; 3]]) -> SparseVoxelTensor {
        let g = VoxelGridSpec::unit([8, 8, 8]).unwrap();
        SparseVoxelTensor::from_rows(g, 1, coords.iter().map(|&c| (c.into(), vec![0.0]))).unwrap()
    }

    #[test]
    fn proposal_json_recomputes_distance() {
        let p: ProposalRegion =
            serde_json::from_str(r#"{"min":[2.5,-0.5,-0.5],"max":[3.5,0.5,0.5],"confidence":0.4}"#)
                .unwrap();
        assert_eq!(p.centroid_distance, 3.0);
        assert!(serde_json::from_str::<ProposalRegion>(
            r#"{"min":[1,0,0],"max":[0,0,0],"confidence":0.4}"#
        )
        .is_err());
    }

    #[test]
    fn empty_input_empty_output() {
        let g = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let t = SparseVoxelTensor::empty(g, 2).unwrap();
        let out = lidar_branch(&t, &BackboneSpec::default()).unwrap();
        assert!(out.features.is_empty());
        assert!(out.scores.is_empty());
    }

    #[test]
    fn logistic_zero_score() {
        let g = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let t =
            SparseVoxelTensor::from_rows(g, 3, [(VoxelCoord::new(1, 1, 1), vec![0.0; 3])]).unwrap();
        let spec = BackboneSpec {
            stack: SparseStack::new(vec![SparseLayer {
                kernel: KernelSpec::identity(3).unwrap(),
                activation: Default::default(),
            }])
            .unwrap(),
            head: Some(Linear::new(3, 1, vec![1.0, 0.0, 0.0], vec![0.0]).unwrap()),
        };
        let out = lidar_branch(&t, &spec).unwrap();
        assert_eq!(out.scores, vec![0.5]);
    }

    #[test]
    fn mismatched_head_rejected() {
        let g = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let t = SparseVoxelTensor::empty(g, 3).unwrap();
        let spec = BackboneSpec {
            stack: SparseStack::default(),
            head: Some(Linear::zeros(2, 1)),
        };
        assert!(matches!(lidar_branch(&t, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn proposals_threshold_and_connectivity() {
        let t = unit_tensor(&[[1, 1, 1], [2, 2, 2], [6, 6, 6]]);
        assert!(make_proposals(&t, &[0.1, 0.2, 0.3], 0.5)
            .unwrap()
            .is_empty());

        let single = make_proposals(&t, &[0.1, 0.2, 0.9], 0.5).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].confidence, 0.9);
        assert_eq!(single[0].min, [6.0; 3]);
        assert_eq!(single[0].max, [7.0; 3]);

        // (1,1,1) and (2,2,2) touch only at a corner
        let diag = make_proposals(&t, &[0.6, 0.7, 0.1], 0.5).unwrap();
        assert_eq!(diag.len(), 1);
        assert_eq!(diag[0].min, [1.0; 3]);
        assert_eq!(diag[0].max, [3.0; 3]);
        assert_eq!(diag[0].confidence, 0.7);
    }

    #[test]
    fn proposals_sorted_by_confidence() {
        let t = unit_tensor(&[[0, 0, 0], [4, 4, 4], [7, 0, 7]]);
        let p = make_proposals(&t, &[0.6, 0.95, 0.8], 0.5).unwrap();
        let conf: Vec<f64> = p.iter().map(|r| r.confidence).collect();
        assert_eq!(conf, vec![0.95, 0.8, 0.6]);
        let c = p[0].center();
        assert!((p[0].centroid_distance - (c[0] * c[0] * 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn image_branch_identity_and_zero() {
        let img =
            PixelFeatureGrid::with_uniform_depth(3, 2, 2, (0..12).map(f64::from).collect(), 4.0)
                .unwrap();
        let id = Conv2dStack::new(vec![Conv2dLayer::identity(2)]).unwrap();
        assert_eq!(image_branch(&img, &id).unwrap(), img);
        let zero = Conv2dStack::new(vec![Conv2dLayer::zeros([3, 3], 2, 4)]).unwrap();
        let out = image_branch(&img, &zero).unwrap();
        assert_eq!(out.channels(), 4);
        assert!(out.feats().iter().all(|&v| v == 0.0));
        assert_eq!(out.depth(), img.depth());
        let bad = Conv2dStack::new(vec![Conv2dLayer::zeros([1, 1], 3, 1)]).unwrap();
        assert!(matches!(image_branch(&img, &bad), Err(Error::Shape(_))));
    }
}
