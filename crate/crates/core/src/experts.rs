//! Scenario-specific detection experts.
//!
//! * LPE compresses in-region voxels into a bird's-eye-view map and runs a
//!   2D convolution head per cell.
//! * VEE runs a sparse 3D stack over in-region voxels and keeps, per region,
//!   the decoding of its highest-scoring voxel.
//! * APE is VEE's pipeline with its own parameters over fused LiDAR + image
//!   features.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::amdb::ProposalRegion;
use crate::dispatcher::ExpertKind;
use crate::error::{Error, Result};
use crate::nn::{logistic, softmax, Conv2dStack, Linear, SparseStack};
use crate::voxel::{MeanIntensityRecipe, SparseVoxelTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub expert: ExpertKind,
    pub class_probs: Vec<f64>,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
}

impl Detection {
    pub fn class_index(&self) -> usize {
        self.class_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i)
    }

    /// One JSON object: class name, probabilities, box, score and expert tag.
    pub fn to_json_line(&self, class_names: &[String]) -> Result<String> {
        let idx = self.class_index();
        let class = class_names
            .get(idx)
            .cloned()
            .unwrap_or_else(|| format!("class_{idx}"));
        let v = serde_json::json!({
            "class": class,
            "probs": self.class_probs,
            "center": self.center,
            "size": self.size,
            "yaw": self.yaw,
            "score": self.score,
            "expert": self.expert.tag(),
        });
        Ok(serde_json::to_string(&v)?)
    }
}

pub fn write_json_lines<W: std::io::Write>(
    mut out: W,
    detections: &[Detection],
    class_names: &[String],
) -> Result<()> {
    for d in detections {
        writeln!(out, "{}", d.to_json_line(class_names)?)
            .map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}

/// Bird's-eye-view map over the grid's (x, y) cells. Cell `(ix, iy)` holds
/// `[max height, mean intensity, voxel count]` at `(ix * ny + iy) * 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub nx: usize,
    pub ny: usize,
    pub feats: Vec<f64>,
}

impl BevMap {
    pub const CHANNELS: usize = 3;
    pub const HEIGHT: usize = 0;
    pub const INTENSITY: usize = 1;
    pub const COUNT: usize = 2;

    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let b = (ix * self.ny + iy) * Self::CHANNELS;
        &self.feats[b..b + Self::CHANNELS]
    }
}

fn in_any_region(regions: &[ProposalRegion], p: [f64; 3]) -> bool {
    regions.iter().any(|r| r.contains(p))
}

pub fn bev_project(tensor: &SparseVoxelTensor, regions: &[ProposalRegion]) -> BevMap {
    bev_project_with(tensor, regions, MeanIntensityRecipe::INTENSITY)
}

/// Per column: metric center height of the highest in-region voxel, mean of
/// `intensity_channel`, and voxel count. Columns without in-region voxels
/// stay zero.
pub fn bev_project_with(
    tensor: &SparseVoxelTensor,
    regions: &[ProposalRegion],
    intensity_channel: usize,
) -> BevMap {
    let grid = tensor.grid();
    let (nx, ny) = (grid.extents[0], grid.extents[1]);
    let mut feats = vec![0.0; nx * ny * BevMap::CHANNELS];
    let mut top: Vec<Option<f64>> = vec![None; nx * ny];
    for (c, f) in tensor.rows() {
        let center = grid.cell_center(c);
        if !in_any_region(regions, center) {
            continue;
        }
        let cell = c.x as usize * ny + c.y as usize;
        let b = cell * BevMap::CHANNELS;
        top[cell] = Some(top[cell].map_or(center[2], |h: f64| h.max(center[2])));
        feats[b + BevMap::INTENSITY] += f.get(intensity_channel).copied().unwrap_or(0.0);
        feats[b + BevMap::COUNT] += 1.0;
    }
    for (cell, h) in top.into_iter().enumerate() {
        if let Some(h) = h {
            let b = cell * BevMap::CHANNELS;
            feats[b + BevMap::HEIGHT] = h;
            feats[b + BevMap::INTENSITY] /= feats[b + BevMap::COUNT];
        }
    }
    BevMap { nx, ny, feats }
}

/// BEV head: output channel 0 is the objectness logit, the rest are class
/// logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpeSpec {
    pub head: Conv2dStack,
    #[serde(default = "default_floor")]
    pub score_floor: f64,
}

fn default_floor() -> f64 {
    0.5
}

impl LpeSpec {
    pub fn num_classes(&self) -> usize {
        self.head.out_channels(BevMap::CHANNELS).saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if let Some(first) = self.head.layers.first() {
            if first.in_channels != BevMap::CHANNELS {
                return Err(Error::Shape(format!(
                    "BEV head expects {} channels, map has {}",
                    first.in_channels,
                    BevMap::CHANNELS
                )));
            }
        }
        if self.head.out_channels(BevMap::CHANNELS) < 2 {
            return Err(Error::Shape(
                "BEV head needs an objectness channel and at least one class".into(),
            ));
        }
        Ok(())
    }
}

/// Detections for occupied BEV cells whose objectness strictly exceeds the
/// floor. The box spans the cell in x and y and the column's full voxel
/// extent in the source tensor in z.
pub fn lpe_detect(
    bev: &BevMap,
    spec: &LpeSpec,
    tensor: &SparseVoxelTensor,
) -> Result<Vec<Detection>> {
    spec.validate()?;
    let grid = tensor.grid();
    if grid.extents[0] != bev.nx || grid.extents[1] != bev.ny {
        return Err(Error::Shape("BEV map does not match tensor grid".into()));
    }
    let out = spec.head.forward(bev.nx, bev.ny, &bev.feats)?;
    let oc = spec.head.out_channels(BevMap::CHANNELS);

    let mut columns: HashMap<(i32, i32), (i32, i32)> = HashMap::new();
    for &c in tensor.coords() {
        let e = columns.entry((c.x, c.y)).or_insert((c.z, c.z));
        e.0 = e.0.min(c.z);
        e.1 = e.1.max(c.z);
    }

    let mut dets = Vec::new();
    for ix in 0..bev.nx {
        for iy in 0..bev.ny {
            if bev.cell(ix, iy)[BevMap::COUNT] <= 0.0 {
                continue;
            }
            let Some(&(z0, z1)) = columns.get(&(ix as i32, iy as i32)) else {
                continue;
            };
            let o = &out[(ix * bev.ny + iy) * oc..(ix * bev.ny + iy + 1) * oc];
            let score = logistic(o[0]);
            if !(score > spec.score_floor) {
                continue;
            }
            let lo = grid.cell_min([ix as i32, iy as i32, z0].into());
            let hi = grid.cell_max([ix as i32, iy as i32, z1].into());
            dets.push(Detection {
                expert: ExpertKind::Lpe,
                class_probs: softmax(&o[1..]),
                center: std::array::from_fn(|a| 0.5 * (lo[a] + hi[a])),
                size: std::array::from_fn(|a| hi[a] - lo[a]),
                yaw: 0.0,
                score,
            });
        }
    }
    Ok(dets)
}

/// Sparse 3D stack with class, objectness and box heads. The box head emits
/// `[dx, dy, dz, log sx, log sy, log sz, yaw]`: center offset from the voxel
/// center and sizes in voxel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub stack: SparseStack,
    pub class_head: Linear,
    pub score_head: Linear,
    pub box_head: Linear,
}

impl DetectorSpec {
    pub const BOX_OUTPUTS: usize = 7;

    pub fn num_classes(&self) -> usize {
        self.class_head.out_features
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        self.stack.validate()?;
        if let Some(c) = self.stack.in_channels() {
            if c != in_channels {
                return Err(Error::Shape(format!(
                    "detector expects {c} input channels, tensor has {in_channels}"
                )));
            }
        }
        let c = self.stack.out_channels(in_channels);
        for (name, head, outs) in [
            ("class", &self.class_head, None),
            ("score", &self.score_head, Some(1)),
            ("box", &self.box_head, Some(Self::BOX_OUTPUTS)),
        ] {
            head.validate()?;
            if head.in_features != c || outs.is_some_and(|o| head.out_features != o) {
                return Err(Error::Shape(format!(
                    "{name} head is {}x{}, stack emits {c} channels",
                    head.in_features, head.out_features
                )));
            }
        }
        if self.class_head.out_features == 0 {
            return Err(Error::Shape("class head has no outputs".into()));
        }
        Ok(())
    }
}

pub fn vee_detect(
    tensor: &SparseVoxelTensor,
    regions: &[ProposalRegion],
    spec: &DetectorSpec,
) -> Result<Vec<Detection>> {
    region_detect(
        tensor,
        regions,
        spec,
        ExpertKind::Vee,
        rayon::current_num_threads(),
    )
}

pub fn ape_detect(
    fused: &SparseVoxelTensor,
    regions: &[ProposalRegion],
    spec: &DetectorSpec,
) -> Result<Vec<Detection>> {
    region_detect(
        fused,
        regions,
        spec,
        ExpertKind::Ape,
        rayon::current_num_threads(),
    )
}

pub(crate) fn region_detect(
    tensor: &SparseVoxelTensor,
    regions: &[ProposalRegion],
    spec: &DetectorSpec,
    expert: ExpertKind,
    workers: usize,
) -> Result<Vec<Detection>> {
    spec.validate(tensor.channels())?;
    if regions.is_empty() {
        return Ok(Vec::new());
    }
    let grid = *tensor.grid();
    let rows: Vec<usize> = (0..tensor.len())
        .filter(|&r| in_any_region(regions, grid.cell_center(tensor.coord(r))))
        .collect();
    let sub = tensor.select_rows(&rows)?;
    let feats = spec.stack.apply(&sub, workers)?;
    let scores: Vec<f64> = feats
        .rows()
        .map(|(_, f)| logistic(spec.score_head.forward(f)[0]))
        .collect();

    let mut dets = Vec::new();
    for region in regions {
        let mut best: Option<usize> = None;
        for i in 0..feats.len() {
            if !region.contains(grid.cell_center(feats.coord(i))) {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { continue };
        let f = feats.row(i);
        let b = spec.box_head.forward(f);
        let vc = grid.cell_center(feats.coord(i));
        dets.push(Detection {
            expert,
            class_probs: softmax(&spec.class_head.forward(f)),
            center: std::array::from_fn(|a| vc[a] + b[a]),
            size: std::array::from_fn(|a| grid.voxel_size[a] * b[3 + a].exp()),
            yaw: b[6],
            score: scores[i],
        });
    }
    Ok(dets)
}
