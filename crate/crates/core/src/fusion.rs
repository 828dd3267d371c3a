//! Image feature pooling, pinhole back-projection into the voxel grid, and
//! concatenation of image features onto LiDAR voxels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amdb::ProposalRegion;
use crate::error::{Error, Result};
use crate::voxel::{SparseVoxelTensor, VoxelCoord, VoxelGridSpec};

/// Per-pixel image features with a depth plane and validity mask.
/// Features are `H x W x C`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    feats: Vec<f64>,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl PixelFeatureGrid {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        feats: Vec<f64>,
        depth: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("pixel grid must be non-empty".into()));
        }
        let px = width * height;
        if feats.len() != px * channels || depth.len() != px || valid.len() != px {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} grid got {} features, {} depths, {} mask entries",
                feats.len(),
                depth.len(),
                valid.len()
            )));
        }
        if let Some(i) = (0..px).find(|&i| valid[i] && !(depth[i].is_finite() && depth[i] > 0.0)) {
            return Err(Error::format(
                "pixel grid",
                format!("valid pixel {i} has depth {}", depth[i]),
            ));
        }
        Ok(PixelFeatureGrid {
            width,
            height,
            channels,
            feats,
            depth,
            valid,
        })
    }

    /// Every pixel valid at the given depth.
    pub fn with_uniform_depth(
        width: usize,
        height: usize,
        channels: usize,
        feats: Vec<f64>,
        depth: f64,
    ) -> Result<Self> {
        let px = width * height;
        Self::new(
            width,
            height,
            channels,
            feats,
            vec![depth; px],
            vec![true; px],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = row * self.width + col;
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn depth_at(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.depth[i])
    }

    /// Same geometry and mask with new features.
    pub fn with_features(&self, feats: Vec<f64>, channels: usize) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            channels,
            feats,
            self.depth.clone(),
            self.valid.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

/// Block-pool by `scale`; blocks on the right and bottom edges may be partial.
/// Only valid pixels contribute; a block with none stays invalid and zero.
pub fn multiscale_pool(grid: &PixelFeatureGrid, scale: usize) -> Result<PixelFeatureGrid> {
    multiscale_pool_with(grid, scale, PoolMode::Mean)
}

pub fn multiscale_pool_with(
    grid: &PixelFeatureGrid,
    scale: usize,
    mode: PoolMode,
) -> Result<PixelFeatureGrid> {
    if scale == 0 {
        return Err(Error::InvalidScale(scale));
    }
    if scale == 1 {
        return Ok(grid.clone());
    }
    let (w, h, c) = (grid.width, grid.height, grid.channels);
    let (ow, oh) = (w.div_ceil(scale), h.div_ceil(scale));
    let mut feats = vec![0.0; ow * oh * c];
    let mut depth = vec![0.0; ow * oh];
    let mut valid = vec![false; ow * oh];

    for by in 0..oh {
        for bx in 0..ow {
            let o = by * ow + bx;
            let acc = &mut feats[o * c..(o + 1) * c];
            let mut n = 0usize;
            let mut d_acc = 0.0;
            for y in by * scale..((by + 1) * scale).min(h) {
                for x in bx * scale..((bx + 1) * scale).min(w) {
                    let Some(d) = grid.depth_at(y, x) else {
                        continue;
                    };
                    let px = grid.pixel(y, x);
                    match mode {
                        PoolMode::Mean => {
                            for (a, &v) in acc.iter_mut().zip(px) {
                                *a += v;
                            }
                            d_acc += d;
                        }
                        PoolMode::Max => {
                            for (a, &v) in acc.iter_mut().zip(px) {
                                *a = if n == 0 { v } else { a.max(v) };
                            }
                            d_acc = if n == 0 { d } else { d_acc.max(d) };
                        }
                    }
                    n += 1;
                }
            }
            if n > 0 {
                if mode == PoolMode::Mean {
                    let inv = n as f64;
                    for a in acc.iter_mut() {
                        *a /= inv;
                    }
                    d_acc /= inv;
                }
                depth[o] = d_acc;
                valid[o] = true;
            }
        }
    }
    PixelFeatureGrid::new(ow, oh, c, feats, depth, valid)
}

/// Smallest pooling scale whose float32 feature map fits in `budget_bytes`.
pub fn pick_scale(
    width: usize,
    height: usize,
    channels: usize,
    budget_bytes: usize,
) -> Result<usize> {
    let per_pixel = channels * 4;
    if budget_bytes < per_pixel || budget_bytes == 0 {
        return Err(Error::Budget {
            budget: budget_bytes,
            needed: per_pixel,
        });
    }
    let largest = width.max(height).max(1);
    (1..=largest)
        .find(|&s| width.div_ceil(s) * height.div_ceil(s) * per_pixel <= budget_bytes)
        .ok_or(Error::Budget {
            budget: budget_bytes,
            needed: per_pixel,
        })
}

/// Pinhole intrinsics plus the rigid camera-to-LiDAR transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    pub const IDENTITY_ROTATION: [[f64; 3]; 3] =
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation: Self::IDENTITY_ROTATION,
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::Camera(format!(
                "focal lengths ({}, {}) must be positive",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Camera("non-finite principal point".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if !((dot - expect).abs() <= 1e-9) {
                    return Err(Error::Camera("rotation is not orthonormal".into()));
                }
            }
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Camera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Intrinsics for a pixel grid pooled by `scale` in each direction.
    pub fn scaled(&self, scale: usize) -> Self {
        let s = scale as f64;
        CameraModel {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            ..*self
        }
    }

    /// Back-project pixel `(col, row)` at `depth` and move it into the
    /// LiDAR frame.
    pub fn unproject(&self, col: f64, row: f64, depth: f64) -> [f64; 3] {
        let cam = [
            (col - self.cx) * depth / self.fx,
            (row - self.cy) * depth / self.fy,
            depth,
        ];
        let r = &self.rotation;
        std::array::from_fn(|i| {
            r[i][0] * cam[0] + r[i][1] * cam[1] + r[i][2] * cam[2] + self.translation[i]
        })
    }
}

/// A cell and the features of one pixel that landed in it.
pub type ProjectedEntry = (VoxelCoord, Vec<f64>);

/// Image features quantized onto voxel cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPixels {
    pub channels: usize,
    pub entries: Vec<ProjectedEntry>,
    /// Valid pixels whose 3D point fell outside the grid.
    pub dropped: usize,
}

impl ProjectedPixels {
    pub fn empty(channels: usize) -> Self {
        ProjectedPixels {
            channels,
            entries: Vec::new(),
            dropped: 0,
        }
    }
}

/// Back-project every valid pixel with its depth and assign it to the cell
/// containing the resulting point. Entries come out in pixel raster order.
pub fn project_pixels(
    grid: &PixelFeatureGrid,
    cam: &CameraModel,
    vox: &VoxelGridSpec,
) -> Result<ProjectedPixels> {
    cam.validate()?;
    vox.validate()?;
    let per_row: Vec<(Vec<ProjectedEntry>, usize)> = (0..grid.height)
        .into_par_iter()
        .map(|row| {
            let mut hits = Vec::new();
            let mut dropped = 0;
            for col in 0..grid.width {
                let Some(d) = grid.depth_at(row, col) else {
                    continue;
                };
                let p = cam.unproject(col as f64, row as f64, d);
                match vox.cell_of(p) {
                    Some(c) => hits.push((c, grid.pixel(row, col).to_vec())),
                    None => dropped += 1,
                }
            }
            (hits, dropped)
        })
        .collect();
    let mut out = ProjectedPixels::empty(grid.channels);
    for (hits, dropped) in per_row {
        out.entries.extend(hits);
        out.dropped += dropped;
    }
    Ok(out)
}

/// Concatenate image features onto LiDAR voxels.
///
/// Every LiDAR voxel starts as `[f_v, 0]`. Projected entries whose cell
/// center lies inside at least one proposal region are grouped by cell and
/// averaged; a group on an active voxel yields `[f_v, f_p]`, a group on an
/// inactive cell adds a new voxel `[0, f_p]`. Rows come out in lexicographic
/// coordinate order.
pub fn fuse(
    vox: &SparseVoxelTensor,
    projected: &ProjectedPixels,
    proposals: &[ProposalRegion],
) -> Result<SparseVoxelTensor> {
    let grid = *vox.grid();
    let (cl, ci) = (vox.channels(), projected.channels);
    for (c, f) in &projected.entries {
        if f.len() != ci {
            return Err(Error::Shape(format!(
                "projected feature at {c} has {} channels, expected {ci}",
                f.len()
            )));
        }
        if !grid.contains(*c) {
            return Err(Error::OutOfRange {
                coord: c.as_array().map(i64::from),
                extents: grid.extents,
            });
        }
    }

    let mut groups: BTreeMap<VoxelCoord, Vec<&[f64]>> = BTreeMap::new();
    for (c, f) in &projected.entries {
        let center = grid.cell_center(*c);
        if proposals.iter().any(|r| r.contains(center)) {
            groups.entry(*c).or_default().push(f);
        }
    }

    let mut rows: BTreeMap<VoxelCoord, Vec<f64>> = BTreeMap::new();
    for (c, f) in vox.rows() {
        let mut row = Vec::with_capacity(cl + ci);
        row.extend_from_slice(f);
        row.resize(cl + ci, 0.0);
        rows.insert(c, row);
    }
    for (c, mut members) in groups {
        // summation order fixed by value, not by arrival
        members.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut mean = vec![0.0; ci];
        for m in &members {
            for (a, &v) in mean.iter_mut().zip(m.iter()) {
                *a += v;
            }
        }
        let n = members.len() as f64;
        for a in &mut mean {
            *a /= n;
        }
        let row = rows.entry(c).or_insert_with(|| vec![0.0; cl + ci]);
        row[cl..].copy_from_slice(&mean);
    }
    SparseVoxelTensor::from_rows(grid, cl + ci, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn everywhere(grid: &VoxelGridSpec) -> ProposalRegion {
        let max =
            std::array::from_fn(|a| grid.origin[a] + grid.extents[a] as f64 * grid.voxel_size[a]);
        ProposalRegion::new(grid.origin, max, 1.0).unwrap()
    }

    #[test]
    fn pool_scale_one_is_identity() {
        let g =
            PixelFeatureGrid::with_uniform_depth(3, 2, 2, (0..12).map(f64::from).collect(), 5.0)
                .unwrap();
        assert_eq!(multiscale_pool(&g, 1).unwrap(), g);
        assert!(matches!(
            multiscale_pool(&g, 0),
            Err(Error::InvalidScale(0))
        ));
    }

    #[test]
    fn pool_constant_and_hand_mean() {
        let ones = PixelFeatureGrid::with_uniform_depth(4, 4, 1, vec![1.0; 16], 2.0).unwrap();
        let p = multiscale_pool(&ones, 2).unwrap();
        assert_eq!((p.width(), p.height()), (2, 2));
        assert!(p.feats().iter().all(|&v| v == 1.0));

        let block =
            PixelFeatureGrid::with_uniform_depth(2, 2, 1, vec![1.0, 3.0, 5.0, 7.0], 1.0).unwrap();
        let p = multiscale_pool(&block, 2).unwrap();
        assert_eq!(p.feats(), &[4.0]);
        let m = multiscale_pool_with(&block, 2, PoolMode::Max).unwrap();
        assert_eq!(m.feats(), &[7.0]);
    }

    #[test]
    fn pool_skips_invalid_pixels() {
        let g = PixelFeatureGrid::new(
            3,
            1,
            1,
            vec![2.0, 100.0, 6.0],
            vec![1.0, 0.0, 3.0],
            vec![true, false, true],
        )
        .unwrap();
        let p = multiscale_pool(&g, 2).unwrap();
        assert_eq!(p.width(), 2);
        assert_eq!(p.feats(), &[2.0, 6.0]);
        assert_eq!(p.depth(), &[1.0, 3.0]);

        let dark =
            PixelFeatureGrid::new(2, 1, 1, vec![1.0, 1.0], vec![0.0; 2], vec![false; 2]).unwrap();
        let p = multiscale_pool(&dark, 2).unwrap();
        assert_eq!(p.valid(), &[false]);
        assert_eq!(p.feats(), &[0.0]);
    }

    #[test]
    fn scale_selection() {
        assert_eq!(pick_scale(64, 64, 8, 1 << 20).unwrap(), 1);
        assert_eq!(pick_scale(64, 64, 8, 32_768).unwrap(), 2);
        assert_eq!(pick_scale(64, 48, 8, 32).unwrap(), 64);
        assert!(matches!(
            pick_scale(64, 64, 8, 31),
            Err(Error::Budget { needed: 32, .. })
        ));
    }

    #[test]
    fn principal_ray_projection() {
        let feats = vec![0.0; 9];
        let mut depth = vec![1.0; 9];
        depth[4] = 3.5;
        let valid = vec![false, false, false, false, true, false, false, false, false];
        let img = PixelFeatureGrid::new(3, 3, 1, feats, depth, valid).unwrap();
        let cam = CameraModel::new(100.0, 100.0, 1.0, 1.0);
        assert_eq!(cam.unproject(1.0, 1.0, 3.5), [0.0, 0.0, 3.5]);
        let vox = VoxelGridSpec::new([-2.0, -2.0, 0.0], [1.0; 3], [4, 4, 8]).unwrap();
        let p = project_pixels(&img, &cam, &vox).unwrap();
        assert_eq!(p.entries.len(), 1);
        assert_eq!(p.entries[0].0, VoxelCoord::new(2, 2, 3));
    }

    #[test]
    fn degenerate_camera_rejected() {
        let img = PixelFeatureGrid::with_uniform_depth(1, 1, 1, vec![0.0], 1.0).unwrap();
        let vox = VoxelGridSpec::unit([2, 2, 2]).unwrap();
        let cam = CameraModel::new(0.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            project_pixels(&img, &cam, &vox),
            Err(Error::Camera(_))
        ));
        let mut skew = CameraModel::new(1.0, 1.0, 0.0, 0.0);
        skew.rotation[0][1] = 0.1;
        assert!(matches!(skew.validate(), Err(Error::Camera(_))));
    }

    #[test]
    fn three_fusion_cases() {
        let grid = VoxelGridSpec::unit([8, 8, 8]).unwrap();
        let vox = SparseVoxelTensor::from_rows(
            grid,
            2,
            [
                (VoxelCoord::new(2, 3, 4), vec![1.0, 2.0]),
                (VoxelCoord::new(6, 6, 6), vec![9.0, 8.0]),
            ],
        )
        .unwrap();
        let projected = ProjectedPixels {
            channels: 3,
            entries: vec![
                (VoxelCoord::new(2, 3, 4), vec![5.0, 6.0, 7.0]),
                (VoxelCoord::new(1, 1, 1), vec![5.0, 6.0, 7.0]),
            ],
            dropped: 0,
        };
        let fused = fuse(&vox, &projected, &[everywhere(&grid)]).unwrap();
        assert_eq!(fused.channels(), 5);
        assert_eq!(fused.len(), 3);
        let at = |c| fused.row(fused.coord_lookup(c).unwrap()).to_vec();
        assert_eq!(at(VoxelCoord::new(2, 3, 4)), vec![1.0, 2.0, 5.0, 6.0, 7.0]);
        assert_eq!(at(VoxelCoord::new(6, 6, 6)), vec![9.0, 8.0, 0.0, 0.0, 0.0]);
        assert_eq!(at(VoxelCoord::new(1, 1, 1)), vec![0.0, 0.0, 5.0, 6.0, 7.0]);
        assert!(fused.is_sorted());
    }

    #[test]
    fn pixels_outside_proposals_ignored_and_collisions_averaged() {
        let grid = VoxelGridSpec::unit([8, 8, 8]).unwrap();
        let vox =
            SparseVoxelTensor::from_rows(grid, 1, [(VoxelCoord::new(0, 0, 0), vec![1.0])]).unwrap();
        let projected = ProjectedPixels {
            channels: 1,
            entries: vec![
                (VoxelCoord::new(0, 0, 0), vec![2.0]),
                (VoxelCoord::new(0, 0, 0), vec![4.0]),
                (VoxelCoord::new(7, 7, 7), vec![1.0]),
            ],
            dropped: 0,
        };
        let region = ProposalRegion::new([0.0; 3], [2.0; 3], 0.9).unwrap();
        let fused = fuse(&vox, &projected, &[region]).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused.row(0), &[1.0, 3.0]);
    }

    #[test]
    fn inconsistent_projected_channels() {
        let grid = VoxelGridSpec::unit([2, 2, 2]).unwrap();
        let vox = SparseVoxelTensor::empty(grid, 1).unwrap();
        let projected = ProjectedPixels {
            channels: 2,
            entries: vec![(VoxelCoord::new(0, 0, 0), vec![1.0])],
            dropped: 0,
        };
        assert!(matches!(fuse(&vox, &projected, &[]), Err(Error::Shape(_))));
    }
}
