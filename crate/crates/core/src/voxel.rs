//! Sparse voxel tensors, grid geometry and point-cloud voxelization.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw LiDAR return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::format("point", "non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::format(
                "point",
                format!("intensity {intensity} outside [0, 1]"),
            ));
        }
        Ok(Point { x, y, z, intensity })
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Integer cell coordinate. Ordering is lexicographic (x, then y, then z).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        VoxelCoord { x, y, z }
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        VoxelCoord::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    pub fn as_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[i32; 3]> for VoxelCoord {
    fn from(c: [i32; 3]) -> Self {
        VoxelCoord::new(c[0], c[1], c[2])
    }
}

impl fmt::Display for VoxelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Regular axis-aligned voxel grid: `extents` cells per axis of size
/// `voxel_size`, with cell (0,0,0) starting at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub extents: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], extents: [usize; 3]) -> Result<Self> {
        let grid = VoxelGridSpec {
            origin,
            voxel_size,
            extents,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit cells starting at the origin.
    pub fn unit(extents: [usize; 3]) -> Result<Self> {
        Self::new([0.0; 3], [1.0; 3], extents)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let s = self.voxel_size[axis];
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "voxel size {s} on axis {axis} must be positive"
                )));
            }
            if self.extents[axis] == 0 {
                return Err(Error::InvalidGrid(format!("extent on axis {axis} is zero")));
            }
            if self.extents[axis] > i32::MAX as usize {
                return Err(Error::InvalidGrid(format!(
                    "extent on axis {axis} too large"
                )));
            }
            if !self.origin[axis].is_finite() {
                return Err(Error::InvalidGrid("non-finite origin".into()));
            }
        }
        Ok(())
    }

    pub fn num_cells(&self) -> u64 {
        self.extents.iter().map(|&e| e as u64).product()
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.as_array()
            .iter()
            .zip(self.extents)
            .all(|(&v, e)| v >= 0 && (v as usize) < e)
    }

    /// Row-major key with x varying slowest: `(x * ey + y) * ez + z`.
    pub fn linearize(&self, c: VoxelCoord) -> Result<u64> {
        if !self.contains(c) {
            return Err(self.out_of_range(c));
        }
        Ok(self.key_unchecked(c))
    }

    pub(crate) fn key_unchecked(&self, c: VoxelCoord) -> u64 {
        let [_, ey, ez] = self.extents;
        (c.x as u64 * ey as u64 + c.y as u64) * ez as u64 + c.z as u64
    }

    pub fn delinearize(&self, key: u64) -> Result<VoxelCoord> {
        if key >= self.num_cells() {
            return Err(Error::OutOfRange {
                coord: [key as i64, 0, 0],
                extents: self.extents,
            });
        }
        let [_, ey, ez] = self.extents.map(|e| e as u64);
        let z = key % ez;
        let y = (key / ez) % ey;
        let x = key / (ey * ez);
        Ok(VoxelCoord::new(x as i32, y as i32, z as i32))
    }

    /// Cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<VoxelCoord> {
        let mut c = [0i32; 3];
        for axis in 0..3 {
            let rel = ((p[axis] - self.origin[axis]) / self.voxel_size[axis]).floor();
            if !(rel >= 0.0 && rel < self.extents[axis] as f64) {
                return None;
            }
            c[axis] = rel as i32;
        }
        Some(c.into())
    }

    pub fn cell_min(&self, c: VoxelCoord) -> [f64; 3] {
        let c = c.as_array();
        std::array::from_fn(|a| self.origin[a] + c[a] as f64 * self.voxel_size[a])
    }

    pub fn cell_max(&self, c: VoxelCoord) -> [f64; 3] {
        let c = c.as_array();
        std::array::from_fn(|a| self.origin[a] + (c[a] + 1) as f64 * self.voxel_size[a])
    }

    pub fn cell_center(&self, c: VoxelCoord) -> [f64; 3] {
        let c = c.as_array();
        std::array::from_fn(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }

    fn out_of_range(&self, c: VoxelCoord) -> Error {
        Error::OutOfRange {
            coord: c.as_array().map(i64::from),
            extents: self.extents,
        }
    }
}

/// Active voxel coordinates with a row-major `N x C` feature matrix.
///
/// Coordinates are pairwise distinct and inside the grid. A sorted key index
/// backs [`SparseVoxelTensor::coord_lookup`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    grid: VoxelGridSpec,
    coords: Vec<VoxelCoord>,
    feats: Vec<f64>,
    channels: usize,
    index: Vec<(u64, u32)>,
}

impl SparseVoxelTensor {
    pub fn new(
        grid: VoxelGridSpec,
        coords: Vec<VoxelCoord>,
        feats: Vec<f64>,
        channels: usize,
    ) -> Result<Self> {
        grid.validate()?;
        if coords.len() > u32::MAX as usize {
            return Err(Error::InvalidTensor("too many voxels".into()));
        }
        if feats.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} coordinates with {channels} channels need {} features, got {}",
                coords.len(),
                coords.len() * channels,
                feats.len()
            )));
        }
        let mut index = Vec::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            if !grid.contains(c) {
                return Err(grid.out_of_range(c));
            }
            index.push((grid.key_unchecked(c), row as u32));
        }
        index.sort_unstable();
        if let Some(w) = index.windows(2).find(|w| w[0].0 == w[1].0) {
            let c = coords[w[0].1 as usize];
            return Err(Error::InvalidTensor(format!("duplicate coordinate {c}")));
        }
        Ok(SparseVoxelTensor {
            grid,
            coords,
            feats,
            channels,
            index,
        })
    }

    pub fn empty(grid: VoxelGridSpec, channels: usize) -> Result<Self> {
        Self::new(grid, Vec::new(), Vec::new(), channels)
    }

    /// Build from (coordinate, feature row) pairs.
    pub fn from_rows<I>(grid: VoxelGridSpec, channels: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (VoxelCoord, Vec<f64>)>,
    {
        let mut coords = Vec::new();
        let mut feats = Vec::new();
        for (c, f) in rows {
            if f.len() != channels {
                return Err(Error::Shape(format!(
                    "row at {c} has {} channels, expected {channels}",
                    f.len()
                )));
            }
            coords.push(c);
            feats.extend(f);
        }
        Self::new(grid, coords, feats, channels)
    }

    pub fn grid(&self) -> &VoxelGridSpec {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn coord(&self, row: usize) -> VoxelCoord {
        self.coords[row]
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.feats[row * self.channels..(row + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = (VoxelCoord, &[f64])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.feats.chunks_exact(self.channels.max(1)))
    }

    /// Row holding `c`, if active. Out-of-grid coordinates are simply absent.
    pub fn coord_lookup(&self, c: VoxelCoord) -> Option<usize> {
        if !self.grid.contains(c) {
            return None;
        }
        let key = self.grid.key_unchecked(c);
        self.index
            .binary_search_by_key(&key, |&(k, _)| k)
            .ok()
            .map(|pos| self.index[pos].1 as usize)
    }

    /// Same active set with a replacement feature matrix.
    pub fn with_features(&self, feats: Vec<f64>, channels: usize) -> Result<Self> {
        if feats.len() != self.len() * channels {
            return Err(Error::Shape(format!(
                "{} voxels with {channels} channels need {} features, got {}",
                self.len(),
                self.len() * channels,
                feats.len()
            )));
        }
        Ok(SparseVoxelTensor {
            grid: self.grid,
            coords: self.coords.clone(),
            feats,
            channels,
            index: self.index.clone(),
        })
    }

    /// Sub-tensor made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let coords = rows.iter().map(|&r| self.coords[r]).collect();
        let feats = rows
            .iter()
            .flat_map(|&r| self.row(r).iter().copied())
            .collect();
        Self::new(self.grid, coords, feats, self.channels)
    }

    /// Whether coordinates are already in lexicographic order.
    pub fn is_sorted(&self) -> bool {
        self.coords.windows(2).all(|w| w[0] < w[1])
    }

    pub fn into_parts(self) -> (VoxelGridSpec, Vec<VoxelCoord>, Vec<f64>, usize) {
        (self.grid, self.coords, self.feats, self.channels)
    }
}

/// Per-cell feature encoder used by [`voxelize`].
///
/// Points arrive sorted by position and intensity, so any encoder built from
/// sums and counts is independent of input order.
pub trait FeatureRecipe {
    fn channels(&self) -> usize;

    fn encode(&self, cell_center: [f64; 3], points: &[Point], out: &mut [f64]);
}

/// Mean intensity, point count, and mean offset from the cell center.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanIntensityRecipe;

impl MeanIntensityRecipe {
    pub const INTENSITY: usize = 0;
    pub const COUNT: usize = 1;
}

impl FeatureRecipe for MeanIntensityRecipe {
    fn channels(&self) -> usize {
        5
    }

    fn encode(&self, center: [f64; 3], points: &[Point], out: &mut [f64]) {
        let n = points.len() as f64;
        let mut sum = [0.0f64; 4];
        for p in points {
            sum[0] += p.intensity;
            sum[1] += p.x - center[0];
            sum[2] += p.y - center[1];
            sum[3] += p.z - center[2];
        }
        out[0] = sum[0] / n;
        out[1] = n;
        out[2] = sum[1] / n;
        out[3] = sum[2] / n;
        out[4] = sum[3] / n;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub tensor: SparseVoxelTensor,
    /// Points outside the grid or with non-finite fields.
    pub dropped: usize,
}

/// Aggregate points into occupied cells, one row per cell in lexicographic
/// coordinate order.
pub fn voxelize<R: FeatureRecipe + ?Sized>(
    points: &[Point],
    grid: &VoxelGridSpec,
    recipe: &R,
) -> Result<Voxelized> {
    grid.validate()?;
    let mut cells: BTreeMap<VoxelCoord, Vec<Point>> = BTreeMap::new();
    let mut dropped = 0;
    for p in points {
        match p.is_finite().then(|| grid.cell_of(p.position())).flatten() {
            Some(c) => cells.entry(c).or_default().push(*p),
            None => dropped += 1,
        }
    }

    let channels = recipe.channels();
    let mut coords = Vec::with_capacity(cells.len());
    let mut feats = vec![0.0; cells.len() * channels];
    for (row, (c, mut pts)) in cells.into_iter().enumerate() {
        pts.sort_by(|a, b| {
            a.x.total_cmp(&b.x)
                .then(a.y.total_cmp(&b.y))
                .then(a.z.total_cmp(&b.z))
                .then(a.intensity.total_cmp(&b.intensity))
        });
        recipe.encode(
            grid.cell_center(c),
            &pts,
            &mut feats[row * channels..(row + 1) * channels],
        );
        coords.push(c);
    }
    Ok(Voxelized {
        tensor: SparseVoxelTensor::new(*grid, coords, feats, channels)?,
        dropped,
    })
}

pub fn linearize(coord: VoxelCoord, grid: &VoxelGridSpec) -> Result<u64> {
    grid.linearize(coord)
}

pub fn coord_lookup(tensor: &SparseVoxelTensor, coord: VoxelCoord) -> Option<usize> {
    tensor.coord_lookup(coord)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64, z: f64, i: f64) -> Point {
        Point::new(x, y, z, i).unwrap()
    }

    #[test]
    fn empty_cloud_gives_empty_tensor() {
        let grid = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let v = voxelize(&[], &grid, &MeanIntensityRecipe).unwrap();
        assert!(v.tensor.is_empty());
        assert_eq!(v.dropped, 0);
    }

    #[test]
    fn point_at_origin() {
        let grid = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let v = voxelize(&[pt(0.0, 0.0, 0.0, 0.5)], &grid, &MeanIntensityRecipe).unwrap();
        assert_eq!(v.tensor.coords(), &[VoxelCoord::new(0, 0, 0)]);
        assert_eq!(v.tensor.row(0)[MeanIntensityRecipe::COUNT], 1.0);
    }

    #[test]
    fn shared_cell_mean_intensity() {
        let grid = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let pts = [pt(1.2, 1.3, 1.4, 0.2), pt(1.7, 1.1, 1.9, 0.6)];
        let v = voxelize(&pts, &grid, &MeanIntensityRecipe).unwrap();
        assert_eq!(v.tensor.len(), 1);
        let row = v.tensor.row(0);
        assert!((row[0] - 0.4).abs() < 1e-15);
        assert_eq!(row[1], 2.0);
        // mean x = 1.45, cell center 1.5
        assert!((row[2] + 0.05).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_points_are_counted() {
        let grid = VoxelGridSpec::unit([2, 2, 2]).unwrap();
        let pts = [
            pt(0.5, 0.5, 0.5, 0.1),
            pt(-0.1, 0.5, 0.5, 0.1),
            pt(2.0, 0.5, 0.5, 0.1),
        ];
        let v = voxelize(&pts, &grid, &MeanIntensityRecipe).unwrap();
        assert_eq!(v.tensor.len(), 1);
        assert_eq!(v.dropped, 2);
    }

    #[test]
    fn non_positive_voxel_size_rejected() {
        assert!(matches!(
            VoxelGridSpec::new([0.0; 3], [1.0, 0.0, 1.0], [2, 2, 2]),
            Err(Error::InvalidGrid(_))
        ));
        let bad = VoxelGridSpec {
            origin: [0.0; 3],
            voxel_size: [-1.0, 1.0, 1.0],
            extents: [2, 2, 2],
        };
        assert!(matches!(
            voxelize(&[], &bad, &MeanIntensityRecipe),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn linearize_examples() {
        let g = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        assert_eq!(g.linearize(VoxelCoord::new(0, 0, 0)).unwrap(), 0);
        assert_eq!(g.linearize(VoxelCoord::new(0, 0, 1)).unwrap(), 1);
        assert_eq!(g.linearize(VoxelCoord::new(1, 2, 3)).unwrap(), 27);
        assert!(matches!(
            g.linearize(VoxelCoord::new(4, 0, 0)),
            Err(Error::OutOfRange { .. })
        ));
        assert!(g.linearize(VoxelCoord::new(0, -1, 0)).is_err());
    }

    #[test]
    fn linearize_roundtrip_exhaustive() {
        let g = VoxelGridSpec::unit([3, 5, 2]).unwrap();
        let mut seen = vec![false; g.num_cells() as usize];
        for x in 0..3 {
            for y in 0..5 {
                for z in 0..2 {
                    let c = VoxelCoord::new(x, y, z);
                    let k = g.linearize(c).unwrap();
                    assert!(!seen[k as usize]);
                    seen[k as usize] = true;
                    assert_eq!(g.delinearize(k).unwrap(), c);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn lookup_matches_linear_scan() {
        let g = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let coords = vec![
            VoxelCoord::new(3, 0, 1),
            VoxelCoord::new(0, 2, 2),
            VoxelCoord::new(1, 1, 1),
        ];
        let t = SparseVoxelTensor::new(g, coords.clone(), vec![0.0; 3], 1).unwrap();
        for x in -1..5 {
            for y in -1..5 {
                for z in -1..5 {
                    let c = VoxelCoord::new(x, y, z);
                    let scan = coords.iter().position(|&k| k == c);
                    assert_eq!(t.coord_lookup(c), scan);
                }
            }
        }
        let empty = SparseVoxelTensor::empty(g, 1).unwrap();
        assert_eq!(empty.coord_lookup(VoxelCoord::new(0, 0, 0)), None);
    }

    #[test]
    fn tensor_invariants_enforced() {
        let g = VoxelGridSpec::unit([2, 2, 2]).unwrap();
        let dup = vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(0, 0, 0)];
        assert!(matches!(
            SparseVoxelTensor::new(g, dup, vec![0.0; 2], 1),
            Err(Error::InvalidTensor(_))
        ));
        assert!(matches!(
            SparseVoxelTensor::new(g, vec![VoxelCoord::new(2, 0, 0)], vec![0.0], 1),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            SparseVoxelTensor::new(g, vec![VoxelCoord::new(1, 0, 0)], vec![0.0; 2], 1),
            Err(Error::Shape(_))
        ));
    }
}
