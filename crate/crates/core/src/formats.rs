//! Binary file formats: headerless point clouds, kernel weight files and
//! pixel feature grids. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::PixelFeatureGrid;
use crate::spconv::KernelSpec;
use crate::voxel::Point;

pub const KERNEL_MAGIC: u32 = u32::from_le_bytes(*b"VXKW");
pub const PIXEL_MAGIC: u32 = u32::from_le_bytes(*b"VXPF");

const POINT_RECORD: usize = 16;

/// Decoded point cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Records whose intensity fell outside `[0, 1]` and was clamped.
    pub clamped: usize,
}

/// Parse `(x, y, z, intensity)` f32 records. Out-of-range intensities are
/// clamped to `[0, 1]`; non-finite values are rejected.
pub fn parse_points(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(POINT_RECORD) {
        return Err(Error::format(
            "point cloud",
            format!(
                "{} bytes is not a whole number of 16-byte records",
                bytes.len()
            ),
        ));
    }
    let mut cloud = PointCloud::default();
    for (i, rec) in bytes.chunks_exact(POINT_RECORD).enumerate() {
        let v: [f64; 4] = std::array::from_fn(|k| f64::from(f32_at(rec, 4 * k)));
        if !v[3].is_finite() {
            return Err(Error::format(
                "point cloud",
                format!("record {i} has intensity {}", v[3]),
            ));
        }
        let intensity = v[3].clamp(0.0, 1.0);
        if intensity != v[3] {
            cloud.clamped += 1;
        }
        let p = Point::new(v[0], v[1], v[2], intensity)
            .map_err(|_| Error::format("point cloud", format!("record {i} is not finite")))?;
        cloud.points.push(p);
    }
    Ok(cloud)
}

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    points
        .iter()
        .flat_map(|p| [p.x, p.y, p.z, p.intensity])
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_points(&read(path.as_ref())?)
}

pub fn write_points(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    write(path.as_ref(), &encode_points(points))
}

/// Header `magic, kx, ky, kz, c_in, c_out` as i32, then f32 weights in
/// `[tap][c_in][c_out]` order. Bias is not stored.
pub fn parse_kernel(bytes: &[u8]) -> Result<KernelSpec> {
    let header = header(bytes, 6, KERNEL_MAGIC, "kernel file")?;
    let size = [header[1], header[2], header[3]];
    let (cin, cout) = (header[4], header[5]);
    let n = size.iter().product::<usize>() * cin * cout;
    let body = &bytes[24..];
    if body.len() != 4 * n {
        return Err(Error::format(
            "kernel file",
            format!("expected {n} weights, found {} bytes", body.len()),
        ));
    }
    let weights = (0..n).map(|i| f64::from(f32_at(body, 4 * i))).collect();
    KernelSpec::new(size, cin, cout, weights, None)
}

pub fn encode_kernel(k: &KernelSpec) -> Vec<u8> {
    let [x, y, z] = k.size();
    let mut out = Vec::with_capacity(24 + 4 * k.weights().len());
    for v in [
        KERNEL_MAGIC as i32,
        x as i32,
        y as i32,
        z as i32,
        k.in_channels() as i32,
        k.out_channels() as i32,
    ] {
        out.extend(v.to_le_bytes());
    }
    out.extend(k.weights().iter().flat_map(|&w| (w as f32).to_le_bytes()));
    out
}

pub fn read_kernel(path: impl AsRef<Path>) -> Result<KernelSpec> {
    parse_kernel(&read(path.as_ref())?)
}

pub fn write_kernel(path: impl AsRef<Path>, k: &KernelSpec) -> Result<()> {
    write(path.as_ref(), &encode_kernel(k))
}

/// Header `magic, width, height, channels` as i32, then f32 features
/// (row-major, channel fastest), an f32 depth plane and one mask byte per
/// pixel (nonzero = valid).
pub fn parse_pixel_grid(bytes: &[u8]) -> Result<PixelFeatureGrid> {
    let header = header(bytes, 4, PIXEL_MAGIC, "pixel grid file")?;
    let (w, h, c) = (header[1], header[2], header[3]);
    let px = w * h;
    let expected = 16 + 4 * px * c + 4 * px + px;
    if bytes.len() != expected {
        return Err(Error::format(
            "pixel grid file",
            format!("{w}x{h}x{c} needs {expected} bytes, found {}", bytes.len()),
        ));
    }
    let feats_at = 16;
    let depth_at = feats_at + 4 * px * c;
    let mask_at = depth_at + 4 * px;
    let feats = (0..px * c)
        .map(|i| f64::from(f32_at(bytes, feats_at + 4 * i)))
        .collect();
    let depth = (0..px)
        .map(|i| f64::from(f32_at(bytes, depth_at + 4 * i)))
        .collect();
    let valid = bytes[mask_at..].iter().map(|&b| b != 0).collect();
    PixelFeatureGrid::new(w, h, c, feats, depth, valid)
}

pub fn encode_pixel_grid(g: &PixelFeatureGrid) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [
        PIXEL_MAGIC as i32,
        g.width() as i32,
        g.height() as i32,
        g.channels() as i32,
    ] {
        out.extend(v.to_le_bytes());
    }
    out.extend(g.feats().iter().flat_map(|&v| (v as f32).to_le_bytes()));
    out.extend(g.depth().iter().flat_map(|&v| (v as f32).to_le_bytes()));
    out.extend(g.valid().iter().map(|&b| u8::from(b)));
    out
}

pub fn read_pixel_grid(path: impl AsRef<Path>) -> Result<PixelFeatureGrid> {
    parse_pixel_grid(&read(path.as_ref())?)
}

pub fn write_pixel_grid(path: impl AsRef<Path>, g: &PixelFeatureGrid) -> Result<()> {
    write(path.as_ref(), &encode_pixel_grid(g))
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().expect("4-byte slice"))
}

/// Read `count` i32 header fields, check the magic and require the rest to be
/// positive.
fn header(bytes: &[u8], count: usize, magic: u32, what: &'static str) -> Result<Vec<usize>> {
    if bytes.len() < 4 * count {
        return Err(Error::format(what, "truncated header"));
    }
    let raw: Vec<i32> = (0..count)
        .map(|i| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4-byte slice")))
        .collect();
    if raw[0] as u32 != magic {
        return Err(Error::format(
            what,
            format!("bad magic {:#010x}", raw[0] as u32),
        ));
    }
    let mut out = vec![0];
    for &v in &raw[1..] {
        if v <= 0 {
            return Err(Error::format(
                what,
                format!("header field {v} must be positive"),
            ));
        }
        out.push(v as usize);
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
