//! World-anchored voxel feature grids and the geometric operations on them:
//! rendering, unprojection, ray-marched projection, crop/resize and DRAW.
//!
//! Storage is channel-major with `x` fastest: `((c * D + z) * H + y) * W + x`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{shape_ray_interval, slab_interval, Box3D, Camera, Vec3};
use crate::vocab::{decode_rgb, surface_rgb, Color, Material, ObjectAttrs};
use crate::{Error, Result};

pub const GRID_RES: usize = 64;
pub const GRID_CHANNELS: usize = 32;
pub const GRID_EXTENT: f64 = 6.0;
pub const OBJ_RES: usize = 16;

/// Channel layout of every feature vector.
pub mod ch {
    pub const OCC: usize = 0;
    pub const COLOR: usize = 1;
    pub const N_COLOR: usize = 8;
    pub const MATERIAL: usize = 9;
    pub const N_MATERIAL: usize = 2;
    pub const SHAPE: usize = 11;
    pub const N_SHAPE: usize = 4;
    pub const SIZE: usize = 15;
    pub const N_SIZE: usize = 2;
    /// 1 where an observed surface point was written by unprojection.
    pub const SURFACE: usize = 17;
    /// Mean position of the observed surface points inside the voxel, in voxel units (3 channels).
    pub const SURFACE_POS: usize = 18;
    /// First reserved (always zero) channel.
    pub const RESERVED: usize = 21;
}

/// Occupancy above which a voxel counts as solid.
pub const OCC_THRESHOLD: f32 = 0.5;

/// Resolution, channel count and placement of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// (W, H, D) voxels along x, y, z.
    pub dims: [usize; 3],
    pub channels: usize,
    /// World position of the grid's minimum corner.
    pub origin: Vec3,
    pub pitch: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::centered(GRID_RES, GRID_CHANNELS, GRID_EXTENT)
    }
}

impl GridSpec {
    /// Cubic grid of `res` voxels per side spanning `[-extent/2, extent/2]^3`.
    pub fn centered(res: usize, channels: usize, extent: f64) -> Self {
        Self {
            dims: [res; 3],
            channels,
            origin: Vec3::repeat(-extent / 2.0),
            pitch: extent / res as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2] * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> Box3D {
        let size = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.pitch;
        Box3D::from_min_max(self.origin, self.origin + size)
    }

    /// Continuous voxel coordinates: voxel `i` spans `[i, i + 1)`.
    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.pitch
    }

    pub fn voxel_to_world(&self, v: &Vec3) -> Vec3 {
        self.origin + v * self.pitch
    }

    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let v = self.world_to_voxel(p);
        let mut out = [0; 3];
        for k in 0..3 {
            let f = v[k].floor();
            if f < 0.0 || f >= self.dims[k] as f64 {
                return None;
            }
            out[k] = f as usize;
        }
        Some(out)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.voxel_to_world(&Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5))
    }
}

#[inline]
fn flat(dims: [usize; 3], c: usize, x: usize, y: usize, z: usize) -> usize {
    ((c * dims[2] + z) * dims[1] + y) * dims[0] + x
}

/// The scene map `M`: a world-anchored W x H x D x C feature array.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatureGrid {
    pub spec: GridSpec,
    pub data: Vec<f32>,
}

impl SceneFeatureGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            data: vec![0.0; spec.len()],
            spec,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        flat(self.spec.dims, c, x, y, z)
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spec.dims.iter().product::<usize>();
        &self.data[c * n..(c + 1) * n]
    }

    /// Feature vector of one voxel.
    pub fn feature(&self, x: usize, y: usize, z: usize) -> Vec<f32> {
        (0..self.spec.channels).map(|c| self.get(c, x, y, z)).collect()
    }

    /// Voxel indices whose occupancy exceeds the threshold.
    pub fn occupied(&self) -> Vec<[usize; 3]> {
        let [w, h, d] = self.spec.dims;
        let occ = self.channel(ch::OCC);
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if occ[(z * h + y) * w + x] > OCC_THRESHOLD {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &SceneFeatureGrid) {
        assert_eq!(self.spec.dims, other.spec.dims);
        assert_eq!(self.spec.channels, other.spec.channels);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// `SFG1` magic, W, H, D, C as u32 and the pitch as f32 (all little-endian),
    /// then the values as f32 in storage order. The grid is assumed centered on
    /// the world origin.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"SFG1")?;
        for v in [self.spec.dims[0], self.spec.dims[1], self.spec.dims[2], self.spec.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.spec.pitch as f32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)?;
        if &header[..4] != b"SFG1" {
            return Err(Error::Invalid("not a feature grid file".into()));
        }
        let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        let dims = [word(0), word(1), word(2)];
        let channels = word(3);
        let pitch = f32::from_le_bytes(header[20..24].try_into().unwrap()) as f64;
        let pitch = if pitch > 0.0 {
            pitch
        } else {
            GRID_EXTENT / dims[0].max(1) as f64
        };
        let origin = -Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * pitch / 2.0;
        let spec = GridSpec {
            dims,
            channels,
            origin,
            pitch,
        };
        let mut bytes = vec![0u8; spec.len() * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self { spec, data })
    }
}

/// Cubic block of features with the nominal world size of the object it depicts.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTensor {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// `s^o`: full world-space extent per axis.
    pub size: Vec3,
}

impl ObjectTensor {
    pub fn zeros(size: Vec3) -> Self {
        Self::filled(size, 0.0)
    }

    pub fn filled(size: Vec3, v: f32) -> Self {
        assert!(size.iter().all(|s| *s > 0.0));
        Self {
            res: OBJ_RES,
            channels: GRID_CHANNELS,
            data: vec![v; OBJ_RES * OBJ_RES * OBJ_RES * GRID_CHANNELS],
            size,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.res; 3]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        flat(self.dims(), c, x, y, z)
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn voxels(&self) -> usize {
        self.res * self.res * self.res
    }

    /// World position of voxel center `(x, y, z)` for an object centered at `center`.
    pub fn voxel_center(&self, center: &Vec3, x: usize, y: usize, z: usize) -> Vec3 {
        let n = self.res as f64;
        let q = Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) / n - Vec3::repeat(0.5);
        center + q.component_mul(&self.size)
    }
}

/// A resampled block ready to be added into a grid of the same pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VoxelBlock {
    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[flat(self.dims, c, x, y, z)]
    }
}

/// One axis of a trilinear lookup: lower index, upper index, weight of the upper.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w: f32,
}

/// Clamp-to-edge linear taps for continuous coordinates in voxel-center units
/// (voxel `i` has its center at `i`).
fn taps(coords: impl Iterator<Item = f64>, n: usize) -> Vec<Tap> {
    coords
        .map(|g| {
            let g = g.clamp(0.0, (n - 1) as f64);
            let i0 = g.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            Tap {
                i0,
                i1,
                w: (g - i0 as f64) as f32,
            }
        })
        .collect()
}

/// Separable trilinear resampling with per-axis taps.
fn resample(src: &[f32], src_dims: [usize; 3], channels: usize, t: &[Vec<Tap>; 3]) -> Vec<f32> {
    let out_dims = [t[0].len(), t[1].len(), t[2].len()];
    let mut out = vec![0.0f32; out_dims.iter().product::<usize>() * channels];
    let lerp = |a: f32, b: f32, w: f32| if w == 0.0 { a } else { a + (b - a) * w };
    out.par_chunks_mut(out_dims[0] * out_dims[1] * out_dims[2])
        .enumerate()
        .for_each(|(c, block)| {
            for (z, tz) in t[2].iter().enumerate() {
                for (y, ty) in t[1].iter().enumerate() {
                    for (x, tx) in t[0].iter().enumerate() {
                        let s = |xx: usize, yy: usize, zz: usize| src[flat(src_dims, c, xx, yy, zz)];
                        let c00 = lerp(s(tx.i0, ty.i0, tz.i0), s(tx.i1, ty.i0, tz.i0), tx.w);
                        let c10 = lerp(s(tx.i0, ty.i1, tz.i0), s(tx.i1, ty.i1, tz.i0), tx.w);
                        let c01 = lerp(s(tx.i0, ty.i0, tz.i1), s(tx.i1, ty.i0, tz.i1), tx.w);
                        let c11 = lerp(s(tx.i0, ty.i1, tz.i1), s(tx.i1, ty.i1, tz.i1), tx.w);
                        let c0 = lerp(c00, c10, ty.w);
                        let c1 = lerp(c01, c11, ty.w);
                        block[(z * out_dims[1] + y) * out_dims[0] + x] = lerp(c0, c1, tz.w);
                    }
                }
            }
        });
    out
}

/// Trilinear crop of the sub-grid under `b` to a 16^3 object tensor with `s^o = 2 * half_extent`.
pub fn crop_and_resize(grid: &SceneFeatureGrid, b: &Box3D) -> Result<ObjectTensor> {
    if grid.spec.bounds().intersection_volume(b) <= 0.0 {
        return Err(Error::Geometry(format!(
            "crop box at {:?} does not overlap the grid",
            b.center.as_slice()
        )));
    }
    let n = OBJ_RES;
    let lo = grid.spec.world_to_voxel(&b.min());
    let size = b.size() / grid.spec.pitch;
    let t: [Vec<Tap>; 3] = std::array::from_fn(|k| {
        taps(
            (0..n).map(|i| lo[k] + (i as f64 + 0.5) / n as f64 * size[k] - 0.5),
            grid.spec.dims[k],
        )
    });
    Ok(ObjectTensor {
        res: n,
        channels: grid.spec.channels,
        data: resample(&grid.data, grid.spec.dims, grid.spec.channels, &t),
        size: b.size(),
    })
}

/// Number of voxels spanned by a world length at the given pitch.
pub fn voxel_extent(len: f64, pitch: f64) -> usize {
    ((len / pitch).round() as usize).max(1)
}

/// Trilinear scaling of a tensor to the voxel extent implied by world size `s`.
pub fn resize(t: &ObjectTensor, s: &Vec3, pitch: f64) -> VoxelBlock {
    assert!(s.iter().all(|v| *v > 0.0), "resize needs a positive size");
    let dims: [usize; 3] = std::array::from_fn(|k| voxel_extent(s[k], pitch));
    let taps: [Vec<Tap>; 3] = std::array::from_fn(|k| {
        let m = dims[k];
        taps(
            (0..m).map(|i| (i as f64 + 0.5) / m as f64 * t.res as f64 - 0.5),
            t.res,
        )
    });
    VoxelBlock {
        dims,
        channels: t.channels,
        data: resample(&t.data, t.dims(), t.channels, &taps),
    }
}

/// Grid index of the first voxel of a block of `dims` centered at world `location`.
pub fn block_origin(spec: &GridSpec, dims: [usize; 3], location: &Vec3) -> [i64; 3] {
    let v = spec.world_to_voxel(location);
    std::array::from_fn(|k| (v[k] - dims[k] as f64 / 2.0).round() as i64)
}

/// Adds `block` into `canvas` centered at `location`, clipping at the canvas boundary.
/// Returns the number of block voxels that fell outside.
pub fn draw_block(canvas: &mut SceneFeatureGrid, block: &VoxelBlock, location: &Vec3) -> usize {
    assert_eq!(canvas.spec.channels, block.channels);
    let start = block_origin(&canvas.spec, block.dims, location);
    let gd = canvas.spec.dims;
    let mut clipped = 0;
    for z in 0..block.dims[2] {
        for y in 0..block.dims[1] {
            for x in 0..block.dims[0] {
                let g = [start[0] + x as i64, start[1] + y as i64, start[2] + z as i64];
                if (0..3).any(|k| g[k] < 0 || g[k] >= gd[k] as i64) {
                    clipped += 1;
                    continue;
                }
                let (gx, gy, gz) = (g[0] as usize, g[1] as usize, g[2] as usize);
                for c in 0..block.channels {
                    let i = flat(gd, c, gx, gy, gz);
                    canvas.data[i] += block.get(c, x, y, z);
                }
            }
        }
    }
    if clipped > 0 {
        log::debug!("draw clipped {clipped} voxels at the canvas boundary");
    }
    clipped
}

/// DRAW: resize `t` to its own size and add it into `canvas` at `location`.
pub fn draw_into(canvas: &mut SceneFeatureGrid, t: &ObjectTensor, location: &Vec3) {
    let block = resize(t, &t.size, canvas.spec.pitch);
    draw_block(canvas, &block, location);
}

/// Value form of [`draw_into`].
pub fn draw(mut canvas: SceneFeatureGrid, t: &ObjectTensor, location: &Vec3) -> SceneFeatureGrid {
    draw_into(&mut canvas, t, location);
    canvas
}

/// An RGB-D image; depth is the distance along the pixel ray, 0 for no hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
}

impl RgbdImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![[0.0; 3]; width * height],
            depth: vec![0.0; width * height],
        }
    }

    pub fn foreground(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        for p in &self.rgb {
            let b = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            w.write_all(&b)?;
        }
        w.flush()?;
        Ok(())
    }

    /// 16-bit PGM of depth in millimetres (big-endian samples, as netpbm requires).
    pub fn write_depth_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for d in &self.depth {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            w.write_all(&mm.to_be_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an image pair written by [`write_ppm`](Self::write_ppm) and
    /// [`write_depth_pgm`](Self::write_depth_pgm).
    pub fn read(rgb_path: impl AsRef<Path>, depth_path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, max, rgb) = read_netpbm(rgb_path.as_ref(), b"P6")?;
        let (dw, dh, dmax, depth) = read_netpbm(depth_path.as_ref(), b"P5")?;
        if (w, h) != (dw, dh) || max != 255 || dmax != 65535 {
            return Err(Error::Invalid("mismatched rgb/depth images".into()));
        }
        Ok(Self {
            width: w,
            height: h,
            rgb: rgb
                .chunks_exact(3)
                .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
                .collect(),
            depth: depth
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 1000.0)
                .collect(),
        })
    }
}

fn read_netpbm(path: &Path, magic: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || Error::Invalid(format!("malformed netpbm file {}", path.display()));
    if !bytes.starts_with(magic) {
        return Err(bad());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], bytes.get(pos..).ok_or_else(bad)?.to_vec()))
}

/// A physical object: its box and full attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub attrs: ObjectAttrs,
}

/// Nearest hit of a ray against the objects' solid shapes: `(distance, object index)`.
pub fn first_hit(objects: &[SceneObject], origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, o) in objects.iter().enumerate() {
        if let Some((t0, t1)) = shape_ray_interval(o.attrs.shape, &o.bbox, origin, dir) {
            if t1 < 0.0 {
                continue;
            }
            let t = t0.max(0.0);
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Ground-truth renderer: nearest ray/solid intersection per pixel.
pub fn render_scene(objects: &[SceneObject], cam: &Camera) -> RgbdImage {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let origin = cam.position();
    let mut img = RgbdImage::blank(w, h);
    img.rgb
        .par_chunks_mut(w)
        .zip(img.depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (rgb_row, depth_row))| {
            for u in 0..w {
                let dir = cam.pixel_dir(u, v);
                if let Some((t, i)) = first_hit(objects, &origin, &dir) {
                    depth_row[u] = t as f32;
                    rgb_row[u] = surface_rgb(objects[i].attrs.color, objects[i].attrs.material);
                }
            }
        });
    img
}

/// Back-projects every pixel with depth into the grid: occupancy 1 plus color and
/// material one-hots decoded from the pixel color, and the surface point itself.
/// Voxels hit by several pixels hold the average of their features.
pub fn unproject(img: &RgbdImage, cam: &Camera, spec: &GridSpec) -> Result<SceneFeatureGrid> {
    unproject_views(&[(img, cam)], spec)
}

/// Fuses several calibrated views into one grid by averaging all back-projected
/// points that land in each voxel.
pub fn unproject_views(views: &[(&RgbdImage, &Camera)], spec: &GridSpec) -> Result<SceneFeatureGrid> {
    assert!(spec.channels > ch::SURFACE_POS + 2, "grid lacks the surface channels");
    let mut grid = SceneFeatureGrid::zeros(*spec);
    let n_vox = spec.dims.iter().product::<usize>();
    let mut counts = vec![0u32; n_vox];
    let mut hits = 0usize;
    let mut inside = 0usize;
    for (img, cam) in views {
        assert_eq!((img.width, img.height), (cam.intrinsics.width, cam.intrinsics.height));
        let origin = cam.position();
        for v in 0..img.height {
            for u in 0..img.width {
                let d = img.depth[v * img.width + u];
                if d <= 0.0 {
                    continue;
                }
                hits += 1;
                let p = origin + cam.pixel_dir(u, v) * d as f64;
                let Some([x, y, z]) = spec.voxel_of(&p) else {
                    continue;
                };
                inside += 1;
                let (color, material) = decode_rgb(img.rgb[v * img.width + u]);
                counts[(z * spec.dims[1] + y) * spec.dims[0] + x] += 1;
                for c in [ch::OCC, ch::COLOR + color.index(), ch::MATERIAL + material.index(), ch::SURFACE] {
                    let i = grid.index(c, x, y, z);
                    grid.data[i] += 1.0;
                }
                let local = spec.world_to_voxel(&p) - Vec3::new(x as f64, y as f64, z as f64);
                for k in 0..3 {
                    let i = grid.index(ch::SURFACE_POS + k, x, y, z);
                    grid.data[i] += local[k] as f32;
                }
            }
        }
    }
    if hits > 0 && inside == 0 {
        return Err(Error::Geometry("every back-projected point lies outside the grid".into()));
    }
    for (c, chunk) in grid.data.chunks_mut(n_vox).enumerate().take(ch::RESERVED) {
        if (ch::SHAPE..ch::SURFACE).contains(&c) {
            continue;
        }
        for (val, &n) in chunk.iter_mut().zip(&counts) {
            if n > 1 {
                *val /= n as f32;
            }
        }
    }
    Ok(grid)
}

/// Argmax over a channel group; `None` when the group is all zero or tied at the top.
fn group_argmax(f: &[f32], start: usize, len: usize) -> Option<usize> {
    let g = &f[start..start + len];
    let max = g.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max <= 0.0 || g.iter().filter(|v| **v == max).count() > 1 {
        return None;
    }
    g.iter().position(|v| *v == max)
}

/// Color of a voxel feature vector; neutral gray when the color channels are ambiguous.
pub fn decode_feature_rgb(f: &[f32]) -> [f32; 3] {
    match group_argmax(f, ch::COLOR, ch::N_COLOR) {
        Some(c) => {
            let m = group_argmax(f, ch::MATERIAL, ch::N_MATERIAL).unwrap_or(Material::Metal.index());
            surface_rgb(Color::ALL[c], Material::ALL[m])
        }
        None => [0.5; 3],
    }
}

/// Ray-marches every pixel front to back at half-voxel steps; the first voxel with
/// occupancy above 0.5 is the hit and gives the color. Depth is the midpoint of the
/// ray's passage through the hit voxel.
///
/// Grids built by [`unproject`] also carry the observed surface point of each
/// voxel. There a voxel only counts as a hit when its point lies near the ray, and
/// the depth is that of the stored point nearest the ray just behind the hit.
pub fn project(grid: &SceneFeatureGrid, cam: &Camera) -> RgbdImage {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let spec = &grid.spec;
    let bounds = spec.bounds();
    let (lo, hi) = (bounds.min(), bounds.max());
    let origin = cam.position();
    let step = spec.pitch / 2.0;
    let occ = grid.channel(ch::OCC);
    let has_surface = spec.channels > ch::SURFACE_POS + 2;
    let mut img = RgbdImage::blank(w, h);
    img.rgb
        .par_chunks_mut(w)
        .zip(img.depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (rgb_row, depth_row))| {
            for u in 0..w {
                let dir = cam.pixel_dir(u, v);
                let Some((t0, t1)) = slab_interval(&lo, &hi, &origin, &dir) else {
                    continue;
                };
                let mut t = t0.max(0.0);
                // first plain hit (voxel without a stored point, or a point far from the ray)
                let mut plain: Option<(f64, [usize; 3])> = None;
                let mut accepted: Option<f64> = None;
                // (perpendicular distance, depth) of stored points near the ray
                let mut cands: Vec<(f64, f64)> = Vec::new();
                let mut last = [usize::MAX; 3];
                while t <= t1 {
                    if accepted.is_some_and(|ta| t > ta + SURFACE_SEARCH * spec.pitch) {
                        break;
                    }
                    if let Some(vox @ [x, y, z]) = spec.voxel_of(&(origin + dir * t)) {
                        if vox != last && occ[(z * spec.dims[1] + y) * spec.dims[0] + x] > OCC_THRESHOLD {
                            last = vox;
                            if has_surface && grid.get(ch::SURFACE, x, y, z) > 0.0 {
                                let local = Vec3::from_fn(|k, _| grid.get(ch::SURFACE_POS + k, x, y, z) as f64);
                                let p = spec.voxel_to_world(&(Vec3::new(x as f64, y as f64, z as f64) + local));
                                let along = (p - origin).dot(&dir);
                                let perp = (p - origin - dir * along).norm();
                                if perp <= SURFACE_RADIUS * spec.pitch {
                                    if accepted.is_none() {
                                        accepted = Some(t);
                                        rgb_row[u] = decode_feature_rgb(&grid.feature(x, y, z));
                                    }
                                    cands.push((perp, along));
                                } else if plain.is_none() {
                                    plain = Some((t, vox));
                                }
                            } else if accepted.is_none() {
                                plain.get_or_insert((t, vox));
                                break;
                            }
                        }
                    }
                    t += step;
                }
                if let Some(d) = surface_depth(&cands) {
                    depth_row[u] = d as f32;
                } else if let Some((tf, [x, y, z])) = plain {
                    let vlo = spec.voxel_to_world(&Vec3::new(x as f64, y as f64, z as f64));
                    let vhi = vlo + Vec3::repeat(spec.pitch);
                    let d = slab_interval(&vlo, &vhi, &origin, &dir).map_or(tf, |(a, b)| 0.5 * (a.max(0.0) + b));
                    depth_row[u] = d as f32;
                    rgb_row[u] = decode_feature_rgb(&grid.feature(x, y, z));
                }
            }
        });
    img
}

/// Depth of the stored point nearest the ray.
fn surface_depth(cands: &[(f64, f64)]) -> Option<f64> {
    cands.iter().min_by(|a, b| a.0.total_cmp(&b.0)).map(|c| c.1)
}

/// Stored surface points farther than this from a ray (in pitches) do not stop it.
const SURFACE_RADIUS: f64 = 0.5;

/// How far behind the first accepted voxel, in pitches, the projector gathers
/// stored surface points.
const SURFACE_SEARCH: f64 = 3.0;
