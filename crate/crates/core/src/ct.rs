//! CT preprocessing: raw HU volumes to the normalized slice groups the
//! detector consumes.
//!
//! The pipeline is window -> in-plane resample to 0.8mm -> z resample to
//! 2mm -> black-border clip. All steps are pure and deterministic, and the
//! geometric steps report the transform needed to carry annotation boxes
//! along.

use crate::det::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TARGET_PIXEL_SPACING_MM: f32 = 0.8;
pub const TARGET_SLICE_SPACING_MM: f32 = 2.0;
pub const DEFAULT_BORDER_THRESHOLD: f32 = 1.0;

/// Raw CT volume: int16 HU voxels, z-major, with physical spacing in mm.
#[derive(Clone, Debug)]
pub struct Volume {
    pub id: String,
    /// (nz, ny, nx)
    pub dims: (usize, usize, usize),
    /// (dz, dy, dx) in mm
    pub spacing: (f32, f32, f32),
    pub voxels: Vec<i16>,
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: (usize, usize, usize), spacing: (f32, f32, f32), voxels: Vec<i16>) -> Result<Self> {
        let (nz, ny, nx) = dims;
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::InvalidVolume(format!("dims must be >= 1 in every axis, got {dims:?}")));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0)
            || !spacing.0.is_finite()
            || !spacing.1.is_finite()
            || !spacing.2.is_finite()
        {
            return Err(Error::InvalidVolume(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        if voxels.len() != nz * ny * nx {
            return Err(Error::InvalidVolume(format!(
                "dims {dims:?} imply {} voxels, got {}",
                nz * ny * nx,
                voxels.len()
            )));
        }
        Ok(Volume { id: id.into(), dims, spacing, voxels })
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let (_, ny, nx) = self.dims;
        &self.voxels[z * ny * nx..(z + 1) * ny * nx]
    }
}

/// Real-valued volume on the [0,255] intensity scale produced by windowing.
#[derive(Clone, Debug)]
pub struct ImageVolume {
    pub id: String,
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: Vec<f32>,
}

impl ImageVolume {
    pub fn slice(&self, z: usize) -> &[f32] {
        let (_, ny, nx) = self.dims;
        &self.data[z * ny * nx..(z + 1) * ny * nx]
    }
}

/// Geometric changes applied by preprocessing, used to carry boxes and key
/// slices from raw-volume space into preprocessed space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessTransform {
    pub scale_x: f32,
    pub scale_y: f32,
    pub crop_x: usize,
    pub crop_y: usize,
    /// original dz divided by the target slice spacing
    pub z_factor: f32,
}

impl PreprocessTransform {
    pub fn apply_box(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale_x - self.crop_x as f32,
            b.y1 * self.scale_y - self.crop_y as f32,
            b.x2 * self.scale_x - self.crop_x as f32,
            b.y2 * self.scale_y - self.crop_y as f32,
        )
    }

    pub fn map_slice(&self, k: usize) -> usize {
        (k as f32 * self.z_factor).round() as usize
    }
}

/// Linear map (hu+1024)*255/4095 clamped to [0,255]; maps -1024 to 0 and
/// 3071 to 255 exactly.
pub fn window_hu(volume: &Volume) -> ImageVolume {
    let data = volume
        .voxels
        .iter()
        .map(|&hu| (((hu as f32 + 1024.0) * 255.0 / 4095.0).max(0.0)).min(255.0))
        .collect();
    ImageVolume { id: volume.id.clone(), dims: volume.dims, spacing: volume.spacing, data }
}

fn bilinear_sample(slice: &[f32], ny: usize, nx: usize, y: f32, x: f32) -> f32 {
    let xc = x.max(0.0).min((nx - 1) as f32);
    let yc = y.max(0.0).min((ny - 1) as f32);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let fx = xc - x0 as f32;
    let fy = yc - y0 as f32;
    let v00 = slice[y0 * nx + x0];
    let v01 = slice[y0 * nx + x1];
    let v10 = slice[y1 * nx + x0];
    let v11 = slice[y1 * nx + x1];
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    top + (bot - top) * fy
}

/// Bilinear in-plane resampling so the output pixel spacing is exactly
/// `target` mm. Output dims are round(dim * spacing / target); boxes must
/// be scaled by the returned (scale_x, scale_y) = out_dim / in_dim.
pub fn resample_inplane(vol: &ImageVolume, target: f32) -> Result<(ImageVolume, (f32, f32))> {
    let (nz, ny, nx) = vol.dims;
    let (dz, dy, dx) = vol.spacing;
    let ony = (ny as f32 * dy / target).round() as usize;
    let onx = (nx as f32 * dx / target).round() as usize;
    if ony == 0 || onx == 0 {
        return Err(Error::InvalidVolume(format!(
            "in-plane resample to {target}mm collapses dims ({ny}x{nx} at {dy}x{dx}mm)"
        )));
    }
    if ony == ny && onx == nx {
        let mut out = vol.clone();
        out.spacing = (dz, target, target);
        return Ok((out, (1.0, 1.0)));
    }
    let sy = ny as f32 / ony as f32;
    let sx = nx as f32 / onx as f32;
    let mut data = vec![0.0f32; nz * ony * onx];
    for z in 0..nz {
        let src = vol.slice(z);
        let dst = &mut data[z * ony * onx..(z + 1) * ony * onx];
        for oy in 0..ony {
            let yin = (oy as f32 + 0.5) * sy - 0.5;
            for ox in 0..onx {
                let xin = (ox as f32 + 0.5) * sx - 0.5;
                dst[oy * onx + ox] = bilinear_sample(src, ny, nx, yin, xin);
            }
        }
    }
    let out = ImageVolume { id: vol.id.clone(), dims: (nz, ony, onx), spacing: (dz, target, target), data };
    Ok((out, (onx as f32 / nx as f32, ony as f32 / ny as f32)))
}

/// Linear interpolation along z onto a grid of `target`-mm intervals
/// spanning the original extent: slice i sits at i*target mm from slice 0.
pub fn resample_z(vol: &ImageVolume, target: f32) -> Result<ImageVolume> {
    let (nz, ny, nx) = vol.dims;
    let (dz, dy, dx) = vol.spacing;
    if !(dz > 0.0) || !dz.is_finite() {
        return Err(Error::InvalidVolume(format!("slice interval must be known and positive, got {dz}")));
    }
    let extent = (nz - 1) as f32 * dz;
    let onz = (extent / target).floor() as usize + 1;
    let mut data = vec![0.0f32; onz * ny * nx];
    for oz in 0..onz {
        let pos = oz as f32 * target / dz;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(nz - 1);
        let frac = pos - lo as f32;
        let dst = &mut data[oz * ny * nx..(oz + 1) * ny * nx];
        let a = vol.slice(lo.min(nz - 1));
        if frac == 0.0 || lo == hi {
            dst.copy_from_slice(a);
        } else {
            let b = vol.slice(hi);
            for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                *d = va + (vb - va) * frac;
            }
        }
    }
    Ok(ImageVolume { id: vol.id.clone(), dims: (onz, ny, nx), spacing: (target, dy, dx), data })
}

/// Remove leading/trailing rows and columns whose maximum intensity across
/// the whole volume is below `threshold`. Returns (x, y) crop offsets so
/// boxes can be shifted consistently.
pub fn clip_borders(vol: &ImageVolume, threshold: f32) -> Result<(ImageVolume, (usize, usize))> {
    let (nz, ny, nx) = vol.dims;
    let mut col_max = vec![f32::NEG_INFINITY; nx];
    let mut row_max = vec![f32::NEG_INFINITY; ny];
    for z in 0..nz {
        let s = vol.slice(z);
        for y in 0..ny {
            for x in 0..nx {
                let v = s[y * nx + x];
                if v > col_max[x] {
                    col_max[x] = v;
                }
                if v > row_max[y] {
                    row_max[y] = v;
                }
            }
        }
    }
    let x0 = col_max.iter().position(|&v| v >= threshold);
    let y0 = row_max.iter().position(|&v| v >= threshold);
    let (Some(x0), Some(y0)) = (x0, y0) else {
        return Err(Error::InvalidVolume(format!("volume {} is fully black below threshold {threshold}", vol.id)));
    };
    let x1 = nx - 1 - col_max.iter().rev().position(|&v| v >= threshold).unwrap();
    let y1 = ny - 1 - row_max.iter().rev().position(|&v| v >= threshold).unwrap();
    if x0 == 0 && y0 == 0 && x1 == nx - 1 && y1 == ny - 1 {
        return Ok((vol.clone(), (0, 0)));
    }
    let (ony, onx) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut data = vec![0.0f32; nz * ony * onx];
    for z in 0..nz {
        let src = vol.slice(z);
        let dst = &mut data[z * ony * onx..(z + 1) * ony * onx];
        for y in 0..ony {
            let srow = &src[(y + y0) * nx + x0..(y + y0) * nx + x0 + onx];
            dst[y * onx..(y + 1) * onx].copy_from_slice(srow);
        }
    }
    let out = ImageVolume { id: vol.id.clone(), dims: (nz, ony, onx), spacing: vol.spacing, data };
    Ok((out, (x0, y0)))
}

/// Full preprocessing chain: window, resample in-plane to 0.8mm, resample
/// z to 2mm, clip black borders.
pub fn preprocess(volume: &Volume, border_threshold: f32) -> Result<(ImageVolume, PreprocessTransform)> {
    let windowed = window_hu(volume);
    let (inplane, (sx, sy)) = resample_inplane(&windowed, TARGET_PIXEL_SPACING_MM)?;
    let z_factor = volume.spacing.0 / TARGET_SLICE_SPACING_MM;
    let zres = resample_z(&inplane, TARGET_SLICE_SPACING_MM)?;
    let (clipped, (cx, cy)) = clip_borders(&zres, border_threshold)?;
    Ok((clipped, PreprocessTransform { scale_x: sx, scale_y: sy, crop_x: cx, crop_y: cy, z_factor }))
}

/// 3M consecutive slices around a key slice, packed as M 3-channel images
/// in z order. The key slice is the central channel of the central image.
#[derive(Clone, Debug)]
pub struct SliceGroup {
    pub m: usize,
    pub height: usize,
    pub width: usize,
    pub key_slice: usize,
    pub spacing: (f32, f32, f32),
    /// (M, 3, H, W) row-major
    pub data: Vec<f32>,
}

impl SliceGroup {
    pub fn new(m: usize, height: usize, width: usize, key_slice: usize, spacing: (f32, f32, f32), data: Vec<f32>) -> Result<Self> {
        if m % 2 == 0 || m == 0 {
            return Err(Error::invalid("SliceGroup", format!("M must be odd and >= 1, got {m}")));
        }
        if data.len() != m * 3 * height * width {
            return Err(Error::invalid(
                "SliceGroup",
                format!("expected {} values for {m} images of 3x{height}x{width}, got {}", m * 3 * height * width, data.len()),
            ));
        }
        Ok(SliceGroup { m, height, width, key_slice, spacing, data })
    }

    pub fn image_tensor(&self, i: usize) -> Tensor<f32> {
        let sz = 3 * self.height * self.width;
        Tensor::from_vec(vec![1, 3, self.height, self.width], self.data[i * sz..(i + 1) * sz].to_vec())
            .expect("slice group stores full images")
    }

    /// z coverage in mm: 3M slices at the slice spacing.
    pub fn coverage_mm(&self) -> f32 {
        (3 * self.m) as f32 * self.spacing.0
    }

    /// Slice indices (clamped to the volume) that fill each channel.
    pub fn slice_indices(m: usize, key: usize, nz: usize) -> Vec<usize> {
        let half = (3 * m as isize - 1) / 2;
        (-half..=half)
            .map(|off| (key as isize + off).clamp(0, nz as isize - 1) as usize)
            .collect()
    }
}

/// Select the 3M consecutive slices centered on `key_slice`; indices beyond
/// the volume replicate the nearest edge slice.
pub fn group_slices(vol: &ImageVolume, key_slice: usize, m: usize) -> Result<SliceGroup> {
    if m % 2 == 0 || m == 0 {
        return Err(Error::invalid("group_slices", format!("M must be odd and >= 1, got {m}")));
    }
    let (nz, ny, nx) = vol.dims;
    if key_slice >= nz {
        return Err(Error::invalid("group_slices", format!("key slice {key_slice} outside volume of {nz} slices")));
    }
    let (dz, dy, dx) = vol.spacing;
    let close = |a: f32, b: f32| (a - b).abs() < 1e-3;
    if !close(dz, TARGET_SLICE_SPACING_MM) || !close(dy, TARGET_PIXEL_SPACING_MM) || !close(dx, TARGET_PIXEL_SPACING_MM) {
        return Err(Error::invalid(
            "group_slices",
            format!("volume must be preprocessed to {TARGET_PIXEL_SPACING_MM}mm pixels / {TARGET_SLICE_SPACING_MM}mm slices, got {:?}", vol.spacing),
        ));
    }
    let indices = SliceGroup::slice_indices(m, key_slice, nz);
    let mut data = Vec::with_capacity(3 * m * ny * nx);
    for &z in &indices {
        data.extend_from_slice(vol.slice(z));
    }
    SliceGroup::new(m, ny, nx, key_slice, vol.spacing, data)
}

// ── CTVOL binary format ─────────────────────────────────────────────
//
// magic "CTVOL\0", version u32, nz/ny/nx u32, dz/dy/dx f32 (mm), then
// nz*ny*nx little-endian int16 HU values, z-major.

const VOLUME_MAGIC: &[u8; 6] = b"CTVOL\0";
const VOLUME_VERSION: u32 = 1;

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let show = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(&show, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&show, e);
    w.write_all(VOLUME_MAGIC).map_err(io)?;
    w.write_all(&VOLUME_VERSION.to_le_bytes()).map_err(io)?;
    for d in [vol.dims.0, vol.dims.1, vol.dims.2] {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    for s in [vol.spacing.0, vol.spacing.1, vol.spacing.2] {
        w.write_all(&s.to_le_bytes()).map_err(io)?;
    }
    for v in &vol.voxels {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let show = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&show, e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: &str| Error::Format { path: show.clone(), detail: detail.to_string() };

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != VOLUME_MAGIC {
        return Err(fmt("bad magic, not a CTVOL file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| fmt("truncated version"))?;
    let version = u32::from_le_bytes(b4);
    if version != VOLUME_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b4).map_err(|_| fmt("truncated dims"))?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        r.read_exact(&mut b4).map_err(|_| fmt("truncated spacing"))?;
        *s = f32::from_le_bytes(b4);
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut voxels = vec![0i16; n];
    let mut b2 = [0u8; 2];
    for v in &mut voxels {
        r.read_exact(&mut b2).map_err(|_| fmt("truncated voxel data"))?;
        *v = i16::from_le_bytes(b2);
    }
    if r.read(&mut b2).map_err(|e| Error::io(&show, e))? != 0 {
        return Err(fmt("trailing bytes after voxel data"));
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Volume::new(id, (dims[0], dims[1], dims[2]), (spacing[0], spacing[1], spacing[2]), voxels)
}

// ── annotation CSV ──────────────────────────────────────────────────

/// One annotation row. `entry` is None for presence-only rows that declare
/// an image with zero boxes (needed for FP-per-image denominators).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRow {
    pub volume_id: String,
    pub key_slice: usize,
    pub entry: Option<AnnotationBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationBox {
    pub bbox: BBox,
    /// lesion type code in [0,8)
    pub lesion_type: u8,
    pub diameter_mm: f32,
    /// source slice interval of the original scan, when known
    pub interval_mm: Option<f32>,
}

pub const ANNOTATION_HEADER: [&str; 8] = ["volume_id", "key_slice", "x1", "y1", "x2", "y2", "type", "diameter_mm"];

pub fn write_annotations(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    let show = path.display().to_string();
    let with_interval = rows.iter().any(|r| r.entry.as_ref().is_some_and(|e| e.interval_mm.is_some()));
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format { path: show.clone(), detail: e.to_string() })?;
    let mut header: Vec<&str> = ANNOTATION_HEADER.to_vec();
    if with_interval {
        header.push("interval_mm");
    }
    let werr = |e: csv::Error| Error::Format { path: show.clone(), detail: e.to_string() };
    w.write_record(&header).map_err(werr)?;
    for row in rows {
        let mut rec: Vec<String> = vec![row.volume_id.clone(), row.key_slice.to_string()];
        match &row.entry {
            Some(e) => {
                rec.extend([
                    e.bbox.x1.to_string(),
                    e.bbox.y1.to_string(),
                    e.bbox.x2.to_string(),
                    e.bbox.y2.to_string(),
                    e.lesion_type.to_string(),
                    e.diameter_mm.to_string(),
                ]);
                if with_interval {
                    rec.push(e.interval_mm.map(|v| v.to_string()).unwrap_or_default());
                }
            }
            None => {
                rec.extend(std::iter::repeat(String::new()).take(if with_interval { 7 } else { 6 }));
            }
        }
        w.write_record(&rec).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(&show, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    let show = path.display().to_string();
    let fmt = |detail: String| Error::Format { path: show.clone(), detail };
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| fmt(e.to_string()))?;
    {
        let headers = r.headers().map_err(|e| fmt(e.to_string()))?;
        if headers.len() < 8 || &headers[0] != "volume_id" {
            return Err(fmt(format!("unexpected header {:?}", headers)));
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let volume_id = get(0);
        let key_slice: usize = get(1).parse().map_err(|_| fmt(format!("row {}: bad key_slice {:?}", line + 2, get(1))))?;
        let entry = if get(2).is_empty() {
            None
        } else {
            let parse_f = |i: usize, name: &str| -> Result<f32> {
                get(i).parse().map_err(|_| fmt(format!("row {}: bad {name} {:?}", line + 2, get(i))))
            };
            let bbox = BBox::new(parse_f(2, "x1")?, parse_f(3, "y1")?, parse_f(4, "x2")?, parse_f(5, "y2")?);
            if !bbox.is_valid() {
                return Err(fmt(format!("row {}: degenerate box {bbox:?}", line + 2)));
            }
            let lesion_type: u8 = get(6).parse().map_err(|_| fmt(format!("row {}: bad type {:?}", line + 2, get(6))))?;
            if lesion_type >= 8 {
                return Err(fmt(format!("row {}: lesion type {lesion_type} outside [0,8)", line + 2)));
            }
            let diameter_mm = parse_f(7, "diameter_mm")?;
            let interval_mm = match rec.get(8).map(str::trim) {
                Some("") | None => None,
                Some(v) => Some(v.parse().map_err(|_| fmt(format!("row {}: bad interval_mm {v:?}", line + 2)))?),
            };
            Some(AnnotationBox { bbox, lesion_type, diameter_mm, interval_mm })
        };
        rows.push(AnnotationRow { volume_id, key_slice, entry });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_volume(nz: usize, ny: usize, nx: usize, dz: f32, dy: f32, dx: f32, hu: i16) -> Volume {
        Volume::new("t", (nz, ny, nx), (dz, dy, dx), vec![hu; nz * ny * nx]).unwrap()
    }

    #[test]
    fn window_maps_endpoints_exactly() {
        let v = Volume::new("t", (1, 1, 3), (2.0, 0.8, 0.8), vec![-1024, 3071, -2000]).unwrap();
        let w = window_hu(&v);
        assert_eq!(w.data[0], 0.0);
        assert_eq!(w.data[1], 255.0);
        assert_eq!(w.data[2], 0.0, "out-of-range HU clamps");
    }

    #[test]
    fn window_midpoint_and_monotonicity() {
        // HU 1023 and 1024 straddle the midpoint 1023.5 -> 127.5
        let v = Volume::new("t", (1, 1, 2), (2.0, 0.8, 0.8), vec![1023, 1024]).unwrap();
        let w = window_hu(&v);
        let mid = (w.data[0] + w.data[1]) * 0.5;
        assert!((mid - 127.5).abs() < 1e-4);
        assert!(w.data[0] < w.data[1]);
    }

    #[test]
    fn inplane_identity_when_already_at_target() {
        let v = flat_volume(2, 8, 8, 2.0, 0.8, 0.8, 100);
        let w = window_hu(&v);
        let (out, (sx, sy)) = resample_inplane(&w, 0.8).unwrap();
        assert_eq!(out.dims, w.dims);
        assert_eq!(out.data, w.data);
        assert_eq!((sx, sy), (1.0, 1.0));
    }

    #[test]
    fn inplane_halves_at_double_spacing() {
        let mut vox = vec![0i16; 512 * 4];
        for (i, v) in vox.iter_mut().enumerate() {
            *v = (i % 512) as i16;
        }
        let v = Volume::new("t", (1, 4, 512), (2.0, 0.8, 0.4), vox).unwrap();
        let w = window_hu(&v);
        let (out, (sx, _)) = resample_inplane(&w, 0.8).unwrap();
        assert_eq!(out.dims, (1, 4, 256));
        assert!((sx - 0.5).abs() < 1e-6);
    }

    #[test]
    fn inplane_constant_stays_constant() {
        let v = flat_volume(1, 10, 10, 2.0, 0.5, 0.5, 500);
        let w = window_hu(&v);
        let val = w.data[0];
        let (out, _) = resample_inplane(&w, 0.8).unwrap();
        assert!(out.data.iter().all(|&x| (x - val).abs() < 1e-4));
    }

    #[test]
    fn inplane_rejects_degenerate_output() {
        let v = flat_volume(1, 2, 2, 2.0, 0.1, 0.1, 0);
        let w = window_hu(&v);
        assert!(resample_inplane(&w, 0.8).is_err());
    }

    #[test]
    fn z_resample_identity_at_2mm() {
        let v = flat_volume(5, 3, 3, 2.0, 0.8, 0.8, 77);
        let w = window_hu(&v);
        let out = resample_z(&w, 2.0).unwrap();
        assert_eq!(out.dims, w.dims);
        assert_eq!(out.data, w.data);
    }

    #[test]
    fn z_resample_selects_every_other_slice_from_1mm() {
        // 9 slices at 1mm: grid {0,2,4,6,8}
        let mut vox = Vec::new();
        for z in 0..9 {
            vox.extend(vec![(z * 100) as i16; 4]);
        }
        let v = Volume::new("t", (9, 2, 2), (1.0, 0.8, 0.8), vox).unwrap();
        let w = window_hu(&v);
        let out = resample_z(&w, 2.0).unwrap();
        assert_eq!(out.dims.0, 5);
        for (oz, src) in [0usize, 2, 4, 6, 8].iter().enumerate() {
            assert_eq!(out.slice(oz), w.slice(*src), "slice {oz} should copy source slice {src}");
        }
    }

    #[test]
    fn z_resample_linear_midpoint() {
        // two slices of constants a, b at 4mm: the middle 2mm sample is (a+b)/2
        let mut vox = vec![0i16; 8];
        vox[4..].fill(1000);
        let v = Volume::new("t", (2, 2, 2), (4.0, 0.8, 0.8), vox).unwrap();
        let w = window_hu(&v);
        let (a, b) = (w.data[0], w.data[4]);
        let out = resample_z(&w, 2.0).unwrap();
        assert_eq!(out.dims.0, 3);
        let mid = out.slice(1)[0];
        assert!((mid - (a + b) * 0.5).abs() < 1e-4);
    }

    #[test]
    fn clip_borders_no_border_is_identity() {
        let v = flat_volume(2, 6, 6, 2.0, 0.8, 0.8, 0); // windows to ~63.7
        let w = window_hu(&v);
        let (out, off) = clip_borders(&w, DEFAULT_BORDER_THRESHOLD).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(out.dims, w.dims);
    }

    #[test]
    fn clip_borders_reports_offsets_and_shifts_boxes() {
        // 10 black columns on the left
        let (nz, ny, nx) = (2usize, 6usize, 20usize);
        let mut vox = vec![-1024i16; nz * ny * nx];
        for z in 0..nz {
            for y in 0..ny {
                for x in 10..nx {
                    vox[z * ny * nx + y * nx + x] = 0;
                }
            }
        }
        let v = Volume::new("t", (nz, ny, nx), (2.0, 0.8, 0.8), vox).unwrap();
        let w = window_hu(&v);
        let (out, (x_off, y_off)) = clip_borders(&w, DEFAULT_BORDER_THRESHOLD).unwrap();
        assert_eq!((x_off, y_off), (10, 0));
        assert_eq!(out.dims, (nz, ny, nx - 10));
        // a box at x1=50 shifts to x1=40
        let t = PreprocessTransform { scale_x: 1.0, scale_y: 1.0, crop_x: x_off, crop_y: y_off, z_factor: 1.0 };
        let b = t.apply_box(&BBox::new(50.0, 2.0, 55.0, 4.0));
        assert_eq!(b.x1, 40.0);
    }

    #[test]
    fn clip_borders_rejects_fully_black() {
        let v = flat_volume(1, 4, 4, 2.0, 0.8, 0.8, -1024);
        let w = window_hu(&v);
        assert!(clip_borders(&w, DEFAULT_BORDER_THRESHOLD).is_err());
    }

    #[test]
    fn group_slices_window_and_edges() {
        let (nz, ny, nx) = (12usize, 4usize, 4usize);
        let mut vox = Vec::new();
        for z in 0..nz {
            vox.extend(vec![(z * 10) as i16; ny * nx]);
        }
        let v = Volume::new("t", (nz, ny, nx), (2.0, 0.8, 0.8), vox).unwrap();
        let w = window_hu(&v);

        // M=1 around key k: slices (k-1, k, k+1)
        let g = group_slices(&w, 5, 1).unwrap();
        assert_eq!(SliceGroup::slice_indices(1, 5, nz), vec![4, 5, 6]);
        assert_eq!(g.data.len(), 3 * ny * nx);

        // M=3 around key k: slices k-4..k+4 grouped into 3 images
        let idx = SliceGroup::slice_indices(3, 6, nz);
        assert_eq!(idx, vec![2, 3, 4, 5, 6, 7, 8, 9, 10]);
        let g3 = group_slices(&w, 6, 3).unwrap();
        assert_eq!(g3.m, 3);
        assert_eq!(g3.data.len(), 9 * ny * nx);
        assert!((g3.coverage_mm() - 18.0).abs() < 1e-5);

        // key 0 replicates slice 0 for negative indices
        let idx0 = SliceGroup::slice_indices(3, 0, nz);
        assert_eq!(idx0, vec![0, 0, 0, 0, 0, 1, 2, 3, 4]);
        let g0 = group_slices(&w, 0, 3).unwrap();
        let per = ny * nx;
        assert_eq!(&g0.data[0..per], &g0.data[per..2 * per]);

        // key outside the volume is rejected, as is even M
        assert!(group_slices(&w, nz, 3).is_err());
        assert!(group_slices(&w, 3, 2).is_err());
    }

    #[test]
    fn group_slices_central_channel_is_key_slice() {
        let (nz, ny, nx) = (9usize, 2usize, 2usize);
        let mut vox = Vec::new();
        for z in 0..nz {
            vox.extend(vec![(z as i16) * 100; ny * nx]);
        }
        let v = Volume::new("t", (nz, ny, nx), (2.0, 0.8, 0.8), vox).unwrap();
        let w = window_hu(&v);
        for m in [1usize, 3] {
            let g = group_slices(&w, 4, m).unwrap();
            let central_image = g.image_tensor(m / 2);
            let per = ny * nx;
            let central_channel = &central_image.data()[per..2 * per];
            assert_eq!(central_channel, w.slice(4), "M={m}");
        }
    }

    #[test]
    fn preprocess_is_idempotent_on_normalized_volumes() {
        // already-normalized volume: target spacing, no black border
        let (nz, ny, nx) = (4usize, 6usize, 6usize);
        let vox: Vec<i16> = (0..nz * ny * nx).map(|i| ((i * 37) % 1200) as i16).collect();
        let v = Volume::new("norm", (nz, ny, nx), (2.0, 0.8, 0.8), vox).unwrap();
        let (once, t1) = preprocess(&v, DEFAULT_BORDER_THRESHOLD).unwrap();
        // map the preprocessed image back to an HU volume (exact for integer HU)
        let back: Vec<i16> = once.data.iter().map(|&x| (x * 4095.0 / 255.0 - 1024.0).round() as i16).collect();
        let v2 = Volume::new("norm", once.dims, once.spacing, back).unwrap();
        let (twice, t2) = preprocess(&v2, DEFAULT_BORDER_THRESHOLD).unwrap();
        assert_eq!(once.dims, twice.dims);
        assert_eq!(once.data, twice.data);
        assert_eq!(t1, t2);
    }

    #[test]
    fn volume_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.ctvol");
        let vox: Vec<i16> = (0..2 * 3 * 4).map(|i| (i as i16) * 7 - 50).collect();
        let v = Volume::new("vol", (2, 3, 4), (1.5, 0.7, 0.9), vox).unwrap();
        write_volume(&path, &v).unwrap();
        let r = read_volume(&path).unwrap();
        assert_eq!(r.id, "vol");
        assert_eq!(r.dims, v.dims);
        assert_eq!(r.spacing, v.spacing);
        assert_eq!(r.voxels, v.voxels);
    }

    #[test]
    fn volume_file_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ctvol");
        std::fs::write(&path, b"NOTCT\0rest").unwrap();
        assert!(read_volume(&path).is_err());

        let good = dir.path().join("good.ctvol");
        let v = flat_volume(2, 2, 2, 1.0, 1.0, 1.0, 5);
        write_volume(&good, &v).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn annotation_roundtrip_with_presence_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        let rows = vec![
            AnnotationRow {
                volume_id: "v1".into(),
                key_slice: 3,
                entry: Some(AnnotationBox {
                    bbox: BBox::new(10.0, 12.0, 30.0, 32.5),
                    lesion_type: 2,
                    diameter_mm: 16.0,
                    interval_mm: Some(2.0),
                }),
            },
            AnnotationRow { volume_id: "v1".into(), key_slice: 4, entry: None },
        ];
        write_annotations(&path, &rows).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn annotation_rejects_bad_type() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        std::fs::write(&path, "volume_id,key_slice,x1,y1,x2,y2,type,diameter_mm\nv,0,1,1,2,2,9,5\n").unwrap();
        assert!(read_annotations(&path).is_err());
    }
}
