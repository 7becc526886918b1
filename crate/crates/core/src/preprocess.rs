//! CT volume to model input: in-plane resampling to 1 mm/pixel, neighboring
//! slice extraction at 2 mm intervals, fixed 120x120 mm patch cropping, and
//! intensity normalization.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Patch edge length in pixels (and mm: patches are 1 mm/pixel).
pub const PATCH_PX: usize = 120;
/// Out-of-bounds fill, in HU (air).
pub const FILL_HU: f64 = -1024.0;
/// Intensity window clipped before normalization.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;
/// Neighboring slices are taken this many mm apart.
pub const SLICE_STEP_MM: f64 = 2.0;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("volume i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("volume sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("volume data is {found} bytes but dims imply {expected}")]
    SizeMismatch { found: usize, expected: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
}

/// Sidecar schema for raw int16 volumes: `{dims: [z, y, x], spacing_mm: [x, y, z]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

/// A CT volume. Voxels are HU values indexed `(z, y, x)`; in memory they are
/// kept as f64 so resampling stays exact, on disk they are int16.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f64>,
    /// Voxel spacing in mm, ordered (x, y, z).
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Volume {
    pub fn new(voxels: Array3<f64>, spacing_mm: [f64; 3]) -> Result<Volume, PreprocessError> {
        if spacing_mm.iter().any(|&s| s <= 0.0) {
            return Err(PreprocessError::Invalid(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        let (z, y, x) = voxels.dim();
        if z == 0 || y == 0 || x == 0 {
            return Err(PreprocessError::Invalid("empty volume".into()));
        }
        Ok(Volume {
            voxels,
            spacing_mm,
            origin_mm: [0.0; 3],
        })
    }

    fn sidecar_path(raw_path: &Path) -> PathBuf {
        let mut s = raw_path.as_os_str().to_os_string();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Loads a raw little-endian int16 volume with its JSON sidecar
    /// (`<path>.json`).
    pub fn load(raw_path: impl AsRef<Path>) -> Result<Volume, PreprocessError> {
        let raw_path = raw_path.as_ref();
        let sidecar = Self::sidecar_path(raw_path);
        let meta: VolumeMeta = serde_json::from_str(&fs::read_to_string(&sidecar)?)
            .map_err(|e| PreprocessError::Sidecar {
                path: sidecar.clone(),
                message: e.to_string(),
            })?;
        let [z, y, x] = meta.dims;
        let mut bytes = Vec::new();
        fs::File::open(raw_path)?.read_to_end(&mut bytes)?;
        let expected = z * y * x * 2;
        if bytes.len() != expected {
            return Err(PreprocessError::SizeMismatch {
                found: bytes.len(),
                expected,
            });
        }
        let voxels: Vec<f64> = bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect();
        let voxels = Array3::from_shape_vec((z, y, x), voxels)
            .expect("shape matches byte count");
        Volume::new(voxels, meta.spacing_mm)
    }

    /// Writes the volume as raw little-endian int16 plus sidecar, rounding
    /// voxel values.
    pub fn save(&self, raw_path: impl AsRef<Path>) -> Result<(), PreprocessError> {
        let raw_path = raw_path.as_ref();
        let (z, y, x) = self.voxels.dim();
        let meta = VolumeMeta {
            dims: [z, y, x],
            spacing_mm: self.spacing_mm,
        };
        fs::write(
            Self::sidecar_path(raw_path),
            serde_json::to_string_pretty(&meta).expect("serializable meta"),
        )?;
        let mut f = fs::File::create(raw_path)?;
        for &v in self.voxels.iter() {
            let clamped = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            f.write_all(&clamped.to_le_bytes())?;
        }
        Ok(())
    }

    /// Physical z extent in mm.
    pub fn z_extent_mm(&self) -> f64 {
        (self.voxels.dim().0 - 1) as f64 * self.spacing_mm[2]
    }
}

/// Resamples every axial slice to 1 mm/pixel with bilinear interpolation.
/// Physical extent is preserved to within one voxel; volumes already at
/// 1 mm/pixel pass through bit-exactly.
pub fn resample_inplane(v: &Volume) -> Volume {
    let [sx, sy, sz] = v.spacing_mm;
    if sx == 1.0 && sy == 1.0 {
        return v.clone();
    }
    let (nz, ny, nx) = v.voxels.dim();
    let out_y = (((ny - 1) as f64 * sy) + 1e-9).floor() as usize + 1;
    let out_x = (((nx - 1) as f64 * sx) + 1e-9).floor() as usize + 1;

    let mut out = Array3::<f64>::zeros((nz, out_y, out_x));
    for z in 0..nz {
        for oy in 0..out_y {
            let src_y = oy as f64 / sy;
            let y0 = (src_y.floor() as usize).min(ny - 1);
            let y1 = (y0 + 1).min(ny - 1);
            let fy = (src_y - y0 as f64).clamp(0.0, 1.0);
            for ox in 0..out_x {
                let src_x = ox as f64 / sx;
                let x0 = (src_x.floor() as usize).min(nx - 1);
                let x1 = (x0 + 1).min(nx - 1);
                let fx = (src_x - x0 as f64).clamp(0.0, 1.0);
                let top = v.voxels[[z, y0, x0]] * (1.0 - fx) + v.voxels[[z, y0, x1]] * fx;
                let bot = v.voxels[[z, y1, x0]] * (1.0 - fx) + v.voxels[[z, y1, x1]] * fx;
                out[[z, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Volume {
        voxels: out,
        spacing_mm: [1.0, 1.0, sz],
        origin_mm: v.origin_mm,
    }
}

/// Extracts axial images at `center_z - 2mm`, `center_z`, `center_z + 2mm`,
/// linearly interpolating between stored slices. Planes beyond the volume
/// clamp to the nearest stored slice.
pub fn extract_slices(v: &Volume, center_z_mm: f64) -> [Array2<f64>; 3] {
    let sz = v.spacing_mm[2];
    let nz = v.voxels.dim().0;
    let plane = |z_mm: f64| -> Array2<f64> {
        let pos = (z_mm / sz).clamp(0.0, (nz - 1) as f64);
        let z0 = pos.floor() as usize;
        let z1 = (z0 + 1).min(nz - 1);
        let f = pos - z0 as f64;
        if f == 0.0 {
            v.voxels.index_axis(ndarray::Axis(0), z0).to_owned()
        } else {
            let a = v.voxels.index_axis(ndarray::Axis(0), z0);
            let b = v.voxels.index_axis(ndarray::Axis(0), z1);
            &a * (1.0 - f) + &b * f
        }
    };
    [
        plane(center_z_mm - SLICE_STEP_MM),
        plane(center_z_mm),
        plane(center_z_mm + SLICE_STEP_MM),
    ]
}

/// Crops a 120x120 window from each image, centered so the center pixel
/// lands at index (60, 60). Pixels outside the image are filled with air
/// (-1024 HU). Images must be at 1 mm/pixel.
pub fn crop_patch(images: &[Array2<f64>; 3], center_xy_mm: (f64, f64)) -> Array3<f64> {
    let (h, w) = images[0].dim();
    assert!(
        images.iter().all(|im| im.dim() == (h, w)),
        "slice images must share dimensions"
    );
    let cx = center_xy_mm.0.round() as i64;
    let cy = center_xy_mm.1.round() as i64;
    let half = (PATCH_PX / 2) as i64;

    let mut out = Array3::from_elem((3, PATCH_PX, PATCH_PX), FILL_HU);
    for (c, img) in images.iter().enumerate() {
        for i in 0..PATCH_PX as i64 {
            let src_y = cy - half + i;
            if src_y < 0 || src_y >= h as i64 {
                continue;
            }
            for j in 0..PATCH_PX as i64 {
                let src_x = cx - half + j;
                if src_x < 0 || src_x >= w as i64 {
                    continue;
                }
                out[[c, i as usize, j as usize]] = img[[src_y as usize, src_x as usize]];
            }
        }
    }
    out
}

/// Clips HU to `[-1024, 3071]` and maps linearly to `[0, 1]`.
pub fn normalize_intensity(hu: &Array3<f64>) -> Array3<f64> {
    hu.mapv(|v| (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
}

/// The normalized 3-channel patch the model consumes, with its lesion box in
/// patch pixel coordinates (clamped to the patch).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `3 x 120 x 120`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub center_mm: [f64; 3],
    pub lesion_bbox_px: [f64; 4],
}

/// Full pipeline: resample, slice, crop, normalize. `bbox_mm` is given in
/// the resampled (1 mm/pixel) image frame.
pub fn extract_patch(volume: &Volume, center_mm: [f64; 3], bbox_mm: [f64; 4]) -> Patch {
    let resampled = resample_inplane(volume);
    let slices = extract_slices(&resampled, center_mm[2]);
    let raw = crop_patch(&slices, (center_mm[0], center_mm[1]));
    let pixels = normalize_intensity(&raw);

    let half = (PATCH_PX / 2) as f64;
    let (ox, oy) = (center_mm[0].round() - half, center_mm[1].round() - half);
    let lesion_bbox_px = [
        (bbox_mm[0] - ox).clamp(0.0, PATCH_PX as f64),
        (bbox_mm[1] - oy).clamp(0.0, PATCH_PX as f64),
        (bbox_mm[2] - ox).clamp(0.0, PATCH_PX as f64),
        (bbox_mm[3] - oy).clamp(0.0, PATCH_PX as f64),
    ];
    Patch {
        pixels,
        center_mm,
        lesion_bbox_px,
    }
}

/// Sidecar schema for stacks of float32 patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchStackMeta {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
}

/// Writes patches as one raw little-endian float32 file plus `<path>.json`
/// sidecar. Order matches the corpus record order.
pub fn save_patches(
    path: impl AsRef<Path>,
    patches: &[Array3<f32>],
) -> Result<(), PreprocessError> {
    let path = path.as_ref();
    let (c, h, w) = patches
        .first()
        .map(|p| p.dim())
        .ok_or_else(|| PreprocessError::Invalid("no patches to save".into()))?;
    let meta = PatchStackMeta {
        count: patches.len(),
        channels: c,
        height: h,
        width: w,
        spacing_mm: 1.0,
    };
    fs::write(
        Volume::sidecar_path(path),
        serde_json::to_string_pretty(&meta).expect("serializable meta"),
    )?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in patches {
        if p.dim() != (c, h, w) {
            return Err(PreprocessError::Invalid(
                "patches in a stack must share dimensions".into(),
            ));
        }
        for &v in p.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_patches(path: impl AsRef<Path>) -> Result<Vec<Array3<f32>>, PreprocessError> {
    let path = path.as_ref();
    let sidecar = Volume::sidecar_path(path);
    let meta: PatchStackMeta = serde_json::from_str(&fs::read_to_string(&sidecar)?)
        .map_err(|e| PreprocessError::Sidecar {
            path: sidecar.clone(),
            message: e.to_string(),
        })?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let per_patch = meta.channels * meta.height * meta.width;
    let expected = meta.count * per_patch * 4;
    if bytes.len() != expected {
        return Err(PreprocessError::SizeMismatch {
            found: bytes.len(),
            expected,
        });
    }
    let mut patches = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let start = i * per_patch * 4;
        let vals: Vec<f32> = bytes[start..start + per_patch * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        patches.push(
            Array3::from_shape_vec((meta.channels, meta.height, meta.width), vals)
                .expect("shape matches byte count"),
        );
    }
    Ok(patches)
}
