//! Network-input preprocessing: slice trimming, per-slice normalization,
//! periodic 2.5D stacking and symmetric zero-padding.
//!
//! The stacking contract is what an external slice-wise segmentation model
//! consumes. In-plane shapes are padded up to the next multiple of
//! [`PAD_MULTIPLE`] per axis, which turns a 224×174 station slice into the
//! 224×192 network input.

use crate::error::{Error, Result};
use crate::volgrid::{Geometry, ImageGrid, VolumeGrid};

/// Slices removed from each end of a station before segmentation.
pub const DEFAULT_TRIM: usize = 3;
/// Fraction of brightest values clipped before normalization.
pub const DEFAULT_CLIP_FRACTION: f64 = 0.01;
/// In-plane padding granularity.
pub const PAD_MULTIPLE: usize = 32;

/// Two-dimensional array, x-fastest, `nx` columns by `ny` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(nx: usize, ny: usize, values: Vec<T>) -> Result<Self> {
        if nx == 0 || ny == 0 || values.len() != nx * ny {
            return Err(Error::ShapeMismatch {
                expected: vec![nx, ny],
                found: vec![values.len()],
            });
        }
        Ok(Self { nx, ny, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[x + self.nx * y]
    }
}

/// Three adjacent slices centered on `target_index`, padded to network shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub target_index: usize,
    /// Source slice index of each plane: below, target, above.
    pub plane_indices: [usize; 3],
    pub planes: [Plane<f32>; 3],
}

impl SliceStack {
    pub fn target(&self) -> &Plane<f32> {
        &self.planes[1]
    }
}

/// Drop `n_trim` slices from both ends of the z axis.
pub fn trim_station<T: Copy>(station: &VolumeGrid<T>, n_trim: usize) -> Result<VolumeGrid<T>> {
    let g = station.geometry();
    let nz = g.dims[2];
    if nz <= 2 * n_trim {
        return Err(Error::TooFewSlices { nz, n_trim });
    }
    if n_trim == 0 {
        return Ok(station.clone());
    }
    let slice = g.slice_len();
    let values = station.values()[n_trim * slice..(nz - n_trim) * slice].to_vec();
    let mut origin = g.origin;
    origin[2] = g.axis_world(2, n_trim as f64);
    let geometry = Geometry::new([g.dims[0], g.dims[1], nz - 2 * n_trim], g.spacing, origin)?;
    VolumeGrid::new(geometry, values)
}

/// Nearest-rank `q` quantile of unsorted values (`q` in `[0, 1]`).
pub fn nearest_rank_quantile(values: &[f32], q: f64) -> f32 {
    debug_assert!(!values.is_empty());
    let n = values.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut scratch = values.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(rank - 1, f32::total_cmp);
    *nth
}

/// Clip the brightest `clip_fraction` of values, then min-max scale to `[0, 1]`.
///
/// When the clip level equals the minimum the scale is degenerate: values
/// above the clip level map to 1 and everything else to 0, so a constant
/// slice becomes all zeros.
pub fn normalize_values(values: &[f32], clip_fraction: f64) -> Result<Vec<f32>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot normalize an empty slice".into(),
        ));
    }
    if !(0.0..1.0).contains(&clip_fraction) {
        return Err(Error::InvalidParameter(format!(
            "clip fraction {clip_fraction} outside [0, 1)"
        )));
    }
    let hi = if clip_fraction == 0.0 {
        values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    } else {
        nearest_rank_quantile(values, 1.0 - clip_fraction)
    };
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let (lo, hi) = (lo as f64, hi as f64);
    if hi <= lo {
        return Ok(values
            .iter()
            .map(|&v| if (v as f64) > hi { 1.0 } else { 0.0 })
            .collect());
    }
    let range = hi - lo;
    Ok(values
        .iter()
        .map(|&v| (((v as f64).min(hi) - lo) / range).clamp(0.0, 1.0) as f32)
        .collect())
}

pub fn normalize_slice(slice: &Plane<f32>, clip_fraction: f64) -> Result<Plane<f32>> {
    Ok(Plane {
        nx: slice.nx,
        ny: slice.ny,
        values: normalize_values(&slice.values, clip_fraction)?,
    })
}

/// Apply [`normalize_values`] to every axial slice independently.
pub fn normalize_station(station: &ImageGrid, clip_fraction: f64) -> Result<ImageGrid> {
    let nz = station.dims()[2];
    let mut values = Vec::with_capacity(station.values().len());
    for z in 0..nz {
        values.extend(normalize_values(station.slice_z(z), clip_fraction)?);
    }
    ImageGrid::new(*station.geometry(), values)
}

/// Padded in-plane shape for an `(nx, ny)` slice.
pub fn padded_shape(nx: usize, ny: usize) -> (usize, usize) {
    (
        nx.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE,
        ny.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE,
    )
}

/// Low-side padding for growing `n` to `padded`; the odd remainder goes high.
pub fn pad_split(n: usize, padded: usize) -> (usize, usize) {
    let total = padded - n;
    (total / 2, total - total / 2)
}

/// Zero-pad a slice symmetrically to [`padded_shape`].
pub fn pad_plane<T: Copy + Default>(plane: &Plane<T>) -> Plane<T> {
    let (px, py) = padded_shape(plane.nx, plane.ny);
    let (x0, _) = pad_split(plane.nx, px);
    let (y0, _) = pad_split(plane.ny, py);
    let mut values = vec![T::default(); px * py];
    for y in 0..plane.ny {
        let dst = x0 + px * (y + y0);
        values[dst..dst + plane.nx]
            .copy_from_slice(&plane.values[plane.nx * y..plane.nx * (y + 1)]);
    }
    Plane {
        nx: px,
        ny: py,
        values,
    }
}

/// Undo [`pad_plane`] for a slice whose unpadded shape was `original`.
pub fn unpad_labels(padded: &Plane<u8>, original: (usize, usize)) -> Result<Plane<u8>> {
    let (nx, ny) = original;
    let (px, py) = padded_shape(nx, ny);
    if padded.shape() != (px, py) {
        return Err(Error::ShapeMismatch {
            expected: vec![px, py],
            found: vec![padded.nx, padded.ny],
        });
    }
    let (x0, _) = pad_split(nx, px);
    let (y0, _) = pad_split(ny, py);
    let mut values = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        let src = x0 + px * (y + y0);
        values.extend_from_slice(&padded.values[src..src + nx]);
    }
    Ok(Plane { nx, ny, values })
}

/// Periodic slice triple for target `z`: `(z-1 mod nz, z, z+1 mod nz)`.
pub fn stack_indices(z: usize, nz: usize) -> [usize; 3] {
    [(z + nz - 1) % nz, z, (z + 1) % nz]
}

/// Build the padded 2.5D input for slice `z` of a trimmed, normalized station.
pub fn make_stack(station: &ImageGrid, z: usize) -> Result<SliceStack> {
    let [nx, ny, nz] = station.dims();
    if z >= nz {
        return Err(Error::OutOfBounds {
            axis: 'z',
            index: z,
            size: nz,
        });
    }
    let plane_indices = stack_indices(z, nz);
    let plane = |k: usize| {
        pad_plane(&Plane {
            nx,
            ny,
            values: station.slice_z(k).to_vec(),
        })
    };
    Ok(SliceStack {
        target_index: z,
        plane_indices,
        planes: [
            plane(plane_indices[0]),
            plane(plane_indices[1]),
            plane(plane_indices[2]),
        ],
    })
}
