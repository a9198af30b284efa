//! Fusion of two overlapping imaging stations into one volume.
//!
//! Both stations are resampled onto a common grid spanning their union. Outside
//! the z overlap each voxel comes from the only station covering it; inside the
//! overlap the two are blended with a weight that ramps linearly along z, so
//! the fused volume is continuous with the upper station at the top of the
//! overlap and with the lower station at its bottom. Labels go through the same
//! blend and are thresholded at 0.5, with exact ties rounding up.

use crate::error::{Error, Result};
use crate::volgrid::{Geometry, ImageGrid, LabelGrid, Sampler, VolumeGrid};

/// Tolerance in mm for world-coordinate comparisons along z.
const Z_EPS: f64 = 1e-6;

/// Inclusive world-z interval in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZRange {
    pub low: f64,
    pub high: f64,
}

impl ZRange {
    pub fn contains(&self, z: f64) -> bool {
        z >= self.low - Z_EPS && z <= self.high + Z_EPS
    }

    pub fn height(&self) -> f64 {
        self.high - self.low
    }

    /// Blend weight of the lower station at height `z`: 0 at the top of the
    /// overlap, 1 at the bottom.
    pub fn lower_weight(&self, z: f64) -> f64 {
        let h = self.height();
        if h <= Z_EPS {
            0.5
        } else {
            ((self.high - z) / h).clamp(0.0, 1.0)
        }
    }
}

/// Fused intensities and labels sharing one geometry.
#[derive(Debug, Clone)]
pub struct FusedVolume {
    pub image: ImageGrid,
    pub labels: LabelGrid,
    /// World-z interval covered by both stations, `None` when they only abut.
    pub overlap_z_range: Option<ZRange>,
}

/// Geometry spanning both inputs at the finer of their spacings.
pub fn common_grid(a: &Geometry, b: &Geometry) -> Result<Geometry> {
    a.validate()?;
    b.validate()?;
    let mut dims = [0usize; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for axis in 0..3 {
        let (a_lo, a_hi) = a.extent(axis);
        let (b_lo, b_hi) = b.extent(axis);
        spacing[axis] = a.spacing[axis].min(b.spacing[axis]);
        origin[axis] = a_lo.min(b_lo);
        let span = a_hi.max(b_hi) - origin[axis];
        dims[axis] = (span / spacing[axis] - 1e-6).ceil().max(0.0) as usize + 1;
    }
    let (a_lo, a_hi) = a.extent(2);
    let (b_lo, b_hi) = b.extent(2);
    let gap = (b_lo - a_hi).max(a_lo - b_hi);
    if gap > spacing[2] + Z_EPS {
        return Err(Error::NoOverlap {
            gap_mm: gap,
            slice_mm: spacing[2],
        });
    }
    Geometry::new(dims, spacing, origin)
}

/// World-z interval covered by both grids.
pub fn overlap_z_range(a: &Geometry, b: &Geometry) -> Option<ZRange> {
    let (a_lo, a_hi) = a.extent(2);
    let (b_lo, b_hi) = b.extent(2);
    let low = a_lo.max(b_lo);
    let high = a_hi.min(b_hi);
    (low <= high + Z_EPS).then_some(ZRange {
        low,
        high: high.max(low),
    })
}

/// True when `a` is the upper station (reaches higher in z, then starts higher).
pub fn is_upper(a: &Geometry, b: &Geometry) -> bool {
    let (a_lo, a_hi) = a.extent(2);
    let (b_lo, b_hi) = b.extent(2);
    if (a_hi - b_hi).abs() > Z_EPS {
        a_hi > b_hi
    } else {
        a_lo >= b_lo - Z_EPS
    }
}

/// Two stations sampled on their common grid, ordered upper then lower.
pub struct StationSamplers<'a, T> {
    pub target: Geometry,
    pub upper: Sampler<'a, T>,
    pub lower: Sampler<'a, T>,
    pub overlap: Option<ZRange>,
}

impl<'a, T: Copy + Into<f64>> StationSamplers<'a, T> {
    pub fn new(a: &'a VolumeGrid<T>, b: &'a VolumeGrid<T>) -> Result<Self> {
        let target = common_grid(a.geometry(), b.geometry())?;
        Ok(Self::on_grid(a, b, target))
    }

    pub fn on_grid(a: &'a VolumeGrid<T>, b: &'a VolumeGrid<T>, target: Geometry) -> Self {
        let (upper, lower) = if is_upper(a.geometry(), b.geometry()) {
            (a, b)
        } else {
            (b, a)
        };
        Self {
            overlap: overlap_z_range(a.geometry(), b.geometry()),
            upper: Sampler::new(upper, &target),
            lower: Sampler::new(lower, &target),
            target,
        }
    }

    /// Blended value at a common-grid voxel, `None` where no station covers it.
    #[inline]
    pub fn blend(&self, index: [usize; 3]) -> Option<f64> {
        match (self.upper.sample(index), self.lower.sample(index)) {
            (Some(u), Some(l)) if u == l => Some(u),
            (Some(u), Some(l)) => {
                let z = self.target.axis_world(2, index[2] as f64);
                let w = self.overlap.map(|o| o.lower_weight(z)).unwrap_or(0.5);
                Some((1.0 - w) * u + w * l)
            }
            (Some(u), None) => Some(u),
            (None, Some(l)) => Some(l),
            (None, None) => None,
        }
    }

    /// Visit every common-grid voxel where both stations contribute inside
    /// `overlap`, passing `(upper, lower)` samples.
    pub fn for_each_overlap(&self, overlap: &ZRange, mut f: impl FnMut(f64, f64)) {
        let [nx, ny, nz] = self.target.dims;
        for z in 0..nz {
            if !(self.upper.covers_z(z) && self.lower.covers_z(z)) {
                continue;
            }
            if !overlap.contains(self.target.axis_world(2, z as f64)) {
                continue;
            }
            for y in 0..ny {
                for x in 0..nx {
                    if let (Some(u), Some(l)) =
                        (self.upper.sample([x, y, z]), self.lower.sample([x, y, z]))
                    {
                        f(u, l);
                    }
                }
            }
        }
    }
}

/// Fuse two stations' intensities and labels onto their common grid.
pub fn fuse(
    a_img: &ImageGrid,
    b_img: &ImageGrid,
    a_lab: &LabelGrid,
    b_lab: &LabelGrid,
) -> Result<FusedVolume> {
    for (img, lab, name) in [(a_img, a_lab, "a"), (b_img, b_lab, "b")] {
        if !img.geometry().matches(lab.geometry(), 1e-6) {
            return Err(Error::GeometryMismatch(format!(
                "station {name} labels {:?} do not match its image {:?}",
                lab.geometry(),
                img.geometry()
            )));
        }
    }
    let images = StationSamplers::new(a_img, b_img)?;
    let labels = StationSamplers::on_grid(a_lab, b_lab, images.target);
    let image = VolumeGrid::from_fn(images.target, |idx| images.blend(idx).unwrap_or(0.0) as f32)?;
    let labels_out = VolumeGrid::from_fn(images.target, |idx| match labels.blend(idx) {
        Some(v) if v >= 0.5 => 1u8,
        _ => 0u8,
    })?;
    Ok(FusedVolume {
        image,
        labels: labels_out,
        overlap_z_range: images.overlap,
    })
}
