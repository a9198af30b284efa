//! Volumetric data model: voxel grids with physical geometry.
//!
//! Every grid in the pipeline uses the same fixed axis convention
//! ([`AxisConvention::Lps`]): voxel index `x` increases toward the subject's
//! anatomical left, `y` toward posterior, and `z` toward the head. Values are
//! stored x-fastest, so an axial slice (`z` fixed) is one contiguous run of
//! `nx * ny` values.
//!
//! World coordinates are millimetres in scanner space; `origin` is the world
//! position of the center of voxel `(0, 0, 0)`. Only axis-aligned grids are
//! supported.

use crate::error::{Error, Result};

/// Real triple, mm.
pub type Vec3 = [f64; 3];

const AXIS_NAMES: [char; 3] = ['x', 'y', 'z'];

/// Tolerance, in voxel units, for deciding that a world position lies on the
/// source extent boundary or on an exact grid point.
const INDEX_EPS: f64 = 1e-6;

/// Scanner axis convention shared by every grid of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AxisConvention {
    /// x toward subject left, y toward posterior, z toward head.
    #[default]
    Lps,
}

/// Voxel dimensions, spacing and origin of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        let geometry = Self {
            dims,
            spacing,
            origin,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.dims[axis] == 0 {
                return Err(Error::InvalidGeometry(format!(
                    "dimension along {} is 0",
                    AXIS_NAMES[axis]
                )));
            }
            let s = self.spacing[axis];
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "spacing along {} must be positive, got {s}",
                    AXIS_NAMES[axis]
                )));
            }
            if !self.origin[axis].is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "origin along {} is not finite",
                    AXIS_NAMES[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of voxels in one axial slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Volume of a single voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn linear_index(&self, index: [usize; 3]) -> usize {
        index[0] + self.dims[0] * (index[1] + self.dims[1] * index[2])
    }

    #[inline]
    pub fn index_of(&self, linear: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    pub fn check_index(&self, index: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if index[axis] >= self.dims[axis] {
                return Err(Error::OutOfBounds {
                    axis: AXIS_NAMES[axis],
                    index: index[axis],
                    size: self.dims[axis],
                });
            }
        }
        Ok(())
    }

    /// World coordinate of voxel `index` along a single axis, no bounds check.
    #[inline]
    pub fn axis_world(&self, axis: usize, index: f64) -> f64 {
        self.origin[axis] + index * self.spacing[axis]
    }

    pub fn voxel_to_world(&self, index: [usize; 3]) -> Result<Vec3> {
        self.check_index(index)?;
        Ok([
            self.axis_world(0, index[0] as f64),
            self.axis_world(1, index[1] as f64),
            self.axis_world(2, index[2] as f64),
        ])
    }

    /// Nearest voxel to a world position, or `None` outside the grid.
    pub fn world_to_voxel(&self, position: Vec3) -> Option<[usize; 3]> {
        let mut index = [0usize; 3];
        for axis in 0..3 {
            let u = ((position[axis] - self.origin[axis]) / self.spacing[axis]).round();
            if !(u >= 0.0 && u < self.dims[axis] as f64) {
                return None;
            }
            index[axis] = u as usize;
        }
        Some(index)
    }

    /// World interval `[first voxel center, last voxel center]` along an axis.
    pub fn extent(&self, axis: usize) -> (f64, f64) {
        let lo = self.origin[axis];
        (lo, self.axis_world(axis, (self.dims[axis] - 1) as f64))
    }

    /// World position of the grid's geometric center.
    pub fn center(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for (axis, value) in c.iter_mut().enumerate() {
            let (lo, hi) = self.extent(axis);
            *value = 0.5 * (lo + hi);
        }
        c
    }

    /// True when dims, spacing and origin agree within `tol` mm.
    pub fn matches(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= tol
                    && (self.origin[a] - other.origin[a]).abs() <= tol
            })
    }
}

/// Dense scalar field over a [`Geometry`], stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid<T> {
    geometry: Geometry,
    values: Vec<T>,
}

/// Intensity volume.
pub type ImageGrid = VolumeGrid<f32>;
/// Binary label volume (values 0 and 1 only).
pub type LabelGrid = VolumeGrid<u8>;

impl<T: Copy> VolumeGrid<T> {
    pub fn new(geometry: Geometry, values: Vec<T>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::LengthMismatch {
                dims: geometry.dims,
                expected: geometry.len(),
                actual: values.len(),
            });
        }
        Ok(Self { geometry, values })
    }

    pub fn filled(geometry: Geometry, value: T) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            values: vec![value; geometry.len()],
            geometry,
        })
    }

    /// Build a grid by evaluating `f` at every voxel index, in storage order.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> T) -> Result<Self> {
        geometry.validate()?;
        let [nx, ny, nz] = geometry.dims;
        let mut values = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    values.push(f([x, y, z]));
                }
            }
        }
        Ok(Self { geometry, values })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.geometry.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.geometry.origin
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, index: [usize; 3]) -> T {
        self.values[self.geometry.linear_index(index)]
    }

    pub fn try_get(&self, index: [usize; 3]) -> Result<T> {
        self.geometry.check_index(index)?;
        Ok(self.get(index))
    }

    /// Contiguous values of axial slice `z`.
    pub fn slice_z(&self, z: usize) -> &[T] {
        let n = self.geometry.slice_len();
        &self.values[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> VolumeGrid<U> {
        VolumeGrid {
            geometry: self.geometry,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same values, different placement in space.
    pub fn with_geometry(self, geometry: Geometry) -> Result<Self> {
        Self::new(geometry, self.values)
    }
}

impl VolumeGrid<u8> {
    /// Label grid constructor; rejects anything other than 0 and 1.
    pub fn labels(geometry: Geometry, values: Vec<u8>) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryLabel { value, index });
        }
        Self::new(geometry, values)
    }

    /// Number of labeled voxels.
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// Unweighted centroid of a voxel set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterOfMass {
    pub position: Vec3,
    pub mass: usize,
}

/// Centroid of the given linear voxel indices, or `None` when empty.
pub fn centroid_of_indices(
    geometry: &Geometry,
    indices: impl IntoIterator<Item = usize>,
) -> Option<CenterOfMass> {
    let mut sums = [0u64; 3];
    let mut mass = 0usize;
    for linear in indices {
        let idx = geometry.index_of(linear);
        for axis in 0..3 {
            sums[axis] += idx[axis] as u64;
        }
        mass += 1;
    }
    if mass == 0 {
        return None;
    }
    let mut position = [0.0; 3];
    for axis in 0..3 {
        position[axis] = geometry.axis_world(axis, sums[axis] as f64 / mass as f64);
    }
    Some(CenterOfMass { position, mass })
}

/// Center of mass of all labeled voxels.
pub fn center_of_mass(labels: &LabelGrid) -> Result<CenterOfMass> {
    let indices = labels
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| i);
    centroid_of_indices(labels.geometry(), indices).ok_or(Error::EmptyMask)
}

#[derive(Debug, Clone, Copy)]
struct AxisTap {
    lower: usize,
    upper: usize,
    frac: f64,
}

fn axis_taps(source: &Geometry, target: &Geometry, axis: usize) -> Vec<Option<AxisTap>> {
    let n = source.dims[axis];
    let last = (n - 1) as f64;
    (0..target.dims[axis])
        .map(|i| {
            let world = target.axis_world(axis, i as f64);
            let u = (world - source.origin[axis]) / source.spacing[axis];
            if u < -INDEX_EPS || u > last + INDEX_EPS {
                return None;
            }
            let u = u.clamp(0.0, last);
            let mut lower = u.floor() as usize;
            let mut frac = u - lower as f64;
            if frac < INDEX_EPS {
                frac = 0.0;
            } else if frac > 1.0 - INDEX_EPS {
                lower += 1;
                frac = 0.0;
            }
            let upper = if frac == 0.0 { lower } else { lower + 1 };
            Some(AxisTap { lower, upper, frac })
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Trilinear sampler of a source grid at the voxel centers of a target grid.
///
/// Per-axis interpolation taps are precomputed once, so sampling a voxel costs
/// eight reads at most.
pub struct Sampler<'a, T> {
    source: &'a VolumeGrid<T>,
    taps: [Vec<Option<AxisTap>>; 3],
}

impl<'a, T: Copy + Into<f64>> Sampler<'a, T> {
    pub fn new(source: &'a VolumeGrid<T>, target: &Geometry) -> Self {
        let g = source.geometry();
        Self {
            source,
            taps: [
                axis_taps(g, target, 0),
                axis_taps(g, target, 1),
                axis_taps(g, target, 2),
            ],
        }
    }

    /// True when the target voxel lies inside the source extent.
    #[inline]
    pub fn covers(&self, index: [usize; 3]) -> bool {
        self.taps[0][index[0]].is_some()
            && self.taps[1][index[1]].is_some()
            && self.taps[2][index[2]].is_some()
    }

    /// True when target slice `z` lies inside the source z extent.
    #[inline]
    pub fn covers_z(&self, z: usize) -> bool {
        self.taps[2][z].is_some()
    }

    /// Interpolated value at a target voxel, `None` outside the source extent.
    #[inline]
    pub fn sample(&self, index: [usize; 3]) -> Option<f64> {
        let tx = self.taps[0][index[0]]?;
        let ty = self.taps[1][index[1]]?;
        let tz = self.taps[2][index[2]]?;
        let src = self.source;
        let at = |x: usize, y: usize, z: usize| -> f64 { src.get([x, y, z]).into() };
        let plane = |z: usize| -> f64 {
            let row = |y: usize| lerp(at(tx.lower, y, z), at(tx.upper, y, z), tx.frac);
            if ty.frac == 0.0 {
                row(ty.lower)
            } else {
                lerp(row(ty.lower), row(ty.upper), ty.frac)
            }
        };
        Some(if tz.frac == 0.0 {
            plane(tz.lower)
        } else {
            lerp(plane(tz.lower), plane(tz.upper), tz.frac)
        })
    }
}

/// Resample `source` onto `target` by trilinear interpolation at each target
/// voxel center. Positions outside the source extent receive 0.
pub fn resample_trilinear<T: Copy + Into<f64>>(
    source: &VolumeGrid<T>,
    target: &Geometry,
) -> Result<ImageGrid> {
    target.validate()?;
    let sampler = Sampler::new(source, target);
    VolumeGrid::from_fn(*target, |idx| sampler.sample(idx).unwrap_or(0.0) as f32)
}
