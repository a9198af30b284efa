//! Synthetic two-station phantoms with analytic ground truth.
//!
//! The phantom lives on a union grid centered on the world origin. Station 3
//! (lower) covers the bottom `nz` union slices and station 2 (upper) the top
//! `nz`; they share `overlap_slices` slices. Both are rendered from the same
//! analytic scene, so without motion their overlap content is identical,
//! noise included (noise is drawn once per union voxel).
//!
//! Membership is decided at voxel centers only: a voxel is kidney when its
//! center lies inside a kidney ellipsoid and outside every cyst.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::preprocess::DEFAULT_TRIM;
use crate::volgrid::{Geometry, ImageGrid, LabelGrid, Vec3};

/// Subject side. Left is +x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn of_x(x: f64) -> Self {
        if x > 0.0 {
            Self::Left
        } else {
            Self::Right
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Left => "left",
            Self::Right => "right",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(Error::PhantomSpec(format!("unknown side '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub intensity: f32,
}

impl Ellipsoid {
    pub fn contains(&self, p: Vec3) -> bool {
        let mut s = 0.0;
        for axis in 0..3 {
            let d = (p[axis] - self.center[axis]) / self.semi_axes[axis];
            s += d * d;
        }
        s <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes[0] * self.semi_axes[1] * self.semi_axes[2]
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        let lo = [0, 1, 2].map(|a| self.center[a] - self.semi_axes[a]);
        let hi = [0, 1, 2].map(|a| self.center[a] + self.semi_axes[a]);
        (lo, hi)
    }
}

/// Spherical cyst: removed from the labels and dimmed in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Cyst {
    pub center: Vec3,
    pub radius: f64,
    pub intensity: f32,
}

impl Cyst {
    pub fn contains(&self, p: Vec3) -> bool {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        (
            self.center.map(|c| c - self.radius),
            self.center.map(|c| c + self.radius),
        )
    }
}

/// Cubic bright islands of `edge_voxels`³ voxels, placed away from kidneys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Islands {
    pub count: usize,
    pub edge_voxels: usize,
}

impl Islands {
    pub fn total_voxels(&self) -> usize {
        self.count * self.edge_voxels.pow(3)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifacts {
    /// Integer voxel shift of the lower station's content.
    pub motion_shift_voxels: [i32; 3],
    pub islands: Option<Islands>,
    pub cysts: Vec<Cyst>,
    pub delete_kidney: Option<Side>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub station_dims: [usize; 3],
    pub spacing: Vec3,
    pub overlap_slices: usize,
    pub kidneys: Vec<Ellipsoid>,
    pub background: f32,
    pub noise_sigma: f64,
    pub artifacts: Artifacts,
    /// Permit kidneys that extend past the union grid.
    pub allow_outside: bool,
}

pub const DEFAULT_SEMI_AXES: Vec3 = [30.0, 25.0, 50.0];
pub const DEFAULT_KIDNEY_X: f64 = 76.5;

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            station_dims: [224, 174, 44],
            spacing: [2.232, 2.232, 4.5],
            overlap_slices: 18,
            kidneys: vec![
                Ellipsoid {
                    center: [DEFAULT_KIDNEY_X, 0.0, 0.0],
                    semi_axes: DEFAULT_SEMI_AXES,
                    intensity: 0.9,
                },
                Ellipsoid {
                    center: [-DEFAULT_KIDNEY_X, 0.0, 0.0],
                    semi_axes: DEFAULT_SEMI_AXES,
                    intensity: 0.9,
                },
            ],
            background: 0.1,
            noise_sigma: 0.0,
            artifacts: Artifacts::default(),
            allow_outside: false,
        }
    }
}

impl PhantomSpec {
    /// Coarse geometry for large synthetic cohorts.
    pub fn small() -> Self {
        let kidney = |x: f64| Ellipsoid {
            center: [x, 0.0, 0.0],
            semi_axes: [25.0, 20.0, 45.0],
            intensity: 0.9,
        };
        Self {
            station_dims: [64, 48, 20],
            spacing: [4.5, 4.5, 9.0],
            overlap_slices: 8,
            kidneys: vec![kidney(60.0), kidney(-60.0)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PhantomSpec(m));
        Geometry::new(self.station_dims, self.spacing, [0.0; 3])
            .map_err(|e| Error::PhantomSpec(e.to_string()))?;
        if self.overlap_slices >= self.station_dims[2] {
            return bad(format!(
                "overlap of {} slices must be below station nz {}",
                self.overlap_slices, self.station_dims[2]
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        for (i, k) in self.kidneys.iter().enumerate() {
            if k.intensity <= self.background {
                return bad(format!(
                    "kidney {i} intensity {} not above background {}",
                    k.intensity, self.background
                ));
            }
            if k.semi_axes.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                return bad(format!("kidney {i} has non-positive semi-axes"));
            }
        }
        for (i, c) in self.artifacts.cysts.iter().enumerate() {
            if !(c.radius.is_finite() && c.radius > 0.0) {
                return bad(format!("cyst {i} radius {} must be > 0", c.radius));
            }
        }
        if let Some(islands) = self.artifacts.islands {
            if islands.count > 0 && islands.edge_voxels == 0 {
                return bad("island edge must be at least one voxel".into());
            }
        }
        Ok(())
    }

    /// Union grid of both stations, centered on the world origin.
    pub fn union_geometry(&self) -> Geometry {
        let [nx, ny, nz] = self.station_dims;
        let dims = [nx, ny, 2 * nz - self.overlap_slices];
        let origin = [0, 1, 2].map(|a| -((dims[a] - 1) as f64) / 2.0 * self.spacing[a]);
        Geometry {
            dims,
            spacing: self.spacing,
            origin,
        }
    }

    /// Station 2 (upper) and station 3 (lower) geometries.
    pub fn station_geometries(&self) -> (Geometry, Geometry) {
        let union = self.union_geometry();
        let lower = Geometry {
            dims: self.station_dims,
            ..union
        };
        let mut upper = lower;
        upper.origin[2] += (self.station_dims[2] - self.overlap_slices) as f64 * self.spacing[2];
        (upper, lower)
    }

    /// Half the z extent, between voxel centers, of the fused volume built
    /// from stations trimmed by `n_trim` slices.
    pub fn fused_half_extent_z(&self, n_trim: usize) -> f64 {
        let nz = self.union_geometry().dims[2] - 2 * n_trim;
        (nz - 1) as f64 / 2.0 * self.spacing[2]
    }

    fn active_kidneys(&self) -> impl Iterator<Item = &Ellipsoid> {
        self.kidneys
            .iter()
            .filter(move |k| Some(Side::of_x(k.center[0])) != self.artifacts.delete_kidney)
    }
}

/// Analytic and voxelized truth for one kidney.
#[derive(Debug, Clone, PartialEq)]
pub struct KidneyTruth {
    pub side: Side,
    pub analytic_cm3: f64,
    pub analytic_com: Vec3,
    pub voxel_count: usize,
    pub voxel_cm3: f64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Station 2.
    pub upper: ImageGrid,
    /// Station 3.
    pub lower: ImageGrid,
    /// Ideal segmenter output per station, islands included.
    pub upper_labels: LabelGrid,
    pub lower_labels: LabelGrid,
    /// Kidney tissue on the union grid, without islands or motion.
    pub truth: LabelGrid,
    pub kidneys: Vec<KidneyTruth>,
    /// Voxel boxes of the injected islands, in union indices.
    pub islands: Vec<[usize; 3]>,
    pub island_voxels: usize,
}

impl Phantom {
    pub fn kidney(&self, side: Side) -> Option<&KidneyTruth> {
        self.kidneys.iter().find(|k| k.side == side)
    }

    pub fn analytic_distance_mm(&self) -> Option<f64> {
        let l = self.kidney(Side::Left)?.analytic_com;
        let r = self.kidney(Side::Right)?.analytic_com;
        Some(crate::measure::distance(l, r))
    }
}

struct Scene<'a> {
    spec: &'a PhantomSpec,
    kidneys: Vec<&'a Ellipsoid>,
    union: Geometry,
    islands: Vec<[usize; 3]>,
    island_edge: usize,
    island_intensity: f32,
}

impl Scene<'_> {
    /// Label and noise-free intensity at a world point.
    fn eval(&self, p: Vec3) -> (bool, f32) {
        if self.in_island(p) {
            return (true, self.island_intensity);
        }
        for k in &self.kidneys {
            if k.contains(p) {
                if let Some(c) = self.spec.artifacts.cysts.iter().find(|c| c.contains(p)) {
                    return (false, c.intensity);
                }
                return (true, k.intensity);
            }
        }
        (false, self.spec.background)
    }

    fn in_island(&self, p: Vec3) -> bool {
        if self.islands.is_empty() {
            return false;
        }
        let idx = [0, 1, 2]
            .map(|a| ((p[a] - self.union.origin[a]) / self.union.spacing[a]).round() as i64);
        let e = self.island_edge as i64;
        self.islands.iter().any(|corner| {
            (0..3).all(|a| idx[a] >= corner[a] as i64 && idx[a] < corner[a] as i64 + e)
        })
    }

    fn render(
        &self,
        station: &Geometry,
        union_z0: usize,
        shift: [i32; 3],
        noise: &[f32],
    ) -> Result<(ImageGrid, LabelGrid)> {
        let [nx, ny, nz] = station.dims;
        let n = nx * ny * nz;
        let mut image = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let offset = [0, 1, 2].map(|a| shift[a] as f64 * station.spacing[a]);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p =
                        [0, 1, 2].map(|a| station.axis_world(a, [x, y, z][a] as f64) - offset[a]);
                    let (label, value) = self.eval(p);
                    let u = self.union.linear_index([x, y, z + union_z0]);
                    image.push(value + noise.get(u).copied().unwrap_or(0.0));
                    labels.push(u8::from(label));
                }
            }
        }
        Ok((
            ImageGrid::new(*station, image)?,
            LabelGrid::labels(*station, labels)?,
        ))
    }
}

/// Render the phantom described by `spec`. Identical inputs give bit-identical
/// output.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let union = spec.union_geometry();
    let kidneys: Vec<&Ellipsoid> = spec.active_kidneys().collect();
    if !spec.allow_outside {
        for k in &kidneys {
            let (lo, hi) = k.bounds();
            for a in 0..3 {
                let (ulo, uhi) = union.extent(a);
                if lo[a] < ulo || hi[a] > uhi {
                    return Err(Error::PhantomSpec(format!(
                        "kidney at {:?} extends outside the station union along {}",
                        k.center,
                        ['x', 'y', 'z'][a]
                    )));
                }
            }
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = if spec.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::PhantomSpec(e.to_string()))?;
        (0..union.len())
            .map(|_| normal.sample(&mut noise_rng) as f32)
            .collect()
    } else {
        Vec::new()
    };

    let mut island_rng = ChaCha8Rng::seed_from_u64(seed);
    island_rng.set_stream(1);
    let (islands, island_edge) = match spec.artifacts.islands {
        Some(isl) if isl.count > 0 => (
            place_islands(&union, &kidneys, isl, &mut island_rng)?,
            isl.edge_voxels,
        ),
        _ => (Vec::new(), 0),
    };

    let scene = Scene {
        spec,
        island_intensity: kidneys
            .iter()
            .map(|k| k.intensity)
            .fold(spec.background + 0.8, f32::max),
        kidneys,
        union,
        islands,
        island_edge,
    };

    let (upper_geom, lower_geom) = spec.station_geometries();
    let upper_z0 = spec.station_dims[2] - spec.overlap_slices;
    let (upper, upper_labels) = scene.render(&upper_geom, upper_z0, [0; 3], &noise)?;
    let (lower, lower_labels) =
        scene.render(&lower_geom, 0, spec.artifacts.motion_shift_voxels, &noise)?;

    let mut truth_values = vec![0u8; union.len()];
    let mut counts = vec![0usize; scene.kidneys.len()];
    for (i, v) in truth_values.iter_mut().enumerate() {
        let p = union.voxel_to_world(union.index_of(i))?;
        if spec.artifacts.cysts.iter().any(|c| c.contains(p)) {
            continue;
        }
        if let Some(k) = scene.kidneys.iter().position(|k| k.contains(p)) {
            *v = 1;
            counts[k] += 1;
        }
    }
    let truth = LabelGrid::labels(union, truth_values)?;

    let voxel_mm3 = union.voxel_volume_mm3();
    let kidney_truths = scene
        .kidneys
        .iter()
        .zip(&counts)
        .map(|(k, &count)| {
            let (volume_mm3, com) = analytic_kidney(k, &spec.artifacts.cysts);
            KidneyTruth {
                side: Side::of_x(k.center[0]),
                analytic_cm3: volume_mm3 / 1000.0,
                analytic_com: com,
                voxel_count: count,
                voxel_cm3: count as f64 * voxel_mm3 / 1000.0,
            }
        })
        .collect();

    let island_voxels = scene.islands.len() * island_edge.pow(3);
    Ok(Phantom {
        upper,
        lower,
        upper_labels,
        lower_labels,
        truth,
        kidneys: kidney_truths,
        islands: scene.islands,
        island_voxels,
    })
}

/// Island corners inside the retained slices, at least two voxels clear of
/// every kidney bounding box, every other island and the grid edge.
fn place_islands(
    union: &Geometry,
    kidneys: &[&Ellipsoid],
    islands: Islands,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[usize; 3]>> {
    const MARGIN: usize = 2;
    let e = islands.edge_voxels;
    let lo = [MARGIN, MARGIN, DEFAULT_TRIM + MARGIN];
    let hi = [0, 1, 2].map(|a| union.dims[a].saturating_sub(lo[a] + e));
    if (0..3).any(|a| hi[a] < lo[a]) {
        return Err(Error::PhantomSpec("islands do not fit in the grid".into()));
    }
    let kidney_boxes: Vec<([i64; 3], [i64; 3])> = kidneys
        .iter()
        .map(|k| {
            let (wlo, whi) = k.bounds();
            let to_idx = |w: Vec3, f: fn(f64) -> f64| {
                [0, 1, 2].map(|a| f((w[a] - union.origin[a]) / union.spacing[a]) as i64)
            };
            (to_idx(wlo, f64::floor), to_idx(whi, f64::ceil))
        })
        .collect();
    let clear = |corner: [usize; 3], blo: [i64; 3], bhi: [i64; 3]| {
        (0..3).any(|a| {
            let c = corner[a] as i64;
            let m = MARGIN as i64;
            c + e as i64 - 1 + m < blo[a] || c - m > bhi[a]
        })
    };

    let mut placed: Vec<[usize; 3]> = Vec::with_capacity(islands.count);
    let mut attempts = 0;
    while placed.len() < islands.count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::PhantomSpec(format!(
                "could not place {} islands clear of the kidneys",
                islands.count
            )));
        }
        let corner = [0, 1, 2].map(|a| rng.random_range(lo[a]..=hi[a]));
        let ok = kidney_boxes
            .iter()
            .all(|&(blo, bhi)| clear(corner, blo, bhi))
            && placed.iter().all(|&other| {
                let olo = other.map(|v| v as i64);
                let ohi = other.map(|v| (v + e - 1) as i64);
                clear(corner, olo, ohi)
            });
        if ok {
            placed.push(corner);
        }
    }
    Ok(placed)
}

/// Volume (mm³) and centroid of an ellipsoid minus the cysts it contains.
///
/// A cyst lying wholly inside the ellipsoid and disjoint from other cysts is
/// subtracted in closed form; any other overlap is integrated numerically.
fn analytic_kidney(k: &Ellipsoid, cysts: &[Cyst]) -> (f64, Vec3) {
    let (klo, khi) = k.bounds();
    let relevant: Vec<&Cyst> = cysts
        .iter()
        .filter(|c| {
            let (clo, chi) = c.bounds();
            (0..3).all(|a| chi[a] >= klo[a] && clo[a] <= khi[a])
        })
        .collect();

    let mut volume = k.volume_mm3();
    let mut moment = k.center.map(|c| c * volume);
    let mut complex = Vec::new();
    for (i, c) in relevant.iter().enumerate() {
        let (clo, chi) = c.bounds();
        let inside = (0..8).all(|corner| {
            let p = [0, 1, 2].map(|a| if corner >> a & 1 == 1 { chi[a] } else { clo[a] });
            k.contains(p)
        });
        let isolated = relevant.iter().enumerate().all(|(j, o)| {
            i == j || crate::measure::distance(c.center, o.center) > c.radius + o.radius
        });
        if inside && isolated {
            let v = 4.0 / 3.0 * PI * c.radius.powi(3);
            volume -= v;
            for a in 0..3 {
                moment[a] -= c.center[a] * v;
            }
        } else {
            complex.push(*c);
        }
    }

    if !complex.is_empty() {
        const N: usize = 128;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &complex {
            let (clo, chi) = c.bounds();
            for a in 0..3 {
                lo[a] = lo[a].min(clo[a]).max(klo[a]);
                hi[a] = hi[a].max(chi[a]).min(khi[a]);
            }
        }
        let h = [0, 1, 2].map(|a| (hi[a] - lo[a]) / N as f64);
        let cell = h[0] * h[1] * h[2];
        let mut removed = 0.0;
        let mut removed_moment = [0.0; 3];
        for iz in 0..N {
            for iy in 0..N {
                for ix in 0..N {
                    let p = [
                        lo[0] + (ix as f64 + 0.5) * h[0],
                        lo[1] + (iy as f64 + 0.5) * h[1],
                        lo[2] + (iz as f64 + 0.5) * h[2],
                    ];
                    if k.contains(p) && complex.iter().any(|c| c.contains(p)) {
                        removed += cell;
                        for a in 0..3 {
                            removed_moment[a] += p[a] * cell;
                        }
                    }
                }
            }
        }
        volume -= removed;
        for a in 0..3 {
            moment[a] -= removed_moment[a];
        }
    }

    let com = if volume > 0.0 {
        moment.map(|m| m / volume)
    } else {
        k.center
    };
    (volume.max(0.0), com)
}

/// Kind and severity of an injected artifact in a synthetic cohort.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArtifactKind {
    Motion(i32),
    Islands(usize),
    Cyst(f64),
    DeleteKidney(Side),
    Displaced(f64),
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Motion(v) => write!(f, "motion_{v}"),
            Self::Islands(n) => write!(f, "islands_{n}"),
            Self::Cyst(r) => write!(f, "cyst_{r}"),
            Self::DeleteKidney(side) => write!(f, "delete_{side}"),
            Self::Displaced(frac) => write!(f, "displaced_{frac}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortMember {
    pub subject_id: String,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub artifact: Option<ArtifactKind>,
}

/// Build `n` jittered phantom specs from `base`, `n_artifacts` of which carry
/// an artifact. Artifact kinds cycle through motion, islands, cysts, a deleted
/// kidney and a displaced pair, with growing severity.
pub fn cohort_specs(
    base: &PhantomSpec,
    n: usize,
    n_artifacts: usize,
    seed: u64,
) -> Result<Vec<CohortMember>> {
    base.validate()?;
    if n_artifacts > n {
        return Err(Error::PhantomSpec(format!(
            "{n_artifacts} artifact subjects requested in a cohort of {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut artifact_rank = vec![None; n];
    for (rank, &subject) in order.iter().take(n_artifacts).enumerate() {
        artifact_rank[subject] = Some(rank);
    }

    let width = n.to_string().len().max(4);
    let half_z = base.fused_half_extent_z(DEFAULT_TRIM);
    let mut members = Vec::with_capacity(n);
    for (i, rank) in artifact_rank.into_iter().enumerate() {
        let mut spec = base.clone();
        for k in &mut spec.kidneys {
            k.center[0] += rng.random_range(-2.0..=2.0) * spec.spacing[0];
            k.center[1] += rng.random_range(-2.0..=2.0) * spec.spacing[1];
            k.center[2] += rng.random_range(-0.5..=0.5) * spec.spacing[2];
            for s in &mut k.semi_axes {
                *s *= rng.random_range(0.9..=1.1);
            }
        }
        let artifact = rank.map(|r| {
            let severity = 1 + (r / 5) % 4;
            match r % 5 {
                0 => ArtifactKind::Motion(severity as i32),
                1 => ArtifactKind::Islands(2 * severity),
                2 => ArtifactKind::Cyst(0.3 + 0.1 * severity as f64),
                3 => ArtifactKind::DeleteKidney(Side::Right),
                _ => ArtifactKind::Displaced(0.2 + 0.08 * severity as f64),
            }
        });
        match artifact {
            Some(ArtifactKind::Motion(v)) => spec.artifacts.motion_shift_voxels = [v, v, 0],
            Some(ArtifactKind::Islands(count)) => {
                spec.artifacts.islands = Some(Islands {
                    count,
                    edge_voxels: 2,
                })
            }
            Some(ArtifactKind::Cyst(fraction)) => {
                if let Some(k) = spec.kidneys.first() {
                    let radius = fraction * k.semi_axes[0];
                    spec.artifacts.cysts.push(Cyst {
                        center: [k.center[0], k.center[1], k.center[2] + 0.4 * k.semi_axes[2]],
                        radius,
                        intensity: spec.background,
                    });
                }
            }
            Some(ArtifactKind::DeleteKidney(side)) => spec.artifacts.delete_kidney = Some(side),
            Some(ArtifactKind::Displaced(fraction)) => {
                for k in &mut spec.kidneys {
                    k.center[2] += fraction * half_z;
                }
                spec.allow_outside = true;
            }
            None => {}
        }
        members.push(CohortMember {
            subject_id: format!("sub-{:0width$}", i + 1),
            seed: seed.wrapping_add(i as u64 + 1),
            spec,
            artifact,
        });
    }
    Ok(members)
}

/// Write a phantom's stations, trimmed station masks and truth as volume
/// files named after `subject_id`, returning the manifest row. `extension`
/// is `nii` or `raw`. Reference values are the analytic ones.
pub fn export(
    phantom: &Phantom,
    dir: &std::path::Path,
    subject_id: &str,
    extension: &str,
    n_trim: usize,
) -> Result<crate::manifest::ManifestRow> {
    use crate::preprocess::trim_station;
    use crate::volio;

    let file = |suffix: &str| dir.join(format!("{subject_id}_{suffix}.{extension}"));
    let mut row = crate::manifest::ManifestRow::new(subject_id, file("station2"), file("station3"));
    volio::write_image(&row.station2, &phantom.upper)?;
    volio::write_image(&row.station3, &phantom.lower)?;
    let mask2 = file("station2_mask");
    let mask3 = file("station3_mask");
    volio::write_labels(&mask2, &trim_station(&phantom.upper_labels, n_trim)?)?;
    volio::write_labels(&mask3, &trim_station(&phantom.lower_labels, n_trim)?)?;
    row.mask2 = Some(mask2);
    row.mask3 = Some(mask3);
    let vol = |side| phantom.kidney(side).map_or(0.0, |k| k.analytic_cm3);
    row.ref_vol_left_cm3 = Some(vol(Side::Left));
    row.ref_vol_right_cm3 = Some(vol(Side::Right));
    row.ref_vol_total_cm3 = Some(vol(Side::Left) + vol(Side::Right));
    row.ref_distance_mm = phantom.analytic_distance_mm();
    Ok(row)
}

/// Generate and export every cohort member under `out` on `workers` threads.
/// Volumes go to `out/volumes`; `out/manifest.csv` lists them with paths
/// relative to `out`, and `out/artifacts.csv` records each injected artifact.
pub fn write_cohort(
    members: &[CohortMember],
    out: &std::path::Path,
    extension: &str,
    n_trim: usize,
    workers: usize,
) -> Result<crate::manifest::Manifest> {
    use rayon::prelude::*;

    let dir = out.join("volumes");
    std::fs::create_dir_all(&dir)?;
    let rows = crate::pipeline::with_pool(workers, || {
        members
            .par_iter()
            .map(|m| {
                let p = generate(&m.spec, m.seed)?;
                let mut row = export(&p, &dir, &m.subject_id, extension, n_trim)?;
                let rel = |p: &mut std::path::PathBuf| {
                    if let Ok(r) = p.strip_prefix(out) {
                        *p = r.to_path_buf();
                    }
                };
                rel(&mut row.station2);
                rel(&mut row.station3);
                row.mask2.iter_mut().for_each(rel);
                row.mask3.iter_mut().for_each(rel);
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let manifest = crate::manifest::Manifest::new(rows)?;
    manifest.write(&out.join("manifest.csv"))?;

    let mut artifacts = csv::Writer::from_path(out.join("artifacts.csv"))?;
    artifacts.write_record(["subject_id", "seed", "artifact"])?;
    for m in members {
        let kind = m.artifact.map(|a| a.to_string()).unwrap_or_default();
        artifacts.write_record([m.subject_id.as_str(), &m.seed.to_string(), &kind])?;
    }
    artifacts.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fuse;
    use crate::morphology::{connected_components, split_pair, Connectivity};
    use crate::preprocess::trim_station;

    fn single(center: Vec3) -> PhantomSpec {
        PhantomSpec {
            kidneys: vec![Ellipsoid {
                center,
                semi_axes: DEFAULT_SEMI_AXES,
                intensity: 0.9,
            }],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_geometry() {
        let spec = PhantomSpec::default();
        assert_eq!(spec.union_geometry().dims, [224, 174, 70]);
        let (upper, lower) = spec.station_geometries();
        assert!(upper.origin[2] > lower.origin[2]);
        assert!((upper.origin[2] - lower.origin[2] - 26.0 * 4.5).abs() < 1e-9);
        assert!(spec
            .union_geometry()
            .center()
            .iter()
            .all(|c| c.abs() < 1e-9));
        assert!((spec.fused_half_extent_z(3) - 141.75).abs() < 1e-9);
    }

    #[test]
    fn ellipsoid_volume_within_two_percent() {
        let p = generate(&single([40.0, 0.0, 0.0]), 0).unwrap();
        let k = &p.kidneys[0];
        assert!((k.analytic_cm3 - 157.0796).abs() < 1e-3);
        assert!((k.voxel_cm3 - k.analytic_cm3).abs() / k.analytic_cm3 < 0.02);
        assert_eq!(p.truth.count(), k.voxel_count);
        assert_eq!(k.side, Side::Left);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            noise_sigma: 0.02,
            artifacts: Artifacts {
                islands: Some(Islands {
                    count: 3,
                    edge_voxels: 2,
                }),
                ..Artifacts::default()
            },
            ..PhantomSpec::small()
        };
        let a = generate(&spec, 7).unwrap();
        let b = generate(&spec, 7).unwrap();
        let c = generate(&spec, 8).unwrap();
        assert_eq!(a.upper, b.upper);
        assert_eq!(a.lower_labels, b.lower_labels);
        assert_eq!(a.islands, b.islands);
        assert_ne!(a.upper, c.upper);
    }

    #[test]
    fn overlap_content_identical_without_motion() {
        let spec = PhantomSpec {
            noise_sigma: 0.05,
            ..PhantomSpec::small()
        };
        let p = generate(&spec, 3).unwrap();
        let nz = spec.station_dims[2];
        let ov = spec.overlap_slices;
        for k in 0..ov {
            assert_eq!(p.upper.slice_z(k), p.lower.slice_z(nz - ov + k));
            assert_eq!(
                p.upper_labels.slice_z(k),
                p.lower_labels.slice_z(nz - ov + k)
            );
        }
    }

    #[test]
    fn motion_changes_only_lower_station() {
        let spec = PhantomSpec::small();
        let clean = generate(&spec, 1).unwrap();
        let mut moved_spec = spec.clone();
        moved_spec.artifacts.motion_shift_voxels = [2, 0, 0];
        let moved = generate(&moved_spec, 1).unwrap();
        assert_eq!(clean.upper, moved.upper);
        assert_ne!(clean.lower, moved.lower);
        assert_eq!(clean.truth, moved.truth);
    }

    #[test]
    fn kidney_outside_union_is_rejected() {
        let spec = single([0.0, 0.0, 300.0]);
        assert!(matches!(generate(&spec, 0), Err(Error::PhantomSpec(_))));
        let allowed = PhantomSpec {
            allow_outside: true,
            ..spec
        };
        assert!(generate(&allowed, 0).is_ok());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = PhantomSpec::small();
        spec.overlap_slices = 20;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::small();
        spec.kidneys[0].intensity = 0.05;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cyst_inside_kidney_is_subtracted_exactly() {
        let mut spec = single([40.0, 0.0, 0.0]);
        spec.artifacts.cysts.push(Cyst {
            center: [40.0, 0.0, 10.0],
            radius: 10.0,
            intensity: 0.1,
        });
        let p = generate(&spec, 0).unwrap();
        let k = &p.kidneys[0];
        let expected = (DEFAULT_SEMI_AXES.iter().product::<f64>() - 1000.0) * 4.0 / 3.0 * PI;
        assert!((k.analytic_cm3 * 1000.0 - expected).abs() < 1e-6);
        // moment balance: cyst above center pulls the centroid down
        let v_cyst = 4.0 / 3.0 * PI * 1000.0;
        assert!((k.analytic_com[2] + 10.0 * v_cyst / expected).abs() < 1e-9);
        assert!((k.voxel_cm3 - k.analytic_cm3).abs() / k.analytic_cm3 < 0.03);
    }

    #[test]
    fn partial_cyst_uses_quadrature() {
        let k = Ellipsoid {
            center: [0.0; 3],
            semi_axes: [20.0, 20.0, 20.0],
            intensity: 0.9,
        };
        // sphere-sphere lens: R = 20, r = 10, centers 20 apart
        let c = Cyst {
            center: [20.0, 0.0, 0.0],
            radius: 10.0,
            intensity: 0.1,
        };
        let (v, _) = analytic_kidney(&k, &[c]);
        let (r_big, r_small, d): (f64, f64, f64) = (20.0, 10.0, 20.0);
        let lens = PI
            * (r_big + r_small - d).powi(2)
            * (d * d + 2.0 * d * r_small - 3.0 * r_small * r_small
                + 2.0 * d * r_big
                + 6.0 * r_small * r_big
                - 3.0 * r_big * r_big)
            / (12.0 * d);
        let exact = 4.0 / 3.0 * PI * 8000.0 - lens;
        assert!((v - exact).abs() / exact < 1e-3, "{v} vs {exact}");
    }

    #[test]
    fn islands_are_separate_components() {
        let spec = PhantomSpec {
            artifacts: Artifacts {
                islands: Some(Islands {
                    count: 4,
                    edge_voxels: 2,
                }),
                ..Artifacts::default()
            },
            ..PhantomSpec::small()
        };
        let p = generate(&spec, 11).unwrap();
        assert_eq!(p.island_voxels, 32);
        let upper = trim_station(&p.upper, 3).unwrap();
        let lower = trim_station(&p.lower, 3).unwrap();
        let ul = trim_station(&p.upper_labels, 3).unwrap();
        let ll = trim_station(&p.lower_labels, 3).unwrap();
        let fused = fuse(&upper, &lower, &ul, &ll).unwrap();
        let set = connected_components(&fused.labels, Connectivity::TwentySix);
        let pair = split_pair(&set, fused.labels.geometry().center()[0]);
        assert_eq!(pair.scrap_voxels, 32);
    }

    #[test]
    fn cohort_is_deterministic_with_requested_artifacts() {
        let a = cohort_specs(&PhantomSpec::small(), 50, 10, 5).unwrap();
        let b = cohort_specs(&PhantomSpec::small(), 50, 10, 5).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.iter().filter(|m| m.artifact.is_some()).count(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.subject_id, y.subject_id);
            assert_eq!(x.spec, y.spec);
        }
        assert_eq!(a[0].subject_id, "sub-0001");
        for m in &a {
            generate(&m.spec, m.seed).unwrap();
        }
    }
}
