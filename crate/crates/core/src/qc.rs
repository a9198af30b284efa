//! Algorithmic quality ratings and two-stage percentile flagging.
//!
//! Five cost terms are computed per subject, higher meaning worse:
//!
//! * image fusion: intensity disagreement of both stations inside their
//!   overlap, normalized by the intensity range found there;
//! * segmentation fusion: label disagreement inside the overlap;
//! * location: longitudinal offset of the labeled COM from the volume center;
//! * smoothness: label changes between adjacent axial slices;
//! * scrap: share of labeled voxels outside the two largest components.
//!
//! Fusion and smoothness costs carry both the raw sum and a per-voxel
//! normalized value. Flagging ranks subjects by one of the two (the policy
//! picks which) so cohorts with differing overlap sizes remain comparable.
//!
//! Stage one flags the worst fractions of location, image fusion and
//! segmentation fusion cost. Stage two ranks the stage-one survivors by
//! smoothness and scrap. Subjects flagged only for location are re-included
//! when their labels touch neither the top nor the bottom slice, an automated
//! stand-in for "too small to extend beyond the field of view".

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{StationSamplers, ZRange};
use crate::morphology::KidneyPair;
use crate::volgrid::{center_of_mass, ImageGrid, LabelGrid};

/// Location cost reported for a subject without any labeled voxel. Larger
/// than any attainable location cost (at most 1).
pub const EMPTY_LOCATION_COST: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionCost {
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothnessCost {
    pub raw: u64,
    pub normalized: f64,
}

/// Sum of absolute intensity differences over the overlap, divided by the
/// intensity range of the overlap; `normalized` further divides by the number
/// of overlap voxels.
pub fn image_fusion_cost(a: &ImageGrid, b: &ImageGrid, overlap: &ZRange) -> Result<FusionCost> {
    let samplers = StationSamplers::new(a, b)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    samplers.for_each_overlap(overlap, |u, l| {
        sum += (u - l).abs();
        count += 1;
        lo = lo.min(u).min(l);
        hi = hi.max(u).max(l);
    });
    if count == 0 {
        return Err(Error::EmptyOverlap);
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(FusionCost::default());
    }
    let raw = sum / range;
    Ok(FusionCost {
        raw,
        normalized: raw / count as f64,
    })
}

/// Number of overlap voxels whose labels disagree, and that count per overlap
/// voxel.
pub fn segmentation_fusion_cost(
    a: &LabelGrid,
    b: &LabelGrid,
    overlap: &ZRange,
) -> Result<FusionCost> {
    let samplers = StationSamplers::new(a, b)?;
    let mut disagree = 0usize;
    let mut count = 0usize;
    samplers.for_each_overlap(overlap, |u, l| {
        if (u >= 0.5) != (l >= 0.5) {
            disagree += 1;
        }
        count += 1;
    });
    if count == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(FusionCost {
        raw: disagree as f64,
        normalized: disagree as f64 / count as f64,
    })
}

/// `|z_com - z_center| / (z_extent / 2)`: 0 at the volume center, 1 at the
/// outermost slice. Empty labels give [`EMPTY_LOCATION_COST`].
pub fn location_cost(labels: &LabelGrid) -> f64 {
    let Ok(com) = center_of_mass(labels) else {
        return EMPTY_LOCATION_COST;
    };
    let (lo, hi) = labels.geometry().extent(2);
    let half = 0.5 * (hi - lo);
    if half <= 0.0 {
        return 0.0;
    }
    ((com.position[2] - 0.5 * (lo + hi)).abs() / half).min(1.0)
}

/// Sum over adjacent axial slice pairs of label changes, and that sum per
/// labeled voxel.
pub fn smoothness_cost(labels: &LabelGrid) -> SmoothnessCost {
    let nz = labels.dims()[2];
    let mut raw = 0u64;
    for z in 0..nz.saturating_sub(1) {
        raw += labels
            .slice_z(z)
            .iter()
            .zip(labels.slice_z(z + 1))
            .filter(|(a, b)| (**a != 0) != (**b != 0))
            .count() as u64;
    }
    SmoothnessCost {
        raw,
        normalized: raw as f64 / labels.count().max(1) as f64,
    }
}

pub fn scrap_cost(pair: &KidneyPair, total_labeled: usize) -> f64 {
    pair.scrap_voxels as f64 / total_labeled.max(1) as f64
}

/// True when any labeled voxel lies in the first or last axial slice.
pub fn touches_z_border(labels: &LabelGrid) -> bool {
    let nz = labels.dims()[2];
    let any = |z: usize| labels.slice_z(z).iter().any(|&v| v != 0);
    any(0) || any(nz - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rating {
    Location,
    ImageFusion,
    SegmentationFusion,
    Smoothness,
    Scrap,
    EmptySegmentation,
}

impl Rating {
    pub const ALL_COSTS: [Rating; 5] = [
        Rating::ImageFusion,
        Rating::SegmentationFusion,
        Rating::Location,
        Rating::Smoothness,
        Rating::Scrap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rating::Location => "location",
            Rating::ImageFusion => "image_fusion",
            Rating::SegmentationFusion => "segmentation_fusion",
            Rating::Smoothness => "smoothness",
            Rating::Scrap => "scrap",
            Rating::EmptySegmentation => "empty_segmentation",
        }
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "location" => Rating::Location,
            "image_fusion" => Rating::ImageFusion,
            "segmentation_fusion" => Rating::SegmentationFusion,
            "smoothness" => Rating::Smoothness,
            "scrap" => Rating::Scrap,
            "empty_segmentation" => Rating::EmptySegmentation,
            other => return Err(Error::InvalidParameter(format!("unknown rating '{other}'"))),
        })
    }
}

/// Which value of a raw/normalized cost pair is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostVariant {
    #[default]
    Normalized,
    Raw,
}

impl FromStr for CostVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(Error::InvalidParameter(format!(
                "unknown cost variant '{other}'"
            ))),
        }
    }
}

impl fmt::Display for CostVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Flags {
    /// Stage-one ratings whose worst fraction included the subject.
    pub stage1: Vec<Rating>,
    /// Stage-two ratings; only ever set for stage-one survivors.
    pub stage2: Vec<Rating>,
    /// Flagged by location alone while its labels stay clear of both z borders.
    pub location_reincluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub subject_id: String,
    pub image_fusion: FusionCost,
    pub segmentation_fusion: FusionCost,
    pub location: f64,
    pub smoothness: SmoothnessCost,
    pub scrap: f64,
    pub empty_segmentation: bool,
    pub touches_z_border: bool,
    pub flags: Flags,
}

impl QualityReport {
    pub fn stage1_flagged(&self) -> bool {
        !self.flags.stage1.is_empty() && !self.flags.location_reincluded
    }

    pub fn stage2_flagged(&self) -> bool {
        !self.flags.stage2.is_empty()
    }

    pub fn surviving(&self) -> bool {
        !self.stage1_flagged() && !self.stage2_flagged()
    }

    /// Value ranked for `rating`.
    pub fn cost(&self, rating: Rating, variant: CostVariant) -> f64 {
        let pick = |c: FusionCost| match variant {
            CostVariant::Normalized => c.normalized,
            CostVariant::Raw => c.raw,
        };
        match rating {
            Rating::ImageFusion => pick(self.image_fusion),
            Rating::SegmentationFusion => pick(self.segmentation_fusion),
            Rating::Location => self.location,
            Rating::Smoothness => match variant {
                CostVariant::Normalized => self.smoothness.normalized,
                CostVariant::Raw => self.smoothness.raw as f64,
            },
            Rating::Scrap => self.scrap,
            Rating::EmptySegmentation => f64::from(u8::from(self.empty_segmentation)),
        }
    }
}

/// Worst-fraction thresholds for both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FlaggingPolicy {
    pub stage1_location: f64,
    pub stage1_image_fusion: f64,
    pub stage1_segmentation_fusion: f64,
    pub stage2_smoothness: f64,
    pub stage2_scrap: f64,
    pub variant: CostVariant,
    pub reinclude_location: bool,
}

impl Default for FlaggingPolicy {
    fn default() -> Self {
        Self {
            stage1_location: 0.01,
            stage1_image_fusion: 0.01,
            stage1_segmentation_fusion: 0.02,
            stage2_smoothness: 0.01,
            stage2_scrap: 0.01,
            variant: CostVariant::Normalized,
            reinclude_location: true,
        }
    }
}

impl FlaggingPolicy {
    pub fn stage1(&self) -> [(Rating, f64); 3] {
        [
            (Rating::Location, self.stage1_location),
            (Rating::ImageFusion, self.stage1_image_fusion),
            (Rating::SegmentationFusion, self.stage1_segmentation_fusion),
        ]
    }

    pub fn stage2(&self) -> [(Rating, f64); 2] {
        [
            (Rating::Smoothness, self.stage2_smoothness),
            (Rating::Scrap, self.stage2_scrap),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (rating, f) in self.stage1().into_iter().chain(self.stage2()) {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "flagging fraction for {rating} must lie in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Nearest-rank number of subjects in the worst `fraction` of `n`.
pub fn nearest_rank_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Positions in `candidates` of the worst `fraction` by `rating`, ties broken
/// by ascending subject id.
pub fn worst_fraction(
    reports: &[QualityReport],
    candidates: &[usize],
    rating: Rating,
    variant: CostVariant,
    fraction: f64,
) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        rb.cost(rating, variant)
            .partial_cmp(&ra.cost(rating, variant))
            .unwrap_or(Ordering::Equal)
            .then_with(|| ra.subject_id.cmp(&rb.subject_id))
    });
    order.truncate(nearest_rank_count(fraction, candidates.len()));
    order
}

/// Set stage-one and stage-two flags on every report. Existing flags are
/// discarded.
pub fn apply_flagging(reports: &mut [QualityReport], policy: &FlaggingPolicy) -> Result<()> {
    policy.validate()?;
    for r in reports.iter_mut() {
        r.flags = Flags::default();
        if r.empty_segmentation {
            r.flags.stage1.push(Rating::EmptySegmentation);
        }
    }
    let everyone: Vec<usize> = (0..reports.len()).collect();
    for (rating, fraction) in policy.stage1() {
        for i in worst_fraction(reports, &everyone, rating, policy.variant, fraction) {
            reports[i].flags.stage1.push(rating);
        }
    }
    for r in reports.iter_mut() {
        r.flags.stage1.sort();
        r.flags.location_reincluded = policy.reinclude_location
            && r.flags.stage1 == [Rating::Location]
            && !r.touches_z_border;
    }
    let survivors: Vec<usize> = everyone
        .into_iter()
        .filter(|&i| !reports[i].stage1_flagged())
        .collect();
    for (rating, fraction) in policy.stage2() {
        for i in worst_fraction(reports, &survivors, rating, policy.variant, fraction) {
            reports[i].flags.stage2.push(rating);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::Component;
    use crate::volgrid::{CenterOfMass, Geometry};

    fn geom(dims: [usize; 3], z0: f64) -> Geometry {
        Geometry::new(dims, [1.0, 1.0, 2.0], [0.0, 0.0, z0]).unwrap()
    }

    #[test]
    fn identical_stations_cost_nothing() {
        let a = ImageGrid::from_fn(geom([3, 3, 6], 0.0), |[x, y, z]| (x + y + z) as f32).unwrap();
        let b =
            ImageGrid::from_fn(geom([3, 3, 6], 6.0), |[x, y, z]| (x + y + z + 3) as f32).unwrap();
        let overlap = ZRange {
            low: 6.0,
            high: 10.0,
        };
        let c = image_fusion_cost(&a, &b, &overlap).unwrap();
        assert_eq!(c, FusionCost::default());
    }

    #[test]
    fn constant_offset_costs_c_over_r() {
        // A = 0 or 4 by column; B = A + 1 -> combined range 5, |A-B| = 1
        let g = geom([2, 1, 3], 0.0);
        let a = ImageGrid::from_fn(g, |[x, _, _]| 4.0 * x as f32).unwrap();
        let b = a.map(|v| v + 1.0);
        let overlap = ZRange {
            low: 0.0,
            high: 4.0,
        };
        let c = image_fusion_cost(&a, &b, &overlap).unwrap();
        assert!((c.normalized - 1.0 / 5.0).abs() < 1e-12);
        assert!((c.raw - 6.0 / 5.0).abs() < 1e-12);
        let scaled = image_fusion_cost(&a.map(|v| 7.0 * v), &b.map(|v| 7.0 * v), &overlap).unwrap();
        assert!((scaled.normalized - c.normalized).abs() < 1e-12);
    }

    #[test]
    fn empty_overlap_is_an_error() {
        let a = ImageGrid::filled(geom([2, 2, 3], 0.0), 1.0).unwrap();
        let b = ImageGrid::filled(geom([2, 2, 3], 6.0), 1.0).unwrap();
        let above = ZRange {
            low: 100.0,
            high: 120.0,
        };
        assert!(matches!(
            image_fusion_cost(&a, &b, &above),
            Err(Error::EmptyOverlap)
        ));
        let la = LabelGrid::filled(geom([2, 2, 3], 0.0), 1).unwrap();
        assert!(matches!(
            segmentation_fusion_cost(&la, &la, &above),
            Err(Error::EmptyOverlap)
        ));
    }

    #[test]
    fn label_disagreement_fraction() {
        let g = geom([5, 2, 2], 0.0);
        let a = LabelGrid::filled(g, 1).unwrap();
        let mut bv = vec![1u8; 20];
        for i in [0, 3, 11] {
            bv[i] = 0;
        }
        let b = LabelGrid::labels(g, bv).unwrap();
        let overlap = ZRange {
            low: 0.0,
            high: 2.0,
        };
        assert_eq!(segmentation_fusion_cost(&a, &a, &overlap).unwrap().raw, 0.0);
        let c = segmentation_fusion_cost(&a, &b, &overlap).unwrap();
        assert_eq!(c.raw, 3.0);
        assert!((c.normalized - 3.0 / 20.0).abs() < 1e-15);
    }

    fn single_voxel(dims: [usize; 3], at: [usize; 3]) -> LabelGrid {
        let g = geom(dims, -10.0);
        let mut v = vec![0u8; g.len()];
        v[g.linear_index(at)] = 1;
        LabelGrid::labels(g, v).unwrap()
    }

    #[test]
    fn location_examples() {
        assert_eq!(location_cost(&single_voxel([3, 3, 11], [1, 1, 5])), 0.0);
        assert_eq!(location_cost(&single_voxel([3, 3, 11], [1, 1, 10])), 1.0);
        assert_eq!(location_cost(&single_voxel([3, 3, 11], [0, 0, 0])), 1.0);
        assert!((location_cost(&single_voxel([3, 3, 11], [1, 1, 7])) - 0.4).abs() < 1e-12);
        let empty = LabelGrid::filled(geom([3, 3, 11], 0.0), 0).unwrap();
        assert_eq!(location_cost(&empty), EMPTY_LOCATION_COST);
    }

    #[test]
    fn smoothness_examples() {
        let full = LabelGrid::filled(geom([4, 4, 9], 0.0), 1).unwrap();
        assert_eq!(smoothness_cost(&full).raw, 0);

        let g = geom([4, 4, 9], 0.0);
        let slab = LabelGrid::from_fn(g, |[x, y, z]| u8::from(z == 4 && x < 3 && y < 2)).unwrap();
        let c = smoothness_cost(&slab);
        assert_eq!(c.raw, 12);
        assert_eq!(c.normalized, 2.0);
    }

    #[test]
    fn scrap_examples() {
        let comp = |n: usize| Component {
            voxels: (0..n).collect(),
            com: CenterOfMass {
                position: [0.0; 3],
                mass: n,
            },
        };
        let clean = KidneyPair {
            left: Some(comp(10)),
            right: Some(comp(9)),
            scrap_voxels: 0,
        };
        assert_eq!(scrap_cost(&clean, 19), 0.0);
        let dirty = KidneyPair {
            left: Some(comp(100)),
            right: Some(comp(90)),
            scrap_voxels: 10,
        };
        assert!((scrap_cost(&dirty, 200) - 0.05).abs() < 1e-15);
        assert_eq!(scrap_cost(&dirty, 0), 10.0);
    }

    pub(crate) fn report(id: &str, location: f64) -> QualityReport {
        QualityReport {
            subject_id: id.to_string(),
            image_fusion: FusionCost::default(),
            segmentation_fusion: FusionCost::default(),
            location,
            smoothness: SmoothnessCost::default(),
            scrap: 0.0,
            empty_segmentation: false,
            touches_z_border: true,
            flags: Flags::default(),
        }
    }

    #[test]
    fn nearest_rank_counts() {
        assert_eq!(nearest_rank_count(0.01, 1000), 10);
        assert_eq!(nearest_rank_count(0.02, 1000), 20);
        assert_eq!(nearest_rank_count(0.01, 1), 1);
        assert_eq!(nearest_rank_count(0.01, 101), 2);
        assert_eq!(nearest_rank_count(0.01, 0), 0);
    }

    #[test]
    fn top_one_percent_of_a_thousand() {
        let mut reports: Vec<_> = (0..1000)
            .map(|i| report(&format!("s{i:04}"), ((i * 7919) % 1000) as f64 / 1000.0))
            .collect();
        apply_flagging(&mut reports, &FlaggingPolicy::default()).unwrap();
        let mut flagged: Vec<f64> = reports
            .iter()
            .filter(|r| r.flags.stage1.contains(&Rating::Location))
            .map(|r| r.location)
            .collect();
        flagged.sort_by(f64::total_cmp);
        assert_eq!(flagged.len(), 10);
        assert_eq!(flagged[0], 0.99);
    }

    #[test]
    fn ties_resolve_by_subject_id() {
        let mut reports: Vec<_> = (0..200)
            .rev()
            .map(|i| report(&format!("s{i:03}"), 0.5))
            .collect();
        apply_flagging(&mut reports, &FlaggingPolicy::default()).unwrap();
        let mut ids: Vec<&str> = reports
            .iter()
            .filter(|r| r.flags.stage1.contains(&Rating::Location))
            .map(|r| r.subject_id.as_str())
            .collect();
        ids.sort();
        assert_eq!(ids, vec!["s000", "s001"]);
        // all other stage-one costs are tied at zero as well
        let seg: Vec<&str> = reports
            .iter()
            .filter(|r| r.flags.stage1.contains(&Rating::SegmentationFusion))
            .map(|r| r.subject_id.as_str())
            .collect();
        assert_eq!(seg.len(), 4);
    }

    #[test]
    fn maximal_overlap_union_is_two_percent() {
        let mut reports: Vec<_> = (0..1000)
            .map(|i| {
                let mut r = report(&format!("s{i:04}"), i as f64 / 1000.0);
                r.image_fusion.normalized = i as f64;
                r.segmentation_fusion.normalized = i as f64;
                r
            })
            .collect();
        apply_flagging(&mut reports, &FlaggingPolicy::default()).unwrap();
        let union = reports
            .iter()
            .filter(|r| !r.flags.stage1.is_empty())
            .count();
        assert_eq!(union, 20);
    }

    #[test]
    fn stage_two_ranks_survivors_only() {
        let mut reports: Vec<_> = (0..100)
            .map(|i| {
                let mut r = report(&format!("s{i:03}"), 0.0);
                r.scrap = i as f64;
                r
            })
            .collect();
        // the worst scrap subject is also the worst for location
        reports[99].location = 1.0;
        apply_flagging(&mut reports, &FlaggingPolicy::default()).unwrap();
        assert!(reports[99].stage1_flagged());
        assert!(reports[99].flags.stage2.is_empty());
        assert_eq!(reports[98].flags.stage2, vec![Rating::Scrap]);
    }

    #[test]
    fn small_location_outliers_are_reincluded() {
        let mut reports: Vec<_> = (0..100).map(|i| report(&format!("s{i:03}"), 0.0)).collect();
        reports[5].location = 0.9;
        reports[5].touches_z_border = false;
        apply_flagging(&mut reports, &FlaggingPolicy::default()).unwrap();
        assert_eq!(reports[5].flags.stage1, vec![Rating::Location]);
        assert!(reports[5].flags.location_reincluded);
        assert!(!reports[5].stage1_flagged());

        let mut policy = FlaggingPolicy::default();
        policy.reinclude_location = false;
        apply_flagging(&mut reports, &policy).unwrap();
        assert!(reports[5].stage1_flagged());
    }

    #[test]
    fn empty_segmentation_is_always_flagged() {
        let mut reports: Vec<_> = (0..300).map(|i| report(&format!("s{i:03}"), 0.1)).collect();
        reports[150].empty_segmentation = true;
        reports[151].empty_segmentation = true;
        reports[151].location = EMPTY_LOCATION_COST;
        apply_flagging(&mut reports, &FlaggingPolicy::default()).unwrap();
        assert!(reports[150]
            .flags
            .stage1
            .contains(&Rating::EmptySegmentation));
        assert!(reports[150].stage1_flagged());
        assert!(reports[151].stage1_flagged());
    }

    #[test]
    fn policy_rejects_bad_fractions() {
        let mut p = FlaggingPolicy::default();
        p.stage2_scrap = 1.0;
        assert!(p.validate().is_err());
    }
}
