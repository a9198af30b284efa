//! Kidney measurements derived from a fused, decomposed label volume.

use serde::{Deserialize, Serialize};

use crate::morphology::KidneyPair;
use crate::volgrid::Vec3;

/// Volume in cm³ of `count` voxels at `spacing` mm.
pub fn measure_volume(count: usize, spacing: Vec3) -> f64 {
    count as f64 * spacing[0] * spacing[1] * spacing[2] / 1000.0
}

/// Euclidean distance between kidney COMs in mm, when both sides exist.
pub fn kidney_distance(pair: &KidneyPair) -> Option<f64> {
    let left = pair.left.as_ref()?.com.position;
    let right = pair.right.as_ref()?.com.position;
    Some(distance(left, right))
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-subject measurements.
///
/// `vol_total_cm3` is the whole labeled volume, scrap included; the combined
/// kidney volume is `vol_left_cm3 + vol_right_cm3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub subject_id: String,
    pub vol_left_cm3: f64,
    pub vol_right_cm3: f64,
    pub vol_total_cm3: f64,
    pub com_left: Option<Vec3>,
    pub com_right: Option<Vec3>,
    pub distance_mm: Option<f64>,
    pub scrap_share: f64,
}

impl MeasurementRecord {
    pub fn from_pair(subject_id: impl Into<String>, pair: &KidneyPair, spacing: Vec3) -> Self {
        let total = pair.left_size() + pair.right_size() + pair.scrap_voxels;
        Self {
            subject_id: subject_id.into(),
            vol_left_cm3: measure_volume(pair.left_size(), spacing),
            vol_right_cm3: measure_volume(pair.right_size(), spacing),
            vol_total_cm3: measure_volume(total, spacing),
            com_left: pair.left.as_ref().map(|c| c.com.position),
            com_right: pair.right.as_ref().map(|c| c.com.position),
            distance_mm: kidney_distance(pair),
            scrap_share: pair.scrap_voxels as f64 / total.max(1) as f64,
        }
    }

    pub fn combined_cm3(&self) -> f64 {
        self.vol_left_cm3 + self.vol_right_cm3
    }
}
