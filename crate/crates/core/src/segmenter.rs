//! Per-station label producers.
//!
//! The pipeline does not run a neural network. Labels come either from
//! externally produced mask files, one per trimmed station, or from a
//! threshold baseline driven through the same 2.5D stack contract an external
//! model would consume.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{make_stack, normalize_station, unpad_labels, Plane};
use crate::volgrid::{ImageGrid, LabelGrid};
use crate::volio;

#[derive(Debug, Clone, PartialEq)]
pub enum SegmenterSpec {
    /// Masks read from disk. Without an explicit path per station, masks are
    /// looked up as `<dir>/<subject>_station<n>_mask.nii`.
    ExternalMasks { dir: Option<PathBuf> },
    /// Label voxels whose per-slice normalized intensity exceeds `fraction`.
    ThresholdBaseline { fraction: f64, clip_fraction: f64 },
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self::ThresholdBaseline {
            fraction: 0.5,
            clip_fraction: crate::preprocess::DEFAULT_CLIP_FRACTION,
        }
    }
}

/// Identifies a station when resolving external masks.
#[derive(Debug, Clone, PartialEq)]
pub struct StationKey<'a> {
    pub subject_id: &'a str,
    pub station: u8,
    pub explicit_mask: Option<&'a Path>,
}

/// Conventional mask location inside a mask directory.
pub fn mask_file_name(subject_id: &str, station: u8) -> String {
    format!("{subject_id}_station{station}_mask.nii")
}

/// Label one trimmed station.
pub fn segment_station(
    station: &ImageGrid,
    spec: &SegmenterSpec,
    key: &StationKey<'_>,
) -> Result<LabelGrid> {
    match spec {
        SegmenterSpec::ExternalMasks { dir } => {
            let path = match (key.explicit_mask, dir) {
                (Some(p), _) => p.to_path_buf(),
                (None, Some(d)) => d.join(mask_file_name(key.subject_id, key.station)),
                (None, None) => {
                    return Err(Error::InvalidParameter(format!(
                        "no mask path for subject {} station {}",
                        key.subject_id, key.station
                    )))
                }
            };
            import_mask(station, volio::read_labels(&path)?)
        }
        SegmenterSpec::ThresholdBaseline {
            fraction,
            clip_fraction,
        } => threshold_baseline(station, *fraction, *clip_fraction),
    }
}

/// Adopt an externally produced mask for `station`. Dimensions must match;
/// the station's spacing and origin are kept.
pub fn import_mask(station: &ImageGrid, mask: LabelGrid) -> Result<LabelGrid> {
    if mask.dims() != station.dims() {
        return Err(Error::ShapeMismatch {
            expected: station.dims().to_vec(),
            found: mask.dims().to_vec(),
        });
    }
    mask.with_geometry(*station.geometry())
}

/// Threshold the target plane of every padded slice stack, then strip the
/// padding again.
pub fn threshold_baseline(
    station: &ImageGrid,
    fraction: f64,
    clip_fraction: f64,
) -> Result<LabelGrid> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "threshold fraction {fraction} outside [0, 1)"
        )));
    }
    let normalized = normalize_station(station, clip_fraction)?;
    let [nx, ny, nz] = station.dims();
    let mut values = Vec::with_capacity(station.values().len());
    for z in 0..nz {
        let stack = make_stack(&normalized, z)?;
        let target = stack.target();
        let padded = Plane {
            nx: target.nx,
            ny: target.ny,
            values: target
                .values
                .iter()
                .map(|&v| u8::from(f64::from(v) > fraction))
                .collect(),
        };
        values.extend(unpad_labels(&padded, (nx, ny))?.values);
    }
    LabelGrid::labels(*station.geometry(), values)
}
