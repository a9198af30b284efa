//! Per-subject orchestration and cohort runs.
//!
//! A subject goes through trim, segmentation (or mask import), fusion,
//! component analysis, measurement and quality rating. Any error becomes a
//! [`SubjectFailure`] tagged with the stage that raised it; a cohort run never
//! aborts on a single subject.

use std::fmt;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedVolume};
use crate::manifest::{Manifest, ManifestRow};
use crate::measure::MeasurementRecord;
use crate::morphology::{connected_components, split_pair, KidneyPair};
use crate::preprocess::trim_station;
use crate::qc::{
    apply_flagging, image_fusion_cost, location_cost, scrap_cost, segmentation_fusion_cost,
    smoothness_cost, touches_z_border, Flags, QualityReport,
};
use crate::segmenter::{import_mask, segment_station, SegmenterSpec, StationKey};
use crate::volgrid::{ImageGrid, LabelGrid};
use crate::volio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Trim,
    Segment,
    Fuse,
    Components,
    Measure,
    Qc,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Load => "load",
            Self::Trim => "trim",
            Self::Segment => "segment",
            Self::Fuse => "fuse",
            Self::Components => "components",
            Self::Measure => "measure",
            Self::Qc => "qc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectFailure {
    pub subject_id: String,
    pub stage: Stage,
    pub message: String,
}

/// Where a station's labels come from, overriding the configured segmenter.
#[derive(Debug, Clone)]
pub enum MaskSource {
    Grid(LabelGrid),
    File(PathBuf),
}

/// Both stations of one subject, untrimmed.
#[derive(Debug, Clone)]
pub struct StationPair {
    pub subject_id: String,
    pub station2: ImageGrid,
    pub station3: ImageGrid,
    pub mask2: Option<MaskSource>,
    pub mask3: Option<MaskSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectResult {
    pub measurement: MeasurementRecord,
    pub quality: QualityReport,
}

/// Intermediate products of one subject, for debugging commands.
#[derive(Debug, Clone)]
pub struct SubjectTrace {
    pub fused: FusedVolume,
    pub pair: KidneyPair,
    pub result: SubjectResult,
}

type StageResult<T> = std::result::Result<T, SubjectFailure>;

fn at<T>(subject_id: &str, stage: Stage, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| SubjectFailure {
        subject_id: subject_id.to_string(),
        stage,
        message: e.to_string(),
    })
}

fn segment(
    trimmed: &ImageGrid,
    mask: Option<&MaskSource>,
    subject_id: &str,
    station: u8,
    config: &PipelineConfig,
) -> Result<LabelGrid> {
    let key = StationKey {
        subject_id,
        station,
        explicit_mask: None,
    };
    match mask {
        Some(MaskSource::Grid(g)) => import_mask(trimmed, g.clone()),
        Some(MaskSource::File(p)) => segment_station(
            trimmed,
            &SegmenterSpec::ExternalMasks { dir: None },
            &StationKey {
                explicit_mask: Some(p),
                ..key
            },
        ),
        None => segment_station(trimmed, &config.segmenter, &key),
    }
}

/// Run every stage on one subject, keeping intermediates.
pub fn trace_subject(input: &StationPair, config: &PipelineConfig) -> StageResult<SubjectTrace> {
    let id = input.subject_id.as_str();
    let s2 = at(
        id,
        Stage::Trim,
        trim_station(&input.station2, config.n_trim),
    )?;
    let s3 = at(
        id,
        Stage::Trim,
        trim_station(&input.station3, config.n_trim),
    )?;
    let l2 = at(
        id,
        Stage::Segment,
        segment(&s2, input.mask2.as_ref(), id, 2, config),
    )?;
    let l3 = at(
        id,
        Stage::Segment,
        segment(&s3, input.mask3.as_ref(), id, 3, config),
    )?;

    let fused = at(id, Stage::Fuse, fuse(&s2, &s3, &l2, &l3))?;
    let overlap = at(
        id,
        Stage::Fuse,
        fused.overlap_z_range.ok_or(Error::EmptyOverlap),
    )?;

    let geometry = *fused.labels.geometry();
    let set = connected_components(&fused.labels, config.connectivity);
    let pair = split_pair(&set, geometry.center()[0]);
    let total_labeled = set.total_voxels();

    let measurement = MeasurementRecord::from_pair(id, &pair, geometry.spacing);

    let quality = QualityReport {
        subject_id: id.to_string(),
        image_fusion: at(id, Stage::Qc, image_fusion_cost(&s2, &s3, &overlap))?,
        segmentation_fusion: at(id, Stage::Qc, segmentation_fusion_cost(&l2, &l3, &overlap))?,
        location: location_cost(&fused.labels),
        smoothness: smoothness_cost(&fused.labels),
        scrap: scrap_cost(&pair, total_labeled),
        empty_segmentation: total_labeled == 0,
        touches_z_border: touches_z_border(&fused.labels),
        flags: Flags::default(),
    };
    Ok(SubjectTrace {
        fused,
        pair,
        result: SubjectResult {
            measurement,
            quality,
        },
    })
}

/// Measurements and unflagged quality report of one in-memory subject.
pub fn process_subject(input: &StationPair, config: &PipelineConfig) -> StageResult<SubjectResult> {
    trace_subject(input, config).map(|t| t.result)
}

/// Load a manifest row from disk and process it.
pub fn run_subject(row: &ManifestRow, config: &PipelineConfig) -> StageResult<SubjectResult> {
    let pair = load_subject(row)?;
    process_subject(&pair, config)
}

pub fn load_subject(row: &ManifestRow) -> StageResult<StationPair> {
    let id = row.subject_id.as_str();
    Ok(StationPair {
        subject_id: row.subject_id.clone(),
        station2: at(id, Stage::Load, volio::read_image(&row.station2))?,
        station3: at(id, Stage::Load, volio::read_image(&row.station3))?,
        mask2: row.mask2.clone().map(MaskSource::File),
        mask3: row.mask3.clone().map(MaskSource::File),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CohortCounts {
    pub subjects: usize,
    pub processed: usize,
    pub failed: usize,
    pub stage1_flagged: usize,
    pub stage2_flagged: usize,
    pub location_reincluded: usize,
    pub surviving: usize,
}

/// Results of a cohort run, sorted by subject id.
#[derive(Debug, Clone)]
pub struct CohortReport {
    pub results: Vec<SubjectResult>,
    pub failures: Vec<SubjectFailure>,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub workers: usize,
}

impl CohortReport {
    /// Flag `results` under the config's policy and assemble the report.
    pub fn assemble(
        mut results: Vec<SubjectResult>,
        mut failures: Vec<SubjectFailure>,
        config: &PipelineConfig,
        workers: usize,
        started_unix_s: u64,
    ) -> Result<Self> {
        results.sort_by(|a, b| a.quality.subject_id.cmp(&b.quality.subject_id));
        failures.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut reports: Vec<QualityReport> = results.iter().map(|r| r.quality.clone()).collect();
        if !reports.is_empty() {
            apply_flagging(&mut reports, &config.policy)?;
        }
        for (r, q) in results.iter_mut().zip(reports) {
            r.quality = q;
        }
        Ok(Self {
            results,
            failures,
            config: config.clone(),
            config_hash: config.hash(),
            started_unix_s,
            finished_unix_s: unix_now(),
            workers,
        })
    }

    pub fn counts(&self) -> CohortCounts {
        let q = || self.results.iter().map(|r| &r.quality);
        CohortCounts {
            subjects: self.results.len() + self.failures.len(),
            processed: self.results.len(),
            failed: self.failures.len(),
            stage1_flagged: q().filter(|r| r.stage1_flagged()).count(),
            stage2_flagged: q().filter(|r| r.stage2_flagged()).count(),
            location_reincluded: q().filter(|r| r.flags.location_reincluded).count(),
            surviving: q().filter(|r| r.surviving()).count(),
        }
    }

    pub fn quality_reports(&self) -> Vec<QualityReport> {
        self.results.iter().map(|r| r.quality.clone()).collect()
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Run `f` on a pool of `workers` threads (0 picks the available cores).
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Process every subject produced by `load` in parallel, then flag.
///
/// Subjects are loaded inside the worker so only a bounded number of
/// stations are resident at a time.
pub fn run_inputs<L>(
    ids: &[String],
    load: L,
    config: &PipelineConfig,
    workers: usize,
) -> Result<CohortReport>
where
    L: Fn(usize) -> StageResult<StationPair> + Sync,
{
    if ids.is_empty() {
        return Err(Error::Manifest("no subjects to process".into()));
    }
    config.policy.validate()?;
    let started = unix_now();
    let outcomes: Vec<StageResult<SubjectResult>> = with_pool(workers, || {
        (0..ids.len())
            .into_par_iter()
            .map(|i| load(i).and_then(|pair| process_subject(&pair, config)))
            .collect()
    })?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(f) => {
                log::warn!(
                    "subject {} failed at {}: {}",
                    f.subject_id,
                    f.stage,
                    f.message
                );
                failures.push(f)
            }
        }
    }
    CohortReport::assemble(results, failures, config, workers, started)
}

/// Run a whole manifest.
pub fn run_cohort(
    manifest: &Manifest,
    config: &PipelineConfig,
    workers: usize,
) -> Result<CohortReport> {
    let ids: Vec<String> = manifest.rows.iter().map(|r| r.subject_id.clone()).collect();
    run_inputs(&ids, |i| load_subject(&manifest.rows[i]), config, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec, Side};

    fn phantom_pair(spec: &PhantomSpec, id: &str, seed: u64) -> StationPair {
        let p = generate(spec, seed).unwrap();
        StationPair {
            subject_id: id.into(),
            station2: p.upper,
            station3: p.lower,
            mask2: None,
            mask3: None,
        }
    }

    #[test]
    fn clean_phantom_matches_truth() {
        let spec = PhantomSpec::small();
        let truth = generate(&spec, 0).unwrap();
        let r = process_subject(&phantom_pair(&spec, "s", 0), &PipelineConfig::default()).unwrap();
        let left = truth.kidney(Side::Left).unwrap();
        assert!((r.measurement.vol_left_cm3 - left.voxel_cm3).abs() < 1e-9);
        assert_eq!(r.quality.image_fusion.raw, 0.0);
        assert_eq!(r.quality.segmentation_fusion.raw, 0.0);
        assert_eq!(r.quality.scrap, 0.0);
        assert!(r.quality.location < 0.05);
        let d = r.measurement.distance_mm.unwrap();
        assert!((d - truth.analytic_distance_mm().unwrap()).abs() < 1.0);
    }

    #[test]
    fn stage_tags_on_failure() {
        let spec = PhantomSpec::small();
        let mut pair = phantom_pair(&spec, "s", 0);
        let cfg = PipelineConfig {
            n_trim: 10,
            ..PipelineConfig::default()
        };
        let f = process_subject(&pair, &cfg).unwrap_err();
        assert_eq!(f.stage, Stage::Trim);

        pair.mask2 = Some(MaskSource::Grid(
            LabelGrid::filled(*pair.station2.geometry(), 0).unwrap(),
        ));
        let f = process_subject(&pair, &PipelineConfig::default()).unwrap_err();
        assert_eq!(f.stage, Stage::Segment);
        assert!(f.message.contains("shape mismatch"), "{}", f.message);
    }

    #[test]
    fn cohort_report_is_worker_independent() {
        let spec = PhantomSpec::small();
        let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let load = |i: usize| Ok(phantom_pair(&spec, &ids[i], i as u64));
        let one = run_inputs(&ids, load, &PipelineConfig::default(), 1).unwrap();
        let four = run_inputs(&ids, load, &PipelineConfig::default(), 4).unwrap();
        assert_eq!(one.results, four.results);
        let c = one.counts();
        assert_eq!(c.processed, 6);
        assert_eq!(
            c.processed,
            c.surviving + c.stage1_flagged + c.stage2_flagged
        );
        assert!(run_inputs(&[], load, &PipelineConfig::default(), 1).is_err());
    }
}
