//! Report files.
//!
//! | file                | columns |
//! |---------------------|---------|
//! | `measurements.csv`  | subject_id, vol_left_cm3, vol_right_cm3, vol_total_cm3, distance_mm, scrap_share |
//! | `qc.csv`            | subject_id, image_fusion_raw, image_fusion_norm, segmentation_fusion_raw, segmentation_fusion_norm, location, smoothness_raw, smoothness_norm, scrap, empty_segmentation, touches_z_border, stage1_flags, stage2_flags, location_reincluded, status |
//! | `flags.csv`         | subject_id, stage, rating, location_reincluded |
//! | `failures.csv`      | subject_id, stage, message |
//! | `rating_curves.csv` | rating, rank, subject_id, cost |
//! | `agreement.csv`     | measure, n, mae, smape_pct, r2, mean_diff, loa_low, loa_high |
//! | `run.json`          | config hash and text, worker count, timestamps, counts |
//!
//! Rows are sorted by subject id; multi-valued flag cells are `;`-joined.
//! Every CSV except `run.json` is a pure function of the inputs and config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::metrics::{agreement, AgreementSummary, PairedEntry, PairedSeries};
use crate::pipeline::{CohortReport, SubjectFailure};
use crate::qc::{
    worst_fraction, CostVariant, Flags, FusionCost, QualityReport, Rating, SmoothnessCost,
};

pub const MEASUREMENTS_CSV: &str = "measurements.csv";
pub const QC_CSV: &str = "qc.csv";
pub const FLAGS_CSV: &str = "flags.csv";
pub const FAILURES_CSV: &str = "failures.csv";
pub const RATING_CURVES_CSV: &str = "rating_curves.csv";
pub const AGREEMENT_CSV: &str = "agreement.csv";
pub const RUN_JSON: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub subject_id: String,
    pub vol_left_cm3: f64,
    pub vol_right_cm3: f64,
    pub vol_total_cm3: f64,
    pub distance_mm: Option<f64>,
    pub scrap_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRow {
    pub subject_id: String,
    pub image_fusion_raw: f64,
    pub image_fusion_norm: f64,
    pub segmentation_fusion_raw: f64,
    pub segmentation_fusion_norm: f64,
    pub location: f64,
    pub smoothness_raw: u64,
    pub smoothness_norm: f64,
    pub scrap: f64,
    pub empty_segmentation: bool,
    pub touches_z_border: bool,
    pub stage1_flags: String,
    pub stage2_flags: String,
    pub location_reincluded: bool,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct FlagRow<'a> {
    subject_id: &'a str,
    stage: u8,
    rating: Rating,
    location_reincluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CurveRow<'a> {
    rating: Rating,
    rank: usize,
    subject_id: &'a str,
    cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub measure: String,
    #[serde(flatten)]
    pub summary: AgreementSummary,
}

fn join(ratings: &[Rating]) -> String {
    ratings
        .iter()
        .map(|r| r.as_str())
        .collect::<Vec<_>>()
        .join(";")
}

pub fn status(report: &QualityReport) -> &'static str {
    if report.stage1_flagged() {
        "excluded_stage1"
    } else if report.stage2_flagged() {
        "excluded_stage2"
    } else if report.flags.location_reincluded {
        "reincluded"
    } else {
        "included"
    }
}

impl From<&QualityReport> for QcRow {
    fn from(r: &QualityReport) -> Self {
        Self {
            subject_id: r.subject_id.clone(),
            image_fusion_raw: r.image_fusion.raw,
            image_fusion_norm: r.image_fusion.normalized,
            segmentation_fusion_raw: r.segmentation_fusion.raw,
            segmentation_fusion_norm: r.segmentation_fusion.normalized,
            location: r.location,
            smoothness_raw: r.smoothness.raw,
            smoothness_norm: r.smoothness.normalized,
            scrap: r.scrap,
            empty_segmentation: r.empty_segmentation,
            touches_z_border: r.touches_z_border,
            stage1_flags: join(&r.flags.stage1),
            stage2_flags: join(&r.flags.stage2),
            location_reincluded: r.flags.location_reincluded,
            status: status(r).to_string(),
        }
    }
}

impl From<QcRow> for QualityReport {
    /// Costs only; flags are left empty for re-flagging.
    fn from(r: QcRow) -> Self {
        Self {
            subject_id: r.subject_id,
            image_fusion: FusionCost {
                raw: r.image_fusion_raw,
                normalized: r.image_fusion_norm,
            },
            segmentation_fusion: FusionCost {
                raw: r.segmentation_fusion_raw,
                normalized: r.segmentation_fusion_norm,
            },
            location: r.location,
            smoothness: SmoothnessCost {
                raw: r.smoothness_raw,
                normalized: r.smoothness_norm,
            },
            scrap: r.scrap,
            empty_segmentation: r.empty_segmentation,
            touches_z_border: r.touches_z_border,
            flags: Flags::default(),
        }
    }
}

fn write_rows<T: Serialize>(
    path: &Path,
    headers: &[&str],
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    writer.write_record(headers)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_measurements(path: &Path, report: &CohortReport) -> Result<()> {
    let rows = report.results.iter().map(|r| {
        let m = &r.measurement;
        MeasurementRow {
            subject_id: m.subject_id.clone(),
            vol_left_cm3: m.vol_left_cm3,
            vol_right_cm3: m.vol_right_cm3,
            vol_total_cm3: m.vol_total_cm3,
            distance_mm: m.distance_mm,
            scrap_share: m.scrap_share,
        }
    });
    write_rows(
        path,
        &[
            "subject_id",
            "vol_left_cm3",
            "vol_right_cm3",
            "vol_total_cm3",
            "distance_mm",
            "scrap_share",
        ],
        rows,
    )
}

const QC_HEADERS: [&str; 15] = [
    "subject_id",
    "image_fusion_raw",
    "image_fusion_norm",
    "segmentation_fusion_raw",
    "segmentation_fusion_norm",
    "location",
    "smoothness_raw",
    "smoothness_norm",
    "scrap",
    "empty_segmentation",
    "touches_z_border",
    "stage1_flags",
    "stage2_flags",
    "location_reincluded",
    "status",
];

pub fn write_qc(path: &Path, reports: &[QualityReport]) -> Result<()> {
    write_rows(path, &QC_HEADERS, reports.iter().map(QcRow::from))
}

pub fn read_qc(path: &Path) -> Result<Vec<QualityReport>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: Vec<QualityReport> = Vec::new();
    for row in reader.deserialize::<QcRow>() {
        out.push(row?.into());
    }
    out.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if let Some(w) = out.windows(2).find(|w| w[0].subject_id == w[1].subject_id) {
        return Err(Error::DuplicateSubject(w[0].subject_id.clone()));
    }
    Ok(out)
}

pub fn write_flags(path: &Path, reports: &[QualityReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|r| {
        let stage1 = r.flags.stage1.iter().map(move |&rating| (1, rating));
        let stage2 = r.flags.stage2.iter().map(move |&rating| (2, rating));
        stage1.chain(stage2).map(move |(stage, rating)| FlagRow {
            subject_id: &r.subject_id,
            stage,
            rating,
            location_reincluded: r.flags.location_reincluded,
        })
    });
    write_rows(
        path,
        &["subject_id", "stage", "rating", "location_reincluded"],
        rows,
    )
}

pub fn write_failures(path: &Path, failures: &[SubjectFailure]) -> Result<()> {
    write_rows(path, &["subject_id", "stage", "message"], failures)
}

/// Each cost sorted from worst to best, the data behind per-rating
/// distribution plots.
pub fn write_rating_curves(
    path: &Path,
    reports: &[QualityReport],
    variant: CostVariant,
) -> Result<()> {
    let everyone: Vec<usize> = (0..reports.len()).collect();
    let mut rows = Vec::with_capacity(reports.len() * Rating::ALL_COSTS.len());
    for rating in Rating::ALL_COSTS {
        let order = worst_fraction(reports, &everyone, rating, variant, 1.0);
        for (rank, &i) in order.iter().enumerate() {
            rows.push(CurveRow {
                rating,
                rank: rank + 1,
                subject_id: &reports[i].subject_id,
                cost: reports[i].cost(rating, variant),
            });
        }
    }
    write_rows(path, &["rating", "rank", "subject_id", "cost"], rows)
}

const AGREEMENT_HEADERS: [&str; 8] = [
    "measure",
    "n",
    "mae",
    "smape_pct",
    "r2",
    "mean_diff",
    "loa_low",
    "loa_high",
];

pub fn write_agreement(path: &Path, rows: &[AgreementRow]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    writer.write_record(AGREEMENT_HEADERS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let s = &r.summary;
        writer.write_record([
            r.measure.clone(),
            s.n.to_string(),
            s.mae.to_string(),
            s.smape_pct.to_string(),
            opt(s.r2),
            s.mean_diff.to_string(),
            opt(s.loa_low),
            opt(s.loa_high),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'a str,
    config_hash: &'a str,
    config: &'a str,
    workers: usize,
    started_unix_s: u64,
    finished_unix_s: u64,
    counts: crate::pipeline::CohortCounts,
}

/// Write every report file of a cohort run into `dir`.
pub fn write_cohort(dir: &Path, report: &CohortReport, manifest: Option<&Manifest>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let reports = report.quality_reports();
    write_measurements(&dir.join(MEASUREMENTS_CSV), report)?;
    write_qc(&dir.join(QC_CSV), &reports)?;
    write_flags(&dir.join(FLAGS_CSV), &reports)?;
    write_failures(&dir.join(FAILURES_CSV), &report.failures)?;
    write_rating_curves(
        &dir.join(RATING_CURVES_CSV),
        &reports,
        report.config.policy.variant,
    )?;
    if let Some(m) = manifest {
        let rows = manifest_agreement(m, report)?;
        if !rows.is_empty() {
            write_agreement(&dir.join(AGREEMENT_CSV), &rows)?;
        }
    }
    let text = report.config.to_text();
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: &report.config_hash,
        config: &text,
        workers: report.workers,
        started_unix_s: report.started_unix_s,
        finished_unix_s: report.finished_unix_s,
        counts: report.counts(),
    };
    std::fs::write(
        dir.join(RUN_JSON),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

pub fn read_measurements(path: &Path) -> Result<Vec<MeasurementRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

type Column = (&'static str, fn(&MeasurementRow) -> Option<f64>);

const COLUMNS: [Column; 4] = [
    ("total", |r| Some(r.vol_total_cm3)),
    ("left", |r| Some(r.vol_left_cm3)),
    ("right", |r| Some(r.vol_right_cm3)),
    ("distance", |r| r.distance_mm),
];

fn index(rows: &[MeasurementRow]) -> Result<BTreeMap<&str, &MeasurementRow>> {
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r.subject_id.as_str(), r).is_some() {
            return Err(Error::DuplicateSubject(r.subject_id.clone()));
        }
    }
    Ok(map)
}

/// One agreement row per measure (total, left, right, distance). Both
/// inputs must contain the same subject ids. Distances are compared over
/// subjects where both sides report one; a measure without any pair is
/// omitted.
pub fn validate_measurements(
    predicted: &[MeasurementRow],
    reference: &[MeasurementRow],
) -> Result<Vec<AgreementRow>> {
    let pred = index(predicted)?;
    let refs = index(reference)?;
    let only_predicted: Vec<String> = pred
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    let only_reference: Vec<String> = refs
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !only_predicted.is_empty() || !only_reference.is_empty() {
        return Err(Error::SubjectMismatch {
            only_predicted,
            only_reference,
        });
    }
    let mut out = Vec::new();
    for (measure, get) in COLUMNS {
        let entries: Vec<PairedEntry> = refs
            .iter()
            .filter_map(|(id, r)| {
                Some(PairedEntry {
                    subject_id: id.to_string(),
                    reference: get(r)?,
                    predicted: get(pred[id])?,
                })
            })
            .collect();
        if entries.is_empty() {
            continue;
        }
        out.push(AgreementRow {
            measure: measure.to_string(),
            summary: agreement(&PairedSeries::new(entries)?)?,
        });
    }
    Ok(out)
}

/// Agreement between a run's measurements and the reference values given in
/// the manifest, over the subjects that have them.
pub fn manifest_agreement(manifest: &Manifest, report: &CohortReport) -> Result<Vec<AgreementRow>> {
    let by_id: BTreeMap<&str, _> = report
        .results
        .iter()
        .map(|r| (r.measurement.subject_id.as_str(), &r.measurement))
        .collect();
    let mut out = Vec::new();
    type Pick =
        fn(&crate::manifest::ManifestRow, &crate::measure::MeasurementRecord) -> Option<(f64, f64)>;
    let picks: [(&str, Pick); 4] = [
        ("total", |row, m| {
            Some((row.ref_vol_total_cm3?, m.vol_total_cm3))
        }),
        ("left", |row, m| {
            Some((row.ref_vol_left_cm3?, m.vol_left_cm3))
        }),
        ("right", |row, m| {
            Some((row.ref_vol_right_cm3?, m.vol_right_cm3))
        }),
        ("distance", |row, m| {
            Some((row.ref_distance_mm?, m.distance_mm?))
        }),
    ];
    for (measure, pick) in picks {
        let mut entries: Vec<PairedEntry> = manifest
            .rows
            .iter()
            .filter_map(|row| {
                let (reference, predicted) = pick(row, by_id.get(row.subject_id.as_str())?)?;
                Some(PairedEntry {
                    subject_id: row.subject_id.clone(),
                    reference,
                    predicted,
                })
            })
            .collect();
        entries.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        if !entries.is_empty() {
            out.push(AgreementRow {
                measure: measure.to_string(),
                summary: agreement(&PairedSeries::new(entries)?)?,
            });
        }
    }
    Ok(out)
}
