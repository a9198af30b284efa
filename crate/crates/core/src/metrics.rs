//! Agreement metrics for masks (Dice, Jaccard) and paired measurements
//! (MAE, SMAPE, R², 95% limits of agreement).
//!
//! Differences are taken as reference minus predicted, so oversegmentation
//! shows up as a negative mean difference.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volgrid::LabelGrid;

/// z-score of the two-sided 95% interval.
pub const LOA_Z: f64 = 1.96;

fn overlap_counts(a: &LabelGrid, b: &LabelGrid) -> Result<(usize, usize, usize)> {
    if !a.geometry().matches(b.geometry(), 1e-6) {
        return Err(Error::GeometryMismatch(format!(
            "{:?} vs {:?}",
            a.geometry(),
            b.geometry()
        )));
    }
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x != 0, y != 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly.
pub fn dice(a: &LabelGrid, b: &LabelGrid) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; two empty masks agree perfectly.
pub fn jaccard(a: &LabelGrid, b: &LabelGrid) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Jaccard index equivalent to a Dice score.
pub fn dice_to_jaccard(d: f64) -> f64 {
    d / (2.0 - d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedEntry {
    pub subject_id: String,
    pub reference: f64,
    pub predicted: f64,
}

/// Reference and predicted values keyed by unique subject id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedSeries {
    entries: Vec<PairedEntry>,
}

impl PairedSeries {
    pub fn new(entries: Vec<PairedEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.subject_id.as_str()) {
                return Err(Error::DuplicateSubject(e.subject_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// Series with generated ids, for ad-hoc use.
    pub fn from_values(reference: &[f64], predicted: &[f64]) -> Result<Self> {
        if reference.len() != predicted.len() {
            return Err(Error::InvalidParameter(format!(
                "{} reference values vs {} predicted",
                reference.len(),
                predicted.len()
            )));
        }
        Self::new(
            reference
                .iter()
                .zip(predicted)
                .enumerate()
                .map(|(i, (&r, &p))| PairedEntry {
                    subject_id: i.to_string(),
                    reference: r,
                    predicted: p,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[PairedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| PairedEntry {
                    subject_id: e.subject_id.clone(),
                    reference: e.predicted,
                    predicted: e.reference,
                })
                .collect(),
        }
    }
}

fn require(series: &PairedSeries, n: usize) -> Result<()> {
    if series.len() < n {
        return Err(Error::TooFewEntries {
            required: n,
            actual: series.len(),
        });
    }
    Ok(())
}

pub fn mae(series: &PairedSeries) -> Result<f64> {
    require(series, 1)?;
    let sum: f64 = series
        .entries
        .iter()
        .map(|e| (e.reference - e.predicted).abs())
        .sum();
    Ok(sum / series.len() as f64)
}

/// Symmetric absolute percentage error of one pair; 0 when both sum to 0.
pub fn smape_pair(reference: f64, predicted: f64) -> f64 {
    let mean = 0.5 * (reference + predicted);
    if mean == 0.0 {
        0.0
    } else {
        100.0 * (reference - predicted).abs() / mean
    }
}

/// Mean of per-pair SMAPE, in percent.
pub fn smape(series: &PairedSeries) -> Result<f64> {
    require(series, 1)?;
    let sum: f64 = series
        .entries
        .iter()
        .map(|e| smape_pair(e.reference, e.predicted))
        .sum();
    Ok(sum / series.len() as f64)
}

/// Coefficient of determination about the reference mean; `None` when the
/// reference has zero variance.
pub fn r_squared(series: &PairedSeries) -> Result<Option<f64>> {
    require(series, 2)?;
    let n = series.len() as f64;
    let mean_ref = series.entries.iter().map(|e| e.reference).sum::<f64>() / n;
    let ss_tot: f64 = series
        .entries
        .iter()
        .map(|e| (e.reference - mean_ref).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = series
        .entries
        .iter()
        .map(|e| (e.reference - e.predicted).powi(2))
        .sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Mean difference and 95% limits of agreement using the sample standard
/// deviation.
pub fn limits_of_agreement(series: &PairedSeries) -> Result<(f64, f64, f64)> {
    require(series, 2)?;
    let n = series.len() as f64;
    let diffs: Vec<f64> = series
        .entries
        .iter()
        .map(|e| e.reference - e.predicted)
        .collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = LOA_Z * var.sqrt();
    Ok((mean, mean - half, mean + half))
}

/// Agreement of one measurement column. R² and the limits of agreement need
/// at least two pairs and are `None` below that.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub n: usize,
    pub mae: f64,
    pub smape_pct: f64,
    pub r2: Option<f64>,
    pub mean_diff: f64,
    pub loa_low: Option<f64>,
    pub loa_high: Option<f64>,
}

pub fn agreement(series: &PairedSeries) -> Result<AgreementSummary> {
    require(series, 1)?;
    let n = series.len();
    let mean_diff = series
        .entries
        .iter()
        .map(|e| e.reference - e.predicted)
        .sum::<f64>()
        / n as f64;
    let (r2, loa) = if n >= 2 {
        let (_, lo, hi) = limits_of_agreement(series)?;
        (r_squared(series)?, Some((lo, hi)))
    } else {
        (None, None)
    };
    Ok(AgreementSummary {
        n,
        mae: mae(series)?,
        smape_pct: smape(series)?,
        r2,
        mean_diff,
        loa_low: loa.map(|l| l.0),
        loa_high: loa.map(|l| l.1),
    })
}
