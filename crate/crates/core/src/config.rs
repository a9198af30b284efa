//! Run configuration: a `key = value` text file.
//!
//! ```text
//! # comments start with '#'
//! n_trim = 3
//! segmenter = threshold        # or: external
//! threshold_fraction = 0.5
//! clip_fraction = 0.01
//! mask_dir = masks             # external segmenter, relative to the config file
//! connectivity = 6             # or: 26
//! blend = linear
//! stage1_location = 0.01
//! stage1_image_fusion = 0.01
//! stage1_segmentation_fusion = 0.02
//! stage2_smoothness = 0.01
//! stage2_scrap = 0.01
//! cost_variant = normalized    # or: raw
//! reinclude_location = true
//! ```
//!
//! Unknown keys are rejected. The config hash is the SHA-256 of the canonical
//! rendering ([`PipelineConfig::to_text`]), so formatting and comments do not
//! change it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::morphology::Connectivity;
use crate::preprocess::{DEFAULT_CLIP_FRACTION, DEFAULT_TRIM};
use crate::qc::FlaggingPolicy;
use crate::segmenter::SegmenterSpec;

/// Overlap blending scheme. Only the linear z ramp is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendScheme {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_trim: usize,
    pub segmenter: SegmenterSpec,
    pub connectivity: Connectivity,
    pub blend: BlendScheme,
    pub policy: FlaggingPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_trim: DEFAULT_TRIM,
            segmenter: SegmenterSpec::default(),
            connectivity: Connectivity::default(),
            blend: BlendScheme::Linear,
            policy: FlaggingPolicy::default(),
        }
    }
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err(line, format!("{key}: cannot parse '{value}': {e}")))
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Parse config text. A relative `mask_dir` is resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut kind = "threshold".to_string();
        let mut fraction = 0.5;
        let mut clip = DEFAULT_CLIP_FRACTION;
        let mut mask_dir: Option<PathBuf> = None;
        let mut seen = std::collections::BTreeSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                config_err(line, format!("expected key = value, got '{content}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(line, format!("duplicate key '{key}'")));
            }
            let p = &mut cfg.policy;
            match key {
                "n_trim" => cfg.n_trim = parse(line, key, value)?,
                "segmenter" => match value {
                    "threshold" | "external" => kind = value.to_string(),
                    other => {
                        return Err(config_err(
                            line,
                            format!("segmenter must be 'threshold' or 'external', got '{other}'"),
                        ))
                    }
                },
                "threshold_fraction" => fraction = parse(line, key, value)?,
                "clip_fraction" => clip = parse(line, key, value)?,
                "mask_dir" => {
                    let dir = PathBuf::from(value);
                    mask_dir = Some(match base {
                        Some(b) if dir.is_relative() => b.join(dir),
                        _ => dir,
                    });
                }
                "connectivity" => {
                    cfg.connectivity = Connectivity::from_count(parse(line, key, value)?)
                        .map_err(|e| config_err(line, e.to_string()))?
                }
                "blend" => {
                    if value != "linear" {
                        return Err(config_err(line, format!("unsupported blend '{value}'")));
                    }
                }
                "stage1_location" => p.stage1_location = parse(line, key, value)?,
                "stage1_image_fusion" => p.stage1_image_fusion = parse(line, key, value)?,
                "stage1_segmentation_fusion" => {
                    p.stage1_segmentation_fusion = parse(line, key, value)?
                }
                "stage2_smoothness" => p.stage2_smoothness = parse(line, key, value)?,
                "stage2_scrap" => p.stage2_scrap = parse(line, key, value)?,
                "cost_variant" => p.variant = parse(line, key, value)?,
                "reinclude_location" => p.reinclude_location = parse(line, key, value)?,
                other => return Err(config_err(line, format!("unknown key '{other}'"))),
            }
        }

        cfg.segmenter = if kind == "external" {
            SegmenterSpec::ExternalMasks { dir: mask_dir }
        } else {
            if !(0.0..1.0).contains(&fraction) || !(0.0..1.0).contains(&clip) {
                return Err(config_err(
                    0,
                    "threshold_fraction and clip_fraction must lie in [0, 1)",
                ));
            }
            SegmenterSpec::ThresholdBaseline {
                fraction,
                clip_fraction: clip,
            }
        };
        cfg.policy
            .validate()
            .map_err(|e| config_err(0, e.to_string()))?;
        Ok(cfg)
    }

    /// Canonical rendering, parseable by [`PipelineConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.policy;
        let _ = writeln!(s, "n_trim = {}", self.n_trim);
        match &self.segmenter {
            SegmenterSpec::ExternalMasks { dir } => {
                let _ = writeln!(s, "segmenter = external");
                if let Some(d) = dir {
                    let _ = writeln!(s, "mask_dir = {}", d.display());
                }
            }
            SegmenterSpec::ThresholdBaseline {
                fraction,
                clip_fraction,
            } => {
                let _ = writeln!(s, "segmenter = threshold");
                let _ = writeln!(s, "threshold_fraction = {fraction}");
                let _ = writeln!(s, "clip_fraction = {clip_fraction}");
            }
        }
        let _ = writeln!(s, "connectivity = {}", self.connectivity.count());
        let _ = writeln!(s, "blend = linear");
        let _ = writeln!(s, "stage1_location = {}", p.stage1_location);
        let _ = writeln!(s, "stage1_image_fusion = {}", p.stage1_image_fusion);
        let _ = writeln!(
            s,
            "stage1_segmentation_fusion = {}",
            p.stage1_segmentation_fusion
        );
        let _ = writeln!(s, "stage2_smoothness = {}", p.stage2_smoothness);
        let _ = writeln!(s, "stage2_scrap = {}", p.stage2_scrap);
        let _ = writeln!(s, "cost_variant = {}", p.variant);
        let _ = writeln!(s, "reinclude_location = {}", p.reinclude_location);
        s
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
