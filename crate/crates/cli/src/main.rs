use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use renalvol::config::PipelineConfig;
use renalvol::manifest::Manifest;
use renalvol::phantom::{self, cohort_specs, PhantomSpec};
use renalvol::pipeline::{run_cohort, trace_subject, MaskSource, StationPair};
use renalvol::qc::apply_flagging;
use renalvol::{report, volio};

#[derive(Parser)]
#[command(
    name = "renalvol",
    version,
    about = "Kidney volumetry and quality control for two-station MRI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a manifest.
    Phantom(PhantomArgs),
    /// Run the pipeline over a manifest and write all reports.
    Run(RunArgs),
    /// Re-flag an existing qc.csv under a new policy.
    Qc(QcArgs),
    /// Agreement tables between predicted and reference measurements.
    Validate(ValidateArgs),
    /// Fuse one subject and write the fused image and labels.
    Fuse(SubjectArgs),
    /// Measure one subject and print its record and quality ratings.
    Measure(SubjectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Geometry {
    /// 224×174×44 stations at 2.232×2.232×4.5 mm.
    Paper,
    /// 64×48×20 stations at 4.5×4.5×9 mm.
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Nii,
    Raw,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    /// Number of subjects carrying an injected artifact.
    #[arg(long, default_value_t = 0)]
    artifacts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Geometry::Small)]
    geometry: Geometry,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = Format::Nii)]
    format: Format,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct QcArgs {
    /// qc.csv from an earlier run.
    #[arg(long)]
    qc: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    predicted: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Also write agreement.csv into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SubjectArgs {
    #[arg(long)]
    station2: PathBuf,
    #[arg(long)]
    station3: PathBuf,
    #[arg(long)]
    mask2: Option<PathBuf>,
    #[arg(long)]
    mask3: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "subject")]
    subject_id: String,
    /// Output directory (fuse only).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            PipelineConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Run(a) => cmd_run(a),
        Command::Qc(a) => cmd_qc(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Fuse(a) => cmd_subject(a, true),
        Command::Measure(a) => cmd_subject(a, false),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    if a.subjects == 0 {
        bail!("--subjects must be at least 1");
    }
    let mut base = match a.geometry {
        Geometry::Paper => PhantomSpec::default(),
        Geometry::Small => PhantomSpec::small(),
    };
    base.noise_sigma = a.noise;
    let ext = match a.format {
        Format::Nii => "nii",
        Format::Raw => "raw",
    };
    let members = cohort_specs(&base, a.subjects, a.artifacts, a.seed)?;
    let n_trim = PipelineConfig::default().n_trim;
    phantom::write_cohort(&members, &a.out, ext, n_trim, a.workers)?;
    fs::write(a.out.join("config.txt"), "segmenter = external\n")?;
    info!(
        "wrote {} subjects ({} with artifacts) to {}",
        a.subjects,
        a.artifacts,
        a.out.display()
    );
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading manifest {}", a.manifest.display()))?;
    let report = run_cohort(&manifest, &config, a.workers)?;
    report::write_cohort(&a.out, &report, Some(&manifest))?;
    let c = report.counts();
    println!(
        "subjects {}  processed {}  failed {}  stage1 {}  stage2 {}  reincluded {}  surviving {}",
        c.subjects,
        c.processed,
        c.failed,
        c.stage1_flagged,
        c.stage2_flagged,
        c.location_reincluded,
        c.surviving
    );
    println!("config {}", report.config_hash);
    Ok(())
}

fn cmd_qc(a: QcArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let mut reports = report::read_qc(&a.qc)?;
    if reports.is_empty() {
        bail!("{} has no rows", a.qc.display());
    }
    apply_flagging(&mut reports, &config.policy)?;
    fs::create_dir_all(&a.out)?;
    report::write_qc(&a.out.join(report::QC_CSV), &reports)?;
    report::write_flags(&a.out.join(report::FLAGS_CSV), &reports)?;
    report::write_rating_curves(
        &a.out.join(report::RATING_CURVES_CSV),
        &reports,
        config.policy.variant,
    )?;
    let stage1 = reports.iter().filter(|r| r.stage1_flagged()).count();
    let stage2 = reports.iter().filter(|r| r.stage2_flagged()).count();
    println!(
        "subjects {}  stage1 {}  stage2 {}  surviving {}",
        reports.len(),
        stage1,
        stage2,
        reports.len() - stage1 - stage2
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let predicted = report::read_measurements(&a.predicted)?;
    let reference = report::read_measurements(&a.reference)?;
    let rows = report::validate_measurements(&predicted, &reference)?;
    println!(
        "{:<10} {:>5} {:>10} {:>9} {:>7} {:>10} {:>21}",
        "measure", "n", "MAE", "SMAPE %", "R2", "mean diff", "95% LoA"
    );
    for r in &rows {
        let s = &r.summary;
        println!(
            "{:<10} {:>5} {:>10.3} {:>9.3} {:>7} {:>10.3} {:>10}..{:<10}",
            r.measure,
            s.n,
            s.mae,
            s.smape_pct,
            fmt_opt(s.r2, 3),
            s.mean_diff,
            fmt_opt(s.loa_low, 3),
            fmt_opt(s.loa_high, 3)
        );
    }
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        report::write_agreement(&out.join(report::AGREEMENT_CSV), &rows)?;
    }
    Ok(())
}

fn cmd_subject(a: SubjectArgs, write_fused: bool) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let pair = StationPair {
        subject_id: a.subject_id.clone(),
        station2: volio::read_image(&a.station2)?,
        station3: volio::read_image(&a.station3)?,
        mask2: a.mask2.map(MaskSource::File),
        mask3: a.mask3.map(MaskSource::File),
    };
    let trace = trace_subject(&pair, &config)
        .map_err(|f| anyhow::anyhow!("{} failed at {}: {}", f.subject_id, f.stage, f.message))?;
    if write_fused {
        let Some(out) = a.out else {
            bail!("fuse needs --out");
        };
        fs::create_dir_all(&out)?;
        volio::write_image(&out.join("fused_image.nii"), &trace.fused.image)?;
        volio::write_labels(&out.join("fused_labels.nii"), &trace.fused.labels)?;
        let g = trace.fused.image.geometry();
        println!(
            "fused dims {:?} spacing {:?} origin {:?}",
            g.dims, g.spacing, g.origin
        );
        if let Some(o) = trace.fused.overlap_z_range {
            println!("overlap z {:.3}..{:.3} mm", o.low, o.high);
        }
    } else {
        let m = &trace.result.measurement;
        let q = &trace.result.quality;
        println!(
            "left {:.3} cm3  right {:.3} cm3  total {:.3} cm3  distance {} mm  scrap {:.6}",
            m.vol_left_cm3,
            m.vol_right_cm3,
            m.vol_total_cm3,
            fmt_opt(m.distance_mm, 2),
            m.scrap_share
        );
        println!(
            "image_fusion {:.6e}  segmentation_fusion {:.6e}  location {:.4}  smoothness {:.4}  scrap {:.6}",
            q.image_fusion.normalized,
            q.segmentation_fusion.normalized,
            q.location,
            q.smoothness.normalized,
            q.scrap
        );
    }
    Ok(())
}
