//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use renalvol::config::PipelineConfig;
use renalvol::fusion::fuse;
use renalvol::manifest::Manifest;
use renalvol::metrics::{dice, dice_to_jaccard, jaccard, smape, PairedSeries};
use renalvol::morphology::{connected_components, split_pair, Connectivity};
use renalvol::phantom::{self, cohort_specs, generate, Ellipsoid, PhantomSpec, Side};
use renalvol::pipeline::{process_subject, run_cohort, run_inputs, MaskSource, StationPair};
use renalvol::preprocess::trim_station;
use renalvol::qc::{nearest_rank_count, scrap_cost, CostVariant, QualityReport, Rating};
use renalvol::report::{self, validate_measurements, MeasurementRow};
use renalvol::segmenter::SegmenterSpec;
use renalvol::volgrid::{Geometry, LabelGrid};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn threshold() -> PipelineConfig {
    PipelineConfig::default()
}

fn pair_of(p: &phantom::Phantom, id: &str, with_masks: bool, n_trim: usize) -> StationPair {
    let mask = |l: &LabelGrid| MaskSource::Grid(trim_station(l, n_trim).unwrap());
    StationPair {
        subject_id: id.into(),
        station2: p.upper.clone(),
        station3: p.lower.clone(),
        mask2: with_masks.then(|| mask(&p.upper_labels)),
        mask3: with_masks.then(|| mask(&p.lower_labels)),
    }
}

fn single_kidney(dims: [usize; 3], spacing: [f64; 3], overlap: usize) -> PhantomSpec {
    PhantomSpec {
        station_dims: dims,
        spacing,
        overlap_slices: overlap,
        kidneys: vec![Ellipsoid {
            center: [0.0; 3],
            semi_axes: [30.0, 25.0, 50.0],
            intensity: 0.9,
        }],
        ..PhantomSpec::default()
    }
}

fn c1_smape() -> Outcome {
    // true volume 250 cm³, absolute error 25 cm³, expressed as a pair whose mean is 250
    let s = PairedSeries::from_values(&[237.5], &[262.5]).map_err(err)?;
    let direct = smape(&s).map_err(err)?;
    let row = |v: f64| MeasurementRow {
        subject_id: "x".into(),
        vol_left_cm3: v / 2.0,
        vol_right_cm3: v / 2.0,
        vol_total_cm3: v,
        distance_mm: None,
        scrap_share: 0.0,
    };
    let table = validate_measurements(&[row(262.5)], &[row(237.5)]).map_err(err)?;
    let via_file = table[0].summary.smape_pct;
    check((direct - 10.0).abs() <= 1e-9, format!("smape {direct}"))?;
    check(
        (via_file - 10.0).abs() <= 1e-9,
        format!("validated smape {via_file}"),
    )?;
    Ok(format!("SMAPE {direct:.12}%"))
}

fn c2_dice_jaccard() -> Outcome {
    let g = Geometry::new([32, 32, 32], [1.0; 3], [0.0; 3]).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let pa = rng.random_range(0.0..1.0);
        let pb = rng.random_range(0.0..1.0);
        let a: Vec<u8> = (0..g.len())
            .map(|_| u8::from(rng.random_bool(pa)))
            .collect();
        let b: Vec<u8> = (0..g.len())
            .map(|_| u8::from(rng.random_bool(pb)))
            .collect();
        let a = LabelGrid::labels(g, a).map_err(err)?;
        let b = LabelGrid::labels(g, b).map_err(err)?;
        let d = dice(&a, &b).map_err(err)?;
        let j = jaccard(&a, &b).map_err(err)?;
        worst = worst.max((j - d / (2.0 - d)).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    let published = dice_to_jaccard(0.956);
    check(
        (published * 1000.0).round() / 1000.0 == 0.916,
        format!("0.956 maps to {published}"),
    )?;
    Ok(format!(
        "max |J - D/(2-D)| = {worst:.1e}; 0.956 -> {published:.4}"
    ))
}

fn c3_volumetry() -> Outcome {
    let analytic = 4.0 / 3.0 * PI * 30.0 * 25.0 * 50.0 / 1000.0;
    check(
        (analytic - 157.08).abs() < 0.005,
        format!("analytic {analytic}"),
    )?;
    let measure = |spec: &PhantomSpec| -> Result<f64, String> {
        let p = generate(spec, 0).map_err(err)?;
        let r =
            process_subject(&pair_of(&p, "e", false, 3), &threshold()).map_err(|f| f.message)?;
        Ok(r.measurement.vol_left_cm3 + r.measurement.vol_right_cm3)
    };
    let coarse = measure(&single_kidney([40, 32, 20], [2.232, 2.232, 4.5], 10))?;
    let fine = measure(&single_kidney([80, 64, 40], [1.116, 1.116, 2.25], 20))?;
    let e_coarse = (coarse - analytic).abs() / analytic;
    let e_fine = (fine - analytic).abs() / analytic;
    check(
        e_coarse < 0.02,
        format!("paper spacing error {:.3}%", 100.0 * e_coarse),
    )?;
    check(
        e_fine < e_coarse,
        format!("half spacing error {e_fine} >= {e_coarse}"),
    )?;
    Ok(format!(
        "{coarse:.3} cm³ ({:.3}% err), half spacing {fine:.3} cm³ ({:.3}% err)",
        100.0 * e_coarse,
        100.0 * e_fine
    ))
}

fn c4_fusion() -> Outcome {
    let mut details = Vec::new();
    for (noise, masks) in [(0.0, false), (0.05, true)] {
        let spec = PhantomSpec {
            noise_sigma: noise,
            ..PhantomSpec::default()
        };
        let p = generate(&spec, 4).map_err(err)?;
        let r =
            process_subject(&pair_of(&p, "f", masks, 3), &threshold()).map_err(|f| f.message)?;
        let q = &r.quality;
        check(
            q.image_fusion.normalized < 1e-6,
            format!("image fusion {}", q.image_fusion.normalized),
        )?;
        check(
            q.segmentation_fusion.raw == 0.0,
            format!("segmentation fusion {}", q.segmentation_fusion.raw),
        )?;

        // single-volume oracle: truth labels on the union grid, trimmed
        let u2 = trim_station(&p.upper, 3).map_err(err)?;
        let u3 = trim_station(&p.lower, 3).map_err(err)?;
        let l2 = trim_station(&p.upper_labels, 3).map_err(err)?;
        let l3 = trim_station(&p.lower_labels, 3).map_err(err)?;
        let fused = fuse(&u2, &u3, &l2, &l3).map_err(err)?;
        let truth = trim_station(&p.truth, 3).map_err(err)?;
        check(
            fused.labels.dims() == truth.dims(),
            format!("fused dims {:?} vs {:?}", fused.labels.dims(), truth.dims()),
        )?;
        let overlap = fused.overlap_z_range.ok_or("no overlap")?;
        let g = fused.labels.geometry();
        let sz = g.spacing[2];
        let mut outside_layer = 0usize;
        let mut differing = 0usize;
        for (i, (a, b)) in fused.labels.values().iter().zip(truth.values()).enumerate() {
            if a != b {
                differing += 1;
                let z = g.axis_world(2, g.index_of(i)[2] as f64);
                let near =
                    (z - overlap.low).abs() <= sz + 1e-6 || (z - overlap.high).abs() <= sz + 1e-6;
                if !near {
                    outside_layer += 1;
                }
            }
        }
        check(
            outside_layer == 0,
            format!("{outside_layer} differing voxels away from the overlap boundary"),
        )?;
        details.push(format!(
            "noise {noise}: cost {:.1e}, {differing} boundary voxels differ",
            q.image_fusion.normalized
        ));
    }
    Ok(details.join("; "))
}

fn c5_qc() -> Outcome {
    let mut image = Vec::new();
    let mut seg = Vec::new();
    for shift in [0, 2, 4] {
        let mut spec = PhantomSpec::default();
        spec.artifacts.motion_shift_voxels = [shift, shift, 0];
        let p = generate(&spec, 5).map_err(err)?;
        let r =
            process_subject(&pair_of(&p, "m", false, 3), &threshold()).map_err(|f| f.message)?;
        image.push(r.quality.image_fusion.normalized);
        seg.push(r.quality.segmentation_fusion.normalized);
    }
    check(
        image.windows(2).all(|w| w[0] <= w[1]) && seg.windows(2).all(|w| w[0] <= w[1]),
        format!("image {image:?} segmentation {seg:?}"),
    )?;
    check(
        image[2] > image[0] && seg[2] > seg[0],
        "motion did not raise fusion costs",
    )?;

    let mut spec = PhantomSpec::default();
    let half = spec.fused_half_extent_z(3);
    for k in &mut spec.kidneys {
        k.center[2] = 0.4 * half;
    }
    let p = generate(&spec, 5).map_err(err)?;
    let r = process_subject(&pair_of(&p, "l", false, 3), &threshold()).map_err(|f| f.message)?;
    let tol = 0.5 * spec.spacing[2] / half;
    let loc = r.quality.location;
    check(
        (loc - 0.40).abs() <= tol,
        format!("location {loc} (tol {tol})"),
    )?;
    Ok(format!(
        "image {:.2e}/{:.2e}/{:.2e}, segmentation {:.2e}/{:.2e}/{:.2e}, location {loc:.4} ± {tol:.4}",
        image[0], image[1], image[2], seg[0], seg[1], seg[2]
    ))
}

fn c6_scrap() -> Outcome {
    let g = Geometry::new([80, 40, 12], [2.232, 2.232, 4.5], [0.0; 3]).map_err(err)?;
    let islands = [
        [70, 5, 1],
        [70, 20, 5],
        [75, 35, 10],
        [5, 38, 10],
        [40, 2, 11],
    ];
    let labels = LabelGrid::from_fn(g, |[x, y, z]| {
        let left_box = (2..31).contains(&x) && (2..33).contains(&y) && (2..5).contains(&z);
        let right_box = (35..64).contains(&x) && (2..33).contains(&y) && (6..8).contains(&z);
        u8::from(left_box || right_box || islands.contains(&[x, y, z]))
    })
    .map_err(err)?;
    check(
        labels.count() == 4500,
        format!("{} labeled voxels", labels.count()),
    )?;
    let set = connected_components(&labels, Connectivity::TwentySix);
    let pair = split_pair(&set, g.center()[0]);
    let cost = scrap_cost(&pair, set.total_voxels());
    check(
        pair.scrap_voxels == 5,
        format!("scrap voxels {}", pair.scrap_voxels),
    )?;
    check(
        (cost - 1.0 / 900.0).abs() <= 1e-12,
        format!("scrap cost {cost}"),
    )?;
    Ok(format!(
        "{} of {} voxels, cost {cost:.12}",
        pair.scrap_voxels,
        set.total_voxels()
    ))
}

fn top_ids(reports: &[&QualityReport], rating: Rating, fraction: f64) -> BTreeSet<String> {
    let mut v: Vec<(f64, &str)> = reports
        .iter()
        .map(|r| {
            (
                r.cost(rating, CostVariant::Normalized),
                r.subject_id.as_str(),
            )
        })
        .collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    let k = ((fraction * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
    v.into_iter()
        .take(k)
        .map(|(_, id)| id.to_string())
        .collect()
}

fn c7_flagging() -> Outcome {
    let base = PhantomSpec {
        noise_sigma: 0.02,
        ..PhantomSpec::small()
    };
    let members = cohort_specs(&base, 1000, 30, 7).map_err(err)?;
    let ids: Vec<String> = members.iter().map(|m| m.subject_id.clone()).collect();
    let load = |i: usize| {
        let m = &members[i];
        let p = generate(&m.spec, m.seed).map_err(|e| renalvol::pipeline::SubjectFailure {
            subject_id: m.subject_id.clone(),
            stage: renalvol::pipeline::Stage::Load,
            message: e.to_string(),
        })?;
        Ok(pair_of(&p, &m.subject_id, true, 3))
    };
    let cfg = PipelineConfig {
        segmenter: SegmenterSpec::ExternalMasks { dir: None },
        ..PipelineConfig::default()
    };
    let run1 = run_inputs(&ids, load, &cfg, 1).map_err(err)?;
    let run4 = run_inputs(&ids, load, &cfg, 4).map_err(err)?;
    let run4b = run_inputs(&ids, load, &cfg, 4).map_err(err)?;
    check(
        run1.failures.is_empty(),
        format!("{} failures", run1.failures.len()),
    )?;
    check(
        run1.results == run4.results && run4.results == run4b.results,
        "reports differ across runs or worker counts",
    )?;

    let reports: Vec<&QualityReport> = run1.results.iter().map(|r| &r.quality).collect();
    let n = reports.len();
    let mut union = BTreeSet::new();
    for (rating, fraction) in [
        (Rating::Location, 0.01),
        (Rating::ImageFusion, 0.01),
        (Rating::SegmentationFusion, 0.02),
    ] {
        let expected = top_ids(&reports, rating, fraction);
        let flagged: BTreeSet<String> = reports
            .iter()
            .filter(|r| r.flags.stage1.contains(&rating))
            .map(|r| r.subject_id.clone())
            .collect();
        check(
            flagged == expected,
            format!("{rating}: flagged {flagged:?}, expected {expected:?}"),
        )?;
        check(
            flagged.len() == nearest_rank_count(fraction, n),
            format!("{rating}: {} flagged", flagged.len()),
        )?;
        union.extend(flagged);
    }
    let union_fraction = union.len() as f64 / n as f64;
    check(
        (0.02..=0.04).contains(&union_fraction),
        format!("stage-1 union fraction {union_fraction}"),
    )?;

    let survivors: Vec<&QualityReport> = reports
        .iter()
        .copied()
        .filter(|r| !r.stage1_flagged())
        .collect();
    for (rating, fraction) in [(Rating::Smoothness, 0.01), (Rating::Scrap, 0.01)] {
        let expected = top_ids(&survivors, rating, fraction);
        let flagged: BTreeSet<String> = reports
            .iter()
            .filter(|r| r.flags.stage2.contains(&rating))
            .map(|r| r.subject_id.clone())
            .collect();
        check(
            flagged == expected,
            format!("{rating}: stage-2 flagged {flagged:?}, expected {expected:?}"),
        )?;
    }
    check(
        reports
            .iter()
            .all(|r| r.flags.stage2.is_empty() || !r.stage1_flagged()),
        "stage-2 flag on a stage-1 exclusion",
    )?;
    let c = run1.counts();
    Ok(format!(
        "stage-1 union {:.1}%, stage1 {} stage2 {} reincluded {} surviving {}",
        100.0 * union_fraction,
        c.stage1_flagged,
        c.stage2_flagged,
        c.location_reincluded,
        c.surviving
    ))
}

fn c8_missing_kidney() -> Outcome {
    let mut spec = PhantomSpec::default();
    spec.artifacts.delete_kidney = Some(Side::Right);
    let p = generate(&spec, 8).map_err(err)?;
    let r = process_subject(&pair_of(&p, "k", false, 3), &threshold()).map_err(|f| f.message)?;
    let m = &r.measurement;
    check(
        m.vol_right_cm3 == 0.0,
        format!("right volume {}", m.vol_right_cm3),
    )?;
    check(m.distance_mm.is_none(), "distance present")?;
    let truth = p
        .kidney(Side::Left)
        .ok_or("left kidney missing from truth")?;
    let e = (m.vol_left_cm3 - truth.analytic_cm3).abs() / truth.analytic_cm3;
    check(e < 0.02, format!("left volume error {e}"))?;
    Ok(format!(
        "left {:.2} cm³, right 0, distance absent",
        m.vol_left_cm3
    ))
}

fn c9_throughput() -> Outcome {
    let p = generate(&PhantomSpec::default(), 9).map_err(err)?;
    let pair = pair_of(&p, "t", false, 3);
    let mut best = Duration::MAX;
    for _ in 0..3 {
        let start = Instant::now();
        process_subject(&pair, &threshold()).map_err(|f| f.message)?;
        best = best.min(start.elapsed());
    }
    check(
        best.as_secs_f64() <= 3.0,
        format!("{:.3} s per subject", best.as_secs_f64()),
    )?;
    Ok(format!(
        "{:.3} s per paper-geometry subject",
        best.as_secs_f64()
    ))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let members = cohort_specs(&PhantomSpec::small(), 24, 6, 10).map_err(err)?;
    let cohort = dir.path().join("cohort");
    phantom::write_cohort(&members, &cohort, "nii", 3, 2).map_err(err)?;
    let manifest = Manifest::load(&cohort.join("manifest.csv")).map_err(err)?;
    let cfg = threshold();
    let outputs = [(1, "a"), (3, "b")].map(|(workers, name)| {
        let out = dir.path().join(name);
        let report = run_cohort(&manifest, &cfg, workers).map_err(err)?;
        report::write_cohort(&out, &report, Some(&manifest)).map_err(err)?;
        Ok::<_, String>(out)
    });
    let [a, b] = outputs;
    let (a, b) = (a?, b?);
    for file in [
        report::MEASUREMENTS_CSV,
        report::QC_CSV,
        report::FLAGS_CSV,
        report::FAILURES_CSV,
        report::RATING_CURVES_CSV,
    ] {
        let x = std::fs::read(a.join(file)).map_err(err)?;
        let y = std::fs::read(b.join(file)).map_err(err)?;
        check(x == y, format!("{file} differs"))?;
    }
    Ok("measurement, qc, flag, failure and curve CSVs byte-identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, f64); 10] = [
        ("SMAPE worked example", c1_smape, 1.0),
        ("Dice/Jaccard consistency", c2_dice_jaccard, 10.0),
        ("Volumetry oracle", c3_volumetry, 5.0),
        ("Fusion correctness", c4_fusion, 10.0),
        ("QC monotonicity and location", c5_qc, f64::INFINITY),
        ("Scrap arithmetic", c6_scrap, f64::INFINITY),
        ("Flagging protocol", c7_flagging, f64::INFINITY),
        ("Missing kidney", c8_missing_kidney, f64::INFINITY),
        ("Throughput", c9_throughput, f64::INFINITY),
        ("End-to-end determinism", c10_determinism, f64::INFINITY),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > *budget => {
                Err(format!("{detail}; took {secs:.2} s, budget {budget} s"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  criterion {label}: {detail} [{secs:.2} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {label}: {why} [{secs:.2} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
