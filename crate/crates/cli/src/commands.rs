use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fryum::biphoton::{conditional_width_estimate, sample_pair, PhotonPair};
use fryum::fryum::{AngularSpec, CrosstalkOptions, SegmentationDoc};
use fryum::optimizer::{equalized_segmentation, sweep, write_sweep_csv, Evaluation, OptimizationResult};
use fryum::simulator::{report_for_batch, simulate_frames, BasisMode, RunReport};
use fryum::tilingbench::{
    border_error_monte_carlo, border_error_report, discarded_grid_rate, packing_report, write_packing_csv,
    BorderErrorReport, GridRate, GridSpec, PackingReport,
};
use fryum::{Basis, BasisPair, Segmentation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Resolved, RunConfig};
use crate::error::CliError;

/// Hex SHA-256 of the canonical JSON of a segmentation.
pub fn geometry_hash(seg: &Segmentation) -> String {
    let doc = serde_json::to_string(&seg.to_doc()).expect("segmentation serializes");
    Sha256::digest(doc.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A segmentation file as written by `optimize` and `segment`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SegmentationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_hash: Option<String>,
    pub segmentation: SegmentationDoc<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation<f64>>,
}

fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(out_path(dir, name))?))
}

fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Numeric(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Builds, bands and equalizes `spec` under the resolved rules.
fn segmentation_for(r: &Resolved, spec: &AngularSpec) -> Result<Segmentation, CliError> {
    let (seg, _) = equalized_segmentation(spec, &r.stats, r.r_ap, &r.rules)?;
    let mut seg = seg.with_discard_mode(r.config.rules.discard_mode);
    if let Some(phase) = r.config.segmentation.as_ref().and_then(|s| s.sector_phase.clone()) {
        let widening = seg.widening().to_vec();
        let doc = SegmentationDoc {
            sector_phase: phase,
            widening,
            ..seg.to_doc()
        };
        seg = Segmentation::from_doc(&doc)?;
    }
    Ok(seg)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SweepOutput<'a> {
    config: &'a RunConfig,
    seed: u64,
    result: &'a OptimizationResult<f64>,
}

pub fn optimize(r: &Resolved, out: &Path, dump_all: bool) -> Result<String, CliError> {
    let res = sweep(&r.stats, r.r_ap, &r.rules, &r.sweep_options(dump_all))?;
    let mut csv = Vec::new();
    write_sweep_csv(&res, &mut csv)?;
    write_text(out, "sweep.csv", &String::from_utf8(csv).expect("ascii csv"))?;
    write_json(
        out,
        "sweep.json",
        &SweepOutput {
            config: &r.config,
            seed: r.config.seed,
            result: &res,
        },
    )?;
    let Some(best) = res.global_best.clone() else {
        return Err(CliError::Empty(format!(
            "no valid angular spec for N in {:?}",
            r.config.rules.n_range
        )));
    };
    let seg = segmentation_for(r, &best.spec)?;
    let hash = geometry_hash(&seg);
    write_json(
        out,
        "best_segmentation.json",
        &SegmentationFile {
            config: Some(r.config.clone()),
            seed: Some(r.config.seed),
            geometry_hash: Some(hash.clone()),
            segmentation: seg.to_doc(),
            evaluation: Some(best.clone()),
        },
    )?;
    let mut s = String::new();
    s += &format!("best A = {} (N = {}, aux = {:.4})\n", best.spec, best.n, best.a_aux);
    s += &format!("d = {}\n", best.report.d);
    s += &format!("p = {:.4} (before equalization {:.4})\n", best.report.p, best.p_banded);
    s += &format!("epsilon = {:.5}\n", best.report.epsilon.combined);
    s += &format!("R = {:.4}, Rmod = {:.4} bits/photon\n", best.report.rate, best.report.rate_mod);
    s += "per N:\n";
    for (n, b) in &res.best_per_n {
        let size = res.search_size[n];
        match b {
            Some(e) => {
                s += &format!(
                    "  N={n}: {} Rmod={:.4} ({} valid, {} evaluated)\n",
                    e.spec, e.report.rate_mod, size.valid, size.evaluated
                )
            }
            None => s += &format!("  N={n}: no valid spec\n"),
        }
    }
    s += &format!("geometry hash {hash}\n");
    write_text(out, "summary.txt", &s)?;
    Ok(s)
}

/// Reads a segmentation file (wrapped or a bare document) and checks its
/// stored hash against the rebuilt geometry.
pub fn read_segmentation(path: &Path) -> Result<(Segmentation, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let file: SegmentationFile = match serde_json::from_str(&text) {
        Ok(f) => f,
        Err(_) => SegmentationFile {
            config: None,
            seed: None,
            geometry_hash: None,
            segmentation: serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
            evaluation: None,
        },
    };
    let seg = Segmentation::from_doc(&file.segmentation)?;
    let hash = geometry_hash(&seg);
    if let Some(stored) = &file.geometry_hash {
        if *stored != hash {
            return Err(CliError::Input(format!(
                "{}: geometry hash {stored} does not match rebuilt {hash}",
                path.display()
            )));
        }
    }
    Ok((seg, hash))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SimulateOutput<'a> {
    config: &'a RunConfig,
    seed: u64,
    geometry_hash: &'a str,
    #[serde(rename = "A")]
    a: &'a [usize],
    report: &'a RunReport<f64>,
}

pub fn simulate(r: &Resolved, seg_file: Option<&Path>, out: &Path, event_log: bool) -> Result<String, CliError> {
    let (seg, hash) = match (seg_file, r.spec()?) {
        (Some(p), spec) => {
            let (seg, hash) = read_segmentation(p)?;
            if let Some(spec) = spec {
                if spec.dimension() != seg.dimension() {
                    return Err(CliError::Config(format!(
                        "config segmentation has d = {} but {} has d = {}",
                        spec.dimension(),
                        p.display(),
                        seg.dimension()
                    )));
                }
            }
            (seg, hash)
        }
        (None, Some(spec)) => {
            let seg = segmentation_for(r, &spec)?;
            let hash = geometry_hash(&seg);
            (seg, hash)
        }
        (None, None) => {
            return Err(CliError::Config(
                "simulate needs --segmentation or segmentation.A in the config".into(),
            ))
        }
    };
    let cfg = r.sim_config(seg.r_ap())?;
    let batch = simulate_frames(&cfg)?;
    if event_log {
        let mut w = create(out, "events.bin")?;
        batch.write_event_log(&mut w)?;
        w.flush()?;
    }
    let mut report = report_for_batch(&batch, &seg)?;
    let rel = (seg.stats().sigma / r.stats.sigma - 1.0).abs();
    if rel > 1e-6 {
        report.notes.push(format!(
            "segmentation sigma {} differs from the configured source sigma {}",
            seg.stats().sigma,
            r.stats.sigma
        ));
    }
    let matrix = report.matrix.clone().expect("report carries its matrix");
    for pair in [BasisPair::XX, BasisPair::XP, BasisPair::PX, BasisPair::PP] {
        let mut w = create(out, &format!("error_matrix_{}.csv", pair.label()))?;
        matrix.write_block_csv(pair, &mut w)?;
        w.flush()?;
    }
    write_json(
        out,
        "report.json",
        &SimulateOutput {
            config: &r.config,
            seed: r.config.seed,
            geometry_hash: &hash,
            a: seg.spec().counts(),
            report: &report,
        },
    )?;
    let mut s = format!("A = {}, d = {}, frames = {}\n", seg.spec(), report.d, report.frames);
    match &report.qder {
        Some(q) => {
            s += &format!(
                "QDER = {:.5} +- {:.5} (position {:.5}, momentum {:.5})\n",
                q.combined,
                q.combined_se.unwrap_or(f64::NAN),
                q.position,
                q.momentum
            )
        }
        None => s += "QDER unavailable\n",
    }
    if let Some(p) = report.p_measured {
        s += &format!("measured p = {p:.4}\n");
    }
    if let Some(rate) = &report.rate {
        s += &format!("R = {:.4}, Rmod = {:.4} bits/photon\n", rate.rate, rate.rate_mod);
    }
    s += &format!(
        "sifted key: {} dits, {} errors\n",
        report.sift.length, report.sift.errors
    );
    if report.wide_uncertainty {
        s += "wide uncertainty: too few coincidences\n";
    }
    for n in &report.notes {
        s += &format!("note: {n}\n");
    }
    s += &format!("geometry hash {hash}\n");
    Ok(s)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TilingOutput<'a> {
    n_max: usize,
    rows: &'a [PackingReport<f64>],
}

pub fn tiling(n_max: usize, out: &Path) -> Result<String, CliError> {
    if n_max < 2 {
        return Err(CliError::Config(format!("--n-max must be at least 2, got {n_max}")));
    }
    let rows = (2..=n_max)
        .map(packing_report::<f64>)
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = Vec::new();
    write_packing_csv(&rows, &mut csv)?;
    write_text(out, "packing.csv", &String::from_utf8(csv).expect("ascii csv"))?;
    write_json(out, "packing.json", &TilingOutput { n_max, rows: &rows })?;
    let mut s = String::from("n  N_circle  N_fryum>=  frac_hex  frac_fryum\n");
    for r in &rows {
        s += &format!(
            "{:<2} {:>8} {:>10} {:>9.4} {:>11.4}\n",
            r.n,
            r.counts.circle,
            r.counts.fryum_lower_bound,
            r.hexagon_fraction.unwrap_or(f64::NAN),
            r.fryum_fraction.unwrap_or(f64::NAN)
        );
    }
    Ok(s)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct BorderOutput {
    grid: String,
    seed: u64,
    samples: usize,
    report: BorderErrorReport,
    monte_carlo: MonteCarlo,
    with_discard: Option<GridRate>,
    without_discard: GridRate,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct MonteCarlo {
    epsilon: f64,
    standard_error: f64,
}

pub fn border_error(grid: &Path, samples: usize, seed: u64, out: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(grid).map_err(|e| CliError::Input(format!("{}: {e}", grid.display())))?;
    let g = GridSpec::parse_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", grid.display())))?;
    let report = border_error_report(&g);
    let (mc, se) = if samples > 0 {
        border_error_monte_carlo(&g, samples, seed)
    } else {
        (f64::NAN, f64::NAN)
    };
    let with = match discarded_grid_rate(&g, true) {
        Ok(r) => Some(r),
        Err(fryum::Error::AllPixelsDiscarded) => None,
        Err(e) => return Err(e.into()),
    };
    let without = discarded_grid_rate(&g, false)?;
    let mut s = format!("{}x{} grid, d = {}\n", report.width, report.height, report.d);
    let weights = ["0", "1/4", "7/16", "7/16", "3/4"];
    for (k, &n) in report.pixels_by_foreign_edges.iter().enumerate() {
        s += &format!("  {n:>4} pixels with {k} foreign edges (error {})\n", weights[k]);
    }
    s += &format!("epsilon = {:.4}\n", report.epsilon);
    s += &format!("quarter-square model = {:.4}\n", report.epsilon_quarter_weights);
    if samples > 0 {
        s += &format!("Monte Carlo = {mc:.4} +- {se:.4} ({samples} samples)\n");
    }
    if let Some(w) = &with {
        s += &format!("discard: d = {}, p = {:.4}, Rmod = {:.4}\n", w.d, w.p, w.rate_mod);
    } else {
        s += "discard: every pixel discarded\n";
    }
    s += &format!("no discard: d = {}, eps = {:.4}, Rmod = {:.4}\n", without.d, without.epsilon, without.rate_mod);
    write_json(
        out,
        "border_error.json",
        &BorderOutput {
            grid: grid.display().to_string(),
            seed,
            samples,
            report,
            monte_carlo: MonteCarlo {
                epsilon: mc,
                standard_error: se,
            },
            with_discard: with,
            without_discard: without,
        },
    )?;
    Ok(s)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SampleOutput<'a> {
    config: &'a RunConfig,
    seed: u64,
    count: usize,
    /// Per basis: sample marginal width and estimated conditional width.
    widths: Vec<(Basis, f64, Option<f64>)>,
    expected_sigma: f64,
    expected_sigma_cond: f64,
}

pub fn sample(r: &Resolved, count: usize, out: &Path) -> Result<String, CliError> {
    if count == 0 {
        return Err(CliError::Config("--count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(r.config.seed);
    let pick = |rng: &mut ChaCha8Rng| {
        if rng.random::<bool>() {
            Basis::Momentum
        } else {
            Basis::Position
        }
    };
    let pairs: Vec<PhotonPair<f64>> = (0..count)
        .map(|_| {
            let (a, b) = match r.config.detector.basis_mode {
                BasisMode::Random => (pick(&mut rng), pick(&mut rng)),
                BasisMode::Fixed { alice, bob } => (alice, bob),
            };
            let mut p = sample_pair(&r.source, a, b, &mut rng);
            let (sa, sb) = (r.scales.get(a), r.scales.get(b));
            p.alice = [p.alice[0] * sa, p.alice[1] * sa];
            p.bob = [p.bob[0] * sb, p.bob[1] * sb];
            p
        })
        .collect();
    let mut w = create(out, "samples.csv")?;
    writeln!(w, "alice_basis,bob_basis,alice_x,alice_y,bob_x,bob_y")?;
    for p in &pairs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.alice_basis.symbol(),
            p.bob_basis.symbol(),
            p.alice[0],
            p.alice[1],
            p.bob[0],
            p.bob[1]
        )?;
    }
    w.flush()?;
    let mut widths = Vec::new();
    let mut s = format!("{count} pairs, seed {}\n", r.config.seed);
    for basis in Basis::ALL {
        let matched: Vec<PhotonPair<f64>> = pairs
            .iter()
            .filter(|p| p.alice_basis == basis && p.bob_basis == basis)
            .copied()
            .collect();
        let xs: Vec<f64> = pairs
            .iter()
            .filter(|p| p.alice_basis == basis)
            .flat_map(|p| p.alice)
            .collect();
        let sd = if xs.len() > 1 {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        let cond = conditional_width_estimate(&matched).ok();
        s += &format!(
            "{:?}: sigma {:.5}, conditional width {}\n",
            basis,
            sd,
            cond.map_or("n/a (too few matched pairs)".to_string(), |c| format!("{c:.5}"))
        );
        widths.push((basis, sd, cond));
    }
    s += &format!(
        "expected (position basis): sigma {:.5}, conditional width {:.5}\n",
        r.stats.sigma, r.stats.sigma_cond
    );
    write_json(
        out,
        "sample_summary.json",
        &SampleOutput {
            config: &r.config,
            seed: r.config.seed,
            count,
            widths,
            expected_sigma: r.stats.sigma,
            expected_sigma_cond: r.stats.sigma_cond,
        },
    )?;
    Ok(s)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SegmentSummary {
    kept_probabilities: Vec<f64>,
    total_kept: f64,
    epsilon_crosstalk: f64,
    epsilon_fast: f64,
    joint_kept: f64,
    pitch_um: f64,
    coarse: bool,
}

pub fn segment(r: &Resolved, spec: Option<AngularSpec>, out: &Path) -> Result<String, CliError> {
    let spec = match spec.or(r.spec()?) {
        Some(s) => s,
        None => return Err(CliError::Config("segment needs --spec or segmentation.A".into())),
    };
    let seg = segmentation_for(r, &spec)?;
    let hash = geometry_hash(&seg);
    let pitch = r.pitch();
    let grid = fryum::PixelGrid::covering(seg.r_ap() * 1.02, pitch)?;
    let map = seg.rasterize(&grid)?;
    let mut w = create(out, "labels.pgm")?;
    map.write_pgm(&mut w)?;
    w.flush()?;
    let mut w = create(out, "labels.csv")?;
    map.write_csv(&mut w)?;
    w.flush()?;
    let xt = seg.predicted_crosstalk(&CrosstalkOptions {
        samples: r.config.rules.crosstalk_samples,
        seed: r.config.seed,
    });
    let summary = SegmentSummary {
        kept_probabilities: seg.kept_probabilities(),
        total_kept: seg.total_kept(),
        epsilon_crosstalk: xt.epsilon,
        epsilon_fast: seg.fast_crosstalk(),
        joint_kept: xt.joint_kept,
        pitch_um: pitch,
        coarse: map.coarse,
    };
    let s = format!(
        "A = {}, d = {}, aux = {:.4}\np = {:.4}, epsilon = {:.5} (fast bound {:.5})\nlabel map {}x{} at pitch {:.5}{}\ngeometry hash {hash}\n",
        spec,
        seg.dimension(),
        seg.a_aux(),
        summary.total_kept,
        summary.epsilon_crosstalk,
        summary.epsilon_fast,
        map.width,
        map.height,
        pitch,
        if map.coarse { " (coarser than the conditional width)" } else { "" }
    );
    #[derive(Serialize)]
    #[serde(rename_all = "camelCase")]
    struct Out<'a> {
        #[serde(flatten)]
        file: SegmentationFile,
        summary: &'a SegmentSummary,
    }
    write_json(
        out,
        "segmentation.json",
        &Out {
            file: SegmentationFile {
                config: Some(r.config.clone()),
                seed: Some(r.config.seed),
                geometry_hash: Some(hash),
                segmentation: seg.to_doc(),
                evaluation: None,
            },
            summary: &summary,
        },
    )?;
    Ok(s)
}
