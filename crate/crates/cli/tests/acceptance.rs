//! Acceptance report: one PASS/FAIL line per criterion at its stated
//! tolerance. Exits non-zero if any line fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{gauss2, gl, legendre, trapezoid};
use fryum::biphoton::SourceParams;
use fryum::fryum::{CrosstalkOptions, MacropixelId};
use fryum::keyrate::{modified_rate, secure_rate};
use fryum::optimizer::{enumerate, is_valid, ValidityRules};
use fryum::simulator::{coincidences, simulate_frames, BasisMode, DetectorModel, SimConfig};
use fryum::tilingbench::{
    border_error_monte_carlo, border_error_report, circle_packing, discarded_grid_rate, hex_packing,
    lattice_circle_centers, packing_report, GridSpec,
};
use fryum::{AngularSpec, BasisPair, BeamStats, Segmentation};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const K: f64 = 104.6;
const R_AP: f64 = 2.0516;
const BIN: &str = env!("CARGO_BIN_EXE_fryum");

#[derive(Default)]
struct Report {
    failed: usize,
    total: usize,
}

impl Report {
    fn check(&mut self, id: &str, pass: bool, detail: impl AsRef<str>) {
        self.total += 1;
        if !pass {
            self.failed += 1;
        }
        println!("{} {id:<4} {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    }
}

fn stats() -> BeamStats {
    BeamStats::from_sigma_and_schmidt(1.0, K).unwrap()
}

fn target_spec() -> AngularSpec {
    AngularSpec::new(vec![1, 6, 8, 21]).unwrap()
}

fn key_rates(r: &mut Report) {
    let v = secure_rate(4, 0.16_f64).unwrap();
    r.check("1a", (v - 0.22).abs() <= 0.005, format!("secureRate(4, 0.16) = {v:.5}, target 0.22 +- 0.005"));
    let v = modified_rate(4, 0.0_f64, 16.0 / 36.0).unwrap();
    r.check("1b", (v - 0.8889).abs() <= 1e-4, format!("modifiedRate(4, 0, 16/36) = {v:.6}, target 0.8889 +- 1e-4"));
    let v = modified_rate(9, 0.0_f64, 9.0 / 36.0).unwrap();
    r.check("1c", (v - 0.7925).abs() <= 1e-4, format!("modifiedRate(9, 0, 9/36) = {v:.6}, target 0.7925 +- 1e-4"));
}

fn border_grids(r: &mut Report) {
    let four = GridSpec::blocks(2, 2, 3, 3).unwrap();
    let pixels = GridSpec::blocks(6, 6, 1, 1).unwrap();
    let e4 = border_error_report(&four).epsilon;
    r.check("2a", (e4 - 0.1597).abs() <= 1e-4, format!("6x6 four-macropixel eps = {e4:.6}, target 0.1597 +- 1e-4"));
    let e36 = border_error_report(&pixels).epsilon;
    r.check("2b", (e36 - 0.5764).abs() <= 1e-4, format!("6x6 per-pixel eps = {e36:.6}, target 0.5764 +- 1e-4"));
    let with = discarded_grid_rate(&four, true).unwrap().rate_mod;
    let without = discarded_grid_rate(&four, false).unwrap().rate_mod;
    let ratio = with / without;
    r.check(
        "2c",
        ratio > 4.0,
        format!("Rmod(discard)/Rmod(no-discard) = {with:.4}/{without:.4} = {ratio:.3}, target > 4"),
    );
    for (id, name, g, table) in [("2d", "four-macropixel", &four, e4), ("2e", "per-pixel", &pixels, e36)] {
        let t = Instant::now();
        let (p, se) = border_error_monte_carlo(g, 1_000_000, 7);
        let dt = t.elapsed();
        let ok = (p - table).abs() <= 3.0 * se && dt < Duration::from_secs(10);
        r.check(
            id,
            ok,
            format!(
                "Monte Carlo {name}: {p:.4} +- {se:.4} vs table {table:.4} (3 se), {:.2} s of 10 s",
                dt.as_secs_f64()
            ),
        );
    }
}

fn joint(xa: f64, xb: f64, s: f64, d: f64) -> f64 {
    let u = (xa + xb) / s;
    let v = (xa - xb) / d;
    (-0.5 * (u * u + v * v)).exp()
}

/// Marginal width and the conditional width of the slice at 0.7 sigma.
fn widths_by_quadrature(s: f64, d: f64) -> (f64, f64) {
    let sigma_guess = 0.5 * (s * s + d * d).sqrt();
    let l = 12.0 * sigma_guess;
    let n = ((2.0 * l / (s.min(d) / 6.0)).ceil() as usize).max(400);
    let z = trapezoid(|xa| trapezoid(|xb| joint(xa, xb, s, d), -l, l, n), -l, l, n);
    let m2 = trapezoid(|xa| xa * xa * trapezoid(|xb| joint(xa, xb, s, d), -l, l, n), -l, l, n);
    let sigma = (m2 / z).sqrt();
    let x0 = 0.7 * sigma;
    let c0 = trapezoid(|xb| joint(x0, xb, s, d), -l, l, n);
    let c1 = trapezoid(|xb| xb * joint(x0, xb, s, d), -l, l, n);
    let c2 = trapezoid(|xb| xb * xb * joint(x0, xb, s, d), -l, l, n);
    (sigma, (c2 / c0 - (c1 / c0).powi(2)).sqrt())
}

fn conditional_width(r: &mut Report) {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for ratio in [1.0, 2.0, 5.0, 20.0, 50.0] {
        let src = SourceParams::new(ratio * 30.0, 30.0).unwrap();
        for (s, d) in [(src.w0, src.b), (1.0 / src.w0, 1.0 / src.b)] {
            let (sigma, cond) = widths_by_quadrature(s, d);
            worst = worst.max((cond / sigma * src.schmidt_number().sqrt() - 1.0).abs());
        }
    }
    let dt = t.elapsed();
    r.check(
        "3",
        worst < 1e-6 && dt < Duration::from_secs(30),
        format!(
            "sigma_cond/sigma = 1/sqrt(K) for w0/b in {{1,2,5,20,50}}: worst rel {worst:.2e} (< 1e-6), {:.1} s",
            dt.as_secs_f64()
        ),
    );
}

/// Mass of one unbanded macropixel by polar Gauss-Legendre quadrature.
fn macropixel_mass(seg: &Segmentation, linear: usize, rule: &[(f64, f64)]) -> f64 {
    let m = seg.macropixel(linear).unwrap();
    let radii = seg.radii();
    let w = TAU / seg.spec().counts()[m.ring] as f64;
    let start = seg.sector_phase()[m.ring] + m.sector as f64 * w;
    let (lo, hi) = (radii[m.ring], radii[m.ring + 1]);
    let sigma = seg.stats().sigma;
    gl(
        |rr| rr * gl(|th| gauss2(rr * th.cos(), rr * th.sin(), sigma), start, start + w, 2, rule),
        lo,
        hi,
        16,
        rule,
    )
}

fn segmentation_construction(r: &mut Report) {
    let t = Instant::now();
    let st = stats();
    let rules = ValidityRules::new(3.0, &st);
    let valid: Vec<AngularSpec> = (2..=6)
        .flat_map(|n| enumerate(n, &st, R_AP, &rules))
        .filter(|s| is_valid(s, &st, R_AP, &rules).valid)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let picks: Vec<AngularSpec> = (0..12).map(|_| valid[rng.random_range(0..valid.len())].clone()).collect();
    let rule = legendre(24);
    let mut worst: f64 = 0.0;
    for spec in &picks {
        let seg = Segmentation::build(spec.clone(), st, R_AP).unwrap();
        for i in 0..seg.dimension() {
            worst = worst.max((macropixel_mass(&seg, i, &rule) - seg.alpha()).abs());
        }
    }
    r.check(
        "4a",
        worst < 1e-9,
        format!("{} random valid specs: max |P - alpha| = {worst:.2e} (< 1e-9)", picks.len()),
    );

    let n = 1_000_000;
    let mut worst_z: f64 = 0.0;
    for (s, spec) in picks.iter().take(4).enumerate() {
        let seg = Segmentation::build(spec.clone(), st, R_AP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + s as u64);
        let mut counts = vec![0usize; seg.dimension()];
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            if let MacropixelId::Macro(m) = seg.classify([x, y]) {
                counts[m.linear] += 1;
            }
        }
        let a = seg.alpha();
        let mean = n as f64 * a;
        let sd = (mean * (1.0 - a)).sqrt();
        for c in counts {
            worst_z = worst_z.max((c as f64 - mean).abs() / sd);
        }
    }
    let dt = t.elapsed();
    r.check(
        "4b",
        worst_z <= 5.0 && dt < Duration::from_secs(60),
        format!("Monte Carlo landing at 1e6 samples: worst |z| = {worst_z:.2} (<= 5), {:.1} s", dt.as_secs_f64()),
    );
}

fn run(args: &[&str], workers: usize) -> (i32, String) {
    let out = Command::new(BIN)
        .arg("--workers")
        .arg(workers.to_string())
        .args(args)
        .output()
        .expect("run fryum");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn optimizer_reproduction(r: &mut Report, dir: &Path) {
    let out = dir.join("c5");
    let o = out.to_str().unwrap();
    let t = Instant::now();
    let (code, text) = run(&["optimize", "--out-dir", o], num_cpus());
    let dt = t.elapsed();
    if code != 0 {
        r.check("5", false, format!("optimize exited {code}: {text}"));
        return;
    }
    let best = read_json(&out.join("best_segmentation.json"));
    let ev = &best["evaluation"];
    let a: Vec<u64> = ev["A"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let aux = ev["aAux"].as_f64().unwrap();
    let p = ev["report"]["p"].as_f64().unwrap();
    let rate = ev["report"]["R"].as_f64().unwrap();
    r.check(
        "5a",
        a == [1, 6, 8, 21] && (aux - 5.0).abs() < 0.5,
        format!("global optimum A = {a:?} + aux {aux:.3}, target (1,6,8,21) + aux ~5"),
    );
    r.check("5b", (p - 0.66).abs() <= 0.03, format!("optimum p = {p:.4}, target 0.66 +- 0.03"));
    r.check("5c", (rate - 3.4).abs() <= 0.2, format!("optimum R = {rate:.4} bits/photon, target 3.4 +- 0.2"));
    r.check("5d", dt < Duration::from_secs(600), format!("sweep N in [2,9] took {:.1} s of 600 s", dt.as_secs_f64()));

    let seg = out.join("best_segmentation.json");
    let (code, text) = run(&["simulate", "--segmentation", seg.to_str().unwrap(), "--out-dir", o], num_cpus());
    if code != 0 {
        r.check("5e", false, format!("simulate exited {code}: {text}"));
        return;
    }
    let rep = read_json(&out.join("report.json"));
    let rmod = rep["report"]["rate"]["Rmod"].as_f64();
    r.check(
        "5e",
        rmod.is_some_and(|v| (3.1..=3.5).contains(&v)),
        format!("simulated low-noise Rmod = {rmod:.4?}, target [3.1, 3.5]"),
    );
}

fn num_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn crosstalk_bound(r: &mut Report) {
    let t = Instant::now();
    let opts = CrosstalkOptions {
        samples: 1_000_000,
        seed: 6,
    };
    let plain = Segmentation::build(target_spec(), stats(), R_AP).unwrap();
    let banded = plain.clone().apply_discard_bands(3.0).and_then(|s| s.equalize());
    match banded {
        Ok(seg) => {
            let e = seg.predicted_crosstalk(&opts).epsilon;
            r.check("6a", e < 0.01, format!("(1,6,8,21) with 3 sigma_cond bands: eps = {e:.5}, target < 0.01"));
        }
        Err(err) => r.check("6a", false, format!("(1,6,8,21) with bands: {err}")),
    }
    let e = plain.predicted_crosstalk(&opts).epsilon;
    let dt = t.elapsed();
    r.check(
        "6b",
        (e - 0.28).abs() <= 0.05 && dt < Duration::from_secs(120),
        format!("(1,6,8,21) without bands: eps = {e:.4}, target 0.28 +- 0.05, {:.1} s", dt.as_secs_f64()),
    );
}

fn estimator(r: &mut Report) {
    let t = Instant::now();
    let st = stats();
    let seg = Segmentation::build(AngularSpec::new(vec![1, 6, 12]).unwrap(), st, R_AP)
        .and_then(|s| s.apply_discard_bands(3.0))
        .and_then(|s| s.equalize())
        .unwrap();
    let src = SourceParams::from_schmidt(K).unwrap();
    let cfg = |mu: f64, seed: u64| {
        let mut det = DetectorModel::for_segmentation(&seg, st.sigma_cond / 4.0, 100_000).unwrap();
        det.mean_pairs_per_frame = mu;
        SimConfig {
            source: src,
            scales: fryum::biphoton::BasisScales::matched(&src, 1.0),
            detector: det,
            basis_mode: BasisMode::Random,
            seed,
        }
    };
    let low = coincidences(&simulate_frames(&cfg(0.1, 71)).unwrap(), &seg).unwrap();
    let high = coincidences(&simulate_frames(&cfg(1.0, 72)).unwrap(), &seg).unwrap();
    let ql = fryum::keyrate::qder(&low.corrected).unwrap();
    let qh = fryum::keyrate::qder(&high.corrected).unwrap();
    let qr = fryum::keyrate::qder(&high.raw).unwrap();
    let se = ql.combined_se.unwrap().hypot(qh.combined_se.unwrap());
    r.check(
        "7a",
        (qh.combined - ql.combined).abs() <= 3.0 * se,
        format!(
            "10x accidentals: corrected QDER {:.5} vs low-rate {:.5} (3 se = {:.5}; uncorrected {:.4})",
            qh.combined,
            ql.combined,
            3.0 * se,
            qr.combined
        ),
    );
    let m = &low.corrected;
    let d = m.d;
    let var = m.entry_variance.as_ref().unwrap();
    let crit = ChiSquared::new((d * d - 1) as f64).unwrap().inverse_cdf(0.99);
    let mut stats_line = Vec::new();
    let mut ok = true;
    for pair in [BasisPair::XP, BasisPair::PX] {
        let block = m.block(pair);
        let mean = m.block_mass(pair) / (d * d) as f64;
        let v = var[pair.index()].iter().sum::<f64>() / (d * d) as f64;
        let chi2: f64 = block.iter().map(|e| (e - mean).powi(2) / v).sum();
        ok &= chi2 < crit;
        stats_line.push(format!("{} chi2 = {chi2:.1}", pair.label()));
    }
    let dt = t.elapsed();
    r.check(
        "7b",
        ok && dt < Duration::from_secs(300),
        format!(
            "mismatched-basis uniformity at 1%: {} (crit {crit:.1}), {:.1} s",
            stats_line.join(", "),
            dt.as_secs_f64()
        ),
    );
}

fn packing(r: &mut Report) {
    let mut ok = true;
    for n in 1..=10 {
        let lattice = lattice_circle_centers(n).len() as u64;
        ok &= lattice == circle_packing::<f64>(n).0 && lattice == hex_packing::<f64>(n).0;
    }
    r.check("8a", ok, "circle and hexagon counts equal lattice enumeration for n <= 10");
    let mut ok = true;
    for n in 2..=12 {
        let rep = packing_report::<f64>(n).unwrap();
        let d = &rep.discarded;
        ok &= d.fryum_bound < d.hexagon && d.hexagon < d.circle;
    }
    r.check("8b", ok, "discarded area fryum < hexagon < circle for n in [2, 12]");
}

/// All files under `dir`, relative path to bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
    }
    out
}

fn determinism(r: &mut Report, dir: &Path) {
    let grid = concat!(env!("CARGO_MANIFEST_DIR"), "/data/grid_6x6_four.csv");
    let quick = [
        "--set",
        "rules.Nrange=[2,4]",
        "--set",
        "rules.crosstalkSamples=100000",
        "--set",
        "detector.frames=100000",
    ];
    let seg_src = dir.join("det_seg");
    let (code, text) = run(&[&["optimize", "--out-dir", seg_src.to_str().unwrap()][..], &quick].concat(), 1);
    assert_eq!(code, 0, "{text}");
    let seg_file = seg_src.join("best_segmentation.json");
    let seg_file = seg_file.to_str().unwrap();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("optimize", [&["optimize", "--dump-all"][..], &quick].concat()),
        ("simulate", [&["simulate", "--event-log", "--segmentation", seg_file][..], &quick].concat()),
        ("tiling", vec!["tiling"]),
        ("border-error", vec!["border-error", grid]),
        ("sample", vec!["sample"]),
        ("segment", vec!["segment", "--spec", "1,6,12"]),
    ];
    for (name, args) in commands {
        let mut snaps = Vec::new();
        let mut failure = None;
        for workers in [1, 8] {
            for rep in 0..2 {
                let out = dir.join(format!("det_{name}_{workers}_{rep}"));
                let mut a = args.clone();
                a.extend(["--out-dir", out.to_str().unwrap()]);
                let (code, text) = run(&a, workers);
                if code != 0 {
                    failure = Some(format!("exit {code}: {text}"));
                }
                snaps.push(snapshot(&out));
            }
        }
        let same = snaps.iter().all(|s| *s == snaps[0]) && !snaps[0].is_empty();
        let files: Vec<String> = snaps[0].keys().map(|k| k.display().to_string()).collect();
        r.check(
            "9",
            failure.is_none() && same,
            format!(
                "{name}: 2 runs x workers {{1, 8}} byte-identical [{}]{}",
                files.join(", "),
                failure.map_or(String::new(), |f| format!(" ({f})"))
            ),
        );
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Report::default();
    key_rates(&mut r);
    border_grids(&mut r);
    conditional_width(&mut r);
    segmentation_construction(&mut r);
    optimizer_reproduction(&mut r, dir.path());
    crosstalk_bound(&mut r);
    estimator(&mut r);
    packing(&mut r);
    determinism(&mut r, dir.path());
    println!("acceptance: {} of {} checks passed", r.total - r.failed, r.total);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
