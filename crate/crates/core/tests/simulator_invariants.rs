use fryum::biphoton::BasisScales;
use fryum::fryum::CrosstalkOptions;
use fryum::keyrate::qder;
use fryum::simulator::{
    coincidences, report_for_batch, sift_key, simulate_frames, BasisMode, DetectorModel, SimConfig,
};
use fryum::{AngularSpec, BasisPair, BeamStats, ErrorMatrix, Segmentation, SourceParams};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const K: f64 = 104.6;
const R_AP: f64 = 2.0516;

fn segmentation(a: &[usize]) -> Segmentation {
    let st = BeamStats::from_sigma_and_schmidt(1.0, K).unwrap();
    Segmentation::build(AngularSpec::new(a.to_vec()).unwrap(), st, R_AP)
        .unwrap()
        .apply_discard_bands(3.0)
        .unwrap()
        .equalize()
        .unwrap()
}

fn config(seg: &Segmentation, frames: usize, mu: f64, dark: f64, seed: u64) -> SimConfig<f64> {
    let src = SourceParams::from_schmidt(K).unwrap();
    let mut det = DetectorModel::for_segmentation(seg, 0.02, frames).unwrap();
    det.mean_pairs_per_frame = mu;
    det.dark_rate = dark;
    SimConfig {
        source: src,
        scales: BasisScales::matched(&src, 1.0),
        detector: det,
        basis_mode: BasisMode::Random,
        seed,
    }
}

fn mismatched_mass(m: &ErrorMatrix) -> f64 {
    m.block_mass(BasisPair::XP) + m.block_mass(BasisPair::PX)
}

#[test]
fn background_correction_removes_tenfold_accidentals() {
    let seg = segmentation(&[1, 6, 12]);
    let low = coincidences(&simulate_frames(&config(&seg, 400_000, 0.1, 0.0, 1)).unwrap(), &seg).unwrap();
    let high = coincidences(&simulate_frames(&config(&seg, 400_000, 1.0, 0.0, 2)).unwrap(), &seg).unwrap();
    let ql = qder(&low.corrected).unwrap();
    let qh = qder(&high.corrected).unwrap();
    let raw = qder(&high.raw).unwrap();
    let (sl, sh) = (ql.combined_se.unwrap(), qh.combined_se.unwrap());
    let tol = 3.0 * (sl * sl + sh * sh).sqrt();
    assert!(
        (qh.combined - ql.combined).abs() < tol,
        "corrected {} vs low-rate {} (tol {tol})",
        qh.combined,
        ql.combined
    );
    // without the correction accidentals dominate the error ratio
    assert!(raw.combined > qh.combined + 10.0 * sh, "raw {} corrected {}", raw.combined, qh.combined);
}

#[test]
fn mismatched_blocks_are_uniform() {
    let seg = segmentation(&[1, 6, 12]);
    let co = coincidences(&simulate_frames(&config(&seg, 1_000_000, 0.1, 0.0, 3)).unwrap(), &seg).unwrap();
    let m = &co.corrected;
    let d = m.d;
    let var = m.entry_variance.as_ref().unwrap();
    let crit = ChiSquared::new((d * d - 1) as f64).unwrap().inverse_cdf(0.99);
    for pair in [BasisPair::XP, BasisPair::PX] {
        let block = m.block(pair);
        let mean = m.block_mass(pair) / (d * d) as f64;
        // under uniformity every entry has the same variance; pool it
        let v = var[pair.index()].iter().sum::<f64>() / (d * d) as f64;
        let chi2: f64 = block.iter().map(|e| (e - mean).powi(2) / v).sum();
        assert!(chi2 < crit, "{}: chi2 {chi2} >= {crit}", pair.label());
    }
}

#[test]
fn measured_error_matches_prediction_and_sifted_key() {
    let seg = segmentation(&[1, 6, 12]);
    let batch = simulate_frames(&config(&seg, 1_000_000, 0.1, 0.0, 4)).unwrap();
    let report = report_for_batch(&batch, &seg).unwrap();
    let q = report.qder.unwrap();
    let se = q.combined_se.unwrap();
    let opts = CrosstalkOptions {
        samples: 2_000_000,
        seed: 5,
    };
    let pred = seg.predicted_crosstalk(&opts);
    let se_pred = (pred.epsilon * (1.0 - pred.epsilon) / opts.samples as f64).sqrt();
    let tol = 3.0 * (se * se + se_pred * se_pred).sqrt();
    assert!(
        (q.combined - pred.epsilon).abs() < tol,
        "measured {} vs predicted {} (tol {tol})",
        q.combined,
        pred.epsilon
    );

    let (key, _) = sift_key(&batch, &seg);
    let e = key.error_rate().unwrap();
    let se_key = (e.max(1.0 / key.len() as f64) * (1.0 - e) / key.len() as f64).sqrt();
    let tol = 3.0 * (se * se + se_key * se_key).sqrt();
    assert!((e - q.combined).abs() < tol, "sifted {e} vs QDER {} (tol {tol})", q.combined);

    // kept fraction: both photons inside kept regions
    let p = report.p_measured.unwrap();
    let co = coincidences(&batch, &seg).unwrap();
    let used = (batch.frames() - 1) as f64;
    let n_matched = (co.all_events[BasisPair::XX.index()] + co.all_events[BasisPair::PP.index()]) * used;
    let se_p = (p * (1.0 - p) / n_matched).sqrt();
    let se_joint = (pred.joint_kept * (1.0 - pred.joint_kept) / opts.samples as f64).sqrt();
    let tol = 3.0 * (se_p * se_p + se_joint * se_joint).sqrt();
    assert!(
        (p - pred.joint_kept).abs() < tol,
        "measured p {p} vs joint kept {} (tol {tol})",
        pred.joint_kept
    );
}

#[test]
fn sifted_share_of_pair_frames_is_half_the_joint_kept_mass() {
    let seg = segmentation(&[1, 6, 12]);
    let batch = simulate_frames(&config(&seg, 2_000_000, 0.005, 0.0, 6)).unwrap();
    let (_, counts) = sift_key(&batch, &seg);
    let joint = seg
        .predicted_crosstalk(&CrosstalkOptions {
            samples: 1_000_000,
            seed: 7,
        })
        .joint_kept;
    let n = counts.frames_with_pairs as f64;
    let f = counts.sifted as f64 / n;
    let expect = joint / 2.0;
    let tol = 3.0 * (expect * (1.0 - expect) / n).sqrt();
    assert!((f - expect).abs() < tol, "sifted share {f} vs {expect} (tol {tol})");
}

#[test]
fn correction_is_unbiased_over_seeds() {
    let seg = segmentation(&[1, 6, 12]);
    let mu = 1.0;
    let p = seg.total_kept();
    // genuine mismatched coincidences: basis choice 1/4 per block, independent
    // kept marginals, two blocks
    let expected = 2.0 * mu * 0.25 * p * p;
    let vals: Vec<f64> = (0..20)
        .map(|s| {
            let co = coincidences(&simulate_frames(&config(&seg, 20_000, mu, 0.0, 1000 + s)).unwrap(), &seg).unwrap();
            mismatched_mass(&co.corrected) - expected
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "bias {mean} (se {})", sd / n.sqrt());
}

#[test]
fn dark_counts_raise_the_error() {
    let seg = segmentation(&[1, 6, 12]);
    let quiet = report_for_batch(&simulate_frames(&config(&seg, 300_000, 0.1, 0.0, 8)).unwrap(), &seg).unwrap();
    let noisy = report_for_batch(&simulate_frames(&config(&seg, 300_000, 0.1, 1.0, 8)).unwrap(), &seg).unwrap();
    let (uq, un) = (quiet.uncorrected_qder.unwrap(), noisy.uncorrected_qder.unwrap());
    assert!(un.combined > uq.combined, "{} !> {}", un.combined, uq.combined);
    assert!(noisy.sift.error_rate.unwrap() > quiet.sift.error_rate.unwrap());
    assert!(noisy.rate.unwrap().rate_mod < quiet.rate.unwrap().rate_mod);
}
