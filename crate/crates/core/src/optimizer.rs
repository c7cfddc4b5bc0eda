//! Exhaustive search over angular specs for the largest discard-corrected
//! key rate, ring count by ring count.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biphoton::BeamStats;
use crate::error::{Error, Result};
use crate::fryum::{AngularSpec, CrosstalkOptions, Segmentation};
use crate::keyrate::{EpsilonSummary, RateReport};
use crate::scalar::Scalar;

/// Geometric validity rules. Gaps are in detector units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidityRules<T> {
    pub band_multiplier: T,
    pub min_radial_gap: T,
    /// Arc length between spokes, measured at the ring's inner radius.
    pub min_azimuthal_gap: T,
    pub first_ring_single: bool,
    pub last_segment_auxiliary: bool,
}

impl<T: Scalar> ValidityRules<T> {
    /// Both gaps set to `k * sigma_cond`.
    pub fn new(k: T, stats: &BeamStats<T>) -> Self {
        let gap = k * stats.sigma_cond;
        Self {
            band_multiplier: k,
            min_radial_gap: gap,
            min_azimuthal_gap: gap,
            first_ring_single: true,
            last_segment_auxiliary: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub valid: bool,
    pub reasons: Vec<String>,
}

/// Radii `r_0 .. r_N` for cumulative counts `offsets`, with the aperture
/// closing the last ring.
fn radii_for<T: Scalar>(offsets: &[usize], sigma: T, r_ap: T) -> Option<(Vec<T>, T)> {
    let d = *offsets.last()?;
    let a_aux = T::from_usize_(d) / (r_ap * r_ap / (T::c(2.0) * sigma * sigma)).exp_m1();
    if !(a_aux.is_finite() && a_aux >= T::zero()) {
        return None;
    }
    let alpha = (T::from_usize_(d) + a_aux).recip();
    let n = offsets.len() - 1;
    let mut r: Vec<T> = offsets[..n]
        .iter()
        .map(|&c| radius_at(T::from_usize_(c) * alpha, sigma))
        .collect();
    r.push(r_ap);
    Some((r, a_aux))
}

fn radius_at<T: Scalar>(mass: T, sigma: T) -> T {
    (-T::c(2.0) * sigma * sigma * (-mass).ln_1p()).sqrt()
}

/// Checks a spec against the rules; reasons list every failed rule.
pub fn is_valid<T: Scalar>(
    spec: &AngularSpec,
    stats: &BeamStats<T>,
    r_ap: T,
    rules: &ValidityRules<T>,
) -> Validity {
    let mut reasons = Vec::new();
    let counts = spec.counts();
    if rules.first_ring_single && counts[0] != 1 {
        reasons.push("first ring must be a single disk".to_string());
    }
    if !(r_ap > T::zero() && r_ap.is_finite()) {
        reasons.push(format!("aperture radius {r_ap} must be positive and finite"));
        return Validity {
            valid: false,
            reasons,
        };
    }
    let offsets = spec.offsets();
    let Some((r, a_aux)) = radii_for(&offsets, stats.sigma, r_ap) else {
        reasons.push("aperture admits no auxiliary segment".to_string());
        return Validity {
            valid: false,
            reasons,
        };
    };
    if rules.last_segment_auxiliary && !(a_aux > T::zero()) {
        reasons.push("auxiliary segment must be positive".to_string());
    }
    let gap = rules.min_radial_gap;
    let n = counts.len();
    if n == 1 {
        if !(r_ap > gap) {
            reasons.push(format!("aperture {r_ap} not wider than radial gap {gap}"));
        }
    } else {
        if !(r[1] > gap * T::c(0.5)) {
            reasons.push(format!(
                "central disk radius {} leaves nothing inside a half band {}",
                r[1],
                gap * T::c(0.5)
            ));
        }
        for k in 1..n {
            if !(r[k + 1] - r[k] > gap) {
                reasons.push(format!(
                    "ring {k}: radial width {} not above gap {gap}",
                    r[k + 1] - r[k]
                ));
            }
        }
    }
    for k in 1..n {
        let a = counts[k];
        if a >= 2 {
            let arc = T::TAU() * r[k] / T::from_usize_(a);
            if !(arc > rules.min_azimuthal_gap) {
                reasons.push(format!(
                    "ring {k}: sector arc {arc} at inner radius not above gap {}",
                    rules.min_azimuthal_gap
                ));
            }
        }
    }
    Validity {
        valid: reasons.is_empty(),
        reasons,
    }
}

/// How the optimizer estimates the error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EpsilonSource {
    Crosstalk { samples: usize, seed: u64 },
    /// `erfc(k / sqrt 2)` per adjacent macropixel.
    Fast,
}

impl Default for EpsilonSource {
    fn default() -> Self {
        let o = CrosstalkOptions::default();
        EpsilonSource::Crosstalk {
            samples: o.samples,
            seed: o.seed,
        }
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Evaluation<T> {
    #[serde(rename = "A")]
    pub spec: AngularSpec,
    #[serde(rename = "N")]
    pub n: usize,
    pub a_aux: T,
    /// Kept probability after bands, before equalization.
    pub p_banded: T,
    /// Joint Alice-and-Bob kept probability from the crosstalk estimate.
    pub joint_kept: Option<T>,
    pub report: RateReport<T>,
    pub epsilon_source: EpsilonSource,
}

impl<T: Scalar> Evaluation<T> {
    /// Rate used for ranking: negative rates count as zero.
    pub fn rank_rate(&self) -> T {
        self.report.rate_mod.max(T::zero())
    }

    /// Strict preference with the documented tie-break.
    pub fn beats(&self, other: &Self) -> bool {
        let (a, b) = (self.rank_rate(), other.rank_rate());
        let tol = T::c(1e-9);
        if a > b + tol {
            return true;
        }
        if b > a + tol {
            return false;
        }
        (self.n, self.spec.counts()) < (other.n, other.spec.counts())
    }
}

/// Builds, bands and equalizes the segmentation for `spec`.
pub fn equalized_segmentation<T: Scalar>(
    spec: &AngularSpec,
    stats: &BeamStats<T>,
    r_ap: T,
    rules: &ValidityRules<T>,
) -> Result<(Segmentation<T>, T)> {
    let banded =
        Segmentation::build(spec.clone(), *stats, r_ap)?.apply_discard_bands(rules.band_multiplier)?;
    let p_banded = banded.total_kept();
    Ok((banded.equalize()?, p_banded))
}

/// Key rate of one valid spec: bands, equalization, error estimate, `p * R`.
pub fn evaluate<T: Scalar>(
    spec: &AngularSpec,
    stats: &BeamStats<T>,
    r_ap: T,
    rules: &ValidityRules<T>,
    source: EpsilonSource,
) -> Result<Evaluation<T>> {
    let v = is_valid(spec, stats, r_ap, rules);
    if !v.valid {
        return Err(Error::InvalidSegmentation(v.reasons.join("; ")));
    }
    let (seg, p_banded) = equalized_segmentation(spec, stats, r_ap, rules)?;
    let p = seg.total_kept();
    let (eps, joint) = match source {
        EpsilonSource::Crosstalk { samples, seed } => {
            let c = seg.predicted_crosstalk(&CrosstalkOptions { samples, seed });
            (c.epsilon, Some(c.joint_kept))
        }
        EpsilonSource::Fast => (seg.fast_crosstalk(), None),
    };
    let report = RateReport::new(spec.dimension(), EpsilonSummary::uniform(eps), p.min(T::one()))?;
    Ok(Evaluation {
        spec: spec.clone(),
        n: spec.rings(),
        a_aux: seg.a_aux(),
        p_banded,
        joint_kept: joint,
        report,
        epsilon_source: source,
    })
}

/// Every spec with `n` rings that satisfies the radial and azimuthal rules,
/// ordered by dimension then lexicographically.
pub fn enumerate<T: Scalar>(
    n: usize,
    stats: &BeamStats<T>,
    r_ap: T,
    rules: &ValidityRules<T>,
) -> Vec<AngularSpec> {
    let mut out = Vec::new();
    if n == 0 || !(r_ap > T::zero() && r_ap.is_finite()) {
        return out;
    }
    if n == 1 {
        out.push(AngularSpec::new(vec![1]).unwrap());
        return out;
    }
    let gap = rules.min_radial_gap;
    let az = rules.min_azimuthal_gap;
    let sigma = stats.sigma;
    let per_ring = (T::TAU() * r_ap / az).floor().to_usize().unwrap_or(0).max(1);
    let d_max = 1 + (n - 1) * per_ring;
    for d in n..=d_max {
        let a_aux = T::from_usize_(d) / (r_ap * r_ap / (T::c(2.0) * sigma * sigma)).exp_m1();
        let alpha = (T::from_usize_(d) + a_aux).recip();
        let r1 = radius_at(alpha, sigma);
        if !(r1 > gap * T::c(0.5)) {
            // r_1 only shrinks as d grows
            break;
        }
        let ctx = EnumCtx {
            n,
            d,
            alpha,
            sigma,
            r_ap,
            gap,
            az,
        };
        let mut counts = vec![1usize];
        ctx.extend(1, 1, r1, &mut counts, &mut out);
    }
    out
}

struct EnumCtx<T> {
    n: usize,
    d: usize,
    alpha: T,
    sigma: T,
    r_ap: T,
    gap: T,
    az: T,
}

impl<T: Scalar> EnumCtx<T> {
    fn azimuth_ok(&self, r_inner: T, a: usize) -> bool {
        a == 1 || T::TAU() * r_inner / T::from_usize_(a) > self.az
    }

    /// Chooses `a_k` for ring `k` with inner radius `r_k` and `c_k` macropixels
    /// inside it.
    fn extend(&self, k: usize, c_k: usize, r_k: T, counts: &mut Vec<usize>, out: &mut Vec<AngularSpec>) {
        if k == self.n - 1 {
            let a = self.d - c_k;
            if a >= 1 && self.azimuth_ok(r_k, a) && self.r_ap - r_k > self.gap {
                counts.push(a);
                out.push(AngularSpec::new(counts.clone()).unwrap());
                counts.pop();
            }
            return;
        }
        let rings_left = self.n - 1 - k;
        for a in 1.. {
            let c_next = c_k + a;
            if c_next + rings_left > self.d || !self.azimuth_ok(r_k, a) {
                break;
            }
            let r_next = radius_at(T::from_usize_(c_next) * self.alpha, self.sigma);
            if r_next + T::from_usize_(rings_left) * self.gap >= self.r_ap {
                break;
            }
            if !(r_next - r_k > self.gap) {
                continue;
            }
            counts.push(a);
            self.extend(k + 1, c_next, r_next, counts, out);
            counts.pop();
        }
    }
}

/// Candidate counts for one ring count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSize {
    pub examined: usize,
    pub valid: usize,
    pub pruned: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepOptions {
    pub n_min: usize,
    pub n_max: usize,
    pub epsilon: EpsilonSource,
    /// Keep every evaluated candidate in the result.
    pub dump_all: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_min: 2,
            n_max: 9,
            epsilon: EpsilonSource::default(),
            dump_all: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OptimizationResult<T> {
    pub best_per_n: BTreeMap<usize, Option<Evaluation<T>>>,
    pub global_best: Option<Evaluation<T>>,
    pub search_size: BTreeMap<usize, SearchSize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub evaluated: Vec<Evaluation<T>>,
}

const BATCH: usize = 16;

/// Best spec per ring count in `[n_min, n_max]`.
///
/// Candidates are sorted by the upper bound `d * q * log2 d` (with `q` the
/// smallest banded macropixel probability) and evaluated in fixed batches;
/// a batch member is skipped once its bound falls below the best rate found
/// so far. The batch size does not depend on the thread count, so results
/// are identical for any number of workers.
pub fn sweep<T: Scalar>(
    stats: &BeamStats<T>,
    r_ap: T,
    rules: &ValidityRules<T>,
    opts: &SweepOptions,
) -> Result<OptimizationResult<T>> {
    if opts.n_min == 0 || opts.n_min > opts.n_max {
        return Err(crate::error::invalid("Nrange", "need 1 <= N_min <= N_max"));
    }
    let mut best_per_n = BTreeMap::new();
    let mut search_size = BTreeMap::new();
    let mut evaluated = Vec::new();
    let mut global: Option<Evaluation<T>> = None;
    for n in opts.n_min..=opts.n_max {
        let candidates = enumerate(n, stats, r_ap, rules);
        let mut size = SearchSize {
            examined: candidates.len(),
            ..SearchSize::default()
        };
        let mut bounded: Vec<(T, AngularSpec)> = candidates
            .into_par_iter()
            .filter_map(|spec| {
                if !is_valid(&spec, stats, r_ap, rules).valid {
                    return None;
                }
                let seg = Segmentation::build(spec.clone(), *stats, r_ap)
                    .and_then(|s| s.apply_discard_bands(rules.band_multiplier))
                    .ok()?;
                let q = seg
                    .kept_probabilities()
                    .into_iter()
                    .fold(T::infinity(), T::min);
                let d = spec.dimension();
                let bound = T::from_usize_(d) * q * T::from_usize_(d).log2();
                Some((bound, spec))
            })
            .collect();
        size.valid = bounded.len();
        bounded.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        let mut best: Option<Evaluation<T>> = None;
        for (bi, batch) in bounded.chunks(BATCH).enumerate() {
            let floor = best.as_ref().map(|b| b.rank_rate());
            let todo: Vec<&AngularSpec> = batch
                .iter()
                .filter(|(bound, _)| floor.is_none_or(|f| *bound >= f - T::c(1e-9)))
                .map(|(_, s)| s)
                .collect();
            size.pruned += batch.len() - todo.len();
            if todo.is_empty() {
                // bounds are sorted, so every later batch is pruned as well
                size.pruned += bounded.len().saturating_sub((bi + 1) * BATCH);
                break;
            }
            let results: Vec<Result<Evaluation<T>>> = todo
                .par_iter()
                .map(|s| evaluate(s, stats, r_ap, rules, opts.epsilon))
                .collect();
            for r in results {
                let e = r?;
                size.evaluated += 1;
                if best.as_ref().is_none_or(|b| e.beats(b)) {
                    best = Some(e.clone());
                }
                if opts.dump_all {
                    evaluated.push(e);
                }
            }
        }
        if let Some(b) = &best {
            if global.as_ref().is_none_or(|g| b.beats(g)) {
                global = Some(b.clone());
            }
        }
        best_per_n.insert(n, best);
        search_size.insert(n, size);
    }
    Ok(OptimizationResult {
        best_per_n,
        global_best: global,
        search_size,
        evaluated,
    })
}

/// Writes `N,bestA,d,aAux,p,epsilon,R,Rmod`, one row per ring count; ring
/// counts without a valid spec get empty fields.
pub fn write_sweep_csv<T: Scalar, W: Write>(res: &OptimizationResult<T>, mut w: W) -> io::Result<()> {
    writeln!(w, "N,bestA,d,aAux,p,epsilon,R,Rmod")?;
    for (n, best) in &res.best_per_n {
        match best {
            Some(e) => writeln!(
                w,
                "{},\"{}\",{},{},{},{},{},{}",
                n,
                e.spec,
                e.report.d,
                e.a_aux,
                e.report.p,
                e.report.epsilon.combined,
                e.report.rate,
                e.report.rate_mod
            )?,
            None => writeln!(w, "{n},,,,,,,")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(k: f64) -> BeamStats<f64> {
        BeamStats::from_sigma_and_schmidt(1.0, k).unwrap()
    }

    #[test]
    fn single_disk_validity() {
        let st = stats(104.6);
        let rules = ValidityRules::new(3.0, &st);
        let one = AngularSpec::new(vec![1]).unwrap();
        assert!(is_valid(&one, &st, 1.0, &rules).valid);
        assert!(!is_valid(&one, &st, 0.25, &rules).valid);
    }

    #[test]
    fn azimuthal_violation_reported() {
        let st = stats(104.6);
        let rules = ValidityRules::new(3.0, &st);
        let spec = AngularSpec::new(vec![1, 40]).unwrap();
        let v = is_valid(&spec, &st, 2.0516, &rules);
        assert!(!v.valid);
        assert!(v.reasons.iter().any(|r| r.contains("sector arc")), "{:?}", v.reasons);
    }

    #[test]
    fn single_macropixel_carries_no_key() {
        let st = stats(104.6);
        let rules = ValidityRules::new(0.0, &st);
        let e = evaluate(&AngularSpec::new(vec![1]).unwrap(), &st, 2.0, &rules, EpsilonSource::Fast).unwrap();
        assert_eq!(e.report.rate_mod, 0.0);
        assert_eq!(e.report.d, 1);
    }

    #[test]
    fn evaluate_rejects_invalid() {
        let st = stats(104.6);
        let rules = ValidityRules::new(3.0, &st);
        let spec = AngularSpec::new(vec![1, 40]).unwrap();
        assert!(evaluate(&spec, &st, 2.0516, &rules, EpsilonSource::Fast).is_err());
    }

    #[test]
    fn enumeration_matches_filtered_brute_force() {
        let st = stats(12.0);
        let r_ap = 2.2;
        let rules = ValidityRules::new(3.0, &st);
        for n in 2..=4 {
            let fast: Vec<AngularSpec> = enumerate(n, &st, r_ap, &rules);
            let mut brute = Vec::new();
            let mut counts = vec![1usize; n];
            loop {
                let spec = AngularSpec::new(counts.clone()).unwrap();
                if is_valid(&spec, &st, r_ap, &rules).valid {
                    brute.push(spec);
                }
                // odometer over entries 1..=40 of rings 1..n
                let mut i = n - 1;
                loop {
                    if i == 0 {
                        break;
                    }
                    counts[i] += 1;
                    if counts[i] <= 40 {
                        break;
                    }
                    counts[i] = 1;
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
            }
            let mut f = fast.clone();
            f.sort();
            brute.sort();
            assert_eq!(f, brute, "N = {n}");
            assert!(fast.iter().all(|s| is_valid(s, &st, r_ap, &rules).valid));
        }
    }

    #[test]
    fn ties_prefer_fewer_rings_then_lexicographic() {
        let st = stats(20.0);
        let rules = ValidityRules::new(0.0, &st);
        let a = evaluate(&AngularSpec::new(vec![1, 3]).unwrap(), &st, 2.0, &rules, EpsilonSource::Fast).unwrap();
        let mut b = a.clone();
        b.spec = AngularSpec::new(vec![1, 2, 1]).unwrap();
        b.n = 3;
        assert!(a.beats(&b));
        assert!(!b.beats(&a));
        let mut c = a.clone();
        c.spec = AngularSpec::new(vec![1, 4]).unwrap();
        assert!(a.beats(&c));
    }

    #[test]
    fn sweep_restricted_range() {
        let st = stats(12.0);
        let rules = ValidityRules::new(3.0, &st);
        let opts = SweepOptions {
            n_min: 2,
            n_max: 2,
            epsilon: EpsilonSource::Fast,
            dump_all: false,
        };
        let res = sweep(&st, 2.2, &rules, &opts).unwrap();
        assert_eq!(res.best_per_n.keys().copied().collect::<Vec<_>>(), vec![2]);
        let mut csv = Vec::new();
        write_sweep_csv(&res, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
    }
}
