use std::collections::BTreeSet;

use fryum::fryum::{AngularSpec, CrosstalkOptions};
use fryum::keyrate::modified_rate;
use fryum::optimizer::{
    enumerate, evaluate, is_valid, sweep, EpsilonSource, Evaluation, SweepOptions, ValidityRules,
};
use fryum::{BeamStats, Segmentation};

/// Every tuple with entries in `1..=max` and `n` rings.
fn all_tuples(n: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|t| {
                (1..=max).map(move |a| {
                    let mut t = t.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
    }
    out
}

fn brute_force_best(
    st: &BeamStats,
    r_ap: f64,
    rules: &ValidityRules<f64>,
    n: usize,
    source: EpsilonSource,
) -> (BTreeSet<Vec<usize>>, Option<Evaluation<f64>>) {
    let mut valid = BTreeSet::new();
    let mut best: Option<Evaluation<f64>> = None;
    for t in all_tuples(n, 8) {
        // specs must open with a single central disk
        let Ok(spec) = AngularSpec::new(t.clone()) else {
            continue;
        };
        if !is_valid(&spec, st, r_ap, rules).valid {
            continue;
        }
        valid.insert(t);
        let e = evaluate(&spec, st, r_ap, rules, source).unwrap();
        // same ordering as the sweep: rate within 1e-9, then N, then A
        let better = match &best {
            None => true,
            Some(b) => {
                let (x, y) = (e.report.rate_mod.max(0.0), b.report.rate_mod.max(0.0));
                x > y + 1e-9 || ((x - y).abs() <= 1e-9 && e.spec.counts() < b.spec.counts())
            }
        };
        if better {
            best = Some(e);
        }
    }
    (valid, best)
}

#[test]
fn sweep_matches_brute_force_on_small_instances() {
    let source = EpsilonSource::Crosstalk {
        samples: 20_000,
        seed: 9,
    };
    for (k, r_ap) in [(25.0, 2.5), (16.0, 2.8), (20.0, 2.2)] {
        let st = BeamStats::from_sigma_and_schmidt(1.0, k).unwrap();
        assert!(st.sigma_cond >= 0.2 - 1e-12);
        let rules = ValidityRules::new(3.0, &st);
        let opts = SweepOptions {
            n_min: 2,
            n_max: 4,
            epsilon: source,
            dump_all: false,
        };
        let res = sweep(&st, r_ap, &rules, &opts).unwrap();
        let mut overall: Option<Evaluation<f64>> = None;
        for n in 2..=4 {
            let listed: BTreeSet<Vec<usize>> = enumerate(n, &st, r_ap, &rules)
                .into_iter()
                .filter(|s| is_valid(s, &st, r_ap, &rules).valid)
                .map(|s| s.counts().to_vec())
                .collect();
            assert!(listed.iter().all(|t| t.iter().all(|&a| a <= 8)), "K={k}: entries above 8");
            let (valid, best) = brute_force_best(&st, r_ap, &rules, n, source);
            assert_eq!(listed, valid, "K={k} N={n}");
            let swept = res.best_per_n[&n].clone();
            assert_eq!(swept.as_ref().map(|e| e.spec.clone()), best.as_ref().map(|e| e.spec.clone()), "K={k} N={n}");
            if let (Some(a), Some(b)) = (&swept, &best) {
                assert_eq!(a.report, b.report);
            }
            if let Some(b) = best {
                if overall.as_ref().is_none_or(|o| b.beats(o)) {
                    overall = Some(b);
                }
            }
        }
        assert!(overall.is_some(), "K={k}: no valid spec");
        assert_eq!(res.global_best.map(|e| e.spec), overall.map(|e| e.spec), "K={k}");
    }
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let st = BeamStats::from_sigma_and_schmidt(1.0, 104.6).unwrap();
    let rules = ValidityRules::new(3.0, &st);
    let opts = SweepOptions {
        n_min: 2,
        n_max: 4,
        epsilon: EpsilonSource::Crosstalk {
            samples: 20_000,
            seed: 1,
        },
        dump_all: true,
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sweep(&st, 2.0516, &rules, &opts).unwrap())
    };
    let (a, b) = (run(1), run(8));
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn discarding_dominates_for_top_candidates() {
    let st = BeamStats::from_sigma_and_schmidt(1.0, 104.6).unwrap();
    let r_ap = 2.0516;
    let rules = ValidityRules::new(3.0, &st);
    let samples = 200_000;
    let opts = SweepOptions {
        n_min: 2,
        n_max: 9,
        epsilon: EpsilonSource::Crosstalk { samples, seed: 3 },
        dump_all: true,
    };
    let res = sweep(&st, r_ap, &rules, &opts).unwrap();
    let mut all = res.evaluated.clone();
    all.sort_by(|a, b| b.report.rate_mod.partial_cmp(&a.report.rate_mod).unwrap());
    assert!(all.len() >= 10);
    for e in all.iter().take(10) {
        let plain = Segmentation::build(e.spec.clone(), st, r_ap).unwrap();
        let c = plain.predicted_crosstalk(&CrosstalkOptions { samples, seed: 3 });
        let p = plain.in_aperture_mass();
        let without = modified_rate(e.report.d, c.epsilon, p).unwrap();
        assert!(
            e.report.rate_mod >= without,
            "{}: {} with bands vs {} without (eps {})",
            e.spec,
            e.report.rate_mod,
            without,
            c.epsilon
        );
    }
}
