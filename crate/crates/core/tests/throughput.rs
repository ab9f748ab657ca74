use std::path::PathBuf;

use approx::assert_relative_eq;
use inflight_core::throughput::*;
use proptest::prelude::*;

fn bundled_curve() -> UtilizationCurve {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/utilization_curve.csv");
    UtilizationCurve::load(&path).unwrap()
}

fn case_spec() -> ClusterSpec {
    ClusterSpec {
        n_accelerators: 128,
        train_batch: 128,
        steps_per_rl_step: 1,
        gen_batch: 192,
        inference_count: 44,
        tau: DEFAULT_TAU,
        curve: bundled_curve(),
        lengths: LengthDistribution::Uniform { max_len: 2048 },
        use_padding: false,
    }
}

#[test]
fn bundled_curve_calibration() {
    let c = bundled_curve();
    assert_relative_eq!(c.utilization(192.0, false).unwrap() * 44.0, 16.896, epsilon = 1e-9);
    assert_relative_eq!(c.utilization(50.0, false).unwrap(), 0.1, epsilon = 1e-12);
    assert_eq!(c.utilization(300.0, false).unwrap(), 0.4);
}

#[test]
fn case_study_numbers() {
    let cs = case_study(&case_spec(), 133).unwrap();
    println!("{cs:#?}");
    let p = &cs.pipeline;
    assert!((p.r_total - 16.9).abs() <= 1.69);
    assert!((cs.conventional.r_total - 10.7).abs() <= 1.605);
    assert!((1.4..=1.7).contains(&cs.speedup));
    assert!((42..=46).contains(&p.inference_count.unwrap()));
    assert!((131..=135).contains(&p.g_max));
    assert!(p.gen_batch.unwrap().abs_diff(192) <= 64);
}

/// Brute force written independently of the library search: enumerate
/// the full grid with floating `g_max`, then sort by the tie-break key.
fn brute_force(spec: &ClusterSpec, cap: u64) -> Option<(u64, u64, f64, u64)> {
    let l = spec.lengths.max_len() as f64;
    let mean = spec.lengths.mean();
    let mut all = Vec::new();
    for i in 1..spec.n_accelerators {
        for h in 1..=spec.curve.last_batch_size() as u64 {
            let raw = h as f64 * i as f64 * l / (mean * spec.train_batch as f64);
            // Guard the float ceiling against representation error.
            let mut g = raw.ceil() as u64;
            if (g as f64 - 1.0 - raw).abs() < 1e-9 {
                g -= 1;
            }
            if g > cap {
                continue;
            }
            let u = spec.curve.utilization(h as f64, spec.use_padding).unwrap();
            let r = (u * i as f64).min((spec.n_accelerators - i) as f64 / spec.tau);
            all.push((h, i, r, g));
        }
    }
    all.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.3.cmp(&b.3))
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    all.into_iter().next()
}

fn arb_spec() -> impl Strategy<Value = ClusterSpec> {
    (
        2u64..=16,
        1u64..=64,
        0.5f64..8.0,
        prop::collection::btree_map(1u32..=64, 0.01f64..=1.0, 1..6),
        prop_oneof![
            (1u32..200).prop_map(|max_len| LengthDistribution::Uniform { max_len }),
            (1u32..200).prop_map(|len| LengthDistribution::Constant { len }),
            prop::collection::vec(1u32..200, 1..8).prop_map(|values| LengthDistribution::Empirical { values }),
        ],
        any::<bool>(),
    )
        .prop_map(|(n, b, tau, samples, lengths, use_padding)| ClusterSpec {
            n_accelerators: n,
            train_batch: b,
            steps_per_rl_step: 1,
            gen_batch: 1,
            inference_count: 1,
            tau,
            curve: UtilizationCurve::new(samples.into_iter().collect())
                .unwrap()
                .with_padding_window(8),
            lengths,
            use_padding,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_matches_brute_force(spec in arb_spec(), cap in 1u64..40) {
        let got = search_configs(&spec, cap);
        match brute_force(&spec, cap) {
            None => {
                let infeasible = matches!(got, Err(inflight_core::Error::Infeasible { .. }));
                prop_assert!(infeasible);
            }
            Some((h, i, r, g)) => {
                let got = got.unwrap();
                prop_assert_eq!(got.gen_batch, Some(h));
                prop_assert_eq!(got.inference_count, Some(i));
                prop_assert_eq!(got.r_total, r);
                prop_assert_eq!(got.g_max, g);
            }
        }
    }

    #[test]
    fn profile_nonincreasing(spec in arb_spec(), s in 1u64..100) {
        let h = inflight_profile(&spec.lengths, s);
        prop_assert_eq!(h[0], s as f64);
        prop_assert!(h.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn conv_harmonic_identity(spec in arb_spec(), g in 1u64..6) {
        let mut spec = spec;
        spec.steps_per_rl_step = g;
        let r = conv_throughput(&spec).unwrap();
        let k = spec.samples_per_rl_step() as f64 * spec.lengths.mean();
        prop_assert_eq!(r.r_total, k / (r.t_gen.unwrap() + r.t_train.unwrap()));
        prop_assert_eq!(r.g_max, spec.samples_per_rl_step() - 1);
    }

    #[test]
    fn pipeline_min_identity(spec in arb_spec(), h in 1u64..100, i in 1u64..16) {
        let mut spec = spec;
        prop_assume!(i < spec.n_accelerators);
        spec.gen_batch = h;
        spec.inference_count = i;
        let r = pipeline_throughput(&spec).unwrap();
        prop_assert_eq!(r.r_total, r.r_gen.min(r.r_train));
    }

    #[test]
    fn max_lag_monotone(h in 1u64..500, i in 1u64..200, b in 1u64..256, len in 1u32..4000, extra in 1u32..100) {
        let u = LengthDistribution::Uniform { max_len: len };
        let g = pipeline_max_lag(h, i, &u, b);
        prop_assert!(pipeline_max_lag(h + 1, i, &u, b) >= g);
        prop_assert!(pipeline_max_lag(h, i + 1, &u, b) >= g);
        prop_assert!(pipeline_max_lag(h, i, &u, b + 1) <= g);
        // Spreading lengths around a fixed mean raises L and the lag.
        let narrow = LengthDistribution::Empirical { values: vec![len + extra, len + extra] };
        let wide = LengthDistribution::Empirical { values: vec![len, len + 2 * extra] };
        prop_assert!(pipeline_max_lag(h, i, &wide, b) >= pipeline_max_lag(h, i, &narrow, b));
        // A larger mean at fixed L lowers it.
        let heavier = LengthDistribution::Empirical { values: vec![len, len + extra, len + extra] };
        let lighter = LengthDistribution::Empirical { values: vec![1, len, len + extra] };
        prop_assert!(pipeline_max_lag(h, i, &heavier, b) <= pipeline_max_lag(h, i, &lighter, b));
    }

    #[test]
    fn padding_never_hurts(spec in arb_spec(), h in 0.01f64..200.0) {
        let a = spec.curve.utilization(h, false).unwrap();
        let b = spec.curve.utilization(h, true).unwrap();
        prop_assert!(b >= a);
        prop_assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn utilization_continuous(spec in arb_spec(), h in 0.5f64..100.0) {
        let eps = 1e-7;
        let a = spec.curve.utilization(h, false).unwrap();
        let b = spec.curve.utilization(h + eps, false).unwrap();
        prop_assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn flash_units_cancel(f in 1e6f64..1e12, m in 1e12f64..1e16, k in 0.1f64..10.0, spec in arb_spec()) {
        let r = conv_throughput(&spec).unwrap();
        let a = r.tokens_per_second(&FlashScale::new(f, m).unwrap());
        let b = r.tokens_per_second(&FlashScale::new(f * k, m * k).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn conv_increases_with_samples_on_rising_curve(n in 1u64..16, len in 1u32..40, tau in 0.5f64..5.0, s in 1u64..64) {
        let spec = ClusterSpec {
            n_accelerators: n,
            train_batch: 1,
            steps_per_rl_step: 1,
            gen_batch: 1,
            inference_count: 1,
            tau,
            curve: UtilizationCurve::new(vec![(8, 0.05), (64, 0.6), (128, 0.9)]).unwrap(),
            lengths: LengthDistribution::Uniform { max_len: len },
            use_padding: false,
        };
        let a = conv_throughput_for_samples(&spec, s).unwrap().r_total;
        let b = conv_throughput_for_samples(&spec, s + 1).unwrap().r_total;
        prop_assert!(b >= a * (1.0 - 1e-12));
    }
}

#[test]
fn bundled_speedup_region() {
    let rows = speedup_vs_lag(&case_spec(), &[8, 32, 64, 133, 256]).unwrap();
    assert!(rows.iter().any(|r| r.speedup >= 1.4));
    for w in rows.windows(2) {
        assert!(w[1].r_pipeline >= w[0].r_pipeline);
    }
}

#[test]
fn pipeline_dominates_conventional_at_equal_lag() {
    let spec = case_spec();
    let proxy: EffectivenessProxy = (0..=400).map(|g| (g, 1.0 / (1.0 + g as f64 / 64.0))).collect();
    for cap in [16u64, 64, 133] {
        let best = search_configs(&spec, cap).unwrap();
        let pts = [
            ConfigPoint::Pipeline {
                gen_batch: best.gen_batch.unwrap(),
                inference_count: best.inference_count.unwrap(),
            },
            ConfigPoint::Conventional {
                samples: best.g_max * spec.train_batch + 1,
            },
        ];
        let rows = pareto_points(&spec, &pts, &proxy).unwrap();
        assert_eq!(rows[0].lag_steps, rows[1].lag_steps);
        assert!(rows[0].throughput > rows[1].throughput);
        assert!(rows[0].frontier && !rows[1].frontier);
    }
}
