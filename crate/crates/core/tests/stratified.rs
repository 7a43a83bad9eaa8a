//! Stratified proportion estimation: per-sample identities checked against a
//! direct oracle over every stratified SI sample of a small frame, plus
//! replicate determinism across thread counts.

use approx::assert_relative_eq;
use survey_coupling::bootstrap::{resample_strata, resample_wr, BootstrapConfig};
use survey_coupling::designs::SecondStage;
use survey_coupling::estimators::{
    expand_into, linearized_values, ColumnLayout, DrawMatrix, SmoothEstimand, StratumSample,
};
use survey_coupling::frame::{
    generate_stratified_population, Frame, PrimaryUnit, StratifiedConfig, SyntheticConfig,
};
use survey_coupling::montecarlo::{
    approximate_true_variance, run_scenario, BootstrapPlan, FirstStage, Scenario,
};

/// Two strata of four households; y1 is a category in {1, 2}.
fn frame() -> Frame {
    let households: [(&str, &[f64]); 8] = [
        ("a", &[1.0, 2.0]),
        ("a", &[1.0, 1.0, 1.0]),
        ("a", &[2.0]),
        ("a", &[2.0, 2.0, 1.0, 2.0]),
        ("b", &[1.0]),
        ("b", &[2.0, 2.0]),
        ("b", &[1.0, 2.0, 2.0]),
        ("b", &[1.0, 1.0]),
    ];
    let psus = households
        .iter()
        .enumerate()
        .map(|(i, (s, y))| {
            let ids = (1..=y.len() as i64).collect();
            PrimaryUnit::new(i as i64 + 1, Some(s.to_string()), ids, y.to_vec(), 1).unwrap()
        })
        .collect();
    Frame::new(psus, vec!["y1".into()]).unwrap()
}

fn pairs(members: &[usize]) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    for a in 0..members.len() {
        for b in a + 1..members.len() {
            out.push([members[a], members[b]]);
        }
    }
    out
}

#[test]
fn linearization_matches_direct_formulas_on_every_sample() {
    let f = frame();
    let est = SmoothEstimand::Proportion { var: 0, code: 1.0 };
    let cols = est.columns();
    let strata = f.strata().unwrap();
    let count = |i: usize| -> (f64, f64) {
        let p = f.psu(i);
        let yc = (0..p.size()).filter(|&k| p.y(k)[0] == 1.0).count() as f64;
        (yc, p.size() as f64)
    };
    let (sa, sb) = (pairs(&strata[0].members), pairs(&strata[1].members));
    let mut v_wr_fixed_mean = 0.0;
    let mut fixed_e = Vec::new();
    // population linearized variable with the true p and N
    let big_n: f64 = f.psus().iter().map(|p| p.size() as f64).sum();
    let p_true: f64 = (0..8).map(|i| count(i).0).sum::<f64>() / big_n;
    for a in &sa {
        for b in &sb {
            let sample: Vec<StratumSample> = [a, b]
                .iter()
                .map(|s| {
                    let mut rows = DrawMatrix::new(cols.len());
                    for &i in s.iter() {
                        let all: Vec<usize> = (0..f.psu(i).size()).collect();
                        expand_into(f.psu(i), &all, &cols, rows.push_zero_row());
                    }
                    StratumSample { population_size: 4, rows }
                })
                .collect();
            let lin = linearized_values(&sample, &est).unwrap();

            // oracle
            let n_hat: f64 = a.iter().chain(b.iter()).map(|&i| 2.0 * count(i).1).sum();
            let yc_hat: f64 = a.iter().chain(b.iter()).map(|&i| 2.0 * count(i).0).sum();
            let p_hat = yc_hat / n_hat;
            assert_relative_eq!(lin.estimate, p_hat, epsilon = 1e-14);
            let mut v = 0.0;
            for (l, s) in [a, b].iter().enumerate() {
                let e: Vec<f64> = s.iter().map(|&i| (count(i).0 - p_hat * count(i).1) / n_hat).collect();
                for (x, y) in e.iter().zip(&lin.linearized[l]) {
                    assert_relative_eq!(x, y, epsilon = 1e-14);
                }
                let m = (e[0] + e[1]) / 2.0;
                let s2 = (e[0] - m).powi(2) + (e[1] - m).powi(2);
                v += 16.0 / 2.0 * s2;
            }
            assert_relative_eq!(lin.variance, v, max_relative = 1e-12);

            // HT estimate of the fixed linearized total
            let t: f64 = a
                .iter()
                .chain(b.iter())
                .map(|&i| 2.0 * (count(i).0 - p_true * count(i).1) / big_n)
                .sum();
            fixed_e.push(t);
            let mut v_fixed = 0.0;
            for s in [a, b] {
                let e: Vec<f64> = s.iter().map(|&i| (count(i).0 - p_true * count(i).1) / big_n).collect();
                let m = (e[0] + e[1]) / 2.0;
                v_fixed += 16.0 / 2.0 * ((e[0] - m).powi(2) + (e[1] - m).powi(2));
            }
            v_wr_fixed_mean += v_fixed / 36.0;
        }
    }
    // with E fixed at its population version, the stratified HT total has
    // variance sum_l N_l^2 (1 - f_l)/n_l S_El^2; the WR form drops (1 - f_l)
    let ef: Vec<f64> = (0..8).map(|i| (count(i).0 - p_true * count(i).1) / big_n).collect();
    let s2 = |idx: std::ops::Range<usize>| {
        let v = &ef[idx];
        let m = v.iter().sum::<f64>() / 4.0;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0
    };
    let exact = 16.0 / 2.0 * 0.5 * (s2(0..4) + s2(4..8));
    let m = fixed_e.iter().sum::<f64>() / 36.0;
    let enum_var = fixed_e.iter().map(|t| (t - m).powi(2)).sum::<f64>() / 36.0;
    assert_relative_eq!(m, 0.0, epsilon = 1e-14);
    assert_relative_eq!(enum_var, exact, max_relative = 1e-12);
    assert_relative_eq!(v_wr_fixed_mean * 0.5, enum_var, max_relative = 1e-12);
}

#[test]
fn single_stratum_bootstrap_matches_wr_entry_point() {
    let rows = DrawMatrix::from_rows(&[vec![1.0], vec![4.0], vec![2.0], vec![8.0]]).unwrap();
    let est = [SmoothEstimand::Total { var: 0 }];
    let layout = ColumnLayout::new(&est);
    let cfg = BootstrapConfig {
        replicates: 200,
        ..BootstrapConfig::new(5)
    };
    let a = resample_wr(&rows, 40, &layout, &est, &cfg).unwrap();
    let b = resample_strata(
        &[StratumSample {
            population_size: 40,
            rows,
        }],
        &layout,
        &est,
        &cfg,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].base, 150.0);
}

fn pipeline_frame() -> Frame {
    generate_stratified_population(&StratifiedConfig {
        model: SyntheticConfig {
            mean_size: 3.0,
            size_cv: 0.3,
            ..SyntheticConfig::population3(8)
        },
        stratum_sizes: vec![60, 80, 100],
        cuts: vec![19.0, 21.0],
    })
    .unwrap()
}

fn pipeline_scenario() -> Scenario {
    Scenario {
        label: "strat".into(),
        first_stage: FirstStage::StratifiedSi { allocation: vec![12, 15, 18] },
        second_stage: SecondStage::Census,
        estimands: vec![
            SmoothEstimand::Proportion { var: 0, code: 1.0 },
            SmoothEstimand::Proportion { var: 0, code: 2.0 },
        ],
        variance_methods: vec![survey_coupling::estimators::VarianceMethod::StratWr],
        bootstrap: Some(BootstrapPlan {
            m: None,
            replicates: 100,
            studentized: true,
        }),
        replicates: 100,
        true_variance_runs: 1000,
        alpha: 0.025,
        seed: 99,
    }
}

#[test]
fn stratified_scenario_is_thread_count_invariant() {
    let frame = pipeline_frame();
    let s = pipeline_scenario();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let truth = approximate_true_variance(&frame, &s).unwrap();
                run_scenario(&frame, &s, &truth).unwrap()
            })
    };
    let one = run(1);
    assert_eq!(one, run(3));
    let r = one.find("prop_y1_eq_1", "bootstrap", "studentized").unwrap();
    assert!(r.lower_pct.unwrap() + r.upper_pct.unwrap() < 50.0);
    let p = one.find("prop_y1_eq_2", "point", "").unwrap();
    assert!(p.rs_percent >= p.rb_percent.abs());
}

#[test]
fn stratified_scenario_rejects_bad_allocation() {
    let frame = pipeline_frame();
    let mut s = pipeline_scenario();
    s.first_stage = FirstStage::StratifiedSi { allocation: vec![4, 5] };
    assert!(approximate_true_variance(&frame, &s).is_err());
    s.first_stage = FirstStage::StratifiedSi { allocation: vec![1, 5, 6] };
    assert!(approximate_true_variance(&frame, &s).is_err());
    s.first_stage = FirstStage::Si { n: 10 };
    s.variance_methods = vec![survey_coupling::estimators::VarianceMethod::Simplified];
    assert!(approximate_true_variance(&frame, &s).is_ok());
}
