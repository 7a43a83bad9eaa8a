//! Exact moments by enumerating every first- and second-stage sample of a
//! tiny frame. The oracle computes Y_hat_i and V_hat_i straight from the
//! SSU values; the library is exercised through its public estimator path.

use approx::assert_relative_eq;
use survey_coupling::designs::{DesignSpec, FirstStageDraw, SecondStage, SecondStageDraw};
use survey_coupling::estimators::{
    approximate_variance, estimate_psu, hh_total_sir, ht_total_be, ht_total_si,
    theoretical_variance, variance_components, variance_estimate, VarianceMethod,
};
use survey_coupling::frame::{Column, Frame, PrimaryUnit};

const N0: usize = 2;

fn frame() -> Frame {
    let values: [&[f64]; 4] = [&[3.0, 7.0, 2.0], &[10.0, 4.0], &[1.0, 1.0, 6.0, 9.0], &[5.0, 0.0, 8.0]];
    let psus = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ids = (1..=v.len() as i64).collect();
            PrimaryUnit::new(i as i64 + 1, None, ids, v.to_vec(), 1).unwrap()
        })
        .collect();
    Frame::new(psus, vec!["y1".into()]).unwrap()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

/// Every joint second-stage outcome for the listed draws, with probabilities.
fn second_stage_outcomes(frame: &Frame, draws: &[usize]) -> Vec<(f64, Vec<SecondStageDraw>)> {
    let mut out = vec![(1.0, Vec::new())];
    for &i in draws {
        let size = frame.psu(i).size();
        let subsets = combinations(size, N0);
        let p = 1.0 / subsets.len() as f64;
        let mut next = Vec::new();
        for (q, prefix) in &out {
            for s in &subsets {
                let mut d = prefix.clone();
                d.push(SecondStageDraw {
                    psu_index: i,
                    ssu_indices: s.clone(),
                    inclusion_prob: N0 as f64 / size as f64,
                    design: SecondStage::Si { n0: N0 },
                });
                next.push((q * p, d));
            }
        }
        out = next;
    }
    out
}

/// Direct oracle for one PSU: (Y_hat_i, V_hat_i).
fn oracle_psu(frame: &Frame, d: &SecondStageDraw) -> (f64, f64) {
    let psu = frame.psu(d.psu_index);
    let y: Vec<f64> = (0..psu.size()).map(|k| psu.y(k)[0]).collect();
    let big = y.len() as f64;
    let n0 = d.ssu_indices.len() as f64;
    let ys: Vec<f64> = d.ssu_indices.iter().map(|&k| y[k]).collect();
    let mean = ys.iter().sum::<f64>() / n0;
    let s2 = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n0 - 1.0);
    (big * mean, big * big * (1.0 - n0 / big) / n0 * s2)
}

/// Exact Y_i and V_i from the oracle's own enumeration of each PSU.
fn oracle_components(frame: &Frame) -> (Vec<f64>, Vec<f64>) {
    (0..frame.n_psu())
        .map(|i| {
            let outs = second_stage_outcomes(frame, &[i]);
            let m: f64 = outs.iter().map(|(p, d)| p * oracle_psu(frame, &d[0]).0).sum();
            let v: f64 = outs.iter().map(|(p, d)| p * (oracle_psu(frame, &d[0]).0 - m).powi(2)).sum();
            (m, v)
        })
        .unzip()
}

struct Moments {
    mean: f64,
    var: f64,
    expected: Vec<f64>,
}

fn moments(outcomes: &[(f64, f64, Vec<f64>)]) -> Moments {
    let total_p: f64 = outcomes.iter().map(|o| o.0).sum();
    assert_relative_eq!(total_p, 1.0, epsilon = 1e-12);
    let mean: f64 = outcomes.iter().map(|(p, y, _)| p * y).sum();
    let var: f64 = outcomes.iter().map(|(p, y, _)| p * (y - mean).powi(2)).sum();
    let k = outcomes[0].2.len();
    let expected = (0..k).map(|j| outcomes.iter().map(|(p, _, v)| p * v[j]).sum()).collect();
    Moments { mean, var, expected }
}

fn draw(design: DesignSpec, order: Vec<usize>) -> FirstStageDraw {
    FirstStageDraw {
        design,
        population_size: 4,
        order,
        multiplicity: None,
        stream_tag: None,
    }
}

#[test]
fn oracle_components_match_library() {
    let f = frame();
    let (y, v) = oracle_components(&f);
    let (ly, lv) = variance_components(&f, &Column::Var { var: 0 }, SecondStage::Si { n0: N0 });
    for i in 0..4 {
        assert_relative_eq!(y[i], ly[i], epsilon = 1e-12);
        assert_relative_eq!(v[i], lv[i], epsilon = 1e-9);
    }
}

#[test]
fn si_first_stage_exact_moments() {
    let f = frame();
    let cols = [Column::Var { var: 0 }];
    let (y, v) = oracle_components(&f);
    let big_y: f64 = y.iter().sum();
    let n = 2;
    let methods = [
        VarianceMethod::Unbiased,
        VarianceMethod::Simplified,
        VarianceMethod::WithReplacement,
    ];
    let first = combinations(4, n);
    let mut outcomes = Vec::new();
    for s in &first {
        for (p, dr) in second_stage_outcomes(&f, s) {
            let est: Vec<_> = dr.iter().map(|d| estimate_psu(f.psu(d.psu_index), d, &cols)).collect();
            for (e, d) in est.iter().zip(&dr) {
                let (yh, vh) = oracle_psu(&f, d);
                assert_relative_eq!(e.y_hat[0], yh, epsilon = 1e-12);
                assert_relative_eq!(e.v_hat.as_ref().unwrap()[0], vh, epsilon = 1e-9);
            }
            let t = ht_total_si(&draw(DesignSpec::Si { n }, s.clone()), &est, 0).unwrap();
            let vs = methods.iter().map(|&m| variance_estimate(&t, &est, 0, m).unwrap()).collect();
            outcomes.push((p / first.len() as f64, t.y_hat, vs));
        }
    }
    let m = moments(&outcomes);
    let v_theory = theoretical_variance(&y, &v, &DesignSpec::Si { n }).unwrap();
    let sum_v: f64 = v.iter().sum();
    let mu = big_y / 4.0;
    let s2 = y.iter().map(|yi| (yi - mu).powi(2)).sum::<f64>() / 3.0;

    assert_relative_eq!(m.mean, big_y, epsilon = 1e-9);
    assert_relative_eq!(m.var, v_theory, max_relative = 1e-10);
    // v is unbiased; v_simp misses sum V_i; v_wr overshoots by N S^2
    assert_relative_eq!(m.expected[0], m.var, max_relative = 1e-10);
    assert_relative_eq!(m.expected[1] - m.var, -sum_v, max_relative = 1e-9);
    assert_relative_eq!(m.expected[2] - m.var, 4.0 * s2, max_relative = 1e-9);
    // V_app replaces V_bar by (1 - f) V_bar: a gap of (N^2/n) f V_bar = sum V_i
    let v_app = approximate_variance(&y, &v, n).unwrap();
    assert_relative_eq!(v_app - m.var, -sum_v, max_relative = 1e-9);
}

#[test]
fn sir_first_stage_exact_moments() {
    let f = frame();
    let cols = [Column::Var { var: 0 }];
    let (y, v) = oracle_components(&f);
    let n = 2;
    let mut outcomes = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            let order = vec![a, b];
            for (p, dr) in second_stage_outcomes(&f, &order) {
                let est: Vec<_> = dr.iter().map(|d| estimate_psu(f.psu(d.psu_index), d, &cols)).collect();
                let t = hh_total_sir(&draw(DesignSpec::Sir { n }, order.clone()), &est, 0).unwrap();
                let vwr = variance_estimate(&t, &est, 0, VarianceMethod::WithReplacement).unwrap();
                outcomes.push((p / 16.0, t.y_hat, vec![vwr]));
            }
        }
    }
    let m = moments(&outcomes);
    assert_relative_eq!(m.mean, y.iter().sum::<f64>(), epsilon = 1e-9);
    let v_theory = theoretical_variance(&y, &v, &DesignSpec::Sir { n }).unwrap();
    assert_relative_eq!(m.var, v_theory, max_relative = 1e-10);
    assert_relative_eq!(m.expected[0], m.var, max_relative = 1e-10);
}

#[test]
fn be_first_stage_exact_moments() {
    let f = frame();
    let cols = [Column::Var { var: 0 }];
    let (y, v) = oracle_components(&f);
    let n = 2;
    let fi: f64 = 0.5;
    let v_theory = theoretical_variance(&y, &v, &DesignSpec::Be { expected_n: n }).unwrap();
    let mut all = Vec::new();
    let mut by_size: Vec<Vec<(f64, f64, Vec<f64>)>> = vec![Vec::new(); 5];
    for k in 0..=4 {
        let pk = fi.powi(k as i32) * (1.0f64 - fi).powi(4 - k as i32);
        for s in combinations(4, k) {
            for (p, dr) in second_stage_outcomes(&f, &s) {
                let est: Vec<_> = dr.iter().map(|d| estimate_psu(f.psu(d.psu_index), d, &cols)).collect();
                let t = ht_total_be(&draw(DesignSpec::Be { expected_n: n }, s.clone()), &est, 0).unwrap();
                let vb = variance_estimate(&t, &est, 0, VarianceMethod::Bernoulli).unwrap();
                all.push((pk * p, t.y_hat, vec![vb]));
                by_size[k].push((p / combinations(4, k).len() as f64, t.y_hat, vec![vb]));
            }
        }
    }
    let m = moments(&all);
    assert_relative_eq!(m.mean, y.iter().sum::<f64>(), epsilon = 1e-9);
    assert_relative_eq!(m.var, v_theory, max_relative = 1e-10);
    // v_B is zero on the empty sample, so it is unbiased only given n_B >= 1
    let p_empty = (1.0f64 - fi).powi(4);
    assert_relative_eq!(m.expected[0], v_theory * (1.0 - p_empty), max_relative = 1e-10);
    for (k, outs) in by_size.iter().enumerate().skip(1) {
        let ev: f64 = outs.iter().map(|(p, _, v)| p * v[0]).sum();
        assert!((ev / v_theory - 1.0).abs() < 1e-10, "n_B = {k}: {ev} vs {v_theory}");
    }
}
