//! Joint draws of Bernoulli/SI and SIR/SI first-stage samples, and Monte
//! Carlo checks of how close the coupled estimators stay.
//!
//! Second-stage draws come from streams keyed by a per-call key, a branch
//! tag and the PSU (and occurrence) index, so PSUs shared by both samples
//! reuse one draw and all other draws are independent.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{
    draw_be, draw_si_excluding, draw_si_from, draw_sir, draw_second_stage, DesignSpec,
    FirstStageDraw, SecondStage,
};
use crate::estimators::{expand_into, theoretical_variance, variance_components};
use crate::frame::{Column, Frame};
use crate::rng::Stream;
use crate::stats::MeanSe;
use crate::{Error, Result};

fn psu_estimate(
    frame: &Frame,
    psu: usize,
    column: &Column,
    stage: SecondStage,
    rng: &mut Stream,
) -> Result<f64> {
    let p = frame.psu(psu);
    let draw = draw_second_stage(psu, p.size(), stage, rng)?;
    let mut out = [0.0];
    expand_into(p, &draw.ssu_indices, std::slice::from_ref(column), &mut out);
    Ok(out[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledBeSiDraw {
    /// `S_I^B`, frame order.
    pub be: FirstStageDraw,
    /// `S_I`, in a uniformly random draw order.
    pub si: FirstStageDraw,
    pub be_estimates: Vec<f64>,
    pub si_estimates: Vec<f64>,
    /// `S_I^B ∩ S_I`, whose PSUs share one second-stage sample.
    pub shared: Vec<usize>,
}

impl CoupledBeSiDraw {
    /// `Delta_2 = sum_{S_I}(Y_hat_i - mu) - sum_{S_I^B}(Y_hat_i - mu)`.
    pub fn delta2(&self, mu: f64) -> f64 {
        let si: f64 = self.si_estimates.iter().map(|y| y - mu).sum();
        let be: f64 = self.be_estimates.iter().map(|y| y - mu).sum();
        si - be
    }
}

/// Bernoulli sample with `f_I = n/N_I` and an SI sample of size `n`, drawn
/// jointly: the SI sample is the Bernoulli sample topped up from, or thinned
/// to, size `n` by SI draws.
pub fn coupled_be_si(
    frame: &Frame,
    column: &Column,
    n: usize,
    stage: SecondStage,
    rng: &mut Stream,
) -> Result<CoupledBeSiDraw> {
    let big_n = frame.n_psu();
    if n == 0 || n >= big_n {
        return Err(Error::InvalidConfig(format!(
            "coupled BE/SI needs 1 <= n < N_I, got n = {n}, N_I = {big_n}"
        )));
    }
    let be = draw_be(big_n, n, rng)?;
    let nb = be.len();
    let mut members: Vec<usize> = if nb == n {
        be.order.clone()
    } else if nb < n {
        let plus = draw_si_excluding(big_n, &be.order, n - nb, rng)?;
        be.order.iter().copied().chain(plus).collect()
    } else {
        let mut minus = draw_si_from(&be.order, nb - n, rng)?;
        minus.sort_unstable();
        be.order
            .iter()
            .copied()
            .filter(|i| minus.binary_search(i).is_err())
            .collect()
    };
    members.shuffle(rng);

    let ss = Stream::new(rng.next_u64());
    // be.order is sorted, so membership is a binary search
    let in_be = |i: usize| be.order.binary_search(&i).is_ok();
    let mut shared = Vec::new();
    let mut si_estimates = Vec::with_capacity(n);
    for &i in &members {
        if in_be(i) {
            shared.push(i);
            si_estimates.push(psu_estimate(frame, i, column, stage, &mut ss.derive("ss-shared", i as u64))?);
        } else {
            si_estimates.push(psu_estimate(frame, i, column, stage, &mut ss.derive("ss-si", i as u64))?);
        }
    }
    shared.sort_unstable();
    let be_estimates = be
        .order
        .iter()
        .map(|&i| {
            let tag = if shared.binary_search(&i).is_ok() { "ss-shared" } else { "ss-be" };
            psu_estimate(frame, i, column, stage, &mut ss.derive(tag, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoupledBeSiDraw {
        si: FirstStageDraw {
            design: DesignSpec::Si { n },
            population_size: big_n,
            order: members,
            multiplicity: None,
            stream_tag: None,
        },
        be,
        be_estimates,
        si_estimates,
        shared,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledSirSiDraw {
    pub wr: FirstStageDraw,
    /// `X_j`, one per draw of `wr`.
    pub wr_estimates: Vec<f64>,
    /// `S_I = S_I^d ∪ S_I^c`, paired position by position with `wr`: a first
    /// selection keeps its PSU, a repeat takes the next complement PSU.
    pub si: FirstStageDraw,
    /// `Z_j`, aligned with `si.order`.
    pub si_estimates: Vec<f64>,
    /// `S_I^c` in draw order.
    pub complement: Vec<usize>,
}

impl CoupledSirSiDraw {
    pub fn x(&self) -> &[f64] {
        &self.wr_estimates
    }

    pub fn z(&self) -> &[f64] {
        &self.si_estimates
    }
}

/// SIR sample of size `n` and an SI sample made of its distinct PSUs plus an
/// SI top-up from the rest. A distinct PSU's SI estimate reuses the
/// second-stage sample of its first selection.
pub fn coupled_sir_si(
    frame: &Frame,
    column: &Column,
    n: usize,
    stage: SecondStage,
    rng: &mut Stream,
) -> Result<CoupledSirSiDraw> {
    let big_n = frame.n_psu();
    if n == 0 || n > big_n {
        return Err(Error::InvalidConfig(format!(
            "coupled SIR/SI needs 1 <= n <= N_I, got n = {n}, N_I = {big_n}"
        )));
    }
    let wr = draw_sir(big_n, n, rng)?;
    let distinct = wr.distinct();
    let complement = draw_si_excluding(big_n, &distinct, n - distinct.len(), rng)?;

    let ss = Stream::new(rng.next_u64());
    let mut seen: Vec<(usize, usize)> = Vec::with_capacity(n); // (psu, occurrences so far)
    let mut next_c = complement.iter();
    let mut wr_estimates = Vec::with_capacity(n);
    let mut si_order = Vec::with_capacity(n);
    let mut si_estimates = Vec::with_capacity(n);
    for &i in &wr.order {
        let occ = match seen.iter_mut().find(|(p, _)| *p == i) {
            Some(entry) => {
                entry.1 += 1;
                entry.1 - 1
            }
            None => {
                seen.push((i, 1));
                0
            }
        };
        let key = ((occ as u64) << 32) | i as u64;
        let x = psu_estimate(frame, i, column, stage, &mut ss.derive("ss-wr", key))?;
        wr_estimates.push(x);
        if occ == 0 {
            si_order.push(i);
            si_estimates.push(x);
        } else {
            let c = *next_c.next().expect("complement covers every repeat");
            si_order.push(c);
            si_estimates.push(psu_estimate(frame, c, column, stage, &mut ss.derive("ss-si", c as u64))?);
        }
    }
    Ok(CoupledSirSiDraw {
        wr,
        wr_estimates,
        si: FirstStageDraw {
            design: DesignSpec::Si { n },
            population_size: big_n,
            order: si_order,
            multiplicity: None,
            stream_tag: None,
        },
        si_estimates,
        complement,
    })
}

/// Multinomial counts `D ~ M(m; 1/n, ..., 1/n)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedMultinomial {
    pub counts: Vec<u32>,
    pub m: usize,
}

impl SharedMultinomial {
    /// `m^{-1} sum_j D_j v_j`.
    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(values)
            .map(|(&d, v)| f64::from(d) * v)
            .sum::<f64>()
            / self.m as f64
    }
}

pub fn shared_multinomial<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<SharedMultinomial> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig("multinomial needs n >= 1 and m >= 1".into()));
    }
    let mut counts = vec![0u32; n];
    for _ in 0..m {
        counts[rng.random_range(0..n)] += 1;
    }
    Ok(SharedMultinomial { counts, m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub check: String,
    pub population_size: usize,
    pub sample_size: usize,
    pub replicates: usize,
    /// Monte Carlo estimate of the left-hand ratio.
    pub lhs: f64,
    pub se: f64,
    pub rhs: f64,
    /// `lhs <= rhs + 3 se`.
    pub pass: bool,
}

fn min_replicates(replicates: usize) -> Result<()> {
    if replicates < 1000 {
        return Err(Error::InsufficientReplicates {
            need: 1000,
            have: replicates,
        });
    }
    Ok(())
}

fn replicate_values<F>(seed: u64, tag: &str, replicates: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Stream) -> Result<f64> + Sync,
{
    (0..replicates)
        .into_par_iter()
        .map(|r| f(&mut Stream::substream(seed, tag, r as u64)))
        .collect()
}

fn report(check: &str, frame: &Frame, n: usize, squares: &[f64], denom: f64, rhs: f64) -> BoundReport {
    let ms = MeanSe::of(squares);
    let lhs = ms.mean / denom;
    let se = ms.se / denom;
    BoundReport {
        check: check.into(),
        population_size: frame.n_psu(),
        sample_size: n,
        replicates: squares.len(),
        lhs,
        se,
        rhs,
        pass: lhs <= rhs + 3.0 * se,
    }
}

/// `E(Delta_2^2) / V(sum_{S_I^B}(Y_hat_i - mu_Y))` against
/// `sqrt(1/n + 1/(N_I - n))`. The denominator is exact:
/// `sum_i f(1-f)(Y_i - mu)^2 + f V_i`.
pub fn verify_hajek_bound(
    frame: &Frame,
    column: &Column,
    n: usize,
    stage: SecondStage,
    replicates: usize,
    seed: u64,
) -> Result<BoundReport> {
    min_replicates(replicates)?;
    let big_n = frame.n_psu();
    if n == 0 || n >= big_n {
        return Err(Error::InvalidConfig(format!("need 1 <= n < N_I, got {n} and {big_n}")));
    }
    let (y, v) = variance_components(frame, column, stage);
    let mu = y.iter().sum::<f64>() / big_n as f64;
    let f = n as f64 / big_n as f64;
    let denom: f64 = y
        .iter()
        .zip(&v)
        .map(|(yi, vi)| f * (1.0 - f) * (yi - mu) * (yi - mu) + f * vi)
        .sum();
    if !(denom > 0.0) {
        return Err(Error::Degenerate(
            "all subtotals equal with no second-stage variance".into(),
        ));
    }
    let squares = replicate_values(seed, "hajek-bound", replicates, |rng| {
        let d = coupled_be_si(frame, column, n, stage, rng)?.delta2(mu);
        Ok(d * d)
    })?;
    let rhs = (1.0 / n as f64 + 1.0 / (big_n - n) as f64).sqrt();
    Ok(report("be_si_hajek", frame, n, &squares, denom, rhs))
}

/// `E(Y_hat_WR - Y_hat)^2 / V(Y_hat_WR)` against `(n - 1)/(N_I - 1)`.
pub fn verify_sir_si_bound(
    frame: &Frame,
    column: &Column,
    n: usize,
    stage: SecondStage,
    replicates: usize,
    seed: u64,
) -> Result<BoundReport> {
    min_replicates(replicates)?;
    let big_n = frame.n_psu();
    let (y, v) = variance_components(frame, column, stage);
    let denom = theoretical_variance(&y, &v, &DesignSpec::Sir { n })?;
    if !(denom > 0.0) {
        return Err(Error::Degenerate(
            "all subtotals equal with no second-stage variance".into(),
        ));
    }
    let scale = big_n as f64 / n as f64;
    let squares = replicate_values(seed, "sir-si-bound", replicates, |rng| {
        let c = coupled_sir_si(frame, column, n, stage, rng)?;
        let d = scale * (c.x().iter().sum::<f64>() - c.z().iter().sum::<f64>());
        Ok(d * d)
    })?;
    let rhs = (n as f64 - 1.0) / (big_n as f64 - 1.0);
    Ok(report("sir_si", frame, n, &squares, denom, rhs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub population_size: usize,
    pub sample_size: usize,
    pub m: usize,
    pub replicates: usize,
    /// `n E(Z_bar - X_bar)^2`.
    pub mean_gap: MeanSe,
    /// `E|s_Z^2 - s_X^2|`.
    pub dispersion_gap: MeanSe,
    /// `m E(Z*_bar - X*_bar)^2` under shared multinomial weights.
    pub bootstrap_gap: MeanSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    /// Strict decrease with 3-se separation between consecutive rows.
    pub mean_gap_decreasing: bool,
    pub dispersion_gap_decreasing: bool,
    pub bootstrap_gap_decreasing: bool,
}

fn separated_decrease(xs: &[MeanSe]) -> bool {
    xs.windows(2)
        .all(|w| w[0].mean - w[1].mean > 3.0 * (w[0].se * w[0].se + w[1].se * w[1].se).sqrt())
}

/// Coupled SIR/SI gaps over a family of frames with growing `N_I` and fixed
/// `n`. `m` defaults to `n`.
pub fn verify_decay(
    frames: &[Frame],
    column: &Column,
    n: usize,
    m: Option<usize>,
    stage: SecondStage,
    replicates: usize,
    seed: u64,
) -> Result<DecayTable> {
    if frames.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "decay check needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidConfig("decay check needs n >= 2".into()));
    }
    let m = m.unwrap_or(n);
    if m < 1 {
        return Err(Error::InvalidConfig("m must be positive".into()));
    }
    let mut rows = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        if n >= frame.n_psu() {
            return Err(Error::InvalidConfig(format!(
                "frame {k}: n = {n} must be below N_I = {}",
                frame.n_psu()
            )));
        }
        let stats: Vec<[f64; 3]> = (0..replicates)
            .into_par_iter()
            .map(|r| -> Result<[f64; 3]> {
                let mut rng = Stream::substream(seed, "decay", ((k as u64) << 40) | r as u64);
                let c = coupled_sir_si(frame, column, n, stage, &mut rng)?;
                let (z, x) = (c.z(), c.x());
                let zbar = crate::stats::mean(z);
                let xbar = crate::stats::mean(x);
                let s2z = crate::stats::sample_variance(z).unwrap();
                let s2x = crate::stats::sample_variance(x).unwrap();
                let d = shared_multinomial(n, m, &mut rng)?;
                let gap = d.weighted_mean(z) - d.weighted_mean(x);
                Ok([
                    n as f64 * (zbar - xbar).powi(2),
                    (s2z - s2x).abs(),
                    m as f64 * gap * gap,
                ])
            })
            .collect::<Result<_>>()?;
        let col = |c: usize| MeanSe::of(&stats.iter().map(|s| s[c]).collect::<Vec<_>>());
        rows.push(DecayRow {
            population_size: frame.n_psu(),
            sample_size: n,
            m,
            replicates,
            mean_gap: col(0),
            dispersion_gap: col(1),
            bootstrap_gap: col(2),
        });
    }
    let pick = |f: fn(&DecayRow) -> MeanSe| rows.iter().map(f).collect::<Vec<_>>();
    Ok(DecayTable {
        mean_gap_decreasing: separated_decrease(&pick(|r| r.mean_gap)),
        dispersion_gap_decreasing: separated_decrease(&pick(|r| r.dispersion_gap)),
        bootstrap_gap_decreasing: separated_decrease(&pick(|r| r.bootstrap_gap)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::PrimaryUnit;
    use std::collections::HashSet;

    fn frame_of(subtotals: &[f64]) -> Frame {
        let psus = subtotals
            .iter()
            .enumerate()
            .map(|(i, &y)| PrimaryUnit::new(i as i64, None, vec![1], vec![y], 1).unwrap())
            .collect();
        Frame::new(psus, vec!["y1".into()]).unwrap()
    }

    const Y: Column = Column::Var { var: 0 };

    #[test]
    fn be_si_sizes_and_sharing() {
        let frame = frame_of(&(1..=50).map(f64::from).collect::<Vec<_>>());
        let mut rng = Stream::new(1);
        for _ in 0..300 {
            let c = coupled_be_si(&frame, &Y, 10, SecondStage::Census, &mut rng).unwrap();
            assert_eq!(c.si.len(), 10);
            assert_eq!(c.si.order.iter().collect::<HashSet<_>>().len(), 10);
            let be: HashSet<_> = c.be.order.iter().copied().collect();
            let si: HashSet<_> = c.si.order.iter().copied().collect();
            let inter: HashSet<_> = be.intersection(&si).copied().collect();
            assert_eq!(inter, c.shared.iter().copied().collect());
            // one sample contains the other
            assert!(be.is_subset(&si) || si.is_subset(&be));
            if c.be.len() == 10 {
                assert_eq!(c.delta2(25.5), 0.0);
            }
        }
    }

    #[test]
    fn sir_si_single_draw_is_exact() {
        let frame = frame_of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut rng = Stream::new(2);
        for _ in 0..50 {
            let c = coupled_sir_si(&frame, &Y, 1, SecondStage::Census, &mut rng).unwrap();
            assert_eq!(c.x(), c.z());
        }
    }

    #[test]
    fn shared_multinomial_sums_to_m() {
        let mut rng = Stream::new(3);
        assert_eq!(shared_multinomial(1, 7, &mut rng).unwrap().counts, vec![7]);
        let d = shared_multinomial(5, 12, &mut rng).unwrap();
        assert_eq!(d.counts.iter().sum::<u32>(), 12);
        let reps = 40_000;
        let both_first = (0..reps)
            .filter(|_| shared_multinomial(2, 2, &mut rng).unwrap().counts == vec![2, 0])
            .count();
        let p = both_first as f64 / reps as f64;
        assert!((p - 0.25).abs() < 3.0 * (0.25f64 * 0.75 / reps as f64).sqrt() + 1e-3, "{p}");
    }

    #[test]
    fn degenerate_denominator_surfaces() {
        let frame = frame_of(&[3.0; 10]);
        assert!(verify_hajek_bound(&frame, &Y, 3, SecondStage::Census, 1000, 1).is_err());
        assert!(verify_sir_si_bound(&frame, &Y, 3, SecondStage::Census, 1000, 1).is_err());
        let ok = frame_of(&(1..=10).map(f64::from).collect::<Vec<_>>());
        assert!(verify_hajek_bound(&ok, &Y, 3, SecondStage::Census, 10, 1).is_err());
    }

    #[test]
    fn sir_si_bound_n_one_is_zero() {
        let frame = frame_of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let r = verify_sir_si_bound(&frame, &Y, 1, SecondStage::Census, 1000, 4).unwrap();
        assert_eq!(r.rhs, 0.0);
        assert_eq!(r.lhs, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn decay_rejects_short_family_and_census_first_stage() {
        let f = frame_of(&[1.0, 2.0, 3.0, 4.0]);
        let fam = vec![f.clone(), f.clone()];
        assert!(verify_decay(&fam, &Y, 2, None, SecondStage::Census, 10, 1).is_err());
        let fam = vec![f.clone(), f.clone(), f];
        assert!(verify_decay(&fam, &Y, 4, None, SecondStage::Census, 10, 1).is_err());
    }
}
