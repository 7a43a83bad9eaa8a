//! First- and second-stage selection engines.
//!
//! First-stage draws keep the draw order, since the per-draw values `Z_j`
//! and `X_j` are defined by it. Bernoulli draws come back in frame order.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frame::Frame;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    Si { n: usize },
    Sir { n: usize },
    Be { expected_n: usize },
    Systematic { n: usize },
    StratSi { allocation: Vec<usize> },
}

impl DesignSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            DesignSpec::Si { .. } => "si",
            DesignSpec::Sir { .. } => "sir",
            DesignSpec::Be { .. } => "be",
            DesignSpec::Systematic { .. } => "systematic",
            DesignSpec::StratSi { .. } => "strat_si",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageDraw {
    pub design: DesignSpec,
    /// `N_I`.
    pub population_size: usize,
    /// Selected PSU indices in draw order.
    pub order: Vec<usize>,
    /// `(psu, W_i)` in order of first selection. SIR only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiplicity: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_tag: Option<String>,
}

impl FirstStageDraw {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Distinct PSUs in order of first selection.
    pub fn distinct(&self) -> Vec<usize> {
        match &self.multiplicity {
            Some(w) => w.iter().map(|&(i, _)| i).collect(),
            None => self.order.clone(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.stream_tag = Some(tag.into());
        self
    }
}

fn check_size(n: usize, population: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be at least 1".into()));
    }
    if n > population {
        return Err(Error::SampleTooLarge { n, population });
    }
    Ok(())
}

/// Draw-by-draw SI selection of `n` of `0..N` (Fisher–Yates prefix). Sparse
/// swaps keep the cost at `O(n)` when `n` is small against `N`.
pub(crate) fn si_indices<R: Rng + ?Sized>(big_n: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    if n.saturating_mul(4) >= big_n {
        let mut perm: Vec<usize> = (0..big_n).collect();
        for j in 0..n {
            let r = rng.random_range(j..big_n);
            perm.swap(j, r);
            out.push(perm[j]);
        }
    } else {
        let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(2 * n);
        for j in 0..n {
            let r = rng.random_range(j..big_n);
            let at_r = *swapped.get(&r).unwrap_or(&r);
            let at_j = *swapped.get(&j).unwrap_or(&j);
            swapped.insert(r, at_j);
            out.push(at_r);
        }
    }
    out
}

pub fn draw_si<R: Rng + ?Sized>(big_n: usize, n: usize, rng: &mut R) -> Result<FirstStageDraw> {
    check_size(n, big_n)?;
    Ok(FirstStageDraw {
        design: DesignSpec::Si { n },
        population_size: big_n,
        order: si_indices(big_n, n, rng),
        multiplicity: None,
        stream_tag: None,
    })
}

/// SI sample of size `n` from an explicit pool, in draw order.
pub fn draw_si_from<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::SampleTooLarge {
            n,
            population: pool.len(),
        });
    }
    Ok(si_indices(pool.len(), n, rng)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

/// SI sample of size `n` from `0..N` minus `excluded`, in draw order.
///
/// When the excluded set is a small part of the population each draw is a
/// uniform pick among the remaining units, done by rejection.
pub fn draw_si_excluding<R: Rng + ?Sized>(
    big_n: usize,
    excluded: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let remaining = big_n - excluded.len();
    if n > remaining {
        return Err(Error::SampleTooLarge {
            n,
            population: remaining,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if (excluded.len() + n) * 2 <= big_n {
        let mut taken: Vec<usize> = excluded.to_vec();
        taken.sort_unstable();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let k = rng.random_range(0..big_n);
            if let Err(pos) = taken.binary_search(&k) {
                taken.insert(pos, k);
                out.push(k);
            }
        }
        Ok(out)
    } else {
        let mut skip = vec![false; big_n];
        for &e in excluded {
            skip[e] = true;
        }
        let pool: Vec<usize> = (0..big_n).filter(|&k| !skip[k]).collect();
        draw_si_from(&pool, n, rng)
    }
}

/// `(psu, count)` in order of first appearance.
pub fn multiplicities(order: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::with_capacity(order.len());
    for &i in order {
        match slot.get(&i) {
            Some(&s) => out[s].1 += 1,
            None => {
                slot.insert(i, out.len());
                out.push((i, 1));
            }
        }
    }
    out
}

pub fn draw_sir<R: Rng + ?Sized>(big_n: usize, n: usize, rng: &mut R) -> Result<FirstStageDraw> {
    if big_n == 0 || n == 0 {
        return Err(Error::InvalidConfig("SIR needs N >= 1 and n >= 1".into()));
    }
    let order: Vec<usize> = (0..n).map(|_| rng.random_range(0..big_n)).collect();
    Ok(FirstStageDraw {
        design: DesignSpec::Sir { n },
        population_size: big_n,
        multiplicity: Some(multiplicities(&order)),
        order,
        stream_tag: None,
    })
}

/// Bernoulli sampling with inclusion probability `f`. Uses geometric gaps, so
/// the cost is proportional to the realized size.
pub fn draw_bernoulli<R: Rng + ?Sized>(
    big_n: usize,
    f: f64,
    rng: &mut R,
) -> Result<FirstStageDraw> {
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "Bernoulli inclusion probability must lie in (0, 1), got {f}"
        )));
    }
    let log_q = (-f).ln_1p();
    let mut order = Vec::new();
    let mut pos = 0usize;
    loop {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let gap = (u.ln() / log_q).floor();
        if gap >= (big_n - pos) as f64 {
            break;
        }
        pos += gap as usize;
        order.push(pos);
        pos += 1;
        if pos >= big_n {
            break;
        }
    }
    let expected_n = (f * big_n as f64).round() as usize;
    Ok(FirstStageDraw {
        design: DesignSpec::Be { expected_n },
        population_size: big_n,
        order,
        multiplicity: None,
        stream_tag: None,
    })
}

/// BE sampling with expected size `expected_n`, i.e. `f_I = expected_n / N`.
pub fn draw_be<R: Rng + ?Sized>(
    big_n: usize,
    expected_n: usize,
    rng: &mut R,
) -> Result<FirstStageDraw> {
    if expected_n == 0 || expected_n >= big_n {
        return Err(Error::InvalidConfig(format!(
            "BE expected size must lie in (0, N): got {expected_n} with N = {big_n}"
        )));
    }
    let mut draw = draw_bernoulli(big_n, expected_n as f64 / big_n as f64, rng)?;
    draw.design = DesignSpec::Be { expected_n };
    Ok(draw)
}

/// Systematic sample with real interval `k = N/n` and start `u ~ U(0, k)`:
/// unit `floor(u + j k)` for `j = 0..n`.
///
/// Only `w = floor(n u)`, uniform on `0..N`, matters: the selected units are
/// `floor((w + j N) / n)`, which this computes in integer arithmetic.
pub fn draw_systematic<R: Rng + ?Sized>(big_n: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_size(n, big_n)?;
    Ok(systematic_sample(big_n, n, rng.random_range(0..big_n)))
}

/// The systematic sample for start class `w` in `0..N`.
pub fn systematic_sample(big_n: usize, n: usize, w: usize) -> Vec<usize> {
    (0..n).map(|j| (w + j * big_n) / n).collect()
}

/// Independent SI draws, one per stratum of the frame. PSU indices are
/// frame indices.
pub fn draw_stratified_si<R: Rng + ?Sized>(
    frame: &Frame,
    allocation: &[usize],
    rng: &mut R,
) -> Result<Vec<FirstStageDraw>> {
    let strata = frame
        .strata()
        .ok_or_else(|| Error::InvalidConfig("frame has no strata".into()))?;
    if allocation.len() != strata.len() {
        return Err(Error::SizeMismatch {
            expected: strata.len(),
            got: allocation.len(),
        });
    }
    strata
        .iter()
        .zip(allocation)
        .map(|(s, &n)| {
            check_size(n, s.members.len())?;
            Ok(FirstStageDraw {
                design: DesignSpec::Si { n },
                population_size: s.members.len(),
                order: draw_si_from(&s.members, n, rng)?,
                multiplicity: None,
                stream_tag: Some(format!("stratum:{}", s.label)),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecondStage {
    Census,
    Si { n0: usize },
    Systematic { n0: usize },
}

impl SecondStage {
    pub fn tag(&self) -> &'static str {
        match self {
            SecondStage::Census => "census",
            SecondStage::Si { .. } => "si",
            SecondStage::Systematic { .. } => "systematic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondStageDraw {
    pub psu_index: usize,
    /// Indices into the PSU's SSU list.
    pub ssu_indices: Vec<usize>,
    /// Common inclusion probability `n0 / N_i`.
    pub inclusion_prob: f64,
    pub design: SecondStage,
}

pub fn draw_second_stage<R: Rng + ?Sized>(
    psu_index: usize,
    psu_size: usize,
    stage: SecondStage,
    rng: &mut R,
) -> Result<SecondStageDraw> {
    let ssu_indices = match stage {
        SecondStage::Census => (0..psu_size).collect(),
        SecondStage::Si { n0 } => {
            check_size(n0, psu_size)?;
            si_indices(psu_size, n0, rng)
        }
        SecondStage::Systematic { n0 } => draw_systematic(psu_size, n0, rng)?,
    };
    Ok(SecondStageDraw {
        psu_index,
        inclusion_prob: ssu_indices.len() as f64 / psu_size as f64,
        ssu_indices,
        design: stage,
    })
}
