//! Fixed-size sampling designs: simple random sampling without replacement
//! (SRS) and stratified SRS (STR), with their exact inclusion probabilities.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::curves::{CurvePopulation, TimeGrid};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Srs,
    Stratified,
}

#[derive(Debug, PartialEq)]
struct DesignInner {
    kind: DesignKind,
    /// 0-based stratum index of every population unit.
    stratum_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    pop_sizes: Vec<usize>,
    sample_sizes: Vec<usize>,
}

/// A sampling design over a population of known size. SRS is handled as a
/// single stratum. Cheap to clone.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    inner: Arc<DesignInner>,
}

impl Design {
    pub fn srs(population_size: usize, n: usize) -> Result<Self> {
        if n == 0 || n > population_size {
            return Err(Error::Infeasible(format!(
                "SRS needs 1 <= n <= N (n = {n}, N = {population_size})"
            )));
        }
        Ok(Design {
            inner: Arc::new(DesignInner {
                kind: DesignKind::Srs,
                stratum_of: vec![0; population_size],
                members: vec![(0..population_size).collect()],
                pop_sizes: vec![population_size],
                sample_sizes: vec![n],
            }),
        })
    }

    /// Stratified SRS; `labels` are the 1-based stratum labels of the
    /// population units and `allocation[h - 1]` is `n_h`.
    pub fn stratified(labels: &[usize], allocation: Vec<usize>) -> Result<Self> {
        let h = allocation.len();
        if h == 0 {
            return Err(Error::Infeasible("empty allocation".into()));
        }
        let mut members = vec![Vec::new(); h];
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 || l > h {
                return Err(Error::Infeasible(format!(
                    "unit {i} has stratum label {l} but the allocation covers {h} strata"
                )));
            }
            members[l - 1].push(i);
        }
        let pop_sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        for (k, (&nh, &bign)) in allocation.iter().zip(&pop_sizes).enumerate() {
            if nh < 2 || nh > bign {
                return Err(Error::Infeasible(format!(
                    "stratum {} needs 2 <= n_h <= N_h (n_h = {nh}, N_h = {bign})",
                    k + 1
                )));
            }
        }
        Ok(Design {
            inner: Arc::new(DesignInner {
                kind: DesignKind::Stratified,
                stratum_of: labels.iter().map(|l| l - 1).collect(),
                members,
                pop_sizes,
                sample_sizes: allocation,
            }),
        })
    }

    pub fn kind(&self) -> DesignKind {
        self.inner.kind
    }

    pub fn population_size(&self) -> usize {
        self.inner.stratum_of.len()
    }

    pub fn sample_size(&self) -> usize {
        self.inner.sample_sizes.iter().sum()
    }

    pub fn stratum_count(&self) -> usize {
        self.inner.pop_sizes.len()
    }

    /// 0-based stratum index of unit `i`.
    pub fn stratum_of(&self, i: usize) -> usize {
        self.inner.stratum_of[i]
    }

    pub fn stratum_members(&self, h: usize) -> &[usize] {
        &self.inner.members[h]
    }

    /// `N_h` per stratum.
    pub fn stratum_sizes(&self) -> &[usize] {
        &self.inner.pop_sizes
    }

    /// `n_h` per stratum.
    pub fn allocation(&self) -> &[usize] {
        &self.inner.sample_sizes
    }

    pub fn is_census(&self) -> bool {
        self.inner.pop_sizes == self.inner.sample_sizes
    }

    pub fn inclusion_probs(&self) -> InclusionProbs<'_> {
        InclusionProbs { design: self }
    }

    /// Draws a sample: independent SRS of size `n_h` in every stratum.
    pub fn draw(&self, seed: u64) -> SampleDraw {
        let mut rng = rng::rng(seed);
        let mut units = Vec::with_capacity(self.sample_size());
        for (h, members) in self.inner.members.iter().enumerate() {
            let picked = sample(&mut rng, members.len(), self.inner.sample_sizes[h]);
            units.extend(picked.into_iter().map(|k| members[k]));
        }
        self.sample_from_units(units)
    }

    fn sample_from_units(&self, mut units: Vec<usize>) -> SampleDraw {
        units.sort_unstable();
        let probs = self.inclusion_probs();
        let weights = units.iter().map(|&i| 1.0 / probs.first_order(i)).collect();
        SampleDraw {
            units,
            weights,
            design: self.clone(),
        }
    }

    /// Number of distinct samples the design can produce.
    pub fn support_size(&self) -> u128 {
        self.inner
            .pop_sizes
            .iter()
            .zip(&self.inner.sample_sizes)
            .map(|(&bign, &n)| binomial(bign, n))
            .product()
    }

    /// Every sample of the design, each with probability `1 / support_size`.
    /// Intended for exhaustive checks on small populations.
    pub fn enumerate(&self) -> Result<Vec<SampleDraw>> {
        let size = self.support_size();
        if size > 2_000_000 {
            return Err(Error::Infeasible(format!(
                "{size} samples are too many to enumerate"
            )));
        }
        let per_stratum: Vec<Vec<Vec<usize>>> = self
            .inner
            .members
            .iter()
            .zip(&self.inner.sample_sizes)
            .map(|(m, &n)| combinations(m, n))
            .collect();
        let mut samples: Vec<Vec<usize>> = vec![Vec::new()];
        for choices in &per_stratum {
            samples = samples
                .iter()
                .flat_map(|prefix| {
                    choices.iter().map(move |c| {
                        let mut s = prefix.clone();
                        s.extend_from_slice(c);
                        s
                    })
                })
                .collect();
        }
        Ok(samples
            .into_iter()
            .map(|u| self.sample_from_units(u))
            .collect())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        match (0..k).rev().find(|&p| idx[p] < p + n - k) {
            None => return out,
            Some(p) => {
                idx[p] += 1;
                for j in p + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
    }
}

/// Closed-form first- and second-order inclusion probabilities.
#[derive(Clone, Copy, Debug)]
pub struct InclusionProbs<'a> {
    design: &'a Design,
}

impl InclusionProbs<'_> {
    pub fn first_order(&self, i: usize) -> f64 {
        let h = self.design.stratum_of(i);
        self.design.inner.sample_sizes[h] as f64 / self.design.inner.pop_sizes[h] as f64
    }

    pub fn second_order(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.first_order(i);
        }
        let (hi, hj) = (self.design.stratum_of(i), self.design.stratum_of(j));
        if hi != hj {
            return self.first_order(i) * self.first_order(j);
        }
        let n = self.design.inner.sample_sizes[hi] as f64;
        let bign = self.design.inner.pop_sizes[hi] as f64;
        n * (n - 1.0) / (bign * (bign - 1.0))
    }
}

/// A drawn sample: sorted unit indices with their design weights `1 / π_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub units: Vec<usize>,
    pub weights: Vec<f64>,
    pub design: Design,
}

impl SampleDraw {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn contains(&self, unit: usize) -> bool {
        self.units.binary_search(&unit).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationRule {
    Neyman,
    Proportional,
    Explicit(Vec<usize>),
}

impl std::str::FromStr for AllocationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neyman" => Ok(AllocationRule::Neyman),
            "proportional" => Ok(AllocationRule::Proportional),
            other => match other.strip_prefix("explicit=") {
                Some(list) => list
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad allocation entry {x:?}")))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(AllocationRule::Explicit),
                None => Err(Error::Config(format!("unknown allocation {other:?}"))),
            },
        }
    }
}

/// Neyman allocation on the auxiliary scalar: `n_h ∝ N_h S_h`.
pub fn optimal_allocation(pop: &CurvePopulation, n: usize) -> Result<Design> {
    allocate(pop, n, &AllocationRule::Neyman)
}

pub fn allocate(pop: &CurvePopulation, n: usize, rule: &AllocationRule) -> Result<Design> {
    let labels = pop
        .strata()
        .ok_or_else(|| Error::Infeasible("population has no strata".into()))?;
    let sizes = pop.stratum_sizes();
    let h = sizes.len();
    let allocation = match rule {
        AllocationRule::Explicit(a) => {
            if a.len() != h {
                return Err(Error::Infeasible(format!(
                    "explicit allocation has {} entries for {h} strata",
                    a.len()
                )));
            }
            a.clone()
        }
        AllocationRule::Proportional => {
            let scores: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
            clamped_allocation(&scores, &sizes, n)?
        }
        AllocationRule::Neyman => {
            let aux = pop
                .auxiliary()
                .ok_or_else(|| Error::Infeasible("Neyman allocation needs auxiliary values".into()))?;
            let sd = stratum_sd(labels, aux, h);
            let scores: Vec<f64> = sizes.iter().zip(&sd).map(|(&s, sd)| s as f64 * sd).collect();
            clamped_allocation(&scores, &sizes, n)?
        }
    };
    Design::stratified(labels, allocation)
}

/// Within-stratum standard deviation with divisor `N_h - 1`.
fn stratum_sd(labels: &[usize], aux: &[f64], h: usize) -> Vec<f64> {
    let mut sum = vec![0.0; h];
    let mut count = vec![0usize; h];
    for (&l, &x) in labels.iter().zip(aux) {
        sum[l - 1] += x;
        count[l - 1] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut ss = vec![0.0; h];
    for (&l, &x) in labels.iter().zip(aux) {
        ss[l - 1] += (x - mean[l - 1]).powi(2);
    }
    ss.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 1 { (s / (c - 1) as f64).sqrt() } else { 0.0 })
        .collect()
}

/// Allocates `n` proportionally to `scores`, clamping each stratum to
/// `[2, N_h]` and redistributing, then rounds by largest remainder with ties
/// going to the lowest stratum index.
fn clamped_allocation(scores: &[f64], sizes: &[usize], n: usize) -> Result<Vec<usize>> {
    let h = sizes.len();
    let total: usize = sizes.iter().sum();
    if n < 2 * h {
        return Err(Error::Infeasible(format!(
            "n = {n} is below the minimum 2 per stratum ({h} strata)"
        )));
    }
    if n > total {
        return Err(Error::Infeasible(format!("n = {n} exceeds N = {total}")));
    }
    if let Some(k) = sizes.iter().position(|&s| s < 2) {
        return Err(Error::Infeasible(format!("stratum {} has fewer than 2 units", k + 1)));
    }
    let mut fixed: Vec<Option<f64>> = vec![None; h];
    let mut shares = vec![0.0; h];
    loop {
        let remaining = n as f64 - fixed.iter().flatten().sum::<f64>();
        let free: Vec<usize> = (0..h).filter(|&k| fixed[k].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let score_mass: f64 = free.iter().map(|&k| scores[k]).sum();
        // all-zero scores fall back to proportional allocation
        let weight = |k: usize| if score_mass > 0.0 { scores[k] } else { sizes[k] as f64 };
        let mass: f64 = free.iter().map(|&k| weight(k)).sum();
        let mut changed = false;
        for &k in &free {
            let x = remaining * weight(k) / mass;
            shares[k] = x;
            if x < 2.0 {
                fixed[k] = Some(2.0);
                changed = true;
            } else if x > sizes[k] as f64 {
                fixed[k] = Some(sizes[k] as f64);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let exact: Vec<f64> = (0..h).map(|k| fixed[k].unwrap_or(shares[k])).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = n - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if alloc[k] < sizes[k] {
            alloc[k] += 1;
            leftover -= 1;
        }
    }
    Ok(alloc)
}

/// Per-stratum sizes of the design a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StratumSizes {
    pub population: usize,
    pub sample: usize,
}

impl StratumSizes {
    /// `N_h / n_h`, the design weight of every unit in the stratum.
    pub fn design_weight(&self) -> f64 {
        self.population as f64 / self.sample as f64
    }
}

/// The sampled curves with everything the estimators need: rows, analysis
/// weights, and the stratum of each row.
///
/// `weights` start out as the design weights `d_i`; replication methods
/// substitute their own analysis weights.
#[derive(Clone, Debug)]
pub struct SampleData {
    pub grid: Arc<TimeGrid>,
    pub units: Vec<usize>,
    pub values: Array2<f64>,
    pub weights: Vec<f64>,
    pub stratum: Vec<usize>,
    pub strata: Vec<StratumSizes>,
    pub population_size: usize,
    rows_by_stratum: Vec<Vec<usize>>,
}

impl SampleData {
    pub fn new(pop: &CurvePopulation, draw: &SampleDraw) -> Result<Self> {
        if draw.design.population_size() != pop.size() {
            return Err(Error::Design(format!(
                "design covers {} units, population has {}",
                draw.design.population_size(),
                pop.size()
            )));
        }
        let d = pop.grid().len();
        let mut values = Array2::zeros((draw.len(), d));
        for (r, &i) in draw.units.iter().enumerate() {
            values.row_mut(r).assign(&pop.row(i));
        }
        let stratum = draw.units.iter().map(|&i| draw.design.stratum_of(i)).collect();
        Self::from_parts(
            pop.grid().clone(),
            draw.units.clone(),
            values,
            draw.weights.clone(),
            stratum,
            strata_of(&draw.design),
        )
    }

    pub fn from_parts(
        grid: Arc<TimeGrid>,
        units: Vec<usize>,
        values: Array2<f64>,
        weights: Vec<f64>,
        stratum: Vec<usize>,
        strata: Vec<StratumSizes>,
    ) -> Result<Self> {
        let n = values.nrows();
        if n == 0 {
            return Err(Error::EmptySample);
        }
        if values.ncols() != grid.len() || weights.len() != n || stratum.len() != n || units.len() != n {
            return Err(Error::Dimension("sample parts have inconsistent sizes".into()));
        }
        let mut rows_by_stratum = vec![Vec::new(); strata.len()];
        for (r, &h) in stratum.iter().enumerate() {
            rows_by_stratum
                .get_mut(h)
                .ok_or_else(|| Error::Dimension(format!("row {r} in unknown stratum {h}")))?
                .push(r);
        }
        let population_size = strata.iter().map(|s| s.population).sum();
        Ok(SampleData {
            grid,
            units,
            values,
            weights,
            stratum,
            strata,
            population_size,
            rows_by_stratum,
        })
    }

    /// Same sample with different analysis weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.len());
        SampleData {
            weights,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, r: usize) -> ArrayView1<'_, f64> {
        self.values.row(r)
    }

    /// Rows belonging to stratum `h`.
    pub fn rows_in(&self, h: usize) -> &[usize] {
        &self.rows_by_stratum[h]
    }

    /// Design weight `N_h / n_h` of row `r`.
    pub fn design_weight(&self, r: usize) -> f64 {
        self.strata[self.stratum[r]].design_weight()
    }

    /// First-order inclusion probability of row `r`.
    pub fn pi(&self, r: usize) -> f64 {
        1.0 / self.design_weight(r)
    }
}

pub fn strata_of(design: &Design) -> Vec<StratumSizes> {
    design
        .stratum_sizes()
        .iter()
        .zip(design.allocation())
        .map(|(&population, &sample)| StratumSizes { population, sample })
        .collect()
}
