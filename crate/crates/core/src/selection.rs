//! Channel selection functions and the channel-out masking rule.
//!
//! A selector maps the k candidate activations of one group to the set of
//! channels that stay open; every other channel outputs exactly zero. All
//! selectors break ties toward the lowest index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelSelector {
    ArgMax,
    ArgMin,
    /// Lower median for even group sizes.
    ArgMedian,
    /// Indices of the `l` largest candidates.
    TopL(usize),
    AbsMax,
}

/// Sorted, distinct channel indices within a group.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        IndexSet(indices)
    }

    pub fn single(i: usize) -> Self {
        IndexSet(vec![i])
    }

    pub fn all(k: usize) -> Self {
        IndexSet((0..k).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Lexicographic rank among all `l`-subsets of `0..k`; the index itself when `l == 1`.
    pub fn code(&self, k: usize) -> usize {
        let l = self.0.len();
        let mut rank = 0;
        let mut prev = 0;
        for (pos, &idx) in self.0.iter().enumerate() {
            for skipped in prev..idx {
                rank += binomial(k - skipped - 1, l - pos - 1);
            }
            prev = idx + 1;
        }
        rank
    }
}

fn binomial(n: usize, r: usize) -> usize {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

impl ChannelSelector {
    /// Number of indices this selector returns.
    pub fn l(&self) -> usize {
        match *self {
            ChannelSelector::TopL(l) => l,
            _ => 1,
        }
    }

    /// Number of distinct index sets this selector can produce for group size `k`.
    pub fn pattern_count(&self, k: usize) -> usize {
        binomial(k, self.l())
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if k < 2 {
            return Err(Error::config(format!("group size must be at least 2, got {k}")));
        }
        if let ChannelSelector::TopL(l) = *self {
            if l == 0 || l >= k {
                return Err(Error::config(format!("topl needs 1 <= l < k, got l={l}, k={k}")));
            }
        }
        Ok(())
    }

    /// Selection for one group.
    pub fn select(&self, a: &[f64]) -> Result<IndexSet> {
        self.validate(a.len())?;
        if a.iter().any(|v| v.is_nan()) {
            return Err(Error::data("NaN in selector input"));
        }
        Ok(self.select_unchecked(a))
    }

    /// Selection without validation; the caller guarantees `k >= 2`, a valid
    /// `l` and NaN-free input.
    pub(crate) fn select_unchecked(&self, a: &[f64]) -> IndexSet {
        match *self {
            ChannelSelector::ArgMax => IndexSet::single(first_best(a, |x, y| x > y)),
            ChannelSelector::ArgMin => IndexSet::single(first_best(a, |x, y| x < y)),
            ChannelSelector::AbsMax => IndexSet::single(first_best(a, |x, y| x.abs() > y.abs())),
            ChannelSelector::ArgMedian => {
                let order = stable_order(a, |x, y| x.total_cmp(&y));
                IndexSet::single(order[(a.len() - 1) / 2])
            }
            ChannelSelector::TopL(l) => {
                let order = stable_order(a, |x, y| y.total_cmp(&x));
                IndexSet::new(order[..l].to_vec())
            }
        }
    }
}

fn first_best(a: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for i in 1..a.len() {
        if better(a[i], a[best]) {
            best = i;
        }
    }
    best
}

// Indices sorted by value; equal values keep ascending index order.
fn stable_order(a: &[f64], cmp: impl Fn(f64, f64) -> Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| cmp(a[i], a[j]));
    idx
}

impl fmt::Display for ChannelSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelSelector::ArgMax => f.write_str("argmax"),
            ChannelSelector::ArgMin => f.write_str("argmin"),
            ChannelSelector::ArgMedian => f.write_str("argmedian"),
            ChannelSelector::TopL(l) => write!(f, "topl:{l}"),
            ChannelSelector::AbsMax => f.write_str("absmax"),
        }
    }
}

impl FromStr for ChannelSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "argmax" => Ok(ChannelSelector::ArgMax),
            "argmin" => Ok(ChannelSelector::ArgMin),
            "argmedian" => Ok(ChannelSelector::ArgMedian),
            "absmax" => Ok(ChannelSelector::AbsMax),
            other => match other.strip_prefix("topl:") {
                Some(l) => l
                    .trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&l| l > 0)
                    .map(ChannelSelector::TopL)
                    .ok_or_else(|| Error::config(format!("bad topl size in {other:?}"))),
                None => Err(Error::config(format!(
                    "unknown selector {other:?} (expected argmax, argmin, argmedian, topl:<l>, absmax)"
                ))),
            },
        }
    }
}

/// `h_i = a_i` if `i` is selected, else 0.
pub fn apply_mask(a: &[f64], idx: &IndexSet) -> Result<Vec<f64>> {
    if let Some(&bad) = idx.indices().iter().find(|&&i| i >= a.len()) {
        return Err(Error::internal(format!(
            "index {bad} out of range for group of {}",
            a.len()
        )));
    }
    let mut h = vec![0.0; a.len()];
    for &i in idx.indices() {
        h[i] = a[i];
    }
    Ok(h)
}

/// Fraction of i.i.d. standard-normal input vectors that select each channel.
pub fn selection_balance_stat(
    selector: ChannelSelector,
    k: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    selector.validate(k)?;
    if n_samples < 1000 {
        return Err(Error::config(format!("need at least 1000 samples, got {n_samples}")));
    }
    let mut counts = vec![0usize; k];
    let mut a = vec![0.0; k];
    for _ in 0..n_samples {
        a.iter_mut().for_each(|v| *v = rng.standard_normal());
        for &i in selector.select_unchecked(&a).indices() {
            counts[i] += 1;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / n_samples as f64).collect())
}
