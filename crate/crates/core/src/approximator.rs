//! Constructive approximation of a bounded target by a single channel-out
//! group: a convex piecewise-linear prototype on a δ-lattice, one affine row
//! per lattice cell, and one output scale per row.
//!
//! Cell `k` (1-based) along an axis spans `[(k-1)δ, kδ]`; negative cells `-k`
//! span `[-kδ, -(k-1)δ]`. On the positive orthant the prototype is
//! `P(x) = c + Σ_i φ(x_i)` with `φ(0) = 0` and `φ' = g_k` on cell `k`, which
//! is the unique continuous function whose per-cell gradient is
//! `(g_{k_1}, …, g_{k_n})` and which vanishes at the origin.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Dense, Layer, Mode, Network};
use crate::rng::Rng;
use crate::selection::ChannelSelector;
use crate::tensor::Tensor;

/// Largest number of cells a build will enumerate.
pub const MAX_CELLS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// `[0, R]^n`
    PositiveOrthant,
    /// `[-R, R]^n`; cells off the positive orthant reuse the row of their
    /// mirror cell unchanged.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxParams {
    pub n: usize,
    pub delta: f64,
    pub radius: f64,
    /// Bound `G` of the slope series.
    pub g_bound: f64,
    /// Shift `c`.
    pub shift: f64,
    pub domain: Domain,
    /// Explicit slopes `g_1, g_2, …`; `None` uses `g_i = G(1 - 2^{-i})`.
    pub slopes: Option<Vec<f64>>,
}

impl ApproxParams {
    pub fn new(n: usize, delta: f64, radius: f64) -> Self {
        ApproxParams {
            n,
            delta,
            radius,
            g_bound: 1.0,
            shift: 1.0,
            domain: Domain::PositiveOrthant,
            slopes: None,
        }
    }
}

/// `g_i = G(1 - 2^{-i})` for `i = 1..=count`.
pub fn default_slopes(g_bound: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|i| g_bound * (1.0 - 0.5f64.powi(i as i32))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeApproximator {
    n: usize,
    delta: f64,
    radius: f64,
    g_bound: f64,
    shift: f64,
    domain: Domain,
    slopes: Vec<f64>,
    /// Cell tuple of each row; all-positive cells come first.
    cells: Vec<Vec<i64>>,
    index: HashMap<Vec<i64>, usize>,
    /// `K × n` gradients.
    weights: Vec<Vec<f64>>,
    /// Row intercepts including the shift `c`.
    intercepts: Vec<f64>,
    gamma: Vec<f64>,
}

impl LatticeApproximator {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn g_bound(&self) -> f64 {
        self.g_bound
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Number of rows `K`, one per cell.
    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Vec<i64>] {
        &self.cells
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn row_of(&self, cell: &[i64]) -> Option<usize> {
        self.index.get(cell).copied()
    }

    /// Cells per axis on the positive side.
    pub fn cells_per_axis(&self) -> usize {
        (self.radius / self.delta).round() as usize
    }

    /// `(W x)_i + b_i`, i.e. `f_i(x) + c` for row `i`.
    pub fn response(&self, row: usize, x: &[f64]) -> f64 {
        self.weights[row].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercepts[row]
    }

    /// The row used by the cell itself (its mirror's row off the positive orthant).
    pub fn own_row(&self, cell: &[i64]) -> Option<usize> {
        let mirror: Vec<i64> = cell.iter().map(|k| k.abs()).collect();
        self.row_of(&mirror)
    }

    /// Lower corner of a positive cell, reflected for negative axes.
    pub fn anchor(&self, cell: &[i64]) -> Vec<f64> {
        cell.iter().map(|&k| k.signum() as f64 * (k.abs() - 1) as f64 * self.delta).collect()
    }

    pub fn center(&self, cell: &[i64]) -> Vec<f64> {
        cell.iter().map(|&k| k.signum() as f64 * (k.abs() as f64 - 0.5) * self.delta).collect()
    }

    /// The cell containing `x`; points on a shared face go to the cell on the
    /// positive side.
    pub fn cell_of(&self, x: &[f64]) -> Result<Vec<i64>> {
        self.check_point(x)?;
        let m = self.cells_per_axis() as i64;
        Ok(x.iter()
            .map(|&v| {
                if v >= 0.0 {
                    ((v / self.delta).floor() as i64 + 1).clamp(1, m)
                } else {
                    -(((-v) / self.delta).ceil() as i64).clamp(1, m)
                }
            })
            .collect())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::shape(format!("point has {} coordinates, expected {}", x.len(), self.n)));
        }
        let lo = match self.domain {
            Domain::PositiveOrthant => 0.0,
            Domain::Symmetric => -self.radius,
        };
        let slack = 1e-12 * self.radius;
        if x.iter().any(|&v| !(v >= lo - slack && v <= self.radius + slack)) {
            return Err(Error::data(format!("point {x:?} is outside [{lo}, {}]^{}", self.radius, self.n)));
        }
        Ok(())
    }

    /// Index of the largest response, lowest index on ties.
    pub fn winning_row(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = self.response(0, x);
        for i in 1..self.rows() {
            let v = self.response(i, x);
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        best
    }

    /// The approximator as a network: an affine layer producing all `K`
    /// responses, one channel-out group of size `K` with argmax selection,
    /// and a bias-free output layer holding `Γ`.
    pub fn to_network(&self) -> Result<Network> {
        let k = self.rows();
        let w: Vec<f64> = self.weights.iter().flatten().copied().collect();
        let hidden = Dense {
            weights: Tensor::new(vec![k, self.n], w)?,
            bias: Tensor::new(vec![k], self.intercepts.clone())?,
        };
        let out = Dense {
            weights: Tensor::new(vec![1, k], self.gamma.clone())?,
            bias: Tensor::zeros(&[1]),
        };
        Network::new(
            vec![self.n],
            vec![
                Layer::Dense(hidden),
                Layer::ChannelOut { k, selector: ChannelSelector::ArgMax },
                Layer::Dense(out),
            ],
        )
    }
}

/// Builds the lattice prototype and output scales for `target`.
pub fn build_prototype(target: &dyn Fn(&[f64]) -> f64, p: &ApproxParams) -> Result<LatticeApproximator> {
    if p.n == 0 {
        return Err(Error::config("input dimension must be positive"));
    }
    if !(p.delta > 0.0 && p.delta.is_finite()) {
        return Err(Error::config(format!("delta must be positive, got {}", p.delta)));
    }
    if !(p.shift > 0.0) {
        return Err(Error::config(format!("shift c must be positive, got {}", p.shift)));
    }
    let ratio = p.radius / p.delta;
    let m = ratio.round();
    if !(m >= 1.0 && (ratio - m).abs() <= 1e-9 * m) {
        return Err(Error::config(format!(
            "radius {} is not a positive multiple of delta {}",
            p.radius, p.delta
        )));
    }
    let m = m as usize;
    let per_axis = match p.domain {
        Domain::PositiveOrthant => m,
        Domain::Symmetric => 2 * m,
    };
    let cell_count = (0..p.n).try_fold(1usize, |acc, _| acc.checked_mul(per_axis).filter(|&c| c <= MAX_CELLS));
    let Some(_) = cell_count else {
        return Err(Error::config(format!("{per_axis}^{} cells exceeds the limit of {MAX_CELLS}", p.n)));
    };
    let slopes = match &p.slopes {
        Some(s) => {
            if s.len() < m {
                return Err(Error::config(format!("need {m} slopes, got {}", s.len())));
            }
            s[..m].to_vec()
        }
        None => default_slopes(p.g_bound, m),
    };
    if slopes[0] <= 0.0
        || slopes.windows(2).any(|w| w[1] <= w[0])
        || slopes.iter().any(|&g| !(g < p.g_bound))
    {
        return Err(Error::config(format!(
            "slopes must satisfy 0 < g_1 < g_2 < ... < G = {}, got {slopes:?}",
            p.g_bound
        )));
    }
    // φ at each cell's lower edge: φ((k-1)δ) = δ Σ_{j<k} g_j
    let mut phi_lower = vec![0.0; m + 1];
    for k in 1..=m {
        phi_lower[k] = phi_lower[k - 1] + slopes[k - 1] * p.delta;
    }

    let positive = enumerate(p.n, &(1..=m as i64).collect::<Vec<_>>());
    let mut cells = positive.clone();
    if p.domain == Domain::Symmetric {
        let values: Vec<i64> = (1..=m as i64).chain((1..=m as i64).map(|k| -k)).collect();
        cells.extend(enumerate(p.n, &values).into_iter().filter(|c| c.iter().any(|&k| k < 0)));
    }
    let index: HashMap<Vec<i64>, usize> = cells.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();

    let mut weights = Vec::with_capacity(cells.len());
    let mut intercepts = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut w = Vec::with_capacity(p.n);
        let mut b = p.shift;
        for &k in cell {
            let k = k.unsigned_abs() as usize;
            let g = slopes[k - 1];
            w.push(g);
            b += phi_lower[k - 1] - g * (k - 1) as f64 * p.delta;
        }
        weights.push(w);
        intercepts.push(b);
    }

    let mut approx = LatticeApproximator {
        n: p.n,
        delta: p.delta,
        radius: p.radius,
        g_bound: p.g_bound,
        shift: p.shift,
        domain: p.domain,
        slopes,
        cells,
        index,
        weights,
        intercepts,
        gamma: Vec::new(),
    };
    let mut gamma = Vec::with_capacity(approx.rows());
    for cell in approx.cells.clone() {
        let anchor = approx.anchor(&cell);
        let t = target(&anchor);
        if !t.is_finite() {
            return Err(Error::data(format!("target is not finite at {anchor:?}")));
        }
        let row = approx.own_row(&cell).ok_or_else(|| Error::internal("mirror cell missing"))?;
        let p_anchor = approx.response(row, &anchor);
        // Positive cells have P ≥ c. Mirrored rows evaluated off the positive
        // orthant can reach zero, which leaves γ undefined.
        if !(p_anchor.abs() > 1e-12 * p.shift) {
            return Err(Error::config(format!(
                "prototype vanishes at the anchor of cell {cell:?}; choose another radius or delta"
            )));
        }
        gamma.push(t / p_anchor);
    }
    approx.gamma = gamma;
    // boundedness on a grid of cell centers
    for cell in &approx.cells {
        let c = approx.center(cell);
        if !target(&c).is_finite() {
            return Err(Error::data(format!("target is not finite at {c:?}")));
        }
    }
    Ok(approx)
}

fn enumerate(n: usize, values: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    out
}

/// `γ_{i*} · (Wx)_{i*}` with `i* = argmax(Wx)`.
pub fn eval_approx(a: &LatticeApproximator, x: &[f64]) -> Result<f64> {
    a.check_point(x)?;
    let i = a.winning_row(x);
    Ok(a.gamma[i] * a.response(i, x))
}

/// The closed form on the cell containing `x`: `γ_k (f_k(x) + c)`.
pub fn eval_cell(a: &LatticeApproximator, cell: &[i64], x: &[f64]) -> Result<f64> {
    let i = a.row_of(cell).ok_or_else(|| Error::data(format!("no cell {cell:?}")))?;
    let row = a.own_row(cell).ok_or_else(|| Error::internal("mirror cell missing"))?;
    Ok(a.gamma[i] * a.response(row, x))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionViolation {
    pub cell: Vec<i64>,
    pub expected_row: usize,
    pub winning_row: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionCheck {
    /// No violations on the positive orthant.
    pub consistent: bool,
    pub positive_violations: Vec<RegionViolation>,
    /// Cells with a negative coordinate whose center is won by another row.
    pub mixed_violations: Vec<RegionViolation>,
}

/// Checks that the argmax at every cell center picks that cell's own row.
pub fn region_consistency(a: &LatticeApproximator) -> RegionCheck {
    let mut positive_violations = Vec::new();
    let mut mixed_violations = Vec::new();
    for cell in &a.cells {
        let expected_row = a.own_row(cell).expect("mirror cell exists");
        let winning_row = a.winning_row(&a.center(cell));
        if winning_row != expected_row {
            let v = RegionViolation { cell: cell.clone(), expected_row, winning_row };
            if cell.iter().all(|&k| k > 0) {
                positive_violations.push(v);
            } else {
                mixed_violations.push(v);
            }
        }
    }
    RegionCheck { consistent: positive_violations.is_empty(), positive_violations, mixed_violations }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxReport {
    pub delta: f64,
    /// Midpoint-rule estimate of `∫ |T - T̂|²`.
    pub l2_error: f64,
    /// Probe points per cell per axis.
    pub grid_resolution: usize,
    /// Largest `|γ_k (f_k(a_k) + c) - T(a_k)|` over positive cells.
    pub anchor_max_abs_err: f64,
}

pub const REPORT_HEADER: &str = "delta,l2_error,anchor_max_abs_err";

impl ApproxReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.delta, self.l2_error, self.anchor_max_abs_err)
    }
}

pub fn reports_csv(reports: &[ApproxReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Midpoint offsets within one cell, as fractions of δ.
fn midpoints(points: usize) -> Vec<f64> {
    (0..points).map(|j| (j as f64 + 0.5) / points as f64).collect()
}

/// Probe points strictly inside `cell`, `points` per axis.
pub fn cell_probes(a: &LatticeApproximator, cell: &[i64], points: usize) -> Vec<Vec<f64>> {
    let offsets = midpoints(points);
    let mut out = vec![Vec::new()];
    for &k in cell {
        let lo = if k > 0 { (k - 1) as f64 * a.delta } else { k as f64 * a.delta };
        out = out
            .into_iter()
            .flat_map(|prefix| {
                offsets.iter().map(move |t| {
                    let mut next = prefix.clone();
                    next.push(lo + t * a.delta);
                    next
                })
            })
            .collect();
    }
    out
}

pub fn l2_error(a: &LatticeApproximator, target: &dyn Fn(&[f64]) -> f64, grid_points_per_dim: usize) -> Result<ApproxReport> {
    if grid_points_per_dim < 8 {
        return Err(Error::config(format!(
            "need at least 8 probe points per cell and axis, got {grid_points_per_dim}"
        )));
    }
    let volume = (a.delta / grid_points_per_dim as f64).powi(a.n as i32);
    let mut sum = 0.0;
    let mut anchor_max_abs_err: f64 = 0.0;
    for cell in &a.cells {
        for x in cell_probes(a, cell, grid_points_per_dim) {
            let e = target(&x) - eval_approx(a, &x)?;
            sum += e * e;
        }
        if cell.iter().all(|&k| k > 0) {
            let anchor = a.anchor(cell);
            anchor_max_abs_err = anchor_max_abs_err.max((eval_cell(a, cell, &anchor)? - target(&anchor)).abs());
        }
    }
    Ok(ApproxReport { delta: a.delta, l2_error: sum * volume, grid_resolution: grid_points_per_dim, anchor_max_abs_err })
}

/// Built-in targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// `1.5`
    Constant,
    /// `1 + Σ x_i`
    Linear,
    /// `Σ x_i²`
    Quadratic,
    /// `sin(2π Σ x_i)`
    Sine,
    /// `1` where `x_0 ≥ 0.55`, else `0`.
    Step,
}

pub const STEP_AT: f64 = 0.55;

impl Target {
    pub const ALL: [Target; 5] = [Target::Constant, Target::Linear, Target::Quadratic, Target::Sine, Target::Step];

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Target::Constant => 1.5,
            Target::Linear => 1.0 + x.iter().sum::<f64>(),
            Target::Quadratic => x.iter().map(|v| v * v).sum(),
            Target::Sine => (std::f64::consts::TAU * x.iter().sum::<f64>()).sin(),
            Target::Step => f64::from(u8::from(x[0] >= STEP_AT)),
        }
    }

    pub fn is_continuous(self) -> bool {
        self != Target::Step
    }

    pub fn as_fn(self) -> impl Fn(&[f64]) -> f64 {
        move |x| self.eval(x)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Constant => "constant",
            Target::Linear => "linear",
            Target::Quadratic => "quadratic",
            Target::Sine => "sine",
            Target::Step => "step",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.to_string() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown target {s:?}; expected constant, linear, quadratic, sine or step")))
    }
}

/// Builds one approximator per δ and reports its error.
pub fn convergence_sweep(
    target: Target,
    n: usize,
    deltas: &[f64],
    radius: f64,
    grid_points_per_dim: usize,
) -> Result<Vec<ApproxReport>> {
    let f = target.as_fn();
    deltas
        .iter()
        .map(|&d| {
            let a = build_prototype(&f, &ApproxParams::new(n, d, radius))?;
            l2_error(&a, &f, grid_points_per_dim)
        })
        .collect()
}

/// Runs random interior points through [`LatticeApproximator::to_network`]
/// and returns the largest difference from [`eval_approx`].
pub fn network_agreement(a: &LatticeApproximator, samples: usize, rng: &mut Rng) -> Result<f64> {
    let net = a.to_network()?;
    let lo = match a.domain {
        Domain::PositiveOrthant => 0.0,
        Domain::Symmetric => -a.radius,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..a.n).map(|_| rng.uniform(lo, a.radius)).collect();
        let (y, _) = net.forward(&Tensor::from_vec(x.clone())?, Mode::Infer, rng)?;
        worst = worst.max((y.data()[0] - eval_approx(a, &x)?).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> impl Fn(&[f64]) -> f64 {
        Target::Quadratic.as_fn()
    }

    #[test]
    fn single_cell() {
        let f = Target::Linear.as_fn();
        let a = build_prototype(&f, &ApproxParams::new(1, 0.5, 0.5)).unwrap();
        assert_eq!(a.rows(), 1);
        // γ = T(0) / c
        assert_eq!(a.gamma(), &[1.0]);
        for x in [0.0, 0.1, 0.37, 0.5] {
            assert!((eval_approx(&a, &[x]).unwrap() - (0.5 * x + 1.0)).abs() < 1e-15);
        }
        assert!(region_consistency(&a).consistent);
    }

    #[test]
    fn quadratic_table_matches_direct_transcription() {
        let a = build_prototype(&quad(), &ApproxParams::new(1, 0.25, 1.0)).unwrap();
        assert_eq!(a.rows(), 4);
        // chain f_1(x) = g_1 x, f_k((k-1)δ) = f_{k-1}((k-1)δ), ∇f_k = g_k
        let d = 0.25;
        let g = [0.5, 0.75, 0.875, 0.9375];
        let mut f_at_lower = 0.0;
        for k in 1..=4usize {
            let lower = (k - 1) as f64 * d;
            if k > 1 {
                f_at_lower += g[k - 2] * d;
            }
            let slope = g[k - 1];
            let intercept = f_at_lower - slope * lower;
            let gamma = lower * lower / (f_at_lower + 1.0);
            assert!((a.weights()[k - 1][0] - slope).abs() < 1e-15);
            assert!((a.intercepts()[k - 1] - (intercept + 1.0)).abs() < 1e-15, "row {k}");
            assert!((a.gamma()[k - 1] - gamma).abs() < 1e-15, "gamma {k}");
        }
    }

    #[test]
    fn anchors_interpolate_exactly() {
        let f = Target::Sine.as_fn();
        let a = build_prototype(&f, &ApproxParams::new(2, 0.125, 0.5)).unwrap();
        for cell in a.cells() {
            let anchor = a.anchor(cell);
            assert!((eval_cell(&a, cell, &anchor).unwrap() - f(&anchor)).abs() <= 1e-9);
            // limit from inside the cell
            let inside: Vec<f64> = anchor.iter().map(|v| v + 1e-12).collect();
            assert!((eval_approx(&a, &inside).unwrap() - f(&anchor)).abs() <= 1e-9);
        }
    }

    #[test]
    fn eval_matches_cell_closed_form_inside() {
        let f = Target::Sine.as_fn();
        let a = build_prototype(&f, &ApproxParams::new(2, 0.25, 1.0)).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..2000 {
            let x = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
            let cell = a.cell_of(&x).unwrap();
            let direct = eval_cell(&a, &cell, &x).unwrap();
            assert!((eval_approx(&a, &x).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_at_least_shift_and_rows_are_convex_hull() {
        let a = build_prototype(&quad(), &ApproxParams::new(3, 0.25, 0.75)).unwrap();
        assert_eq!(a.rows(), 27);
        assert!(region_consistency(&a).consistent);
        for cell in a.cells() {
            for x in cell_probes(&a, cell, 3) {
                let p = a.response(a.winning_row(&x), &x);
                assert!(p >= a.shift());
            }
        }
    }

    #[test]
    fn four_cells_consistent_by_enumeration() {
        let a = build_prototype(&quad(), &ApproxParams::new(1, 0.25, 1.0)).unwrap();
        for (i, center) in [0.125, 0.375, 0.625, 0.875].into_iter().enumerate() {
            let responses: Vec<f64> = (0..4).map(|r| a.response(r, &[center])).collect();
            let best = (0..4).fold(0, |b, r| if responses[r] > responses[b] { r } else { b });
            assert_eq!(best, i);
        }
    }

    #[test]
    fn build_errors() {
        let f = quad();
        let mut p = ApproxParams::new(1, 0.3, 1.0);
        assert!(matches!(build_prototype(&f, &p), Err(Error::Config(_))));
        p.delta = 0.25;
        p.slopes = Some(vec![0.9, 0.8, 0.7, 0.6]);
        assert!(matches!(build_prototype(&f, &p), Err(Error::Config(_))));
        p.slopes = Some(vec![0.1, 0.2, 0.3, 1.5]);
        assert!(matches!(build_prototype(&f, &p), Err(Error::Config(_))));
        p.slopes = None;
        let unbounded = |x: &[f64]| 1.0 / (x[0] - 0.375);
        assert!(matches!(build_prototype(&unbounded, &p), Err(Error::Data(_))));
        let a = build_prototype(&f, &p).unwrap();
        assert!(matches!(eval_approx(&a, &[1.5]), Err(Error::Data(_))));
        assert!(matches!(eval_approx(&a, &[-0.1]), Err(Error::Data(_))));
        assert!(matches!(l2_error(&a, &f, 4), Err(Error::Config(_))));
    }

    #[test]
    fn exact_affine_target() {
        let g1 = 0.5;
        let f = move |x: &[f64]| 2.0 * (g1 * x[0] + 1.0);
        let a = build_prototype(&f, &ApproxParams::new(1, 0.5, 0.5)).unwrap();
        assert_eq!(a.gamma(), &[2.0]);
        assert!(l2_error(&a, &f, 64).unwrap().l2_error < 1e-18);
    }

    #[test]
    fn quadratic_and_step_errors_decrease() {
        for target in [Target::Quadratic, Target::Step] {
            let r = convergence_sweep(target, 1, &[0.5, 0.25, 0.125], 1.0, 64).unwrap();
            assert!(r[0].l2_error > r[1].l2_error && r[1].l2_error > r[2].l2_error, "{target}: {r:?}");
            assert!(r.iter().all(|x| x.anchor_max_abs_err <= 1e-9));
        }
    }

    #[test]
    fn step_error_tracks_jump_cell_width() {
        // T̂ = 0 on [0.5, 1.0] for δ = 0.5, so the error is the width past the jump
        let r = convergence_sweep(Target::Step, 1, &[0.5], 1.0, 200).unwrap();
        assert!((r[0].l2_error - 0.45).abs() < 0.01);
    }

    #[test]
    fn oscillation_bounds_hold() {
        for target in [Target::Quadratic, Target::Sine, Target::Linear] {
            let f = target.as_fn();
            for n in [1, 2] {
                let a = build_prototype(&f, &ApproxParams::new(n, 0.125, 0.5)).unwrap();
                let g = a.g_bound();
                let r = a.gamma().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for cell in a.cells() {
                    let mut probes = cell_probes(&a, cell, 9);
                    probes.push(a.anchor(cell));
                    let own = a.row_of(cell).unwrap();
                    let ps: Vec<f64> = probes.iter().map(|x| a.response(own, x)).collect();
                    let range = ps.iter().cloned().fold(f64::MIN, f64::max) - ps.iter().cloned().fold(f64::MAX, f64::min);
                    let grad: f64 = a.weights()[own].iter().map(|w| w * w).sum::<f64>().sqrt();
                    let bound10 = grad * (n as f64).sqrt() * a.delta();
                    assert!(range <= bound10 + 1e-12);
                    assert!(bound10 < n as f64 * g * a.delta());

                    let ts: Vec<f64> = probes.iter().map(|x| f(x)).collect();
                    let eps0 = ts.iter().cloned().fold(f64::MIN, f64::max) - ts.iter().cloned().fold(f64::MAX, f64::min);
                    let bound12 = 1.01 * (eps0 + r * n as f64 * g * a.delta());
                    for x in &probes[..probes.len() - 1] {
                        assert!((f(x) - eval_approx(&a, x).unwrap()).abs() < bound12);
                    }
                }
            }
        }
    }

    #[test]
    fn network_evaluation_agrees() {
        let f = Target::Sine.as_fn();
        let mut rng = Rng::new(7);
        for n in [1, 2] {
            let a = build_prototype(&f, &ApproxParams::new(n, 0.25, 1.0)).unwrap();
            assert!(network_agreement(&a, 500, &mut rng).unwrap() < 1e-12);
        }
        let single = build_prototype(&f, &ApproxParams::new(1, 1.0, 1.0)).unwrap();
        assert!(network_agreement(&single, 50, &mut rng).unwrap() < 1e-12);
    }

    #[test]
    fn symmetric_domain_mirrors_rows() {
        let f = quad();
        let p = ApproxParams { domain: Domain::Symmetric, ..ApproxParams::new(2, 0.25, 0.5) };
        let a = build_prototype(&f, &p).unwrap();
        assert_eq!(a.rows(), 16);
        assert!(a.cells()[..4].iter().all(|c| c.iter().all(|&k| k > 0)));
        let neg = a.row_of(&[-2, 1]).unwrap();
        let pos = a.row_of(&[2, 1]).unwrap();
        assert_eq!(a.weights()[neg], a.weights()[pos]);
        assert_eq!(a.anchor(&[-2, 1]), vec![-0.25, 0.0]);
        let check = region_consistency(&a);
        assert!(check.consistent);
        // the literal mirrored rows do not win their own cells off the positive orthant
        assert!(!check.mixed_violations.is_empty());
        assert!(eval_approx(&a, &[-0.4, -0.1]).is_ok());
        let mut rng = Rng::new(1);
        assert!(network_agreement(&a, 200, &mut rng).unwrap() < 1e-12);
    }

    #[test]
    fn target_names_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
        }
        assert!("cubic".parse::<Target>().is_err());
    }

    #[test]
    fn report_csv_header() {
        let r = convergence_sweep(Target::Constant, 1, &[0.5], 1.0, 8).unwrap();
        let csv = reports_csv(&r);
        assert!(csv.starts_with("delta,l2_error,anchor_max_abs_err\n0.5,"));
    }
}
