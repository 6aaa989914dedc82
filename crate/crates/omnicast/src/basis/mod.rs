//! Approximate linear bases `s: [0,1]^d -> [0,1]^n`.
//!
//! Each function is stored rescaled into `[0,1]`; `raw = lo + span * stored`
//! recovers the natural function, and lifting folds `lo` into the offset.

pub mod leontief;
pub mod perturbed;

pub use crate::linearize::{audit_basis, BasisAudit};

use serde::{Deserialize, Serialize};

use crate::domain::{check_outcome, InnerMap};
use crate::error::{Error, Result};
use leontief::LeontiefBasis;

pub const DEFAULT_BUDGET: usize = 1 << 18;
pub const DEFAULT_K_MAX: usize = 40;

/// Everything needed to rebuild a basis bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum BasisDescriptor {
    Grid { lipschitz: f64, delta: f64, d: usize },
    Lp { p: u32, d: usize },
    Monomial {
        beta: u32,
        d: usize,
        g: InnerMap,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default = "one")]
        r_bound: f64,
    },
    ExpTaylor { d: usize, g: InnerMap, scale: f64, r_bound: f64, c_bound: f64, delta: f64 },
    Leontief {
        d: usize,
        lipschitz: f64,
        delta: f64,
        seed: u64,
        #[serde(default = "default_c0")]
        c0: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_c0() -> f64 {
    perturbed::DEFAULT_C0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    /// Per-axis cell count of a grid basis.
    pub cells: Option<usize>,
    /// Taylor order.
    pub k: Option<usize>,
    /// Leontief discretization and grid step.
    pub m: Option<usize>,
    pub s: Option<usize>,
    pub mu: Option<f64>,
    pub mu_clamped: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
enum Family {
    Grid { cells: usize },
    Lp { p: u32 },
    Products { g: InnerMap, tuples: Vec<Vec<usize>> },
    Leontief(Box<LeontiefBasis>),
}

#[derive(Clone, Debug)]
pub struct Basis {
    pub descriptor: BasisDescriptor,
    pub d: usize,
    pub n: usize,
    pub lambda: f64,
    pub delta: f64,
    pub meta: BasisMeta,
    ranges: Vec<(f64, f64)>,
    family: Family,
}

impl Basis {
    pub fn build(descriptor: &BasisDescriptor) -> Result<Basis> {
        Basis::build_with_budget(descriptor, DEFAULT_BUDGET)
    }

    pub fn build_with_budget(descriptor: &BasisDescriptor, budget: usize) -> Result<Basis> {
        match descriptor {
            BasisDescriptor::Grid { lipschitz, delta, d } => grid_basis_with(*lipschitz, *delta, *d, budget),
            BasisDescriptor::Lp { p, d } => lp_basis_with(*p, *d, budget),
            BasisDescriptor::Monomial { beta, d, g, scale, r_bound } => {
                monomial_basis_with(*beta, *d, *g, *scale, *r_bound, budget)
            }
            BasisDescriptor::ExpTaylor { d, g, scale, r_bound, c_bound, delta } => {
                exp_taylor_basis_with(*d, *g, *scale, *r_bound, *c_bound, *delta, DEFAULT_K_MAX, budget)
            }
            BasisDescriptor::Leontief { d, lipschitz, delta, seed, c0 } => {
                leontief_basis_with(*d, *lipschitz, *delta, *seed, *c0, budget)
            }
        }
    }

    /// Raw `(lo, span)` of function `i`.
    pub fn raw_range(&self, i: usize) -> (f64, f64) {
        self.ranges[i]
    }

    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_outcome(y, self.d)?;
        let mut out = vec![0.0; self.n];
        self.eval_raw_into(y, &mut out);
        for (v, &(lo, span)) in out.iter_mut().zip(&self.ranges) {
            *v = (*v - lo) / span;
        }
        Ok(out)
    }

    pub fn eval_raw(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_outcome(y, self.d)?;
        let mut out = vec![0.0; self.n];
        self.eval_raw_into(y, &mut out);
        Ok(out)
    }

    fn eval_raw_into(&self, y: &[f64], out: &mut [f64]) {
        match &self.family {
            Family::Grid { cells } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[grid_cell(y, *cells)] = 1.0;
            }
            Family::Lp { p } => {
                let p = *p as usize;
                for (i, &yi) in y.iter().enumerate() {
                    let mut power = 1.0;
                    for k in 0..p {
                        power *= -yi;
                        out[i * p + k] = power;
                    }
                }
            }
            Family::Products { g, tuples } => {
                let gy: Vec<f64> = y.iter().map(|&yi| g.apply(yi)).collect();
                for (slot, t) in out.iter_mut().zip(tuples) {
                    *slot = t.iter().map(|&i| gy[i]).product();
                }
            }
            Family::Leontief(basis) => basis.eval_raw_into(y, out),
        }
    }

    /// Grid cell representatives `((i_1+1)/m, ..)`, one per one-hot function.
    pub fn cell_points(&self) -> Option<Vec<Vec<f64>>> {
        let Family::Grid { cells } = self.family else { return None };
        Some(
            (0..self.n)
                .map(|flat| {
                    let mut point = vec![0.0; self.d];
                    let mut rest = flat;
                    for k in (0..self.d).rev() {
                        point[k] = ((rest % cells) + 1) as f64 / cells as f64;
                        rest /= cells;
                    }
                    point
                })
                .collect(),
        )
    }

    pub(crate) fn product_tuples(&self) -> Option<&[Vec<usize>]> {
        match &self.family {
            Family::Products { tuples, .. } => Some(tuples),
            _ => None,
        }
    }

    pub(crate) fn leontief(&self) -> Option<&LeontiefBasis> {
        match &self.family {
            Family::Leontief(b) => Some(b),
            _ => None,
        }
    }
}

fn grid_cell(y: &[f64], cells: usize) -> usize {
    y.iter().fold(0usize, |acc, &yi| {
        let k = ((yi * cells as f64).round() as usize).clamp(1, cells) - 1;
        acc * cells + k
    })
}

fn checked_size(base: usize, exp: usize, budget: usize) -> Result<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.saturating_mul(base);
    }
    if acc > budget {
        return Err(Error::Budget { size: acc, budget });
    }
    Ok(acc)
}

pub fn grid_basis(lipschitz: f64, delta: f64, d: usize) -> Result<Basis> {
    grid_basis_with(lipschitz, delta, d, DEFAULT_BUDGET)
}

/// One-hot indicators of the rounding cell over `{1/m, .., 1}^d`, `m = ceil(L/delta)`.
pub fn grid_basis_with(lipschitz: f64, delta: f64, d: usize, budget: usize) -> Result<Basis> {
    if !(lipschitz > 0.0) || !(delta > 0.0) || d == 0 {
        return Err(Error::Parameter("grid basis needs L > 0, delta > 0, d >= 1".into()));
    }
    let cells = ((lipschitz / delta) - 1e-9).ceil().max(1.0) as usize;
    let n = checked_size(cells, d, budget)?;
    Ok(Basis {
        descriptor: BasisDescriptor::Grid { lipschitz, delta, d },
        d,
        n,
        lambda: 1.0,
        delta: lipschitz / cells as f64,
        meta: BasisMeta { cells: Some(cells), ..Default::default() },
        ranges: vec![(0.0, 1.0); n],
        family: Family::Grid { cells },
    })
}

pub fn lp_basis(p: u32, d: usize) -> Result<Basis> {
    lp_basis_with(p, d, DEFAULT_BUDGET)
}

/// `(-y_i)^k` for every coordinate `i` and `k = 1..p`, coordinate-major.
pub fn lp_basis_with(p: u32, d: usize, budget: usize) -> Result<Basis> {
    if p == 0 || d == 0 {
        return Err(Error::Parameter("L_p basis needs p >= 1 and d >= 1".into()));
    }
    let n = (p as usize).saturating_mul(d);
    if n > budget {
        return Err(Error::Budget { size: n, budget });
    }
    let ranges = (0..d)
        .flat_map(|_| (1..=p).map(|k| if k % 2 == 1 { (-1.0, 1.0) } else { (0.0, 1.0) }))
        .collect();
    // At a = 1 every binomial weight is 1, giving 2^p - 1 per coordinate.
    let lambda = d as f64 * (2f64.powi(p as i32) - 1.0);
    Ok(Basis {
        descriptor: BasisDescriptor::Lp { p, d },
        d,
        n,
        lambda,
        delta: 0.0,
        meta: BasisMeta::default(),
        ranges,
        family: Family::Lp { p },
    })
}

fn tuples(d: usize, len: usize) -> Vec<Vec<usize>> {
    let count = d.pow(len as u32);
    (0..count)
        .map(|flat| {
            let mut t = vec![0usize; len];
            let mut rest = flat;
            for k in (0..len).rev() {
                t[k] = rest % d;
                rest /= d;
            }
            t
        })
        .collect()
}

/// Interval hull of a product of `len` values each in `[lo, hi]`.
fn product_range(lo: f64, hi: f64, len: usize) -> (f64, f64) {
    let (mut a, mut b) = (1.0f64, 1.0f64);
    for _ in 0..len {
        let c = [a * lo, a * hi, b * lo, b * hi];
        a = c.iter().cloned().fold(f64::INFINITY, f64::min);
        b = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    (a, b)
}

fn product_ranges(g: &InnerMap, tuples: &[Vec<usize>]) -> Vec<(f64, f64)> {
    let (glo, ghi) = g.range();
    tuples
        .iter()
        .map(|t| {
            let (lo, hi) = product_range(glo, ghi, t.len());
            let span = hi - lo;
            (lo, if span > 0.0 { span } else { 1.0 })
        })
        .collect()
}

pub fn monomial_basis(beta: u32, d: usize, g: InnerMap) -> Result<Basis> {
    monomial_basis_with(beta, d, g, 1.0, 1.0, DEFAULT_BUDGET)
}

/// Products `g(y_{i_1}) .. g(y_{i_beta})` over all ordered index tuples.
pub fn monomial_basis_with(beta: u32, d: usize, g: InnerMap, scale: f64, r_bound: f64, budget: usize) -> Result<Basis> {
    if beta == 0 || d == 0 {
        return Err(Error::Parameter("monomial basis needs beta >= 1 and d >= 1".into()));
    }
    let n = checked_size(d, beta as usize, budget)?;
    let tuples = tuples(d, beta as usize);
    let ranges = product_ranges(&g, &tuples);
    let span = ranges.iter().map(|r| r.1).fold(0.0, f64::max);
    let lambda = scale * (r_bound * d as f64).powi(beta as i32) * span;
    Ok(Basis {
        descriptor: BasisDescriptor::Monomial { beta, d, g, scale, r_bound },
        d,
        n,
        lambda,
        delta: 0.0,
        meta: BasisMeta::default(),
        ranges,
        family: Family::Products { g, tuples },
    })
}

/// Smallest `k` with `A e^C C^(k+1) / (k+1)! <= delta`.
pub fn taylor_order(scale: f64, c_bound: f64, delta: f64, k_max: usize) -> Option<usize> {
    let mut term = scale * c_bound.exp() * c_bound;
    for k in 0..=k_max {
        // term = A e^C C^(k+1) / (k+1)!
        if term <= delta {
            return Some(k);
        }
        term *= c_bound / (k + 2) as f64;
    }
    None
}

pub fn exp_taylor_basis(d: usize, g: InnerMap, scale: f64, r_bound: f64, c_bound: f64, delta: f64) -> Result<Basis> {
    exp_taylor_basis_with(d, g, scale, r_bound, c_bound, delta, DEFAULT_K_MAX, DEFAULT_BUDGET)
}

/// Products of length `1..=k` for the truncated expansion of `-A exp(x)`.
#[allow(clippy::too_many_arguments)]
pub fn exp_taylor_basis_with(
    d: usize,
    g: InnerMap,
    scale: f64,
    r_bound: f64,
    c_bound: f64,
    delta: f64,
    k_max: usize,
    budget: usize,
) -> Result<Basis> {
    if d == 0 || !(scale > 0.0) || !(delta > 0.0) || !(c_bound >= 0.0) {
        return Err(Error::Parameter("Taylor basis needs d >= 1, A > 0, delta > 0, C >= 0".into()));
    }
    let k = taylor_order(scale, c_bound, delta, k_max)
        .ok_or_else(|| Error::Parameter(format!("no Taylor order <= {k_max} reaches delta = {delta}")))?;
    let k = k.max(1);
    let mut n = 0usize;
    for len in 1..=k {
        n = n.saturating_add(checked_size(d, len, budget)?);
        if n > budget {
            return Err(Error::Budget { size: n, budget });
        }
    }
    let all: Vec<Vec<usize>> = (1..=k).flat_map(|len| tuples(d, len)).collect();
    let ranges = product_ranges(&g, &all);
    let remainder = scale * c_bound.exp() * c_bound.powi(k as i32 + 1) / factorial(k + 1);
    let lambda = scale * (r_bound * d as f64 * g.max_abs()).exp();
    Ok(Basis {
        descriptor: BasisDescriptor::ExpTaylor { d, g, scale, r_bound, c_bound, delta },
        d,
        n,
        lambda,
        delta: remainder,
        meta: BasisMeta { k: Some(k), ..Default::default() },
        ranges,
        family: Family::Products { g, tuples: all },
    })
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

pub fn leontief_basis(d: usize, lipschitz: f64, delta: f64, seed: u64) -> Result<Basis> {
    leontief_basis_with(d, lipschitz, delta, seed, perturbed::DEFAULT_C0, DEFAULT_BUDGET)
}

pub fn leontief_basis_with(d: usize, lipschitz: f64, delta: f64, seed: u64, c0: f64, budget: usize) -> Result<Basis> {
    if !(delta > 0.0 && delta < 1.0) || !(lipschitz > 0.0) {
        return Err(Error::Parameter("Leontief basis needs 0 < delta < 1 and L > 0".into()));
    }
    let m_real = 1.0 / delta;
    let m = m_real.round();
    if (m - m_real).abs() > 1e-9 {
        return Err(Error::Parameter(format!("1/delta = {m_real} is not an integer")));
    }
    let inner = LeontiefBasis::new(d, lipschitz, m as usize, seed, c0, budget)?;
    let ranges = inner.raw_ranges();
    // Worst slope vector: every coefficient sum and indicator error weight.
    let side = (inner.m - 1) as usize;
    let unit = lipschitz * delta * delta;
    let mut lambda: f64 = 0.0;
    let mut error_weight: f64 = 0.0;
    for flat in 0..side.pow(d as u32) {
        let mut b = vec![0i64; d];
        let mut rest = flat;
        for k in (0..d).rev() {
            b[k] = (rest % side) as i64 + 1;
            rest /= side;
        }
        let (_, r, err) = inner.assemble(&b)?;
        let l1: f64 = r.iter().zip(&ranges).map(|(c, &(_, span))| (c * span).abs()).sum();
        lambda = lambda.max(unit * l1);
        error_weight = error_weight.max(err);
    }
    let certified = 2.0 * lipschitz * delta + unit * error_weight;
    let meta = BasisMeta {
        m: Some(m as usize),
        s: Some(inner.s as usize),
        mu: Some(inner.mu),
        mu_clamped: Some(inner.mu_clamped),
        seed: Some(seed),
        ..Default::default()
    };
    Ok(Basis {
        descriptor: BasisDescriptor::Leontief { d, lipschitz, delta, seed, c0 },
        d,
        n: inner.n,
        lambda,
        delta: certified,
        meta,
        ranges,
        family: Family::Leontief(Box::new(inner)),
    })
}
