//! Multivariate ReLU identities, dyadic decompositions, and the Leontief basis
//! built from them.
//!
//! Integer coordinates follow the discretized picture: `z_j = clamp(round(m y_j), 1, m-1)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::perturbed::{perturbed_identity_with, PerturbedIdentity};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MReluSpec {
    pub thresholds: Vec<i64>,
    pub m: i64,
}

impl MReluSpec {
    pub fn new(thresholds: Vec<i64>, m: i64) -> Self {
        MReluSpec { thresholds, m }
    }
}

pub fn mrelu_eval(spec: &MReluSpec, z: &[i64]) -> Result<i64> {
    if z.len() != spec.thresholds.len() {
        return Err(Error::Dimension { expected: spec.thresholds.len(), got: z.len() });
    }
    Ok(mrelu(&spec.thresholds, z))
}

fn mrelu(thresholds: &[i64], z: &[i64]) -> i64 {
    z.iter().zip(thresholds).map(|(zj, ij)| zj - ij).fold(0, i64::max)
}

/// Signed MReLU combination equal to the point indicator `1[z = i]` on
/// `{1..m-1}^d`. Terms sharing thresholds are merged in first-seen order and
/// zero totals dropped.
pub fn indicator_via_mrelu(i: &[i64], m: i64) -> Result<Vec<(MReluSpec, i64)>> {
    let d = i.len();
    if d == 0 {
        return Err(Error::Parameter("indicator needs at least one coordinate".into()));
    }
    if i.iter().any(|&ij| ij < 1 || ij > m - 1) {
        return Err(Error::Parameter(format!("indicator point {i:?} outside {{1..{}}}^d", m - 1)));
    }
    let mut terms: Vec<(Vec<i64>, i64)> = Vec::new();
    let mut push = |t: Vec<i64>, c: i64| match terms.iter_mut().find(|(u, _)| *u == t) {
        Some(entry) => entry.1 += c,
        None => terms.push((t, c)),
    };
    let full = 1usize << d;
    for mask in (0..full).rev() {
        let sigma = bits(mask, d);
        let ones: i64 = sigma.iter().sum();
        let sign = if (d as i64 + ones) % 2 == 0 { 1 } else { -1 };
        push(i.iter().zip(&sigma).map(|(a, s)| a + s).collect(), sign);
    }
    for mask in 0..full {
        let mut sigma = bits(mask, d);
        sigma.reverse();
        let ones: i64 = sigma.iter().sum();
        let sign = if (1 + ones) % 2 == 0 { 1 } else { -1 };
        push(i.iter().zip(&sigma).map(|(a, s)| a - s).collect(), sign);
    }
    Ok(terms
        .into_iter()
        .filter(|(_, c)| *c != 0)
        .map(|(t, c)| (MReluSpec::new(t, m), c))
        .collect())
}

/// `sigma` bits with the first coordinate as the most significant bit.
fn bits(mask: usize, d: usize) -> Vec<i64> {
    (0..d).map(|k| ((mask >> (d - 1 - k)) & 1) as i64).collect()
}

/// Coefficients `c_i` with `sum_i c_i MReLU_i(z) = min_j b_j z_j` on `{1..m-1}^d`,
/// over thresholds `i` in `{0..m}^d`. Thresholds ruled out by the zero-coefficient
/// condition are skipped; computed zeros are dropped.
pub fn leontief_coeffs(b: &[i64], m: i64) -> Result<BTreeMap<Vec<i64>, i64>> {
    let d = b.len();
    if d == 0 {
        return Err(Error::Parameter("coefficient vector is empty".into()));
    }
    if b.iter().any(|&bj| bj < 1 || bj > m - 1) {
        return Err(Error::Parameter(format!("coefficients {b:?} outside {{1..{}}}", m - 1)));
    }
    let g = |z: &[i64]| z.iter().zip(b).map(|(zj, bj)| zj * bj).min().unwrap();
    let inside = |z: &[i64]| z.iter().all(|&zj| zj >= 1 && zj <= m - 1);
    let side = (m + 1) as usize;
    let total = side.pow(d as u32);
    let mut out = BTreeMap::new();
    let mut i = vec![0i64; d];
    let mut shifted = vec![0i64; d];
    for flat in 0..total {
        let mut rest = flat;
        for k in (0..d).rev() {
            i[k] = (rest % side) as i64;
            rest /= side;
        }
        if provably_zero(&i, b, m) {
            continue;
        }
        let mut c = 0i64;
        for mask in 0..(1usize << d) {
            let sigma = bits(mask, d);
            let ones: i64 = sigma.iter().sum();
            for k in 0..d {
                shifted[k] = i[k] - sigma[k];
            }
            if inside(&shifted) {
                c += if (d as i64 + ones) % 2 == 0 { 1 } else { -1 } * g(&shifted);
            }
            for k in 0..d {
                shifted[k] = i[k] + sigma[k];
            }
            if inside(&shifted) {
                c += if (1 + ones) % 2 == 0 { 1 } else { -1 } * g(&shifted);
            }
        }
        if c != 0 {
            out.insert(i.clone(), c);
        }
    }
    Ok(out)
}

fn provably_zero(i: &[i64], b: &[i64], m: i64) -> bool {
    let d = i.len();
    let mid = |x: i64| (2..=m - 2).contains(&x);
    for j1 in 0..d {
        if !mid(i[j1]) {
            continue;
        }
        for j2 in j1 + 1..d {
            if mid(i[j2]) && (b[j1] * i[j1] - b[j2] * i[j2]).abs() >= b[j1].max(b[j2]) {
                return true;
            }
        }
    }
    false
}

/// A transformed coordinate of `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "coord", rename_all = "kebab-case")]
pub enum Coord {
    /// `z_axis`.
    Axis { axis: usize },
    /// `z_axis - z_other + m`.
    Diff { axis: usize, other: usize },
}

impl Coord {
    pub fn value(&self, z: &[i64], m: i64) -> i64 {
        match *self {
            Coord::Axis { axis } => z[axis],
            Coord::Diff { axis, other } => z[axis] - z[other] + m,
        }
    }
}

/// `1[lo <= coord(z) <= hi]`, 1-based, within `{1..2m}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalFactor {
    pub coord: Coord,
    pub lo: i64,
    pub hi: i64,
}

/// Product of interval indicators over the coordinates of one difference space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperRect {
    pub axis: usize,
    pub m: i64,
    pub factors: Vec<IntervalFactor>,
}

impl HyperRect {
    pub fn contains(&self, z: &[i64]) -> bool {
        self.factors.iter().all(|f| {
            let v = f.coord.value(z, self.m);
            f.lo <= v && v <= f.hi
        })
    }

    pub fn is_empty(&self) -> bool {
        self.factors.iter().any(|f| f.lo > f.hi)
    }
}

/// `MReLU_i - MReLU_{i + e_axis}` as a product of interval indicators; valid on
/// `z` in `{1..m}^d`. Factor order: the axis coordinate, then differences against
/// every other coordinate in ascending order.
pub fn mrelu_adjacent_diff(i: &[i64], axis: usize, m: i64) -> HyperRect {
    let mut factors = vec![IntervalFactor { coord: Coord::Axis { axis }, lo: i[axis] + 1, hi: m }];
    for other in 0..i.len() {
        if other != axis {
            factors.push(IntervalFactor {
                coord: Coord::Diff { axis, other },
                lo: i[axis] - i[other] + 1 + m,
                hi: 2 * m,
            });
        }
    }
    HyperRect { axis, m, factors }
}

/// `[a 2^h, (a+1) 2^h - 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub a: u64,
    pub h: u32,
}

impl DyadicInterval {
    pub fn lo(&self) -> u64 {
        self.a << self.h
    }

    pub fn hi(&self) -> u64 {
        ((self.a + 1) << self.h) - 1
    }
}

/// Greedy cover of `[lo, hi]` by the largest aligned blocks, left to right.
pub fn dyadic_decompose(lo: u64, hi: u64, range_max: u64) -> Result<Vec<DyadicInterval>> {
    if lo > hi {
        return Err(Error::Parameter(format!("empty interval [{lo}, {hi}]")));
    }
    if !range_max.is_power_of_two() || hi >= range_max {
        return Err(Error::Parameter(format!("[{lo}, {hi}] does not fit range {range_max}")));
    }
    let mut out = Vec::new();
    let mut start = lo;
    while start <= hi {
        let mut h = if start == 0 { range_max.trailing_zeros() } else { start.trailing_zeros() };
        while start + (1u64 << h) - 1 > hi {
            h -= 1;
        }
        out.push(DyadicInterval { a: start >> h, h });
        start += 1u64 << h;
    }
    Ok(out)
}

/// Default `mu` for the indicator blocks, before clamping.
pub fn default_mu(d: usize, m: usize) -> f64 {
    let (df, mf) = (d as f64, m as f64);
    let delta = 1.0 / mf;
    delta * delta
        / (12f64.powi(d as i32 + 1) * df * mf.powf(df / (df + 2.0)) * 2f64.powi(d as i32) * mf.ln().powi(d as i32))
}

pub const MU_FLOOR: f64 = 1e-4;

/// Discretized Leontief basis: grid MReLUs plus dyadic-cell indicator blocks per
/// coordinate-difference space.
#[derive(Clone, Debug)]
pub struct LeontiefBasis {
    pub d: usize,
    pub m: i64,
    pub s: i64,
    pub lipschitz: f64,
    pub mu: f64,
    pub mu_clamped: bool,
    /// Side of the 0-based `w` range, a power of two `>= 2m`.
    pub range: u64,
    pub log_range: u32,
    /// Grid thresholds of the MReLU part, row-major.
    pub grid: Vec<Vec<i64>>,
    grid_side: usize,
    grid_span: Vec<f64>,
    /// One matrix per level vector, shared across spaces.
    blocks: Vec<PerturbedIdentity>,
    /// Start of each `(space, level)` block within the function list.
    offsets: Vec<usize>,
    pub n: usize,
    pub max_gram_error: f64,
}

impl LeontiefBasis {
    pub fn new(d: usize, lipschitz: f64, m: usize, seed: u64, c0: f64, budget: usize) -> Result<Self> {
        if d == 0 || m < 3 {
            return Err(Error::Parameter("Leontief basis needs d >= 1 and m >= 3".into()));
        }
        let mi = m as i64;
        let s = (m as f64).powf(d as f64 / (d as f64 + 2.0)).ceil() as i64;
        let raw_mu = default_mu(d, m);
        let (mu, mu_clamped) = if raw_mu < MU_FLOOR { (MU_FLOOR, true) } else { (raw_mu, false) };
        let range = (2 * m as u64).next_power_of_two();
        let log_range = range.trailing_zeros();
        let per_axis: Vec<i64> = (0..=mi).step_by(s as usize).collect();
        let grid_side = per_axis.len();
        let mut grid = Vec::new();
        let mut grid_span = Vec::new();
        for flat in 0..grid_side.pow(d as u32) {
            let mut t = vec![0i64; d];
            let mut rest = flat;
            for k in (0..d).rev() {
                t[k] = per_axis[rest % grid_side];
                rest /= grid_side;
            }
            let top = (mi - 1 - t.iter().min().unwrap()).max(0);
            grid_span.push(if top == 0 { 1.0 } else { top as f64 });
            grid.push(t);
        }
        let levels = (log_range as usize + 1).pow(d as u32);
        let mut blocks = Vec::with_capacity(levels);
        let mut total = grid.len();
        for level in 0..levels {
            let h = level_vector(level, d, log_range);
            let cells: usize = h.iter().map(|&hr| (range >> hr) as usize).product();
            total += d * target_size(cells, mu, c0);
            if total > budget {
                return Err(Error::Budget { size: total, budget });
            }
            blocks.push(perturbed_identity_with(cells, mu, seed.wrapping_add(level as u64), c0)?);
        }
        let mut offsets = Vec::with_capacity(d * levels);
        let mut n = grid.len();
        for _space in 0..d {
            for block in &blocks {
                offsets.push(n);
                n += block.k;
            }
        }
        let max_gram_error = blocks
            .iter()
            .map(|b| b.max_off_diagonal.max(b.max_diagonal_error))
            .fold(0.0, f64::max);
        Ok(LeontiefBasis {
            d,
            m: mi,
            s,
            lipschitz,
            mu,
            mu_clamped,
            range,
            log_range,
            grid,
            grid_side,
            grid_span,
            blocks,
            offsets,
            n,
            max_gram_error,
        })
    }

    pub fn discretize(&self, y: &[f64]) -> Vec<i64> {
        y.iter().map(|&yj| ((yj * self.m as f64).round() as i64).clamp(1, self.m - 1)).collect()
    }

    /// 0-based coordinates of `z` in difference space `axis`.
    fn space_coords(&self, z: &[i64], axis: usize) -> Vec<u64> {
        let mut w = Vec::with_capacity(self.d);
        w.push((z[axis] - 1) as u64);
        for other in 0..self.d {
            if other != axis {
                w.push((z[axis] - z[other] + self.m - 1) as u64);
            }
        }
        w
    }

    fn cell_index(&self, w: &[u64], h: &[u32]) -> usize {
        let mut idx = 0usize;
        for (wr, &hr) in w.iter().zip(h) {
            idx = idx * (self.range >> hr) as usize + (wr >> hr) as usize;
        }
        idx
    }

    /// Raw `[lo, span]` of each function (MReLU spans, then `[0, 1]`).
    pub fn raw_ranges(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self.grid_span.iter().map(|&s| (0.0, s)).collect();
        out.resize(self.n, (0.0, 1.0));
        out
    }

    /// Raw function values: MReLU on the grid, then the shifted indicator blocks.
    pub fn eval_raw_into(&self, y: &[f64], out: &mut [f64]) {
        let z = self.discretize(y);
        for (slot, t) in out.iter_mut().zip(&self.grid) {
            *slot = mrelu(t, &z) as f64;
        }
        let levels = self.blocks.len();
        for axis in 0..self.d {
            let w = self.space_coords(&z, axis);
            for (level, block) in self.blocks.iter().enumerate() {
                let h = level_vector(level, self.d, self.log_range);
                let row = block.row(self.cell_index(&w, &h));
                let start = self.offsets[axis * levels + level];
                for (slot, v) in out[start..start + block.k].iter_mut().zip(row) {
                    *slot = (1.0 + v) / 2.0;
                }
            }
        }
    }

    fn grid_index(&self, t: &[i64]) -> usize {
        t.iter().fold(0usize, |acc, &tj| acc * self.grid_side + (tj / self.s) as usize)
    }

    /// Discretized slope vector for a Leontief action.
    pub fn slopes(&self, a: &[f64]) -> Vec<i64> {
        a.iter()
            .map(|&aj| ((self.m as f64 / (aj * self.lipschitz)).round() as i64).clamp(1, self.m - 1))
            .collect()
    }

    /// Raw coefficients `(r0, r)` reproducing `min_j b_j z_j` through the basis.
    /// Also returns the summed worst-case indicator error weight.
    pub fn assemble(&self, b: &[i64]) -> Result<(f64, Vec<f64>, f64)> {
        let coeffs = leontief_coeffs(b, self.m)?;
        let mut r = vec![0.0; self.n];
        let mut r0 = 0.0;
        let mut error_weight = 0.0;
        let levels = self.blocks.len();
        for (i, &c) in &coeffs {
            let c = c as f64;
            let base: Vec<i64> = i.iter().map(|&ij| self.s * (ij / self.s)).collect();
            r[self.grid_index(&base)] += c;
            let mut cur = base;
            for axis in 0..self.d {
                while cur[axis] < i[axis] {
                    let rect = mrelu_adjacent_diff(&cur, axis, self.m);
                    cur[axis] += 1;
                    if rect.is_empty() {
                        continue;
                    }
                    for (h, cell) in self.rect_cells(&rect)? {
                        let level = level_index(&h, self.log_range);
                        let block = &self.blocks[level];
                        let row = block.row(cell);
                        let start = self.offsets[axis * levels + level];
                        for (slot, v) in r[start..start + block.k].iter_mut().zip(row) {
                            *slot -= 2.0 * c * v;
                        }
                        r0 += c * row.iter().sum::<f64>();
                        error_weight += c.abs() * block.max_off_diagonal.max(block.max_diagonal_error);
                    }
                }
            }
        }
        Ok((r0, r, error_weight))
    }

    /// Dyadic product cells `(level vector, cell index)` tiling a hyperrectangle.
    fn rect_cells(&self, rect: &HyperRect) -> Result<Vec<(Vec<u32>, usize)>> {
        let top = self.range - 1;
        let mut pieces = Vec::with_capacity(rect.factors.len());
        for f in &rect.factors {
            let lo = (f.lo - 1).max(0) as u64;
            let hi = ((f.hi - 1) as u64).min(top);
            if lo > hi {
                return Ok(Vec::new());
            }
            pieces.push(dyadic_decompose(lo, hi, self.range)?);
        }
        let mut out = Vec::new();
        let mut pick = vec![0usize; pieces.len()];
        loop {
            let h: Vec<u32> = pick.iter().zip(&pieces).map(|(&p, list)| list[p].h).collect();
            let mut idx = 0usize;
            for (r, (&p, list)) in pick.iter().zip(&pieces).enumerate() {
                idx = idx * (self.range >> h[r]) as usize + list[p].a as usize;
            }
            out.push((h, idx));
            let mut k = pieces.len();
            loop {
                if k == 0 {
                    return Ok(out);
                }
                k -= 1;
                pick[k] += 1;
                if pick[k] < pieces[k].len() {
                    break;
                }
                pick[k] = 0;
            }
        }
    }
}

fn target_size(cells: usize, mu: f64, c0: f64) -> usize {
    super::perturbed::target_columns(cells, mu, c0)
}

fn level_vector(level: usize, d: usize, log_range: u32) -> Vec<u32> {
    let base = log_range as usize + 1;
    let mut h = vec![0u32; d];
    let mut rest = level;
    for k in (0..d).rev() {
        h[k] = (rest % base) as u32;
        rest /= base;
    }
    h
}

fn level_index(h: &[u32], log_range: u32) -> usize {
    let base = log_range as usize + 1;
    h.iter().fold(0usize, |acc, &hr| acc * base + hr as usize)
}
