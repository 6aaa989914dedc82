//! Outcomes, actions, losses, best and quantal responses.
//!
//! Outcomes live in `[0,1]^d` and are plain coordinate slices. Every loss is
//! evaluated in normalized units: `offset + scale * raw`, with the affine map
//! chosen so the result lies in `[0,1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RANGE_SLACK: f64 = 1e-12;

pub fn check_outcome(y: &[f64], d: usize) -> Result<()> {
    if y.len() != d {
        return Err(Error::Dimension { expected: d, got: y.len() });
    }
    for (index, &value) in y.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Domain { index, value });
        }
    }
    Ok(())
}

/// Coordinate map applied inside monomial and exponential families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "kebab-case")]
pub enum InnerMap {
    Identity,
    /// `ln(max(y, y_min))`.
    LnClipped { y_min: f64 },
}

impl InnerMap {
    pub fn apply(&self, y: f64) -> f64 {
        match *self {
            InnerMap::Identity => y,
            InnerMap::LnClipped { y_min } => y.max(y_min).ln(),
        }
    }

    /// Range of the map over `[0,1]`.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            InnerMap::Identity => (0.0, 1.0),
            InnerMap::LnClipped { y_min } => (y_min.ln(), 0.0),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let (lo, hi) = self.range();
        lo.abs().max(hi.abs())
    }

    fn validate(&self) -> Result<()> {
        match *self {
            InnerMap::Identity => Ok(()),
            InnerMap::LnClipped { y_min } if y_min > 0.0 && y_min < 1.0 => Ok(()),
            InnerMap::LnClipped { y_min } => {
                Err(Error::Parameter(format!("ln clip y_min = {y_min} must lie in (0, 1)")))
            }
        }
    }
}

/// Affine map from a raw loss value into `[0,1]`: `offset + scale * raw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    /// Shift `lo` to zero; shrink only when the raw span exceeds one.
    pub fn fit(lo: f64, hi: f64) -> Self {
        let span = hi - lo;
        let scale = if span > 1.0 { 1.0 / span } else { 1.0 };
        Normalization { offset: -lo * scale, scale }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        self.offset + self.scale * raw
    }
}

/// Per-action affine row of a custom table loss: `offset + weights . y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub offset: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    /// Values on a regular grid with `per_axis` points per coordinate,
    /// multilinearly interpolated; one table per action index.
    GridTabular { per_axis: usize, values: Vec<Vec<f64>> },
    /// `sum_i (a_i - y_i)^p`, action point = target.
    Lp { p: u32 },
    /// `scale * (sum_i r_i g(y_i))^beta`, action point = `r`.
    Monomial { beta: u32, g: InnerMap, scale: f64, r_bound: f64 },
    /// `-scale * exp(sum_i r_i g(y_i))`, action point = `r`.
    Exponential { g: InnerMap, scale: f64, r_bound: f64, c_bound: f64 },
    /// `-min_j y_j / a_j`, action point = `a` with every `a_j >= 1/lipschitz`.
    Leontief { lipschitz: f64 },
    /// `sum_i (a_i - y_i)^2`.
    Squared,
    /// One affine row per action index.
    CustomTable { rows: Vec<LinearRow> },
}

/// Deserializing validates; a missing `norm` gets the fitted default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossSpecRepr")]
pub struct LossSpec {
    pub d: usize,
    #[serde(flatten)]
    pub kind: LossKind,
    pub norm: Normalization,
}

#[derive(Deserialize)]
struct LossSpecRepr {
    d: usize,
    #[serde(flatten)]
    kind: LossKind,
    #[serde(default)]
    norm: Option<Normalization>,
}

impl TryFrom<LossSpecRepr> for LossSpec {
    type Error = Error;

    fn try_from(r: LossSpecRepr) -> Result<Self> {
        let spec = LossSpec::new(r.kind, r.d)?;
        match r.norm {
            Some(norm) => spec.with_norm(norm),
            None => Ok(spec),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ActionRef<'a> {
    pub index: usize,
    pub point: &'a [f64],
}

impl LossSpec {
    /// Validates parameters and attaches the default normalization.
    pub fn new(kind: LossKind, d: usize) -> Result<Self> {
        let mut spec = LossSpec { d, kind, norm: Normalization { offset: 0.0, scale: 1.0 } };
        spec.validate_kind()?;
        let (lo, hi) = spec.raw_range();
        spec.norm = Normalization::fit(lo, hi);
        Ok(spec)
    }

    pub fn squared(d: usize) -> Self {
        LossSpec::new(LossKind::Squared, d).expect("squared loss is always valid")
    }

    pub fn with_norm(mut self, norm: Normalization) -> Result<Self> {
        self.norm = norm;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_kind()?;
        let (lo, hi) = self.raw_range();
        let (a, b) = (self.norm.apply(lo), self.norm.apply(hi));
        let (vmin, vmax) = (a.min(b), a.max(b));
        if vmin < -RANGE_SLACK || vmax > 1.0 + RANGE_SLACK {
            return Err(Error::Parameter(format!(
                "normalization maps raw range [{lo}, {hi}] to [{vmin}, {vmax}], outside [0, 1]"
            )));
        }
        Ok(())
    }

    fn validate_kind(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Parameter("dimension must be at least 1".into()));
        }
        match &self.kind {
            LossKind::GridTabular { per_axis, values } => {
                if *per_axis < 2 {
                    return Err(Error::Parameter("grid table needs at least 2 points per axis".into()));
                }
                let cells = checked_pow(*per_axis, self.d)?;
                if values.is_empty() {
                    return Err(Error::EmptyActions);
                }
                for row in values {
                    if row.len() != cells {
                        return Err(Error::Dimension { expected: cells, got: row.len() });
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Parameter("grid table values must be finite".into()));
                    }
                }
            }
            LossKind::Lp { p } if *p == 0 => {
                return Err(Error::Parameter("L_p exponent must be at least 1".into()));
            }
            LossKind::Lp { .. } | LossKind::Squared => {}
            LossKind::Monomial { beta, g, scale, r_bound } => {
                g.validate()?;
                if *beta == 0 || !(*scale > 0.0) || !(*r_bound >= 0.0) {
                    return Err(Error::Parameter("monomial needs beta >= 1, scale > 0, r_bound >= 0".into()));
                }
            }
            LossKind::Exponential { g, scale, r_bound, c_bound } => {
                g.validate()?;
                if !(*scale > 0.0) || !(*r_bound >= 0.0) || !(*c_bound >= 0.0) {
                    return Err(Error::Parameter("exponential needs scale > 0 and nonnegative bounds".into()));
                }
            }
            LossKind::Leontief { lipschitz } => {
                if !(*lipschitz > 0.0) {
                    return Err(Error::Parameter("Leontief Lipschitz constant must be positive".into()));
                }
            }
            LossKind::CustomTable { rows } => {
                if rows.is_empty() {
                    return Err(Error::EmptyActions);
                }
                for row in rows {
                    if row.weights.len() != self.d {
                        return Err(Error::Dimension { expected: self.d, got: row.weights.len() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Raw (pre-normalization) range over all admissible actions and outcomes.
    pub fn raw_range(&self) -> (f64, f64) {
        let d = self.d as f64;
        match &self.kind {
            LossKind::GridTabular { values, .. } => {
                let lo = values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
            LossKind::Lp { p } if p % 2 == 1 => (-d, d),
            LossKind::Lp { .. } | LossKind::Squared => (0.0, d),
            LossKind::Monomial { beta, g, scale, r_bound } => {
                let reach = (r_bound * d * g.max_abs()).powi(*beta as i32) * scale;
                if beta % 2 == 0 {
                    (0.0, reach)
                } else {
                    (-reach, reach)
                }
            }
            LossKind::Exponential { scale, c_bound, .. } => {
                (-scale * c_bound.exp(), -scale * (-c_bound).exp())
            }
            LossKind::Leontief { lipschitz } => (-lipschitz, 0.0),
            LossKind::CustomTable { rows } => {
                let lo = rows
                    .iter()
                    .map(|r| r.offset + r.weights.iter().map(|w| w.min(0.0)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                let hi = rows
                    .iter()
                    .map(|r| r.offset + r.weights.iter().map(|w| w.max(0.0)).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    /// Number of actions the loss addresses by index, if it is index-based.
    pub fn table_len(&self) -> Option<usize> {
        match &self.kind {
            LossKind::GridTabular { values, .. } => Some(values.len()),
            LossKind::CustomTable { rows } => Some(rows.len()),
            _ => None,
        }
    }

    /// Checks that an action is in this loss's action domain.
    pub fn check_action(&self, a: ActionRef<'_>) -> Result<()> {
        if let Some(len) = self.table_len() {
            if a.index >= len {
                return Err(Error::Parameter(format!("action index {} beyond table of {len}", a.index)));
            }
            return Ok(());
        }
        if a.point.len() != self.d {
            return Err(Error::Dimension { expected: self.d, got: a.point.len() });
        }
        match &self.kind {
            LossKind::Lp { .. } | LossKind::Squared => check_outcome(a.point, self.d),
            LossKind::Leontief { lipschitz } => {
                for (j, &aj) in a.point.iter().enumerate() {
                    if aj < 1.0 / lipschitz - RANGE_SLACK {
                        return Err(Error::Parameter(format!(
                            "Leontief coefficient a_{j} = {aj} below 1/L = {}",
                            1.0 / lipschitz
                        )));
                    }
                }
                Ok(())
            }
            LossKind::Monomial { r_bound, .. } => check_coefficients(a.point, *r_bound),
            LossKind::Exponential { g, r_bound, c_bound, .. } => {
                check_coefficients(a.point, *r_bound)?;
                let reach = aggregate_reach(a.point, g);
                if reach > c_bound + RANGE_SLACK {
                    return Err(Error::Parameter(format!(
                        "aggregate |sum r_i g(y_i)| reaches {reach} > C = {c_bound}"
                    )));
                }
                Ok(())
            }
            LossKind::GridTabular { .. } | LossKind::CustomTable { .. } => unreachable!(),
        }
    }

    /// Closed-form raw value.
    pub fn eval_raw(&self, a: ActionRef<'_>, y: &[f64]) -> f64 {
        match &self.kind {
            LossKind::GridTabular { per_axis, values } => interpolate(&values[a.index], *per_axis, y),
            LossKind::Lp { p } => a.point.iter().zip(y).map(|(ai, yi)| (ai - yi).powi(*p as i32)).sum(),
            LossKind::Squared => a.point.iter().zip(y).map(|(ai, yi)| (ai - yi) * (ai - yi)).sum(),
            LossKind::Monomial { beta, g, scale, .. } => {
                let x: f64 = a.point.iter().zip(y).map(|(r, yi)| r * g.apply(*yi)).sum();
                scale * x.powi(*beta as i32)
            }
            LossKind::Exponential { g, scale, .. } => {
                let x: f64 = a.point.iter().zip(y).map(|(r, yi)| r * g.apply(*yi)).sum();
                -scale * x.exp()
            }
            LossKind::Leontief { .. } => {
                -a.point.iter().zip(y).map(|(aj, yj)| yj / aj).fold(f64::INFINITY, f64::min)
            }
            LossKind::CustomTable { rows } => {
                let row = &rows[a.index];
                row.offset + row.weights.iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>()
            }
        }
    }

    pub fn eval(&self, a: ActionRef<'_>, y: &[f64]) -> Result<f64> {
        check_outcome(y, self.d)?;
        self.check_action(a)?;
        Ok(self.norm.apply(self.eval_raw(a, y)))
    }

    /// Normalized losses of every action at `y`.
    pub fn eval_all(&self, actions: &ActionSet, y: &[f64]) -> Result<Vec<f64>> {
        check_outcome(y, self.d)?;
        actions.refs().map(|a| {
            self.check_action(a)?;
            Ok(self.norm.apply(self.eval_raw(a, y)))
        }).collect()
    }
}

fn check_coefficients(r: &[f64], bound: f64) -> Result<()> {
    if r.iter().any(|ri| ri.abs() > bound + RANGE_SLACK) {
        return Err(Error::Parameter(format!("coefficient exceeds bound {bound}")));
    }
    Ok(())
}

/// Largest `|sum r_i g(y_i)|` over the unit box.
pub fn aggregate_reach(r: &[f64], g: &InnerMap) -> f64 {
    let (glo, ghi) = g.range();
    let (mut lo, mut hi) = (0.0, 0.0);
    for &ri in r {
        let (u, v) = (ri * glo, ri * ghi);
        lo += u.min(v);
        hi += u.max(v);
    }
    lo.abs().max(hi.abs())
}

fn checked_pow(base: usize, exp: usize) -> Result<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base).ok_or(Error::Budget { size: usize::MAX, budget: usize::MAX })?;
    }
    Ok(acc)
}

/// Multilinear interpolation of a row-major table (first coordinate slowest).
fn interpolate(table: &[f64], per_axis: usize, y: &[f64]) -> f64 {
    let d = y.len();
    let steps = (per_axis - 1) as f64;
    let mut base = Vec::with_capacity(d);
    let mut frac = Vec::with_capacity(d);
    for &yi in y {
        let pos = yi * steps;
        let cell = (pos.floor() as usize).min(per_axis - 2);
        base.push(cell);
        frac.push(pos - cell as f64);
    }
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut index = 0;
        for k in 0..d {
            let up = (corner >> (d - 1 - k)) & 1;
            weight *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
            index = index * per_axis + base[k] + up;
        }
        if weight != 0.0 {
            total += weight * table[index];
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionKind {
    FiniteList,
    ThetaNet { m: usize, theta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub kind: ActionKind,
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl ActionSet {
    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyActions);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("action coordinates must be finite".into()));
        }
        Ok(ActionSet { kind: ActionKind::FiniteList, points, labels: Vec::new() })
    }

    /// Opaque labels; points are empty vectors. Usable with index-based losses.
    pub fn labeled(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyActions);
        }
        let points = vec![Vec::new(); labels.len()];
        Ok(ActionSet { kind: ActionKind::FiniteList, points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, index: usize) -> ActionRef<'_> {
        ActionRef { index, point: &self.points[index] }
    }

    pub fn refs(&self) -> impl Iterator<Item = ActionRef<'_>> {
        self.points.iter().enumerate().map(|(index, p)| ActionRef { index, point: p })
    }
}

/// All coordinate-wise multiples of `theta` in `[0,1]^m`, plus 1 when it is not
/// itself a multiple. The last coordinate varies fastest.
pub fn theta_net(m: usize, theta: f64) -> Result<ActionSet> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Parameter(format!("theta = {theta} must lie in (0, 1]")));
    }
    if m == 0 {
        return Err(Error::Parameter("theta-net dimension must be at least 1".into()));
    }
    let steps = (1.0 / theta + 1e-9).floor() as usize;
    let mut axis: Vec<f64> = (0..=steps).map(|k| (k as f64 * theta).min(1.0)).collect();
    if 1.0 - axis[steps] > 1e-12 {
        axis.push(1.0);
    } else {
        axis[steps] = 1.0;
    }
    let count = checked_pow(axis.len(), m)?;
    let mut points = Vec::with_capacity(count);
    for flat in 0..count {
        let mut point = vec![0.0; m];
        let mut rest = flat;
        for k in (0..m).rev() {
            point[k] = axis[rest % axis.len()];
            rest /= axis.len();
        }
        points.push(point);
    }
    Ok(ActionSet { kind: ActionKind::ThetaNet { m, theta }, points, labels: Vec::new() })
}

/// Index of the smallest value; the earliest index wins ties.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

pub fn best_response(loss: &LossSpec, p: &[f64], actions: &ActionSet) -> Result<usize> {
    if actions.is_empty() {
        return Err(Error::EmptyActions);
    }
    Ok(argmin_first(&loss.eval_all(actions, p)?))
}

/// `q(a) ∝ exp(-eta * loss(a))`, shifted by the minimum loss for stability.
pub fn softmin(losses: &[f64], eta: f64) -> Vec<f64> {
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = losses.iter().map(|l| (-eta * (l - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

pub fn quantal_response(loss: &LossSpec, p: &[f64], actions: &ActionSet, eta_qr: f64) -> Result<Vec<f64>> {
    if !(eta_qr >= 0.0) || !eta_qr.is_finite() {
        return Err(Error::Parameter(format!("eta_qr = {eta_qr} must be finite and nonnegative")));
    }
    if actions.is_empty() {
        return Err(Error::EmptyActions);
    }
    Ok(softmin(&loss.eval_all(actions, p)?, eta_qr))
}
