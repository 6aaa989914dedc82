//! Lifting losses to linear forms over a basis, and snapping them to a γ-grid.

use serde::{Deserialize, Serialize};

use crate::basis::{factorial, Basis, BasisDescriptor};
use crate::domain::{argmin_first, softmin, ActionSet, LossKind, LossSpec};
use crate::error::{Error, Result};

/// Per-action linear form `offset[a] + coefs[a] . s(y)` over stored basis values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedLoss {
    pub basis: BasisDescriptor,
    pub offsets: Vec<f64>,
    pub coefs: Vec<Vec<f64>>,
    /// Sup-norm Lipschitz modulus certified on basis images.
    pub lambda: f64,
    /// `max_a sum_i |coefs[a][i]|`.
    pub coef_l1: f64,
}

impl LiftedLoss {
    pub fn actions(&self) -> usize {
        self.coefs.len()
    }

    pub fn value(&self, a: usize, v: &[f64]) -> f64 {
        let mut total = self.offsets[a];
        for (c, x) in self.coefs[a].iter().zip(v) {
            total += c * x;
        }
        total
    }

    pub fn values(&self, v: &[f64]) -> Vec<f64> {
        (0..self.coefs.len()).map(|a| self.value(a, v)).collect()
    }

    pub fn best_response(&self, v: &[f64]) -> usize {
        argmin_first(&self.values(v))
    }

    pub fn quantal(&self, v: &[f64], eta_qr: f64) -> Vec<f64> {
        softmin(&self.values(v), eta_qr)
    }
}

fn coef_l1(coefs: &[Vec<f64>]) -> f64 {
    coefs.iter().map(|r| r.iter().map(|c| c.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Coefficients against the natural (unscaled) basis functions, before the
/// loss's normalization. Returns `(offsets, coefs)`.
pub fn lift_raw(loss: &LossSpec, basis: &Basis, actions: &ActionSet) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if actions.is_empty() {
        return Err(Error::EmptyActions);
    }
    if loss.d != basis.d {
        return Err(Error::Dimension { expected: basis.d, got: loss.d });
    }
    for a in actions.refs() {
        loss.check_action(a)?;
    }
    let mismatch = || Error::FamilyMismatch(format!("{:?} over {:?}", loss.kind, basis.descriptor));
    let mut offsets = Vec::with_capacity(actions.len());
    let mut coefs = Vec::with_capacity(actions.len());
    match (&basis.descriptor, &loss.kind) {
        (BasisDescriptor::Grid { .. }, _) => {
            // Raw table values; the normalization step in `lift` maps them to loss units.
            let points = basis.cell_points().expect("grid basis has cell points");
            for a in actions.refs() {
                offsets.push(0.0);
                coefs.push(points.iter().map(|y| loss.eval_raw(a, y)).collect());
            }
        }
        (BasisDescriptor::Lp { p, d }, LossKind::Lp { p: q }) if p == q && *d == loss.d => {
            for a in actions.refs() {
                let (r0, r) = binomial_coefs(*p, a.point);
                offsets.push(r0);
                coefs.push(r);
            }
        }
        (BasisDescriptor::Lp { p: 2, d }, LossKind::Squared) if *d == loss.d => {
            for a in actions.refs() {
                let (r0, r) = binomial_coefs(2, a.point);
                offsets.push(r0);
                coefs.push(r);
            }
        }
        (BasisDescriptor::Monomial { beta, g, .. }, LossKind::Monomial { beta: b2, g: g2, scale, .. })
            if beta == b2 && g == g2 =>
        {
            let tuples = basis.product_tuples().expect("monomial basis has tuples");
            for a in actions.refs() {
                offsets.push(0.0);
                coefs.push(tuples.iter().map(|t| scale * t.iter().map(|&i| a.point[i]).product::<f64>()).collect());
            }
        }
        (BasisDescriptor::Monomial { beta: 1, g: crate::domain::InnerMap::Identity, .. }, LossKind::CustomTable { rows }) => {
            for a in actions.refs() {
                let row = &rows[a.index];
                offsets.push(row.offset);
                coefs.push(row.weights.clone());
            }
        }
        (BasisDescriptor::ExpTaylor { g, .. }, LossKind::Exponential { g: g2, scale, .. }) if g == g2 => {
            let tuples = basis.product_tuples().expect("Taylor basis has tuples");
            for a in actions.refs() {
                offsets.push(-scale);
                coefs.push(
                    tuples
                        .iter()
                        .map(|t| -scale / factorial(t.len()) * t.iter().map(|&i| a.point[i]).product::<f64>())
                        .collect(),
                );
            }
        }
        (BasisDescriptor::Leontief { lipschitz, delta, .. }, LossKind::Leontief { lipschitz: l2 })
            if (lipschitz - l2).abs() <= 1e-12 =>
        {
            let inner = basis.leontief().expect("Leontief basis internals");
            let unit = lipschitz * delta * delta;
            for a in actions.refs() {
                let (r0, r, _) = inner.assemble(&inner.slopes(a.point))?;
                // Loss is the negated utility.
                offsets.push(-unit * r0);
                coefs.push(r.into_iter().map(|c| -unit * c).collect());
            }
        }
        _ => return Err(mismatch()),
    }
    Ok((offsets, coefs))
}

/// `(a - y)^p = sum_k C(p,k) a^(p-k) (-y)^k`, per coordinate.
fn binomial_coefs(p: u32, a: &[f64]) -> (f64, Vec<f64>) {
    let mut r0 = 0.0;
    let mut r = Vec::with_capacity(a.len() * p as usize);
    for &ai in a {
        r0 += ai.powi(p as i32);
        let mut binom = 1.0;
        for k in 1..=p {
            binom = binom * (p - k + 1) as f64 / k as f64;
            r.push(binom * ai.powi((p - k) as i32));
        }
    }
    (r0, r)
}

/// Lift onto stored basis values with the loss normalization applied.
pub fn lift(loss: &LossSpec, basis: &Basis, actions: &ActionSet) -> Result<LiftedLoss> {
    let (raw_offsets, raw_coefs) = lift_raw(loss, basis, actions)?;
    let norm = loss.norm;
    let mut offsets = Vec::with_capacity(raw_offsets.len());
    let mut coefs = Vec::with_capacity(raw_coefs.len());
    for (r0, r) in raw_offsets.into_iter().zip(raw_coefs) {
        let mut off = norm.offset + norm.scale * r0;
        let mut row = Vec::with_capacity(r.len());
        for (i, c) in r.into_iter().enumerate() {
            let (lo, span) = basis.raw_range(i);
            let c = norm.scale * c;
            off += c * lo;
            row.push(c * span);
        }
        offsets.push(off);
        coefs.push(row);
    }
    let l1 = coef_l1(&coefs);
    let lambda = match basis.descriptor {
        BasisDescriptor::Grid { .. } => {
            // One-hot images differ in one unit coordinate pair; the form moves by a coefficient spread.
            coefs.iter().map(|r| spread(r)).fold(0.0, f64::max)
        }
        _ => l1,
    };
    Ok(LiftedLoss { basis: basis.descriptor.clone(), offsets, coefs, lambda, coef_l1: l1 })
}

fn spread(r: &[f64]) -> f64 {
    let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// Nearest multiple of `gamma`; exact half steps go toward zero.
pub fn snap(x: f64, gamma: f64) -> f64 {
    let q = x / gamma;
    let floor = q.floor();
    let frac = q - floor;
    let k = if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if q > 0.0 {
        floor
    } else {
        floor + 1.0
    };
    k * gamma
}

pub fn default_gamma(n: usize, horizon: usize) -> f64 {
    1.0 / (2.0 * n as f64 * (horizon as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveredFamily {
    pub gamma: f64,
    pub members: Vec<LiftedLoss>,
    /// `index[k]` is the member serving input loss `k`.
    pub index: Vec<usize>,
}

pub fn snap_loss(loss: &LiftedLoss, gamma: f64) -> LiftedLoss {
    let offsets: Vec<f64> = loss.offsets.iter().map(|&c| snap(c, gamma)).collect();
    let coefs: Vec<Vec<f64>> = loss.coefs.iter().map(|r| r.iter().map(|&c| snap(c, gamma)).collect()).collect();
    let l1 = coef_l1(&coefs);
    let lambda = match loss.basis {
        BasisDescriptor::Grid { .. } => coefs.iter().map(|r| spread(r)).fold(0.0, f64::max),
        _ => l1,
    };
    LiftedLoss { basis: loss.basis.clone(), offsets, coefs, lambda, coef_l1: l1 }
}

/// Snaps only the given family; identical results share one member.
pub fn gamma_cover(family: &[LiftedLoss], gamma: f64) -> Result<CoveredFamily> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!("gamma = {gamma} must be positive")));
    }
    let mut members: Vec<LiftedLoss> = Vec::new();
    let mut index = Vec::with_capacity(family.len());
    for loss in family {
        let snapped = snap_loss(loss, gamma);
        match members.iter().position(|m| *m == snapped) {
            Some(k) => index.push(k),
            None => {
                index.push(members.len());
                members.push(snapped);
            }
        }
    }
    Ok(CoveredFamily { gamma, members, index })
}

/// Exact count of γ-lattice values in `[-lambda, lambda]` after snapping, per
/// coefficient, raised to the number of coefficients.
pub fn cover_lattice_size(lambda: f64, gamma: f64, coefficients: usize) -> f64 {
    let reach = snap(lambda, gamma) / gamma;
    (2.0 * reach.round() + 1.0).powi(coefficients as i32)
}

/// Brute-force certificate of a basis against concrete losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisAudit {
    pub max_error: f64,
    /// Largest `max_a sum_i |r_i|` seen, in stored-basis units.
    pub max_coef_l1: f64,
    /// Largest certified modulus of the lifted forms.
    pub max_lambda: f64,
    /// Every lift's modulus stays within the basis budget scaled by the loss normalization.
    pub lambda_respected: bool,
    pub points: usize,
}

/// Sweeps a regular grid with `per_axis` points per coordinate and compares
/// every lifted form with its loss.
pub fn audit_basis(basis: &Basis, losses: &[LossSpec], actions: &ActionSet, per_axis: usize) -> Result<BasisAudit> {
    if per_axis < 2 {
        return Err(Error::Parameter("audit grid needs at least 2 points per axis".into()));
    }
    let lifted = losses.iter().map(|l| lift(l, basis, actions)).collect::<Result<Vec<_>>>()?;
    let mut report = BasisAudit { max_error: 0.0, max_coef_l1: 0.0, max_lambda: 0.0, lambda_respected: true, points: 0 };
    for (loss, form) in losses.iter().zip(&lifted) {
        report.max_coef_l1 = report.max_coef_l1.max(form.coef_l1);
        report.max_lambda = report.max_lambda.max(form.lambda);
        let budget = basis.lambda * loss.norm.scale.abs();
        if form.lambda > budget * (1.0 + 1e-9) + 1e-12 {
            report.lambda_respected = false;
        }
    }
    let total = per_axis.pow(basis.d as u32);
    let mut y = vec![0.0; basis.d];
    for flat in 0..total {
        let mut rest = flat;
        for k in (0..basis.d).rev() {
            y[k] = (rest % per_axis) as f64 / (per_axis - 1) as f64;
            rest /= per_axis;
        }
        let v = basis.eval(&y)?;
        for (loss, form) in losses.iter().zip(&lifted) {
            let direct = loss.eval_all(actions, &y)?;
            for (a, truth) in direct.iter().enumerate() {
                report.max_error = report.max_error.max((form.value(a, &v) - truth).abs());
            }
        }
        report.points += 1;
    }
    Ok(report)
}
