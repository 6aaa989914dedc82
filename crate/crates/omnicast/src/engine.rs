//! The online forecaster.
//!
//! Each round the engine turns the cumulative event biases into exponential
//! weights over signed (event, coordinate) experts, solves the induced finite
//! zero-sum game between prediction candidates and adversarial outcomes, and
//! samples a prediction. Agents then act on the sampled prediction.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisDescriptor};
use crate::domain::{check_outcome, ActionSet, LossSpec};
use crate::error::{Error, Result};
use crate::game::{solve, Matrix, SolverSpec};
use crate::linearize::{default_gamma, gamma_cover, lift, CoveredFamily};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mode {
    Exact,
    Smooth { eta_qr: f64 },
}

/// Lookup table from context label to action index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub name: String,
    pub table: Vec<usize>,
}

impl Policy {
    pub fn constant(name: impl Into<String>, action: usize, contexts: usize) -> Self {
        Policy { name: name.into(), table: vec![action; contexts] }
    }

    /// `below` on contexts `< cut`, `at_or_above` otherwise.
    pub fn threshold(name: impl Into<String>, cut: usize, below: usize, at_or_above: usize, contexts: usize) -> Self {
        let table = (0..contexts).map(|x| if x < cut { below } else { at_or_above }).collect();
        Policy { name: name.into(), table }
    }

    pub fn act(&self, x: usize) -> usize {
        self.table[x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum EventPayload {
    Decision { loss: usize, action: usize },
    Cross { loss: usize, action: usize, policy: usize, target: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub mode: Mode,
    pub payload: EventPayload,
}

/// Decision events for every (covered loss, action) and cross events for
/// every (covered loss, action, policy, policy action).
#[derive(Clone, Debug)]
pub struct EventSet {
    pub cover: CoveredFamily,
    pub actions: usize,
    pub policies: Vec<Policy>,
    pub mode: Mode,
}

impl EventSet {
    pub fn new(cover: CoveredFamily, actions: usize, policies: Vec<Policy>, mode: Mode) -> Result<Self> {
        if cover.members.is_empty() {
            return Err(Error::Parameter("no losses registered".into()));
        }
        if actions == 0 {
            return Err(Error::EmptyActions);
        }
        if cover.members.iter().any(|m| m.actions() != actions) {
            return Err(Error::Parameter("covered losses disagree on the action count".into()));
        }
        if let Some(p) = policies.iter().find(|p| p.table.iter().any(|&a| a >= actions)) {
            return Err(Error::Parameter(format!("policy {} names an action beyond {actions}", p.name)));
        }
        if let Mode::Smooth { eta_qr } = mode {
            if !(eta_qr >= 0.0) || !eta_qr.is_finite() {
                return Err(Error::Parameter(format!("eta_qr = {eta_qr} must be finite and nonnegative")));
            }
        }
        Ok(EventSet { cover, actions, policies, mode })
    }

    pub fn losses(&self) -> usize {
        self.cover.members.len()
    }

    pub fn len(&self) -> usize {
        let (l, a, c) = (self.losses(), self.actions, self.policies.len());
        l * a + l * a * a * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decision_id(&self, loss: usize, action: usize) -> usize {
        loss * self.actions + action
    }

    pub fn cross_id(&self, loss: usize, action: usize, policy: usize, target: usize) -> usize {
        let a = self.actions;
        self.losses() * a + ((loss * a + action) * self.policies.len() + policy) * a + target
    }

    pub fn payload(&self, id: usize) -> EventPayload {
        let a = self.actions;
        let base = self.losses() * a;
        if id < base {
            return EventPayload::Decision { loss: id / a, action: id % a };
        }
        let rest = id - base;
        let target = rest % a;
        let rest = rest / a;
        let policy = rest % self.policies.len();
        let rest = rest / self.policies.len();
        EventPayload::Cross { loss: rest / a, action: rest % a, policy, target }
    }

    pub fn events(&self) -> Vec<Event> {
        (0..self.len()).map(|id| Event { id, mode: self.mode, payload: self.payload(id) }).collect()
    }

    /// Per covered loss, the weight each action's events receive at basis
    /// vector `v`: one-hot on the best response, or the quantal response.
    pub fn member_weights(&self, v: &[f64]) -> Vec<Vec<f64>> {
        self.cover
            .members
            .iter()
            .map(|m| match self.mode {
                Mode::Exact => {
                    let mut w = vec![0.0; self.actions];
                    w[m.best_response(v)] = 1.0;
                    w
                }
                Mode::Smooth { eta_qr } => m.quantal(v, eta_qr),
            })
            .collect()
    }

    /// Calls `f(event id, weight)` for every event with nonzero weight.
    pub fn for_each_active(&self, x: usize, weights: &[Vec<f64>], mut f: impl FnMut(usize, f64)) {
        for (l, w) in weights.iter().enumerate() {
            for (a, &wa) in w.iter().enumerate() {
                if wa == 0.0 {
                    continue;
                }
                f(self.decision_id(l, a), wa);
                for (c, policy) in self.policies.iter().enumerate() {
                    f(self.cross_id(l, a, c, policy.act(x)), wa);
                }
            }
        }
    }

    /// The evaluator of event `id` at context `x` and basis vector `v`.
    pub fn weight(&self, id: usize, x: usize, v: &[f64]) -> f64 {
        let weights = self.member_weights(v);
        match self.payload(id) {
            EventPayload::Decision { loss, action } => weights[loss][action],
            EventPayload::Cross { loss, action, policy, target } => {
                if self.policies[policy].act(x) == target {
                    weights[loss][action]
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn build_events(cover: &CoveredFamily, actions: &ActionSet, policies: &[Policy], mode: Mode) -> Result<Vec<Event>> {
    Ok(EventSet::new(cover.clone(), actions.len(), policies.to_vec(), mode)?.events())
}

/// Expert probabilities ordered `(event, coordinate, +)`, `(event, coordinate, -)`.
pub fn expert_distribution(bias: &[f64], eta_mw: f64) -> Vec<f64> {
    let half = eta_mw / 2.0;
    let top = bias.iter().map(|b| (half * b).abs()).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(2 * bias.len());
    let mut total = 0.0;
    for &b in bias {
        let plus = (half * b - top).exp();
        let minus = (-half * b - top).exp();
        total += plus + minus;
        out.push(plus);
        out.push(minus);
    }
    out.iter_mut().for_each(|q| *q /= total);
    out
}

/// `q(E,i,+) - q(E,i,-)`, flattened like the bias table.
pub fn net_weights(bias: &[f64], eta_mw: f64) -> Vec<f64> {
    let q = expert_distribution(bias, eta_mw);
    q.chunks(2).map(|pm| pm[0] - pm[1]).collect()
}

/// `sum q(E,i,s) * s * E(x,p) * (p_i - yhat_i)` where `event_weights[e]` is
/// `E(x,p)` and `q` is laid out as in [`expert_distribution`].
pub fn round_objective(q: &[f64], event_weights: &[f64], p: &[f64], y_image: &[f64]) -> f64 {
    let n = p.len();
    let mut total = 0.0;
    for (e, &w) in event_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for i in 0..n {
            let net = q[2 * (e * n + i)] - q[2 * (e * n + i) + 1];
            total += net * w * (p[i] - y_image[i]);
        }
    }
    total
}

/// Dense `E(x,p)` over all events.
pub fn event_weights(events: &EventSet, x: usize, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; events.len()];
    events.for_each_active(x, &events.member_weights(p), |e, w| out[e] += w);
    out
}

/// Game matrix `M[c][y] = dir_c . (p_c - yhat_y)`, where `dir_c` aggregates
/// the net expert weights of the events active at candidate `c`.
pub fn objective_matrix(directions: &[Vec<f64>], candidates: &[Vec<f64>], adversary: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(candidates.len(), adversary.len());
    for (c, (w, p)) in directions.iter().zip(candidates).enumerate() {
        let base: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
        for (col, y) in adversary.iter().enumerate() {
            let shift: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
            m.set(c, col, base - shift);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CandidateSpec {
    /// Basis images of the outcome grid.
    Images,
    /// Convex combinations of at most `support` images with weights in
    /// multiples of `1/resolution`.
    Mixtures { support: usize, resolution: usize },
}

impl Default for CandidateSpec {
    fn default() -> Self {
        CandidateSpec::Images
    }
}

/// Finite prediction candidates with an outcome-space representative each.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub vectors: Vec<Vec<f64>>,
    pub preimages: Vec<Vec<f64>>,
    /// True when the representative maps exactly onto the candidate.
    pub exact: Vec<bool>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Regular grid over `[0,1]^d` with the given step; the last point is 1.
pub fn outcome_grid(d: usize, step: f64) -> Vec<Vec<f64>> {
    let steps = (1.0 / step).round().max(1.0) as usize;
    let axis: Vec<f64> = (0..=steps).map(|k| if k == steps { 1.0 } else { k as f64 / steps as f64 }).collect();
    let side = axis.len();
    (0..side.pow(d as u32))
        .map(|flat| {
            let mut p = vec![0.0; d];
            let mut rest = flat;
            for k in (0..d).rev() {
                p[k] = axis[rest % side];
                rest /= side;
            }
            p
        })
        .collect()
}

fn key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Distinct basis images of `points` (first preimage kept).
pub fn images(basis: &Basis, points: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut seen = HashMap::new();
    let mut vectors = Vec::new();
    let mut preimages = Vec::new();
    for y in points {
        let v = basis.eval(y)?;
        if seen.insert(key(&v), vectors.len()).is_none() {
            vectors.push(v);
            preimages.push(y.clone());
        }
    }
    Ok((vectors, preimages))
}

fn generating_points(basis: &Basis, step: f64) -> Vec<Vec<f64>> {
    basis.cell_points().unwrap_or_else(|| outcome_grid(basis.d, step))
}

pub fn build_candidates(basis: &Basis, spec: CandidateSpec, step: f64, budget: usize) -> Result<CandidateSet> {
    let (vectors, preimages) = images(basis, &generating_points(basis, step))?;
    match spec {
        CandidateSpec::Images => {
            if vectors.len() > budget {
                return Err(Error::Budget { size: vectors.len(), budget });
            }
            let exact = vec![true; vectors.len()];
            Ok(CandidateSet { vectors, preimages, exact })
        }
        CandidateSpec::Mixtures { support, resolution } => {
            if support == 0 || resolution == 0 {
                return Err(Error::Parameter("mixtures need support >= 1 and resolution >= 1".into()));
            }
            let mut out = CandidateSet { vectors: Vec::new(), preimages: Vec::new(), exact: Vec::new() };
            let mut seen = HashMap::new();
            let g = vectors.len();
            for size in 1..=support.min(g).min(resolution) {
                let mut subset: Vec<usize> = (0..size).collect();
                loop {
                    for parts in compositions(resolution, size) {
                        let mut v = vec![0.0; basis.n];
                        let mut y = vec![0.0; basis.d];
                        for (&s, &k) in subset.iter().zip(&parts) {
                            let w = k as f64 / resolution as f64;
                            for (vi, si) in v.iter_mut().zip(&vectors[s]) {
                                *vi += w * si;
                            }
                            for (yi, pi) in y.iter_mut().zip(&preimages[s]) {
                                *yi += w * pi;
                            }
                        }
                        if seen.insert(key(&v), out.vectors.len()).is_none() {
                            out.vectors.push(v);
                            out.preimages.push(y);
                            out.exact.push(size == 1);
                            if out.vectors.len() > budget {
                                return Err(Error::Budget { size: out.vectors.len(), budget });
                            }
                        }
                    }
                    if !next_subset(&mut subset, g) {
                        break;
                    }
                }
            }
            Ok(out)
        }
    }
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total - (parts - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn next_subset(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    for i in (0..k).rev() {
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: Mode,
    pub horizon: usize,
    /// Outcome-grid step; defaults to `1/ceil(T^(1/4))` at d = 1.
    #[serde(default)]
    pub grid_step: Option<f64>,
    #[serde(default)]
    pub candidates: CandidateSpec,
    /// The adversary grid is this many times finer than the candidate grid.
    #[serde(default = "one_usize")]
    pub adversary_refine: usize,
    #[serde(default)]
    pub eta_mw: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps_solve: f64,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_candidate_budget")]
    pub candidate_budget: usize,
}

fn one_usize() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-4
}

fn default_candidate_budget() -> usize {
    20_000
}

impl EngineConfig {
    pub fn new(mode: Mode, horizon: usize, seed: u64) -> Self {
        EngineConfig {
            mode,
            horizon,
            grid_step: None,
            candidates: CandidateSpec::Images,
            adversary_refine: 1,
            eta_mw: None,
            gamma: None,
            eps_solve: default_eps(),
            solver: SolverSpec::Exact,
            seed,
            candidate_budget: default_candidate_budget(),
        }
    }
}

pub fn default_grid_step(d: usize, horizon: usize) -> f64 {
    let t = horizon.max(1) as f64;
    let per_axis = if d <= 1 { t.powf(0.25).ceil() } else { t.powf(0.25 / d as f64).ceil().max(2.0) };
    1.0 / per_axis.max(1.0)
}

pub fn default_eta_mw(n: usize, events: usize, horizon: usize) -> f64 {
    let t = horizon.max(1) as f64;
    ((2.0 * n as f64 * events as f64 * t).ln() / t).sqrt().clamp(1e-4, 1.0)
}

/// Everything needed to rebuild a [`Forecaster`] bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterSpec {
    pub basis: BasisDescriptor,
    pub losses: Vec<LossSpec>,
    pub actions: ActionSet,
    #[serde(default)]
    pub policies: Vec<Policy>,
    pub engine: EngineConfig,
}

impl ForecasterSpec {
    pub fn build(&self) -> Result<Forecaster> {
        Forecaster::new(
            Basis::build(&self.basis)?,
            self.losses.clone(),
            self.actions.clone(),
            self.policies.clone(),
            self.engine.clone(),
        )
    }
}

/// A registered agent: its loss and the covered member it best-responds through.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub loss: LossSpec,
    pub member: usize,
}

/// Everything fixed for a run.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub basis: Basis,
    pub actions: ActionSet,
    pub agents: Vec<Agent>,
    pub events: EventSet,
    pub candidates: CandidateSet,
    /// Outcomes the adversary may play and their images.
    pub adversary_outcomes: Vec<Vec<f64>>,
    pub adversary_images: Vec<Vec<f64>>,
    pub eta_mw: f64,
    pub gamma: f64,
    pub grid_step: f64,
    pub config: EngineConfig,
    candidate_weights: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    pub context: usize,
    /// Sparse `(candidate, probability)` pairs.
    pub pi: Vec<(usize, f64)>,
    pub candidate: usize,
    pub prediction: Vec<f64>,
    pub preimage: Vec<f64>,
    /// Guaranteed game value of `pi`.
    pub value: f64,
    /// Value guaranteed by the adversary's solution.
    pub lower: f64,
    pub actions: Vec<usize>,
}

/// The solved game at one bias table and context.
#[derive(Clone, Debug, PartialEq)]
pub struct SolvedRound {
    pub pi: Vec<(usize, f64)>,
    pub value: f64,
    pub lower: f64,
}

impl Forecaster {
    pub fn new(
        basis: Basis,
        losses: Vec<LossSpec>,
        actions: ActionSet,
        policies: Vec<Policy>,
        config: EngineConfig,
    ) -> Result<Forecaster> {
        if losses.is_empty() {
            return Err(Error::Parameter("no losses registered".into()));
        }
        let lifted = losses.iter().map(|l| lift(l, &basis, &actions)).collect::<Result<Vec<_>>>()?;
        let gamma = config.gamma.unwrap_or_else(|| default_gamma(basis.n, config.horizon.max(1)));
        let cover = gamma_cover(&lifted, gamma)?;
        let agents = losses
            .into_iter()
            .zip(&cover.index)
            .map(|(loss, &member)| Agent { loss, member })
            .collect();
        let events = EventSet::new(cover, actions.len(), policies, config.mode)?;
        let grid_step = config.grid_step.unwrap_or_else(|| default_grid_step(basis.d, config.horizon));
        if !(grid_step > 0.0 && grid_step <= 1.0) {
            return Err(Error::Parameter(format!("grid step {grid_step} must lie in (0, 1]")));
        }
        let candidates = build_candidates(&basis, config.candidates, grid_step, config.candidate_budget)?;
        let refine = config.adversary_refine.max(1) as f64;
        let (adversary_images, adversary_outcomes) =
            images(&basis, &generating_points(&basis, grid_step / refine))?;
        let eta_mw = config
            .eta_mw
            .unwrap_or_else(|| default_eta_mw(basis.n, events.len(), config.horizon));
        if !(eta_mw > 0.0) {
            return Err(Error::Parameter(format!("eta_mw = {eta_mw} must be positive")));
        }
        let candidate_weights = candidates.vectors.iter().map(|v| events.member_weights(v)).collect();
        Ok(Forecaster {
            basis,
            actions,
            agents,
            events,
            candidates,
            adversary_outcomes,
            adversary_images,
            eta_mw,
            gamma,
            grid_step,
            config,
            candidate_weights,
        })
    }

    pub fn n(&self) -> usize {
        self.basis.n
    }

    pub fn bias_len(&self) -> usize {
        self.events.len() * self.basis.n
    }

    pub fn weights_at(&self, candidate: usize) -> &[Vec<f64>] {
        &self.candidate_weights[candidate]
    }

    /// Per candidate, `sum_E E(x, p_c) * net[E]`.
    pub fn directions(&self, net: &[f64], x: usize) -> Vec<Vec<f64>> {
        let n = self.basis.n;
        (0..self.candidates.len())
            .map(|c| {
                let mut w = vec![0.0; n];
                self.events.for_each_active(x, &self.candidate_weights[c], |e, weight| {
                    for i in 0..n {
                        w[i] += weight * net[e * n + i];
                    }
                });
                w
            })
            .collect()
    }

    /// Cost matrix of the round game: rows are candidates, columns adversary outcomes.
    pub fn round_matrix(&self, net: &[f64], x: usize) -> Matrix {
        objective_matrix(&self.directions(net, x), &self.candidates.vectors, &self.adversary_images)
    }

    pub fn solve_round(&self, bias: &[f64], x: usize) -> Result<SolvedRound> {
        let net = net_weights(bias, self.eta_mw);
        let m = self.round_matrix(&net, x);
        let sol = solve(&m, self.config.solver)?;
        let pi = prune(&sol.row);
        // Certified value of the pruned strategy.
        let value = (0..m.cols)
            .map(|col| pi.iter().map(|&(c, p)| p * m.at(c, col)).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(SolvedRound { pi, value, lower: sol.lower })
    }

    fn check_context(&self, x: usize) -> Result<()> {
        if let Some(p) = self.events.policies.iter().find(|p| x >= p.table.len()) {
            return Err(Error::Parameter(format!("context {x} outside policy {} table", p.name)));
        }
        Ok(())
    }

    /// Agent actions for a sampled candidate. Agents act through their covered
    /// lifted loss at the sampled vector, so mixture candidates need no preimage.
    fn agent_actions(&self, candidate: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let v = &self.candidates.vectors[candidate];
        self.agents
            .iter()
            .map(|agent| {
                let form = &self.events.cover.members[agent.member];
                match self.config.mode {
                    Mode::Exact => form.best_response(v),
                    Mode::Smooth { eta_qr } => sample_index(&form.quantal(v, eta_qr), rng),
                }
            })
            .collect()
    }
}

/// Below this mass a candidate is solver noise.
pub const PI_FLOOR: f64 = 1e-12;

/// Sparse, renormalized form of a dense mixed strategy.
pub fn prune(row: &[f64]) -> Vec<(usize, f64)> {
    let mut pi: Vec<(usize, f64)> = row.iter().enumerate().filter(|(_, &p)| p > PI_FLOOR).map(|(c, &p)| (c, p)).collect();
    if pi.is_empty() {
        let best = row.iter().enumerate().fold(0, |b, (c, &p)| if p > row[b] { c } else { b });
        return vec![(best, 1.0)];
    }
    let total: f64 = pi.iter().map(|x| x.1).sum();
    pi.iter_mut().for_each(|x| x.1 /= total);
    pi
}

pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn sample_sparse(pi: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(c, p) in pi {
        acc += p;
        if u < acc {
            return c;
        }
    }
    pi.last().map(|&(c, _)| c).unwrap_or(0)
}

#[derive(Clone, Debug)]
struct Pending {
    context: usize,
    candidate: usize,
}

/// Mutable state of one run.
#[derive(Clone, Debug)]
pub struct EngineState {
    /// `bias[e * n + i]`.
    pub bias: Vec<f64>,
    pub t: usize,
    rng: ChaCha8Rng,
    agent_rng: ChaCha8Rng,
    pending: Option<Pending>,
}

impl EngineState {
    pub fn new(forecaster: &Forecaster) -> Self {
        let seed = forecaster.config.seed;
        EngineState {
            bias: vec![0.0; forecaster.bias_len()],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            agent_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0),
            pending: None,
        }
    }

    pub fn max_bias(&self) -> f64 {
        self.bias.iter().fold(0.0, |m, b| m.max(b.abs()))
    }
}

pub fn step(f: &Forecaster, state: &mut EngineState, x: usize) -> Result<RoundOutput> {
    if state.pending.is_some() {
        return Err(Error::Protocol("step called twice without observe".into()));
    }
    f.check_context(x)?;
    let solved = f.solve_round(&state.bias, x)?;
    let candidate = sample_sparse(&solved.pi, &mut state.rng);
    let actions = f.agent_actions(candidate, &mut state.agent_rng);
    state.pending = Some(Pending { context: x, candidate });
    Ok(RoundOutput {
        context: x,
        pi: solved.pi,
        candidate,
        prediction: f.candidates.vectors[candidate].clone(),
        preimage: f.candidates.preimages[candidate].clone(),
        value: solved.value,
        lower: solved.lower,
        actions,
    })
}

/// Adds `E(x, p) (p_i - s(y)_i)` for the pending round's sampled prediction.
pub fn observe(f: &Forecaster, state: &mut EngineState, y: &[f64]) -> Result<()> {
    let Some(pending) = state.pending.take() else {
        return Err(Error::Protocol("observe called without a pending step".into()));
    };
    if let Err(e) = check_outcome(y, f.basis.d) {
        state.pending = Some(pending);
        return Err(e);
    }
    let y_image = f.basis.eval(y)?;
    let p = &f.candidates.vectors[pending.candidate];
    accumulate(&f.events, &mut state.bias, pending.context, f.weights_at(pending.candidate), p, &y_image);
    state.t += 1;
    Ok(())
}

/// The single bias update used by both the engine and the audits.
pub fn accumulate(events: &EventSet, bias: &mut [f64], x: usize, weights: &[Vec<f64>], p: &[f64], y_image: &[f64]) {
    let n = p.len();
    events.for_each_active(x, weights, |e, w| {
        for i in 0..n {
            bias[e * n + i] += w * (p[i] - y_image[i]);
        }
    });
}

/// What an environment may see while choosing the outcome. The sampled
/// prediction is withheld until [`Environment::record`].
#[derive(Clone, Copy, Debug)]
pub struct Published<'a> {
    pub t: usize,
    pub context: usize,
    pub pi: &'a [(usize, f64)],
    pub candidates: &'a CandidateSet,
}

pub trait Environment {
    fn context(&mut self, t: usize) -> Result<usize>;
    fn outcome(&mut self, view: &Published<'_>) -> Result<Vec<f64>>;
    /// Called after the round closes with everything published so far.
    fn record(&mut self, _round: &Round) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub t: usize,
    pub context: usize,
    pub pi: Vec<(usize, f64)>,
    pub candidate: usize,
    pub prediction: Vec<f64>,
    pub preimage: Vec<f64>,
    pub actions: Vec<usize>,
    pub outcome: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub seed: u64,
    pub d: usize,
    pub n: usize,
    pub basis: BasisDescriptor,
    pub config_hash: String,
    pub mode: Mode,
    pub candidates: usize,
    pub events: usize,
    pub agents: usize,
    pub eta_mw: f64,
    pub gamma: f64,
    pub grid_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub rounds: Vec<Round>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// First `t` rounds.
    pub fn prefix(&self, t: usize) -> Transcript {
        Transcript { header: self.header.clone(), rounds: self.rounds[..t.min(self.rounds.len())].to_vec() }
    }
}

pub fn header(f: &Forecaster, config_hash: &str) -> TranscriptHeader {
    TranscriptHeader {
        seed: f.config.seed,
        d: f.basis.d,
        n: f.basis.n,
        basis: f.basis.descriptor.clone(),
        config_hash: config_hash.to_string(),
        mode: f.config.mode,
        candidates: f.candidates.len(),
        events: f.events.len(),
        agents: f.agents.len(),
        eta_mw: f.eta_mw,
        gamma: f.gamma,
        grid_step: f.grid_step,
    }
}

/// Runs `horizon` rounds. `on_round` sees the state before each step.
pub fn run_online_with(
    f: &Forecaster,
    env: &mut dyn Environment,
    horizon: usize,
    config_hash: &str,
    mut on_round: impl FnMut(&EngineState),
) -> Result<(Transcript, EngineState)> {
    let mut state = EngineState::new(f);
    let mut rounds = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let x = env.context(t)?;
        on_round(&state);
        let out = step(f, &mut state, x)?;
        let view = Published { t, context: x, pi: &out.pi, candidates: &f.candidates };
        let y = env.outcome(&view)?;
        observe(f, &mut state, &y)?;
        let round = Round {
            t,
            context: x,
            pi: out.pi,
            candidate: out.candidate,
            prediction: out.prediction,
            preimage: out.preimage,
            actions: out.actions,
            outcome: y,
            value: out.value,
        };
        env.record(&round);
        rounds.push(round);
    }
    Ok((Transcript { header: header(f, config_hash), rounds }, state))
}

pub fn run_online(f: &Forecaster, env: &mut dyn Environment, horizon: usize, config_hash: &str) -> Result<(Transcript, EngineState)> {
    run_online_with(f, env, horizon, config_hash, |_| {})
}

/// Replays fixed `(context, outcome)` pairs.
#[derive(Clone, Debug)]
pub struct SequenceEnvironment {
    pub pairs: Vec<(usize, Vec<f64>)>,
    cursor: usize,
}

impl SequenceEnvironment {
    pub fn new(pairs: Vec<(usize, Vec<f64>)>) -> Self {
        SequenceEnvironment { pairs, cursor: 0 }
    }
}

impl Environment for SequenceEnvironment {
    fn context(&mut self, t: usize) -> Result<usize> {
        self.cursor = t - 1;
        self.pairs
            .get(self.cursor)
            .map(|p| p.0)
            .ok_or_else(|| Error::Protocol(format!("sequence exhausted at round {t}")))
    }

    fn outcome(&mut self, _view: &Published<'_>) -> Result<Vec<f64>> {
        Ok(self.pairs[self.cursor].1.clone())
    }
}
