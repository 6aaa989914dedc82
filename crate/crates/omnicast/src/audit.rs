//! Regret and calibration audits recomputed from a transcript.
//!
//! Nothing here reads engine state. Event biases are rebuilt from the sampled
//! predictions and outcomes through the same update the engine applies, so
//! they can be compared with the engine's table bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::domain::{ActionSet, LossSpec};
use crate::engine::{accumulate, sample_index, EventPayload, EventSet, Mode, Policy, Transcript};
use crate::error::{Error, Result};
use crate::linearize::{lift, snap_loss, LiftedLoss};

/// One agent's realized play: contexts, actions and the full loss table.
#[derive(Clone, Debug, PartialEq)]
pub struct Play {
    pub contexts: Vec<usize>,
    pub actions: Vec<usize>,
    /// `losses[t][a]`.
    pub losses: Vec<Vec<f64>>,
}

impl Play {
    pub fn new(contexts: Vec<usize>, actions: Vec<usize>, losses: Vec<Vec<f64>>) -> Result<Self> {
        if contexts.len() != actions.len() || losses.len() != actions.len() {
            return Err(Error::Dimension { expected: actions.len(), got: losses.len().min(contexts.len()) });
        }
        let width = losses.first().map_or(0, |r| r.len());
        if losses.iter().any(|r| r.len() != width) || actions.iter().any(|&a| a >= width.max(1)) {
            return Err(Error::Parameter("loss table does not cover every played action".into()));
        }
        Ok(Play { contexts, actions, losses })
    }

    /// Realized losses of agent column `agent` under `loss`.
    pub fn from_transcript(tr: &Transcript, agent: usize, loss: &LossSpec, actions: &ActionSet) -> Result<Self> {
        let mut played = Vec::with_capacity(tr.len());
        for r in &tr.rounds {
            played.push(*r.actions.get(agent).ok_or_else(|| {
                Error::Parameter(format!("round {} carries no action for agent {agent}", r.t))
            })?);
        }
        Play::with_actions(tr, played, loss, actions)
    }

    /// Same rounds with a substituted action sequence.
    pub fn with_actions(tr: &Transcript, played: Vec<usize>, loss: &LossSpec, actions: &ActionSet) -> Result<Self> {
        let losses = tr.rounds.iter().map(|r| loss.eval_all(actions, &r.outcome)).collect::<Result<Vec<_>>>()?;
        Play::new(tr.rounds.iter().map(|r| r.context).collect(), played, losses)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.losses.first().map_or(0, |r| r.len())
    }

    pub fn prefix(&self, t: usize) -> Play {
        let t = t.min(self.len());
        Play { contexts: self.contexts[..t].to_vec(), actions: self.actions[..t].to_vec(), losses: self.losses[..t].to_vec() }
    }

    /// Mean realized loss.
    pub fn average_loss(&self) -> f64 {
        self.average(self.actions.iter().zip(&self.losses).map(|(&a, row)| row[a]).sum())
    }

    fn average(&self, total: f64) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            total / self.len() as f64
        }
    }

    /// `(1/T) sum_t l(a_t, y_t) - l(c_{a_t}(x_t), y_t)` for `assignment[a] = policy index`.
    pub fn decision_swap_regret(&self, policies: &[Policy], assignment: &[usize]) -> f64 {
        let mut total = 0.0;
        for t in 0..self.len() {
            let a = self.actions[t];
            let b = policies[assignment[a]].act(self.contexts[t]);
            total += self.losses[t][a] - self.losses[t][b];
        }
        self.average(total)
    }

    /// Per action, the policy with the least loss on that action's rounds.
    pub fn worst_assignment(&self, policies: &[Policy]) -> Result<(Vec<usize>, f64)> {
        if policies.is_empty() {
            return Err(Error::Parameter("empty policy class".into()));
        }
        let mut sums = vec![vec![0.0; policies.len()]; self.action_count()];
        for t in 0..self.len() {
            for (c, policy) in policies.iter().enumerate() {
                sums[self.actions[t]][c] += self.losses[t][policy.act(self.contexts[t])];
            }
        }
        let assignment: Vec<usize> = sums.iter().map(|row| first_min(row)).collect();
        let value = self.decision_swap_regret(policies, &assignment);
        Ok((assignment, value))
    }

    /// The value of `bench`, straight from the definition.
    pub fn evaluate(&self, bench: &Benchmark, policies: &[Policy]) -> f64 {
        let mut total = 0.0;
        for t in 0..self.len() {
            let a = self.actions[t];
            let x = self.contexts[t];
            let b = match bench {
                Benchmark::Assignment { policies: assign } => policies[assign[a]].act(x),
                Benchmark::Policy { policy } => policies[*policy].act(x),
                Benchmark::Swap { phi } => phi[a],
                Benchmark::ContextualSwap { policy, phi } => phi[a][policies[*policy].act(x)],
            };
            total += self.losses[t][a] - self.losses[t][b];
        }
        self.average(total)
    }

    pub fn decision_swap(&self, policies: &[Policy]) -> Result<RegretReport> {
        let (assign, value) = self.worst_assignment(policies)?;
        Ok(RegretReport { metric: Metric::DecisionSwap, value, benchmark: Benchmark::Assignment { policies: assign } })
    }

    pub fn omniprediction(&self, policies: &[Policy]) -> Result<RegretReport> {
        if policies.is_empty() {
            return Err(Error::Parameter("empty policy class".into()));
        }
        let mut sums = vec![0.0; policies.len()];
        for t in 0..self.len() {
            for (c, policy) in policies.iter().enumerate() {
                sums[c] += self.losses[t][policy.act(self.contexts[t])];
            }
        }
        let best = first_min(&sums);
        let value = self.evaluate(&Benchmark::Policy { policy: best }, policies);
        Ok(RegretReport { metric: Metric::Omniprediction, value, benchmark: Benchmark::Policy { policy: best } })
    }

    pub fn swap(&self) -> RegretReport {
        let width = self.action_count();
        let mut sums = vec![vec![0.0; width]; width];
        let mut seen = vec![false; width];
        for t in 0..self.len() {
            seen[self.actions[t]] = true;
            for (b, l) in self.losses[t].iter().enumerate() {
                sums[self.actions[t]][b] += l;
            }
        }
        let phi: Vec<usize> = (0..width).map(|a| if seen[a] { first_min(&sums[a]) } else { a }).collect();
        let bench = Benchmark::Swap { phi };
        let value = self.evaluate(&bench, &[]);
        RegretReport { metric: Metric::Swap, value, benchmark: bench }
    }

    /// Max over policies `c` and swaps `phi(a, c(x))`, decomposed on the pair.
    pub fn contextual_swap(&self, policies: &[Policy]) -> Result<RegretReport> {
        if policies.is_empty() {
            return Err(Error::Parameter("empty policy class".into()));
        }
        let width = self.action_count();
        let mut best: Option<RegretReport> = None;
        for (c, policy) in policies.iter().enumerate() {
            let mut sums = vec![vec![vec![0.0; width]; width]; width];
            let mut seen = vec![vec![false; width]; width];
            for t in 0..self.len() {
                let (a, b) = (self.actions[t], policy.act(self.contexts[t]));
                seen[a][b] = true;
                for (k, l) in self.losses[t].iter().enumerate() {
                    sums[a][b][k] += l;
                }
            }
            let phi: Vec<Vec<usize>> = (0..width)
                .map(|a| (0..width).map(|b| if seen[a][b] { first_min(&sums[a][b]) } else { a }).collect())
                .collect();
            let bench = Benchmark::ContextualSwap { policy: c, phi };
            let value = self.evaluate(&bench, policies);
            if best.as_ref().map_or(true, |r| value > r.value) {
                best = Some(RegretReport { metric: Metric::ContextualSwap, value, benchmark: bench });
            }
        }
        Ok(best.expect("nonempty policy class"))
    }
}

fn first_min(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    DecisionSwap,
    Omniprediction,
    Swap,
    ContextualSwap,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::DecisionSwap, Metric::Omniprediction, Metric::Swap, Metric::ContextualSwap];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::DecisionSwap => "decision-swap",
            Metric::Omniprediction => "omniprediction",
            Metric::Swap => "swap",
            Metric::ContextualSwap => "contextual-swap",
        }
    }
}

/// The maximizing comparator of a regret metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Benchmark {
    /// `policies[a]` is the policy index used on rounds where `a` was played.
    Assignment { policies: Vec<usize> },
    Policy { policy: usize },
    Swap { phi: Vec<usize> },
    ContextualSwap { policy: usize, phi: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub metric: Metric,
    pub value: f64,
    pub benchmark: Benchmark,
}

pub fn decision_swap_regret(play: &Play, policies: &[Policy], assignment: &[usize]) -> f64 {
    play.decision_swap_regret(policies, assignment)
}

pub fn worst_assignment(play: &Play, policies: &[Policy]) -> Result<(Vec<usize>, f64)> {
    play.worst_assignment(policies)
}

pub fn omniprediction_regret(play: &Play, policies: &[Policy]) -> Result<RegretReport> {
    play.omniprediction(policies)
}

pub fn swap_regret(play: &Play) -> RegretReport {
    play.swap()
}

pub fn contextual_swap_regret(play: &Play, policies: &[Policy]) -> Result<RegretReport> {
    play.contextual_swap(policies)
}

pub fn regret(play: &Play, metric: Metric, policies: &[Policy]) -> Result<RegretReport> {
    match metric {
        Metric::DecisionSwap => play.decision_swap(policies),
        Metric::Omniprediction => play.omniprediction(policies),
        Metric::Swap => Ok(play.swap()),
        Metric::ContextualSwap => play.contextual_swap(policies),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventBias {
    pub id: usize,
    pub payload: EventPayload,
    /// Total event weight over the rounds.
    pub occupancy: f64,
    pub bias: Vec<f64>,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rounds: usize,
    pub events: Vec<EventBias>,
    pub max_bias: f64,
    /// `(t, max bias over these events after t rounds)`.
    pub curve: Vec<(usize, f64)>,
}

/// Full recomputation: flat bias table (`bias[e * n + i]`), occupancies, and
/// the running max of `|bias|` at each checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Recomputed {
    pub bias: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub curve: Vec<(usize, f64)>,
}

pub fn recompute_biases(tr: &Transcript, events: &EventSet, basis: &Basis, checkpoints: &[usize]) -> Result<Recomputed> {
    let n = basis.n;
    let mut bias = vec![0.0; events.len() * n];
    let mut occupancy = vec![0.0; events.len()];
    let mut curve = Vec::new();
    let mut marks = checkpoints.to_vec();
    marks.sort_unstable();
    marks.dedup();
    let mut next = 0;
    while next < marks.len() && marks[next] == 0 {
        curve.push((0, 0.0));
        next += 1;
    }
    for (k, r) in tr.rounds.iter().enumerate() {
        if r.prediction.len() != n {
            return Err(Error::Dimension { expected: n, got: r.prediction.len() });
        }
        let weights = events.member_weights(&r.prediction);
        let y_image = basis.eval(&r.outcome)?;
        accumulate(events, &mut bias, r.context, &weights, &r.prediction, &y_image);
        events.for_each_active(r.context, &weights, |e, w| occupancy[e] += w);
        while next < marks.len() && marks[next] == k + 1 {
            curve.push((k + 1, bias.iter().fold(0.0, |m: f64, b| m.max(b.abs()))));
            next += 1;
        }
    }
    Ok(Recomputed { bias, occupancy, curve })
}

fn report(rec: &Recomputed, events: &EventSet, n: usize, rounds: usize, keep: impl Fn(&EventPayload) -> bool, checkpoints: &[usize], tr: &Transcript, basis: &Basis) -> Result<CalibrationReport> {
    let mut out = Vec::new();
    let mut max_bias: f64 = 0.0;
    for id in 0..events.len() {
        let payload = events.payload(id);
        if !keep(&payload) {
            continue;
        }
        let bias = rec.bias[id * n..(id + 1) * n].to_vec();
        let norm = bias.iter().fold(0.0, |m: f64, b| m.max(b.abs()));
        max_bias = max_bias.max(norm);
        out.push(EventBias { id, payload, occupancy: rec.occupancy[id], bias, norm });
    }
    // Curves restricted to the kept events.
    let mut curve = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        let prefix = recompute_biases(&tr.prefix(t), events, basis, &[])?;
        let m = (0..events.len())
            .filter(|&id| keep(&events.payload(id)))
            .flat_map(|id| prefix.bias[id * n..(id + 1) * n].to_vec())
            .fold(0.0, |m: f64, b| m.max(b.abs()));
        curve.push((t.min(tr.len()), m));
    }
    Ok(CalibrationReport { rounds, events: out, max_bias, curve })
}

pub fn decision_calibration(tr: &Transcript, events: &EventSet, basis: &Basis, checkpoints: &[usize]) -> Result<CalibrationReport> {
    let rec = recompute_biases(tr, events, basis, &[])?;
    report(&rec, events, basis.n, tr.len(), |p| matches!(p, EventPayload::Decision { .. }), checkpoints, tr, basis)
}

pub fn cross_calibration(tr: &Transcript, events: &EventSet, basis: &Basis, checkpoints: &[usize]) -> Result<CalibrationReport> {
    let rec = recompute_biases(tr, events, basis, &[])?;
    report(&rec, events, basis.n, tr.len(), |p| matches!(p, EventPayload::Cross { .. }), checkpoints, tr, basis)
}

/// Both sides of the regret decomposition for one exact-mode agent and one
/// assignment, all losses taken as lifted forms at basis vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Regret against the true outcomes' images.
    pub outcome_regret: f64,
    /// Regret against the sampled predictions.
    pub forecast_regret: f64,
    pub decision_term: f64,
    pub cross_term: f64,
    pub holds: bool,
    /// `min_c sum_t l(c(x_t), p_t) - sum_t l(a_t, p_t)` over policies and the assignment.
    pub best_response_margin: f64,
    pub best_response_holds: bool,
}

/// Checks `outcome_regret <= forecast_regret + (decision_term + cross_term) / T`
/// and the per-policy best-response inequality.
pub fn decomposition_check(
    tr: &Transcript,
    events: &EventSet,
    basis: &Basis,
    member: usize,
    agent: usize,
    assignment: &[usize],
) -> Result<Decomposition> {
    let rec = recompute_biases(tr, events, basis, &[])?;
    decomposition_check_with(tr, events, basis, &rec, member, agent, assignment)
}

/// [`decomposition_check`] against biases already recomputed from `tr`.
pub fn decomposition_check_with(
    tr: &Transcript,
    events: &EventSet,
    basis: &Basis,
    rec: &Recomputed,
    member: usize,
    agent: usize,
    assignment: &[usize],
) -> Result<Decomposition> {
    if events.mode != Mode::Exact {
        return Err(Error::Parameter("the decomposition check needs exact-mode events".into()));
    }
    let form: &LiftedLoss = &events.cover.members[member];
    let policies = &events.policies;
    if assignment.len() != events.actions || assignment.iter().any(|&c| c >= policies.len()) {
        return Err(Error::Parameter("assignment must name a policy for every action".into()));
    }
    let n = basis.n;
    let mut outcome_sum = 0.0;
    let mut forecast_sum = 0.0;
    let mut own = 0.0;
    let mut per_policy = vec![0.0; policies.len()];
    let mut assigned = 0.0;
    for r in &tr.rounds {
        let a = *r.actions.get(agent).ok_or_else(|| Error::Parameter(format!("no action for agent {agent}")))?;
        let b = policies[assignment[a]].act(r.context);
        let y_image = basis.eval(&r.outcome)?;
        outcome_sum += form.value(a, &y_image) - form.value(b, &y_image);
        forecast_sum += form.value(a, &r.prediction) - form.value(b, &r.prediction);
        own += form.value(a, &r.prediction);
        assigned += form.value(b, &r.prediction);
        for (c, p) in policies.iter().enumerate() {
            per_policy[c] += form.value(p.act(r.context), &r.prediction);
        }
    }
    let norm = |id: usize| rec.bias[id * n..(id + 1) * n].iter().fold(0.0, |m: f64, b| m.max(b.abs()));
    let l1 = |a: usize| form.coefs[a].iter().map(|c| c.abs()).sum::<f64>();
    let decision_term: f64 = (0..events.actions).map(|a| l1(a) * norm(events.decision_id(member, a))).sum();
    let mut cross_term = 0.0;
    for a in 0..events.actions {
        for b in 0..events.actions {
            cross_term += l1(b) * norm(events.cross_id(member, a, assignment[a], b));
        }
    }
    let t = tr.len().max(1) as f64;
    let outcome_regret = outcome_sum / t;
    let forecast_regret = forecast_sum / t;
    let rhs = forecast_regret + (decision_term + cross_term) / t;
    let tol = 1e-12 * (1.0 + rhs.abs() + outcome_regret.abs());
    let margin = per_policy.iter().cloned().chain(std::iter::once(assigned)).fold(f64::INFINITY, f64::min) - own;
    let scale = 1e-12 * (1.0 + own.abs());
    Ok(Decomposition {
        outcome_regret,
        forecast_regret,
        decision_term,
        cross_term,
        holds: outcome_regret <= rhs + tol,
        best_response_margin: margin,
        best_response_holds: margin >= -scale,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub actions: Vec<usize>,
    /// Realized loss of each replayed action.
    pub losses: Vec<f64>,
}

/// Actions a possibly unregistered agent would have taken on this transcript.
pub fn agent_replay(tr: &Transcript, loss: &LossSpec, basis: &Basis, actions: &ActionSet, gamma: f64, mode: Mode, seed: u64) -> Result<Replay> {
    let form = snap_loss(&lift(loss, basis, actions)?, gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut played = Vec::with_capacity(tr.len());
    let mut losses = Vec::with_capacity(tr.len());
    for r in &tr.rounds {
        let a = match mode {
            Mode::Exact => form.best_response(&r.prediction),
            Mode::Smooth { eta_qr } => sample_index(&form.quantal(&r.prediction, eta_qr), &mut rng),
        };
        losses.push(loss.eval(actions.get(a), &r.outcome)?);
        played.push(a);
    }
    Ok(Replay { actions: played, losses })
}

/// Geometric checkpoints `T/64, T/32, ..., T`, deduplicated and positive.
pub fn checkpoints(horizon: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=6).rev().map(|k| horizon >> k).filter(|&t| t > 0).collect();
    out.dedup();
    out
}
