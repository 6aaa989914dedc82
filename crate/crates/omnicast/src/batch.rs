//! Online-to-batch: a randomized predictor that picks a training round
//! uniformly and replays that round's game at the query context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{run_online_with, sample_sparse, Forecaster, ForecasterSpec, Mode, Policy, SequenceEnvironment, Transcript};
use crate::error::{Error, Result};

/// One training round as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRound {
    pub context: usize,
    pub candidate: usize,
    pub outcome: Vec<f64>,
}

/// Serialized form: the forecaster spec plus the training log. Bias
/// snapshots are rebuilt on load through the engine's own update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorRecord {
    pub spec: ForecasterSpec,
    pub rounds: Vec<TrainingRound>,
}

#[derive(Clone, Debug)]
pub struct RandomizedPredictor {
    pub record: PredictorRecord,
    pub forecaster: Forecaster,
    /// `snapshots[t]` is the bias table before training round `t + 1`.
    pub snapshots: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPrediction {
    /// Zero-based snapshot index.
    pub snapshot: usize,
    pub candidate: usize,
    pub prediction: Vec<f64>,
    pub preimage: Vec<f64>,
}

pub fn train_offline(samples: &[(usize, Vec<f64>)], spec: &ForecasterSpec) -> Result<(RandomizedPredictor, Transcript)> {
    if samples.is_empty() {
        return Err(Error::Parameter("training needs at least one sample".into()));
    }
    let forecaster = spec.build()?;
    let mut snapshots = Vec::with_capacity(samples.len());
    let mut env = SequenceEnvironment::new(samples.to_vec());
    let (tr, _) = run_online_with(&forecaster, &mut env, samples.len(), "", |state| snapshots.push(state.bias.clone()))?;
    let rounds = tr
        .rounds
        .iter()
        .map(|r| TrainingRound { context: r.context, candidate: r.candidate, outcome: r.outcome.clone() })
        .collect();
    let record = PredictorRecord { spec: spec.clone(), rounds };
    Ok((RandomizedPredictor { record, forecaster, snapshots }, tr))
}

impl RandomizedPredictor {
    pub fn from_record(record: PredictorRecord) -> Result<Self> {
        let forecaster = record.spec.build()?;
        let mut bias = vec![0.0; forecaster.bias_len()];
        let mut snapshots = Vec::with_capacity(record.rounds.len());
        for r in &record.rounds {
            if r.candidate >= forecaster.candidates.len() {
                return Err(Error::Parameter(format!("candidate {} outside the candidate set", r.candidate)));
            }
            snapshots.push(bias.clone());
            let y_image = forecaster.basis.eval(&r.outcome)?;
            crate::engine::accumulate(
                &forecaster.events,
                &mut bias,
                r.context,
                forecaster.weights_at(r.candidate),
                &forecaster.candidates.vectors[r.candidate],
                &y_image,
            );
        }
        Ok(RandomizedPredictor { record, forecaster, snapshots })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// The game distribution of snapshot `t` at context `x`.
    pub fn distribution(&self, t: usize, x: usize) -> Result<Vec<(usize, f64)>> {
        Ok(self.forecaster.solve_round(&self.snapshots[t], x)?.pi)
    }

    pub fn predict_with(&self, x: usize, rng: &mut ChaCha8Rng) -> Result<BatchPrediction> {
        if self.is_empty() {
            return Err(Error::Parameter("predictor has no snapshots".into()));
        }
        let snapshot = rng.gen_range(0..self.len());
        let pi = self.distribution(snapshot, x)?;
        let candidate = sample_sparse(&pi, rng);
        Ok(BatchPrediction {
            snapshot,
            candidate,
            prediction: self.forecaster.candidates.vectors[candidate].clone(),
            preimage: self.forecaster.candidates.preimages[candidate].clone(),
        })
    }

    pub fn predict(&self, x: usize, seed: u64) -> Result<BatchPrediction> {
        self.predict_with(x, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Action distribution of registered agent `agent` at `candidate`.
    pub fn action_distribution(&self, agent: usize, candidate: usize) -> Result<Vec<f64>> {
        let f = &self.forecaster;
        let spec = &f.agents[agent];
        let form = &f.events.cover.members[spec.member];
        let v = &f.candidates.vectors[candidate];
        match f.config.mode {
            Mode::Exact => {
                let mut w = vec![0.0; f.actions.len()];
                w[form.best_response(v)] = 1.0;
                Ok(w)
            }
            Mode::Smooth { eta_qr } => Ok(form.quantal(v, eta_qr)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmniEstimate {
    pub agent: usize,
    pub estimate: f64,
    pub radius: f64,
    /// Policy attaining the max.
    pub policy: usize,
    pub per_policy: Vec<f64>,
}

/// Two-sided Hoeffding radius at 95% for a mean of `[-1, 1]` variables, union
/// bounded over `policies` comparisons.
pub fn hoeffding_radius(samples: usize, policies: usize) -> f64 {
    if samples == 0 {
        return f64::INFINITY;
    }
    2.0 * ((2.0 * policies.max(1) as f64 / 0.05).ln() / (2.0 * samples as f64)).sqrt()
}

/// Monte-Carlo estimate of `max_c E[l(k(p), y) - l(c(x), y)]` for every
/// registered agent. Sample `j` draws from its own RNG stream.
pub fn evaluate_omnipredictor(
    pred: &RandomizedPredictor,
    test: &[(usize, Vec<f64>)],
    policies: &[Policy],
    seed: u64,
) -> Result<Vec<OmniEstimate>> {
    if policies.is_empty() {
        return Err(Error::Parameter("empty policy class".into()));
    }
    let f = &pred.forecaster;
    let agents = f.agents.len();
    let mut sums = vec![vec![0.0; policies.len()]; agents];
    for (j, (x, y)) in test.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let p = pred.predict_with(*x, &mut rng)?;
        for (k, agent) in f.agents.iter().enumerate() {
            let losses = agent.loss.eval_all(&f.actions, y)?;
            let a = crate::engine::sample_index(&pred.action_distribution(k, p.candidate)?, &mut rng);
            for (c, policy) in policies.iter().enumerate() {
                sums[k][c] += losses[a] - losses[policy.act(*x)];
            }
        }
    }
    let radius = hoeffding_radius(test.len(), policies.len());
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(agent, row)| {
            let per_policy: Vec<f64> = row.iter().map(|s| s / test.len().max(1) as f64).collect();
            let policy = argmax_first(&per_policy);
            OmniEstimate { agent, estimate: per_policy[policy], radius, policy, per_policy }
        })
        .collect())
}

/// Exact `max_c E[...]` over a finite weighted support, averaging every
/// snapshot's game distribution.
pub fn expected_omniprediction(
    pred: &RandomizedPredictor,
    support: &[((usize, Vec<f64>), f64)],
    policies: &[Policy],
) -> Result<Vec<OmniEstimate>> {
    let f = &pred.forecaster;
    let mut sums = vec![vec![0.0; policies.len()]; f.agents.len()];
    let t = pred.len() as f64;
    for ((x, y), weight) in support {
        for s in 0..pred.len() {
            for (c_idx, pc) in pred.distribution(s, *x)? {
                let mass = weight * pc / t;
                for (k, agent) in f.agents.iter().enumerate() {
                    let losses = agent.loss.eval_all(&f.actions, y)?;
                    let q = pred.action_distribution(k, c_idx)?;
                    let own: f64 = q.iter().zip(&losses).map(|(a, b)| a * b).sum();
                    for (c, policy) in policies.iter().enumerate() {
                        sums[k][c] += mass * (own - losses[policy.act(*x)]);
                    }
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(agent, per_policy)| {
            let policy = argmax_first(&per_policy);
            OmniEstimate { agent, estimate: per_policy[policy], radius: 0.0, policy, per_policy }
        })
        .collect())
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
