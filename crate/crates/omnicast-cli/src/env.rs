//! Outcome environments for the harness.

use std::path::Path;

use anyhow::{bail, Context, Result};
use omnicast::engine::{accumulate, Environment, Forecaster, Published, Round, SequenceEnvironment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::config::{ContextSpec, EnvironmentSpec, ExperimentConfig, OutcomeTable};

fn draw(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Context source shared by every environment kind.
#[derive(Clone, Debug)]
pub struct ContextStream {
    spec: ContextSpec,
    alphabet: usize,
}

impl ContextStream {
    pub fn new(spec: ContextSpec, alphabet: usize) -> Self {
        ContextStream { spec, alphabet }
    }

    pub fn next(&self, t: usize, rng: &mut ChaCha8Rng) -> usize {
        match &self.spec {
            ContextSpec::Uniform => rng.gen_range(0..self.alphabet),
            ContextSpec::Weights { weights } => draw(weights, rng),
            ContextSpec::Cycle => (t - 1) % self.alphabet,
            ContextSpec::Fixed { context } => *context,
        }
    }
}

/// I.i.d. draws of `(x, y)`.
#[derive(Clone, Debug)]
pub struct IidEnvironment {
    contexts: ContextStream,
    table: OutcomeTable,
    rng: ChaCha8Rng,
    current: usize,
}

impl IidEnvironment {
    pub fn new(contexts: ContextStream, table: OutcomeTable, seed: u64) -> Self {
        IidEnvironment { contexts, table, rng: ChaCha8Rng::seed_from_u64(seed), current: 0 }
    }

    pub fn sample(&mut self, t: usize) -> (usize, Vec<f64>) {
        let x = self.contexts.next(t, &mut self.rng);
        let row = if self.table.weights.len() == 1 { 0 } else { x };
        let k = draw(&self.table.weights[row], &mut self.rng);
        (x, self.table.support[k].clone())
    }

    pub fn samples(&mut self, count: usize) -> Vec<(usize, Vec<f64>)> {
        (1..=count).map(|t| self.sample(t)).collect()
    }
}

impl Environment for IidEnvironment {
    fn context(&mut self, t: usize) -> omnicast::Result<usize> {
        self.current = self.contexts.next(t, &mut self.rng);
        Ok(self.current)
    }

    fn outcome(&mut self, _view: &Published<'_>) -> omnicast::Result<Vec<f64>> {
        let row = if self.table.weights.len() == 1 { 0 } else { self.current };
        let k = draw(&self.table.weights[row], &mut self.rng);
        Ok(self.table.support[k].clone())
    }
}

/// Greedy stress adversary. It tracks the event biases from published rounds
/// and plays the grid outcome that maximizes the expected max |bias| one step
/// ahead under the published distribution. Ties go to the first grid point.
pub struct BiasMaxEnvironment<'a> {
    forecaster: &'a Forecaster,
    contexts: ContextStream,
    rng: ChaCha8Rng,
    bias: Vec<f64>,
}

impl<'a> BiasMaxEnvironment<'a> {
    pub fn new(forecaster: &'a Forecaster, contexts: ContextStream, seed: u64) -> Self {
        BiasMaxEnvironment {
            forecaster,
            contexts,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bias: vec![0.0; forecaster.bias_len()],
        }
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Index into the forecaster's adversary grid.
    pub fn choose(&self, context: usize, pi: &[(usize, f64)]) -> usize {
        let f = self.forecaster;
        let n = f.n();
        let events = f.events.len();
        let mut lead = vec![0.0; events * n];
        let mut mass = vec![0.0; events];
        for &(c, prob) in pi {
            let p = &f.candidates.vectors[c];
            f.events.for_each_active(context, f.weights_at(c), |e, w| {
                mass[e] += prob * w;
                for i in 0..n {
                    lead[e * n + i] += prob * w * p[i];
                }
            });
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, image) in f.adversary_images.iter().enumerate() {
            let mut score: f64 = 0.0;
            for e in 0..events {
                for i in 0..n {
                    score = score.max((self.bias[e * n + i] + lead[e * n + i] - mass[e] * image[i]).abs());
                }
            }
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        best
    }
}

impl<'a> Environment for BiasMaxEnvironment<'a> {
    fn context(&mut self, t: usize) -> omnicast::Result<usize> {
        Ok(self.contexts.next(t, &mut self.rng))
    }

    fn outcome(&mut self, view: &Published<'_>) -> omnicast::Result<Vec<f64>> {
        Ok(self.forecaster.adversary_outcomes[self.choose(view.context, view.pi)].clone())
    }

    fn record(&mut self, round: &Round) {
        let f = self.forecaster;
        if let Ok(y) = f.basis.eval(&round.outcome) {
            accumulate(&f.events, &mut self.bias, round.context, f.weights_at(round.candidate), &round.prediction, &y);
        }
    }
}

#[derive(Deserialize)]
struct ReplayLine {
    context: usize,
    outcome: Vec<f64>,
}

/// Reads `(context, outcome)` pairs from JSONL. Lines without both fields,
/// such as a transcript header, are skipped.
pub fn read_replay(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).with_context(|| format!("line {}", k + 1))?;
        if value.get("context").is_none() || value.get("outcome").is_none() {
            continue;
        }
        let rec: ReplayLine = serde_json::from_value(value).with_context(|| format!("line {}", k + 1))?;
        out.push((rec.context, rec.outcome));
    }
    Ok(out)
}

/// Builds the configured environment. The forecaster is needed by the adversary.
pub fn build<'a>(cfg: &ExperimentConfig, forecaster: &'a Forecaster, base: &Path) -> Result<Box<dyn Environment + 'a>> {
    let seed = cfg.environment_seed();
    Ok(match &cfg.environment {
        EnvironmentSpec::Iid { contexts, outcomes, .. } => {
            Box::new(IidEnvironment::new(ContextStream::new(contexts.clone(), cfg.contexts), outcomes.clone(), seed))
        }
        EnvironmentSpec::AdversarialBiasMax { contexts, .. } => {
            Box::new(BiasMaxEnvironment::new(forecaster, ContextStream::new(contexts.clone(), cfg.contexts), seed))
        }
        EnvironmentSpec::Replay { path } => {
            let full = base.join(path);
            let pairs = read_replay(&full)?;
            if pairs.len() < cfg.horizon {
                bail!("replay file {} has {} rounds, horizon is {}", full.display(), pairs.len(), cfg.horizon);
            }
            Box::new(SequenceEnvironment::new(pairs))
        }
    })
}
