//! Orchestration for every subcommand and the artifacts they write.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use omnicast::audit::{
    cross_calibration, decision_calibration, decomposition_check_with, recompute_biases, regret, CalibrationReport,
    Decomposition, Play, RegretReport,
};
use omnicast::basis::{audit_basis, Basis};
use omnicast::batch::{evaluate_omnipredictor, train_offline, OmniEstimate, PredictorRecord, RandomizedPredictor};
use omnicast::engine::{header, run_online, Forecaster, Mode, Round, Transcript, TranscriptHeader};
use serde::{Deserialize, Serialize};

use crate::config::{Assertion, EnvironmentSpec, ExperimentConfig};
use crate::env::{self, ContextStream, IidEnvironment};

pub const OUTPUT_ENV: &str = "OMNICAST_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: usize,
    pub metric: String,
    pub loss: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub config_hash: String,
    pub rounds: usize,
    pub max_bias: f64,
    pub normalized_bias: f64,
    /// Audit biases equal the engine table bit for bit; absent when the
    /// engine table is not available.
    pub biases_match: Option<bool>,
    pub decision: CalibrationReport,
    pub cross: CalibrationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRegret {
    pub loss: usize,
    pub reports: Vec<RegretReport>,
    /// Exact mode only: one check per assignment of policies to actions.
    pub decompositions_checked: usize,
    pub decompositions_hold: bool,
    pub best_response_holds: bool,
    /// The decomposition at the worst assignment.
    pub worst_decomposition: Option<Decomposition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub assertion: Assertion,
    pub value: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretFile {
    pub config_hash: String,
    pub rounds: usize,
    pub losses: Vec<LossRegret>,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct Audited {
    pub curves: Vec<CurveRow>,
    pub calibration: CalibrationFile,
    pub regret: RegretFile,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config_hash: String,
    pub forecaster: Forecaster,
    pub transcript: Transcript,
    pub engine_bias: Vec<f64>,
    pub audited: Audited,
}

/// Assignments beyond this count are not enumerated for the decomposition check.
const MAX_ASSIGNMENTS: usize = 4096;

pub fn execute(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    let hash = cfg.hash();
    let forecaster = cfg.forecaster_spec()?.build()?;
    let (transcript, state) = {
        let mut environment = env::build(cfg, &forecaster, base)?;
        run_online(&forecaster, environment.as_mut(), cfg.horizon, &hash)?
    };
    let audited = audit_transcript(cfg, &forecaster, &transcript, Some(&state.bias))?;
    Ok(RunOutput { config_hash: hash, forecaster, transcript, engine_bias: state.bias, audited })
}

/// Every audit the harness reports, computed from the transcript alone.
pub fn audit_transcript(cfg: &ExperimentConfig, f: &Forecaster, tr: &Transcript, engine_bias: Option<&[f64]>) -> Result<Audited> {
    let hash = tr.header.config_hash.clone();
    let policies = &f.events.policies;
    let marks = cfg.checkpoints();
    let rec = recompute_biases(tr, &f.events, &f.basis, &[])?;
    let biases_match = engine_bias.map(|b| b.len() == rec.bias.len() && b.iter().zip(&rec.bias).all(|(x, y)| x.to_bits() == y.to_bits()));
    let decision = decision_calibration(tr, &f.events, &f.basis, &marks)?;
    let cross = cross_calibration(tr, &f.events, &f.basis, &marks)?;
    let max_bias = decision.max_bias.max(cross.max_bias);
    let normalized_bias = if tr.is_empty() { 0.0 } else { max_bias / tr.len() as f64 };

    let mut curves = Vec::new();
    let mut losses = Vec::new();
    for (k, agent) in f.agents.iter().enumerate() {
        let play = Play::from_transcript(tr, k, &agent.loss, &f.actions)?;
        for &t in &marks {
            let prefix = play.prefix(t);
            for &m in &cfg.audit.metrics {
                curves.push(CurveRow { t, metric: m.name().into(), loss: k, value: regret(&prefix, m, policies)?.value });
            }
        }
        let reports = cfg.audit.metrics.iter().map(|&m| regret(&play, m, policies)).collect::<Result<Vec<_>, _>>()?;
        let mut entry = LossRegret {
            loss: k,
            reports,
            decompositions_checked: 0,
            decompositions_hold: true,
            best_response_holds: true,
            worst_decomposition: None,
        };
        if f.config.mode == Mode::Exact && !policies.is_empty() {
            let total = policies.len().checked_pow(f.actions.len() as u32).unwrap_or(usize::MAX);
            let worst = play.worst_assignment(policies)?.0;
            let mut check = |assign: &[usize]| -> Result<()> {
                let d = decomposition_check_with(tr, &f.events, &f.basis, &rec, agent.member, k, assign)?;
                entry.decompositions_checked += 1;
                entry.decompositions_hold &= d.holds;
                entry.best_response_holds &= d.best_response_holds;
                if assign == worst.as_slice() {
                    entry.worst_decomposition = Some(d);
                }
                Ok(())
            };
            if total <= MAX_ASSIGNMENTS {
                let mut assign = vec![0usize; f.actions.len()];
                for flat in 0..total {
                    let mut rest = flat;
                    for slot in assign.iter_mut().rev() {
                        *slot = rest % policies.len();
                        rest /= policies.len();
                    }
                    check(&assign)?;
                }
            } else {
                check(&worst)?;
            }
        }
        losses.push(entry);
    }

    let mut assertions = Vec::new();
    for a in &cfg.audit.assertions {
        let (value, passed) = match a {
            Assertion::Regret { metric, loss, max } => {
                let entry = losses.get(*loss).with_context(|| format!("assertion names loss {loss}"))?;
                let value = entry
                    .reports
                    .iter()
                    .find(|r| r.metric == *metric)
                    .map(|r| r.value)
                    .with_context(|| format!("metric {} not audited", metric.name()))?;
                (value, value <= *max)
            }
            Assertion::NormalizedBias { max } => (normalized_bias, normalized_bias <= *max),
            Assertion::BiasesMatch => {
                let ok = biases_match.unwrap_or(false);
                (if ok { 1.0 } else { 0.0 }, ok)
            }
        };
        assertions.push(AssertionResult { assertion: a.clone(), value, passed });
    }
    let passed = assertions.iter().all(|a| a.passed)
        && losses.iter().all(|l| l.decompositions_hold && l.best_response_holds)
        && biases_match.unwrap_or(true);
    Ok(Audited {
        curves,
        calibration: CalibrationFile {
            config_hash: hash.clone(),
            rounds: tr.len(),
            max_bias,
            normalized_bias,
            biases_match,
            decision,
            cross,
        },
        regret: RegretFile { config_hash: hash, rounds: tr.len(), losses, assertions, passed },
    })
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TranscriptHeader,
}

pub fn transcript_jsonl(tr: &Transcript) -> Result<String> {
    let mut out = serde_json::to_string(&HeaderLine { header: tr.header.clone() })?;
    out.push('\n');
    for r in &tr.rounds {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_transcript(path: &Path) -> Result<Transcript> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().context("empty transcript")??;
    let header: HeaderLine = serde_json::from_str(&first).context("transcript header")?;
    let mut rounds = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Round = serde_json::from_str(&line).with_context(|| format!("transcript line {}", k + 2))?;
        rounds.push(r);
    }
    for w in rounds.windows(2) {
        if w[1].t <= w[0].t {
            bail!("transcript rounds are not strictly increasing at t = {}", w[1].t);
        }
    }
    Ok(Transcript { header: header.header, rounds })
}

pub fn curves_csv(rows: &[CurveRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?)
}

pub fn read_curves(text: &str) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<CurveRow>, _>>()?)
}

pub fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(path)
}

pub fn write_audit(a: &Audited, dir: &Path) -> Result<()> {
    write(dir, "curves.csv", &curves_csv(&a.curves)?)?;
    write(dir, "calibration.json", &pretty(&a.calibration)?)?;
    write(dir, "regret.json", &pretty(&a.regret)?)?;
    Ok(())
}

pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    write(dir, "transcript.jsonl", &transcript_jsonl(&out.transcript)?)?;
    write_audit(&out.audited, dir)
}

/// Re-audits a stored transcript under `cfg`.
pub fn report(cfg: &ExperimentConfig, transcript: &Path) -> Result<Audited> {
    let tr = read_transcript(transcript)?;
    if tr.header.config_hash != cfg.hash() {
        bail!("transcript was produced by config {} but this config hashes to {}", tr.header.config_hash, cfg.hash());
    }
    let f = cfg.forecaster_spec()?.build()?;
    if header(&f, &tr.header.config_hash) != tr.header {
        bail!("transcript header does not match the rebuilt forecaster");
    }
    audit_transcript(cfg, &f, &tr, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisReport {
    pub config_hash: String,
    pub n: usize,
    pub lambda: f64,
    pub delta: f64,
    pub max_error: f64,
    pub max_coef_l1: f64,
    pub max_lambda: f64,
    pub lambda_respected: bool,
    pub within_delta: bool,
    pub points: usize,
    pub passed: bool,
}

const AUDIT_SLACK: f64 = 1e-9;

pub fn basis_audit(cfg: &ExperimentConfig) -> Result<BasisReport> {
    let basis = Basis::build(&cfg.basis)?;
    let actions = cfg.actions.build()?;
    let a = audit_basis(&basis, &cfg.losses, &actions, cfg.audit.grid_points)?;
    // Exact families have delta = 0; allow rounding in the lifted sums.
    let within_delta = a.max_error <= basis.delta + AUDIT_SLACK;
    Ok(BasisReport {
        config_hash: cfg.hash(),
        n: basis.n,
        lambda: basis.lambda,
        delta: basis.delta,
        max_error: a.max_error,
        max_coef_l1: a.max_coef_l1,
        max_lambda: a.max_lambda,
        lambda_respected: a.lambda_respected,
        within_delta,
        points: a.points,
        passed: within_delta && a.lambda_respected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub config_hash: String,
    pub train: usize,
    pub test: usize,
    pub estimates: Vec<OmniEstimate>,
    pub epsilon: Option<f64>,
    /// Per agent: estimate at or below epsilon.
    pub within_epsilon: Vec<bool>,
    pub passed: bool,
}

/// Trains on `train` i.i.d. samples and evaluates on a fresh test draw.
pub fn batch(cfg: &ExperimentConfig) -> Result<(RandomizedPredictor, BatchReport)> {
    let spec = cfg.batch.as_ref().context("config has no batch section")?;
    let EnvironmentSpec::Iid { contexts, outcomes, .. } = &cfg.environment else {
        bail!("batch mode needs an iid environment");
    };
    let train = spec.train.unwrap_or(cfg.horizon);
    let mut cfg_train = cfg.clone();
    cfg_train.horizon = train;
    let seed = cfg.environment_seed();
    let stream = ContextStream::new(contexts.clone(), cfg.contexts);
    let samples = IidEnvironment::new(stream.clone(), outcomes.clone(), seed).samples(train);
    let tests = IidEnvironment::new(stream, outcomes.clone(), seed ^ 0x7E57_7E57).samples(spec.test);
    let (pred, _) = train_offline(&samples, &cfg_train.forecaster_spec()?)?;
    let estimates = evaluate_omnipredictor(&pred, &tests, &pred.forecaster.events.policies, cfg.seed)?;
    let within_epsilon: Vec<bool> = estimates.iter().map(|e| spec.epsilon.map_or(true, |eps| e.estimate <= eps)).collect();
    let passed = within_epsilon.iter().all(|&w| w);
    let report = BatchReport { config_hash: cfg.hash(), train, test: spec.test, estimates, epsilon: spec.epsilon, within_epsilon, passed };
    Ok((pred, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorFile {
    pub config_hash: String,
    pub predictor: PredictorRecord,
}

pub fn write_batch(pred: &RandomizedPredictor, report: &BatchReport, dir: &Path) -> Result<()> {
    let file = PredictorFile { config_hash: report.config_hash.clone(), predictor: pred.record.clone() };
    write(dir, "predictor.json", &pretty(&file)?)?;
    write(dir, "batch_report.json", &pretty(report)?)?;
    Ok(())
}

pub fn load_predictor(path: &Path) -> Result<RandomizedPredictor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PredictorFile = serde_json::from_str(&text)?;
    Ok(RandomizedPredictor::from_record(file.predictor)?)
}

pub fn write_basis(report: &BasisReport, dir: &Path) -> Result<()> {
    write(dir, "basis_audit.json", &pretty(report)?)?;
    Ok(())
}
