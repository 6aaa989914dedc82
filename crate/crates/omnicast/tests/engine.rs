use minilp::{ComparisonOp, OptimizationDirection, Problem};
use omnicast::audit::Play;
use omnicast::basis::*;
use omnicast::domain::*;
use omnicast::engine::*;
use omnicast::game::{solve_exact, Matrix};
use omnicast::linearize::*;
use omnicast::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn custom(rows: &[(f64, f64)]) -> LossSpec {
    let rows = rows.iter().map(|&(offset, w)| LinearRow { offset, weights: vec![w] }).collect();
    LossSpec::new(LossKind::CustomTable { rows }, 1).unwrap()
}

fn two_member_cover() -> (CoveredFamily, ActionSet) {
    let basis = monomial_basis(1, 1, InnerMap::Identity).unwrap();
    let acts = ActionSet::labeled(vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let l1 = lift(&custom(&[(0.0, 1.0), (1.0, -1.0), (0.5, 0.0)]), &basis, &acts).unwrap();
    let l2 = lift(&custom(&[(0.2, 0.5), (0.6, -0.5), (0.4, 0.0)]), &basis, &acts).unwrap();
    (gamma_cover(&[l1, l2], 0.01).unwrap(), acts)
}

/// `min_pi max_y pi^T M` through an independent LP solver.
fn lp_value(m: &Matrix) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let v = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    let pi: Vec<_> = (0..m.rows).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    for col in 0..m.cols {
        let mut terms: Vec<_> = pi.iter().enumerate().map(|(r, &var)| (var, m.at(r, col))).collect();
        terms.push((v, -1.0));
        lp.add_constraint(&terms, ComparisonOp::Le, 0.0);
    }
    let ones: Vec<_> = pi.iter().map(|&var| (var, 1.0)).collect();
    lp.add_constraint(&ones, ComparisonOp::Eq, 1.0);
    lp.solve().unwrap().objective()
}

fn bumps(x: usize) -> Vec<f64> {
    let (mean, sd) = [(0.25, 0.15), (0.5, 0.15), (0.75, 0.15), (0.5, 0.3)][x];
    (0..10).map(|k| {
        let y = 0.05 + 0.1 * k as f64;
        (-(y - mean) * (y - mean) / (2.0 * sd * sd)).exp()
    }).collect()
}

struct Bumps {
    rng: ChaCha8Rng,
    x: usize,
}

impl Environment for Bumps {
    fn context(&mut self, _t: usize) -> omnicast::Result<usize> {
        self.x = self.rng.gen_range(0..4);
        Ok(self.x)
    }

    fn outcome(&mut self, _view: &Published<'_>) -> omnicast::Result<Vec<f64>> {
        let k = sample_index(&normalize(bumps(self.x)), &mut self.rng);
        Ok(vec![0.05 + 0.1 * k as f64])
    }
}

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

#[test]
fn event_counts() {
    let (cover, acts) = two_member_cover();
    assert_eq!(cover.members.len(), 2);
    let pols = vec![Policy::constant("c", 0, 2), Policy::threshold("t", 1, 0, 2, 2)];
    let events = build_events(&cover, &acts, &pols, Mode::Exact).unwrap();
    assert_eq!(events.len(), 42);
    assert!(events.iter().enumerate().all(|(k, e)| e.id == k));
    assert_eq!(build_events(&cover, &acts, &[], Mode::Exact).unwrap().len(), 6);
    let empty = CoveredFamily { gamma: 0.01, members: vec![], index: vec![] };
    assert!(build_events(&empty, &acts, &[], Mode::Exact).is_err());
}

#[test]
fn smooth_weights_are_quantal_probabilities() {
    let (cover, _) = two_member_cover();
    let pols = vec![Policy::threshold("t", 1, 0, 2, 2)];
    let eta = 7.0;
    let set = EventSet::new(cover.clone(), 3, pols.clone(), Mode::Smooth { eta_qr: eta }).unwrap();
    for &p in &[0.0, 0.3, 0.8] {
        let v = vec![p];
        for (l, member) in cover.members.iter().enumerate() {
            let q = member.quantal(&v, eta);
            for a in 0..3 {
                assert!((set.weight(set.decision_id(l, a), 1, &v) - q[a]).abs() < 1e-15);
                for b in 0..3 {
                    let id = set.cross_id(l, a, 0, b);
                    let expect = if pols[0].act(1) == b { q[a] } else { 0.0 };
                    assert!((set.weight(id, 1, &v) - expect).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn exact_weights_are_indicators() {
    let (cover, _) = two_member_cover();
    let set = EventSet::new(cover.clone(), 3, vec![Policy::constant("c", 2, 1)], Mode::Exact).unwrap();
    let v = vec![0.9];
    for id in 0..set.len() {
        let w = set.weight(id, 0, &v);
        assert!(w == 0.0 || w == 1.0);
        if let EventPayload::Decision { loss, action } = set.payload(id) {
            assert_eq!(w == 1.0, cover.members[loss].best_response(&v) == action);
        }
    }
}

#[test]
fn expert_distribution_examples() {
    let q = expert_distribution(&[0.0; 6], 0.3);
    assert!(q.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
    let eta = 0.4;
    let q = expert_distribution(&[2.0 / eta], eta);
    assert!((q[0] / q[1] - 2f64.exp()).abs() < 1e-12);
    // Huge exponents stay finite.
    let q = expert_distribution(&[1e6, -1e6, 3.0], 1.0);
    assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(q.iter().all(|x| x.is_finite()));
}

#[test]
fn expert_distribution_normalized_through_a_run() {
    let basis = grid_basis(1.0, 0.25, 1).unwrap();
    let acts = ActionSet::finite(vec![vec![0.0], vec![0.5], vec![1.0]]).unwrap();
    let f = Forecaster::new(basis, vec![LossSpec::squared(1)], acts, vec![], EngineConfig::new(Mode::Exact, 1000, 4)).unwrap();
    let mut env = Bumps { rng: ChaCha8Rng::seed_from_u64(4), x: 0 };
    let mut worst: f64 = 0.0;
    run_online_with(&f, &mut env, 1000, "", |s| {
        let q = expert_distribution(&s.bias, f.eta_mw);
        worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
    })
    .unwrap();
    assert!(worst <= 1e-12);
}

#[test]
fn round_objective_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let raw: Vec<f64> = (0..12).map(|_| rng.gen()).collect();
        let q = normalize(raw);
        let w: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let p: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
        assert_eq!(round_objective(&q, &w, &p, &p), 0.0);
        let sym: Vec<f64> = q.chunks(2).flat_map(|c| [c[0], c[0]]).collect();
        assert_eq!(round_objective(&sym, &w, &p, &y), 0.0);
    }
    assert_eq!(round_objective(&[1.0, 0.0], &[1.0], &[0.75], &[0.25]), 0.5);
}

#[test]
fn single_expert_game_picks_the_lowest_candidate() {
    // Objective p - y with the adversary free to pick y = 0: only p = 0 reaches value 0.
    let grid: Vec<Vec<f64>> = (0..=4).map(|k| vec![k as f64 / 4.0]).collect();
    let dirs = vec![vec![1.0]; grid.len()];
    let sol = solve_exact(&objective_matrix(&dirs, &grid, &grid)).unwrap();
    assert!(sol.upper.abs() < 1e-12);
    assert!((sol.row[0] - 1.0).abs() < 1e-12);
    let zero = objective_matrix(&vec![vec![0.0]; 5], &grid, &grid);
    assert_eq!(solve_exact(&zero).unwrap().upper, 0.0);
}

#[test]
fn round_value_matches_lp_oracle() {
    let basis = lp_basis(2, 1).unwrap();
    let acts = theta_net(1, 1.0 / 9.0).unwrap();
    let mut cfg = EngineConfig::new(Mode::Exact, 2000, 1);
    cfg.grid_step = Some(1.0 / 32.0);
    let f = Forecaster::new(basis, vec![LossSpec::squared(1)], acts, vec![], cfg).unwrap();
    assert_eq!(f.events.len(), 10);
    assert_eq!(f.candidates.len(), 33);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let bias: Vec<f64> = (0..f.bias_len()).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let solved = f.solve_round(&bias, 0).unwrap();
        let oracle = lp_value(&f.round_matrix(&net_weights(&bias, f.eta_mw), 0));
        assert!((solved.value - oracle).abs() <= 1e-4, "{} vs {}", solved.value, oracle);
        let lambda = f.events.cover.members[0].lambda;
        assert!(solved.value <= 1e-4 + lambda * f.grid_step);
        assert!((solved.pi.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_increment_when_prediction_matches_outcome() {
    let basis = grid_basis(1.0, 0.25, 1).unwrap();
    let acts = ActionSet::finite(vec![vec![0.0], vec![0.5], vec![1.0]]).unwrap();
    let f = Forecaster::new(basis, vec![LossSpec::squared(1)], acts, vec![], EngineConfig::new(Mode::Exact, 10, 2)).unwrap();
    let mut state = EngineState::new(&f);
    let out = step(&f, &mut state, 0).unwrap();
    assert!(f.candidates.exact[out.candidate]);
    observe(&f, &mut state, &out.preimage).unwrap();
    assert!(state.bias.iter().all(|&b| b == 0.0));
    assert_eq!(state.t, 1);
}

#[test]
fn inactive_events_do_not_move() {
    let (cover, _) = two_member_cover();
    let set = EventSet::new(cover, 3, vec![], Mode::Exact).unwrap();
    let p = [0.9];
    let weights = set.member_weights(&p);
    let mut bias = vec![0.0; set.len()];
    accumulate(&set, &mut bias, 0, &weights, &p, &[0.1]);
    for id in 0..set.len() {
        if set.weight(id, 0, &p) == 0.0 {
            assert_eq!(bias[id], 0.0);
        } else {
            assert!((bias[id] - 0.8).abs() < 1e-15);
        }
    }
}

#[test]
fn protocol_violations_are_errors() {
    let basis = grid_basis(1.0, 0.5, 1).unwrap();
    let acts = ActionSet::finite(vec![vec![0.0], vec![1.0]]).unwrap();
    let f = Forecaster::new(basis, vec![LossSpec::squared(1)], acts, vec![], EngineConfig::new(Mode::Exact, 10, 2)).unwrap();
    let mut state = EngineState::new(&f);
    assert!(matches!(observe(&f, &mut state, &[0.5]), Err(Error::Protocol(_))));
    step(&f, &mut state, 0).unwrap();
    assert!(matches!(step(&f, &mut state, 0), Err(Error::Protocol(_))));
    assert!(matches!(observe(&f, &mut state, &[2.0]), Err(Error::Domain { .. })));
    observe(&f, &mut state, &[0.5]).unwrap();
    assert!(matches!(observe(&f, &mut state, &[0.5]), Err(Error::Protocol(_))));
}

#[test]
fn empty_and_repeatable_runs() {
    let spec = ForecasterSpec {
        basis: BasisDescriptor::Lp { p: 2, d: 1 },
        losses: vec![LossSpec::squared(1)],
        actions: theta_net(1, 0.25).unwrap(),
        policies: vec![Policy::constant("mid", 2, 4)],
        engine: EngineConfig::new(Mode::Smooth { eta_qr: 20.0 }, 300, 9),
    };
    let f = spec.build().unwrap();
    let (tr, _) = run_online(&f, &mut Bumps { rng: ChaCha8Rng::seed_from_u64(1), x: 0 }, 0, "h").unwrap();
    assert!(tr.is_empty());
    let run = || {
        let f = spec.build().unwrap();
        let (tr, state) = run_online(&f, &mut Bumps { rng: ChaCha8Rng::seed_from_u64(1), x: 0 }, 300, "h").unwrap();
        (serde_json::to_string(&tr).unwrap(), state.bias.iter().map(|b| b.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn transcript_rounds_are_well_formed() {
    let spec = ForecasterSpec {
        basis: BasisDescriptor::Lp { p: 2, d: 1 },
        losses: vec![LossSpec::squared(1)],
        actions: theta_net(1, 0.25).unwrap(),
        policies: vec![],
        engine: EngineConfig::new(Mode::Exact, 400, 5),
    };
    let f = spec.build().unwrap();
    let (tr, state) = run_online(&f, &mut Bumps { rng: ChaCha8Rng::seed_from_u64(2), x: 0 }, 400, "").unwrap();
    let lambda = f.events.cover.members[0].lambda;
    for (k, r) in tr.rounds.iter().enumerate() {
        assert_eq!(r.t, k + 1);
        assert_eq!(r.prediction, f.candidates.vectors[r.candidate]);
        assert!(r.pi.iter().any(|&(c, _)| c == r.candidate));
        assert!((r.pi.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.value <= f.config.eps_solve + lambda * f.grid_step);
        assert_eq!(r.actions[0], f.events.cover.members[0].best_response(&r.prediction));
    }
    assert!(state.bias.iter().all(|b| b.abs() <= 400.0));
}

#[test]
fn swap_regret_shrinks_with_horizon() {
    let horizon = 4000;
    let mut cfg = EngineConfig::new(Mode::Exact, horizon, 6);
    cfg.candidates = CandidateSpec::Mixtures { support: 2, resolution: 10 };
    let acts = theta_net(1, 0.25).unwrap();
    let f = Forecaster::new(lp_basis(2, 1).unwrap(), vec![LossSpec::squared(1)], acts.clone(), vec![], cfg).unwrap();
    let (tr, _) = run_online(&f, &mut Bumps { rng: ChaCha8Rng::seed_from_u64(60), x: 0 }, horizon, "").unwrap();
    let play = Play::from_transcript(&tr, 0, &LossSpec::squared(1), &acts).unwrap();
    let full = play.swap().value;
    let quarter = play.prefix(horizon / 4).swap().value;
    assert!(full <= quarter, "{full} > {quarter}");
}

#[test]
fn mixture_candidates_and_budget() {
    let basis = grid_basis(1.0, 0.25, 1).unwrap();
    let set = build_candidates(&basis, CandidateSpec::Mixtures { support: 2, resolution: 2 }, 0.25, 1000).unwrap();
    // Four one-hot images plus the six midpoints.
    assert_eq!(set.len(), 10);
    assert!(set.exact.iter().filter(|&&e| e).count() == 4);
    assert!(matches!(
        build_candidates(&basis, CandidateSpec::Mixtures { support: 3, resolution: 50 }, 0.25, 100),
        Err(Error::Budget { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabeling_events_permutes_experts(
        bias in prop::collection::vec(-50.0f64..50.0, 12),
        eta in 0.01f64..2.0,
        shift in 1usize..6,
    ) {
        // Six events with two coordinates each; rotate the event labels.
        let n = 2;
        let events = 6;
        let perm: Vec<usize> = (0..events).map(|e| (e + shift) % events).collect();
        let mut moved = vec![0.0; bias.len()];
        for e in 0..events {
            for i in 0..n {
                moved[perm[e] * n + i] = bias[e * n + i];
            }
        }
        let q = expert_distribution(&bias, eta);
        let r = expert_distribution(&moved, eta);
        for e in 0..events {
            for i in 0..n {
                for s in 0..2 {
                    let a = q[2 * (e * n + i) + s];
                    let b = r[2 * (perm[e] * n + i) + s];
                    prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn smooth_events_are_lipschitz(p in 0.0f64..=1.0, dp in -0.05f64..0.05, eta in 0.5f64..30.0) {
        let (cover, _) = two_member_cover();
        let set = EventSet::new(cover.clone(), 3, vec![Policy::constant("c", 1, 1)], Mode::Smooth { eta_qr: eta }).unwrap();
        let p2 = (p + dp).clamp(0.0, 1.0);
        let (v, w) = ([p], [p2]);
        for id in 0..set.len() {
            let l = match set.payload(id) {
                EventPayload::Decision { loss, .. } | EventPayload::Cross { loss, .. } => loss,
            };
            let member = &cover.members[l];
            let gap = member.values(&v).iter().zip(member.values(&w)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let moved = (set.weight(id, 0, &v) - set.weight(id, 0, &w)).abs();
            prop_assert!(moved <= (2.0 * eta * gap).exp() - 1.0 + 1e-12);
        }
    }
}
