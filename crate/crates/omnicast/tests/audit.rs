use omnicast::audit::*;
use omnicast::basis::*;
use omnicast::domain::*;
use omnicast::engine::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_play(rng: &mut ChaCha8Rng, t: usize, actions: usize, contexts: usize) -> Play {
    let ctx = (0..t).map(|_| rng.gen_range(0..contexts)).collect();
    let acts = (0..t).map(|_| rng.gen_range(0..actions)).collect();
    let losses = (0..t).map(|_| (0..actions).map(|_| rng.gen()).collect()).collect();
    Play::new(ctx, acts, losses).unwrap()
}

fn random_policies(rng: &mut ChaCha8Rng, count: usize, actions: usize, contexts: usize) -> Vec<Policy> {
    (0..count)
        .map(|k| Policy { name: format!("p{k}"), table: (0..contexts).map(|_| rng.gen_range(0..actions)).collect() })
        .collect()
}

/// Every map from `0..len` into `0..width`.
fn all_maps(len: usize, width: usize) -> Vec<Vec<usize>> {
    (0..width.pow(len as u32))
        .map(|mut flat| {
            (0..len)
                .map(|_| {
                    let v = flat % width;
                    flat /= width;
                    v
                })
                .collect()
        })
        .collect()
}

#[test]
fn decision_swap_examples() {
    let sq = LossSpec::squared(1);
    let acts = ActionSet::finite(vec![vec![0.0], vec![1.0]]).unwrap();
    let losses: Vec<Vec<f64>> = [[1.0], [1.0]].iter().map(|y| sq.eval_all(&acts, y).unwrap()).collect();
    let play = Play::new(vec![0, 0], vec![0, 1], losses).unwrap();
    let pols = vec![Policy::constant("zero", 0, 1), Policy::constant("one", 1, 1)];
    assert_eq!(play.decision_swap_regret(&pols, &[0, 1]), 0.0);
    assert_eq!(play.decision_swap_regret(&pols, &[1, 1]), 0.5);
    let (assign, value) = play.worst_assignment(&pols[1..]).unwrap();
    assert_eq!((assign, value), (vec![0, 0], 0.5));
}

#[test]
fn worst_assignment_dominates_random_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let play = random_play(&mut rng, 60, 3, 4);
    let pols = random_policies(&mut rng, 4, 3, 4);
    let (_, best) = play.worst_assignment(&pols).unwrap();
    for _ in 0..100 {
        let assign: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        assert!(play.decision_swap_regret(&pols, &assign) <= best + 1e-15);
    }
}

#[test]
fn worst_assignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..20 {
        let play = random_play(&mut rng, 20, 2, 3);
        let pols = random_policies(&mut rng, 3, 2, 3);
        let brute = all_maps(2, 3).iter().map(|a| play.decision_swap_regret(&pols, a)).fold(f64::NEG_INFINITY, f64::max);
        let (assign, value) = play.worst_assignment(&pols).unwrap();
        assert!((value - brute).abs() < 1e-12);
        assert_eq!(value, play.evaluate(&Benchmark::Assignment { policies: assign }, &pols));
    }
}

#[test]
fn realized_sequence_as_policy_gives_nonnegative_regret() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // Context = round index, so a policy can replay the actions.
    let t = 25;
    let mut play = random_play(&mut rng, t, 3, 1);
    play.contexts = (0..t).collect();
    let mut pols = random_policies(&mut rng, 2, 3, t);
    pols.push(Policy { name: "replay".into(), table: play.actions.clone() });
    assert!(play.worst_assignment(&pols).unwrap().1 >= 0.0);
}

#[test]
fn omniprediction_relations() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..50 {
        let play = random_play(&mut rng, 30, 3, 4);
        let pols = random_policies(&mut rng, 3, 3, 4);
        let omni = play.omniprediction(&pols).unwrap();
        let best = (0..pols.len()).map(|c| play.decision_swap_regret(&pols, &[c; 3])).fold(f64::NEG_INFINITY, f64::max);
        assert!((omni.value - best).abs() < 1e-12);
        assert!(omni.value <= play.worst_assignment(&pols).unwrap().1 + 1e-12);
        let single = play.omniprediction(&pols[..1]).unwrap().value;
        let direct: f64 = (0..play.len())
            .map(|t| play.losses[t][play.actions[t]] - play.losses[t][pols[0].act(play.contexts[t])])
            .sum::<f64>()
            / play.len() as f64;
        assert!((single - direct).abs() < 1e-12);
    }
}

#[test]
fn swap_regret_relations() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..20 {
        let play = random_play(&mut rng, 20, 3, 1);
        assert_eq!(play.evaluate(&Benchmark::Swap { phi: vec![0, 1, 2] }, &[]), 0.0);
        let brute = all_maps(3, 3)
            .into_iter()
            .map(|phi| play.evaluate(&Benchmark::Swap { phi }, &[]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((play.swap().value - brute).abs() < 1e-12);
    }
    // One played action: external regret against the best fixed action.
    let mut play = random_play(&mut rng, 20, 3, 1);
    play.actions = vec![1; 20];
    let totals: Vec<f64> = (0..3).map(|b| play.losses.iter().map(|r| r[b]).sum::<f64>()).collect();
    let external = (totals[1] - totals.iter().cloned().fold(f64::INFINITY, f64::min)) / 20.0;
    assert!((play.swap().value - external).abs() < 1e-12);
}

#[test]
fn contextual_swap_relations() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..20 {
        let play = random_play(&mut rng, 24, 2, 3);
        let pols = random_policies(&mut rng, 2, 2, 3);
        let ctx = play.contextual_swap(&pols).unwrap();
        assert_eq!(ctx.value, play.evaluate(&ctx.benchmark, &pols));
        let ignore_second = Benchmark::ContextualSwap { policy: 0, phi: vec![vec![0, 0], vec![1, 1]] };
        assert_eq!(play.evaluate(&ignore_second, &pols), 0.0);
        // Swap-closed class: psi(c(x)) for every policy c and map psi.
        let mut closed = Vec::new();
        for c in &pols {
            for psi in all_maps(2, 2) {
                closed.push(Policy { name: String::new(), table: c.table.iter().map(|&b| psi[b]).collect() });
            }
        }
        // phi(a, c(x)) is the closed-class policy psi_a(c(x)) on the rounds of action a.
        let brute = all_maps(4, 2)
            .into_iter()
            .flat_map(|flat| (0..pols.len()).map(move |c| (c, flat.clone())))
            .map(|(c, flat)| {
                let phi = vec![vec![flat[0], flat[1]], vec![flat[2], flat[3]]];
                play.evaluate(&Benchmark::ContextualSwap { policy: c, phi }, &pols)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((ctx.value - brute).abs() < 1e-12);
        assert!(ctx.value <= play.worst_assignment(&closed).unwrap().1 + 1e-12);
    }
    let play = random_play(&mut rng, 30, 3, 2);
    let single = vec![Policy::constant("c", 0, 2)];
    let swap = play.swap();
    if let Benchmark::Swap { phi } = &swap.benchmark {
        let lifted: Vec<Vec<usize>> = phi.iter().map(|&b| vec![b; 3]).collect();
        let v = play.evaluate(&Benchmark::ContextualSwap { policy: 0, phi: lifted }, &single);
        assert!((v - swap.value).abs() < 1e-12);
    }
    assert!(play.contextual_swap(&single).unwrap().value >= swap.value - 1e-12);
}

fn small_forecaster(mode: Mode, horizon: usize, seed: u64) -> Forecaster {
    let acts = ActionSet::finite(vec![vec![0.0], vec![0.5], vec![1.0]]).unwrap();
    let pols = vec![Policy::constant("mid", 1, 2), Policy::threshold("step", 1, 0, 2, 2)];
    let mut cfg = EngineConfig::new(mode, horizon, seed);
    cfg.candidates = CandidateSpec::Mixtures { support: 2, resolution: 4 };
    Forecaster::new(grid_basis(1.0, 0.25, 1).unwrap(), vec![LossSpec::squared(1)], acts, pols, cfg).unwrap()
}

fn noisy_run(f: &Forecaster, horizon: usize, seed: u64) -> (Transcript, EngineState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..horizon).map(|_| (rng.gen_range(0..2), vec![rng.gen::<f64>()])).collect();
    run_online(f, &mut SequenceEnvironment::new(pairs), horizon, "").unwrap()
}

#[test]
fn recomputed_biases_match_engine_exactly() {
    for mode in [Mode::Exact, Mode::Smooth { eta_qr: 15.0 }] {
        let f = small_forecaster(mode, 500, 3);
        let (tr, state) = noisy_run(&f, 500, 4);
        let rec = recompute_biases(&tr, &f.events, &f.basis, &[100, 500]).unwrap();
        let a: Vec<u64> = rec.bias.iter().map(|b| b.to_bits()).collect();
        let b: Vec<u64> = state.bias.iter().map(|b| b.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(rec.curve.last().unwrap().1, state.max_bias());
    }
}

#[test]
fn occupancies_are_conserved() {
    for mode in [Mode::Exact, Mode::Smooth { eta_qr: 15.0 }] {
        let f = small_forecaster(mode, 300, 5);
        let (tr, _) = noisy_run(&f, 300, 6);
        let rec = recompute_biases(&tr, &f.events, &f.basis, &[]).unwrap();
        let e = &f.events;
        for l in 0..e.losses() {
            let decision: f64 = (0..e.actions).map(|a| rec.occupancy[e.decision_id(l, a)]).sum();
            assert!((decision - 300.0).abs() < 1e-9);
            for c in 0..e.policies.len() {
                let mut cross = 0.0;
                for a in 0..e.actions {
                    for b in 0..e.actions {
                        cross += rec.occupancy[e.cross_id(l, a, c, b)];
                    }
                }
                assert!((cross - 300.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn calibration_examples() {
    // Grid images only, outcome equal to the sampled cell point: nothing accumulates.
    let acts = ActionSet::finite(vec![vec![0.0], vec![1.0]]).unwrap();
    let f = Forecaster::new(grid_basis(1.0, 0.25, 1).unwrap(), vec![LossSpec::squared(1)], acts, vec![], EngineConfig::new(Mode::Exact, 50, 1)).unwrap();
    let (mut tr, _) = noisy_run(&f, 50, 2);
    for r in tr.rounds.iter_mut() {
        r.outcome = r.preimage.clone();
    }
    let report = decision_calibration(&tr, &f.events, &f.basis, &[]).unwrap();
    assert_eq!(report.max_bias, 0.0);

    // Identity features: residuals +0.25 and -0.25 on the same event cancel.
    let rows = vec![LinearRow { offset: 0.0, weights: vec![1.0] }, LinearRow { offset: 1.0, weights: vec![-1.0] }];
    let loss = LossSpec::new(LossKind::CustomTable { rows }, 1).unwrap();
    let labels = ActionSet::labeled(vec!["a".into(), "b".into()]).unwrap();
    let mut cfg = EngineConfig::new(Mode::Exact, 2, 1);
    cfg.grid_step = Some(0.25);
    let f = Forecaster::new(monomial_basis(1, 1, InnerMap::Identity).unwrap(), vec![loss], labels, vec![], cfg).unwrap();
    let c = f.candidates.vectors.iter().position(|v| v == &vec![0.5]).unwrap();
    let round = |t: usize, y: f64| Round {
        t,
        context: 0,
        pi: vec![(c, 1.0)],
        candidate: c,
        prediction: vec![0.5],
        preimage: vec![0.5],
        actions: vec![0],
        outcome: vec![y],
        value: 0.0,
    };
    let tr = Transcript { header: header(&f, ""), rounds: vec![round(1, 0.25), round(2, 0.75)] };
    let report = decision_calibration(&tr, &f.events, &f.basis, &[1, 2]).unwrap();
    assert_eq!(report.max_bias, 0.0);
    assert_eq!(report.curve, vec![(1, 0.25), (2, 0.0)]);
    assert_eq!(report.events.iter().map(|e| e.occupancy).sum::<f64>(), 2.0);
}

#[test]
fn decomposition_holds_for_every_assignment() {
    let f = small_forecaster(Mode::Exact, 800, 7);
    let (tr, _) = noisy_run(&f, 800, 8);
    let rec = recompute_biases(&tr, &f.events, &f.basis, &[]).unwrap();
    for assign in all_maps(3, 2) {
        let d = decomposition_check_with(&tr, &f.events, &f.basis, &rec, 0, 0, &assign).unwrap();
        assert!(d.holds, "{assign:?}: {d:?}");
        assert!(d.best_response_holds, "{assign:?}: {d:?}");
    }
    let smooth = small_forecaster(Mode::Smooth { eta_qr: 5.0 }, 10, 1);
    assert!(decomposition_check(&tr, &smooth.events, &smooth.basis, 0, 0, &[0, 0, 0]).is_err());
}

#[test]
fn replay_reproduces_registered_actions() {
    let f = small_forecaster(Mode::Exact, 400, 9);
    let (tr, _) = noisy_run(&f, 400, 10);
    let rep = agent_replay(&tr, &LossSpec::squared(1), &f.basis, &f.actions, f.gamma, Mode::Exact, 0).unwrap();
    let logged: Vec<usize> = tr.rounds.iter().map(|r| r.actions[0]).collect();
    assert_eq!(rep.actions, logged);
    let play = Play::from_transcript(&tr, 0, &LossSpec::squared(1), &f.actions).unwrap();
    let direct: Vec<f64> = play.actions.iter().zip(&play.losses).map(|(&a, l)| l[a]).collect();
    assert_eq!(rep.losses, direct);

    let smooth = Mode::Smooth { eta_qr: 10.0 };
    let a = agent_replay(&tr, &LossSpec::squared(1), &f.basis, &f.actions, f.gamma, smooth, 77).unwrap();
    let b = agent_replay(&tr, &LossSpec::squared(1), &f.basis, &f.actions, f.gamma, smooth, 77).unwrap();
    assert_eq!(a, b);
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
        let (mean, sd) = [(0.25, 0.15), (0.5, 0.15), (0.75, 0.15), (0.5, 0.3)][self.x];
        let w: Vec<f64> = (0..10)
            .map(|k| {
                let y = 0.05 + 0.1 * k as f64;
                (-(y - mean) * (y - mean) / (2.0 * sd * sd)).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        let k = sample_index(&w.iter().map(|v| v / total).collect::<Vec<_>>(), &mut self.rng);
        Ok(vec![0.05 + 0.1 * k as f64])
    }
}

#[test]
fn unregistered_replay_tracks_registered_agent() {
    let horizon = 4000;
    let net = theta_net(1, 0.25).unwrap();
    let run = |actions: ActionSet| {
        let mut cfg = EngineConfig::new(Mode::Exact, horizon, 21);
        cfg.candidates = CandidateSpec::Mixtures { support: 2, resolution: 10 };
        let f = Forecaster::new(lp_basis(2, 1).unwrap(), vec![LossSpec::squared(1)], actions, vec![], cfg).unwrap();
        let (tr, _) = run_online(&f, &mut Bumps { rng: ChaCha8Rng::seed_from_u64(22), x: 0 }, horizon, "").unwrap();
        (f, tr)
    };
    let (_, registered) = run(net.clone());
    let own = Play::from_transcript(&registered, 0, &LossSpec::squared(1), &net).unwrap().swap().value;
    // The paired run registers an agent on a different net; the 0.25-net agent is replayed.
    let (g, other) = run(theta_net(1, 1.0 / 3.0).unwrap());
    let rep = agent_replay(&other, &LossSpec::squared(1), &g.basis, &net, g.gamma, Mode::Exact, 0).unwrap();
    let replayed = Play::with_actions(&other, rep.actions, &LossSpec::squared(1), &net).unwrap().swap().value;
    assert!(replayed <= 2.0 * own, "replayed {replayed} vs registered {own}");
}

#[test]
fn checkpoint_grid() {
    assert_eq!(checkpoints(6400), vec![100, 200, 400, 800, 1600, 3200, 6400]);
    assert_eq!(checkpoints(3), vec![1, 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn reported_value_equals_reevaluation(seed in any::<u64>(), t in 1usize..40, actions in 1usize..4, count in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let play = random_play(&mut rng, t, actions, 3);
        let pols = random_policies(&mut rng, count, actions, 3);
        for metric in Metric::ALL {
            let r = regret(&play, metric, &pols).unwrap();
            prop_assert_eq!(r.value, play.evaluate(&r.benchmark, &pols));
        }
        let swap = play.swap().value;
        prop_assert!(swap >= -1e-12);
        prop_assert!(play.contextual_swap(&pols).unwrap().value >= swap - 1e-12);
    }
}
