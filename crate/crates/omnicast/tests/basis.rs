use omnicast::basis::leontief::*;
use omnicast::basis::perturbed::perturbed_identity;
use omnicast::basis::*;
use omnicast::domain::*;
use omnicast::linearize::lift_raw;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lattice(d: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let side = (hi - lo + 1) as usize;
    (0..side.pow(d as u32))
        .map(|flat| {
            let mut p = vec![0; d];
            let mut rest = flat;
            for k in (0..d).rev() {
                p[k] = lo + (rest % side) as i64;
                rest /= side;
            }
            p
        })
        .collect()
}

fn mrelu(i: &[i64], z: &[i64]) -> i64 {
    mrelu_eval(&MReluSpec::new(i.to_vec(), 0), z).unwrap()
}

#[test]
fn grid_one_hot_everywhere() {
    let b = grid_basis(1.0, 0.25, 2).unwrap();
    assert_eq!(b.n, 16);
    assert_eq!(b.lambda, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let y = [rng.gen::<f64>(), rng.gen::<f64>()];
        let v = b.eval(&y).unwrap();
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 15);
    }
}

#[test]
fn lp_lift_reproduces_squared_loss() {
    let b = lp_basis(2, 1).unwrap();
    let loss = LossSpec::new(LossKind::Lp { p: 2 }, 1).unwrap();
    let acts = ActionSet::finite(vec![vec![0.5], vec![0.4]]).unwrap();
    let (r0, r) = lift_raw(&loss, &b, &acts).unwrap();
    assert!((r0[0] - 0.25).abs() < 1e-15);
    let s = b.eval_raw(&[0.25]).unwrap();
    let value = r0[0] + r[0].iter().zip(&s).map(|(c, x)| c * x).sum::<f64>();
    assert!((value - 0.0625).abs() < 1e-15);
    assert!((r[1][0] - 0.8).abs() < 1e-15);
    assert_eq!(lp_basis(3, 2).unwrap().n, 6);
}

#[test]
fn monomial_expansion_matches_direct_value() {
    let b = monomial_basis(2, 2, InnerMap::Identity).unwrap();
    assert_eq!(b.n, 4);
    let kind = LossKind::Monomial { beta: 2, g: InnerMap::Identity, scale: 1.0, r_bound: 1.0 };
    let loss = LossSpec::new(kind, 2).unwrap();
    let acts = ActionSet::finite(vec![vec![0.5, 0.5]]).unwrap();
    let (r0, r) = lift_raw(&loss, &b, &acts).unwrap();
    let s = b.eval_raw(&[1.0, 0.0]).unwrap();
    let value = r0[0] + r[0].iter().zip(&s).map(|(c, x)| c * x).sum::<f64>();
    assert!((value - 0.25).abs() < 1e-15);
    assert!((loss.eval_raw(acts.get(0), &[1.0, 0.0]) - 0.25).abs() < 1e-15);
    let linear = monomial_basis(1, 3, InnerMap::Identity).unwrap();
    assert_eq!(linear.eval_raw(&[0.1, 0.2, 0.3]).unwrap(), vec![0.1, 0.2, 0.3]);
}

#[test]
fn taylor_order_and_error() {
    let e = std::f64::consts::E;
    assert!(e / 720.0 <= 0.01 && e / 120.0 > 0.01);
    assert_eq!(taylor_order(1.0, 1.0, 0.01, 40), Some(5));
    let b = exp_taylor_basis(1, InnerMap::Identity, 1.0, 1.0, 1.0, 0.01).unwrap();
    assert_eq!(b.n, 5);
    // Independent truncated series for -exp(-y).
    let mut worst: f64 = 0.0;
    for k in 0..=10_000 {
        let y = k as f64 / 10_000.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..=5 {
            term *= -y / n as f64;
            sum += term;
        }
        worst = worst.max((-sum + (-y).exp()).abs());
    }
    assert!(worst <= 0.01);
    let kind = LossKind::Exponential { g: InnerMap::Identity, scale: 1.0, r_bound: 1.0, c_bound: 1.0 };
    let loss = LossSpec::new(kind, 1).unwrap();
    let acts = ActionSet::finite(vec![vec![-1.0]]).unwrap();
    let audit = audit_basis(&b, &[loss], &acts, 10_001).unwrap();
    assert!(audit.max_error <= 0.01, "{}", audit.max_error);
}

#[test]
fn taylor_without_feasible_order_fails() {
    assert_eq!(taylor_order(1.0, 1.0, 1e-300, 10), None);
    assert!(exp_taylor_basis(1, InnerMap::Identity, 1.0, 1.0, 1.0, 0.0).is_err());
}

#[test]
fn indicator_identity_exhaustive() {
    for m in 3..=8i64 {
        for d in 1..=2usize {
            for i in lattice(d, 1, m - 1) {
                let terms = indicator_via_mrelu(&i, m).unwrap();
                for z in lattice(d, 1, m - 1) {
                    let total: i64 = terms.iter().map(|(s, c)| c * mrelu(&s.thresholds, &z)).sum();
                    assert_eq!(total, (z == i) as i64, "m={m} i={i:?} z={z:?}");
                }
            }
        }
    }
}

#[test]
fn indicator_one_dimensional_shape() {
    let flat: Vec<(Vec<i64>, i64)> =
        indicator_via_mrelu(&[5], 8).unwrap().into_iter().map(|(s, c)| (s.thresholds, c)).collect();
    assert_eq!(flat, vec![(vec![6], 1), (vec![5], -2), (vec![4], 1)]);
    assert!(indicator_via_mrelu(&[8], 8).is_err());
}

#[test]
fn adjacent_difference_exhaustive() {
    let m = 8;
    for d in 1..=2usize {
        for i in lattice(d, 0, m - 1) {
            for axis in 0..d {
                let rect = mrelu_adjacent_diff(&i, axis, m);
                let mut up = i.clone();
                up[axis] += 1;
                for z in lattice(d, 1, m) {
                    assert_eq!(mrelu(&i, &z) - mrelu(&up, &z), rect.contains(&z) as i64, "i={i:?} z={z:?}");
                }
            }
        }
    }
    assert!(mrelu_adjacent_diff(&[8, 3], 0, 8).is_empty());
}

#[test]
fn dyadic_every_pair_in_32() {
    for lo in 0..32u64 {
        for hi in lo..32 {
            let pieces = dyadic_decompose(lo, hi, 32).unwrap();
            assert!(pieces.len() <= 10);
            let mut covered = vec![0u32; 32];
            for p in &pieces {
                assert_eq!(p.lo() % (1 << p.h), 0);
                for x in p.lo()..=p.hi() {
                    covered[x as usize] += 1;
                }
            }
            for (x, &c) in covered.iter().enumerate() {
                assert_eq!(c, (lo..=hi).contains(&(x as u64)) as u32);
            }
        }
    }
}

#[test]
fn leontief_coefficient_examples() {
    let c = leontief_coeffs(&[2, 3], 6).unwrap();
    for z in lattice(2, 1, 5) {
        let total: i64 = c.iter().map(|(i, ci)| ci * mrelu(i, &z)).sum();
        assert_eq!(total, (2 * z[0]).min(3 * z[1]));
    }
    assert!(c.values().map(|v| v.abs()).sum::<i64>() <= 12i64.pow(3) * 6i64.pow(3));
    let one = leontief_coeffs(&[1], 4).unwrap();
    for z in 1..=3 {
        assert_eq!(one.iter().map(|(i, ci)| ci * mrelu(i, &[z])).sum::<i64>(), z);
    }
    assert!(leontief_coeffs(&[0, 3], 6).is_err());
}

#[test]
fn perturbed_identity_examples() {
    let one = perturbed_identity(1, 0.2, 5).unwrap();
    assert_eq!((one.k, one.v.clone()), (1, vec![1.0]));
    let flat = perturbed_identity(10, 1.0, 5).unwrap();
    assert_eq!(flat.k, 1);
    assert!(flat.v.iter().all(|&x| x == 1.0));
    let big = perturbed_identity(64, 0.3, 7).unwrap();
    for i in 0..64 {
        assert!((big.gram(i, i) - 1.0).abs() < 1e-12);
        for j in 0..64 {
            if i != j {
                assert!(big.gram(i, j).abs() <= 0.3);
            }
        }
    }
}

fn random_leontief_audit(d: usize, lipschitz: f64, seed: u64) -> f64 {
    let basis = leontief_basis(d, lipschitz, 0.125, seed).unwrap();
    assert_eq!(basis.meta.m, Some(8));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acts = Vec::new();
    for _ in 0..4 {
        acts.push((0..d).map(|_| rng.gen_range(1.0 / lipschitz..=1.0)).collect());
    }
    let acts = ActionSet::finite(acts).unwrap();
    let loss = LossSpec::new(LossKind::Leontief { lipschitz }, d).unwrap();
    let report = audit_basis(&basis, &[loss.clone()], &acts, 17).unwrap();
    // Audit errors are in normalized units; convert back to raw utility.
    report.max_error / loss.norm.scale
}

#[test]
fn leontief_one_dimensional_audit() {
    for seed in [1, 2, 3] {
        let err = random_leontief_audit(1, 1.0, seed);
        assert!(err <= 3.0 * 0.125, "seed {seed}: {err}");
    }
}

#[test]
fn leontief_two_dimensional_audit() {
    assert_eq!(leontief_basis(2, 2.0, 0.125, 4).unwrap().meta.s, Some(3));
    let err = random_leontief_audit(2, 2.0, 4);
    assert!(err <= 3.0 * 2.0 * 0.125, "{err}");
}

#[test]
fn audit_examples() {
    let lp = lp_basis(2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let loss = LossSpec::new(LossKind::Lp { p: 2 }, 2).unwrap();
    for _ in 0..20 {
        let a = vec![rng.gen::<f64>(), rng.gen::<f64>()];
        let acts = ActionSet::finite(vec![a]).unwrap();
        let (r0, r) = lift_raw(&loss, &lp, &acts).unwrap();
        let y = [rng.gen::<f64>(), rng.gen::<f64>()];
        let s = lp.eval_raw(&y).unwrap();
        let lifted = r0[0] + r[0].iter().zip(&s).map(|(c, x)| c * x).sum::<f64>();
        assert!((lifted - loss.eval_raw(acts.get(0), &y)).abs() <= 1e-9);
    }
    let grid = grid_basis(1.0, 0.25, 1).unwrap();
    // 1-Lipschitz losses: y, 1 - y, and |a - y| through a tabulated grid.
    let rows = vec![LinearRow { offset: 0.0, weights: vec![1.0] }, LinearRow { offset: 1.0, weights: vec![-1.0] }];
    let linear = LossSpec::new(LossKind::CustomTable { rows }, 1).unwrap();
    let values = (0..3).map(|a| (0..=8).map(|k| (a as f64 * 0.5 - k as f64 / 8.0).abs()).collect()).collect();
    let absolute = LossSpec::new(LossKind::GridTabular { per_axis: 9, values }, 1).unwrap();
    let acts = ActionSet::labeled(vec!["lo".into(), "mid".into()]).unwrap();
    let report = audit_basis(&grid, &[linear], &acts, 1000).unwrap();
    assert!(report.max_error <= 0.25);
    let acts = ActionSet::labeled(vec!["0".into(), "0.5".into(), "1".into()]).unwrap();
    let report = audit_basis(&grid, &[absolute], &acts, 1000).unwrap();
    assert!(report.max_error <= 0.25);
    assert!(report.lambda_respected);
    assert_eq!(report.points, 1000);
}

#[test]
fn every_family_stays_in_unit_box() {
    let bases = vec![
        grid_basis(1.0, 0.2, 2).unwrap(),
        lp_basis(3, 2).unwrap(),
        monomial_basis(3, 2, InnerMap::Identity).unwrap(),
        monomial_basis(2, 2, InnerMap::LnClipped { y_min: 0.01 }).unwrap(),
        exp_taylor_basis(2, InnerMap::Identity, 1.0, 1.0, 2.0, 0.05).unwrap(),
        leontief_basis(1, 1.0, 0.125, 3).unwrap(),
        leontief_basis(2, 1.0, 0.125, 3).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for b in &bases {
        for _ in 0..10_000 {
            let y: Vec<f64> = (0..b.d).map(|_| rng.gen()).collect();
            for v in b.eval(&y).unwrap() {
                assert!((0.0..=1.0).contains(&v), "{:?}: {v}", b.descriptor);
            }
        }
        assert!(b.lambda >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn leontief_coeffs_reconstruct_min(b1 in 1i64..=5, b2 in 1i64..=5) {
        let b = [b1, b2];
        let c = leontief_coeffs(&b, 6).unwrap();
        for z in lattice(2, 1, 5) {
            let total: i64 = c.iter().map(|(i, ci)| ci * mrelu(i, &z)).sum();
            prop_assert_eq!(total, (b1 * z[0]).min(b2 * z[1]));
        }
        prop_assert!(c.values().map(|v| v.abs()).sum::<i64>() <= 12i64.pow(3) * 216);
    }

    #[test]
    fn perturbed_identity_meets_gram_bound(n in 1usize..=80, mu in 0.15f64..=1.0, seed in any::<u64>()) {
        let v = perturbed_identity(n, mu, seed).unwrap();
        for i in 0..n {
            prop_assert!((v.gram(i, i) - 1.0).abs() < 1e-12);
            for j in 0..i {
                prop_assert!(v.gram(i, j).abs() <= mu);
            }
        }
    }
}
