use failgen_core::metrics::{coverage, density, distance, embed, failure_rate, knn_radii, FidelityReport};
use failgen_core::prior::{sample_initial_state, sample_prior_noise, PriorModel};
use failgen_core::sim::{run_simulation, Scenario, SimulationResult, Vec2, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn brute_radii(real: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..real.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..real.len()).filter(|&j| j != i).map(|j| distance(&real[i], &real[j])).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn brute(gen: &[Vec<f64>], real: &[Vec<f64>], k: usize) -> (f64, f64) {
    let radii = brute_radii(real, k);
    let mut inside = 0usize;
    let mut covered = vec![false; real.len()];
    for g in gen {
        for (j, r) in real.iter().enumerate() {
            if distance(g, r) <= radii[j] {
                inside += 1;
                covered[j] = true;
            }
        }
    }
    (
        inside as f64 / (k * gen.len()) as f64,
        covered.iter().filter(|c| **c).count() as f64 / real.len() as f64,
    )
}

/// Clustered points on a coarse grid, so exact ties with radii occur.
fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..3)];
            c.iter().map(|x| x + (rng.random_range(-8i32..=8) as f64) * 0.05).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tree_equals_double_loop(seed in any::<u64>(), n in 7usize..300, m in 1usize..300, dim in prop::sample::select(vec![1usize, 2, 5, 48]), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = cloud(&mut rng, n, dim);
        let gen = cloud(&mut rng, m, dim);
        prop_assert_eq!(knn_radii(&real, k).unwrap(), brute_radii(&real, k));
        let (d, c) = brute(&gen, &real, k);
        prop_assert_eq!(density(&gen, &real, k).unwrap(), d);
        prop_assert_eq!(coverage(&gen, &real, k).unwrap(), c);
    }

    #[test]
    fn invariant_under_permutation(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = cloud(&mut rng, 60, 3);
        let gen = cloud(&mut rng, 40, 3);
        let (mut r2, mut g2) = (real.clone(), gen.clone());
        for i in (1..r2.len()).rev() { r2.swap(i, rng.random_range(0..=i)); }
        for i in (1..g2.len()).rev() { g2.swap(i, rng.random_range(0..=i)); }
        prop_assert_eq!(density(&gen, &real, k).unwrap(), density(&g2, &r2, k).unwrap());
        prop_assert_eq!(coverage(&gen, &real, k).unwrap(), coverage(&g2, &r2, k).unwrap());
    }

    #[test]
    fn bounds_hold(
        real in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2), 6..40),
        gen in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2), 1..40),
        rhos in prop::collection::vec(prop::sample::select(vec![0.0, 0.0, 0.01, 0.5]), 1..50),
        k in 1usize..5,
    ) {
        let d = density(&gen, &real, k).unwrap();
        let c = coverage(&gen, &real, k).unwrap();
        let f = failure_rate(&rhos).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn self_coverage_is_full(seed in any::<u64>(), n in 6usize..200, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        prop_assume!(knn_radii(&real, k).unwrap().iter().all(|r| *r > 0.0));
        prop_assert_eq!(coverage(&real, &real, k).unwrap(), 1.0);
        prop_assert!(density(&real, &real, k).unwrap() >= 1.0 / k as f64);
    }
}

#[test]
fn hand_built_three_by_three() {
    let real = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
    let gen = vec![vec![0.5, 0.0], vec![0.0, 1.9], vec![5.0, 5.0]];
    // radii with k = 1: 1, 1, 2
    assert_eq!(knn_radii(&real, 1).unwrap(), vec![1.0, 1.0, 2.0]);
    // (0.5,0) lies in balls 0 and 1; (0,1.9) lies in ball 2 only
    assert_eq!(density(&gen, &real, 1).unwrap(), 3.0 / 3.0);
    assert_eq!(coverage(&gen, &real, 1).unwrap(), 1.0);
    let r = FidelityReport::compute(&[0.0, 0.0, 0.0, 0.3], &gen, &real, 1).unwrap();
    assert_eq!(r.failure_rate, 0.75);
    assert_eq!(r.generated_failures, 3);
}

fn some_result() -> SimulationResult {
    let world = WorldConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let s0 = sample_initial_state(Scenario::East, &world, &mut rng);
    let eps = sample_prior_noise(&PriorModel::new(world.gamma).unwrap(), &mut rng);
    run_simulation(&s0, &eps, Scenario::East, 17, &world).unwrap()
}

#[test]
fn stationary_relative_pose_repeats() {
    let mut r = some_result();
    let first = r.trajectory[0];
    for s in &mut r.trajectory {
        s.ego.position = first.ego.position;
        s.intruder.position = first.intruder.position;
    }
    let f = embed(&r).unwrap();
    let p = first.intruder.position - first.ego.position;
    for t in 0..24 {
        assert_eq!([f[2 * t], f[2 * t + 1]], [p.x, p.y]);
    }
}

#[test]
fn synthetic_trajectory_flattens_time_major() {
    let mut r = some_result();
    for (t, s) in r.trajectory.iter_mut().enumerate() {
        s.ego.position = Vec2::new(0.0, 0.0);
        s.intruder.position = Vec2::new(t as f64, -(t as f64) / 4.0);
    }
    let f = embed(&r).unwrap();
    for t in 0..24 {
        assert_eq!(f[2 * t], t as f64);
        assert_eq!(f[2 * t + 1], -(t as f64) / 4.0);
    }
}

#[test]
fn short_trajectory_rejected() {
    let mut r = some_result();
    r.trajectory.truncate(10);
    assert!(embed(&r).is_err());
}

#[test]
fn pinned_embedding() {
    let f = embed(&some_result()).unwrap();
    let mut h = Sha256::new();
    for v in f {
        h.update(v.to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, "86dea71b933a9dd520b94fc51a2b94d4021d17c72bf2a79ac484ab0801a0a60b");
}
