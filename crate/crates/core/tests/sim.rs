use failgen_core::prior::{sample_initial_state, sample_prior_noise, PriorModel};
use failgen_core::sim::{rect_distance, rects_overlap, run_simulation, OrientedRect, Scenario, Vec2, WorldConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Perimeter points spaced at most `h` apart.
fn perimeter(r: &OrientedRect, h: f64) -> Vec<Vec2> {
    let c = r.corners();
    let mut pts = Vec::new();
    for i in 0..4 {
        let (a, b) = (c[i], c[(i + 1) % 4]);
        let n = ((b - a).norm() / h).ceil() as usize;
        for j in 0..n {
            pts.push(a + (b - a) * (j as f64 / n as f64));
        }
    }
    pts
}

fn sampled_distance(a: &OrientedRect, b: &OrientedRect, h: f64) -> f64 {
    let (pa, pb) = (perimeter(a, h), perimeter(b, h));
    let mut best = f64::INFINITY;
    for p in &pa {
        for q in &pb {
            best = best.min((*p - *q).norm_sq());
        }
    }
    best.sqrt()
}

fn contains(r: &OrientedRect, p: Vec2) -> bool {
    let f = Vec2::from_angle(r.heading);
    let d = p - r.center;
    d.dot(f).abs() <= r.length / 2.0 && d.dot(f.perp()).abs() <= r.width / 2.0
}

fn rect(x: f64, y: f64, heading: f64) -> OrientedRect {
    OrientedRect {
        center: Vec2::new(x, y),
        heading,
        length: 0.05,
        width: 0.02,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Spacing 5e-5 bounds the sampling error by 5e-5 / sqrt(2) per side.
    #[test]
    fn distance_matches_boundary_sampling(
        x in -0.1f64..0.1, y in -0.1f64..0.1, ha in -3.2f64..3.2, hb in -3.2f64..3.2,
    ) {
        let a = rect(0.0, 0.0, ha);
        let b = rect(x, y, hb);
        prop_assume!(!rects_overlap(&a, &b));
        let exact = rect_distance(&a, &b);
        let oracle = sampled_distance(&a, &b, 5e-5);
        prop_assert!((exact - oracle).abs() <= 1e-4, "exact {} oracle {}", exact, oracle);
        prop_assert!(exact <= oracle + 1e-12);
    }

    /// Overlap against a grid of probe points over a's interior.
    #[test]
    fn overlap_matches_point_probes(
        x in -0.06f64..0.06, y in -0.06f64..0.06, ha in -3.2f64..3.2, hb in -3.2f64..3.2,
    ) {
        let a = rect(0.0, 0.0, ha);
        let b = rect(x, y, hb);
        let f = Vec2::from_angle(ha);
        let n = 120;
        let mut hit = false;
        'outer: for i in 0..=n {
            for j in 0..=n {
                let u = (i as f64 / n as f64 - 0.5) * a.length;
                let v = (j as f64 / n as f64 - 0.5) * a.width;
                if contains(&b, a.center + f * u + f.perp() * v) {
                    hit = true;
                    break 'outer;
                }
            }
        }
        let d = rect_distance(&a, &b);
        if hit {
            prop_assert!(rects_overlap(&a, &b));
            prop_assert_eq!(d, 0.0);
        } else if !rects_overlap(&a, &b) {
            prop_assert!(d > 0.0);
        } else {
            // overlapping by less than the probe spacing
            prop_assert!(sampled_distance(&a, &b, 5e-4) <= 1e-3);
        }
    }

    #[test]
    fn distance_is_symmetric(x in -0.2f64..0.2, y in -0.2f64..0.2, ha in -3.2f64..3.2, hb in -3.2f64..3.2) {
        let (a, b) = (rect(0.0, 0.0, ha), rect(x, y, hb));
        prop_assert_eq!(rect_distance(&a, &b), rect_distance(&b, &a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn episode_invariants(seed in any::<u64>(), sc in 0usize..4, boost in prop::sample::select(vec![1.0, 25.0, 1e4])) {
        let scenario = Scenario::ALL[sc];
        let mut world = WorldConfig::default();
        world.gamma *= boost;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = sample_initial_state(scenario, &world, &mut rng);
        let eps = sample_prior_noise(&PriorModel::new(world.gamma).unwrap(), &mut rng);
        let r = run_simulation(&s0, &eps, scenario, seed ^ 0x5555, &world).unwrap();
        prop_assert!(r.rho >= 0.0 && r.rho.is_finite());
        prop_assert_eq!(r.collided, r.rho == 0.0);
        prop_assert_eq!(r.trajectory.len(), 24);
        let min_sep = r.trajectory.iter().map(|t| t.sep).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(r.rho, min_sep);
        if r.collided {
            // the world freezes at contact
            let k = r.trajectory.iter().position(|t| t.sep == 0.0).unwrap();
            let tail = &r.trajectory[k..];
            prop_assert!(tail.iter().all(|t| t.ego == tail[0].ego && t.intruder == tail[0].intruder));
        }
        let again = run_simulation(&s0, &eps, scenario, seed ^ 0x5555, &world).unwrap();
        prop_assert_eq!(r.rho.to_bits(), again.rho.to_bits());
        let (mut ja, mut jb) = (Vec::new(), Vec::new());
        r.write_trajectory_jsonl(&mut ja).unwrap();
        again.write_trajectory_jsonl(&mut jb).unwrap();
        prop_assert_eq!(ja, jb);
    }
}
