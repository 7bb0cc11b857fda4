use collapse_core::diosi::{diosi_trajectory, hybrid_trajectory, DiosiParams, HybridParams};
use collapse_core::grid::{bounded_well, collapse_flow, gaussian_hit, CollapseSpec, Grid, HamiltonianSpec, Propagator};
use collapse_core::io::{simulate_to, RunConfig, TrajectoryArchive};
use collapse_core::master::{diosi_decay_rate, evolve_grw_master, grw_decay_rate, DensityMatrix};
use collapse_core::stats::ks_two_sample;
use collapse_core::{flash_density, grw_trajectory, make_gaussian_packet, sample_jump_times, GrwParams, StreamKey, StreamRole};
use proptest::prelude::*;

fn grid() -> Grid {
    Grid::new(128, -12.0, 12.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn collapse_flows_compose_exactly(a in -1.0..1.0f64, b in -1.0..1.0f64, s in 0.0..0.05f64, t in 0.0..0.05f64, lambda in 0.1..2.0f64) {
        let phi = make_gaussian_packet(grid(), 0.3, 1.0, 0.2).unwrap();
        let c = CollapseSpec::new(lambda).unwrap();
        let two = collapse_flow(&collapse_flow(&phi, c, a, s).unwrap(), c, b, t).unwrap();
        let one = collapse_flow(&phi, c, a + b, s + t).unwrap();
        let scale = one.norm2().sqrt();
        prop_assert!(two.distance(&one).unwrap() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn flash_density_is_a_probability_density(c in -3.0..3.0f64, sigma in 0.6..1.5f64, alpha in 0.2..4.0f64) {
        let phi = make_gaussian_packet(grid(), c, sigma, 0.0).unwrap();
        let n = 4000;
        let (lo, hi) = (-30.0, 30.0);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n).map(|k| flash_density(&phi, alpha, lo + (k as f64 + 0.5) * h) * h).sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "total {}", total);
    }

    #[test]
    fn hit_squared_norm_equals_flash_density(y in -3.0..3.0f64, alpha in 0.2..4.0f64) {
        let phi = make_gaussian_packet(grid(), 0.5, 1.0, 0.7).unwrap();
        let hit = gaussian_hit(&phi, y, alpha).unwrap();
        prop_assert!((hit.norm2() - flash_density(&phi, alpha, y)).abs() < 1e-12);
    }

    #[test]
    fn jump_times_are_increasing_and_bounded(mu in 0.1..50.0f64, t_max in 0.1..5.0f64, seed in any::<u64>()) {
        let mut rng = StreamKey::new(seed, 0).stream(StreamRole::JumpTimes);
        let times = sample_jump_times(mu, t_max, &mut rng).unwrap();
        prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(times.iter().all(|t| *t > 0.0 && *t <= t_max));
    }

    #[test]
    fn grw_snapshots_are_normalized_with_unit_weight(mu in 0.5..20.0f64, alpha in 0.1..2.0f64, seed in any::<u64>()) {
        let g = grid();
        let phi = make_gaussian_packet(g, 0.0, 1.0, 0.0).unwrap();
        let prop = Propagator::new(g, bounded_well(&g, 1.0, 2.0).unwrap(), 0.01).unwrap();
        let p = GrwParams { mu, alpha, t_max: 0.5, sample_times: vec![0.25, 0.5], deterministic_times: false };
        let r = grw_trajectory(&phi, &prop, &p, StreamKey::new(seed, 3)).unwrap();
        prop_assert_eq!(r.weight, 1.0);
        prop_assert_eq!(r.snapshots.len(), 2);
        for s in &r.snapshots {
            prop_assert!((s.state.norm2() - 1.0).abs() < 1e-12);
        }
        prop_assert!(r.flashes.windows(2).all(|w| w[0].time < w[1].time));
    }

    #[test]
    fn diosi_and_hybrid_snapshots_are_normalized(lambda in 0.1..2.0f64, seed in any::<u64>()) {
        let g = grid();
        let phi = make_gaussian_packet(g, 0.0, 0.7, 0.0).unwrap();
        let prop = Propagator::new(g, HamiltonianSpec::free(&g), 0.01).unwrap();
        let d = DiosiParams { lambda, n_substeps_per_unit_time: 100, t_max: 0.5, sample_times: vec![0.2, 0.5] };
        let r = diosi_trajectory(&phi, &prop, &d, StreamKey::new(seed, 1)).unwrap();
        let h = HybridParams { lambda, mu: 20.0, t_max: 0.5, sample_times: vec![0.2, 0.5], deterministic_times: false, wiener_cells_per_unit: None };
        let q = hybrid_trajectory(&phi, &prop, &h, StreamKey::new(seed, 1)).unwrap();
        for s in r.snapshots.iter().chain(&q.snapshots) {
            prop_assert!((s.state.norm2() - 1.0).abs() < 1e-12);
            prop_assert!(s.raw_norm2 > 0.0 && s.raw_norm2.is_finite());
        }
    }

    #[test]
    fn grw_rate_approaches_diosi_rate_at_small_separation(mu in 1.0..1000.0f64, lambda in 0.1..5.0f64, d in 0.0..2.0f64) {
        let alpha = 2.0 * lambda / mu;
        let u = alpha * d * d / 4.0;
        let grw = grw_decay_rate(mu, alpha, d);
        let diosi = diosi_decay_rate(lambda, d);
        prop_assert!(grw <= diosi * (1.0 + 1e-12));
        prop_assert!(diosi - grw <= diosi * u / 2.0 + 1e-15);
    }

    #[test]
    fn ks_statistic_is_symmetric_and_bounded(a in prop::collection::vec(-5.0..5.0f64, 1..60), b in prop::collection::vec(-5.0..5.0f64, 1..60)) {
        let ab = ks_two_sample(&a, None, &b, None).unwrap();
        let ba = ks_two_sample(&b, None, &a, None).unwrap();
        prop_assert!((ab.statistic - ba.statistic).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.statistic));
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn derived_alpha_satisfies_scaling(lambda in 0.01..10.0f64, mu in 0.01..1000.0f64, seed in any::<u64>()) {
        let c = RunConfig::parse(&format!("model = hybrid\nseed = {seed}\nlambda = {lambda:?}\nmu = {mu:?}\n")).unwrap();
        let alpha = c.alpha.unwrap();
        prop_assert!((mu * alpha / 2.0 - lambda).abs() <= 1e-12 * lambda);
        let again = RunConfig::parse(&c.canonical_text()).unwrap();
        prop_assert_eq!(again.config_hash(), c.config_hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn master_evolution_stays_physical(mu in 0.5..8.0f64, alpha in 0.1..2.0f64, t in 0.01..0.3f64) {
        let g = Grid::new(32, -6.0, 6.0).unwrap();
        let rho0 = DensityMatrix::from_pure(&make_gaussian_packet(g, 0.2, 0.7, 0.3).unwrap()).unwrap();
        let rho = evolve_grw_master(&rho0, &bounded_well(&g, 1.0, 2.0).unwrap(), mu, alpha, t, 1e-3).unwrap();
        prop_assert!((rho.trace() - 1.0).abs() < 1e-10);
        prop_assert!(rho.hermiticity_error() < 1e-12);
        prop_assert!(rho.min_eigenvalue() > -1e-10);
    }

    #[test]
    fn archives_round_trip_bit_identically(seed in any::<u64>(), n in 0u64..6, model in 0usize..3) {
        let body = ["model = grw\nmu = 3\nalpha = 0.5\n", "model = diosi\nlambda = 1\n", "model = hybrid\nlambda = 1\nmu = 10\n"][model];
        let cfg = RunConfig::parse(&format!(
            "{body}seed = {seed}\nn_points = 64\nx_min = -12\nx_max = 12\nt_max = 0.5\nsample_times = 0.2, 0.5\nn_trajectories = {n}\nn_substeps = 100\n"
        )).unwrap();
        let bytes = simulate_to(&cfg, Vec::new()).unwrap();
        let a = TrajectoryArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(a.records.len() as u64, n);
        prop_assert_eq!(a.to_bytes().unwrap(), bytes);
        prop_assert!(a.header.check_config(&cfg).is_ok());
    }
}
