use collapse_core::io::{digest_archive, simulate_to, ArchiveReader, RunConfig, TrajectoryArchive};
use collapse_core::stats::Estimate;

fn simulate(text: &str) -> Vec<u8> {
    simulate_to(&RunConfig::parse(text).unwrap(), Vec::new()).unwrap()
}

#[test]
fn symmetric_problem_has_symmetric_density() {
    let bytes = simulate(
        "model = grw\nseed = 3\nmu = 4\nalpha = 0.5\nhamiltonian = zero\nn_points = 64\nx_min = -8\nx_max = 8\n\
         psi0_sigma = 1\nt_max = 1\nsample_times = 1\nn_trajectories = 20000\nn_substeps = 100\n",
    );
    let a = TrajectoryArchive::from_bytes(&bytes).unwrap();
    let g = a.header.grid;
    let n = g.n_points();
    // Grid points x_j and x_{n−j} are mirror images for j ≥ 1.
    let (mut total, mut bound) = (0.0, 0.0);
    for j in 1..n / 2 {
        let diffs: Vec<f64> = a
            .records
            .iter()
            .map(|r| {
                let amps = r.snapshots[0].state.amplitudes();
                amps[j].norm_sqr() - amps[n - j].norm_sqr()
            })
            .collect();
        let e = Estimate::of(&diffs);
        total += e.mean.abs() * g.dx();
        bound += e.se * g.dx();
    }
    // E Σ|Δ| ≤ Σ SE(Δ) under exact symmetry.
    assert!(total <= 5.0 * bound, "asymmetry {total} vs 5·SE sum {}", 5.0 * bound);
}

#[test]
fn diosi_density_integrates_to_one() {
    let bytes = simulate(
        "model = diosi\nseed = 5\nlambda = 1\nn_points = 128\nx_min = -10\nx_max = 10\npsi0_sigma = 0.5\n\
         t_max = 0.1\nsample_times = 0.1\nn_trajectories = 1000\nn_substeps = 1000\n",
    );
    let d = digest_archive(ArchiveReader::new(&bytes[..]).unwrap(), 1).unwrap();
    let dx = 20.0 / 128.0;
    let integral: f64 = d.densities[0].density.iter().sum::<f64>() * dx;
    assert!((integral - 1.0).abs() <= 2e-3, "integral {integral}");
    assert!((d.summary[0].mean_weight - integral).abs() < 1e-6);
}

#[test]
fn grw_density_integrates_to_one_exactly() {
    let bytes = simulate(
        "model = grw\nseed = 9\nmu = 4\nalpha = 0.5\nn_points = 128\nx_min = -15\nx_max = 15\n\
         t_max = 0.5\nsample_times = 0.5\nn_trajectories = 200\nn_substeps = 100\n",
    );
    let d = digest_archive(ArchiveReader::new(&bytes[..]).unwrap(), 1).unwrap();
    let integral: f64 = d.densities[0].density.iter().sum::<f64>() * 30.0 / 128.0;
    // Single-precision amplitudes limit the normalization.
    assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    assert_eq!(d.summary[0].mean_weight, 1.0);
}
