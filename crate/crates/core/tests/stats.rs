use tcl_dispatch_core::stats::{apparent_power, empirical_moments, sample_replicate};
use tcl_dispatch_core::{aggregate_moments, ks_distance_normal, sample_aggregate};

#[test]
fn bernoulli_means_stay_in_the_clt_band() {
    let rho = [0.5, 0.5];
    let s = [0.0, 1.0];
    let n = 10_000;
    let band = 4.0 * (0.25f64 / n as f64).sqrt();
    let inside = (0..1000u64)
        .filter(|&seed| (sample_aggregate(&rho, &s, n, seed) - 0.5).abs() <= band)
        .count();
    assert!(inside >= 990, "{inside} of 1000 inside");
}

#[test]
fn replicates_follow_the_analytic_normal() {
    let rho = [0.05, 0.1, 0.2, 0.25, 0.15, 0.1, 0.1, 0.05];
    let s = apparent_power(
        &[0.1, 0.4, 0.9, 1.3, 0.7, 0.2, 1.8, 1.1],
        &[0.05, 0.1, 0.3, 0.4, 0.2, 0.1, 0.6, 0.3],
    );
    let n = 10_000;
    let m = aggregate_moments(&rho, &s, n);
    let samples: Vec<f64> = (0..1000).map(|r| sample_replicate(&rho, &s, n, 42, r)).collect();
    let (mean, var) = empirical_moments(&samples);
    assert!(((var - m.variance) / m.variance).abs() < 0.1, "{var} vs {}", m.variance);
    assert!((mean - m.mean).abs() < 4.0 * (m.variance / 1000.0).sqrt());
    let ks = ks_distance_normal(&samples, m.mean, m.variance.sqrt());
    assert!(ks < 0.05, "ks {ks}");
}

#[test]
fn moment_examples() {
    let a = aggregate_moments(&[0.5, 0.5], &[0.0, 1.0], 1);
    assert_eq!((a.mean, a.variance), (0.5, 0.25));
    let b = aggregate_moments(&[0.5, 0.5], &[0.0, 1.0], 100);
    assert!((b.variance - 0.0025).abs() < 1e-15);
    let c = aggregate_moments(&[0.0, 1.0, 0.0], &[3.0, 2.0, 7.0], 50);
    assert_eq!((c.mean, c.variance), (2.0, 0.0));
    for seed in 0..20 {
        assert_eq!(sample_aggregate(&[0.0, 1.0, 0.0], &[3.0, 2.0, 7.0], 17, seed), 2.0);
    }
}

#[test]
fn seeds_reproduce_and_replicates_differ() {
    let rho = [0.3, 0.7];
    let s = [1.0, 2.0];
    assert_eq!(sample_aggregate(&rho, &s, 500, 9), sample_aggregate(&rho, &s, 500, 9));
    assert_ne!(sample_replicate(&rho, &s, 500, 9, 0), sample_replicate(&rho, &s, 500, 9, 1));
    assert_eq!(sample_replicate(&rho, &s, 500, 9, 0), sample_aggregate(&rho, &s, 500, 9));
}
