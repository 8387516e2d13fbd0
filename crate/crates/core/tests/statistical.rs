use lsa_bootstrap::bootstrap::{
    coverage_runs, empirical_noise_covariance, evaluate_coverage, gaussian_comparison, summarize_coverage, BootstrapConfig,
    CoverageConfig, WeightLaw,
};
use lsa_bootstrap::garnet::{generate_garnet, random_policy, FeatureMap, TdProblem};
use lsa_bootstrap::lsa::{run_lsa, NoiseKind, SyntheticProblem};
use lsa_bootstrap::{LsaProblem, RngStream, StepSchedule};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Scalar problem `θ* = 0` with symmetric additive noise.
fn symmetric_toy() -> SyntheticProblem {
    SyntheticProblem::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 0.0, 1.0, NoiseKind::Gaussian).unwrap()
}

fn toy_config(levels: Vec<f64>, b: usize) -> CoverageConfig {
    CoverageConfig {
        schedule: StepSchedule::new(0.5, 0.5).unwrap(),
        n: 256,
        theta0: DVector::zeros(1),
        bootstrap: BootstrapConfig::new(b, WeightLaw::GaussianMean1, 31),
        levels,
        data_seed: 30,
    }
}

#[test]
fn median_level_coverage_on_symmetric_toy() {
    let est = evaluate_coverage(&symmetric_toy(), &toy_config(vec![0.5], 100), 2000).unwrap();
    assert_eq!(est.len(), 1);
    assert!((est[0].coverage - 0.5).abs() <= 0.04, "coverage {}", est[0].coverage);
}

#[test]
fn coverage_is_monotone_in_level() {
    let levels = vec![0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99];
    let runs = coverage_runs(&symmetric_toy(), &toy_config(levels.clone(), 40), 200).unwrap();
    for r in &runs {
        assert!(r.radii.windows(2).all(|w| w[0] <= w[1]), "run {} radii {:?}", r.run_id, r.radii);
    }
    let est = summarize_coverage(&runs, &levels);
    assert!(est.windows(2).all(|w| w[0].covered <= w[1].covered));
}

#[test]
fn single_run_gives_one_indicator_and_vacuous_interval() {
    let est = evaluate_coverage(&symmetric_toy(), &toy_config(vec![0.9], 20), 1).unwrap();
    assert_eq!(est.len(), 1);
    assert_eq!(est[0].runs, 1);
    assert!(est[0].coverage == 0.0 || est[0].coverage == 1.0);
    assert_eq!((est[0].lo, est[0].hi), (0.0, 1.0));
}

#[test]
fn bootstrap_noise_covariance_is_close_on_garnet() {
    let mut rng = RngStream::new(2024, 0);
    let mdp = generate_garnet(5, 2, 2, 0.8, &mut rng).unwrap();
    let pol = random_policy(&mdp, &mut RngStream::new(2024, 1));
    let p = TdProblem::new(mdp, pol, &FeatureMap::Identity).unwrap();
    let sigma = &p.exact().unwrap().sigma_eps;
    let s = StepSchedule::new(0.1, 0.5).unwrap();
    let n = 10_000;
    let bounds: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|r| {
            let run = run_lsa(&p, &s, n, &DVector::zeros(p.dim()), &mut RngStream::new(77, r), true).unwrap();
            let obs = run.observations.as_ref().unwrap();
            let window = &obs[obs.len() - n..];
            gaussian_comparison(sigma, &empirical_noise_covariance(&p, window).unwrap()).unwrap()
        })
        .collect();
    let within = bounds.iter().filter(|&&b| b <= 0.2).count();
    let worst = bounds.iter().cloned().fold(0.0, f64::max);
    assert!(within >= 95, "{within}/100 below 0.2, worst {worst}");
}
