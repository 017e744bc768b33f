use multispeed::harness::{
    datasets, diversity_of, fit_gaussian, frechet_gaussian, reconstruction_metrics, run_experiment,
    train, ExperimentConfig, MetricsReport, METRICS_HEADER,
};
use multispeed::oracles::GaussianSpec;
use multispeed::rng::{self, Purpose};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;

fn tiny_config(estimator: &str, sigma_y_max: Option<f64>) -> ExperimentConfig {
    let sigma_y = sigma_y_max.map(|s| format!("sigma_y_max = {s}")).unwrap_or_default();
    ExperimentConfig::from_toml(&format!(
        r#"
estimator = "{estimator}"
n_train = 1000
n_eval = 60
k_reconstructions = 3
seed = 8

[task]
kind = "mask"

[base]
kind = "gaussian"
mean = [0.0, 0.0, 0.0, 0.0]
cov = [[1.0, 0.6, 0.0, 0.0], [0.6, 1.0, 0.6, 0.0], [0.0, 0.6, 1.0, 0.6], [0.0, 0.0, 0.6, 1.0]]

[mspec]
sigma_min = 0.01
sigma_max = 10.0
{sigma_y}

[network]
hidden_widths = [16]

[optimizer]
lr = 1e-3
steps = 100
batch_size = 16

[sampler]
n_steps = 40
"#
    ))
    .unwrap()
}

fn diag_gaussian(mean: &[f64], var: &[f64]) -> GaussianSpec {
    GaussianSpec::new(
        DVector::from_column_slice(mean),
        DMatrix::from_diagonal(&DVector::from_column_slice(var)),
    )
    .unwrap()
}

fn random_gaussian(entries: &[f64], mu: &[f64]) -> GaussianSpec {
    let l = DMatrix::from_fn(3, 3, |i, j| entries[i * 3 + j]);
    GaussianSpec::new(
        DVector::from_column_slice(mu),
        &l * l.transpose() + DMatrix::identity(3, 3) * 0.05,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn frechet_is_a_symmetric_nonnegative_distance(
        a in prop::collection::vec(-1.0..1.0f64, 9),
        b in prop::collection::vec(-1.0..1.0f64, 9),
        ma in prop::collection::vec(-2.0..2.0f64, 3),
        mb in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let (p, q) = (random_gaussian(&a, &ma), random_gaussian(&b, &mb));
        let pq = frechet_gaussian(&p, &q).unwrap();
        let qp = frechet_gaussian(&q, &p).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() <= 1e-9 * pq.max(1.0));
        prop_assert_eq!(frechet_gaussian(&p, &p).unwrap(), 0.0);
        prop_assert!(pq > 0.0);
    }

    #[test]
    fn frechet_matches_the_closed_form_on_diagonals(
        ma in prop::collection::vec(-2.0..2.0f64, 3),
        mb in prop::collection::vec(-2.0..2.0f64, 3),
        va in prop::collection::vec(0.01..5.0f64, 3),
        vb in prop::collection::vec(0.01..5.0f64, 3),
    ) {
        let d = frechet_gaussian(&diag_gaussian(&ma, &va), &diag_gaussian(&mb, &vb)).unwrap();
        let expected: f64 = (0..3).map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum();
        prop_assert!((d - expected).abs() <= 1e-9 * expected.max(1.0), "{} vs {}", d, expected);
    }

    #[test]
    fn diversity_scales_with_the_reconstructions(
        vals in prop::collection::vec(-3.0..3.0f64, 12),
        c in -4.0..4.0f64,
    ) {
        let recs = Array2::from_shape_vec((4, 3), vals).unwrap();
        let base = diversity_of(recs.view()).unwrap();
        let scaled = diversity_of(recs.mapv(|v| c * v).view()).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((scaled - c.abs() * base).abs() <= 1e-12 * base.max(1.0));
        let same = Array2::from_shape_fn((5, 3), |(_, j)| recs[(0, j)]);
        prop_assert_eq!(diversity_of(same.view()).unwrap(), 0.0);
    }
}

#[test]
fn gaussian_fit_recovers_the_standard_normal() {
    let mut r = rng::substream(61, Purpose::MonteCarlo, 0);
    let xs = Array2::from_shape_fn((100_000, 2), |_| rng::standard_normal(&mut r));
    let g = fit_gaussian(xs.view()).unwrap();
    for i in 0..2 {
        assert!(g.mean()[i].abs() < 0.02);
        for j in 0..2 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g.cov()[(i, j)] - want).abs() < 0.02);
        }
    }
}

#[test]
fn gaussian_fit_mean_is_unbiased() {
    let reps = 100;
    let n = 50;
    let mut r = rng::substream(62, Purpose::MonteCarlo, 0);
    let means: Vec<f64> = (0..reps)
        .map(|_| {
            let xs = Array2::from_shape_fn((n, 2), |_| 1.5 + rng::standard_normal(&mut r));
            fit_gaussian(xs.view()).unwrap().mean()[0]
        })
        .collect();
    let avg = means.iter().sum::<f64>() / reps as f64;
    let stderr = 1.0 / ((n * reps) as f64).sqrt();
    assert!((avg - 1.5).abs() < 4.0 * stderr, "{avg}");
}

#[test]
fn perfect_reconstructions_hit_the_caps() {
    let xs = Array2::from_shape_fn((5, 2), |(i, j)| i as f64 - j as f64);
    let recs = Array2::from_shape_fn((10, 2), |(r, j)| xs[(r / 2, j)]);
    let m = reconstruction_metrics(xs.view(), xs.view(), recs.view(), 2, 1.0, |_, x| Ok(x.to_vec())).unwrap();
    assert_eq!(m.psnr, 200.0);
    assert_eq!(m.consistency_psnr, 200.0);
    assert_eq!(m.diversity, 0.0);
    assert!(m.capped);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config("cde", None);
    let (train_set, _) = datasets(&cfg).unwrap();
    let a = train(&cfg, &train_set).unwrap();
    let b = train(&cfg, &train_set).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn equal_speed_multi_speed_run_reproduces_the_joint_run() {
    let joint = run_experiment(&tiny_config("cdiffe", None)).unwrap().report.rows[0].clone();
    let multi = run_experiment(&tiny_config("cmde", Some(10.0))).unwrap().report.rows[0].clone();
    let numbers = |r: &multispeed::harness::MetricsRow| {
        [r.psnr, r.mse, r.consistency_psnr, r.diversity, r.ufid, r.jfid].map(f64::to_bits)
    };
    assert_eq!(numbers(&joint), numbers(&multi));
}

#[test]
fn report_is_finite_and_well_formed() {
    for (e, s) in [("dse", None), ("cde", None), ("cdiffe", None), ("cmde", Some(0.5)), ("vs-cmde", Some(0.5))] {
        let report: MetricsReport = run_experiment(&tiny_config(e, s)).unwrap().report;
        let r = &report.rows[0];
        for v in [r.psnr, r.mse, r.consistency_psnr, r.diversity, r.ufid, r.jfid] {
            assert!(v.is_finite(), "{e}: {r:?}");
        }
        assert!(r.diversity >= 0.0 && r.ufid >= 0.0 && r.jfid >= 0.0);
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[1], e);
        // 17 significant digits: one leading digit and sixteen decimals.
        let mantissa = fields[4].trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.len(), 18, "{}", fields[4]);
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let good = tiny_config("cde", None).to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&good).unwrap(), tiny_config("cde", None));
    assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{good}")).is_err());
    assert!(ExperimentConfig::from_toml(&good.replace("k_reconstructions = 3", "k_reconstructions = 1")).is_err());
    let mut cmde = tiny_config("cde", None);
    cmde.estimator = multispeed::harness::Estimator::Cmde;
    assert!(cmde.validate().is_err());
}
