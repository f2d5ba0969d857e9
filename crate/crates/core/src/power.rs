//! Transmit-power estimation: a crop regressor plus a linear correction for
//! transmitters whose crops are contaminated by close neighbors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::encoding::{crop_power_patch, SensorImage, POWER_PATCH};
use crate::models::{Network, PredPower};
use crate::scene::Point;
use crate::{Error, Result};

/// Distances below this (pixels) are clamped before dividing by them.
pub const MIN_NEIGHBOR_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolationRule {
    pub isolation_radius: f64,
    pub neighbor_radius: f64,
}

impl Default for IsolationRule {
    fn default() -> Self {
        Self {
            isolation_radius: 20.0,
            neighbor_radius: 20.0,
        }
    }
}

impl IsolationRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.isolation_radius > 0.0 && self.neighbor_radius > 0.0) {
            return Err(Error::Config("isolation and neighbor radii must be positive".into()));
        }
        Ok(())
    }
}

/// A transmitter is isolated when every other estimate lies strictly
/// farther than the isolation radius.
pub fn classify_isolated(locations: &[Point], rule: &IsolationRule) -> Vec<bool> {
    locations
        .iter()
        .enumerate()
        .map(|(i, p)| {
            locations
                .iter()
                .enumerate()
                .all(|(j, q)| i == j || p.distance(q) > rule.isolation_radius)
        })
        .collect()
}

/// `[K, 1, 21, 21]` batch of crops around each location.
pub fn power_crops(image: &SensorImage, locations: &[Point]) -> Tensor {
    let side = POWER_PATCH as i64;
    let data: Vec<f32> = locations
        .iter()
        .flat_map(|&p| crop_power_patch(image, p).into_iter())
        .collect();
    Tensor::from_slice(&data).view([locations.len() as i64, 1, side, side])
}

/// Uncorrected PredPower estimate for each location, dBm.
pub fn estimate_raw_powers(image: &SensorImage, locations: &[Point], net: &PredPower) -> Result<Vec<f64>> {
    if locations.is_empty() {
        return Ok(Vec::new());
    }
    let out = net.forward(&power_crops(image, locations));
    Ok(Vec::<f32>::try_from(out.flatten(0, -1))?
        .into_iter()
        .map(f64::from)
        .collect())
}

pub fn estimate_raw_power(image: &SensorImage, location: Point, net: &PredPower) -> Result<f64> {
    Ok(estimate_raw_powers(image, &[location], net)?[0])
}

/// Ridge-fitted linear model of the power overestimate caused by neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionModel {
    pub theta: Vec<f64>,
    #[serde(rename = "M")]
    pub max_neighbors: usize,
    pub alpha: f64,
    pub neighbor_radius: f64,
}

impl CorrectionModel {
    pub fn zeros(max_neighbors: usize, neighbor_radius: f64) -> Self {
        Self {
            theta: vec![0.0; 1 + 3 * max_neighbors],
            max_neighbors,
            alpha: 0.0,
            neighbor_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != 1 + 3 * self.max_neighbors {
            return Err(Error::shape(format!("{} coefficients", 1 + 3 * self.max_neighbors), self.theta.len()));
        }
        Ok(())
    }
}

/// `(distance, raw power)` of every estimate within `radius` of the
/// subject, nearest first.
pub fn neighbors_of(subject: usize, estimates: &[(Point, f64)], radius: f64) -> Vec<(f64, f64)> {
    let origin = estimates[subject].0;
    let mut out: Vec<(f64, f64)> = estimates
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != subject)
        .map(|(_, &(p, power))| (origin.distance(&p), power))
        .filter(|&(d, _)| d <= radius)
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    out
}

/// `[p0, d1, p1, p1/d1, ...]`, zero-padded to `1 + 3M`. `neighbors` must be
/// sorted by distance; only the nearest `M` are used.
pub fn feature_vector(p0: f64, neighbors: &[(f64, f64)], max_neighbors: usize) -> Vec<f64> {
    if neighbors.len() > max_neighbors {
        log::warn!(
            "{} neighbors exceed the model's M={max_neighbors}; keeping the nearest",
            neighbors.len()
        );
    }
    let mut f = vec![0.0; 1 + 3 * max_neighbors];
    f[0] = p0;
    for (k, &(d, p)) in neighbors.iter().take(max_neighbors).enumerate() {
        f[1 + 3 * k] = d;
        f[2 + 3 * k] = p;
        f[3 + 3 * k] = p / d.max(MIN_NEIGHBOR_DISTANCE);
    }
    f
}

pub fn build_features(subject: usize, estimates: &[(Point, f64)], model: &CorrectionModel) -> Vec<f64> {
    let neighbors = neighbors_of(subject, estimates, model.neighbor_radius);
    feature_vector(estimates[subject].1, &neighbors, model.max_neighbors)
}

/// One training example: a non-isolated estimate with its raw power, its
/// neighbors and the true power it was matched to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub raw_power: f64,
    pub neighbors: Vec<(f64, f64)>,
    pub true_power: f64,
}

impl CorrectionRecord {
    pub fn delta(&self) -> f64 {
        self.raw_power - self.true_power
    }
}

/// Records for every non-isolated estimate with a known true power.
pub fn collect_records(estimates: &[(Point, f64)], truth: &[Option<f64>], rule: &IsolationRule) -> Vec<CorrectionRecord> {
    let locations: Vec<Point> = estimates.iter().map(|e| e.0).collect();
    classify_isolated(&locations, rule)
        .into_iter()
        .enumerate()
        .filter(|&(_, isolated)| !isolated)
        .filter_map(|(i, _)| {
            truth[i].map(|true_power| CorrectionRecord {
                raw_power: estimates[i].1,
                neighbors: neighbors_of(i, estimates, rule.neighbor_radius),
                true_power,
            })
        })
        .collect()
}

/// Minimizer of `|F theta - delta|^2 + alpha |theta|^2` via the normal
/// equations; falls back to an SVD solve when they are singular.
pub fn ridge(features: &DMatrix<f64>, targets: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    if features.nrows() != targets.len() {
        return Err(Error::shape(format!("{} targets", features.nrows()), targets.len()));
    }
    let n = features.ncols();
    let gram = features.transpose() * features + DMatrix::identity(n, n) * alpha;
    let rhs = features.transpose() * targets;
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    gram.svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Domain(format!("ridge solve failed: {e}")))
}

/// Fits the correction with `M` set to the largest neighbor count seen.
pub fn fit_correction(records: &[CorrectionRecord], alpha: f64, neighbor_radius: f64) -> Result<CorrectionModel> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let m = records.iter().map(|r| r.neighbors.len()).max().unwrap_or(0);
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| feature_vector(r.raw_power, &r.neighbors, m))
        .collect();
    let f = DMatrix::from_fn(rows.len(), 1 + 3 * m, |i, j| rows[i][j]);
    let delta = DVector::from_iterator(records.len(), records.iter().map(CorrectionRecord::delta));
    let theta = ridge(&f, &delta, alpha)?;
    Ok(CorrectionModel {
        theta: theta.iter().copied().collect(),
        max_neighbors: m,
        alpha,
        neighbor_radius,
    })
}

pub fn correct_power(raw: f64, features: &[f64], model: &CorrectionModel) -> f64 {
    raw - model.theta.iter().zip(features).map(|(t, f)| t * f).sum::<f64>()
}

/// Raw estimates for all transmitters; the correction, when given, is
/// applied only to non-isolated ones.
pub fn apply_correction(
    locations: &[Point],
    raw: &[f64],
    model: Option<&CorrectionModel>,
    rule: &IsolationRule,
) -> Vec<f64> {
    let Some(model) = model else {
        return raw.to_vec();
    };
    let estimates: Vec<(Point, f64)> = locations.iter().copied().zip(raw.iter().copied()).collect();
    classify_isolated(locations, rule)
        .into_iter()
        .enumerate()
        .map(|(i, isolated)| {
            if isolated {
                raw[i]
            } else {
                correct_power(raw[i], &build_features(i, &estimates, model), model)
            }
        })
        .collect()
}

pub fn estimate_powers(
    image: &SensorImage,
    locations: &[Point],
    net: &PredPower,
    model: Option<&CorrectionModel>,
    rule: &IsolationRule,
) -> Result<Vec<f64>> {
    let raw = estimate_raw_powers(image, locations, net)?;
    Ok(apply_correction(locations, &raw, model, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn isolation_examples() {
        let rule = IsolationRule::default();
        assert_eq!(classify_isolated(&[Point::new(5.0, 5.0)], &rule), vec![true]);
        let pair = |d: f64| [Point::new(10.0, 10.0), Point::new(10.0 + d, 10.0)];
        assert_eq!(classify_isolated(&pair(19.9), &rule), vec![false, false]);
        assert_eq!(classify_isolated(&pair(20.1), &rule), vec![true, true]);
        assert_eq!(classify_isolated(&pair(20.0), &rule), vec![false, false]);
    }

    #[test]
    fn feature_examples() {
        let model = CorrectionModel::zeros(2, 20.0);
        let alone = [(Point::new(0.0, 0.0), 3.0)];
        assert_eq!(build_features(0, &alone, &model), vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let one = [(Point::new(0.0, 0.0), 3.0), (Point::new(6.0, 8.0), 2.0)];
        assert_eq!(build_features(0, &one, &model), vec![3.0, 10.0, 2.0, 0.2, 0.0, 0.0, 0.0]);
        let two = [
            (Point::new(0.0, 0.0), 1.0),
            (Point::new(15.0, 0.0), 4.0),
            (Point::new(0.0, 5.0), 2.0),
        ];
        let f = build_features(0, &two, &model);
        assert_eq!(&f[1..4], &[5.0, 2.0, 0.4]);
        assert_eq!(f[4], 15.0);
    }

    #[test]
    fn extra_neighbors_are_truncated_to_nearest() {
        let model = CorrectionModel::zeros(1, 20.0);
        let est = [
            (Point::new(0.0, 0.0), 1.0),
            (Point::new(9.0, 0.0), 4.0),
            (Point::new(3.0, 0.0), 2.0),
        ];
        assert_eq!(build_features(0, &est, &model), vec![1.0, 3.0, 2.0, 2.0 / 3.0]);
    }

    #[test]
    fn coincident_neighbor_is_finite() {
        let f = feature_vector(1.0, &[(0.0, 3.0)], 1);
        assert_eq!(f[3], 3.0 / MIN_NEIGHBOR_DISTANCE);
    }

    #[test]
    fn ridge_scalar_formula() {
        let (f, d, alpha) = (2.0, 3.0, 0.01);
        let theta = ridge(&DMatrix::from_element(1, 1, f), &DVector::from_element(1, d), alpha).unwrap();
        assert!((theta[0] - f * d / (f * f + alpha)).abs() < 1e-14);
    }

    #[test]
    fn zero_targets_fit_zero() {
        let records: Vec<CorrectionRecord> = (0..10)
            .map(|i| CorrectionRecord {
                raw_power: i as f64,
                neighbors: vec![(5.0 + i as f64, 1.0)],
                true_power: i as f64,
            })
            .collect();
        let model = fit_correction(&records, 0.01, 20.0).unwrap();
        assert_eq!(model.max_neighbors, 1);
        assert!(model.theta.iter().all(|t| t.abs() < 1e-14));
        assert!(fit_correction(&[], 0.01, 20.0).is_err());
    }

    /// Independent route: least squares on F stacked over sqrt(alpha) I,
    /// solved by SVD of the augmented matrix.
    fn augmented_lstsq(f: &DMatrix<f64>, d: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let (n, p) = f.shape();
        let mut a = DMatrix::zeros(n + p, p);
        a.view_mut((0, 0), (n, p)).copy_from(f);
        a.view_mut((n, 0), (p, p)).fill_diagonal(alpha.sqrt());
        let mut b = DVector::zeros(n + p);
        b.rows_mut(0, n).copy_from(d);
        a.svd(true, true).solve(&b, 1e-14).unwrap()
    }

    #[test]
    fn ridge_matches_augmented_least_squares() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = DMatrix::from_fn(200, 7, |_, _| rng.gen_range(-2.0..2.0));
        let d = DVector::from_fn(200, |_, _| rng.gen_range(-1.0..1.0));
        for alpha in [0.0, 0.01, 1.0] {
            let a = ridge(&f, &d, alpha).unwrap();
            let b = augmented_lstsq(&f, &d, alpha);
            assert!((&a - &b).norm() / b.norm() < 1e-8, "alpha {alpha}");
        }
    }

    #[test]
    fn correction_examples() {
        let model = CorrectionModel {
            theta: vec![0.1, 0.5, 0.5, 0.5],
            max_neighbors: 1,
            alpha: 0.01,
            neighbor_radius: 20.0,
        };
        let isolated = feature_vector(4.0, &[], 1);
        assert!((correct_power(4.0, &isolated, &model) - (4.0 - 0.4)).abs() < 1e-12);
        let zero = CorrectionModel::zeros(1, 20.0);
        assert_eq!(correct_power(4.0, &feature_vector(4.0, &[(3.0, 2.0)], 1), &zero), 4.0);
        let locs = [Point::new(10.0, 10.0), Point::new(80.0, 80.0)];
        assert_eq!(apply_correction(&locs, &[1.0, 2.0], Some(&model), &IsolationRule::default()), vec![1.0, 2.0]);
        assert_eq!(apply_correction(&locs[..1], &[1.5], Some(&model), &IsolationRule::default()), vec![1.5]);
    }

    #[test]
    fn model_json_shape() {
        let v = serde_json::to_value(CorrectionModel::zeros(2, 20.0)).unwrap();
        assert_eq!(v["M"], 2);
        assert_eq!(v["theta"].as_array().unwrap().len(), 7);
        assert!(CorrectionModel { theta: vec![0.0; 3], ..CorrectionModel::zeros(2, 20.0) }.validate().is_err());
    }

    #[test]
    fn raw_power_batch_matches_single() {
        let net = PredPower::new(5);
        let img = SensorImage(ndarray::Array2::from_shape_fn((100, 100), |(i, j)| ((i * j) % 7) as f32 / 7.0));
        let locs = [Point::new(3.2, 50.0), Point::new(60.0, 97.5)];
        let batch = estimate_raw_powers(&img, &locs, &net).unwrap();
        for (k, &p) in locs.iter().enumerate() {
            assert!((estimate_raw_power(&img, p, &net).unwrap() - batch[k]).abs() < 1e-5);
        }
        assert!(estimate_raw_powers(&img, &[], &net).unwrap().is_empty());
    }

    fn arb_estimates() -> impl Strategy<Value = Vec<(Point, f64)>> {
        prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 0.0..5.0f64), 1..8)
            .prop_map(|v| v.into_iter().map(|(x, y, p)| (Point::new(x, y), p)).collect())
    }

    proptest! {
        #[test]
        fn features_have_fixed_length_and_order(est in arb_estimates(), m in 0usize..5) {
            let model = CorrectionModel::zeros(m, 20.0);
            let f = build_features(0, &est, &model);
            prop_assert_eq!(f.len(), 1 + 3 * m);
            let used = neighbors_of(0, &est, 20.0).len().min(m);
            for k in 0..m {
                if k >= used {
                    prop_assert!(f[1 + 3 * k..4 + 3 * k].iter().all(|&v| v == 0.0));
                } else if k > 0 {
                    prop_assert!(f[1 + 3 * k] >= f[3 * k - 2]);
                }
            }
        }

        #[test]
        fn features_ignore_neighbor_order(est in arb_estimates(), m in 0usize..5) {
            let model = CorrectionModel::zeros(m, 20.0);
            let mut rev = est.clone();
            rev[1..].reverse();
            prop_assert_eq!(build_features(0, &est, &model), build_features(0, &rev, &model));
        }

        #[test]
        fn correction_is_linear(
            t1 in prop::collection::vec(-1.0..1.0f64, 4),
            t2 in prop::collection::vec(-1.0..1.0f64, 4),
            f in prop::collection::vec(-5.0..5.0f64, 4),
            raw in -5.0..5.0f64,
        ) {
            let model = |theta: Vec<f64>| CorrectionModel { theta, max_neighbors: 1, alpha: 0.0, neighbor_radius: 20.0 };
            let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
            let delta = |m: &CorrectionModel| raw - correct_power(raw, &f, m);
            prop_assert!((delta(&model(sum)) - delta(&model(t1.clone())) - delta(&model(t2))).abs() < 1e-9);
            let doubled: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
            let m1 = model(t1);
            prop_assert!(((raw - correct_power(raw, &doubled, &m1)) - 2.0 * delta(&m1)).abs() < 1e-9);
        }

        #[test]
        fn unregularized_fit_matches_normal_equation_oracle(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<CorrectionRecord> = (0..30)
                .map(|_| CorrectionRecord {
                    raw_power: rng.gen_range(0.0..5.0),
                    neighbors: vec![(rng.gen_range(1.0..20.0), rng.gen_range(0.0..5.0))],
                    true_power: rng.gen_range(0.0..5.0),
                })
                .collect();
            let model = fit_correction(&records, 0.0, 20.0).unwrap();
            let f = DMatrix::from_fn(30, 4, |i, j| feature_vector(records[i].raw_power, &records[i].neighbors, 1)[j]);
            let d = DVector::from_iterator(30, records.iter().map(|r| r.delta()));
            let oracle = (f.transpose() * &f).try_inverse().unwrap() * f.transpose() * d;
            let theta = DVector::from_vec(model.theta);
            prop_assert!((&theta - &oracle).norm() / oracle.norm() < 1e-8);
        }
    }
}
