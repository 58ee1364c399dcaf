//! Method-of-moments estimators of `(mu, nu)` and the Wald statistic used by
//! the exact test.
//!
//! Balanced studies (`n1 == n2`) follow the beta-binomial moment equations
//! directly. Unbalanced studies are first mapped onto the outcomes that could
//! have been seen with equal arm sizes: the larger arm is subsampled down to
//! the size of the smaller one and each possible event count in the subsample
//! is weighted by its hypergeometric probability. Outcomes with no events in
//! either arm are dropped and the remaining weights renormalised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MetaDataset, StudyRecord};

/// One balanced-design outcome of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedOutcome {
    /// Treated-arm events in the balanced outcome.
    pub y1_star: u64,
    /// Total events in the balanced outcome; always >= 1.
    pub total_star: u64,
    pub weight: f64,
}

/// Weighted balanced-design outcomes of one study; weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedWeights {
    outcomes: Vec<BalancedOutcome>,
}

impl BalancedWeights {
    pub fn outcomes(&self) -> &[BalancedOutcome] {
        &self.outcomes
    }

    fn moment_sums(&self) -> MomentSums {
        let mut acc = MomentSums::default();
        for o in &self.outcomes {
            acc.add_weighted(&MomentSums::of_outcome(o.y1_star, o.total_star), o.weight);
        }
        acc
    }
}

/// Enumerates the balanced-design outcomes of a study with at least one event.
///
/// With `n1 > n2` the treated arm is subsampled to `n2` subjects and
/// `l = max(0, n2 - n1 + y1), ..., y1` treated events are possible; the outcome
/// `l = 0` is dropped when `y2 = 0`. With `n1 < n2` the control arm is
/// subsampled instead and the outcome without control events is dropped when
/// `y1 = 0`.
pub fn enumerate_balanced_weights(study: &StudyRecord) -> Result<BalancedWeights> {
    if study.total() == 0 {
        return Err(Error::InvalidStudy {
            index: 0,
            id: study.id.clone(),
            reason: "double-zero study has no balanced outcomes".into(),
        });
    }
    if study.is_balanced() {
        return Ok(BalancedWeights {
            outcomes: vec![BalancedOutcome {
                y1_star: study.y1,
                total_star: study.total(),
                weight: 1.0,
            }],
        });
    }

    // Subsample the larger arm ("big") to the size of the smaller one; `fixed`
    // is the event count of the untouched smaller arm.
    let treated_is_big = study.n1 > study.n2;
    let (n_big, y_big, n_small, fixed) = if treated_is_big {
        (study.n1, study.y1, study.n2, study.y2)
    } else {
        (study.n2, study.y2, study.n1, study.y1)
    };
    let (l_min, log_w) = hypergeometric_log_weights(n_big, y_big, n_small);

    let kept: Vec<(u64, f64)> = (l_min..)
        .zip(log_w)
        .filter(|&(l, _)| !(l == 0 && fixed == 0))
        .collect();
    let max = kept
        .iter()
        .map(|&(_, w)| w)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = kept.iter().map(|&(_, w)| (w - max).exp()).collect();
    let norm: f64 = raw.iter().sum();

    let outcomes = kept
        .iter()
        .zip(&raw)
        .map(|(&(l, _), &w)| BalancedOutcome {
            y1_star: if treated_is_big { l } else { fixed },
            total_star: l + fixed,
            weight: w / norm,
        })
        .collect();
    Ok(BalancedWeights { outcomes })
}

/// Unnormalised log hypergeometric probabilities of `l` events when drawing
/// `m` of `n` subjects of which `y` had events, for
/// `l = max(0, m + y - n)..=min(y, m)`. Returns the lower end and the weights.
///
/// Built from ratios of consecutive terms so that no large log-factorials are
/// differenced; the first term is pinned at zero.
fn hypergeometric_log_weights(n: u64, y: u64, m: u64) -> (u64, Vec<f64>) {
    debug_assert!(m <= n && y <= n);
    let a = n - y;
    let l_min = (m + y).saturating_sub(n);
    let l_max = y.min(m);
    let mut out = Vec::with_capacity((l_max - l_min + 1) as usize);
    let mut lw = 0.0;
    out.push(lw);
    for l in l_min..l_max {
        // C(a, m-l-1) / C(a, m-l) * C(y, l+1) / C(y, l)
        let j = (m - l) as f64;
        let num = j * (y - l) as f64;
        let den = (a as f64 - j + 1.0) * (l + 1) as f64;
        lw += (num / den).ln();
        out.push(lw);
    }
    (l_min, out)
}

/// Weighted per-study moment contributions. Summing these over studies and
/// dividing by `K` yields every quantity in the estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct MomentSums {
    /// `y1 / y.`
    ratio: f64,
    /// `(y1 + 0.5) / (y. + 1)`
    corrected: f64,
    corrected_sq: f64,
    /// `1 / (y. + 1)`
    inv_total: f64,
    /// `1 - 1 / (y. + 1)`
    comp_inv_total: f64,
}

impl MomentSums {
    fn of_outcome(y1: u64, total: u64) -> Self {
        let ratio = y1 as f64 / total as f64;
        let ct = total as f64 + 1.0;
        let corrected = (y1 as f64 + 0.5) / ct;
        MomentSums {
            ratio,
            corrected,
            corrected_sq: corrected * corrected,
            inv_total: 1.0 / ct,
            comp_inv_total: 1.0 - 1.0 / ct,
        }
    }

    fn add(&mut self, o: &MomentSums) {
        self.ratio += o.ratio;
        self.corrected += o.corrected;
        self.corrected_sq += o.corrected_sq;
        self.inv_total += o.inv_total;
        self.comp_inv_total += o.comp_inv_total;
    }

    fn add_weighted(&mut self, o: &MomentSums, w: f64) {
        self.ratio += w * o.ratio;
        self.corrected += w * o.corrected;
        self.corrected_sq += w * o.corrected_sq;
        self.inv_total += w * o.inv_total;
        self.comp_inv_total += w * o.comp_inv_total;
    }
}

/// Which mean enters the binomial term `m (1 - m) / (y. + 1)` of the variance
/// estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceCentre {
    /// Continuity-corrected mean `mean((y1 + 0.5) / (y. + 1))`. Lies strictly
    /// inside (0, 1), so the variance estimate is always positive.
    #[default]
    CorrectedMean,
    /// The point estimate itself. The variance collapses to zero on datasets
    /// where every study has the same all-or-nothing split.
    Estimate,
    /// The hypothesised mean under test.
    Hypothesized,
}

/// Point estimates, variance and Wald statistic at a hypothesised `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestStatResult {
    pub mu_hat: f64,
    pub nu_hat: f64,
    pub var_hat: f64,
    pub t_value: f64,
}

fn estimates(sums: &MomentSums, k: usize) -> (f64, f64, f64) {
    let k = k as f64;
    let mu = sums.ratio / k;
    let mu_int = sums.corrected / k;
    let nu = (sums.corrected_sq - mu_int * sums.inv_total) / sums.comp_inv_total - mu_int * mu_int;
    (mu, mu_int, nu.max(0.0))
}

fn statistic(sums: &MomentSums, k: usize, mu: f64, centre: VarianceCentre) -> TestStatResult {
    let (mu_hat, mu_int, nu_hat) = estimates(sums, k);
    let c = match centre {
        VarianceCentre::CorrectedMean => mu_int,
        VarianceCentre::Estimate => mu_hat,
        VarianceCentre::Hypothesized => mu,
    };
    let kf = k as f64;
    let var_hat = (c * (1.0 - c) * sums.inv_total + sums.comp_inv_total * nu_hat) / (kf * kf);
    let diff = mu_hat - mu;
    let t_value = if var_hat > 0.0 {
        diff * diff / var_hat
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    TestStatResult {
        mu_hat,
        nu_hat,
        var_hat,
        t_value,
    }
}

fn balanced_sums(data: &MetaDataset) -> Result<MomentSums> {
    let mut acc = MomentSums::default();
    for (index, s) in data.studies().iter().enumerate() {
        if !s.is_balanced() {
            return Err(Error::Unbalanced {
                index,
                n1: s.n1,
                n2: s.n2,
            });
        }
        acc.add(&MomentSums::of_outcome(s.y1, s.total()));
    }
    Ok(acc)
}

fn weighted_sums(data: &MetaDataset) -> Result<MomentSums> {
    let mut acc = MomentSums::default();
    for s in data.studies() {
        acc.add(&enumerate_balanced_weights(s)?.moment_sums());
    }
    Ok(acc)
}

/// Moment estimates `(mu_hat, nu_hat)` for a dataset where every study has
/// equal arm sizes.
pub fn mom_balanced(data: &MetaDataset) -> Result<(f64, f64)> {
    let (mu, _, nu) = estimates(&balanced_sums(data)?, data.k());
    Ok((mu, nu))
}

/// Hypergeometrically weighted moment estimates `(mu_tilde, nu_tilde)`; valid
/// for any mix of arm sizes.
pub fn mom_unbalanced(data: &MetaDataset) -> Result<(f64, f64)> {
    let (mu, _, nu) = estimates(&weighted_sums(data)?, data.k());
    Ok((mu, nu))
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "mu",
            value: mu,
            domain: "(0, 1)",
        })
    }
}

/// Wald statistic at `mu` with the default variance centre.
pub fn wald_statistic(data: &MetaDataset, mu: f64) -> Result<TestStatResult> {
    wald_statistic_with(data, mu, VarianceCentre::default())
}

pub fn wald_statistic_with(
    data: &MetaDataset,
    mu: f64,
    centre: VarianceCentre,
) -> Result<TestStatResult> {
    check_mu(mu)?;
    let sums = if data.is_balanced() {
        balanced_sums(data)?
    } else {
        weighted_sums(data)?
    };
    Ok(statistic(&sums, data.k(), mu, centre))
}

/// The Wald statistic with every study's moment contributions tabulated for
/// each possible treated-arm count `0..=y.`. Evaluating a resampled dataset
/// costs one table lookup per study.
#[derive(Debug, Clone)]
pub struct WaldStatistic {
    centre: VarianceCentre,
    tables: Vec<Vec<MomentSums>>,
    observed: Vec<u64>,
}

impl WaldStatistic {
    pub fn new(data: &MetaDataset, centre: VarianceCentre) -> Result<Self> {
        let tables = data
            .studies()
            .iter()
            .map(|s| {
                let total = s.total();
                (0..=total)
                    .map(|y1| {
                        let probe = StudyRecord {
                            y1,
                            y2: total - y1,
                            ..s.clone()
                        };
                        if probe.is_balanced() {
                            Ok(MomentSums::of_outcome(y1, total))
                        } else {
                            enumerate_balanced_weights(&probe).map(|w| w.moment_sums())
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WaldStatistic {
            centre,
            tables,
            observed: data.studies().iter().map(|s| s.y1).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.tables.len()
    }

    pub fn centre(&self) -> VarianceCentre {
        self.centre
    }

    /// Statistic for treated-arm counts `y1` (one per informative study, each
    /// at most that study's total).
    pub fn evaluate(&self, y1: &[u64], mu: f64) -> TestStatResult {
        debug_assert_eq!(y1.len(), self.tables.len());
        let mut acc = MomentSums::default();
        for (table, &y) in self.tables.iter().zip(y1) {
            acc.add(&table[y as usize]);
        }
        statistic(&acc, self.k(), mu, self.centre)
    }

    pub fn observed(&self, mu: f64) -> TestStatResult {
        self.evaluate(&self.observed, mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_dataset;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Binomial, Distribution};

    fn rec(y1: u64, n1: u64, y2: u64, n2: u64) -> StudyRecord {
        StudyRecord::new("s", y1, n1, y2, n2)
    }

    fn two_study() -> MetaDataset {
        validate_dataset(vec![rec(2, 80, 1, 50), rec(1, 100, 0, 90)]).unwrap()
    }

    #[test]
    fn weights_for_larger_treated_arm() {
        let w = enumerate_balanced_weights(&rec(2, 80, 1, 50)).unwrap();
        let o = w.outcomes();
        assert_eq!(o.len(), 3);
        let expected = [870.0 / 6320.0, 3000.0 / 6320.0, 2450.0 / 6320.0];
        for (l, (out, want)) in o.iter().zip(expected).enumerate() {
            assert_eq!(out.y1_star, l as u64);
            assert_eq!(out.total_star, l as u64 + 1);
            assert_relative_eq!(out.weight, want, max_relative = 1e-13);
        }
    }

    #[test]
    fn zero_control_events_drop_double_zero_outcome() {
        let w = enumerate_balanced_weights(&rec(1, 100, 0, 90)).unwrap();
        assert_eq!(
            w.outcomes(),
            &[BalancedOutcome {
                y1_star: 1,
                total_star: 1,
                weight: 1.0
            }]
        );
    }

    #[test]
    fn larger_control_arm_is_mirrored() {
        let w = enumerate_balanced_weights(&rec(1, 50, 2, 80)).unwrap();
        let o = w.outcomes();
        assert_eq!(o.len(), 3);
        assert!(o.iter().all(|x| x.y1_star == 1));
        assert_eq!(
            o.iter().map(|x| x.total_star).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_relative_eq!(o[1].weight, 3000.0 / 6320.0, max_relative = 1e-13);

        // no treated events: the outcome with no subsampled control events is dropped
        let w = enumerate_balanced_weights(&rec(0, 50, 2, 80)).unwrap();
        assert!(w.outcomes().iter().all(|x| x.total_star >= 1));
        assert_eq!(w.outcomes().len(), 2);
    }

    #[test]
    fn equal_arms_give_single_outcome() {
        let w = enumerate_balanced_weights(&rec(3, 40, 2, 40)).unwrap();
        assert_eq!(w.outcomes().len(), 1);
        assert_eq!(w.outcomes()[0].y1_star, 3);
        assert_eq!(w.outcomes()[0].weight, 1.0);
    }

    #[test]
    fn lower_support_bound_respected() {
        // subsample 95 of 100 subjects with 8 events: at least 3 remain
        let w = enumerate_balanced_weights(&rec(8, 100, 1, 95)).unwrap();
        assert_eq!(w.outcomes()[0].y1_star, 3);
        assert_eq!(w.outcomes().last().unwrap().y1_star, 8);
    }

    #[test]
    fn double_zero_has_no_outcomes() {
        assert!(enumerate_balanced_weights(&rec(0, 10, 0, 20)).is_err());
    }

    #[test]
    fn balanced_moments() {
        let ds = validate_dataset(vec![rec(1, 10, 1, 10), rec(0, 10, 1, 10)]).unwrap();
        let (mu, nu) = mom_balanced(&ds).unwrap();
        assert_eq!(mu, 0.25);
        assert_eq!(nu, 0.0);

        let ds = validate_dataset(vec![rec(0, 10, 1, 10)]).unwrap();
        assert_eq!(mom_balanced(&ds).unwrap(), (0.0, 0.0));

        // identical splits with large totals: dispersion floored at zero
        let ds = validate_dataset(vec![rec(40, 500, 60, 500); 6]).unwrap();
        let (mu, nu) = mom_balanced(&ds).unwrap();
        assert_relative_eq!(mu, 0.4);
        assert_eq!(nu, 0.0);

        assert!(matches!(
            mom_balanced(&two_study()),
            Err(Error::Unbalanced { index: 0, .. })
        ));
    }

    #[test]
    fn weighted_moments_two_study_example() {
        let (mu, nu) = mom_unbalanced(&two_study()).unwrap();
        assert_relative_eq!(mu, 0.7478902953586498, max_relative = 1e-13);
        assert_eq!(nu, 0.0);

        let single = validate_dataset(vec![rec(1, 100, 0, 90)]).unwrap();
        assert_eq!(mom_unbalanced(&single).unwrap().0, 1.0);
    }

    #[test]
    fn wald_two_study_example() {
        let ds = two_study();
        let r = wald_statistic(&ds, 0.5).unwrap();
        assert_relative_eq!(r.var_hat, 0.047907838262617665, max_relative = 1e-12);
        assert_relative_eq!(r.t_value, 1.2826627283023866, max_relative = 1e-12);

        let r = wald_statistic_with(&ds, 0.5, VarianceCentre::Estimate).unwrap();
        assert_relative_eq!(r.var_hat, 0.038840040175609554, max_relative = 1e-12);
        assert_relative_eq!(r.t_value, 1.5821198499065212, max_relative = 1e-12);

        let balanced = validate_dataset(vec![rec(1, 10, 1, 10), rec(0, 10, 1, 10)]).unwrap();
        let r = wald_statistic(&balanced, 0.5).unwrap();
        assert_relative_eq!(r.var_hat, 0.048828125, max_relative = 1e-13);
        assert_relative_eq!(r.t_value, 1.28, max_relative = 1e-13);

        assert!(wald_statistic(&ds, 1.0).is_err());
    }

    #[test]
    fn wald_is_zero_at_estimate() {
        let ds = two_study();
        let mu = mom_unbalanced(&ds).unwrap().0;
        assert_eq!(wald_statistic(&ds, mu).unwrap().t_value, 0.0);
    }

    #[test]
    fn estimate_centre_handles_zero_variance() {
        // every study all-treated: mu_hat = 1, nu_hat = 0
        let ds = validate_dataset(vec![rec(1, 10, 0, 10), rec(2, 10, 0, 10)]).unwrap();
        let r = wald_statistic_with(&ds, 0.5, VarianceCentre::Estimate).unwrap();
        assert_eq!(r.var_hat, 0.0);
        assert_eq!(r.t_value, f64::INFINITY);
        let r = wald_statistic(&ds, 0.5).unwrap();
        assert!(r.var_hat > 0.0 && r.t_value.is_finite());
    }

    #[test]
    fn dz_correction_moves_estimate_away_from_null() {
        // y2 = 0 with a larger treated arm; without the correction l = 0 would
        // contribute a ratio of zero
        let s = rec(2, 300, 0, 100);
        let corrected = enumerate_balanced_weights(&s).unwrap();
        let with: f64 = corrected
            .outcomes()
            .iter()
            .map(|o| o.weight * o.y1_star as f64 / o.total_star as f64)
            .sum();
        let (_, log_w) = hypergeometric_log_weights(300, 2, 100);
        let raw: Vec<f64> = log_w.iter().map(|w| w.exp()).collect();
        let norm: f64 = raw.iter().sum();
        // ratio is 0 for l = 0 and 1 otherwise
        let without: f64 = raw.iter().skip(1).sum::<f64>() / norm;
        assert!(with >= without);
        assert_relative_eq!(with, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn subsample_smaller_than_event_count() {
        // more treated events than control subjects: l cannot exceed n2
        let w = enumerate_balanced_weights(&rec(5, 6, 1, 3)).unwrap();
        assert!(w.outcomes().iter().all(|o| o.y1_star <= 3));
        let total: f64 = w.outcomes().iter().map(|o| o.weight).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn table_matches_direct_statistic() {
        let ds = validate_dataset(vec![
            rec(2, 80, 1, 50),
            rec(1, 100, 0, 90),
            rec(0, 40, 3, 90),
            rec(2, 30, 2, 30),
        ])
        .unwrap();
        let table = WaldStatistic::new(&ds, VarianceCentre::CorrectedMean).unwrap();
        for mu in [0.2, 0.5, 0.77] {
            assert_eq!(table.observed(mu), wald_statistic(&ds, mu).unwrap());
        }
    }

    #[test]
    fn moment_estimators_are_consistent() {
        // beta-binomial with mu = 0.4, nu = 0.02, totals around 50
        let mut rng = ChaCha8Rng::seed_from_u64(20240611);
        let (mu0, nu0) = (0.4, 0.02);
        let c = (mu0 * (1.0 - mu0) - nu0) / nu0;
        let beta = Beta::new(mu0 * c, (1.0 - mu0) * c).unwrap();
        let studies: Vec<_> = (0..5000)
            .map(|i| {
                let total = rng.random_range(45..=55u64);
                let pi: f64 = beta.sample(&mut rng);
                let y1 = Binomial::new(total, pi).unwrap().sample(&mut rng);
                StudyRecord::new(i.to_string(), y1, 1000, total - y1, 1000)
            })
            .collect();
        let ds = validate_dataset(studies).unwrap();
        let (mu, nu) = mom_balanced(&ds).unwrap();
        assert!((mu - mu0).abs() < 0.01, "mu_hat = {mu}");
        assert!((nu - nu0).abs() < 0.005, "nu_hat = {nu}");
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(y1 in 0u64..30, extra1 in 0u64..400, y2 in 0u64..30, extra2 in 0u64..400) {
            prop_assume!(y1 + y2 > 0);
            let s = rec(y1, y1 + extra1 + 1, y2, y2 + extra2 + 1);
            let w = enumerate_balanced_weights(&s).unwrap();
            let total: f64 = w.outcomes().iter().map(|o| o.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.outcomes().iter().all(|o| o.total_star >= 1 && o.weight > 0.0));
        }

        #[test]
        fn statistic_ignores_study_order(seed in any::<u64>(), mu in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let studies: Vec<_> = (0..8)
                .map(|i| {
                    let y1 = rng.random_range(0..4u64);
                    let y2 = rng.random_range(u64::from(y1 == 0)..4u64);
                    StudyRecord::new(i.to_string(), y1, rng.random_range(20..200), y2, rng.random_range(20..200))
                })
                .collect();
            let mut reversed = studies.clone();
            reversed.reverse();
            let a = wald_statistic(&validate_dataset(studies).unwrap(), mu).unwrap();
            let b = wald_statistic(&validate_dataset(reversed).unwrap(), mu).unwrap();
            prop_assert!((a.t_value - b.t_value).abs() <= 1e-12 * a.t_value.max(1.0));
            prop_assert!((a.mu_hat - b.mu_hat).abs() <= 1e-14);
        }
    }
}
