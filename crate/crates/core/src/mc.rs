//! Monte Carlo null distribution of the Wald statistic.
//!
//! Conditional on the observed totals `y.`, each replicate draws a fresh random
//! effect `pi_i ~ Beta(mu, nu)` per study and then
//! `y1 ~ Binomial(y., expit(logit(pi_i) + log(n1 / n2)))`.

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{VarianceCentre, WaldStatistic};
use crate::model::{MetaDataset, ReParams};
use crate::rng::StreamKey;

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Replicates per p-value.
    pub m: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            m: 2000,
            seed: 1,
            threads: None,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("Monte Carlo size must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs `f` on a pool with the requested number of threads, or on the
/// ambient pool when `threads` is `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Monte Carlo p-value with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McPvalue {
    pub p: f64,
    pub t_obs: f64,
    pub exceedances: usize,
    pub m: usize,
}

impl McPvalue {
    /// Binomial standard error `sqrt(p (1 - p) / M)`.
    pub fn se(&self) -> f64 {
        (self.p * (1.0 - self.p) / self.m as f64).sqrt()
    }
}

/// Success probability of a treated-arm event given the contrast `pi` and
/// the arm-size ratio `n1 / n2`: `expit(logit(pi) + log(ratio))`.
fn arm_probability(pi: f64, size_ratio: f64) -> f64 {
    let odds = pi * size_ratio;
    odds / (odds + (1.0 - pi))
}

enum Contrast {
    Fixed(f64),
    Random(Beta<f64>),
}

impl Contrast {
    fn new(p: &ReParams) -> Result<Self> {
        if p.is_point_mass() {
            return Ok(Contrast::Fixed(p.mu()));
        }
        let (a, b) = p.to_alpha_beta()?;
        Beta::new(a, b)
            .map(Contrast::Random)
            .map_err(|_| Error::Domain {
                what: "beta shape",
                value: a.min(b),
                domain: "(0, inf)",
            })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Contrast::Fixed(mu) => *mu,
            Contrast::Random(beta) => beta.sample(rng),
        }
    }
}

fn draw_treated<R: Rng + ?Sized>(total: u64, prob: f64, rng: &mut R) -> u64 {
    if total == 1 {
        return u64::from(rng.random::<f64>() < prob);
    }
    // prob is in [0, 1] by construction
    Binomial::new(total, prob.clamp(0.0, 1.0))
        .expect("valid binomial parameters")
        .sample(rng)
}

/// Precomputed per-dataset state for repeated p-value evaluation.
#[derive(Debug, Clone)]
pub struct NullEngine {
    stat: WaldStatistic,
    totals: Vec<u64>,
    size_ratios: Vec<f64>,
}

impl NullEngine {
    pub fn new(data: &MetaDataset, centre: VarianceCentre) -> Result<Self> {
        Ok(NullEngine {
            stat: WaldStatistic::new(data, centre)?,
            totals: data.studies().iter().map(|s| s.total()).collect(),
            size_ratios: data
                .studies()
                .iter()
                .map(|s| s.n1 as f64 / s.n2 as f64)
                .collect(),
        })
    }

    pub fn statistic(&self) -> &WaldStatistic {
        &self.stat
    }

    fn fill_null_counts<R: Rng + ?Sized>(&self, contrast: &Contrast, rng: &mut R, out: &mut [u64]) {
        for ((slot, &total), &ratio) in out.iter_mut().zip(&self.totals).zip(&self.size_ratios) {
            let pi = contrast.sample(rng);
            *slot = draw_treated(total, arm_probability(pi, ratio), rng);
        }
    }

    /// Monte Carlo estimate of `P{T(mu; D^{mu,nu}) >= T(mu; D0)}`.
    ///
    /// Replicate `r` uses stream `r` of a key derived from `(seed, mu, nu)`,
    /// so the result is independent of the thread count.
    pub fn pvalue(&self, params: ReParams, cfg: &McConfig) -> Result<McPvalue> {
        cfg.validate()?;
        let contrast = Contrast::new(&params)?;
        let mu = params.mu();
        let t_obs = self.stat.observed(mu).t_value;
        let key = StreamKey::new(cfg.seed, &[mu.to_bits(), params.nu().to_bits()]);
        let k = self.totals.len();

        let exceedances: usize = (0..cfg.m)
            .into_par_iter()
            .with_min_len(32)
            .map_init(
                || vec![0u64; k],
                |buf, r| {
                    let mut rng = key.stream(r as u64);
                    self.fill_null_counts(&contrast, &mut rng, buf);
                    usize::from(self.stat.evaluate(buf, mu).t_value >= t_obs)
                },
            )
            .sum();

        Ok(McPvalue {
            p: exceedances as f64 / cfg.m as f64,
            t_obs,
            exceedances,
            m: cfg.m,
        })
    }
}

/// Draws one dataset under `params` with the observed totals held fixed.
pub fn generate_null_dataset<R: Rng + ?Sized>(
    data: &MetaDataset,
    params: &ReParams,
    rng: &mut R,
) -> Result<MetaDataset> {
    let contrast = Contrast::new(params)?;
    let y1: Vec<u64> = data
        .studies()
        .iter()
        .map(|s| {
            let pi = contrast.sample(rng);
            let ratio = s.n1 as f64 / s.n2 as f64;
            draw_treated(s.total(), arm_probability(pi, ratio), rng)
        })
        .collect();
    Ok(data.with_treated_counts(&y1))
}

/// Monte Carlo p-value at `(mu, nu)` using the default variance centre.
pub fn mc_pvalue(data: &MetaDataset, mu: f64, nu: f64, cfg: &McConfig) -> Result<McPvalue> {
    let params = ReParams::new(mu, nu)?;
    let engine = NullEngine::new(data, VarianceCentre::default())?;
    with_threads(cfg.threads, || engine.pvalue(params, cfg))?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::mom_unbalanced;
    use crate::model::{validate_dataset, StudyRecord};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> MetaDataset {
        validate_dataset(vec![
            StudyRecord::new("1", 2, 80, 1, 50),
            StudyRecord::new("2", 1, 100, 0, 90),
            StudyRecord::new("3", 0, 60, 3, 120),
            StudyRecord::new("4", 4, 200, 2, 200),
            StudyRecord::new("5", 1, 30, 1, 30),
            StudyRecord::new("6", 0, 10, 0, 10),
        ])
        .unwrap()
    }

    #[test]
    fn arm_probability_matches_expit_form() {
        assert_relative_eq!(arm_probability(0.5, 2.0), 2.0 / 3.0, max_relative = 1e-15);
        for &(pi, ratio) in &[(0.2f64, 0.5f64), (0.9, 3.0), (0.5, 1.0)] {
            let logit = (pi / (1.0 - pi)).ln() + ratio.ln();
            let expit = 1.0 / (1.0 + (-logit).exp());
            assert_relative_eq!(arm_probability(pi, ratio), expit, max_relative = 1e-12);
        }
        assert_eq!(arm_probability(0.0, 2.0), 0.0);
        assert_eq!(arm_probability(1.0, 2.0), 1.0);
    }

    #[test]
    fn null_datasets_keep_totals() {
        let data = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for nu in [0.0, 0.02, nu_sup_of(0.3)] {
            let p = ReParams::new(0.3, nu).unwrap();
            for _ in 0..50 {
                let g = generate_null_dataset(&data, &p, &mut rng).unwrap();
                assert_eq!(g.k(), data.k());
                assert_eq!(g.dz_studies(), data.dz_studies());
                for (a, b) in g.studies().iter().zip(data.studies()) {
                    assert_eq!((a.n1, a.n2, a.total()), (b.n1, b.n2, b.total()));
                    assert!(a.total() >= 1);
                }
            }
        }
    }

    fn nu_sup_of(mu: f64) -> f64 {
        crate::model::nu_sup(mu).unwrap()
    }

    #[test]
    fn point_mass_single_event_is_fair_coin() {
        let data = validate_dataset(vec![StudyRecord::new("1", 1, 50, 0, 50)]).unwrap();
        let p = ReParams::new(0.5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let ones: u64 = (0..n)
            .map(|_| {
                generate_null_dataset(&data, &p, &mut rng)
                    .unwrap()
                    .studies()[0]
                    .y1
            })
            .sum();
        let freq = ones as f64 / n as f64;
        assert!(
            (freq - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(),
            "freq = {freq}"
        );
    }

    #[test]
    fn pvalue_is_one_at_estimate() {
        let data = toy();
        let mu_hat = mom_unbalanced(&data).unwrap().0;
        let cfg = McConfig {
            m: 300,
            ..McConfig::default()
        };
        let r = mc_pvalue(&data, mu_hat, 0.0, &cfg).unwrap();
        assert_eq!(r.t_obs, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.exceedances, 300);
    }

    #[test]
    fn pvalue_is_on_the_mc_lattice_and_thread_independent() {
        let data = toy();
        let base = McConfig {
            m: 777,
            seed: 5,
            threads: Some(1),
        };
        let one = mc_pvalue(&data, 0.35, 0.01, &base).unwrap();
        let four = mc_pvalue(
            &data,
            0.35,
            0.01,
            &McConfig {
                threads: Some(4),
                ..base
            },
        )
        .unwrap();
        assert_eq!(one, four);
        assert_eq!(one.p, one.exceedances as f64 / 777.0);
        let other_seed = mc_pvalue(&data, 0.35, 0.01, &McConfig { seed: 6, ..base }).unwrap();
        assert_eq!(other_seed.t_obs, one.t_obs);
    }

    #[test]
    fn far_tail_rejects() {
        let data = validate_dataset(
            (0..20)
                .map(|i| StudyRecord::new(i.to_string(), 6, 100, 6, 100))
                .collect(),
        )
        .unwrap();
        let cfg = McConfig {
            m: 500,
            ..McConfig::default()
        };
        let r = mc_pvalue(&data, 0.05, nu_sup_of(0.05), &cfg).unwrap();
        assert_eq!(r.p, 0.0);
    }

    #[test]
    fn rejects_zero_replicates() {
        let cfg = McConfig {
            m: 0,
            ..McConfig::default()
        };
        assert!(mc_pvalue(&toy(), 0.5, 0.0, &cfg).is_err());
        assert!(mc_pvalue(&toy(), 0.5, 0.2, &McConfig::default()).is_err());
    }
}
