//! Confidence interval for `mu` by inverting the Monte Carlo test.
//!
//! The profile p-value `sup_nu p(mu, nu)` is approximated by its value on the
//! boundary `nu = nu_sup(mu)`. Starting from the asymptotic interval, each
//! bound is pushed outward along a grid of step `s` until the boundary p-value
//! drops below `alpha`. A local correction then looks a few grid points beyond
//! each bound, first on the boundary and then on a full `nu` grid, in case the
//! boundary shortcut stopped too early.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::VarianceCentre;
use crate::mc::{with_threads, McConfig, NullEngine};
use crate::model::{nu_sup_unchecked, MetaDataset, ReParams};

/// Settings of the interval search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub alpha: f64,
    /// Grid step `s` on the `mu` axis. `1 / step` must be an integer.
    pub step: f64,
    /// Number of grid points examined beyond each bound in the correction.
    pub correction_window: usize,
    /// Points of the `nu` grid `[0, nu_sup(mu)]`, endpoints included.
    pub nu_grid_size: usize,
    /// Fewer informative studies than this is an error.
    pub min_studies: usize,
    pub variance_centre: VarianceCentre,
    pub mc: McConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha: 0.05,
            step: 0.001,
            correction_window: 10,
            nu_grid_size: 20,
            min_studies: 2,
            variance_centre: VarianceCentre::default(),
            mc: McConfig::default(),
        }
    }
}

impl SearchConfig {
    /// Validates the settings and returns the number of grid intervals `1 / step`.
    pub fn grid_size(&self) -> Result<u64> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.step > 0.0 && self.step <= 0.5) {
            return Err(Error::Config(format!(
                "step must lie in (0, 0.5], got {}",
                self.step
            )));
        }
        let n = (1.0 / self.step).round();
        if (n * self.step - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "1 / step must be an integer, got step = {}",
                self.step
            )));
        }
        if self.correction_window == 0 {
            return Err(Error::Config("correction window must be at least 1".into()));
        }
        if self.nu_grid_size < 2 {
            return Err(Error::Config("nu grid needs at least 2 points".into()));
        }
        self.mc.validate()?;
        Ok(n as u64)
    }
}

/// What the search did, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchDiagnostics {
    pub seed: u64,
    pub m: usize,
    pub step: f64,
    pub alpha: f64,
    pub correction_window: usize,
    pub nu_grid_size: usize,
    pub variance_centre: VarianceCentre,
    /// Asymptotic starting interval after clamping to the grid.
    pub asymptotic_lower: f64,
    pub asymptotic_upper: f64,
    /// Bounds after the boundary scan.
    pub iterated_lower: f64,
    pub iterated_upper: f64,
    /// Distinct `(mu, nu)` points at which a Monte Carlo p-value was computed.
    pub boundary_evaluations: usize,
    pub grid_evaluations: usize,
    pub lower_corrected: bool,
    pub upper_corrected: bool,
    /// The boundary p-value at the point estimate was below `alpha`.
    pub degenerate: bool,
    /// Monte Carlo standard error of `p_null`.
    pub p_null_se: f64,
}

/// Exact confidence interval for `mu` with the test of `mu = 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactCi {
    pub lower: f64,
    pub upper: f64,
    /// Profile p-value of `mu = 0.5`.
    pub p_null: f64,
    pub mu_hat: f64,
    pub nu_hat: f64,
    pub diagnostics: SearchDiagnostics,
}

/// Memoised p-value evaluation on the `mu` grid.
struct Profile<'a> {
    engine: NullEngine,
    cfg: &'a SearchConfig,
    n: u64,
    boundary: HashMap<u64, f64>,
    grid_evaluations: usize,
}

impl<'a> Profile<'a> {
    fn new(data: &MetaDataset, cfg: &'a SearchConfig) -> Result<Self> {
        let n = cfg.grid_size()?;
        if data.k() < cfg.min_studies.max(1) {
            return Err(Error::TooFewStudies {
                k: data.k(),
                min: cfg.min_studies,
            });
        }
        Ok(Profile {
            engine: NullEngine::new(data, cfg.variance_centre)?,
            cfg,
            n,
            boundary: HashMap::new(),
            grid_evaluations: 0,
        })
    }

    fn mu(&self, i: u64) -> f64 {
        i as f64 / self.n as f64
    }

    fn in_range(&self, i: i64) -> bool {
        i >= 1 && i < self.n as i64
    }

    fn snap(&self, mu: f64) -> u64 {
        ((mu * self.n as f64).round() as u64).clamp(1, self.n - 1)
    }

    /// Boundary p-value at grid index `i`.
    fn boundary(&mut self, i: u64) -> Result<f64> {
        if let Some(&p) = self.boundary.get(&i) {
            return Ok(p);
        }
        let p = self
            .engine
            .pvalue(ReParams::boundary(self.mu(i))?, &self.cfg.mc)?
            .p;
        self.boundary.insert(i, p);
        Ok(p)
    }

    /// Largest p-value over the `nu` grid at `mu`. With `stop_at`, returns as
    /// soon as a value reaches it.
    fn nu_grid_sup(&mut self, mu: f64, stop_at: Option<f64>) -> Result<f64> {
        let sup = nu_sup_unchecked(mu);
        let last = (self.cfg.nu_grid_size - 1) as f64;
        let mut best: f64 = 0.0;
        // boundary first: it is usually the largest
        for h in (0..self.cfg.nu_grid_size).rev() {
            let nu = sup * (h as f64 / last);
            let p = self.engine.pvalue(ReParams::new(mu, nu)?, &self.cfg.mc)?.p;
            self.grid_evaluations += 1;
            best = best.max(p);
            if stop_at.is_some_and(|a| best >= a) {
                break;
            }
        }
        Ok(best)
    }
}

fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Boundary p-value `p(mu, nu_sup(mu))`.
pub fn profile_pvalue_boundary(data: &MetaDataset, mu: f64, cfg: &SearchConfig) -> Result<f64> {
    cfg.grid_size()?;
    let engine = NullEngine::new(data, cfg.variance_centre)?;
    let params = ReParams::boundary(mu)?;
    Ok(with_threads(cfg.mc.threads, || engine.pvalue(params, &cfg.mc))??.p)
}

/// Profile p-value of `mu` over the closed `nu` grid.
pub fn profile_pvalue_grid(data: &MetaDataset, mu: f64, cfg: &SearchConfig) -> Result<f64> {
    let mut prof = Profile::new(data, cfg)?;
    crate::model::nu_sup(mu)?;
    with_threads(cfg.mc.threads, || prof.nu_grid_sup(mu, None))?
}

struct Start {
    lo: u64,
    hi: u64,
    asym_lo: f64,
    asym_hi: f64,
    degenerate: bool,
}

fn initialize(prof: &mut Profile, mu_hat: f64, var_hat: f64) -> Result<Start> {
    let z = normal_quantile(1.0 - prof.cfg.alpha / 2.0);
    let sd = var_hat.sqrt();
    let asym_lo = prof.snap(mu_hat - z * sd);
    let asym_hi = prof.snap(mu_hat + z * sd);
    let centre = prof.snap(mu_hat);
    let alpha = prof.cfg.alpha;

    let lo = if prof.boundary(asym_lo)? >= alpha {
        asym_lo
    } else {
        centre
    };
    let hi = if prof.boundary(asym_hi)? >= alpha {
        asym_hi
    } else {
        centre
    };
    let degenerate = lo == centre && hi == centre && prof.boundary(centre)? < alpha;
    Ok(Start {
        lo,
        hi,
        asym_lo: prof.mu(asym_lo),
        asym_hi: prof.mu(asym_hi),
        degenerate,
    })
}

/// Moves from `start` in direction `dir` while the boundary p-value stays at
/// or above `alpha`; returns the last conforming index.
fn scan(prof: &mut Profile, start: u64, dir: i64) -> Result<u64> {
    let mut i = start as i64;
    while prof.in_range(i + dir) && prof.boundary((i + dir) as u64)? >= prof.cfg.alpha {
        i += dir;
    }
    Ok(i as u64)
}

/// Correction beyond one bound; returns the corrected index.
fn correct(prof: &mut Profile, bound: u64, dir: i64) -> Result<u64> {
    let alpha = prof.cfg.alpha;
    let w = prof.cfg.correction_window as i64;

    // step a: farthest boundary point within the window that still conforms
    let mut extended = bound as i64;
    for k in 1..=w {
        let i = bound as i64 + dir * k;
        if prof.in_range(i) && prof.boundary(i as u64)? >= alpha {
            extended = i;
        }
    }

    // steps b and c: full nu grid beyond the extended bound
    let mut out = extended;
    for j in 1..=w {
        let i = extended + dir * j;
        if !prof.in_range(i) {
            break;
        }
        if prof.nu_grid_sup(prof.mu(i as u64), Some(alpha))? >= alpha {
            out = i;
        }
    }
    Ok(out as u64)
}

fn run_search(data: &MetaDataset, cfg: &SearchConfig) -> Result<ExactCi> {
    let mut prof = Profile::new(data, cfg)?;
    let at_hat = prof.engine.statistic().observed(0.5);
    let (mu_hat, nu_hat) = (at_hat.mu_hat, at_hat.nu_hat);
    let var_hat = match cfg.variance_centre {
        VarianceCentre::Hypothesized => {
            prof.engine
                .statistic()
                .observed(mu_hat.clamp(cfg.step, 1.0 - cfg.step))
                .var_hat
        }
        _ => at_hat.var_hat,
    };

    let start = initialize(&mut prof, mu_hat, var_hat)?;
    let (lower, upper, it_lo, it_hi, moved_lo, moved_hi) = if start.degenerate {
        (mu_hat, mu_hat, mu_hat, mu_hat, false, false)
    } else {
        let it_lo = scan(&mut prof, start.lo, -1)?;
        let it_hi = scan(&mut prof, start.hi, 1)?;
        let lo = correct(&mut prof, it_lo, -1)?;
        let hi = correct(&mut prof, it_hi, 1)?;
        (
            prof.mu(lo),
            prof.mu(hi),
            prof.mu(it_lo),
            prof.mu(it_hi),
            lo != it_lo,
            hi != it_hi,
        )
    };

    let p_null = prof.nu_grid_sup(0.5, None)?;
    Ok(ExactCi {
        lower,
        upper,
        p_null,
        mu_hat,
        nu_hat,
        diagnostics: SearchDiagnostics {
            seed: cfg.mc.seed,
            m: cfg.mc.m,
            step: cfg.step,
            alpha: cfg.alpha,
            correction_window: cfg.correction_window,
            nu_grid_size: cfg.nu_grid_size,
            variance_centre: cfg.variance_centre,
            asymptotic_lower: start.asym_lo,
            asymptotic_upper: start.asym_hi,
            iterated_lower: it_lo,
            iterated_upper: it_hi,
            boundary_evaluations: prof.boundary.len(),
            grid_evaluations: prof.grid_evaluations,
            lower_corrected: moved_lo,
            upper_corrected: moved_hi,
            degenerate: start.degenerate,
            p_null_se: (p_null * (1.0 - p_null) / cfg.mc.m as f64).sqrt(),
        },
    })
}

/// Exact confidence interval for `mu` and the profile p-value of `mu = 0.5`.
pub fn exact_ci(data: &MetaDataset, cfg: &SearchConfig) -> Result<ExactCi> {
    cfg.grid_size()?;
    with_threads(cfg.mc.threads, || run_search(data, cfg))?
}

/// Interval from the full `mu` by `nu` grid: every grid `mu` whose profile
/// p-value over the `nu` grid reaches `alpha`. Slow; meant for checking the
/// boundary search on coarse grids. Returns `None` when no point conforms.
pub fn dense_grid_ci(data: &MetaDataset, cfg: &SearchConfig) -> Result<Option<(f64, f64)>> {
    let mut prof = Profile::new(data, cfg)?;
    with_threads(cfg.mc.threads, || {
        let mut kept = Vec::new();
        for i in 1..prof.n {
            if prof.nu_grid_sup(prof.mu(i), Some(cfg.alpha))? >= cfg.alpha {
                kept.push(prof.mu(i));
            }
        }
        Ok(kept.first().copied().zip(kept.last().copied()))
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_dataset, StudyRecord};

    fn toy() -> MetaDataset {
        validate_dataset(vec![
            StudyRecord::new("1", 3, 100, 1, 100),
            StudyRecord::new("2", 2, 120, 1, 100),
            StudyRecord::new("3", 1, 90, 2, 100),
            StudyRecord::new("4", 4, 100, 1, 100),
            StudyRecord::new("5", 2, 150, 0, 100),
            StudyRecord::new("6", 1, 100, 1, 100),
            StudyRecord::new("7", 0, 100, 0, 100),
            StudyRecord::new("8", 3, 80, 2, 110),
        ])
        .unwrap()
    }

    fn coarse() -> SearchConfig {
        SearchConfig {
            step: 0.01,
            correction_window: 3,
            nu_grid_size: 5,
            mc: McConfig {
                m: 400,
                seed: 11,
                threads: Some(1),
            },
            ..SearchConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().grid_size().is_ok());
        assert_eq!(SearchConfig::default().grid_size().unwrap(), 1000);
        for bad in [
            SearchConfig {
                alpha: 0.0,
                ..SearchConfig::default()
            },
            SearchConfig {
                alpha: 1.0,
                ..SearchConfig::default()
            },
            SearchConfig {
                step: 0.003,
                ..SearchConfig::default()
            },
            SearchConfig {
                step: -0.1,
                ..SearchConfig::default()
            },
            SearchConfig {
                correction_window: 0,
                ..SearchConfig::default()
            },
            SearchConfig {
                nu_grid_size: 1,
                ..SearchConfig::default()
            },
        ] {
            assert!(bad.grid_size().is_err());
        }
    }

    #[test]
    fn single_study_is_refused() {
        let one = validate_dataset(vec![StudyRecord::new("1", 3, 100, 1, 100)]).unwrap();
        assert!(matches!(
            exact_ci(&one, &coarse()),
            Err(Error::TooFewStudies { k: 1, min: 2 })
        ));
        let relaxed = SearchConfig {
            min_studies: 1,
            ..coarse()
        };
        assert!(exact_ci(&one, &relaxed).is_ok());
    }

    #[test]
    fn interval_contains_estimate_and_stays_on_grid() {
        let ci = exact_ci(&toy(), &coarse()).unwrap();
        assert!(!ci.diagnostics.degenerate);
        assert!(ci.lower <= ci.mu_hat && ci.mu_hat <= ci.upper);
        assert!(ci.lower >= 0.01 && ci.upper <= 0.99);
        assert!(ci.lower <= ci.diagnostics.iterated_lower);
        assert!(ci.upper >= ci.diagnostics.iterated_upper);
        for b in [ci.lower, ci.upper] {
            assert!((b * 100.0 - (b * 100.0).round()).abs() < 1e-9);
        }
        assert!((0.0..=1.0).contains(&ci.p_null));
    }

    #[test]
    fn boundary_pvalue_at_estimate_is_one() {
        let data = toy();
        let cfg = coarse();
        let mu_hat = crate::estimators::mom_unbalanced(&data).unwrap().0;
        assert_eq!(profile_pvalue_boundary(&data, mu_hat, &cfg).unwrap(), 1.0);
        assert_eq!(profile_pvalue_boundary(&data, 0.02, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn search_is_reproducible() {
        let a = exact_ci(&toy(), &coarse()).unwrap();
        let mut cfg = coarse();
        cfg.mc.threads = Some(3);
        let b = exact_ci(&toy(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_grid_agrees_with_boundary_search() {
        let cfg = SearchConfig {
            step: 0.02,
            ..coarse()
        };
        let ci = exact_ci(&toy(), &cfg).unwrap();
        let (lo, hi) = dense_grid_ci(&toy(), &cfg).unwrap().unwrap();
        assert!(
            (ci.lower - lo).abs() <= 0.04 + 1e-12,
            "{} vs {}",
            ci.lower,
            lo
        );
        assert!(
            (ci.upper - hi).abs() <= 0.04 + 1e-12,
            "{} vs {}",
            ci.upper,
            hi
        );
    }

    #[test]
    fn everything_in_one_arm_extends_to_the_edge() {
        let data = validate_dataset(
            (0..6)
                .map(|i| StudyRecord::new(i.to_string(), 1, 100, 0, 100))
                .collect(),
        )
        .unwrap();
        let ci = exact_ci(&data, &coarse()).unwrap();
        assert_eq!(ci.mu_hat, 1.0);
        assert_eq!(ci.upper, 0.99);
        assert!(ci.p_null < 0.05);
    }
}
