//! Simulated meta-analyses and rejection-rate experiments.
//!
//! Study `i` draws `lambda_1 ~ Gamma(alpha0, rate alpha0 / r0)` and
//! `lambda_2 ~ Gamma(beta0, rate alpha0 / r0)`, then
//! `y_j ~ Poisson(n_j lambda_j)`. Since both gammas share the rate,
//! `lambda_1 / (lambda_1 + lambda_2) ~ Beta(alpha0, beta0)`. Arm sizes are
//! drawn with replacement from a pool of `(n1, n2)` pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparators::Method;
use crate::error::{Error, Result};
use crate::estimators::VarianceCentre;
use crate::mc::{with_threads, McConfig};
use crate::model::{validate_dataset, StudyRecord};
use crate::rng::StreamKey;
use crate::search::{exact_ci, SearchConfig};

/// Domain word separating simulation streams from Monte Carlo streams.
const DATA_STREAM: u64 = 0x5349_4d47_454e;

const ROSIGLITAZONE: &str = include_str!("../fixtures/rosiglitazone_mi.csv");

/// The 48 `(n1, n2)` arm-size pairs of the rosiglitazone trials.
pub fn rosiglitazone_sizes() -> Vec<(u64, u64)> {
    crate::io::read_studies(ROSIGLITAZONE.as_bytes())
        .expect("bundled fixture parses")
        .into_iter()
        .map(|s| (s.n1, s.n2))
        .collect()
}

/// Beta shapes of the three reference settings, null and protective.
pub fn setting_shapes(setting: u8, protective: bool) -> Option<(f64, f64)> {
    Some(match (setting, protective) {
        (1, false) => (1.45, 1.45),
        (1, true) => (1.10, 1.65),
        (2, false) => (5.50, 5.50),
        (2, true) => (4.20, 6.30),
        (3, false) => (145.0, 145.0),
        (3, true) => (110.0, 165.0),
        _ => return None,
    })
}

/// One simulation design together with the analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub alpha0: f64,
    pub beta0: f64,
    /// Mean treated-arm event rate.
    pub r0: f64,
    /// Studies per dataset, double-zero ones included.
    pub k_tot: usize,
    pub size_pool: Vec<(u64, u64)>,
    pub reps: usize,
    pub first_rep: usize,
    pub seed: u64,
    /// Run the exact interval in addition to the comparators.
    pub exact: bool,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub mc_reps: usize,
    pub step: f64,
    pub correction_window: usize,
    pub nu_grid_size: usize,
    pub variance_centre: VarianceCentre,
    /// Poisson redraws allowed per study before the replicate is dropped.
    pub max_redraws: u32,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "setting1-null".into(),
            alpha0: 1.45,
            beta0: 1.45,
            r0: 0.01,
            k_tot: 48,
            size_pool: rosiglitazone_sizes(),
            reps: 100,
            first_rep: 0,
            seed: 1,
            exact: true,
            methods: Method::ALL.to_vec(),
            alpha: 0.05,
            mc_reps: 2000,
            step: 0.001,
            correction_window: 10,
            nu_grid_size: 20,
            variance_centre: VarianceCentre::default(),
            max_redraws: 100,
        }
    }
}

impl Scenario {
    /// Reference setting `1..=3` with the given study count and event rate.
    pub fn setting(setting: u8, protective: bool, k_tot: usize, r0: f64) -> Result<Self> {
        let (alpha0, beta0) = setting_shapes(setting, protective)
            .ok_or_else(|| Error::Config(format!("unknown setting {setting}")))?;
        Ok(Scenario {
            name: format!(
                "setting{setting}-{}",
                if protective { "protective" } else { "null" }
            ),
            alpha0,
            beta0,
            r0,
            k_tot,
            ..Scenario::default()
        })
    }

    pub fn mu0(&self) -> f64 {
        self.alpha0 / (self.alpha0 + self.beta0)
    }

    pub fn nu0(&self) -> f64 {
        let mu = self.mu0();
        mu * (1.0 - mu) / (self.alpha0 + self.beta0 + 1.0)
    }

    /// Odds ratio targeted by the comparators, `alpha0 / beta0`.
    pub fn odds_ratio0(&self) -> f64 {
        self.alpha0 / self.beta0
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
            ("r0", self.r0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be positive, got {v}")));
            }
        }
        if self.k_tot == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.size_pool.is_empty() || self.size_pool.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Config(
                "size pool must hold positive arm sizes".into(),
            ));
        }
        if self.exact {
            self.search_config().grid_size()?;
        }
        Ok(())
    }

    fn search_config(&self) -> SearchConfig {
        SearchConfig {
            alpha: self.alpha,
            step: self.step,
            correction_window: self.correction_window,
            nu_grid_size: self.nu_grid_size,
            variance_centre: self.variance_centre,
            mc: McConfig {
                m: self.mc_reps,
                seed: 0,
                threads: None,
            },
            ..SearchConfig::default()
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. `setting` and
    /// `effect` pick reference shapes and may be overridden by explicit
    /// `alpha0` / `beta0`. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sc = Scenario::default();
        let mut setting: Option<u8> = None;
        let mut protective = false;
        let mut shapes: (Option<f64>, Option<f64>) = (None, None);
        let mut named = false;
        let mut seen = std::collections::HashSet::new();

        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key {key}"),
                });
            }
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("{key}: expected {what}, got {value:?}"),
            };
            macro_rules! num {
                ($t:ty, $what:expr) => {
                    value.parse::<$t>().map_err(|_| bad($what))?
                };
            }
            match key {
                "name" => {
                    sc.name = value.to_string();
                    named = true;
                }
                "setting" => setting = Some(num!(u8, "1, 2 or 3")),
                "effect" => {
                    protective = match value {
                        "null" => false,
                        "protective" => true,
                        _ => return Err(bad("null or protective")),
                    }
                }
                "alpha0" => shapes.0 = Some(num!(f64, "a number")),
                "beta0" => shapes.1 = Some(num!(f64, "a number")),
                "r0" => sc.r0 = num!(f64, "a number"),
                "k" => sc.k_tot = num!(usize, "a count"),
                "reps" => sc.reps = num!(usize, "a count"),
                "first_rep" => sc.first_rep = num!(usize, "a count"),
                "seed" => sc.seed = num!(u64, "an unsigned integer"),
                "exact" => sc.exact = num!(bool, "true or false"),
                "methods" => {
                    sc.methods = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            Method::parse(s)
                                .ok_or_else(|| bad("a list of MH, MH-CC, Peto-F, Peto-R, DL"))
                        })
                        .collect::<Result<_>>()?
                }
                "alpha" => sc.alpha = num!(f64, "a number"),
                "mc_reps" => sc.mc_reps = num!(usize, "a count"),
                "step" => sc.step = num!(f64, "a number"),
                "correction_window" => sc.correction_window = num!(usize, "a count"),
                "nu_grid_size" => sc.nu_grid_size = num!(usize, "a count"),
                "variance_centre" => {
                    sc.variance_centre = match value {
                        "corrected-mean" => VarianceCentre::CorrectedMean,
                        "estimate" => VarianceCentre::Estimate,
                        "hypothesized" => VarianceCentre::Hypothesized,
                        _ => return Err(bad("corrected-mean, estimate or hypothesized")),
                    }
                }
                "max_redraws" => sc.max_redraws = num!(u32, "a count"),
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown key {key}"),
                    })
                }
            }
        }

        if let Some(s) = setting {
            let (a, b) = setting_shapes(s, protective)
                .ok_or_else(|| Error::Config(format!("unknown setting {s}")))?;
            sc.alpha0 = a;
            sc.beta0 = b;
            if !named {
                sc.name = format!(
                    "setting{s}-{}",
                    if protective { "protective" } else { "null" }
                );
            }
        } else if protective {
            return Err(Error::Config("effect requires setting".into()));
        }
        if let Some(a) = shapes.0 {
            sc.alpha0 = a;
        }
        if let Some(b) = shapes.1 {
            sc.beta0 = b;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Scenario::parse(&std::fs::read_to_string(path)?)
    }
}

/// One simulated dataset before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub studies: Vec<StudyRecord>,
    /// Poisson draws that exceeded the arm size and were redrawn.
    pub redraws: u32,
}

fn data_stream(sc: &Scenario, rep: usize) -> rand_chacha::ChaCha8Rng {
    StreamKey::new(sc.seed, &[DATA_STREAM]).stream(rep as u64)
}

fn capped_poisson<R: Rng + ?Sized>(
    n: u64,
    rate: f64,
    max_redraws: u32,
    rng: &mut R,
    redraws: &mut u32,
) -> Option<u64> {
    let mean = n as f64 * rate;
    if mean.is_nan() || mean <= 0.0 {
        return Some(0);
    }
    let pois = Poisson::new(mean).ok()?;
    for _ in 0..=max_redraws {
        let y = pois.sample(rng) as u64;
        if y <= n {
            return Some(y);
        }
        *redraws += 1;
    }
    None
}

/// Dataset for replicate `rep`. `None` when a count still exceeded its arm
/// size after `max_redraws` attempts.
pub fn generate_dataset(sc: &Scenario, rep: usize) -> Result<Option<SimulatedData>> {
    sc.validate()?;
    let mut rng = data_stream(sc, rep);
    Ok(generate_with(sc, &mut rng))
}

fn generate_with<R: Rng + ?Sized>(sc: &Scenario, rng: &mut R) -> Option<SimulatedData> {
    let scale = sc.r0 / sc.alpha0;
    let g1 = Gamma::new(sc.alpha0, scale).expect("validated shape");
    let g2 = Gamma::new(sc.beta0, scale).expect("validated shape");
    let mut redraws = 0;
    let mut studies = Vec::with_capacity(sc.k_tot);
    for i in 0..sc.k_tot {
        let &(n1, n2) = sc.size_pool.choose(rng).expect("non-empty pool");
        let (l1, l2) = (g1.sample(rng), g2.sample(rng));
        let y1 = capped_poisson(n1, l1, sc.max_redraws, rng, &mut redraws)?;
        let y2 = capped_poisson(n2, l2, sc.max_redraws, rng, &mut redraws)?;
        studies.push(StudyRecord::new((i + 1).to_string(), y1, n1, y2, n2));
    }
    Some(SimulatedData { studies, redraws })
}

/// Per-replicate, per-method outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub method: &'static str,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub reject: bool,
    pub covers: bool,
}

/// Why a replicate produced no analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dropped {
    Redraws,
    AllDoubleZero,
}

struct ReplicateOutcome {
    rep: usize,
    dropped: Option<Dropped>,
    redraws: u32,
    dz_fraction: f64,
    records: Vec<ReplicateRecord>,
    failures: Vec<(&'static str, String)>,
}

pub const EXACT_LABEL: &str = "exact";

fn run_replicate(sc: &Scenario, rep: usize) -> ReplicateOutcome {
    let mut rng = data_stream(sc, rep);
    let mut out = ReplicateOutcome {
        rep,
        dropped: None,
        redraws: 0,
        dz_fraction: 0.0,
        records: Vec::new(),
        failures: Vec::new(),
    };
    let Some(sim) = generate_with(sc, &mut rng) else {
        out.dropped = Some(Dropped::Redraws);
        return out;
    };
    out.redraws = sim.redraws;
    let mc_seed = rng.next_u64();
    let data = match validate_dataset(sim.studies) {
        Ok(d) => d,
        Err(_) => {
            out.dropped = Some(Dropped::AllDoubleZero);
            out.dz_fraction = 1.0;
            return out;
        }
    };
    out.dz_fraction = data.dz_studies().len() as f64 / data.k_tot() as f64;

    if sc.exact {
        let mut cfg = sc.search_config();
        cfg.mc.seed = mc_seed;
        match exact_ci(&data, &cfg) {
            Ok(ci) => out.records.push(ReplicateRecord {
                rep,
                method: EXACT_LABEL,
                estimate: ci.mu_hat,
                lower: ci.lower,
                upper: ci.upper,
                reject: ci.lower > 0.5 || ci.upper < 0.5,
                covers: ci.lower <= sc.mu0() && sc.mu0() <= ci.upper,
            }),
            Err(e) => out.failures.push((EXACT_LABEL, e.to_string())),
        }
    }
    for &m in &sc.methods {
        match m.run(&data, sc.alpha) {
            Ok(r) => out.records.push(ReplicateRecord {
                rep,
                method: m.name(),
                estimate: r.or_hat,
                lower: r.ci_lo,
                upper: r.ci_hi,
                reject: !r.covers(1.0),
                covers: r.covers(sc.odds_ratio0()),
            }),
            Err(e) => out.failures.push((m.name(), e.to_string())),
        }
    }
    out
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mu0: f64,
    pub nu0: f64,
    pub r0: f64,
    pub k: usize,
    pub reps: usize,
    pub reject_rate: f64,
    pub reject_se: f64,
    pub coverage: f64,
    pub mean_ci_length: f64,
}

/// Bookkeeping written next to the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetadata {
    pub scenario: Scenario,
    pub mu0: f64,
    pub nu0: f64,
    pub odds_ratio0: f64,
    pub requested_reps: usize,
    pub analysed_reps: usize,
    pub dropped_all_double_zero: usize,
    pub dropped_redraw_limit: usize,
    /// Poisson draws above the arm size that were redrawn.
    pub redraws: u64,
    pub mean_double_zero_fraction: f64,
    /// Analyses that failed, by method.
    pub method_failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub summary: Vec<SummaryRow>,
    pub metadata: ExperimentMetadata,
    pub records: Vec<ReplicateRecord>,
}

/// Runs replicates `first_rep .. first_rep + reps` in parallel. Results do
/// not depend on the number of threads.
pub fn run_experiment(sc: &Scenario, threads: Option<usize>) -> Result<Experiment> {
    sc.validate()?;
    let outcomes: Vec<ReplicateOutcome> = with_threads(threads, || {
        (sc.first_rep..sc.first_rep + sc.reps)
            .into_par_iter()
            .map(|rep| run_replicate(sc, rep))
            .collect()
    })?;

    let mut labels: Vec<&'static str> = Vec::new();
    if sc.exact {
        labels.push(EXACT_LABEL);
    }
    labels.extend(sc.methods.iter().map(|m| m.name()));

    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for o in &outcomes {
        for (m, e) in &o.failures {
            log::debug!("replicate {}: {m}: {e}", o.rep);
            *failures.entry(m.to_string()).or_default() += 1;
        }
    }
    let records: Vec<ReplicateRecord> = outcomes
        .iter()
        .flat_map(|o| o.records.iter().copied())
        .collect();

    let summary = labels
        .iter()
        .map(|&label| {
            let rows: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.method == label).collect();
            let n = rows.len();
            let frac = |f: &dyn Fn(&ReplicateRecord) -> bool| {
                if n == 0 {
                    f64::NAN
                } else {
                    rows.iter().filter(|r| f(r)).count() as f64 / n as f64
                }
            };
            let reject_rate = frac(&|r| r.reject);
            let lengths: Vec<f64> = rows
                .iter()
                .map(|r| r.upper - r.lower)
                .filter(|l| l.is_finite())
                .collect();
            SummaryRow {
                method: label.to_string(),
                mu0: sc.mu0(),
                nu0: sc.nu0(),
                r0: sc.r0,
                k: sc.k_tot,
                reps: n,
                reject_rate,
                reject_se: (reject_rate * (1.0 - reject_rate) / n as f64).sqrt(),
                coverage: frac(&|r| r.covers),
                mean_ci_length: if lengths.is_empty() {
                    f64::NAN
                } else {
                    lengths.iter().sum::<f64>() / lengths.len() as f64
                },
            }
        })
        .collect();

    let count = |d: Dropped| outcomes.iter().filter(|o| o.dropped == Some(d)).count();
    let generated: Vec<&ReplicateOutcome> = outcomes
        .iter()
        .filter(|o| o.dropped != Some(Dropped::Redraws))
        .collect();
    let metadata = ExperimentMetadata {
        scenario: sc.clone(),
        mu0: sc.mu0(),
        nu0: sc.nu0(),
        odds_ratio0: sc.odds_ratio0(),
        requested_reps: sc.reps,
        analysed_reps: outcomes.iter().filter(|o| o.dropped.is_none()).count(),
        dropped_all_double_zero: count(Dropped::AllDoubleZero),
        dropped_redraw_limit: count(Dropped::Redraws),
        redraws: outcomes.iter().map(|o| o.redraws as u64).sum(),
        mean_double_zero_fraction: if generated.is_empty() {
            0.0
        } else {
            generated.iter().map(|o| o.dz_fraction).sum::<f64>() / generated.len() as f64
        },
        method_failures: failures,
    };
    Ok(Experiment {
        summary,
        metadata,
        records,
    })
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_csv<W: Write>(writer: W, rows: &[ReplicateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
