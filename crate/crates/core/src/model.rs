//! Study records, validated datasets and the restricted beta parameter space.
//!
//! The random treatment contrast `pi_i = lambda_i1 / (lambda_i1 + lambda_i2)` is
//! modelled as `Beta(alpha, beta)` with both shapes at least one. The canonical
//! parameterisation is the mean/variance pair `(mu, nu)`; shapes are derived.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack allowed when checking `nu <= nu_sup(mu)`, so that points
/// computed on the boundary survive floating point round-off.
const BOUNDARY_SLACK: f64 = 1e-9;

/// One study's two-arm counts. Arm 1 is treated, arm 2 is control.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    pub y1: u64,
    pub n1: u64,
    pub y2: u64,
    pub n2: u64,
}

impl StudyRecord {
    pub fn new(id: impl Into<String>, y1: u64, n1: u64, y2: u64, n2: u64) -> Self {
        StudyRecord {
            id: id.into(),
            y1,
            n1,
            y2,
            n2,
        }
    }

    /// Total events across both arms.
    pub fn total(&self) -> u64 {
        self.y1 + self.y2
    }

    /// Log ratio of arm sizes, `log(n1 / n2)`.
    pub fn log_size_ratio(&self) -> f64 {
        (self.n1 as f64 / self.n2 as f64).ln()
    }

    pub fn is_double_zero(&self) -> bool {
        self.y1 == 0 && self.y2 == 0
    }

    pub fn is_balanced(&self) -> bool {
        self.n1 == self.n2
    }

    fn check(&self, index: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidStudy {
                index,
                id: self.id.clone(),
                reason,
            })
        };
        if self.n1 == 0 || self.n2 == 0 {
            return fail(format!(
                "arm sizes must be positive (n1 = {}, n2 = {})",
                self.n1, self.n2
            ));
        }
        if self.y1 > self.n1 {
            return fail(format!("y1 = {} exceeds n1 = {}", self.y1, self.n1));
        }
        if self.y2 > self.n2 {
            return fail(format!("y2 = {} exceeds n2 = {}", self.y2, self.n2));
        }
        Ok(())
    }
}

/// A validated collection of studies with double-zero studies set aside.
///
/// Only the informative studies (at least one event) enter the conditional
/// analysis; double-zero studies are kept for reporting and for the classical
/// comparators that use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    studies: Vec<StudyRecord>,
    dz_studies: Vec<StudyRecord>,
}

impl MetaDataset {
    /// Informative studies, in input order.
    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    /// Double-zero studies, in input order.
    pub fn dz_studies(&self) -> &[StudyRecord] {
        &self.dz_studies
    }

    /// Number of informative studies.
    pub fn k(&self) -> usize {
        self.studies.len()
    }

    pub fn k_tot(&self) -> usize {
        self.studies.len() + self.dz_studies.len()
    }

    /// All studies, informative first, then double-zero.
    pub fn all_studies(&self) -> impl Iterator<Item = &StudyRecord> {
        self.studies.iter().chain(self.dz_studies.iter())
    }

    pub fn is_balanced(&self) -> bool {
        self.studies.iter().all(StudyRecord::is_balanced)
    }

    /// Copy of this dataset with the treated-arm counts of the informative
    /// studies replaced. Arm sizes and per-study totals are preserved.
    pub(crate) fn with_treated_counts(&self, y1: &[u64]) -> MetaDataset {
        debug_assert_eq!(y1.len(), self.studies.len());
        let studies = self
            .studies
            .iter()
            .zip(y1)
            .map(|(s, &y)| {
                let total = s.total();
                debug_assert!(y <= total);
                StudyRecord {
                    y1: y,
                    y2: total - y,
                    ..s.clone()
                }
            })
            .collect();
        MetaDataset {
            studies,
            dz_studies: self.dz_studies.clone(),
        }
    }
}

/// Checks every record and partitions out the double-zero studies.
pub fn validate_dataset(raw: Vec<StudyRecord>) -> Result<MetaDataset> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, s) in raw.iter().enumerate() {
        s.check(i)?;
    }
    let (dz_studies, studies): (Vec<_>, Vec<_>) =
        raw.into_iter().partition(StudyRecord::is_double_zero);
    if studies.is_empty() {
        return Err(Error::NoInformativeStudies);
    }
    Ok(MetaDataset {
        studies,
        dz_studies,
    })
}

/// Largest admissible variance of the random effect at mean `mu`: the value at
/// which the smaller beta shape equals one.
pub fn nu_sup(mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Domain {
            what: "mu",
            value: mu,
            domain: "(0, 1)",
        });
    }
    Ok(nu_sup_unchecked(mu))
}

pub(crate) fn nu_sup_unchecked(mu: f64) -> f64 {
    mu * (1.0 - mu) * f64::min(mu / (1.0 + mu), (1.0 - mu) / (2.0 - mu))
}

/// Mean and variance of the beta random effect, restricted to shapes >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReParams {
    mu: f64,
    nu: f64,
}

impl ReParams {
    /// `nu = 0` is accepted and denotes the point mass at `mu`.
    pub fn new(mu: f64, nu: f64) -> Result<Self> {
        let sup = nu_sup(mu)?;
        if nu.is_nan() || nu < 0.0 || nu > sup * (1.0 + BOUNDARY_SLACK) {
            return Err(Error::Domain {
                what: "nu",
                value: nu,
                domain: "[0, nu_sup(mu)]",
            });
        }
        Ok(ReParams {
            mu,
            nu: nu.min(sup),
        })
    }

    /// Point on the boundary `nu = nu_sup(mu)`.
    pub fn boundary(mu: f64) -> Result<Self> {
        Ok(ReParams {
            mu,
            nu: nu_sup(mu)?,
        })
    }

    pub fn from_alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        for (what, v) in [("alpha", alpha), ("beta", beta)] {
            if !v.is_finite() || v < 1.0 {
                return Err(Error::Domain {
                    what,
                    value: v,
                    domain: "[1, inf)",
                });
            }
        }
        let s = alpha + beta;
        let mu = alpha / s;
        let nu = alpha * beta / (s * s * (s + 1.0));
        ReParams::new(mu, nu)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn is_point_mass(&self) -> bool {
        self.nu == 0.0
    }

    /// Beta shape parameters. Fails for the point mass `nu = 0`.
    pub fn to_alpha_beta(&self) -> Result<(f64, f64)> {
        if self.is_point_mass() {
            return Err(Error::PointMass);
        }
        let c = (self.mu * (1.0 - self.mu) - self.nu) / self.nu;
        Ok((self.mu * c, (1.0 - self.mu) * c))
    }

    /// Between-study variability `tau = 1 / (alpha + beta + 1) = nu / (mu (1 - mu))`.
    pub fn tau(&self) -> f64 {
        self.nu / (self.mu * (1.0 - self.mu))
    }
}
