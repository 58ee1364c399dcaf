//! Classical odds-ratio meta-analysis: Mantel-Haenszel, Peto and
//! DerSimonian-Laird. Intervals and p-values are Wald-type on the log scale.
//!
//! Zero-cell handling follows common practice: the continuity-corrected
//! variants add 0.5 to every cell of a study with at least one empty cell,
//! double-zero studies included.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{MetaDataset, StudyRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MH")]
    Mh,
    #[serde(rename = "MH-CC")]
    MhCc,
    #[serde(rename = "Peto-F")]
    PetoF,
    #[serde(rename = "Peto-R")]
    PetoR,
    #[serde(rename = "DL")]
    Dl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mh,
        Method::MhCc,
        Method::PetoF,
        Method::PetoR,
        Method::Dl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mh => "MH",
            Method::MhCc => "MH-CC",
            Method::PetoF => "Peto-F",
            Method::PetoR => "Peto-R",
            Method::Dl => "DL",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
    }

    pub fn run(self, data: &MetaDataset, alpha: f64) -> Result<OrResult> {
        match self {
            Method::Mh => mantel_haenszel(data, false, alpha),
            Method::MhCc => mantel_haenszel(data, true, alpha),
            Method::PetoF => peto(data, false, alpha),
            Method::PetoR => peto(data, true, alpha),
            Method::Dl => dersimonian_laird(data, alpha),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Pooled odds ratio with its interval and two-sided p-value for `OR = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrResult {
    pub method: Method,
    pub or_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
    /// Between-study variance of the log odds ratio (random-effects methods).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
}

impl OrResult {
    pub fn covers(&self, or: f64) -> bool {
        self.ci_lo <= or && or <= self.ci_hi
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
    } else {
        Err(Error::Domain {
            what: "alpha",
            value: alpha,
            domain: "(0, 1)",
        })
    }
}

fn wald(method: Method, log_or: f64, se: f64, z: f64, tau2: Option<f64>) -> Result<OrResult> {
    if !(log_or.is_finite() && se.is_finite() && se > 0.0) {
        return Err(Error::Pooling {
            method: method.name(),
            reason: "pooled estimate or its standard error is not finite",
        });
    }
    let p_value = 2.0 * Normal::standard().sf((log_or / se).abs());
    Ok(OrResult {
        method,
        or_hat: log_or.exp(),
        ci_lo: (log_or - z * se).exp(),
        ci_hi: (log_or + z * se).exp(),
        p_value,
        tau2,
    })
}

/// Cells `(a, b, c, d)`: treated events, treated non-events, control events,
/// control non-events; 0.5 added to each when `cc` and any cell is empty.
fn cells(s: &StudyRecord, cc: bool) -> (f64, f64, f64, f64) {
    let a = s.y1 as f64;
    let b = (s.n1 - s.y1) as f64;
    let c = s.y2 as f64;
    let d = (s.n2 - s.y2) as f64;
    if cc && (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) {
        (a + 0.5, b + 0.5, c + 0.5, d + 0.5)
    } else {
        (a, b, c, d)
    }
}

/// Mantel-Haenszel pooled odds ratio with the Robins-Breslow-Greenland
/// variance. Without correction, double-zero studies drop out; with `cc`
/// they enter after the 0.5 correction.
pub fn mantel_haenszel(data: &MetaDataset, cc: bool, alpha: f64) -> Result<OrResult> {
    let z = check_alpha(alpha)?;
    let method = if cc { Method::MhCc } else { Method::Mh };
    let (mut r, mut s, mut pr, mut ps_qr, mut qs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let studies: Box<dyn Iterator<Item = &StudyRecord>> = if cc {
        Box::new(data.all_studies())
    } else {
        Box::new(data.studies().iter())
    };
    for st in studies {
        let (a, b, c, d) = cells(st, cc);
        let n = a + b + c + d;
        let (ri, si) = (a * d / n, b * c / n);
        let (p, q) = ((a + d) / n, (b + c) / n);
        r += ri;
        s += si;
        pr += p * ri;
        ps_qr += p * si + q * ri;
        qs += q * si;
    }
    if r <= 0.0 || s <= 0.0 {
        return Err(Error::Pooling {
            method: method.name(),
            reason: "odds ratio is zero or infinite",
        });
    }
    let var = pr / (2.0 * r * r) + ps_qr / (2.0 * r * s) + qs / (2.0 * s * s);
    wald(method, (r / s).ln(), var.sqrt(), z, None)
}

struct Estimate {
    y: f64,
    v: f64,
}

/// DerSimonian-Laird pooling of per-study estimates with moment estimator of
/// the between-study variance.
fn dl_pool(method: Method, est: &[Estimate], z: f64) -> Result<OrResult> {
    if est.is_empty() {
        return Err(Error::Pooling {
            method: method.name(),
            reason: "no studies to pool",
        });
    }
    let w: Vec<f64> = est.iter().map(|e| 1.0 / e.v).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|w| w * w).sum();
    let fixed = est.iter().zip(&w).map(|(e, w)| w * e.y).sum::<f64>() / sw;
    let q: f64 = est
        .iter()
        .zip(&w)
        .map(|(e, w)| w * (e.y - fixed).powi(2))
        .sum();
    let df = (est.len() - 1) as f64;
    let denom = sw - sw2 / sw;
    let tau2 = if denom > 0.0 {
        ((q - df) / denom).max(0.0)
    } else {
        0.0
    };

    let ws: Vec<f64> = est.iter().map(|e| 1.0 / (e.v + tau2)).collect();
    let sws: f64 = ws.iter().sum();
    let pooled = est.iter().zip(&ws).map(|(e, w)| w * e.y).sum::<f64>() / sws;
    wald(method, pooled, sws.powf(-0.5), z, Some(tau2))
}

/// Peto one-step odds ratio. The random-effects version pools the per-study
/// Peto log odds ratios `(O - E) / V` with DerSimonian-Laird weights.
/// Double-zero studies carry no information and are skipped.
pub fn peto(data: &MetaDataset, random_effects: bool, alpha: f64) -> Result<OrResult> {
    let z = check_alpha(alpha)?;
    let method = if random_effects {
        Method::PetoR
    } else {
        Method::PetoF
    };
    let mut est = Vec::with_capacity(data.k());
    for s in data.studies() {
        let (n1, n2) = (s.n1 as f64, s.n2 as f64);
        let n = n1 + n2;
        let m1 = s.total() as f64;
        let e = n1 * m1 / n;
        let v = n1 * n2 * m1 * (n - m1) / (n * n * (n - 1.0));
        // v = 0 when every subject had the event
        if v > 0.0 {
            est.push((s.y1 as f64 - e, v));
        }
    }
    let sv: f64 = est.iter().map(|&(_, v)| v).sum();
    if sv <= 0.0 {
        return Err(Error::Pooling {
            method: method.name(),
            reason: "hypergeometric variance is zero",
        });
    }
    if random_effects {
        let est: Vec<Estimate> = est
            .iter()
            .map(|&(oe, v)| Estimate {
                y: oe / v,
                v: 1.0 / v,
            })
            .collect();
        dl_pool(method, &est, z)
    } else {
        let oe: f64 = est.iter().map(|&(oe, _)| oe).sum();
        wald(method, oe / sv, sv.powf(-0.5), z, None)
    }
}

/// DerSimonian-Laird on the log odds ratio, with 0.5 added to every cell of
/// studies containing an empty cell. Double-zero studies are included.
pub fn dersimonian_laird(data: &MetaDataset, alpha: f64) -> Result<OrResult> {
    let z = check_alpha(alpha)?;
    let est: Vec<Estimate> = data
        .all_studies()
        .map(|s| {
            let (a, b, c, d) = cells(s, true);
            Estimate {
                y: (a * d / (b * c)).ln(),
                v: 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d,
            }
        })
        .collect();
    dl_pool(Method::Dl, &est, z)
}

/// Runs each method; failures are returned per method rather than aborting.
pub fn run_all(
    data: &MetaDataset,
    methods: &[Method],
    alpha: f64,
) -> Vec<(Method, Result<OrResult>)> {
    methods.iter().map(|&m| (m, m.run(data, alpha))).collect()
}
