//! Mass-estimation metrics (ALDE, APE, MnRE, q, ADE) and stratified aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_positive(m: f64, m_hat: f64) -> Result<()> {
    if m > 0.0 && m_hat > 0.0 && m.is_finite() && m_hat.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("masses must be positive and finite, got ({m}, {m_hat})")))
    }
}

/// `|ln m − ln m̂|`
pub fn alde(m: f64, m_hat: f64) -> Result<f64> {
    check_positive(m, m_hat)?;
    Ok((m.ln() - m_hat.ln()).abs())
}

/// `|m − m̂| / m`
pub fn ape(m: f64, m_hat: f64) -> Result<f64> {
    if !(m > 0.0 && m.is_finite() && m_hat.is_finite()) {
        return Err(Error::Domain(format!("APE needs m > 0, got ({m}, {m_hat})")));
    }
    Ok((m - m_hat).abs() / m)
}

/// `min(m̂/m, m/m̂)`
pub fn mnre(m: f64, m_hat: f64) -> Result<f64> {
    check_positive(m, m_hat)?;
    Ok((m_hat / m).min(m / m_hat))
}

/// `max(m̂/m, m/m̂) < 2`
pub fn q_hit(m: f64, m_hat: f64) -> Result<bool> {
    check_positive(m, m_hat)?;
    Ok((m_hat / m).max(m / m_hat) < 2.0)
}

/// `|m − m̂|`
pub fn ade(m: f64, m_hat: f64) -> Result<f64> {
    if !(m.is_finite() && m_hat.is_finite()) {
        return Err(Error::Domain(format!("ADE needs finite masses, got ({m}, {m_hat})")));
    }
    Ok((m - m_hat).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub mass: f64,
    pub predicted: f64,
    pub category: String,
    pub seen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratify {
    None,
    SeenUnseen,
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub count: usize,
    pub alde: f64,
    pub ape: f64,
    pub mnre: f64,
    pub q_rate: f64,
    pub ade: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strata: Vec<MetricsReport>,
}

pub const CSV_HEADER: &str = "stratum,count,ALDE,APE,MnRE,Q,ADE";

impl MetricsReport {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.label, self.count, self.alde, self.ape, self.mnre, self.q_rate, self.ade
        )
    }

    /// One row per stratum followed by the Total row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for st in &self.strata {
            let _ = writeln!(s, "{}", st.csv_row());
        }
        let _ = writeln!(s, "{}", self.csv_row());
        s
    }

    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>7} {:>7} {:>7} {:>7} {:>11} {:>6}\n",
            "Category", "ALDE", "APE", "MnRE", "Q", "ADE", "Count"
        );
        for r in self.strata.iter().chain(std::iter::once(self)) {
            let _ = writeln!(
                s,
                "{:<14} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>11.3} {:>6}",
                r.label, r.alde, r.ape, r.mnre, r.q_rate, r.ade, r.count
            );
        }
        s
    }

    pub fn stratum(&self, label: &str) -> Option<&MetricsReport> {
        self.strata.iter().find(|s| s.label == label)
    }
}

fn summarize(label: &str, pairs: &[&EvalPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Domain(format!("cannot aggregate empty set '{label}'")));
    }
    let (mut a, mut p, mut r, mut q, mut d) = (0.0, 0.0, 0.0, 0usize, 0.0);
    for pair in pairs {
        a += alde(pair.mass, pair.predicted)?;
        p += ape(pair.mass, pair.predicted)?;
        r += mnre(pair.mass, pair.predicted)?;
        q += usize::from(q_hit(pair.mass, pair.predicted)?);
        d += ade(pair.mass, pair.predicted)?;
    }
    let n = pairs.len() as f64;
    Ok(MetricsReport {
        label: label.to_string(),
        count: pairs.len(),
        alde: a / n,
        ape: p / n,
        mnre: r / n,
        q_rate: q as f64 / n,
        ade: d / n,
        strata: Vec::new(),
    })
}

/// Arithmetic means of the per-pair metrics, with optional strata.
/// The top-level report is the "Total" over all pairs.
pub fn aggregate(pairs: &[EvalPair], stratify: Stratify) -> Result<MetricsReport> {
    let all: Vec<&EvalPair> = pairs.iter().collect();
    let mut total = summarize("Total", &all)?;
    match stratify {
        Stratify::None => {}
        Stratify::SeenUnseen => {
            for (label, seen) in [("Seen", true), ("Unseen", false)] {
                let part: Vec<&EvalPair> = pairs.iter().filter(|p| p.seen == seen).collect();
                if !part.is_empty() {
                    total.strata.push(summarize(label, &part)?);
                }
            }
        }
        Stratify::Category => {
            let mut groups: BTreeMap<&str, Vec<&EvalPair>> = BTreeMap::new();
            for p in pairs {
                groups.entry(p.category.as_str()).or_default().push(p);
            }
            for (label, part) in groups {
                total.strata.push(summarize(label, &part)?);
            }
        }
    }
    Ok(total)
}

/// Count-weighted combination of disjoint strata (used to cross-check Total rows).
pub fn combine_strata(strata: &[MetricsReport]) -> Option<MetricsReport> {
    let count: usize = strata.iter().map(|s| s.count).sum();
    if count == 0 {
        return None;
    }
    let w = |f: fn(&MetricsReport) -> f64| {
        strata.iter().map(|s| s.count as f64 * f(s)).sum::<f64>() / count as f64
    };
    Some(MetricsReport {
        label: "Combined".into(),
        count,
        alde: w(|s| s.alde),
        ape: w(|s| s.ape),
        mnre: w(|s| s.mnre),
        q_rate: w(|s| s.q_rate),
        ade: w(|s| s.ade),
        strata: Vec::new(),
    })
}
