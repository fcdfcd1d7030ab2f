//! Published-style AP tables: overall consistency and model deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::map_at_50;
use crate::error::{Error, Result};

/// One model/dataset row: per-class APs and, if known, the stated overall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub dataset: String,
    pub model: String,
    pub ap: Vec<f64>,
    #[serde(default)]
    pub overall: Option<f64>,
}

/// A set of rows plus the comparison to draw between two models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub classes: Vec<String>,
    pub rows: Vec<ApRow>,
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub proposed: Option<String>,
    /// Improvements stated elsewhere, in mAP points (0.031 = 3.1%).
    #[serde(default)]
    pub claimed: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowCheck {
    pub dataset: String,
    pub model: String,
    pub mean: f64,
    pub stated: Option<f64>,
}

impl RowCheck {
    /// `|mean − stated|`, or 0 when nothing was stated.
    pub fn error(&self) -> f64 {
        self.stated.map_or(0.0, |s| (self.mean - s).abs())
    }

    /// Mean rounded to three decimals equals the stated value.
    pub fn rounds_to_stated(&self) -> bool {
        self.stated.is_none_or(|s| round3(self.mean) == round3(s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub dataset: String,
    /// Difference of overall values, in points.
    pub absolute: f64,
    /// `absolute / baseline overall`.
    pub relative: f64,
    pub claimed: Option<f64>,
}

impl Delta {
    pub fn disagrees_with_claim(&self) -> bool {
        self.claimed.is_some_and(|c| round3(c) != round3(self.absolute))
    }
}

pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl ApTable {
    pub fn from_json(s: &str) -> Result<Self> {
        let t: ApTable = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Contract("AP table without classes".into()));
        }
        for r in &self.rows {
            if r.ap.len() != self.classes.len() {
                return Err(Error::Contract(format!(
                    "{} / {}: {} APs for {} classes",
                    r.dataset,
                    r.model,
                    r.ap.len(),
                    self.classes.len()
                )));
            }
            if r.ap.iter().chain(&r.overall).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!("{} / {}: AP outside [0, 1]", r.dataset, r.model)));
            }
        }
        Ok(())
    }

    pub fn checks(&self) -> Result<Vec<RowCheck>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(RowCheck {
                    dataset: r.dataset.clone(),
                    model: r.model.clone(),
                    mean: map_at_50(&r.ap)?,
                    stated: r.overall,
                })
            })
            .collect()
    }

    fn overall(&self, dataset: &str, model: &str) -> Result<Option<f64>> {
        match self.rows.iter().find(|r| r.dataset == dataset && r.model == model) {
            Some(r) => Ok(Some(match r.overall {
                Some(v) => v,
                None => round3(map_at_50(&r.ap)?),
            })),
            None => Ok(None),
        }
    }

    /// Proposed minus baseline overall, per dataset holding both rows.
    pub fn deltas(&self) -> Result<Vec<Delta>> {
        let (Some(base), Some(prop)) = (&self.baseline, &self.proposed) else {
            return Ok(Vec::new());
        };
        let mut datasets: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        let mut out = Vec::new();
        for d in datasets {
            if let (Some(b), Some(p)) = (self.overall(d, base)?, self.overall(d, prop)?) {
                let absolute = round3(p - b);
                out.push(Delta {
                    dataset: d.to_string(),
                    absolute,
                    relative: absolute / b,
                    claimed: self.claimed.get(d).copied(),
                });
            }
        }
        Ok(out)
    }

    pub fn render(&self) -> Result<String> {
        let checks = self.checks()?;
        let mut s = String::new();
        let _ = write!(s, "{:<10}{:<14}", "Dataset", "Model");
        for c in &self.classes {
            let _ = write!(s, "{c:>10}");
        }
        let _ = writeln!(s, "{:>10}{:>10}  check", "Overall", "mean");
        for (r, c) in self.rows.iter().zip(&checks) {
            let _ = write!(s, "{:<10}{:<14}", r.dataset, r.model);
            for ap in &r.ap {
                let _ = write!(s, "{ap:>10.3}");
            }
            let stated = r.overall.map_or("-".to_string(), |v| format!("{v:.3}"));
            let verdict = match (c.stated, c.rounds_to_stated()) {
                (None, _) => "-",
                (Some(_), true) => "ok",
                (Some(_), false) => "MISMATCH",
            };
            let _ = writeln!(s, "{stated:>10}{:>10.4}  {verdict}", c.mean);
        }
        let deltas = self.deltas()?;
        if !deltas.is_empty() {
            let (b, p) = (self.baseline.as_deref().unwrap_or(""), self.proposed.as_deref().unwrap_or(""));
            let _ = writeln!(s, "\n{p} vs {b}:");
            let mut notes = Vec::new();
            for d in &deltas {
                let mark = if d.disagrees_with_claim() {
                    notes.push(d);
                    format!(" [{}]", notes.len())
                } else {
                    String::new()
                };
                let _ = writeln!(
                    s,
                    "  {:<10}{:+.3} ({:+.1}% relative){mark}",
                    d.dataset,
                    d.absolute,
                    100.0 * d.relative
                );
            }
            for (i, d) in notes.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "  [{}] {}: claimed improvement {:.1}% but the overall values differ by {:.1} points",
                    i + 1,
                    d.dataset,
                    100.0 * d.claimed.unwrap_or(0.0),
                    100.0 * d.absolute
                );
            }
        }
        Ok(s)
    }

    pub fn csv(&self) -> Result<String> {
        let checks = self.checks()?;
        let mut s = String::from("dataset,model");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",overall,mean\n");
        for (r, c) in self.rows.iter().zip(&checks) {
            s.push_str(&format!("{},{}", r.dataset, r.model));
            for ap in &r.ap {
                s.push_str(&format!(",{ap}"));
            }
            let stated = r.overall.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(",{stated},{:.6}\n", c.mean));
        }
        Ok(s)
    }
}
