//! Per-iteration experiment log records.
//!
//! Records serialize as single JSON lines; a metrics file starts with a
//! [`MetricsHeader`] line so independent readers can check the schema.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// First line of every metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema_version: u32,
    pub run_name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BurnIn,
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    pub map_50_95: f64,
    pub ap50: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub mean_proposals: f64,
    pub mean_max_confidence: f64,
}

/// One training iteration: losses, optional periodic evaluation results, and
/// pseudo-label statistics. All loss values are finite and non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub label_mode: String,
    pub l_s: f64,
    pub l_s_rpn_cls: f64,
    pub l_s_rpn_loc: f64,
    pub l_s_roi_cls: f64,
    pub l_s_roi_loc: f64,
    pub l_u: f64,
    pub l_u_rpn_cls: f64,
    pub l_u_rpn_loc: f64,
    pub l_u_roi_cls: f64,
    pub l_u_roi_loc: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub teacher_map: Option<MapScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub student_map: Option<MapScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pseudo: Option<PseudoStats>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let values = [
            ("l_s", self.l_s),
            ("l_s_rpn_cls", self.l_s_rpn_cls),
            ("l_s_rpn_loc", self.l_s_rpn_loc),
            ("l_s_roi_cls", self.l_s_roi_cls),
            ("l_s_roi_loc", self.l_s_roi_loc),
            ("l_u", self.l_u),
            ("l_u_rpn_cls", self.l_u_rpn_cls),
            ("l_u_rpn_loc", self.l_u_rpn_loc),
            ("l_u_roi_cls", self.l_u_roi_cls),
            ("l_u_roi_loc", self.l_u_roi_loc),
            ("total", self.total),
        ];
        for (name, v) in values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "metrics field {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Round a loss to non-negative, absorbing sub-nano negative float dust from
/// KL sums near zero; anything more negative is a real error.
pub(crate) fn sanitize_loss(v: f64, what: &'static str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite { op: what });
    }
    if v < -1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{what} is negative: {v}"
        )));
    }
    Ok(v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrips_as_json_line() {
        let rec = MetricsRecord {
            iteration: 17,
            phase: Phase::SemiSupervised,
            label_mode: "soft".into(),
            l_s: 1.25,
            l_s_rpn_cls: 0.5,
            l_s_rpn_loc: 0.25,
            l_s_roi_cls: 0.25,
            l_s_roi_loc: 0.25,
            l_u: 0.125,
            l_u_rpn_cls: 0.0625,
            l_u_rpn_loc: 0.0,
            l_u_roi_cls: 0.0625,
            l_u_roi_loc: 0.0,
            total: 1.375,
            teacher_map: Some(MapScores {
                map_50_95: 0.5,
                ap50: 0.75,
            }),
            student_map: None,
            pseudo: Some(PseudoStats {
                mean_proposals: 42.0,
                mean_max_confidence: 0.9,
            }),
        };
        rec.validate().unwrap();
        let line = serde_json::to_string(&rec).unwrap();
        assert!(!line.contains('\n'));
        let back: MetricsRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn sanitize_accepts_float_dust_rejects_negatives() {
        assert_eq!(sanitize_loss(-1e-12, "t").unwrap(), 0.0);
        assert!(sanitize_loss(-0.5, "t").is_err());
        assert!(sanitize_loss(f64::NAN, "t").is_err());
    }
}
