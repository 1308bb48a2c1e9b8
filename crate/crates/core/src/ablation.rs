//! Three-variant comparison table with the average relative change against
//! the base model.

use serde::{Deserialize, Serialize};

use crate::metrics::MetricReport;
use crate::objective::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Option<MetricReport>,
    /// Error message when the variant failed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Runs `run` once per variant; failures become marked rows.
    pub fn collect<E: std::fmt::Display>(
        variants: &[Variant],
        mut run: impl FnMut(Variant) -> std::result::Result<MetricReport, E>,
    ) -> Self {
        let rows = variants
            .iter()
            .map(|&variant| match run(variant) {
                Ok(m) => AblationRow {
                    variant,
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => AblationRow {
                    variant,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        Self { rows }
    }

    fn base(&self) -> Option<&MetricReport> {
        self.rows
            .iter()
            .find(|r| r.variant == Variant::Base)
            .and_then(|r| r.metrics.as_ref())
    }

    /// Mean over metrics of `(m - m_base) / m_base`, skipping metrics where
    /// the base scores zero. `None` for the base row itself, failed rows, or
    /// when the base failed.
    pub fn avg_delta(&self, variant: Variant) -> Option<f64> {
        if variant == Variant::Base {
            return None;
        }
        let base = self.base()?.values();
        let row = self.rows.iter().find(|r| r.variant == variant)?.metrics.as_ref()?.values();
        let deltas: Vec<f64> = base
            .iter()
            .zip(row)
            .filter(|(b, _)| **b > 0.0)
            .map(|(b, m)| (m - b) / b)
            .collect();
        (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64)
    }

    /// Markdown table, one row per variant.
    pub fn render(&self) -> String {
        let mut out = String::from("| Model |");
        for name in MetricReport::NAMES {
            out.push_str(&format!(" {name} |"));
        }
        out.push_str(" AVG.Δ |\n|---|");
        out.push_str(&"---|".repeat(MetricReport::NAMES.len() + 1));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} |", r.variant.label()));
            match (&r.metrics, &r.error) {
                (Some(m), _) => {
                    for v in m.values() {
                        out.push_str(&format!(" {v:.4} |"));
                    }
                    match self.avg_delta(r.variant) {
                        Some(d) => out.push_str(&format!(" {:+.2}% |", 100.0 * d)),
                        None => out.push_str(" - |"),
                    }
                }
                (None, err) => {
                    let msg = err.as_deref().unwrap_or("unknown error").replace('|', "/");
                    out.push_str(&format!(" FAILED: {msg} |"));
                    out.push_str(&" |".repeat(MetricReport::NAMES.len()));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(x: f64) -> MetricReport {
        MetricReport {
            bleu1: x,
            bleu2: x,
            bleu3: x,
            bleu4: x,
            rouge_l: x,
            cider: 2.0 * x,
        }
    }

    #[test]
    fn deltas_relative_to_base() {
        let t = AblationTable::collect(&Variant::ALL, |v| -> Result<_, String> {
            Ok(report(match v {
                Variant::Base => 0.5,
                Variant::Vdmae => 0.55,
                Variant::Full => 0.6,
            }))
        });
        assert_eq!(t.avg_delta(Variant::Base), None);
        assert!((t.avg_delta(Variant::Vdmae).unwrap() - 0.1).abs() < 1e-12);
        assert!((t.avg_delta(Variant::Full).unwrap() - 0.2).abs() < 1e-12);
        let text = t.render();
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("AVG.Δ") && text.contains("+20.00%"));
    }

    #[test]
    fn failed_row_is_marked() {
        let t = AblationTable::collect(&Variant::ALL, |v| {
            if v == Variant::Vdmae {
                Err("diverged".to_string())
            } else {
                Ok(report(0.4))
            }
        });
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows[1].metrics.is_none());
        assert_eq!(t.avg_delta(Variant::Vdmae), None);
        assert!(t.render().contains("FAILED: diverged"));
        assert_eq!(t.avg_delta(Variant::Full), Some(0.0));
    }
}
