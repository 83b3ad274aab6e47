//! Evaluation rows, per-variant aggregates, CSV and SVG output.
//!
//! CSV header: `variant,item,seed,object_relevance,text_match,image_match,attention_overlap`;
//! a metric that was not measured for a row is left empty.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenekit::manifest::write_file;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub item: usize,
    pub seed: usize,
    pub object_relevance: Option<f64>,
    pub text_match: Option<f64>,
    pub image_match: Option<f64>,
    pub attention_overlap: Option<f64>,
}

pub const METRICS: [&str; 4] = [
    "object_relevance",
    "text_match",
    "image_match",
    "attention_overlap",
];

impl EvalRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "object_relevance" => self.object_relevance,
            "text_match" => self.text_match,
            "image_match" => self.image_match,
            "attention_overlap" => self.attention_overlap,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: String,
    pub rows: usize,
    /// Mean of each metric over the rows that carry it, in [`METRICS`] order.
    pub means: [Option<f64>; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Variants in first-appearance order.
    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
        }
        v
    }

    pub fn aggregate(&self) -> Vec<Aggregate> {
        self.variants()
            .into_iter()
            .map(|name| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.variant == name).collect();
                let means = METRICS.map(|m| {
                    let vals: Vec<f64> = rows.iter().filter_map(|r| r.metric(m)).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                });
                Aggregate {
                    variant: name,
                    rows: rows.len(),
                    means,
                }
            })
            .collect()
    }

    pub fn mean(&self, variant: &str, metric: &str) -> Option<f64> {
        let i = METRICS.iter().position(|m| *m == metric)?;
        self.aggregate()
            .into_iter()
            .find(|a| a.variant == variant)?
            .means[i]
    }

    /// Per-seed means of `metric` for `variant`, averaged over items.
    pub fn seed_means(&self, variant: &str, metric: &str) -> Vec<f64> {
        let mut seeds: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.seed)
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
            .into_iter()
            .filter_map(|s| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == variant && r.seed == s)
                    .filter_map(|r| r.metric(metric))
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Harness(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Harness(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let rows = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Data {
                    record: format!("csv row {}", i + 1),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<EvalRow>>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "".to_string(), |x| format!("{x:.4}"))
}

/// Markdown with the aggregate table followed by every row.
pub fn markdown_tables(report: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "| variant | rows | {} |", METRICS.join(" | ")).unwrap();
    writeln!(s, "|---|---|{}", "---|".repeat(METRICS.len())).unwrap();
    for a in report.aggregate() {
        let cells: Vec<String> = a.means.iter().map(|m| fmt_opt(*m)).collect();
        writeln!(s, "| {} | {} | {} |", a.variant, a.rows, cells.join(" | ")).unwrap();
    }
    writeln!(s, "\n| variant | item | seed | {} |", METRICS.join(" | ")).unwrap();
    writeln!(s, "|---|---|---|{}", "---|".repeat(METRICS.len())).unwrap();
    for r in &report.rows {
        let cells: Vec<String> = METRICS.iter().map(|m| fmt_opt(r.metric(m))).collect();
        writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.variant,
            r.item,
            r.seed,
            cells.join(" | ")
        )
        .unwrap();
    }
    s
}

/// Horizontal bar chart of one metric's per-variant means.
pub fn svg_bars(report: &EvalReport, metric: &str) -> Option<String> {
    let i = METRICS.iter().position(|m| *m == metric)?;
    let bars: Vec<(String, f64)> = report
        .aggregate()
        .into_iter()
        .filter_map(|a| a.means[i].map(|m| (a.variant, m)))
        .collect();
    if bars.is_empty() {
        return None;
    }
    let max = bars
        .iter()
        .map(|b| b.1.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let (label_w, bar_w, row_h) = (160.0, 320.0, 24.0);
    let height = 40.0 + row_h * bars.len() as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        label_w + bar_w + 80.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="8" y="18" font-weight="bold">{metric}</text>"#
    )
    .unwrap();
    for (k, (name, v)) in bars.iter().enumerate() {
        let y = 30.0 + row_h * k as f64;
        let w = bar_w * v.abs() / max;
        writeln!(s, r#"<text x="8" y="{}">{name}</text>"#, y + 15.0).unwrap();
        writeln!(
            s,
            r##"<rect x="{label_w}" y="{y}" width="{w:.2}" height="{}" fill="#4a78c2"/>"##,
            row_h - 6.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}">{v:.4}</text>"#,
            label_w + w + 6.0,
            y + 15.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes `tables.md`, `summary.csv` and one `<metric>.svg` per measured
/// metric into `out_dir`.
pub fn render_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(
        &out_dir.join("tables.md"),
        markdown_tables(report).as_bytes(),
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string(), "rows".to_string()];
    header.extend(METRICS.iter().map(|m| m.to_string()));
    w.write_record(&header)
        .map_err(|e| Error::Harness(e.to_string()))?;
    for a in report.aggregate() {
        let mut rec = vec![a.variant.clone(), a.rows.to_string()];
        rec.extend(
            a.means
                .iter()
                .map(|m| m.map_or_else(String::new, |x| x.to_string())),
        );
        w.write_record(&rec)
            .map_err(|e| Error::Harness(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Harness(e.to_string()))?;
    write_file(&out_dir.join("summary.csv"), &bytes)?;
    for m in METRICS {
        if let Some(svg) = svg_bars(report, m) {
            write_file(&out_dir.join(format!("{m}.svg")), svg.as_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &str, item: usize, im: f64) -> EvalRow {
        EvalRow {
            variant: v.into(),
            item,
            seed: 0,
            object_relevance: None,
            text_match: Some(0.5),
            image_match: Some(im),
            attention_overlap: None,
        }
    }

    #[test]
    fn csv_round_trip_and_aggregate() {
        let r = EvalReport {
            rows: vec![row("a", 0, 0.25), row("a", 1, 0.75), row("b", 0, 1.0)],
        };
        let back = EvalReport::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.mean("a", "image_match"), Some(0.5));
        assert_eq!(r.mean("a", "attention_overlap"), None);
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert!(text.starts_with(
            "variant,item,seed,object_relevance,text_match,image_match,attention_overlap\n"
        ));
    }
}
