//! Result tables and their CSV, text and SVG renderings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub grid: String,
    pub cell: String,
    pub label: String,
    pub seed: u64,
    /// Ratios within 5, 10 and 20 cm.
    pub ratios: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub grid: String,
    pub cell: String,
    pub label: String,
    pub n: usize,
    pub mean: [f64; 3],
    /// Sample standard deviation (0 for a single seed).
    pub std: [f64; 3],
}

impl Aggregate {
    /// `(mean difference, pooled std)` of r@5 against `other`.
    pub fn r5_versus(&self, other: &Aggregate) -> (f64, f64) {
        let pooled = ((self.std[0].powi(2) + other.std[0].powi(2)) / 2.0).sqrt();
        (self.mean[0] - other.mean[0], pooled)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

const HEADER: [&str; 7] = ["grid", "cell", "label", "seed", "r5", "r10", "r20"];

impl ResultTable {
    /// Per-cell aggregates in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.grid.clone(), r.cell.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(grid, cell)| {
                let rows: Vec<&ResultRow> = self.rows.iter().filter(|r| r.grid == grid && r.cell == cell).collect();
                let mut mean = [0.0; 3];
                let mut std = [0.0; 3];
                for j in 0..3 {
                    let v: Vec<f64> = rows.iter().map(|r| r.ratios[j]).collect();
                    (mean[j], std[j]) = mean_std(&v);
                }
                Aggregate { label: rows[0].label.clone(), grid, cell, n: rows.len(), mean, std }
            })
            .collect()
    }

    pub fn aggregate(&self, cell: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.cell == cell)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.grid.clone(),
                r.cell.clone(),
                r.label.clone(),
                r.seed.to_string(),
                r.ratios[0].to_string(),
                r.ratios[1].to_string(),
                r.ratios[2].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        if r.headers()?.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Format("summary CSV has an unexpected header".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Format(format!("bad number '{}' in summary CSV", &rec[i])))
            };
            rows.push(ResultRow {
                grid: rec[0].to_string(),
                cell: rec[1].to_string(),
                label: rec[2].to_string(),
                seed: rec[3].parse().map_err(|_| Error::Format(format!("bad seed '{}' in summary CSV", &rec[3])))?,
                ratios: [num(4)?, num(5)?, num(6)?],
            });
        }
        Ok(ResultTable { rows })
    }

    /// Fixed-width table of the aggregates (percentages, mean ± std).
    pub fn to_text(&self) -> String {
        let aggs = self.aggregates();
        let width = aggs.iter().map(|a| a.cell.len() + a.grid.len() + 1).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}  {:>3}  {:>15}  {:>15}  {:>15}  label\n", "cell", "n", "5 cm", "10 cm", "20 cm");
        for a in aggs {
            let col = |j: usize| format!("{:.2} ± {:.2}", 100.0 * a.mean[j], 100.0 * a.std[j]);
            let _ = writeln!(
                s,
                "{:<width$}  {:>3}  {:>15}  {:>15}  {:>15}  {}",
                format!("{}/{}", a.grid, a.cell),
                a.n,
                col(0),
                col(1),
                col(2),
                a.label
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(invalid(format!("unknown report format '{s}' (valid: csv, text, svg)"))),
        }
    }
}

/// Writes the table to `out_dir`: `summary.csv`, `summary.txt`, or one
/// `plots/<grid>.svg` per grid present.
pub fn emit_report(table: &ResultTable, format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(invalid("cannot report an empty result table"));
    }
    std::fs::create_dir_all(out_dir)?;
    match format {
        ReportFormat::Csv => {
            let p = out_dir.join("summary.csv");
            std::fs::write(&p, table.to_csv()?)?;
            Ok(vec![p])
        }
        ReportFormat::Text => {
            let p = out_dir.join("summary.txt");
            std::fs::write(&p, table.to_text())?;
            Ok(vec![p])
        }
        ReportFormat::Svg => {
            let plots = out_dir.join("plots");
            std::fs::create_dir_all(&plots)?;
            let mut grids: Vec<String> = Vec::new();
            for r in &table.rows {
                if !grids.contains(&r.grid) {
                    grids.push(r.grid.clone());
                }
            }
            let mut out = Vec::new();
            for g in grids {
                let sub = ResultTable { rows: table.rows.iter().filter(|r| r.grid == g).cloned().collect() };
                let p = plots.join(format!("{g}.svg"));
                std::fs::write(&p, svg_plot(&g, &sub))?;
                out.push(p);
            }
            Ok(out)
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Budget grids become r@5-versus-budget lines, one series per subsampling
/// scheme (cells named `<scheme>-<percent>`); other grids become bar charts
/// of r@5 per cell with ±1 std whiskers.
pub fn svg_plot(title: &str, table: &ResultTable) -> String {
    let aggs = table.aggregates();
    let (w, h, left, bottom, top, right) = (720.0, 420.0, 60.0, 140.0, 40.0, 160.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let ymax = aggs.iter().map(|a| a.mean[0] + a.std[0]).fold(0.0f64, f64::max).max(1e-3) * 1.1;
    let ypos = |v: f64| top + plot_h * (1.0 - v / ymax);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{left}\" y=\"20\" font-size=\"14\">{} (ratio within 5 cm)</text>\n\
         <line x1=\"{left}\" y1=\"{}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        escape(title),
        top,
        top + plot_h,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>", left - 4.0, ypos(v) + 4.0, v);
    }
    let series: Vec<(String, Vec<(f64, &Aggregate)>)> = {
        let mut out: Vec<(String, Vec<(f64, &Aggregate)>)> = Vec::new();
        for a in &aggs {
            let parsed = a.cell.rsplit_once('-').and_then(|(scheme, pct)| pct.parse::<f64>().ok().map(|p| (scheme, p)));
            if let Some((scheme, pct)) = parsed {
                match out.iter_mut().find(|(n, _)| n == scheme) {
                    Some((_, pts)) => pts.push((pct, a)),
                    None => out.push((scheme.to_string(), vec![(pct, a)])),
                }
            }
        }
        out
    };
    if title == "budget" && !series.is_empty() {
        // log-scaled budget axis
        let xpos = |p: f64| left + plot_w * (p.max(1.0).log10() / 2.0);
        for p in [1.0, 5.0, 50.0, 100.0] {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{p}%</text>", xpos(p), top + plot_h + 16.0);
        }
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut pts = pts.clone();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let coords: Vec<String> = pts.iter().map(|(p, a)| format!("{:.1},{:.1}", xpos(*p), ypos(a.mean[0]))).collect();
            let _ = writeln!(
                s,
                "<polyline class=\"series\" data-series=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                escape(name),
                coords.join(" ")
            );
            let ly = top + 14.0 * i as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                left + plot_w + 10.0,
                ly,
                left + plot_w + 24.0,
                ly + 9.0,
                escape(name)
            );
        }
    } else {
        let n = aggs.len().max(1) as f64;
        let slot = plot_w / n;
        for (i, a) in aggs.iter().enumerate() {
            let x = left + slot * i as f64 + slot * 0.15;
            let bw = slot * 0.7;
            let y = ypos(a.mean[0]);
            let _ = writeln!(
                s,
                "<rect class=\"bar\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                top + plot_h - y,
                PALETTE[0]
            );
            let cx = x + bw / 2.0;
            let _ = writeln!(
                s,
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
                ypos(a.mean[0] - a.std[0]),
                ypos(a.mean[0] + a.std[0])
            );
            let ty = top + plot_h + 10.0;
            let _ = writeln!(
                s,
                "<text x=\"{cx:.1}\" y=\"{ty:.1}\" transform=\"rotate(60 {cx:.1} {ty:.1})\">{}</text>",
                escape(&a.cell)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
