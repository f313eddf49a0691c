//! Report files: per-run `section,key,value` CSV, CMC CSV, and the combined
//! comparison table with SVG CMC plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{CmcCurve, EvalProtocol, EvalReport};

/// Ranks echoed in the combined table.
pub const TABLE_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Per-run report. Floats use the shortest representation that parses back
/// to the same value.
pub fn run_report_text(label: &str, report: &EvalReport, config: &BTreeMap<String, String>) -> String {
    let mut s = String::from("section,key,value\n");
    let _ = writeln!(s, "summary,label,{label}");
    let _ = writeln!(s, "summary,map,{}", report.map);
    for r in TABLE_RANKS {
        let _ = writeln!(s, "summary,rank{r},{}", report.cmc.at(r));
    }
    let _ = writeln!(s, "summary,queries_evaluated,{}", report.per_query_ap.len());
    let _ = writeln!(s, "summary,queries_skipped,{}", report.skipped.len());
    let _ = writeln!(s, "protocol,single_query,{}", report.protocol.single_query);
    let _ = writeln!(
        s,
        "protocol,exclude_same_camera_same_id,{}",
        report.protocol.exclude_same_camera_same_id
    );
    for (k, v) in config {
        let _ = writeln!(s, "config,{k},{v}");
    }
    for (q, ap) in &report.per_query_ap {
        let _ = writeln!(s, "ap,{q},{ap}");
    }
    for q in &report.skipped {
        let _ = writeln!(s, "skipped,{q},");
    }
    for (i, v) in report.cmc.values.iter().enumerate() {
        let _ = writeln!(s, "cmc,{},{v}", i + 1);
    }
    s
}

pub fn write_run_report(
    path: impl AsRef<Path>,
    label: &str,
    report: &EvalReport,
    config: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, run_report_text(label, report, config)).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a per-run report back into its label and [`EvalReport`].
pub fn read_run_report(path: impl AsRef<Path>) -> Result<(String, EvalReport)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut label = None;
    let mut map = None;
    let mut protocol = EvalProtocol::default();
    let mut per_query_ap = Vec::new();
    let mut skipped = Vec::new();
    let mut cmc = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(path, line, "expected section,key,value"));
        }
        let (section, key, value) = (&row[0], &row[1], &row[2]);
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(path, line, format!("{s:?}: {e}")));
        let idx = |s: &str| s.parse::<usize>().map_err(|e| parse_err(path, line, format!("{s:?}: {e}")));
        let flag = |s: &str| s.parse::<bool>().map_err(|e| parse_err(path, line, format!("{s:?}: {e}")));
        match (section, key) {
            ("summary", "label") => label = Some(value.to_string()),
            ("summary", "map") => map = Some(num(value)?),
            ("summary", _) | ("config", _) => {}
            ("protocol", "single_query") => protocol.single_query = flag(value)?,
            ("protocol", "exclude_same_camera_same_id") => protocol.exclude_same_camera_same_id = flag(value)?,
            ("ap", q) => per_query_ap.push((idx(q)?, num(value)?)),
            ("skipped", q) => skipped.push(idx(q)?),
            ("cmc", r) => {
                if idx(r)? != cmc.len() + 1 {
                    return Err(parse_err(path, line, "cmc ranks must be consecutive from 1"));
                }
                cmc.push(num(value)?);
            }
            _ => return Err(parse_err(path, line, format!("unknown row {section},{key}"))),
        }
    }
    let label = label.ok_or_else(|| parse_err(path, 1, "missing summary,label"))?;
    let map = map.ok_or_else(|| parse_err(path, 1, "missing summary,map"))?;
    Ok((
        label,
        EvalReport {
            protocol,
            cmc: CmcCurve { values: cmc },
            map,
            per_query_ap,
            skipped,
        },
    ))
}

/// `rank,value` rows.
pub fn write_cmc(path: impl AsRef<Path>, cmc: &CmcCurve) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("rank,value\n");
    for (i, v) in cmc.values.iter().enumerate() {
        let _ = writeln!(s, "{},{v}", i + 1);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `config,rank1,rank5,rank10,rank20,map`, one row per report, values echoed
/// unchanged.
pub fn summary_table(reports: &[(String, EvalReport)]) -> String {
    let mut s = String::from("config,rank1,rank5,rank10,rank20,map\n");
    for (label, r) in reports {
        let _ = write!(s, "{}", csv_field(label));
        for k in TABLE_RANKS {
            let _ = write!(s, ",{}", r.cmc.at(k));
        }
        let _ = writeln!(s, ",{}", r.map);
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// CMC curves as an SVG line plot over ranks `1..=max_rank`.
pub fn cmc_svg(reports: &[(String, EvalReport)], max_rank: usize) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 190.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_rank = max_rank.max(2);
    let x = |r: usize| left + (r - 1) as f64 / (max_rank - 1) as f64 * pw;
    let y = |v: f64| top + (1.0 - v) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{x2:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{v:.1}</text>"##,
            yy = y(v),
            x2 = left + pw,
            tx = left - 6.0,
            ty = y(v) + 4.0
        );
    }
    let ticks: Vec<usize> = (1..=max_rank).filter(|r| *r == 1 || r % 5 == 0).collect();
    for r in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{r}</text>"#,
            x(r),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">rank</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">matching rate</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (label, r)) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = (1..=max_rank.min(r.cmc.values.len().max(1)))
            .map(|k| format!("{:.2},{:.2}", x(k), y(r.cmc.at(k))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{} ({:.1}%)</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            xml_escape(label),
            100.0 * r.cmc.at(1)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the combined table to `csv_path` and the CMC plot next to it
/// (same stem, `.svg`). Returns the plot path.
pub fn emit_report(reports: &[(String, EvalReport)], csv_path: impl AsRef<Path>) -> Result<PathBuf> {
    if reports.is_empty() {
        return Err(Error::Argument("no reports to combine".into()));
    }
    let csv_path = csv_path.as_ref();
    fs::write(csv_path, summary_table(reports)).map_err(|e| Error::io(csv_path, e))?;
    let svg_path = csv_path.with_extension("svg");
    let max_rank = reports.iter().map(|(_, r)| r.cmc.values.len()).max().unwrap_or(1).min(20);
    fs::write(&svg_path, cmc_svg(reports, max_rank)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(svg_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(cmc: Vec<f64>, map: f64) -> EvalReport {
        EvalReport {
            protocol: EvalProtocol::default(),
            per_query_ap: vec![(0, map), (2, 1.0 / 3.0)],
            skipped: vec![1],
            cmc: CmcCurve { values: cmc },
            map,
        }
    }

    #[test]
    fn run_report_round_trips_exactly() {
        let r = report(vec![0.1 + 0.2, 2.0 / 3.0, 1.0], 0.123_456_789_012_345_68);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        let mut cfg = BTreeMap::new();
        cfg.insert("seed".to_string(), "4".to_string());
        write_run_report(&p, "full", &r, &cfg).unwrap();
        let (label, back) = read_run_report(&p).unwrap();
        assert_eq!(label, "full");
        assert_eq!(back, r);
    }

    #[test]
    fn table_has_one_row_per_config() {
        let reports: Vec<(String, EvalReport)> = ["full", "baseline1", "baseline2"]
            .iter()
            .map(|l| (l.to_string(), report(vec![0.5, 0.75, 1.0], 0.6)))
            .collect();
        let t = summary_table(&reports);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "full,0.5,1,1,1,0.6");
    }

    #[test]
    fn svg_is_well_formed() {
        let reports = vec![
            ("a<b".to_string(), report(vec![0.2, 0.4, 0.9], 0.3)),
            ("c&d".to_string(), report(vec![0.5, 1.0], 0.7)),
        ];
        let svg = cmc_svg(&reports, 3);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
        assert_eq!(lines, 2);
    }

    #[test]
    fn emit_requires_reports() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[], dir.path().join("r.csv")).is_err());
        let svg = emit_report(&[("x".into(), report(vec![1.0], 1.0))], dir.path().join("r.csv")).unwrap();
        assert!(svg.exists());
    }
}
