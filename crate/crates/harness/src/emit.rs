//! CSV and SVG output.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::aggregate::{AggregatedSeries, SeriesRow, TrialOutcome};
use crate::HarnessError;

pub const CSV_HEADER: [&str; 6] = ["x", "estimator", "median", "q20", "q80", "skipped"];

/// 17 significant digits.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv<W: Write>(series: &AggregatedSeries, out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &series.rows {
        w.write_record([
            fmt_real(r.x),
            r.estimator.clone(),
            fmt_real(r.median),
            fmt_real(r.q20),
            fmt_real(r.q80),
            r.skipped.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn csv_string(series: &AggregatedSeries) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_csv(series, &mut buf)?;
    String::from_utf8(buf).map_err(|e| HarnessError::Io(e.to_string()))
}

/// Reads rows written by [`write_csv`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<SeriesRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |m: String| HarnessError::Io(format!("malformed series CSV: {m}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", &rec[i])));
        rows.push(SeriesRow {
            x: num(0)?,
            estimator: rec[1].to_string(),
            median: num(2)?,
            q20: num(3)?,
            q80: num(4)?,
            skipped: rec[5].parse().map_err(|_| bad(format!("bad flag {}", &rec[5])))?,
        });
    }
    Ok(rows)
}

pub fn emit_csv(series: &AggregatedSeries, path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    write_csv(series, std::io::BufWriter::new(file))
}

/// Per-trial curves, one row per point: `estimator,trial,x,y`. Skipped
/// trials get a single row with empty `x` and `y` and the reason.
pub fn write_raw_csv<W: Write>(outcomes: &[TrialOutcome], out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(["estimator", "trial", "x", "y", "skip_reason"])
        .map_err(io)?;
    for o in outcomes {
        let trial = o.trial.to_string();
        match &o.curve {
            Ok(c) => {
                for (x, y) in &c.points {
                    let y = y.map(fmt_real).unwrap_or_default();
                    w.write_record([o.estimator.as_str(), &trial, &fmt_real(*x), &y, ""])
                        .map_err(io)?;
                }
            }
            Err(reason) => w
                .write_record([o.estimator.as_str(), &trial, "", "", reason])
                .map_err(io)?,
        }
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn emit_raw_csv(outcomes: &[TrialOutcome], path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    write_raw_csv(outcomes, std::io::BufWriter::new(file))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Static line chart of the medians, one polyline per estimator.
pub fn render_svg(series: &AggregatedSeries) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 20.0, 50.0);
    let finite: Vec<&SeriesRow> = series.rows.iter().filter(|r| r.median.is_finite()).collect();
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(&mut finite.iter().map(|r| r.x));
    let (y0, y1) = span(&mut finite.iter().map(|r| r.median));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    let (ax0, ax1, ay0, ay1) = (left, w - right, h - bottom, top);
    writeln!(
        s,
        r#"<path d="M{ax0} {ay1} L{ax0} {ay0} L{ax1} {ay0}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let ylabel = if series.log_y {
            format!("1e{yv:.1}")
        } else {
            format!("{yv:.3}")
        };
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#,
            px(xv),
            ay0 + 18.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylabel}</text>"#,
            ax0 - 6.0,
            py(yv) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (ax0 + ax1) / 2.0,
        h - 12.0,
        escape(&series.x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        escape(&series.y_label)
    )
    .unwrap();
    for (i, est) in series.estimators.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = series
            .rows_for(est)
            .filter(|r| r.median.is_finite())
            .map(|r| format!("{:.2},{:.2}", px(r.x), py(r.median)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            escape(est)
        )
        .unwrap();
        let ly = top + 20.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#,
            ax1 + 15.0,
            ax1 + 40.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            ax1 + 46.0,
            ly + 4.0,
            escape(est)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg(series: &AggregatedSeries, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_svg(series)).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> AggregatedSeries {
        let rows = vec![
            SeriesRow {
                x: 0.0,
                estimator: "shrinkage".into(),
                median: -std::f64::consts::LOG10_2,
                q20: -1.0,
                q80: 0.1,
                skipped: false,
            },
            SeriesRow {
                x: 4.0,
                estimator: "shrinkage".into(),
                median: 1.0 / 3.0,
                q20: f64::NAN,
                q80: 2e-300,
                skipped: true,
            },
        ];
        AggregatedSeries {
            x_label: "communication rounds".into(),
            y_label: "log10 gap".into(),
            log_y: true,
            estimators: vec!["shrinkage".into()],
            rows,
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_point() {
        let text = csv_string(&series()).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "x,estimator,median,q20,q80,skipped");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "");
        assert!(!text.contains('\r'));
        assert!(lines[1].starts_with("0.0000000000000000e0,shrinkage,-3.0102999566398120e-1,"));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let s = series();
        let back = read_csv(csv_string(&s).unwrap().as_bytes()).unwrap();
        assert_eq!(back.len(), s.rows.len());
        for (a, b) in back.iter().zip(&s.rows) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.median.to_bits(), b.median.to_bits());
            assert_eq!(a.q80.to_bits(), b.q80.to_bits());
            assert_eq!(a.q20.is_nan(), b.q20.is_nan());
            assert_eq!(a.estimator, b.estimator);
            assert_eq!(a.skipped, b.skipped);
        }
    }

    #[test]
    fn svg_is_well_formed() {
        let mut s = series();
        s.estimators.push("a<b".into());
        let svg = render_svg(&s);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
        assert_eq!(lines, 2);
    }
}
