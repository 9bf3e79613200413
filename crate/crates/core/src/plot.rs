//! Self-contained SVG output: embedding scatter and per-system metric bars.
//!
//! Output depends only on the input values, so equal inputs give equal bytes.

use std::fmt::Write;

use crate::embed::EmbeddingRow;
use crate::emotion::Emotion;
use crate::error::{Error, Result};

const PALETTE: [&str; 7] = ["#7f7f7f", "#ff7f0e", "#1f77b4", "#d62728", "#e377c2", "#8c564b", "#2ca02c"];
const SYSTEM_COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub system: String,
    pub emotion: String,
    pub metric: String,
    pub value: f64,
}

/// Parses one or more concatenated `system,emotion,metric,value` CSV files.
pub fn parse_metric_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line == "system,emotion,metric,value" {
            continue;
        }
        let err = |msg: String| Error::Parse {
            offset: at,
            record: Some(i),
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let value = f[3].parse::<f64>().map_err(|_| err(format!("bad value {:?}", f[3])))?;
        rows.push(MetricRow {
            system: f[0].to_string(),
            emotion: f[1].to_string(),
            metric: f[2].to_string(),
            value,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            record: None,
            msg: "no metric rows".into(),
        });
    }
    Ok(rows)
}

fn color(e: Emotion) -> &'static str {
    PALETTE[e.index()]
}

/// Scatter of the PCA coordinates, one `<circle>` per row, colored by emotion.
pub fn embedding_scatter(rows: &[EmbeddingRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("plot", "no embedding rows"));
    }
    let (w, h, pad) = (640.0, 520.0, 50.0);
    let (plot_w, plot_h) = (w - 2.0 * pad - 110.0, h - 2.0 * pad);
    let lo_hi = |k: usize| {
        let lo = rows.iter().map(|r| r.pc[k]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.pc[k]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = lo_hi(0);
    let (y0, y1) = lo_hi(1);
    let mut s = header(w, h, title);
    writeln!(s, r##"<rect x="{pad}" y="{pad}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">PC1</text>"#, pad + plot_w / 2.0, h - 15.0).unwrap();
    writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">PC2</text>"#,
        pad + plot_h / 2.0,
        pad + plot_h / 2.0
    )
    .unwrap();
    for r in rows {
        let cx = pad + (r.pc[0] - x0) / (x1 - x0) * plot_w;
        let cy = pad + plot_h - (r.pc[1] - y0) / (y1 - y0) * plot_h;
        writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3.5" fill="{}" fill-opacity="0.8"><title>{} ({})</title></circle>"#,
            color(r.emotion),
            escape(&r.id),
            r.emotion
        )
        .unwrap();
    }
    let lx = w - pad - 95.0;
    for (i, e) in Emotion::ALL.iter().enumerate() {
        let y = pad + 10.0 + 20.0 * i as f64;
        writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, color(*e)).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}" font-size="12">{e}</text>"#, lx + 16.0).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One panel per overall metric with a bar per system, in first-seen order.
pub fn metric_bars(rows: &[MetricRow], title: &str) -> Result<String> {
    let overall: Vec<&MetricRow> = rows.iter().filter(|r| r.emotion == "overall").collect();
    if overall.is_empty() {
        return Err(Error::invalid("plot", "no overall metric rows"));
    }
    let mut systems: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for r in &overall {
        if !systems.contains(&r.system.as_str()) {
            systems.push(&r.system);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    // several rows for one (system, metric), e.g. one per seed, are averaged
    let value = |sys: &str, m: &str| {
        let v: Vec<f64> = overall
            .iter()
            .filter(|r| r.system == sys && r.metric == m)
            .map(|r| r.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (panel_w, panel_h, pad) = (150.0, 220.0, 40.0);
    let w = pad * 2.0 + panel_w * metrics.len() as f64;
    let h = panel_h + 2.0 * pad + 20.0 * systems.len() as f64;
    let mut s = header(w, h, title);
    for (mi, m) in metrics.iter().enumerate() {
        let vals: Vec<Option<f64>> = systems.iter().map(|sys| value(sys, m)).collect();
        let top = vals.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        let px = pad + panel_w * mi as f64;
        let base = pad + panel_h - 30.0;
        let bar_w = (panel_w - 30.0) / systems.len() as f64;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, px + panel_w / 2.0, pad + panel_h - 10.0, escape(m)).unwrap();
        writeln!(s, r##"<line x1="{}" y1="{base}" x2="{}" y2="{base}" stroke="#444"/>"##, px + 10.0, px + panel_w - 10.0).unwrap();
        for (si, v) in vals.iter().enumerate() {
            let Some(v) = v else { continue };
            let len = v.abs() / top * (panel_h - 60.0) / 2.0;
            let x = px + 15.0 + bar_w * si as f64;
            let y = if *v >= 0.0 { base - len } else { base };
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{len:.2}" fill="{}"><title>{} {}: {v:.4}</title></rect>"#,
                bar_w * 0.8,
                SYSTEM_COLORS[si % SYSTEM_COLORS.len()],
                escape(systems[si]),
                escape(m)
            )
            .unwrap();
        }
    }
    for (si, sys) in systems.iter().enumerate() {
        let y = pad + panel_h + 20.0 * si as f64;
        writeln!(s, r#"<rect x="{pad}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, SYSTEM_COLORS[si % SYSTEM_COLORS.len()]).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}" font-size="12">{}</text>"#, pad + 16.0, escape(sys)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn header(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title)).unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
