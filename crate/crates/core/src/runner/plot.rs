//! Static SVG charts of a run: the accuracy/ECE trajectory and per-round
//! reliability bars. Each file embeds the data it was drawn from in its
//! `<metadata>` element, and output depends only on the run's files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::report::read_metrics;
use super::{io_err, reliability_file, RunError, RunRecord, METRICS_FILE};

pub const TRAJECTORY_FILE: &str = "trajectory.svg";
pub const RELIABILITY_FILE: &str = "reliability.svg";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotFiles {
    pub trajectory: PathBuf,
    pub reliability: PathBuf,
}

#[derive(Debug, Deserialize)]
struct BinRow {
    lower: f64,
    upper: f64,
    count: usize,
    accuracy: Option<f64>,
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PANEL: f64 = 200.0;
const PANEL_PAD: f64 = 36.0;
const COLUMNS: usize = 3;

fn read_file(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn plot(run_dir: &Path) -> Result<PlotFiles, RunError> {
    let record = RunRecord::load(run_dir)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let metrics_text = read_file(&metrics_path)?;
    let rows = read_metrics(&metrics_path)?;
    if rows.is_empty() {
        return Err(RunError::Corrupt(format!(
            "{}: no rounds to plot",
            metrics_path.display()
        )));
    }

    let rounds: Vec<u32> = rows.iter().map(|r| r.round).collect();
    let (r0, r1) = (rounds[0] as f64, *rounds.last().unwrap_or(&rounds[0]) as f64);
    let span = (r1 - r0).max(1.0);
    let x = |r: f64| MARGIN + (r - r0) / span * (W - 2.0 * MARGIN);
    let y = |v: f64| H - MARGIN - v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);

    let mut s = svg_open(W, H);
    let _ = writeln!(s, "<metadata><![CDATA[\n{}]]></metadata>", metrics_text);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{} ({})</text>"#,
        W / 2.0,
        record.schedule,
        record.method.label()
    );
    axes(&mut s, MARGIN, H - MARGIN, W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    for r in &rounds {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{r}</text>"#,
            x(*r as f64),
            H - MARGIN + 16.0
        );
    }
    let series: [(&str, &str, Vec<f64>); 2] = [
        ("accuracy", "#1f77b4", rows.iter().map(|r| r.accuracy).collect()),
        ("ece", "#d62728", rows.iter().map(|r| r.ece).collect()),
    ];
    for (i, (name, color, values)) in series.iter().enumerate() {
        let pts: Vec<String> = rounds
            .iter()
            .zip(values)
            .map(|(r, v)| format!("{:.2},{:.2}", x(*r as f64), y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="11">{name}</text>"#,
            W - MARGIN - 90.0,
            W - MARGIN - 70.0,
            W - MARGIN - 64.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    let trajectory = run_dir.join(TRAJECTORY_FILE);
    fs::write(&trajectory, &s).map_err(io_err(&trajectory))?;

    let panels = rounds.len();
    let cols = panels.min(COLUMNS);
    let rows_n = panels.div_ceil(COLUMNS);
    let width = cols as f64 * (PANEL + PANEL_PAD) + PANEL_PAD;
    let height = rows_n as f64 * (PANEL + PANEL_PAD) + PANEL_PAD;
    let mut s = svg_open(width, height);
    let mut data = String::new();
    let mut body = String::new();
    for (i, round) in rounds.iter().enumerate() {
        let path = run_dir.join(reliability_file(*round));
        let text = read_file(&path)?;
        let _ = write!(data, "# round {round}\n{text}");
        let bins: Vec<BinRow> = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| RunError::Corrupt(format!("{}: {e}", path.display())))?;
        let ox = PANEL_PAD + (i % COLUMNS) as f64 * (PANEL + PANEL_PAD);
        let oy = PANEL_PAD + (i / COLUMNS) as f64 * (PANEL + PANEL_PAD) + PANEL;
        let _ = writeln!(
            body,
            r#"<g class="panel" data-round="{round}"><text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">round {round}</text>"#,
            ox + PANEL / 2.0,
            oy - PANEL - 8.0
        );
        axes(&mut body, ox, oy, PANEL, PANEL);
        for b in &bins {
            let h = b.accuracy.unwrap_or(0.0) * PANEL;
            let _ = writeln!(
                body,
                r##"<rect class="bar" data-count="{}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="#ffffff"/>"##,
                b.count,
                ox + b.lower * PANEL,
                oy - h,
                (b.upper - b.lower) * PANEL,
                h
            );
        }
        let _ = writeln!(
            body,
            r##"<line x1="{ox:.2}" y1="{oy:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-dasharray="4 3"/></g>"##,
            ox + PANEL,
            oy - PANEL
        );
    }
    let _ = writeln!(s, "<metadata><![CDATA[\n{data}]]></metadata>");
    s.push_str(&body);
    s.push_str("</svg>\n");
    let reliability = run_dir.join(RELIABILITY_FILE);
    fs::write(&reliability, &s).map_err(io_err(&reliability))?;
    Ok(PlotFiles {
        trajectory,
        reliability,
    })
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n"
    )
}

/// Unit axes with ticks at 0, 0.5 and 1 on the y axis; origin at (ox, oy).
fn axes(s: &mut String, ox: f64, oy: f64, w: f64, h: f64) {
    let _ = writeln!(
        s,
        r##"<path d="M{ox:.2},{:.2} L{ox:.2},{oy:.2} L{:.2},{oy:.2}" fill="none" stroke="#000000"/>"##,
        oy - h,
        ox + w
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{v:.1}</text>"#,
            ox - 4.0,
            oy - v * h + 3.0
        );
    }
}
