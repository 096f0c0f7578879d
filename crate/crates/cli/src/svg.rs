//! Minimal SVG bar chart of the entropy histograms.

use std::fmt::Write;

use diaruq::uq::{EntropyReport, Histogram};

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn bars(out: &mut String, h: &Histogram, peak: f64, colour: &str, offset: f64) {
    let n = h.counts.len() as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, &c) in h.counts.iter().enumerate() {
        let height = (H - 2.0 * PAD) * c as f64 / peak;
        let x = PAD + i as f64 * slot + offset * slot / 2.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{height:.2}" fill="{colour}"/>"#,
            H - PAD - height,
            slot / 2.0 - 1.0
        );
    }
}

/// Side-by-side bars for correct (blue) and incorrect (red) frames.
pub fn entropy_svg(r: &EntropyReport) -> String {
    let peak = r.correct.counts.iter().chain(&r.incorrect.counts).copied().max().unwrap_or(0).max(1) as f64;
    let max_h = r.correct.edges.last().copied().unwrap_or(1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    bars(&mut s, &r.correct, peak, "#3b6ea5", 0.0);
    bars(&mut s, &r.incorrect, peak, "#c0392b", 1.0);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = H - PAD,
        x2 = W - PAD
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="12">0</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{max_h} bits</text>"#, W - PAD, H - PAD + 16.0);
    let mean = |m: Option<f64>| m.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="24" font-size="13">correct mean {} bits, incorrect mean {} bits</text>"#,
        mean(r.correct.mean),
        mean(r.incorrect.mean)
    );
    s.push_str("</svg>\n");
    s
}
