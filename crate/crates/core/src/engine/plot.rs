use std::fmt::Write;

use crate::metrics::extract_segments;

const WIDTH: f64 = 800.0;
const ROW: f64 = 24.0;
const GAP: f64 = 6.0;
const LABEL: f64 = 90.0;

/// Distinct fill color for class `c` of `k`.
pub fn class_color(c: usize, k: usize) -> String {
    let hue = (c as f64 * 360.0 / k.max(1) as f64 + 15.0) % 360.0;
    let light = if c.is_multiple_of(2) { 50 } else { 38 };
    format!("hsl({hue:.1},65%,{light}%)")
}

/// One barcode row of a plot.
#[derive(Debug, Clone)]
pub struct BarcodeRow<'a> {
    pub title: &'a str,
    pub labels: &'a [usize],
}

/// SVG with one row of class-colored segments per entry and an optional
/// dashed divider after `divider` frames. Rows are drawn on a shared time
/// axis of `frames` frames.
pub fn barcode_svg(
    video_id: &str,
    rows: &[BarcodeRow<'_>],
    frames: usize,
    num_classes: usize,
    divider: Option<usize>,
) -> String {
    let frames = frames.max(1);
    let height = 20.0 + rows.len() as f64 * (ROW + GAP);
    let px = |f: usize| LABEL + f as f64 * (WIDTH - LABEL) / frames as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="0" y="12" font-family="sans-serif" font-size="11">{}</text>"#,
        escape(video_id)
    );
    for (r, row) in rows.iter().enumerate() {
        let y = 18.0 + r as f64 * (ROW + GAP);
        let _ = writeln!(
            s,
            r#"<text x="0" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            y + ROW * 0.7,
            escape(row.title)
        );
        for seg in extract_segments(row.labels) {
            let (x0, x1) = (px(seg.start), px(seg.end.min(frames)));
            if x1 <= x0 {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{y:.1}" width="{:.2}" height="{ROW}" fill="{}"><title>class {} [{}, {})</title></rect>"#,
                x1 - x0,
                class_color(seg.class, num_classes),
                seg.class,
                seg.start,
                seg.end
            );
        }
    }
    if let Some(n_o) = divider {
        let x = px(n_o.min(frames));
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="16" x2="{x:.2}" y2="{:.1}" stroke="black" stroke-width="2" stroke-dasharray="4 2"/>"#,
            height - 2.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
