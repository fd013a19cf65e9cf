//! Square heatmap as a standalone SVG: one `<rect class="cell">` per entry,
//! white at 0 shading linearly to dark blue at `max`.

use std::fmt::Write;

const CELL: usize = 24;
const MARGIN: usize = 36;

fn shade(value: f64, max: f64) -> String {
    let t = if max > 0.0 { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    let (lo, hi) = ([255.0, 255.0, 255.0], [8.0, 48.0, 107.0]);
    let c: Vec<u8> = (0..3).map(|i| (lo[i] + (hi[i] - lo[i]) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

pub fn heatmap(matrix: &[Vec<f64>], max: f64, title: &str) -> String {
    let n = matrix.len();
    let side = MARGIN + n * CELL + 8;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{}" viewBox="0 0 {side} {}">"#,
        side + 20,
        side + 20
    );
    let _ = writeln!(s, r#"<title>{title}</title>"#);
    let _ = writeln!(s, r#"<g font-family="monospace" font-size="10" text-anchor="middle">"#);
    for i in 0..n {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{c}" y="{}">{i}</text>"#, MARGIN - 8);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{i}</text>"#, MARGIN / 2, c + 3);
    }
    let _ = writeln!(s, "</g>");
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{i},{j}: {v:.6}</title></rect>"#,
                MARGIN + j * CELL,
                MARGIN + i * CELL,
                shade(v, max)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="monospace" font-size="11">0 = white, {max:.4} = dark</text>"#,
        MARGIN + n * CELL + 18
    );
    s.push_str("</svg>\n");
    s
}
