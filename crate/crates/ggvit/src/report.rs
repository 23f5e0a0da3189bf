//! Plain-text tables and an SVG heatmap for evaluation matrices and stream
//! proportions.

use std::fmt::Write as _;

use ggvit_core::fusion::STREAMS;

use crate::trainer::{EvalMatrix, PROPORTION_COLUMNS, QUALITY_NAMES};

/// Right-aligned columns separated by two spaces.
pub fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().enumerate().map(|(i, c)| format!("{c:>w$}", w = width[i])).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(header);
    s.push_str(&line(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>()));
    for r in rows {
        s.push_str(&line(r));
    }
    s
}

pub fn matrix_table(m: &EvalMatrix) -> String {
    let cols = m.accuracy.first().map_or(0, Vec::len);
    let mut header = vec!["train\\test".to_string()];
    header.extend(QUALITY_NAMES.iter().take(cols).map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = m
        .accuracy
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![QUALITY_NAMES[i].to_string()];
            row.extend(r.iter().map(|v| format!("{v:.2}")));
            row
        })
        .collect();
    text_table(&header, &rows)
}

pub fn proportions_table(rows: &[(String, [f64; STREAMS])]) -> String {
    let mut header = vec!["model".to_string()];
    header.extend(PROPORTION_COLUMNS.iter().map(|s| s.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, p)| {
            let mut row = vec![name.clone()];
            row.extend(p.iter().map(|v| format!("{v:.2}")));
            row
        })
        .collect();
    text_table(&header, &body)
}

/// Cells shaded from white (0%) to dark blue (100%), labelled with values.
pub fn matrix_svg(m: &EvalMatrix) -> String {
    const CELL: usize = 80;
    const MARGIN: usize = 60;
    let rows = m.accuracy.len();
    let cols = m.accuracy.first().map_or(0, Vec::len);
    let (w, h) = (MARGIN + cols * CELL + 10, MARGIN + rows * CELL + 10);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="14">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">test quality</text>"#, MARGIN + cols * CELL / 2);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">train quality</text>"#,
        y = MARGIN + rows * CELL / 2
    );
    for j in 0..cols {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, MARGIN + j * CELL + CELL / 2, MARGIN - 8, QUALITY_NAMES[j]);
    }
    for (i, row) in m.accuracy.iter().enumerate() {
        let y = MARGIN + i * CELL;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 8, y + CELL / 2 + 5, QUALITY_NAMES[i]);
        for (j, &v) in row.iter().enumerate() {
            let t = (v / 100.0).clamp(0.0, 1.0);
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
            let (r, g, b) = (shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0));
            let x = MARGIN + j * CELL;
            let fg = if t > 0.55 { "white" } else { "black" };
            let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#999"/>"##);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{fg}">{v:.2}</text>"#, x + CELL / 2, y + CELL / 2 + 5);
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_align_and_svg_has_every_cell() {
        let m = EvalMatrix { accuracy: vec![vec![100.0, 50.0, 0.0]; 3] };
        let t = matrix_table(&m);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()), "{t}");
        let svg = matrix_svg(&m);
        assert_eq!(svg.matches("<rect").count(), 9);
        assert!(svg.contains("#ffffff") && svg.contains("#08306b"));
        let p = proportions_table(&[("full".into(), [20.0; 5])]);
        assert!(p.starts_with("model") && p.contains("20.00"));
    }
}
