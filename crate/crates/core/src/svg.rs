//! Minimal SVG emission for bar charts, heatmaps and tile maps.

use std::fmt::Write;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const MARGIN: f64 = 60.0;
const LEGEND_WIDTH: f64 = 140.0;

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

/// Blue for negative, red for positive; `t` in `[-1, 1]`.
fn diverging(t: f64) -> String {
    let t = if t.is_finite() {
        t.clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        format!("rgb(255,{fade},{fade})")
    } else {
        format!("rgb({fade},{fade},255)")
    }
}

/// One stacked bar per entry of `values`; positive segments stack upward from
/// zero and negative segments downward. Each bar is a `<g class="bar">`.
pub fn stacked_bars(
    title: &str,
    bar_labels: &[String],
    series: &[String],
    values: &[Vec<f64>],
) -> String {
    let bar_width = 28.0;
    let gap = 10.0;
    let plot_height = 300.0;
    let width = 2.0 * MARGIN + LEGEND_WIDTH + values.len().max(1) as f64 * (bar_width + gap);
    let height = plot_height + 2.0 * MARGIN;

    let (mut top, mut bottom) = (0.0_f64, 0.0_f64);
    for v in values {
        top = top.max(v.iter().filter(|x| **x > 0.0).sum());
        bottom = bottom.min(v.iter().filter(|x| **x < 0.0).sum());
    }
    let span = if top - bottom > 0.0 {
        top - bottom
    } else {
        1.0
    };
    let scale = plot_height / span;
    let zero_y = MARGIN + top * scale;

    let mut out = String::new();
    header(&mut out, width, height, title);
    let _ = writeln!(
        out,
        r##"<line class="axis" x1="{MARGIN:.1}" y1="{zero_y:.2}" x2="{:.1}" y2="{zero_y:.2}" stroke="#000"/>"##,
        width - MARGIN - LEGEND_WIDTH
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{top:.3}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{bottom:.3}</text>"#,
        MARGIN - 4.0,
        MARGIN + plot_height + 4.0
    );

    for (b, v) in values.iter().enumerate() {
        let x = MARGIN + gap / 2.0 + b as f64 * (bar_width + gap);
        let label = bar_labels.get(b).map(String::as_str).unwrap_or("");
        let _ = writeln!(out, r#"<g class="bar" data-label="{}">"#, escape(label));
        let (mut up, mut down) = (zero_y, zero_y);
        for (j, &value) in v.iter().enumerate() {
            if value == 0.0 || !value.is_finite() {
                continue;
            }
            let h = value.abs() * scale;
            let y = if value > 0.0 {
                up -= h;
                up
            } else {
                down += h;
                down - h
            };
            let name = series.get(j).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                out,
                r#"<rect class="segment" x="{x:.2}" y="{y:.2}" width="{bar_width:.2}" height="{h:.2}" fill="{}"><title>{}: {value:.4}</title></rect>"#,
                PALETTE[j % PALETTE.len()],
                escape(name)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x + bar_width / 2.0,
            MARGIN + plot_height + 16.0,
            escape(label)
        );
        out.push_str("</g>\n");
    }

    let legend_x = width - MARGIN - LEGEND_WIDTH + 16.0;
    for (j, name) in series.iter().enumerate() {
        let y = MARGIN + j as f64 * 16.0;
        let _ = writeln!(
            out,
            r#"<rect class="legend" x="{legend_x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[j % PALETTE.len()],
            legend_x + 14.0,
            y + 9.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Square heatmap of a `p × p` matrix with a diverging scale centered at zero.
/// Each entry is a `<rect class="cell">`.
pub fn heatmap(title: &str, names: &[String], matrix: &[Vec<f64>]) -> String {
    let p = matrix.len();
    let cell = 36.0;
    let width = 2.0 * MARGIN + p as f64 * cell + 40.0;
    let height = 2.0 * MARGIN + p as f64 * cell;
    let max_abs = matrix
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let norm = if max_abs > 0.0 { max_abs } else { 1.0 };

    let mut out = String::new();
    header(&mut out, width, height, title);
    let _ = writeln!(
        out,
        "<metadata>color scale symmetric, saturated at |value| = {max_abs:.6}</metadata>"
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                r##"<rect class="cell" x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}" stroke="#fff"><title>{} x {}: {v:.4}</title></rect>"##,
                MARGIN + j as f64 * cell,
                MARGIN + i as f64 * cell,
                diverging(v / norm),
                escape(names.get(i).map(String::as_str).unwrap_or("")),
                escape(names.get(j).map(String::as_str).unwrap_or(""))
            );
        }
    }
    for (k, name) in names.iter().enumerate().take(p) {
        let c = MARGIN + (k as f64 + 0.5) * cell;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text><text x="{c:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN - 4.0,
            c + 4.0,
            escape(name),
            MARGIN - 6.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Observations × variables tile map; color intensity is `|value| / max |value|`
/// over the whole figure and flagged cells get a black outline.
/// Each tile is a `<rect class="tile">`.
pub fn tile_map(
    title: &str,
    names: &[String],
    row_labels: &[String],
    values: &[Vec<f64>],
    flagged: &[Vec<bool>],
) -> String {
    let n = values.len();
    let p = names.len();
    let (cw, ch) = (28.0, 14.0);
    let width = 2.0 * MARGIN + p as f64 * cw;
    let height = 2.0 * MARGIN + n as f64 * ch;
    let max_abs = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let norm = if max_abs > 0.0 { max_abs } else { 1.0 };

    let mut out = String::new();
    header(&mut out, width, height, title);
    let _ = writeln!(
        out,
        "<metadata>color intensity normalized per figure to max |phi| = {max_abs:.6}</metadata>"
    );
    for (i, row) in values.iter().enumerate() {
        let y = MARGIN + i as f64 * ch;
        for (j, &v) in row.iter().enumerate() {
            let is_flagged = flagged
                .get(i)
                .and_then(|r| r.get(j))
                .copied()
                .unwrap_or(false);
            let stroke = if is_flagged {
                r##" stroke="#000" stroke-width="2""##
            } else {
                r##" stroke="#eee""##
            };
            let _ = writeln!(
                out,
                r#"<rect class="tile" x="{:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{}"{stroke}/>"#,
                MARGIN + j as f64 * cw,
                diverging(v / norm)
            );
        }
        let label = row_labels.get(i).map(String::as_str).unwrap_or("");
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            y + ch - 3.0,
            escape(label)
        );
    }
    for (j, name) in names.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN + (j as f64 + 0.5) * cw,
            MARGIN - 6.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn heatmap_has_p_squared_cells() {
        let m = vec![
            vec![1.0, -2.0, 0.0],
            vec![-2.0, 3.0, 0.5],
            vec![0.0, 0.5, 0.0],
        ];
        let svg = heatmap("t", &names(3), &m);
        assert_eq!(svg.matches(r#"class="cell""#).count(), 9);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bars_and_segments() {
        let values = vec![vec![1.0, -0.5, 2.0], vec![0.0, 0.0, 0.0]];
        let svg = stacked_bars("t", &["a".into(), "b".into()], &names(3), &values);
        assert_eq!(svg.matches(r#"<g class="bar""#).count(), 2);
        assert_eq!(svg.matches(r#"class="segment""#).count(), 3);
    }

    #[test]
    fn tile_map_metadata() {
        let svg = tile_map(
            "t",
            &names(2),
            &["r1".into()],
            &[vec![4.0, -1.0]],
            &[vec![true, false]],
        );
        assert_eq!(svg.matches(r#"class="tile""#).count(), 2);
        assert!(svg.contains("max |phi| = 4.000000"));
        assert!(svg.contains(r#"stroke-width="2""#));
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b&\"c\""), "a&lt;b&amp;&quot;c&quot;");
        let svg = heatmap("<x>", &["&".into()], &[vec![1.0]]);
        assert!(!svg.contains("<x>"));
    }

    #[test]
    fn diverging_extremes() {
        assert_eq!(diverging(1.0), "rgb(255,0,0)");
        assert_eq!(diverging(-1.0), "rgb(0,0,255)");
        assert_eq!(diverging(0.0), "rgb(255,255,255)");
        assert_eq!(diverging(f64::NAN), "rgb(255,255,255)");
    }
}
