//! Minimal SVG charts for evaluation reports.

use std::fmt::Write;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub values: &'a [f64],
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn header(out: &mut String, width: f64, height: f64, comment: &str, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    // `--` is not allowed inside XML comments.
    let _ = writeln!(out, "<!-- {} -->", escape(comment).replace("--", "- -"));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn bounds(series: &[Series]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in series.iter().flat_map(|s| s.values.iter()).filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line chart of equally spaced series sharing one x axis labelled by
/// `x_labels` (first and last are printed).
pub fn line_chart(title: &str, comment: &str, y_label: &str, x_labels: (&str, &str), series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, WIDTH, HEIGHT, comment, title);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let (lo, hi) = bounds(series);
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let x = |i: usize| MARGIN_LEFT + if len > 1 { plot_w * i as f64 / (len - 1) as f64 } else { plot_w / 2.0 };
    let y = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);

    let _ = writeln!(
        out,
        r##"<rect class="plot-area" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>"##
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            yy + 4.0
        );
    }
    let base = HEIGHT - MARGIN_BOTTOM + 16.0;
    let _ = writeln!(out, r#"<text x="{MARGIN_LEFT}" y="{base}">{}</text>"#, escape(x_labels.0));
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{base}" text-anchor="end">{}</text>"#,
        MARGIN_LEFT + plot_w,
        escape(x_labels.1)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            escape(s.name),
            points.join(" "),
            s.color
        );
        let lx = MARGIN_LEFT + 12.0 + 120.0 * k as f64;
        let ly = HEIGHT - 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="3"/><text x="{:.1}" y="{ly}">{}</text>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0,
            s.color,
            lx + 24.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Interpolates white to dark blue for `t` in `[0, 1]`.
fn shade(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Heatmap with one row per entry of `rows` and one column per step.
pub fn heatmap(title: &str, comment: &str, rows: &[String], values: &[Vec<f64>]) -> String {
    let cols = values.first().map_or(0, Vec::len);
    let cell_w = 14.0;
    let cell_h = 22.0;
    let left = 24.0 + 7.0 * rows.iter().map(|r| r.chars().count()).max().unwrap_or(1) as f64;
    let top = MARGIN_TOP + 8.0;
    let width = left + cell_w * cols as f64 + 120.0;
    let height = top + cell_h * rows.len() as f64 + 48.0;
    let (lo, hi) = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut out = String::new();
    header(&mut out, width, height, comment, title);
    for (r, (name, row)) in rows.iter().zip(values).enumerate() {
        let yy = top + cell_h * r as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            yy + cell_h / 2.0 + 4.0,
            escape(name)
        );
        for (c, v) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<rect class="cell" data-station="{}" data-horizon="{}" x="{:.1}" y="{yy:.1}" width="{cell_w}" height="{cell_h}" fill="{}"><title>{} h{}: {v:.3}</title></rect>"#,
                escape(name),
                c + 1,
                left + cell_w * c as f64,
                shade((v - lo) / span),
                escape(name),
                c + 1
            );
        }
    }
    let axis_y = top + cell_h * rows.len() as f64 + 16.0;
    for c in (0..cols).filter(|c| c % 6 == 5 || *c == 0) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{axis_y:.1}" text-anchor="middle">{}</text>"#,
            left + cell_w * (c as f64 + 0.5),
            c + 1
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">forecast step (h)</text>"#,
        left + cell_w * cols as f64 / 2.0,
        axis_y + 18.0
    );
    let legend_x = left + cell_w * cols as f64 + 24.0;
    for (k, label) in [(0.0, lo), (1.0, hi)].iter().enumerate() {
        let yy = top + 30.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect class="legend" x="{legend_x:.1}" y="{yy:.1}" width="16" height="16" fill="{}"/><text x="{:.1}" y="{:.1}">{:.3}</text>"#,
            shade(label.0),
            legend_x + 22.0,
            yy + 12.0,
            label.1
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape(r#"a<b>&"c'"#), "a&lt;b&gt;&amp;&quot;c&apos;");
    }

    #[test]
    fn identical_series_share_points() {
        let v = [1.0, 3.0, 2.0];
        let svg = line_chart(
            "t",
            "c",
            "kWh",
            ("a", "b"),
            &[
                Series { name: "predicted", color: "red", values: &v },
                Series { name: "actual", color: "black", values: &v },
            ],
        );
        let points: Vec<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| l.split("points=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0], points[1]);
    }

    #[test]
    fn constant_series_stays_inside_plot() {
        let svg = line_chart("t", "c", "y", ("", ""), &[Series { name: "s", color: "red", values: &[2.0, 2.0] }]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let rows = vec!["s1".to_string(), "s2".to_string()];
        let svg = heatmap("t", "c", &rows, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(svg.matches(r#"class="cell""#).count(), 6);
        assert!(svg.contains("#f7fbff") && svg.contains("#08306b"));
    }

    #[test]
    fn comment_never_contains_double_dash() {
        let svg = heatmap("t", "run --seed 3", &["a".into()], &[vec![1.0]]);
        let comment = svg.lines().nth(1).unwrap();
        assert!(!comment[4..comment.len() - 3].contains("--"));
    }
}
