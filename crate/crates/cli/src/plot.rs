//! Base-gen vs novel-gen line chart as standalone SVG.

use std::fmt::Write as _;

use fsl_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub epochs: Vec<f64>,
    pub base: Vec<f64>,
    pub novel: Vec<f64>,
}

/// Reads the `epoch`, `base_gen` and `novel_gen` columns of a CSV file with
/// a header row. Other columns are ignored.
pub fn parse_curves(text: &str) -> Result<Curves> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("curve CSV is empty".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Config(format!("curve CSV has no {name:?} column")))
    };
    let (ce, cb, cn) = (column("epoch")?, column("base_gen")?, column("novel_gen")?);
    let mut curves = Curves {
        epochs: Vec::new(),
        base: Vec::new(),
        novel: Vec::new(),
    };
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<f64> {
            fields
                .get(c)
                .and_then(|f| f.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("curve CSV row {}: bad value in column {}", row + 2, header[c])))
        };
        curves.epochs.push(get(ce)?);
        curves.base.push(get(cb)?);
        curves.novel.push(get(cn)?);
    }
    if curves.epochs.is_empty() {
        return Err(Error::Config("curve CSV has no data rows".into()));
    }
    Ok(curves)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 52.0;
const BASE_COLOR: &str = "#1f77b4";
const NOVEL_COLOR: &str = "#d62728";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A "nice" tick step (1, 2 or 5 × 10^k) giving at most `max_ticks` ticks.
fn tick_step(span: f64, max_ticks: usize) -> f64 {
    let raw = span / max_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn axis_range(values: impl Iterator<Item = f64> + Clone, max_ticks: usize) -> (f64, f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let step = tick_step(hi - lo, max_ticks);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn label(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let digits = (-step.log10().floor()) as usize;
        format!("{v:.digits$}")
    }
}

pub fn render(curves: &Curves, title: &str) -> String {
    let (x0, x1, xs) = axis_range(curves.epochs.iter().copied(), 10);
    let (y0, y1, ys) = axis_range(curves.base.iter().chain(&curves.novel).copied(), 8);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    let ny = ((y1 - y0) / ys).round() as usize;
    for i in 0..=ny {
        let v = y0 + i as f64 * ys;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            label(v, ys)
        );
    }
    let nx = ((x1 - x0) / xs).round() as usize;
    for i in 0..=nx {
        let v = x0 + i as f64 * xs;
        let x = px(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/>"##,
            TOP + ph,
            TOP + ph + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            label(v, xs)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#000000"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy (%)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (values, color) in [(&curves.base, BASE_COLOR), (&curves.novel, NOVEL_COLOR)] {
        let points: Vec<String> = curves
            .epochs
            .iter()
            .zip(values.iter())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
    }

    let lx = LEFT + pw - 150.0;
    for (i, (name, color)) in [("base-gen", BASE_COLOR), ("novel-gen", NOVEL_COLOR)].iter().enumerate() {
        let y = TOP + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 24.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, lx + 30.0, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "epoch,base_gen,base_gen_ci95,novel_gen,novel_gen_ci95,train_loss,tau\n\
                       0,83.4,1.0,42.9,1.0,,\n1,88.5,1.0,43.2,1.0,0.9,10\n2,89.0,1.0,42.8,1.0,0.8,10.5\n";

    #[test]
    fn parses_named_columns() {
        let c = parse_curves(CSV).unwrap();
        assert_eq!(c.epochs, vec![0.0, 1.0, 2.0]);
        assert_eq!(c.base, vec![83.4, 88.5, 89.0]);
        assert_eq!(c.novel, vec![42.9, 43.2, 42.8]);
    }

    #[test]
    fn rejects_missing_columns_and_bad_values() {
        assert!(parse_curves("epoch,base_gen\n0,1\n").is_err());
        assert!(parse_curves("epoch,base_gen,novel_gen\n0,1,x\n").is_err());
        assert!(parse_curves("epoch,base_gen,novel_gen\n").is_err());
        assert!(parse_curves("").is_err());
    }

    #[test]
    fn render_is_deterministic_with_two_series_and_legend() {
        let c = parse_curves(CSV).unwrap();
        let a = render(&c, "A <b> & c");
        assert_eq!(a, render(&c, "A <b> & c"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("base-gen") && a.contains("novel-gen"));
        assert!(a.contains("A &lt;b&gt; &amp; c"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn single_point_and_flat_series_render() {
        let c = Curves {
            epochs: vec![3.0],
            base: vec![50.0],
            novel: vec![50.0],
        };
        let svg = render(&c, "flat");
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn tick_steps_are_nice() {
        assert_eq!(tick_step(10.0, 10), 1.0);
        assert_eq!(tick_step(7.3, 8), 1.0);
        assert_eq!(tick_step(47.0, 8), 10.0);
        assert_eq!(tick_step(0.9, 8), 0.2);
    }
}
