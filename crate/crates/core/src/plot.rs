//! Minimal SVG line charts. CSV files are the source of truth; these plots
//! are rendering conveniences with no external dependencies.

use std::path::PathBuf;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::StudyRow;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let av = v.abs();
    if av >= 1000.0 || av < 0.01 {
        format!("{v:.1e}")
    } else if av < 1.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.1}")
    }
}

/// Renders named `(x, y)` series as an SVG line chart.
pub fn line_chart(
    series: &[(String, Vec<(f64, f64)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (x0, x1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let (y0, y1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    let (x0, x1) = if points.is_empty() { (0.0, 1.0) } else { (x0, x1) };
    let (mut y0, mut y1) = if points.is_empty() { (0.0, 1.0) } else { (y0, y1) };
    if (y1 - y0).abs() < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.06;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let xr = (x1 - x0).max(1e-12);
    let yr = y1 - y0;
    let sx = |x: f64| MARGIN + (x - x0) / xr * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / yr * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    ));

    // axes and ticks
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    for i in 0..=4 {
        let fx = x0 + xr * i as f64 / 4.0;
        let fy = y0 + yr * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            sx(fx),
            H - MARGIN + 18.0,
            fmt_tick(fx)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            MARGIN - 6.0,
            sy(fy) + 4.0,
            fmt_tick(fy)
        ));
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#eeeeee\"/>\n",
            m = MARGIN,
            r = W - MARGIN,
            y = sy(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        W / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        H / 2.0,
        H / 2.0
    ));

    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if !path.is_empty() {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.4\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = MARGIN + 16.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            W - MARGIN - 150.0,
            W - MARGIN - 126.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            W - MARGIN - 120.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Study curves: one-step extraction vs probe, base and controlled models.
pub fn study_svg(rows: &[StudyRow], _t_max: usize) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = vec![
        ("base one-step".into(), Vec::new()),
        ("base probe".into(), Vec::new()),
        ("controlled one-step".into(), Vec::new()),
        ("controlled probe".into(), Vec::new()),
    ];
    for r in rows {
        let (oi, pi) = if r.model == "base" { (0, 1) } else { (2, 3) };
        series[oi].1.push((r.t as f64, r.rmse_onestep));
        series[pi].1.push((r.t as f64, r.rmse_probe));
    }
    for (_, pts) in series.iter_mut() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    line_chart(&series, "control recovery vs timestep", "t", "rmse")
}

/// Generic CSV plot: `plot.x` column against each `plot.y` column, optionally
/// grouped by a series column.
pub fn run_plot(cfg: &Config) -> Result<PathBuf> {
    let csv_path = &cfg.plot.csv;
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header: Vec<&str> =
        lines.next().ok_or_else(|| Error::Config("plot: empty CSV".into()))?.split(',').collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Config(format!("plot: column '{name}' not in {header:?}")))
    };
    let xi = col(&cfg.plot.x)?;
    let group_col = if cfg.plot.group.is_empty() { None } else { Some(col(&cfg.plot.group)?) };

    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for yname in &cfg.plot.y {
        let yi = col(yname)?;
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() <= xi.max(yi) {
                continue;
            }
            let (Ok(x), Ok(y)) = (fields[xi].parse::<f64>(), fields[yi].parse::<f64>()) else {
                continue;
            };
            let name = match group_col {
                Some(gi) => format!("{} [{}]", yname, fields.get(gi).unwrap_or(&"")),
                None => yname.clone(),
            };
            match series.iter_mut().find(|(n, _)| *n == name) {
                Some((_, pts)) => pts.push((x, y)),
                None => series.push((name, vec![(x, y)])),
            }
        }
    }
    for (_, pts) in series.iter_mut() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    let out = if cfg.plot.out.as_os_str().is_empty() {
        csv_path.with_extension("svg")
    } else {
        cfg.plot.out.clone()
    };
    let title = csv_path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let svg = line_chart(&series, &title, &cfg.plot.x, "value");
    std::fs::write(&out, svg).map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_series_and_points() {
        let series = vec![
            ("a".to_string(), vec![(0.0, 1.0), (1.0, 2.0)]),
            ("b".to_string(), vec![(0.0, 2.0), (1.0, 0.5)]),
        ];
        let svg = line_chart(&series, "title", "x", "y");
        assert!(svg.contains("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains(">a<") && svg.contains(">b<"));
    }

    #[test]
    fn empty_series_still_render() {
        let svg = line_chart(&[], "empty", "x", "y");
        assert!(svg.contains("</svg>"));
    }
}
