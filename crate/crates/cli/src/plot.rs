//! Minimal SVG line charts. Every polyline carries the exact CSV strings it
//! was drawn from in a `data-values` attribute.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 130.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y)` exactly as they appear in the source CSV.
    pub points: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            log_y: false,
            series: Vec::new(),
        }
    }

    pub fn log_log(mut self) -> Self {
        self.log_x = true;
        self.log_y = true;
        self
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
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

/// Plotted coordinate of a raw value, or `None` if it cannot be drawn.
fn coord(raw: &str, log: bool) -> Option<f64> {
    let v: f64 = raw.parse().ok()?;
    if !v.is_finite() {
        return None;
    }
    if log {
        (v > 0.0).then(|| v.log10())
    } else {
        Some(v)
    }
}

fn tick_label(v: f64, log: bool) -> String {
    let shown = if log { 10f64.powf(v) } else { v };
    if shown != 0.0 && (shown.abs() < 1e-3 || shown.abs() >= 1e5) {
        format!("{shown:.1e}")
    } else {
        let s = format!("{shown:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn render_panel(out: &mut String, panel: &Panel, top: f64) {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let drawable: Vec<Vec<(f64, f64)>> = panel
        .series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter_map(|(x, y)| Some((coord(x, panel.log_x)?, coord(y, panel.log_y)?)))
                .collect()
        })
        .collect();
    let (x0, x1) = range(drawable.iter().flatten().map(|p| p.0));
    let (y0, y1) = range(drawable.iter().flatten().map(|p| p.1));
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| top + MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let _ = writeln!(
        out,
        r#"<g class="panel"><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        top + 18.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_LEFT:.1}" y="{:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#444"/>"##,
        top + MARGIN_TOP
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            px(xv),
            top + PANEL_HEIGHT - MARGIN_BOTTOM + 14.0,
            escape(&tick_label(xv, panel.log_x))
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            MARGIN_LEFT - 4.0,
            py(yv) + 3.0,
            escape(&tick_label(yv, panel.log_y))
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        top + PANEL_HEIGHT - 8.0,
        escape(&panel.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {:.1})">{}</text>"#,
        top + MARGIN_TOP + plot_h / 2.0,
        top + MARGIN_TOP + plot_h / 2.0,
        escape(&panel.y_label)
    );
    for (i, (series, pts)) in panel.series.iter().zip(&drawable).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let raw: Vec<String> = series.points.iter().map(|(x, y)| format!("{x},{y}")).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" data-series="{}" data-values="{}" points="{}"/>"#,
            escape(&series.name),
            escape(&raw.join(" ")),
            coords.join(" ")
        );
        let ly = top + MARGIN_TOP + 12.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    out.push_str("</g>\n");
}

/// Panels stacked vertically in one document.
pub fn render(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut out, panel, i as f64 * PANEL_HEIGHT);
    }
    out.push_str("</svg>\n");
    out
}

/// Splits CSV text into a header and rows of raw fields.
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().map(|h| h.split(',').map(str::to_string).collect()).unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

/// Series of `y_col` against `x_col`, optionally one series per value of `group_col`.
pub fn series_from_csv(text: &str, x_col: &str, y_col: &str, group_col: Option<&str>) -> Vec<Series> {
    let (header, rows) = parse_csv(text);
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(xi), Some(yi)) = (col(x_col), col(y_col)) else {
        return Vec::new();
    };
    let gi = group_col.and_then(col);
    let mut out: Vec<Series> = Vec::new();
    for row in &rows {
        let name = gi.map_or_else(|| y_col.to_string(), |g| row[g].clone());
        let point = (row[xi].clone(), row[yi].clone());
        match out.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push(point),
            None => out.push(Series {
                name,
                points: vec![point],
            }),
        }
    }
    out
}

/// Loss and accuracy panels for a metrics CSV.
pub fn metrics_chart(title: &str, csv: &str) -> String {
    let mut loss = Panel::new(&format!("{title}: loss"), "iteration", "loss");
    loss.series.extend(series_from_csv(csv, "iteration", "train_loss", None));
    loss.series.extend(series_from_csv(csv, "iteration", "eval_loss", None));
    let mut acc = Panel::new(&format!("{title}: held-out accuracy"), "iteration", "accuracy");
    acc.series.extend(series_from_csv(csv, "iteration", "eval_accuracy", None));
    render(&[loss, acc])
}
