//! Minimal self-contained SVG plots for the report stage.
//!
//! No plotting dependency: the charts here are a few hundred bytes of
//! hand-written markup. Coordinates are emitted with fixed precision so
//! the files are byte-stable across runs and machines.

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;

const SERIES_COLORS: [&str; 6] =
    ["#1f6feb", "#d1242f", "#1a7f37", "#9a6700", "#8250df", "#bf3989"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str) -> Canvas {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"11\">\n"
        ));
        body.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
            fmt(WIDTH / 2.0),
            escape(title)
        ));
        Canvas { body }
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let x0 = MARGIN_L;
        let x1 = WIDTH - MARGIN_R;
        let y0 = HEIGHT - MARGIN_B;
        let y1 = MARGIN_T;
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444444\"/>\n",
            fmt(x0),
            fmt(y0),
            fmt(x1),
            fmt(y0)
        ));
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444444\"/>\n",
            fmt(x0),
            fmt(y0),
            fmt(x0),
            fmt(y1)
        ));
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt((x0 + x1) / 2.0),
            fmt(HEIGHT - 10.0),
            escape(x_label)
        ));
        self.body.push_str(&format!(
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
            fmt((y0 + y1) / 2.0),
            fmt((y0 + y1) / 2.0),
            escape(y_label)
        ));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data range [lo, hi] onto the plot area; degenerate ranges are
/// padded so a flat series still renders mid-plot.
fn scale(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn x_pixel(v: f64, lo: f64, hi: f64) -> f64 {
    MARGIN_L + (v - lo) / (hi - lo) * (WIDTH - MARGIN_L - MARGIN_R)
}

fn y_pixel(v: f64, lo: f64, hi: f64) -> f64 {
    HEIGHT - MARGIN_B - (v - lo) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B)
}

/// Vertical bars, one per label, y starting at zero.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut c = Canvas::new(title);
    c.axes(x_label, y_label);
    if bars.is_empty() {
        return c.finish();
    }
    let max = bars.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let (ylo, yhi) = scale(0.0, max.max(0.0));
    let span = WIDTH - MARGIN_L - MARGIN_R;
    let slot = span / bars.len() as f64;
    let bar_w = slot * 0.7;
    for (i, (label, v)) in bars.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let top = y_pixel(*v, ylo, yhi);
        let base = y_pixel(0.0, ylo, yhi);
        c.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            fmt(cx - bar_w / 2.0),
            fmt(top),
            fmt(bar_w),
            fmt((base - top).max(0.0)),
            SERIES_COLORS[0]
        ));
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(cx),
            fmt(HEIGHT - MARGIN_B + 14.0),
            escape(label)
        ));
    }
    c.body.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
        fmt(MARGIN_L - 4.0),
        fmt(y_pixel(yhi, ylo, yhi) + 4.0),
        fmt(yhi)
    ));
    c.body.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
        fmt(MARGIN_L - 4.0),
        fmt(y_pixel(ylo, ylo, yhi) + 4.0),
        fmt(ylo)
    ));
    c.finish()
}

/// One polyline per named series, with small point markers and a legend.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let mut c = Canvas::new(title);
    c.axes(x_label, y_label);
    let points: Vec<(f64, f64)> =
        series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        return c.finish();
    }
    let (xlo, xhi) = scale(
        points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (ylo, yhi) = scale(
        points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        if !pts.is_empty() {
            let coords: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(x_pixel(x, xlo, xhi)), fmt(y_pixel(y, ylo, yhi))))
                .collect();
            c.body.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                coords.join(" "),
                color
            ));
            for &(x, y) in pts {
                c.body.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{}\"/>\n",
                    fmt(x_pixel(x, xlo, xhi)),
                    fmt(y_pixel(y, ylo, yhi)),
                    color
                ));
            }
        }
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            fmt(WIDTH - MARGIN_R - 120.0),
            fmt(MARGIN_T + 14.0 * si as f64 + 4.0),
            color,
            escape(name)
        ));
    }
    for (v, anchor_y) in [(yhi, y_pixel(yhi, ylo, yhi)), (ylo, y_pixel(ylo, ylo, yhi))] {
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
            fmt(MARGIN_L - 4.0),
            fmt(anchor_y + 4.0),
            v
        ));
    }
    for (v, anchor_x) in [(xlo, x_pixel(xlo, xlo, xhi)), (xhi, x_pixel(xhi, xlo, xhi))] {
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text>\n",
            fmt(anchor_x),
            fmt(HEIGHT - MARGIN_B + 14.0),
            v
        ));
    }
    c.finish()
}
