//! Minimal self-contained SVG charts: line plots and bar charts.
//!
//! Emits plain SVG 1.1 with inline styling — no scripting, no external
//! assets — sized for embedding in notes or a README. Axis ticks come from
//! the usual 1-2-5 ladder. This is deliberately tiny: the workbench needs
//! loss curves and mean±spread comparisons, nothing more.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const M_LEFT: f64 = 70.0;
const M_RIGHT: f64 = 18.0;
const M_TOP: f64 = 42.0;
const M_BOTTOM: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#2563eb", "#dc2626", "#16a34a", "#9333ea", "#ea580c", "#0891b2",
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One bar with an optional symmetric error whisker.
#[derive(Debug, Clone)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: Option<f64>,
}

/// Tick positions on the 1-2-5 ladder covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let raw_step = range / target.max(1) as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        // snap near-zero ticks produced by rounding
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
        if out.len() > 40 {
            break;
        }
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pads a data range so flat data still spans something drawable.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5 * lo.abs().max(1.0), hi + 0.5 * hi.abs().max(1.0));
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        M_LEFT + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - M_LEFT - M_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - M_BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - M_TOP - M_BOTTOM)
    }
}

fn open_svg(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"Helvetica, Arial, sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" font-weight=\"bold\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn draw_y_axis(out: &mut String, frame: &Frame, label: &str) {
    for t in nice_ticks(frame.y0, frame.y1, 6) {
        let y = frame.y(t);
        out.push_str(&format!(
            "<line x1=\"{M_LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#e5e7eb\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            WIDTH - M_RIGHT,
            M_LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    out.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (M_TOP + HEIGHT - M_BOTTOM) / 2.0,
        (M_TOP + HEIGHT - M_BOTTOM) / 2.0,
        escape(label)
    ));
}

fn close_axes(out: &mut String) {
    out.push_str(&format!(
        "<line x1=\"{M_LEFT}\" y1=\"{M_TOP}\" x2=\"{M_LEFT}\" y2=\"{:.1}\" stroke=\"#111\"/>\n\
         <line x1=\"{M_LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#111\"/>\n",
        HEIGHT - M_BOTTOM,
        HEIGHT - M_BOTTOM,
        WIDTH - M_RIGHT,
        HEIGHT - M_BOTTOM,
    ));
}

/// Multi-series line chart with a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = open_svg(title);
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0
        ));
        return out;
    }
    let (x0, x1) = padded(
        finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = padded(
        finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let frame = Frame { x0, x1, y0, y1 };

    draw_y_axis(&mut out, &frame, y_label);
    for t in nice_ticks(frame.x0, frame.x1, 8) {
        let x = frame.x(t);
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - M_BOTTOM + 16.0,
            fmt_tick(t)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (M_LEFT + WIDTH - M_RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.x(x), frame.y(y)))
            .collect();
        if pts.len() == 1 {
            let xy: Vec<&str> = pts[0].split(',').collect();
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                xy[0], xy[1]
            ));
        } else if !pts.is_empty() {
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
                pts.join(" ")
            ));
        }
        let ly = M_TOP + 14.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            WIDTH - M_RIGHT - 150.0,
            ly - 9.0,
            WIDTH - M_RIGHT - 136.0,
            ly,
            escape(&s.name)
        ));
    }
    close_axes(&mut out);
    out.push_str("</svg>\n");
    out
}

/// Bar chart with optional error whiskers; the baseline always includes 0.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut out = open_svg(title);
    let finite: Vec<&Bar> = bars.iter().filter(|b| b.value.is_finite()).collect();
    if finite.is_empty() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0
        ));
        return out;
    }
    let mut lo = 0f64;
    let mut hi = 0f64;
    for b in &finite {
        let e = b.err.unwrap_or(0.0).abs();
        lo = lo.min(b.value - e);
        hi = hi.max(b.value + e);
    }
    let (y0, y1) = padded(lo, hi);
    let frame = Frame {
        x0: 0.0,
        x1: bars.len() as f64,
        y0,
        y1,
    };
    draw_y_axis(&mut out, &frame, y_label);

    let slot = (WIDTH - M_LEFT - M_RIGHT) / bars.len() as f64;
    for (i, b) in bars.iter().enumerate() {
        let cx = frame.x(i as f64 + 0.5);
        out.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - M_BOTTOM + 16.0,
            escape(&b.label)
        ));
        if !b.value.is_finite() {
            out.push_str(&format!(
                "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                frame.y(0.0) - 6.0,
                b.value
            ));
            continue;
        }
        let w = 0.6 * slot;
        let ytop = frame.y(b.value.max(0.0));
        let ybase = frame.y(b.value.min(0.0).max(frame.y0));
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{ytop:.1}\" width=\"{w:.1}\" height=\"{:.1}\" \
             fill=\"{color}\" fill-opacity=\"0.85\"/>\n",
            cx - w / 2.0,
            (ybase - ytop).max(0.0),
        ));
        if let Some(e) = b.err {
            let e = e.abs();
            let ylo = frame.y(b.value - e);
            let yhi = frame.y(b.value + e);
            out.push_str(&format!(
                "<line x1=\"{cx:.1}\" y1=\"{yhi:.1}\" x2=\"{cx:.1}\" y2=\"{ylo:.1}\" stroke=\"#111\"/>\n\
                 <line x1=\"{:.1}\" y1=\"{yhi:.1}\" x2=\"{:.1}\" y2=\"{yhi:.1}\" stroke=\"#111\"/>\n\
                 <line x1=\"{:.1}\" y1=\"{ylo:.1}\" x2=\"{:.1}\" y2=\"{ylo:.1}\" stroke=\"#111\"/>\n",
                cx - 5.0, cx + 5.0, cx - 5.0, cx + 5.0
            ));
        }
        out.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            ytop - 4.0,
            fmt_tick(b.value)
        ));
    }
    close_axes(&mut out);
    out.push_str("</svg>\n");
    out
}
