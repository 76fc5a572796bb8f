//! Static SVG overlay of a loss curve and its multipeak decomposition.

use std::fmt::Write as _;

use resospec::sweep::{LossCurve, MultipeakFit};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
];

/// Round step for about `target` ticks over `span`.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }

    fn polyline(&self, xs: &[f64], ys: &[f64]) -> String {
        let mut s = String::new();
        for (x, y) in xs.iter().zip(ys) {
            let _ = write!(s, "{:.2},{:.2} ", self.px(*x), self.py(*y));
        }
        s.trim_end().to_string()
    }
}

/// Field in mT on x, loss rate in 1/ms on y.
pub fn loss_curve_svg(curve: &LossCurve, fit: Option<&MultipeakFit>, title: &str) -> String {
    let xs: Vec<f64> = curve.b0().iter().map(|b| b * 1e3).collect();
    let ys: Vec<f64> = curve.kappa_s().iter().map(|k| k * 1e-3).collect();
    let (mut x0, mut x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let (ymin, ymax) = ys.iter().fold((0.0_f64, f64::NEG_INFINITY), |(a, b), &y| {
        (a.min(y), b.max(y))
    });
    let ymax = if ymax > ymin { ymax } else { ymin + 1.0 };
    let pad = 0.05 * (ymax - ymin);
    let f = Frame {
        x0,
        x1,
        y0: ymin - pad,
        y1: ymax + pad,
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    let (left, right, top, bottom) = (MARGIN_L, WIDTH - MARGIN_R, MARGIN_T, HEIGHT - MARGIN_B);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    let step = tick_step(f.x1 - f.x0, 8.0);
    let mut t = (f.x0 / step).ceil() * step;
    while t <= f.x1 + 1e-9 * step {
        let x = f.px(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 5.0,
            bottom + 18.0,
            trim(t)
        );
        t += step;
    }
    let step = tick_step(f.y1 - f.y0, 6.0);
    let mut t = (f.y0 / step).ceil() * step;
    while t <= f.y1 + 1e-9 * step {
        let y = f.py(t);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0,
            trim(t)
        );
        t += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">B0 (mT)</text>"#,
        (left + right) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">kappa_s (1/ms)</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );

    let _ = writeln!(s, r##"<g fill="#1f77b4">"##);
    for (x, y) in xs.iter().zip(&ys) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#,
            f.px(*x),
            f.py(*y)
        );
    }
    let _ = writeln!(s, "</g>");

    if let Some(fit) = fit {
        let n = 600;
        let (lo, hi) = fit
            .features
            .first()
            .map(|ft| ft.window)
            .unwrap_or((x0 * 1e-3, x1 * 1e-3));
        let bs: Vec<f64> = (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .collect();
        let bx: Vec<f64> = bs.iter().map(|b| b * 1e3).collect();
        let templates: Vec<_> = fit.features.iter().map(|ft| ft.template()).collect();
        for (k, (ft, tpl)) in fit.features.iter().zip(&templates).enumerate() {
            let ys: Vec<f64> = bs.iter().map(|&b| tpl.eval(b) * 1e-3).collect();
            let colour = PALETTE[k % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-dasharray="5,3" points="{}"/>"#,
                f.polyline(&bx, &ys)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" fill="{colour}" text-anchor="end">{}</text>"#,
                right - 8.0,
                top + 16.0 * (k as f64 + 1.0),
                escape(&ft.species_label)
            );
        }
        let total: Vec<f64> = bs
            .iter()
            .map(|&b| templates.iter().map(|t| t.eval(b)).sum::<f64>() * 1e-3)
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#,
            f.polyline(&bx, &total)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}
