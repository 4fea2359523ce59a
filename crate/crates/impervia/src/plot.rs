//! Minimal standalone SVG line plot of model and null MAE curves on a
//! log-scaled resolution axis.

use std::fmt::Write as _;

use impervia_core::evaluation::{MaeCurve, NullResolution};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

fn polyline(xs: &[f64], ys: &[f64], colour: &str, dash: bool) -> String {
    let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dash { r#" stroke-dasharray="6 4""# } else { "" };
    format!(r#"<polyline fill="none" stroke="{colour}" stroke-width="2"{dash} points="{}"/>"#, pts.join(" "))
}

pub fn mae_svg(title: &str, model: &MaeCurve, null: &MaeCurve, nr: Option<NullResolution>) -> String {
    let lx: Vec<f64> = model.resolutions_km.iter().map(|r| r.log2()).collect();
    let (x0, x1) = (lx[0], lx[lx.len() - 1].max(lx[0] + 1e-9));
    let all = model.values.iter().chain(&null.values);
    let y1 = all.clone().fold(f64::MIN, |a, &b| a.max(b)) * 1.05;
    let y0 = all.fold(f64::MAX, |a, &b| a.min(b)) * 0.95;
    let y1 = if y1 > y0 { y1 } else { y0 + 1.0 };
    let px = |l: f64| PAD + (l - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let xs: Vec<f64> = lx.iter().map(|&l| px(l)).collect();

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    for (x, r) in xs.iter().zip(&model.resolutions_km) {
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{r}</text>"#, H - PAD + 16.0);
    }
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * f64::from(k) / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#, PAD - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">resolution (km)</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">MAE</text>"#, H / 2.0, H / 2.0);
    let my: Vec<f64> = model.values.iter().map(|&v| py(v)).collect();
    let ny: Vec<f64> = null.values.iter().map(|&v| py(v)).collect();
    let _ = writeln!(s, "{}", polyline(&xs, &my, "#1f77b4", false));
    let _ = writeln!(s, "{}", polyline(&xs, &ny, "#7f7f7f", true));
    if let Some(NullResolution::Resolved { km, mae }) = nr {
        let (cx, cy) = (px(km.log2()), py(mae));
        let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="5" fill="#d62728"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">({km:.2}, {mae:.2})</text>"#, cx + 8.0, cy - 8.0);
    }
    let _ = writeln!(s, r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="#1f77b4">model</text>"##, W - PAD - 60.0, PAD);
    let _ = writeln!(s, r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="#7f7f7f">null</text>"##, W - PAD - 60.0, PAD + 16.0);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
