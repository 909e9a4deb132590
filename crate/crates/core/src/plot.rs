//! Self-contained SVG figures: forest plot, conditional-effect curves and
//! the corpus correlation scatter.

use std::fmt::Write;

use crate::bglmm::ConditionalCurve;
use crate::corpus::CorpusAnalysis;
use crate::meta::ReMetaFit;
use crate::stats::z_crit;
use crate::tabular::EffectKind;

const FONT: &str = "font-family=\"Helvetica, Arial, sans-serif\"";
const BAND_PRED: &str = "#c6dbef";
const BAND_COMPAT: &str = "#6baed6";
const LINE: &str = "#08519c";
const FIT: &str = "#e6550d";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear or log axis mapped onto a pixel range.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px0: f64,
    px1: f64,
    log: bool,
}

impl Axis {
    fn new(lo: f64, hi: f64, px0: f64, px1: f64, log: bool) -> Self {
        let (mut lo, mut hi) = if log { (lo.ln(), hi.ln()) } else { (lo, hi) };
        if !(hi > lo) {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, px0, px1, log }
    }

    fn map(&self, v: f64) -> f64 {
        let t = if self.log { v.ln() } else { v };
        self.px0 + (t - self.lo) / (self.hi - self.lo) * (self.px1 - self.px0)
    }

    fn ticks(&self) -> Vec<f64> {
        let (lo, hi) = if self.log { (self.lo.exp(), self.hi.exp()) } else { (self.lo, self.hi) };
        if self.log {
            let candidates = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
            let t: Vec<f64> = candidates.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
            if t.len() >= 2 {
                return t;
            }
            return vec![lo, hi];
        }
        let raw = (hi - lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let mut v = (lo / step).ceil() * step;
        let mut out = Vec::new();
        while v <= hi + 1e-9 * step {
            out.push(if v.abs() < 1e-12 * step { 0.0 } else { v });
            v += step;
        }
        out
    }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Panel {
    x: Axis,
    y: Axis,
}

impl Panel {
    fn point(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x.map(x), self.y.map(y))
    }

    fn frame(&self, out: &mut String, xlabel: &str, ylabel: &str, title: &str) {
        let (l, r, b, t) = (self.x.px0, self.x.px1, self.y.px0, self.y.px1);
        let _ = writeln!(out, r##"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##, r - l, b - t);
        for v in self.x.ticks() {
            let px = self.x.map(v);
            let _ = writeln!(out, r##"<line x1="{px:.1}" y1="{b:.1}" x2="{px:.1}" y2="{:.1}" stroke="#333"/>"##, b + 4.0);
            let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" font-size="10" text-anchor="middle" {FONT}>{}</text>"#, b + 15.0, fmt_tick(v));
        }
        for v in self.y.ticks() {
            let py = self.y.map(v);
            let _ = writeln!(out, r##"<line x1="{:.1}" y1="{py:.1}" x2="{l:.1}" y2="{py:.1}" stroke="#333"/>"##, l - 4.0);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end" {FONT}>{}</text>"#, l - 6.0, py + 3.5, fmt_tick(v));
        }
        let cx = 0.5 * (l + r);
        let cy = 0.5 * (t + b);
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" font-size="12" text-anchor="middle" {FONT}>{}</text>"#, b + 32.0, esc(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{cy:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {x:.1} {cy:.1})" {FONT}>{}</text>"#,
            esc(ylabel),
            x = l - 42.0
        );
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" font-size="13" font-weight="bold" text-anchor="middle" {FONT}>{}</text>"#, t - 8.0, esc(title));
    }

    fn polyline(&self, out: &mut String, pts: &[(f64, f64)], stroke: &str, dash: Option<&str>) {
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = self.point(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let dash = dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.6"{dash}/>"#, coords.join(" "));
    }

    /// Filled region between `lower` and `upper` curves.
    fn band(&self, out: &mut String, x: &[f64], lower: &[f64], upper: &[f64], fill: &str) {
        let mut coords = Vec::new();
        for (i, &xv) in x.iter().enumerate() {
            let (px, py) = self.point(xv, upper[i]);
            coords.push(format!("{px:.2},{py:.2}"));
        }
        for (i, &xv) in x.iter().enumerate().rev() {
            let (px, py) = self.point(xv, lower[i]);
            coords.push(format!("{px:.2},{py:.2}"));
        }
        let _ = writeln!(out, r#"<polygon points="{}" fill="{fill}" stroke="none" fill-opacity="0.8"/>"#, coords.join(" "));
    }
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Study estimates with their intervals and the pooled diamond.
pub fn forest_plot(fit: &ReMetaFit, title: &str) -> String {
    let kind = fit.kind;
    let z = z_crit(fit.pooled.level);
    let rows: Vec<(String, f64, f64, f64)> = fit
        .studies
        .iter()
        .map(|s| {
            let h = z * s.v.sqrt();
            (s.study_id.clone(), kind.from_transformed(s.y), kind.from_transformed(s.y - h), kind.from_transformed(s.y + h))
        })
        .collect();
    let lo = rows.iter().map(|r| r.2).chain([fit.pooled.ci_low, kind.null()]).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.3).chain([fit.pooled.ci_high, kind.null()]).fold(f64::NEG_INFINITY, f64::max);
    let row_h = 22.0;
    let top = 50.0;
    let height = top + row_h * (rows.len() as f64 + 2.0) + 50.0;
    let (left, right) = (200.0, 560.0);
    let x = Axis::new(lo, hi, left, right, kind.is_ratio());
    let bottom = top + row_h * (rows.len() as f64 + 1.5);

    let mut out = String::new();
    let _ = writeln!(out, r#"<text x="{:.1}" y="28" font-size="14" font-weight="bold" text-anchor="middle" {FONT}>{}</text>"#, 0.5 * (left + right), esc(title));
    let nx = x.map(kind.null());
    let _ = writeln!(out, r##"<line x1="{nx:.1}" y1="{top:.1}" x2="{nx:.1}" y2="{bottom:.1}" stroke="#999" stroke-dasharray="4 3"/>"##);
    for (i, (id, point, l, h)) in rows.iter().enumerate() {
        let y = top + row_h * (i as f64 + 0.5);
        let _ = writeln!(out, r#"<text x="10" y="{:.1}" font-size="11" {FONT}>{}</text>"#, y + 4.0, esc(id));
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{LINE}"/>"#, x.map(*l), x.map(*h));
        let _ = writeln!(out, r#"<rect x="{:.1}" y="{:.1}" width="7" height="7" fill="{LINE}"/>"#, x.map(*point) - 3.5, y - 3.5);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" {FONT}>{:.2} ({:.2}, {:.2})</text>"#, right + 15.0, y + 4.0, point, l, h);
    }
    let y = top + row_h * (rows.len() as f64 + 0.8);
    let p = &fit.pooled;
    let (dl, dc, dh) = (x.map(p.ci_low), x.map(p.point), x.map(p.ci_high));
    let _ = writeln!(
        out,
        r#"<polygon points="{dl:.1},{y:.1} {dc:.1},{:.1} {dh:.1},{y:.1} {dc:.1},{:.1}" fill="{FIT}"/>"#,
        y - 6.0,
        y + 6.0
    );
    let _ = writeln!(out, r#"<text x="10" y="{:.1}" font-size="11" font-weight="bold" {FONT}>Summary ({}, tau2 = {:.4})</text>"#, y + 4.0, fit.method, fit.tau2);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" font-weight="bold" {FONT}>{:.2} ({:.2}, {:.2})</text>"#, right + 15.0, y + 4.0, p.point, p.ci_low, p.ci_high);
    let _ = writeln!(out, r##"<line x1="{left}" y1="{bottom:.1}" x2="{right}" y2="{bottom:.1}" stroke="#333"/>"##);
    for v in x.ticks() {
        let px = x.map(v);
        let _ = writeln!(out, r##"<line x1="{px:.1}" y1="{bottom:.1}" x2="{px:.1}" y2="{:.1}" stroke="#333"/>"##, bottom + 4.0);
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" font-size="10" text-anchor="middle" {FONT}>{}</text>"#, bottom + 16.0, fmt_tick(v));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" {FONT}>{}</text>"#, 0.5 * (left + right), bottom + 34.0, kind);
    document(720.0, height, &out)
}

/// One observed study: baseline risk and its OR, RR and RD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedStudy {
    pub p0: f64,
    pub or: f64,
    pub rr: f64,
    pub rd: f64,
}

impl ObservedStudy {
    fn value(&self, kind: EffectKind) -> f64 {
        match kind {
            EffectKind::Or => self.or,
            EffectKind::Rr => self.rr,
            EffectKind::Rd => self.rd,
        }
    }
}

/// Side-by-side panels of effect against baseline risk, each with its
/// prediction band, compatibility band, curve and observed studies.
pub fn curve_figure(curves: &[ConditionalCurve], observed: &[ObservedStudy]) -> String {
    let (pw, ph, margin) = (300.0, 260.0, 70.0);
    let mut out = String::new();
    for (i, c) in curves.iter().enumerate() {
        let kind = c.kind;
        let x: Vec<f64> = c.points.iter().map(|p| p.p0).collect();
        let mut ys: Vec<f64> = c.points.iter().map(|p| p.value).collect();
        for p in &c.points {
            if let Some((l, h)) = p.prediction {
                ys.extend([l, h]);
            }
        }
        ys.extend(observed.iter().map(|o| o.value(kind)));
        ys.push(kind.null());
        ys.retain(|v| v.is_finite() && (!kind.is_ratio() || *v > 0.0));
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let left = margin + i as f64 * (pw + margin);
        let panel = Panel {
            x: Axis::new(0.0, 1.0, left, left + pw, false),
            y: Axis::new(lo, hi, 40.0 + ph, 40.0, kind.is_ratio()),
        };
        let band = |sel: fn(&crate::bglmm::CurvePoint) -> Option<(f64, f64)>| {
            let b: Option<Vec<(f64, f64)>> = c.points.iter().map(sel).collect();
            b.map(|v| v.into_iter().unzip::<f64, f64, Vec<f64>, Vec<f64>>())
        };
        if let Some((l, h)) = band(|p| p.prediction) {
            panel.band(&mut out, &x, &l, &h, BAND_PRED);
        }
        if let Some((l, h)) = band(|p| p.compatibility) {
            panel.band(&mut out, &x, &l, &h, BAND_COMPAT);
        }
        let curve: Vec<(f64, f64)> = c.points.iter().map(|p| (p.p0, p.value)).collect();
        panel.polyline(&mut out, &curve, LINE, None);
        panel.polyline(&mut out, &[(0.0, kind.null()), (1.0, kind.null())], "#999", Some("4 3"));
        for o in observed {
            let v = o.value(kind);
            if v.is_finite() && (!kind.is_ratio() || v > 0.0) {
                let (px, py) = panel.point(o.p0, v);
                let _ = writeln!(out, r##"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="none" stroke="#222"/>"##);
            }
        }
        let letter = ["(a)", "(b)", "(c)"].get(i).copied().unwrap_or("");
        panel.frame(&mut out, "Baseline risk", &kind.to_string(), &format!("{letter} {kind}"));
    }
    let _ = writeln!(
        out,
        r#"<text x="{margin}" y="{:.1}" font-size="10" {FONT}>Dark band: {:.0}% compatibility region. Light band: {:.0}% prediction region.</text>"#,
        40.0 + ph + 50.0,
        curves.first().map(|c| c.level * 100.0).unwrap_or(95.0),
        curves.first().map(|c| c.level * 100.0).unwrap_or(95.0)
    );
    let n = curves.len().max(1) as f64;
    document(margin + n * (pw + margin), ph + 110.0, &out)
}

/// ρ_RR against ρ_OR, one panel per study-count stratum, with the diagonal
/// and the least-squares line.
pub fn corpus_scatter(analysis: &CorpusAnalysis) -> String {
    let (pw, margin) = (300.0, 70.0);
    let mut out = String::new();
    for (i, s) in analysis.summaries.iter().enumerate() {
        let left = margin + i as f64 * (pw + margin);
        let panel = Panel { x: Axis::new(-1.0, 1.0, left, left + pw, false), y: Axis::new(-1.0, 1.0, 40.0 + pw, 40.0, false) };
        let in_stratum = |k: usize| k >= s.k_min && s.k_max.is_none_or(|m| k < m);
        for (o, r) in analysis.records.iter().filter(|r| in_stratum(r.k)).filter_map(|r| r.or_rr()) {
            let (px, py) = panel.point(o, r);
            let _ = writeln!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="2.2" fill="{LINE}" fill-opacity="0.45"/>"#);
        }
        panel.polyline(&mut out, &[(-1.0, -1.0), (1.0, 1.0)], "#555", Some("4 3"));
        if let (Some(b), Some(a)) = (s.slope, s.intercept) {
            // Clip the fitted line to the unit square.
            let pts: Vec<(f64, f64)> = (0..=200)
                .map(|j| -1.0 + 2.0 * j as f64 / 200.0)
                .map(|x| (x, a + b * x))
                .filter(|(_, y)| (-1.0..=1.0).contains(y))
                .collect();
            if pts.len() >= 2 {
                panel.polyline(&mut out, &pts, FIT, None);
            }
        }
        let letter = ["(a)", "(b)"].get(i).copied().unwrap_or("");
        panel.frame(&mut out, "Spearman rho (OR vs baseline risk)", "Spearman rho (RR vs baseline risk)", &format!("{letter} {} (n = {})", s.stratum, s.n_meta));
    }
    let n = analysis.summaries.len().max(1) as f64;
    document(margin + n * (pw + margin), pw + 100.0, &out)
}
