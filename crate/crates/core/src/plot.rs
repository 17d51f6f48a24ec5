//! SVG export of quantizer regions and rate curves.
//!
//! Every drawn element carries its data-space coordinates as `data-*`
//! attributes so plots can be checked against the numbers they show.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_eval::{ComponentPartition, IntervalPartition, RelayPartition};
use crate::experiment::{self, CurveKey, Manifest};
use crate::trainer::{self, RunMetrics, RunRecord};

/// Raster size per axis for 2-D region maps.
pub const DEFAULT_RESOLUTION: usize = 200;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const SER_FLOOR: f64 = 1e-6;

/// Categorical color for index `i`.
pub fn color(i: usize) -> String {
    let hue = (i as f64 * 137.508) % 360.0;
    let light = [0.52, 0.66, 0.40][i % 3];
    let (r, g, b) = hsl_to_rgb(hue, 0.7, light);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    (to(r), to(g), to(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgDoc {
    pub name: String,
    pub content: String,
}

impl SvgDoc {
    fn new(name: impl Into<String>, body: &str, w: f64, h: f64) -> Self {
        let content = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
        );
        Self { name: name.into(), content }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let p = dir.join(&self.name);
        fs::write(&p, &self.content)?;
        Ok(p)
    }
}

/// Linear (or log10) map from a data interval to a pixel interval.
#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
    log: bool,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64, log: bool) -> Self {
        let (lo, hi) = if log { (lo.log10(), hi.log10()) } else { (lo, hi) };
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { lo, hi, px_lo, px_hi, log }
    }

    fn px(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        if self.log {
            (self.lo.floor() as i32..=self.hi.ceil() as i32)
                .map(|e| 10f64.powi(e))
                .filter(|&v| v.log10() >= self.lo - 1e-9 && v.log10() <= self.hi + 1e-9)
                .collect()
        } else {
            (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
        }
    }
}

fn axes(out: &mut String, x: &Scale, y: &Scale, xlabel: &str, ylabel: &str, title: &str) {
    let (x0, x1, y0, y1) = (x.px_lo, x.px_hi, y.px_lo, y.px_hi);
    let _ = writeln!(out, "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>", (x0 + x1) / 2.0, escape(title));
    let _ = writeln!(out, "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>");
    let _ = writeln!(out, "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>");
    for t in x.ticks(5) {
        let px = x.px(t);
        let _ = writeln!(out, "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", y0 + 14.0, fmt_tick(t));
    }
    for t in y.ticks(5) {
        let py = y.px(t);
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{py:.1}\" text-anchor=\"end\">{}</text>", x0 - 4.0, fmt_tick(t));
    }
    let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, y0 + 32.0, escape(xlabel));
    let _ = writeln!(
        out,
        "<text transform=\"translate(14,{:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        format!("{:.2}", v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------- regions

/// Partitions of a run, extracting them from the models when needed.
pub fn run_partitions(record: &RunRecord) -> Result<Vec<RelayPartition>> {
    if let Some(p) = &record.partitions {
        return Ok(p.clone());
    }
    let models = record
        .models
        .as_ref()
        .ok_or_else(|| Error::NotFound(format!("no trained models for run {}", record.config.file_stem())))?;
    let cfg = &record.config;
    let ch = cfg.channel()?;
    models
        .relays
        .iter()
        .enumerate()
        .map(|(r, relay)| RelayPartition::extract(relay, cfg.power, ch.variance(r), cfg.modulation.dim(), &cfg.eval.extraction))
        .collect()
}

/// Plotting window per relay: constellation extent plus four noise deviations.
fn window(record: &RunRecord, relay: usize) -> Result<(f64, f64)> {
    let cfg = &record.config;
    let c = cfg.constellation()?;
    let ch = cfg.channel()?;
    let extent = c.points().flat_map(|p| p.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let half = extent + 4.0 * ch.per_dim_std(relay);
    Ok((-half, half))
}

/// Intervals of `p` clipped to `[lo, hi]`: `(lo, hi, label)`.
pub fn clipped_intervals(p: &IntervalPartition, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    (0..p.num_intervals())
        .filter_map(|i| {
            let (a, b) = p.bounds(i);
            let (a, b) = (a.max(lo), b.min(hi));
            (b > a).then_some((a, b, p.labels[i]))
        })
        .collect()
}

fn interval_component(part: &RelayPartition) -> Option<&IntervalPartition> {
    match part.components.as_slice() {
        [ComponentPartition::Interval(p)] if part.dim == 1 => Some(p),
        _ => None,
    }
}

/// Region plots of a trained run: one strip per relay and the joint plane
/// for real constellations, one 2-D label map per relay for complex ones.
pub fn export_regions(record: &RunRecord, resolution: usize) -> Result<Vec<SvgDoc>> {
    let models = record
        .models
        .as_ref()
        .ok_or_else(|| Error::NotFound(format!("no trained models for run {}", record.config.file_stem())))?;
    let parts = run_partitions(record)?;
    let stem = record.config.file_stem();
    let windows = [window(record, 0)?, window(record, 1)?];
    let ivs: Vec<Option<&IntervalPartition>> = parts.iter().map(interval_component).collect();
    if let [Some(p1), Some(p2)] = ivs.as_slice() {
        let decisions = models.demod.hard_table()?;
        let strips = strips_svg(&[p1, p2], &windows, record)?;
        let plane = plane_svg(p1, p2, &windows, &decisions)?;
        return Ok(vec![SvgDoc::new(format!("{stem}_strips.svg"), &strips, WIDTH, 220.0), plane.named(format!("{stem}_plane.svg"))]);
    }
    parts
        .iter()
        .enumerate()
        .map(|(r, p)| Ok(map_2d_svg(p, r, windows[r], resolution.max(2)).named(format!("{stem}_relay{}.svg", r + 1))))
        .collect()
}

impl SvgDoc {
    fn named(mut self, name: String) -> Self {
        self.name = name;
        self
    }
}

pub fn write_regions(record: &RunRecord, dir: &Path, resolution: usize) -> Result<Vec<PathBuf>> {
    export_regions(record, resolution)?.iter().map(|d| d.write(dir)).collect()
}

fn strips_svg(parts: &[&IntervalPartition; 2], windows: &[(f64, f64); 2], record: &RunRecord) -> Result<String> {
    let c = record.config.constellation()?;
    let mut out = String::new();
    let band = 50.0;
    for (r, p) in parts.iter().enumerate() {
        let (lo, hi) = windows[r];
        let x = Scale::new(lo, hi, MARGIN, WIDTH - MARGIN / 2.0, false);
        let top = 30.0 + r as f64 * (band + 50.0);
        let _ = writeln!(out, "<text x=\"8\" y=\"{:.1}\">relay {}</text>", top + band / 2.0, r + 1);
        let _ = writeln!(
            out,
            "<line class=\"scale\" data-relay=\"{}\" data-lo=\"{lo}\" data-hi=\"{hi}\" data-pxlo=\"{}\" data-pxhi=\"{}\" x1=\"{:.3}\" y1=\"{top:.1}\" x2=\"{:.3}\" y2=\"{top:.1}\" stroke=\"none\"/>",
            r + 1,
            x.px_lo,
            x.px_hi,
            x.px_lo,
            x.px_hi
        );
        for (a, b, label) in clipped_intervals(p, lo, hi) {
            let _ = writeln!(
                out,
                "<rect class=\"cell\" data-relay=\"{}\" data-lo=\"{a}\" data-hi=\"{b}\" data-label=\"{label}\" x=\"{:.3}\" y=\"{top:.1}\" width=\"{:.3}\" height=\"{band}\" fill=\"{}\"/>",
                r + 1,
                x.px(a),
                x.px(b) - x.px(a),
                color(label)
            );
        }
        for &y in p.breakpoints.iter().filter(|&&y| y > lo && y < hi) {
            let _ = writeln!(
                out,
                "<line class=\"boundary\" data-relay=\"{}\" data-y=\"{y}\" x1=\"{px:.3}\" y1=\"{top:.1}\" x2=\"{px:.3}\" y2=\"{:.1}\" stroke=\"black\"/>",
                r + 1,
                top + band,
                px = x.px(y)
            );
        }
        for pt in c.points() {
            let px = x.px(pt[0]);
            let _ = writeln!(out, "<circle class=\"symbol\" cx=\"{px:.3}\" cy=\"{:.1}\" r=\"3\" fill=\"black\"/>", top + band + 8.0);
        }
        for t in x.ticks(4) {
            let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", x.px(t), top + band + 24.0, fmt_tick(t));
        }
    }
    Ok(out)
}

fn plane_svg(p1: &IntervalPartition, p2: &IntervalPartition, windows: &[(f64, f64); 2], decisions: &[usize]) -> Result<SvgDoc> {
    let side = 480.0;
    let x = Scale::new(windows[0].0, windows[0].1, MARGIN, MARGIN + side, false);
    let y = Scale::new(windows[1].0, windows[1].1, MARGIN + side, MARGIN, false);
    let k2 = p2.k;
    if decisions.len() != p1.k * k2 {
        return Err(Error::WidthMismatch { expected: p1.k * k2, got: decisions.len() });
    }
    let mut out = String::new();
    for (a1, b1, u1) in clipped_intervals(p1, windows[0].0, windows[0].1) {
        for (a2, b2, u2) in clipped_intervals(p2, windows[1].0, windows[1].1) {
            let pair = u1 * k2 + u2;
            let w = decisions[pair];
            let (px0, px1, py0, py1) = (x.px(a1), x.px(b1), y.px(b2), y.px(a2));
            let _ = writeln!(
                out,
                "<rect class=\"cell\" data-u1=\"{u1}\" data-u2=\"{u2}\" data-y1lo=\"{a1}\" data-y1hi=\"{b1}\" data-y2lo=\"{a2}\" data-y2hi=\"{b2}\" data-decision=\"{w}\" x=\"{px0:.3}\" y=\"{py0:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\" stroke=\"white\" stroke-width=\"0.3\"/>",
                px1 - px0,
                py1 - py0,
                color(pair)
            );
            if (px1 - px0).min(py1 - py0) >= 10.0 {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"6\" fill=\"white\" stroke=\"black\" stroke-width=\"0.5\"/>",
                    (px0 + px1) / 2.0,
                    (py0 + py1) / 2.0
                );
                let _ = writeln!(
                    out,
                    "<text class=\"decision\" x=\"{:.3}\" y=\"{:.3}\" text-anchor=\"middle\" dominant-baseline=\"central\" font-size=\"9\">{w}</text>",
                    (px0 + px1) / 2.0,
                    (py0 + py1) / 2.0
                );
            }
        }
    }
    axes(&mut out, &x, &y, "y1", "y2", "index pairs and hard decisions");
    Ok(SvgDoc::new("plane.svg", &out, side + 1.5 * MARGIN, side + 2.0 * MARGIN))
}

fn map_2d_svg(part: &RelayPartition, relay: usize, (lo, hi): (f64, f64), n: usize) -> SvgDoc {
    let side = 480.0;
    let x = Scale::new(lo, hi, MARGIN, MARGIN + side, false);
    let y = Scale::new(lo, hi, MARGIN + side, MARGIN, false);
    let step = (hi - lo) / n as f64;
    let mut out = String::new();
    for j in 0..n {
        let yc = lo + (j as f64 + 0.5) * step;
        let mut i = 0;
        while i < n {
            let label = part.label_at(&[lo + (i as f64 + 0.5) * step, yc]);
            let mut e = i + 1;
            while e < n && part.label_at(&[lo + (e as f64 + 0.5) * step, yc]) == label {
                e += 1;
            }
            let (a, b) = (lo + i as f64 * step, lo + e as f64 * step);
            let _ = writeln!(
                out,
                "<rect class=\"cell\" data-label=\"{label}\" x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
                x.px(a),
                y.px(yc + step / 2.0),
                x.px(b) - x.px(a),
                y.px(yc - step / 2.0) - y.px(yc + step / 2.0),
                color(label)
            );
            i = e;
        }
    }
    axes(&mut out, &x, &y, "in-phase", "quadrature", &format!("relay {} regions", relay + 1));
    SvgDoc::new("map.svg", &out, side + 1.5 * MARGIN, side + 2.0 * MARGIN)
}

// ---------------------------------------------------------------- curves

/// External baseline point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayPoint {
    #[serde(default)]
    pub label: Option<String>,
    pub rate: f64,
    pub bits: f64,
}

pub fn read_overlay(path: &Path) -> Result<Vec<OverlayPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One row of the exported curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub curve: String,
    pub rate: f64,
    pub mi_exact: f64,
    pub mi_lower_bound: f64,
    pub ser_map_exact: f64,
    pub ser_mc: f64,
    pub on_hull: bool,
}

/// Upper frontier of several raw curves (the hull of their union).
pub fn frontier(curves: &[&[(f64, f64)]]) -> Vec<(f64, f64)> {
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.iter().copied()).collect();
    trainer::upper_hull(&pts).into_iter().map(|i| pts[i]).collect()
}

/// Frontier value at `x`, flat beyond its last point.
pub fn frontier_at(f: &[(f64, f64)], x: f64) -> Option<f64> {
    let last = f.last()?;
    if x >= last.0 {
        return Some(last.1);
    }
    trainer::interpolate(f, x)
}

/// Curve CSV plus MI and SER plots for the runs of a manifest rooted at `dir`.
pub fn export_curves(manifest: &Manifest, dir: &Path, overlay: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut curves: BTreeMap<CurveKey, Vec<RunRecord>> = BTreeMap::new();
    for run in manifest.runs.iter().filter(|r| r.completed) {
        let f = fs::File::open(dir.join(&run.record)).map_err(|e| Error::NotFound(format!("{}: {e}", run.record.display())))?;
        let rec: RunRecord = serde_json::from_reader(std::io::BufReader::new(f))?;
        curves.entry(run.curve.clone()).or_default().push(rec);
    }
    let overlay = overlay.map(read_overlay).transpose()?.unwrap_or_default();
    let docs = curve_docs(&curves, &overlay);
    let mut files = Vec::new();
    let rows: Vec<CurvePoint> = curves
        .iter()
        .flat_map(|(k, recs)| {
            recs.iter().filter_map(move |r| {
                r.metrics.as_ref().map(|m| CurvePoint {
                    curve: k.label(),
                    rate: m.rate,
                    mi_exact: m.mi_exact,
                    mi_lower_bound: m.mi_lower_bound,
                    ser_map_exact: m.ser_map_exact,
                    ser_mc: m.ser_mc,
                    on_hull: r.flags.on_hull,
                })
            })
        })
        .collect();
    let csv_path = dir.join("curves.csv");
    experiment::write_csv(&csv_path, &rows)?;
    files.push(csv_path);
    for d in docs {
        files.push(d.write(dir)?);
    }
    Ok(files)
}

/// MI-vs-rate and SER-vs-rate documents.
pub fn curve_docs(curves: &BTreeMap<CurveKey, Vec<RunRecord>>, overlay: &[OverlayPoint]) -> Vec<SvgDoc> {
    let metrics: Vec<(usize, &RunRecord, &RunMetrics)> = curves
        .values()
        .enumerate()
        .flat_map(|(i, recs)| recs.iter().filter_map(move |r| r.metrics.as_ref().map(|m| (i, r, m))))
        .collect();
    let max_rate = metrics
        .iter()
        .map(|(_, _, m)| m.rate)
        .chain(overlay.iter().map(|o| o.rate))
        .fold(0.5, f64::max)
        * 1.05;
    let refs: Vec<(f64, f64)> = {
        let mut v: Vec<(f64, f64)> = metrics.iter().map(|(_, _, m)| (m.mi_one_relay, m.mi_two_relays)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v.dedup();
        v
    };
    let max_mi = refs.iter().map(|r| r.1).chain(metrics.iter().map(|(_, _, m)| m.mi_exact)).fold(0.5, f64::max) * 1.05;
    let mut docs = Vec::new();

    // MI
    let x = Scale::new(0.0, max_rate, MARGIN, WIDTH - MARGIN, false);
    let y = Scale::new(0.0, max_mi, HEIGHT - MARGIN, MARGIN, false);
    let mut out = String::new();
    for (i, &(one, two)) in refs.iter().enumerate() {
        for (v, class) in [(one, "ref-one"), (two, "ref-two")] {
            let _ = writeln!(
                out,
                "<line class=\"{class}\" data-bits=\"{v}\" x1=\"{:.3}\" y1=\"{py:.3}\" x2=\"{:.3}\" y2=\"{py:.3}\" stroke=\"gray\" stroke-dasharray=\"6,3\"/>",
                x.px_lo,
                x.px_hi,
                py = y.px(v)
            );
        }
        let n = 64;
        let pts: Vec<String> = (0..=n)
            .map(|j| {
                let r = max_rate * j as f64 / n as f64;
                let cut = two.min(2.0 * r).min(one + r);
                format!("{:.3},{:.3}", x.px(r), y.px(cut))
            })
            .collect();
        let _ = writeln!(out, "<polyline class=\"cut-set\" data-ref=\"{i}\" points=\"{}\" fill=\"none\" stroke=\"gray\" stroke-dasharray=\"2,2\"/>", pts.join(" "));
    }
    series(&mut out, curves, &x, &y, |m| m.mi_exact, "mi");
    overlay_series(&mut out, overlay, &x, &y);
    legend(&mut out, curves);
    axes(&mut out, &x, &y, "average relay rate R (bits)", "I(X;U1,U2) (bits)", "mutual information vs rate");
    docs.push(SvgDoc::new("mi_vs_rate.svg", &out, WIDTH, HEIGHT));

    // SER
    let min_ser = metrics.iter().map(|(_, _, m)| m.ser_mc.max(SER_FLOOR)).fold(1.0, f64::min);
    let y = Scale::new(min_ser.min(0.5) / 2.0, 1.0, HEIGHT - MARGIN, MARGIN, true);
    let mut out = String::new();
    series(&mut out, curves, &x, &y, |m| m.ser_mc.max(SER_FLOOR), "ser");
    legend(&mut out, curves);
    axes(&mut out, &x, &y, "average relay rate R (bits)", "SER", "symbol error rate vs rate");
    docs.push(SvgDoc::new("ser_vs_rate.svg", &out, WIDTH, HEIGHT));
    docs
}

fn series(out: &mut String, curves: &BTreeMap<CurveKey, Vec<RunRecord>>, x: &Scale, y: &Scale, value: impl Fn(&RunMetrics) -> f64, kind: &str) {
    for (i, (key, recs)) in curves.iter().enumerate() {
        let col = color(i);
        let hull: Vec<String> =
            trainer::hull_curve(recs, &value).iter().map(|&(r, v)| format!("{:.3},{:.3}", x.px(r), y.px(v))).collect();
        if hull.len() > 1 {
            let _ = writeln!(out, "<polyline class=\"hull\" points=\"{}\" fill=\"none\" stroke=\"{col}\" stroke-width=\"1.5\"/>", hull.join(" "));
        }
        for m in recs.iter().filter_map(|r| r.metrics.as_ref()) {
            let v = value(m);
            let _ = writeln!(
                out,
                "<circle class=\"point\" data-curve=\"{}\" data-rate=\"{}\" data-{kind}=\"{v}\" cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"{col}\"/>",
                escape(&key.label()),
                m.rate,
                x.px(m.rate),
                y.px(v)
            );
        }
    }
}

fn overlay_series(out: &mut String, overlay: &[OverlayPoint], x: &Scale, y: &Scale) {
    for o in overlay {
        let (px, py) = (x.px(o.rate), y.px(o.bits));
        let _ = writeln!(
            out,
            "<rect class=\"overlay\" data-rate=\"{}\" data-bits=\"{}\" x=\"{:.3}\" y=\"{:.3}\" width=\"6\" height=\"6\" fill=\"none\" stroke=\"black\"><title>{}</title></rect>",
            o.rate,
            o.bits,
            px - 3.0,
            py - 3.0,
            escape(o.label.as_deref().unwrap_or("overlay"))
        );
    }
}

fn legend(out: &mut String, curves: &BTreeMap<CurveKey, Vec<RunRecord>>) {
    for (i, key) in curves.keys().enumerate() {
        let yy = MARGIN + 6.0 + 14.0 * i as f64;
        let xx = WIDTH - MARGIN - 170.0;
        let _ = writeln!(out, "<rect x=\"{xx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>", yy - 9.0, color(i));
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{yy:.1}\">{}</text>", xx + 14.0, escape(&key.label()));
    }
}

/// `data-*` attributes of every element with class `class` in `svg`.
pub fn elements_with_class(svg: &str, class: &str) -> Vec<BTreeMap<String, String>> {
    let needle = format!("class=\"{class}\"");
    svg.lines()
        .filter(|l| l.contains(&needle))
        .map(|l| {
            let mut attrs = BTreeMap::new();
            let mut rest = l;
            while let Some(i) = rest.find(" data-") {
                rest = &rest[i + 6..];
                let Some(eq) = rest.find("=\"") else { break };
                let name = rest[..eq].to_string();
                rest = &rest[eq + 2..];
                let Some(end) = rest.find('"') else { break };
                attrs.insert(name, rest[..end].to_string());
                rest = &rest[end + 1..];
            }
            attrs
        })
        .collect()
}
