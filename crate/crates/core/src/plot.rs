//! SVG figures: rollout heatmaps, RSV profiles and loss curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{RolloutMatrix, RsvProfile};
use crate::dataio::format::{csv_err, csv_writer, read_csv};
use crate::dataio::{Modality, N_MODALITIES, TOKENS_PER_MODALITY};
use crate::error::{Error, Result};
use crate::mae::EpochLog;

/// Display cap used for rollout heatmaps.
pub const DEFAULT_CAP: f64 = 0.03;

const COLORS: [&str; N_MODALITIES] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, comment: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(body, "<!-- {} -->", comment.replace("--", "-"));
        Svg { body, width, height }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            escape(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White to dark blue.
fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0))
}

/// Heatmap of a rollout. With `cap`, colours saturate at that value; the
/// matrix itself is not modified.
pub fn heatmap_svg(r: &RolloutMatrix, cap: Option<f64>, comment: &str) -> Result<String> {
    let n = r.n();
    if n == 0 {
        return Err(Error::InvalidArgument("empty rollout".into()));
    }
    let top = cap.unwrap_or_else(|| r.values.data().iter().copied().fold(0.0, f64::max)).max(1e-12);
    let cell = (480.0 / n as f64).max(2.0);
    let (ox, oy) = (70.0, 40.0);
    let side = cell * n as f64;
    let mut svg = Svg::new(ox + side + 30.0, oy + side + 60.0, comment);
    svg.text(ox + side / 2.0, 22.0, 14.0, "middle", &format!("attention rollout (colour cap {top:.3})"));
    for i in 0..n {
        for j in 0..n {
            let _ = writeln!(
                svg.body,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"/>"#,
                ox + j as f64 * cell,
                oy + i as f64 * cell,
                shade(r.values.get2(i, j) / top)
            );
        }
    }
    // modality boundaries when the tags are in canonical blocks
    let canonical = r.tags.iter().enumerate().all(|(i, t)| t.index() == i) && n % TOKENS_PER_MODALITY == 0;
    if canonical {
        for b in 0..n / TOKENS_PER_MODALITY {
            let at = (b * TOKENS_PER_MODALITY) as f64 * cell;
            if b > 0 {
                svg.line(ox + at, oy, ox + at, oy + side, "#888");
                svg.line(ox, oy + at, ox + side, oy + at, "#888");
            }
            let mid = at + TOKENS_PER_MODALITY as f64 * cell / 2.0;
            let name = Modality::ALL[b].name();
            svg.text(ox + mid, oy + side + 16.0, 11.0, "middle", name);
            svg.text(ox - 6.0, oy + mid + 4.0, 11.0, "end", name);
        }
    }
    svg.text(ox + side / 2.0, oy + side + 40.0, 12.0, "middle", "input token");
    svg.text(16.0, oy + side / 2.0, 12.0, "middle", "output token");
    Ok(svg.finish())
}

struct Axes {
    ox: f64,
    oy: f64,
    w: f64,
    h: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(1e-12);
        self.ox + (x - self.x.0) / span * self.w
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(1e-12);
        self.oy + self.h - (y - self.y.0) / span * self.h
    }

    fn draw(&self, svg: &mut Svg, xlabel: &str, ylabel: &str) {
        svg.line(self.ox, self.oy + self.h, self.ox + self.w, self.oy + self.h, "black");
        svg.line(self.ox, self.oy, self.ox, self.oy + self.h, "black");
        for k in 0..=4 {
            let fy = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let fx = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            svg.text(self.ox - 6.0, self.py(fy) + 4.0, 10.0, "end", &format!("{fy:.3}"));
            svg.text(self.px(fx), self.oy + self.h + 14.0, 10.0, "middle", &format!("{fx:.0}"));
        }
        svg.text(self.ox + self.w / 2.0, self.oy + self.h + 34.0, 12.0, "middle", xlabel);
        let (lx, ly) = (14.0, self.oy + self.h / 2.0);
        let _ = writeln!(
            svg.body,
            r#"<text x="{lx}" y="{ly:.1}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 {lx} {ly:.1})">{}</text>"#,
            escape(ylabel)
        );
    }

    fn polyline(&self, svg: &mut Svg, pts: &[(f64, f64)], stroke: &str) {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let _ = writeln!(
            svg.body,
            r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 0.05, hi + 0.05)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Per-layer mean RSV of each modality with 95% interval bands.
pub fn rsv_svg(p: &RsvProfile, comment: &str) -> Result<String> {
    if p.layers.is_empty() {
        return Err(Error::InvalidArgument("empty RSV profile".into()));
    }
    let lo = p.layers.iter().flat_map(|l| l.ci.iter().map(|c| c.0)).fold(f64::INFINITY, f64::min);
    let hi = p.layers.iter().flat_map(|l| l.ci.iter().map(|c| c.1)).fold(f64::NEG_INFINITY, f64::max);
    let ax = Axes {
        ox: 70.0,
        oy: 40.0,
        w: 420.0,
        h: 260.0,
        x: (1.0, p.layers.len().max(2) as f64),
        y: padded(lo.min(0.25), hi.max(0.25)),
    };
    let mut svg = Svg::new(620.0, 360.0, comment);
    svg.text(280.0, 22.0, 14.0, "middle", "relative source variance");
    ax.draw(&mut svg, "layer", "RSV");
    for m in 0..N_MODALITIES {
        let upper: Vec<(f64, f64)> = p.layers.iter().enumerate().map(|(l, r)| ((l + 1) as f64, r.ci[m].1)).collect();
        let lower: Vec<(f64, f64)> = p.layers.iter().enumerate().map(|(l, r)| ((l + 1) as f64, r.ci[m].0)).collect();
        let band: Vec<String> = upper
            .iter()
            .chain(lower.iter().rev())
            .map(|&(x, y)| format!("{:.2},{:.2}", ax.px(x), ax.py(y)))
            .collect();
        let _ = writeln!(svg.body, r#"<polygon fill="{}" fill-opacity="0.2" points="{}"/>"#, COLORS[m], band.join(" "));
        let mean: Vec<(f64, f64)> = p.layers.iter().enumerate().map(|(l, r)| ((l + 1) as f64, r.mean[m])).collect();
        ax.polyline(&mut svg, &mean, COLORS[m]);
        svg.text(510.0, 60.0 + 18.0 * m as f64, 12.0, "start", Modality::ALL[m].name());
        svg.line(495.0, 56.0 + 18.0 * m as f64, 507.0, 56.0 + 18.0 * m as f64, COLORS[m]);
    }
    Ok(svg.finish())
}

/// Named `(x, y)` series on shared axes.
pub fn lines_svg(series: &[(String, Vec<(f64, f64)>)], title: &str, xlabel: &str, ylabel: &str, comment: &str) -> Result<String> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.1.is_finite()).collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let fold = |f: fn(&(f64, f64)) -> f64, init: f64, op: fn(f64, f64) -> f64| pts.iter().map(f).fold(init, op);
    let x = (fold(|p| p.0, f64::INFINITY, f64::min), fold(|p| p.0, f64::NEG_INFINITY, f64::max));
    let y = padded(fold(|p| p.1, f64::INFINITY, f64::min), fold(|p| p.1, f64::NEG_INFINITY, f64::max));
    let ax = Axes { ox: 70.0, oy: 40.0, w: 420.0, h: 260.0, x: if x.1 > x.0 { x } else { (x.0, x.0 + 1.0) }, y };
    let mut svg = Svg::new(620.0, 360.0, comment);
    svg.text(280.0, 22.0, 14.0, "middle", title);
    ax.draw(&mut svg, xlabel, ylabel);
    for (k, (name, s)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let finite: Vec<(f64, f64)> = s.iter().copied().filter(|p| p.1.is_finite()).collect();
        ax.polyline(&mut svg, &finite, c);
        svg.text(510.0, 60.0 + 18.0 * k as f64, 12.0, "start", name);
        svg.line(495.0, 56.0 + 18.0 * k as f64, 507.0, 56.0 + 18.0 * k as f64, c);
    }
    Ok(svg.finish())
}

/// Columns `epoch,lr,train_loss,val_loss`; a missing validation loss is empty.
pub fn write_loss_csv(path: &Path, logs: &[EpochLog], comments: &[String]) -> Result<()> {
    let mut w = csv_writer(path, comments)?;
    w.write_record(["epoch", "lr", "train_loss", "val_loss"]).map_err(|e| csv_err(path, e))?;
    for l in logs {
        let val = l.val_loss.map_or_else(String::new, |v| format!("{v:.9}"));
        w.write_record([l.epoch.to_string(), format!("{:.9e}", l.lr), format!("{:.9}", l.train_loss), val])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let (header, rows) = read_csv(path)?;
    if header != ["epoch", "lr", "train_loss", "val_loss"] {
        return Err(Error::format(path, "not a loss curve file"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
    rows.iter()
        .map(|r| {
            Ok(EpochLog {
                epoch: r[0].parse().map_err(|_| Error::format(path, "bad epoch"))?,
                lr: num(&r[1])?,
                train_loss: num(&r[2])?,
                val_loss: if r[3].is_empty() { None } else { Some(num(&r[3])?) },
            })
        })
        .collect()
}

pub fn loss_svg(logs: &[EpochLog], comment: &str) -> Result<String> {
    let mut series = vec![("train".to_string(), logs.iter().map(|l| (l.epoch as f64, l.train_loss)).collect())];
    if logs.iter().any(|l| l.val_loss.is_some()) {
        series.push((
            "validation".to_string(),
            logs.iter().filter_map(|l| l.val_loss.map(|v| (l.epoch as f64, v))).collect(),
        ));
    }
    lines_svg(&series, "pretraining loss", "epoch", "loss", comment)
}
