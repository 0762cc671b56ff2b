//! Pose metrics, improvement curves, temporal smoothing, visualization and
//! report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::Tensor;

/// Per-joint correctness under the half-torso rule: joint `j` is correct
/// when its error is at most half the ground-truth distance between the
/// two torso joints. `None` for a zero-length torso.
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, torso_pair: (usize, usize)) -> Option<Vec<bool>> {
    assert_eq!(pred.len(), gt.len(), "pck: keypoint counts differ");
    let torso = KeypointSet::distance(gt.points[torso_pair.0], gt.points[torso_pair.1]);
    if !(torso > 0.0) {
        warn!("degenerate torso, frame excluded from PCK");
        return None;
    }
    let thr = 0.5 * torso;
    Some(
        pred.points
            .iter()
            .zip(&gt.points)
            .map(|(p, g)| KeypointSet::distance(*p, *g) <= thr)
            .collect(),
    )
}

/// Correct when within `d` pixels.
pub fn acc_within_d(pred: &KeypointSet, gt: &KeypointSet, d: f64) -> Vec<bool> {
    assert_eq!(pred.len(), gt.len(), "acc_within_d: keypoint counts differ");
    pred.points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| KeypointSet::distance(*p, *g) <= d)
        .collect()
}

/// Distance threshold for an image of `size` pixels, scaled from 6 px at 128.
pub fn default_d(size: usize) -> f64 {
    6.0 * size as f64 / 128.0
}

/// Which per-joint test [`evaluate`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pck { torso: (usize, usize) },
    AccWithin { d: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// One entry per evaluated frame; excluded frames are `None`.
    pub flags: Vec<Option<Vec<bool>>>,
    /// Percentage of correct joints over all evaluated frames.
    pub mean: f64,
    pub per_joint: Vec<f64>,
}

impl EvalResult {
    /// Percentage correct of one frame, if it was evaluated.
    pub fn frame_score(&self, i: usize) -> Option<f64> {
        self.flags[i]
            .as_ref()
            .map(|f| percent(f.iter().filter(|&&b| b).count(), f.len()))
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

pub fn evaluate(preds: &[KeypointSet], gts: &[KeypointSet], metric: Metric) -> EvalResult {
    assert_eq!(preds.len(), gts.len(), "evaluate: frame counts differ");
    let flags: Vec<Option<Vec<bool>>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match metric {
            Metric::Pck { torso } => pck(p, g, torso),
            Metric::AccWithin { d } => Some(acc_within_d(p, g, d)),
        })
        .collect();
    let k = gts.first().map(|g| g.len()).unwrap_or(0);
    let mut hits = vec![0usize; k];
    let mut frames = 0usize;
    for f in flags.iter().flatten() {
        frames += 1;
        for (h, &b) in hits.iter_mut().zip(f) {
            *h += b as usize;
        }
    }
    let per_joint: Vec<f64> = hits.iter().map(|&h| percent(h, frames)).collect();
    let mean = percent(hits.iter().sum(), frames * k);
    EvalResult { flags, mean, per_joint }
}

/// A metric against an increasing x axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub window: Option<usize>,
}

impl Curve {
    pub fn new(x: Vec<f64>, y: Vec<f64>, window: Option<usize>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Argument("curve axes differ in length".into()));
        }
        if x.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("curve x values must increase strictly".into()));
        }
        Ok(Self { x, y, window })
    }

    pub fn to_csv(&self, x_name: &str, y_name: &str) -> String {
        let mut s = format!("{x_name},{y_name}\n");
        for (x, y) in self.x.iter().zip(&self.y) {
            let _ = writeln!(s, "{},{:.4}", fmt_x(*x), y);
        }
        s
    }
}

fn fmt_x(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x:.4}")
    }
}

/// Moving-average window of improvement curves.
pub const CURVE_WINDOW: usize = 5;
/// Savitzky–Golay window and degree.
pub const SAVGOL_WINDOW: usize = 7;
pub const SAVGOL_POLY: usize = 2;

/// Centred moving average, clipped at the series ends so that edge points
/// average only the neighbours that exist.
pub fn moving_average(y: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..y.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(y.len());
            y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Frame-wise gap between two sets of per-frame scores, averaged across
/// subjects and then smoothed by a moving average.
///
/// Each inner vector holds one subject's per-frame scores; all subjects
/// must have the same length in both traces.
pub fn improvement_curve(ttp: &[Vec<f64>], baseline: &[Vec<f64>], window: usize) -> Result<Curve> {
    if ttp.len() != baseline.len() || ttp.is_empty() {
        return Err(Error::Argument(
            "improvement curve needs matching, non-empty traces".into(),
        ));
    }
    let n = ttp[0].len();
    if ttp.iter().chain(baseline).any(|t| t.len() != n) {
        return Err(Error::Argument("improvement curve traces differ in length".into()));
    }
    let gap: Vec<f64> = (0..n)
        .map(|i| ttp.iter().zip(baseline).map(|(a, b)| a[i] - b[i]).sum::<f64>() / ttp.len() as f64)
        .collect();
    Curve::new(
        (0..n).map(|i| i as f64).collect(),
        moving_average(&gap, window),
        Some(window),
    )
}

/// Savitzky–Golay smoothing of one series: each output is the value at the
/// centre sample of a degree-`poly` least-squares fit over the window. Near
/// the ends the window is clipped to the series. A window longer than the
/// series leaves it unchanged.
pub fn savgol_smooth(series: &[f64], window: usize, poly: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || poly >= window {
        return Err(Error::Argument(format!(
            "savgol needs an odd window larger than the degree, got window {window}, degree {poly}"
        )));
    }
    if window > series.len() {
        warn!(
            "savgol window {window} exceeds series length {}; passing through",
            series.len()
        );
        return Ok(series.to_vec());
    }
    let half = window / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let m = hi - lo;
        let deg = poly.min(m - 1);
        let a = DMatrix::from_fn(m, deg + 1, |r, c| ((lo + r) as f64 - i as f64).powi(c as i32));
        let b = DVector::from_iterator(m, series[lo..hi].iter().copied());
        let coef = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::State(format!("savgol least squares failed: {e}")))?;
        out.push(coef[0]);
    }
    Ok(out)
}

/// Smooths every coordinate of every joint along time.
pub fn smooth_predictions(preds: &[KeypointSet], window: usize, poly: usize) -> Result<Vec<KeypointSet>> {
    let Some(first) = preds.first() else {
        return Ok(Vec::new());
    };
    let mut out = preds.to_vec();
    for j in 0..first.len() {
        for axis in 0..2 {
            let s: Vec<f64> = preds.iter().map(|p| p.points[j][axis]).collect();
            for (o, v) in out.iter_mut().zip(savgol_smooth(&s, window, poly)?) {
                o.points[j][axis] = v;
            }
        }
    }
    Ok(out)
}

/// Pairs `(i, j)` with `W[i, j] > threshold`.
pub fn arrows(w: &Tensor, threshold: f64) -> Vec<(usize, usize)> {
    let cols = w.shape()[1];
    w.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| (i / cols, i % cols))
        .collect()
}

/// Inputs of one visualization panel set, all points in image pixels.
pub struct VisInput<'a> {
    pub image: &'a Tensor,
    pub self_points: &'a KeypointSet,
    pub sup_points: &'a KeypointSet,
    /// `[k_sup, k_self]` affinity, if the model has one.
    pub affinity: Option<&'a Tensor>,
    pub reconstruction: Option<&'a Tensor>,
}

/// Draws keypoints and correspondence arrows over the frame, with the
/// reconstruction (when given) in a second panel, and writes a PNG.
/// Self-supervised points are shaded by contribution score, supervised ones
/// by confidence. Returns the number of arrows drawn.
pub fn render_visualization(input: &VisInput<'_>, threshold: f64, scale: usize, path: &Path) -> Result<usize> {
    let size = input.image.shape()[1];
    let panels = if input.reconstruction.is_some() { 2 } else { 1 };
    let (w, h) = ((size * scale * panels) as u32, (size * scale) as u32);
    let mut canvas = image::RgbImage::new(w, h);
    let blit = |canvas: &mut image::RgbImage, img: &Tensor, ox: usize| {
        let plane = size * size;
        for y in 0..size * scale {
            for x in 0..size * scale {
                let (sy, sx) = (y / scale, x / scale);
                let px =
                    [0, 1, 2].map(|c| (img.data()[c * plane + sy * size + sx].clamp(0.0, 1.0) * 255.0).round() as u8);
                canvas.put_pixel((ox + x) as u32, y as u32, image::Rgb(px));
            }
        }
    };
    blit(&mut canvas, input.image, 0);
    if let Some(r) = input.reconstruction {
        blit(&mut canvas, r, size * scale);
    }
    let to_canvas = |p: [f64; 2]| [(p[0] + 0.5) * scale as f64, (p[1] + 0.5) * scale as f64];
    let mut count = 0;
    if let Some(aff) = input.affinity {
        let contrib = crate::transformer::contribution_scores(aff)?;
        let max_c = contrib.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        for (i, j) in arrows(aff, threshold) {
            let a = to_canvas(input.self_points.points[j]);
            let b = to_canvas(input.sup_points.points[i]);
            draw_line(&mut canvas, a, b, [255, 255, 0]);
            count += 1;
        }
        for (j, p) in input.self_points.points.iter().enumerate() {
            let t = contrib[j] / max_c;
            let c = [(255.0 * t) as u8, 64, (255.0 * (1.0 - t)) as u8];
            draw_disc(&mut canvas, to_canvas(*p), 1.5 * scale as f64 / 2.0, c);
        }
    } else {
        for p in &input.self_points.points {
            draw_disc(&mut canvas, to_canvas(*p), 1.5 * scale as f64 / 2.0, [0, 160, 255]);
        }
    }
    for (i, p) in input.sup_points.points.iter().enumerate() {
        let conf = input
            .sup_points
            .confidence
            .get(i)
            .copied()
            .unwrap_or(1.0)
            .clamp(0.0, 1.0);
        let g = (96.0 + 159.0 * conf) as u8;
        draw_disc(&mut canvas, to_canvas(*p), scale as f64, [g, g, g]);
    }
    canvas.save(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(count)
}

fn draw_disc(img: &mut image::RgbImage, c: [f64; 2], r: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, x1) = ((c[0] - r).floor() as i64, (c[0] + r).ceil() as i64);
    let (y0, y1) = ((c[1] - r).floor() as i64, (c[1] + r).ceil() as i64);
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
}

fn draw_line(img: &mut image::RgbImage, a: [f64; 2], b: [f64; 2], color: [u8; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
    // arrow head: a small disc at the supervised end
    draw_disc(img, b, 1.5, color);
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub scenario: String,
    pub mean: f64,
    pub smoothed: Option<f64>,
}

/// Scenario name of plain inference.
pub const NO_TTP: &str = "none";

fn scenario_rank(s: &str) -> usize {
    match s {
        NO_TTP => 0,
        "online" => 1,
        "offline" => 2,
        _ => 3,
    }
}

fn variant_rank(v: &str) -> usize {
    match v {
        "baseline" => 0,
        "feat_shared" => 1,
        "transformer" => 2,
        _ => 3,
    }
}

/// Results table: one line per (variant, scenario), with the signed gap to
/// the baseline without personalization, and the smoothed score and its gap
/// to the unsmoothed one when smoothing was applied.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        (
            variant_rank(&a.variant),
            &a.variant,
            scenario_rank(&a.scenario),
            &a.scenario,
        )
            .cmp(&(
                variant_rank(&b.variant),
                &b.variant,
                scenario_rank(&b.scenario),
                &b.scenario,
            ))
    });
    let base = rows
        .iter()
        .find(|r| r.variant == "baseline" && r.scenario == NO_TTP)
        .map(|r| r.mean);
    let smooth = rows.iter().any(|r| r.smoothed.is_some());
    let mut s = String::from("variant,scenario,mpck,delta_vs_baseline");
    if smooth {
        s.push_str(",mpck_smoothed,delta_smoothing");
    }
    s.push('\n');
    let signed = |v: f64| {
        let v = if v.abs() < 5e-5 { 0.0 } else { v };
        format!("{v:+.4}")
    };
    for r in &rows {
        let _ = write!(s, "{},{},{:.4},", r.variant, r.scenario, r.mean);
        s.push_str(&base.map(|b| signed(r.mean - b)).unwrap_or_default());
        if smooth {
            match r.smoothed {
                Some(v) => {
                    let _ = write!(s, ",{v:.4},{}", signed(v - r.mean));
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `report.csv` and one `curve_<name>.csv` per curve into `out_dir`.
pub fn emit_report(
    rows: &[ReportRow],
    curves: &BTreeMap<String, (Curve, String, String)>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("report.csv");
    std::fs::write(&path, report_csv(rows)).map_err(|e| Error::io(&path, e))?;
    for (name, (curve, xn, yn)) in curves {
        let path = out_dir.join(format!("curve_{name}.csv"));
        std::fs::write(&path, curve.to_csv(xn, yn)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
