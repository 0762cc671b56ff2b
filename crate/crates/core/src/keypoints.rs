//! Keypoint sets, heatmap stacks and heatmap readout.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `k` points as `(x, y)` = (column, row) with a per-point confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let confidence = vec![1.0; points.len()];
        Self { points, confidence }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            confidence: self.confidence.clone(),
        }
    }

    /// Flattened `[k, 2]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.len(), 2], |i| T::lit(self.points[i / 2][i % 2]))
    }

    pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}

/// Pixel-centre mapping between a heatmap and the image it was computed
/// from: heatmap pixel `i` covers image pixels `i*s .. (i+1)*s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridScale {
    pub stride: f64,
}

impl GridScale {
    pub fn to_image(self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] + 0.5) * self.stride - 0.5, (p[1] + 0.5) * self.stride - 0.5]
    }

    pub fn to_heatmap(self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] + 0.5) / self.stride - 0.5, (p[1] + 0.5) / self.stride - 0.5]
    }
}

/// `(k, h, w)` stack of per-keypoint maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T> {
    pub maps: Tensor<T>,
}

impl<T: Scalar> HeatmapStack<T> {
    pub fn new(maps: Tensor<T>) -> Result<Self> {
        if maps.ndim() != 3 {
            return Err(dim_err!("heatmap stack must be [k, h, w], got {:?}", maps.shape()));
        }
        Ok(Self { maps })
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn channel(&self, j: usize) -> &[T] {
        let n = self.height() * self.width();
        &self.maps.data()[j * n..(j + 1) * n]
    }
}

/// Sub-pixel strategy used after the per-channel argmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refine {
    /// Shift a quarter pixel toward the larger neighbour on each axis.
    #[default]
    QuarterOffset,
    /// Vertex of the parabola through the log-values of the peak and its
    /// neighbours; exact for sampled Gaussians.
    LogParabola,
}

/// Argmax readout with sub-pixel refinement, mapped to image coordinates.
///
/// Ties resolve to the first maximal index in row-major order. Confidence is
/// the peak value.
pub fn decode_keypoints<T: Scalar>(h: &HeatmapStack<T>, scale: GridScale, refine: Refine) -> KeypointSet {
    let (hh, ww) = (h.height(), h.width());
    let mut points = Vec::with_capacity(h.channels());
    let mut confidence = Vec::with_capacity(h.channels());
    for j in 0..h.channels() {
        let m: Vec<f64> = h.channel(j).iter().map(|v| v.to_f64_lossy()).collect();
        let mut best = 0;
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
        }
        let (r, c) = (best / ww, best % ww);
        let at = |rr: usize, cc: usize| m[rr * ww + cc];
        let peak = m[best];
        let dx = if c > 0 && c + 1 < ww {
            offset(at(r, c - 1), peak, at(r, c + 1), refine)
        } else {
            0.0
        };
        let dy = if r > 0 && r + 1 < hh {
            offset(at(r - 1, c), peak, at(r + 1, c), refine)
        } else {
            0.0
        };
        points.push(scale.to_image([c as f64 + dx, r as f64 + dy]));
        confidence.push(peak.clamp(0.0, 1.0));
    }
    KeypointSet { points, confidence }
}

fn offset(left: f64, centre: f64, right: f64, refine: Refine) -> f64 {
    match refine {
        Refine::QuarterOffset => {
            if right > left {
                0.25
            } else if left > right {
                -0.25
            } else {
                0.0
            }
        }
        Refine::LogParabola => {
            if left <= 0.0 || centre <= 0.0 || right <= 0.0 {
                return offset(left, centre, right, Refine::QuarterOffset);
            }
            let (l, c, r) = (left.ln(), centre.ln(), right.ln());
            let denom = l - 2.0 * c + r;
            if denom >= 0.0 {
                return 0.0;
            }
            (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
        }
    }
}
