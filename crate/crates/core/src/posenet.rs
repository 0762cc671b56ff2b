//! Convolutional networks around the keypoint bottleneck: shared encoder,
//! self-supervised head, appearance extractor, reconstruction decoder and
//! the plain supervised head of the feature-shared variant.
//!
//! Every function records onto a caller-supplied tape and reads weights
//! from [`Bindings`]; parameter names carry the group prefixes
//! `enc.`, `self.`, `app.`, `dec.` and `supb.`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::optim::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ENC: &str = "enc.";
pub const SELF: &str = "self.";
pub const APP: &str = "app.";
pub const DEC: &str = "dec.";
pub const SUPB: &str = "supb.";
pub const XF: &str = "xf.";

/// Architecture hyperparameters shared by all variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub k_self: usize,
    pub k_sup: usize,
    /// Channels of the shared feature map and transformer width.
    pub channels: usize,
    pub app_channels: usize,
    /// Gaussian width, in heatmap pixels, for the bottleneck and the targets.
    pub sigma: f64,
    /// Divides logits before the spatial softmax in the bottleneck.
    pub temperature: f64,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Divide attention logits by the square root of the head width.
    pub scale_attention: bool,
    pub position_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            k_self: 10,
            k_sup: 6,
            channels: 16,
            app_channels: 16,
            sigma: 1.5,
            temperature: 1.0,
            heads: 4,
            layers: 1,
            d_ff: 64,
            dropout: 0.1,
            scale_attention: false,
            position_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn heatmap_size(&self) -> usize {
        self.image_size / 4
    }

    /// Image pixels per heatmap pixel.
    pub fn stride(&self) -> f64 {
        4.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 || !self.image_size.is_multiple_of(8) {
            return bad(format!(
                "image_size must be a multiple of 8 and >= 32, got {}",
                self.image_size
            ));
        }
        if self.k_sup == 0 || self.k_self == 0 {
            return bad("keypoint counts must be positive".into());
        }
        if self.k_sup > self.k_self {
            return bad(format!(
                "k_sup ({}) must not exceed k_self ({})",
                self.k_sup, self.k_self
            ));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            ));
        }
        if self.position_encoding && !self.channels.is_multiple_of(4) {
            return bad("position encoding needs channels divisible by 4".into());
        }
        if !(self.sigma > 0.0) || !(self.temperature > 0.0) {
            return bad("sigma and temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.layers == 0 || self.d_ff == 0 || self.channels == 0 || self.app_channels == 0 {
            return bad("layer and width counts must be positive".into());
        }
        Ok(())
    }
}

/// Which supervised branch a model trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder plus supervised head, no self-supervised task.
    Baseline,
    /// Self-supervised task and supervised head share the encoder.
    #[serde(rename = "feat_shared_keypoint", alias = "feat_shared")]
    FeatShared,
    /// Supervised heatmaps are an affinity-weighted mix of the
    /// self-supervised ones.
    #[serde(rename = "transformer_keypoint", alias = "transformer")]
    Transformer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::FeatShared, Variant::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FeatShared => "feat_shared",
            Variant::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Variant::Baseline),
            "feat_shared" | "feat_shared_keypoint" => Some(Variant::FeatShared),
            "transformer" | "transformer_keypoint" => Some(Variant::Transformer),
            _ => None,
        }
    }

    pub fn has_self_task(self) -> bool {
        self != Variant::Baseline
    }

    /// Parameter groups a model of this variant owns.
    pub fn groups(self) -> &'static [&'static str] {
        match self {
            Variant::Baseline => &[ENC, SUPB],
            Variant::FeatShared => &[ENC, SELF, APP, DEC, SUPB],
            Variant::Transformer => &[ENC, SELF, APP, DEC, XF],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `(name, stride)` of each 3x3 encoder conv; `up` is preceded by 2x
/// nearest upsampling.
const ENCODER: [(&str, usize); 5] = [("c1", 2), ("c2", 2), ("c3", 2), ("c4", 1), ("up", 1)];

fn encoder_channels(cfg: &ModelConfig) -> [(usize, usize); 5] {
    let c = cfg.channels;
    let c1 = (c / 2).max(1);
    [(c1, 3), (c, c1), (c, c), (c, c), (c, c)]
}

fn decoder_channels(cfg: &ModelConfig) -> [(&'static str, usize, usize); 4] {
    let c = cfg.channels;
    [
        ("kp", c, cfg.k_self),
        ("c1", c, c + cfg.app_channels),
        ("c2", (c / 2).max(1), c),
        ("c3", 3, (c / 2).max(1)),
    ]
}

fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[c_out, c_in, k, k], std, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))
}

/// Adds the convolutional groups listed in `groups`.
pub fn init_conv_groups<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    groups: &[&str],
    rng: &mut impl Rng,
) -> Result<()> {
    let c = cfg.channels;
    for &g in groups {
        match g {
            ENC => {
                for ((name, _), (co, ci)) in ENCODER.iter().zip(encoder_channels(cfg)) {
                    add_conv(store, &format!("{ENC}{name}"), co, ci, 3, rng)?;
                }
            }
            SELF => add_conv(store, &format!("{SELF}head"), cfg.k_self, c, 3, rng)?,
            APP => {
                let c1 = (cfg.app_channels / 2).max(1);
                add_conv(store, &format!("{APP}c1"), c1, 3, 3, rng)?;
                add_conv(store, &format!("{APP}c2"), cfg.app_channels, c1, 3, rng)?;
            }
            DEC => {
                for (name, co, ci) in decoder_channels(cfg) {
                    add_conv(store, &format!("{DEC}{name}"), co, ci, 3, rng)?;
                }
            }
            SUPB => add_conv(store, &format!("{SUPB}head"), cfg.k_sup, c, 3, rng)?,
            _ => {}
        }
    }
    Ok(())
}

/// 3x3 same-padded conv with bias.
pub fn conv<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, b[format!("{name}.w").as_str()], stride, 1)?;
    tape.add_channel(y, b[format!("{name}.b").as_str()])
}

/// Shared encoder: `[3, H, W]` to `[c, H/4, W/4]`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let s = tape.shape(image);
    if s != [3, cfg.image_size, cfg.image_size] {
        return Err(dim_err!("encoder expects [3, {0}, {0}], got {1:?}", cfg.image_size, s));
    }
    let mut x = image;
    for (i, (name, stride)) in ENCODER.iter().enumerate() {
        if *name == "up" {
            x = tape.upsample_nearest(x, 2)?;
        }
        x = conv(tape, b, &format!("{ENC}{name}"), x, *stride)?;
        if i + 1 < ENCODER.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Raw self-supervised heatmap logits `[k_self, h, w]`.
pub fn self_head<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, f: Var) -> Result<Var> {
    let x = tape.relu(f)?;
    conv(tape, b, &format!("{SELF}head"), x, 1)
}

/// Supervised head of the feature-shared variant, `[k_sup, h, w]`.
pub fn baseline_sup_head<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, f: Var) -> Result<Var> {
    let x = tape.relu(f)?;
    conv(tape, b, &format!("{SUPB}head"), x, 1)
}

/// `[h*w, 2]` grid whose row `r*w + c` is `(x, y) = (c, r)`.
pub fn coordinate_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h * w, 2], |i| {
        let p = i / 2;
        T::lit(if i % 2 == 0 { (p % w) as f64 } else { (p / w) as f64 })
    })
}

/// Output of the spatial-softmax readout.
#[derive(Clone, Copy, Debug)]
pub struct Condensed {
    /// `[k, 2]` expected `(x, y)` in heatmap pixels.
    pub coords: Var,
    /// `[k, h*w]` per-channel spatial distributions.
    pub probs: Var,
}

/// Spatial softmax of each channel followed by the expectation of the pixel
/// coordinates under it.
pub fn condense<T: Scalar>(tape: &mut Tape<T>, heatmaps: Var, temperature: f64) -> Result<Condensed> {
    let s = tape.shape(heatmaps).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("condense expects [k, h, w], got {s:?}"));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(heatmaps, &[k, h * w])?;
    let flat = if temperature == 1.0 {
        flat
    } else {
        tape.scale(flat, T::lit(1.0 / temperature))?
    };
    let probs = tape.softmax(flat, 1)?;
    let grid = tape.constant(coordinate_grid(h, w));
    let coords = tape.matmul(probs, grid)?;
    Ok(Condensed { coords, probs })
}

/// Per-channel peak of the spatial distributions, used as confidence.
pub fn peak_confidence<T: Scalar>(tape: &Tape<T>, c: &Condensed) -> Vec<f64> {
    let p = tape.value(c.probs);
    let n = p.shape()[1];
    p.data()
        .chunks(n)
        .map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy())))
        .collect()
}

/// Unit-peak Gaussians of width `sigma` at `coords[k, 2]`.
pub fn gaussian_rerender<T: Scalar>(tape: &mut Tape<T>, coords: Var, sigma: f64, h: usize, w: usize) -> Result<Var> {
    tape.gaussian_maps(coords, T::lit(sigma), h, w)
}

/// Appearance features `[c_app, H/4, W/4]` of a source image.
pub fn appearance_extract<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, image: Var) -> Result<Var> {
    let x = conv(tape, b, &format!("{APP}c1"), image, 2)?;
    let x = tape.relu(x)?;
    let x = conv(tape, b, &format!("{APP}c2"), x, 2)?;
    tape.relu(x)
}

/// Reconstructs an image from appearance features and rendered keypoint
/// maps. The maps pass through one conv (the keypoint encoder) before
/// channel concatenation; both inputs must share a spatial grid.
pub fn render_decode<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, f_app: Var, f_kp: Var) -> Result<Var> {
    let (sa, sk) = (tape.shape(f_app).to_vec(), tape.shape(f_kp).to_vec());
    if sa.len() != 3 || sk.len() != 3 || sa[1..] != sk[1..] {
        return Err(dim_err!(
            "render_decode grids differ: appearance {sa:?}, keypoints {sk:?}"
        ));
    }
    let kp = conv(tape, b, &format!("{DEC}kp"), f_kp, 1)?;
    let kp = tape.relu(kp)?;
    let x = tape.concat0(&[f_app, kp])?;
    let x = conv(tape, b, &format!("{DEC}c1"), x, 1)?;
    let x = tape.relu(x)?;
    let x = tape.upsample_nearest(x, 2)?;
    let x = conv(tape, b, &format!("{DEC}c2"), x, 1)?;
    let x = tape.relu(x)?;
    let x = tape.upsample_nearest(x, 2)?;
    let x = conv(tape, b, &format!("{DEC}c3"), x, 1)?;
    tape.sigmoid(x)
}

/// Intermediate values of the self-supervised path for one target.
#[derive(Clone, Copy, Debug)]
pub struct SelfPath {
    pub features: Var,
    pub heatmaps: Var,
    pub condensed: Condensed,
    pub rendered: Var,
}

/// Encoder, self head, condensation and Gaussian rerendering of a target.
pub fn self_path<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, cfg: &ModelConfig, target: Var) -> Result<SelfPath> {
    let features = encode(tape, b, cfg, target)?;
    let heatmaps = self_head(tape, b, features)?;
    let condensed = condense(tape, heatmaps, cfg.temperature)?;
    let hm = cfg.heatmap_size();
    let rendered = gaussian_rerender(tape, condensed.coords, cfg.sigma, hm, hm)?;
    Ok(SelfPath {
        features,
        heatmaps,
        condensed,
        rendered,
    })
}

/// Reconstruction of `target` from its keypoints and `source`'s appearance.
pub fn reconstruct<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, path: &SelfPath, source: Var) -> Result<Var> {
    let app = appearance_extract(tape, b, source)?;
    render_decode(tape, b, app, path.rendered)
}
