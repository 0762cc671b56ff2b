//! Transformer decoder that turns learnable supervised-keypoint queries and
//! image features into an affinity matrix over the self-supervised
//! keypoints, and the heatmap mixing it drives.
//!
//! Parameters live under `xf.`: `xf.q_sup`, per layer `xf.l<i>.{tq,tk,tv,lo}`,
//! `xf.l<i>.ln1.{g,b}`, `xf.l<i>.ff1.{w,b}`, `xf.l<i>.ff2.{w,b}`,
//! `xf.l<i>.ln2.{g,b}`, and the final projection `xf.p`.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::optim::{Bindings, ParamStore};
use crate::posenet::{ModelConfig, XF};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const QUERY_STD: f64 = 0.02;

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let c = cfg.channels;
    let lin = |n_in: usize| (1.0 / n_in as f64).sqrt();
    store.insert(format!("{XF}q_sup"), Tensor::randn(&[cfg.k_sup, c], QUERY_STD, rng))?;
    for l in 0..cfg.layers {
        let p = format!("{XF}l{l}.");
        for m in ["tq", "tk", "tv", "lo"] {
            store.insert(format!("{p}{m}"), Tensor::randn(&[c, c], lin(c), rng))?;
        }
        store.insert(format!("{p}ln1.g"), Tensor::ones(&[c]))?;
        store.insert(format!("{p}ln1.b"), Tensor::zeros(&[c]))?;
        store.insert(format!("{p}ff1.w"), Tensor::randn(&[c, cfg.d_ff], lin(c), rng))?;
        store.insert(format!("{p}ff1.b"), Tensor::zeros(&[cfg.d_ff]))?;
        store.insert(format!("{p}ff2.w"), Tensor::randn(&[cfg.d_ff, c], lin(cfg.d_ff), rng))?;
        store.insert(format!("{p}ff2.b"), Tensor::zeros(&[c]))?;
        store.insert(format!("{p}ln2.g"), Tensor::ones(&[c]))?;
        store.insert(format!("{p}ln2.b"), Tensor::zeros(&[c]))?;
    }
    store.insert(format!("{XF}p"), Tensor::randn(&[c, cfg.k_self], lin(c), rng))
}

/// Fixed 2-D sinusoidal encoding `[h*w, c]`: the first half of the channels
/// encodes the row, the second half the column, as interleaved sin/cos
/// pairs over geometrically spaced frequencies.
pub fn position_encoding<T: Scalar>(c: usize, h: usize, w: usize) -> Tensor<T> {
    let half = c / 2;
    let pairs = half / 2;
    Tensor::from_fn(&[h * w, c], |i| {
        let (tok, ch) = (i / c, i % c);
        let (pos, local) = if ch < half {
            ((tok / w) as f64, ch)
        } else {
            ((tok % w) as f64, ch - half)
        };
        if local >= 2 * pairs {
            return T::zero();
        }
        let freq = 1.0 / 10000f64.powf((local / 2) as f64 / pairs as f64);
        T::lit(if local % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

/// Flattens `[c, h, w]` into `n = h*w` row-major tokens `[n, c]`,
/// optionally adding the position encoding.
pub fn tokenize<T: Scalar>(tape: &mut Tape<T>, f: Var, with_position: bool) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("tokenize expects [c, h, w], got {s:?}"));
    }
    let flat = tape.reshape(f, &[s[0], s[1] * s[2]])?;
    let tokens = tape.transpose(flat)?;
    if !with_position {
        return Ok(tokens);
    }
    let pe = tape.constant(position_encoding(s[0], s[1], s[2]));
    tape.add(tokens, pe)
}

/// `softmax((q tq)(f tk)^T [/ sqrt(d)]) (f tv)` with row-wise softmax.
/// Returns the attended values and the attention matrix.
pub fn single_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_sup: Var,
    f_tok: Var,
    tq: Var,
    tk: Var,
    tv: Var,
    scale: bool,
) -> Result<(Var, Var)> {
    let q = tape.matmul(q_sup, tq)?;
    let k = tape.matmul(f_tok, tk)?;
    let v = tape.matmul(f_tok, tv)?;
    attend(tape, q, k, v, scale)
}

fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale: bool) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let mut logits = tape.matmul(q, kt)?;
    if scale {
        let d = tape.shape(q)[1] as f64;
        logits = tape.scale(logits, T::lit(1.0 / d.sqrt()))?;
    }
    let a = tape.softmax(logits, 1)?;
    Ok((tape.matmul(a, v)?, a))
}

/// Per-layer switches that do not live in the parameter store.
pub struct Mode<'a, R: Rng> {
    pub training: bool,
    pub rng: &'a mut R,
}

fn pname(layer: usize, name: &str) -> String {
    format!("{XF}l{layer}.{name}")
}

/// Multi-head cross-attention from the queries to the tokens, then output
/// projection, dropout, residual and LayerNorm. Queries, keys and values
/// are projected at full width and split into `heads` column blocks.
pub fn multi_head_attention<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    layer: usize,
    q_sup: Var,
    f_tok: Var,
    mode: &mut Mode<'_, R>,
) -> Result<Var> {
    let c = tape.shape(q_sup)[1];
    if cfg.heads == 0 || !c.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!(
            "width {c} is not divisible by {} heads",
            cfg.heads
        )));
    }
    let d = c / cfg.heads;
    let q = tape.matmul(q_sup, b[pname(layer, "tq").as_str()])?;
    let k = tape.matmul(f_tok, b[pname(layer, "tk").as_str()])?;
    let v = tape.matmul(f_tok, b[pname(layer, "tv").as_str()])?;
    let mut outs = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let qm = tape.slice_cols(q, m * d, d)?;
        let km = tape.slice_cols(k, m * d, d)?;
        let vm = tape.slice_cols(v, m * d, d)?;
        outs.push(attend(tape, qm, km, vm, cfg.scale_attention)?.0);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let proj = tape.matmul(cat, b[pname(layer, "lo").as_str()])?;
    let proj = tape.dropout(proj, cfg.dropout, mode.training, mode.rng)?;
    let res = tape.add(q_sup, proj)?;
    tape.layer_norm(
        res,
        b[pname(layer, "ln1.g").as_str()],
        b[pname(layer, "ln1.b").as_str()],
        T::lit(LN_EPS),
    )
}

/// `LayerNorm(x + Dropout(relu(x W1 + b1) W2 + b2))`.
pub fn ffn_block<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    mode: &mut Mode<'_, R>,
) -> Result<Var> {
    let h = tape.matmul(x, b[pname(layer, "ff1.w").as_str()])?;
    let h = tape.add_row(h, b[pname(layer, "ff1.b").as_str()])?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, b[pname(layer, "ff2.w").as_str()])?;
    let y = tape.add_row(y, b[pname(layer, "ff2.b").as_str()])?;
    let y = tape.dropout(y, cfg.dropout, mode.training, mode.rng)?;
    let res = tape.add(x, y)?;
    tape.layer_norm(
        res,
        b[pname(layer, "ln2.g").as_str()],
        b[pname(layer, "ln2.b").as_str()],
        T::lit(LN_EPS),
    )
}

/// Affinity features `[k_sup, c]` from the shared feature map `[c, h, w]`.
pub fn decoder_forward<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    f: Var,
    mode: &mut Mode<'_, R>,
) -> Result<Var> {
    let tokens = tokenize(tape, f, cfg.position_encoding)?;
    let mut x = b[format!("{XF}q_sup").as_str()];
    for l in 0..cfg.layers {
        x = multi_head_attention(tape, b, cfg, l, x, tokens, mode)?;
        x = ffn_block(tape, b, cfg, l, x, mode)?;
    }
    Ok(x)
}

/// Row-stochastic `W = softmax(F_aff P)` of shape `[k_sup, k_self]`.
pub fn affinity<T: Scalar>(tape: &mut Tape<T>, f_aff: Var, p: Var) -> Result<Var> {
    let logits = tape.matmul(f_aff, p)?;
    tape.softmax(logits, 1)
}

/// Channel `i` of the result is `sum_j W[i, j] * H_self[j]`.
pub fn transform_heatmaps<T: Scalar>(tape: &mut Tape<T>, h_self: Var, w: Var) -> Result<Var> {
    let s = tape.shape(h_self).to_vec();
    let ws = tape.shape(w).to_vec();
    if s.len() != 3 || ws.len() != 2 || ws[1] != s[0] {
        return Err(dim_err!("transform_heatmaps: W {ws:?} against stack {s:?}"));
    }
    let flat = tape.reshape(h_self, &[s[0], s[1] * s[2]])?;
    let mixed = tape.matmul(w, flat)?;
    tape.reshape(mixed, &[ws[0], s[1], s[2]])
}

/// Column sums of an affinity matrix: how much each self-supervised
/// keypoint feeds the supervised ones.
pub fn contribution_scores<T: Scalar>(w: &Tensor<T>) -> Result<Vec<f64>> {
    let (rows, cols) = match w.shape() {
        [r, c] => (*r, *c),
        s => return Err(dim_err!("affinity matrix must be 2-D, got {s:?}")),
    };
    Ok((0..cols)
        .map(|j| (0..rows).map(|i| w.data()[i * cols + j].to_f64_lossy()).sum())
        .collect())
}

/// CSV with one row per supervised keypoint.
pub fn affinity_csv<T: Scalar>(w: &Tensor<T>) -> String {
    let cols = w.shape().get(1).copied().unwrap_or(0);
    let mut out = String::new();
    out.push_str("k_sup");
    for j in 0..cols {
        out.push_str(&format!(",self_{j}"));
    }
    out.push('\n');
    for (i, row) in w.data().chunks(cols.max(1)).enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{:.4}", v.to_f64_lossy()));
        }
        out.push('\n');
    }
    out
}
