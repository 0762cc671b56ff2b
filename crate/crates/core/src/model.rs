//! Whole-model assembly for the three variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::keypoints::{decode_keypoints, GridScale, HeatmapStack, KeypointSet, Refine};
use crate::optim::{Bindings, ParamStore};
use crate::posenet::{self, Condensed, ModelConfig, Variant, XF};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::transformer::{self, Mode};

/// Fresh parameters for `variant`, a pure function of `seed`.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    posenet::init_conv_groups(&mut store, cfg, variant.groups(), &mut rng)?;
    if variant.groups().contains(&XF) {
        transformer::init_params(&mut store, cfg, &mut rng)?;
    }
    Ok(store)
}

/// Graph nodes of one target image.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    /// Self-supervised logits, when the self path ran.
    pub h_self: Option<Var>,
    pub condensed: Option<Condensed>,
    pub rendered: Option<Var>,
    /// Affinity matrix of the transformer variant.
    pub affinity: Option<Var>,
    pub h_sup: Var,
}

/// Runs the encoder and the supervised branch of `variant`. The
/// self-supervised path runs when the variant needs it for supervision or
/// `with_self` asks for it.
pub fn forward<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    variant: Variant,
    image: Var,
    with_self: bool,
    mode: &mut Mode<'_, R>,
) -> Result<Forward> {
    let features = posenet::encode(tape, b, cfg, image)?;
    let run_self = variant == Variant::Transformer || (with_self && variant.has_self_task());
    let (mut h_self, mut condensed, mut rendered) = (None, None, None);
    if run_self {
        let h = posenet::self_head(tape, b, features)?;
        let c = posenet::condense(tape, h, cfg.temperature)?;
        let hm = cfg.heatmap_size();
        rendered = Some(posenet::gaussian_rerender(tape, c.coords, cfg.sigma, hm, hm)?);
        h_self = Some(h);
        condensed = Some(c);
    }
    let (h_sup, affinity) = match variant {
        Variant::Baseline | Variant::FeatShared => (posenet::baseline_sup_head(tape, b, features)?, None),
        Variant::Transformer => {
            let f_aff = transformer::decoder_forward(tape, b, cfg, features, mode)?;
            let w = transformer::affinity(tape, f_aff, b[format!("{XF}p").as_str()])?;
            let h = transformer::transform_heatmaps(tape, h_self.expect("self path ran"), w)?;
            (h, Some(w))
        }
    };
    Ok(Forward {
        features,
        h_self,
        condensed,
        rendered,
        affinity,
        h_sup,
    })
}

/// Reconstruction of the forwarded target using `source`'s appearance.
pub fn reconstruct<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, fwd: &Forward, source: Var) -> Result<Var> {
    let rendered = fwd
        .rendered
        .ok_or_else(|| crate::Error::State("reconstruction needs the self-supervised path".into()))?;
    let app = posenet::appearance_extract(tape, b, source)?;
    posenet::render_decode(tape, b, app, rendered)
}

/// Inference-mode supervised heatmaps of one image.
pub fn predict_heatmaps<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    variant: Variant,
    image: &crate::tensor::Tensor<T>,
) -> Result<HeatmapStack<T>> {
    let mut tape = Tape::new();
    let b = store.bind_constants(&mut tape);
    let x = tape.constant(image.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mode = Mode {
        training: false,
        rng: &mut rng,
    };
    let fwd = forward(&mut tape, &b, cfg, variant, x, false, &mut mode)?;
    HeatmapStack::new(tape.value(fwd.h_sup).clone())
}

/// Predicted joints of one image in image pixels.
pub fn predict_keypoints<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    variant: Variant,
    image: &crate::tensor::Tensor<T>,
) -> Result<KeypointSet> {
    let h = predict_heatmaps(store, cfg, variant, image)?;
    Ok(decode_keypoints(
        &h,
        GridScale { stride: cfg.stride() },
        Refine::QuarterOffset,
    ))
}
