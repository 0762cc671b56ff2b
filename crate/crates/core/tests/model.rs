use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttpose_core::gradcheck::store_grad_check;
use ttpose_core::keypoints::KeypointSet;
use ttpose_core::model::{forward, init_model, predict_keypoints, reconstruct};
use ttpose_core::posenet::{self, ModelConfig, Variant, APP, DEC, ENC, SELF, SUPB, XF};
use ttpose_core::trainer::{reconstruction_loss, supervised_loss, FeaturePyramid, PERCEPTUAL_SEED};
use ttpose_core::transformer::Mode;
use ttpose_core::{ParamStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        k_self: 4,
        k_sup: 3,
        channels: 8,
        app_channels: 8,
        heads: 2,
        d_ff: 16,
        ..ModelConfig::default()
    }
}

fn image(cfg: &ModelConfig, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[3, cfg.image_size, cfg.image_size], 0.0, 1.0, r)
}

fn joints(cfg: &ModelConfig, r: &mut ChaCha8Rng) -> KeypointSet {
    use rand::Rng;
    let s = cfg.image_size as f64;
    KeypointSet::new(
        (0..cfg.k_sup)
            .map(|_| [r.gen_range(2.0..s - 2.0), r.gen_range(2.0..s - 2.0)])
            .collect(),
    )
}

#[test]
fn forward_shapes_for_every_variant() {
    let cfg = ModelConfig::default();
    let mut r = rng(1);
    let img = image(&cfg, &mut r);
    for v in Variant::ALL {
        let store: ParamStore = init_model(&cfg, v, 0).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(img.clone());
        let mut mode = Mode {
            training: false,
            rng: &mut r,
        };
        let fwd = forward(&mut tape, &b, &cfg, v, x, true, &mut mode).unwrap();
        assert_eq!(tape.shape(fwd.features), [cfg.channels, 16, 16]);
        assert_eq!(tape.shape(fwd.h_sup), [cfg.k_sup, 16, 16], "{v}");
        if v.has_self_task() {
            assert_eq!(tape.shape(fwd.h_self.unwrap()), [cfg.k_self, 16, 16]);
            assert_eq!(tape.shape(fwd.condensed.unwrap().coords), [cfg.k_self, 2]);
            let recon = reconstruct(&mut tape, &b, &fwd, x).unwrap();
            assert_eq!(tape.shape(recon), [3, 64, 64]);
            assert!(tape.value(recon).data().iter().all(|&p| p > 0.0 && p < 1.0));
        } else {
            assert!(fwd.h_self.is_none());
            assert!(reconstruct(&mut tape, &b, &fwd, x).is_err());
        }
        assert_eq!(fwd.affinity.is_some(), v == Variant::Transformer);
        let kp = predict_keypoints(&store, &cfg, v, &img).unwrap();
        assert_eq!(kp.len(), cfg.k_sup);
    }
}

#[test]
fn encoder_rejects_wrong_size() {
    let cfg = small();
    let store: ParamStore = init_model(&cfg, Variant::Baseline, 0).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[3, 40, 40]));
    assert!(posenet::encode(&mut tape, &b, &cfg, x).is_err());
}

#[test]
fn parameter_groups_follow_variant() {
    let cfg = small();
    let has = |s: &ParamStore, p: &str| s.names().any(|n| n.starts_with(p));
    let base: ParamStore = init_model(&cfg, Variant::Baseline, 0).unwrap();
    assert!(has(&base, ENC) && has(&base, SUPB));
    assert!(!has(&base, SELF) && !has(&base, APP) && !has(&base, DEC) && !has(&base, XF));
    let feat: ParamStore = init_model(&cfg, Variant::FeatShared, 0).unwrap();
    assert!(has(&feat, SELF) && has(&feat, SUPB) && !has(&feat, XF));
    let tr: ParamStore = init_model(&cfg, Variant::Transformer, 0).unwrap();
    assert!(has(&tr, SELF) && has(&tr, XF) && !has(&tr, SUPB));
    let again: ParamStore = init_model(&cfg, Variant::Transformer, 0).unwrap();
    for (n, t) in tr.iter() {
        assert_eq!(t.data(), again.get(n).unwrap().data());
    }
}

fn condense_values(h: Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.constant(h);
    let c = posenet::condense(&mut tape, x, 1.0).unwrap();
    (
        tape.value(c.coords).data().to_vec(),
        posenet::peak_confidence(&tape, &c),
    )
}

#[test]
fn condense_oracle_cases() {
    // a dominant logit pins the expectation to its cell, as (x, y) = (col, row)
    let mut h = Tensor::zeros(&[1, 5, 7]);
    h.set(&[0, 3, 5], 200.0);
    let (c, conf) = condense_values(h);
    assert!((c[0] - 5.0).abs() < 1e-12 && (c[1] - 3.0).abs() < 1e-12);
    assert!((conf[0] - 1.0).abs() < 1e-12);

    // flat logits give the grid centre
    let (c, conf) = condense_values(Tensor::full(&[1, 4, 6], 0.3));
    assert!((c[0] - 2.5).abs() < 1e-12 && (c[1] - 1.5).abs() < 1e-12);
    assert!((conf[0] - 1.0 / 24.0).abs() < 1e-12);

    // two cells with logits 0 and ln 3 on a 1x2 map: x = 3/4
    let h = Tensor::new(&[1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
    let (c, _) = condense_values(h);
    assert!((c[0] - 0.75).abs() < 1e-12 && c[1].abs() < 1e-12);
}

#[test]
fn condense_temperature_sharpens() {
    let mut r = rng(3);
    let h = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut r);
    let peak = |t: f64| {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let c = posenet::condense(&mut tape, x, t).unwrap();
        posenet::peak_confidence(&tape, &c)[0]
    };
    assert!(peak(0.25) > peak(1.0) && peak(1.0) > peak(4.0));
}

/// Decoder input and output for a hand-built heatmap stack.
fn decode_from(store: &ParamStore, cfg: &ModelConfig, h: Tensor, source: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let b = store.bind_constants(&mut tape);
    let hv = tape.constant(h);
    let c = posenet::condense(&mut tape, hv, cfg.temperature).unwrap();
    let hm = cfg.heatmap_size();
    let kp = posenet::gaussian_rerender(&mut tape, c.coords, cfg.sigma, hm, hm).unwrap();
    let s = tape.constant(source.clone());
    let app = posenet::appearance_extract(&mut tape, &b, s).unwrap();
    let out = posenet::render_decode(&mut tape, &b, app, kp).unwrap();
    (
        tape.value(c.coords).data().to_vec(),
        tape.value(kp).data().to_vec(),
        tape.value(out).data().to_vec(),
    )
}

#[test]
fn bottleneck_passes_only_centroids() {
    let cfg = small();
    let hm = cfg.heatmap_size();
    let store: ParamStore = init_model(&cfg, Variant::FeatShared, 5).unwrap();
    let src = image(&cfg, &mut rng(6));
    // every other cell underflows to probability zero exactly
    let mut a = Tensor::full(&[cfg.k_self, hm, hm], -1e4);
    let mut b = a.clone();
    for k in 0..cfg.k_self {
        let (row, col) = (1 + k, 2 + k);
        // A: two equal cells either side of (col, row); B: one cell on it
        a.set(&[k, row, col - 1], 0.0);
        a.set(&[k, row, col + 1], 0.0);
        b.set(&[k, row, col], 0.0);
    }
    let (ca, fa, oa) = decode_from(&store, &cfg, a.clone(), &src);
    let (cb, fb, ob) = decode_from(&store, &cfg, b.clone(), &src);
    assert_ne!(a.data(), b.data());
    assert_eq!(ca, cb);
    assert_eq!(fa, fb);
    assert_eq!(oa, ob);

    // a different centroid changes the decoder input
    let mut c = a.clone();
    c.set(&[0, 1, 1], -1e4);
    let (_, fc, _) = decode_from(&store, &cfg, c, &src);
    assert_ne!(fa, fc);
}

#[test]
fn heatmap_gradient_factors_through_centroids() {
    // dL/dH[k, i] = p[k, i] * ((x_i - cx_k) gx_k + (y_i - cy_k) gy_k)
    let cfg = small();
    let hm = cfg.heatmap_size();
    let store: ParamStore = init_model(&cfg, Variant::FeatShared, 8).unwrap();
    let mut r = rng(9);
    let h = Tensor::uniform(&[cfg.k_self, hm, hm], -2.0, 2.0, &mut r);
    let src = image(&cfg, &mut r);
    let mut tape = Tape::new();
    let b = store.bind_constants(&mut tape);
    let hv = tape.param(h);
    let c = posenet::condense(&mut tape, hv, 1.0).unwrap();
    let kp = posenet::gaussian_rerender(&mut tape, c.coords, cfg.sigma, hm, hm).unwrap();
    let s = tape.constant(src.clone());
    let app = posenet::appearance_extract(&mut tape, &b, s).unwrap();
    let out = posenet::render_decode(&mut tape, &b, app, kp).unwrap();
    let loss = reconstruction_loss(&mut tape, s, out, None).unwrap();
    tape.backward(loss).unwrap();
    let gh = tape.grad(hv).unwrap().clone();
    let gc = tape.grad(c.coords).unwrap().clone();
    let p = tape.value(c.probs).clone();
    let cc = tape.value(c.coords).clone();
    for k in 0..cfg.k_self {
        for i in 0..hm * hm {
            let (x, y) = ((i % hm) as f64, (i / hm) as f64);
            let want = p.at(&[k, i]) * ((x - cc.at(&[k, 0])) * gc.at(&[k, 0]) + (y - cc.at(&[k, 1])) * gc.at(&[k, 1]));
            let got = gh.data()[k * hm * hm + i];
            assert!((got - want).abs() < 1e-12, "k {k} i {i}: {got} vs {want}");
        }
    }
}

#[test]
fn render_decode_rejects_mismatched_grids() {
    let cfg = small();
    let store: ParamStore = init_model(&cfg, Variant::FeatShared, 0).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let app = tape.constant(Tensor::zeros(&[cfg.app_channels, 8, 8]));
    let kp = tape.constant(Tensor::zeros(&[cfg.k_self, 4, 4]));
    assert!(posenet::render_decode(&mut tape, &b, app, kp).is_err());
}

#[test]
fn reconstruction_gradient_reaches_both_branches() {
    let cfg = small();
    let store: ParamStore = init_model(&cfg, Variant::FeatShared, 2).unwrap();
    let mut r = rng(4);
    let (t, s) = (image(&cfg, &mut r), image(&cfg, &mut r));
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(t);
    let sv = tape.constant(s);
    let path = posenet::self_path(&mut tape, &b, &cfg, x).unwrap();
    let recon = posenet::reconstruct(&mut tape, &b, &path, sv).unwrap();
    let loss = reconstruction_loss(&mut tape, x, recon, None).unwrap();
    tape.backward(loss).unwrap();
    let grads = store.collect_grads(&tape, &b);
    let norm = |prefix: &str| -> f64 {
        grads
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    };
    for p in [ENC, SELF, APP, DEC] {
        assert!(norm(p) > 0.0, "{p} gets no gradient");
    }
    assert_eq!(norm(SUPB), 0.0);
}

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

fn check_graph(
    variant: Variant,
    loss: impl Fn(
        &mut Tape,
        &ttpose_core::optim::Bindings,
        &ModelConfig,
        &[Tensor],
        &KeypointSet,
    ) -> ttpose_core::Result<ttpose_core::tape::Var>,
) {
    let cfg = small();
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(100 + seed);
        let mut store: ParamStore = init_model(&cfg, variant, seed).unwrap();
        // zero biases leave dead regions exactly on the ReLU kink
        let names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b"))
            .map(str::to_string)
            .collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            *store.get_mut(&n).unwrap() = Tensor::uniform(&shape, -0.1, 0.1, &mut r);
        }
        let imgs = [image(&cfg, &mut r), image(&cfg, &mut r)];
        let gt = joints(&cfg, &mut r);
        let (err, at) = store_grad_check(&store, &|tape, b| loss(tape, b, &cfg, &imgs, &gt), 1e-5, 3, &mut r);
        assert!(err < GRAD_TOL, "{variant} seed {seed}: rel err {err:e} at {at}");
    }
}

#[test]
fn reconstruction_path_matches_finite_differences() {
    let pyramid = FeaturePyramid::new(PERCEPTUAL_SEED);
    check_graph(Variant::FeatShared, |tape, b, cfg, imgs, _| {
        let x = tape.constant(imgs[0].clone());
        let s = tape.constant(imgs[1].clone());
        let path = posenet::self_path(tape, b, cfg, x)?;
        let recon = posenet::reconstruct(tape, b, &path, s)?;
        reconstruction_loss(tape, x, recon, Some(&pyramid))
    });
}

#[test]
fn baseline_supervised_path_matches_finite_differences() {
    check_graph(Variant::Baseline, |tape, b, cfg, imgs, gt| {
        let x = tape.constant(imgs[0].clone());
        let f = posenet::encode(tape, b, cfg, x)?;
        let h = posenet::baseline_sup_head(tape, b, f)?;
        Ok(supervised_loss(tape, h, gt, cfg)?.0)
    });
}

#[test]
fn transformer_supervised_path_matches_finite_differences() {
    check_graph(Variant::Transformer, |tape, b, cfg, imgs, gt| {
        let x = tape.constant(imgs[0].clone());
        // training mode with a fixed stream: identical dropout masks on every call
        let mut r = rng(77);
        let mut mode = Mode {
            training: true,
            rng: &mut r,
        };
        let fwd = forward(tape, b, cfg, Variant::Transformer, x, false, &mut mode)?;
        Ok(supervised_loss(tape, fwd.h_sup, gt, cfg)?.0)
    });
}

fn sup_grad_norms(variant: Variant, seed: u64) -> (Option<f64>, f64) {
    let cfg = small();
    let store: ParamStore = init_model(&cfg, variant, seed).unwrap();
    let mut r = rng(seed + 50);
    let img = image(&cfg, &mut r);
    let gt = joints(&cfg, &mut r);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(img);
    let mut mode = Mode {
        training: true,
        rng: &mut r,
    };
    let fwd = forward(&mut tape, &b, &cfg, variant, x, false, &mut mode).unwrap();
    let (l, _) = supervised_loss(&mut tape, fwd.h_sup, &gt, &cfg).unwrap();
    tape.backward(l).unwrap();
    let grads = store.collect_grads(&tape, &b);
    let self_norm = grads
        .iter()
        .filter(|(n, _)| n.starts_with(SELF))
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .reduce(|a, b| a + b);
    let enc_norm = grads
        .iter()
        .filter(|(n, _)| n.starts_with(ENC))
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    (self_norm, enc_norm)
}

#[test]
fn supervised_loss_reaches_self_head_only_through_transformer() {
    for seed in 0..5 {
        let (tr, enc) = sup_grad_norms(Variant::Transformer, seed);
        assert!(tr.unwrap() > 0.0 && enc > 0.0);
        let (fs, enc) = sup_grad_norms(Variant::FeatShared, seed);
        assert_eq!(fs.unwrap_or(0.0), 0.0);
        assert!(enc > 0.0);
    }
}
