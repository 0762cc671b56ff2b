//! Losses, pair batching with augmentation, and the joint training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{GridScale, KeypointSet};
use crate::model::{self, Forward};
use crate::ops::gaussian_values;
use crate::optim::{AdamConfig, MilestoneSchedule};
use crate::posenet::{ModelConfig, Variant};
use crate::puppet::SubjectDataset;
use crate::tape::Var;
use crate::transformer::Mode;
use crate::{ParamStore, Tape, Tensor};

/// Seed of the fixed feature pyramid used by the perceptual term.
pub const PERCEPTUAL_SEED: u64 = 0x7065_7263;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the self-supervised loss.
    pub lambda: f64,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Include the feature-pyramid term in the reconstruction loss.
    pub perceptual: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Transformer,
            lambda: 1e-3,
            lr: 1e-3,
            lr_milestones: vec![3000, 4500, 5500],
            batch_size: 8,
            steps: 6000,
            seed: 0,
            log_every: 100,
            perceptual: true,
            rotation_deg: 15.0,
            scale_range: (0.9, 1.1),
        }
    }
}

/// Self-supervised weight of the larger-dataset preset.
pub const LAMBDA_SMALL: f64 = 1e-5;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.rotation_deg >= 0.0) || !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return bad("augmentation ranges are invalid".into());
        }
        Ok(())
    }

    /// Weight actually applied: the baseline has no self-supervised task.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::Baseline {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn schedule(&self) -> MilestoneSchedule {
        MilestoneSchedule {
            base_lr: self.lr,
            milestones: self.lr_milestones.clone(),
        }
    }
}

/// Frozen, randomly initialized conv pyramid whose activations define the
/// perceptual distance.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    kernels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = [(8, 3), (16, 8), (16, 16)]
            .iter()
            .map(|&(co, ci)| Tensor::randn(&[co, ci, 3, 3], (2.0 / (9 * ci) as f64).sqrt(), &mut rng))
            .collect();
        Self { kernels }
    }

    /// Activations after each of the three stride-2 stages.
    pub fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let kv = tape.constant(k.clone());
            let y = tape.conv2d(x, kv, 2, 1)?;
            x = tape.relu(y)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// Mean-squared pixel error plus, when `pyramid` is given, the mean of the
/// per-stage mean-squared feature distances.
pub fn reconstruction_loss(tape: &mut Tape, target: Var, recon: Var, pyramid: Option<&FeaturePyramid>) -> Result<Var> {
    let pixel = tape.mse_loss(target, recon)?;
    let Some(p) = pyramid else { return Ok(pixel) };
    let ft = p.features(tape, target)?;
    let fr = p.features(tape, recon)?;
    let mut terms = Vec::with_capacity(ft.len());
    for (a, b) in ft.iter().zip(&fr) {
        terms.push(tape.mse_loss(*a, *b)?);
    }
    let sum = tape.add_all(&terms)?;
    let perceptual = tape.scale(sum, 1.0 / terms.len() as f64)?;
    tape.add(perceptual, pixel)
}

/// Target heatmaps for `gt` (image pixels) on an `h x h` grid. Returns the
/// stack and how many joints had to be clamped onto the grid.
pub fn gt_heatmaps(gt: &KeypointSet, cfg: &ModelConfig) -> (Tensor, usize) {
    let h = cfg.heatmap_size();
    let scale = GridScale { stride: cfg.stride() };
    let mut clamped = 0;
    let mut coords = Vec::with_capacity(2 * gt.len());
    for &p in &gt.points {
        let q = scale.to_heatmap(p);
        let c = [q[0].clamp(0.0, (h - 1) as f64), q[1].clamp(0.0, (h - 1) as f64)];
        if c != q {
            clamped += 1;
        }
        coords.extend_from_slice(&c);
    }
    (gaussian_values(&coords, gt.len(), cfg.sigma, h, h), clamped)
}

/// Mean squared error between predicted heatmaps and Gaussians at `gt`.
pub fn supervised_loss(tape: &mut Tape, h_sup: Var, gt: &KeypointSet, cfg: &ModelConfig) -> Result<(Var, usize)> {
    let (target, clamped) = gt_heatmaps(gt, cfg);
    if clamped > 0 {
        warn!("{clamped} joint(s) clamped onto the heatmap grid");
    }
    let t = tape.constant(target);
    Ok((tape.mse_loss(h_sup, t)?, clamped))
}

/// Rotation (radians) and scale applied identically to both images of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub rotation: f64,
    pub scale: f64,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        rotation: 0.0,
        scale: 1.0,
    };

    /// Image-space position of input point `p` after the warp about the
    /// image centre.
    pub fn apply_point(&self, p: [f64; 2], size: usize) -> [f64; 2] {
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - c, p[1] - c);
        [c + self.scale * (co * dx - s * dy), c + self.scale * (s * dx + co * dy)]
    }

    /// Bilinear resampling of a `[3, size, size]` image with edge clamping.
    pub fn apply_image(&self, img: &Tensor) -> Tensor {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let (ch, size) = (img.shape()[0], img.shape()[1]);
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = self.rotation.sin_cos();
        let inv = 1.0 / self.scale;
        let src = img.data();
        let plane = size * size;
        let mut out = vec![0.0; img.len()];
        let last = (size - 1) as f64;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let sx = (c + inv * (co * dx + s * dy)).clamp(0.0, last);
                let sy = (c + inv * (-s * dx + co * dy)).clamp(0.0, last);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for k in 0..ch {
                    let at = |yy: usize, xx: usize| src[k * plane + yy * size + xx];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out[k * plane + y * size + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Tensor::new(img.shape(), out).expect("same shape")
    }

    pub fn apply_keypoints(&self, k: &KeypointSet, size: usize) -> KeypointSet {
        k.map(|p| self.apply_point(p, size))
    }
}

/// Indices of one training pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairIndex {
    pub subject: usize,
    pub target: usize,
    pub source: usize,
    pub augment: Augment,
}

/// Materialized images and labels of a batch of same-subject pairs.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub pairs: Vec<PairIndex>,
    pub targets: Vec<Tensor>,
    pub sources: Vec<Tensor>,
    pub target_joints: Vec<KeypointSet>,
    pub subject_ids: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn materialize(datasets: &[SubjectDataset], pairs: Vec<PairIndex>) -> Self {
        let mut b = PairBatch {
            targets: Vec::with_capacity(pairs.len()),
            sources: Vec::with_capacity(pairs.len()),
            target_joints: Vec::with_capacity(pairs.len()),
            subject_ids: Vec::with_capacity(pairs.len()),
            pairs: Vec::new(),
        };
        for p in &pairs {
            let d = &datasets[p.subject];
            let (t, s) = (&d.frames[p.target], &d.frames[p.source]);
            let size = t.image.shape()[1];
            b.targets.push(p.augment.apply_image(&t.image));
            b.sources.push(p.augment.apply_image(&s.image));
            b.target_joints.push(p.augment.apply_keypoints(&t.gt_joints, size));
            b.subject_ids.push(d.id());
        }
        b.pairs = pairs;
        b
    }
}

/// Draws `batch_size` pairs: a subject with at least two frames, then two
/// distinct frames of it, then an augmentation shared by the pair.
/// Subjects with fewer than two frames are skipped.
pub fn sample_pairs(
    datasets: &[SubjectDataset],
    batch_size: usize,
    rotation_deg: f64,
    scale_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<PairIndex>> {
    let usable: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].len() >= 2).collect();
    for (i, d) in datasets.iter().enumerate() {
        if d.len() < 2 {
            warn!(
                "subject {} (index {i}) has fewer than two frames and is skipped",
                d.id()
            );
        }
    }
    if usable.is_empty() {
        return Err(Error::Argument("no subject has two frames to pair".into()));
    }
    let max_rot = rotation_deg.to_radians();
    Ok((0..batch_size)
        .map(|_| {
            let subject = *usable.choose(rng).expect("non-empty");
            let n = datasets[subject].len();
            let target = rng.gen_range(0..n);
            let mut source = rng.gen_range(0..n - 1);
            if source >= target {
                source += 1;
            }
            let rotation = if max_rot > 0.0 {
                rng.gen_range(-max_rot..=max_rot)
            } else {
                0.0
            };
            let scale = if scale_range.0 < scale_range.1 {
                rng.gen_range(scale_range.0..=scale_range.1)
            } else {
                scale_range.0
            };
            PairIndex {
                subject,
                target,
                source,
                augment: Augment { rotation, scale },
            }
        })
        .collect())
}

pub fn make_pair_batch(datasets: &[SubjectDataset], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<PairBatch> {
    let pairs = sample_pairs(datasets, cfg.batch_size, cfg.rotation_deg, cfg.scale_range, rng)?;
    Ok(PairBatch::materialize(datasets, pairs))
}

/// Scalar outputs of [`joint_loss`] together with their graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub sup: Var,
    pub self_sup: Option<Var>,
}

/// Batch-mean `L_sup + lambda * L_self`. The self-supervised path is not
/// built when `lambda` is zero.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    b: &crate::optim::Bindings,
    mcfg: &ModelConfig,
    variant: Variant,
    lambda: f64,
    batch: &PairBatch,
    pyramid: Option<&FeaturePyramid>,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let with_self = lambda > 0.0 && variant.has_self_task();
    let mut sups = Vec::with_capacity(batch.len());
    let mut selfs = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let x = tape.constant(batch.targets[i].clone());
        let mut mode = Mode {
            training: true,
            rng: &mut *rng,
        };
        let fwd: Forward = model::forward(tape, b, mcfg, variant, x, with_self, &mut mode)?;
        sups.push(supervised_loss(tape, fwd.h_sup, &batch.target_joints[i], mcfg)?.0);
        if with_self {
            let s = tape.constant(batch.sources[i].clone());
            let recon = model::reconstruct(tape, b, &fwd, s)?;
            selfs.push(reconstruction_loss(tape, x, recon, pyramid)?);
        }
    }
    let n = 1.0 / batch.len() as f64;
    let sum = tape.add_all(&sups)?;
    let sup = tape.scale(sum, n)?;
    if selfs.is_empty() {
        return Ok(LossParts {
            total: sup,
            sup,
            self_sup: None,
        });
    }
    let sum = tape.add_all(&selfs)?;
    let self_sup = tape.scale(sum, n)?;
    let weighted = tape.scale(self_sup, lambda)?;
    let total = tape.add(sup, weighted)?;
    Ok(LossParts {
        total,
        sup,
        self_sup: Some(self_sup),
    })
}

/// Batch-mean reconstruction loss alone.
pub fn self_loss(
    tape: &mut Tape,
    b: &crate::optim::Bindings,
    mcfg: &ModelConfig,
    variant: Variant,
    targets: &[&Tensor],
    sources: &[&Tensor],
    pyramid: Option<&FeaturePyramid>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(targets.len());
    for (t, s) in targets.iter().zip(sources) {
        let x = tape.constant((*t).clone());
        let mut mode = Mode {
            training: true,
            rng: &mut *rng,
        };
        let fwd = model::forward(tape, b, mcfg, variant, x, true, &mut mode)?;
        let sv = tape.constant((*s).clone());
        let recon = model::reconstruct(tape, b, &fwd, sv)?;
        terms.push(reconstruction_loss(tape, x, recon, pyramid)?);
    }
    let sum = tape.add_all(&terms)?;
    tape.scale(sum, 1.0 / terms.len() as f64)
}

/// Per-step generator: a pure function of `(seed, step)` so that a resumed
/// run draws exactly what the unbroken run would have.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub loss_sup: f64,
    pub loss_self: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,lr,total,loss_sup,loss_self\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{:.8},{:.8},{:.8}",
            r.step, r.lr, r.total, r.loss_sup, r.loss_self
        );
    }
    s
}

/// Where training writes checkpoints and logs.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ttpk")
    }

    pub fn last_good(&self) -> PathBuf {
        self.dir.join("last_good.ttpk")
    }

    pub fn milestone(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_step{step}.ttpk"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

pub struct TrainResult {
    pub store: ParamStore,
    pub log: Vec<MetricsRow>,
}

/// Optimizer steps already taken by a store (zero for a fresh model).
pub fn steps_done(store: &ParamStore) -> usize {
    store
        .names()
        .next()
        .and_then(|n| store.entry(n))
        .map(|e| e.step() as usize)
        .unwrap_or(0)
}

/// Runs `cfg.steps` total optimizer steps of the joint objective, starting
/// from `init` (fresh or resumed; a resumed store continues at its Adam step
/// count). A non-finite loss stops training; the parameters from before
/// the failing step are written to `last_good.ttpk` when `out` is set.
pub fn train(
    train_sets: &[SubjectDataset],
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    init: ParamStore,
    out: Option<&TrainOutput>,
) -> Result<TrainResult> {
    cfg.validate()?;
    mcfg.validate()?;
    let mut store = init;
    let lambda = cfg.effective_lambda();
    let pyramid = cfg.perceptual.then(|| FeaturePyramid::new(PERCEPTUAL_SEED));
    let schedule = cfg.schedule();
    let start = steps_done(&store);
    let mut log = Vec::new();
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    for step in start..cfg.steps {
        let mut rng = step_rng(cfg.seed, step as u64);
        let batch = make_pair_batch(train_sets, cfg, &mut rng)?;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let parts = joint_loss(
            &mut tape,
            &b,
            mcfg,
            cfg.variant,
            lambda,
            &batch,
            pyramid.as_ref(),
            &mut rng,
        );
        let parts = match parts {
            Ok(p) if tape.value(p.total).item().is_finite() => p,
            other => {
                if let Some(o) = out {
                    store.save(&o.last_good(), true)?;
                }
                let why = match other {
                    Err(e) => e.to_string(),
                    Ok(_) => "loss is not finite".into(),
                };
                return Err(Error::Diverged { step, reason: why });
            }
        };
        tape.backward(parts.total)?;
        let grads = store.collect_grads(&tape, &b);
        if grads.values().any(|g| !g.is_finite()) {
            if let Some(o) = out {
                store.save(&o.last_good(), true)?;
            }
            return Err(Error::Diverged {
                step,
                reason: "gradient is not finite".into(),
            });
        }
        let lr = schedule.lr_at(step);
        store.adam_step(&grads, &AdamConfig::with_lr(lr))?;
        let row = MetricsRow {
            step,
            lr,
            total: tape.value(parts.total).item(),
            loss_sup: tape.value(parts.sup).item(),
            loss_self: parts.self_sup.map(|v| tape.value(v).item()).unwrap_or(0.0),
        };
        let done = step + 1;
        if step % cfg.log_every.max(1) == 0 || done == cfg.steps {
            info!(
                "{} step {step}: total {:.5} sup {:.5} self {:.5} lr {:e}",
                cfg.variant, row.total, row.loss_sup, row.loss_self, lr
            );
            log.push(row);
        }
        if let Some(o) = out {
            if cfg.lr_milestones.contains(&done) {
                store.save(&o.milestone(done), true)?;
            }
        }
    }
    if let Some(o) = out {
        store.save(&o.checkpoint(), true)?;
        append_metrics(&o.metrics(), &log, start == 0)?;
    }
    Ok(TrainResult { store, log })
}

fn append_metrics(path: &Path, rows: &[MetricsRow], fresh: bool) -> Result<()> {
    let text = metrics_csv(rows);
    if fresh || !path.exists() {
        return std::fs::write(path, text).map_err(|e| Error::io(path, e));
    }
    let mut old = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    old.push_str(text.split_once('\n').map(|x| x.1).unwrap_or(""));
    std::fs::write(path, old).map_err(|e| Error::io(path, e))
}

/// Mean supervised loss over fixed, unaugmented frames, without dropout.
pub fn heldout_sup_loss(
    store: &ParamStore,
    mcfg: &ModelConfig,
    variant: Variant,
    frames: &[(&Tensor, &KeypointSet)],
) -> Result<f64> {
    let mut total = 0.0;
    for (img, gt) in frames {
        let h = model::predict_heatmaps(store, mcfg, variant, img)?;
        let (target, _) = gt_heatmaps(gt, mcfg);
        total += h.maps.zip_map(&target, |a, b| (a - b) * (a - b))?.sum() / target.len() as f64;
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Deterministically shuffled frame indices.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
