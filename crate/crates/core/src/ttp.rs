//! Test-time personalization: fine-tuning on one subject's unlabeled frames
//! with the reconstruction loss alone, in an online (causal) or offline
//! (shuffled pool) regime.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Metric};
use crate::keypoints::KeypointSet;
use crate::model::predict_keypoints;
use crate::optim::AdamConfig;
use crate::posenet::{ModelConfig, Variant, SUPB, XF};
use crate::puppet::{SubjectDataset, TORSO_PAIR};
use crate::trainer::{self_loss, step_rng, FeaturePyramid, PERCEPTUAL_SEED};
use crate::{ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Online,
    Offline,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Online => "online",
            Scenario::Offline => "offline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reinit {
    Never,
    PerSubject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtpConfig {
    pub scenario: Scenario,
    pub lr: f64,
    pub update_iters_per_frame: usize,
    pub reinit: Reinit,
    /// Parameter-name prefixes held fixed.
    pub freeze: Vec<String>,
    pub seed: u64,
    /// Pairs per update step.
    pub batch_size: usize,
    pub perceptual: bool,
}

impl Default for TtpConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Online,
            lr: 1e-4,
            update_iters_per_frame: 1,
            reinit: Reinit::PerSubject,
            freeze: vec![SUPB.to_string(), XF.to_string()],
            seed: 0,
            batch_size: 1,
            perceptual: true,
        }
    }
}

impl TtpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "ttp lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.update_iters_per_frame == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "update iterations and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-frame record of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub frame_index: usize,
    /// Reconstruction loss of the last update made for this frame
    /// (`None` when no update happened).
    pub loss_self: Option<f64>,
    pub prediction: KeypointSet,
    /// Online only: the prediction for this frame before its update.
    pub pre_update: Option<KeypointSet>,
}

#[derive(Clone, Debug)]
pub struct TtpRun {
    pub subject_id: usize,
    pub predictions: Vec<KeypointSet>,
    pub trace: Vec<TraceRow>,
    /// Optimizer steps taken.
    pub updates: usize,
}

/// Model state carried across subjects.
#[derive(Clone, Debug)]
pub struct TtpState {
    pub store: ParamStore,
    pub subject: Option<usize>,
}

impl TtpState {
    pub fn new(checkpoint: &ParamStore, cfg: &TtpConfig) -> Self {
        Self {
            store: prepared(checkpoint, cfg),
            subject: None,
        }
    }
}

/// A copy of `checkpoint` with fresh Adam moments and the configured
/// prefixes frozen.
fn prepared(checkpoint: &ParamStore, cfg: &TtpConfig) -> ParamStore {
    let mut s = checkpoint.clone();
    s.reset_optimizer();
    s.unfreeze_all();
    for p in &cfg.freeze {
        s.freeze_prefix(p);
    }
    s
}

/// With per-subject re-initialization, a change of subject restores the
/// jointly trained weights; otherwise weights carry over.
pub fn reinit_if_needed(state: TtpState, next_subject: usize, checkpoint: &ParamStore, cfg: &TtpConfig) -> TtpState {
    let switching = state.subject.is_some_and(|s| s != next_subject);
    if switching && cfg.reinit == Reinit::PerSubject {
        return TtpState {
            store: prepared(checkpoint, cfg),
            subject: Some(next_subject),
        };
    }
    TtpState {
        subject: Some(next_subject),
        ..state
    }
}

/// Everything an update needs besides the parameters.
pub struct TtpContext<'a> {
    pub model: &'a ModelConfig,
    pub variant: Variant,
    pub cfg: &'a TtpConfig,
    pyramid: Option<FeaturePyramid>,
}

impl<'a> TtpContext<'a> {
    pub fn new(model: &'a ModelConfig, variant: Variant, cfg: &'a TtpConfig) -> Result<Self> {
        cfg.validate()?;
        if !variant.has_self_task() {
            return Err(Error::Config(format!(
                "variant {variant} has no self-supervised task to personalize"
            )));
        }
        Ok(Self {
            model,
            variant,
            cfg,
            pyramid: cfg.perceptual.then(|| FeaturePyramid::new(PERCEPTUAL_SEED)),
        })
    }

    /// One reconstruction-only Adam step on `pairs` of (target, source).
    fn update(
        &self,
        store: &mut ParamStore,
        frames: &SubjectDataset,
        pairs: &[(usize, usize)],
        step: u64,
    ) -> Result<f64> {
        let mut rng = step_rng(self.cfg.seed, step);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let targets: Vec<&Tensor> = pairs.iter().map(|&(t, _)| &frames.frames[t].image).collect();
        let sources: Vec<&Tensor> = pairs.iter().map(|&(_, s)| &frames.frames[s].image).collect();
        let loss = self_loss(
            &mut tape,
            &b,
            self.model,
            self.variant,
            &targets,
            &sources,
            self.pyramid.as_ref(),
            &mut rng,
        )?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let mut grads: BTreeMap<String, Tensor> = store.collect_grads(&tape, &b);
        // parameters outside the reconstruction graph stay put
        for name in store.names() {
            if !store.is_frozen(name) && !grads.contains_key(name) {
                grads.insert(
                    name.to_string(),
                    Tensor::zeros(store.get(name).expect("listed").shape()),
                );
            }
        }
        store.adam_step(&grads, &AdamConfig::with_lr(self.cfg.lr))?;
        Ok(value)
    }

    fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<KeypointSet> {
        predict_keypoints(store, self.model, self.variant, image)
    }
}

/// Causal personalization: at frame `T` (from the second frame on) run
/// `update_iters_per_frame` steps, each pairing target `T` with sources
/// drawn uniformly from the earlier frames, then predict frame `T`.
/// `step0` offsets the per-step random streams.
pub fn ttp_online(ctx: &TtpContext<'_>, store: &mut ParamStore, data: &SubjectDataset, step0: u64) -> Result<TtpRun> {
    if data.is_empty() {
        return Err(Error::Argument(format!("subject {} has no frames", data.id())));
    }
    let mut trace = Vec::with_capacity(data.len());
    let mut updates = 0usize;
    for t in 0..data.len() {
        let img = &data.frames[t].image;
        let mut loss_self = None;
        let mut pre_update = None;
        if t >= 1 {
            pre_update = Some(ctx.predict(store, img)?);
            for _ in 0..ctx.cfg.update_iters_per_frame {
                let step = step0 + updates as u64;
                let mut rng = step_rng(ctx.cfg.seed ^ 0x6f6e_6c69, step);
                let pairs: Vec<(usize, usize)> = (0..ctx.cfg.batch_size).map(|_| (t, rng.gen_range(0..t))).collect();
                loss_self = Some(ctx.update(store, data, &pairs, step)?);
                updates += 1;
            }
        }
        let prediction = ctx.predict(store, img)?;
        trace.push(TraceRow {
            frame_index: data.frames[t].frame_index,
            loss_self,
            prediction,
            pre_update,
        });
    }
    Ok(finish(data, trace, updates))
}

/// Number of optimizer steps an online run over `n` frames takes.
pub fn online_step_count(n: usize, iters: usize) -> usize {
    n.saturating_sub(1) * iters
}

/// Pool personalization: the same number of steps as an online run, each on
/// random distinct (target, source) pairs from the shuffled pool, then one
/// prediction pass over every frame with the final weights.
pub fn ttp_offline(ctx: &TtpContext<'_>, store: &mut ParamStore, data: &SubjectDataset, step0: u64) -> Result<TtpRun> {
    if data.is_empty() {
        return Err(Error::Argument(format!("subject {} has no frames", data.id())));
    }
    let n = data.len();
    let steps = online_step_count(n, ctx.cfg.update_iters_per_frame);
    let mut losses = vec![None; n];
    for k in 0..steps {
        let step = step0 + k as u64;
        let mut rng = step_rng(ctx.cfg.seed ^ 0x6f66_666c, step);
        let pairs: Vec<(usize, usize)> = (0..ctx.cfg.batch_size)
            .map(|_| {
                let t = rng.gen_range(0..n);
                let mut s = rng.gen_range(0..n - 1);
                if s >= t {
                    s += 1;
                }
                (t, s)
            })
            .collect();
        let l = ctx.update(store, data, &pairs, step)?;
        losses[pairs[0].0] = Some(l);
    }
    let mut trace = Vec::with_capacity(n);
    for (i, f) in data.frames.iter().enumerate() {
        trace.push(TraceRow {
            frame_index: f.frame_index,
            loss_self: losses[i],
            prediction: ctx.predict(store, &f.image)?,
            pre_update: None,
        });
    }
    Ok(finish(data, trace, steps))
}

fn finish(data: &SubjectDataset, trace: Vec<TraceRow>, updates: usize) -> TtpRun {
    TtpRun {
        subject_id: data.id(),
        predictions: trace.iter().map(|r| r.prediction.clone()).collect(),
        trace,
        updates,
    }
}

/// Runs the configured scenario over several subjects in order, applying
/// the re-initialization policy at each switch. Each subject's random
/// streams depend only on its id, so per-subject re-initialization makes
/// results independent of subject order.
pub fn run_subjects(ctx: &TtpContext<'_>, checkpoint: &ParamStore, subjects: &[SubjectDataset]) -> Result<Vec<TtpRun>> {
    let mut state = TtpState::new(checkpoint, ctx.cfg);
    let mut runs = Vec::with_capacity(subjects.len());
    for d in subjects {
        state = reinit_if_needed(state, d.id(), checkpoint, ctx.cfg);
        let step0 = (d.id() as u64) << 32;
        let run = match ctx.cfg.scenario {
            Scenario::Online => ttp_online(ctx, &mut state.store, d, step0)?,
            Scenario::Offline => ttp_offline(ctx, &mut state.store, d, step0)?,
        };
        runs.push(run);
    }
    Ok(runs)
}

/// Plain inference over every frame.
pub fn predict_all(
    store: &ParamStore,
    model: &ModelConfig,
    variant: Variant,
    data: &SubjectDataset,
) -> Result<Vec<KeypointSet>> {
    data.frames
        .iter()
        .map(|f| predict_keypoints(store, model, variant, &f.image))
        .collect()
}

pub fn pck_metric() -> Metric {
    Metric::Pck { torso: TORSO_PAIR }
}

/// Mean PCK of predictions against a subject's labels.
pub fn subject_pck(preds: &[KeypointSet], data: &SubjectDataset) -> f64 {
    let gts: Vec<KeypointSet> = data.frames.iter().map(|f| f.gt_joints.clone()).collect();
    evaluate(preds, &gts, pck_metric()).mean
}

/// For each length `L`, personalize on the first `L` frames of each subject
/// (offline, `(L - 1) * iters` steps, starting from the checkpoint) and
/// report PCK over all of that subject's frames, pooled over subjects.
pub fn simulate_video_length(
    ctx: &TtpContext<'_>,
    checkpoint: &ParamStore,
    subjects: &[SubjectDataset],
    lengths: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for d in subjects {
            if len == 0 || len > d.len() {
                return Err(Error::Argument(format!(
                    "video length {len} is outside 1..={} for subject {}",
                    d.len(),
                    d.id()
                )));
            }
            let mut store = prepared(checkpoint, ctx.cfg);
            let pool = d.prefix(len);
            let step0 = ((d.id() as u64) << 32) ^ ((len as u64) << 16);
            ttp_offline(ctx, &mut store, &pool, step0)?;
            preds.extend(predict_all(&store, ctx.model, ctx.variant, d)?);
            gts.extend(d.frames.iter().map(|f| f.gt_joints.clone()));
        }
        rows.push((len, evaluate(&preds, &gts, pck_metric()).mean));
    }
    Ok(rows)
}
