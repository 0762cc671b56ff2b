//! The workflow behind each subcommand. Every function takes a resolved,
//! validated [`RunConfig`] and returns what it wrote so callers (and tests)
//! can inspect it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttpose_core::eval::{
    evaluate, improvement_curve, render_visualization, report_csv, smooth_predictions, Curve, ReportRow, VisInput,
    NO_TTP,
};
use ttpose_core::keypoints::{decode_keypoints, GridScale, HeatmapStack, KeypointSet, Refine};
use ttpose_core::model::{forward, init_model, reconstruct};
use ttpose_core::posenet::{ModelConfig, Variant};
use ttpose_core::puppet::{build_dataset, load_dataset, save_dataset, split_subjects, SubjectDataset};
use ttpose_core::trainer::{steps_done, train, TrainOutput};
use ttpose_core::transformer::{affinity_csv, Mode};
use ttpose_core::ttp::{pck_metric, predict_all, run_subjects, simulate_video_length, Scenario, TtpContext, TtpRun};
use ttpose_core::{Error, ParamStore, Result, Tape};

use crate::config::RunConfig;

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| Error::Argument(format!("unknown variant {s:?}")))
}

/// Test subjects of the dataset on disk, ordered by id.
fn test_subjects(cfg: &RunConfig) -> Result<Vec<SubjectDataset>> {
    let (_, mut test) = split_subjects(load_dataset(&cfg.data_dir)?);
    if test.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no test subjects",
            cfg.data_dir.display()
        )));
    }
    test.sort_by_key(|d| d.id());
    Ok(test)
}

// ---------------------------------------------------------------- gen

pub struct GenSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub frames: usize,
}

pub fn gen(cfg: &RunConfig, force: bool) -> Result<GenSummary> {
    let dir = &cfg.data_dir;
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::Argument(format!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let ds = build_dataset(&cfg.data)?;
    if occupied {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(&ds, dir)?;
    let frames = ds.iter().map(|d| d.len()).sum();
    let (tr, te) = split_subjects(ds);
    let summary = GenSummary {
        n_train: tr.len(),
        n_test: te.len(),
        frames,
    };
    println!(
        "wrote {} train + {} test subjects ({} frames, {} px, {} labelled joints) to {}",
        summary.n_train,
        summary.n_test,
        summary.frames,
        cfg.data.image_size,
        cfg.data.k_sup,
        dir.display()
    );
    Ok(summary)
}

// ---------------------------------------------------------------- train

const MODEL_FILE: &str = "model.json";

pub fn train_cmd(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let variant = cfg.train.variant;
    let (train_sets, _) = split_subjects(load_dataset(&cfg.data_dir)?);
    if train_sets.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no training subjects",
            cfg.data_dir.display()
        )));
    }
    let out = TrainOutput {
        dir: cfg.model_dir(variant.name()),
    };
    let init = if resume {
        let store = ParamStore::load(&out.checkpoint())?;
        println!("resuming {variant} from step {}", steps_done(&store));
        store
    } else {
        init_model(&cfg.model, variant, cfg.train.seed)?
    };
    println!("training {variant}: lambda = {:e}", cfg.train.effective_lambda());
    write(
        &out.dir.join(MODEL_FILE),
        serde_json::to_string_pretty(&cfg.model).expect("serializable"),
    )?;
    write(&out.dir.join("run_config.toml"), cfg.to_toml())?;
    let result = train(&train_sets, &cfg.model, &cfg.train, init, Some(&out))?;
    if let Some(last) = result.log.last() {
        println!(
            "{variant} finished at step {}: total {:.4} sup {:.4} self {:.4}",
            last.step + 1,
            last.total,
            last.loss_sup,
            last.loss_self
        );
    }
    Ok(out.checkpoint())
}

/// Loads a trained model and the configuration it was trained with,
/// checking it against the dataset's joint count.
pub fn load_model(cfg: &RunConfig, variant: Variant, k_sup: usize) -> Result<(ModelConfig, ParamStore)> {
    let dir = cfg.model_dir(variant.name());
    let out = TrainOutput { dir: dir.clone() };
    let path = dir.join(MODEL_FILE);
    let mcfg: ModelConfig = match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t).map_err(|e| Error::format(&path, e.to_string()))?,
        Err(_) => cfg.model.clone(),
    };
    let store = ParamStore::load(&out.checkpoint())?;
    if mcfg.k_sup != k_sup {
        return Err(Error::Config(format!(
            "checkpoint {} predicts {} joints but the dataset labels {k_sup}",
            out.checkpoint().display(),
            mcfg.k_sup
        )));
    }
    Ok((mcfg, store))
}

// ---------------------------------------------------------------- ttp

/// Predictions of one (variant, scenario) over the test subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub variant: String,
    pub scenario: String,
    pub subjects: Vec<SubjectPredictions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectPredictions {
    pub subject_id: usize,
    pub frames: Vec<KeypointSet>,
}

impl PredictionFile {
    pub fn path(dir: &Path, variant: &str, scenario: &str) -> PathBuf {
        dir.join(format!("{variant}_{scenario}.json"))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path(dir, &self.variant, &self.scenario);
        write(&path, serde_json::to_string(self).expect("serializable"))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// What to run on top of the configured scenario.
#[derive(Clone, Debug, Default)]
pub struct TtpRequest {
    /// Plain inference instead of personalization.
    pub no_ttp: bool,
    pub ablate_iters: bool,
    pub video_lengths: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct TtpOutcome {
    pub mpck_none: f64,
    pub mpck: Option<f64>,
    /// `(iters, mPCK)` rows of the update-count sweep.
    pub ablation: Vec<(usize, f64)>,
    pub video_length: Vec<(usize, f64)>,
}

fn pooled_pck(preds: &[Vec<KeypointSet>], data: &[SubjectDataset]) -> f64 {
    let p: Vec<KeypointSet> = preds.iter().flatten().cloned().collect();
    let g: Vec<KeypointSet> = data
        .iter()
        .flat_map(|d| d.frames.iter().map(|f| f.gt_joints.clone()))
        .collect();
    evaluate(&p, &g, pck_metric()).mean
}

fn prediction_file(
    variant: Variant,
    scenario: &str,
    data: &[SubjectDataset],
    preds: Vec<Vec<KeypointSet>>,
) -> PredictionFile {
    PredictionFile {
        variant: variant.name().into(),
        scenario: scenario.into(),
        subjects: data
            .iter()
            .zip(preds)
            .map(|(d, frames)| SubjectPredictions {
                subject_id: d.id(),
                frames,
            })
            .collect(),
    }
}

fn frame_pck(pred: &KeypointSet, gt: &KeypointSet) -> Option<f64> {
    evaluate(std::slice::from_ref(pred), std::slice::from_ref(gt), pck_metric()).frame_score(0)
}

fn trace_csv(runs: &[TtpRun], data: &[SubjectDataset]) -> String {
    let mut s = String::from("subject,frame,loss_self,pck_before_update,pck\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    for (run, d) in runs.iter().zip(data) {
        for row in &run.trace {
            let gt = &d.frames[row.frame_index].gt_joints;
            let before = row.pre_update.as_ref().and_then(|p| frame_pck(p, gt));
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                run.subject_id,
                row.frame_index,
                opt(row.loss_self),
                opt(before),
                opt(frame_pck(&row.prediction, gt))
            );
        }
    }
    s
}

fn table_csv(head: &str, rows: &[(usize, f64)]) -> String {
    let mut s = format!("{head},mpck\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v:.4}");
    }
    s
}

pub fn ttp_cmd(cfg: &RunConfig, variant: Variant, req: &TtpRequest) -> Result<TtpOutcome> {
    let data = test_subjects(cfg)?;
    let k_sup = data[0].frames[0].gt_joints.len();
    let (mcfg, store) = load_model(cfg, variant, k_sup)?;
    let pred_dir = cfg.predictions_dir();
    let mut outcome = TtpOutcome::default();

    let none: Vec<Vec<KeypointSet>> = data
        .iter()
        .map(|d| predict_all(&store, &mcfg, variant, d))
        .collect::<Result<_>>()?;
    outcome.mpck_none = pooled_pck(&none, &data);
    prediction_file(variant, NO_TTP, &data, none).save(&pred_dir)?;
    println!("{variant} {NO_TTP}: mPCK {:.4}", outcome.mpck_none);
    if req.no_ttp {
        return Ok(outcome);
    }
    if variant == Variant::Baseline {
        println!("baseline has no self-supervised task; wrote plain inference only");
        return Ok(outcome);
    }

    let scenario = cfg.ttp.scenario.name();
    let ctx = TtpContext::new(&mcfg, variant, &cfg.ttp)?;
    let runs = run_subjects(&ctx, &store, &data)?;
    let preds: Vec<Vec<KeypointSet>> = runs.iter().map(|r| r.predictions.clone()).collect();
    let mpck = pooled_pck(&preds, &data);
    outcome.mpck = Some(mpck);
    prediction_file(variant, scenario, &data, preds).save(&pred_dir)?;
    let trace_path = cfg
        .out_dir
        .join("traces")
        .join(format!("{}_{scenario}", variant.name()))
        .join("ttp_trace.csv");
    write(&trace_path, trace_csv(&runs, &data))?;
    println!(
        "{variant} {scenario}: mPCK {mpck:.4} ({:+.4} vs {NO_TTP}), {} updates",
        mpck - outcome.mpck_none,
        runs.iter().map(|r| r.updates).sum::<usize>()
    );

    if req.ablate_iters {
        for iters in 1..=4 {
            let tcfg = ttpose_core::ttp::TtpConfig {
                update_iters_per_frame: iters,
                ..cfg.ttp.clone()
            };
            let ctx = TtpContext::new(&mcfg, variant, &tcfg)?;
            let runs = run_subjects(&ctx, &store, &data)?;
            let preds: Vec<Vec<KeypointSet>> = runs.into_iter().map(|r| r.predictions).collect();
            outcome.ablation.push((iters, pooled_pck(&preds, &data)));
        }
        let table = table_csv("iters", &outcome.ablation);
        write(
            &cfg.report_dir()
                .join(format!("ablate_iters_{}_{scenario}.csv", variant.name())),
            &table,
        )?;
        print!("{table}");
    }

    if !req.video_lengths.is_empty() {
        let tcfg = ttpose_core::ttp::TtpConfig {
            scenario: Scenario::Offline,
            ..cfg.ttp.clone()
        };
        let ctx = TtpContext::new(&mcfg, variant, &tcfg)?;
        outcome.video_length = simulate_video_length(&ctx, &store, &data, &req.video_lengths)?;
        let table = table_csv("length", &outcome.video_length);
        write(
            &cfg.report_dir().join(format!("video_length_{}.csv", variant.name())),
            &table,
        )?;
        print!("{table}");
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- eval

/// Per-frame PCK of every subject, in subject order; frames without a
/// usable torso score zero.
fn frame_scores(file: &PredictionFile, data: &[SubjectDataset]) -> Result<Vec<Vec<f64>>> {
    aligned(file, data)?
        .into_iter()
        .map(|(preds, d)| {
            let gts: Vec<KeypointSet> = d.frames.iter().map(|f| f.gt_joints.clone()).collect();
            let r = evaluate(&preds.frames, &gts, pck_metric());
            Ok((0..gts.len()).map(|i| r.frame_score(i).unwrap_or(0.0)).collect())
        })
        .collect()
}

fn aligned<'a>(
    file: &'a PredictionFile,
    data: &'a [SubjectDataset],
) -> Result<Vec<(&'a SubjectPredictions, &'a SubjectDataset)>> {
    file.subjects
        .iter()
        .map(|s| {
            let d = data.iter().find(|d| d.id() == s.subject_id).ok_or_else(|| {
                Error::Validation(format!(
                    "{}_{} predicts subject {} which is not a test subject",
                    file.variant, file.scenario, s.subject_id
                ))
            })?;
            if d.len() != s.frames.len() {
                return Err(Error::Validation(format!(
                    "{}_{} has {} frames for subject {} but the dataset has {}",
                    file.variant,
                    file.scenario,
                    s.frames.len(),
                    s.subject_id,
                    d.len()
                )));
            }
            Ok((s, d))
        })
        .collect()
}

fn file_mpck(file: &PredictionFile, data: &[SubjectDataset], smooth: Option<(usize, usize)>) -> Result<f64> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (s, d) in aligned(file, data)? {
        match smooth {
            Some((w, k)) => p.extend(smooth_predictions(&s.frames, w, k)?),
            None => p.extend(s.frames.iter().cloned()),
        }
        g.extend(d.frames.iter().map(|f| f.gt_joints.clone()));
    }
    Ok(evaluate(&p, &g, pck_metric()).mean)
}

pub struct EvalOutcome {
    pub rows: Vec<ReportRow>,
    pub curves: BTreeMap<String, Curve>,
    pub report: PathBuf,
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<EvalOutcome> {
    let dir = cfg.predictions_dir();
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if paths.is_empty() {
        return Err(Error::Validation(format!(
            "no predictions in {}; run `ttpose ttp` first",
            dir.display()
        )));
    }
    paths.sort();
    let data = test_subjects(cfg)?;
    let files: Vec<PredictionFile> = paths.iter().map(|p| PredictionFile::load(p)).collect::<Result<_>>()?;
    let smooth = cfg
        .eval
        .smooth
        .then_some((cfg.eval.savgol_window, cfg.eval.savgol_poly));

    let mut rows = Vec::new();
    for f in &files {
        rows.push(ReportRow {
            variant: f.variant.clone(),
            scenario: f.scenario.clone(),
            mean: file_mpck(f, &data, None)?,
            smoothed: smooth.map(|s| file_mpck(f, &data, Some(s))).transpose()?,
        });
    }

    let mut curves = BTreeMap::new();
    for f in files.iter().filter(|f| f.scenario != NO_TTP) {
        let Some(base) = files.iter().find(|b| b.variant == f.variant && b.scenario == NO_TTP) else {
            continue;
        };
        let curve = improvement_curve(
            &frame_scores(f, &data)?,
            &frame_scores(base, &data)?,
            cfg.eval.curve_window,
        )?;
        curves.insert(format!("{}_{}", f.variant, f.scenario), curve);
    }

    let out = cfg.report_dir();
    let named: BTreeMap<String, (Curve, String, String)> = curves
        .iter()
        .map(|(k, c)| (k.clone(), (c.clone(), "frame".to_string(), "pck_gain".to_string())))
        .collect();
    ttpose_core::eval::emit_report(&rows, &named, &out)?;
    print!("{}", report_csv(&rows));
    Ok(EvalOutcome {
        rows,
        curves,
        report: out.join("report.csv"),
    })
}

// ---------------------------------------------------------------- vis

#[derive(Clone, Debug)]
pub struct VisRequest {
    pub variant: Variant,
    /// Test subject; the first one when unset.
    pub subject: Option<usize>,
    pub frame: usize,
    pub scale: usize,
}

pub struct VisOutcome {
    pub image: PathBuf,
    pub arrows: usize,
}

pub fn vis_cmd(cfg: &RunConfig, req: &VisRequest) -> Result<VisOutcome> {
    let data = test_subjects(cfg)?;
    let d = match req.subject {
        Some(id) => data
            .iter()
            .find(|d| d.id() == id)
            .ok_or_else(|| Error::Argument(format!("subject {id} is not a test subject")))?,
        None => &data[0],
    };
    let frame = d.frames.get(req.frame).ok_or_else(|| {
        Error::Argument(format!(
            "frame {} is outside subject {} ({} frames)",
            req.frame,
            d.id(),
            d.len()
        ))
    })?;
    let k_sup = frame.gt_joints.len();
    let (mcfg, store) = load_model(cfg, req.variant, k_sup)?;

    let mut tape = Tape::new();
    let b = store.bind_constants(&mut tape);
    let x = tape.constant(frame.image.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mode = Mode {
        training: false,
        rng: &mut rng,
    };
    let fwd = forward(&mut tape, &b, &mcfg, req.variant, x, true, &mut mode)?;
    let scale = GridScale { stride: mcfg.stride() };
    let sup = decode_keypoints(
        &HeatmapStack::new(tape.value(fwd.h_sup).clone())?,
        scale,
        Refine::QuarterOffset,
    );
    let self_points = match fwd.condensed {
        Some(c) => {
            let v = tape.value(c.coords);
            KeypointSet::new(v.data().chunks(2).map(|p| scale.to_image([p[0], p[1]])).collect())
        }
        None => KeypointSet::new(Vec::new()),
    };
    let recon = if fwd.rendered.is_some() {
        let src_idx = if req.frame == 0 { d.len().min(2) - 1 } else { 0 };
        let src = tape.constant(d.frames[src_idx].image.clone());
        let r = reconstruct(&mut tape, &b, &fwd, src)?;
        Some(tape.value(r).clone())
    } else {
        None
    };
    let affinity = fwd.affinity.map(|w| tape.value(w).clone());
    let path = cfg
        .out_dir
        .join("vis")
        .join(format!("vis_{}_s{}_f{}.png", req.variant.name(), d.id(), req.frame));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let input = VisInput {
        image: &frame.image,
        self_points: &self_points,
        sup_points: &sup,
        affinity: affinity.as_ref(),
        reconstruction: recon.as_ref(),
    };
    let arrows = render_visualization(&input, cfg.eval.vis_threshold, req.scale, &path)?;
    if let Some(w) = &affinity {
        write(&path.with_extension("affinity.csv"), affinity_csv(w))?;
    }
    println!(
        "wrote {} ({arrows} correspondences above {})",
        path.display(),
        cfg.eval.vis_threshold
    );
    Ok(VisOutcome { image: path, arrows })
}
