use std::sync::OnceLock;

use ttpose_core::model::init_model;
use ttpose_core::posenet::{ModelConfig, Variant, APP, DEC, SUPB, XF};
use ttpose_core::puppet::{build_dataset, split_subjects, DatasetConfig, PoseMode, SubjectDataset};
use ttpose_core::trainer::{train, TrainConfig};
use ttpose_core::ttp::{
    online_step_count, predict_all, reinit_if_needed, run_subjects, simulate_video_length, ttp_offline, ttp_online,
    Reinit, Scenario, TtpConfig, TtpContext, TtpState,
};
use ttpose_core::ParamStore;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        k_self: 6,
        k_sup: 4,
        channels: 8,
        app_channels: 8,
        heads: 2,
        d_ff: 16,
        ..ModelConfig::default()
    }
}

struct Fixture {
    test: Vec<SubjectDataset>,
    trained: Vec<(Variant, ParamStore)>,
}

/// Briefly trained models of both self-supervised variants and three short
/// sequential test subjects.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = DatasetConfig {
            n_train: 2,
            n_test: 3,
            train_frames: 10,
            test_frames: 8,
            image_size: 32,
            k_sup: 4,
            test_mode: PoseMode::Sequential { max_delta: 0.1 },
            ..DatasetConfig::default()
        };
        let (tr, te) = split_subjects(build_dataset(&cfg).unwrap());
        let mcfg = model_cfg();
        let trained = [Variant::FeatShared, Variant::Transformer]
            .into_iter()
            .map(|v| {
                let tc = TrainConfig {
                    variant: v,
                    steps: 6,
                    batch_size: 2,
                    lr_milestones: vec![],
                    lambda: 0.5,
                    ..TrainConfig::default()
                };
                (
                    v,
                    train(&tr, &mcfg, &tc, init_model(&mcfg, v, 1).unwrap(), None)
                        .unwrap()
                        .store,
                )
            })
            .collect();
        Fixture { test: te, trained }
    })
}

fn ttp_cfg(scenario: Scenario, lr: f64) -> TtpConfig {
    TtpConfig {
        scenario,
        lr,
        ..TtpConfig::default()
    }
}

fn prepared(store: &ParamStore, cfg: &TtpConfig) -> ParamStore {
    TtpState::new(store, cfg).store
}

#[test]
fn frozen_groups_are_bitwise_unchanged() {
    let f = fixture();
    let mcfg = model_cfg();
    for (v, store) in &f.trained {
        for scenario in [Scenario::Online, Scenario::Offline] {
            let cfg = TtpConfig {
                lr: 1e-2,
                freeze: vec![SUPB.into(), XF.into(), APP.into(), DEC.into()],
                ..ttp_cfg(scenario, 1e-2)
            };
            let ctx = TtpContext::new(&mcfg, *v, &cfg).unwrap();
            let mut s = prepared(store, &cfg);
            let run = match scenario {
                Scenario::Online => ttp_online(&ctx, &mut s, &f.test[0], 0).unwrap(),
                Scenario::Offline => ttp_offline(&ctx, &mut s, &f.test[0], 0).unwrap(),
            };
            assert_eq!(run.updates, f.test[0].len() - 1);
            let mut moved = 0;
            for (name, t) in store.iter() {
                let frozen = cfg.freeze.iter().any(|p| name.starts_with(p.as_str()));
                let same = t.data() == s.get(name).unwrap().data();
                if frozen {
                    assert!(same, "{v} {scenario:?}: frozen {name} changed");
                } else if !same {
                    moved += 1;
                }
            }
            assert!(moved > 0, "{v} {scenario:?}: nothing was updated");
        }
    }
}

#[test]
fn zero_learning_rate_reproduces_plain_inference() {
    let f = fixture();
    let mcfg = model_cfg();
    for (v, store) in &f.trained {
        for scenario in [Scenario::Online, Scenario::Offline] {
            let cfg = ttp_cfg(scenario, 0.0);
            let ctx = TtpContext::new(&mcfg, *v, &cfg).unwrap();
            let runs = run_subjects(&ctx, store, &f.test).unwrap();
            for (run, d) in runs.iter().zip(&f.test) {
                assert_eq!(
                    run.predictions,
                    predict_all(store, &mcfg, *v, d).unwrap(),
                    "{v} {scenario:?}"
                );
            }
        }
    }
}

#[test]
fn online_predictions_never_see_future_frames() {
    let f = fixture();
    let mcfg = model_cfg();
    for (v, store) in &f.trained {
        let cfg = ttp_cfg(Scenario::Online, 1e-3);
        let ctx = TtpContext::new(&mcfg, *v, &cfg).unwrap();
        let d = &f.test[1];
        let full = ttp_online(&ctx, &mut prepared(store, &cfg), d, 7).unwrap();
        for t in [1, 3, 5] {
            let part = ttp_online(&ctx, &mut prepared(store, &cfg), &d.prefix(t + 1), 7).unwrap();
            assert_eq!(part.predictions[..], full.predictions[..t + 1], "{v}: frame {t}");
        }
        // frame 0 is predicted before any update
        assert!(full.trace[0].loss_self.is_none());
        assert_eq!(
            full.predictions[0],
            predict_all(store, &mcfg, *v, &d.prefix(1)).unwrap()[0]
        );
        assert!(full.trace[1..]
            .iter()
            .all(|r| r.loss_self.is_some() && r.pre_update.is_some()));
        // with a real step the model does move
        assert_ne!(full.predictions, predict_all(store, &mcfg, *v, d).unwrap());
    }
}

#[test]
fn offline_takes_as_many_steps_as_online() {
    let f = fixture();
    let mcfg = model_cfg();
    let (v, store) = &f.trained[1];
    for iters in 1..=3 {
        let mk = |s| TtpConfig {
            update_iters_per_frame: iters,
            ..ttp_cfg(s, 1e-3)
        };
        let (on_cfg, off_cfg) = (mk(Scenario::Online), mk(Scenario::Offline));
        let on_ctx = TtpContext::new(&mcfg, *v, &on_cfg).unwrap();
        let off_ctx = TtpContext::new(&mcfg, *v, &off_cfg).unwrap();
        let d = &f.test[0];
        let mut s_on = prepared(store, &on_cfg);
        let mut s_off = prepared(store, &off_cfg);
        let on = ttp_online(&on_ctx, &mut s_on, d, 0).unwrap();
        let off = ttp_offline(&off_ctx, &mut s_off, d, 0).unwrap();
        assert_eq!(on.updates, off.updates);
        assert_eq!(on.updates, online_step_count(d.len(), iters));
        // Adam step counters agree too
        let name = "enc.c1.w";
        assert_eq!(s_on.entry(name).unwrap().step(), off.updates as u64);
        assert_eq!(s_off.entry(name).unwrap().step(), off.updates as u64);
        assert_eq!(off.predictions.len(), d.len());
    }
}

#[test]
fn per_subject_reinit_makes_subject_order_irrelevant() {
    let f = fixture();
    let mcfg = model_cfg();
    let (v, store) = &f.trained[1];
    let cfg = ttp_cfg(Scenario::Online, 1e-3);
    let ctx = TtpContext::new(&mcfg, *v, &cfg).unwrap();
    let fwd = run_subjects(&ctx, store, &f.test).unwrap();
    let rev_sets: Vec<SubjectDataset> = f.test.iter().rev().cloned().collect();
    let rev = run_subjects(&ctx, store, &rev_sets).unwrap();
    for run in &fwd {
        let other = rev.iter().find(|r| r.subject_id == run.subject_id).unwrap();
        assert_eq!(run.predictions, other.predictions);
    }

    // without re-initialization the second subject starts from adapted weights
    let keep = TtpConfig {
        reinit: Reinit::Never,
        ..cfg.clone()
    };
    let ctx_keep = TtpContext::new(&mcfg, *v, &keep).unwrap();
    let carried = run_subjects(&ctx_keep, store, &f.test).unwrap();
    assert_eq!(carried[0].predictions, fwd[0].predictions);
    assert_ne!(carried[1].predictions, fwd[1].predictions);
}

#[test]
fn reinit_policy_switches_only_on_new_subject() {
    let f = fixture();
    let (_, store) = &f.trained[0];
    let cfg = ttp_cfg(Scenario::Online, 1e-3);
    let mut state = TtpState::new(store, &cfg);
    state = reinit_if_needed(state, 4, store, &cfg);
    let name = "enc.c1.b";
    state.store.get_mut(name).unwrap().data_mut()[0] += 1.0;
    let same = reinit_if_needed(state, 4, store, &cfg);
    assert_ne!(same.store.get(name).unwrap().data(), store.get(name).unwrap().data());
    let next = reinit_if_needed(same, 5, store, &cfg);
    assert_eq!(next.store.get(name).unwrap().data(), store.get(name).unwrap().data());
    assert_eq!(next.subject, Some(5));
}

#[test]
fn video_length_simulation_runs_each_length() {
    let f = fixture();
    let mcfg = model_cfg();
    let (v, store) = &f.trained[1];
    let cfg = ttp_cfg(Scenario::Offline, 1e-3);
    let ctx = TtpContext::new(&mcfg, *v, &cfg).unwrap();
    let rows = simulate_video_length(&ctx, store, &f.test[..2], &[1, 4, 8]).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 4, 8]);
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.1)));
    // a single frame gives no pairs and so no change
    let plain: f64 = {
        let preds: Vec<_> = f.test[..2]
            .iter()
            .flat_map(|d| predict_all(store, &mcfg, *v, d).unwrap())
            .collect();
        let gts: Vec<_> = f.test[..2]
            .iter()
            .flat_map(|d| d.frames.iter().map(|fr| fr.gt_joints.clone()))
            .collect();
        ttpose_core::eval::evaluate(&preds, &gts, ttpose_core::ttp::pck_metric()).mean
    };
    assert_eq!(rows[0].1, plain);
    assert!(simulate_video_length(&ctx, store, &f.test[..1], &[9]).is_err());
}

#[test]
fn configuration_errors() {
    let mcfg = model_cfg();
    assert!(TtpContext::new(&mcfg, Variant::Baseline, &TtpConfig::default()).is_err());
    let bad = TtpConfig {
        lr: -1.0,
        ..TtpConfig::default()
    };
    assert!(TtpContext::new(&mcfg, Variant::Transformer, &bad).is_err());
    let bad = TtpConfig {
        update_iters_per_frame: 0,
        ..TtpConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(serde_json::from_str::<TtpConfig>(r#"{"scenario": "offline", "lrr": 1}"#).is_err());
    let ok: TtpConfig = serde_json::from_str(r#"{"scenario": "offline", "reinit": "never"}"#).unwrap();
    assert_eq!(
        (ok.scenario, ok.reinit, ok.lr),
        (Scenario::Offline, Reinit::Never, 1e-4)
    );
}
