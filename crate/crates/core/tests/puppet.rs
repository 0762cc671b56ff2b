use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttpose_core::keypoints::KeypointSet;
use ttpose_core::puppet::{
    build_dataset, build_subject, forward_kinematics, labeled_joints, load_dataset, sample_pose, sample_subject,
    sample_subject_in, save_dataset, split_subjects, step_pose, DatasetConfig, Pool, PoseMode, SegmentLengths,
    SubjectDataset, NUM_JOINTS,
};
use ttpose_core::Error;

fn small_cfg(mode: PoseMode) -> DatasetConfig {
    DatasetConfig {
        n_train: 5,
        n_test: 3,
        train_frames: 50,
        test_frames: 50,
        image_size: 32,
        k_sup: 6,
        train_mode: mode,
        test_mode: mode,
        seed: 0,
    }
}

fn mean_step(ds: &[SubjectDataset]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for d in ds {
        for w in d.frames.windows(2) {
            for (a, b) in w[0].gt_joints.points.iter().zip(&w[1].gt_joints.points) {
                sum += KeypointSet::distance(*a, *b);
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn counts_and_pools() {
    let ds = build_dataset(&small_cfg(PoseMode::Unordered)).unwrap();
    assert_eq!(ds.len(), 8);
    assert!(ds.iter().all(|d| d.len() == 50));
    for d in &ds {
        for (i, f) in d.frames.iter().enumerate() {
            assert_eq!(f.subject_id, d.id());
            assert_eq!(f.frame_index, i);
            assert_eq!(f.gt_joints.len(), 6);
        }
    }
    let (train, test) = split_subjects(ds);
    assert_eq!((train.len(), test.len()), (5, 3));
    for t in &test {
        assert!(train.iter().all(|r| r.id() != t.id()));
        assert_eq!(t.subject.pool, Pool::Test);
    }
}

#[test]
fn hue_pools_are_disjoint() {
    let hue = |c: [f64; 3]| {
        let (mx, mn) = (c[0].max(c[1]).max(c[2]), c[0].min(c[1]).min(c[2]));
        let d = mx - mn;
        let h = if mx == c[0] {
            ((c[1] - c[2]) / d).rem_euclid(6.0)
        } else if mx == c[1] {
            (c[2] - c[0]) / d + 2.0
        } else {
            (c[0] - c[1]) / d + 4.0
        };
        h / 6.0
    };
    for seed in 0..50 {
        for c in sample_subject_in(seed, 0, Pool::Train).limb_colors {
            assert!(hue(c) < 0.5 + 1e-9);
        }
        for c in sample_subject_in(seed, 0, Pool::Test).limb_colors {
            assert!(hue(c) >= 0.5 - 1e-9);
        }
    }
}

#[test]
fn dataset_is_deterministic() {
    let cfg = small_cfg(PoseMode::Sequential { max_delta: 0.1 });
    assert_eq!(build_dataset(&cfg).unwrap(), build_dataset(&cfg).unwrap());
}

#[test]
fn sequential_moves_less_than_unordered() {
    let seq = build_dataset(&small_cfg(PoseMode::Sequential { max_delta: 0.1 })).unwrap();
    let un = build_dataset(&small_cfg(PoseMode::Unordered)).unwrap();
    assert!(mean_step(&seq) < mean_step(&un));
}

#[test]
fn sequential_step_within_kinematic_bound() {
    let delta = 0.1;
    let subject = sample_subject(3);
    let d = build_subject(
        &subject,
        200,
        64,
        NUM_JOINTS,
        PoseMode::Sequential { max_delta: delta },
        9,
    );
    // every angle moves at most delta, so a joint moves at most
    // delta times the sum over its chain of (segment length x angles above it)
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pose = sample_pose(&subject, &mut rng);
    let mut scaled = pose.clone();
    scaled.global_scale = 1.1;
    let l = SegmentLengths::new(&subject, &scaled, 64);
    let arm = l.torso + 2.0 * l.upper_arm + 3.0 * l.forearm;
    let leg = l.thigh + 2.0 * l.shin;
    let head = l.torso + 2.0 * l.head;
    let bound = delta * arm.max(leg).max(head);
    for w in d.frames.windows(2) {
        for (a, b) in w[0].gt_joints.points.iter().zip(&w[1].gt_joints.points) {
            assert!(KeypointSet::distance(*a, *b) <= bound + 1e-9);
        }
    }
}

#[test]
fn gt_joints_follow_kinematics() {
    let subject = sample_subject(8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pose = sample_pose(&subject, &mut rng);
    let mut checked = 0;
    for _ in 0..50 {
        pose = step_pose(&pose, 0.2, &mut rng);
        if let Ok(f) = ttpose_core::puppet::render_frame(&subject, &pose, 64) {
            let fk = labeled_joints(&forward_kinematics(&subject, &pose, 64), NUM_JOINTS);
            for (a, b) in f.gt_joints.points.iter().zip(&fk) {
                assert!(KeypointSet::distance(*a, *b) < 0.5);
                assert!(a[0] >= 2.0 && a[0] <= 61.0 && a[1] >= 2.0 && a[1] <= 61.0);
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(PoseMode::Unordered);
    cfg.train_frames = 4;
    cfg.test_frames = 3;
    let ds = build_dataset(&cfg).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.iter().zip(&back) {
        assert_eq!(a.subject, b.subject);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            let bits = |f: &ttpose_core::puppet::Frame| f.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(fa), bits(fb));
            assert_eq!(fa.gt_joints, fb.gt_joints);
        }
    }
}

#[test]
fn truncated_frame_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(PoseMode::Unordered);
    cfg.train_frames = 2;
    cfg.test_frames = 2;
    save_dataset(&build_dataset(&cfg).unwrap(), dir.path()).unwrap();
    let victim = dir.path().join("frames").join("1").join("1.bin");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("1.bin"), "{err}");
}

#[test]
fn manifest_count_mismatch_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(PoseMode::Unordered);
    cfg.train_frames = 2;
    cfg.test_frames = 2;
    save_dataset(&build_dataset(&cfg).unwrap(), dir.path()).unwrap();
    let victim = dir.path().join("frames").join("0").join("1.bin");
    std::fs::remove_file(victim).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
}

#[test]
fn corrupt_manifest_names_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{ nope").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest.json"));
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path())
        .unwrap_err()
        .to_string()
        .contains("manifest.json"));
}
