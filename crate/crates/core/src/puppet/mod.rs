//! Synthetic articulated "puppet" subjects.
//!
//! A subject is a fixed appearance (limb colours, widths, proportions,
//! background); a pose is a vector of joint angles plus root placement.
//! Forward kinematics gives the eleven skeleton joints; the first `k_sup`
//! of them (in [`LABELED_ORDER`]) are the supervised keypoints.

mod dataset;
mod render;

pub use dataset::{
    build_dataset, build_subject, load_dataset, read_manifest, save_dataset, split_subjects, DatasetConfig, Frame,
    Manifest, ManifestSubject, SubjectDataset,
};
pub use render::{render_frame, OutOfBounds};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_ANGLES: usize = 10;
pub const NUM_LIMBS: usize = 10;
pub const NUM_JOINTS: usize = 11;
/// Torso length as a fraction of image size before `torso_scale`.
pub const BASE_TORSO: f64 = 0.22;
/// Widths in [`SubjectSpec::limb_widths`] are pixels at this image size.
pub const REFERENCE_SIZE: f64 = 64.0;
pub const JOINT_MARGIN: f64 = 2.0;

/// Skeleton joint ids.
pub mod joint {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const PELVIS: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const L_HAND: usize = 4;
    pub const R_ELBOW: usize = 5;
    pub const R_HAND: usize = 6;
    pub const L_KNEE: usize = 7;
    pub const L_FOOT: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_FOOT: usize = 10;
}

/// Supervised keypoints are a prefix of this list. Neck and pelvis sit at
/// indices 1 and 2 so every `k_sup >= 3` keeps the torso.
pub const LABELED_ORDER: [usize; NUM_JOINTS] = [
    joint::HEAD,
    joint::NECK,
    joint::PELVIS,
    joint::L_HAND,
    joint::R_HAND,
    joint::L_FOOT,
    joint::R_FOOT,
    joint::L_ELBOW,
    joint::R_ELBOW,
    joint::L_KNEE,
    joint::R_KNEE,
];

/// Torso pair inside the supervised keypoint list (neck, pelvis).
pub const TORSO_PAIR: (usize, usize) = (1, 2);

/// Angle ids into [`PoseSample::joint_angles`].
pub mod angle {
    pub const LEAN: usize = 0;
    pub const HEAD_TILT: usize = 1;
    pub const L_SHOULDER: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const R_SHOULDER: usize = 4;
    pub const R_ELBOW: usize = 5;
    pub const L_HIP: usize = 6;
    pub const L_KNEE: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
}

/// Inclusive `(lo, hi)` limits per angle, radians.
pub const ANGLE_LIMITS: [(f64, f64); NUM_ANGLES] = [
    (-0.35, 0.35),
    (-0.5, 0.5),
    (0.1, 2.2),
    (0.0, 2.0),
    (0.1, 2.2),
    (0.0, 2.0),
    (-0.2, 0.9),
    (0.0, 1.6),
    (-0.2, 0.9),
    (0.0, 1.6),
];

/// Segment lengths as fractions of image size (torso excluded).
pub mod length {
    pub const HEAD: f64 = 0.09;
    pub const UPPER_ARM: f64 = 0.14;
    pub const FOREARM: f64 = 0.13;
    pub const THIGH: f64 = 0.16;
    pub const SHIN: f64 = 0.15;
}

/// Limb ids, also the draw order (back to front).
pub mod limb {
    pub const R_THIGH: usize = 0;
    pub const R_SHIN: usize = 1;
    pub const R_UPPER_ARM: usize = 2;
    pub const R_FOREARM: usize = 3;
    pub const TORSO: usize = 4;
    pub const L_THIGH: usize = 5;
    pub const L_SHIN: usize = 6;
    pub const L_UPPER_ARM: usize = 7;
    pub const L_FOREARM: usize = 8;
    pub const HEAD: usize = 9;
}

/// `(from, to)` joints of each limb; the head limb is a disc at `to`.
pub const LIMB_JOINTS: [(usize, usize); NUM_LIMBS] = [
    (joint::PELVIS, joint::R_KNEE),
    (joint::R_KNEE, joint::R_FOOT),
    (joint::NECK, joint::R_ELBOW),
    (joint::R_ELBOW, joint::R_HAND),
    (joint::PELVIS, joint::NECK),
    (joint::PELVIS, joint::L_KNEE),
    (joint::L_KNEE, joint::L_FOOT),
    (joint::NECK, joint::L_ELBOW),
    (joint::L_ELBOW, joint::L_HAND),
    (joint::NECK, joint::HEAD),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    Flat,
    Gradient,
    Noise,
}

/// Which hue band a subject's limb colours come from. Train and test bands
/// are disjoint so held-out subjects are out of distribution in appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Train,
    Test,
}

impl Pool {
    pub fn hue_range(self) -> (f64, f64) {
        match self {
            Pool::Train => (0.0, 0.5),
            Pool::Test => (0.5, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: usize,
    pub appearance_seed: u64,
    pub pool: Pool,
    pub limb_colors: Vec<[f64; 3]>,
    pub limb_widths: Vec<f64>,
    pub torso_scale: f64,
    pub background_style: BackgroundStyle,
    pub background_colors: [[f64; 3]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub joint_angles: [f64; NUM_ANGLES],
    /// Pelvis position as a fraction of image size.
    pub root_position: [f64; 2],
    pub global_scale: f64,
}

/// Train-pool subject for `seed`.
pub fn sample_subject(seed: u64) -> SubjectSpec {
    sample_subject_in(seed, 0, Pool::Train)
}

/// Deterministic subject appearance for `(seed, pool)`.
pub fn sample_subject_in(seed: u64, subject_id: usize, pool: Pool) -> SubjectSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a99e_a4a1_c0de);
    let (h_lo, h_hi) = pool.hue_range();
    let base_hue = rng.gen_range(h_lo..h_hi);
    let half_band = 0.5 * (h_hi - h_lo);
    let limb_colors = (0..NUM_LIMBS)
        .map(|_| {
            // hues stay inside the pool band around a per-subject base hue
            let off = rng.gen_range(-0.5..0.5) * half_band;
            let hue = h_lo + (base_hue - h_lo + off).rem_euclid(h_hi - h_lo);
            hsv_to_rgb(hue, rng.gen_range(0.55..0.95), rng.gen_range(0.55..0.95))
        })
        .collect();
    let nominal = [4.0, 3.5, 2.8, 2.6, 5.5, 4.0, 3.5, 2.8, 2.6, 4.2];
    let limb_widths = nominal.iter().map(|w| w * rng.gen_range(0.85..1.15)).collect();
    let torso_scale = rng.gen_range(0.85..1.15);
    let background_style = match rng.gen_range(0..3) {
        0 => BackgroundStyle::Flat,
        1 => BackgroundStyle::Gradient,
        _ => BackgroundStyle::Noise,
    };
    let gray = |r: &mut ChaCha8Rng| {
        let g = r.gen_range(0.1..0.45);
        [g + r.gen_range(-0.05..0.05), g, g + r.gen_range(-0.05..0.05)]
    };
    let background_colors = [gray(&mut rng), gray(&mut rng)];
    SubjectSpec {
        subject_id,
        appearance_seed: seed,
        pool,
        limb_colors,
        limb_widths,
        torso_scale,
        background_style,
        background_colors,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// How consecutive poses relate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    /// Independent draws.
    Unordered,
    /// Random walk with per-frame angle steps bounded by `max_delta`.
    Sequential { max_delta: f64 },
}

/// Root jitter (fraction of size) around the image-centre placement.
pub const ROOT_JITTER: f64 = 0.04;
const ROOT_CENTRE: [f64; 2] = [0.5, 0.55];

/// Independent pose within the joint limits.
pub fn sample_pose(_subject: &SubjectSpec, rng: &mut impl Rng) -> PoseSample {
    let mut joint_angles = [0.0; NUM_ANGLES];
    for (a, &(lo, hi)) in joint_angles.iter_mut().zip(&ANGLE_LIMITS) {
        *a = rng.gen_range(lo..=hi);
    }
    PoseSample {
        joint_angles,
        root_position: [
            ROOT_CENTRE[0] + rng.gen_range(-ROOT_JITTER..=ROOT_JITTER),
            ROOT_CENTRE[1] + rng.gen_range(-ROOT_JITTER..=ROOT_JITTER),
        ],
        global_scale: rng.gen_range(0.9..=1.1),
    }
}

/// Next pose of a random walk: each angle moves by at most `max_delta`,
/// reflecting at its limits. Root and scale are held fixed.
pub fn step_pose(prev: &PoseSample, max_delta: f64, rng: &mut impl Rng) -> PoseSample {
    let mut next = prev.clone();
    if max_delta <= 0.0 {
        return next;
    }
    for (a, &(lo, hi)) in next.joint_angles.iter_mut().zip(&ANGLE_LIMITS) {
        let mut v = *a + rng.gen_range(-max_delta..=max_delta);
        if v > hi {
            v = 2.0 * hi - v;
        }
        if v < lo {
            v = 2.0 * lo - v;
        }
        *a = v.clamp(lo, hi);
    }
    next
}

pub fn within_limits(pose: &PoseSample) -> bool {
    pose.joint_angles
        .iter()
        .zip(&ANGLE_LIMITS)
        .all(|(&a, &(lo, hi))| a >= lo && a <= hi)
}

/// Unit direction at angle `phi` measured from straight down (+y), turning
/// toward +x.
fn dir(phi: f64) -> [f64; 2] {
    [phi.sin(), phi.cos()]
}

fn advance(p: [f64; 2], len: f64, phi: f64) -> [f64; 2] {
    let d = dir(phi);
    [p[0] + len * d[0], p[1] + len * d[1]]
}

/// Pixel length of every segment for a subject/pose at `size`.
#[derive(Clone, Copy, Debug)]
pub struct SegmentLengths {
    pub torso: f64,
    pub head: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl SegmentLengths {
    pub fn new(subject: &SubjectSpec, pose: &PoseSample, size: usize) -> Self {
        let s = size as f64 * pose.global_scale;
        Self {
            torso: subject.torso_scale * BASE_TORSO * s,
            head: length::HEAD * s,
            upper_arm: length::UPPER_ARM * s,
            forearm: length::FOREARM * s,
            thigh: length::THIGH * s,
            shin: length::SHIN * s,
        }
    }
}

/// All eleven joints in pixel coordinates `(x, y)`.
pub fn forward_kinematics(subject: &SubjectSpec, pose: &PoseSample, size: usize) -> [[f64; 2]; NUM_JOINTS] {
    use angle as a;
    let len = SegmentLengths::new(subject, pose, size);
    let th = &pose.joint_angles;
    let n = size as f64;
    let pelvis = [pose.root_position[0] * n, pose.root_position[1] * n];
    let lean = th[a::LEAN];
    let neck = advance(pelvis, len.torso, std::f64::consts::PI + lean);
    let head = advance(neck, len.head, std::f64::consts::PI + lean + th[a::HEAD_TILT]);
    let l_up = lean - th[a::L_SHOULDER];
    let l_elbow = advance(neck, len.upper_arm, l_up);
    let l_hand = advance(l_elbow, len.forearm, l_up - th[a::L_ELBOW]);
    let r_up = lean + th[a::R_SHOULDER];
    let r_elbow = advance(neck, len.upper_arm, r_up);
    let r_hand = advance(r_elbow, len.forearm, r_up + th[a::R_ELBOW]);
    let l_th = -th[a::L_HIP];
    let l_knee = advance(pelvis, len.thigh, l_th);
    let l_foot = advance(l_knee, len.shin, l_th + th[a::L_KNEE]);
    let r_th = th[a::R_HIP];
    let r_knee = advance(pelvis, len.thigh, r_th);
    let r_foot = advance(r_knee, len.shin, r_th - th[a::R_KNEE]);
    let mut j = [[0.0; 2]; NUM_JOINTS];
    j[joint::HEAD] = head;
    j[joint::NECK] = neck;
    j[joint::PELVIS] = pelvis;
    j[joint::L_ELBOW] = l_elbow;
    j[joint::L_HAND] = l_hand;
    j[joint::R_ELBOW] = r_elbow;
    j[joint::R_HAND] = r_hand;
    j[joint::L_KNEE] = l_knee;
    j[joint::L_FOOT] = l_foot;
    j[joint::R_KNEE] = r_knee;
    j[joint::R_FOOT] = r_foot;
    j
}

/// The supervised subset of the skeleton, in [`LABELED_ORDER`].
pub fn labeled_joints(all: &[[f64; 2]; NUM_JOINTS], k_sup: usize) -> Vec<[f64; 2]> {
    LABELED_ORDER[..k_sup].iter().map(|&j| all[j]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_is_deterministic() {
        assert_eq!(sample_subject(42), sample_subject(42));
    }

    #[test]
    fn seeds_give_distinct_colours() {
        let mut sets: Vec<Vec<[u64; 3]>> = (0..100u64)
            .map(|s| {
                sample_subject(s)
                    .limb_colors
                    .iter()
                    .map(|c| [c[0].to_bits(), c[1].to_bits(), c[2].to_bits()])
                    .collect()
            })
            .collect();
        sets.sort();
        sets.dedup();
        assert!(sets.len() >= 95);
    }

    #[test]
    fn torso_scale_in_range() {
        for s in 0..500 {
            for pool in [Pool::Train, Pool::Test] {
                let t = sample_subject_in(s, 0, pool).torso_scale;
                assert!((0.7..=1.3).contains(&t));
                assert!(sample_subject_in(s, 0, pool).limb_widths.iter().all(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn zero_delta_walk_repeats_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_pose(&sample_subject(1), &mut rng);
        assert_eq!(step_pose(&p, 0.0, &mut rng), p);
    }

    #[test]
    fn sampled_poses_respect_limits() {
        let subj = sample_subject(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = sample_pose(&subj, &mut rng);
        for _ in 0..1000 {
            assert!(within_limits(&sample_pose(&subj, &mut rng)));
            p = step_pose(&p, 0.3, &mut rng);
            assert!(within_limits(&p));
        }
    }

    #[test]
    fn torso_length_matches_proportions() {
        let subj = sample_subject(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pose = sample_pose(&subj, &mut rng);
        pose.global_scale = 1.0;
        for size in [32, 64, 128] {
            let j = forward_kinematics(&subj, &pose, size);
            let d = ((j[joint::NECK][0] - j[joint::PELVIS][0]).powi(2)
                + (j[joint::NECK][1] - j[joint::PELVIS][1]).powi(2))
            .sqrt();
            assert!((d - subj.torso_scale * BASE_TORSO * size as f64).abs() < 0.5);
        }
    }
}
