use crate::keypoints::KeypointSet;
use crate::tensor::Tensor;

use super::{
    forward_kinematics, labeled_joints, limb, BackgroundStyle, Frame, PoseSample, SubjectSpec, JOINT_MARGIN,
    LIMB_JOINTS, NUM_JOINTS, REFERENCE_SIZE,
};

/// A pose placed at least one joint closer than the margin to the image
/// border; the caller should draw a different pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutOfBounds {
    pub joint: usize,
}

impl std::fmt::Display for OutOfBounds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "joint {} falls outside the image margin", self.joint)
    }
}

impl std::error::Error for OutOfBounds {}

/// Background colour at pixel `(x, y)`.
pub(crate) fn background_pixel(subject: &SubjectSpec, x: usize, y: usize, size: usize) -> [f64; 3] {
    let [a, b] = subject.background_colors;
    match subject.background_style {
        BackgroundStyle::Flat => a,
        BackgroundStyle::Gradient => {
            let t = y as f64 / (size - 1) as f64;
            [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
        }
        BackgroundStyle::Noise => {
            let t = hash01(subject.appearance_seed, x as u64, y as u64);
            [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
        }
    }
}

fn hash01(seed: u64, x: u64, y: u64) -> f64 {
    let mut h = seed ^ x.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ y.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Draws the puppet over its background. Limbs are shaded capsules with a
/// one-pixel linear coverage ramp at the edge; the head is a disc.
///
/// `gt_joints` holds every skeleton joint in labeled order; dataset
/// assembly keeps the first `k_sup`. Pixel `(row, col)` sits at
/// coordinate `(x, y) = (col, row)`.
pub fn render_frame(subject: &SubjectSpec, pose: &PoseSample, size: usize) -> Result<Frame, OutOfBounds> {
    assert!(size >= 32, "image size must be at least 32");
    let joints = forward_kinematics(subject, pose, size);
    let hi = size as f64 - 1.0 - JOINT_MARGIN;
    for (j, p) in joints.iter().enumerate() {
        if !(p[0] >= JOINT_MARGIN && p[0] <= hi && p[1] >= JOINT_MARGIN && p[1] <= hi) {
            return Err(OutOfBounds { joint: j });
        }
    }
    let px_scale = size as f64 / REFERENCE_SIZE * pose.global_scale;
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let bg = background_pixel(subject, x, y, size);
            for c in 0..3 {
                img[c * plane + y * size + x] = bg[c];
            }
        }
    }
    for (l, &(ja, jb)) in LIMB_JOINTS.iter().enumerate() {
        let radius = 0.5 * subject.limb_widths[l] * px_scale;
        let (a, b) = if l == limb::HEAD {
            (joints[jb], joints[jb])
        } else {
            (joints[ja], joints[jb])
        };
        let radius = if l == limb::HEAD { 2.0 * radius } else { radius };
        let color = subject.limb_colors[l];
        let x0 = (a[0].min(b[0]) - radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + radius + 1.0).ceil() as usize).min(size - 1);
        let y0 = (a[1].min(b[1]) - radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((a[1].max(b[1]) + radius + 1.0).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance([x as f64, y as f64], a, b);
                let cover = (radius - d + 0.5).clamp(0.0, 1.0);
                if cover <= 0.0 {
                    continue;
                }
                let r = (d / radius).min(1.0);
                let shade = 1.0 - 0.35 * r * r;
                for c in 0..3 {
                    let i = c * plane + y * size + x;
                    img[i] = img[i] * (1.0 - cover) + (color[c] * shade).clamp(0.0, 1.0) * cover;
                }
            }
        }
    }
    let image = Tensor::new(&[3, size, size], img).expect("sized buffer");
    let gt_joints = KeypointSet::new(labeled_joints(&joints, NUM_JOINTS));
    Ok(Frame {
        image,
        gt_joints,
        subject_id: subject.subject_id,
        frame_index: 0,
    })
}
