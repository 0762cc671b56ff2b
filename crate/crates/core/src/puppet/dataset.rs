use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::tensor::Tensor;

use super::{render_frame, sample_pose, sample_subject_in, step_pose, Pool, PoseMode, PoseSample, SubjectSpec};

/// One rendered image with its supervised joints in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Tensor<f64>,
    pub gt_joints: KeypointSet,
    pub subject_id: usize,
    pub frame_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub subject: SubjectSpec,
    pub mode: PoseMode,
    pub frames: Vec<Frame>,
}

impl SubjectDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn id(&self) -> usize {
        self.subject.subject_id
    }

    /// The first `n` frames, for simulating shorter videos.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            subject: self.subject.clone(),
            mode: self.mode,
            frames: self.frames[..n.min(self.frames.len())].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub image_size: usize,
    pub k_sup: usize,
    pub train_mode: PoseMode,
    pub test_mode: PoseMode,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 8,
            n_test: 4,
            train_frames: 150,
            test_frames: 100,
            image_size: 64,
            k_sup: 6,
            train_mode: PoseMode::Unordered,
            test_mode: PoseMode::Sequential { max_delta: 0.1 },
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test == 0 {
            return Err(Error::Config("dataset needs at least one subject".into()));
        }
        if self.image_size < 32 || self.image_size > 128 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 4 in 32..=128, got {}",
                self.image_size
            )));
        }
        if !(3..=super::NUM_JOINTS).contains(&self.k_sup) {
            return Err(Error::Config(format!(
                "k_sup must be in 3..={}, got {}",
                super::NUM_JOINTS,
                self.k_sup
            )));
        }
        for mode in [self.train_mode, self.test_mode] {
            if let PoseMode::Sequential { max_delta } = mode {
                if !(max_delta >= 0.0 && max_delta.is_finite()) {
                    return Err(Error::Config("max_delta must be finite and non-negative".into()));
                }
            }
        }
        Ok(())
    }
}

fn subject_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((id as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

const MAX_REDRAWS: usize = 10_000;

/// Renders `n_frames` poses of one subject.
pub fn build_subject(
    subject: &SubjectSpec,
    n_frames: usize,
    size: usize,
    k_sup: usize,
    mode: PoseMode,
    seed: u64,
) -> SubjectDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n_frames);
    let mut prev: Option<PoseSample> = None;
    for index in 0..n_frames {
        let mut attempt = 0;
        let (pose, mut frame) = loop {
            attempt += 1;
            let pose = match (&prev, mode) {
                (Some(p), PoseMode::Sequential { max_delta }) if attempt <= MAX_REDRAWS => {
                    step_pose(p, max_delta, &mut rng)
                }
                // a walk that cannot leave its corner stands still
                (Some(p), PoseMode::Sequential { .. }) => p.clone(),
                _ => sample_pose(subject, &mut rng),
            };
            if let Ok(f) = render_frame(subject, &pose, size) {
                break (pose, f);
            }
        };
        frame.gt_joints.points.truncate(k_sup);
        frame.gt_joints.confidence.truncate(k_sup);
        frame.frame_index = index;
        frames.push(frame);
        prev = Some(pose);
    }
    SubjectDataset {
        subject: subject.clone(),
        mode,
        frames,
    }
}

/// Subjects `0..n_train` draw colours from the train hue band, the rest from
/// the disjoint test band. The whole dataset is a pure function of `cfg`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Vec<SubjectDataset>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_train + cfg.n_test);
    for id in 0..cfg.n_train + cfg.n_test {
        let (pool, mode, n) = if id < cfg.n_train {
            (Pool::Train, cfg.train_mode, cfg.train_frames)
        } else {
            (Pool::Test, cfg.test_mode, cfg.test_frames)
        };
        let s = subject_seed(cfg.seed, id);
        let subject = sample_subject_in(s, id, pool);
        out.push(build_subject(&subject, n, cfg.image_size, cfg.k_sup, mode, s ^ 0xf4a3));
    }
    Ok(out)
}

/// Splits into (train pool, test pool).
pub fn split_subjects(ds: Vec<SubjectDataset>) -> (Vec<SubjectDataset>, Vec<SubjectDataset>) {
    ds.into_iter().partition(|d| d.subject.pool == Pool::Train)
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub mode: PoseMode,
    pub pool: Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub image_size: usize,
    pub k_sup: usize,
    pub subjects: Vec<ManifestSubject>,
}

fn frame_paths(root: &Path, id: usize, idx: usize) -> (PathBuf, PathBuf) {
    let dir = root.join("frames").join(id.to_string());
    (dir.join(format!("{idx}.bin")), dir.join(format!("{idx}.json")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &[SubjectDataset], root: &Path) -> Result<()> {
    let first = ds
        .first()
        .ok_or_else(|| Error::Argument("no subjects to save".into()))?;
    let size = first.frames.first().map(|f| f.image.shape()[1]).unwrap_or(0);
    let k_sup = first.frames.first().map(|f| f.gt_joints.len()).unwrap_or(0);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_size: size,
        k_sup,
        subjects: ds
            .iter()
            .map(|d| ManifestSubject {
                id: d.id(),
                seed: d.subject.appearance_seed,
                n_frames: d.len(),
                mode: d.mode,
                pool: d.subject.pool,
            })
            .collect(),
    };
    for d in ds {
        let dir = root.join("frames").join(d.id().to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in &d.frames {
            let (bin, json) = frame_paths(root, d.id(), f.frame_index);
            let bytes: Vec<u8> = f.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&bin, &bytes)?;
            let text = serde_json::to_string(&f.gt_joints).expect("serializable");
            write_file(&json, text.as_bytes())?;
        }
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    write_file(&path, text.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", m.version),
        ));
    }
    Ok(m)
}

pub fn load_dataset(root: &Path) -> Result<Vec<SubjectDataset>> {
    let m = read_manifest(root)?;
    let size = m.image_size;
    let mut out = Vec::with_capacity(m.subjects.len());
    for s in &m.subjects {
        let dir = root.join("frames").join(s.id.to_string());
        let on_disk = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
            .count();
        if on_disk != s.n_frames {
            return Err(Error::Validation(format!(
                "subject {} lists {} frames but {} are on disk in {}",
                s.id,
                s.n_frames,
                on_disk,
                dir.display()
            )));
        }
        let subject = sample_subject_in(s.seed, s.id, s.pool);
        let mut frames = Vec::with_capacity(s.n_frames);
        for idx in 0..s.n_frames {
            let (bin, json) = frame_paths(root, s.id, idx);
            let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
            if bytes.len() != 3 * size * size * 8 {
                return Err(Error::format(
                    &bin,
                    format!("expected {} bytes, found {}", 3 * size * size * 8, bytes.len()),
                ));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
            let gt_joints: KeypointSet =
                serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
            if gt_joints.len() != m.k_sup {
                return Err(Error::format(&json, format!("expected {} joints", m.k_sup)));
            }
            frames.push(Frame {
                image: Tensor::new(&[3, size, size], data)?,
                gt_joints,
                subject_id: s.id,
                frame_index: idx,
            });
        }
        out.push(SubjectDataset {
            subject,
            mode: s.mode,
            frames,
        });
    }
    Ok(out)
}
