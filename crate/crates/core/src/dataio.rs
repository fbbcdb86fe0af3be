//! Clip container files, dataset manifests, frame sampling, and batch
//! collation.
//!
//! The clip format is bit-exact: write→read roundtrips preserve every f32
//! bit. Manifests are plain CSV with group-disciplined splits — a group id
//! never spans two splits, which is what keeps correlated clips ("patients")
//! from leaking across train/val/test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const CLIP_MAGIC: &[u8; 4] = b"USVC";
const CLIP_VERSION: u16 = 1;

/// One video: dense T×C×H×W frames in [0,1] plus an identifier.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub id: String,
    pub frames: Tensor<f32>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, frames: Tensor<f32>) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "VideoClip",
                detail: format!("expected T×C×H×W, got {:?}", frames.shape()),
            });
        }
        Ok(Self { id: id.into(), frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// (C, H, W)
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    /// One frame as a C×H×W slice copy.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        let (c, h, w) = self.geometry();
        let stride = c * h * w;
        self.frames.data()[t * stride..(t + 1) * stride].to_vec()
    }
}

/// Write a clip in the binary container format.
pub fn write_clip(clip: &VideoClip, path: &Path) -> Result<()> {
    let s = clip.frames.shape();
    let mut buf = Vec::with_capacity(4 + 2 + 16 + clip.frames.numel() * 4);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for dim in s {
        buf.extend_from_slice(&(*dim as u32).to_le_bytes());
    }
    for v in clip.frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Header of a clip file: (T, C, H, W).
pub fn read_clip_header(path: &Path) -> Result<(usize, usize, usize, usize)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 22];
    file.read_exact(&mut header).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        expected: 22,
        got: 0,
    })?;
    parse_header(&header, path)
}

fn parse_header(header: &[u8; 22], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if &header[..4] != CLIP_MAGIC {
        return Err(Error::BadMagic { path: path.display().to_string(), expected: "USVC" });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != CLIP_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            found: version,
            expected: CLIP_VERSION,
        });
    }
    let dim = |i: usize| {
        u32::from_le_bytes([header[6 + 4 * i], header[7 + 4 * i], header[8 + 4 * i], header[9 + 4 * i]])
            as usize
    };
    Ok((dim(0), dim(1), dim(2), dim(3)))
}

/// Read a clip back; the id is the file stem.
pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path)?;
    if bytes.len() < 22 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected: 22,
            got: bytes.len(),
        });
    }
    let mut header = [0u8; 22];
    header.copy_from_slice(&bytes[..22]);
    let (t, c, h, w) = parse_header(&header, path)?;
    let expected = t * c * h * w * 4;
    let payload = &bytes[22..];
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(VideoClip { id, frames: Tensor::from_vec(vec![t, c, h, w], data)? })
}

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

/// Synthetic task kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Keyframe,
    AreaRatio,
    Motion,
}

impl TaskKind {
    pub fn is_binary(self) -> bool {
        matches!(self, TaskKind::Keyframe | TaskKind::Motion)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Keyframe => "keyframe",
            TaskKind::AreaRatio => "area_ratio",
            TaskKind::Motion => "motion",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyframe" => Ok(TaskKind::Keyframe),
            "area_ratio" => Ok(TaskKind::AreaRatio),
            "motion" => Ok(TaskKind::Motion),
            other => Err(Error::Manifest(format!("unknown task `{other}`"))),
        }
    }
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub clip_id: String,
    pub path: String,
    pub task: TaskKind,
    pub label: f32,
    pub group_id: String,
    pub split: Split,
    pub num_frames: usize,
}

const MANIFEST_HEADER: &str = "clip_id,path,task,label,group_id,split,num_frames";

/// A loaded dataset manifest plus the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, dir: PathBuf) -> Result<Self> {
        let m = Self { rows, dir };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Manifest(format!(
                    "bad header {:?}, expected {:?}",
                    other, MANIFEST_HEADER
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Manifest(format!(
                    "row {}: expected 7 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            }
            rows.push(ManifestRow {
                clip_id: fields[0].to_string(),
                path: fields[1].to_string(),
                task: fields[2].parse()?,
                label: fields[3]
                    .parse::<f32>()
                    .map_err(|e| Error::Manifest(format!("row {}: bad label: {e}", i + 2)))?,
                group_id: fields[4].to_string(),
                split: fields[5].parse()?,
                num_frames: fields[6]
                    .parse::<usize>()
                    .map_err(|e| Error::Manifest(format!("row {}: bad num_frames: {e}", i + 2)))?,
            });
        }
        let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Self::new(rows, dir)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            for field in [&r.clip_id, &r.path, &r.group_id] {
                if field.contains(',') {
                    return Err(Error::Manifest(format!("field `{field}` contains a comma")));
                }
            }
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.clip_id, r.path, r.task, r.label, r.group_id, r.split, r.num_frames
            ));
        }
        let mut file = fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Structural checks: unique clip ids, every group id in exactly one split.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.rows {
            if !ids.insert(&r.clip_id) {
                return Err(Error::Manifest(format!("duplicate clip_id `{}`", r.clip_id)));
            }
        }
        let mut group_split: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.rows {
            match group_split.get(r.group_id.as_str()) {
                Some(s) if *s != r.split => {
                    return Err(Error::Manifest(format!(
                        "group `{}` appears in both {} and {} splits",
                        r.group_id, s, r.split
                    )));
                }
                _ => {
                    group_split.insert(&r.group_id, r.split);
                }
            }
        }
        Ok(())
    }

    /// Check that each referenced file exists and its header frame count
    /// matches the row.
    pub fn validate_files(&self) -> Result<()> {
        for r in &self.rows {
            let path = self.dir.join(&r.path);
            let (t, _, _, _) = read_clip_header(&path)?;
            if t != r.num_frames {
                return Err(Error::Manifest(format!(
                    "clip `{}`: manifest says {} frames, file has {}",
                    r.clip_id, r.num_frames, t
                )));
            }
        }
        Ok(())
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Distinct group ids within a split, in first-appearance order.
    pub fn groups_in(&self, split: Split) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in self.split_rows(split) {
            if seen.insert(r.group_id.clone()) {
                out.push(r.group_id.clone());
            }
        }
        out
    }
}

/// How much of the training groups to keep.
#[derive(Clone, Copy, Debug)]
pub enum TrainSubset {
    Fraction(f64),
    Count(usize),
}

/// Keep only a random subset of whole training groups; val/test rows pass
/// through untouched. For a fixed seed the selected group set at count k is a
/// subset of the set at count k+1.
pub fn subsample_train_groups(
    manifest: &Manifest,
    subset: TrainSubset,
    seed: u64,
) -> Result<Manifest> {
    let groups = manifest.groups_in(Split::Train);
    let count = match subset {
        TrainSubset::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("fraction {f} outside [0,1]")));
            }
            ((groups.len() as f64 * f).round() as usize).max(1)
        }
        TrainSubset::Count(c) => c,
    };
    if count > groups.len() {
        return Err(Error::InvalidConfig(format!(
            "requested {count} train groups, only {} exist",
            groups.len()
        )));
    }
    let mut order: Vec<String> = {
        let mut sorted = groups.clone();
        sorted.sort();
        sorted
    };
    let mut r = rng::stream_rng(seed, 0x5e1ec7, 0);
    rng::shuffle(&mut r, &mut order);
    let keep: BTreeSet<&String> = order[..count].iter().collect();
    let rows = manifest
        .rows
        .iter()
        .filter(|r| r.split != Split::Train || keep.contains(&r.group_id))
        .cloned()
        .collect();
    Manifest::new(rows, manifest.dir.clone())
}

/// A clip loaded into memory with its label and group.
#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub id: String,
    pub frames: Tensor<f32>,
    pub label: f32,
    pub group: String,
}

/// Load every clip of a split into memory.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<LoadedClip>> {
    let mut out = Vec::new();
    for row in manifest.split_rows(split) {
        let clip = read_clip(&manifest.dir.join(&row.path))?;
        out.push(LoadedClip {
            id: row.clip_id.clone(),
            frames: clip.frames,
            label: row.label,
            group: row.group_id.clone(),
        });
    }
    Ok(out)
}

/// Frames selected for one clip: valid frames first, then zero padding, with
/// the validity mask alongside.
#[derive(Clone, Debug)]
pub struct SampledFrames {
    pub frames: Tensor<f32>,
    pub mask: Vec<bool>,
    /// Original frame index for each valid output position.
    pub source_indices: Vec<usize>,
}

/// Sample `k` frames for training. With T >= k, picks k distinct indices
/// uniformly without replacement and keeps them in index order; with T < k,
/// keeps all frames and pads with zeroed, masked slots.
pub fn sample_frames(frames: &Tensor<f32>, k: usize, rng: &mut ChaCha8Rng) -> Result<SampledFrames> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "sample_frames",
            detail: format!("expected T×C×H×W, got {:?}", shape),
        });
    }
    let t = shape[0];
    if t == 0 {
        return Err(Error::EmptyInput("sample_frames"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("sample_frames k must be >= 1".into()));
    }
    let stride: usize = shape[1..].iter().product();
    let indices = if t >= k {
        rng::sample_without_replacement(rng, t, k)
    } else {
        (0..t).collect()
    };
    let valid = indices.len();
    let mut data = vec![0.0f32; k * stride];
    for (slot, &src) in indices.iter().enumerate() {
        data[slot * stride..(slot + 1) * stride]
            .copy_from_slice(&frames.data()[src * stride..(src + 1) * stride]);
    }
    let mut mask = vec![true; valid];
    mask.resize(k, false);
    let mut shape_out = shape.to_vec();
    shape_out[0] = k;
    Ok(SampledFrames {
        frames: Tensor::from_vec(shape_out, data)?,
        mask,
        source_indices: indices,
    })
}

/// One clip ready for collation.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub clip_id: String,
    pub frames: Tensor<f32>,
    pub mask: Vec<bool>,
    pub label: f32,
}

impl BatchItem {
    /// All frames valid.
    pub fn full(clip_id: impl Into<String>, frames: Tensor<f32>, label: f32) -> Self {
        let t = frames.shape()[0];
        Self { clip_id: clip_id.into(), frames, mask: vec![true; t], label }
    }
}

/// Zero-padded batch: B×T_max×C×H×W frames with a left-packed validity mask.
#[derive(Clone, Debug)]
pub struct ClipBatch {
    pub frames: Tensor<f32>,
    pub mask: Vec<bool>,
    pub labels: Vec<f32>,
    pub clip_ids: Vec<String>,
}

impl ClipBatch {
    pub fn batch_size(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn max_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    /// (C, H, W)
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[2], s[3], s[4])
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        let t = self.max_frames();
        &self.mask[b * t..(b + 1) * t]
    }

    pub fn num_valid(&self, b: usize) -> usize {
        self.mask_row(b).iter().filter(|&&m| m).count()
    }

    /// Valid (leading) frames of clip b as a T_b×C×H×W tensor.
    pub fn valid_frames(&self, b: usize) -> Tensor<f32> {
        let s = self.frames.shape();
        let stride: usize = s[2..].iter().product();
        let t_valid = self.num_valid(b);
        let start = b * s[1] * stride;
        let data = self.frames.data()[start..start + t_valid * stride].to_vec();
        Tensor::from_vec(vec![t_valid, s[2], s[3], s[4]], data).expect("consistent slice")
    }
}

/// Stack clips into a zero-padded batch. Masks must be left-packed (valid
/// frames first), which both full clips and `sample_frames` output satisfy.
pub fn collate(items: &[BatchItem]) -> Result<ClipBatch> {
    if items.is_empty() {
        return Err(Error::EmptyInput("collate"));
    }
    let geo = &items[0].frames.shape()[1..];
    for item in items {
        let s = item.frames.shape();
        if s.len() != 4 || &s[1..] != geo {
            return Err(Error::ShapeMismatch {
                op: "collate",
                detail: format!("frame geometry {:?} vs {:?}", &s[1..], geo),
            });
        }
        if item.mask.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "collate",
                detail: format!("mask length {} vs {} frames", item.mask.len(), s[0]),
            });
        }
        let valid = item.mask.iter().filter(|&&m| m).count();
        if !item.mask[..valid].iter().all(|&m| m) {
            return Err(Error::ShapeMismatch {
                op: "collate",
                detail: format!("mask for `{}` is not left-packed", item.clip_id),
            });
        }
    }
    let t_max = items.iter().map(|i| i.frames.shape()[0]).max().unwrap();
    let stride: usize = geo.iter().product();
    let b = items.len();
    let mut data = vec![0.0f32; b * t_max * stride];
    let mut mask = vec![false; b * t_max];
    for (bi, item) in items.iter().enumerate() {
        let t = item.frames.shape()[0];
        data[bi * t_max * stride..bi * t_max * stride + t * stride]
            .copy_from_slice(item.frames.data());
        mask[bi * t_max..bi * t_max + t].copy_from_slice(&item.mask);
    }
    Ok(ClipBatch {
        frames: Tensor::from_vec(vec![b, t_max, geo[0], geo[1], geo[2]], data)?,
        mask,
        labels: items.iter().map(|i| i.label).collect(),
        clip_ids: items.iter().map(|i| i.clip_id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn random_clip(id: &str, t: usize, seed: u64) -> VideoClip {
        let mut r = stream_rng(seed, 99, 0);
        let frames = Tensor::from_fn(vec![t, 3, 4, 4], |_| rng::uniform_in(&mut r, 1.0).abs());
        VideoClip::new(id, frames).unwrap()
    }

    #[test]
    fn clip_roundtrip_is_bitwise() {
        let dir = std::env::temp_dir().join("usvid_clip_roundtrip");
        fs::create_dir_all(&dir).unwrap();
        let clip = random_clip("c0", 5, 7);
        let path = dir.join("c0.usvc");
        write_clip(&clip, &path).unwrap();
        let back = read_clip(&path).unwrap();
        assert_eq!(back.id, "c0");
        assert_eq!(back.frames.shape(), clip.frames.shape());
        let a: Vec<u32> = clip.frames.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.frames.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = std::env::temp_dir().join("usvid_clip_badmagic");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.usvc");
        let mut bytes = vec![];
        bytes.extend_from_slice(b"XXXX");
        bytes.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_clip(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = std::env::temp_dir().join("usvid_clip_trunc");
        fs::create_dir_all(&dir).unwrap();
        let clip = random_clip("c1", 2, 3);
        let path = dir.join("c1.usvc");
        write_clip(&clip, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4); // one float short
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_clip(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = std::env::temp_dir().join("usvid_clip_ver");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v9.usvc");
        let mut bytes = vec![];
        bytes.extend_from_slice(CLIP_MAGIC);
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_clip(&path), Err(Error::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn sampling_long_clip_takes_distinct_ordered_frames() {
        let clip = random_clip("c", 100, 1);
        let mut r = stream_rng(0, 1, 2);
        let s = sample_frames(&clip.frames, 32, &mut r).unwrap();
        assert_eq!(s.frames.shape()[0], 32);
        assert!(s.mask.iter().all(|&m| m));
        assert!(s.source_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampling_short_clip_pads_and_masks() {
        let clip = random_clip("c", 20, 1);
        let mut r = stream_rng(0, 1, 2);
        let s = sample_frames(&clip.frames, 32, &mut r).unwrap();
        assert_eq!(s.frames.shape()[0], 32);
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 20);
        assert!(s.mask[..20].iter().all(|&m| m));
        let stride = 3 * 4 * 4;
        assert!(s.frames.data()[20 * stride..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_exact_length_is_identity_permutation() {
        let clip = random_clip("c", 8, 5);
        let mut r = stream_rng(3, 1, 2);
        let s = sample_frames(&clip.frames, 8, &mut r).unwrap();
        assert_eq!(s.source_indices, (0..8).collect::<Vec<_>>());
        assert_eq!(s.frames.data(), clip.frames.data());
    }

    #[test]
    fn collate_pads_to_longest() {
        let a = random_clip("a", 3, 1);
        let b = random_clip("b", 5, 2);
        let batch = collate(&[
            BatchItem::full("a", a.frames.clone(), 0.0),
            BatchItem::full("b", b.frames.clone(), 1.0),
        ])
        .unwrap();
        assert_eq!(batch.max_frames(), 5);
        assert_eq!(batch.mask_row(0), &[true, true, true, false, false]);
        assert_eq!(batch.mask_row(1), &[true; 5]);
        // padded region is zero
        let stride = 3 * 4 * 4;
        let row0 = &batch.frames.data()[3 * stride..5 * stride];
        assert!(row0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collate_rejects_empty_and_mixed_geometry() {
        assert!(collate(&[]).is_err());
        let a = random_clip("a", 3, 1);
        let mut r = stream_rng(0, 0, 0);
        let odd = Tensor::from_fn(vec![2, 3, 8, 8], |_| rng::uniform_in(&mut r, 1.0));
        let items = [
            BatchItem::full("a", a.frames.clone(), 0.0),
            BatchItem::full("odd", odd, 0.0),
        ];
        assert!(collate(&items).is_err());
    }

    fn toy_manifest(dir: &Path) -> Manifest {
        let mut rows = Vec::new();
        for g in 0..10 {
            for c in 0..2 {
                rows.push(ManifestRow {
                    clip_id: format!("g{g}c{c}"),
                    path: format!("g{g}c{c}.usvc"),
                    task: TaskKind::Keyframe,
                    label: (c % 2) as f32,
                    group_id: format!("g{g}"),
                    split: if g < 7 {
                        Split::Train
                    } else if g < 9 {
                        Split::Val
                    } else {
                        Split::Test
                    },
                    num_frames: 4,
                });
            }
        }
        Manifest::new(rows, dir.to_path_buf()).unwrap()
    }

    #[test]
    fn manifest_roundtrip_and_group_discipline() {
        let dir = std::env::temp_dir().join("usvid_manifest");
        fs::create_dir_all(&dir).unwrap();
        let m = toy_manifest(&dir);
        let path = dir.join("manifest.csv");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.rows.len(), m.rows.len());

        // a group spanning two splits must be rejected
        let mut rows = m.rows.clone();
        rows[0].split = Split::Val;
        assert!(Manifest::new(rows, dir).is_err());
    }

    #[test]
    fn duplicate_clip_ids_rejected() {
        let dir = std::env::temp_dir().join("usvid_manifest_dup");
        let m = toy_manifest(&dir);
        let mut rows = m.rows.clone();
        rows[1].clip_id = rows[0].clip_id.clone();
        assert!(Manifest::new(rows, dir).is_err());
    }

    #[test]
    fn subsample_keeps_val_and_test_untouched() {
        let dir = std::env::temp_dir().join("x");
        let m = toy_manifest(&dir);
        let sub = subsample_train_groups(&m, TrainSubset::Count(2), 0).unwrap();
        assert_eq!(sub.groups_in(Split::Train).len(), 2);
        assert_eq!(sub.split_rows(Split::Val).count(), m.split_rows(Split::Val).count());
        assert_eq!(sub.split_rows(Split::Test).count(), m.split_rows(Split::Test).count());
    }

    #[test]
    fn subsample_fraction_one_is_identity() {
        let dir = std::env::temp_dir().join("x");
        let m = toy_manifest(&dir);
        let sub = subsample_train_groups(&m, TrainSubset::Fraction(1.0), 0).unwrap();
        assert_eq!(sub.rows.len(), m.rows.len());
    }

    #[test]
    fn subsample_counts_are_nested_for_fixed_seed() {
        let dir = std::env::temp_dir().join("x");
        let m = toy_manifest(&dir);
        for seed in 0..5 {
            let mut prev: Option<BTreeSet<String>> = None;
            for k in 1..=7 {
                let sub = subsample_train_groups(&m, TrainSubset::Count(k), seed).unwrap();
                let groups: BTreeSet<String> = sub.groups_in(Split::Train).into_iter().collect();
                assert_eq!(groups.len(), k);
                if let Some(p) = &prev {
                    assert!(p.is_subset(&groups), "seed {seed}: {p:?} not in {groups:?}");
                }
                prev = Some(groups);
            }
        }
    }

    #[test]
    fn subsample_rejects_overcount() {
        let dir = std::env::temp_dir().join("x");
        let m = toy_manifest(&dir);
        assert!(subsample_train_groups(&m, TrainSubset::Count(8), 0).is_err());
    }
}
