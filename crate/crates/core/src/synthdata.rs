//! Deterministic synthetic video tasks.
//!
//! Three generators cover the three regimes the models are meant to
//! separate:
//!
//! * keyframe — binary detection of a bright blob that appears in only k of
//!   the frames; a set property, order never matters.
//! * area_ratio — regression of 1 - min_t area / max_t area for a pulsing
//!   disk; min and max are set statistics, order never matters.
//! * motion — binary orbit direction of a moving blob. With the start phase
//!   uniform and a shared angular speed, the unordered multiset of frames is
//!   identically distributed across the two classes, so any
//!   permutation-invariant model sits at chance by construction.
//!
//! Generation is a pure function of (config, seed): each clip draws from its
//! own counter-derived stream, so parallel generation matches the serial
//! bitstream. Clips in the same group ("patient") share nuisance parameters
//! (background level, blob location prior).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{TaskKind, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{self, stream_rng};
use crate::tensor::Tensor;

const STREAM_CLIP: u64 = 0xc11b;
const STREAM_GROUP: u64 = 0x6109;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_clips: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub noise_std: f32,
    /// 0 means n_clips / 5.
    pub group_count: usize,
    // keyframe task
    pub blob_radius: f32,
    pub key_frames_min: usize,
    pub key_frames_max: usize,
    // area-ratio task
    pub disk_base_radius: f32,
    pub amp_min: f32,
    pub amp_max: f32,
    pub freq_min: f32,
    pub freq_max: f32,
    // motion task
    pub orbit_radius: f32,
    /// radians per frame; the sign is the class label
    pub angular_step: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_clips: 500,
            channels: 3,
            height: 32,
            width: 32,
            t_min: 16,
            t_max: 64,
            noise_std: 0.1,
            group_count: 0,
            blob_radius: 4.0,
            key_frames_min: 1,
            key_frames_max: 5,
            disk_base_radius: 6.0,
            amp_min: 0.1,
            amp_max: 0.4,
            freq_min: 1.0,
            freq_max: 3.0,
            orbit_radius: 9.0,
            angular_step: std::f32::consts::TAU / 16.0,
        }
    }
}

impl GenConfig {
    pub fn groups(&self) -> usize {
        if self.group_count > 0 {
            self.group_count
        } else {
            (self.n_clips / 5).max(1)
        }
    }

    fn validate_common(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::InvalidConfig("n_clips must be positive".into()));
        }
        if self.channels == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig("image must be at least 8x8 with >=1 channel".into()));
        }
        if self.t_min == 0 || self.t_max < self.t_min {
            return Err(Error::InvalidConfig(format!(
                "bad frame-count range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        if self.groups() > self.n_clips {
            return Err(Error::InvalidConfig("more groups than clips".into()));
        }
        Ok(())
    }

    fn validate_keyframe(&self) -> Result<()> {
        self.validate_common()?;
        if self.key_frames_min == 0
            || self.key_frames_max < self.key_frames_min
            || self.key_frames_max > self.t_min
        {
            return Err(Error::InvalidConfig(format!(
                "key-frame count range [{}, {}] must fit in the shortest clip ({})",
                self.key_frames_min, self.key_frames_max, self.t_min
            )));
        }
        if self.blob_radius < 1.0 || self.blob_radius * 2.0 >= self.height.min(self.width) as f32 {
            return Err(Error::InvalidConfig(format!("blob_radius {} unusable", self.blob_radius)));
        }
        Ok(())
    }

    fn validate_area(&self) -> Result<()> {
        self.validate_common()?;
        if !(0.0..1.0).contains(&self.amp_min) || self.amp_max < self.amp_min || self.amp_max >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "bad amplitude range [{}, {}]",
                self.amp_min, self.amp_max
            )));
        }
        if self.disk_base_radius * (1.0 - self.amp_max) < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "minimum disk radius {} below 1 pixel",
                self.disk_base_radius * (1.0 - self.amp_max)
            )));
        }
        let max_r = self.disk_base_radius * (1.0 + self.amp_max);
        if max_r >= (self.height.min(self.width) as f32) / 2.0 - 1.0 {
            return Err(Error::InvalidConfig(format!("maximum disk radius {max_r} exceeds image")));
        }
        if self.freq_min <= 0.0 || self.freq_max < self.freq_min {
            return Err(Error::InvalidConfig(format!(
                "bad frequency range [{}, {}]",
                self.freq_min, self.freq_max
            )));
        }
        Ok(())
    }

    fn validate_motion(&self) -> Result<()> {
        self.validate_common()?;
        if self.angular_step <= 0.0 {
            return Err(Error::InvalidConfig("angular_step must be positive".into()));
        }
        let reach = self.orbit_radius + self.blob_radius;
        if reach >= (self.height.min(self.width) as f32) / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "orbit {} + blob {} exceeds the image half-size",
                self.orbit_radius, self.blob_radius
            )));
        }
        Ok(())
    }
}

/// Generative ground truth kept with each clip.
#[derive(Clone, Debug)]
pub enum ClipMeta {
    Keyframe {
        key_frames: Vec<usize>,
        blob_center: (f32, f32),
        distractor_center: (f32, f32),
    },
    AreaRatio {
        amplitude: f32,
        frequency: f32,
        phase: f32,
        center: (f32, f32),
        radii: Vec<f32>,
        min_area: usize,
        max_area: usize,
    },
    Motion {
        counterclockwise: bool,
        start_phase: f32,
        angular_step: f32,
        angles: Vec<f32>,
    },
}

/// A generated clip with its task label and provenance.
#[derive(Clone, Debug)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub label: f32,
    pub group: String,
    pub meta: ClipMeta,
}

/// Per-group nuisance parameters shared by all clips of a "patient".
struct GroupPrior {
    background: f32,
    blob_prior: (f32, f32),
}

fn group_prior(cfg: &GenConfig, seed: u64, group: usize) -> GroupPrior {
    let mut r = stream_rng(seed, STREAM_GROUP, group as u64);
    let margin = cfg.blob_radius.max(4.0) + 1.0;
    GroupPrior {
        background: r.random_range(0.15..0.3),
        blob_prior: (
            r.random_range(margin..cfg.width as f32 - margin),
            r.random_range(margin..cfg.height as f32 - margin),
        ),
    }
}

struct FrameCanvas<'a> {
    data: &'a mut [f32],
    channels: usize,
    height: usize,
    width: usize,
}

impl FrameCanvas<'_> {
    fn fill_noise(&mut self, base: f32, std: f32, rng: &mut ChaCha8Rng) {
        for v in self.data.iter_mut() {
            let noise = if std > 0.0 { rng::standard_normal(rng) * std } else { 0.0 };
            *v = (base + noise).clamp(0.0, 1.0);
        }
    }

    /// Gaussian intensity bump with sigma = radius/2, added to one channel.
    fn add_blob(&mut self, channel: usize, cx: f32, cy: f32, radius: f32, intensity: f32) {
        let sigma = radius / 2.0;
        let reach = (radius * 2.0).ceil() as isize;
        let plane = self.height * self.width;
        let (x0, y0) = (cx.round() as isize, cy.round() as isize);
        for y in (y0 - reach).max(0)..(y0 + reach + 1).min(self.height as isize) {
            for x in (x0 - reach).max(0)..(x0 + reach + 1).min(self.width as isize) {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let idx = channel * plane + y as usize * self.width + x as usize;
                self.data[idx] = (self.data[idx] + intensity * g).clamp(0.0, 1.0);
            }
        }
    }

    /// Filled disk added to every channel; returns its pixel area.
    fn add_disk(&mut self, cx: f32, cy: f32, radius: f32, intensity: f32) -> usize {
        let plane = self.height * self.width;
        let mut area = 0usize;
        let reach = radius.ceil() as isize + 1;
        let (x0, y0) = (cx.round() as isize, cy.round() as isize);
        for y in (y0 - reach).max(0)..(y0 + reach + 1).min(self.height as isize) {
            for x in (x0 - reach).max(0)..(x0 + reach + 1).min(self.width as isize) {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    area += 1;
                    for c in 0..self.channels {
                        let idx = c * plane + y as usize * self.width + x as usize;
                        self.data[idx] = (self.data[idx] + intensity).clamp(0.0, 1.0);
                    }
                }
            }
        }
        area
    }
}

/// Group of clip i: consecutive label pairs land in the same group, so
/// every group carries both classes of the alternating labels.
fn group_of(i: usize, groups: usize) -> usize {
    (i / 2) % groups
}

fn gen_clips<F>(cfg: &GenConfig, seed: u64, task: TaskKind, per_clip: F) -> Result<Vec<LabeledClip>>
where
    F: Fn(usize, usize, &GroupPrior, &mut ChaCha8Rng) -> Result<LabeledClip> + Sync,
{
    let groups = cfg.groups();
    (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| {
            let group = group_of(i, groups);
            let prior = group_prior(cfg, seed, group);
            let mut r = stream_rng(seed ^ task_tag(task), STREAM_CLIP, i as u64);
            per_clip(i, group, &prior, &mut r)
        })
        .collect()
}

fn task_tag(task: TaskKind) -> u64 {
    match task {
        TaskKind::Keyframe => 0xa,
        TaskKind::AreaRatio => 0xb,
        TaskKind::Motion => 0xc,
    }
}

fn clip_id(task: TaskKind, index: usize) -> String {
    format!("{task}{index:05}")
}

fn jitter_center(
    prior: (f32, f32),
    margin: f32,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> (f32, f32) {
    let cx = (prior.0 + rng.random_range(-3.0..3.0f32))
        .clamp(margin, cfg.width as f32 - margin);
    let cy = (prior.1 + rng.random_range(-3.0..3.0f32))
        .clamp(margin, cfg.height as f32 - margin);
    (cx, cy)
}

/// Task A: bright-blob detection. Every clip carries a dim distractor blob in
/// all frames; positives additionally show a bright blob at a fixed location
/// in k random frames. The label is a pure set property.
pub fn gen_keyframe_task(cfg: &GenConfig, seed: u64) -> Result<Vec<LabeledClip>> {
    cfg.validate_keyframe()?;
    gen_clips(cfg, seed, TaskKind::Keyframe, |i, group, prior, r| {
        let t = r.random_range(cfg.t_min..=cfg.t_max);
        let positive = i % 2 == 0;
        let k = r.random_range(cfg.key_frames_min..=cfg.key_frames_max);
        let key_frames = if positive {
            rng::sample_without_replacement(r, t, k)
        } else {
            Vec::new()
        };
        let margin = cfg.blob_radius + 1.0;
        let blob_center = jitter_center(prior.blob_prior, margin, cfg, r);
        let distractor_center = (
            r.random_range(margin..cfg.width as f32 - margin),
            r.random_range(margin..cfg.height as f32 - margin),
        );
        let plane = cfg.channels * cfg.height * cfg.width;
        let mut data = vec![0.0f32; t * plane];
        for ft in 0..t {
            let mut canvas = FrameCanvas {
                data: &mut data[ft * plane..(ft + 1) * plane],
                channels: cfg.channels,
                height: cfg.height,
                width: cfg.width,
            };
            canvas.fill_noise(prior.background, cfg.noise_std, r);
            canvas.add_blob(
                cfg.channels - 1,
                distractor_center.0,
                distractor_center.1,
                cfg.blob_radius,
                0.3,
            );
            if key_frames.contains(&ft) {
                canvas.add_blob(0, blob_center.0, blob_center.1, cfg.blob_radius, 0.9);
            }
        }
        let frames = Tensor::from_vec(vec![t, cfg.channels, cfg.height, cfg.width], data)?;
        Ok(LabeledClip {
            clip: VideoClip::new(clip_id(TaskKind::Keyframe, i), frames)?,
            label: if positive { 1.0 } else { 0.0 },
            group: format!("g{group:04}"),
            meta: ClipMeta::Keyframe { key_frames, blob_center, distractor_center },
        })
    })
}

/// Task B: pulsing-disk area regression. The disk radius follows
/// r0 (1 + A sin(2π f t/T + φ)) and the label is 1 - min_t area / max_t area
/// computed from the attained pixel areas of the noiseless disk masks.
pub fn gen_area_ratio_task(cfg: &GenConfig, seed: u64) -> Result<Vec<LabeledClip>> {
    cfg.validate_area()?;
    gen_clips(cfg, seed, TaskKind::AreaRatio, |i, group, prior, r| {
        let t = r.random_range(cfg.t_min..=cfg.t_max);
        let amplitude = if cfg.amp_max > cfg.amp_min {
            r.random_range(cfg.amp_min..cfg.amp_max)
        } else {
            cfg.amp_min
        };
        let frequency = if cfg.freq_max > cfg.freq_min {
            r.random_range(cfg.freq_min..cfg.freq_max)
        } else {
            cfg.freq_min
        };
        let phase = r.random_range(0.0..std::f32::consts::TAU);
        let max_r = cfg.disk_base_radius * (1.0 + cfg.amp_max);
        let center = jitter_center(prior.blob_prior, max_r + 1.0, cfg, r);

        let plane = cfg.channels * cfg.height * cfg.width;
        let mut data = vec![0.0f32; t * plane];
        let mut radii = Vec::with_capacity(t);
        let mut min_area = usize::MAX;
        let mut max_area = 0usize;
        for ft in 0..t {
            let radius = cfg.disk_base_radius
                * (1.0
                    + amplitude
                        * (std::f32::consts::TAU * frequency * ft as f32 / t as f32 + phase).sin());
            radii.push(radius);
            let mut canvas = FrameCanvas {
                data: &mut data[ft * plane..(ft + 1) * plane],
                channels: cfg.channels,
                height: cfg.height,
                width: cfg.width,
            };
            canvas.fill_noise(prior.background, cfg.noise_std, r);
            let area = canvas.add_disk(center.0, center.1, radius, 0.7);
            min_area = min_area.min(area);
            max_area = max_area.max(area);
        }
        let label = 1.0 - min_area as f32 / max_area as f32;
        let frames = Tensor::from_vec(vec![t, cfg.channels, cfg.height, cfg.width], data)?;
        Ok(LabeledClip {
            clip: VideoClip::new(clip_id(TaskKind::AreaRatio, i), frames)?,
            label,
            group: format!("g{group:04}"),
            meta: ClipMeta::AreaRatio {
                amplitude,
                frequency,
                phase,
                center,
                radii,
                min_area,
                max_area,
            },
        })
    })
}

/// Task C: orbit direction. A blob circles the image center at a fixed
/// radius and angular speed; label 1 means counterclockwise. The start phase
/// is uniform, so the frame multiset distribution is identical across
/// classes and only frame *order* carries the label.
pub fn gen_motion_direction_task(cfg: &GenConfig, seed: u64) -> Result<Vec<LabeledClip>> {
    cfg.validate_motion()?;
    gen_clips(cfg, seed, TaskKind::Motion, |i, group, prior, r| {
        let t = r.random_range(cfg.t_min..=cfg.t_max);
        let counterclockwise = i % 2 == 0;
        let start_phase = r.random_range(0.0..std::f32::consts::TAU);
        let sign = if counterclockwise { 1.0 } else { -1.0 };
        let (cx, cy) = (cfg.width as f32 / 2.0, cfg.height as f32 / 2.0);

        let plane = cfg.channels * cfg.height * cfg.width;
        let mut data = vec![0.0f32; t * plane];
        let mut angles = Vec::with_capacity(t);
        for ft in 0..t {
            let angle = start_phase + sign * cfg.angular_step * ft as f32;
            angles.push(angle.rem_euclid(std::f32::consts::TAU));
            let bx = cx + cfg.orbit_radius * angle.cos();
            let by = cy + cfg.orbit_radius * angle.sin();
            let mut canvas = FrameCanvas {
                data: &mut data[ft * plane..(ft + 1) * plane],
                channels: cfg.channels,
                height: cfg.height,
                width: cfg.width,
            };
            canvas.fill_noise(prior.background, cfg.noise_std, r);
            for c in 0..cfg.channels {
                canvas.add_blob(c, bx, by, cfg.blob_radius, 0.9);
            }
        }
        let frames = Tensor::from_vec(vec![t, cfg.channels, cfg.height, cfg.width], data)?;
        Ok(LabeledClip {
            clip: VideoClip::new(clip_id(TaskKind::Motion, i), frames)?,
            label: if counterclockwise { 1.0 } else { 0.0 },
            group: format!("g{group:04}"),
            meta: ClipMeta::Motion {
                counterclockwise,
                start_phase,
                angular_step: cfg.angular_step,
                angles,
            },
        })
    })
}

/// Dispatch by task kind.
pub fn generate(task: TaskKind, cfg: &GenConfig, seed: u64) -> Result<Vec<LabeledClip>> {
    match task {
        TaskKind::Keyframe => gen_keyframe_task(cfg, seed),
        TaskKind::AreaRatio => gen_area_ratio_task(cfg, seed),
        TaskKind::Motion => gen_motion_direction_task(cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize) -> GenConfig {
        GenConfig { n_clips: n, t_min: 8, t_max: 16, key_frames_max: 4, ..Default::default() }
    }

    fn bits(clips: &[LabeledClip]) -> Vec<u32> {
        clips
            .iter()
            .flat_map(|c| c.clip.frames.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn generation_is_deterministic_for_all_tasks() {
        let cfg = small_cfg(12);
        for task in [TaskKind::Keyframe, TaskKind::AreaRatio, TaskKind::Motion] {
            let a = generate(task, &cfg, 42).unwrap();
            let b = generate(task, &cfg, 42).unwrap();
            assert_eq!(bits(&a), bits(&b), "{task} not deterministic");
            let c = generate(task, &cfg, 43).unwrap();
            assert_ne!(bits(&a), bits(&c), "{task} ignores the seed");
        }
    }

    #[test]
    fn keyframe_labels_are_balanced_and_match_metadata() {
        let cfg = small_cfg(40);
        let clips = gen_keyframe_task(&cfg, 0).unwrap();
        let positives = clips.iter().filter(|c| c.label == 1.0).count();
        let frac = positives as f64 / clips.len() as f64;
        assert!((0.45..=0.55).contains(&frac), "positive fraction {frac}");
        for c in &clips {
            match &c.meta {
                ClipMeta::Keyframe { key_frames, .. } => {
                    if c.label == 1.0 {
                        assert!((1..=4).contains(&key_frames.len()));
                        assert!(key_frames.iter().all(|&t| t < c.clip.num_frames()));
                    } else {
                        assert!(key_frames.is_empty());
                    }
                }
                _ => panic!("wrong metadata"),
            }
        }
    }

    #[test]
    fn key_frames_differ_from_their_neighbors_by_the_blob() {
        let cfg = GenConfig { n_clips: 10, t_min: 12, t_max: 20, ..Default::default() };
        let clips = gen_keyframe_task(&cfg, 7).unwrap();
        let plane = cfg.height * cfg.width;
        for c in clips.iter().filter(|c| c.label == 1.0) {
            let ClipMeta::Keyframe { key_frames, blob_center, .. } = &c.meta else {
                panic!()
            };
            let t = c.clip.num_frames();
            let non_key = (0..t).find(|i| !key_frames.contains(i)).unwrap();
            let base = c.clip.frame(non_key);
            for &kf in key_frames {
                let frame = c.clip.frame(kf);
                // channel 0 at the blob center differs strongly
                let (bx, by) = (blob_center.0 as usize, blob_center.1 as usize);
                let idx = by * cfg.width + bx;
                let delta = (frame[idx] - base[idx]).abs();
                assert!(delta > 0.3, "blob delta only {delta}");
                // far corner differs only by noise
                let far = plane - 1;
                let corner_delta = (frame[far] - base[far]).abs();
                assert!(corner_delta < 0.3 + 6.0 * cfg.noise_std);
            }
        }
    }

    #[test]
    fn area_labels_match_recounted_disk_areas() {
        let cfg = GenConfig { n_clips: 8, noise_std: 0.0, ..Default::default() };
        let clips = gen_area_ratio_task(&cfg, 3).unwrap();
        let plane = cfg.height * cfg.width;
        for c in &clips {
            let ClipMeta::AreaRatio { min_area, max_area, .. } = &c.meta else { panic!() };
            // recount areas by thresholding the noiseless frames
            let mut rec_min = usize::MAX;
            let mut rec_max = 0usize;
            for t in 0..c.clip.num_frames() {
                let frame = c.clip.frame(t);
                // channel 0; disk adds 0.7 to a background below 0.3
                let area = frame[..plane].iter().filter(|&&v| v > 0.5).count();
                rec_min = rec_min.min(area);
                rec_max = rec_max.max(area);
            }
            assert_eq!(rec_min, *min_area);
            assert_eq!(rec_max, *max_area);
            let expect = 1.0 - *min_area as f32 / *max_area as f32;
            assert_eq!(c.label, expect);
        }
    }

    #[test]
    fn area_label_approaches_amplitude_formula_when_extremes_attained() {
        // dense sampling + integer cycles: both sine extremes are nearly hit
        let cfg = GenConfig {
            n_clips: 6,
            t_min: 200,
            t_max: 200,
            amp_min: 0.3,
            amp_max: 0.3,
            freq_min: 2.0,
            freq_max: 2.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let clips = gen_area_ratio_task(&cfg, 5).unwrap();
        let a = 0.3f64;
        let analytic = 1.0 - (1.0 - a).powi(2) / (1.0 + a).powi(2);
        for c in &clips {
            assert!(
                (c.label as f64 - analytic).abs() < 0.06,
                "label {} vs analytic {analytic}",
                c.label
            );
        }
    }

    #[test]
    fn constant_radius_gives_zero_label() {
        let cfg = GenConfig {
            n_clips: 4,
            amp_min: 0.0,
            amp_max: 0.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let clips = gen_area_ratio_task(&cfg, 1).unwrap();
        for c in &clips {
            assert_eq!(c.label, 0.0);
        }
    }

    #[test]
    fn tiny_disk_radius_rejected() {
        let cfg = GenConfig { disk_base_radius: 1.2, amp_max: 0.4, ..Default::default() };
        assert!(gen_area_ratio_task(&cfg, 0).is_err());
    }

    #[test]
    fn motion_reversal_flips_the_direction_semantics() {
        let cfg = small_cfg(6);
        let clips = gen_motion_direction_task(&cfg, 9).unwrap();
        for c in &clips {
            let ClipMeta::Motion { angles, counterclockwise, angular_step, .. } = &c.meta else {
                panic!()
            };
            // consecutive angle deltas have the sign of the class...
            let delta = (angles[1] - angles[0]).rem_euclid(std::f32::consts::TAU);
            let step = if *counterclockwise { delta } else { std::f32::consts::TAU - delta };
            assert!((step - angular_step).abs() < 1e-3);
            // ...so reversing the frame order is exactly the other class's motion
            let rev_delta =
                (angles[angles.len() - 2] - angles[angles.len() - 1]).rem_euclid(std::f32::consts::TAU);
            let rev_step = if *counterclockwise { std::f32::consts::TAU - rev_delta } else { rev_delta };
            assert!((rev_step - angular_step).abs() < 1e-3);
        }
    }

    #[test]
    fn motion_classes_are_balanced() {
        let clips = gen_motion_direction_task(&small_cfg(30), 2).unwrap();
        let pos = clips.iter().filter(|c| c.label == 1.0).count();
        let frac = pos as f64 / clips.len() as f64;
        assert!((0.45..=0.55).contains(&frac));
    }

    #[test]
    fn groups_share_nuisance_and_partition_clips() {
        let cfg = GenConfig { n_clips: 20, group_count: 4, ..small_cfg(20) };
        let clips = gen_keyframe_task(&cfg, 11).unwrap();
        for c in &clips {
            let g: usize = c.group[1..].parse().unwrap();
            assert!(g < 4);
        }
        // same-group clips share the background prior: compare frame means
        let mean = |c: &LabeledClip| {
            let d = c.clip.frames.data();
            d.iter().map(|v| *v as f64).sum::<f64>() / d.len() as f64
        };
        let g0: Vec<&LabeledClip> = clips.iter().filter(|c| c.group == "g0000").collect();
        let g1: Vec<&LabeledClip> = clips.iter().filter(|c| c.group == "g0001").collect();
        let spread_within = (mean(g0[0]) - mean(g0[1])).abs();
        assert!(spread_within < 0.1);
        assert!(g1.len() >= 2);
    }

    // ---- marginal-distribution check for the motion task ----

    /// Regularized upper incomplete gamma Q(a, x), series + continued
    /// fraction, for the chi-square survival function.
    fn gammq(a: f64, x: f64) -> f64 {
        assert!(x >= 0.0 && a > 0.0);
        if x < a + 1.0 {
            1.0 - gser(a, x)
        } else {
            gcf(a, x)
        }
    }

    fn gammln(x: f64) -> f64 {
        // Lanczos approximation
        let coef = [
            76.18009172947146,
            -86.50532032941677,
            24.01409824083091,
            -1.231739572450155,
            0.1208650973866179e-2,
            -0.5395239384953e-5,
        ];
        let mut y = x;
        let tmp = x + 5.5;
        let tmp = tmp - (x + 0.5) * tmp.ln();
        let mut ser = 1.000000000190015;
        for c in coef {
            y += 1.0;
            ser += c / y;
        }
        -tmp + (2.5066282746310005 * ser / x).ln()
    }

    fn gser(a: f64, x: f64) -> f64 {
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..200 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-12 {
                break;
            }
        }
        sum * (-x + a * x.ln() - gammln(a)).exp()
    }

    fn gcf(a: f64, x: f64) -> f64 {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..200 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-12 {
                break;
            }
        }
        (-x + a * x.ln() - gammln(a)).exp() * h
    }

    #[test]
    fn motion_frame_marginals_match_between_classes() {
        // histogram the blob angle over all frames, per class
        let cfg = GenConfig { n_clips: 1200, t_min: 8, t_max: 24, ..Default::default() };
        let clips = gen_motion_direction_task(&cfg, 202).unwrap();
        const BINS: usize = 12;
        let mut counts = [[0f64; BINS]; 2];
        for c in &clips {
            let ClipMeta::Motion { angles, .. } = &c.meta else { panic!() };
            let class = c.label as usize;
            for a in angles {
                let bin = ((a / std::f32::consts::TAU) * BINS as f32) as usize % BINS;
                counts[class][bin] += 1.0;
            }
        }
        // chi-square homogeneity
        let total: f64 = counts.iter().flatten().sum();
        let row: [f64; 2] = [counts[0].iter().sum(), counts[1].iter().sum()];
        let mut chi2 = 0.0;
        for b in 0..BINS {
            let col = counts[0][b] + counts[1][b];
            for class in 0..2 {
                let expected = row[class] * col / total;
                let diff = counts[class][b] - expected;
                chi2 += diff * diff / expected;
            }
        }
        let dof = (BINS - 1) as f64;
        let p = gammq(dof / 2.0, chi2 / 2.0);
        assert!(p > 0.01, "chi2 {chi2}, p {p}: class marginals differ");
    }
}
