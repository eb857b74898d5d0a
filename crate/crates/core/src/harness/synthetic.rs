//! Procedurally generated clips whose label depends on temporal structure.
//!
//! Every clip starts from a smooth random texture (uniform noise with a
//! circular 3x3 box blur, per channel). Each clip has its own ChaCha8
//! stream, keyed by the dataset seed and the clip index, so a dataset can
//! be regenerated clip by clip.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{math, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionFamily {
    /// Label = direction of a constant integer translation (up to 8).
    Translation,
    /// Label = frequency of a global brightness oscillation (cycles per
    /// clip = label + 1).
    Oscillation,
    /// Two classes: a rightward translation played forward (0) or the same
    /// clip, noise included, with its frames reversed (1).
    ForwardReversed,
}

impl MotionFamily {
    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::Translation => "translation",
            MotionFamily::Oscillation => "oscillation",
            MotionFamily::ForwardReversed => "forward_reversed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "translation" => Some(MotionFamily::Translation),
            "oscillation" => Some(MotionFamily::Oscillation),
            "forward_reversed" | "forward-reversed" => Some(MotionFamily::ForwardReversed),
            _ => None,
        }
    }
}

const DIRECTIONS: [(isize, isize); 8] = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub family: MotionFamily,
    pub num_classes: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic data: {m}")));
        if self.clip_shape().contains(&0) || self.samples == 0 {
            return bad("dimensions and sample count must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        match self.family {
            MotionFamily::Translation if !(2..=DIRECTIONS.len()).contains(&self.num_classes) => {
                bad("translation supports 2 to 8 classes")
            }
            MotionFamily::Oscillation if self.num_classes < 2 || 2 * self.num_classes > self.frames => {
                bad("oscillation needs 2 <= classes <= frames / 2")
            }
            MotionFamily::ForwardReversed if self.num_classes != 2 => bad("forward_reversed has exactly 2 classes"),
            _ if self.frames < 2 => bad("clips need at least 2 frames"),
            _ => Ok(()),
        }
    }
}

/// Clips stored contiguously as (C, T, H, W) blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clip_shape: [usize; 4],
    pub num_classes: usize,
    pub clips: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(clip_shape: [usize; 4], num_classes: usize, clips: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let vol: usize = clip_shape.iter().product();
        if vol == 0 || clips.len() != vol * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset: {} values for {} clips of shape {:?}",
                clips.len(),
                labels.len(),
                clip_shape
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("dataset: label {l} >= {num_classes} classes")));
        }
        Ok(Dataset {
            clip_shape,
            num_classes,
            clips,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clip_len(&self) -> usize {
        self.clip_shape.iter().product()
    }

    pub fn clip(&self, i: usize) -> &[f64] {
        let v = self.clip_len();
        &self.clips[i * v..][..v]
    }

    /// Stacks the selected clips into an (N, C, T, H, W) tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.clip_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("clip index {i} out of range")));
            }
            data.extend_from_slice(self.clip(i));
            labels.push(self.labels[i]);
        }
        let [c, t, h, w] = self.clip_shape;
        Ok((Tensor::new(&[indices.len(), c, t, h, w], data)?, labels))
    }

    /// Keeps the first `frames` frames of every clip.
    pub fn truncate_frames(&self, frames: usize) -> Result<Dataset> {
        self.window(frames, |_| 0)
    }

    /// Keeps `frames` frames from the middle of every clip.
    pub fn center_frames(&self, frames: usize) -> Result<Dataset> {
        let t = self.clip_shape[1];
        self.window(frames, |_| t.saturating_sub(frames) / 2)
    }

    /// Keeps `frames` consecutive frames of clip `i`, starting at `start(i)`.
    pub fn window(&self, frames: usize, start: impl Fn(usize) -> usize) -> Result<Dataset> {
        let [c, t, h, w] = self.clip_shape;
        if frames == 0 || frames > t {
            return Err(Error::InvalidArgument(format!("cannot take {frames} of {t} frames")));
        }
        let mut clips = Vec::with_capacity(self.len() * c * frames * h * w);
        for i in 0..self.len() {
            let clip = self.clip(i);
            let s = start(i);
            if s + frames > t {
                return Err(Error::InvalidArgument(format!("window {s}+{frames} exceeds {t} frames")));
            }
            for ci in 0..c {
                clips.extend_from_slice(&clip[(ci * t + s) * h * w..][..frames * h * w]);
            }
        }
        Dataset::new([c, frames, h, w], self.num_classes, clips, self.labels.clone())
    }
}

fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in [h - 1, 0, 1] {
                for dx in [w - 1, 0, 1] {
                    s += raw[((y + dy) % h) * w + (x + dx) % w];
                }
            }
            out[y * w + x] = s / 3.0;
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * PI * u2)
}

fn shifted(tex: &[f64], h: usize, w: usize, dy: isize, dx: isize, out: &mut [f64]) {
    let (hi, wi) = (h as isize, w as isize);
    for y in 0..hi {
        for x in 0..wi {
            let sy = (y - dy).rem_euclid(hi) as usize;
            let sx = (x - dx).rem_euclid(wi) as usize;
            out[(y * wi + x) as usize] = tex[sy * w + sx];
        }
    }
}

/// One clip of the family with the given label, (C, T, H, W) flattened.
pub fn generate_clip(spec: &SyntheticSpec, index: usize, label: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let [c, t, h, w] = spec.clip_shape();
    let hw = h * w;
    let mut clip = vec![0.0; c * t * hw];
    let textures: Vec<Vec<f64>> = (0..c).map(|_| texture(&mut rng, h, w)).collect();
    match spec.family {
        MotionFamily::Translation | MotionFamily::ForwardReversed => {
            let (vy, vx) = if spec.family == MotionFamily::Translation {
                DIRECTIONS[label]
            } else {
                (rng.random_range(-1i64..=1) as isize, rng.random_range(1i64..=2) as isize)
            };
            let (oy, ox) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
            for (ci, tex) in textures.iter().enumerate() {
                for ti in 0..t {
                    let k = ti as isize;
                    shifted(tex, h, w, oy + vy * k, ox + vx * k, &mut clip[(ci * t + ti) * hw..][..hw]);
                }
            }
        }
        MotionFamily::Oscillation => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let cycles = (label + 1) as f64;
            for (ci, tex) in textures.iter().enumerate() {
                for ti in 0..t {
                    let a = 1.0 + 0.5 * math::sin(2.0 * PI * cycles * ti as f64 / t as f64 + phase);
                    for (o, v) in clip[(ci * t + ti) * hw..][..hw].iter_mut().zip(tex) {
                        *o = a * v;
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        clip.iter_mut().for_each(|v| *v += spec.noise * gaussian(&mut rng));
    }
    if spec.family == MotionFamily::ForwardReversed && label == 1 {
        for ci in 0..c {
            for ti in 0..t / 2 {
                let (lo, hi) = clip[ci * t * hw..][..t * hw].split_at_mut((t - 1 - ti) * hw);
                lo[ti * hw..][..hw].swap_with_slice(&mut hi[..hw]);
            }
        }
    }
    clip
}

/// Generates `spec.samples` clips with balanced labels (`i % classes`).
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut clips = Vec::with_capacity(spec.samples * spec.clip_shape().iter().product::<usize>());
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.num_classes).collect();
    for (i, &l) in labels.iter().enumerate() {
        clips.extend(generate_clip(spec, i, l));
    }
    Dataset::new(spec.clip_shape(), spec.num_classes, clips, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: MotionFamily, classes: usize) -> SyntheticSpec {
        SyntheticSpec {
            family,
            num_classes: classes,
            channels: 2,
            frames: 6,
            height: 8,
            width: 8,
            noise: 0.0,
            samples: 6,
            seed: 3,
        }
    }

    #[test]
    fn same_seed_same_data() {
        let s = spec(MotionFamily::Translation, 3);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = SyntheticSpec { seed: 4, ..s.clone() };
        assert_ne!(generate(&s).unwrap().clips, generate(&other).unwrap().clips);
    }

    #[test]
    fn translation_moves_by_the_label_direction() {
        let s = spec(MotionFamily::Translation, 2);
        let d = generate(&s).unwrap();
        let clip = d.clip(0);
        let (f0, f1) = (&clip[..64], &clip[64..128]);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(f1[((y + 1) % 8) * 8 + x], f0[y * 8 + x]);
            }
        }
    }

    #[test]
    fn reversed_clip_is_the_forward_clip_backwards() {
        let mut s = spec(MotionFamily::ForwardReversed, 2);
        s.noise = 0.2;
        let fwd = generate_clip(&s, 5, 0);
        let rev = generate_clip(&s, 5, 1);
        let hw = 64;
        for c in 0..2 {
            for t in 0..6 {
                assert_eq!(&fwd[(c * 6 + t) * hw..][..hw], &rev[(c * 6 + 5 - t) * hw..][..hw]);
            }
        }
    }

    #[test]
    fn labels_are_balanced_and_batch_stacks() {
        let d = generate(&spec(MotionFamily::Oscillation, 3)).unwrap();
        assert_eq!(d.labels, [0, 1, 2, 0, 1, 2]);
        let (x, y) = d.batch(&[4, 1]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 6, 8, 8]);
        assert_eq!(y, [1, 1]);
        assert_eq!(&x.data()[..d.clip_len()], d.clip(4));
        assert!(d.batch(&[6]).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&spec(MotionFamily::Translation, 9)).is_err());
        assert!(generate(&spec(MotionFamily::Oscillation, 4)).is_err());
        assert!(generate(&spec(MotionFamily::ForwardReversed, 3)).is_err());
        let mut s = spec(MotionFamily::Translation, 2);
        s.noise = f64::NAN;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn truncate_keeps_leading_frames() {
        let d = generate(&spec(MotionFamily::Translation, 2)).unwrap();
        let t = d.truncate_frames(2).unwrap();
        assert_eq!(t.clip_shape, [2, 2, 8, 8]);
        assert_eq!(&t.clip(1)[..128], &d.clip(1)[..128]);
        assert_eq!(&t.clip(1)[128..], &d.clip(1)[384..512]);
    }
}
