//! Seeded sparse-feature images: a few small class-signature blobs, each
//! possibly absent, scattered over a textured background with distractor
//! blobs.
//!
//! A class signature is a hue plus a stripe orientation. The stripes have a
//! period of two pixels, so halving the resolution averages them away: a
//! low-resolution view sees only the hue, a full-resolution view sees both.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::index::{DatasetIndex, Record, Split};
use super::{Dataset, Normalization};
use crate::error::{Error, Result};

/// Brightness of the dark stripes relative to the bright ones.
const STRIPE_DARK: f32 = 0.2;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Side of the square images.
    pub image_size: usize,
    /// Inclusive range for the number of signature blob slots per image.
    pub blob_count: [usize; 2],
    pub blob_size: usize,
    /// Probability that each slot actually holds a blob.
    pub blob_visibility: f64,
    /// Cell size, in pixels, of the smooth background noise.
    pub background_texture_scale: usize,
    pub background_contrast: f32,
    pub pixel_noise: f32,
    /// Inclusive range for the number of distractor blobs per image.
    pub clutter_count: [usize; 2],
    /// Inclusive range for the number of speckles: tiny fragments of a random
    /// class's signature, scattered as false evidence.
    pub speckle_count: [usize; 2],
    pub speckle_size: usize,
    /// Chance of each decoy: an image with `v` visible signature blobs gets
    /// up to `v - 1` full-size signature blobs of other classes, so the true
    /// class always has the most instances but not the strongest one.
    pub decoy_probability: f64,
    /// Inclusive range of the opacity signature and distractor blobs are
    /// blended with; speckles are always opaque.
    pub blob_opacity: [f32; 2],
    /// Inclusive opacity range of a faint full-image stripe texture in the
    /// signature of another class: diffuse false evidence that outweighs the
    /// blobs in total but never locally.
    pub haze_opacity: [f32; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 100,
            image_size: 64,
            blob_count: [2, 3],
            blob_size: 8,
            blob_visibility: 0.8,
            background_texture_scale: 16,
            background_contrast: 0.5,
            pixel_noise: 0.04,
            clutter_count: [2, 4],
            speckle_count: [0, 0],
            speckle_size: 3,
            decoy_probability: 1.0,
            blob_opacity: [1.0, 1.0],
            haze_opacity: [0.05, 0.15],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least two classes".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("each split needs at least one image per class".into());
        }
        let ranges = [self.blob_count, self.clutter_count, self.speckle_count];
        if ranges.iter().any(|r| r[0] > r[1]) {
            return bad("count ranges must be [min, max] with min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.blob_visibility) {
            return bad(format!(
                "blob_visibility {} is not a probability",
                self.blob_visibility
            ));
        }
        if self.blob_size == 0 || self.blob_size > self.image_size {
            return bad(format!(
                "blob_size {} does not fit a {} pixel image",
                self.blob_size, self.image_size
            ));
        }
        if self.speckle_size == 0 || self.speckle_size > self.blob_size {
            return bad(format!("speckle_size must be in 1..={}", self.blob_size));
        }
        for (name, [lo, hi]) in [
            ("blob_opacity", self.blob_opacity),
            ("haze_opacity", self.haze_opacity),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{name} must be a [min, max] range inside [0, 1]"));
            }
        }
        if self.background_texture_scale == 0 {
            return bad("background_texture_scale must be >= 1".into());
        }
        if !(self.background_contrast.is_finite()
            && self.pixel_noise.is_finite()
            && self.pixel_noise >= 0.0)
        {
            return bad("background_contrast and pixel_noise must be finite, noise >= 0".into());
        }
        // Rejection sampling is hopeless once blobs would cover half the image.
        let decoys = self.blob_count[1].saturating_sub(1);
        let area = (self.blob_count[1] + decoys + self.clutter_count[1]) * self.blob_size.pow(2)
            + self.speckle_count[1] * self.speckle_size.pow(2);
        if 2 * area > self.image_size.pow(2) {
            return Err(Error::Dataset(format!(
                "cannot pack blobs covering {area} pixels into a {0}x{0} image",
                self.image_size
            )));
        }
        Ok(())
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub hue: f32,
    pub orientation: Orientation,
    pub color: [f32; 3],
}

/// Class `k` of `num_classes`: hues are spaced evenly around the colour
/// wheel, each used once with horizontal and once with vertical stripes.
pub fn signature(k: usize, num_classes: usize) -> Signature {
    let hues = num_classes.div_ceil(2);
    let hue = (k / 2) as f32 / hues as f32;
    Signature {
        hue,
        orientation: if k.is_multiple_of(2) {
            Orientation::Horizontal
        } else {
            Orientation::Vertical
        },
        color: hsv(hue, 0.85, 0.95),
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlobKind {
    Signature {
        class: usize,
    },
    /// Solid or checkered patch of an arbitrary hue.
    Distractor {
        hue: f32,
        checkered: bool,
    },
    /// Full-size signature of a class other than the label.
    Decoy {
        class: usize,
    },
    /// Small fragment of some class's signature.
    Speckle {
        class: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub opacity: f32,
    #[serde(flatten)]
    pub kind: BlobKind,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Image,
    pub label: usize,
    pub split: Split,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    /// Train samples then test samples, each class-major.
    pub samples: Vec<SynthSample>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one image; train and test use disjoint sub-seeds.
fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let split_seed = splitmix(seed ^ splitmix(split as u64 + 1));
    ChaCha8Rng::seed_from_u64(splitmix(split_seed ^ splitmix(index as u64)))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let jobs: Vec<(Split, usize, usize)> = [Split::Train, Split::Test]
        .into_iter()
        .flat_map(|split| {
            let per = spec.per_class(split);
            (0..spec.num_classes * per).map(move |i| (split, i, i / per))
        })
        .collect();
    let samples = jobs
        .into_par_iter()
        .map(|(split, i, label)| {
            render(spec, label, &mut image_rng(spec.seed, split, i)).map(|(image, blobs)| {
                SynthSample {
                    image,
                    label,
                    split,
                    blobs,
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        spec: spec.clone(),
        samples,
    })
}

fn place<R: Rng>(
    spec: &SynthSpec,
    s: usize,
    taken: &[Blob],
    rng: &mut R,
) -> Result<(usize, usize)> {
    let n = spec.image_size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let (x, y) = (rng.random_range(0..=n - s), rng.random_range(0..=n - s));
        let clear = taken
            .iter()
            .all(|b| x + s <= b.x || b.x + b.size <= x || y + s <= b.y || b.y + b.size <= y);
        if clear {
            return Ok((x, y));
        }
    }
    Err(Error::Dataset(format!(
        "could not place {} non-overlapping blobs of size {s} in {n}x{n}",
        taken.len() + 1
    )))
}

fn render<R: Rng>(spec: &SynthSpec, label: usize, rng: &mut R) -> Result<(Image, Vec<Blob>)> {
    let n = spec.image_size;
    let mut img = background(spec, rng);
    let [lo, hi] = spec.haze_opacity;
    if hi > 0.0 {
        let other = (label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
        let alpha = rng.random_range(lo..=hi);
        let sig = signature(other, spec.num_classes);
        for y in 0..n {
            for x in 0..n {
                let phase = match sig.orientation {
                    Orientation::Horizontal => y,
                    Orientation::Vertical => x,
                };
                let gain = if phase % 2 == 0 { 1.0 } else { STRIPE_DARK };
                for (c, &v) in sig.color.iter().enumerate() {
                    let under = img.get(c, y, x);
                    img.set(c, y, x, under + alpha * (v * gain - under));
                }
            }
        }
    }

    let mut blobs: Vec<Blob> = Vec::new();
    let slots = rng.random_range(spec.blob_count[0]..=spec.blob_count[1]);
    for _ in 0..slots {
        if rng.random_bool(spec.blob_visibility) {
            let (x, y) = place(spec, spec.blob_size, &blobs, rng)?;
            blobs.push(Blob {
                x,
                y,
                size: spec.blob_size,
                opacity: 1.0,
                kind: BlobKind::Signature { class: label },
            });
        }
    }
    let visible = blobs.len();
    for _ in 1..visible.max(1) {
        if rng.random_bool(spec.decoy_probability) {
            let (x, y) = place(spec, spec.blob_size, &blobs, rng)?;
            let other = (label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
            blobs.push(Blob {
                x,
                y,
                size: spec.blob_size,
                opacity: 1.0,
                kind: BlobKind::Decoy { class: other },
            });
        }
    }
    let clutter = rng.random_range(spec.clutter_count[0]..=spec.clutter_count[1]);
    for _ in 0..clutter {
        let (x, y) = place(spec, spec.blob_size, &blobs, rng)?;
        blobs.push(Blob {
            x,
            y,
            size: spec.blob_size,
            opacity: 1.0,
            kind: BlobKind::Distractor {
                hue: rng.random(),
                checkered: rng.random_bool(0.5),
            },
        });
    }

    let speckles = rng.random_range(spec.speckle_count[0]..=spec.speckle_count[1]);
    for _ in 0..speckles {
        let (x, y) = place(spec, spec.speckle_size, &blobs, rng)?;
        blobs.push(Blob {
            x,
            y,
            size: spec.speckle_size,
            opacity: 1.0,
            kind: BlobKind::Speckle {
                class: rng.random_range(0..spec.num_classes),
            },
        });
    }

    let [lo, hi] = spec.blob_opacity;
    for b in blobs.iter_mut() {
        if !matches!(b.kind, BlobKind::Speckle { .. }) {
            b.opacity = rng.random_range(lo..=hi);
        }
    }
    for b in &blobs {
        for dy in 0..b.size {
            for dx in 0..b.size {
                let (gain, color) = match b.kind {
                    BlobKind::Signature { class }
                    | BlobKind::Decoy { class }
                    | BlobKind::Speckle { class } => {
                        let sig = signature(class, spec.num_classes);
                        let phase = match sig.orientation {
                            Orientation::Horizontal => dy,
                            Orientation::Vertical => dx,
                        };
                        (if phase % 2 == 0 { 1.0 } else { STRIPE_DARK }, sig.color)
                    }
                    BlobKind::Distractor { hue, checkered } => {
                        let g = if !checkered {
                            (1.0 + STRIPE_DARK) / 2.0
                        } else if (dx + dy) % 2 == 0 {
                            1.0
                        } else {
                            STRIPE_DARK
                        };
                        (g, hsv(hue, 0.85, 0.95))
                    }
                };
                for (c, &v) in color.iter().enumerate() {
                    let under = img.get(c, b.y + dy, b.x + dx);
                    img.set(
                        c,
                        b.y + dy,
                        b.x + dx,
                        under + b.opacity * (v * gain - under),
                    );
                }
            }
        }
    }

    if spec.pixel_noise > 0.0 {
        for v in img.data_mut() {
            let e: f32 = rng.sample(StandardNormal);
            *v += spec.pixel_noise * e;
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    debug_assert!(blobs.iter().all(|b| b.x + b.size <= n && b.y + b.size <= n));
    Ok((img, blobs))
}

/// Smooth value noise: a coarse random lattice per channel, mostly shared
/// grey with a little colour, interpolated with a smoothstep.
fn background<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Image {
    let n = spec.image_size;
    let cell = spec.background_texture_scale;
    let cells = n / cell + 2;
    let lattice =
        |rng: &mut R| -> Vec<f32> { (0..cells * cells).map(|_| rng.random::<f32>()).collect() };
    let grey = lattice(rng);
    let tint: Vec<Vec<f32>> = (0..3).map(|_| lattice(rng)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let sample = |grid: &[f32], x: usize, y: usize| -> f32 {
        let (fx, fy) = (x as f32 / cell as f32, y as f32 / cell as f32);
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (smooth(fx - ix as f32), smooth(fy - iy as f32));
        let at = |i: usize, j: usize| grid[j * cells + i];
        let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * tx;
        let bottom = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * tx;
        top + (bottom - top) * ty
    };
    let mut img = Image::filled(3, n, n, 0.0);
    for y in 0..n {
        for x in 0..n {
            let g = sample(&grey, x, y);
            for (c, t) in tint.iter().enumerate() {
                let v = 0.45 + spec.background_contrast * (0.75 * g + 0.25 * sample(t, x, y) - 0.5);
                img.set(c, y, x, v);
            }
        }
    }
    img
}

impl SynthDataset {
    pub fn class_name(k: usize) -> String {
        format!("class_{k:02}")
    }

    fn record_path(split: Split, label: usize, i: usize) -> String {
        format!("{}/{}/{i:06}.png", split.as_str(), Self::class_name(label))
    }

    pub fn index(&self) -> DatasetIndex {
        let classes = (0..self.spec.num_classes).map(Self::class_name).collect();
        let mut counters = [0usize; 2];
        let records = self
            .samples
            .iter()
            .map(|s| {
                let i = counters[s.split as usize];
                counters[s.split as usize] += 1;
                Record {
                    path: Self::record_path(s.split, s.label, i),
                    class: Self::class_name(s.label),
                    plot: None,
                    split: s.split,
                    date: None,
                }
            })
            .collect();
        DatasetIndex::new(classes, records).expect("generated index is consistent")
    }

    pub fn into_dataset(self) -> Dataset {
        let index = self.index();
        let images: Vec<Image> = self.samples.into_iter().map(|s| s.image).collect();
        Dataset::new(index, images).expect("generated dataset is consistent")
    }

    /// Writes `<split>/<class>/<n>.png`, `index.csv`, `normalization.json`
    /// and `blobs.json` (oracle blob locations) under `root`.
    pub fn write_folder(&self, root: &Path) -> Result<DatasetIndex> {
        let index = self.index();
        for class in &index.classes {
            for split in [Split::Train, Split::Test] {
                let dir = root.join(split.as_str()).join(class);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        index
            .records
            .par_iter()
            .zip(self.samples.par_iter())
            .try_for_each(|(r, s)| s.image.save_png(&root.join(&r.path)))?;
        index.write_csv(&root.join(super::INDEX_FILE))?;
        let images: Vec<&Image> = self.samples.iter().map(|s| &s.image).collect();
        Normalization::from_training(&index, &images)?
            .save(&root.join(super::NORMALIZATION_FILE))?;
        let blobs: Vec<_> = index
            .records
            .iter()
            .zip(&self.samples)
            .map(|(r, s)| serde_json::json!({ "path": r.path, "blobs": s.blobs }))
            .collect();
        let path = root.join("blobs.json");
        fs::write(
            &path,
            serde_json::to_vec_pretty(&blobs).expect("serializable"),
        )
        .map_err(|e| Error::io(&path, e))?;
        Ok(index)
    }

    /// Fraction of pixels covered by signature blobs.
    pub fn signature_pixel_fraction(&self) -> f64 {
        let n = self.spec.image_size * self.spec.image_size;
        let covered: usize = self
            .samples
            .iter()
            .flat_map(|s| &s.blobs)
            .filter(|b| matches!(b.kind, BlobKind::Signature { .. }))
            .map(|b| b.size * b.size)
            .sum();
        covered as f64 / (n * self.samples.len()) as f64
    }

    /// Accuracy of a nearest-signature rule that is told where the first
    /// signature blob is, over images that contain at least one.
    pub fn oracle_accuracy(&self) -> f64 {
        let sigs: Vec<Signature> = (0..self.spec.num_classes)
            .map(|k| signature(k, self.spec.num_classes))
            .collect();
        let (mut hits, mut total) = (0usize, 0usize);
        for s in &self.samples {
            let Some(b) = s
                .blobs
                .iter()
                .find(|b| matches!(b.kind, BlobKind::Signature { .. }))
            else {
                continue;
            };
            total += 1;
            if classify_blob(&s.image, b, &sigs) == s.label {
                hits += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

fn classify_blob(img: &Image, b: &Blob, sigs: &[Signature]) -> usize {
    let mut mean = [0f32; 3];
    let (mut dy_energy, mut dx_energy) = (0f32, 0f32);
    for (c, m) in mean.iter_mut().enumerate() {
        for y in b.y..b.y + b.size {
            for x in b.x..b.x + b.size {
                let v = img.get(c, y, x);
                *m += v;
                if y + 1 < b.y + b.size {
                    dy_energy += (v - img.get(c, y + 1, x)).abs();
                }
                if x + 1 < b.x + b.size {
                    dx_energy += (v - img.get(c, y, x + 1)).abs();
                }
            }
        }
    }
    let orientation = if dy_energy > dx_energy {
        Orientation::Horizontal
    } else {
        Orientation::Vertical
    };
    let unit = |v: [f32; 3]| {
        let n = v.iter().map(|a| a * a).sum::<f32>().sqrt().max(1e-6);
        v.map(|a| a / n)
    };
    let m = unit(mean);
    sigs.iter()
        .enumerate()
        .filter(|(_, s)| s.orientation == orientation)
        .map(|(k, s)| {
            let u = unit(s.color);
            let d: f32 = m.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum();
            (k, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap_or(0)
}
