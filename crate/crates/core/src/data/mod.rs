//! Image datasets: the seeded synthetic generator, folder ingestion with
//! plot-disjoint splits, channel normalization and batch assembly.

mod image;
mod index;
pub mod synth;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::image::Image;
pub use index::{ingest_folder, DatasetIndex, Record, Split};
pub use synth::{generate, SynthDataset, SynthSpec};

use crate::error::{Error, Result};
use crate::model::{BranchSpec, CropPlan, ModelInput, Rect};
use crate::tensor::{Shape4, Tensor4};

pub const INDEX_FILE: &str = "index.csv";
pub const NORMALIZATION_FILE: &str = "normalization.json";

/// Per-channel statistics of the training split, applied as
/// `(x - mean) / std` to every view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn from_training(index: &DatasetIndex, images: &[&Image]) -> Result<Self> {
        let ids = index.ids(Split::Train);
        let first = ids
            .first()
            .map(|&i| images[i])
            .ok_or_else(|| Error::Dataset("no training images to normalize with".into()))?;
        let c = first.channels();
        let mut sum = vec![0f64; c];
        let mut count = 0usize;
        for &i in &ids {
            if images[i].channels() != c {
                return Err(Error::Dataset(format!(
                    "{} has {} channels, expected {c}",
                    index.records[i].path,
                    images[i].channels()
                )));
            }
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += images[i].plane(ch).iter().map(|&v| v as f64).sum::<f64>();
            }
            count += images[i].height() * images[i].width();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0f64; c];
        for &i in &ids {
            for (ch, s) in sq.iter_mut().enumerate() {
                *s += images[i]
                    .plane(ch)
                    .iter()
                    .map(|&v| (v as f64 - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(1e-6))
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let n: Normalization = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if n.mean.len() != n.std.len() || n.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format(format!(
                "{}: bad normalization statistics",
                path.display()
            )));
        }
        Ok(n)
    }
}

/// Decoded images held in memory alongside their index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub images: Vec<Image>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(index: DatasetIndex, images: Vec<Image>) -> Result<Self> {
        if images.len() != index.len() {
            return Err(Error::Dataset(format!(
                "{} images for {} records",
                images.len(),
                index.len()
            )));
        }
        let refs: Vec<&Image> = images.iter().collect();
        let normalization = Normalization::from_training(&index, &refs)?;
        Ok(Dataset {
            index,
            images,
            normalization,
        })
    }

    /// Ingests and decodes a folder. A `normalization.json` sidecar is used
    /// when present so evaluation matches the statistics training used.
    pub fn load(root: &Path, manifest: Option<&Path>) -> Result<Self> {
        let index = ingest_folder(root, manifest)?;
        let images = index
            .records
            .par_iter()
            .map(|r| Image::load(&root.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        let sidecar = root.join(NORMALIZATION_FILE);
        if sidecar.exists() {
            let normalization = Normalization::load(&sidecar)?;
            if images
                .iter()
                .any(|i| i.channels() != normalization.channels())
            {
                return Err(Error::Dataset(
                    "image channels differ from the normalization sidecar".into(),
                ));
            }
            Ok(Dataset {
                index,
                images,
                normalization,
            })
        } else {
            Dataset::new(index, images)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.index.classes.len()
    }
}

fn write_view(dst: &mut [f32], img: &Image, r: Rect, norm: &Normalization) -> Result<()> {
    let crop = img.crop(r)?;
    let p = r.size * r.size;
    for c in 0..crop.channels() {
        let (m, s) = (norm.mean[c] as f32, norm.std[c] as f32);
        for (d, &v) in dst[c * p..(c + 1) * p].iter_mut().zip(crop.plane(c)) {
            *d = (v - m) / s;
        }
    }
    Ok(())
}

/// Assembles the model input for `ids`, applying each image's crop plan:
/// flips first, then the branch resizes, crops and normalization.
pub fn load_batch(
    dataset: &Dataset,
    ids: &[usize],
    plans: &[CropPlan],
    spec: &BranchSpec,
) -> Result<(ModelInput<f32>, Vec<usize>)> {
    if ids.len() != plans.len() || ids.is_empty() {
        return Err(Error::Shape(format!(
            "{} ids with {} crop plans",
            ids.len(),
            plans.len()
        )));
    }
    let norm = &dataset.normalization;
    let c = norm.channels();
    let n = ids.len();
    let gs = spec.global_input_size;
    let ls = spec.local_crop_size;
    let mut global = spec.kind.uses_global().then(|| vec![0f32; n * c * gs * gs]);
    let mut local: Option<Vec<Vec<f32>>> = spec.kind.uses_local().then(|| {
        (0..spec.crops_per_image)
            .map(|_| vec![0f32; n * c * ls * ls])
            .collect()
    });

    for (slot, (&id, plan)) in ids.iter().zip(plans).enumerate() {
        let mut img = dataset
            .images
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("no image with id {id}")))?
            .clone();
        if img.channels() != c {
            return Err(Error::Dataset(format!(
                "{} has {} channels",
                dataset.index.records[id].path,
                img.channels()
            )));
        }
        if plan.flip_horizontal {
            img = img.flip_horizontal();
        }
        if plan.flip_vertical {
            img = img.flip_vertical();
        }
        if let (Some(buf), Some(view)) = (global.as_mut(), plan.global.as_ref()) {
            let resized = img.resize_bilinear(view.width, view.height);
            let per = c * gs * gs;
            write_view(
                &mut buf[slot * per..(slot + 1) * per],
                &resized,
                view.crops[0],
                norm,
            )?;
        }
        if let (Some(bufs), Some(view)) = (local.as_mut(), plan.local.as_ref()) {
            let resized = img.resize_bilinear(view.width, view.height);
            let per = c * ls * ls;
            for (buf, &r) in bufs.iter_mut().zip(&view.crops) {
                write_view(&mut buf[slot * per..(slot + 1) * per], &resized, r, norm)?;
            }
        }
    }
    let labels = ids.iter().map(|&i| dataset.index.label(i)).collect();
    let input = ModelInput {
        global: global
            .map(|d| Tensor4::new(Shape4::new(n, c, gs, gs), d))
            .transpose()?,
        local: local
            .map(|crops| {
                crops
                    .into_iter()
                    .map(|d| Tensor4::new(Shape4::new(n, c, ls, ls), d))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?,
    };
    Ok((input, labels))
}
