use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::BranchSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

/// Square crop with its top-left corner at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

/// One branch's view: resize the source to `width x height`, then cut crops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchView {
    pub width: usize,
    pub height: usize,
    pub crops: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub global: Option<BranchView>,
    pub local: Option<BranchView>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

/// Dimensions after scaling so the shorter side equals `target`.
pub fn shortest_side_resize(width: usize, height: usize, target: usize) -> (usize, usize) {
    if width <= height {
        let h = (height as f64 * target as f64 / width as f64).round() as usize;
        (target, h.max(target))
    } else {
        let w = (width as f64 * target as f64 / height as f64).round() as usize;
        (w.max(target), target)
    }
}

fn uniform_rect<R: Rng>(width: usize, height: usize, size: usize, rng: &mut R) -> Rect {
    Rect {
        x: rng.random_range(0..=width - size),
        y: rng.random_range(0..=height - size),
        size,
    }
}

fn centered(width: usize, height: usize, size: usize) -> Rect {
    Rect {
        x: (width - size) / 2,
        y: (height - size) / 2,
        size,
    }
}

/// Train: the global view is a random square crop of the shortest-side
/// resize, the local view is four independent uniform crops of the
/// `2 * crop` resize, and horizontal/vertical flips are drawn once per image.
/// Test: centre crops, the four local crops being the quadrants of the centre
/// `2s x 2s` region in the order top-left, top-right, bottom-left,
/// bottom-right; no flips.
pub fn make_crop_plan<R: Rng>(
    width: usize,
    height: usize,
    spec: &BranchSpec,
    phase: Phase,
    rng: &mut R,
) -> Result<CropPlan> {
    let mut required = usize::MAX;
    if spec.kind.uses_global() {
        required = required.min(spec.global_input_size);
    }
    if spec.kind.uses_local() {
        required = required.min(spec.local_resize());
    }
    if width < required {
        return Err(Error::ImageTooSmall {
            dimension: "width",
            actual: width,
            required,
        });
    }
    if height < required {
        return Err(Error::ImageTooSmall {
            dimension: "height",
            actual: height,
            required,
        });
    }

    let global = spec.kind.uses_global().then(|| {
        let s = spec.global_input_size;
        let (w, h) = shortest_side_resize(width, height, s);
        let crop = match phase {
            Phase::Train => uniform_rect(w, h, s, rng),
            Phase::Test => centered(w, h, s),
        };
        BranchView {
            width: w,
            height: h,
            crops: vec![crop],
        }
    });

    let local = spec.kind.uses_local().then(|| {
        let s = spec.local_crop_size;
        let (w, h) = shortest_side_resize(width, height, spec.local_resize());
        let crops = match phase {
            Phase::Train => (0..spec.crops_per_image)
                .map(|_| uniform_rect(w, h, s, rng))
                .collect(),
            Phase::Test => {
                let c = centered(w, h, 2 * s);
                vec![
                    Rect {
                        x: c.x,
                        y: c.y,
                        size: s,
                    },
                    Rect {
                        x: c.x + s,
                        y: c.y,
                        size: s,
                    },
                    Rect {
                        x: c.x,
                        y: c.y + s,
                        size: s,
                    },
                    Rect {
                        x: c.x + s,
                        y: c.y + s,
                        size: s,
                    },
                ]
            }
        };
        BranchView {
            width: w,
            height: h,
            crops,
        }
    });

    let (flip_horizontal, flip_vertical) = match phase {
        Phase::Train => (rng.random_bool(0.5), rng.random_bool(0.5)),
        Phase::Test => (false, false),
    };

    Ok(CropPlan {
        global,
        local,
        flip_horizontal,
        flip_vertical,
    })
}

pub fn make_crop_plan_seeded(
    width: usize,
    height: usize,
    spec: &BranchSpec,
    phase: Phase,
    seed: u64,
) -> Result<CropPlan> {
    make_crop_plan(
        width,
        height,
        spec,
        phase,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}
