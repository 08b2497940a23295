use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::spec::{BranchKind, ModelSpec};
use super::trunk::{Trunk, TrunkCache};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{BranchTag, Checkpoint, LayerRecord, LayerType};
use crate::nn::{Conv2d, Dense, ParamSlot};
use crate::pooling::{cross_crop_backward, cross_crop_pool, PoolContext, Schedule};
use crate::tensor::{Matrix, Real, Shape4, Tensor4};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// Multi-resolution crop pooling classifier.
///
/// The global branch and the local branch own separate trunks; the four local
/// crops share one trunk. Pooled features are concatenated global-first and
/// fed to a single dense head.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    global: Option<Trunk<T>>,
    local: Option<Trunk<T>>,
    head: Dense<T>,
    id: u64,
    generation: u64,
}

/// Per-branch inputs for one batch. Local crops are given crop by crop, each
/// a full `N x C x s x s` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub global: Option<Tensor4<T>>,
    pub local: Option<Vec<Tensor4<T>>>,
}

#[derive(Debug, Clone)]
struct BranchContext<T> {
    trunk: TrunkCache<T>,
    pool: PoolContext,
}

/// Forward state consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ModelContext<T> {
    model_id: u64,
    generation: u64,
    batch: usize,
    global: Option<BranchContext<T>>,
    local: Option<BranchContext<T>>,
    features: Matrix<T>,
}

impl<T: Real> ModelContext<T> {
    /// Pooled features fed to the head.
    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn pool_contexts(&self) -> impl Iterator<Item = &PoolContext> {
        self.global.iter().chain(self.local.iter()).map(|b| &b.pool)
    }

    /// `(fallbacks, pooled planes)` summed over both branches.
    pub fn fallback_counts(&self) -> (usize, usize) {
        self.pool_contexts().fold((0, 0), |(f, p), ctx| {
            let s = ctx.input_shape();
            (f + ctx.fallback_count(), p + s.n * s.c)
        })
    }
}

/// Gradients aligned with [`Model::param_names`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> ModelGrads<T> {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

fn next_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let global = spec
            .branch
            .kind
            .uses_global()
            .then(|| Trunk::new(&spec.trunk, rng))
            .transpose()?;
        let local = spec
            .branch
            .kind
            .uses_local()
            .then(|| Trunk::new(&spec.trunk, rng))
            .transpose()?;
        let head = Dense::new(spec.feature_dim(), spec.num_classes, rng)?;
        Ok(Model {
            spec,
            global,
            local,
            head,
            id: next_id(),
            generation: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> &Dense<T> {
        &self.head
    }

    pub fn global_trunk(&self) -> Option<&Trunk<T>> {
        self.global.as_ref()
    }

    pub fn local_trunk(&self) -> Option<&Trunk<T>> {
        self.local.as_ref()
    }

    fn check_input(&self, input: &ModelInput<T>) -> Result<usize> {
        let kind = self.spec.branch.kind;
        let mut batch = None;
        let mut expect = |t: &Tensor4<T>, side: usize, what: &str| -> Result<()> {
            let s = t.shape();
            if s.c != self.spec.trunk.in_channels || s.h != side || s.w != side {
                return Err(Error::Shape(format!(
                    "{what} input is {s}, expected Nx{}x{side}x{side}",
                    self.spec.trunk.in_channels
                )));
            }
            match batch {
                None => batch = Some(s.n),
                Some(n) if n != s.n => {
                    return Err(Error::Shape(format!(
                        "{what} batch {} differs from {n}",
                        s.n
                    )))
                }
                _ => {}
            }
            Ok(())
        };
        match (&input.global, kind.uses_global()) {
            (Some(g), true) => expect(g, self.spec.branch.global_input_size, "global")?,
            (None, true) => return Err(Error::Shape("model needs a global-branch input".into())),
            (Some(_), false) => return Err(Error::Shape("model has no global branch".into())),
            (None, false) => {}
        }
        match (&input.local, kind.uses_local()) {
            (Some(crops), true) => {
                if crops.len() != self.spec.branch.crops_per_image {
                    return Err(Error::Shape(format!(
                        "local branch needs {} crops, got {}",
                        self.spec.branch.crops_per_image,
                        crops.len()
                    )));
                }
                for c in crops {
                    expect(c, self.spec.branch.local_crop_size, "local crop")?;
                }
            }
            (None, true) => return Err(Error::Shape("model needs local-branch crops".into())),
            (Some(_), false) => return Err(Error::Shape("model has no local branch".into())),
            (None, false) => {}
        }
        batch.ok_or_else(|| Error::Shape("empty model input".into()))
    }

    pub fn forward(
        &self,
        input: &ModelInput<T>,
        schedule: Option<&Schedule>,
    ) -> Result<(Matrix<T>, ModelContext<T>)> {
        let batch = self.check_input(input)?;
        let mode = self.spec.branch.pool_mode;
        let mut features: Option<Matrix<T>> = None;

        let global = match (&self.global, &input.global) {
            (Some(trunk), Some(x)) => {
                let (map, cache) = trunk.forward(x)?;
                let (f, pool) = cross_crop_pool(&[&map], mode, schedule)?;
                features = Some(f);
                Some(BranchContext { trunk: cache, pool })
            }
            _ => None,
        };
        let local = match (&self.local, &input.local) {
            (Some(trunk), Some(crops)) => {
                let refs: Vec<&Tensor4<T>> = crops.iter().collect();
                let stacked = Tensor4::concat_batch(&refs)?;
                let (map, cache) = trunk.forward(&stacked)?;
                let maps = map.split_batch(batch)?;
                let map_refs: Vec<&Tensor4<T>> = maps.iter().collect();
                let (f, pool) = cross_crop_pool(&map_refs, mode, schedule)?;
                features = Some(match features {
                    Some(g) => g.hconcat(&f)?,
                    None => f,
                });
                Some(BranchContext { trunk: cache, pool })
            }
            _ => None,
        };
        let features = features.expect("validated model has a branch");
        let logits = self.head.forward(&features)?;
        Ok((
            logits,
            ModelContext {
                model_id: self.id,
                generation: self.generation,
                batch,
                global,
                local,
                features,
            },
        ))
    }

    /// Forward pass with pooling selections and rectifier gates frozen to
    /// those in `ctx`. Agrees with [`Model::forward`] at the inputs and
    /// parameters that produced `ctx`.
    pub fn forward_frozen(
        &self,
        input: &ModelInput<T>,
        ctx: &ModelContext<T>,
    ) -> Result<Matrix<T>> {
        let batch = self.check_input(input)?;
        let mut features: Option<Matrix<T>> = None;
        if let (Some(trunk), Some(x), Some(b)) = (&self.global, &input.global, &ctx.global) {
            let map = trunk.forward_frozen(x, &b.trunk)?;
            features = Some(b.pool.replay(&[&map])?);
        }
        if let (Some(trunk), Some(crops), Some(b)) = (&self.local, &input.local, &ctx.local) {
            let refs: Vec<&Tensor4<T>> = crops.iter().collect();
            let map = trunk.forward_frozen(&Tensor4::concat_batch(&refs)?, &b.trunk)?;
            let maps = map.split_batch(batch)?;
            let map_refs: Vec<&Tensor4<T>> = maps.iter().collect();
            let f = b.pool.replay(&map_refs)?;
            features = Some(match features {
                Some(g) => g.hconcat(&f)?,
                None => f,
            });
        }
        let features =
            features.ok_or_else(|| Error::StaleContext("context has no branches".into()))?;
        self.head.forward(&features)
    }

    pub fn backward(
        &self,
        grad_logits: &Matrix<T>,
        ctx: &ModelContext<T>,
    ) -> Result<ModelGrads<T>> {
        if ctx.model_id != self.id || ctx.generation != self.generation {
            return Err(Error::StaleContext(format!(
                "context from model {} generation {}, this is model {} generation {}",
                ctx.model_id, ctx.generation, self.id, self.generation
            )));
        }
        if grad_logits.rows() != ctx.batch || grad_logits.cols() != self.spec.num_classes {
            return Err(Error::Shape(format!(
                "logit gradient is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                ctx.batch,
                self.spec.num_classes
            )));
        }
        let head = self.head.backward(&ctx.features, grad_logits)?;
        let c = self.spec.trunk.out_channels();
        let (g_global, g_local) = match self.spec.branch.kind {
            BranchKind::GlobalOnly => (Some(head.input), None),
            BranchKind::LocalOnly => (None, Some(head.input)),
            BranchKind::MultiRes => {
                let (a, b) = head.input.hsplit(c)?;
                (Some(a), Some(b))
            }
        };

        let mut tensors = Vec::new();
        if let (Some(trunk), Some(b), Some(g)) = (&self.global, &ctx.global, g_global) {
            let gmap = cross_crop_backward(&g, &b.pool)?.pop().expect("one crop");
            for (w, bias) in trunk.backward(&gmap, &b.trunk)?.params {
                tensors.push(w);
                tensors.push(bias);
            }
        }
        if let (Some(trunk), Some(b), Some(g)) = (&self.local, &ctx.local, g_local) {
            let gmaps = cross_crop_backward(&g, &b.pool)?;
            let refs: Vec<&Tensor4<T>> = gmaps.iter().collect();
            let stacked = Tensor4::concat_batch(&refs)?;
            for (w, bias) in trunk.backward(&stacked, &b.trunk)?.params {
                tensors.push(w);
                tensors.push(bias);
            }
        }
        tensors.push(head.weight);
        tensors.push(head.bias);
        Ok(ModelGrads { tensors })
    }

    fn trunks(&self) -> impl Iterator<Item = (&'static str, &Trunk<T>)> {
        self.global
            .iter()
            .map(|t| ("global", t))
            .chain(self.local.iter().map(|t| ("local", t)))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (branch, trunk) in self.trunks() {
            for i in 0..trunk.convs.len() {
                names.push(format!("{branch}.conv{i}.weight"));
                names.push(format!("{branch}.conv{i}.bias"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (_, trunk) in self.trunks() {
            for conv in &trunk.convs {
                out.push(conv.weight.data());
                out.push(&conv.bias);
            }
        }
        out.push(self.head.weight.data());
        out.push(&self.head.bias);
        out
    }

    /// Mutable parameter views in [`Model::param_names`] order. Contexts from
    /// earlier forward passes become stale.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        self.generation += 1;
        let names = self.param_names();
        let mut values: Vec<&mut [T]> = Vec::new();
        for trunk in self.global.iter_mut().chain(self.local.iter_mut()) {
            for conv in trunk.convs.iter_mut() {
                values.push(conv.weight.data_mut());
                values.push(&mut conv.bias);
            }
        }
        values.push(self.head.weight.data_mut());
        values.push(&mut self.head.bias);
        names
            .into_iter()
            .zip(values)
            .map(|(name, value)| ParamSlot { name, value })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let cast_trunk = |t: &Trunk<T>| Trunk {
            convs: t
                .convs
                .iter()
                .map(|c| Conv2d {
                    weight: c.weight.cast(),
                    bias: c.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    stride: c.stride,
                    padding: c.padding,
                })
                .collect(),
        };
        Model {
            spec: self.spec.clone(),
            global: self.global.as_ref().map(cast_trunk),
            local: self.local.as_ref().map(cast_trunk),
            head: Dense {
                weight: Matrix::new(
                    self.head.weight.rows(),
                    self.head.weight.cols(),
                    self.head
                        .weight
                        .data()
                        .iter()
                        .map(|v| U::from_f64(v.as_f64()))
                        .collect(),
                )
                .expect("same shape"),
                bias: self
                    .head
                    .bias
                    .iter()
                    .map(|v| U::from_f64(v.as_f64()))
                    .collect(),
            },
            id: next_id(),
            generation: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let mut layers = Vec::new();
        for (branch, trunk) in self.trunks() {
            let tag = if branch == "global" {
                BranchTag::GlobalTrunk
            } else {
                BranchTag::LocalTrunk
            };
            for conv in &trunk.convs {
                let s = conv.weight.shape();
                layers.push(LayerRecord {
                    layer_type: LayerType::Conv,
                    branch: tag,
                    dims: vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
                    stride: conv.stride as u32,
                    padding: conv.padding as u32,
                    weight: f32s(conv.weight.data()),
                    bias: f32s(&conv.bias),
                });
            }
        }
        layers.push(LayerRecord {
            layer_type: LayerType::Dense,
            branch: BranchTag::Head,
            dims: vec![
                self.head.weight.rows() as u32,
                self.head.weight.cols() as u32,
            ],
            stride: 0,
            padding: 0,
            weight: f32s(self.head.weight.data()),
            bias: f32s(&self.head.bias),
        });
        Checkpoint { layers }
    }

    /// Rebuilds a model from a checkpoint, checking the layer manifest
    /// against `spec`.
    pub fn from_checkpoint(spec: ModelSpec, ck: &Checkpoint) -> Result<Self> {
        spec.validate()?;
        let mut layers = ck.layers.iter();
        let mut trunk_for = |tag: BranchTag| -> Result<Trunk<T>> {
            let mut convs = Vec::new();
            let mut in_c = spec.trunk.in_channels;
            for b in &spec.trunk.blocks {
                let l = layers
                    .next()
                    .ok_or_else(|| Error::Format("checkpoint has too few layers".into()))?;
                let dims = [
                    b.channels as u32,
                    in_c as u32,
                    b.kernel as u32,
                    b.kernel as u32,
                ];
                if l.layer_type != LayerType::Conv
                    || l.branch != tag
                    || l.dims != dims
                    || l.stride != b.stride as u32
                    || l.padding != b.padding as u32
                {
                    return Err(Error::Format(format!(
                        "checkpoint layer {:?} {:?} {:?} does not match the model spec",
                        l.layer_type, l.branch, l.dims
                    )));
                }
                convs.push(Conv2d {
                    weight: Tensor4::new(
                        Shape4::new(b.channels, in_c, b.kernel, b.kernel),
                        l.weight.iter().map(|&v| T::from_f64(v as f64)).collect(),
                    )?,
                    bias: l.bias.iter().map(|&v| T::from_f64(v as f64)).collect(),
                    stride: b.stride,
                    padding: b.padding,
                });
                in_c = b.channels;
            }
            Ok(Trunk { convs })
        };
        let global = spec
            .branch
            .kind
            .uses_global()
            .then(|| trunk_for(BranchTag::GlobalTrunk))
            .transpose()?;
        let local = spec
            .branch
            .kind
            .uses_local()
            .then(|| trunk_for(BranchTag::LocalTrunk))
            .transpose()?;
        let l = layers
            .next()
            .ok_or_else(|| Error::Format("checkpoint is missing the head".into()))?;
        let (out, inp) = (spec.num_classes, spec.feature_dim());
        if l.layer_type != LayerType::Dense
            || l.branch != BranchTag::Head
            || l.dims != [out as u32, inp as u32]
        {
            return Err(Error::Format(
                "checkpoint head does not match the model spec".into(),
            ));
        }
        if layers.next().is_some() {
            return Err(Error::Format("checkpoint has extra layers".into()));
        }
        let head = Dense {
            weight: Matrix::new(
                out,
                inp,
                l.weight.iter().map(|&v| T::from_f64(v as f64)).collect(),
            )?,
            bias: l.bias.iter().map(|&v| T::from_f64(v as f64)).collect(),
        };
        Ok(Model {
            spec,
            global,
            local,
            head,
            id: next_id(),
            generation: 0,
        })
    }
}
