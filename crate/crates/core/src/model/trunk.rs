use rand::Rng;

use super::spec::TrunkSpec;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, Conv2d, ConvCache};
use crate::tensor::{Real, Tensor4};

/// Stack of conv -> rectifier blocks ending in the final feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk<T> {
    pub convs: Vec<Conv2d<T>>,
}

#[derive(Debug, Clone)]
pub struct TrunkCache<T> {
    convs: Vec<ConvCache<T>>,
    /// Conv outputs before the rectifier.
    pre: Vec<Tensor4<T>>,
}

pub struct TrunkGrads<T> {
    /// `(weight, bias)` per conv, in order.
    pub params: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Trunk<T> {
    pub fn new<R: Rng>(spec: &TrunkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut in_c = spec.in_channels;
        let mut convs = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            convs.push(Conv2d::new(
                in_c, b.channels, b.kernel, b.stride, b.padding, rng,
            )?);
            in_c = b.channels;
        }
        Ok(Trunk { convs })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, TrunkCache<T>)> {
        self.run(x, None)
    }

    /// Forward pass with every rectifier gate frozen to the pattern recorded
    /// in `frozen`; used for finite-difference checks of the whole model.
    pub fn forward_frozen(&self, x: &Tensor4<T>, frozen: &TrunkCache<T>) -> Result<Tensor4<T>> {
        Ok(self.run(x, Some(frozen))?.0)
    }

    fn run(
        &self,
        x: &Tensor4<T>,
        frozen: Option<&TrunkCache<T>>,
    ) -> Result<(Tensor4<T>, TrunkCache<T>)> {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (z, cache) = conv.forward(&h)?;
            h = match frozen {
                None => relu_forward(&z),
                Some(f) => {
                    let gate = &f.pre[i];
                    if gate.shape() != z.shape() {
                        return Err(Error::Shape(
                            "frozen trunk cache does not match input".into(),
                        ));
                    }
                    let data = z
                        .data()
                        .iter()
                        .zip(gate.data())
                        .map(|(&v, &g)| if g > T::zero() { v } else { T::zero() })
                        .collect();
                    Tensor4::from_parts(z.shape(), data)
                }
            };
            caches.push(cache);
            pre.push(z);
        }
        Ok((h, TrunkCache { convs: caches, pre }))
    }

    /// Parameter gradients; the input gradient is not propagated into the image.
    pub fn backward(&self, grad_out: &Tensor4<T>, cache: &TrunkCache<T>) -> Result<TrunkGrads<T>> {
        let mut g = grad_out.clone();
        let mut params = Vec::with_capacity(self.convs.len());
        for i in (0..self.convs.len()).rev() {
            let gz = relu_backward(&g, &cache.pre[i])?;
            let grads = self.convs[i].backward(&gz, &cache.convs[i], i > 0)?;
            params.push((grads.weight, grads.bias));
            if let Some(gx) = grads.input {
                g = gx;
            }
        }
        params.reverse();
        Ok(TrunkGrads { params })
    }
}
