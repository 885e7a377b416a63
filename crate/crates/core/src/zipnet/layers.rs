//! Parameterized building blocks with explicit forward caches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, deconv2d, deconv2d_backward, fc,
    fc_backward, relu, relu_backward, BnCache, BnMode, ConvGeom, Parameter, Real, RunningStats, Tensor,
};

pub(crate) fn gaussian<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> Conv<T> {
    /// `std = None` picks He initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
        std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let std = std.unwrap_or_else(|| he_std(in_c * k * k));
        Conv {
            weight: Parameter::new(format!("{name}.weight"), gaussian(&[out_c, in_c, k, k], std, rng), true),
            bias: bias.then(|| Parameter::zeros(format!("{name}.bias"), &[out_c], false)),
            geom,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self.weight.value(), self.bias.as_ref().map(|b| b.value()), self.geom)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, self.weight.value(), self.geom, grad_out)?;
        self.weight.accumulate(g.weight.data());
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(g.bias.data());
        }
        Ok(g.input)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.push(&mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
    }
}

/// Stride-2, kernel-2 transposed convolution without bias.
#[derive(Clone, Debug)]
pub struct Deconv<T: Real> {
    pub weight: Parameter<T>,
    pub geom: ConvGeom,
}

impl<T: Real> Deconv<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Deconv {
            weight: Parameter::new(format!("{name}.weight"), gaussian(&[in_c, out_c, 2, 2], he_std(in_c), rng), true),
            geom: ConvGeom::new(2, 0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        deconv2d(x, self.weight.value(), None, self.geom)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = deconv2d_backward(x, self.weight.value(), self.geom, grad_out)?;
        self.weight.accumulate(g.weight.data());
        Ok(g.input)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.push(&mut self.weight);
    }
}

/// Batch normalization. A frozen layer keeps identity statistics and always
/// runs in eval mode, so each sample is normalized independently of the
/// rest of the batch.
#[derive(Clone, Debug)]
pub struct Bn<T: Real> {
    pub name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub stats: RunningStats<T>,
    pub frozen: bool,
}

impl<T: Real> Bn<T> {
    pub fn new(name: &str, channels: usize, frozen: bool) -> Self {
        Bn {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), false),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels], false),
            stats: if frozen {
                RunningStats::identity(channels)
            } else {
                RunningStats::uninitialized(channels)
            },
            frozen,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BnCache<T>)> {
        let mode = if train && !self.frozen { BnMode::Train } else { BnMode::Eval };
        batchnorm2d(x, self.gamma.value(), self.beta.value(), &mut self.stats, mode)
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = batchnorm2d_backward(cache, self.gamma.value(), grad_out)?;
        self.gamma.accumulate(g.gamma.data());
        self.beta.accumulate(g.beta.data());
        Ok(g.input)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T: Real> {
    input: Tensor<T>,
    bn: BnCache<T>,
    pre: Tensor<T>,
}

/// conv (no bias) + BN + ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Real> {
    pub conv: Conv<T>,
    pub bn: Bn<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_c: usize, out_c: usize, stride: usize, frozen_bn: bool, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv::new(&format!("{name}.conv"), in_c, out_c, 3, ConvGeom::new(stride, 1), false, None, rng),
            bn: Bn::new(&format!("{name}.bn"), out_c, frozen_bn),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
        let z = self.conv.forward(x)?;
        let (pre, bn) = self.bn.forward(&z, train)?;
        let y = relu(&pre);
        Ok((y, ConvBlockCache { input: x.clone(), bn, pre }))
    }

    pub fn backward(&mut self, cache: &ConvBlockCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = relu_backward(&cache.pre, grad_out)?;
        let g = self.bn.backward(&cache.bn, &g)?;
        self.conv.backward(&cache.input, &g)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }

    pub fn bns_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Bn<T>>) {
        out.push(&mut self.bn);
    }
}

#[derive(Clone, Debug)]
pub struct ResBlockCache<T: Real> {
    first: ConvBlockCache<T>,
    mid: Tensor<T>,
    bn: BnCache<T>,
    pre: Tensor<T>,
}

/// `relu(x + bn(conv(relu(bn(conv(x))))))`, stride 1.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Real> {
    pub first: ConvBlock<T>,
    pub conv: Conv<T>,
    pub bn: Bn<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, frozen_bn: bool, rng: &mut R) -> Self {
        ResBlock {
            first: ConvBlock::new(&format!("{name}.a"), channels, channels, 1, frozen_bn, rng),
            conv: Conv::new(&format!("{name}.b.conv"), channels, channels, 3, ConvGeom::new(1, 1), false, None, rng),
            bn: Bn::new(&format!("{name}.b.bn"), channels, frozen_bn),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, ResBlockCache<T>)> {
        let (mid, first) = self.first.forward(x, train)?;
        let z = self.conv.forward(&mid)?;
        let (mut pre, bn) = self.bn.forward(&z, train)?;
        pre.add_assign(x)?;
        let y = relu(&pre);
        Ok((y, ResBlockCache { first, mid, bn, pre }))
    }

    pub fn backward(&mut self, cache: &ResBlockCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g_sum = relu_backward(&cache.pre, grad_out)?;
        let g = self.bn.backward(&cache.bn, &g_sum)?;
        let g = self.conv.backward(&cache.mid, &g)?;
        let mut dx = self.first.backward(&cache.first, &g)?;
        dx.add_assign(&g_sum)?;
        Ok(dx)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.first.params_mut(out);
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }

    pub fn bns_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Bn<T>>) {
        self.first.bns_mut(out);
        out.push(&mut self.bn);
    }
}

#[derive(Clone, Debug)]
pub struct Fc<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> Fc<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_f: usize, out_f: usize, std: f64, rng: &mut R) -> Self {
        Fc {
            weight: Parameter::new(format!("{name}.weight"), gaussian(&[out_f, in_f], std, rng), true),
            bias: Parameter::zeros(format!("{name}.bias"), &[out_f], false),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        fc(x, self.weight.value(), self.bias.value())
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = fc_backward(x, self.weight.value(), grad_out)?;
        self.weight.accumulate(g.weight.data());
        self.bias.accumulate(g.bias.data());
        Ok(g.input)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}
