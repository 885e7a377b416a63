use crate::error::{Result, ZipError};
use crate::tensor::{maxpool2d, maxpool2d_backward, relu, relu_backward, Real, Tensor};

use super::layers::ConvBlockCache;
use super::{ZipNet, LEVELS};

/// F, H and G maps of one image. `g[2]` is `f[2]` itself.
#[derive(Clone, Debug)]
pub struct Pyramid<T: Real> {
    pub f: Vec<Tensor<T>>,
    /// `[H^1, H^2]` when the zoom-in path is enabled.
    pub h: Option<Vec<Tensor<T>>>,
    pub g: Vec<Tensor<T>>,
    pub strides: [usize; 3],
}

#[derive(Clone, Debug)]
struct ZoomCache<T: Real> {
    block3: ConvBlockCache<T>,
    h2: Tensor<T>,
    block2: ConvBlockCache<T>,
}

/// Everything the backward pass of the feature extractor needs.
#[derive(Clone, Debug)]
pub struct FeatureCache<T: Real> {
    stages: [Vec<ConvBlockCache<T>>; 3],
    pool_in: [Vec<usize>; 2],
    pool_argmax: [Vec<usize>; 2],
    zoom: Option<ZoomCache<T>>,
    merge_pre: Vec<Tensor<T>>,
}

impl<T: Real> ZipNet<T> {
    /// Backbone, zoom-in path and merge. `train` selects batch statistics
    /// in normalization layers. Extents must be multiples of 32.
    pub fn features(&mut self, image: &Tensor<T>, train: bool) -> Result<(Pyramid<T>, FeatureCache<T>)> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(ZipError::invalid(
                "features",
                format!("expected a 3-channel image with extents multiple of 32 and at least 32, got {:?}", image.shape()),
            ));
        }
        let mut x = image.clone();
        let mut caches: [Vec<ConvBlockCache<T>>; 3] = Default::default();
        let mut f = Vec::with_capacity(LEVELS);
        let mut pool_in: [Vec<usize>; 2] = Default::default();
        let mut pool_argmax: [Vec<usize>; 2] = Default::default();
        for s in 0..3 {
            if s > 0 {
                let p = maxpool2d(&x, 2, 2)?;
                pool_in[s - 1] = x.shape().to_vec();
                pool_argmax[s - 1] = p.argmax;
                x = p.output;
            }
            for block in self.stages[s].iter_mut() {
                let (y, cache) = block.forward(&x, train)?;
                caches[s].push(cache);
                x = y;
            }
            f.push(x.clone());
        }

        let (hmaps, zoom_cache) = match self.zoom.as_mut() {
            Some(z) => {
                let up3 = z.deconv3.forward(&f[2])?;
                let (h2, block3) = z.block3.forward(&up3, train)?;
                let up2 = z.deconv2.forward(&h2)?;
                let (h1, block2) = z.block2.forward(&up2, train)?;
                (
                    Some(vec![h1, h2.clone()]),
                    Some(ZoomCache { block3, h2, block2 }),
                )
            }
            None => (None, None),
        };

        let mut g = Vec::with_capacity(LEVELS);
        let mut merge_pre = Vec::with_capacity(2);
        for m in 0..2 {
            let mut pre = self.merge[m].conv_f.forward(&f[m])?;
            if let (Some(conv_h), Some(hm)) = (self.merge[m].conv_h.as_ref(), hmaps.as_ref()) {
                pre.add_assign(&conv_h.forward(&hm[m])?)?;
            }
            g.push(relu(&pre));
            merge_pre.push(pre);
        }
        g.push(f[2].clone());

        Ok((
            Pyramid {
                f,
                h: hmaps,
                g,
                strides: self.config.strides,
            },
            FeatureCache {
                stages: caches,
                pool_in,
                pool_argmax,
                zoom: zoom_cache,
                merge_pre,
            },
        ))
    }

    /// Accumulates parameter gradients given gradients w.r.t. `G^1..G^3`.
    pub fn features_backward(&mut self, pyr: &Pyramid<T>, cache: &FeatureCache<T>, dg: Vec<Tensor<T>>) -> Result<()> {
        let mut dg = dg.into_iter();
        let (dg1, dg2, dg3) = match (dg.next(), dg.next(), dg.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(ZipError::invalid("features_backward", "expected three level gradients")),
        };
        let mut df: Vec<Tensor<T>> = Vec::with_capacity(3);
        let mut dh: Vec<Option<Tensor<T>>> = vec![None, None];
        for (m, dgm) in [dg1, dg2].into_iter().enumerate() {
            let dpre = relu_backward(&cache.merge_pre[m], &dgm)?;
            df.push(self.merge[m].conv_f.backward(&pyr.f[m], &dpre)?);
            if let (Some(conv_h), Some(hm)) = (self.merge[m].conv_h.as_mut(), pyr.h.as_ref()) {
                dh[m] = Some(conv_h.backward(&hm[m], &dpre)?);
            }
        }
        let mut df3 = dg3;

        if let (Some(z), Some(zc)) = (self.zoom.as_mut(), cache.zoom.as_ref()) {
            let dh1 = dh[0].take().expect("zoom-in gradient for H^1");
            let dup2 = z.block2.backward(&zc.block2, &dh1)?;
            let mut dh2 = z.deconv2.backward(&zc.h2, &dup2)?;
            dh2.add_assign(dh[1].as_ref().expect("zoom-in gradient for H^2"))?;
            let dup3 = z.block3.backward(&zc.block3, &dh2)?;
            df3.add_assign(&z.deconv3.backward(&pyr.f[2], &dup3)?)?;
        }

        let mut grad = df3;
        for s in (0..3).rev() {
            for (block, c) in self.stages[s].iter_mut().zip(cache.stages[s].iter()).rev() {
                grad = block.backward(c, &grad)?;
            }
            if s > 0 {
                let mut g = maxpool2d_backward(&cache.pool_in[s - 1], &cache.pool_argmax[s - 1], &grad)?;
                g.add_assign(&df[s - 1])?;
                grad = g;
            }
        }
        Ok(())
    }
}
