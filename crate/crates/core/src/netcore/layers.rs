//! Convolution and normalization layers with explicit backward passes.
//! Parameters live in a flat slice addressed through [`Slot`]s.

use super::params::{ParamLayout, Slot};

/// C×H×W feature map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Column of all channels at one spatial position.
    pub fn column(&self, y: usize, x: usize) -> Vec<f64> {
        let p = self.plane();
        let i = y * self.width + x;
        (0..self.channels).map(|c| self.data[c * p + i]).collect()
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: Slot,
    bias: Slot,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = layout.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
        );
        let bias = layout.register(format!("{name}.bias"), &[out_channels]);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn weight(&self) -> Slot {
        self.weight
    }

    pub fn bias(&self) -> Slot {
        self.bias
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; self.fan_in() * n];
        for c in 0..x.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &x.data[(c * x.height + iy as usize) * x.width..];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (c_in, h, w) = shape;
        let k = self.kernel;
        let n = oh * ow;
        let mut dx = FeatureMap::zeros(c_in, h, w);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx.data[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let mut y = FeatureMap::zeros(self.out_channels, oh, ow);
        let bias = self.bias.get(params);
        for (o, b) in bias.iter().enumerate() {
            y.data[o * n..(o + 1) * n].fill(*b);
        }
        let ckk = self.fan_in();
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                ckk,
                n,
                1.0,
                self.weight.get(params).as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                y.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let cache = ConvCache {
            cols,
            in_shape: (x.channels, x.height, x.width),
            out_hw: (oh, ow),
        };
        (y, cache)
    }

    /// Accumulates weight and bias gradients into `grads` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, params: &[f64], cache: &ConvCache, dy: &FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let ckk = self.fan_in();
        for (o, db) in self.bias.get_mut(grads).iter_mut().enumerate() {
            *db += dy.data[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                n,
                ckk,
                1.0,
                dy.data.as_ptr(),
                n as isize,
                1,
                cache.cols.as_ptr(),
                1,
                n as isize,
                1.0,
                self.weight.get_mut(grads).as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
        let mut dcols = vec![0.0; ckk * n];
        unsafe {
            matrixmultiply::dgemm(
                ckk,
                self.out_channels,
                n,
                1.0,
                self.weight.get(params).as_ptr(),
                1,
                ckk as isize,
                dy.data.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let (c, h, w) = cache.in_shape;
        if self.kernel == 1 && self.stride == 1 {
            FeatureMap {
                channels: c,
                height: h,
                width: w,
                data: dcols,
            }
        } else {
            self.col2im(&dcols, cache.in_shape, oh, ow)
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: Slot,
    beta: Slot,
}

pub struct NormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        let gamma = layout.register(format!("{name}.gamma"), &[channels]);
        let beta = layout.register(format!("{name}.beta"), &[channels]);
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn gamma(&self) -> Slot {
        self.gamma
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, NormCache) {
        let plane = x.plane();
        let per_group = self.channels / self.groups * plane;
        let gamma = self.gamma.get(params);
        let beta = self.beta.get(params);
        let mut normalized = vec![0.0; x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * per_group..(g + 1) * per_group;
            let xs = &x.data[span.clone()];
            let mean = xs.iter().sum::<f64>() / per_group as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(istd);
            for (dst, v) in normalized[span].iter_mut().zip(xs) {
                *dst = (v - mean) * istd;
            }
        }
        let mut y = x.same_shape();
        for c in 0..self.channels {
            let span = c * plane..(c + 1) * plane;
            for (dst, n) in y.data[span.clone()].iter_mut().zip(&normalized[span]) {
                *dst = gamma[c] * n + beta[c];
            }
        }
        (y, NormCache { normalized, inv_std })
    }

    pub fn backward(&self, params: &[f64], cache: &NormCache, dy: &FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let plane = dy.plane();
        let per_group = self.channels / self.groups * plane;
        let gamma = self.gamma.get(params);
        let mut dnorm = vec![0.0; dy.data.len()];
        {
            let (dgamma_range, dbeta_range) = (self.gamma.range(), self.beta.range());
            for c in 0..self.channels {
                let span = c * plane..(c + 1) * plane;
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in span {
                    dg += dy.data[i] * cache.normalized[i];
                    db += dy.data[i];
                    dnorm[i] = dy.data[i] * gamma[c];
                }
                grads[dgamma_range.start + c] += dg;
                grads[dbeta_range.start + c] += db;
            }
        }
        let mut dx = dy.same_shape();
        let n = per_group as f64;
        for g in 0..self.groups {
            let span = g * per_group..(g + 1) * per_group;
            let sum_d: f64 = dnorm[span.clone()].iter().sum();
            let sum_dn: f64 = dnorm[span.clone()]
                .iter()
                .zip(&cache.normalized[span.clone()])
                .map(|(d, x)| d * x)
                .sum();
            let istd = cache.inv_std[g];
            for i in span {
                dx.data[i] = istd / n * (n * dnorm[i] - sum_d - cache.normalized[i] * sum_dn);
            }
        }
        dx
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` where the activation output was clamped.
pub fn relu_backward_inplace(out: &FeatureMap, dy: &mut FeatureMap) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// conv → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

pub struct BlockCache {
    conv: ConvCache,
    norm: NormCache,
    out: FeatureMap,
}

impl ConvBlock {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(layout, &format!("{name}.conv"), in_channels, out_channels, 3, stride),
            norm: GroupNorm::new(layout, &format!("{name}.norm"), out_channels, groups),
        }
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, BlockCache) {
        let (y, conv) = self.conv.forward(params, x);
        let (mut y, norm) = self.norm.forward(params, &y);
        relu_inplace(&mut y);
        let out = y.clone();
        (y, BlockCache { conv, norm, out })
    }

    pub fn backward(&self, params: &[f64], cache: &BlockCache, dy: &FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let mut d = dy.clone();
        relu_backward_inplace(&cache.out, &mut d);
        let d = self.norm.backward(params, &cache.norm, &d, grads);
        self.conv.backward(params, &cache.conv, &d, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut m = FeatureMap::zeros(c, h, w);
        for v in &mut m.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    fn naive_conv(conv: &Conv2d, params: &[f64], x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let w = conv.weight().get(params);
        let b = conv.bias().get(params);
        let k = conv.kernel;
        let mut y = FeatureMap::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    acc += w[((o * conv.in_channels + c) * k + ky) * k + kx]
                                        * x.at(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::new(&mut layout, "c", 3, 4, k, stride);
            let params: Vec<f64> = (0..layout.total).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = random_map(&mut rng, 3, 6, 6);
            let (y, _) = conv.forward(&params, &x);
            let want = naive_conv(&conv, &params, &x);
            assert_eq!((y.height, y.width), (want.height, want.width));
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite differences of a random linear functional of the block output.
    #[test]
    fn block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layout = ParamLayout::default();
        let block = ConvBlock::new(&mut layout, "b", 2, 4, 2, 2);
        let mut params: Vec<f64> = (0..layout.total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = random_map(&mut rng, 2, 6, 6);
        let (y, cache) = block.forward(&params, &x);
        let probe = random_map(&mut rng, y.channels, y.height, y.width);
        let objective = |p: &[f64], x: &FeatureMap| -> f64 {
            let (y, _) = block.forward(p, x);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; layout.total];
        let dx = block.backward(&params, &cache, &probe, &mut grads);
        let h = 1e-6;
        for i in (0..layout.total).step_by(7) {
            let orig = params[i];
            params[i] = orig + h;
            let up = objective(&params, &x);
            params[i] = orig - h;
            let down = objective(&params, &x);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        let mut xp = x.clone();
        for i in (0..x.data.len()).step_by(5) {
            let orig = xp.data[i];
            xp.data[i] = orig + h;
            let up = objective(&params, &xp);
            xp.data[i] = orig - h;
            let down = objective(&params, &xp);
            xp.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }
}
