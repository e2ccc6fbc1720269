//! Dynamic mask head: three 1×1 convolutions whose weights are a
//! per-instance parameter vector emitted by the controller head.

use crate::{Error, Result};

use super::layers::FeatureMap;

/// Packing of a dynamic filter: `[w1 (mid×in), b1, w2 (mid×mid), b2, w3 (mid), b3]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DynamicFilterLayout {
    pub in_channels: usize,
    pub mid_channels: usize,
}

impl DynamicFilterLayout {
    pub fn new(mask_channels: usize, mid_channels: usize) -> Self {
        Self {
            in_channels: mask_channels + 2,
            mid_channels,
        }
    }

    pub fn num_params(&self) -> usize {
        let (i, m) = (self.in_channels, self.mid_channels);
        (i * m + m) + (m * m + m) + (m + 1)
    }

    fn offsets(&self) -> [usize; 6] {
        let (i, m) = (self.in_channels, self.mid_channels);
        let w1 = 0;
        let b1 = w1 + m * i;
        let w2 = b1 + m;
        let b2 = w2 + m * m;
        let w3 = b2 + m;
        let b3 = w3 + m;
        [w1, b1, w2, b2, w3, b3]
    }

    /// Flat index of the output-layer bias.
    pub fn last_bias(&self) -> usize {
        self.offsets()[5]
    }
}

/// `(C_mask + 2) × n` input of the mask head: mask features stacked on the
/// relative coordinates of one instance location.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFeature {
    pub f_mask: FeatureMap,
    pub rel_coords: FeatureMap,
    pub combined: FeatureMap,
}

impl MaskFeature {
    pub fn new(f_mask: &FeatureMap, location: (f64, f64), stride: usize) -> Self {
        let rel = rel_coords(location, (f_mask.height, f_mask.width), stride);
        let combined = concat_channels(f_mask, &rel);
        Self {
            f_mask: f_mask.clone(),
            rel_coords: rel,
            combined,
        }
    }
}

/// Offsets from `location` (image pixels) to every grid point of an
/// `h×w` grid with the given stride, normalized by `8 · stride`.
/// Grid point `(gy, gx)` sits at image position `(gx·s + s/2, gy·s + s/2)`.
pub fn rel_coords(location: (f64, f64), grid: (usize, usize), stride: usize) -> FeatureMap {
    let (h, w) = grid;
    let s = stride as f64;
    let norm = 8.0 * s;
    let mut out = FeatureMap::zeros(2, h, w);
    let plane = h * w;
    for gy in 0..h {
        for gx in 0..w {
            let px = gx as f64 * s + s / 2.0;
            let py = gy as f64 * s + s / 2.0;
            out.data[gy * w + gx] = (px - location.0) / norm;
            out.data[plane + gy * w + gx] = (py - location.1) / norm;
        }
    }
    out
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn check(layout: &DynamicFilterLayout, combined: &FeatureMap, theta: &[f64]) -> Result<()> {
    if theta.len() != layout.num_params() {
        return Err(Error::ShapeMismatch(format!(
            "dynamic filter has {} params, expected {}",
            theta.len(),
            layout.num_params()
        )));
    }
    if combined.channels != layout.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "mask head input has {} channels, expected {}",
            combined.channels, layout.in_channels
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn run(layout: &DynamicFilterLayout, combined: &FeatureMap, theta: &[f64]) -> Activations {
    let (cin, m) = (layout.in_channels, layout.mid_channels);
    let n = combined.plane();
    let [w1, b1, w2, b2, w3, b3] = layout.offsets();
    let mut h1 = vec![0.0; m * n];
    for o in 0..m {
        let row = &mut h1[o * n..(o + 1) * n];
        row.fill(theta[b1 + o]);
        for c in 0..cin {
            let wt = theta[w1 + o * cin + c];
            if wt != 0.0 {
                for (r, x) in row.iter_mut().zip(&combined.data[c * n..(c + 1) * n]) {
                    *r += wt * x;
                }
            }
        }
        for r in row.iter_mut() {
            *r = r.max(0.0);
        }
    }
    let mut h2 = vec![0.0; m * n];
    for o in 0..m {
        let row = &mut h2[o * n..(o + 1) * n];
        row.fill(theta[b2 + o]);
        for c in 0..m {
            let wt = theta[w2 + o * m + c];
            if wt != 0.0 {
                for (r, x) in row.iter_mut().zip(&h1[c * n..(c + 1) * n]) {
                    *r += wt * x;
                }
            }
        }
        for r in row.iter_mut() {
            *r = r.max(0.0);
        }
    }
    let mut out = vec![theta[b3]; n];
    for c in 0..m {
        let wt = theta[w3 + c];
        for (r, x) in out.iter_mut().zip(&h2[c * n..(c + 1) * n]) {
            *r += wt * x;
        }
    }
    for r in &mut out {
        *r = sigmoid(*r);
    }
    Activations { h1, h2, out }
}

/// Per-pixel mask probabilities for one instance, row-major over the grid.
pub fn mask_head(layout: &DynamicFilterLayout, combined: &FeatureMap, theta: &[f64]) -> Result<Vec<f64>> {
    check(layout, combined, theta)?;
    Ok(run(layout, combined, theta).out)
}

/// Gradients of a scalar loss with respect to `theta` and `combined`
/// given `d_mask = ∂L/∂mask`.
pub fn mask_head_backward(
    layout: &DynamicFilterLayout,
    combined: &FeatureMap,
    theta: &[f64],
    d_mask: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check(layout, combined, theta)?;
    let (cin, m) = (layout.in_channels, layout.mid_channels);
    let n = combined.plane();
    let [w1, b1, w2, b2, w3, b3] = layout.offsets();
    let act = run(layout, combined, theta);
    let mut d_theta = vec![0.0; theta.len()];
    let mut d_combined = vec![0.0; combined.data.len()];

    let d_logit: Vec<f64> = d_mask.iter().zip(&act.out).map(|(d, p)| d * p * (1.0 - p)).collect();
    d_theta[b3] = d_logit.iter().sum();
    let mut d_h2 = vec![0.0; m * n];
    for c in 0..m {
        let h2 = &act.h2[c * n..(c + 1) * n];
        d_theta[w3 + c] = d_logit.iter().zip(h2).map(|(d, h)| d * h).sum();
        let wt = theta[w3 + c];
        for ((dh, dl), h) in d_h2[c * n..(c + 1) * n].iter_mut().zip(&d_logit).zip(h2) {
            *dh = if *h > 0.0 { wt * dl } else { 0.0 };
        }
    }
    let mut d_h1 = vec![0.0; m * n];
    for o in 0..m {
        let dh2 = &d_h2[o * n..(o + 1) * n];
        d_theta[b2 + o] = dh2.iter().sum();
        for c in 0..m {
            let h1 = &act.h1[c * n..(c + 1) * n];
            d_theta[w2 + o * m + c] = dh2.iter().zip(h1).map(|(d, h)| d * h).sum();
            let wt = theta[w2 + o * m + c];
            for (dh1, d) in d_h1[c * n..(c + 1) * n].iter_mut().zip(dh2) {
                *dh1 += wt * d;
            }
        }
    }
    for (d, h) in d_h1.iter_mut().zip(&act.h1) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    for o in 0..m {
        let dh1 = &d_h1[o * n..(o + 1) * n];
        d_theta[b1 + o] = dh1.iter().sum();
        for c in 0..cin {
            let x = &combined.data[c * n..(c + 1) * n];
            d_theta[w1 + o * cin + c] = dh1.iter().zip(x).map(|(d, v)| d * v).sum();
            let wt = theta[w1 + o * cin + c];
            for (dx, d) in d_combined[c * n..(c + 1) * n].iter_mut().zip(dh1) {
                *dx += wt * d;
            }
        }
    }
    Ok((d_theta, d_combined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> DynamicFilterLayout {
        DynamicFilterLayout::new(8, 8)
    }

    fn random_combined(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut m = FeatureMap::zeros(c, h, w);
        for v in &mut m.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    /// Independent per-pixel MLP written directly from the packing order.
    fn pixel_oracle(theta: &[f64], x: &[f64], cin: usize, m: usize) -> f64 {
        let mut idx = 0;
        let mut take = |k: usize| {
            let s = &theta[idx..idx + k];
            idx += k;
            s.to_vec()
        };
        let (w1, b1, w2, b2, w3, b3) = (take(m * cin), take(m), take(m * m), take(m), take(m), take(1));
        let h1: Vec<f64> = (0..m)
            .map(|o| (b1[o] + (0..cin).map(|c| w1[o * cin + c] * x[c]).sum::<f64>()).max(0.0))
            .collect();
        let h2: Vec<f64> = (0..m)
            .map(|o| (b2[o] + (0..m).map(|c| w2[o * m + c] * h1[c]).sum::<f64>()).max(0.0))
            .collect();
        let z = b3[0] + (0..m).map(|c| w3[c] * h2[c]).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn parameter_count() {
        // (10·8 + 8) + (8·8 + 8) + (8 + 1)
        assert_eq!(layout().num_params(), 169);
    }

    #[test]
    fn zero_theta_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = layout();
        let x = random_combined(&mut rng, 10, 5, 7);
        let mask = mask_head(&l, &x, &vec![0.0; l.num_params()]).unwrap();
        assert!(mask.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_last_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = layout();
        let x = random_combined(&mut rng, 10, 4, 4);
        let mut theta = vec![0.0; l.num_params()];
        theta[l.last_bias()] = 10.0;
        let mask = mask_head(&l, &x, &theta).unwrap();
        assert!(mask.iter().all(|&v| v > 0.9999));
    }

    #[test]
    fn matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layout();
        for _ in 0..5 {
            let x = random_combined(&mut rng, 10, 6, 5);
            let theta: Vec<f64> = (0..l.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mask = mask_head(&l, &x, &theta).unwrap();
            for (p, got) in mask.iter().enumerate() {
                let col: Vec<f64> = (0..10).map(|c| x.data[c * 30 + p]).collect();
                assert!((got - pixel_oracle(&theta, &col, 10, 8)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let l = layout();
        let x = FeatureMap::zeros(10, 2, 2);
        assert!(mask_head(&l, &x, &[0.0; 10]).is_err());
        let x = FeatureMap::zeros(9, 2, 2);
        assert!(mask_head(&l, &x, &vec![0.0; 169]).is_err());
    }

    #[test]
    fn pixelwise_under_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = layout();
        let x = random_combined(&mut rng, 10, 1, 12);
        let theta: Vec<f64> = (0..l.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm: Vec<usize> = (0..12).rev().collect();
        let mut xp = x.clone();
        for c in 0..10 {
            for (i, &p) in perm.iter().enumerate() {
                xp.data[c * 12 + i] = x.data[c * 12 + p];
            }
        }
        let a = mask_head(&l, &x, &theta).unwrap();
        let b = mask_head(&l, &xp, &theta).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b[i], a[p]);
        }
    }

    #[test]
    fn rel_coords_properties() {
        // grid 8×8, stride 4 -> points at 2, 6, ..., 30; location at a grid point
        let r = rel_coords((14.0, 18.0), (8, 8), 4);
        let own = 4 * 8 + 3;
        assert_eq!((r.data[own], r.data[64 + own]), (0.0, 0.0));
        // grid center (16, 16) sits between points: antisymmetric
        let c = rel_coords((16.0, 16.0), (8, 8), 4);
        for y in 0..8 {
            for x in 0..8 {
                let mirror = (7 - y) * 8 + (7 - x);
                assert!((c.data[y * 8 + x] + c.data[mirror]).abs() < 1e-12);
                assert!((c.data[64 + y * 8 + x] + c.data[64 + mirror]).abs() < 1e-12);
            }
        }
        let shifted = rel_coords((18.0, 18.0), (8, 8), 4);
        for i in 0..64 {
            assert!((r.data[i] - shifted.data[i] - 1.0 / 8.0).abs() < 1e-12);
            assert_eq!(r.data[64 + i], shifted.data[64 + i]);
        }
    }

    /// A filter reading only the coordinate channels sees the location.
    #[test]
    fn output_depends_on_relative_coordinates() {
        let l = layout();
        let f = FeatureMap::zeros(8, 8, 8);
        let mut theta = vec![0.0; l.num_params()];
        // h1[0] = relu(x_rel), out = sigmoid(4·h1 passed through h2[0])
        theta[8] = 1.0;
        let [_, _, w2, _, w3, _] = l.offsets();
        theta[w2] = 1.0;
        theta[w3] = 4.0;
        let a = mask_head(&l, &MaskFeature::new(&f, (6.0, 6.0), 4).combined, &theta).unwrap();
        let b = mask_head(&l, &MaskFeature::new(&f, (26.0, 26.0), 4).combined, &theta).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = layout();
        let x = random_combined(&mut rng, 10, 4, 5);
        let mut theta: Vec<f64> = (0..l.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |theta: &[f64], x: &FeatureMap| -> f64 {
            mask_head(&l, x, theta).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (dt, dx) = mask_head_backward(&l, &x, &theta, &probe).unwrap();
        let h = 1e-6;
        for i in 0..theta.len() {
            let o = theta[i];
            theta[i] = o + h;
            let up = f(&theta, &x);
            theta[i] = o - h;
            let down = f(&theta, &x);
            theta[i] = o;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dt[i]).abs() < 1e-7 * (1.0 + fd.abs()), "theta {i}: {fd} vs {}", dt[i]);
        }
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            let o = xp.data[i];
            xp.data[i] = o + h;
            let up = f(&theta, &xp);
            xp.data[i] = o - h;
            let down = f(&theta, &xp);
            xp.data[i] = o;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7 * (1.0 + fd.abs()), "combined {i}");
        }
    }
}
