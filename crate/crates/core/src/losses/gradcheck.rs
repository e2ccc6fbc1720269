use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub samples: usize,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
    /// Fourth-order five-point stencil instead of the two-point one; allows
    /// a larger step, which cuts round-off on losses of large magnitude.
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 64,
            floor: 1e-6,
            seed: 0,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_block: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Named contiguous blocks of the input vector, used for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Blocks(pub Vec<(String, usize)>);

impl Blocks {
    pub fn single(name: &str, len: usize) -> Self {
        Blocks(vec![(name.to_string(), len)])
    }

    pub fn push(&mut self, name: impl Into<String>, len: usize) {
        self.0.push((name.into(), len));
    }

    fn name_of(&self, i: usize) -> String {
        let mut start = 0;
        for (name, len) in &self.0 {
            if i < start + len {
                return format!("{name}[{}]", i - start);
            }
            start += len;
        }
        format!("x[{i}]")
    }
}

/// Central differences against the analytic gradient on a random subsample
/// of coordinates. `f` returns the loss and its full gradient.
pub fn grad_check<F>(f: F, x: &[f64], blocks: &Blocks, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(x);
    if !value.is_finite() {
        return Err(Error::NonFinite(blocks.name_of(0)));
    }
    if analytic.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = sample(&mut rng, x.len(), cfg.samples.min(x.len())).into_vec();
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_block: String::new(),
        checked: picks.len(),
    };
    for i in picks {
        let orig = probe[i];
        let mut eval = |offset: f64| {
            probe[i] = orig + offset;
            let (v, _) = f(&probe);
            probe[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(blocks.name_of(i)))
            }
        };
        let h = cfg.step;
        let numeric = if cfg.five_point {
            (eval(-2.0 * h)? - 8.0 * eval(-h)? + 8.0 * eval(h)? - eval(2.0 * h)?) / (12.0 * h)
        } else {
            (eval(h)? - eval(-h)?) / (2.0 * h)
        };
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if rel > report.max_rel_error || report.worst_block.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_index = i;
            report.worst_block = blocks.name_of(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_passes() {
        let f = |x: &[f64]| (x.iter().map(|v| v * v * v).sum(), x.iter().map(|v| 3.0 * v * v).collect());
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let r = grad_check(f, &x, &Blocks::single("x", 10), &GradCheckConfig::default()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |x: &[f64]| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 3.0 * v).collect());
        let r = grad_check(f, &[1.0, 2.0], &Blocks::single("x", 2), &GradCheckConfig::default()).unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn five_point_stencil_is_exact_on_quartics() {
        let f = |x: &[f64]| (x[0].powi(4), vec![4.0 * x[0].powi(3)]);
        let cfg = GradCheckConfig {
            step: 0.1,
            five_point: true,
            ..Default::default()
        };
        let r = grad_check(f, &[1.3], &Blocks::single("x", 1), &cfg).unwrap();
        assert!(r.passes(1e-12), "{r:?}");
    }

    #[test]
    fn non_finite_names_the_block() {
        let f = |x: &[f64]| (if x[3] > 1.0 { f64::NAN } else { 0.0 }, vec![0.0; x.len()]);
        let mut blocks = Blocks::single("a", 2);
        blocks.push("theta", 2);
        let err = grad_check(f, &[0.0, 0.0, 0.0, 1.0], &blocks, &GradCheckConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite loss at parameter theta[1]");
    }
}
