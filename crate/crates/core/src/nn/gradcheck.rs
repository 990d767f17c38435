//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::Result;

/// A scalar function of a flat coordinate vector (parameters and inputs)
/// together with its claimed analytic gradient.
pub trait GradCheckable {
    fn num_coords(&self) -> usize;
    fn coord(&self, i: usize) -> f64;
    fn set_coord(&mut self, i: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    fn gradient(&self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Above this many coordinates a random subsample of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
            max_coords: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn grad_check(module: &mut dyn GradCheckable, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let total = module.num_coords();
    let analytic = module.gradient()?;
    let coords: Vec<usize> = if total > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, total, cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..total).collect()
    };
    let mut max_rel = 0.0f64;
    let mut worst = 0;
    for &i in &coords {
        let x0 = module.coord(i);
        module.set_coord(i, x0 + cfg.step);
        let lp = module.loss()?;
        module.set_coord(i, x0 - cfg.step);
        let lm = module.loss()?;
        module.set_coord(i, x0);
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if rel > max_rel || !rel.is_finite() {
            max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            worst = i;
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        total,
        max_rel_error: max_rel,
        worst_coord: worst,
        tolerance: cfg.tolerance,
        passed: max_rel < cfg.tolerance,
    })
}

/// Adapts a closure over a list of leaf tensors. The closure returns the
/// loss and one gradient tensor per leaf.
pub struct FnModule<F> {
    pub leaves: Vec<Tensor>,
    offsets: Vec<usize>,
    f: F,
}

impl<F> FnModule<F>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    pub fn new(leaves: Vec<Tensor>, f: F) -> Self {
        let mut offsets = Vec::with_capacity(leaves.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &leaves {
            acc += l.len();
            offsets.push(acc);
        }
        Self { leaves, offsets, f }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let leaf = self.offsets.partition_point(|&o| o <= i) - 1;
        (leaf, i - self.offsets[leaf])
    }
}

impl<F> GradCheckable for FnModule<F>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    fn num_coords(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    fn coord(&self, i: usize) -> f64 {
        let (l, j) = self.locate(i);
        self.leaves[l].data()[j]
    }

    fn set_coord(&mut self, i: usize, value: f64) {
        let (l, j) = self.locate(i);
        self.leaves[l].data_mut()[j] = value;
    }

    fn loss(&self) -> Result<f64> {
        Ok((self.f)(&self.leaves)?.0)
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let (_, grads) = (self.f)(&self.leaves)?;
        Ok(grads.into_iter().flat_map(Tensor::into_data).collect())
    }
}

/// Wraps a module and scales its analytic gradient, for testing the harness.
pub struct Corrupted<M> {
    pub inner: M,
    pub factor: f64,
}

impl<M: GradCheckable> GradCheckable for Corrupted<M> {
    fn num_coords(&self) -> usize {
        self.inner.num_coords()
    }
    fn coord(&self, i: usize) -> f64 {
        self.inner.coord(i)
    }
    fn set_coord(&mut self, i: usize, value: f64) {
        self.inner.set_coord(i, value)
    }
    fn loss(&self) -> Result<f64> {
        self.inner.loss()
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        Ok(self.inner.gradient()?.into_iter().map(|g| g * self.factor).collect())
    }
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..=scale)).collect()).expect("sized above")
}

/// `sum(r ⊙ y)`; its gradient with respect to `y` is `r`.
pub fn projection_loss(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::super::ops::{linear_backward, linear_forward, softmax_rows, softmax_rows_backward};
    use super::*;

    fn linear_module(seed: u64) -> FnModule<impl Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[4, 5], 1.0, &mut rng);
        let w = random_tensor(&[5, 3], 1.0, &mut rng);
        let b = random_tensor(&[1, 3], 1.0, &mut rng);
        let r = random_tensor(&[4, 3], 1.0, &mut rng);
        FnModule::new(vec![x, w, b], move |l: &[Tensor]| {
            let y = linear_forward(&l[0], &l[1], &l[2])?;
            let g = linear_backward(&l[0], &l[1], &r)?;
            Ok((projection_loss(&y, &r), vec![g.dx, g.dw, g.db]))
        })
    }

    #[test]
    fn linear_layer_passes_tight() {
        let mut m = linear_module(1);
        let rep = grad_check(&mut m, &GradCheckConfig { tolerance: 1e-6, ..Default::default() }).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checked, 4 * 5 + 5 * 3 + 3);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut m = Corrupted { inner: linear_module(2), factor: 1.01 };
        let rep = grad_check(&mut m, &GradCheckConfig::default()).unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 5e-3);
    }

    #[test]
    fn softmax_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[3, 6], 2.0, &mut rng);
        let r = random_tensor(&[3, 6], 1.0, &mut rng);
        let mut m = FnModule::new(vec![x], move |l: &[Tensor]| {
            let y = softmax_rows(&l[0]);
            let dx = softmax_rows_backward(&y, &r);
            Ok((projection_loss(&y, &r), vec![dx]))
        });
        let rep = grad_check(&mut m, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn subsamples_large_modules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[1, 12_000], 1.0, &mut rng);
        let mut m = FnModule::new(vec![x], |l: &[Tensor]| {
            let n = l[0].len() as f64;
            let g = l[0].data().iter().map(|v| 2.0 * v / n).collect();
            Ok((l[0].sum_squares() / n, vec![Tensor::from_vec(&[1, 12_000], g)?]))
        });
        let rep = grad_check(&mut m, &GradCheckConfig::default()).unwrap();
        assert_eq!(rep.checked, 10_000);
        assert_eq!(rep.total, 12_000);
        assert!(rep.passed);
    }
}
