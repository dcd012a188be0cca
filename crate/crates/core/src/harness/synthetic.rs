use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::DomainDataset;
use crate::numerics::Matrix;

/// Parameters of the shifted Gaussian-mixture benchmark.
///
/// Source samples of class `c` are `mean_c + covariance_scale * N(0, I)`.
/// Target samples are drawn the same way and then pushed through an affine
/// shift: a rotation by `shift_rotation` radians inside a random 2-plane,
/// a uniform scaling by `shift_scale`, and a translation of length
/// `shift_translation` along a random direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Pairwise distance between class means (exact when `classes <= dim`).
    pub separation: f64,
    pub covariance_scale: f64,
    pub shift_translation: f64,
    pub shift_rotation: f64,
    pub shift_scale: f64,
    /// Probability of flipping a source label to another class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 16,
            samples_per_class: 500,
            separation: 6.0,
            covariance_scale: 1.0,
            shift_translation: 6.0,
            shift_rotation: 1.0,
            shift_scale: 1.2,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic benchmark needs at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::config("synthetic benchmark needs at least 2 dimensions"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be positive"));
        }
        let magnitudes = [
            self.separation,
            self.covariance_scale,
            self.shift_translation,
            self.shift_rotation,
            self.shift_scale,
        ];
        if magnitudes.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("synthetic magnitudes must be finite"));
        }
        if self.covariance_scale < 0.0 || self.separation < 0.0 {
            return Err(Error::config("separation and covariance scale must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config(format!(
                "label noise must lie in [0, 1), got {}",
                self.label_noise
            )));
        }
        Ok(())
    }

    /// Class means used by [`generate_synthetic`], one row per class.
    pub fn class_means(&self) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        class_means(self, &mut rng)
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Orthonormalizes `v` against `basis` (Gram-Schmidt).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
    normalize(v);
}

fn class_means(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut v = gaussian_vector(rng, spec.dim);
        if directions.len() < spec.dim {
            orthogonalize(&mut v, &directions);
        } else {
            normalize(&mut v);
        }
        directions.push(v);
    }
    // orthonormal directions scaled by sep/sqrt(2) are `sep` apart
    let radius = spec.separation / std::f64::consts::SQRT_2;
    Matrix::from_fn(spec.classes, spec.dim, |c, j| radius * directions[c][j])
}

fn sample_domain(spec: &SyntheticSpec, means: &Matrix, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            for j in 0..spec.dim {
                let z: f64 = StandardNormal.sample(rng);
                data.push(means.get(c, j) + spec.covariance_scale * z);
            }
            labels.push(c);
        }
    }
    (Matrix::from_raw(n, spec.dim, data), labels)
}

/// Generates a labeled source domain and a shifted, labeled target domain.
/// Target labels are meant for evaluation only.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);

    // shift geometry
    let mut plane_a = gaussian_vector(&mut rng, spec.dim);
    normalize(&mut plane_a);
    let mut plane_b = gaussian_vector(&mut rng, spec.dim);
    orthogonalize(&mut plane_b, std::slice::from_ref(&plane_a));
    let mut direction = gaussian_vector(&mut rng, spec.dim);
    normalize(&mut direction);

    let (source_x, mut source_y) = sample_domain(spec, &means, &mut rng);
    let (target_raw, target_y) = sample_domain(spec, &means, &mut rng);

    let (sin, cos) = spec.shift_rotation.sin_cos();
    let mut target_x = target_raw;
    for r in 0..target_x.rows() {
        let row = target_x.row_mut(r);
        let pa: f64 = row.iter().zip(&plane_a).map(|(x, a)| x * a).sum();
        let pb: f64 = row.iter().zip(&plane_b).map(|(x, b)| x * b).sum();
        // replace the in-plane component with its rotation
        let ra = cos * pa - sin * pb;
        let rb = sin * pa + cos * pb;
        for j in 0..spec.dim {
            let rotated = row[j] + (ra - pa) * plane_a[j] + (rb - pb) * plane_b[j];
            row[j] = spec.shift_scale * rotated + spec.shift_translation * direction[j];
        }
    }

    if spec.label_noise > 0.0 {
        for y in source_y.iter_mut() {
            if rng.gen::<f64>() < spec.label_noise {
                let other = rng.gen_range(0..spec.classes - 1);
                *y = if other >= *y { other + 1 } else { other };
            }
        }
    }

    let source = DomainDataset::new(source_x, Some(source_y), "synthetic-source")?;
    let target = DomainDataset::new(target_x, Some(target_y), "synthetic-target")?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            dim: 5,
            samples_per_class: 30,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 12, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn per_class_counts_are_exact() {
        let (s, t) = generate_synthetic(&small()).unwrap();
        for ds in [&s, &t] {
            let labels = ds.labels.as_ref().unwrap();
            for c in 0..3 {
                assert_eq!(labels.iter().filter(|&&y| y == c).count(), 30);
            }
        }
    }

    #[test]
    fn means_are_separated() {
        let spec = small();
        let m = spec.class_means();
        for a in 0..3 {
            for b in a + 1..3 {
                let d: f64 = m.row(a).iter().zip(m.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                assert!((d.sqrt() - spec.separation).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_shift_keeps_target_distribution() {
        let spec = SyntheticSpec {
            shift_translation: 0.0,
            shift_rotation: 0.0,
            shift_scale: 1.0,
            samples_per_class: 4000,
            ..small()
        };
        let (_, t) = generate_synthetic(&spec).unwrap();
        let means = spec.class_means();
        let labels = t.labels.as_ref().unwrap();
        for c in 0..3 {
            let rows: Vec<usize> = (0..t.len()).filter(|&i| labels[i] == c).collect();
            let emp = t.features.select_rows(&rows).column_means();
            for j in 0..spec.dim {
                assert!((emp.get(0, j) - means.get(c, j)).abs() < 0.06);
            }
        }
    }

    #[test]
    fn label_noise_flips_some_source_labels() {
        let spec = SyntheticSpec { label_noise: 0.2, ..small() };
        let (s, _) = generate_synthetic(&spec).unwrap();
        let clean = generate_synthetic(&small()).unwrap().0;
        let flipped = s
            .labels
            .unwrap()
            .iter()
            .zip(clean.labels.unwrap())
            .filter(|(a, b)| **a != *b)
            .count();
        assert!(flipped > 5 && flipped < 40, "{flipped}");
        assert!(generate_synthetic(&SyntheticSpec { label_noise: 1.0, ..small() }).is_err());
    }
}
