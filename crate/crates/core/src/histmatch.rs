//! Histogram matching loss over network outputs, and MMD / CORAL
//! discrepancy readouts.

use crate::error::{Error, Result};
use crate::numerics::{sign, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangePolicy {
    Fixed { lo: f64, hi: f64 },
    /// Min/max over the union of the inputs, treated as a constant by the
    /// gradient.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinKernel {
    /// Linear interpolation between the two nearest bin centers.
    #[default]
    Triangular,
    /// Plain counting; zero gradient.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramConfig {
    pub bins: usize,
    pub range: RangePolicy,
    pub kernel: BinKernel,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            range: RangePolicy::PerBatch,
            kernel: BinKernel::Triangular,
        }
    }
}

impl HistogramConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if let RangePolicy::Fixed { lo, hi } = self.range {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("invalid histogram range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Resolves the range for a set of value slices.
    pub fn resolve_range(&self, inputs: &[&[f64]]) -> (f64, f64) {
        match self.range {
            RangePolicy::Fixed { lo, hi } => (lo, hi),
            RangePolicy::PerBatch => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for v in inputs.iter().flat_map(|s| s.iter()) {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                if hi - lo < 1e-12 {
                    // degenerate batch: centre a unit-width range on the value
                    (lo - 0.5, hi + 0.5)
                } else {
                    (lo, hi)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub masses: Vec<f64>,
    pub bin_edges: Vec<f64>,
}

impl Histogram {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Where each value landed: lower bin index and the share sent to the next
/// bin. `interior` is false for values clamped to a boundary bin or counted
/// by the hard kernel; those carry no gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Assignment {
    bin: usize,
    upper_share: f64,
    interior: bool,
}

/// A histogram together with what is needed to push gradients from bin
/// masses back to the input values.
#[derive(Debug, Clone)]
pub struct SoftHistogram {
    pub histogram: Histogram,
    width: f64,
    assignments: Vec<Assignment>,
}

impl SoftHistogram {
    /// Gradient w.r.t. each input value given the gradient w.r.t. each bin
    /// mass.
    pub fn backprop(&self, dmass: &[f64]) -> Vec<f64> {
        assert_eq!(dmass.len(), self.histogram.masses.len());
        self.assignments
            .iter()
            .map(|a| {
                if a.interior {
                    (dmass[a.bin + 1] - dmass[a.bin]) / self.width
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Bin placement of every value; constant between kinks. Used by the
    /// gradient checks to stay away from non-smooth points.
    pub fn placement_pattern(&self) -> Vec<(usize, bool)> {
        self.assignments.iter().map(|a| (a.bin, a.interior)).collect()
    }
}

/// Builds a histogram of `values` with the configured kernel and range.
pub fn soft_histogram(values: &[f64], cfg: &HistogramConfig) -> Result<SoftHistogram> {
    cfg.validate()?;
    let range = cfg.resolve_range(&[values]);
    histogram_in_range(values, cfg, range)
}

/// Histogram over an explicit `[lo, hi]`, regardless of the range policy.
pub fn histogram_in_range(values: &[f64], cfg: &HistogramConfig, (lo, hi): (f64, f64)) -> Result<SoftHistogram> {
    if values.is_empty() {
        return Err(Error::data("histogram of an empty value set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("histogram input contains non-finite values"));
    }
    let bins = cfg.bins;
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut masses = vec![0.0; bins];
    let mut assignments = Vec::with_capacity(values.len());

    for &v in values {
        let a = match cfg.kernel {
            BinKernel::Hard => {
                let k = ((v - lo) / width).floor();
                let bin = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
                masses[bin] += 1.0;
                Assignment {
                    bin,
                    upper_share: 0.0,
                    interior: false,
                }
            }
            BinKernel::Triangular => {
                // position in units of bins, measured from the first centre
                let u = (v - lo) / width - 0.5;
                if u <= 0.0 {
                    masses[0] += 1.0;
                    Assignment {
                        bin: 0,
                        upper_share: 0.0,
                        interior: false,
                    }
                } else if u >= (bins - 1) as f64 {
                    masses[bins - 1] += 1.0;
                    Assignment {
                        bin: bins - 1,
                        upper_share: 0.0,
                        interior: false,
                    }
                } else {
                    let bin = (u.floor() as usize).min(bins - 2);
                    let upper = u - bin as f64;
                    masses[bin] += 1.0 - upper;
                    masses[bin + 1] += upper;
                    Assignment {
                        bin,
                        upper_share: upper,
                        interior: true,
                    }
                }
            }
        };
        assignments.push(a);
    }

    Ok(SoftHistogram {
        histogram: Histogram { masses, bin_edges },
        width,
        assignments,
    })
}

/// Histogram matching loss and its gradients.
#[derive(Debug, Clone)]
pub struct HistogramLoss {
    pub loss: f64,
    pub grad_registered: Matrix,
    pub grad_target: Matrix,
    pub registered: Histogram,
    pub target: Histogram,
}

/// `sum_h |p_h - q_h|` between the unit-mass histograms of all entries of
/// `registered` and of `target`, sharing one range.
pub fn histogram_loss(registered: &Matrix, target: &Matrix, cfg: &HistogramConfig) -> Result<HistogramLoss> {
    cfg.validate()?;
    if registered.is_empty() || target.is_empty() {
        return Err(Error::data("histogram loss of an empty matrix"));
    }
    let range = cfg.resolve_range(&[registered.as_slice(), target.as_slice()]);
    let hr = histogram_in_range(registered.as_slice(), cfg, range)?;
    let ht = histogram_in_range(target.as_slice(), cfg, range)?;
    let nr = registered.len() as f64;
    let nt = target.len() as f64;

    let mut loss = 0.0;
    let mut dr = Vec::with_capacity(cfg.bins);
    let mut dt = Vec::with_capacity(cfg.bins);
    for (&mr, &mt) in hr.histogram.masses.iter().zip(&ht.histogram.masses) {
        let diff = mr / nr - mt / nt;
        loss += diff.abs();
        let s = sign(diff);
        dr.push(s / nr);
        dt.push(-s / nt);
    }
    let grad_registered = Matrix::from_raw(registered.rows(), registered.cols(), hr.backprop(&dr));
    let grad_target = Matrix::from_raw(target.rows(), target.cols(), ht.backprop(&dt));
    Ok(HistogramLoss {
        loss,
        grad_registered,
        grad_target,
        registered: hr.histogram,
        target: ht.histogram,
    })
}

/// Squared maximum mean discrepancy (biased estimate) with the kernel
/// `exp(-|x - y|^2 / (2 bandwidth^2))`.
pub fn mmd_value(a: &Matrix, b: &Matrix, bandwidth: f64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::config(format!(
            "MMD inputs have widths {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::data("MMD of an empty sample"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::config(format!("MMD bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let mean_kernel = |x: &Matrix, y: &Matrix| {
        let mut total = 0.0;
        for xr in x.iter_rows() {
            for yr in y.iter_rows() {
                let d2: f64 = xr.iter().zip(yr).map(|(p, q)| (p - q) * (p - q)).sum();
                total += (-gamma * d2).exp();
            }
        }
        total / (x.rows() * y.rows()) as f64
    };
    Ok(mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b))
}

/// Median pairwise Euclidean distance over the union of both samples, a
/// common bandwidth choice for [`mmd_value`].
pub fn median_bandwidth(a: &Matrix, b: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i].iter().zip(rows[j]).map(|(p, q)| (p - q) * (p - q)).sum();
            d.push(d2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased sample covariance (`n - 1` denominator), `d x d`.
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let mean = x.column_means();
    let centered = Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) - mean.get(0, c));
    centered.t_matmul(&centered).scale(1.0 / (x.rows() as f64 - 1.0))
}

/// CORAL distance `|cov(A) - cov(B)|_F^2 / (4 d^2)`.
pub fn coral_value(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::data("CORAL needs at least 2 rows per sample"));
    }
    if a.cols() != b.cols() {
        return Err(Error::config(format!(
            "CORAL inputs have widths {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let d = a.cols() as f64;
    let diff = sample_covariance(a).sub(&sample_covariance(b));
    let frob: f64 = diff.as_slice().iter().map(|v| v * v).sum();
    Ok(frob / (4.0 * d * d))
}
