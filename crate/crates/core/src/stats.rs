//! One-dimensional Gaussians and two-component Gaussian mixtures.
//!
//! These are the runtime models everything else consumes: cluster runtime
//! distributions are mixtures with an `early` and a `late` component (plus
//! optional local-task components), and the scheduler works entirely in
//! terms of their quantiles and sums.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("probability must lie strictly between 0 and 1, got {0}")]
    ProbabilityOutOfRange(f64),
    #[error("invalid gaussian: mean {mean}, variance {variance}")]
    InvalidGaussian { mean: f64, variance: f64 },
    #[error("mixture has no {0:?} component")]
    MissingComponent(Component),
    #[error("mixture weight must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("need at least {min} samples, got {got}")]
    NotEnoughSamples { min: usize, got: usize },
    #[error("samples must be finite")]
    NonFiniteSample,
    #[error("late component must dominate early in mean and variance: early ({0:?}) vs late ({1:?})")]
    ComponentOrder(Gaussian, Gaussian),
}

/// A Gaussian parameterized by mean and **variance** (not standard
/// deviation). Zero variance is allowed and treated as a point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    mean: f64,
    variance: f64,
}

impl Gaussian {
    pub fn new(mean: f64, variance: f64) -> Result<Self, StatsError> {
        if !mean.is_finite() || !variance.is_finite() || variance < 0.0 {
            return Err(StatsError::InvalidGaussian { mean, variance });
        }
        Ok(Gaussian { mean, variance })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    /// P(X <= x). A point mass steps from 0 to 1 at the mean.
    pub fn cdf(&self, x: f64) -> f64 {
        if self.variance == 0.0 {
            return if x >= self.mean { 1.0 } else { 0.0 };
        }
        0.5 * erf::erfc((self.mean - x) / (2.0 * self.variance).sqrt())
    }

    fn pdf(&self, x: f64) -> f64 {
        if self.variance == 0.0 {
            return if x == self.mean { f64::INFINITY } else { 0.0 };
        }
        let z = x - self.mean;
        (-z * z / (2.0 * self.variance)).exp() / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }

    /// Inverse CDF for `p` strictly inside (0, 1), computed by inverting the
    /// error function and polishing with one Newton step so that
    /// `cdf(quantile(p))` round-trips well below 1e-9. A point mass returns
    /// its mean for every `p`.
    pub fn quantile(&self, p: f64) -> Result<f64, StatsError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(StatsError::ProbabilityOutOfRange(p));
        }
        if self.variance == 0.0 {
            return Ok(self.mean);
        }
        let mut t = self.mean + (2.0 * self.variance).sqrt() * erf::erf_inv(2.0 * p - 1.0);
        let d = self.pdf(t);
        if d > 0.0 && d.is_finite() {
            t -= (self.cdf(t) - p) / d;
        }
        Ok(t)
    }

    /// Draws one value, clamped at zero: these models describe durations
    /// and costs, so negative samples are floored.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = if self.variance == 0.0 {
            self.mean
        } else {
            // std_dev is finite and > 0 here, so the constructor cannot fail
            Normal::new(self.mean, self.std_dev()).unwrap().sample(rng)
        };
        v.max(0.0)
    }
}

/// Sum of two independent Gaussians: means add, variances add.
pub fn sum_gaussians(a: Gaussian, b: Gaussian) -> Gaussian {
    Gaussian {
        mean: a.mean + b.mean,
        variance: a.variance + b.variance,
    }
}

/// Selector for one component of a [`MixtureModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Early,
    Late,
    LocalEarly,
    LocalLate,
}

/// Two-component runtime model for a cluster: an `early` component for
/// iterations that finish on plan and a `late` one for straggling
/// iterations, with optional analogous components for local tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub early: Gaussian,
    pub late: Gaussian,
    /// Mixing weight of the early component, in [0, 1].
    pub weight_early: f64,
    pub local_early: Option<Gaussian>,
    pub local_late: Option<Gaussian>,
    pub local_weight_early: f64,
}

impl MixtureModel {
    /// A mixture with only the main early/late pair set.
    pub fn new(early: Gaussian, late: Gaussian, weight_early: f64) -> Result<Self, StatsError> {
        if !(0.0..=1.0).contains(&weight_early) || !weight_early.is_finite() {
            return Err(StatsError::InvalidWeight(weight_early));
        }
        Ok(MixtureModel {
            early,
            late,
            weight_early,
            local_early: None,
            local_late: None,
            local_weight_early: 0.5,
        })
    }

    pub fn component(&self, which: Component) -> Result<Gaussian, StatsError> {
        match which {
            Component::Early => Ok(self.early),
            Component::Late => Ok(self.late),
            Component::LocalEarly => self
                .local_early
                .ok_or(StatsError::MissingComponent(Component::LocalEarly)),
            Component::LocalLate => self
                .local_late
                .ok_or(StatsError::MissingComponent(Component::LocalLate)),
        }
    }

    /// Quantile of one selected component.
    pub fn quantile(&self, which: Component, p: f64) -> Result<f64, StatsError> {
        self.component(which)?.quantile(p)
    }

    /// Checks the ordering the scheduler relies on: the late component must
    /// dominate the early one in both mean and variance (and likewise for
    /// the local pair when both are present).
    pub fn validate(&self) -> Result<(), StatsError> {
        let dominated = |e: &Gaussian, l: &Gaussian| l.mean >= e.mean && l.variance >= e.variance;
        if !dominated(&self.early, &self.late) {
            return Err(StatsError::ComponentOrder(self.early, self.late));
        }
        if let (Some(le), Some(ll)) = (self.local_early, self.local_late) {
            if !dominated(&le, &ll) {
                return Err(StatsError::ComponentOrder(le, ll));
            }
        }
        Ok(())
    }

    /// Returns a copy with the late components widened just enough to
    /// dominate the early ones. Fitted models can come out with a slightly
    /// narrower late component; this restores the ordering `validate`
    /// demands without touching the early side.
    pub fn late_dominant(mut self) -> Self {
        self.late = Gaussian {
            mean: self.late.mean.max(self.early.mean),
            variance: self.late.variance.max(self.early.variance),
        };
        if let (Some(le), Some(ll)) = (self.local_early, self.local_late) {
            self.local_late = Some(Gaussian {
                mean: ll.mean.max(le.mean),
                variance: ll.variance.max(le.variance),
            });
        }
        self
    }
}

/// Minimum number of samples `fit_mixture` accepts.
pub const MIN_FIT_SAMPLES: usize = 4;

const EM_MAX_ITERS: usize = 100;
const EM_REL_TOL: f64 = 1e-8;

/// Fits a two-component mixture by expectation-maximization, initialized
/// from a median split of the sorted samples. The component with the
/// smaller mean becomes `early` (smaller variance breaks ties). Identical
/// samples collapse to two equal point masses.
pub fn fit_mixture(samples: &[f64]) -> Result<MixtureModel, StatsError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(StatsError::NotEnoughSamples {
            min: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFiniteSample);
    }

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();

    if sorted[0] == sorted[n - 1] {
        // All samples identical: both components are the same point mass.
        let point = Gaussian::new(sorted[0], 0.0)?;
        return MixtureModel::new(point, point, 0.5);
    }

    let mid = n / 2;
    let mut mu = [mean_of(&sorted[..mid]), mean_of(&sorted[mid..])];
    let mut var = [
        variance_of(&sorted[..mid], mu[0]),
        variance_of(&sorted[mid..], mu[1]),
    ];
    let mut weight = [0.5, 0.5];

    // Floor only for density evaluation; reported variances stay raw.
    let spread = sorted[n - 1] - sorted[0];
    let floor = (spread * spread).max(1.0) * 1e-12;
    let dens = |x: f64, m: f64, v: f64| {
        let v = v.max(floor);
        let z = x - m;
        (-z * z / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    };

    let mut resp = vec![0.0f64; n];
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITERS {
        let mut ll = 0.0;
        for (i, &x) in sorted.iter().enumerate() {
            let a = weight[0] * dens(x, mu[0], var[0]);
            let b = weight[1] * dens(x, mu[1], var[1]);
            let total = a + b;
            resp[i] = if total > 0.0 { a / total } else { 0.5 };
            ll += total.max(f64::MIN_POSITIVE).ln();
        }

        let w0: f64 = resp.iter().sum();
        let w1 = n as f64 - w0;
        if w0 > 0.0 {
            mu[0] = sorted.iter().zip(&resp).map(|(x, r)| x * r).sum::<f64>() / w0;
            var[0] = sorted
                .iter()
                .zip(&resp)
                .map(|(x, r)| r * (x - mu[0]) * (x - mu[0]))
                .sum::<f64>()
                / w0;
        }
        if w1 > 0.0 {
            mu[1] = sorted
                .iter()
                .zip(&resp)
                .map(|(x, r)| x * (1.0 - r))
                .sum::<f64>()
                / w1;
            var[1] = sorted
                .iter()
                .zip(&resp)
                .map(|(x, r)| (1.0 - r) * (x - mu[1]) * (x - mu[1]))
                .sum::<f64>()
                / w1;
        }
        weight = [w0 / n as f64, w1 / n as f64];

        if (ll - prev_ll).abs() < EM_REL_TOL * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;
    }

    // Tiny residual variances are numerical dust from collapsed components.
    for v in &mut var {
        if *v < floor {
            *v = 0.0;
        }
    }

    let early_idx = if mu[0] < mu[1] || (mu[0] == mu[1] && var[0] <= var[1]) {
        0
    } else {
        1
    };
    let late_idx = 1 - early_idx;
    MixtureModel::new(
        Gaussian::new(mu[early_idx], var[early_idx])?,
        Gaussian::new(mu[late_idx], var[late_idx])?,
        weight[early_idx].clamp(0.0, 1.0),
    )
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance_of(xs: &[f64], mean: f64) -> f64 {
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent standard-normal CDF via adaptive Simpson integration of
    /// the density — deliberately avoids the erf-based path under test.
    fn oracle_cdf(g: Gaussian, x: f64) -> f64 {
        let sd = g.variance().sqrt();
        let z = (x - g.mean()) / sd;
        let density = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // Integrate from 0 to |z| with Simpson's rule on a fine grid.
        let steps = 20_000;
        let h = z.abs() / steps as f64;
        let mut acc = density(0.0) + density(z.abs());
        for i in 1..steps {
            let t = i as f64 * h;
            acc += density(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let half = acc * h / 3.0;
        if z >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    fn oracle_quantile(g: Gaussian, p: f64) -> f64 {
        let sd = g.variance().sqrt();
        let (mut lo, mut hi) = (g.mean() - 12.0 * sd, g.mean() + 12.0 * sd);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if oracle_cdf(g, mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        let g = Gaussian::new(25.0, 4.0).unwrap();
        let q = g.quantile(0.9).unwrap();
        assert!((q - 27.563).abs() < 1e-3, "q = {q}");
        assert!((q - oracle_quantile(g, 0.9)).abs() < 1e-8);

        let cases = [
            (Gaussian::new(0.0, 1.0).unwrap(), 0.7),
            (Gaussian::new(32.0, 9.0).unwrap(), 0.7),
            (Gaussian::new(-3.0, 0.25).unwrap(), 0.01),
            (Gaussian::new(100.0, 400.0).unwrap(), 0.999),
        ];
        for (g, p) in cases {
            let q = g.quantile(p).unwrap();
            assert!(
                (q - oracle_quantile(g, p)).abs() < 1e-8,
                "mismatch for {g:?} at p={p}"
            );
        }
    }

    #[test]
    fn quantile_of_symmetric_center_is_mean() {
        let g = Gaussian::new(0.0, 1.0).unwrap();
        assert_eq!(g.quantile(0.5).unwrap(), 0.0);
    }

    #[test]
    fn quantile_rejects_probabilities_at_or_beyond_bounds() {
        let g = Gaussian::new(0.0, 1.0).unwrap();
        for p in [0.0, 1.0, -0.1, 1.1, f64::NAN] {
            assert!(matches!(
                g.quantile(p),
                Err(StatsError::ProbabilityOutOfRange(_))
            ));
        }
    }

    #[test]
    fn point_mass_quantile_is_mean_everywhere() {
        let g = Gaussian::new(7.0, 0.0).unwrap();
        for p in [0.001, 0.5, 0.999] {
            assert_eq!(g.quantile(p).unwrap(), 7.0);
        }
    }

    #[test]
    fn cdf_quantile_round_trip() {
        let g = Gaussian::new(25.0, 4.0).unwrap();
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let q = g.quantile(p).unwrap();
            assert!((g.cdf(q) - p).abs() < 1e-6, "round trip failed at p={p}");
        }
    }

    #[test]
    fn sum_adds_means_and_variances() {
        let a = Gaussian::new(10.0, 4.0).unwrap();
        let b = Gaussian::new(20.0, 9.0).unwrap();
        let s = sum_gaussians(a, b);
        assert_eq!(s.mean(), 30.0);
        assert_eq!(s.variance(), 13.0);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(Gaussian::new(0.0, -1.0).is_err());
        assert!(Gaussian::new(f64::NAN, 1.0).is_err());
        assert!(Gaussian::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_clamped() {
        let g = Gaussian::new(1.0, 100.0).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..100).map(|_| g.sample(&mut a)).collect();
        let ys: Vec<f64> = (0..100).map(|_| g.sample(&mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|&x| x >= 0.0));
        // With sd 10 around mean 1 the clamp must actually trigger sometimes.
        assert!(xs.iter().any(|&x| x == 0.0));
    }

    #[test]
    fn sample_mean_approaches_distribution_mean() {
        let g = Gaussian::new(50.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mean = (0..n).map(|_| g.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 50.0).abs() < 0.1, "mean = {mean}");
    }

    #[test]
    fn mixture_component_selection_and_missing_locals() {
        let early = Gaussian::new(25.0, 4.0).unwrap();
        let late = Gaussian::new(40.0, 9.0).unwrap();
        let m = MixtureModel::new(early, late, 0.8).unwrap();
        let q = m.quantile(Component::Early, 0.7).unwrap();
        assert!((q - 26.0488).abs() < 1e-3, "q = {q}");
        assert_eq!(m.component(Component::Late).unwrap(), late);
        assert!(matches!(
            m.quantile(Component::LocalEarly, 0.5),
            Err(StatsError::MissingComponent(Component::LocalEarly))
        ));
    }

    #[test]
    fn mixture_validation_orders_components() {
        let narrow = Gaussian::new(25.0, 4.0).unwrap();
        let wide = Gaussian::new(40.0, 9.0).unwrap();
        assert!(MixtureModel::new(narrow, wide, 0.8).unwrap().validate().is_ok());
        let bad = MixtureModel::new(wide, narrow, 0.8).unwrap();
        assert!(bad.validate().is_err());
        let fixed = bad.late_dominant();
        assert!(fixed.validate().is_ok());
        assert_eq!(fixed.late.mean(), 40.0);
        assert_eq!(fixed.late.variance(), 9.0);
    }

    #[test]
    fn fit_recovers_well_separated_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Gaussian::new(25.0, 4.0).unwrap();
        let b = Gaussian::new(60.0, 9.0).unwrap();
        let mut samples = Vec::with_capacity(10_000);
        for i in 0..10_000 {
            let g = if i % 10 < 7 { a } else { b };
            samples.push(g.sample(&mut rng));
        }
        let m = fit_mixture(&samples).unwrap();
        assert!((m.early.mean() - 25.0).abs() / 25.0 < 0.02, "{:?}", m.early);
        assert!((m.late.mean() - 60.0).abs() / 60.0 < 0.02, "{:?}", m.late);
        assert!((m.weight_early - 0.7).abs() < 0.05);
        assert!(m.early.mean() <= m.late.mean());
    }

    #[test]
    fn fit_handles_identical_samples() {
        let m = fit_mixture(&[5.0; 16]).unwrap();
        assert_eq!(m.early.mean(), 5.0);
        assert_eq!(m.late.mean(), 5.0);
        assert_eq!(m.early.variance(), 0.0);
        assert_eq!(m.late.variance(), 0.0);
    }

    #[test]
    fn fit_rejects_tiny_or_bad_input() {
        assert!(matches!(
            fit_mixture(&[1.0, 2.0, 3.0]),
            Err(StatsError::NotEnoughSamples { min: 4, got: 3 })
        ));
        assert!(matches!(
            fit_mixture(&[1.0, 2.0, f64::NAN, 4.0]),
            Err(StatsError::NonFiniteSample)
        ));
    }

    #[test]
    fn fit_orders_output_by_mean() {
        // Feed data where the upper half comes first; ordering must still hold.
        let mut samples = Vec::new();
        for i in 0..50 {
            samples.push(80.0 + (i % 5) as f64);
            samples.push(20.0 + (i % 5) as f64);
        }
        let m = fit_mixture(&samples).unwrap();
        assert!(m.early.mean() < m.late.mean());
        assert!((m.early.mean() - 22.0).abs() < 1.0);
        assert!((m.late.mean() - 82.0).abs() < 1.0);
    }
}
