//! Minimum-Gumbel density, its maximum-likelihood fit, the learned
//! ("dynamic") parameterization, and the alternative densities used for
//! comparison.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::compute::{Tape, Var};
use crate::error::{GrpError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standardized exponents `(x − α)/β` are clamped to this before `exp`.
pub const EXPONENT_CLAMP: f64 = 30.0;

/// Default positivity margin for scale parameters.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Positivity margin for Weibull/Fréchet shape parameters.
pub const SHAPE_DELTA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistKind {
    Gumbel,
    Poisson,
    Normal,
    Exponential,
    Weibull,
    Frechet,
}

impl DistKind {
    pub const ALL: [DistKind; 6] = [
        DistKind::Gumbel,
        DistKind::Poisson,
        DistKind::Normal,
        DistKind::Exponential,
        DistKind::Weibull,
        DistKind::Frechet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistKind::Gumbel => "gumbel",
            DistKind::Poisson => "poisson",
            DistKind::Normal => "normal",
            DistKind::Exponential => "exponential",
            DistKind::Weibull => "weibull",
            DistKind::Frechet => "frechet",
        }
    }

    /// One-letter tag used in comparison tables, e.g. `PMF(G)`.
    pub fn tag(self) -> char {
        match self {
            DistKind::Gumbel => 'G',
            DistKind::Poisson => 'P',
            DistKind::Normal => 'N',
            DistKind::Exponential => 'E',
            DistKind::Weibull => 'W',
            DistKind::Frechet => 'F',
        }
    }

    pub fn uses_location(self) -> bool {
        matches!(self, DistKind::Gumbel | DistKind::Normal)
    }

    pub fn uses_shape(self) -> bool {
        matches!(self, DistKind::Weibull | DistKind::Frechet)
    }

    pub fn is_continuous(self) -> bool {
        self != DistKind::Poisson
    }
}

impl fmt::Display for DistKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistKind {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        DistKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GrpError::config(format!("unknown distribution '{s}'")))
    }
}

/// A density value and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DensityEval {
    pub value: f64,
    pub d_x: f64,
    pub d_loc: f64,
    pub d_scale: f64,
    pub d_shape: f64,
}

/// Minimum-Gumbel density `(1/β)·exp(z − e^z)`, `z = (x − α)/β`.
pub fn gumbel_min_density(x: f64, alpha: f64, beta: f64) -> DensityEval {
    let raw = (x - alpha) / beta;
    let clamped = raw > EXPONENT_CLAMP;
    let z = raw.min(EXPONENT_CLAMP);
    let ez = z.exp();
    let p = (z - ez).exp() / beta;
    // dp/dz; zero once the clamp is active.
    let dz = if clamped { 0.0 } else { p * (1.0 - ez) };
    DensityEval {
        value: p,
        d_x: dz / beta,
        d_loc: -dz / beta,
        d_scale: -p / beta - dz * z / beta,
        d_shape: 0.0,
    }
}

fn normal_density(x: f64, mu: f64, sigma: f64) -> DensityEval {
    let z = (x - mu) / sigma;
    let p = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    DensityEval {
        value: p,
        d_x: -z * p / sigma,
        d_loc: z * p / sigma,
        d_scale: p * (z * z - 1.0) / sigma,
        d_shape: 0.0,
    }
}

fn exponential_density(x: f64, rate: f64) -> DensityEval {
    if x < 0.0 {
        return DensityEval::default();
    }
    let p = rate * (-rate * x).exp();
    DensityEval {
        value: p,
        d_x: -rate * p,
        d_loc: 0.0,
        d_scale: p * (1.0 / rate - x),
        d_shape: 0.0,
    }
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Poisson mass at the integer nearest to `x`; constant in `x`.
fn poisson_mass(x: f64, lambda: f64) -> DensityEval {
    let k = x.round();
    if k < 0.0 {
        return DensityEval::default();
    }
    let p = (k * lambda.ln() - lambda - ln_factorial(k as u64)).exp();
    DensityEval {
        value: p,
        d_x: 0.0,
        d_loc: 0.0,
        d_scale: p * (k / lambda - 1.0),
        d_shape: 0.0,
    }
}

fn weibull_density(x: f64, scale: f64, shape: f64) -> DensityEval {
    if x <= 0.0 {
        return DensityEval::default();
    }
    let u = x / scale;
    let uk = u.powf(shape);
    let ln_p = shape.ln() - scale.ln() + (shape - 1.0) * u.ln() - uk;
    let p = ln_p.exp();
    if p == 0.0 || !p.is_finite() {
        return DensityEval::default();
    }
    DensityEval {
        value: p,
        d_x: p * ((shape - 1.0) / x - shape * uk / x),
        d_loc: 0.0,
        d_scale: p * (shape / scale) * (uk - 1.0),
        d_shape: p * (1.0 / shape + u.ln() - uk * u.ln()),
    }
}

/// Fréchet density with location fixed at 0.
fn frechet_density(x: f64, scale: f64, shape: f64) -> DensityEval {
    if x <= 0.0 {
        return DensityEval::default();
    }
    let u = x / scale;
    let u_neg = u.powf(-shape);
    let ln_p = shape.ln() - scale.ln() - (1.0 + shape) * u.ln() - u_neg;
    let p = ln_p.exp();
    if p == 0.0 || !p.is_finite() {
        return DensityEval::default();
    }
    DensityEval {
        value: p,
        d_x: p * (shape * u_neg - 1.0 - shape) / x,
        d_loc: 0.0,
        d_scale: p * shape * (1.0 - u_neg) / scale,
        d_shape: p * (1.0 / shape - u.ln() + u_neg * u.ln()),
    }
}

/// Density of `kind` at `x` with partials. Parameters a kind does not use
/// are ignored. Assumes positive scale and shape.
pub fn density(kind: DistKind, x: f64, loc: f64, scale: f64, shape: f64) -> DensityEval {
    match kind {
        DistKind::Gumbel => gumbel_min_density(x, loc, scale),
        DistKind::Normal => normal_density(x, loc, scale),
        DistKind::Exponential => exponential_density(x, scale),
        DistKind::Poisson => poisson_mass(x, scale),
        DistKind::Weibull => weibull_density(x, scale, shape),
        DistKind::Frechet => frechet_density(x, scale, shape),
    }
}

/// Elementwise minimum-Gumbel density for `c` independent parameter pairs.
pub fn gumbel_min_pdf(x: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if x.len() != alpha.len() || x.len() != beta.len() {
        return Err(GrpError::dim("x, alpha and beta must share one length"));
    }
    x.iter()
        .zip(alpha)
        .zip(beta)
        .map(|((&x, &a), &b)| {
            if b <= 0.0 || !b.is_finite() {
                Err(GrpError::Domain(format!("beta must be positive, got {b}")))
            } else {
                Ok(gumbel_min_density(x, a, b).value)
            }
        })
        .collect()
}

/// Per-element parameters of any [`DistKind`]. Unused channels may be empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistParams {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
    pub shape: Vec<f64>,
}

/// Elementwise density of `kind`; drop-in replacement for [`gumbel_min_pdf`].
pub fn alt_pdf(kind: DistKind, x: &[f64], params: &DistParams) -> Result<Vec<f64>> {
    let n = x.len();
    if params.scale.len() != n
        || (kind.uses_location() && params.loc.len() != n)
        || (kind.uses_shape() && params.shape.len() != n)
    {
        return Err(GrpError::dim(format!("{kind} parameters do not match x")));
    }
    (0..n)
        .map(|i| {
            let scale = params.scale[i];
            let shape = if kind.uses_shape() { params.shape[i] } else { 1.0 };
            if scale <= 0.0 || shape <= 0.0 {
                return Err(GrpError::Domain(format!(
                    "{kind} needs positive parameters, got scale {scale} shape {shape}"
                )));
            }
            let loc = if kind.uses_location() { params.loc[i] } else { 0.0 };
            Ok(density(kind, x[i], loc, scale, shape).value)
        })
        .collect()
}

/// Trapezoid-rule integral of a continuous density over `range`.
pub fn normalization_check(
    kind: DistKind,
    loc: f64,
    scale: f64,
    shape: f64,
    range: (f64, f64),
    steps: usize,
) -> Result<f64> {
    if !kind.is_continuous() {
        return Err(GrpError::config(format!("{kind} is not a continuous density")));
    }
    if steps == 0 || range.1 <= range.0 {
        return Err(GrpError::config("quadrature needs a nonempty range and steps"));
    }
    let h = (range.1 - range.0) / steps as f64;
    let f = |x: f64| density(kind, x, loc, scale, shape).value;
    let interior: f64 = (1..steps).map(|i| f(range.0 + i as f64 * h)).sum();
    Ok(h * (0.5 * f(range.0) + interior + 0.5 * f(range.1)))
}

/// Location and scale vectors for `c` minimum-Gumbel densities.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelParamSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// `α = W1·q + b1`, `β = ReLU(W2·q + b2) + δ`.
pub fn dynamic_params(
    q: &[f64],
    w1: &Tensor,
    b1: &[f64],
    w2: &Tensor,
    b2: &[f64],
    delta: f64,
) -> Result<GumbelParamSet> {
    check_delta(delta)?;
    let mut t = Tape::inference();
    let qv = t.constant_vector(q);
    let w1 = t.constant(w1.clone());
    let b1 = t.constant_vector(b1);
    let w2 = t.constant(w2.clone());
    let b2 = t.constant_vector(b2);
    let alpha = t.dense(w1, qv, b1)?;
    let pre = t.dense(w2, qv, b2)?;
    let beta = positive_channel(&mut t, pre, delta);
    Ok(GumbelParamSet {
        alpha: t.value(alpha).as_slice().to_vec(),
        beta: t.value(beta).as_slice().to_vec(),
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(GrpError::config(format!("delta must be positive, got {delta}")))
    }
}

/// `ReLU(x) + δ`, which keeps a parameter at least `δ`.
pub fn positive_channel(t: &mut Tape, x: Var, delta: f64) -> Var {
    let r = t.relu(x);
    t.add_const(r, delta)
}

/// Affine maps from a ratio feature to the parameters of `c` densities of
/// one kind. Each channel is `W·q + b`; scale and shape pass through
/// [`positive_channel`].
#[derive(Debug, Clone)]
pub struct DistNet {
    pub kind: DistKind,
    pub loc: (ParamId, ParamId),
    pub scale: (ParamId, ParamId),
    pub shape: (ParamId, ParamId),
    pub delta: f64,
}

/// Tape nodes for one set of density parameters.
#[derive(Debug, Clone, Copy)]
pub struct DistParamVars {
    pub loc: Option<Var>,
    pub scale: Var,
    pub shape: Option<Var>,
}

impl DistNet {
    /// Registers weights in `store`. Biases start so that density `k` is
    /// centred on sampling score `k` with unit spread; weights start small.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: DistKind,
        scores: &[f64],
        delta: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_delta(delta)?;
        let c = scores.len();
        let mut small = |store: &mut ParamStore, name: String| {
            let data = (0..c * c).map(|_| rng.random_range(-0.05..0.05)).collect();
            store.add(name, Tensor::new(c, c, data))
        };
        let w_loc = small(store, format!("{prefix}.loc.w"));
        let w_scale = small(store, format!("{prefix}.scale.w"));
        let w_shape = small(store, format!("{prefix}.shape.w"));
        let scale_bias = match kind {
            DistKind::Gumbel | DistKind::Normal | DistKind::Exponential => vec![1.0; c],
            DistKind::Poisson | DistKind::Weibull | DistKind::Frechet => scores.to_vec(),
        };
        let b_loc = store.add(format!("{prefix}.loc.b"), Tensor::vector(scores.to_vec()));
        let b_scale = store.add(format!("{prefix}.scale.b"), Tensor::vector(scale_bias));
        let b_shape = store.add(format!("{prefix}.shape.b"), Tensor::filled(c, 1, 2.0));
        Ok(DistNet {
            kind,
            loc: (w_loc, b_loc),
            scale: (w_scale, b_scale),
            shape: (w_shape, b_shape),
            delta,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.loc.0,
            self.loc.1,
            self.scale.0,
            self.scale.1,
            self.shape.0,
            self.shape.1,
        ]
    }

    /// Parameters for the ratio feature `q`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, q: Var) -> Result<DistParamVars> {
        let loc = if self.kind.uses_location() {
            let w = t.param(store, self.loc.0);
            let b = t.param(store, self.loc.1);
            Some(t.dense(w, q, b)?)
        } else {
            None
        };
        let w = t.param(store, self.scale.0);
        let b = t.param(store, self.scale.1);
        let pre = t.dense(w, q, b)?;
        let scale = positive_channel(t, pre, self.delta);
        let shape = if self.kind.uses_shape() {
            let w = t.param(store, self.shape.0);
            let b = t.param(store, self.shape.1);
            let pre = t.dense(w, q, b)?;
            Some(positive_channel(t, pre, SHAPE_DELTA))
        } else {
            None
        };
        Ok(DistParamVars { loc, scale, shape })
    }
}

/// Which sign convention the maximum-likelihood equations use.
///
/// `AsPrinted` transcribes the commonly quoted pair literally:
/// `x̄ − Σxᵢe^{xᵢ/β}/Σe^{xᵢ/β} − β = 0` and `α = −β·log(mean e^{xᵢ/β})`.
/// The weighted mean is never below `x̄`, so that scale equation has no
/// positive root on a non-constant sample. `MinimumCorrected` is the
/// minimum-Gumbel likelihood solution, with both signs flipped:
/// `Σxᵢe^{xᵢ/β}/Σe^{xᵢ/β} − x̄ − β = 0` and `α = β·log(mean e^{xᵢ/β})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MleConvention {
    AsPrinted,
    MinimumCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelFit {
    pub alpha: f64,
    pub beta: f64,
    pub scale_residual: f64,
    pub location_residual: f64,
    pub iterations: usize,
}

const MLE_MAX_ITER: usize = 200;
const MLE_BETA_MIN: f64 = 1e-6;

/// Shifted weights `exp((xᵢ − max)/β)`: returns (weighted mean of x, log of
/// mean of `e^{xᵢ/β}`).
fn weighted_stats(x: &[f64], beta: f64) -> (f64, f64) {
    let xmax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sw = 0.0;
    let mut swx = 0.0;
    for &xi in x {
        let w = ((xi - xmax) / beta).exp();
        sw += w;
        swx += w * xi;
    }
    let log_mean = xmax / beta + (sw / x.len() as f64).ln();
    (swx / sw, log_mean)
}

fn scale_residual(x: &[f64], beta: f64, conv: MleConvention) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let (wmean, _) = weighted_stats(x, beta);
    match conv {
        MleConvention::AsPrinted => mean - wmean - beta,
        MleConvention::MinimumCorrected => wmean - mean - beta,
    }
}

fn location_from_scale(x: &[f64], beta: f64, conv: MleConvention) -> f64 {
    let (_, log_mean) = weighted_stats(x, beta);
    match conv {
        MleConvention::AsPrinted => -beta * log_mean,
        MleConvention::MinimumCorrected => beta * log_mean,
    }
}

/// Residuals of the scale and location equations at `(alpha, beta)`.
pub fn mle_residuals(x: &[f64], alpha: f64, beta: f64, conv: MleConvention) -> (f64, f64) {
    (
        scale_residual(x, beta, conv),
        location_from_scale(x, beta, conv) - alpha,
    )
}

/// Fits `(α̂, β̂)` to a sample of minima by bisection on the scale equation
/// over `[1e-6, 100·std]`, then solves the location equation directly.
pub fn gumbel_mle_fit(minima: &[f64], conv: MleConvention) -> Result<GumbelFit> {
    let n = minima.len();
    if n < 2 {
        return Err(GrpError::Fit {
            message: format!("need at least 2 values, got {n}"),
            residual: f64::NAN,
        });
    }
    if minima.iter().any(|x| !x.is_finite()) {
        return Err(GrpError::Numeric("sample contains non-finite values".into()));
    }
    let mean = minima.iter().sum::<f64>() / n as f64;
    let var = minima.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let hi0 = 100.0 * std;
    if hi0.is_nan() || hi0 <= MLE_BETA_MIN {
        return Err(GrpError::Fit {
            message: format!("sample spread {std:e} leaves no bracket"),
            residual: f64::NAN,
        });
    }
    let (mut lo, mut hi) = (MLE_BETA_MIN, hi0);
    let (mut g_lo, g_hi) = (scale_residual(minima, lo, conv), scale_residual(minima, hi, conv));
    if g_lo.signum() == g_hi.signum() {
        return Err(GrpError::Fit {
            message: format!("scale equation not bracketed in [{lo:e}, {hi:e}]"),
            residual: g_lo.abs().min(g_hi.abs()),
        });
    }
    let mut iterations = 0;
    while iterations < MLE_MAX_ITER {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = scale_residual(minima, mid, conv);
        if g_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    let beta = 0.5 * (lo + hi);
    let alpha = location_from_scale(minima, beta, conv);
    let (scale_residual, location_residual) = mle_residuals(minima, alpha, beta, conv);
    Ok(GumbelFit {
        alpha,
        beta,
        scale_residual,
        location_residual,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    #[test]
    fn gumbel_closed_form_values() {
        let p = gumbel_min_pdf(&[0.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((p[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((p[0] - 0.367879).abs() < 1e-6);
        assert!((p[1] - (1.0 - E).exp()).abs() < 1e-15);
        assert!((p[1] - 0.179374).abs() < 1e-6);
        for beta in [0.1, 0.5, 2.0, 7.0] {
            let m = gumbel_min_pdf(&[3.0], &[3.0], &[beta]).unwrap()[0];
            assert!((m - 1.0 / (beta * E)).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_rejects_nonpositive_beta() {
        assert!(matches!(
            gumbel_min_pdf(&[0.0], &[0.0], &[0.0]),
            Err(GrpError::Domain(_))
        ));
        assert!(gumbel_min_pdf(&[0.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn gumbel_exponent_is_clamped() {
        let e = gumbel_min_density(100.0, 0.0, 1e-3);
        assert!(e.value.is_finite() && e.value >= 0.0);
        assert_eq!(e.d_x, 0.0);
        assert!(e.d_scale.is_finite());
    }

    #[test]
    fn gumbel_is_negatively_skewed() {
        let (a, b) = (2.0, 0.7);
        let left = gumbel_min_density(a - 3.0 * b, a, b).value;
        let right = gumbel_min_density(a + 3.0 * b, a, b).value;
        assert!(left > right);
    }

    #[test]
    fn alternative_closed_forms() {
        let n = alt_pdf(
            DistKind::Normal,
            &[1.5],
            &DistParams { loc: vec![1.5], scale: vec![1.0], shape: vec![] },
        )
        .unwrap();
        assert!((n[0] - 0.398942).abs() < 1e-6);
        let only_scale = DistParams { loc: vec![], scale: vec![1.0], shape: vec![] };
        let p = alt_pdf(DistKind::Poisson, &[1.0], &only_scale).unwrap();
        assert!((p[0] - (-1.0f64).exp()).abs() < 1e-15);
        let e = alt_pdf(DistKind::Exponential, &[1.0], &only_scale).unwrap();
        assert!((e[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn outside_support_is_zero_with_zero_gradient() {
        for kind in [DistKind::Weibull, DistKind::Frechet] {
            let e = density(kind, -1.0, 0.0, 1.0, 2.0);
            assert_eq!(e, DensityEval::default());
        }
        assert_eq!(density(DistKind::Exponential, -0.5, 0.0, 1.0, 0.0).value, 0.0);
    }

    #[test]
    fn alt_pdf_rejects_bad_parameters() {
        let bad = DistParams { loc: vec![], scale: vec![1.0], shape: vec![0.0] };
        assert!(alt_pdf(DistKind::Weibull, &[1.0], &bad).is_err());
        let short = DistParams { loc: vec![], scale: vec![], shape: vec![] };
        assert!(matches!(
            alt_pdf(DistKind::Exponential, &[1.0], &short),
            Err(GrpError::Dimension(_))
        ));
    }

    #[test]
    fn densities_integrate_to_one() {
        let g = normalization_check(DistKind::Gumbel, 0.0, 1.0, 0.0, (-20.0, 10.0), 1_000_000).unwrap();
        assert!((g - 1.0).abs() < 1e-6, "{g}");
        let n = normalization_check(DistKind::Normal, 0.0, 1.0, 0.0, (-10.0, 10.0), 1_000_000).unwrap();
        assert!((n - 1.0).abs() < 1e-6, "{n}");
        let e = normalization_check(DistKind::Exponential, 0.0, 1.0, 0.0, (0.0, 50.0), 1_000_000).unwrap();
        assert!((e - 1.0).abs() < 1e-6, "{e}");
        let w = normalization_check(DistKind::Weibull, 0.0, 1.5, 2.0, (0.0, 30.0), 1_000_000).unwrap();
        assert!((w - 1.0).abs() < 1e-6, "{w}");
        assert!(normalization_check(DistKind::Poisson, 0.0, 1.0, 0.0, (0.0, 5.0), 10).is_err());
    }

    #[test]
    fn dynamic_params_examples() {
        let c = 5;
        let q = [0.0, 0.0, 0.0, 0.25, 0.75];
        let zero = Tensor::zeros(c, c);
        let set = dynamic_params(&q, &Tensor::identity(c), &[0.0; 5], &zero, &[0.0; 5], 1e-3).unwrap();
        assert_eq!(set.alpha, q.to_vec());
        assert_eq!(set.beta, vec![1e-3; 5]);
        let again = dynamic_params(&q, &Tensor::identity(c), &[0.0; 5], &zero, &[0.0; 5], 1e-3).unwrap();
        assert_eq!(set, again);
        assert!(matches!(
            dynamic_params(&q, &zero, &[0.0; 5], &zero, &[0.0; 5], 0.0),
            Err(GrpError::Config(_))
        ));
    }

    #[test]
    fn every_density_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in DistKind::ALL {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..5.0)).collect();
            let loc: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
            let scale: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..3.0)).collect();
            let shape: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..3.0)).collect();
            let mut inputs = vec![Tensor::vector(scale)];
            if kind.uses_location() {
                inputs.push(Tensor::vector(loc));
            }
            if kind.uses_shape() {
                inputs.push(Tensor::vector(shape));
            }
            let xs = x.clone();
            let r = grad_check(
                move |t, v| {
                    let xv = t.constant_vector(&xs);
                    let mut it = v[1..].iter();
                    let loc = kind.uses_location().then(|| *it.next().unwrap());
                    let shape = kind.uses_shape().then(|| *it.next().unwrap());
                    let p = t.density(kind, xv, loc, v[0], shape)?;
                    let w = t.constant_vector(&[1.0, -2.0, 0.5, 3.0]);
                    t.dot(p, w)
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{kind}: {r:?}");
        }
    }

    #[test]
    fn mle_fit_on_jittered_constant_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample: Vec<f64> = (0..50).map(|_| 2.0 + rng.random_range(-1e-7..1e-7)).collect();
        match gumbel_mle_fit(&sample, MleConvention::MinimumCorrected) {
            Ok(fit) => assert!(fit.beta < 1e-5, "{fit:?}"),
            Err(e) => assert!(matches!(e, GrpError::Fit { .. })),
        }
        assert!(gumbel_mle_fit(&[1.0], MleConvention::MinimumCorrected).is_err());
        assert!(gumbel_mle_fit(&[1.0, 1.0, 1.0], MleConvention::MinimumCorrected).is_err());
    }

    #[test]
    fn printed_convention_has_no_root_on_minimum_data() {
        let sample = [0.1, 0.9, 1.4, 2.0, 2.2, 2.5, 2.6, 2.7];
        let err = gumbel_mle_fit(&sample, MleConvention::AsPrinted).unwrap_err();
        assert!(matches!(err, GrpError::Fit { .. }));
        let fit = gumbel_mle_fit(&sample, MleConvention::MinimumCorrected).unwrap();
        assert!(fit.beta > 0.0);
        assert!(fit.scale_residual.abs() <= 1e-8);
        assert!(fit.location_residual.abs() <= 1e-8);
    }
}
