//! Emission densities for the two hidden states and their mixture.
//!
//! State 0 (non-edge, "small" coefficients) is a zero-mean Gaussian, state 1
//! (edge, "big" coefficients) a zero-mean Laplacian. The generalized Gaussian
//! is kept as the reference family both approximate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every emission scale (`sigma0`, `b1`), in normalized
/// coefficient units.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn gaussian_pdf(w: f64, sigma: f64) -> f64 {
    gaussian_ln_pdf(w, sigma).exp()
}

pub fn gaussian_ln_pdf(w: f64, sigma: f64) -> f64 {
    let z = w / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

pub fn laplacian_pdf(w: f64, b: f64) -> f64 {
    laplacian_ln_pdf(w, b).exp()
}

pub fn laplacian_ln_pdf(w: f64, b: f64) -> f64 {
    -w.abs() / b - (2.0 * b).ln()
}

// Lanczos approximation, g = 7, n = 9 (coefficients as published in
// Numerical Recipes / Godfrey). Relative error below 1e-15 for real x > 0.
const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`, with the reflection formula below 1/2.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x) Γ(1 - x) = π / sin(πx)
        return PI.ln() - (PI * x).sin().abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        return PI / ((PI * x).sin() * gamma(1.0 - x));
    }
    ln_gamma(x).exp()
}

/// Generalized Gaussian with scale `q` and shape `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdParams {
    q: f64,
    p: f64,
}

impl GgdParams {
    pub fn new(q: f64, p: f64) -> Result<Self> {
        if !(q.is_finite() && q > 0.0 && p.is_finite() && p > 0.0) {
            return Err(Error::InvalidParams(format!(
                "GGD needs finite q > 0 and p > 0, got q={q} p={p}"
            )));
        }
        Ok(GgdParams { q, p })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// `p / (2 q Γ(1/p)) * exp(-|y/q|^p)`
pub fn ggd_pdf(y: f64, params: GgdParams) -> f64 {
    ggd_ln_pdf(y, params).exp()
}

pub fn ggd_ln_pdf(y: f64, params: GgdParams) -> f64 {
    let GgdParams { q, p } = params;
    p.ln() - (2.0 * q).ln() - ln_gamma(1.0 / p) - (y / q).abs().powf(p)
}

/// Two-state zero-mean mixture: Gaussian `sigma0` for state 0, Laplacian `b1`
/// for state 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    prior_edge: f64,
    sigma0: f64,
    b1: f64,
}

impl MixtureParams {
    pub fn new(prior_edge: f64, sigma0: f64, b1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prior_edge) {
            return Err(Error::InvalidParams(format!(
                "prior_edge {prior_edge} outside [0, 1]"
            )));
        }
        check_scale("sigma0", sigma0)?;
        check_scale("b1", b1)?;
        Ok(MixtureParams {
            prior_edge,
            sigma0,
            b1,
        })
    }

    pub fn prior_edge(&self) -> f64 {
        self.prior_edge
    }

    /// `[p(s=0), p(s=1)]`; sums to one.
    pub fn pmf(&self) -> [f64; 2] {
        [1.0 - self.prior_edge, self.prior_edge]
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }

    pub fn emission(&self) -> Emission {
        Emission {
            sigma0: self.sigma0,
            b1: self.b1,
        }
    }
}

pub(crate) fn check_scale(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= VARIANCE_FLOOR) {
        return Err(Error::InvalidParams(format!(
            "{name} = {v} must be finite and >= {VARIANCE_FLOOR}"
        )));
    }
    Ok(())
}

/// Per-state emission densities shared by the chain and tree models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    /// Gaussian standard deviation of the non-edge state.
    pub sigma0: f64,
    /// Laplacian scale of the edge state.
    pub b1: f64,
}

impl Emission {
    pub fn validate(&self) -> Result<()> {
        check_scale("sigma0", self.sigma0)?;
        check_scale("b1", self.b1)
    }

    pub fn ln_density(&self, state: usize, w: f64) -> f64 {
        match state {
            0 => gaussian_ln_pdf(w, self.sigma0),
            _ => laplacian_ln_pdf(w, self.b1),
        }
    }

    pub fn ln_densities(&self, w: f64) -> [f64; 2] {
        [self.ln_density(0, w), self.ln_density(1, w)]
    }

    /// Standard deviation of the edge-state Laplacian, `sqrt(2) * b1`.
    pub fn edge_std(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.b1
    }
}

pub fn mixture_pdf(w: f64, params: &MixtureParams) -> f64 {
    let [p0, p1] = params.pmf();
    p0 * gaussian_pdf(w, params.sigma0) + p1 * laplacian_pdf(w, params.b1)
}

/// `ln f(w)` evaluated without underflow.
pub fn mixture_ln_pdf(w: f64, params: &MixtureParams) -> f64 {
    let [p0, p1] = params.pmf();
    log_sum_exp2(
        p0.ln() + gaussian_ln_pdf(w, params.sigma0),
        p1.ln() + laplacian_ln_pdf(w, params.b1),
    )
}

/// Posterior edge probability of one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub edge: f64,
    /// Both weighted densities underflowed in linear space; `edge` then
    /// falls back to the prior.
    pub underflow: bool,
}

/// `p(s=1 | w)` by Bayes' rule on the mixture.
pub fn posterior_state(w: f64, params: &MixtureParams) -> Posterior {
    let [p0, p1] = params.pmf();
    let f0 = p0 * gaussian_pdf(w, params.sigma0);
    let f1 = p1 * laplacian_pdf(w, params.b1);
    let total = f0 + f1;
    if total > 0.0 && total.is_finite() {
        return Posterior {
            edge: f1 / total,
            underflow: false,
        };
    }
    Posterior {
        edge: params.prior_edge,
        underflow: true,
    }
}

/// Posterior computed entirely in log space; never underflows for finite `w`.
pub fn posterior_state_ln(w: f64, params: &MixtureParams) -> f64 {
    let [p0, p1] = params.pmf();
    let a = p0.ln() + gaussian_ln_pdf(w, params.sigma0);
    let b = p1.ln() + laplacian_ln_pdf(w, params.b1);
    (b - log_sum_exp2(a, b)).exp()
}

/// `ln(e^a + e^b)`, exact for infinite arguments.
pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
