//! Double-Gaussian model of the SPDC biphoton: source parameters, marginal and
//! conditional beam statistics, Schmidt number, and correlated pair sampling.
//!
//! Position-basis joint intensity (per transverse axis):
//! `|psi|^2 ~ exp(-(x1+x2)^2 / 2 w0^2) * exp(-(x1-x2)^2 / 2 b^2)`,
//! so the sum coordinate has variance `w0^2` and the difference `b^2`.
//! The momentum basis is the Fourier dual, with `w0 -> 1/w0` and `b -> 1/b`,
//! and its outcomes are anti-correlated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Position,
    Momentum,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Position, Basis::Momentum];

    pub fn index(self) -> usize {
        match self {
            Basis::Position => 0,
            Basis::Momentum => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Basis> {
        match i {
            0 => Some(Basis::Position),
            1 => Some(Basis::Momentum),
            _ => None,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Basis::Position => 'x',
            Basis::Momentum => 'p',
        }
    }
}

/// Pump waist `w0` and phase-matching scale `b`, both in µm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams<T> {
    pub w0: T,
    pub b: T,
}

impl<T: Scalar> SourceParams<T> {
    pub fn new(w0: T, b: T) -> Result<Self> {
        if !(w0 > T::zero() && w0.is_finite()) {
            return Err(invalid("w0", format!("must be positive and finite, got {w0}")));
        }
        if !(b > T::zero() && b.is_finite()) {
            return Err(invalid("b", format!("must be positive and finite, got {b}")));
        }
        Ok(Self { w0, b })
    }

    /// `b^2 = L / (3 k_p)` with the crystal length in mm and the pump
    /// wavevector magnitude in 1/µm.
    pub fn from_crystal(w0: T, crystal_length_mm: T, pump_wavevector_per_um: T) -> Result<Self> {
        if !(crystal_length_mm > T::zero()) {
            return Err(invalid("crystalLength_mm", "must be positive"));
        }
        if !(pump_wavevector_per_um > T::zero()) {
            return Err(invalid("pumpWavevector_per_um", "must be positive"));
        }
        let length_um = crystal_length_mm * T::c(1000.0);
        Self::new(w0, (length_um / (T::c(3.0) * pump_wavevector_per_um)).sqrt())
    }

    /// Dimensionless source with the requested Schmidt number, `w0 >= b`, and
    /// unit position-basis marginal width.
    pub fn from_schmidt(k: T) -> Result<Self> {
        if !(k >= T::one() && k.is_finite()) {
            return Err(invalid("K", format!("Schmidt number must be >= 1, got {k}")));
        }
        let ratio = waist_ratio_for_schmidt(k);
        let b = T::c(2.0) / (ratio * ratio + T::one()).sqrt();
        Self::new(ratio * b, b)
    }

    pub fn schmidt_number(&self) -> T {
        schmidt_number(self)
    }

    /// Sum-coordinate and difference-coordinate standard deviations (per axis)
    /// in the given basis, in source units.
    fn sum_diff_sd(&self, basis: Basis) -> (T, T) {
        match basis {
            Basis::Position => (self.w0, self.b),
            Basis::Momentum => (self.w0.recip(), self.b.recip()),
        }
    }

    /// Per-axis marginal standard deviation in source units.
    pub fn marginal_sd(&self, basis: Basis) -> T {
        let (s, d) = self.sum_diff_sd(basis);
        (s * s + d * d).sqrt() * T::c(0.5)
    }
}

/// `K = (b/w0 + w0/b)^2 / 4`.
pub fn schmidt_number<T: Scalar>(p: &SourceParams<T>) -> T {
    let t = p.b / p.w0 + p.w0 / p.b;
    t * t * T::c(0.25)
}

/// The root `w0/b >= 1` of the Schmidt-number relation: `sqrt(K) + sqrt(K-1)`.
pub fn waist_ratio_for_schmidt<T: Scalar>(k: T) -> T {
    k.sqrt() + (k - T::one()).max(T::zero()).sqrt()
}

/// Marginal width `sigma`, Schmidt number `schmidt` and conditional width
/// `sigma_cond` (the spread of one photon given its partner), all in detector
/// units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamStats<T> {
    pub sigma: T,
    pub schmidt: T,
    pub sigma_cond: T,
}

impl<T: Scalar> BeamStats<T> {
    /// Stats built directly from a marginal width and a Schmidt number.
    pub fn from_sigma_and_schmidt(sigma: T, schmidt: T) -> Result<Self> {
        if !(sigma > T::zero()) {
            return Err(invalid("sigma", "must be positive"));
        }
        if !(schmidt >= T::one()) {
            return Err(invalid("K", "Schmidt number must be >= 1"));
        }
        Ok(Self {
            sigma,
            schmidt,
            sigma_cond: sigma / schmidt.sqrt(),
        })
    }

    /// Correlation coefficient between one party's coordinate and the
    /// partner's (after momentum inversion): `sqrt(1 - 1/K)`.
    pub fn correlation(&self) -> T {
        let r = self.sigma_cond / self.sigma;
        (T::one() - r * r).max(T::zero()).sqrt()
    }

    /// Same stats with a different conditional width (and the Schmidt number
    /// that goes with it).
    pub fn with_sigma_cond(&self, sigma_cond: T) -> Self {
        let r = self.sigma / sigma_cond;
        Self {
            sigma: self.sigma,
            schmidt: r * r,
            sigma_cond,
        }
    }
}

/// Beam statistics in detector coordinates for one basis. `scale` maps source
/// coordinates of that basis (µm or 1/µm) to detector µm.
pub fn beam_stats<T: Scalar>(p: &SourceParams<T>, basis: Basis, scale: T) -> Result<BeamStats<T>> {
    if !(scale > T::zero() && scale.is_finite()) {
        return Err(invalid("scale", format!("must be positive, got {scale}")));
    }
    let (w, b) = (p.w0, p.b);
    let (var, cond_var) = match basis {
        Basis::Position => ((w * w + b * b) * T::c(0.25), w * w * b * b / (w * w + b * b)),
        Basis::Momentum => {
            let (iw, ib) = (w.recip(), b.recip());
            ((iw * iw + ib * ib) * T::c(0.25), (w * w + b * b).recip())
        }
    };
    Ok(BeamStats {
        sigma: var.sqrt() * scale,
        schmidt: schmidt_number(p),
        sigma_cond: cond_var.sqrt() * scale,
    })
}

/// Isotropic 2D marginal density `exp(-r^2 / 2 sigma^2) / (2 pi sigma^2)`.
pub fn marginal_density<T: Scalar>(stats: &BeamStats<T>, r: T) -> T {
    let s2 = stats.sigma * stats.sigma;
    (-(r * r) / (T::c(2.0) * s2)).exp() / (T::TAU() * s2)
}

/// Probability mass inside radius `r`: `1 - exp(-r^2 / 2 sigma^2)`.
pub fn radial_cdf<T: Scalar>(stats: &BeamStats<T>, r: T) -> T {
    -(-(r * r) / (T::c(2.0) * stats.sigma * stats.sigma)).exp_m1()
}

/// One photon pair with both parties' measured coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonPair<T> {
    pub alice: [T; 2],
    pub bob: [T; 2],
    pub alice_basis: Basis,
    pub bob_basis: Basis,
}

/// Draws one pair in source coordinates of each party's basis.
///
/// Matched bases sample the sum and difference coordinates independently
/// (positions correlated, momenta anti-correlated); mismatched bases draw each
/// photon from its own marginal.
pub fn sample_pair<T: Scalar, R: Rng + ?Sized>(
    p: &SourceParams<T>,
    alice_basis: Basis,
    bob_basis: Basis,
    rng: &mut R,
) -> PhotonPair<T> {
    let half = T::c(0.5);
    let mut alice = [T::zero(); 2];
    let mut bob = [T::zero(); 2];
    if alice_basis == bob_basis {
        let (s_sd, d_sd) = p.sum_diff_sd(alice_basis);
        for axis in 0..2 {
            let s = T::std_normal(rng) * s_sd;
            let d = T::std_normal(rng) * d_sd;
            alice[axis] = (s + d) * half;
            bob[axis] = (s - d) * half;
        }
    } else {
        let sa = p.marginal_sd(alice_basis);
        let sb = p.marginal_sd(bob_basis);
        for axis in 0..2 {
            alice[axis] = T::std_normal(rng) * sa;
            bob[axis] = T::std_normal(rng) * sb;
        }
    }
    PhotonPair {
        alice,
        bob,
        alice_basis,
        bob_basis,
    }
}

/// Per-basis factors mapping source coordinates to detector µm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisScales<T> {
    pub position: T,
    pub momentum: T,
}

impl<T: Scalar> BasisScales<T> {
    pub fn unit() -> Self {
        Self {
            position: T::one(),
            momentum: T::one(),
        }
    }

    /// Scales that give both bases the same detector-frame marginal width
    /// `target_sigma`.
    pub fn matched(p: &SourceParams<T>, target_sigma: T) -> Self {
        Self {
            position: target_sigma / p.marginal_sd(Basis::Position),
            momentum: target_sigma / p.marginal_sd(Basis::Momentum),
        }
    }

    pub fn get(&self, basis: Basis) -> T {
        match basis {
            Basis::Position => self.position,
            Basis::Momentum => self.momentum,
        }
    }
}

/// Estimates the conditional width from matched-basis pairs.
///
/// Bob's coordinate is sign-corrected (negated for momentum), then the
/// residual spread of Bob about the regression on Alice is measured:
/// `sqrt(var(bob) * (1 - r^2))`, pooled over both axes. This equals the
/// conditional standard deviation for any Schmidt number.
pub fn conditional_width_estimate<T: Scalar>(pairs: &[PhotonPair<T>]) -> Result<T> {
    const MIN_PAIRS: usize = 1000;
    let matched: Vec<&PhotonPair<T>> = pairs
        .iter()
        .filter(|p| p.alice_basis == p.bob_basis)
        .collect();
    if matched.len() < MIN_PAIRS {
        return Err(Error::InsufficientSamples {
            needed: MIN_PAIRS,
            got: matched.len(),
        });
    }
    let basis = matched[0].alice_basis;
    if matched.iter().any(|p| p.alice_basis != basis) {
        return Err(Error::MixedBases);
    }
    let sign = match basis {
        Basis::Position => 1.0,
        Basis::Momentum => -1.0,
    };
    // Accumulate in f64 regardless of T; the sums run over many samples.
    let mut n = 0.0;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &matched {
        for axis in 0..2 {
            let x = p.alice[axis].f64();
            let y = sign * p.bob[axis].f64();
            n += 1.0;
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
    }
    let vx = sxx / n - (sx / n).powi(2);
    let vy = syy / n - (sy / n).powi(2);
    let cxy = sxy / n - (sx / n) * (sy / n);
    let residual = (vy - cxy * cxy / vx).max(0.0);
    Ok(T::c(residual.sqrt()))
}
