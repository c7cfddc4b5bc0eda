//! Secure-key-rate arithmetic and QDER extraction from error matrices.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::biphoton::Basis;
use crate::error::{Error, Result};
use crate::scalar::{xlnx, Scalar};

/// Asymptotic secure key rate in bits per photon:
/// `log2 d + 2 eps log2(eps/(d-1)) + 2 (1-eps) log2(1-eps)`.
///
/// Negative values are returned as-is.
pub fn secure_rate<T: Scalar>(d: usize, eps: T) -> Result<T> {
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    if !(eps >= T::zero() && eps < T::one()) {
        return Err(Error::ErrorRateOutOfRange(eps.f64()));
    }
    let two = T::c(2.0);
    let dm1 = T::from_usize_(d - 1);
    // eps*ln(eps/(d-1)) = eps*ln(eps) - eps*ln(d-1)
    let err_term = xlnx(eps) - eps * dm1.ln();
    let ok_term = xlnx(T::one() - eps);
    let nats = two * (err_term + ok_term);
    Ok(T::from_usize_(d).log2() + nats / T::LN_2())
}

/// `p * secure_rate(d, eps)`.
pub fn modified_rate<T: Scalar>(d: usize, eps: T, p: T) -> Result<T> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(crate::error::invalid("p", format!("kept fraction {p} outside [0, 1]")));
    }
    Ok(p * secure_rate(d, eps)?)
}

/// Alice/Bob basis combination of an error-matrix block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasisPair {
    XX,
    XP,
    PX,
    PP,
}

impl BasisPair {
    pub const ALL: [BasisPair; 4] = [BasisPair::XX, BasisPair::XP, BasisPair::PX, BasisPair::PP];

    pub fn new(alice: Basis, bob: Basis) -> Self {
        Self::ALL[alice.index() * 2 + bob.index()]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bases(self) -> (Basis, Basis) {
        let i = self.index();
        (
            Basis::from_index(i / 2).unwrap(),
            Basis::from_index(i % 2).unwrap(),
        )
    }

    pub fn is_matched(self) -> bool {
        matches!(self, BasisPair::XX | BasisPair::PP)
    }

    pub fn label(self) -> &'static str {
        match self {
            BasisPair::XX => "xx",
            BasisPair::XP => "xp",
            BasisPair::PX => "px",
            BasisPair::PP => "pp",
        }
    }
}

/// Per-frame moments of a block's off-diagonal mass `O_n` and total mass
/// `T_n`, used for the QDER standard error (ratio estimator).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockMoments {
    pub n: f64,
    pub sum_off: f64,
    pub sum_total: f64,
    pub sum_off_sq: f64,
    pub sum_total_sq: f64,
    pub sum_off_total: f64,
}

impl BlockMoments {
    /// Standard error of `sum_off / sum_total` by the delta method.
    pub fn ratio_standard_error(&self) -> Option<f64> {
        if self.n < 2.0 || self.sum_total <= 0.0 {
            return None;
        }
        let n = self.n;
        let mean_t = self.sum_total / n;
        let r = self.sum_off / self.sum_total;
        // var(O - r T) from raw moments
        let mean_o = self.sum_off / n;
        let e2 = (self.sum_off_sq - 2.0 * r * self.sum_off_total + r * r * self.sum_total_sq) / n;
        let m = mean_o - r * mean_t;
        let var = (e2 - m * m).max(0.0) * n / (n - 1.0);
        Some((var / n).sqrt() / mean_t)
    }
}

/// Coincidence probabilities for the four basis pairs, each `d x d`
/// (row = Alice macropixel, column = Bob macropixel), normalized per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix<T> {
    pub d: usize,
    pub blocks: [Vec<T>; 4],
    pub frames: usize,
    pub background_corrected: bool,
    /// Variance of each entry's per-frame mean, when known.
    pub entry_variance: Option<[Vec<T>; 4]>,
    /// Per-frame moments for the QDER standard error, when known.
    pub moments: Option<[BlockMoments; 4]>,
}

impl<T: Scalar> ErrorMatrix<T> {
    /// Matrix from explicit blocks (row-major `d x d` each).
    pub fn from_blocks(d: usize, blocks: [Vec<T>; 4]) -> Result<Self> {
        for b in &blocks {
            if b.len() != d * d {
                return Err(crate::error::invalid("blocks", "each block must hold d*d entries"));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(crate::error::invalid("blocks", "entries must be finite"));
            }
        }
        Ok(Self {
            d,
            blocks,
            frames: 0,
            background_corrected: false,
            entry_variance: None,
            moments: None,
        })
    }

    pub fn block(&self, pair: BasisPair) -> &[T] {
        &self.blocks[pair.index()]
    }

    pub fn get(&self, pair: BasisPair, i: usize, j: usize) -> T {
        self.blocks[pair.index()][i * self.d + j]
    }

    pub fn block_mass(&self, pair: BasisPair) -> T {
        self.block(pair).iter().fold(T::zero(), |s, &v| s + v)
    }

    pub fn block_trace(&self, pair: BasisPair) -> T {
        (0..self.d).fold(T::zero(), |s, i| s + self.get(pair, i, i))
    }

    /// Entries of matched-basis blocks lying more than five standard errors
    /// below zero: `(pair, i, j)`.
    pub fn negative_outliers(&self) -> Vec<(BasisPair, usize, usize)> {
        let Some(var) = &self.entry_variance else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for pair in [BasisPair::XX, BasisPair::PP] {
            let b = self.block(pair);
            let v = &var[pair.index()];
            for (idx, (&x, &s2)) in b.iter().zip(v).enumerate() {
                if x < T::zero() && x < -T::c(5.0) * s2.sqrt() {
                    out.push((pair, idx / self.d, idx % self.d));
                }
            }
        }
        out
    }

    /// Writes one block as CSV, `d` rows of `d` values.
    pub fn write_block_csv<W: Write>(&self, pair: BasisPair, mut w: W) -> io::Result<()> {
        for row in self.block(pair).chunks(self.d) {
            let line: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Power-law display scaling `sign(v) |v / max|^gamma`, for plots that
    /// need to show small off-diagonal entries.
    pub fn display_scaled(&self, pair: BasisPair, gamma: T) -> Vec<T> {
        let b = self.block(pair);
        let max = b.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if max == T::zero() {
            return vec![T::zero(); b.len()];
        }
        b.iter()
            .map(|&v| v.signum() * (v.abs() / max).powf(gamma))
            .collect()
    }
}

/// Per-basis and combined quantum dit error ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Qder<T> {
    pub position: T,
    pub momentum: T,
    pub combined: T,
    pub position_se: Option<T>,
    pub momentum_se: Option<T>,
    pub combined_se: Option<T>,
}

/// QDER per matched basis, `1 - Tr(E)/sum(E)` after normalizing each block by
/// its total mass; the combined value is the mass-weighted mean.
pub fn qder<T: Scalar>(e: &ErrorMatrix<T>) -> Result<Qder<T>> {
    let mut eps = [T::zero(); 2];
    let mut mass = [T::zero(); 2];
    let mut se = [None, None];
    for (slot, (pair, name)) in [(BasisPair::XX, "xx"), (BasisPair::PP, "pp")]
        .into_iter()
        .enumerate()
    {
        let total = e.block_mass(pair);
        if !(total > T::zero()) {
            return Err(Error::ZeroMassBlock(name));
        }
        eps[slot] = T::one() - e.block_trace(pair) / total;
        mass[slot] = total;
        se[slot] = e
            .moments
            .as_ref()
            .and_then(|m| m[pair.index()].ratio_standard_error())
            .map(T::c);
    }
    let total = mass[0] + mass[1];
    let combined = (eps[0] * mass[0] + eps[1] * mass[1]) / total;
    let combined_se = e.moments.as_ref().and_then(|m| {
        let mut merged = m[BasisPair::XX.index()];
        let pp = m[BasisPair::PP.index()];
        merged.sum_off += pp.sum_off;
        merged.sum_total += pp.sum_total;
        merged.sum_off_sq += pp.sum_off_sq;
        merged.sum_total_sq += pp.sum_total_sq;
        merged.sum_off_total += pp.sum_off_total;
        merged.ratio_standard_error().map(T::c)
    });
    Ok(Qder {
        position: eps[0],
        momentum: eps[1],
        combined,
        position_se: se[0],
        momentum_se: se[1],
        combined_se,
    })
}

/// Error rates, kept fraction and the resulting key rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport<T> {
    pub d: usize,
    pub epsilon: EpsilonSummary<T>,
    pub p: T,
    #[serde(rename = "R")]
    pub rate: T,
    #[serde(rename = "Rmod")]
    pub rate_mod: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary<T> {
    pub position: T,
    pub momentum: T,
    pub combined: T,
}

impl<T: Scalar> EpsilonSummary<T> {
    pub fn uniform(eps: T) -> Self {
        Self {
            position: eps,
            momentum: eps,
            combined: eps,
        }
    }
}

impl<T: Scalar> RateReport<T> {
    /// Report for dimension `d`, combined error `eps.combined` and kept
    /// fraction `p`. A single macropixel carries no key (`R = 0`).
    pub fn new(d: usize, epsilon: EpsilonSummary<T>, p: T) -> Result<Self> {
        let rate = if d < 2 { T::zero() } else { secure_rate(d, epsilon.combined)? };
        if !(p >= T::zero() && p <= T::one()) {
            return Err(crate::error::invalid("p", format!("kept fraction {p} outside [0, 1]")));
        }
        Ok(Self {
            d,
            epsilon,
            p,
            rate,
            rate_mod: p * rate,
        })
    }
}

impl<T: Scalar> From<Qder<T>> for EpsilonSummary<T> {
    fn from(q: Qder<T>) -> Self {
        Self {
            position: q.position,
            momentum: q.momentum,
            combined: q.combined,
        }
    }
}
