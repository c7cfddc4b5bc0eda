//! The fryum wheel: a central disk plus concentric annuli cut into
//! equiprobable angular sectors, with discard bands along every internal
//! boundary.
//!
//! Ring `k` spans `[r_k, r_{k+1})` and holds `a_k` sectors. With
//! `c_k = a_0 + ... + a_{k-1}`, the radii satisfy
//! `1 - exp(-r_k^2 / 2 sigma^2) = c_k * alpha`, where the probability per
//! macropixel is `alpha = 1 / (c_N + a_aux)` and the fractional auxiliary
//! count `a_aux` accounts for the mass beyond the aperture.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biphoton::BeamStats;
use crate::error::{invalid, Error, Result};
use crate::quad::integrate;
use crate::root::find_root;
use crate::scalar::Scalar;

/// Angular counts `(a_0 = 1, a_1, ..., a_{N-1})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AngularSpec(Vec<usize>);

impl AngularSpec {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidAngularSpec("no rings".into()));
        }
        if counts[0] != 1 {
            return Err(Error::InvalidAngularSpec(format!(
                "innermost ring must be a single disk, got a_0 = {}",
                counts[0]
            )));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidAngularSpec("zero sector count".into()));
        }
        Ok(Self(counts))
    }

    /// Parses `"1,6,8,21"` (spaces and surrounding parentheses allowed).
    pub fn parse(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let counts = inner
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidAngularSpec(format!("`{}`: {e}", t.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn rings(&self) -> usize {
        self.0.len()
    }

    /// Number of macropixels `c_N`.
    pub fn dimension(&self) -> usize {
        self.0.iter().sum()
    }

    /// Cumulative counts `c_0 = 0, c_1, ..., c_N`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.0.len() + 1);
        out.push(0);
        let mut acc = 0;
        for &a in &self.0 {
            acc += a;
            out.push(acc);
        }
        out
    }
}

impl std::fmt::Display for AngularSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Macropixel {
    pub ring: usize,
    pub sector: usize,
    pub linear: usize,
}

/// Label of a detector point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacropixelId {
    Macro(Macropixel),
    Discarded,
    OutsideAperture,
}

pub const LABEL_DISCARDED: u16 = 65534;
pub const LABEL_OUTSIDE: u16 = 65535;

impl MacropixelId {
    pub fn linear(self) -> Option<usize> {
        match self {
            MacropixelId::Macro(m) => Some(m.linear),
            _ => None,
        }
    }

    /// 16-bit label-map code; sentinels use the top two values.
    pub fn code(self) -> u16 {
        match self {
            MacropixelId::Macro(m) => m.linear as u16,
            MacropixelId::Discarded => LABEL_DISCARDED,
            MacropixelId::OutsideAperture => LABEL_OUTSIDE,
        }
    }
}

/// Which party's events are subject to the discard bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DiscardMode {
    #[default]
    Both,
    AliceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Alice,
    Bob,
}

/// A built fryum wheel. Immutable; band and equalization steps return new
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation<T> {
    spec: AngularSpec,
    offsets: Vec<usize>,
    radii: Vec<T>,
    alpha: T,
    a_aux: T,
    sector_phase: Vec<T>,
    stats: BeamStats<T>,
    band_multiplier: T,
    base_half_width: T,
    widening: Vec<T>,
    mode: DiscardMode,
}

fn gauss_tail<T: Scalar>(r: T, sigma: T) -> T {
    if r.is_infinite() {
        return T::zero();
    }
    (-(r * r) / (T::c(2.0) * sigma * sigma)).exp()
}

impl<T: Scalar> Segmentation<T> {
    /// Equiprobable segmentation without bands for aperture radius `r_ap`
    /// (may be infinite, giving `a_aux = 0`).
    pub fn build(spec: AngularSpec, stats: BeamStats<T>, r_ap: T) -> Result<Self> {
        if !(r_ap > T::zero()) {
            return Err(invalid("r_ap", format!("aperture radius must be positive, got {r_ap}")));
        }
        let sigma = stats.sigma;
        if !(sigma > T::zero() && sigma.is_finite()) {
            return Err(invalid("sigma", "must be positive and finite"));
        }
        let c_n = T::from_usize_(spec.dimension());
        let a_aux = if r_ap.is_infinite() {
            T::zero()
        } else {
            let denom = (r_ap * r_ap / (T::c(2.0) * sigma * sigma)).exp_m1();
            let a = c_n / denom;
            if !(a.is_finite() && a > T::zero()) {
                return Err(Error::ApertureTooSmall { r_ap: r_ap.f64() });
            }
            a
        };
        let alpha = (c_n + a_aux).recip();
        let offsets = spec.offsets();
        let n = spec.rings();
        let mut radii = Vec::with_capacity(n + 1);
        radii.push(T::zero());
        for &c in &offsets[1..n] {
            let mass = T::from_usize_(c) * alpha;
            if mass >= T::one() {
                return Err(Error::RadiusUndefined(mass.f64()));
            }
            radii.push((-T::c(2.0) * sigma * sigma * (-mass).ln_1p()).sqrt());
        }
        radii.push(r_ap);
        for w in radii.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidSegmentation("radii not strictly increasing".into()));
            }
        }
        let d = spec.dimension();
        Ok(Self {
            sector_phase: vec![T::zero(); n],
            spec,
            offsets,
            radii,
            alpha,
            a_aux,
            stats,
            band_multiplier: T::zero(),
            base_half_width: T::zero(),
            widening: vec![T::zero(); d],
            mode: DiscardMode::Both,
        })
    }

    /// Same geometry with per-ring angular offsets (radians).
    pub fn with_sector_phase(mut self, phase: Vec<T>) -> Result<Self> {
        if phase.len() != self.rings() {
            return Err(invalid("sectorPhase", "one entry per ring required"));
        }
        if phase.iter().any(|p| !p.is_finite()) {
            return Err(invalid("sectorPhase", "entries must be finite"));
        }
        self.sector_phase = phase;
        Ok(self)
    }

    pub fn with_discard_mode(mut self, mode: DiscardMode) -> Self {
        self.mode = mode;
        self
    }

    /// Adds a band of total width `k * sigma_cond`, split evenly across every
    /// internal boundary (radial circles and spokes, not the aperture).
    /// Resets any earlier equalization.
    pub fn apply_discard_bands(&self, k: T) -> Result<Self> {
        if !(k >= T::zero() && k.is_finite()) {
            return Err(invalid("bandMultiplier", format!("must be >= 0, got {k}")));
        }
        let mut out = self.clone();
        out.band_multiplier = k;
        out.base_half_width = k * self.stats.sigma_cond * T::c(0.5);
        out.widening = vec![T::zero(); self.dimension()];
        for ring in 0..out.rings() {
            if out.ring_sector_mass(ring, out.base_half_width) <= T::zero() {
                return Err(Error::EmptyKeptRegion {
                    linear: out.offsets[ring],
                });
            }
        }
        Ok(out)
    }

    /// Widens each ring's own side of its boundaries until every macropixel
    /// keeps the same probability, the smallest kept value before the step.
    pub fn equalize(&self) -> Result<Self> {
        let g0 = self.base_half_width;
        let masses: Vec<T> = (0..self.rings())
            .map(|k| self.ring_sector_mass(k, self.half_width_of_ring(k)))
            .collect();
        let target = masses.iter().copied().fold(T::infinity(), T::min);
        if !(target > T::zero()) {
            return Err(Error::EqualizationFailed {
                ring: 0,
                reason: "a macropixel keeps no probability".into(),
            });
        }
        let mut out = self.clone();
        let rel = if T::EPS > T::c(1e-10) { T::c(1e-5) } else { T::c(1e-10) };
        for (ring, &m) in masses.iter().enumerate() {
            let g = if (m - target).abs() <= rel * target {
                self.half_width_of_ring(ring)
            } else {
                let g_max = self.ring_closing_width(ring);
                let sigma = self.stats.sigma;
                let g = find_root(
                    |g| self.ring_sector_mass(ring, g) - target,
                    g0,
                    g_max,
                    sigma * T::EPS * T::c(16.0),
                )
                .map_err(|e| Error::EqualizationFailed {
                    ring,
                    reason: e.to_string(),
                })?;
                let got = self.ring_sector_mass(ring, g);
                if (got - target).abs() > T::c(1e-6).max(T::EPS * T::c(1000.0)) * target {
                    return Err(Error::EqualizationFailed {
                        ring,
                        reason: format!("kept {got} vs target {target}"),
                    });
                }
                g
            };
            for s in 0..self.spec.counts()[ring] {
                out.widening[self.offsets[ring] + s] = g - g0;
            }
        }
        Ok(out)
    }

    pub fn spec(&self) -> &AngularSpec {
        &self.spec
    }

    pub fn rings(&self) -> usize {
        self.spec.rings()
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    /// `r_0 = 0, r_1, ..., r_N = r_ap`.
    pub fn radii(&self) -> &[T] {
        &self.radii
    }

    pub fn r_ap(&self) -> T {
        self.radii[self.rings()]
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn a_aux(&self) -> T {
        self.a_aux
    }

    pub fn stats(&self) -> &BeamStats<T> {
        &self.stats
    }

    pub fn sector_phase(&self) -> &[T] {
        &self.sector_phase
    }

    pub fn band_multiplier(&self) -> T {
        self.band_multiplier
    }

    pub fn discard_mode(&self) -> DiscardMode {
        self.mode
    }

    /// Band half-width shared by all boundaries before equalization.
    pub fn base_half_width(&self) -> T {
        self.base_half_width
    }

    /// Extra one-sided widening per macropixel from equalization.
    pub fn widening(&self) -> &[T] {
        &self.widening
    }

    /// Own-side band half-width of a macropixel.
    pub fn half_width(&self, linear: usize) -> T {
        self.base_half_width + self.widening[linear]
    }

    fn half_width_of_ring(&self, ring: usize) -> T {
        self.half_width(self.offsets[ring])
    }

    pub fn macropixel(&self, linear: usize) -> Option<Macropixel> {
        if linear >= self.dimension() {
            return None;
        }
        let ring = self.offsets.partition_point(|&c| c <= linear) - 1;
        Some(Macropixel {
            ring,
            sector: linear - self.offsets[ring],
            linear,
        })
    }

    pub fn linear_index(&self, ring: usize, sector: usize) -> Option<usize> {
        let a = *self.spec.counts().get(ring)?;
        (sector < a).then(|| self.offsets[ring] + sector)
    }

    /// In-aperture probability `c_N * alpha`.
    pub fn in_aperture_mass(&self) -> T {
        T::from_usize_(self.dimension()) * self.alpha
    }

    /// Radial extent of the ring's kept region for own-side half-width `g`.
    fn kept_radial_range(&self, ring: usize, g: T) -> (T, T) {
        let n = self.rings();
        let lo = if ring == 0 { T::zero() } else { self.radii[ring] + g };
        let hi = if ring + 1 < n {
            self.radii[ring + 1] - g
        } else {
            self.radii[n]
        };
        (lo, hi)
    }

    /// Half-width at which the ring's kept region vanishes.
    fn ring_closing_width(&self, ring: usize) -> T {
        let n = self.rings();
        let r = &self.radii;
        if ring == 0 {
            r[1]
        } else if ring + 1 < n {
            (r[ring + 1] - r[ring]) * T::c(0.5)
        } else if r[n].is_finite() {
            r[n] - r[ring]
        } else {
            r[ring] + T::c(40.0) * self.stats.sigma
        }
    }

    /// Kept probability of one sector of `ring` when all of its boundaries
    /// are trimmed by `g` on its side.
    fn ring_sector_mass(&self, ring: usize, g: T) -> T {
        let sigma = self.stats.sigma;
        let a = self.spec.counts()[ring];
        let (lo, hi) = self.kept_radial_range(ring, g);
        if hi <= lo {
            return T::zero();
        }
        if a == 1 || g <= T::zero() {
            return (gauss_tail(lo, sigma) - gauss_tail(hi, sigma)) / T::from_usize_(a);
        }
        let half_angle = T::PI() / T::from_usize_(a);
        let lo = lo.max(g / half_angle.sin());
        if hi <= lo {
            return T::zero();
        }
        let radial = (gauss_tail(lo, sigma) - gauss_tail(hi, sigma)) / T::from_usize_(a);
        let s2 = sigma * sigma;
        let upper = hi.min(lo + T::c(15.0) * sigma);
        let rel = T::EPS * T::c(500.0);
        let spoke = integrate(
            |r: T| r / s2 * gauss_tail(r, sigma) * (g / r).min(T::one()).asin(),
            lo,
            upper,
            T::EPS * T::c(1e-3),
            rel,
            8,
        );
        (radial - spoke.value / T::PI()).max(T::zero())
    }

    /// Kept probability of a macropixel.
    pub fn kept_probability(&self, id: MacropixelId) -> Result<T> {
        let m = match id {
            MacropixelId::Macro(m) => m,
            _ => return Err(Error::SentinelLabel),
        };
        Ok(self.ring_sector_mass(m.ring, self.half_width(m.linear)))
    }

    /// Kept probability of every macropixel, in linear order.
    pub fn kept_probabilities(&self) -> Vec<T> {
        (0..self.dimension())
            .map(|i| {
                let m = self.macropixel(i).unwrap();
                self.ring_sector_mass(m.ring, self.half_width(i))
            })
            .collect()
    }

    /// Total kept probability `p`.
    pub fn total_kept(&self) -> T {
        self.kept_probabilities()
            .into_iter()
            .fold(T::zero(), |s, v| s + v)
    }

    /// Probability inside the aperture that falls in a band.
    pub fn discarded_mass(&self) -> T {
        self.in_aperture_mass() - self.total_kept()
    }

    fn sector_width(&self, ring: usize) -> T {
        T::TAU() / T::from_usize_(self.spec.counts()[ring])
    }

    /// Macropixel whose raw (band-free) region contains the point, and the
    /// angular offset from its nearest spoke.
    fn locate(&self, p: [T; 2]) -> Option<(Macropixel, T, T)> {
        let r = p[0].hypot(p[1]);
        let n = self.rings();
        if !(r <= self.radii[n]) {
            return None;
        }
        let ring = self.radii[1..n].partition_point(|&rk| rk <= r);
        let a = self.spec.counts()[ring];
        if a == 1 {
            let m = Macropixel {
                ring,
                sector: 0,
                linear: self.offsets[ring],
            };
            return Some((m, r, T::infinity()));
        }
        let w = self.sector_width(ring);
        let mut theta = (p[1].atan2(p[0]) - self.sector_phase[ring]) % T::TAU();
        if theta < T::zero() {
            theta = theta + T::TAU();
        }
        let sector = (theta / w).floor().to_usize().unwrap_or(0).min(a - 1);
        let within = theta - T::from_usize_(sector) * w;
        let delta = within.min(w - within).max(T::zero());
        let m = Macropixel {
            ring,
            sector,
            linear: self.offsets[ring] + sector,
        };
        Some((m, r, delta))
    }

    /// Label ignoring discard bands.
    pub fn classify_raw(&self, p: [T; 2]) -> MacropixelId {
        match self.locate(p) {
            Some((m, _, _)) => MacropixelId::Macro(m),
            None => MacropixelId::OutsideAperture,
        }
    }

    /// Label with discard bands applied.
    pub fn classify(&self, p: [T; 2]) -> MacropixelId {
        let Some((m, r, delta)) = self.locate(p) else {
            return MacropixelId::OutsideAperture;
        };
        let g = self.half_width(m.linear);
        if g <= T::zero() {
            return MacropixelId::Macro(m);
        }
        let (lo, hi) = self.kept_radial_range(m.ring, g);
        if r < lo || r > hi {
            return MacropixelId::Discarded;
        }
        // delta <= pi/2 always holds for two or more sectors, and r >= r_k + g
        // puts the perpendicular foot on the spoke segment or farther out than
        // its inner end, so r sin(delta) is the distance to the spoke.
        if delta.is_finite() && r * delta.sin() < g {
            return MacropixelId::Discarded;
        }
        MacropixelId::Macro(m)
    }

    /// Label for one party under the segmentation's discard mode.
    pub fn classify_party(&self, party: Party, p: [T; 2]) -> MacropixelId {
        match (party, self.mode) {
            (Party::Bob, DiscardMode::AliceOnly) => self.classify_raw(p),
            _ => self.classify(p),
        }
    }

    /// Macropixels sharing a boundary of positive length, per macropixel.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let d = self.dimension();
        let counts = self.spec.counts();
        let mut adj = vec![Vec::new(); d];
        let arc = |ring: usize, s: usize| -> (f64, f64) {
            let w = std::f64::consts::TAU / counts[ring] as f64;
            let start = self.sector_phase[ring].f64() + s as f64 * w;
            (start, start + w)
        };
        for ring in 0..self.rings() {
            let a = counts[ring];
            for s in 0..a {
                let i = self.offsets[ring] + s;
                if a >= 2 {
                    for t in [(s + 1) % a, (s + a - 1) % a] {
                        let j = self.offsets[ring] + t;
                        if j != i && !adj[i].contains(&j) {
                            adj[i].push(j);
                        }
                    }
                }
                if ring + 1 < self.rings() {
                    let (a0, a1) = arc(ring, s);
                    for t in 0..counts[ring + 1] {
                        let j = self.offsets[ring + 1] + t;
                        let (b0, b1) = arc(ring + 1, t);
                        let overlaps = a == 1
                            || counts[ring + 1] == 1
                            || (-1..=1).any(|m| {
                                let shift = m as f64 * std::f64::consts::TAU;
                                (a1.min(b1 + shift) - a0.max(b0 + shift)) > 1e-12
                            });
                        if overlaps {
                            adj[i].push(j);
                            adj[j].push(i);
                        }
                    }
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Mean number of adjacent macropixels.
    pub fn mean_neighbors(&self) -> T {
        let adj = self.adjacency();
        let total: usize = adj.iter().map(Vec::len).sum();
        T::from_usize_(total) / T::from_usize_(self.dimension())
    }

    /// Crosstalk bound without sampling: the one-sided Gaussian tail beyond
    /// the band, `erfc(k / sqrt 2)`, per adjacent macropixel.
    pub fn fast_crosstalk(&self) -> T {
        let d = self.dimension();
        if d < 2 {
            return T::zero();
        }
        let tail = statrs::function::erf::erfc(self.band_multiplier.f64() / std::f64::consts::SQRT_2);
        let cap = (d as f64 - 1.0) / d as f64 * 0.999;
        T::c((tail * self.mean_neighbors().f64()).min(cap))
    }

    /// Monte Carlo crosstalk matrix: Alice is drawn from each macropixel's
    /// kept region (weighted by its kept probability), Bob from the
    /// conditional Gaussian about the correlated image of Alice's point.
    pub fn predicted_crosstalk(&self, opts: &CrosstalkOptions) -> Crosstalk<T> {
        let d = self.dimension();
        let per = (opts.samples / d).max(1);
        let rho = self.stats.correlation();
        let sc = self.stats.sigma_cond;
        let sigma = self.stats.sigma;
        let rows: Vec<Vec<T>> = (0..d)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![T::zero(); d];
                let m = self.macropixel(i).unwrap();
                let g = self.half_width(i);
                let (lo, hi) = self.kept_radial_range(m.ring, g);
                if hi <= lo {
                    return row;
                }
                let (t_lo, t_hi) = (gauss_tail(lo, sigma), gauss_tail(hi, sigma));
                let a = self.spec.counts()[m.ring];
                let w = (t_lo - t_hi) / T::from_usize_(a) / T::from_usize_(per);
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(i as u64);
                let width = self.sector_width(m.ring);
                let start = self.sector_phase[m.ring] + T::from_usize_(m.sector) * width;
                for _ in 0..per {
                    let u = T::unit(&mut rng);
                    let tail = t_lo - u * (t_lo - t_hi);
                    let r = (-T::c(2.0) * sigma * sigma * tail.ln()).sqrt();
                    let theta = start + T::unit(&mut rng) * width;
                    let x = [r * theta.cos(), r * theta.sin()];
                    if self.classify_party(Party::Alice, x).linear() != Some(i) {
                        continue;
                    }
                    let y = [
                        rho * x[0] + sc * T::std_normal(&mut rng),
                        rho * x[1] + sc * T::std_normal(&mut rng),
                    ];
                    if let Some(j) = self.classify_party(Party::Bob, y).linear() {
                        row[j] = row[j] + w;
                    }
                }
                row
            })
            .collect();
        let matrix: Vec<T> = rows.into_iter().flatten().collect();
        let total = matrix.iter().fold(T::zero(), |s, &v| s + v);
        let trace = (0..d).fold(T::zero(), |s, i| s + matrix[i * d + i]);
        let epsilon = if total > T::zero() {
            T::one() - trace / total
        } else {
            T::zero()
        };
        Crosstalk {
            d,
            matrix,
            epsilon,
            joint_kept: total,
            samples: per * d,
        }
    }

    /// Labels every pixel center of `grid`.
    pub fn rasterize(&self, grid: &PixelGrid<T>) -> Result<LabelMap> {
        if !grid.covers(self.r_ap()) {
            return Err(Error::Grid(format!(
                "grid does not cover the aperture of radius {}",
                self.r_ap()
            )));
        }
        if self.dimension() >= LABEL_DISCARDED as usize {
            return Err(Error::Grid("too many macropixels for 16-bit labels".into()));
        }
        let mut labels = vec![0u16; grid.width * grid.height];
        labels
            .par_chunks_mut(grid.width)
            .enumerate()
            .for_each(|(row, out)| {
                for (col, v) in out.iter_mut().enumerate() {
                    *v = self.classify(grid.pixel_center(col, row)).code();
                }
            });
        Ok(LabelMap {
            width: grid.width,
            height: grid.height,
            labels,
            coarse: grid.pitch > self.stats.sigma_cond,
        })
    }

    /// Serializable description.
    pub fn to_doc(&self) -> SegmentationDoc<T> {
        SegmentationDoc {
            a: self.spec.counts().to_vec(),
            a_aux: self.a_aux,
            alpha: self.alpha,
            radii: self.radii.clone(),
            band_multiplier: self.band_multiplier,
            widening: self.widening.clone(),
            sector_phase: self.sector_phase.clone(),
            sigma: self.stats.sigma,
            sigma_cond: self.stats.sigma_cond,
            mode: self.mode,
            d: self.dimension(),
        }
    }

    /// Rebuilds a segmentation and checks it against the stored radii.
    pub fn from_doc(doc: &SegmentationDoc<T>) -> Result<Self> {
        let spec = AngularSpec::new(doc.a.clone())?;
        if doc.d != spec.dimension() {
            return Err(Error::InvalidSegmentation(format!(
                "d = {} but A sums to {}",
                doc.d,
                spec.dimension()
            )));
        }
        if doc.radii.len() != spec.rings() + 1 {
            return Err(Error::InvalidSegmentation("R_um must hold N + 1 radii".into()));
        }
        if doc.widening.len() != spec.dimension() {
            return Err(Error::InvalidSegmentation("one widening per macropixel required".into()));
        }
        if !(doc.sigma_cond > T::zero() && doc.sigma_cond < doc.sigma) {
            return Err(Error::InvalidSegmentation("need 0 < sigmaCond < sigma".into()));
        }
        let ratio = doc.sigma / doc.sigma_cond;
        let stats = BeamStats {
            sigma: doc.sigma,
            schmidt: ratio * ratio,
            sigma_cond: doc.sigma_cond,
        };
        let r_ap = *doc.radii.last().unwrap();
        let mut seg = Self::build(spec, stats, r_ap)?
            .with_sector_phase(doc.sector_phase.clone())?
            .apply_discard_bands(doc.band_multiplier)?
            .with_discard_mode(doc.mode);
        let tol = T::c(1e-9);
        for (a, b) in seg.radii.iter().zip(&doc.radii) {
            if (*a - *b).abs() > tol * (T::one() + b.abs()) {
                return Err(Error::InvalidSegmentation(format!(
                    "stored radius {b} disagrees with rebuilt {a}"
                )));
            }
        }
        if (seg.alpha - doc.alpha).abs() > tol * doc.alpha {
            return Err(Error::InvalidSegmentation("stored alpha disagrees".into()));
        }
        if doc.widening.iter().any(|w| !(*w >= T::zero() && w.is_finite())) {
            return Err(Error::InvalidSegmentation("widening must be >= 0".into()));
        }
        seg.widening = doc.widening.clone();
        Ok(seg)
    }
}

/// Sampling controls for [`Segmentation::predicted_crosstalk`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrosstalkOptions {
    pub samples: usize,
    pub seed: u64,
}

impl Default for CrosstalkOptions {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            seed: 0x5eed,
        }
    }
}

/// Joint probabilities that Alice keeps macropixel `i` and Bob keeps `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Crosstalk<T> {
    pub d: usize,
    /// Row-major `d x d`.
    pub matrix: Vec<T>,
    pub epsilon: T,
    pub joint_kept: T,
    pub samples: usize,
}

/// JSON form of a segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationDoc<T> {
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    #[serde(rename = "aAux")]
    pub a_aux: T,
    pub alpha: T,
    #[serde(rename = "R_um")]
    pub radii: Vec<T>,
    #[serde(rename = "bandMultiplier")]
    pub band_multiplier: T,
    /// Extra one-sided band widening of each macropixel (µm).
    #[serde(rename = "perBoundaryWidening")]
    pub widening: Vec<T>,
    #[serde(rename = "sectorPhase")]
    pub sector_phase: Vec<T>,
    #[serde(rename = "sigma_um")]
    pub sigma: T,
    #[serde(rename = "sigmaCond_um")]
    pub sigma_cond: T,
    #[serde(rename = "discardMode", default)]
    pub mode: DiscardMode,
    pub d: usize,
}

/// Square-pixel detector grid. `origin` is the beam center in pixel units,
/// measured from the corner of pixel `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid<T> {
    pub pitch: T,
    pub width: usize,
    pub height: usize,
    pub origin: [T; 2],
}

impl<T: Scalar> PixelGrid<T> {
    pub fn new(pitch: T, width: usize, height: usize, origin: [T; 2]) -> Result<Self> {
        if !(pitch > T::zero() && pitch.is_finite()) {
            return Err(invalid("pitch", "must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("grid", "width and height must be positive"));
        }
        Ok(Self {
            pitch,
            width,
            height,
            origin,
        })
    }

    /// Smallest centered square grid covering a disk of radius `r`.
    pub fn covering(r: T, pitch: T) -> Result<Self> {
        if !(r > T::zero() && r.is_finite()) {
            return Err(invalid("r", "radius must be positive and finite"));
        }
        let n = (T::c(2.0) * r / pitch).ceil().to_usize().unwrap_or(0).max(1);
        let half = T::from_usize_(n) * T::c(0.5);
        Self::new(pitch, n, n, [half, half])
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> [T; 2] {
        let h = T::c(0.5);
        [
            (T::from_usize_(col) + h - self.origin[0]) * self.pitch,
            (T::from_usize_(row) + h - self.origin[1]) * self.pitch,
        ]
    }

    /// Pixel containing a point, if any.
    pub fn pixel_of(&self, p: [T; 2]) -> Option<(usize, usize)> {
        let c = (p[0] / self.pitch + self.origin[0]).floor();
        let r = (p[1] / self.pitch + self.origin[1]).floor();
        if c < T::zero() || r < T::zero() {
            return None;
        }
        let (c, r) = (c.to_usize()?, r.to_usize()?);
        (c < self.width && r < self.height).then_some((c, r))
    }

    /// Physical extent `[x_min, x_max, y_min, y_max]`.
    pub fn extent(&self) -> [T; 4] {
        let p = self.pitch;
        [
            -self.origin[0] * p,
            (T::from_usize_(self.width) - self.origin[0]) * p,
            -self.origin[1] * p,
            (T::from_usize_(self.height) - self.origin[1]) * p,
        ]
    }

    pub fn covers(&self, r: T) -> bool {
        let e = self.extent();
        r.is_finite() && e[0] <= -r && e[1] >= r && e[2] <= -r && e[3] >= r
    }
}

/// Per-pixel labels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
    /// Set when the pitch exceeds the conditional width.
    pub coarse: bool,
}

impl LabelMap {
    pub fn count(&self, code: u16) -> usize {
        self.labels.iter().filter(|&&l| l == code).count()
    }

    /// Binary 16-bit PGM, big-endian samples.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            buf.extend_from_slice(&l.to_be_bytes());
        }
        w.write_all(&buf)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Grid(format!("PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" || fields[3] != "65535" {
            return Err(bad("expected 16-bit P5"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let data = &bytes[pos + 1..];
        if data.len() != width * height * 2 {
            return Err(bad("pixel data length"));
        }
        let labels = data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            coarse: false,
        })
    }
}
