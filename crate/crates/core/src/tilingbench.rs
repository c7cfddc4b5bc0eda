//! Uniform-disk packing comparison (circles, hexagons, fryum annuli) and the
//! border-pixel error of uniformly illuminated pixel grids.
//!
//! Packing lengths are in units of the atom radius `r`; areas in `pi r^2`.

use std::collections::BTreeSet;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyrate::modified_rate;
use crate::scalar::Scalar;

/// `6 sqrt 3 / pi`.
pub fn beta<T: Scalar>() -> T {
    T::c(6.0) * T::c(3.0).sqrt() / T::PI()
}

/// Atom counts for `n` radial segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackingCounts {
    pub circle: u64,
    pub hexagon: u64,
    /// Exact sum of the per-annulus fryum counts (a lower bound on what fits).
    pub fryum_lower_bound: u64,
}

/// Discarded areas in units of `pi r^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackingDiscarded<T> {
    pub circle: T,
    pub hexagon: T,
    pub fryum: T,
    /// `(3 + c) n^2 - (6 + c) n + 3` with `c = 12 / (pi + 2)`: the floor-free
    /// upper bound on `fryum`.
    pub fryum_bound: T,
    /// `5.33 n^2 - 8.33 n - 3`, the commonly quoted rounded form; it sits
    /// below `fryum` for every `n >= 2`.
    pub fryum_bound_as_printed: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackingReport<T> {
    pub n: usize,
    pub counts: PackingCounts,
    pub discarded: PackingDiscarded<T>,
    /// Hexagon and fryum discarded area relative to circles (`None` at `n = 1`).
    pub hexagon_fraction: Option<T>,
    pub fryum_fraction: Option<T>,
    /// False where the hexagon formula goes negative (`n = 1`).
    pub hexagon_formula_valid: bool,
}

/// Radius of the `k`-th radial segment for circle packing, `(3k - 2) r`.
pub fn circle_segment_radius<T: Scalar>(k: usize) -> T {
    T::from_usize_(3 * k) - T::c(2.0)
}

/// `3n^2 - 3n + 1` circles; discarded `6 (n-1)(n-1/2)`.
pub fn circle_packing<T: Scalar>(n: usize) -> (u64, T) {
    let nn = n as u64;
    let count = 3 * nn * nn - 3 * nn + 1;
    let nt = T::from_usize_(n);
    (count, T::c(6.0) * (nt - T::one()) * (nt - T::c(0.5)))
}

/// Same count as circles; discarded `(9-b) n^2 - (12-b) n + 4 - b/3`.
pub fn hex_packing<T: Scalar>(n: usize) -> (u64, T) {
    let (count, _) = circle_packing::<T>(n);
    let b = beta::<T>();
    let nt = T::from_usize_(n);
    let area = (T::c(9.0) - b) * nt * nt - (T::c(12.0) - b) * nt + T::c(4.0) - b / T::c(3.0);
    (count, area)
}

/// Segments in the `k`-th fryum annulus, `floor(12 pi (k-1) / (pi + 2))`.
pub fn fryum_annulus_count(k: usize) -> u64 {
    if k <= 1 {
        return 1;
    }
    let pi = std::f64::consts::PI;
    (12.0 * pi * (k - 1) as f64 / (pi + 2.0)).floor() as u64
}

pub fn fryum_packing_bound<T: Scalar>(n: usize) -> (u64, PackingDiscarded<T>) {
    let count: u64 = (1..=n).map(fryum_annulus_count).sum();
    let nt = T::from_usize_(n);
    let pi = std::f64::consts::PI;
    let floor_term = (12.0 / (pi + 2.0) * (n * n.saturating_sub(1)) as f64).floor();
    let fryum = T::c(floor_term) + T::c(3.0) * (nt - T::one()) * (nt - T::one());
    let c = T::c(12.0) / (T::PI() + T::c(2.0));
    let (_, circle) = circle_packing::<T>(n);
    let (_, hexagon) = hex_packing::<T>(n);
    (
        count,
        PackingDiscarded {
            circle,
            hexagon,
            fryum,
            fryum_bound: (T::c(3.0) + c) * nt * nt - (T::c(6.0) + c) * nt + T::c(3.0),
            fryum_bound_as_printed: T::c(5.33) * nt * nt - T::c(8.33) * nt - T::c(3.0),
        },
    )
}

pub fn packing_report<T: Scalar>(n: usize) -> Result<PackingReport<T>> {
    if n == 0 {
        return Err(crate::error::invalid("n", "need n >= 1"));
    }
    let (circle, _) = circle_packing::<T>(n);
    let (hexagon, _) = hex_packing::<T>(n);
    let (fry, discarded) = fryum_packing_bound::<T>(n);
    let frac = |v: T| (discarded.circle > T::zero()).then(|| v / discarded.circle);
    Ok(PackingReport {
        n,
        counts: PackingCounts {
            circle,
            hexagon,
            fryum_lower_bound: fry,
        },
        hexagon_fraction: frac(discarded.hexagon),
        fryum_fraction: frac(discarded.fryum),
        hexagon_formula_valid: discarded.hexagon >= T::zero(),
        discarded,
    })
}

/// Atom centers of the triangular lattice (spacing `3r`) within `n - 1`
/// hexagonal rings of the origin. Each returned center's atom lies inside
/// the outer circle of radius `(3n - 2) r`.
pub fn lattice_circle_centers(n: usize) -> Vec<[f64; 2]> {
    let m = n as i64 - 1;
    let outer = 3.0 * n as f64 - 2.0;
    let h = 3.0f64.sqrt() / 2.0;
    let mut out = Vec::new();
    for j in -m..=m {
        for i in -m..=m {
            if i.abs().max(j.abs()).max((i + j).abs()) > m {
                continue;
            }
            let c = [3.0 * (i as f64 + 0.5 * j as f64), 3.0 * h * j as f64];
            debug_assert!(c[0].hypot(c[1]) + 1.0 <= outer + 1e-9);
            out.push(c);
        }
    }
    out
}

/// Writes `n,N_circle,N_fryum_bound,disc_circle,disc_hex,disc_fry,frac_hex,frac_fry`.
pub fn write_packing_csv<T: Scalar, W: Write>(rows: &[PackingReport<T>], mut w: W) -> io::Result<()> {
    writeln!(w, "n,N_circle,N_fryum_bound,disc_circle,disc_hex,disc_fry,frac_hex,frac_fry")?;
    let opt = |v: Option<T>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.counts.circle,
            r.counts.fryum_lower_bound,
            r.discarded.circle,
            r.discarded.hexagon,
            r.discarded.fryum,
            opt(r.hexagon_fraction),
            opt(r.fryum_fraction)
        )?;
    }
    Ok(())
}

/// Pixel grid with one macropixel label per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
}

impl GridSpec {
    /// Labels must be exactly `0..d`.
    pub fn new(width: usize, height: usize, labels: Vec<usize>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Grid("empty grid".into()));
        }
        if labels.len() != width * height {
            return Err(Error::Grid(format!(
                "{} labels for a {width}x{height} grid",
                labels.len()
            )));
        }
        let used: BTreeSet<usize> = labels.iter().copied().collect();
        let d = used.len();
        if used.iter().next_back() != Some(&(d - 1)) {
            return Err(Error::Grid("labels must be contiguous from 0".into()));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Parses comma- or whitespace-separated integer rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| Error::Grid(format!("line {}: `{t}`: {e}", ln + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let height = rows.len();
        if height == 0 {
            return Err(Error::Grid("empty grid".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Grid("ragged rows".into()));
        }
        Self::new(width, height, rows.concat())
    }

    /// `rows x cols` blocks of `bh x bw` pixels each, labeled row-major.
    pub fn blocks(rows: usize, cols: usize, bh: usize, bw: usize) -> Result<Self> {
        let (w, h) = (cols * bw, rows * bh);
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y / bh) * cols + x / bw))
            .collect();
        Self::new(w, h, labels)
    }

    pub fn dimension(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// Label with coordinates clamped into the grid.
    fn clamped(&self, x: i64, y: i64) -> usize {
        let cx = x.clamp(0, self.width as i64 - 1) as usize;
        let cy = y.clamp(0, self.height as i64 - 1) as usize;
        self.label(cx, cy)
    }

    /// In-grid edge neighbors with a different label.
    pub fn foreign_edges(&self, x: usize, y: usize) -> usize {
        let l = self.label(x, y);
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
            .iter()
            .filter(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < self.width
                    && (ny as usize) < self.height
                    && self.label(nx as usize, ny as usize) != l
            })
            .count()
    }

    /// Pixels with at least one foreign edge neighbor.
    pub fn border_pixels(&self) -> usize {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.foreign_edges(x, y) > 0)
            .count()
    }
}

/// Per-pixel error by number of foreign edges:
/// `0 -> 0, 1 -> 1/4, 2 -> 7/16, 3 -> 7/16, 4 -> 3/4`.
///
/// Pixels with three foreign in-grid edges only occur on the grid boundary of
/// single-pixel macropixels and are tallied with the two-edge case.
pub fn case_error(foreign_edges: usize) -> f64 {
    match foreign_edges {
        0 => 0.0,
        1 => 0.25,
        2 | 3 => 7.0 / 16.0,
        _ => 0.75,
    }
}

/// Per-pixel error from quarter-square weights: center pixel 4 quarters,
/// edge neighbors 2, vertex neighbors 1, out of 16. Neighbors beyond the grid
/// take the label of the nearest in-grid pixel.
pub fn quarter_weight_error(g: &GridSpec, x: usize, y: usize) -> f64 {
    let l = g.label(x, y);
    let mut foreign = 0;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let w = match (dx != 0) as u8 + (dy != 0) as u8 {
                0 => 4,
                1 => 2,
                _ => 1,
            };
            if g.clamped(x as i64 + dx, y as i64 + dy) != l {
                foreign += w;
            }
        }
    }
    foreign as f64 / 16.0
}

/// Border-error breakdown of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BorderErrorReport {
    pub width: usize,
    pub height: usize,
    pub d: usize,
    /// Pixels with 0, 1, 2, 3 and 4 foreign edges.
    pub pixels_by_foreign_edges: [usize; 5],
    pub border_pixels: usize,
    pub epsilon: f64,
    /// Same total from quarter-square weights with clamped neighbors.
    pub epsilon_quarter_weights: f64,
}

/// Mean per-pixel border error under uniform illumination.
pub fn uniform_grid_border_error(g: &GridSpec) -> f64 {
    border_error_report(g).epsilon
}

pub fn border_error_report(g: &GridSpec) -> BorderErrorReport {
    let mut by = [0usize; 5];
    let mut eps = 0.0;
    let mut quarter = 0.0;
    for y in 0..g.height {
        for x in 0..g.width {
            let f = g.foreign_edges(x, y);
            by[f] += 1;
            eps += case_error(f);
            quarter += quarter_weight_error(g, x, y);
        }
    }
    let n = (g.width * g.height) as f64;
    BorderErrorReport {
        width: g.width,
        height: g.height,
        d: g.dimension(),
        pixels_by_foreign_edges: by,
        border_pixels: n as usize - by[0],
        epsilon: eps / n,
        epsilon_quarter_weights: quarter / n,
    }
}

/// Monte Carlo of the quarter-square picture: Bob uniform over the grid,
/// Alice offset uniformly by up to one pixel (`2 sigma_cond`) per axis and
/// clamped into the grid. Returns the mismatch rate and its standard error.
pub fn border_error_monte_carlo(g: &GridSpec, samples: usize, seed: u64) -> (f64, f64) {
    use rand::Rng;
    const CHUNK: usize = 1 << 16;
    let chunks = samples.div_ceil(CHUNK);
    let errors: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut errs = 0;
            for _ in 0..n {
                let bx = rng.random::<f64>() * g.width as f64;
                let by = rng.random::<f64>() * g.height as f64;
                let ax = bx + rng.random_range(-1.0..1.0);
                let ay = by + rng.random_range(-1.0..1.0);
                let lb = g.label(bx as usize, by as usize);
                let la = g.clamped(ax.floor() as i64, ay.floor() as i64);
                errs += (la != lb) as usize;
            }
            errs
        })
        .sum();
    let p = errors as f64 / samples as f64;
    (p, (p * (1.0 - p) / samples as f64).sqrt())
}

/// Rate summary of a pixel grid with or without border discarding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridRate {
    pub d: usize,
    pub epsilon: f64,
    pub p: f64,
    pub rate_mod: f64,
    pub kept_pixels: usize,
}

/// Key rate of a uniformly illuminated grid.
///
/// With `border_discard`, pixels are visited in raster order and kept unless
/// an already kept pixel of another macropixel touches them (edge or
/// vertex); every surviving macropixel is then trimmed to the smallest kept
/// count so they stay equiprobable, and `eps = 0`. Without it, `p = 1` and
/// `eps` is the border error.
pub fn discarded_grid_rate(g: &GridSpec, border_discard: bool) -> Result<GridRate> {
    let n = g.width * g.height;
    if !border_discard {
        let eps = uniform_grid_border_error(g);
        let d = g.dimension();
        let rate_mod = if d < 2 { 0.0 } else { modified_rate(d, eps, 1.0)? };
        return Ok(GridRate {
            d,
            epsilon: eps,
            p: 1.0,
            rate_mod,
            kept_pixels: n,
        });
    }
    let mut kept = vec![false; n];
    for y in 0..g.height {
        for x in 0..g.width {
            let l = g.label(x, y);
            let mut clash = false;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= g.width as i64 || ny >= g.height as i64 {
                        continue;
                    }
                    let j = ny as usize * g.width + nx as usize;
                    if kept[j] && g.labels[j] != l {
                        clash = true;
                    }
                }
            }
            kept[y * g.width + x] = !clash;
        }
    }
    let mut per = vec![0usize; g.dimension()];
    for (i, &k) in kept.iter().enumerate() {
        if k {
            per[g.labels[i]] += 1;
        }
    }
    let surviving: Vec<usize> = per.into_iter().filter(|&c| c > 0).collect();
    if surviving.is_empty() {
        return Err(Error::AllPixelsDiscarded);
    }
    let q = *surviving.iter().min().unwrap();
    let d = surviving.len();
    let p = (d * q) as f64 / n as f64;
    let rate_mod = if d < 2 { 0.0 } else { modified_rate(d, 0.0, p)? };
    Ok(GridRate {
        d,
        epsilon: 0.0,
        p,
        rate_mod,
        kept_pixels: d * q,
    })
}
