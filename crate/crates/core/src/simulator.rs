//! Frame-level Monte Carlo of the protocol: pair generation with random
//! bases, loss and dark counts, macropixel tagging, coincidence matrices with
//! next-frame background subtraction, and key sifting.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biphoton::{sample_pair, Basis, BasisScales, SourceParams};
use crate::error::{invalid, Error, Result};
use crate::fryum::{Party, PixelGrid, Segmentation};
use crate::keyrate::{qder, BasisPair, BlockMoments, ErrorMatrix, EpsilonSummary, Qder, RateReport};
use crate::scalar::Scalar;

/// Frames generated per RNG stream.
pub const CHUNK_FRAMES: usize = 8192;

/// Detector and acquisition settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectorModel<T> {
    /// Survival probability of each photon.
    pub efficiency: T,
    /// Mean dark counts per frame per detector half.
    pub dark_rate: T,
    pub mean_pairs_per_frame: T,
    pub frames: usize,
    /// Detector area; events outside it are lost.
    pub grid: PixelGrid<T>,
    /// Report events at pixel centers instead of exact points.
    #[serde(default)]
    pub snap_to_pixels: bool,
}

impl<T: Scalar> DetectorModel<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > T::zero() && self.efficiency <= T::one()) {
            return Err(invalid("efficiency", "must lie in (0, 1]"));
        }
        if !(self.dark_rate >= T::zero() && self.dark_rate.is_finite()) {
            return Err(invalid("darkRate", "must be >= 0"));
        }
        if !(self.mean_pairs_per_frame > T::zero() && self.mean_pairs_per_frame.is_finite()) {
            return Err(invalid("meanPairsPerFrame", "must be positive"));
        }
        Ok(())
    }

    /// Default detector for a segmentation: centered square covering
    /// `1.05 * max(r_ap, 5 sigma)`, mean detected photons per half 0.1.
    pub fn for_segmentation(seg: &Segmentation<T>, pitch: T, frames: usize) -> Result<Self> {
        let sigma = seg.stats().sigma;
        let mut reach = T::c(5.0) * sigma;
        if seg.r_ap().is_finite() {
            reach = reach.max(seg.r_ap());
        }
        Ok(Self {
            efficiency: T::one(),
            dark_rate: T::zero(),
            mean_pairs_per_frame: T::c(0.1),
            frames,
            grid: PixelGrid::covering(reach * T::c(1.05), pitch)?,
            snap_to_pixels: false,
        })
    }
}

/// How bases are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BasisMode {
    /// Independent uniform choice per pair and per party.
    #[default]
    Random,
    /// Same bases for the whole run.
    Fixed { alice: Basis, bob: Basis },
}

/// One detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event<T> {
    pub party: Party,
    pub basis: Basis,
    pub x: T,
    pub y: T,
}

/// Events of consecutive frames, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch<T> {
    /// `offsets[n]..offsets[n + 1]` indexes the events of frame `n`.
    pub offsets: Vec<usize>,
    pub events: Vec<Event<T>>,
    /// Pairs generated in each frame, when known.
    pub pairs: Option<Vec<u32>>,
}

impl<T: Scalar> FrameBatch<T> {
    pub fn frames(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn frame(&self, n: usize) -> &[Event<T>] {
        &self.events[self.offsets[n]..self.offsets[n + 1]]
    }

    /// Writes 14-byte little-endian records: u32 frame, u8 party
    /// (0 Alice, 1 Bob), u8 basis (0 position, 1 momentum), f32 x, f32 y.
    pub fn write_event_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut buf = Vec::with_capacity(self.events.len() * 14);
        for n in 0..self.frames() {
            for e in self.frame(n) {
                buf.extend_from_slice(&(n as u32).to_le_bytes());
                buf.push(match e.party {
                    Party::Alice => 0,
                    Party::Bob => 1,
                });
                buf.push(e.basis.index() as u8);
                buf.extend_from_slice(&(e.x.f64() as f32).to_le_bytes());
                buf.extend_from_slice(&(e.y.f64() as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    /// Reads an event log. Trailing empty frames are not recorded in the log,
    /// so pass `frames` to restore them.
    pub fn read_event_log<R: Read>(mut r: R, frames: Option<usize>) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::EventLog(e.to_string()))?;
        if bytes.len() % 14 != 0 {
            return Err(Error::EventLog(format!(
                "length {} is not a multiple of 14",
                bytes.len()
            )));
        }
        let mut events = Vec::with_capacity(bytes.len() / 14);
        let mut frame_of = Vec::with_capacity(bytes.len() / 14);
        for rec in bytes.chunks_exact(14) {
            let frame = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
            let party = match rec[4] {
                0 => Party::Alice,
                1 => Party::Bob,
                v => return Err(Error::EventLog(format!("bad party byte {v}"))),
            };
            let basis = Basis::from_index(rec[5] as usize)
                .ok_or_else(|| Error::EventLog(format!("bad basis byte {}", rec[5])))?;
            let x = f32::from_le_bytes(rec[6..10].try_into().unwrap());
            let y = f32::from_le_bytes(rec[10..14].try_into().unwrap());
            if frame_of.last().is_some_and(|&last| frame < last) {
                return Err(Error::EventLog("frames out of order".into()));
            }
            frame_of.push(frame);
            events.push(Event {
                party,
                basis,
                x: T::c(x as f64),
                y: T::c(y as f64),
            });
        }
        let seen = frame_of.last().map_or(0, |&f| f + 1);
        let total = match frames {
            Some(f) if f < seen => {
                return Err(Error::EventLog(format!("log has frame {} beyond count {f}", seen - 1)))
            }
            Some(f) => f,
            None => seen,
        };
        let mut offsets = vec![0usize; total + 1];
        for &f in &frame_of {
            offsets[f + 1] += 1;
        }
        for n in 0..total {
            offsets[n + 1] += offsets[n];
        }
        Ok(Self {
            offsets,
            events,
            pairs: None,
        })
    }
}

/// Everything the frame generator needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimConfig<T> {
    pub source: SourceParams<T>,
    pub scales: BasisScales<T>,
    pub detector: DetectorModel<T>,
    #[serde(default)]
    pub basis_mode: BasisMode,
    pub seed: u64,
}

fn random_basis<R: Rng + ?Sized>(rng: &mut R) -> Basis {
    if rng.random::<bool>() {
        Basis::Momentum
    } else {
        Basis::Position
    }
}

/// Generates `detector.frames` frames. Frame chunks use independent RNG
/// streams, so the batch depends only on the seed.
pub fn simulate_frames<T: Scalar>(cfg: &SimConfig<T>) -> Result<FrameBatch<T>> {
    let det = &cfg.detector;
    det.validate()?;
    let pairs_dist = Poisson::new(det.mean_pairs_per_frame.f64())
        .map_err(|e| invalid("meanPairsPerFrame", e.to_string()))?;
    let dark_dist = if det.dark_rate > T::zero() {
        Some(Poisson::new(det.dark_rate.f64()).map_err(|e| invalid("darkRate", e.to_string()))?)
    } else {
        None
    };
    let ext = det.grid.extent();
    let chunks = det.frames.div_ceil(CHUNK_FRAMES);
    // per chunk: events per frame, the events, pairs per frame
    type Chunk<T> = (Vec<usize>, Vec<Event<T>>, Vec<u32>);
    let parts: Vec<Chunk<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let start = c * CHUNK_FRAMES;
            let end = (start + CHUNK_FRAMES).min(det.frames);
            let mut counts = Vec::with_capacity(end - start);
            let mut events = Vec::new();
            let mut pairs = Vec::with_capacity(end - start);
            for _ in start..end {
                let before = events.len();
                let n_pairs = pairs_dist.sample(&mut rng) as u32;
                pairs.push(n_pairs);
                for _ in 0..n_pairs {
                    let (ab, bb) = match cfg.basis_mode {
                        BasisMode::Random => (random_basis(&mut rng), random_basis(&mut rng)),
                        BasisMode::Fixed { alice, bob } => (alice, bob),
                    };
                    let pair = sample_pair(&cfg.source, ab, bb, &mut rng);
                    let (sa, sb) = (cfg.scales.get(ab), cfg.scales.get(bb));
                    let photons = [
                        (Party::Alice, ab, [pair.alice[0] * sa, pair.alice[1] * sa]),
                        (Party::Bob, bb, [pair.bob[0] * sb, pair.bob[1] * sb]),
                    ];
                    for (party, basis, p) in photons {
                        if T::unit(&mut rng) >= det.efficiency {
                            continue;
                        }
                        push_event(det, &mut events, party, basis, p);
                    }
                }
                if let Some(dist) = &dark_dist {
                    for party in [Party::Alice, Party::Bob] {
                        let n = dist.sample(&mut rng) as usize;
                        for _ in 0..n {
                            let basis = random_basis(&mut rng);
                            let x = ext[0] + T::unit(&mut rng) * (ext[1] - ext[0]);
                            let y = ext[2] + T::unit(&mut rng) * (ext[3] - ext[2]);
                            push_event(det, &mut events, party, basis, [x, y]);
                        }
                    }
                }
                counts.push(events.len() - before);
            }
            (counts, events, pairs)
        })
        .collect();
    let mut offsets = Vec::with_capacity(det.frames + 1);
    offsets.push(0);
    let mut events = Vec::new();
    let mut pairs = Vec::with_capacity(det.frames);
    for (counts, ev, pr) in parts {
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        events.extend(ev);
        pairs.extend(pr);
    }
    Ok(FrameBatch {
        offsets,
        events,
        pairs: Some(pairs),
    })
}

fn push_event<T: Scalar>(det: &DetectorModel<T>, out: &mut Vec<Event<T>>, party: Party, basis: Basis, p: [T; 2]) {
    let Some((col, row)) = det.grid.pixel_of(p) else {
        return;
    };
    let p = if det.snap_to_pixels {
        det.grid.pixel_center(col, row)
    } else {
        p
    };
    out.push(Event {
        party,
        basis,
        x: p[0],
        y: p[1],
    });
}

const NO_LABEL: u32 = u32::MAX;

/// Macropixel of every event (Bob's momentum coordinates inverted first),
/// `NO_LABEL` for discarded or outside events.
fn label_events<T: Scalar>(batch: &FrameBatch<T>, seg: &Segmentation<T>) -> Vec<u32> {
    batch
        .events
        .par_iter()
        .map(|e| {
            let p = match (e.party, e.basis) {
                (Party::Bob, Basis::Momentum) => [-e.x, -e.y],
                _ => [e.x, e.y],
            };
            seg.classify_party(e.party, p)
                .linear()
                .map_or(NO_LABEL, |l| l as u32)
        })
        .collect()
}

/// Integer coincidence sums behind an error matrix.
#[derive(Debug, Clone, PartialEq)]
struct Accumulator {
    d: usize,
    same: [Vec<i64>; 4],
    next: [Vec<i64>; 4],
    sq: [Vec<i64>; 4],
    moments: [BlockMoments; 4],
    all_same: [i64; 4],
    all_next: [i64; 4],
}

impl Accumulator {
    fn new(d: usize) -> Self {
        let z = || vec![0i64; d * d];
        Self {
            d,
            same: [z(), z(), z(), z()],
            next: [z(), z(), z(), z()],
            sq: [z(), z(), z(), z()],
            moments: [BlockMoments::default(); 4],
            all_same: [0; 4],
            all_next: [0; 4],
        }
    }

    fn merge(&mut self, o: &Accumulator) {
        for b in 0..4 {
            for (x, y) in self.same[b].iter_mut().zip(&o.same[b]) {
                *x += y;
            }
            for (x, y) in self.next[b].iter_mut().zip(&o.next[b]) {
                *x += y;
            }
            for (x, y) in self.sq[b].iter_mut().zip(&o.sq[b]) {
                *x += y;
            }
            let (m, om) = (&mut self.moments[b], &o.moments[b]);
            m.n += om.n;
            m.sum_off += om.sum_off;
            m.sum_total += om.sum_total;
            m.sum_off_sq += om.sum_off_sq;
            m.sum_total_sq += om.sum_total_sq;
            m.sum_off_total += om.sum_off_total;
            self.all_same[b] += o.all_same[b];
            self.all_next[b] += o.all_next[b];
        }
    }
}

fn accumulate<T: Scalar>(batch: &FrameBatch<T>, labels: &[u32], d: usize) -> Result<Accumulator> {
    let frames = batch.frames();
    if frames < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: frames,
        });
    }
    let used = frames - 1;
    let parts: Vec<Accumulator> = (0..used.div_ceil(CHUNK_FRAMES))
        .into_par_iter()
        .map(|c| {
            let mut acc = Accumulator::new(d);
            let mut x: BTreeMap<(usize, usize), i64> = BTreeMap::new();
            let start = c * CHUNK_FRAMES;
            for n in start..(start + CHUNK_FRAMES).min(used) {
                x.clear();
                let here = batch.offsets[n]..batch.offsets[n + 1];
                let next = batch.offsets[n + 1]..batch.offsets[n + 2];
                for ia in here.clone() {
                    let a = &batch.events[ia];
                    if a.party != Party::Alice {
                        continue;
                    }
                    let la = labels[ia];
                    for (ib, sign) in here.clone().map(|i| (i, 1i64)).chain(next.clone().map(|i| (i, -1i64))) {
                        let b = &batch.events[ib];
                        if b.party != Party::Bob {
                            continue;
                        }
                        let blk = BasisPair::new(a.basis, b.basis).index();
                        if sign > 0 {
                            acc.all_same[blk] += 1;
                        } else {
                            acc.all_next[blk] += 1;
                        }
                        let lb = labels[ib];
                        if la == NO_LABEL || lb == NO_LABEL {
                            continue;
                        }
                        let idx = la as usize * d + lb as usize;
                        if sign > 0 {
                            acc.same[blk][idx] += 1;
                        } else {
                            acc.next[blk][idx] += 1;
                        }
                        *x.entry((blk, idx)).or_insert(0) += sign;
                    }
                }
                let mut off = [0i64; 4];
                let mut tot = [0i64; 4];
                for (&(blk, idx), &v) in &x {
                    acc.sq[blk][idx] += v * v;
                    tot[blk] += v;
                    if idx / d != idx % d {
                        off[blk] += v;
                    }
                }
                for blk in 0..4 {
                    let (o, t) = (off[blk] as f64, tot[blk] as f64);
                    let m = &mut acc.moments[blk];
                    m.n += 1.0;
                    m.sum_off += o;
                    m.sum_total += t;
                    m.sum_off_sq += o * o;
                    m.sum_total_sq += t * t;
                    m.sum_off_total += o * t;
                }
            }
            acc
        })
        .collect();
    let mut total = Accumulator::new(d);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Background-corrected and raw coincidence matrices, plus coincidence
/// totals over all detected events (for the measured kept fraction).
#[derive(Debug, Clone, PartialEq)]
pub struct Coincidences<T> {
    pub corrected: ErrorMatrix<T>,
    pub raw: ErrorMatrix<T>,
    /// Corrected coincidences per frame over all events, per basis pair.
    pub all_events: [T; 4],
}

/// Coincidence matrices over frames `0..N-1`: `C_n B_n - C_n B_{n+1}`
/// averaged over the `N - 1` frames that have a successor.
pub fn coincidences<T: Scalar>(batch: &FrameBatch<T>, seg: &Segmentation<T>) -> Result<Coincidences<T>> {
    let d = seg.dimension();
    let labels = label_events(batch, seg);
    let acc = accumulate(batch, &labels, d)?;
    let n = T::from_usize_(batch.frames() - 1);
    let to_t = |v: &Vec<i64>| -> Vec<T> { v.iter().map(|&x| T::from_i64(x).unwrap() / n).collect() };
    let corrected_blocks: [Vec<T>; 4] = std::array::from_fn(|b| {
        acc.same[b]
            .iter()
            .zip(&acc.next[b])
            .map(|(&s, &x)| T::from_i64(s - x).unwrap() / n)
            .collect()
    });
    let variance: [Vec<T>; 4] = std::array::from_fn(|b| {
        (0..d * d)
            .map(|i| {
                let mean = T::from_i64(acc.same[b][i] - acc.next[b][i]).unwrap() / n;
                let ex2 = T::from_i64(acc.sq[b][i]).unwrap() / n;
                let var = (ex2 - mean * mean).max(T::zero());
                if n > T::one() {
                    var / (n - T::one())
                } else {
                    T::infinity()
                }
            })
            .collect()
    });
    let mut corrected = ErrorMatrix::from_blocks(d, corrected_blocks)?;
    corrected.frames = batch.frames();
    corrected.background_corrected = true;
    corrected.entry_variance = Some(variance);
    corrected.moments = Some(acc.moments);
    let mut raw = ErrorMatrix::from_blocks(d, std::array::from_fn(|b| to_t(&acc.same[b])))?;
    raw.frames = batch.frames();
    let all_events = std::array::from_fn(|b| T::from_i64(acc.all_same[b] - acc.all_next[b]).unwrap() / n);
    Ok(Coincidences {
        corrected,
        raw,
        all_events,
    })
}

/// Background-corrected error matrix.
pub fn error_matrix<T: Scalar>(batch: &FrameBatch<T>, seg: &Segmentation<T>) -> Result<ErrorMatrix<T>> {
    Ok(coincidences(batch, seg)?.corrected)
}

/// Sifted dits from frames with exactly one event per half, matched bases
/// and both events inside kept macropixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftedKey {
    pub alice: Vec<u32>,
    pub bob: Vec<u32>,
    pub basis: Vec<Basis>,
    pub frames: Vec<u32>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.alice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice.is_empty()
    }

    pub fn errors(&self) -> usize {
        self.alice.iter().zip(&self.bob).filter(|(a, b)| a != b).count()
    }

    pub fn error_rate(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.errors() as f64 / self.len() as f64)
    }
}

/// Frame-level counts that explain how many frames reached the key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SiftCounts {
    pub frames: usize,
    pub frames_with_pairs: usize,
    pub single_event_frames: usize,
    pub multi_event_frames: usize,
    pub matched_basis: usize,
    pub sifted: usize,
}

pub fn sift_key<T: Scalar>(batch: &FrameBatch<T>, seg: &Segmentation<T>) -> (SiftedKey, SiftCounts) {
    let labels = label_events(batch, seg);
    let mut key = SiftedKey {
        alice: Vec::new(),
        bob: Vec::new(),
        basis: Vec::new(),
        frames: Vec::new(),
    };
    let mut counts = SiftCounts {
        frames: batch.frames(),
        ..SiftCounts::default()
    };
    if let Some(p) = &batch.pairs {
        counts.frames_with_pairs = p.iter().filter(|&&n| n > 0).count();
    }
    for n in 0..batch.frames() {
        let range = batch.offsets[n]..batch.offsets[n + 1];
        let mut a = None;
        let mut b = None;
        let (mut na, mut nb) = (0, 0);
        for i in range {
            match batch.events[i].party {
                Party::Alice => {
                    na += 1;
                    a = Some(i);
                }
                Party::Bob => {
                    nb += 1;
                    b = Some(i);
                }
            }
        }
        if na > 1 || nb > 1 {
            counts.multi_event_frames += 1;
            continue;
        }
        let (Some(ia), Some(ib)) = (a, b) else {
            continue;
        };
        counts.single_event_frames += 1;
        let (ea, eb) = (&batch.events[ia], &batch.events[ib]);
        if ea.basis != eb.basis {
            continue;
        }
        counts.matched_basis += 1;
        if labels[ia] == NO_LABEL || labels[ib] == NO_LABEL {
            continue;
        }
        key.alice.push(labels[ia]);
        key.bob.push(labels[ib]);
        key.basis.push(ea.basis);
        key.frames.push(n as u32);
    }
    counts.sifted = key.len();
    (key, counts)
}

/// Summary of a sifted key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SiftSummary {
    pub length: usize,
    pub errors: usize,
    pub error_rate: Option<f64>,
    pub counts: SiftCounts,
}

/// End-to-end result of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport<T> {
    pub d: usize,
    pub frames: usize,
    pub rate: Option<RateReport<T>>,
    pub qder: Option<Qder<T>>,
    pub uncorrected_qder: Option<Qder<T>>,
    /// Kept share of matched-basis coincidences.
    pub p_measured: Option<T>,
    pub sift: SiftSummary,
    pub wide_uncertainty: bool,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub matrix: Option<ErrorMatrix<T>>,
}

/// Simulate, build the error matrix, extract QDER and the measured kept
/// fraction, and evaluate the modified key rate.
pub fn run_report<T: Scalar>(cfg: &SimConfig<T>, seg: &Segmentation<T>) -> Result<RunReport<T>> {
    let batch = simulate_frames(cfg)?;
    report_for_batch(&batch, seg)
}

/// The analysis half of [`run_report`], for an existing batch.
pub fn report_for_batch<T: Scalar>(batch: &FrameBatch<T>, seg: &Segmentation<T>) -> Result<RunReport<T>> {
    let co = coincidences(batch, seg)?;
    let (key, counts) = sift_key(batch, seg);
    let d = seg.dimension();
    let mut notes = Vec::new();
    let q = match qder(&co.corrected) {
        Ok(q) => Some(q),
        Err(e) => {
            notes.push(format!("QDER unavailable: {e}"));
            None
        }
    };
    let uq = qder(&co.raw).ok();
    let matched_all = co.all_events[BasisPair::XX.index()] + co.all_events[BasisPair::PP.index()];
    let matched_kept = co.corrected.block_mass(BasisPair::XX) + co.corrected.block_mass(BasisPair::PP);
    let p = (matched_all > T::zero()).then(|| (matched_kept / matched_all).max(T::zero()).min(T::one()));
    let rate = match (q, p) {
        (Some(q), Some(p)) if q.combined < T::one() => {
            // background subtraction can push a near-zero error ratio below
            // zero; the rate uses zero, the report keeps the raw value
            let mut eps = EpsilonSummary::from(q);
            if q.combined < T::zero() || q.position < T::zero() || q.momentum < T::zero() {
                notes.push(format!("negative QDER {} clamped to 0 for the rate", q.combined));
                eps.position = eps.position.max(T::zero());
                eps.momentum = eps.momentum.max(T::zero());
                eps.combined = eps.combined.max(T::zero());
            }
            match RateReport::new(d, eps, p) {
                Ok(r) => Some(r),
                Err(e) => {
                    notes.push(format!("rate unavailable: {e}"));
                    None
                }
            }
        }
        (Some(q), Some(_)) => {
            notes.push(format!("QDER {} outside [0, 1)", q.combined));
            None
        }
        _ => None,
    };
    let se_wide = q
        .and_then(|q| q.combined_se)
        .is_none_or(|se| se > T::c(0.01));
    let wide_uncertainty = rate.is_none() || se_wide || key.len() < 100;
    if wide_uncertainty {
        notes.push("too few coincidences for a tight estimate".into());
    }
    let outliers = co.corrected.negative_outliers();
    if !outliers.is_empty() {
        notes.push(format!("{} matched-basis entries below -5 standard errors", outliers.len()));
    }
    Ok(RunReport {
        d,
        frames: batch.frames(),
        rate,
        qder: q,
        uncorrected_qder: uq,
        p_measured: p,
        sift: SiftSummary {
            length: key.len(),
            errors: key.errors(),
            error_rate: key.error_rate(),
            counts,
        },
        wide_uncertainty,
        notes,
        matrix: Some(co.corrected),
    })
}
