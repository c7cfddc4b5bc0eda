//! Run configuration: a JSON document with dotted `--set` overrides,
//! resolved into source, geometry and detector settings.

use std::path::Path;

use fryum::biphoton::{beam_stats, BasisScales, SourceParams};
use fryum::fryum::{AngularSpec, DiscardMode, PixelGrid};
use fryum::optimizer::{EpsilonSource, SweepOptions, ValidityRules};
use fryum::simulator::{BasisMode, DetectorModel, SimConfig};
use fryum::{Basis, BeamStats};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Source parameterization. Exactly one of `K`, `w0_um` + `b_um`, or
/// `w0_um` + `crystalLength_mm` + `pumpWavevector_per_um` is allowed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w0_um: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_um: Option<f64>,
    #[serde(rename = "crystalLength_mm", skip_serializing_if = "Option::is_none")]
    pub crystal_length_mm: Option<f64>,
    #[serde(rename = "pumpWavevector_per_um", skip_serializing_if = "Option::is_none")]
    pub pump_wavevector_per_um: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_ap_um: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_ap_over_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EpsilonMode {
    #[default]
    Crosstalk,
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RulesConfig {
    pub band_multiplier: f64,
    #[serde(rename = "Nrange")]
    pub n_range: [usize; 2],
    pub epsilon: EpsilonMode,
    pub crosstalk_samples: usize,
    pub discard_mode: DiscardMode,
}

impl Default for RulesConfig {
    fn default() -> Self {
        Self {
            band_multiplier: 3.0,
            n_range: [2, 9],
            epsilon: EpsilonMode::Crosstalk,
            crosstalk_samples: 1_000_000,
            discard_mode: DiscardMode::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DetectorConfig {
    /// Pixel pitch; defaults to a quarter of the conditional width.
    #[serde(rename = "pitch_um", skip_serializing_if = "Option::is_none")]
    pub pitch_um: Option<f64>,
    pub frames: usize,
    /// Defaults to `0.1 / efficiency`, i.e. 0.1 detected photons per frame
    /// per half.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pairs_per_frame: Option<f64>,
    pub efficiency: f64,
    pub dark_rate: f64,
    pub snap_to_pixels: bool,
    pub basis_mode: BasisMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pitch_um: None,
            frames: 3_000_000,
            mean_pairs_per_frame: None,
            efficiency: 1.0,
            dark_rate: 0.0,
            snap_to_pixels: false,
            basis_mode: BasisMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    #[serde(rename = "sectorPhase", skip_serializing_if = "Option::is_none")]
    pub sector_phase: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    pub source: SourceConfig,
    /// Detector µm per source unit in each basis. Defaults give both bases
    /// the position-basis marginal width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_scales: Option<BasisScales<f64>>,
    #[serde(default)]
    pub aperture: ApertureConfig,
    #[serde(default)]
    pub rules: RulesConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationConfig>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

/// Everything derived from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub source: SourceParams<f64>,
    pub scales: BasisScales<f64>,
    /// Position-basis statistics in detector units; the segmentation is
    /// built from these.
    pub stats: BeamStats,
    pub r_ap: f64,
    pub rules: ValidityRules<f64>,
}

/// Reads the config file (or `{}` when absent) and applies overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if doc.get("source").is_none() {
        doc["source"] = serde_json::json!({ "K": 104.6 });
    }
    if doc.get("aperture").is_none() {
        doc["aperture"] = serde_json::json!({ "r_ap_over_sigma": 2.0516 });
    }
    fill_defaults(&mut doc);
    serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))
}

/// Fills missing fields of the nested sections so partial sections parse.
fn fill_defaults(doc: &mut Value) {
    let defaults = [
        ("rules", serde_json::to_value(RulesConfig::default()).unwrap()),
        ("detector", serde_json::to_value(DetectorConfig::default()).unwrap()),
    ];
    for (key, def) in defaults {
        let Value::Object(def) = def else { continue };
        let section = doc
            .as_object_mut()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Value::Object(Default::default()));
        if let Value::Object(map) = section {
            for (k, v) in def {
                map.entry(k).or_insert(v);
            }
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(doc: &mut Value, o: &str) -> Result<(), CliError> {
    let (path, raw) = o
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{path}`")));
    }
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(CliError::Config(format!("`{path}`: `{k}` is not a section")));
        }
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(*k)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let Some(map) = cur.as_object_mut() else {
        return Err(CliError::Config(format!("`{path}` does not name a field")));
    };
    // choosing one source or aperture form replaces the other
    if keys.len() == 2 && (keys[0] == "source" || keys[0] == "aperture") {
        let exclusive: &[&str] = match (keys[0], keys[1]) {
            ("source", "K") => &["w0_um", "b_um", "crystalLength_mm", "pumpWavevector_per_um"],
            ("source", _) => &["K"],
            ("aperture", "r_ap_um") => &["r_ap_over_sigma"],
            _ => &["r_ap_um"],
        };
        for e in exclusive {
            map.remove(*e);
        }
    }
    map.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let s = &self.source;
        let source = match (s.k, s.w0_um, s.b_um, s.crystal_length_mm, s.pump_wavevector_per_um) {
            (Some(k), None, None, None, None) => SourceParams::from_schmidt(k)?,
            (None, Some(w0), Some(b), None, None) => SourceParams::new(positive("w0_um", w0)?, positive("b_um", b)?)?,
            (None, Some(w0), None, Some(l), Some(kp)) => SourceParams::from_crystal(
                positive("w0_um", w0)?,
                positive("crystalLength_mm", l)?,
                positive("pumpWavevector_per_um", kp)?,
            )?,
            _ => {
                return Err(CliError::Config(
                    "source needs exactly one of {K}, {w0_um, b_um} or {w0_um, crystalLength_mm, pumpWavevector_per_um}"
                        .into(),
                ))
            }
        };
        let target = if s.k.is_some() {
            1.0
        } else {
            source.marginal_sd(Basis::Position)
        };
        let scales = self.basis_scales.unwrap_or_else(|| BasisScales::matched(&source, target));
        positive("basisScales.position", scales.position)?;
        positive("basisScales.momentum", scales.momentum)?;
        let stats = beam_stats(&source, Basis::Position, scales.position)?;
        let r_ap = match (self.aperture.r_ap_um, self.aperture.r_ap_over_sigma) {
            (Some(r), None) => positive("aperture.r_ap_um", r)?,
            (None, Some(f)) => positive("aperture.r_ap_over_sigma", f)? * stats.sigma,
            _ => return Err(CliError::Config("aperture needs exactly one of r_ap_um, r_ap_over_sigma".into())),
        };
        let r = &self.rules;
        if !(r.band_multiplier >= 0.0 && r.band_multiplier.is_finite()) {
            return Err(CliError::Config(format!(
                "rules.bandMultiplier must be >= 0, got {}",
                r.band_multiplier
            )));
        }
        if r.n_range[0] == 0 || r.n_range[0] > r.n_range[1] {
            return Err(CliError::Config(format!("rules.Nrange {:?} is not 1 <= min <= max", r.n_range)));
        }
        if r.crosstalk_samples == 0 {
            return Err(CliError::Config("rules.crosstalkSamples must be positive".into()));
        }
        let d = &self.detector;
        if !(d.efficiency > 0.0 && d.efficiency <= 1.0) {
            return Err(CliError::Config(format!("detector.efficiency must lie in (0, 1], got {}", d.efficiency)));
        }
        if !(d.dark_rate >= 0.0 && d.dark_rate.is_finite()) {
            return Err(CliError::Config(format!("detector.darkRate must be >= 0, got {}", d.dark_rate)));
        }
        if let Some(p) = d.pitch_um {
            positive("detector.pitch_um", p)?;
        }
        if let Some(m) = d.mean_pairs_per_frame {
            positive("detector.meanPairsPerFrame", m)?;
        }
        Ok(Resolved {
            config: self.clone(),
            source,
            scales,
            stats,
            r_ap,
            rules: ValidityRules::new(r.band_multiplier, &stats),
        })
    }
}

impl Resolved {
    pub fn epsilon_source(&self) -> EpsilonSource {
        match self.config.rules.epsilon {
            EpsilonMode::Crosstalk => EpsilonSource::Crosstalk {
                samples: self.config.rules.crosstalk_samples,
                seed: self.config.seed,
            },
            EpsilonMode::Fast => EpsilonSource::Fast,
        }
    }

    pub fn sweep_options(&self, dump_all: bool) -> SweepOptions {
        SweepOptions {
            n_min: self.config.rules.n_range[0],
            n_max: self.config.rules.n_range[1],
            epsilon: self.epsilon_source(),
            dump_all,
        }
    }

    pub fn spec(&self) -> Result<Option<AngularSpec>, CliError> {
        match &self.config.segmentation {
            Some(s) => Ok(Some(AngularSpec::new(s.a.clone())?)),
            None => Ok(None),
        }
    }

    pub fn pitch(&self) -> f64 {
        self.config.detector.pitch_um.unwrap_or(self.stats.sigma_cond / 4.0)
    }

    /// Simulator settings for a segmentation with aperture `r_ap`.
    pub fn sim_config(&self, r_ap: f64) -> Result<SimConfig<f64>, CliError> {
        let d = &self.config.detector;
        let reach = (5.0 * self.stats.sigma).max(r_ap) * 1.05;
        let detector = DetectorModel {
            efficiency: d.efficiency,
            dark_rate: d.dark_rate,
            mean_pairs_per_frame: d.mean_pairs_per_frame.unwrap_or(0.1 / d.efficiency),
            frames: d.frames,
            grid: PixelGrid::covering(reach, self.pitch())?,
            snap_to_pixels: d.snap_to_pixels,
        };
        detector.validate()?;
        Ok(SimConfig {
            source: self.source,
            scales: self.scales,
            detector,
            basis_mode: d.basis_mode,
            seed: self.config.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_operating_point() {
        let c = load(None, &[]).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(c.source.k, Some(104.6));
        assert!((r.stats.sigma - 1.0).abs() < 1e-12);
        assert!((r.r_ap - 2.0516).abs() < 1e-12);
        assert!((r.stats.sigma_cond - 1.0 / 104.6f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.rules.n_range, [2, 9]);
    }

    #[test]
    fn overrides_nest_and_replace_exclusive_forms() {
        let c = load(
            None,
            &[
                "source.w0_um=150".into(),
                "source.b_um=7.5".into(),
                "rules.Nrange=[2,2]".into(),
                "aperture.r_ap_um=300".into(),
                "segmentation.A=[1,6]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.source.k, None);
        assert_eq!(c.aperture.r_ap_over_sigma, None);
        assert_eq!(c.rules.n_range, [2, 2]);
        assert_eq!(c.segmentation.unwrap().a, vec![1, 6]);
    }

    #[test]
    fn conflicting_or_bad_sources_rejected() {
        let c: RunConfig = serde_json::from_str(r#"{"source": {"K": 10, "w0_um": 3}}"#).unwrap();
        assert!(matches!(c.resolve(), Err(CliError::Config(_))));
        assert!(load(None, &["nonsense".into()]).is_err());
        assert!(load(None, &["rules.bogus=1".into()]).is_err());
        let c = load(None, &["rules.Nrange=[5,2]".into()]).unwrap();
        assert!(c.resolve().is_err());
        let c = load(None, &["detector.efficiency=0".into()]).unwrap();
        assert!(c.resolve().is_err());
    }
}
