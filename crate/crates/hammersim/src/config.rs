//! On-disk configuration formats: device profiles (with adjacency maps as
//! hex row indices and kind tags), scenarios, mappings and sequence-catalog
//! overrides. All formats are TOML; `docs/formats.md` documents them.

use crate::adjacency::{AdjacencyMap, AdjacencySpec, AdjEntry, Half, VictimKind};
use crate::addrmap::MappingConfig;
use crate::controller::ControllerConfig;
use crate::device::{CellPolarity, DeviceProfile, FlipProbs, RetentionDist};
use crate::hammer::Arch;
use crate::protocol::BankId;
use crate::sim::Scenario;
use crate::timing::{RefreshModel, TimingParams, Ps, PS_PER_S};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("{path}: {err}")]
    Toml { path: String, err: String },
    #[error("io {path}: {err}")]
    Io { path: String, err: String },
    #[error("unknown device profile {0:?} (builtin: vendor1, vendor2, vendor3)")]
    UnknownProfile(String),
}

fn parse_hex_u32(s: &str) -> Result<u32, String> {
    let t = s.trim();
    let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    u32::from_str_radix(digits, 16).map_err(|e| format!("bad hex row {s:?}: {e}"))
}

fn parse_hex_u64(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    u64::from_str_radix(digits, 16).map_err(|e| format!("bad hex word {s:?}: {e}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub t_rc_ps: Ps,
    pub t_refi_ps: Ps,
    pub t_rfc_ps: Ps,
    pub refresh_window_ps: Ps,
    pub refresh_count: u64,
    #[serde(default)]
    pub refresh_model: RefreshModel,
    #[serde(default = "default_slice")]
    pub refresh_slice_ps: Ps,
}

fn default_slice() -> Ps {
    TimingParams::default().refresh_slice
}

impl From<TimingParams> for TimingSection {
    fn from(p: TimingParams) -> Self {
        TimingSection {
            t_rc_ps: p.t_rc,
            t_refi_ps: p.t_refi,
            t_rfc_ps: p.t_rfc,
            refresh_window_ps: p.refresh_window,
            refresh_count: p.refresh_count,
            refresh_model: p.refresh_model,
            refresh_slice_ps: p.refresh_slice,
        }
    }
}

impl From<TimingSection> for TimingParams {
    fn from(s: TimingSection) -> Self {
        TimingParams {
            t_rc: s.t_rc_ps,
            t_refi: s.t_refi_ps,
            t_rfc: s.t_rfc_ps,
            refresh_window: s.refresh_window_ps,
            refresh_count: s.refresh_count,
            refresh_model: s.refresh_model,
            refresh_slice: s.refresh_slice_ps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipSection {
    pub p_whole_one: f64,
    pub p_whole_zero: f64,
    pub p_half_one: f64,
    pub p_half_zero: f64,
    #[serde(default)]
    pub coupling: f64,
    pub n0_acts: f64,
    #[serde(default)]
    pub act_threshold: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionSection {
    pub one_flip: f64,
    pub two_flips: f64,
    pub threshold_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjEntrySection {
    pub aggressor: String,
    /// `[["0x11410", "W"], ["0x1140f", "HL"], ...]`
    pub victims: Vec<(String, String)>,
    #[serde(default)]
    pub spares: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencySection {
    /// linear | group-reversal | half-permutation | explicit
    pub mode: String,
    #[serde(default)]
    pub group: Option<u32>,
    #[serde(default)]
    pub h_order: Option<Vec<u32>>,
    /// Explicit entries; for the non-explicit modes these overlay the base.
    #[serde(default)]
    pub entries: Vec<AdjEntrySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub vendor: String,
    pub rows_per_bank: u32,
    #[serde(default)]
    pub timing: Option<TimingSection>,
    pub flip: FlipSection,
    pub retention: RetentionSection,
    pub adjacency: AdjacencySection,
}

fn entries_to_map(entries: &[AdjEntrySection]) -> Result<AdjacencyMap, String> {
    let mut map = AdjacencyMap::default();
    for e in entries {
        let aggressor = parse_hex_u32(&e.aggressor)?;
        let mut entry = AdjEntry::default();
        for (row, kind) in &e.victims {
            let kind = VictimKind::from_tag(kind)
                .ok_or_else(|| format!("bad kind tag {kind:?} (expect W, HL or HH)"))?;
            entry.victims.push((parse_hex_u32(row)?, kind));
        }
        for s in &e.spares {
            entry.spares.push(match s.as_str() {
                "low" | "L" => Half::Low,
                "high" | "H" => Half::High,
                other => return Err(format!("bad spare tag {other:?}")),
            });
        }
        map.insert(aggressor, entry);
    }
    Ok(map)
}

fn map_to_entries(map: &AdjacencyMap) -> Vec<AdjEntrySection> {
    map.entries
        .iter()
        .map(|(aggressor, e)| AdjEntrySection {
            aggressor: format!("0x{aggressor:x}"),
            victims: e
                .victims
                .iter()
                .map(|(r, k)| (format!("0x{r:x}"), k.tag().to_string()))
                .collect(),
            spares: e
                .spares
                .iter()
                .map(|h| match h {
                    Half::Low => "low".to_string(),
                    Half::High => "high".to_string(),
                })
                .collect(),
        })
        .collect()
}

impl AdjacencySection {
    pub fn to_spec(&self) -> Result<AdjacencySpec, String> {
        let overrides = entries_to_map(&self.entries)?;
        let base = match self.mode.as_str() {
            "linear" => AdjacencySpec::Linear,
            "group-reversal" => AdjacencySpec::GroupReversal {
                group: self.group.ok_or("group-reversal mode needs `group`")?,
            },
            "half-permutation" => AdjacencySpec::HalfPermutation {
                h_order: self
                    .h_order
                    .clone()
                    .ok_or("half-permutation mode needs `h_order`")?,
            },
            "explicit" => return Ok(AdjacencySpec::Explicit(overrides)),
            other => return Err(format!("unknown adjacency mode {other:?}")),
        };
        if overrides.entries.is_empty() {
            Ok(base)
        } else {
            Ok(AdjacencySpec::Overlay {
                base: Box::new(base),
                overrides,
            })
        }
    }

    pub fn from_spec(spec: &AdjacencySpec) -> AdjacencySection {
        match spec {
            AdjacencySpec::Linear => AdjacencySection {
                mode: "linear".into(),
                group: None,
                h_order: None,
                entries: vec![],
            },
            AdjacencySpec::GroupReversal { group } => AdjacencySection {
                mode: "group-reversal".into(),
                group: Some(*group),
                h_order: None,
                entries: vec![],
            },
            AdjacencySpec::HalfPermutation { h_order } => AdjacencySection {
                mode: "half-permutation".into(),
                group: None,
                h_order: Some(h_order.clone()),
                entries: vec![],
            },
            AdjacencySpec::Explicit(map) => AdjacencySection {
                mode: "explicit".into(),
                group: None,
                h_order: None,
                entries: map_to_entries(map),
            },
            AdjacencySpec::Overlay { base, overrides } => {
                let mut s = AdjacencySection::from_spec(base);
                s.entries = map_to_entries(overrides);
                s
            }
        }
    }
}

impl ProfileConfig {
    pub fn to_profile(&self) -> Result<(DeviceProfile, Option<TimingParams>), String> {
        let profile = DeviceProfile {
            vendor: self.vendor.clone(),
            rows_per_bank: self.rows_per_bank,
            p_max: FlipProbs {
                whole_one: self.flip.p_whole_one,
                whole_zero: self.flip.p_whole_zero,
                half_one: self.flip.p_half_one,
                half_zero: self.flip.p_half_zero,
            },
            coupling: self.flip.coupling,
            n0: self.flip.n0_acts,
            act_threshold: self.flip.act_threshold,
            retention: RetentionDist {
                one_flip: self.retention.one_flip,
                two_flips: self.retention.two_flips,
                threshold: (self.retention.threshold_s * PS_PER_S as f64) as Ps,
            },
            cell_polarity: CellPolarity::TrueCell,
            adjacency: self.adjacency.to_spec()?,
        };
        profile.validate()?;
        Ok((profile, self.timing.clone().map(Into::into)))
    }

    pub fn from_profile(p: &DeviceProfile, timing: Option<TimingParams>) -> ProfileConfig {
        ProfileConfig {
            vendor: p.vendor.clone(),
            rows_per_bank: p.rows_per_bank,
            timing: timing.map(Into::into),
            flip: FlipSection {
                p_whole_one: p.p_max.whole_one,
                p_whole_zero: p.p_max.whole_zero,
                p_half_one: p.p_max.half_one,
                p_half_zero: p.p_max.half_zero,
                coupling: p.coupling,
                n0_acts: p.n0,
                act_threshold: p.act_threshold,
            },
            retention: RetentionSection {
                one_flip: p.retention.one_flip,
                two_flips: p.retention.two_flips,
                threshold_s: p.retention.threshold as f64 / PS_PER_S as f64,
            },
            adjacency: AdjacencySection::from_spec(&p.adjacency),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Builtin profile name or path to a profile TOML (relative to this
    /// file).
    pub profile: String,
    pub sequence: String,
    pub arch: Arch,
    /// Flat bank index 0..16.
    pub bank: u8,
    pub aggressor_row: String,
    #[serde(default)]
    pub dummy_row: Option<String>,
    /// 64-bit test pattern, hex.
    #[serde(default = "default_pattern")]
    pub pattern: String,
    #[serde(default = "default_suppression_s")]
    pub suppression_s: f64,
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub hammer: bool,
    #[serde(default)]
    pub report_rows: Option<(String, String)>,
    #[serde(default = "default_exclusion")]
    pub exclusion_radius: u32,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
}

fn default_pattern() -> String {
    "0xffffffffffffffff".into()
}
fn default_suppression_s() -> f64 {
    15.0
}
fn default_time_scale() -> f64 {
    crate::sim::DEFAULT_TIME_SCALE
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_exclusion() -> u32 {
    16
}

impl ScenarioConfig {
    pub fn to_scenario(&self, base_dir: &Path) -> Result<Scenario, ConfigError> {
        let invalid = |msg: String| ConfigError::Invalid {
            path: "scenario".into(),
            msg,
        };
        let (profile, timing) = resolve_profile(&self.profile, base_dir)?;
        let bank = BankId::from_flat(self.bank).map_err(|e| invalid(e.to_string()))?;
        let aggressor = parse_hex_u32(&self.aggressor_row).map_err(invalid)?;
        let mut sc = Scenario::new(profile, &self.sequence, self.arch, bank, aggressor);
        if let Some(t) = timing {
            sc.timing = t;
        }
        if let Some(c) = self.controller {
            sc.controller = c;
        }
        if let Some(d) = &self.dummy_row {
            sc.dummy_row = Some(parse_hex_u32(d).map_err(invalid)?);
        }
        sc.pattern = parse_hex_u64(&self.pattern).map_err(invalid)?;
        sc.time_scale = self.time_scale;
        sc.hold_window = (self.suppression_s * PS_PER_S as f64 / self.time_scale) as Ps;
        sc.seed = self.seed;
        sc.hammer = self.hammer;
        sc.exclusion_radius = self.exclusion_radius;
        if let Some((lo, hi)) = &self.report_rows {
            sc.report_rows = (
                parse_hex_u32(lo).map_err(invalid)?,
                parse_hex_u32(hi).map_err(invalid)?,
            );
        }
        Ok(sc)
    }
}

/// Resolve a profile argument: a builtin name or a path to a profile TOML.
pub fn resolve_profile(
    spec: &str,
    base_dir: &Path,
) -> Result<(DeviceProfile, Option<TimingParams>), ConfigError> {
    if let Some(p) = DeviceProfile::builtin(spec) {
        return Ok((p, None));
    }
    let path = if Path::new(spec).is_absolute() {
        Path::new(spec).to_path_buf()
    } else {
        base_dir.join(spec)
    };
    if !path.exists() {
        return Err(ConfigError::UnknownProfile(spec.to_string()));
    }
    let cfg: ProfileConfig = load_toml(&path)?;
    cfg.to_profile().map_err(|msg| ConfigError::Invalid {
        path: path.display().to_string(),
        msg,
    })
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        err: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Toml {
        path: path.display().to_string(),
        err: e.to_string(),
    })
}

pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(value).map_err(|e| ConfigError::Toml {
        path: path.display().to_string(),
        err: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        err: e.to_string(),
    })
}

/// Standalone mapping config file: `[mapping]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingFile {
    pub mapping: MappingConfig,
}

/// Sequence-catalog override file: entries replace same-named builtins, so
/// users can recalibrate or add sequences without rebuilding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogFile {
    pub sequences: Vec<crate::hammer::CatalogEntry>,
}

pub fn merge_catalog(
    mut base: crate::hammer::SequenceCatalog,
    file: CatalogFile,
) -> crate::hammer::SequenceCatalog {
    for entry in file.sequences {
        if let Some(slot) = base
            .entries
            .iter_mut()
            .find(|e| e.seq.name == entry.seq.name)
        {
            *slot = entry;
        } else {
            base.entries.push(entry);
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_roundtrip_through_toml() {
        for name in DeviceProfile::builtin_names() {
            let p = DeviceProfile::builtin(name).unwrap();
            let cfg = ProfileConfig::from_profile(&p, Some(TimingParams::default()));
            let text = toml::to_string_pretty(&cfg).unwrap();
            let back: ProfileConfig = toml::from_str(&text).unwrap();
            let (p2, t2) = back.to_profile().unwrap();
            assert_eq!(p, p2, "profile {name}");
            assert_eq!(t2, Some(TimingParams::default()));
        }
    }

    #[test]
    fn explicit_adjacency_roundtrip() {
        let spec = crate::adjacency::synthetic_spec(5, 64);
        let map = spec.materialize(0..64, 64);
        let section = AdjacencySection::from_spec(&AdjacencySpec::Explicit(map.clone()));
        let text = toml::to_string_pretty(&section).unwrap();
        let back: AdjacencySection = toml::from_str(&text).unwrap();
        match back.to_spec().unwrap() {
            AdjacencySpec::Explicit(m) => assert_eq!(m, map),
            other => panic!("expected explicit, got {other:?}"),
        }
    }

    #[test]
    fn scenario_config_resolves_builtin_profile() {
        let text = r#"
            profile = "vendor1"
            sequence = "clflushopt-pair"
            arch = "skylake"
            bank = 0
            aggressor_row = "0x11411"
        "#;
        let cfg: ScenarioConfig = toml::from_str(text).unwrap();
        let sc = cfg.to_scenario(Path::new(".")).unwrap();
        assert_eq!(sc.aggressor_row, 0x11411);
        assert_eq!(sc.pattern, !0u64);
        assert_eq!(sc.hold_window, 150_000_000_000);
    }

    #[test]
    fn catalog_file_roundtrip_and_merge() {
        let catalog = crate::hammer::builtin_catalog();
        let file = CatalogFile {
            sequences: vec![catalog.entries[0].clone()],
        };
        let text = toml::to_string_pretty(&file).unwrap();
        let back: CatalogFile = toml::from_str(&text).unwrap();
        assert_eq!(back.sequences[0].seq.name, catalog.entries[0].seq.name);
        let mut tweaked = back;
        tweaked.sequences[0].profiles[0].inter_iteration_gap = 99_999;
        let merged = merge_catalog(crate::hammer::builtin_catalog(), tweaked);
        assert_eq!(merged.entries.len(), catalog.entries.len());
        assert_eq!(
            merged.entries[0].profiles[0].inter_iteration_gap,
            99_999
        );
    }

    #[test]
    fn bad_hex_is_reported() {
        let text = r#"
            profile = "vendor1"
            sequence = "clflushopt-pair"
            arch = "skylake"
            bank = 0
            aggressor_row = "0xzz"
        "#;
        let cfg: ScenarioConfig = toml::from_str(text).unwrap();
        assert!(cfg.to_scenario(Path::new(".")).is_err());
    }
}
