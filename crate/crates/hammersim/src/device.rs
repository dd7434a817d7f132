//! The DRAM device model: cell arrays, mode registers, the disturbance and
//! retention fault models, and per-vendor profiles.
//!
//! Disturbance bookkeeping is windowed: activations increment per-victim
//! counters, a delivered REF latches the window's saturation dose and resets
//! the counters (charge is replenished, partial damage does not carry over),
//! and inspection turns the worst latched dose into per-cell flips through a
//! deterministic per-cell draw. That makes flip resolution idempotent,
//! monotone in the activation count, and independent of when it is called.

use crate::adjacency::{AdjacencySpec, Half, VictimKind};
use crate::protocol::{self, BankId, DdrCommand, SignalWord, MODE_REGS};
use crate::timing::{Ps, PS_PER_S};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const WORDS_PER_ROW: usize = 1024;
pub const BITS_PER_WORD: usize = 64;
/// A row has 65,536 bits.
pub const BITS_PER_ROW: usize = WORDS_PER_ROW * BITS_PER_WORD;
pub const NUM_BANKS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("row 0x{row:x} out of range for {rows} rows per bank")]
    RowOutOfRange { row: u32, rows: u32 },
    #[error("ACT on {bank} while row 0x{open:x} is open (missing PRE)")]
    ActWhileRowOpen { bank: BankId, open: u32 },
    #[error("{kind} on {bank} with no open row")]
    AccessWithNoOpenRow { kind: &'static str, bank: BankId },
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
}

/// Saturated flip densities keyed by adjacency kind and seeded value,
/// expressed as the fraction of a victim row's bits that flip — the way the
/// measured tables read. A half-kind victim concentrates its density in one
/// 32-bit half, so each eligible bit there flips at twice the table value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipProbs {
    pub whole_one: f64,
    pub whole_zero: f64,
    pub half_one: f64,
    pub half_zero: f64,
}

impl FlipProbs {
    /// Per-eligible-bit saturated flip probability.
    fn per_bit(&self, kind: KindClass, seeded_one: bool) -> f64 {
        match (kind, seeded_one) {
            (KindClass::Whole, true) => self.whole_one,
            (KindClass::Whole, false) => self.whole_zero,
            (KindClass::Half, true) => (self.half_one * 2.0).min(1.0),
            (KindClass::Half, false) => (self.half_zero * 2.0).min(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KindClass {
    Whole,
    Half,
}

/// Weak-cell statistics for the no-refresh retention baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionDist {
    /// Fraction of rows with exactly one weak cell.
    pub one_flip: f64,
    /// Fraction of rows with exactly two weak cells.
    pub two_flips: f64,
    /// Real time without refresh before weak cells lose their charge.
    pub threshold: Ps,
}

impl Default for RetentionDist {
    fn default() -> Self {
        RetentionDist {
            one_flip: 0.033,
            two_flips: 0.007,
            threshold: 15 * PS_PER_S,
        }
    }
}

/// Cell polarity layout. All shipped profiles use true-cells (charge encodes
/// a logical 1); the measured flip-direction asymmetry is carried by the
/// seeded-value split in [`FlipProbs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CellPolarity {
    #[default]
    TrueCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub vendor: String,
    pub rows_per_bank: u32,
    pub p_max: FlipProbs,
    /// Extra flip probability for a charged cell per discharged in-row
    /// neighbor (data-pattern coupling observed in mixed-pattern seeds).
    pub coupling: f64,
    /// Activation-count scale of the saturation curve 1 - exp(-N/n0).
    pub n0: f64,
    /// Activations a victim absorbs within one refresh window before any
    /// disturbance accumulates. Zero for the shipped vendor profiles.
    pub act_threshold: u64,
    pub retention: RetentionDist,
    pub cell_polarity: CellPolarity,
    pub adjacency: AdjacencySpec,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("whole_one", self.p_max.whole_one),
            ("whole_zero", self.p_max.whole_zero),
            ("half_one", self.p_max.half_one),
            ("half_zero", self.p_max.half_zero),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("p_max.{name} = {p} outside [0,1]"));
            }
        }
        if self.p_max.whole_one < self.p_max.half_one
            || self.p_max.whole_zero < self.p_max.half_zero
        {
            return Err("whole-row p_max must dominate half-row p_max".into());
        }
        if self.p_max.half_one > 0.5 || self.p_max.half_zero > 0.5 {
            return Err("half-row density cannot exceed 0.5 of the row".into());
        }
        if self.rows_per_bank == 0 {
            return Err("rows_per_bank must be positive".into());
        }
        if self.n0 <= 0.0 {
            return Err("n0 must be positive".into());
        }
        if self.retention.one_flip + self.retention.two_flips >= 1.0 {
            return Err("retention fractions must sum below 1".into());
        }
        Ok(())
    }

    /// Vendor #1: densest lithography, highest flip rates. Whole victims
    /// saturate near 77% on an all-1s seed, half victims near 38% of the
    /// row confined to one bit half. The internal map reverses each aligned
    /// 8-row block in the high chip group, plus the one observed anomaly
    /// where row 7's high half sits next to row 0x7f8.
    pub fn vendor1() -> DeviceProfile {
        let mut overrides = crate::adjacency::AdjacencyMap::default();
        overrides.insert(
            0x0007,
            crate::adjacency::AdjEntry {
                victims: vec![
                    (0x0006, VictimKind::Whole),
                    (0x0008, VictimKind::HalfLow),
                    (0x07f8, VictimKind::HalfHigh),
                ],
                spares: vec![],
            },
        );
        overrides.insert(
            0x07f8,
            crate::adjacency::AdjEntry {
                victims: vec![
                    (0x0007, VictimKind::HalfHigh),
                    (0x07f7, VictimKind::HalfLow),
                    (0x07f9, VictimKind::Whole),
                    (0x0807, VictimKind::HalfHigh),
                ],
                spares: vec![],
            },
        );
        DeviceProfile {
            vendor: "vendor1".into(),
            rows_per_bank: 1 << 17,
            p_max: FlipProbs {
                whole_one: 0.7715,
                whole_zero: 0.038,
                half_one: 0.3825,
                half_zero: 0.019,
            },
            coupling: 0.05,
            n0: 217_147.0,
            act_threshold: 0,
            retention: RetentionDist::default(),
            cell_polarity: CellPolarity::TrueCell,
            adjacency: AdjacencySpec::Overlay {
                base: Box::new(AdjacencySpec::GroupReversal { group: 8 }),
                overrides,
            },
        }
    }

    /// Vendor #2: lower density, 42% whole-row saturation, and a remap
    /// region around 0x11408-0x11416 where the high group pairs rows so that
    /// 0x11411 is whole-adjacent to 0x11410 but only half-adjacent to
    /// 0x11412, the other half facing 0x11408.
    pub fn vendor2() -> DeviceProfile {
        use VictimKind::*;
        let mut overrides = crate::adjacency::AdjacencyMap::default();
        let base = 0x11400u32;
        let entries: &[(u32, &[(u32, VictimKind)], &[Half])] = &[
            (0x07, &[(0x06, Whole), (0x08, HalfLow), (0x09, HalfHigh)], &[]),
            (0x08, &[(0x07, HalfLow), (0x09, Whole), (0x11, HalfHigh)], &[]),
            (0x09, &[(0x07, HalfHigh), (0x08, Whole), (0x10, HalfLow)], &[]),
            (0x10, &[(0x09, HalfLow), (0x11, Whole), (0x13, HalfHigh)], &[]),
            (0x11, &[(0x08, HalfHigh), (0x10, Whole), (0x12, HalfLow)], &[]),
            (0x12, &[(0x11, HalfLow), (0x13, Whole), (0x15, HalfHigh)], &[]),
            (0x13, &[(0x10, HalfHigh), (0x12, Whole), (0x14, HalfLow)], &[]),
            (0x14, &[(0x13, HalfLow), (0x15, Whole), (0x16, HalfHigh)], &[]),
            (0x15, &[(0x12, HalfHigh), (0x14, Whole), (0x16, HalfLow)], &[]),
            (0x16, &[(0x14, HalfHigh), (0x15, HalfLow), (0x17, Whole)], &[]),
            // Rows 0x0a..0x0f are remapped into an isolated island.
            (0x0a, &[(0x0b, Whole)], &[Half::Low, Half::High]),
            (0x0b, &[(0x0a, Whole), (0x0c, Whole)], &[]),
            (0x0c, &[(0x0b, Whole), (0x0d, Whole)], &[]),
            (0x0d, &[(0x0c, Whole), (0x0e, Whole)], &[]),
            (0x0e, &[(0x0d, Whole), (0x0f, Whole)], &[]),
            (0x0f, &[(0x0e, Whole)], &[Half::Low, Half::High]),
        ];
        for (off, victims, spares) in entries {
            overrides.insert(
                base + off,
                crate::adjacency::AdjEntry {
                    victims: victims.iter().map(|(o, k)| (base + o, *k)).collect(),
                    spares: spares.to_vec(),
                },
            );
        }
        DeviceProfile {
            vendor: "vendor2".into(),
            rows_per_bank: 1 << 17,
            p_max: FlipProbs {
                whole_one: 0.421,
                whole_zero: 0.02,
                half_one: 0.235,
                half_zero: 0.01,
            },
            coupling: 0.0,
            n0: 217_147.0,
            act_threshold: 0,
            retention: RetentionDist::default(),
            cell_polarity: CellPolarity::TrueCell,
            adjacency: AdjacencySpec::Overlay {
                base: Box::new(AdjacencySpec::Linear),
                overrides,
            },
        }
    }

    /// Vendor #3: least dense lithography, two orders of magnitude fewer
    /// flips (neighbor densities around 0.08%), plain linear map.
    pub fn vendor3() -> DeviceProfile {
        DeviceProfile {
            vendor: "vendor3".into(),
            rows_per_bank: 1 << 17,
            p_max: FlipProbs {
                whole_one: 0.0008,
                whole_zero: 0.0001,
                half_one: 0.0003,
                half_zero: 0.00005,
            },
            coupling: 0.0,
            n0: 217_147.0,
            act_threshold: 0,
            retention: RetentionDist::default(),
            cell_polarity: CellPolarity::TrueCell,
            adjacency: AdjacencySpec::Linear,
        }
    }

    /// Random small-bank profile for inference oracle runs: strong flip
    /// probabilities well above the classifier noise floor and a fast
    /// saturation scale so short simulated windows saturate.
    pub fn synthetic(seed: u64, rows_per_bank: u32) -> DeviceProfile {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed);
        let whole_one = rng.gen_range(0.35..0.75);
        DeviceProfile {
            vendor: format!("synthetic-{seed}"),
            rows_per_bank,
            p_max: FlipProbs {
                whole_one,
                whole_zero: 0.01,
                half_one: whole_one * 0.45,
                half_zero: 0.005,
            },
            coupling: 0.0,
            n0: 500.0,
            act_threshold: 0,
            retention: RetentionDist::default(),
            cell_polarity: CellPolarity::TrueCell,
            adjacency: crate::adjacency::synthetic_spec(seed, rows_per_bank),
        }
    }

    /// A DIMM the production test should pass: disturbance needs more
    /// activations per refresh window than any sequence can deliver.
    pub fn resilient() -> DeviceProfile {
        DeviceProfile {
            vendor: "resilient".into(),
            p_max: FlipProbs {
                whole_one: 1e-5,
                whole_zero: 1e-6,
                half_one: 1e-5,
                half_zero: 1e-6,
            },
            coupling: 0.0,
            act_threshold: 2_000,
            adjacency: AdjacencySpec::Linear,
            ..Self::vendor1()
        }
    }

    /// A DIMM that survives the normal refresh rate but shows hundreds of
    /// flips once the refresh interval is stretched 3.5x.
    pub fn marginal() -> DeviceProfile {
        DeviceProfile {
            vendor: "marginal".into(),
            p_max: FlipProbs {
                whole_one: 0.7715,
                whole_zero: 0.038,
                half_one: 0.3825,
                half_zero: 0.019,
            },
            coupling: 0.0,
            n0: 50_000.0,
            act_threshold: 250,
            adjacency: AdjacencySpec::Linear,
            ..Self::vendor1()
        }
    }

    pub fn builtin(name: &str) -> Option<DeviceProfile> {
        match name {
            "vendor1" => Some(Self::vendor1()),
            "vendor2" => Some(Self::vendor2()),
            "vendor3" => Some(Self::vendor3()),
            "resilient" => Some(Self::resilient()),
            "marginal" => Some(Self::marginal()),
            _ => None,
        }
    }

    /// The vendor profiles shipped with the tool.
    pub fn builtin_names() -> [&'static str; 3] {
        ["vendor1", "vendor2", "vendor3"]
    }
}

/// One flipped cell, in the row it was observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipCell {
    pub word: u16,
    pub bit: u8,
    /// true: the cell was seeded 1 and discharged to 0.
    pub one_to_zero: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceCounters {
    pub refs_delivered: u64,
    pub mrs_received: u64,
    pub acts: u64,
    pub parity_failures: u64,
}

#[derive(Debug, Clone)]
struct RowState {
    seeded: Vec<u64>,
    data: Vec<u64>,
}

impl RowState {
    fn from_fill(fill: u64) -> Self {
        RowState {
            seeded: vec![fill; WORDS_PER_ROW],
            data: vec![fill; WORDS_PER_ROW],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DisturbState {
    /// ACT counts since the last REF: [half][kind] with kind 0 = whole.
    n: [[u64; 2]; 2],
    /// Worst per-window saturation dose seen since seeding.
    latched: [[f64; 2]; 2],
}

impl DisturbState {
    fn is_idle(&self) -> bool {
        self.n == [[0; 2]; 2] && self.latched == [[0.0; 2]; 2]
    }
}

struct DevBank {
    fill: u64,
    rows: HashMap<u32, RowState>,
    disturb: HashMap<u32, DisturbState>,
    open_row: Option<u32>,
}

impl DevBank {
    fn new(fill: u64) -> Self {
        DevBank {
            fill,
            rows: HashMap::new(),
            disturb: HashMap::new(),
            open_row: None,
        }
    }
}

/// A 16-bank DDR4 device with the configured fault profile.
pub struct DramDevice {
    pub profile: DeviceProfile,
    time_scale: f64,
    seed: u64,
    pub parity_check: bool,
    banks: Vec<DevBank>,
    pub mode_regs: [u32; MODE_REGS as usize],
    boot_regs: [u32; MODE_REGS as usize],
    last_ref: Ps,
    max_ref_gap: Ps,
    pub counters: DeviceCounters,
    adj_cache: HashMap<u32, crate::adjacency::AdjEntry>,
}

/// Mode-register contents programmed at boot; MR0 carries the timing mode
/// word a corrupted REF visibly overwrites with zero.
pub const BOOT_MODE_REGS: [u32; 8] = [0x0944, 0x0201, 0x0018, 0x0220, 0x0000, 0x0400, 0x0800, 0x0000];

impl DramDevice {
    pub fn new(profile: DeviceProfile, seed: u64, time_scale: f64, parity_check: bool) -> Self {
        debug_assert!(profile.validate().is_ok());
        DramDevice {
            profile,
            time_scale,
            seed,
            parity_check,
            banks: (0..NUM_BANKS).map(|_| DevBank::new(0)).collect(),
            mode_regs: BOOT_MODE_REGS,
            boot_regs: BOOT_MODE_REGS,
            last_ref: 0,
            max_ref_gap: 0,
            counters: DeviceCounters::default(),
            adj_cache: HashMap::new(),
        }
    }

    pub fn boot_mode_regs(&self) -> [u32; MODE_REGS as usize] {
        self.boot_regs
    }

    pub fn mode_regs_match_boot(&self) -> bool {
        self.mode_regs == self.boot_regs
    }

    /// Longest refresh-free gap seen so far, including the one still open at
    /// `now`.
    pub fn ref_gap(&self, now: Ps) -> Ps {
        self.max_ref_gap.max(now.saturating_sub(self.last_ref))
    }

    fn scaled_retention_threshold(&self) -> Ps {
        (self.profile.retention.threshold as f64 / self.time_scale) as Ps
    }

    /// Receive one bus word: check CA parity (alert on mismatch), decode and
    /// execute. Corrupted commands still execute; suppressing their effects
    /// is the memory controller's job, and the injector may be eating the
    /// alert.
    pub fn receive(&mut self, word: &SignalWord, t: Ps) -> Result<Option<Ps>, DeviceError> {
        let alert = if self.parity_check && !protocol::check_parity(word) {
            self.counters.parity_failures += 1;
            Some(t)
        } else {
            None
        };
        let cmd = protocol::decode(word)?;
        self.apply_command(&cmd, t)?;
        Ok(alert)
    }

    pub fn apply_command(&mut self, cmd: &DdrCommand, t: Ps) -> Result<(), DeviceError> {
        match *cmd {
            DdrCommand::Des => {}
            DdrCommand::Act { bank, row } => {
                let rows = self.profile.rows_per_bank;
                if row >= rows {
                    return Err(DeviceError::RowOutOfRange { row, rows });
                }
                let b = &mut self.banks[bank.flat() as usize];
                if let Some(open) = b.open_row {
                    return Err(DeviceError::ActWhileRowOpen { bank, open });
                }
                b.open_row = Some(row);
                self.counters.acts += 1;
                self.bump_disturbance(bank, row);
            }
            DdrCommand::Rd { bank, .. } => {
                let b = &self.banks[bank.flat() as usize];
                if b.open_row.is_none() {
                    return Err(DeviceError::AccessWithNoOpenRow { kind: "RD", bank });
                }
            }
            DdrCommand::Wr { bank, .. } => {
                let b = &self.banks[bank.flat() as usize];
                if b.open_row.is_none() {
                    return Err(DeviceError::AccessWithNoOpenRow { kind: "WR", bank });
                }
            }
            DdrCommand::Pre { bank } => {
                self.banks[bank.flat() as usize].open_row = None;
            }
            DdrCommand::PreA => {
                for b in &mut self.banks {
                    b.open_row = None;
                }
            }
            DdrCommand::Ref => {
                self.counters.refs_delivered += 1;
                self.max_ref_gap = self.max_ref_gap.max(t.saturating_sub(self.last_ref));
                self.last_ref = t;
                self.fold_all_windows();
            }
            DdrCommand::Mrs { register, payload } => {
                self.counters.mrs_received += 1;
                self.mode_regs[register as usize] = payload;
            }
        }
        Ok(())
    }

    fn adjacency_entry(&mut self, row: u32) -> Option<&crate::adjacency::AdjEntry> {
        if !self.adj_cache.contains_key(&row) {
            let e = self
                .profile
                .adjacency
                .entry(row, self.profile.rows_per_bank)?;
            self.adj_cache.insert(row, e);
        }
        self.adj_cache.get(&row)
    }

    fn bump_disturbance(&mut self, bank: BankId, aggressor: u32) {
        let Some(entry) = self.adjacency_entry(aggressor).cloned() else {
            return;
        };
        let b = &mut self.banks[bank.flat() as usize];
        for (victim, kind) in entry.victims {
            let d = b.disturb.entry(victim).or_default();
            match kind {
                VictimKind::Whole => {
                    d.n[0][0] += 1;
                    d.n[1][0] += 1;
                }
                VictimKind::HalfLow => d.n[0][1] += 1,
                VictimKind::HalfHigh => d.n[1][1] += 1,
            }
        }
    }

    fn dose(&self, n: u64) -> f64 {
        let eff = n.saturating_sub(self.profile.act_threshold) as f64;
        1.0 - (-eff / self.profile.n0).exp()
    }

    /// Latch each victim's current window into its max dose and reset the
    /// counters. Runs on every delivered REF.
    fn fold_all_windows(&mut self) {
        let n0 = self.profile.n0;
        let theta = self.profile.act_threshold;
        for bank in &mut self.banks {
            bank.disturb.retain(|_, d| {
                for half in 0..2 {
                    for kind in 0..2 {
                        let n = d.n[half][kind];
                        if n > 0 {
                            let eff = n.saturating_sub(theta) as f64;
                            let dose = 1.0 - (-eff / n0).exp();
                            if dose > d.latched[half][kind] {
                                d.latched[half][kind] = dose;
                            }
                            d.n[half][kind] = 0;
                        }
                    }
                }
                !d.is_idle()
            });
        }
    }

    /// Direct array write (test-harness path, bypassing timing): sets both
    /// the live data and the seeded baseline and forgets prior disturbance.
    pub fn write_row(&mut self, bank: BankId, row: u32, data: &[u64]) -> Result<(), DeviceError> {
        self.check_row(row)?;
        assert_eq!(data.len(), WORDS_PER_ROW);
        let b = &mut self.banks[bank.flat() as usize];
        b.rows.insert(
            row,
            RowState {
                seeded: data.to_vec(),
                data: data.to_vec(),
            },
        );
        b.disturb.remove(&row);
        Ok(())
    }

    pub fn write_row_pattern(&mut self, bank: BankId, row: u32, pattern: u64) -> Result<(), DeviceError> {
        self.check_row(row)?;
        let b = &mut self.banks[bank.flat() as usize];
        b.rows.insert(row, RowState::from_fill(pattern));
        b.disturb.remove(&row);
        Ok(())
    }

    /// Direct array read (test-harness path).
    pub fn read_row(&self, bank: BankId, row: u32) -> Result<Vec<u64>, DeviceError> {
        self.check_row(row)?;
        let b = &self.banks[bank.flat() as usize];
        Ok(match b.rows.get(&row) {
            Some(r) => r.data.clone(),
            None => vec![b.fill; WORDS_PER_ROW],
        })
    }

    /// Fill an entire bank with one word pattern, dropping per-row state.
    pub fn seed_bank(&mut self, bank: BankId, pattern: u64) {
        let b = &mut self.banks[bank.flat() as usize];
        b.fill = pattern;
        b.rows.clear();
        b.disturb.clear();
    }

    fn check_row(&self, row: u32) -> Result<(), DeviceError> {
        let rows = self.profile.rows_per_bank;
        if row >= rows {
            return Err(DeviceError::RowOutOfRange { row, rows });
        }
        Ok(())
    }

    /// Number of weak cells in a row (0, 1 or 2) and their positions,
    /// sampled once per device seed.
    fn weak_cells(&self, bank: BankId, row: u32) -> Vec<(u16, u8)> {
        let h = mix(&[self.seed, 0x7e7e_0001, bank.flat() as u64, row as u64]);
        let u = to_unit(h);
        let r = &self.profile.retention;
        let k = if u < r.two_flips {
            2
        } else if u < r.two_flips + r.one_flip {
            1
        } else {
            0
        };
        let mut out = Vec::with_capacity(k);
        let mut salt = 0u64;
        while out.len() < k {
            let hw = mix(&[self.seed, 0x7e7e_0002, bank.flat() as u64, row as u64, salt]);
            let word = (hw % WORDS_PER_ROW as u64) as u16;
            let bit = ((hw >> 32) % BITS_PER_WORD as u64) as u8;
            if !out.contains(&(word, bit)) {
                out.push((word, bit));
            }
            salt += 1;
        }
        out
    }

    /// Resolve and apply every flip the current fault state implies for one
    /// row, returning the row's full flip list (not just new flips).
    ///
    /// Disturbance: each cell flips iff its per-cell uniform draw falls under
    /// p_max(kind, seeded value) scaled by the worst window dose, with
    /// whole- and half-kind doses combined as independent causes and the
    /// half-kind dose confined to its 32-bit half. Retention: weak cells
    /// discharge once the device has gone `threshold / time_scale` without a
    /// REF. Flips only discharge charged cells, so a seeded 0 in a
    /// true-cell flips only through the (small) anti-cell-equivalent
    /// probability table entry.
    pub fn inspect_row(&mut self, bank: BankId, row: u32, now: Ps) -> Result<Vec<FlipCell>, DeviceError> {
        self.check_row(row)?;
        let bi = bank.flat() as usize;

        // Latch the still-open window without ending it.
        let mut latched = [[0.0f64; 2]; 2];
        if let Some(d) = self.banks[bi].disturb.get(&row) {
            for half in 0..2 {
                for kind in 0..2 {
                    latched[half][kind] = d.latched[half][kind].max(self.dose(d.n[half][kind]));
                }
            }
        }
        let retention_due = self.ref_gap(now) >= self.scaled_retention_threshold();
        let weak = if retention_due {
            self.weak_cells(bank, row)
        } else {
            Vec::new()
        };
        let disturbed = latched.iter().flatten().any(|&d| d > 0.0);
        if !disturbed && weak.is_empty() {
            let b = &self.banks[bi];
            return Ok(b
                .rows
                .get(&row)
                .map(|r| collect_flips(r))
                .unwrap_or_default());
        }

        let fill = self.banks[bi].fill;
        if !self.banks[bi].rows.contains_key(&row) {
            self.banks[bi]
                .rows
                .insert(row, RowState::from_fill(fill));
        }
        let p_max = self.profile.p_max;
        let coupling = self.profile.coupling;
        let seed = self.seed;
        let bankf = bank.flat() as u64;

        let state = self.banks[bi].rows.get_mut(&row).unwrap();
        let seeded = state.seeded.clone();
        for (wi, word) in state.data.iter_mut().enumerate() {
            let base = seeded[wi];
            let mut flip_mask = 0u64;
            for bit in 0..BITS_PER_WORD {
                let half = (bit >= 32) as usize;
                let dw = latched[half][0];
                let dh = latched[half][1];
                if dw == 0.0 && dh == 0.0 {
                    continue;
                }
                let s = base >> bit & 1 == 1;
                let boost = if s && coupling > 0.0 {
                    coupling * zero_neighbor_fraction(&seeded, wi, bit)
                } else {
                    0.0
                };
                let pw = (p_max.per_bit(KindClass::Whole, s) + boost).min(1.0);
                let ph = (p_max.per_bit(KindClass::Half, s) + boost).min(1.0);
                let p = 1.0 - (1.0 - pw * dw) * (1.0 - ph * dh);
                if p > 0.0 {
                    let u = to_unit(mix(&[seed, bankf, row as u64, wi as u64, bit as u64]));
                    if u < p {
                        flip_mask |= 1 << bit;
                    }
                }
            }
            *word = base ^ flip_mask;
        }
        for (wi, bit) in weak {
            // Weak cells only lose charge: a stored 1 decays to 0.
            if seeded[wi as usize] >> bit & 1 == 1 {
                state.data[wi as usize] &= !(1u64 << bit);
            }
        }
        Ok(collect_flips(state))
    }

    /// Flips currently visible in a row without resolving anything new.
    pub fn flips_in_row(&self, bank: BankId, row: u32) -> Vec<FlipCell> {
        self.banks[bank.flat() as usize]
            .rows
            .get(&row)
            .map(collect_flips)
            .unwrap_or_default()
    }
}

fn collect_flips(r: &RowState) -> Vec<FlipCell> {
    let mut out = Vec::new();
    for wi in 0..WORDS_PER_ROW {
        let diff = r.seeded[wi] ^ r.data[wi];
        if diff == 0 {
            continue;
        }
        for bit in 0..BITS_PER_WORD as u8 {
            if diff >> bit & 1 == 1 {
                out.push(FlipCell {
                    word: wi as u16,
                    bit,
                    one_to_zero: r.seeded[wi] >> bit & 1 == 1,
                });
            }
        }
    }
    out
}

/// Fraction of a cell's in-row neighbors (global bit index +/- 1) seeded 0.
fn zero_neighbor_fraction(seeded: &[u64], word: usize, bit: usize) -> f64 {
    let idx = word * BITS_PER_WORD + bit;
    let get = |i: usize| seeded[i / BITS_PER_WORD] >> (i % BITS_PER_WORD) & 1;
    let mut zeros = 0u32;
    let mut total = 0u32;
    if idx > 0 {
        total += 1;
        zeros += (get(idx - 1) == 0) as u32;
    }
    if idx + 1 < BITS_PER_ROW {
        total += 1;
        zeros += (get(idx + 1) == 0) as u32;
    }
    zeros as f64 / total as f64
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a field tuple into one 64-bit hash.
pub(crate) fn mix(vals: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64;
    for &v in vals {
        acc = splitmix64(acc ^ v);
    }
    acc
}

/// Map a hash to [0, 1).
pub(crate) fn to_unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b0() -> BankId {
        BankId::new(0, 0).unwrap()
    }

    fn saturating_acts(profile: &DeviceProfile) -> u64 {
        (profile.n0 * 16.0) as u64 + profile.act_threshold
    }

    fn hammer(dev: &mut DramDevice, bank: BankId, row: u32, acts: u64) {
        // Bare ACT/PRE cycles straight at the device.
        for _ in 0..acts {
            dev.apply_command(&DdrCommand::Act { bank, row }, 0).unwrap();
            dev.apply_command(&DdrCommand::Pre { bank }, 0).unwrap();
        }
    }

    #[test]
    fn vendor_profiles_validate() {
        for name in DeviceProfile::builtin_names() {
            DeviceProfile::builtin(name).unwrap().validate().unwrap();
        }
        DeviceProfile::synthetic(3, 64).validate().unwrap();
    }

    #[test]
    fn vendor_maps_are_symmetric_where_it_matters() {
        let v1 = DeviceProfile::vendor1();
        let map = v1.adjacency.materialize(0..0x900, v1.rows_per_bank);
        map.check_symmetry().unwrap();
        let map = v1.adjacency.materialize(0x11400..0x11440, v1.rows_per_bank);
        map.check_symmetry().unwrap();
        let v2 = DeviceProfile::vendor2();
        let map = v2.adjacency.materialize(0x113f0..0x11430, v2.rows_per_bank);
        map.check_symmetry().unwrap();
    }

    #[test]
    fn vendor2_quoted_topology() {
        let v2 = DeviceProfile::vendor2();
        let e = v2.adjacency.entry(0x11411, v2.rows_per_bank).unwrap();
        assert!(e.victims.contains(&(0x11410, VictimKind::Whole)));
        assert!(e.victims.contains(&(0x11412, VictimKind::HalfLow)));
        assert!(e.victims.contains(&(0x11408, VictimKind::HalfHigh)));
    }

    #[test]
    fn write_read_roundtrip() {
        let mut dev = DramDevice::new(DeviceProfile::synthetic(1, 64), 7, 1.0, true);
        let data: Vec<u64> = (0..WORDS_PER_ROW as u64).map(|i| i.wrapping_mul(0x9e37)).collect();
        dev.write_row(b0(), 5, &data).unwrap();
        assert_eq!(dev.read_row(b0(), 5).unwrap(), data);
    }

    #[test]
    fn unhammered_row_is_unchanged() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 7, 1.0, true);
        dev.seed_bank(b0(), !0u64);
        dev.write_row_pattern(b0(), 10, 0).unwrap();
        let flips = dev.inspect_row(b0(), 10, 0).unwrap();
        assert!(flips.is_empty());
        assert_eq!(dev.read_row(b0(), 10).unwrap(), vec![0u64; WORDS_PER_ROW]);
    }

    #[test]
    fn two_thirds_pattern_popcount() {
        // Seed oracle: popcount of the two-thirds pattern.
        let pattern = 0xb6db6db6db6db6dbu64;
        assert_eq!(pattern.count_ones(), 43);
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 7, 1.0, true);
        dev.seed_bank(b0(), pattern);
        let row = dev.read_row(b0(), 42).unwrap();
        let ones: u32 = row.iter().map(|w| w.count_ones()).sum();
        assert_eq!(ones, 43 * WORDS_PER_ROW as u32);
    }

    #[test]
    fn counters_track_victims_of_measured_map() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 7, 1.0, true);
        dev.seed_bank(b0(), !0u64);
        hammer(&mut dev, b0(), 0x11411, 1);
        let d = &dev.banks[0].disturb;
        // Whole neighbors on both sides.
        assert!(d.contains_key(&0x11410) && d.contains_key(&0x11412));
        assert_eq!(d[&0x11410].n, [[1, 0], [1, 0]]);
        // Half victims get one half only.
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 7, 1.0, true);
        hammer(&mut dev, b0(), 0x11410, 1);
        let d = &dev.banks[0].disturb;
        assert_eq!(d[&0x11411].n, [[1, 0], [1, 0]]);
        assert_eq!(d[&0x1140f].n, [[0, 1], [0, 0]]);
        assert_eq!(d[&0x1141f].n, [[0, 0], [0, 1]]);
    }

    #[test]
    fn ref_clears_counters_and_latches_dose() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 7, 1.0, true);
        hammer(&mut dev, b0(), 0x11411, 10);
        dev.apply_command(&DdrCommand::Ref, 1000).unwrap();
        let d = &dev.banks[0].disturb[&0x11410];
        assert_eq!(d.n, [[0; 2]; 2]);
        assert!(d.latched[0][0] > 0.0);
    }

    #[test]
    fn protocol_violations_error() {
        let mut dev = DramDevice::new(DeviceProfile::synthetic(1, 64), 7, 1.0, true);
        let b = b0();
        assert!(matches!(
            dev.apply_command(&DdrCommand::Rd { bank: b, col: 0 }, 0),
            Err(DeviceError::AccessWithNoOpenRow { .. })
        ));
        dev.apply_command(&DdrCommand::Act { bank: b, row: 1 }, 0).unwrap();
        assert!(matches!(
            dev.apply_command(&DdrCommand::Act { bank: b, row: 2 }, 0),
            Err(DeviceError::ActWhileRowOpen { .. })
        ));
        assert!(dev.apply_command(&DdrCommand::Act { bank: b, row: 64 }, 0).is_err());
    }

    #[test]
    fn saturated_whole_victim_density_all_ones() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 11, 1.0, true);
        dev.seed_bank(b0(), !0u64);
        let n = saturating_acts(&dev.profile);
        hammer(&mut dev, b0(), 0x11411, n);
        let flips = dev.inspect_row(b0(), 0x11410, 0).unwrap();
        let density = flips.len() as f64 / BITS_PER_ROW as f64;
        assert!((density - 0.7715).abs() < 0.01, "density {density}");
        assert!(flips.iter().all(|f| f.one_to_zero));
    }

    #[test]
    fn half_victim_confined_to_its_half() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 11, 1.0, true);
        dev.seed_bank(b0(), !0u64);
        let n = saturating_acts(&dev.profile);
        hammer(&mut dev, b0(), 0x11410, n);
        let low = dev.inspect_row(b0(), 0x1140f, 0).unwrap();
        assert!(!low.is_empty());
        assert!(low.iter().all(|f| f.bit < 32), "half-low victim leaked bits");
        let high = dev.inspect_row(b0(), 0x1141f, 0).unwrap();
        assert!(!high.is_empty());
        assert!(high.iter().all(|f| f.bit >= 32));
        let d = high.len() as f64 / BITS_PER_ROW as f64;
        assert!((d - 0.3825).abs() < 0.01, "half density {d}");
    }

    #[test]
    fn flip_count_monotone_in_act_count() {
        let profile = DeviceProfile::vendor1();
        let mut last = 0usize;
        for acts in [1000u64, 10_000, 100_000, 1_000_000] {
            let mut dev = DramDevice::new(profile.clone(), 11, 1.0, true);
            dev.seed_bank(b0(), !0u64);
            hammer(&mut dev, b0(), 0x11411, acts);
            let flips = dev.inspect_row(b0(), 0x11410, 0).unwrap().len();
            assert!(flips >= last, "{acts} acts: {flips} < {last}");
            last = flips;
        }
        assert!(last > 0);
    }

    #[test]
    fn seed_value_ordering_of_densities() {
        // all-1s > two-thirds > one-third > all-0s on the same victim.
        let mut densities = Vec::new();
        for pattern in [!0u64, 0xb6db6db6db6db6db, 0x4924924924924924, 0u64] {
            let mut dev = DramDevice::new(DeviceProfile::vendor1(), 11, 1.0, true);
            dev.seed_bank(b0(), pattern);
            dev.write_row_pattern(b0(), 0x11411, !pattern).unwrap();
            hammer(&mut dev, b0(), 0x11411, 4_000_000);
            let flips = dev.inspect_row(b0(), 0x11410, 0).unwrap();
            densities.push(flips.len() as f64 / BITS_PER_ROW as f64);
        }
        assert!(densities.windows(2).all(|w| w[0] > w[1]), "{densities:?}");
    }

    #[test]
    fn retention_weak_cells_flip_after_threshold() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 3, 100.0, true);
        dev.seed_bank(b0(), !0u64);
        // Threshold is 15s / 100 = 150ms.
        let below = 100_000_000_000; // 100ms
        let mut ones = 0;
        for row in 0..400 {
            ones += dev.inspect_row(b0(), row, below).unwrap().len();
        }
        assert_eq!(ones, 0);
        let above = 200_000_000_000;
        let mut per_row = Vec::new();
        for row in 0..400 {
            per_row.push(dev.inspect_row(b0(), row, above).unwrap().len());
        }
        let total: usize = per_row.iter().sum();
        assert!(total > 0, "some weak rows expected");
        assert!(per_row.iter().all(|&n| n <= 2));
    }

    #[test]
    fn retention_zero_seed_does_not_flip() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 3, 100.0, true);
        dev.seed_bank(b0(), 0u64);
        let mut total = 0;
        for row in 0..400 {
            total += dev.inspect_row(b0(), row, 200_000_000_000).unwrap().len();
        }
        assert_eq!(total, 0, "discharged cells cannot discharge further");
    }

    #[test]
    fn mrs_overwrites_and_parity_alerts() {
        let mut dev = DramDevice::new(DeviceProfile::vendor1(), 3, 1.0, true);
        assert!(dev.mode_regs_match_boot());
        let w = protocol::encode(&DdrCommand::Ref).unwrap();
        let faulted = protocol::apply_a14_fault(&w, true);
        let alert = dev.receive(&faulted, 5).unwrap();
        assert_eq!(alert, Some(5));
        assert_eq!(dev.mode_regs[0], 0);
        assert!(!dev.mode_regs_match_boot());
        assert_eq!(dev.counters.refs_delivered, 0);
        assert_eq!(dev.counters.mrs_received, 1);
    }
}
