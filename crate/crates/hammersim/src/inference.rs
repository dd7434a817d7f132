//! Reverse engineering row adjacency from flip densities: survey each row
//! with refreshes suppressed, classify victims by density and bit-half
//! support, and assemble an adjacency map.

use crate::adjacency::{AdjacencyMap, AdjEntry, Half, MapDiff, VictimKind};
use crate::device::{FlipCell, BITS_PER_ROW, WORDS_PER_ROW};
use crate::injector::{run_protocol, InjectorError, ProtocolScript};
use crate::protocol::BankId;
use crate::sim::Scenario;
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("row 0x{row:x}: {flips} flips with {low_fraction:.1}% low-half support fit neither the whole- nor the half-row rule")]
    AmbiguousSupport {
        row: u32,
        flips: u32,
        low_fraction: f64,
    },
    #[error(transparent)]
    Injector(#[from] InjectorError),
}

/// Flip distribution of one row: the flipped cells plus the two marginals
/// the classifier reads, per-word counts (spatial) and per-bit-position
/// counts (half-row support).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowFlips {
    pub cells: Vec<FlipCell>,
    pub total: u32,
    pub per_word: Vec<u16>,
    pub per_bit: Vec<u32>,
    pub one_to_zero: u32,
}

impl RowFlips {
    pub fn from_cells(cells: &[FlipCell]) -> RowFlips {
        let mut per_word = vec![0u16; WORDS_PER_ROW];
        let mut per_bit = vec![0u32; 64];
        let mut one_to_zero = 0;
        for c in cells {
            per_word[c.word as usize] += 1;
            per_bit[c.bit as usize] += 1;
            one_to_zero += c.one_to_zero as u32;
        }
        RowFlips {
            total: cells.len() as u32,
            cells: cells.to_vec(),
            per_word,
            per_bit,
            one_to_zero,
        }
    }

    pub fn density(&self) -> f64 {
        self.total as f64 / BITS_PER_ROW as f64
    }

    /// Fraction of flips in bit positions 0-31.
    pub fn low_half_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let low: u32 = self.per_bit[..32].iter().sum();
        low as f64 / self.total as f64
    }

    pub fn mean_flips_per_word(&self) -> f64 {
        self.total as f64 / WORDS_PER_ROW as f64
    }
}

/// Per-row flip report from one survey (one aggressor).
#[derive(Debug, Clone, Default)]
pub struct FlipReport {
    pub bank: Option<BankId>,
    pub rows: BTreeMap<u32, RowFlips>,
}

impl FlipReport {
    pub fn new(bank: BankId) -> FlipReport {
        FlipReport {
            bank: Some(bank),
            rows: BTreeMap::new(),
        }
    }

    pub fn density(&self, row: u32) -> f64 {
        self.rows.get(&row).map(|r| r.density()).unwrap_or(0.0)
    }

    pub fn total_flips(&self) -> u64 {
        self.rows.values().map(|r| r.total as u64).sum()
    }

    /// CSV rows `row,word,bit,direction` for every flipped cell.
    pub fn export_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,word,bit,direction")?;
        for (row, flips) in &self.rows {
            for c in &flips.cells {
                let dir = if c.one_to_zero { "1to0" } else { "0to1" };
                writeln!(w, "0x{row:x},{},{},{dir}", c.word, c.bit)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Rows with a lower flip density are noise (retention and strays).
    pub noise_density: f64,
    /// Fraction of flips that must fall in one bit half to call a half row.
    pub half_purity: f64,
    /// Minimum per-half share for a clean whole-row call.
    pub whole_balance: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            noise_density: 0.01,
            half_purity: 0.99,
            whole_balance: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacencyVerdict {
    pub victim: u32,
    pub kind: VictimKind,
    pub density: f64,
}

/// Classify one survey's rows into whole/half victims.
///
/// Rows under the noise floor drop out; rows with essentially all flips in
/// one 32-bit half are half victims on that side; rows with flips balanced
/// across both halves are whole victims. Anything between is reported as
/// ambiguous rather than guessed.
pub fn classify(
    report: &FlipReport,
    thresholds: &Thresholds,
) -> Result<Vec<AdjacencyVerdict>, InferenceError> {
    let mut out = Vec::new();
    for (&row, flips) in &report.rows {
        let density = flips.density();
        if density < thresholds.noise_density {
            continue;
        }
        let low = flips.low_half_fraction();
        let kind = if low >= thresholds.half_purity {
            VictimKind::HalfLow
        } else if low <= 1.0 - thresholds.half_purity {
            VictimKind::HalfHigh
        } else if low >= thresholds.whole_balance && low <= 1.0 - thresholds.whole_balance {
            VictimKind::Whole
        } else {
            return Err(InferenceError::AmbiguousSupport {
                row,
                flips: flips.total,
                low_fraction: low * 100.0,
            });
        };
        out.push(AdjacencyVerdict {
            victim: row,
            kind,
            density,
        });
    }
    Ok(out)
}

/// Assemble per-aggressor verdicts into a map. An aggressor has two physical
/// neighbors per chip group; any half-slot no victim accounts for faces a
/// spare row or the bank edge and gets a marker.
pub fn build_map(verdicts: &BTreeMap<u32, Vec<AdjacencyVerdict>>) -> AdjacencyMap {
    let mut map = AdjacencyMap::default();
    for (&aggressor, vs) in verdicts {
        let mut entry = AdjEntry::default();
        let mut low_slots = 0i32;
        let mut high_slots = 0i32;
        for v in vs {
            entry.victims.push((v.victim, v.kind));
            match v.kind {
                VictimKind::Whole => {
                    low_slots += 1;
                    high_slots += 1;
                }
                VictimKind::HalfLow => low_slots += 1,
                VictimKind::HalfHigh => high_slots += 1,
            }
        }
        for _ in low_slots..2 {
            entry.spares.push(Half::Low);
        }
        for _ in high_slots..2 {
            entry.spares.push(Half::High);
        }
        map.insert(aggressor, entry);
    }
    map
}

/// Exact comparison against ground truth; empty diff is success.
pub fn verify_map(inferred: &AdjacencyMap, truth: &AdjacencyMap) -> Vec<MapDiff> {
    truth.diff(inferred)
}

/// Suggest a noise threshold from the bimodal density histogram: place it at
/// the geometric mean across the widest log-gap between nonzero densities.
pub fn suggest_noise_threshold(densities: &[f64]) -> Option<f64> {
    let mut d: Vec<f64> = densities.iter().copied().filter(|&x| x > 0.0).collect();
    if d.len() < 2 {
        return None;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64)> = None;
    for w in d.windows(2) {
        let gap = w[1].ln() - w[0].ln();
        if best.map(|(g, _)| gap > g).unwrap_or(true) {
            best = Some((gap, (w[0].ln() + w[1].ln()) / 2.0));
        }
    }
    best.map(|(_, mid)| mid.exp())
}

/// One aggressor survey: seed the bank, run the eight-step injection
/// protocol with single-sided hammering, report per-row flips.
pub fn hammer_survey(scenario: &Scenario) -> Result<FlipReport, InferenceError> {
    let script = ProtocolScript::standard(scenario.hold_window);
    let report = run_protocol(&script, scenario)?;
    Ok(report.flips)
}

/// Survey every aggressor in `rows` (in parallel, one simulation instance
/// each), classify, and assemble the inferred map plus the per-row density
/// table.
pub fn infer_map(
    base: &Scenario,
    rows: std::ops::Range<u32>,
    thresholds: &Thresholds,
) -> Result<(AdjacencyMap, BTreeMap<u32, Vec<(u32, f64)>>), InferenceError> {
    let aggressors: Vec<u32> = rows.collect();
    let surveys: Vec<(u32, Result<(Vec<AdjacencyVerdict>, Vec<(u32, f64)>), InferenceError>)> =
        aggressors
            .par_iter()
            .map(|&aggressor| {
                let mut sc = base.clone();
                sc.aggressor_row = aggressor;
                sc.seed = crate::device::mix(&[base.seed, aggressor as u64]);
                let r = hammer_survey(&sc).and_then(|report| {
                    let densities = report
                        .rows
                        .iter()
                        .filter(|(_, f)| f.total > 0)
                        .map(|(&r, f)| (r, f.density()))
                        .collect();
                    let mut verdicts = classify(&report, thresholds)?;
                    verdicts.retain(|v| v.victim != aggressor);
                    Ok((verdicts, densities))
                });
                (aggressor, r)
            })
            .collect();

    let mut per_aggressor = BTreeMap::new();
    let mut densities = BTreeMap::new();
    for (aggressor, result) in surveys {
        let (verdicts, d) = result?;
        per_aggressor.insert(aggressor, verdicts);
        densities.insert(aggressor, d);
    }
    Ok((build_map(&per_aggressor), densities))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(rows: Vec<(u32, RowFlips)>) -> FlipReport {
        FlipReport {
            bank: None,
            rows: rows.into_iter().collect(),
        }
    }

    fn flips(total: u32, low_frac: f64) -> RowFlips {
        let low = (total as f64 * low_frac).round() as u32;
        let high = total - low;
        let mut per_bit = vec![0u32; 64];
        // Spread within each half.
        for b in 0..32 {
            per_bit[b] = low / 32 + ((b as u32) < low % 32) as u32;
        }
        for b in 32..64 {
            per_bit[b] = high / 32 + ((b as u32 - 32) < high % 32) as u32;
        }
        let mut per_word = vec![0u16; WORDS_PER_ROW];
        let mut left = total;
        let mut i = 0;
        while left > 0 {
            let n = left.min(64);
            per_word[i] = n as u16;
            left -= n;
            i += 1;
        }
        RowFlips {
            cells: Vec::new(),
            total,
            per_word,
            per_bit,
            one_to_zero: total,
        }
    }

    #[test]
    fn whole_half_and_noise_classification() {
        let t = Thresholds::default();
        let r = report_with(vec![
            (1, flips(50_000, 0.5)),   // whole: spread across halves
            (2, flips(26_500, 1.0)),   // half-low: positions 0-31 only
            (3, flips(24_700, 0.0)),   // half-high
            (4, flips(300, 0.5)),      // below 1% noise floor
        ]);
        let verdicts = classify(&r, &t).unwrap();
        assert_eq!(verdicts.len(), 3);
        assert_eq!(verdicts[0].kind, VictimKind::Whole);
        assert_eq!(verdicts[1].kind, VictimKind::HalfLow);
        assert_eq!(verdicts[2].kind, VictimKind::HalfHigh);
    }

    #[test]
    fn ambiguous_support_is_an_error() {
        let t = Thresholds::default();
        let r = report_with(vec![(9, flips(50_000, 0.9))]);
        assert!(matches!(
            classify(&r, &t),
            Err(InferenceError::AmbiguousSupport { row: 9, .. })
        ));
    }

    #[test]
    fn build_map_emits_spare_markers() {
        let mut verdicts = BTreeMap::new();
        verdicts.insert(
            0u32,
            vec![
                AdjacencyVerdict { victim: 1, kind: VictimKind::Whole, density: 0.7 },
                AdjacencyVerdict { victim: 15, kind: VictimKind::HalfHigh, density: 0.4 },
            ],
        );
        let map = build_map(&verdicts);
        let e = &map.entries[&0];
        assert_eq!(e.spares, vec![Half::Low]);
        // A lone whole neighbor leaves one full side missing.
        let mut verdicts = BTreeMap::new();
        verdicts.insert(
            0u32,
            vec![AdjacencyVerdict { victim: 1, kind: VictimKind::Whole, density: 0.7 }],
        );
        let map = build_map(&verdicts);
        assert_eq!(map.entries[&0].spares, vec![Half::Low, Half::High]);
    }

    #[test]
    fn verify_map_diffs() {
        let spec = crate::adjacency::AdjacencySpec::Linear;
        let truth = spec.materialize(0..8, 8);
        let mut inferred = truth.clone();
        assert!(verify_map(&inferred, &truth).is_empty());
        inferred.entries.get_mut(&2).unwrap().victims.pop();
        assert_eq!(verify_map(&inferred, &truth).len(), 1);
    }

    #[test]
    fn threshold_suggestion_splits_bimodal_densities() {
        let densities = [0.00003, 0.00002, 0.00003, 0.4, 0.38, 0.77];
        let t = suggest_noise_threshold(&densities).unwrap();
        assert!(t > 0.0001 && t < 0.3, "suggested {t}");
    }

    #[test]
    fn report_marginals_consistent() {
        let cells: Vec<FlipCell> = (0..200)
            .map(|i| FlipCell {
                word: (i * 7 % WORDS_PER_ROW as u32) as u16,
                bit: (i % 64) as u8,
                one_to_zero: true,
            })
            .collect();
        let r = RowFlips::from_cells(&cells);
        assert_eq!(r.total, 200);
        assert_eq!(r.per_word.iter().map(|&x| x as u32).sum::<u32>(), r.total);
        assert_eq!(r.per_bit.iter().sum::<u32>(), r.total);
    }
}
