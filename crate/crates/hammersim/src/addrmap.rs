//! The first two remapping layers: virtual to physical (linear with a base
//! offset, the firmware-mode model) and physical to DDR logical addresses
//! (channel/DIMM/rank/bank/row/column via bit slicing).

use crate::protocol::BankId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("address 0x{addr:x} outside the {bits}-bit mapped range")]
    OutOfRange { addr: u64, bits: u32 },
    #[error("logical address field out of range: {0}")]
    FieldOutOfRange(String),
}

/// DDR logical address. Single channel, DIMM and rank in this layout, kept as
/// fields because the probe format carries them. `byte` is the sub-word
/// offset, so the mapping stays bijective down to byte addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalAddr {
    pub channel: u8,
    pub dimm: u8,
    pub rank: u8,
    pub bank: BankId,
    pub row: u32,
    pub col: u16,
    pub byte: u8,
}

/// Bit-slice assignment from physical address to logical fields.
///
/// The low 3 bits address bytes within a 64-bit word and the next 10 bits the
/// column, so one row is a contiguous 8KB. With `interleaved` off, row bits
/// sit directly above the column and the 4 bank bits on top: consecutive
/// 8KB-aligned addresses walk consecutive rows of one bank. With
/// `interleaved` on, the bank bits move down to pa[16:13] and consecutive 8KB
/// blocks rotate across banks instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub base_offset: u64,
    pub row_bits: u32,
    pub interleaved: bool,
}

pub const BYTE_BITS: u32 = 3;
pub const COL_BITS: u32 = 10;
pub const BANK_BITS: u32 = 4;

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            base_offset: 0,
            row_bits: 17,
            interleaved: false,
        }
    }
}

impl MappingConfig {
    /// Total mapped physical-address width in bits.
    pub fn width(&self) -> u32 {
        BYTE_BITS + COL_BITS + BANK_BITS + self.row_bits
    }

    pub fn memory_size(&self) -> u64 {
        1u64 << self.width()
    }

    pub fn rows_per_bank(&self) -> u32 {
        1u32 << self.row_bits
    }

    fn check(&self, pa: u64) -> Result<(), MapError> {
        if pa >= self.memory_size() {
            return Err(MapError::OutOfRange {
                addr: pa,
                bits: self.width(),
            });
        }
        Ok(())
    }

    /// Linear virtual-to-physical with a constant base offset.
    pub fn virt_to_phys(&self, va: u64) -> Result<u64, MapError> {
        let pa = va.checked_add(self.base_offset).ok_or(MapError::OutOfRange {
            addr: va,
            bits: self.width(),
        })?;
        self.check(pa)?;
        Ok(pa)
    }

    pub fn phys_to_virt(&self, pa: u64) -> Result<u64, MapError> {
        self.check(pa)?;
        pa.checked_sub(self.base_offset).ok_or(MapError::OutOfRange {
            addr: pa,
            bits: self.width(),
        })
    }

    pub fn phys_to_logical(&self, pa: u64) -> Result<LogicalAddr, MapError> {
        self.check(pa)?;
        let col = (pa >> BYTE_BITS & ((1 << COL_BITS) - 1)) as u16;
        let (bank_idx, row) = if self.interleaved {
            let bank = pa >> (BYTE_BITS + COL_BITS) & ((1 << BANK_BITS) - 1);
            let row = pa >> (BYTE_BITS + COL_BITS + BANK_BITS);
            (bank as u8, row as u32)
        } else {
            let row = pa >> (BYTE_BITS + COL_BITS) & ((1u64 << self.row_bits) - 1);
            let bank = pa >> (BYTE_BITS + COL_BITS + self.row_bits);
            (bank as u8, row as u32)
        };
        Ok(LogicalAddr {
            channel: 0,
            dimm: 0,
            rank: 0,
            bank: BankId::from_flat(bank_idx).expect("masked to 4 bits"),
            row,
            col,
            byte: (pa & 7) as u8,
        })
    }

    pub fn logical_to_phys(&self, la: &LogicalAddr) -> Result<u64, MapError> {
        if la.row >= self.rows_per_bank() {
            return Err(MapError::FieldOutOfRange(format!("row 0x{:x}", la.row)));
        }
        if la.col >= 1 << COL_BITS {
            return Err(MapError::FieldOutOfRange(format!("col {}", la.col)));
        }
        if la.channel != 0 || la.dimm != 0 || la.rank != 0 {
            return Err(MapError::FieldOutOfRange(
                "channel/dimm/rank must be 0 in this layout".into(),
            ));
        }
        if la.byte >= 8 {
            return Err(MapError::FieldOutOfRange(format!("byte {}", la.byte)));
        }
        let bank = la.bank.flat() as u64;
        let col = (la.col as u64) << BYTE_BITS | la.byte as u64;
        let pa = if self.interleaved {
            col | bank << (BYTE_BITS + COL_BITS)
                | (la.row as u64) << (BYTE_BITS + COL_BITS + BANK_BITS)
        } else {
            col | (la.row as u64) << (BYTE_BITS + COL_BITS)
                | bank << (BYTE_BITS + COL_BITS + self.row_bits)
        };
        Ok(pa)
    }

    /// Physical address of (bank, row, col 0) — handy for picking hammer
    /// targets.
    pub fn row_base_phys(&self, bank: BankId, row: u32) -> Result<u64, MapError> {
        self.logical_to_phys(&LogicalAddr {
            channel: 0,
            dimm: 0,
            rank: 0,
            bank,
            row,
            col: 0,
            byte: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn virt_identity_and_offset() {
        let cfg = MappingConfig::default();
        assert_eq!(cfg.virt_to_phys(0x1000).unwrap(), 0x1000);
        let with_base = MappingConfig {
            base_offset: 0x100000,
            ..Default::default()
        };
        assert_eq!(with_base.virt_to_phys(0).unwrap(), 0x100000);
        assert_eq!(with_base.phys_to_virt(0x100000).unwrap(), 0);
    }

    #[test]
    fn zero_maps_to_zero() {
        let la = MappingConfig::default().phys_to_logical(0).unwrap();
        assert_eq!((la.bank.flat(), la.row, la.col), (0, 0, 0));
    }

    #[test]
    fn consecutive_8k_blocks_are_consecutive_rows_of_one_bank() {
        let cfg = MappingConfig::default();
        for k in 0u64..16 {
            let la = cfg.phys_to_logical(k * 8192).unwrap();
            assert_eq!(la.row, k as u32, "pa {:#x}", k * 8192);
            assert_eq!(la.bank.flat(), 0);
        }
    }

    #[test]
    fn interleaved_rotates_banks_instead() {
        let cfg = MappingConfig {
            interleaved: true,
            ..Default::default()
        };
        for k in 0u64..16 {
            let la = cfg.phys_to_logical(k * 8192).unwrap();
            assert_eq!(la.bank.flat(), k as u8);
            assert_eq!(la.row, 0);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let cfg = MappingConfig::default();
        assert!(cfg.phys_to_logical(cfg.memory_size()).is_err());
        assert!(cfg.virt_to_phys(cfg.memory_size()).is_err());
    }

    proptest! {
        #[test]
        fn bijective_over_configured_range(pa in 0u64..(1 << 34), interleaved in proptest::bool::ANY) {
            let cfg = MappingConfig { interleaved, ..Default::default() };
            let la = cfg.phys_to_logical(pa).unwrap();
            prop_assert_eq!(cfg.logical_to_phys(&la).unwrap(), pa);
        }

        #[test]
        fn virt_roundtrip(va in 0u64..(1 << 30)) {
            let cfg = MappingConfig { base_offset: 0x4000_0000, ..Default::default() };
            let pa = cfg.virt_to_phys(va).unwrap();
            prop_assert_eq!(cfg.phys_to_virt(pa).unwrap(), va);
        }
    }

    #[test]
    fn small_range_pigeonhole_under_any_config() {
        // Changing the config only reroutes bits; no two addresses collide.
        for interleaved in [false, true] {
            let cfg = MappingConfig { interleaved, ..Default::default() };
            let mut seen = std::collections::HashSet::new();
            for pa in 0u64..4096 {
                let la = cfg.phys_to_logical(pa * 64).unwrap();
                assert!(seen.insert((la.bank.flat(), la.row, la.col, pa * 64 & 56)));
            }
        }
    }
}
