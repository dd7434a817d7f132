//! DDR4 command-bus encoding and decoding.
//!
//! A [`SignalWord`] is one sample of the command/address lines as seen on the
//! bus between controller and DIMM. `RAS`, `CAS` and `WE` share pins with
//! address bits A16, A15 and A14: when `ACT_n` is low those three lines carry
//! row-address bits, otherwise they select the command. This aliasing is what
//! makes the A14 fault interesting — forcing the line low rewrites `REF` into
//! `MRS` and `RD` into `WR` while leaving `ACT`/`PRE`/`WR` usable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row addresses fit in A17..A0.
pub const ROW_ADDR_BITS: u32 = 18;
/// A row has 1024 columns, each one 64-bit word.
pub const COLS_PER_ROW: u16 = 1024;
/// Mode registers MR0..MR7, selected by BG0:BA1:BA0.
pub const MODE_REGS: u8 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("row 0x{0:x} does not fit in {ROW_ADDR_BITS} address bits")]
    RowOutOfRange(u32),
    #[error("column {0} out of range (rows have {COLS_PER_ROW} columns)")]
    ColOutOfRange(u16),
    #[error("bank group {group} / bank {bank} out of range")]
    BankOutOfRange { group: u8, bank: u8 },
    #[error("mode register {0} out of range")]
    ModeRegOutOfRange(u8),
    #[error("MRS payload 0x{0:x} uses bits 14-16, which alias the command select lines")]
    MrsPayloadAliased(u32),
    #[error("reserved command encoding: ras={ras} cas={cas} we={we}")]
    UnknownCommand { ras: bool, cas: bool, we: bool },
}

/// Bank-group / bank pair. Our DIMMs have 16 banks (4 groups of 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BankId {
    pub group: u8,
    pub bank: u8,
}

impl BankId {
    pub fn new(group: u8, bank: u8) -> Result<Self, ProtocolError> {
        if group > 3 || bank > 3 {
            return Err(ProtocolError::BankOutOfRange { group, bank });
        }
        Ok(BankId { group, bank })
    }

    /// Flat index in [0, 16).
    pub fn flat(self) -> u8 {
        self.group * 4 + self.bank
    }

    pub fn from_flat(idx: u8) -> Result<Self, ProtocolError> {
        BankId::new(idx / 4, idx % 4)
    }
}

impl std::fmt::Display for BankId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "bg{}.ba{}", self.group, self.bank)
    }
}

/// One decoded DDR4 command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DdrCommand {
    Act { bank: BankId, row: u32 },
    Rd { bank: BankId, col: u16 },
    Wr { bank: BankId, col: u16 },
    Pre { bank: BankId },
    PreA,
    Ref,
    Mrs { register: u8, payload: u32 },
    Des,
}

impl DdrCommand {
    pub fn kind(&self) -> CmdKind {
        match self {
            DdrCommand::Act { .. } => CmdKind::Act,
            DdrCommand::Rd { .. } => CmdKind::Rd,
            DdrCommand::Wr { .. } => CmdKind::Wr,
            DdrCommand::Pre { .. } => CmdKind::Pre,
            DdrCommand::PreA => CmdKind::PreA,
            DdrCommand::Ref => CmdKind::Ref,
            DdrCommand::Mrs { .. } => CmdKind::Mrs,
            DdrCommand::Des => CmdKind::Des,
        }
    }

    pub fn bank(&self) -> Option<BankId> {
        match *self {
            DdrCommand::Act { bank, .. }
            | DdrCommand::Rd { bank, .. }
            | DdrCommand::Wr { bank, .. }
            | DdrCommand::Pre { bank } => Some(bank),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmdKind {
    Act,
    Rd,
    Wr,
    Pre,
    PreA,
    Ref,
    Mrs,
    Des,
}

impl std::fmt::Display for CmdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CmdKind::Act => "ACT",
            CmdKind::Rd => "RD",
            CmdKind::Wr => "WR",
            CmdKind::Pre => "PRE",
            CmdKind::PreA => "PREA",
            CmdKind::Ref => "REF",
            CmdKind::Mrs => "MRS",
            CmdKind::Des => "DES",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CmdKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ACT" => CmdKind::Act,
            "RD" => CmdKind::Rd,
            "WR" => CmdKind::Wr,
            "PRE" => CmdKind::Pre,
            "PREA" => CmdKind::PreA,
            "REF" => CmdKind::Ref,
            "MRS" => CmdKind::Mrs,
            "DES" => CmdKind::Des,
            other => return Err(format!("unknown command mnemonic {other:?}")),
        })
    }
}

/// One command-bus sample. Line fields are `true` = electrically high.
///
/// `addr_low` holds A13..A0; A16/A15/A14 live on the `ras_a16`/`cas_a15`/
/// `we_a14` lines and A17 on its own pin, so the full 18-bit address is
/// assembled by [`SignalWord::addr`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalWord {
    pub cs_n: bool,
    pub act_n: bool,
    pub ras_a16: bool,
    pub cas_a15: bool,
    pub we_a14: bool,
    pub a17: bool,
    pub addr_low: u16,
    pub bg: u8,
    pub ba: u8,
    pub parity: bool,
}

impl SignalWord {
    /// Full 18-bit address A17..A0, with the aliased lines folded in.
    pub fn addr(&self) -> u32 {
        (self.a17 as u32) << 17
            | (self.ras_a16 as u32) << 16
            | (self.cas_a15 as u32) << 15
            | (self.we_a14 as u32) << 14
            | self.addr_low as u32
    }

    /// A10 doubles as the auto-precharge / all-banks flag.
    pub fn a10(&self) -> bool {
        self.addr_low >> 10 & 1 == 1
    }

    /// Even parity over the command/address lines the controller drives.
    /// CS_n is a rank select, not a CA line, and is excluded.
    pub fn computed_parity(&self) -> bool {
        let mut acc = self.act_n as u32
            ^ self.ras_a16 as u32
            ^ self.cas_a15 as u32
            ^ self.we_a14 as u32
            ^ self.a17 as u32;
        acc ^= (self.addr_low.count_ones() ^ (self.bg as u32).count_ones()
            ^ (self.ba as u32).count_ones())
            & 1;
        acc & 1 == 1
    }
}

/// Encode a command into bus signals per the DDR4 truth table.
pub fn encode(cmd: &DdrCommand) -> Result<SignalWord, ProtocolError> {
    let mut w = SignalWord {
        cs_n: false,
        act_n: true,
        ras_a16: true,
        cas_a15: true,
        we_a14: true,
        a17: false,
        addr_low: 0,
        bg: 0,
        ba: 0,
        parity: false,
    };
    match *cmd {
        DdrCommand::Des => {
            // Deselected: other lines are don't-care, driven low for determinism.
            w.cs_n = true;
            w.act_n = false;
            w.ras_a16 = false;
            w.cas_a15 = false;
            w.we_a14 = false;
        }
        DdrCommand::Act { bank, row } => {
            check_bank(bank)?;
            if row >> ROW_ADDR_BITS != 0 {
                return Err(ProtocolError::RowOutOfRange(row));
            }
            w.act_n = false;
            w.a17 = row >> 17 & 1 == 1;
            w.ras_a16 = row >> 16 & 1 == 1;
            w.cas_a15 = row >> 15 & 1 == 1;
            w.we_a14 = row >> 14 & 1 == 1;
            w.addr_low = (row & 0x3fff) as u16;
            w.bg = bank.group;
            w.ba = bank.bank;
        }
        DdrCommand::Rd { bank, col } | DdrCommand::Wr { bank, col } => {
            check_bank(bank)?;
            if col >= COLS_PER_ROW {
                return Err(ProtocolError::ColOutOfRange(col));
            }
            w.ras_a16 = true;
            w.cas_a15 = false;
            w.we_a14 = matches!(cmd, DdrCommand::Rd { .. });
            w.addr_low = col;
            w.bg = bank.group;
            w.ba = bank.bank;
        }
        DdrCommand::Pre { bank } => {
            check_bank(bank)?;
            w.ras_a16 = false;
            w.cas_a15 = true;
            w.we_a14 = false;
            w.bg = bank.group;
            w.ba = bank.bank;
        }
        DdrCommand::PreA => {
            w.ras_a16 = false;
            w.cas_a15 = true;
            w.we_a14 = false;
            w.addr_low = 1 << 10;
        }
        DdrCommand::Ref => {
            // Bank bits are don't-care for REF; driving them low means an A14
            // fault lands the corrupted command in MR0.
            w.ras_a16 = false;
            w.cas_a15 = false;
            w.we_a14 = true;
        }
        DdrCommand::Mrs { register, payload } => {
            if register >= MODE_REGS {
                return Err(ProtocolError::ModeRegOutOfRange(register));
            }
            if payload >> ROW_ADDR_BITS != 0 || payload & 0x1c000 != 0 {
                return Err(ProtocolError::MrsPayloadAliased(payload));
            }
            w.ras_a16 = false;
            w.cas_a15 = false;
            w.we_a14 = false;
            w.a17 = payload >> 17 & 1 == 1;
            w.addr_low = (payload & 0x3fff) as u16;
            w.bg = register >> 2;
            w.ba = register & 3;
        }
    }
    w.parity = w.computed_parity();
    Ok(w)
}

fn check_bank(bank: BankId) -> Result<(), ProtocolError> {
    if bank.group > 3 || bank.bank > 3 {
        return Err(ProtocolError::BankOutOfRange {
            group: bank.group,
            bank: bank.bank,
        });
    }
    Ok(())
}

/// Decode bus signals back into a command.
///
/// ZQ-calibration and NOP encodings decode as `DES` (our traffic never issues
/// them); the one reserved select combination is an explicit error so a bad
/// word can never silently misdecode.
pub fn decode(w: &SignalWord) -> Result<DdrCommand, ProtocolError> {
    if w.cs_n {
        return Ok(DdrCommand::Des);
    }
    let bank = BankId::new(w.bg & 3, w.ba & 3).expect("masked");
    if !w.act_n {
        return Ok(DdrCommand::Act {
            bank,
            row: w.addr(),
        });
    }
    match (w.ras_a16, w.cas_a15, w.we_a14) {
        (false, false, false) => Ok(DdrCommand::Mrs {
            register: (w.bg & 1) << 2 | (w.ba & 3),
            payload: w.addr(),
        }),
        (false, false, true) => Ok(DdrCommand::Ref),
        (false, true, false) => {
            if w.a10() {
                Ok(DdrCommand::PreA)
            } else {
                Ok(DdrCommand::Pre { bank })
            }
        }
        (false, true, true) => Err(ProtocolError::UnknownCommand {
            ras: w.ras_a16,
            cas: w.cas_a15,
            we: w.we_a14,
        }),
        (true, false, false) => Ok(DdrCommand::Wr {
            bank,
            col: w.addr_low & 0x3ff,
        }),
        (true, false, true) => Ok(DdrCommand::Rd {
            bank,
            col: w.addr_low & 0x3ff,
        }),
        // ZQ calibration / NOP: never issued by our scenarios.
        (true, true, _) => Ok(DdrCommand::Des),
    }
}

/// The A14 fault: when the injector button is held, the WE/A14 line is forced
/// low downstream of the controller. Parity was computed before the fault, so
/// the device-side parity check fails exactly when the original A14 was high.
pub fn apply_a14_fault(w: &SignalWord, held_low: bool) -> SignalWord {
    let mut out = *w;
    if held_low {
        out.we_a14 = false;
    }
    out
}

/// Device-side CA parity check: pass iff the received parity bit matches the
/// parity recomputed over the received lines.
pub fn check_parity(w: &SignalWord) -> bool {
    w.parity == w.computed_parity()
}

/// One row of the command truth table, for the debug printer.
pub struct TruthTableRow {
    pub name: &'static str,
    pub cs_n: &'static str,
    pub act_n: &'static str,
    pub ras_a16: &'static str,
    pub cas_a15: &'static str,
    pub we_a14: &'static str,
    pub under_a14_fault: &'static str,
}

/// The command encodings this simulator honors, plus what each becomes when
/// the A14 line is held low.
pub fn truth_table() -> Vec<TruthTableRow> {
    vec![
        TruthTableRow { name: "DES", cs_n: "H", act_n: "x", ras_a16: "x", cas_a15: "x", we_a14: "x", under_a14_fault: "DES" },
        TruthTableRow { name: "MRS", cs_n: "L", act_n: "H", ras_a16: "L", cas_a15: "L", we_a14: "L", under_a14_fault: "MRS" },
        TruthTableRow { name: "REF", cs_n: "L", act_n: "H", ras_a16: "L", cas_a15: "L", we_a14: "H", under_a14_fault: "MRS (parity fails)" },
        TruthTableRow { name: "PRE", cs_n: "L", act_n: "H", ras_a16: "L", cas_a15: "H", we_a14: "L", under_a14_fault: "PRE" },
        TruthTableRow { name: "PREA", cs_n: "L", act_n: "H", ras_a16: "L", cas_a15: "H", we_a14: "L", under_a14_fault: "PREA" },
        TruthTableRow { name: "WR", cs_n: "L", act_n: "H", ras_a16: "H", cas_a15: "L", we_a14: "L", under_a14_fault: "WR" },
        TruthTableRow { name: "RD", cs_n: "L", act_n: "H", ras_a16: "H", cas_a15: "L", we_a14: "H", under_a14_fault: "WR (parity fails)" },
        TruthTableRow { name: "ACT", cs_n: "L", act_n: "L", ras_a16: "A16", cas_a15: "A15", we_a14: "A14", under_a14_fault: "ACT, row bit 14 cleared" },
    ]
}
