//! Open-page-policy memory controller: translates memory requests into timed
//! DDR4 command batches, issues the periodic refresh stream, scrambles the
//! data path, and answers ALERT_n with a recalibration burst.

use crate::addrmap::{LogicalAddr, MappingConfig};
use crate::device::mix;
use crate::hammer::{MemoryRequest, RequestKind};
use crate::protocol::{BankId, DdrCommand, MODE_REGS};
use crate::timing::{BankTimeline, Ps, TimingParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// BIOSes cap how far the refresh interval can be stretched.
pub const MAX_REFRESH_MULTIPLIER: f64 = 3.5;

/// Offset from ACT to the column command, and from the preceding PRE to the
/// ACT. Both live inside the tRC envelope; only ACT spacing is timed
/// precisely.
const T_COL_OFFSET: Ps = 15_000;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("refresh multiplier {0} exceeds the configuration register cap of {MAX_REFRESH_MULTIPLIER}")]
    RefreshMultiplierTooHigh(f64),
    #[error(transparent)]
    Map(#[from] crate::addrmap::MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub scrambling: bool,
    pub parity_enabled: bool,
    /// Scales tREFI; capped at 3.5x like the register it models.
    pub refresh_multiplier: f64,
    pub scramble_seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            scrambling: false,
            parity_enabled: true,
            refresh_multiplier: 1.0,
            scramble_seed: 0x5c3a_11ed_0dd4_u64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BankState {
    pub open_row: Option<u32>,
    pub last_act: Ps,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControllerCounters {
    pub refs_issued: u64,
    pub acts_issued: u64,
    pub row_hits: u64,
    pub row_misses: u64,
    pub alerts_received: u64,
}

/// The controller proper. Page policy is open (rows stay latched after an
/// access), ECC is off, scheduling is in-order per bank.
pub struct MemController {
    pub cfg: ControllerConfig,
    pub params: TimingParams,
    pub mapping: MappingConfig,
    banks: Vec<BankState>,
    timelines: Vec<BankTimeline>,
    next_ref: Ps,
    ref_period: Ps,
    pub counters: ControllerCounters,
    pub recalibrations: Vec<Ps>,
    boot_mode_regs: [u32; MODE_REGS as usize],
}

impl MemController {
    pub fn new(
        cfg: ControllerConfig,
        params: TimingParams,
        mapping: MappingConfig,
        boot_mode_regs: [u32; MODE_REGS as usize],
    ) -> Result<Self, ControllerError> {
        if cfg.refresh_multiplier > MAX_REFRESH_MULTIPLIER || cfg.refresh_multiplier < 1.0 {
            return Err(ControllerError::RefreshMultiplierTooHigh(
                cfg.refresh_multiplier,
            ));
        }
        let ref_period = (params.t_refi as f64 * cfg.refresh_multiplier).round() as Ps;
        Ok(MemController {
            cfg,
            params,
            mapping,
            banks: vec![BankState::default(); 16],
            timelines: vec![BankTimeline::default(); 16],
            next_ref: 0,
            ref_period,
            counters: ControllerCounters::default(),
            recalibrations: Vec::new(),
            boot_mode_regs,
        })
    }

    /// Exact refresh cadence: tREFI times the configured multiplier.
    pub fn ref_period(&self) -> Ps {
        self.ref_period
    }

    pub fn next_refresh_at(&self) -> Ps {
        self.next_ref
    }

    /// Issue the refresh now due. Any open row is precharged first (REF
    /// requires all banks idle), and every bank is charged the refresh time.
    pub fn issue_refresh(&mut self) -> Vec<(Ps, DdrCommand)> {
        let at = self.next_ref;
        self.next_ref += self.ref_period;
        let mut out = Vec::with_capacity(2);
        if self.banks.iter().any(|b| b.open_row.is_some()) {
            out.push((at, DdrCommand::PreA));
            for b in &mut self.banks {
                b.open_row = None;
            }
        }
        out.push((at, DdrCommand::Ref));
        self.counters.refs_issued += 1;
        for tl in &mut self.timelines {
            tl.note_refresh(at, &self.params);
        }
        out
    }

    /// Earliest time the first row-activating command of `req` could land,
    /// used to order request service against the refresh schedule.
    pub fn preview_grant(&self, la: &LogicalAddr, at: Ps) -> Ps {
        let bank = la.bank.flat() as usize;
        match self.banks[bank].open_row {
            Some(open) if open == la.row => at,
            _ => self.timelines[bank].preview_act(at, &self.params),
        }
    }

    /// Translate one memory request into its command batch. Row hit: a
    /// single column command. Row miss: PRE (if another row is open), ACT
    /// admitted through the bank timeline, then the column command.
    pub fn submit(&mut self, req: &MemoryRequest) -> Result<Vec<(Ps, DdrCommand)>, ControllerError> {
        let pa = self.mapping.virt_to_phys(req.virtual_addr)?;
        let la = self.mapping.phys_to_logical(pa)?;
        Ok(self.submit_logical(&la, req.kind, req.at))
    }

    pub fn submit_logical(
        &mut self,
        la: &LogicalAddr,
        kind: RequestKind,
        at: Ps,
    ) -> Vec<(Ps, DdrCommand)> {
        let bank_idx = la.bank.flat() as usize;
        let column = |bank: BankId, col: u16| match kind {
            RequestKind::Write => DdrCommand::Wr { bank, col },
            RequestKind::Read | RequestKind::FlushRead => DdrCommand::Rd { bank, col },
        };
        match self.banks[bank_idx].open_row {
            Some(open) if open == la.row => {
                self.counters.row_hits += 1;
                vec![(at, column(la.bank, la.col))]
            }
            open => {
                self.counters.row_misses += 1;
                let grant = self.timelines[bank_idx].admit_act(at, &self.params);
                let mut batch = Vec::with_capacity(3);
                if open.is_some() {
                    batch.push((grant.saturating_sub(T_COL_OFFSET).max(at), DdrCommand::Pre { bank: la.bank }));
                }
                batch.push((grant, DdrCommand::Act { bank: la.bank, row: la.row }));
                batch.push((grant + T_COL_OFFSET, column(la.bank, la.col)));
                self.banks[bank_idx].open_row = Some(la.row);
                self.banks[bank_idx].last_act = grant;
                self.counters.acts_issued += 1;
                batch
            }
        }
    }

    /// Address-seeded data scrambling; self-inverse, so the same call
    /// descrambles on the read path. Disabled scrambling is the identity.
    pub fn scramble(&self, word: u64, pa: u64) -> u64 {
        if !self.cfg.scrambling {
            return word;
        }
        word ^ mix(&[self.cfg.scramble_seed, pa >> 3])
    }

    /// ALERT_n handler: log the event and emit MRS writes restoring every
    /// mode register to its boot value.
    pub fn on_alert(&mut self, at: Ps) -> Vec<(Ps, DdrCommand)> {
        self.counters.alerts_received += 1;
        self.recalibrations.push(at);
        self.boot_mode_regs
            .iter()
            .enumerate()
            .map(|(r, &payload)| {
                (
                    at + (r as Ps + 1) * 2_000,
                    DdrCommand::Mrs {
                        register: r as u8,
                        payload,
                    },
                )
            })
            .collect()
    }
}
