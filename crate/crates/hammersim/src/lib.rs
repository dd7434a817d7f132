//! Command-level DDR4 simulator and Rowhammer testing toolkit.
//!
//! The crate models the full measurement stack used to qualify server DRAM
//! against disturbance errors:
//!
//! * [`protocol`] — bit-exact DDR4 command encoding, CA parity, and the A14
//!   line fault that rewrites REF into MRS and RD into WR.
//! * [`timing`] — JEDEC timing parameters, refresh scheduling and ACT
//!   admission (one ACT per tRC, refresh interference included).
//! * [`hammer`] — calibrated behavioral profiles of hammering instruction
//!   sequences (clflush/clflushopt loops, fence variants, uncached loads)
//!   emitting timed request streams.
//! * [`addrmap`] — virtual-to-physical and physical-to-logical address
//!   translation.
//! * [`device`] — the DRAM device: cell arrays, mode registers, disturbance
//!   and retention fault models, per-vendor profiles.
//! * [`controller`] — open-page memory controller, scrambling, ALERT_n
//!   recalibration.
//! * [`injector`] — the in-line A14/ALERT_n fault injector and the
//!   eight-step injection protocol.
//! * [`analyzer`] — bus traces, ACTs-per-tREFI and ACT-to-ACT latency CDFs,
//!   CSV import/export.
//! * [`inference`] — reverse engineering row adjacency (whole- and half-row
//!   patterns) from flip densities.
//! * [`methodology`] — the operational per-row test with batching and
//!   parallel banks.
//!
//! Every run is deterministic for a given seed. See the `examples/`
//! directory for one runnable program per capability, and the `hammersim`
//! binary for the command-line interface.

pub mod addrmap;
pub mod adjacency;
pub mod analyzer;
pub mod cli;
pub mod config;
pub mod controller;
pub mod device;
pub mod hammer;
pub mod inference;
pub mod injector;
pub mod methodology;
pub mod protocol;
pub mod sim;
pub mod timing;

pub use device::DeviceProfile;
pub use protocol::{BankId, DdrCommand};
pub use sim::{Scenario, Simulation};
pub use timing::TimingParams;
