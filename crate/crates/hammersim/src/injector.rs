//! In-line signal manipulation between controller and device, and the
//! scripted eight-step injection protocol built on it.
//!
//! The injector sits on the command path: holding the button forces A14 low
//! (REF arrives as MRS, RD as WR), and the DIP switch eats device alerts so
//! the controller keeps hammering undisturbed until the experiment is over.

use crate::hammer::StreamStats;
use crate::inference::FlipReport;
use crate::protocol::{apply_a14_fault, SignalWord};
use crate::sim::{Scenario, SimError, Simulation};
use crate::timing::Ps;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InjectorError {
    #[error("script must run steps 1..=8 in order; step {found} appeared at position {pos}")]
    ScriptOrder { pos: usize, found: u8 },
    #[error("aggressor row 0x{0:x} has bit 14 set; the A14 fault would retarget its activations")]
    Bit14Set(u32),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectorEvent {
    HoldStart(Ps),
    HoldEnd(Ps),
    AlertSuppressed(Ps),
    AlertReconnected(Ps),
    Tap(Ps),
    AlertGatedOff(Ps),
    AlertForwarded(Ps),
}

/// Injector state: the button (A14) and the ALERT_n DIP switch.
#[derive(Debug, Default)]
pub struct Injector {
    a14_held_low: bool,
    alert_suppressed: bool,
    tap_pending: u32,
    pub events: Vec<InjectorEvent>,
}

impl Injector {
    pub fn a14_held_low(&self) -> bool {
        self.a14_held_low
    }

    pub fn alert_suppressed(&self) -> bool {
        self.alert_suppressed
    }

    pub fn set_hold(&mut self, held: bool, at: Ps) {
        if held != self.a14_held_low {
            self.a14_held_low = held;
            self.events.push(if held {
                InjectorEvent::HoldStart(at)
            } else {
                InjectorEvent::HoldEnd(at)
            });
        }
    }

    pub fn set_alert_suppressed(&mut self, suppressed: bool, at: Ps) {
        if suppressed != self.alert_suppressed {
            self.alert_suppressed = suppressed;
            self.events.push(if suppressed {
                InjectorEvent::AlertSuppressed(at)
            } else {
                InjectorEvent::AlertReconnected(at)
            });
        }
    }

    /// Tap the button: hold A14 low for exactly one bus command.
    pub fn tap(&mut self, at: Ps) {
        self.tap_pending += 1;
        self.events.push(InjectorEvent::Tap(at));
    }

    /// Pass one command word through the injector.
    pub fn intercept(&mut self, w: &SignalWord, _at: Ps) -> SignalWord {
        let held = self.a14_held_low || self.tap_pending > 0;
        if self.tap_pending > 0 {
            self.tap_pending -= 1;
        }
        apply_a14_fault(w, held)
    }

    /// Forward or eat a device alert.
    pub fn gate_alert(&mut self, device_alert_at: Ps) -> Option<Ps> {
        if self.alert_suppressed {
            self.events.push(InjectorEvent::AlertGatedOff(device_alert_at));
            None
        } else {
            self.events.push(InjectorEvent::AlertForwarded(device_alert_at));
            Some(device_alert_at)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// 1. Boot with CA parity on, ECC off.
    Boot,
    /// 2. Suppress ALERT_n with the DIP switches.
    SuppressAlert,
    /// 3. Begin hammering the target.
    StartHammer,
    /// 4. Hold A14 low for a fixed window: no REFs reach the DIMM, no alerts
    ///    reach the controller.
    HoldA14,
    /// 5. Stop hammering.
    StopHammer,
    /// 6. Reconnect ALERT_n.
    ReconnectAlert,
    /// 7. Tap A14: alerts now flow and the controller recalibrates.
    TapA14,
    /// 8. Inspect the number and spatial distribution of bit flips.
    Inspect,
}

pub const STANDARD_STEPS: [Step; 8] = [
    Step::Boot,
    Step::SuppressAlert,
    Step::StartHammer,
    Step::HoldA14,
    Step::StopHammer,
    Step::ReconnectAlert,
    Step::TapA14,
    Step::Inspect,
];

/// The operational plan: the eight steps in order, with the step-4 hold
/// window. Constructing a script with reordered steps is a hard error.
#[derive(Debug, Clone)]
pub struct ProtocolScript {
    steps: Vec<Step>,
    pub hold_window: Ps,
}

impl ProtocolScript {
    pub fn new(steps: Vec<Step>, hold_window: Ps) -> Result<Self, InjectorError> {
        for (pos, (got, want)) in steps.iter().zip(STANDARD_STEPS.iter()).enumerate() {
            if got != want {
                return Err(InjectorError::ScriptOrder {
                    pos,
                    found: pos as u8 + 1,
                });
            }
        }
        if steps.len() != STANDARD_STEPS.len() {
            return Err(InjectorError::ScriptOrder {
                pos: steps.len(),
                found: steps.len() as u8,
            });
        }
        Ok(ProtocolScript {
            steps,
            hold_window,
        })
    }

    pub fn standard(hold_window: Ps) -> Self {
        ProtocolScript {
            steps: STANDARD_STEPS.to_vec(),
            hold_window,
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }
}

/// What the eight-step run produced, with the counters the methodology
/// checks: REF delivery during the hold, alert gating, recalibration.
#[derive(Debug, Clone)]
pub struct InjectionReport {
    pub controller_refs_during_hold: u64,
    pub device_refs_during_hold: u64,
    pub device_parity_failures: u64,
    pub controller_alerts_during_suppression: u64,
    pub recalibrations: u64,
    pub mode_regs_restored: bool,
    pub acts_issued: u64,
    pub hammer_stats: StreamStats,
    pub flips: FlipReport,
}

/// Run the scripted plan against a scenario.
pub fn run_protocol(
    script: &ProtocolScript,
    scenario: &Scenario,
) -> Result<InjectionReport, InjectorError> {
    // The A14 trick cannot address rows whose bit 14 is high.
    for row in scenario.hammer_rows() {
        if row >> 14 & 1 == 1 {
            return Err(InjectorError::Bit14Set(row));
        }
    }
    debug_assert_eq!(script.steps(), STANDARD_STEPS);

    let mut sim = Simulation::from_scenario(scenario)?;
    let trefi = sim.controller.ref_period();

    // Step 1: boot. Parity on, ECC off, registers at boot values; the bank
    // seeded with the test pattern and the hammered rows with its complement.
    sim.seed_scenario(scenario)?;

    // Step 2: suppress ALERT_n before any traffic.
    sim.injector.set_alert_suppressed(true, 0);

    // Step 3: hammering begins two refresh intervals in.
    let t_hammer = 2 * trefi;
    let t_hold = t_hammer + 2 * trefi;
    let t_hold_end = t_hold + script.hold_window;
    let t_stop = t_hold_end + 2 * trefi;
    let t_reconnect = t_stop + trefi;
    let t_tap = t_reconnect + trefi;
    let t_inspect = t_tap + 4 * trefi;

    let mut stream = sim.hammer_stream(scenario, t_hammer, t_stop)?;
    sim.run_until(&mut stream, t_hold)?;

    // Step 4: hold the button.
    let before_hold = sim.snapshot();
    sim.injector.set_hold(true, t_hold);
    sim.run_until(&mut stream, t_hold_end)?;
    sim.injector.set_hold(false, t_hold_end);
    let after_hold = sim.snapshot();

    // Step 5: hammering stops; queued loop iterations die with it.
    sim.run_until(&mut stream, t_stop)?;
    stream.close();

    // Step 6: reconnect ALERT_n.
    sim.run_until(&mut stream, t_reconnect)?;
    sim.injector.set_alert_suppressed(false, t_reconnect);
    let alerts_while_suppressed = sim.controller.counters.alerts_received;

    // Step 7: tap the button; the next command (a REF) fails parity, the
    // alert flows, the controller recalibrates.
    sim.injector.tap(t_tap);
    sim.run_until(&mut stream, t_inspect)?;

    // Step 8: inspect.
    let flips = sim.inspect_report(scenario, t_inspect)?;
    let stats = stream.stats();

    Ok(InjectionReport {
        controller_refs_during_hold: after_hold.controller_refs - before_hold.controller_refs,
        device_refs_during_hold: after_hold.device_refs - before_hold.device_refs,
        device_parity_failures: sim.device.counters.parity_failures,
        controller_alerts_during_suppression: alerts_while_suppressed,
        recalibrations: sim.controller.recalibrations.len() as u64,
        mode_regs_restored: sim.device.mode_regs_match_boot(),
        acts_issued: sim.controller.counters.acts_issued,
        hammer_stats: stats,
        flips,
    })
}
