//! Command-bus trace capture and the two metrics everything else hangs off:
//! the ACTs-per-tREFI distribution and the ACT-to-ACT latency CDF.

use crate::protocol::{BankId, CmdKind, DdrCommand};
use crate::timing::Ps;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzerError {
    #[error("trace needs at least two REF records to delimit tREFI windows")]
    InsufficientRefs,
    #[error("trace needs at least two ACT records for latency deltas")]
    InsufficientActs,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for AnalyzerError {
    fn from(e: std::io::Error) -> Self {
        AnalyzerError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: Ps,
    pub cmd: DdrCommand,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

/// Command/address predicate that arms a capture.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Trigger {
    pub kind: Option<CmdKind>,
    pub bank: Option<BankId>,
    pub row: Option<u32>,
}

impl Trigger {
    pub fn any() -> Self {
        Trigger::default()
    }

    pub fn matches(&self, cmd: &DdrCommand) -> bool {
        if let Some(k) = self.kind {
            if cmd.kind() != k {
                return false;
            }
        }
        if let Some(b) = self.bank {
            if cmd.bank() != Some(b) {
                return false;
            }
        }
        if let Some(r) = self.row {
            match cmd {
                DdrCommand::Act { row, .. } if *row == r => {}
                _ => return false,
            }
        }
        true
    }
}

/// Append-only capture: records everything from the first trigger match on.
#[derive(Debug, Clone)]
pub struct Capture {
    pub trigger: Trigger,
    armed: bool,
    records: Vec<TraceRecord>,
}

impl Capture {
    pub fn new(trigger: Trigger) -> Self {
        Capture {
            trigger,
            armed: false,
            records: Vec::new(),
        }
    }

    pub fn record(&mut self, at: Ps, cmd: DdrCommand) {
        if !self.armed && self.trigger.matches(&cmd) {
            self.armed = true;
        }
        if self.armed {
            self.records.push(TraceRecord { at, cmd });
        }
    }

    /// Time-sorted trace (stable, so equal timestamps keep emission order).
    pub fn finish(mut self) -> Trace {
        self.records.sort_by_key(|r| r.at);
        Trace {
            records: self.records,
        }
    }
}

impl Trace {
    /// ACT counts between consecutive REF records.
    pub fn acts_per_trefi(&self) -> Result<Vec<u64>, AnalyzerError> {
        let refs: Vec<usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.cmd.kind() == CmdKind::Ref)
            .map(|(i, _)| i)
            .collect();
        if refs.len() < 2 {
            return Err(AnalyzerError::InsufficientRefs);
        }
        Ok(refs
            .windows(2)
            .map(|w| {
                self.records[w[0]..w[1]]
                    .iter()
                    .filter(|r| r.cmd.kind() == CmdKind::Act)
                    .count() as u64
            })
            .collect())
    }

    /// Consecutive ACT-to-ACT deltas, sorted.
    pub fn act_latencies(&self) -> Result<LatencyDist, AnalyzerError> {
        let acts: Vec<Ps> = self
            .records
            .iter()
            .filter(|r| r.cmd.kind() == CmdKind::Act)
            .map(|r| r.at)
            .collect();
        if acts.len() < 2 {
            return Err(AnalyzerError::InsufficientActs);
        }
        let mut deltas: Vec<Ps> = acts.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.sort_unstable();
        Ok(LatencyDist { deltas })
    }
}

/// Sorted latency deltas with percentile and mode accessors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyDist {
    deltas: Vec<Ps>,
}

impl LatencyDist {
    pub fn deltas(&self) -> &[Ps] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Nearest-rank percentile, p in [0, 100].
    pub fn percentile(&self, p: f64) -> Ps {
        let n = self.deltas.len();
        let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
        self.deltas[rank - 1]
    }

    /// Most frequent exact delta.
    pub fn mode(&self) -> Ps {
        let mut best = (0u64, 0usize);
        let mut i = 0;
        while i < self.deltas.len() {
            let v = self.deltas[i];
            let mut j = i;
            while j < self.deltas.len() && self.deltas[j] == v {
                j += 1;
            }
            if j - i > best.1 {
                best = (v, j - i);
            }
            i = j;
        }
        best.0
    }

    /// Fraction of deltas within `tol` of `value`.
    pub fn fraction_near(&self, value: Ps, tol: Ps) -> f64 {
        let lo = value.saturating_sub(tol);
        let hi = value + tol;
        let n = self
            .deltas
            .iter()
            .filter(|&&d| d >= lo && d <= hi)
            .count();
        n as f64 / self.deltas.len() as f64
    }

    /// Deltas not within `tol` of `value`.
    pub fn outliers(&self, value: Ps, tol: Ps) -> Vec<Ps> {
        let lo = value.saturating_sub(tol);
        let hi = value + tol;
        self.deltas
            .iter()
            .copied()
            .filter(|&d| d < lo || d > hi)
            .collect()
    }

    /// (value, cumulative fraction) points, gnuplot-ready.
    pub fn cdf_points(&self) -> Vec<(Ps, f64)> {
        let n = self.deltas.len() as f64;
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.deltas.len() {
            let v = self.deltas[i];
            let mut j = i;
            while j < self.deltas.len() && self.deltas[j] == v {
                j += 1;
            }
            out.push((v, j as f64 / n));
            i = j;
        }
        out
    }
}

pub fn median_u64(values: &[u64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub const TRACE_CSV_HEADER: &str = "t_ps,cmd,bg,ba,row,col";

/// Lossless trace CSV: `t_ps,cmd,bg,ba,row,col` with hex row/col. Fields a
/// command does not carry stay empty; MRS reuses the row column for its
/// payload and bg/ba for the register select.
pub fn export_csv<W: Write>(trace: &Trace, mut w: W) -> Result<(), AnalyzerError> {
    writeln!(w, "{TRACE_CSV_HEADER}")?;
    for r in &trace.records {
        let (bg, ba, row, col) = match r.cmd {
            DdrCommand::Act { bank, row } => (
                bank.group.to_string(),
                bank.bank.to_string(),
                format!("0x{row:x}"),
                String::new(),
            ),
            DdrCommand::Rd { bank, col } | DdrCommand::Wr { bank, col } => (
                bank.group.to_string(),
                bank.bank.to_string(),
                String::new(),
                format!("0x{col:x}"),
            ),
            DdrCommand::Pre { bank } => (
                bank.group.to_string(),
                bank.bank.to_string(),
                String::new(),
                String::new(),
            ),
            DdrCommand::Mrs { register, payload } => (
                (register >> 2).to_string(),
                (register & 3).to_string(),
                format!("0x{payload:x}"),
                String::new(),
            ),
            DdrCommand::PreA | DdrCommand::Ref | DdrCommand::Des => {
                (String::new(), String::new(), String::new(), String::new())
            }
        };
        writeln!(w, "{},{},{},{},{},{}", r.at, r.cmd.kind(), bg, ba, row, col)?;
    }
    Ok(())
}

pub fn import_csv<R: BufRead>(r: R) -> Result<Trace, AnalyzerError> {
    let mut records = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim() != TRACE_CSV_HEADER {
                return Err(AnalyzerError::Parse {
                    line: lineno,
                    msg: format!("expected header {TRACE_CSV_HEADER:?}, got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(AnalyzerError::Parse {
                line: lineno,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| AnalyzerError::Parse { line: lineno, msg };
        let at: Ps = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", fields[0])))?;
        let kind: CmdKind = fields[1].parse().map_err(|e: String| parse_err(e))?;
        let bank = || -> Result<BankId, AnalyzerError> {
            let g = fields[2]
                .parse::<u8>()
                .map_err(|e| parse_err(format!("bad bank group: {e}")))?;
            let b = fields[3]
                .parse::<u8>()
                .map_err(|e| parse_err(format!("bad bank: {e}")))?;
            BankId::new(g, b).map_err(|e| parse_err(e.to_string()))
        };
        let hex = |s: &str| -> Result<u32, AnalyzerError> {
            let digits = s.strip_prefix("0x").unwrap_or(s);
            u32::from_str_radix(digits, 16).map_err(|e| parse_err(format!("bad hex {s:?}: {e}")))
        };
        let cmd = match kind {
            CmdKind::Act => DdrCommand::Act {
                bank: bank()?,
                row: hex(fields[4])?,
            },
            CmdKind::Rd => DdrCommand::Rd {
                bank: bank()?,
                col: hex(fields[5])? as u16,
            },
            CmdKind::Wr => DdrCommand::Wr {
                bank: bank()?,
                col: hex(fields[5])? as u16,
            },
            CmdKind::Pre => DdrCommand::Pre { bank: bank()? },
            CmdKind::PreA => DdrCommand::PreA,
            CmdKind::Ref => DdrCommand::Ref,
            CmdKind::Mrs => {
                let g = fields[2]
                    .parse::<u8>()
                    .map_err(|e| parse_err(format!("bad register bits: {e}")))?;
                let b = fields[3]
                    .parse::<u8>()
                    .map_err(|e| parse_err(format!("bad register bits: {e}")))?;
                DdrCommand::Mrs {
                    register: (g & 1) << 2 | (b & 3),
                    payload: hex(fields[4])?,
                }
            }
            CmdKind::Des => DdrCommand::Des,
        };
        records.push(TraceRecord { at, cmd });
    }
    Ok(Trace { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(g: u8, b: u8) -> BankId {
        BankId::new(g, b).unwrap()
    }

    fn synthetic_trace(acts_per_window: usize, windows: usize) -> Trace {
        let mut cap = Capture::new(Trigger::any());
        let trefi = 7_812_500u64;
        for w in 0..=windows {
            cap.record(w as u64 * trefi, DdrCommand::Ref);
            if w == windows {
                break;
            }
            for a in 0..acts_per_window {
                cap.record(
                    w as u64 * trefi + 1000 + a as u64 * 46_700,
                    DdrCommand::Act {
                        bank: bank(0, 0),
                        row: a as u32,
                    },
                );
            }
        }
        cap.finish()
    }

    #[test]
    fn constant_windows_count_exactly() {
        let t = synthetic_trace(10, 5);
        assert_eq!(t.acts_per_trefi().unwrap(), vec![10; 5]);
    }

    #[test]
    fn window_sum_equals_act_total_between_refs() {
        let t = synthetic_trace(7, 4);
        let windows = t.acts_per_trefi().unwrap();
        let total: u64 = windows.iter().sum();
        assert_eq!(total, 28);
    }

    #[test]
    fn insufficient_refs_and_acts() {
        let t = Trace::default();
        assert_eq!(t.acts_per_trefi(), Err(AnalyzerError::InsufficientRefs));
        assert_eq!(
            t.act_latencies().unwrap_err(),
            AnalyzerError::InsufficientActs
        );
    }

    #[test]
    fn two_acts_single_delta() {
        let mut cap = Capture::new(Trigger::any());
        cap.record(0, DdrCommand::Act { bank: bank(0, 0), row: 1 });
        cap.record(100_000, DdrCommand::Act { bank: bank(0, 0), row: 2 });
        let d = cap.finish().act_latencies().unwrap();
        assert_eq!(d.deltas(), &[100_000]);
        assert_eq!(d.percentile(50.0), 100_000);
        assert_eq!(d.mode(), 100_000);
    }

    #[test]
    fn trigger_arms_capture() {
        let mut cap = Capture::new(Trigger {
            kind: Some(CmdKind::Act),
            bank: Some(bank(0, 3)),
            row: None,
        });
        cap.record(0, DdrCommand::Ref);
        cap.record(10, DdrCommand::Act { bank: bank(0, 1), row: 5 });
        cap.record(20, DdrCommand::Act { bank: bank(0, 3), row: 5 });
        cap.record(30, DdrCommand::Ref);
        let t = cap.finish();
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.records[0].at, 20);
    }

    #[test]
    fn trigger_never_fires_empty_trace() {
        let mut cap = Capture::new(Trigger {
            kind: Some(CmdKind::Mrs),
            ..Default::default()
        });
        cap.record(0, DdrCommand::Ref);
        cap.record(10, DdrCommand::Act { bank: bank(0, 0), row: 1 });
        assert!(cap.finish().records.is_empty());
    }

    #[test]
    fn fixture_three_lines() {
        let text = "t_ps,cmd,bg,ba,row,col\n\
                    0,REF,,,,\n\
                    1000,ACT,1,2,0x11411,\n\
                    2000,RD,1,2,,0x3f\n";
        let t = import_csv(text.as_bytes()).unwrap();
        assert_eq!(
            t.records,
            vec![
                TraceRecord { at: 0, cmd: DdrCommand::Ref },
                TraceRecord {
                    at: 1000,
                    cmd: DdrCommand::Act { bank: bank(1, 2), row: 0x11411 }
                },
                TraceRecord {
                    at: 2000,
                    cmd: DdrCommand::Rd { bank: bank(1, 2), col: 0x3f }
                },
            ]
        );
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "t_ps,cmd,bg,ba,row,col\n0,REF,,,,\nnope,ACT,0,0,0x1,\n";
        match import_csv(text.as_bytes()) {
            Err(AnalyzerError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let mut buf = Vec::new();
        export_csv(&Trace::default(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t_ps,cmd,bg,ba,row,col\n");
    }

    fn arb_cmd() -> impl Strategy<Value = DdrCommand> {
        let b = (0u8..4, 0u8..4).prop_map(|(g, x)| bank(g, x));
        prop_oneof![
            (b.clone(), 0u32..(1 << 18)).prop_map(|(bank, row)| DdrCommand::Act { bank, row }),
            (b.clone(), 0u16..1024).prop_map(|(bank, col)| DdrCommand::Rd { bank, col }),
            (b.clone(), 0u16..1024).prop_map(|(bank, col)| DdrCommand::Wr { bank, col }),
            b.prop_map(|bank| DdrCommand::Pre { bank }),
            Just(DdrCommand::PreA),
            Just(DdrCommand::Ref),
            (0u8..8, 0u32..(1 << 14)).prop_map(|(register, payload)| DdrCommand::Mrs {
                register,
                payload
            }),
            Just(DdrCommand::Des),
        ]
    }

    proptest! {
        #[test]
        fn csv_roundtrip_and_byte_stability(cmds in proptest::collection::vec((0u64..1 << 40, arb_cmd()), 0..60)) {
            let mut records: Vec<TraceRecord> =
                cmds.into_iter().map(|(at, cmd)| TraceRecord { at, cmd }).collect();
            records.sort_by_key(|r| r.at);
            let trace = Trace { records };
            let mut buf = Vec::new();
            export_csv(&trace, &mut buf).unwrap();
            let back = import_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &trace);
            let mut buf2 = Vec::new();
            export_csv(&back, &mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
        }
    }
}
