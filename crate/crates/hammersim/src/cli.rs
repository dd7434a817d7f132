//! Command-line interface. The `hammersim` binary is a thin wrapper around
//! [`run`]; each subcommand drives one library capability.

use crate::analyzer::{export_csv, import_csv, median_u64, Trigger};
use crate::config::{load_toml, resolve_profile, save_toml, AdjacencySection, MappingFile, ScenarioConfig};
use crate::device::DeviceProfile;
use crate::hammer::{builtin_catalog, Arch};
use crate::inference::{infer_map, suggest_noise_threshold, Thresholds};
use crate::injector::{run_protocol, ProtocolScript};
use crate::methodology::{format_duration, projected_seconds, run_bank_test, TestPlan, REFERENCE_BANK_ROW_TESTS};
use crate::protocol::{truth_table, BankId};
use crate::sim::{Scenario, Simulation, DEFAULT_TIME_SCALE};
use crate::timing::{TimingParams, PS_PER_MS, PS_PER_S};
use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "hammersim",
    about = "Command-level DDR4 simulator and Rowhammer testing toolkit",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Run a hammering sequence and capture the device-side command trace.
    Simulate(SimulateArgs),
    /// Compute ACTs-per-tREFI and latency metrics from a trace CSV.
    Analyze(AnalyzeArgs),
    /// Run the eight-step fault-injection protocol from a scenario file.
    Inject(InjectArgs),
    /// Reverse engineer row adjacency by surveying a row range.
    Infer(InferArgs),
    /// Run the per-row production test over banks and rows.
    Test(TestArgs),
    /// Decompose an address through the configured mapping.
    Map(MapArgs),
    /// List device profiles and the instruction-sequence catalog.
    Profiles,
    /// Print the DDR4 command truth table and the A14 fault column.
    TruthTable,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Instruction sequence name from the catalog.
    #[arg(long)]
    pub sequence: String,
    #[arg(long, value_enum, default_value_t = Arch::Skylake)]
    pub arch: Arch,
    /// Duration in tREFI windows.
    #[arg(long, default_value_t = 100)]
    pub windows: u64,
    /// Device profile (builtin name or profile TOML path).
    #[arg(long, default_value = "vendor1")]
    pub profile: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Trace CSV output path.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Trace CSV produced by `simulate`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Directory for acts_per_trefi.csv and act_latency_cdf.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InjectArgs {
    /// Scenario TOML.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Flip report CSV output (row,word,bit,direction).
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Device profile (builtin name or profile TOML path).
    #[arg(long)]
    pub profile: String,
    #[arg(long, default_value_t = 0)]
    pub bank: u8,
    /// Row range, hex, half-open: e.g. 0x11400..0x11420.
    #[arg(long)]
    pub rows: String,
    /// Noise density floor; victims below it are dropped.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Bit-half purity for a half-row call.
    #[arg(long, default_value_t = 0.99)]
    pub purity: f64,
    /// Suppression window per survey, seconds of device time.
    #[arg(long, default_value_t = 15.0)]
    pub suppression_s: f64,
    #[arg(long, default_value_t = DEFAULT_TIME_SCALE)]
    pub time_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Inferred adjacency map TOML output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-row density CSV output.
    #[arg(long)]
    pub density_csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct TestArgs {
    #[arg(long, default_value = "vendor1")]
    pub profile: String,
    /// Flat bank indices, comma separated.
    #[arg(long, default_value = "0")]
    pub banks: String,
    /// Row range, hex, half-open.
    #[arg(long)]
    pub rows: String,
    /// Per-pass hammer window in milliseconds (real time).
    #[arg(long, default_value_t = 128)]
    pub window_ms: u64,
    #[arg(long, default_value_t = 1000.0)]
    pub time_scale: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, default_value_t = 1.0)]
    pub refresh_multiplier: f64,
    #[arg(long, default_value = "clflushopt-pair")]
    pub sequence: String,
    #[arg(long, value_enum, default_value_t = Arch::Skylake)]
    pub arch: Arch,
    /// Victim seed pattern, hex.
    #[arg(long, default_value = "0xffffffffffffffff")]
    pub pattern: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Result CSV (bank,row,pass,flip_count).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MapArgs {
    /// Physical address (hex) to decompose.
    #[arg(long)]
    pub addr: String,
    /// Mapping TOML with a [mapping] section; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Interpret the address as virtual and translate first.
    #[arg(long, default_value_t = false)]
    pub virt: bool,
}

/// Entry point used by the binary and by tests.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    match cli.cmd {
        Cmd::Simulate(a) => simulate(a, out),
        Cmd::Analyze(a) => analyze(a, out),
        Cmd::Inject(a) => inject(a, out),
        Cmd::Infer(a) => infer(a, out),
        Cmd::Test(a) => test(a, out),
        Cmd::Map(a) => map_addr(a, out),
        Cmd::Profiles => profiles(out),
        Cmd::TruthTable => print_truth_table(out),
    }
}

fn parse_row_range(s: &str) -> Result<std::ops::Range<u32>> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| anyhow!("row range must look like 0x11400..0x11420"))?;
    let parse = |t: &str| -> Result<u32> {
        let d = t.trim().trim_start_matches("0x");
        u32::from_str_radix(d, 16).with_context(|| format!("bad hex row {t:?}"))
    };
    Ok(parse(lo)?..parse(hi)?)
}

fn parse_hex64(s: &str) -> Result<u64> {
    let d = s.trim().trim_start_matches("0x");
    u64::from_str_radix(d, 16).with_context(|| format!("bad hex value {s:?}"))
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    let (profile, timing) = resolve_profile(&a.profile, Path::new("."))?;
    let rows = profile.rows_per_bank;
    let mut sc = Scenario::new(
        profile,
        &a.sequence,
        a.arch,
        BankId::new(0, 0).unwrap(),
        (rows / 4) & !(1 << 14),
    );
    sc.request_kind = None;
    sc.seed = a.seed;
    if let Some(t) = timing {
        sc.timing = t;
    }
    let mut sim = Simulation::from_scenario(&sc)?;
    sim.capture_device_side(Trigger::any());
    let until = a.windows * sim.controller.ref_period() + 1;
    let mut stream = sim.hammer_stream(&sc, 0, until)?;
    sim.run_until(&mut stream, until)?;
    let stats = stream.stats();
    let trace = sim.take_device_trace().unwrap();

    let windows = trace.acts_per_trefi().unwrap_or_default();
    if !windows.is_empty() {
        writeln!(out, "windows: {}", windows.len())?;
        writeln!(out, "median ACTs/tREFI: {}", median_u64(&windows))?;
    }
    if let Ok(lat) = trace.act_latencies() {
        writeln!(
            out,
            "ACT-to-ACT: p50 {:.1}ns  p90 {:.1}ns  p99 {:.1}ns  mode {:.1}ns",
            lat.percentile(50.0) as f64 / 1000.0,
            lat.percentile(90.0) as f64 / 1000.0,
            lat.percentile(99.0) as f64 / 1000.0,
            lat.mode() as f64 / 1000.0,
        )?;
    }
    if stats.candidates > 0 {
        writeln!(out, "cache-hit suppressed: {:.1}%", stats.hit_rate() * 100.0)?;
    }
    if let Some(path) = a.trace_out {
        let f = std::fs::File::create(&path)
            .with_context(|| format!("create {}", path.display()))?;
        export_csv(&trace, std::io::BufWriter::new(f))?;
        writeln!(out, "trace written to {}", path.display())?;
    }
    Ok(0)
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    let f = std::fs::File::open(&a.trace).with_context(|| format!("open {}", a.trace.display()))?;
    let trace = import_csv(std::io::BufReader::new(f))?;
    let windows = trace.acts_per_trefi()?;
    let lat = trace.act_latencies()?;
    writeln!(out, "records: {}", trace.records.len())?;
    writeln!(
        out,
        "ACTs/tREFI over {} windows: median {}  min {}  max {}",
        windows.len(),
        median_u64(&windows),
        windows.iter().min().unwrap(),
        windows.iter().max().unwrap()
    )?;
    writeln!(
        out,
        "ACT-to-ACT latency: p50 {:.1}ns  p90 {:.1}ns  p99 {:.1}ns  mode {:.1}ns  optimal share {:.1}%",
        lat.percentile(50.0) as f64 / 1000.0,
        lat.percentile(90.0) as f64 / 1000.0,
        lat.percentile(99.0) as f64 / 1000.0,
        lat.mode() as f64 / 1000.0,
        lat.fraction_near(46_700, 100) * 100.0
    )?;
    if let Some(dir) = a.out {
        std::fs::create_dir_all(&dir)?;
        let mut w = std::fs::File::create(dir.join("acts_per_trefi.csv"))?;
        writeln!(w, "window,acts")?;
        for (i, n) in windows.iter().enumerate() {
            writeln!(w, "{i},{n}")?;
        }
        let mut w = std::fs::File::create(dir.join("act_latency_cdf.csv"))?;
        writeln!(w, "delta_ps,cum_fraction")?;
        for (v, f) in lat.cdf_points() {
            writeln!(w, "{v},{f:.6}")?;
        }
        writeln!(out, "metrics written to {}", dir.display())?;
    }
    Ok(0)
}

fn inject(a: InjectArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg: ScenarioConfig = load_toml(&a.scenario)?;
    let base = a.scenario.parent().unwrap_or(Path::new("."));
    let sc = cfg.to_scenario(base)?;
    let script = ProtocolScript::standard(sc.hold_window);
    let report = run_protocol(&script, &sc)?;
    writeln!(out, "eight-step injection run on {}:", sc.profile.vendor)?;
    writeln!(
        out,
        "  hold window: {} REFs issued by the controller, {} delivered to the device",
        report.controller_refs_during_hold, report.device_refs_during_hold
    )?;
    writeln!(
        out,
        "  alerts while suppressed: {} (device parity failures: {})",
        report.controller_alerts_during_suppression, report.device_parity_failures
    )?;
    writeln!(
        out,
        "  recalibrations: {}  mode registers restored: {}",
        report.recalibrations, report.mode_regs_restored
    )?;
    writeln!(out, "  total flips in report range: {}", report.flips.total_flips())?;
    let mut rows: Vec<_> = report
        .flips
        .rows
        .iter()
        .filter(|(_, f)| f.total > 0)
        .collect();
    rows.sort_by(|a, b| b.1.total.cmp(&a.1.total));
    for (row, flips) in rows.iter().take(8) {
        writeln!(
            out,
            "    row 0x{row:x}: {} flips ({:.1}% of bits), low-half share {:.1}%",
            flips.total,
            flips.density() * 100.0,
            flips.low_half_fraction() * 100.0
        )?;
    }
    if let Some(path) = a.report_out {
        let f = std::fs::File::create(&path)?;
        report.flips.export_csv(std::io::BufWriter::new(f))?;
        writeln!(out, "flip report written to {}", path.display())?;
    }
    Ok(0)
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<i32> {
    let (profile, timing) = resolve_profile(&a.profile, Path::new("."))?;
    let rows = parse_row_range(&a.rows)?;
    let mut base = Scenario::new(
        profile,
        "clflushopt-pair",
        Arch::Skylake,
        BankId::from_flat(a.bank)?,
        rows.start,
    );
    if let Some(t) = timing {
        base.timing = t;
    }
    base.seed = a.seed;
    base.time_scale = a.time_scale;
    base.hold_window = (a.suppression_s * PS_PER_S as f64 / a.time_scale) as u64;
    let thresholds = Thresholds {
        noise_density: a.noise,
        half_purity: a.purity,
        ..Default::default()
    };
    let (map, densities) = infer_map(&base, rows.clone(), &thresholds)?;

    let all: Vec<f64> = densities.values().flatten().map(|&(_, d)| d).collect();
    if let Some(t) = suggest_noise_threshold(&all) {
        writeln!(out, "suggested noise threshold from density histogram: {t:.5}")?;
    }
    for (aggressor, entry) in &map.entries {
        writeln!(
            out,
            "0x{aggressor:x}: {}",
            crate::adjacency::format_entry(entry)
        )?;
    }
    if let Some(path) = a.out {
        let section = AdjacencySection::from_spec(&crate::adjacency::AdjacencySpec::Explicit(map.clone()));
        save_toml(&path, &section)?;
        writeln!(out, "map written to {}", path.display())?;
    }
    if let Some(path) = a.density_csv {
        let mut w = std::fs::File::create(&path)?;
        writeln!(w, "aggressor,row,density")?;
        for (aggressor, rows) in &densities {
            for (row, d) in rows {
                writeln!(w, "0x{aggressor:x},0x{row:x},{d:.6}")?;
            }
        }
        writeln!(out, "densities written to {}", path.display())?;
    }
    Ok(0)
}

fn test(a: TestArgs, out: &mut dyn Write) -> Result<i32> {
    let (profile, timing) = resolve_profile(&a.profile, Path::new("."))?;
    let banks = a
        .banks
        .split(',')
        .map(|s| Ok(BankId::from_flat(s.trim().parse::<u8>()?)?))
        .collect::<Result<Vec<_>>>()?;
    let rows = parse_row_range(&a.rows)?;
    let mut plan = TestPlan::new(profile, banks, rows);
    if let Some(t) = timing {
        plan.timing = t;
    }
    plan.window = a.window_ms * PS_PER_MS;
    plan.time_scale = a.time_scale;
    plan.batch = a.batch;
    plan.parallel_banks = a.parallel;
    plan.controller.refresh_multiplier = a.refresh_multiplier;
    plan.sequence = a.sequence;
    plan.arch = a.arch;
    plan.victim_pattern = parse_hex64(&a.pattern)?;
    plan.aggressor_pattern = !plan.victim_pattern;
    plan.seed = a.seed;

    let result = run_bank_test(&plan).map_err(|e| anyhow!(e.to_string()))?;
    let failures = result.failures().count();
    writeln!(
        out,
        "{{\"rows_tested\":{},\"failures\":{},\"check_events\":{},\"sim_seconds_per_bank\":{:.3},\"projected_bank_seconds\":{:.0},\"projected_bank_human\":\"{}\"}}",
        result.rows.len(),
        failures,
        result.accounting.check_events,
        result.accounting.sim_seconds_per_bank,
        result.accounting.projected_bank_seconds,
        format_duration(result.accounting.projected_bank_seconds)
    )?;
    for r in result.failures().take(16) {
        writeln!(
            out,
            "FAIL bank {} row 0x{:x}: {} bits flipped to 0",
            r.bank, r.row, r.flip_count
        )?;
    }
    if let Some(path) = a.out {
        let mut w = std::fs::File::create(&path)?;
        writeln!(w, "bank,row,pass,flip_count")?;
        for r in &result.rows {
            writeln!(
                w,
                "{},0x{:x},{},{}",
                r.bank.flat(),
                r.row,
                r.pass as u8,
                r.flip_count
            )?;
        }
        writeln!(out, "results written to {}", path.display())?;
    }
    Ok(if failures == 0 { 0 } else { 2 })
}

fn map_addr(a: MapArgs, out: &mut dyn Write) -> Result<i32> {
    let mapping = match a.config {
        Some(path) => load_toml::<MappingFile>(&path)?.mapping,
        None => Default::default(),
    };
    let addr = parse_hex64(&a.addr)?;
    let pa = if a.virt {
        let pa = mapping.virt_to_phys(addr)?;
        writeln!(out, "virtual 0x{addr:x} -> physical 0x{pa:x}")?;
        pa
    } else {
        addr
    };
    let la = mapping.phys_to_logical(pa)?;
    writeln!(
        out,
        "physical 0x{pa:x} -> channel {} dimm {} rank {} {} row 0x{:x} col 0x{:x}",
        la.channel, la.dimm, la.rank, la.bank, la.row, la.col
    )?;
    let back = mapping.logical_to_phys(&la)?;
    writeln!(out, "inverse check: 0x{back:x}")?;
    Ok(0)
}

fn profiles(out: &mut dyn Write) -> Result<i32> {
    writeln!(out, "device profiles:")?;
    for name in DeviceProfile::builtin_names() {
        let p = DeviceProfile::builtin(name).unwrap();
        writeln!(
            out,
            "  {name}: {} rows/bank, whole-row p_max {:.4} (all-1s), half-row {:.4}",
            p.rows_per_bank, p.p_max.whole_one, p.p_max.half_one
        )?;
    }
    writeln!(out, "\ninstruction sequences (skylake calibration):")?;
    let catalog = builtin_catalog();
    let timing = TimingParams::default();
    for e in &catalog.entries {
        let note = match e.profile_for(Arch::Skylake) {
            Ok(p) if p.requests_per_iteration > 0 => {
                let span: u64 = p.intra_iteration_gaps.iter().sum::<u64>() + p.inter_iteration_gap;
                let per_iter = p.requests_per_iteration as f64 * (1.0 - p.cache_hit_fraction);
                let rate = per_iter * timing.t_refi as f64 / span as f64;
                format!("~{rate:.0} ACTs/tREFI emitted")
            }
            Ok(_) => "no memory accesses".into(),
            Err(e) => e.to_string(),
        };
        writeln!(out, "  {:<26} {}", e.seq.name, note)?;
    }
    writeln!(
        out,
        "\nprojection: one reference bank ({} row tests at 128ms) = {}",
        REFERENCE_BANK_ROW_TESTS,
        format_duration(projected_seconds(REFERENCE_BANK_ROW_TESTS, 128 * PS_PER_MS))
    )?;
    Ok(0)
}

fn print_truth_table(out: &mut dyn Write) -> Result<i32> {
    writeln!(
        out,
        "{:<6} {:<5} {:<6} {:<8} {:<8} {:<8} {}",
        "cmd", "CS_n", "ACT_n", "RAS/A16", "CAS/A15", "WE/A14", "under A14 fault"
    )?;
    for row in truth_table() {
        writeln!(
            out,
            "{:<6} {:<5} {:<6} {:<8} {:<8} {:<8} {}",
            row.name, row.cs_n, row.act_n, row.ras_a16, row.cas_a15, row.we_a14, row.under_a14_fault
        )?;
    }
    Ok(0)
}
