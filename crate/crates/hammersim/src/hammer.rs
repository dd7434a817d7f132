//! Behavioral profiles of hammering instruction sequences.
//!
//! No pipeline is simulated. Each catalog entry carries measured-behavior
//! parameters (request gaps, cache-hit fraction, warmup) calibrated to
//! bus-analyzer observations of the corresponding x86 loop, and emits a timed
//! stream of memory requests. The interesting rates come out of the
//! controller's admission, not the emitter: `clflushopt-pair` emits at the
//! tRC floor and lets the timing engine pace it.

use crate::addrmap::MappingConfig;
use crate::timing::Ps;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HammerError {
    #[error("unknown instruction sequence {0:?}")]
    UnknownSequence(String),
    #[error("{seq} is not available on {arch}: clflushopt first appeared with skylake")]
    UnsupportedArch { seq: String, arch: Arch },
    #[error("hammer addresses map to the same row (row 0x{row:x} of {bank}); the open-page policy would never re-activate it")]
    AddressesSameRow { bank: String, row: u32 },
    #[error("hammer addresses map to different banks ({0} vs {1}); row conflicts need one bank")]
    AddressesDifferentBanks(String, String),
    #[error(transparent)]
    Map(#[from] crate::addrmap::MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Broadwell,
    Skylake,
    Cascadelake,
}

impl Arch {
    pub fn supports_clflushopt(self) -> bool {
        !matches!(self, Arch::Broadwell)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Arch::Broadwell => "broadwell",
            Arch::Skylake => "skylake",
            Arch::Cascadelake => "cascadelake",
        };
        f.write_str(s)
    }
}

/// One op of a hammering loop body. Slots index the loop's address operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemOp {
    Load(u8),
    Store(u8),
    Clflush(u8),
    Clflushopt(u8),
    Mfence,
    Lfence,
    Sfence,
    NtLoad(u8),
    NtStore(u8),
    UncachedLoad(u8),
    Invd,
    Wbinvd,
    CacheConflictEvict,
}

impl MemOp {
    pub fn slot(&self) -> Option<u8> {
        match *self {
            MemOp::Load(s)
            | MemOp::Store(s)
            | MemOp::Clflush(s)
            | MemOp::Clflushopt(s)
            | MemOp::NtLoad(s)
            | MemOp::NtStore(s)
            | MemOp::UncachedLoad(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSequence {
    pub name: String,
    pub body: Vec<MemOp>,
}

impl InstructionSequence {
    pub fn validate(&self) -> Result<(), String> {
        if self.body.is_empty() {
            return Err(format!("sequence {} has an empty body", self.name));
        }
        for op in &self.body {
            if let Some(s) = op.slot() {
                if s > 1 {
                    return Err(format!("sequence {} references slot {s}", self.name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    Read,
    Write,
    /// DDR read issued as a microarchitectural side effect of flushing an
    /// invalid line (cache-coherence directory state lives in the line).
    FlushRead,
}

/// A timed memory request on its way to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRequest {
    pub at: Ps,
    pub kind: RequestKind,
    pub virtual_addr: u64,
}

/// Calibrated emission model for one (sequence, architecture) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceProfile {
    pub arch: Arch,
    pub requests_per_iteration: u32,
    /// Gaps between consecutive requests inside one iteration (ps);
    /// `requests_per_iteration - 1` entries.
    pub intra_iteration_gaps: Vec<Ps>,
    /// Gap from an iteration's last request to the next iteration's first.
    pub inter_iteration_gap: Ps,
    /// Fraction of candidate accesses served from cache and never reaching
    /// the controller.
    pub cache_hit_fraction: f64,
    /// Whether flushes of invalid lines read directory state from DRAM.
    pub dram_access_per_flush_on_invalid_line: bool,
    /// Loop iterations before the first memory access (flush-only loops find
    /// their lines cached on entry).
    pub warmup_iterations: u32,
    pub request_kind: RequestKind,
}

impl SequenceProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.cache_hit_fraction) {
            return Err(format!(
                "cache_hit_fraction {} outside [0,1]",
                self.cache_hit_fraction
            ));
        }
        if self.requests_per_iteration > 0
            && self.intra_iteration_gaps.len() + 1 != self.requests_per_iteration as usize
        {
            return Err("intra gap count must be requests_per_iteration - 1".into());
        }
        Ok(())
    }

    fn iteration_span(&self) -> Ps {
        self.intra_iteration_gaps.iter().sum::<Ps>() + self.inter_iteration_gap
    }
}

/// Catalog entry: the sequence, its fence (if any), the fence-free variant of
/// the same body (for rate-ranking), and per-arch calibrations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub seq: InstructionSequence,
    pub fence: Option<String>,
    pub fence_free_counterpart: Option<String>,
    /// Arch-specific profiles; an absent supported arch falls back to skylake
    /// numbers, `unsupported` archs error.
    pub profiles: Vec<SequenceProfile>,
    #[serde(default)]
    pub unsupported: Vec<Arch>,
}

impl CatalogEntry {
    pub fn profile_for(&self, arch: Arch) -> Result<SequenceProfile, HammerError> {
        if self.unsupported.contains(&arch) {
            return Err(HammerError::UnsupportedArch {
                seq: self.seq.name.clone(),
                arch,
            });
        }
        if let Some(p) = self.profiles.iter().find(|p| p.arch == arch) {
            return Ok(p.clone());
        }
        // Cascade Lake is a minor revision of Skylake; measurements match.
        let mut p = self
            .profiles
            .iter()
            .find(|p| p.arch == Arch::Skylake)
            .cloned()
            .ok_or_else(|| HammerError::UnknownSequence(self.seq.name.clone()))?;
        p.arch = arch;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl SequenceCatalog {
    pub fn entry(&self, name: &str) -> Result<&CatalogEntry, HammerError> {
        self.entries
            .iter()
            .find(|e| e.seq.name == name)
            .ok_or_else(|| HammerError::UnknownSequence(name.to_string()))
    }

    pub fn profile_for(&self, name: &str, arch: Arch) -> Result<SequenceProfile, HammerError> {
        self.entry(name)?.profile_for(arch)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.seq.name.as_str())
    }
}

fn profile(
    arch: Arch,
    reqs: u32,
    intra: &[Ps],
    inter: Ps,
    hit: f64,
    flush_reads: bool,
    warmup: u32,
    kind: RequestKind,
) -> SequenceProfile {
    SequenceProfile {
        arch,
        requests_per_iteration: reqs,
        intra_iteration_gaps: intra.to_vec(),
        inter_iteration_gap: inter,
        cache_hit_fraction: hit,
        dram_access_per_flush_on_invalid_line: flush_reads,
        warmup_iterations: warmup,
        request_kind: kind,
    }
}

/// The built-in catalog covering every sequence family we characterized:
/// flush-only pairs, the classic load+flush loops under each fence, uncached
/// loads, non-temporal mixes and the whole-cache invalidation variants.
///
/// Rates pinned by measurement: clflushopt-pair paces at the tRC floor and
/// lands at 159 ACTs/tREFI after refresh interference; clflush-pair at 110
/// (65.7% of optimal); the fence-free load+clflushopt loop at 112 with a 33%
/// cache-hit rate; uncached loads at a fixed 110ns spacing; mfence loops
/// issue their two reads back-to-back and then stall over 220ns. The
/// remaining fence variants are graph-calibrated approximations around the
/// "47% from optimal" aggregate and stay configurable.
pub fn builtin_catalog() -> SequenceCatalog {
    use Arch::*;
    use MemOp::*;
    use RequestKind::*;
    let mut entries = Vec::new();
    let mut add = |name: &str,
                   body: Vec<MemOp>,
                   fence: Option<&str>,
                   counterpart: Option<&str>,
                   profiles: Vec<SequenceProfile>,
                   unsupported: Vec<Arch>| {
        entries.push(CatalogEntry {
            seq: InstructionSequence {
                name: name.to_string(),
                body,
            },
            fence: fence.map(str::to_string),
            fence_free_counterpart: counterpart.map(str::to_string),
            profiles,
            unsupported,
        });
    };

    // Two clflushopt in a loop: no explicit memory access at all. The flush
    // of an invalid line reads directory state from DRAM, so after a one-
    // iteration warmup every iteration issues two reads at the tRC floor.
    add(
        "clflushopt-pair",
        vec![Clflushopt(0), Clflushopt(1)],
        None,
        None,
        vec![profile(Skylake, 2, &[46_700], 46_700, 0.0, true, 1, FlushRead)],
        vec![Broadwell],
    );
    // Two clflush: same trick, slower due to stricter ordering; on Broadwell
    // clflush performs no memory access at all.
    add(
        "clflush-pair",
        vec![Clflush(0), Clflush(1)],
        None,
        None,
        vec![
            profile(Skylake, 2, &[71_022], 71_023, 0.0, true, 1, FlushRead),
            profile(Broadwell, 0, &[], 142_045, 0.0, false, 0, FlushRead),
        ],
        vec![],
    );

    // The classic load/load/clflush/clflush loop under each fence flavor.
    for (fence, fence_op, intra, inter) in [
        ("nofence", None, 88_778u64, 88_779u64),
        ("sfence", Some(Sfence), 89_798, 89_800),
        ("lfence", Some(Lfence), 97_656, 97_657),
        // mfence: reads go out back-to-back at the optimal latency, then the
        // fence stalls the loop for over 220ns.
        ("mfence", Some(Mfence), 46_700, 225_000),
    ] {
        let mut body = vec![Load(0), Load(1), Clflush(0), Clflush(1)];
        body.extend(fence_op);
        add(
            &format!("load-clflush-{fence}"),
            body,
            (fence != "nofence").then(|| fence),
            (fence != "nofence").then_some("load-clflush-nofence"),
            vec![profile(Skylake, 2, &[intra], inter, 0.0, false, 0, Read)],
            vec![],
        );
    }

    // Same bodies with clflushopt. Without a fence the CPU re-orders
    // aggressively: a third of the candidate accesses hit in cache, the rest
    // go out at the tRC floor for 112 ACTs/tREFI.
    for (fence, fence_op, intra, inter, hit) in [
        ("nofence", None, 46_700u64, 46_700u64, 1.0 / 3.0),
        ("sfence", Some(Sfence), 89_798, 89_800, 0.0),
        ("lfence", Some(Lfence), 97_656, 97_657, 0.0),
        ("mfence", Some(Mfence), 46_700, 237_700, 0.0),
    ] {
        let mut body = vec![Load(0), Load(1), Clflushopt(0), Clflushopt(1)];
        body.extend(fence_op);
        add(
            &format!("load-clflushopt-{fence}"),
            body,
            (fence != "nofence").then(|| fence),
            (fence != "nofence").then_some("load-clflushopt-nofence"),
            vec![profile(Skylake, 2, &[intra], inter, hit, true, 0, Read)],
            vec![Broadwell],
        );
    }

    // Uncacheable PTEs: no flushes needed, but every load pays a fixed
    // ~110ns, so the rate is low and extremely regular.
    add(
        "uncached-load-pair",
        vec![UncachedLoad(0), UncachedLoad(1)],
        None,
        None,
        vec![profile(Skylake, 2, &[110_000], 110_000, 0.0, false, 0, Read)],
        vec![],
    );
    // Mixing non-temporal and regular accesses: the NT buffers flush the
    // line each iteration but the combination is far from optimal.
    add(
        "ntload-mix",
        vec![NtLoad(0), Load(1)],
        None,
        None,
        vec![profile(Skylake, 2, &[141_531], 141_532, 0.0, false, 0, Read)],
        vec![],
    );
    // Full cache invalidations are very expensive; low ACT rates.
    for name in ["invd-loop", "wbinvd-loop"] {
        let inval = if name == "invd-loop" { Invd } else { Wbinvd };
        add(
            name,
            vec![Load(0), Load(1), inval],
            None,
            None,
            vec![profile(Skylake, 2, &[195_312], 195_313, 0.0, false, 0, Read)],
            vec![],
        );
    }
    // Eviction through cache-set conflicts.
    add(
        "conflict-evict",
        vec![Load(0), Load(1), CacheConflictEvict],
        None,
        None,
        vec![profile(Skylake, 2, &[186_011], 186_012, 0.0, false, 0, Read)],
        vec![],
    );

    SequenceCatalog { entries }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    /// Accesses the loop would issue.
    pub candidates: u64,
    /// Candidates served from cache and dropped before the controller.
    pub suppressed_hits: u64,
    pub emitted: u64,
}

impl StreamStats {
    pub fn hit_rate(&self) -> f64 {
        if self.candidates == 0 {
            return 0.0;
        }
        self.suppressed_hits as f64 / self.candidates as f64
    }
}

/// Lazily yields the profile's request stream over `[0, duration)`,
/// alternating between the two hammer addresses. Deterministic for a given
/// seed.
pub struct RequestStream {
    profile: SequenceProfile,
    addrs: [u64; 2],
    duration: Ps,
    rng: ChaCha8Rng,
    t: Ps,
    iteration: u64,
    idx_in_iter: u32,
    slot: usize,
    iter_hits: bool,
    pub stats: StreamStats,
}

impl Iterator for RequestStream {
    type Item = MemoryRequest;

    fn next(&mut self) -> Option<MemoryRequest> {
        if self.profile.requests_per_iteration == 0 {
            return None;
        }
        loop {
            if self.t >= self.duration {
                return None;
            }
            // Warmup iterations consume time but emit nothing.
            if self.iteration < self.profile.warmup_iterations as u64 {
                self.t += self.profile.iteration_span();
                self.iteration += 1;
                continue;
            }
            // The re-order window serves whole loop iterations from cache:
            // one draw per iteration, so surviving accesses keep alternating
            // between the two rows.
            if self.idx_in_iter == 0 {
                self.iter_hits = self.profile.cache_hit_fraction > 0.0
                    && self.rng.gen::<f64>() < self.profile.cache_hit_fraction;
            }
            let at = self.t;
            let addr = self.addrs[self.slot];
            self.slot ^= 1;
            self.stats.candidates += 1;
            let hit = self.iter_hits;

            // Advance emission cursor.
            self.idx_in_iter += 1;
            if self.idx_in_iter == self.profile.requests_per_iteration {
                self.t += self.profile.inter_iteration_gap;
                self.idx_in_iter = 0;
                self.iteration += 1;
            } else {
                self.t += self.profile.intra_iteration_gaps[self.idx_in_iter as usize - 1];
            }

            if hit {
                self.stats.suppressed_hits += 1;
                continue;
            }
            self.stats.emitted += 1;
            return Some(MemoryRequest {
                at,
                kind: self.profile.request_kind,
                virtual_addr: addr,
            });
        }
    }
}

/// Build the request stream for a hammer pair, checking through the address
/// map that the two virtual addresses land on distinct rows of one bank.
pub fn request_stream(
    profile: &SequenceProfile,
    map: &MappingConfig,
    addr_pair: [u64; 2],
    duration: Ps,
    seed: u64,
    kind_override: Option<RequestKind>,
) -> Result<RequestStream, HammerError> {
    let a = map.phys_to_logical(map.virt_to_phys(addr_pair[0])?)?;
    let b = map.phys_to_logical(map.virt_to_phys(addr_pair[1])?)?;
    if a.bank != b.bank {
        return Err(HammerError::AddressesDifferentBanks(
            a.bank.to_string(),
            b.bank.to_string(),
        ));
    }
    if a.row == b.row {
        return Err(HammerError::AddressesSameRow {
            bank: a.bank.to_string(),
            row: a.row,
        });
    }
    let mut profile = profile.clone();
    if let Some(kind) = kind_override {
        profile.request_kind = kind;
    }
    profile.validate().map_err(HammerError::UnknownSequence)?;
    Ok(RequestStream {
        profile,
        addrs: addr_pair,
        duration,
        rng: ChaCha8Rng::seed_from_u64(seed),
        t: 0,
        iteration: 0,
        idx_in_iter: 0,
        slot: 0,
        iter_hits: false,
        stats: StreamStats::default(),
    })
}

/// Eager variant of [`request_stream`]: the full request list plus emission
/// stats.
pub fn generate_stream(
    profile: &SequenceProfile,
    map: &MappingConfig,
    addr_pair: [u64; 2],
    duration: Ps,
    seed: u64,
) -> Result<(Vec<MemoryRequest>, StreamStats), HammerError> {
    let mut s = request_stream(profile, map, addr_pair, duration, seed, None)?;
    let reqs: Vec<MemoryRequest> = s.by_ref().collect();
    Ok((reqs, s.stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> MappingConfig {
        MappingConfig::default()
    }

    fn pair(_map: &MappingConfig) -> [u64; 2] {
        // Rows 0x100 and 0x200 of bank 0.
        [0x100 * 8192, 0x200 * 8192]
    }

    #[test]
    fn catalog_profiles_validate() {
        let cat = builtin_catalog();
        assert_eq!(cat.entries.len(), 15);
        for e in &cat.entries {
            e.seq.validate().unwrap();
            for p in &e.profiles {
                p.validate().unwrap();
            }
        }
    }

    #[test]
    fn clflushopt_unsupported_on_broadwell() {
        let cat = builtin_catalog();
        let err = cat.profile_for("clflushopt-pair", Arch::Broadwell);
        assert!(matches!(err, Err(HammerError::UnsupportedArch { .. })));
        let err = cat.profile_for("load-clflushopt-nofence", Arch::Broadwell);
        assert!(matches!(err, Err(HammerError::UnsupportedArch { .. })));
    }

    #[test]
    fn clflush_pair_broadwell_issues_nothing() {
        let cat = builtin_catalog();
        let p = cat.profile_for("clflush-pair", Arch::Broadwell).unwrap();
        let m = map();
        let (reqs, _) = generate_stream(&p, &m, pair(&m), 10_000_000, 7).unwrap();
        assert!(reqs.is_empty());
    }

    #[test]
    fn unknown_sequence_errors() {
        let cat = builtin_catalog();
        assert!(matches!(
            cat.profile_for("rowpress", Arch::Skylake),
            Err(HammerError::UnknownSequence(_))
        ));
    }

    #[test]
    fn cascadelake_falls_back_to_skylake_numbers() {
        let cat = builtin_catalog();
        let sky = cat.profile_for("clflushopt-pair", Arch::Skylake).unwrap();
        let cl = cat.profile_for("clflushopt-pair", Arch::Cascadelake).unwrap();
        assert_eq!(sky.intra_iteration_gaps, cl.intra_iteration_gaps);
    }

    #[test]
    fn zero_duration_is_empty() {
        let cat = builtin_catalog();
        let p = cat.profile_for("clflushopt-pair", Arch::Skylake).unwrap();
        let m = map();
        let (reqs, _) = generate_stream(&p, &m, pair(&m), 0, 1).unwrap();
        assert!(reqs.is_empty());
    }

    #[test]
    fn same_row_pair_rejected() {
        let cat = builtin_catalog();
        let p = cat.profile_for("clflushopt-pair", Arch::Skylake).unwrap();
        let m = map();
        let err = generate_stream(&p, &m, [0x100 * 8192, 0x100 * 8192 + 64], 1000, 1);
        assert!(matches!(err, Err(HammerError::AddressesSameRow { .. })));
    }

    #[test]
    fn different_bank_pair_rejected() {
        let cat = builtin_catalog();
        let p = cat.profile_for("clflushopt-pair", Arch::Skylake).unwrap();
        let m = map();
        // Bank bits sit above the row bits in the default layout.
        let err = generate_stream(&p, &m, [0, 1u64 << 30], 1000, 1);
        assert!(matches!(err, Err(HammerError::AddressesDifferentBanks(..))));
    }

    #[test]
    fn times_non_decreasing_and_alternating() {
        let cat = builtin_catalog();
        let p = cat.profile_for("load-clflush-mfence", Arch::Skylake).unwrap();
        let m = map();
        let (reqs, _) = generate_stream(&p, &m, pair(&m), 5_000_000, 3).unwrap();
        assert!(!reqs.is_empty());
        for w in reqs.windows(2) {
            assert!(w[0].at <= w[1].at);
            assert_ne!(w[0].virtual_addr, w[1].virtual_addr);
        }
        // Bimodal gap structure: 46.7ns inside the pair, >220ns after it.
        let deltas: Vec<Ps> = reqs.windows(2).map(|w| w[1].at - w[0].at).collect();
        assert!(deltas.iter().any(|&d| d == 46_700));
        assert!(deltas.iter().any(|&d| d > 220_000));
    }

    #[test]
    fn warmup_skips_first_iteration() {
        let cat = builtin_catalog();
        let p = cat.profile_for("clflushopt-pair", Arch::Skylake).unwrap();
        let m = map();
        let (reqs, _) = generate_stream(&p, &m, pair(&m), 1_000_000, 3).unwrap();
        // First iteration spans 93.4ns and emits nothing.
        assert_eq!(reqs[0].at, 93_400);
    }

    #[test]
    fn hit_suppression_is_seeded_and_near_fraction() {
        let cat = builtin_catalog();
        let p = cat
            .profile_for("load-clflushopt-nofence", Arch::Skylake)
            .unwrap();
        let m = map();
        let (r1, s1) = generate_stream(&p, &m, pair(&m), 100 * 7_812_500, 42).unwrap();
        let (r2, s2) = generate_stream(&p, &m, pair(&m), 100 * 7_812_500, 42).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1.suppressed_hits, s2.suppressed_hits);
        assert!((s1.hit_rate() - 1.0 / 3.0).abs() < 0.02, "{}", s1.hit_rate());
    }
}
