//! Deterministic synthetic workloads.
//!
//! Files are assembled from 64 KiB segments drawn from three sources:
//! a global shared pool (cross-user redundancy), a per-user pool
//! (intra-user repeats), and unique noise. The two pool fractions are
//! the knobs that drive every deduplication effect; identical seeds
//! reproduce the corpus and the request trace byte for byte.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::HarnessConfig;

pub const SEGMENT_LEN: usize = 64 * 1024;
/// Entries in the cross-user shared segment pool.
const SHARED_POOL: u32 = 64;
/// Entries in each user's private repeat pool.
const INTRA_POOL: u32 = 16;
/// Popular files span a fraction of one segment: small artifacts a
/// whole workgroup keeps re-fetching, a chunk or two each, so
/// simultaneous demand converges on the clusters hosting them.
pub const HOT_FILE_LEN: u64 = 4096;

const MS_PER_HOUR: u64 = 3_600_000;
const MS_PER_DAY: u64 = 24 * MS_PER_HOUR;

/// One 64 KiB building block of a file. The variant fixes which rng
/// stream generates its bytes, so equal segments have equal bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Index into the global pool; identical across all users.
    Shared(u32),
    /// Index into the owning user's pool.
    Intra(u32),
    /// Globally unique noise, keyed by a generation counter.
    Unique(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileSpec {
    pub user: u32,
    pub name: String,
    pub size: u64,
    pub segments: Vec<Segment>,
}

impl FileSpec {
    /// Materializes the file bytes. Only the owning workload's seed
    /// reproduces the corpus.
    pub fn content(&self, workload_seed: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size as usize);
        for seg in &self.segments {
            let take = SEGMENT_LEN.min(self.size as usize - out.len());
            let mut rng = ChaCha8Rng::from_seed(segment_seed(workload_seed, self.user, seg));
            let start = out.len();
            out.resize(start + take, 0);
            rng.fill_bytes(&mut out[start..]);
        }
        debug_assert_eq!(out.len() as u64, self.size);
        out
    }
}

fn segment_seed(workload_seed: u64, user: u32, seg: &Segment) -> [u8; 32] {
    let (tag, a, b): (u8, u64, u64) = match seg {
        Segment::Shared(i) => (1, 0, *i as u64),
        Segment::Intra(i) => (2, user as u64, *i as u64),
        Segment::Unique(c) => (3, 0, *c),
    };
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&workload_seed.to_le_bytes());
    s[8] = tag;
    s[9..17].copy_from_slice(&a.to_le_bytes());
    s[17..25].copy_from_slice(&b.to_le_bytes());
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Put,
    Get,
    Delete,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Put => "put",
            EventKind::Get => "get",
            EventKind::Delete => "rm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub at_ms: u64,
    pub user: u32,
    pub kind: EventKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub seed: u64,
    pub users: u32,
    pub files: Vec<FileSpec>,
    /// Sorted by time; every get's time is at or after `put_end_ms`.
    pub events: Vec<Event>,
    /// First instant with no put scheduled at or after it.
    pub put_end_ms: u64,
    index: BTreeMap<(u32, String), usize>,
}

impl Workload {
    pub fn file(&self, user: u32, name: &str) -> Option<&FileSpec> {
        self.index.get(&(user, name.to_string())).map(|&i| &self.files[i])
    }

    pub fn total_original_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadParams {
    pub users: u32,
    pub files_per_user: u32,
    pub min_size: u64,
    pub max_size: u64,
    pub shared_fraction: f64,
    pub intra_fraction: f64,
    pub gets_per_file: u32,
    /// Popular files per user. Every user stores a byte-identical
    /// copy, so they are the cross-user hot set.
    pub hot_files: u32,
    /// Gets per popular file per user.
    pub hot_gets: u32,
    pub seed: u64,
    /// Gap between successive puts, round-robin across users.
    pub put_spacing_ms: u64,
    /// Width of the window holding all gets. The diurnal shape (a
    /// sinusoid with its trough over 00:00-08:00) is scaled into it,
    /// so a one-day window replays daily load and a narrow one
    /// produces a contention burst.
    pub get_window_ms: u64,
}

impl WorkloadParams {
    pub fn from_config(cfg: &HarnessConfig) -> Self {
        WorkloadParams {
            users: cfg.users,
            files_per_user: cfg.files_per_user,
            min_size: cfg.min_file_size,
            max_size: cfg.max_file_size,
            shared_fraction: cfg.shared_fraction,
            intra_fraction: cfg.intra_fraction,
            gets_per_file: cfg.gets_per_file,
            hot_files: cfg.hot_files,
            hot_gets: cfg.hot_gets,
            seed: cfg.seed,
            put_spacing_ms: cfg.put_spacing_ms,
            get_window_ms: cfg.get_window_ms,
        }
    }
}

/// Relative request volume for each hour of the day: peak at 14:00,
/// trough at 02:00, quiet through the night.
fn hour_weight(hour: u64) -> f64 {
    2.0 - (core::f64::consts::TAU * (hour as f64 - 14.0) / 24.0).cos()
}

fn draw_diurnal_ms(rng: &mut ChaCha8Rng) -> u64 {
    let total: f64 = (0..24).map(hour_weight).sum();
    let mut r = rng.gen_range(0.0..total);
    let mut hour = 23;
    for h in 0..24 {
        let w = hour_weight(h);
        if r < w {
            hour = h;
            break;
        }
        r -= w;
    }
    hour * MS_PER_HOUR + rng.gen_range(0..MS_PER_HOUR)
}

pub fn generate(p: &WorkloadParams) -> Workload {
    assert!(p.users > 0 && p.files_per_user > 0, "empty workload");
    assert!((0.0..=1.0).contains(&p.shared_fraction));
    assert!((0.0..=1.0).contains(&p.intra_fraction));
    assert!(p.shared_fraction + p.intra_fraction <= 1.0 + 1e-9);
    assert!(p.min_size > 0 && p.min_size <= p.max_size);

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    // One pool pick per popular file, shared by every user's copy.
    let hot_segs: Vec<u32> =
        (0..p.hot_files).map(|_| rng.gen_range(0..SHARED_POOL)).collect();
    let mut unique_counter = 0u64;
    let mut files = Vec::new();
    for user in 0..p.users {
        for (j, &seg) in hot_segs.iter().enumerate() {
            files.push(FileSpec {
                user,
                name: format!("h{j:04}"),
                size: HOT_FILE_LEN,
                segments: vec![Segment::Shared(seg)],
            });
        }
        for j in 0..p.files_per_user {
            let ln = rng.gen_range((p.min_size as f64).ln()..=(p.max_size as f64).ln());
            let size = (ln.exp().round() as u64).clamp(p.min_size, p.max_size);
            let n_segs = size.div_ceil(SEGMENT_LEN as u64);
            let segments = (0..n_segs)
                .map(|_| {
                    let r: f64 = rng.gen();
                    if r < p.shared_fraction {
                        Segment::Shared(rng.gen_range(0..SHARED_POOL))
                    } else if r < p.shared_fraction + p.intra_fraction {
                        Segment::Intra(rng.gen_range(0..INTRA_POOL))
                    } else {
                        unique_counter += 1;
                        Segment::Unique(unique_counter)
                    }
                })
                .collect();
            files.push(FileSpec { user, name: format!("f{j:04}"), size, segments });
        }
    }

    // Puts round-robin across users so uploads interleave.
    let spacing = p.put_spacing_ms.max(1);
    let rounds: Vec<String> = (0..p.hot_files)
        .map(|j| format!("h{j:04}"))
        .chain((0..p.files_per_user).map(|j| format!("f{j:04}")))
        .collect();
    let mut events = Vec::new();
    for (j, name) in rounds.iter().enumerate() {
        for user in 0..p.users {
            events.push(Event {
                at_ms: (j as u64 * p.users as u64 + user as u64) * spacing,
                user,
                kind: EventKind::Put,
                name: name.clone(),
            });
        }
    }
    let put_end_ms = p.users as u64 * rounds.len() as u64 * spacing;

    let window = p.get_window_ms.max(1);
    for f in &files {
        let gets = if f.name.starts_with('h') { p.hot_gets } else { p.gets_per_file };
        for _ in 0..gets {
            let day_ms = draw_diurnal_ms(&mut rng);
            let at_ms = put_end_ms + day_ms * window / MS_PER_DAY;
            events.push(Event { at_ms, user: f.user, kind: EventKind::Get, name: f.name.clone() });
        }
    }

    events.sort_by(|a, b| {
        (a.at_ms, a.user, &a.name, kind_rank(a.kind)).cmp(&(
            b.at_ms,
            b.user,
            &b.name,
            kind_rank(b.kind),
        ))
    });

    let index =
        files.iter().enumerate().map(|(i, f)| ((f.user, f.name.clone()), i)).collect();
    Workload { seed: p.seed, users: p.users, files, events, put_end_ms, index }
}

fn kind_rank(k: EventKind) -> u8 {
    match k {
        EventKind::Put => 0,
        EventKind::Get => 1,
        EventKind::Delete => 2,
    }
}

/// Writes the trace in the `workload-v1` text form: one `file` line
/// per corpus entry, one `event` line per trace step.
pub fn write_trace(w: &mut impl Write, wl: &Workload) -> io::Result<()> {
    writeln!(w, "workload-v1")?;
    writeln!(w, "# seed {} users {} files {}", wl.seed, wl.users, wl.files.len())?;
    for f in &wl.files {
        writeln!(w, "file {} {} {} {}", f.user, f.name, f.size, f.segments.len())?;
    }
    for e in &wl.events {
        writeln!(w, "event {} {} {} {}", e.at_ms, e.user, e.kind.as_str(), e.name)?;
    }
    Ok(())
}
