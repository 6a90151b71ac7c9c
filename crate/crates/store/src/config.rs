//! Flat `key = value` configuration files and the node/harness settings
//! parsed out of them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use shardstore_core::chunking::ChunkParams;
use shardstore_core::erasure::CodingParams;
use shardstore_core::{BindingMode, ClusterId, ClusterSpec, Topology};

/// Parsed `key = value` file. Later occurrences of a key override
/// earlier ones; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: lineno + 1, why: "expected key = value" })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: lineno + 1, why: "empty key" });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), why: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::BadValue { key: key.to_string(), raw: raw.to_string() }),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse_key(key)?.unwrap_or(default))
    }

    pub fn require_parsed<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.parse_key(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Settings for one storage daemon.
///
/// Keys: `listen`, `topology` (path to the cluster member file),
/// `cluster_id`, `position`, `n`, `k`, `mode`, `capacity`, `store_dir`.
#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub listen: String,
    pub topology: Topology,
    pub cluster_id: ClusterId,
    pub position: usize,
    pub store_dir: PathBuf,
}

impl NodeConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let cfg = KvConfig::from_file(path)?;
        let listen = cfg.require("listen")?.to_string();
        let n: u8 = cfg.require_parsed("n")?;
        let k: u8 = cfg.require_parsed("k")?;
        let params = CodingParams::new(n, k)
            .map_err(|e| ConfigError::Invalid(format!("coding parameters: {e}")))?;
        let mode_raw = cfg.require("mode")?;
        let mode: BindingMode = mode_raw
            .parse()
            .map_err(|_| ConfigError::BadValue { key: "mode".into(), raw: mode_raw.into() })?;
        let capacity: u64 = cfg.require_parsed("capacity")?;

        let topo_path = {
            let raw = PathBuf::from(cfg.require("topology")?);
            // Relative topology paths resolve against the config file.
            if raw.is_absolute() {
                raw
            } else {
                path.parent().unwrap_or(Path::new(".")).join(raw)
            }
        };
        let clusters = parse_cluster_file(&topo_path)?;
        let topology = Topology { mode, params, cluster_capacity: capacity, clusters };
        topology.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let cluster_id = ClusterId(cfg.require_parsed::<u16>("cluster_id")?);
        let position: usize = cfg.require_parsed("position")?;
        let spec = topology
            .cluster(cluster_id)
            .ok_or_else(|| ConfigError::Invalid(format!("cluster {cluster_id} not in topology")))?;
        if position >= spec.members.len() {
            return Err(ConfigError::Invalid(format!(
                "position {position} out of range for cluster {cluster_id}"
            )));
        }
        if spec.members[position] != listen {
            return Err(ConfigError::Invalid(format!(
                "listen address {} does not match topology member {} at position {position}",
                listen, spec.members[position]
            )));
        }

        let store_dir = PathBuf::from(cfg.require("store_dir")?);
        Ok(NodeConfig { listen, topology, cluster_id, position, store_dir })
    }
}

/// Reads a cluster member file: one `cluster.<id> = addr,addr,...` line
/// per cluster.
pub fn parse_cluster_file(path: &Path) -> Result<Vec<ClusterSpec>, ConfigError> {
    let cfg = KvConfig::from_file(path)?;
    parse_clusters(&cfg)
}

pub fn parse_clusters(cfg: &KvConfig) -> Result<Vec<ClusterSpec>, ConfigError> {
    let mut clusters = Vec::new();
    for key in cfg.keys() {
        if let Some(id) = key.strip_prefix("cluster.") {
            let id: u16 = id
                .parse()
                .map_err(|_| ConfigError::BadValue { key: key.to_string(), raw: id.to_string() })?;
            let members: Vec<String> = cfg
                .get(key)
                .unwrap()
                .split(',')
                .map(|m| m.trim().to_string())
                .filter(|m| !m.is_empty())
                .collect();
            clusters.push(ClusterSpec { id: ClusterId(id), members });
        }
    }
    clusters.sort_by_key(|c| c.id);
    if clusters.is_empty() {
        return Err(ConfigError::Invalid("no cluster.<id> entries".into()));
    }
    Ok(clusters)
}

/// Latency knobs shared by the simulator and the harness config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySettings {
    pub base_ms: f64,
    pub per_byte_ms: f64,
    pub jitter_ms: f64,
}

impl Default for LatencySettings {
    fn default() -> Self {
        LatencySettings { base_ms: 5.0, per_byte_ms: 0.002, jitter_ms: 1.0 }
    }
}

/// Experiment settings for the harness.
///
/// Workload keys: `users`, `files_per_user`, `min_file_size`,
/// `max_file_size`, `shared_fraction`, `intra_fraction`, `seed`,
/// `gets_per_file`, `hot_files`, `hot_gets`, `put_spacing_ms`,
/// `get_window_ms`. Deployment
/// keys: `mode`, `clusters`, `n`, `k`, `capacity`, `transport`
/// (`sim` | `sockets`), `fetch_window`, `cache_budget`, `port_base`
/// (sockets only). Latency keys: `base_ms`, `per_byte_ms`,
/// `jitter_ms`. Output: `out_dir`.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub mode: BindingMode,
    pub clusters: u16,
    pub params: CodingParams,
    pub capacity: u64,
    pub transport: Transport,
    pub users: u32,
    pub files_per_user: u32,
    pub min_file_size: u64,
    pub max_file_size: u64,
    pub shared_fraction: f64,
    pub intra_fraction: f64,
    pub gets_per_file: u32,
    pub hot_files: u32,
    pub hot_gets: u32,
    pub put_spacing_ms: u64,
    pub get_window_ms: u64,
    pub seed: u64,
    pub latency: LatencySettings,
    pub fetch_window: usize,
    pub cache_budget: u64,
    pub port_base: u16,
    pub chunking: ChunkParams,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Sim,
    Sockets,
}

impl FromStr for Transport {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "sim" => Ok(Transport::Sim),
            "sockets" => Ok(Transport::Sockets),
            _ => Err(()),
        }
    }
}

impl HarnessConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_kv(&KvConfig::from_file(path)?)
    }

    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let mode: BindingMode = cfg
            .get("mode")
            .unwrap_or("clb")
            .parse()
            .map_err(|_| ConfigError::BadValue {
                key: "mode".into(),
                raw: cfg.get("mode").unwrap_or("").into(),
            })?;
        let n: u8 = cfg.parse_or("n", 10)?;
        let k: u8 = cfg.parse_or("k", 5)?;
        let params = CodingParams::new(n, k)
            .map_err(|e| ConfigError::Invalid(format!("coding parameters: {e}")))?;
        let transport: Transport = cfg
            .get("transport")
            .unwrap_or("sim")
            .parse()
            .map_err(|_| ConfigError::BadValue {
                key: "transport".into(),
                raw: cfg.get("transport").unwrap_or("").into(),
            })?;

        let shared_fraction: f64 = cfg.parse_or("shared_fraction", 0.3)?;
        let intra_fraction: f64 = cfg.parse_or("intra_fraction", 0.1)?;
        for (key, v) in [("shared_fraction", shared_fraction), ("intra_fraction", intra_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::BadValue { key: key.into(), raw: v.to_string() });
            }
        }

        let min_file_size: u64 = cfg.parse_or("min_file_size", 64 * 1024)?;
        let max_file_size: u64 = cfg.parse_or("max_file_size", 4 * 1024 * 1024)?;
        if min_file_size == 0 || min_file_size > max_file_size {
            return Err(ConfigError::Invalid("need 0 < min_file_size <= max_file_size".into()));
        }

        let latency = LatencySettings {
            base_ms: cfg.parse_or("base_ms", 5.0)?,
            per_byte_ms: cfg.parse_or("per_byte_ms", 0.002)?,
            jitter_ms: cfg.parse_or("jitter_ms", 1.0)?,
        };

        Ok(HarnessConfig {
            mode,
            clusters: cfg.parse_or("clusters", 20)?,
            params,
            capacity: cfg.parse_or("capacity", 8 * 1024 * 1024 * 1024)?,
            transport,
            users: cfg.parse_or("users", 10)?,
            files_per_user: cfg.parse_or("files_per_user", 50)?,
            min_file_size,
            max_file_size,
            shared_fraction,
            intra_fraction,
            gets_per_file: cfg.parse_or("gets_per_file", 3)?,
            hot_files: cfg.parse_or("hot_files", 3)?,
            hot_gets: cfg.parse_or("hot_gets", 12)?,
            put_spacing_ms: cfg.parse_or("put_spacing_ms", 50)?,
            get_window_ms: cfg.parse_or("get_window_ms", 24 * 3_600_000)?,
            seed: cfg.parse_or("seed", 42)?,
            latency,
            fetch_window: cfg.parse_or("fetch_window", 1)?,
            cache_budget: cfg.parse_or("cache_budget", 256 * 1024 * 1024)?,
            port_base: cfg.parse_or("port_base", 7400)?,
            chunking: ChunkParams::default(),
            out_dir: PathBuf::from(cfg.get("out_dir").unwrap_or("out")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Io { path: PathBuf, why: String },
    Syntax { line: usize, why: &'static str },
    Missing(String),
    BadValue { key: String, raw: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, why } => write!(f, "{}: {why}", path.display()),
            ConfigError::Syntax { line, why } => write!(f, "line {line}: {why}"),
            ConfigError::Missing(key) => write!(f, "missing config key `{key}`"),
            ConfigError::BadValue { key, raw } => write!(f, "bad value `{raw}` for key `{key}`"),
            ConfigError::Invalid(why) => write!(f, "{why}"),
        }
    }
}

impl std::error::Error for ConfigError {}
