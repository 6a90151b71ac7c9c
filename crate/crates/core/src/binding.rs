//! Cluster topology and the policies that bind chunks to clusters.
//!
//! Two placement policies are supported. Capacity-led binding (CLB)
//! sends every new chunk to the cluster with the most free space, which
//! pools all users' data and maximises cross-user deduplication. User-led
//! binding (ULB) pins each user to a home cluster and only rolls them
//! over when it fills, which keeps a user's traffic on few clusters at
//! the cost of duplicating shared content across them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::chunking::ChunkId;
use crate::erasure::{expansion, CodingParams};
use crate::sha1;

/// Identifier of a cluster within one deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u16);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Static description of one cluster: member node addresses in piece
/// position order (member i stores piece index i).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpec {
    pub id: ClusterId,
    pub members: Vec<String>,
}

/// Static description of a whole deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub mode: BindingMode,
    pub params: CodingParams,
    /// Budget of coded-piece bytes per cluster.
    pub cluster_capacity: u64,
    pub clusters: Vec<ClusterSpec>,
}

impl Topology {
    /// Checks the structural invariants: at least one cluster, unique
    /// ids, unique addresses, and exactly n members per cluster.
    pub fn validate(&self) -> Result<(), BindingError> {
        if self.clusters.is_empty() {
            return Err(BindingError::InvalidTopology("no clusters"));
        }
        if self.cluster_capacity == 0 {
            return Err(BindingError::InvalidTopology("zero cluster capacity"));
        }
        let mut ids = alloc::collections::BTreeSet::new();
        let mut addrs = alloc::collections::BTreeSet::new();
        for c in &self.clusters {
            if !ids.insert(c.id) {
                return Err(BindingError::InvalidTopology("duplicate cluster id"));
            }
            if c.members.len() != self.params.n() as usize {
                return Err(BindingError::InvalidTopology("cluster size must equal n"));
            }
            for m in &c.members {
                if !addrs.insert(m.as_str()) {
                    return Err(BindingError::InvalidTopology("duplicate member address"));
                }
            }
        }
        Ok(())
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&ClusterSpec> {
        self.clusters.iter().find(|c| c.id == id)
    }

    /// (cluster, piece position) of a member address.
    pub fn position_of(&self, addr: &str) -> Option<(ClusterId, usize)> {
        self.clusters.iter().find_map(|c| {
            c.members.iter().position(|m| m == addr).map(|i| (c.id, i))
        })
    }

    /// The cluster member that owns encoding and reassembly for a chunk,
    /// picked by the first id byte so the load spreads without any
    /// coordination state.
    pub fn coding_member(&self, cluster: ClusterId, chunk: ChunkId) -> Option<&str> {
        let spec = self.cluster(cluster)?;
        let i = chunk.as_bytes()[0] as usize % spec.members.len();
        Some(&spec.members[i])
    }

    /// The node that hosts the placement directory.
    pub fn directory_addr(&self) -> &str {
        &self.clusters[0].members[0]
    }

    pub fn all_members(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().flat_map(|c| c.members.iter().map(String::as_str))
    }

    /// Initial state vector for the accounting side, one per cluster.
    pub fn fresh_states(&self) -> Vec<ClusterState> {
        self.clusters
            .iter()
            .map(|c| ClusterState { cluster_id: c.id, capacity: self.cluster_capacity, used: 0 })
            .collect()
    }
}

/// Live space accounting for one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterState {
    pub cluster_id: ClusterId,
    pub capacity: u64,
    pub used: u64,
}

impl ClusterState {
    pub fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used)
    }

    pub fn charge(&mut self, bytes: u64) {
        self.used += bytes;
    }

    pub fn release(&mut self, bytes: u64) {
        self.used = self.used.saturating_sub(bytes);
    }
}

/// Presence entry reported for one bound chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundChunk {
    pub chunk_id: ChunkId,
    pub cluster_id: ClusterId,
    /// Whether the coded pieces already exist, i.e. the upload can skip
    /// this chunk.
    pub stored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingMode {
    Clb,
    Ulb,
}

impl fmt::Display for BindingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindingMode::Clb => "clb",
            BindingMode::Ulb => "ulb",
        })
    }
}

impl core::str::FromStr for BindingMode {
    type Err = BindingError;

    fn from_str(s: &str) -> Result<Self, BindingError> {
        match s {
            "clb" => Ok(BindingMode::Clb),
            "ulb" => Ok(BindingMode::Ulb),
            _ => Err(BindingError::UnknownMode),
        }
    }
}

/// Picks the cluster with the most free space, ties to the lowest id.
/// The caller charges `expansion(chunk_len, params)` after placing.
pub fn clb_select(
    chunk_len: u64,
    params: CodingParams,
    clusters: &[ClusterState],
) -> Result<ClusterId, BindingError> {
    let need = expansion(chunk_len, params);
    let best = clusters
        .iter()
        .max_by(|a, b| a.free().cmp(&b.free()).then_with(|| b.cluster_id.cmp(&a.cluster_id)))
        .ok_or(BindingError::NoClusters)?;
    if best.free() < need {
        return Err(BindingError::CapacityExhausted { needed: need });
    }
    Ok(best.cluster_id)
}

/// Stable home cluster for a user who has never stored anything: the
/// first eight digest bytes of the user id, modulo the cluster count.
pub fn initial_user_assignment(user_id: &str, clusters: &[ClusterState]) -> ClusterId {
    debug_assert!(!clusters.is_empty());
    let d = sha1::digest(user_id.as_bytes());
    let v = u64::from_be_bytes(d[..8].try_into().unwrap());
    clusters[(v % clusters.len() as u64) as usize].cluster_id
}

/// Binding policy state. CLB is stateless; ULB remembers the clusters
/// assigned to each user, newest last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingPolicy {
    mode: BindingMode,
    assignments: BTreeMap<String, Vec<ClusterId>>,
}

impl BindingPolicy {
    pub fn new(mode: BindingMode) -> Self {
        BindingPolicy { mode, assignments: BTreeMap::new() }
    }

    pub fn mode(&self) -> BindingMode {
        self.mode
    }

    /// Chooses the cluster for a new chunk of `chunk_len` bytes uploaded
    /// by `user_id`. Only chunks that are not already stored reach this
    /// point; dedup lookups happen against the presence index first.
    pub fn select(
        &mut self,
        user_id: &str,
        chunk_len: u64,
        params: CodingParams,
        clusters: &[ClusterState],
    ) -> Result<ClusterId, BindingError> {
        match self.mode {
            BindingMode::Clb => clb_select(chunk_len, params, clusters),
            BindingMode::Ulb => self.ulb_select(user_id, chunk_len, params, clusters),
        }
    }

    fn ulb_select(
        &mut self,
        user_id: &str,
        chunk_len: u64,
        params: CodingParams,
        clusters: &[ClusterState],
    ) -> Result<ClusterId, BindingError> {
        if clusters.is_empty() {
            return Err(BindingError::NoClusters);
        }
        let need = expansion(chunk_len, params);
        if !self.assignments.contains_key(user_id) {
            let home = initial_user_assignment(user_id, clusters);
            self.assignments.insert(String::from(user_id), vec![home]);
        }

        let active = *self.assignments[user_id].last().unwrap();
        let free_of = |id: ClusterId| {
            clusters.iter().find(|c| c.cluster_id == id).map(|c| c.free()).unwrap_or(0)
        };
        if free_of(active) >= need {
            return Ok(active);
        }

        // The active cluster is out of space: roll the user over to the
        // usable cluster serving the fewest users, ties to the lowest id.
        let chosen = clusters
            .iter()
            .filter(|c| c.free() >= need)
            .min_by_key(|c| (self.users_assigned_to(c.cluster_id), c.cluster_id))
            .map(|c| c.cluster_id)
            .ok_or(BindingError::CapacityExhausted { needed: need })?;
        let list = self.assignments.get_mut(user_id).unwrap();
        if *list.last().unwrap() != chosen {
            list.push(chosen);
        }
        Ok(chosen)
    }

    /// Number of users with `cluster` anywhere in their assignment list.
    pub fn users_assigned_to(&self, cluster: ClusterId) -> usize {
        self.assignments.values().filter(|l| l.contains(&cluster)).count()
    }

    pub fn assignments_of(&self, user_id: &str) -> &[ClusterId] {
        self.assignments.get(user_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter_assignments(&self) -> impl Iterator<Item = (&str, &[ClusterId])> {
        self.assignments.iter().map(|(u, l)| (u.as_str(), l.as_slice()))
    }

    /// Reinstates a user's assignment history, e.g. from a snapshot.
    pub fn restore(&mut self, user_id: String, history: Vec<ClusterId>) {
        if !history.is_empty() {
            self.assignments.insert(user_id, history);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BindingError {
    NoClusters,
    CapacityExhausted { needed: u64 },
    UnknownMode,
    InvalidTopology(&'static str),
}

impl fmt::Display for BindingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BindingError::NoClusters => write!(f, "no clusters configured"),
            BindingError::CapacityExhausted { needed } => {
                write!(f, "no cluster has {needed} bytes free")
            }
            BindingError::UnknownMode => write!(f, "unknown binding mode"),
            BindingError::InvalidTopology(why) => write!(f, "invalid topology: {why}"),
        }
    }
}

impl core::error::Error for BindingError {}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn states(frees: &[u64]) -> Vec<ClusterState> {
        frees
            .iter()
            .enumerate()
            .map(|(i, &f)| ClusterState { cluster_id: ClusterId(i as u16), capacity: f, used: 0 })
            .collect()
    }

    fn params() -> CodingParams {
        CodingParams::new(4, 2).unwrap()
    }

    #[test]
    fn clb_prefers_most_free_space() {
        let clusters = states(&[100, 400, 250]);
        assert_eq!(clb_select(10, params(), &clusters).unwrap(), ClusterId(1));
    }

    #[test]
    fn clb_breaks_ties_toward_lowest_id() {
        let mut clusters = states(&[300, 300, 300]);
        assert_eq!(clb_select(10, params(), &clusters).unwrap(), ClusterId(0));
        // Charging the winner moves the next pick to the next id.
        clusters[0].charge(expansion(10, params()));
        assert_eq!(clb_select(10, params(), &clusters).unwrap(), ClusterId(1));
    }

    #[test]
    fn clb_errors_when_nothing_fits() {
        // need = 4 * ceil(100/2) = 200
        let clusters = states(&[150, 199]);
        assert_eq!(
            clb_select(100, params(), &clusters).unwrap_err(),
            BindingError::CapacityExhausted { needed: 200 }
        );
        assert_eq!(clb_select(100, params(), &[]).unwrap_err(), BindingError::NoClusters);
    }

    // Expected home clusters cross-checked against an independent digest
    // implementation: alice % 3 == 2, bob % 3 == 0, user-7 % 3 == 1.
    #[test]
    fn initial_assignment_is_a_stable_hash() {
        let clusters = states(&[100, 100, 100]);
        assert_eq!(initial_user_assignment("alice", &clusters), ClusterId(2));
        assert_eq!(initial_user_assignment("bob", &clusters), ClusterId(0));
        assert_eq!(initial_user_assignment("user-7", &clusters), ClusterId(1));
        let four = states(&[1, 1, 1, 1]);
        assert_eq!(initial_user_assignment("alice", &four), ClusterId(1));
        assert_eq!(initial_user_assignment("bob", &four), ClusterId(2));
    }

    #[test]
    fn ulb_sticks_to_home_until_it_fills() {
        let mut clusters = states(&[1000, 1000, 1000]);
        let mut policy = BindingPolicy::new(BindingMode::Ulb);
        let home = policy.select("alice", 10, params(), &clusters).unwrap();
        assert_eq!(home, ClusterId(2));
        clusters[2].charge(expansion(10, params()));
        assert_eq!(policy.select("alice", 10, params(), &clusters).unwrap(), home);
        assert_eq!(policy.assignments_of("alice"), &[ClusterId(2)]);
    }

    #[test]
    fn ulb_rolls_over_to_least_loaded_cluster() {
        let mut clusters = states(&[1000, 1000, 1000]);
        let mut policy = BindingPolicy::new(BindingMode::Ulb);
        // Fill bob's home cluster and watch him move to the candidate
        // serving the fewest users, ties to the lowest id.
        assert_eq!(policy.select("bob", 10, params(), &clusters).unwrap(), ClusterId(0));
        clusters[0].used = 1000;
        let next = policy.select("bob", 10, params(), &clusters).unwrap();
        // Clusters 1 and 2 both host zero users; lowest id wins.
        assert_eq!(next, ClusterId(1));
        assert_eq!(policy.assignments_of("bob"), &[ClusterId(0), ClusterId(1)]);

        // With clusters 0 and 1 both full, the only candidate left is 2,
        // even though alice already lives there.
        policy.select("alice", 10, params(), &clusters).unwrap();
        clusters[1].used = 1000;
        let moved = policy.select("bob", 10, params(), &clusters).unwrap();
        assert_eq!(moved, ClusterId(2));
        assert_eq!(policy.assignments_of("bob"), &[ClusterId(0), ClusterId(1), ClusterId(2)]);
    }

    #[test]
    fn ulb_exhaustion_surfaces_an_error() {
        let mut clusters = states(&[100, 100]);
        let mut policy = BindingPolicy::new(BindingMode::Ulb);
        clusters[0].used = 100;
        clusters[1].used = 100;
        assert!(matches!(
            policy.select("alice", 10, params(), &clusters),
            Err(BindingError::CapacityExhausted { .. })
        ));
    }

    #[test]
    fn clb_policy_ignores_user_state() {
        let clusters = states(&[100, 500]);
        let mut policy = BindingPolicy::new(BindingMode::Clb);
        assert_eq!(policy.select("alice", 10, params(), &clusters).unwrap(), ClusterId(1));
        assert_eq!(policy.select("bob", 10, params(), &clusters).unwrap(), ClusterId(1));
        assert!(policy.assignments_of("alice").is_empty());
    }

    #[test]
    fn topology_validation() {
        let spec = |id, members: &[&str]| ClusterSpec {
            id: ClusterId(id),
            members: members.iter().map(|m| m.to_string()).collect(),
        };
        let mut topo = Topology {
            mode: BindingMode::Clb,
            params: CodingParams::new(2, 1).unwrap(),
            cluster_capacity: 1000,
            clusters: vec![spec(0, &["a", "b"]), spec(1, &["c", "d"])],
        };
        assert!(topo.validate().is_ok());
        assert_eq!(topo.position_of("c"), Some((ClusterId(1), 0)));
        assert_eq!(topo.position_of("zz"), None);
        assert_eq!(topo.directory_addr(), "a");

        let chunk = ChunkId::from_bytes([3; 20]);
        assert_eq!(topo.coding_member(ClusterId(0), chunk), Some("b"));

        topo.clusters[1].id = ClusterId(0);
        assert!(topo.validate().is_err());
        topo.clusters[1].id = ClusterId(1);
        topo.clusters[1].members[0] = "a".to_string();
        assert!(topo.validate().is_err());
        topo.clusters[1].members[0] = "c".to_string();
        topo.clusters[1].members.pop();
        assert!(topo.validate().is_err());
    }

    #[test]
    fn mode_parses_from_config_strings() {
        assert_eq!("clb".parse::<BindingMode>().unwrap(), BindingMode::Clb);
        assert_eq!("ulb".parse::<BindingMode>().unwrap(), BindingMode::Ulb);
        assert!("other".parse::<BindingMode>().is_err());
    }
}
