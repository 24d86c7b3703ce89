//! 2D-mesh network model: XY routing, link-occupancy contention and
//! closed-form row/column collective costs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::arch::{NocSpec, TileSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub const fn new(x: u32, y: u32) -> Self {
        TileCoord { x, y }
    }

    pub fn index(self, mesh_x: u32) -> usize {
        self.y as usize * mesh_x as usize + self.x as usize
    }

    pub fn is_inside(self, noc: &NocSpec) -> bool {
        self.x < noc.mesh_x && self.y < noc.mesh_y
    }
}

impl std::fmt::Display for TileCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Direction of travel out of a router. North is increasing `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    East,
    West,
    North,
    South,
}

/// Directed link leaving `from` towards `dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub from: TileCoord,
    pub dir: Dir,
}

/// Dimension-ordered route: all X hops first, then all Y hops.
pub fn route_xy(src: TileCoord, dst: TileCoord) -> Vec<Link> {
    let mut path = Vec::with_capacity((src.x.abs_diff(dst.x) + src.y.abs_diff(dst.y)) as usize);
    let mut cur = src;
    while cur.x != dst.x {
        let dir = if dst.x > cur.x { Dir::East } else { Dir::West };
        path.push(Link { from: cur, dir });
        cur.x = if dir == Dir::East { cur.x + 1 } else { cur.x - 1 };
    }
    while cur.y != dst.y {
        let dir = if dst.y > cur.y { Dir::North } else { Dir::South };
        path.push(Link { from: cur, dir });
        cur.y = if dir == Dir::North { cur.y + 1 } else { cur.y - 1 };
    }
    path
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    Multicast,
    ReduceSum,
    ReduceMax,
}

impl CollectiveKind {
    pub fn is_reduce(self) -> bool {
        !matches!(self, CollectiveKind::Multicast)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "sw_seq")]
    SwSeq,
    #[serde(rename = "sw_tree")]
    SwTree,
    #[serde(rename = "hw")]
    Hw,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SwSeq, Strategy::SwTree, Strategy::Hw];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SwSeq => "SW.Seq",
            Strategy::SwTree => "SW.Tree",
            Strategy::Hw => "HW",
        }
    }
}

/// One row- or column-wise collective. The group spans `group_extent`
/// consecutive tiles starting at `origin` along `axis`; `root` is the
/// source (multicast) or destination (reduce).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CollectiveRequest {
    pub kind: CollectiveKind,
    pub axis: Axis,
    pub strategy: Strategy,
    pub root: TileCoord,
    pub size: u64,
    pub group_extent: u32,
}

impl CollectiveRequest {
    pub fn check(&self, noc: &NocSpec) -> Result<()> {
        let extent = match self.axis {
            Axis::Row => noc.mesh_x,
            Axis::Column => noc.mesh_y,
        };
        if self.size == 0 || self.group_extent == 0 {
            return Err(Error::Contract("collective needs size > 0 and group_extent ≥ 1".into()));
        }
        if self.group_extent > extent {
            return Err(Error::Contract(format!(
                "group_extent {} exceeds mesh extent {extent} along {:?}",
                self.group_extent, self.axis
            )));
        }
        if !self.root.is_inside(noc) {
            return Err(Error::Contract(format!("root {} outside the mesh", self.root)));
        }
        Ok(())
    }
}

/// Cycles to push `size` bytes through one link.
pub fn occupancy(size: u64, link_bytes_per_cycle: u64) -> u64 {
    size.div_ceil(link_bytes_per_cycle)
}

/// Number of software-tree stages for `extent` participants.
pub fn tree_steps(extent: u32) -> u32 {
    extent.next_power_of_two().trailing_zeros()
}

/// Uncontended latency of a collective.
///
/// * HW: one occupancy plus a hop per extra tile (flit-level pipelining; the
///   in-router combine of a reduction is free).
/// * SW.Seq: one unicast per destination, each waiting for the previous one.
/// * SW.Tree: `ceil(log2 E)` halving stages, barrier between consecutive stages.
///
/// Software reductions also pay `3·size / l1_bandwidth` per received operand.
pub fn collective_time(req: &CollectiveRequest, noc: &NocSpec, tile: &TileSpec) -> Result<u64> {
    req.check(noc)?;
    let e = req.group_extent as u64;
    if e == 1 {
        return Ok(0);
    }
    let occ = occupancy(req.size, noc.link_bytes_per_cycle as u64);
    let hop = noc.hop_latency;
    let combine = if req.kind.is_reduce() {
        (3 * req.size).div_ceil(tile.l1_bandwidth as u64)
    } else {
        0
    };
    // Every software stage ends with a handshake before the next may start.
    let sync = noc.sync_barrier_cost;
    Ok(match req.strategy {
        Strategy::Hw => occ + (e - 1) * hop,
        Strategy::SwSeq => (1..e).map(|d| occ + d * hop + combine + sync).sum(),
        Strategy::SwTree => {
            let span0 = req.group_extent.next_power_of_two() as u64;
            (0..tree_steps(req.group_extent)).map(|s| occ + (span0 >> (s + 1)) * hop + combine + sync).sum()
        }
    })
}

/// Links touched by a collective over `extent` tiles starting at `origin`.
pub fn segment_links(origin: TileCoord, axis: Axis, extent: u32) -> Vec<Link> {
    let mut links = Vec::with_capacity(2 * extent.saturating_sub(1) as usize);
    for i in 0..extent.saturating_sub(1) {
        let (a, b) = match axis {
            Axis::Row => (TileCoord::new(origin.x + i, origin.y), TileCoord::new(origin.x + i + 1, origin.y)),
            Axis::Column => (TileCoord::new(origin.x, origin.y + i), TileCoord::new(origin.x, origin.y + i + 1)),
        };
        let (fwd, back) = match axis {
            Axis::Row => (Dir::East, Dir::West),
            Axis::Column => (Dir::North, Dir::South),
        };
        links.push(Link { from: a, dir: fwd });
        links.push(Link { from: b, dir: back });
    }
    links
}

/// Per-link reservation table. Reservations are appended after whatever is
/// already booked on every link of the path, so intervals never overlap.
#[derive(Debug, Default, Clone)]
pub struct LinkTimeline {
    busy_until: HashMap<Link, u64>,
    intervals: Option<HashMap<Link, Vec<(u64, u64)>>>,
}

impl LinkTimeline {
    pub fn new() -> Self {
        Self::default()
    }

    /// Timeline that also records every interval (for inspection in tests).
    pub fn recording() -> Self {
        LinkTimeline { busy_until: HashMap::new(), intervals: Some(HashMap::new()) }
    }

    pub fn free_at(&self, link: &Link) -> u64 {
        self.busy_until.get(link).copied().unwrap_or(0)
    }

    pub fn intervals(&self, link: &Link) -> &[(u64, u64)] {
        self.intervals
            .as_ref()
            .and_then(|m| m.get(link))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Books `[grant, grant + duration)` on all `links`, where `grant` is
    /// the first cycle ≥ `start` at which every link is free. Returns `grant`.
    pub fn reserve(&mut self, links: &[Link], start: u64, duration: u64) -> u64 {
        let grant = links.iter().map(|l| self.free_at(l)).fold(start, u64::max);
        if duration == 0 {
            return grant;
        }
        for l in links {
            self.busy_until.insert(*l, grant + duration);
            if let Some(map) = self.intervals.as_mut() {
                let v = map.entry(*l).or_default();
                debug_assert!(v.last().is_none_or(|&(_, end)| end <= grant), "overlapping link reservation");
                v.push((grant, grant + duration));
            }
        }
        grant
    }

    /// Unicast along `path`; returns the completion cycle.
    pub fn schedule_transfer(&mut self, path: &[Link], start: u64, size: u64, link_bytes_per_cycle: u64, hop_latency: u64) -> u64 {
        if path.is_empty() {
            return start;
        }
        let occ = occupancy(size, link_bytes_per_cycle);
        let grant = self.reserve(path, start, occ);
        grant + occ + path.len() as u64 * hop_latency
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;

    fn noc() -> (NocSpec, TileSpec) {
        let a = ArchConfig::reference();
        (a.noc, a.tile)
    }

    fn req(kind: CollectiveKind, strategy: Strategy, size: u64, e: u32) -> CollectiveRequest {
        CollectiveRequest { kind, axis: Axis::Row, strategy, root: TileCoord::new(0, 0), size, group_extent: e }
    }

    #[test]
    fn routes() {
        assert!(route_xy(TileCoord::new(0, 0), TileCoord::new(0, 0)).is_empty());
        let p = route_xy(TileCoord::new(0, 0), TileCoord::new(3, 0));
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|l| l.dir == Dir::East));
        let p = route_xy(TileCoord::new(1, 2), TileCoord::new(4, 5));
        let dirs: Vec<_> = p.iter().map(|l| l.dir).collect();
        assert_eq!(dirs, [Dir::East, Dir::East, Dir::East, Dir::North, Dir::North, Dir::North]);
    }

    #[test]
    fn hw_and_seq_multicast_closed_form() {
        let (mut n, t) = noc();
        n.sync_barrier_cost = 0;
        let hw = collective_time(&req(CollectiveKind::Multicast, Strategy::Hw, 128 << 10, 32), &n, &t).unwrap();
        assert_eq!(hw, 1055);
        let seq = collective_time(&req(CollectiveKind::Multicast, Strategy::SwSeq, 128 << 10, 32), &n, &t).unwrap();
        assert_eq!(seq, 32_240);
        let ratio = seq as f64 / hw as f64;
        assert!((ratio - 30.56).abs() < 0.01, "{ratio}");
        n.sync_barrier_cost = 64;
        let seq = collective_time(&req(CollectiveKind::Multicast, Strategy::SwSeq, 128 << 10, 32), &n, &t).unwrap();
        assert_eq!(seq, 32_240 + 31 * 64);
    }

    #[test]
    fn one_mebibyte_ratios() {
        let (n, t) = noc();
        let time = |k, s| collective_time(&req(k, s, 1 << 20, 32), &n, &t).unwrap() as f64;
        let m = CollectiveKind::Multicast;
        let r = CollectiveKind::ReduceSum;
        let hw = time(m, Strategy::Hw);
        assert_eq!(hw, 8223.0);
        assert!((27.0..=34.0).contains(&(time(m, Strategy::SwSeq) / hw)));
        assert!((4.3..=6.0).contains(&(time(m, Strategy::SwTree) / hw)));
        assert!((45.0..=80.0).contains(&(time(r, Strategy::SwSeq) / hw)));
        assert!((8.0..=14.0).contains(&(time(r, Strategy::SwTree) / hw)));
    }

    proptest::proptest! {
        #[test]
        fn strategy_ordering(size in 128u64..(4 << 20), e in 2u32..=32, barrier in 0u64..512, reduce: bool) {
            let (mut n, t) = noc();
            n.sync_barrier_cost = barrier;
            let k = if reduce { CollectiveKind::ReduceMax } else { CollectiveKind::Multicast };
            let hw = collective_time(&req(k, Strategy::Hw, size, e), &n, &t).unwrap();
            let tree = collective_time(&req(k, Strategy::SwTree, size, e), &n, &t).unwrap();
            let seq = collective_time(&req(k, Strategy::SwSeq, size, e), &n, &t).unwrap();
            proptest::prop_assert!(hw <= tree && tree <= seq, "{hw} {tree} {seq}");
        }

        #[test]
        fn timeline_intervals_never_overlap(reqs in proptest::collection::vec((0u32..6, 0u32..6, 0u64..50, 1u64..2000), 1..20)) {
            let mut tl = LinkTimeline::recording();
            for (a, b, start, size) in &reqs {
                let path = route_xy(TileCoord::new(*a, 0), TileCoord::new(*b, 1));
                tl.schedule_transfer(&path, *start, *size, 128, 1);
            }
            for x in 0..6 {
                for dir in [Dir::East, Dir::West, Dir::North] {
                    let iv = tl.intervals(&Link { from: TileCoord::new(x, 0), dir });
                    for w in iv.windows(2) {
                        proptest::prop_assert!(w[0].1 <= w[1].0);
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_group_is_free() {
        let (n, t) = noc();
        for s in Strategy::ALL {
            for k in [CollectiveKind::Multicast, CollectiveKind::ReduceSum] {
                assert_eq!(collective_time(&req(k, s, 4096, 1), &n, &t).unwrap(), 0);
            }
        }
    }

    #[test]
    fn oversized_group_is_rejected() {
        let (n, t) = noc();
        assert!(collective_time(&req(CollectiveKind::Multicast, Strategy::Hw, 64, 33), &n, &t).is_err());
    }

    #[test]
    fn tree_stage_count() {
        assert_eq!(tree_steps(1), 0);
        assert_eq!(tree_steps(2), 1);
        assert_eq!(tree_steps(3), 2);
        assert_eq!(tree_steps(32), 5);
    }

    #[test]
    fn single_flit_transfer() {
        let mut tl = LinkTimeline::new();
        let path = route_xy(TileCoord::new(0, 0), TileCoord::new(1, 0));
        assert_eq!(tl.schedule_transfer(&path, 10, 128, 128, 1), 12);
    }

    #[test]
    fn shared_link_serializes() {
        let mut tl = LinkTimeline::recording();
        let path = route_xy(TileCoord::new(0, 0), TileCoord::new(2, 0));
        let a = tl.schedule_transfer(&path, 0, 1280, 128, 1);
        let b = tl.schedule_transfer(&path, 0, 1280, 128, 1);
        assert_eq!(b - a, 10);
        let iv = tl.intervals(&path[0]);
        assert_eq!(iv, &[(0, 10), (10, 20)]);
    }

    #[test]
    fn disjoint_paths_do_not_interact() {
        let mut tl = LinkTimeline::new();
        let p1 = route_xy(TileCoord::new(0, 0), TileCoord::new(3, 0));
        let p2 = route_xy(TileCoord::new(0, 1), TileCoord::new(0, 3));
        let mut alone = LinkTimeline::new();
        let solo1 = alone.schedule_transfer(&p1, 5, 4096, 128, 2);
        let mut alone = LinkTimeline::new();
        let solo2 = alone.schedule_transfer(&p2, 5, 4096, 128, 2);
        assert_eq!(tl.schedule_transfer(&p1, 5, 4096, 128, 2), solo1);
        assert_eq!(tl.schedule_transfer(&p2, 5, 4096, 128, 2), solo2);
    }

    #[test]
    fn segment_links_cover_both_directions() {
        let l = segment_links(TileCoord::new(2, 1), Axis::Column, 4);
        assert_eq!(l.len(), 6);
        assert!(segment_links(TileCoord::new(0, 0), Axis::Row, 1).is_empty());
    }
}
