//! Spatial domains and their recursive partition into nested location sets.
//!
//! A partition of depth `M` with branching `(K_1, ..., K_M)` is a tree whose
//! node at path `(k_1, ..., k_m)` holds the location indices of the set at
//! resolution `m`. The root (empty path, printed `0`) holds every location.
//! Children of a node are disjoint and their union is the parent.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Leaf size below which local likelihoods become unreliable.
pub const DEFAULT_MIN_LEAF_SIZE: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub coords: Vec<f64>,
    /// ROI label, 1-based. `None` is treated as ROI 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<u32>,
}

impl Location {
    pub fn new(coords: Vec<f64>) -> Self {
        Location { coords, roi: None }
    }

    pub fn with_roi(coords: Vec<f64>, roi: u32) -> Self {
        Location {
            coords,
            roi: Some(roi),
        }
    }

    /// ROI index (1-based) with the unlabeled default.
    #[inline]
    pub fn roi_index(&self) -> u32 {
        self.roi.unwrap_or(1)
    }

    /// Squared Euclidean distance.
    #[inline]
    pub fn sq_dist(&self, other: &Location) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (b - a) * (b - a))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialDomain {
    locations: Vec<Location>,
    dim: usize,
}

impl SpatialDomain {
    /// Validates dimensions, distinctness and ROI contiguity.
    pub fn new(locations: Vec<Location>) -> Result<Self> {
        let dim = locations
            .first()
            .map(|l| l.coords.len())
            .ok_or_else(|| Error::InvalidDomain("domain has no locations".into()))?;
        if dim == 0 {
            return Err(Error::InvalidDomain("zero-dimensional locations".into()));
        }
        for (j, loc) in locations.iter().enumerate() {
            if loc.coords.len() != dim {
                return Err(Error::InvalidDomain(format!(
                    "location {j} has dimension {}, expected {dim}",
                    loc.coords.len()
                )));
            }
            if loc.coords.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidDomain(format!(
                    "location {j} has non-finite coordinates"
                )));
            }
        }

        let mut seen = BTreeSet::new();
        for (j, loc) in locations.iter().enumerate() {
            let key: Vec<u64> = loc.coords.iter().map(|c| (c + 0.0).to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::InvalidDomain(format!(
                    "duplicate location at index {j}: {:?}",
                    loc.coords
                )));
            }
        }

        // labels must form contiguous runs
        let mut closed = BTreeSet::new();
        let mut current: Option<u32> = None;
        for loc in &locations {
            let r = loc.roi_index();
            if current != Some(r) {
                if closed.contains(&r) {
                    return Err(Error::InvalidDomain(format!(
                        "ROI {r} is not a contiguous index range"
                    )));
                }
                if let Some(prev) = current {
                    closed.insert(prev);
                }
                current = Some(r);
            }
        }

        Ok(SpatialDomain { locations, dim })
    }

    /// Regular grid `[1, nx] x [1, ny]` with unit spacing, x varying slowest.
    pub fn grid(nx: usize, ny: usize) -> Result<Self> {
        Self::grid_with_offset(nx, ny, 0.0, 0.0, None)
    }

    /// Regular grid `[1+ox, nx+ox] x [1+oy, ny+oy]`, optionally labelled with an ROI.
    pub fn grid_with_offset(
        nx: usize,
        ny: usize,
        ox: f64,
        oy: f64,
        roi: Option<u32>,
    ) -> Result<Self> {
        let mut locs = Vec::with_capacity(nx * ny);
        for i in 1..=nx {
            for j in 1..=ny {
                locs.push(Location {
                    coords: vec![i as f64 + ox, j as f64 + oy],
                    roi,
                });
            }
        }
        SpatialDomain::new(locs)
    }

    /// Concatenates domains, keeping their ROI labels.
    pub fn concat(parts: &[SpatialDomain]) -> Result<Self> {
        let locs = parts
            .iter()
            .flat_map(|d| d.locations.iter().cloned())
            .collect();
        SpatialDomain::new(locs)
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distinct ROI labels in index order.
    pub fn roi_labels(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for l in &self.locations {
            let r = l.roi_index();
            if out.last() != Some(&r) {
                out.push(r);
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Location> {
        indices.iter().map(|&j| self.locations[j].clone()).collect()
    }
}

/// Index path `(k_1, ..., k_m)` of a partition node; child indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodePath(Vec<u16>);

impl NodePath {
    pub fn root() -> Self {
        NodePath(Vec::new())
    }

    pub fn from_indices(indices: &[u16]) -> Self {
        NodePath(indices.to_vec())
    }

    pub fn indices(&self) -> &[u16] {
        &self.0
    }

    /// Resolution of the node (0 for the root).
    pub fn resolution(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, k: u16) -> NodePath {
        let mut v = self.0.clone();
        v.push(k);
        NodePath(v)
    }

    pub fn parent(&self) -> Option<NodePath> {
        if self.0.is_empty() {
            None
        } else {
            Some(NodePath(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Ancestor at resolution `m` (the node itself when `m` equals its resolution).
    pub fn ancestor(&self, m: usize) -> NodePath {
        NodePath(self.0[..m.min(self.0.len())].to_vec())
    }

    pub fn is_descendant_of(&self, other: &NodePath) -> bool {
        self.0.len() >= other.0.len() && self.0[..other.0.len()] == other.0[..]
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("0");
        }
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        f.write_str(&parts.join("."))
    }
}

impl FromStr for NodePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "0" || s.is_empty() {
            return Ok(NodePath::root());
        }
        s.split('.')
            .map(|p| match p.parse::<u16>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(Error::InvalidArgument(format!("bad node path '{s}'"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(NodePath)
    }
}

impl Serialize for NodePath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodePath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    #[default]
    CoordinateSplit,
    RoiBalancedCoordinateSplit,
}

impl FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordinate-split" | "coordinate" => Ok(PartitionStrategy::CoordinateSplit),
            "roi-balanced-coordinate-split" | "roi-balanced" => {
                Ok(PartitionStrategy::RoiBalancedCoordinateSplit)
            }
            _ => Err(Error::InvalidArgument(format!("unknown strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionTree {
    #[serde(rename = "M")]
    depth: usize,
    branching: Vec<usize>,
    nodes: BTreeMap<NodePath, Vec<usize>>,
}

impl PartitionTree {
    /// Number of resolutions `M`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn branching(&self) -> &[usize] {
        &self.branching
    }

    pub fn nodes(&self) -> &BTreeMap<NodePath, Vec<usize>> {
        &self.nodes
    }

    pub fn indices(&self, path: &NodePath) -> Option<&[usize]> {
        self.nodes.get(path).map(Vec::as_slice)
    }

    pub fn is_leaf(&self, path: &NodePath) -> bool {
        path.resolution() == self.depth
    }

    pub fn children(&self, path: &NodePath) -> Vec<NodePath> {
        if self.is_leaf(path) {
            return Vec::new();
        }
        let k = self.branching[path.resolution()];
        (1..=k as u16).map(|c| path.child(c)).collect()
    }

    /// Nodes at resolution `m` in index order.
    pub fn nodes_at(&self, m: usize) -> Vec<NodePath> {
        self.nodes
            .keys()
            .filter(|p| p.resolution() == m)
            .cloned()
            .collect()
    }

    pub fn leaves(&self) -> Vec<NodePath> {
        self.nodes_at(self.depth)
    }

    pub fn leaves_under(&self, path: &NodePath) -> Vec<NodePath> {
        self.nodes
            .keys()
            .filter(|p| p.resolution() == self.depth && p.is_descendant_of(path))
            .cloned()
            .collect()
    }

    /// Checks disjoint-union exactness at every node and the leaf-size bound.
    pub fn validate(&self, n_locations: usize, min_leaf_size: usize) -> Result<()> {
        let root = self
            .nodes
            .get(&NodePath::root())
            .ok_or_else(|| Error::InfeasiblePartition("missing root".into()))?;
        let all: Vec<usize> = (0..n_locations).collect();
        if sorted(root) != all {
            return Err(Error::InfeasiblePartition(
                "root does not equal the full index set".into(),
            ));
        }
        for (path, members) in &self.nodes {
            if self.is_leaf(path) {
                if members.len() < min_leaf_size {
                    return Err(Error::InfeasiblePartition(format!(
                        "leaf {path} has {} < {min_leaf_size} locations",
                        members.len()
                    )));
                }
                continue;
            }
            let mut union = Vec::new();
            for c in self.children(path) {
                let child = self.nodes.get(&c).ok_or_else(|| {
                    Error::InfeasiblePartition(format!("missing node {c}"))
                })?;
                union.extend_from_slice(child);
            }
            let n_union = union.len();
            let union = sorted(&union);
            if union.windows(2).any(|w| w[0] == w[1]) || n_union != union.len() {
                return Err(Error::InfeasiblePartition(format!(
                    "children of {path} overlap"
                )));
            }
            if union != sorted(members) {
                return Err(Error::InfeasiblePartition(format!(
                    "children of {path} do not cover it"
                )));
            }
        }
        let expected: usize = self.branching.iter().product();
        if self.leaves().len() != expected {
            return Err(Error::InfeasiblePartition(format!(
                "expected {expected} leaves, found {}",
                self.leaves().len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tree: PartitionTree = serde_json::from_str(s)?;
        if tree.branching.len() != tree.depth {
            return Err(Error::InfeasiblePartition(
                "branching length differs from M".into(),
            ));
        }
        Ok(tree)
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

/// Builds the recursive partition.
///
/// Each node is split along its widest coordinate axis (ties go to the lower
/// axis). Locations are ordered by `(axis coordinate, remaining coordinates,
/// original index)` so the split is fully deterministic. A branching factor
/// `K` is realised as nested binary splits while `K` is even and as `K`
/// contiguous slabs along one axis when it is odd, so `K = 4` yields
/// quadrants. Child sizes differ by at most one.
pub fn build_partition(
    domain: &SpatialDomain,
    branching: &[usize],
    strategy: PartitionStrategy,
    min_leaf_size: usize,
) -> Result<PartitionTree> {
    if branching.iter().any(|&k| k == 0) {
        return Err(Error::InfeasiblePartition(
            "branching factors must be positive".into(),
        ));
    }
    let n_leaves: usize = branching.iter().product();
    let min_leaf_size = min_leaf_size.max(1);

    let groups: Vec<Vec<usize>> = match strategy {
        PartitionStrategy::CoordinateSplit => vec![(0..domain.len()).collect()],
        PartitionStrategy::RoiBalancedCoordinateSplit => {
            let labels = domain.roi_labels();
            labels
                .iter()
                .map(|r| {
                    (0..domain.len())
                        .filter(|&j| domain.locations[j].roi_index() == *r)
                        .collect()
                })
                .collect()
        }
    };

    for g in &groups {
        if n_leaves * min_leaf_size > g.len() {
            return Err(Error::InfeasiblePartition(format!(
                "{n_leaves} leaves of at least {min_leaf_size} locations need {} locations, \
                 only {} available{}",
                n_leaves * min_leaf_size,
                g.len(),
                if groups.len() > 1 { " in an ROI" } else { "" }
            )));
        }
    }

    let mut nodes: BTreeMap<NodePath, Vec<usize>> = BTreeMap::new();
    for group in groups {
        let mut per_group = BTreeMap::new();
        split_recursive(domain, group, branching, NodePath::root(), &mut per_group);
        for (path, members) in per_group {
            nodes.entry(path).or_default().extend(members);
        }
    }
    for members in nodes.values_mut() {
        members.sort_unstable();
    }

    let tree = PartitionTree {
        depth: branching.len(),
        branching: branching.to_vec(),
        nodes,
    };
    tree.validate(domain.len(), min_leaf_size)?;
    Ok(tree)
}

fn split_recursive(
    domain: &SpatialDomain,
    members: Vec<usize>,
    branching: &[usize],
    path: NodePath,
    out: &mut BTreeMap<NodePath, Vec<usize>>,
) {
    if let Some((&k, rest)) = branching.split_first() {
        let n = members.len();
        let targets: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        let mut parts = Vec::with_capacity(k);
        split_into(domain, members.clone(), &targets, &mut parts);
        for (c, part) in parts.into_iter().enumerate() {
            split_recursive(domain, part, rest, path.child(c as u16 + 1), out);
        }
    }
    out.insert(path, members);
}

/// Splits `members` into `targets.len()` contiguous groups of the given sizes.
fn split_into(
    domain: &SpatialDomain,
    mut members: Vec<usize>,
    targets: &[usize],
    out: &mut Vec<Vec<usize>>,
) {
    if targets.len() == 1 {
        out.push(members);
        return;
    }
    let axis = widest_axis(domain, &members);
    sort_along(domain, &mut members, axis);
    if targets.len() % 2 == 0 {
        let half = targets.len() / 2;
        let lower: usize = targets[..half].iter().sum();
        let upper = members.split_off(lower);
        split_into(domain, members, &targets[..half], out);
        split_into(domain, upper, &targets[half..], out);
    } else {
        let mut start = 0;
        for &t in targets {
            out.push(members[start..start + t].to_vec());
            start += t;
        }
    }
}

fn widest_axis(domain: &SpatialDomain, members: &[usize]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for axis in 0..domain.dim {
        let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &j| {
            let c = domain.locations[j].coords[axis];
            (acc.0.min(c), acc.1.max(c))
        });
        let extent = hi - lo;
        if extent > best.1 {
            best = (axis, extent);
        }
    }
    best.0
}

fn sort_along(domain: &SpatialDomain, members: &mut [usize], axis: usize) {
    let locs = &domain.locations;
    members.sort_by(|&a, &b| {
        let (ca, cb) = (&locs[a].coords, &locs[b].coords);
        let mut ord = ca[axis].total_cmp(&cb[axis]);
        for other in (0..ca.len()).filter(|&x| x != axis) {
            if ord != Ordering::Equal {
                break;
            }
            ord = ca[other].total_cmp(&cb[other]);
        }
        ord.then(a.cmp(&b))
    });
}
