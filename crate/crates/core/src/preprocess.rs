//! Multi-resolution preprocessing: voxel-grid downsampling, point-to-superpoint
//! partition, kNN tables and a geodesic (graph shortest-path) distance table.
//!
//! The pipeline downsamples each input cloud into a pyramid whose first level is the
//! "dense" working resolution and whose coarsest level provides the superpoints.  Every
//! dense point is assigned to its nearest superpoint (a patch); superpoints get a
//! distance-sorted kNN list (self in slot 0) and per-slot geodesic distances used by the
//! attention and masking stages.

use crate::geometry::Point3;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("voxel size must be positive")]
    NonPositiveVoxel,
    #[error("superpoint set is empty")]
    EmptySuperpoints,
    #[error("k = {k} exceeds point count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("pyramid needs at least 2 stages, got {0}")]
    TooFewStages(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
}

/// Points plus optional per-point instance labels (`-1` = background, `k >= 1` =
/// instance `k`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<i32>) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per point");
        Self {
            points,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Coarse structure over one cloud: superpoints, the dense-point partition, kNN slots
/// and per-slot geodesic distances.
///
/// Invariants: `patch_of.len()` equals the dense point count and every entry indexes a
/// superpoint; `knn[i][0] == i` with slots sorted by ascending Euclidean distance (ties
/// by index); `geodesic[i]` parallels `knn[i]` with `geodesic[i][0] == 0`.  Geodesic
/// entries for unreachable slots hold the disconnection cap (10x the longest graph
/// edge), which marks unreachability and may undercut the Euclidean distance.
#[derive(Clone, Debug)]
pub struct SuperpointGraph {
    pub superpoints: Vec<Point3>,
    /// Dense point index -> superpoint index (a partition of the dense cloud).
    pub patch_of: Vec<usize>,
    /// `knn[i]`: slot list of superpoint indices, self first.
    pub knn: Vec<Vec<usize>>,
    /// `geodesic[i][j]`: graph shortest-path distance from `i` to `knn[i][j]`.
    pub geodesic: Vec<Vec<f64>>,
    members: Vec<Vec<usize>>,
}

impl SuperpointGraph {
    /// Assembles a graph from parts, deriving the patch-membership lists.
    pub fn from_parts(
        superpoints: Vec<Point3>,
        patch_of: Vec<usize>,
        knn: Vec<Vec<usize>>,
        geodesic: Vec<Vec<f64>>,
    ) -> Self {
        let mut members = vec![Vec::new(); superpoints.len()];
        for (point, &sp) in patch_of.iter().enumerate() {
            members[sp].push(point);
        }
        Self {
            superpoints,
            patch_of,
            knn,
            geodesic,
            members,
        }
    }

    /// Dense point indices assigned to superpoint `s`, ascending.
    pub fn members_of(&self, s: usize) -> &[usize] {
        &self.members[s]
    }

    pub fn len(&self) -> usize {
        self.superpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpoints.is_empty()
    }

    /// Slot count of the kNN lists (0 for an empty graph).
    pub fn slots(&self) -> usize {
        self.knn.first().map_or(0, Vec::len)
    }
}

/// Voxel-grid downsampling: points are binned to the nearest voxel centre (centres at
/// integer multiples of `voxel`) and each occupied voxel is replaced by the centroid of
/// its members.  Labels, when present, are carried by per-voxel majority vote with ties
/// going to the smaller label.  Output order is sorted by voxel key, so the result is
/// independent of input order up to centroid summation order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, PreprocessError> {
    if !(voxel > 0.0) {
        return Err(PreprocessError::NonPositiveVoxel);
    }
    struct Acc {
        sum: [f64; 3],
        count: usize,
        votes: BTreeMap<i32, usize>,
    }
    let mut bins: BTreeMap<(i64, i64, i64), Acc> = BTreeMap::new();
    for (idx, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.x / voxel).round() as i64,
            (p.y / voxel).round() as i64,
            (p.z / voxel).round() as i64,
        );
        let acc = bins.entry(key).or_insert_with(|| Acc {
            sum: [0.0; 3],
            count: 0,
            votes: BTreeMap::new(),
        });
        acc.sum[0] += p.x;
        acc.sum[1] += p.y;
        acc.sum[2] += p.z;
        acc.count += 1;
        if let Some(labels) = &cloud.labels {
            *acc.votes.entry(labels[idx]).or_insert(0) += 1;
        }
    }
    let mut points = Vec::with_capacity(bins.len());
    let mut labels = Vec::new();
    for acc in bins.values() {
        let n = acc.count as f64;
        points.push(Point3::new(acc.sum[0] / n, acc.sum[1] / n, acc.sum[2] / n));
        if cloud.labels.is_some() {
            // Majority vote; BTreeMap iteration is ascending, and strict `>` keeps the
            // smallest label on ties.
            let mut best = (i32::MIN, 0usize);
            for (&label, &votes) in &acc.votes {
                if votes > best.1 {
                    best = (label, votes);
                }
            }
            labels.push(best.0);
        }
    }
    Ok(PointCloud {
        points,
        labels: cloud.labels.as_ref().map(|_| labels),
    })
}

/// Builds a resolution pyramid by repeated voxel downsampling with the voxel size
/// doubling per stage.  `out[0]` is the dense level (`base_voxel`); `out[stages-1]` is
/// the coarsest (superpoint) level.
pub fn build_pyramid(
    cloud: &PointCloud,
    base_voxel: f64,
    stages: usize,
) -> Result<Vec<PointCloud>, PreprocessError> {
    if stages < 2 {
        return Err(PreprocessError::TooFewStages(stages));
    }
    if cloud.is_empty() {
        return Err(PreprocessError::EmptyCloud);
    }
    let mut levels = Vec::with_capacity(stages);
    let mut voxel = base_voxel;
    levels.push(voxel_downsample(cloud, voxel)?);
    for _ in 1..stages {
        voxel *= 2.0;
        let next = voxel_downsample(levels.last().unwrap(), voxel)?;
        levels.push(next);
    }
    Ok(levels)
}

/// Assigns every dense point to its nearest superpoint (ties to the lower index).
pub fn point_to_node(
    dense: &[Point3],
    superpoints: &[Point3],
) -> Result<Vec<usize>, PreprocessError> {
    if superpoints.is_empty() {
        return Err(PreprocessError::EmptySuperpoints);
    }
    Ok(dense
        .iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (s, sp) in superpoints.iter().enumerate() {
                let d = (p - sp).norm_squared();
                if d < best.1 {
                    best = (s, d);
                }
            }
            best.0
        })
        .collect())
}

/// Per-point kNN slot lists: slot 0 is the anchor itself, the remaining `k - 1` slots
/// are the nearest other points sorted by ascending distance with ties broken by
/// ascending index.
pub fn knn_table(points: &[Point3], k: usize) -> Result<Vec<Vec<usize>>, PreprocessError> {
    let n = points.len();
    if k > n {
        return Err(PreprocessError::KTooLarge { k, n });
    }
    let mut table = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| ((p - q).norm_squared(), j))
            .collect();
        others.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut slots = Vec::with_capacity(k);
        slots.push(i);
        slots.extend(others.iter().take(k - 1).map(|&(_, j)| j));
        table.push(slots);
    }
    Ok(table)
}

/// How much larger than the longest graph edge the disconnection cap is.
pub const GEODESIC_CAP_FACTOR: f64 = 10.0;

/// Per-slot geodesic distances: single-source shortest paths over an undirected graph
/// whose edges connect each point to its `edge_k` nearest neighbours (the first
/// `edge_k` non-self kNN slots, symmetrised), weighted by Euclidean length.  Slots that
/// cannot be reached get the cap `GEODESIC_CAP_FACTOR * max_edge_length`.
///
/// `edge_k` is decoupled from the slot count: attention neighbourhoods are typically
/// wider than the connectivity graph, which is what makes geodesic distances carry
/// more structure than straight-line ones.
pub fn geodesic_table(points: &[Point3], knn: &[Vec<usize>], edge_k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    assert_eq!(knn.len(), n, "one kNN row per point");
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut max_edge = 0.0f64;
    {
        let mut seen = std::collections::BTreeSet::new();
        for (i, slots) in knn.iter().enumerate() {
            for &j in slots.iter().skip(1).take(edge_k) {
                let (a, b) = (i.min(j), i.max(j));
                if a == b || !seen.insert((a, b)) {
                    continue;
                }
                let w = (points[a] - points[b]).norm();
                adjacency[a].push((b, w));
                adjacency[b].push((a, w));
                max_edge = max_edge.max(w);
            }
        }
    }
    let cap = GEODESIC_CAP_FACTOR * max_edge;

    #[derive(PartialEq)]
    struct Entry {
        dist: f64,
        node: usize,
    }
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // Min-heap on distance via reversed comparison; ties by node index keep the
            // pop order deterministic.
            other
                .dist
                .total_cmp(&self.dist)
                .then_with(|| other.node.cmp(&self.node))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut result = Vec::with_capacity(n);
    let mut dist = vec![f64::INFINITY; n];
    let mut settled = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    for (i, slots) in knn.iter().enumerate() {
        // Early-exit Dijkstra from `i`: stop once every slot target is settled.
        let mut remaining: Vec<usize> = slots.iter().copied().filter(|&t| t != i).collect();
        let mut heap = std::collections::BinaryHeap::new();
        dist[i] = 0.0;
        touched.push(i);
        heap.push(Entry { dist: 0.0, node: i });
        while let Some(Entry { dist: d, node }) = heap.pop() {
            if settled[node] {
                continue;
            }
            settled[node] = true;
            remaining.retain(|&t| t != node);
            if remaining.is_empty() {
                break;
            }
            for &(next, w) in &adjacency[node] {
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    touched.push(next);
                    heap.push(Entry {
                        dist: nd,
                        node: next,
                    });
                }
            }
        }
        result.push(
            slots
                .iter()
                .map(|&t| if dist[t].is_finite() { dist[t] } else { cap })
                .collect(),
        );
        for &t in &touched {
            dist[t] = f64::INFINITY;
            settled[t] = false;
        }
        touched.clear();
    }
    result
}

/// Assembles the full coarse structure for one cloud: nearest-superpoint partition,
/// kNN slots of width `k` and geodesic distances over an `edge_k`-nearest graph.
pub fn build_superpoint_graph(
    dense: &[Point3],
    superpoints: Vec<Point3>,
    k: usize,
    edge_k: usize,
) -> Result<SuperpointGraph, PreprocessError> {
    let patch_of = point_to_node(dense, &superpoints)?;
    let k = k.min(superpoints.len());
    let knn = knn_table(&superpoints, k)?;
    let edge_k = edge_k.max(1);
    let geodesic = geodesic_table(&superpoints, &knn, edge_k);
    Ok(SuperpointGraph::from_parts(
        superpoints,
        patch_of,
        knn,
        geodesic,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    #[test]
    fn cube_corners_collapse_to_origin() {
        let mut pts = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    pts.push([x, y, z]);
                }
            }
        }
        let out = voxel_downsample(&cloud(&pts), 2.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_abs_diff_eq!(out.points[0], Point3::new(0.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn well_separated_clusters_keep_their_centroids() {
        // Hand-computed centroids: (0.1, 0, 0) and (10, 0.05, 0).
        let pts = [
            [0.0, 0.0, 0.0],
            [0.2, 0.0, 0.0],
            [10.0, 0.1, 0.0],
            [10.0, 0.0, 0.0],
        ];
        let out = voxel_downsample(&cloud(&pts), 1.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_abs_diff_eq!(out.points[0], Point3::new(0.1, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out.points[1], Point3::new(10.0, 0.05, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_voxel_is_rejected() {
        assert_eq!(
            voxel_downsample(&cloud(&[[0.0, 0.0, 0.0]]), 0.0).unwrap_err(),
            PreprocessError::NonPositiveVoxel
        );
    }

    #[test]
    fn labels_follow_majority_with_ties_to_smaller() {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(-0.1, 0.0, 0.0),
            Point3::new(0.0, 0.1, 0.0),
        ];
        let c = PointCloud::with_labels(points.clone(), vec![2, 2, 2, 1]);
        let out = voxel_downsample(&c, 1.0).unwrap();
        assert_eq!(out.labels.as_deref(), Some(&[2][..]));

        let tied = PointCloud::with_labels(points, vec![2, 2, 1, 1]);
        let out = voxel_downsample(&tied, 1.0).unwrap();
        assert_eq!(out.labels.as_deref(), Some(&[1][..]));
    }

    // Pyramid oracle: each level's occupancy recomputed independently by re-binning the
    // previous level's points.
    #[test]
    fn pyramid_levels_match_independent_binning() {
        // Grid offset keeps every coordinate strictly inside a voxel at all three
        // levels (never on a rounding boundary).
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    pts.push([
                        -0.44 + 0.1 * i as f64,
                        -0.44 + 0.1 * j as f64,
                        -0.44 + 0.1 * k as f64,
                    ]);
                }
            }
        }
        let c = cloud(&pts);
        let pyramid = build_pyramid(&c, 0.1, 3).unwrap();
        assert_eq!(pyramid.len(), 3);
        assert_eq!(pyramid[0].len(), 1000);
        assert_eq!(pyramid[1].len(), 125);
        assert_eq!(pyramid[2].len(), 27);

        for (level, voxel) in [(1usize, 0.2f64), (2, 0.4)] {
            let mut keys: Vec<(i64, i64, i64)> = pyramid[level - 1]
                .points
                .iter()
                .map(|p| {
                    (
                        (p.x / voxel).round() as i64,
                        (p.y / voxel).round() as i64,
                        (p.z / voxel).round() as i64,
                    )
                })
                .collect();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(pyramid[level].len(), keys.len());
        }
    }

    #[test]
    fn pyramid_needs_two_stages() {
        assert_eq!(
            build_pyramid(&cloud(&[[0.0; 3]]), 0.1, 1).unwrap_err(),
            PreprocessError::TooFewStages(1)
        );
    }

    #[test]
    fn points_partition_by_nearest_superpoint() {
        let dense = [
            Point3::new(-2.0, 0.0, 0.0),
            Point3::new(-0.5, 1.0, 0.0),
            Point3::new(0.7, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.0), // equidistant: goes to the lower index
        ];
        let sps = [Point3::new(-1.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let assign = point_to_node(&dense, &sps).unwrap();
        assert_eq!(assign, vec![0, 0, 1, 0]);
        assert_eq!(
            point_to_node(&dense, &[]).unwrap_err(),
            PreprocessError::EmptySuperpoints
        );
    }

    #[test]
    fn knn_starts_with_self_and_breaks_ties_by_index() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let knn = knn_table(&pts, 2).unwrap();
        assert_eq!(knn[0], vec![0, 1]);
        assert_eq!(knn[1], vec![1, 0]); // both neighbours at distance 1: index 0 wins
        assert_eq!(knn[2], vec![2, 1]);
    }

    #[test]
    fn knn_handles_coincident_points() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 0.0)];
        let knn = knn_table(&pts, 2).unwrap();
        assert_eq!(knn[0], vec![0, 1]);
        assert_eq!(knn[1], vec![1, 0]);
    }

    #[test]
    fn knn_rejects_k_above_n() {
        let pts = [Point3::new(0.0, 0.0, 0.0)];
        assert_eq!(
            knn_table(&pts, 2).unwrap_err(),
            PreprocessError::KTooLarge { k: 2, n: 1 }
        );
    }

    #[test]
    fn geodesic_equals_euclidean_when_all_edges_direct() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.5, 0.0),
        ];
        let knn = knn_table(&pts, 3).unwrap();
        let geo = geodesic_table(&pts, &knn, 2);
        for (i, slots) in knn.iter().enumerate() {
            for (slot, &j) in slots.iter().enumerate() {
                assert_abs_diff_eq!(geo[i][slot], (pts[i] - pts[j]).norm(), epsilon = 1e-12);
            }
        }
    }

    // C-shaped arrangement: the arm tips are close in space but the connectivity graph
    // (single nearest neighbour per node) chains along the arc, so the geodesic is the
    // summed arc length.  Expected value enumerated from the fixture.
    #[test]
    fn geodesic_goes_around_the_c_shape() {
        // Arc gaps increase strictly (50..58 deg) so every node's single nearest
        // neighbour is unambiguously its predecessor and edge_k = 1 yields the
        // chain 0-1-2-3-4-5; the 90-degree gap between the tips stays unlinked.
        let angles_deg: [f64; 6] = [0.0, 50.0, 102.0, 156.0, 212.0, 270.0];
        let pts: Vec<Point3> = angles_deg
            .iter()
            .map(|a| {
                let r = a.to_radians();
                Point3::new(r.cos(), r.sin(), 0.0)
            })
            .collect();
        let knn = knn_table(&pts, 6).unwrap();
        let geo = geodesic_table(&pts, &knn, 1);

        let around: f64 = pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        let tip_slot = knn[0].iter().position(|&j| j == 5).unwrap();
        let euclid = (pts[0] - pts[5]).norm();
        assert_abs_diff_eq!(geo[0][tip_slot], around, epsilon = 1e-12);
        assert!(geo[0][tip_slot] > 2.0 * euclid);
    }

    #[test]
    fn disconnected_clusters_hit_the_cap() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.3, 0.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(10.3, 0.0, 0.0),
            Point3::new(10.0, 0.3, 0.0),
            Point3::new(10.3, 0.3, 0.0),
        ];
        let knn = knn_table(&pts, 3).unwrap();
        // edge_k = 1 keeps each cluster internally chained with no cross edges.
        let geo = geodesic_table(&pts, &knn, 1);
        let cross_slot = knn[0].iter().position(|&j| j >= 2).unwrap();
        assert_abs_diff_eq!(geo[0][cross_slot], 3.0, epsilon = 1e-12); // 10 * 0.3
    }

    #[test]
    fn graph_builder_wires_everything_together() {
        let dense: Vec<Point3> = (0..40)
            .map(|i| Point3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0))
            .collect();
        let sps = vec![Point3::new(0.2, 0.15, 0.0), Point3::new(0.7, 0.15, 0.0)];
        let g = build_superpoint_graph(&dense, sps, 8, 4).unwrap();
        assert_eq!(g.slots(), 2); // k clamped to superpoint count
        assert_eq!(g.patch_of.len(), 40);
        let total: usize = (0..g.len()).map(|s| g.members_of(s).len()).sum();
        assert_eq!(total, 40);
        assert_eq!(g.geodesic[0][0], 0.0);
        assert_eq!(g.geodesic[1][0], 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn geodesic_at_least_euclidean_on_connected_clouds(
                pts in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 8..24),
            ) {
                let points: Vec<Point3> = pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
                let k = 5.min(points.len());
                let knn = knn_table(&points, k).unwrap();
                // Wide edge set => connected for these sizes; no caps in play.
                let geo = geodesic_table(&points, &knn, k.saturating_sub(1).max(1));
                for (i, slots) in knn.iter().enumerate() {
                    for (slot, &j) in slots.iter().enumerate() {
                        let euclid = (points[i] - points[j]).norm();
                        prop_assert!(geo[i][slot] >= euclid - 1e-12);
                    }
                }
            }

            #[test]
            fn downsample_never_increases_count(
                pts in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..60),
                voxel in 0.05..0.5f64,
            ) {
                let c = PointCloud::new(pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect());
                let out = voxel_downsample(&c, voxel).unwrap();
                prop_assert!(out.len() <= c.len());
                prop_assert!(out.len() >= 1);
            }
        }
    }
}
