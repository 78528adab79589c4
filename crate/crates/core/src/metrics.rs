//! Coordinate-accuracy metrics (precision/recall/F1 at a distance radius) and
//! topological plausibility metrics (Betti-0 components, Betti-1 loops).
//!
//! Matching is directional: precision asks whether each predicted point has a
//! ground-truth point within Euclidean distance R (inclusive), recall asks the
//! opposite direction. Topology is read off the voxel adjacency graph:
//! Betti-0 is its component count, Betti-1 its cycle rank E − V + C.

use crate::error::{Error, Result};
use crate::volume::Centerline;
use std::collections::{BTreeMap, HashSet};

/// Voxel adjacency used for the topology metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Chebyshev distance 1 (faces, edges, corners); standard for thin
    /// 3D skeletons.
    TwentySix,
}

impl std::str::FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!(
                "connectivity must be 6 or 26, got `{other}`"
            ))),
        }
    }
}

impl Connectivity {
    /// Half of the neighbor offsets (lexicographically positive), so each
    /// undirected edge is visited once.
    fn half_offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                for dz in -1i32..=1 {
                    if (dx, dy, dz) <= (0, 0, 0) {
                        continue;
                    }
                    if self == Connectivity::Six && dx.abs() + dy.abs() + dz.abs() != 1 {
                        continue;
                    }
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }
}

/// Directional matching counts at one radius.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub radius: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp_pred: usize,
    pub fp: usize,
    pub tp_gt: usize,
    pub fn_: usize,
    /// Set when the prediction (resp. ground truth) was empty, making
    /// precision (resp. recall) undefined and reported as 0.
    pub degenerate_pred: bool,
    pub degenerate_gt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BettiReport {
    pub betti0: usize,
    pub betti1: usize,
}

/// Integer offsets with squared norm ≤ R²; membership tests against this ball
/// are exact for voxel coordinates.
fn ball_offsets(radius: f64) -> Vec<[i32; 3]> {
    let r = radius.floor() as i32;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                if d2 <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn count_matched(from: &Centerline, to: &Centerline, offsets: &[[i32; 3]]) -> usize {
    let lookup: HashSet<[i32; 3]> = to.iter().copied().collect();
    from.iter()
        .filter(|p| {
            offsets.iter().any(|o| {
                lookup.contains(&[
                    p[0].wrapping_add(o[0]),
                    p[1].wrapping_add(o[1]),
                    p[2].wrapping_add(o[2]),
                ])
            })
        })
        .count()
}

pub fn precision_recall(pred: &Centerline, gt: &Centerline, radius: f64) -> Result<MatchReport> {
    if !(radius >= 0.0) {
        return Err(Error::Input(format!("radius must be >= 0, got {radius}")));
    }
    let offsets = ball_offsets(radius);

    let tp_pred = count_matched(pred, gt, &offsets);
    let fp = pred.len() - tp_pred;
    let tp_gt = count_matched(gt, pred, &offsets);
    let fn_ = gt.len() - tp_gt;

    let degenerate_pred = pred.is_empty();
    let degenerate_gt = gt.is_empty();
    let precision = if degenerate_pred {
        0.0
    } else {
        tp_pred as f64 / pred.len() as f64
    };
    let recall = if degenerate_gt {
        0.0
    } else {
        tp_gt as f64 / gt.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    Ok(MatchReport {
        radius,
        precision,
        recall,
        f1,
        tp_pred,
        fp,
        tp_gt,
        fn_,
        degenerate_pred,
        degenerate_gt,
    })
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Counts components and independent cycles of the voxel adjacency graph.
pub fn betti_numbers(points: &Centerline, conn: Connectivity) -> BettiReport {
    if points.is_empty() {
        return BettiReport {
            betti0: 0,
            betti1: 0,
        };
    }
    let index: BTreeMap<[i32; 3], usize> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let mut uf = UnionFind::new(points.len());
    let mut edges = 0usize;
    for (&p, &i) in &index {
        for o in conn.half_offsets() {
            let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
            if let Some(&j) = index.get(&q) {
                edges += 1;
                uf.union(i, j);
            }
        }
    }
    let mut roots = HashSet::new();
    for i in 0..points.len() {
        roots.insert(uf.find(i));
    }
    let betti0 = roots.len();
    let betti1 = edges + betti0 - points.len();
    BettiReport { betti0, betti1 }
}

/// Per-radius matching plus topology of the prediction.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub case_id: String,
    pub matches: Vec<MatchReport>,
    pub betti: BettiReport,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &Centerline,
    gt: &Centerline,
    radii: &[f64],
    conn: Connectivity,
) -> Result<CaseReport> {
    if radii.is_empty() {
        return Err(Error::Input("radii list must be non-empty".into()));
    }
    let matches = radii
        .iter()
        .map(|&r| precision_recall(pred, gt, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseReport {
        case_id: case_id.to_string(),
        matches,
        betti: betti_numbers(pred, conn),
    })
}

pub const CSV_HEADER: &str = "case_id,R,precision,recall,f1,betti0,betti1";

impl CaseReport {
    /// One CSV row per radius, matching [`CSV_HEADER`].
    pub fn csv_rows(&self) -> Vec<String> {
        self.matches
            .iter()
            .map(|m| {
                format!(
                    "{},{},{:.6},{:.6},{:.6},{},{}",
                    self.case_id,
                    m.radius,
                    m.precision,
                    m.recall,
                    m.f1,
                    self.betti.betti0,
                    self.betti.betti1
                )
            })
            .collect()
    }
}

/// Column means over every per-case row, emitted as the final CSV row.
pub fn mean_csv_row(reports: &[CaseReport]) -> String {
    let mut n = 0usize;
    let (mut p, mut r, mut f1, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for rep in reports {
        for m in &rep.matches {
            n += 1;
            p += m.precision;
            r += m.recall;
            f1 += m.f1;
            b0 += rep.betti.betti0 as f64;
            b1 += rep.betti.betti1 as f64;
        }
    }
    let n = n.max(1) as f64;
    format!(
        "mean,all,{:.6},{:.6},{:.6},{:.6},{:.6}",
        p / n,
        r / n,
        f1 / n,
        b0 / n,
        b1 / n
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: [i32; 3], b: [i32; 3]) -> f64 {
        let d2: i64 = (0..3).map(|i| ((a[i] - b[i]) as i64).pow(2)).sum();
        (d2 as f64).sqrt()
    }

    /// O(|pred|·|gt|) reference used to pin the indexed implementation.
    fn brute_force(pred: &Centerline, gt: &Centerline, radius: f64) -> (usize, usize) {
        let tp_pred = pred
            .iter()
            .filter(|&&p| gt.iter().any(|&g| dist(p, g) <= radius))
            .count();
        let tp_gt = gt
            .iter()
            .filter(|&&g| pred.iter().any(|&p| dist(p, g) <= radius))
            .count();
        (tp_pred, tp_gt)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, extent: i32) -> Centerline {
        Centerline::from_points((0..n).map(|_| {
            [
                rng.random_range(0..extent),
                rng.random_range(0..extent),
                rng.random_range(0..extent),
            ]
        }))
    }

    #[test]
    fn identity_gives_perfect_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_set(&mut rng, 50, 20);
        for radius in [0.0, 1.0, 2.5] {
            let m = precision_recall(&c, &c, radius).unwrap();
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn boundary_distance_is_inclusive() {
        let pred = Centerline::from_points([[0, 0, 0]]);
        let gt = Centerline::from_points([[0, 0, 1]]);
        let m = precision_recall(&pred, &gt, 1.0).unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 1.0));
        let m = precision_recall(&pred, &gt, 0.5).unwrap();
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
    }

    #[test]
    fn empty_sets_flagged_degenerate() {
        let c = Centerline::from_points([[1, 1, 1]]);
        let empty = Centerline::new();

        let m = precision_recall(&empty, &c, 1.0).unwrap();
        assert!(m.degenerate_pred && !m.degenerate_gt);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.fn_, 1);

        let m = precision_recall(&c, &empty, 1.0).unwrap();
        assert!(m.degenerate_gt);
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
        assert_eq!(m.fp, 1);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..40 {
            let (n_pred, n_gt) = (rng.random_range(0..200), rng.random_range(0..200));
            let pred = random_set(&mut rng, n_pred, 24);
            let gt = random_set(&mut rng, n_gt, 24);
            for radius in [1.0, 2.0, 3.0] {
                let m = precision_recall(&pred, &gt, radius).unwrap();
                let (tp_pred, tp_gt) = brute_force(&pred, &gt, radius);
                assert_eq!(m.tp_pred, tp_pred, "trial {trial} R={radius}");
                assert_eq!(m.tp_gt, tp_gt, "trial {trial} R={radius}");
            }
        }
    }

    #[test]
    fn straight_line_and_two_lines() {
        let line = Centerline::from_points((0..10).map(|x| [x, 0, 0]));
        let b = betti_numbers(&line, Connectivity::TwentySix);
        assert_eq!((b.betti0, b.betti1), (1, 0));

        let two = Centerline::from_points(
            (0..10)
                .map(|x| [x, 0, 0])
                .chain((0..10).map(|x| [x, 5, 5])),
        );
        let b = betti_numbers(&two, Connectivity::TwentySix);
        assert_eq!((b.betti0, b.betti1), (2, 0));
    }

    #[test]
    fn hollow_square_ring_has_a_loop() {
        // 4×4 perimeter in one z-plane; b1 must equal E − V + 1 of its
        // 26-adjacency graph, counted here by an explicit double loop.
        let ring = Centerline::from_points(
            (0..4)
                .flat_map(|i| [[i, 0, 0], [i, 3, 0], [0, i, 0], [3, i, 0]])
                .collect::<Vec<_>>(),
        );
        assert_eq!(ring.len(), 12);
        let pts: Vec<[i32; 3]> = ring.iter().copied().collect();
        let mut edges = 0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let cheb = (0..3)
                    .map(|a| (pts[i][a] - pts[j][a]).abs())
                    .max()
                    .unwrap();
                if cheb == 1 {
                    edges += 1;
                }
            }
        }
        let b = betti_numbers(&ring, Connectivity::TwentySix);
        assert_eq!(b.betti0, 1);
        assert!(b.betti1 >= 1);
        assert_eq!(b.betti1, edges + 1 - ring.len());
    }

    #[test]
    fn empty_set_has_zero_betti() {
        let b = betti_numbers(&Centerline::new(), Connectivity::TwentySix);
        assert_eq!((b.betti0, b.betti1), (0, 0));
    }

    #[test]
    fn isolated_voxel_increments_betti0_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_set(&mut rng, 60, 16);
        let before = betti_numbers(&c, Connectivity::TwentySix);
        let mut with_far = c.clone();
        with_far.insert([100, 100, 100]);
        let after = betti_numbers(&with_far, Connectivity::TwentySix);
        assert_eq!(after.betti0, before.betti0 + 1);
        assert_eq!(after.betti1, before.betti1);
    }

    #[test]
    fn six_connectivity_sees_diagonals_as_disconnected() {
        let diag = Centerline::from_points([[0, 0, 0], [1, 1, 1]]);
        assert_eq!(betti_numbers(&diag, Connectivity::Six).betti0, 2);
        assert_eq!(betti_numbers(&diag, Connectivity::TwentySix).betti0, 1);
    }

    #[test]
    fn evaluate_case_rows_and_monotone_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = random_set(&mut rng, 80, 16);
        let gt = random_set(&mut rng, 80, 16);
        let rep =
            evaluate_case("c0", &pred, &gt, &[1.0, 2.0, 3.0], Connectivity::TwentySix).unwrap();
        assert_eq!(rep.csv_rows().len(), 3);
        assert!(rep.matches[2].f1 >= rep.matches[0].f1);
        assert!(evaluate_case("c0", &pred, &gt, &[], Connectivity::TwentySix).is_err());
    }

    proptest! {
        #[test]
        fn prop_swap_symmetry_and_radius_monotonicity(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n_a, n_b) = (rng.random_range(0..60), rng.random_range(0..60));
            let a = random_set(&mut rng, n_a, 12);
            let b = random_set(&mut rng, n_b, 12);

            let fwd = precision_recall(&a, &b, 2.0).unwrap();
            let rev = precision_recall(&b, &a, 2.0).unwrap();
            prop_assert_eq!(fwd.precision, rev.recall);
            prop_assert_eq!(fwd.recall, rev.precision);

            let small = precision_recall(&a, &b, 1.0).unwrap();
            let large = precision_recall(&a, &b, 3.0).unwrap();
            prop_assert!(large.precision >= small.precision);
            prop_assert!(large.recall >= small.recall);
        }

        #[test]
        fn prop_betti_identity(seed in 0u64..300) {
            // b1 = E − V + b0 on the constructed graph, E counted brute force.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..50);
            let c = random_set(&mut rng, n, 8);
            let pts: Vec<[i32;3]> = c.iter().copied().collect();
            let mut edges = 0usize;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let cheb = (0..3).map(|a| (pts[i][a] - pts[j][a]).abs()).max().unwrap();
                    if cheb == 1 { edges += 1; }
                }
            }
            let b = betti_numbers(&c, Connectivity::TwentySix);
            prop_assert_eq!(b.betti1 as i64, edges as i64 - pts.len() as i64 + b.betti0 as i64);
        }
    }
}
