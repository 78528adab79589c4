//! Procedural ground truth: random branching vessel trees plus rasterized
//! conditioning volumes.
//!
//! Trees grow voxel by voxel from a root on the x=0 face, biased inward. A
//! candidate voxel is accepted only when its single 26-adjacent neighbor in
//! the tree is the walker's previous voxel, so every insertion adds exactly
//! one vertex and one edge: the adjacency graph stays a tree (one component,
//! no cycles) by construction.

use crate::error::{Error, Result};
use crate::volume::{Centerline, DatasetCase, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpec {
    pub dims: [usize; 3],
    /// Maximum bifurcation depth.
    pub depth: usize,
    /// Probability that a finished segment forks into two children.
    pub branch_prob: f64,
    /// Segment length range in voxels, inclusive.
    pub segment_len: (usize, usize),
    /// Maximum per-step direction perturbation, radians.
    pub curl: f64,
    /// Tube radius for rasterization, voxels.
    pub tube_radius: f64,
    /// Intensity noise scale; draws are truncated at ±2σ so a 0.5 threshold
    /// always separates tube from background.
    pub noise_sigma: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec {
            dims: [32, 32, 32],
            depth: 3,
            branch_prob: 0.7,
            segment_len: (5, 9),
            curl: 0.25,
            tube_radius: 1.5,
            noise_sigma: 0.1,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Config(format!(
                "dims {:?} too small to trace a segment",
                self.dims
            )));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::Config(format!(
                "branch_prob must be in [0,1], got {}",
                self.branch_prob
            )));
        }
        if self.segment_len.0 > self.segment_len.1 {
            return Err(Error::Config(format!(
                "segment_len min {} > max {}",
                self.segment_len.0, self.segment_len.1
            )));
        }
        if self.segment_len.1 == 0 {
            return Err(Error::Config("segments would all be zero-length".into()));
        }
        if self.tube_radius < 0.0 || self.noise_sigma < 0.0 || self.curl < 0.0 {
            return Err(Error::Config(
                "tube_radius, noise_sigma, curl must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rodrigues rotation of `v` around unit `axis` by `angle`.
fn rotate(v: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let k = axis;
    let kv = cross(k, v);
    let kdv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    [
        v[0] * c + kv[0] * s + k[0] * kdv * (1.0 - c),
        v[1] * c + kv[1] * s + k[1] * kdv * (1.0 - c),
        v[2] * c + kv[2] * s + k[2] * kdv * (1.0 - c),
    ]
}

/// A unit vector perpendicular to `dir`, randomized over the normal plane.
fn random_perp(dir: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let r = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let p = cross(dir, r);
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 1e-6 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

fn voxel_of(pos: [f64; 3]) -> [i32; 3] {
    [
        pos[0].round() as i32,
        pos[1].round() as i32,
        pos[2].round() as i32,
    ]
}

fn in_bounds(p: [i32; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a])
}

fn neighbors_in_tree(tree: &BTreeSet<[i32; 3]>, p: [i32; 3]) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for dx in -1i32..=1 {
        for dy in -1i32..=1 {
            for dz in -1i32..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                if tree.contains(&q) {
                    out.push(q);
                }
            }
        }
    }
    out
}

struct Branch {
    pos: [f64; 3],
    dir: [f64; 3],
    prev: [i32; 3],
    depth_left: usize,
}

/// Grows a connected, loop-free voxel tree; deterministic per seed.
pub fn generate_tree(spec: &TreeSpec, seed: u64) -> Result<Centerline> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;

    let root = [
        0i32,
        rng.random_range(dims[1] as i32 / 4..(3 * dims[1] as i32) / 4),
        rng.random_range(dims[2] as i32 / 4..(3 * dims[2] as i32) / 4),
    ];
    let mut tree = BTreeSet::new();
    tree.insert(root);

    let dir0 = normalize([
        1.0,
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
    ]);
    let mut stack = vec![Branch {
        pos: [root[0] as f64, root[1] as f64, root[2] as f64],
        dir: dir0,
        prev: root,
        depth_left: spec.depth,
    }];

    while let Some(mut branch) = stack.pop() {
        let target_len = rng.random_range(spec.segment_len.0..=spec.segment_len.1);
        let mut added = 0usize;
        let mut attempts = 0usize;
        let max_attempts = target_len * 8 + 16;
        let mut alive = true;

        while added < target_len && attempts < max_attempts {
            attempts += 1;
            let axis = random_perp(branch.dir, &mut rng);
            let angle = rng.random_range(-spec.curl..=spec.curl);
            let dir = normalize(rotate(branch.dir, axis, angle));
            let pos = [
                branch.pos[0] + dir[0],
                branch.pos[1] + dir[1],
                branch.pos[2] + dir[2],
            ];
            let vox = voxel_of(pos);
            if !in_bounds(vox, dims) {
                continue;
            }
            if vox == branch.prev {
                // rounding did not advance; accept the move, no new voxel
                branch.pos = pos;
                branch.dir = dir;
                continue;
            }
            if tree.contains(&vox) {
                continue;
            }
            let nbrs = neighbors_in_tree(&tree, vox);
            if nbrs.len() != 1 || nbrs[0] != branch.prev {
                continue;
            }
            tree.insert(vox);
            branch.pos = pos;
            branch.dir = dir;
            branch.prev = vox;
            added += 1;
        }
        if added == 0 {
            alive = false;
        }

        if alive && branch.depth_left > 0 && rng.random_range(0.0..1.0) < spec.branch_prob {
            let axis = random_perp(branch.dir, &mut rng);
            let split = rng.random_range(0.35..0.8);
            for sign in [1.0, -1.0] {
                stack.push(Branch {
                    pos: branch.pos,
                    dir: normalize(rotate(branch.dir, axis, sign * split)),
                    prev: branch.prev,
                    depth_left: branch.depth_left - 1,
                });
            }
        }
    }

    Ok(Centerline::from_points(tree))
}

/// Paints intensity 1 within `tube_radius` of the tree, 0 elsewhere, adds
/// truncated Gaussian noise, and clamps to [−0.5, 1.5].
pub fn rasterize(tree: &Centerline, spec: &TreeSpec, seed: u64) -> Result<Volume> {
    spec.validate()?;
    let dims = spec.dims;
    tree.validate_in(dims)?;
    let n = dims[0] * dims[1] * dims[2];
    let mut values = vec![0.0f64; n];

    let r = spec.tube_radius.floor() as i32;
    let r2 = spec.tube_radius * spec.tube_radius;
    for &p in tree.iter() {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if ((dx * dx + dy * dy + dz * dz) as f64) > r2 {
                        continue;
                    }
                    let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                    if in_bounds(q, dims) {
                        let idx =
                            q[0] as usize + dims[0] * (q[1] as usize + dims[1] * q[2] as usize);
                        values[idx] = 1.0;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = 2.0 * spec.noise_sigma;
        for v in values.iter_mut() {
            let draw: f64 = StandardNormal.sample(&mut rng);
            let noise = (draw * spec.noise_sigma).clamp(-cap, cap);
            *v = (*v + noise).clamp(-0.5, 1.5);
        }
    }

    Volume::new(dims, values.into_iter().map(|v| v as f32).collect())
}

/// Generates `n` cases with seeds `seed..seed+n`. Trees that overflow
/// `max_len` points are regrown with segments shortened by 3/4 per retry,
/// up to 10 retries.
pub fn make_dataset(n: usize, spec: &TreeSpec, max_len: usize, seed: u64) -> Result<Vec<DatasetCase>> {
    if n == 0 {
        return Err(Error::Input("dataset needs n >= 1".into()));
    }
    spec.validate()?;
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let case_seed = seed + i as u64;
        let mut attempt_spec = spec.clone();
        let mut tree = None;
        for _retry in 0..=10 {
            let t = generate_tree(&attempt_spec, case_seed)?;
            if t.len() <= max_len {
                tree = Some(t);
                break;
            }
            attempt_spec.segment_len = (
                (attempt_spec.segment_len.0 * 3 / 4).max(1),
                (attempt_spec.segment_len.1 * 3 / 4).max(1),
            );
        }
        let tree = tree.ok_or_else(|| {
            Error::Input(format!(
                "case {i}: tree exceeds {max_len} points after 10 retries; raise max_len"
            ))
        })?;
        let volume = rasterize(&tree, spec, case_seed)?;
        cases.push(DatasetCase::new(format!("case_{i:03}"), volume, tree)?);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{betti_numbers, Connectivity};

    #[test]
    fn plain_polyline_when_no_branching() {
        let spec = TreeSpec {
            depth: 0,
            branch_prob: 0.0,
            ..TreeSpec::default()
        };
        let tree = generate_tree(&spec, 11).unwrap();
        assert!(tree.len() >= 2);
        let b = betti_numbers(&tree, Connectivity::TwentySix);
        assert_eq!((b.betti0, b.betti1), (1, 0));
    }

    #[test]
    fn trees_are_connected_and_loop_free_across_seeds() {
        let spec = TreeSpec::default();
        for seed in 0..100 {
            let tree = generate_tree(&spec, seed).unwrap();
            let b = betti_numbers(&tree, Connectivity::TwentySix);
            assert_eq!((b.betti0, b.betti1), (1, 0), "seed {seed}");
            tree.validate_in(spec.dims).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TreeSpec::default();
        assert_eq!(
            generate_tree(&spec, 123).unwrap(),
            generate_tree(&spec, 123).unwrap()
        );
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = TreeSpec {
            segment_len: (0, 0),
            ..TreeSpec::default()
        };
        assert!(generate_tree(&spec, 0).is_err());
    }

    #[test]
    fn zero_radius_zero_noise_marks_exactly_the_tree() {
        let spec = TreeSpec {
            tube_radius: 0.0,
            noise_sigma: 0.0,
            ..TreeSpec::default()
        };
        let tree = generate_tree(&spec, 5).unwrap();
        let vol = rasterize(&tree, &spec, 5).unwrap();
        let dims = spec.dims;
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let expect = tree.contains(&[x as i32, y as i32, z as i32]);
                    assert_eq!(vol.get(x, y, z) == 1.0, expect);
                }
            }
        }
    }

    #[test]
    fn centerline_voxels_are_foreground_under_noise() {
        let spec = TreeSpec::default(); // sigma 0.1
        for seed in [1u64, 2, 3] {
            let tree = generate_tree(&spec, seed).unwrap();
            let vol = rasterize(&tree, &spec, seed).unwrap();
            for &p in tree.iter() {
                let v = vol.get(p[0] as usize, p[1] as usize, p[2] as usize);
                assert!(v > 0.5, "seed {seed} voxel {p:?} value {v}");
            }
        }
    }

    #[test]
    fn foreground_background_intensities_separate() {
        let spec = TreeSpec::default();
        let tree = generate_tree(&spec, 9).unwrap();
        let vol = rasterize(&tree, &spec, 9).unwrap();
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        let dims = spec.dims;
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let v = vol.get(x, y, z) as f64;
                    if tree.contains(&[x as i32, y as i32, z as i32]) {
                        fg.push(v);
                    } else {
                        bg.push(v);
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&fg) - mean(&bg) > 0.5);
    }

    #[test]
    fn dataset_respects_capacity_and_distinctness() {
        let spec = TreeSpec::default();
        let cases = make_dataset(30, &spec, 64, 100).unwrap();
        assert_eq!(cases.len(), 30);
        for c in &cases {
            assert!(c.centerline.len() <= 64, "{} too large", c.id);
        }
        for i in 0..cases.len() {
            for j in i + 1..cases.len() {
                assert_ne!(
                    cases[i].centerline, cases[j].centerline,
                    "cases {i} and {j} identical"
                );
            }
        }
    }

    #[test]
    fn single_case_dataset_and_determinism() {
        let spec = TreeSpec::default();
        let one = make_dataset(1, &spec, 64, 0).unwrap();
        assert_eq!(one.len(), 1);
        let again = make_dataset(1, &spec, 64, 0).unwrap();
        assert_eq!(one[0].centerline, again[0].centerline);
        assert_eq!(one[0].volume, again[0].volume);
    }

    #[test]
    fn tight_capacity_forces_retries_or_errors() {
        let spec = TreeSpec::default();
        // max_len 1 can never hold a tree with at least one segment
        assert!(make_dataset(1, &spec, 1, 0).is_err());
    }
}
