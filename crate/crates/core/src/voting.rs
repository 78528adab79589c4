//! Voxel-wise voting over independently sampled centerlines.
//!
//! K decoded samples vote per voxel (set membership, one vote per sample);
//! thresholding at τ keeps voxels with at least τ votes. The automatic
//! threshold picks the τ whose output size is closest to the mean sample
//! size, ties broken toward the smaller (more inclusive) τ.

use crate::codec::{decode_matrix, CodecConfig};
use crate::diffusion::{sample, Denoiser, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::volume::{Centerline, Volume};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Per-voxel vote counts; voxels with zero votes are absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteGrid {
    dims: [usize; 3],
    counts: BTreeMap<[i32; 3], usize>,
    k: usize,
}

impl VoteGrid {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, p: &[i32; 3]) -> usize {
        self.counts.get(p).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i32; 3], &usize)> {
        self.counts.iter()
    }

    /// Text dump, one `x y z count` line per voted voxel in lexicographic
    /// order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (p, c) in &self.counts {
            out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], c));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VotingConfig {
    /// Number of independent samples to aggregate.
    pub k: usize,
    /// Fixed threshold; `None` selects it automatically.
    pub tau: Option<usize>,
    /// Sample j draws its initial noise from seed `seed_base + j`.
    pub seed_base: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteResult {
    pub aggregated: Centerline,
    pub tau_used: usize,
    pub per_sample_sizes: Vec<usize>,
}

/// Counts, per voxel, how many of the K samples contain it.
pub fn vote(samples: &[Centerline], dims: [usize; 3]) -> Result<VoteGrid> {
    if samples.is_empty() {
        return Err(Error::Input("vote needs at least one sample".into()));
    }
    let mut counts = BTreeMap::new();
    for (idx, s) in samples.iter().enumerate() {
        s.validate_in(dims)
            .map_err(|_| Error::Input(format!("sample {idx} has points outside {dims:?}")))?;
        for &p in s.iter() {
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    Ok(VoteGrid {
        dims,
        counts,
        k: samples.len(),
    })
}

/// Voxels with at least `tau` votes.
pub fn threshold_votes(grid: &VoteGrid, tau: usize) -> Result<Centerline> {
    if tau == 0 || tau > grid.k {
        return Err(Error::Input(format!(
            "tau must be in 1..={}, got {tau}",
            grid.k
        )));
    }
    Ok(Centerline::from_points(
        grid.counts
            .iter()
            .filter(|(_, &c)| c >= tau)
            .map(|(&p, _)| p),
    ))
}

/// Threshold whose output size best matches the mean per-sample size;
/// ties go to the smallest τ.
pub fn auto_tau(grid: &VoteGrid, sizes: &[usize]) -> usize {
    assert_eq!(sizes.len(), grid.k, "one size per aggregated sample");
    let mean = sizes.iter().sum::<usize>() as f64 / grid.k as f64;

    // |vote^τ| for all τ at once: histogram of counts, then suffix sums.
    let mut hist = vec![0usize; grid.k + 1];
    for &c in grid.counts.values() {
        hist[c] += 1;
    }
    let mut size_at_tau = vec![0usize; grid.k + 2];
    for tau in (1..=grid.k).rev() {
        size_at_tau[tau] = size_at_tau[tau + 1] + hist[tau];
    }

    let mut best = (f64::INFINITY, 1usize);
    for tau in 1..=grid.k {
        let obj = (mean - size_at_tau[tau] as f64).abs();
        if obj < best.0 {
            best = (obj, tau);
        }
    }
    best.1
}

/// Full aggregation: sample K centerlines with consecutive seeds, vote,
/// choose τ, threshold. Deterministic given the seeds; the K runs execute in
/// parallel and are reduced in seed order.
pub fn aggregate(
    denoiser: &dyn Denoiser,
    volume: &Volume,
    voting: &VotingConfig,
    t_prime: usize,
    sched: &NoiseSchedule,
    codec_cfg: &CodecConfig,
) -> Result<VoteResult> {
    if voting.k == 0 {
        return Err(Error::Config("voting needs K >= 1".into()));
    }
    if let Some(tau) = voting.tau {
        if tau == 0 || tau > voting.k {
            return Err(Error::Config(format!(
                "fixed tau {tau} outside 1..={}",
                voting.k
            )));
        }
    }
    let dims = volume.dims();
    let shape = (codec_cfg.max_len, codec_cfg.width());

    let samples: Vec<Centerline> = (0..voting.k)
        .into_par_iter()
        .map(|j| {
            let cfg = SamplerConfig {
                t_prime,
                seed: voting.seed_base + j as u64,
            };
            let m = sample(denoiser, volume, shape, sched, &cfg)?;
            Ok(decode_matrix(&m, dims, codec_cfg))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_sample_sizes: Vec<usize> = samples.iter().map(Centerline::len).collect();
    let grid = vote(&samples, dims)?;
    let tau_used = voting.tau.unwrap_or_else(|| auto_tau(&grid, &per_sample_sizes));
    let aggregated = threshold_votes(&grid, tau_used)?;
    Ok(VoteResult {
        aggregated,
        tau_used,
        per_sample_sizes,
    })
}
