//! Trainable conditional set denoiser with hand-written reverse-mode
//! gradients.
//!
//! Architecture: the volume is average-pooled to a fixed grid of cells. A
//! global conditioning vector (one affine layer over the flattened pooled
//! grid) and a projected sinusoidal timestep embedding are added to every
//! row of the per-row affine embedding of the noisy matrix. Each row then
//! performs a cross-attention readout over the pooled cells, whose tokens
//! carry the cell occupancy plus the cell's binary position code, so a row
//! can align its noisy coordinate bits with a concrete cell and copy a sharp
//! pattern back out. One multi-head self-attention block over rows (the only
//! cross-row interaction, keeping the map permutation-equivariant)
//! coordinates the set, and a two-layer feed-forward head maps back to the
//! row channels. Everything is f64 and deliberately loop-based; the backward
//! pass mirrors the forward exactly.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use train::{train, EpochStats, TrainConfig, TrainOutcome};

use crate::diffusion::{forward_noise, randn, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mat::{linear, linear_backward, matmul, matmul_nt, matmul_tn, Mat};
use crate::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Row channel count of the matrices being denoised.
    pub d: usize,
    /// Width of the embedding, conditioning, and attention streams.
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ff: usize,
    /// The volume is average-pooled to pool³ features.
    pub pool: usize,
    /// Expected conditioning volume size.
    pub vol_dims: [usize; 3],
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return Err(Error::Config("model dims must all be >= 1".into()));
        }
        if self.pool < 2 || !self.pool.is_power_of_two() {
            return Err(Error::Config(format!(
                "pool must be a power of two >= 2 (cells carry a binary position code), got {}",
                self.pool
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden must be even for the sinusoidal embedding, got {}",
                self.hidden
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if self.vol_dims.iter().any(|&v| v == 0) {
            return Err(Error::Config("vol_dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn pooled_len(&self) -> usize {
        self.pool * self.pool * self.pool
    }

    /// Width of one cell token: occupancy plus 3·log2(pool) position bits.
    pub fn token_width(&self) -> usize {
        1 + 3 * self.pool.trailing_zeros() as usize
    }
}

/// All weight arrays; also reused as the gradient / optimizer-moment shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub vol_w: Mat,
    pub vol_b: Vec<f64>,
    pub time_w: Mat,
    pub time_b: Vec<f64>,
    pub in_w: Mat,
    pub in_b: Vec<f64>,
    pub tok_w: Mat,
    pub tok_b: Vec<f64>,
    pub cq_w: Mat,
    pub cq_b: Vec<f64>,
    pub cv_w: Mat,
    pub cv_b: Vec<f64>,
    pub co_w: Mat,
    pub co_b: Vec<f64>,
    pub q_w: Mat,
    pub q_b: Vec<f64>,
    pub k_w: Mat,
    pub k_b: Vec<f64>,
    pub v_w: Mat,
    pub v_b: Vec<f64>,
    pub o_w: Mat,
    pub o_b: Vec<f64>,
    pub ff1_w: Mat,
    pub ff1_b: Vec<f64>,
    pub ff2_w: Mat,
    pub ff2_b: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        ParamSet {
            vol_w: Mat::zeros(h, cfg.pooled_len()),
            vol_b: vec![0.0; h],
            time_w: Mat::zeros(h, h),
            time_b: vec![0.0; h],
            in_w: Mat::zeros(h, cfg.d),
            in_b: vec![0.0; h],
            tok_w: Mat::zeros(h, cfg.token_width()),
            tok_b: vec![0.0; h],
            cq_w: Mat::zeros(h, h),
            cq_b: vec![0.0; h],
            cv_w: Mat::zeros(h, h),
            cv_b: vec![0.0; h],
            co_w: Mat::zeros(h, h),
            co_b: vec![0.0; h],
            q_w: Mat::zeros(h, h),
            q_b: vec![0.0; h],
            k_w: Mat::zeros(h, h),
            k_b: vec![0.0; h],
            v_w: Mat::zeros(h, h),
            v_b: vec![0.0; h],
            o_w: Mat::zeros(h, h),
            o_b: vec![0.0; h],
            ff1_w: Mat::zeros(cfg.ff, h),
            ff1_b: vec![0.0; cfg.ff],
            ff2_w: Mat::zeros(cfg.d, cfg.ff),
            ff2_b: vec![0.0; cfg.d],
        }
    }

    /// Named views in a fixed order, shared by the checkpoint format, the
    /// optimizer, and the finite-difference checker.
    pub fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("vol_w", self.vol_w.as_slice()),
            ("vol_b", &self.vol_b),
            ("time_w", self.time_w.as_slice()),
            ("time_b", &self.time_b),
            ("in_w", self.in_w.as_slice()),
            ("in_b", &self.in_b),
            ("tok_w", self.tok_w.as_slice()),
            ("tok_b", &self.tok_b),
            ("cq_w", self.cq_w.as_slice()),
            ("cq_b", &self.cq_b),
            ("cv_w", self.cv_w.as_slice()),
            ("cv_b", &self.cv_b),
            ("co_w", self.co_w.as_slice()),
            ("co_b", &self.co_b),
            ("q_w", self.q_w.as_slice()),
            ("q_b", &self.q_b),
            ("k_w", self.k_w.as_slice()),
            ("k_b", &self.k_b),
            ("v_w", self.v_w.as_slice()),
            ("v_b", &self.v_b),
            ("o_w", self.o_w.as_slice()),
            ("o_b", &self.o_b),
            ("ff1_w", self.ff1_w.as_slice()),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", self.ff2_w.as_slice()),
            ("ff2_b", &self.ff2_b),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("vol_w", self.vol_w.as_mut_slice()),
            ("vol_b", &mut self.vol_b),
            ("time_w", self.time_w.as_mut_slice()),
            ("time_b", &mut self.time_b),
            ("in_w", self.in_w.as_mut_slice()),
            ("in_b", &mut self.in_b),
            ("tok_w", self.tok_w.as_mut_slice()),
            ("tok_b", &mut self.tok_b),
            ("cq_w", self.cq_w.as_mut_slice()),
            ("cq_b", &mut self.cq_b),
            ("cv_w", self.cv_w.as_mut_slice()),
            ("cv_b", &mut self.cv_b),
            ("co_w", self.co_w.as_mut_slice()),
            ("co_b", &mut self.co_b),
            ("q_w", self.q_w.as_mut_slice()),
            ("q_b", &mut self.q_b),
            ("k_w", self.k_w.as_mut_slice()),
            ("k_b", &mut self.k_b),
            ("v_w", self.v_w.as_mut_slice()),
            ("v_b", &mut self.v_b),
            ("o_w", self.o_w.as_mut_slice()),
            ("o_b", &mut self.o_b),
            ("ff1_w", self.ff1_w.as_mut_slice()),
            ("ff1_b", &mut self.ff1_b),
            ("ff2_w", self.ff2_w.as_mut_slice()),
            ("ff2_b", &mut self.ff2_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    fn accumulate(&mut self, other: &ParamSet) {
        for ((_, dst), (_, src)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub cfg: ModelConfig,
    pub init_seed: u64,
    pub p: ParamSet,
}

impl DenoiserParams {
    /// Scaled uniform fan-in initialization, biases zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamSet::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = |name: &str| -> usize {
            match name {
                "vol_w" => cfg.pooled_len(),
                "time_w" | "q_w" | "k_w" | "v_w" | "o_w" | "cq_w" | "cv_w" | "co_w" => cfg.hidden,
                "in_w" => cfg.d,
                "tok_w" => cfg.token_width(),
                "ff1_w" => cfg.hidden,
                "ff2_w" => cfg.ff,
                _ => 0, // biases stay zero
            }
        };
        for (name, arr) in p.arrays_mut() {
            let f = fan_in(name);
            if f == 0 {
                continue;
            }
            let bound = (1.0 / f as f64).sqrt();
            for v in arr.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(DenoiserParams {
            cfg,
            init_seed: seed,
            p,
        })
    }

    pub fn zeroed(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(DenoiserParams {
            cfg,
            init_seed: seed,
            p: ParamSet::zeros(&cfg),
        })
    }

    pub fn param_count(&self) -> usize {
        self.p.param_count()
    }

    /// Volume encoder: bucketed average pooling to the fixed cell grid. The
    /// learned projections over this vector live inside [`Self::denoise`].
    pub fn encode_volume(&self, v: &Volume) -> Result<Vec<f64>> {
        if v.dims() != self.cfg.vol_dims {
            return Err(Error::Shape {
                expected: format!("volume dims {:?}", self.cfg.vol_dims),
                got: format!("{:?}", v.dims()),
            });
        }
        Ok(pool_volume(v, self.cfg.pool))
    }

    /// Cell tokens: occupancy plus the ±1 binary position code of each cell.
    fn cell_features(&self, pooled: &[f64]) -> Mat {
        let p = self.cfg.pool;
        let bits = p.trailing_zeros() as usize;
        let width = self.cfg.token_width();
        let mut t0 = Mat::zeros(pooled.len(), width);
        for (c, &occ) in pooled.iter().enumerate() {
            let (cx, cy, cz) = (c % p, (c / p) % p, c / (p * p));
            let row = t0.row_mut(c);
            row[0] = occ;
            for (axis, g) in [cx, cy, cz].into_iter().enumerate() {
                for b in 0..bits {
                    let bit = (g >> (bits - 1 - b)) & 1;
                    row[1 + axis * bits + b] = if bit == 1 { 1.0 } else { -1.0 };
                }
            }
        }
        t0
    }

    /// Predicts the clean matrix from a noisy one given the pooled
    /// conditioning features from [`Self::encode_volume`].
    pub fn denoise(&self, v_t: &Mat, cond: &[f64], t: usize) -> Result<Mat> {
        if v_t.cols() != self.cfg.d {
            return Err(Error::Shape {
                expected: format!("{} channels", self.cfg.d),
                got: format!("{}", v_t.cols()),
            });
        }
        if cond.len() != self.cfg.pooled_len() {
            return Err(Error::Shape {
                expected: format!("conditioning length {}", self.cfg.pooled_len()),
                got: format!("{}", cond.len()),
            });
        }
        if !v_t.is_finite() {
            return Err(Error::Input("denoise input contains non-finite values".into()));
        }
        let (y, _) = self.forward(v_t, cond, t);
        Ok(y)
    }

    /// Forward pass returning the activations the backward pass needs.
    fn forward(&self, v_t: &Mat, pooled: &[f64], t: usize) -> (Mat, Cache) {
        let cfg = &self.cfg;
        let p = &self.p;
        let rows = v_t.rows();
        let h = cfg.hidden;

        let pooled_mat = Mat::from_vec(1, pooled.len(), pooled.to_vec());
        let cond = linear(&pooled_mat, &p.vol_w, &p.vol_b);
        let sin_emb = embed_timestep(t, h);
        let sin_mat = Mat::from_vec(1, h, sin_emb.clone());
        let temb = linear(&sin_mat, &p.time_w, &p.time_b);

        let mut ctx = vec![0.0; h];
        for i in 0..h {
            ctx[i] = cond.get(0, i) + temb.get(0, i);
        }

        let mut x1 = linear(v_t, &p.in_w, &p.in_b);
        for r in 0..rows {
            let row = x1.row_mut(r);
            for i in 0..h {
                row[i] += ctx[i];
            }
        }

        // cross-attention readout: rows query the pooled volume cells
        let t0 = self.cell_features(pooled);
        let tok = linear(&t0, &p.tok_w, &p.tok_b);
        let qc = linear(&x1, &p.cq_w, &p.cq_b);
        let cross_scale = 1.0 / (h as f64).sqrt();
        let mut cs = matmul_nt(&qc, &tok);
        for s in cs.as_mut_slice() {
            *s *= cross_scale;
        }
        let ca = softmax_rows(&cs);
        let vt_tok = linear(&tok, &p.cv_w, &p.cv_b);
        let readout = matmul(&ca, &vt_tok);
        let cross_out = linear(&readout, &p.co_w, &p.co_b);
        let mut x1b = x1.clone();
        x1b.add_assign(&cross_out);

        let q = linear(&x1b, &p.q_w, &p.q_b);
        let k = linear(&x1b, &p.k_w, &p.k_b);
        let v = linear(&x1b, &p.v_w, &p.v_b);

        let dh = h / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o_concat = Mat::zeros(rows, h);
        let mut attn_weights = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let c0 = head * dh;
            let qh = q.col_block(c0, dh);
            let kh = k.col_block(c0, dh);
            let vh = v.col_block(c0, dh);
            let mut scores = matmul_nt(&qh, &kh);
            for s in scores.as_mut_slice() {
                *s *= scale;
            }
            let a = softmax_rows(&scores);
            let oh = matmul(&a, &vh);
            o_concat.add_col_block(c0, &oh);
            attn_weights.push(a);
        }
        let attn_out = linear(&o_concat, &p.o_w, &p.o_b);

        let mut x2 = x1b.clone();
        x2.add_assign(&attn_out);

        let z1 = linear(&x2, &p.ff1_w, &p.ff1_b);
        let hdn = z1.map(silu);
        let y = linear(&hdn, &p.ff2_w, &p.ff2_b);

        let cache = Cache {
            sin_emb,
            x1,
            t0,
            tok,
            qc,
            ca,
            vt_tok,
            readout,
            x1b,
            q,
            k,
            v,
            attn_weights,
            o_concat,
            x2,
            z1,
            hdn,
        };
        (y, cache)
    }

    /// Backward pass; accumulates parameter gradients into `grads`.
    fn backward(&self, v_t: &Mat, pooled: &[f64], cache: &Cache, dy: &Mat, grads: &mut ParamSet) {
        let cfg = &self.cfg;
        let p = &self.p;
        let rows = v_t.rows();
        let h = cfg.hidden;

        // feed-forward head
        let dhdn = linear_backward(
            &cache.hdn,
            &p.ff2_w,
            dy,
            &mut grads.ff2_w,
            &mut grads.ff2_b,
        );
        let mut dz1 = dhdn;
        for (g, z) in dz1.as_mut_slice().iter_mut().zip(cache.z1.as_slice()) {
            *g *= silu_prime(*z);
        }
        let dx2 = linear_backward(
            &cache.x2,
            &p.ff1_w,
            &dz1,
            &mut grads.ff1_w,
            &mut grads.ff1_b,
        );

        // residual: x2 = x1b + attn_out
        let mut dx1b = dx2.clone();
        let do_concat = linear_backward(
            &cache.o_concat,
            &p.o_w,
            &dx2,
            &mut grads.o_w,
            &mut grads.o_b,
        );

        let dh_width = h / cfg.heads;
        let scale = 1.0 / (dh_width as f64).sqrt();
        let mut dq = Mat::zeros(rows, h);
        let mut dk = Mat::zeros(rows, h);
        let mut dv = Mat::zeros(rows, h);
        for head in 0..cfg.heads {
            let c0 = head * dh_width;
            let a = &cache.attn_weights[head];
            let qh = cache.q.col_block(c0, dh_width);
            let kh = cache.k.col_block(c0, dh_width);
            let vh = cache.v.col_block(c0, dh_width);
            let doh = do_concat.col_block(c0, dh_width);

            let da = matmul_nt(&doh, &vh);
            let dvh = matmul_tn(a, &doh);
            let ds = softmax_backward(a, &da);

            let mut dqh = matmul(&ds, &kh);
            for g in dqh.as_mut_slice() {
                *g *= scale;
            }
            let mut dkh = matmul_tn(&ds, &qh);
            for g in dkh.as_mut_slice() {
                *g *= scale;
            }

            dq.add_col_block(c0, &dqh);
            dk.add_col_block(c0, &dkh);
            dv.add_col_block(c0, &dvh);
        }

        dx1b.add_assign(&linear_backward(
            &cache.x1b,
            &p.q_w,
            &dq,
            &mut grads.q_w,
            &mut grads.q_b,
        ));
        dx1b.add_assign(&linear_backward(
            &cache.x1b,
            &p.k_w,
            &dk,
            &mut grads.k_w,
            &mut grads.k_b,
        ));
        dx1b.add_assign(&linear_backward(
            &cache.x1b,
            &p.v_w,
            &dv,
            &mut grads.v_w,
            &mut grads.v_b,
        ));

        // cross-attention readout: x1b = x1 + co(ca · cv(tok))
        let mut dx1 = dx1b.clone();
        let dreadout = linear_backward(
            &cache.readout,
            &p.co_w,
            &dx1b,
            &mut grads.co_w,
            &mut grads.co_b,
        );
        let dca = matmul_nt(&dreadout, &cache.vt_tok);
        let dvt_tok = matmul_tn(&cache.ca, &dreadout);
        let cross_scale = 1.0 / (h as f64).sqrt();
        let mut dcs = softmax_backward(&cache.ca, &dca);
        for g in dcs.as_mut_slice() {
            *g *= cross_scale;
        }
        let dqc = matmul(&dcs, &cache.tok);
        let mut dtok = matmul_tn(&dcs, &cache.qc);
        dtok.add_assign(&linear_backward(
            &cache.tok,
            &p.cv_w,
            &dvt_tok,
            &mut grads.cv_w,
            &mut grads.cv_b,
        ));
        dx1.add_assign(&linear_backward(
            &cache.x1,
            &p.cq_w,
            &dqc,
            &mut grads.cq_w,
            &mut grads.cq_b,
        ));
        linear_backward(&cache.t0, &p.tok_w, &dtok, &mut grads.tok_w, &mut grads.tok_b);

        // x1 = (v_t·in_w^T + in_b) + broadcast(cond + temb)
        let mut dctx = vec![0.0; h];
        for r in 0..rows {
            let row = dx1.row(r);
            for i in 0..h {
                dctx[i] += row[i];
            }
        }
        let dctx_mat = Mat::from_vec(1, h, dctx);

        let pooled_mat = Mat::from_vec(1, pooled.len(), pooled.to_vec());
        linear_backward(
            &pooled_mat,
            &p.vol_w,
            &dctx_mat,
            &mut grads.vol_w,
            &mut grads.vol_b,
        );
        let sin_mat = Mat::from_vec(1, h, cache.sin_emb.clone());
        linear_backward(
            &sin_mat,
            &p.time_w,
            &dctx_mat,
            &mut grads.time_w,
            &mut grads.time_b,
        );

        linear_backward(v_t, &p.in_w, &dx1, &mut grads.in_w, &mut grads.in_b);
    }
}

struct Cache {
    sin_emb: Vec<f64>,
    x1: Mat,
    t0: Mat,
    tok: Mat,
    qc: Mat,
    ca: Mat,
    vt_tok: Mat,
    readout: Mat,
    x1b: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn_weights: Vec<Mat>,
    o_concat: Mat,
    x2: Mat,
    z1: Mat,
    hdn: Mat,
}

impl crate::diffusion::Denoiser for DenoiserParams {
    fn denoise(&self, v_t: &Mat, volume: &Volume, t: usize) -> Result<Mat> {
        let pooled = self.encode_volume(volume)?;
        DenoiserParams::denoise(self, v_t, &pooled, t)
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise softmax Jacobian product: `ds = a ⊙ (da − rowsum(da ⊙ a))`.
fn softmax_backward(a: &Mat, da: &Mat) -> Mat {
    let mut ds = Mat::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let arow = a.row(r);
        let darow = da.row(r);
        let dot: f64 = arow.iter().zip(darow).map(|(&x, &y)| x * y).sum();
        let dsrow = ds.row_mut(r);
        for j in 0..a.cols() {
            dsrow[j] = arow[j] * (darow[j] - dot);
        }
    }
    ds
}

/// Sinusoidal timestep features: `[sin(ω_k t), cos(ω_k t)]` per geometric
/// frequency `ω_k = 10000^{-k/(dim/2)}`. Injective over integer timesteps
/// for dim ≥ 2; squared norm is always dim/2.
pub fn embed_timestep(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even >= 2");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = 10000f64.powf(-(k as f64) / half as f64);
        let phase = omega * t as f64;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    out
}

/// Bucketed average pooling of a volume down to `pool³` features, ordered
/// x-fastest like the voxel layout.
pub fn pool_volume(v: &Volume, pool: usize) -> Vec<f64> {
    let dims = v.dims();
    let n = pool * pool * pool;
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for z in 0..dims[2] {
        let bz = z * pool / dims[2];
        for y in 0..dims[1] {
            let by = y * pool / dims[1];
            for x in 0..dims[0] {
                let bx = x * pool / dims[0];
                let b = bx + pool * (by + pool * bz);
                sums[b] += v.get(x, y, z) as f64;
                counts[b] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// One training example: clean matrix plus pooled conditioning features.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub v0: Mat,
    pub pooled: Vec<f64>,
}

impl TrainItem {
    pub fn new(v0: Mat, volume: &Volume, cfg: &ModelConfig) -> Result<Self> {
        if volume.dims() != cfg.vol_dims {
            return Err(Error::Shape {
                expected: format!("volume dims {:?}", cfg.vol_dims),
                got: format!("{:?}", volume.dims()),
            });
        }
        Ok(TrainItem {
            v0,
            pooled: pool_volume(volume, cfg.pool),
        })
    }
}

/// A batch with the triplet (t, ε, v_t) already drawn, so loss and gradient
/// are deterministic functions of the parameters.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    samples: Vec<PreparedSample>,
}

#[derive(Debug, Clone)]
struct PreparedSample {
    v_t: Mat,
    v0: Mat,
    pooled: Vec<f64>,
    t: usize,
}

/// Draws `t ~ U(1,T)` and Gaussian ε per item and applies the forward
/// noising.
pub fn prepare_batch(
    items: &[&TrainItem],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    if items.is_empty() {
        return Err(Error::Input("batch must be non-empty".into()));
    }
    let mut samples = Vec::with_capacity(items.len());
    for item in items {
        let t = rng.random_range(1..=sched.len_t());
        let eps = Mat::from_fn(item.v0.rows(), item.v0.cols(), |_, _| randn(rng));
        let v_t = forward_noise(&item.v0, t, &eps, sched)?;
        samples.push(PreparedSample {
            v_t,
            v0: item.v0.clone(),
            pooled: item.pooled.clone(),
            t,
        });
    }
    Ok(PreparedBatch { samples })
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mean squared error over every element of the batch; deterministic.
pub fn loss_on(params: &DenoiserParams, batch: &PreparedBatch) -> f64 {
    let per_sample: Vec<f64> = batch
        .samples
        .par_iter()
        .map(|s| {
            let (y, _) = params.forward(&s.v_t, &s.pooled, s.t);
            y.as_slice()
                .iter()
                .zip(s.v0.as_slice())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    let elems: usize = batch.samples.iter().map(|s| s.v0.as_slice().len()).sum();
    per_sample.iter().sum::<f64>() / elems as f64
}

/// Loss plus one gradient array per parameter array. Per-sample passes run
/// in parallel; the reduction is in sample order, so results are
/// reproducible.
pub fn grad_on(params: &DenoiserParams, batch: &PreparedBatch) -> (f64, ParamSet) {
    let elems: usize = batch.samples.iter().map(|s| s.v0.as_slice().len()).sum();
    let scale = 1.0 / elems as f64;

    let partials: Vec<(f64, ParamSet)> = batch
        .samples
        .par_iter()
        .map(|s| {
            let (y, cache) = params.forward(&s.v_t, &s.pooled, s.t);
            let mut sq = 0.0;
            let dy = Mat::from_fn(y.rows(), y.cols(), |r, c| {
                let diff = y.get(r, c) - s.v0.get(r, c);
                sq += diff * diff;
                2.0 * diff * scale
            });
            let mut g = ParamSet::zeros(&params.cfg);
            params.backward(&s.v_t, &s.pooled, &cache, &dy, &mut g);
            (sq * scale, g)
        })
        .collect();

    let mut grads = ParamSet::zeros(&params.cfg);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grads.accumulate(g);
    }
    (loss, grads)
}

/// Spec-level loss op: draw the noise, then evaluate.
pub fn loss(
    params: &DenoiserParams,
    items: &[&TrainItem],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    Ok(loss_on(params, &prepare_batch(items, sched, rng)?))
}

/// Spec-level gradient op: draw the noise, then differentiate.
pub fn grad(
    params: &DenoiserParams,
    items: &[&TrainItem],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamSet)> {
    Ok(grad_on(params, &prepare_batch(items, sched, rng)?))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Miniature instantiation used by the gradient checks: 4 rows, 10
    /// channels, every subsystem exercised.
    pub fn mini_config() -> ModelConfig {
        ModelConfig {
            d: 10,
            hidden: 8,
            heads: 2,
            ff: 12,
            pool: 2,
            vol_dims: [4, 4, 4],
        }
    }

    pub fn mini_batch(seed: u64) -> (DenoiserParams, PreparedBatch) {
        let cfg = mini_config();
        let params = DenoiserParams::init(cfg, seed).unwrap();
        let sched = crate::diffusion::make_schedule(20, crate::diffusion::ScheduleKind::Cosine)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let items: Vec<TrainItem> = (0..2)
            .map(|i| {
                let voxels: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
                let vol = Volume::new([4, 4, 4], voxels).unwrap();
                let v0 = Mat::from_fn(4, cfg.d, |_, _| rng.random_range(-1.0..1.0));
                let _ = i;
                TrainItem::new(v0, &vol, &cfg).unwrap()
            })
            .collect();
        let refs: Vec<&TrainItem> = items.iter().collect();
        let batch = prepare_batch(&refs, &sched, &mut rng).unwrap();
        (params, batch)
    }

    /// Central finite differences of `loss_on` against `grad_on`, every
    /// parameter. Returns the worst relative error.
    pub fn finite_difference_worst_error(params: &mut DenoiserParams, batch: &PreparedBatch) -> f64 {
        let (_, analytic) = grad_on(params, batch);
        let analytic_arrays: Vec<Vec<f64>> = analytic
            .arrays()
            .into_iter()
            .map(|(_, a)| a.to_vec())
            .collect();

        let step = 1e-4;
        let mut worst = 0.0f64;
        let n_arrays = analytic_arrays.len();
        for ai in 0..n_arrays {
            let len = analytic_arrays[ai].len();
            for idx in 0..len {
                let orig = params.p.arrays()[ai].1[idx];

                params.p.arrays_mut()[ai].1[idx] = orig + step;
                let plus = loss_on(params, batch);
                params.p.arrays_mut()[ai].1[idx] = orig - step;
                let minus = loss_on(params, batch);
                params.p.arrays_mut()[ai].1[idx] = orig;

                let numeric = (plus - minus) / (2.0 * step);
                let exact = analytic_arrays[ai][idx];
                let denom = exact.abs().max(numeric.abs()).max(1e-6);
                let rel = (exact - numeric).abs() / denom;
                worst = worst.max(rel);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};

    #[test]
    fn embed_timestep_basics() {
        let e = embed_timestep(0, 8);
        for k in 0..4 {
            assert_eq!(e[2 * k], 0.0, "sin at t=0");
            assert_eq!(e[2 * k + 1], 1.0, "cos at t=0");
        }
        for t in [1usize, 7, 500, 1000] {
            let e = embed_timestep(t, 8);
            let norm2: f64 = e.iter().map(|v| v * v).sum();
            assert!((norm2 - 4.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn embed_timestep_injective_over_table() {
        let mut seen = std::collections::BTreeSet::new();
        for t in 0..=1000 {
            let bits: Vec<u64> = embed_timestep(t, 8).iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "duplicate embedding at t={t}");
        }
    }

    #[test]
    fn encode_volume_zero_and_determinism() {
        let cfg = mini_config();
        let zeroed = DenoiserParams::zeroed(cfg, 0).unwrap();
        let vol = Volume::new([4, 4, 4], vec![0.0; 64]).unwrap();
        let cond = zeroed.encode_volume(&vol).unwrap();
        assert!(cond.iter().all(|&v| v == 0.0));

        let params = DenoiserParams::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v1 = Volume::new(
            [4, 4, 4],
            (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let v2 = Volume::new(
            [4, 4, 4],
            (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        assert_eq!(
            params.encode_volume(&v1).unwrap(),
            params.encode_volume(&v1).unwrap()
        );
        assert_ne!(
            params.encode_volume(&v1).unwrap(),
            params.encode_volume(&v2).unwrap()
        );

        let wrong = Volume::new([2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(params.encode_volume(&wrong).is_err());
    }

    #[test]
    fn zero_params_broadcast_final_bias() {
        let cfg = mini_config();
        let mut params = DenoiserParams::zeroed(cfg, 0).unwrap();
        for (i, b) in params.p.ff2_b.iter_mut().enumerate() {
            *b = i as f64 * 0.5 - 1.0;
        }
        let v_t = Mat::from_fn(4, cfg.d, |r, c| (r + c) as f64 * 0.1);
        let y = params.denoise(&v_t, &vec![0.0; cfg.pooled_len()], 3).unwrap();
        for r in 0..4 {
            for c in 0..cfg.d {
                assert_eq!(y.get(r, c), c as f64 * 0.5 - 1.0);
            }
        }
    }

    #[test]
    fn rows_permute_equivariantly() {
        let cfg = mini_config();
        let params = DenoiserParams::init(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = 6;
        let v_t = Mat::from_fn(l, cfg.d, |_, _| rng.random_range(-1.0..1.0));
        let cond: Vec<f64> = (0..cfg.pooled_len()).map(|_| rng.random_range(0.0..1.0)).collect();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = Mat::from_fn(l, cfg.d, |r, c| v_t.get(perm[r], c));

        let y = params.denoise(&v_t, &cond, 7).unwrap();
        let yp = params.denoise(&permuted, &cond, 7).unwrap();
        for r in 0..l {
            for c in 0..cfg.d {
                assert!(
                    (yp.get(r, c) - y.get(perm[r], c)).abs() < 1e-9,
                    "row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn shape_contract_many_row_counts() {
        let cfg = mini_config();
        let params = DenoiserParams::init(cfg, 5).unwrap();
        let cond = vec![0.1; cfg.pooled_len()];
        for l in [8usize, 64, 320] {
            let v_t = Mat::zeros(l, cfg.d);
            let y = params.denoise(&v_t, &cond, 1).unwrap();
            assert_eq!(y.shape(), (l, cfg.d));
            assert!(y.is_finite());
        }
        let bad = Mat::from_vec(1, cfg.d, vec![f64::NAN; cfg.d]);
        assert!(params.denoise(&bad, &cond, 1).is_err());
    }

    #[test]
    fn loss_zero_at_oracle_point_with_zero_grads() {
        // all-zero weights with final bias equal to every v0 row makes the
        // model exact, so the loss and every gradient vanish.
        let cfg = mini_config();
        let mut params = DenoiserParams::zeroed(cfg, 0).unwrap();
        let target: Vec<f64> = (0..cfg.d).map(|i| i as f64 * 0.3 - 1.0).collect();
        params.p.ff2_b.copy_from_slice(&target);

        let sched = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let vol = Volume::new([4, 4, 4], vec![0.5; 64]).unwrap();
        let v0 = Mat::from_fn(4, cfg.d, |_, c| target[c]);
        let item = TrainItem::new(v0, &vol, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = prepare_batch(&[&item], &sched, &mut rng).unwrap();

        assert_eq!(loss_on(&params, &batch), 0.0);
        let (l, g) = grad_on(&params, &batch);
        assert_eq!(l, 0.0);
        for (name, arr) in g.arrays() {
            assert!(arr.iter().all(|&v| v == 0.0), "{name} gradient not zero");
        }
    }

    #[test]
    fn loss_reproducible_and_nonnegative() {
        let params = DenoiserParams::init(mini_config(), 7).unwrap();
        let sched = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let items: Vec<TrainItem> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..3)
                .map(|_| {
                    let vol = Volume::new(
                        [4, 4, 4],
                        (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
                    )
                    .unwrap();
                    let v0 = Mat::from_fn(4, params.cfg.d, |_, _| rng.random_range(-1.0..1.0));
                    TrainItem::new(v0, &vol, &params.cfg).unwrap()
                })
                .collect()
        };
        let refs: Vec<&TrainItem> = items.iter().collect();
        let mut rng_a = ChaCha8Rng::seed_from_u64(42);
        let mut rng_b = ChaCha8Rng::seed_from_u64(42);
        let la = loss(&params, &refs, &sched, &mut rng_a).unwrap();
        let lb = loss(&params, &refs, &sched, &mut rng_b).unwrap();
        assert_eq!(la, lb);
        assert!(la >= 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let cfg = mini_config();
        let params = DenoiserParams::init(cfg, 9).unwrap();
        let sched = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let vol = Volume::new(
            [4, 4, 4],
            (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let v0 = Mat::from_fn(4, cfg.d, |_, _| rng.random_range(-1.0..1.0));
        let item = TrainItem::new(v0, &vol, &cfg).unwrap();

        let single = prepare_batch(&[&item], &sched, &mut rng).unwrap();
        // duplicate the prepared sample rather than redrawing noise
        let doubled = PreparedBatch {
            samples: vec![single.samples[0].clone(), single.samples[0].clone()],
        };
        let (l1, g1) = grad_on(&params, &single);
        let (l2, g2) = grad_on(&params, &doubled);
        assert!((l1 - l2).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.arrays().into_iter().zip(g2.arrays()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut params, batch) = mini_batch(21);
        let worst = finite_difference_worst_error(&mut params, &batch);
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }
}
