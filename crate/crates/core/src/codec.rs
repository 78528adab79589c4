//! Coarse-to-fine coordinate codec.
//!
//! Each centerline point is split into a coarse grid-cell index (stored as a
//! fixed-width binary vector, one bit per channel) and a fine offset from the
//! cell center, normalized by the cell size. A validity flag makes
//! variable-length point sets fit a fixed L×d matrix; unused rows are padding.
//!
//! Binary channels are embedded as continuous values (`bit_low`/`bit_high`,
//! ±1 by default) so the whole matrix lives on a comparable scale under
//! Gaussian noise. Decoding thresholds the flag and bit channels and rounds
//! reconstructed coordinates to the voxel grid, making it total on arbitrary
//! real matrices; on clean encodings it inverts the encoder exactly.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::volume::Centerline;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Grid cells per axis; each must be a power of two ≥ 2.
    pub grid: [usize; 3],
    /// Fixed row count L of the encoded matrix.
    pub max_len: usize,
    /// Continuous embedding of binary 0 and 1.
    pub bit_low: f64,
    pub bit_high: f64,
    /// Bit-channel decode threshold (strictly-greater comparison).
    pub lambda: f64,
    /// Rows with flag ≤ this value decode as padding.
    pub flag_threshold: f64,
    /// Pad with literal zeros instead of `bit_low` (ablation option).
    pub pad_zero: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            grid: [8, 8, 8],
            max_len: 64,
            bit_low: -1.0,
            bit_high: 1.0,
            lambda: 0.0,
            flag_threshold: 0.0,
            pad_zero: false,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        for (a, &g) in self.grid.iter().enumerate() {
            if g < 2 || !g.is_power_of_two() {
                return Err(Error::Config(format!(
                    "grid[{a}] must be a power of two >= 2, got {g}"
                )));
            }
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if !(self.bit_low < self.lambda && self.lambda < self.bit_high) {
            return Err(Error::Config(format!(
                "need bit_low < lambda < bit_high, got {} / {} / {}",
                self.bit_low, self.lambda, self.bit_high
            )));
        }
        if !(self.bit_low < self.flag_threshold && self.flag_threshold < self.bit_high) {
            return Err(Error::Config(format!(
                "need bit_low < flag_threshold < bit_high, got {} / {} / {}",
                self.bit_low, self.flag_threshold, self.bit_high
            )));
        }
        Ok(())
    }

    /// Bits per axis, `B_a = log2(grid[a])`.
    pub fn bits_per_axis(&self) -> [usize; 3] {
        [
            self.grid[0].trailing_zeros() as usize,
            self.grid[1].trailing_zeros() as usize,
            self.grid[2].trailing_zeros() as usize,
        ]
    }

    /// Row width: flag + bits + 3 offsets.
    pub fn width(&self) -> usize {
        let b = self.bits_per_axis();
        1 + b[0] + b[1] + b[2] + 3
    }

    fn pad_value(&self) -> f64 {
        if self.pad_zero {
            0.0
        } else {
            self.bit_low
        }
    }

    /// Grid-cell size along `axis` for a volume of size `dims`; may be
    /// fractional, the grid need not divide the volume.
    pub fn cell_size(&self, dims: [usize; 3], axis: usize) -> f64 {
        dims[axis] as f64 / self.grid[axis] as f64
    }
}

/// One encoded point: validity flag, binary-coded cell index, cell offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct C2fElement {
    pub flag: f64,
    /// Concatenated per-axis bit channels, `bit_low`/`bit_high` valued.
    pub bits: Vec<f64>,
    /// Offsets from cell center, normalized by cell size, each in [−0.5, 0.5).
    pub offsets: [f64; 3],
}

/// Index → fixed-width binary vector, most-significant bit first.
pub fn binary_encode(g: usize, bits: usize) -> Result<Vec<u8>> {
    if bits >= usize::BITS as usize || g >= (1usize << bits) {
        return Err(Error::Input(format!(
            "index {g} does not fit in {bits} bits"
        )));
    }
    Ok((0..bits).map(|k| ((g >> (bits - 1 - k)) & 1) as u8).collect())
}

/// Inverse of [`binary_encode`].
pub fn binary_decode(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

pub fn encode_point(p: [i32; 3], dims: [usize; 3], cfg: &CodecConfig) -> Result<C2fElement> {
    let b = cfg.bits_per_axis();
    let mut bits = Vec::with_capacity(b[0] + b[1] + b[2]);
    let mut offsets = [0.0; 3];
    for a in 0..3 {
        if p[a] < 0 || p[a] as usize >= dims[a] {
            return Err(Error::Input(format!(
                "point {p:?} outside volume dims {dims:?}"
            )));
        }
        let s = cfg.cell_size(dims, a);
        let g = ((p[a] as f64 / s).floor() as usize).min(cfg.grid[a] - 1);
        let center = s * (g as f64 + 0.5);
        offsets[a] = (p[a] as f64 - center) / s;
        for bit in binary_encode(g, b[a])? {
            bits.push(if bit == 1 { cfg.bit_high } else { cfg.bit_low });
        }
    }
    Ok(C2fElement {
        flag: cfg.bit_high,
        bits,
        offsets,
    })
}

/// Encodes a centerline into the fixed L×d matrix; valid rows come first in
/// lexicographic point order, the rest is padding.
pub fn encode_centerline(c: &Centerline, dims: [usize; 3], cfg: &CodecConfig) -> Result<Mat> {
    if c.len() > cfg.max_len {
        return Err(Error::Capacity {
            len: c.len(),
            max: cfg.max_len,
        });
    }
    let d = cfg.width();
    let pad = cfg.pad_value();
    let mut m = Mat::from_vec(cfg.max_len, d, vec![pad; cfg.max_len * d]);
    for (r, &p) in c.iter().enumerate() {
        let el = encode_point(p, dims, cfg)?;
        let row = m.row_mut(r);
        row[0] = el.flag;
        row[1..1 + el.bits.len()].copy_from_slice(&el.bits);
        row[d - 3..].copy_from_slice(&el.offsets);
    }
    Ok(m)
}

/// Decodes an arbitrary real matrix back into a point set. Total: rows whose
/// flag fails the threshold are dropped, bit channels threshold at `lambda`,
/// coordinates round to the nearest voxel and clamp into the volume.
pub fn decode_matrix(m: &Mat, dims: [usize; 3], cfg: &CodecConfig) -> Centerline {
    let b = cfg.bits_per_axis();
    let d = cfg.width();
    debug_assert_eq!(m.cols(), d, "decode: matrix width mismatch");
    let mut out = Centerline::new();
    for r in 0..m.rows() {
        let row = m.row(r);
        if row[0] <= cfg.flag_threshold {
            continue;
        }
        let mut p = [0i32; 3];
        let mut cursor = 1;
        for a in 0..3 {
            let axis_bits: Vec<u8> = row[cursor..cursor + b[a]]
                .iter()
                .map(|&v| if v > cfg.lambda { 1 } else { 0 })
                .collect();
            cursor += b[a];
            let g = binary_decode(&axis_bits);
            let s = cfg.cell_size(dims, a);
            let offset = row[d - 3 + a];
            let coord = (s * (g as f64 + 0.5 + offset)).round();
            p[a] = (coord.max(0.0).min((dims[a] - 1) as f64)) as i32;
        }
        out.insert(p);
    }
    out
}

/// Raw-coordinate ablation codec: rows are `(flag, x, y, z)` with coordinates
/// affinely mapped to `[bit_low, bit_high]`. Same flag semantics, no
/// coarse/fine split; used to measure what the binary-coded cells buy.
pub mod raw {
    use super::*;

    pub fn width() -> usize {
        4
    }

    pub fn encode_centerline(c: &Centerline, dims: [usize; 3], cfg: &CodecConfig) -> Result<Mat> {
        if c.len() > cfg.max_len {
            return Err(Error::Capacity {
                len: c.len(),
                max: cfg.max_len,
            });
        }
        let pad = if cfg.pad_zero { 0.0 } else { cfg.bit_low };
        let mut m = Mat::from_vec(cfg.max_len, 4, vec![pad; cfg.max_len * 4]);
        let span = cfg.bit_high - cfg.bit_low;
        for (r, &p) in c.iter().enumerate() {
            let row = m.row_mut(r);
            row[0] = cfg.bit_high;
            for a in 0..3 {
                if p[a] < 0 || p[a] as usize >= dims[a] {
                    return Err(Error::Input(format!(
                        "point {p:?} outside volume dims {dims:?}"
                    )));
                }
                let unit = if dims[a] > 1 {
                    p[a] as f64 / (dims[a] - 1) as f64
                } else {
                    0.5
                };
                row[1 + a] = cfg.bit_low + span * unit;
            }
        }
        Ok(m)
    }

    pub fn decode_matrix(m: &Mat, dims: [usize; 3], cfg: &CodecConfig) -> Centerline {
        let span = cfg.bit_high - cfg.bit_low;
        let mut out = Centerline::new();
        for r in 0..m.rows() {
            let row = m.row(r);
            if row[0] <= cfg.flag_threshold {
                continue;
            }
            let mut p = [0i32; 3];
            for a in 0..3 {
                let unit = (row[1 + a] - cfg.bit_low) / span;
                let coord = (unit * (dims[a] - 1) as f64).round();
                p[a] = (coord.max(0.0).min((dims[a] - 1) as f64)) as i32;
            }
            out.insert(p);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_16() -> CodecConfig {
        CodecConfig {
            grid: [16, 16, 16],
            max_len: 320,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn binary_encode_edges_and_positional_oracle() {
        assert_eq!(binary_encode(0, 4).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(binary_encode(15, 4).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(binary_encode(6, 4).unwrap(), vec![0, 1, 1, 0]);
        assert!(binary_encode(16, 4).is_err());

        // positional-notation oracle: g = Σ b_k · 2^(B−1−k)
        for g in 0..64usize {
            let bits = binary_encode(g, 6).unwrap();
            let oracle: usize = bits
                .iter()
                .enumerate()
                .map(|(k, &b)| (b as usize) << (5 - k))
                .sum();
            assert_eq!(oracle, g);
            assert_eq!(binary_decode(&bits), g);
        }
    }

    #[test]
    fn encode_point_worked_example() {
        // V=256, G=16 → s=16; x=37 lands in cell 2, center 40, offset −3/16.
        let cfg = cfg_16();
        let el = encode_point([37, 0, 0], [256, 256, 256], &cfg).unwrap();
        assert_eq!(el.flag, 1.0);
        let expect_x_bits = [-1.0, -1.0, 1.0, -1.0]; // cell 2 = 0010
        assert_eq!(&el.bits[..4], &expect_x_bits);
        assert_eq!(el.offsets[0], -0.1875);
    }

    #[test]
    fn encode_point_boundaries() {
        let cfg = cfg_16();
        let lo = encode_point([0, 0, 0], [256, 256, 256], &cfg).unwrap();
        assert!(lo.bits[..4].iter().all(|&b| b == -1.0));
        assert_eq!(lo.offsets[0], -0.5);

        let hi = encode_point([255, 0, 0], [256, 256, 256], &cfg).unwrap();
        assert!(hi.bits[..4].iter().all(|&b| b == 1.0));
        assert_eq!(hi.offsets[0], 0.4375); // (255 − 248) / 16

        assert!(encode_point([256, 0, 0], [256, 256, 256], &cfg).is_err());
        assert!(encode_point([-1, 0, 0], [256, 256, 256], &cfg).is_err());
    }

    #[test]
    fn width_matches_contract() {
        assert_eq!(cfg_16().width(), 16); // 1 + 3·4 + 3
        assert_eq!(CodecConfig::default().width(), 13); // G=8 → 1 + 3·3 + 3
    }

    #[test]
    fn empty_and_single_point_matrices() {
        let cfg = CodecConfig::default();
        let dims = [32, 32, 32];

        let empty = encode_centerline(&Centerline::new(), dims, &cfg).unwrap();
        assert!(empty.as_slice().iter().all(|&v| v == cfg.bit_low));
        assert!(decode_matrix(&empty, dims, &cfg).is_empty());

        let one = Centerline::from_points([[5, 6, 7]]);
        let m = encode_centerline(&one, dims, &cfg).unwrap();
        assert_eq!(m.get(0, 0), cfg.bit_high);
        for r in 1..cfg.max_len {
            assert!(m.row(r).iter().all(|&v| v == cfg.bit_low));
        }
        assert_eq!(decode_matrix(&m, dims, &cfg), one);
    }

    #[test]
    fn capacity_overflow_reports_sizes() {
        let cfg = CodecConfig {
            max_len: 2,
            ..CodecConfig::default()
        };
        let c = Centerline::from_points([[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        match encode_centerline(&c, [32, 32, 32], &cfg) {
            Err(Error::Capacity { len: 3, max: 2 }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    fn random_centerline(rng: &mut ChaCha8Rng, dims: [usize; 3], max_pts: usize) -> Centerline {
        let n = rng.random_range(0..=max_pts);
        Centerline::from_points((0..n).map(|_| {
            [
                rng.random_range(0..dims[0] as i32),
                rng.random_range(0..dims[1] as i32),
                rng.random_range(0..dims[2] as i32),
            ]
        }))
    }

    #[test]
    fn round_trip_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = cfg_16();
        for _ in 0..200 {
            let dims = [
                rng.random_range(16..300),
                rng.random_range(16..300),
                rng.random_range(16..300),
            ];
            let c = random_centerline(&mut rng, dims, 100);
            let m = encode_centerline(&c, dims, &cfg).unwrap();
            assert_eq!(decode_matrix(&m, dims, &cfg), c);
        }
    }

    #[test]
    fn noise_inside_margins_preserves_decoding() {
        // bits/flag tolerate anything under half the bit gap; offsets tolerate
        // anything under the voxel rounding slack 0.5/s per axis.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CodecConfig::default();
        let dims = [32, 32, 32];
        let d = cfg.width();
        let bit_margin = 0.5 * (cfg.bit_high - cfg.bit_low);
        for _ in 0..100 {
            let c = random_centerline(&mut rng, dims, cfg.max_len);
            let mut m = encode_centerline(&c, dims, &cfg).unwrap();
            for r in 0..m.rows() {
                for col in 0..d {
                    let margin = if col < d - 3 {
                        bit_margin
                    } else {
                        0.5 / cfg.cell_size(dims, col - (d - 3))
                    };
                    let noise = rng.random_range(-0.99 * margin..0.99 * margin);
                    m.set(r, col, m.get(r, col) + noise);
                }
            }
            assert_eq!(decode_matrix(&m, dims, &cfg), c);
        }
    }

    #[test]
    fn bit_noise_example_with_offset_lambda() {
        // +0.2 on every bit channel with λ=0.5 still decodes to the same point.
        let cfg = CodecConfig {
            lambda: 0.5,
            ..CodecConfig::default()
        };
        let dims = [32, 32, 32];
        let c = Centerline::from_points([[11, 21, 3]]);
        let mut m = encode_centerline(&c, dims, &cfg).unwrap();
        let d = cfg.width();
        for col in 1..d - 3 {
            m.set(0, col, m.get(0, col) + 0.2);
        }
        assert_eq!(decode_matrix(&m, dims, &cfg), c);
    }

    #[test]
    fn zero_padding_option_still_decodes_clean() {
        let cfg = CodecConfig {
            pad_zero: true,
            ..CodecConfig::default()
        };
        let dims = [32, 32, 32];
        let c = Centerline::from_points([[1, 2, 3], [9, 9, 9]]);
        let m = encode_centerline(&c, dims, &cfg).unwrap();
        assert!(m.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(decode_matrix(&m, dims, &cfg), c);
    }

    #[test]
    fn raw_codec_round_trips_cleanly() {
        let cfg = CodecConfig::default();
        let dims = [32, 32, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = random_centerline(&mut rng, dims, cfg.max_len);
            let m = raw::encode_centerline(&c, dims, &cfg).unwrap();
            assert_eq!(raw::decode_matrix(&m, dims, &cfg), c);
        }
    }

    proptest! {
        #[test]
        fn prop_round_trip_and_offset_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = [4usize, 8, 16][rng.random_range(0..3)];
            let cfg = CodecConfig { grid: [g, g, g], max_len: 64, ..CodecConfig::default() };
            let dims = [
                rng.random_range(4..64),
                rng.random_range(4..64),
                rng.random_range(4..64),
            ];
            let c = random_centerline(&mut rng, dims, 50);
            for &p in c.iter() {
                let el = encode_point(p, dims, &cfg).unwrap();
                for o in el.offsets {
                    prop_assert!((-0.5..0.5).contains(&o), "offset {o} out of range");
                }
            }
            let m = encode_centerline(&c, dims, &cfg).unwrap();
            prop_assert_eq!(decode_matrix(&m, dims, &cfg), c);
        }
    }
}
