//! Data model and serialization for volumes, centerlines, dataset cases, and
//! train/val/test splits.
//!
//! On-disk formats (the CLI's contract):
//! - Volume: one text header line `VOL <Vx> <Vy> <Vz>\n` followed by raw
//!   little-endian f32 intensities, row-major with x fastest, so
//!   `index = x + Vx*(y + Vy*z)`.
//! - Centerline: plain text, one `x y z` integer triple per line, written in
//!   lexicographic order; the loader deduplicates.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Dense 3D scalar grid acting as the conditioning image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
}

impl Volume {
    /// Validates dims ≥ 1, length consistency, and finiteness.
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!(
                "volume dims must all be >= 1, got {dims:?}"
            )));
        }
        let expect = dims[0] * dims[1] * dims[2];
        if voxels.len() != expect {
            return Err(Error::Shape {
                expected: format!("{expect} voxels for dims {dims:?}"),
                got: format!("{}", voxels.len()),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite voxel at index {i}")));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

/// Finite set of integer voxel coordinates; no duplicates by construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Centerline {
    points: BTreeSet<[i32; 3]>,
}

impl Centerline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: impl IntoIterator<Item = [i32; 3]>) -> Self {
        Centerline {
            points: points.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, p: [i32; 3]) -> bool {
        self.points.insert(p)
    }

    pub fn contains(&self, p: &[i32; 3]) -> bool {
        self.points.contains(p)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Iterates in lexicographic (x, y, z) order.
    pub fn iter(&self) -> impl Iterator<Item = &[i32; 3]> {
        self.points.iter()
    }

    /// Checks every point lies inside `dims`.
    pub fn validate_in(&self, dims: [usize; 3]) -> Result<()> {
        for p in &self.points {
            for a in 0..3 {
                if p[a] < 0 || p[a] as usize >= dims[a] {
                    return Err(Error::Input(format!(
                        "centerline point {p:?} outside volume dims {dims:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One labelled example: conditioning volume plus its ground-truth centerline.
#[derive(Debug, Clone)]
pub struct DatasetCase {
    pub id: String,
    pub volume: Volume,
    pub centerline: Centerline,
}

impl DatasetCase {
    pub fn new(id: String, volume: Volume, centerline: Centerline) -> Result<Self> {
        centerline.validate_in(volume.dims())?;
        Ok(DatasetCase {
            id,
            volume,
            centerline,
        })
    }
}

/// Train/val/test ratios plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config(format!(
                "split ratios must be in [0,1], got {ratios:?}"
            )));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(SplitSpec { ratios, seed })
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let [vx, vy, vz] = v.dims();
    write!(w, "VOL {vx} {vy} {vz}\n").map_err(|e| Error::io(path, e))?;
    for val in v.voxels() {
        w.write_all(&val.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "missing header newline"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 128 {
            return Err(Error::format(path, "header longer than 128 bytes"));
        }
    }
    let header_len = header.len() + 1;
    let header = String::from_utf8(header)
        .map_err(|_| Error::format(path, "header is not valid utf-8"))?;

    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "VOL" {
        return Err(Error::format(
            path,
            format!("expected header `VOL <Vx> <Vy> <Vz>`, got `{header}`"),
        ));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = toks[a + 1]
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad dimension token `{}`", toks[a + 1])))?;
        if dims[a] == 0 {
            return Err(Error::format(path, format!("dimension {} is zero", a)));
        }
    }

    let count = dims[0] * dims[1] * dims[2];
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != count * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload truncated or oversized: expected {} bytes after byte offset {header_len}, got {}",
                count * 4,
                payload.len()
            ),
        ));
    }
    let mut voxels = Vec::with_capacity(count);
    for i in 0..count {
        let b: [u8; 4] = payload[i * 4..i * 4 + 4].try_into().unwrap();
        let v = f32::from_le_bytes(b);
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("non-finite voxel at byte offset {}", header_len + i * 4),
            ));
        }
        voxels.push(v);
    }
    Volume::new(dims, voxels)
}

pub fn save_centerline(c: &Centerline, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in c.iter() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_centerline(path: &Path) -> Result<Centerline> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let r = BufReader::new(file);
    let mut c = Centerline::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tokens, got {}", lineno + 1, toks.len()),
            ));
        }
        let mut p = [0i32; 3];
        for a in 0..3 {
            p[a] = toks[a].parse::<i32>().map_err(|_| {
                Error::format(
                    path,
                    format!("line {}: non-integer token `{}`", lineno + 1, toks[a]),
                )
            })?;
        }
        c.insert(p);
    }
    Ok(c)
}

/// Deterministic shuffle-then-cut split. Val and test take `⌊N·ratio⌋` cases
/// each; the remainder goes to train.
pub fn split_dataset(
    cases: &[DatasetCase],
    spec: &SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let n = cases.len();
    if n < 3 {
        return Err(Error::Input(format!("need at least 3 cases, got {n}")));
    }
    let nonzero = spec.ratios.iter().filter(|&&r| r > 0.0).count();
    if n < nonzero {
        return Err(Error::Input(format!(
            "{n} cases cannot populate {nonzero} nonzero splits"
        )));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);

    let n_val = (n as f64 * spec.ratios[1]).floor() as usize;
    let n_test = (n as f64 * spec.ratios[2]).floor() as usize;
    let n_train = n - n_val - n_test;

    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok((train, val, test))
}
