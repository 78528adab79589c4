//! Parameter checkpoints: a text header carrying the architecture and
//! pipeline hyperparameters, then one `array <name> <len>` line plus raw
//! little-endian f64 payload per parameter array.

use super::{DenoiserParams, ModelConfig, ParamSet};
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Pipeline settings frozen alongside the weights, so extraction can verify
/// the active config matches what the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub grid: [usize; 3],
    pub max_len: usize,
    pub t_steps: usize,
    pub schedule: ScheduleKind,
}

pub fn save_checkpoint(params: &DenoiserParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let c = &params.cfg;
    let io = |e| Error::io(path, e);

    writeln!(w, "CKPT v1").map_err(io)?;
    writeln!(w, "init_seed {}", params.init_seed).map_err(io)?;
    writeln!(w, "d {}", c.d).map_err(io)?;
    writeln!(w, "hidden {}", c.hidden).map_err(io)?;
    writeln!(w, "heads {}", c.heads).map_err(io)?;
    writeln!(w, "ff {}", c.ff).map_err(io)?;
    writeln!(w, "pool {}", c.pool).map_err(io)?;
    writeln!(
        w,
        "vol_dims {} {} {}",
        c.vol_dims[0], c.vol_dims[1], c.vol_dims[2]
    )
    .map_err(io)?;
    writeln!(w, "grid {} {} {}", meta.grid[0], meta.grid[1], meta.grid[2]).map_err(io)?;
    writeln!(w, "max_len {}", meta.max_len).map_err(io)?;
    writeln!(w, "t_steps {}", meta.t_steps).map_err(io)?;
    writeln!(w, "schedule {}", meta.schedule).map_err(io)?;

    let arrays = params.p.arrays();
    writeln!(w, "arrays {}", arrays.len()).map_err(io)?;
    for (name, data) in arrays {
        writeln!(w, "array {} {}", name, data.len()).map_err(io)?;
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_line(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if buf.is_empty() {
                return Err(Error::format(path, "unexpected end of file"));
            }
            break;
        }
        if byte[0] == b'\n' {
            break;
        }
        buf.push(byte[0]);
        if buf.len() > 256 {
            return Err(Error::format(path, "header line too long"));
        }
    }
    String::from_utf8(buf).map_err(|_| Error::format(path, "header not utf-8"))
}

fn parse_kv<'a>(line: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::format(path, format!("expected `{key} ...`, got `{line}`")))
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::format(path, format!("bad numeric token `{tok}`")))
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserParams, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    if read_line(&mut r, path)? != "CKPT v1" {
        return Err(Error::format(path, "not a CKPT v1 file"));
    }
    let init_seed: u64 = parse_num(parse_kv(&read_line(&mut r, path)?, "init_seed", path)?, path)?;
    let d: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "d", path)?, path)?;
    let hidden: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "hidden", path)?, path)?;
    let heads: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "heads", path)?, path)?;
    let ff: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "ff", path)?, path)?;
    let pool: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "pool", path)?, path)?;

    let vd_line = read_line(&mut r, path)?;
    let vd: Vec<&str> = parse_kv(&vd_line, "vol_dims", path)?.split(' ').collect();
    if vd.len() != 3 {
        return Err(Error::format(path, "vol_dims needs 3 values"));
    }
    let vol_dims = [
        parse_num(vd[0], path)?,
        parse_num(vd[1], path)?,
        parse_num(vd[2], path)?,
    ];

    let grid_line = read_line(&mut r, path)?;
    let gr: Vec<&str> = parse_kv(&grid_line, "grid", path)?.split(' ').collect();
    if gr.len() != 3 {
        return Err(Error::format(path, "grid needs 3 values"));
    }
    let grid = [
        parse_num(gr[0], path)?,
        parse_num(gr[1], path)?,
        parse_num(gr[2], path)?,
    ];
    let max_len: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "max_len", path)?, path)?;
    let t_steps: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "t_steps", path)?, path)?;
    let schedule: ScheduleKind =
        parse_kv(&read_line(&mut r, path)?, "schedule", path)?.parse()?;

    let cfg = ModelConfig {
        d,
        hidden,
        heads,
        ff,
        pool,
        vol_dims,
    };
    cfg.validate()?;

    let n_arrays: usize = parse_num(parse_kv(&read_line(&mut r, path)?, "arrays", path)?, path)?;
    let mut p = ParamSet::zeros(&cfg);
    {
        let mut views = p.arrays_mut();
        if n_arrays != views.len() {
            return Err(Error::format(
                path,
                format!("expected {} arrays, header says {n_arrays}", views.len()),
            ));
        }
        for (name, data) in views.iter_mut() {
            let line = read_line(&mut r, path)?;
            let rest = parse_kv(&line, "array", path)?;
            let (got_name, got_len) = rest
                .split_once(' ')
                .ok_or_else(|| Error::format(path, format!("bad array line `{line}`")))?;
            if got_name != *name {
                return Err(Error::format(
                    path,
                    format!("array order mismatch: expected `{name}`, got `{got_name}`"),
                ));
            }
            let len: usize = parse_num(got_len, path)?;
            if len != data.len() {
                return Err(Error::format(
                    path,
                    format!("array `{name}`: expected {} values, got {len}", data.len()),
                ));
            }
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            for (i, v) in data.iter_mut().enumerate() {
                let b: [u8; 8] = bytes[i * 8..i * 8 + 8].try_into().unwrap();
                *v = f64::from_le_bytes(b);
                if !v.is_finite() {
                    return Err(Error::format(
                        path,
                        format!("non-finite weight in array `{name}` at index {i}"),
                    ));
                }
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after last array"));
    }

    Ok((
        DenoiserParams { cfg, init_seed, p },
        CheckpointMeta {
            grid,
            max_len,
            t_steps,
            schedule,
        },
    ))
}
