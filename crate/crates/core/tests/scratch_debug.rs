// temporary diagnostic; not part of the suite (runs only with --ignored)

use centerline::codec::encode_centerline;
use centerline::config::RunConfig;
use centerline::denoiser::load_checkpoint;
use centerline::diffusion::{make_schedule, sample, SamplerConfig};
use centerline::volume::{load_centerline, load_volume};
use std::path::Path;

#[test]
#[ignore]
fn dump_sample_stats() {
    let cfg_path = std::env::var("SCRATCH_CFG").unwrap_or_default();
    let cfg = if cfg_path.is_empty() {
        RunConfig::default()
    } else {
        RunConfig::load(Path::new(&cfg_path)).unwrap()
    };
    let ckpt = std::env::var("SCRATCH_CKPT").unwrap();
    let vol_path = std::env::var("SCRATCH_VOL").unwrap();
    let cl_path = std::env::var("SCRATCH_CL").unwrap();

    let (params, _) = load_checkpoint(Path::new(&ckpt)).unwrap();
    let volume = load_volume(Path::new(&vol_path)).unwrap();
    let gt = load_centerline(Path::new(&cl_path)).unwrap();
    let codec = cfg.codec_cfg();
    let sched = make_schedule(cfg.t_steps, cfg.schedule).unwrap();

    let gt_m = encode_centerline(&gt, volume.dims(), &codec).unwrap();
    let s = sample(
        &params,
        &volume,
        (codec.max_len, codec.width()),
        &sched,
        &SamplerConfig {
            t_prime: cfg.t_prime,
            seed: 1000,
        },
    )
    .unwrap();

    let d = codec.width();
    println!("gt valid rows: {}", gt.len());
    println!("row | flag | bits(mean,min,max) | offsets");
    let mut rows: Vec<usize> = (0..s.rows()).collect();
    rows.sort_by(|&a, &b| s.get(b, 0).partial_cmp(&s.get(a, 0)).unwrap());
    for &r in rows.iter() {
        let row = s.row(r);
        let bits = &row[1..d - 3];
        let bmin = bits.iter().cloned().fold(f64::INFINITY, f64::min);
        let bmax = bits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bmean = bits.iter().sum::<f64>() / bits.len() as f64;
        println!(
            "{r:3} | {:+.3} | ({bmean:+.2},{bmin:+.2},{bmax:+.2}) | [{:+.3},{:+.3},{:+.3}]",
            row[0],
            row[d - 3],
            row[d - 2],
            row[d - 1]
        );
    }
    println!("--- gt encoding, first rows:");
    for r in 0..gt.len().min(8) {
        let row = gt_m.row(r);
        println!(
            "{r:3} | {:+.3} | bits {:?} | offs [{:+.3},{:+.3},{:+.3}]",
            row[0],
            &row[1..d - 3]
                .iter()
                .map(|v| *v as i32)
                .collect::<Vec<_>>(),
            row[d - 3],
            row[d - 2],
            row[d - 1]
        );
    }
}
