//! Pipeline commands behind the `synth | train | extract | eval | sweep`
//! subcommands. Each command is an ordinary function so tests drive them
//! directly; `main` only parses arguments and maps errors to exit codes.
//!
//! Every command echoes the effective config into its output location and is
//! deterministic given the config seeds: reruns produce byte-identical
//! artifacts.

use crate::codec::{decode_matrix, encode_centerline};
use crate::config::RunConfig;
use crate::denoiser::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, DenoiserParams, TrainItem,
};
use crate::diffusion::{make_schedule, sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, mean_csv_row, CSV_HEADER};
use crate::synth::make_dataset;
use crate::volume::{
    load_centerline, load_volume, save_centerline, save_volume, split_dataset, Centerline,
    DatasetCase,
};
use crate::voting::{aggregate, auto_tau, threshold_votes, vote};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.txt"), &cfg.to_text())
}

/// Generates the synthetic dataset directory: volumes, centerlines, a
/// manifest, the split assignment, and the effective config.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<()> {
    if cfg.synth_cases == 0 {
        return Err(Error::Input("synth_cases must be >= 1".into()));
    }
    if out_dir.exists() {
        let non_empty = out_dir
            .read_dir()
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Input(format!(
                "output dir {} is not empty; pass --force to overwrite",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let cases = make_dataset(cfg.synth_cases, &cfg.tree_spec(), cfg.max_len, cfg.synth_seed)?;
    let (train_idx, val_idx, test_idx) = split_dataset(&cases, &cfg.split_spec()?)?;

    let mut manifest = String::new();
    for case in &cases {
        save_volume(&case.volume, &out_dir.join(format!("{}.vol", case.id)))?;
        save_centerline(&case.centerline, &out_dir.join(format!("{}.cl", case.id)))?;
        manifest.push_str(&case.id);
        manifest.push('\n');
    }
    write_file(&out_dir.join("manifest.txt"), &manifest)?;

    let mut assignment: BTreeMap<&str, &str> = BTreeMap::new();
    for &i in &train_idx {
        assignment.insert(&cases[i].id, "train");
    }
    for &i in &val_idx {
        assignment.insert(&cases[i].id, "val");
    }
    for &i in &test_idx {
        assignment.insert(&cases[i].id, "test");
    }
    let mut split = String::new();
    for case in &cases {
        split.push_str(&format!("{} {}\n", case.id, assignment[case.id.as_str()]));
    }
    write_file(&out_dir.join("split.txt"), &split)?;
    echo_config(cfg, out_dir)
}

/// Dataset as written by `cmd_synth`: cases plus their split labels.
pub struct LoadedDataset {
    pub cases: Vec<DatasetCase>,
    pub split_of: BTreeMap<String, String>,
}

impl LoadedDataset {
    pub fn subset(&self, label: &str) -> Vec<&DatasetCase> {
        self.cases
            .iter()
            .filter(|c| self.split_of.get(&c.id).map(String::as_str) == Some(label))
            .collect()
    }
}

pub fn load_dataset(data_dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = data_dir.join("manifest.txt");
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let split_path = data_dir.join("split.txt");
    let split_text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;

    let mut split_of = BTreeMap::new();
    for (lineno, line) in split_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, label) = line.split_once(' ').ok_or_else(|| {
            Error::format(&split_path, format!("line {}: expected `id label`", lineno + 1))
        })?;
        if !matches!(label, "train" | "val" | "test") {
            return Err(Error::format(
                &split_path,
                format!("line {}: unknown split label `{label}`", lineno + 1),
            ));
        }
        split_of.insert(id.to_string(), label.to_string());
    }

    let mut cases = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let volume = load_volume(&data_dir.join(format!("{id}.vol")))?;
        let centerline = load_centerline(&data_dir.join(format!("{id}.cl")))?;
        if !split_of.contains_key(id) {
            return Err(Error::format(
                &split_path,
                format!("case `{id}` missing from split file"),
            ));
        }
        cases.push(DatasetCase::new(id.to_string(), volume, centerline)?);
    }
    if cases.is_empty() {
        return Err(Error::format(&manifest_path, "manifest lists no cases"));
    }
    Ok(LoadedDataset { cases, split_of })
}

fn train_items_for(cases: &[&DatasetCase], cfg: &RunConfig) -> Result<Vec<TrainItem>> {
    let codec_cfg = cfg.codec_cfg();
    let model_cfg = cfg.model_cfg();
    cases
        .iter()
        .map(|case| {
            let v0 = encode_centerline(&case.centerline, case.volume.dims(), &codec_cfg)?;
            TrainItem::new(v0, &case.volume, &model_cfg)
        })
        .collect()
}

/// Trains on the dataset's train/val splits and writes the best-validation
/// checkpoint plus the loss history CSV.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let train_cases = dataset.subset("train");
    let val_cases = dataset.subset("val");
    let train_items = train_items_for(&train_cases, cfg)?;
    let val_items = train_items_for(&val_cases, cfg)?;

    let sched = make_schedule(cfg.t_steps, cfg.schedule)?;
    let params = DenoiserParams::init(cfg.model_cfg(), cfg.train_seed)?;
    let outcome = train(params, &train_items, &val_items, &cfg.train_cfg(), &sched)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let meta = CheckpointMeta {
        grid: cfg.grid,
        max_len: cfg.max_len,
        t_steps: cfg.t_steps,
        schedule: cfg.schedule,
    };
    save_checkpoint(&outcome.params, &meta, &out_dir.join("model.ckpt"))?;

    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for row in &outcome.history {
        match row.val_loss {
            Some(v) => csv.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, v)),
            None => csv.push_str(&format!("{},{},\n", row.epoch, row.train_loss)),
        }
    }
    write_file(&out_dir.join("loss_history.csv"), &csv)?;
    echo_config(cfg, out_dir)?;
    println!(
        "trained {} epochs; best validation loss {:.6} at epoch {}",
        outcome.history.len(),
        outcome.best_val_loss,
        outcome.best_epoch
    );
    Ok(())
}

/// Verifies checkpoint hyperparameters against the active config; the error
/// lists every differing field.
fn check_compat(cfg: &RunConfig, params: &DenoiserParams, meta: &CheckpointMeta) -> Result<()> {
    let want = cfg.model_cfg();
    let got = params.cfg;
    let mut diffs = Vec::new();
    let mut cmp = |name: &str, want: String, got: String| {
        if want != got {
            diffs.push(format!("{name}: config {want}, checkpoint {got}"));
        }
    };
    cmp("d", want.d.to_string(), got.d.to_string());
    cmp("hidden", want.hidden.to_string(), got.hidden.to_string());
    cmp("heads", want.heads.to_string(), got.heads.to_string());
    cmp("ff", want.ff.to_string(), got.ff.to_string());
    cmp("pool", want.pool.to_string(), got.pool.to_string());
    cmp(
        "vol_dims",
        format!("{:?}", want.vol_dims),
        format!("{:?}", got.vol_dims),
    );
    cmp("grid", format!("{:?}", cfg.grid), format!("{:?}", meta.grid));
    cmp(
        "max_len",
        cfg.max_len.to_string(),
        meta.max_len.to_string(),
    );
    cmp(
        "t_steps",
        cfg.t_steps.to_string(),
        meta.t_steps.to_string(),
    );
    cmp(
        "schedule",
        cfg.schedule.to_string(),
        meta.schedule.to_string(),
    );
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch { diffs })
    }
}

/// Samples K centerlines for one volume, votes, thresholds, and writes the
/// aggregated centerline plus a sidecar report.
pub fn cmd_extract(
    cfg: &RunConfig,
    ckpt_path: &Path,
    volume_path: &Path,
    out_path: &Path,
) -> Result<()> {
    let (params, meta) = load_checkpoint(ckpt_path)?;
    check_compat(cfg, &params, &meta)?;
    let volume = load_volume(volume_path)?;
    let sched = make_schedule(cfg.t_steps, cfg.schedule)?;

    let result = aggregate(
        &params,
        &volume,
        &cfg.voting_cfg(),
        cfg.t_prime,
        &sched,
        &cfg.codec_cfg(),
    )?;

    save_centerline(&result.aggregated, out_path)?;
    let sizes: Vec<String> = result
        .per_sample_sizes
        .iter()
        .map(|s| s.to_string())
        .collect();
    let report = format!(
        "k = {}\ntau = {}\naggregated_size = {}\nper_sample_sizes = {}\n",
        cfg.vote_k,
        result.tau_used,
        result.aggregated.len(),
        sizes.join(",")
    );
    write_file(&sidecar(out_path, "report.txt"), &report)?;
    write_file(&sidecar(out_path, "config.txt"), &cfg.to_text())
}

fn sidecar(out_path: &Path, suffix: &str) -> PathBuf {
    let mut name = out_path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    out_path.with_file_name(name)
}

fn centerline_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in dir.read_dir().map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "cl").unwrap_or(false) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Scores predictions against ground truth case by case and writes the
/// metrics CSV (per-case rows plus a final mean row).
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path, out_csv: &Path) -> Result<()> {
    let pred_ids = centerline_ids(pred_dir)?;
    let gt_ids = centerline_ids(gt_dir)?;
    let missing_pred: Vec<&String> = gt_ids.iter().filter(|id| !pred_ids.contains(id)).collect();
    let missing_gt: Vec<&String> = pred_ids.iter().filter(|id| !gt_ids.contains(id)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(Error::Input(format!(
            "case id mismatch: missing predictions for {missing_pred:?}, missing ground truth for {missing_gt:?}"
        )));
    }
    if pred_ids.is_empty() {
        return Err(Error::Input("no .cl files to evaluate".into()));
    }

    let reports = pred_ids
        .iter()
        .map(|id| {
            let pred = load_centerline(&pred_dir.join(format!("{id}.cl")))?;
            let gt = load_centerline(&gt_dir.join(format!("{id}.cl")))?;
            evaluate_case(id, &pred, &gt, &cfg.eval_radii, cfg.connectivity)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for rep in &reports {
        for row in rep.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    csv.push_str(&mean_csv_row(&reports));
    csv.push('\n');
    write_file(out_csv, &csv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub mean_f1_r1: f64,
    pub mean_betti0: f64,
}

/// Vote-count sweep on the test split: for each K, aggregate with the first K
/// seeds (nested reuse, so curves are comparable) and record mean F1 at R=1
/// and mean Betti-0. Emits CSV plus a two-axis SVG plot. The threshold is
/// selected automatically per K.
pub fn cmd_sweep(
    cfg: &RunConfig,
    ckpt_path: &Path,
    data_dir: &Path,
    k_values: &[usize],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Input("k_values must be non-empty".into()));
    }
    let k_max = *k_values.iter().max().unwrap();
    if k_values.iter().any(|&k| k == 0) {
        return Err(Error::Input("k_values must be >= 1".into()));
    }
    if k_max > cfg.vote_max_seeds {
        return Err(Error::Input(format!(
            "K={k_max} exceeds vote_max_seeds {}",
            cfg.vote_max_seeds
        )));
    }

    let (params, meta) = load_checkpoint(ckpt_path)?;
    check_compat(cfg, &params, &meta)?;
    let dataset = load_dataset(data_dir)?;
    let test_cases = dataset.subset("test");
    if test_cases.is_empty() {
        return Err(Error::Input("dataset has no test split".into()));
    }

    let sched = make_schedule(cfg.t_steps, cfg.schedule)?;
    let codec_cfg = cfg.codec_cfg();
    let shape = (codec_cfg.max_len, codec_cfg.width());

    // all K_max samples per case up front; each K then votes over a prefix
    let per_case_samples: Vec<Vec<Centerline>> = test_cases
        .par_iter()
        .enumerate()
        .map(|(case_idx, case)| {
            (0..k_max)
                .map(|j| {
                    let seed = cfg.seed_base
                        + case_idx as u64 * cfg.vote_max_seeds as u64
                        + j as u64;
                    let s = sample(
                        &params,
                        &case.volume,
                        shape,
                        &sched,
                        &SamplerConfig {
                            t_prime: cfg.t_prime,
                            seed,
                        },
                    )?;
                    Ok(decode_matrix(&s, case.volume.dims(), &codec_cfg))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &k in k_values {
        let mut f1_sum = 0.0;
        let mut b0_sum = 0.0;
        for (case, samples) in test_cases.iter().zip(&per_case_samples) {
            let prefix = &samples[..k];
            let sizes: Vec<usize> = prefix.iter().map(Centerline::len).collect();
            let grid = vote(prefix, case.volume.dims())?;
            let tau = auto_tau(&grid, &sizes);
            let pred = threshold_votes(&grid, tau)?;
            let rep = evaluate_case(&case.id, &pred, &case.centerline, &[1.0], cfg.connectivity)?;
            f1_sum += rep.matches[0].f1;
            b0_sum += rep.betti.betti0 as f64;
        }
        let n = test_cases.len() as f64;
        rows.push(SweepRow {
            k,
            mean_f1_r1: f1_sum / n,
            mean_betti0: b0_sum / n,
        });
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::from("k,mean_f1_r1,mean_betti0\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.k, row.mean_f1_r1, row.mean_betti0
        ));
    }
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    write_file(&out_dir.join("sweep.svg"), &render_sweep_svg(&rows))?;
    echo_config(cfg, out_dir)?;
    Ok(rows)
}

/// Hand-emitted two-axis line plot: F1@R=1 on the left axis, Betti-0 on the
/// right, both against K.
fn render_sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 60.0, 30.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let k_min = rows.first().map(|r| r.k).unwrap_or(1) as f64;
    let k_max = rows.last().map(|r| r.k).unwrap_or(1) as f64;
    let k_span = (k_max - k_min).max(1.0);
    let b0_max = rows.iter().map(|r| r.mean_betti0).fold(1.0, f64::max);

    let x = |k: f64| ml + (k - k_min) / k_span * plot_w;
    let y_f1 = |v: f64| mt + (1.0 - v) * plot_h;
    let y_b0 = |v: f64| mt + (1.0 - v / b0_max) * plot_h;

    let poly = |pts: &[(f64, f64)]| -> String {
        pts.iter()
            .map(|(px, py)| format!("{px:.1},{py:.1}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let f1_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (x(r.k as f64), y_f1(r.mean_f1_r1)))
        .collect();
    let b0_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (x(r.k as f64), y_b0(r.mean_betti0)))
        .collect();

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{mt}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        w - mr,
        w - mr,
        mt + plot_h
    ));
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        w - mr,
        mt + plot_h
    ));
    // y ticks: f1 left (0..1), betti0 right
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let yy = y_f1(v);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>\n",
            ml - 6.0,
            yy + 4.0
        ));
        let bv = v * b0_max;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\">{bv:.1}</text>\n",
            w - mr + 6.0,
            y_b0(bv) + 4.0
        ));
    }
    // x ticks at each measured K
    for r in rows {
        let xx = x(r.k as f64);
        s.push_str(&format!(
            "<text x=\"{xx:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            mt + plot_h + 16.0,
            r.k
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">samples K</text>\n",
        ml + plot_w / 2.0,
        h - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">F1 at R=1</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(90 {} {})\" text-anchor=\"middle\">Betti-0</text>\n",
        w - 14.0,
        mt + plot_h / 2.0,
        w - 14.0,
        mt + plot_h / 2.0
    ));
    // series
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
        poly(&f1_pts)
    ));
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>\n",
        poly(&b0_pts)
    ));
    for (px, py) in &f1_pts {
        s.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"#1f77b4\"/>\n"
        ));
    }
    for (px, py) in &b0_pts {
        s.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"#d62728\"/>\n"
        ));
    }
    // legend
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"#1f77b4\">F1@R=1</text>\n",
        ml + 10.0,
        mt + 14.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"#d62728\">Betti-0</text>\n",
        ml + 10.0,
        mt + 30.0
    ));
    s.push_str("</svg>\n");
    s
}
