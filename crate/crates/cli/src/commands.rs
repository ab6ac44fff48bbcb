use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use codebrain::checkpoint::Checkpoint;
use codebrain::config::{RunConfig, Targets};
use codebrain::pretrain::{
    epoch_usage_csv, planted_tokens, stage_one_csv, stage_two_csv, CheckpointPolicy, SsmTrainer, TokenizedSample,
    TokenizerTrainer,
};
use codebrain::probe::{extract_all, seed_study, Split};
use codebrain::signal::{load_record, patch, preprocess, save_record, synth_generate, PatchGrid};
use codebrain::ssm::{bench_backbones, bench_csv, doubling_ratio, Backbone};
use codebrain::tokenizer::{class_specific_ratio, observed_diversity, PreparedSample, Stream, TokenGrid, Tokenizer};
use rayon::prelude::*;
use serde_json::json;

use crate::svg::{line_plot, Series};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Missing(String),
    Diverged(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Missing(_) => 3,
            Self::Diverged(_) => 4,
            Self::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "invalid configuration: {m}"),
            Self::Missing(m) => write!(f, "missing prerequisite: {m}"),
            Self::Diverged(m) => write!(f, "numeric divergence: {m}"),
            Self::Other(m) => f.write_str(m),
        }
    }
}

impl From<codebrain::Error> for Failure {
    fn from(e: codebrain::Error) -> Self {
        use codebrain::Error as E;
        match e {
            E::InvalidArgument(m) => Self::Config(m),
            E::Divergence { .. } | E::NonFinite(_) => Self::Diverged(e.to_string()),
            other => Self::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Other(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::Other(format!("json error: {e}"))
    }
}

type Res<T = ()> = Result<T, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Res {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Res {
    write(path, serde_json::to_string_pretty(v)? + "\n")
}

/// Writes `<dir>/manifest.json` echoing the resolved run.
fn manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Res {
    write_json(&dir.join("manifest.json"), &json!({ "command": command, "run": cfg.to_json(), "details": extra }))
}

fn require_checkpoint(path: &Path, what: &str, hint: &str) -> Res<Checkpoint> {
    if !path.join("manifest.json").is_file() {
        return Err(Failure::Missing(format!("no {what} checkpoint at {}; run {hint} first", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn gen_data(cfg: &RunConfig, dry: bool) -> Res {
    let dir = cfg.data_dir();
    let n = cfg.data.records;
    let split = Split::random(n, 1.0 - cfg.val_fraction - cfg.test_fraction, cfg.val_fraction, cfg.seed)?;
    if dry {
        println!("would write {n} records to {}", dir.display());
        return Ok(());
    }
    let records = synth_generate(&cfg.data, cfg.seed)?;
    fs::create_dir_all(&dir)?;
    let mut listed = Vec::with_capacity(n);
    for (i, r) in records.iter().enumerate() {
        let file = format!("rec-{i:05}.eeg");
        save_record(r, &dir.join(&file))?;
        listed.push(json!({ "file": file, "label": r.label }));
    }
    let m = json!({
        "preset": cfg.preset,
        "seed": cfg.seed,
        "classes": cfg.data.classes.len(),
        "spec": cfg.data,
        "records": listed,
        "split": split,
    });
    write_json(&dir.join("manifest.json"), &m)?;
    println!(
        "wrote {n} records to {} (train {}, val {}, test {})",
        dir.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

struct Dataset {
    grids: Vec<PatchGrid>,
    labels: Vec<Option<i32>>,
    split: Split,
    classes: usize,
}

fn load_dataset(cfg: &RunConfig) -> Res<Dataset> {
    let dir = cfg.data_dir();
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Failure::Missing(format!("no dataset manifest at {}; run gen-data first", path.display())));
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
    let bad = |what: &str| Failure::Other(format!("{}: malformed {what}", path.display()));
    let files: Vec<PathBuf> = m["records"]
        .as_array()
        .ok_or_else(|| bad("records"))?
        .iter()
        .map(|r| r["file"].as_str().map(|f| dir.join(f)).ok_or_else(|| bad("record entry")))
        .collect::<Res<_>>()?;
    let split: Split = serde_json::from_value(m["split"].clone()).map_err(|_| bad("split"))?;
    split.validate(files.len())?;
    let classes = m["classes"].as_u64().ok_or_else(|| bad("classes"))? as usize;
    let loaded: Vec<(PatchGrid, Option<i32>)> = files
        .par_iter()
        .map(|f| {
            let raw = load_record(f)?;
            let grid = patch(&preprocess(&raw)?, 1.0)?;
            Ok((grid, raw.label))
        })
        .collect::<codebrain::Result<_>>()?;
    let (grids, labels): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    if let Some(g) = grids.first() {
        if g.patch_len != cfg.tokenizer.patch_len {
            return Err(Failure::Config(format!(
                "records give {}-sample patches, the models expect {}",
                g.patch_len, cfg.tokenizer.patch_len
            )));
        }
    }
    Ok(Dataset { grids, labels, split, classes })
}

fn progress(stage: &str, step: usize, total: usize, loss: Option<f64>) {
    match loss {
        Some(l) => eprintln!("{stage}: step {step}/{total} loss {l:.4}"),
        None => eprintln!("{stage}: step {step}/{total}"),
    }
}

pub fn train_tokenizer(cfg: &RunConfig, dry: bool) -> Res {
    let ds = load_dataset(cfg)?;
    let dir = cfg.out.join("tokenizer");
    let t = &cfg.tokenizer;
    let details = json!({
        "codebook_size": t.codebook_size,
        "code_dim": t.code_dim,
        "hidden": t.hidden,
        "train_records": ds.split.train.len(),
    });
    manifest(&dir, "train-tokenizer", cfg, details)?;
    if dry {
        println!("tokenizer: K={} D={} hidden={}", t.codebook_size, t.code_dim, t.hidden);
        return Ok(());
    }
    let data: Vec<PreparedSample> = ds
        .split
        .train
        .iter()
        .map(|&i| PreparedSample::new(&ds.grids[i], ds.labels[i]))
        .collect::<codebrain::Result<_>>()?;
    let mut tr = TokenizerTrainer::new(cfg.tokenizer.clone(), cfg.stage1.clone(), cfg.stage1.seed)?;
    tr.policy = CheckpointPolicy { dir: Some(dir.join("checkpoints")), every: cfg.checkpoint_every };
    let total = tr.train.total_steps(data.len())?;
    let chunk = (total / 10).max(1);
    let mut outcome = Ok(());
    while tr.step < total {
        if let Err(e) = tr.run(&data, Some((tr.step + chunk).min(total))) {
            outcome = Err(e);
            break;
        }
        progress("stage 1", tr.step, total, tr.history.last().map(|r| r.total));
    }
    write(&dir.join("stage1.csv"), stage_one_csv(&tr.history))?;
    write(&dir.join("epoch_usage.csv"), epoch_usage_csv(&tr.epochs))?;
    outcome?;
    tr.model.to_checkpoint().save(&dir.join("final"))?;
    write(&dir.join("usage_temporal.csv"), tr.model.temporal.usage_report().to_csv())?;
    write(&dir.join("usage_frequency.csv"), tr.model.frequency.usage_report().to_csv())?;
    println!("stage 1 finished after {} steps; checkpoint at {}", tr.step, dir.join("final").display());
    Ok(())
}

pub fn train_ssm(cfg: &RunConfig, dry: bool) -> Res {
    let tok = match cfg.targets {
        Targets::Tokenizer => {
            let ck = require_checkpoint(&cfg.tokenizer_path(), "stage-1 tokenizer", "train-tokenizer")?;
            let tok = Tokenizer::from_checkpoint(&ck)?;
            if tok.cfg.codebook_size != cfg.ssm.codebook_size || tok.cfg.patch_len != cfg.ssm.patch_len {
                return Err(Failure::Config(format!(
                    "tokenizer checkpoint has K={} and patch length {}, backbone expects K={} and {}",
                    tok.cfg.codebook_size, tok.cfg.patch_len, cfg.ssm.codebook_size, cfg.ssm.patch_len
                )));
            }
            Some(tok)
        }
        Targets::Planted => None,
    };
    let ds = load_dataset(cfg)?;
    let dir = cfg.out.join("ssm");
    let details = json!({
        "features": cfg.ssm.features,
        "codebook_size": cfg.ssm.codebook_size,
        "targets": cfg.targets,
        "train_records": ds.split.train.len(),
    });
    manifest(&dir, "train-ssm", cfg, details)?;
    if dry {
        return Ok(());
    }
    let data: Vec<TokenizedSample> = ds
        .split
        .train
        .par_iter()
        .map(|&i| {
            let g = &ds.grids[i];
            match &tok {
                Some(t) => TokenizedSample::from_tokenizer(t, g, ds.labels[i]),
                None => TokenizedSample::new(g, &planted_tokens(g)?, ds.labels[i]),
            }
        })
        .collect::<codebrain::Result<_>>()?;
    let mut tr = SsmTrainer::new(cfg.ssm.clone(), cfg.stage2.clone(), cfg.stage2.seed)?;
    tr.tokenizer_hash = tok.as_ref().map(|t| t.to_checkpoint().config_hash());
    tr.policy = CheckpointPolicy { dir: Some(dir.join("checkpoints")), every: cfg.checkpoint_every };
    let total = tr.train.total_steps(data.len())?;
    let chunk = (total / 10).max(1);
    let mut outcome = Ok(());
    while tr.step < total {
        if let Err(e) = tr.run(&data, Some((tr.step + chunk).min(total))) {
            outcome = Err(e);
            break;
        }
        progress("stage 2", tr.step, total, tr.history.last().map(|r| r.loss));
    }
    write(&dir.join("stage2.csv"), stage_two_csv(&tr.history))?;
    outcome?;
    tr.model.to_checkpoint().save(&dir.join("final"))?;
    println!("stage 2 finished after {} steps; checkpoint at {}", tr.step, dir.join("final").display());
    Ok(())
}

pub fn probe(cfg: &RunConfig, dry: bool) -> Res {
    let ck = require_checkpoint(&cfg.backbone_path(), "backbone", "train-ssm")?;
    let backbone = Backbone::from_checkpoint(&ck)?;
    let ds = load_dataset(cfg)?;
    let labels: Vec<usize> = ds
        .labels
        .iter()
        .map(|l| match l {
            Some(y) if *y >= 0 && (*y as usize) < ds.classes => Ok(*y as usize),
            _ => Err(Failure::Config(format!("probe needs labels in 0..{} on every record", ds.classes))),
        })
        .collect::<Res<_>>()?;
    let dir = cfg.out.join("probe");
    let seeds: Vec<u64> = (0..cfg.probe_seeds as u64).map(|i| cfg.probe.seed + i).collect();
    manifest(&dir, "probe", cfg, json!({ "seeds": seeds, "classes": ds.classes }))?;
    if dry {
        return Ok(());
    }
    let inputs = extract_all(&backbone, &ds.grids)?;
    let study = seed_study(&cfg.probe, &inputs, &labels, ds.classes, &ds.split, &seeds)?;
    write(&dir.join("seeds.csv"), study.to_csv())?;
    for (seed, r) in seeds.iter().zip(&study.reports) {
        write(&dir.join(format!("metrics_seed{seed}.csv")), r.to_csv())?;
        write(&dir.join(format!("confusion_seed{seed}.csv")), r.confusion_csv())?;
    }
    let (k, c) = (study.kappa(), study.control_kappa());
    write_json(
        &dir.join("metrics.json"),
        &json!({ "kappa": k, "control_kappa": c, "seeds": seeds, "reports": study.reports, "controls": study.controls }),
    )?;
    println!("kappa {:.4} +- {:.4} (shuffled labels {:.4} +- {:.4})", k.mean, k.std, c.mean, c.std);
    Ok(())
}

fn read_columns(path: &Path, cols: &[&str]) -> Res<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let idx: Vec<usize> = cols
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Failure::Other(format!("{}: no column {c}", path.display())))
        })
        .collect::<Res<_>>()?;
    let mut out = vec![Vec::new(); cols.len()];
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        for (o, &i) in out.iter_mut().zip(&idx) {
            o.push(fields.get(i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN));
        }
    }
    Ok(out)
}

/// Plots `ys` against column `x` of a CSV, if the CSV exists.
fn plot_csv(src: &Path, dst: &Path, title: &str, x: &str, ys: &[&str]) -> Res<bool> {
    if !src.is_file() {
        return Ok(false);
    }
    let mut cols = vec![x];
    cols.extend_from_slice(ys);
    let data = read_columns(src, &cols)?;
    let series: Vec<Series> = ys
        .iter()
        .enumerate()
        .map(|(j, name)| Series {
            name: name.to_string(),
            points: data[0].iter().zip(&data[j + 1]).map(|(&a, &b)| (a, b)).collect(),
        })
        .collect();
    write(dst, line_plot(title, x, &series))?;
    Ok(true)
}

pub fn analyze(cfg: &RunConfig, dry: bool) -> Res {
    let ck = require_checkpoint(&cfg.tokenizer_path(), "stage-1 tokenizer", "train-tokenizer")?;
    let tok = Tokenizer::from_checkpoint(&ck)?;
    let ds = load_dataset(cfg)?;
    let dir = cfg.out.join("analyze");
    manifest(&dir, "analyze", cfg, json!({ "tau": cfg.tau, "records": ds.grids.len() }))?;
    if dry {
        return Ok(());
    }
    let k = tok.cfg.codebook_size;
    let grids: Vec<TokenGrid> = ds.grids.par_iter().map(|g| tok.tokenize(g)).collect::<codebrain::Result<_>>()?;

    let (mut count_t, mut count_f) = (vec![0u64; k], vec![0u64; k]);
    for g in &grids {
        g.z_t.iter().for_each(|&z| count_t[z] += 1);
        g.z_f.iter().for_each(|&z| count_f[z] += 1);
    }
    let mut usage = String::from("code,temporal,frequency\n");
    for i in 0..k {
        usage.push_str(&format!("{i},{},{}\n", count_t[i], count_f[i]));
    }
    write(&dir.join("usage.csv"), usage)?;

    let labeled: Vec<(TokenGrid, usize)> = grids
        .iter()
        .zip(&ds.labels)
        .filter_map(|(g, l)| l.filter(|&y| y >= 0).map(|y| (g.clone(), y as usize)))
        .collect();
    let streams = [("temporal", Stream::Temporal, k), ("frequency", Stream::Frequency, k), ("dual", Stream::Dual, k * k)];
    let mut dominance = String::from("stream,tau,class_specific_ratio,used_tokens\n");
    let mut diversity = String::from("stream,observed,capacity\n");
    println!("{:<10} {:>9} {:>10} {:>16}", "stream", "observed", "capacity", "class-specific");
    for (name, s, capacity) in streams {
        let observed = observed_diversity(&grids, s, k);
        diversity.push_str(&format!("{name},{observed},{capacity}\n"));
        let ratio = if labeled.is_empty() { None } else { Some(class_specific_ratio(&labeled, s, k, cfg.tau)?) };
        if let Some(r) = ratio {
            dominance.push_str(&format!("{name},{},{r},{observed}\n", cfg.tau));
        }
        let shown = ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into());
        println!("{name:<10} {observed:>9} {capacity:>10} {shown:>16}");
    }
    write(&dir.join("diversity.csv"), diversity)?;
    write(&dir.join("dominance.csv"), dominance)?;

    let tdir = cfg.out.join("tokenizer");
    let sdir = cfg.out.join("ssm");
    plot_csv(
        &tdir.join("stage1.csv"),
        &dir.join("stage1_loss.svg"),
        "Stage-1 loss",
        "step",
        &["total", "freq_recon", "temporal_recon", "contrastive", "codebook"],
    )?;
    plot_csv(&tdir.join("stage1.csv"), &dir.join("unused_codes.svg"), "Unused codes per epoch window", "step", &["unused_t", "unused_f"])?;
    plot_csv(&tdir.join("epoch_usage.csv"), &dir.join("epoch_unused.svg"), "Unused codes at epoch end", "epoch", &["unused_t", "unused_f"])?;
    plot_csv(&sdir.join("stage2.csv"), &dir.join("stage2_loss.svg"), "Stage-2 masked loss", "step", &["loss"])?;
    plot_csv(&sdir.join("stage2.csv"), &dir.join("stage2_accuracy.svg"), "Stage-2 masked accuracy", "step", &["acc_t", "acc_f"])?;
    println!("analysis written to {}", dir.display());
    Ok(())
}

pub fn bench(cfg: &RunConfig, dry: bool) -> Res {
    let dir = cfg.out.join("bench");
    manifest(&dir, "bench", cfg, json!({}))?;
    if dry {
        return Ok(());
    }
    let rows = bench_backbones(&cfg.bench)?;
    write(&dir.join("bench.csv"), bench_csv(&rows))?;
    let mut ratios = String::from("backbone,doubling_ratio\n");
    let mut series = Vec::new();
    for name in ["sgconv", "direct", "attention"] {
        let pts: Vec<(f64, f64)> =
            rows.iter().filter(|r| r.backbone == name).map(|r| ((r.seq_len as f64).log2(), r.wall_ms)).collect();
        if pts.is_empty() {
            continue;
        }
        if let Some(r) = doubling_ratio(&rows, name) {
            ratios.push_str(&format!("{name},{r}\n"));
            println!("{name:<10} t(2L)/t(L) = {r:.3}");
        }
        series.push(Series { name: name.into(), points: pts });
    }
    write(&dir.join("ratios.csv"), ratios)?;
    write(&dir.join("bench.svg"), line_plot("Wall time (ms)", "log2 L", &series))?;
    println!("benchmark written to {}", dir.display());
    Ok(())
}
