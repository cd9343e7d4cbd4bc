//! The subcommands, as library functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use cotrain_core::data::{generate, split, Dataset, DatasetSplit};
use cotrain_core::schedule::RampConfig;
use cotrain_core::segnet::SegModel;
use cotrain_core::trainer::{evaluate, run_probe, train, CoTrainConfig, EvalScores, Method, ProbeCurve, TrainOutcome};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::records::{self, GroupSummary};

pub const RECORDS_FILE: &str = "records.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.ini";
pub const REPRO_FILE: &str = "reproducibility.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the resolved configuration and the block that identifies the run.
pub fn write_provenance(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let block = format!(
        "config_sha256 = {}\nseed = {}\nmethod = {}\ndata_seed = {}\nversion = {} {}\n",
        config_hash(cfg),
        cfg.train.seed,
        cfg.train.method,
        cfg.synth.seed,
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
    );
    fs::write(dir.join(REPRO_FILE), block)?;
    Ok(())
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| cfg.out_dir.join("data"))
}

pub fn gen_data(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = data_dir(cfg);
    let data = generate(&cfg.synth)?;
    data.save(&dir)?;
    write_provenance(cfg, &cfg.out_dir)?;
    log::info!("wrote {} train and {} validation images to {}", data.train.len(), data.val.len(), dir.display());
    Ok(dir)
}

/// The configured dataset directory if it exists, otherwise a fresh in-memory generation.
pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.data_dir {
        Some(dir) if dir.join("manifest.csv").exists() => Ok(Dataset::load(dir, cfg.synth.num_classes)?),
        Some(dir) => {
            log::warn!("{} holds no dataset; generating in memory", dir.display());
            Ok(generate(&cfg.synth)?)
        }
        None => Ok(generate(&cfg.synth)?),
    }
}

fn checkpoint_path(dir: &Path, tag: &str, model: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{tag}_model{model}.ckpt"))
}

fn save_models(dir: &Path, tag: &str, models: &[SegModel]) -> CliResult<()> {
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    for (i, m) in models.iter().enumerate() {
        m.save(&checkpoint_path(dir, tag, i))?;
    }
    Ok(())
}

/// Trains on an existing split and writes records, timing and checkpoints under `dir`.
pub fn train_on(cfg: &ExperimentConfig, sp: &DatasetSplit, dir: &Path) -> CliResult<TrainOutcome> {
    write_provenance(cfg, dir)?;
    fs::write(dir.join("split.csv"), sp.manifest())?;
    let every = cfg.checkpoint_every;
    let mut hook = |r: &cotrain_core::trainer::EpochRecord, models: &[SegModel]| -> cotrain_core::Result<()> {
        if r.epoch.is_multiple_of(every) {
            save_models(dir, &format!("epoch{:03}", r.epoch), models).map_err(|e| match e {
                CliError::Core(e) => e,
                other => cotrain_core::Error::Io(std::io::Error::other(other.to_string())),
            })?;
        }
        Ok(())
    };
    let out = train(&cfg.train, sp, &mut hook)?;
    records::write_records(&dir.join(RECORDS_FILE), &out.records, sp.num_classes)?;
    records::write_timing(&dir.join(TIMING_FILE), &out.epoch_seconds)?;
    if let Some(diag) = &out.aborted {
        fs::write(dir.join("abort.txt"), format!("{diag}\n"))?;
        save_models(dir, "aborted", &out.models)?;
        return Err(CliError::Aborted(diag.clone()));
    }
    save_models(dir, "final", &out.models)?;
    Ok(out)
}

pub fn train_run(cfg: &ExperimentConfig) -> CliResult<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let sp = split(&data, cfg.train.labeled_ratio, cfg.train.seed)?;
    train_on(cfg, &sp, &cfg.out_dir)
}

/// Loads `final_model<i>.ckpt` for consecutive `i` starting at 0.
pub fn load_final_models(dir: &Path) -> CliResult<Vec<SegModel>> {
    let mut models = Vec::new();
    loop {
        let path = checkpoint_path(dir, "final", models.len());
        if !path.exists() {
            break;
        }
        models.push(SegModel::load(&path)?);
    }
    if models.is_empty() {
        return Err(CliError::MissingCheckpoint(checkpoint_path(dir, "final", 0)));
    }
    Ok(models)
}

/// Per-class validation table as CSV text.
pub fn scores_csv(scores: &EvalScores) -> String {
    let k = scores.per_model.len() as f64;
    let classes = scores.vote.dsc.len();
    let hd_avg: Vec<f64> =
        (0..classes).map(|c| scores.per_model.iter().map(|s| s.hd[c]).sum::<f64>() / k).collect();
    let mut out = String::from("class,dsc_avg,dsc_vote,hd_avg,hd_vote\n");
    let dsc_avg = scores.dsc_avg();
    for c in 0..classes {
        out.push_str(&format!("{},{},{},{},{}\n", c + 1, dsc_avg[c], scores.vote.dsc[c], hd_avg[c], scores.vote.hd[c]));
    }
    out.push_str(&format!(
        "mean,{},{},{},{}\n",
        scores.dsc_avg_mean(),
        scores.vote.mean_dsc(),
        scores.hd_avg(),
        scores.vote.mean_hd()
    ));
    out
}

/// Scores the final checkpoints under the output directory on the validation set.
pub fn evaluate_run(cfg: &ExperimentConfig) -> CliResult<(EvalScores, String)> {
    let models = load_final_models(&cfg.out_dir)?;
    let data = load_dataset(cfg)?;
    let sp = split(&data, cfg.train.labeled_ratio, cfg.train.seed)?;
    let refs: Vec<&SegModel> = models.iter().collect();
    let scores = evaluate(&refs, &sp.validation, sp.num_classes)?;
    let text = scores_csv(&scores);
    Ok((scores, text))
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: ExperimentConfig,
}

fn ratio_tag(r: f64) -> String {
    format!("{r}").replace('.', "p")
}

/// Expands the `[ablate]` grid. Baselines train a single model, so the
/// views axis applies to co-training methods only.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let a = &cfg.ablate;
    let views = if a.views.is_empty() { vec![cfg.train.views] } else { a.views.clone() };
    let ratios = if a.labeled_ratios.is_empty() { vec![cfg.train.labeled_ratio] } else { a.labeled_ratios.clone() };
    let mut cells = Vec::new();
    for &method in &a.methods {
        let method_views = if method.is_cotraining() { views.clone() } else { vec![cfg.train.views] };
        for &k in &method_views {
            for &ratio in &ratios {
                for &seed in &a.seeds {
                    let mut name = method.tag().to_string();
                    if a.views.len() > 1 && method.is_cotraining() {
                        name.push_str(&format!("_k{k}"));
                    }
                    if a.labeled_ratios.len() > 1 {
                        name.push_str(&format!("_la{}", ratio_tag(ratio)));
                    }
                    name.push_str(&format!("_seed{seed}"));
                    let mut c = cfg.clone();
                    c.train.method = method;
                    c.train.views = k;
                    c.train.labeled_ratio = ratio;
                    c.train.seed = seed;
                    c.out_dir = cfg.out_dir.join("cells").join(&name);
                    cells.push(Cell { name, config: c });
                }
            }
        }
    }
    cells
}

/// Worker count from `COTRAIN_THREADS`, defaulting to the available cores.
pub fn worker_count(cells: usize) -> usize {
    let cap = std::env::var("COTRAIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(cells).max(1)
}

/// Runs `job` over `items` on up to `workers` threads; results keep item order.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, job: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = job(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every item ran")).collect()
}

fn ramps(train: &CoTrainConfig) -> Vec<(&'static str, RampConfig)> {
    vec![
        ("cot", train.cot_ramp),
        ("div", train.div_ramp),
        ("reference", RampConfig::new(1.0, 20, 80).expect("valid ramp")),
    ]
}

/// Trains every cell, copies the record files to `records/` and summarizes them.
pub fn ablate(cfg: &ExperimentConfig) -> CliResult<Vec<GroupSummary>> {
    let cells = ablation_cells(cfg);
    if cells.is_empty() {
        return Err(CliError::Config { line: None, message: "the ablation grid is empty".into() });
    }
    write_provenance(cfg, &cfg.out_dir)?;
    let data = load_dataset(cfg)?;
    let workers = worker_count(cells.len());
    log::info!("{} cells on {workers} worker(s)", cells.len());
    let results = parallel_map(&cells, workers, |cell| -> CliResult<()> {
        let sp = split(&data, cell.config.train.labeled_ratio, cell.config.train.seed)?;
        let out = train_on(&cell.config, &sp, &cell.config.out_dir)?;
        if let Some(last) = out.records.last() {
            log::info!("{}: dsc vote {:.2} avg {:.2}", cell.name, last.dsc_vote_mean(), last.dsc_avg_mean());
        }
        Ok(())
    });
    for r in results {
        r?;
    }
    let rec_dir = cfg.out_dir.join("records");
    fs::create_dir_all(&rec_dir)?;
    let mut files = Vec::new();
    for cell in &cells {
        let dst = rec_dir.join(format!("{}.csv", cell.name));
        fs::copy(cell.config.out_dir.join(RECORDS_FILE), &dst)?;
        files.push(dst);
    }
    records::summarize(&files, &ramps(&cfg.train), cfg.train.epochs, &cfg.out_dir)
}

/// Fits the reference and runs one diversity-only probe per eps.
pub fn probe(cfg: &ExperimentConfig) -> CliResult<Vec<ProbeCurve>> {
    write_provenance(cfg, &cfg.out_dir)?;
    let data = load_dataset(cfg)?;
    let (reference, curves) = run_probe(&cfg.train, &data)?;
    save_models(&cfg.out_dir, "reference", std::slice::from_ref(&reference))?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("probe.csv"))?;
    w.write_record(["eps", "epoch", "trainee_dsc", "reference_dsc", "l_div"])?;
    for c in &curves {
        for p in &c.points {
            w.write_record([
                c.eps.to_string(),
                p.epoch.to_string(),
                p.trainee_dsc.to_string(),
                c.reference_dsc.to_string(),
                p.l_div.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("probe_summary.csv"))?;
    w.write_record(["eps", "reference_dsc", "final_trainee_dsc", "final_gap"])?;
    for c in &curves {
        let last = c.points.last().map_or(f64::NAN, |p| p.trainee_dsc);
        w.write_record([c.eps.to_string(), c.reference_dsc.to_string(), last.to_string(), c.final_gap().to_string()])?;
    }
    w.flush()?;
    Ok(curves)
}

pub fn summarize(cfg: &ExperimentConfig, files: &[PathBuf]) -> CliResult<Vec<GroupSummary>> {
    records::summarize(files, &ramps(&cfg.train), cfg.train.epochs.max(100), &cfg.out_dir)
}

/// Applies `--seed` and `--method` overrides, to the ablation grid as well.
pub fn apply_overrides(cfg: &mut ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>, method: Option<Method>) {
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
        cfg.ablate.seeds = vec![seed];
    }
    if let Some(m) = method {
        cfg.train.method = m;
        cfg.ablate.methods = vec![m];
    }
}
