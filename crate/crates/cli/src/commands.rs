use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use emomtl_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use emomtl_core::data::{generate_corpus, load_manifest, split_corpus, write_split, Splits, Utterance};
use emomtl_core::evalkit::{evaluate, render_table, run_ablation, AblationGrid, TableKind};
use emomtl_core::gradcheck::{run_grad_checks, GRAD_CHECK_TOLERANCE};
use emomtl_core::model::ModelDims;
use emomtl_core::trainer::{fit, EpochLog, TrainConfig, TrainState};

use crate::config::CliConfig;
use crate::error::CliError;

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const DEV_MANIFEST: &str = "dev.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_LOG_FILE: &str = "run.json";

/// Everything a training run directory records besides the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub train_manifest: PathBuf,
    pub epochs: Vec<EpochLog>,
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Validation(format!(
            "refusing to overwrite {} (pass --force to replace it)",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// A directory means its manifest called `default_name`; a file is taken as is.
fn resolve_manifest(data: &Path, default_name: &str) -> Result<PathBuf, CliError> {
    let path = if data.is_dir() { data.join(default_name) } else { data.to_path_buf() };
    require_exists(&path, "manifest")?;
    Ok(path)
}

pub fn generate_data(cfg: &CliConfig, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.generator.validate()?;
    let manifests = [TRAIN_MANIFEST, DEV_MANIFEST, TEST_MANIFEST].map(|m| out.join(m));
    let mut outputs = manifests.to_vec();
    outputs.push(out.join("generator.json"));
    refuse_existing(&outputs, force)?;
    create_dir(out)?;

    let corpus = generate_corpus(&cfg.generator)?;
    let splits = split_corpus(corpus, &cfg.generator);
    for (name, utts) in [
        (TRAIN_MANIFEST, &splits.train),
        (DEV_MANIFEST, &splits.dev),
        (TEST_MANIFEST, &splits.test),
    ] {
        let path = write_split(out, name, utts)?;
        println!("{}: {} utterances", path.display(), utts.len());
    }
    write_json(
        &out.join("generator.json"),
        &json!({ "seed": cfg.generator.seed, "generator": cfg.generator }),
    )?;
    println!("seed {}", cfg.generator.seed);
    Ok(())
}

pub fn train(cfg: &CliConfig, data: &Path, out: &Path, force: bool, resume: bool) -> Result<(), CliError> {
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let manifest = resolve_manifest(data, TRAIN_MANIFEST)?;
    let corpus = load_manifest(&manifest)?;
    let dims = ModelDims::infer(&corpus, &tcfg.model)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(RUN_LOG_FILE);

    let (mut state, mut epochs) = if resume {
        require_exists(&ckpt_path, "checkpoint")?;
        let ckpt = load_checkpoint(&ckpt_path)?;
        ckpt.ensure_compatible(&tcfg, &dims)?;
        let mut prior: Vec<EpochLog> = if log_path.exists() {
            read_json::<RunLog>(&log_path)?.epochs
        } else {
            Vec::new()
        };
        prior.retain(|e| e.epoch <= ckpt.state.epoch);
        log::info!("resuming {} from epoch {}", ckpt_path.display(), ckpt.state.epoch);
        (ckpt.state, prior)
    } else {
        refuse_existing(&[ckpt_path.clone(), log_path.clone()], force)?;
        create_dir(out)?;
        (TrainState::new(&dims, tcfg.seed), Vec::new())
    };

    let mut run = RunLog {
        seed: tcfg.seed,
        config_hash: format!("{:016x}", tcfg.config_hash()),
        config: tcfg.clone(),
        train_manifest: manifest,
        epochs: Vec::new(),
    };
    fit(&mut state, &corpus, &tcfg, |entry, st| {
        epochs.push(entry.clone());
        log::info!("epoch {} loss {:.6}", entry.epoch, entry.loss.total);
        save_checkpoint(&ckpt_path, &Checkpoint::new(&tcfg, st))?;
        run.epochs.clone_from(&epochs);
        write_json(&log_path, &run).map_err(|e| emomtl_core::Error::Format(e.to_string()))
    })?;
    if run.epochs.is_empty() {
        // Nothing left to train; still leave a complete run directory.
        run.epochs = epochs;
        save_checkpoint(&ckpt_path, &Checkpoint::new(&tcfg, &state))?;
        write_json(&log_path, &run)?;
    }
    match run.epochs.last() {
        Some(last) => println!("seed {} epoch {} loss {:.6}", tcfg.seed, last.epoch, last.loss.total),
        None => println!("seed {} no epochs trained", tcfg.seed),
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

pub fn evaluate_run(run_dir: &Path, data: &Path, out: Option<&Path>, force: bool) -> Result<(), CliError> {
    let log_path = run_dir.join(RUN_LOG_FILE);
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    require_exists(&log_path, "run log")?;
    require_exists(&ckpt_path, "checkpoint")?;
    let run: RunLog = read_json(&log_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    ckpt.ensure_compatible(&run.config, &ckpt.dims())?;

    let manifest = resolve_manifest(data, TEST_MANIFEST)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = manifest.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            run_dir.join(format!("metrics_{stem}.json"))
        }
    };
    refuse_existing(std::slice::from_ref(&out), force)?;
    let utts = load_manifest(&manifest)?;
    let report = evaluate(&ckpt.state.params, &run.config.plan(), &utts)?;
    let flat = report.flat();
    for (k, v) in &flat {
        println!("{k:<20} {v:.4}");
    }
    write_json(
        &out,
        &json!({
            "seed": run.seed,
            "checkpoint_epoch": ckpt.state.epoch,
            "manifest": manifest,
            "metrics": flat,
            "report": report,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn kind_name(kind: TableKind) -> &'static str {
    match kind {
        TableKind::Components => "components",
        TableKind::Tasks => "tasks",
        TableKind::Fusion => "fusion",
    }
}

fn build_grid(kind: TableKind, full: &TrainConfig) -> AblationGrid {
    match kind {
        TableKind::Components => AblationGrid::components(full),
        TableKind::Tasks => AblationGrid::tasks(full),
        TableKind::Fusion => AblationGrid::fusion(full),
    }
}

fn ablation_data(cfg: &CliConfig, data: Option<&Path>) -> Result<(Vec<Utterance>, Vec<Utterance>), CliError> {
    match data {
        Some(dir) => {
            let train = load_manifest(&resolve_manifest(&dir.join(TRAIN_MANIFEST), TRAIN_MANIFEST)?)?;
            let test = load_manifest(&resolve_manifest(&dir.join(TEST_MANIFEST), TEST_MANIFEST)?)?;
            Ok((train, test))
        }
        None => {
            cfg.generator.validate()?;
            let Splits { train, test, .. } = split_corpus(generate_corpus(&cfg.generator)?, &cfg.generator);
            Ok((train, test))
        }
    }
}

pub fn ablate(cfg: &CliConfig, data: Option<&Path>, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let full = cfg.train_config();
    let seeds = &cfg.ablate.seeds;
    let grids: Vec<AblationGrid> = cfg.ablate.grids.iter().map(|&k| build_grid(k, &full)).collect();

    let mut outputs = Vec::new();
    for g in &grids {
        let name = kind_name(g.kind);
        outputs.push(out.join(format!("table_{name}.txt")));
        outputs.push(out.join(format!("table_{name}.json")));
        for c in &g.configs {
            for s in seeds {
                outputs.push(out.join("runs").join(name).join(format!("{}_seed{s}.json", c.name)));
            }
        }
    }
    refuse_existing(&outputs, force)?;

    let (train_set, test_set) = ablation_data(cfg, data)?;
    log::info!(
        "ablation on {} train / {} test utterances, seeds {seeds:?}",
        train_set.len(),
        test_set.len()
    );
    for grid in &grids {
        let name = kind_name(grid.kind);
        let table = run_ablation(grid, &train_set, &test_set, seeds)?;
        let text = render_table(&table);
        print!("{text}");
        let run_dir = out.join("runs").join(name);
        create_dir(&run_dir)?;
        write_text(&out.join(format!("table_{name}.txt")), &text)?;
        write_json(&out.join(format!("table_{name}.json")), &table)?;
        for row in &table.rows {
            for r in &row.runs {
                write_json(
                    &run_dir.join(format!("{}_seed{}.json", row.name, r.seed)),
                    &json!({ "config": row.name, "seed": r.seed, "metrics": r.metrics.flat() }),
                )?;
            }
        }
    }
    Ok(())
}

pub fn grad_check(points: usize, seed: u64, out: Option<&Path>, force: bool) -> Result<(), CliError> {
    if points == 0 {
        return Err(CliError::Validation("--points must be at least 1".into()));
    }
    if let Some(p) = out {
        refuse_existing(&[p.to_path_buf()], force)?;
    }
    let reports = run_grad_checks(points, seed, GRAD_CHECK_TOLERANCE)?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(p) = out {
        write_json(p, &json!({ "seed": seed, "points": points, "reports": reports }))?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("seed {seed}, {points} points per op");
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    Ok(())
}
