use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use slotsam::checkpoint::{save_state, Checkpoint};
use slotsam::config::RunConfig;
use slotsam::data::{Dataset, Split};
use slotsam::error::Error;
use slotsam::io::{load_dataset, save_dataset, save_rgb_png};
use slotsam::metrics::{evaluate, sample_panel, slot_ari, ModelPredictor};
use slotsam::training::{fit, init_state, EpochRecord, StageSelection, TrainState};

use crate::{Cli, Command, Common};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::UnknownKey(_)) => 2,
            CliError::Core(Error::Numerical(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// File, then SLOTSAM_RUN_DIR, then flags.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    }
    .with_env_run_dir();
    if let Some(dir) = &common.run_dir {
        cfg.run_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("data")
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("checkpoints")
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn split_named(name: &str) -> Split {
    Split::ALL.into_iter().find(|s| s.name() == name).expect("clap restricts split names")
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::GenData { out } => gen_data(&cfg, out.clone().unwrap_or_else(|| data_dir(&cfg)), cli.common.force),
        Command::Train { stage, resume } => train(&cfg, *stage, *resume, cli.common.force),
        Command::Eval {
            checkpoint,
            role,
            prompts,
            split,
            out,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| checkpoint_dir(&cfg).join("latest.ckpt"));
            let split = split_named(split);
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.run_dir.join("eval").join(format!("{role}_{}.json", split.name())));
            eval(&cfg, &ckpt, role, prompts, split, &out)
        }
        Command::Viz {
            checkpoint,
            role,
            ids,
            split,
            out,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| checkpoint_dir(&cfg).join("latest.ckpt"));
            let out = out.clone().unwrap_or_else(|| cfg.run_dir.join("viz"));
            viz(&cfg, &ckpt, role, ids, split_named(split), &out)
        }
    }
}

fn gen_data(cfg: &RunConfig, out: PathBuf, force: bool) -> Result<()> {
    if is_non_empty_dir(&out) {
        if !force {
            return Err(CliError::Usage(format!("{} is not empty; pass --force to regenerate", out.display())));
        }
        fs::remove_dir_all(&out)?;
    }
    let data = Dataset::generate(cfg.seed, &cfg.data, &cfg.scene, &cfg.shift)?;
    let manifest = save_dataset(&data, cfg.seed, &out)?;
    println!("wrote {} samples to {} (manifest {})", manifest.len(), out.display(), &manifest.hash()[..16]);
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.check_config(cfg)?;
    Ok(ck)
}

fn render_epoch(cfg: &RunConfig, state: &TrainState, data: &Dataset, epoch: usize) -> slotsam::error::Result<()> {
    let dir = cfg.run_dir.join("viz");
    fs::create_dir_all(&dir)?;
    let model = cfg.model();
    for (i, s) in data.target_val.iter().take(cfg.eval.viz_samples).enumerate() {
        let panel = sample_panel(&model, &state.encoder, &state.triad.student, s, &cfg.prompt)?;
        let path = dir.join(format!("epoch_{epoch:03}_val_{i:03}.png"));
        save_rgb_png(&panel, &path)?;
    }
    Ok(())
}

fn train(cfg: &RunConfig, selection: StageSelection, resume: bool, force: bool) -> Result<()> {
    let data = load_dataset(&data_dir(cfg))?;
    let ckdir = checkpoint_dir(cfg);
    let latest = ckdir.join("latest.ckpt");
    let best = ckdir.join("best.ckpt");
    let report_path = cfg.run_dir.join("report.jsonl");
    let hash = cfg.hash();

    let state = if resume || selection == StageSelection::Stage2 {
        if !latest.exists() {
            return Err(CliError::Usage(format!("no checkpoint at {} to continue from", latest.display())));
        }
        load_checkpoint(cfg, &latest)?.state
    } else {
        if latest.exists() {
            if !force {
                return Err(CliError::Usage(format!(
                    "{} already holds a checkpoint; pass --resume or --force",
                    cfg.run_dir.display()
                )));
            }
            for d in ["checkpoints", "viz", "eval"] {
                let p = cfg.run_dir.join(d);
                if p.exists() {
                    fs::remove_dir_all(p)?;
                }
            }
        }
        init_state(cfg)?
    };
    fs::create_dir_all(&ckdir)?;

    let mut state = if matches!(selection, StageSelection::Stage1 | StageSelection::All) {
        let s = fit(cfg, &data, StageSelection::Stage1, Some(state), &mut |_, _| Ok(()))?;
        save_state(&latest, &hash, &s)?;
        if s.report.epochs.is_empty() {
            save_state(&best, &hash, &s)?;
        }
        s.report.save_jsonl(&report_path)?;
        eprintln!(
            "stage 1 done: rec {:.4} -> {:.4}",
            s.report.stage1_rec_initial.unwrap_or(f64::NAN),
            s.report.stage1_rec_final.unwrap_or(f64::NAN)
        );
        s
    } else {
        state
    };

    if matches!(selection, StageSelection::Stage2 | StageSelection::All) {
        let mut observer = |s: &TrainState, rec: &EpochRecord| -> slotsam::error::Result<()> {
            save_state(&latest, &hash, s)?;
            if rec.bootstrapped {
                save_state(&best, &hash, s)?;
            }
            s.report.save_jsonl(&report_path)?;
            eprintln!(
                "epoch {:>3} {:?} loss {:.4} val box mIoU {:.4}{}",
                rec.epoch,
                rec.stage,
                rec.loss,
                rec.val_miou,
                if rec.bootstrapped { " (bootstrap)" } else { "" }
            );
            if cfg.eval.viz_every > 0 && (rec.epoch + 1) % cfg.eval.viz_every == 0 {
                render_epoch(cfg, s, &data, rec.epoch)?;
            }
            Ok(())
        };
        state = fit(cfg, &data, StageSelection::Stage2, Some(state), &mut observer)?;
        if state.best_val.is_some() && !best.exists() {
            save_state(&best, &hash, &state)?;
        }
    }
    save_state(&latest, &hash, &state)?;
    state.report.save_jsonl(&report_path)?;
    println!(
        "trained to stage `{}` in {:.1}s; {} bootstrap events; report at {}",
        state.stage_tag(),
        state.report.wall_time_secs,
        state.report.bootstrap_events.len(),
        report_path.display()
    );
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    ckpt: &Path,
    role: &str,
    prompts: &[slotsam::scenes::PromptKind],
    split: Split,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint(cfg, ckpt)?;
    let data = load_dataset(&data_dir(cfg))?;
    let params = ck.role(role)?;
    let model = cfg.model();
    let mut kinds: Vec<_> = if prompts.is_empty() {
        cfg.eval.prompt_kinds.clone()
    } else {
        prompts.to_vec()
    };
    kinds.sort();
    kinds.dedup();
    let samples = data.split(split);
    let predictor = ModelPredictor {
        config: &model,
        encoder: &ck.state.encoder,
        params,
    };
    let mut report = evaluate(&predictor, samples, &kinds, &cfg.prompt, &ck.config_hash, cfg.seed)?;
    report.ari = Some(slot_ari(&model, &ck.state.encoder, params, samples, cfg.eval.ignore_background)?);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(out, json + "\n")?;
    fs::write(out.with_extension("tsv"), report.table())?;
    for (k, v) in &report.miou {
        println!("{role} {} {} mIoU {:.4}", split.name(), k.name(), v);
    }
    if let Some(a) = &report.ari {
        println!("{role} {} foreground ARI {:.4} ± {:.4} (n={})", split.name(), a.mean, a.std, a.count);
    }
    Ok(())
}

fn viz(cfg: &RunConfig, ckpt: &Path, role: &str, ids: &[usize], split: Split, out: &Path) -> Result<()> {
    let ck = load_checkpoint(cfg, ckpt)?;
    let data = load_dataset(&data_dir(cfg))?;
    let samples = data.split(split);
    let ids: BTreeSet<usize> = ids.iter().copied().collect();
    if let Some(bad) = ids.iter().find(|&&i| i >= samples.len()) {
        return Err(CliError::Usage(format!(
            "unknown sample id {bad}: {} has {} samples",
            split.name(),
            samples.len()
        )));
    }
    fs::create_dir_all(out)?;
    let params = ck.role(role)?;
    let model = cfg.model();
    for &id in &ids {
        let panel = sample_panel(&model, &ck.state.encoder, params, &samples[id], &cfg.prompt)?;
        let path = out.join(format!("{}_{id:06}_{role}.png", split.name()));
        save_rgb_png(&panel, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}
