use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use segattack::attacks::run_attack;
use segattack::harness::{emit_plots, evaluate_model, read_report, write_csv, write_report, Experiment};
use segattack::models::{load_checkpoint, save_checkpoint, train_with_progress, Checkpoint};
use segattack::synthdata::{generate_dataset, load_dataset, save_dataset, Dataset};

mod config;
mod ppm;
mod table;

use config::{Layout, RunConfig};

#[derive(Parser)]
#[command(
    name = "segattack",
    version,
    about = "Transferable adversarial attacks on toy segmentation models"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Replace the dataset seed and every model's training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data generation, training and experiment cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding `experiment.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval datasets.
    GenData,
    /// Train models by name (all configured models if none are given).
    Train { models: Vec<String> },
    /// Attack one eval sample and write images, predictions and the log.
    Attack {
        /// Attack name from the config.
        #[arg(long, default_value = "two_stage")]
        attack: String,
        /// Eval sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Attack seed.
        #[arg(long = "attack-seed", default_value_t = 0)]
        attack_seed: u64,
    },
    /// Run the transfer experiment and ablation; write reports, CSV and plots.
    Evaluate,
    /// Print a saved report as a table.
    Report {
        path: PathBuf,
        /// Emit a pipe table.
        #[arg(long)]
        markdown: bool,
    },
}

fn resolve(cli: &Cli) -> Result<(RunConfig, Layout)> {
    let mut cfg = if cli.config.exists() {
        RunConfig::load(&cli.config)?
    } else if cli.config == Path::new("configs/default.toml") {
        RunConfig::default()
    } else {
        bail!("config file {} does not exist", cli.config.display());
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.experiment.output_dir = out.clone();
    }
    cfg.validate()
        .with_context(|| format!("invalid config {}", cli.config.display()))?;
    let layout = Layout::new(cfg.experiment.output_dir.clone());
    Ok((cfg, layout))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_data(path: &Path, config: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!(
            "dataset {} not found; run `segattack gen-data --config {}` first",
            path.display(),
            config.display()
        );
    }
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(layout: &Layout, name: &str, config: &Path) -> Result<Checkpoint> {
    let path = layout.checkpoint(name);
    if !path.exists() {
        bail!(
            "checkpoint {} not found; run `segattack train --config {} {name}` first",
            path.display(),
            config.display()
        );
    }
    let ck = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(
        ck.name() == name,
        "{} holds model {}, expected {name}",
        path.display(),
        ck.name()
    );
    Ok(ck)
}

fn cmd_gen_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let d = &cfg.dataset;
    let train = generate_dataset(segattack::synthdata::mix_seed(d.seed, 0), &d.scene, d.train_size)?;
    let eval = generate_dataset(segattack::synthdata::mix_seed(d.seed, 1), &d.scene, d.eval_size)?;
    for (path, data) in [(layout.train_data(), &train), (layout.eval_data(), &eval)] {
        ensure_parent(&path)?;
        save_dataset(&path, data).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} ({} samples)", path.display(), data.len());
    }
    let freq = train.class_frequencies();
    println!("class pixel frequencies (train):");
    for (c, f) in freq.iter().enumerate() {
        println!("  class {c}: {f:.4}");
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, layout: &Layout, names: &[String], config: &Path) -> Result<()> {
    let names: Vec<String> = if names.is_empty() {
        cfg.model_names().iter().map(|s| s.to_string()).collect()
    } else {
        names.to_vec()
    };
    let entries = names.iter().map(|n| cfg.model(n)).collect::<Result<Vec<_>>>()?;
    let train = load_data(&layout.train_data(), config)?;
    let eval = load_data(&layout.eval_data(), config)?;
    for entry in entries {
        let name = &entry.spec.name;
        println!("training {name} ({} epochs)", entry.train.epochs);
        let ck = train_with_progress(&entry.spec, &train, Some(&eval), &entry.train, |s| {
            println!("  {name} epoch {:>3}  loss {:.6}", s.epoch, s.mean_loss)
        })?;
        println!("  {name} final eval mIoU {:.4}", ck.meta.eval_miou);
        let path = layout.checkpoint(name);
        ensure_parent(&path)?;
        save_checkpoint(&path, &ck).with_context(|| format!("writing {}", path.display()))?;
        println!("  wrote {}", path.display());
    }
    Ok(())
}

fn cmd_attack(cfg: &RunConfig, layout: &Layout, attack: &str, index: usize, seed: u64, config: &Path) -> Result<()> {
    let acfg = segattack::attacks::AttackConfig {
        seed,
        ..cfg.attack(attack)?.clone()
    };
    let eval = load_data(&layout.eval_data(), config)?;
    ensure!(
        index < eval.len(),
        "sample index {index} out of range; the eval set has {} samples",
        eval.len()
    );
    let e = &cfg.experiment;
    let source = load_model(layout, &e.source, config)?;
    let targets = e
        .targets
        .iter()
        .filter(|t| **t != e.source)
        .map(|t| load_model(layout, t, config))
        .collect::<Result<Vec<_>>>()?;

    let sample = &eval.samples[index];
    let r = run_attack(&source, &sample.image, &sample.labels, &acfg)?;
    let dir = layout.attack_dir(attack, index);
    fs::create_dir_all(&dir)?;
    ppm::write_image(&dir.join("clean.ppm"), &sample.image)?;
    ppm::write_image(&dir.join("adversarial.ppm"), &r.x_adv)?;
    let amplified = r.x_adv.zip_map(&sample.image, |a, x| ((a - x).abs() * 16.0).min(1.0))?;
    ppm::write_image(&dir.join("perturbation_x16.ppm"), &amplified)?;
    ppm::write_labels(&dir.join("labels.ppm"), &sample.labels)?;
    for m in std::iter::once(&source).chain(&targets) {
        ppm::write_labels(
            &dir.join(format!("{}_clean_pred.ppm", m.name())),
            &m.predict(&sample.image)?,
        )?;
        ppm::write_labels(&dir.join(format!("{}_adv_pred.ppm", m.name())), &m.predict(&r.x_adv)?)?;
    }
    let mut log = fs::File::create(dir.join("iterations.csv"))?;
    writeln!(log, "iteration,stage,loss,misclassified,mean_kl,linf")?;
    for e in &r.log {
        writeln!(
            log,
            "{},{},{},{},{},{}",
            e.iteration,
            e.stage.flag(),
            e.loss,
            e.misclassified,
            e.mean_kl,
            e.linf
        )?;
    }
    let stages: Vec<String> = r.log.iter().map(|e| e.stage.flag().to_string()).collect();
    println!("attack {attack} on sample {index}: max |x_adv - x| = {:.6}", r.max_linf);
    println!("stage per iteration: {}", stages.join(" "));
    println!("wrote artifacts to {}", dir.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, layout: &Layout, config: &Path) -> Result<()> {
    let e = &cfg.experiment;
    ensure!(!cfg.attacks.is_empty(), "config lists no attacks");
    let eval = load_data(&layout.eval_data(), config)?;
    let source = load_model(layout, &e.source, config)?;
    let targets = e
        .targets
        .iter()
        .map(|t| load_model(layout, t, config))
        .collect::<Result<Vec<_>>>()?;
    let target_refs: Vec<&Checkpoint> = targets.iter().collect();

    for m in std::iter::once(&source).chain(&targets) {
        let (miou, acc) = evaluate_model(m, &eval.samples)?;
        info!("{}: clean mIoU {miou:.4}, pixel accuracy {acc:.4}", m.name());
    }
    let mut exp = Experiment::new(&source, &target_refs, &eval.samples, &e.seeds)?;
    println!(
        "running {} attacks x {} seeds on {} samples",
        cfg.attacks.len(),
        e.seeds.len(),
        eval.len()
    );
    let transfer = exp.transfer(&cfg.attacks)?;
    println!("running ablation grid");
    let ablation = exp.ablation(cfg.attack(&e.ablation_base)?)?;

    let dir = layout.reports();
    fs::create_dir_all(&dir)?;
    for (name, report) in [("transfer", &transfer), ("ablation", &ablation)] {
        write_report(dir.join(format!("{name}.txt")), report)?;
        write_csv(dir.join(format!("{name}.csv")), report)?;
        emit_plots(report, &dir, name)?;
        let failed = report.cells.iter().filter(|c| c.status.is_err()).count();
        println!("\n{name} (median adversarial mIoU over {} seeds)", e.seeds.len());
        print!("{}", table::render_plain(report));
        if failed > 0 {
            eprintln!(
                "warning: {failed} {name} cells failed; see {}",
                dir.join(format!("{name}.txt")).display()
            );
        }
    }
    println!("\nwrote reports to {}", dir.display());
    Ok(())
}

fn cmd_report(path: &Path, markdown: bool) -> Result<()> {
    let report = read_report(path).with_context(|| format!("reading report {}", path.display()))?;
    if markdown {
        print!("{}", table::render_markdown(&report));
    } else {
        print!("{}", table::render_plain(&report));
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(k) = cli.workers {
        ensure!(k > 0, "--workers must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    }
    if let Some(Command::Report { path, markdown }) = &cli.command {
        return cmd_report(path, *markdown);
    }
    let (cfg, layout) = resolve(&cli)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let config = cli.config.as_path();
    match &cli.command {
        None => bail!("no subcommand given; see --help"),
        Some(Command::GenData) => cmd_gen_data(&cfg, &layout),
        Some(Command::Train { models }) => cmd_train(&cfg, &layout, models, config),
        Some(Command::Attack {
            attack,
            index,
            attack_seed,
        }) => cmd_attack(&cfg, &layout, attack, *index, *attack_seed, config),
        Some(Command::Evaluate) => cmd_evaluate(&cfg, &layout, config),
        Some(Command::Report { .. }) => unreachable!(),
    }
}
