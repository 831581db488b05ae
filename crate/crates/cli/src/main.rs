mod config;
mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use attnlab_core::attack::{self, AttackMethod};
use attnlab_core::eval;
use attnlab_core::scene::{self, io as scene_io, Catalog, GridLayout};
use attnlab_core::vlm::{self, checkpoint, Model};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "attnlab",
    about = "Toy victim, attention-concentration patch attack, and selection-rate evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Configuration file (TOML); flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; mandatory here or in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-position and per-grid parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Artifact directory (also via the ATTNLAB_OUT environment variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the product catalog and rendered tile previews.
    GenData {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train the toy victim on the selection task.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Override the optimizer step budget (0 skips training).
        #[arg(long)]
        steps: Option<usize>,
        /// Keep a checkpoint whose held-out accuracy is below 0.9.
        #[arg(long)]
        allow_weak: bool,
    },
    /// Optimize an adversarial patch against the trained victim.
    Attack {
        #[command(flatten)]
        shared: Shared,
        /// prac (attention concentration) or ce (cross-entropy baseline).
        #[arg(long)]
        method: String,
        /// Ablation flags, comma separated.
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
        /// Target product id; defaults to the first test-pool product.
        #[arg(long)]
        target: Option<u32>,
        /// Victim checkpoint path; defaults to <out>/victim.tvlm.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a patch (or the clean baseline) on the victim.
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// ssr, position, temperature, transfer, or clean.
        #[arg(long)]
        suite: String,
        /// Saved patch PNG (quantized form). Not used by the clean suite.
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Target product id; defaults to the patch sidecar's target.
        #[arg(long)]
        target: Option<u32>,
        /// Report label; defaults to the patch file stem.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate every report in the artifact directory into tables.
    Report {
        #[command(flatten)]
        shared: Shared,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { shared } => cmd_gen_data(&resolve(&shared)?),
        Command::Train {
            shared,
            steps,
            allow_weak,
        } => cmd_train(&resolve(&shared)?, steps, allow_weak),
        Command::Attack {
            shared,
            method,
            ablation,
            target,
            checkpoint,
        } => cmd_attack(&resolve(&shared)?, &method, &ablation, target, checkpoint),
        Command::Eval {
            shared,
            suite,
            patch,
            target,
            label,
            checkpoint,
        } => cmd_eval(&resolve(&shared)?, &suite, patch, target, label, checkpoint),
        Command::Report { shared } => {
            // reports aggregate existing artifacts; no seed needed
            let cfg = match &shared.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let dir = shared
                .out
                .or(cfg.out.clone())
                .or_else(|| std::env::var(config::ARTIFACT_ROOT_ENV).ok().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("artifacts"));
            report::cmd_report(&dir)
        }
    }
}

fn resolve(shared: &Shared) -> Result<RunConfig> {
    let cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve(shared.seed, shared.threads, shared.out.clone())
}

fn catalog_path(dir: &Path) -> PathBuf {
    dir.join("catalog.jsonl")
}

fn load_catalog(dir: &Path) -> Result<Catalog> {
    let path = catalog_path(dir);
    scene_io::load_catalog(&path)
        .with_context(|| format!("loading catalog {} (run gen-data first)", path.display()))
}

fn default_checkpoint(dir: &Path) -> PathBuf {
    dir.join("victim.tvlm")
}

fn load_model(dir: &Path, checkpoint_arg: Option<PathBuf>) -> Result<Model> {
    let path = checkpoint_arg.unwrap_or_else(|| default_checkpoint(dir));
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

// ---- gen-data ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CatalogMeta {
    seed: u64,
    config_hash: String,
    count: usize,
    categories: usize,
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.artifact_dir();
    cfg.write_resolved(&dir, "gen-data")?;
    let count = cfg.catalog.count();
    let categories = cfg.catalog.categories();
    let layout = GridLayout::default_five();
    let catalog = Catalog::generate(cfg.seed(), count, categories, layout.n_slots())?;
    scene_io::save_catalog(&catalog_path(&dir), &catalog)?;

    let preview_dir = dir.join("previews");
    std::fs::create_dir_all(&preview_dir)?;
    for p in &catalog.products {
        let tile = scene::render_tile(p);
        scene_io::save_png(
            &preview_dir.join(format!("product_{:03}.png", p.id)),
            &tile,
            scene::TILE_SIZE,
            scene::TILE_SIZE,
        )?;
    }
    let meta = CatalogMeta {
        seed: cfg.seed(),
        config_hash: cfg.hash(),
        count,
        categories,
    };
    std::fs::write(
        dir.join("catalog.meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    println!(
        "catalog: {count} products over {categories} categories -> {}",
        catalog_path(&dir).display()
    );
    println!(
        "splits: optimization {}, validation {}, test {}",
        catalog.optimization_pool().len(),
        catalog.validation_pool().len(),
        catalog.test_pool().len()
    );
    Ok(())
}

// ---- train ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    seed: u64,
    config_hash: String,
    accuracy: f64,
    name_accuracy: f64,
    action_accuracy: f64,
    final_loss: f32,
    steps_run: usize,
    diverged: bool,
}

fn cmd_train(cfg: &RunConfig, steps: Option<usize>, allow_weak: bool) -> Result<()> {
    let dir = cfg.artifact_dir();
    cfg.write_resolved(&dir, "train")?;
    let catalog = load_catalog(&dir)?;
    let layout = GridLayout::default_five();
    let mut tc = cfg.train.clone();
    if let Some(s) = steps {
        tc.steps = s;
    }
    let started = std::time::Instant::now();
    let (model, report) =
        vlm::train_selection_task(&catalog, &layout, &cfg.model, &tc, cfg.seed())?;
    eprintln!(
        "trained {} steps in {:.1}s: accuracy {:.3} (name {:.3}, action {:.3}), final loss {:.4}",
        report.steps_run,
        started.elapsed().as_secs_f64(),
        report.accuracy,
        report.name_accuracy,
        report.action_accuracy,
        report.final_loss
    );
    if report.diverged {
        eprintln!("warning: training diverged; kept the last finite checkpoint");
    }
    let ckpt = default_checkpoint(&dir);
    checkpoint::save(&ckpt, &model)?;
    let record = TrainRecord {
        seed: cfg.seed(),
        config_hash: cfg.hash(),
        accuracy: report.accuracy,
        name_accuracy: report.name_accuracy,
        action_accuracy: report.action_accuracy,
        final_loss: report.final_loss,
        steps_run: report.steps_run,
        diverged: report.diverged,
    };
    std::fs::write(
        dir.join("train_report.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    println!("checkpoint: {}", ckpt.display());
    if report.accuracy < 0.9 && !allow_weak {
        bail!(
            "held-out accuracy {:.3} is below the 0.9 gate (pass --allow-weak to keep it)",
            report.accuracy
        );
    }
    Ok(())
}

// ---- attack ----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PatchSidecar {
    target_id: u32,
    method: AttackMethod,
    epsilon: f32,
    seed: u64,
    config_hash: String,
    validation_ssr: Option<f64>,
    ablation: Vec<String>,
    t_ref: Vec<u32>,
}

fn cmd_attack(
    cfg: &RunConfig,
    method: &str,
    ablation: &[String],
    target: Option<u32>,
    checkpoint_arg: Option<PathBuf>,
) -> Result<()> {
    let method = match method.to_ascii_lowercase().as_str() {
        "prac" => AttackMethod::Prac,
        "ce" => AttackMethod::Ce,
        other => bail!("unknown method {other:?}; expected prac or ce"),
    };
    let mut attack_cfg = cfg.attack.clone();
    for flag in ablation {
        attack_cfg.ablation.set(flag)?;
    }
    let dir = cfg.artifact_dir();
    let catalog = load_catalog(&dir)?;
    let layout = GridLayout::default_five();
    let model = load_model(&dir, checkpoint_arg)?;
    let target_id = match target {
        Some(t) => t,
        None => *catalog
            .test_pool()
            .first()
            .context("test pool is empty")?,
    };
    let mut name = format!("patch_{}", method.name());
    for flag in attack_cfg.ablation.active() {
        name.push('_');
        name.push_str(flag);
    }
    name.push_str(&format!("_t{target_id}"));
    cfg.write_resolved(&dir, &format!("attack_{name}"))?;

    let started = std::time::Instant::now();
    let run = attack::run_attack(&model, &catalog, &layout, target_id, &attack_cfg, method)?;
    eprintln!(
        "{} target {target_id}: {} iterations in {:.1}s, validation SSR {:?}",
        method.name(),
        attack_cfg.n_iter,
        started.elapsed().as_secs_f64(),
        run.log.validation_ssr
    );
    for w in &run.log.warnings {
        eprintln!("warning: {w}");
    }

    let tile = scene::TILE_SIZE;
    let png = dir.join(format!("{name}.png"));
    scene_io::save_png(&png, &run.final_patch.reloaded, tile, tile)?;
    scene_io::save_png(
        &dir.join(format!("{name}.clean.png")),
        &run.clean_patch,
        tile,
        tile,
    )?;
    attack::write_run_log(&dir.join(format!("{name}.runlog.jsonl")), &run.log)?;
    let sidecar = PatchSidecar {
        target_id,
        method,
        epsilon: attack_cfg.epsilon,
        seed: cfg.seed(),
        config_hash: cfg.hash(),
        validation_ssr: run.log.validation_ssr,
        ablation: run.log.ablation.clone(),
        t_ref: run.log.t_ref.clone(),
    };
    std::fs::write(
        dir.join(format!("{name}.sidecar.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    println!("patch: {}", png.display());
    Ok(())
}

// ---- eval -----------------------------------------------------------------

fn load_patch(path: &Path) -> Result<Vec<f32>> {
    let (pixels, h, w) = scene_io::load_png(path)
        .with_context(|| format!("loading patch {}", path.display()))?;
    if (h, w) != (scene::TILE_SIZE, scene::TILE_SIZE) {
        bail!(
            "patch {} is {h}x{w}, expected {t}x{t}",
            path.display(),
            t = scene::TILE_SIZE
        );
    }
    Ok(pixels)
}

fn sidecar_target(patch: &Path) -> Option<u32> {
    let sidecar = patch.with_extension("").with_extension("sidecar.json");
    let text = std::fs::read_to_string(sidecar).ok()?;
    let parsed: PatchSidecar = serde_json::from_str(&text).ok()?;
    Some(parsed.target_id)
}

fn write_eval_outputs(dir: &Path, name: &str, report: &eval::EvalReport) -> Result<()> {
    eval::write_report(&dir.join(format!("{name}.report.jsonl")), report)?;
    let table = eval::render_report(report);
    std::fs::write(dir.join(format!("{name}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn require_valid(report: &eval::EvalReport) -> Result<()> {
    if report.ssr.is_none() {
        bail!(
            "no valid runs in evaluation {} (all {} grids invalid)",
            report.label,
            report.total
        );
    }
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    suite: &str,
    patch: Option<PathBuf>,
    target: Option<u32>,
    label: Option<String>,
    checkpoint_arg: Option<PathBuf>,
) -> Result<()> {
    let dir = cfg.artifact_dir();
    let catalog = load_catalog(&dir)?;
    let layout = GridLayout::default_five();
    let model = load_model(&dir, checkpoint_arg)?;
    let hash = cfg.hash();
    cfg.write_resolved(&dir, &format!("eval_{suite}"))?;
    let eval_cfg = cfg.eval.clone();

    match suite {
        "clean" => {
            // unperturbed tiles across every test-pool target (or the one
            // requested): the 1/N calibration reference
            let targets = match target {
                Some(t) => vec![t],
                None => catalog.test_pool(),
            };
            let mut reports = Vec::new();
            for t in targets {
                let tile = scene::render_tile(catalog.product(t)?);
                let report = eval::evaluate_ssr(
                    &model, &catalog, &layout, t, &tile, &eval_cfg, "clean", &hash,
                )?;
                write_eval_outputs(&dir, &format!("clean_t{t}"), &report)?;
                reports.push(report);
            }
            let total_valid: usize = reports.iter().map(|r| r.valid).sum();
            let total_success: usize = reports.iter().map(|r| r.successes).sum();
            if total_valid == 0 {
                bail!("no valid runs in the clean suite");
            }
            let (lo, hi) = eval::wilson_interval(total_success, total_valid);
            println!(
                "clean overall: SSR {:.3} over {} valid grids, CI95 [{lo:.3}, {hi:.3}]",
                total_success as f64 / total_valid as f64,
                total_valid
            );
        }
        "ssr" | "position" | "temperature" | "transfer" => {
            let patch_path = patch.context("--patch is required for this suite")?;
            let pixels = load_patch(&patch_path)?;
            let target_id = target
                .or_else(|| sidecar_target(&patch_path))
                .context("no --target given and no patch sidecar found")?;
            let label = label.unwrap_or_else(|| {
                patch_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "patch".into())
            });
            match suite {
                "ssr" => {
                    let report = eval::evaluate_ssr(
                        &model, &catalog, &layout, target_id, &pixels, &eval_cfg, &label, &hash,
                    )?;
                    write_eval_outputs(&dir, &format!("ssr_{label}"), &report)?;
                    require_valid(&report)?;
                }
                "position" => {
                    let report = eval::evaluate_ssr(
                        &model, &catalog, &layout, target_id, &pixels, &eval_cfg, &label, &hash,
                    )?;
                    write_eval_outputs(&dir, &format!("position_{label}"), &report)?;
                    let bias = eval::positional_bias(&[&report]);
                    let text = report::render_positional(&bias);
                    std::fs::write(dir.join(format!("position_{label}.bias.txt")), &text)?;
                    print!("{text}");
                    require_valid(&report)?;
                }
                "temperature" => {
                    let reports = eval::temperature_sweep(
                        &model,
                        &catalog,
                        &layout,
                        target_id,
                        &pixels,
                        &eval::TEMPERATURE_GRID,
                        &eval_cfg,
                        &label,
                        &hash,
                    )?;
                    for r in &reports {
                        let t = r.temperature;
                        write_eval_outputs(&dir, &format!("temperature_{label}_{t}"), r)?;
                    }
                    if reports.iter().all(|r| r.ssr.is_none()) {
                        bail!("no valid runs at any temperature");
                    }
                }
                "transfer" => {
                    let steps = cfg.transfer.finetune_steps();
                    let (clone, acc) = vlm::perturb_finetune(
                        &model,
                        &catalog,
                        &layout,
                        steps,
                        cfg.seed(),
                    )?;
                    eprintln!(
                        "fine-tuned clone: {} steps, accuracy {acc:.3}, parameter distance {:.3}",
                        steps,
                        model.weights.l2_distance(&clone.weights).sqrt()
                    );
                    checkpoint::save(&dir.join("victim_finetuned.tvlm"), &clone)?;
                    let t = eval::transfer_eval(
                        &model, &clone, &catalog, &layout, target_id, &pixels, &eval_cfg, &label,
                        &hash,
                    )?;
                    write_eval_outputs(&dir, &format!("transfer_{label}_source"), &t.source)?;
                    write_eval_outputs(&dir, &format!("transfer_{label}_transfer"), &t.transfer)?;
                    match t.drop {
                        Some(d) => println!("transfer drop: {:.1} percentage points", d * 100.0),
                        None => println!("transfer drop: undefined (no valid runs)"),
                    }
                    require_valid(&t.source)?;
                }
                _ => unreachable!(),
            }
        }
        other => bail!("unknown suite {other:?}; expected ssr, position, temperature, transfer, or clean"),
    }
    Ok(())
}

