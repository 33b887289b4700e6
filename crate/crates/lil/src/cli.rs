//! Command-line pipeline. Every subcommand reads one experiment config,
//! writes its artifacts under the config's `out_root`, and drops a fully
//! resolved copy of the config next to them. Stages communicate only
//! through files, so a pipeline can be resumed, rerun, or picked apart at
//! any point.
//!
//! On failure the process prints a single JSON record to stderr (fields
//! `status`, `kind`, `message`) and exits nonzero; scripts can parse that
//! instead of scraping log text.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{LilError, Result};
use crate::eval::{self, RobustnessMethod, RobustnessReport};
use crate::generator::{Generator, IntrinsicKind, NoiseBundle, Offset};
use crate::procgen::{self, MANIFEST_NAME};
use crate::regressor::Regressor;
use crate::report::{self, file_token};
use crate::rng;
use crate::search::{self, SearchResult};
use crate::teachers::{BatchItem, OracleTeacher, RegressorTeacher, SceneHandle, Teacher};
use crate::trainer;
use crate::{io, Result as LilResult};

#[derive(Parser)]
#[command(
    name = "lil",
    about = "Latent intrinsic-image lab: procedural data, generator training, offset search, evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's out_root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the global seed; stage seeds are re-derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the training dataset.
    Procgen(Common),
    /// Train the generator on the dataset.
    Train(Common),
    /// Train the baseline normal regressor.
    TrainBaseline(Common),
    /// Search a latent offset for one intrinsic kind.
    FindDirection {
        #[command(flatten)]
        common: Common,
        /// normal | depth | albedo | shading | segmentation:<class> | identity | swap
        #[arg(long)]
        kind: String,
    },
    /// Search one offset per relighting condition.
    FindRelight(Common),
    /// Score a searched offset on held-out scenes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: String,
    },
    /// Compare normal estimates across relighting conditions.
    Robustness(Common),
    /// Run both control searches and tabulate them against the intrinsics.
    Control(Common),
}

/// Fixed artifact layout under `out_root`.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(root: &Path) -> Layout {
        Layout { root: root.into() }
    }
    fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    fn generator_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/generator.ckpt")
    }
    fn regressor_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/regressor.ckpt")
    }
    fn train_log(&self) -> PathBuf {
        self.root.join("logs/generator_train.csv")
    }
    fn baseline_log(&self) -> PathBuf {
        self.root.join("logs/regressor_train.csv")
    }
    fn offset_manifest(&self, kind: IntrinsicKind) -> PathBuf {
        self.root
            .join("offsets")
            .join(format!("{}.json", file_token(&kind.token())))
    }
    fn report_dir(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
    fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }
}

/// Only one device exists. The variable is honored so scripts written for a
/// richer runtime fail loudly here instead of silently computing elsewhere.
fn check_device() -> Result<()> {
    match std::env::var("LIL_DEVICE") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Ok(v) if v.is_empty() || v == "cpu" => Ok(()),
        Ok(v) => Err(LilError::Config(format!(
            "LIL_DEVICE requested '{v}' but the only available device is 'cpu'"
        ))),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(LilError::Config("LIL_DEVICE is not valid unicode".into()))
        }
    }
}

fn require(path: &Path, what: &str, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LilError::Invalid(format!(
            "missing {what} at {}; run `lil {produced_by}` first",
            path.display()
        )))
    }
}

fn load_setup(common: &Common) -> Result<(ExperimentConfig, Layout)> {
    check_device()?;
    let mut cfg = ExperimentConfig::load(&common.config, common.seed)?;
    if let Some(out) = &common.out {
        cfg.out_root = out.clone();
    }
    let layout = Layout::new(&cfg.out_root);
    std::fs::create_dir_all(&layout.root).map_err(|e| LilError::io(&layout.root, e))?;
    cfg.write_resolved(&layout.resolved_config())?;
    Ok((cfg, layout))
}

fn load_generator(layout: &Layout) -> Result<Generator> {
    require(&layout.generator_ckpt(), "generator checkpoint", "train")?;
    let (gen, meta) = Generator::load_checkpoint(&layout.generator_ckpt())?;
    info!(
        "loaded generator {} ({} params, trained {} steps)",
        meta.content_hash, meta.param_count, meta.train.steps
    );
    Ok(gen)
}

fn load_regressor(layout: &Layout) -> Result<Regressor> {
    require(
        &layout.regressor_ckpt(),
        "baseline regressor checkpoint",
        "train-baseline",
    )?;
    let (reg, _) = Regressor::load_checkpoint(&layout.regressor_ckpt())?;
    Ok(reg)
}

fn build_teacher(cfg: &ExperimentConfig, layout: &Layout) -> Result<Box<dyn Teacher>> {
    match cfg.teacher.name.as_str() {
        "oracle" => Ok(Box::new(OracleTeacher)),
        "regressor" => Ok(Box::new(RegressorTeacher::new(load_regressor(layout)?))),
        "external" => {
            let dir = cfg.teacher.exchange_dir.clone().ok_or_else(|| {
                LilError::Config("external teacher needs teacher.exchange_dir".into())
            })?;
            Ok(Box::new(crate::teachers::ExternalTeacher::with_timeout(
                dir,
                Duration::from_secs_f64(cfg.teacher.timeout_s),
            )))
        }
        other => Err(LilError::Config(format!("unknown teacher '{other}'"))),
    }
}

fn save_search_result(layout: &Layout, result: &SearchResult) -> Result<PathBuf> {
    let path = layout.offset_manifest(result.offset.kind);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LilError::io(parent, e))?;
    }
    search::save_offset(&path, result)?;
    Ok(path)
}

fn ok_record(command: &str, detail: serde_json::Value) -> serde_json::Value {
    json!({ "status": "ok", "command": command, "detail": detail })
}

// --- subcommands ---

fn cmd_procgen(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    let p = &cfg.procgen;
    let manifest =
        procgen::write_dataset(&layout.dataset(), p.n_scenes, p.k_lights, p.dz, p.seed)?;
    info!(
        "dataset: {} records ({} scenes x {} slots) at {}",
        manifest.records.len(),
        p.n_scenes,
        p.k_lights,
        layout.dataset().display()
    );
    let manifest_sha = io::sha256_file(&layout.dataset().join(MANIFEST_NAME))?;
    Ok(ok_record(
        "procgen",
        json!({
            "dir": layout.dataset(),
            "records": manifest.records.len(),
            "manifest_sha": manifest_sha,
        }),
    ))
}

fn cmd_train(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    require(&layout.dataset().join(MANIFEST_NAME), "dataset", "procgen")?;
    let outcome = trainer::train_generator(
        &layout.dataset(),
        &cfg.trainer,
        &layout.generator_ckpt(),
        &layout.train_log(),
    )?;
    if !outcome.converged {
        warn!(
            "generator missed the reconstruction threshold (held-out L1 {:.4}); checkpoint flagged",
            outcome.final_heldout_l1
        );
    }
    Ok(ok_record(
        "train",
        json!({
            "checkpoint": layout.generator_ckpt(),
            "content_hash": outcome.meta.content_hash,
            "final_heldout_l1": outcome.final_heldout_l1,
            "converged": outcome.converged,
        }),
    ))
}

fn cmd_train_baseline(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    require(&layout.dataset().join(MANIFEST_NAME), "dataset", "procgen")?;
    let outcome = trainer::train_baseline_regressor(
        &layout.dataset(),
        &cfg.baseline,
        &layout.regressor_ckpt(),
        &layout.baseline_log(),
    )?;
    Ok(ok_record(
        "train-baseline",
        json!({
            "checkpoint": layout.regressor_ckpt(),
            "content_hash": outcome.meta.content_hash,
            "final_heldout_angular": outcome.final_heldout_angular,
        }),
    ))
}

fn cmd_find_direction(
    cfg: &ExperimentConfig,
    layout: &Layout,
    kind_str: &str,
) -> Result<serde_json::Value> {
    let kind = IntrinsicKind::parse(kind_str)?;
    let gen = load_generator(layout)?;
    let teacher = build_teacher(cfg, layout)?;
    let result = search::find_offset(kind, &gen, teacher.as_ref(), &cfg.search)?;
    let path = save_search_result(layout, &result)?;
    info!(
        "{kind}: loss {:.5} -> train {:.5} / val {:.5} (|d| = {:.4})",
        result.initial_loss,
        result.train_loss,
        result.val_loss,
        result.offset.norm()
    );
    Ok(ok_record(
        "find-direction",
        json!({
            "kind": kind.token(),
            "offset": path,
            "initial_loss": result.initial_loss,
            "train_loss": result.train_loss,
            "val_loss": result.val_loss,
            "overfit": result.overfit,
        }),
    ))
}

fn cmd_find_relight(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    let gen = load_generator(layout)?;
    let teacher = build_teacher(cfg, layout)?;
    let results = search::find_relighting_offsets(&gen, teacher.as_ref(), &cfg.search, cfg.relight.k)?;
    let mut files = Vec::new();
    for r in &results {
        files.push(save_search_result(layout, r)?);
    }
    Ok(ok_record(
        "find-relight",
        json!({
            "conditions": cfg.relight.k,
            "offsets": files,
            "val_losses": results.iter().map(|r| r.val_loss).collect::<Vec<_>>(),
        }),
    ))
}

/// Rows of (plain image, image under the offset, target) for the first few
/// evaluation scenes.
fn qualitative_tiles(
    gen: &Generator,
    offset: &Offset,
    latents: &[ndarray::Array1<f32>],
    noise: &NoiseBundle,
    count: usize,
) -> Result<Vec<ndarray::Array3<f32>>> {
    let mut tiles = Vec::new();
    for z in latents.iter().take(count) {
        let base = gen.broadcast(gen.map_latent(z.view())?.view());
        let plain = gen.synthesize(&base, noise)?;
        let shifted = gen.synthesize(&gen.apply_offset(&base, offset)?, noise)?;
        let target = match offset.kind {
            IntrinsicKind::IdentityControl => plain.clone(),
            IntrinsicKind::SwapControl => search::swap_halves(&plain)?,
            kind => {
                let item = BatchItem {
                    image: plain.clone(),
                    handle: Some(SceneHandle { z: z.clone() }),
                };
                let maps = OracleTeacher.predict(kind, std::slice::from_ref(&item))?;
                maps[0].encode()?
            }
        };
        tiles.extend([plain, shifted, target]);
    }
    Ok(tiles)
}

fn cmd_evaluate(
    cfg: &ExperimentConfig,
    layout: &Layout,
    kind_str: &str,
) -> Result<serde_json::Value> {
    let kind = IntrinsicKind::parse(kind_str)?;
    let gen = load_generator(layout)?;
    let offset_path = layout.offset_manifest(kind);
    require(&offset_path, "offset manifest", "find-direction")?;
    let result = search::load_offset(&offset_path)?;

    let latents = rng::latent_pool(cfg.eval.seed, "eval/scenes", cfg.eval.n_scenes, gen.arch.dz);
    let noise_seed = rng::substream_seed(cfg.eval.seed, "eval/noise");
    let metrics = eval::evaluate_offset(&gen, &result.offset, &latents, noise_seed)?;

    let out_dir = layout.report_dir(&file_token(&kind.token()));
    let inputs = vec![layout.generator_ckpt(), offset_path];
    let index = report::emit_report(std::slice::from_ref(&metrics), &[], &inputs, &out_dir)?;

    let show = cfg.eval.qualitative.min(latents.len());
    if show > 0 {
        let noise = NoiseBundle::from_seed(noise_seed, &gen.arch);
        let tiles = qualitative_tiles(&gen, &result.offset, &latents, &noise, show)?;
        report::qualitative_grid(&tiles, 3, &out_dir.join("plots/qualitative.png"))?;
    }

    Ok(ok_record(
        "evaluate",
        json!({
            "kind": kind.token(),
            "report_dir": out_dir,
            "scenes": latents.len(),
            "means": index.means.get(&kind.token()),
        }),
    ))
}

fn cmd_robustness(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    let gen = load_generator(layout)?;
    let k = cfg.relight.k;

    let normal_path = layout.offset_manifest(IntrinsicKind::Normal);
    require(&normal_path, "normal offset", "find-direction --kind normal")?;
    let normal = search::load_offset(&normal_path)?.offset;

    let mut relights = Vec::with_capacity(k);
    let mut inputs = vec![layout.generator_ckpt(), normal_path];
    for j in 0..k {
        let path = layout.offset_manifest(IntrinsicKind::Relighting(j));
        require(&path, "relighting offset", "find-relight")?;
        relights.push(search::load_offset(&path)?.offset);
        inputs.push(path);
    }
    let regressor = load_regressor(layout)?;
    inputs.push(layout.regressor_ckpt());

    let latents = rng::latent_pool(
        cfg.robustness.seed,
        "robustness/scenes",
        cfg.robustness.n_scenes,
        gen.arch.dz,
    );
    let noise_seed = rng::substream_seed(cfg.robustness.seed, "robustness/noise");

    let methods = [
        RobustnessMethod::GeneratorOffset {
            normal: &normal,
            relights: &relights,
        },
        RobustnessMethod::BaselineRegressor {
            regressor: &regressor,
            conditions: k,
        },
        RobustnessMethod::Oracle { conditions: k },
    ];
    let mut reports: Vec<RobustnessReport> = Vec::new();
    for method in methods {
        let r = eval::eval_relighting_robustness(&gen, method, &latents, noise_seed)?;
        info!(
            "{}: mean inner {:.4} (median {:.4})",
            r.method, r.mean_inner, r.stats.median
        );
        reports.push(r);
    }

    let out_dir = layout.report_dir("robustness");
    report::emit_report(&[], &reports, &inputs, &out_dir)?;
    Ok(ok_record(
        "robustness",
        json!({
            "report_dir": out_dir,
            "scenes": latents.len(),
            "conditions": k,
            "mean_inner": reports
                .iter()
                .map(|r| (r.method.clone(), r.mean_inner))
                .collect::<std::collections::BTreeMap<_, _>>(),
        }),
    ))
}

/// Kinds the control table looks for next to the fresh control searches.
const CONTROL_PEERS: [&str; 7] = [
    "normal",
    "depth",
    "albedo",
    "shading",
    "segmentation:floor",
    "segmentation:sphere",
    "segmentation:box",
];

fn cmd_control(cfg: &ExperimentConfig, layout: &Layout) -> Result<serde_json::Value> {
    let gen = load_generator(layout)?;
    let teacher = build_teacher(cfg, layout)?;

    let mut rows = Vec::new();
    for kind in [IntrinsicKind::IdentityControl, IntrinsicKind::SwapControl] {
        let result = search::find_offset(kind, &gen, teacher.as_ref(), &cfg.search)?;
        save_search_result(layout, &result)?;
        rows.push(result);
    }
    for token in CONTROL_PEERS {
        let path = layout.offset_manifest(IntrinsicKind::parse(token)?);
        if path.exists() {
            rows.push(search::load_offset(&path)?);
        }
    }

    let mut csv = String::from("kind,initial_loss,train_loss,val_loss,reduction,norm\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.offset.kind.token(),
            r.initial_loss,
            r.train_loss,
            r.val_loss,
            r.reduction(),
            r.offset.norm()
        ));
    }
    let out_dir = layout.report_dir("control");
    std::fs::create_dir_all(&out_dir).map_err(|e| LilError::io(&out_dir, e))?;
    let csv_path = out_dir.join("control.csv");
    io::atomic_write(&csv_path, csv.as_bytes())?;

    Ok(ok_record(
        "control",
        json!({
            "table": csv_path,
            "kinds": rows.iter().map(|r| r.offset.kind.token()).collect::<Vec<_>>(),
            "reductions": rows.iter().map(|r| r.reduction()).collect::<Vec<_>>(),
        }),
    ))
}

fn execute(cli: Cli) -> LilResult<serde_json::Value> {
    match &cli.command {
        Cmd::Procgen(c) => {
            let (cfg, layout) = load_setup(c)?;
            cmd_procgen(&cfg, &layout)
        }
        Cmd::Train(c) => {
            let (cfg, layout) = load_setup(c)?;
            cmd_train(&cfg, &layout)
        }
        Cmd::TrainBaseline(c) => {
            let (cfg, layout) = load_setup(c)?;
            cmd_train_baseline(&cfg, &layout)
        }
        Cmd::FindDirection { common, kind } => {
            let (cfg, layout) = load_setup(common)?;
            cmd_find_direction(&cfg, &layout, kind)
        }
        Cmd::FindRelight(c) => {
            let (cfg, layout) = load_setup(c)?;
            cmd_find_relight(&cfg, &layout)
        }
        Cmd::Evaluate { common, kind } => {
            let (cfg, layout) = load_setup(common)?;
            cmd_evaluate(&cfg, &layout, kind)
        }
        Cmd::Robustness(c) => {
            let (cfg, layout) = load_setup(c)?;
            cmd_robustness(&cfg, &layout)
        }
        Cmd::Control(c) => {
            let (cfg, layout) = load_setup(c)?;
            cmd_control(&cfg, &layout)
        }
    }
}

/// Parses the given argument list and runs the selected command. Returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version by "erroring" with exit code 0.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(record) => {
            println!("{record}");
            0
        }
        Err(e) => {
            let record = json!({
                "status": "error",
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            1
        }
    }
}
