//! Acceptance gate. Runs ten criteria covering the whole toolkit, prints
//! one PASS or FAIL line per criterion on stdout, and exits nonzero if any
//! failed. Budgets are the experiment defaults, so a full run takes tens
//! of minutes; progress goes to stderr.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};

use lil::codec;
use lil::eval::{
    self, eval_albedo_shading, eval_normals, eval_segmentation, evaluate_offset,
    RobustnessMethod,
};
use lil::generator::{GenArch, Generator, IntrinsicKind, NoiseBundle, Offset};
use lil::procgen::{self, relight, render, scene_from_latent, ClassLabel, N_LIGHTS};
use lil::rng;
use lil::search::{
    self, find_offset, find_relighting_offsets, random_direction_like, SearchConfig, SearchResult,
};
use lil::teachers::OracleTeacher;
use lil::trainer::{self, RegTrainConfig, TrainConfig};

const SEED: u64 = 202_608;

type Verdict = Result<String, String>;

struct Gate {
    failed: bool,
}

impl Gate {
    fn judge(&mut self, name: &str, verdict: Verdict) {
        match verdict {
            Ok(detail) => println!("{name} PASS: {detail}"),
            Err(detail) => {
                self.failed = true;
                println!("{name} FAIL: {detail}");
            }
        }
    }
}

/// Runs a criterion body, turning panics and library errors into FAIL text.
fn run<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "opaque panic".into());
            Err(format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: lil::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn bits_equal3(a: &Array3<f32>, b: &Array3<f32>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn progress(msg: &str) {
    eprintln!("[acceptance {:>7.1}s] {msg}", START.elapsed().as_secs_f64());
}

static START: std::sync::LazyLock<Instant> = std::sync::LazyLock::new(Instant::now);

// --- A1: zero offset changes nothing ---

fn a1() -> Verdict {
    let gen = lift(Generator::new(GenArch::default(), 11))?;
    let zero = Offset {
        kind: IntrinsicKind::IdentityControl,
        delta: Array2::zeros((gen.arch.n_layers(), gen.arch.dw)),
        checkpoint_id: gen.content_id(),
        final_loss: 0.0,
        train_scene_count: 0,
    };
    let noise = NoiseBundle::from_seed(rng::substream_seed(SEED, "a1/noise"), &gen.arch);
    let latents = rng::latent_pool(SEED, "a1/latents", 100, gen.arch.dz);
    for (i, z) in latents.iter().enumerate() {
        let base = gen.broadcast(lift(gen.map_latent(z.view()))?.view());
        let plain = lift(gen.synthesize(&base, &noise))?;
        let shifted = lift(gen.synthesize(&lift(gen.apply_offset(&base, &zero))?, &noise))?;
        if !bits_equal3(&plain, &shifted) {
            return Err(format!("latent {i} changed under the zero offset"));
        }
    }
    Ok("synthesis is bit-identical under a zero offset for 100 latents".into())
}

// --- A2: the renderer factorizes and its geometry ignores the light ---

fn a2() -> Verdict {
    let latents = rng::latent_pool(SEED, "a2/latents", 100, 16);
    for (i, z) in latents.iter().enumerate() {
        let spec = lift(scene_from_latent(z.view()))?;
        let b = render(&spec);
        let (h, w, _) = b.image.dim();
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let img = b.image[(r, c, ch)];
                    let prod = b.albedo[(r, c, ch)] * b.shading[(r, c)];
                    if img < 1.0 {
                        if img.to_bits() != prod.to_bits() {
                            return Err(format!(
                                "scene {i} pixel ({r},{c},{ch}): image {img} but albedo*shading {prod}"
                            ));
                        }
                    } else if prod < 1.0 {
                        return Err(format!(
                            "scene {i} pixel ({r},{c},{ch}) saturated with product {prod} < 1"
                        ));
                    }
                }
            }
        }
        for j in 0..N_LIGHTS {
            let rb = render(&lift(relight(&spec, j))?);
            let same = bits_equal3(&rb.normal, &b.normal)
                && bits_equal3(&rb.albedo, &b.albedo)
                && bits_equal3(&rb.masks, &b.masks)
                && rb
                    .depth
                    .iter()
                    .zip(b.depth.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("scene {i}: geometry map changed under relighting {j}"));
            }
        }
    }
    Ok(format!(
        "image equals albedo*shading bitwise off saturation and geometry maps survive all {N_LIGHTS} relightings, 100 scenes"
    ))
}

// --- A3: segmentation and angular metrics match independent oracles ---

fn brute_force_seg(pred: &Array2<f32>, gt: &Array2<f32>) -> (f64, f64) {
    let total = pred.len();
    let cells = || pred.iter().zip(gt.iter());
    let agree = cells().filter(|(p, g)| (**p == 1.0) == (**g == 1.0)).count();
    let acc = agree as f64 / total as f64;
    // An absent class on one side leaves the intersection empty, so plain
    // inter/union already yields 0 there; only the both-empty case needs
    // the explicit 1.
    let iou = |target: f32| {
        let inter = cells()
            .filter(|(p, g)| **p == target && **g == target)
            .count();
        let union = cells()
            .filter(|(p, g)| **p == target || **g == target)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let miou = (iou(1.0) + iou(0.0)) / 2.0;
    (acc, miou)
}

fn a3() -> Verdict {
    let mut r = rng::substream(SEED, "a3/masks");
    for case in 0..100 {
        let mut draw = || {
            Array2::from_shape_fn((8, 8), |_| {
                if rand::Rng::gen_bool(&mut r, 0.5) {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let pred = draw();
        let gt = draw();
        let s = lift(eval_segmentation(pred.view(), gt.view()))?;
        let (acc, miou) = brute_force_seg(&pred, &gt);
        if s.acc != acc || s.miou != miou {
            return Err(format!(
                "case {case}: metric acc {} / miou {} vs brute force {acc} / {miou}",
                s.acc, s.miou
            ));
        }
    }

    let ex = Array3::from_shape_fn((8, 8, 3), |(_, _, c)| f32::from(c == 0));
    let ey = Array3::from_shape_fn((8, 8, 3), |(_, _, c)| f32::from(c == 1));
    let enc_x = lift(codec::encode_normal(ex.view()))?;
    let enc_y = lift(codec::encode_normal(ey.view()))?;
    let angular = lift(eval_normals(enc_x.view(), enc_y.view()))?.angular;
    let err = (angular - std::f64::consts::FRAC_PI_2).abs();
    if err > 1e-6 {
        return Err(format!("orthogonal fields scored {angular}, off by {err}"));
    }
    Ok(format!(
        "100 mask pairs match brute force exactly; orthogonal fields score pi/2 within {err:.1e}"
    ))
}

// --- shared pipeline artifacts ---

struct Artifacts {
    dataset_dir: PathBuf,
    generator: Generator,
    heldout_l1: f32,
}

fn build_artifacts(root: &Path) -> Result<Artifacts, String> {
    let dataset_dir = root.join("dataset");
    progress("rendering the 2000-scene dataset");
    let p = procgen::write_dataset(&dataset_dir, 2000, 1, 64, rng::substream_seed(SEED, "dataset"));
    lift(p)?;
    progress("training the generator at the default budget");
    let outcome = lift(trainer::train_generator(
        &dataset_dir,
        &TrainConfig::default(),
        &root.join("generator.ckpt"),
        &root.join("generator_train.csv"),
    ))?;
    progress(&format!(
        "generator trained, held-out L1 {:.4}",
        outcome.final_heldout_l1
    ));
    Ok(Artifacts {
        dataset_dir,
        generator: outcome.generator,
        heldout_l1: outcome.final_heldout_l1,
    })
}

// --- A5: the searched normal direction beats chance and generalizes ---

struct SearchedKinds {
    normal: SearchResult,
    others: Vec<SearchResult>,
}

fn a5(gen: &Generator, cfg: &SearchConfig, normal: &SearchResult) -> Verdict {
    let pool = search::search_pool(cfg, gen.arch.dz);
    let (train_z, val_z) = pool.split_at(cfg.n_train_scenes);
    let noise_seed = search::search_noise(cfg, gen).seed;

    let train_rep = lift(evaluate_offset(gen, &normal.offset, train_z, noise_seed))?;
    let val_rep = lift(evaluate_offset(gen, &normal.offset, val_z, noise_seed))?;
    let ang_train = train_rep.mean("angular").unwrap();
    let ang_val = val_rep.mean("angular").unwrap();
    if ang_val > 1.25 * ang_train {
        return Err(format!(
            "held-out angular {ang_val:.4} exceeds 1.25x training angular {ang_train:.4}"
        ));
    }

    let searched_l1 = val_rep.mean("l1").unwrap();
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..5 {
        let rd = random_direction_like(&normal.offset, rng::substream_seed(SEED, &format!("a5/random/{seed}")));
        let rd_l1 = lift(evaluate_offset(gen, &rd, val_z, noise_seed))?
            .mean("l1")
            .unwrap();
        worst_ratio = worst_ratio.min(rd_l1 / searched_l1);
    }
    if worst_ratio < 2.0 {
        return Err(format!(
            "an equal-norm random direction came within {worst_ratio:.2}x of the searched one (needs >= 2x)"
        ));
    }
    Ok(format!(
        "angular train {ang_train:.4} vs held-out {ang_val:.4}; random directions are {worst_ratio:.1}x worse at best"
    ))
}

// --- A6: every intrinsic kind trains well and generalizes ---

fn a6(gen: &Generator, cfg: &SearchConfig, kinds: &SearchedKinds) -> Verdict {
    let mut details = Vec::new();
    for r in std::iter::once(&kinds.normal).chain(kinds.others.iter()) {
        let red = r.reduction();
        let kind = r.offset.kind;
        if red < 0.80 {
            return Err(format!(
                "{kind}: training loss fell only {:.0}% (needs 80%)",
                red * 100.0
            ));
        }
        if r.val_loss > 1.25 * r.train_loss {
            return Err(format!(
                "{kind}: val loss {:.4} exceeds 1.25x train loss {:.4}",
                r.val_loss, r.train_loss
            ));
        }
        details.push(format!("{kind} {:.0}%", red * 100.0));
    }

    let seg = kinds
        .others
        .iter()
        .find(|r| matches!(r.offset.kind, IntrinsicKind::Segmentation(_)))
        .ok_or("segmentation search missing")?;
    let pool = search::search_pool(cfg, gen.arch.dz);
    let val_z = &pool[cfg.n_train_scenes..];
    let noise_seed = search::search_noise(cfg, gen).seed;
    let miou = lift(evaluate_offset(gen, &seg.offset, val_z, noise_seed))?
        .mean("miou")
        .unwrap();

    // The all-foreground predictor is the degenerate competitor: it nails
    // recall with zero discrimination.
    let ones = Array2::from_elem((procgen::RES, procgen::RES), 1.0f32);
    let mut baseline = 0.0;
    for z in val_z {
        let b = render(&lift(scene_from_latent(z.view()))?);
        let gt = b.masks.index_axis(ndarray::Axis(2), ClassLabel::Sphere.index());
        baseline += lift(eval_segmentation(ones.view(), gt))?.miou;
    }
    baseline /= val_z.len() as f64;
    if miou < 0.5 {
        return Err(format!("segmentation held-out mIoU {miou:.3} below 0.5"));
    }
    if miou <= baseline {
        return Err(format!(
            "segmentation mIoU {miou:.3} does not beat the all-foreground baseline {baseline:.3}"
        ));
    }
    Ok(format!(
        "loss reductions {}; seg mIoU {miou:.3} vs all-foreground {baseline:.3}",
        details.join(", ")
    ))
}

// --- A7: controls fail the way they should ---

fn a7(gen: &Generator, cfg: &SearchConfig) -> Verdict {
    progress("running control searches");
    let identity = lift(find_offset(IntrinsicKind::IdentityControl, gen, &OracleTeacher, cfg))?;
    let swap = lift(find_offset(IntrinsicKind::SwapControl, gen, &OracleTeacher, cfg))?;

    let pool = search::search_pool(cfg, gen.arch.dz);
    let mut mean_w = 0.0f32;
    for z in &pool[..cfg.n_train_scenes] {
        mean_w += gen
            .broadcast(lift(gen.map_latent(z.view()))?.view())
            .mean_row_norm();
    }
    mean_w /= cfg.n_train_scenes as f32;

    let swap_red = swap.reduction();
    if swap_red >= 0.5 {
        return Err(format!(
            "swap control reduced its loss by {:.0}% (must stay under 50%)",
            swap_red * 100.0
        ));
    }
    if identity.train_loss > 1e-3 {
        return Err(format!(
            "identity control final loss {} above 1e-3",
            identity.train_loss
        ));
    }
    let d_norm = identity.offset.norm();
    if d_norm > 0.01 * mean_w {
        return Err(format!(
            "identity offset norm {d_norm} above 1% of mean style norm {mean_w}"
        ));
    }
    Ok(format!(
        "swap stuck at {:.0}% reduction; identity loss {} with |d| = {d_norm} (styles average {mean_w:.1})",
        swap_red * 100.0,
        identity.train_loss
    ))
}

// --- A8: albedo times shading reassembles the image only for matched scenes ---

fn a8(gen: &Generator, albedo: &Offset, shading: &Offset) -> Verdict {
    let latents = rng::latent_pool(SEED, "a8/latents", 50, gen.arch.dz);
    let noise = NoiseBundle::from_seed(rng::substream_seed(SEED, "a8/noise"), &gen.arch);

    let mut images = Vec::new();
    let mut albedos = Vec::new();
    let mut shadings = Vec::new();
    for z in &latents {
        let base = gen.broadcast(lift(gen.map_latent(z.view()))?.view());
        images.push(lift(gen.synthesize(&base, &noise))?);
        albedos.push(lift(gen.synthesize(&lift(gen.apply_offset(&base, albedo))?, &noise))?);
        let s_img = lift(gen.synthesize(&lift(gen.apply_offset(&base, shading))?, &noise))?;
        shadings.push(lift(codec::decode_shading(s_img.view()))?);
    }

    let n = latents.len();
    let mut matched = 0.0;
    let mut shuffled = 0.0;
    for i in 0..n {
        matched += lift(eval_albedo_shading(
            images[i].view(),
            albedos[i].view(),
            shadings[i].view(),
        ))?
        .0;
        shuffled += lift(eval_albedo_shading(
            images[i].view(),
            albedos[i].view(),
            shadings[(i + 1) % n].view(),
        ))?
        .0;
    }
    matched /= n as f64;
    shuffled /= n as f64;
    if matched > 0.5 * shuffled {
        return Err(format!(
            "matched residual {matched:.4} above half the shuffled residual {shuffled:.4}"
        ));
    }
    Ok(format!(
        "matched residual {matched:.4} vs shuffled {shuffled:.4} over 50 scenes"
    ))
}

// --- A9: offset normals shrug off relighting ---

fn a9(root: &Path, art: &Artifacts, cfg: &SearchConfig, normal: &Offset) -> Verdict {
    let gen = &art.generator;
    progress("training the baseline regressor");
    let reg = lift(trainer::train_baseline_regressor(
        &art.dataset_dir,
        &RegTrainConfig::default(),
        &root.join("regressor.ckpt"),
        &root.join("regressor_train.csv"),
    ))?
    .regressor;

    progress(&format!("searching {N_LIGHTS} relighting offsets (the long stage)"));
    let relights: Vec<Offset> = lift(find_relighting_offsets(gen, &OracleTeacher, cfg, N_LIGHTS))?
        .into_iter()
        .map(|r| r.offset)
        .collect();

    let latents = rng::latent_pool(SEED, "a9/latents", 50, gen.arch.dz);
    let noise_seed = rng::substream_seed(SEED, "a9/noise");
    let gen_rep = lift(eval::eval_relighting_robustness(
        gen,
        RobustnessMethod::GeneratorOffset {
            normal,
            relights: &relights,
        },
        &latents,
        noise_seed,
    ))?;
    let base_rep = lift(eval::eval_relighting_robustness(
        gen,
        RobustnessMethod::BaselineRegressor {
            regressor: &reg,
            conditions: N_LIGHTS,
        },
        &latents,
        noise_seed,
    ))?;
    let oracle_rep = lift(eval::eval_relighting_robustness(
        gen,
        RobustnessMethod::Oracle {
            conditions: N_LIGHTS,
        },
        &latents,
        noise_seed,
    ))?;

    let report_dir = root.join("robustness_report");
    lift(lil::report::emit_report(
        &[],
        &[gen_rep.clone(), base_rep.clone(), oracle_rep.clone()],
        &[],
        &report_dir,
    ))?;
    let csv = std::fs::read_to_string(report_dir.join("robustness.csv"))
        .map_err(|e| e.to_string())?;
    if !csv.lines().any(|l| l.starts_with("baseline_regressor,")) {
        return Err("robustness report omits the baseline-regressor distribution".into());
    }

    if gen_rep.mean_inner < 0.9 {
        return Err(format!(
            "generator-offset mean inner product {:.4} below 0.9",
            gen_rep.mean_inner
        ));
    }
    if oracle_rep.mean_inner != 1.0
        || oracle_rep.inner.iter().flatten().any(|v| *v != 1.0)
    {
        return Err(format!(
            "oracle mean inner product {} is not exactly 1.0",
            oracle_rep.mean_inner
        ));
    }
    Ok(format!(
        "generator-offset inner {:.4} ({:.1} deg), baseline {:.4} ({:.1} deg), oracle exactly 1.0, {} scenes x {N_LIGHTS} conditions",
        gen_rep.mean_inner,
        gen_rep.mean_angular_deg,
        base_rep.mean_inner,
        base_rep.mean_angular_deg,
        latents.len()
    ))
}

// --- A10: the CLI pipeline reproduces itself byte for byte ---

fn pipeline(config: &Path, out: &Path) -> Result<(), String> {
    let steps: [&[&str]; 4] = [
        &["procgen"],
        &["train"],
        &["find-direction", "--kind", "normal"],
        &["evaluate", "--kind", "normal"],
    ];
    for args in steps {
        let out_flag = out.to_str().ok_or("non-utf8 temp path")?;
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_lil"))
            .args(args)
            .arg("--config")
            .arg(config)
            .args(["--out", out_flag])
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("pipeline step {args:?} failed in {out_flag}"));
        }
    }
    Ok(())
}

fn a10(root: &Path) -> Verdict {
    let config = root.join("a10.toml");
    std::fs::write(
        &config,
        r#"
seed = 13
out_root = "unused"

[procgen]
n_scenes = 8
dz = 16

[trainer]
n_scenes = 8
steps = 20
batch = 2
holdout = 2
eval_every = 10

[search]
n_train_scenes = 4
n_val_scenes = 2
steps = 10
batch = 2

[eval]
n_scenes = 3
qualitative = 1
"#,
    )
    .map_err(|e| e.to_string())?;

    let (run_a, run_b) = (root.join("a10_run_a"), root.join("a10_run_b"));
    pipeline(&config, &run_a)?;
    pipeline(&config, &run_b)?;

    let rel = "reports/normal/metrics_normal.csv";
    let csv_a = std::fs::read(run_a.join(rel)).map_err(|e| e.to_string())?;
    let csv_b = std::fs::read(run_b.join(rel)).map_err(|e| e.to_string())?;
    if csv_a != csv_b {
        return Err("metric CSVs differ between identical runs".into());
    }
    let idx_a = std::fs::read(run_a.join("reports/normal/index.json")).map_err(|e| e.to_string())?;
    let idx_b = std::fs::read(run_b.join("reports/normal/index.json")).map_err(|e| e.to_string())?;
    if idx_a != idx_b {
        return Err("report indexes differ between identical runs".into());
    }
    Ok("two full pipeline runs emitted byte-identical metric CSVs and indexes".into())
}

fn main() {
    let _ = &*START;
    let mut gate = Gate { failed: false };
    let ws = tempfile::tempdir().expect("workspace tempdir");
    let root = ws.path();

    gate.judge("A1", run(a1));
    gate.judge("A2", run(a2));
    gate.judge("A3", run(a3));

    let artifacts = run(|| build_artifacts(root));
    gate.judge(
        "A4",
        artifacts.as_ref().map_err(Clone::clone).and_then(|a| {
            if a.heldout_l1 <= 0.05 {
                Ok(format!("held-out reconstruction L1 {:.4} (limit 0.05)", a.heldout_l1))
            } else {
                Err(format!("held-out reconstruction L1 {:.4} above 0.05", a.heldout_l1))
            }
        }),
    );

    let cfg = SearchConfig::default();
    let searched = artifacts.as_ref().map_err(Clone::clone).and_then(|art| {
        run(|| {
            progress("searching the normal offset");
            let normal = lift(find_offset(
                IntrinsicKind::Normal,
                &art.generator,
                &OracleTeacher,
                &cfg,
            ))?;
            let mut others = Vec::new();
            for kind in [
                IntrinsicKind::Depth,
                IntrinsicKind::Albedo,
                IntrinsicKind::Shading,
                IntrinsicKind::Segmentation(ClassLabel::Sphere),
            ] {
                progress(&format!("searching the {kind} offset"));
                others.push(lift(find_offset(kind, &art.generator, &OracleTeacher, &cfg))?);
            }
            Ok(SearchedKinds { normal, others })
        })
    });

    match (&artifacts, &searched) {
        (Ok(art), Ok(kinds)) => {
            gate.judge("A5", run(|| a5(&art.generator, &cfg, &kinds.normal)));
            gate.judge("A6", run(|| a6(&art.generator, &cfg, kinds)));
            gate.judge("A7", run(|| a7(&art.generator, &cfg)));
            let by_kind = |k: IntrinsicKind| {
                kinds
                    .others
                    .iter()
                    .find(|r| r.offset.kind == k)
                    .map(|r| &r.offset)
                    .expect("searched kind present")
            };
            let albedo = by_kind(IntrinsicKind::Albedo);
            let shading = by_kind(IntrinsicKind::Shading);
            gate.judge("A8", run(|| a8(&art.generator, albedo, shading)));
            gate.judge("A9", run(|| a9(root, art, &cfg, &kinds.normal.offset)));
        }
        _ => {
            let why = searched
                .as_ref()
                .err()
                .or(artifacts.as_ref().err())
                .cloned()
                .unwrap_or_default();
            for name in ["A5", "A6", "A7", "A8", "A9"] {
                gate.judge(name, Err(format!("prerequisite stage failed: {why}")));
            }
        }
    }

    gate.judge("A10", run(|| a10(root)));

    progress("done");
    if gate.failed {
        std::process::exit(1);
    }
}
