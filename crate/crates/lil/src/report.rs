//! Report emission: metric tables as CSV, robustness boxplots as PNG with a
//! sidecar data file, qualitative image grids, and an index that ties input
//! artifacts to output files by content hash. Everything written here is
//! byte-deterministic for identical inputs.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{LilError, Result};
use crate::eval::{MetricReport, RobustnessReport};
use crate::io;

/// "segmentation:sphere" -> "segmentation_sphere", for file names.
pub fn file_token(kind_token: &str) -> String {
    kind_token.replace(':', "_")
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    io::atomic_write(path, text.as_bytes())
}

/// One row per scene plus a header; means are recomputed by readers, not
/// stored, so the table is the single source of truth.
pub fn emit_metrics_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut out = String::from("scene");
    for c in &report.columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, row) in report.rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_text_atomic(path, &out)
}

/// Long-form table: method, scene, condition, inner product.
pub fn emit_robustness_csv(reports: &[RobustnessReport], path: &Path) -> Result<()> {
    let mut out = String::from("method,scene,condition,inner\n");
    for report in reports {
        for (scene, row) in report.inner.iter().enumerate() {
            for (cond, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{scene},{cond},{v}\n", report.method));
            }
        }
    }
    write_text_atomic(path, &out)
}

fn emit_box_stats_csv(reports: &[RobustnessReport], path: &Path) -> Result<()> {
    let mut out =
        String::from("method,median,q1,q3,whisker_lo,whisker_hi,outliers,mean_inner,mean_angular_deg\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.stats.median,
            r.stats.q1,
            r.stats.q3,
            r.stats.lo,
            r.stats.hi,
            r.stats.outliers.len(),
            r.mean_inner,
            r.mean_angular_deg,
        ));
    }
    write_text_atomic(path, &out)
}

// --- minimal rasterizer for the plots ---

fn fill_rect(canvas: &mut Array3<f32>, r0: usize, c0: usize, r1: usize, c1: usize, color: [f32; 3]) {
    let (h, w, _) = canvas.dim();
    for r in r0..r1.min(h) {
        for c in c0..c1.min(w) {
            for ch in 0..3 {
                canvas[(r, c, ch)] = color[ch];
            }
        }
    }
}

const PLOT_H: usize = 300;
const PLOT_W_PER_BOX: usize = 110;
const PLOT_MARGIN: usize = 40;
const INK: [f32; 3] = [0.15, 0.15, 0.2];
const BOX_FILL: [f32; 3] = [0.65, 0.75, 0.9];

/// Draws one box-and-whisker column per method. Axis text is omitted (no
/// font dependency); the sidecar CSV carries the exact numbers.
pub fn render_boxplot(reports: &[RobustnessReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(LilError::Invalid("no reports to plot".into()));
    }
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for r in reports {
        for v in r.inner.iter().flatten() {
            vmin = vmin.min(*v);
            vmax = vmax.max(*v);
        }
    }
    if vmin == vmax {
        vmin -= 0.5;
        vmax += 0.5;
    }
    let pad = 0.05 * (vmax - vmin);
    let (vmin, vmax) = (vmin - pad, vmax + pad);

    let w = 2 * PLOT_MARGIN + PLOT_W_PER_BOX * reports.len();
    let mut canvas = Array3::from_elem((PLOT_H, w, 3), 1.0f32);
    let y = |v: f64| -> usize {
        let t = (v - vmin) / (vmax - vmin);
        let row = (PLOT_H - PLOT_MARGIN) as f64 - t * (PLOT_H - 2 * PLOT_MARGIN) as f64;
        row.round().clamp(0.0, (PLOT_H - 1) as f64) as usize
    };

    // Axis spine and quarter-height tick marks.
    fill_rect(&mut canvas, PLOT_MARGIN, PLOT_MARGIN - 1, PLOT_H - PLOT_MARGIN, PLOT_MARGIN, INK);
    for tick in 0..5 {
        let v = vmin + (vmax - vmin) * tick as f64 / 4.0;
        let r = y(v);
        fill_rect(&mut canvas, r, PLOT_MARGIN - 6, r + 1, PLOT_MARGIN, INK);
    }

    for (i, rep) in reports.iter().enumerate() {
        let cx = PLOT_MARGIN + PLOT_W_PER_BOX * i + PLOT_W_PER_BOX / 2;
        let half = 20;
        let s = &rep.stats;
        let (top, bot) = (y(s.q3), y(s.q1));
        fill_rect(&mut canvas, top, cx - half, bot + 1, cx + half, BOX_FILL);
        // Box border, median, whiskers, caps.
        fill_rect(&mut canvas, top, cx - half, top + 1, cx + half, INK);
        fill_rect(&mut canvas, bot, cx - half, bot + 1, cx + half, INK);
        fill_rect(&mut canvas, top, cx - half, bot + 1, cx - half + 1, INK);
        fill_rect(&mut canvas, top, cx + half - 1, bot + 1, cx + half, INK);
        let med = y(s.median);
        fill_rect(&mut canvas, med, cx - half, med + 1, cx + half, INK);
        let (hi, lo) = (y(s.hi), y(s.lo));
        fill_rect(&mut canvas, hi, cx, top, cx + 1, INK);
        fill_rect(&mut canvas, bot, cx, lo + 1, cx + 1, INK);
        fill_rect(&mut canvas, hi, cx - half / 2, hi + 1, cx + half / 2, INK);
        fill_rect(&mut canvas, lo, cx - half / 2, lo + 1, cx + half / 2, INK);
        for v in &s.outliers {
            let r = y(*v);
            fill_rect(&mut canvas, r.saturating_sub(1), cx - 1, r + 2, cx + 2, INK);
        }
    }
    io::write_png(path, canvas.view())
}

/// Tiles equally sized images into a row-major grid with a thin separator,
/// for side-by-side qualitative figures.
pub fn qualitative_grid(images: &[Array3<f32>], cols: usize, path: &Path) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(LilError::Invalid("nothing to tile".into()));
    }
    let (h, w, c) = images[0].dim();
    if images.iter().any(|im| im.dim() != (h, w, c)) {
        return Err(LilError::Invalid("grid images differ in shape".into()));
    }
    const SEP: usize = 2;
    let rows = images.len().div_ceil(cols);
    let canvas_h = rows * h + (rows - 1) * SEP;
    let canvas_w = cols * w + (cols - 1) * SEP;
    let mut canvas = Array3::from_elem((canvas_h, canvas_w, 3), 1.0f32);
    for (idx, im) in images.iter().enumerate() {
        let r0 = (idx / cols) * (h + SEP);
        let c0 = (idx % cols) * (w + SEP);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    canvas[(r0 + i, c0 + j, ch)] = im[(i, j, ch)].clamp(0.0, 1.0);
                }
            }
        }
    }
    io::write_png(path, canvas.view())
}

// --- the index ---

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub sha256: String,
}

/// Ties a report directory together: which artifacts went in, which files
/// came out, and the headline means, all content-addressed.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportIndex {
    pub checkpoint: Option<String>,
    pub inputs: Vec<IndexEntry>,
    pub outputs: Vec<IndexEntry>,
    /// kind token -> column -> mean, straight from the metric reports.
    pub means: BTreeMap<String, BTreeMap<String, f64>>,
    /// Angular unit for every angular column in this directory.
    pub angular_unit: String,
}

fn hash_entry(root: &Path, rel: &str) -> Result<IndexEntry> {
    Ok(IndexEntry {
        name: rel.to_string(),
        sha256: io::sha256_file(&root.join(rel))?,
    })
}

/// Writes every table and plot for the given reports into `out_dir` and
/// returns the index that was stored as `index.json`. Empty input lists
/// produce just the (empty) index.
pub fn emit_report(
    metric_reports: &[MetricReport],
    robustness: &[RobustnessReport],
    input_files: &[PathBuf],
    out_dir: &Path,
) -> Result<ReportIndex> {
    std::fs::create_dir_all(out_dir.join("plots")).map_err(|e| LilError::io(out_dir, e))?;

    let mut outputs = Vec::new();
    let mut means = BTreeMap::new();
    let mut checkpoint = None;
    for report in metric_reports {
        let rel = format!("metrics_{}.csv", file_token(&report.kind.token()));
        emit_metrics_csv(report, &out_dir.join(&rel))?;
        outputs.push(rel);
        let cols: BTreeMap<String, f64> = report
            .columns
            .iter()
            .cloned()
            .zip(report.means.iter().copied())
            .collect();
        means.insert(report.kind.token(), cols);
        checkpoint.get_or_insert_with(|| report.checkpoint.clone());
    }
    if !robustness.is_empty() {
        emit_robustness_csv(robustness, &out_dir.join("robustness.csv"))?;
        outputs.push("robustness.csv".into());
        emit_box_stats_csv(robustness, &out_dir.join("robustness_box_stats.csv"))?;
        outputs.push("robustness_box_stats.csv".into());
        render_boxplot(robustness, &out_dir.join("plots/robustness_boxplot.png"))?;
        outputs.push("plots/robustness_boxplot.png".into());
    }

    // File names only: the hash identifies the content, and reports stay
    // byte-identical when the same experiment runs under a different root.
    let mut inputs = Vec::new();
    for p in input_files {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        inputs.push(IndexEntry {
            name,
            sha256: io::sha256_file(p)?,
        });
    }
    let index = ReportIndex {
        checkpoint,
        inputs,
        outputs: outputs
            .iter()
            .map(|rel| hash_entry(out_dir, rel))
            .collect::<Result<_>>()?,
        means,
        angular_unit: "radians".into(),
    };
    io::write_json_atomic(&out_dir.join("index.json"), &index)?;
    Ok(index)
}
