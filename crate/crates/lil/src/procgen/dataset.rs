//! Dataset writer: renders a seeded family of scenes to disk with aligned
//! ground truth and a manifest that makes every record reproducible.
//!
//! Layout under the dataset directory:
//!
//! ```text
//! scenes/<id>_<slot>.png          8-bit RGB render
//! gt/<id>_<slot>_<kind>.bin       float maps (normal, depth, albedo, ...)
//! manifest.json
//! ```
//!
//! Slot 0 of every scene uses the light implied by the scene's own latent
//! ("native", `light_index: null` in the manifest); higher slots are relights
//! from the fixed table. Training the generator uses native records only, so
//! each training target is exactly the render of `scene_from_latent(z)`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{LilError, Result};
use crate::io;
use crate::procgen::{
    light_table, relight, render, scene_from_latent, ClassLabel, IntrinsicBundle, AMBIENT, FAR,
    NEAR, N_LIGHTS, RES,
};
use crate::rng;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Ground-truth kinds written per record, in file-name order.
pub const GT_KINDS: [&str; 7] = [
    "normal",
    "depth",
    "albedo",
    "shading",
    "mask_floor",
    "mask_sphere",
    "mask_box",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_id: usize,
    /// Seed that regenerates this scene's latent via [`scene_latent`].
    pub scene_seed: u64,
    pub light_slot: usize,
    /// Index into the relighting table, or `None` for the native light.
    pub light_index: Option<usize>,
    pub image: String,
    pub gt: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub k_lights: usize,
    pub resolution: usize,
    pub dz: usize,
    pub near: f64,
    pub far: f64,
    pub ambient: f64,
    pub class_labels: Vec<String>,
    /// (azimuth, elevation) pairs of the relighting table.
    pub light_table: Vec<(f64, f64)>,
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_NAME))?;
        if manifest.resolution != RES {
            return Err(LilError::Invalid(format!(
                "dataset resolution {} does not match the fixed {RES}",
                manifest.resolution
            )));
        }
        Ok(manifest)
    }

    /// Records whose light comes from the latent itself.
    pub fn native_records(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(|r| r.light_index.is_none())
    }
}

/// Regenerates the latent for a recorded scene seed.
pub fn scene_latent(scene_seed: u64, dz: usize) -> Array1<f32> {
    rng::standard_normal(&mut rng::rng_from_seed(scene_seed), dz)
}

fn record_paths(scene_id: usize, slot: usize) -> (String, BTreeMap<String, String>) {
    let stem = format!("{scene_id:05}_{slot}");
    let image = format!("scenes/{stem}.png");
    let gt = GT_KINDS
        .iter()
        .map(|kind| (kind.to_string(), format!("gt/{stem}_{kind}.bin")))
        .collect();
    (image, gt)
}

fn write_gt(dir: &Path, gt: &BTreeMap<String, String>, bundle: &IntrinsicBundle) -> Result<()> {
    let scalar = |m: &ndarray::Array2<f32>| {
        m.clone().insert_axis(ndarray::Axis(2))
    };
    for (kind, rel) in gt {
        let path = dir.join(rel);
        match kind.as_str() {
            "normal" => io::write_f32_map(&path, bundle.normal.view())?,
            "albedo" => io::write_f32_map(&path, bundle.albedo.view())?,
            "depth" => io::write_f32_map(&path, scalar(&bundle.depth).view())?,
            "shading" => io::write_f32_map(&path, scalar(&bundle.shading).view())?,
            "mask_floor" | "mask_sphere" | "mask_box" => {
                let class = ClassLabel::parse(kind.strip_prefix("mask_").unwrap())?;
                let mask = bundle
                    .masks
                    .index_axis(ndarray::Axis(2), class.index())
                    .to_owned();
                io::write_f32_map(&path, scalar(&mask).view())?;
            }
            other => return Err(LilError::Invalid(format!("unknown gt kind '{other}'"))),
        }
    }
    Ok(())
}

/// Renders `n_scenes * k_lights` records into `dir` and writes the manifest.
/// Everything is derived from `seed`; a second call with the same arguments
/// reproduces every file byte for byte.
pub fn write_dataset(
    dir: &Path,
    n_scenes: usize,
    k_lights: usize,
    dz: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if k_lights == 0 || k_lights > N_LIGHTS + 1 {
        return Err(LilError::Config(format!(
            "k_lights must be in 1..={}, got {k_lights}",
            N_LIGHTS + 1
        )));
    }
    let mut records = Vec::with_capacity(n_scenes * k_lights);
    for scene_id in 0..n_scenes {
        let scene_seed = rng::substream_seed(seed, &format!("procgen/scene/{scene_id}"));
        let z = scene_latent(scene_seed, dz);
        let spec = scene_from_latent(z.view())?;
        for slot in 0..k_lights {
            let (light_index, lit_spec) = if slot == 0 {
                (None, spec.clone())
            } else {
                let j = (slot - 1) % N_LIGHTS;
                (Some(j), relight(&spec, j)?)
            };
            let bundle = render(&lit_spec);
            let (image, gt) = record_paths(scene_id, slot);
            io::write_png(&dir.join(&image), bundle.image.view())?;
            write_gt(dir, &gt, &bundle)?;
            records.push(DatasetRecord {
                scene_id,
                scene_seed,
                light_slot: slot,
                light_index,
                image,
                gt,
            });
        }
        if scene_id % 250 == 249 {
            log::info!("rendered {}/{} scenes", scene_id + 1, n_scenes);
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        seed,
        n_scenes,
        k_lights,
        resolution: RES,
        dz,
        near: NEAR,
        far: FAR,
        ambient: AMBIENT,
        class_labels: ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect(),
        light_table: light_table().to_vec(),
        records,
    };
    io::write_json_atomic(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

