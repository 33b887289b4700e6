//! Teachers supply the target intrinsic maps that offset search optimizes
//! toward. Three implementations share one interface:
//!
//! * [`OracleTeacher`] re-derives the scene from the latent that generated
//!   an image and renders exact maps. Targets are analytic ground truth, so
//!   search error isolates what the generator can express.
//! * [`RegressorTeacher`] wraps the trained baseline and predicts from the
//!   image alone, the way an off-the-shelf network would.
//! * [`ExternalTeacher`] hands images to an external process through a file
//!   exchange directory, for plugging in predictors that live outside this
//!   crate.
//!
//! All teachers emit [`TargetMap`]s, which carry their own range contracts.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::path::PathBuf;
use std::time::Duration;

use crate::codec::{self, TargetMap};
use crate::error::{LilError, Result};
use crate::generator::IntrinsicKind;
use crate::io;
use crate::procgen::{relight, render, scene_from_latent};
use crate::regressor::Regressor;

/// The latent a generated image came from. Only meaningful for images this
/// toolkit generated itself; real photographs have no handle.
#[derive(Debug, Clone)]
pub struct SceneHandle {
    pub z: Array1<f32>,
}

/// One query item: the generated image and, when known, its provenance.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: Array3<f32>,
    pub handle: Option<SceneHandle>,
}

pub trait Teacher {
    fn name(&self) -> &str;

    fn supports(&self, kind: IntrinsicKind) -> bool;

    /// Target maps for a batch, in batch order. Implementations must either
    /// return one validated map per item or an error; silent dropping is not
    /// allowed.
    fn predict(&self, kind: IntrinsicKind, batch: &[BatchItem]) -> Result<Vec<TargetMap>>;
}

fn unsupported(teacher: &str, kind: IntrinsicKind) -> LilError {
    LilError::UnsupportedKind {
        teacher: teacher.to_string(),
        kind: kind.token(),
    }
}

// --- oracle ---

/// Exact targets from the renderer. Requires scene handles; geometry kinds
/// ignore the lighting encoded in the latent entirely, which makes the
/// oracle lighting-invariant for everything except shading and relighting.
pub struct OracleTeacher;

impl Teacher for OracleTeacher {
    fn name(&self) -> &str {
        "oracle"
    }

    fn supports(&self, kind: IntrinsicKind) -> bool {
        !kind.is_control()
    }

    fn predict(&self, kind: IntrinsicKind, batch: &[BatchItem]) -> Result<Vec<TargetMap>> {
        if !self.supports(kind) {
            return Err(unsupported("oracle", kind));
        }
        batch
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let handle = item.handle.as_ref().ok_or_else(|| {
                    LilError::Invalid(format!("oracle needs a scene handle for item {i}"))
                })?;
                let spec = scene_from_latent(handle.z.view())?;
                let map = match kind {
                    IntrinsicKind::Relighting(j) => {
                        TargetMap::Rgb(render(&relight(&spec, j)?).image)
                    }
                    _ => {
                        let b = render(&spec);
                        match kind {
                            IntrinsicKind::Normal => TargetMap::Normal(b.normal),
                            IntrinsicKind::Depth => {
                                TargetMap::Depth(b.depth.mapv(codec::depth_to_unit))
                            }
                            IntrinsicKind::Albedo => TargetMap::Albedo(b.albedo),
                            IntrinsicKind::Shading => TargetMap::Shading(b.shading),
                            IntrinsicKind::Segmentation(class) => TargetMap::Mask(
                                b.masks
                                    .index_axis(ndarray::Axis(2), class.index())
                                    .to_owned(),
                            ),
                            _ => unreachable!("filtered by supports"),
                        }
                    }
                };
                map.validate()?;
                Ok(map)
            })
            .collect()
    }
}

// --- regressor ---

/// Image-conditioned normal prediction from the supervised baseline. Being a
/// function of the image alone, it inherits the image's lighting; the
/// robustness protocol measures exactly that sensitivity.
pub struct RegressorTeacher {
    reg: Regressor,
}

impl RegressorTeacher {
    pub fn new(reg: Regressor) -> RegressorTeacher {
        RegressorTeacher { reg }
    }
}

impl Teacher for RegressorTeacher {
    fn name(&self) -> &str {
        "regressor"
    }

    fn supports(&self, kind: IntrinsicKind) -> bool {
        kind == IntrinsicKind::Normal
    }

    fn predict(&self, kind: IntrinsicKind, batch: &[BatchItem]) -> Result<Vec<TargetMap>> {
        if !self.supports(kind) {
            return Err(unsupported("regressor", kind));
        }
        batch
            .iter()
            .map(|item| {
                let pred = self.reg.forward(item.image.view())?;
                // Decoding renormalizes, so the map meets the unit-length
                // contract even where the raw prediction was sloppy.
                let (normals, _) = codec::decode_normal(pred.view())?;
                Ok(TargetMap::Normal(normals))
            })
            .collect()
    }
}

// --- external process adapter ---

/// File-exchange request, written as `request.json` next to the images.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub request_id: u64,
    pub kind: String,
    pub items: Vec<ExchangeRequestItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExchangeRequestItem {
    pub id: usize,
    /// Image file name relative to the exchange directory.
    pub image: String,
}

/// Expected as `response.json`, written atomically by the external process.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExchangeResponse {
    pub request_id: u64,
    pub items: Vec<ExchangeResponseItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExchangeResponseItem {
    pub id: usize,
    /// "ok" or "error".
    pub status: String,
    /// Map file name relative to the exchange directory, present when ok.
    pub map: Option<String>,
    pub message: Option<String>,
}

pub const REQUEST_NAME: &str = "request.json";
pub const RESPONSE_NAME: &str = "response.json";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
const POLL_INTERVAL: Duration = Duration::from_millis(100);

/// Blocking adapter around an external predictor process.
///
/// Per call it clears stale protocol files, writes the batch images and
/// `request.json` (the request file last, so its appearance signals a
/// complete request), then polls for `response.json` until the timeout.
/// Responders must write their response atomically. One request is in
/// flight per exchange directory at a time.
pub struct ExternalTeacher {
    dir: PathBuf,
    timeout: Duration,
    counter: Cell<u64>,
}

impl ExternalTeacher {
    pub fn new(dir: PathBuf) -> ExternalTeacher {
        ExternalTeacher {
            dir,
            timeout: DEFAULT_TIMEOUT,
            counter: Cell::new(0),
        }
    }

    pub fn with_timeout(dir: PathBuf, timeout: Duration) -> ExternalTeacher {
        ExternalTeacher {
            dir,
            timeout,
            counter: Cell::new(0),
        }
    }

    fn expected_channels(kind: IntrinsicKind) -> usize {
        match kind {
            IntrinsicKind::Normal | IntrinsicKind::Albedo | IntrinsicKind::Relighting(_) => 3,
            _ => 1,
        }
    }

    fn map_from_bin(kind: IntrinsicKind, data: Array3<f32>) -> Result<TargetMap> {
        let scalar = |d: Array3<f32>| d.index_axis(ndarray::Axis(2), 0).to_owned();
        let map = match kind {
            IntrinsicKind::Normal => TargetMap::Normal(data),
            IntrinsicKind::Depth => TargetMap::Depth(scalar(data)),
            IntrinsicKind::Albedo => TargetMap::Albedo(data),
            IntrinsicKind::Shading => TargetMap::Shading(scalar(data)),
            IntrinsicKind::Segmentation(_) => TargetMap::Mask(scalar(data)),
            IntrinsicKind::Relighting(_) => TargetMap::Rgb(data),
            _ => return Err(unsupported("external", kind)),
        };
        map.validate()?;
        Ok(map)
    }
}

impl Teacher for ExternalTeacher {
    fn name(&self) -> &str {
        "external"
    }

    fn supports(&self, kind: IntrinsicKind) -> bool {
        !kind.is_control()
    }

    fn predict(&self, kind: IntrinsicKind, batch: &[BatchItem]) -> Result<Vec<TargetMap>> {
        if !self.supports(kind) {
            return Err(unsupported("external", kind));
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| LilError::io(&self.dir, e))?;
        let response_path = self.dir.join(RESPONSE_NAME);
        let request_path = self.dir.join(REQUEST_NAME);
        for stale in [&response_path, &request_path] {
            if stale.exists() {
                std::fs::remove_file(stale).map_err(|e| LilError::io(stale, e))?;
            }
        }

        let request_id = self.counter.get();
        self.counter.set(request_id + 1);
        let mut items = Vec::with_capacity(batch.len());
        for (i, item) in batch.iter().enumerate() {
            let name = format!("item_{i:03}.png");
            io::write_png(&self.dir.join(&name), item.image.view())?;
            items.push(ExchangeRequestItem { id: i, image: name });
        }
        io::write_json_atomic(
            &request_path,
            &ExchangeRequest {
                request_id,
                kind: kind.token(),
                items,
            },
        )?;

        let deadline = std::time::Instant::now() + self.timeout;
        let response: ExchangeResponse = loop {
            if response_path.exists() {
                let resp: ExchangeResponse = io::read_json(&response_path)?;
                if resp.request_id == request_id {
                    break resp;
                }
                // A leftover answer to an earlier request; keep waiting.
            }
            if std::time::Instant::now() >= deadline {
                return Err(LilError::Timeout {
                    seconds: self.timeout.as_secs_f64(),
                    path: response_path.clone(),
                });
            }
            std::thread::sleep(POLL_INTERVAL);
        };

        let mut failures = Vec::new();
        let mut by_id = std::collections::BTreeMap::new();
        for item in &response.items {
            if item.status == "ok" {
                by_id.insert(item.id, item.map.clone());
            } else {
                failures.push(format!(
                    "item {}: {}",
                    item.id,
                    item.message.as_deref().unwrap_or("unspecified failure")
                ));
            }
        }
        if !failures.is_empty() {
            return Err(LilError::Invalid(format!(
                "external teacher reported failures: {}",
                failures.join("; ")
            )));
        }

        let want_c = Self::expected_channels(kind);
        batch
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let rel = by_id
                    .get(&i)
                    .and_then(|m| m.clone())
                    .ok_or_else(|| {
                        LilError::Invalid(format!("external response missing item {i}"))
                    })?;
                let data = io::read_f32_map(&self.dir.join(&rel))?;
                let (h, w, _) = item.image.dim();
                if data.dim() != (h, w, want_c) {
                    return Err(LilError::Shape {
                        expected: format!("({h}, {w}, {want_c})"),
                        got: format!("{:?}", data.dim()),
                    });
                }
                Self::map_from_bin(kind, data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::ClassLabel;
    use crate::rng;

    fn item_from_seed(seed: u64) -> BatchItem {
        let z = rng::standard_normal(&mut rng::rng_from_seed(seed), 16);
        let image = render(&scene_from_latent(z.view()).unwrap()).image;
        BatchItem {
            image,
            handle: Some(SceneHandle { z }),
        }
    }

    #[test]
    fn oracle_matches_the_renderer_bit_for_bit() {
        let item = item_from_seed(5);
        let z = item.handle.as_ref().unwrap().z.clone();
        let bundle = render(&scene_from_latent(z.view()).unwrap());
        let t = OracleTeacher;

        match &t.predict(IntrinsicKind::Normal, &[item.clone()]).unwrap()[0] {
            TargetMap::Normal(n) => assert_eq!(*n, bundle.normal),
            other => panic!("wrong variant {other:?}"),
        }
        match &t
            .predict(IntrinsicKind::Segmentation(ClassLabel::Sphere), &[item.clone()])
            .unwrap()[0]
        {
            TargetMap::Mask(m) => assert_eq!(
                *m,
                bundle.masks.index_axis(ndarray::Axis(2), ClassLabel::Sphere.index())
            ),
            other => panic!("wrong variant {other:?}"),
        }
        match &t.predict(IntrinsicKind::Depth, &[item.clone()]).unwrap()[0] {
            TargetMap::Depth(d) => {
                assert_eq!(*d, bundle.depth.mapv(codec::depth_to_unit))
            }
            other => panic!("wrong variant {other:?}"),
        }
        match &t.predict(IntrinsicKind::Relighting(3), &[item.clone()]).unwrap()[0] {
            TargetMap::Rgb(img) => {
                let spec = scene_from_latent(z.view()).unwrap();
                assert_eq!(*img, render(&relight(&spec, 3).unwrap()).image);
            }
            other => panic!("wrong variant {other:?}"),
        }
    }

    #[test]
    fn oracle_requires_a_handle_and_rejects_controls() {
        let t = OracleTeacher;
        let mut item = item_from_seed(6);
        item.handle = None;
        assert!(t.predict(IntrinsicKind::Normal, &[item]).is_err());
        assert!(!t.supports(IntrinsicKind::IdentityControl));
        assert!(matches!(
            t.predict(IntrinsicKind::SwapControl, &[]),
            Err(LilError::UnsupportedKind { .. })
        ));
    }

    #[test]
    fn regressor_teacher_is_deterministic_and_normal_only() {
        let t = RegressorTeacher::new(Regressor::new(3));
        let item = item_from_seed(7);
        let a = t.predict(IntrinsicKind::Normal, &[item.clone()]).unwrap();
        let b = t.predict(IntrinsicKind::Normal, &[item.clone()]).unwrap();
        match (&a[0], &b[0]) {
            (TargetMap::Normal(x), TargetMap::Normal(y)) => {
                assert_eq!(x, y);
                x.outer_iter().for_each(|row| {
                    for px in row.outer_iter() {
                        let len: f32 = px.iter().map(|v| v * v).sum::<f32>().sqrt();
                        assert!((len - 1.0).abs() < 1e-5);
                    }
                });
            }
            other => panic!("wrong variants {other:?}"),
        }
        assert!(matches!(
            t.predict(IntrinsicKind::Depth, &[item]),
            Err(LilError::UnsupportedKind { .. })
        ));
    }
}
