//! Conventions for packing intrinsic quantities into the generator's RGB
//! output range and unpacking them again.
//!
//! Everything the generator emits lives in (H, W, 3) with values in [0, 1],
//! so each intrinsic needs a fixed encoding:
//!
//! * normals: components mapped from [-1, 1] to [0, 1] per channel
//! * depth: ray distance normalized by the near/far planes, replicated
//! * shading: physical value divided by the shading ceiling, replicated
//! * segmentation masks: {0, 1} replicated
//! * albedo and RGB: identity
//!
//! Decoders invert these. Normal decoding renormalizes and flags pixels whose
//! vector collapsed to near-zero length; scalar decoding averages the three
//! channels so small per-channel disagreements cancel.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{LilError, Result};
use crate::procgen::{FAR, NEAR, SHADING_MAX};

/// Below this length a decoded normal is considered degenerate.
pub const MIN_NORMAL_LEN: f32 = 1e-4;

fn replicate3(x: ArrayView2<f32>) -> Array3<f32> {
    let (h, w) = x.dim();
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let v = x[(i, j)];
            out[(i, j, 0)] = v;
            out[(i, j, 1)] = v;
            out[(i, j, 2)] = v;
        }
    }
    out
}

fn channel_mean(img: ArrayView3<f32>) -> Array2<f32> {
    let (h, w, _) = img.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[(i, j)] = (img[(i, j, 0)] + img[(i, j, 1)] + img[(i, j, 2)]) / 3.0;
        }
    }
    out
}

fn expect_3ch(img: &ArrayView3<f32>) -> Result<()> {
    if img.dim().2 != 3 {
        return Err(LilError::Shape {
            expected: "3 channels".into(),
            got: format!("{}", img.dim().2),
        });
    }
    Ok(())
}

/// Unit camera-frame normals to image space: (n + 1) / 2 per component.
pub fn encode_normal(normal: ArrayView3<f32>) -> Result<Array3<f32>> {
    expect_3ch(&normal)?;
    Ok(normal.mapv(|v| (v + 1.0) * 0.5))
}

/// Image space back to unit normals. Returns the vectors and a mask of
/// pixels whose decoded length was too small to renormalize; those are set
/// to the camera-facing normal (0, 0, 1) and should be excluded from angular
/// statistics.
pub fn decode_normal(img: ArrayView3<f32>) -> Result<(Array3<f32>, Array2<bool>)> {
    expect_3ch(&img)?;
    let (h, w, _) = img.dim();
    let mut out = Array3::zeros((h, w, 3));
    let mut invalid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let x = img[(i, j, 0)] * 2.0 - 1.0;
            let y = img[(i, j, 1)] * 2.0 - 1.0;
            let z = img[(i, j, 2)] * 2.0 - 1.0;
            let len = (x * x + y * y + z * z).sqrt();
            if len < MIN_NORMAL_LEN {
                invalid[(i, j)] = true;
                out[(i, j, 2)] = 1.0;
            } else {
                out[(i, j, 0)] = x / len;
                out[(i, j, 1)] = y / len;
                out[(i, j, 2)] = z / len;
            }
        }
    }
    Ok((out, invalid))
}

/// Ray distance to the unit interval spanned by the near and far planes.
pub fn depth_to_unit(t: f32) -> f32 {
    (((t as f64 - NEAR) / (FAR - NEAR)) as f32).clamp(0.0, 1.0)
}

/// Raw ray distances to a replicated [0, 1] image.
pub fn encode_depth(depth: ArrayView2<f32>) -> Array3<f32> {
    replicate3(depth.mapv(|t| depth_to_unit(t)).view())
}

/// Channel-averaged normalized depth. Comparisons happen in this unit space;
/// there is no way back to absolute distance without the plane constants, so
/// none is offered.
pub fn decode_depth_unit(img: ArrayView3<f32>) -> Result<Array2<f32>> {
    expect_3ch(&img)?;
    Ok(channel_mean(img))
}

/// Physical shading (ambient plus Lambertian term) to a replicated image,
/// scaled by the fixed shading ceiling.
pub fn encode_shading(shading: ArrayView2<f32>) -> Array3<f32> {
    replicate3(
        shading
            .mapv(|v| (v / SHADING_MAX as f32).clamp(0.0, 1.0))
            .view(),
    )
}

/// Back to physical shading values.
pub fn decode_shading(img: ArrayView3<f32>) -> Result<Array2<f32>> {
    expect_3ch(&img)?;
    Ok(channel_mean(img).mapv(|v| v * SHADING_MAX as f32))
}

/// Binary mask to a replicated image. Values must already be 0 or 1.
pub fn encode_mask(mask: ArrayView2<f32>) -> Result<Array3<f32>> {
    if let Some(v) = mask.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(LilError::Invalid(format!(
            "mask contains non-binary value {v}"
        )));
    }
    Ok(replicate3(mask))
}

/// Channel mean thresholded at one half back to a hard {0, 1} mask.
pub fn decode_mask(img: ArrayView3<f32>) -> Result<Array2<f32>> {
    expect_3ch(&img)?;
    Ok(channel_mean(img).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// A teacher's output in its native convention, before encoding into the
/// generator's image space. Every variant carries its own range contract,
/// checked by [`TargetMap::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum TargetMap {
    /// Unit camera-frame vectors, (H, W, 3).
    Normal(Array3<f32>),
    /// Normalized to [0, 1] by the near/far planes, (H, W).
    Depth(Array2<f32>),
    /// Reflectance in [0, 1], (H, W, 3).
    Albedo(Array3<f32>),
    /// Physical value in [0, shading ceiling], (H, W).
    Shading(Array2<f32>),
    /// Hard {0, 1} class membership, (H, W).
    Mask(Array2<f32>),
    /// Plain image in [0, 1], (H, W, 3); used for relighting targets.
    Rgb(Array3<f32>),
}

impl TargetMap {
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetMap::Normal(n) => {
                expect_3ch(&n.view())?;
                let (h, w, _) = n.dim();
                for i in 0..h {
                    for j in 0..w {
                        let len: f32 =
                            (0..3).map(|c| n[(i, j, c)].powi(2)).sum::<f32>().sqrt();
                        if (len - 1.0).abs() > 1e-3 {
                            return Err(LilError::Invalid(format!(
                                "normal at ({i}, {j}) has length {len}"
                            )));
                        }
                    }
                }
            }
            TargetMap::Depth(d) => {
                if let Some(v) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(LilError::Invalid(format!("depth {v} outside [0, 1]")));
                }
            }
            TargetMap::Albedo(a) | TargetMap::Rgb(a) => {
                expect_3ch(&a.view())?;
                if let Some(v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(LilError::Invalid(format!("channel value {v} outside [0, 1]")));
                }
            }
            TargetMap::Shading(s) => {
                if let Some(v) = s
                    .iter()
                    .find(|v| !(0.0..=SHADING_MAX as f32).contains(*v))
                {
                    return Err(LilError::Invalid(format!(
                        "shading {v} outside [0, {SHADING_MAX}]"
                    )));
                }
            }
            TargetMap::Mask(m) => {
                if let Some(v) = m.iter().find(|v| **v != 0.0 && **v != 1.0) {
                    return Err(LilError::Invalid(format!("mask value {v} not binary")));
                }
            }
        }
        Ok(())
    }

    /// Into the generator's 3-channel [0, 1] space.
    pub fn encode(&self) -> Result<Array3<f32>> {
        self.validate()?;
        Ok(match self {
            TargetMap::Normal(n) => encode_normal(n.view())?,
            // Depth arrives already normalized, so replication is all
            // that is left to do.
            TargetMap::Depth(d) => replicate3(d.view()),
            TargetMap::Albedo(a) | TargetMap::Rgb(a) => a.clone(),
            TargetMap::Shading(s) => encode_shading(s.view()),
            TargetMap::Mask(m) => encode_mask(m.view())?,
        })
    }
}
