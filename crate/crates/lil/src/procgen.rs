//! Procedural scene generation: a deterministic map from latent vectors to
//! simple Lambertian table-top scenes, plus the fixed relighting table.
//!
//! Scenes live on the ground plane y = 0 and contain one to three objects: a
//! primary sphere that is always present, an axis-aligned box, and a small
//! secondary sphere, both gated by a presence coordinate. The renderer in
//! [`render`] is analytic, so these scenes double as exact ground truth.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{LilError, Result};
use crate::geom::{vec3, Vec3};

mod dataset;
mod render;

pub use dataset::{
    scene_latent, write_dataset, DatasetManifest, DatasetRecord, GT_KINDS, MANIFEST_NAME,
};
pub use render::{render, IntrinsicBundle, CAM_DIST, CAM_ELEV, HALF_EXTENT, RES};

/// Latent coordinates 0..12 drive the scene; anything beyond is ignored here
/// (the generator is free to use it as extra style entropy).
pub const DZ_MIN: usize = 12;

/// Near and far planes used to normalize depth to [0, 1]. They bracket every
/// distance the camera can see in this scene family.
pub const NEAR: f64 = 2.0;
pub const FAR: f64 = 17.0;

/// Ambient term of every generated scene. The [`LightSpec`] type allows
/// [0, 0.5]; the procedural family keeps it fixed so relighting only ever
/// moves the directional term.
pub const AMBIENT: f64 = 0.25;

/// Upper bound on shading used by the scalar encoding: 1 (full diffuse) plus
/// the maximum ambient the type admits.
pub const SHADING_MAX: f32 = 1.5;

/// Number of entries in the fixed relighting table.
pub const N_LIGHTS: usize = 16;

// --- scene types ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Floor,
    Sphere,
    Box,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Floor, ClassLabel::Sphere, ClassLabel::Box];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Floor => 0,
            ClassLabel::Sphere => 1,
            ClassLabel::Box => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Floor => "floor",
            ClassLabel::Sphere => "sphere",
            ClassLabel::Box => "box",
        }
    }

    pub fn parse(s: &str) -> Result<ClassLabel> {
        match s {
            "floor" => Ok(ClassLabel::Floor),
            "sphere" => Ok(ClassLabel::Sphere),
            "box" => Ok(ClassLabel::Box),
            other => Err(LilError::Invalid(format!("unknown class label '{other}'"))),
        }
    }
}

/// Directional light plus ambient term. `direction` is the unit vector from a
/// surface toward the light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSpec {
    pub direction: Vec3,
    pub ambient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: [f64; 3],
    },
    /// Axis-aligned box given by its min/max corners.
    Box {
        min: Vec3,
        max: Vec3,
        albedo: [f64; 3],
    },
    /// The infinite plane y = 0 with normal +y.
    GroundPlane { albedo: [f64; 3] },
}

impl Primitive {
    pub fn class(&self) -> ClassLabel {
        match self {
            Primitive::Sphere { .. } => ClassLabel::Sphere,
            Primitive::Box { .. } => ClassLabel::Box,
            Primitive::GroundPlane { .. } => ClassLabel::Floor,
        }
    }

    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. }
            | Primitive::Box { albedo, .. }
            | Primitive::GroundPlane { albedo } => *albedo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Ground plane first, then the gated objects.
    pub objects: Vec<Primitive>,
    pub light: LightSpec,
}

// --- latent -> scene ---

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth periodic color map into (0, 1]^3; used so one latent coordinate
/// controls an object's full RGB albedo.
fn palette(t: f64) -> [f64; 3] {
    const PHASE: [f64; 3] = [0.0, 2.0943951023931953, 4.1887902047863905];
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        rgb[c] = 0.35 + 0.6 * (0.5 + 0.5 * (t + PHASE[c]).sin());
    }
    rgb
}

pub fn light_direction(azimuth: f64, elevation: f64) -> Vec3 {
    vec3(
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        elevation.cos() * azimuth.cos(),
    )
}

/// Canonical light angles, reached at z = 0 (midpoints of the squashing
/// ranges below).
pub const CANONICAL_AZIMUTH: f64 = 0.0;
pub const CANONICAL_ELEVATION: f64 = 0.78;

/// The fixed table of relighting directions. Entry 0 is the canonical light;
/// the rest sweep azimuth across (-150 deg, 150 deg) at two elevations. All
/// entries sit inside the range the latent squashing can reach.
pub fn light_table() -> [(f64, f64); N_LIGHTS] {
    let mut table = [(0.0, 0.0); N_LIGHTS];
    table[0] = (CANONICAL_AZIMUTH, CANONICAL_ELEVATION);
    for (k, entry) in table.iter_mut().enumerate().skip(1) {
        let j = (k - 1) as f64;
        let azimuth = -2.618 + j * (5.236 / 14.0);
        let elevation = if k % 2 == 1 { 0.55 } else { 0.95 };
        *entry = (azimuth, elevation);
    }
    table
}

/// Deterministic map from a latent vector to a scene. Coordinates:
///
/// * 0, 1: light azimuth / elevation
/// * 2..6: primary sphere x, z, radius, color
/// * 6..10: box x, z, size, color
/// * 10: presence gate (box above 0.3, secondary sphere above 0.7 after a
///   sigmoid), the one intentional discontinuity in the map
/// * 11: floor color
///
/// z = 0 gives the canonical scene: centered sphere, box to its left, light
/// at the canonical angles.
pub fn scene_from_latent(z: ArrayView1<f32>) -> Result<SceneSpec> {
    if z.len() < DZ_MIN {
        return Err(LilError::Invalid(format!(
            "latent must have at least {DZ_MIN} coordinates, got {}",
            z.len()
        )));
    }
    let z = |i: usize| z[i] as f64;

    let azimuth = std::f64::consts::PI * (0.6 * z(0)).tanh();
    let elevation = CANONICAL_ELEVATION + 0.43 * (0.7 * z(1)).tanh();

    let mut objects = vec![Primitive::GroundPlane {
        albedo: palette(1.5 * z(11) + 4.0),
    }];

    let radius = 0.7 + 0.5 * (0.7 * z(4)).tanh();
    objects.push(Primitive::Sphere {
        center: vec3(2.2 * (0.8 * z(2)).tanh(), radius, 1.8 * (0.8 * z(3)).tanh()),
        radius,
        albedo: palette(1.5 * z(5)),
    });

    let gate = sigmoid(z(10));
    if gate > 0.3 {
        let s = 0.55 + 0.3 * (0.7 * z(8)).tanh();
        let center = vec3(
            -1.6 + 1.4 * (0.8 * z(6)).tanh(),
            1.15 * s,
            -0.9 + 1.2 * (0.8 * z(7)).tanh(),
        );
        let half = vec3(s, 1.15 * s, s);
        objects.push(Primitive::Box {
            min: center - half,
            max: center + half,
            albedo: palette(1.5 * z(9) + 2.0),
        });
    }
    if gate > 0.7 {
        objects.push(Primitive::Sphere {
            center: vec3(1.7, 0.45, -1.4),
            radius: 0.45,
            albedo: palette(1.5 * z(5) + 2.0),
        });
    }

    Ok(SceneSpec {
        objects,
        light: LightSpec {
            direction: light_direction(azimuth, elevation),
            ambient: AMBIENT,
        },
    })
}

/// Replaces the light direction with table entry `light_index`, leaving the
/// geometry and ambient term untouched.
pub fn relight(spec: &SceneSpec, light_index: usize) -> Result<SceneSpec> {
    if light_index >= N_LIGHTS {
        return Err(LilError::Invalid(format!(
            "light index {light_index} out of range (table has {N_LIGHTS} entries)"
        )));
    }
    let (azimuth, elevation) = light_table()[light_index];
    let mut out = spec.clone();
    out.light.direction = light_direction(azimuth, elevation);
    Ok(out)
}
