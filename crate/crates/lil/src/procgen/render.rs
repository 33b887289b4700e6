//! Analytic renderer for [`SceneSpec`] scenes: orthographic camera, exact
//! ray-primitive intersections, Lambertian shading with no shadows. Because
//! every quantity is closed-form, the renderer is also the ground-truth
//! oracle: one pass produces the image together with all of its intrinsics.

use ndarray::{Array2, Array3};

use crate::geom::{vec3, Ray, Vec3};
use crate::procgen::{ClassLabel, Primitive, SceneSpec, FAR};

/// Output resolution. The whole toolkit is sized around this; it is not a
/// config knob.
pub const RES: usize = 64;

/// Camera elevation above the horizon (35 degrees), distance to the origin,
/// and half-extent of the orthographic view window in scene units.
pub const CAM_ELEV: f64 = 0.6108652381980153;
pub const CAM_DIST: f64 = 10.0;
pub const HALF_EXTENT: f64 = 4.0;

const EPS: f64 = 1e-9;

/// One render with aligned per-pixel ground truth.
///
/// * `image`: RGB in [0, 1], equal to `clamp(albedo * shading, 0, 1)` per
///   channel in f32, so the Lambertian identity holds bit-exactly wherever no
///   channel saturates.
/// * `normal`: unit vectors in the camera frame (x right, y up, z toward the
///   camera).
/// * `depth`: distance along the ray from the camera plane, in scene units.
/// * `masks`: one-hot class maps in [`ClassLabel::ALL`] order.
#[derive(Debug, Clone)]
pub struct IntrinsicBundle {
    pub image: Array3<f32>,
    pub normal: Array3<f32>,
    pub depth: Array2<f32>,
    pub albedo: Array3<f32>,
    pub shading: Array2<f32>,
    pub masks: Array3<f32>,
}

struct Camera {
    eye: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
}

impl Camera {
    fn fixed() -> Camera {
        let (s, c) = CAM_ELEV.sin_cos();
        let forward = vec3(0.0, -s, -c);
        Camera {
            eye: -forward * CAM_DIST,
            forward,
            right: vec3(1.0, 0.0, 0.0),
            up: vec3(0.0, c, -s),
        }
    }

    /// Orthographic ray through the center of pixel (row, col).
    fn ray(&self, row: usize, col: usize) -> Ray {
        let u = ((col as f64 + 0.5) / RES as f64 * 2.0 - 1.0) * HALF_EXTENT;
        let v = (1.0 - (row as f64 + 0.5) / RES as f64 * 2.0) * HALF_EXTENT;
        Ray {
            origin: self.eye + self.right * u + self.up * v,
            dir: self.forward,
        }
    }
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: [f64; 3],
    class: ClassLabel,
}

fn intersect(ray: &Ray, prim: &Primitive) -> Option<Hit> {
    match prim {
        Primitive::Sphere {
            center,
            radius,
            albedo,
        } => {
            let oc = ray.origin - *center;
            let b = oc.dot(ray.dir);
            let c = oc.dot(oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sqrt_disc = disc.sqrt();
            let mut t = -b - sqrt_disc;
            if t <= EPS {
                t = -b + sqrt_disc;
            }
            if t <= EPS {
                return None;
            }
            let p = ray.origin + ray.dir * t;
            Some(Hit {
                t,
                normal: (p - *center) * (1.0 / radius),
                albedo: *albedo,
                class: ClassLabel::Sphere,
            })
        }
        Primitive::Box { min, max, albedo } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut enter_axis = 0;
            let o = [ray.origin.x, ray.origin.y, ray.origin.z];
            let d = [ray.dir.x, ray.dir.y, ray.dir.z];
            let lo = [min.x, min.y, min.z];
            let hi = [max.x, max.y, max.z];
            for axis in 0..3 {
                let inv = 1.0 / d[axis];
                let mut t0 = (lo[axis] - o[axis]) * inv;
                let mut t1 = (hi[axis] - o[axis]) * inv;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    enter_axis = axis;
                }
                t_exit = t_exit.min(t1);
            }
            if t_enter > t_exit || t_enter <= EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[enter_axis] = -d[enter_axis].signum();
            Some(Hit {
                t: t_enter,
                normal: vec3(n[0], n[1], n[2]),
                albedo: *albedo,
                class: ClassLabel::Box,
            })
        }
        Primitive::GroundPlane { albedo } => {
            if ray.dir.y.abs() < EPS {
                return None;
            }
            let t = -ray.origin.y / ray.dir.y;
            if t <= EPS {
                return None;
            }
            Some(Hit {
                t,
                normal: vec3(0.0, 1.0, 0.0),
                albedo: *albedo,
                class: ClassLabel::Floor,
            })
        }
    }
}

/// Renders a scene and its intrinsics. Pure: identical specs give
/// bit-identical bundles, and changing only the light leaves every geometric
/// output (normal, depth, albedo, masks) bit-identical.
pub fn render(spec: &SceneSpec) -> IntrinsicBundle {
    let cam = Camera::fixed();
    let mut image = Array3::zeros((RES, RES, 3));
    let mut normal = Array3::zeros((RES, RES, 3));
    let mut depth = Array2::zeros((RES, RES));
    let mut albedo = Array3::zeros((RES, RES, 3));
    let mut shading = Array2::zeros((RES, RES));
    let mut masks = Array3::zeros((RES, RES, 3));

    for row in 0..RES {
        for col in 0..RES {
            let ray = cam.ray(row, col);
            let mut nearest: Option<Hit> = None;
            for prim in &spec.objects {
                if let Some(hit) = intersect(&ray, prim) {
                    if nearest.as_ref().is_none_or(|best| hit.t < best.t) {
                        nearest = Some(hit);
                    }
                }
            }
            match nearest {
                Some(hit) => {
                    let shade =
                        spec.light.ambient + hit.normal.dot(spec.light.direction).max(0.0);
                    let shade = shade as f32;
                    // Camera-frame normal; the basis is orthonormal so length
                    // is preserved.
                    let n_cam = vec3(
                        hit.normal.dot(cam.right),
                        hit.normal.dot(cam.up),
                        hit.normal.dot(-cam.forward),
                    );
                    depth[(row, col)] = hit.t as f32;
                    shading[(row, col)] = shade;
                    normal[(row, col, 0)] = n_cam.x as f32;
                    normal[(row, col, 1)] = n_cam.y as f32;
                    normal[(row, col, 2)] = n_cam.z as f32;
                    masks[(row, col, hit.class.index())] = 1.0;
                    for ch in 0..3 {
                        let a = hit.albedo[ch] as f32;
                        albedo[(row, col, ch)] = a;
                        image[(row, col, ch)] = (a * shade).min(1.0);
                    }
                }
                None => {
                    // Unreachable for scenes with a ground plane; kept sane
                    // for hand-built specs without one.
                    depth[(row, col)] = FAR as f32;
                    normal[(row, col, 2)] = 1.0;
                    shading[(row, col)] = spec.light.ambient as f32;
                }
            }
        }
    }

    IntrinsicBundle {
        image,
        normal,
        depth,
        albedo,
        shading,
        masks,
    }
}
