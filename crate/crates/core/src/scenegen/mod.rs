//! Deterministic synthetic scenes: spheres and axis-aligned boxes floating
//! above a ground plane, observed by cameras on a jittered orbit. Rendering is
//! exact ray casting, so depth and instance rasters are analytic.

mod camera;
mod dataset;

pub use camera::*;
pub use dataset::{
    read_dataset, read_f64_raster, read_i32_raster, read_scene_dir, write_dataset,
    write_f64_raster, write_i32_raster, DatasetError, Manifest, RenderedScene, SceneEntry,
    DEPTH_MAGIC, FORMAT_VERSION, INSTANCE_MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default class vocabulary: sphere-small, sphere-large, box-small, box-large.
pub const DEFAULT_NUM_CLASSES: usize = 4;

/// Instances with fewer visible pixels than this are left out of supervision.
pub const MIN_SUPERVISED_PIXELS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("invalid render request: {0}")]
    InvalidRequest(String),
    #[error("instance {0} occupies no pixels in any view")]
    NotVisible(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { center: Vec3, half_extents: Vec3 },
}

impl Shape {
    pub fn center(&self) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } | Shape::Cuboid { center, .. } => center,
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => radius,
            Shape::Cuboid { half_extents, .. } => norm(half_extents),
        }
    }

    /// Nearest ray parameter `t > 0` and the outward surface normal.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let a = dot(dir, dir);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                let near = (-b - root) / a;
                let t = if near > 1e-9 { near } else { (-b + root) / a };
                (t > 1e-9).then(|| {
                    let hit = add(origin, scale(dir, t));
                    (t, scale(sub(hit, center), 1.0 / radius))
                })
            }
            Shape::Cuboid {
                center,
                half_extents,
            } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                let mut sign = 1.0;
                for k in 0..3 {
                    let lo = center[k] - half_extents[k];
                    let hi = center[k] + half_extents[k];
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[k];
                    let (t0, t1) = ((lo - origin[k]) * inv, (hi - origin[k]) * inv);
                    let (t0, t1, s) = if t0 < t1 {
                        (t0, t1, -1.0)
                    } else {
                        (t1, t0, 1.0)
                    };
                    if t0 > t_near {
                        t_near = t0;
                        axis = k;
                        sign = s;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= 1e-9 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((t_near, n))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: usize,
    pub instance: i32,
}

/// Placement ranges for [`generate_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutBounds {
    /// Objects are placed with |x|, |y| ≤ this.
    pub half_extent: f64,
    /// Minimum clearance between object bounding spheres.
    pub min_gap: f64,
    /// Height range of an object's lowest point above the ground.
    pub float_height: (f64, f64),
    pub orbit_radius: (f64, f64),
    /// Camera elevation in radians.
    pub elevation: (f64, f64),
    /// Total azimuth arc spanned by the cameras, radians.
    pub arc: f64,
    /// Look-at target jitter around the object centroid.
    pub target_jitter: f64,
    /// Field of view range in radians (square pixels assumed, so both axes agree).
    pub fov: (f64, f64),
}

impl Default for LayoutBounds {
    fn default() -> Self {
        Self {
            half_extent: 2.2,
            min_gap: 0.3,
            float_height: (0.15, 0.4),
            orbit_radius: (4.5, 5.5),
            elevation: (0.45, 0.7),
            arc: 2.6,
            target_jitter: 0.9,
            fov: (0.8, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub objects: Vec<SceneObject>,
    pub ground: bool,
    pub cameras: Vec<CameraParams>,
}

impl SceneSpec {
    pub fn instance_classes(&self) -> Vec<(i32, usize)> {
        self.objects.iter().map(|o| (o.instance, o.class)).collect()
    }

    /// Nearest surface hit along a world-space ray: (t, instance or −1 for ground, normal).
    pub fn cast(&self, origin: Vec3, dir: Vec3) -> Option<(f64, i32, Vec3)> {
        let mut best: Option<(f64, i32, Vec3)> = None;
        for obj in &self.objects {
            if let Some((t, n)) = obj.shape.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, obj.instance, n));
                }
            }
        }
        if self.ground && dir[2] < 0.0 {
            let t = -origin[2] / dir[2];
            if t > 1e-9 && best.is_none_or(|b| t < b.0) {
                best = Some((t, -1, [0.0, 0.0, 1.0]));
            }
        }
        best
    }
}

fn sample_object(rng: &mut ChaCha8Rng, bounds: &LayoutBounds, instance: i32) -> SceneObject {
    let class = rng.random_range(0..DEFAULT_NUM_CLASSES);
    let x = rng.random_range(-bounds.half_extent..bounds.half_extent);
    let y = rng.random_range(-bounds.half_extent..bounds.half_extent);
    let lift = rng.random_range(bounds.float_height.0..bounds.float_height.1);
    let shape = match class {
        0 | 1 => {
            let radius = if class == 0 {
                rng.random_range(0.3..0.45)
            } else {
                rng.random_range(0.55..0.75)
            };
            Shape::Sphere {
                center: [x, y, lift + radius],
                radius,
            }
        }
        _ => {
            let (lo, hi) = if class == 2 {
                (0.22, 0.36)
            } else {
                (0.42, 0.6)
            };
            let h = [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ];
            Shape::Cuboid {
                center: [x, y, lift + h[2]],
                half_extents: h,
            }
        }
    };
    SceneObject {
        shape,
        class,
        instance,
    }
}

/// Samples a scene deterministically from `seed`.
pub fn generate_scene(
    seed: u64,
    n_objects: usize,
    n_views: usize,
    bounds: &LayoutBounds,
) -> Result<SceneSpec, SceneError> {
    let fail = |reason: String| SceneError::Generation { seed, reason };
    if n_objects == 0 {
        return Err(fail("need at least one object".into()));
    }
    if n_views < 2 {
        return Err(fail("need at least two views".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    const ATTEMPTS: usize = 2000;
    for id in 0..n_objects {
        let placed = (0..ATTEMPTS).find_map(|_| {
            let cand = sample_object(&mut rng, bounds, id as i32);
            let clear = objects.iter().all(|o| {
                let gap = norm(sub(o.shape.center(), cand.shape.center()))
                    - o.shape.bounding_radius()
                    - cand.shape.bounding_radius();
                gap >= bounds.min_gap
            });
            clear.then_some(cand)
        });
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(fail(format!(
                    "could not place object {id} after {ATTEMPTS} attempts"
                )))
            }
        }
    }

    let centroid = {
        let mut c = [0.0; 3];
        for o in &objects {
            c = add(c, o.shape.center());
        }
        scale(c, 1.0 / objects.len() as f64)
    };
    let mut spec = SceneSpec {
        seed,
        num_classes: DEFAULT_NUM_CLASSES,
        objects,
        ground: true,
        cameras: Vec::with_capacity(n_views),
    };

    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let step = bounds.arc / (n_views - 1) as f64;
    for i in 0..n_views {
        let cam = (0..ATTEMPTS).find_map(|_| {
            let azimuth = start + step * i as f64 + rng.random_range(-0.12..0.12);
            let elevation = rng.random_range(bounds.elevation.0..bounds.elevation.1);
            let radius = rng.random_range(bounds.orbit_radius.0..bounds.orbit_radius.1);
            let fov = rng.random_range(bounds.fov.0..bounds.fov.1);
            let eye = add(
                centroid,
                [
                    radius * elevation.cos() * azimuth.cos(),
                    radius * elevation.cos() * azimuth.sin(),
                    radius * elevation.sin(),
                ],
            );
            let j = bounds.target_jitter;
            let target = add(
                centroid,
                [
                    rng.random_range(-j..j),
                    rng.random_range(-j..j),
                    rng.random_range(-0.2..0.2),
                ],
            );
            let cam = CameraParams::look_at(eye, target, [0.0, 0.0, 1.0], [fov, fov]);
            let sees_object = spec.objects.iter().any(|o| {
                let (u, v, z) = cam.project(o.shape.center(), 100, 100);
                z > 0.0 && (5.0..95.0).contains(&u) && (5.0..95.0).contains(&v)
            });
            sees_object.then_some(cam)
        });
        match cam {
            Some(c) => spec.cameras.push(c),
            None => return Err(fail(format!("camera {i} sees no object"))),
        }
    }
    Ok(spec)
}

/// One rendered view. Rasters are row-major `H×W` (`rgb` is `H×W×3`).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    /// Camera-frame z of the hit; `INVALID_DEPTH` where the ray escapes.
    pub depth: Vec<f64>,
    pub instance_map: Vec<i32>,
    pub camera: CameraParams,
}

pub const INVALID_DEPTH: f64 = -1.0;

fn hash_unit(seed: u64, id: i32, channel: u64) -> f64 {
    // splitmix64
    let mut z = seed ^ ((id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ (channel << 56);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Base albedo of an instance, fixed by the scene seed and instance id.
pub fn instance_color(seed: u64, id: i32) -> [f64; 3] {
    let hue = hash_unit(seed, id, 1) * 6.0;
    let sat = 0.55 + 0.4 * hash_unit(seed, id, 2);
    let val = 0.7 + 0.3 * hash_unit(seed, id, 3);
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let mix = |c: f64| val * (1.0 - sat + sat * c);
    [mix(r), mix(g), mix(b)]
}

const LIGHT: Vec3 = [
    0.408_248_290_463_863,
    -0.408_248_290_463_863,
    0.816_496_580_927_726,
];
const SKY: [f64; 3] = [0.62, 0.74, 0.92];

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Ray casts every pixel center of `cam` at resolution `(height, width)`.
pub fn render_view(
    scene: &SceneSpec,
    cam: &CameraParams,
    (height, width): (usize, usize),
) -> Result<ViewSample, SceneError> {
    if height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0 {
        return Err(SceneError::InvalidRequest(format!(
            "resolution {height}x{width} must be even"
        )));
    }
    if !cam.is_valid() {
        return Err(SceneError::InvalidRequest(
            "camera quaternion or fov out of range".into(),
        ));
    }
    let r = cam.rotation_matrix();
    let origin = cam.center();
    let mut rgb = vec![0.0; height * width * 3];
    let mut depth = vec![INVALID_DEPTH; height * width];
    let mut instance_map = vec![-1; height * width];
    for v in 0..height {
        for u in 0..width {
            let p = v * width + u;
            let ray_cam = cam.pixel_ray_camera(u as f64 + 0.5, v as f64 + 0.5, height, width);
            let dir = mat_t_vec(&r, ray_cam);
            let color = match scene.cast(origin, dir) {
                Some((t, id, normal)) => {
                    depth[p] = t;
                    instance_map[p] = id;
                    let shade = 0.35 + 0.65 * dot(normal, LIGHT).max(0.0);
                    let base = if id >= 0 {
                        instance_color(scene.seed, id)
                    } else {
                        let hit = add(origin, scale(dir, t));
                        let checker =
                            ((hit[0].floor() + hit[1].floor()) as i64).rem_euclid(2) as f64;
                        [0.45 + 0.08 * checker; 3]
                    };
                    base.map(|c| c * shade)
                }
                None => SKY,
            };
            for c in 0..3 {
                rgb[p * 3 + c] = quantize(color[c]);
            }
        }
    }
    Ok(ViewSample {
        height,
        width,
        rgb,
        depth,
        instance_map,
        camera: *cam,
    })
}

/// Renders all cameras of a scene, spreading views over up to `threads` workers.
pub fn render_scene(
    scene: &SceneSpec,
    res: (usize, usize),
    threads: usize,
) -> Result<Vec<ViewSample>, SceneError> {
    let threads = threads.clamp(1, scene.cameras.len().max(1));
    if threads == 1 {
        return scene
            .cameras
            .iter()
            .map(|c| render_view(scene, c, res))
            .collect();
    }
    let mut out: Vec<Option<Result<ViewSample, SceneError>>> = vec![None; scene.cameras.len()];
    std::thread::scope(|s| {
        for (chunk_idx, chunk) in out
            .chunks_mut(scene.cameras.len().div_ceil(threads))
            .enumerate()
        {
            let base = chunk_idx * scene.cameras.len().div_ceil(threads);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(render_view(scene, &scene.cameras[base + k], res));
                }
            });
        }
    });
    out.into_iter()
        .map(|r| r.expect("every view rendered"))
        .collect()
}

/// Per-frame visibility of one instance and its area-proportional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVisibility {
    pub probs: Vec<f64>,
    pub counts: Vec<usize>,
}

impl TargetVisibility {
    pub fn from_counts(instance: i32, counts: Vec<usize>) -> Result<Self, SceneError> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(SceneError::NotVisible(instance));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { probs, counts })
    }

    pub fn total_pixels(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Area-proportional frame distribution of instance `k` over a sequence of
/// instance rasters (one per frame).
pub fn visibility_distribution<'a, I>(
    instance_maps: I,
    k: i32,
) -> Result<TargetVisibility, SceneError>
where
    I: IntoIterator<Item = &'a [i32]>,
{
    let counts = instance_maps
        .into_iter()
        .map(|m| m.iter().filter(|&&id| id == k).count())
        .collect();
    TargetVisibility::from_counts(k, counts)
}

/// Over-segmentation that never crosses instance boundaries: points sharing a
/// label and a voxel of edge `cell` form one segment.
pub fn superpoints(points: &[Vec3], labels: &[i32], cell: f64) -> Vec<usize> {
    let mut ids = std::collections::HashMap::new();
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            let key = (l, p.map(|c| (c / cell).floor() as i64));
            let next = ids.len();
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

/// Renders a scene at full and half resolution into a [`RenderedScene`].
pub fn build_scene(
    spec: &SceneSpec,
    name: &str,
    res: (usize, usize),
    threads: usize,
) -> Result<RenderedScene, SceneError> {
    if res.0 % 4 != 0 || res.1 % 4 != 0 {
        return Err(SceneError::InvalidRequest(format!(
            "resolution {}x{} must be divisible by 4 so half-resolution masks stay even",
            res.0, res.1
        )));
    }
    let views = render_scene(spec, res, threads)?;
    let half = render_scene(spec, (res.0 / 2, res.1 / 2), threads)?;
    Ok(RenderedScene {
        name: name.to_string(),
        seed: spec.seed,
        num_classes: spec.num_classes,
        instances: spec.instance_classes(),
        objects: spec.objects.clone(),
        views,
        half_instance_maps: half.into_iter().map(|v| v.instance_map).collect(),
    })
}

/// Parameters of a generated benchmark split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    pub layout: LayoutBounds,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            views: 4,
            height: 64,
            width: 64,
            min_objects: 3,
            max_objects: 6,
            seed: 0,
            layout: LayoutBounds::default(),
        }
    }
}

/// Seed of scene `index` in a split rooted at `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Generates and renders every scene of a split.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    threads: usize,
) -> Result<Vec<RenderedScene>, SceneError> {
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(SceneError::InvalidRequest(format!(
            "object range {}..{} is empty",
            cfg.min_objects, cfg.max_objects
        )));
    }
    (0..cfg.scenes)
        .map(|s| {
            let seed = scene_seed(cfg.seed, s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
            let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let spec = generate_scene(seed, n_objects, cfg.views, &cfg.layout)?;
            build_scene(
                &spec,
                &format!("scene_{s}"),
                (cfg.height, cfg.width),
                threads,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_on_axis_depth() {
        let scene = SceneSpec {
            seed: 0,
            num_classes: 4,
            objects: vec![SceneObject {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.0,
                },
                class: 0,
                instance: 0,
            }],
            ground: false,
            cameras: vec![],
        };
        let cam = CameraParams::look_at([5.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], [0.002, 0.002]);
        // the optical axis itself: z = distance - radius
        let dir = mat_t_vec(&cam.rotation_matrix(), [0.0, 0.0, 1.0]);
        let (t, id, _) = scene.cast(cam.center(), dir).unwrap();
        assert_eq!(id, 0);
        assert!((t - 4.0).abs() < 1e-12);
        let view = render_view(&scene, &cam, (8, 8)).unwrap();
        assert!(view.instance_map.iter().all(|&i| i == 0));
        let center = view.depth[4 * 8 + 4];
        // pixel (4, 4) sits half a pixel off-axis
        assert!((center - 4.0).abs() < 1e-6, "{center}");
    }

    #[test]
    fn cuboid_hit_from_outside() {
        let s = Shape::Cuboid {
            center: [0.0, 0.0, 0.0],
            half_extents: [1.0, 2.0, 0.5],
        };
        let (t, n) = s.intersect([5.0, 0.0, 0.0], [-1.0, 0.0, 0.0]).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert_eq!(n, [1.0, 0.0, 0.0]);
        assert!(s.intersect([5.0, 3.0, 0.0], [-1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn visibility_examples() {
        let v = TargetVisibility::from_counts(0, vec![30, 10, 0, 0]).unwrap();
        assert_eq!(v.probs, vec![0.75, 0.25, 0.0, 0.0]);
        let v = TargetVisibility::from_counts(0, vec![0, 7, 0]).unwrap();
        assert_eq!(v.probs, vec![0.0, 1.0, 0.0]);
        let v = TargetVisibility::from_counts(0, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(v.probs, vec![0.25; 4]);
        assert_eq!(
            TargetVisibility::from_counts(3, vec![0, 0]),
            Err(SceneError::NotVisible(3))
        );
    }

    #[test]
    fn superpoints_respect_labels() {
        let pts = [
            [0.1, 0.1, 0.1],
            [0.2, 0.1, 0.1],
            [0.2, 0.1, 0.1],
            [3.0, 0.0, 0.0],
        ];
        let seg = superpoints(&pts, &[0, 0, 1, 0], 0.5);
        assert_eq!(seg[0], seg[1]);
        assert_ne!(seg[1], seg[2]);
        assert_ne!(seg[0], seg[3]);
    }
}
