//! Deterministic synthetic driving scenes: a textured ground plane, box
//! obstacles resting on it, and a textured backdrop wall, observed by a
//! camera moving at constant height.
//!
//! World coordinates are the camera frame of frame 0 (x right, y down,
//! z forward); the ground is the plane `y = camera_height`. Motion is planar
//! (forward, lateral, yaw), so the camera height is the same in every frame.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{accumulate_trajectory, DepthMap, Image, Intrinsics, Pose, Trajectory, D_MIN};
use crate::plane::WeightMask;

/// Axis-aligned box standing on the ground. `center_x`/`center_z` locate
/// the footprint center in world coordinates; the top face sits `height`
/// meters above the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxObstacle {
    pub center_x: f64,
    pub center_z: f64,
    pub size_x: f64,
    pub size_z: f64,
    pub height: f64,
}

impl BoxObstacle {
    fn bounds(&self, ground_y: f64) -> (Vector3<f64>, Vector3<f64>) {
        (
            Vector3::new(
                self.center_x - 0.5 * self.size_x,
                ground_y - self.height,
                self.center_z - 0.5 * self.size_z,
            ),
            Vector3::new(self.center_x + 0.5 * self.size_x, ground_y, self.center_z + 0.5 * self.size_z),
        )
    }

    fn contains(&self, p: &Vector3<f64>, ground_y: f64) -> bool {
        let (lo, hi) = self.bounds(ground_y);
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    /// Entry distance along `origin + t * dir` and the index of the axis
    /// whose slab was entered last.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, ground_y: f64) -> Option<(f64, usize)> {
        let (lo, hi) = self.bounds(ground_y);
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < lo[i] || origin[i] > hi[i] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo[i] - origin[i]) / dir[i], (hi[i] - origin[i]) / dir[i]);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            if a > t_near {
                t_near = a;
                axis = i;
            }
            t_far = t_far.min(b);
        }
        (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
    }
}

/// Constant per-frame camera motion, expressed in the current camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    /// Meters per frame along +z.
    pub forward: f64,
    /// Meters per frame along +x.
    pub lateral: f64,
    /// Radians per frame about the vertical axis.
    pub yaw: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Motion {
            forward: 0.25,
            lateral: 0.0,
            yaw: 0.2f64.to_radians(),
        }
    }
}

impl Motion {
    /// Pose of camera `k+1` in camera `k`.
    pub fn relative_pose(&self) -> Pose {
        Pose::yaw(self.yaw, Vector3::new(self.lateral, 0.0, self.forward))
    }
}

/// Scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Known camera height above the ground (meters).
    pub camera_height: f64,
    pub intrinsics: Intrinsics,
    pub texture_seed: u64,
    pub obstacles: Vec<BoxObstacle>,
    pub motion: Motion,
    pub frames: usize,
    /// Standard deviation of the multiplicative depth noise.
    pub noise_sigma: f64,
    /// World z of the fronto-parallel backdrop wall.
    pub backdrop_distance: f64,
}

/// Default desk-scale camera: 64x192 with horizon near the top so that the
/// ground fills most of the frame.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fu: 0.58 * 192.0,
        fv: 1.92 * 64.0,
        cu: 95.5,
        cv: 8.5,
        width: 192,
        height: 64,
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            camera_height: 1.70,
            intrinsics: default_intrinsics(),
            texture_seed: 7,
            obstacles: vec![BoxObstacle {
                center_x: 3.0,
                center_z: 12.0,
                size_x: 2.0,
                size_z: 3.0,
                height: 1.5,
            }],
            motion: Motion::default(),
            frames: 5,
            noise_sigma: 0.0,
            backdrop_distance: 40.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.camera_height.is_finite() && self.camera_height > 0.0) {
            return Err(Error::invalid(format!(
                "camera must be above the ground (height {} must be positive)",
                self.camera_height
            )));
        }
        if self.frames == 0 {
            return Err(Error::invalid("scene needs at least one frame"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        let m = &self.motion;
        if ![m.forward, m.lateral, m.yaw].iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("motion must be finite"));
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            let dims = [b.size_x, b.size_z, b.height];
            if !dims.iter().all(|d| d.is_finite() && *d > 0.0) || !(b.center_x.is_finite() && b.center_z.is_finite()) {
                return Err(Error::invalid(format!("obstacle {i} must have finite position and positive size")));
            }
        }
        if !self.backdrop_distance.is_finite() {
            return Err(Error::invalid("backdrop distance must be finite"));
        }
        Ok(())
    }

    /// Global world-from-camera poses of every frame.
    pub fn trajectory(&self) -> Trajectory {
        let rel = vec![self.motion.relative_pose(); self.frames - 1];
        if rel.is_empty() {
            Trajectory::new(vec![Pose::identity()]).expect("non-empty")
        } else {
            accumulate_trajectory(&rel).expect("non-empty")
        }
    }
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub image: Image,
    pub depth: DepthMap,
    /// 1 on ground pixels, 0 elsewhere.
    pub ground_mask: WeightMask,
    /// World-from-camera.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub spec: SceneSpec,
    pub frames: Vec<SyntheticFrame>,
    /// Product of every factor applied by [`rescale_sequence`]; 1 when the
    /// depths and translations are metric.
    pub applied_scale: f64,
}

impl SyntheticSequence {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.frames.iter().map(|f| f.pose).collect()).expect("sequences are non-empty")
    }

    pub fn relative_poses(&self) -> Vec<Pose> {
        self.trajectory().relative_poses()
    }
}

/// A few seeded sinusoids over 2D surface coordinates.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(Vector2<f64>, f64, f64)>,
}

impl Texture {
    const AMPLITUDES: [f64; 3] = [0.2, 0.13, 0.08];

    /// `base` sets the wavelength scale of the surface coordinates.
    fn new(rng: &mut ChaCha8Rng, base: f64) -> Self {
        let waves = Self::AMPLITUDES
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let magnitude = base * (1.0 + 0.6 * i as f64) * rng.random_range(0.8..1.2);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (Vector2::new(angle.cos(), angle.sin()) * magnitude, phase, a)
            })
            .collect();
        Texture { waves }
    }

    fn eval(&self, c: Vector2<f64>, offset: f64) -> f64 {
        let mut value = 0.5 + offset;
        for (k, phase, a) in &self.waves {
            value += a * (k.dot(&c) + phase).sin();
        }
        value
    }
}

struct Textures {
    ground: Texture,
    wall: Texture,
    boxes: Texture,
}

impl Textures {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Textures {
            // Ground texture is parameterized by (x/z, 1/z) so that its
            // image-space frequency stays bounded at every distance.
            ground: Texture::new(&mut rng, 50.0),
            wall: Texture::new(&mut rng, 0.6),
            boxes: Texture::new(&mut rng, 2.0),
        }
    }
}

/// Offset of the ground texture's depth coordinate; keeps `1/(z + offset)`
/// bounded near the camera.
const GROUND_Z_OFFSET: f64 = 1.0;

enum Surface {
    Ground,
    Wall,
    Box { axis: usize },
}

struct Hit {
    t: f64,
    surface: Surface,
}

fn trace(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let ground_y = spec.camera_height;
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, surface: Surface| {
        if t > 0.0 && best.as_ref().is_none_or(|b| t < b.t) {
            best = Some(Hit { t, surface });
        }
    };
    if dir.y > 0.0 {
        consider((ground_y - origin.y) / dir.y, Surface::Ground);
    }
    if dir.z > 0.0 {
        consider((spec.backdrop_distance - origin.z) / dir.z, Surface::Wall);
    }
    for b in &spec.obstacles {
        if let Some((t, axis)) = b.intersect(origin, dir, ground_y) {
            consider(t, Surface::Box { axis });
        }
    }
    best
}

fn shade(textures: &Textures, hit: &Hit, p: &Vector3<f64>) -> f64 {
    let value = match hit.surface {
        Surface::Ground => {
            let inv = 1.0 / (p.z + GROUND_Z_OFFSET);
            textures.ground.eval(Vector2::new(p.x * inv, inv), 0.0)
        }
        Surface::Wall => textures.wall.eval(Vector2::new(p.x, p.y), 0.05),
        Surface::Box { axis } => {
            let c = match axis {
                0 => Vector2::new(p.z, p.y),
                1 => Vector2::new(p.x, p.z),
                _ => Vector2::new(p.x, p.y),
            };
            textures.boxes.eval(c, -0.05)
        }
    };
    value.clamp(0.0, 1.0)
}

fn render_frame(spec: &SceneSpec, textures: &Textures, pose: &Pose, noise: Option<&mut ChaCha8Rng>) -> Result<SyntheticFrame> {
    let k = &spec.intrinsics;
    let origin = *pose.translation();
    let n = k.pixel_count();
    let mut image = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = k.ray(u as f64, v as f64);
            let dir = pose.rotation() * ray;
            let hit = trace(spec, &origin, &dir)
                .ok_or_else(|| Error::invalid(format!("pixel ({u}, {v}) sees no surface; move the backdrop")))?;
            let p = origin + dir * hit.t;
            image.push(shade(textures, &hit, &p));
            // The ray has unit z in the camera frame, so t is the z-depth.
            depth.push(hit.t);
            mask.push(if matches!(hit.surface, Surface::Ground) { 1.0 } else { 0.0 });
        }
    }
    if let Some(rng) = noise {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for d in &mut depth {
            *d = (*d * (1.0 + normal.sample(rng))).max(D_MIN);
        }
    }
    Ok(SyntheticFrame {
        image: Image::new(k.width, k.height, 1, image)?,
        depth: DepthMap::new(k.width, k.height, depth)?,
        ground_mask: WeightMask::new(k.width, k.height, mask)?,
        pose: *pose,
    })
}

/// Renders every frame of the scene.
pub fn render_sequence(spec: &SceneSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let trajectory = spec.trajectory();
    for (i, pose) in trajectory.poses().iter().enumerate() {
        let c = pose.translation();
        if let Some(j) = spec.obstacles.iter().position(|b| b.contains(c, spec.camera_height)) {
            return Err(Error::invalid(format!("camera of frame {i} is inside obstacle {j}")));
        }
        if c.z >= spec.backdrop_distance {
            return Err(Error::invalid(format!("camera of frame {i} is beyond the backdrop")));
        }
    }
    let textures = Textures::new(spec.texture_seed);
    let mut noise_rng = (spec.noise_sigma > 0.0).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        rng.set_stream(1);
        rng
    });
    let frames = trajectory
        .poses()
        .iter()
        .map(|pose| render_frame(spec, &textures, pose, noise_rng.as_mut()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        spec: spec.clone(),
        frames,
        applied_scale: 1.0,
    })
}

/// Per-frame masks of the pixels whose first hit is an obstacle box: 1 on
/// box pixels, 0 on ground and backdrop. Traced from the scene geometry, so
/// they are unaffected by depth noise or rescaling.
pub fn obstacle_masks(spec: &SceneSpec) -> Result<Vec<WeightMask>> {
    spec.validate()?;
    let k = &spec.intrinsics;
    spec.trajectory()
        .poses()
        .iter()
        .map(|pose| {
            WeightMask::from_fn(k.width, k.height, |u, v| {
                let dir = pose.rotation() * k.ray(u as f64, v as f64);
                match trace(spec, pose.translation(), &dir) {
                    Some(Hit { surface: Surface::Box { .. }, .. }) => 1.0,
                    _ => 0.0,
                }
            })
        })
        .collect()
}

/// Multiplies every depth and every translation by `k`, leaving images,
/// masks, and the known camera height untouched.
pub fn rescale_sequence(seq: &SyntheticSequence, k: f64) -> Result<SyntheticSequence> {
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::invalid(format!("rescale factor must be positive, got {k}")));
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            Ok(SyntheticFrame {
                image: f.image.clone(),
                depth: f.depth.scaled(k)?,
                ground_mask: f.ground_mask.clone(),
                pose: f.pose.with_translation(f.pose.translation() * k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        spec: seq.spec.clone(),
        frames,
        applied_scale: seq.applied_scale * k,
    })
}
