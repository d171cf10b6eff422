//! Two-motor bending kinematics with pinhole projection, and a grayscale
//! raster renderer that produces policy observations.
//!
//! World targets are fixed bearings `(bearing_u, bearing_v)` relative to the
//! straight (unbent) camera axis. Bending the tip by `alpha_i = k * theta_i`
//! rotates the camera, so a target projects to
//!
//! ```text
//! u = c_x + f * tan(bearing_u - k * theta1)
//! v = c_y - f * tan(bearing_v - k * theta2)
//! ```
//!
//! Image origin is top-left and `v` grows downward, so "upper" means smaller `v`.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::seed;

pub const SCENE_SCHEMA_VERSION: u32 = 1;

const BACKGROUND: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorState {
    pub theta1: f64,
    pub theta2: f64,
}

impl MotorState {
    pub const ZERO: MotorState = MotorState {
        theta1: 0.0,
        theta2: 0.0,
    };

    pub const fn new(theta1: f64, theta2: f64) -> Self {
        MotorState { theta1, theta2 }
    }

    pub fn within(&self, theta_max: f64) -> bool {
        self.theta1.abs() <= theta_max + 1e-12 && self.theta2.abs() <= theta_max + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsConfig {
    /// Bending gain `k` in `alpha_i = k * theta_i`.
    pub bend_gain: f64,
    /// Motor increment per non-stop action, radians.
    pub delta_theta: f64,
    /// Focal length in pixels.
    pub focal_px: f64,
    pub image_size: u32,
    pub center: PixelPoint,
    /// Stop / success radius around the focus center, pixels.
    pub stop_epsilon: f64,
    pub theta_max: f64,
    /// Angular margin kept between projection arguments and +-pi/2.
    pub view_margin: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        KinematicsConfig {
            bend_gain: 1.0,
            delta_theta: 0.05,
            focal_px: 200.0,
            image_size: 400,
            center: PixelPoint::new(200.0, 200.0),
            stop_epsilon: 18.0,
            theta_max: 0.6,
            view_margin: 0.1,
        }
    }
}

impl KinematicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("kinematics: {m}")));
        if !(self.stop_epsilon > 0.0) {
            return bad("stop_epsilon must be > 0");
        }
        if !(self.focal_px > 0.0) {
            return bad("focal_px must be > 0");
        }
        if !(self.delta_theta > 0.0) {
            return bad("delta_theta must be > 0");
        }
        if !(self.bend_gain > 0.0) {
            return bad("bend_gain must be > 0");
        }
        if self.image_size == 0 {
            return bad("image_size must be > 0");
        }
        if !(self.theta_max > 0.0) {
            return bad("theta_max must be > 0");
        }
        if !(0.0..FRAC_PI_2).contains(&self.view_margin) {
            return bad("view_margin must lie in [0, pi/2)");
        }
        if self.bend_gain * self.theta_max >= self.cone_half_angle() {
            return bad("bend_gain * theta_max must stay inside the view cone");
        }
        Ok(())
    }

    /// Largest admissible magnitude of a projection argument.
    pub fn cone_half_angle(&self) -> f64 {
        FRAC_PI_2 - self.view_margin
    }

    /// Largest target bearing that stays projectable anywhere in the workspace.
    pub fn max_bearing(&self) -> f64 {
        self.cone_half_angle() - self.bend_gain * self.theta_max
    }

    pub fn in_frame(&self, p: &PixelPoint) -> bool {
        let s = self.image_size as f64;
        (0.0..s).contains(&p.u) && (0.0..s).contains(&p.v)
    }

    /// Projection of a world bearing for the given motor state, ignoring the
    /// image bounds. `None` when an argument leaves the view cone.
    pub fn project_bearing(&self, bearing_u: f64, bearing_v: f64, theta: MotorState) -> Option<PixelPoint> {
        let au = bearing_u - self.bend_gain * theta.theta1;
        let av = bearing_v - self.bend_gain * theta.theta2;
        let cone = self.cone_half_angle();
        if au.abs() >= cone || av.abs() >= cone {
            return None;
        }
        Some(PixelPoint::new(
            self.center.u + self.focal_px * au.tan(),
            self.center.v - self.focal_px * av.tan(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "PP")]
    Pp,
    #[serde(rename = "AR")]
    Ar,
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "GENERAL_SEQ")]
    GeneralSeq,
}

impl Task {
    pub fn code(self) -> &'static str {
        match self {
            Task::Pp => "PP",
            Task::Ar => "AR",
            Task::Cc => "CC",
            Task::GeneralSeq => "GENERAL_SEQ",
        }
    }

    /// Multi-target tasks visit targets in sequence rather than stopping.
    pub fn is_sequential(self) -> bool {
        matches!(self, Task::Cc | Task::GeneralSeq)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Appearance {
    Disc,
    Blob,
    Dot,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub bearing_u: f64,
    pub bearing_v: f64,
    /// Angular radius; the drawn pixel radius is `f * tan(radius_world)`.
    pub radius_world: f64,
    pub appearance: Appearance,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub task: Task,
    /// For CC the ring markers are listed in anti-clockwise order; for
    /// GENERAL_SEQ in visiting order.
    pub targets: Vec<TargetSpec>,
    pub seed: u64,
    #[serde(default)]
    pub distractor_count: u32,
}

impl Scene {
    pub fn validate(&self, cfg: &KinematicsConfig) -> Result<()> {
        let n = self.targets.len();
        let ok = match self.task {
            Task::Pp | Task::Ar => n == 1,
            Task::Cc => n >= 3,
            Task::GeneralSeq => n >= 2,
        };
        if !ok {
            return Err(Error::Scene(format!(
                "{} scene {} has {n} targets",
                self.task, self.id
            )));
        }
        let limit = cfg.max_bearing();
        for (i, t) in self.targets.iter().enumerate() {
            if !(t.radius_world > 0.0) || t.radius_world >= FRAC_PI_2 {
                return Err(Error::Scene(format!("target {i}: radius_world must be in (0, pi/2)")));
            }
            if t.bearing_u.abs() >= limit || t.bearing_v.abs() >= limit {
                return Err(Error::Scene(format!(
                    "target {i}: bearing outside projectable cone (|bearing| < {limit:.3})"
                )));
            }
            if !(0.0..=1.0).contains(&t.intensity) {
                return Err(Error::Scene(format!("target {i}: intensity must be in [0, 1]")));
            }
        }
        Ok(())
    }

    fn target(&self, index: usize) -> Result<&TargetSpec> {
        self.targets.get(index).ok_or(Error::TargetIndex {
            index,
            count: self.targets.len(),
        })
    }

    /// Background clutter, derived deterministically from the scene seed.
    pub fn distractors(&self, cfg: &KinematicsConfig) -> Vec<TargetSpec> {
        let mut rng = seed::rng(seed::derive(self.seed, 0xD15_7AC7));
        let limit = cfg.max_bearing().min(0.5);
        (0..self.distractor_count)
            .map(|_| TargetSpec {
                bearing_u: rng.random_range(-limit..limit),
                bearing_v: rng.random_range(-limit..limit),
                radius_world: rng.random_range(0.03..0.05),
                appearance: Appearance::Disc,
                intensity: rng.random_range(0.3..0.45),
            })
            .collect()
    }
}

/// Versioned on-disk container for scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub scenes: Vec<Scene>,
}

impl SceneFile {
    pub fn new(scenes: Vec<Scene>) -> Self {
        SceneFile {
            version: SCENE_SCHEMA_VERSION,
            scenes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: SceneFile = serde_json::from_str(&text)?;
        if file.version != SCENE_SCHEMA_VERSION {
            return Err(Error::Scene(format!(
                "unsupported scene schema version {} (expected {SCENE_SCHEMA_VERSION})",
                file.version
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    InView(PixelPoint),
    OutOfView,
}

impl Projection {
    pub fn point(&self) -> Option<PixelPoint> {
        match self {
            Projection::InView(p) => Some(*p),
            Projection::OutOfView => None,
        }
    }
}

/// Projects target `target_index` into the image for motor state `theta`.
pub fn project(
    scene: &Scene,
    target_index: usize,
    theta: MotorState,
    cfg: &KinematicsConfig,
) -> Result<Projection> {
    let t = scene.target(target_index)?;
    if !theta.within(cfg.theta_max) {
        return Err(Error::Workspace {
            theta1: theta.theta1,
            theta2: theta.theta2,
            theta_max: cfg.theta_max,
        });
    }
    Ok(match cfg.project_bearing(t.bearing_u, t.bearing_v, theta) {
        Some(p) if cfg.in_frame(&p) => Projection::InView(p),
        _ => Projection::OutOfView,
    })
}

/// Pixel distance of a target from the focus center, also defined when the
/// target has left the frame. `None` only outside the view cone.
pub fn focus_distance(
    scene: &Scene,
    target_index: usize,
    theta: MotorState,
    cfg: &KinematicsConfig,
) -> Result<Option<f64>> {
    let t = scene.target(target_index)?;
    Ok(cfg
        .project_bearing(t.bearing_u, t.bearing_v, theta)
        .map(|p| p.distance(&cfg.center)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuation {
    pub state: MotorState,
    /// Set when the increment was cut short by the workspace limit.
    pub clamped: bool,
}

pub fn apply_action(theta: MotorState, action: Action, cfg: &KinematicsConfig) -> Actuation {
    let (s1, s2) = action.increment();
    let raw1 = theta.theta1 + s1 as f64 * cfg.delta_theta;
    let raw2 = theta.theta2 + s2 as f64 * cfg.delta_theta;
    let lim = cfg.theta_max;
    let t1 = raw1.clamp(-lim, lim);
    let t2 = raw2.clamp(-lim, lim);
    Actuation {
        state: MotorState::new(t1, t2),
        clamped: t1 != raw1 || t2 != raw2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Standard deviation of additive Gaussian pixel noise.
    pub pixel_sigma: f64,
    /// Standard deviation (pixels) of the ground-truth box corner jitter.
    pub bbox_jitter_px: f64,
    /// Probability that a detection is dropped during annotation.
    pub dropout_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            pixel_sigma: 0.0,
            bbox_jitter_px: 0.0,
            dropout_prob: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.pixel_sigma == 0.0 && self.bbox_jitter_px == 0.0 && self.dropout_prob == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetView {
    Visible(BBox),
    OutOfView,
}

impl TargetView {
    pub fn bbox(&self) -> Option<BBox> {
        match self {
            TargetView::Visible(b) => Some(*b),
            TargetView::OutOfView => None,
        }
    }
}

/// Rendered observation plus per-target ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub size: u32,
    /// Row-major intensities in [0, 1].
    pub pixels: Vec<f32>,
    pub ground_truth: Vec<TargetView>,
}

impl Frame {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.size + x) as usize]
    }

    /// Binary 8-bit PGM (P5).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.size, self.size)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)
    }

    pub fn save_pgm(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cu: f64, cv: f64, r: f64 },
    Square { cu: f64, cv: f64, half: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cu, cv, r } => (x - cu).powi(2) + (y - cv).powi(2) <= r * r,
            Shape::Square { cu, cv, half } => (x - cu).abs() <= half && (y - cv).abs() <= half,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disc { cu, cv, r } => (cu - r, cv - r, cu + r, cv + r),
            Shape::Square { cu, cv, half } => (cu - half, cv - half, cu + half, cv + half),
        }
    }
}

/// Pixel-space primitives for a target whose center projects to `p`.
fn shapes_for(spec: &TargetSpec, p: PixelPoint, cfg: &KinematicsConfig, shape_seed: u64) -> Vec<Shape> {
    let rho = cfg.focal_px * spec.radius_world.tan();
    match spec.appearance {
        Appearance::Disc => vec![Shape::Disc { cu: p.u, cv: p.v, r: rho }],
        Appearance::Dot => vec![Shape::Disc {
            cu: p.u,
            cv: p.v,
            r: rho.max(1.5),
        }],
        Appearance::Square => vec![Shape::Square {
            cu: p.u,
            cv: p.v,
            half: rho.max(1.5),
        }],
        Appearance::Blob => {
            let mut rng = seed::rng(shape_seed);
            let lobes = rng.random_range(2..=4usize);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut shapes = vec![Shape::Disc { cu: p.u, cv: p.v, r: rho }];
            for i in 0..lobes {
                let ang = phase + std::f64::consts::TAU * i as f64 / lobes as f64;
                let off = rho * rng.random_range(0.45..0.7);
                shapes.push(Shape::Disc {
                    cu: p.u + off * ang.cos(),
                    cv: p.v + off * ang.sin(),
                    r: rho * rng.random_range(0.45..0.65),
                });
            }
            shapes
        }
    }
}

/// Iterates the pixels covered by `shapes`, clipped to the image.
fn for_each_covered(shapes: &[Shape], size: u32, mut f: impl FnMut(u32, u32)) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for s in shapes {
        let (a, b, c, d) = s.bounds();
        x0 = x0.min(a);
        y0 = y0.min(b);
        x1 = x1.max(c);
        y1 = y1.max(d);
    }
    let lo = |v: f64| (v - 0.5).floor().max(0.0) as u32;
    let hi = |v: f64| ((v - 0.5).ceil().max(-1.0) as i64).min(size as i64 - 1);
    let (ix0, iy0) = (lo(x0), lo(y0));
    let (ix1, iy1) = (hi(x1), hi(y1));
    if ix1 < 0 || iy1 < 0 {
        return;
    }
    for y in iy0..=iy1 as u32 {
        let py = y as f64 + 0.5;
        for x in ix0..=ix1 as u32 {
            let px = x as f64 + 0.5;
            if shapes.iter().any(|s| s.contains(px, py)) {
                f(x, y);
            }
        }
    }
}

fn shape_seed(scene: &Scene, index: usize) -> u64 {
    seed::derive(scene.seed, 0xB10B_0000 + index as u64)
}

fn target_shapes(
    scene: &Scene,
    index: usize,
    theta: MotorState,
    cfg: &KinematicsConfig,
) -> Result<Option<Vec<Shape>>> {
    let spec = scene.target(index)?;
    Ok(match project(scene, index, theta, cfg)? {
        Projection::InView(p) => Some(shapes_for(spec, p, cfg, shape_seed(scene, index))),
        Projection::OutOfView => None,
    })
}

fn covered_bbox(shapes: &[Shape], size: u32) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut any = false;
    for_each_covered(shapes, size, |x, y| {
        any = true;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    });
    any.then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Noiseless tight box of the pixels drawn for one target.
pub fn target_extent(
    scene: &Scene,
    target_index: usize,
    theta: MotorState,
    cfg: &KinematicsConfig,
) -> Result<TargetView> {
    Ok(target_shapes(scene, target_index, theta, cfg)?
        .and_then(|s| covered_bbox(&s, cfg.image_size))
        .map_or(TargetView::OutOfView, TargetView::Visible))
}

/// Noiseless ground truth for every target.
pub fn ground_truth(scene: &Scene, theta: MotorState, cfg: &KinematicsConfig) -> Result<Vec<TargetView>> {
    (0..scene.targets.len())
        .map(|i| target_extent(scene, i, theta, cfg))
        .collect()
}

/// Shifts a box by a rounded Gaussian offset, keeping it inside the image.
pub fn jitter_box<R: Rng>(b: BBox, sigma: f64, size: u32, rng: &mut R) -> BBox {
    if sigma <= 0.0 {
        return b;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let mut shift = |pos: u32, ext: u32| -> u32 {
        let d = normal.sample(rng).round() as i64;
        (pos as i64 + d).clamp(0, (size - ext) as i64) as u32
    };
    let x = shift(b.x, b.w);
    let y = shift(b.y, b.h);
    BBox::new(x, y, b.w, b.h)
}

fn jitter_view<R: Rng>(view: TargetView, noise: &NoiseConfig, size: u32, rng: &mut R) -> TargetView {
    match view {
        TargetView::Visible(b) => TargetView::Visible(jitter_box(b, noise.bbox_jitter_px, size, rng)),
        TargetView::OutOfView => TargetView::OutOfView,
    }
}

/// The ground truth [`render`] would report for the same arguments, without
/// rasterizing the full frame.
pub fn observed_boxes(
    scene: &Scene,
    theta: MotorState,
    cfg: &KinematicsConfig,
    noise: &NoiseConfig,
    render_seed: u64,
) -> Result<Vec<TargetView>> {
    let stream = seed::derive(scene.seed, render_seed);
    let mut jitter_rng = seed::rng(seed::derive(stream, 1));
    Ok(ground_truth(scene, theta, cfg)?
        .into_iter()
        .map(|v| jitter_view(v, noise, cfg.image_size, &mut jitter_rng))
        .collect())
}

pub fn render(
    scene: &Scene,
    theta: MotorState,
    cfg: &KinematicsConfig,
    noise: &NoiseConfig,
    render_seed: u64,
) -> Result<Frame> {
    let size = cfg.image_size;
    let mut pixels = vec![BACKGROUND; (size * size) as usize];
    let paint = |shapes: &[Shape], level: f32, pixels: &mut Vec<f32>| {
        for_each_covered(shapes, size, |x, y| {
            let px = &mut pixels[(y * size + x) as usize];
            *px = px.max(level);
        });
    };

    for (i, d) in scene.distractors(cfg).iter().enumerate() {
        if let Some(p) = cfg.project_bearing(d.bearing_u, d.bearing_v, theta) {
            if cfg.in_frame(&p) {
                let shapes = shapes_for(d, p, cfg, seed::derive(scene.seed, 0xD000 + i as u64));
                paint(&shapes, d.intensity as f32, &mut pixels);
            }
        }
    }

    let stream = seed::derive(scene.seed, render_seed);
    let mut jitter_rng = seed::rng(seed::derive(stream, 1));
    let mut ground_truth = Vec::with_capacity(scene.targets.len());
    for (i, spec) in scene.targets.iter().enumerate() {
        let view = match target_shapes(scene, i, theta, cfg)? {
            Some(shapes) => {
                paint(&shapes, spec.intensity as f32, &mut pixels);
                covered_bbox(&shapes, size).map_or(TargetView::OutOfView, TargetView::Visible)
            }
            None => TargetView::OutOfView,
        };
        ground_truth.push(jitter_view(view, noise, size, &mut jitter_rng));
    }

    if noise.pixel_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.pixel_sigma)
            .map_err(|e| Error::Config(format!("pixel_sigma: {e}")))?;
        let mut rng = seed::rng(seed::derive(stream, 2));
        for p in pixels.iter_mut() {
            *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    Ok(Frame {
        size,
        pixels,
        ground_truth,
    })
}
