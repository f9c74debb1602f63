//! Synthetic labelled scenes, augmentation and the binary scene codec.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_4, PI};

#[allow(unused_imports)]
use num_traits::Float;

use crate::boxes::bev_iou;
use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;
use crate::types::{box_membership, Box3D, LabeledScene, Point, PointCloud};

/// Size ranges of one object class, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub w: (f64, f64),
    pub l: (f64, f64),
    pub h: (f64, f64),
}

impl ClassSpec {
    pub fn mean_size(&self) -> [f64; 3] {
        [
            0.5 * (self.w.0 + self.w.1),
            0.5 * (self.l.0 + self.l.1),
            0.5 * (self.h.0 + self.h.1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenConfig {
    /// Scene size along x, y, z. The sensor sits at the origin, the ground is
    /// `z = 0` and the scene spans `[-x/2, x/2] x [-y/2, y/2] x [0, z]`.
    pub extent: [f64; 3],
    pub classes: Vec<ClassSpec>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Points per square meter on visible box faces.
    pub surface_density: f64,
    /// Points per square meter of ground.
    pub clutter_density: f64,
    /// Uniform points anywhere in the scene volume (outside boxes).
    pub noise_points: usize,
    /// Fraction of surface points dropped at random.
    pub occlusion: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            extent: [40.0, 40.0, 4.0],
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    w: (1.6, 2.0),
                    l: (3.5, 4.5),
                    h: (1.4, 1.7),
                },
                ClassSpec {
                    name: "cyclist".into(),
                    w: (0.5, 0.8),
                    l: (1.6, 2.0),
                    h: (1.6, 1.8),
                },
            ],
            min_objects: 2,
            max_objects: 6,
            surface_density: 20.0,
            clutter_density: 0.5,
            noise_points: 100,
            occlusion: 0.2,
        }
    }
}

pub const MIN_POINTS_PER_BOX: usize = 8;
pub const PLACEMENT_RETRIES: usize = 100;

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(invalid("scene generator needs at least one class"));
        }
        if !self.extent.iter().all(|&e| e.is_finite() && e > 0.0) {
            return Err(invalid("extent must be positive"));
        }
        if !(self.surface_density > 0.0 && self.surface_density.is_finite()) {
            return Err(invalid("surface_density must be positive"));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return Err(invalid("clutter_density must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return Err(invalid("occlusion must lie in [0, 1)"));
        }
        if self.min_objects > self.max_objects {
            return Err(invalid("min_objects exceeds max_objects"));
        }
        for c in &self.classes {
            for (lo, hi) in [c.w, c.l, c.h] {
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(invalid(format!("bad size range for class `{}`", c.name)));
                }
            }
            if c.h.1 > self.extent[2] {
                return Err(invalid(format!("class `{}` is taller than the scene", c.name)));
            }
        }
        Ok(())
    }

    fn inside_bev(&self, b: &Box3D) -> bool {
        let (hx, hy) = (0.5 * self.extent[0], 0.5 * self.extent[1]);
        let (s, c) = b.yaw.sin_cos();
        [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().all(|&(a, d)| {
            let lx = a * 0.5 * b.l;
            let wy = d * 0.5 * b.w;
            let x = b.cx + c * lx - s * wy;
            let y = b.cy + s * lx + c * wy;
            x.abs() <= hx && y.abs() <= hy
        })
    }
}

/// Samples a labelled scene. Boxes stand on the ground, do not overlap in
/// bird's-eye view and lie inside the extent. Each box is covered on its top
/// face and on the side faces that face the sensor.
pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<LabeledScene> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let n_obj = rng.int_range(cfg.min_objects, cfg.max_objects);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_obj);
    let mut classes = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let cls = rng.index(cfg.classes.len());
        let spec = &cfg.classes[cls];
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.range(spec.w.0, spec.w.1);
            let l = rng.range(spec.l.0, spec.l.1);
            let h = rng.range(spec.h.0, spec.h.1);
            let cx = rng.range(-0.5 * cfg.extent[0], 0.5 * cfg.extent[0]);
            let cy = rng.range(-0.5 * cfg.extent[1], 0.5 * cfg.extent[1]);
            let yaw = rng.range(-PI, PI);
            let b = Box3D::new(cx, cy, 0.5 * h, w, l, h, yaw)?;
            if cfg.inside_bev(&b) && boxes.iter().all(|o| bev_iou(o, &b) == 0.0 && !bev_touch(o, &b)) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => {
                boxes.push(b);
                classes.push(cls as u32);
            }
            None => {
                return Err(Error::SceneGeneration {
                    requested: n_obj,
                    retries: PLACEMENT_RETRIES,
                })
            }
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        sample_surface(cfg, b, &mut rng, &mut points);
    }
    let (hx, hy) = (0.5 * cfg.extent[0], 0.5 * cfg.extent[1]);
    let n_clutter = (cfg.clutter_density * cfg.extent[0] * cfg.extent[1]).round() as usize;
    let mut added = 0;
    while added < n_clutter {
        let p = [rng.range(-hx, hx), rng.range(-hy, hy), 0.0];
        let r = rng.uniform();
        if box_membership(&boxes, p).is_none() {
            points.push(Point::new(p[0], p[1], p[2], r));
        }
        added += 1;
    }
    for _ in 0..cfg.noise_points {
        let p = [rng.range(-hx, hx), rng.range(-hy, hy), rng.range(0.0, cfg.extent[2])];
        let r = rng.uniform();
        if box_membership(&boxes, p).is_none() {
            points.push(Point::new(p[0], p[1], p[2], r));
        }
    }
    LabeledScene::new(PointCloud::new(points)?, boxes, classes)
}

/// Boxes closer than this in BEV are treated as touching; keeps surface
/// points of one box out of its neighbor.
const MIN_GAP: f64 = 0.1;

fn bev_touch(a: &Box3D, b: &Box3D) -> bool {
    let grown = |x: &Box3D| Box3D::new(x.cx, x.cy, x.cz, x.w + MIN_GAP, x.l + MIN_GAP, x.h, x.yaw);
    match (grown(a), grown(b)) {
        (Ok(a), Ok(b)) => bev_iou(&a, &b) > 0.0,
        _ => true,
    }
}

/// Points on the top face and on the side faces whose outward normal points
/// toward the sensor. Local frame: x along length, y along width.
fn sample_surface(cfg: &SceneGenConfig, b: &Box3D, rng: &mut SeededRng, out: &mut Vec<Point>) {
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    // (normal axis, sign, area)
    let mut faces = vec![(2usize, 1.0, b.l * b.w)];
    let to_sensor = b.to_local([0.0, 0.0, b.cz]);
    for (axis, half, area) in [(0usize, hl, b.w * b.h), (1usize, hw, b.l * b.h)] {
        for sign in [1.0, -1.0] {
            if sign * to_sensor[axis] > half {
                faces.push((axis, sign, area));
            }
        }
    }
    let face_point = |rng: &mut SeededRng, axis: usize, sign: f64| -> Point {
        let mut local = [rng.range(-hl, hl), rng.range(-hw, hw), rng.range(-hh, hh)];
        local[axis] = sign * [hl, hw, hh][axis];
        let p = b.to_world(local);
        Point::new(p[0], p[1], p[2], rng.uniform())
    };
    let start = out.len();
    for &(axis, sign, area) in &faces {
        let n = (cfg.surface_density * area).round() as usize;
        for _ in 0..n {
            let keep = !rng.bernoulli(cfg.occlusion);
            let p = face_point(rng, axis, sign);
            if keep {
                out.push(p);
            }
        }
    }
    let total_area: f64 = faces.iter().map(|f| f.2).sum();
    while out.len() - start < MIN_POINTS_PER_BOX {
        // area-weighted face choice
        let mut t = rng.range(0.0, total_area);
        let mut pick = faces[0];
        for f in &faces {
            if t < f.2 {
                pick = *f;
                break;
            }
            t -= f.2;
        }
        out.push(face_point(rng, pick.0, pick.1));
    }
}

/// Augmentation switches; `None` draws the value at random.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugmentParams {
    pub flip: Option<bool>,
    pub rotation: Option<f64>,
    pub scale: Option<f64>,
    pub object_noise: bool,
}

pub const OBJECT_SHIFT_STD: f64 = 0.1;
pub const OBJECT_YAW_STD: f64 = 0.05;

/// Random flip across the x axis, global rotation in `[-pi/4, pi/4]`,
/// global scale in `[0.9, 1.1]` and per-object jitter.
pub fn augment(scene: &LabeledScene, rng: &mut SeededRng) -> Result<LabeledScene> {
    augment_with(
        scene,
        &AugmentParams {
            object_noise: true,
            ..AugmentParams::default()
        },
        rng,
    )
}

pub fn augment_with(scene: &LabeledScene, params: &AugmentParams, rng: &mut SeededRng) -> Result<LabeledScene> {
    let mut out = scene.clone();
    if params.object_noise {
        out = object_noise(&out, rng)?;
    }
    let flip = params.flip.unwrap_or_else(|| rng.bernoulli(0.5));
    if flip {
        out = flip_x(&out)?;
    }
    let angle = params.rotation.unwrap_or_else(|| rng.range(-FRAC_PI_4, FRAC_PI_4));
    out = rotate(&out, angle)?;
    let s = params.scale.unwrap_or_else(|| rng.range(0.9, 1.1));
    scale(&out, s)
}

fn map_scene(
    scene: &LabeledScene,
    point: impl Fn([f64; 3]) -> [f64; 3],
    bx: impl Fn(&Box3D) -> Result<Box3D>,
) -> Result<LabeledScene> {
    let points = scene
        .cloud
        .points()
        .iter()
        .map(|p| {
            let q = point(p.xyz());
            Point::new(q[0], q[1], q[2], p.r)
        })
        .collect();
    let boxes = scene.boxes.iter().map(bx).collect::<Result<_>>()?;
    LabeledScene::new(PointCloud::new(points)?, boxes, scene.classes.clone())
}

/// Mirror across the x axis: `y -> -y`, `yaw -> -yaw`.
pub fn flip_x(scene: &LabeledScene) -> Result<LabeledScene> {
    map_scene(
        scene,
        |p| [p[0], -p[1], p[2]],
        |b| Box3D::new(b.cx, -b.cy, b.cz, b.w, b.l, b.h, -b.yaw),
    )
}

/// Rotation about the vertical axis through the origin.
pub fn rotate(scene: &LabeledScene, angle: f64) -> Result<LabeledScene> {
    let (s, c) = angle.sin_cos();
    let rot = move |p: [f64; 3]| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    map_scene(scene, rot, |b| {
        let q = rot(b.center());
        Box3D::new(q[0], q[1], q[2], b.w, b.l, b.h, b.yaw + angle)
    })
}

/// Uniform scaling about the origin.
pub fn scale(scene: &LabeledScene, s: f64) -> Result<LabeledScene> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid("scale must be positive"));
    }
    map_scene(
        scene,
        |p| [s * p[0], s * p[1], s * p[2]],
        |b| Box3D::new(s * b.cx, s * b.cy, s * b.cz, s * b.w, s * b.l, s * b.h, b.yaw),
    )
}

/// Moves each box with its member points by a small random rigid motion.
/// A motion is discarded when it would change any point's membership.
pub fn object_noise(scene: &LabeledScene, rng: &mut SeededRng) -> Result<LabeledScene> {
    let mut points: Vec<Point> = scene.cloud.points().to_vec();
    let mut boxes = scene.boxes.clone();
    let labels = scene.point_labels();
    for bi in 0..boxes.len() {
        let dx = rng.normal(0.0, OBJECT_SHIFT_STD);
        let dy = rng.normal(0.0, OBJECT_SHIFT_STD);
        let dyaw = rng.normal(0.0, OBJECT_YAW_STD);
        let b = boxes[bi];
        let moved = Box3D::new(b.cx + dx, b.cy + dy, b.cz, b.w, b.l, b.h, b.yaw + dyaw)?;
        let (s, c) = dyaw.sin_cos();
        let move_pt = |p: &Point| {
            let (x, y) = (p.x - b.cx, p.y - b.cy);
            Point::new(b.cx + dx + c * x - s * y, b.cy + dy + s * x + c * y, p.z, p.r)
        };
        let mut trial_boxes = boxes.clone();
        trial_boxes[bi] = moved;
        let consistent = points.iter().zip(&labels).all(|(p, &l)| {
            let q = if l == Some(bi) { move_pt(p) } else { *p };
            box_membership(&trial_boxes, q.xyz()) == l
        });
        if consistent {
            for (p, &l) in points.iter_mut().zip(&labels) {
                if l == Some(bi) {
                    *p = move_pt(p);
                }
            }
            boxes = trial_boxes;
        }
    }
    LabeledScene::new(PointCloud::new(points)?, boxes, scene.classes.clone())
}

pub const SCENE_MAGIC: &[u8; 4] = b"PCS1";

/// Little-endian layout: magic, point count (u64), box count (u64), points
/// as 4 x f64, boxes as 7 x f64 followed by the class id (u32).
pub fn encode_scene(scene: &LabeledScene) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + scene.cloud.len() * 32 + scene.boxes.len() * 60);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(scene.cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&(scene.boxes.len() as u64).to_le_bytes());
    for p in scene.cloud.points() {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (b, &c) in scene.boxes.iter().zip(&scene.classes) {
        for v in b.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_scene(buf: &[u8]) -> Result<LabeledScene> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != SCENE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a scene file".into(),
        });
    }
    let n_points = r.u64("point count")? as usize;
    let n_boxes = r.u64("box count")? as usize;
    let need = n_points.checked_mul(32).and_then(|p| n_boxes.checked_mul(60).and_then(|b| p.checked_add(b)));
    if need.is_none_or(|n| n > buf.len() - r.pos) {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("header announces {n_points} points and {n_boxes} boxes, file is too short"),
        });
    }
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let at = r.pos;
        let p = Point::new(r.f64("point")?, r.f64("point")?, r.f64("point")?, r.f64("point")?);
        if !p.is_valid() {
            return Err(Error::Format {
                offset: at,
                msg: "invalid point".into(),
            });
        }
        points.push(p);
    }
    let mut boxes = Vec::with_capacity(n_boxes);
    let mut classes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let at = r.pos;
        let mut a = [0.0; 7];
        for v in &mut a {
            *v = r.f64("box")?;
        }
        let b = Box3D::from_array(a).map_err(|e| Error::Format {
            offset: at,
            msg: format!("{e}"),
        })?;
        boxes.push(b);
        classes.push(r.u32("class")?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: "trailing bytes".into(),
        });
    }
    let cloud = PointCloud::new(points).map_err(|e| Error::Format {
        offset: 4,
        msg: format!("{e}"),
    })?;
    LabeledScene::new(cloud, boxes, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_box_cfg() -> SceneGenConfig {
        SceneGenConfig {
            min_objects: 1,
            max_objects: 1,
            clutter_density: 0.0,
            noise_points: 0,
            ..SceneGenConfig::default()
        }
    }

    fn on_surface(b: &Box3D, p: [f64; 3]) -> bool {
        let l = b.to_local(p);
        let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
        let inside = (0..3).all(|i| l[i].abs() <= half[i] + 1e-6);
        let on_face = (0..3).any(|i| (l[i].abs() - half[i]).abs() <= 1e-6);
        inside && on_face
    }

    #[test]
    fn single_box_points_on_surface() {
        for seed in 0..5 {
            let s = generate_scene(&one_box_cfg(), seed).unwrap();
            assert_eq!(s.boxes.len(), 1);
            for p in s.cloud.points() {
                assert!(on_surface(&s.boxes[0], p.xyz()), "{p:?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneGenConfig::default();
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn every_box_has_points_and_boxes_are_disjoint() {
        let cfg = SceneGenConfig {
            occlusion: 0.95,
            surface_density: 0.5,
            ..SceneGenConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            let labels = s.point_labels();
            for (bi, b) in s.boxes.iter().enumerate() {
                assert!(labels.iter().filter(|l| **l == Some(bi)).count() >= MIN_POINTS_PER_BOX);
                assert!(cfg.inside_bev(b));
                for o in &s.boxes[bi + 1..] {
                    assert_eq!(bev_iou(b, o), 0.0);
                }
            }
        }
    }

    #[test]
    fn overfull_scene_errors() {
        let cfg = SceneGenConfig {
            extent: [5.0, 5.0, 4.0],
            min_objects: 6,
            max_objects: 6,
            ..SceneGenConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::SceneGeneration { .. })));
    }

    #[test]
    fn size_means_match_distributions() {
        let cfg = SceneGenConfig {
            surface_density: 0.1,
            clutter_density: 0.0,
            noise_points: 0,
            ..SceneGenConfig::default()
        };
        let mut sums = vec![[0.0; 3]; 2];
        let mut counts = [0usize; 2];
        for seed in 0..500 {
            let s = generate_scene(&cfg, seed).unwrap();
            for (b, &c) in s.boxes.iter().zip(&s.classes) {
                let c = c as usize;
                sums[c][0] += b.w;
                sums[c][1] += b.l;
                sums[c][2] += b.h;
                counts[c] += 1;
            }
        }
        for c in 0..2 {
            let want = cfg.classes[c].mean_size();
            for k in 0..3 {
                let got = sums[c][k] / counts[c] as f64;
                assert!((got - want[k]).abs() / want[k] < 0.05, "class {c} dim {k}: {got} vs {}", want[k]);
            }
        }
    }

    fn close(a: &LabeledScene, b: &LabeledScene, tol: f64) -> bool {
        a.cloud
            .points()
            .iter()
            .zip(b.cloud.points())
            .all(|(p, q)| (p.x - q.x).abs() < tol && (p.y - q.y).abs() < tol && (p.z - q.z).abs() < tol)
            && a.boxes.iter().zip(&b.boxes).all(|(x, y)| {
                x.to_array()
                    .iter()
                    .zip(y.to_array())
                    .enumerate()
                    .all(|(i, (u, v))| if i == 6 { ((u - v + PI).rem_euclid(2.0 * PI) - PI).abs() < tol } else { (u - v).abs() < tol })
            })
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_scene(&SceneGenConfig::default(), 3).unwrap();
        let back = flip_x(&flip_x(&s).unwrap()).unwrap();
        assert!(close(&s, &back, 1e-12));
    }

    #[test]
    fn scale_inverse_round_trip() {
        let s = generate_scene(&SceneGenConfig::default(), 4).unwrap();
        let back = scale(&scale(&s, 1.07).unwrap(), 1.0 / 1.07).unwrap();
        assert!(close(&s, &back, 1e-9));
    }

    #[test]
    fn codec_round_trip_is_bit_exact() {
        let s = generate_scene(&SceneGenConfig::default(), 5).unwrap();
        let bytes = encode_scene(&s);
        let back = decode_scene(&bytes).unwrap();
        for (p, q) in s.cloud.points().iter().zip(back.cloud.points()) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.r.to_bits(), q.r.to_bits());
        }
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let s = generate_scene(&SceneGenConfig::default(), 6).unwrap();
        let bytes = encode_scene(&s);
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            match decode_scene(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn background_only_scene_loads() {
        let cloud = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.5]]).unwrap();
        let s = LabeledScene::new(cloud, vec![], vec![]).unwrap();
        let back = decode_scene(&encode_scene(&s)).unwrap();
        assert!(back.boxes.is_empty());
        assert_eq!(back, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_preserves_membership(seed in 0u64..1000, aug_seed in 0u64..1000) {
            let s = generate_scene(&SceneGenConfig::default(), seed).unwrap();
            let mut rng = SeededRng::new(aug_seed);
            let a = augment(&s, &mut rng).unwrap();
            prop_assert_eq!(s.point_labels(), a.point_labels());
        }

        #[test]
        fn labels_match_brute_force(seed in 0u64..1000) {
            let s = generate_scene(&SceneGenConfig::default(), seed).unwrap();
            let labels = s.point_labels();
            for (p, l) in s.cloud.points().iter().zip(labels) {
                // brute force: explicit rotation into each box frame
                let brute = s.boxes.iter().position(|b| {
                    let (dx, dy) = (p.x - b.cx, p.y - b.cy);
                    let (sn, cs) = b.yaw.sin_cos();
                    let lx = cs * dx + sn * dy;
                    let ly = -sn * dx + cs * dy;
                    lx.abs() <= 0.5 * b.l + 1e-6 && ly.abs() <= 0.5 * b.w + 1e-6 && (p.z - b.cz).abs() <= 0.5 * b.h + 1e-6
                });
                prop_assert_eq!(brute, l);
            }
        }
    }
}
