use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Tolerance used when deciding whether a point lies inside a box. Surface
/// points of the synthetic generator sit exactly on faces.
pub const CONTAINS_EPS: f64 = 1e-6;

/// A lidar return: position in meters and reflectance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && (0.0..=1.0).contains(&self.r)
    }
}

/// Non-empty ordered point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_valid()) {
            return Err(invalid(alloc::format!("point {i} has non-finite coordinates or reflectance outside [0,1]")));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point::new(c[0], c[1], c[2], 0.0)).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::xyz).collect()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Wrap an angle into `(-pi, pi]`.
///
/// Values within 1e-12 of `-pi` map to `pi`, so `3 * PI` and `-PI` both land on
/// `PI` despite the rounding in their floating-point representation.
pub fn normalize_yaw(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("yaw"));
    }
    Ok(wrap_angle(theta))
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = theta - two_pi * ((theta + PI) / two_pi).floor();
    if r <= -PI + 1e-12 {
        r += two_pi;
    }
    if r > PI {
        r = PI;
    }
    r
}

/// Oriented box: center, size and heading about +z.
///
/// `l` runs along the heading direction, `w` across it, `h` is vertical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, yaw: f64) -> Result<Self> {
        if ![cx, cy, cz, w, l, h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box parameters"));
        }
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(invalid(alloc::format!("box dimensions must be positive, got w={w} l={l} h={h}")));
        }
        Ok(Self {
            cx,
            cy,
            cz,
            w,
            l,
            h,
            yaw: normalize_yaw(yaw)?,
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.l * self.l + self.h * self.h).sqrt()
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    /// Coordinates of `p` in the box frame (origin at center, x along heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * local[0] - s * local[1],
            self.cy + s * local[0] + c * local[1],
            self.cz + local[2],
        ]
    }

    /// Inclusive containment with [`CONTAINS_EPS`] slack.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.l / 2.0 + CONTAINS_EPS
            && q[1].abs() <= self.w / 2.0 + CONTAINS_EPS
            && q[2].abs() <= self.h / 2.0 + CONTAINS_EPS
    }
}

/// A point cloud with its box annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub classes: Vec<u32>,
}

impl LabeledScene {
    pub fn new(cloud: PointCloud, boxes: Vec<Box3D>, classes: Vec<u32>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(invalid(alloc::format!(
                "{} boxes but {} class labels",
                boxes.len(),
                classes.len()
            )));
        }
        Ok(Self { cloud, boxes, classes })
    }

    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c as usize >= n_classes) {
            Some(c) => Err(invalid(alloc::format!("class id {c} out of range for {n_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Index of the first box containing each point, if any.
    pub fn point_labels(&self) -> Vec<Option<usize>> {
        self.cloud
            .points()
            .iter()
            .map(|p| box_membership(&self.boxes, p.xyz()))
            .collect()
    }
}

pub fn box_membership(boxes: &[Box3D], p: [f64; 3]) -> Option<usize> {
    boxes.iter().position(|b| b.contains(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn yaw_examples() {
        assert_eq!(normalize_yaw(0.0).unwrap(), 0.0);
        assert_eq!(normalize_yaw(3.0 * PI).unwrap(), PI);
        assert_eq!(normalize_yaw(-PI).unwrap(), PI);
        assert_eq!(normalize_yaw(PI).unwrap(), PI);
        assert!(normalize_yaw(f64::NAN).is_err());
        assert!(normalize_yaw(f64::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn yaw_range_and_idempotence(theta in -1000.0f64..1000.0) {
            let r = normalize_yaw(theta).unwrap();
            prop_assert!(r > -PI && r <= PI);
            prop_assert_eq!(normalize_yaw(r).unwrap(), r);
            let k = ((theta - r) / (2.0 * PI)).round();
            prop_assert!((theta - r - 2.0 * PI * k).abs() < 1e-9);
        }

        #[test]
        fn local_world_roundtrip(x in -10.0f64..10.0, y in -10.0f64..10.0, z in -2.0f64..2.0, yaw in -3.0f64..3.0) {
            let b = Box3D::new(1.0, -2.0, 0.5, 1.5, 3.0, 1.2, yaw).unwrap();
            let w = b.to_world(b.to_local([x, y, z]));
            prop_assert!((w[0] - x).abs() < 1e-12 && (w[1] - y).abs() < 1e-12 && (w[2] - z).abs() < 1e-12);
        }
    }

    #[test]
    fn box_validation() {
        assert!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box3D::new(0.0, 0.0, f64::NAN, 1.0, 1.0, 1.0, 0.0).is_err());
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 7.0).unwrap();
        assert!(b.yaw > -PI && b.yaw <= PI);
    }

    #[test]
    fn containment_uses_heading() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 4.0, 1.0, PI / 2.0).unwrap();
        assert!(b.contains([0.0, 1.9, 0.0]));
        assert!(!b.contains([1.9, 0.0, 0.0]));
        assert!(b.contains([0.5, 2.0, 0.5]));
    }

    #[test]
    fn cloud_rejects_empty_and_bad_reflectance() {
        assert!(PointCloud::new(Vec::new()).is_err());
        assert!(PointCloud::new(alloc::vec![Point::new(0.0, 0.0, 0.0, 1.5)]).is_err());
    }

    #[test]
    fn scene_length_check() {
        let cloud = PointCloud::from_xyz(&[[0.0; 3]]).unwrap();
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert!(LabeledScene::new(cloud.clone(), alloc::vec![b], alloc::vec![]).is_err());
        let s = LabeledScene::new(cloud, alloc::vec![b], alloc::vec![2]).unwrap();
        assert!(s.check_classes(2).is_err());
        assert!(s.check_classes(3).is_ok());
        assert_eq!(s.point_labels(), alloc::vec![Some(0)]);
    }
}
