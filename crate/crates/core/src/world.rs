//! Geometric realization of sampled scenes and ground-truth boxes.
//!
//! Headings are compass-style degrees: 0 points along +y and angles grow
//! clockwise, so a heading `h` faces `(sin h, cos h)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsl::{FeatureSource, Field, Schema};
use crate::sampler::{FeatureVector, Value};

pub const FRAME_WIDTH: f64 = 1920.0;
pub const FRAME_HEIGHT: f64 = 1200.0;
pub const CAR_LENGTH: f64 = 4.5;
pub const CAR_WIDTH: f64 = 1.8;
/// Mounting height of the camera above the ground plane, in meters.
pub const CAMERA_HEIGHT: f64 = 1.5;
/// Box height as a fraction of projected box width.
pub const BOX_ASPECT: f64 = 0.8;
const NEAR_PLANE: f64 = 0.1;
const ANGLE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViewCone {
    pub view_half_angle: f64,
    pub max_range: f64,
}

impl Default for ViewCone {
    fn default() -> Self {
        ViewCone {
            view_half_angle: 30.0,
            max_range: 60.0,
        }
    }
}

pub fn heading_vectors(heading_deg: f64) -> ((f64, f64), (f64, f64)) {
    let h = heading_deg.to_radians();
    let (s, c) = h.sin_cos();
    ((s, c), (c, -s))
}

/// Whether the point `(tx, ty)` lies within the cone of a viewer at
/// `(vx, vy)` facing `heading`. Both the range and the angular boundary are
/// inclusive.
pub fn in_view_cone(vx: f64, vy: f64, heading: f64, cone: &ViewCone, tx: f64, ty: f64) -> bool {
    let (dx, dy) = (tx - vx, ty - vy);
    let range = dx.hypot(dy);
    if range == 0.0 || range > cone.max_range + ANGLE_EPS {
        return false;
    }
    let (fwd, right) = heading_vectors(heading);
    let z = dx * fwd.0 + dy * fwd.1;
    let x = dx * right.0 + dy * right.1;
    let bearing = x.atan2(z).to_degrees().abs();
    bearing <= cone.view_half_angle + ANGLE_EPS
}

/// Smallest angle between two headings, in `[0, 180]`.
pub fn heading_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Camera {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub view_half_angle: f64,
    pub max_range: f64,
}

impl Camera {
    pub fn cone(&self) -> ViewCone {
        ViewCone {
            view_half_angle: self.view_half_angle,
            max_range: self.max_range,
        }
    }

    pub fn focal_length(&self) -> f64 {
        (FRAME_WIDTH / 2.0) / self.view_half_angle.to_radians().tan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CarInstance {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
    pub model: Arc<str>,
    pub color_rgb: [f64; 3],
}

impl CarInstance {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (fwd, right) = heading_vectors(self.heading);
        let mut out = [(0.0, 0.0); 4];
        let mut k = 0;
        for a in [-self.length / 2.0, self.length / 2.0] {
            for b in [-self.width / 2.0, self.width / 2.0] {
                out[k] = (self.x + a * fwd.0 + b * right.0, self.y + a * fwd.1 + b * right.1);
                k += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub camera: Camera,
    pub cars: Vec<CarInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub object_name: String,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
            object_name: String::new(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn clipped(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.clamp(0.0, FRAME_WIDTH),
            y_min: self.y_min.clamp(0.0, FRAME_HEIGHT),
            x_max: self.x_max.clamp(0.0, FRAME_WIDTH),
            y_max: self.y_max.clamp(0.0, FRAME_HEIGHT),
            object_name: self.object_name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorldError {
    #[error("unknown object `{0}`")]
    UnknownObject(String),
}

fn num(v: &Value) -> f64 {
    match v {
        Value::Num(x) => *x,
        Value::Cat(_) => f64::NAN,
    }
}

/// Builds the scene for a sampled feature vector: the camera sits at the ego
/// pose and every other object becomes a car.
pub fn realize(schema: &Schema, f: &FeatureVector, cone: &ViewCone) -> Scene {
    let mut objects: Vec<(String, [Option<&Value>; 7])> = Vec::new();
    for (desc, value) in schema.features.iter().zip(&f.values) {
        if let FeatureSource::Object { index, field } = desc.source {
            if objects.len() <= index {
                let name = desc.name[..desc.name.len() - field.as_str().len() - 1].to_string();
                objects.push((name, [None; 7]));
            }
            objects[index].1[field as usize] = Some(value);
        }
    }
    fn get<'a>(fields: &[Option<&'a Value>; 7], field: Field) -> Option<&'a Value> {
        fields[field as usize]
    }
    let pose = |fields: &[Option<&Value>; 7]| {
        (
            get(fields, Field::X).map_or(0.0, num),
            get(fields, Field::Y).map_or(0.0, num),
            get(fields, Field::Heading).map_or(0.0, num),
        )
    };
    let (cx, cy, ch) = objects.first().map_or((0.0, 0.0, 0.0), |o| pose(&o.1));
    let camera = Camera {
        x: cx,
        y: cy,
        heading: ch,
        view_half_angle: cone.view_half_angle,
        max_range: cone.max_range,
    };
    let cars = objects
        .iter()
        .skip(1)
        .map(|(name, fields)| {
            let (x, y, heading) = pose(fields);
            let model = match get(fields, Field::Model) {
                Some(Value::Cat(s)) => s.clone(),
                _ => Arc::from(""),
            };
            let color_rgb =
                [Field::ColorR, Field::ColorG, Field::ColorB].map(|c| get(fields, c).map_or(0.0, num));
            CarInstance {
                name: name.clone(),
                x,
                y,
                heading,
                length: CAR_LENGTH,
                width: CAR_WIDTH,
                model,
                color_rgb,
            }
        })
        .collect();
    Scene { camera, cars }
}

impl Scene {
    pub fn car(&self, name: &str) -> Result<&CarInstance, WorldError> {
        self.cars
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| WorldError::UnknownObject(name.to_string()))
    }

    pub fn visible_from(&self, car_name: &str) -> Result<bool, WorldError> {
        let car = self.car(car_name)?;
        Ok(self.is_visible(car))
    }

    fn is_visible(&self, car: &CarInstance) -> bool {
        let c = &self.camera;
        in_view_cone(c.x, c.y, c.heading, &c.cone(), car.x, car.y)
    }

    fn distance(&self, car: &CarInstance) -> f64 {
        (car.x - self.camera.x).hypot(car.y - self.camera.y)
    }

    /// Projects the footprint of a car through the pinhole camera.
    pub fn project(&self, car: &CarInstance) -> Option<BoundingBox> {
        let c = &self.camera;
        let f = c.focal_length();
        let (fwd, right) = heading_vectors(c.heading);
        let mut u_min = f64::INFINITY;
        let mut u_max = f64::NEG_INFINITY;
        let mut z_min = f64::INFINITY;
        for (wx, wy) in car.corners() {
            let (dx, dy) = (wx - c.x, wy - c.y);
            let z = (dx * fwd.0 + dy * fwd.1).max(NEAR_PLANE);
            let xc = dx * right.0 + dy * right.1;
            let u = FRAME_WIDTH / 2.0 + f * xc / z;
            u_min = u_min.min(u);
            u_max = u_max.max(u);
            z_min = z_min.min(z);
        }
        let y_max = FRAME_HEIGHT / 2.0 + f * CAMERA_HEIGHT / z_min;
        let y_min = y_max - BOX_ASPECT * (u_max - u_min);
        let bb = BoundingBox {
            x_min: u_min,
            y_min,
            x_max: u_max,
            y_max,
            object_name: car.name.clone(),
        }
        .clipped();
        bb.is_valid().then_some(bb)
    }

    /// Boxes of the visible cars, nearest first.
    pub fn ground_truth_boxes(&self) -> Vec<BoundingBox> {
        let mut visible: Vec<(&CarInstance, f64)> = self
            .cars
            .iter()
            .filter(|c| self.is_visible(c))
            .map(|c| (c, self.distance(c)))
            .collect();
        visible.sort_by(|a, b| a.1.total_cmp(&b.1));
        visible.into_iter().filter_map(|(c, _)| self.project(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scene_with(cars: &[(f64, f64, f64)]) -> Scene {
        Scene {
            camera: Camera {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                view_half_angle: 30.0,
                max_range: 60.0,
            },
            cars: cars
                .iter()
                .enumerate()
                .map(|(i, &(x, y, heading))| CarInstance {
                    name: format!("c{i}"),
                    x,
                    y,
                    heading,
                    length: CAR_LENGTH,
                    width: CAR_WIDTH,
                    model: Arc::from("BUS"),
                    color_rgb: [0.0; 3],
                })
                .collect(),
        }
    }

    #[test]
    fn box_matches_projection_oracle() {
        let s = scene_with(&[(0.0, 10.0, 0.0)]);
        let b = &s.ground_truth_boxes()[0];
        assert_relative_eq!(b.x_min, 766.904271259418, epsilon = 1e-9);
        assert_relative_eq!(b.y_min, 612.8730485827052, epsilon = 1e-9);
        assert_relative_eq!(b.x_max, 1153.095728740582, epsilon = 1e-9);
        assert_relative_eq!(b.y_max, 921.8262145676365, epsilon = 1e-9);
    }

    #[test]
    fn visibility_cases() {
        let s = scene_with(&[(0.0, 10.0, 0.0), (0.0, -10.0, 0.0)]);
        assert!(s.visible_from("c0").unwrap());
        assert!(!s.visible_from("c1").unwrap());
        assert_eq!(
            s.visible_from("nope"),
            Err(WorldError::UnknownObject("nope".into()))
        );
        let edge = 30f64.to_radians();
        let s = scene_with(&[(10.0 * edge.sin(), 10.0 * edge.cos(), 0.0)]);
        assert!(s.visible_from("c0").unwrap());
        assert!(!in_view_cone(0.0, 0.0, 0.0, &ViewCone::default(), 0.0, 60.5));
    }

    #[test]
    fn nearer_car_has_wider_box() {
        let near = scene_with(&[(0.0, 10.0, 0.0)]).ground_truth_boxes()[0].width();
        let far = scene_with(&[(0.0, 20.0, 0.0)]).ground_truth_boxes()[0].width();
        assert!(near > far);
    }

    #[test]
    fn boxes_sorted_by_distance_and_clipped() {
        let s = scene_with(&[(0.0, 30.0, 0.0), (1.0, 5.0, 90.0), (0.0, -3.0, 0.0)]);
        let boxes = s.ground_truth_boxes();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].object_name, "c1");
        for b in &boxes {
            assert!(b.x_min >= 0.0 && b.x_max <= FRAME_WIDTH);
            assert!(b.y_min >= 0.0 && b.y_max <= FRAME_HEIGHT);
        }
        assert!(scene_with(&[]).ground_truth_boxes().is_empty());
    }

    #[test]
    fn heading_diff_wraps() {
        assert_relative_eq!(heading_diff(10.0, 350.0), 20.0);
        assert_relative_eq!(heading_diff(0.0, 180.0), 180.0);
    }
}
