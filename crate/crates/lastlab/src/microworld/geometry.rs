//! Planar geometry primitives shared by scene generation, oracles, and metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n < 1e-12 {
            Vec2::ZERO
        } else {
            self.scale(1.0 / n)
        }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn from_angle(a: f64) -> Vec2 {
        Vec2::new(a.cos(), a.sin())
    }

    /// Rotate by +90 degrees.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Distance from `p` to the segment `a`..`b`.
pub fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 < 1e-18 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab.scale(t))
}

/// Projection of `p` onto a polyline.
#[derive(Debug, Clone, Copy)]
pub struct PolylineProjection {
    /// Arc-length coordinate of the closest point.
    pub arc: f64,
    /// Signed lateral offset; positive on the left of the local tangent.
    pub lateral: f64,
    pub distance: f64,
    /// Index of the segment containing the closest point.
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Vec2>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least 2 points");
        Self { points }
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn segment_dirs(&self) -> Vec<Vec2> {
        self.points
            .windows(2)
            .map(|w| (w[1] - w[0]).normalized())
            .collect()
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at_arc(&self, s: f64) -> Vec2 {
        if s <= 0.0 {
            return self.points[0];
        }
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let seg = w[0].dist(w[1]);
            if acc + seg >= s {
                let t = if seg < 1e-12 { 0.0 } else { (s - acc) / seg };
                return w[0] + (w[1] - w[0]).scale(t);
            }
            acc += seg;
        }
        *self.points.last().unwrap()
    }

    /// Unit tangent at arc length `s` (constant per segment).
    pub fn tangent_at_arc(&self, s: f64) -> Vec2 {
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let seg = w[0].dist(w[1]);
            if acc + seg >= s && seg > 1e-12 {
                return (w[1] - w[0]).normalized();
            }
            acc += seg;
        }
        let n = self.points.len();
        (self.points[n - 1] - self.points[n - 2]).normalized()
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        self.points
            .windows(2)
            .map(|w| dist_point_segment(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn project(&self, p: Vec2) -> PolylineProjection {
        let mut best = PolylineProjection {
            arc: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
            segment: 0,
        };
        let mut acc = 0.0;
        for (i, w) in self.points.windows(2).enumerate() {
            let ab = w[1] - w[0];
            let len = ab.norm();
            let t = if len < 1e-12 {
                0.0
            } else {
                ((p - w[0]).dot(ab) / (len * len)).clamp(0.0, 1.0)
            };
            let q = w[0] + ab.scale(t);
            let d = p.dist(q);
            if d < best.distance {
                let tangent = ab.normalized();
                best = PolylineProjection {
                    arc: acc + t * len,
                    lateral: tangent.cross(p - q).signum() * d,
                    distance: d,
                    segment: i,
                };
            }
            acc += len;
        }
        best
    }
}

/// Minimum distance between two points in linear relative motion over
/// `tau` in `[0, horizon]`: `|dp + dv*tau|`.
pub fn min_dist_linear_motion(dp: Vec2, dv: Vec2, horizon: f64) -> f64 {
    let v2 = dv.dot(dv);
    let t_star = if v2 < 1e-18 {
        0.0
    } else {
        (-dp.dot(dv) / v2).clamp(0.0, horizon)
    };
    (dp + dv.scale(t_star)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_sign_and_arc() {
        let line = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)]);
        let p = line.project(Vec2::new(3.0, 2.0));
        assert!((p.arc - 3.0).abs() < 1e-12);
        assert!((p.lateral - 2.0).abs() < 1e-12);
        let q = line.project(Vec2::new(3.0, -2.0));
        assert!((q.lateral + 2.0).abs() < 1e-12);
    }

    #[test]
    fn arc_interpolation_roundtrip() {
        let line = Polyline::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(0.0, 5.0),
            Vec2::new(3.0, 9.0),
        ]);
        assert!((line.length() - 10.0).abs() < 1e-12);
        let p = line.point_at_arc(7.0);
        assert!((line.project(p).arc - 7.0).abs() < 1e-9);
    }

    #[test]
    fn min_dist_zero_relative_velocity_is_current_distance() {
        let d = min_dist_linear_motion(Vec2::new(3.0, 4.0), Vec2::ZERO, 1.0);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn min_dist_head_on() {
        // closing at 2 m/s from 3 m away: minimum within 1 s is 1 m
        let d = min_dist_linear_motion(Vec2::new(3.0, 0.0), Vec2::new(-2.0, 0.0), 1.0);
        assert!((d - 1.0).abs() < 1e-12);
    }
}
