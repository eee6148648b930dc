//! 2D geometry primitives for the driving world: polylines with station
//! (arc-length) parametrization, point-in-polygon tests, and the overlap
//! tests used by rasterization and collision detection.

pub type Point = [f64; 2];

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Point, k: f64) -> Point {
    [a[0] * k, a[1] * k]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Rotate by angle (counterclockwise).
pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// World point into the frame anchored at `origin` with heading `yaw`
/// (+x forward, +y left).
pub fn world_to_frame(p: Point, origin: Point, yaw: f64) -> Point {
    rotate(sub(p, origin), -yaw)
}

/// Frame point back to world coordinates.
pub fn frame_to_world(p: Point, origin: Point, yaw: f64) -> Point {
    add(rotate(p, yaw), origin)
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if a <= 0.0 {
        a += two_pi;
    }
    a - std::f64::consts::PI
}

/// Squared distance from `p` to segment `ab`, with the clamped projection
/// parameter in [0, 1].
pub fn point_segment(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 { 0.0 } else { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) };
    let closest = add(a, scale(ab, t));
    let d = sub(p, closest);
    (dot(d, d), t)
}

/// True if segments `a1b1` and `a2b2` intersect (including touching).
pub fn segments_intersect(a1: Point, b1: Point, a2: Point, b2: Point) -> bool {
    let d1 = sub(b1, a1);
    let d2 = sub(b2, a2);
    let denom = cross(d1, d2);
    let delta = sub(a2, a1);
    if denom == 0.0 {
        // parallel: overlap only if collinear and ranges intersect
        if cross(delta, d1) != 0.0 {
            return false;
        }
        let len2 = dot(d1, d1);
        if len2 == 0.0 {
            return point_segment(a1, a2, b2).0 == 0.0;
        }
        let t0 = dot(delta, d1) / len2;
        let t1 = t0 + dot(d2, d1) / len2;
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        return hi >= 0.0 && lo <= 1.0;
    }
    let t = cross(delta, d2) / denom;
    let u = cross(delta, d1) / denom;
    (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
}

/// Even-odd ray casting point-in-polygon test. Points exactly on an edge
/// count as inside for our rasterization purposes.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    if poly.len() < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (pi, pj) = (poly[i], poly[j]);
        if point_segment(p, pi, pj).0 < 1e-18 {
            return true;
        }
        if (pi[1] > p[1]) != (pj[1] > p[1]) {
            let x_cross = pi[0] + (p[1] - pi[1]) / (pj[1] - pi[1]) * (pj[0] - pi[0]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Disc (center, radius) vs axis-aligned rectangle (center, half extents).
pub fn disc_overlaps_rect(center: Point, radius: f64, rect_center: Point, half: Point) -> bool {
    let dx = (center[0] - rect_center[0]).abs().max(half[0]) - half[0];
    let dy = (center[1] - rect_center[1]).abs().max(half[1]) - half[1];
    dx * dx + dy * dy <= radius * radius
}

/// Disc vs convex/concave polygon: center inside, or within radius of any
/// edge.
pub fn disc_overlaps_polygon(center: Point, radius: f64, poly: &[Point]) -> bool {
    if point_in_polygon(center, poly) {
        return true;
    }
    let r2 = radius * radius;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        if point_segment(center, poly[j], poly[i]).0 <= r2 {
            return true;
        }
        j = i;
    }
    false
}

/// Polyline with cached cumulative arc length ("station").
#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += dist(points[i - 1], *p);
            }
            cumulative.push(acc);
        }
        Polyline { points, cumulative }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Closest point on the polyline: (station, lateral distance).
    pub fn project(&self, p: Point) -> (f64, f64) {
        if self.points.len() == 1 {
            return (0.0, dist(p, self.points[0]));
        }
        let mut best = (0.0, f64::INFINITY);
        for i in 0..self.points.len() - 1 {
            let (d2, t) = point_segment(p, self.points[i], self.points[i + 1]);
            if d2 < best.1 {
                let seg_len = self.cumulative[i + 1] - self.cumulative[i];
                best = (self.cumulative[i] + t * seg_len, d2);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Point at a clamped station.
    pub fn at_station(&self, s: f64) -> Point {
        let s = s.clamp(0.0, self.length());
        if self.points.len() == 1 {
            return self.points[0];
        }
        for i in 0..self.points.len() - 1 {
            if s <= self.cumulative[i + 1] || i == self.points.len() - 2 {
                let seg_len = self.cumulative[i + 1] - self.cumulative[i];
                let t = if seg_len == 0.0 { 0.0 } else { (s - self.cumulative[i]) / seg_len };
                return add(self.points[i], scale(sub(self.points[i + 1], self.points[i]), t));
            }
        }
        *self.points.last().expect("polyline non-empty")
    }

    /// Tangent heading at a clamped station.
    pub fn heading_at(&self, s: f64) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let s = s.clamp(0.0, self.length());
        for i in 0..self.points.len() - 1 {
            if s <= self.cumulative[i + 1] || i == self.points.len() - 2 {
                let d = sub(self.points[i + 1], self.points[i]);
                if norm(d) > 0.0 {
                    return d[1].atan2(d[0]);
                }
            }
        }
        0.0
    }
}

/// Vertex-average centroid of a polygon.
pub fn polygon_centroid(poly: &[Point]) -> Point {
    let n = poly.len() as f64;
    let mut c = [0.0, 0.0];
    for p in poly {
        c[0] += p[0] / n;
        c[1] += p[1] / n;
    }
    c
}

/// Oriented rectangle footprint (vehicles, cyclists).
#[derive(Debug, Clone, Copy)]
pub struct OrientedBox {
    pub center: Point,
    pub yaw: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [Point; 4] {
        let l = self.half_length;
        let w = self.half_width;
        [
            frame_to_world([l, w], self.center, self.yaw),
            frame_to_world([l, -w], self.center, self.yaw),
            frame_to_world([-l, -w], self.center, self.yaw),
            frame_to_world([-l, w], self.center, self.yaw),
        ]
    }

    pub fn contains(&self, p: Point) -> bool {
        let local = world_to_frame(p, self.center, self.yaw);
        local[0].abs() <= self.half_length && local[1].abs() <= self.half_width
    }
}
