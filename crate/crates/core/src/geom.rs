//! Planar geometry in workspace units (the unit square).

use serde::{Deserialize, Serialize};

/// 2-D point / vector in workspace units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    pub fn normalized_or(self, fallback: Vec2) -> Vec2 {
        let n = self.norm();
        if n > 1e-12 {
            self.scale(1.0 / n)
        } else {
            fallback
        }
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

/// Axis-aligned rectangle, `lo` inclusive-ish corner, `hi` opposite corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    /// Rectangle grown by `m` on every side (disc-vs-rect collision).
    pub fn inflate(&self, m: f64) -> Rect {
        Rect::new(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)
    }

    /// Signed distance: negative inside, positive outside.
    pub fn sdf(&self, p: Vec2) -> f64 {
        let cx = (self.x0 + self.x1) * 0.5;
        let cy = (self.y0 + self.y1) * 0.5;
        let hx = (self.x1 - self.x0) * 0.5;
        let hy = (self.y1 - self.y0) * 0.5;
        let dx = (p.x - cx).abs() - hx;
        let dy = (p.y - cy).abs() - hy;
        let ox = dx.max(0.0);
        let oy = dy.max(0.0);
        let outside = (ox * ox + oy * oy).sqrt();
        let inside = dx.max(dy).min(0.0);
        outside + inside
    }
}

/// Distance from `p` to segment `a`-`b`.
pub fn seg_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let t = if ab.dot(ab) > 1e-18 {
        (p.sub(a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(a.add(ab.scale(t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_sdf_signs() {
        let r = Rect::new(0.2, 0.2, 0.6, 0.4);
        assert!(r.sdf(Vec2::new(0.4, 0.3)) < 0.0);
        assert!(r.sdf(Vec2::new(0.8, 0.3)) > 0.0);
        assert!((r.sdf(Vec2::new(0.7, 0.3)) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn segment_distance() {
        let a = Vec2::new(0.0, 0.0);
        let b = Vec2::new(1.0, 0.0);
        assert!((seg_dist(Vec2::new(0.5, 0.3), a, b) - 0.3).abs() < 1e-12);
        assert!((seg_dist(Vec2::new(-0.4, 0.0), a, b) - 0.4).abs() < 1e-12);
    }
}
