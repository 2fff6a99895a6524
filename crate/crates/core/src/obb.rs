//! Oriented rectangles and separating-axis intersection tests.
//!
//! Used for agent placement (no-overlap invariant), BEV target
//! rasterization (cell/agent intersection) and closed-loop collision
//! checks.

use crate::math;

/// Oriented rectangle in the ground plane.
///
/// `heading` is radians, counter-clockwise, 0 = +x. `half_len` extends along
/// the heading axis, `half_wid` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub half_len: f64,
    pub half_wid: f64,
    pub heading: f64,
}

impl Obb {
    pub fn axis_aligned(cx: f64, cy: f64, half_x: f64, half_y: f64) -> Self {
        Obb { cx, cy, half_len: half_x, half_wid: half_y, heading: 0.0 }
    }

    /// Unit axes (long axis, wide axis).
    fn axes(&self) -> [(f64, f64); 2] {
        let c = math::cos(self.heading);
        let s = math::sin(self.heading);
        [(c, s), (-s, c)]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [(ax, ay), (bx, by)] = self.axes();
        let (lx, ly) = (ax * self.half_len, ay * self.half_len);
        let (wx, wy) = (bx * self.half_wid, by * self.half_wid);
        [
            (self.cx + lx + wx, self.cy + ly + wy),
            (self.cx + lx - wx, self.cy + ly - wy),
            (self.cx - lx - wx, self.cy - ly - wy),
            (self.cx - lx + wx, self.cy - ly + wy),
        ]
    }

    /// Half-extent of the projection onto a unit axis.
    fn projected_radius(&self, ux: f64, uy: f64) -> f64 {
        let [(ax, ay), (bx, by)] = self.axes();
        math::abs((ax * ux + ay * uy) * self.half_len)
            + math::abs((bx * ux + by * uy) * self.half_wid)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let [(ax, ay), (bx, by)] = self.axes();
        math::abs(dx * ax + dy * ay) <= self.half_len
            && math::abs(dx * bx + dy * by) <= self.half_wid
    }
}

/// Separating-axis overlap test. Touching rectangles count as overlapping.
///
/// Returns the contact normal (unit vector, pointing from `a` toward `b`)
/// of the axis with minimum penetration, or `None` if separated.
pub fn obb_intersect(a: &Obb, b: &Obb) -> Option<(f64, f64)> {
    let (dx, dy) = (b.cx - a.cx, b.cy - a.cy);
    let mut min_pen = f64::INFINITY;
    let mut normal = (1.0, 0.0);
    for &(ux, uy) in a.axes().iter().chain(b.axes().iter()) {
        let dist = math::abs(dx * ux + dy * uy);
        let pen = a.projected_radius(ux, uy) + b.projected_radius(ux, uy) - dist;
        if pen < 0.0 {
            return None;
        }
        if pen < min_pen {
            min_pen = pen;
            // Orient the axis from a toward b.
            if dx * ux + dy * uy >= 0.0 {
                normal = (ux, uy);
            } else {
                normal = (-ux, -uy);
            }
        }
    }
    Some(normal)
}
