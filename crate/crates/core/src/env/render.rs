//! Deterministic soft-edge rasterizer for the desk-scale pusher scene.
//! Same state in, bit-identical pixels out.

use crate::geom::{seg_dist, Rect, Vec2};
use ndarray::{Array2, Array3};

pub const PUCK_RADIUS: f64 = 0.05;
pub const EFFECTOR_RADIUS: f64 = 0.035;
const ARM_WIDTH: f64 = 0.030;
const ARM_BASE: Vec2 = Vec2::new(0.5, -0.06);
const ARM_LINK: f64 = 0.62;

const BG_BASE: [f64; 3] = [0.84, 0.81, 0.76];
const WALL_COLOR: [f64; 3] = [0.38, 0.25, 0.16];
const PUCK_COLOR: [f64; 3] = [0.05, 0.78, 0.15];
const ARM_COLOR: [f64; 3] = [0.22, 0.26, 0.48];
const EFFECTOR_COLOR: [f64; 3] = [0.88, 0.13, 0.10];

/// Rendered image plus per-pixel coverage of the robot and the puck
/// (coverage feeds the evaluation-only ground-truth masks).
pub struct RenderOut {
    pub image: Array3<f64>,
    pub robot_cov: Array2<f64>,
    pub puck_cov: Array2<f64>,
}

/// Elbow position of the 2-link arm reaching for `effector`.
pub fn arm_elbow(effector: Vec2) -> Vec2 {
    let to = effector.sub(ARM_BASE);
    let d = to.norm().clamp(1e-3, 2.0 * ARM_LINK - 1e-3);
    let u = to.normalized_or(Vec2::new(0.0, 1.0));
    let a = d * 0.5;
    let h = (ARM_LINK * ARM_LINK - a * a).max(0.0).sqrt();
    ARM_BASE.add(u.scale(a)).add(u.perp().scale(h))
}

fn coverage(sdf: f64, edge: f64) -> f64 {
    (0.5 - sdf / edge).clamp(0.0, 1.0)
}

fn blend(c: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for k in 0..3 {
        c[k] = c[k] * (1.0 - alpha) + color[k] * alpha;
    }
}

/// Rasterize the scene at `res` x `res`.
pub fn render_scene(walls: &[Rect], robot_xy: Vec2, puck_xy: Vec2, res: usize) -> RenderOut {
    let mut image = Array3::<f64>::zeros((3, res, res));
    let mut robot_cov = Array2::<f64>::zeros((res, res));
    let mut puck_cov = Array2::<f64>::zeros((res, res));

    let edge = 0.75 / res as f64;
    let elbow = arm_elbow(robot_xy);

    for i in 0..res {
        let py = (i as f64 + 0.5) / res as f64;
        for j in 0..res {
            let px = (j as f64 + 0.5) / res as f64;
            let p = Vec2::new(px, py);

            let mut c = [
                BG_BASE[0] * (1.0 - 0.12 * py),
                BG_BASE[1] * (1.0 - 0.12 * py),
                BG_BASE[2] * (1.0 - 0.10 * py),
            ];
            for w in walls {
                let a = coverage(w.sdf(p), edge);
                if a > 0.0 {
                    blend(&mut c, WALL_COLOR, a);
                }
            }

            let puck_a = coverage(p.dist(puck_xy) - PUCK_RADIUS, edge);
            if puck_a > 0.0 {
                blend(&mut c, PUCK_COLOR, puck_a);
            }

            let seg1 = coverage(seg_dist(p, ARM_BASE, elbow) - ARM_WIDTH, edge);
            let seg2 = coverage(seg_dist(p, elbow, robot_xy) - ARM_WIDTH, edge);
            let eff = coverage(p.dist(robot_xy) - EFFECTOR_RADIUS, edge);
            let arm_a = seg1.max(seg2);
            if arm_a > 0.0 {
                blend(&mut c, ARM_COLOR, arm_a);
            }
            if eff > 0.0 {
                blend(&mut c, EFFECTOR_COLOR, eff);
            }

            for k in 0..3 {
                image[[k, i, j]] = c[k].clamp(0.0, 1.0);
            }
            robot_cov[[i, j]] = arm_a.max(eff);
            puck_cov[[i, j]] = puck_a;
        }
    }

    RenderOut {
        image,
        robot_cov,
        puck_cov,
    }
}

/// Binary ground-truth masks: robot pixels and the visible (unoccluded)
/// puck pixels.
pub fn truth_masks(out: &RenderOut) -> (Array2<bool>, Array2<bool>) {
    let robot = out.robot_cov.mapv(|v| v > 0.5);
    let puck = ndarray::Zip::from(&out.puck_cov)
        .and(&out.robot_cov)
        .map_collect(|&p, &r| p * (1.0 - r) > 0.5);
    (robot, puck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_renders_identically() {
        let walls = [Rect::new(0.4, 0.2, 0.5, 0.8)];
        let a = render_scene(&walls, Vec2::new(0.3, 0.3), Vec2::new(0.6, 0.6), 32);
        let b = render_scene(&walls, Vec2::new(0.3, 0.3), Vec2::new(0.6, 0.6), 32);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn puck_move_changes_only_its_neighborhood() {
        let walls: [Rect; 0] = [];
        let a = render_scene(&walls, Vec2::new(0.2, 0.2), Vec2::new(0.6, 0.6), 64);
        let b = render_scene(&walls, Vec2::new(0.2, 0.2), Vec2::new(0.65, 0.6), 64);
        let mut diff_pixels = Vec::new();
        for i in 0..64 {
            for j in 0..64 {
                for k in 0..3 {
                    if (a.image[[k, i, j]] - b.image[[k, i, j]]).abs() > 1e-12 {
                        diff_pixels.push((i, j));
                        break;
                    }
                }
            }
        }
        assert!(!diff_pixels.is_empty());
        for (i, j) in diff_pixels {
            let p = Vec2::new((j as f64 + 0.5) / 64.0, (i as f64 + 0.5) / 64.0);
            let near = p.dist(Vec2::new(0.6, 0.6)).min(p.dist(Vec2::new(0.65, 0.6)));
            assert!(near < PUCK_RADIUS + 0.05, "diff far from puck at {p:?}");
        }
    }

    #[test]
    fn masks_cover_shapes() {
        let walls: [Rect; 0] = [];
        let out = render_scene(&walls, Vec2::new(0.3, 0.4), Vec2::new(0.7, 0.6), 64);
        let (robot, puck) = truth_masks(&out);
        assert!(robot.iter().filter(|&&b| b).count() > 20);
        assert!(puck.iter().filter(|&&b| b).count() > 10);
    }
}
