//! BFS shortest-path oracle over the discretized free space. Evaluation
//! only; learners never see it.

use crate::error::{ReplanError, Result};
use crate::geom::{Rect, Vec2};
use std::collections::VecDeque;

/// Grid BFS between two puck positions. Returns the path length in cells,
/// or `None` when the cells are disconnected.
///
/// `grid_step` must divide the unit workspace evenly. Cells whose centers
/// fall inside a wall inflated by `clearance` are blocked.
pub fn bfs_distance(
    walls: &[Rect],
    from: Vec2,
    to: Vec2,
    grid_step: f64,
    clearance: f64,
) -> Result<Option<usize>> {
    let n = (1.0 / grid_step).round() as usize;
    if n == 0 || ((n as f64) * grid_step - 1.0).abs() > 1e-9 {
        return Err(ReplanError::Config(format!(
            "grid_step {grid_step} does not divide the workspace evenly"
        )));
    }
    let blocked = |cx: usize, cy: usize| -> bool {
        let p = Vec2::new((cx as f64 + 0.5) * grid_step, (cy as f64 + 0.5) * grid_step);
        walls.iter().any(|w| w.inflate(clearance).contains(p))
    };
    let cell_of = |p: Vec2| -> (usize, usize) {
        let cx = ((p.x / grid_step) as isize).clamp(0, n as isize - 1) as usize;
        let cy = ((p.y / grid_step) as isize).clamp(0, n as isize - 1) as usize;
        (cx, cy)
    };

    let start = cell_of(from);
    let target = cell_of(to);
    if start == target {
        return Ok(Some(0));
    }
    if blocked(start.0, start.1) || blocked(target.0, target.1) {
        return Ok(None);
    }

    let mut dist = vec![usize::MAX; n * n];
    let idx = |c: (usize, usize)| c.1 * n + c.0;
    dist[idx(start)] = 0;
    let mut queue = VecDeque::new();
    queue.push_back(start);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)];
        if c == target {
            return Ok(Some(d));
        }
        let (cx, cy) = (c.0 as isize, c.1 as isize);
        for (nx, ny) in [(cx - 1, cy), (cx + 1, cy), (cx, cy - 1), (cx, cy + 1)] {
            if nx < 0 || ny < 0 || nx >= n as isize || ny >= n as isize {
                continue;
            }
            let nc = (nx as usize, ny as usize);
            if blocked(nc.0, nc.1) || dist[idx(nc)] != usize::MAX {
                continue;
            }
            dist[idx(nc)] = d + 1;
            queue.push_back(nc);
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_corridor_counts_cells() {
        // free space, 5 cells apart horizontally at grid_step 1/16
        let step = 1.0 / 16.0;
        let a = Vec2::new(3.5 * step, 8.5 * step);
        let b = Vec2::new(8.5 * step, 8.5 * step);
        let d = bfs_distance(&[], a, b, step, 0.0).unwrap();
        assert_eq!(d, Some(5));
    }

    #[test]
    fn identical_points_are_zero() {
        let p = Vec2::new(0.4, 0.4);
        assert_eq!(bfs_distance(&[], p, p, 0.125, 0.0).unwrap(), Some(0));
    }

    #[test]
    fn sealed_wall_disconnects() {
        let walls = [Rect::new(0.46, -0.1, 0.54, 1.1)];
        let d = bfs_distance(
            &walls,
            Vec2::new(0.2, 0.5),
            Vec2::new(0.8, 0.5),
            1.0 / 32.0,
            0.05,
        )
        .unwrap();
        assert_eq!(d, None);
    }

    #[test]
    fn symmetric_distances() {
        let walls = [Rect::new(0.3, 0.0, 0.4, 0.7)];
        let a = Vec2::new(0.15, 0.3);
        let b = Vec2::new(0.7, 0.2);
        let ab = bfs_distance(&walls, a, b, 1.0 / 32.0, 0.05).unwrap();
        let ba = bfs_distance(&walls, b, a, 1.0 / 32.0, 0.05).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.is_some());
    }

    #[test]
    fn uneven_grid_step_rejected() {
        let err = bfs_distance(&[], Vec2::new(0.1, 0.1), Vec2::new(0.2, 0.2), 0.3, 0.0);
        assert!(err.is_err());
    }
}
