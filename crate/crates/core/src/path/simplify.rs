//! Ramer–Douglas–Peucker polyline simplification in 3D.

use crate::geometry::Vec3;

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_squared();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let s = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * s)
}

/// Indices of the vertices kept by RDP at tolerance `epsilon`, in order.
///
/// A vertex survives when its distance to the chord of its enclosing span
/// strictly exceeds `epsilon`. First and last points always survive.
pub fn rdp_indices(points: &[Vec3], epsilon: f64) -> Vec<usize> {
    let n = points.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((first, last)) = stack.pop() {
        if last <= first + 1 {
            continue;
        }
        let (a, b) = (points[first], points[last]);
        let mut worst = (first, -1.0f64);
        for (i, &p) in points.iter().enumerate().take(last).skip(first + 1) {
            let d = point_segment_distance(p, a, b);
            if d > worst.1 {
                worst = (i, d);
            }
        }
        if worst.1 > epsilon {
            keep[worst.0] = true;
            stack.push((worst.0, last));
            stack.push((first, worst.0));
        }
    }
    keep.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect()
}

pub fn rdp(points: &[Vec3], epsilon: f64) -> Vec<Vec3> {
    rdp_indices(points, epsilon).into_iter().map(|i| points[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64, f64)]) -> Vec<Vec3> {
        v.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect()
    }

    #[test]
    fn collinear_collapses() {
        let p = pts(&[(0.0, 0.0, 1.0), (1.0, 0.0, 1.0), (2.0, 0.0, 1.0)]);
        assert_eq!(rdp_indices(&p, 0.05), vec![0, 2]);
    }

    #[test]
    fn bump_depends_on_epsilon() {
        let p = pts(&[(0.0, 0.0, 1.0), (1.0, 0.05, 1.0), (2.0, 0.0, 1.0)]);
        // Deviation of the middle vertex, computed by hand.
        assert!((point_segment_distance(p[1], p[0], p[2]) - 0.05).abs() < 1e-12);
        assert_eq!(rdp_indices(&p, 0.1), vec![0, 2]);
        assert_eq!(rdp_indices(&p, 0.01), vec![0, 1, 2]);
    }

    #[test]
    fn tiny_inputs() {
        assert!(rdp_indices(&[], 0.1).is_empty());
        assert_eq!(rdp_indices(&pts(&[(1.0, 1.0, 1.0)]), 0.1), vec![0]);
    }

    #[test]
    fn long_trace_does_not_recurse() {
        let p: Vec<Vec3> = (0..10_000).map(|i| Vec3::new(i as f64 * 0.01, (i as f64 * 0.37).sin(), 1.0)).collect();
        let kept = rdp_indices(&p, 0.05);
        assert_eq!(kept[0], 0);
        assert_eq!(*kept.last().unwrap(), 9_999);
    }
}
