//! Brute-force optimal cost for the benchmark model, written from scratch:
//! plain scalar rollouts, a dense grid over U in [-1, 1]^3 with step 0.02,
//! then zoomed grids around the best well-separated candidates.

#![allow(dead_code)]

const P: [f64; 2] = [4.0, 10.53];
const ALPHA: f64 = 1.1;

/// Cost of `u` from `x0`, or `None` if a constraint is violated.
pub fn rollout(x0: [f64; 2], u: [f64; 3]) -> Option<f64> {
    let [mut x1, mut x2] = x0;
    let mut cost = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        if uk.abs() > 1.0 {
            return None;
        }
        if k > 0 && (x1.abs() > 10.0 || x2.abs() > 10.0) {
            return None;
        }
        cost += x1 * x1 + x2 * x2 + uk * uk;
        x1 += uk;
        x2 = 0.9 * x2 + uk * uk * uk;
    }
    let terminal = P[0] * x1 * x1 + P[1] * x2 * x2;
    (terminal <= ALPHA).then_some(cost + terminal)
}

fn zoom(x0: [f64; 2], mut center: [f64; 3], mut best: f64) -> (f64, [f64; 3]) {
    let mut radius = 0.02;
    for _ in 0..8 {
        let steps = 10;
        let h = radius / steps as f64;
        let c = center;
        for i in -steps..=steps {
            for j in -steps..=steps {
                for k in -steps..=steps {
                    let u = [
                        (c[0] + i as f64 * h).clamp(-1.0, 1.0),
                        (c[1] + j as f64 * h).clamp(-1.0, 1.0),
                        (c[2] + k as f64 * h).clamp(-1.0, 1.0),
                    ];
                    if let Some(v) = rollout(x0, u) {
                        if v < best {
                            best = v;
                            center = u;
                        }
                    }
                }
            }
        }
        radius *= 0.25;
    }
    (best, center)
}

/// Minimal cost, or `None` when no grid point is feasible.
pub fn oracle(x0: [f64; 2]) -> Option<f64> {
    oracle_solution(x0).map(|(v, _)| v)
}

/// Minimal cost and its input sequence.
pub fn oracle_solution(x0: [f64; 2]) -> Option<(f64, [f64; 3])> {
    let mut candidates: Vec<(f64, [f64; 3])> = Vec::new();
    for i in 0..=100 {
        for j in 0..=100 {
            for k in 0..=100 {
                let u = [-1.0 + 0.02 * i as f64, -1.0 + 0.02 * j as f64, -1.0 + 0.02 * k as f64];
                if let Some(v) = rollout(x0, u) {
                    candidates.push((v, u));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Zoom around several well-separated candidates to cover distinct basins.
    let mut seeds: Vec<(f64, [f64; 3])> = Vec::new();
    for &(v, u) in &candidates {
        let far = seeds
            .iter()
            .all(|(_, s)| (0..3).any(|d| (s[d] - u[d]).abs() > 0.1));
        if far {
            seeds.push((v, u));
        }
        if seeds.len() == 6 {
            break;
        }
    }
    seeds
        .into_iter()
        .map(|(v, u)| zoom(x0, u, v))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Plain NMPC driven by the brute-force solution: states `x(0..=steps)`,
/// or `None` if some visited state has no feasible grid point.
pub fn oracle_closed_loop(x0: [f64; 2], steps: usize) -> Option<Vec<[f64; 2]>> {
    let mut xs = vec![x0];
    for _ in 0..steps {
        let [x1, x2] = *xs.last().unwrap();
        let (_, u) = oracle_solution([x1, x2])?;
        xs.push([x1 + u[0], 0.9 * x2 + u[0] * u[0] * u[0]]);
    }
    Some(xs)
}
