//! Exact barycentric moments and collapsed Gauss rules on simplices.

/// 5-point Gauss–Legendre on [-1, 1].
const GL5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

fn factorial(n: usize) -> f64 {
    (1..=n).product::<usize>() as f64
}

/// ∫_T λ_a λ_b / |T| on a d-simplex.
pub fn pair_moment(d: usize, a: usize, b: usize) -> f64 {
    let m = if a == b { 2.0 } else { 1.0 };
    m * factorial(d) / factorial(d + 2)
}

/// ∫_T λ_a λ_b λ_c / |T| on a d-simplex.
pub fn triple_moment(d: usize, a: usize, b: usize, c: usize) -> f64 {
    let mut idx = [a, b, c];
    idx.sort_unstable();
    let mult = if idx[0] == idx[2] {
        6.0
    } else if idx[0] == idx[1] || idx[1] == idx[2] {
        2.0
    } else {
        1.0
    };
    factorial(d) * mult / factorial(d + 3)
}

/// Local weighted mass: ∫_T w φ_a φ_b with w = Σ_c w_c λ_c.
pub fn weighted_mass(d: usize, measure: f64, w: &[f64], a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for (c, wc) in w.iter().enumerate() {
        s += wc * triple_moment(d, a, b, c);
    }
    measure * s
}

/// Quadrature point in barycentric coordinates with weight relative to |T|.
#[derive(Clone, Copy, Debug)]
pub struct QPoint {
    pub bary: [f64; 4],
    pub weight: f64,
}

/// Collapsed (Duffy) Gauss–Legendre rule with 5 points per direction.
pub fn simplex_rule(d: usize) -> Vec<QPoint> {
    let nodes: Vec<(f64, f64)> = GL5.iter().map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
    let mut pts = Vec::new();
    match d {
        1 => {
            for &(x, w) in &nodes {
                pts.push(QPoint { bary: [1.0 - x, x, 0.0, 0.0], weight: w });
            }
        }
        2 => {
            for &(s, ws) in &nodes {
                for &(t, wt) in &nodes {
                    let x = s;
                    let y = t * (1.0 - s);
                    // reference area 1/2
                    let w = 2.0 * ws * wt * (1.0 - s);
                    pts.push(QPoint { bary: [1.0 - x - y, x, y, 0.0], weight: w });
                }
            }
        }
        3 => {
            for &(s, ws) in &nodes {
                for &(t, wt) in &nodes {
                    for &(r, wr) in &nodes {
                        let x = s;
                        let y = t * (1.0 - s);
                        let z = r * (1.0 - s) * (1.0 - t);
                        // reference volume 1/6
                        let w = 6.0 * ws * wt * wr * (1.0 - s) * (1.0 - s) * (1.0 - t);
                        pts.push(QPoint { bary: [1.0 - x - y - z, x, y, z], weight: w });
                    }
                }
            }
        }
        _ => panic!("simplex_rule: dimension {d} unsupported"),
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for d in 1..=3 {
            let s: f64 = simplex_rule(d).iter().map(|q| q.weight).sum();
            assert!((s - 1.0).abs() < 1e-13, "d={d}");
        }
    }

    #[test]
    fn rule_reproduces_exact_moments() {
        for d in 1..=3 {
            let rule = simplex_rule(d);
            for a in 0..=d {
                for b in 0..=d {
                    let q: f64 = rule.iter().map(|p| p.weight * p.bary[a] * p.bary[b]).sum();
                    assert!((q - pair_moment(d, a, b)).abs() < 1e-13);
                    for c in 0..=d {
                        let q: f64 =
                            rule.iter().map(|p| p.weight * p.bary[a] * p.bary[b] * p.bary[c]).sum();
                        assert!((q - triple_moment(d, a, b, c)).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn interval_mass() {
        assert!((pair_moment(1, 0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pair_moment(1, 0, 1) - 1.0 / 6.0).abs() < 1e-15);
    }
}
