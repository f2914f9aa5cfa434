//! Small derivative-free search routines used by the hyper-parameter tuners.

/// Outcome of a bounded Nelder–Mead search.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Stop when `f_worst - f_best <= tol * max(1, |f_best|)`.
    pub tol: f64,
    pub max_evals: usize,
    /// Initial edge length of the simplex, per coordinate.
    pub step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            tol: 1e-8,
            max_evals: 500,
            step: 1.0,
        }
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Nelder–Mead on a box; trial points are projected back onto the box.
///
/// Non-finite objective values are treated as `+inf`.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: SimplexOptions,
) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, lower, upper);
    if dim == 0 {
        let fx = eval(&start, &mut evals);
        return SimplexResult {
            x: start,
            f: fx,
            evals,
            converged: true,
        };
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(&start, &mut evals);
    simplex.push((start.clone(), f0));
    for i in 0..dim {
        let mut v = start.clone();
        // step away from the nearer bound so the vertex stays distinct
        let up = upper[i] - v[i];
        let down = v[i] - lower[i];
        v[i] += if up >= down { opts.step.min(up) } else { -opts.step.min(down) };
        let fv = eval(&v, &mut evals);
        simplex.push((v, fv));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if worst.is_finite() && worst - best <= opts.tol * best.abs().max(1.0) {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for (v, _) in &simplex[..dim] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[dim].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut p, lower, upper);
            p
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[dim].1 {
            let xc = along(rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fr.min(simplex[dim].1) {
            simplex[dim] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let mut p: Vec<f64> = x_best
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + sigma * (v - b))
                .collect();
            project(&mut p, lower, upper);
            let fp = eval(&p, &mut evals);
            *vertex = (p, fp);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    SimplexResult {
        x,
        f,
        evals,
        converged,
    }
}

/// Coordinate pattern search polish: tries `±step` on each coordinate and
/// halves the step when nothing improves, down to `min_step`.
pub fn pattern_polish<F>(
    mut f: F,
    x: &mut Vec<f64>,
    fx: &mut f64,
    lower: &[f64],
    upper: &[f64],
    mut step: f64,
    min_step: f64,
    max_evals: usize,
) -> usize
where
    F: FnMut(&[f64]) -> f64,
{
    let mut evals = 0;
    while step >= min_step && evals < max_evals {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[i] = (trial[i] + dir * step).clamp(lower[i], upper[i]);
                if trial[i] == x[i] {
                    continue;
                }
                let ft = f(&trial);
                evals += 1;
                if ft.is_finite() && ft < *fx {
                    *x = trial;
                    *fx = ft;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    evals
}

/// Root of a nonincreasing function `g` of `λ` on `[lo, hi]`, searched in
/// `ln λ` with the Illinois variant of regula falsi.
///
/// Requires `g(lo) > 0`. Returns `hi` when `g(hi) > 0` (the root lies past the
/// bracket).
pub fn decreasing_root_log<G>(mut g: G, lo: f64, hi: f64, rel_tol: f64, max_iter: usize) -> f64
where
    G: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut ga = g(lo);
    let mut gb = g(hi);
    if gb > 0.0 {
        return hi;
    }
    if ga <= 0.0 {
        return lo;
    }
    let mut side = 0i8;
    for _ in 0..max_iter {
        let m = if (ga - gb).abs() > 0.0 {
            (a * gb - b * ga) / (gb - ga)
        } else {
            0.5 * (a + b)
        };
        let m = if m > a && m < b { m } else { 0.5 * (a + b) };
        let gm = g(m.exp());
        if gm == 0.0 {
            return m.exp();
        }
        if gm > 0.0 {
            a = m;
            ga = gm;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = m;
            gb = gm;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
        if (b - a) <= rel_tol {
            break;
        }
    }
    // the upper end is feasible (g <= 0)
    b.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 0.5;
        let r = nelder_mead(
            f,
            &[5.0, 5.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            SimplexOptions {
                tol: 1e-12,
                max_evals: 2000,
                step: 1.0,
            },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] + 2.0).abs() < 1e-4);
        assert!((r.f - 0.5).abs() < 1e-8);
    }

    #[test]
    fn simplex_respects_box() {
        let f = |x: &[f64]| x[0];
        let r = nelder_mead(f, &[0.0], &[-1.0], &[1.0], SimplexOptions::default());
        assert!((r.x[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_tolerates_infinite_regions() {
        let f = |x: &[f64]| if x[0] > 2.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let r = nelder_mead(f, &[1.9], &[-5.0], &[5.0], SimplexOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn log_root_matches_closed_form() {
        let target = 37.5_f64;
        let root = decreasing_root_log(|l| target - l, 1e-8, 1e6, 1e-14, 200);
        assert!((root - target).abs() < 1e-9 * target);
        assert_eq!(decreasing_root_log(|_| 1.0, 1e-8, 1e6, 1e-12, 10), 1e6);
    }

    #[test]
    fn polish_improves_on_coarse_point() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2);
        let mut x = vec![0.0];
        let mut fx = f(&x);
        pattern_polish(f, &mut x, &mut fx, &[-1.0], &[1.0], 0.25, 1e-6, 1000);
        assert!((x[0] - 0.3).abs() < 1e-5);
    }
}
