//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the gradient infinity norm falls to this value.
    pub grad_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            grad_tolerance: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], a: f64, p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect()
}

struct Point {
    a: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimizes `fg`, which returns the value and gradient at a point.
pub fn minimize<F>(mut fg: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    loop {
        let gi = inf_norm(&g);
        if gi <= opts.grad_tolerance {
            return LbfgsResult {
                x,
                f,
                grad_inf: gi,
                iterations,
                converged: true,
            };
        }
        if iterations >= opts.max_iterations {
            return LbfgsResult {
                x,
                f,
                grad_inf: gi,
                iterations,
                converged: false,
            };
        }
        let mut p = direction(&g, &history);
        let mut dphi0 = dot(&g, &p);
        if dphi0 >= 0.0 || !dphi0.is_finite() {
            history.clear();
            p = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &p);
        }
        let a0 = if history.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };
        let step = line_search(&mut fg, &x, f, dphi0, &p, a0, opts).or_else(|| {
            if history.is_empty() {
                return None;
            }
            history.clear();
            let sd: Vec<f64> = g.iter().map(|v| -v).collect();
            let d0 = dot(&g, &sd);
            let a = (1.0 / d0.abs().sqrt()).min(1.0);
            line_search(&mut fg, &x, f, d0, &sd, a, opts)
        });
        iterations += 1;
        let Some(pt) = step else {
            return LbfgsResult {
                x,
                f,
                grad_inf: gi,
                iterations,
                converged: false,
            };
        };
        let s: Vec<f64> = pt.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = pt.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let stalled = pt.f >= f && pt.a < 1e-18;
        x = pt.x;
        f = pt.f;
        g = pt.g;
        if stalled {
            let gi = inf_norm(&g);
            return LbfgsResult {
                x,
                f,
                grad_inf: gi,
                iterations,
                converged: gi <= opts.grad_tolerance,
            };
        }
    }
}

/// Two-loop recursion: returns `-H g`.
fn direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

fn line_search<F>(fg: &mut F, x: &[f64], f0: f64, d0: f64, p: &[f64], a0: f64, opts: &LbfgsOptions) -> Option<Point>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut eval = |a: f64| {
        let xa = axpy(x, a, p);
        let (fa, ga) = fg(&xa);
        let da = dot(&ga, p);
        Point {
            a,
            f: fa,
            d: da,
            x: xa,
            g: ga,
        }
    };
    let mut prev = Point {
        a: 0.0,
        f: f0,
        d: d0,
        x: x.to_vec(),
        g: vec![],
    };
    let mut a = a0;
    for i in 0..opts.max_line_search {
        let cur = eval(a);
        if !cur.f.is_finite() {
            a *= 0.5;
            continue;
        }
        if cur.f > f0 + opts.c1 * a * d0 || (i > 0 && cur.f >= prev.f) {
            return zoom(&mut eval, prev, cur, f0, d0, opts);
        }
        if cur.d.abs() <= -opts.c2 * d0 {
            return Some(cur);
        }
        if cur.d >= 0.0 {
            return zoom(&mut eval, cur, prev, f0, d0, opts);
        }
        a *= 2.0;
        prev = cur;
    }
    (prev.a > 0.0).then_some(prev)
}

fn zoom<E>(eval: &mut E, mut lo: Point, mut hi: Point, f0: f64, d0: f64, opts: &LbfgsOptions) -> Option<Point>
where
    E: FnMut(f64) -> Point,
{
    for _ in 0..opts.max_line_search {
        let a = interpolate(&lo, &hi);
        let cur = eval(a);
        if cur.f > f0 + opts.c1 * a * d0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.d.abs() <= -opts.c2 * d0 {
                return Some(cur);
            }
            if cur.d * (hi.a - lo.a) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
        if (hi.a - lo.a).abs() <= 1e-16 * lo.a.abs().max(1.0) {
            break;
        }
    }
    // lo always satisfies sufficient decrease
    (lo.a > 0.0 && !lo.g.is_empty()).then_some(lo)
}

/// Safeguarded cubic minimizer between the two bracket ends.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.a, hi.a);
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    let (left, right) = (a.min(b), a.max(b));
    let w = right - left;
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
    if t.is_finite() && t > left + 0.1 * w && t < right - 0.1 * w {
        t
    } else {
        mid
    }
}
