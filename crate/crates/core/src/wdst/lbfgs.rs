//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective returns `(value, gradient, aux)`; `aux` rides along with
//! each accepted iterate so callers can record per-term losses without
//! re-evaluating.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the gradient infinity norm drops below this.
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 1000,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// The line search could not satisfy the Wolfe conditions; the best
    /// iterate seen so far is returned.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct Iterate<A> {
    pub iteration: usize,
    pub value: f64,
    pub grad_inf: f64,
    /// Accepted step length (0 for the starting point).
    pub step: f64,
    pub line_evals: usize,
    pub aux: A,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult<A> {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub aux: A,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Accepted steps that raised the objective. Always 0 for a correct
    /// line search; tracked so callers can assert it.
    pub uphill_steps: usize,
    pub history: Vec<Iterate<A>>,
}

struct Point<A> {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
    aux: A,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizer of the cubic through two points with known slopes, or `None`
/// when the interpolant is degenerate.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

enum Search<A> {
    Accepted(Point<A>),
    /// No Wolfe point; carries the lowest sufficient-decrease point if any.
    Failed(Option<Point<A>>),
}

struct LineSearch<'f, F> {
    f: &'f mut F,
    x: &'f [f64],
    d: &'f [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    evals: usize,
    max_evals: usize,
}

impl<F, A> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, A),
{
    fn eval(&mut self, alpha: f64) -> Point<A> {
        self.evals += 1;
        let x: Vec<f64> = self
            .x
            .iter()
            .zip(self.d)
            .map(|(xi, di)| xi + alpha * di)
            .collect();
        let (value, grad, aux) = (self.f)(&x);
        let slope = dot(&grad, self.d);
        Point {
            alpha,
            value,
            slope,
            x,
            grad,
            aux,
        }
    }

    fn armijo(&self, p: &Point<A>) -> bool {
        p.value.is_finite() && p.value <= self.f0 + self.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Point<A>) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    fn run(&mut self, first: f64) -> Search<A> {
        let mut prev: Option<Point<A>> = None;
        let mut alpha = first;
        loop {
            if self.evals >= self.max_evals {
                return Search::Failed(prev);
            }
            let p = self.eval(alpha);
            let worse_than_prev = prev.as_ref().is_some_and(|q| p.value >= q.value);
            if !self.armijo(&p) || worse_than_prev {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Search::Accepted(p);
            }
            if p.slope >= 0.0 {
                // Bracketed from the other side: p becomes the low end.
                return self.zoom(Some(p), prev);
            }
            alpha = p.alpha * 2.0;
            prev = Some(p);
        }
    }

    fn ends(&self, p: &Option<Point<A>>) -> (f64, f64, f64) {
        match p {
            Some(p) => (p.alpha, p.value, p.slope),
            None => (0.0, self.f0, self.slope0),
        }
    }

    /// Shrinks the bracket between `lo` (lowest sufficient-decrease point) and
    /// `hi` until a strong-Wolfe point is found. `None` stands for the start.
    fn zoom(&mut self, mut lo: Option<Point<A>>, hi: impl Into<Option<Point<A>>>) -> Search<A> {
        let mut hi = hi.into();
        loop {
            if self.evals >= self.max_evals {
                return Search::Failed(lo);
            }
            let (a_lo, f_lo, d_lo) = self.ends(&lo);
            let (a_hi, f_hi, d_hi) = self.ends(&hi);
            let width = (a_hi - a_lo).abs();
            if width <= 1e-16 * a_lo.abs().max(a_hi.abs()).max(1e-300) {
                return Search::Failed(lo);
            }
            let (left, right) = (a_lo.min(a_hi), a_lo.max(a_hi));
            let margin = 0.1 * width;
            let alpha = match (f_hi.is_finite() && d_hi.is_finite())
                .then(|| cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi))
                .flatten()
            {
                Some(t) if t > left + margin && t < right - margin => t,
                _ => 0.5 * (a_lo + a_hi),
            };
            let p = self.eval(alpha);
            if !self.armijo(&p) || p.value >= f_lo {
                hi = Some(p);
            } else {
                if self.curvature(&p) {
                    return Search::Accepted(p);
                }
                if p.slope * (a_hi - a_lo) >= 0.0 {
                    hi = lo.take();
                }
                lo = Some(p);
            }
        }
    }
}

/// Minimizes `f` from `x0`. `on_iter` sees every accepted iterate (and the
/// starting point) as it happens.
pub fn minimize<F, A>(
    mut f: F,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
    mut on_iter: impl FnMut(&Iterate<A>),
) -> LbfgsResult<A>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, A),
    A: Clone,
{
    let (mut value, mut grad, mut aux) = f(&x0);
    let mut x = x0;
    let mut evaluations = 1;
    let mut uphill_steps = 0;
    let mut history = Vec::new();
    let start = Iterate {
        iteration: 0,
        value,
        grad_inf: inf_norm(&grad),
        step: 0.0,
        line_evals: 1,
        aux: aux.clone(),
    };
    on_iter(&start);
    history.push(start);

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let termination = loop {
        if inf_norm(&grad) < opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        let mut d = two_loop(&grad, &pairs);
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &d);
        }
        let first = if pairs.is_empty() {
            (1.0 / inf_norm(&grad)).min(1.0)
        } else {
            1.0
        };
        let mut search = LineSearch {
            f: &mut f,
            x: &x,
            d: &d,
            f0: value,
            slope0: slope,
            c1: opts.c1,
            c2: opts.c2,
            evals: 0,
            max_evals: opts.max_line_evals.max(1),
        };
        let outcome = search.run(first);
        let line_evals = search.evals;
        evaluations += line_evals;
        let (p, failed) = match outcome {
            Search::Accepted(p) => (p, false),
            Search::Failed(Some(p)) if p.value < value => (p, true),
            Search::Failed(_) => break Termination::LineSearchFailed,
        };
        if p.value > value {
            uphill_steps += 1;
        }
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == opts.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        iterations += 1;
        x = p.x;
        value = p.value;
        grad = p.grad;
        aux = p.aux;
        let rec = Iterate {
            iteration: iterations,
            value,
            grad_inf: inf_norm(&grad),
            step: p.alpha,
            line_evals,
            aux: aux.clone(),
        };
        on_iter(&rec);
        history.push(rec);
        if failed {
            break Termination::LineSearchFailed;
        }
    };
    LbfgsResult {
        x,
        value,
        gradient: grad,
        aux,
        iterations,
        evaluations,
        termination,
        uphill_steps,
        history,
    }
}

/// `-H g` from the stored curvature pairs, with `H0 = (s'y / y'y) I`.
fn two_loop(grad: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for qi in &mut q {
        *qi = -*qi;
    }
    q
}
