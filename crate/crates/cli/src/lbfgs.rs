//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_evals: usize,
    /// Stop once `‖g‖∞ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop once the loss drops to this value.
    pub loss_tol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_evals: 100,
            grad_tol: 1e-6,
            loss_tol: 0.0,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    LossTolerance,
    MaxEvaluations,
    LineSearchFailed,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Self::GradientTolerance | Self::LossTolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub best_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    /// Best point seen.
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub history: Vec<Evaluation>,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + alpha * d).collect()
}

/// Loss and gradient at a point.
pub type Objective<'f, E> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>), E> + 'f;

struct Tracker<'f, E> {
    f: &'f mut Objective<'f, E>,
    history: Vec<Evaluation>,
    best: Option<(Vec<f64>, f64, Vec<f64>)>,
    max_evals: usize,
}

impl<E> Tracker<'_, E> {
    fn exhausted(&self) -> bool {
        self.history.len() >= self.max_evals
    }

    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>), E> {
        let (f, g) = (self.f)(x)?;
        let improved = self.best.as_ref().is_none_or(|b| f < b.1);
        if improved {
            self.best = Some((x.to_vec(), f, g.clone()));
        }
        let best_loss = self.best.as_ref().map_or(f, |b| b.1);
        self.history.push(Evaluation {
            loss: f,
            best_loss,
            grad_norm: inf_norm(&g),
        });
        Ok((f, g))
    }
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Bracketing phase followed by zoom; returns the accepted trial or the
/// best sufficient-decrease point found before evaluations ran out.
fn line_search<E>(
    t: &mut Tracker<'_, E>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<Trial>, E> {
    let armijo = |a: f64, f: f64| f <= f0 + cfg.c1 * a * slope0;
    let curvature = |s: f64| s.abs() <= -cfg.c2 * slope0;
    let mut prev = Trial {
        alpha: 0.0,
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let mut alpha = alpha0;
    let mut fallback: Option<Trial> = None;
    for i in 0..20 {
        if t.exhausted() {
            return Ok(fallback);
        }
        let (f, g) = t.eval(&axpy(x, alpha, d))?;
        let cur = Trial {
            alpha,
            slope: dot(&g, d),
            f,
            g,
        };
        if !armijo(alpha, cur.f) || (i > 0 && cur.f >= prev.f) {
            return zoom(t, x, f0, slope0, d, prev, cur, cfg, fallback);
        }
        if curvature(cur.slope) {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(t, x, f0, slope0, d, cur, prev, cfg, None);
        }
        alpha *= 2.0;
        prev = cur;
        fallback = Some(Trial {
            alpha: prev.alpha,
            f: prev.f,
            g: prev.g.clone(),
            slope: prev.slope,
        });
    }
    Ok(fallback)
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    t: &mut Tracker<'_, E>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    mut lo: Trial,
    mut hi: Trial,
    cfg: &LbfgsConfig,
    fallback: Option<Trial>,
) -> Result<Option<Trial>, E> {
    let best_lo = |lo: Trial| if lo.alpha > 0.0 { Some(lo) } else { fallback };
    for _ in 0..30 {
        if t.exhausted() {
            return Ok(best_lo(lo));
        }
        // quadratic through φ(lo), φ'(lo), φ(hi), safeguarded into the interior
        let width = hi.alpha - lo.alpha;
        let denom = 2.0 * (hi.f - lo.f - lo.slope * width);
        let mut a = if denom > 0.0 {
            lo.alpha - lo.slope * width * width / denom
        } else {
            lo.alpha + 0.5 * width
        };
        let (left, right) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (right - left);
        if !(a > left + margin && a < right - margin) {
            a = 0.5 * (left + right);
        }
        if margin <= 1e-16 * right.abs().max(1.0) {
            return Ok(best_lo(lo));
        }
        let (f, g) = t.eval(&axpy(x, a, d))?;
        let cur = Trial {
            alpha: a,
            slope: dot(&g, d),
            f,
            g,
        };
        if cur.f > f0 + cfg.c1 * a * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -cfg.c2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    Ok(best_lo(lo))
}

/// Two-loop recursion: `−H g` from the stored curvature pairs.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
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
    q.iter().map(|x| -x).collect()
}

/// Minimizes `f`, which returns the loss and its gradient.
pub fn minimize<'f, E>(f: &'f mut Objective<'f, E>, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult, E> {
    let mut t = Tracker {
        f,
        history: Vec::new(),
        best: None,
        max_evals: cfg.max_evals.max(1),
    };
    let mut x = x0.to_vec();
    let (mut fx, mut g) = t.eval(&x)?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let termination = loop {
        if inf_norm(&g) <= cfg.grad_tol {
            break Termination::GradientTolerance;
        }
        if fx <= cfg.loss_tol {
            break Termination::LossTolerance;
        }
        if t.exhausted() {
            break Termination::MaxEvaluations;
        }
        let mut d = direction(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|x| -x).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = if pairs.is_empty() { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        let Some(trial) = line_search(&mut t, &x, fx, slope, &d, alpha0, cfg)? else {
            break if t.exhausted() {
                Termination::MaxEvaluations
            } else {
                Termination::LineSearchFailed
            };
        };
        iterations += 1;
        let s: Vec<f64> = d.iter().map(|di| trial.alpha * di).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == cfg.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        x = axpy(&x, 1.0, &s);
        fx = trial.f;
        g = trial.g;
    };
    let (x, loss, grad) = t.best.take().expect("at least one evaluation");
    Ok(LbfgsResult {
        x,
        loss,
        grad,
        iterations,
        history: t.history,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>), ()> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let cfg = LbfgsConfig {
            max_evals: 300,
            ..Default::default()
        };
        let r = minimize(&mut rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(r.termination, Termination::GradientTolerance);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn quadratic_converges_in_few_evals() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>), ()> {
            let g: Vec<f64> = x.iter().zip(&diag).map(|(x, d)| d * (x - 1.0)).collect();
            let v = x.iter().zip(&diag).map(|(x, d)| 0.5 * d * (x - 1.0).powi(2)).sum();
            Ok((v, g))
        };
        let r = minimize(&mut f, &[0.0; 4], &LbfgsConfig::default()).unwrap();
        assert!(r.termination.converged());
        assert!(r.history.len() < 40, "{} evals", r.history.len());
    }

    #[test]
    fn best_loss_is_non_increasing_and_capped() {
        let cfg = LbfgsConfig {
            max_evals: 7,
            grad_tol: 0.0,
            ..Default::default()
        };
        let r = minimize(&mut rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(r.history.len(), 7);
        assert_eq!(r.termination, Termination::MaxEvaluations);
        for w in r.history.windows(2) {
            assert!(w[1].best_loss <= w[0].best_loss);
        }
        assert_eq!(r.loss, r.history.last().unwrap().best_loss);
    }
}
