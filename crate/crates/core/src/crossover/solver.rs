//! Local solver for `min D(Q || P)` subject to `I(Q_e') = I(Q_e)` over the
//! probability simplex.
//!
//! `Q` is parameterized as `softmax(z, 0)` with `z` free, which keeps iterates
//! strictly inside the simplex. The equality constraint goes through an
//! augmented-Lagrangian continuation (the penalty grows tenfold per stage and
//! the multiplier is updated between stages), each stage minimized by BFGS.
//! A final Newton iteration on the KKT system polishes the result.

use nalgebra::{DMatrix, DVector};

use crate::dist::{info_density_of, side_marginal_of};

use super::SolverConfig;

/// Smallest probability used inside logarithms of solver iterates.
const Q_FLOOR: f64 = 1e-300;

pub(crate) struct Objective<'a> {
    pub p: &'a [f64],
    pub k: usize,
    pub nv: usize,
    pub edge_pos: [usize; 2],
    pub nonedge_pos: [usize; 2],
}

/// Objective value, constraint value and their gradients with respect to `q`.
pub(crate) struct Eval {
    pub f: f64,
    pub c: f64,
    pub grad_f: Vec<f64>,
    pub grad_c: Vec<f64>,
}

impl Objective<'_> {
    /// `I(Q_e') - I(Q_e)`.
    pub fn constraint(&self, q: &[f64]) -> f64 {
        let te = side_marginal_of(q, self.k, self.nv, self.edge_pos);
        let tf = side_marginal_of(q, self.k, self.nv, self.nonedge_pos);
        crate::dist::pair_mi(self.k, &tf) - crate::dist::pair_mi(self.k, &te)
    }

    pub fn divergence(&self, q: &[f64]) -> f64 {
        q.iter()
            .zip(self.p)
            .map(|(&qi, &pi)| if qi > 0.0 { qi * (qi / pi).ln() } else { 0.0 })
            .sum::<f64>()
    }

    fn eval(&self, q: &[f64]) -> Eval {
        let qc: Vec<f64> = q.iter().map(|&x| x.max(Q_FLOOR)).collect();
        let grad_f = qc.iter().zip(self.p).map(|(&qi, &pi)| (qi / pi).ln() + 1.0).collect();
        let se = info_density_of(&qc, self.k, self.nv, self.edge_pos).expect("positive iterate");
        let sf = info_density_of(&qc, self.k, self.nv, self.nonedge_pos).expect("positive iterate");
        let grad_c = sf.iter().zip(&se).map(|(a, b)| a - b).collect();
        Eval {
            f: self.divergence(q),
            c: self.constraint(q),
            grad_f,
            grad_c,
        }
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(0.0f64, f64::max);
    let mut q: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    q.push((-max).exp());
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    q
}

/// Inverse of [`softmax`] for a strictly positive `q`.
pub(crate) fn logits(q: &[f64]) -> Vec<f64> {
    let last = q[q.len() - 1].max(Q_FLOOR).ln();
    q[..q.len() - 1].iter().map(|&v| v.max(Q_FLOOR).ln() - last).collect()
}

/// Pulls a gradient with respect to `q` back to the free coordinates.
fn pull_back(q: &[f64], g: &[f64]) -> Vec<f64> {
    let mean: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
    q[..q.len() - 1]
        .iter()
        .zip(g)
        .map(|(qi, gi)| qi * (gi - mean))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Value and gradient at a point.
type ValueGrad<'a> = &'a dyn Fn(&[f64]) -> (f64, Vec<f64>);

/// Dense BFGS with Armijo backtracking. Returns the final point.
fn bfgs(fun: ValueGrad<'_>, x0: Vec<f64>, max_iter: usize, gtol: f64) -> Vec<f64> {
    const MAX_STEP: f64 = 4.0;
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = fun(&x);
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut Vec<f64>, scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        (0..n).for_each(|i| h[i * n + i] = scale);
    };
    reset(&mut h, 1.0);
    let mut fresh = true;
    let mut stalls = 0;
    for _ in 0..max_iter {
        if inf_norm(&g) <= gtol {
            break;
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &p);
        if slope >= 0.0 {
            reset(&mut h, 1.0);
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let pn = inf_norm(&p);
        if pn > MAX_STEP {
            p.iter_mut().for_each(|v| *v *= MAX_STEP / pn);
            slope *= MAX_STEP / pn;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let (fnew, gnew) = fun(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                break;
            }
            reset(&mut h, 1.0);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if fresh {
                reset(&mut h, sy / dot(&y, &y));
            }
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if improvement <= 1e-17 * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 4 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    x
}

/// Gradient of the Lagrangian `f - lambda c` in free coordinates, and `c`.
fn kkt_residual(obj: &Objective, z: &[f64], lambda: f64) -> (Vec<f64>, f64, Vec<f64>) {
    let q = softmax(z);
    let ev = obj.eval(&q);
    let gl: Vec<f64> = ev.grad_f.iter().zip(&ev.grad_c).map(|(f, c)| f - lambda * c).collect();
    (pull_back(&q, &gl), ev.c, pull_back(&q, &ev.grad_c))
}

fn kkt_norm(r: &[f64], c: f64) -> f64 {
    inf_norm(r).max(c.abs())
}

/// Newton's method on the KKT system with a finite-difference Hessian of the
/// Lagrangian. Returns the polished point and multiplier.
fn newton_polish(obj: &Objective, mut z: Vec<f64>, mut lambda: f64, iters: usize) -> (Vec<f64>, f64) {
    let n = z.len();
    let (mut r, mut c, mut gc) = kkt_residual(obj, &z, lambda);
    let mut norm = kkt_norm(&r, c);
    for _ in 0..iters {
        if norm < 1e-15 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(n + 1, n + 1);
        for j in 0..n {
            let h = 1e-5 * (1.0 + z[j].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let (rp, _, _) = kkt_residual(obj, &zp, lambda);
            let (rm, _, _) = kkt_residual(obj, &zm, lambda);
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        for i in 0..n {
            // symmetrize the Hessian block and fill the constraint border
            for j in 0..i {
                let avg = 0.5 * (jac[(i, j)] + jac[(j, i)]);
                jac[(i, j)] = avg;
                jac[(j, i)] = avg;
            }
            jac[(i, n)] = -gc[i];
            jac[(n, i)] = gc[i];
        }
        let mut rhs = DVector::from_iterator(n + 1, r.iter().copied().chain([c]));
        rhs.neg_mut();
        let Some(step) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let zn: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let ln = lambda + t * step[n];
            let (rn, cn, gcn) = kkt_residual(obj, &zn, ln);
            let nn = kkt_norm(&rn, cn);
            if nn.is_finite() && nn < norm {
                z = zn;
                lambda = ln;
                r = rn;
                c = cn;
                gc = gcn;
                norm = nn;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (z, lambda)
}

/// Result of one local solve.
#[derive(Debug, Clone)]
pub(crate) struct LocalSolution {
    pub q: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub stationarity: f64,
}

impl LocalSolution {
    pub fn converged(&self, cfg: &SolverConfig) -> bool {
        self.objective.is_finite() && self.residual <= cfg.constraint_tol && self.stationarity <= cfg.stationarity_tol
    }
}

/// One penalty-continuation run from `q0`, followed by the Newton polish.
pub(crate) fn solve_from(obj: &Objective, q0: &[f64], initial_penalty: f64, cfg: &SolverConfig) -> LocalSolution {
    let mut z = logits(q0);
    let mut lambda = 0.0;
    let mut mu = initial_penalty;
    for _ in 0..cfg.penalty_stages {
        let fun = |z: &[f64]| {
            let q = softmax(z);
            let ev = obj.eval(&q);
            let w = mu * ev.c - lambda;
            let g: Vec<f64> = ev.grad_f.iter().zip(&ev.grad_c).map(|(f, c)| f + w * c).collect();
            (ev.f - lambda * ev.c + 0.5 * mu * ev.c * ev.c, pull_back(&q, &g))
        };
        z = bfgs(&fun, z, cfg.max_inner_iters, 1e-14);
        let c = obj.constraint(&softmax(&z));
        lambda -= mu * c;
        mu *= cfg.penalty_growth;
    }
    let (z, lambda) = newton_polish(obj, z, lambda, 25);
    let q = softmax(&z);
    let (r, c, _) = kkt_residual(obj, &z, lambda);
    LocalSolution {
        objective: obj.divergence(&q),
        residual: c.abs(),
        stationarity: inf_norm(&r),
        q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_and_logits_are_inverse() {
        let q = vec![0.1, 0.2, 0.3, 0.4];
        let back = softmax(&logits(&q));
        for (a, b) in q.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bfgs_minimizes_a_quadratic() {
        let fun = |x: &[f64]| {
            let f = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2) + x[0] * x[1];
            let g = vec![2.0 * (x[0] - 1.0) + x[1], 20.0 * (x[1] + 2.0) + x[0]];
            (f, g)
        };
        let x = bfgs(&fun, vec![0.0, 0.0], 200, 1e-12);
        // stationary point of the quadratic
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 20.0]);
        let b = DVector::from_row_slice(&[2.0, -40.0]);
        let want = a.lu().solve(&b).unwrap();
        assert!((x[0] - want[0]).abs() < 1e-9 && (x[1] - want[1]).abs() < 1e-9);
    }
}
