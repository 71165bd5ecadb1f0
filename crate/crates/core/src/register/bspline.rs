use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{signed_distance, BinaryMask, ScalarField};

/// Cubic B-spline free-form displacement over a `width x height` domain.
///
/// Control point `(i, j)` sits at `((i - 1) * spacing, (j - 1) * spacing)`.
/// `displacement(p)` maps a moving point `p` to `p + u(p)` on the fixed side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub grid_w: usize,
    pub grid_h: usize,
    pub spacing: f64,
    pub width: usize,
    pub height: usize,
    pub control: Vec<[f64; 2]>,
}

#[inline]
fn basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Control indices and weights influencing one point.
#[derive(Debug, Clone, Copy)]
struct Support {
    i0: usize,
    j0: usize,
    wx: [f64; 4],
    wy: [f64; 4],
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("field needs a positive spacing and a non-empty domain".into()));
        }
        let grid_w = (width as f64 / spacing).ceil() as usize + 3;
        let grid_h = (height as f64 / spacing).ceil() as usize + 3;
        Ok(Self {
            grid_w,
            grid_h,
            spacing,
            width,
            height,
            control: vec![[0.0, 0.0]; grid_w * grid_h],
        })
    }

    pub fn control_position(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 - 1.0) * self.spacing, (j as f64 - 1.0) * self.spacing]
    }

    fn axis(&self, v: f64, extent: usize, n: usize) -> (usize, [f64; 4]) {
        let u = v.clamp(0.0, extent as f64) / self.spacing + 1.0;
        let i = (u.floor() as usize).clamp(1, n - 3);
        (i - 1, basis((u - i as f64).clamp(0.0, 1.0)))
    }

    fn support(&self, p: [f64; 2]) -> Support {
        let (i0, wx) = self.axis(p[0], self.width, self.grid_w);
        let (j0, wy) = self.axis(p[1], self.height, self.grid_h);
        Support { i0, j0, wx, wy }
    }

    fn eval(&self, s: &Support) -> [f64; 2] {
        let mut u = [0.0, 0.0];
        for b in 0..4 {
            let row = (s.j0 + b) * self.grid_w + s.i0;
            for a in 0..4 {
                let w = s.wx[a] * s.wy[b];
                let c = self.control[row + a];
                u[0] += w * c[0];
                u[1] += w * c[1];
            }
        }
        u
    }

    pub fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        self.eval(&self.support(p))
    }

    /// Solve `y + u(y) = z` by fixed-point iteration.
    pub fn invert_point(&self, z: [f64; 2]) -> [f64; 2] {
        let mut y = z;
        for _ in 0..30 {
            let u = self.displacement(y);
            let next = [z[0] - u[0], z[1] - u[1]];
            let step = (next[0] - y[0]).abs() + (next[1] - y[1]).abs();
            y = next;
            if step < 1e-6 {
                break;
            }
        }
        y
    }

    pub fn max_control_displacement(&self) -> f64 {
        self.control.iter().map(|c| c[0].hypot(c[1])).fold(0.0, f64::max)
    }

    /// Regularised second-difference energy; zero for any affine grid.
    pub fn bending_energy(&self) -> f64 {
        let mut grad = vec![[0.0; 2]; self.control.len()];
        bending(self, &mut grad, 1.0)
    }
}

// Second-difference stencils: xx, yy and the mixed term counted twice.
fn stencils(gw: usize, gh: usize) -> Vec<([usize; 4], [f64; 4], usize, f64)> {
    let idx = |i: usize, j: usize| j * gw + i;
    let mut out = Vec::new();
    for j in 0..gh {
        for i in 1..gw.saturating_sub(1) {
            out.push(([idx(i - 1, j), idx(i, j), idx(i + 1, j), 0], [1.0, -2.0, 1.0, 0.0], 3, 1.0));
        }
    }
    for j in 1..gh.saturating_sub(1) {
        for i in 0..gw {
            out.push(([idx(i, j - 1), idx(i, j), idx(i, j + 1), 0], [1.0, -2.0, 1.0, 0.0], 3, 1.0));
        }
    }
    for j in 0..gh.saturating_sub(1) {
        for i in 0..gw.saturating_sub(1) {
            out.push((
                [idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)],
                [1.0, -1.0, -1.0, 1.0],
                4,
                2.0,
            ));
        }
    }
    out
}

/// Adds `scale * dE/dc` to `grad`, returns `E`.
fn bending(field: &DisplacementField, grad: &mut [[f64; 2]], scale: f64) -> f64 {
    let norm = 1.0 / field.control.len() as f64;
    let mut e = 0.0;
    for (ids, coef, n, w) in stencils(field.grid_w, field.grid_h) {
        for d in 0..2 {
            let v: f64 = (0..n).map(|k| coef[k] * field.control[ids[k]][d]).sum();
            e += w * norm * v * v;
            for k in 0..n {
                grad[ids[k]][d] += scale * 2.0 * w * norm * coef[k] * v;
            }
        }
    }
    e
}

fn bending_diagonal(field: &DisplacementField) -> Vec<f64> {
    let norm = 1.0 / field.control.len() as f64;
    let mut diag = vec![0.0; field.control.len()];
    for (ids, coef, n, w) in stencils(field.grid_w, field.grid_h) {
        for k in 0..n {
            diag[ids[k]] += 2.0 * w * norm * coef[k] * coef[k];
        }
    }
    diag
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonrigidParams {
    pub grid_spacing: f64,
    pub lambda_bend: f64,
    pub max_iters: usize,
    /// Consecutive non-improving iterations tolerated before stopping.
    pub patience: usize,
    /// Control displacement cap as a multiple of the grid spacing.
    pub max_disp_factor: f64,
    /// Relative cost decrease below which an iteration counts as stalled.
    pub tolerance: f64,
    /// Coarse-to-fine stages; stage `k` from the end uses `2^k` times the spacing.
    pub levels: usize,
}

impl Default for NonrigidParams {
    fn default() -> Self {
        Self {
            grid_spacing: 64.0,
            lambda_bend: 0.01,
            max_iters: 300,
            patience: 10,
            max_disp_factor: 2.0,
            tolerance: 1e-7,
            levels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonrigidResult {
    pub field: DisplacementField,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Bilinear sample of `f` at continuous `p` and its gradient.
fn sample_with_gradient(f: &ScalarField, p: [f64; 2]) -> (f64, [f64; 2]) {
    let (w, h) = (f.width, f.height);
    let fx = (p[0] - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (p[1] - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (fx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (fy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let (v00, v10, v01, v11) = (f.get(x0, y0), f.get(x1, y0), f.get(x0, y1), f.get(x1, y1));
    let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11);
    let gx = (1.0 - ty) * (v10 - v00) + ty * (v11 - v01);
    let gy = (1.0 - tx) * (v01 - v00) + tx * (v11 - v10);
    (v, [gx, gy])
}

struct Problem<'a> {
    dist: &'a ScalarField,
    points: Vec<([f64; 2], Support)>,
    lambda: f64,
}

impl Problem<'_> {
    fn cost(&self, field: &DisplacementField, grad: Option<&mut [[f64; 2]]>) -> f64 {
        let n = self.points.len() as f64;
        let mut data = 0.0;
        match grad {
            None => {
                for (p, s) in &self.points {
                    let u = field.eval(s);
                    let (d, _) = sample_with_gradient(self.dist, [p[0] + u[0], p[1] + u[1]]);
                    data += d * d;
                }
                data / n + self.lambda * field.bending_energy()
            }
            Some(g) => {
                g.iter_mut().for_each(|v| *v = [0.0, 0.0]);
                for (p, s) in &self.points {
                    let u = field.eval(s);
                    let (d, dg) = sample_with_gradient(self.dist, [p[0] + u[0], p[1] + u[1]]);
                    data += d * d;
                    let k = 2.0 * d / n;
                    for b in 0..4 {
                        let row = (s.j0 + b) * field.grid_w + s.i0;
                        for a in 0..4 {
                            let w = k * s.wx[a] * s.wy[b];
                            g[row + a][0] += w * dg[0];
                            g[row + a][1] += w * dg[1];
                        }
                    }
                }
                data / n + self.lambda * bending(field, g, self.lambda)
            }
        }
    }
}

impl Problem<'_> {
    fn distance_gradients(&self, field: &DisplacementField) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .map(|(p, s)| {
                let u = field.eval(s);
                sample_with_gradient(self.dist, [p[0] + u[0], p[1] + u[1]]).1
            })
            .collect()
    }

    /// Gauss-Newton Hessian applied to `v`.
    fn hessian_product(&self, field: &DisplacementField, dg: &[[f64; 2]], v: &[[f64; 2]], out: &mut [[f64; 2]]) {
        out.iter_mut().for_each(|o| *o = [0.0, 0.0]);
        let n = self.points.len() as f64;
        for ((_, s), g) in self.points.iter().zip(dg) {
            let mut jv = 0.0;
            for b in 0..4 {
                let row = (s.j0 + b) * field.grid_w + s.i0;
                for a in 0..4 {
                    let c = v[row + a];
                    jv += s.wx[a] * s.wy[b] * (g[0] * c[0] + g[1] * c[1]);
                }
            }
            let k = 2.0 * jv / n;
            for b in 0..4 {
                let row = (s.j0 + b) * field.grid_w + s.i0;
                for a in 0..4 {
                    let w = k * s.wx[a] * s.wy[b];
                    out[row + a][0] += w * g[0];
                    out[row + a][1] += w * g[1];
                }
            }
        }
        let probe = DisplacementField {
            control: v.to_vec(),
            ..field.clone()
        };
        bending(&probe, out, self.lambda);
    }

    fn hessian_diagonal(&self, field: &DisplacementField, dg: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let n = self.points.len() as f64;
        let bend = bending_diagonal(field);
        let mut diag: Vec<[f64; 2]> = bend.iter().map(|b| [self.lambda * b, self.lambda * b]).collect();
        for ((_, s), g) in self.points.iter().zip(dg) {
            for b in 0..4 {
                let row = (s.j0 + b) * field.grid_w + s.i0;
                for a in 0..4 {
                    let w = s.wx[a] * s.wy[b];
                    diag[row + a][0] += 2.0 * w * w * g[0] * g[0] / n;
                    diag[row + a][1] += 2.0 * w * w * g[1] * g[1] / n;
                }
            }
        }
        diag
    }

    /// Preconditioned conjugate gradients for `H d = -grad`.
    fn newton_direction(&self, field: &DisplacementField, grad: &[[f64; 2]], iters: usize) -> Vec<[f64; 2]> {
        let dg = self.distance_gradients(field);
        let diag = self.hessian_diagonal(field, &dg);
        let floor = diag.iter().flat_map(|d| d.iter().copied()).fold(0.0, f64::max) * 1e-6 + 1e-12;
        let minv: Vec<[f64; 2]> = diag.iter().map(|d| [1.0 / (d[0] + floor), 1.0 / (d[1] + floor)]).collect();
        let dot = |a: &[[f64; 2]], b: &[[f64; 2]]| a.iter().zip(b).map(|(x, y)| x[0] * y[0] + x[1] * y[1]).sum::<f64>();
        let len = grad.len();
        let mut x = vec![[0.0; 2]; len];
        let mut r: Vec<[f64; 2]> = grad.iter().map(|g| [-g[0], -g[1]]).collect();
        let mut z: Vec<[f64; 2]> = r.iter().zip(&minv).map(|(r, m)| [r[0] * m[0], r[1] * m[1]]).collect();
        let mut p = z.clone();
        let mut hp = vec![[0.0; 2]; len];
        let mut rz = dot(&r, &z);
        let r0 = dot(&r, &r).sqrt();
        for _ in 0..iters {
            self.hessian_product(field, &dg, &p, &mut hp);
            // Small damping keeps directions unconstrained by data and bending bounded.
            for k in 0..len {
                hp[k][0] += floor * p[k][0];
                hp[k][1] += floor * p[k][1];
            }
            let php = dot(&p, &hp);
            if php <= 0.0 {
                break;
            }
            let alpha = rz / php;
            for k in 0..len {
                for d in 0..2 {
                    x[k][d] += alpha * p[k][d];
                    r[k][d] -= alpha * hp[k][d];
                }
            }
            if dot(&r, &r).sqrt() <= 1e-10 * r0 {
                break;
            }
            for k in 0..len {
                z[k] = [r[k][0] * minv[k][0], r[k][1] * minv[k][1]];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..len {
                p[k] = [z[k][0] + beta * p[k][0], z[k][1] + beta * p[k][1]];
            }
        }
        x
    }
}

const CG_ITERS: usize = 40;

/// Boundary-driven B-spline refinement of `moving` onto `fixed`.
///
/// Minimises the mean squared distance from each displaced moving-boundary
/// pixel to the fixed boundary plus `lambda_bend` times the bending energy.
/// Each iteration takes a Gauss-Newton direction from the analytic gradient,
/// solved by conjugate gradients, with a backtracking line search. Coarser
/// grids run first and seed the finer ones. The best iterate is returned, so
/// the final cost never exceeds the initial one.
pub fn nonrigid_refine(fixed_boundary: &BinaryMask, moving_boundary: &BinaryMask, params: &NonrigidParams) -> Result<NonrigidResult> {
    if !fixed_boundary.same_shape(moving_boundary) {
        return Err(Error::ShapeMismatch("boundaries differ in size".into()));
    }
    if fixed_boundary.is_empty() || moving_boundary.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    let (w, h) = (fixed_boundary.width, fixed_boundary.height);
    let dist = signed_distance(fixed_boundary);
    let pixels: Vec<[f64; 2]> = moving_boundary
        .points()
        .into_iter()
        .map(|(x, y)| [x as f64 + 0.5, y as f64 + 0.5])
        .collect();
    let cap = params.max_disp_factor * params.grid_spacing;
    let mut seed: Option<DisplacementField> = None;
    let mut iterations = 0;
    let mut outcome = None;
    for level in (0..params.levels.max(1)).rev() {
        let spacing = params.grid_spacing * 2f64.powi(level as i32);
        if level > 0 && spacing >= w.max(h) as f64 {
            continue;
        }
        let mut field = DisplacementField::zeros(w, h, spacing)?;
        let problem = Problem {
            dist: &dist,
            points: pixels.iter().map(|&p| (p, field.support(p))).collect(),
            lambda: params.lambda_bend,
        };
        let zero_cost = problem.cost(&field, None);
        if let Some(coarse) = &seed {
            for j in 0..field.grid_h {
                for i in 0..field.grid_w {
                    let c = coarse.displacement(field.control_position(i, j));
                    field.control[j * field.grid_w + i] = c;
                }
            }
            if problem.cost(&field, None) > zero_cost {
                field.control.iter_mut().for_each(|c| *c = [0.0, 0.0]);
            }
        }
        let (cost, iters) = optimise(&problem, &mut field, cap, params);
        iterations += iters;
        outcome = Some((zero_cost, cost));
        seed = Some(field);
    }
    let field = seed.expect("the finest level always runs");
    let (initial_cost, final_cost) = outcome.expect("the finest level always runs");
    Ok(NonrigidResult {
        field,
        initial_cost,
        final_cost,
        iterations,
    })
}

/// Runs the line-searched Gauss-Newton loop in place; returns the best cost
/// and the iteration count.
fn optimise(problem: &Problem, field: &mut DisplacementField, cap: f64, params: &NonrigidParams) -> (f64, usize) {
    let mut grad = vec![[0.0; 2]; field.control.len()];
    let mut current = problem.cost(field, Some(&mut grad));
    let mut best = (current, field.control.clone());
    let mut stalled = 0;
    let mut iters = 0;
    let mut trial = field.clone();
    while iters < params.max_iters {
        iters += 1;
        let dir = problem.newton_direction(field, &grad, CG_ITERS);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            for k in 0..field.control.len() {
                let mut c = [
                    field.control[k][0] + step * dir[k][0],
                    field.control[k][1] + step * dir[k][1],
                ];
                let m = c[0].hypot(c[1]);
                if m > cap {
                    c = [c[0] * cap / m, c[1] * cap / m];
                }
                trial.control[k] = c;
            }
            let c = problem.cost(&trial, None);
            if c < current {
                accepted = Some(c);
                break;
            }
            step *= 0.5;
        }
        let Some(c) = accepted else {
            break;
        };
        std::mem::swap(field, &mut trial);
        let improvement = (current - c) / current.max(1e-300);
        current = problem.cost(field, Some(&mut grad));
        if current < best.0 {
            best = (current, field.control.clone());
        }
        if improvement < params.tolerance {
            stalled += 1;
            if stalled >= params.patience {
                break;
            }
        } else {
            stalled = 0;
        }
    }
    field.control = best.1;
    (best.0, iters)
}
