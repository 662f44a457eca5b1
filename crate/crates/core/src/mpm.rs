//! Differentiable 2D MLS-MPM with APIC transfer.
//!
//! One step: re-center the [`GridWindow`] on the particles, scatter mass and
//! momentum with quadratic B-spline weights (P2G), apply gravity and ground
//! contact on the grid, gather velocities and affine matrices back (G2P), then
//! advect positions and update deformation gradients `F <- (I + dt C) F`.
//!
//! The constitutive model is fixed-corotated elasticity. Actuation adds
//! `a * act_stress_bound` to the material-space vertical-vertical stress,
//! rotated to world space by the polar rotation of `F`.
//!
//! Grid cells are addressed in global integer coordinates; the window only
//! decides which block of them is stored. Re-centering therefore never
//! changes interpolation stencils.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentDesign, DesignKind, Mat2, SimState, Vec2};
use crate::error::{Error, Result};
use crate::sim::{check_actuation, Contact, StateAdjoint};

/// Cells kept free between the particles' stencils and the window border.
pub const WINDOW_MARGIN: i64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpmConfig {
    pub dt: f64,
    pub grid_dx: f64,
    /// Window size in cells per axis.
    pub grid_extent: usize,
    pub gravity: f64,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub particle_mass: f64,
    pub particle_volume: f64,
    /// Stress magnitude (Pa) produced by a unit actuation.
    pub act_stress_bound: f64,
    pub ground_height: f64,
    pub contact: Contact,
}

impl Default for MpmConfig {
    fn default() -> Self {
        let dx = 0.01;
        let volume = (0.5 * dx) * (0.5 * dx);
        Self {
            dt: 5e-4,
            grid_dx: dx,
            grid_extent: 64,
            gravity: -9.8,
            youngs_modulus: 1e4,
            poisson_ratio: 0.3,
            particle_mass: 1000.0 * volume,
            particle_volume: volume,
            act_stress_bound: 4e3,
            ground_height: 0.1,
            contact: Contact::Sticky,
        }
    }
}

impl MpmConfig {
    /// Lamé parameters (mu, lambda).
    pub fn lame(&self) -> (f64, f64) {
        let e = self.youngs_modulus;
        let nu = self.poisson_ratio;
        (e / (2.0 * (1.0 + nu)), e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    }

    /// P-wave speed of the material (m/s).
    pub fn wave_speed(&self) -> f64 {
        let (mu, lambda) = self.lame();
        let density = self.particle_mass / self.particle_volume;
        ((lambda + 2.0 * mu) / density).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("grid_dx", self.grid_dx),
            ("youngs_modulus", self.youngs_modulus),
            ("particle_mass", self.particle_mass),
            ("particle_volume", self.particle_volume),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return Err(Error::Config(format!(
                "poisson_ratio must lie in (0, 0.5), got {}",
                self.poisson_ratio
            )));
        }
        let limit = self.grid_dx / self.wave_speed();
        if self.dt > limit {
            return Err(Error::Config(format!(
                "dt {} violates the CFL bound dx / wave_speed = {limit}",
                self.dt
            )));
        }
        if (self.grid_extent as i64) < 2 * WINDOW_MARGIN + 3 {
            return Err(Error::Config(format!("grid_extent {} is too small", self.grid_extent)));
        }
        self.contact.validate()
    }
}

/// Quadratic B-spline weights (and their derivatives) of one particle.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    /// Global index of the lower-left stencil node.
    pub base: [i64; 2],
    /// Position relative to `base`, in cells.
    pub fx: Vec2,
    pub w: [Vec2; 3],
    pub dw: [Vec2; 3],
}

impl Kernel {
    pub fn new(x: Vec2, inv_dx: f64) -> Self {
        let gx = x * inv_dx;
        let base = [(gx.x - 0.5).floor() as i64, (gx.y - 0.5).floor() as i64];
        let fx = Vec2::new(gx.x - base[0] as f64, gx.y - base[1] as f64);
        let a = Vec2::repeat(1.5) - fx;
        let b = fx - Vec2::repeat(1.0);
        let c = fx - Vec2::repeat(0.5);
        Self {
            base,
            fx,
            w: [
                0.5 * a.component_mul(&a),
                Vec2::repeat(0.75) - b.component_mul(&b),
                0.5 * c.component_mul(&c),
            ],
            dw: [-a, -2.0 * b, c],
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[i].x * self.w[j].y
    }

    /// Offset from the particle to stencil node (i, j), in meters.
    #[inline]
    pub fn dpos(&self, i: usize, j: usize, dx: f64) -> Vec2 {
        Vec2::new((i as f64 - self.fx.x) * dx, (j as f64 - self.fx.y) * dx)
    }
}

/// The background grid block that follows the agent.
#[derive(Debug, Clone)]
pub struct GridWindow {
    /// Global cell index of the window corner.
    pub origin_cell: [i64; 2],
    pub extent: usize,
    pub dx: f64,
    pub node_mass: Vec<f64>,
    pub node_momentum: Vec<Vec2>,
}

impl GridWindow {
    /// Window of `extent` cells centered (to whole cells) on the particles' bounding box.
    pub fn centered_on(x: &[Vec2], dx: f64, extent: usize) -> Self {
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        for p in x {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let center = (lo + hi) * 0.5;
        let half = (extent / 2) as i64;
        let origin_cell = [
            (center.x / dx).floor() as i64 - half,
            (center.y / dx).floor() as i64 - half,
        ];
        Self::with_origin(origin_cell, dx, extent)
    }

    pub fn with_origin(origin_cell: [i64; 2], dx: f64, extent: usize) -> Self {
        Self {
            origin_cell,
            extent,
            dx,
            node_mass: vec![0.0; extent * extent],
            node_momentum: vec![Vec2::zeros(); extent * extent],
        }
    }

    pub fn origin(&self) -> Vec2 {
        Vec2::new(self.origin_cell[0] as f64, self.origin_cell[1] as f64) * self.dx
    }

    /// Storage index of the stencil node (i, j) of a kernel.
    #[inline]
    fn index(&self, k: &Kernel, i: usize, j: usize) -> usize {
        let gx = (k.base[0] + i as i64 - self.origin_cell[0]) as usize;
        let gy = (k.base[1] + j as i64 - self.origin_cell[1]) as usize;
        gy * self.extent + gx
    }

    /// Global cell coordinates of a storage index.
    pub fn node_cell(&self, idx: usize) -> [i64; 2] {
        [
            self.origin_cell[0] + (idx % self.extent) as i64,
            self.origin_cell[1] + (idx / self.extent) as i64,
        ]
    }

    fn check_contains(&self, kernels: &[Kernel]) -> Result<()> {
        let lo = WINDOW_MARGIN;
        let hi = self.extent as i64 - WINDOW_MARGIN;
        for (p, k) in kernels.iter().enumerate() {
            for axis in 0..2 {
                let first = k.base[axis] - self.origin_cell[axis];
                if first < lo || first + 3 > hi {
                    return Err(Error::Window(format!(
                        "particle {p} stencil at cell {:?} is outside the {}-cell window at {:?} (margin {WINDOW_MARGIN})",
                        k.base, self.extent, self.origin_cell
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.node_mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vec2 {
        self.node_momentum.iter().sum()
    }
}

/// Polar rotation of a 2x2 matrix as (cos, sin), plus the norm used to normalize it.
#[inline]
fn polar_rotation(f: &Mat2) -> (f64, f64, f64) {
    let a = f[(0, 0)] + f[(1, 1)];
    let b = f[(1, 0)] - f[(0, 1)];
    let r = (a * a + b * b).sqrt();
    (a / r, b / r, r)
}

#[inline]
fn rotation(c: f64, s: f64) -> Mat2 {
    Mat2::new(c, -s, s, c)
}

/// Kirchhoff stress of fixed-corotated elasticity plus the actuation stress.
pub fn kirchhoff_stress(f: &Mat2, act_stress: f64, mu: f64, lambda: f64) -> Mat2 {
    let (c, s, _) = polar_rotation(f);
    let r = rotation(c, s);
    let j = f.determinant();
    let axis = Vec2::new(-s, c);
    2.0 * mu * (f - r) * f.transpose()
        + Mat2::identity() * (lambda * (j - 1.0) * j)
        + axis * axis.transpose() * act_stress
}

/// Adjoint of [`kirchhoff_stress`]: returns (dL/dF, dL/d act_stress).
pub fn kirchhoff_stress_adjoint(
    f: &Mat2,
    act_stress: f64,
    mu: f64,
    lambda: f64,
    g: &Mat2,
) -> (Mat2, f64) {
    let (c, s, norm) = polar_rotation(f);
    let r = rotation(c, s);
    let j = f.determinant();
    let mut g_f = 2.0 * mu * ((g + g.transpose()) * f - g.transpose() * r);
    let g_r = -2.0 * mu * g * f;
    let g_j = lambda * (2.0 * j - 1.0) * g.trace();
    g_f += Mat2::new(f[(1, 1)], -f[(1, 0)], -f[(0, 1)], f[(0, 0)]) * g_j;

    let axis = Vec2::new(-s, c);
    let g_act = axis.dot(&(g * axis));
    let g_axis = (g + g.transpose()) * axis * act_stress;

    let g_c = g_r[(0, 0)] + g_r[(1, 1)] + g_axis.y;
    let g_s = g_r[(1, 0)] - g_r[(0, 1)] - g_axis.x;
    let a = c * norm;
    let b = s * norm;
    let r3 = norm * norm * norm;
    let g_a = (g_c * b * b - g_s * a * b) / r3;
    let g_b = (-g_c * a * b + g_s * a * a) / r3;
    g_f[(0, 0)] += g_a;
    g_f[(1, 1)] += g_a;
    g_f[(1, 0)] += g_b;
    g_f[(0, 1)] -= g_b;
    (g_f, g_act)
}

/// Record of one MPM step; the reverse pass recomputes grid quantities from it.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub pre: SimState,
    pub act: Vec<f64>,
    pub origin_cell: [i64; 2],
}

/// Everything the forward step computes before G2P.
struct Transfer {
    kernels: Vec<Kernel>,
    /// Per-particle affine momentum matrix (stress + APIC).
    affine: Vec<Mat2>,
    grid: GridWindow,
    /// Grid velocity after gravity and contact.
    grid_v: Vec<Vec2>,
    /// Contact Jacobian of nodes that were projected.
    contact: Vec<Option<Mat2>>,
}

fn particle_act(design: &AgentDesign, act: &[f64], p: usize) -> f64 {
    design.group_of(p).map_or(0.0, |g| act[g])
}

fn transfer(
    state: &SimState,
    act: &[f64],
    cfg: &MpmConfig,
    design: &AgentDesign,
    origin_cell: [i64; 2],
) -> Result<Transfer> {
    let dx = cfg.grid_dx;
    let inv_dx = 1.0 / dx;
    let (mu, lambda) = cfg.lame();
    let m = cfg.particle_mass;
    let stress_scale = -cfg.dt * cfg.particle_volume * 4.0 * inv_dx * inv_dx;

    let kernels: Vec<Kernel> = state.x.iter().map(|x| Kernel::new(*x, inv_dx)).collect();
    let mut grid = GridWindow::with_origin(origin_cell, dx, cfg.grid_extent);
    grid.check_contains(&kernels)?;

    let mut affine = Vec::with_capacity(kernels.len());
    for (p, k) in kernels.iter().enumerate() {
        let f = &state.f[p];
        if !(f.determinant() > 0.0) {
            return Err(Error::Diverged {
                step: state.t,
                reason: format!("particle {p} has det F = {}", f.determinant()),
            });
        }
        let tau = kirchhoff_stress(
            f,
            particle_act(design, act, p) * cfg.act_stress_bound,
            mu,
            lambda,
        );
        let aff = tau * stress_scale + state.c[p] * m;
        let mv = state.v[p] * m;
        for i in 0..3 {
            for j in 0..3 {
                let w = k.weight(i, j);
                let idx = grid.index(k, i, j);
                grid.node_momentum[idx] += (mv + aff * k.dpos(i, j, dx)) * w;
                grid.node_mass[idx] += w * m;
            }
        }
        affine.push(aff);
    }

    let mut grid_v = vec![Vec2::zeros(); grid.node_mass.len()];
    let mut contact = vec![None; grid.node_mass.len()];
    let gravity = Vec2::new(0.0, cfg.gravity * cfg.dt);
    for idx in 0..grid_v.len() {
        let mass = grid.node_mass[idx];
        if mass <= 0.0 {
            continue;
        }
        let mut v = grid.node_momentum[idx] / mass + gravity;
        let node_y = grid.node_cell(idx)[1] as f64 * dx;
        if node_y < cfg.ground_height {
            let (projected, jac) = cfg.contact.project(v);
            v = projected;
            contact[idx] = Some(jac);
        }
        grid_v[idx] = v;
    }
    Ok(Transfer {
        kernels,
        affine,
        grid,
        grid_v,
        contact,
    })
}

/// Scatters particle mass and momentum to a window centered on the particles.
/// Exposed for conservation checks.
pub fn particle_to_grid(
    state: &SimState,
    act: &[f64],
    cfg: &MpmConfig,
    design: &AgentDesign,
) -> Result<GridWindow> {
    check_actuation(act, design)?;
    let window = GridWindow::centered_on(&state.x, cfg.grid_dx, cfg.grid_extent);
    Ok(transfer(state, act, cfg, design, window.origin_cell)?.grid)
}

/// Advances the particle state by one MLS-MPM substep.
pub fn mpm_step(
    state: &SimState,
    act: &[f64],
    cfg: &MpmConfig,
    design: &AgentDesign,
) -> Result<(SimState, StepRecord)> {
    if design.kind != DesignKind::Mpm {
        return Err(Error::Contract("mpm_step needs an MPM design".into()));
    }
    state.check_matches(design)?;
    check_actuation(act, design)?;
    if !state.is_finite() {
        return Err(Error::Diverged {
            step: state.t,
            reason: "non-finite particle state".into(),
        });
    }
    let origin_cell = GridWindow::centered_on(&state.x, cfg.grid_dx, cfg.grid_extent).origin_cell;
    let tr = transfer(state, act, cfg, design, origin_cell)?;
    let dx = cfg.grid_dx;
    let inv_dx = 1.0 / dx;
    let n = state.x.len();
    let mut next = SimState {
        t: state.t + 1,
        x: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        f: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
    };
    for (p, k) in tr.kernels.iter().enumerate() {
        let mut v = Vec2::zeros();
        let mut c = Mat2::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let w = k.weight(i, j);
                let gv = tr.grid_v[tr.grid.index(k, i, j)];
                v += gv * w;
                c += gv * k.dpos(i, j, dx).transpose() * (4.0 * inv_dx * inv_dx * w);
            }
        }
        let f = (Mat2::identity() + c * cfg.dt) * state.f[p];
        if !(f.determinant() > 0.0) {
            return Err(Error::Diverged {
                step: state.t,
                reason: format!("particle {p} inverted (det F = {})", f.determinant()),
            });
        }
        next.x.push(state.x[p] + v * cfg.dt);
        next.v.push(v);
        next.c.push(c);
        next.f.push(f);
    }
    if !next.is_finite() {
        return Err(Error::Diverged {
            step: state.t,
            reason: "non-finite particle state after G2P".into(),
        });
    }
    Ok((
        next,
        StepRecord {
            pre: state.clone(),
            act: act.to_vec(),
            origin_cell,
        },
    ))
}

/// Vector-Jacobian product of [`mpm_step`] through G2P, the grid update and P2G.
pub fn mpm_step_adjoint(
    record: &StepRecord,
    grad_out: &StateAdjoint,
    cfg: &MpmConfig,
    design: &AgentDesign,
) -> Result<(StateAdjoint, Vec<f64>)> {
    let pre = &record.pre;
    grad_out.check_shape(pre)?;
    let tr = transfer(pre, &record.act, cfg, design, record.origin_cell)?;
    let dx = cfg.grid_dx;
    let inv_dx = 1.0 / dx;
    let k4 = 4.0 * inv_dx * inv_dx;
    let dt = cfg.dt;
    let m = cfg.particle_mass;
    let n = pre.x.len();

    let mut grad = StateAdjoint::zeros_like(pre);
    let mut grad_act = vec![0.0; design.num_actuators()];
    let mut g_fx = vec![Vec2::zeros(); n];
    let mut g_grid_v = vec![Vec2::zeros(); tr.grid_v.len()];

    // G2P
    for (p, k) in tr.kernels.iter().enumerate() {
        // recompute C' for the F update
        let mut c_new = Mat2::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let gv = tr.grid_v[tr.grid.index(k, i, j)];
                c_new += gv * k.dpos(i, j, dx).transpose() * (k4 * k.weight(i, j));
            }
        }
        let g_f_out = grad_out.f[p];
        grad.f[p] = (Mat2::identity() + c_new * dt).transpose() * g_f_out;
        let g_c = grad_out.c[p] + g_f_out * pre.f[p].transpose() * dt;
        grad.x[p] = grad_out.x[p];
        let g_v = grad_out.v[p] + grad_out.x[p] * dt;
        for i in 0..3 {
            for j in 0..3 {
                let w = k.weight(i, j);
                let idx = tr.grid.index(k, i, j);
                let gv = tr.grid_v[idx];
                let dpos = k.dpos(i, j, dx);
                let g_c_dpos = g_c * dpos;
                g_grid_v[idx] += g_v * w + g_c_dpos * (k4 * w);
                let g_w = g_v.dot(&gv) + k4 * gv.dot(&g_c_dpos);
                let g_dpos = g_c.transpose() * gv * (k4 * w);
                g_fx[p] += Vec2::new(
                    g_w * k.dw[i].x * k.w[j].y,
                    g_w * k.w[i].x * k.dw[j].y,
                ) - g_dpos * dx;
            }
        }
    }

    // grid update
    let mut g_mom = vec![Vec2::zeros(); tr.grid_v.len()];
    let mut g_mass = vec![0.0; tr.grid_v.len()];
    for idx in 0..tr.grid_v.len() {
        let mass = tr.grid.node_mass[idx];
        if mass <= 0.0 {
            continue;
        }
        let mut g = g_grid_v[idx];
        if let Some(jac) = &tr.contact[idx] {
            g = jac.transpose() * g;
        }
        g_mom[idx] = g / mass;
        g_mass[idx] = -tr.grid.node_momentum[idx].dot(&g) / (mass * mass);
    }

    // P2G
    let (mu, lambda) = cfg.lame();
    let stress_scale = -dt * cfg.particle_volume * k4;
    for (p, k) in tr.kernels.iter().enumerate() {
        let aff = tr.affine[p];
        let mv = pre.v[p] * m;
        let mut g_aff = Mat2::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let w = k.weight(i, j);
                let idx = tr.grid.index(k, i, j);
                let dpos = k.dpos(i, j, dx);
                let gm = g_mom[idx];
                let g_w = gm.dot(&(mv + aff * dpos)) + g_mass[idx] * m;
                grad.v[p] += gm * (m * w);
                g_aff += gm * dpos.transpose() * w;
                let g_dpos = aff.transpose() * gm * w;
                g_fx[p] += Vec2::new(
                    g_w * k.dw[i].x * k.w[j].y,
                    g_w * k.w[i].x * k.dw[j].y,
                ) - g_dpos * dx;
            }
        }
        grad.c[p] += g_aff * m;
        let g_tau = g_aff * stress_scale;
        let a_p = particle_act(design, &record.act, p);
        let (g_f, g_act) =
            kirchhoff_stress_adjoint(&pre.f[p], a_p * cfg.act_stress_bound, mu, lambda, &g_tau);
        grad.f[p] += g_f;
        if let Some(g) = design.group_of(p) {
            grad_act[g] += g_act * cfg.act_stress_bound;
        }
        grad.x[p] += g_fx[p] * inv_dx;
    }
    Ok((grad, grad_act))
}

/// A rectangular block of `nx * ny` particles spaced half a cell apart, with
/// its lower-left particle at `origin`. Columns are split into `groups`
/// vertical actuator strips.
pub fn block_design(
    name: &str,
    origin: Vec2,
    nx: usize,
    ny: usize,
    spacing: f64,
    groups: usize,
) -> Result<AgentDesign> {
    let mut nodes = Vec::with_capacity(nx * ny);
    let mut group_lists = vec![Vec::new(); groups.max(1)];
    for j in 0..ny {
        for i in 0..nx {
            group_lists[i * groups.max(1) / nx].push(nodes.len());
            nodes.push(origin + Vec2::new(i as f64, j as f64) * spacing);
        }
    }
    let n = nodes.len();
    Ok(AgentDesign::new(
        name,
        DesignKind::Mpm,
        nodes,
        vec![1.0; n],
        Vec::new(),
        Some(group_lists),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_free() -> MpmConfig {
        MpmConfig {
            gravity: 0.0,
            ground_height: -1e9,
            ..Default::default()
        }
    }

    fn block() -> AgentDesign {
        block_design("block", Vec2::new(0.5, 0.3), 4, 4, 0.005, 2).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        MpmConfig::default().validate().unwrap();
        let bad = MpmConfig { dt: 0.01, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = MpmConfig { poisson_ratio: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weights_partition_unity_and_reproduce_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let k = Kernel::new(x, 100.0);
            let mut sum = 0.0;
            let mut first = Vec2::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    sum += k.weight(i, j);
                    first += k.dpos(i, j, 0.01) * k.weight(i, j);
                }
            }
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(first.norm() < 1e-14);
        }
    }

    #[test]
    fn single_particle_at_rest_stays_put() {
        let d = block_design("one", Vec2::new(0.4, 0.4), 1, 1, 0.005, 1).unwrap();
        let s = SimState::at_rest(&d);
        let (next, _) = mpm_step(&s, &[0.0], &cfg_free(), &d).unwrap();
        assert!((next.x[0] - s.x[0]).norm() < 1e-15);
        assert!(next.v[0].norm() < 1e-15);
        assert!((next.f[0] - Mat2::identity()).norm() < 1e-15);
        assert!(next.c[0].norm() < 1e-12);
    }

    #[test]
    fn free_fall_accelerates_com_at_gravity() {
        let d = block();
        let cfg = MpmConfig { ground_height: -1e9, ..Default::default() };
        let mut s = SimState::at_rest(&d);
        for p in 0..s.v.len() {
            s.v[p] = Vec2::new(0.1, 0.05 * p as f64);
        }
        for _ in 0..5 {
            let (next, _) = mpm_step(&s, &[0.3, -0.2], &cfg, &d).unwrap();
            let v0: Vec2 = s.v.iter().sum::<Vec2>() / s.v.len() as f64;
            let v1: Vec2 = next.v.iter().sum::<Vec2>() / next.v.len() as f64;
            let accel = (v1 - v0) / cfg.dt;
            assert!((accel - Vec2::new(0.0, cfg.gravity)).norm() < 1e-10, "{accel:?}");
            s = next;
        }
    }

    #[test]
    fn actuation_stress_has_no_net_force() {
        let d = block();
        let cfg = cfg_free();
        let s = SimState::at_rest(&d);
        let relaxed = particle_to_grid(&s, &[0.0, 0.0], &cfg, &d).unwrap();
        let actuated = particle_to_grid(&s, &[1.0, 1.0], &cfg, &d).unwrap();
        // the stress contribution to every node's momentum sums to zero
        let net: Vec2 = actuated
            .node_momentum
            .iter()
            .zip(&relaxed.node_momentum)
            .map(|(a, b)| a - b)
            .sum();
        let per_node: f64 = actuated
            .node_momentum
            .iter()
            .zip(&relaxed.node_momentum)
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(per_node > 0.0);
        assert!(net.norm() < 1e-12 * per_node.max(1.0));
        let (next, _) = mpm_step(&s, &[1.0, 1.0], &cfg, &d).unwrap();
        let v_com: Vec2 = next.v.iter().sum::<Vec2>() / next.v.len() as f64;
        assert!(v_com.norm() < 1e-12);
    }

    #[test]
    fn p2g_conserves_mass_and_momentum() {
        let d = block();
        let cfg = cfg_free();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = SimState::at_rest(&d);
        for p in 0..s.x.len() {
            s.v[p] = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            s.c[p] = Mat2::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
        }
        let grid = particle_to_grid(&s, &[0.5, -0.5], &cfg, &d).unwrap();
        let total = cfg.particle_mass * s.x.len() as f64;
        assert!((grid.total_mass() - total).abs() <= 1e-12 * total);
        let p: Vec2 = s.v.iter().map(|v| v * cfg.particle_mass).sum();
        assert!((grid.total_momentum() - p).norm() <= 1e-10 * p.norm());
    }

    #[test]
    fn whole_cell_translation_is_invariant() {
        let d = block();
        let cfg = MpmConfig { ground_height: -1e9, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = SimState::at_rest(&d);
        for p in 0..s.x.len() {
            s.v[p] = Vec2::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        }
        let shift = Vec2::new(cfg.grid_dx, cfg.grid_dx);
        let (a, _) = mpm_step(&s, &[0.4, 0.1], &cfg, &d).unwrap();
        let (b, _) = mpm_step(&s.translated(shift), &[0.4, 0.1], &cfg, &d).unwrap();
        for p in 0..a.x.len() {
            assert!((a.x[p] + shift - b.x[p]).norm() < 1e-10);
            assert!((a.v[p] - b.v[p]).norm() < 1e-10);
            assert!((a.f[p] - b.f[p]).norm() < 1e-10);
            assert!((a.c[p] - b.c[p]).norm() < 1e-8);
        }
    }

    #[test]
    fn window_too_small_is_reported() {
        let d = block_design("wide", Vec2::new(0.0, 0.5), 40, 2, 0.005, 1).unwrap();
        let cfg = MpmConfig { grid_extent: 12, ..cfg_free() };
        let s = SimState::at_rest(&d);
        assert!(matches!(mpm_step(&s, &[0.0], &cfg, &d), Err(Error::Window(_))));
    }

    #[test]
    fn inverted_particle_diverges() {
        let d = block();
        let mut s = SimState::at_rest(&d);
        s.f[3] = Mat2::new(-1.0, 0.0, 0.0, 1.0);
        s.t = 4;
        assert!(matches!(mpm_step(&s, &[0.0, 0.0], &cfg_free(), &d), Err(Error::Diverged { step: 4, .. })));
    }

    #[test]
    fn stress_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mu, lambda) = MpmConfig::default().lame();
        for _ in 0..20 {
            let f = Mat2::identity()
                + Mat2::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                );
            let act = rng.random_range(-4e3..4e3);
            let g = Mat2::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let (g_f, g_act) = kirchhoff_stress_adjoint(&f, act, mu, lambda, &g);
            let obj = |f: &Mat2, a: f64| kirchhoff_stress(f, a, mu, lambda).component_mul(&g).sum();
            let eps = 1e-6;
            for r in 0..2 {
                for c in 0..2 {
                    let mut fp = f;
                    let mut fm = f;
                    fp[(r, c)] += eps;
                    fm[(r, c)] -= eps;
                    let fd = (obj(&fp, act) - obj(&fm, act)) / (2.0 * eps);
                    assert!((fd - g_f[(r, c)]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g_f[(r, c)]);
                }
            }
            let fd = (obj(&f, act + 1.0) - obj(&f, act - 1.0)) / 2.0;
            assert!((fd - g_act).abs() < 1e-9 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn zero_adjoint_maps_to_zero() {
        let d = block();
        let cfg = MpmConfig::default();
        let s = SimState::at_rest(&d);
        let (_, r) = mpm_step(&s, &[0.2, 0.7], &cfg, &d).unwrap();
        let (g, ga) = mpm_step_adjoint(&r, &StateAdjoint::zeros_like(&s), &cfg, &d).unwrap();
        assert!(g.is_zero());
        assert!(ga.iter().all(|a| *a == 0.0));
    }
    #[test]
    fn one_step_adjoint_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = block_design("block", Vec2::new(0.3025, 0.1025), 4, 4, 0.005, 2).unwrap();
        for contact in [Contact::Sticky, Contact::Coulomb { mu: 0.4 }, Contact::Frictionless] {
            let cfg = MpmConfig { contact, ..Default::default() };
            let mut s = SimState::at_rest(&d);
            for p in 0..s.x.len() {
                s.x[p] += Vec2::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3));
                s.v[p] = Vec2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                s.f[p] += Mat2::from_fn(|_, _| rng.random_range(-0.05..0.05));
                s.c[p] = Mat2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
            let act = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut w = StateAdjoint::zeros_like(&s);
            for p in 0..s.x.len() {
                w.x[p] = Vec2::from_fn(|_, _| rng.random_range(-1.0..1.0));
                w.v[p] = Vec2::from_fn(|_, _| rng.random_range(-1.0..1.0));
                w.f[p] = Mat2::from_fn(|_, _| rng.random_range(-1.0..1.0));
                w.c[p] = Mat2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
            let obj = |s: &SimState, a: &[f64]| w.dot(&mpm_step(s, a, &cfg, &d).unwrap().0);
            let (_, r) = mpm_step(&s, &act, &cfg, &d).unwrap();
            let (g, ga) = mpm_step_adjoint(&r, &w, &cfg, &d).unwrap();
            let eps = 1e-6;
            let mut pairs = Vec::new();
            for p in 0..s.x.len() {
                for k in 0..2 {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp.x[p][k] += eps;
                    sm.x[p][k] -= eps;
                    pairs.push((g.x[p][k], (obj(&sp, &act) - obj(&sm, &act)) / (2.0 * eps)));
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp.v[p][k] += eps;
                    sm.v[p][k] -= eps;
                    pairs.push((g.v[p][k], (obj(&sp, &act) - obj(&sm, &act)) / (2.0 * eps)));
                }
                for k in 0..4 {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp.f[p][k] += eps;
                    sm.f[p][k] -= eps;
                    pairs.push((g.f[p][k], (obj(&sp, &act) - obj(&sm, &act)) / (2.0 * eps)));
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp.c[p][k] += eps;
                    sm.c[p][k] -= eps;
                    pairs.push((g.c[p][k], (obj(&sp, &act) - obj(&sm, &act)) / (2.0 * eps)));
                }
            }
            for j in 0..2 {
                let mut ap = act;
                let mut am = act;
                ap[j] += eps;
                am[j] -= eps;
                pairs.push((ga[j], (obj(&s, &ap) - obj(&s, &am)) / (2.0 * eps)));
            }
            let scale = pairs.iter().fold(0.0f64, |m, (_, n)| m.max(n.abs()));
            for (a, n) in pairs {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale);
                assert!(err < 1e-5, "{contact:?}: analytic {a} numeric {n}");
            }
        }
    }
}
