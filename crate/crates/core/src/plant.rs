//! Parameter-varying first-order-plus-dead-time plant.
//!
//! The plant follows `dx/dt = (1/θ1(w)) (-x + u(t - θ2(w)))` with the
//! transient time `θ1` and the dead time `θ2` depending on the operating point
//! `w = [w1, w2]`. The control input is a sample-and-hold signal; its history
//! is stored as breakpoints and integration steps are split wherever a
//! delayed breakpoint falls inside them, so RK4 only ever integrates a smooth
//! right-hand side.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned operating box for `w = [w1, w2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Default for OperatingBox {
    fn default() -> Self {
        OperatingBox {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
        }
    }
}

impl OperatingBox {
    pub fn clamp(&self, w: [f64; 2]) -> [f64; 2] {
        [
            w[0].clamp(self.lo[0], self.hi[0]),
            w[1].clamp(self.lo[1], self.hi[1]),
        ]
    }

    pub fn contains(&self, w: [f64; 2]) -> bool {
        (0..2).all(|i| w[i] >= self.lo[i] && w[i] <= self.hi[i])
    }

    /// `n x n` grid over the box, endpoints included.
    pub fn grid(&self, n: usize) -> Vec<[f64; 2]> {
        let at = |i: usize, ax: usize| {
            if n == 1 {
                0.5 * (self.lo[ax] + self.hi[ax])
            } else {
                self.lo[ax] + (self.hi[ax] - self.lo[ax]) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push([at(i, 0), at(j, 1)]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaFamily {
    /// `θ1 = c0 (1 + c1 w1 + c2 w2²)`, `θ2 = c3 (1 + c4 w2)`.
    #[default]
    Poly,
}

/// Uniform sampling ranges `[lo, hi]` for the family coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThetaFamilyConfig {
    pub family: ThetaFamily,
    pub c0: [f64; 2],
    pub c1: [f64; 2],
    pub c2: [f64; 2],
    pub c3: [f64; 2],
    pub c4: [f64; 2],
    /// Lower bound every admissible `θ1` must respect.
    pub theta1_min: f64,
}

impl Default for ThetaFamilyConfig {
    fn default() -> Self {
        ThetaFamilyConfig {
            family: ThetaFamily::Poly,
            c0: [0.8, 1.5],
            c1: [-0.3, 0.5],
            c2: [0.0, 0.5],
            c3: [0.05, 0.2],
            c4: [0.0, 0.5],
            theta1_min: 0.05,
        }
    }
}

impl ThetaFamilyConfig {
    /// Point distribution at the given coefficients.
    pub fn fixed(c: [f64; 5]) -> Self {
        ThetaFamilyConfig {
            c0: [c[0], c[0]],
            c1: [c[1], c[1]],
            c2: [c[2], c[2]],
            c3: [c[3], c[3]],
            c4: [c[4], c[4]],
            ..Default::default()
        }
    }

    fn ranges(&self) -> [(&'static str, [f64; 2]); 5] {
        [
            ("c0", self.c0),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
        ]
    }

    /// Checks that no admissible coefficient set yields `θ1 < theta1_min` or
    /// `θ2 < 0` on a 21 x 21 scan of the operating box. Both maps are affine in
    /// each coefficient, so checking range corners covers the whole box.
    pub fn validate(&self, bx: &OperatingBox) -> Result<()> {
        for (name, [lo, hi]) in self.ranges() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::config(
                    format!("plant.theta.{name}"),
                    format!("range [{lo}, {hi}] must be finite with lo <= hi"),
                ));
            }
        }
        if self.theta1_min <= 0.0 {
            return Err(Error::config("plant.theta.theta1_min", "must be > 0"));
        }
        let grid = bx.grid(21);
        for corner in 0..32u32 {
            let pick = |i: usize, r: [f64; 2]| if corner & (1 << i) == 0 { r[0] } else { r[1] };
            let c = [
                pick(0, self.c0),
                pick(1, self.c1),
                pick(2, self.c2),
                pick(3, self.c3),
                pick(4, self.c4),
            ];
            let map = ThetaMap {
                family: self.family,
                coeffs: c,
                operating_box: *bx,
            };
            for &w in &grid {
                let (t1, t2) = map.eval_unclamped(w);
                if !(t1 >= self.theta1_min) {
                    return Err(Error::config(
                        "plant.theta",
                        format!(
                            "coefficients {c:?} give θ1 = {t1} < theta1_min = {} at w = {w:?}",
                            self.theta1_min
                        ),
                    ));
                }
                if !(t2 >= 0.0) {
                    return Err(Error::config(
                        "plant.theta",
                        format!("coefficients {c:?} give θ2 = {t2} < 0 at w = {w:?}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Operating-point-dependent transient time and dead time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaMap {
    pub family: ThetaFamily,
    pub coeffs: [f64; 5],
    pub operating_box: OperatingBox,
}

impl ThetaMap {
    /// `(θ1, θ2)` at `w`; points outside the operating box are clamped.
    pub fn eval(&self, w: [f64; 2]) -> (f64, f64) {
        let wc = self.operating_box.clamp(w);
        if wc != w {
            log::trace!("operating point {w:?} clamped to {wc:?}");
        }
        self.eval_unclamped(wc)
    }

    fn eval_unclamped(&self, w: [f64; 2]) -> (f64, f64) {
        let [c0, c1, c2, c3, c4] = self.coeffs;
        match self.family {
            ThetaFamily::Poly => (
                c0 * (1.0 + c1 * w[0] + c2 * w[1] * w[1]),
                c3 * (1.0 + c4 * w[1]),
            ),
        }
    }

    /// Largest dead time over the operating box.
    pub fn theta2_max(&self) -> f64 {
        let b = self.operating_box;
        [b.lo, b.hi, [b.lo[0], b.hi[1]], [b.hi[0], b.lo[1]]]
            .iter()
            .map(|&w| self.eval_unclamped(w).1)
            .fold(0.0, f64::max)
    }
}

/// Draws a [`ThetaMap`] with coefficients uniform over the configured ranges.
pub fn sample_theta<R: Rng + ?Sized>(cfg: &ThetaFamilyConfig, bx: &OperatingBox, rng: &mut R) -> Result<ThetaMap> {
    cfg.validate(bx)?;
    let mut coeffs = [0.0; 5];
    for (c, (_, [lo, hi])) in coeffs.iter_mut().zip(cfg.ranges()) {
        // always consume one draw per coefficient so streams stay aligned
        let u: f64 = rng.random();
        *c = lo + (hi - lo) * u;
    }
    Ok(ThetaMap {
        family: cfg.family,
        coeffs,
        operating_box: *bx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub sigma_y: f64,
    pub sigma_w: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: true,
            sigma_y: 0.01,
            sigma_w: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        NoiseConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, s) in [("plant.noise.sigma_y", self.sigma_y), ("plant.noise.sigma_w", self.sigma_w)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(key, format!("must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Inner RK4 step in seconds.
    pub dt_sim: f64,
    /// Use `dx/dt = -(1/θ1)(x + u(t - θ2))` (DC gain -1) instead of the
    /// positive-gain form.
    pub literal_paper_sign: bool,
    /// Input assumed before the first history record.
    pub initial_input: f64,
    pub theta: ThetaFamilyConfig,
    pub noise: NoiseConfig,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            dt_sim: 0.01,
            literal_paper_sign: false,
            initial_input: 0.0,
            theta: ThetaFamilyConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl PlantConfig {
    pub fn validate(&self, bx: &OperatingBox) -> Result<()> {
        if !(self.dt_sim > 0.0 && self.dt_sim.is_finite()) {
            return Err(Error::config("plant.dt_sim", "must be > 0"));
        }
        if !self.initial_input.is_finite() {
            return Err(Error::config("plant.initial_input", "must be finite"));
        }
        self.noise.validate()?;
        self.theta.validate(bx)
    }
}

/// Plant state plus the held-input history needed for the dead time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: f64,
    pub t: f64,
    /// `(t_i, u_i)`: input `u_i` is held from `t_i` until the next record.
    history: VecDeque<(f64, f64)>,
    initial_input: f64,
}

impl PlantState {
    pub fn new(x0: f64, initial_input: f64) -> Self {
        PlantState {
            x: x0,
            t: 0.0,
            history: VecDeque::new(),
            initial_input,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.history.iter()
    }

    /// Held input at time `tau`.
    pub fn input_at(&self, tau: f64) -> f64 {
        // records are sorted; find the last with t_i <= tau
        let idx = self.history.partition_point(|&(ti, _)| ti <= tau);
        if idx == 0 {
            self.initial_input
        } else {
            self.history[idx - 1].1
        }
    }

    fn record(&mut self, u: f64) {
        match self.history.back() {
            Some(&(_, last)) if last == u => {}
            _ => self.history.push_back((self.t, u)),
        }
    }

    fn prune(&mut self, keep_after: f64) {
        // keep the record that is active at `keep_after`
        while self.history.len() >= 2 && self.history[1].0 <= keep_after {
            self.history.pop_front();
        }
    }

    /// Advances one integration step of length `dt` with input `u` applied
    /// from the current time on.
    pub fn step(&mut self, u: f64, w: [f64; 2], dt: f64, map: &ThetaMap, cfg: &PlantConfig) -> Result<()> {
        if !u.is_finite() {
            return Err(Error::invalid(format!("non-finite plant input {u}")));
        }
        if !(dt > 0.0) || dt > cfg.dt_sim * (1.0 + 1e-9) {
            return Err(Error::invalid(format!(
                "step size {dt} must be in (0, dt_sim = {}]",
                cfg.dt_sim
            )));
        }
        self.record(u);
        let (theta1, theta2) = map.eval(w);
        let t0 = self.t;
        let t1 = t0 + dt;

        // delayed breakpoints strictly inside (t0, t1)
        let mut cuts: Vec<f64> = self
            .history
            .iter()
            .map(|&(ti, _)| ti + theta2)
            .filter(|&b| b > t0 && b < t1)
            .collect();
        cuts.push(t1);

        let mut a = t0;
        for b in cuts {
            let ud = self.input_at(0.5 * (a + b) - theta2);
            self.x = rk4_fopdt(self.x, ud, theta1, b - a, cfg.literal_paper_sign);
            a = b;
        }
        self.t = t1;
        self.prune(t1 - map.theta2_max() - 1.0);
        Ok(())
    }

    /// Holds `u` for `duration`, stepping in increments of at most `dt_sim`.
    pub fn advance(&mut self, u: f64, w: [f64; 2], duration: f64, map: &ThetaMap, cfg: &PlantConfig) -> Result<()> {
        let n = (duration / cfg.dt_sim - 1e-9).ceil().max(1.0) as usize;
        let h = duration / n as f64;
        for _ in 0..n {
            self.step(u, w, h, map, cfg)?;
        }
        Ok(())
    }
}

// One RK4 step of a first-order lag with constant delayed input.
fn rk4_fopdt(x: f64, ud: f64, theta1: f64, h: f64, literal: bool) -> f64 {
    let f = |x: f64| {
        if literal {
            -(x + ud) / theta1
        } else {
            (ud - x) / theta1
        }
    };
    let k1 = f(x);
    let k2 = f(x + 0.5 * h * k1);
    let k3 = f(x + 0.5 * h * k2);
    let k4 = f(x + h * k3);
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Disturbed measurements of the output and the operating point.
pub fn measure<R: Rng + ?Sized>(state: &PlantState, w_true: [f64; 2], noise: &NoiseConfig, rng: &mut R) -> (f64, [f64; 2]) {
    if !noise.enabled {
        return (state.x, w_true);
    }
    let y = state.x + gaussian(noise.sigma_y, rng);
    let w = [
        w_true[0] + gaussian(noise.sigma_w, rng),
        w_true[1] + gaussian(noise.sigma_w, rng),
    ];
    (y, w)
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    // one draw even for sigma == 0 keeps the stream position independent of sigma
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    sigma * z
}
