//! Browser bindings: edit a gain surface and watch the closed loop respond.

use bsgtune::bsg::BsgGeometry;
use bsgtune::control::{GainSchedule, ScheduleConfig};
use bsgtune::env::{reward_terms, simulate_window, Action, EnvConfig, Reference};
use bsgtune::plant::{NoiseConfig, OperatingBox, PlantConfig, ThetaFamily, ThetaMap};
use bsgtune::seeds;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: bsgtune::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct Response {
    t: Vec<f64>,
    y_d: Vec<f64>,
    baseline: Trace,
    schedule: Trace,
}

#[derive(Serialize)]
struct Trace {
    y: Vec<f64>,
    u: Vec<f64>,
    kp: f64,
    ki: f64,
    r_j: f64,
}

#[wasm_bindgen]
pub struct Demo {
    cfg: ScheduleConfig,
    bx: OperatingBox,
    sched: GainSchedule,
    theta: ThetaMap,
}

#[wasm_bindgen]
impl Demo {
    /// Baseline schedule on an `n x n` control-point grid.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize) -> Result<Demo, JsError> {
        let cfg = ScheduleConfig {
            cp_counts: [n, n],
            ..ScheduleConfig::default()
        };
        cfg.validate().map_err(js_err)?;
        let bx = OperatingBox::default();
        let sched = GainSchedule::baseline(&cfg, &bx).map_err(js_err)?;
        let theta = ThetaMap {
            family: ThetaFamily::Poly,
            coeffs: [1.0, 0.2, 0.2, 0.1, 0.3],
            operating_box: bx,
        };
        Ok(Demo { cfg, bx, sched, theta })
    }

    pub fn cp_count(&self) -> usize {
        self.cfg.cp_counts[0]
    }

    /// Control points of `"kp"` or `"ki"`, row-major with `w1` outermost.
    pub fn cps(&self, which: &str) -> Result<Vec<f64>, JsError> {
        Ok(self.surface_ref(which)?.cps().to_vec())
    }

    /// Sets one control point, clamped to the gain limits.
    pub fn set_cp(&mut self, which: &str, i: usize, j: usize, value: f64) -> Result<(), JsError> {
        let n = self.cfg.cp_counts;
        if i >= n[0] || j >= n[1] {
            return Err(JsError::new("control point index out of range"));
        }
        let g = self.surface_ref(which)?;
        let mut cps = g.cps().to_vec();
        cps[i * n[1] + j] = value.clamp(self.cfg.k_min, self.cfg.k_max);
        let new = BsgGeometry::new(g.axes().to_vec(), cps).map_err(js_err)?;
        match which {
            "kp" => self.sched.kp = new,
            _ => self.sched.ki = new,
        }
        Ok(())
    }

    pub fn reset(&mut self) -> Result<(), JsError> {
        self.sched = GainSchedule::baseline(&self.cfg, &self.bx).map_err(js_err)?;
        Ok(())
    }

    /// Surface values on a `samples x samples` grid, `w1` outermost.
    pub fn surface(&self, which: &str, samples: usize) -> Result<Vec<f64>, JsError> {
        let g = self.surface_ref(which)?;
        let s = samples.max(2);
        let mut out = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                let w = [i as f64 / (s - 1) as f64, j as f64 / (s - 1) as f64];
                out.push(g.evaluate(&w).map_err(js_err)?);
            }
        }
        Ok(out)
    }

    /// Noise-free unit step at `(w1, w2)` under the baseline and the edited
    /// schedule, as JSON.
    pub fn step_response(&self, w1: f64, w2: f64, duration: f64) -> Result<String, JsError> {
        let env = EnvConfig {
            window_len: (duration.clamp(1.0, 60.0) / 0.05).round() as usize,
            ..EnvConfig::default()
        };
        let plant = PlantConfig {
            noise: NoiseConfig::disabled(),
            ..PlantConfig::default()
        };
        let reference = Reference {
            initial: 0.0,
            level: 1.0,
            step_time: 0.5,
            w: self.bx.clamp([w1, w2]),
        };
        let baseline = GainSchedule::baseline(&self.cfg, &self.bx).map_err(js_err)?;
        let trace = |s: &GainSchedule| -> Result<(Trace, Vec<f64>, Vec<f64>), JsError> {
            let mut rng = seeds::stream(0, "web");
            let win = simulate_window(s, &self.theta, &reference, &env, &plant, &mut rng).map_err(js_err)?;
            let r_j = reward_terms(&win, &Action::zeros(), None, &env).r_j;
            let (kp, ki) = s.gains(reference.w);
            Ok((Trace { y: win.y, u: win.u, kp, ki, r_j }, win.t, win.y_d))
        };
        let (b, t, y_d) = trace(&baseline)?;
        let (s, _, _) = trace(&self.sched)?;
        let r = Response {
            t,
            y_d,
            baseline: b,
            schedule: s,
        };
        serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
    }
}

impl Demo {
    fn surface_ref(&self, which: &str) -> Result<&BsgGeometry, JsError> {
        match which {
            "kp" => Ok(&self.sched.kp),
            "ki" => Ok(&self.sched.ki),
            _ => Err(JsError::new("surface must be \"kp\" or \"ki\"")),
        }
    }
}
