//! Gain-scheduled PI control with B-spline gain surfaces.

use serde::{Deserialize, Serialize};

use crate::bsg::{BsgGeometry, ClampBox, KnotVector};
use crate::error::{Error, Result};
use crate::plant::OperatingBox;

/// Layout and baseline values of the two gain surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub cp_counts: [usize; 2],
    pub degrees: [usize; 2],
    pub baseline_kp: f64,
    pub baseline_ki: f64,
    pub clamp_enabled: bool,
    pub k_min: f64,
    pub k_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            cp_counts: [6, 6],
            degrees: [2, 2],
            baseline_kp: 0.2,
            baseline_ki: 0.1,
            clamp_enabled: true,
            k_min: 0.0,
            k_max: 10.0,
        }
    }
}

impl ScheduleConfig {
    pub fn clamp(&self) -> Option<ClampBox> {
        self.clamp_enabled.then_some(ClampBox {
            min: self.k_min,
            max: self.k_max,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for ax in 0..2 {
            if self.cp_counts[ax] < self.degrees[ax] + 1 {
                return Err(Error::config(
                    "bsg.cp_counts",
                    format!("axis {ax}: {} control points cannot carry degree {}", self.cp_counts[ax], self.degrees[ax]),
                ));
            }
            if self.cp_counts[ax] < 2 {
                return Err(Error::config("bsg.cp_counts", "each axis needs at least 2 control points"));
            }
        }
        if !(self.k_max > self.k_min) {
            return Err(Error::config("bsg.k_max", "must exceed bsg.k_min"));
        }
        for (key, v) in [("bsg.baseline_kp", self.baseline_kp), ("bsg.baseline_ki", self.baseline_ki)] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
            if self.clamp_enabled && (v < self.k_min || v > self.k_max) {
                return Err(Error::config(key, format!("must lie in [k_min, k_max] = [{}, {}]", self.k_min, self.k_max)));
            }
        }
        Ok(())
    }

    pub fn axes(&self, bx: &OperatingBox) -> Result<Vec<KnotVector>> {
        (0..2)
            .map(|ax| KnotVector::clamped_uniform(self.degrees[ax], self.cp_counts[ax], bx.lo[ax], bx.hi[ax]))
            .collect()
    }
}

/// Proportional and integral gain surfaces over the operating box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub kp: BsgGeometry,
    pub ki: BsgGeometry,
    pub operating_box: OperatingBox,
}

impl GainSchedule {
    pub fn new(kp: BsgGeometry, ki: BsgGeometry, operating_box: OperatingBox) -> Result<Self> {
        if kp.dims() != 2 || ki.dims() != 2 {
            return Err(Error::invalid("gain surfaces must be bivariate"));
        }
        let dom = [(operating_box.lo[0], operating_box.hi[0]), (operating_box.lo[1], operating_box.hi[1])];
        if kp.domain() != dom || ki.domain() != dom {
            return Err(Error::invalid(format!(
                "surface domains {:?} / {:?} do not match the operating box {dom:?}",
                kp.domain(),
                ki.domain()
            )));
        }
        Ok(GainSchedule { kp, ki, operating_box })
    }

    /// Both surfaces flat at the given values.
    pub fn constant(cfg: &ScheduleConfig, bx: &OperatingBox, kp: f64, ki: f64) -> Result<Self> {
        let axes = cfg.axes(bx)?;
        GainSchedule::new(
            BsgGeometry::constant(axes.clone(), kp)?,
            BsgGeometry::constant(axes, ki)?,
            *bx,
        )
    }

    pub fn baseline(cfg: &ScheduleConfig, bx: &OperatingBox) -> Result<Self> {
        GainSchedule::constant(cfg, bx, cfg.baseline_kp, cfg.baseline_ki)
    }

    /// `(kP, kI)` at `w`, clamped into the operating box first.
    pub fn gains(&self, w: [f64; 2]) -> (f64, f64) {
        let wc = self.operating_box.clamp(w);
        let kp = self.kp.evaluate(&wc).expect("clamped point lies in the domain");
        let ki = self.ki.evaluate(&wc).expect("clamped point lies in the domain");
        (kp, ki)
    }
}

/// Controller memory: the accumulated error integral.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PiState {
    pub integral: f64,
    pub last_time: f64,
}

impl PiState {
    /// One controller sample: `integral += e dt`, `u = kP e + kI integral`.
    /// `integral_clamp` bounds `|integral|` when set.
    pub fn step(&mut self, e: f64, (kp, ki): (f64, f64), dt: f64, integral_clamp: Option<f64>) -> Result<f64> {
        if !e.is_finite() {
            return Err(Error::invalid(format!("non-finite control error {e}")));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("controller step {dt} must be > 0")));
        }
        self.integral += e * dt;
        if let Some(limit) = integral_clamp {
            self.integral = self.integral.clamp(-limit, limit);
        }
        self.last_time += dt;
        Ok(kp * e + ki * self.integral)
    }

    pub fn reset(&mut self) {
        *self = PiState::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::bsg::CpIndex;

    #[test]
    fn constant_surfaces_give_constant_gains() {
        let bx = OperatingBox::default();
        let s = GainSchedule::constant(&ScheduleConfig::default(), &bx, 1.2, 0.4).unwrap();
        for w in bx.grid(7) {
            let (kp, ki) = s.gains(w);
            assert!((kp - 1.2).abs() < 1e-14 && (ki - 0.4).abs() < 1e-14);
        }
    }

    #[test]
    fn excursions_are_clamped() {
        let bx = OperatingBox::default();
        let mut s = GainSchedule::baseline(&ScheduleConfig::default(), &bx).unwrap();
        let mut d = BTreeMap::new();
        d.insert(CpIndex::new([5, 5]), 3.0);
        s.kp.apply_delta_mut(&d, None).unwrap();
        assert_eq!(s.gains([1.4, 2.0]), s.gains([1.0, 1.0]));
        assert_eq!(s.gains([-0.3, 0.5]), s.gains([0.0, 0.5]));
    }

    #[test]
    fn mismatched_domains_rejected() {
        let cfg = ScheduleConfig::default();
        let a = GainSchedule::baseline(&cfg, &OperatingBox::default()).unwrap();
        let other = OperatingBox { lo: [0.0, 0.0], hi: [2.0, 1.0] };
        let b = GainSchedule::baseline(&cfg, &other).unwrap();
        assert!(GainSchedule::new(a.kp, b.ki, OperatingBox::default()).is_err());
    }

    #[test]
    fn pi_examples() {
        let mut st = PiState::default();
        assert_eq!(st.step(0.0, (1.0, 1.0), 0.05, None).unwrap(), 0.0);

        let mut st = PiState::default();
        assert_eq!(st.step(0.5, (1.0, 0.0), 0.05, None).unwrap(), 0.5);

        let mut st = PiState::default();
        let mut u = 0.0;
        for _ in 0..3 {
            u = st.step(1.0, (0.0, 2.0), 0.05, None).unwrap();
        }
        assert!((st.integral - 0.15).abs() < 1e-15);
        assert!((u - 0.30).abs() < 1e-15);

        assert!(st.step(f64::INFINITY, (1.0, 1.0), 0.05, None).is_err());
    }

    #[test]
    fn reset_clears_memory() {
        let mut st = PiState::default();
        st.step(2.0, (1.0, 1.0), 0.05, None).unwrap();
        st.reset();
        assert_eq!(st.integral, 0.0);
        let copy = st;
        st.reset();
        assert_eq!(st, copy);
        assert_eq!(st.step(0.0, (3.0, 3.0), 0.05, None).unwrap(), 0.0);
    }

    #[test]
    fn integral_clamp() {
        let mut st = PiState::default();
        for _ in 0..100 {
            st.step(1.0, (0.0, 1.0), 0.05, Some(0.5)).unwrap();
        }
        assert_eq!(st.integral, 0.5);
    }

    #[test]
    fn linear_in_error_sequence() {
        let es = [0.3, -0.1, 0.7, 0.2];
        let run = |scale: f64| {
            let mut st = PiState::default();
            es.iter()
                .map(|&e| st.step(scale * e, (1.3, 0.7), 0.05, None).unwrap())
                .collect::<Vec<_>>()
        };
        let base = run(1.0);
        let scaled = run(2.5);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }
}
