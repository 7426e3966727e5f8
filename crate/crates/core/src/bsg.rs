//! N-dimensional tensor-product B-spline geometries.
//!
//! A [`BsgGeometry`] maps a point of its parameter box to a scalar by
//! weighting a dense grid of control points with products of univariate
//! B-spline basis functions. Indexing is 0-based throughout: axis `n` with
//! degree `d` and `M` control points carries `M + d + 1` knots and its valid
//! parameter domain is `[knots[d], knots[M]]`.
//!
//! Spans are half-open, `knots[s] <= v < knots[s + 1]`, except that the last
//! non-empty span is closed so the domain's right endpoint evaluates to the
//! left limit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Format version written into serialized geometries.
pub const GEOMETRY_VERSION: u32 = 1;

/// Nondecreasing knot sequence of one axis together with its degree.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::invalid("knots must be finite"));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("knots must be nondecreasing"));
        }
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::invalid(format!(
                "degree {degree} needs at least {} knots (cp_count >= degree + 1), got {}",
                2 * (degree + 1),
                knots.len()
            )));
        }
        let kv = KnotVector { knots, degree };
        let (lo, hi) = kv.domain();
        if hi <= lo {
            return Err(Error::invalid("knot vector has an empty parameter domain"));
        }
        Ok(kv)
    }

    /// Clamped knot vector (end multiplicity `degree + 1`) with uniform
    /// interior spacing over `[lo, hi]`.
    pub fn clamped_uniform(degree: usize, cp_count: usize, lo: f64, hi: f64) -> Result<Self> {
        if cp_count < degree + 1 {
            return Err(Error::invalid(format!(
                "cp_count {cp_count} must be at least degree + 1 = {}",
                degree + 1
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::invalid(format!("invalid axis range [{lo}, {hi}]")));
        }
        let spans = cp_count - degree;
        let mut knots = Vec::with_capacity(cp_count + degree + 1);
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        for j in 1..spans {
            knots.push(lo + (hi - lo) * j as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        KnotVector::new(knots, degree)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn cp_count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Valid parameter interval `[knots[d], knots[M]]`.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.cp_count()])
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.domain();
        v >= lo && v <= hi
    }

    /// Span index `s` in `[d, M - 1]` with `knots[s] <= v < knots[s + 1]`,
    /// closed on the right for the last non-empty span. `v` must be in the
    /// domain.
    pub fn find_span(&self, v: f64) -> usize {
        let d = self.degree;
        let m = self.cp_count();
        let (lo, hi) = self.domain();
        if v >= hi {
            // last non-empty span
            let mut s = m - 1;
            while s > d && self.knots[s] >= self.knots[s + 1] {
                s -= 1;
            }
            return s;
        }
        if v <= lo {
            let mut s = d;
            while s < m - 1 && self.knots[s + 1] <= v {
                s += 1;
            }
            return s;
        }
        // binary search on [d, m)
        let (mut low, mut high) = (d, m);
        while high - low > 1 {
            let mid = (low + high) / 2;
            if v < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
        }
        low
    }

    /// The `d + 1` nonzero basis values at `v` inside span `span`, ordered
    /// from basis index `span - d` to `span`.
    pub fn nonzero_basis(&self, span: usize, v: f64, out: &mut Vec<f64>) {
        let d = self.degree;
        let k = &self.knots;
        out.clear();
        out.resize(d + 1, 0.0);
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        out[0] = 1.0;
        for j in 1..=d {
            left[j] = v - k[span + 1 - j];
            right[j] = k[span + j] - v;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    fn check_domain(&self, axis: usize, v: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if v.is_nan() || v < lo || v > hi {
            return Err(Error::Domain {
                axis,
                value: v,
                lo,
                hi,
            });
        }
        Ok(())
    }
}

/// Basis function `b_{i,d}(v)` by the Cox-de Boor recursion over the raw knot
/// sequence of `kv` (the degree stored in `kv` is ignored). Terms with a zero
/// knot difference contribute 0.
pub fn basis(i: usize, d: usize, v: f64, kv: &KnotVector) -> Result<f64> {
    let k = kv.knots();
    if k.len() < d + 2 || i > k.len() - d - 2 {
        return Err(Error::invalid(format!(
            "basis index {i} out of range for degree {d} over {} knots",
            k.len()
        )));
    }
    if v.is_nan() || v < k[0] || v > k[k.len() - 1] {
        return Err(Error::invalid(format!(
            "parameter {v} outside knot range [{}, {}]",
            k[0],
            k[k.len() - 1]
        )));
    }
    Ok(cox_de_boor(i, d, v, k))
}

fn cox_de_boor(i: usize, d: usize, v: f64, k: &[f64]) -> f64 {
    if d == 0 {
        let last = k[k.len() - 1];
        if k[i] <= v && v < k[i + 1] {
            return 1.0;
        }
        // closure of the last non-empty span at the right end
        if v == last && k[i] < k[i + 1] && k[i + 1] == last {
            return 1.0;
        }
        return 0.0;
    }
    let mut acc = 0.0;
    let den_l = k[i + d] - k[i];
    if den_l != 0.0 {
        acc += (v - k[i]) / den_l * cox_de_boor(i, d - 1, v, k);
    }
    let den_r = k[i + d + 1] - k[i + 1];
    if den_r != 0.0 {
        acc += (k[i + d + 1] - v) / den_r * cox_de_boor(i + 1, d - 1, v, k);
    }
    acc
}

/// Multi-index of one control point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CpIndex(pub Vec<usize>);

impl CpIndex {
    pub fn new(idx: impl Into<Vec<usize>>) -> Self {
        CpIndex(idx.into())
    }
}

impl From<[usize; 2]> for CpIndex {
    fn from(v: [usize; 2]) -> Self {
        CpIndex(v.to_vec())
    }
}

/// Closed axis-aligned box in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperRect {
    pub intervals: Vec<(f64, f64)>,
}

impl HyperRect {
    pub fn contains(&self, coords: &[f64]) -> bool {
        coords
            .iter()
            .zip(&self.intervals)
            .all(|(&c, &(lo, hi))| c >= lo && c <= hi)
    }
}

/// Bounds applied to every updated control point after an additive change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampBox {
    pub min: f64,
    pub max: f64,
}

/// Tensor-product B-spline geometry with a dense control-point grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BsgGeometry {
    axes: Vec<KnotVector>,
    shape: Vec<usize>,
    cps: Vec<f64>,
}

impl BsgGeometry {
    /// `cps` is the row-major flattening of the grid (last axis fastest).
    pub fn new(axes: Vec<KnotVector>, cps: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("geometry needs at least one axis"));
        }
        let shape: Vec<usize> = axes.iter().map(KnotVector::cp_count).collect();
        let expected: usize = shape.iter().product();
        if cps.len() != expected {
            return Err(Error::invalid(format!(
                "control-point grid has {} values, shape {:?} needs {expected}",
                cps.len(),
                shape
            )));
        }
        if cps.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("control points must be finite"));
        }
        Ok(BsgGeometry { axes, shape, cps })
    }

    /// Geometry with every control point equal to `value`.
    pub fn constant(axes: Vec<KnotVector>, value: f64) -> Result<Self> {
        let n: usize = axes.iter().map(KnotVector::cp_count).product();
        BsgGeometry::new(axes, vec![value; n])
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[KnotVector] {
        &self.axes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cps(&self) -> &[f64] {
        &self.cps
    }

    pub fn domain(&self) -> Vec<(f64, f64)> {
        self.axes.iter().map(KnotVector::domain).collect()
    }

    fn check_index(&self, idx: &CpIndex) -> Result<()> {
        if idx.0.len() != self.dims()
            || idx.0.iter().zip(&self.shape).any(|(&i, &m)| i >= m)
        {
            return Err(Error::invalid(format!(
                "control-point index {:?} invalid for grid shape {:?}",
                idx.0, self.shape
            )));
        }
        Ok(())
    }

    pub fn flat_index(&self, idx: &CpIndex) -> Result<usize> {
        self.check_index(idx)?;
        Ok(idx
            .0
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &m)| acc * m + i))
    }

    pub fn cp(&self, idx: &CpIndex) -> Result<f64> {
        Ok(self.cps[self.flat_index(idx)?])
    }

    /// Evaluates the tensor-product sum at `coords`. Coordinates outside the
    /// parameter domain are rejected.
    pub fn evaluate(&self, coords: &[f64]) -> Result<f64> {
        if coords.len() != self.dims() {
            return Err(Error::invalid(format!(
                "expected {} coordinates, got {}",
                self.dims(),
                coords.len()
            )));
        }
        let mut spans = Vec::with_capacity(self.dims());
        let mut bases = Vec::with_capacity(self.dims());
        for (n, (kv, &v)) in self.axes.iter().zip(coords).enumerate() {
            kv.check_domain(n, v)?;
            let s = kv.find_span(v);
            let mut b = Vec::new();
            kv.nonzero_basis(s, v, &mut b);
            spans.push(s);
            bases.push(b);
        }
        Ok(self.contract(&spans, &bases))
    }

    // Sum over the (d_0+1) x ... x (d_{N-1}+1) block of active control points.
    // Accumulated relative to the first active control point, which relies on
    // the partition of unity and reproduces constant grids exactly.
    fn contract(&self, spans: &[usize], bases: &[Vec<f64>]) -> f64 {
        let n = self.dims();
        let mut counter = vec![0usize; n];
        let anchor = {
            let flat = (0..n).fold(0, |acc, ax| acc * self.shape[ax] + spans[ax] - self.axes[ax].degree());
            self.cps[flat]
        };
        let mut total = 0.0;
        loop {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for ax in 0..n {
                let d = self.axes[ax].degree();
                let i = spans[ax] - d + counter[ax];
                weight *= bases[ax][counter[ax]];
                flat = flat * self.shape[ax] + i;
            }
            total += weight * (self.cps[flat] - anchor);

            let mut ax = n;
            loop {
                if ax == 0 {
                    return anchor + total;
                }
                ax -= 1;
                counter[ax] += 1;
                if counter[ax] <= self.axes[ax].degree() {
                    break;
                }
                counter[ax] = 0;
            }
        }
    }

    /// Average of `d` consecutive interior knots for every control point of
    /// `axis`. For degree 0 the span midpoint is used.
    pub fn greville_abscissae(&self, axis: usize) -> Result<Vec<f64>> {
        let kv = self
            .axes
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("axis {axis} out of range for {} dims", self.dims())))?;
        Ok(greville(kv))
    }

    /// Region of parameter space influenced by control point `idx`.
    pub fn local_support(&self, idx: &CpIndex) -> Result<HyperRect> {
        self.check_index(idx)?;
        let intervals = self
            .axes
            .iter()
            .zip(&idx.0)
            .map(|(kv, &i)| (kv.knots()[i], kv.knots()[i + kv.degree() + 1]))
            .collect();
        Ok(HyperRect { intervals })
    }

    /// Returns a copy with `p[idx] += delta` for every listed index, each
    /// updated value optionally clamped into `clamp`.
    pub fn apply_delta(&self, deltas: &BTreeMap<CpIndex, f64>, clamp: Option<ClampBox>) -> Result<Self> {
        let mut out = self.clone();
        out.apply_delta_mut(deltas, clamp)?;
        Ok(out)
    }

    pub fn apply_delta_mut(&mut self, deltas: &BTreeMap<CpIndex, f64>, clamp: Option<ClampBox>) -> Result<()> {
        // validate everything before mutating
        let mut updates = Vec::with_capacity(deltas.len());
        for (idx, &delta) in deltas {
            if !delta.is_finite() {
                return Err(Error::invalid(format!("non-finite delta {delta} for {:?}", idx.0)));
            }
            updates.push((self.flat_index(idx)?, delta));
        }
        for (flat, delta) in updates {
            let mut p = self.cps[flat] + delta;
            if let Some(b) = clamp {
                p = p.clamp(b.min, b.max);
            }
            self.cps[flat] = p;
        }
        Ok(())
    }

    /// Samples the geometry on a uniform grid (both endpoints included).
    pub fn export_lut(&self, samples_per_axis: &[usize]) -> Result<LutTable> {
        if samples_per_axis.len() != self.dims() {
            return Err(Error::invalid(format!(
                "expected {} sample counts, got {}",
                self.dims(),
                samples_per_axis.len()
            )));
        }
        if let Some(&n) = samples_per_axis.iter().find(|&&n| n < 2) {
            return Err(Error::invalid(format!("sample count {n} must be at least 2")));
        }
        let axis_samples: Vec<Vec<f64>> = self
            .axes
            .iter()
            .zip(samples_per_axis)
            .map(|(kv, &n)| uniform_samples(kv.domain(), n))
            .collect();
        let total: usize = samples_per_axis.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut counter = vec![0usize; self.dims()];
        let mut coords = vec![0.0; self.dims()];
        for _ in 0..total {
            for (ax, &c) in counter.iter().enumerate() {
                coords[ax] = axis_samples[ax][c];
            }
            values.push(self.evaluate(&coords)?);
            for ax in (0..self.dims()).rev() {
                counter[ax] += 1;
                if counter[ax] < samples_per_axis[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        Ok(LutTable { axis_samples, values })
    }

    pub fn to_doc(&self) -> GeometryDoc {
        GeometryDoc {
            version: GEOMETRY_VERSION,
            dims: self.dims(),
            degrees: self.axes.iter().map(KnotVector::degree).collect(),
            knots: self.axes.iter().map(|kv| kv.knots().to_vec()).collect(),
            cps: self.cps.clone(),
        }
    }

    pub fn from_doc(doc: GeometryDoc) -> Result<Self> {
        if doc.version != GEOMETRY_VERSION {
            return Err(Error::Version {
                found: doc.version,
                supported: GEOMETRY_VERSION,
            });
        }
        if doc.degrees.len() != doc.dims || doc.knots.len() != doc.dims {
            return Err(Error::invalid(format!(
                "geometry declares {} dims but has {} degrees and {} knot vectors",
                doc.dims,
                doc.degrees.len(),
                doc.knots.len()
            )));
        }
        let axes = doc
            .knots
            .into_iter()
            .zip(doc.degrees)
            .map(|(k, d)| KnotVector::new(k, d))
            .collect::<Result<Vec<_>>>()?;
        BsgGeometry::new(axes, doc.cps)
    }
}

fn greville(kv: &KnotVector) -> Vec<f64> {
    let d = kv.degree();
    let k = kv.knots();
    (0..kv.cp_count())
        .map(|i| {
            if d == 0 {
                0.5 * (k[i] + k[i + 1])
            } else {
                k[i + 1..=i + d].iter().sum::<f64>() / d as f64
            }
        })
        .collect()
}

fn uniform_samples((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    s[n - 1] = hi;
    s
}

/// Serialized form of a geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDoc {
    pub version: u32,
    pub dims: usize,
    pub degrees: Vec<usize>,
    pub knots: Vec<Vec<f64>>,
    pub cps: Vec<f64>,
}

impl Serialize for BsgGeometry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BsgGeometry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = GeometryDoc::deserialize(d)?;
        BsgGeometry::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

/// Geometry sampled on a rectilinear grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LutTable {
    pub axis_samples: Vec<Vec<f64>>,
    /// Row-major over `axis_samples` (last axis fastest).
    pub values: Vec<f64>,
}

impl LutTable {
    pub fn shape(&self) -> Vec<usize> {
        self.axis_samples.iter().map(Vec::len).collect()
    }

    pub fn to_csv(&self) -> String {
        let dims = self.axis_samples.len();
        let mut out = String::new();
        for ax in 0..dims {
            let _ = write!(out, "axis{ax},");
        }
        out.push_str("value\n");
        let shape = self.shape();
        let mut counter = vec![0usize; dims];
        for v in &self.values {
            for (ax, &c) in counter.iter().enumerate() {
                let _ = write!(out, "{},", self.axis_samples[ax][c]);
            }
            let _ = writeln!(out, "{v}");
            for ax in (0..dims).rev() {
                counter[ax] += 1;
                if counter[ax] < shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        out
    }
}
