//! Rectangular tensor-product grids, scalar fields on them, multilinear
//! interpolation and finite-difference derivatives.
//!
//! Storage is row-major: the last dimension varies fastest. Periodic
//! dimensions cover `[lower, upper)` without the duplicate endpoint node.

use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidSpec(String),
    #[error("field has {got} values, grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("point {point:?} lies outside the grid in dimension {dim}")]
    OutOfDomain { point: Vec<f64>, dim: usize },
    #[error("implicit set has no interior node")]
    DegenerateSet,
    #[error("signed distance field is non-negative on the grid boundary at node {0}")]
    SdfTouchesBoundary(usize),
    #[error("grid mismatch between fields")]
    GridMismatch,
    #[error("field file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("field file i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for GridError {
    fn from(e: std::io::Error) -> Self {
        GridError::Io(e.to_string())
    }
}

/// Axis-aligned box grid over the safe set.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
    periodic: Vec<bool>,
    strides: Vec<usize>,
}

impl GridSpec {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
        periodic: Vec<bool>,
    ) -> Result<Self, GridError> {
        let n = lower.len();
        if n == 0 {
            return Err(GridError::InvalidSpec("zero dimensions".into()));
        }
        if upper.len() != n || counts.len() != n || periodic.len() != n {
            return Err(GridError::InvalidSpec("dimension vectors differ in length".into()));
        }
        for i in 0..n {
            if !(lower[i].is_finite() && upper[i].is_finite()) || upper[i] <= lower[i] {
                return Err(GridError::InvalidSpec(format!(
                    "dimension {i}: need lower < upper, got [{}, {}]",
                    lower[i], upper[i]
                )));
            }
            if counts[i] < 3 {
                return Err(GridError::InvalidSpec(format!(
                    "dimension {i}: need at least 3 nodes, got {}",
                    counts[i]
                )));
            }
        }
        let mut strides = vec![1; n];
        for i in (0..n - 1).rev() {
            strides[i] = strides[i + 1] * counts[i + 1];
        }
        let spec = GridSpec { lower, upper, counts, periodic, strides };
        for i in 0..n {
            let h = spec.spacing(i);
            if !(h.is_finite() && h > 0.0) {
                return Err(GridError::InvalidSpec(format!("dimension {i}: degenerate spacing")));
            }
        }
        Ok(spec)
    }

    /// Non-periodic grid with the given node counts.
    pub fn boxed(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self, GridError> {
        Self::new(lower.to_vec(), upper.to_vec(), counts.to_vec(), vec![false; lower.len()])
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn is_periodic(&self, dim: usize) -> bool {
        self.periodic[dim]
    }

    pub fn stride(&self, dim: usize) -> usize {
        self.strides[dim]
    }

    pub fn spacing(&self, dim: usize) -> f64 {
        let width = self.upper[dim] - self.lower[dim];
        if self.periodic[dim] {
            width / self.counts[dim] as f64
        } else {
            width / (self.counts[dim] - 1) as f64
        }
    }

    pub fn coord(&self, dim: usize, k: usize) -> f64 {
        self.lower[dim] + k as f64 * self.spacing(dim)
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = flat / self.strides[i];
            flat %= self.strides[i];
        }
    }

    pub fn node_coords(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for (i, slot) in out.iter_mut().enumerate() {
            let k = rem / self.strides[i];
            rem %= self.strides[i];
            *slot = self.coord(i, k);
        }
    }

    pub fn node_point(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dims()];
        self.node_coords(flat, &mut x);
        x
    }

    /// Index of the node `delta` steps away along `dim`, or `None` when that
    /// leaves a non-periodic dimension.
    pub fn shift(&self, flat: usize, dim: usize, delta: isize) -> Option<usize> {
        let n = self.counts[dim] as isize;
        let k = ((flat / self.strides[dim]) % self.counts[dim]) as isize;
        let mut j = k + delta;
        if self.periodic[dim] {
            j = j.rem_euclid(n);
        } else if j < 0 || j >= n {
            return None;
        }
        Some((flat as isize + (j - k) * self.strides[dim] as isize) as usize)
    }

    /// True when the node sits on the outer layer of a non-periodic dimension.
    pub fn on_box_boundary(&self, flat: usize) -> bool {
        (0..self.dims()).any(|i| {
            if self.periodic[i] {
                return false;
            }
            let k = (flat / self.strides[i]) % self.counts[i];
            k == 0 || k + 1 == self.counts[i]
        })
    }

    /// Wraps periodic coordinates into `[lower, upper)`.
    pub fn wrap(&self, x: &mut [f64]) {
        for i in 0..self.dims() {
            if self.periodic[i] {
                let w = self.upper[i] - self.lower[i];
                x[i] = self.lower[i] + (x[i] - self.lower[i]).rem_euclid(w);
            }
        }
    }

    /// True when `x` lies in the closed bounding box (periodic dims always do).
    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dims()).all(|i| self.periodic[i] || (x[i] >= self.lower[i] && x[i] <= self.upper[i]))
    }

    /// Grid with the same box and a different resolution.
    pub fn with_counts(&self, counts: &[usize]) -> Result<Self, GridError> {
        Self::new(self.lower.clone(), self.upper.clone(), counts.to_vec(), self.periodic.clone())
    }

    /// Per-dimension cell location of `x`: lower node index and weight in [0, 1].
    fn locate(&self, x: &[f64], cells: &mut [(usize, usize, f64)]) -> Result<(), GridError> {
        for i in 0..self.dims() {
            let h = self.spacing(i);
            let n = self.counts[i];
            let mut s = (x[i] - self.lower[i]) / h;
            if !s.is_finite() {
                return Err(GridError::OutOfDomain { point: x.to_vec(), dim: i });
            }
            let r = s.round();
            if (s - r).abs() < 1e-9 {
                s = r;
            }
            if self.periodic[i] {
                s = s.rem_euclid(n as f64);
                let k0 = (s.floor() as usize).min(n - 1);
                let w = s - k0 as f64;
                cells[i] = (k0, (k0 + 1) % n, w);
            } else {
                if s < 0.0 || s > (n - 1) as f64 {
                    return Err(GridError::OutOfDomain { point: x.to_vec(), dim: i });
                }
                let k0 = (s.floor() as usize).min(n - 2);
                cells[i] = (k0, k0 + 1, s - k0 as f64);
            }
        }
        Ok(())
    }

    /// Visits the `2^n` corners of the cell containing `x` with their
    /// multilinear weights. Corners with zero weight are skipped.
    pub fn for_each_corner(
        &self,
        x: &[f64],
        mut visit: impl FnMut(usize, f64),
    ) -> Result<(), GridError> {
        let n = self.dims();
        let mut cells = vec![(0usize, 0usize, 0.0f64); n];
        self.locate(x, &mut cells)?;
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            let mut flat = 0;
            for (i, &(k0, k1, t)) in cells.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    w *= t;
                    flat += k1 * self.strides[i];
                } else {
                    w *= 1.0 - t;
                    flat += k0 * self.strides[i];
                }
            }
            if w != 0.0 {
                visit(flat, w);
            }
        }
        Ok(())
    }
}

/// Node values of a scalar function on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    spec: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != spec.len() {
            return Err(GridError::LengthMismatch { expected: spec.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(ScalarField { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.len();
        ScalarField { spec, values: vec![0.0; n] }
    }

    pub fn constant(spec: GridSpec, c: f64) -> Self {
        let n = spec.len();
        ScalarField { spec, values: vec![c; n] }
    }

    /// Samples `f` at every node. Non-finite samples are an error.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&[f64]) -> f64) -> Result<Self, GridError> {
        let mut x = vec![0.0; spec.dims()];
        let values = (0..spec.len())
            .map(|k| {
                spec.node_coords(k, &mut x);
                f(&x)
            })
            .collect();
        Self::new(spec, values)
    }

    pub(crate) fn from_raw(spec: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), spec.len());
        ScalarField { spec, values }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for callers that construct or perturb fields in place.
    /// Writing non-finite values breaks the field invariant.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        ScalarField::from_raw(self.spec.clone(), self.values.iter().map(|v| a * v).collect())
    }

    /// `a * self + b * other` on a shared grid.
    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> Result<ScalarField, GridError> {
        if self.spec != other.spec {
            return Err(GridError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(ScalarField::from_raw(self.spec.clone(), values))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Supremum norm: the largest absolute node value.
pub fn sup_norm(field: &ScalarField) -> f64 {
    field.values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Sup-norm distance between two fields on the same grid.
pub fn sup_distance(a: &ScalarField, b: &ScalarField) -> Result<f64, GridError> {
    if a.spec != b.spec {
        return Err(GridError::GridMismatch);
    }
    Ok(a.values.iter().zip(&b.values).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// Multilinear interpolation; exact at nodes.
pub fn interpolate(field: &ScalarField, x: &[f64]) -> Result<f64, GridError> {
    let mut acc = 0.0;
    field.spec.for_each_corner(x, |k, w| acc += w * field.values[k])?;
    Ok(acc)
}

/// Nodal first-difference stencil along `dim`: (minus node, plus node, divisor).
/// Central in the interior, one-sided on the outer layer.
fn first_stencil(spec: &GridSpec, k: usize, dim: usize) -> (usize, usize, f64) {
    let h = spec.spacing(dim);
    match (spec.shift(k, dim, -1), spec.shift(k, dim, 1)) {
        (Some(m), Some(p)) => (m, p, 2.0 * h),
        (None, Some(p)) => (k, p, h),
        (Some(m), None) => (m, k, h),
        (None, None) => unreachable!("grid dimension with a single node"),
    }
}

fn nodal_first(field: &ScalarField, k: usize, dim: usize) -> f64 {
    let (m, p, d) = first_stencil(&field.spec, k, dim);
    (field.values[p] - field.values[m]) / d
}

fn nodal_second(field: &ScalarField, k: usize, i: usize, j: usize) -> f64 {
    let spec = &field.spec;
    let v = &field.values;
    if i == j {
        let h = spec.spacing(i);
        // shift the three-point stencil inward on the outer layer
        let c = match (spec.shift(k, i, -1), spec.shift(k, i, 1)) {
            (Some(_), Some(_)) => k,
            (None, Some(p)) => p,
            (Some(m), None) => m,
            (None, None) => unreachable!(),
        };
        let m = spec.shift(c, i, -1).unwrap();
        let p = spec.shift(c, i, 1).unwrap();
        (v[p] - 2.0 * v[c] + v[m]) / (h * h)
    } else {
        let (mi, pi, di) = first_stencil(spec, k, i);
        let (_, _, dj) = first_stencil(spec, k, j);
        let pp = first_stencil(spec, pi, j);
        let mp = first_stencil(spec, mi, j);
        // the j-stencil shape is identical at pi and mi, so divisors agree
        let upper = v[pp.1] - v[pp.0];
        let lower = v[mp.1] - v[mp.0];
        (upper - lower) / (di * dj)
    }
}

/// Gradient from central nodal differences, multilinearly interpolated to `x`.
pub fn gradient_at(field: &ScalarField, x: &[f64]) -> Result<Vec<f64>, GridError> {
    let n = field.spec.dims();
    let mut g = vec![0.0; n];
    field.spec.for_each_corner(x, |k, w| {
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += w * nodal_first(field, k, i);
        }
    })?;
    Ok(g)
}

/// Symmetric Hessian (row-major `n x n`) from nodal second differences,
/// multilinearly interpolated to `x`.
pub fn hessian_at(field: &ScalarField, x: &[f64]) -> Result<Vec<f64>, GridError> {
    let n = field.spec.dims();
    let mut hess = vec![0.0; n * n];
    field.spec.for_each_corner(x, |k, w| {
        for i in 0..n {
            for j in i..n {
                hess[i * n + j] += w * nodal_second(field, k, i, j);
            }
        }
    })?;
    for i in 0..n {
        for j in 0..i {
            hess[i * n + j] = hess[j * n + i];
        }
    }
    Ok(hess)
}

/// Safe-set description carried on the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum ImplicitSet {
    /// The grid box itself.
    Box,
    /// Box intersected with `{sdf <= 0}`; the sdf is positive outside the set.
    SignedDistance(ScalarField),
}

impl ImplicitSet {
    /// The zero level set must stay off the faces of every dimension the
    /// field varies along; an obstacle extruded along a dimension may cross
    /// that dimension's faces.
    pub fn signed_distance(sdf: ScalarField) -> Result<Self, GridError> {
        let spec = sdf.spec();
        let mut multi = vec![0usize; spec.dims()];
        let varies: Vec<bool> = (0..spec.dims())
            .map(|i| {
                (0..spec.len()).any(|k| spec.shift(k, i, 1).is_some_and(|j| sdf.values()[j] != sdf.values()[k]))
            })
            .collect();
        for k in 0..spec.len() {
            if sdf.values()[k] < 0.0 {
                continue;
            }
            spec.multi_index(k, &mut multi);
            let on_face = (0..spec.dims()).any(|i| {
                varies[i] && !spec.is_periodic(i) && (multi[i] == 0 || multi[i] + 1 == spec.counts()[i])
            });
            if on_face {
                return Err(GridError::SdfTouchesBoundary(k));
            }
        }
        Ok(ImplicitSet::SignedDistance(sdf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    Boundary,
    Exterior,
}

/// Partition of grid nodes into interior, boundary and exterior.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeClassification {
    pub kinds: Vec<NodeKind>,
}

impl NodeClassification {
    pub fn count(&self, kind: NodeKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }
}

pub fn classify_nodes(spec: &GridSpec, set: &ImplicitSet) -> Result<NodeClassification, GridError> {
    let n = spec.len();
    let mut kinds = vec![NodeKind::Interior; n];
    let exterior: Vec<bool> = match set {
        ImplicitSet::Box => vec![false; n],
        ImplicitSet::SignedDistance(sdf) => {
            if sdf.spec() != spec {
                return Err(GridError::GridMismatch);
            }
            sdf.values().iter().map(|&v| v > 0.0).collect()
        }
    };
    for k in 0..n {
        kinds[k] = if exterior[k] {
            NodeKind::Exterior
        } else if spec.on_box_boundary(k)
            || (0..spec.dims()).any(|i| {
                [-1, 1].iter().any(|&d| spec.shift(k, i, d).is_some_and(|j| exterior[j]))
            })
        {
            NodeKind::Boundary
        } else {
            NodeKind::Interior
        };
    }
    let classes = NodeClassification { kinds };
    if classes.count(NodeKind::Interior) == 0 {
        return Err(GridError::DegenerateSet);
    }
    Ok(classes)
}

/// Writes a field in the `.fld` text format. Values use the shortest
/// representation that parses back to the same bits.
pub fn write_fld<W: Write>(field: &ScalarField, mut out: W) -> Result<(), GridError> {
    let spec = field.spec();
    writeln!(out, "dims {}", spec.dims())?;
    for i in 0..spec.dims() {
        writeln!(
            out,
            "{:e} {:e} {} {}",
            spec.lower[i],
            spec.upper[i],
            spec.counts[i],
            u8::from(spec.periodic[i])
        )?;
    }
    for v in &field.values {
        writeln!(out, "{v:e}")?;
    }
    Ok(())
}

pub fn read_fld<R: BufRead>(input: R) -> Result<ScalarField, GridError> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), GridError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(GridError::Parse { line: i + 1, msg: e.to_string() }),
            None => Err(GridError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") }),
        }
    };
    let perr = |line: usize, msg: String| GridError::Parse { line, msg };

    let (ln, header) = next("dims header")?;
    let dims: usize = header
        .strip_prefix("dims ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| perr(ln, format!("expected `dims <n>`, got `{header}`")))?;
    let (mut lower, mut upper, mut counts, mut periodic) = (vec![], vec![], vec![], vec![]);
    for _ in 0..dims {
        let (ln, l) = next("dimension line")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(perr(ln, "expected `lower upper count periodic`".into()));
        }
        lower.push(parts[0].parse::<f64>().map_err(|e| perr(ln, e.to_string()))?);
        upper.push(parts[1].parse::<f64>().map_err(|e| perr(ln, e.to_string()))?);
        counts.push(parts[2].parse::<usize>().map_err(|e| perr(ln, e.to_string()))?);
        periodic.push(match parts[3] {
            "0" => false,
            "1" => true,
            other => return Err(perr(ln, format!("periodic flag must be 0 or 1, got `{other}`"))),
        });
    }
    let spec = GridSpec::new(lower, upper, counts, periodic)?;
    let mut values = Vec::with_capacity(spec.len());
    for _ in 0..spec.len() {
        let (ln, l) = next("value")?;
        values.push(l.trim().parse::<f64>().map_err(|e| perr(ln, e.to_string()))?);
    }
    if let Some((i, Ok(extra))) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(perr(i + 1, "trailing data after values".into()));
        }
    }
    ScalarField::new(spec, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_1d(n: usize) -> GridSpec {
        GridSpec::boxed(&[0.0], &[1.0], &[n]).unwrap()
    }

    #[test]
    fn sup_norm_examples() {
        let g = unit_1d(3);
        assert_eq!(sup_norm(&ScalarField::constant(g.clone(), 0.5)), 0.5);
        assert_eq!(sup_norm(&ScalarField::zeros(g.clone())), 0.0);
        let f = ScalarField::new(g, vec![-3.0, 1.0, 2.0]).unwrap();
        assert_eq!(sup_norm(&f), 3.0);
    }

    #[test]
    fn interpolation_examples() {
        let g = GridSpec::boxed(&[0.0], &[1.0], &[3]).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0]).unwrap();
        assert!((interpolate(&f, &[0.25]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(interpolate(&f, &[0.5]).unwrap(), 0.5);

        let g2 = GridSpec::boxed(&[0.0, 0.0], &[1.0, 1.0], &[3, 3]).unwrap();
        let f2 = ScalarField::from_fn(g2, |x| if x[0] > 0.25 { 1.0 } else { 0.0 }).unwrap();
        assert!((interpolate(&f2, &[0.25, 0.25]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interpolation_rejects_points_outside_box() {
        let f = ScalarField::zeros(unit_1d(5));
        assert!(matches!(interpolate(&f, &[1.5]), Err(GridError::OutOfDomain { dim: 0, .. })));
        assert!(matches!(gradient_at(&f, &[-0.1]), Err(GridError::OutOfDomain { .. })));
    }

    #[test]
    fn periodic_interpolation_wraps() {
        let g = GridSpec::new(vec![0.0], vec![4.0], vec![4], vec![true]).unwrap();
        assert_eq!(g.spacing(0), 1.0);
        let f = ScalarField::new(g, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        // between the last node (x=3) and the wrapped first node (x=4 == 0)
        assert!((interpolate(&f, &[3.5]).unwrap() - 1.5).abs() < 1e-15);
        assert!((interpolate(&f, &[-0.5]).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(interpolate(&f, &[5.0]).unwrap(), 1.0);
    }

    #[test]
    fn derivatives_of_linear_and_quadratic_fields() {
        let g = GridSpec::boxed(&[-1.0, -1.0], &[1.0, 1.0], &[21, 21]).unwrap();
        let lin = ScalarField::from_fn(g.clone(), |x| x[0]).unwrap();
        let x = [0.33, -0.41];
        let grad = gradient_at(&lin, &x).unwrap();
        assert!((grad[0] - 1.0).abs() < 1e-12 && grad[1].abs() < 1e-12);
        assert!(hessian_at(&lin, &x).unwrap().iter().all(|h| h.abs() < 1e-10));

        let quad = ScalarField::from_fn(g.clone(), |x| x[0] * x[0]).unwrap();
        let h = hessian_at(&quad, &x).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-10, "{h:?}");
        assert!(h[1].abs() < 1e-10 && h[3].abs() < 1e-10);

        let cross = ScalarField::from_fn(g, |x| x[0] * x[1]).unwrap();
        let h = hessian_at(&cross, &[0.95, -0.97]).unwrap();
        assert!((h[1] - 1.0).abs() < 1e-10 && (h[2] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gradient_of_sine_is_second_order_accurate() {
        let h = 0.1;
        let g = GridSpec::boxed(&[-1.0], &[1.0], &[21]).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0].sin()).unwrap();
        let d = gradient_at(&f, &[0.0]).unwrap()[0];
        assert!((d - 1.0).abs() <= 2.0 * h * h, "d = {d}");
    }

    #[test]
    fn classify_box_grid() {
        let g = GridSpec::boxed(&[0.0, 0.0], &[1.0, 1.0], &[5, 5]).unwrap();
        let c = classify_nodes(&g, &ImplicitSet::Box).unwrap();
        assert_eq!(c.count(NodeKind::Interior), 9);
        assert_eq!(c.count(NodeKind::Boundary), 16);
    }

    #[test]
    fn classify_disk_obstacle() {
        let g = GridSpec::boxed(&[-2.0, -2.0], &[2.0, 2.0], &[41, 41]).unwrap();
        let sdf = ScalarField::from_fn(g.clone(), |x| 1.0 - x[0].hypot(x[1])).unwrap();
        let set = ImplicitSet::signed_distance(sdf).unwrap();
        let c = classify_nodes(&g, &set).unwrap();
        let origin = g.flat_index(&[20, 20]);
        assert_eq!(c.kinds[origin], NodeKind::Exterior);
        let rim = g.flat_index(&[20, 30]);
        assert_eq!(c.kinds[rim], NodeKind::Boundary);
        assert_eq!(c.kinds[g.flat_index(&[5, 5])], NodeKind::Interior);
    }

    #[test]
    fn all_positive_sdf_is_degenerate() {
        let g = GridSpec::boxed(&[0.0], &[1.0], &[5]).unwrap();
        let sdf = ScalarField::constant(g.clone(), 1.0);
        assert_eq!(
            classify_nodes(&g, &ImplicitSet::SignedDistance(sdf)).unwrap_err(),
            GridError::DegenerateSet
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GridSpec::boxed(&[0.0], &[0.0], &[5]).is_err());
        assert!(GridSpec::boxed(&[0.0], &[1.0], &[2]).is_err());
        assert!(ScalarField::new(unit_1d(3), vec![0.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn fld_round_trip_is_byte_exact() {
        let g = GridSpec::new(vec![-1.0, -3.141592653589793], vec![1.0, 3.141592653589793], vec![4, 6], vec![false, true])
            .unwrap();
        let f = ScalarField::from_fn(g, |x| (x[0] * 7.3).sin() * x[1].exp() / 3.0).unwrap();
        let mut a = Vec::new();
        write_fld(&f, &mut a).unwrap();
        let back = read_fld(a.as_slice()).unwrap();
        assert_eq!(back, f);
        let mut b = Vec::new();
        write_fld(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fld_parse_errors_report_line() {
        let text = "dims 1\n0 1 3 0\n0.5\nbogus\n1\n";
        match read_fld(text.as_bytes()) {
            Err(GridError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
