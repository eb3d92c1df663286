//! Finite representations of closed convex sets and linear subspaces.
//!
//! Sets are symbolic descriptions (atom polytopes, restricted norm balls,
//! linear images, Minkowski sums, subspaces), not point clouds. Support
//! functions, gauges, and exposed faces dispatch on the variant and use
//! closed forms where they exist; everything else falls back to a
//! projection-based membership oracle combined with bisection.
//!
//! `+INF` is a first-class sentinel in support/gauge results: the support
//! function of a subspace is an indicator and must be representable.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{GdError, Result};

/// Relative tolerance for deciding that a component lies outside a span.
pub const SPAN_TOL: f64 = 1e-10;
/// Residual tolerance for iterative membership tests.
pub const MEMBER_TOL: f64 = 1e-9;
/// Iteration cap for iterative projections and membership tests.
pub const MAX_PROJ_ITERS: usize = 10_000;
/// Default relative eigenvalue cutoff for restricted pseudoinverses.
pub const PINV_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Subspaces
// ---------------------------------------------------------------------------

/// A linear subspace of `R^p` held as a column-orthonormal basis (p x k).
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: DMatrix<f64>,
    ambient: usize,
}

impl Subspace {
    pub fn full(p: usize) -> Self {
        Subspace {
            basis: DMatrix::identity(p, p),
            ambient: p,
        }
    }

    pub fn zero(p: usize) -> Self {
        Subspace {
            basis: DMatrix::zeros(p, 0),
            ambient: p,
        }
    }

    /// Wraps an existing basis, checking column orthonormality to 1e-12.
    pub fn from_orthonormal_basis(basis: DMatrix<f64>) -> Result<Self> {
        let k = basis.ncols();
        let gram = basis.transpose() * &basis;
        let mut err = 0.0_f64;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram[(i, j)] - target).abs());
            }
        }
        if err > 1e-12 {
            return Err(GdError::InvalidSet(format!(
                "basis not orthonormal (max Gram deviation {err:.3e})"
            )));
        }
        let ambient = basis.nrows();
        Ok(Subspace { basis, ambient })
    }

    /// Orthonormal basis of the column span of `gen` via SVD.
    pub fn from_span(gen: &DMatrix<f64>) -> Self {
        let ambient = gen.nrows();
        if gen.ncols() == 0 {
            return Subspace::zero(ambient);
        }
        let svd = gen.clone().svd(true, false);
        let u = svd.u.expect("svd requested u");
        let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
        if smax <= 0.0 {
            return Subspace::zero(ambient);
        }
        let cols: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > SPAN_TOL * smax)
            .collect();
        let mut basis = DMatrix::zeros(ambient, cols.len());
        for (j, &i) in cols.iter().enumerate() {
            basis.set_column(j, &u.column(i));
        }
        Subspace { basis, ambient }
    }

    /// The coordinate subspace spanned by `{e_i : i in coords}`.
    pub fn from_coords(p: usize, coords: impl IntoIterator<Item = usize>) -> Self {
        let idx: BTreeSet<usize> = coords.into_iter().collect();
        let mut basis = DMatrix::zeros(p, idx.len());
        for (j, &i) in idx.iter().enumerate() {
            basis[(i, j)] = 1.0;
        }
        Subspace { basis, ambient: p }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn is_full(&self) -> bool {
        self.dim() == self.ambient
    }

    /// Orthogonal projection of `x` onto the subspace.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.ambient, x.len())?;
        if self.dim() == 0 {
            return Ok(DVector::zeros(self.ambient));
        }
        Ok(&self.basis * (self.basis.transpose() * x))
    }

    /// Coordinates of `x` in the basis of the subspace.
    pub fn coefficients(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.ambient, x.len())?;
        Ok(self.basis.transpose() * x)
    }

    pub fn from_coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), w.len())?;
        Ok(&self.basis * w)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self.project(x) {
            Ok(px) => (x - px).norm() <= tol * (1.0 + x.norm()),
            Err(_) => false,
        }
    }

    /// Orthogonal complement.
    pub fn complement(&self) -> Subspace {
        let p = self.ambient;
        let mut proj = DMatrix::identity(p, p);
        if self.dim() > 0 {
            proj -= &self.basis * self.basis.transpose();
        }
        Subspace::from_span(&proj)
    }

    /// Intersection of two subspaces via singular-value analysis of the
    /// stacked complement projectors. Singular values below `1e-10 x largest`
    /// define the intersection.
    pub fn intersect(&self, other: &Subspace) -> Result<Subspace> {
        check_dim(self.ambient, other.ambient)?;
        let p = self.ambient;
        let cu = self.complement();
        let cw = other.complement();
        let mut stacked = DMatrix::zeros(2 * p, p);
        if cu.dim() > 0 {
            let pu = cu.basis() * cu.basis().transpose();
            stacked.view_mut((0, 0), (p, p)).copy_from(&pu);
        }
        if cw.dim() > 0 {
            let pw = cw.basis() * cw.basis().transpose();
            stacked.view_mut((p, 0), (p, p)).copy_from(&pw);
        }
        let svd = stacked.svd(false, true);
        let v_t = svd.v_t.expect("svd requested v_t");
        let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
        if smax <= 0.0 {
            // Both complements are trivial: the intersection is everything.
            return Ok(Subspace::full(p));
        }
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] < 1e-10 * smax)
            .collect();
        let mut gens = DMatrix::zeros(p, keep.len());
        for (j, &i) in keep.iter().enumerate() {
            gens.set_column(j, &v_t.row(i).transpose());
        }
        Ok(Subspace::from_span(&gens))
    }

    /// If every basis column is a signed coordinate vector, returns the
    /// coordinate index carried by each column.
    pub fn coordinate_alignment(&self) -> Option<Vec<usize>> {
        let mut coords = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let col = self.basis.column(j);
            let mut hit = None;
            for i in 0..self.ambient {
                let v = col[i].abs();
                if v > 1e-12 {
                    if (v - 1.0).abs() > 1e-12 || hit.is_some() {
                        return None;
                    }
                    hit = Some(i);
                }
            }
            coords.push(hit?);
        }
        Some(coords)
    }
}

// ---------------------------------------------------------------------------
// Convex sets
// ---------------------------------------------------------------------------

/// Symbolic description of a closed convex set.
#[derive(Debug, Clone)]
pub enum ConvexSet {
    /// Convex hull of a finite list of atoms.
    AtomPolytope { atoms: Vec<DVector<f64>> },
    /// `{x : |x|_inf <= 1, x_i = 0 for i not in coords}`.
    CoordBox { dim: usize, coords: BTreeSet<usize> },
    /// `{x : |x_g|_2 <= 1 for all g, x_g = 0 for g not active}` over a
    /// partition of the coordinates into groups.
    GroupBall {
        dim: usize,
        groups: Vec<Vec<usize>>,
        active: BTreeSet<usize>,
    },
    /// `D^T C = {D^T u : u in C}`; the support function is `h_C(D x)`.
    LinearImage {
        map: DMatrix<f64>,
        base: Box<ConvexSet>,
    },
    /// Minkowski sum of the parts.
    MinkowskiSum { parts: Vec<ConvexSet> },
    /// A subspace viewed as an (unbounded) convex set.
    SubspaceSet { space: Subspace },
    /// `offset + base`; used to represent exposed faces.
    Shifted {
        offset: DVector<f64>,
        base: Box<ConvexSet>,
    },
}

impl ConvexSet {
    pub fn atom_polytope(atoms: Vec<DVector<f64>>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(GdError::InvalidSet("atom polytope needs >= 1 atom".into()));
        }
        let d = atoms[0].len();
        for a in &atoms {
            check_dim(d, a.len())?;
        }
        Ok(ConvexSet::AtomPolytope { atoms })
    }

    pub fn coord_box(dim: usize, coords: impl IntoIterator<Item = usize>) -> Result<Self> {
        let coords: BTreeSet<usize> = coords.into_iter().collect();
        if let Some(&max) = coords.iter().next_back() {
            if max >= dim {
                return Err(GdError::InvalidSet(format!(
                    "coordinate {max} outside universe of dimension {dim}"
                )));
            }
        }
        Ok(ConvexSet::CoordBox { dim, coords })
    }

    pub fn group_ball(
        dim: usize,
        groups: Vec<Vec<usize>>,
        active: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let active: BTreeSet<usize> = active.into_iter().collect();
        let mut seen = vec![false; dim];
        for g in &groups {
            for &i in g {
                if i >= dim {
                    return Err(GdError::InvalidSet(format!(
                        "group index {i} outside universe of dimension {dim}"
                    )));
                }
                if seen[i] {
                    return Err(GdError::InvalidSet(format!(
                        "groups overlap at coordinate {i}; duplicate overlapping parameters upstream"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(GdError::InvalidSet(
                "groups must partition the coordinate universe".into(),
            ));
        }
        if let Some(&g) = active.iter().next_back() {
            if g >= groups.len() {
                return Err(GdError::InvalidSet(format!(
                    "active group {g} out of range ({} groups)",
                    groups.len()
                )));
            }
        }
        Ok(ConvexSet::GroupBall {
            dim,
            groups,
            active,
        })
    }

    pub fn linear_image(map: DMatrix<f64>, base: ConvexSet) -> Result<Self> {
        check_dim(map.nrows(), base.dim())?;
        Ok(ConvexSet::LinearImage {
            map,
            base: Box::new(base),
        })
    }

    pub fn minkowski_sum(parts: Vec<ConvexSet>) -> Result<Self> {
        if parts.is_empty() {
            return Err(GdError::InvalidSet("empty Minkowski sum".into()));
        }
        let d = parts[0].dim();
        for part in &parts {
            check_dim(d, part.dim())?;
        }
        Ok(ConvexSet::MinkowskiSum { parts })
    }

    pub fn subspace_set(space: Subspace) -> Self {
        ConvexSet::SubspaceSet { space }
    }

    pub fn shifted(offset: DVector<f64>, base: ConvexSet) -> Result<Self> {
        check_dim(offset.len(), base.dim())?;
        Ok(ConvexSet::Shifted {
            offset,
            base: Box::new(base),
        })
    }

    /// Singleton `{point}`.
    pub fn point(point: DVector<f64>) -> Self {
        ConvexSet::AtomPolytope {
            atoms: vec![point],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::AtomPolytope { atoms } => atoms[0].len(),
            ConvexSet::CoordBox { dim, .. } => *dim,
            ConvexSet::GroupBall { dim, .. } => *dim,
            ConvexSet::LinearImage { map, .. } => map.ncols(),
            ConvexSet::MinkowskiSum { parts } => parts[0].dim(),
            ConvexSet::SubspaceSet { space } => space.ambient_dim(),
            ConvexSet::Shifted { offset, .. } => offset.len(),
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            ConvexSet::AtomPolytope { .. }
            | ConvexSet::CoordBox { .. }
            | ConvexSet::GroupBall { .. } => true,
            ConvexSet::LinearImage { base, .. } => base.is_bounded(),
            ConvexSet::MinkowskiSum { parts } => parts.iter().all(|p| p.is_bounded()),
            ConvexSet::SubspaceSet { space } => space.dim() == 0,
            ConvexSet::Shifted { base, .. } => base.is_bounded(),
        }
    }

    /// Support function `h(x) = sup { y^T x : y in set }`.
    ///
    /// Unbounded suprema return `f64::INFINITY`; `is_infinite()` on the
    /// result is the unbounded flag.
    pub fn support(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            ConvexSet::AtomPolytope { atoms } => atoms
                .iter()
                .map(|a| a.dot(x))
                .fold(f64::NEG_INFINITY, f64::max),
            ConvexSet::CoordBox { coords, .. } => coords.iter().map(|&i| x[i].abs()).sum(),
            ConvexSet::GroupBall { groups, active, .. } => active
                .iter()
                .map(|&g| group_norm(x, &groups[g]))
                .sum(),
            ConvexSet::LinearImage { map, base } => base.support(&(map * x))?,
            ConvexSet::MinkowskiSum { parts } => {
                let mut total = 0.0;
                for part in parts {
                    total += part.support(x)?;
                }
                total
            }
            ConvexSet::SubspaceSet { space } => {
                let px = space.project(x)?;
                if px.norm() <= SPAN_TOL * (1.0 + x.norm()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexSet::Shifted { offset, base } => offset.dot(x) + base.support(x)?,
        })
    }

    /// Gauge (Minkowski functional) `inf { t >= 0 : z in t * set }`.
    ///
    /// Returns `f64::INFINITY` when `z` lies outside the cone spanned by the
    /// set. Errors when the set does not contain the origin.
    pub fn gauge(&self, z: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let scale = 1.0 + z.amax();
        match self {
            ConvexSet::CoordBox { coords, .. } => {
                let mut m = 0.0_f64;
                for i in 0..z.len() {
                    if coords.contains(&i) {
                        m = m.max(z[i].abs());
                    } else if z[i].abs() > SPAN_TOL * scale {
                        return Ok(f64::INFINITY);
                    }
                }
                Ok(m)
            }
            ConvexSet::GroupBall { groups, active, .. } => {
                let mut m = 0.0_f64;
                for (g, idx) in groups.iter().enumerate() {
                    let n = group_norm(z, idx);
                    if active.contains(&g) {
                        m = m.max(n);
                    } else if n > SPAN_TOL * scale {
                        return Ok(f64::INFINITY);
                    }
                }
                Ok(m)
            }
            ConvexSet::SubspaceSet { space } => {
                if space.contains(z, SPAN_TOL) {
                    Ok(0.0)
                } else {
                    Ok(f64::INFINITY)
                }
            }
            _ => self.gauge_by_bisection(z),
        }
    }

    /// Generic gauge: geometric bracketing plus bisection on `t`, with
    /// membership in `t * set` decided by the projection oracle.
    fn gauge_by_bisection(&self, z: &DVector<f64>) -> Result<f64> {
        let znorm = z.norm();
        if znorm <= 1e-14 {
            return Ok(0.0);
        }
        let origin = DVector::zeros(self.dim());
        if !self.contains_point(&origin, MEMBER_TOL)? {
            return Err(GdError::InvalidSet(
                "gauge requires a set containing the origin".into(),
            ));
        }
        // Bracket: grow t until z is a member of t * set.
        let mut hi = 1.0_f64;
        let mut lo = 0.0_f64;
        let mut found = false;
        while hi <= 1e9 {
            if self.contains_scaled(z, hi)? {
                found = true;
                break;
            }
            lo = hi;
            hi *= 4.0;
        }
        if !found {
            return Ok(f64::INFINITY);
        }
        for _ in 0..100 {
            if hi - lo <= 1e-10 * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.contains_scaled(z, mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Membership of `z` in `t * set`.
    fn contains_scaled(&self, z: &DVector<f64>, t: f64) -> Result<bool> {
        if t <= 0.0 {
            return Ok(z.norm() <= MEMBER_TOL);
        }
        let zs = z / t;
        self.contains_point(&zs, MEMBER_TOL)
    }

    pub fn contains_point(&self, y: &DVector<f64>, tol: f64) -> Result<bool> {
        let py = self.project_onto(y)?;
        Ok((y - py).norm() <= tol * (1.0 + y.norm()))
    }

    /// Euclidean projection of `y` onto the set. Closed form per variant
    /// where available, iterative otherwise (cap `MAX_PROJ_ITERS`).
    pub fn project_onto(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), y.len())?;
        match self {
            ConvexSet::CoordBox { dim, coords } => {
                let mut out = DVector::zeros(*dim);
                for &i in coords {
                    out[i] = y[i].clamp(-1.0, 1.0);
                }
                Ok(out)
            }
            ConvexSet::GroupBall {
                dim,
                groups,
                active,
            } => {
                let mut out = DVector::zeros(*dim);
                for &g in active {
                    let idx = &groups[g];
                    let n = group_norm(y, idx);
                    let s = if n > 1.0 { 1.0 / n } else { 1.0 };
                    for &i in idx {
                        out[i] = s * y[i];
                    }
                }
                Ok(out)
            }
            ConvexSet::SubspaceSet { space } => space.project(y),
            ConvexSet::Shifted { offset, base } => {
                Ok(offset + base.project_onto(&(y - offset))?)
            }
            ConvexSet::AtomPolytope { atoms } => Ok(project_polytope(atoms, y)),
            ConvexSet::MinkowskiSum { parts } => self.project_minkowski(parts, y),
            ConvexSet::LinearImage { map, base } => self.project_linear_image(map, base, y),
        }
    }

    /// Alternating minimization over the summands: cycle
    /// `y_j <- proj_j(y - sum_{k != j} y_k)` until the residual stalls.
    fn project_minkowski(&self, parts: &[ConvexSet], y: &DVector<f64>) -> Result<DVector<f64>> {
        let mut pieces: Vec<DVector<f64>> =
            parts.iter().map(|_| DVector::zeros(y.len())).collect();
        let mut total = DVector::zeros(y.len());
        let mut last = f64::INFINITY;
        for _ in 0..MAX_PROJ_ITERS {
            for (j, part) in parts.iter().enumerate() {
                let target = y - (&total - &pieces[j]);
                let new_piece = part.project_onto(&target)?;
                total += &new_piece - &pieces[j];
                pieces[j] = new_piece;
            }
            let res = (y - &total).norm();
            if res <= 0.25 * MEMBER_TOL * (1.0 + y.norm()) || last - res <= 1e-15 * (1.0 + res) {
                break;
            }
            last = res;
        }
        Ok(total)
    }

    /// Projection onto `D^T C`: minimize `|D^T u - y|` over `u in C` by
    /// projected gradient in the pre-image space.
    fn project_linear_image(
        &self,
        map: &DMatrix<f64>,
        base: &ConvexSet,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let dt = map.transpose();
        let lipschitz = {
            // power iteration for |D|_2^2
            let mut v = DVector::from_element(map.ncols(), 1.0 / (map.ncols() as f64).sqrt());
            let mut l = 1.0_f64;
            for _ in 0..50 {
                let w = &dt * (map * &v);
                let n = w.norm();
                if n <= 1e-30 {
                    break;
                }
                l = n;
                v = w / n;
            }
            l.max(1e-12)
        };
        let step = 1.0 / lipschitz;
        let mut u = base.project_onto(&(map * y))?;
        let mut last = f64::INFINITY;
        for _ in 0..MAX_PROJ_ITERS {
            let img = &dt * &u;
            let grad = map * (&img - y);
            u = base.project_onto(&(&u - step * grad))?;
            let res = (&dt * &u - y).norm();
            if res <= 0.25 * MEMBER_TOL * (1.0 + y.norm()) || last - res <= 1e-16 * (1.0 + res) {
                break;
            }
            last = res;
        }
        Ok(&dt * u)
    }

    /// Exposed face `{y in set : y^T x = h(x)}`.
    pub fn face(&self, x: &DVector<f64>) -> Result<ConvexSet> {
        check_dim(self.dim(), x.len())?;
        if !self.is_bounded() {
            return Err(GdError::UnsupportedVariant {
                op: "face",
                detail: "exposed faces of unbounded sets are not represented".into(),
            });
        }
        let pin_tol = 1e-12 * (1.0 + x.amax());
        match self {
            ConvexSet::AtomPolytope { atoms } => {
                let h = self.support(x)?;
                let tol = 1e-9 * (1.0 + h.abs());
                let maximizers: Vec<DVector<f64>> = atoms
                    .iter()
                    .filter(|a| a.dot(x) >= h - tol)
                    .cloned()
                    .collect();
                Ok(ConvexSet::AtomPolytope { atoms: maximizers })
            }
            ConvexSet::CoordBox { dim, coords } => {
                let mut offset = DVector::zeros(*dim);
                let mut free = BTreeSet::new();
                for &i in coords {
                    if x[i].abs() > pin_tol {
                        offset[i] = x[i].signum();
                    } else {
                        free.insert(i);
                    }
                }
                Ok(wrap_face(offset, ConvexSet::CoordBox {
                    dim: *dim,
                    coords: free,
                }))
            }
            ConvexSet::GroupBall {
                dim,
                groups,
                active,
            } => {
                let mut offset = DVector::zeros(*dim);
                let mut free = BTreeSet::new();
                for &g in active {
                    let idx = &groups[g];
                    let n = group_norm(x, idx);
                    if n > pin_tol {
                        for &i in idx {
                            offset[i] = x[i] / n;
                        }
                    } else {
                        free.insert(g);
                    }
                }
                Ok(wrap_face(offset, ConvexSet::GroupBall {
                    dim: *dim,
                    groups: groups.clone(),
                    active: free,
                }))
            }
            ConvexSet::LinearImage { map, base } => {
                let inner = base.face(&(map * x))?;
                if let Some(pt) = inner.as_singleton() {
                    return Ok(ConvexSet::point(map.transpose() * pt));
                }
                Ok(ConvexSet::LinearImage {
                    map: map.clone(),
                    base: Box::new(inner),
                })
            }
            ConvexSet::MinkowskiSum { parts } => {
                let faces = parts
                    .iter()
                    .map(|p| p.face(x))
                    .collect::<Result<Vec<_>>>()?;
                if faces.iter().all(|f| f.as_singleton().is_some()) {
                    let mut pt = DVector::zeros(self.dim());
                    for f in &faces {
                        pt += f.as_singleton().unwrap();
                    }
                    return Ok(ConvexSet::point(pt));
                }
                Ok(ConvexSet::MinkowskiSum { parts: faces })
            }
            ConvexSet::Shifted { offset, base } => {
                let inner = base.face(x)?;
                if let Some(pt) = inner.as_singleton() {
                    return Ok(ConvexSet::point(offset + pt));
                }
                Ok(ConvexSet::Shifted {
                    offset: offset.clone(),
                    base: Box::new(inner),
                })
            }
            ConvexSet::SubspaceSet { .. } => unreachable!("unbounded handled above"),
        }
    }

    /// `Some(point)` when the set is a singleton.
    pub fn as_singleton(&self) -> Option<DVector<f64>> {
        match self {
            ConvexSet::AtomPolytope { atoms } => {
                let first = &atoms[0];
                let scale = 1.0 + first.amax();
                for a in atoms.iter().skip(1) {
                    if (a - first).amax() > 1e-12 * scale {
                        return None;
                    }
                }
                Some(first.clone())
            }
            ConvexSet::CoordBox { dim, coords } => {
                coords.is_empty().then(|| DVector::zeros(*dim))
            }
            ConvexSet::GroupBall { dim, active, .. } => {
                active.is_empty().then(|| DVector::zeros(*dim))
            }
            ConvexSet::LinearImage { map, base } => {
                base.as_singleton().map(|pt| map.transpose() * pt)
            }
            ConvexSet::MinkowskiSum { parts } => {
                let mut total = DVector::zeros(self.dim());
                for p in parts {
                    total += p.as_singleton()?;
                }
                Some(total)
            }
            ConvexSet::SubspaceSet { space } => {
                (space.dim() == 0).then(|| DVector::zeros(space.ambient_dim()))
            }
            ConvexSet::Shifted { offset, base } => base.as_singleton().map(|pt| offset + pt),
        }
    }

    /// Extreme points, when finitely many and at most `cap`.
    pub fn extreme_points(&self, cap: usize) -> Option<Vec<DVector<f64>>> {
        match self {
            ConvexSet::AtomPolytope { atoms } => {
                (atoms.len() <= cap).then(|| atoms.clone())
            }
            ConvexSet::CoordBox { dim, coords } => {
                let k = coords.len();
                if k == 0 {
                    return Some(vec![DVector::zeros(*dim)]);
                }
                if k > 30 || (1usize << k) > cap {
                    return None;
                }
                let idx: Vec<usize> = coords.iter().copied().collect();
                let mut out = Vec::with_capacity(1 << k);
                for mask in 0..(1usize << k) {
                    let mut v = DVector::zeros(*dim);
                    for (b, &i) in idx.iter().enumerate() {
                        v[i] = if mask & (1 << b) != 0 { 1.0 } else { -1.0 };
                    }
                    out.push(v);
                }
                Some(out)
            }
            ConvexSet::GroupBall { groups, active, .. } => {
                // Extreme points of a product of balls form a continuum
                // unless every active group is one-dimensional.
                if active.iter().any(|&g| groups[g].len() > 1) {
                    return None;
                }
                let coords: BTreeSet<usize> =
                    active.iter().map(|&g| groups[g][0]).collect();
                ConvexSet::CoordBox {
                    dim: self.dim(),
                    coords,
                }
                .extreme_points(cap)
            }
            ConvexSet::LinearImage { map, base } => {
                let pts = base.extreme_points(cap)?;
                Some(pts.into_iter().map(|p| map.transpose() * p).collect())
            }
            ConvexSet::MinkowskiSum { parts } => {
                let mut acc: Vec<DVector<f64>> = vec![DVector::zeros(self.dim())];
                for part in parts {
                    let pts = part.extreme_points(cap)?;
                    if acc.len() * pts.len() > cap {
                        return None;
                    }
                    let mut next = Vec::with_capacity(acc.len() * pts.len());
                    for a in &acc {
                        for p in &pts {
                            next.push(a + p);
                        }
                    }
                    acc = next;
                }
                Some(acc)
            }
            ConvexSet::SubspaceSet { space } => {
                (space.dim() == 0).then(|| vec![DVector::zeros(space.ambient_dim())])
            }
            ConvexSet::Shifted { offset, base } => {
                let pts = base.extreme_points(cap)?;
                Some(pts.into_iter().map(|p| offset + p).collect())
            }
        }
    }

    /// Columns spanning the linear span of the set.
    pub fn span_generators(&self) -> DMatrix<f64> {
        let p = self.dim();
        match self {
            ConvexSet::AtomPolytope { atoms } => {
                let mut m = DMatrix::zeros(p, atoms.len());
                for (j, a) in atoms.iter().enumerate() {
                    m.set_column(j, a);
                }
                m
            }
            ConvexSet::CoordBox { dim, coords } => {
                coordinate_columns(*dim, coords.iter().copied())
            }
            ConvexSet::GroupBall { dim, groups, active } => {
                let coords = active.iter().flat_map(|&g| groups[g].iter().copied());
                coordinate_columns(*dim, coords)
            }
            ConvexSet::LinearImage { map, base } => map.transpose() * base.span_generators(),
            ConvexSet::MinkowskiSum { parts } => {
                let cols: usize = parts.iter().map(|c| c.span_generators().ncols()).sum();
                let mut m = DMatrix::zeros(p, cols);
                let mut at = 0;
                for part in parts {
                    let g = part.span_generators();
                    m.view_mut((0, at), (p, g.ncols())).copy_from(&g);
                    at += g.ncols();
                }
                m
            }
            ConvexSet::SubspaceSet { space } => space.basis().clone(),
            ConvexSet::Shifted { offset, base } => {
                let g = base.span_generators();
                let mut m = DMatrix::zeros(p, g.ncols() + 1);
                m.set_column(0, offset);
                m.view_mut((0, 1), (p, g.ncols())).copy_from(&g);
                m
            }
        }
    }

    pub fn span(&self) -> Subspace {
        Subspace::from_span(&self.span_generators())
    }
}

fn wrap_face(offset: DVector<f64>, residual: ConvexSet) -> ConvexSet {
    if let Some(pt) = residual.as_singleton() {
        return ConvexSet::point(offset + pt);
    }
    if offset.amax() == 0.0 {
        return residual;
    }
    ConvexSet::Shifted {
        offset,
        base: Box::new(residual),
    }
}

fn coordinate_columns(dim: usize, coords: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let idx: Vec<usize> = coords.collect();
    let mut m = DMatrix::zeros(dim, idx.len());
    for (j, &i) in idx.iter().enumerate() {
        m[(i, j)] = 1.0;
    }
    m
}

pub(crate) fn group_norm(x: &DVector<f64>, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(GdError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Projection onto `conv(atoms)` by away-step Frank-Wolfe with exact line
/// search; linearly convergent on polytopes.
fn project_polytope(atoms: &[DVector<f64>], y: &DVector<f64>) -> DVector<f64> {
    if atoms.len() == 1 {
        return atoms[0].clone();
    }
    let start = (0..atoms.len())
        .min_by(|&a, &b| {
            let da = (&atoms[a] - y).norm_squared();
            let db = (&atoms[b] - y).norm_squared();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let mut weights = vec![0.0_f64; atoms.len()];
    weights[start] = 1.0;
    let mut x = atoms[start].clone();
    let scale = 1.0 + y.norm_squared();
    for _ in 0..5_000 {
        let grad = &x - y;
        let fw = (0..atoms.len())
            .min_by(|&a, &b| {
                grad.dot(&atoms[a]).partial_cmp(&grad.dot(&atoms[b])).unwrap()
            })
            .unwrap();
        let gap = grad.dot(&x) - grad.dot(&atoms[fw]);
        if gap <= 1e-16 * scale {
            break;
        }
        let away = (0..atoms.len())
            .filter(|&i| weights[i] > 0.0)
            .max_by(|&a, &b| {
                grad.dot(&atoms[a]).partial_cmp(&grad.dot(&atoms[b])).unwrap()
            })
            .unwrap();
        let away_gap = grad.dot(&atoms[away]) - grad.dot(&x);
        if gap >= away_gap || weights[away] >= 1.0 - 1e-15 {
            // Frank-Wolfe step toward the minimizing atom.
            let d = &atoms[fw] - &x;
            let denom = d.norm_squared();
            if denom <= 1e-30 {
                break;
            }
            let gamma = (-grad.dot(&d) / denom).clamp(0.0, 1.0);
            for w in weights.iter_mut() {
                *w *= 1.0 - gamma;
            }
            weights[fw] += gamma;
            x += gamma * d;
        } else {
            // Away step from the worst active atom:
            // x+ = (1+gamma) x - gamma a_away, so w_i <- (1+gamma) w_i and
            // w_away <- (1+gamma) w_away - gamma.
            let d = &x - &atoms[away];
            let denom = d.norm_squared();
            if denom <= 1e-30 {
                break;
            }
            let gamma_max = weights[away] / (1.0 - weights[away]);
            let gamma = (-grad.dot(&d) / denom).clamp(0.0, gamma_max);
            for w in weights.iter_mut() {
                *w *= 1.0 + gamma;
            }
            weights[away] -= gamma;
            x += gamma * &d;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Restricted pseudoinverse
// ---------------------------------------------------------------------------

/// Precomputed factorization of `(P_M Q P_M)^dagger` in the basis of `M`.
#[derive(Debug, Clone)]
pub struct RestrictedInverse {
    basis: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    inv_eigs: DVector<f64>,
    pub not_psd_on_m: bool,
    pub rank: usize,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl RestrictedInverse {
    /// `tol` is relative to the largest eigenvalue of the restriction.
    pub fn new(q: &DMatrix<f64>, m: &Subspace, tol: f64) -> Result<Self> {
        check_symmetric(q)?;
        check_dim(q.nrows(), m.ambient_dim())?;
        let k = m.dim();
        let basis = m.basis().clone();
        if k == 0 {
            return Ok(RestrictedInverse {
                basis,
                eigvecs: DMatrix::zeros(0, 0),
                inv_eigs: DVector::zeros(0),
                not_psd_on_m: false,
                rank: 0,
                min_eig: 0.0,
                max_eig: 0.0,
            });
        }
        let g = basis.transpose() * q * &basis;
        // Symmetrize to guard against roundoff before the eigensolver.
        let g = (&g + g.transpose()) * 0.5;
        let eig = g.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        let cutoff = tol * max_eig.abs().max(1e-300);
        let mut inv = DVector::zeros(k);
        let mut rank = 0;
        let mut not_psd = false;
        for i in 0..k {
            let v = eig.eigenvalues[i];
            if v > cutoff {
                inv[i] = 1.0 / v;
                rank += 1;
            } else if v < -cutoff {
                not_psd = true;
            }
        }
        Ok(RestrictedInverse {
            basis,
            eigvecs: eig.eigenvectors,
            inv_eigs: inv,
            not_psd_on_m: not_psd,
            rank,
            min_eig,
            max_eig,
        })
    }

    /// `(P_M Q P_M)^dagger x`; the result lies in `M`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.basis.ncols() == 0 {
            return DVector::zeros(self.basis.nrows());
        }
        let w = self.basis.transpose() * x;
        let mut c = self.eigvecs.transpose() * w;
        for i in 0..c.len() {
            c[i] *= self.inv_eigs[i];
        }
        &self.basis * (&self.eigvecs * c)
    }
}

/// One-shot form of [`RestrictedInverse`]: `(P_M Q P_M)^dagger x` plus the
/// not-PSD-on-M warning flag.
pub fn restricted_pinv_apply(
    q: &DMatrix<f64>,
    m: &Subspace,
    x: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, bool)> {
    let inv = RestrictedInverse::new(q, m, tol)?;
    check_dim(q.nrows(), x.len())?;
    Ok((inv.apply(x), inv.not_psd_on_m))
}

pub(crate) fn check_symmetric(q: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != q.ncols() {
        return Err(GdError::Precondition(format!(
            "matrix is {}x{}, expected square",
            q.nrows(),
            q.ncols()
        )));
    }
    let scale = 1.0 + q.amax();
    for i in 0..q.nrows() {
        for j in (i + 1)..q.ncols() {
            if (q[(i, j)] - q[(j, i)]).abs() > 1e-10 * scale {
                return Err(GdError::Precondition(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}
