//! Geometrically decomposable penalties `rho = h_A + h_I + h_{S-perp}`.
//!
//! `A` holds the structure the truth is allowed to use ("active"), `I` holds
//! the structure that deviations are penalized over ("inactive"), and `S`
//! constrains the estimate to a subspace. The model subspace
//! `M = span(I)-perp intersect S` is computed at construction and cached.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{GdError, Result};
use crate::geometry::{group_norm, ConvexSet, Subspace, SPAN_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Lasso,
    GroupLasso,
    Analysis,
    Hybrid,
    Custom,
}

/// Coordinate/group bookkeeping that enables closed-form dispatch.
#[derive(Debug, Clone)]
pub enum Units {
    Coords {
        active: BTreeSet<usize>,
        inactive: BTreeSet<usize>,
    },
    Groups {
        groups: Vec<Vec<usize>>,
        active: BTreeSet<usize>,
        inactive: BTreeSet<usize>,
    },
    Opaque,
}

impl Units {
    /// Number of active units (coordinates or groups).
    pub fn active_count(&self) -> Option<usize> {
        match self {
            Units::Coords { active, .. } => Some(active.len()),
            Units::Groups { active, .. } => Some(active.len()),
            Units::Opaque => None,
        }
    }
}

/// A geometrically decomposable penalty with its cached model subspace.
#[derive(Debug, Clone)]
pub struct Penalty {
    pub a: ConvexSet,
    pub i: ConvexSet,
    pub s: Subspace,
    m: Subspace,
    pub kind: PenaltyKind,
    pub units: Units,
    /// Analysis dictionary `D` (penalty is `rho_base(D theta)`).
    pub dict: Option<DMatrix<f64>>,
    /// Base penalty of an analysis construction.
    pub base: Option<Box<Penalty>>,
    /// Constituents of a hybrid penalty (each over `R^p`; self is over `R^{2p}`).
    pub parts: Option<Box<(Penalty, Penalty)>>,
}

impl Penalty {
    // -- constructors -------------------------------------------------------

    /// `|theta|_1` split component-wise: active coordinates go to `A`, the
    /// rest to `I`. No free coordinates, `S = R^p`.
    pub fn lasso(p: usize, active: impl IntoIterator<Item = usize>) -> Result<Penalty> {
        let active: BTreeSet<usize> = active.into_iter().collect();
        let free = BTreeSet::new();
        Penalty::lasso_with_free(p, active, free)
    }

    /// Lasso with explicitly unpenalized coordinates (outside `A + I`).
    pub fn lasso_with_free(
        p: usize,
        active: BTreeSet<usize>,
        free: BTreeSet<usize>,
    ) -> Result<Penalty> {
        if let Some(&mx) = active.iter().chain(free.iter()).max() {
            if mx >= p {
                return Err(GdError::InvalidPenalty(format!(
                    "coordinate {mx} outside dimension {p}"
                )));
            }
        }
        if !active.is_disjoint(&free) {
            return Err(GdError::InvalidPenalty(
                "active and free coordinates overlap".into(),
            ));
        }
        let inactive: BTreeSet<usize> = (0..p)
            .filter(|i| !active.contains(i) && !free.contains(i))
            .collect();
        let a = ConvexSet::coord_box(p, active.iter().copied())?;
        let i = ConvexSet::coord_box(p, inactive.iter().copied())?;
        let s = Subspace::full(p);
        let m = Subspace::from_coords(p, active.iter().chain(free.iter()).copied());
        Ok(Penalty {
            a,
            i,
            s,
            m,
            kind: PenaltyKind::Lasso,
            units: Units::Coords { active, inactive },
            dict: None,
            base: None,
            parts: None,
        })
    }

    /// `sum_g |theta_g|_2` over non-overlapping groups; overlapping groups
    /// must be duplicated upstream with equality constraints folded into `S`.
    pub fn group_lasso(
        groups: Vec<Vec<usize>>,
        active: impl IntoIterator<Item = usize>,
        s: Option<Subspace>,
    ) -> Result<Penalty> {
        let active: BTreeSet<usize> = active.into_iter().collect();
        Penalty::group_lasso_with_free(groups, active, BTreeSet::new(), s)
    }

    pub fn group_lasso_with_free(
        groups: Vec<Vec<usize>>,
        active: BTreeSet<usize>,
        free: BTreeSet<usize>,
        s: Option<Subspace>,
    ) -> Result<Penalty> {
        let p = groups.iter().map(|g| g.len()).sum::<usize>();
        if !active.is_disjoint(&free) {
            return Err(GdError::InvalidPenalty(
                "active and free groups overlap".into(),
            ));
        }
        let inactive: BTreeSet<usize> = (0..groups.len())
            .filter(|g| !active.contains(g) && !free.contains(g))
            .collect();
        let a = ConvexSet::group_ball(p, groups.clone(), active.iter().copied())?;
        let i = ConvexSet::group_ball(p, groups.clone(), inactive.iter().copied())?;
        let s = match s {
            Some(s) => {
                if s.ambient_dim() != p {
                    return Err(GdError::DimensionMismatch {
                        expected: p,
                        got: s.ambient_dim(),
                    });
                }
                s
            }
            None => Subspace::full(p),
        };
        let span_i_perp = Subspace::from_coords(
            p,
            active
                .iter()
                .chain(free.iter())
                .flat_map(|&g| groups[g].iter().copied()),
        );
        // Keep the group-block structure of the basis when S is itself
        // group-aligned; fall back to the generic intersection otherwise.
        let m = if s.is_full() {
            span_i_perp
        } else if let Some(cols) = group_aligned_columns(&s, &groups) {
            let keep: Vec<usize> = cols
                .iter()
                .enumerate()
                .filter(|(_, g)| active.contains(g) || free.contains(g))
                .map(|(j, _)| j)
                .collect();
            let mut basis = DMatrix::zeros(p, keep.len());
            for (jj, &j) in keep.iter().enumerate() {
                basis.set_column(jj, &s.basis().column(j));
            }
            Subspace::from_orthonormal_basis(basis)?
        } else {
            span_i_perp.intersect(&s)?
        };
        Ok(Penalty {
            a,
            i,
            s,
            m,
            kind: PenaltyKind::GroupLasso,
            units: Units::Groups {
                groups,
                active,
                inactive,
            },
            dict: None,
            base: None,
            parts: None,
        })
    }

    /// Analysis penalty `rho_base(D theta)`: the triple becomes
    /// `(D^T A, D^T I, {theta : D theta in S_base})`.
    pub fn analysis(dict: DMatrix<f64>, base: Penalty) -> Result<Penalty> {
        let m_rows = dict.nrows();
        let p = dict.ncols();
        if base.dim() != m_rows {
            return Err(GdError::DimensionMismatch {
                expected: m_rows,
                got: base.dim(),
            });
        }
        for r in 0..m_rows {
            if dict.row(r).norm() <= 1e-12 {
                return Err(GdError::InvalidPenalty(format!(
                    "dictionary row {r} is zero"
                )));
            }
        }
        let a = ConvexSet::linear_image(dict.clone(), base.a.clone())?;
        let i = ConvexSet::linear_image(dict.clone(), base.i.clone())?;
        let s = if base.s.is_full() {
            Subspace::full(p)
        } else {
            // {theta : D theta in S_base} = span(D^T basis(S_base-perp))-perp
            let s_perp = base.s.complement();
            let gens = dict.transpose() * s_perp.basis();
            Subspace::from_span(&gens).complement()
        };
        let m = i.span().complement().intersect(&s)?;
        Ok(Penalty {
            a,
            i,
            s,
            m,
            kind: PenaltyKind::Analysis,
            units: Units::Opaque,
            dict: Some(dict),
            base: Some(Box::new(base)),
            parts: None,
        })
    }

    /// Hybrid (infimal-convolution) penalty in the doubled-dimension form:
    /// the objective over `(theta_1, theta_2)` carries
    /// `rho_1(theta_1) + rho_2(theta_2)` with `A = A_1 x A_2` and so on.
    pub fn hybrid(first: Penalty, second: Penalty) -> Result<Penalty> {
        let p = first.dim();
        if second.dim() != p {
            return Err(GdError::DimensionMismatch {
                expected: p,
                got: second.dim(),
            });
        }
        let emb1 = embed_map(p, 2 * p, 0);
        let emb2 = embed_map(p, 2 * p, p);
        let a = ConvexSet::minkowski_sum(vec![
            ConvexSet::linear_image(emb1.clone(), first.a.clone())?,
            ConvexSet::linear_image(emb2.clone(), second.a.clone())?,
        ])?;
        let i = ConvexSet::minkowski_sum(vec![
            ConvexSet::linear_image(emb1, first.i.clone())?,
            ConvexSet::linear_image(emb2, second.i.clone())?,
        ])?;
        let s = block_diag_subspace(&first.s, &second.s)?;
        let m = block_diag_subspace(&first.m, &second.m)?;
        Ok(Penalty {
            a,
            i,
            s,
            m,
            kind: PenaltyKind::Hybrid,
            units: Units::Opaque,
            dict: None,
            base: None,
            parts: Some(Box::new((first, second))),
        })
    }

    /// A caller-designated triple. The caller decides which summands are
    /// active vs inactive; nothing is guessed.
    pub fn custom(a: ConvexSet, i: ConvexSet, s: Subspace) -> Result<Penalty> {
        let p = a.dim();
        if i.dim() != p || s.ambient_dim() != p {
            return Err(GdError::DimensionMismatch {
                expected: p,
                got: i.dim().max(s.ambient_dim()),
            });
        }
        if !a.is_bounded() || !i.is_bounded() {
            return Err(GdError::InvalidPenalty("A and I must be bounded".into()));
        }
        // 0 in relint(I): the gauge must be finite in both directions along
        // a basis of span(I).
        let span_i = i.span();
        for j in 0..span_i.dim() {
            let b: DVector<f64> = span_i.basis().column(j).into();
            for probe in [&b * 1e-3, &b * -1e-3] {
                if i.gauge(&probe)?.is_infinite() {
                    return Err(GdError::InvalidPenalty(
                        "origin is not in the relative interior of I".into(),
                    ));
                }
            }
        }
        let m = span_i.complement().intersect(&s)?;
        Ok(Penalty {
            a,
            i,
            s,
            m,
            kind: PenaltyKind::Custom,
            units: Units::Opaque,
            dict: None,
            base: None,
            parts: None,
        })
    }

    // -- queries -------------------------------------------------------------

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// `M = span(I)-perp intersect S`, cached at construction.
    pub fn model_subspace(&self) -> &Subspace {
        &self.m
    }

    /// `h_A(theta) + h_I(theta) + h_{S-perp}(theta)`; infinite iff
    /// `theta` leaves `S` (or the bounded parts' span, for +inf-free kinds).
    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(GdError::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let subspace_part = if self.s.contains(theta, SPAN_TOL) {
            0.0
        } else {
            f64::INFINITY
        };
        Ok(self.a.support(theta)? + self.i.support(theta)? + subspace_part)
    }

    /// Recompute the model subspace from parts and compare with the cache.
    pub fn verify_model_subspace(&self) -> Result<()> {
        let recomputed = self.i.span().complement().intersect(&self.s)?;
        let p = self.dim();
        let pc = projector(&self.m);
        let pr = projector(&recomputed);
        let mut err = 0.0_f64;
        for i in 0..p {
            for j in 0..p {
                err = err.max((pc[(i, j)] - pr[(i, j)]).abs());
            }
        }
        if err > 1e-10 {
            return Err(GdError::InvalidPenalty(format!(
                "cached model subspace disagrees with recomputation ({err:.3e})"
            )));
        }
        Ok(())
    }

    /// Proximal operator of `t * (h_A + h_I)` for separable kinds
    /// (`S = R^p`); hybrid penalties recurse block-wise.
    pub fn prox(&self, v: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(GdError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        if t < 0.0 {
            return Err(GdError::Precondition("prox step must be >= 0".into()));
        }
        if t == 0.0 {
            return Ok(v.clone());
        }
        match (&self.kind, &self.units) {
            (PenaltyKind::Lasso, Units::Coords { active, inactive }) => {
                let mut out = v.clone();
                for &i in active.iter().chain(inactive.iter()) {
                    out[i] = soft_threshold(v[i], t);
                }
                Ok(out)
            }
            (PenaltyKind::GroupLasso, Units::Groups {
                groups,
                active,
                inactive,
            }) => {
                if !self.s.is_full() {
                    return Err(GdError::UnsupportedVariant {
                        op: "prox",
                        detail: "group lasso with a subspace constraint is not separable".into(),
                    });
                }
                let mut out = v.clone();
                for &g in active.iter().chain(inactive.iter()) {
                    group_soft_threshold(&mut out, &groups[g], t);
                }
                Ok(out)
            }
            (PenaltyKind::Hybrid, _) => {
                let (first, second) = self.parts.as_deref().unwrap();
                let p = first.dim();
                let v1 = DVector::from_fn(p, |i, _| v[i]);
                let v2 = DVector::from_fn(p, |i, _| v[p + i]);
                let o1 = first.prox(&v1, t)?;
                let o2 = second.prox(&v2, t)?;
                let mut out = DVector::zeros(2 * p);
                for i in 0..p {
                    out[i] = o1[i];
                    out[p + i] = o2[i];
                }
                Ok(out)
            }
            _ => Err(GdError::UnsupportedVariant {
                op: "prox",
                detail: format!("{:?} has no separable closed form", self.kind),
            }),
        }
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn group_soft_threshold(v: &mut DVector<f64>, idx: &[usize], t: f64) {
    let n = group_norm(v, idx);
    if n <= t {
        for &i in idx {
            v[i] = 0.0;
        }
    } else {
        let s = 1.0 - t / n;
        for &i in idx {
            v[i] *= s;
        }
    }
}

fn projector(s: &Subspace) -> DMatrix<f64> {
    let p = s.ambient_dim();
    if s.dim() == 0 {
        DMatrix::zeros(p, p)
    } else {
        s.basis() * s.basis().transpose()
    }
}

/// `T` with `T theta = theta_block`: the linear-image map whose transpose
/// embeds `R^p` into the block starting at `offset` of `R^q`.
fn embed_map(p: usize, q: usize, offset: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, q);
    for i in 0..p {
        m[(i, offset + i)] = 1.0;
    }
    m
}

fn block_diag_subspace(first: &Subspace, second: &Subspace) -> Result<Subspace> {
    let p1 = first.ambient_dim();
    let p2 = second.ambient_dim();
    let k1 = first.dim();
    let k2 = second.dim();
    let mut basis = DMatrix::zeros(p1 + p2, k1 + k2);
    basis.view_mut((0, 0), (p1, k1)).copy_from(first.basis());
    basis.view_mut((p1, k1), (p2, k2)).copy_from(second.basis());
    Subspace::from_orthonormal_basis(basis)
}

/// When every basis column of `s` is supported inside a single group,
/// returns that group index per column.
pub fn group_aligned_columns(s: &Subspace, groups: &[Vec<usize>]) -> Option<Vec<usize>> {
    let p = s.ambient_dim();
    let mut coord_group = vec![usize::MAX; p];
    for (g, idx) in groups.iter().enumerate() {
        for &i in idx {
            coord_group[i] = g;
        }
    }
    let mut out = Vec::with_capacity(s.dim());
    for j in 0..s.dim() {
        let col = s.basis().column(j);
        let mut hit: Option<usize> = None;
        for i in 0..p {
            if col[i].abs() > 1e-12 {
                let g = coord_group[i];
                match hit {
                    None => hit = Some(g),
                    Some(h) if h == g => {}
                    _ => return None,
                }
            }
        }
        out.push(hit?);
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Estimand description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveUnits {
    Coords(BTreeSet<usize>),
    Groups(BTreeSet<usize>),
}

/// Description of the unknown parameter: dimension, optional synthetic truth,
/// and the active coordinate/group set.
#[derive(Debug, Clone)]
pub struct EstimandSpec {
    pub p: usize,
    pub theta_star: Option<DVector<f64>>,
    pub active: ActiveUnits,
}

impl EstimandSpec {
    pub fn with_coords(theta_star: DVector<f64>, active: BTreeSet<usize>) -> Result<Self> {
        let support: BTreeSet<usize> = (0..theta_star.len())
            .filter(|&i| theta_star[i].abs() > 1e-12)
            .collect();
        if support != active {
            return Err(GdError::Precondition(format!(
                "theta_star support {support:?} does not match declared active set {active:?}"
            )));
        }
        Ok(EstimandSpec {
            p: theta_star.len(),
            theta_star: Some(theta_star),
            active: ActiveUnits::Coords(active),
        })
    }

    pub fn with_groups(
        theta_star: DVector<f64>,
        groups: &[Vec<usize>],
        active: BTreeSet<usize>,
    ) -> Result<Self> {
        let support: BTreeSet<usize> = (0..groups.len())
            .filter(|&g| group_norm(&theta_star, &groups[g]) > 1e-12)
            .collect();
        if support != active {
            return Err(GdError::Precondition(format!(
                "theta_star group support {support:?} does not match declared active set {active:?}"
            )));
        }
        Ok(EstimandSpec {
            p: theta_star.len(),
            theta_star: Some(theta_star),
            active: ActiveUnits::Groups(active),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn lasso_value_splits_active_and_inactive() {
        let rho = Penalty::lasso(3, [0]).unwrap();
        let theta = vec(&[2.0, 0.0, 0.0]);
        assert!((rho.value(&theta).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(rho.i.support(&theta).unwrap(), 0.0);
    }

    #[test]
    fn group_lasso_value_sums_group_norms() {
        let rho = Penalty::group_lasso(vec![vec![0, 1], vec![2, 3]], [0], None).unwrap();
        let theta = vec(&[3.0, 4.0, 0.0, 0.0]);
        assert!((rho.value(&theta).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn analysis_value_is_base_value_of_d_theta() {
        // First-differences on 3 points.
        let d = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
        let base = Penalty::lasso(2, [0]).unwrap();
        let rho = Penalty::analysis(d.clone(), base.clone()).unwrap();
        let theta = vec(&[1.0, 1.0, 2.0]);
        assert!((rho.value(&theta).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let theta = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let lhs = rho.value(&theta).unwrap();
            let rhs = base.value(&(&d * &theta)).unwrap();
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }
    }

    #[test]
    fn value_is_infinite_off_the_constraint_subspace() {
        let s = Subspace::from_span(&DMatrix::from_column_slice(2, 1, &[1.0, 1.0]));
        let rho = Penalty::group_lasso(vec![vec![0], vec![1]], [0], Some(s)).unwrap();
        assert!(rho.value(&vec(&[1.0, -1.0])).unwrap().is_infinite());
        assert_eq!(rho.value(&DVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn lasso_value_equals_l1_norm_on_penalized_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rho = Penalty::lasso(6, [1, 4]).unwrap();
        for _ in 0..100 {
            let theta = DVector::from_fn(6, |_, _| rng.random_range(-3.0..3.0));
            let l1: f64 = theta.iter().map(|v: &f64| v.abs()).sum();
            assert!((rho.value(&theta).unwrap() - l1).abs() < 1e-10);
        }
    }

    #[test]
    fn model_subspace_examples() {
        let rho = Penalty::lasso(3, [0, 2]).unwrap();
        let m = rho.model_subspace();
        assert_eq!(m.dim(), 2);
        assert!(m.contains(&vec(&[1.0, 0.0, 0.0]), 1e-12));
        assert!(m.contains(&vec(&[0.0, 0.0, 1.0]), 1e-12));

        // Generalized lasso with D_I = (1, -1): M = nullspace = span{(1,1)}.
        let d = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let base = Penalty::lasso(1, []).unwrap();
        let rho = Penalty::analysis(d, base).unwrap();
        let m = rho.model_subspace();
        assert_eq!(m.dim(), 1);
        assert!(m.contains(&vec(&[1.0, 1.0]), 1e-10));

        let full = Penalty::lasso(4, 0..4).unwrap();
        assert_eq!(full.model_subspace().dim(), 4);
    }

    #[test]
    fn model_subspace_is_orthogonal_to_span_of_i() {
        let cases = vec![
            Penalty::lasso(5, [0, 3]).unwrap(),
            Penalty::group_lasso(vec![vec![0, 1], vec![2], vec![3, 4]], [2], None).unwrap(),
        ];
        for rho in cases {
            rho.verify_model_subspace().unwrap();
            let gens = rho.i.span_generators();
            for j in 0..gens.ncols() {
                let col: DVector<f64> = gens.column(j).into();
                let pm = rho.model_subspace().project(&col).unwrap();
                assert!(pm.norm() <= 1e-10 * (1.0 + col.norm()));
            }
        }
    }

    #[test]
    fn prox_matches_soft_threshold_closed_forms() {
        let rho = Penalty::lasso(1, [0]).unwrap();
        let out = rho.prox(&vec(&[1.0]), 0.4).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12);
        // Brute-force check of the 1-D prox objective.
        let mut best = (f64::INFINITY, 0.0);
        let mut t = -2.0;
        while t <= 2.0 {
            let obj = 0.5 * (t - 1.0_f64).powi(2) + 0.4 * t.abs();
            if obj < best.0 {
                best = (obj, t);
            }
            t += 1e-4;
        }
        assert!((best.1 - 0.6).abs() < 1e-3);

        let grho = Penalty::group_lasso(vec![vec![0, 1]], [0], None).unwrap();
        let v = vec(&[1.2, 1.6]); // norm 2
        let out = grho.prox(&v, 0.5).unwrap();
        assert!((out - &v * 0.75).amax() < 1e-12);

        assert_eq!(grho.prox(&v, 0.0).unwrap(), v);
    }

    #[test]
    fn prox_satisfies_subgradient_inclusion_and_beats_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rho_l = Penalty::lasso(5, [0, 2]).unwrap();
        let rho_g =
            Penalty::group_lasso(vec![vec![0, 1], vec![2, 3], vec![4]], [0], None).unwrap();
        for case in 0..200 {
            let rho = if case % 2 == 0 { &rho_l } else { &rho_g };
            let v = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let t: f64 = rng.random_range(0.05..1.5);
            let theta = rho.prox(&v, t).unwrap();
            // 0 in theta - v + t * d(h_A + h_I)(theta): the subdifferential is
            // the Minkowski sum of the two exposed faces at theta.
            let w = (&v - &theta) / t;
            let face_a = rho.a.face(&theta).unwrap();
            let face_i = rho.i.face(&theta).unwrap();
            let subdiff = ConvexSet::minkowski_sum(vec![face_a, face_i]).unwrap();
            assert!(
                subdiff.contains_point(&w, 1e-8).unwrap(),
                "subgradient inclusion failed (case {case})"
            );
            // Prox objective beats random perturbations.
            let obj = |x: &DVector<f64>| {
                0.5 * (x - &v).norm_squared() + t * rho.value(x).unwrap()
            };
            let base = obj(&theta);
            for _ in 0..1_000 {
                let pert = DVector::from_fn(5, |_, _| rng.random_range(-0.3..0.3));
                assert!(obj(&(&theta + pert)) >= base - 1e-10);
            }
        }
    }

    #[test]
    fn hybrid_objective_matches_constituents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho1 = Penalty::lasso(3, [0]).unwrap();
        let rho2 = Penalty::group_lasso(vec![vec![0, 1], vec![2]], [1], None).unwrap();
        let hybrid = Penalty::hybrid(rho1.clone(), rho2.clone()).unwrap();
        for _ in 0..50 {
            let t1 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let t2 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let mut stacked = DVector::zeros(6);
            for i in 0..3 {
                stacked[i] = t1[i];
                stacked[3 + i] = t2[i];
            }
            let lhs = hybrid.value(&stacked).unwrap();
            let rhs = rho1.value(&t1).unwrap() + rho2.value(&t2).unwrap();
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }
        // Hybrid prox is block-wise.
        let v = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.8);
        let out = hybrid.prox(&v, 0.2).unwrap();
        let v1 = DVector::from_fn(3, |i, _| v[i]);
        let v2 = DVector::from_fn(3, |i, _| v[3 + i]);
        let o1 = rho1.prox(&v1, 0.2).unwrap();
        let o2 = rho2.prox(&v2, 0.2).unwrap();
        for i in 0..3 {
            assert!((out[i] - o1[i]).abs() < 1e-12);
            assert!((out[3 + i] - o2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let err = Penalty::group_lasso(vec![vec![0, 1], vec![1, 2]], [0], None);
        assert!(err.is_err());
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("duplicate"), "unhelpful message: {msg}");
    }

    #[test]
    fn zero_dictionary_rows_are_rejected() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(Penalty::analysis(d, Penalty::lasso(2, [0]).unwrap()).is_err());
    }

    #[test]
    fn estimand_spec_validates_support() {
        let theta = vec(&[1.5, 0.0, -2.0]);
        assert!(EstimandSpec::with_coords(theta.clone(), [0, 2].into_iter().collect()).is_ok());
        assert!(EstimandSpec::with_coords(theta, [0].into_iter().collect()).is_err());
    }
}
