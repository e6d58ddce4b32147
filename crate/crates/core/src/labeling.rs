//! Sign-permutation labeling of the columns of `B`.
//!
//! With `C = B̄^{-1} B`, a matrix is labeled when every `C_kk > 0` and
//! `|C_kk| > |C_kl|` for `l > k`. Projection picks the sign-permutation that
//! lands a matrix in that set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};

/// Margins below this are treated as ties.
pub const BOUNDARY_TOL: f64 = 1e-12;

const EXHAUSTIVE_MAX_N: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelingAnchor {
    anchor: DMatrix<f64>,
    anchor_inverse: DMatrix<f64>,
}

impl LabelingAnchor {
    pub fn new(anchor: DMatrix<f64>) -> Result<Self> {
        if !anchor.is_square() {
            return Err(SvarError::Dimension("labeling anchor must be square".into()));
        }
        let det = anchor.determinant();
        let anchor_inverse = anchor
            .clone()
            .try_inverse()
            .filter(|_| det.abs() > 0.0 && det.is_finite())
            .ok_or(SvarError::Singular { det: det.abs() })?;
        Ok(Self {
            anchor,
            anchor_inverse,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            anchor: DMatrix::identity(n, n),
            anchor_inverse: DMatrix::identity(n, n),
        }
    }

    pub fn anchor(&self) -> &DMatrix<f64> {
        &self.anchor
    }

    pub fn n(&self) -> usize {
        self.anchor.nrows()
    }

    fn relative(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.shape() != self.anchor.shape() {
            return Err(SvarError::Dimension(format!(
                "matrix is {}×{} but the anchor is {}×{}",
                b.nrows(),
                b.ncols(),
                self.n(),
                self.n()
            )));
        }
        let det = b.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(SvarError::Singular { det: det.abs() });
        }
        Ok(&self.anchor_inverse * b)
    }
}

/// Column `k` of the relabeled matrix is `signs[k] · B[:, permutation[k]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPermutation {
    pub permutation: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignPermutation {
    pub fn identity(n: usize) -> Self {
        Self {
            permutation: (0..n).collect(),
            signs: vec![1; n],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(k, &p)| k == p) && self.signs.iter().all(|&s| s == 1)
    }

    /// The matrix `P` with `B P^{-1}` equal to [`apply`](Self::apply)`(B)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.permutation.len();
        let mut p = DMatrix::zeros(n, n);
        for (k, (&src, &s)) in self.permutation.iter().zip(&self.signs).enumerate() {
            p[(k, src)] = f64::from(s);
        }
        p
    }

    pub fn apply(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (k, (&src, &s)) in self.permutation.iter().zip(&self.signs).enumerate() {
            out.set_column(k, &(b.column(src) * f64::from(s)));
        }
        out
    }

    /// Relabel structural shocks (one column per shock) consistently with [`apply`](Self::apply).
    pub fn apply_to_shocks(&self, shocks: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply(shocks)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    pub matrix: DMatrix<f64>,
    pub sign_permutation: SignPermutation,
    /// Smallest row margin `|C_kk| - max_{l>k} |C_kl|` of the result.
    pub min_margin: f64,
    /// True when the result sits on (or numerically at) the set boundary.
    pub boundary: bool,
}

pub fn in_representative_set(b: &DMatrix<f64>, anchor: &LabelingAnchor) -> Result<bool> {
    let c = anchor.relative(b)?;
    let n = c.nrows();
    Ok((0..n).all(|k| {
        let d = c[(k, k)];
        d > 0.0 && (k + 1..n).all(|l| d.abs() > c[(k, l)].abs())
    }))
}

/// Margin of row `k` when columns `order[k..]` remain in that order.
fn row_margin(c: &DMatrix<f64>, k: usize, order: &[usize]) -> f64 {
    let d = c[(k, order[k])].abs();
    let rest = order[k + 1..].iter().map(|&j| c[(k, j)].abs()).fold(0.0, f64::max);
    d - rest
}

fn candidate(c: &DMatrix<f64>, order: Vec<usize>) -> (SignPermutation, f64, f64) {
    let n = order.len();
    let signs = (0..n)
        .map(|k| if c[(k, order[k])] < 0.0 { -1 } else { 1 })
        .collect();
    let mut total = 0.0;
    let mut min = f64::INFINITY;
    for k in 0..n {
        let m = row_margin(c, k, &order);
        total += m;
        min = min.min(m);
    }
    (
        SignPermutation {
            permutation: order,
            signs,
        },
        total,
        min,
    )
}

fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    // Heap's algorithm
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

fn greedy_order(c: &DMatrix<f64>) -> Vec<usize> {
    let n = c.nrows();
    let mut free: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    for k in 0..n {
        let (pos, _) = free
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| c[(k, a)].abs().total_cmp(&c[(k, b)].abs()))
            .expect("free columns remain");
        order.push(free.remove(pos));
    }
    order
}

pub fn project_to_representative(b: &DMatrix<f64>, anchor: &LabelingAnchor) -> Result<Projection> {
    let c = anchor.relative(b)?;
    let n = c.nrows();
    let scale = c.amax().max(f64::MIN_POSITIVE);
    let (sp, min_margin) = if n <= EXHAUSTIVE_MAX_N {
        // signs follow from C_kk > 0, so only the n! orders need checking
        let mut best: Option<(SignPermutation, f64, f64)> = None;
        for_each_permutation(n, |order| {
            let cand = candidate(&c, order.to_vec());
            let better = match &best {
                None => true,
                Some((_, total, min)) => {
                    let valid_new = cand.2 > 0.0;
                    let valid_old = *min > 0.0;
                    (valid_new && !valid_old) || (valid_new == valid_old && cand.1 > *total)
                }
            };
            if better {
                best = Some(cand);
            }
        });
        let (sp, _, min) = best.expect("at least one permutation");
        (sp, min)
    } else {
        let (sp, _, min) = candidate(&c, greedy_order(&c));
        (sp, min)
    };
    let boundary = min_margin <= BOUNDARY_TOL * scale;
    if boundary {
        log::warn!("labeling projection is on the set boundary (margin {min_margin:e})");
    }
    Ok(Projection {
        matrix: sp.apply(b),
        sign_permutation: sp,
        min_margin,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    fn b0() -> DMatrix<f64> {
        m(
            4,
            &[10., 0., 0., 0., 5., 10., 0., 0., 5., 5., 10., 5., 5., 5., 5., 10.],
        )
    }

    #[test]
    fn membership_examples() {
        let id = LabelingAnchor::identity(2);
        assert!(in_representative_set(&m(2, &[1.0, -0.9, 0.0, 1.0]), &id).unwrap());
        let b_hat = m(2, &[1.0, -1.01, 0.01, 1.0]);
        assert!(!in_representative_set(&b_hat, &id).unwrap());
        let anchored = LabelingAnchor::new(m(2, &[1.0, -0.9, 0.0, 1.0])).unwrap();
        assert!(in_representative_set(&b_hat, &anchored).unwrap());
    }

    #[test]
    fn singular_inputs_are_rejected() {
        let id = LabelingAnchor::identity(2);
        let s = m(2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(in_representative_set(&s, &id), Err(SvarError::Singular { .. })));
        assert!(LabelingAnchor::new(s).is_err());
    }

    #[test]
    fn labeled_matrix_is_returned_unchanged() {
        let anchor = LabelingAnchor::identity(4);
        let p = project_to_representative(&b0(), &anchor).unwrap();
        assert!(p.sign_permutation.is_identity());
        assert_eq!(p.matrix, b0());
        assert!(!p.boundary);
    }

    #[test]
    fn swapped_and_negated_columns_are_restored() {
        let mut b = b0();
        b.swap_columns(0, 1);
        b.column_mut(0).neg_mut();
        let p = project_to_representative(&b, &LabelingAnchor::identity(4)).unwrap();
        assert_eq!(p.matrix, b0());
        assert_eq!(p.matrix, &b * p.sign_permutation.matrix().try_inverse().unwrap());
    }

    #[test]
    fn anchored_projection_keeps_the_true_order() {
        let anchor = LabelingAnchor::new(m(2, &[1.0, -0.9, 0.0, 1.0])).unwrap();
        let b_tilde = m(2, &[1.01, 1.0, -1.0, 0.01]);
        let p = project_to_representative(&b_tilde, &anchor).unwrap();
        let expected = m(2, &[1.0, -1.01, 0.01, 1.0]);
        assert!((&p.matrix - expected).amax() < 1e-15);
        // the plain set would instead keep the reversed order
        let plain = project_to_representative(&b_tilde, &LabelingAnchor::identity(2)).unwrap();
        assert!(plain.sign_permutation.is_identity());
    }

    #[test]
    fn greedy_matches_exhaustive_search() {
        let b = m(
            4,
            &[0.3, -2.0, 0.1, 0.5, 1.2, 0.4, -0.7, 0.2, -0.1, 0.9, 0.3, 1.5, 0.8, 0.1, 2.2, -0.3],
        );
        let ex = project_to_representative(&b, &LabelingAnchor::identity(4)).unwrap();
        let (sp, _, _) = candidate(&b, greedy_order(&b));
        assert_eq!(sp, ex.sign_permutation);
    }

    #[test]
    fn large_systems_use_the_greedy_path() {
        let n = 8;
        let b = DMatrix::from_fn(n, n, |i, j| if i == j { 3.0 } else { ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6 });
        let mut shuffled = b.clone();
        shuffled.swap_columns(2, 6);
        shuffled.column_mut(4).neg_mut();
        let p = project_to_representative(&shuffled, &LabelingAnchor::identity(n)).unwrap();
        assert!(in_representative_set(&p.matrix, &LabelingAnchor::identity(n)).unwrap());
        assert_eq!(p.matrix, b);
    }

    #[test]
    fn exact_tie_is_flagged() {
        let b = m(2, &[1.0, 1.0, -1.0, 1.0]);
        let p = project_to_representative(&b, &LabelingAnchor::identity(2)).unwrap();
        assert!(p.boundary);
    }

    fn all_sign_permutations(n: usize) -> Vec<SignPermutation> {
        let mut out = Vec::new();
        for_each_permutation(n, |order| {
            for mask in 0..(1u32 << n) {
                let signs = (0..n).map(|k| if mask >> k & 1 == 1 { -1 } else { 1 }).collect();
                out.push(SignPermutation {
                    permutation: order.to_vec(),
                    signs,
                });
            }
        });
        out
    }

    #[test]
    fn heap_enumerates_every_order_once() {
        let mut seen = std::collections::HashSet::new();
        for_each_permutation(5, |o| {
            seen.insert(o.to_vec());
        });
        assert_eq!(seen.len(), 120);
    }

    fn matrix_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n * n)
            .prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
            .prop_filter("nonsingular", |b| b.determinant().abs() > 1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(250))]

        #[test]
        fn exactly_one_sign_permutation_lands_in_set(n in 2usize..=5, seed in any::<u64>()) {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let b = DMatrix::<f64>::from_fn(n, n, |_, _| rand::Rng::random_range(&mut rng, -3.0..3.0));
            prop_assume!(b.determinant().abs() > 1e-3);
            let id = LabelingAnchor::identity(n);
            let hits = all_sign_permutations(n)
                .iter()
                .filter(|sp| in_representative_set(&sp.apply(&b), &id).unwrap())
                .count();
            let p = project_to_representative(&b, &id).unwrap();
            if !p.boundary {
                prop_assert_eq!(hits, 1);
                prop_assert!(in_representative_set(&p.matrix, &id).unwrap());
            }
        }

        #[test]
        fn projection_is_idempotent(b in matrix_strategy(3)) {
            let id = LabelingAnchor::identity(3);
            let p = project_to_representative(&b, &id).unwrap();
            prop_assume!(!p.boundary);
            let again = project_to_representative(&p.matrix, &id).unwrap();
            prop_assert!(again.sign_permutation.is_identity());
            prop_assert_eq!(again.matrix, p.matrix);
        }

        #[test]
        fn relabeling_preserves_the_shock_space(b in matrix_strategy(3), eps in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let p = project_to_representative(&b, &LabelingAnchor::identity(3)).unwrap();
            let e = DMatrix::from_column_slice(3, 1, &eps);
            let pm = p.sign_permutation.matrix();
            let lhs = &p.matrix * (&pm * &e);
            let rhs = &b * &e;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn anchored_ball_projects_with_identity(
            da in proptest::collection::vec(-1.0f64..1.0, 16),
            db in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let b0 = b0();
            let norm = b0.norm();
            let pert = DMatrix::from_row_slice(4, 4, &da);
            let pert = pert.clone() * (0.25 * norm / 4.0 / pert.norm().max(1e-12));
            let anchor = LabelingAnchor::new(&b0 + pert).unwrap();
            let ball = DMatrix::from_row_slice(4, 4, &db);
            let ball = ball.clone() * (0.05 * norm / ball.norm().max(1e-12));
            let p = project_to_representative(&(&b0 + ball), &anchor).unwrap();
            prop_assert!(p.sign_permutation.is_identity());
        }
    }
}
