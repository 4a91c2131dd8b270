//! Sum-of-Kronecker-products operators T = Σ W_iᵀ ⊗ Ã_i on vectorized
//! states, evaluated structurally as Σ Ã_i X W_i. Includes the amplifying
//! construction that gives each feature column its own dominant direction,
//! the mechanism that escapes single-operator rank collapse.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::complete_orthonormal_basis;
use crate::matrix::{norm, DenseMatrix};

#[derive(Debug, Clone)]
pub struct SkpTerm {
    pub weight: DenseMatrix,
    pub aggregation: DenseMatrix,
}

/// p ≥ 1 terms sharing node count n and feature width d; p = 1 degenerates
/// to a plain Kronecker-product operator.
#[derive(Debug, Clone)]
pub struct SkpOperator {
    terms: Vec<SkpTerm>,
}

impl SkpOperator {
    pub fn new(terms: Vec<SkpTerm>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| {
            Error::DimensionMismatch("an SKP operator needs at least one term".to_string())
        })?;
        let (n, d) = (first.aggregation.rows(), first.weight.rows());
        for (k, t) in terms.iter().enumerate() {
            if !t.aggregation.is_square()
                || !t.weight.is_square()
                || t.aggregation.rows() != n
                || t.weight.rows() != d
            {
                return Err(Error::DimensionMismatch(format!(
                    "term {k} has aggregation {}x{} and weight {}x{}, expected {n}x{n} and {d}x{d}",
                    t.aggregation.rows(),
                    t.aggregation.cols(),
                    t.weight.rows(),
                    t.weight.cols()
                )));
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[SkpTerm] {
        &self.terms
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn node_count(&self) -> usize {
        self.terms[0].aggregation.rows()
    }

    pub fn feature_width(&self) -> usize {
        self.terms[0].weight.rows()
    }

    /// JSON with the matrices embedded as matrix-text blobs.
    pub fn to_json_string(&self) -> String {
        let terms: Vec<Value> = self
            .terms
            .iter()
            .map(|t| {
                json!({
                    "weight": t.weight.to_text(),
                    "aggregation": t.aggregation.to_text(),
                })
            })
            .collect();
        serde_json::to_string_pretty(&json!({ "terms": terms }))
            .expect("operator serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(s)?;
        let terms = value
            .get("terms")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: "missing 'terms' array".to_string(),
            })?;
        let mut parsed = Vec::with_capacity(terms.len());
        for (k, t) in terms.iter().enumerate() {
            let field = |name: &str| -> Result<DenseMatrix> {
                let blob = t.get(name).and_then(Value::as_str).ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("term {k} missing '{name}' blob"),
                })?;
                DenseMatrix::from_text(blob)
            };
            parsed.push(SkpTerm { weight: field("weight")?, aggregation: field("aggregation")? });
        }
        Self::new(parsed)
    }
}

/// Σ Ã_i X W_i; equals unvec((Σ W_iᵀ⊗Ã_i)·vec(X)) without building the
/// Kronecker products.
pub fn skp_forward(x: &DenseMatrix, op: &SkpOperator) -> Result<DenseMatrix> {
    if x.rows() != op.node_count() || x.cols() != op.feature_width() {
        return Err(Error::DimensionMismatch(format!(
            "state {}x{} does not match operator ({} nodes, {} features)",
            x.rows(),
            x.cols(),
            op.node_count(),
            op.feature_width()
        )));
    }
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for t in &op.terms {
        out.add_assign(&t.aggregation.matmul(x).matmul(&t.weight));
    }
    Ok(out)
}

/// Amplifying construction: term i pairs W_i = diag(e_i) with
/// Ã_i = λ_1·s_is_iᵀ + λ_2·Q_iQ_iᵀ, where Q_i is the deterministic
/// Gram-Schmidt completion of s_i over canonical vectors. Each Ã_i has
/// spectrum {λ_1, λ_2 (n−1 times)}, so column i of the state is driven by
/// its own dominant direction s_i.
pub fn build_amplifying_skp(
    targets: &[Vec<f64>],
    lambda_1: f64,
    lambda_2: f64,
) -> Result<SkpOperator> {
    if !(lambda_1.abs() > lambda_2.abs() && lambda_2.abs() > 0.0) {
        return Err(Error::BadGap(format!(
            "need |lambda_1| > |lambda_2| > 0, got ({lambda_1}, {lambda_2})"
        )));
    }
    let d = targets.len();
    assert!(d > 0, "need at least one target column");
    let n = targets[0].len();
    let mut terms = Vec::with_capacity(d);
    for (i, s) in targets.iter().enumerate() {
        assert_eq!(s.len(), n, "target {i} has wrong length");
        let nrm = norm(s);
        if (nrm - 1.0).abs() > 1e-10 {
            return Err(Error::NotUnitNorm(nrm));
        }
        let q = complete_orthonormal_basis(std::slice::from_ref(s), n, n - 1);
        let mut agg = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let mut entry = lambda_1 * s[r] * s[c];
                for col in &q {
                    entry += lambda_2 * col[r] * col[c];
                }
                agg[(r, c)] = entry;
                agg[(c, r)] = entry;
            }
        }
        let mut w = DenseMatrix::zeros(d, d);
        w[(i, i)] = 1.0;
        terms.push(SkpTerm { weight: w, aggregation: agg });
    }
    SkpOperator::new(terms)
}

/// States s_k·e_kᵀ, one per target: the basis the amplifying construction
/// is built to preserve.
pub fn target_basis(targets: &[Vec<f64>]) -> Vec<DenseMatrix> {
    let d = targets.len();
    targets
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut m = DenseMatrix::zeros(s.len(), d);
            m.set_column(k, s);
            m
        })
        .collect()
}

fn collection_norm(states: &[DenseMatrix]) -> f64 {
    states.iter().map(DenseMatrix::frobenius_norm_sq).sum::<f64>().sqrt()
}

fn image_norm(op: &SkpOperator, states: &[DenseMatrix]) -> Result<f64> {
    let mut sum = 0.0;
    for m in states {
        sum += skp_forward(m, op)?.frobenius_norm_sq();
    }
    Ok(sum.sqrt())
}

/// (‖TS‖_F/‖TS′‖_F) / (‖S‖_F/‖S′‖_F), with S and S′ given as state
/// collections; values > 1 certify amplification of S over S′.
pub fn skp_amplification_ratio(
    op: &SkpOperator,
    s: &[DenseMatrix],
    s_prime: &[DenseMatrix],
) -> Result<f64> {
    let s_norm = collection_norm(s);
    let sp_norm = collection_norm(s_prime);
    if s_norm == 0.0 || sp_norm == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let ts = image_norm(op, s)?;
    let tsp = image_norm(op, s_prime)?;
    if tsp == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((ts / tsp) / (s_norm / sp_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, random_orthogonal, sym_eig, unvectorize, vectorize};
    use crate::matrix::dot;
    use crate::rng::Rng;

    fn random_op(n: usize, d: usize, p: usize, rng: &mut Rng) -> SkpOperator {
        let terms = (0..p)
            .map(|_| SkpTerm {
                weight: DenseMatrix::random_normal(d, d, 0.0, 1.0, rng),
                aggregation: DenseMatrix::random_normal(n, n, 0.0, 1.0, rng),
            })
            .collect();
        SkpOperator::new(terms).unwrap()
    }

    #[test]
    fn single_identity_weight_term_is_plain_aggregation() {
        let mut rng = Rng::new(1);
        let a = DenseMatrix::random_normal(4, 4, 0.0, 1.0, &mut rng);
        let x = DenseMatrix::random_normal(4, 3, 0.0, 1.0, &mut rng);
        let op = SkpOperator::new(vec![SkpTerm {
            weight: DenseMatrix::identity(3),
            aggregation: a.clone(),
        }])
        .unwrap();
        let y = skp_forward(&x, &op).unwrap();
        assert!(y.sub(&a.matmul(&x)).max_abs() <= 1e-15);
    }

    #[test]
    fn two_identity_terms_double_the_state() {
        let x = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let term = || SkpTerm { weight: DenseMatrix::identity(2), aggregation: DenseMatrix::identity(3) };
        let op = SkpOperator::new(vec![term(), term()]).unwrap();
        assert_eq!(skp_forward(&x, &op).unwrap(), x.scaled(2.0));
    }

    #[test]
    fn forward_matches_kronecker_materialization() {
        let mut rng = Rng::new(2);
        let op = random_op(4, 3, 2, &mut rng);
        let x = DenseMatrix::random_normal(4, 3, 0.0, 1.0, &mut rng);
        let direct = skp_forward(&x, &op).unwrap();
        let mut t = DenseMatrix::zeros(12, 12);
        for term in op.terms() {
            t.add_assign(&kron(&term.weight.transpose(), &term.aggregation));
        }
        let via_vec = unvectorize(&t.matmul(&vectorize(&x)), 4, 3).unwrap();
        assert!(direct.sub(&via_vec).max_abs() <= 1e-12 * (1.0 + direct.max_abs()));
    }

    #[test]
    fn forward_is_linear() {
        let mut rng = Rng::new(3);
        let op = random_op(5, 2, 3, &mut rng);
        let x = DenseMatrix::random_normal(5, 2, 0.0, 1.0, &mut rng);
        let y = DenseMatrix::random_normal(5, 2, 0.0, 1.0, &mut rng);
        let (alpha, beta) = (1.7, -0.3);
        let lhs = skp_forward(&x.scaled(alpha).add(&y.scaled(beta)), &op).unwrap();
        let rhs = skp_forward(&x, &op)
            .unwrap()
            .scaled(alpha)
            .add(&skp_forward(&y, &op).unwrap().scaled(beta));
        assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * (1.0 + lhs.max_abs()));
    }

    #[test]
    fn amplifying_construction_spectrum_is_exact() {
        let mut rng = Rng::new(4);
        let q = random_orthogonal(6, &mut rng);
        let targets: Vec<Vec<f64>> = (0..3).map(|i| q.column(i)).collect();
        let op = build_amplifying_skp(&targets, 1.0, 0.5).unwrap();
        assert_eq!(op.term_count(), 3);
        for (i, term) in op.terms().iter().enumerate() {
            let s = sym_eig(&term.aggregation).unwrap();
            assert!((s.eigenvalues[0] - 1.0).abs() <= 1e-12, "term {i} lambda_1");
            for &l in &s.eigenvalues[1..] {
                assert!((l - 0.5).abs() <= 1e-12, "term {i} complement eigenvalue {l}");
            }
            // Dominant eigenvector recovers the target, up to sign.
            let v = s.eigenvector(0);
            let overlap = dot(&v, &targets[i]).abs();
            assert!((overlap - 1.0).abs() <= 1e-10);
            // W_i = diag(e_i).
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == i && c == i { 1.0 } else { 0.0 };
                    assert_eq!(term.weight[(r, c)], want);
                }
            }
        }
    }

    #[test]
    fn single_target_fixes_direction_and_halves_complement() {
        let s1 = vec![1.0, 0.0, 0.0];
        let op = build_amplifying_skp(std::slice::from_ref(&s1), 1.0, 0.5).unwrap();
        let e1 = DenseMatrix::column_vector(&s1);
        let y = skp_forward(&e1, &op).unwrap();
        assert!(y.sub(&e1).max_abs() <= 1e-14, "target direction is fixed");
        let orth = DenseMatrix::column_vector(&[0.0, 1.0, 0.0]);
        let z = skp_forward(&orth, &op).unwrap();
        assert!(z.sub(&orth.scaled(0.5)).max_abs() <= 1e-14, "orthogonal mass is halved");
    }

    #[test]
    fn target_and_complement_images_hit_eigenvalue_norms() {
        let mut rng = Rng::new(5);
        let q = random_orthogonal(7, &mut rng);
        let targets: Vec<Vec<f64>> = (0..3).map(|i| q.column(i)).collect();
        let op = build_amplifying_skp(&targets, 0.9, 0.45).unwrap();
        let s = target_basis(&targets);
        let ts = image_norm(&op, &s).unwrap();
        let s_norm = collection_norm(&s);
        assert!((ts / s_norm - 0.9).abs() <= 1e-12, "target image norm ratio");

        // Probe orthogonal to every target.
        let u = q.column(5);
        let mut probe = DenseMatrix::zeros(7, 3);
        probe.set_column(1, &u);
        let tp = skp_forward(&probe, &op).unwrap().frobenius_norm();
        assert!(tp / probe.frobenius_norm() <= 0.45 + 1e-12, "complement bound");
    }

    #[test]
    fn amplification_ratio_hits_eigenvalue_quotient() {
        let mut rng = Rng::new(6);
        let q = random_orthogonal(8, &mut rng);
        let targets: Vec<Vec<f64>> = (0..3).map(|i| q.column(i)).collect();
        let op = build_amplifying_skp(&targets, 1.0, 0.5).unwrap();
        let s = target_basis(&targets);
        assert!((skp_amplification_ratio(&op, &s, &s).unwrap() - 1.0).abs() <= 1e-14);

        for trial in 0..50 {
            let mut u: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            for t in &targets {
                let d = dot(t, &u);
                for (ui, ti) in u.iter_mut().zip(t) {
                    *ui -= d * ti;
                }
            }
            let nrm = norm(&u);
            for ui in &mut u {
                *ui /= nrm;
            }
            let c: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let probe = DenseMatrix::column_vector(&u)
                .matmul(&DenseMatrix::from_vec(1, 3, c).unwrap());
            let ratio = skp_amplification_ratio(&op, &s, &[probe]).unwrap();
            assert!((ratio - 2.0).abs() <= 1e-9, "trial {trial}: ratio {ratio}");
        }
    }

    #[test]
    fn iterated_masses_follow_eigenvalue_powers() {
        let mut rng = Rng::new(7);
        let q = random_orthogonal(6, &mut rng);
        let targets: Vec<Vec<f64>> = (0..2).map(|i| q.column(i)).collect();
        let op = build_amplifying_skp(&targets, 1.0, 0.5).unwrap();
        let mut s = target_basis(&targets);
        let mut probe = {
            let mut m = DenseMatrix::zeros(6, 2);
            m.set_column(0, &q.column(4));
            vec![m]
        };
        let (s0, p0) = (collection_norm(&s), collection_norm(&probe));
        for l in 1..=10 {
            s = s.iter().map(|m| skp_forward(m, &op).unwrap()).collect();
            probe = probe.iter().map(|m| skp_forward(m, &op).unwrap()).collect();
            let target_growth = collection_norm(&s) / s0;
            let probe_growth = collection_norm(&probe) / p0;
            let want_t = 1.0f64.powi(l);
            let want_p = 0.5f64.powi(l);
            assert!((target_growth - want_t).abs() <= 1e-9 * want_t, "layer {l}");
            assert!((probe_growth - want_p).abs() <= 1e-9 * want_p, "layer {l}");
        }
    }

    #[test]
    fn kp_ratio_ignores_weights_but_skp_ratio_depends_on_them() {
        // Ã_1 diagonal: eigenvectors are canonical. Ã_2 shares the spectrum
        // in a rotated basis.
        let a1 = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let a2 = DenseMatrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap();
        let basis_states = |ix: usize| -> Vec<DenseMatrix> {
            (0..2)
                .map(|k| {
                    let mut m = DenseMatrix::zeros(2, 2);
                    m[(ix, k)] = 1.0; // e_ix in node space, column k
                    m
                })
                .collect()
        };
        let ratio = |op: &SkpOperator| {
            image_norm(op, &basis_states(0)).unwrap() / image_norm(op, &basis_states(1)).unwrap()
        };

        let mut rng = Rng::new(8);
        let kp = |w: DenseMatrix| {
            SkpOperator::new(vec![SkpTerm { weight: w, aggregation: a1.clone() }]).unwrap()
        };
        let r_a = ratio(&kp(DenseMatrix::random_normal(2, 2, 0.0, 1.0, &mut rng)));
        let r_b = ratio(&kp(DenseMatrix::random_normal(2, 2, 0.0, 1.0, &mut rng)));
        assert!((r_a - r_b).abs() <= 1e-10 * r_a, "KP ratio is W-independent");
        assert!((r_a - 2.0).abs() <= 1e-10, "KP ratio equals the eigenvalue ratio");

        let skp = |w1: DenseMatrix, w2: DenseMatrix| {
            SkpOperator::new(vec![
                SkpTerm { weight: w1, aggregation: a1.clone() },
                SkpTerm { weight: w2, aggregation: a2.clone() },
            ])
            .unwrap()
        };
        let r_1 = ratio(&skp(DenseMatrix::identity(2), DenseMatrix::zeros(2, 2)));
        let r_2 = ratio(&skp(DenseMatrix::zeros(2, 2), DenseMatrix::identity(2)));
        assert!(
            (r_1 / r_2 - 1.0).abs() > 0.1,
            "SKP ratio must depend on W: {r_1} vs {r_2}"
        );
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(
            build_amplifying_skp(&[vec![2.0, 0.0]], 1.0, 0.5),
            Err(Error::NotUnitNorm(_))
        ));
        assert!(matches!(
            build_amplifying_skp(&[vec![1.0, 0.0]], 0.5, 0.5),
            Err(Error::BadGap(_))
        ));
        assert!(matches!(
            build_amplifying_skp(&[vec![1.0, 0.0]], 1.0, 0.0),
            Err(Error::BadGap(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = Rng::new(9);
        let op = random_op(3, 2, 2, &mut rng);
        let text = op.to_json_string();
        let back = SkpOperator::from_json_str(&text).unwrap();
        assert_eq!(back.term_count(), 2);
        for (a, b) in op.terms().iter().zip(back.terms()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.aggregation, b.aggregation);
        }
        assert_eq!(text, back.to_json_string());
    }
}
