use serde::{Deserialize, Serialize};

use super::OffsetMatrix;
use crate::error::{invalid, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Dense square matrix, row-major. Used for covariance matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(invalid(format!("{} entries do not form a non-empty {n}x{n} matrix", data.len())));
        }
        Ok(SymMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = 1.0);
        SymMatrix { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.n).map(|row| dot(row, v)).collect()
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().map(|v| v * factor).collect() }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `C = (1/P) · ΔS · ΔSᵀ` over the columns of the offset matrix.
///
/// The divisor is the coordinate count `P`, not the sample count. Any
/// positive divisor yields the same eigenvectors, so the transition matrix
/// does not depend on this choice.
pub fn covariance(offsets: &OffsetMatrix) -> Result<SymMatrix> {
    let p = offsets.rows();
    if offsets.cols() == 0 || p == 0 {
        return Err(invalid("covariance of an empty offset matrix"));
    }
    let mut data = vec![0.0; p * p];
    for col in offsets.columns() {
        for i in 0..p {
            let ci = col[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut data[i * p..(i + 1) * p];
            for (j, r) in row.iter_mut().enumerate().skip(i) {
                *r += ci * col[j];
            }
        }
    }
    let scale = 1.0 / p as f64;
    for i in 0..p {
        for j in i..p {
            let v = data[i * p + j] * scale;
            data[i * p + j] = v;
            data[j * p + i] = v;
        }
    }
    Ok(SymMatrix { n: p, data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Pairs come back sorted by descending eigenvalue. Each eigenvector has
/// unit norm and its largest-magnitude entry is positive (lowest index wins
/// ties), so repeated runs produce identical bases.
pub fn eigendecompose(c: &SymMatrix) -> Result<Vec<EigenPair>> {
    let n = c.n;
    let scale = 1.0 + c.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut a = c.data.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > SYMMETRY_TOL * scale {
                return Err(invalid(format!("matrix is not symmetric at ({i},{j}): {x} vs {y}")));
            }
            let m = 0.5 * (x + y);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }

    let norm = c.frobenius();
    let mut v = SymMatrix::identity(n).data;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * norm {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::InvalidState(format!(
            "Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut pairs: Vec<EigenPair> = (0..n)
        .map(|j| {
            let mut vector: Vec<f64> = (0..n).map(|k| v[k * n + j]).collect();
            let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            vector.iter_mut().for_each(|x| *x /= norm);
            let mut lead = 0;
            for (k, x) in vector.iter().enumerate() {
                if x.abs() > vector[lead].abs() {
                    lead = k;
                }
            }
            if vector[lead] < 0.0 {
                vector.iter_mut().for_each(|x| *x = -*x);
            }
            EigenPair { value: a[j * n + j], vector }
        })
        .collect();
    // stable: equal eigenvalues keep their diagonal order
    pairs.sort_by(|x, y| y.value.total_cmp(&x.value));
    Ok(pairs)
}

/// `Q × P` matrix whose rows are the leading eigenvectors of the offset
/// covariance. Maps coordinate offsets to eigen-coefficients (`W·Δ`) and
/// back (`Wᵀ·c`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    q: usize,
    p: usize,
    rows: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl TransitionMatrix {
    /// The identity map used when regressing raw coordinate offsets.
    pub fn identity(p: usize) -> Self {
        TransitionMatrix {
            q: p,
            p,
            rows: SymMatrix::identity(p).data,
            eigenvalues: vec![1.0; p],
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.p..(j + 1) * self.p]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `W·Wᵀ`, which is `I_Q` for an orthonormal basis.
    pub fn gram(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.q * self.q];
        for i in 0..self.q {
            for j in 0..self.q {
                g[i * self.q + j] = dot(self.row(i), self.row(j));
            }
        }
        g
    }

    /// Orthogonal projector `Wᵀ·W` onto the row space, `P × P` row-major.
    pub fn projector(&self) -> Vec<f64> {
        let p = self.p;
        let mut m = vec![0.0; p * p];
        for j in 0..self.q {
            let r = self.row(j);
            for a in 0..p {
                for b in 0..p {
                    m[a * p + b] += r[a] * r[b];
                }
            }
        }
        m
    }
}

pub fn build_transition_matrix(eigs: &[EigenPair], q: usize) -> Result<TransitionMatrix> {
    let p = eigs.first().map(|e| e.vector.len()).unwrap_or(0);
    if q < 1 || q >= p || eigs.len() < q {
        return Err(invalid(format!("need 1 <= Q < P, got Q={q}, P={p}")));
    }
    if eigs.iter().any(|e| e.vector.len() != p) {
        return Err(invalid("eigenvectors of differing lengths"));
    }
    let rows = eigs[..q].iter().flat_map(|e| e.vector.iter().copied()).collect();
    let eigenvalues = eigs[..q].iter().map(|e| e.value.max(0.0)).collect();
    Ok(TransitionMatrix { q, p, rows, eigenvalues })
}

/// Covariance, eigendecomposition and truncation in one call.
pub fn fit_transition(offsets: &OffsetMatrix, q: usize) -> Result<TransitionMatrix> {
    let c = covariance(offsets)?;
    build_transition_matrix(&eigendecompose(&c)?, q)
}

/// Eigen-coefficients `W·Δ` of a coordinate offset.
pub fn project_offsets(w: &TransitionMatrix, delta: &[f64]) -> Result<Vec<f64>> {
    if delta.len() != w.p {
        return Err(invalid(format!("offset length {} != P = {}", delta.len(), w.p)));
    }
    Ok(w.rows.chunks_exact(w.p).map(|r| dot(r, delta)).collect())
}

/// Coordinate offset `Wᵀ·c` from eigen-coefficients.
pub fn reconstruct_offsets(w: &TransitionMatrix, coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != w.q {
        return Err(invalid(format!("coefficient length {} != Q = {}", coeffs.len(), w.q)));
    }
    let mut out = vec![0.0; w.p];
    for (row, &c) in w.rows.chunks_exact(w.p).zip(coeffs) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += c * r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_offsets(rng: &mut ChaCha8Rng, p: usize, h: usize) -> OffsetMatrix {
        let cols: Vec<Vec<f64>> =
            (0..h).map(|_| (0..p).map(|_| rng.gen_range(-20.0..20.0)).collect()).collect();
        OffsetMatrix::from_columns(p, &cols).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn covariance_examples() {
        let zero = OffsetMatrix::from_columns(3, &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(covariance(&zero).unwrap().data().iter().all(|&v| v == 0.0));

        let v = [3.0, -2.0];
        let c = covariance(&OffsetMatrix::from_columns(2, &[v.to_vec()]).unwrap()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c.get(i, j), 0.5 * v[i] * v[j]);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = covariance(&random_offsets(&mut rng, 9, 5)).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_of_empty_matrix_rejected() {
        let empty = OffsetMatrix::from_columns(4, &[]).unwrap();
        assert!(covariance(&empty).is_err());
    }

    #[test]
    fn eigen_diagonal() {
        let c = SymMatrix::from_rows(2, vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let e = eigendecompose(&c).unwrap();
        assert_eq!(e[0].value, 4.0);
        assert_eq!(e[1].value, 1.0);
        assert_eq!(e[0].vector, vec![1.0, 0.0]);
        assert_eq!(e[1].vector, vec![0.0, 1.0]);
    }

    #[test]
    fn eigen_two_by_two() {
        let c = SymMatrix::from_rows(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = eigendecompose(&c).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e[0].value - 3.0).abs() < 1e-14);
        assert!((e[1].value - 1.0).abs() < 1e-14);
        assert!(max_abs_diff(&e[0].vector, &[r, r]) < 1e-14);
        // tie in magnitude: the first entry is made positive
        assert!(max_abs_diff(&e[1].vector, &[r, -r]) < 1e-14);
    }

    #[test]
    fn eigen_identity_is_orthonormal() {
        let e = eigendecompose(&SymMatrix::identity(6)).unwrap();
        assert!(e.iter().all(|p| (p.value - 1.0).abs() < 1e-15));
        for a in &e {
            for b in &e {
                let d = dot(&a.vector, &b.vector);
                let want = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eigen_rejects_bad_input() {
        assert!(SymMatrix::from_rows(2, vec![1.0, 2.0, 3.0]).is_err());
        let c = SymMatrix::from_rows(2, vec![1.0, 2.0, 2.5, 1.0]).unwrap();
        assert!(eigendecompose(&c).is_err());
    }

    #[test]
    fn eigen_residuals_and_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = covariance(&random_offsets(&mut rng, 34, 40)).unwrap();
        let e = eigendecompose(&c).unwrap();
        let bound = 1e-8 * (1.0 + c.frobenius());
        for pair in &e {
            let cq = c.mul_vec(&pair.vector);
            let res: f64 = cq
                .iter()
                .zip(&pair.vector)
                .map(|(a, q)| (a - pair.value * q).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(res < bound, "residual {res}");
            let lead = pair.vector.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(lead > 0.0);
        }
        assert!(e.windows(2).all(|w| w[0].value >= w[1].value));
    }

    #[test]
    fn transition_examples() {
        let diag = eigendecompose(&SymMatrix::from_rows(2, vec![4.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let w = build_transition_matrix(&diag, 1).unwrap();
        assert_eq!(w.row(0), &[1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = eigendecompose(&covariance(&random_offsets(&mut rng, 34, 60)).unwrap()).unwrap();
        let w = build_transition_matrix(&e, 8).unwrap();
        assert_eq!((w.q(), w.p()), (8, 34));

        let w = build_transition_matrix(&e, 33).unwrap();
        let g = w.gram();
        for i in 0..33 {
            for j in 0..33 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[i * 33 + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transition_rejects_bad_q() {
        let e = eigendecompose(&SymMatrix::identity(4)).unwrap();
        assert!(build_transition_matrix(&e, 0).is_err());
        assert!(build_transition_matrix(&e, 4).is_err());
        assert!(build_transition_matrix(&e, 5).is_err());
        assert!(build_transition_matrix(&[], 1).is_err());
    }

    #[test]
    fn project_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = fit_transition(&random_offsets(&mut rng, 34, 50), 8).unwrap();
        assert!(project_offsets(&w, &[0.0; 34]).unwrap().iter().all(|&v| v == 0.0));

        let c = project_offsets(&w, w.row(0)).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));

        let delta: Vec<f64> = (0..34).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let c = project_offsets(&w, &delta).unwrap();
        for j in 0..8 {
            let mut acc = 0.0;
            for i in 0..34 {
                acc += w.row(j)[i] * delta[i];
            }
            assert!((c[j] - acc).abs() < 1e-12);
        }
        assert!(project_offsets(&w, &[0.0; 33]).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = fit_transition(&random_offsets(&mut rng, 34, 50), 8).unwrap();
        assert!(reconstruct_offsets(&w, &[0.0; 8]).unwrap().iter().all(|&v| v == 0.0));
        assert!(reconstruct_offsets(&w, &[0.0; 7]).is_err());

        // delta inside the row space survives the roundtrip
        let coeffs: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let inside = reconstruct_offsets(&w, &coeffs).unwrap();
        let back = reconstruct_offsets(&w, &project_offsets(&w, &inside).unwrap()).unwrap();
        assert!(max_abs_diff(&inside, &back) < 1e-10);

        // arbitrary delta lands on its orthogonal projection WᵀW·Δ
        let delta: Vec<f64> = (0..34).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let back = reconstruct_offsets(&w, &project_offsets(&w, &delta).unwrap()).unwrap();
        let proj = w.projector();
        let oracle: Vec<f64> = proj.chunks_exact(34).map(|r| dot(r, &delta)).collect();
        assert!(max_abs_diff(&back, &oracle) < 1e-10);
    }

    #[test]
    fn basis_is_invariant_to_covariance_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let h = rng.gen_range(12..30);
            let offsets = random_offsets(&mut rng, 10, h);
            let c = covariance(&offsets).unwrap();
            let base = build_transition_matrix(&eigendecompose(&c).unwrap(), 4).unwrap();
            for factor in [10.0 / h as f64, 10.0, 1.0 / 7.0] {
                let scaled = build_transition_matrix(&eigendecompose(&c.scaled(factor)).unwrap(), 4).unwrap();
                assert!(max_abs_diff(&base.projector(), &scaled.projector()) < 1e-9);
                for j in 0..4 {
                    assert!(max_abs_diff(base.row(j), scaled.row(j)) < 1e-8);
                    assert!((scaled.eigenvalues()[j] - factor * base.eigenvalues()[j]).abs()
                        < 1e-9 * (1.0 + scaled.eigenvalues()[j]));
                }
            }
        }
    }

    #[test]
    fn identity_transition_is_lossless() {
        let w = TransitionMatrix::identity(8);
        let d: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(project_offsets(&w, &d).unwrap(), d);
        assert_eq!(reconstruct_offsets(&w, &d).unwrap(), d);
    }
}
