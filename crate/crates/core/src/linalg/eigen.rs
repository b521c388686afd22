use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sweep cap for the cyclic Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Relative eigenvalue floor applied before negative powers.
pub const FLOOR_SCALE: f64 = 1e-5;

/// Eigenvalues in descending order with orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    eigenvalues: Vec<f64>,
    eigenvectors: Tensor,
    sweeps: usize,
}

impl SymEigen {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Column `j` is the eigenvector for `eigenvalues()[j]`.
    pub fn eigenvectors(&self) -> &Tensor {
        &self.eigenvectors
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// `E·diag(D)·Eᵀ`
    pub fn reconstruct(&self) -> Result<Tensor> {
        matrix_power_sym(self, 1.0)
    }
}

/// The default floor for a spectrum whose largest eigenvalue is `max_eig`.
pub fn default_floor(max_eig: f64) -> f64 {
    FLOOR_SCALE * max_eig.max(1.0)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues below `eps_floor` are raised to it; pass
/// `f64::NEG_INFINITY` to keep the raw spectrum.
pub fn sym_eigen(m: &Tensor, eps_floor: f64) -> Result<SymEigen> {
    let (n, c) = m.dims2()?;
    if n != c {
        return Err(Error::dim(format!("sym_eigen: non-square {n}×{c}")));
    }
    m.ensure_finite("sym_eigen input")?;
    let norm = m.frobenius();
    let asym = m.sub(&m.transpose()?)?.frobenius();
    if asym > 1e-5 * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Contract(format!(
            "sym_eigen: input not symmetric (‖A−Aᵀ‖ = {asym:.3e}, ‖A‖ = {norm:.3e})"
        )));
    }

    let mut a = m.symmetrize()?.into_data();
    let mut v = Tensor::identity(n).into_data();
    let tol = n as f64 * f64::EPSILON * norm;
    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a, n);
        if off <= tol || n < 2 {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "sym_eigen: no convergence after {MAX_SWEEPS} sweeps on a {n}×{n} matrix \
                 (off-diagonal norm {off:.3e}, matrix norm {norm:.3e})"
            )));
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| a[i * n + i].max(eps_floor))
        .collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = (0..n)
            .max_by(|&r1, &r2| v[r1 * n + src].abs().total_cmp(&v[r2 * n + src].abs()))
            .unwrap_or(0);
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[r * n + col] = sign * v[r * n + src];
        }
    }
    Ok(SymEigen {
        eigenvalues,
        eigenvectors: Tensor::new(vec![n, n], vecs)?,
        sweeps,
    })
}

/// Eigendecomposition with the default relative floor.
pub fn sym_eigen_floored(m: &Tensor) -> Result<SymEigen> {
    let raw = sym_eigen(m, f64::NEG_INFINITY)?;
    let floor = default_floor(raw.eigenvalues.first().copied().unwrap_or(0.0));
    Ok(SymEigen {
        eigenvalues: raw.eigenvalues.iter().map(|&l| l.max(floor)).collect(),
        ..raw
    })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// `E·diag(Dᵖ)·Eᵀ`
pub fn matrix_power_sym(e: &SymEigen, p: f64) -> Result<Tensor> {
    let n = e.dim();
    let mut powered = Vec::with_capacity(n);
    for (i, &l) in e.eigenvalues.iter().enumerate() {
        if p < 0.0 && l <= 0.0 {
            return Err(Error::Singular(format!(
                "eigenvalue {i} is {l:e}; cannot raise to negative power {p}"
            )));
        }
        if l < 0.0 && p.fract() != 0.0 {
            return Err(Error::Numerical(format!(
                "eigenvalue {i} is {l:e}; fractional power {p} undefined"
            )));
        }
        powered.push(if p == 1.0 { l } else { l.powf(p) });
    }
    let ev = e.eigenvectors.data();
    let mut scaled = e.eigenvectors.clone();
    for r in 0..n {
        for c in 0..n {
            scaled.data_mut()[r * n + c] = ev[r * n + c] * powered[c];
        }
    }
    let out = scaled.matmul_t(
        crate::gemm::Transpose::No,
        &e.eigenvectors,
        crate::gemm::Transpose::Yes,
    )?;
    out.symmetrize()
}
