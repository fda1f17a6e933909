//! Fixed-size 4x4 helpers for the mixture code.

pub const DIM: usize = 4;

pub type Vec4 = [f64; DIM];
pub type Mat4 = [[f64; DIM]; DIM];

pub const ZERO: Mat4 = [[0.0; DIM]; DIM];

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive definite.
pub fn cholesky(a: &Mat4) -> Option<Mat4> {
    let mut l = ZERO;
    for i in 0..DIM {
        for j in 0..=i {
            let mut s = a[i][j];
            for p in 0..j {
                s -= l[i][p] * l[j][p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// ln det(A) from its Cholesky factor.
pub fn log_det(l: &Mat4) -> f64 {
    2.0 * (0..DIM).map(|i| l[i][i].ln()).sum::<f64>()
}

/// Squared Mahalanobis norm d' A^-1 d given L with A = L L'.
#[inline]
pub fn mahalanobis_sq(l: &Mat4, d: &Vec4) -> f64 {
    let mut z = [0.0; DIM];
    let mut acc = 0.0;
    for i in 0..DIM {
        let mut s = d[i];
        for p in 0..i {
            s -= l[i][p] * z[p];
        }
        z[i] = s / l[i][i];
        acc += z[i] * z[i];
    }
    acc
}

/// Inverse of a lower-triangular factor with nonzero diagonal.
pub fn lower_inverse(l: &Mat4) -> Mat4 {
    let mut w = ZERO;
    for i in 0..DIM {
        w[i][i] = 1.0 / l[i][i];
        for j in 0..i {
            let mut s = 0.0;
            for p in j..i {
                s += l[i][p] * w[p][j];
            }
            w[i][j] = -s * w[i][i];
        }
    }
    w
}

/// Squared norm of `W d` for lower-triangular `W`.
#[inline]
pub fn whitened_sq(w: &Mat4, d: &Vec4) -> f64 {
    let z0 = w[0][0] * d[0];
    let z1 = w[1][0] * d[0] + w[1][1] * d[1];
    let z2 = w[2][0] * d[0] + w[2][1] * d[1] + w[2][2] * d[2];
    let z3 = w[3][0] * d[0] + w[3][1] * d[1] + w[3][2] * d[2] + w[3][3] * d[3];
    z0 * z0 + z1 * z1 + z2 * z2 + z3 * z3
}

pub fn trace(a: &Mat4) -> f64 {
    (0..DIM).map(|i| a[i][i]).sum()
}

pub fn flatten(a: &Mat4) -> [f64; DIM * DIM] {
    let mut out = [0.0; DIM * DIM];
    for i in 0..DIM {
        out[i * DIM..(i + 1) * DIM].copy_from_slice(&a[i]);
    }
    out
}

pub fn unflatten(v: &[f64; DIM * DIM]) -> Mat4 {
    let mut out = ZERO;
    for i in 0..DIM {
        out[i].copy_from_slice(&v[i * DIM..(i + 1) * DIM]);
    }
    out
}

pub fn sq_dist(a: &Vec4, b: &Vec4) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a: Mat4 = [
            [4.0, 1.0, 0.5, 0.2],
            [1.0, 3.0, 0.3, 0.1],
            [0.5, 0.3, 2.0, 0.4],
            [0.2, 0.1, 0.4, 1.5],
        ];
        let l = cholesky(&a).unwrap();
        for i in 0..DIM {
            for j in 0..DIM {
                let v: f64 = (0..DIM).map(|p| l[i][p] * l[j][p]).sum();
                assert!((v - a[i][j]).abs() < 1e-12);
            }
        }
        let na = nalgebra::Matrix4::from_fn(|i, j| a[i][j]);
        assert!((log_det(&l) - na.determinant().ln()).abs() < 1e-12);
        let d = [0.3, -1.0, 2.0, 0.5];
        let nd = nalgebra::Vector4::from_column_slice(&d);
        let want = (nd.transpose() * na.try_inverse().unwrap() * nd)[(0, 0)];
        assert!((mahalanobis_sq(&l, &d) - want).abs() < 1e-12);
        let w = lower_inverse(&l);
        assert!((whitened_sq(&w, &d) - want).abs() < 1e-12);
        for i in 0..DIM {
            for j in 0..DIM {
                let v: f64 = (0..DIM).map(|p| w[i][p] * l[p][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_is_rejected() {
        let mut a = ZERO;
        a[0][0] = 1.0;
        assert!(cholesky(&a).is_none());
    }
}
