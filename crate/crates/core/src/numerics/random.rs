use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{dot, norm, Matrix};

/// Matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `n × k` matrix with orthonormal columns (`k ≤ n`), from Gram–Schmidt on a
/// Gaussian draw.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Matrix {
    assert!(k <= n, "cannot draw {k} orthonormal columns in dimension {n}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let len = norm(&v);
        if len > 1e-8 {
            v.iter_mut().for_each(|x| *x /= len);
            basis.push(v);
        }
    }
    Matrix::from_fn(n, k, |r, c| basis[c][r])
}

/// Rotation of `R^n` that turns every vector by exactly `angle`: a random
/// orthonormal basis in which consecutive coordinate pairs are rotated by
/// `angle`. For odd `n` one basis direction stays fixed, so the angle is only
/// exact for every vector when `n` is even.
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R, n: usize, angle: f64) -> Matrix {
    let q = random_orthonormal(rng, n, n);
    let (s, c) = angle.sin_cos();
    let mut block = Matrix::identity(n);
    {
        let data = block.as_mut_slice();
        let mut i = 0;
        while i + 1 < n {
            data[i * n + i] = c;
            data[i * n + i + 1] = -s;
            data[(i + 1) * n + i] = s;
            data[(i + 1) * n + i + 1] = c;
            i += 2;
        }
    }
    q.matmul(&block)
        .and_then(|m| m.matmul_transposed(&q))
        .expect("square shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthonormal(&mut rng, 6, 4);
        let gram = q.transposed_matmul(&q).unwrap();
        let err = gram.sub(&Matrix::identity(4)).unwrap().max_abs();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn uniform_rotation_turns_every_vector_by_the_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = uniform_rotation(&mut rng, 8, 0.3);
        let rt_r = r.transposed_matmul(&r).unwrap();
        assert!(rt_r.sub(&Matrix::identity(8)).unwrap().max_abs() < 1e-12);
        let v = gaussian_matrix(&mut rng, 1, 8, 1.0);
        let rv = v.matmul_transposed(&r).unwrap();
        let c = crate::numerics::cosine_similarity(v.as_slice(), rv.as_slice()).unwrap();
        assert!((c - 0.3f64.cos()).abs() < 1e-12, "{c}");
    }
}
