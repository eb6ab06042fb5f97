use super::ModelError;
use crate::nncore::Real;

/// Classifier input length for `arity` fused d-dimensional embeddings.
pub fn fused_len(d: usize, arity: usize) -> usize {
    if arity == 1 {
        d
    } else {
        (d + 1).pow(arity as u32)
    }
}

/// Flattened outer product of the embeddings, each augmented with a
/// trailing 1. The first vector varies slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation<T> {
    pub values: Vec<T>,
    pub arity: usize,
}

fn check_inputs<T>(features: &[&[T]]) -> Result<usize, ModelError> {
    let k = features.len();
    if !(2..=3).contains(&k) {
        return Err(ModelError::WrongArity(k));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(ModelError::WrongArity(k));
    }
    Ok(d)
}

pub fn outer_fuse<T: Real>(features: &[&[T]]) -> Result<FusedRepresentation<T>, ModelError> {
    let d = check_inputs(features)?;
    let a = d + 1;
    let aug = |f: &[T], i: usize| if i == d { T::one() } else { f[i] };
    let mut values = Vec::with_capacity(a.pow(features.len() as u32));
    if features.len() == 2 {
        for i in 0..a {
            let x = aug(features[0], i);
            values.extend((0..a).map(|j| x * aug(features[1], j)));
        }
    } else {
        for i in 0..a {
            let x = aug(features[0], i);
            for j in 0..a {
                let xy = x * aug(features[1], j);
                values.extend((0..a).map(|k| xy * aug(features[2], k)));
            }
        }
    }
    Ok(FusedRepresentation { values, arity: features.len() })
}

/// Gradients w.r.t. each (non-augmented) input given the gradient of the
/// flattened outer product.
pub fn outer_fuse_backward<T: Real>(features: &[&[T]], grad: &[T]) -> Result<Vec<Vec<T>>, ModelError> {
    let d = check_inputs(features)?;
    let a = d + 1;
    if grad.len() != a.pow(features.len() as u32) {
        return Err(ModelError::ShapeMismatch(format!("fusion gradient length {}", grad.len())));
    }
    let aug = |f: &[T], i: usize| if i == d { T::one() } else { f[i] };
    let mut out = vec![vec![T::zero(); a]; features.len()];
    if features.len() == 2 {
        for i in 0..a {
            for j in 0..a {
                let g = grad[i * a + j];
                out[0][i] = out[0][i] + g * aug(features[1], j);
                out[1][j] = out[1][j] + g * aug(features[0], i);
            }
        }
    } else {
        for i in 0..a {
            let x = aug(features[0], i);
            for j in 0..a {
                let y = aug(features[1], j);
                let mut gi = T::zero();
                let mut gj = T::zero();
                for k in 0..a {
                    let g = grad[(i * a + j) * a + k];
                    let z = aug(features[2], k);
                    gi = gi + g * y * z;
                    gj = gj + g * x * z;
                    out[2][k] = out[2][k] + g * x * y;
                }
                out[0][i] = out[0][i] + gi;
                out[1][j] = out[1][j] + gj;
            }
        }
    }
    for v in &mut out {
        v.truncate(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_expansion() {
        let r = outer_fuse(&[&[1.0, 2.0][..], &[3.0, 4.0][..]]).unwrap();
        assert_eq!(r.values, vec![3.0, 4.0, 1.0, 6.0, 8.0, 2.0, 3.0, 4.0, 1.0]);
        assert_eq!(r.arity, 2);
    }

    #[test]
    fn lengths() {
        let f = [0.5f64; 16];
        assert_eq!(outer_fuse(&[&f[..], &f[..]]).unwrap().values.len(), 289);
        assert_eq!(outer_fuse(&[&f[..], &f[..], &f[..]]).unwrap().values.len(), 4913);
        assert_eq!(fused_len(16, 1), 16);
    }

    #[test]
    fn wrong_arity() {
        let f = [1.0f64; 4];
        assert!(matches!(outer_fuse(&[&f[..]]), Err(ModelError::WrongArity(1))));
        assert!(matches!(outer_fuse(&[&f[..]; 4]), Err(ModelError::WrongArity(4))));
        assert!(matches!(outer_fuse(&[&f[..], &f[..2]]), Err(ModelError::WrongArity(2))));
    }

    #[test]
    fn interior_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = outer_fuse(&[&v[0][..], &v[1][..], &v[2][..]]).unwrap();
        let (i, j, k) = (3, 11, 7);
        assert_eq!(r.values[(i * 17 + j) * 17 + k], v[0][i] * v[1][j] * v[2][k]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 2..=3 {
            let v: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let g: Vec<f64> = (0..5usize.pow(k as u32)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |v: &[Vec<f64>]| {
                let refs: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
                outer_fuse(&refs).unwrap().values.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
            };
            let refs: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
            let analytic = outer_fuse_backward(&refs, &g).unwrap();
            for m in 0..k {
                for i in 0..4 {
                    let mut p = v.clone();
                    p[m][i] += 1e-6;
                    let mut q = v.clone();
                    q[m][i] -= 1e-6;
                    let numeric = (loss(&p) - loss(&q)) / 2e-6;
                    assert!((numeric - analytic[m][i]).abs() < 1e-8);
                }
            }
        }
    }
}
