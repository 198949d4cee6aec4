//! Symmetric image-text contrastive loss over projected batches.
//!
//! With `S[i][j]` the cosine similarity of image row `U_i` and text row
//! `V_j`, the loss is
//!
//! ```text
//! L = Σ_i ( −log softmax_j S[i][·] at j=i  −  log softmax_k S[·][i] at k=i )
//! ```
//!
//! Diagonal pairs are positives, every off-diagonal pair is a negative. The
//! batch sum is not normalised and there is no temperature.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N×N` cosine similarities, rows indexed by image, columns by text.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(Tensor);

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, image: usize, text: usize) -> f64 {
        self.0.get(image, text)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_rows(side: &'static str, t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm { side, row: r });
        }
    }
    Ok(())
}

fn check_pair(u: &Tensor, v: &Tensor) -> Result<()> {
    if u.rows() == 0 {
        return Err(Error::shape("contrastive batch", "at least 1 row", 0));
    }
    if u.shape() != v.shape() {
        return Err(Error::shape(
            "contrastive batch",
            format!("{:?}", u.shape()),
            format!("{:?}", v.shape()),
        ));
    }
    check_rows("U", u)?;
    check_rows("V", v)
}

/// Differentiable cosine similarity matrix.
pub fn cosine_matrix_var<'g>(u: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    check_pair(&u.value(), &v.value())?;
    Ok(u.cosine_matrix(v))
}

/// Cosine similarity matrix of two equally sized batches.
pub fn cosine_matrix(u: &Tensor, v: &Tensor) -> Result<SimilarityMatrix> {
    let g = Graph::new();
    let s = cosine_matrix_var(g.leaf(u.clone()), g.leaf(v.clone()))?;
    Ok(SimilarityMatrix(s.value()))
}

/// Differentiable symmetric contrastive loss.
pub fn contrastive_loss<'g>(u: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    let s = cosine_matrix_var(u, v)?;
    let n = s.shape()[0];
    let diag: Vec<usize> = (0..n).collect();
    let image_to_text = s.log_softmax_rows().pick(&diag).sum();
    let text_to_image = s.t().log_softmax_rows().pick(&diag).sum();
    Ok(-(image_to_text + text_to_image))
}

/// Contrastive loss value without gradients.
pub fn contrastive_loss_value(u: &Tensor, v: &Tensor) -> Result<f64> {
    let g = Graph::new();
    Ok(contrastive_loss(g.leaf(u.clone()), g.leaf(v.clone()))?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Per-pair scalar cosine, written without the graph.
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Straight-line summation of both directional terms.
    fn oracle_loss(u: &Tensor, v: &Tensor) -> f64 {
        let n = u.rows();
        let mut total = 0.0;
        for i in 0..n {
            let denom1: f64 = (0..n).map(|k| cos(u.row(i), v.row(k)).exp()).sum();
            total += -(cos(u.row(i), v.row(i)).exp() / denom1).ln();
            let denom2: f64 = (0..n).map(|k| cos(v.row(i), u.row(k)).exp()).sum();
            total += -(cos(v.row(i), u.row(i)).exp() / denom2).ln();
        }
        total
    }

    #[test]
    fn orthonormal_aligned_rows_give_identity() {
        let u = Tensor::identity(3);
        let s = cosine_matrix(&u, &u).unwrap();
        assert_eq!(s.as_tensor(), &Tensor::identity(3));
    }

    #[test]
    fn opposite_rows_give_minus_one_diagonal() {
        let u = random(4, 3, 1);
        let v = u.map(|x| -x);
        let s = cosine_matrix(&u, &v).unwrap();
        for i in 0..4 {
            assert!((s.get(i, i) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_per_pair_oracle() {
        let u = random(4, 3, 2);
        let v = random(4, 3, 3);
        let s = cosine_matrix(&u, &v).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((s.get(i, j) - cos(u.row(i), v.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_row_is_an_error() {
        let mut u = random(3, 2, 4);
        u.set(1, 0, 0.0);
        u.set(1, 1, 0.0);
        let v = random(3, 2, 5);
        assert!(matches!(
            cosine_matrix(&u, &v),
            Err(Error::ZeroNorm { side: "U", row: 1 })
        ));
        assert!(matches!(
            contrastive_loss_value(&v, &u),
            Err(Error::ZeroNorm { side: "V", row: 1 })
        ));
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let u = random(1, 3, 6);
        let v = random(1, 3, 7);
        assert_eq!(contrastive_loss_value(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn uniform_pair_of_two_is_four_ln_two() {
        let row = [0.3, -1.2, 2.0];
        let u = Tensor::from_rows(3, [&row[..], &row[..]]);
        let l = contrastive_loss_value(&u, &u).unwrap();
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn matches_direct_summation() {
        let u = random(4, 5, 8);
        let v = random(4, 5, 9);
        let l = contrastive_loss_value(&u, &v).unwrap();
        assert!((l - oracle_loss(&u, &v)).abs() < 1e-10);
    }

    #[test]
    fn duplicate_pairs_raise_the_loss() {
        let u = Tensor::identity(3);
        let base = contrastive_loss_value(&u, &u).unwrap();
        let mut dup = u.clone();
        for c in 0..3 {
            dup.set(2, c, u.get(1, c));
        }
        assert!(contrastive_loss_value(&dup, &dup).unwrap() > base);
    }

    #[test]
    fn swapped_positive_pair_raises_the_loss() {
        let u = Tensor::identity(4);
        let aligned = contrastive_loss_value(&u, &u).unwrap();
        let mut swapped = u.clone();
        for c in 0..4 {
            swapped.set(0, c, u.get(1, c));
            swapped.set(1, c, u.get(0, c));
        }
        assert!(aligned < contrastive_loss_value(&u, &swapped).unwrap());
    }
}
