use rand::Rng;

use super::news::{normal_tensor, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{pack_segments, Graph, ParamSet, Segment, Tensor, Var};

const PROJ_W: usize = 0;
const PROJ_B: usize = 1;
const QUERY: usize = 2;

/// Additive-attention pooling of clicked-news representations into a user
/// vector: `α = softmax(qᵀ tanh(W h + b))`, `u = Σ α h`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEncoder {
    pub repr_dim: usize,
    pub query_dim: usize,
    pub params: ParamSet,
}

impl UserEncoder {
    pub fn new<R: Rng>(repr_dim: usize, query_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        params.push("user.proj.w", normal_tensor(rng, &[repr_dim, query_dim], INIT_STD));
        params.push("user.proj.b", Tensor::zeros(&[query_dim]));
        params.push("user.query", normal_tensor(rng, &[query_dim, 1], INIT_STD));
        UserEncoder {
            repr_dim,
            query_dim,
            params,
        }
    }

    pub fn from_params(repr_dim: usize, query_dim: usize, params: ParamSet) -> Result<Self> {
        let ok = params.len() == 3
            && params.get(PROJ_W).shape() == [repr_dim, query_dim]
            && params.get(PROJ_B).shape() == [query_dim]
            && params.get(QUERY).shape() == [query_dim, 1];
        if !ok {
            return Err(Error::Checkpoint("user encoder layout does not match config".into()));
        }
        Ok(UserEncoder {
            repr_dim,
            query_dim,
            params,
        })
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, group: Option<usize>) -> Vec<Var> {
        self.params.bind(g, group, |_| true)
    }

    /// Attention weights over the rows of each segment of `history`.
    pub fn attention(&self, g: &mut Graph<'_>, p: &[Var], history: Var, segs: &[Segment]) -> Result<Var> {
        let keys = g.linear(history, p[PROJ_W], p[PROJ_B])?;
        let keys = g.tanh(keys)?;
        let scores = g.matmul(keys, p[QUERY])?;
        g.segment_softmax(scores, segs)
    }

    /// One user vector per segment. An empty segment yields the zero vector.
    pub fn forward(&self, g: &mut Graph<'_>, p: &[Var], history: Var, segs: &[Segment]) -> Result<Var> {
        if g.shape(history).first() == Some(&0) {
            return Ok(g.constant(Tensor::zeros(&[segs.len(), self.repr_dim])));
        }
        let alpha = self.attention(g, p, history, segs)?;
        g.segment_weighted_sum(alpha, history, segs)
    }

    /// User vector and attention weights for one padded history; rows with
    /// `mask[i] == false` are ignored and get weight 0.
    pub fn encode_user(&self, history: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        if history.len() != mask.len() {
            return Err(Error::invalid("history and mask lengths differ"));
        }
        let kept: Vec<usize> = (0..history.len()).filter(|&i| mask[i]).collect();
        let mut weights = vec![0.0; history.len()];
        if kept.is_empty() {
            return Ok((vec![0.0; self.repr_dim], weights));
        }
        let mut data = Vec::with_capacity(kept.len() * self.repr_dim);
        for &i in &kept {
            if history[i].len() != self.repr_dim {
                return Err(Error::ShapeMismatch {
                    op: "encode_user",
                    lhs: vec![history[i].len()],
                    rhs: vec![self.repr_dim],
                });
            }
            data.extend_from_slice(&history[i]);
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, None);
        let h = g.constant(Tensor::matrix(kept.len(), self.repr_dim, data)?);
        let segs = pack_segments([kept.len()]);
        let alpha = self.attention(&mut g, &p, h, &segs)?;
        let u = g.segment_weighted_sum(alpha, h, &segs)?;
        for (&i, &a) in kept.iter().zip(g.value(alpha)) {
            weights[i] = a;
        }
        Ok((g.value(u).to_vec(), weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc() -> UserEncoder {
        UserEncoder::new(4, 3, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn weights_form_a_distribution_and_masked_rows_get_zero() {
        let h = vec![vec![1.0, 0.0, 2.0, -1.0], vec![0.5; 4], vec![9.0; 4]];
        let (_, w) = enc().encode_user(&h, &[true, true, false]).unwrap();
        assert_eq!(w[2], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_and_duplicated_items_return_the_item() {
        let e = enc();
        let x = vec![0.3, -0.2, 0.7, 1.1];
        let (u, _) = e.encode_user(&[x.clone()], &[true]).unwrap();
        let (u2, w2) = e.encode_user(&[x.clone(), x.clone()], &[true, true]).unwrap();
        for ((a, b), c) in u.iter().zip(&u2).zip(&x) {
            assert!((a - c).abs() < 1e-12 && (b - c).abs() < 1e-12);
        }
        assert!((w2[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_history_is_zero() {
        let (u, w) = enc().encode_user(&[vec![1.0; 4]], &[false]).unwrap();
        assert_eq!(u, vec![0.0; 4]);
        assert_eq!(w, vec![0.0]);
        assert_eq!(enc().encode_user(&[], &[]).unwrap().0, vec![0.0; 4]);
    }

    #[test]
    fn permutation_invariant() {
        let e = enc();
        let h = vec![vec![1.0, 0.0, 2.0, -1.0], vec![0.5; 4], vec![-0.3, 0.2, 0.1, 0.9]];
        let rev: Vec<Vec<f64>> = h.iter().rev().cloned().collect();
        let (a, _) = e.encode_user(&h, &[true; 3]).unwrap();
        let (b, _) = e.encode_user(&rev, &[true; 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
