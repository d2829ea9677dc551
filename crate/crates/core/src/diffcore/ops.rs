//! Composite differentiable operations built from graph primitives.

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor added after softplus for every predicted scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// `y = x·W + b` over the last axis of `x`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// `softplus(raw) + 1e-4`, the positive scale parameterisation.
pub fn positive_scale(g: &mut Graph, raw: Var) -> Result<Var> {
    let sp = g.softplus(raw)?;
    g.affine(sp, 1.0, SIGMA_FLOOR)
}

/// Attention of one or more queries over a key/value set.
///
/// `q[.., n, d_k]`, `k[.., s, d_k]`, `v[.., s, d_v]` (rank 2 or batched
/// rank 3). `mask`, when given, is added to the `[.., n, s]` scores before
/// the softmax (use large negative values to exclude keys). Returns
/// `(context[.., n, d_v], weights[.., n, s])`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let dk = g.value(q).last_dim();
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let w = g.softmax(scores)?;
    let ctx = g.matmul(w, v)?;
    Ok((ctx, w))
}

/// Single-query scaled dot-product attention: `q[d_k]`, `k[S, d_k]`,
/// `v[S, d_v]` → `(context[d_v], weights[S])`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (ks, vs) = (g.shape(k).to_vec(), g.shape(v).to_vec());
    if ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            lhs: ks,
            rhs: vs,
        });
    }
    let dk = g.value(q).len();
    let q2 = g.reshape(q, &[1, dk])?;
    let (ctx, w) = attention(g, q2, k, v, None)?;
    let dv = g.value(ctx).len();
    let s = g.value(w).len();
    let ctx = g.reshape(ctx, &[dv])?;
    let w = g.reshape(w, &[s])?;
    Ok((ctx, w))
}

/// Σ_k [−½ln(2π) − ln σ_k − (x_k−μ_k)²/(2σ_k²)] over all elements.
pub fn gaussian_log_density(g: &mut Graph, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    let lp = gaussian_log_density_rows(g, x, mu, sigma)?;
    g.sum(lp)
}

/// Per-row diagonal Gaussian log density over the last axis.
pub fn gaussian_log_density_rows(g: &mut Graph, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    check_positive(g, sigma, "gaussian_log_density")?;
    let diff = g.sub(x, mu)?;
    let inv = g.recip(sigma)?;
    let z = g.mul(diff, inv)?;
    let z2 = g.square(z)?;
    let lnsig = g.ln(sigma)?;
    let quad = g.affine(z2, 0.5, 0.5 * LN_2PI)?;
    let per = g.add(quad, lnsig)?;
    let s = g.sum_last(per)?;
    g.neg(s)
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) = ½Σ(μ² + σ² − 1 − 2 ln σ).
pub fn kl_diag_gaussian_to_standard(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var> {
    check_positive(g, sigma, "kl_diag_gaussian_to_standard")?;
    let mu2 = g.square(mu)?;
    let s2 = g.square(sigma)?;
    let lns = g.ln(sigma)?;
    let lns2 = g.scale(lns, 2.0)?;
    let a = g.add(mu2, s2)?;
    let b = g.sub(a, lns2)?;
    let c = g.affine(b, 0.5, -0.5)?;
    g.sum(c)
}

/// Source of the standard-normal noise used by [`reparameterize`].
pub enum Noise<'a> {
    Sample(&'a mut Rng),
    Fixed(&'a Tensor),
}

/// `μ + σ ⊙ ε`; the gradient reaches μ and σ but not ε.
pub fn reparameterize(g: &mut Graph, mu: Var, sigma: Var, noise: Noise<'_>) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let eps = match noise {
        Noise::Sample(rng) => Tensor::new(&shape, rng.normals(shape.iter().product()))?,
        Noise::Fixed(t) => {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "reparameterize",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            t.clone()
        }
    };
    let e = g.constant(eps);
    let se = g.mul(sigma, e)?;
    g.add(mu, se)
}

fn check_positive(g: &Graph, sigma: Var, op: &'static str) -> Result<()> {
    if g.value(sigma).data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Invalid(format!("{op}: sigma must be positive")));
    }
    Ok(())
}

/// Mean entropy of the categorical distributions given by rows of logits.
pub fn categorical_entropy(g: &mut Graph, log_probs: Var) -> Result<Var> {
    let p = g.exp(log_probs)?;
    let plp = g.mul(p, log_probs)?;
    let rows = g.sum_last(plp)?;
    let m = g.mean(rows)?;
    g.neg(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0]));
        let w = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let w = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0]));
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let bad = g.constant(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap());
        assert!(matches!(linear(&mut g, x, bad, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1.0f64.ln(), 3.0f64.ln()]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);

        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let k = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let (ctx, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        // softmax([1/√2, 0]) by hand.
        let a = (1.0 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        assert!((g.value(w).data()[0] - w0).abs() < 1e-12);
        assert!((w0 - 0.6698).abs() < 1e-4);
        assert!((g.value(ctx).data()[0] - w0).abs() < 1e-12);

        let k1 = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let v1 = g.constant(Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let (ctx, w) = scaled_dot_attention(&mut g, q, k1, v1).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), &[4.0, 5.0, 6.0]);

        let kk = g.constant(Tensor::matrix(3, 2, vec![0.7, 0.1, 0.7, 0.1, 0.7, 0.1]).unwrap());
        let vv = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let q2 = g.constant(Tensor::vector(vec![5.0, -3.0]));
        let (_, w) = scaled_dot_attention(&mut g, q2, kk, vv).unwrap();
        for p in g.value(w).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_log_density_examples() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let one = g.constant(Tensor::vector(vec![1.0]));
        let lp = gaussian_log_density(&mut g, zero, zero, one).unwrap();
        assert!((scalar(&g, lp) + 0.5 * LN_2PI).abs() < 1e-12);
        assert!((scalar(&g, lp) + 0.9189).abs() < 1e-4);
        let lp = gaussian_log_density(&mut g, one, zero, one).unwrap();
        assert!((scalar(&g, lp) - (-0.5 * LN_2PI - 0.5)).abs() < 1e-12);
        let bad = g.constant(Tensor::vector(vec![0.0]));
        assert!(gaussian_log_density(&mut g, one, zero, bad).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let one = g.constant(Tensor::vector(vec![1.0]));
        let two = g.constant(Tensor::vector(vec![2.0]));
        let e = g.constant(Tensor::vector(vec![std::f64::consts::E]));
        let kl = kl_diag_gaussian_to_standard(&mut g, zero, one).unwrap();
        assert_eq!(scalar(&g, kl), 0.0);
        let kl = kl_diag_gaussian_to_standard(&mut g, two, one).unwrap();
        assert!((scalar(&g, kl) - 2.0).abs() < 1e-12);
        let kl = kl_diag_gaussian_to_standard(&mut g, zero, e).unwrap();
        let expect = 0.5 * (std::f64::consts::E.powi(2) - 3.0);
        assert!((scalar(&g, kl) - expect).abs() < 1e-12);
        assert!((expect - 2.1945).abs() < 1e-4);
        let neg = g.constant(Tensor::vector(vec![-1.0]));
        assert!(kl_diag_gaussian_to_standard(&mut g, zero, neg).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let mut g = Graph::new();
        let mu = g.input(Tensor::vector(vec![2.0]));
        let sigma = g.input(Tensor::vector(vec![3.0]));
        let eps = Tensor::vector(vec![1.0]);
        let c = reparameterize(&mut g, mu, sigma, Noise::Fixed(&eps)).unwrap();
        assert_eq!(g.value(c).data(), &[5.0]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(mu).unwrap().data(), &[1.0]);
        assert_eq!(grads.wrt(sigma).unwrap().data(), &[1.0]);

        let tiny = g.input(Tensor::vector(vec![SIGMA_FLOOR]));
        let mut rng = Rng::new(1);
        let c = reparameterize(&mut g, mu, tiny, Noise::Sample(&mut rng)).unwrap();
        assert!((g.value(c).data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn reparameterize_is_bitwise_reproducible() {
        let run = || {
            let mut g = Graph::new();
            let mu = g.constant(Tensor::vector(vec![0.1, -0.4, 2.0]));
            let s = g.constant(Tensor::vector(vec![0.5, 1.5, 0.2]));
            let mut rng = Rng::new(99);
            let c = reparameterize(&mut g, mu, s, Noise::Sample(&mut rng)).unwrap();
            g.value(c).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn entropy_of_uniform_logits_is_ln5() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 5, vec![0.3; 5]).unwrap());
        let lp = g.log_softmax(logits).unwrap();
        let h = categorical_entropy(&mut g, lp).unwrap();
        assert!((scalar(&g, h) - 5f64.ln()).abs() < 1e-12);
    }
}
