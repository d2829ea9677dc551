//! Mutual-information constraints on concepts.
//!
//! CLUB bounds I(e; c) from above with a learned conditional Gaussian
//! q(c | e); minimising it makes concepts invariant to the entity's
//! surface identity. The bottleneck term pulls every concept head towards
//! N(0, I), keeping concepts compact.

use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{gaussian_log_density_rows, kl_diag_gaussian_to_standard, positive_scale};
use crate::diffcore::{Activation, Adam, Binder, Graph, Mlp2, ParameterStore, Rng, Tensor, Var};
use crate::encoder::ConceptSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    /// Weight of the CLUB term.
    pub alpha1: f64,
    /// Weight of the bottleneck term.
    pub alpha2: f64,
    /// Predictor steps per learner update.
    pub predictor_steps: usize,
    pub predictor_lr: f64,
    pub predictor_hidden: usize,
    /// Let CLUB gradients reach the entity embeddings as well as the
    /// concepts.
    pub club_through_embedding: bool,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            alpha1: 0.1,
            alpha2: 0.01,
            predictor_steps: 5,
            predictor_lr: 1e-3,
            predictor_hidden: 64,
            club_through_embedding: false,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) || !(self.alpha2 >= 0.0 && self.alpha2.is_finite()) {
            return Err(Error::Config(format!(
                "mi coefficients must be finite and non-negative, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.predictor_lr > 0.0) || self.predictor_hidden == 0 {
            return Err(Error::Config("mi predictor needs a positive learning rate and width".into()));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.alpha1 > 0.0 || self.alpha2 > 0.0
    }
}

/// Conditional diagonal Gaussian q(c | e) with its own parameters and
/// optimizer.
#[derive(Clone, Debug)]
pub struct ClubPredictor {
    pub store: ParameterStore,
    pub opt: Adam,
    mu: Mlp2,
    sigma: Mlp2,
    pub d_e: usize,
    pub d_c: usize,
}

impl ClubPredictor {
    pub fn new(d_e: usize, d_c: usize, hidden: usize, lr: f64, rng: &mut Rng) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mu = Mlp2::new(&mut store, "club.mu", d_e, hidden, d_c, Activation::Tanh, rng)?;
        let sigma = Mlp2::new(&mut store, "club.sigma", d_e, hidden, d_c, Activation::Tanh, rng)?;
        let opt = Adam::new(&store, lr);
        Ok(ClubPredictor {
            store,
            opt,
            mu,
            sigma,
            d_e,
            d_c,
        })
    }

    /// `(μ_q(e), σ_q(e))` for `e[N, d_e]`.
    pub fn predict(&self, g: &mut Graph, p: Binder<'_>, e: Var) -> Result<(Var, Var)> {
        let mu = self.mu.forward(g, p, e)?;
        let raw = self.sigma.forward(g, p, e)?;
        Ok((mu, positive_scale(g, raw)?))
    }

    /// CLUB estimate with q frozen; differentiable in `e` and `c`.
    pub fn estimate(&self, g: &mut Graph, e: Var, c: Var) -> Result<Var> {
        let (mu, sigma) = self.predict(g, Binder::frozen(&self.store), e)?;
        club_estimate(g, mu, sigma, c)
    }

    /// Mean log-likelihood `(1/N) Σ log q(c_i | e_i)` on constant data.
    pub fn log_likelihood(&self, e: &Tensor, c: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (ev, cv) = (g.constant(e.clone()), g.constant(c.clone()));
        let (mu, sigma) = self.predict(&mut g, Binder::frozen(&self.store), ev)?;
        let lp = gaussian_log_density_rows(&mut g, cv, mu, sigma)?;
        let m = g.mean(lp)?;
        Ok(g.value(m).item())
    }

    /// `steps` Adam steps maximising the mean log-likelihood of the pairs
    /// `(e_i, c_i)`. Returns the log-likelihood before each step.
    pub fn train(&mut self, e: &Tensor, c: &Tensor, steps: usize) -> Result<Vec<f64>> {
        if e.rows() != c.rows() || e.last_dim() != self.d_e || c.last_dim() != self.d_c {
            return Err(Error::Dimension {
                op: "train_predictor",
                lhs: e.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut g = Graph::new();
            let (ev, cv) = (g.constant(e.clone()), g.constant(c.clone()));
            let (mu, sigma) = self.predict(&mut g, Binder::trainable(&self.store), ev)?;
            let lp = gaussian_log_density_rows(&mut g, cv, mu, sigma)?;
            let ll = g.mean(lp)?;
            curve.push(g.value(ll).item());
            let loss = g.neg(ll)?;
            g.backward_into(loss, &mut self.store)?;
            self.opt.step(&mut self.store)?;
        }
        Ok(curve)
    }
}

/// `(1/N²) Σ_i Σ_j [log q(c_i|e_i) − log q(c_j|e_i)]` given the predictor's
/// outputs `μ_i, σ_i` for each `e_i` and the concepts `c[N, D]`.
///
/// Expanding the square makes the cross term linear in column sums of `c`
/// and `c²`, so the cost is O(N·D).
pub fn club_estimate(g: &mut Graph, mu: Var, sigma: Var, c: Var) -> Result<Var> {
    let n = g.value(c).rows();
    if n < 2 {
        return Err(Error::Usage(format!("CLUB needs at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let ones = g.constant(Tensor::full(&[1, n], 1.0));
    // w_ik = 1 / (2σ_ik²)
    let s2 = g.square(sigma)?;
    let inv = g.recip(s2)?;
    let w = g.scale(inv, 0.5)?;
    // Positive pairs: −Σ_k w_ik (c_ik − μ_ik)², averaged over i.
    let diff = g.sub(c, mu)?;
    let d2 = g.square(diff)?;
    let pos = g.mul(w, d2)?;
    let pos = g.sum(pos)?;
    // Cross pairs: Σ_k w_ik (S2_k − 2 μ_ik S1_k + N μ_ik²), averaged over i, j.
    let s1 = g.matmul(ones, c)?;
    let c2 = g.square(c)?;
    let s2c = g.matmul(ones, c2)?;
    let a = g.matmul_nt(w, s2c)?;
    let wmu = g.mul(w, mu)?;
    let b = g.matmul_nt(wmu, s1)?;
    let mu2 = g.square(mu)?;
    let wmu2 = g.mul(w, mu2)?;
    let a = g.sum(a)?;
    let b = g.sum(b)?;
    let cc = g.sum(wmu2)?;
    let b2 = g.scale(b, -2.0)?;
    let cn = g.scale(cc, nf)?;
    let cross = g.add(a, b2)?;
    let cross = g.add(cross, cn)?;
    let cross = g.scale(cross, 1.0 / (nf * nf))?;
    let pos = g.scale(pos, -1.0 / nf)?;
    g.add(pos, cross)
}

/// Rows of `[B, n, ·]` belonging to entity slot `slot`, over episodes
/// where the slot is occupied.
fn slot_rows(set: &ConceptSet, slot: usize) -> Vec<Option<usize>> {
    set.slot_mask
        .iter()
        .enumerate()
        .filter(|(_, m)| m[slot])
        .map(|(b, _)| Some(b * set.slots + slot))
        .collect()
}

/// Entity embeddings and concepts of one slot across the batch, as
/// `(e[N, d_e], c[N, m·d_c])`.
pub fn slot_pairs(g: &mut Graph, set: &ConceptSet, slot: usize) -> Result<(Var, Var)> {
    let idx = slot_rows(set, slot);
    let d_e = g.value(set.entities).last_dim();
    let d_c = g.value(set.concepts).last_dim();
    let e = g.reshape(set.entities, &[set.batch * set.slots, d_e])?;
    let c = g.reshape(set.concepts, &[set.batch * set.slots, d_c])?;
    Ok((g.gather_rows(e, idx.clone())?, g.gather_rows(c, idx)?))
}

/// Detached `(e, c)` pairs of every slot, stacked: training data for the
/// predictor.
pub fn detached_pairs(g: &Graph, set: &ConceptSet) -> Result<(Tensor, Tensor)> {
    let ev = g.value(set.entities);
    let cv = g.value(set.concepts);
    let (d_e, d_c) = (ev.last_dim(), cv.last_dim());
    let mut e = Vec::new();
    let mut c = Vec::new();
    let mut rows = 0;
    for (b, mask) in set.slot_mask.iter().enumerate() {
        for (i, &ok) in mask.iter().enumerate() {
            if ok {
                let r = b * set.slots + i;
                e.extend_from_slice(ev.row(r));
                c.extend_from_slice(cv.row(r));
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(Error::Invalid("no entity samples for the predictor".into()));
    }
    Ok((Tensor::new(&[rows, d_e], e)?, Tensor::new(&[rows, d_c], c)?))
}

/// Σ over entity slots of the CLUB estimate on that slot's pairs. Slots
/// with fewer than two samples contribute nothing. Gradients reach the
/// encoder through `c` (and through `e` when `through_embedding`).
pub fn club_loss(g: &mut Graph, set: &ConceptSet, q: &ClubPredictor, through_embedding: bool) -> Result<Var> {
    let mut total: Option<Var> = None;
    for slot in 0..set.slots {
        if slot_rows(set, slot).len() < 2 {
            continue;
        }
        let (e, c) = slot_pairs(g, set, slot)?;
        let e = if through_embedding { e } else { g.detach(e) };
        let est = q.estimate(g, e, c)?;
        total = Some(match total {
            Some(t) => g.add(t, est)?,
            None => est,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// `(1/N) Σ_samples Σ_i Σ_j KL(N(μ_ij, σ_ij) ‖ N(0, I))` over occupied
/// slots, with N the number of episodes in the batch.
pub fn vib_loss(g: &mut Graph, set: &ConceptSet) -> Result<Var> {
    let mut total: Option<Var> = None;
    let full = set.slot_mask.iter().all(|m| m.iter().all(|&x| x));
    for level in &set.levels {
        let kl = if full {
            kl_diag_gaussian_to_standard(g, level.mu, level.sigma)?
        } else {
            let d = g.value(level.mu).last_dim();
            let rows: Vec<Option<usize>> = set
                .slot_mask
                .iter()
                .enumerate()
                .flat_map(|(b, m)| {
                    m.iter()
                        .enumerate()
                        .filter(|(_, &ok)| ok)
                        .map(move |(i, _)| Some(b * set.slots + i))
                })
                .collect();
            let mu = g.reshape(level.mu, &[set.batch * set.slots, d])?;
            let sigma = g.reshape(level.sigma, &[set.batch * set.slots, d])?;
            let mu = g.gather_rows(mu, rows.clone())?;
            let sigma = g.gather_rows(sigma, rows)?;
            kl_diag_gaussian_to_standard(g, mu, sigma)?
        };
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("concept set has no levels".into()))?;
    g.scale(total, 1.0 / set.batch as f64)
}

/// `L_RL + α1·L_CLUB + α2·L_VIB`.
pub fn combined_loss(g: &mut Graph, rl: Var, club: Var, vib: Var, alpha1: f64, alpha2: f64) -> Result<Var> {
    if alpha1 < 0.0 || alpha2 < 0.0 {
        return Err(Error::Config("mi coefficients must be non-negative".into()));
    }
    let a = g.scale(club, alpha1)?;
    let b = g.scale(vib, alpha2)?;
    let s = g.add(rl, a)?;
    g.add(s, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::check_inputs;

    /// Direct O(N²) evaluation of the CLUB bracket average.
    fn club_naive(mu: &Tensor, sigma: &Tensor, c: &Tensor) -> f64 {
        let n = c.rows();
        let d = c.last_dim();
        let lq = |i: usize, j: usize| -> f64 {
            (0..d)
                .map(|k| {
                    let (m, s, x) = (mu.row(i)[k], sigma.row(i)[k], c.row(j)[k]);
                    -0.5 * crate::diffcore::ops::LN_2PI - s.ln() - (x - m).powi(2) / (2.0 * s * s)
                })
                .sum()
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += lq(i, i) - lq(i, j);
            }
        }
        total / (n * n) as f64
    }

    fn estimate(mu: &Tensor, sigma: &Tensor, c: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (m, s, x) = (g.constant(mu.clone()), g.constant(sigma.clone()), g.constant(c.clone()));
        let v = club_estimate(&mut g, m, s, x).unwrap();
        g.value(v).item()
    }

    #[test]
    fn two_point_hand_example() {
        // q(c|e) = N(c; e, 1) on pairs (0,0) and (1,1).
        let mu = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let sigma = Tensor::full(&[2, 1], 1.0);
        let c = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((estimate(&mu, &sigma, &c) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn identical_pairs_give_zero() {
        let mu = Tensor::matrix(3, 2, vec![0.3, -1.0, 0.3, -1.0, 0.3, -1.0]).unwrap();
        let sigma = Tensor::matrix(3, 2, vec![0.5, 2.0, 0.5, 2.0, 0.5, 2.0]).unwrap();
        let c = Tensor::matrix(3, 2, vec![1.0, 4.0, 1.0, 4.0, 1.0, 4.0]).unwrap();
        assert!(estimate(&mu, &sigma, &c).abs() < 1e-12);
    }

    #[test]
    fn expansion_matches_pairwise_sum() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let (n, d) = (2 + rng.below(6), 1 + rng.below(4));
            let mu = Tensor::new(&[n, d], rng.normals(n * d)).unwrap();
            let sigma = Tensor::new(&[n, d], (0..n * d).map(|_| rng.uniform_range(0.3, 2.0)).collect()).unwrap();
            let c = Tensor::new(&[n, d], rng.normals(n * d)).unwrap();
            assert!((estimate(&mu, &sigma, &c) - club_naive(&mu, &sigma, &c)).abs() < 1e-10);
        }
    }

    #[test]
    fn single_sample_is_rejected() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::full(&[1, 2], 1.0));
        assert!(matches!(club_estimate(&mut g, t, t, t), Err(Error::Usage(_))));
    }

    #[test]
    fn estimate_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let (n, d) = (4, 3);
        let inputs = vec![
            Tensor::new(&[n, d], rng.normals(n * d)).unwrap(),
            Tensor::new(&[n, d], (0..n * d).map(|_| rng.uniform_range(0.5, 1.5)).collect()).unwrap(),
            Tensor::new(&[n, d], rng.normals(n * d)).unwrap(),
        ];
        let err = check_inputs(&inputs, |g, v| club_estimate(g, v[0], v[1], v[2]), None).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_predictor_steps_leave_q_unchanged() {
        let mut q = ClubPredictor::new(2, 2, 8, 1e-2, &mut Rng::new(0)).unwrap();
        let before = q.store.clone();
        let e = Tensor::full(&[3, 2], 1.0);
        q.train(&e, &e, 0).unwrap();
        for (a, b) in before.iter().zip(q.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        let mut g = Graph::new();
        let (a, b, c) = (
            g.constant(Tensor::scalar(1.0)),
            g.constant(Tensor::scalar(0.5)),
            g.constant(Tensor::scalar(0.25)),
        );
        let l = combined_loss(&mut g, a, b, c, 0.1, 0.01).unwrap();
        assert!((g.value(l).item() - 1.0525).abs() < 1e-12);
        let l0 = combined_loss(&mut g, a, b, c, 0.0, 0.0).unwrap();
        assert_eq!(g.value(l0).item(), 1.0);
        assert!(combined_loss(&mut g, a, b, c, -0.1, 0.0).is_err());
    }
}
