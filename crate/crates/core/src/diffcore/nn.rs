//! Parameterised layers. Each layer owns only [`ParamId`]s; values live in
//! a [`ParameterStore`] and are bound into a graph per forward pass.

use super::graph::{Graph, Var};
use super::ops;
use super::params::{ParamId, ParameterStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Binds stored parameters into a graph, either trainable or frozen.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub store: &'a ParameterStore,
    pub frozen: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParameterStore) -> Self {
        Binder { store, frozen: false }
    }

    pub fn frozen(store: &'a ParameterStore) -> Self {
        Binder { store, frozen: true }
    }

    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.frozen {
            g.frozen_param(self.store, id)
        } else {
            g.param(self.store, id)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            w: store.weight(&format!("{name}.w"), d_in, d_out, rng)?,
            b: store.bias(&format!("{name}.b"), d_out)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, x: Var) -> Result<Var> {
        let w = p.bind(g, self.w);
        let b = p.bind(g, self.b);
        ops::linear(g, x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Two linear layers with a hidden nonlinearity.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Mlp2 {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, rng)?,
            act,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, p, x)?;
        let h = match self.act {
            Activation::Tanh => g.tanh(h)?,
            Activation::Relu => g.relu(h)?,
        };
        self.l2.forward(g, p, h)
    }
}

/// Gated recurrent unit with update gate z, reset gate r and candidate
/// state h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h).
#[derive(Clone, Debug)]
pub struct Gru {
    /// Input weights for [z | r | h̃], `[d_in, 3H]`.
    pub w: ParamId,
    /// Recurrent weights for [z | r], `[H, 2H]`.
    pub u_zr: ParamId,
    /// Recurrent weights for the candidate, `[H, H]`.
    pub u_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

/// Output of a GRU run over `T` steps for `R` parallel rows.
pub struct GruOutput {
    pub hiddens: Vec<Var>,
    pub last: Var,
}

impl Gru {
    pub fn new(store: &mut ParameterStore, name: &str, d_in: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.weight(&format!("{name}.w"), d_in, 3 * hidden, rng)?;
        let u_zr = store.weight(&format!("{name}.u_zr"), hidden, 2 * hidden, rng)?;
        let u_h = store.weight(&format!("{name}.u_h"), hidden, hidden, rng)?;
        let b = store.bias(&format!("{name}.b"), 3 * hidden)?;
        Ok(Gru {
            w,
            u_zr,
            u_h,
            b,
            d_in,
            hidden,
        })
    }

    /// Runs the recurrence over `xs` (each `[R, d_in]`). `masks[t]`, when
    /// present, is a `[R, H]` 0/1 constant; rows with 0 keep their previous
    /// state at step `t`. `h0` defaults to zeros.
    pub fn run(
        &self,
        g: &mut Graph,
        p: Binder<'_>,
        xs: &[Var],
        masks: &[Option<Var>],
        h0: Option<Var>,
    ) -> Result<GruOutput> {
        if xs.is_empty() {
            return Err(Error::Invalid("GRU over an empty sequence".into()));
        }
        let rows = g.value(xs[0]).rows();
        let hd = self.hidden;
        let w = p.bind(g, self.w);
        let u_zr = p.bind(g, self.u_zr);
        let u_h = p.bind(g, self.u_h);
        let b = p.bind(g, self.b);
        let mut h = match h0 {
            Some(h) => h,
            None => g.constant(Tensor::zeros(&[rows, hd])),
        };
        let mut hiddens = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            let xw = ops::linear(g, x, w, b)?;
            let x_zr = g.slice_last(xw, 0, 2 * hd)?;
            let x_h = g.slice_last(xw, 2 * hd, hd)?;
            let h_zr = g.matmul(h, u_zr)?;
            let pre_zr = g.add(x_zr, h_zr)?;
            let zr = g.sigmoid(pre_zr)?;
            let z = g.slice_last(zr, 0, hd)?;
            let r = g.slice_last(zr, hd, hd)?;
            let rh = g.mul(r, h)?;
            let rh_u = g.matmul(rh, u_h)?;
            let pre_h = g.add(x_h, rh_u)?;
            let cand = g.tanh(pre_h)?;
            // h_t = h + z ⊙ (h̃ − h), with z zeroed on masked rows.
            let z = match masks.get(t).copied().flatten() {
                Some(m) => g.mul(z, m)?,
                None => z,
            };
            let delta = g.sub(cand, h)?;
            let step = g.mul(z, delta)?;
            h = g.add(h, step)?;
            hiddens.push(h);
        }
        Ok(GruOutput { hiddens, last: h })
    }
}

/// Runs a GRU over the rows of `tokens[T, d_t]` from `h0` (zeros by
/// default). Returns `(hiddens[T, H], final[H])`.
pub fn gru_sequence(g: &mut Graph, p: Binder<'_>, gru: &Gru, tokens: Var, h0: Option<Var>) -> Result<(Var, Var)> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[1] != gru.d_in {
        return Err(Error::Dimension {
            op: "gru_sequence",
            lhs: shape,
            rhs: vec![gru.d_in],
        });
    }
    let steps = shape[0];
    let xs = (0..steps)
        .map(|t| g.gather_rows(tokens, vec![Some(t)]))
        .collect::<Result<Vec<_>>>()?;
    let h0 = match h0 {
        Some(h) => Some(g.reshape(h, &[1, gru.hidden])?),
        None => None,
    };
    let out = gru.run(g, p, &xs, &[], h0)?;
    let all = g.concat(&out.hiddens)?;
    let hiddens = g.reshape(all, &[steps, gru.hidden])?;
    let last = g.reshape(out.last, &[gru.hidden])?;
    Ok((hiddens, last))
}

/// Single-head self-attention with learned query/key/value projections
/// and an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub d_x: usize,
    pub d_k: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d_x: usize,
        d_k: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(SelfAttention {
            wq: store.weight(&format!("{name}.wq"), d_x, d_k, rng)?,
            wk: store.weight(&format!("{name}.wk"), d_x, d_k, rng)?,
            wv: store.weight(&format!("{name}.wv"), d_x, d_k, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_k, d_out, rng)?,
            d_x,
            d_k,
        })
    }

    /// `items[B, n, d_x]` → `[B, n, d_out]`. `mask` is an additive
    /// `[B, n, n]` score mask.
    pub fn forward_batched(&self, g: &mut Graph, p: Binder<'_>, items: Var, mask: Option<Var>) -> Result<Var> {
        let wq = p.bind(g, self.wq);
        let wk = p.bind(g, self.wk);
        let wv = p.bind(g, self.wv);
        let q = g.matmul(items, wq)?;
        let k = g.matmul(items, wk)?;
        let v = g.matmul(items, wv)?;
        let (ctx, _) = ops::attention(g, q, k, v, mask)?;
        self.out.forward(g, p, ctx)
    }

    /// `items[n, d_x]` → `[n, d_out]`.
    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, items: Var) -> Result<Var> {
        let shape = g.shape(items).to_vec();
        if shape.len() != 2 || shape[1] != self.d_x {
            return Err(Error::Dimension {
                op: "self_attention",
                lhs: shape,
                rhs: vec![self.d_x],
            });
        }
        let x3 = g.reshape(items, &[1, shape[0], shape[1]])?;
        let y = self.forward_batched(g, p, x3, None)?;
        let d = g.value(y).last_dim();
        g.reshape(y, &[shape[0], d])
    }
}
