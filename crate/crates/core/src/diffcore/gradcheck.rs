//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::nn::{gru_sequence, Binder, Gru, SelfAttention};
use super::ops::{self, Noise};
use super::params::ParameterStore;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 10;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<6} {:<28} instances={:<3} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_rel_err
        )
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the gradient of scalar `f(inputs)` against central differences
/// for every input coordinate (or a random subset of `sample` coordinates).
pub fn check_inputs<F>(inputs: &[Tensor], f: F, sample: Option<(usize, &mut Rng)>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if let Some((k, rng)) = sample {
        rng.shuffle(&mut coords);
        coords.truncate(k);
    }
    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (i, j) in coords {
        let orig = vals[i].data()[j];
        vals[i].data_mut()[j] = orig + FD_STEP;
        let fp = eval(&vals)?;
        vals[i].data_mut()[j] = orig - FD_STEP;
        let fm = eval(&vals)?;
        vals[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}

/// Same as [`check_inputs`] but perturbs entries of a parameter store.
pub fn check_store<F>(store: &ParameterStore, f: F, sample: usize, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut work = store.clone();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    work.zero_grad();
    g.backward_into(out, &mut work)?;
    let analytic: Vec<Tensor> = work.iter().map(|p| p.grad.clone()).collect();
    work.zero_grad();

    let mut coords: Vec<(usize, usize)> = work
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    rng.shuffle(&mut coords);
    coords.truncate(sample);
    let ids: Vec<_> = work.iter().map(|p| work.id(&p.name).unwrap()).collect();
    let mut worst: f64 = 0.0;
    for (i, j) in coords {
        let id = ids[i];
        let orig = work.get(id).value.data()[j];
        work.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
        let fp = {
            let mut g = Graph::new();
            let o = f(&mut g, &work)?;
            g.value(o).item()
        };
        work.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
        let fm = {
            let mut g = Graph::new();
            let o = f(&mut g, &work)?;
            g.value(o).item()
        };
        work.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}

/// A named family of randomised gradient checks.
pub struct GradCheck {
    pub name: &'static str,
    /// Runs one random instance and returns its max relative error.
    pub run: Box<dyn Fn(&mut Rng) -> Result<f64>>,
}

impl GradCheck {
    pub fn new(name: &'static str, run: impl Fn(&mut Rng) -> Result<f64> + 'static) -> Self {
        GradCheck {
            name,
            run: Box::new(run),
        }
    }

    pub fn execute(&self, rng: &mut Rng, instances: usize) -> CheckReport {
        let mut worst: f64 = 0.0;
        let mut failed = false;
        for _ in 0..instances {
            match (self.run)(rng) {
                Ok(e) => worst = worst.max(e),
                Err(_) => failed = true,
            }
        }
        if failed {
            worst = f64::INFINITY;
        }
        CheckReport {
            name: self.name.to_string(),
            instances,
            max_rel_err: worst,
            passed: !failed && worst <= REL_TOL,
        }
    }
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n)).expect("shape")
}

fn rand_pos(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(0.3, 2.0)).collect()).expect("shape")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Reduces a tensor to a scalar through fixed random weights so that every
/// output coordinate carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(rand_t(rng, &shape));
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn unary_check(name: &'static str, f: fn(&mut Graph, Var) -> Result<Var>, positive: bool) -> GradCheck {
    GradCheck::new(name, move |rng| {
        let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
        let x = if positive { rand_pos(rng, &shape) } else { rand_t(rng, &shape) };
        let wseed = rng.next_u64();
        check_inputs(
            &[x],
            |g, v| {
                let y = f(g, v[0])?;
                weighted_sum(g, y, &mut Rng::new(wseed))
            },
            None,
        )
    })
}

/// Every primitive and composite operation of the differentiation core.
pub fn primitive_checks() -> Vec<GradCheck> {
    let mut checks = vec![
        GradCheck::new("matmul", |rng| {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let (a, b) = (rand_t(rng, &[m, k]), rand_t(rng, &[k, n]));
            let s = rng.next_u64();
            check_inputs(
                &[a, b],
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("matmul_nt_batched", |rng| {
            let (bt, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
            let (a, b) = (rand_t(rng, &[bt, m, k]), rand_t(rng, &[bt, n, k]));
            let s = rng.next_u64();
            check_inputs(
                &[a, b],
                |g, v| {
                    let y = g.matmul_nt(v[0], v[1])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("matmul_batched", |rng| {
            let (bt, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
            let (a, b) = (rand_t(rng, &[bt, m, k]), rand_t(rng, &[bt, k, n]));
            let s = rng.next_u64();
            check_inputs(
                &[a, b],
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("add_sub_mul", |rng| {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let (a, b) = (rand_t(rng, &shape), rand_t(rng, &shape));
            let s = rng.next_u64();
            check_inputs(
                &[a, b],
                |g, v| {
                    let x = g.add(v[0], v[1])?;
                    let y = g.sub(v[0], v[1])?;
                    let z = g.mul(x, y)?;
                    let z = g.mul(z, v[1])?;
                    weighted_sum(g, z, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("add_row", |rng| {
            let (r, k) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let (x, b) = (rand_t(rng, &[r, k]), rand_t(rng, &[k]));
            let s = rng.next_u64();
            check_inputs(
                &[x, b],
                |g, v| {
                    let y = g.add_row(v[0], v[1])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("affine", |rng| {
            let shape = [dim(rng, 1, 6)];
            let x = rand_t(rng, &shape);
            let (a, b) = (rng.normal(), rng.normal());
            let s = rng.next_u64();
            check_inputs(
                &[x],
                |g, v| {
                    let y = g.affine(v[0], a, b)?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        unary_check("sigmoid", |g, x| g.sigmoid(x), false),
        unary_check("tanh", |g, x| g.tanh(x), false),
        unary_check("relu", |g, x| g.relu(x), false),
        unary_check("softplus", |g, x| g.softplus(x), false),
        unary_check("exp", |g, x| g.exp(x), false),
        unary_check("ln", |g, x| g.ln(x), true),
        unary_check("square", |g, x| g.square(x), false),
        unary_check("recip", |g, x| g.recip(x), true),
        unary_check("softmax", |g, x| g.softmax(x), false),
        unary_check("log_softmax", |g, x| g.log_softmax(x), false),
        unary_check("sum_last", |g, x| g.sum_last(x), false),
        GradCheck::new("sum_mean", |rng| {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let x = rand_t(rng, &shape);
            check_inputs(
                &[x],
                |g, v| {
                    let s = g.sum(v[0])?;
                    let m = g.mean(v[0])?;
                    let sm = g.mul(s, m)?;
                    g.sum(sm)
                },
                None,
            )
        }),
        GradCheck::new("concat_slice", |rng| {
            let r = dim(rng, 1, 3);
            let (ka, kb) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let (a, b) = (rand_t(rng, &[r, ka]), rand_t(rng, &[r, kb]));
            let start = rng.below(ka + kb);
            let len = 1 + rng.below(ka + kb - start);
            let s = rng.next_u64();
            check_inputs(
                &[a, b],
                |g, v| {
                    let c = g.concat(&[v[0], v[1], v[0]])?;
                    let c = g.slice_last(c, start, len)?;
                    weighted_sum(g, c, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("gather_rows", |rng| {
            let (r, k) = (dim(rng, 1, 4), dim(rng, 1, 3));
            let x = rand_t(rng, &[r, k]);
            let idx: Vec<Option<usize>> = (0..dim(rng, 1, 6))
                .map(|_| if rng.below(4) == 0 { None } else { Some(rng.below(r)) })
                .collect();
            let s = rng.next_u64();
            check_inputs(
                &[x],
                |g, v| {
                    let y = g.gather_rows(v[0], idx.clone())?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("embed_mean", |rng| {
            let (vocab, k) = (dim(rng, 2, 6), dim(rng, 1, 3));
            let table = rand_t(rng, &[vocab, k]);
            let bags: Vec<Vec<usize>> = (0..dim(rng, 1, 4))
                .map(|_| (0..dim(rng, 1, 3)).map(|_| rng.below(vocab)).collect())
                .collect();
            let s = rng.next_u64();
            check_inputs(
                &[table],
                |g, v| {
                    let y = g.embed_mean(v[0], bags.clone())?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("reshape", |rng| {
            let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let x = rand_t(rng, &[a, b]);
            let s = rng.next_u64();
            check_inputs(
                &[x],
                |g, v| {
                    let y = g.reshape(v[0], &[b, a])?;
                    let y = g.tanh(y)?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("conv3x3", |rng| {
            let (b, h, w, c, o) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 2), dim(rng, 1, 2));
            let x = rand_t(rng, &[b, h, w, c]);
            let k = rand_t(rng, &[9 * c, o]);
            let s = rng.next_u64();
            check_inputs(
                &[x, k],
                |g, v| {
                    let y = g.conv3x3(v[0], v[1])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("select_last", |rng| {
            let (r, k) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let x = rand_t(rng, &[r, k]);
            let idx: Vec<usize> = (0..r).map(|_| rng.below(k)).collect();
            let s = rng.next_u64();
            check_inputs(
                &[x],
                |g, v| {
                    let y = g.select_last(v[0], idx.clone())?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("linear", |rng| {
            let (r, di, d) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let ins = [rand_t(rng, &[r, di]), rand_t(rng, &[di, d]), rand_t(rng, &[d])];
            let s = rng.next_u64();
            check_inputs(
                &ins,
                |g, v| {
                    let y = ops::linear(g, v[0], v[1], v[2])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("scaled_dot_attention", |rng| {
            let (s_len, dk, dv) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3));
            let ins = [rand_t(rng, &[dk]), rand_t(rng, &[s_len, dk]), rand_t(rng, &[s_len, dv])];
            let s = rng.next_u64();
            check_inputs(
                &ins,
                |g, v| {
                    let (ctx, w) = ops::scaled_dot_attention(g, v[0], v[1], v[2])?;
                    let a = weighted_sum(g, ctx, &mut Rng::new(s))?;
                    let b = weighted_sum(g, w, &mut Rng::new(s ^ 1))?;
                    g.add(a, b)
                },
                None,
            )
        }),
        GradCheck::new("gaussian_log_density", |rng| {
            let d = dim(rng, 1, 5);
            let ins = [rand_t(rng, &[d]), rand_t(rng, &[d]), rand_pos(rng, &[d])];
            check_inputs(&ins, |g, v| ops::gaussian_log_density(g, v[0], v[1], v[2]), None)
        }),
        GradCheck::new("kl_diag_gaussian", |rng| {
            let d = dim(rng, 1, 5);
            let ins = [rand_t(rng, &[d]), rand_pos(rng, &[d])];
            check_inputs(&ins, |g, v| ops::kl_diag_gaussian_to_standard(g, v[0], v[1]), None)
        }),
        GradCheck::new("reparameterize", |rng| {
            let d = dim(rng, 1, 5);
            let ins = [rand_t(rng, &[d]), rand_pos(rng, &[d])];
            let eps = rand_t(rng, &[d]);
            let s = rng.next_u64();
            check_inputs(
                &ins,
                |g, v| {
                    let c = ops::reparameterize(g, v[0], v[1], Noise::Fixed(&eps))?;
                    let c = g.tanh(c)?;
                    weighted_sum(g, c, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("positive_scale", |rng| {
            let shape = [dim(rng, 1, 5)];
            let x = rand_t(rng, &shape);
            let s = rng.next_u64();
            check_inputs(
                &[x],
                |g, v| {
                    let y = ops::positive_scale(g, v[0])?;
                    weighted_sum(g, y, &mut Rng::new(s))
                },
                None,
            )
        }),
        GradCheck::new("categorical_entropy", |rng| {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 5)];
            let x = rand_t(rng, &shape);
            check_inputs(
                &[x],
                |g, v| {
                    let lp = g.log_softmax(v[0])?;
                    ops::categorical_entropy(g, lp)
                },
                None,
            )
        }),
    ];
    checks.push(GradCheck::new("gru_sequence", |rng| {
        let (t, di, h) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 4));
        let mut store = ParameterStore::new();
        let gru = Gru::new(&mut store, "gru", di, h, rng)?;
        for p in store.iter_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&rng.normals(n));
        }
        let toks = rand_t(rng, &[t, di]);
        let h0 = rand_t(rng, &[h]);
        let s = rng.next_u64();
        let inputs_err = check_inputs(
            &[toks.clone(), h0.clone()],
            |g, v| {
                let (hs, _) = gru_sequence(g, Binder::trainable(&store), &gru, v[0], Some(v[1]))?;
                weighted_sum(g, hs, &mut Rng::new(s))
            },
            None,
        )?;
        let params_err = check_store(
            &store,
            |g, st| {
                let x = g.constant(toks.clone());
                let h = g.constant(h0.clone());
                let (hs, _) = gru_sequence(g, Binder::trainable(st), &gru, x, Some(h))?;
                weighted_sum(g, hs, &mut Rng::new(s))
            },
            usize::MAX,
            rng,
        )?;
        Ok(inputs_err.max(params_err))
    }));
    checks.push(GradCheck::new("self_attention", |rng| {
        let (n, dx, dk, dq) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3));
        let mut store = ParameterStore::new();
        let sa = SelfAttention::new(&mut store, "sa", dx, dk, dq, rng)?;
        for p in store.iter_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&rng.normals(n));
        }
        let items = rand_t(rng, &[n, dx]);
        let s = rng.next_u64();
        let a = check_inputs(
            &[items.clone()],
            |g, v| {
                let y = sa.forward(g, Binder::trainable(&store), v[0])?;
                weighted_sum(g, y, &mut Rng::new(s))
            },
            None,
        )?;
        let b = check_store(
            &store,
            |g, st| {
                let x = g.constant(items.clone());
                let y = sa.forward(g, Binder::trainable(st), x)?;
                weighted_sum(g, y, &mut Rng::new(s))
            },
            usize::MAX,
            rng,
        )?;
        Ok(a.max(b))
    }));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let mut rng = Rng::new(2024);
        for check in primitive_checks() {
            let report = check.execute(&mut rng, INSTANCES);
            assert!(report.passed, "{report}");
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let bad = GradCheck::new("corrupted_square", |rng| {
            let x = rand_t(rng, &[3]);
            check_inputs(
                &[x],
                |g, v| {
                    let y = g.custom_unary(v[0], |x| x * x, |x| 2.02 * x)?;
                    g.sum(y)
                },
                None,
            )
        });
        let report = bad.execute(&mut Rng::new(0), 3);
        assert!(!report.passed);
        assert_eq!(report.name, "corrupted_square");
        assert!(report.to_string().contains("FAIL"));
    }
}
