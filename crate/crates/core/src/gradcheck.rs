//! Central finite-difference checks of graph gradients.
//!
//! Used by unit tests and the acceptance suite. Everything runs in `f64`.

use alloc::vec::Vec;

use crate::graph::{Graph, Trainable, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over the checked coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, x| m.max(libm::fabs(*x)));
    let floor = 1e-6 * (1.0 + scale);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: analytic.len(),
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = libm::fabs(*a).max(libm::fabs(*n)).max(floor);
        let err = libm::fabs(a - n) / denom;
        if err > out.max_rel_err || !err.is_finite() {
            out = GradCheck {
                max_rel_err: if err.is_finite() { err } else { f64::INFINITY },
                worst_index: i,
                analytic: *a,
                numeric: *n,
                checked: analytic.len(),
            };
        }
    }
    out
}

/// Check `d f(x) / d x` for a scalar-valued graph function of one input.
pub fn check_input<F>(x: &Tensor, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Var,
{
    input_check(|_| Graph::detached(), x, eps, f)
}

/// Like [`check_input`], with `store` bound as constant parameters.
pub fn check_input_in<F>(store: &ParamStore, x: &Tensor, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Var,
{
    input_check(
        |grad| {
            if grad {
                Graph::new(store, Trainable::None)
            } else {
                Graph::inference(store)
            }
        },
        x,
        eps,
        f,
    )
}

fn input_check<'p, M, F>(make: M, x: &Tensor, eps: f64, f: F) -> GradCheck
where
    M: Fn(bool) -> Graph<'p>,
    F: Fn(&mut Graph<'p>, Var) -> Var,
{
    let analytic = {
        let mut g = make(true);
        let xv = g.input(x.clone());
        let y = f(&mut g, xv);
        let grads = g.backward(y);
        grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |t: Tensor| {
        let mut g = make(false);
        let xv = g.constant(t);
        let y = f(&mut g, xv);
        g.value(y).item()
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus) - eval(minus)) / (2.0 * eps));
    }
    compare(analytic.data(), &numeric)
}

/// Check the gradient of a scalar graph function w.r.t. one named parameter.
pub fn check_param<F>(store: &ParamStore, name: &str, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store, Trainable::All);
        let y = f(&mut g);
        let grads = g.backward(y);
        grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("param").shape()))
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::inference(s);
        let y = f(&mut g);
        g.value(y).item()
    };
    let n = store.get(name).expect("param").numel();
    let mut numeric = Vec::with_capacity(n);
    let mut work = store.clone();
    for i in 0..n {
        let orig = store.get(name).unwrap().data()[i];
        work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
        let fp = eval(&work);
        work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
        let fm = eval(&work);
        work.get_mut(name).unwrap().data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    compare(analytic.data(), &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::sync::Arc;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-5;
    const EPS: f64 = 1e-6;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Random projection to a scalar so every output element matters.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(g.shape(y), 1.0, &mut r);
        let wv = g.constant(w);
        let p = g.mul(y, wv);
        g.sum(p)
    }

    fn assert_ok(c: GradCheck, what: &str) {
        assert!(c.passes(TOL), "{what}: {c:?}");
    }

    #[test]
    fn elementwise_ops() {
        let x = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng());
        type Op = fn(&mut Graph, Var) -> Var;
        let ops: [(&str, Op); 9] = [
            ("sin", |g, x| g.sin(x)),
            ("exp", |g, x| g.exp(x)),
            ("square", |g, x| g.square(x)),
            ("softplus", |g, x| g.softplus(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("tanh", |g, x| g.tanh(x)),
            ("leaky", |g, x| g.leaky_relu(x, 0.2)),
            ("scale", |g, x| {
                let s = g.scale(x, -1.5);
                g.add_scalar(s, 0.3)
            }),
            ("mean", |g, x| {
                let s = g.square(x);
                g.mean(s)
            }),
        ];
        for (name, op) in ops {
            let c = check_input(&x, EPS, |g, x| {
                let y = op(g, x);
                project(g, y, 1)
            });
            assert_ok(c, name);
        }
    }

    #[test]
    fn binary_ops() {
        let b = Tensor::uniform(&[2, 5], 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::uniform(&[2, 5], -1.0, 1.0, &mut rng());
        for which in 0..4 {
            let bb = b.clone();
            let c = check_input(&x, EPS, move |g, x| {
                let bv = g.input(bb.clone());
                let y = match which {
                    0 => g.add(x, bv),
                    1 => g.sub(bv, x),
                    2 => g.mul(x, bv),
                    _ => {
                        let d = g.div(x, bv);
                        let e = g.div(bv, x);
                        g.add(d, e)
                    }
                };
                project(g, y, 3)
            });
            assert_ok(c, "binary");
        }
    }

    #[test]
    fn shape_ops() {
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng());
        let c = check_input(&x, EPS, |g, x| {
            let p = g.permute(x, &[2, 0, 1]);
            let n = g.narrow(p, 2, 1, 2);
            let r = g.reshape(n, &[4, 4]);
            let other = g.narrow(x, 1, 0, 1);
            let o = g.reshape(other, &[2, 4]);
            let o2 = g.reshape(o, &[1, 8]);
            let o3 = g.reshape(o2, &[4, 2]);
            let cat = g.concat(&[r, o3, r], 1);
            project(g, cat, 4)
        });
        assert_ok(c, "shape");
    }

    #[test]
    fn linear_and_film() {
        let mut r = rng();
        let x = Tensor::randn(&[6, 3], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        let gamma = Tensor::randn(&[2, 4], 1.0, &mut r);
        let beta = Tensor::randn(&[2, 4], 1.0, &mut r);
        let mut store = ParamStore::new();
        store.insert("w", w);
        store.insert("b", b);
        store.insert("gamma", gamma);
        store.insert("beta", beta);
        let f = |g: &mut Graph, x: Var| {
            let w = g.p("w");
            let b = g.p("b");
            let h = g.linear(x, w, Some(b));
            let h = g.reshape(h, &[2, 3, 4]);
            let gm = g.p("gamma");
            let bt = g.p("beta");
            let y = g.film_sin(h, gm, bt);
            project(g, y, 5)
        };
        for name in ["w", "b", "gamma", "beta"] {
            let xx = x.clone();
            assert_ok(
                check_param(&store, name, EPS, |g| {
                    let xv = g.constant(xx.clone());
                    f(g, xv)
                }),
                name,
            );
        }
        let mut g0 = Graph::new(&store, Trainable::None);
        let xv = g0.input(x.clone());
        let y = f(&mut g0, xv);
        let an = g0.backward(y).wrt(xv).unwrap().clone();
        let c = check_input(&x, EPS, |g, x| {
            let w = g.constant(store.get("w").unwrap().clone());
            let b = g.constant(store.get("b").unwrap().clone());
            let h = g.linear(x, w, Some(b));
            let h = g.reshape(h, &[2, 3, 4]);
            let gm = g.constant(store.get("gamma").unwrap().clone());
            let bt = g.constant(store.get("beta").unwrap().clone());
            let y = g.film_sin(h, gm, bt);
            project(g, y, 5)
        });
        assert_ok(c, "linear input");
        assert_eq!(an.shape(), x.shape());
    }

    #[test]
    fn render_ops() {
        let mut r = rng();
        let sigma = Tensor::uniform(&[3, 5], 0.0, 3.0, &mut r);
        let delta: Arc<Vec<f64>> = Arc::new((0..15).map(|i| 0.1 + 0.01 * i as f64).collect());
        let vals = Tensor::randn(&[3, 5, 2], 1.0, &mut r);
        let d2 = delta.clone();
        let v2 = vals.clone();
        let c = check_input(&sigma, EPS, move |g, s| {
            let w = g.render_weights(s, d2.clone());
            let v = g.constant(v2.clone());
            let o = g.composite(w, v);
            project(g, o, 6)
        });
        assert_ok(c, "render_weights");
        let c = check_input(&vals, EPS, |g, v| {
            let s = g.constant(sigma.clone());
            let w = g.render_weights(s, delta.clone());
            let o = g.composite(w, v);
            project(g, o, 6)
        });
        assert_ok(c, "composite");
    }

    #[test]
    fn conv_and_resampling() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut r);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::randn(&[4, 3, 3, 3], 0.3, &mut r));
        store.insert("b", Tensor::randn(&[4], 0.3, &mut r));
        for stride in [1, 2] {
            let f = move |g: &mut Graph, x: Var| {
                let w = g.p("w");
                let b = g.p("b");
                let y = g.conv2d(x, w, Some(b), stride, 1);
                let u = g.upsample_nearest(y, 2);
                let d = g.resize_nearest(u, 3, 5);
                project(g, d, 8)
            };
            let xx = x.clone();
            for name in ["w", "b"] {
                assert_ok(
                    check_param(&store, name, EPS, |g| {
                        let xv = g.constant(xx.clone());
                        f(g, xv)
                    }),
                    "conv param",
                );
            }
            let st = store.clone();
            let c = check_input(&x, EPS, move |g, x| {
                let w = g.constant(st.get("w").unwrap().clone());
                let b = g.constant(st.get("b").unwrap().clone());
                let y = g.conv2d(x, w, Some(b), stride, 1);
                let u = g.upsample_nearest(y, 2);
                let d = g.resize_nearest(u, 3, 5);
                project(g, d, 8)
            });
            assert_ok(c, "conv input");
        }
    }

    #[test]
    fn normalization_ops() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4, 4], 2.0, &mut r);
        let scale = Tensor::randn(&[2, 3], 1.0, &mut r);
        let shift = Tensor::randn(&[2, 3], 1.0, &mut r);
        let (s2, t2) = (scale.clone(), shift.clone());
        let c = check_input(&x, EPS, move |g, x| {
            let n = g.instance_norm(x, 1e-5);
            let s = g.constant(s2.clone());
            let t = g.constant(t2.clone());
            let y = g.channel_affine(n, s, t);
            let sm = g.softmax_channels(y);
            project(g, sm, 9)
        });
        assert_ok(c, "norm input");
        let c = check_input(&scale, EPS, |g, s| {
            let xv = g.constant(x.clone());
            let t = g.constant(shift.clone());
            let y = g.channel_affine(xv, s, t);
            project(g, y, 9)
        });
        assert_ok(c, "affine scale");
        let m = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut r);
        let c = check_input(&m, EPS, |g, m| {
            let b = g.broadcast_channels(m, 3);
            project(g, b, 10)
        });
        assert_ok(c, "broadcast");
    }

    #[test]
    fn bilinear_gather_and_filter() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
        let taps = (0..9)
            .map(|i| {
                [
                    (i as u32, 0.25),
                    ((i + 1) as u32, 0.25),
                    ((i + 4) as u32, 0.4),
                    ((i + 5) as u32, if i == 3 { 0.0 } else { 0.1 }),
                ]
            })
            .collect();
        let plan = Arc::new(crate::graph::SamplePlan {
            batch: 1,
            src_hw: (4, 4),
            dst_hw: (3, 3),
            taps,
        });
        let c = check_input(&x, EPS, |g, x| {
            let y = g.gather_bilinear(x, plan.clone());
            project(g, y, 11)
        });
        assert_ok(c, "gather");
        let k = Arc::new(vec![0.2, 0.5, 0.3]);
        let c = check_input(&x, EPS, |g, x| {
            let y = g.separable_filter_valid(x, k.clone());
            project(g, y, 12)
        });
        assert_ok(c, "filter");
    }
}
