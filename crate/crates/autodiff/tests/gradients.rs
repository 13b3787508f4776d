use osr_autodiff::gradcheck::max_relative_error;
use osr_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces to a scalar through a fixed random projection, so every output element
/// contributes a distinct weight.
fn project(g: &mut Graph<f64>, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&shape, 999));
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn check(name: &str, x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let err = max_relative_error(&x, H, FLOOR, |g, v| {
        let y = f(g, v);
        project(g, y)
    });
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn unary_ops() {
    let x = rand_tensor(&[3, 4], 1);
    check("neg", x.clone(), |g, v| g.neg(v));
    check("exp", x.clone(), |g, v| g.exp(v));
    check("sqr", x.clone(), |g, v| g.sqr(v));
    check("silu", x.clone(), |g, v| g.silu(v));
    check("sigmoid", x.clone(), |g, v| g.sigmoid(v));
    check("tanh", x.clone(), |g, v| g.tanh(v));
    check("softplus", x.clone(), |g, v| g.softplus(v));
    check("leaky", x.clone(), |g, v| g.leaky_relu(v, 0.2));
    check("relu", x.clone(), |g, v| g.relu(v));
    check("abs", x.clone(), |g, v| g.abs(v));
    let pos = x.map(|v| v.abs() + 0.5);
    check("log", pos.clone(), |g, v| g.log(v));
    check("sqrt", pos.clone(), |g, v| g.sqrt(v));
    check("recip", pos, |g, v| g.recip(v));
    check("scale_offset", x, |g, v| {
        let s = g.scale(v, -2.5);
        g.offset(s, 0.3)
    });
}

#[test]
fn broadcast_binary_ops() {
    let x = rand_tensor(&[2, 3, 4], 2);
    let other = rand_tensor(&[3, 1], 3);
    let pos = other.map(|v| v.abs() + 0.5);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let o = if op == 3 { pos.clone() } else { other.clone() };
        // gradient w.r.t. the larger operand
        check(name, x.clone(), |g, v| {
            let c = g.constant(o.clone());
            match op {
                0 => g.add(v, c),
                1 => g.sub(v, c),
                2 => g.mul(v, c),
                _ => g.div(v, c),
            }
        });
        // gradient w.r.t. the broadcast operand
        let xs = x.clone();
        check(name, o.clone(), move |g, v| {
            let c = g.constant(xs.clone());
            match op {
                0 => g.add(c, v),
                1 => g.sub(c, v),
                2 => g.mul(c, v),
                _ => g.div(c, v),
            }
        });
    }
}

#[test]
fn shared_input_accumulates() {
    check("x*x+x", rand_tensor(&[5], 4), |g, v| {
        let a = g.mul(v, v);
        g.add(a, v)
    });
}

#[test]
fn reductions_and_structure() {
    let x = rand_tensor(&[2, 3, 4], 5);
    check("sum_axes", x.clone(), |g, v| g.sum_axes(v, &[0, 2]));
    check("mean_axes", x.clone(), |g, v| g.mean_axes(v, &[1]));
    check("broadcast_to", rand_tensor(&[3, 1], 6), |g, v| g.broadcast_to(v, &[2, 3, 4]));
    check("reshape", x.clone(), |g, v| g.reshape(v, &[6, 4]));
    check("permute", x.clone(), |g, v| g.permute(v, &[2, 0, 1]));
    check("narrow", x.clone(), |g, v| g.narrow(v, 1, 1, 2));
    check("concat", x.clone(), |g, v| {
        let a = g.narrow(v, 2, 0, 1);
        let b = g.sqr(v);
        g.concat(&[b, a, v], 2)
    });
    check("gather", x, |g, v| g.gather(v, &[5], vec![0, 3, 3, 23, 7]));
}

#[test]
fn matmul_variants() {
    let b = rand_tensor(&[4, 5], 8);
    check("matmul shared rhs (lhs)", rand_tensor(&[2, 3, 4], 7), |g, v| {
        let c = g.constant(b.clone());
        g.matmul(v, c)
    });
    let a = rand_tensor(&[2, 3, 4], 7);
    check("matmul shared rhs (rhs)", b.clone(), |g, v| {
        let c = g.constant(a.clone());
        g.matmul(c, v)
    });
    let bb = rand_tensor(&[2, 4, 5], 9);
    check("matmul batched (lhs)", a.clone(), |g, v| {
        let c = g.constant(bb.clone());
        g.matmul(v, c)
    });
    check("matmul batched (rhs)", bb, |g, v| {
        let c = g.constant(a.clone());
        g.matmul(c, v)
    });
    let b3 = rand_tensor(&[2, 4, 5], 10);
    check("matmul broadcast lhs", rand_tensor(&[3, 4], 11), |g, v| {
        let c = g.constant(b3.clone());
        g.matmul(v, c)
    });
}

#[test]
fn conv2d_input_and_kernel() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let x = rand_tensor(&[2, 3, 6, 5], 12);
        let w = rand_tensor(&[4, 3, k, k], 13);
        let wc = w.clone();
        check("conv dx", x.clone(), move |g, v| {
            let c = g.constant(wc.clone());
            g.conv2d(v, c, stride, pad)
        });
        check("conv dw", w, move |g, v| {
            let c = g.constant(x.clone());
            g.conv2d(c, v, stride, pad)
        });
    }
}

#[test]
fn group_norm_and_softmax() {
    check("group_norm", rand_tensor(&[2, 4, 3, 3], 14), |g, v| g.group_norm(v, 2, 1e-5));
    check("softmax", rand_tensor(&[2, 3, 5], 15), |g, v| g.softmax(v));
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    // d/dx (x * stop(x)) = stop(x)
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn parameters_from_two_stores_do_not_alias() {
    let mut a = ParamStore::<f64>::new();
    let mut b = ParamStore::<f64>::new();
    let ia = a.insert("w", Tensor::full(&[2], 3.0)).unwrap();
    let ib = b.insert("w", Tensor::full(&[3], 5.0)).unwrap();
    assert_ne!(ia, ib);
    assert!(a.owns(ia) && !a.owns(ib));
    let mut g = Graph::new();
    let va = g.param(&a, ia);
    let vb = g.param(&b, ib);
    assert_eq!(g.shape(va), &[2]);
    assert_eq!(g.shape(vb), &[3]);
    let sa = g.sum_all(va);
    let sb = g.sum_all(vb);
    let y = g.add(sa, sb);
    let grads = g.backward(y);
    assert_eq!(g.param_grads(&grads).len(), 2);
    let copy = a.clone();
    assert!(!copy.owns(ia));
    assert_eq!(copy.value(copy.id("w").unwrap()), a.value(ia));
}
