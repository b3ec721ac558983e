use aal_tensor::gradcheck::{central_differences, relative_error, spread_coords};
use aal_tensor::{grad, without_grad, Tensor};
use proptest::prelude::*;

fn lcg(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Checks d f / d x against central differences at every coordinate.
fn check_first_order(shape: &[usize], x0: &[f64], f: impl Fn(&Tensor) -> Tensor) {
    let x = Tensor::variable(shape.to_vec(), x0.to_vec());
    let y = f(&x);
    let g = grad(&y, &[&x], false).remove(0);
    let eval = |v: &[f64]| without_grad(|| f(&Tensor::constant(shape.to_vec(), v.to_vec())).item());
    let coords: Vec<usize> = (0..x0.len()).collect();
    let fd = central_differences(eval, x0, &coords, 1e-6);
    for (i, (&a, &n)) in g.data().iter().zip(&fd).enumerate() {
        assert!(relative_error(a, n, 1e-6) < 1e-5, "coord {i}: analytic {a} vs fd {n}");
    }
}

/// Differentiates v·∇f twice through the graph and compares with finite
/// differences of the first-order gradient.
fn check_second_order(shape: &[usize], x0: &[f64], f: impl Fn(&Tensor) -> Tensor) {
    let v = Tensor::constant(shape.to_vec(), lcg(99, x0.len()));
    let hvp_of = |xv: &[f64]| {
        let x = Tensor::variable(shape.to_vec(), xv.to_vec());
        let g = grad(&f(&x), &[&x], false).remove(0);
        g.mul(&v).sum().item()
    };
    let x = Tensor::variable(shape.to_vec(), x0.to_vec());
    let g = grad(&f(&x), &[&x], true).remove(0);
    let h = grad(&g.mul(&v).sum(), &[&x], false).remove(0);
    let coords: Vec<usize> = (0..x0.len()).collect();
    let fd = central_differences(hvp_of, x0, &coords, 1e-5);
    for (i, (&a, &n)) in h.data().iter().zip(&fd).enumerate() {
        assert!(relative_error(a, n, 1e-5) < 1e-4, "coord {i}: analytic {a} vs fd {n}");
    }
}

#[test]
fn quadratic_gradient_is_identity() {
    let x0 = vec![0.5, -2.0, 3.25];
    let x = Tensor::variable(vec![3], x0.clone());
    let g = grad(&x.square().sum().scale(0.5), &[&x], false).remove(0);
    assert_eq!(g.data(), x0.as_slice());
}

#[test]
fn constant_output_gives_zero_gradient() {
    let x = Tensor::variable(vec![4], vec![1.0; 4]);
    let y = Tensor::scalar(3.0);
    let g = grad(&y, &[&x], false).remove(0);
    assert_eq!(g.data(), &[0.0; 4]);
}

#[test]
fn elementwise_and_broadcast_ops() {
    let x0 = lcg(1, 12);
    let b = Tensor::constant(vec![1, 4], vec![0.3, -0.2, 1.5, 2.0]);
    check_first_order(&[3, 4], &x0, |x| {
        let y = x.mul(&b).add(&x.exp().scale(0.1)).sub(&b.div(&x.square().add_scalar(1.0)));
        y.sqrt_safe().sum()
    });
    check_second_order(&[3, 4], &x0, |x| x.mul(&b).exp().add(&x.square().add_scalar(2.0).ln()).sum());
}

trait SqrtSafe {
    fn sqrt_safe(&self) -> Tensor;
}

impl SqrtSafe for Tensor {
    fn sqrt_safe(&self) -> Tensor {
        self.square().add_scalar(1.0).sqrt()
    }
}

#[test]
fn reductions_and_reshape() {
    let x0 = lcg(2, 24);
    check_first_order(&[2, 3, 4], &x0, |x| {
        let m = x.sum_axes_keepdim(&[0, 2]).scale(1.0 / 8.0);
        let c = x.sub(&m);
        c.square().sum_axes_keepdim(&[0, 2]).reshape(&[3]).sqrt().sum()
    });
    check_second_order(&[2, 3, 4], &x0, |x| {
        let m = x.sum_axes_keepdim(&[0, 2]).scale(1.0 / 8.0);
        x.sub(&m).square().sum().add(&m.broadcast_to(&[2, 3, 4]).mul(x).sum())
    });
}

#[test]
fn matmul_and_softmax() {
    let w = Tensor::constant(vec![4, 3], lcg(3, 12));
    let x0 = lcg(4, 8);
    let onehot = Tensor::constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let f = |x: &Tensor| x.reshape(&[2, 4]).matmul(&w).log_softmax().mul(&onehot).sum().neg();
    check_first_order(&[8], &x0, f);
    check_second_order(&[8], &x0, f);
    check_first_order(&[8], &x0, |x| w.t().matmul(&x.reshape(&[4, 2])).t().square().sum());
}

#[test]
fn convolution_first_and_second_order() {
    let w = Tensor::constant(vec![3, 2, 3, 3], lcg(5, 54));
    let x0 = lcg(6, 2 * 2 * 5 * 4);
    let f = |x: &Tensor| x.conv2d(&w, 1).square().sum().scale(0.5);
    check_first_order(&[2, 2, 5, 4], &x0, f);
    check_second_order(&[2, 2, 5, 4], &x0, f);

    let x = Tensor::constant(vec![2, 2, 5, 4], x0);
    let w0 = lcg(7, 54);
    let g = |w: &Tensor| x.conv2d(w, 1).square().sum().scale(0.5);
    check_first_order(&[3, 2, 3, 3], &w0, g);
    check_second_order(&[3, 2, 3, 3], &w0, g);
}

#[test]
fn mixed_second_derivative_through_conv_weight_and_input() {
    // d/dx of v·∇_w f: exercises the adjoint-of-adjoint rules.
    let xs = vec![1, 1, 4, 4];
    let ws = vec![2, 1, 3, 3];
    let x0 = lcg(8, 16);
    let w0 = lcg(9, 18);
    let v = Tensor::constant(ws.clone(), lcg(10, 18));
    let mixed = |xv: &[f64]| {
        let x = Tensor::constant(xs.clone(), xv.to_vec());
        let w = Tensor::variable(ws.clone(), w0.clone());
        let y = x.conv2d(&w, 1).relu_free_tanh_like().sum();
        grad(&y, &[&w], false).remove(0).mul(&v).sum().item()
    };
    let x = Tensor::variable(xs.clone(), x0.clone());
    let w = Tensor::variable(ws.clone(), w0.clone());
    let y = x.conv2d(&w, 1).relu_free_tanh_like().sum();
    let gw = grad(&y, &[&w], true).remove(0);
    let hx = grad(&gw.mul(&v).sum(), &[&x], false).remove(0);
    let coords: Vec<usize> = (0..16).collect();
    let fd = central_differences(mixed, &x0, &coords, 1e-5);
    for (a, n) in hx.data().iter().zip(&fd) {
        assert!(relative_error(*a, *n, 1e-5) < 1e-4, "{a} vs {n}");
    }
}

trait Smooth {
    fn relu_free_tanh_like(&self) -> Tensor;
}

impl Smooth for Tensor {
    // x²/(1+x²): smooth and non-linear so second derivatives are non-trivial.
    fn relu_free_tanh_like(&self) -> Tensor {
        let s = self.square();
        s.div(&s.add_scalar(1.0))
    }
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let x0 = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0, 7.0];
    let x = Tensor::variable(vec![1, 1, 3, 3], x0);
    let y = x.max_pool2x2();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 5.0);
    let g = grad(&y.sum(), &[&x], false).remove(0);
    assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let x0 = lcg(11, 2 * 16);
    check_first_order(&[1, 2, 4, 4], &x0, |x| x.max_pool2x2().square().sum());
}

#[test]
fn gradient_wrt_intermediate_stops_at_target() {
    let a = Tensor::variable(vec![2], vec![1.0, 2.0]);
    let b = a.scale(3.0);
    let c = b.square().sum();
    let g = grad(&c, &[&b], false).remove(0);
    assert_eq!(g.data(), &[6.0, 12.0]);
    let both = grad(&c, &[&a, &b], false);
    assert_eq!(both[0].data(), &[18.0, 36.0]);
    assert_eq!(both[1].data(), &[6.0, 12.0]);
}

#[test]
fn long_chains_drop_without_recursion() {
    let x = Tensor::variable(vec![1], vec![1.0]);
    let mut y = x.clone();
    for _ in 0..200_000 {
        y = y.scale(1.0);
    }
    assert_eq!(y.item(), 1.0);
    drop(y);
}

proptest! {
    #[test]
    fn sum_to_is_adjoint_of_broadcast(a in prop::collection::vec(-10.0f64..10.0, 3),
                                       b in prop::collection::vec(-10.0f64..10.0, 12)) {
        // <broadcast(a), b> == <a, sum_to(b)>
        let at = Tensor::constant(vec![3, 1], a.clone());
        let bt = Tensor::constant(vec![3, 4], b.clone());
        let lhs: f64 = at.broadcast_to(&[3, 4]).data().iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = bt.sum_to(&[3, 1]).data().iter().zip(&a).map(|(x, y)| x * y).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity(seed in 0u64..1000) {
        // <conv(x, w), g> == <x, convT(g, w)> == <w, weight_grad(x, g)>
        let x = Tensor::constant(vec![2, 2, 4, 3], lcg(seed, 48));
        let w = Tensor::constant(vec![3, 2, 3, 3], lcg(seed + 1, 54));
        let y = x.conv2d(&w, 1);
        let g = Tensor::constant(y.shape().to_vec(), lcg(seed + 2, y.numel()));
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let base = dot(&y, &g);
        let via_x = dot(&x, &Tensor::conv2d_input_grad(&g, &w, 1, x.shape()));
        let via_w = dot(&w, &Tensor::conv2d_weight_grad(&x, &g, 1, w.shape()));
        prop_assert!((base - via_x).abs() < 1e-10);
        prop_assert!((base - via_w).abs() < 1e-10);
    }
}

#[test]
fn spread_coords_are_distinct() {
    let c = spread_coords(1000, 20);
    assert_eq!(c.len(), 20);
    let mut d = c.clone();
    d.dedup();
    assert_eq!(c, d);
    assert_eq!(spread_coords(5, 20), vec![0, 1, 2, 3, 4]);
}
