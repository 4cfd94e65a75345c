//! Central finite-difference checks of every tape operation, in f64, with
//! respect to each of its differentiable operands.

use latent_embed::autodiff::{Tape, Var};
use latent_embed::gradcheck::check_gradients;
use latent_embed::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn constant(t: &mut Tape<'static, f64>, rows: usize, cols: usize, seed: u64) -> Var {
    t.leaf(rows, cols, random(rows, cols, seed))
}

/// Contracts `out` with fixed random weights so every element matters.
fn reduce(t: &mut Tape<'static, f64>, out: Var) -> Var {
    let (r, c) = t.shape(out);
    let w = constant(t, r, c, 999 + (r * 31 + c) as u64);
    let p = t.mul(out, w);
    t.sum_all(p)
}

fn check<F>(name: &str, rows: usize, cols: usize, f: F)
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Var,
{
    let point = Tensor::new(vec![rows, cols], random(rows, cols, name.len() as u64 * 7 + rows as u64)).unwrap();
    let report = check_gradients(
        |t, x| {
            let out = f(t, x);
            if t.shape(out) == (1, 1) { out } else { reduce(t, out) }
        },
        &point,
        TOL,
    )
    .unwrap();
    assert!(report.passed, "{name}: relative error {:e} at {:?}", report.max_relative_error, report.worst_coordinate);
    assert_eq!(report.coordinates_checked, rows * cols);
}

#[test]
fn matrix_products() {
    check("matmul lhs", 2, 3, |t, x| {
        let b = constant(t, 3, 4, 1);
        t.matmul(x, b)
    });
    check("matmul rhs", 3, 4, |t, x| {
        let a = constant(t, 2, 3, 2);
        t.matmul(a, x)
    });
    check("matmul_t lhs", 2, 3, |t, x| {
        let b = constant(t, 4, 3, 3);
        t.matmul_t(x, b)
    });
    check("matmul_t rhs", 4, 3, |t, x| {
        let a = constant(t, 2, 3, 4);
        t.matmul_t(a, x)
    });
    check("matmul self", 3, 3, |t, x| t.matmul(x, x));
    check("transpose", 2, 5, |t, x| t.transpose(x));
}

#[test]
fn elementwise() {
    check("add", 2, 3, |t, x| {
        let c = constant(t, 2, 3, 5);
        t.add(c, x)
    });
    check("add self", 2, 3, |t, x| t.add(x, x));
    check("add_row matrix", 3, 4, |t, x| {
        let r = constant(t, 1, 4, 6);
        t.add_row(x, r)
    });
    check("add_row row", 1, 4, |t, x| {
        let a = constant(t, 3, 4, 7);
        t.add_row(a, x)
    });
    check("mul", 2, 3, |t, x| {
        let c = constant(t, 2, 3, 8);
        t.mul(x, c)
    });
    check("mul self", 2, 3, |t, x| t.mul(x, x));
    check("scale", 2, 2, |t, x| t.scale(x, -0.7));
    check("add_scalar", 2, 2, |t, x| {
        let y = t.add_scalar(x, 0.3);
        t.mul(y, y)
    });
    check("scale_by_elem value", 2, 3, |t, x| {
        let s = constant(t, 1, 4, 9);
        t.scale_by_elem(x, s, 2)
    });
    check("scale_by_elem scale", 1, 4, |t, x| {
        let v = constant(t, 2, 3, 10);
        t.scale_by_elem(v, x, 1)
    });
    check("gelu", 3, 4, |t, x| t.gelu(x));
}

#[test]
fn normalizations() {
    check("layer_norm input", 3, 5, |t, x| {
        let g = constant(t, 1, 5, 11);
        let b = constant(t, 1, 5, 12);
        t.layer_norm(x, g, b)
    });
    check("layer_norm gain", 1, 5, |t, x| {
        let a = constant(t, 3, 5, 13);
        let b = constant(t, 1, 5, 14);
        t.layer_norm(a, x, b)
    });
    check("layer_norm bias", 1, 5, |t, x| {
        let a = constant(t, 3, 5, 15);
        let g = constant(t, 1, 5, 16);
        t.layer_norm(a, g, x)
    });
    check("softmax_rows", 3, 4, |t, x| t.softmax_rows(x));
    check("l2_normalize_rows", 3, 4, |t, x| t.l2_normalize_rows(x));
}

#[test]
fn positional_and_attention() {
    check("rotary", 3, 8, |t, x| t.rotary(x, 5, 2, 10_000.0));
    let (heads, d) = (2, 8);
    check("attention query", 2, d, |t, x| {
        let k = [constant(t, 3, d, 20), constant(t, 2, d, 21)];
        let v = [constant(t, 3, d, 22), constant(t, 2, d, 23)];
        t.attention(x, &k, &v, heads, 3)
    });
    check("attention keys", 2, d, |t, x| {
        let q = constant(t, 2, d, 24);
        let k = [constant(t, 3, d, 25), x];
        let v = [constant(t, 3, d, 26), constant(t, 2, d, 27)];
        t.attention(q, &k, &v, heads, 3)
    });
    check("attention values", 3, d, |t, x| {
        let q = constant(t, 2, d, 28);
        let k = [constant(t, 3, d, 29), constant(t, 2, d, 30)];
        let v = [x, constant(t, 2, d, 31)];
        t.attention(q, &k, &v, heads, 3)
    });
    check("attention self", 4, d, |t, x| t.attention(x, &[x], &[x], heads, 0));
}

#[test]
fn indexing_and_layout() {
    check("gather", 5, 3, |t, x| t.gather(x, &[4, 0, 4, 2]));
    check("concat_rows", 2, 3, |t, x| {
        let c = constant(t, 1, 3, 40);
        t.concat_rows(&[x, c, x])
    });
    check("concat_cols", 2, 3, |t, x| {
        let c = constant(t, 2, 2, 41);
        t.concat_cols(c, x)
    });
    check("slice_rows", 5, 3, |t, x| t.slice_rows(x, 1, 3));
    check("row", 4, 3, |t, x| t.row(x, 2));
    check("pick", 2, 5, |t, x| t.pick(x, &[4, 1]));
    check("sum_all", 3, 2, |t, x| {
        let y = t.mul(x, x);
        t.sum_all(y)
    });
    check("mean_rows", 4, 3, |t, x| t.mean_rows(x));
}

#[test]
fn cross_entropy() {
    check("cross_entropy_sum", 4, 6, |t, x| t.cross_entropy_sum(x, &[Some(1), None, Some(5), Some(1)]));
    check("cross_entropy_sum all rows", 2, 3, |t, x| t.cross_entropy_sum(x, &[Some(0), Some(2)]));
}

#[test]
fn composed_block() {
    // A miniature pre-norm attention block chained through every op family.
    check("block", 3, 8, |t, x| {
        let g = constant(t, 1, 8, 50);
        let b = constant(t, 1, 8, 51);
        let wq = constant(t, 8, 8, 52);
        let h = t.layer_norm(x, g, b);
        let q = t.matmul_t(h, wq);
        let q = t.rotary(q, 0, 2, 100.0);
        let a = t.attention(q, &[q], &[h], 2, 0);
        let y = t.add(x, a);
        let y = t.gelu(y);
        t.l2_normalize_rows(y)
    });
}
