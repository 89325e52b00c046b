//! Registry of every differentiable primitive, each wrapped so that a single
//! input tensor drives it and the output is folded to a scalar by a random
//! linear functional `sum(w .* y)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

type Build = fn(&mut Graph, Var, &mut ChaCha8Rng) -> Result<Var>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub input: &'static [usize],
    pub output: &'static [usize],
    build: Build,
}

/// Uniform draws in [-1, 1).
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

const MASK: [bool; 6] = [false, true, false, false, true, false];

impl PrimitiveCase {
    /// Worst relative error over `points` random points, each seeded from
    /// `seed + i`.
    pub fn check(&self, points: u64, seed: u64, h: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i);
            let point = random_tensor(&mut rng, self.input);
            let w = random_tensor(&mut rng, self.output);
            let aux_seed: u64 = rng.gen();
            let err = grad_check(
                |g, x| {
                    let mut aux = ChaCha8Rng::seed_from_u64(aux_seed);
                    let y = (self.build)(g, x, &mut aux)?;
                    let p = g.mul_const(y, w.clone())?;
                    g.sum(p)
                },
                &point,
                h,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

macro_rules! case {
    ($name:expr, $in:expr, $out:expr, $build:expr) => {
        PrimitiveCase {
            name: $name,
            input: &$in,
            output: &$out,
            build: $build,
        }
    };
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        case!("matmul lhs", [3, 4], [3, 5], |g, x, r| {
            let b = g.constant(random_tensor(r, &[4, 5]));
            g.matmul(x, b)
        }),
        case!("matmul rhs", [4, 5], [3, 5], |g, x, r| {
            let a = g.constant(random_tensor(r, &[3, 4]));
            g.matmul(a, x)
        }),
        case!("add", [2, 3], [2, 3], |g, x, r| {
            let c = g.constant(random_tensor(r, &[2, 3]));
            g.add(x, c)
        }),
        case!("sub", [2, 3], [2, 3], |g, x, r| {
            let c = g.constant(random_tensor(r, &[2, 3]));
            g.sub(c, x)
        }),
        case!("mul", [2, 3], [2, 3], |g, x, r| {
            let c = g.constant(random_tensor(r, &[2, 3]));
            g.mul(x, c)
        }),
        case!("mul self", [2, 3], [2, 3], |g, x, _| g.mul(x, x)),
        case!("mul_const", [2, 3], [2, 3], |g, x, r| g
            .mul_const(x, random_tensor(r, &[2, 3]))),
        case!("add_row x", [3, 4], [3, 4], |g, x, r| {
            let b = g.constant(random_tensor(r, &[1, 4]));
            g.add_row(x, b)
        }),
        case!("add_row bias", [1, 4], [3, 4], |g, b, r| {
            let x = g.constant(random_tensor(r, &[3, 4]));
            g.add_row(x, b)
        }),
        case!("mul_row x", [3, 4], [3, 4], |g, x, r| {
            let s = g.constant(random_tensor(r, &[1, 4]));
            g.mul_row(x, s)
        }),
        case!("mul_row gain", [1, 4], [3, 4], |g, s, r| {
            let x = g.constant(random_tensor(r, &[3, 4]));
            g.mul_row(x, s)
        }),
        case!("scale", [2, 2], [2, 2], |g, x, _| g.scale(x, -2.5)),
        case!("mul_scalar x", [2, 3], [2, 3], |g, x, r| {
            let s = g.constant(random_tensor(r, &[1, 1]));
            g.mul_scalar(x, s)
        }),
        case!("mul_scalar s", [1, 1], [2, 3], |g, s, r| {
            let x = g.constant(random_tensor(r, &[2, 3]));
            g.mul_scalar(x, s)
        }),
        case!("transpose", [2, 5], [5, 2], |g, x, _| g.transpose(x)),
        case!("slice", [4, 5], [2, 3], |g, x, _| g.slice(x, 1..3, 2..5)),
        case!("concat rows", [2, 3], [5, 3], |g, x, r| {
            let c = g.constant(random_tensor(r, &[3, 3]));
            g.concat(&[c, x], 0)
        }),
        case!("concat cols", [2, 3], [2, 10], |g, x, r| {
            let c = g.constant(random_tensor(r, &[2, 4]));
            g.concat(&[x, c, x], 1)
        }),
        case!("gather_rows", [5, 3], [4, 3], |g, x, _| g.gather_rows(x, &[4, 0, 4, 2])),
        case!("pick", [3, 4], [3, 1], |g, x, _| g.pick(x, &[2, 0, 3])),
        case!("softmax", [3, 5], [3, 5], |g, x, _| g.softmax(x)),
        case!("log_softmax", [3, 5], [3, 5], |g, x, _| g.log_softmax(x)),
        case!("layer_norm", [3, 6], [3, 6], |g, x, _| g.layer_norm(x, 1e-5)),
        case!("normalize_rows", [3, 4], [3, 4], |g, x, _| g.normalize_rows(x)),
        case!("tanh", [2, 4], [2, 4], |g, x, _| g.tanh(x)),
        case!("gelu", [2, 4], [2, 4], |g, x, _| g.gelu(x)),
        case!("exp", [2, 4], [2, 4], |g, x, _| g.exp(x)),
        case!("abs", [2, 4], [2, 4], |g, x, _| g.abs(x)),
        case!("square", [2, 4], [2, 4], |g, x, _| g.square(x)),
        case!("masked_fill", [2, 3], [2, 3], |g, x, _| g.masked_fill(x, &MASK, 0.25)),
        // -inf fill composed with softmax, as in attention
        case!("masked softmax", [2, 3], [2, 3], |g, x, _| {
            let m = g.masked_fill(x, &MASK, f64::NEG_INFINITY)?;
            g.softmax(m)
        }),
        case!("max_axis 0", [4, 3], [1, 3], |g, x, _| g.max_axis(x, 0)),
        case!("max_axis 1", [4, 3], [4, 1], |g, x, _| g.max_axis(x, 1)),
        case!("sum", [3, 3], [1, 1], |g, x, _| g.sum(x)),
        case!("mean", [3, 3], [1, 1], |g, x, _| g.mean(x)),
    ]
}

/// Run every registered case; returns `(name, worst relative error)`.
pub fn check_all_primitives(points: u64, seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    primitive_cases()
        .iter()
        .map(|c| Ok((c.name, c.check(points, seed, h)?)))
        .collect()
}
