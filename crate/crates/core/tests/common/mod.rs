#![allow(dead_code)]

use attnpose::geometry::{losses, LossWeights};
use attnpose::model::{Model, ModelConfig};
use attnpose::nn::Ctx;
use attnpose::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Gradients with magnitude below this are compared absolutely: the error is
/// divided by `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduces `v` to a scalar with fixed pseudo-random weights, so every output
/// element contributes a distinct amount to the gradient.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let w = random_tensor(tape.shape(v), seed ^ 0x5eed);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central finite differences. Returns the largest relative error over
/// every input element.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for k in 0..vals.len() {
        for i in 0..vals[k].numel() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&vals);
            vals[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&vals);
            vals[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[k][i], numeric));
        }
    }
    worst
}

/// Combined loss of the tiny model on one image; gradients land in the
/// store when `backward` is set.
fn model_loss(
    model: &mut Model,
    image: &Tensor,
    x: &[f64; 3],
    q: &[f64; 4],
    backward: bool,
) -> f64 {
    let mut cx = Ctx::eval(&model.store);
    let img = cx.tape.constant(image.clone());
    let out = model.forward(&mut cx, img).unwrap();
    let xg = cx.tape.constant(Tensor::vector(x));
    let qg = cx.tape.constant(Tensor::vector(q));
    let lx = losses::position(&mut cx.tape, out.x, xg).unwrap();
    let lq = losses::orientation(&mut cx.tape, out.q, qg).unwrap();
    let sx = cx.param(model.s_x);
    let sq = cx.param(model.s_q);
    let lp = losses::combined(&mut cx.tape, lx, lq, sx, sq).unwrap();
    let value = cx.tape.value(lp).data()[0];
    if backward {
        cx.tape.backward(lp).unwrap();
        let (tape, binding) = cx.into_parts();
        model.store.zero_grad();
        binding.accumulate(&tape, &mut model.store);
    }
    value
}

/// Runs the end-to-end check and returns (max relative error, parameter
/// count) over every parameter of the tiny model, including the loss
/// weights.
pub fn end_to_end_check() -> (f64, usize) {
    let config = ModelConfig::tiny();
    assert_eq!(
        (config.dim, config.blocks, config.heads, config.input_size),
        (8, 2, 2, 16)
    );
    let mut model = Model::new(config, 7).unwrap();
    model.set_loss_weights(LossWeights {
        s_x: 0.3,
        s_q: -0.7,
    });
    let image = random_tensor(&[3, 16, 16], 21).map(|v| 0.5 + 0.5 * v);
    let x = [0.4, -0.2, 0.9];
    let q = [0.5, 0.5, -0.5, 0.5];
    model_loss(&mut model, &image, &x, &q, true);
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    let mut worst = 0.0f64;
    let mut count = 0;
    for id in ids {
        let grad = model.store.get(id).grad.clone();
        for i in 0..grad.len() {
            let orig = model.store.get(id).value.data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = model_loss(&mut model, &image, &x, &q, false);
            model.store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = model_loss(&mut model, &image, &x, &q, false);
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(grad[i], numeric));
            count += 1;
        }
    }
    (worst, count)
}

/// Largest relative error per check, by name.
#[derive(Default)]
pub struct Checks {
    pub results: Vec<(&'static str, f64)>,
}

impl Checks {
    fn check(
        &mut self,
        name: &'static str,
        inputs: &[Tensor],
        f: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        self.results.push((name, gradcheck(inputs, f)));
    }
}

/// Finite-difference checks of every differentiable tape operation and the
/// three pose losses.
pub fn primitive_gradchecks() -> Vec<(&'static str, f64)> {
    let mut c = Checks::default();
    // elementwise
    {
        let a = random_tensor(&[3, 4], 1);
        let b = random_tensor(&[3, 4], 2);
        c.check("add", &[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, 0)
        });
        c.check("sub", &[a.clone(), b.clone()], |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            project(t, y, 0)
        });
        c.check("mul", &[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, 0)
        });
        c.check("scale", std::slice::from_ref(&a), |t, v| {
            let y = t.scale(v[0], -2.5);
            project(t, y, 0)
        });
        c.check("neg", std::slice::from_ref(&a), |t, v| {
            let y = t.neg(v[0]);
            project(t, y, 0)
        });
        c.check("exp", std::slice::from_ref(&a), |t, v| {
            let y = t.exp(v[0]);
            project(t, y, 0)
        });
        c.check("gelu", &[a.map(|v| 3.0 * v)], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 0)
        });
    }

    // reductions
    {
        let a = random_tensor(&[2, 5], 3);
        c.check("sum", std::slice::from_ref(&a), |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s).unwrap()
        });
        c.check("mean", std::slice::from_ref(&a), |t, v| {
            let s = t.mean(v[0]);
            t.exp(s)
        });
        c.check("norm", std::slice::from_ref(&a), |t, v| {
            let n = t.norm(v[0]);
            t.mul(n, n).unwrap()
        });
        let s = Tensor::scalar(1.7);
        c.check("div_scalar", &[a, s], |t, v| {
            let y = t.div_scalar(v[0], v[1]).unwrap();
            project(t, y, 0)
        });
    }

    // linear algebra
    {
        let a = random_tensor(&[3, 4], 4);
        let b = random_tensor(&[4, 5], 5);
        c.check("matmul", &[a.clone(), b], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 0)
        });
        let bias = random_tensor(&[4], 6);
        c.check("add_bias", &[a.clone(), bias], |t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            project(t, y, 0)
        });
        c.check("transpose", std::slice::from_ref(&a), |t, v| {
            let y = t.transpose(v[0]).unwrap();
            project(t, y, 0)
        });
        let cube = random_tensor(&[2, 3, 4], 7);
        c.check("permute", std::slice::from_ref(&cube), |t, v| {
            let y = t.permute(v[0], &[2, 0, 1]).unwrap();
            project(t, y, 0)
        });
        c.check("reshape", &[cube], |t, v| {
            let y = t.reshape(v[0], &[6, 4]).unwrap();
            project(t, y, 0)
        });
    }

    // normalization
    {
        let a = random_tensor(&[3, 6], 8);
        c.check("softmax rows", std::slice::from_ref(&a), |t, v| {
            let y = t.softmax(v[0], 1).unwrap();
            project(t, y, 0)
        });
        c.check("softmax columns", std::slice::from_ref(&a), |t, v| {
            let y = t.softmax(v[0], 0).unwrap();
            project(t, y, 0)
        });
        let gain = random_tensor(&[6], 9);
        let bias = random_tensor(&[6], 10);
        c.check("layer_norm", &[a, gain, bias], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, 0)
        });
    }

    // convolution
    {
        let x = random_tensor(&[2, 7, 6], 11);
        let w = random_tensor(&[3, 2, 3, 3], 12);
        let b = random_tensor(&[3], 13);
        c.check(
            "conv2d stride 2 pad 1",
            &[x.clone(), w.clone(), b],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                project(t, y, 0)
            },
        );
        let w1 = random_tensor(&[4, 2, 1, 1], 14);
        c.check("conv2d 1x1 no bias", &[x, w1], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0).unwrap();
            project(t, y, 0)
        });
    }

    // indexing
    {
        let a = random_tensor(&[3, 4], 15);
        let b = random_tensor(&[3, 2], 16);
        c.check("concat", &[a.clone(), b], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1).unwrap();
            project(t, y, 0)
        });
        c.check("narrow", std::slice::from_ref(&a), |t, v| {
            let y = t.narrow(v[0], 1, 1, 2).unwrap();
            project(t, y, 0)
        });
        // repeated rows accumulate
        c.check("gather_rows", std::slice::from_ref(&a), |t, v| {
            let y = t.gather_rows(v[0], &[0, 2, 2, 1, 0]).unwrap();
            project(t, y, 0)
        });
        c.check("dropout", &[a], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let y = t.dropout(v[0], 0.4, &mut rng);
            project(t, y, 0)
        });
    }

    // pose losses
    {
        let x = random_tensor(&[3], 17);
        let xg = random_tensor(&[3], 18);
        let q = random_tensor(&[4], 19);
        let qg = Tensor::vector(&[0.5, 0.5, -0.5, 0.5]);
        c.check("position loss", &[x, xg], |t, v| {
            losses::position(t, v[0], v[1]).unwrap()
        });
        c.check("orientation loss", &[q, qg], |t, v| {
            losses::orientation(t, v[0], v[1]).unwrap()
        });
        let s = [
            Tensor::scalar(0.8),
            Tensor::scalar(1.3),
            Tensor::scalar(0.2),
            Tensor::scalar(-1.1),
        ];
        c.check("combined loss", &s, |t, v| {
            losses::combined(t, v[0], v[1], v[2], v[3]).unwrap()
        });
    }
    c.results
}
