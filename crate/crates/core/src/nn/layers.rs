use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Forward-pass context: the tape being recorded, the parameter binding for
/// it, and the dropout stream.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub tape: Tape,
    pub binding: Binding,
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool, rng: ChaCha8Rng) -> Self {
        Ctx {
            store,
            tape: Tape::new(),
            binding: Binding::new(store),
            train,
            rng,
        }
    }

    /// Evaluation-mode context; dropout is disabled so the stream is unused.
    pub fn eval(store: &'a ParamStore) -> Self {
        use rand::SeedableRng;
        Self::new(store, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binding.var(&mut self.tape, self.store, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.train && p > 0.0 {
            self.tape.dropout(x, p, &mut self.rng)
        } else {
            x
        }
    }

    pub fn into_parts(self) -> (Tape, Binding) {
        (self.tape, self.binding)
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([d_out]));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Applies to a `[d_in]` vector or to each row of an `[L, d_in]` matrix.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) || shape.len() > 2 {
            return Err(Error::Contract(format!(
                "linear layer expects last extent {}, got shape {shape:?}",
                self.d_in
            )));
        }
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        if shape.len() == 1 {
            let row = cx.tape.reshape(x, &[1, self.d_in])?;
            let y = cx.tape.matmul(row, w)?;
            let y = cx.tape.reshape(y, &[self.d_out])?;
            Ok(cx.tape.add_bias(y, b)?)
        } else {
            let y = cx.tape.matmul(x, w)?;
            Ok(cx.tape.add_bias(y, b)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.insert(format!("{name}.gain"), Tensor::ones([dim])),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let g = cx.param(self.gain);
        let b = cx.param(self.bias);
        Ok(cx.tape.layer_norm(x, g, b, self.eps)?)
    }
}

/// One-hidden-layer gelu MLP regressing a pose component from a token
/// embedding.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl RegressionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        RegressionHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, d_out, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.d_in
    }

    pub fn d_out(&self) -> usize {
        self.output.d_out
    }

    pub fn forward(&self, cx: &mut Ctx, t: Var) -> Result<Var> {
        if cx.tape.shape(t) != [self.d_in()] {
            return Err(Error::Contract(format!(
                "regression head expects a [{}] input, got {:?}",
                self.d_in(),
                cx.tape.shape(t)
            )));
        }
        let h = self.hidden.forward(cx, t)?;
        let h = cx.tape.gelu(h);
        self.output.forward(cx, h)
    }
}
