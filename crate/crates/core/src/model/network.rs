use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Endpoint, ModelConfig};
use crate::geometry::{LossWeights, Pose};
use crate::nn::{xavier_uniform, Ctx, Encoder, RegressionHead};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Name prefixes of the parameters owned by each part of the model.
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const POSITION_PREFIX: &str = "position.";
pub const ORIENTATION_PREFIX: &str = "orientation.";
pub const LOSS_PREFIX: &str = "loss.";

/// Name of the hidden-layer weight of the orientation head.
pub const ORIENTATION_HEAD_HIDDEN: &str = "orientation.head.hidden.weight";

/// Parameters of the position regression head, the only ones trained in
/// the second stage besides the loss weights.
pub fn is_position_head(name: &str) -> bool {
    name.starts_with("position.head.")
}

/// Convolutional feature extractor: four stride-2 3×3 convolutions, each
/// followed by gelu.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<(ParamId, ParamId)>,
}

/// Activation map `[C, H, W]` taken from one backbone endpoint.
#[derive(Debug, Clone, Copy)]
pub struct ActivationMap {
    pub var: Var,
    pub endpoint: Endpoint,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Endpoint activations of one image.
pub struct Features {
    pub rdct3: ActivationMap,
    pub rdct4: ActivationMap,
}

impl Features {
    pub fn get(&self, e: Endpoint) -> ActivationMap {
        match e {
            Endpoint::Rdct3 => self.rdct3,
            Endpoint::Rdct4 => self.rdct4,
        }
    }
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut c_in = config.input_channels;
        let stages = config
            .backbone_widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let w = store.insert(
                    format!("{BACKBONE_PREFIX}stage{i}.weight"),
                    xavier_uniform(&[c_out, c_in, 3, 3], c_in * 9, c_out * 9, rng),
                );
                let b = store.insert(
                    format!("{BACKBONE_PREFIX}stage{i}.bias"),
                    Tensor::zeros([c_out]),
                );
                c_in = c_out;
                (w, b)
            })
            .collect();
        Backbone { stages }
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<Features> {
        let mut x = image;
        let mut maps = Vec::with_capacity(self.stages.len());
        for &(w, b) in &self.stages {
            let w = cx.param(w);
            let b = cx.param(b);
            let y = cx.tape.conv2d(x, w, Some(b), 2, 1)?;
            x = cx.tape.gelu(y);
            maps.push(x);
        }
        let map = |cx: &Ctx, e: Endpoint| {
            let var = maps[e.stage()];
            let s = cx.tape.shape(var);
            ActivationMap {
                var,
                endpoint: e,
                channels: s[0],
                height: s[1],
                width: s[2],
            }
        };
        Ok(Features {
            rdct3: map(cx, Endpoint::Rdct3),
            rdct4: map(cx, Endpoint::Rdct4),
        })
    }
}

/// Learned row and column embeddings, `[H + 1, dim / 2]` and
/// `[W + 1, dim / 2]`. Row 0 of each table is reserved for the prepended
/// token; grid cell `(i, j)` uses column embedding `j + 1` and row
/// embedding `i + 1`.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    pub cols: ParamId,
    pub rows: ParamId,
    pub height: usize,
    pub width: usize,
}

impl PositionalEncoding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        height: usize,
        width: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let half = dim / 2;
        let mut table = |n: usize| {
            let data = (0..n * half).map(|_| rng.gen::<f64>()).collect();
            Tensor::new(vec![n, half], data).expect("table shape")
        };
        let cols = table(width + 1);
        let rows = table(height + 1);
        assert_eq!(
            cols.numel() + rows.numel(),
            (height + width + 2) * half,
            "axis-separable tables"
        );
        PositionalEncoding {
            cols: store.insert(format!("{name}.cols"), cols),
            rows: store.insert(format!("{name}.rows"), rows),
            height,
            width,
        }
    }

    /// `[H·W + 1, dim]` encoding: row 0 is `[E_x(0) ; E_y(0)]`, row
    /// `1 + i·W + j` is `[E_x(j+1) ; E_y(i+1)]`.
    pub fn forward(&self, cx: &mut Ctx) -> Result<Var> {
        let (col_idx, row_idx) = sequence_indices(self.height, self.width);
        let cols = cx.param(self.cols);
        let rows = cx.param(self.rows);
        let ex = cx.tape.gather_rows(cols, &col_idx)?;
        let ey = cx.tape.gather_rows(rows, &row_idx)?;
        Ok(cx.tape.concat(&[ex, ey], 1)?)
    }
}

/// Column and row table indices for each sequence position.
pub fn sequence_indices(height: usize, width: usize) -> (Vec<usize>, Vec<usize>) {
    let mut cols = Vec::with_capacity(height * width + 1);
    let mut rows = Vec::with_capacity(height * width + 1);
    cols.push(0);
    rows.push(0);
    for i in 0..height {
        for j in 0..width {
            cols.push(j + 1);
            rows.push(i + 1);
        }
    }
    (cols, rows)
}

/// Sequence position of grid cell `(i, j)`; position 0 is the token.
pub fn cell_index(i: usize, j: usize, width: usize) -> usize {
    1 + i * width + j
}

/// One pose component's path: 1×1 projection of an activation map, token
/// prepend, encoder, and regression head on the token's output.
#[derive(Debug, Clone)]
pub struct Branch {
    pub endpoint: Endpoint,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub token: ParamId,
    pub pos: PositionalEncoding,
    pub encoder: Encoder,
    pub head: RegressionHead,
    pub dim: usize,
}

/// Encoder outputs of one branch for one image.
pub struct BranchOutput {
    /// Token output `[dim]`.
    pub token: Var,
    /// Per-block attention weights `[heads, L, L]`.
    pub attention: Vec<Var>,
    pub grid: (usize, usize),
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        name: &str,
        config: &ModelConfig,
        endpoint: Endpoint,
        head_in: usize,
        head_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c_m = config.endpoint_channels(endpoint);
        let dim = config.dim;
        let (h, w) = config.endpoint_grid(endpoint);
        let proj_weight = store.insert(
            format!("{name}.proj.weight"),
            xavier_uniform(&[dim, c_m, 1, 1], c_m, dim, rng),
        );
        let proj_bias = store.insert(format!("{name}.proj.bias"), Tensor::zeros([dim]));
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let token_data = (0..dim).map(|_| normal.sample(rng)).collect();
        let token = store.insert(
            format!("{name}.token"),
            Tensor::new(vec![dim], token_data).expect("token shape"),
        );
        let pos = PositionalEncoding::new(store, &format!("{name}.pos"), h, w, dim, rng);
        let encoder = Encoder::new(
            store,
            &format!("{name}.encoder"),
            config.blocks,
            dim,
            config.heads,
            config.mlp_hidden,
            config.dropout,
            config.pos_mode,
            rng,
        )?;
        let head = RegressionHead::new(
            store,
            &format!("{name}.head"),
            head_in,
            config.head_hidden,
            head_out,
            rng,
        );
        Ok(Branch {
            endpoint,
            proj_weight,
            proj_bias,
            token,
            pos,
            encoder,
            head,
            dim,
        })
    }

    /// Projects a `[C_m, H, W]` map to `[H·W, dim]` with cell `(i, j)` at
    /// row `i·W + j`, then prepends the token: `[H·W + 1, dim]`.
    pub fn to_sequence(&self, cx: &mut Ctx, map: &ActivationMap) -> Result<Var> {
        if (map.height, map.width) != (self.pos.height, self.pos.width) {
            return Err(Error::Contract(format!(
                "activation map is {}x{}, branch expects {}x{}",
                map.height, map.width, self.pos.height, self.pos.width
            )));
        }
        let w = cx.param(self.proj_weight);
        let b = cx.param(self.proj_bias);
        let proj = cx.tape.conv2d(map.var, w, Some(b), 1, 0)?;
        let flat = cx.tape.reshape(proj, &[self.dim, map.height * map.width])?;
        let seq = cx.tape.transpose(flat)?;
        let token = cx.param(self.token);
        let token = cx.tape.reshape(token, &[1, self.dim])?;
        Ok(cx.tape.concat(&[token, seq], 0)?)
    }

    pub fn encode(&self, cx: &mut Ctx, map: &ActivationMap) -> Result<BranchOutput> {
        let seq = self.to_sequence(cx, map)?;
        let pos = self.pos.forward(cx)?;
        let enc = self.encoder.forward(cx, seq, pos)?;
        let token = cx.tape.narrow(enc.out, 0, 0, 1)?;
        let token = cx.tape.reshape(token, &[self.dim])?;
        Ok(BranchOutput {
            token,
            attention: enc.attention,
            grid: (map.height, map.width),
        })
    }
}

/// Graph handles of one image's forward pass.
pub struct ForwardOutput {
    /// Position `[3]`.
    pub x: Var,
    /// Unnormalized quaternion `[4]`.
    pub q: Var,
    pub position: BranchOutput,
    pub orientation: BranchOutput,
}

/// Inference result for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Position and unnormalized quaternion as regressed.
    pub pose: Pose,
    /// Per-block attention weights of each branch, `[heads, L, L]`.
    pub position_attention: Vec<Tensor>,
    pub orientation_attention: Vec<Tensor>,
    pub position_grid: (usize, usize),
    pub orientation_grid: (usize, usize),
}

/// Dual-branch absolute pose regressor with its parameters and the learned
/// loss weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub position: Branch,
    pub orientation: Branch,
    pub s_x: ParamId,
    pub s_q: ParamId,
}

impl Model {
    /// Builds a freshly initialized model. Parameter initialization draws
    /// from a stream seeded by `seed` only.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng);
        let position = Branch::new(
            &mut store,
            "position",
            &config,
            config.position_map,
            config.dim,
            3,
            &mut rng,
        )?;
        let q_in = if config.orientation_prior {
            2 * config.dim
        } else {
            config.dim
        };
        let orientation = Branch::new(
            &mut store,
            "orientation",
            &config,
            config.orientation_map,
            q_in,
            4,
            &mut rng,
        )?;
        let w = LossWeights::default();
        let s_x = store.insert(format!("{LOSS_PREFIX}s_x"), Tensor::scalar(w.s_x));
        let s_q = store.insert(format!("{LOSS_PREFIX}s_q"), Tensor::scalar(w.s_q));
        Ok(Model {
            config,
            store,
            backbone,
            position,
            orientation,
            s_x,
            s_q,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            s_x: self.store.value(self.s_x).data()[0],
            s_q: self.store.value(self.s_q).data()[0],
        }
    }

    pub fn set_loss_weights(&mut self, w: LossWeights) {
        self.store.replace(self.s_x, Tensor::scalar(w.s_x));
        self.store.replace(self.s_q, Tensor::scalar(w.s_q));
    }

    /// Checks that an image tensor is `[C, S, S]` for this model.
    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels, c.input_size, c.input_size];
        if image.shape() != want {
            return Err(Error::Contract(format!(
                "expected an image of shape {want:?}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass of one `[C, S, S]` image on `cx`.
    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<ForwardOutput> {
        let feats = self.backbone.forward(cx, image)?;
        let position = self
            .position
            .encode(cx, &feats.get(self.position.endpoint))?;
        let orientation = self
            .orientation
            .encode(cx, &feats.get(self.orientation.endpoint))?;
        let x = self.position.head.forward(cx, position.token)?;
        let q_in = if self.config.orientation_prior {
            cx.tape.concat(&[orientation.token, position.token], 0)?
        } else {
            orientation.token
        };
        let q = self.orientation.head.forward(cx, q_in)?;
        Ok(ForwardOutput {
            x,
            q,
            position,
            orientation,
        })
    }

    /// Evaluation-mode prediction for one image.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        self.check_input(image)?;
        let mut cx = Ctx::eval(&self.store);
        let img = cx.tape.constant(image.clone());
        let out = self.forward(&mut cx, img)?;
        let t = &cx.tape;
        let vec_of = |v: Var| t.value(v).data().to_vec();
        let (xv, qv) = (vec_of(out.x), vec_of(out.q));
        let attn = |b: &BranchOutput| b.attention.iter().map(|&a| t.value(a).clone()).collect();
        let pose = Pose::new([xv[0], xv[1], xv[2]], [qv[0], qv[1], qv[2], qv[3]]);
        if !pose.x.iter().chain(&pose.q).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite prediction {pose:?}")));
        }
        Ok(Prediction {
            pose,
            position_attention: attn(&out.position),
            orientation_attention: attn(&out.orientation),
            position_grid: out.position.grid,
            orientation_grid: out.orientation.grid,
        })
    }

    /// Widens the orientation head so it reads `[t_q ; t_x]`. The hidden
    /// layer is re-initialized unless `prior_warm_start` is set, in which
    /// case the `t_q` rows keep their trained values and the `t_x` rows
    /// start at zero. A no-op when the prior is already enabled.
    pub fn enable_orientation_prior(&mut self, seed: u64) {
        if self.config.orientation_prior {
            return;
        }
        let dim = self.config.dim;
        let hidden = self.orientation.head.hidden.d_out;
        let id = self.orientation.head.hidden.weight;
        let weight = if self.config.prior_warm_start {
            let mut data = self.store.value(id).data().to_vec();
            data.resize(2 * dim * hidden, 0.0);
            Tensor::new(vec![2 * dim, hidden], data).expect("widened shape")
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = xavier_uniform(&[2 * dim, hidden], 2 * dim, hidden, &mut rng);
            self.store
                .replace(self.orientation.head.hidden.bias, Tensor::zeros([hidden]));
            w
        };
        self.store.replace(id, weight);
        self.orientation.head.hidden.d_in = 2 * dim;
        self.config.orientation_prior = true;
    }
}

/// Token-to-cell attention of one block as an `[H, W]` map: row 0 of the
/// weights averaged over heads, the token's self-weight dropped, and the
/// rest renormalized to sum to one.
pub fn token_attention_map(weights: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (h, w) = grid;
    let len = h * w + 1;
    let s = weights.shape();
    if s.len() != 3 || s[1] != len || s[2] != len || s[0] == 0 {
        return Err(Error::Contract(format!(
            "attention weights {s:?} do not match a {h}x{w} grid"
        )));
    }
    let heads = s[0];
    let mut cells = vec![0.0; h * w];
    for k in 0..heads {
        let row = &weights.data()[k * len * len..k * len * len + len];
        for (c, v) in cells.iter_mut().zip(&row[1..]) {
            *c += v / heads as f64;
        }
    }
    let total: f64 = cells.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(
            "token attends only to itself; map is undefined".into(),
        ));
    }
    cells.iter_mut().for_each(|c| *c /= total);
    Ok(Tensor::new(vec![h, w], cells)?)
}

/// Selects a block's attention by index (negative counts from the end) and
/// converts it with [`token_attention_map`].
pub fn extract_token_attention(
    attention: &[Tensor],
    layer: isize,
    grid: (usize, usize),
) -> Result<Tensor> {
    if attention.is_empty() {
        return Err(Error::Contract("no attention weights were retained".into()));
    }
    let n = attention.len() as isize;
    let idx = if layer < 0 { n + layer } else { layer };
    if idx < 0 || idx >= n {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {n} encoder blocks"
        )));
    }
    token_attention_map(&attention[idx as usize], grid)
}
