//! Parameterized layers built from tape primitives.
//!
//! Sequences are time-major: a feature map over `T` positions with `C`
//! channels is a `[T, C]` tensor.

use crate::autodiff::{conv_out_len, Var};
use crate::error::{Error, Result};
use crate::params::{BnUpdate, Ctx, Initializer, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Creates named parameters in one group, in a fixed order.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Initializer,
    group: ParamGroup,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Initializer, group: ParamGroup) -> Self {
        Builder {
            store,
            init,
            group,
            prefix: String::new(),
        }
    }

    /// A builder for another group or name scope sharing the same store and
    /// random stream.
    pub fn scope(&mut self, group: ParamGroup, prefix: &str) -> Builder<'_> {
        Builder {
            store: self.store,
            init: self.init,
            group,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.init.fan_in(shape, fan_in);
        let n = self.name(name);
        self.store.add(&n, self.group, true, t)
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.name(name);
        self.store.add(&n, self.group, true, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.name(name);
        self.store.add(&n, self.group, false, value)
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: b.fan_in(&format!("{name}.weight"), &[input, output], input),
            bias: b.fan_in(&format!("{name}.bias"), &[output], input),
            input,
            output,
        }
    }

    /// Maps `[N, in]` to `[N, out]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }
}

/// Output length `ceil(t / s)` is guaranteed by "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

impl Conv1dBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv1dBlockSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            batch_norm: false,
            relu: false,
        }
    }

    pub fn relu(mut self, on: bool) -> Self {
        self.relu = on;
        self
    }

    pub fn batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    /// `(left, right)` padding: left is `floor((b - 1) / 2)`.
    pub fn padding(&self) -> (usize, usize) {
        let left = (self.kernel - 1) / 2;
        (left, self.kernel - 1 - left)
    }

    pub fn out_len(&self, t: usize) -> usize {
        let (l, r) = self.padding();
        conv_out_len(t, self.kernel, self.stride, l, r)
    }
}

/// Correlation, then optional batch norm, then optional relu.
#[derive(Clone, Debug)]
pub struct Conv1dBlock {
    pub spec: Conv1dBlockSpec,
    /// `[kernel, in, out]`.
    pub weight: ParamId,
    /// Absent when batch norm supplies the shift.
    pub bias: Option<ParamId>,
    pub norm: Option<BatchNorm>,
}

impl Conv1dBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, spec: Conv1dBlockSpec) -> Self {
        assert!(spec.kernel >= 1 && spec.stride >= 1, "invalid conv spec {spec:?}");
        let fan_in = spec.kernel * spec.in_channels;
        let weight = b.fan_in(
            &format!("{name}.weight"),
            &[spec.kernel, spec.in_channels, spec.out_channels],
            fan_in,
        );
        let (bias, norm) = if spec.batch_norm {
            (None, Some(BatchNorm::new(b, &format!("{name}.bn"), spec.out_channels)))
        } else {
            (Some(b.fan_in(&format!("{name}.bias"), &[spec.out_channels], fan_in)), None)
        };
        Conv1dBlock {
            spec,
            weight,
            bias,
            norm,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "conv1d_block",
                format!("expected [T, {}], got {shape:?}", self.spec.in_channels),
            ));
        }
        let (l, r) = self.spec.padding();
        let w = ctx.param(self.weight);
        let mut y = ctx.tape.conv1d(x, w, self.spec.stride, l, r)?;
        if let Some(bias) = self.bias {
            let b = ctx.param(bias);
            y = ctx.tape.add(y, b)?;
        }
        if let Some(norm) = &self.norm {
            y = norm.forward(ctx, y)?;
        }
        if self.spec.relu {
            y = ctx.tape.relu(y)?;
        }
        Ok(y)
    }
}

/// Per-channel normalization over the rows of a `[T, C]` map.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    /// Fewer rows than this fall back to the running statistics.
    pub const MIN_ROWS: usize = 8;

    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        BatchNorm {
            scale: b.constant(&format!("{name}.scale"), Tensor::ones(&[channels])),
            shift: b.constant(&format!("{name}.shift"), Tensor::zeros(&[channels])),
            running_mean: b.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: b.buffer(&format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let rows = ctx.tape.shape(x)[0];
        let normalized = if ctx.training && rows >= Self::MIN_ROWS {
            let mean = ctx.tape.mean(x, 0)?;
            let centered = ctx.tape.sub(x, mean)?;
            let sq = ctx.tape.mul(centered, centered)?;
            let var = ctx.tape.mean(sq, 0)?;
            let var_eps = ctx.tape.affine(var, 1.0, self.eps)?;
            let std = ctx.tape.sqrt(var_eps)?;
            let update = BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                mean: ctx.tape.value(mean).data().to_vec(),
                var: ctx.tape.value(var).data().to_vec(),
            };
            ctx.record_bn(update);
            ctx.tape.div(centered, std)?
        } else {
            let store = ctx.store();
            let mean = store.get(self.running_mean).clone();
            let std: Vec<f32> = store
                .get(self.running_var)
                .data()
                .iter()
                .map(|&v| (v + self.eps).sqrt())
                .collect();
            let std = Tensor::from_parts(mean.shape().to_vec(), std);
            let mean = ctx.tape.constant(mean);
            let std = ctx.tape.constant(std);
            let centered = ctx.tape.sub(x, mean)?;
            ctx.tape.div(centered, std)?
        };
        let scale = ctx.param(self.scale);
        let shift = ctx.param(self.shift);
        let y = ctx.tape.mul(normalized, scale)?;
        ctx.tape.add(y, shift)
    }
}

/// Folds recorded batch statistics into the running buffers, in order.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, &v) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

#[derive(Clone, Debug)]
struct LstmDirection {
    /// `[input, 4H]`, gate order i, f, g, o.
    w_ih: ParamId,
    /// `[H, 4H]`.
    w_hh: ParamId,
    bias: ParamId,
}

/// Bidirectional single-layer LSTM.
#[derive(Clone, Debug)]
pub struct BiLstm {
    forward: LstmDirection,
    backward: LstmDirection,
    pub input: usize,
    pub hidden: usize,
}

/// Output of [`BiLstm::forward`].
pub struct BiLstmOutput {
    /// `[N, 2H]`: forward state then backward state per word.
    pub hiddens: Var,
    /// `[N, H]` forward states.
    pub forward: Var,
    /// `[N, H]` backward states, indexed by word position.
    pub backward: Var,
}

impl BiLstm {
    pub fn new(b: &mut Builder<'_>, name: &str, input: usize, hidden: usize) -> Self {
        let mut dir = |d: &str| LstmDirection {
            w_ih: b.fan_in(&format!("{name}.{d}.w_ih"), &[input, 4 * hidden], input),
            w_hh: b.fan_in(&format!("{name}.{d}.w_hh"), &[hidden, 4 * hidden], hidden),
            bias: b.fan_in(&format!("{name}.{d}.bias"), &[4 * hidden], hidden),
        };
        let forward = dir("fwd");
        let backward = dir("bwd");
        BiLstm {
            forward,
            backward,
            input,
            hidden,
        }
    }

    /// Runs both directions over `[N, input]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<BiLstmOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.input {
            return Err(Error::shape(
                "bilstm",
                format!("expected [N >= 1, {}], got {shape:?}", self.input),
            ));
        }
        let n = shape[0];
        let order: Vec<usize> = (0..n).collect();
        let fwd = self.run(ctx, &self.forward, x, &order)?;
        let rev: Vec<usize> = (0..n).rev().collect();
        let mut bwd = self.run(ctx, &self.backward, x, &rev)?;
        bwd.reverse();
        let forward = ctx.tape.concat(&fwd, 0)?;
        let backward = ctx.tape.concat(&bwd, 0)?;
        let hiddens = ctx.tape.concat(&[forward, backward], 1)?;
        Ok(BiLstmOutput {
            hiddens,
            forward,
            backward,
        })
    }

    /// Hidden states `[1, H]` in visiting order.
    fn run(&self, ctx: &mut Ctx<'_>, dir: &LstmDirection, x: Var, order: &[usize]) -> Result<Vec<Var>> {
        let hd = self.hidden;
        let w_ih = ctx.param(dir.w_ih);
        let w_hh = ctx.param(dir.w_hh);
        let bias = ctx.param(dir.bias);
        let projected = ctx.tape.matmul(x, w_ih)?;
        let projected = ctx.tape.add(projected, bias)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let mut gates = ctx.tape.slice(projected, 0, t, 1)?;
            if let Some(h) = h {
                let rec = ctx.tape.matmul(h, w_hh)?;
                gates = ctx.tape.add(gates, rec)?;
            }
            let i = ctx.tape.slice(gates, 1, 0, hd)?;
            let f = ctx.tape.slice(gates, 1, hd, hd)?;
            let g = ctx.tape.slice(gates, 1, 2 * hd, hd)?;
            let o = ctx.tape.slice(gates, 1, 3 * hd, hd)?;
            let i = ctx.tape.sigmoid(i)?;
            let g = ctx.tape.tanh(g)?;
            let o = ctx.tape.sigmoid(o)?;
            let mut cell = ctx.tape.mul(i, g)?;
            if let Some(c) = c {
                let f = ctx.tape.sigmoid(f)?;
                let keep = ctx.tape.mul(f, c)?;
                cell = ctx.tape.add(cell, keep)?;
            }
            let squashed = ctx.tape.tanh(cell)?;
            let state = ctx.tape.mul(o, squashed)?;
            h = Some(state);
            c = Some(cell);
            out.push(state);
        }
        Ok(out)
    }
}
