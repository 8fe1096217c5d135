//! Permutation-equivariant velocity field.
//!
//! Every point is mapped to a token by a per-point MLP over local and global
//! features plus a time embedding, then one multi-head self-attention block
//! mixes information across the cloud and a final linear layer reads out the
//! velocity. Nothing depends on point order, so `V(t, P x) = P V(t, x)`.
//!
//! Internally tokens are rows: an `N × width` matrix per cloud.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::measures::PointCloud;
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"WOWNN1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Per-point MLP followed by one self-attention block.
    MlpAttention,
}

impl Architecture {
    fn code(self) -> u32 {
        match self {
            Architecture::MlpAttention => 0,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Architecture::MlpAttention),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub architecture: Architecture,
    pub dim: usize,
    /// Nearest-neighbour distances per point.
    pub k_local: usize,
    /// Linear + ReLU layers in the per-point MLP.
    pub mlp_layers: usize,
    pub hidden_width: usize,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub time_embed_dim: usize,
    /// Highest time-embedding frequency; frequencies run geometrically from 1.
    pub time_max_freq: f64,
    /// Coordinates are multiplied by this before feature extraction and the
    /// velocity divided by it. A unit change that keeps features O(1) for
    /// data living in a small box.
    pub input_scale: f64,
}

impl NetConfig {
    pub fn circles() -> Self {
        Self {
            architecture: Architecture::MlpAttention,
            dim: 2,
            k_local: 8,
            mlp_layers: 3,
            hidden_width: 64,
            attn_heads: 4,
            attn_dim: 32,
            time_embed_dim: 32,
            time_max_freq: 1000.0,
            input_scale: 1.0,
        }
    }

    pub fn mnist() -> Self {
        Self {
            mlp_layers: 4,
            hidden_width: 256,
            input_scale: 10.0,
            ..Self::circles()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.dim == 0 {
            return bad("net dim must be positive");
        }
        if self.mlp_layers == 0 || self.hidden_width == 0 {
            return bad("mlp_layers and hidden_width must be positive");
        }
        if self.attn_heads == 0 || self.attn_dim == 0 || !self.attn_dim.is_multiple_of(self.attn_heads) {
            return bad("attn_dim must be a positive multiple of attn_heads");
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be even and at least 2");
        }
        if !(self.time_max_freq >= 1.0) || !self.time_max_freq.is_finite() {
            return bad("time_max_freq must be finite and at least 1");
        }
        if !(self.input_scale > 0.0) || !self.input_scale.is_finite() {
            return bad("input_scale must be finite and positive");
        }
        Ok(())
    }

    /// `d + k + d + d(d+1)/2`: coordinates, neighbour distances, mean, covariance.
    pub fn feature_width(&self) -> usize {
        let d = self.dim;
        d + self.k_local + d + d * (d + 1) / 2
    }

    /// Shapes `(out, in)` of every linear layer in storage order.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_width;
        let a = self.attn_dim;
        let mut shapes = vec![(h, self.feature_width() + self.time_embed_dim)];
        shapes.extend(std::iter::repeat_n((h, h), self.mlp_layers - 1));
        shapes.push((a, h));
        shapes.extend(std::iter::repeat_n((a, a), 4));
        shapes.push((self.dim, a));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize, max_freq: f64) -> Self {
        let half = (dim / 2).max(1);
        let frequencies = (0..half)
            .map(|k| {
                if half == 1 {
                    1.0
                } else {
                    max_freq.powf(k as f64 / (half - 1) as f64)
                }
            })
            .collect();
        Self { frequencies }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `[sin(ω_k t)..., cos(ω_k t)...]`.
    pub fn embed(&self, t: f64) -> Array1<f64> {
        let sin = self.frequencies.iter().map(|w| (w * t).sin());
        let cos = self.frequencies.iter().map(|w| (w * t).cos());
        sin.chain(cos).collect()
    }
}

/// Per-point features as an `N × F` matrix.
pub fn features(c: &PointCloud, k_local: usize) -> Result<Array2<f64>> {
    let (d, n) = (c.dim(), c.count());
    if n <= k_local {
        return Err(Error::shape(format!(
            "cloud has {n} points but features need more than k_local = {k_local}"
        )));
    }
    let x = c.coords();
    let mean = x.mean_axis(Axis(1)).expect("non-empty cloud");
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let cov = centered.dot(&centered.t()) / n as f64;

    let width = d + k_local + d + d * (d + 1) / 2;
    let mut f = Array2::zeros((n, width));
    let mut dist = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = f.row_mut(i);
        row.slice_mut(s![..d]).assign(&x.column(i));
        if k_local > 0 {
            dist.clear();
            for j in (0..n).filter(|&j| j != i) {
                let sq: f64 = x
                    .column(i)
                    .iter()
                    .zip(x.column(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dist.push(sq.sqrt());
            }
            dist.select_nth_unstable_by(k_local - 1, f64::total_cmp);
            dist[..k_local].sort_by(f64::total_cmp);
            for (r, &v) in dist[..k_local].iter().enumerate() {
                row[d + r] = v;
            }
        }
        row.slice_mut(s![d + k_local..2 * d + k_local]).assign(&mean);
        let mut col = 2 * d + k_local;
        for a in 0..d {
            for b in a..d {
                row[col] = cov[[a, b]];
                col += 1;
            }
        }
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn he_uniform<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((out, inp), || rng.random_range(-bound..bound)),
            bias: Array1::zeros(out),
        }
    }

    /// Rows of `x` mapped through the layer.
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backprop(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

/// Parameters (or gradients, or optimizer moments) of a [`VelocityNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Linear>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Linear::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    /// Every parameter in storage order.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Mutable access to the `k`-th parameter in storage order.
    pub fn value_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.weight.len() {
                return l.weight.as_slice_mut().expect("standard layout").get_mut(k).unwrap();
            }
            k -= l.weight.len();
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Activations kept for the backward pass.
pub(crate) struct Tape {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    tokens: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    residual: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    time: TimeEmbedding,
    pub params: Params,
}

impl VelocityNet {
    /// He-uniform hidden layers and a zero output layer, so the initial field is zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::child_rng(seed, "net-init", 0);
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(o, n))| {
                if i == last {
                    Linear::zeros(o, n)
                } else {
                    Linear::he_uniform(o, n, &mut rng)
                }
            })
            .collect();
        Ok(Self::from_parts(config, Params { layers }))
    }

    fn from_parts(config: NetConfig, params: Params) -> Self {
        let time = TimeEmbedding::new(config.time_embed_dim, config.time_max_freq);
        Self { config, time, params }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn time_embedding(&self) -> &TimeEmbedding {
        &self.time
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn mlp_layers(&self) -> usize {
        self.config.mlp_layers
    }

    fn layer(&self, i: usize) -> &Linear {
        &self.params.layers[i]
    }

    fn check_input(&self, c: &PointCloud) -> Result<()> {
        if c.dim() != self.config.dim {
            return Err(Error::shape(format!(
                "net expects dimension {}, cloud has {}",
                self.config.dim,
                c.dim()
            )));
        }
        Ok(())
    }

    /// Velocity `d × N` at time `t`.
    pub fn forward(&self, t: f64, c: &PointCloud) -> Result<Array2<f64>> {
        Ok(self.forward_tape(t, c)?.0.reversed_axes())
    }

    /// Parameter gradients of `<upstream, forward(t, c)>`.
    pub fn backward(&self, t: f64, c: &PointCloud, upstream: ArrayView2<'_, f64>) -> Result<Params> {
        if upstream.dim() != (c.dim(), c.count()) {
            return Err(Error::shape(format!(
                "upstream gradient is {:?}, cloud is {}x{}",
                upstream.dim(),
                c.dim(),
                c.count()
            )));
        }
        let (_, tape) = self.forward_tape(t, c)?;
        Ok(self.backward_tape(&tape, &upstream.t().to_owned()))
    }

    /// Output as `N × d` rows plus the tape.
    pub(crate) fn forward_tape(&self, t: f64, c: &PointCloud) -> Result<(Array2<f64>, Tape)> {
        self.check_input(c)?;
        let unit = self.config.input_scale;
        let feats = if unit == 1.0 {
            features(c, self.config.k_local)?
        } else {
            features(&PointCloud::new(&c.coords() * unit)?, self.config.k_local)?
        };
        let n = c.count();
        let emb = self.time.embed(t);
        let mut input = Array2::zeros((n, feats.ncols() + emb.len()));
        input.slice_mut(s![.., ..feats.ncols()]).assign(&feats);
        input
            .slice_mut(s![.., feats.ncols()..])
            .assign(&emb.broadcast((n, emb.len())).expect("broadcast"));

        let l = self.mlp_layers();
        let mut pre = Vec::with_capacity(l);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(l);
        for i in 0..l {
            let z = self.layer(i).apply(if i == 0 { &input } else { &post[i - 1] });
            post.push(z.mapv(|v| v.max(0.0)));
            pre.push(z);
        }
        let tokens = self.layer(l).apply(&post[l - 1]);
        let q = self.layer(l + 1).apply(&tokens);
        let k = self.layer(l + 2).apply(&tokens);
        let v = self.layer(l + 3).apply(&tokens);

        let heads = self.config.attn_heads;
        let hd = self.config.attn_dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = Array2::zeros((n, self.config.attn_dim));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in a.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            mixed.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let residual = &tokens + &self.layer(l + 4).apply(&mixed);
        let mut out = self.layer(l + 5).apply(&residual);
        if unit != 1.0 {
            out /= unit;
        }
        Ok((
            out,
            Tape {
                input,
                pre,
                post,
                tokens,
                q,
                k,
                v,
                attn,
                mixed,
                residual,
            },
        ))
    }

    /// Parameter gradients given the loss gradient w.r.t. the `N × d` output.
    pub(crate) fn backward_tape(&self, tape: &Tape, dout: &Array2<f64>) -> Params {
        let l = self.mlp_layers();
        let mut g = Params::zeros_like(&self.params);
        let dout = dout / self.config.input_scale;
        let d_res = self.layer(l + 5).backprop(&tape.residual, &dout, &mut g.layers[l + 5]);
        let mut d_tokens = d_res.clone();
        let d_mixed = self.layer(l + 4).backprop(&tape.mixed, &d_res, &mut g.layers[l + 4]);

        let heads = self.config.attn_heads;
        let hd = self.config.attn_dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let shape = tape.q.dim();
        let (mut dq, mut dk, mut dv) = (Array2::zeros(shape), Array2::zeros(shape), Array2::zeros(shape));
        for (h, a) in tape.attn.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_head = d_mixed.slice(cols);
            let da = d_head.dot(&tape.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_head));
            let mut ds = Array2::zeros(a.dim());
            Zip::from(ds.rows_mut())
                .and(a.rows())
                .and(da.rows())
                .for_each(|mut ds, a, da| {
                    let dot = a.dot(&da);
                    Zip::from(&mut ds)
                        .and(a)
                        .and(da)
                        .for_each(|s, &p, &g| *s = p * (g - dot) * scale);
                });
            dq.slice_mut(cols).assign(&ds.dot(&tape.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&tape.q.slice(cols)));
        }
        d_tokens += &self.layer(l + 1).backprop(&tape.tokens, &dq, &mut g.layers[l + 1]);
        d_tokens += &self.layer(l + 2).backprop(&tape.tokens, &dk, &mut g.layers[l + 2]);
        d_tokens += &self.layer(l + 3).backprop(&tape.tokens, &dv, &mut g.layers[l + 3]);

        let mut dh = self.layer(l).backprop(&tape.post[l - 1], &d_tokens, &mut g.layers[l]);
        for i in (0..l).rev() {
            Zip::from(&mut dh).and(&tape.pre[i]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            let x = if i == 0 { &tape.input } else { &tape.post[i - 1] };
            if i == 0 {
                g.layers[0].weight += &dh.t().dot(x);
                g.layers[0].bias += &dh.sum_axis(Axis(0));
            } else {
                dh = self.layer(i).backprop(x, &dh, &mut g.layers[i]);
            }
        }
        g
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(c.architecture.code());
        for v in [
            c.dim,
            c.k_local,
            c.mlp_layers,
            c.hidden_width,
            c.attn_heads,
            c.attn_dim,
            c.time_embed_dim,
        ] {
            w.usize(v)?;
        }
        w.f64(c.time_max_freq);
        w.f64(c.input_scale);
        w.usize(2 * self.params.layers.len())?;
        for layer in &self.params.layers {
            w.u32(2);
            w.usize(layer.weight.nrows())?;
            w.usize(layer.weight.ncols())?;
            layer.weight.iter().for_each(|&v| w.f64(v));
            w.u32(1);
            w.usize(layer.bias.len())?;
            layer.bias.iter().for_each(|&v| w.f64(v));
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let architecture = Architecture::from_code(r.u32("architecture")?)
            .ok_or_else(|| Error::format(at, "unknown architecture code"))?;
        let mut ints = [0usize; 7];
        for (v, name) in ints.iter_mut().zip([
            "dim",
            "k_local",
            "mlp_layers",
            "hidden_width",
            "attn_heads",
            "attn_dim",
            "time_embed_dim",
        ]) {
            *v = r.usize(name)?;
        }
        let config = NetConfig {
            architecture,
            dim: ints[0],
            k_local: ints[1],
            mlp_layers: ints[2],
            hidden_width: ints[3],
            attn_heads: ints[4],
            attn_dim: ints[5],
            time_embed_dim: ints[6],
            time_max_freq: r.f64("time_max_freq")?,
            input_scale: r.f64("input_scale")?,
        };
        config
            .validate()
            .map_err(|e| Error::format(at, format!("invalid config block: {e}")))?;
        let shapes = config.layer_shapes();
        let at = r.offset();
        let count = r.usize("tensor count")?;
        if count != 2 * shapes.len() {
            return Err(Error::format(
                at,
                format!("expected {} tensors for this config, found {count}", 2 * shapes.len()),
            ));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for &(o, i) in &shapes {
            let weight = read_tensor(&mut r, &[o, i])?;
            let bias = read_tensor(&mut r, &[o])?;
            layers.push(Linear {
                weight: Array2::from_shape_vec((o, i), weight).expect("checked shape"),
                bias: Array1::from(bias),
            });
        }
        r.expect_end()?;
        Ok(Self::from_parts(config, Params { layers }))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_tensor(r: &mut Reader<'_>, dims: &[usize]) -> Result<Vec<f64>> {
    let at = r.offset();
    let rank = r.usize("tensor rank")?;
    let mut got = Vec::with_capacity(rank);
    for _ in 0..rank.min(8) {
        got.push(r.usize("tensor dims")?);
    }
    if got != dims {
        return Err(Error::format(at, format!("tensor shape {got:?}, expected {dims:?}")));
    }
    r.f64s(dims.iter().product(), "tensor values")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Params,
    v: Params,
}

impl AdamState {
    pub fn new(params: &Params, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Params::zeros_like(params),
            v: Params::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut Params, grads: &Params) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::shape("adam parameter, gradient and moment shapes differ"));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (state.lr, state.eps);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m.layers)
        .zip(&mut state.v.layers)
    {
        Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(update);
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    Ok(())
}
