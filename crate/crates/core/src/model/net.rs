use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::align::interpolation_matrix;
use super::config::{Modality, ModelConfig};
use super::loss::task_loss_graph;
use super::params::{fan_in_uniform, orthogonal, ParamStore};
use super::ModelError;
use crate::oracle::Task;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, Graph, Tensor, Var};

/// Frames grouped per unique clip: `[U, M_max, S, S]`, pixel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch<T> {
    pub frames: Tensor<T>,
    pub lengths: Vec<usize>,
    /// Clip used by each utterance of the batch.
    pub index: Vec<usize>,
}

/// Padded model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B, T_max, F]` compressed magnitudes, zero beyond each length.
    pub spec: Tensor<T>,
    pub lengths: Vec<usize>,
    pub video: Option<VideoBatch<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.spec.shape()[1]
    }

    fn time_valid(&self) -> Vec<bool> {
        let t = self.max_len();
        self.lengths.iter().flat_map(|&len| (0..t).map(move |i| i < len)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm and dropout with a mask drawn from the seed.
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub task: Task,
    /// `[B, T]` frame scores.
    pub frames: Var,
    /// `[B]` masked mean of frame scores.
    pub utterance: Var,
    /// `[B, T, T]` row-stochastic attention weights.
    pub attention: Var,
    /// `[B, T, d_h]` attention output.
    pub attended: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub heads: Vec<HeadOutput>,
    /// `[B, T, d_h]` trunk output.
    pub trunk: Var,
    /// `[U, M_max, d_v]` visual embeddings when the visual branch ran.
    pub visual: Option<Var>,
    /// Input nodes; differentiable only after [`Model::forward_tracked`].
    pub spec_input: Var,
    pub video_input: Option<Var>,
    /// `(running_mean id, running_var id, node)` per training-mode batch norm.
    bn_nodes: Vec<(usize, usize, Var)>,
}

impl ForwardOutput {
    pub fn head(&self, task: Task) -> Option<&HeadOutput> {
        self.heads.iter().find(|h| h.task == task)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: (usize, usize),
    pad: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct BasicBlock {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    down: Option<(Conv, Bn)>,
}

#[derive(Clone, Debug)]
struct Visual {
    stem: usize,
    stem_bn: Bn,
    blocks: Vec<BasicBlock>,
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    w_ih: usize,
    w_hh: usize,
    b: usize,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    task: Task,
    wq: usize,
    wk: usize,
    wv: usize,
    w_out: usize,
    b_out: usize,
}

/// The dual-branch assessment network.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    visual: Option<Visual>,
    convs: Vec<Conv>,
    fwd: Lstm,
    bwd: Lstm,
    dense_w: usize,
    dense_b: usize,
    heads: Vec<Head>,
}

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, relu: bool) -> usize {
        let t = fan_in_uniform(&mut self.rng, shape, fan_in, relu);
        self.params.add(name, t, true)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.params.add(name, Tensor::zeros(shape), true)
    }

    fn conv(&mut self, name: &str, o: usize, c: usize, k: usize, stride: (usize, usize), bias: bool) -> Conv {
        let w = self.weight(&format!("{name}.weight"), &[o, c, k, k], c * k * k, true);
        let b = bias.then(|| self.zeros(&format!("{name}.bias"), &[o]));
        Conv { w, b, stride, pad: (k / 2, k / 2) }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.params.add(format!("{name}.weight"), Tensor::full(&[c], T::one()), true),
            beta: self.zeros(&format!("{name}.bias"), &[c]),
            mean: self.params.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            var: self.params.add(format!("{name}.running_var"), Tensor::full(&[c], T::one()), false),
        }
    }

    fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> Lstm {
        let w_ih = self.weight(&format!("{name}.w_ih"), &[input, 4 * hidden], input, false);
        // orthogonal recurrent kernel per gate, stored as [H, 4H]
        let mut w_hh = vec![0.0; hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(&mut self.rng, hidden);
            for r in 0..hidden {
                for c in 0..hidden {
                    w_hh[r * 4 * hidden + gate * hidden + c] = q[r * hidden + c];
                }
            }
        }
        let w_hh = self.params.add(format!("{name}.w_hh"), Tensor::from_f64(&[hidden, 4 * hidden], &w_hh), true);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = self.params.add(format!("{name}.bias"), Tensor::from_f64(&[4 * hidden], &b), true);
        Lstm { w_ih, w_hh, b, hidden }
    }
}

/// Forward-pass state shared by the layer helpers.
struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    params: &'a ParamStore<T>,
    mode: Mode,
    eps: T,
    bn_nodes: Vec<(usize, usize, Var)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&mut self, id: usize) -> Var {
        self.g.param(id, self.params.get(id))
    }

    fn conv(&mut self, x: Var, c: Conv) -> Var {
        let w = self.p(c.w);
        let b = c.b.map(|b| self.p(b));
        self.g.conv2d(x, w, b, c.stride, c.pad)
    }

    fn bn(&mut self, x: Var, bn: Bn, mask: &[bool]) -> Var {
        let (gamma, beta) = (self.p(bn.gamma), self.p(bn.beta));
        match self.mode {
            Mode::Train { .. } => {
                let y = self.g.batch_norm(x, gamma, beta, BatchNormMode::Train { mask: Some(mask) }, self.eps);
                self.bn_nodes.push((bn.mean, bn.var, y));
                y
            }
            Mode::Eval => {
                let (mean, var) = (self.params.get(bn.mean).data(), self.params.get(bn.var).data());
                self.g.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean, var }, self.eps)
            }
        }
    }

    fn basic_block(&mut self, x: Var, b: &BasicBlock, mask: &[bool]) -> Var {
        let y = self.conv(x, b.conv1);
        let y = self.bn(y, b.bn1, mask);
        let y = self.g.relu(y);
        let y = self.conv(y, b.conv2);
        let y = self.bn(y, b.bn2, mask);
        let skip = match b.down {
            Some((c, bn)) => {
                let s = self.conv(x, c);
                self.bn(s, bn, mask)
            }
            None => x,
        };
        let y = self.g.add(y, skip);
        self.g.relu(y)
    }

    /// `x @ w + b` over the last axis of `[.., in]`.
    fn linear(&mut self, x: Var, w: usize, b: Option<usize>) -> Var {
        let shape = self.g.shape(x).to_vec();
        let din = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / din;
        let x2 = self.g.reshape(x, &[rows, din]);
        let wv = self.p(w);
        let dout = self.g.shape(wv)[1];
        let mut y = self.g.matmul(x2, wv);
        if let Some(b) = b {
            let bv = self.p(b);
            let bb = self.g.broadcast_to(bv, &[rows, dout]);
            y = self.g.add(y, bb);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = dout;
        self.g.reshape(y, &oshape)
    }

    /// One LSTM direction over `[B, T, D]`. Padded steps carry the previous
    /// state unchanged.
    fn lstm(&mut self, x: Var, l: Lstm, valid: &[bool], reverse: bool) -> Var {
        let shape = self.g.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let h = l.hidden;
        let xp = self.linear(x, l.w_ih, Some(l.b));
        let w_hh = self.p(l.w_hh);
        let mut h_prev = self.g.constant(Tensor::zeros(&[b, h]));
        let mut c_prev = self.g.constant(Tensor::zeros(&[b, h]));
        let mut outs = vec![None; t];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in steps {
            let xt = self.g.select(xp, 1, step);
            let rec = self.g.matmul(h_prev, w_hh);
            let gates = self.g.add(xt, rec);
            let i = self.g.slice_last(gates, 0, h);
            let f = self.g.slice_last(gates, h, h);
            let gg = self.g.slice_last(gates, 2 * h, h);
            let o = self.g.slice_last(gates, 3 * h, h);
            let i = self.g.sigmoid(i);
            let f = self.g.sigmoid(f);
            let gg = self.g.tanh(gg);
            let o = self.g.sigmoid(o);
            let fc = self.g.mul(f, c_prev);
            let ig = self.g.mul(i, gg);
            let c_new = self.g.add(fc, ig);
            let tc = self.g.tanh(c_new);
            let h_new = self.g.mul(o, tc);
            let all_valid = (0..b).all(|bi| valid[bi * t + step]);
            let (h_next, c_next) = if all_valid {
                (h_new, c_new)
            } else {
                let m: Vec<f64> = (0..b)
                    .flat_map(|bi| std::iter::repeat_n(if valid[bi * t + step] { 1.0 } else { 0.0 }, h))
                    .collect();
                let mv = self.g.constant(Tensor::from_f64(&[b, h], &m));
                let blend = |g: &mut Graph<T>, new: Var, old: Var| {
                    let d = g.sub(new, old);
                    let d = g.mul(d, mv);
                    g.add(old, d)
                };
                (blend(self.g, h_new, h_prev), blend(self.g, c_new, c_prev))
            };
            outs[step] = Some(h_next);
            h_prev = h_next;
            c_prev = c_next;
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.unwrap()).collect();
        self.g.stack(&outs, 1)
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };

        let visual = (cfg.modality == Modality::Multimodal).then(|| {
            let c0 = cfg.scaled(cfg.visual_stem_channels);
            let stem = b.weight("visual.stem.weight", &[c0, 1, 5, 7, 7], 5 * 7 * 7, true);
            let stem_bn = b.bn("visual.stem_bn", c0);
            let mut blocks = Vec::new();
            let mut cin = c0;
            for stage in 0..4 {
                let cout = c0 << stage;
                for k in 0..2 {
                    let name = format!("visual.layer{}.{k}", stage + 1);
                    let stride = if stage > 0 && k == 0 { 2 } else { 1 };
                    let conv1 = b.conv(&format!("{name}.conv1"), cout, cin, 3, (stride, stride), false);
                    let bn1 = b.bn(&format!("{name}.bn1"), cout);
                    let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, (1, 1), false);
                    let bn2 = b.bn(&format!("{name}.bn2"), cout);
                    let down = (stride != 1 || cin != cout).then(|| {
                        let c = b.conv(&format!("{name}.downsample.0"), cout, cin, 1, (stride, stride), false);
                        (c, b.bn(&format!("{name}.downsample.1"), cout))
                    });
                    blocks.push(BasicBlock { conv1, bn1, conv2, bn2, down });
                    cin = cout;
                }
            }
            Visual { stem, stem_bn, blocks }
        });

        let mut convs = Vec::new();
        let mut cin = 1;
        for (blk, &base) in cfg.conv_channels.iter().enumerate() {
            let cout = cfg.scaled(base);
            for layer in 0..cfg.conv_layers_per_block {
                let stride = if layer + 1 == cfg.conv_layers_per_block { (1, 2) } else { (1, 1) };
                convs.push(b.conv(&format!("trunk.conv{}.{layer}", blk + 1), cout, cin, 3, stride, true));
                cin = cout;
            }
        }
        let flat = cin * cfg.conv_out_width();
        let hidden = cfg.scaled(cfg.blstm_width);
        let fwd = b.lstm("trunk.blstm.fwd", flat, hidden);
        let bwd = b.lstm("trunk.blstm.bwd", flat, hidden);
        let d_h = cfg.d_h();
        let dense_w = b.weight("trunk.dense.weight", &[2 * hidden, d_h], 2 * hidden, true);
        let dense_b = b.zeros("trunk.dense.bias", &[d_h]);

        let heads = cfg
            .tasks
            .tasks()
            .iter()
            .map(|&task| {
                let n = format!("head.{}", task.name());
                Head {
                    task,
                    wq: b.weight(&format!("{n}.attn.wq"), &[d_h, d_h], d_h, false),
                    wk: b.weight(&format!("{n}.attn.wk"), &[d_h, d_h], d_h, false),
                    wv: b.weight(&format!("{n}.attn.wv"), &[d_h, d_h], d_h, false),
                    w_out: b.weight(&format!("{n}.out.weight"), &[d_h, 1], d_h, false),
                    b_out: b.zeros(&format!("{n}.out.bias"), &[1]),
                }
            })
            .collect();

        Ok(Self { cfg, params, visual, convs, fwd, bwd, dense_w, dense_b, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            visual: self.visual.clone(),
            convs: self.convs.clone(),
            fwd: self.fwd,
            bwd: self.bwd,
            dense_w: self.dense_w,
            dense_b: self.dense_b,
            heads: self.heads.clone(),
        }
    }

    /// Sets the frame-score bias of `task`'s head.
    pub fn set_head_bias(&mut self, task: Task, value: f64) {
        if let Some(h) = self.heads.iter().find(|h| h.task == task) {
            *self.params.get_mut(h.b_out) = Tensor::from_f64(&[1], &[value]);
        }
    }

    /// Parameter ids of `task`'s head.
    pub fn head_param_ids(&self, task: Task) -> Vec<usize> {
        self.heads.iter().filter(|h| h.task == task).flat_map(|h| [h.wq, h.wk, h.wv, h.w_out, h.b_out]).collect()
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<(), ModelError> {
        let s = batch.spec.shape();
        if s.len() != 3 || s[2] != self.cfg.n_freq || s[0] != batch.lengths.len() {
            return Err(ModelError::Shape(format!("spectrogram batch {s:?} does not match F = {}", self.cfg.n_freq)));
        }
        if batch.lengths.iter().any(|&l| l == 0 || l > s[1]) {
            return Err(ModelError::Shape("every length must be in 1..=T_max".into()));
        }
        match (&self.visual, &batch.video) {
            (Some(_), None) => return Err(ModelError::Modality("multimodal model needs video input".into())),
            (Some(_), Some(v)) => {
                let vs = v.frames.shape();
                let sz = self.cfg.frame_size;
                if vs.len() != 4 || vs[2] != sz || vs[3] != sz {
                    return Err(ModelError::VideoFormat(format!("expected [U, M, {sz}, {sz}] frames, got {vs:?}")));
                }
                if v.lengths.len() != vs[0] || v.index.len() != batch.size() || v.index.iter().any(|&u| u >= vs[0]) {
                    return Err(ModelError::Shape("video index/lengths do not match the batch".into()));
                }
                if v.lengths.iter().any(|&m| m < 2 || m > vs[1]) {
                    return Err(ModelError::VideoFormat("each clip needs 2..=M_max frames".into()));
                }
            }
            (None, _) => {}
        }
        Ok(())
    }

    /// `[U, M_max, d_v]` per-frame visual embeddings.
    fn visual_forward(&self, ctx: &mut Ctx<'_, T>, v: &Visual, video: &VideoBatch<T>, x: Var) -> Var {
        let vs = video.frames.shape().to_vec();
        let (u, m_max, sz) = (vs[0], vs[1], vs[2]);
        // symmetric temporal padding of two frames per side, per clip
        let maps: Vec<Vec<Option<usize>>> = video
            .lengths
            .iter()
            .map(|&m| {
                (0..m_max + 4)
                    .map(|j| {
                        let s = j as isize - 2;
                        let m = m as isize;
                        if s < -2 || s >= m + 2 {
                            None
                        } else if s < 0 {
                            Some((-s - 1) as usize)
                        } else if s >= m {
                            Some((2 * m - s - 1) as usize)
                        } else {
                            Some(s as usize)
                        }
                    })
                    .collect()
            })
            .collect();
        let x = ctx.g.gather_axis1(x, maps);
        let x = ctx.g.reshape(x, &[u, 1, m_max + 4, sz, sz]);
        let w = ctx.p(v.stem);
        let y = ctx.g.conv3d(x, w, (1, 2, 2), (0, 3, 3));
        let ys = ctx.g.shape(y).to_vec();
        let (c0, h, wd) = (ys[1], ys[3], ys[4]);
        let y = ctx.g.permute(y, &[0, 2, 1, 3, 4]);
        let y = ctx.g.reshape(y, &[u * m_max, c0, h, wd]);
        let mask: Vec<bool> = video.lengths.iter().flat_map(|&m| (0..m_max).map(move |i| i < m)).collect();
        let y = ctx.bn(y, v.stem_bn, &mask);
        let y = ctx.g.relu(y);
        let mut y = ctx.g.max_pool2d(y, 3, 2, 1);
        for blk in &v.blocks {
            y = ctx.basic_block(y, blk, &mask);
        }
        let e = ctx.g.mean_spatial(y);
        let d_v = ctx.g.shape(e)[1];
        ctx.g.reshape(e, &[u, m_max, d_v])
    }

    /// Eval-mode visual embeddings `[M, d_v]` of one `[M, S, S]` clip.
    pub fn visual_encode(&self, frames: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let v = self.visual.as_ref().ok_or_else(|| ModelError::Modality("audio-only model has no visual branch".into()))?;
        let s = frames.shape();
        let sz = self.cfg.frame_size;
        if s.len() != 3 || s[1] != sz || s[2] != sz {
            return Err(ModelError::VideoFormat(format!("expected [M, {sz}, {sz}] grayscale frames, got {s:?}")));
        }
        if s[0] < 5 {
            return Err(ModelError::VideoFormat(format!("need at least 5 frames, got {}", s[0])));
        }
        let video = VideoBatch { frames: frames.clone().reshaped(&[1, s[0], sz, sz]), lengths: vec![s[0]], index: vec![0] };
        let mut g = Graph::new();
        let mut ctx = Ctx { g: &mut g, params: &self.params, mode: Mode::Eval, eps: T::of(self.cfg.bn_eps), bn_nodes: Vec::new() };
        let x = ctx.g.constant(video.frames.clone());
        let e = self.visual_forward(&mut ctx, v, &video, x);
        let d_v = self.cfg.d_v();
        Ok(g.value(e).clone().reshaped(&[s[0], d_v]))
    }

    /// Full forward pass.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>, mode: Mode) -> Result<ForwardOutput, ModelError> {
        self.forward_impl(g, batch, mode, false)
    }

    /// Forward pass with differentiable spectrogram and video inputs.
    pub fn forward_tracked(&self, g: &mut Graph<T>, batch: &Batch<T>, mode: Mode) -> Result<ForwardOutput, ModelError> {
        self.forward_impl(g, batch, mode, true)
    }

    fn forward_impl(&self, g: &mut Graph<T>, batch: &Batch<T>, mode: Mode, track: bool) -> Result<ForwardOutput, ModelError> {
        self.check_batch(batch)?;
        let (b, t_max) = (batch.size(), batch.max_len());
        let d_v = self.cfg.d_v();
        let valid = batch.time_valid();
        let mut ctx = Ctx { g, params: &self.params, mode, eps: T::of(self.cfg.bn_eps), bn_nodes: Vec::new() };

        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| if track { g.input(t.clone()) } else { g.constant(t.clone()) };
        let spec = leaf(ctx.g, &batch.spec);
        let mut video_input = None;
        let (vis_block, visual) = match (&self.visual, &batch.video) {
            (Some(v), Some(video)) => {
                let x = leaf(ctx.g, &video.frames);
                video_input = Some(x);
                let emb = self.visual_forward(&mut ctx, v, video, x);
                let m_max = video.frames.shape()[1];
                let u = video.lengths.len();
                // block interpolation matrix from clip frames to utterance frames
                let mut w = vec![0.0; b * t_max * u * m_max];
                for (bi, (&len, &clip)) in batch.lengths.iter().zip(&video.index).enumerate() {
                    let m = video.lengths[clip];
                    let local = interpolation_matrix(m, len);
                    for t in 0..len {
                        let row = (bi * t_max + t) * u * m_max + clip * m_max;
                        w[row..row + m].copy_from_slice(&local[t * m..(t + 1) * m]);
                    }
                }
                let wv = ctx.g.constant(Tensor::from_f64(&[b * t_max, u * m_max], &w));
                let flat = ctx.g.reshape(emb, &[u * m_max, d_v]);
                let up = ctx.g.matmul(wv, flat);
                (ctx.g.reshape(up, &[b, t_max, d_v]), Some(emb))
            }
            _ => (ctx.g.constant(Tensor::zeros(&[b, t_max, d_v])), None),
        };
        let fused = ctx.g.concat_last(&[spec, vis_block]);

        // convolutional trunk over the (time, feature) plane
        let width = self.cfg.n_freq + d_v;
        let mut x = ctx.g.reshape(fused, &[b, 1, t_max, width]);
        for &c in &self.convs {
            x = ctx.conv(x, c);
            x = ctx.g.relu(x);
            if valid.iter().any(|v| !v) {
                let s = ctx.g.shape(x).to_vec();
                let per: usize = s[3];
                let m: Vec<f64> = (0..b)
                    .flat_map(|bi| {
                        let valid = &valid;
                        (0..s[1]).flat_map(move |_| {
                            (0..t_max).flat_map(move |ti| std::iter::repeat_n(if valid[bi * t_max + ti] { 1.0 } else { 0.0 }, per))
                        })
                    })
                    .collect();
                let mv = ctx.g.constant(Tensor::from_f64(&s, &m));
                x = ctx.g.mul(x, mv);
            }
        }
        let s = ctx.g.shape(x).to_vec();
        let x = ctx.g.permute(x, &[0, 2, 1, 3]);
        let x = ctx.g.reshape(x, &[b, t_max, s[1] * s[3]]);

        let hf = ctx.lstm(x, self.fwd, &valid, false);
        let hb = ctx.lstm(x, self.bwd, &valid, true);
        let h = ctx.g.concat_last(&[hf, hb]);
        let h = ctx.linear(h, self.dense_w, Some(self.dense_b));
        let mut h = ctx.g.relu(h);
        let d_h = self.cfg.d_h();
        if let Mode::Train { dropout_seed } = mode {
            if self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let m: Vec<f64> =
                    (0..b * t_max * d_h).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let mv = ctx.g.constant(Tensor::from_f64(&[b, t_max, d_h], &m));
                h = ctx.g.mul(h, mv);
            }
        }
        let trunk = h;

        let pool_w: Vec<f64> = batch
            .lengths
            .iter()
            .flat_map(|&len| (0..t_max).map(move |i| if i < len { 1.0 / len as f64 } else { 0.0 }))
            .collect();
        let pool_w = ctx.g.constant(Tensor::from_f64(&[b, t_max], &pool_w));
        let inv_sqrt = T::of(1.0 / (d_h as f64).sqrt());
        let mut heads = Vec::new();
        for hd in &self.heads {
            let q = ctx.linear(trunk, hd.wq, None);
            let k = ctx.linear(trunk, hd.wk, None);
            let v = ctx.linear(trunk, hd.wv, None);
            let scores = ctx.g.bmm(q, k, true);
            let scores = ctx.g.scale(scores, inv_sqrt);
            let attention = ctx.g.masked_softmax(scores, Some(&valid));
            let attended = ctx.g.bmm(attention, v, false);
            let f = ctx.linear(attended, hd.w_out, Some(hd.b_out));
            let frames = ctx.g.reshape(f, &[b, t_max]);
            let weighted = ctx.g.mul(frames, pool_w);
            let utterance = ctx.g.sum_axis(weighted, 1);
            heads.push(HeadOutput { task: hd.task, frames, utterance, attention, attended });
        }
        Ok(ForwardOutput { heads, trunk, visual, spec_input: spec, video_input, bn_nodes: ctx.bn_nodes })
    }

    /// Weighted multi-task loss and the per-task terms. `targets` holds one
    /// value per utterance for each active task.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        out: &ForwardOutput,
        targets: &[(Task, Vec<f64>)],
        lengths: &[usize],
    ) -> Result<(Var, Vec<(Task, Var)>), ModelError> {
        let mut total: Option<Var> = None;
        let mut parts = Vec::new();
        for h in &out.heads {
            let weight = self.cfg.task_weight(h.task);
            if weight == 0.0 {
                continue;
            }
            let y = targets
                .iter()
                .find(|(t, _)| *t == h.task)
                .ok_or_else(|| ModelError::Config(format!("missing {} targets", h.task.name())))?;
            let l = task_loss_graph(g, h.frames, h.utterance, &y.1, lengths, self.cfg.alpha(h.task));
            parts.push((h.task, l));
            let wl = g.scale(l, T::of(weight));
            total = Some(match total {
                Some(t) => g.add(t, wl),
                None => wl,
            });
        }
        let total = total.ok_or_else(|| ModelError::Config("no weighted task".into()))?;
        Ok((total, parts))
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics: `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, g: &Graph<T>, out: &ForwardOutput) {
        let mom = T::of(self.cfg.bn_momentum);
        for &(mean_id, var_id, node) in &out.bn_nodes {
            let Some((bm, bv)) = g.batch_norm_stats(node) else { continue };
            let (bm, bv) = (bm.to_vec(), bv.to_vec());
            for (r, s) in [(mean_id, bm), (var_id, bv)] {
                let run = self.params.get_mut(r);
                for (x, &y) in run.data_mut().iter_mut().zip(&s) {
                    *x = (T::one() - mom) * *x + mom * y;
                }
            }
        }
    }
}
