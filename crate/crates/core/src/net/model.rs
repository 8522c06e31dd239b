//! U-Net-style stage networks and the three-stage cascade.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv3d_backward, conv3d_forward};
use super::layers::{
    apply_mask, dropout_mask, he_init, leaky_relu_backward, leaky_relu_inplace, maxpool3d, maxpool3d_backward,
    upsample_trilinear, upsample_trilinear_backward,
};
use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};
use crate::hierarchy::LabelSchema;

/// Shape of one stage network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout: f64,
}

pub const PRE_CONVS: usize = 2;
pub const POST_CONVS: usize = 3;
const KS: usize = 3;

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.levels >= 1
            && self.base_filters >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1
            && (0.0..1.0).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid stage configuration {self:?}")))
        }
    }

    /// Required divisor of every spatial dimension.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// One convolution with its parameters; kernels are `[cout][cin][kz][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ks: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    fn zeros(name: String, cin: usize, cout: usize, ks: usize) -> Self {
        Conv {
            name,
            cin,
            cout,
            ks,
            weight: vec![T::zero(); cout * cin * ks * ks * ks],
            bias: vec![T::zero(); cout],
        }
    }

    fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        conv3d_forward(x, &self.weight, &self.bias, self.cout, self.ks)
    }
}

/// Layer list of a stage in forward order:
/// `pre0 pre1 | enc{l}.a enc{l}.b (l = 0..L) | dec{l}.a dec{l}.b (l = L-2..=0) | post0..2 | head`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel<T> {
    pub config: StageConfig,
    pub convs: Vec<Conv<T>>,
}

fn enc_index(l: usize) -> usize {
    PRE_CONVS + 2 * l
}

impl<T: Real> StageModel<T> {
    /// Architecture with all parameters zero.
    pub fn zeros(config: StageConfig) -> Result<Self> {
        config.validate()?;
        let f = config.base_filters;
        let mut convs = Vec::new();
        convs.push(Conv::zeros("pre0".into(), config.in_channels, f, KS));
        for i in 1..PRE_CONVS {
            convs.push(Conv::zeros(format!("pre{i}"), f, f, KS));
        }
        for l in 0..config.levels {
            convs.push(Conv::zeros(format!("enc{l}.a"), f, f, KS));
            convs.push(Conv::zeros(format!("enc{l}.b"), f, f, KS));
        }
        for l in (0..config.levels - 1).rev() {
            convs.push(Conv::zeros(format!("dec{l}.a"), 2 * f, f, KS));
            convs.push(Conv::zeros(format!("dec{l}.b"), f, f, KS));
        }
        for i in 0..POST_CONVS {
            convs.push(Conv::zeros(format!("post{i}"), f, f, KS));
        }
        convs.push(Conv::zeros("head".into(), f, config.out_channels, 1));
        Ok(StageModel { config, convs })
    }

    /// He-initialised kernels, zero biases.
    pub fn init<R: Rng + ?Sized>(config: StageConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        for c in &mut m.convs {
            let fan_in = c.cin * c.ks * c.ks * c.ks;
            c.weight = he_init(c.weight.len(), fan_in, rng);
        }
        Ok(m)
    }

    fn dec_index(&self, l: usize) -> usize {
        // decoder levels run from L-2 down to 0
        enc_index(self.config.levels) + 2 * (self.config.levels - 2 - l)
    }

    fn post_index(&self) -> usize {
        enc_index(self.config.levels) + 2 * (self.config.levels - 1)
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "stage expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        let d = self.config.divisor();
        let dims = x.spatial();
        if dims.iter().any(|&n| n % d != 0) {
            return Err(Error::IndivisibleDims { dims, divisor: d });
        }
        Ok(())
    }

    /// Logits for `x`; dropout is active only when `training`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor5<T>, training: bool, rng: &mut R) -> Result<Tensor5<T>> {
        Ok(self.forward_traced(x, training, rng)?.0)
    }

    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        x: &Tensor5<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor5<T>, StageTrace<T>)> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let rate = self.config.dropout;
        let conv_act = |i: usize, input: Tensor5<T>| -> Result<ConvTrace<T>> {
            let mut output = self.convs[i].forward(&input)?;
            leaky_relu_inplace(&mut output);
            Ok(ConvTrace { input, output })
        };
        let block = |i: usize, input: Tensor5<T>, rng: &mut R| -> Result<BlockTrace<T>> {
            let a = conv_act(i, input)?;
            let mask = dropout_mask::<T, R>(a.output.len(), rate, training, rng);
            let mut mid = a.output.clone();
            apply_mask(&mut mid, mask.as_deref());
            let b = conv_act(i + 1, mid)?;
            Ok(BlockTrace { a, mask, b })
        };

        let mut pre = Vec::with_capacity(PRE_CONVS);
        let mut h = x.clone();
        for i in 0..PRE_CONVS {
            let t = conv_act(i, h)?;
            h = t.output.clone();
            pre.push(t);
        }
        let mut enc = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            if l > 0 {
                let (p, arg) = maxpool3d(&h)?;
                pools.push(PoolTrace { in_shape: h.shape(), arg });
                h = p;
            }
            let t = block(enc_index(l), h, rng)?;
            h = t.b.output.clone();
            enc.push(t);
        }
        let mut dec = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let up = upsample_trilinear(&h);
            let cat = Tensor5::concat_channels(&enc[l].b.output, &up)?;
            let t = block(self.dec_index(l), cat, rng)?;
            h = t.b.output.clone();
            dec.push(t);
        }
        let mut post = Vec::with_capacity(POST_CONVS);
        for i in 0..POST_CONVS {
            let t = conv_act(self.post_index() + i, h)?;
            h = t.output.clone();
            post.push(t);
        }
        let logits = self.convs.last().unwrap().forward(&h)?;
        let trace = StageTrace {
            pre,
            enc,
            pools,
            dec,
            post,
            head_input: h,
        };
        Ok((logits, trace))
    }

    /// Accumulates parameter gradients for upstream gradient `g` on the
    /// logits into `grads`; returns the input gradient when `need_input`.
    pub fn backward(
        &self,
        trace: &StageTrace<T>,
        g: &Tensor5<T>,
        grads: &mut StageModel<T>,
        need_input: bool,
    ) -> Result<Option<Tensor5<T>>> {
        let levels = self.config.levels;
        let last = self.convs.len() - 1;
        let mut g = self.conv_back(last, &trace.head_input, None, g.clone(), grads, true)?.unwrap();
        for i in (0..POST_CONVS).rev() {
            let t = &trace.post[i];
            g = self.conv_back(self.post_index() + i, &t.input, Some(&t.output), g, grads, true)?.unwrap();
        }
        // gradient at each encoder block output, filled by skips and the path below
        let mut enc_g: Vec<Option<Tensor5<T>>> = vec![None; levels];
        // decoder blocks were recorded for l = L-2 ..= 0; walk them backwards
        for (n, l) in (0..levels - 1).enumerate() {
            let t = &trace.dec[levels - 2 - n];
            let gcat = self.block_back(self.dec_index(l), t, g, grads, true)?.unwrap();
            let f = self.config.base_filters;
            let (gskip, gup) = gcat.split_channels(f);
            add_into(&mut enc_g[l], gskip);
            let gbelow = upsample_trilinear_backward(&gup)?;
            if l + 1 == levels - 1 {
                add_into(&mut enc_g[l + 1], gbelow);
                g = Tensor5::zeros([0, 0, 0, 0, 0]);
            } else {
                g = gbelow;
            }
        }
        if levels == 1 {
            enc_g[0] = Some(g);
        }
        let mut g_in = Tensor5::zeros([0, 0, 0, 0, 0]);
        for l in (0..levels).rev() {
            let go = enc_g[l].take().expect("every encoder level receives a gradient");
            let gi = self.block_back(enc_index(l), &trace.enc[l], go, grads, true)?.unwrap();
            if l > 0 {
                let p = &trace.pools[l - 1];
                add_into(&mut enc_g[l - 1], maxpool3d_backward(p.in_shape, &p.arg, &gi));
            } else {
                g_in = gi;
            }
        }
        let mut g = g_in;
        for i in (0..PRE_CONVS).rev() {
            let t = &trace.pre[i];
            let need = i > 0 || need_input;
            match self.conv_back(i, &t.input, Some(&t.output), g, grads, need)? {
                Some(gi) => g = gi,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    /// Backward through conv + optional leaky ReLU (given the activation output).
    fn conv_back(
        &self,
        i: usize,
        input: &Tensor5<T>,
        act_out: Option<&Tensor5<T>>,
        mut g: Tensor5<T>,
        grads: &mut StageModel<T>,
        need_input: bool,
    ) -> Result<Option<Tensor5<T>>> {
        if let Some(y) = act_out {
            leaky_relu_backward(y, &mut g);
        }
        let c = &self.convs[i];
        let cg = conv3d_backward(input, &c.weight, &g, c.ks, need_input)?;
        let dst = &mut grads.convs[i];
        for (a, &b) in dst.weight.iter_mut().zip(&cg.weight) {
            *a += b;
        }
        for (a, &b) in dst.bias.iter_mut().zip(&cg.bias) {
            *a += b;
        }
        Ok(cg.input)
    }

    fn block_back(
        &self,
        i: usize,
        t: &BlockTrace<T>,
        g: Tensor5<T>,
        grads: &mut StageModel<T>,
        need_input: bool,
    ) -> Result<Option<Tensor5<T>>> {
        let mut gm = self.conv_back(i + 1, &t.b.input, Some(&t.b.output), g, grads, true)?.unwrap();
        apply_mask(&mut gm, t.mask.as_deref());
        self.conv_back(i, &t.a.input, Some(&t.a.output), gm, grads, need_input)
    }

    /// All parameter tensors as `(name, data)` in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut v = Vec::with_capacity(2 * self.convs.len());
        for c in &self.convs {
            v.push((format!("{}.weight", c.name), c.weight.as_slice()));
            v.push((format!("{}.bias", c.name), c.bias.as_slice()));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::with_capacity(2 * self.convs.len());
        for c in &mut self.convs {
            v.push(c.weight.as_mut_slice());
            v.push(c.bias.as_mut_slice());
        }
        v
    }

    pub fn cast<U: Real>(&self) -> StageModel<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64(x.as_f64())).collect();
        StageModel {
            config: self.config,
            convs: self
                .convs
                .iter()
                .map(|c| Conv {
                    name: c.name.clone(),
                    cin: c.cin,
                    cout: c.cout,
                    ks: c.ks,
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                })
                .collect(),
        }
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor5<T>>, g: Tensor5<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[derive(Debug, Clone)]
struct ConvTrace<T> {
    input: Tensor5<T>,
    /// After the activation.
    output: Tensor5<T>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    a: ConvTrace<T>,
    mask: Option<Vec<T>>,
    b: ConvTrace<T>,
}

#[derive(Debug, Clone)]
struct PoolTrace {
    in_shape: [usize; 5],
    arg: Vec<usize>,
}

/// Activations recorded by [`StageModel::forward_traced`].
#[derive(Debug, Clone)]
pub struct StageTrace<T> {
    pre: Vec<ConvTrace<T>>,
    enc: Vec<BlockTrace<T>>,
    pools: Vec<PoolTrace>,
    dec: Vec<BlockTrace<T>>,
    post: Vec<ConvTrace<T>>,
    head_input: Tensor5<T>,
}

/// Architecture shared by the three stages of a cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub levels: usize,
    pub base_filters: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            levels: 3,
            base_filters: 8,
            dropout: 0.1,
        }
    }
}

impl NetConfig {
    /// Stage `s` (1-based): input channels 1, 1 + K1, 1 + K2; outputs K1, K2, K3.
    pub fn stage(&self, s: usize) -> StageConfig {
        let k = |s: usize| LabelSchema::for_stage(s).expect("stage in 1..=3").num_labels();
        StageConfig {
            levels: self.levels,
            base_filters: self.base_filters,
            in_channels: if s == 1 { 1 } else { 1 + k(s - 1) },
            out_channels: k(s),
            dropout: self.dropout,
        }
    }
}

/// `p1 = M1(x)`, `p2 = M2(p1 ⊕ x)`, `p3 = M3(p2 ⊕ x)` on raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel<T> {
    pub config: NetConfig,
    pub stages: [StageModel<T>; 3],
}

/// Logits of the three stages; stage 3 is absent when it was skipped.
#[derive(Debug, Clone)]
pub struct CascadeOutput<T> {
    pub p1: Tensor5<T>,
    pub p2: Tensor5<T>,
    pub p3: Option<Tensor5<T>>,
}

#[derive(Debug, Clone)]
pub struct CascadeTrace<T> {
    stages: [Option<StageTrace<T>>; 3],
}

impl<T> CascadeTrace<T> {
    pub fn has_stage(&self, s: usize) -> bool {
        self.stages[s - 1].is_some()
    }
}

impl<T: Real> CascadeModel<T> {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        Ok(CascadeModel {
            config,
            stages: [
                StageModel::zeros(config.stage(1))?,
                StageModel::zeros(config.stage(2))?,
                StageModel::zeros(config.stage(3))?,
            ],
        })
    }

    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        Ok(CascadeModel {
            config,
            stages: [
                StageModel::init(config.stage(1), rng)?,
                StageModel::init(config.stage(2), rng)?,
                StageModel::init(config.stage(3), rng)?,
            ],
        })
    }

    /// A zero-valued model with the same architecture.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("validated at construction")
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor5<T>, training: bool, rng: &mut R) -> Result<CascadeOutput<T>> {
        Ok(self.forward_traced(x, training, true, rng)?.0)
    }

    /// Runs the cascade, recording activations; stage 3 runs only when
    /// `with_stage3`.
    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        x: &Tensor5<T>,
        training: bool,
        with_stage3: bool,
        rng: &mut R,
    ) -> Result<(CascadeOutput<T>, CascadeTrace<T>)> {
        if x.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "cascade input must have 1 channel, got {}",
                x.channels()
            )));
        }
        let (p1, t1) = self.stages[0].forward_traced(x, training, rng)?;
        let (p2, t2) = self.stages[1].forward_traced(&Tensor5::concat_channels(&p1, x)?, training, rng)?;
        let (p3, t3) = if with_stage3 {
            let (p, t) = self.stages[2].forward_traced(&Tensor5::concat_channels(&p2, x)?, training, rng)?;
            (Some(p), Some(t))
        } else {
            (None, None)
        };
        Ok((
            CascadeOutput { p1, p2, p3 },
            CascadeTrace {
                stages: [Some(t1), Some(t2), t3],
            },
        ))
    }

    /// Back-propagates logit gradients through all stages into `grads`.
    ///
    /// Stage-3 parameters are touched only when `g3` is given.
    pub fn backward(
        &self,
        trace: Option<&CascadeTrace<T>>,
        g1: &Tensor5<T>,
        g2: &Tensor5<T>,
        g3: Option<&Tensor5<T>>,
        grads: &mut CascadeModel<T>,
    ) -> Result<()> {
        let trace = trace.ok_or(Error::NoRecordedForward)?;
        let [t1, t2, t3] = &trace.stages;
        let (t1, t2) = (t1.as_ref().ok_or(Error::NoRecordedForward)?, t2.as_ref().ok_or(Error::NoRecordedForward)?);
        let [gs1, gs2, gs3] = &mut grads.stages;
        let mut g2 = g2.clone();
        if let Some(g3) = g3 {
            let t3 = t3.as_ref().ok_or(Error::NoRecordedForward)?;
            let gin = self.stages[2].backward(t3, g3, gs3, true)?.unwrap();
            g2.add_assign(&gin.split_channels(g2.channels()).0);
        }
        let gin = self.stages[1].backward(t2, &g2, gs2, true)?.unwrap();
        let mut g1 = g1.clone();
        g1.add_assign(&gin.split_channels(g1.channels()).0);
        self.stages[0].backward(t1, &g1, gs1, false)?;
        Ok(())
    }

    /// Named parameter tensors, prefixed `stage{s}/`.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut v = Vec::new();
        for (s, m) in self.stages.iter().enumerate() {
            for (name, data) in m.tensors() {
                v.push((format!("stage{}/{name}", s + 1), data));
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.stages.iter_mut().flat_map(|m| m.tensors_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|m| m.num_params()).sum()
    }

    pub fn cast<U: Real>(&self) -> CascadeModel<U> {
        CascadeModel {
            config: self.config,
            stages: [self.stages[0].cast(), self.stages[1].cast(), self.stages[2].cast()],
        }
    }
}
