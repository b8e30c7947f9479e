//! Lightweight dehazing student: nested residual blocks with channel and
//! pixel attention, plus 1×1 adapters that project its taps onto the
//! teacher's tap widths.

use hkd_tensor::{ConvSpec, Element, PadMode, Tape, Tensor, Var};

use crate::bench::CostModel;
use crate::error::{CoreError, Result};
use crate::image::ImageRGB;
use crate::nn::{Conv, Graph, Init, LayerOp, ParamStore};
use crate::teacher::{FeatureTap, FsrcnnBranchConfig, TapSource};

pub const PREFIX: &str = "student.";
/// Adapters are training-only and live under their own prefix so a
/// deployment load can drop them.
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const MIN_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StudentConfig {
    pub width: usize,
    pub outer_blocks: usize,
    pub inner_blocks: usize,
    /// Hidden width of the attention MLPs is `width / reduction`.
    pub reduction: usize,
    /// Teacher tap widths per level; student tap `k` is projected onto level
    /// `min(k, len − 1)`.
    pub teacher_tap_channels: Vec<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            width: 16,
            outer_blocks: 3,
            inner_blocks: 6,
            reduction: 8,
            teacher_tap_channels: FsrcnnBranchConfig::default().tap_channels().to_vec(),
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.outer_blocks == 0 || self.inner_blocks == 0 || self.reduction == 0 {
            return Err(CoreError::Config(format!("student sizes must be positive: {self:?}")));
        }
        if self.teacher_tap_channels.is_empty() || self.teacher_tap_channels.contains(&0) {
            return Err(CoreError::Config("teacher tap widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.width / self.reduction).max(1)
    }

    /// Teacher level paired with student tap `k`.
    pub fn teacher_level(&self, k: usize) -> usize {
        k.min(self.teacher_tap_channels.len() - 1)
    }
}

fn conv3(name: String, cin: usize, cout: usize) -> Conv {
    Conv::new(name, ConvSpec::new(cin, cout, 3).with_pad_mode(PadMode::Reflect))
}

fn conv1(name: String, cin: usize, cout: usize) -> Conv {
    Conv::new(name, ConvSpec::new(cin, cout, 1))
}

/// `x ⊙ σ(MLP(GAP(x)))` with per-channel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            fc1: conv1(format!("{name}.fc1"), channels, hidden),
            fc2: conv1(format!("{name}.fc2"), hidden, channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.fc1.init(store, seed, Init::Kaiming);
        self.fc2.init(store, seed, Init::Kaiming);
    }

    /// Returns `(output, weights)`; weights are `B × C × 1 × 1`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let pooled = g.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.tape.relu(h);
        let h = self.fc2.forward(g, h)?;
        let w = g.tape.sigmoid(h);
        Ok((g.tape.scale_channels(x, w)?, w))
    }
}

/// `x ⊙ σ(MLP(x))` with one weight per pixel shared across channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl PixelAttention {
    pub fn new(name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            fc1: conv1(format!("{name}.fc1"), channels, hidden),
            fc2: conv1(format!("{name}.fc2"), hidden, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.fc1.init(store, seed, Init::Kaiming);
        self.fc2.init(store, seed, Init::Kaiming);
    }

    /// Returns `(output, map)`; the map is `B × 1 × H × W`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.relu(h);
        let h = self.fc2.forward(g, h)?;
        let a = g.tape.sigmoid(h);
        Ok((g.tape.scale_pixels(x, a)?, a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub ca: ChannelAttention,
    pub pa: PixelAttention,
}

/// Attention weights produced by one inner block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub channel: Var,
    pub pixel: Var,
}

impl InnerBlock {
    fn new(name: &str, c: usize, hidden: usize) -> Self {
        Self {
            conv1: conv3(format!("{name}.conv1"), c, c),
            conv2: conv3(format!("{name}.conv2"), c, c),
            ca: ChannelAttention::new(&format!("{name}.ca"), c, hidden),
            pa: PixelAttention::new(&format!("{name}.pa"), c, hidden),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, AttentionVars)> {
        let h = self.conv1.forward(g, x)?;
        let h = g.tape.relu(h);
        let h = self.conv2.forward(g, h)?;
        let (h, channel) = self.ca.forward(g, h)?;
        let (h, pixel) = self.pa.forward(g, h)?;
        Ok((g.tape.add(h, x)?, AttentionVars { channel, pixel }))
    }

    fn convs(&self) -> [&Conv; 6] {
        [&self.conv1, &self.conv2, &self.ca.fc1, &self.ca.fc2, &self.pa.fc1, &self.pa.fc2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterBlock {
    pub inner: Vec<InnerBlock>,
    pub tail: Conv,
}

impl OuterBlock {
    fn new(name: &str, cfg: &StudentConfig) -> Self {
        Self {
            inner: (0..cfg.inner_blocks)
                .map(|i| InnerBlock::new(&format!("{name}.inner{i}"), cfg.width, cfg.hidden()))
                .collect(),
            tail: conv3(format!("{name}.tail"), cfg.width, cfg.width),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, attn: &mut Vec<AttentionVars>) -> Result<Var> {
        let mut h = x;
        for block in &self.inner {
            let (out, a) = block.forward(g, h)?;
            attn.push(a);
            h = out;
        }
        let h = self.tail.forward(g, h)?;
        Ok(g.tape.add(h, x)?)
    }
}

/// Network structure without weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentArch {
    pub config: StudentConfig,
    pub stem: Conv,
    pub outer: Vec<OuterBlock>,
    pub fuse: Vec<Conv>,
    pub fuse_final: Conv,
    pub recon: Conv,
    pub adapters: Vec<Conv>,
}

/// Symbolic outputs of one student forward pass.
#[derive(Clone, Debug)]
pub struct StudentOutput {
    /// Unclamped `B × 3 × H × W` prediction.
    pub out: Var,
    /// Outer-block outputs, `B × C × H × W` each.
    pub features: Vec<Var>,
    /// Adapter projections of `features`; empty unless requested.
    pub taps: Vec<Var>,
    pub attention: Vec<AttentionVars>,
}

impl StudentArch {
    pub fn new(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let p = PREFIX.trim_end_matches('.');
        Ok(Self {
            stem: conv3(format!("{p}.stem"), 3, c),
            outer: (0..config.outer_blocks)
                .map(|k| OuterBlock::new(&format!("{p}.outer{k}"), &config))
                .collect(),
            fuse: (0..config.outer_blocks).map(|k| conv3(format!("{p}.fuse{k}"), c, c)).collect(),
            fuse_final: conv3(format!("{p}.fuse_final"), c, c),
            recon: conv3(format!("{p}.recon"), c, 3),
            adapters: (0..config.outer_blocks)
                .map(|k| conv1(format!("{ADAPTER_PREFIX}{k}"), c, config.teacher_tap_channels[config.teacher_level(k)]))
                .collect(),
            config,
        })
    }

    fn trunk_convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.stem];
        for o in &self.outer {
            for b in &o.inner {
                v.extend(b.convs());
            }
            v.push(&o.tail);
        }
        v.extend(&self.fuse);
        v.push(&self.fuse_final);
        v
    }

    /// Kaiming init everywhere except the reconstruction conv, which starts
    /// at zero so the whole network is the identity at step 0. Adapters draw
    /// from their own name-keyed streams, so adding them does not change the
    /// trunk's initial weights.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for conv in self.trunk_convs() {
            conv.init(&mut store, seed, Init::Kaiming);
        }
        self.recon.init(&mut store, seed, Init::Zeros);
        for a in &self.adapters {
            a.init(&mut store, seed, Init::Kaiming);
        }
        store
    }

    /// Trunk parameter count, adapters excluded.
    pub fn param_count(&self) -> usize {
        self.trunk_convs().iter().map(|c| c.param_count()).sum::<usize>() + self.recon.param_count()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.iter().map(Conv::param_count).sum()
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, with_taps: bool) -> Result<StudentOutput> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(hkd_tensor::TensorError::Dimension {
                op: "student_forward",
                detail: format!("channel axis must be 3, input shape {shape:?}"),
            }
            .into());
        }
        if shape[2] < MIN_SIZE || shape[3] < MIN_SIZE {
            return Err(CoreError::Domain(format!(
                "student input must be at least {MIN_SIZE}×{MIN_SIZE}, got {}×{}",
                shape[2], shape[3]
            )));
        }
        let mut attention = Vec::new();
        let mut features = Vec::with_capacity(self.outer.len());
        let mut h = self.stem.forward(g, x)?;
        for (block, fuse) in self.outer.iter().zip(&self.fuse) {
            let y = block.forward(g, h, &mut attention)?;
            features.push(y);
            let f = fuse.forward(g, y)?;
            h = g.tape.add(y, f)?;
        }
        let h = self.fuse_final.forward(g, h)?;
        let r = self.recon.forward(g, h)?;
        let out = g.tape.add(r, x)?;
        let taps = if with_taps {
            features
                .iter()
                .zip(&self.adapters)
                .map(|(f, a)| a.forward(g, *f))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(StudentOutput {
            out,
            features,
            taps,
            attention,
        })
    }
}

impl CostModel for StudentArch {
    /// Deployment cost: trunk only, adapters excluded.
    fn layer_ops(&self, input: [usize; 4]) -> Result<Vec<LayerOp>> {
        let [b, _, h, w] = input;
        let c = self.config.width;
        let hw = (h, w);
        let full = b * c * h * w;
        let ew = |name: String, elements: usize| LayerOp::Elementwise { name, elements };
        let mut ops = vec![self.stem.layer_op(b, hw)?.0];
        for (o, fuse) in self.outer.iter().zip(&self.fuse) {
            for blk in &o.inner {
                let n = &blk.conv1.name;
                ops.push(blk.conv1.layer_op(b, hw)?.0);
                ops.push(ew(format!("{n}.relu"), full));
                ops.push(blk.conv2.layer_op(b, hw)?.0);
                ops.push(ew(format!("{}.gap", blk.ca.fc1.name), full));
                ops.push(blk.ca.fc1.layer_op(b, (1, 1))?.0);
                ops.push(blk.ca.fc2.layer_op(b, (1, 1))?.0);
                ops.push(ew(format!("{}.scale", blk.ca.fc2.name), full));
                ops.push(blk.pa.fc1.layer_op(b, hw)?.0);
                ops.push(ew(format!("{}.relu", blk.pa.fc1.name), b * self.config.hidden() * h * w));
                ops.push(blk.pa.fc2.layer_op(b, hw)?.0);
                ops.push(ew(format!("{}.scale", blk.pa.fc2.name), full));
                ops.push(ew(format!("{n}.residual"), full));
            }
            ops.push(o.tail.layer_op(b, hw)?.0);
            ops.push(ew(format!("{}.residual", o.tail.name), full));
            ops.push(fuse.layer_op(b, hw)?.0);
            ops.push(ew(format!("{}.residual", fuse.name), full));
        }
        ops.push(self.fuse_final.layer_op(b, hw)?.0);
        ops.push(self.recon.layer_op(b, hw)?.0);
        ops.push(ew("student.global_residual".into(), b * 3 * h * w));
        Ok(ops)
    }
}

/// Student weights (trunk and adapters).
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    arch: StudentArch,
    params: ParamStore,
}

impl StudentNet {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        let arch = StudentArch::new(config)?;
        let params = arch.init(seed);
        Ok(Self { arch, params })
    }

    /// Wraps existing weights. Adapters may be absent (deployment
    /// checkpoints); anything present must match the architecture.
    pub fn from_params(config: StudentConfig, params: ParamStore) -> Result<Self> {
        let arch = StudentArch::new(config)?;
        let mut expected = arch.init(0);
        if params.count_prefix(ADAPTER_PREFIX) == 0 {
            expected = expected.filter_prefix(PREFIX);
        }
        crate::checkpoint::check_layout(&expected, &params)?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &StudentArch {
        &self.arch
    }

    pub fn config(&self) -> &StudentConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trunk parameters, adapters excluded.
    pub fn param_count(&self) -> usize {
        self.params.count_prefix(PREFIX)
    }

    pub fn adapter_param_count(&self) -> usize {
        self.params.count_prefix(ADAPTER_PREFIX)
    }

    /// Raw (unclamped) prediction for a batch, no gradients.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.params);
        let xv = g.input(x.clone());
        let out = self.arch.forward(&mut g, xv, false)?;
        Ok(g.tape.value(out.out).clone())
    }

    /// Dehazed image, clamped to `[0, 1]`.
    pub fn dehaze(&self, hazy: &ImageRGB) -> Result<ImageRGB> {
        ImageRGB::from_tensor(&self.infer(&hazy.to_tensor())?, 0)
    }
}

/// Dehazes one image and returns the adapter-projected taps.
pub fn student_forward(net: &StudentNet, hazy: &ImageRGB) -> Result<(ImageRGB, Vec<FeatureTap>)> {
    let mut g = Graph::frozen(net.params());
    let x = g.input(hazy.to_tensor());
    let out = net.arch().forward(&mut g, x, true)?;
    let taps = out
        .taps
        .iter()
        .enumerate()
        .map(|(level, v)| FeatureTap {
            source: TapSource::Student,
            level,
            tensor: g.tape.value(*v).clone(),
        })
        .collect();
    Ok((ImageRGB::from_tensor(g.tape.value(out.out), 0)?, taps))
}

/// Mean squared error over every element.
pub fn mse<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn student_loss(dehazed: &ImageRGB, clear: &ImageRGB) -> Result<f64> {
    dehazed.check_same_size(clear)?;
    let mut tape = Tape::<f64>::no_grad();
    let a = tape.constant(dehazed.to_tensor().cast());
    let b = tape.constant(clear.to_tensor().cast());
    let l = mse(&mut tape, a, b)?;
    Ok(tape.value(l).item()?)
}
