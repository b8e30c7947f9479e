//! Multi-channel FSRCNN super-resolution teacher: one single-channel FSRCNN
//! branch per colour channel, outputs concatenated.

use hkd_tensor::{ConvSpec, Element, PadMode, Tape, Tensor, Var};

use crate::bench::CostModel;
use crate::error::{CoreError, Result};
use crate::image::ImageRGB;
use crate::nn::{Conv, Deconv, Graph, Init, LayerOp, PRelu, ParamStore, SeparableConv};

pub const PREFIX: &str = "teacher.";
const CHANNELS: usize = 3;
const DECONV_KERNEL: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Prelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FsrcnnBranchConfig {
    /// Feature-extraction width.
    pub d: usize,
    /// Shrunk width of the mapping stage.
    pub s: usize,
    /// Number of mapping layers.
    pub m: usize,
    pub scale: usize,
    pub use_dsc: bool,
    pub activation: Activation,
}

impl Default for FsrcnnBranchConfig {
    fn default() -> Self {
        Self {
            d: 56,
            s: 12,
            m: 4,
            scale: 2,
            use_dsc: false,
            activation: Activation::Prelu,
        }
    }
}

impl FsrcnnBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > self.s && self.s > 0) {
            return Err(CoreError::Config(format!("need d > s > 0, got d={} s={}", self.d, self.s)));
        }
        if self.m == 0 {
            return Err(CoreError::Config("need at least one mapping layer".into()));
        }
        if self.scale != 2 && self.scale != 4 {
            return Err(CoreError::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        // A depthwise-separable 3×3 on one channel stores as many weights as
        // the plain convolution, so the factorisation only pays from s = 2.
        if self.use_dsc && self.s < 2 {
            return Err(CoreError::Config("separable mapping needs s >= 2".into()));
        }
        Ok(())
    }

    /// Channel count of each tap level after concatenating the branches:
    /// level 0 is the mapping output, level 1 the expanding output.
    pub fn tap_channels(&self) -> [usize; 2] {
        [CHANNELS * self.s, CHANNELS * self.d]
    }

    pub fn with_dsc(mut self, use_dsc: bool) -> Self {
        self.use_dsc = use_dsc;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Mapping {
    Standard(Conv),
    Separable(SeparableConv),
}

#[derive(Clone, Debug, PartialEq)]
enum Act {
    Prelu(PRelu),
    Relu,
}

impl Act {
    fn new(kind: Activation, name: String, channels: usize) -> Self {
        match kind {
            Activation::Prelu => Act::Prelu(PRelu { name, channels }),
            Activation::Relu => Act::Relu,
        }
    }

    fn init(&self, store: &mut ParamStore) {
        if let Act::Prelu(p) = self {
            p.init(store);
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Act::Prelu(p) => p.forward(g, x),
            Act::Relu => Ok(g.tape.relu(x)),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Act::Prelu(p) => p.channels,
            Act::Relu => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Branch {
    feature: (Conv, Act),
    shrink: (Conv, Act),
    mapping: Vec<(Mapping, Act)>,
    expand: (Conv, Act),
    deconv: Deconv,
}

impl Branch {
    fn new(cfg: &FsrcnnBranchConfig, c: usize) -> Self {
        let p = format!("{PREFIX}branch{c}");
        let act = |stage: &str, ch: usize| Act::new(cfg.activation, format!("{p}.{stage}.act"), ch);
        let reflect = |spec: ConvSpec| spec.with_pad_mode(PadMode::Reflect);
        let mapping = (0..cfg.m)
            .map(|i| {
                let name = format!("{p}.map{i}");
                let spec = reflect(ConvSpec::new(cfg.s, cfg.s, 3));
                let conv = if cfg.use_dsc {
                    Mapping::Separable(SeparableConv::replacing(name, spec))
                } else {
                    Mapping::Standard(Conv::new(name, spec))
                };
                (conv, act(&format!("map{i}"), cfg.s))
            })
            .collect();
        let pad = DECONV_KERNEL / 2;
        Self {
            feature: (Conv::new(format!("{p}.feature"), reflect(ConvSpec::new(1, cfg.d, 5))), act("feature", cfg.d)),
            shrink: (Conv::new(format!("{p}.shrink"), ConvSpec::new(cfg.d, cfg.s, 1)), act("shrink", cfg.s)),
            mapping,
            expand: (Conv::new(format!("{p}.expand"), ConvSpec::new(cfg.s, cfg.d, 1)), act("expand", cfg.d)),
            // (H−1)·scale − 2·4 + 9 + (scale−1) = scale·H.
            deconv: Deconv {
                name: format!("{p}.deconv"),
                spec: ConvSpec::new(cfg.d, 1, DECONV_KERNEL)
                    .with_stride(cfg.scale)
                    .with_padding(pad)
                    .with_output_padding(cfg.scale - 1),
            },
        }
    }

    fn init(&self, store: &mut ParamStore, seed: u64) {
        for (conv, act) in [&self.feature, &self.shrink, &self.expand] {
            conv.init(store, seed, Init::Kaiming);
            act.init(store);
        }
        for (conv, act) in &self.mapping {
            match conv {
                Mapping::Standard(c) => c.init(store, seed, Init::Kaiming),
                Mapping::Separable(s) => s.init(store, seed),
            }
            act.init(store);
        }
        self.deconv.init(store, seed);
    }

    /// Returns `(mapping output, expanding output, reconstruction)`.
    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var, Var)> {
        let mut h = self.feature.0.forward(g, x)?;
        h = self.feature.1.forward(g, h)?;
        h = self.shrink.0.forward(g, h)?;
        h = self.shrink.1.forward(g, h)?;
        for (conv, act) in &self.mapping {
            h = match conv {
                Mapping::Standard(c) => c.forward(g, h)?,
                Mapping::Separable(s) => s.forward(g, h)?,
            };
            h = act.forward(g, h)?;
        }
        let mapped = h;
        h = self.expand.0.forward(g, h)?;
        let expanded = self.expand.1.forward(g, h)?;
        let out = self.deconv.forward(g, expanded)?;
        Ok((mapped, expanded, out))
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        for (conv, act) in [&self.feature, &self.shrink, &self.expand] {
            n += conv.param_count() + act.param_count();
        }
        for (conv, act) in &self.mapping {
            n += act.param_count()
                + match conv {
                    Mapping::Standard(c) => c.param_count(),
                    Mapping::Separable(s) => s.param_count(),
                };
        }
        n + self.deconv.param_count()
    }

    fn layer_ops(&self, batch: usize, hw: (usize, usize), ops: &mut Vec<LayerOp>) -> Result<(usize, usize)> {
        let mut hw = hw;
        let act_op = |name: &str, ch: usize, hw: (usize, usize)| LayerOp::Elementwise {
            name: name.to_string(),
            elements: batch * ch * hw.0 * hw.1,
        };
        for (conv, _) in [&self.feature, &self.shrink] {
            let (op, out) = conv.layer_op(batch, hw)?;
            ops.push(op);
            hw = out;
            ops.push(act_op(&format!("{}.act", conv.name), conv.spec.out_channels, hw));
        }
        for (conv, _) in &self.mapping {
            match conv {
                Mapping::Standard(c) => {
                    let (op, out) = c.layer_op(batch, hw)?;
                    ops.push(op);
                    hw = out;
                    ops.push(act_op(&format!("{}.act", c.name), c.spec.out_channels, hw));
                }
                Mapping::Separable(s) => {
                    let (sub, out) = s.layer_ops(batch, hw)?;
                    ops.extend(sub);
                    hw = out;
                    ops.push(act_op(&format!("{}.act", s.name), s.out_channels, hw));
                }
            }
        }
        let (op, out) = self.expand.0.layer_op(batch, hw)?;
        ops.push(op);
        ops.push(act_op(&format!("{}.act", self.expand.0.name), self.expand.0.spec.out_channels, out));
        let (op, out) = self.deconv.layer_op(batch, out)?;
        ops.push(op);
        Ok(out)
    }
}

/// Network structure without weights; forward works for any element type.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherArch {
    pub config: FsrcnnBranchConfig,
    branches: Vec<Branch>,
}

/// Symbolic outputs of one teacher forward pass.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    /// `B × 3 × scale·H × scale·W`.
    pub sr: Var,
    /// Branch-concatenated taps, one per level (see
    /// [`FsrcnnBranchConfig::tap_channels`]).
    pub taps: Vec<Var>,
    /// Per-branch `(mapping, expanding)` activations before concatenation.
    pub branch_taps: Vec<(Var, Var)>,
}

impl TeacherArch {
    pub fn new(config: FsrcnnBranchConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            branches: (0..CHANNELS).map(|c| Branch::new(&config, c)).collect(),
        })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for b in &self.branches {
            b.init(&mut store, seed);
        }
        store
    }

    /// Layer-by-layer parameter tally of the architecture.
    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Branch::param_count).sum()
    }

    /// `x` is `B × 3 × H × W`; each channel goes through its own branch.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<TeacherOutput> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != CHANNELS {
            return Err(hkd_tensor::TensorError::Dimension {
                op: "teacher_forward",
                detail: format!("channel axis must be 3, input shape {shape:?}"),
            }
            .into());
        }
        let mut branch_taps = Vec::with_capacity(CHANNELS);
        let mut outs = Vec::with_capacity(CHANNELS);
        for (c, branch) in self.branches.iter().enumerate() {
            let xc = g.tape.slice_channels(x, c, 1)?;
            let (mapped, expanded, out) = branch.forward(g, xc)?;
            branch_taps.push((mapped, expanded));
            outs.push(out);
        }
        let level0: Vec<Var> = branch_taps.iter().map(|t| t.0).collect();
        let level1: Vec<Var> = branch_taps.iter().map(|t| t.1).collect();
        let taps = vec![g.tape.concat_channels(&level0)?, g.tape.concat_channels(&level1)?];
        let sr = g.tape.concat_channels(&outs)?;
        Ok(TeacherOutput { sr, taps, branch_taps })
    }
}

impl CostModel for TeacherArch {
    fn layer_ops(&self, input: [usize; 4]) -> Result<Vec<LayerOp>> {
        let [b, _, h, w] = input;
        let mut ops = Vec::new();
        for branch in &self.branches {
            branch.layer_ops(b, (h, w), &mut ops)?;
        }
        Ok(ops)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapSource {
    Teacher,
    Student,
}

/// A named intermediate activation exchanged for distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub source: TapSource,
    pub level: usize,
    pub tensor: Tensor,
}

/// Teacher weights plus the frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNet {
    arch: TeacherArch,
    params: ParamStore,
    frozen: bool,
}

impl TeacherNet {
    pub fn new(config: FsrcnnBranchConfig, seed: u64) -> Result<Self> {
        let arch = TeacherArch::new(config)?;
        let params = arch.init(seed);
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    /// Wraps existing weights, checking every expected tensor is present
    /// with the right shape and nothing else is.
    pub fn from_params(config: FsrcnnBranchConfig, params: ParamStore) -> Result<Self> {
        let arch = TeacherArch::new(config)?;
        crate::checkpoint::check_layout(&arch.init(0), &params)?;
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &TeacherArch {
        &self.arch
    }

    pub fn config(&self) -> &FsrcnnBranchConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable weights; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(CoreError::Usage("teacher is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Forward on a graph built over this teacher's parameters. A frozen
    /// teacher refuses trainable graphs.
    pub fn forward_graph(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<TeacherOutput> {
        if self.frozen && g.is_trainable() {
            return Err(CoreError::Usage(
                "gradient requested through a frozen teacher".into(),
            ));
        }
        self.arch.forward(g, x)
    }

    /// No-grad evaluation of a `B × 3 × H × W` batch: `(sr, [tap0, tap1])`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::frozen(&self.params);
        let xv = g.input(x.clone());
        let out = self.arch.forward(&mut g, xv)?;
        let taps = out.taps.iter().map(|v| g.tape.value(*v).clone()).collect();
        Ok((g.tape.value(out.sr).clone(), taps))
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}

/// Super-resolves a clear low-resolution image and returns its taps.
pub fn teacher_forward(net: &TeacherNet, clear_lr: &ImageRGB) -> Result<(ImageRGB, Vec<FeatureTap>)> {
    let (sr, taps) = net.infer(&clear_lr.to_tensor())?;
    let taps = taps
        .into_iter()
        .enumerate()
        .map(|(level, tensor)| FeatureTap {
            source: TapSource::Teacher,
            level,
            tensor,
        })
        .collect();
    Ok((ImageRGB::from_tensor(&sr, 0)?, taps))
}

/// Channel-level squared error: `Σ_c mean_{b,i,j} (hr − sr)²`.
pub fn sr_loss<T: Element>(tape: &mut Tape<T>, sr: Var, hr: Var) -> Result<Var> {
    let channels = tape.shape(sr).get(1).copied().unwrap_or(1);
    let d = tape.sub(hr, sr)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    Ok(tape.mul_scalar(m, channels as f64))
}

pub fn teacher_loss(sr: &ImageRGB, hr: &ImageRGB) -> Result<f64> {
    sr.check_same_size(hr)?;
    let mut tape = Tape::<f64>::no_grad();
    let a = tape.constant(sr.to_tensor().cast());
    let b = tape.constant(hr.to_tensor().cast());
    let l = sr_loss(&mut tape, a, b)?;
    Ok(tape.value(l).item()?)
}

pub fn count_params(params: &ParamStore) -> usize {
    params.count()
}

/// Model-size reduction in percent: `(std − dsc) / std × 100`.
pub fn dsc_reduction(standard: usize, dsc: usize) -> f64 {
    if standard == 0 {
        return 0.0;
    }
    (standard as f64 - dsc as f64) / standard as f64 * 100.0
}
