//! Classifier heads placed on top of a feature extractor.
//!
//! [`SpinalHead`] splits its `D` input features into two halves and feeds
//! them gradually: sub-layer 1 sees one half, every later sub-layer sees the
//! other half concatenated with the previous sub-layer's output, alternating.
//! All sub-layer outputs are concatenated into the final linear classifier.
//!
//! [`TraditionalHead`] is the usual `Linear → ReLU → Linear` baseline.

use crate::error::{dim_err, Error, Result};
use crate::layers::{seeded_rng, Linear, Parameterized};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Spinal width used with a VGG19_bn-sized backbone.
pub const SPINAL_WIDTH_VGG19_BN: usize = 1024;
/// Spinal width used with a WideResNet-101-sized backbone.
pub const SPINAL_WIDTH_WIDE_RESNET101: usize = 20;
pub const DEFAULT_SUBLAYERS: usize = 4;

/// Which half of the input the first sub-layer consumes; later sub-layers
/// alternate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HalfOrder {
    /// `x_a, x_b, x_a, x_b, …`
    #[default]
    FirstHalfFirst,
    /// `x_b, x_a, x_b, x_a, …`
    SecondHalfFirst,
}

impl HalfOrder {
    /// Index (0 = first half, 1 = second half) consumed by sub-layer `i` (0-based).
    pub fn half_for(self, i: usize) -> usize {
        match self {
            HalfOrder::FirstHalfFirst => i % 2,
            HalfOrder::SecondHalfFirst => (i + 1) % 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpinalHeadConfig {
    pub input_dim: usize,
    pub width: usize,
    pub sublayers: usize,
    pub classes: usize,
    pub half_order: HalfOrder,
}

impl SpinalHeadConfig {
    pub fn new(input_dim: usize, width: usize, sublayers: usize, classes: usize) -> Self {
        SpinalHeadConfig {
            input_dim,
            width,
            sublayers,
            classes,
            half_order: HalfOrder::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spinal head input dimension must be even and positive, got {}",
                self.input_dim
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("spinal head width must be at least 1".into()));
        }
        if self.sublayers < 2 {
            return Err(Error::Config(format!(
                "spinal head needs at least 2 sub-layers, got {}",
                self.sublayers
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.input_dim / 2
    }
}

/// Closed-form parameter count of a spinal head.
pub fn spinal_param_count(cfg: &SpinalHeadConfig) -> usize {
    let (h, w, l, c) = (cfg.half(), cfg.width, cfg.sublayers, cfg.classes);
    h * w + w + (l - 1) * ((h + w) * w + w) + l * w * c + c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraditionalHeadConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl TraditionalHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("traditional head dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

pub fn traditional_param_count(cfg: &TraditionalHeadConfig) -> usize {
    cfg.input_dim * cfg.hidden + cfg.hidden + cfg.hidden * cfg.classes + cfg.classes
}

fn check_width<T: Scalar>(tape: &Tape<T>, x: Var, expected: usize) -> Result<usize> {
    match tape.shape(x) {
        [n, d] if *d == expected => Ok(*n),
        other => Err(dim_err(format!("head expects N×{expected} features, got {other:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct SpinalHead<T: Scalar> {
    config: SpinalHeadConfig,
    layers: Vec<Linear<T>>,
    output: Linear<T>,
}

impl<T: Scalar> SpinalHead<T> {
    fn build(cfg: SpinalHeadConfig, mut make: impl FnMut(usize, usize) -> Linear<T>) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.sublayers)
            .map(|i| {
                let inputs = if i == 0 { cfg.half() } else { cfg.half() + cfg.width };
                make(inputs, cfg.width)
            })
            .collect();
        let output = make(cfg.sublayers * cfg.width, cfg.classes);
        Ok(SpinalHead {
            config: cfg,
            layers,
            output,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(cfg: SpinalHeadConfig) -> Result<Self> {
        Self::build(cfg, Linear::zeros)
    }

    /// Weights uniform in ±1/√fan_in, biases zero; deterministic per seed.
    pub fn init(cfg: SpinalHeadConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(&[seed, 0x5350_494e]);
        Self::build(cfg, |i, o| Linear::init(i, o, &mut rng))
    }

    pub fn config(&self) -> &SpinalHeadConfig {
        &self.config
    }

    pub fn sublayer(&self, i: usize) -> &Linear<T> {
        &self.layers[i]
    }

    pub fn sublayer_mut(&mut self, i: usize) -> &mut Linear<T> {
        &mut self.layers[i]
    }

    pub fn output(&self) -> &Linear<T> {
        &self.output
    }

    pub fn output_mut(&mut self) -> &mut Linear<T> {
        &mut self.output
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        check_width(tape, x, self.config.input_dim)?;
        let half = self.config.half();
        let halves = [tape.narrow(x, 1, 0, half)?, tape.narrow(x, 1, half, half)?];
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let part = halves[self.config.half_order.half_for(i)];
            let input = match outputs.last() {
                None => part,
                Some(&prev) => tape.concat(&[part, prev], 1)?,
            };
            let pre = layer.forward(tape, input)?;
            outputs.push(tape.relu(pre)?);
        }
        let joined = tape.concat(&outputs, 1)?;
        self.output.forward(tape, joined)
    }
}

impl<T: Scalar> Parameterized<T> for SpinalHead<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("head.spinal.{i}"), f);
        }
        self.output.visit("head.out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("head.spinal.{i}"), f);
        }
        self.output.visit_mut("head.out", f);
    }
}

#[derive(Clone, Debug)]
pub struct TraditionalHead<T: Scalar> {
    config: TraditionalHeadConfig,
    hidden: Linear<T>,
    output: Linear<T>,
}

impl<T: Scalar> TraditionalHead<T> {
    pub fn zeros(cfg: TraditionalHeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TraditionalHead {
            config: cfg,
            hidden: Linear::zeros(cfg.input_dim, cfg.hidden),
            output: Linear::zeros(cfg.hidden, cfg.classes),
        })
    }

    pub fn init(cfg: TraditionalHeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(&[seed, 0x5452_4144]);
        Ok(TraditionalHead {
            config: cfg,
            hidden: Linear::init(cfg.input_dim, cfg.hidden, &mut rng),
            output: Linear::init(cfg.hidden, cfg.classes, &mut rng),
        })
    }

    pub fn config(&self) -> &TraditionalHeadConfig {
        &self.config
    }

    pub fn hidden_mut(&mut self) -> &mut Linear<T> {
        &mut self.hidden
    }

    pub fn output_mut(&mut self) -> &mut Linear<T> {
        &mut self.output
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        check_width(tape, x, self.config.input_dim)?;
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, h)
    }
}

impl<T: Scalar> Parameterized<T> for TraditionalHead<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.hidden.visit("head.hidden", f);
        self.output.visit("head.out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.hidden.visit_mut("head.hidden", f);
        self.output.visit_mut("head.out", f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadConfig {
    Spinal(SpinalHeadConfig),
    Traditional(TraditionalHeadConfig),
}

impl HeadConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            HeadConfig::Spinal(c) => c.input_dim,
            HeadConfig::Traditional(c) => c.input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            HeadConfig::Spinal(c) => c.classes,
            HeadConfig::Traditional(c) => c.classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            HeadConfig::Spinal(c) => spinal_param_count(c),
            HeadConfig::Traditional(c) => traditional_param_count(c),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadConfig::Spinal(_) => "spinal",
            HeadConfig::Traditional(_) => "traditional",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head<T: Scalar> {
    Spinal(SpinalHead<T>),
    Traditional(TraditionalHead<T>),
}

/// Freshly initialized head for `cfg`.
pub fn head_init<T: Scalar>(cfg: &HeadConfig, seed: u64) -> Result<Head<T>> {
    Ok(match *cfg {
        HeadConfig::Spinal(c) => Head::Spinal(SpinalHead::init(c, seed)?),
        HeadConfig::Traditional(c) => Head::Traditional(TraditionalHead::init(c, seed)?),
    })
}

impl<T: Scalar> Head<T> {
    pub fn config(&self) -> HeadConfig {
        match self {
            Head::Spinal(h) => HeadConfig::Spinal(h.config),
            Head::Traditional(h) => HeadConfig::Traditional(h.config),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Head::Spinal(h) => h.forward(tape, x),
            Head::Traditional(h) => h.forward(tape, x),
        }
    }

    /// Rebuilds a head of configuration `cfg` from named tensors
    /// (as produced by [`Parameterized::named_params`]).
    pub fn from_named(cfg: &HeadConfig, lookup: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let mut head = match *cfg {
            HeadConfig::Spinal(c) => Head::Spinal(SpinalHead::zeros(c)?),
            HeadConfig::Traditional(c) => Head::Traditional(TraditionalHead::zeros(c)?),
        };
        let mut failure = None;
        head.visit_params_mut(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match lookup(name) {
                Some(t) if t.shape() == slot.shape() => {
                    *slot = t.with_requires_grad(true);
                }
                Some(t) => {
                    failure = Some(Error::Transfer(format!(
                        "{name}: expected shape {:?}, found {:?}",
                        slot.shape(),
                        t.shape()
                    )))
                }
                None => failure = Some(Error::Transfer(format!("missing tensor {name}"))),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(head),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Head<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Head::Spinal(h) => h.visit_params(f),
            Head::Traditional(h) => h.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Head::Spinal(h) => h.visit_params_mut(f),
            Head::Traditional(h) => h.visit_params_mut(f),
        }
    }
}
