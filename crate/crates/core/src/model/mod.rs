//! Super-resolution generators with an ODE core or an RRDB core.
//!
//! Both share the same head and tail:
//!
//! ```text
//! conv 3→F ─ core ─ [upsample ×2, conv, lrelu] × log2(scale) ─ conv, lrelu ─ conv F→3
//! ```

mod checkpoint;
mod ode;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use ode::OdeFunction;

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_lrelu, BoundConv, ConvParams, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::sensitivity::{self, BackwardOptions, GradientReport, Method};
use crate::solver::{integrate, integrate_with, SolveStats, SolverConfig, Taped, VectorField};
use crate::tensor::{Scalar, Shape, Tensor};

pub const KERNEL: usize = 3;
/// Scale applied to every dense-block and group residual branch.
pub const RESIDUAL_SCALE: f64 = 0.2;
const CONVS_PER_UNIT: usize = 5;
const UNITS_PER_GROUP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Ode,
    Rrdb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLoss {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub filters: usize,
    pub scale: usize,
    pub core: CoreKind,
    pub ode_layers: usize,
    pub time_dependent: bool,
    pub augment_channels: usize,
    pub t_final: f64,
    pub rrdb_blocks: usize,
    pub growth: usize,
    pub solver: SolverConfig,
    pub backend: Method,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            filters: 64,
            scale: 4,
            core: CoreKind::Ode,
            ode_layers: 2,
            time_dependent: true,
            augment_channels: 8,
            t_final: 1.0,
            rrdb_blocks: 1,
            growth: 32,
            solver: SolverConfig::default(),
            backend: Method::Discrete,
        }
    }
}

impl GeneratorConfig {
    pub fn ode(filters: usize, ode_layers: usize) -> Self {
        Self {
            filters,
            ode_layers,
            ..Self::default()
        }
    }

    pub fn rrdb(filters: usize, blocks: usize, growth: usize) -> Self {
        Self {
            filters,
            core: CoreKind::Rrdb,
            rrdb_blocks: blocks,
            growth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.filters == 0 {
            return fail("filters must be at least 1".into());
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return fail(format!("scale {} is not a power of two ≥ 2", self.scale));
        }
        match self.core {
            CoreKind::Ode => {
                if self.ode_layers == 0 {
                    return fail("ode_layers must be at least 1".into());
                }
                if !(self.t_final > 0.0) {
                    return fail(format!("t_final {} must be positive", self.t_final));
                }
                self.solver_config().validate()?;
            }
            CoreKind::Rrdb => {
                if self.rrdb_blocks == 0 || self.growth == 0 {
                    return fail("rrdb_blocks and growth must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    /// Solver settings with the integration bounds `[0, t_final]`.
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            t0: 0.0,
            t_final: self.t_final,
            ..self.solver.clone()
        }
    }

    /// Channels of the ODE state: features plus augmentation.
    pub fn state_channels(&self) -> usize {
        self.filters + self.augment_channels
    }

    pub fn upsample_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Kaiming(f64),
    Zero,
}

/// Name, shape and initializer of one convolution.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    init: Init,
}

impl ConvSpec {
    fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            init,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_channels * self.out_channels * KERNEL * KERNEL + self.out_channels
    }

    fn build<T: Scalar, R: RngCore + ?Sized>(&self, rng: Option<&mut R>) -> ConvParams<T> {
        match (self.init, rng) {
            (Init::Kaiming(gain), Some(rng)) => {
                ConvParams::kaiming(self.in_channels, self.out_channels, KERNEL, gain, rng)
            }
            _ => ConvParams::zeros(self.in_channels, self.out_channels, KERNEL, true),
        }
    }
}

/// Every convolution of the generator in parameter order.
pub fn conv_layout(config: &GeneratorConfig) -> Vec<ConvSpec> {
    let f = config.filters;
    let mut specs = vec![ConvSpec::new("head", 3, f, Init::Kaiming(1.0))];
    match config.core {
        CoreKind::Ode => {
            let state = config.state_channels();
            for i in 0..config.ode_layers {
                let input = if i == 0 {
                    state + usize::from(config.time_dependent)
                } else {
                    state
                };
                let init = if i + 1 == config.ode_layers {
                    Init::Zero
                } else {
                    Init::Kaiming(1.0)
                };
                specs.push(ConvSpec::new(format!("core.ode.{i}"), input, state, init));
            }
        }
        CoreKind::Rrdb => {
            let g = config.growth;
            for b in 0..config.rrdb_blocks {
                for u in 0..UNITS_PER_GROUP {
                    for i in 0..CONVS_PER_UNIT {
                        let out = if i + 1 == CONVS_PER_UNIT { f } else { g };
                        specs.push(ConvSpec::new(
                            format!("core.rrdb.{b}.{u}.{i}"),
                            f + i * g,
                            out,
                            Init::Kaiming(0.1),
                        ));
                    }
                }
            }
        }
    }
    for s in 0..config.upsample_stages() {
        specs.push(ConvSpec::new(format!("upsample.{s}"), f, f, Init::Kaiming(1.0)));
    }
    specs.push(ConvSpec::new("hr", f, f, Init::Kaiming(1.0)));
    specs.push(ConvSpec::new("tail", f, 3, Init::Kaiming(1.0)));
    specs
}

/// Exact number of scalar parameters of the generator described by `config`.
pub fn count_params(config: &GeneratorConfig) -> usize {
    conv_layout(config).iter().map(ConvSpec::num_params).sum()
}

/// `(name, shape)` of every parameter tensor, in parameter order.
pub fn param_layout(config: &GeneratorConfig) -> Vec<(String, Shape)> {
    conv_layout(config)
        .iter()
        .flat_map(|c| {
            [
                (
                    format!("{}.weight", c.name),
                    Shape::new(c.out_channels, c.in_channels, KERNEL, KERNEL),
                ),
                (format!("{}.bias", c.name), Shape::new(c.out_channels, 1, 1, 1)),
            ]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Core<T: Scalar> {
    Ode(OdeFunction<T>),
    /// Dense-block convolutions, `groups × 3 units × 5 convs` in order.
    Rrdb(Vec<ConvParams<T>>),
}

/// What the core did during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoreMeta {
    pub solve: Option<SolveStats>,
}

impl CoreMeta {
    pub fn nfe(&self) -> Option<usize> {
        self.solve.as_ref().map(|s| s.nfe)
    }
}

/// Loss value and gradients for one batch.
#[derive(Debug, Clone)]
pub struct TrainStep<T> {
    pub loss: f64,
    /// One tensor per parameter; `None` when the backward pass diverged.
    pub gradients: Option<Vec<Tensor<T>>>,
    /// Present for the ODE core.
    pub report: Option<GradientReport<T>>,
    pub meta: CoreMeta,
}

struct Bound {
    head: BoundConv,
    core: Vec<Var>,
    upsample: Vec<BoundConv>,
    hr: BoundConv,
    tail: BoundConv,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    config: GeneratorConfig,
    head: ConvParams<T>,
    core: Core<T>,
    upsample: Vec<ConvParams<T>>,
    hr: ConvParams<T>,
    tail: ConvParams<T>,
}

impl<T: Scalar> Generator<T> {
    /// Randomly initialized generator. The last ODE-function convolution
    /// starts at zero, so a fresh ODE core is the identity flow.
    pub fn new(config: GeneratorConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Generator with every parameter zero.
    pub fn zeroed(config: GeneratorConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: GeneratorConfig, mut rng: Option<&mut dyn RngCore>) -> Result<Self> {
        config.validate()?;
        let mut built: Vec<ConvParams<T>> = Vec::new();
        for spec in conv_layout(&config) {
            built.push(spec.build(rng.as_deref_mut()));
        }
        let mut convs = built.into_iter();
        let head = convs.next().expect("head");
        let core = match config.core {
            CoreKind::Ode => {
                let field = convs.by_ref().take(config.ode_layers).collect();
                Core::Ode(OdeFunction::new(field, config.time_dependent)?)
            }
            CoreKind::Rrdb => {
                let n = config.rrdb_blocks * UNITS_PER_GROUP * CONVS_PER_UNIT;
                Core::Rrdb(convs.by_ref().take(n).collect())
            }
        };
        let upsample = convs.by_ref().take(config.upsample_stages()).collect();
        let hr = convs.next().expect("hr");
        let tail = convs.next().expect("tail");
        Ok(Self {
            config,
            head,
            core,
            upsample,
            hr,
            tail,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn core(&self) -> &Core<T> {
        &self.core
    }

    pub fn ode_function(&self) -> Option<&OdeFunction<T>> {
        match &self.core {
            Core::Ode(f) => Some(f),
            Core::Rrdb(_) => None,
        }
    }

    pub fn ode_function_mut(&mut self) -> Option<&mut OdeFunction<T>> {
        match &mut self.core {
            Core::Ode(f) => Some(f),
            Core::Rrdb(_) => None,
        }
    }

    fn convs(&self) -> Vec<&ConvParams<T>> {
        let core: Vec<&ConvParams<T>> = match &self.core {
            Core::Ode(f) => f.convs().iter().collect(),
            Core::Rrdb(c) => c.iter().collect(),
        };
        std::iter::once(&self.head)
            .chain(core)
            .chain(&self.upsample)
            .chain([&self.hr, &self.tail])
            .collect()
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let core: Vec<&mut ConvParams<T>> = match &mut self.core {
            Core::Ode(f) => f.convs_mut().iter_mut().collect(),
            Core::Rrdb(c) => c.iter_mut().collect(),
        };
        std::iter::once(&mut self.head)
            .chain(core)
            .chain(&mut self.upsample)
            .chain([&mut self.hr, &mut self.tail])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.convs().into_iter().flat_map(|c| c.tensors()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs_mut().into_iter().flat_map(|c| c.tensors_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        param_layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.param_names().iter().position(|n| n == name)?;
        self.params_mut().into_iter().nth(i)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let core_len = match &self.core {
            Core::Ode(f) => f.params().len(),
            Core::Rrdb(c) => 2 * c.len(),
        };
        let mut it = vars.into_iter();
        let pad = KERNEL / 2;
        let head = BoundConv::take(&mut it, true, pad)?;
        let core = it.by_ref().take(core_len).collect();
        let upsample = (0..self.upsample.len())
            .map(|_| BoundConv::take(&mut it, true, pad))
            .collect::<Result<_>>()?;
        let hr = BoundConv::take(&mut it, true, pad)?;
        let tail = BoundConv::take(&mut it, true, pad)?;
        Ok(Bound {
            head,
            core,
            upsample,
            hr,
            tail,
        })
    }

    fn check_input(&self, lr: &Tensor<T>) -> Result<()> {
        if lr.shape().c() != 3 {
            return Err(Error::config(format!(
                "generator expects 3-channel input, got {}",
                lr.shape()
            )));
        }
        lr.check_finite("generator input")
    }

    fn decode_on(&self, tape: &mut Tape<T>, b: &Bound, feat: Var) -> Result<Var> {
        let mut x = feat;
        for conv in &b.upsample {
            x = tape.upsample_nearest(x, 2)?;
            x = conv_lrelu(tape, conv, x)?;
        }
        x = conv_lrelu(tape, &b.hr, x)?;
        b.tail.apply(tape, x)
    }

    fn rrdb_on(&self, tape: &mut Tape<T>, core: &[Var], x: Var) -> Result<Var> {
        let f = self.config.filters;
        let beta = T::from_f64(RESIDUAL_SCALE);
        let mut vars = core.iter().copied();
        let mut out = x;
        for _ in 0..self.config.rrdb_blocks {
            let group_in = out;
            let mut h = group_in;
            for _ in 0..UNITS_PER_GROUP {
                let unit_in = h;
                let mut dense = unit_in;
                let mut last = unit_in;
                for i in 0..CONVS_PER_UNIT {
                    let conv = BoundConv::take(&mut vars, true, KERNEL / 2)?;
                    if i + 1 < CONVS_PER_UNIT {
                        let y = conv_lrelu(tape, &conv, dense)?;
                        dense = tape.concat_channels(dense, y)?;
                    } else {
                        last = conv.apply(tape, dense)?;
                    }
                }
                debug_assert_eq!(tape.shape(last)?.c(), f);
                h = tape.lin_comb(&[(T::ONE, unit_in), (beta, last)])?;
            }
            // the group branch is the chain's change to its input, so an
            // all-zero group is exactly the identity
            let branch = tape.lin_comb(&[(T::ONE, h), (-T::ONE, group_in)])?;
            out = tape.lin_comb(&[(T::ONE, group_in), (beta, branch)])?;
        }
        Ok(out)
    }

    /// Head convolution only: the F-channel features fed to the core.
    pub fn features(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(lr)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let x = tape.constant(lr.clone());
        let feat = b.head.apply(&mut tape, x)?;
        Ok(tape.value(feat)?.clone())
    }

    /// Upsampling and tail applied to core output features.
    pub fn decode(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let x = tape.constant(features.clone());
        let y = self.decode_on(&mut tape, &b, x)?;
        Ok(tape.value(y)?.clone())
    }

    /// Core applied to head features, without recording gradients.
    pub fn core_forward(&self, features: &Tensor<T>) -> Result<(Tensor<T>, CoreMeta)> {
        let f = self.config.filters;
        if features.shape().c() != f {
            return Err(Error::config(format!(
                "core expects {f} feature channels, got {}",
                features.shape()
            )));
        }
        match &self.core {
            Core::Ode(field) => {
                let u0 = features.pad_channels(self.config.augment_channels);
                let solve = integrate(field, &u0, &self.config.solver_config(), false)?;
                if solve.budget_exhausted {
                    return Err(forward_budget_error(&self.config.solver_config(), solve.t_reached));
                }
                let out = solve.final_state.narrow_channels(0, f)?;
                Ok((
                    out,
                    CoreMeta {
                        solve: Some(solve.stats()),
                    },
                ))
            }
            Core::Rrdb(_) => {
                let mut tape = Tape::new();
                let b = self.bind(&mut tape, false)?;
                let x = tape.constant(features.clone());
                let y = self.rrdb_on(&mut tape, &b.core, x)?;
                Ok((tape.value(y)?.clone(), CoreMeta::default()))
            }
        }
    }

    /// Super-resolve `lr` (N×3×H×W) to N×3×(scale·H)×(scale·W).
    pub fn forward(&self, lr: &Tensor<T>) -> Result<(Tensor<T>, CoreMeta)> {
        let feat = self.features(lr)?;
        let (core, meta) = self.core_forward(&feat)?;
        Ok((self.decode(&core)?, meta))
    }

    /// Pixel loss against `hr` and its gradient for every parameter.
    ///
    /// The RRDB core and the discrete backend differentiate one tape spanning
    /// the whole generator. The adjoint and checkpointed backends split it
    /// into head, core and tail, and join the pieces through the core's
    /// input and output co-states.
    pub fn loss_and_grad(
        &self,
        lr: &Tensor<T>,
        hr: &Tensor<T>,
        loss: PixelLoss,
        method: Method,
        opts: &BackwardOptions,
    ) -> Result<TrainStep<T>> {
        self.check_input(lr)?;
        match (&self.core, method) {
            (Core::Rrdb(_), _) | (Core::Ode(_), Method::Discrete) => self.single_tape_step(lr, hr, loss, opts),
            (Core::Ode(field), _) => self.split_step(field, lr, hr, loss, method, opts),
        }
    }

    fn single_tape_step(
        &self,
        lr: &Tensor<T>,
        hr: &Tensor<T>,
        loss: PixelLoss,
        opts: &BackwardOptions,
    ) -> Result<TrainStep<T>> {
        let started = Instant::now();
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, true)?;
        let x = tape.constant(lr.clone());
        let feat = b.head.apply(&mut tape, x)?;
        let mut solve = None;
        let core_out = match &self.core {
            Core::Rrdb(_) => self.rrdb_on(&mut tape, &b.core, feat)?,
            Core::Ode(field) => {
                let u0 = self.pad_on(&mut tape, feat)?;
                let cfg = self.config.solver_config();
                let mut arith = Taped::new(&mut tape, field, b.core.clone()).with_value_limit(opts.tape_value_limit);
                let result = integrate_with(&mut arith, u0, &cfg, false)?;
                if result.budget_exhausted {
                    return Err(forward_budget_error(&cfg, result.t_reached));
                }
                solve = Some(result.stats());
                tape.narrow_channels(result.final_state, 0, self.config.filters)?
            }
        };
        let sr = self.decode_on(&mut tape, &b, core_out)?;
        let target = tape.constant(hr.clone());
        let l = pixel_loss(&mut tape, loss, sr, target)?;
        let value = tape.value(l)?.item().to_f64();
        let grads = tape.backward(l)?;
        let gradients = self.collect(&tape, &grads, &b)?;
        let report = solve.as_ref().map(|s| GradientReport {
            method: Method::Discrete,
            gradients: None,
            input_gradient: None,
            forward_nfe: s.nfe,
            backward_nfe: 0,
            accepted_steps: s.accepted(),
            diverged: false,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            peak_saved_values: tape.peak_saved_values(),
        });
        Ok(TrainStep {
            loss: value,
            gradients: Some(gradients),
            report,
            meta: CoreMeta { solve },
        })
    }

    fn split_step(
        &self,
        field: &OdeFunction<T>,
        lr: &Tensor<T>,
        hr: &Tensor<T>,
        loss: PixelLoss,
        method: Method,
        opts: &BackwardOptions,
    ) -> Result<TrainStep<T>> {
        let f = self.config.filters;
        let p = self.config.augment_channels;
        let mut head_tape = Tape::new();
        let hb = self.bind(&mut head_tape, true)?;
        let x = head_tape.constant(lr.clone());
        let feat = hb.head.apply(&mut head_tape, x)?;
        let u0 = head_tape.value(feat)?.pad_channels(p);

        let pass = sensitivity::forward(method, field, &u0, &self.config.solver_config(), opts)?;
        let meta = CoreMeta {
            solve: Some(pass.solve().stats()),
        };

        let mut tail_tape = Tape::new();
        let tb = self.bind(&mut tail_tape, true)?;
        let z = tail_tape.param(pass.output().narrow_channels(0, f)?);
        let sr = self.decode_on(&mut tail_tape, &tb, z)?;
        let target = tail_tape.constant(hr.clone());
        let l = pixel_loss(&mut tail_tape, loss, sr, target)?;
        let value = tail_tape.value(l)?.item().to_f64();
        let tail_grads = tail_tape.backward(l)?;
        let dz = tail_grads.wrt(&tail_tape, z)?.pad_channels(p);

        let mut report = pass.backward(field, &dz, opts)?;
        let (Some(core_grads), Some(du0)) = (report.gradients.take(), report.input_gradient.take()) else {
            return Ok(TrainStep {
                loss: value,
                gradients: None,
                report: Some(report),
                meta,
            });
        };
        let head_grads = head_tape.backward_from(feat, du0.narrow_channels(0, f)?)?;

        let mut out = Vec::with_capacity(self.params().len());
        for v in conv_vars(&hb.head) {
            out.push(head_grads.wrt(&head_tape, v)?);
        }
        out.extend(core_grads);
        for c in tb.upsample.iter().chain([&tb.hr, &tb.tail]) {
            for v in conv_vars(c) {
                out.push(tail_grads.wrt(&tail_tape, v)?);
            }
        }
        Ok(TrainStep {
            loss: value,
            gradients: Some(out),
            report: Some(report),
            meta,
        })
    }

    fn pad_on(&self, tape: &mut Tape<T>, feat: Var) -> Result<Var> {
        let p = self.config.augment_channels;
        if p == 0 {
            return Ok(feat);
        }
        let s = tape.shape(feat)?;
        let zeros = tape.constant(Tensor::zeros(s.with_channels(p)));
        tape.concat_channels(feat, zeros)
    }

    fn collect(&self, tape: &Tape<T>, grads: &Gradients<T>, b: &Bound) -> Result<Vec<Tensor<T>>> {
        let mut vars = conv_vars(&b.head);
        vars.extend(&b.core);
        for c in b.upsample.iter().chain([&b.hr, &b.tail]) {
            vars.extend(conv_vars(c));
        }
        vars.iter().map(|&v| grads.wrt(tape, v)).collect()
    }
}

fn conv_vars(c: &BoundConv) -> Vec<Var> {
    std::iter::once(c.weight).chain(c.bias).collect()
}

fn pixel_loss<T: Scalar>(tape: &mut Tape<T>, loss: PixelLoss, pred: Var, target: Var) -> Result<Var> {
    match loss {
        PixelLoss::L1 => tape.l1_loss(pred, target),
        PixelLoss::L2 => tape.mse_loss(pred, target),
    }
}

fn forward_budget_error(cfg: &SolverConfig, t: f64) -> Error {
    Error::numeric(format!(
        "forward solve exhausted its budget of {} evaluations at t = {t}",
        cfg.max_nfe
    ))
}
