//! Bottleneck adapters: down-project, GELU, up-project.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{DpatError, Result};
use crate::model::params::{AdapterPart, ParamGroup, ParamKey, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `(D, d)`.
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    /// `(d, D)`.
    pub up_weight: Tensor,
    pub up_bias: Tensor,
    pub activation: Activation,
}

impl AdapterParams {
    /// Down-projection drawn with std `1/√D`; up-projection with
    /// `up_std` (zero by default so a fresh adapter outputs exactly zero).
    pub fn init<R: Rng + ?Sized>(dim: usize, bottleneck: usize, up_std: f64, rng: &mut R) -> Result<Self> {
        if bottleneck == 0 {
            return Err(DpatError::Config("adapter bottleneck width must be at least 1".into()));
        }
        let down_weight = Tensor::randn(&[dim, bottleneck], 1.0 / (dim as f64).sqrt(), rng);
        let up_weight = if up_std > 0.0 {
            Tensor::randn(&[bottleneck, dim], up_std, rng)
        } else {
            Tensor::zeros(&[bottleneck, dim])
        };
        Ok(Self {
            down_weight,
            down_bias: Tensor::zeros(&[bottleneck]),
            up_weight,
            up_bias: Tensor::zeros(&[dim]),
            activation: Activation::Gelu,
        })
    }

    pub fn dim(&self) -> usize {
        self.down_weight.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.down_weight.cols()
    }

    /// `d / D`.
    pub fn ratio(&self) -> f64 {
        self.bottleneck() as f64 / self.dim() as f64
    }

    pub fn part(&self, part: AdapterPart) -> &Tensor {
        match part {
            AdapterPart::DownWeight => &self.down_weight,
            AdapterPart::DownBias => &self.down_bias,
            AdapterPart::UpWeight => &self.up_weight,
            AdapterPart::UpBias => &self.up_bias,
        }
    }

    pub fn part_mut(&mut self, part: AdapterPart) -> &mut Tensor {
        match part {
            AdapterPart::DownWeight => &mut self.down_weight,
            AdapterPart::DownBias => &mut self.down_bias,
            AdapterPart::UpWeight => &mut self.up_weight,
            AdapterPart::UpBias => &mut self.up_bias,
        }
    }
}

/// Adapter-T and Adapter-S of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapters {
    pub temporal: AdapterParams,
    pub spatial: AdapterParams,
}

impl BlockAdapters {
    pub fn get(&self, role: Role) -> &AdapterParams {
        match role {
            Role::Temporal => &self.temporal,
            Role::Spatial => &self.spatial,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut AdapterParams {
        match role {
            Role::Temporal => &mut self.temporal,
            Role::Spatial => &mut self.spatial,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AdapterVars {
    dw: Var,
    db: Var,
    uw: Var,
    ub: Var,
}

impl AdapterVars {
    pub(crate) fn register(
        tape: &mut Tape,
        a: &AdapterParams,
        layer: usize,
        role: Role,
        trainable: &dyn Fn(ParamGroup) -> bool,
    ) -> Self {
        let train = trainable(ParamGroup::Adapter(role));
        let mut reg = |part| {
            tape.param(
                ParamKey::Adapter { layer, role, part },
                a.part(part),
                train,
            )
        };
        Self {
            dw: reg(AdapterPart::DownWeight),
            db: reg(AdapterPart::DownBias),
            uw: reg(AdapterPart::UpWeight),
            ub: reg(AdapterPart::UpBias),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.dw);
        let h = tape.add_bias(h, self.db);
        let h = tape.gelu(h);
        let o = tape.matmul(h, self.uw);
        tape.add_bias(o, self.ub)
    }
}

/// `up(act(down(x)))` applied to every row of `x`; no internal residual.
pub fn adapter_forward(x: &Tensor, a: &AdapterParams) -> Result<Tensor> {
    if x.cols() != a.dim() {
        return Err(DpatError::DimensionMismatch(format!(
            "adapter expects width {}, input has {}",
            a.dim(),
            x.cols()
        )));
    }
    let shape = x.shape().to_vec();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[x.rows(), x.cols()])?);
    let vars = AdapterVars::register(&mut tape, a, 1, Role::Temporal, &|_| false);
    let out = vars.apply(&mut tape, xv);
    tape.value(out).clone().reshape(&shape)
}
