use super::graph::{BatchStats, Graph, Var};
use super::params::{Init, ParamId, ParamKind, ParamStore};
use super::Tensor;
use crate::error::Result;

/// Momentum of the running-statistics update.
pub const NORM_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// How a forward pass treats parameters and normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Tracked parameters, batch statistics.
    Train,
    /// Untracked parameters, running statistics.
    Eval,
}

pub fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, mode: Mode) -> Var {
    let value = store.get(id).clone();
    match mode {
        Mode::Train => g.param(id, value),
        Mode::Eval => g.constant(value),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.add(
            wname.clone(),
            ParamKind::Weight,
            init.tensor(&[out_channels, in_channels, kernel, kernel], seed, &wname),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride, pad: kernel / 2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let w = bind(g, store, self.weight, mode);
        let b = self.bias.map(|b| bind(g, store, b, mode));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.bias.map_or(0, |_| self.out_channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, scale_init: Init) -> Result<Self> {
        let scale = store.add(format!("{name}.weight"), ParamKind::NormScale, scale_init.tensor(&[channels], 0, name))?;
        let shift = store.add(format!("{name}.bias"), ParamKind::NormShift, Tensor::zeros(&[channels]))?;
        let running_mean = store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[channels]))?;
        let running_var = store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full(&[channels], 1.0))?;
        Ok(Self { scale, shift, running_mean, running_var, channels, eps: NORM_EPS })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let gamma = bind(g, store, self.scale, mode);
        let beta = bind(g, store, self.shift, mode);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                g.record_batch_stats(BatchStats {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Folds recorded batch statistics into the running estimates.
pub fn apply_batch_stats(store: &mut ParamStore, stats: &[BatchStats]) {
    for s in stats {
        for (id, fresh) in [(s.running_mean, &s.mean), (s.running_var, &s.var)] {
            for (r, v) in store.get_mut(id).data_mut().iter_mut().zip(fresh) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, seed: u64) -> Result<Self> {
        let wname = format!("{name}.weight");
        let init = Init::Glorot { fan_in: in_features, fan_out: out_features };
        let weight = store.add(wname.clone(), ParamKind::Weight, init.tensor(&[out_features, in_features], seed, &wname))?;
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let w = bind(g, store, self.weight, mode);
        let b = bind(g, store, self.bias, mode);
        g.linear(x, w, b)
    }
}

/// conv → norm → optional ReLU, the building block of every backbone here.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub relu: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, false, init, seed)?;
        let norm = BatchNorm::new(store, &format!("{name}.norm"), out_channels, Init::Ones)?;
        Ok(Self { conv, norm, relu })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, mode, x)?;
        let y = self.norm.forward(g, store, mode, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }
}
