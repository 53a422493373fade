//! Toy classifiers, their training loop, checkpoints and the procedural dataset.

pub mod checkpoint;
pub mod cnn;
pub mod dataset;
pub mod hooks;
pub mod layers;
pub mod train;
pub mod vit;

pub use checkpoint::{load_checkpoint, quantize, read_checkpoint, save_checkpoint, write_checkpoint};
pub use cnn::{CnnArch, CnnParams};
pub use dataset::{Dataset, DatasetSpec};
pub use hooks::{FnHooks, GradientHooks, IdentityHooks, ModuleTag};
pub use layers::{cross_entropy, probabilities};
pub use train::{accuracy, mean_loss, train, TrainConfig, TrainReport};
pub use vit::{ForwardTrace, VitArch, VitParams};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Vit(VitArch),
    Cnn(CnnArch),
}

impl Arch {
    pub fn classes(&self) -> usize {
        match self {
            Arch::Vit(a) => a.classes,
            Arch::Cnn(a) => a.classes,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Arch::Vit(a) => a.input_shape(),
            Arch::Cnn(a) => a.input_shape(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Vit(a) => a.validate(),
            Arch::Cnn(a) => a.validate(),
        }
    }
}

/// Weights of either model family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Vit(VitParams),
    Cnn(CnnParams),
}

impl ModelParams {
    pub fn init(arch: Arch, rng: &mut Rng) -> Result<Self> {
        Ok(match arch {
            Arch::Vit(a) => ModelParams::Vit(VitParams::init(a, rng)?),
            Arch::Cnn(a) => ModelParams::Cnn(CnnParams::init(a, rng)?),
        })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        Ok(match arch {
            Arch::Vit(a) => ModelParams::Vit(VitParams::zeros(a)?),
            Arch::Cnn(a) => ModelParams::Cnn(CnnParams::zeros(a)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            ModelParams::Vit(p) => Arch::Vit(p.arch),
            ModelParams::Cnn(p) => Arch::Cnn(p.arch),
        }
    }

    pub fn as_vit(&self) -> Option<&VitParams> {
        match self {
            ModelParams::Vit(p) => Some(p),
            ModelParams::Cnn(_) => None,
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ModelParams::Vit(p) => p.logits(x),
            ModelParams::Cnn(p) => p.logits(x),
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }

    /// Cross-entropy loss and its plain gradient with respect to the input.
    pub fn input_gradient(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        match self {
            ModelParams::Vit(p) => {
                let tr = p.forward(x)?;
                let (loss, gl) = cross_entropy(&tr.logits, label);
                Ok((loss, p.backward(&tr, &gl, None, false)?.input))
            }
            ModelParams::Cnn(p) => {
                let tr = p.forward(x)?;
                let (loss, gl) = cross_entropy(&tr.logits, label);
                Ok((loss, p.backward(&tr, &gl, false)?.input))
            }
        }
    }

    /// Cross-entropy loss and parameter gradients for one sample.
    pub fn param_gradient(&self, x: &Tensor, label: usize) -> Result<(f64, ModelParams)> {
        match self {
            ModelParams::Vit(p) => {
                let tr = p.forward(x)?;
                let (loss, gl) = cross_entropy(&tr.logits, label);
                let g = p.backward(&tr, &gl, None, true)?;
                Ok((loss, ModelParams::Vit(g.params.expect("requested"))))
            }
            ModelParams::Cnn(p) => {
                let tr = p.forward(x)?;
                let (loss, gl) = cross_entropy(&tr.logits, label);
                let g = p.backward(&tr, &gl, true)?;
                Ok((loss, ModelParams::Cnn(g.params.expect("requested"))))
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            ModelParams::Vit(p) => p.tensors(),
            ModelParams::Cnn(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ModelParams::Vit(p) => p.tensors_mut(),
            ModelParams::Cnn(p) => p.tensors_mut(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}
