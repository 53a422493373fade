use crate::error::Result;
use crate::tensor::Tensor;

/// Which backward tap of a transformer block a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleTag {
    /// Post-softmax attention probabilities, `[heads, T, T]`.
    Attn,
    /// Concatenated QKV projection output, `[T, 3D]`.
    Qkv,
    /// MLP branch output, `[T, D]`.
    Mlp,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 3] = [ModuleTag::Attn, ModuleTag::Qkv, ModuleTag::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            ModuleTag::Attn => "attn",
            ModuleTag::Qkv => "qkv",
            ModuleTag::Mlp => "mlp",
        }
    }
}

/// Gradient transformation invoked by the ViT reverse pass.
///
/// `tokens` is the residual stream entering `block` (`[T, D]`). The returned
/// tensor must have the same shape as `grad`.
pub trait GradientHooks {
    fn transform(&mut self, block: usize, module: ModuleTag, tokens: &Tensor, grad: Tensor) -> Result<Tensor>;
}

/// Passes every gradient through untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHooks;

impl GradientHooks for IdentityHooks {
    fn transform(&mut self, _: usize, _: ModuleTag, _: &Tensor, grad: Tensor) -> Result<Tensor> {
        Ok(grad)
    }
}

/// Adapts a closure into [`GradientHooks`].
pub struct FnHooks<F>(pub F);

impl<F> FnHooks<F>
where
    F: FnMut(usize, ModuleTag, &Tensor, Tensor) -> Result<Tensor>,
{
    pub fn new(f: F) -> Self {
        FnHooks(f)
    }
}

impl<F> GradientHooks for FnHooks<F>
where
    F: FnMut(usize, ModuleTag, &Tensor, Tensor) -> Result<Tensor>,
{
    fn transform(&mut self, block: usize, module: ModuleTag, tokens: &Tensor, grad: Tensor) -> Result<Tensor> {
        (self.0)(block, module, tokens, grad)
    }
}
