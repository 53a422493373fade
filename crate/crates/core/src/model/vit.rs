//! Pre-LN Vision Transformer with a hookable reverse pass.
//!
//! Block `l` computes
//!
//! ```text
//! qkv  = LN1(z_l) · W_qkv + b_qkv
//! A_h  = softmax(q_h k_hᵀ / √d_h)
//! z'   = z_l + concat_h(A_h v_h) · W_o + b_o
//! z_l+1 = z' + W_2 · GELU(W_1 · LN2(z') + b_1) + b_2
//! ```
//!
//! and the classifier reads the CLS row of `LN_f(z_L)`. During the reverse
//! pass the gradient with respect to the MLP output, the attention
//! probabilities and the QKV output of every block is routed through a
//! [`GradientHooks`] implementation before propagation continues.

use crate::error::{Error, Result};
use crate::kernels::dense::{gelu_grad_scalar, gelu_scalar, gemm, softmax_rows, softmax_rows_backward, LayerNormCache};
use crate::model::hooks::{GradientHooks, ModuleTag};
use crate::model::layers::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Shape hyperparameters of a toy ViT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VitArch {
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
}

impl Default for VitArch {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            depth: 6,
            mlp_ratio: 4,
            classes: 10,
        }
    }
}

impl VitArch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_side,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.heads,
            self.depth,
            self.mlp_ratio,
            self.classes,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("ViT dimensions must be positive: {self:?}")));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::invalid("image side not divisible by patch size"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid("embed dim not divisible by head count"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Patch-token count `N`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length `T = N + 1`, CLS first.
    pub fn seq_len(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.image_side, self.image_side]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Learned weights of a ViT. Also used as the container for parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    pub arch: VitArch,
    pub patch_embed: Linear,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<VitBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl VitParams {
    /// All-zero weights (layer-norm gains included); the gradient accumulator shape.
    pub fn zeros(arch: VitArch) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        let blocks = (0..arch.depth)
            .map(|_| VitBlock {
                ln1: LayerNorm::zeros(d),
                qkv: Linear::zeros(d, 3 * d),
                proj: Linear::zeros(d, d),
                ln2: LayerNorm::zeros(d),
                fc1: Linear::zeros(d, arch.hidden_dim()),
                fc2: Linear::zeros(arch.hidden_dim(), d),
            })
            .collect();
        Ok(Self {
            arch,
            patch_embed: Linear::zeros(arch.patch_dim(), d),
            cls: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[arch.seq_len(), d]),
            blocks,
            ln_f: LayerNorm::zeros(d),
            head: Linear::zeros(d, arch.classes),
        })
    }

    /// Random initialization: fan-in scaled normals, residual branch
    /// outputs shrunk by `1/√(2·depth)`, unit layer-norm gains.
    pub fn init(arch: VitArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        let h = arch.hidden_dim();
        let resid = 1.0 / (2.0 * arch.depth as f64).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_embed = Linear::random(arch.patch_dim(), d, fan(arch.patch_dim()), rng);
        let cls = Tensor::from_fn(&[d], |_| 0.02 * rng.normal());
        let pos = Tensor::from_fn(&[arch.seq_len(), d], |_| 0.1 * rng.normal());
        let blocks = (0..arch.depth)
            .map(|_| VitBlock {
                ln1: LayerNorm::new(d),
                qkv: Linear::random(d, 3 * d, fan(d), rng),
                proj: Linear::random(d, d, fan(d) * resid, rng),
                ln2: LayerNorm::new(d),
                fc1: Linear::random(d, h, fan(d), rng),
                fc2: Linear::random(h, d, fan(h) * resid, rng),
            })
            .collect();
        let head = Linear::random(d, arch.classes, 0.01, rng);
        Ok(Self {
            arch,
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
        })
    }

    /// Every weight tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_embed.weight, &self.patch_embed.bias, &self.cls, &self.pos];
        for b in &self.blocks {
            v.extend([
                &b.ln1.gain, &b.ln1.bias, &b.qkv.weight, &b.qkv.bias, &b.proj.weight, &b.proj.bias,
                &b.ln2.gain, &b.ln2.bias, &b.fc1.weight, &b.fc1.bias, &b.fc2.weight, &b.fc2.bias,
            ]);
        }
        v.extend([&self.ln_f.gain, &self.ln_f.bias, &self.head.weight, &self.head.bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.cls,
            &mut self.pos,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1.gain, &mut b.ln1.bias, &mut b.qkv.weight, &mut b.qkv.bias,
                &mut b.proj.weight, &mut b.proj.bias, &mut b.ln2.gain, &mut b.ln2.bias,
                &mut b.fc1.weight, &mut b.fc1.bias, &mut b.fc2.weight, &mut b.fc2.bias,
            ]);
        }
        v.extend([
            &mut self.ln_f.gain,
            &mut self.ln_f.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        v
    }
}

/// Cached activations of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Residual stream entering the block, `[T, D]`.
    pub tokens: Tensor,
    /// Attention probabilities, `[heads, T, T]`.
    pub attn: Tensor,
    /// QKV projection output, `[T, 3D]`.
    pub qkv: Tensor,
    /// MLP pre-activation, `[T, hidden]`.
    pub mlp_hidden: Tensor,
    /// MLP branch output, `[T, D]`.
    pub mlp_out: Tensor,
    ln1: LayerNormCache,
    h1: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    act: Vec<f64>,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub logits: Tensor,
    patches: Vec<f64>,
    final_tokens: Vec<f64>,
    ln_f: LayerNormCache,
    cls_norm: Vec<f64>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Output of the reverse pass.
#[derive(Debug, Clone)]
pub struct VitGradients {
    pub input: Tensor,
    pub params: Option<VitParams>,
}

fn patchify(arch: &VitArch, x: &Tensor) -> Vec<f64> {
    let (p, g, side) = (arch.patch_size, arch.grid(), arch.image_side);
    let pd = arch.patch_dim();
    let mut out = vec![0.0; arch.patches() * pd];
    let src = x.as_slice();
    for py in 0..g {
        for px in 0..g {
            let n = py * g + px;
            for c in 0..arch.channels {
                for iy in 0..p {
                    let row = c * side * side + (py * p + iy) * side + px * p;
                    let dst = n * pd + c * p * p + iy * p;
                    out[dst..dst + p].copy_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    out
}

fn unpatchify(arch: &VitArch, patches: &[f64]) -> Tensor {
    let (p, g, side) = (arch.patch_size, arch.grid(), arch.image_side);
    let pd = arch.patch_dim();
    let mut img = Tensor::zeros(&arch.input_shape());
    let dst = img.as_mut_slice();
    for py in 0..g {
        for px in 0..g {
            let n = py * g + px;
            for c in 0..arch.channels {
                for iy in 0..p {
                    let row = c * side * side + (py * p + iy) * side + px * p;
                    let src = n * pd + c * p * p + iy * p;
                    dst[row..row + p].copy_from_slice(&patches[src..src + p]);
                }
            }
        }
    }
    img
}

/// Copies columns `[off, off+width)` of a row-major `rows × stride` buffer.
fn take_cols(src: &[f64], rows: usize, stride: usize, off: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&src[r * stride + off..r * stride + off + width]);
    }
    out
}

fn put_cols(dst: &mut [f64], src: &[f64], rows: usize, stride: usize, off: usize, width: usize) {
    for r in 0..rows {
        dst[r * stride + off..r * stride + off + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn hooked(
    hooks: &mut Option<&mut dyn GradientHooks>,
    block: usize,
    module: ModuleTag,
    tokens: &Tensor,
    shape: &[usize],
    grad: Vec<f64>,
) -> Result<Vec<f64>> {
    let Some(h) = hooks.as_deref_mut() else {
        return Ok(grad);
    };
    let out = h.transform(block, module, tokens, Tensor::new(shape, grad)?)?;
    if out.shape() != shape {
        return Err(Error::ContractViolation(format!(
            "{module:?} hook at block {block} returned shape {:?}, expected {shape:?}",
            out.shape()
        )));
    }
    Ok(out.into_vec())
}

impl VitParams {
    /// Forward pass recording every activation needed by [`VitParams::backward`].
    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        let a = &self.arch;
        x.expect_shape(&a.input_shape())?;
        let (t, d, nh, dh) = (a.seq_len(), a.embed_dim, a.heads, a.head_dim());
        let hid = a.hidden_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let patches = patchify(a, x);
        let emb = self.patch_embed.forward(&patches, a.patches());
        let mut z = Vec::with_capacity(t * d);
        z.extend_from_slice(self.cls.as_slice());
        z.extend_from_slice(&emb);
        add_into(&mut z, self.pos.as_slice());

        let mut blocks = Vec::with_capacity(a.depth);
        for blk in &self.blocks {
            let tokens = Tensor::new(&[t, d], z.clone())?;
            let (h1, ln1) = blk.ln1.forward(&z);
            let qkv = blk.qkv.forward(&h1, t);
            let mut attn = vec![0.0; nh * t * t];
            let mut ctx = vec![0.0; t * d];
            for h in 0..nh {
                let q = take_cols(&qkv, t, 3 * d, h * dh, dh);
                let k = take_cols(&qkv, t, 3 * d, d + h * dh, dh);
                let v = take_cols(&qkv, t, 3 * d, 2 * d + h * dh, dh);
                let s = &mut attn[h * t * t..(h + 1) * t * t];
                gemm(t, dh, t, &q, false, &k, true, 0.0, s);
                s.iter_mut().for_each(|e| *e *= scale);
                softmax_rows(s, t);
                let mut o = vec![0.0; t * dh];
                gemm(t, t, dh, s, false, &v, false, 0.0, &mut o);
                put_cols(&mut ctx, &o, t, d, h * dh, dh);
            }
            let attn_out = blk.proj.forward(&ctx, t);
            add_into(&mut z, &attn_out);
            let (h2, ln2) = blk.ln2.forward(&z);
            let u = blk.fc1.forward(&h2, t);
            let act: Vec<f64> = u.iter().map(|&v| gelu_scalar(v)).collect();
            let mlp_out = blk.fc2.forward(&act, t);
            add_into(&mut z, &mlp_out);
            blocks.push(BlockTrace {
                tokens,
                attn: Tensor::new(&[nh, t, t], attn)?,
                qkv: Tensor::new(&[t, 3 * d], qkv)?,
                mlp_hidden: Tensor::new(&[t, hid], u)?,
                mlp_out: Tensor::new(&[t, d], mlp_out)?,
                ln1,
                h1,
                ctx,
                ln2,
                h2,
                act,
            });
        }
        let (cls_norm, ln_f) = self.ln_f.forward(&z[..d]);
        let logits = Tensor::new(&[a.classes], self.head.forward(&cls_norm, 1))?;
        Ok(ForwardTrace {
            blocks,
            logits,
            patches,
            final_tokens: z,
            ln_f,
            cls_norm,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }

    /// Reverse pass from `grad_logits` to the input image.
    ///
    /// `hooks` sees, in order within each block (deepest block first), the
    /// gradient with respect to the MLP output, the attention probabilities
    /// and the QKV output. Parameter gradients are produced only when
    /// `with_params` is set.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Tensor,
        mut hooks: Option<&mut dyn GradientHooks>,
        with_params: bool,
    ) -> Result<VitGradients> {
        let a = &self.arch;
        grad_logits.expect_shape(&[a.classes])?;
        if trace.blocks.len() != a.depth || trace.final_tokens.len() != a.seq_len() * a.embed_dim {
            return Err(Error::ContractViolation("forward trace does not match architecture".into()));
        }
        let (t, d, nh, dh) = (a.seq_len(), a.embed_dim, a.heads, a.head_dim());
        let hid = a.hidden_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = if with_params { Some(VitParams::zeros(*a)?) } else { None };

        let d_cls_norm = self.head.backward(
            &trace.cls_norm,
            grad_logits.as_slice(),
            1,
            grads.as_mut().map(|g| &mut g.head),
        );
        let d_cls = self.ln_f.backward(&trace.ln_f, &d_cls_norm, grads.as_mut().map(|g| &mut g.ln_f));
        let mut dz = vec![0.0; t * d];
        dz[..d].copy_from_slice(&d_cls);

        for (l, (blk, tr)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let mut bg = grads.as_mut().map(|g| &mut g.blocks[l]);

            // MLP branch.
            let d_mlp = hooked(&mut hooks, l, ModuleTag::Mlp, &tr.tokens, &[t, d], dz.clone())?;
            let d_act = blk.fc2.backward(&tr.act, &d_mlp, t, bg.as_deref_mut().map(|g| &mut g.fc2));
            let d_u: Vec<f64> = d_act
                .iter()
                .zip(tr.mlp_hidden.as_slice())
                .map(|(&g, &u)| g * gelu_grad_scalar(u))
                .collect();
            let d_h2 = blk.fc1.backward(&tr.h2, &d_u, t, bg.as_deref_mut().map(|g| &mut g.fc1));
            let d_mid = blk.ln2.backward(&tr.ln2, &d_h2, bg.as_deref_mut().map(|g| &mut g.ln2));
            add_into(&mut dz, &d_mid);

            // Attention branch.
            let d_ctx = blk.proj.backward(&tr.ctx, &dz, t, bg.as_deref_mut().map(|g| &mut g.proj));
            let qkv = tr.qkv.as_slice();
            let mut d_attn = vec![0.0; nh * t * t];
            let mut d_qkv = vec![0.0; t * 3 * d];
            for h in 0..nh {
                let v = take_cols(qkv, t, 3 * d, 2 * d + h * dh, dh);
                let d_o = take_cols(&d_ctx, t, d, h * dh, dh);
                let probs = &tr.attn.as_slice()[h * t * t..(h + 1) * t * t];
                gemm(t, dh, t, &d_o, false, &v, true, 0.0, &mut d_attn[h * t * t..(h + 1) * t * t]);
                let mut d_v = vec![0.0; t * dh];
                gemm(t, t, dh, probs, true, &d_o, false, 0.0, &mut d_v);
                put_cols(&mut d_qkv, &d_v, t, 3 * d, 2 * d + h * dh, dh);
            }
            let d_attn = hooked(&mut hooks, l, ModuleTag::Attn, &tr.tokens, &[nh, t, t], d_attn)?;
            let mut d_s = vec![0.0; t * t];
            for h in 0..nh {
                let q = take_cols(qkv, t, 3 * d, h * dh, dh);
                let k = take_cols(qkv, t, 3 * d, d + h * dh, dh);
                let probs = &tr.attn.as_slice()[h * t * t..(h + 1) * t * t];
                softmax_rows_backward(probs, &d_attn[h * t * t..(h + 1) * t * t], &mut d_s, t);
                d_s.iter_mut().for_each(|e| *e *= scale);
                let mut d_q = vec![0.0; t * dh];
                let mut d_k = vec![0.0; t * dh];
                gemm(t, t, dh, &d_s, false, &k, false, 0.0, &mut d_q);
                gemm(t, t, dh, &d_s, true, &q, false, 0.0, &mut d_k);
                put_cols(&mut d_qkv, &d_q, t, 3 * d, h * dh, dh);
                put_cols(&mut d_qkv, &d_k, t, 3 * d, d + h * dh, dh);
            }
            let d_qkv = hooked(&mut hooks, l, ModuleTag::Qkv, &tr.tokens, &[t, 3 * d], d_qkv)?;
            let d_h1 = blk.qkv.backward(&tr.h1, &d_qkv, t, bg.as_deref_mut().map(|g| &mut g.qkv));
            let d_in = blk.ln1.backward(&tr.ln1, &d_h1, bg.map(|g| &mut g.ln1));
            add_into(&mut dz, &d_in);
        }
        let _ = hid;

        let d_emb = &dz[d..];
        let d_patches = self.patch_embed.backward(
            &trace.patches,
            d_emb,
            a.patches(),
            grads.as_mut().map(|g| &mut g.patch_embed),
        );
        if let Some(g) = grads.as_mut() {
            add_into(g.cls.as_mut_slice(), &dz[..d]);
            add_into(g.pos.as_mut_slice(), &dz);
        }
        Ok(VitGradients {
            input: unpatchify(a, &d_patches),
            params: grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hooks::{FnHooks, IdentityHooks};
    use crate::model::layers::cross_entropy;

    fn tiny_arch() -> VitArch {
        VitArch {
            image_side: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            classes: 5,
        }
    }

    fn random_input(arch: &VitArch, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(&arch.input_shape(), |_| rng.uniform())
    }

    fn loss_at(p: &VitParams, x: &Tensor, y: usize) -> f64 {
        cross_entropy(&p.logits(x).unwrap(), y).0
    }

    fn input_grad(p: &VitParams, x: &Tensor, y: usize, hooks: Option<&mut dyn GradientHooks>) -> Tensor {
        let tr = p.forward(x).unwrap();
        let (_, gl) = cross_entropy(&tr.logits, y);
        p.backward(&tr, &gl, hooks, false).unwrap().input
    }

    #[test]
    fn patchify_round_trip() {
        let arch = tiny_arch();
        let mut rng = Rng::new(1, 0);
        let x = random_input(&arch, &mut rng);
        assert_eq!(unpatchify(&arch, &patchify(&arch, &x)), x);
    }

    #[test]
    fn arch_validation() {
        let mut a = VitArch::default();
        assert_eq!(a.seq_len(), 65);
        a.patch_size = 5;
        assert!(a.validate().is_err());
        let mut b = VitArch::default();
        b.heads = 3;
        assert!(b.validate().is_err());
    }

    #[test]
    fn zero_weights_give_equal_logits() {
        let arch = tiny_arch();
        let mut p = VitParams::zeros(arch).unwrap();
        p.blocks.iter_mut().for_each(|b| {
            b.ln1.gain = Tensor::full(&[8], 1.0);
            b.ln2.gain = Tensor::full(&[8], 1.0);
        });
        let mut rng = Rng::new(2, 0);
        let logits = p.logits(&random_input(&arch, &mut rng)).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == logits.as_slice()[0]));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let arch = tiny_arch();
        let mut rng = Rng::new(3, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let tr = p.forward(&random_input(&arch, &mut rng)).unwrap();
        assert_eq!(tr.depth(), arch.depth);
        for b in &tr.blocks {
            for row in b.attn.as_slice().chunks(arch.seq_len()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let arch = tiny_arch();
        let p = VitParams::zeros(arch).unwrap();
        assert!(matches!(p.forward(&Tensor::zeros(&[3, 8, 4])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let mut rng = Rng::new(4, 0);
        for _ in 0..3 {
            let p = VitParams::init(arch, &mut rng).unwrap();
            let x = random_input(&arch, &mut rng);
            let y = rng.below(arch.classes);
            let g = input_grad(&p, &x, y, None);
            let h = 1e-5;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[i] -= h;
                let fd = (loss_at(&p, &xp, y) - loss_at(&p, &xm, y)) / (2.0 * h);
                let err = (g.as_slice()[i] - fd).abs() / (fd.abs() + 1e-8);
                assert!(err < 1e-4, "coord {i}: analytic {} fd {fd}", g.as_slice()[i]);
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let mut rng = Rng::new(5, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let x = random_input(&arch, &mut rng);
        let y = 2;
        let tr = p.forward(&x).unwrap();
        let (_, gl) = cross_entropy(&tr.logits, y);
        let grads = p.backward(&tr, &gl, None, true).unwrap().params.unwrap();
        let h = 1e-5;
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            let len = p.tensors()[ti].len();
            for idx in [0, len / 2, len - 1] {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].as_mut_slice()[idx] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].as_mut_slice()[idx] -= h;
                let fd = (loss_at(&pp, &x, y) - loss_at(&pm, &x, y)) / (2.0 * h);
                let an = grads.tensors()[ti].as_slice()[idx];
                assert!((an - fd).abs() <= 1e-5 * (fd.abs() + 1e-4), "tensor {ti} idx {idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn identity_hooks_are_bitwise_neutral() {
        let arch = tiny_arch();
        let mut rng = Rng::new(6, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let x = random_input(&arch, &mut rng);
        let plain = input_grad(&p, &x, 1, None);
        let hooked = input_grad(&p, &x, 1, Some(&mut IdentityHooks));
        assert_eq!(plain, hooked);
    }

    #[test]
    fn zeroed_module_gradients_cut_every_branch() {
        let arch = tiny_arch();
        let mut rng = Rng::new(7, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let x = random_input(&arch, &mut rng);
        let mut zero = FnHooks::new(|_, _, _, g: Tensor| Ok(g.scale(0.0)));
        let g = input_grad(&p, &x, 1, Some(&mut zero));
        // Only the CLS row reaches the head and no branch mixes tokens, so
        // nothing flows back to the patch embeddings.
        assert!(g.is_finite());
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn uniform_hook_scale_interpolates_on_linear_attention_toy() {
        let arch = VitArch { depth: 1, ..tiny_arch() };
        let d = arch.embed_dim;
        let mut rng = Rng::new(11, 0);
        let mut p = VitParams::init(arch, &mut rng).unwrap();
        // Zero query/key projections make attention a fixed uniform average,
        // and a zero MLP output layer removes the MLP branch.
        let w = p.blocks[0].qkv.weight.as_mut_slice();
        for r in 0..d {
            for c in 0..2 * d {
                w[r * 3 * d + c] = 0.0;
            }
        }
        p.blocks[0].qkv.bias = Tensor::zeros(&[3 * d]);
        p.blocks[0].fc2.weight = Tensor::zeros(&[arch.hidden_dim(), d]);
        let x = random_input(&arch, &mut rng);
        let grad_at = |c: f64| {
            let mut hk = FnHooks::new(move |_, _, _, g: Tensor| Ok(g.scale(c)));
            input_grad(&p, &x, 3, Some(&mut hk))
        };
        let (g0, g1) = (grad_at(0.0), grad_at(1.0));
        assert!(g1.sub(&g0).unwrap().max_abs() > 0.0);
        for c in [0.25, 0.5, 0.75] {
            let gc = grad_at(c);
            for i in 0..gc.len() {
                let (lo, hi) = (g0.as_slice()[i], g1.as_slice()[i]);
                let v = gc.as_slice()[i];
                assert!(v >= lo.min(hi) - 1e-14 && v <= lo.max(hi) + 1e-14);
                assert!((v - (lo + c * (hi - lo))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hook_returning_wrong_shape_is_contract_violation() {
        let arch = tiny_arch();
        let mut rng = Rng::new(8, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let x = random_input(&arch, &mut rng);
        let tr = p.forward(&x).unwrap();
        let (_, gl) = cross_entropy(&tr.logits, 0);
        let mut bad = FnHooks::new(|_, _, _, _g: Tensor| Ok(Tensor::zeros(&[1])));
        let err = p.backward(&tr, &gl, Some(&mut bad), false).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn hooks_see_blocks_deepest_first() {
        let arch = tiny_arch();
        let mut rng = Rng::new(9, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let x = random_input(&arch, &mut rng);
        let tr = p.forward(&x).unwrap();
        let (_, gl) = cross_entropy(&tr.logits, 0);
        let mut seen = Vec::new();
        let mut rec = FnHooks::new(|l, m, z: &Tensor, g: Tensor| {
            assert_eq!(z.shape(), &[5, 8]);
            seen.push((l, m));
            Ok(g)
        });
        p.backward(&tr, &gl, Some(&mut rec), false).unwrap();
        drop(rec);
        assert_eq!(
            seen,
            vec![
                (1, ModuleTag::Mlp),
                (1, ModuleTag::Attn),
                (1, ModuleTag::Qkv),
                (0, ModuleTag::Mlp),
                (0, ModuleTag::Attn),
                (0, ModuleTag::Qkv)
            ]
        );
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let arch = VitArch::default();
        let mut rng = Rng::new(10, 0);
        let p = VitParams::init(arch, &mut rng).unwrap();
        let x = random_input(&arch, &mut rng);
        let a = p.logits(&x).unwrap();
        let b = p.logits(&x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
