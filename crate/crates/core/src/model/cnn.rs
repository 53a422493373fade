//! Small convolutional classifier: two conv(3×3)–ReLU–maxpool(2×2) stages
//! followed by a linear head over the flattened feature map.

use crate::error::{Error, Result};
use crate::kernels::dense::gemm;
use crate::model::layers::Linear;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CnnArch {
    pub image_side: usize,
    pub channels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub classes: usize,
}

impl Default for CnnArch {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: 3,
            conv1: 16,
            conv2: 32,
            classes: 10,
        }
    }
}

impl CnnArch {
    pub fn validate(&self) -> Result<()> {
        if [self.image_side, self.channels, self.conv1, self.conv2, self.classes].contains(&0) {
            return Err(Error::invalid(format!("CNN dimensions must be positive: {self:?}")));
        }
        if !self.image_side.is_multiple_of(4) {
            return Err(Error::invalid("CNN image side must be divisible by 4"));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.image_side, self.image_side]
    }

    pub fn feature_dim(&self) -> usize {
        self.conv2 * (self.image_side / 4) * (self.image_side / 4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// `[out, in·9]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3x3 {
    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin * 9]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn random(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[cout, cin * 9], |_| std * rng.normal()),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    fn cin(&self) -> usize {
        self.weight.shape()[1] / 9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub arch: CnnArch,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub head: Linear,
}

/// `[cin·9, h·w]` patch matrix for a zero-padded 3×3 convolution.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * 9 * h * w];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + xx] = x[c * h * w + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let mut x = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[c * h * w + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// 2×2 max pool; returns pooled values and the flat source index of each max.
fn maxpool(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut idx = vec![0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = ch * h * w + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + y * ow + xx;
                out[o] = x[best];
                idx[o] = best;
            }
        }
    }
    (out, idx)
}

#[derive(Debug, Clone)]
pub struct CnnTrace {
    pub logits: Tensor,
    cols1: Vec<f64>,
    pre1: Vec<f64>,
    pool1_idx: Vec<usize>,
    cols2: Vec<f64>,
    pre2: Vec<f64>,
    pool2_idx: Vec<usize>,
    features: Vec<f64>,
}

impl CnnTrace {
    /// Signature of every ReLU sign and pooling choice; equal signatures mean
    /// the network is the same affine map around both inputs.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.pre1.iter().chain(&self.pre2).map(|&p| (p > 0.0) as u64).collect();
        v.extend(self.pool1_idx.iter().chain(&self.pool2_idx).map(|&i| i as u64));
        v
    }
}

#[derive(Debug, Clone)]
pub struct CnnGradients {
    pub input: Tensor,
    pub params: Option<CnnParams>,
}

fn conv_forward(conv: &Conv3x3, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, conv.cin(), h, w);
    let hw = h * w;
    let mut out = vec![0.0; conv.cout() * hw];
    for (o, &b) in conv.bias.as_slice().iter().enumerate() {
        out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
    }
    gemm(conv.cout(), conv.cin() * 9, hw, conv.weight.as_slice(), false, &cols, false, 1.0, &mut out);
    (cols, out)
}

fn conv_backward(
    conv: &Conv3x3,
    cols: &[f64],
    d_out: &[f64],
    h: usize,
    w: usize,
    grads: Option<&mut Conv3x3>,
) -> Vec<f64> {
    let hw = h * w;
    let k = conv.cin() * 9;
    if let Some(g) = grads {
        gemm(conv.cout(), hw, k, d_out, false, cols, true, 1.0, g.weight.as_mut_slice());
        for (o, b) in g.bias.as_mut_slice().iter_mut().enumerate() {
            *b += d_out[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    let mut d_cols = vec![0.0; k * hw];
    gemm(k, conv.cout(), hw, conv.weight.as_slice(), true, d_out, false, 0.0, &mut d_cols);
    col2im(&d_cols, conv.cin(), h, w)
}

impl CnnParams {
    pub fn zeros(arch: CnnArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            conv1: Conv3x3::zeros(arch.channels, arch.conv1),
            conv2: Conv3x3::zeros(arch.conv1, arch.conv2),
            head: Linear::zeros(arch.feature_dim(), arch.classes),
        })
    }

    pub fn init(arch: CnnArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let conv1 = Conv3x3::random(arch.channels, arch.conv1, rng);
        let conv2 = Conv3x3::random(arch.conv1, arch.conv2, rng);
        let head = Linear::random(arch.feature_dim(), arch.classes, 1.0 / (arch.feature_dim() as f64).sqrt(), rng);
        Ok(Self { arch, conv1, conv2, head })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn forward(&self, x: &Tensor) -> Result<CnnTrace> {
        let a = &self.arch;
        x.expect_shape(&a.input_shape())?;
        let s = a.image_side;
        let (cols1, pre1) = conv_forward(&self.conv1, x.as_slice(), s, s);
        let act1: Vec<f64> = pre1.iter().map(|&v| v.max(0.0)).collect();
        let (pool1, pool1_idx) = maxpool(&act1, a.conv1, s, s);
        let (cols2, pre2) = conv_forward(&self.conv2, &pool1, s / 2, s / 2);
        let act2: Vec<f64> = pre2.iter().map(|&v| v.max(0.0)).collect();
        let (features, pool2_idx) = maxpool(&act2, a.conv2, s / 2, s / 2);
        let logits = Tensor::new(&[a.classes], self.head.forward(&features, 1))?;
        Ok(CnnTrace {
            logits,
            cols1,
            pre1,
            pool1_idx,
            cols2,
            pre2,
            pool2_idx,
            features,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }

    pub fn backward(&self, trace: &CnnTrace, grad_logits: &Tensor, with_params: bool) -> Result<CnnGradients> {
        let a = &self.arch;
        grad_logits.expect_shape(&[a.classes])?;
        let s = a.image_side;
        let mut grads = if with_params { Some(CnnParams::zeros(*a)?) } else { None };

        let d_feat = self.head.backward(&trace.features, grad_logits.as_slice(), 1, grads.as_mut().map(|g| &mut g.head));
        let mut d_pre2 = vec![0.0; trace.pre2.len()];
        for (&i, &g) in trace.pool2_idx.iter().zip(&d_feat) {
            if trace.pre2[i] > 0.0 {
                d_pre2[i] += g;
            }
        }
        let d_pool1 = conv_backward(&self.conv2, &trace.cols2, &d_pre2, s / 2, s / 2, grads.as_mut().map(|g| &mut g.conv2));
        let mut d_pre1 = vec![0.0; trace.pre1.len()];
        for (&i, &g) in trace.pool1_idx.iter().zip(&d_pool1) {
            if trace.pre1[i] > 0.0 {
                d_pre1[i] += g;
            }
        }
        let d_x = conv_backward(&self.conv1, &trace.cols1, &d_pre1, s, s, grads.as_mut().map(|g| &mut g.conv1));
        Ok(CnnGradients {
            input: Tensor::new(&a.input_shape(), d_x)?,
            params: grads,
        })
    }
}
