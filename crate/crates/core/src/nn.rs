//! Minimal CNN building blocks with explicit backpropagation: convolution,
//! ReLU, global average pooling, fully connected layers, sigmoid, MSE loss
//! and Adam. Everything is single-threaded and generic over [`Scalar`], so
//! runs are bit-reproducible and gradients can be checked in f64.

use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// CHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.h + y) * self.w + x]
    }
}

fn kaiming_uniform<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect()
}

/// 2-D convolution with square kernel, stride and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: kaiming_uniform(rng, fan_in, out_c * fan_in),
            bias: vec![T::zero(); out_c],
            grad_weight: vec![T::zero(); out_c * fan_in],
            grad_bias: vec![T::zero(); out_c],
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    #[inline]
    fn w_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weight[((o * self.in_c + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_dims(x.h, x.w);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        for o in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_c {
                        for ky in 0..self.kernel {
                            let iy = oy * self.stride + ky;
                            if iy < self.pad || iy - self.pad >= x.h {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = ox * self.stride + kx;
                                if ix < self.pad || ix - self.pad >= x.w {
                                    continue;
                                }
                                acc += self.w_at(o, i, ky, kx) * x.at(i, iy - self.pad, ix - self.pad);
                            }
                        }
                    }
                    *y.at_mut(o, oy, ox) = acc;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        let (oh, ow) = self.out_dims(x.h, x.w);
        debug_assert_eq!((dy.h, dy.w), (oh, ow));
        for o in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy.at(o, oy, ox);
                    if g == T::zero() {
                        continue;
                    }
                    self.grad_bias[o] += g;
                    for i in 0..self.in_c {
                        for ky in 0..self.kernel {
                            let iy = oy * self.stride + ky;
                            if iy < self.pad || iy - self.pad >= x.h {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = ox * self.stride + kx;
                                if ix < self.pad || ix - self.pad >= x.w {
                                    continue;
                                }
                                let widx =
                                    ((o * self.in_c + i) * self.kernel + ky) * self.kernel + kx;
                                self.grad_weight[widx] += g * x.at(i, iy - self.pad, ix - self.pad);
                                *dx.at_mut(i, iy - self.pad, ix - self.pad) +=
                                    g * self.weight[widx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: kaiming_uniform(rng, in_dim, out_dim * in_dim),
            bias: vec![T::zero(); out_dim],
            grad_weight: vec![T::zero(); out_dim * in_dim],
            grad_bias: vec![T::zero(); out_dim],
        }
    }

    /// Zero weights and biases: an untrained head predicts the neutral
    /// value exactly.
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); out_dim * in_dim],
            bias: vec![T::zero(); out_dim],
            grad_weight: vec![T::zero(); out_dim * in_dim],
            grad_bias: vec![T::zero(); out_dim],
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (w, v)| acc + *w * *v)
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[T], dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_dim];
        for o in 0..self.out_dim {
            let g = dy[o];
            self.grad_bias[o] += g;
            let row = &mut self.grad_weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (i, gw) in row.iter_mut().enumerate() {
                *gw += g * x[i];
            }
            let wrow = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (i, w) in wrow.iter().enumerate() {
                dx[i] += g * *w;
            }
        }
        dx
    }
}

pub fn relu_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|v| v.max(T::zero())).collect(),
    }
}

pub fn relu_backward_tensor<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(p, g)| if *p > T::zero() { *g } else { T::zero() })
            .collect(),
    }
}

pub fn relu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.max(T::zero())).collect()
}

pub fn relu_backward_vec<T: Scalar>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter()
        .zip(dy)
        .map(|(p, g)| if *p > T::zero() { *g } else { T::zero() })
        .collect()
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let n = T::from_usize(x.h * x.w);
    (0..x.c)
        .map(|c| {
            x.data[c * x.h * x.w..(c + 1) * x.h * x.w]
                .iter()
                .fold(T::zero(), |acc, v| acc + *v)
                / n
        })
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(c: usize, h: usize, w: usize, dfeat: &[T]) -> Tensor<T> {
    let n = T::from_usize(h * w);
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let g = dfeat[ci] / n;
        for v in &mut dx.data[ci * h * w..(ci + 1) * h * w] {
            *v = g;
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ---------------------------------------------------------------------------
// composites

/// Conv-ReLU stages followed by global average pooling; the feature length
/// equals the last stage's channel count.
#[derive(Debug, Clone)]
pub struct ConvBackbone<T: Scalar> {
    pub convs: Vec<Conv2d<T>>,
}

/// Intermediate activations needed to backpropagate one forward pass.
pub struct BackboneCache<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    pre_relu: Vec<Tensor<T>>,
    last: Tensor<T>,
}

impl<T: Scalar> ConvBackbone<T> {
    pub fn feature_dim(&self) -> usize {
        self.convs.last().map(|c| c.out_c).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Vec<T> {
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = relu_tensor(&conv.forward(&cur));
        }
        global_avg_pool(&cur)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Vec<T>, BackboneCache<T>) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre_relu = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            inputs.push(cur.clone());
            let pre = conv.forward(&cur);
            cur = relu_tensor(&pre);
            pre_relu.push(pre);
        }
        let feat = global_avg_pool(&cur);
        (
            feat,
            BackboneCache {
                inputs,
                pre_relu,
                last: cur,
            },
        )
    }

    /// Accumulates parameter gradients for one cached forward pass.
    pub fn backward(&mut self, cache: &BackboneCache<T>, dfeat: &[T]) {
        let mut grad = global_avg_pool_backward(cache.last.c, cache.last.h, cache.last.w, dfeat);
        for idx in (0..self.convs.len()).rev() {
            let through_relu = relu_backward_tensor(&cache.pre_relu[idx], &grad);
            grad = self.convs[idx].backward(&cache.inputs[idx], &through_relu);
        }
    }

    pub fn zero_grads(&mut self) {
        for conv in &mut self.convs {
            conv.grad_weight.iter_mut().for_each(|g| *g = T::zero());
            conv.grad_bias.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// Linear stack with ReLU between layers and a linear final output.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Linear<T>>,
}

pub struct MlpCache<T: Scalar> {
    inputs: Vec<Vec<T>>,
    pre_relu: Vec<Vec<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur);
            if i + 1 < self.layers.len() {
                cur = relu_vec(&cur);
            }
        }
        cur
    }

    pub fn forward_cached(&self, x: &[T]) -> (Vec<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_relu = Vec::new();
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            cur = layer.forward(&cur);
            if i + 1 < self.layers.len() {
                pre_relu.push(cur.clone());
                cur = relu_vec(&cur);
            }
        }
        (cur, MlpCache { inputs, pre_relu })
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// stack input.
    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &[T]) -> Vec<T> {
        let mut grad = dy.to_vec();
        for idx in (0..self.layers.len()).rev() {
            if idx + 1 < self.layers.len() {
                grad = relu_backward_vec(&cache.pre_relu[idx], &grad);
            }
            grad = self.layers[idx].backward(&cache.inputs[idx], &grad);
        }
        grad
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.grad_weight.iter_mut().for_each(|g| *g = T::zero());
            layer.grad_bias.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with bias correction; state is allocated lazily to match the
/// parameter groups it is first stepped with.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_from(data: Vec<f64>, c: usize, h: usize, w: usize) -> Tensor<f64> {
        assert_eq!(data.len(), c * h * w);
        Tensor { c, h, w, data }
    }

    /// Central finite differences over every parameter of a conv layer.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seeded_rng(11);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x = tensor_from((0..2 * 5 * 5).map(|i| (i as f64 * 0.13).sin()).collect(), 2, 5, 5);
        // loss = sum of squared outputs
        let loss = |conv: &Conv2d<f64>| -> f64 {
            conv.forward(&x).data.iter().map(|v| v * v).sum::<f64>()
        };
        let y = conv.forward(&x);
        let dy = Tensor {
            c: y.c,
            h: y.h,
            w: y.w,
            data: y.data.iter().map(|v| 2.0 * v).collect(),
        };
        conv.backward(&x, &dy);
        let eps = 1e-6;
        for idx in 0..conv.weight.len() {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + eps;
            let hi = loss(&conv);
            conv.weight[idx] = orig - eps;
            let lo = loss(&conv);
            conv.weight[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let an = conv.grad_weight[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1.0),
                "weight {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = seeded_rng(12);
        let mut lin = Linear::<f64>::new(4, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|i| (i as f64 + 0.3).cos()).collect();
        let loss = |lin: &Linear<f64>| -> f64 { lin.forward(&x).iter().map(|v| v * v).sum() };
        let y = lin.forward(&x);
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let dx = lin.backward(&x, &dy);
        let eps = 1e-6;
        for idx in 0..lin.weight.len() {
            let orig = lin.weight[idx];
            lin.weight[idx] = orig + eps;
            let hi = loss(&lin);
            lin.weight[idx] = orig - eps;
            let lo = loss(&lin);
            lin.weight[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - lin.grad_weight[idx]).abs() < 1e-6);
        }
        // input gradient via FD as well
        let mut x2 = x.clone();
        for i in 0..x2.len() {
            let orig = x2[i];
            x2[i] = orig + eps;
            let hi: f64 = lin.forward(&x2).iter().map(|v| v * v).sum();
            x2[i] = orig - eps;
            let lo: f64 = lin.forward(&x2).iter().map(|v| v * v).sum();
            x2[i] = orig;
            assert!(((hi - lo) / (2.0 * eps) - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn backbone_cached_forward_matches_plain() {
        let mut rng = seeded_rng(13);
        let backbone = ConvBackbone {
            convs: vec![
                Conv2d::<f64>::new(1, 4, 3, 2, 1, &mut rng),
                Conv2d::<f64>::new(4, 6, 3, 2, 1, &mut rng),
            ],
        };
        let x = tensor_from((0..64).map(|i| (i as f64 * 0.21).sin()).collect(), 1, 8, 8);
        let plain = backbone.forward(&x);
        let (cached, _) = backbone.forward_cached(&x);
        assert_eq!(plain, cached);
        assert_eq!(plain.len(), backbone.feature_dim());
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut rng = seeded_rng(14);
        let mut backbone = ConvBackbone {
            convs: vec![
                Conv2d::<f64>::new(1, 3, 3, 2, 1, &mut rng),
                Conv2d::<f64>::new(3, 4, 3, 1, 0, &mut rng),
            ],
        };
        let x = tensor_from((0..100).map(|i| (i as f64 * 0.17).cos()).collect(), 1, 10, 10);
        let loss = |b: &ConvBackbone<f64>| -> f64 { b.forward(&x).iter().map(|v| v * v).sum() };
        let (feat, cache) = backbone.forward_cached(&x);
        let dfeat: Vec<f64> = feat.iter().map(|v| 2.0 * v).collect();
        backbone.backward(&cache, &dfeat);
        let eps = 1e-6;
        for conv_idx in 0..backbone.convs.len() {
            for widx in (0..backbone.convs[conv_idx].weight.len()).step_by(7) {
                let orig = backbone.convs[conv_idx].weight[widx];
                backbone.convs[conv_idx].weight[widx] = orig + eps;
                let hi = loss(&backbone);
                backbone.convs[conv_idx].weight[widx] = orig - eps;
                let lo = loss(&backbone);
                backbone.convs[conv_idx].weight[widx] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                let an = backbone.convs[conv_idx].grad_weight[widx];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1.0),
                    "conv {conv_idx} weight {widx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut params = vec![5.0f64, -3.0, 2.0];
        let mut opt = Adam::<f64>::new(0.1);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            opt.step(&mut [&mut params], &[&grads]);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2));
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
