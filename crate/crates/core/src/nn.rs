//! Network building blocks: convolution/linear layers, channel affine,
//! Adam, and weight init. Parameter naming follows "prefix.name" so the
//! checkpoint container can address every tensor.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

pub fn he_normal<T: Element>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::param(shape, data).expect("shape/data consistent")
}

pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let weight = he_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k);
        let bias = Tensor::param(&[1, out_ch, 1, 1], vec![T::zero(); out_ch]).unwrap();
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.stride, self.padding)?.add(&self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct Linear<T: Element> {
    pub weight: Tensor<T>, // [in, out]
    pub bias: Tensor<T>,   // [1, out]
}

impl<T: Element> Linear<T> {
    pub fn new(rng: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: he_normal(rng, &[in_dim, out_dim], in_dim),
            bias: Tensor::param(&[1, out_dim], vec![T::zero(); out_dim]).unwrap(),
        }
    }

    /// x: [N, in] -> [N, out]
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Learned per-channel scale and shift (the affine half of a plain norm).
pub struct ChannelAffine<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> ChannelAffine<T> {
    pub fn new(channels: usize) -> Self {
        ChannelAffine {
            gamma: Tensor::param(&[1, channels, 1, 1], vec![T::one(); channels]).unwrap(),
            beta: Tensor::param(&[1, channels, 1, 1], vec![T::zero(); channels]).unwrap(),
        }
    }

    pub fn forward(&self, x_normed: &Tensor<T>) -> Result<Tensor<T>> {
        x_normed.mul(&self.gamma)?.add(&self.beta)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Standardize activations per channel over batch+spatial dims.
pub fn channel_norm<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (mu, sigma) = x.channel_mean_std(T::from_f64(crate::NORM_EPS))?;
    x.sub(&mu)?.div(&sigma)
}

pub struct Adam<T: Element> {
    params: Vec<Tensor<T>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update from the gradients accumulated on the parameters,
    /// then clear them. Parameters with no gradient are left untouched.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j].to_f64_();
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                    data[j] = T::from_f64(data[j].to_f64_() - upd);
                }
            });
            p.zero_grad();
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn adam_minimizes_quadratic() {
        let p = Tensor::<f64>::param(&[1], vec![5.0]).unwrap();
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        for _ in 0..300 {
            let loss = p.mul(&p).unwrap().sum();
            loss.backward().unwrap();
            opt.step();
        }
        assert!(p.to_vec()[0].abs() < 0.05, "got {}", p.to_vec()[0]);
    }

    #[test]
    fn conv_layer_shapes() {
        let mut rng = rng_from_seed(0);
        let layer = Conv2d::<f32>::new(&mut rng, 3, 8, 3, 1, 1);
        let x = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
        let mut params = vec![];
        layer.collect_params("c", &mut params);
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].0, "c.weight");
    }

    #[test]
    fn channel_norm_standardizes() {
        let mut rng = rng_from_seed(3);
        let data: Vec<f64> = (0..64)
            .map(|_| {
                3.0 + 2.0
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let x = Tensor::<f64>::from_vec(&[1, 1, 8, 8], data).unwrap();
        let y = channel_norm(&x).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 64.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
