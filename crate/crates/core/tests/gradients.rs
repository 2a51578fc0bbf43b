//! Central finite-difference verification of every registered differentiable
//! op and of the micro networks, in 64-bit. The numeric side only runs
//! forward passes, so it is independent of the backward code it checks.

use gammaldm::gamma::{gamma_kl_pixelwise, GammaParams};
use gammaldm::nn::channel_norm;
use gammaldm::rng::rng_from_seed;
use gammaldm::sector::{masked_mean_loss, SectorMask};
use gammaldm::tensor::gradcheck::check_gradients;
use gammaldm::tensor::{ResampleMode, Tensor};
use gammaldm::Result;
use rand::Rng as _;

const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;
const SEEDS: u64 = 20;

/// Random leaf with entries mapped into [lo, hi].
fn leaf(rng: &mut gammaldm::rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::param(shape, data).unwrap()
}

/// Constant projection weights so a single backward checks the whole
/// Jacobian.
fn proj(rng: &mut gammaldm::rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn check_unary(
    name: &str,
    lo: f64,
    hi: f64,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(1000 + seed);
        let x = leaf(&mut rng, &[3, 4], lo, hi);
        let w = proj(&mut rng, &[3, 4]);
        let loss = || -> Result<Tensor<f64>> { Ok(f(&x)?.mul(&w)?.sum()) };
        check_gradients(&loss, &[x.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
    }
}

#[test]
fn elementwise_unary_ops() {
    check_unary("exp", -1.5, 1.5, |x| Ok(x.exp()));
    check_unary("neg", -2.0, 2.0, |x| Ok(x.neg()));
    check_unary("log", 0.2, 3.0, |x| x.ln());
    check_unary("sqrt", 0.2, 4.0, |x| x.sqrt());
    check_unary("sigmoid", -3.0, 3.0, |x| Ok(x.sigmoid()));
    check_unary("softplus", -3.0, 3.0, |x| Ok(x.softplus()));
    check_unary("affine", -2.0, 2.0, |x| Ok(x.affine(1.7, -0.3)));
    check_unary("lgamma", 0.3, 5.0, |x| x.lgamma());
    check_unary("digamma", 0.3, 5.0, |x| x.digamma());
    // relu away from the kink
    check_unary("relu", 0.1, 2.0, |x| Ok(x.relu()));
    check_unary("relu_neg", -2.0, -0.1, |x| Ok(x.relu()));
}

#[test]
fn elementwise_binary_ops_same_shape() {
    let cases: Vec<(&str, fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>, f64, f64)> = vec![
        ("add", |a, b| a.add(b), -2.0, 2.0),
        ("sub", |a, b| a.sub(b), -2.0, 2.0),
        ("mul", |a, b| a.mul(b), -2.0, 2.0),
        ("div", |a, b| a.div(b), 0.4, 2.0),
        ("pow", |a, b| a.pow(b), 0.4, 1.8),
    ];
    for (name, f, lo, hi) in cases {
        for seed in 0..SEEDS {
            let mut rng = rng_from_seed(2000 + seed);
            let a = leaf(&mut rng, &[2, 6], lo, hi);
            let b = leaf(&mut rng, &[2, 6], lo, hi);
            let w = proj(&mut rng, &[2, 6]);
            let loss = || -> Result<Tensor<f64>> { Ok(f(&a, &b)?.mul(&w)?.sum()) };
            check_gradients(&loss, &[a.clone(), b.clone()], RTOL, ATOL)
                .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        }
    }
}

#[test]
fn broadcast_gradients_sum_over_broadcast_axes() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(3000 + seed);
        let a = leaf(&mut rng, &[1, 3, 1, 1], -1.0, 1.0);
        let b = leaf(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let w = proj(&mut rng, &[2, 3, 2, 2]);
        let loss = || -> Result<Tensor<f64>> { Ok(a.mul(&b)?.add(&a)?.mul(&w)?.sum()) };
        check_gradients(&loss, &[a.clone(), b.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("broadcast seed {seed}: {e}"));
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(4000 + seed);
        let a = leaf(&mut rng, &[5, 4], -1.0, 1.0);
        let b = leaf(&mut rng, &[4, 3], -1.0, 1.0);
        let w = proj(&mut rng, &[5, 3]);
        let loss = || -> Result<Tensor<f64>> { Ok(a.matmul(&b)?.mul(&w)?.sum()) };
        check_gradients(&loss, &[a.clone(), b.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("matmul seed {seed}: {e}"));
    }
}

#[test]
fn conv2d_gradients_wrt_input_and_weight() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(5000 + seed);
        let x = leaf(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w = leaf(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let p = proj(&mut rng, &[1, 2, 5, 5]);
        let loss = || -> Result<Tensor<f64>> { Ok(x.conv2d(&w, 1, 1)?.mul(&p)?.sum()) };
        check_gradients(&loss, &[x.clone(), w.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("conv s1 seed {seed}: {e}"));
        // strided, unpadded variant
        let p2 = proj(&mut rng, &[1, 2, 2, 2]);
        let loss2 = || -> Result<Tensor<f64>> { Ok(x.conv2d(&w, 2, 0)?.mul(&p2)?.sum()) };
        check_gradients(&loss2, &[x.clone(), w.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("conv s2 seed {seed}: {e}"));
    }
}

#[test]
fn resample_gradients_all_modes() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(6000 + seed);
        let x = leaf(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        for (mode, oshape) in [
            (ResampleMode::AvgpoolDown, vec![1usize, 2, 2, 2]),
            (ResampleMode::NearestUp, vec![1, 2, 8, 8]),
            (ResampleMode::BilinearUp, vec![1, 2, 8, 8]),
        ] {
            let p = proj(&mut rng, &oshape);
            let loss = || -> Result<Tensor<f64>> { Ok(x.resample(mode, 2)?.mul(&p)?.sum()) };
            check_gradients(&loss, &[x.clone()], RTOL, ATOL)
                .unwrap_or_else(|e| panic!("resample {mode:?} seed {seed}: {e}"));
        }
    }
}

#[test]
fn reductions_and_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(7000 + seed);
        let x = leaf(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let loss_mean = || -> Result<Tensor<f64>> { Ok(x.mean()) };
        check_gradients(&loss_mean, &[x.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("mean seed {seed}: {e}"));
        let p = proj(&mut rng, &[2, 1, 1, 1]);
        let loss_axes = || -> Result<Tensor<f64>> { Ok(x.mean_axes(&[1, 2, 3])?.mul(&p)?.sum()) };
        check_gradients(&loss_axes, &[x.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("mean_axes seed {seed}: {e}"));
        // channel standardization path (mean/std composite)
        let pn = proj(&mut rng, &[2, 3, 2, 2]);
        let loss_norm = || -> Result<Tensor<f64>> { Ok(channel_norm(&x)?.mul(&pn)?.sum()) };
        check_gradients(&loss_norm, &[x.clone()], 1e-3, ATOL)
            .unwrap_or_else(|e| panic!("channel_norm seed {seed}: {e}"));
    }
}

#[test]
fn concat_narrow_reshape_gradients() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(8000 + seed);
        let a = leaf(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
        let b = leaf(&mut rng, &[1, 1, 2, 2], -1.0, 1.0);
        let p = proj(&mut rng, &[1, 3, 2, 2]);
        let loss = || -> Result<Tensor<f64>> {
            Ok(Tensor::concat(&[a.clone(), b.clone()], 1)?.mul(&p)?.sum())
        };
        check_gradients(&loss, &[a.clone(), b.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("concat seed {seed}: {e}"));
        let pn = proj(&mut rng, &[1, 1, 2, 2]);
        let loss_n = || -> Result<Tensor<f64>> { Ok(a.narrow(1, 1, 1)?.mul(&pn)?.sum()) };
        check_gradients(&loss_n, &[a.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("narrow seed {seed}: {e}"));
        let pr = proj(&mut rng, &[8]);
        let loss_r = || -> Result<Tensor<f64>> { Ok(a.reshape(&[8])?.mul(&pr)?.sum()) };
        check_gradients(&loss_r, &[a.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("reshape seed {seed}: {e}"));
    }
}

#[test]
fn masked_mean_gradient_zero_outside_sector() {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(9000 + seed);
        let bits: Vec<u8> = (0..16).map(|_| u8::from(rng.random::<f64>() > 0.4)).collect();
        if bits.iter().all(|&b| b == 0) {
            continue;
        }
        let mask = SectorMask::from_binary(4, 4, &bits).unwrap();
        let x = leaf(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        let loss = || -> Result<Tensor<f64>> { masked_mean_loss(&x.mul(&x)?, &mask) };
        check_gradients(&loss, &[x.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("masked_mean seed {seed}: {e}"));
        x.zero_grad();
        let l = loss().unwrap();
        l.backward().unwrap();
        let g = x.grad().unwrap();
        for (i, &b) in bits.iter().enumerate() {
            if b == 0 {
                assert_eq!(g[i], 0.0, "seed {seed}: out-of-sector grad must be exactly 0");
            }
        }
    }
}

#[test]
fn gamma_kl_pixelwise_gradients() {
    let q = GammaParams::new(3.75, 10.8).unwrap();
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(10_000 + seed);
        let a = leaf(&mut rng, &[1, 1, 3, 3], 0.5, 6.0);
        let b = leaf(&mut rng, &[1, 1, 3, 3], 0.5, 12.0);
        let p = proj(&mut rng, &[1, 1, 3, 3]);
        let loss = || -> Result<Tensor<f64>> { Ok(gamma_kl_pixelwise(&a, &b, &q)?.mul(&p)?.sum()) };
        check_gradients(&loss, &[a.clone(), b.clone()], RTOL, ATOL)
            .unwrap_or_else(|e| panic!("gamma_kl seed {seed}: {e}"));
    }
}

/// Shift every parameter to a generic position: zero-initialized biases
/// put relu kinks exactly at 0, where a two-sided difference measures the
/// kink average instead of the subgradient.
fn jitter_params(params: &[Tensor<f64>], seed: u64) {
    let mut rng = rng_from_seed(seed);
    for p in params {
        p.update_data(|d| {
            for v in d.iter_mut() {
                *v += 0.05 * (2.0 * rng.random::<f64>() - 1.0);
            }
        });
    }
}

#[test]
fn spade_norm_micro_gradcheck() {
    use gammaldm::spade::{one_hot, SpadeNorm};
    use gammaldm::sector::SemanticMap;
    let mut rng = rng_from_seed(11_000);
    let spade = SpadeNorm::<f64>::new(&mut rng, 5, 3, 2);
    let map = SemanticMap::new(4, 4, vec![
        0, 0, 4, 4,
        0, 1, 2, 4,
        4, 1, 2, 3,
        4, 4, 3, 3,
    ])
    .unwrap();
    let onehot = one_hot::<f64>(&map, 5).unwrap();
    jitter_params(
        &[
            spade.shared.bias.clone(),
            spade.gamma_head.bias.clone(),
            spade.beta_head.bias.clone(),
        ],
        600,
    );
    let h = leaf(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let p = proj(&mut rng, &[1, 2, 4, 4]);
    let loss = || -> Result<Tensor<f64>> { Ok(spade.forward(&h, &onehot)?.mul(&p)?.sum()) };
    // gradient wrt activations, gamma-head and beta-head parameters
    let leaves = vec![
        h.clone(),
        spade.gamma_head.weight.clone(),
        spade.gamma_head.bias.clone(),
        spade.beta_head.weight.clone(),
        spade.beta_head.bias.clone(),
        spade.shared.weight.clone(),
    ];
    check_gradients(&loss, &leaves, 1e-3, ATOL).unwrap();
}

#[test]
fn denoiser_micro_network_gradcheck() {
    use gammaldm::diffusion::Denoiser;
    use gammaldm::spade::{one_hot, DenoiserConfig, SpadeUnet};
    use gammaldm::sector::SemanticMap;
    let mut rng = rng_from_seed(12_000);
    let cfg = DenoiserConfig {
        levels: 1,
        base_channels: 4,
        sigma_embedding_dim: 4,
        spade_hidden: 3,
        sigma_data: 0.5,
        ..Default::default()
    };
    let net = SpadeUnet::<f64>::new(&mut rng, cfg).unwrap();
    jitter_params(&net.parameters(), 601);
    let mut labels = vec![4u8; 64];
    for i in 20..28 {
        labels[i] = 2;
    }
    let map = SemanticMap::new(8, 8, labels).unwrap();
    let onehot = one_hot::<f64>(&map, 5).unwrap();
    let x = leaf(&mut rng, &[1, 1, 8, 8], -1.0, 1.0);
    let p = proj(&mut rng, &[1, 1, 8, 8]);
    let loss = || -> Result<Tensor<f64>> {
        Ok(net.denoise(&x, &[0.7], Some(&onehot))?.mul(&p)?.sum())
    };
    let leaves: Vec<Tensor<f64>> = std::iter::once(x.clone())
        .chain(net.parameters())
        .collect();
    check_gradients(&loss, &leaves, 1e-3, 1e-6).unwrap();
}

#[test]
fn vae_micro_network_gradcheck() {
    use gammaldm::vae::{vae_loss, GammaVae, PerceptualNet, VaeConfig, VaeLossConfig};
    let vae = GammaVae::<f64>::new(VaeConfig {
        levels: 2,
        width_unit: 2,
        init_seed: 3,
    })
    .unwrap();
    jitter_params(&vae.parameters(), 602);
    let mut rng = rng_from_seed(13_000);
    let x = leaf(&mut rng, &[1, 1, 8, 8], 0.1, 0.9);
    let bits: Vec<u8> = (0..64).map(|i| u8::from(i % 5 != 0)).collect();
    let mask = SectorMask::from_binary(8, 8, &bits).unwrap();
    let perc = PerceptualNet::<f64>::new(5);
    let cfg = VaeLossConfig::default();
    let mut sample_rng = rng_from_seed(77);
    // deterministic latent path (expected value) keeps the loss FD-friendly
    let loss = || -> Result<Tensor<f64>> {
        let p = vae.encode(&x)?;
        let z = p.expected_latent()?;
        let y = vae.decode(&z)?;
        Ok(vae_loss(&x, &y, &p, &cfg, &[&mask], &perc, 4)?.total)
    };
    let leaves: Vec<Tensor<f64>> = vae.parameters();
    check_gradients(&loss, &leaves, 1e-3, 1e-6).unwrap();
    let _ = &mut sample_rng;
}
