//! Finite-difference verification of the network and loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{Architecture, GridNetConfig, Tensor};
use crate::train::{patch_loss, patch_loss_and_grad};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub params: usize,
    /// Largest per-parameter `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    /// `|g_a - g_n| / |g_n|` over the whole gradient vector.
    pub vector_rel_error: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub net: GridNetConfig,
    pub size: usize,
    pub lambda: f64,
    pub step: f64,
    /// Denominator floor, relative to the largest gradient magnitude, so
    /// parameters with vanishing gradients are judged absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { net: GridNetConfig::tiny(3), size: 16, lambda: 100.0, step: 1e-5, floor: 1e-6 }
    }
}

/// Compares analytic gradients of `L_r + lambda L_s` against central
/// differences for every parameter of a randomly initialized network, in
/// 64-bit arithmetic.
pub fn check_gradients(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let arch = Architecture::new(cfg.net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random values everywhere, including the normally zero-initialized head.
    let mut params: Vec<f64> = arch.init_params(seed);
    for e in &arch.entries {
        let fan_in: usize = e.shape.iter().skip(1).product::<usize>().max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut params[e.offset..e.offset + e.len] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    let s = cfg.size;
    let c = cfg.net.input_channels();
    let x = Tensor::from_vec(c, s, s, (0..c * s * s).map(|_| rng.gen_range(0.0..1.0)).collect());
    let t = Tensor::from_vec(3, s, s, (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect());
    let mut analytic = vec![0.0f64; arch.num_params];
    patch_loss_and_grad(&arch, &params, &x, &t, cfg.lambda, 1.0, &mut analytic)?;
    let numeric: Vec<f64> = (0..arch.num_params)
        .into_par_iter()
        .map(|i| {
            let mut p = params.clone();
            p[i] = params[i] + cfg.step;
            let up = patch_loss(&arch, &p, &x, &t, cfg.lambda)?.loss;
            p[i] = params[i] - cfg.step;
            let down = patch_loss(&arch, &p, &x, &t, cfg.lambda)?.loss;
            Ok((up - down) / (2.0 * cfg.step))
        })
        .collect::<Result<_>>()?;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = cfg.floor * scale;
    let mut worst = (0.0f64, 0usize);
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for i in 0..arch.num_params {
        let (a, n) = (analytic[i], numeric[i]);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor).max(f64::MIN_POSITIVE);
        if rel > worst.0 {
            worst = (rel, i);
        }
        diff2 += (a - n).powi(2);
        norm2 += n * n;
    }
    let worst_param = arch
        .entries
        .iter()
        .find(|e| (e.offset..e.offset + e.len).contains(&worst.1))
        .map(|e| format!("{}[{}]", e.name, worst.1 - e.offset))
        .unwrap_or_default();
    Ok(GradCheckReport {
        seed,
        params: arch.num_params,
        max_rel_error: worst.0,
        worst_param,
        vector_rel_error: (diff2 / norm2.max(f64::MIN_POSITIVE)).sqrt(),
    })
}
