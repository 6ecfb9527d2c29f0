//! Finite-difference checks of every differentiable primitive over many seeds.
//! Shared by the unit test target and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_core::engine::{
    batchnorm_apply, grad_check, BnLayerState, BnMode, Resample, SpectralCombine, Tape, Var,
};
use sfda_core::pipeline::{statistic_alignment_loss, BnLayers, CombineOp, Prompt, PromptSpace};
use sfda_core::segnet::{SegModel, SegModelConfig};
use sfda_core::{Result, Tensor};

pub const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
/// Central differences are exact for maps linear in the probed argument, so
/// a wide step there only lowers rounding noise.
const LINEAR_STEP: f64 = 1e-3;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(out * r)` for a fixed random `r` with `0.5 <= |r| <= 1`, so every
/// output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::from_fn(tape.shape(out), |_| {
        let m = rng.random_range(0.5..=1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn check_with<F>(name: &str, seed: u64, x: &Tensor, step: f64, f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let err = grad_check(f, x, step).unwrap();
    assert!(err <= TOL, "{name}, seed {seed}: relative error {err:e}");
}

fn check<F>(name: &str, seed: u64, x: &Tensor, f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_with(name, seed, x, STEP, f);
}

fn check_linear<F>(name: &str, seed: u64, x: &Tensor, f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_with(name, seed, x, LINEAR_STEP, f);
}

pub fn conv2d_all_inputs() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (stride, pad, k) in [(1, 1, 3), (2, 0, 3), (1, 0, 1), (2, 1, 3)] {
            let x = random(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
            let kern = random(&mut rng, &[4, 3, k, k], -0.5, 0.5);
            let bias = random(&mut rng, &[4], -0.5, 0.5);
            let name = format!("conv2d s{stride} p{pad} k{k}");
            check(&format!("{name} input"), seed, &x, |t, v| {
                let kv = t.constant(kern.clone());
                let bv = t.constant(bias.clone());
                let y = t.conv2d(v, kv, bv, stride, pad)?;
                project(t, y, seed)
            });
            check(&format!("{name} kernel"), seed, &kern, |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(bias.clone());
                let y = t.conv2d(xv, v, bv, stride, pad)?;
                project(t, y, seed)
            });
            check(&format!("{name} bias"), seed, &bias, |t, v| {
                let xv = t.constant(x.clone());
                let kv = t.constant(kern.clone());
                let y = t.conv2d(xv, kv, v, stride, pad)?;
                project(t, y, seed)
            });
        }
    }
}

/// Output and both batch statistics enter the loss.
fn bn_loss(t: &mut Tape, x: Var, scale: Var, shift: Var, mode: BnMode, seed: u64) -> Result<Var> {
    let layer = BnLayerState::new(t.shape(x)[1]);
    let (y, stats) = batchnorm_apply(t, x, &layer, scale, shift, mode)?;
    let a = project(t, y, seed)?;
    let b = project(t, stats.mean, seed + 1)?;
    let c = project(t, stats.std, seed + 2)?;
    let ab = t.add(a, b)?;
    t.add(ab, c)
}

pub fn batchnorm_batch_statistics_paths() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 2, 4, 4], -2.0, 2.0);
        let scale = random(&mut rng, &[2], 0.5, 1.5);
        let shift = random(&mut rng, &[2], -0.5, 0.5);
        for mode in [BnMode::Train, BnMode::StatCollect] {
            check(&format!("batchnorm {mode:?} input"), seed, &x, |t, v| {
                let s = t.constant(scale.clone());
                let b = t.constant(shift.clone());
                bn_loss(t, v, s, b, mode, seed)
            });
            check(&format!("batchnorm {mode:?} scale"), seed, &scale, |t, v| {
                let xv = t.constant(x.clone());
                let b = t.constant(shift.clone());
                bn_loss(t, xv, v, b, mode, seed)
            });
            check(&format!("batchnorm {mode:?} shift"), seed, &shift, |t, v| {
                let xv = t.constant(x.clone());
                let s = t.constant(scale.clone());
                bn_loss(t, xv, s, v, mode, seed)
            });
        }
    }
}

pub fn activations() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep ReLU inputs away from the kink.
        let x = Tensor::from_fn(&[2, 3, 4], |_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        check("relu", seed, &x, |t, v| {
            let y = t.relu(v);
            project(t, y, seed)
        });
        let x = random(&mut rng, &[2, 3, 4], -4.0, 4.0);
        check("sigmoid", seed, &x, |t, v| {
            let y = t.sigmoid(v);
            project(t, y, seed)
        });
    }
}

pub fn resampling() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 2, 6, 4], -1.0, 1.0);
        for kind in [Resample::Down2Avg, Resample::Up2Nearest] {
            check(&format!("{kind:?}"), seed, &x, |t, v| {
                let y = t.resample(v, kind)?;
                project(t, y, seed)
            });
        }
        let other = random(&mut rng, &[2, 3, 6, 4], -1.0, 1.0);
        check("concat_channels", seed, &x, |t, v| {
            let o = t.constant(other.clone());
            let y = t.concat_channels(o, v)?;
            project(t, y, seed)
        });
    }
}

pub fn distances_and_cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 5], -1.0, 1.0);
        // Offsets bounded away from zero keep |a - b| differentiable.
        let b = Tensor::from_fn(a.shape(), |i| {
            let d = rng.random_range(0.05..1.0);
            a.data()[i] + if rng.random_bool(0.5) { d } else { -d }
        });
        check("l1_distance first", seed, &a, |t, v| {
            let bv = t.constant(b.clone());
            t.l1_distance(v, bv)
        });
        check("l1_distance second", seed, &b, |t, v| {
            let av = t.constant(a.clone());
            t.l1_distance(av, v)
        });
        let p = random(&mut rng, &[2, 2, 3, 3], 0.05, 0.95);
        let y = Tensor::from_fn(p.shape(), |_| f64::from(u8::from(rng.random_bool(0.5))));
        check("binary_cross_entropy", seed, &p, |t, v| {
            let yv = t.constant(y.clone());
            t.binary_cross_entropy(v, yv)
        });
    }
}

pub fn elementwise_and_broadcast() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
        let o = random(&mut rng, &[1, 4, 4], -1.0, 1.0);
        check("add/mul/scale/mean", seed, &x, |t, v| {
            let c = t.constant(x.clone());
            let s = t.add(v, c)?;
            let m = t.mul(s, v)?;
            let k = t.scale(m, 0.7);
            let a = project(t, k, seed)?;
            let mean = t.mean(v);
            t.add(a, mean)
        });
        check("broadcast_add offset", seed, &o, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.broadcast_add(xv, v)?;
            let y = t.mul(y, y)?;
            project(t, y, seed)
        });
        check("broadcast_mul factor", seed, &o, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.broadcast_mul(xv, v)?;
            project(t, y, seed)
        });
        check("broadcast_mul batch", seed, &x, |t, v| {
            let ov = t.constant(o.clone());
            let y = t.broadcast_mul(v, ov)?;
            project(t, y, seed)
        });
    }
}

pub fn spectral_offsets() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
        for (combine, lo, hi) in [(SpectralCombine::Add, -0.3, 0.3), (SpectralCombine::Mul, 0.7, 1.3)] {
            let o = random(&mut rng, &[1, 8, 8], lo, hi);
            check_linear(&format!("spectral_offset {combine:?}"), seed, &o, |t, v| {
                let xv = t.constant(x.clone());
                let y = t.spectral_offset(xv, v, combine)?;
                project(t, y, seed)
            });
        }
    }
}

pub fn alignment_loss_prompt_gradient_through_network() {
    let config = SegModelConfig {
        in_channels: 1,
        base_channels: 2,
        depth: 2,
        num_classes: 2,
    };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = SegModel::build(config, seed).unwrap();
        for layer in model.layers_mut() {
            for m in &mut layer.bn.running_mean {
                *m = rng.random_range(-0.5..0.5);
            }
            for s in &mut layer.bn.running_std {
                *s = rng.random_range(0.3..1.5);
            }
        }
        let stored = model.bn_layer_states();
        let x = random(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
        let combine = if seed % 2 == 0 { CombineOp::Add } else { CombineOp::Mul };
        let space = if seed % 4 < 2 { PromptSpace::Spatial } else { PromptSpace::Frequency };
        let base = if combine == CombineOp::Mul { 1.0 } else { 0.0 };
        let p0 = Tensor::from_fn(&[1, 8, 8], |_| base + rng.random_range(-0.05..0.05));
        let prompt = Prompt::identity(&[1, 8, 8], combine, space).unwrap();
        let layers = if seed % 3 == 0 { BnLayers::First(2) } else { BnLayers::All };
        check(&format!("alignment loss {combine:?}/{space:?}"), seed, &p0, |t, p| {
            let xv = t.constant(x.clone());
            let altered = prompt.apply_on_tape(t, xv, p)?;
            let pass = model.forward_frozen(t, altered, BnMode::StatCollect, false)?;
            statistic_alignment_loss(t, &stored, &pass.stats, 0.01, layers)
        });
    }
}

/// Every check with its name, in a fixed order.
pub const ALL: [(&str, fn()); 8] = [
    ("conv2d", conv2d_all_inputs),
    ("batchnorm", batchnorm_batch_statistics_paths),
    ("activations", activations),
    ("resample", resampling),
    ("l1/bce", distances_and_cross_entropy),
    ("elementwise", elementwise_and_broadcast),
    ("spectral_offset", spectral_offsets),
    ("alignment prompt gradient", alignment_loss_prompt_gradient_through_network),
];
