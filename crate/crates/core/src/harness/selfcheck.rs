//! Fast invariant suite behind the `selfcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::conv::{self, Padding};
use crate::cost::{self, CostBudget};
use crate::error::Result;
use crate::meta_kernel::{roi_of, CandidateSet, KernelShape};
use crate::sampler::{self, NoiseStream, RelaxMode};
use crate::supernet::{self, BlockConfig, NetConfig, Relaxation, SuperNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Zero-pads a centered `[C, 1, h, w]` kernel to `[C, 1, H, W]`.
pub fn embed_kernel(k: &Tensor, meta: KernelShape) -> Result<Tensor> {
    let [c, one, h, w] = k.dims4()?;
    let roi = roi_of(KernelShape(h, w), meta)?;
    let mut out = Tensor::zeros(&[c, one, meta.h(), meta.w()]);
    let (kd, od) = (k.data(), out.data_mut());
    for p in 0..c {
        for y in 0..h {
            for x in 0..w {
                od[p * meta.area() + (roi.top + y) * meta.w() + roi.left + x] = kd[p * h * w + y * w + x];
            }
        }
    }
    Ok(out)
}

/// Largest relative gap between feature-sum and kernel-sum convolution
/// over `trials` random inputs and centered kernel sets.
pub fn additivity_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let c = rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(7..12), rng.gen_range(7..12));
        let stride = rng.gen_range(1..3);
        let x = Tensor::randn(&[2, c, h, w], 1.0, &mut rng);
        let sizes: Vec<usize> = [1, 3, 5, 7].into_iter().filter(|_| rng.gen_bool(0.7)).collect();
        let sizes = if sizes.is_empty() { vec![3] } else { sizes };
        let meta = KernelShape::square(*sizes.iter().max().unwrap());
        let mut feature_sum: Option<Tensor> = None;
        let mut kernel_sum = Tensor::zeros(&[c, 1, meta.h(), meta.w()]);
        for &k in &sizes {
            let wgt = rng.gen_range(0.0..1.0);
            let kern = Tensor::randn(&[c, 1, k, k], 1.0, &mut rng).scale(wgt);
            let f = conv::depthwise_conv2d(&x, &kern, stride, Padding::Same)?;
            feature_sum = Some(match feature_sum {
                None => f,
                Some(acc) => acc.add(&f)?,
            });
            kernel_sum.add_assign(&embed_kernel(&kern, meta)?)?;
        }
        let single = conv::depthwise_conv2d(&x, &kernel_sum, stride, Padding::Same)?;
        worst = worst.max(single.max_rel_diff(&feature_sum.expect("non-empty"), 1.0)?);
    }
    Ok(worst)
}

/// Small two-block supernet used by the structural checks.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        height: 10,
        width: 10,
        num_classes: 3,
        stem_channels: 3,
        blocks: vec![
            BlockConfig {
                out_channels: 3,
                stride: 1,
                expansion: 1,
            },
            BlockConfig {
                out_channels: 4,
                stride: 2,
                expansion: 1,
            },
        ],
        ..NetConfig::default()
    }
}

/// Randomizes every architecture logit of `net` with N(0, std²).
pub fn randomize_alpha(net: &mut SuperNet, std: f64, rng: &mut ChaCha8Rng) {
    for a in net.alphas_mut() {
        *a = Tensor::randn(a.shape(), std, rng);
    }
}

/// Moves every per-channel affine parameter off its initial value. Fresh
/// shifts are exactly zero, which parks ReLU inputs fed by all-zero
/// neighborhoods exactly on the kink.
pub fn perturb_affine(net: &mut SuperNet, std: f64, rng: &mut ChaCha8Rng) {
    let mut affines = vec![&mut net.stem_affine];
    for l in &mut net.layers {
        affines.extend([&mut l.expand_affine, &mut l.dw_affine, &mut l.project_affine]);
    }
    for a in affines {
        for t in [&mut a.scale, &mut a.shift] {
            let noise = Tensor::randn(t.shape(), std, rng);
            t.add_assign(&noise).expect("same shape");
        }
    }
}

fn equivalence(trials: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = tiny_net_config();
    let n = cfg.candidate_set()?.num_candidates();
    let (mut worst, mut counters_ok) = (0.0f64, true);
    for t in 0..trials {
        let mut net = SuperNet::new(cfg.clone(), t as u64)?;
        randomize_alpha(&mut net, 1.0, &mut rng);
        let x = Tensor::randn(&[2, 1, 10, 10], 1.0, &mut rng);
        let relax = Relaxation {
            mode: RelaxMode::Soft,
            tau: 1.0,
            noise: Some(NoiseStream::new(t as u64)),
            step: t,
        };
        let rep = supernet::verify_equivalence(&net, &x, &relax)?;
        worst = worst.max(rep.max_deviation);
        counters_ok &= rep.kernel_sum.iter().all(|c| c.convolutions == 1 && c.feature_maps == 1);
        counters_ok &= rep.feature_sum.iter().all(|c| c.convolutions == n && c.feature_maps == n);
    }
    Ok((
        worst < 1e-10 && counters_ok,
        format!("max deviation {worst:.2e}, counters 1 vs {n}: {counters_ok}"),
    ))
}

/// Central-difference check of the full search loss on `net` w.r.t. every
/// architecture logit and every `stride`-th weight entry. Returns the worst
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn supernet_gradient_error(
    net: &SuperNet,
    images: &Tensor,
    labels: &[usize],
    relax: &Relaxation,
    budget: &CostBudget,
    eps: f64,
    stride: usize,
) -> Result<f64> {
    let model = net.cost_model();
    let loss = |n: &SuperNet| -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars = n.register(&tape, true);
        let x = tape.constant(images.clone());
        let out = supernet::forward_search(&tape, n, &vars, x, relax)?;
        let parts = supernet::total_loss(&tape, out.logits, labels, &out.probs, &model, budget)?;
        let g = tape.backward(parts.total)?;
        Ok((
            tape.value(parts.total).item(),
            vars.weights().into_iter().map(|v| g.wrt(v)).collect(),
            vars.alphas().into_iter().map(|v| g.wrt(v)).collect(),
        ))
    };
    let (_, wg, ag) = loss(net)?;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    let mut visit = |which: bool, t: usize, i: usize, analytic: f64| -> Result<()> {
        let set = |p: &mut SuperNet, v: f64| {
            let mut ts = if which { p.alphas_mut() } else { p.weights_mut() };
            ts[t].data_mut()[i] = v;
        };
        let orig = {
            let ts = if which { probe.alphas_mut() } else { probe.weights_mut() };
            ts[t].data()[i]
        };
        set(&mut probe, orig + eps);
        let up = loss(&probe)?.0;
        set(&mut probe, orig - eps);
        let down = loss(&probe)?.0;
        set(&mut probe, orig);
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
        Ok(())
    };
    for (t, g) in ag.iter().enumerate() {
        for i in 0..g.len() {
            visit(true, t, i, g.data()[i])?;
        }
    }
    for (t, g) in wg.iter().enumerate() {
        for i in (t % stride.max(1)..g.len()).step_by(stride.max(1)) {
            visit(false, t, i, g.data()[i])?;
        }
    }
    Ok(worst)
}

fn gradient() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = tiny_net_config();
    let mut net = SuperNet::new(cfg.clone(), 3)?;
    randomize_alpha(&mut net, 0.5, &mut rng);
    perturb_affine(&mut net, 0.1, &mut rng);
    let x = Tensor::randn(&[2, 1, 10, 10], 1.0, &mut rng);
    let relax = Relaxation {
        mode: RelaxMode::Soft,
        tau: 1.5,
        noise: Some(NoiseStream::new(1)),
        step: 0,
    };
    let budget = CostBudget::new(net.cost_model().max_flops() * 0.3, 0.1, 2.0)?;
    let err = supernet_gradient_error(&net, &x, &[0, 2], &relax, &budget, 1e-5, 7)?;
    Ok((err < 1e-4, format!("max relative error {err:.2e}")))
}

fn band() -> Result<(bool, String)> {
    let budget = CostBudget::new(100.0, 0.1, 2.0)?;
    let tape = Tape::new();
    let e = tape.param(Tensor::scalar(105.0));
    let l = cost::flops_loss(&tape, e, &budget)?;
    let g = tape.backward(l)?.wrt(e).item();
    let inside = tape.value(l).item() == 0.0 && g == 0.0;
    let below = cost::flops_loss_value(50.0, &budget)? == -(50.0f64).ln();
    let above = cost::flops_loss_value(200.0, &budget)? == (200.0f64).ln();
    Ok((inside && below && above, format!("inside {inside}, below {below}, above {above}")))
}

fn gumbel(samples: u64) -> Result<(bool, String)> {
    let logits = [0.3, -1.0, 1.2, 0.0];
    let p = sampler::softmax_probs(&logits);
    let mut counts = [0u64; 4];
    for d in 0..samples {
        counts[sampler::hard_sample_seeded(&logits, 17, d).1] += 1;
    }
    let worst = counts
        .iter()
        .zip(&p)
        .map(|(&c, &pi)| (c as f64 / samples as f64 - pi).abs())
        .fold(0.0, f64::max);
    let cold = sampler::gumbel_probs(&logits, 1e-4, &NoiseStream::new(3).gumbel(0, 0, 4))?;
    let peak = cold.iter().copied().fold(0.0, f64::max);
    Ok((
        worst < 0.015 && peak > 1.0 - 1e-6,
        format!("max frequency gap {worst:.4}, cold peak {peak}"),
    ))
}

fn expected_flops_mc(samples: u64) -> Result<(bool, String)> {
    let model = cost::CostModel {
        layers: (0..2)
            .map(|l| cost::LayerCostSpec {
                out_h: 6 >> l,
                out_w: 6 >> l,
                channels: 3,
                stride: 1,
                areas: CandidateSet::default_square().areas(),
            })
            .collect(),
        fixed: 500.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng)).collect();
    let probs = logits.iter().map(|t| t.softmax(1)).collect::<Result<Vec<_>>>()?;
    let expected = cost::expected_flops_plain(&probs, &model)?;
    let mut total = 0.0;
    for d in 0..samples {
        let arch: Vec<Vec<usize>> = logits
            .iter()
            .enumerate()
            .map(|(l, t)| {
                t.data()
                    .chunks(4)
                    .enumerate()
                    .map(|(r, row)| sampler::hard_sample_seeded(row, 31, d * 64 + (l * 8 + r) as u64).1)
                    .collect()
            })
            .collect();
        total += cost::flops_of_arch(&arch, &model)?;
    }
    let gap = (total / samples as f64 - expected).abs() / expected;
    Ok((gap < 0.02, format!("relative gap {gap:.4}")))
}

/// Runs every check; cheap enough for a fresh build.
pub fn run_selfcheck() -> Vec<CheckResult> {
    vec![
        check("additivity", || {
            let e = additivity_error(20, 1)?;
            Ok((e < 1e-12, format!("max relative deviation {e:.2e}")))
        }),
        check("equivalence", || equivalence(10)),
        check("gradient", gradient),
        check("budget_band", band),
        check("gumbel_statistics", || gumbel(20_000)),
        check("expected_flops", || expected_flops_mc(4_000)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_places_kernel_at_center() {
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let e = embed_kernel(&k, KernelShape::square(3)).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn every_check_passes() {
        for r in run_selfcheck() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
