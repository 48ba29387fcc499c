//! Acceptance criteria 1 to 9, one PASS/FAIL line each.
//!
//! Run a subset with `cargo test --release --test acceptance -- 3 7`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use scalenet::arch::{build_variant, count_params, factored_vs_joint_weights, receptive_field, Network};
use scalenet::data::{generate_phantom, Sample, StandardScale, Standardizer, PERCENTILES};
use scalenet::eval::{evaluate, wilcoxon_exact, wilcoxon_signed_rank, Pipeline, RegionMap};
use scalenet::layers::ops::{Conv3d, CrossF, CrossM, InstanceNorm, Merge, SoftmaxChannels};
use scalenet::layers::MergeMode;
use scalenet::numerics::{grad_check, Graph, NodeId, Tensor};
use scalenet::training::{load_checkpoint, save_checkpoint, train, SoftDiceLoss, TrainConfig};

type Check = fn() -> Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    check: Check,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "parameter ratio",
            budget: Duration::from_secs(1),
            check: parameter_ratio,
        },
        Criterion {
            id: 2,
            name: "receptive field",
            budget: Duration::from_secs(1),
            check: receptive_fields,
        },
        Criterion {
            id: 3,
            name: "gradient correctness",
            budget: Duration::from_secs(120),
            check: gradients,
        },
        Criterion {
            id: 4,
            name: "identity initialisation",
            budget: Duration::from_secs(10),
            check: identity_initialisation,
        },
        Criterion {
            id: 5,
            name: "overfitting sanity",
            budget: Duration::from_secs(600),
            check: overfitting,
        },
        Criterion {
            id: 6,
            name: "comparative trend",
            budget: Duration::from_secs(3600),
            check: comparative_trend,
        },
        Criterion {
            id: 7,
            name: "wilcoxon",
            budget: Duration::from_secs(60),
            check: wilcoxon,
        },
        Criterion {
            id: 8,
            name: "standardisation fixed point",
            budget: Duration::from_secs(10),
            check: standardisation,
        },
        Criterion {
            id: 9,
            name: "determinism and persistence",
            budget: Duration::from_secs(300),
            check: determinism,
        },
    ];

    // positional arguments select criteria by number; flags from the test runner are ignored
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.check)();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(e) => (false, e),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {} ({}): {} [{:.2}s] {}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn parameter_ratio() -> Result<String, String> {
    let (scalable, classic) = factored_vs_joint_weights(8, 8, 3);
    ensure((scalable, classic) == (27648, 110592), || {
        format!("p=n=8: got {scalable} vs {classic}")
    })?;
    ensure(scalable * 4 == classic, || "ratio at p=n=8 is not 0.25".into())?;
    let sizes = [2, 4, 8, 16];
    for p in sizes {
        for n in sizes {
            let (s, c) = factored_vs_joint_weights(p, n, 3);
            // s / c == (p + n) / (p n), compared without division
            ensure(s * p * n == c * (p + n), || format!("p={p} n={n}: {s} / {c}"))?;
        }
    }
    Ok("27648 / 110592 = 0.25; exact over p, n in {2, 4, 8, 16}".into())
}

fn receptive_fields() -> Result<String, String> {
    for f in [1, 2, 4, 8, 16, 32] {
        for name in ["Classic", "SN31Ave1", "SN31Ave2", "SN31Ave3", "SN31Max2", "HeMIS-like"] {
            let spec = build_variant(name, 4, 6, f).map_err(|e| e.to_string())?;
            let rf = receptive_field(&spec);
            ensure(rf == [87; 3], || format!("{name} at f_width {f}: {rf:?}"))?;
        }
        let rf = receptive_field(&build_variant("SN33Ave2", 4, 6, f).map_err(|e| e.to_string())?);
        ensure(rf == [91; 3], || format!("SN33Ave2 at f_width {f}: {rf:?}"))?;
    }
    Ok("87^3 for six variants, 91^3 for SN33Ave2, f_width 1..32".into())
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Redraws allowed per layer before giving up.
const MAX_DRAWS: usize = 50;

/// Nonzero gradient entries smaller than this fraction of the median magnitude count
/// as near-stationary: the relative metric cannot resolve them at step 1e-5,
/// so such draws are rejected like kinks and ties.
const STATIONARY: f64 = 1e-3;

/// Builds `sum(r * body(params))` for a fixed random `r` (or `body` itself when
/// scalar) over tensors from `draw`, redrawing while any analytic gradient has
/// a near-stationary entry. Returns the worst relative error and the draws used.
fn check_layer(
    rng: &mut ChaCha8Rng,
    draw: impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor)>,
    body: impl Fn(&mut Graph, &[NodeId]) -> scalenet::Result<NodeId>,
) -> Result<(f64, usize), String> {
    let err = |e: scalenet::Error| e.to_string();
    for attempt in 1..=MAX_DRAWS {
        let tensors = draw(rng);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|(name, t)| g.param(name, t.clone()))
            .collect::<scalenet::Result<_>>()
            .map_err(err)?;
        let y = body(&mut g, &ids).map_err(err)?;
        let shape = g.shape(y).to_vec();
        let f = if shape.iter().product::<usize>() == 1 {
            y
        } else {
            let r = g.constant(normal_tensor(&shape, rng));
            let ry = g.mul(r, y).map_err(err)?;
            g.sum(ry).map_err(err)?
        };
        g.output("f", f);
        g.forward_eval(&BTreeMap::new()).map_err(err)?;
        let grads = g.backward(f).map_err(err)?;
        let stationary = grads.values().any(|t| {
            // exact zeros (inactive ReLU or maxout inputs) are checked as they are
            let mut mags: Vec<f64> = t.data().iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
            if mags.is_empty() {
                return false;
            }
            mags.sort_by(f64::total_cmp);
            let median = mags[mags.len() / 2];
            mags[0] < STATIONARY * median
        });
        if stationary {
            continue;
        }
        let mut worst: f64 = 0.0;
        for (name, _) in &tensors {
            let e = grad_check(&mut g, &BTreeMap::new(), name, 1e-5).map_err(err)?;
            if e > 1e-5 {
                eprintln!("{}", worst_entry(&mut g, name));
            }
            worst = worst.max(e);
        }
        return Ok((worst, attempt));
    }
    Err(format!(
        "no draw without near-stationary gradient entries in {MAX_DRAWS} attempts"
    ))
}

/// The entry of `name` with the largest relative error, for diagnostics.
fn worst_entry(g: &mut Graph, name: &str) -> String {
    let out = g.outputs()["f"];
    let none = BTreeMap::new();
    g.forward_eval(&none).expect("evaluated before");
    let analytic = g
        .backward(out)
        .expect("evaluated before")
        .remove(name)
        .expect("parameter");
    let original = g.param_value(name).expect("parameter").clone();
    let mut at = |i: usize, v: f64| {
        let mut p = original.clone();
        p.data_mut()[i] = v;
        g.set_param(name, p).expect("same shape");
        g.forward_eval(&none).expect("evaluated before")["f"].data()[0]
    };
    let mut worst = (0.0, 0, 0.0, 0.0);
    for i in 0..original.numel() {
        let x = original.data()[i];
        let numeric = (at(i, x + 1e-5) - at(i, x - 1e-5)) / 2e-5;
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, i, a, numeric);
        }
    }
    g.set_param(name, original).expect("same shape");
    format!("  {name}[{}]: analytic {:e}, numeric {:e}", worst.1, worst.2, worst.3)
}

fn gradients() -> Result<String, String> {
    const TOL: f64 = 1e-5;
    const S: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rng = &mut rng;
    let mut report = Vec::new();
    let mut record = |name: String, (err, draws): (f64, usize)| -> Result<(), String> {
        ensure(err <= TOL, || format!("{name}: relative error {err:.3e}"))?;
        report.push(format!(
            "{name} {err:.1e}{}",
            if draws > 1 {
                format!(" ({draws} draws)")
            } else {
                String::new()
            }
        ));
        Ok(())
    };
    // two modality branches of two features each
    let branched = |rng: &mut ChaCha8Rng| normal_tensor(&[1, 2, 2, S, S, S], rng);
    let bank = |rng: &mut ChaCha8Rng| {
        vec![
            ("x", normal_tensor(&[1, 2, 2, S, S, S], rng)),
            ("w", normal_tensor(&[2, 2, 2, 3, 3, 3], rng)),
            ("b", normal_tensor(&[2, 2], rng)),
        ]
    };

    for d in [1, 2, 4] {
        let draw = |rng: &mut ChaCha8Rng| {
            vec![
                ("x", normal_tensor(&[1, 2, S, S, S], rng)),
                ("w", normal_tensor(&[2, 2, 3, 3, 3], rng)),
                ("b", normal_tensor(&[2], rng)),
            ]
        };
        record(
            format!("conv3d d{d}"),
            check_layer(rng, draw, |g, i| g.apply(Conv3d { dilation: d }, i))?,
        )?;
    }
    record(
        "cross_f".into(),
        check_layer(rng, bank, |g, i| g.apply(CrossF { dilation: 1 }, i))?,
    )?;
    record(
        "cross_m".into(),
        check_layer(rng, bank, |g, i| g.apply(CrossM { dilation: 1 }, i))?,
    )?;

    for mode in [MergeMode::Average, MergeMode::Maxout, MergeMode::Concat] {
        // continuous draws leave no ties between branches
        let e = check_layer(rng, |r| vec![("x", branched(r))], |g, i| g.apply(Merge(mode), i))?;
        record(format!("merge {}", mode.as_str()), e)?;
    }
    record(
        "norm".into(),
        check_layer(rng, |r| vec![("x", branched(r))], |g, i| g.apply(InstanceNorm, i))?,
    )?;

    // ReLU inputs bounded away from the kink
    let away = |rng: &mut ChaCha8Rng| branched(rng).map(|v| v.signum() * (0.05 + v.abs()));
    record(
        "relu".into(),
        check_layer(rng, |r| vec![("x", away(r))], |g, i| g.relu(i[0]))?,
    )?;

    // residual[relu, cross_f] on the branched map
    let draw = |rng: &mut ChaCha8Rng| {
        let mut t = bank(rng);
        t[0].1 = away(rng);
        t
    };
    let e = check_layer(rng, draw, |g, i| {
        let a = g.relu(i[0])?;
        let c = g.apply(CrossF { dilation: 1 }, &[a, i[1], i[2]])?;
        g.add(i[0], c)
    })?;
    record("residual".into(), e)?;

    let labels: Vec<u8> = (0..S * S * S).map(|_| rng.random_range(0..3u8)).collect();
    let e = check_layer(
        rng,
        |r| vec![("x", normal_tensor(&[1, 3, S, S, S], r))],
        |g, i| {
            let p = g.apply(SoftmaxChannels, i)?;
            SoftDiceLoss::new(labels.clone(), 3)?.record(g, p)
        },
    )?;
    record("softmax + soft Dice".into(), e)?;

    Ok(format!(
        "max relative error <= {TOL:e} at step 1e-5: {}",
        report.join(", ")
    ))
}

fn identity_initialisation() -> Result<String, String> {
    let (n, f, c) = (4, 4, 6);
    let mut sn =
        Network::init(build_variant("SN31Ave1", n, c, f).map_err(|e| e.to_string())?, 1).map_err(|e| e.to_string())?;
    // every weight random except cross-M, so the test does not lean on other zero inits
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (name, t) in sn.params_mut().iter_mut() {
        if name.starts_with("cross_m.") {
            ensure(t.data().iter().all(|&v| v == 0.0), || {
                format!("{name} not zero-initialised")
            })?;
        } else {
            *t = normal_tensor(t.shape(), &mut rng).scale(0.2);
        }
    }
    let hemis_params = sn
        .params()
        .iter()
        .filter(|(k, _)| !k.starts_with("cross_m."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let hemis = Network::from_parts(
        build_variant("HeMIS-like", n, c, f).map_err(|e| e.to_string())?,
        hemis_params,
    )
    .map_err(|e| e.to_string())?;
    let x = normal_tensor(&[1, n, 16, 16, 16], &mut rng);
    let a = sn.forward(&x).map_err(|e| e.to_string())?;
    let b = hemis.forward(&x).map_err(|e| e.to_string())?;
    let same = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    ensure(same, || "SN31Ave1 and HeMIS-like outputs differ".into())?;
    Ok(format!("bitwise equal on {} output values", a.numel()))
}

fn overfitting() -> Result<String, String> {
    let arch = build_variant("SN31Ave1", 4, 6, 8).map_err(|e| e.to_string())?;
    let data: Vec<Sample> = (0..2)
        .map(|s| generate_phantom([32; 3], 4, s))
        .collect::<scalenet::Result<_>>()
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        max_steps: 500,
        eval_every: 10,
        patience: 50,
        augment: false,
        seed: 0,
        target_val_dice: Some(0.95),
        ..Default::default()
    };
    let out = train(arch, &data, &data, &cfg).map_err(|e| e.to_string())?;
    let best = out.checkpoint.best_val;
    ensure(best >= 0.95, || {
        format!("best validation soft Dice {best:.4} after {} steps", out.steps)
    })?;
    Ok(format!(
        "validation soft Dice {best:.4} at step {}",
        out.checkpoint.step
    ))
}

fn comparative_trend() -> Result<String, String> {
    const SIZE: usize = 16;
    const F_WIDTH: usize = 4;
    let mut gaps = Vec::new();
    let (mut sn_total, mut classic_total) = (0.0, 0.0);
    let mut sizes = (0, 0);
    for seed in 0..3u64 {
        let phantoms: Vec<Sample> = (0..20)
            .map(|i| generate_phantom([SIZE; 3], 4, 1000 * (seed + 1) + i))
            .collect::<scalenet::Result<_>>()
            .map_err(|e| e.to_string())?;
        let (train_set, rest) = phantoms.split_at(16);
        let (val_set, test_set) = rest.split_at(2);
        let st = Standardizer::fit(train_set).map_err(|e| e.to_string())?;
        let standardise = |s: &[Sample]| -> Result<Vec<Sample>, String> {
            s.iter().map(|x| st.transform(x).map_err(|e| e.to_string())).collect()
        };
        let (tr, va) = (standardise(train_set)?, standardise(val_set)?);
        let test: Vec<(String, Sample)> = test_set
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("test{i}"), s.clone()))
            .collect();
        let cfg = TrainConfig {
            max_steps: 160,
            eval_every: 20,
            patience: 4,
            seed,
            ..Default::default()
        };
        let mut whole = [0.0; 2];
        for (slot, name) in ["SN31Ave1", "Classic"].into_iter().enumerate() {
            let arch = build_variant(name, 4, 6, F_WIDTH).map_err(|e| e.to_string())?;
            let params = count_params(&arch).map_err(|e| e.to_string())?.total();
            if slot == 0 {
                sizes.0 = params;
            } else {
                sizes.1 = params;
            }
            let out = train(arch, &tr, &va, &cfg).map_err(|e| e.to_string())?;
            let pipeline = Pipeline {
                network: out.checkpoint.network().map_err(|e| e.to_string())?,
                standardizer: Some(st.clone()),
            };
            let report = evaluate(&pipeline, &test, &RegionMap::default()).map_err(|e| e.to_string())?;
            whole[slot] = report.mean("whole").expect("whole region");
        }
        sn_total += whole[0];
        classic_total += whole[1];
        gaps.push(format!("seed {seed}: {:.3} vs {:.3}", whole[0], whole[1]));
    }
    let (sn, classic) = (sn_total / 3.0, classic_total / 3.0);
    ensure(sizes.0 < sizes.1, || {
        format!("SN31Ave1 has {} parameters, Classic {}", sizes.0, sizes.1)
    })?;
    ensure(sn >= classic - 0.02, || {
        format!(
            "whole-tumour Dice {sn:.4} < Classic {classic:.4} - 0.02 ({})",
            gaps.join("; ")
        )
    })?;
    Ok(format!(
        "whole Dice {sn:.4} vs {classic:.4}, {} vs {} parameters ({})",
        sizes.0,
        sizes.1,
        gaps.join("; ")
    ))
}

/// Independent enumeration oracle: all `2^n` sign patterns over average ranks.
fn enumerate_p(d: &[f64]) -> (f64, f64) {
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let rank: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&rank).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..1 << n {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| rank[i]).sum();
        // rank sums are multiples of 0.5, so these comparisons are exact
        if w >= observed {
            ge += 1;
        }
        if w <= observed {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let (ge, le) = (ge as f64 / total, le as f64 / total);
    ((2.0 * ge.min(le)).min(1.0), ge)
}

fn wilcoxon() -> Result<String, String> {
    let r = wilcoxon_signed_rank(&[0.3, 0.1, 0.5, 0.2, 0.4], &[0.0; 5]).map_err(|e| e.to_string())?;
    ensure(r.p_two_sided == 0.0625 && r.p_one_sided == 0.03125, || {
        format!("n=5 all positive: {} / {}", r.p_two_sided, r.p_one_sided)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for n in 5..=12 {
        for trial in 0..40 {
            // coarse values force ties on some trials
            let d: Vec<f64> = (0..n)
                .map(|_| {
                    let v = if trial % 2 == 0 {
                        rng.random_range(1..6) as f64
                    } else {
                        rng.random_range(0.01..1.0)
                    };
                    if rng.random_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let got = wilcoxon_signed_rank(&d, &vec![0.0; n]).map_err(|e| e.to_string())?;
            let want = enumerate_p(&d);
            ensure((got.p_two_sided, got.p_one_sided) == want, || {
                format!("n={n}: {:?} vs oracle {want:?}", (got.p_two_sided, got.p_one_sided))
            })?;
            cases += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d: Vec<f64> = (0..15).map(|_| rng.random_range(-0.6..1.0)).collect();
        let approx = wilcoxon_signed_rank(&d, &[0.0; 15]).map_err(|e| e.to_string())?;
        let exact = wilcoxon_exact(&d, &[0.0; 15]).map_err(|e| e.to_string())?;
        ensure(!approx.exact, || "n=15 should use the normal approximation".into())?;
        let (p, _) = enumerate_p(&d);
        ensure(exact.p_two_sided == p, || {
            "exact enumeration disagrees with oracle at n=15".into()
        })?;
        worst = worst.max((approx.p_two_sided - p).abs());
    }
    ensure(worst <= 0.02, || format!("n=15 normal approximation off by {worst:.4}"))?;
    Ok(format!(
        "n=5 exact; {cases} cases n<=12 equal the oracle; n=15 worst gap {worst:.4}"
    ))
}

fn standardisation() -> Result<String, String> {
    const TOL: f64 = 1e-9;
    let mut worst_fixed: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    for seed in 0..5 {
        let s = generate_phantom([24, 20, 16], 4, seed).map_err(|e| e.to_string())?;
        for m in 0..4 {
            let x = s.channel(m);
            let scale = StandardScale::fit(&[x]).map_err(|e| e.to_string())?;
            let y = scalenet::data::apply_standardisation(x, &scale).map_err(|e| e.to_string())?;
            // over the brain mask: mapped brain voxels may land exactly on 0
            let mut brain: Vec<f64> = x.iter().zip(&y).filter(|(a, _)| **a != 0.0).map(|(_, b)| *b).collect();
            brain.sort_by(f64::total_cmp);
            let last = (brain.len() - 1) as f64;
            let moved = PERCENTILES.map(|q| brain[(q / 100.0 * last).round() as usize]);
            for (a, b) in moved.iter().zip(scale.landmarks()) {
                worst_fixed = worst_fixed.max((a - b).abs());
            }
            for (gain, shift) in [(2.5, 0.3), (0.01, -7.0), (1e3, 40.0)] {
                let t: Vec<f64> = x
                    .iter()
                    .map(|&v| if v == 0.0 { 0.0 } else { gain * v + shift })
                    .collect();
                let z = scalenet::data::apply_standardisation(&t, &scale).map_err(|e| e.to_string())?;
                for (a, b) in y.iter().zip(&z) {
                    worst_affine = worst_affine.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst_fixed <= TOL, || format!("landmark moved by {worst_fixed:e}"))?;
    ensure(worst_affine <= TOL, || {
        format!("affine copy differs by {worst_affine:e}")
    })?;
    Ok(format!(
        "{} landmarks move <= {worst_fixed:.1e}; affine copies differ <= {worst_affine:.1e}",
        PERCENTILES.len()
    ))
}

fn determinism() -> Result<String, String> {
    let arch = build_variant("SN31Ave2", 2, 6, 2).map_err(|e| e.to_string())?;
    let data: Vec<Sample> = (0..3)
        .map(|s| generate_phantom([16; 3], 2, 40 + s))
        .collect::<scalenet::Result<_>>()
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        max_steps: 12,
        eval_every: 4,
        seed: 5,
        ..Default::default()
    };
    let run = || -> Result<Vec<u8>, String> {
        let out = train(arch.clone(), &data[..2], &data[2..], &cfg).map_err(|e| e.to_string())?;
        out.checkpoint.to_bytes().map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || {
        "two runs with the same seed wrote different checkpoints".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.snck");
    let ckpt = scalenet::training::Checkpoint::from_bytes(&a).map_err(|e| e.to_string())?;
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let x = data[2]
        .image()
        .clone()
        .reshape([1, 2, 16, 16, 16])
        .map_err(|e| e.to_string())?;
    let before = ckpt.network().and_then(|n| n.forward(&x)).map_err(|e| e.to_string())?;
    let after = back.network().and_then(|n| n.forward(&x)).map_err(|e| e.to_string())?;
    let same = before
        .data()
        .iter()
        .zip(after.data())
        .all(|(u, v)| u.to_bits() == v.to_bits());
    ensure(same, || "forward output changed across save and load".into())?;
    Ok(format!(
        "identical {}-byte checkpoints; forward bitwise equal after reload",
        a.len()
    ))
}
