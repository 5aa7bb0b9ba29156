//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the verdict lines
//! reach the terminal uncaptured.
//!
//! `FFGAN_ACCEPT_FULL=1` runs the full toy reproduction for criterion 5
//! instead of measuring throughput and projecting its runtime.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ffgan::checkpoint::{self, Checkpoint};
use ffgan::data::{generate_dataset, Dataset};
use ffgan::harness::{ablate, AblationRow, VARIANTS};
use ffgan::train::{pretrain, train};
use ffgan::RunConfig;
use ffgan_core::attention::{SentenceAttention, VisualFeatureMap, WordAttention};
use ffgan_core::fusion::{apply_affine, AffineMode, AffineParams, FfBlock};
use ffgan_core::metrics::{frechet_distance, gaussian_stats, r_precision, GaussianStats, RetrievalPool};
use ffgan_core::objectives::{
    ca_regularizer, ca_regularizer_var, damsm_loss, damsm_loss_var, discriminator_stage_loss_var,
    generator_stage_loss_var, total_generator_loss, LossBreakdown, StageLogits,
};
use ffgan_core::shapes::{plan_dataset, Split, CANVAS};
use ffgan_core::spectral::{spectral_normalize, SpectralState};
use ffgan_core::stages::{forward_pipeline, NoiseVector};
use ffgan_core::testing::{check_input_gradients, check_param_gradients, random_projection};
use ffgan_core::text::{reparameterize, CaNoise, CaParams, WordFeatures};
use ffgan_core::{AttnAxis, Graph, ParamStore, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FULL_VAR: &str = "FFGAN_ACCEPT_FULL";
const BUDGET: Duration = Duration::from_secs(45 * 60);
const SUITE_LIMIT: Duration = Duration::from_secs(120);
const SHARED_EPOCHS: usize = 16;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn words(l: usize, dw: usize, length: usize, seed: u64) -> WordFeatures<f64> {
    let mut values = Tensor::randn(&[l, dw], &mut rng(seed));
    values.data_mut()[length * dw..].iter_mut().for_each(|v| *v = 0.0);
    WordFeatures { values, mask: (0..l).map(|i| i < length).collect() }
}

fn unit(dim: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let v = Tensor::<f64>::randn(&[dim], r).into_data();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gauss(mean: &[f64], cov: &[f64]) -> GaussianStats {
    GaussianStats { mean: mean.to_vec(), cov: cov.to_vec(), count: 10 }
}

fn prop(cases: u32, strategy: impl Strategy<Value = u64>, body: impl Fn(u64) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        PropConfig { cases, failure_persistence: None, ..PropConfig::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner.run(&strategy, body).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn unit_and_property_suite() -> Outcome {
    let start = Instant::now();

    // attention normalization and masked-word zeroing
    prop(64, any::<u64>(), |seed| {
        let l = 1 + (seed % 4) as usize;
        let length = 1 + ((seed >> 8) % l as u64) as usize;
        let (hh, ww) = (1usize << ((seed >> 16) % 3), 1usize << ((seed >> 24) % 2));
        let axis = if seed >> 32 & 1 == 0 { AttnAxis::Words } else { AttnAxis::Regions };
        let mut ps = ParamStore::<f64>::new();
        let attn = WordAttention::new(&mut ps, "w", 3, 4, &mut rng(seed));
        let w = words(l, 3, length, seed ^ 1);
        let h = VisualFeatureMap::new(Tensor::randn(&[4, hh, ww], &mut rng(seed ^ 2)).map(|v| v * 3.0)).unwrap();
        let (ctx, a) = attn.word_context(&ps, &w, &h, axis).unwrap();
        for i in length..l {
            prop_assert!(a.row(i).iter().all(|&v| v == 0.0));
        }
        match axis {
            AttnAxis::Words => {
                for j in 0..hh * ww {
                    prop_assert!(((0..l).map(|i| a.row(i)[j]).sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            AttnAxis::Regions => {
                for i in 0..length {
                    prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        let mut noisy = w.clone();
        noisy.values.data_mut()[length * 3..].iter_mut().for_each(|v| *v = 100.0);
        prop_assert_eq!(attn.word_context(&ps, &noisy, &h, axis).unwrap().0.values, ctx.values);
        Ok(())
    })
    .map_err(|e| format!("attention: {e}"))?;

    // identity affine
    prop(64, any::<u64>(), |seed| {
        let shape = [1 + (seed % 4) as usize, 1usize << ((seed >> 8) % 4), 1usize << ((seed >> 16) % 4)];
        let h = VisualFeatureMap::new(Tensor::<f64>::randn(&shape, &mut rng(seed)).map(|v| v * 1e3)).unwrap();
        prop_assert_eq!(apply_affine(&h, &AffineParams::identity(&shape)).unwrap(), h);
        Ok(())
    })
    .map_err(|e| format!("affine: {e}"))?;
    let mut ps = ParamStore::<f64>::new();
    let block = FfBlock::new(&mut ps, "ff", 3, 4, AffineMode::PerElement, &mut rng(1));
    let h = VisualFeatureMap::new(Tensor::randn(&[4, 4, 4], &mut rng(2))).unwrap();
    check(block.ff_block(&ps, &words(5, 3, 3, 3), &h, AttnAxis::Words).unwrap().0 == h, || "fresh block changes h".into())?;

    // KL closed forms
    let kl = |mu: f64, lv: f64| {
        ca_regularizer(&[CaParams::<f64> {
            mu: Tensor::from_f64(&[1], &[mu]).unwrap(),
            log_var: Tensor::from_f64(&[1], &[lv]).unwrap(),
        }])
        .unwrap()
    };
    let kls = [kl(0.0, 0.0), kl(1.0, 0.0), kl(0.0, 4f64.ln())];
    check(kls[0] == 0.0 && (kls[1] - 0.5).abs() < 1e-12 && (kls[2] - 0.8069).abs() < 1e-4, || format!("KL {kls:?}"))?;

    // Fréchet analytic cases
    let eye = [1., 0., 0., 1.];
    let fd = [
        frechet_distance(&gauss(&[0., 0.], &eye), &gauss(&[0., 0.], &eye)).unwrap(),
        frechet_distance(&gauss(&[0., 0.], &eye), &gauss(&[3., 4.], &eye)).unwrap(),
        frechet_distance(&gauss(&[0., 0.], &[4., 0., 0., 4.]), &gauss(&[0., 0.], &eye)).unwrap(),
    ];
    check(fd[0].abs() < 1e-6 && (fd[1] - 25.0).abs() < 1e-6 && (fd[2] - 2.0).abs() < 1e-6, || format!("Fréchet {fd:?}"))?;

    // spectral norm against the SVD
    for (seed, rows, cols) in [(2, 4, 6), (3, 8, 3), (4, 16, 36)] {
        let w = Tensor::<f64>::randn(&[rows, cols], &mut rng(seed));
        let mut state = SpectralState::new(rows, cols, &mut rng(seed + 1));
        let mut out = w.clone();
        for _ in 0..50 {
            out = spectral_normalize(&w, &mut state);
        }
        let sigma = DMatrix::from_row_slice(rows, cols, out.data()).singular_values().max();
        check((sigma - 1.0).abs() <= 1e-3, || format!("spectral norm leaves sigma {sigma}"))?;
    }

    // loss composition
    prop(128, any::<u64>(), |seed| {
        let v = Tensor::<f64>::uniform(&[10], 1.0, &mut rng(seed)).map(|x| (x + 1.0) * 5.0).into_data();
        let (gen, dis) = ([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
        let (ca, dm, l1, l2) = (v[6] / 2.0, v[7] / 2.0, v[8], v[9] * 10.0);
        let parts = LossBreakdown::new(gen, dis, ca, dm, l1, l2);
        let want = gen[0] + gen[1] + gen[2] + l1 * ca + l2 * dm;
        prop_assert!((parts.total_generator - want).abs() < 1e-9);
        prop_assert!((total_generator_loss(&parts, l1, l2) - want).abs() < 1e-9);
        prop_assert!((parts.total_discriminator - (dis[0] + dis[1] + dis[2])).abs() < 1e-9);
        Ok(())
    })
    .map_err(|e| format!("loss composition: {e}"))?;

    // R-precision: ties count against the query, chance is 1 / pool
    let q = vec![1.0, 0.0, 0.0];
    let tied = RetrievalPool { query: q, matched: vec![vec![0.5, 0.5, 0.]], mismatched: vec![vec![0.5, 0.5, 0.]; 9] };
    check(r_precision(&[tied], 1).unwrap() == 0.0, || "tie scored as a hit".into())?;
    let mut r = rng(7);
    let pools: Vec<RetrievalPool> = (0..10_000)
        .map(|_| RetrievalPool {
            query: unit(16, &mut r),
            matched: vec![unit(16, &mut r)],
            mismatched: (0..99).map(|_| unit(16, &mut r)).collect(),
        })
        .collect();
    let chance = r_precision(&pools, 1).unwrap();
    check((chance - 0.01).abs() <= 0.005, || format!("chance rate {chance}"))?;

    let took = start.elapsed();
    check(took < SUITE_LIMIT, || format!("took {took:.1?}"))?;
    Ok(format!("all checks in {took:.1?}"))
}

// ---------------------------------------------------------------- 2

fn gradient_checks() -> Outcome {
    let (tol, h) = (1e-4, 1e-5);
    let mut worst = 0.0f64;
    let mut record = |name: &str, errs: &[f64]| -> Result<(), String> {
        let m = errs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(m);
        check(m < tol, || format!("{name}: relative error {m:e}"))
    };

    // FF-Block with live affine heads
    let mut ps = ParamStore::new();
    let block = FfBlock::new(&mut ps, "ff", 2, 2, AffineMode::PerElement, &mut rng(12));
    for tag in ["scale1", "shift1"] {
        let id = ps.find(&format!("ff.affine.{tag}.weight")).expect("affine head");
        let shape = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&shape, &mut rng(13)).map(|v| v * 0.3);
    }
    let w = words(3, 2, 2, 14).values.reshape(&[1, 3, 2]).unwrap();
    let mask = [true, true, false];
    let hv = Tensor::randn(&[1, 2, 2, 2], &mut rng(15));
    record(
        "ff_block inputs",
        &check_input_gradients(&[w.clone(), hv.clone()], h, |g, v| {
            let (out, _) = block.forward(g, &ps, v[0], &mask, v[1], AttnAxis::Words);
            random_projection(g, out, 1)
        }),
    )?;
    let errs: Vec<f64> = check_param_gradients(&ps, h, |g, p| {
        let (wv, hh) = (g.constant(w.clone()), g.constant(hv.clone()));
        let (out, _) = block.forward(g, p, wv, &mask, hh, AttnAxis::Words);
        random_projection(g, out, 2)
    })
    .into_iter()
    .map(|(_, e)| e)
    .collect();
    record("ff_block params", &errs)?;

    // word attention, both normalization axes
    let mut ps = ParamStore::<f64>::new();
    let attn = WordAttention::new(&mut ps, "w", 2, 2, &mut rng(18));
    for axis in [AttnAxis::Words, AttnAxis::Regions] {
        record(
            "word attention",
            &check_input_gradients(&[w.clone(), hv.clone()], h, |g, v| {
                let (ctx, _) = attn.forward(g, &ps, v[0], &mask, v[1], axis);
                random_projection(g, ctx, 3)
            }),
        )?;
        let errs: Vec<f64> = check_param_gradients(&ps, h, |g, p| {
            let (wv, hh) = (g.constant(w.clone()), g.constant(hv.clone()));
            let (ctx, _) = attn.forward(g, p, wv, &mask, hh, axis);
            random_projection(g, ctx, 4)
        })
        .into_iter()
        .map(|(_, e)| e)
        .collect();
        record("word attention params", &errs)?;
    }

    // sentence attention
    let mut ps = ParamStore::<f64>::new();
    let sattn = SentenceAttention::new(&mut ps, "s", 3, 2, &mut rng(21));
    let s = Tensor::randn(&[2, 3], &mut rng(22));
    let hs = Tensor::randn(&[2, 2, 2, 2], &mut rng(23));
    record(
        "sentence attention",
        &check_input_gradients(&[s.clone(), hs.clone()], h, |g, v| {
            let (ctx, _) = sattn.forward(g, &ps, v[0], v[1]);
            random_projection(g, ctx, 5)
        }),
    )?;

    // CA reparameterization
    let eps = Tensor::randn(&[1, 4], &mut rng(7));
    record(
        "reparameterization",
        &check_input_gradients(&[Tensor::randn(&[1, 4], &mut rng(5)), Tensor::randn(&[1, 4], &mut rng(6))], h, |g, v| {
            let e = g.constant(eps.clone());
            let out = reparameterize(g, v[0], v[1], Some(e));
            random_projection(g, out, 8)
        }),
    )?;

    // losses
    let logits: Vec<Tensor<f64>> = (0..5).map(|k| Tensor::randn(&[8], &mut rng(30 + k))).collect();
    record("generator loss", &check_input_gradients(&logits[..2], h, |g, v| generator_stage_loss_var(g, v[0], v[1])))?;
    let errs = check_input_gradients(&logits, h, |g, v| {
        let l = StageLogits { real_uncond: v[0], fake_uncond: v[1], real_cond: v[2], fake_cond: v[3], mismatch_cond: Some(v[4]) };
        discriminator_stage_loss_var(g, &l)
    });
    record("discriminator loss", &errs)?;
    let ca = [Tensor::randn(&[2, 4], &mut rng(40)), Tensor::randn(&[2, 4], &mut rng(41))];
    record("CA regularizer", &check_input_gradients(&ca, h, |g, v| ca_regularizer_var(g, v[0], v[1])))?;
    let dm = [Tensor::randn(&[4, 2], &mut rng(50)), Tensor::randn(&[4, 2], &mut rng(51))];
    record("matching loss", &check_input_gradients(&dm, h, |g, v| damsm_loss_var(g, v[0], v[1], 10.0)))?;

    Ok(format!("worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

/// Loop-only attention: `e = U W`, scores `e_i . h_j`, masked softmax along
/// `axis`, context `f_j = sum_i a_ij e_i`.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(u: &[f64], dm: usize, dw: usize, w: &[f64], mask: &[bool], h: &[f64], n: usize, axis: AttnAxis) -> (Vec<f64>, Vec<f64>) {
    let l = mask.len();
    let mut e = vec![0.0; l * dm];
    for i in 0..l {
        for c in 0..dm {
            for k in 0..dw {
                e[i * dm + c] += u[c * dw + k] * w[i * dw + k];
            }
        }
    }
    let mut s = vec![0.0; l * n];
    for i in 0..l {
        for j in 0..n {
            for c in 0..dm {
                s[i * n + j] += e[i * dm + c] * h[c * n + j];
            }
        }
    }
    let mut a = vec![0.0; l * n];
    let softmax = |idx: &[usize], a: &mut [f64]| {
        let max = idx.iter().map(|&k| s[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.iter().map(|&k| (s[k] - max).exp()).sum();
        for &k in idx {
            a[k] = (s[k] - max).exp() / z;
        }
    };
    match axis {
        AttnAxis::Words => {
            for j in 0..n {
                let idx: Vec<usize> = (0..l).filter(|&i| mask[i]).map(|i| i * n + j).collect();
                softmax(&idx, &mut a);
            }
        }
        AttnAxis::Regions => {
            for i in (0..l).filter(|&i| mask[i]) {
                let idx: Vec<usize> = (0..n).map(|j| i * n + j).collect();
                softmax(&idx, &mut a);
            }
        }
    }
    let mut f = vec![0.0; dm * n];
    for c in 0..dm {
        for j in 0..n {
            for i in 0..l {
                f[c * n + j] += a[i * n + j] * e[i * dm + c];
            }
        }
    }
    (f, a)
}

fn damsm_oracle(img: &[f64], txt: &[f64], b: usize, f: usize, gamma: f64) -> f64 {
    let cos = |i: usize, j: usize| {
        let (mut d, mut a, mut t) = (0.0, 0.0, 0.0);
        for k in 0..f {
            d += img[i * f + k] * txt[j * f + k];
            a += img[i * f + k] * img[i * f + k];
            t += txt[j * f + k] * txt[j * f + k];
        }
        gamma * d / (a.sqrt() * t.sqrt())
    };
    let mut loss = 0.0;
    for i in 0..b {
        let (mut row, mut col) = (0.0, 0.0);
        for j in 0..b {
            row += cos(i, j).exp();
            col += cos(j, i).exp();
        }
        loss += 2.0 * -cos(i, i) + row.ln() + col.ln();
    }
    loss / b as f64
}

fn oracle_equivalence() -> Outcome {
    let mut cases = 0;
    let mut worst = 0.0f64;
    for l in 1..=4 {
        for (hh, ww) in [(1, 1), (1, 2), (2, 2), (2, 4), (3, 3)] {
            for length in 1..=l {
                for axis in [AttnAxis::Words, AttnAxis::Regions] {
                    let seed = (l * 100 + hh * 10 + ww + length * 1000) as u64;
                    let (dw, dm) = (3, 5);
                    let mut ps = ParamStore::<f64>::new();
                    let attn = WordAttention::new(&mut ps, "w", dw, dm, &mut rng(seed));
                    let w = words(l, dw, length, seed + 1);
                    let h = Tensor::randn(&[1, dm, hh, ww], &mut rng(seed + 2));
                    let mut g = Graph::new();
                    let wv = g.constant(w.values.clone().reshape(&[1, l, dw]).unwrap());
                    let hv = g.constant(h.clone());
                    let (ctx, weights) = attn.forward(&mut g, &ps, wv, &w.mask, hv, axis);
                    let u = ps.get(attn.projection().weight).data();
                    let (f, a) = attention_oracle(u, dm, dw, w.values.data(), &w.mask, h.data(), hh * ww, axis);
                    let d = max_diff(g.value(ctx).data(), &f).max(max_diff(g.value(weights).data(), &a));
                    worst = worst.max(d);
                    check(d < 1e-6, || format!("attention L={l} N={}: {d:e}", hh * ww))?;
                    cases += 1;
                }
            }
        }
    }
    for (seed, b, f) in [(1, 2, 3), (2, 4, 8), (3, 7, 5), (4, 16, 16)] {
        let img = Tensor::<f64>::randn(&[b, f], &mut rng(seed));
        let txt = Tensor::<f64>::randn(&[b, f], &mut rng(seed + 100));
        let d = (damsm_loss(&img, &txt, 10.0).unwrap() - damsm_oracle(img.data(), txt.data(), b, f, 10.0)).abs();
        check(d < 1e-6, || format!("damsm b={b}: {d:e}"))?;
        cases += 1;
    }
    for (seed, n, f) in [(1, 2, 1), (2, 10, 3), (3, 50, 8), (4, 200, 16)] {
        let x = Tensor::<f64>::randn(&[n, f], &mut rng(seed)).map(|v| v * 2.0 + 0.5);
        let s = gaussian_stats(&x).unwrap();
        let d = x.data();
        let mean: Vec<f64> = (0..f).map(|k| (0..n).map(|i| d[i * f + k]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; f * f];
        for a in 0..f {
            for b in 0..f {
                cov[a * f + b] = (0..n).map(|i| (d[i * f + a] - mean[a]) * (d[i * f + b] - mean[b])).sum::<f64>() / (n - 1) as f64;
            }
        }
        let e = max_diff(&s.mean, &mean).max(max_diff(&s.cov, &cov));
        check(e < 1e-9, || format!("gaussian_stats n={n} f={f}: {e:e}"))?;
        cases += 1;
    }
    Ok(format!("{cases} instances, worst attention deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- shared fixtures

struct Fixture {
    root: PathBuf,
    base: RunConfig,
    data: Dataset,
}

fn config(root: &Path, n: usize, sets: &[String]) -> RunConfig {
    let mut all = vec![
        format!("data.dir={}", root.join("data").display()),
        format!("out_dir={}", root.join("run").display()),
        format!("data.n={n}"),
    ];
    all.extend_from_slice(sets);
    RunConfig::load(None, &all).expect("acceptance config")
}

fn fixture(root: &Path) -> Fixture {
    let base = config(root, 600, &[format!("train.epochs={SHARED_EPOCHS}")]);
    let data = generate_dataset(base.data.n, base.data.seed, &base.data.dir).expect("dataset");
    pretrain(&base, &data).expect("pretraining");
    Fixture { root: root.to_path_buf(), base, data }
}

fn derived(fx: &Fixture, sub: &str, edit: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = fx.base.clone();
    c.pretrain.dir = fx.base.pretrain_dir();
    c.out_dir = fx.root.join(sub);
    edit(&mut c);
    c
}

// ---------------------------------------------------------------- 4

fn determinism(fx: &Fixture) -> Outcome {
    let mut csvs = Vec::new();
    for sub in ["det_a", "det_b"] {
        let c = derived(fx, sub, |c| c.train.max_steps = 100);
        let out = train(&c, &fx.data).map_err(|e| e.to_string())?;
        check(out.steps == 100, || format!("{sub} stopped after {} steps", out.steps))?;
        csvs.push(fs::read(c.loss_csv()).map_err(|e| e.to_string())?);
    }
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count() - 1;
    check(rows >= 100, || format!("only {rows} rows"))?;
    check(csvs[0] == csvs[1], || "loss CSVs differ".into())?;
    Ok(format!("{rows} steps, {} identical bytes", csvs[0].len()))
}

// ---------------------------------------------------------------- 5

const ABLATED: [&str; 3] = ["baseline", "ff_block", "full"];

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn medians(rows: &[AblationRow], variant: &str) -> (f64, f64) {
    let of = |f: fn(&AblationRow) -> f64| median(rows.iter().filter(|r| r.variant == variant).map(f).collect());
    (of(|r| r.report.r_precision.mean), of(|r| r.report.fid.mean))
}

/// Returns the verdict and, for a full run, the seed-0 `full` checkpoint
/// with its dataset.
fn toy_reproduction(fx: &Fixture, trained: &mut Option<(PathBuf, Dataset)>) -> Outcome {
    let seeds = [0u64, 1, 2];
    let variants: Vec<_> = VARIANTS.iter().copied().filter(|v| ABLATED.contains(&v.0)).collect();
    if std::env::var_os(FULL_VAR).is_none() {
        // one run at the protocol's model and batch size, timed per step
        let probe = 20;
        let c = derived(fx, "probe", |c| c.train.max_steps = probe);
        let start = Instant::now();
        train(&c, &fx.data).map_err(|e| e.to_string())?;
        let per_step = start.elapsed().as_secs_f64() / probe as f64;
        let protocol = RunConfig::default();
        let planned = plan_dataset(protocol.data.n, protocol.data.seed).map_err(|e| e.to_string())?;
        let n_train = planned.iter().filter(|r| r.split == Split::Train).count();
        let steps = (n_train / protocol.train.batch_size) * protocol.train.epochs * variants.len() * seeds.len();
        let projected = Duration::from_secs_f64(per_step * steps as f64);
        return Err(format!(
            "{} runs need {steps} steps at {:.0} ms/step ({:.0} samples/s): projected {:.0} min of training alone, budget {} min \
             (set {FULL_VAR}=1 to run the full protocol anyway)",
            variants.len() * seeds.len(),
            per_step * 1e3,
            protocol.train.batch_size as f64 / per_step,
            projected.as_secs_f64() / 60.0,
            BUDGET.as_secs() / 60
        ));
    }

    let start = Instant::now();
    let root = fx.root.join("full");
    let base = config(&root, RunConfig::default().data.n, &[]);
    let data = generate_dataset(base.data.n, base.data.seed, &base.data.dir).map_err(|e| e.to_string())?;
    let rows = ablate(&base, &data, &variants, &seeds).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    if let Some(r) = rows.iter().find(|r| r.variant == "full" && r.seed == seeds[0]) {
        *trained = Some((PathBuf::from(&r.report.checkpoint), data));
    }
    let (rp_base, fid_base) = medians(&rows, "baseline");
    let (rp_ff, _) = medians(&rows, "ff_block");
    let (rp_full, fid_full) = medians(&rows, "full");
    let summary = format!(
        "R-precision baseline {rp_base:.3} / ff_block {rp_ff:.3} / full {rp_full:.3}, FID baseline {fid_base:.3} / full {fid_full:.3}, {:.1} min",
        took.as_secs_f64() / 60.0
    );
    check(took <= BUDGET, || format!("over budget: {summary}"))?;
    check(rp_full >= 0.5, || format!("full below 0.5: {summary}"))?;
    check(rp_ff - rp_base >= 0.05 && rp_full - rp_base >= 0.05, || format!("ordering margin below 0.05: {summary}"))?;
    check(fid_full <= 0.9 * fid_base, || format!("FID gain below 10%: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 6 and 7

struct Probe {
    /// Mean stage-2 attention on the shape-color word, inside and outside the shape.
    grounding: Vec<(f64, f64)>,
    /// Mean per-pixel RGB distance to the real image for stage 0 and stage 2.
    distance: Vec<(f64, f64)>,
}

fn nearest_upsample(t: &Tensor<f32>, size: usize) -> Vec<f64> {
    let (c, r) = (t.dim(0), t.dim(1));
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                out.push(d[ch * r * r + (y * r / size) * r + x * r / size] as f64);
            }
        }
    }
    out
}

fn pixel_l2(a: &[f64], b: &[f64], size: usize) -> f64 {
    let n = size * size;
    (0..n).map(|p| (0..3).map(|c| (a[c * n + p] - b[c * n + p]).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / n as f64
}

fn probe_test_set(ck: &Checkpoint, data: &Dataset) -> Result<Probe, String> {
    let m = &ck.nets.config;
    let test = data.ids(Split::Test);
    let test = &test[..test.len().min(100)];
    let real = data.load_batch::<f32>(test, CANVAS, m.max_len).map_err(|e| e.to_string())?;
    let mut probe = Probe { grounding: Vec::new(), distance: Vec::new() };
    let mut r = rng(2024);
    for (k, sample) in real.iter().enumerate() {
        let record = &data.records[sample.id];
        let caption = &sample.captions[k % 2];
        let tokens = &record.captions[k % 2];
        let z = NoiseVector::sample(m.noise_dim, &mut r);
        let noise = CaNoise::Sample(Tensor::randn(&[m.ca_dim], &mut r));
        let out = forward_pipeline(&ck.nets.text, &ck.params.text, &ck.nets.generator, &ck.params.generator, caption, &z, &noise)
            .map_err(|e| e.to_string())?;

        let weights = &out.attention[1];
        let word = tokens.iter().position(|t| t == record.spec.color().word()).ok_or("caption lacks its color")?;
        if weights.height != weights.width {
            return Err(format!("non-square attention grid {}x{}", weights.height, weights.width));
        }
        let mask = &data.load_batch::<f32>(&[sample.id], weights.height, m.max_len).map_err(|e| e.to_string())?[0].mask;
        let row = weights.row(word);
        let mean = |inside: bool| {
            let v: Vec<f64> = row.iter().zip(mask).filter(|(_, &m)| m == inside).map(|(&a, _)| a as f64).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        probe.grounding.push((mean(true), mean(false)));

        let truth: Vec<f64> = sample.image.data().iter().map(|&v| v as f64).collect();
        let first = nearest_upsample(&out.stages[0].image, CANVAS);
        let last = nearest_upsample(&out.stages[2].image, CANVAS);
        probe.distance.push((pixel_l2(&first, &truth, CANVAS), pixel_l2(&last, &truth, CANVAS)));
    }
    Ok(probe)
}

fn attention_grounding(p: &Probe) -> Outcome {
    let hits = p.grounding.iter().filter(|(i, o)| i > o).count();
    let rate = hits as f64 / p.grounding.len() as f64;
    let msg = format!("{hits}/{} captions attend inside the shape ({:.0}%)", p.grounding.len(), rate * 100.0);
    check(p.grounding.len() >= 100 && rate >= 0.7, || msg.clone())?;
    Ok(msg)
}

fn stage_progression(p: &Probe) -> Outcome {
    let n = p.distance.len() as f64;
    let first = p.distance.iter().map(|d| d.0).sum::<f64>() / n;
    let last = p.distance.iter().map(|d| d.1).sum::<f64>() / n;
    let msg = format!("mean per-pixel L2 stage 0 {first:.4} vs stage 2 {last:.4} over {n} test images");
    check(first > last, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- driver

fn report(index: usize, name: &str, outcome: &Outcome, took: Duration) {
    let (verdict, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {index} [{name}]: {verdict} - {detail} ({:.1}s)", took.as_secs_f64()).unwrap();
    out.flush().unwrap();
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn main() {
    // libtest-style flags such as --list or a filter are ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();
    let mut run = |index: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let (o, took) = timed(f);
        report(index, name, &o, took);
        results.push(o.is_ok());
    };
    run(1, "unit and property suite", &mut unit_and_property_suite);
    run(2, "gradient checks", &mut gradient_checks);
    run(3, "loop-oracle equivalence", &mut oracle_equivalence);

    let fx = fixture(dir.path());
    run(4, "determinism", &mut || determinism(&fx));
    let mut full_model = None;
    run(5, "toy reproduction", &mut || toy_reproduction(&fx, &mut full_model));

    // a full run supplies its model; otherwise a short run on the fixture
    let start = Instant::now();
    let probe = match &full_model {
        Some((ck, data)) => checkpoint::load(ck).map_err(|e| e.to_string()).and_then(|ck| probe_test_set(&ck, data)),
        None => train(&fx.base, &fx.data)
            .and_then(|o| checkpoint::load(&o.checkpoint))
            .map_err(|e| e.to_string())
            .and_then(|ck| probe_test_set(&ck, &fx.data)),
    };
    let setup = start.elapsed();
    for (index, name, f) in [
        (6, "attention grounding", attention_grounding as fn(&Probe) -> Outcome),
        (7, "stage progression", stage_progression),
    ] {
        let o = probe.as_ref().map_err(Clone::clone).and_then(f);
        report(index, name, &o, setup);
        results.push(o.is_ok());
    }

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
