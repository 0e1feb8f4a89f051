//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Every criterion is evaluated and reported. The process exits 0 so that a
//! workspace test run completes; set `PROXYTTA_ACCEPTANCE_STRICT=1` to turn
//! any FAIL into a non-zero exit.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use proxytta_core::losses::{adapt_loss, local_smoothness, sparse_consistency, supervised_loss};
use proxytta_core::proxy::{cosine_loss, ema_value, pool_features, EmbeddingPair, Head, PairRole};
use proxytta_core::{init_heads, AdaptMethod, DepthMap, Image, LossWeights, ParamGroup, ProxyConfig, ProxyHeads, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT_TOL: f64 = 1e-9;
const COSINE_PAIRS: usize = 10_000;
const REFERENCE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Relative MAE improvement of proxytta_fast over no adaptation. Fixed from a
/// five-seed pilot on the reference setup (mean 9.1%, per-seed 5.0 to 14.3%).
const MIN_IMPROVEMENT: f64 = 0.075;
const MIN_SEED_VOTES: usize = 4;
const MIN_SPREAD_VOTES: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(time: Duration, budget_s: u64) -> bool {
    time <= Duration::from_secs(budget_s)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXACT_TOL
}

fn map(h: usize, w: usize, v: Vec<f64>) -> DepthMap {
    DepthMap::from_values(h, w, v).unwrap()
}

fn pair(p: Vec<f64>, q: Vec<f64>) -> EmbeddingPair {
    let d = p.len();
    EmbeddingPair {
        p: Tensor::from_vec(&[1, d], p),
        q: Tensor::from_vec(&[1, d], q),
        role: PairRole::TargetAdapt,
    }
}

/// Heads whose target tensors hold `target` and online tensors hold `online`.
fn ema_heads(tau: f64, target: f64, online: f64) -> ProxyHeads {
    let config = ProxyConfig {
        embed_dim: 2,
        hidden_dim: 3,
        tau,
    };
    let h = init_heads(4, &config, 0).unwrap();
    let mut tensors: BTreeMap<String, Tensor> = h.tensors().clone();
    for (head, v) in [(Head::Target, target), (Head::Online, online)] {
        for n in head.names() {
            let t = tensors.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
    ProxyHeads::from_tensors(config, 4, tensors, true).unwrap()
}

fn head_values(h: &ProxyHeads, head: Head) -> Vec<f64> {
    h.head_tensors(head).iter().flat_map(|t| t.data().to_vec()).collect()
}

fn loss_suite() -> Outcome {
    let t = Instant::now();
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failed.push(name);
        }
    };

    // Feature pooling.
    let constant = Tensor::from_vec(&[1, 3, 2, 2], vec![3.0; 12]);
    check("pool constant", pool_features(&constant).data().iter().all(|v| close(*v, 3.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = Tensor::from_vec(&[2, 4, 3, 3], (0..72).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let scaled = Tensor::from_vec(&[2, 4, 3, 3], f.data().iter().map(|v| 2.5 * v).collect());
    let (a, b) = (pool_features(&f), pool_features(&scaled));
    check("pool linear", a.data().iter().zip(b.data()).all(|(x, y)| close(2.5 * x, *y)));
    check("pool shape", pool_features(&Tensor::zeros(&[1, 64, 8, 8])).shape() == [1, 64]);

    // Cosine loss.
    check("cos identical", close(cosine_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0));
    check("cos orthogonal", close(cosine_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0));
    check("cos antipodal", close(cosine_loss(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0));
    let mut range_ok = true;
    let mut scale_ok = true;
    for _ in 0..COSINE_PAIRS {
        let d = rng.gen_range(1..16);
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let l = cosine_loss(&p, &q).unwrap();
        range_ok &= (0.0..=2.0).contains(&l);
        let (s, r) = (rng.gen_range(0.01..100.0), rng.gen_range(0.01..100.0));
        let ps: Vec<f64> = p.iter().map(|v| s * v).collect();
        let qs: Vec<f64> = q.iter().map(|v| r * v).collect();
        scale_ok &= close(cosine_loss(&ps, &qs).unwrap(), l);
    }
    check("cos range", range_ok);
    check("cos scale invariance", scale_ok);

    // Target-head moving average.
    let mut h = ema_heads(0.9, 1.0, 0.0);
    h.ema_update();
    check("ema 0.9", close(ema_value(1.0, 0.0, 0.9), 0.9));
    check("ema 0.9 stored", head_values(&h, Head::Target).iter().all(|v| *v == 0.9f32 as f64));
    let mut h = ema_heads(0.0, 1.0, 0.25);
    h.ema_update();
    check("ema copy", head_values(&h, Head::Target) == head_values(&h, Head::Online));
    let mut h = ema_heads(1.0, 1.0, 0.25);
    h.ema_update();
    check("ema frozen", head_values(&h, Head::Target).iter().all(|v| *v == 1.0));

    // Sparse consistency.
    let z = map(1, 6, vec![0.0, 2.0, 3.0, 0.0, 5.0, 0.0]);
    check("lz exact", close(sparse_consistency(&map(1, 6, vec![9.0, 2.0, 3.0, 7.0, 5.0, 1.0]), &z).unwrap(), 0.0));
    check("lz formula", close(sparse_consistency(&map(1, 6, vec![1.0, 2.5, 3.0, 1.0, 4.0, 1.0]), &z).unwrap(), 0.5));
    check("lz empty", sparse_consistency(&map(1, 6, vec![1.0; 6]), &map(1, 6, vec![0.0; 6])).is_err());

    // Local smoothness.
    check("lsm constant", close(local_smoothness(&map(4, 4, vec![2.0; 16]), &Image::constant(4, 4, 0.3)).unwrap(), 0.0));
    let step = map(1, 2, vec![1.0, 3.0]);
    let flat = local_smoothness(&step, &Image::constant(1, 2, 0.5)).unwrap();
    let edge = Image::from_planar(1, 2, vec![0.0, 2f64.ln(), 0.0, 2f64.ln(), 0.0, 2f64.ln()]).unwrap();
    check("lsm edge weight", close(local_smoothness(&step, &edge).unwrap(), flat / 2.0));

    // Proxy consistency and the combined objective.
    use proxytta_core::losses::proxy_consistency;
    check("lproxy equal", close(proxy_consistency(&pair(vec![0.3, -1.0], vec![0.3, -1.0])).unwrap(), 0.0));
    check("lproxy orthogonal", close(proxy_consistency(&pair(vec![1.0, 0.0], vec![0.0, 2.0])).unwrap(), 1.0));
    let pred = map(5, 5, (0..25).map(|i| 1.0 + 0.25 * (i % 5) as f64).collect());
    let mut zv = vec![0.0; 25];
    zv[0] = 1.5;
    let zc = map(5, 5, zv);
    let img = Image::constant(5, 5, 0.5);
    let orth = pair(vec![1.0, 0.0], vec![0.0, 1.0]);
    let only_z = adapt_loss(&pred, &zc, &img, &orth, &LossWeights::new(1.0, 0.0, 0.0)).unwrap();
    check("total lz only", only_z.total == only_z.l_z);
    let r = adapt_loss(&pred, &zc, &img, &orth, &LossWeights::new(1.0, 1.0, 0.2)).unwrap();
    check(
        "total weighted",
        close(r.l_z, 0.5) && close(r.l_sm, 0.2) && close(r.l_proxy, 1.0) && close(r.total, 0.9),
    );

    // Supervised L1.
    let gt = map(1, 4, vec![1.0, 0.0, 2.0, 4.0]);
    check("sup equal", close(supervised_loss(&gt, &gt).unwrap(), 0.0));
    let shifted = map(1, 4, vec![1.1, 0.1, 2.1, 4.1]);
    check("sup offset", close(supervised_loss(&shifted, &gt).unwrap(), 0.1));
    let corrupt = map(1, 4, vec![1.1, 50.0, 2.1, 4.1]);
    check("sup mask", supervised_loss(&corrupt, &gt).unwrap() == supervised_loss(&shifted, &gt).unwrap());

    let elapsed = t.elapsed();
    let pass = failed.is_empty() && within(elapsed, 10);
    outcome(pass, format!("failed {failed:?}, {} random pairs, {:.2}s", COSINE_PAIRS, elapsed.as_secs_f64()))
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    for (name, case) in GRAD_CASES {
        for seed in GRAD_SEEDS {
            let r = case(seed);
            checked += r.checked;
            if r.worst_rel >= worst {
                worst = r.worst_rel;
                worst_at = format!("{name} seed {seed} {}", r.worst_at);
            }
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= GRAD_REL_TOL && within(elapsed, 120),
        format!("{checked} entries, worst rel {worst:.2e} at {worst_at}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn stop_gradient() -> Outcome {
    let t = Instant::now();
    let mut broken = Vec::new();
    for seed in 0..5 {
        for row in stop_gradient_ledger(seed) {
            if !row.holds() {
                broken.push(format!("seed {seed}: {} max {:e} control {:e}", row.claim, row.max_abs, row.control));
            }
        }
    }
    let (adapt_changed, prepare_changed) = partition_audit(0);
    let layer = tiny_adapted_model(0).group_names(ParamGroup::AdaptationLayer);
    let stray: Vec<&String> = adapt_changed.iter().filter(|n| !layer.contains(n)).collect();
    let elapsed = t.elapsed();
    let pass = broken.is_empty() && stray.is_empty() && !adapt_changed.is_empty() && prepare_changed.is_empty();
    outcome(
        pass && within(elapsed, 120),
        format!(
            "4 claims x 5 seeds, broken {broken:?}; adapt changed {} layer tensors, stray {stray:?}; prepare changed {prepare_changed:?}; {:.2}s",
            adapt_changed.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn streaming() -> Outcome {
    let t = Instant::now();
    let audits: Vec<StreamAudit> = [AdaptMethod::ProxyttaFast, AdaptMethod::Proxytta]
        .into_iter()
        .map(|m| audit_stream(5, m))
        .collect();
    let elapsed = t.elapsed();
    let pass = audits.iter().all(StreamAudit::holds) && within(elapsed, 30);
    let a = &audits[0];
    outcome(
        pass,
        format!(
            "{} samples once in order, peak retained {} of batch {}, re-request: {}; {:.2}s",
            a.served_ids.len(),
            audits.iter().map(|a| a.peak_retained).max().unwrap(),
            a.batch_size,
            a.rerequest_error.as_deref().unwrap_or("no error"),
            elapsed.as_secs_f64()
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn reference_criteria(results: &[SeedResult]) -> [Outcome; 4] {
    let sens_time: Duration = results.iter().map(|r| r.sensitivity_time).sum();
    let adapt_time: Duration = results.iter().map(|r| r.adapt_time).sum();

    let target_votes = results.iter().filter(|r| r.target_depth_only < r.target_both).count();
    let source_votes = results.iter().filter(|r| r.held_both <= r.held_depth_only).count();
    let c5 = outcome(
        target_votes >= MIN_SEED_VOTES && source_votes >= MIN_SEED_VOTES && within(sens_time, 600),
        format!(
            "target depth-only < both in {target_votes}/5, source both <= depth-only in {source_votes}/5; {:.0}s",
            sens_time.as_secs_f64()
        ),
    );

    let no_adapt = mean(&results.iter().map(|r| r.no_adapt).collect::<Vec<_>>());
    let fast = mean(&results.iter().map(|r| r.ablation[2]).collect::<Vec<_>>());
    let gain = 1.0 - fast / no_adapt;
    let c6 = outcome(
        fast < no_adapt && gain >= MIN_IMPROVEMENT && within(adapt_time, 900),
        format!(
            "mean MAE no_adapt {no_adapt:.1} mm, proxytta_fast {fast:.1} mm, improvement {:.1}% (need {:.1}%); {:.0}s",
            100.0 * gain,
            100.0 * MIN_IMPROVEMENT,
            adapt_time.as_secs_f64()
        ),
    );

    let rows: Vec<f64> = (0..3).map(|i| mean(&results.iter().map(|r| r.ablation[i]).collect::<Vec<_>>())).collect();
    let monotone = rows[0] >= rows[1] && rows[1] >= rows[2];
    let mut spread_votes = 0;
    let mut spread_detail = Vec::new();
    for (k, name) in SPREAD_SHIFTS.iter().enumerate() {
        let without: Vec<f64> = results.iter().map(|r| r.spread[k].1).collect();
        let with: Vec<f64> = results.iter().map(|r| r.spread[k].2).collect();
        let (sw, sp) = (sample_std(&without), sample_std(&with));
        if sp <= sw {
            spread_votes += 1;
        }
        spread_detail.push(format!("{name} {sp:.1}/{sw:.1}"));
    }
    let c7 = outcome(
        monotone && spread_votes >= MIN_SPREAD_VOTES,
        format!(
            "mean MAE lz {:.1} >= +lsm {:.1} >= +lproxy {:.1}: {monotone}; std with/without lproxy {} -> {spread_votes}/5",
            rows[0],
            rows[1],
            rows[2],
            spread_detail.join(", ")
        ),
    );

    let centroid_votes = results.iter().filter(|r| r.centroid_proxy < r.centroid_both).count();
    let c8 = outcome(
        centroid_votes >= MIN_SEED_VOTES,
        format!(
            "proxy closer in {centroid_votes}/5 seeds (proxy {}, both {})",
            results.iter().map(|r| format!("{:.3}", r.centroid_proxy)).collect::<Vec<_>>().join("/"),
            results.iter().map(|r| format!("{:.3}", r.centroid_both)).collect::<Vec<_>>().join("/"),
        ),
    );
    [c5, c6, c7, c8]
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let cfg = quick_config(3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = end_to_end_metrics(&cfg, a.path(), "run");
    let mb = end_to_end_metrics(&cfg, b.path(), "run");
    let elapsed = t.elapsed();
    outcome(
        ma == mb && !ma.is_empty() && within(elapsed, 900),
        format!("metrics.csv {} bytes, identical: {}; {:.1}s", ma.len(), ma == mb, elapsed.as_secs_f64()),
    )
}

fn report(n: usize, title: &str, o: &Outcome) {
    println!("{} criterion {n} ({title}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut all = Vec::new();
    let mut run = |n: usize, title: &str, o: Outcome| {
        report(n, title, &o);
        all.push(o.pass);
    };
    run(1, "loss unit suite", loss_suite());
    run(2, "gradient oracle", gradient_oracle());
    run(3, "stop-gradient and partition ledger", stop_gradient());
    run(4, "streaming protocol", streaming());

    let results: Vec<SeedResult> = REFERENCE_SEEDS
        .iter()
        .map(|&s| {
            let r = reference_seed(s, true);
            eprintln!(
                "seed {s}: held both/depth {:.1}/{:.1}, target both/depth {:.1}/{:.1}, no_adapt {:.1}, ablation {:.1}/{:.1}/{:.1}",
                r.held_both, r.held_depth_only, r.target_both, r.target_depth_only, r.no_adapt, r.ablation[0], r.ablation[1], r.ablation[2]
            );
            r
        })
        .collect();
    let [c5, c6, c7, c8] = reference_criteria(&results);
    run(5, "sensitivity", c5);
    run(6, "adaptation efficacy", c6);
    run(7, "ablation monotonicity", c7);
    run(8, "centroid analysis", c8);
    run(9, "determinism", determinism());

    let failures = all.iter().filter(|p| !**p).count();
    println!("{} of {} criteria pass", all.len() - failures, all.len());
    if failures > 0 && std::env::var("PROXYTTA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
