//! Oracles and property checks shared by the property-test target and the
//! acceptance runner.
#![allow(dead_code)]

use hermes_core::agent::{normalize_reward, Action};
use hermes_core::env5g::{Application, Environment, RadioConfig, RbgStatus};
use hermes_core::metrics::{cue, jfi, MetricsWindow};
use hermes_core::nnet::{td_gradient, td_loss, Experience, QNetwork};
use hermes_core::shuffle::{
    km_matching, maximin_matching, model_distance, normalize_model, shuffle_round, MatchingStrategy,
    MlaTable, ModelUpload, PreferenceMatrix,
};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- brute force

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                go(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// `(max sum, max bottleneck)` over all permutations. Sums are accumulated
/// in row order, like `Matching::total`.
pub fn brute_force(e: &PreferenceMatrix) -> (f64, f64) {
    let n = e.size();
    let mut best_sum = f64::NEG_INFINITY;
    let mut best_min = f64::NEG_INFINITY;
    for p in permutations(n) {
        let sum = (0..n).fold(0.0, |acc, i| acc + e.get(i, p[i]));
        let min = (0..n).map(|i| e.get(i, p[i])).fold(f64::INFINITY, f64::min);
        best_sum = best_sum.max(sum);
        best_min = best_min.max(min);
    }
    (best_sum, best_min)
}

/// Matrix with small integer entries (many ties) or continuous entries.
pub fn random_matrix(n: usize, r: &mut ChaCha8Rng) -> PreferenceMatrix {
    let integer = r.gen_bool(0.5);
    PreferenceMatrix::from_fn(n, |_, _| {
        if integer {
            f64::from(r.gen_range(-4i32..=4))
        } else {
            r.gen_range(-10.0..10.0)
        }
    })
}

// ------------------------------------------------------- finite differences

fn perturbed_loss(
    model: &QNetwork,
    target: &QNetwork,
    batch: &[Experience],
    gamma: f64,
    tensor: usize,
    idx: usize,
    delta: f64,
) -> f64 {
    let mut m = model.clone();
    match tensor {
        0 => m.w1[idx] += delta,
        1 => m.b1[idx] += delta,
        2 => m.w2[idx] += delta,
        _ => m.b2[idx] += delta,
    }
    td_loss(&m, target, batch, gamma).expect("valid batch")
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for components whose true value is ~0, where central
/// differences are dominated by rounding (~1e-16 / FD_STEP).
pub const FD_DENOM_FLOOR: f64 = 1e-6;

/// Random model and batch; returns the worst relative error over all
/// parameters between the analytic gradient and central differences.
pub fn gradient_check_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.gen_range(1..=7);
    let l = r.gen_range(1..=8);
    let m = r.gen_range(1..=4);
    let model = QNetwork::random(d, l, m, &mut r);
    let target = QNetwork::random(d, l, m, &mut r);
    let gamma = if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..0.99) };
    let batch: Vec<Experience> = (0..r.gen_range(1..=6))
        .map(|_| Experience {
            state: (0..d).map(|_| r.gen_range(-1.0..1.0)).collect(),
            action: r.gen_range(0..=m),
            reward: r.gen_range(-0.5..1.0),
            next_state: (0..d).map(|_| r.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let g = td_gradient(&model, &target, &batch, gamma).expect("valid batch");
    let tensors = [&g.w1, &g.b1, &g.w2, &g.b2];
    let mut worst: f64 = 0.0;
    for (t, analytic) in tensors.iter().enumerate() {
        for (i, &a) in analytic.iter().enumerate() {
            let plus = perturbed_loss(&model, &target, &batch, gamma, t, i, FD_STEP);
            let minus = perturbed_loss(&model, &target, &batch, gamma, t, i, -FD_STEP);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_DENOM_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

// ----------------------------------------------------------------- strategies

pub fn arb_model() -> impl Strategy<Value = QNetwork> {
    (1usize..6, 1usize..6, 1usize..4, any::<u64>(), 0.1f64..5.0).prop_map(|(d, l, m, seed, scale)| {
        let mut net = QNetwork::random(d, l, m, &mut rng(seed));
        for v in net.w2.iter_mut().chain(net.b2.iter_mut()) {
            *v *= scale;
        }
        net
    })
}

/// Three models with identical shapes.
pub fn arb_model_triple() -> impl Strategy<Value = [QNetwork; 3]> {
    (1usize..5, 1usize..5, 1usize..4, any::<u64>()).prop_map(|(d, l, m, seed)| {
        let mut r = rng(seed);
        [
            QNetwork::random(d, l, m, &mut r),
            QNetwork::random(d, l, m, &mut r),
            QNetwork::random(d, l, m, &mut r),
        ]
    })
}

pub fn arb_matrix() -> impl Strategy<Value = PreferenceMatrix> {
    (1usize..=6).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(-20i32..20, n), n).prop_map(|rows| {
            PreferenceMatrix::from_rows(
                rows.into_iter()
                    .map(|r| r.into_iter().map(|v| f64::from(v) * 0.5).collect())
                    .collect(),
            )
            .expect("square")
        })
    })
}

pub fn arb_statuses() -> impl Strategy<Value = Vec<Vec<RbgStatus>>> {
    let status = prop_oneof![
        Just(RbgStatus::Idle),
        Just(RbgStatus::Utilized),
        Just(RbgStatus::Collided),
        Just(RbgStatus::Inactive),
    ];
    (1usize..5).prop_flat_map(move |m| prop::collection::vec(prop::collection::vec(status.clone(), m), 1..40))
}

// ------------------------------------------------------------------ properties

pub fn prop_normalize_idempotent_and_argmax(model: &QNetwork, xs: &[f64]) -> Result<(), TestCaseError> {
    let n = normalize_model(model);
    prop_assert!(normalize_model(&n).params().zip(n.params()).all(|(a, b)| (a - b).abs() <= 1e-12));
    prop_assert_eq!(&n.w1, &model.w1);
    prop_assert_eq!(&n.b1, &model.b1);
    let x: Vec<f64> = (0..model.input_dim()).map(|i| xs[i % xs.len()]).collect();
    let h = model.hidden_activation(&x);
    let raw = model.last_layer(&h);
    let norm = n.last_layer(&h);
    // Normalization subtracts the same amount from every action value.
    let shift = raw[0] - norm[0];
    for (a, b) in raw.iter().zip(&norm) {
        prop_assert!((a - b - shift).abs() <= 1e-9 * (1.0 + a.abs()));
    }
    let best = hermes_core::agent::argmax(&raw);
    let gap = raw
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, v)| raw[best] - v)
        .fold(f64::INFINITY, f64::min);
    if gap > 1e-9 {
        prop_assert_eq!(hermes_core::agent::argmax(&norm), best);
    }
    Ok(())
}

pub fn prop_md_pseudometric(m: &[QNetwork; 3]) -> Result<(), TestCaseError> {
    let md = |a: &QNetwork, b: &QNetwork| model_distance(a, b).expect("same shape");
    let (ab, ba) = (md(&m[0], &m[1]), md(&m[1], &m[0]));
    prop_assert!(ab >= 0.0);
    prop_assert_eq!(ab, ba);
    prop_assert_eq!(md(&m[0], &m[0]), 0.0);
    let (bc, ac) = (md(&m[1], &m[2]), md(&m[0], &m[2]));
    prop_assert!(ac.sqrt() <= ab.sqrt() + bc.sqrt() + 1e-12);
    Ok(())
}

pub fn prop_matching_dominance(e: &PreferenceMatrix) -> Result<(), TestCaseError> {
    let km = km_matching(e);
    let mm = maximin_matching(e);
    prop_assert!(km.is_permutation());
    prop_assert!(mm.is_permutation());
    prop_assert!(mm.bottleneck(e) >= km.bottleneck(e));
    prop_assert!(km.total(e) >= mm.total(e) - 1e-9);
    Ok(())
}

pub fn prop_shuffle_bijection(models: &[QNetwork; 3], rounds: usize, lambda: f64, km: bool) -> Result<(), TestCaseError> {
    let mut table = MlaTable::new(3);
    let mut holding: Vec<usize> = vec![0, 1, 2];
    let strategy = if km { MatchingStrategy::Km } else { MatchingStrategy::Maximin };
    for _ in 0..rounds {
        let uploads: Vec<ModelUpload> = (0..3)
            .map(|ue| ModelUpload {
                ue_id: ue,
                lineage: holding[ue],
                model: models[holding[ue]].clone(),
            })
            .collect();
        let out = shuffle_round(&uploads, &mut table, lambda, strategy).expect("valid round");
        let mut received: Vec<usize> = out.assignments.iter().map(|&(_, j)| j).collect();
        let mut ues: Vec<usize> = out.assignments.iter().map(|&(u, _)| u).collect();
        received.sort_unstable();
        ues.sort_unstable();
        prop_assert_eq!(received, vec![0, 1, 2]);
        prop_assert_eq!(ues, vec![0, 1, 2]);
        let mut next = holding.clone();
        for &(ue, j) in &out.assignments {
            next[ue] = uploads[j].lineage;
        }
        holding = next;
    }
    Ok(())
}

pub fn prop_cue_partition(statuses: &[Vec<RbgStatus>]) -> Result<(), TestCaseError> {
    let outcomes: Vec<_> = statuses
        .iter()
        .enumerate()
        .map(|(s, st)| hermes_core::env5g::SlotOutcome {
            slot: s as u64,
            rbg_status: st.clone(),
            ues: Vec::new(),
        })
        .collect();
    let w = MetricsWindow::from_outcomes(&outcomes);
    let active: u64 = statuses
        .iter()
        .map(|st| st.iter().filter(|s| **s != RbgStatus::Inactive).count() as u64)
        .sum();
    prop_assert_eq!(w.utilized + w.collided + w.idle, active);
    match cue(&outcomes) {
        Ok(c) => {
            prop_assert!(active > 0);
            prop_assert!((c.utilized + c.collided + c.idle - 1.0).abs() <= 1e-12);
        }
        Err(_) => prop_assert_eq!(active, 0),
    }
    Ok(())
}

pub fn prop_jfi(x: &[f64], c: f64) -> Result<(), TestCaseError> {
    match jfi(x) {
        Ok(j) => {
            prop_assert!(j > 0.0 && j <= 1.0 + 1e-12);
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let js = jfi(&scaled).expect("positive scaling keeps a positive entry");
            prop_assert!((j - js).abs() <= 1e-12);
            if x.iter().all(|v| *v == x[0]) {
                prop_assert!((j - 1.0).abs() <= 1e-12);
            } else {
                prop_assert!(j < 1.0 - 1e-9);
            }
        }
        Err(_) => prop_assert!(x.iter().all(|v| *v == 0.0)),
    }
    Ok(())
}

pub fn prop_reward_monotone(a: f64, b: f64, alpha: f64, gamma: f64) -> Result<(), TestCaseError> {
    let xmax = 6105.0;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if lo < hi {
        prop_assert!(normalize_reward(lo, alpha, gamma, xmax) < normalize_reward(hi, alpha, gamma, xmax));
    }
    Ok(())
}

/// Small environment with all UEs and RBGs active.
pub fn small_env(n: usize, m: usize, size_bytes: u64, interval: u64) -> Environment {
    let distances: Vec<f64> = (0..n).map(|i| 100.0 + 150.0 * i as f64).collect();
    let apps = vec![
        vec![Application {
            packet_interval_slots: interval,
            packet_size_bytes: size_bytes,
        }];
        n
    ];
    let mut env = Environment::new(RadioConfig::default(), &distances, apps, m).expect("valid env");
    for u in 0..n {
        env.set_ue_active(u, true).unwrap();
    }
    for r in 0..m {
        env.set_rbg_active(r, true).unwrap();
    }
    env
}

fn random_action(m: usize, r: &mut ChaCha8Rng) -> Action {
    Action::from_index(r.gen_range(0..=m), m)
}

/// Random play: transmitted bits never exceed the buffer, and cumulative
/// delivered bits never exceed cumulative offered bits.
pub fn prop_buffer_conservation(seed: u64, size_bytes: u64, interval: u64) -> Result<(), TestCaseError> {
    let (n, m) = (4, 2);
    let mut env = small_env(n, m, size_bytes, interval);
    let mut r = rng(seed);
    let mut cqi = rng(seed ^ 1);
    let mut delivered = vec![0u64; n];
    for _ in 0..300 {
        env.traffic_tick();
        if env.cqi_due() {
            env.cqi_tick(&mut cqi);
        }
        let before: Vec<u64> = (0..n).map(|u| env.ue(u).unwrap().buffer_bits).collect();
        let actions: Vec<Option<Action>> = (0..n).map(|_| Some(random_action(m, &mut r))).collect();
        let out = env.resolve_slot(&actions).unwrap();
        for rec in &out.ues {
            prop_assert!(rec.transmitted_bits <= before[rec.ue_id]);
            if !rec.success {
                prop_assert_eq!(rec.transmitted_bits, 0);
            } else if before[rec.ue_id] > 0 {
                prop_assert!(rec.transmitted_bits > 0);
            }
            delivered[rec.ue_id] += rec.transmitted_bits;
        }
        for u in 0..n {
            let d = env.ue(u).unwrap();
            prop_assert_eq!(d.delivered_bits, delivered[u]);
            prop_assert!(d.delivered_bits <= d.offered_bits);
            prop_assert_eq!(d.offered_bits - d.delivered_bits, d.buffer_bits);
        }
        env.advance();
    }
    Ok(())
}

/// The probe UE 0 sees identical views in two environments where the other
/// UEs act differently but never touch the probe's requested channel.
pub fn prop_feedback_isolation(seed: u64) -> Result<(), TestCaseError> {
    let (n, m) = (4, 3);
    let mut a = small_env(n, m, 200, 1);
    let mut b = small_env(n, m, 200, 1);
    let mut probe = rng(seed);
    let mut ra = rng(seed ^ 0xa);
    let mut rb = rng(seed ^ 0xb);
    let (mut ca, mut cb) = (rng(seed ^ 0xc), rng(seed ^ 0xc));
    for _ in 0..250 {
        for (env, c) in [(&mut a, &mut ca), (&mut b, &mut cb)] {
            env.traffic_tick();
            if env.cqi_due() {
                env.cqi_tick(c);
            }
        }
        let p = random_action(m, &mut probe);
        let others = |r: &mut ChaCha8Rng| -> Vec<Option<Action>> {
            let mut v = vec![Some(p)];
            for _ in 1..n {
                let act = loop {
                    let act = random_action(m, r);
                    if p.channel().is_none() || act.channel() != p.channel() {
                        break act;
                    }
                };
                v.push(Some(act));
            }
            v
        };
        let oa = a.resolve_slot(&others(&mut ra)).unwrap();
        let ob = b.resolve_slot(&others(&mut rb)).unwrap();
        prop_assert_eq!(oa.record(0), ob.record(0));
        a.advance();
        b.advance();
        let (va, vb) = (a.view(0), b.view(0));
        prop_assert_eq!(va, vb);
    }
    Ok(())
}
