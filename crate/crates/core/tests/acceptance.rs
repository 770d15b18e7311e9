//! Acceptance runner: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails. Every threshold is a named constant below.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use hermes_core::env5g::{RbgStatus, SlotOutcome, SLOTS_PER_FRAME};
use hermes_core::metrics::{
    nash_equilibria, reward_expectation_table, RewardTable, REQUEST, SILENT,
};
use hermes_core::shuffle::{km_matching, maximin_matching, PreferenceMatrix};
use hermes_core::simctl::{load_scenario_file, run, write_timeseries, EventKind, Method, RunArtifacts, ScenarioConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// 1
const TOY_EPSILON: f64 = 0.2;
const TOY_ALICE_RR: f64 = 0.09;
const TOY_TOL: f64 = 1e-12;
const TOY_BUDGET: Duration = Duration::from_secs(1);
// 2
const MATCHING_INSTANCES: usize = 1000;
const MATCHING_MAX_N: usize = 8;
const MATCHING_BUDGET: Duration = Duration::from_secs(30);
// 3
const GRADIENT_INSTANCES: u64 = 120;
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
// 4
const CONV_LAST_FRAMES: u64 = 20;
const CONV_MIN_FRACTION: f64 = 0.7;
const CONV_MIN_SEEDS: usize = 3;
const CONV_BUDGET_PER_SEED: Duration = Duration::from_secs(120);
// 5-7
const HERMES_MIN_JFI: f64 = 0.90;
const DQSA_MAX_JFI: f64 = 0.65;
const PF_MIN_JFI: f64 = 0.90;
const HERMES_MIN_UTILIZED: f64 = 0.75;
const DQSA_THROUGHPUT_FACTOR: f64 = 1.5;
const LARGE_BUDGET_PER_SEED: Duration = Duration::from_secs(600);
// 8
const ADAPT_FRACTION: f64 = 0.6;
const ADAPT_WITHIN_FRAMES: u64 = 100;
/// Steady state is measured from this many frames after activation until the
/// RBG is removed or the run ends.
const ADAPT_STEADY_OFFSET_FRAMES: u64 = 100;
/// Width of the moving average that must reach the fraction.
const ADAPT_SMOOTH_FRAMES: u64 = 10;
const ADAPT_MIN_SEEDS: usize = 3;
// 10
const PROPERTY_CASES: u32 = 256;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
        if !pass {
            self.failures += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.2}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    load_scenario_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn run_seed(base: &ScenarioConfig, method: Method, seed: u64) -> (RunArtifacts, Duration) {
    let mut c = base.clone();
    c.method = method;
    c.seed = seed;
    let t = Instant::now();
    let art = run(&c).expect("scenario runs");
    (art, t.elapsed())
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let existing = reward_expectation_table(&RewardTable::non_punishing(), TOY_EPSILON);
    let improved = reward_expectation_table(&RewardTable::punishing(), TOY_EPSILON);
    let alice = existing.rewards[REQUEST][REQUEST].0;
    let ne_existing = nash_equilibria(&existing);
    let mut ne_improved = nash_equilibria(&improved);
    ne_improved.sort_unstable();
    let elapsed = t.elapsed();
    let pass = (alice - TOY_ALICE_RR).abs() <= TOY_TOL
        && ne_existing == vec![(REQUEST, REQUEST)]
        && ne_improved == vec![(REQUEST, SILENT), (SILENT, REQUEST)]
        && elapsed < TOY_BUDGET;
    r.line(
        1,
        "toy expectation table and equilibria",
        pass,
        format!("alice(R,R)={alice:.15} NE existing={ne_existing:?} NE improved={ne_improved:?}"),
        elapsed,
    );
}

/// Entries are integers or multiples of 1/64, so every matching sum is exact.
fn exact_matrix(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> PreferenceMatrix {
    let coarse = rng.gen_bool(0.5);
    PreferenceMatrix::from_fn(n, |_, _| {
        if coarse {
            f64::from(rng.gen_range(-3i32..=3))
        } else {
            f64::from(rng.gen_range(-640i32..=640)) / 64.0
        }
    })
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let mut g = rng(2024);
    let mut mismatches = 0;
    for _ in 0..MATCHING_INSTANCES {
        let n = g.gen_range(1..=MATCHING_MAX_N);
        let e = exact_matrix(n, &mut g);
        let (best_sum, best_min) = brute_force(&e);
        let km = km_matching(&e);
        let mm = maximin_matching(&e);
        if !km.is_permutation() || !mm.is_permutation() || km.total(&e) != best_sum || mm.bottleneck(&e) != best_min {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    r.line(
        2,
        "matching optimality vs brute force",
        mismatches == 0 && elapsed < MATCHING_BUDGET,
        format!("{MATCHING_INSTANCES} matrices up to {MATCHING_MAX_N}x{MATCHING_MAX_N}, {mismatches} mismatches"),
        elapsed,
    );
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let worst = (0..GRADIENT_INSTANCES)
        .map(gradient_check_instance)
        .fold(0.0f64, f64::max);
    let elapsed = t.elapsed();
    r.line(
        3,
        "analytic gradient vs central differences",
        worst <= FD_REL_TOL && elapsed < GRADIENT_BUDGET,
        format!("{GRADIENT_INSTANCES} instances, step {FD_STEP:e}, worst relative error {worst:.2e} (tol {FD_REL_TOL:e})"),
        elapsed,
    );
}

/// Fraction of slots in which every active RBG carries exactly one
/// successful requester, i.e. as many distinct non-colliding requesters as
/// there are channels.
fn full_slot_fraction(outcomes: &[SlotOutcome], rbgs: usize) -> f64 {
    let full = outcomes
        .iter()
        .filter(|o| {
            let winners: std::collections::BTreeSet<usize> = o
                .ues
                .iter()
                .filter(|u| u.success)
                .filter_map(|u| u.action.channel())
                .collect();
            winners.len() == rbgs && o.count(RbgStatus::Collided) == 0
        })
        .count();
    full as f64 / outcomes.len() as f64
}

fn criterion_4(r: &mut Report) {
    let base = scenario("10ue-3rbg-100f");
    let t = Instant::now();
    let mut fractions = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let (art, took) = run_seed(&base, Method::Hermes, seed);
        slowest = slowest.max(took);
        let from = art.outcomes.len() - (CONV_LAST_FRAMES * SLOTS_PER_FRAME) as usize;
        fractions.push(full_slot_fraction(&art.outcomes[from..], base.m_rbgs));
    }
    let good = fractions.iter().filter(|f| **f >= CONV_MIN_FRACTION).count();
    r.line(
        4,
        "toy convergence 10 UEs / 3 RBGs",
        good >= CONV_MIN_SEEDS && slowest < CONV_BUDGET_PER_SEED,
        format!(
            "full-slot fraction per seed {:?} (need >= {CONV_MIN_FRACTION} in {CONV_MIN_SEEDS}/5)",
            fractions.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
        t.elapsed(),
    );
}

struct LargeRuns {
    jfi: [Vec<f64>; 3],
    utilized: Vec<f64>,
    throughput: [Vec<f64>; 3],
    slowest: Duration,
    elapsed: Duration,
}

fn large_runs() -> LargeRuns {
    let base = scenario("20ue-6rbg-500f");
    let t = Instant::now();
    let mut jfi: [Vec<f64>; 3] = Default::default();
    let mut throughput: [Vec<f64>; 3] = Default::default();
    let mut utilized = Vec::new();
    let mut slowest = Duration::ZERO;
    for (k, method) in [Method::Hermes, Method::Dqsa, Method::Pf].into_iter().enumerate() {
        for seed in SEEDS {
            let (art, took) = run_seed(&base, method, seed);
            slowest = slowest.max(took);
            // no transmissions at all counts as maximally unfair
            jfi[k].push(art.summary.jfi.unwrap_or(0.0));
            throughput[k].push(art.summary.avg_throughput_bps);
            if method == Method::Hermes {
                utilized.push(art.summary.cue.utilized);
            }
        }
    }
    LargeRuns {
        jfi,
        utilized,
        throughput,
        slowest,
        elapsed: t.elapsed(),
    }
}

fn criteria_5_to_7(r: &mut Report) {
    let runs = large_runs();
    let [hj, dj, pj] = runs.jfi.clone().map(median);
    let within = runs.slowest < LARGE_BUDGET_PER_SEED;
    r.line(
        5,
        "fairness separation 20 UEs / 6 RBGs",
        hj >= HERMES_MIN_JFI && dj <= DQSA_MAX_JFI && pj >= PF_MIN_JFI && within,
        format!("median JFI hermes={hj:.4} dqsa={dj:.4} pf={pj:.4}; slowest seed {:.1}s", runs.slowest.as_secs_f64()),
        runs.elapsed,
    );
    let u = median(runs.utilized.clone());
    r.line(
        6,
        "channel utilization",
        u >= HERMES_MIN_UTILIZED && within,
        format!("median hermes utilized proportion {u:.4} (need >= {HERMES_MIN_UTILIZED})"),
        Duration::ZERO,
    );
    let [ht, dt, pt] = runs.throughput.clone().map(median);
    r.line(
        7,
        "throughput ordering",
        pt >= ht && ht >= DQSA_THROUGHPUT_FACTOR * dt && within,
        format!("median bit/s pf={pt:.0} hermes={ht:.0} dqsa={dt:.0}"),
        Duration::ZERO,
    );
}

/// Bits carried on `rbg` per frame.
fn rbg_frame_bits(outcomes: &[SlotOutcome], rbg: usize, frames: u64) -> Vec<f64> {
    let mut bits = vec![0.0; frames as usize];
    for o in outcomes {
        for u in &o.ues {
            if u.success && u.action.channel() == Some(rbg) {
                bits[(o.slot / SLOTS_PER_FRAME) as usize] += u.transmitted_bits as f64;
            }
        }
    }
    bits
}

/// `(adapted additions, evaluated additions, removals that went to zero,
/// removals, worst frames-to-reach)`.
fn adaptation(art: &RunArtifacts) -> (usize, usize, usize, usize, u64) {
    let c = &art.config;
    let frames = c.frames;
    let (mut adapted, mut evaluated, mut zeroed, mut removals, mut worst) = (0, 0, 0, 0, 0);
    for ev in &c.events {
        let bits = rbg_frame_bits(&art.outcomes, ev.id, frames);
        match ev.kind {
            EventKind::AddRbg => {
                let start = ev.slot / SLOTS_PER_FRAME;
                let end = c
                    .events
                    .iter()
                    .filter(|e| e.kind == EventKind::RemoveRbg && e.id == ev.id && e.slot > ev.slot)
                    .map(|e| e.slot / SLOTS_PER_FRAME)
                    .min()
                    .unwrap_or(frames);
                let steady_from = start + ADAPT_STEADY_OFFSET_FRAMES;
                if steady_from >= end {
                    continue;
                }
                evaluated += 1;
                let steady = bits[steady_from as usize..end as usize].iter().sum::<f64>()
                    / (end - steady_from) as f64;
                let w = ADAPT_SMOOTH_FRAMES as usize;
                let reached = (start as usize..=(start + ADAPT_WITHIN_FRAMES) as usize - w).find(|&f| {
                    bits[f..f + w].iter().sum::<f64>() / w as f64 >= ADAPT_FRACTION * steady
                });
                match reached {
                    Some(f) if steady > 0.0 => {
                        adapted += 1;
                        worst = worst.max(f as u64 + ADAPT_SMOOTH_FRAMES - start);
                    }
                    _ => worst = u64::MAX,
                }
            }
            EventKind::RemoveRbg => {
                removals += 1;
                let from = ev.slot as usize;
                let silent = art.outcomes[from..].iter().all(|o| {
                    o.rbg_status[ev.id] == RbgStatus::Inactive
                        && o.ues.iter().all(|u| !(u.success && u.action.channel() == Some(ev.id)))
                });
                if silent {
                    zeroed += 1;
                }
            }
            _ => {}
        }
    }
    (adapted, evaluated, zeroed, removals, worst)
}

fn criterion_8(r: &mut Report) {
    let base = scenario("dynamic-1000f");
    let t = Instant::now();
    let mut good_seeds = 0;
    let mut removals_ok = true;
    let mut details = Vec::new();
    for seed in SEEDS {
        let (art, _) = run_seed(&base, Method::Hermes, seed);
        let (adapted, evaluated, zeroed, removals, worst) = adaptation(&art);
        if evaluated > 0 && adapted == evaluated {
            good_seeds += 1;
        }
        removals_ok &= zeroed == removals && removals > 0;
        let worst = if worst == u64::MAX { "never".to_string() } else { format!("{worst}f") };
        details.push(format!("{adapted}/{evaluated} (worst {worst})"));
    }
    r.line(
        8,
        "adaptation to RBG changes",
        good_seeds >= ADAPT_MIN_SEEDS && removals_ok,
        format!(
            "additions reaching {ADAPT_FRACTION} of steady state within {ADAPT_WITHIN_FRAMES} frames per seed: {}; removals exactly zero: {removals_ok}",
            details.join(", ")
        ),
        t.elapsed(),
    );
}

fn criterion_9(r: &mut Report) {
    let base = scenario("10ue-3rbg-100f");
    let t = Instant::now();
    let bytes = |seed| {
        let (art, _) = run_seed(&base, Method::Hermes, seed);
        let mut buf = Vec::new();
        write_timeseries(&mut buf, &art.outcomes, base.m_rbgs).unwrap();
        (buf, art.initial_models)
    };
    let (a, ma) = bytes(11);
    let (b, _) = bytes(11);
    let (_, mc) = bytes(12);
    let identical = a == b;
    let all_differ = ma.iter().zip(&mc).all(|(x, y)| x != y);
    r.line(
        9,
        "determinism",
        identical && all_differ,
        format!("same seed byte-identical: {identical} ({} bytes); new seed changes every initial model: {all_differ}", a.len()),
        t.elapsed(),
    );
}

fn check<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config.clone(), TestRng::deterministic_rng(config.rng_algorithm));
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn criterion_10(r: &mut Report) {
    let t = Instant::now();
    let results = [
        check(
            "normalization idempotence + argmax invariance",
            (arb_model(), prop::collection::vec(-1.0f64..1.0, 1..8)),
            |(m, xs)| prop_normalize_idempotent_and_argmax(&m, &xs),
        ),
        check("MD pseudo-metric", arb_model_triple(), |m| prop_md_pseudometric(&m)),
        check("matching dominance", arb_matrix(), |e| prop_matching_dominance(&e)),
        check(
            "shuffle bijection",
            (arb_model_triple(), 1usize..6, 0.0f64..3.0, any::<bool>()),
            |(m, k, l, km)| prop_shuffle_bijection(&m, k, l, km),
        ),
        check("CUE partition", arb_statuses(), |s| prop_cue_partition(&s)),
        check(
            "JFI scaling invariance",
            (prop::collection::vec(0u32..10, 1..20), 0.01f64..100.0),
            |(x, c)| prop_jfi(&x.into_iter().map(f64::from).collect::<Vec<_>>(), c),
        ),
        check(
            "buffer conservation",
            (any::<u64>(), 1u64..1500, 1u64..5),
            |(s, size, i)| prop_buffer_conservation(s, size, i),
        ),
        check("feedback isolation", any::<u64>(), prop_feedback_isolation),
        check(
            "reward normalization order-preserving",
            (-7000.0f64..7000.0, -7000.0f64..7000.0, 0.0f64..3.0, 0.0f64..0.99),
            |(a, b, al, g)| prop_reward_monotone(a, b, al, g),
        ),
    ];
    let failed: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    r.line(
        10,
        "invariant suites",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} properties x {PROPERTY_CASES} cases", results.len())
        } else {
            format!("{failed:?}")
        },
        t.elapsed(),
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criteria_5_to_7(&mut report);
    criterion_8(&mut report);
    criterion_9(&mut report);
    criterion_10(&mut report);
    if report.failures > 0 {
        println!("{} criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
