//! Acceptance criteria AC1–AC10, plus the world-scale examples that share
//! their fixtures. Every criterion prints one `ACn PASS|FAIL` line to stderr.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write as _};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use besa::attack::{
    run_cell, run_matrix, AttackMode, AttackReport, BesaModels, Grid, GridDefense, MatrixEnv, CLEAN_LABEL,
};
use besa::defenses::{noise_poison, round_features, top_k, DefenseConfig, DefenseKind};
use besa::detection::train_detector;
use besa::encoders::{init_encoder, EncoderModel, ShadowBank};
use besa::harness::cli;
use besa::harness::config::ExperimentConfig;
use besa::harness::metrics::{detection_accuracy, linear_probe, median};
use besa::harness::pipeline::{build_world, train_bank, train_besa, train_target, World};
use besa::harness::report::{read_metrics, METRICS_CSV};
use besa::math::loss::cosine_similarity;
use besa::math::{LossKind, Matrix};
use besa::recovery::{build_generator, build_recovery_dataset, train_generator, RecoveryConfig};
use besa::service::wire::{decode_response, encode_response, Response};
use besa::service::{serve_tcp, Service, StreamClient, Transport};
use besa::Error;
use num_bigint::BigInt;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const REPLICATES: [u64; 5] = [0, 1, 2, 3, 4];

fn report_line(ac: &str, pass: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let on_time = elapsed <= limit;
    let status = if pass && on_time { "PASS" } else { "FAIL" };
    let _ = writeln!(
        io::stderr(),
        "{ac} {status} {detail} [{:.1} s, limit {} s]",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "{ac}: {detail}");
    assert!(on_time, "{ac}: {:.1} s exceeds {} s", elapsed.as_secs_f64(), limit.as_secs());
}

struct Fixture {
    cfg: ExperimentConfig,
    world: World,
    target: EncoderModel,
    bank: ShadowBank,
    held: ShadowBank,
    built: Duration,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let t = Instant::now();
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.bank.size, cfg.bank.held_out), (32, 16));
        let world = build_world(&cfg).unwrap();
        let target = train_target(&cfg, &world).unwrap();
        let (bank, held) = train_bank(&cfg, &world).unwrap();
        Fixture {
            cfg,
            world,
            target,
            bank,
            held,
            built: t.elapsed(),
        }
    })
}

/// Trained BESA models per (strategy set, recovery loss), with the time each
/// took to train.
fn models(set: &[DefenseKind], loss: LossKind) -> (BesaModels, Duration) {
    static CACHE: Mutex<Vec<(Vec<DefenseKind>, LossKind, BesaModels, Duration)>> = Mutex::new(Vec::new());
    let mut cache = CACHE.lock().unwrap_or_else(|e| e.into_inner());
    if let Some((_, _, m, d)) = cache.iter().find(|(s, l, _, _)| s.as_slice() == set && *l == loss) {
        return (m.clone(), *d);
    }
    let fx = fixture();
    let t = Instant::now();
    let mut cfg = fx.cfg.clone();
    cfg.besa.recovery.loss = loss;
    let m = train_besa(&cfg, &fx.bank, set).unwrap();
    let d = t.elapsed();
    cache.push((set.to_vec(), loss, m.clone(), d));
    (m, d)
}

fn full_set() -> Vec<DefenseKind> {
    fixture().cfg.strategies().unwrap()
}

fn parse_defenses(names: &[&str]) -> Vec<GridDefense> {
    names.iter().map(|n| GridDefense::parse(n, 32).unwrap()).collect()
}

/// Runs a grid against the shared world with the given attacker models.
fn run_grid(defenses: &[&str], modes: &[AttackMode], besa: &[BesaModels]) -> Vec<AttackReport> {
    let fx = fixture();
    let full = full_set();
    let template = fx.cfg.attack_template();
    let env = MatrixEnv {
        root_seed: fx.cfg.seed,
        target: &fx.target,
        query_set: &fx.world.query,
        probe_train: &fx.world.probe_train,
        probe_test: &fx.world.probe_test,
        full_strategies: &full,
        besa,
        service_budget: fx.cfg.service.budget,
        attack: &template,
        transport: Transport::InProcess,
    };
    let grid = Grid {
        defenses: parse_defenses(defenses),
        modes: modes.to_vec(),
        besa: vec![false, true],
        seeds: REPLICATES.to_vec(),
    };
    let reports = run_matrix(&grid, &env).unwrap();
    for r in &reports {
        assert!(r.error.is_none(), "{}: {:?}", r.cell, r.error);
    }
    reports
}

/// Median over replicates of probe(on) − probe(off), in points, per
/// (defense, mode).
fn median_gaps(reports: &[AttackReport]) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String, u64), [Option<f64>; 2]> = BTreeMap::new();
    for r in reports {
        let defense = r.cell.split('/').next().unwrap().to_string();
        let slot = acc.entry((defense, r.mode.name().to_string(), r.seed)).or_default();
        slot[r.besa_enabled as usize] = r.probe_accuracy;
    }
    let mut gaps: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for ((d, m, _), [off, on]) in acc {
        gaps.entry((d, m)).or_default().push(100.0 * (on.unwrap() - off.unwrap()));
    }
    gaps.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()
}

fn format_gaps(gaps: &BTreeMap<(String, String), f64>) -> String {
    gaps.iter()
        .map(|((d, m), g)| format!("{d}/{m} {g:+.2}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[test]
fn ac1_gradient_checks() {
    let t = Instant::now();
    let results = common::gradient_suite(2024, 40);
    let relative = |(_, _, tol): &&(&str, f64, f64)| *tol == common::TOL;
    let worst = results.iter().filter(relative).map(|(_, e, _)| *e).fold(0.0, f64::max);
    let zero = results.iter().filter(|r| !relative(r)).map(|(_, e, _)| *e).fold(0.0, f64::max);
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e, tol)| !(*e < *tol))
        .map(|(n, e, _)| format!("{n} {e:.2e}"))
        .collect();
    let names: Vec<&str> = results.iter().map(|(n, _, _)| *n).collect();
    report_line(
        "AC1",
        failing.is_empty() && results.len() >= 10,
        &format!(
            "{} checks ({}), worst rel. error {worst:.2e}, vanishing bias gradients within {zero:.1e} of zero {failing:?}",
            results.len(),
            names.join(", ")
        ),
        t.elapsed(),
        Duration::from_secs(30),
    );
}

/// Decimal rounding with halves away from zero, on the exact binary value.
fn round_oracle(x: f64, digits: u32) -> f64 {
    if x == 0.0 || digits >= 17 {
        return x;
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, e2) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    // |x| = mantissa · 2^e2; scaled = |x| · 10^digits = num / den
    let mut num = BigInt::from(mantissa) * BigInt::from(10u32).pow(digits);
    let mut den = BigInt::from(1u32);
    if e2 >= 0 {
        num <<= e2 as usize;
    } else {
        den <<= (-e2) as usize;
    }
    let q = &num / &den;
    let r = &num - &q * &den;
    let n = if r * 2 >= den { q + 1 } else { q };
    let text = n.to_string();
    let d = digits as usize;
    let padded = format!("{text:0>width$}", width = d + 1);
    let (int_part, frac_part) = padded.split_at(padded.len() - d);
    let v: f64 = format!("{int_part}.{frac_part}0").parse().unwrap();
    if x < 0.0 {
        -v
    } else {
        v
    }
}

/// Indices kept by top-k: an entry survives when fewer than k entries beat
/// it, where larger magnitude beats and equal magnitude at a lower index beats.
fn top_k_oracle(f: &[f64], k: usize) -> Vec<f64> {
    (0..f.len())
        .map(|i| {
            let beaten_by = (0..f.len())
                .filter(|&j| f[j].abs() > f[i].abs() || (f[j].abs() == f[i].abs() && j < i))
                .count();
            if beaten_by < k {
                f[i]
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn ac2_defense_oracles() {
    let t = Instant::now();
    let grid = [-1.25, -0.55, -0.125, -0.05, 0.0, 0.05, 0.125, 0.3, 0.55, 0.9999];
    let mut exhaustive = 0usize;
    let mut mismatches = Vec::new();
    for a in grid {
        for b in grid {
            for c in grid {
                for d in grid {
                    let f = [a, b, c, d];
                    for k in 1..=4 {
                        if top_k(&f, k).unwrap() != top_k_oracle(&f, k) {
                            mismatches.push(format!("top_k {f:?} k={k}"));
                        }
                    }
                    for digits in [0, 1, 2, 3] {
                        let got = round_features(&f, digits);
                        let want: Vec<f64> = f.iter().map(|&v| round_oracle(v, digits)).collect();
                        if got.iter().zip(&want).any(|(g, w)| g.to_bits() != w.to_bits() && !(*g == 0.0 && *w == 0.0)) {
                            mismatches.push(format!("round {f:?} digits={digits}: {got:?} vs {want:?}"));
                        }
                    }
                    for seed in [1u64, 2] {
                        let got = noise_poison(&f, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                        let mut replay = ChaCha8Rng::seed_from_u64(seed);
                        let want: Vec<f64> = f
                            .iter()
                            .map(|&v| {
                                let z: f64 = StandardNormal.sample(&mut replay);
                                v + 0.2f64.sqrt() * z
                            })
                            .collect();
                        if got != want {
                            mismatches.push(format!("noise {f:?} seed={seed}"));
                        }
                    }
                    exhaustive += 1;
                }
            }
        }
    }

    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec(-4.0f64..4.0, 1..24),
        0usize..24,
        0u32..6,
        0u64..1_000,
    );
    let property = runner.run(&strategy, |(f, k_raw, digits, seed)| {
        let k = 1 + k_raw % f.len();
        let kept = top_k(&f, k).unwrap();
        prop_assert!(kept.iter().filter(|v| **v != 0.0).count() <= k);
        prop_assert_eq!(top_k(&kept, k).unwrap(), kept.clone());
        prop_assert_eq!(top_k(&f, f.len()).unwrap(), f.clone());
        let r = round_features(&f, digits);
        prop_assert_eq!(round_features(&r, digits), r.clone());
        let half = 0.5 * 10f64.powi(-(digits as i32));
        for (a, b) in f.iter().zip(&r) {
            prop_assert!((a - b).abs() <= half * (1.0 + 1e-12));
        }
        prop_assert_eq!(round_features(&f, 17), f.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(noise_poison(&f, 0.0, &mut rng).unwrap(), f.clone());
        let before = f.clone();
        let _ = DefenseKind::hybrid3(f.len().max(4)).apply(&f, &mut rng);
        prop_assert_eq!(&f, &before);
        Ok(())
    });
    let detail = format!(
        "{exhaustive} grid vectors, {} oracle mismatches {:?}; 1000 property cases: {}",
        mismatches.len(),
        mismatches.iter().take(3).collect::<Vec<_>>(),
        match &property {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        }
    );
    report_line(
        "AC2",
        mismatches.is_empty() && property.is_ok(),
        &detail,
        t.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn ac3_detection_accuracy() {
    let fx = fixture();
    let t = Instant::now();
    let d_f = fx.cfg.d_f();
    let strategies = vec![
        DefenseKind::TopK { k: d_f / 4 },
        DefenseKind::Rounding { digits: 1 },
        DefenseKind::NoisePoison { sigma2: 0.2 },
    ];
    let detector = train_detector(&fx.bank, &strategies, &fx.cfg.besa.detection, 11).unwrap();
    let rows = detection_accuracy(&detector, &fx.held, 64, 12).unwrap();
    let floors = [0.98, 0.90, 0.98];
    let mut pass = fx.held.len() == 16 && fx.bank.len() == 32;
    let mut parts = Vec::new();
    for (k, floor) in floors.iter().enumerate() {
        let r = &rows[k];
        pass &= r.verdict_accuracy >= *floor && r.median_confidence > 0.9;
        parts.push(format!("{} acc {:.4} conf {:.4}", r.defense, r.verdict_accuracy, r.median_confidence));
    }
    report_line(
        "AC3",
        pass,
        &parts.join(", "),
        t.elapsed() + fx.built,
        Duration::from_secs(300),
    );
}

#[test]
fn ac4_single_defense_boost() {
    let fx = fixture();
    let (m, trained) = models(&full_set(), LossKind::Cosine);
    let t = Instant::now();
    let reports = run_grid(&["topk", "rd", "np"], &AttackMode::ALL, &[m]);
    let gaps = median_gaps(&reports);
    let best = gaps[&("np".to_string(), "plain".to_string())];
    let pass = gaps.len() == 9 && gaps.values().all(|g| *g >= 5.0) && best >= 10.0;
    report_line(
        "AC4",
        pass,
        &format!("median on−off: {}; np/plain needs ≥ +10", format_gaps(&gaps)),
        t.elapsed() + trained + fx.built,
        Duration::from_secs(900),
    );
}

#[test]
fn ac5_hybrid_boost() {
    let fx = fixture();
    let (m, trained) = models(&full_set(), LossKind::Cosine);
    let t = Instant::now();
    assert!(matches!(fx.cfg.attack.cadence, besa::attack::Cadence::PerQuery));
    let reports = run_grid(&["h1", "h2", "h3"], &AttackMode::ALL, &[m]);
    let gaps = median_gaps(&reports);
    let pass = gaps.len() == 9 && gaps.values().all(|g| *g >= 5.0);
    report_line(
        "AC5",
        pass,
        &format!("median on−off: {}", format_gaps(&gaps)),
        t.elapsed() + trained + fx.built,
        Duration::from_secs(600),
    );
}

#[test]
fn ac6_recovery_loss_ablation() {
    let fx = fixture();
    let full = full_set();
    let mut probe = BTreeMap::new();
    let mut trained = Duration::ZERO;
    let mut work = Duration::ZERO;
    for loss in [LossKind::Cosine, LossKind::L1, LossKind::L2] {
        let (m, d) = models(&full, loss);
        trained += d;
        let t = Instant::now();
        let reports = run_grid_on_only("np", AttackMode::Plain, &m);
        work += t.elapsed();
        probe.insert(format!("{loss:?}"), reports);
    }
    let cos = &probe["Cosine"];
    let l1 = &probe["L1"];
    let l2 = &probe["L2"];
    let med = |v: &[f64]| median(&mut v.to_vec());
    let wins_l2 = cos.iter().zip(l2).filter(|(c, l)| c >= l).count();
    let pass = med(cos) >= med(l1) && wins_l2 >= 3;
    report_line(
        "AC6",
        pass,
        &format!(
            "np/plain probe % by seed: cosine {cos:.2?}, l1 {l1:.2?}, l2 {l2:.2?}; median cos {:.2} vs l1 {:.2}; cos ≥ l2 in {wins_l2}/5",
            med(cos),
            med(l1)
        ),
        work + trained + fx.built,
        Duration::from_secs(600),
    );
}

/// Probe accuracy (%) of BESA-on cells for one defense and mode, per replicate.
fn run_grid_on_only(defense: &str, mode: AttackMode, m: &BesaModels) -> Vec<f64> {
    let fx = fixture();
    let full = full_set();
    let template = fx.cfg.attack_template();
    let besa = [m.clone()];
    let env = MatrixEnv {
        root_seed: fx.cfg.seed,
        target: &fx.target,
        query_set: &fx.world.query,
        probe_train: &fx.world.probe_train,
        probe_test: &fx.world.probe_test,
        full_strategies: &full,
        besa: &besa,
        service_budget: fx.cfg.service.budget,
        attack: &template,
        transport: Transport::InProcess,
    };
    let gd = GridDefense::parse(defense, 32).unwrap();
    REPLICATES
        .iter()
        .map(|&r| 100.0 * run_cell(&env, &gd, mode, true, r).unwrap().0.probe_accuracy.unwrap())
        .collect()
}

#[test]
fn ac7_unknown_defense() {
    let fx = fixture();
    let full = full_set();
    let names = ["un-np", "un-topk", "un-rd"];
    let mut besa = Vec::new();
    let mut trained = Duration::ZERO;
    for gd in parse_defenses(&names) {
        let (m, d) = models(&gd.attacker_strategies(&full), LossKind::Cosine);
        besa.push(m);
        trained += d;
    }
    let t = Instant::now();
    let reports = run_grid(&names, &[AttackMode::Plain], &besa);
    let gaps = median_gaps(&reports);
    let pass = gaps.len() == 3 && gaps.values().all(|g| *g >= 3.0);
    report_line(
        "AC7",
        pass,
        &format!("median on−off: {}", format_gaps(&gaps)),
        t.elapsed() + trained + fx.built,
        Duration::from_secs(600),
    );
}

#[test]
fn ac8_no_harm_without_defense() {
    let fx = fixture();
    let (m, trained) = models(&full_set(), LossKind::Cosine);
    let t = Instant::now();
    let reports = run_grid(&["none"], &AttackMode::ALL, &[m]);
    let gaps = median_gaps(&reports);
    let verdicts: Vec<&String> = reports.iter().filter(|r| r.besa_enabled).flat_map(|r| &r.verdicts).collect();
    let clean = verdicts.iter().filter(|v| v.as_str() == CLEAN_LABEL).count() as f64 / verdicts.len() as f64;
    let pass = gaps.values().all(|g| g.abs() <= 2.0) && clean >= 0.95;
    report_line(
        "AC8",
        pass,
        &format!("median on−off: {}; clean verdicts {:.4} of {}", format_gaps(&gaps), clean, verdicts.len()),
        t.elapsed() + trained + fx.built,
        Duration::from_secs(180),
    );
}

fn small_target() -> EncoderModel {
    init_encoder(&besa::encoders::ArchSpec::new(vec![16], besa::math::Activation::leaky(), 8, 3), 6).unwrap()
}

fn inputs(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn ac9_service_concurrency_and_wire() {
    let t = Instant::now();
    let np = Some(DefenseConfig::fixed(DefenseKind::NoisePoison { sigma2: 0.2 }));

    // budget under 8 concurrent pipelined clients
    let budget = 1_000u64;
    let service = Service::new(small_target(), np.clone(), budget, 5).unwrap();
    let server = serve_tcp(service.clone(), "127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    let handles: Vec<_> = (0..8)
        .map(|c| {
            thread::spawn(move || {
                let mut client = StreamClient::connect(addr).unwrap();
                client.pipeline(&inputs(200, 100 + c)).unwrap()
            })
        })
        .collect();
    let (mut ok, mut exhausted, mut other) = (0u64, 0u64, 0u64);
    for h in handles {
        for r in h.join().unwrap() {
            match r {
                Ok(_) => ok += 1,
                Err(Error::BudgetExhausted) => exhausted += 1,
                Err(_) => other += 1,
            }
        }
    }
    drop(server);
    let audit = service.audit_log();
    let indices_exact = audit.iter().enumerate().all(|(i, r)| r.query_index == i as u64);
    let budget_ok = ok == budget && exhausted == 600 && other == 0 && service.served() == budget && audit.len() == budget as usize && indices_exact;

    // stream vs in-process on identical seeds and order
    let xs = inputs(300, 9);
    let local = Service::new(small_target(), np.clone(), 20_000, 77).unwrap();
    let local_out: Vec<Vec<f64>> = xs.iter().map(|x| local.query(x).unwrap()).collect();
    let remote = Service::new(small_target(), np, 20_000, 77).unwrap();
    let server = serve_tcp(remote, "127.0.0.1:0").unwrap();
    let mut client = StreamClient::connect(server.local_addr()).unwrap();
    let remote_out: Vec<Vec<f64>> = client.pipeline(&xs).unwrap().into_iter().map(|r| r.unwrap()).collect();
    let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    let transports_ok = bits(&local_out) == bits(&remote_out);

    // float round trip through the response schema
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut values = vec![
        0.0,
        -0.0,
        f64::MIN_POSITIVE,
        5e-324,
        -5e-324,
        f64::MAX,
        f64::MIN,
        0.1,
        -0.3,
        1.0 / 3.0,
        round_features(&[0.123456], 1)[0],
    ];
    while values.len() < 20_000 {
        let v = f64::from_bits(rng.random::<u64>());
        if v.is_finite() {
            values.push(v);
        }
    }
    let mut wire_ok = true;
    for chunk in values.chunks(64) {
        let line = encode_response(&Response::Features {
            id: 1,
            features: chunk.to_vec(),
        });
        let back = decode_response(&line).unwrap().into_result().unwrap();
        wire_ok &= back.iter().map(|v| v.to_bits()).eq(chunk.iter().map(|v| v.to_bits()));
    }
    report_line(
        "AC9",
        budget_ok && transports_ok && wire_ok,
        &format!(
            "8 clients × 200 queries on budget {budget}: {ok} served, {exhausted} exhausted, {other} other, audit {} rows; transports identical: {transports_ok}; {} floats bit-exact: {wire_ok}",
            audit.len(),
            values.len()
        ),
        t.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn ac10_quick_matrix_is_reproducible() {
    let t = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut codes = Vec::new();
    for d in &dirs {
        codes.push(cli::run([
            "besa",
            "matrix",
            "--config",
            "examples/quick.toml",
            "--seed",
            "7",
            "--out",
            d.path().to_str().unwrap(),
        ]));
    }
    let read = |i: usize| read_metrics(&dirs[i].path().join(METRICS_CSV)).unwrap();
    let (a, b) = (read(0), read(1));
    let bytes_equal =
        fs::read(dirs[0].path().join(METRICS_CSV)).unwrap() == fs::read(dirs[1].path().join(METRICS_CSV)).unwrap();
    report_line(
        "AC10",
        codes == [0, 0] && a == b && bytes_equal && a.len() >= 8,
        &format!("exit codes {codes:?}, {} rows, identical rows {}, identical bytes {bytes_equal}", a.len(), a == b),
        t.elapsed(),
        Duration::from_secs(300),
    );
}

fn mean_cosine(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows()).map(|r| cosine_similarity(a.row(r), b.row(r)).unwrap()).sum::<f64>() / a.rows() as f64
}

fn mean_l2(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.rows() as f64
}

#[test]
fn generators_recover_on_held_out_encoders() {
    let fx = fixture();
    let cfg = RecoveryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut trained = |defense: &DefenseKind| {
        let data = build_recovery_dataset(&fx.bank, defense, &cfg, &mut rng).unwrap();
        let mut g = build_generator(32, cfg.blocks, 4).unwrap();
        train_generator(&mut g, &data, LossKind::Cosine, &cfg, 5).unwrap();
        let held = build_recovery_dataset(&fx.held, defense, &cfg, &mut rng).unwrap();
        (g.recover_batch(&held.perturbed).unwrap(), held)
    };
    let (rec, held) = trained(&DefenseKind::NoisePoison { sigma2: 0.2 });
    let (np_rec, np_pert) = (mean_cosine(&rec, &held.clean), mean_cosine(&held.perturbed, &held.clean));
    let (rec, held) = trained(&DefenseKind::TopK { k: 8 });
    let (tk_rec, tk_pert) = (mean_l2(&rec, &held.clean), mean_l2(&held.perturbed, &held.clean));
    let _ = writeln!(
        io::stderr(),
        "recovery: NP cosine {np_pert:.4} -> {np_rec:.4}; TopK{{8}} l2 {tk_pert:.4} -> {tk_rec:.4}"
    );
    assert!(np_rec >= np_pert + 0.2, "NP cosine {np_pert:.4} -> {np_rec:.4}");
    assert!(tk_rec <= 0.5 * tk_pert, "TopK l2 {tk_pert:.4} -> {tk_rec:.4}");
}

#[test]
fn besa_examples_on_the_default_world() {
    let (m, _) = models(&full_set(), LossKind::Cosine);
    let fx = fixture();
    let full = full_set();
    let template = fx.cfg.attack_template();
    let besa = [m];
    let env = MatrixEnv {
        root_seed: fx.cfg.seed,
        target: &fx.target,
        query_set: &fx.world.query,
        probe_train: &fx.world.probe_train,
        probe_test: &fx.world.probe_test,
        full_strategies: &full,
        besa: &besa,
        service_budget: fx.cfg.service.budget,
        attack: &template,
        transport: Transport::InProcess,
    };
    let probe = |defense: &str, on: bool| {
        let gd = GridDefense::parse(defense, 32).unwrap();
        100.0 * run_cell(&env, &gd, AttackMode::Plain, on, 0).unwrap().0.probe_accuracy.unwrap()
    };
    let np_gap = probe("np", true) - probe("np", false);
    let clean_gap = probe("none", true) - probe("none", false);
    let _ = writeln!(io::stderr(), "attack: NP on−off {np_gap:+.2}, undefended on−off {clean_gap:+.2}");
    assert!(np_gap >= 5.0, "NP gap {np_gap:.2}");
    assert!(clean_gap.abs() <= 2.0, "undefended gap {clean_gap:.2}");
}

#[test]
fn grid_runs_are_deterministic_and_match_the_audit() {
    let fx = fixture();
    let (m, _) = models(&full_set(), LossKind::Cosine);
    let full = full_set();
    let template = fx.cfg.attack_template();
    let besa = [m];
    let env = MatrixEnv {
        root_seed: fx.cfg.seed,
        target: &fx.target,
        query_set: &fx.world.query,
        probe_train: &fx.world.probe_train,
        probe_test: &fx.world.probe_test,
        full_strategies: &full,
        besa: &besa,
        service_budget: fx.cfg.service.budget,
        attack: &template,
        transport: Transport::InProcess,
    };
    let grid = Grid {
        defenses: parse_defenses(&["topk", "np"]),
        modes: vec![AttackMode::Plain, AttackMode::Contrastive],
        besa: vec![false, true],
        seeds: vec![0],
    };
    let without_time = |mut rs: Vec<AttackReport>| {
        rs.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        rs
    };
    let a = without_time(run_matrix(&grid, &env).unwrap());
    let b = without_time(run_matrix(&grid, &env).unwrap());
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    for r in &a {
        assert!(r.error.is_none());
        assert_eq!(r.queries_used as usize, r.ground_truth.len());
        if r.besa_enabled {
            assert_eq!(r.verdicts.len(), r.ground_truth.len());
        } else {
            assert!(r.verdicts.is_empty());
            assert_eq!((r.detect_calls, r.recover_calls), (0, 0));
        }
    }
    // Per-query verdicts under a fixed defense are a deterministic function
    // of each response; the learned detector still errs on a few of them.
    let gd = GridDefense::parse("topk", 32).unwrap();
    let (report, audit) = run_cell(&env, &gd, AttackMode::Plain, true, 0).unwrap();
    let (again, _) = run_cell(&env, &gd, AttackMode::Plain, true, 0).unwrap();
    assert_eq!(report.queries_used as usize, audit.len());
    assert_eq!(report.verdicts, again.verdicts);
    let first = &report.verdicts[1];
    let constant = report.verdicts[1..].iter().filter(|v| *v == first).count();
    let _ = writeln!(
        io::stderr(),
        "fixed TopK, per-query cadence: {constant} of {} verdicts after the first equal {first}",
        report.verdicts.len() - 1
    );
    assert_eq!(first, &report.served_defense);
    assert!(2 * constant > report.verdicts.len() - 1);
}

#[test]
fn unknown_np_cell_reports_the_mismatch() {
    let fx = fixture();
    let full = full_set();
    let gd = GridDefense::parse("un-np", 32).unwrap();
    let set = gd.attacker_strategies(&full);
    assert_eq!(set, vec![DefenseKind::top_k_default(32), DefenseKind::rounding_default()]);
    let (m, _) = models(&set, LossKind::Cosine);
    let template = fx.cfg.attack_template();
    let besa = [m];
    let env = MatrixEnv {
        root_seed: fx.cfg.seed,
        target: &fx.target,
        query_set: &fx.world.query,
        probe_train: &fx.world.probe_train,
        probe_test: &fx.world.probe_test,
        full_strategies: &full,
        besa: &besa,
        service_budget: fx.cfg.service.budget,
        attack: &template,
        transport: Transport::InProcess,
    };
    let (report, _) = run_cell(&env, &gd, AttackMode::Plain, true, 0).unwrap();
    assert_eq!(report.truth_in_strategy_set, Some(false));
    assert_eq!(report.detection_agreement, Some(0.0));
    assert!(report.ground_truth.iter().all(|g| g == "NP{0.2}"));
}

#[test]
fn detection_and_probe_sanity() {
    let fx = fixture();
    let identity = [DefenseKind::NoisePoison { sigma2: 0.0 }];
    let detector = train_detector(&fx.bank, &identity, &fx.cfg.besa.detection, 3).unwrap();
    let rows = detection_accuracy(&detector, &fx.held, 64, 4).unwrap();
    let binary = rows[0].binary_accuracy.unwrap();
    assert!((binary - 0.5).abs() <= 0.1, "identity row {binary}");

    let probe = &fx.cfg.attack.probe;
    let target = linear_probe(&fx.target, &fx.world.probe_train, &fx.world.probe_test, probe, 1).unwrap();
    let random = init_encoder(&fx.target.arch.with_seed(99), 32).unwrap();
    let random = linear_probe(&random, &fx.world.probe_train, &fx.world.probe_test, probe, 1).unwrap();
    assert!(target >= random, "target {target} vs random {random}");
}
