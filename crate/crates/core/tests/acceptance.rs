//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use certaindex::metrics::{certaindex_entropy, cluster_exact, semantic_entropy, Signal};
use certaindex::probe::{read_traces, replay, write_savings_table, ProbeConfig};
use certaindex::runtime::{AnswerProcess, Archetype, SyntheticProgramSpec, TokenProcess, WorkloadConfig};
use certaindex::scheduler::{AllocationPolicy, Estimator, InterOrder, InterSchedPolicy, PolicyKind};
use certaindex::sim::{
    attainment, calibrated_policy, profile, run, Arrival, CalibrationPlan, ProgramSource, SimConfig, SimReport,
};
use certaindex::theory::{lemma1_monte_carlo, lemma2_sweep, required_probes};

type Check = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn sim_config(workload: Vec<SyntheticProgramSpec>, arrival: Arrival, allocation: AllocationPolicy) -> SimConfig {
    SimConfig {
        seed: 0,
        arrival,
        token_rate: 1.0,
        workload: workload.into_iter().map(ProgramSource::Synthetic).collect(),
        slo_scale: 1.0,
        base_deadline: 1e9,
        allocation,
        inter: InterSchedPolicy {
            gang: true,
            order: InterOrder::Fifo,
            starvation_limit: None,
            batch_capacity: 2,
        },
        estimator: Estimator::Oracle,
        probe: ProbeConfig::default(),
        horizon: 1e12,
        record_events: false,
    }
}

fn sc_spec(seed: u64, tokens: f64, cap: Option<u32>) -> SyntheticProgramSpec {
    SyntheticProgramSpec {
        archetype: Archetype::Sc,
        seed,
        true_convergence_knob: 1,
        solvable: true,
        difficulty_factor: 1,
        answer_process: AnswerProcess::default(),
        tokens_per_step: TokenProcess { mean: tokens, sigma: 0.0 },
        reward_process: None,
        depth: 1,
        resource_cap: cap,
    }
}

fn gang_example() -> Check {
    let base = sim_config(
        vec![sc_spec(1, 4.0, None), sc_spec(2, 5.0, None)],
        Arrival::Fixed { times: vec![0.0, 0.0] },
        AllocationPolicy::even(2),
    );
    let mut on = base.clone();
    on.inter.gang = true;
    let mut off = base;
    off.inter.gang = false;
    let a = run(&on).map_err(fail)?.aggregates.mean_latency;
    let b = run(&off).map_err(fail)?.aggregates.mean_latency;
    ensure(a == Some(6.5), format!("gang mean latency {a:?}, want 6.5"))?;
    ensure(b == Some(9.0), format!("interleaved mean latency {b:?}, want 9"))?;
    Ok("gang 6.5 ms, interleaved 9 ms".into())
}

/// Set partitions of `n` labelled items as restricted growth strings.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for b in 0..=max + 1 {
            if cur.is_empty() && b > 0 {
                break;
            }
            cur.push(b);
            rec(n, cur, max.max(b), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, &mut Vec::new(), 0, &mut out);
    out
}

fn entropy_suite() -> Check {
    let mut checked = 0;
    for n in 1..=5usize {
        let parts = set_partitions(n);
        let bell = [1, 2, 5, 15, 52][n - 1];
        ensure(parts.len() == bell, format!("{} partitions of {n}, want {bell}", parts.len()))?;
        for rgs in parts {
            let answers: Vec<String> = rgs.iter().map(|b| format!("g{b}")).collect();
            let c = cluster_exact(&answers).map_err(fail)?;
            let mut sizes: HashMap<usize, usize> = HashMap::new();
            for b in &rgs {
                *sizes.entry(*b).or_default() += 1;
            }
            // H = ln n - (1/n) Σ s ln s, rearranged from the definition.
            let nf = n as f64;
            let sum_sls: f64 = sizes.values().map(|&s| s as f64 * (s as f64).ln()).sum();
            let h = nf.ln() - sum_sls / nf;
            let h_norm = if n == 1 { 1.0 } else { sum_sls / (nf * nf.ln()) };
            let got_h = semantic_entropy(&c);
            let got_n = certaindex_entropy(&c);
            ensure((got_h - h).abs() <= 1e-12, format!("H {got_h} vs {h} for {rgs:?}"))?;
            ensure((got_n - h_norm).abs() <= 1e-12, format!("normalised {got_n} vs {h_norm} for {rgs:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} clusterings within 1e-12"))
}

fn lemma2() -> Check {
    let s = lemma2_sweep(3, 3, 4).map_err(fail)?;
    ensure(s.passed(), format!("{} counterexamples", s.counterexamples))?;
    Ok(format!(
        "{} sequences, {} with matching mixtures, 0 counterexamples",
        s.sequences_checked, s.premises_met
    ))
}

fn lemma1() -> Check {
    let k = required_probes(4, 0.5, 0.1).map_err(fail)?;
    let r = lemma1_monte_carlo(4, 0.5, 0.1, 1000, 2024).map_err(fail)?;
    ensure(r.k == k, "k mismatch")?;
    ensure(r.coverage() >= 0.9, format!("coverage {} below 0.9", r.coverage()))?;
    Ok(format!("k = {k}, coverage {:.3}", r.coverage()))
}

fn savings_workload() -> Vec<SyntheticProgramSpec> {
    WorkloadConfig {
        archetype: Archetype::Sc,
        programs: 200,
        convergence: [1, 15],
        convergence_cap_fraction: Some(0.5),
        unsolvable_fraction: 0.2,
        easy_knob: 5,
        answer_process: AnswerProcess {
            groups: 4,
            noise: 0.6,
            residual_noise: 0.0,
            hesitation_rate: 0.0,
        },
        token_mean: 300.0,
        token_mean_sigma: 0.5,
        request_sigma: 0.0,
        depth: 1,
        reward_process: None,
        caps: vec![5, 10, 15, 20, 25, 30],
    }
    .generate(77)
    .expect("valid workload")
}

/// Entropy certaindex of the first `k` sampled answers, computed from the
/// oracle's draws without the library's clustering.
fn oracle_certaindex(spec: &SyntheticProgramSpec, k: u32, probe: &ProbeConfig) -> f64 {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for j in 0..k {
        *counts.entry(spec.sample_unit(j, probe).answer).or_default() += 1;
    }
    let n = k as f64;
    if k == 1 {
        return 1.0;
    }
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    ((n.ln() - h) / n.ln()).clamp(0.0, 1.0)
}

fn token_savings() -> Check {
    let specs = savings_workload();
    let probe = ProbeConfig::default();
    let detect = 5;
    let points = profile(&specs, &probe, 30, detect, None).map_err(fail)?;
    let plan = CalibrationPlan {
        resource_cap: 30,
        detect_at_knob: detect,
        recheck_every: 1,
        signal: Signal::Entropy,
        tolerance: 0.0,
        curve_buckets: 10,
        curve_quantile: 1.0,
    };
    let (policy, cal) = calibrated_policy(PolicyKind::StaticThreshold, &points, &plan).map_err(fail)?;
    let threshold = cal.expect("threshold policy is calibrated").threshold;
    let arrival = Arrival::Poisson { rate: 0.01 };
    let mut cfg = sim_config(specs.clone(), arrival, AllocationPolicy::even(30));
    cfg.inter.batch_capacity = 8;
    let even = run(&cfg).map_err(fail)?;
    cfg.allocation = policy;
    let thr = run(&cfg).map_err(fail)?;

    let (acc_e, acc_t) = (even.aggregates.accuracy, thr.aggregates.accuracy);
    ensure(acc_e == acc_t, format!("accuracy {acc_t:?} vs even {acc_e:?}"))?;
    let (tok_e, tok_t) = (even.aggregates.total_tokens, thr.aggregates.total_tokens);
    ensure(tok_t < tok_e, format!("tokens {tok_t} not below even {tok_e}"))?;

    let (mut saved, mut full) = (0.0, 0.0);
    for s in &specs {
        let cap = s.resource_cap.unwrap();
        let per_branch = s.tokens_per_step.mean.round();
        let stop = if cap > detect && oracle_certaindex(s, detect, &probe) >= threshold {
            detect
        } else {
            cap
        };
        saved += (cap - stop) as f64 * per_branch;
        full += cap as f64 * per_branch;
    }
    let want = saved / full;
    let got = 1.0 - tok_t as f64 / tok_e as f64;
    ensure((want - got).abs() <= 1e-9, format!("savings {got} vs oracle {want}"))?;
    Ok(format!(
        "threshold {threshold:.4}, savings {got:.4} (oracle {want:.4}), accuracy {:.3}",
        acc_t.unwrap_or(0.0)
    ))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn sjf_oracle() -> Check {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let n = rng.random_range(1..=6usize);
        let jobs: Vec<(u32, f64)> = (0..n)
            .map(|_| (rng.random_range(1..=6u32), rng.random_range(1..=40u32) as f64))
            .collect();
        let specs: Vec<SyntheticProgramSpec> = jobs
            .iter()
            .enumerate()
            .map(|(i, &(cap, t))| sc_spec(i as u64, t, Some(cap)))
            .collect();
        let mut cfg = sim_config(specs, Arrival::Fixed { times: vec![0.0; n] }, AllocationPolicy::even(6));
        cfg.inter = InterSchedPolicy {
            gang: true,
            order: InterOrder::SjfEstimated,
            starvation_limit: None,
            batch_capacity: 1,
        };
        let got = run(&cfg).map_err(fail)?.aggregates.mean_latency.unwrap();
        let best = permutations(n)
            .into_iter()
            .map(|perm| {
                let mut t = 0.0;
                let mut total = 0.0;
                for i in perm {
                    t += jobs[i].0 as f64 * jobs[i].1;
                    total += t;
                }
                total / n as f64
            })
            .fold(f64::INFINITY, f64::min);
        ensure((got - best).abs() <= 1e-9, format!("case {case}: {got} vs optimum {best}"))?;
    }
    Ok("100 workloads match the permutation optimum".into())
}

fn online_workload(seed: u64, programs: usize) -> Vec<SyntheticProgramSpec> {
    WorkloadConfig {
        archetype: Archetype::Sc,
        programs,
        convergence: [1, 12],
        convergence_cap_fraction: None,
        unsolvable_fraction: 0.2,
        easy_knob: 5,
        answer_process: AnswerProcess::default(),
        token_mean: 200.0,
        token_mean_sigma: 0.5,
        request_sigma: 0.3,
        depth: 1,
        reward_process: None,
        caps: vec![],
    }
    .generate(seed)
    .expect("valid workload")
}

fn online_config(seed: u64, rate: f64, slo: f64) -> SimConfig {
    let mut cfg = sim_config(online_workload(seed, 60), Arrival::Poisson { rate }, AllocationPolicy::even(12));
    cfg.seed = seed;
    cfg.token_rate = 2000.0;
    cfg.slo_scale = slo;
    cfg.base_deadline = 1.0;
    cfg.inter = InterSchedPolicy {
        gang: true,
        order: InterOrder::SjfEstimated,
        starvation_limit: Some(20.0),
        batch_capacity: 8,
    };
    cfg.estimator = Estimator::Historical { prior: 200.0 };
    cfg
}

fn homogeneous_bursts(seed: u64) -> SimConfig {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let capacity = rng.random_range(1..=4usize);
    let cap = rng.random_range(1..=4u32);
    let tokens = rng.random_range(1..=20u32) as f64;
    let mut times = Vec::new();
    let mut t = 0.0;
    for _ in 0..rng.random_range(1..=5) {
        let size = rng.random_range(1..=4);
        times.extend(std::iter::repeat_n(t, size));
        // Gaps long enough for a burst to drain before the next arrives.
        t += (times.len() as f64 * cap as f64 * tokens) + rng.random_range(0.0..10.0);
    }
    let specs = (0..times.len()).map(|i| sc_spec(i as u64, tokens, None)).collect();
    let mut cfg = sim_config(specs, Arrival::Fixed { times }, AllocationPolicy::even(cap));
    cfg.inter.batch_capacity = capacity;
    cfg
}

fn directional() -> Check {
    let seeds: Vec<u64> = (0..20).collect();
    let rates = [1.0, 2.0, 4.0, 8.0, 16.0];
    let mut mean_att = Vec::new();
    for &rate in &rates {
        let cfgs: Vec<SimConfig> = seeds.iter().map(|&s| online_config(s, rate, 1.0)).collect();
        let reports: Vec<SimReport> = certaindex::sim::run_many(&cfgs)
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        let att: f64 = reports.iter().map(|r| attainment(r).unwrap()).sum::<f64>() / seeds.len() as f64;
        mean_att.push(att);
    }
    ensure(
        mean_att.windows(2).all(|w| w[1] <= w[0]),
        format!("mean attainment over rates {rates:?} is {mean_att:?}"),
    )?;

    let scales = [0.5, 1.0, 1.5, 2.0, 3.0];
    for &s in &seeds {
        let mut prev = -1.0;
        for &scale in &scales {
            let a = attainment(&run(&online_config(s, 4.0, scale)).map_err(fail)?).map_err(fail)?;
            ensure(a >= prev, format!("seed {s}: attainment fell to {a} at slo scale {scale}"))?;
            prev = a;
        }
    }

    for &s in &seeds {
        let mut cfg = homogeneous_bursts(s);
        cfg.inter.gang = true;
        let on = run(&cfg).map_err(fail)?.aggregates.mean_latency.unwrap();
        cfg.inter.gang = false;
        let off = run(&cfg).map_err(fail)?.aggregates.mean_latency.unwrap();
        ensure(on <= off + 1e-9, format!("seed {s}: gang {on} > interleaved {off}"))?;
    }
    Ok(format!(
        "attainment by rate {:?}; slo and gang checks hold on 20 seeds",
        mean_att.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    ))
}

const TRACE: &str = include_str!("data/replay_50.jsonl");
const GOLDEN: &str = include_str!("data/replay_50_savings.csv");

fn replay_table() -> Result<Vec<u8>, String> {
    let cfg = ProbeConfig {
        interval_tokens: 64,
        window: 3,
        threshold: 0.9,
        ..Default::default()
    };
    let traces = read_traces(TRACE.as_bytes()).map_err(fail)?;
    let outcomes = traces
        .iter()
        .map(|(id, t)| replay(id, t, &cfg))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    let mut out = Vec::new();
    write_savings_table(&mut out, &outcomes).map_err(fail)?;
    Ok(out)
}

fn replay_determinism() -> Check {
    let a = replay_table()?;
    let b = replay_table()?;
    ensure(a == b, "two replays differ")?;
    ensure(a == GOLDEN.as_bytes(), "savings table differs from the golden file")?;
    let programs = read_traces(TRACE.as_bytes()).map_err(fail)?.len();
    ensure(programs == 50, format!("{programs} programs in the bundled trace"))?;
    let total = String::from_utf8(a).unwrap();
    let last = total.lines().last().unwrap_or_default().to_string();
    Ok(format!("byte-identical to golden, {last}"))
}

fn policy_ordering() -> Check {
    let probe = ProbeConfig::default();
    let plan = CalibrationPlan {
        resource_cap: 20,
        detect_at_knob: 5,
        recheck_every: 1,
        signal: Signal::Entropy,
        tolerance: 0.0,
        curve_buckets: 10,
        curve_quantile: 1.0,
    };
    let kinds = [
        PolicyKind::DynamicCurveFit,
        PolicyKind::KStepThreshold,
        PolicyKind::StaticThreshold,
        PolicyKind::Even,
    ];
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 0..20u64 {
        // Profiled on an independent draw from the same workload family.
        let specs = online_workload(1000 + seed, 100);
        let profiled = online_workload(5000 + seed, 1000);
        let points = profile(&profiled, &probe, plan.resource_cap, plan.detect_at_knob, Some(1)).map_err(fail)?;
        let mut tokens = Vec::new();
        let mut accuracy = Vec::new();
        for kind in kinds {
            let (policy, _) = calibrated_policy(kind, &points, &plan).map_err(fail)?;
            let mut cfg = sim_config(specs.clone(), Arrival::Poisson { rate: 1.0 }, policy);
            cfg.seed = seed;
            cfg.inter.batch_capacity = 8;
            let r = run(&cfg).map_err(fail)?;
            tokens.push(r.aggregates.total_tokens);
            accuracy.push(r.aggregates.accuracy);
        }
        let ordered = tokens.windows(2).all(|w| w[0] <= w[1]);
        let same = accuracy.iter().all(|a| *a == accuracy[3]);
        if ordered && same {
            good += 1;
        } else {
            notes.push(format!("seed {seed}: tokens {tokens:?} accuracy {accuracy:?}"));
        }
    }
    ensure(good >= 18, format!("{good}/20 seeds ordered; {}", notes.join("; ")))?;
    Ok(format!("{good}/20 seeds ordered with equal accuracy"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gang scheduling example", Duration::from_secs(1), gang_example),
        ("entropy and certaindex unit suite", Duration::from_secs(1), entropy_suite),
        ("window equivalence sweep", Duration::from_secs(120), lemma2),
        ("concentration bound coverage", Duration::from_secs(60), lemma1),
        ("exact token-savings accounting", Duration::from_secs(30), token_savings),
        ("sjf optimality oracle", Duration::from_secs(60), sjf_oracle),
        ("directional online properties", Duration::from_secs(300), directional),
        ("probe replay determinism", Duration::from_secs(60), replay_determinism),
        ("policy ordering trend", Duration::from_secs(300), policy_ordering),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > budget => Err(format!("{msg}; took {took:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(msg) => println!("PASS  {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} ({took:.2?})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
