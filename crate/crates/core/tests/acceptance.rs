//! End-to-end acceptance campaign. Prints one line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use stabcon_core::sim::campaign::{
    consensus_config, contrast_config, convergence_config, par_map, rsm_config, to_config, Summary,
};
use stabcon_core::sim::scenario::{run_mrt, run_mv, run_rsm, run_to_urb, MvRun, ToRun};
use stabcon_core::sim::{run, RunReport, ScenarioKind, SimConfig};
use stabcon_core::{BcObject, ConsensusResult, MvObject, MvSlot, Value, Variant};

struct Line {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn summary(runs: &[&RunReport]) -> Summary {
    Summary::from_reports(runs.iter().copied())
}

fn describe(s: &Summary) -> String {
    let mut out = format!("{}/{} runs pass", s.passed, s.runs);
    if !s.all_pass() {
        out += &format!(", failing {:?}, first seeds {:?}", s.failures_by_verdict, &s.failed_seeds[..s.failed_seeds.len().min(5)]);
    }
    out
}

fn n_for(seed: u64) -> usize {
    3 + (seed % 3) as usize
}

// -- Criterion 1 ------------------------------------------------------------

fn def1_suite(variant: Variant) -> (Vec<MvRun>, Duration) {
    let t0 = Instant::now();
    let mut runs = Vec::new();
    for n in [3usize, 4, 5] {
        runs.extend(par_map(0..500, |s| run_mv(&consensus_config(n, s, variant), false).unwrap()));
    }
    (runs, t0.elapsed())
}

fn def1_line(id: u32, name: &'static str, runs: &[MvRun], took: Duration) -> Line {
    let s = summary(&runs.iter().map(|r| &r.report).collect::<Vec<_>>());
    let crashed: BTreeMap<usize, usize> = runs.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(r.report.config.faults.crashes.len()).or_default() += 1;
        m
    });
    Line {
        id,
        name,
        pass: s.all_pass() && s.runs == 1500 && took < Duration::from_secs(120),
        detail: format!("{} in {:.1}s, runs per crash count {crashed:?}", describe(&s), took.as_secs_f64()),
    }
}

// -- Criterion 2 ------------------------------------------------------------

fn bc_bound_line(seq: &[MvRun], conc: &[MvRun]) -> Line {
    let mut worst = 0u64;
    let mut bad = Vec::new();
    for r in seq.iter().chain(conc) {
        let n = r.report.config.n as u64;
        let m = r.report.stat_u64("max_bc_per_object").expect("stat recorded");
        worst = worst.max(m);
        let v = r.report.verdict("bc_bound").expect("bc_bound verdict");
        if m > n || !v.pass {
            bad.push(r.report.config.seed);
        }
    }
    Line {
        id: 2,
        name: "binPropose per object <= n",
        pass: bad.is_empty(),
        detail: format!("{} runs checked, max calls per object {worst}, violations {}", seq.len() + conc.len(), bad.len()),
    }
}

// -- Criterion 3 ------------------------------------------------------------

fn convergence(variant: Variant) -> Vec<MvRun> {
    par_map(0..1000, |s| run_mv(&convergence_config(n_for(s), s, variant), false).unwrap())
}

fn convergence_line(id: u32, name: &'static str, runs: &[MvRun]) -> Line {
    let s = summary(&runs.iter().map(|r| &r.report).collect::<Vec<_>>());
    let mut recipes: BTreeMap<String, usize> = BTreeMap::new();
    let mut decided = 0;
    let mut errors = 0;
    for r in runs {
        let recipe = r.report.config.faults.transient.as_ref().map(|t| t.recipe.label()).unwrap_or("none");
        *recipes.entry(recipe.to_owned()).or_default() += 1;
        for (_, res) in &r.results {
            match res {
                ConsensusResult::Decided(_) => decided += 1,
                ConsensusResult::TransientError => errors += 1,
                ConsensusResult::Bot => {}
            }
        }
    }
    let has_verdicts = runs.iter().all(|r| r.report.verdict("leaves_bot").is_some() && r.report.verdict("def2_or_error").is_some());
    Line {
        id,
        name,
        pass: s.all_pass() && has_verdicts && s.runs == 1000,
        detail: format!("{}; recipes {recipes:?}; final results {decided} decided, {errors} error symbol", describe(&s)),
    }
}

// -- Criterion 4 ------------------------------------------------------------

fn contrast_line() -> Line {
    let rows = par_map(0..200, |s| {
        let cfg = contrast_config(n_for(s), s);
        let mrt = run_mrt(&SimConfig { scenario: ScenarioKind::Mrt, ..cfg.clone() }, false).unwrap();
        let mv = run_mv(&cfg, false).unwrap();
        (mrt.liveness_failure, mv.report.pass())
    });
    let mut split = BTreeMap::new();
    for (lf, ok) in &rows {
        let key = format!("baseline {} / mv {}", if *lf { "stuck" } else { "live" }, if *ok { "pass" } else { "fail" });
        *split.entry(key).or_insert(0) += 1;
    }
    let wanted = rows.iter().filter(|(lf, ok)| *lf && *ok).count();
    Line {
        id: 4,
        name: "baseline liveness failure vs mv",
        pass: wanted * 100 >= 95 * rows.len(),
        detail: format!("{wanted}/{} seeds show the contrast; split {split:?}", rows.len()),
    }
}

// -- Criterion 5 ------------------------------------------------------------

fn variants_line(seq_ok: bool, conc_def1: &[MvRun], conc_ok: bool) -> Line {
    let single = conc_def1.iter().all(|r| r.report.verdict("single_step").is_some_and(|v| v.pass));
    let max_steps = conc_def1.iter().filter_map(|r| r.report.stat_u64("max_invoke_steps")).max().unwrap_or(0);
    Line {
        id: 5,
        name: "both variants",
        pass: seq_ok && conc_ok && single && max_steps <= 1,
        detail: format!(
            "sequential {}, concurrent {}, concurrent invoke steps per process at most {max_steps}",
            if seq_ok { "passes 1-3" } else { "FAILS 1-3" },
            if conc_ok { "passes 1-3" } else { "FAILS 1-3" }
        ),
    }
}

// -- Criteria 6 to 8 --------------------------------------------------------

fn to_line(runs: &[ToRun]) -> Line {
    let s = summary(&runs.iter().map(|r| &r.report).collect::<Vec<_>>());
    let max_c = runs.iter().filter_map(|r| r.cycles_to_legality).max();
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for r in runs {
        *hist.entry(r.cycles_to_legality.unwrap_or(u64::MAX)).or_default() += 1;
    }
    let fresh: u64 = runs.iter().filter_map(|r| r.report.stat_u64("fresh_messages")).sum();
    let untainted = runs.iter().filter_map(|r| r.report.stat_u64("cycles_to_untainted")).max();
    let injected = runs.iter().all(|r| r.injected_at.is_some());
    Line {
        id: 6,
        name: "total order after legality",
        pass: s.all_pass() && injected && s.runs == 300,
        detail: format!(
            "{}; max cycles to legality {max_c:?} (bound 6), histogram {hist:?}; {fresh} post-legality broadcasts order-checked; \
             objects built from injected state all decided within {untainted:?} cycles",
            describe(&s)
        ),
    }
}

fn quiescence_line(runs: &[ToRun]) -> Line {
    let s = summary(&runs.iter().map(|r| &r.report).collect::<Vec<_>>());
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for r in runs {
        *hist.entry(r.quiescence_cycles.unwrap_or(u64::MAX)).or_default() += 1;
    }
    let within = runs.iter().filter(|r| r.quiescence_cycles.is_some_and(|c| c <= 3)).count();
    let after_ready = runs.iter().filter_map(|r| r.report.stat_u64("cycles_after_last_ready")).max();
    let after_delivery = runs.iter().filter_map(|r| r.report.stat_u64("cycles_after_last_delivery")).max();
    Line {
        id: 7,
        name: "quiescence",
        pass: s.all_pass() && s.runs == 100,
        detail: format!(
            "{}; pred within 3 cycles of the last broadcast on {within}/{}; cycles after the last broadcast {hist:?}; \
             max cycles after the last new ready message {after_ready:?}, after the last delivery {after_delivery:?}",
            describe(&s),
            runs.len()
        ),
    }
}

fn rsm_line(runs: &[ToRun]) -> Line {
    let s = summary(&runs.iter().map(|r| &r.report).collect::<Vec<_>>());
    let identical = runs.iter().all(|r| {
        r.snapshots.len() >= 2 && r.snapshots.windows(2).all(|w| w[0].1 == w[1].1)
    });
    let applied = runs.iter().filter_map(|r| r.report.stat_u64("delivered")).min();
    Line {
        id: 8,
        name: "replicated state machine",
        pass: s.all_pass() && identical && s.runs == 100,
        detail: format!("{}; snapshots bit-identical in every run: {identical}; fewest commands applied {applied:?}", describe(&s)),
    }
}

// -- Criterion 9 ------------------------------------------------------------

const STATES: [BcObject; 4] = [
    BcObject::Inactive,
    BcObject::Active { my_proposal: false, decided: None },
    BcObject::Active { my_proposal: true, decided: Some(true) },
    BcObject::Active { my_proposal: false, decided: Some(false) },
];

/// `max({-1} ∪ {x : S(x) ⊆ K})`, `K` the indices holding an active object decided False.
fn oracle_k(bc: &[BcObject]) -> i64 {
    let k_set: Vec<usize> = (0..bc.len())
        .filter(|&i| matches!(bc[i], BcObject::Active { decided: Some(false), .. }))
        .collect();
    let mut best = -1;
    for x in 0..bc.len() {
        if (0..=x).all(|i| k_set.contains(&i)) {
            best = best.max(x as i64);
        }
    }
    best
}

fn oracle_result(active: bool, v: &Option<Value>, bc: &[BcObject], proposals: &[Option<Value>]) -> ConsensusResult {
    let n = bc.len() as i64;
    if !active {
        return ConsensusResult::Bot;
    }
    let k = oracle_k(bc);
    if v.is_none() || k >= n - 1 {
        return ConsensusResult::TransientError;
    }
    let j = (k + 1) as usize;
    let decided_true = matches!(bc[j], BcObject::Active { decided: Some(true), .. });
    if !decided_true {
        return ConsensusResult::Bot;
    }
    match &proposals[j] {
        None => ConsensusResult::TransientError,
        Some(x) => ConsensusResult::Decided(x.clone()),
    }
}

fn cascade_line() -> Line {
    let n = 4;
    let full: Vec<Option<Value>> = (0..n).map(|i| Some(Value::from_string(format!("p{i}")))).collect();
    let mut checked = 0;
    let mut mismatches = Vec::new();
    let mut vectors = 0;
    for code in 0..4usize.pow(n as u32) {
        let bc: Vec<BcObject> = (0..n).map(|i| STATES[(code >> (2 * i)) & 3]).collect();
        vectors += 1;
        let mut variants: Vec<(Option<Value>, Vec<Option<Value>>)> = vec![(Some(Value::from_string("v".into())), full.clone()), (None, full.clone())];
        for hole in 0..n {
            let mut p = full.clone();
            p[hole] = None;
            variants.push((Some(Value::from_string("v".into())), p));
        }
        for (v, proposals) in variants {
            let o = MvObject { v: v.clone(), proposals: proposals.clone(), bc: bc.clone(), ..MvObject::fresh(1, n, Value::from_string("x".into())) };
            if o.k() != oracle_k(&bc) {
                mismatches.push(format!("k at {bc:?}"));
            }
            let slot = MvSlot { n, object: Some(o) };
            if slot.result() != oracle_result(true, &v, &bc, &proposals) {
                mismatches.push(format!("result at {bc:?}"));
            }
            checked += 1;
        }
    }
    let inactive_ok = MvSlot::new(n).result() == oracle_result(false, &None, &vec![BcObject::Inactive; n], &full);
    Line {
        id: 9,
        name: "kMacro and result oracle",
        pass: mismatches.is_empty() && inactive_ok && vectors == 256,
        detail: format!("{vectors} BC vectors, {checked} objects compared, {} mismatches {:?}", mismatches.len(), mismatches.first()),
    }
}

// -- Criterion 10 -----------------------------------------------------------

fn determinism_line() -> Line {
    let mut cfgs = Vec::new();
    for s in 0..10u64 {
        cfgs.push(consensus_config(n_for(s), s, Variant::Sequential));
        cfgs.push(convergence_config(n_for(s), s, Variant::Concurrent));
        cfgs.push(SimConfig { scenario: ScenarioKind::Mrt, ..contrast_config(n_for(s), s) });
        cfgs.push(to_config(n_for(s), s, s % 2 == 0));
        cfgs.push(rsm_config(s));
    }
    let first = par_map(0..cfgs.len() as u64, |i| run(&cfgs[i as usize], false).unwrap().report.trace_hash);
    let second = par_map(0..cfgs.len() as u64, |i| run(&cfgs[i as usize], true).unwrap().report.trace_hash);
    let same = first.iter().zip(&second).filter(|(a, b)| a == b).count();
    let distinct: std::collections::BTreeSet<&String> = first.iter().collect();
    Line {
        id: 10,
        name: "deterministic traces",
        pass: same == cfgs.len() && distinct.len() == cfgs.len(),
        detail: format!("{same}/{} reruns reproduce the hash, {} distinct hashes", cfgs.len(), distinct.len()),
    }
}

fn all_pass(runs: &[MvRun]) -> bool {
    runs.iter().all(|r| r.report.pass())
}

fn main() {
    let started = Instant::now();
    let (seq_def1, seq_took) = def1_suite(Variant::Sequential);
    let (conc_def1, conc_took) = def1_suite(Variant::Concurrent);
    let seq_conv = convergence(Variant::Sequential);
    let conc_conv = convergence(Variant::Concurrent);
    let to_runs = par_map(0..300, |s| run_to_urb(&to_config(n_for(s), s, true), false).unwrap());
    let quiet_runs = par_map(0..100, |s| run_to_urb(&to_config(n_for(s), s, false), false).unwrap());
    let rsm_runs = par_map(0..100, |s| run_rsm(&rsm_config(s), false).unwrap());

    let l1 = def1_line(1, "consensus properties (sequential)", &seq_def1, seq_took);
    let l1c = def1_line(1, "consensus properties (concurrent)", &conc_def1, conc_took);
    let l2 = bc_bound_line(&seq_def1, &conc_def1);
    let l3 = convergence_line(3, "convergence (sequential)", &seq_conv);
    let l3c = convergence_line(3, "convergence (concurrent)", &conc_conv);
    let seq_ok = l1.pass && l3.pass && all_pass(&seq_def1);
    let conc_ok = l1c.pass && l3c.pass && all_pass(&conc_def1);
    let l5 = variants_line(seq_ok && l2.pass, &conc_def1, conc_ok && l2.pass);
    let lines = vec![
        l1,
        l1c,
        l2,
        l3,
        l3c,
        contrast_line(),
        l5,
        to_line(&to_runs),
        quiescence_line(&quiet_runs),
        rsm_line(&rsm_runs),
        cascade_line(),
        determinism_line(),
    ];

    let mut failed = 0;
    for l in &lines {
        println!("criterion {:>2} {:<36} {}  {}", l.id, l.name, if l.pass { "PASS" } else { "FAIL" }, l.detail);
        failed += usize::from(!l.pass);
    }
    println!("acceptance: {} checks, {failed} failed, {:.1}s", lines.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
