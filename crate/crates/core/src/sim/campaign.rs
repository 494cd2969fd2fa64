//! Seeded run families and a parallel driver. Every config is a pure
//! function of its seed, so any failing run replays from the seed alone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mv::Variant;
use crate::sim::config::{FaultConfig, ScenarioKind, SimConfig, TransientSpec, Workload};
use crate::sim::faults::Recipe;
use crate::sim::report::RunReport;

fn family_rng(seed: u64, family: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ family.rotate_left(32))
}

fn lossy() -> FaultConfig {
    FaultConfig { drop_prob: 0.1, dup_prob: 0.05, reorder: true, ..FaultConfig::default() }
}

/// Schedule `count` crashes of distinct processes at steps below `horizon`.
fn crashes(rng: &mut ChaCha8Rng, n: usize, count: usize, horizon: u64) -> BTreeMap<u32, u64> {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    ids.into_iter().take(count).map(|p| (p, rng.gen_range(0..horizon))).collect()
}

/// Fault-free consensus runs: crashes and lossy channels, no corruption.
/// The crash count cycles through `0..=(n-1)/2` with the seed.
pub fn consensus_config(n: usize, seed: u64, variant: Variant) -> SimConfig {
    let t = SimConfig::max_faulty(n);
    let mut rng = family_rng(seed, 1);
    let mut faults = lossy();
    faults.crashes = crashes(&mut rng, n, seed as usize % (t + 1), 40 * n as u64);
    SimConfig { n, t, seed, variant, faults, budget: 100_000, scenario: ScenarioKind::Mv, ..SimConfig::default() }
}

/// Consensus started from a corrupted state. Recipes rotate with the seed.
pub fn convergence_config(n: usize, seed: u64, variant: Variant) -> SimConfig {
    let mut cfg = consensus_config(n, seed, variant);
    let recipe = match seed % 4 {
        0 => Recipe::AllBcFalse,
        1 => Recipe::SkipBroadcast,
        _ => Recipe::Random,
    };
    cfg.faults.transient = Some(TransientSpec { at_step: 0, recipe });
    cfg
}

/// Shared corruption for the baseline comparison; pair with
/// [`ScenarioKind::Mrt`] and [`ScenarioKind::Mv`].
pub fn contrast_config(n: usize, seed: u64) -> SimConfig {
    let mut cfg = consensus_config(n, seed, Variant::Sequential);
    cfg.faults.crashes.clear();
    cfg.faults.transient = Some(TransientSpec { at_step: 0, recipe: Recipe::AllBcFalse });
    cfg
}

/// Total-order runs with broadcasts, crashes and, when `inject`, one
/// randomized corruption in the middle of the workload.
pub fn to_config(n: usize, seed: u64, inject: bool) -> SimConfig {
    let t = SimConfig::max_faulty(n);
    let mut rng = family_rng(seed, 2);
    let workload = Workload { messages: 12, window: 3_000, tail: 2_000 };
    let mut faults = lossy();
    faults.crashes = crashes(&mut rng, n, seed as usize % (t + 1), workload.window);
    if inject {
        let at = rng.gen_range(workload.window / 4..workload.window / 2);
        faults.transient = Some(TransientSpec { at_step: at, recipe: Recipe::Random });
    }
    SimConfig { n, t, seed, faults, workload, budget: 200_000, scenario: ScenarioKind::ToUrb, ..SimConfig::default() }
}

/// Three replicas, twenty commands, one injection.
pub fn rsm_config(seed: u64) -> SimConfig {
    let mut cfg = to_config(3, seed, true);
    cfg.scenario = ScenarioKind::Rsm;
    cfg.workload.messages = 20;
    cfg
}

/// Pass/fail tally over a family of runs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub passed: usize,
    pub failed_seeds: Vec<u64>,
    /// Per verdict name: number of failing runs.
    pub failures_by_verdict: BTreeMap<String, usize>,
}

impl Summary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> Self {
        let mut s = Summary::default();
        for r in reports {
            s.runs += 1;
            if r.pass() {
                s.passed += 1;
            } else {
                s.failed_seeds.push(r.config.seed);
                for v in r.failures() {
                    *s.failures_by_verdict.entry(v.name.clone()).or_default() += 1;
                }
            }
        }
        s
    }

    pub fn all_pass(&self) -> bool {
        self.passed == self.runs
    }
}

/// Run `f` over every seed on the rayon pool; results keep seed order.
pub fn par_map<T: Send>(seeds: impl IntoParallelIterator<Item = u64>, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    seeds.into_par_iter().map(f).collect()
}
