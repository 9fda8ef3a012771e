//! Dataset generation with Newton-Raphson ground truth, train/val/test
//! splits, JSON-lines storage and robustness scenarios.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{build_ybus, to_graph, Network, NetworkFingerprint, EDGE_FEATURES, NODE_FEATURES};
use crate::solver::{newton_raphson_with, power_injections, VoltageState, NR_DEFAULT_MAX_ITER};

/// Ground-truth tolerance for stored samples.
pub const TRUTH_TOL: f64 = 1e-8;
pub const SPLIT_FRACTIONS: (f64, f64) = (0.70, 0.15);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generation request: {0}")]
    Config(String),
    #[error("redraw budget exhausted: {attempts} attempts for {n} samples")]
    Budget { attempts: usize, n: usize },
    #[error("only {found} of {requested} branch outages keep the network connected")]
    Islanding { found: usize, requested: usize },
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Case name, if the network came from a named case.
    #[serde(default)]
    pub case: Option<String>,
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
    pub tol: f64,
}

/// One operating point with its Newton-Raphson solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    /// Seed of the accepted draw.
    pub seed: u64,
    pub load_scale: Vec<f64>,
    pub nodes: Vec<[f64; NODE_FEATURES]>,
    pub edge_attr: Vec<[f64; EDGE_FEATURES]>,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    /// Net active injection at the slack bus in the solution.
    pub slack_p_truth: f64,
    pub nr_iterations: usize,
}

impl Sample {
    pub fn n_buses(&self) -> usize {
        self.vm.len()
    }

    pub fn state(&self) -> VoltageState {
        VoltageState::new(self.vm.clone(), self.va.clone())
    }

    /// `(|V|, cos δ, sin δ)` per bus.
    pub fn target(&self) -> Vec<[f64; 3]> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| [m, a.cos(), a.sin()])
            .collect()
    }

    /// The base network with this sample's loads applied.
    pub fn network(&self, base: &Network) -> Network {
        base.with_load_scale(&self.load_scale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// 70/15/15 split of a seeded permutation of `0..n`.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, 0x5EED)));
        let n_train = (n as f64 * SPLIT_FRACTIONS.0).round() as usize;
        let n_val = ((n as f64 * SPLIT_FRACTIONS.1).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub fingerprint: NetworkFingerprint,
    pub samples: Vec<Sample>,
    pub splits: Splits,
    /// Draws rejected because Newton-Raphson did not converge.
    pub discarded: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: GenConfig,
    fingerprint: NetworkFingerprint,
    splits: Splits,
    discarded: usize,
    n_samples: usize,
}

impl Dataset {
    pub fn split(&self, which: SplitKind) -> Vec<&Sample> {
        let ids = match which {
            SplitKind::Train => &self.splits.train,
            SplitKind::Val => &self.splits.val,
            SplitKind::Test => &self.splits.test,
            SplitKind::All => return self.samples.iter().collect(),
        };
        ids.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        let header = Header {
            config: self.config.clone(),
            fingerprint: self.fingerprint.clone(),
            splits: self.splits.clone(),
            discarded: self.discarded,
            n_samples: self.samples.len(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| DataError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s).map_err(|e| DataError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| DataError::Format("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| DataError::Format(format!("header: {e}")))?;
        let mut samples = Vec::with_capacity(header.n_samples);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample =
                serde_json::from_str(&line).map_err(|e| DataError::Format(format!("sample line {}: {e}", k + 2)))?;
            samples.push(s);
        }
        if samples.len() != header.n_samples {
            return Err(DataError::Format(format!(
                "header declares {} samples, found {}",
                header.n_samples,
                samples.len()
            )));
        }
        let n = samples.len();
        let all_ids = header.splits.train.iter().chain(&header.splits.val).chain(&header.splits.test);
        let mut seen = vec![false; n];
        for &i in all_ids {
            if i >= n || seen[i] {
                return Err(DataError::Format(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(DataError::Format("splits do not cover every sample".into()));
        }
        Ok(Self {
            config: header.config,
            fingerprint: header.fingerprint,
            samples,
            splits: header.splits,
            discarded: header.discarded,
        })
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
    All,
}

/// SplitMix64-style mixing of a seed with a sample index and attempt.
pub fn mix(seed: u64, index: u64, attempt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)))
        .wrapping_add(0xD1B5_4A32_D192_ED03u64.wrapping_mul(attempt.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Solves `net` with the given per-bus load multipliers. `None` when
/// Newton-Raphson does not reach the truth tolerance from flat start.
pub fn solve_sample(net: &Network, load_scale: Vec<f64>, index: usize, seed: u64) -> Option<Sample> {
    let loaded = net.with_load_scale(&load_scale);
    let y = build_ybus(&loaded);
    let rep = newton_raphson_with(&loaded, &y, &VoltageState::flat_start(&loaded), TRUTH_TOL, NR_DEFAULT_MAX_ITER).ok()?;
    if !rep.converged {
        return None;
    }
    let (p, _) = power_injections(&rep.state, &y);
    let graph = to_graph(&loaded);
    Some(Sample {
        index,
        seed,
        load_scale,
        nodes: graph.nodes,
        edge_attr: graph.edge_attr,
        slack_p_truth: p[loaded.slack()],
        nr_iterations: rep.iterations,
        vm: rep.state.vm,
        va: rep.state.va,
    })
}

/// Draws `n` operating points with per-bus load multipliers uniform in
/// `[lo, hi]`, redrawing any that Newton-Raphson fails to solve.
pub fn generate(net: &Network, n: usize, lo: f64, hi: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Config("n must be at least 1".into()));
    }
    if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
        return Err(DataError::Config(format!("need 0 <= lo <= hi, got [{lo}, {hi}]")));
    }
    let budget = 10 * n;
    let n_bus = net.n_buses();
    let draw = |index: usize| -> (Option<Sample>, usize) {
        for attempt in 0..budget {
            let s = mix(seed, index as u64, attempt as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let scale: Vec<f64> = (0..n_bus)
                .map(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) })
                .collect();
            if let Some(sample) = solve_sample(net, scale, index, s) {
                return (Some(sample), attempt + 1);
            }
        }
        (None, budget)
    };
    let results: Vec<(Option<Sample>, usize)> = (0..n).into_par_iter().map(draw).collect();
    let attempts: usize = results.iter().map(|r| r.1).sum();
    if attempts > budget || results.iter().any(|r| r.0.is_none()) {
        return Err(DataError::Budget { attempts, n });
    }
    let discarded = attempts - n;
    if discarded > 0 {
        log::warn!("{discarded} non-convergent draws redrawn while generating {n} samples");
    }
    let samples = results.into_iter().map(|r| r.0.expect("checked")).collect();
    Ok(Dataset {
        config: GenConfig {
            case: None,
            n,
            lo,
            hi,
            seed,
            tol: TRUTH_TOL,
        },
        fingerprint: net.fingerprint(),
        samples,
        splits: Splits::new(n, seed),
        discarded,
    })
}

/// Loads uniformly between 120% and 150% of nominal.
pub fn heavy_load_scenarios(net: &Network, n: usize, seed: u64) -> Result<Dataset, DataError> {
    generate(net, n, 1.2, 1.5, seed)
}

/// `k` distinct single-branch outages that keep the network connected,
/// sampled without replacement in seeded order.
pub fn n1_contingencies(net: &Network, k: usize, seed: u64) -> Result<Vec<(Network, usize)>, DataError> {
    let mut candidates: Vec<usize> = net.in_service_branches().map(|(i, _)| i).collect();
    if k > candidates.len() {
        return Err(DataError::Config(format!(
            "k = {k} exceeds the {} in-service branches",
            candidates.len()
        )));
    }
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX - 1, 0xC0)));
    let mut out = Vec::with_capacity(k);
    for br in candidates {
        if out.len() == k {
            break;
        }
        if net.outage_islands(br) {
            continue;
        }
        let outaged = net
            .with_branch_out(br)
            .map_err(|e| DataError::Config(format!("branch {br}: {e}")))?;
        out.push((outaged, br));
    }
    if out.len() < k {
        return Err(DataError::Islanding {
            found: out.len(),
            requested: k,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::bundled_case;
    use crate::solver::mismatch;

    #[test]
    fn degenerate_range_reproduces_nominal() {
        let net = bundled_case("ieee33").unwrap();
        let ds = generate(&net, 3, 1.0, 1.0, 9).unwrap();
        assert_eq!(ds.samples.len(), 3);
        for s in &ds.samples {
            assert!(s.load_scale.iter().all(|&x| x == 1.0));
            assert_eq!(s.vm, ds.samples[0].vm);
            assert_eq!(s.nodes, crate::network::node_features(&net));
        }
    }

    #[test]
    fn truth_satisfies_tolerance_after_round_trip() {
        let net = bundled_case("ieee33").unwrap();
        let ds = generate(&net, 40, 0.0, 2.0, 3).unwrap();
        let back = Dataset::read_jsonl(ds.to_jsonl_string().as_bytes()).unwrap();
        assert_eq!(back, ds);
        for s in &back.samples {
            assert!(mismatch(&s.network(&net), &s.state()).max_abs() <= TRUTH_TOL);
            assert!(s.load_scale.iter().all(|&x| (0.0..=2.0).contains(&x)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let net = bundled_case("ieee69").unwrap();
        let a = generate(&net, 12, 0.0, 2.0, 5).unwrap().to_jsonl_string();
        let b = generate(&net, 12, 0.0, 2.0, 5).unwrap().to_jsonl_string();
        assert_eq!(a, b);
        let c = generate(&net, 12, 0.0, 2.0, 6).unwrap().to_jsonl_string();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_partition_indices() {
        for (n, seed) in [(100, 1), (7, 2), (2000, 3), (1, 4)] {
            let s = Splits::new(n, seed);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert_eq!(s, Splits::new(n, seed));
        }
        let s = Splits::new(2000, 0);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1400, 300, 300));
    }

    #[test]
    fn heavy_scenarios_in_range() {
        let net = bundled_case("ieee69").unwrap();
        let ds = heavy_load_scenarios(&net, 20, 11).unwrap();
        for s in &ds.samples {
            assert!(s.load_scale.iter().all(|&x| (1.2..=1.5).contains(&x)));
        }
        assert!(heavy_load_scenarios(&net, 0, 1).is_err());
    }

    #[test]
    fn contingencies() {
        let radial = bundled_case("ieee33").unwrap();
        assert!(matches!(n1_contingencies(&radial, 5, 1), Err(DataError::Islanding { found: 0, .. })));
        assert!(n1_contingencies(&radial, 0, 1).unwrap().is_empty());
        let meshed = bundled_case("ieee118").unwrap();
        let list = n1_contingencies(&meshed, 100, 42).unwrap();
        assert_eq!(list.len(), 100);
        let mut ids: Vec<usize> = list.iter().map(|c| c.1).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        for (net, br) in &list {
            assert!(!net.branches()[*br].in_service);
        }
        let again: Vec<usize> = n1_contingencies(&meshed, 100, 42).unwrap().iter().map(|c| c.1).collect();
        assert_eq!(again, list.iter().map(|c| c.1).collect::<Vec<_>>());
    }

    #[test]
    fn mix_separates_streams() {
        assert_ne!(mix(1, 0, 0), mix(1, 1, 0));
        assert_ne!(mix(1, 0, 0), mix(1, 0, 1));
        assert_ne!(mix(1, 0, 0), mix(2, 0, 0));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Dataset::read_jsonl("".as_bytes()).is_err());
        let net = bundled_case("ieee33").unwrap();
        let text = generate(&net, 2, 1.0, 1.0, 1).unwrap().to_jsonl_string();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(Dataset::read_jsonl(truncated.as_bytes()).is_err());
    }
}
