use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::controller::{Controller, ControllerConfig, PpoDiagnostics, Trajectory};
use super::evaluator::Evaluator;
use super::history::{HistoryRow, HistoryWriter, SearchHistory};
use super::reward::{reward, RewardConfig};
use super::SearchError;
use crate::archspace::{detokenize, resolve, ArchitectureSpec, ReferenceBase, TokenSequence};
use crate::cost::{arch_cost, CostReport};

pub const THREADS_ENV: &str = "UNINAS_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub num_samples: usize,
    pub topk: usize,
    pub proxy_epochs: usize,
    pub seed: u64,
    /// Evaluation pool width; `None` uses all cores. Capped by
    /// `UNINAS_THREADS` when set.
    pub workers: Option<usize>,
    /// Store measured evaluation time in `wall_ms` instead of zero. Makes
    /// history files run-dependent.
    pub record_wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            num_samples: 2000,
            topk: 5,
            proxy_epochs: 5,
            seed: 0,
            workers: None,
            record_wall_time: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.topk == 0 || self.num_samples < self.topk {
            return Err(SearchError::Config(format!(
                "need samples >= topk >= 1, got samples {} topk {}",
                self.num_samples, self.topk
            )));
        }
        if self.workers == Some(0) {
            return Err(SearchError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_workers(&self) -> usize {
        let requested = self.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0);
        cap.map_or(requested, |c| requested.min(c)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedArchitecture {
    pub rank: usize,
    pub index: usize,
    pub tokens: TokenSequence,
    #[serde(skip)]
    pub spec: ArchitectureSpec,
    pub macs: u64,
    pub accuracy: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub topk: Vec<RankedArchitecture>,
    pub history: SearchHistory,
    pub updates: Vec<PpoDiagnostics>,
}

fn mix_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Evaluated {
    macs: u64,
    accuracy: f64,
    reward: f64,
    wall_ms: u64,
}

fn evaluate_one(
    tokens: &TokenSequence,
    base: &ReferenceBase,
    evaluator: &dyn Evaluator,
    reward_cfg: &RewardConfig,
    seed: u64,
    record_wall_time: bool,
) -> Evaluated {
    let start = Instant::now();
    let outcome = resolve(&detokenize(tokens), base).map_err(SearchError::from).map(|spec| {
        let macs = arch_cost(&spec).total_macs;
        let result = evaluator
            .evaluate(&spec, seed)
            .and_then(|a| reward(a, macs as f64, reward_cfg).map(|r| (a, r)));
        (macs, result)
    });
    let wall_ms = if record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    match outcome {
        Ok((macs, Ok((accuracy, reward)))) => Evaluated {
            macs,
            accuracy,
            reward,
            wall_ms,
        },
        Ok((macs, Err(_))) => Evaluated {
            macs,
            accuracy: f64::NAN,
            reward: 0.0,
            wall_ms,
        },
        Err(_) => Evaluated {
            macs: 0,
            accuracy: f64::NAN,
            reward: 0.0,
            wall_ms,
        },
    }
}

/// Controller-driven search: sample a batch, resolve and cost each
/// architecture, evaluate the batch in parallel, append to the history
/// (written to `history_path` as it grows), then update the controller.
///
/// Results do not depend on the pool width: each sample's evaluation seed
/// is derived from its index and rewards are gathered in index order.
pub fn run_search(
    base: &ReferenceBase,
    evaluator: &dyn Evaluator,
    reward_cfg: &RewardConfig,
    controller_cfg: &ControllerConfig,
    cfg: &SearchConfig,
    history_path: Option<&Path>,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let mut controller = Controller::new(controller_cfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_workers())
        .build()
        .map_err(|e| SearchError::Internal(format!("worker pool: {e}")))?;
    let mut writer = history_path.map(HistoryWriter::create).transpose()?;
    let mut history = SearchHistory::new();
    let mut updates = Vec::new();
    let batch_size = controller_cfg.ppo.batch_size;
    while history.len() < cfg.num_samples {
        let n = batch_size.min(cfg.num_samples - history.len());
        let samples = controller.sample_batch(n, &mut rng, false)?;
        let first = history.len();
        let results: Vec<Evaluated> = pool.install(|| {
            samples
                .par_iter()
                .enumerate()
                .map(|(k, s)| {
                    evaluate_one(
                        &s.tokens,
                        base,
                        evaluator,
                        reward_cfg,
                        mix_seed(cfg.seed, first + k),
                        cfg.record_wall_time,
                    )
                })
                .collect()
        });
        let mut batch = Vec::with_capacity(n);
        for (k, (s, e)) in samples.iter().zip(results).enumerate() {
            let row = HistoryRow {
                index: first + k,
                tokens: s.tokens.clone(),
                macs: e.macs,
                accuracy: e.accuracy,
                reward: e.reward,
                wall_ms: e.wall_ms,
            };
            if let Some(w) = writer.as_mut() {
                w.append(&row)?;
            }
            history.push(row)?;
            batch.push(Trajectory {
                tokens: s.tokens.as_slice().to_vec(),
                old_log_probs: s.log_probs.clone(),
                reward: e.reward,
            });
        }
        updates.push(controller.ppo_update(&batch)?);
    }
    let topk = top_k(&history, base, cfg.topk)?;
    Ok(SearchOutcome { topk, history, updates })
}

/// Highest-reward rows; on equal reward the earlier sample ranks first.
pub fn top_k(history: &SearchHistory, base: &ReferenceBase, k: usize) -> Result<Vec<RankedArchitecture>, SearchError> {
    let mut order: Vec<&HistoryRow> = history.rows().iter().collect();
    order.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.index.cmp(&b.index)));
    order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, r)| {
            Ok(RankedArchitecture {
                rank: rank + 1,
                index: r.index,
                tokens: r.tokens.clone(),
                spec: r.spec(base)?,
                macs: r.macs,
                accuracy: r.accuracy,
                reward: r.reward,
            })
        })
        .collect()
}

/// Architecture document with its cost report and search record attached.
pub fn ranked_document(r: &RankedArchitecture) -> serde_json::Value {
    let mut doc = r.spec.to_json_value();
    let cost: CostReport = arch_cost(&r.spec);
    doc["cost"] = serde_json::to_value(cost).expect("cost serialises");
    doc["search"] = serde_json::to_value(r).expect("record serialises");
    doc
}

/// Write `top1.json` .. `topK.json` into `dir`; returns the paths.
pub fn export_topk(topk: &[RankedArchitecture], dir: &Path) -> Result<Vec<PathBuf>, SearchError> {
    std::fs::create_dir_all(dir)?;
    topk.iter()
        .map(|r| {
            let path = dir.join(format!("top{}.json", r.rank));
            let text = serde_json::to_string_pretty(&ranked_document(r)).expect("document serialises");
            std::fs::write(&path, text + "\n")?;
            Ok(path)
        })
        .collect()
}
