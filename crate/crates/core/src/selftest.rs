//! Built-in consistency checks run by `uninas selftest`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archspace::{
    detokenize, family, materialize, micro_spec, space_size, tokenize, ArchitectureSpec, ModelId, ReferenceBase,
    StageChoice, TokenSequence, ARITIES,
};
use crate::cost::{arch_cost, verify_against_counting};
use crate::dsm::{Dsm, DsmKind, DsmParams};
use crate::gops::{BlockParams, GopBlock, GopKind};
use crate::gradcheck::{check_module, GradCheckOptions};
use crate::nn::{Builder, ModelError};
use crate::params::{Initializer, ParamStore};
use crate::search::{reward, run_search, ControllerConfig, RewardConfig, SearchConfig, SurrogateEvaluator};
use crate::tensor::{Conv2dOptions, Tape, Tensor};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Corrupt one analytic gradient so the gradient check fails.
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: u64,
}

type Check = fn(&SelftestOptions) -> Result<String, String>;

const CHECKS: [(&str, Check); 10] = [
    ("space_size", check_space_size),
    ("matmul_oracle", check_matmul),
    ("conv2d_oracle", check_conv2d),
    ("block_gradients", check_block_gradients),
    ("dsm_gradients", check_dsm_gradients),
    ("mac_counting", check_counting),
    ("b0_cost", check_b0_cost),
    ("token_round_trip", check_tokens),
    ("json_round_trip", check_json),
    ("reward_and_search", check_search),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let outcome = check(opts);
            let millis = start.elapsed().as_millis() as u64;
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                millis,
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn check_space_size(_: &SelftestOptions) -> Result<String, String> {
    let s = space_size(5);
    ensure(s.per_stage.to_string() == "1875", || format!("per-stage size {}", s.per_stage))?;
    ensure(s.total.to_string() == "23174285888671875", || format!("total {}", s.total))?;
    Ok(format!("S = {}, total = {}", s.per_stage, s.total))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check_matmul(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let a = random_tensor(&mut rng, &[5, 4]);
    let b = random_tensor(&mut rng, &[4, 3]);
    let tape = Tape::inference();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).map_err(err)?.value();
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 3 + j];
            }
            worst = worst.max((s - c.data()[i * 3 + j]).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e}"))
}

fn check_conv2d(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let (ci, co, h, k, s, p) = (2, 3, 5, 3, 2, 1);
    let x = random_tensor(&mut rng, &[1, ci, h, h]);
    let w = random_tensor(&mut rng, &[co, ci, k, k]);
    let tape = Tape::inference();
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(w.clone()), Conv2dOptions::new(s, p, 1))
        .map_err(err)?
        .value();
    let ho = (h + 2 * p - k) / s + 1;
    let mut worst: f64 = 0.0;
    for o in 0..co {
        for i in 0..ho {
            for j in 0..ho {
                let mut acc = 0.0;
                for c in 0..ci {
                    for di in 0..k {
                        for dj in 0..k {
                            let (yi, xj) = ((i * s + di) as isize - p as isize, (j * s + dj) as isize - p as isize);
                            if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < h {
                                acc += x.data()[(c * h + yi as usize) * h + xj as usize]
                                    * w.data()[((o * ci + c) * k + di) * k + dj];
                            }
                        }
                    }
                }
                worst = worst.max((acc - y.data()[(o * ho + i) * ho + j]).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e}"))
}

fn grad_opts(opts: &SelftestOptions) -> GradCheckOptions {
    GradCheckOptions {
        samples_per_tensor: 6,
        fault: if opts.inject_fault { 1.0 } else { 0.0 },
        ..GradCheckOptions::default()
    }
}

fn check_block_gradients(opts: &SelftestOptions) -> Result<String, String> {
    let hw = (4, 4);
    let mut worst: f64 = 0.0;
    let mut mut_opts = grad_opts(opts);
    for kind in GopKind::ALL {
        let c = if kind.is_attention() { 32 } else { 8 };
        let params = BlockParams::new(kind, c, 2).map_err(err)?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(opts.seed);
        let block = GopBlock::new(&mut Builder::new(&mut store, &mut init), params, hw).map_err(err)?;
        let shape = if kind.is_conv() { vec![2, c, 4, 4] } else { vec![2, 16, c] };
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(opts.seed + 7), &shape);
        let report = check_module(&mut store, &x, &mut_opts, |ctx, x| block.forward(ctx, x, hw)).map_err(err)?;
        mut_opts.fault = 0.0;
        ensure(report.max_rel_error < 1e-4, || {
            format!("{kind}: relative error {:e} in {}", report.max_rel_error, report.worst)
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max relative error {worst:e} over 5 kinds"))
}

fn check_dsm_gradients(opts: &SelftestOptions) -> Result<String, String> {
    let hw = (4, 4);
    let mut worst: f64 = 0.0;
    for kind in DsmKind::ALL {
        let params = DsmParams::new(kind, 32, 32, 2).map_err(err)?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(opts.seed);
        let dsm = Dsm::new(&mut Builder::new(&mut store, &mut init), params).map_err(err)?;
        let shape = if kind == DsmKind::L { vec![2, 32, 4, 4] } else { vec![2, 16, 32] };
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(opts.seed + 11), &shape);
        let report = check_module(&mut store, &x, &grad_opts(&SelftestOptions::default()), |ctx, x| match &dsm {
            Dsm::Local(d) => d.forward(ctx, x),
            Dsm::Attention(d) => Ok::<_, ModelError>(d.forward(ctx, x, hw)?.out),
        })
        .map_err(err)?;
        ensure(report.max_rel_error < 1e-4, || {
            format!("{kind}: relative error {:e} in {}", report.max_rel_error, report.worst)
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max relative error {worst:e} over 3 kinds"))
}

fn check_counting(opts: &SelftestOptions) -> Result<String, String> {
    let mut checked = 0;
    for gop in GopKind::ALL {
        for dsm in DsmKind::ALL {
            let spec = micro_spec([(GopKind::DWConv, DsmKind::L), (gop, dsm)], 32, 32, 4).map_err(err)?;
            let report = verify_against_counting(&spec, opts.seed).map_err(err)?;
            if let Some(bad) = report.mismatches().first() {
                return Err(format!("{gop}/{dsm}: {bad:?}"));
            }
            checked += report.rows.len();
        }
    }
    Ok(format!("{checked} components agree"))
}

fn check_b0_cost(_: &SelftestOptions) -> Result<String, String> {
    let report = arch_cost(&family(ModelId::B0));
    let expected = [68e6, 135e6, 42e6, 63e6, 187e6];
    for (i, (&got, &want)) in report.per_stage_macs.iter().zip(&expected).enumerate() {
        let dev = (got as f64 - want) / want;
        ensure(dev.abs() <= 0.08, || format!("stage {i}: {got} MACs, {:+.1}%", dev * 100.0))?;
    }
    let total_dev = (report.total_macs as f64 - 555e6) / 555e6;
    ensure(total_dev.abs() <= 0.10, || format!("total {} MACs", report.total_macs))?;
    Ok(format!("{} MACs, {} params", report.total_macs, report.total_params))
}

fn check_tokens(opts: &SelftestOptions) -> Result<String, String> {
    let mut count = 0;
    for a in 0..ARITIES[0] {
        for b in 0..ARITIES[1] {
            for c in 0..ARITIES[2] {
                for d in 0..ARITIES[3] {
                    for e in 0..ARITIES[4] {
                        let t = [a, b, c, d, e];
                        let choice = StageChoice::from_tokens(&t).map_err(err)?;
                        ensure(choice.to_tokens().map_err(err)? == t, || format!("{t:?} does not round-trip"))?;
                        count += 1;
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..200 {
        let tokens: Vec<usize> = (0..25).map(|i| rng.gen_range(0..ARITIES[i % 5])).collect();
        let seq = TokenSequence::new(tokens).map_err(err)?;
        ensure(tokenize(&detokenize(&seq)).map_err(err)? == seq, || format!("{seq} does not round-trip"))?;
    }
    Ok(format!("{count} stage tuples and 200 sequences"))
}

fn check_json(_: &SelftestOptions) -> Result<String, String> {
    for m in ModelId::ALL {
        let spec = family(m);
        let back = ArchitectureSpec::from_json(&spec.to_json()).map_err(err)?;
        ensure(back == spec, || format!("{m} changed in JSON round trip"))?;
    }
    let spec = micro_spec([(GopKind::DWConv, DsmKind::L), (GopKind::SA, DsmKind::LG)], 32, 32, 2).map_err(err)?;
    let net = materialize(&spec, 0).map_err(err)?;
    ensure(net.num_params() == arch_cost(&spec).total_params, || "micro parameter count differs".into())?;
    Ok("7 family specs".into())
}

fn check_search(opts: &SelftestOptions) -> Result<String, String> {
    let r = reward(0.79, 555e6, &RewardConfig::default()).map_err(err)?;
    ensure((r - 0.78950).abs() <= 1e-5, || format!("reward example gave {r}"))?;
    let cfg = SearchConfig {
        num_samples: 32,
        topk: 3,
        seed: opts.seed,
        workers: Some(2),
        ..SearchConfig::default()
    };
    let ctrl = ControllerConfig::default();
    let base = ReferenceBase::bundled();
    let ev = SurrogateEvaluator::default();
    let a = run_search(&base, &ev, &RewardConfig::default(), &ctrl, &cfg, None).map_err(err)?;
    let b = run_search(
        &base,
        &ev,
        &RewardConfig::default(),
        &ctrl,
        &SearchConfig {
            workers: Some(1),
            ..cfg.clone()
        },
        None,
    )
    .map_err(err)?;
    ensure(a.history.to_csv_string() == b.history.to_csv_string(), || {
        "search history depends on worker count".into()
    })?;
    Ok(format!("reward {r:.5}, 32-sample search reproducible"))
}
