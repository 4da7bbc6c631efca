use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::archspace::{TokenSequence, ARITIES, NUM_STAGES};
use crate::params::{Adam, AdamConfig, Ctx, Initializer, Mode, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub epochs_per_batch: usize,
    pub batch_size: usize,
    pub entropy_coef: f64,
    pub baseline_decay: f64,
    /// Divide advantages by their batch standard deviation.
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_ratio: 0.2,
            epochs_per_batch: 6,
            batch_size: 8,
            entropy_coef: 3e-3,
            baseline_decay: 0.95,
            normalize_advantages: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub lstm_layers: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub init_range: f64,
    pub ppo: PpoConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lstm_layers: 2,
            hidden: 100,
            learning_rate: 5e-4,
            init_range: 0.1,
            ppo: PpoConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let p = &self.ppo;
        let ok = self.lstm_layers >= 1
            && self.hidden >= 1
            && self.learning_rate > 0.0
            && self.init_range >= 0.0
            && p.clip_ratio > 0.0
            && p.epochs_per_batch >= 1
            && p.batch_size >= 1
            && p.entropy_coef >= 0.0
            && (0.0..1.0).contains(&p.baseline_decay);
        if ok {
            Ok(())
        } else {
            Err(SearchError::Config(format!("invalid controller config {self:?}")))
        }
    }
}

/// One sampled architecture with the log-probability of each decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    pub log_probs: Vec<f64>,
}

impl Sample {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// A sampled sequence paired with the reward it earned.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    /// Per-decision log-probabilities at sampling time.
    pub old_log_probs: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpoDiagnostics {
    pub mean_reward: f64,
    pub baseline: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

/// Autoregressive LSTM policy over the 25 architecture decisions.
///
/// Step `t` consumes an embedding of the previous action (a learned start
/// row at `t = 0`) and emits logits from a head sized to decision `t`.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    arities: Vec<usize>,
    offsets: Vec<usize>,
    params: ParamStore,
    embed: ParamId,
    layers: Vec<LstmLayer>,
    heads: Vec<Head>,
    adam: Adam,
    baseline: Option<f64>,
}

struct Forward<'t> {
    /// `[B]` log-probability of the chosen action at each step.
    steps: Vec<Var<'t>>,
    log_prob: Var<'t>,
    entropy: Var<'t>,
}

impl Controller {
    pub fn new(config: ControllerConfig, seed: u64) -> Result<Self, SearchError> {
        Self::with_arities(config, ARITIES.repeat(NUM_STAGES), seed)
    }

    pub fn with_arities(config: ControllerConfig, arities: Vec<usize>, seed: u64) -> Result<Self, SearchError> {
        config.validate()?;
        if arities.is_empty() || arities.contains(&0) {
            return Err(SearchError::Config("every decision needs at least one option".into()));
        }
        let mut offsets = Vec::with_capacity(arities.len());
        let mut vocab = 1;
        for &a in &arities {
            offsets.push(vocab);
            vocab += a;
        }
        let h = config.hidden;
        let r = config.init_range;
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let embed = params.add("embed", init.uniform(&[vocab, h], r), true);
        let layers = (0..config.lstm_layers)
            .map(|l| LstmLayer {
                w_ih: params.add(format!("lstm{l}.w_ih"), init.uniform(&[h, 4 * h], r), true),
                w_hh: params.add(format!("lstm{l}.w_hh"), init.uniform(&[h, 4 * h], r), true),
                bias: params.add(format!("lstm{l}.bias"), init.uniform(&[4 * h], r), true),
            })
            .collect();
        let heads = arities
            .iter()
            .enumerate()
            .map(|(t, &a)| Head {
                weight: params.add(format!("head{t}.weight"), init.uniform(&[h, a], r), true),
                bias: params.add(format!("head{t}.bias"), init.uniform(&[a], r), true),
            })
            .collect();
        let adam = Adam::new(AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        });
        Ok(Controller {
            config,
            arities,
            offsets,
            params,
            embed,
            layers,
            heads,
            adam,
            baseline: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn set_baseline(&mut self, value: Option<f64>) {
        self.baseline = value;
    }

    fn input_rows(&self, step: usize, previous: &[usize]) -> Vec<usize> {
        if step == 0 {
            vec![0; previous.len()]
        } else {
            previous.iter().map(|&a| self.offsets[step - 1] + a).collect()
        }
    }

    fn lstm_step<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        x: Var<'t>,
        state: &mut [(Var<'t>, Var<'t>)],
    ) -> Result<Var<'t>, SearchError> {
        let h = self.config.hidden;
        let mut x = x;
        for (layer, (hs, cs)) in self.layers.iter().zip(state.iter_mut()) {
            let gates = x
                .matmul(ctx.p(layer.w_ih))?
                .add(hs.matmul(ctx.p(layer.w_hh))?)?
                .add_bias(ctx.p(layer.bias))?;
            let i = gates.narrow(1, 0, h)?.sigmoid()?;
            let f = gates.narrow(1, h, h)?.sigmoid()?;
            let g = gates.narrow(1, 2 * h, h)?.tanh()?;
            let o = gates.narrow(1, 3 * h, h)?.sigmoid()?;
            let c = f.mul(*cs)?.add(i.mul(g)?)?;
            let hn = o.mul(c.tanh()?)?;
            *hs = hn;
            *cs = c;
            x = hn;
        }
        Ok(x)
    }

    fn initial_state<'t>(&self, tape: &'t Tape, batch: usize) -> Vec<(Var<'t>, Var<'t>)> {
        let h = self.config.hidden;
        (0..self.layers.len())
            .map(|_| (tape.constant(Tensor::zeros(&[batch, h])), tape.constant(Tensor::zeros(&[batch, h]))))
            .collect()
    }

    fn step_logits<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        step: usize,
        previous: &[usize],
        state: &mut [(Var<'t>, Var<'t>)],
    ) -> Result<Var<'t>, SearchError> {
        let x = ctx.p(self.embed).index_select(0, &self.input_rows(step, previous))?;
        let h = self.lstm_step(ctx, x, state)?;
        let head = &self.heads[step];
        Ok(h.linear(ctx.p(head.weight), Some(ctx.p(head.bias)))?)
    }

    /// Per-decision probability vectors along a fixed token sequence.
    pub fn decision_probabilities(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, SearchError> {
        self.check_tokens(tokens)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.params, Mode::Eval);
        let mut state = self.initial_state(&tape, 1);
        let mut out = Vec::with_capacity(tokens.len());
        let mut prev = vec![0];
        for (t, &tok) in tokens.iter().enumerate() {
            let logits = self.step_logits(&ctx, t, &prev, &mut state)?;
            out.push(logits.softmax(1)?.value().into_data());
            prev = vec![tok];
        }
        Ok(out)
    }

    /// Draw `n` sequences; `greedy` takes the most likely action (lowest
    /// index on ties) instead of sampling.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng, greedy: bool) -> Result<Vec<Sample>, SearchError> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.params, Mode::Eval);
        let mut state = self.initial_state(&tape, n);
        let mut tokens = vec![Vec::with_capacity(self.arities.len()); n];
        let mut log_probs = vec![Vec::with_capacity(self.arities.len()); n];
        let mut prev = vec![0; n];
        for (t, &a) in self.arities.iter().enumerate() {
            let logp = self.step_logits(&ctx, t, &prev, &mut state)?.log_softmax(1)?.value();
            for b in 0..n {
                let row = &logp.data()[b * a..(b + 1) * a];
                let choice = if greedy {
                    argmax(row)
                } else {
                    categorical(row, rng.gen::<f64>())
                };
                tokens[b].push(choice);
                log_probs[b].push(row[choice]);
                prev[b] = choice;
            }
        }
        tokens
            .into_iter()
            .zip(log_probs)
            .map(|(t, lp)| {
                Ok(Sample {
                    tokens: TokenSequence::new(t).map_err(|e| SearchError::Internal(e.to_string()))?,
                    log_probs: lp,
                })
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, greedy: bool) -> Result<Sample, SearchError> {
        Ok(self.sample_batch(1, rng, greedy)?.remove(0))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), SearchError> {
        if tokens.len() != self.arities.len() || tokens.iter().zip(&self.arities).any(|(&t, &a)| t >= a) {
            return Err(SearchError::Config(format!(
                "token sequence {tokens:?} does not fit arities {:?}",
                self.arities
            )));
        }
        Ok(())
    }

    fn teacher_forced<'t>(&self, ctx: &Ctx<'t, '_>, batch: &[&[usize]]) -> Result<Forward<'t>, SearchError> {
        let tape = ctx.tape();
        let n = batch.len();
        let mut state = self.initial_state(tape, n);
        let mut steps = Vec::with_capacity(self.arities.len());
        let mut log_prob: Option<Var<'t>> = None;
        let mut entropy: Option<Var<'t>> = None;
        let mut prev = vec![0; n];
        for t in 0..self.arities.len() {
            let logp = self.step_logits(ctx, t, &prev, &mut state)?.log_softmax(1)?;
            let chosen: Vec<usize> = batch.iter().map(|s| s[t]).collect();
            let lp = logp.pick(&chosen)?;
            let ent = logp.exp()?.mul(logp)?.sum_axis(1)?.neg()?;
            steps.push(lp);
            log_prob = Some(match log_prob {
                Some(acc) => acc.add(lp)?,
                None => lp,
            });
            entropy = Some(match entropy {
                Some(acc) => acc.add(ent)?,
                None => ent,
            });
            prev = chosen;
        }
        Ok(Forward {
            steps,
            log_prob: log_prob.expect("at least one decision"),
            entropy: entropy.expect("at least one decision"),
        })
    }

    /// Sequence log-probabilities under the current parameters.
    pub fn log_probs(&self, batch: &[&[usize]]) -> Result<Vec<f64>, SearchError> {
        for s in batch {
            self.check_tokens(s)?;
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.params, Mode::Eval);
        Ok(self.teacher_forced(&ctx, batch)?.log_prob.value().into_data())
    }

    /// Clipped surrogate loss (to be minimised) and its parameter
    /// gradients, for explicit advantages. Each decision has its own
    /// probability ratio; the sequence advantage is shared by its decisions.
    pub fn surrogate_loss(
        &self,
        batch: &[Trajectory],
        advantages: &[f64],
    ) -> Result<(f64, Vec<(ParamId, Tensor)>, LossStats), SearchError> {
        if batch.is_empty() || batch.len() != advantages.len() {
            return Err(SearchError::Config("PPO update needs a non-empty batch with one advantage each".into()));
        }
        for tr in batch {
            self.check_tokens(&tr.tokens)?;
            if tr.old_log_probs.len() != self.arities.len() {
                return Err(SearchError::Config(format!(
                    "expected {} old log-probabilities, got {}",
                    self.arities.len(),
                    tr.old_log_probs.len()
                )));
            }
        }
        let n = batch.len();
        let steps = self.arities.len();
        let eps = self.config.ppo.clip_ratio;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, Mode::Train);
        let seqs: Vec<&[usize]> = batch.iter().map(|t| t.tokens.as_slice()).collect();
        let fwd = self.teacher_forced(&ctx, &seqs)?;
        let adv = tape.constant(Tensor::new(vec![n], advantages.to_vec())?);
        let mut objective: Option<Var<'_>> = None;
        let (mut kl, mut clipped_count) = (0.0, 0usize);
        for (t, lp) in fwd.steps.iter().enumerate() {
            let old = tape.constant(Tensor::new(vec![n], batch.iter().map(|tr| tr.old_log_probs[t]).collect())?);
            let log_ratio = lp.sub(old)?;
            let ratio = log_ratio.exp()?;
            let term = ratio.mul(adv)?.minimum(ratio.clamp(1.0 - eps, 1.0 + eps)?.mul(adv)?)?;
            objective = Some(match objective {
                Some(acc) => acc.add(term)?,
                None => term,
            });
            kl -= log_ratio.value().data().iter().sum::<f64>();
            clipped_count += ratio.value().data().iter().filter(|r| (**r - 1.0).abs() > eps).count();
        }
        let per_decision = 1.0 / steps as f64;
        let objective = objective.expect("at least one decision").mean()?.scale(per_decision)?;
        let entropy = fwd.entropy.mean()?.scale(per_decision)?;
        let loss = objective.add(entropy.scale(self.config.ppo.entropy_coef)?)?.neg()?;
        let total = (n * steps) as f64;
        let stats = LossStats {
            approx_kl: kl / total,
            clip_fraction: clipped_count as f64 / total,
            entropy: entropy.item().unwrap_or(f64::NAN),
        };
        let value = loss.item().unwrap_or(f64::NAN);
        tape.backward(loss)?;
        let grads = ctx.param_grads();
        Ok((value, grads, stats))
    }

    /// One PPO update on a batch of trajectories. Advantages are rewards
    /// minus a moving-average baseline, which starts at the first batch
    /// mean and is refreshed after the update.
    pub fn ppo_update(&mut self, batch: &[Trajectory]) -> Result<PpoDiagnostics, SearchError> {
        if batch.is_empty() {
            return Err(SearchError::Config("PPO update needs a non-empty batch".into()));
        }
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        let baseline = self.baseline.unwrap_or(mean_reward);
        let mut advantages: Vec<f64> = batch.iter().map(|t| t.reward - baseline).collect();
        if self.config.ppo.normalize_advantages && batch.len() > 1 {
            let n = batch.len() as f64;
            let mean = batch.iter().map(|t| t.reward).sum::<f64>() / n;
            let std = (batch.iter().map(|t| (t.reward - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std > 1e-12 {
                advantages.iter_mut().for_each(|a| *a /= std);
            }
        }
        let mut last = (f64::NAN, LossStats::default());
        for _ in 0..self.config.ppo.epochs_per_batch {
            let (loss, grads, stats) = self.surrogate_loss(batch, &advantages)?;
            self.adam
                .step(&mut self.params, &grads)
                .map_err(|e| SearchError::NonFinite(format!("controller gradient: {e}")))?;
            last = (loss, stats);
        }
        let decay = self.config.ppo.baseline_decay;
        self.baseline = Some(decay * baseline + (1.0 - decay) * mean_reward);
        Ok(PpoDiagnostics {
            mean_reward,
            baseline,
            approx_kl: last.1.approx_kl,
            clip_fraction: last.1.clip_fraction,
            loss: last.0,
            entropy: last.1.entropy,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossStats {
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn categorical(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ControllerConfig {
        ControllerConfig {
            hidden: 8,
            ..ControllerConfig::default()
        }
    }

    #[test]
    fn sample_shapes_and_probabilities() {
        let ctrl = Controller::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ctrl.sample(&mut rng, false).unwrap();
        assert_eq!(s.tokens.len(), 25);
        assert!(s.log_probs.iter().all(|lp| lp.is_finite() && *lp <= 0.0));
        let replay = ctrl.log_probs(&[s.tokens.as_slice()]).unwrap()[0];
        assert!((replay - s.log_prob()).abs() < 1e-12);
        for p in ctrl.decision_probabilities(s.tokens.as_slice()).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let ctrl = Controller::new(small(), 1).unwrap();
        let a = ctrl.sample(&mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
        let b = ctrl.sample(&mut ChaCha8Rng::seed_from_u64(99), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_advantage_leaves_parameters() {
        let mut ctrl = Controller::new(
            ControllerConfig {
                ppo: PpoConfig {
                    entropy_coef: 0.0,
                    ..PpoConfig::default()
                },
                ..small()
            },
            2,
        )
        .unwrap();
        let before = ctrl.params().clone();
        let s = ctrl.sample(&mut ChaCha8Rng::seed_from_u64(4), false).unwrap();
        let batch: Vec<Trajectory> = (0..3)
            .map(|_| Trajectory {
                tokens: s.tokens.as_slice().to_vec(),
                old_log_probs: s.log_probs.clone(),
                reward: 0.5,
            })
            .collect();
        ctrl.ppo_update(&batch).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id).data(), ctrl.params().get(id).data());
        }
    }

    #[test]
    fn positive_advantage_raises_log_prob() {
        let mut ctrl = Controller::new(small(), 5).unwrap();
        ctrl.set_baseline(Some(0.0));
        let s = ctrl.sample(&mut ChaCha8Rng::seed_from_u64(8), false).unwrap();
        let tr = Trajectory {
            tokens: s.tokens.as_slice().to_vec(),
            old_log_probs: s.log_probs.clone(),
            reward: 1.0,
        };
        ctrl.ppo_update(std::slice::from_ref(&tr)).unwrap();
        let after = ctrl.log_probs(&[tr.tokens.as_slice()]).unwrap()[0];
        assert!(after > s.log_prob());
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut ctrl = Controller::new(small(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Trajectory> = (0..3)
            .map(|i| {
                let s = ctrl.sample(&mut rng, false).unwrap();
                Trajectory {
                    tokens: s.tokens.as_slice().to_vec(),
                    // shift old log-probs so the ratios sit inside the clip range but off 1
                    old_log_probs: s.log_probs.iter().map(|lp| lp + 0.05 * (i as f64 - 1.0)).collect(),
                    reward: i as f64,
                }
            })
            .collect();
        let adv = [0.7, -0.4, 1.1];
        let (_, grads, _) = ctrl.surrogate_loss(&batch, &adv).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (id, g) in grads {
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for i in (0..g.numel()).step_by(g.numel().div_ceil(6).max(1)) {
                let orig = ctrl.params().get(id).data()[i];
                ctrl.params_mut().get_mut(id).data_mut()[i] = orig + eps;
                let up = ctrl.surrogate_loss(&batch, &adv).unwrap().0;
                ctrl.params_mut().get_mut(id).data_mut()[i] = orig - eps;
                let down = ctrl.surrogate_loss(&batch, &adv).unwrap().0;
                ctrl.params_mut().get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                diff += (numeric - g.data()[i]).powi(2);
                na += g.data()[i].powi(2);
                nn += numeric.powi(2);
            }
            worst = worst.max(diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
