//! Joint weight / architecture optimization, retraining and evaluation.
//!
//! Every step runs the single-convolution forward pass on one minibatch,
//! backpropagates `L_CE + λ·L_FLOPs` once and updates the network weights
//! and the architecture logits from the same gradients.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cost::{CostBudget, CostModel};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::sampler::{self, GumbelConfig, NoiseStream};
use crate::supernet::{self, derive_architecture, DerivedArch, Relaxation, SuperNet};
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ v + (g + λ p)`, `p ← p − lr · v`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!("{} params, {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match parameters"));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            p.expect_same_shape(g)?;
            let (pd, vd) = (p.data_mut(), v.data_mut());
            for ((pi, &gi), vi) in pd.iter_mut().zip(g.data()).zip(vd.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit for the weights.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(0.5),
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0
            || self.grad_clip.is_some_and(|c| !(c > 0.0))
        {
            return Err(Error::invalid(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Budget either as an absolute MAC count or as a fraction of the
/// all-largest-kernel cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub target_flops: Option<f64>,
    pub target_fraction_of_max: f64,
    pub eta: f64,
    pub lambda_cost: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            target_flops: None,
            target_fraction_of_max: 0.5,
            eta: 0.1,
            lambda_cost: 2.0,
        }
    }
}

impl BudgetConfig {
    pub fn resolve(&self, model: &CostModel) -> Result<CostBudget> {
        let target = self
            .target_flops
            .unwrap_or(self.target_fraction_of_max * model.max_flops());
        CostBudget::new(target, self.eta, self.lambda_cost)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub optim: OptimConfig,
    /// Constant learning rate of the architecture logits.
    pub alpha_lr: f64,
    pub alpha_momentum: f64,
    pub gumbel: GumbelConfig,
    pub budget: BudgetConfig,
    /// Feed the noisy relaxed weights (instead of plain softmax) to the cost.
    pub cost_uses_gumbel: bool,
    /// Epochs during which the logits are held fixed.
    pub alpha_warmup_epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            optim: OptimConfig::default(),
            alpha_lr: 0.01,
            alpha_momentum: 0.9,
            gumbel: GumbelConfig::default(),
            budget: BudgetConfig::default(),
            cost_uses_gumbel: false,
            alpha_warmup_epochs: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.gumbel.validate()?;
        if !(self.alpha_lr >= 0.0 && self.alpha_lr.is_finite()) || !(0.0..1.0).contains(&self.alpha_momentum) {
            return Err(Error::invalid("invalid architecture optimizer settings"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub flops_loss: f64,
    pub total: f64,
    pub expected_flops: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean option probability per layer, `[layer][option]`.
    pub histogram: Vec<Vec<f64>>,
    pub derived_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Append-only run log, one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(RunLog { records })
    }
}

/// Minibatch order of one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Search state: network, both optimizers, and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Searcher {
    pub net: SuperNet,
    pub config: SearchConfig,
    pub budget: CostBudget,
    pub weight_opt: Sgd,
    pub alpha_opt: Sgd,
    pub step: usize,
    pub epoch: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    searcher: Searcher,
}

impl Searcher {
    pub fn new(net: SuperNet, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        let budget = config.budget.resolve(&net.cost_model())?;
        Ok(Searcher {
            weight_opt: Sgd::new(config.optim.momentum, config.optim.weight_decay),
            alpha_opt: Sgd::new(config.alpha_momentum, 0.0),
            net,
            config,
            budget,
            step: 0,
            epoch: 0,
        })
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.config.optim.epochs * steps_per_epoch(train_len, self.config.optim.batch_size)
    }

    /// One forward, one backward, one update of weights and logits.
    pub fn search_step(&mut self, images: &Tensor, labels: &[usize], total_steps: usize) -> Result<StepRecord> {
        let cfg = &self.config;
        let tau = sampler::temperature_at(self.step, total_steps, &cfg.gumbel);
        let lr = cosine_lr(cfg.optim.lr, self.step, total_steps);
        let train_alpha = self.epoch >= cfg.alpha_warmup_epochs;
        let relax = Relaxation {
            mode: cfg.gumbel.mode,
            tau,
            noise: Some(NoiseStream::new(cfg.gumbel.seed)),
            step: self.step,
        };
        let model = self.net.cost_model();

        let tape = Tape::new();
        let vars = self.net.register(&tape, train_alpha);
        let x = tape.constant(images.clone());
        let out = supernet::forward_search(&tape, &self.net, &vars, x, &relax)?;
        let cost_probs = if cfg.cost_uses_gumbel { &out.option_weights } else { &out.probs };
        let parts = supernet::total_loss(&tape, out.logits, labels, cost_probs, &model, &self.budget)?;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            ce: tape.value(parts.ce).item(),
            flops_loss: tape.value(parts.flops).item(),
            total: tape.value(parts.total).item(),
            expected_flops: tape.value(parts.expected_flops).item(),
            tau,
            lr,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "ce={} flops_loss={} expected_flops={}",
                    record.ce, record.flops_loss, record.expected_flops
                ),
            });
        }
        let grads = tape.backward(parts.total)?;
        let mut wg: Vec<Tensor> = vars.weights().into_iter().map(|v| grads.wrt(v)).collect();
        if let Some(i) = wg.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("gradient of weight tensor {i}"),
            });
        }
        let ag: Vec<Tensor> = vars.alphas().into_iter().map(|v| grads.wrt(v)).collect();
        drop(tape);

        if let Some(c) = self.config.optim.grad_clip {
            clip_grad_norm(&mut wg, c);
        }
        self.weight_opt.step(self.net.weights_mut(), &wg, lr)?;
        if train_alpha {
            let alpha_lr = self.config.alpha_lr;
            self.alpha_opt.step(self.net.alphas_mut(), &ag, alpha_lr)?;
        }
        self.step += 1;
        Ok(record)
    }

    /// Runs the remaining epochs over `train`, appending to `log`.
    pub fn run(&mut self, train: &Dataset, log: &mut RunLog) -> Result<DerivedArch> {
        let total = self.total_steps(train.len());
        let bs = self.config.optim.batch_size;
        while self.epoch < self.config.optim.epochs {
            let order = epoch_order(train.len(), self.config.optim.seed, self.epoch);
            for chunk in order.chunks(bs) {
                let (x, y) = train.batch(chunk)?;
                let rec = self.search_step(&x, &y, total)?;
                log::debug!(
                    "step {} ce {:.4} flops {:.0} tau {:.3}",
                    rec.step,
                    rec.ce,
                    rec.expected_flops,
                    rec.tau
                );
                log.push(LogRecord::Step(rec));
            }
            let arch = derive_architecture(&self.net)?;
            log.push(LogRecord::Epoch(EpochRecord {
                epoch: self.epoch,
                histogram: self.histogram(),
                derived_flops: arch.flops,
            }));
            log::info!("epoch {} derived flops {:.0} (target {:.0})", self.epoch, arch.flops, self.budget.target);
            self.epoch += 1;
        }
        derive_architecture(&self.net)
    }

    /// Mean softmax probability of each option, per searching layer.
    pub fn histogram(&self) -> Vec<Vec<f64>> {
        self.net
            .alphas()
            .into_iter()
            .map(|a| {
                let n = a.shape()[1];
                let rows = a.shape()[0] as f64;
                let mut h = vec![0.0; n];
                for row in a.data().chunks(n) {
                    for (acc, p) in h.iter_mut().zip(sampler::softmax_probs(row)) {
                        *acc += p / rows;
                    }
                }
                h
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            searcher: self.clone(),
        };
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), &ck)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(f))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck.searcher)
    }
}

/// Plain cross-entropy training of a network with fixed kernels.
pub fn train_fixed(net: &mut SuperNet, train: &Dataset, cfg: &OptimConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let total = cfg.epochs * steps_per_epoch(train.len(), cfg.batch_size);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let lr = cosine_lr(cfg.lr, step, total);
            let tape = Tape::new();
            let vars = net.register(&tape, false);
            let xv = tape.constant(x);
            let out = supernet::forward_search(&tape, net, &vars, xv, &Relaxation::plain())?;
            let ce = tape.cross_entropy(out.logits, &y)?;
            let loss = tape.value(ce).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("cross-entropy {loss}"),
                });
            }
            let grads = tape.backward(ce)?;
            let mut wg: Vec<Tensor> = vars.weights().into_iter().map(|v| grads.wrt(v)).collect();
            drop(tape);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut wg, c);
            }
            opt.step(net.weights_mut(), &wg, lr)?;
            records.push(StepRecord {
                step,
                epoch,
                ce: loss,
                flops_loss: 0.0,
                total: loss,
                expected_flops: 0.0,
                tau: 0.0,
                lr,
            });
            step += 1;
        }
    }
    Ok(records)
}

/// Top-1 accuracy with noise-free weights, evaluated in chunks.
pub fn evaluate(net: &SuperNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk)?;
        let logits = supernet::predict(net, &x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            if sampler::argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_kernel::KernelShape;
    use crate::supernet::{BlockConfig, NetConfig};

    fn tiny() -> NetConfig {
        NetConfig {
            height: 8,
            width: 8,
            num_classes: 2,
            stem_channels: 2,
            blocks: vec![BlockConfig {
                out_channels: 2,
                stride: 1,
                expansion: 1,
            }],
            ..NetConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::randn(&[n, 1, 8, 8], 1.0, &mut rng);
        Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(vec![&mut p], &[g.clone()], 0.1).unwrap();
        // v = g + 0.1 p
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.6, -1.0 - 0.1 * 0.15]);
        opt.step(vec![&mut p], &[g], 0.1).unwrap();
        let v0 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((p.data()[0] - (0.94 - 0.1 * v0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.4, 0, 10), 0.4);
        assert!((cosine_lr(0.4, 5, 10) - 0.2).abs() < 1e-15);
        assert!(cosine_lr(0.4, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        a.sort_unstable();
        assert_eq!(a, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn single_candidate_search_is_plain_training() {
        let cfg = NetConfig {
            candidates: vec![KernelShape::square(3)],
            include_none: false,
            ..tiny()
        };
        let train = data(24, 1);
        let optim = OptimConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.05,
            ..OptimConfig::default()
        };
        let search_cfg = SearchConfig {
            optim: optim.clone(),
            budget: BudgetConfig {
                lambda_cost: 0.0,
                ..BudgetConfig::default()
            },
            ..SearchConfig::default()
        };
        let mut searcher = Searcher::new(SuperNet::new(cfg.clone(), 5).unwrap(), search_cfg).unwrap();
        let mut log = RunLog::default();
        searcher.run(&train, &mut log).unwrap();
        let c = cfg.layout()[0].dw_channels;
        let mut plain = SuperNet::fixed(cfg, &[vec![0; c]], 5).unwrap();
        let plain_log = train_fixed(&mut plain, &train, &optim).unwrap();
        let a: Vec<f64> = log.steps().map(|s| s.total).collect();
        let b: Vec<f64> = plain_log.iter().map(|s| s.total).collect();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
    }

    #[test]
    fn cost_pressure_lowers_expected_flops() {
        let mut searcher = Searcher::new(
            SuperNet::new(tiny(), 2).unwrap(),
            SearchConfig {
                optim: OptimConfig {
                    lr: 0.0,
                    ..OptimConfig::default()
                },
                alpha_lr: 0.5,
                alpha_momentum: 0.0,
                budget: BudgetConfig {
                    target_fraction_of_max: 0.2,
                    ..BudgetConfig::default()
                },
                ..SearchConfig::default()
            },
        )
        .unwrap();
        let d = data(8, 4);
        let (x, _) = d.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        // constant labels carry no information about the architecture
        let y = vec![0; 8];
        let mut prev = f64::INFINITY;
        for _ in 0..5 {
            let r = searcher.search_step(&x, &y, 100).unwrap();
            assert!(r.expected_flops < prev);
            prev = r.expected_flops;
        }
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let train = data(16, 7);
        let cfg = SearchConfig {
            optim: OptimConfig {
                epochs: 1,
                batch_size: 8,
                ..OptimConfig::default()
            },
            ..SearchConfig::default()
        };
        let run = || {
            let mut s = Searcher::new(SuperNet::new(tiny(), 1).unwrap(), cfg.clone()).unwrap();
            let mut log = RunLog::default();
            let arch = s.run(&train, &mut log).unwrap();
            (s, log, arch)
        };
        let (s1, log1, arch1) = run();
        let (_, log2, arch2) = run();
        assert_eq!(log1, log2);
        assert_eq!(arch1, arch2);
        assert_eq!(log1.steps().count(), 2);
        for r in log1.steps() {
            assert!((r.total - (r.ce + 2.0 * r.flops_loss)).abs() <= 1e-12);
        }

        let p = dir.path().join("ck.json");
        s1.save(&p).unwrap();
        assert_eq!(Searcher::load(&p).unwrap(), s1);
        let lp = dir.path().join("log.jsonl");
        log1.write(&lp).unwrap();
        assert_eq!(RunLog::read(&lp).unwrap(), log1);
    }

    #[test]
    fn evaluate_and_train_fixed() {
        let train = data(16, 9);
        let c = tiny().layout()[0].dw_channels;
        let mut net = SuperNet::fixed(tiny(), &[vec![1; c]], 3).unwrap();
        let acc = evaluate(&net, &train).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let recs = train_fixed(&mut net, &train, &OptimConfig {
            epochs: 1,
            batch_size: 4,
            ..OptimConfig::default()
        })
        .unwrap();
        assert_eq!(recs.len(), 4);
        assert!(evaluate(&net, &Dataset::new(Tensor::zeros(&[0, 1, 8, 8]), vec![], 2).unwrap()).is_err());
    }
}
