//! Objectives and the two-phase training loop.

mod config;
mod negatives;

pub use config::{CovPhaseB, Granularity, Mode, NegativeSource, TrainConfig};
pub use negatives::{negatives, student_marginals, NegativeInputs};

use crate::copula::standard_normal_vec;
use crate::data::{Batcher, FactorDataset};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{score_representation, FacConfig, MetricReport};
use crate::model::{AdamState, Group, ModelBundle, PosteriorVars};
use crate::rng::{self, Rng};
use crate::tensor::{softplus, Graph, Tensor, Var};

/// Mean over the batch of the summed per-pixel Bernoulli NLL on logits.
pub fn recon_loss(g: &mut Graph, x: Var, logits: Var) -> Result<Var> {
    if g.shape(x) != g.shape(logits) || g.shape(x).len() != 2 {
        return shape_err("recon_loss", format!("{:?} vs {:?}", g.shape(x), g.shape(logits)));
    }
    let n = g.shape(x)[0] as f64;
    let sp = g.softplus(logits)?;
    let xl = g.mul(x, logits)?;
    let nll = g.sub(sp, xl)?;
    let total = g.sum(nll, None)?;
    g.mul_scalar(total, 1.0 / n)
}

/// Plain-value [`recon_loss`].
pub fn recon_loss_value(x: &Tensor, logits: &Tensor) -> Result<f64> {
    if x.shape() != logits.shape() || x.ndim() != 2 {
        return shape_err("recon_loss", format!("{:?} vs {:?}", x.shape(), logits.shape()));
    }
    let total: f64 = x.data().iter().zip(logits.data()).map(|(&xi, &l)| softplus(l) - xi * l).sum();
    Ok(total / x.rows() as f64)
}

/// Mean over the batch of `KL(q(z|x) || N(0, I))`.
pub fn kl_loss(g: &mut Graph, q: PosteriorVars) -> Result<Var> {
    let n = g.shape(q.mu)[0] as f64;
    let mu2 = g.square(q.mu)?;
    let ev = g.exp(q.logvar)?;
    let a = g.add(mu2, ev)?;
    let b = g.sub(a, q.logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let total = g.sum(c, None)?;
    g.mul_scalar(total, 0.5 / n)
}

/// `z = μ + exp(½ logvar) ⊙ ε` with constant `ε`.
pub fn reparameterize_on(g: &mut Graph, q: PosteriorVars, eps: &Tensor) -> Result<Var> {
    let half = g.mul_scalar(q.logvar, 0.5)?;
    let sigma = g.exp(half)?;
    let e = g.constant(eps.clone())?;
    let noise = g.mul(sigma, e)?;
    g.add(q.mu, noise)
}

/// Density-ratio TC estimate: the mean classifier logit,
/// `log(Ψ(z) / (1 - Ψ(z)))` averaged over the batch. `cls_params` should be
/// bound frozen so the gradient reaches only `z`.
pub fn tc_penalty(g: &mut Graph, model: &ModelBundle, cls_params: &[Var], z: Var) -> Result<Var> {
    let logits = model.classify_on(g, cls_params, z)?;
    g.mean(logits, None)
}

/// `-(1/2N) [Σ ln σ(l_q) + Σ ln(1 - σ(l_p))]`.
pub fn classifier_loss(g: &mut Graph, lq: Var, lp: Var) -> Result<Var> {
    if g.value(lq).is_empty() || g.value(lp).is_empty() {
        return Err(Error::Invalid("classifier loss of an empty batch".into()));
    }
    let nq = g.neg(lq)?;
    let a = g.softplus(nq)?;
    let b = g.softplus(lp)?;
    let ma = g.mean(a, None)?;
    let mb = g.mean(b, None)?;
    let s = g.add(ma, mb)?;
    g.mul_scalar(s, 0.5)
}

/// Plain-value [`classifier_loss`] and accuracy (`l_q > 0`, `l_p < 0` correct).
pub fn classifier_loss_value(lq: &[f64], lp: &[f64]) -> Result<(f64, f64)> {
    if lq.is_empty() || lp.is_empty() {
        return Err(Error::Invalid("classifier loss of an empty batch".into()));
    }
    let a = lq.iter().map(|&l| softplus(-l)).sum::<f64>() / lq.len() as f64;
    let b = lp.iter().map(|&l| softplus(l)).sum::<f64>() / lp.len() as f64;
    let correct = lq.iter().filter(|&&l| l > 0.0).count() + lp.iter().filter(|&&l| l < 0.0).count();
    Ok((0.5 * (a + b), correct as f64 / (lq.len() + lp.len()) as f64))
}

/// Scalar parts of the Phase A objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseAStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    /// Mean classifier logit on `z`; 0 in beta_vae mode.
    pub penalty: f64,
}

/// Gradients of one phase, per group, in [`ModelBundle::group`] order.
#[derive(Clone, Debug, Default)]
pub struct PhaseGrads {
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
    pub cov: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
}

/// Phase A objective on batch `x` with noise `eps`: the β-VAE loss in
/// beta_vae mode, otherwise `ELBO + sign · γ · tc_penalty`. Gradients for
/// the encoder and decoder; the classifier is frozen.
pub fn phase_a(model: &ModelBundle, cfg: &TrainConfig, x: &Tensor, eps: &Tensor) -> Result<(PhaseAStats, PhaseGrads)> {
    let mut g = Graph::new();
    let ep = model.encoder.bind(&mut g, true)?;
    let dp = model.decoder.bind(&mut g, true)?;
    let xv = g.constant(x.clone())?;
    let q = model.encode_on(&mut g, &ep, xv)?;
    let z = reparameterize_on(&mut g, q, eps)?;
    let logits = model.decode_on(&mut g, &dp, z)?;
    let recon = recon_loss(&mut g, xv, logits)?;
    let kl = kl_loss(&mut g, q)?;
    let (loss, penalty) = if cfg.mode == Mode::BetaVae {
        let bk = g.mul_scalar(kl, cfg.beta)?;
        (g.add(recon, bk)?, None)
    } else {
        let cp = model.classifier.bind(&mut g, false)?;
        let pen = tc_penalty(&mut g, model, &cp, z)?;
        let elbo = g.add(recon, kl)?;
        let weighted = g.mul_scalar(pen, cfg.penalty_sign() * cfg.gamma)?;
        (g.add(elbo, weighted)?, Some(pen))
    };
    let grads = g.backward(loss)?;
    let stats = PhaseAStats {
        loss: g.value(loss).item(),
        recon: g.value(recon).item(),
        kl: g.value(kl).item(),
        penalty: penalty.map_or(0.0, |p| g.value(p).item()),
    };
    let collect = |vars: &[Var]| vars.iter().map(|&v| grads.wrt(v)).collect();
    Ok((stats, PhaseGrads { encoder: collect(&ep), decoder: collect(&dp), ..PhaseGrads::default() }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseBStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Phase B: classifier loss on `z_q` (posterior samples of `x`) versus `z_p`
/// from the configured negative source. Gradients for ψ, and for φ_c when
/// `cov_encoder_in_phase_b` routes them there (negated when adversarial).
pub fn phase_b(model: &ModelBundle, cfg: &TrainConfig, x: &Tensor, rng: &mut Rng) -> Result<(PhaseBStats, PhaseGrads)> {
    let (mu, logvar) = model.encode_batch(x)?;
    let (n, d) = (mu.rows(), mu.cols());
    let sigma = logvar.map(|lv| (0.5 * lv).exp());
    let eps = standard_normal_vec(rng, n * d);
    let zq_data = (0..n * d).map(|i| mu.data()[i] + sigma.data()[i] * eps[i]).collect();
    let zq = Tensor::new(vec![n, d], zq_data)?;

    let source = cfg.negative_source();
    let cov_trainable = cfg.cov_encoder_in_phase_b != CovPhaseB::None && source != NegativeSource::Permute;
    let mut g = Graph::new();
    let cp = model.classifier.bind(&mut g, true)?;
    let covp = if source == NegativeSource::Permute { Vec::new() } else { model.bind_cov(&mut g, cov_trainable)? };
    let xv = g.constant(x.clone())?;
    let inputs = NegativeInputs { x: xv, mu: &mu, sigma: &sigma, zq: &zq, cov_params: &covp, student_nu: cfg.student_nu };
    let zp = negatives(&mut g, model, source, &inputs, rng)?;
    let zqv = g.constant(zq.clone())?;
    let lq = model.classify_on(&mut g, &cp, zqv)?;
    let lp = model.classify_on(&mut g, &cp, zp)?;
    let loss = classifier_loss(&mut g, lq, lp)?;
    let grads = g.backward(loss)?;
    let (_, accuracy) = classifier_loss_value(g.value(lq).data(), g.value(lp).data())?;
    let mut out = PhaseGrads { classifier: cp.iter().map(|&v| grads.wrt(v)).collect(), ..PhaseGrads::default() };
    if cov_trainable {
        let flip = if cfg.cov_encoder_in_phase_b == CovPhaseB::Adversarial { -1.0 } else { 1.0 };
        out.cov = covp.iter().map(|&v| grads.wrt(v).map(|x| flip * x)).collect();
    }
    Ok((PhaseBStats { loss: g.value(loss).item(), accuracy }, out))
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub tc_penalty: f64,
    pub cls_loss: f64,
    pub cls_acc: f64,
}

pub const STEP_LOG_HEADER: &str = "step,recon,kl,tc_penalty,cls_loss,cls_acc";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.recon, self.kl, self.tc_penalty, self.cls_loss, self.cls_acc)
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("step log row has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", f[0])))?,
            recon: num(f[1])?,
            kl: num(f[2])?,
            tc_penalty: num(f[3])?,
            cls_loss: num(f[4])?,
            cls_acc: num(f[5])?,
        })
    }

    fn all_finite(&self) -> bool {
        [self.recon, self.kl, self.tc_penalty, self.cls_loss, self.cls_acc].iter().all(|v| v.is_finite())
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    Checkpoint { step: usize, model: &'a ModelBundle },
}

pub struct TrainOutput {
    pub model: ModelBundle,
    pub logs: Vec<StepLog>,
}

/// Optimizers, samplers and RNG streams of one run.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub model: ModelBundle,
    data: &'d FactorDataset,
    opt_enc: AdamState,
    opt_dec: AdamState,
    opt_cov: AdamState,
    opt_cls: AdamState,
    batches_a: Batcher,
    batches_b: Batcher,
    rng_a: Rng,
    rng_b: Rng,
    step: usize,
}

fn diverged(step: usize, what: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { step, what },
        other => other,
    }
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d FactorDataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Invalid("training needs a nonempty dataset".into()));
        }
        let mut model = ModelBundle::init(cfg.model_config(data.pixels()), cfg.seed)?;
        if cfg.cov_encoder_in_phase_b != CovPhaseB::None {
            model.randomize_correlation_heads(cfg.seed);
        }
        let opt = |g: Group, lr: f64| AdamState::new(cfg.adam(lr), &model.group(g));
        let batch = cfg.batch_size.min(data.len());
        Ok(Self {
            opt_enc: opt(Group::Encoder, cfg.lr_vae),
            opt_dec: opt(Group::Decoder, cfg.lr_vae),
            opt_cov: opt(Group::CovEncoder, cfg.lr_vae),
            opt_cls: opt(Group::Classifier, cfg.lr_cls),
            batches_a: Batcher::new(data.len(), batch, rng::stream(cfg.data_seed(), 10))?,
            batches_b: Batcher::new(data.len(), batch, rng::stream(cfg.data_seed(), 11))?,
            rng_a: rng::stream(cfg.seed, 20),
            rng_b: rng::stream(cfg.seed, 21),
            step: 0,
            model,
            data,
            cfg,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn fingerprints(&self, groups: &[Group]) -> Vec<u64> {
        if self.cfg.audit_phases {
            groups.iter().map(|&g| self.model.group_fingerprint(g)).collect()
        } else {
            Vec::new()
        }
    }

    fn audit(&self, before: Vec<u64>, groups: &[Group], phase: &str) -> Result<()> {
        if before != self.fingerprints(groups) {
            return Err(Error::Invalid(format!("phase {phase} at step {} modified a frozen parameter group", self.step)));
        }
        Ok(())
    }

    /// One Phase A update; returns its statistics.
    pub fn phase_a_step(&mut self, step: usize) -> Result<PhaseAStats> {
        let x = self.data.gather(&self.batches_a.next_indices());
        let eps = Tensor::new(vec![x.rows(), self.cfg.latent_dim], standard_normal_vec(&mut self.rng_a, x.rows() * self.cfg.latent_dim))?;
        let frozen = [Group::Classifier];
        let before = self.fingerprints(&frozen);
        let (stats, grads) = phase_a(&self.model, &self.cfg, &x, &eps).map_err(diverged(step, "phase A loss"))?;
        if ![stats.loss, stats.recon, stats.kl, stats.penalty].iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step, what: "phase A loss" });
        }
        self.opt_enc.update(&mut self.model.group_mut(Group::Encoder), &grads.encoder).map_err(diverged(step, "encoder gradient"))?;
        self.opt_dec.update(&mut self.model.group_mut(Group::Decoder), &grads.decoder).map_err(diverged(step, "decoder gradient"))?;
        self.audit(before, &frozen, "A")?;
        Ok(stats)
    }

    /// One Phase B update; `None` in beta_vae mode.
    pub fn phase_b_step(&mut self, step: usize) -> Result<Option<PhaseBStats>> {
        if !self.cfg.has_classifier() {
            return Ok(None);
        }
        let x = self.data.gather(&self.batches_b.next_indices());
        let frozen: &[Group] = if self.cfg.cov_encoder_in_phase_b == CovPhaseB::None {
            &[Group::Encoder, Group::Decoder, Group::CovEncoder]
        } else {
            &[Group::Encoder, Group::Decoder]
        };
        let before = self.fingerprints(frozen);
        let (stats, grads) = phase_b(&self.model, &self.cfg, &x, &mut self.rng_b).map_err(diverged(step, "classifier loss"))?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged { step, what: "classifier loss" });
        }
        self.opt_cls
            .update(&mut self.model.group_mut(Group::Classifier), &grads.classifier)
            .map_err(diverged(step, "classifier gradient"))?;
        if !grads.cov.is_empty() {
            self.opt_cov.update(&mut self.model.group_mut(Group::CovEncoder), &grads.cov).map_err(diverged(step, "covariance gradient"))?;
        }
        self.audit(before, frozen, "B")?;
        Ok(Some(stats))
    }

    /// Runs `count` steps (one block of the configured granularity at a time).
    pub fn run(&mut self, count: usize, on_event: &mut dyn FnMut(TrainEvent) -> Result<()>) -> Result<Vec<StepLog>> {
        let block = match self.cfg.phase_granularity {
            Granularity::Batch => 1,
            Granularity::Epoch => self.batches_a.batches_per_epoch().max(1),
        };
        let mut logs = Vec::with_capacity(count);
        let end = self.step + count;
        while self.step < end {
            let len = block.min(end - self.step);
            let first = self.step + 1;
            let mut rows = Vec::with_capacity(len);
            for s in first..first + len {
                let a = self.phase_a_step(s)?;
                rows.push(StepLog { step: s, recon: a.recon, kl: a.kl, tc_penalty: a.penalty, cls_loss: 0.0, cls_acc: 0.0 });
            }
            for row in rows.iter_mut() {
                if let Some(b) = self.phase_b_step(row.step)? {
                    row.cls_loss = b.loss;
                    row.cls_acc = b.accuracy;
                }
            }
            self.step += len;
            for row in &rows {
                if !row.all_finite() {
                    return Err(Error::Diverged { step: row.step, what: "step log" });
                }
                on_event(TrainEvent::Step(row))?;
            }
            let every = self.cfg.checkpoint_every;
            if every > 0 && rows.iter().any(|r| r.step % every == 0) {
                on_event(TrainEvent::Checkpoint { step: self.step, model: &self.model })?;
            }
            logs.extend(rows);
        }
        Ok(logs)
    }
}

/// Full run of `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, data: &FactorDataset, on_event: &mut dyn FnMut(TrainEvent) -> Result<()>) -> Result<TrainOutput> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    let logs = t.run(cfg.steps, on_event)?;
    Ok(TrainOutput { model: t.model, logs })
}

/// Posterior means of every image plus dataset-average reconstruction loss
/// (decoded at the mean) and KL.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub means: Tensor,
    pub recon: f64,
    pub kl: f64,
}

const EVAL_CHUNK: usize = 256;

pub fn encode_dataset(model: &ModelBundle, data: &FactorDataset) -> Result<Encoded> {
    let d = model.latent();
    let mut means = Vec::with_capacity(data.len() * d);
    let (mut recon, mut kl) = (0.0, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = data.gather(chunk);
        let (mu, lv) = model.encode_batch(&x)?;
        let logits = model.decode_batch(&mu)?;
        recon += recon_loss_value(&x, &logits)? * chunk.len() as f64;
        kl += mu.data().iter().zip(lv.data()).map(|(m, l)| 0.5 * (m * m + l.exp() - l - 1.0)).sum::<f64>();
        means.extend_from_slice(mu.data());
    }
    let n = data.len().max(1) as f64;
    Ok(Encoded { means: Tensor::new(vec![data.len(), d], means)?, recon: recon / n, kl: kl / n })
}

/// Every metric of a trained model on the full dataset.
pub fn evaluate(model: &ModelBundle, data: &FactorDataset, fac: &FacConfig) -> Result<MetricReport> {
    let e = encode_dataset(model, data)?;
    score_representation(&e.means, data, fac, e.recon, e.kl)
}

