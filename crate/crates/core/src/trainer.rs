//! Composite objective, AdamW optimization loop and metrics logging.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::forward::{forward_example, LatentInput};
use crate::metric::{adaptive_bandwidth, project_nodes, SoftGrid};
use crate::model::{Model, ModelConfig, ParamGroup};
use crate::params::Grads;
use crate::scalar::Scalar;
use crate::synth::{oracle_score, Example, HR_CELLS, LR_CELLS};
use crate::tensor::Mat;

const DATA_DOMAIN: u64 = 0xda7a_5eed;
const NOISE_DOMAIN: u64 = 0x0e95_11a0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub use_maer: bool,
    pub use_ambiguity: bool,
    /// Metrics are logged on steps `0, k, 2k, ...`.
    pub log_interval: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 1e-4,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            steps: 2000,
            seed: 0,
            use_maer: true,
            use_ambiguity: true,
            log_interval: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Invalid("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if self.use_maer && self.batch_size < 2 {
            return Err(Error::Invalid("batch_size must be at least 2 when use_maer is set".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Invalid("log_interval must be positive".into()));
        }
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Whether a parameter group takes part in this variant.
    pub fn group_active(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::TextEncoder | ParamGroup::ImageEmbedder => false,
            ParamGroup::LrStage | ParamGroup::HrStage => true,
            ParamGroup::Projection => self.use_maer,
            ParamGroup::Posterior | ParamGroup::Prefix | ParamGroup::Film => self.use_ambiguity,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.use_maer, self.use_ambiguity) {
            (false, false) => "baseline",
            (true, false) => "+MAER",
            (false, true) => "+ambiguity",
            (true, true) => "full",
        }
    }
}

/// Unweighted loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components<T> {
    pub ar: T,
    pub maer: T,
    pub kl: T,
}

/// `L_total = L_AR + λ₁·L_MAER + λ₂·L_KL`.
pub fn combine<T: Scalar>(c: Components<T>, lambda1: f64, lambda2: f64) -> T {
    c.ar + T::lit(lambda1) * c.maer + T::lit(lambda2) * c.kl
}

/// Coefficients applied to the three components when forming the
/// differentiated objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ar: f64,
    pub maer: f64,
    pub kl: f64,
}

impl LossWeights {
    pub fn total(cfg: &TrainConfig) -> Self {
        Self { ar: 1.0, maer: cfg.lambda1, kl: cfg.lambda2 }
    }

    pub fn ar_only() -> Self {
        Self { ar: 1.0, maer: 0.0, kl: 0.0 }
    }

    pub fn maer_only() -> Self {
        Self { ar: 0.0, maer: 1.0, kl: 0.0 }
    }

    pub fn kl_only() -> Self {
        Self { ar: 0.0, maer: 0.0, kl: 1.0 }
    }

    fn apply<T: Scalar>(self, c: Components<T>) -> T {
        T::lit(self.ar) * c.ar + T::lit(self.maer) * c.maer + T::lit(self.kl) * c.kl
    }
}

/// Regularizer quantities that carry no gradient; fixed from outside during
/// finite-difference checks.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTargets<T> {
    pub h: T,
    pub y: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome<T> {
    pub components: Components<T>,
    /// Weighted objective that `grads` differentiates.
    pub objective: T,
    pub grads: Option<Grads<T>>,
    /// Projected points, targets and estimates when the regularizer is on.
    pub metric: Option<MetricSnapshot<T>>,
    /// Mean KL of the batch posteriors (zero without the latent module).
    pub kl: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSnapshot<T> {
    pub z: Mat<T>,
    pub targets: MetricTargets<T>,
    pub yhat: Vec<T>,
}

/// Standard-normal draws for the latent of each batch element.
pub fn draw_noise<T: Scalar>(latent_dim: usize, n: usize, seed: u64, step: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_DOMAIN);
    rng.set_stream(step);
    (0..n)
        .map(|_| (0..latent_dim).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect())
        .collect()
}

/// Loss components of a batch and, when `want_grads`, the gradient of
/// `weights · components` with respect to every trainable parameter.
pub fn evaluate_batch<T: Scalar>(
    model: &Model<T>,
    cfg: &TrainConfig,
    batch: &[Example],
    noise: &[Vec<T>],
    weights: LossWeights,
    want_grads: bool,
    fixed: Option<&MetricTargets<T>>,
) -> Result<BatchOutcome<T>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if cfg.use_maer && n < 2 {
        return Err(Error::Invalid(format!("the metric regularizer needs a batch of at least 2, got {n}")));
    }
    if cfg.use_ambiguity && noise.len() != n {
        return Err(Error::shape("latent noise", n, noise.len()));
    }
    let nt = T::lit(n as f64);
    let positions = T::lit((LR_CELLS + HR_CELLS) as f64);

    let mut tapes = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n);
    let mut ce_total = T::zero();
    let mut kl_total = T::zero();
    let mut embed_rows = Vec::new();
    let mut y = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        let latent = if cfg.use_ambiguity { LatentInput::Noise(noise[i].clone()) } else { LatentInput::Absent };
        let mut tape = Tape::new(&model.store);
        let nd = forward_example(model, &mut tape, &ex.prompt.tokens, &ex.lr, &ex.hr, &latent, cfg.use_maer);
        ce_total += tape.value(nd.ce_sum).item();
        if let Some(l) = &nd.latent {
            kl_total += tape.value(l.kl).item();
        }
        if let Some(e) = nd.embedding {
            embed_rows.push(tape.value(e).data().to_vec());
            let soft = SoftGrid::new(tape.value(nd.soft.expect("soft grid with embedding")).clone())?;
            y.push(T::lit(oracle_score(&soft.decode(), &ex.prompt)));
        }
        tapes.push(tape);
        nodes.push(nd);
    }
    let ar = ce_total / (positions * nt);
    let kl = kl_total / nt;

    let mut grads = want_grads.then(|| Grads::zeros_like(&model.store));
    let mut maer = T::zero();
    let mut embed_grads = None;
    let mut metric = None;
    if cfg.use_maer {
        let mut tape = Tape::new(&model.store);
        let e = tape.input(Mat::from_rows(&embed_rows));
        let z = project_nodes(model, &mut tape, e);
        let targets = match fixed {
            Some(t) => {
                if t.y.len() != n {
                    return Err(Error::shape("fixed targets", n, t.y.len()));
                }
                t.clone()
            }
            None => MetricTargets { h: adaptive_bandwidth(tape.value(z))?, y },
        };
        let yhat = tape.kernel_regress(z, &targets.y, targets.h);
        let loss = tape.mse(yhat, &targets.y);
        maer = tape.value(loss).item();
        if let Some(g) = grads.as_mut() {
            if weights.maer != 0.0 {
                let out = tape.backward(&[(loss, Mat::scalar(T::lit(weights.maer)))], g);
                embed_grads = out[e.index()].clone();
            }
        }
        metric = Some(MetricSnapshot {
            z: tape.value(z).clone(),
            yhat: tape.value(yhat).data().to_vec(),
            targets,
        });
    }

    let components = Components { ar, maer, kl };
    if let Some(g) = grads.as_mut() {
        let ce_seed = T::lit(weights.ar) / (positions * nt);
        let kl_seed = T::lit(weights.kl) / nt;
        for (i, (tape, nd)) in tapes.iter().zip(&nodes).enumerate() {
            let mut seeds = Vec::with_capacity(3);
            if weights.ar != 0.0 {
                seeds.push((nd.ce_sum, Mat::scalar(ce_seed)));
            }
            if let (Some(l), true) = (&nd.latent, weights.kl != 0.0) {
                seeds.push((l.kl, Mat::scalar(kl_seed)));
            }
            if let (Some(e), Some(ge)) = (nd.embedding, embed_grads.as_ref()) {
                seeds.push((e, Mat::row_vector(ge.row(i))));
            }
            if !seeds.is_empty() {
                tape.backward(&seeds, g);
            }
        }
    }
    Ok(BatchOutcome { components, objective: weights.apply(components), grads, metric, kl })
}

/// AdamW with decoupled weight decay `p ← p − lr·wd·p`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub t: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Mat<T>> = model.store.iter().map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Grads<T>, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        let lr = T::lit(cfg.learning_rate);
        let decay = T::one() - lr * T::lit(cfg.weight_decay);
        let eps = T::lit(cfg.adam_eps);
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if model.store.get(id).frozen || !cfg.group_active(model.group_of(id)) {
                continue;
            }
            let k = id.index();
            let g = grads.get(id).data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = model.store.get_mut(id).value.data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(rename = "L_AR")]
    pub ar: f64,
    #[serde(rename = "L_MAER")]
    pub maer: f64,
    #[serde(rename = "L_KL")]
    pub kl: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub grad_norm: f64,
    /// `λ₂·L_KL`, the KL contribution actually present in `L_total`.
    #[serde(rename = "realized_KL")]
    pub realized_kl: f64,
}

/// Model, optimizer and step counter; everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let opt = AdamW::new(&model);
        Ok(Self { config, model, opt, step: 0 })
    }

    /// Dataset indices of the batch used at `step`: consecutive slices of
    /// per-epoch seeded permutations.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Vec<usize> {
        let b = self.config.batch_size;
        let start = step as usize * b;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for p in start..start + b {
            let epoch = p / dataset_len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ DATA_DOMAIN);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[p % dataset_len]);
        }
        out
    }

    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepReport> {
        let cfg = &self.config;
        let noise = if cfg.use_ambiguity {
            draw_noise(cfg.model.latent_dim, batch.len(), cfg.seed, self.step)
        } else {
            Vec::new()
        };
        let out = evaluate_batch(&self.model, cfg, batch, &noise, LossWeights::total(cfg), true, None)?;
        let grads = out.grads.expect("gradients requested");
        let grad_norm = grads.global_norm();
        let c = out.components;
        for (name, v) in [("L_AR", c.ar), ("L_MAER", c.maer), ("L_KL", c.kl), ("L_total", out.objective), ("grad_norm", grad_norm)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name, step: self.step });
            }
        }
        let report = StepReport {
            step: self.step,
            ar: c.ar.as_f64(),
            maer: c.maer.as_f64(),
            kl: c.kl.as_f64(),
            total: out.objective.as_f64(),
            grad_norm: grad_norm.as_f64(),
            realized_kl: cfg.lambda2 * c.kl.as_f64(),
        };
        let cfg = self.config.clone();
        self.opt.step(&mut self.model, &grads, &cfg);
        self.step += 1;
        Ok(report)
    }

    /// Runs until `config.steps`, returning the logged reports.
    pub fn run(&mut self, dataset: &[Example]) -> Result<Vec<StepReport>> {
        if dataset.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let idx = self.batch_indices(dataset.len(), self.step);
            let batch: Vec<Example> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let logged = self.step % self.config.log_interval == 0;
            let report = self.train_step(&batch)?;
            if logged {
                log.push(report);
            }
        }
        Ok(log)
    }
}

/// Fresh trainer run to completion.
pub fn train<T: Scalar>(config: TrainConfig, dataset: &[Example]) -> Result<(Trainer<T>, Vec<StepReport>)> {
    let mut t = Trainer::new(config)?;
    let log = t.run(dataset)?;
    Ok((t, log))
}

pub fn write_metrics(path: &Path, log: &[StepReport]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in log {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tiny(use_maer: bool, use_ambiguity: bool) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 3,
            log_interval: 2,
            use_maer,
            use_ambiguity,
            model: ModelConfig::tiny(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn combine_example() {
        let c = Components { ar: 2.0, maer: 0.4, kl: 3.0 };
        assert!((combine(c, 0.05, 1e-4) - 2.0203f64).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lambda1: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, use_maer: false, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig::from_json(r#"{"steps": 5, "bogus": 1}"#).is_err());
        assert_eq!(TrainConfig::from_json(r#"{"steps": 5}"#).unwrap().steps, 5);
    }

    #[test]
    fn baseline_total_is_ar_and_flags_isolate_groups() {
        let data = generate_dataset(4, 1, 0.5).unwrap();
        let cfg = tiny(false, false);
        let mut m: Model<f64> = Model::new(cfg.model.clone(), 0).unwrap();
        m.perturb(5, 0.1);
        let out = evaluate_batch(&m, &cfg, &data, &[], LossWeights::total(&cfg), true, None).unwrap();
        assert_eq!(out.objective, out.components.ar);
        assert_eq!((out.components.maer, out.components.kl), (0.0, 0.0));
        let g = out.grads.unwrap();
        for (id, p) in m.store.iter() {
            let group = m.group_of(id);
            if matches!(group, ParamGroup::Projection | ParamGroup::Posterior | ParamGroup::Prefix | ParamGroup::Film) || p.frozen {
                assert!(g.get(id).data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn lambda_linearity() {
        let data = generate_dataset(4, 2, 0.5).unwrap();
        let cfg = tiny(true, true);
        let mut m: Model<f64> = Model::new(cfg.model.clone(), 0).unwrap();
        m.perturb(6, 0.1);
        let noise = draw_noise(8, 4, 0, 0);
        let a = evaluate_batch(&m, &cfg, &data, &noise, LossWeights::total(&cfg), false, None).unwrap();
        let doubled = TrainConfig { lambda1: 2.0 * cfg.lambda1, ..cfg.clone() };
        let b = evaluate_batch(&m, &doubled, &data, &noise, LossWeights::total(&doubled), false, None).unwrap();
        assert_eq!(a.components, b.components);
        let delta = b.objective - a.objective;
        assert!((delta - cfg.lambda1 * a.components.maer).abs() <= 1e-15);
        assert!(a.components.maer > 0.0);
    }

    #[test]
    fn maer_needs_two_examples() {
        let data = generate_dataset(1, 2, 0.0).unwrap();
        let cfg = tiny(true, false);
        let m: Model<f64> = Model::new(cfg.model.clone(), 0).unwrap();
        assert!(matches!(
            evaluate_batch(&m, &cfg, &data, &[], LossWeights::total(&cfg), false, None),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn frozen_and_inactive_parameters_are_untouched() {
        let data = generate_dataset(12, 3, 0.5).unwrap();
        let (t, log) = train::<f32>(tiny(false, false), &data).unwrap();
        assert_eq!(log.len(), 2);
        let init: Model<f32> = Model::new(ModelConfig::tiny(), 0).unwrap();
        for ((id, p), (_, q)) in t.model.store.iter().zip(init.store.iter()) {
            let untouched = p.frozen || !t.config.group_active(t.model.group_of(id));
            if untouched {
                assert_eq!(p.value, q.value, "{}", p.name);
            } else if p.name == "lr.tok" {
                assert_ne!(p.value, q.value);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let data = generate_dataset(8, 4, 0.5).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny(true, true) };
        let (t, _) = train::<f32>(cfg, &data).unwrap();
        let init: Model<f32> = Model::new(ModelConfig::tiny(), 0).unwrap();
        assert_eq!(t.model.store, init.store);
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_dataset(10, 5, 0.5).unwrap();
        let (a, la) = train::<f32>(tiny(true, true), &data).unwrap();
        let (b, lb) = train::<f32>(tiny(true, true), &data).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t: Trainer<f32> = Trainer::new(TrainConfig { batch_size: 4, ..tiny(true, true) }).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(12, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_lines_round_up() {
        let data = generate_dataset(8, 6, 0.5).unwrap();
        let cfg = TrainConfig { steps: 7, log_interval: 3, ..tiny(false, true) };
        let (_, log) = train::<f32>(cfg, &data).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 3, 6]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_metrics(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"realized_KL\""));
    }
}
