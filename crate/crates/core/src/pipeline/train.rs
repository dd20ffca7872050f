//! Training loop over the full objective.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatagenConfig, DemonstrationRecord};
use crate::error::{Error, Result};
use crate::geometry::Segment;
use crate::latent::sample_gumbel;
use crate::losses::{LossReport, LossWeights};
use crate::nets::{Conditioning, LatentKind, Model, ModelConfig};
use crate::optim::Adam;
use crate::tape::{Gradients, Graph, Tensor, Var};

use super::sample::{make_training_sample, SampleConfig, TrainingSample};

/// Latent and prior variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SpatialZLearnedPrior,
    SpatialZUniformPrior,
    ContinuousZLearnedPrior,
    ContinuousZNormalPrior,
    NoLatent,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::SpatialZLearnedPrior,
        Ablation::SpatialZUniformPrior,
        Ablation::ContinuousZLearnedPrior,
        Ablation::ContinuousZNormalPrior,
        Ablation::NoLatent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::SpatialZLearnedPrior => "spatial_z_learned_prior",
            Ablation::SpatialZUniformPrior => "spatial_z_uniform_prior",
            Ablation::ContinuousZLearnedPrior => "continuous_z_learned_prior",
            Ablation::ContinuousZNormalPrior => "continuous_z_normal_prior",
            Ablation::NoLatent => "no_latent",
        }
    }

    /// `base` with the latent kind and prior switched to this variant.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (latent, learned_prior) = match self {
            Ablation::SpatialZLearnedPrior => (LatentKind::Spatial, true),
            Ablation::SpatialZUniformPrior => (LatentKind::Spatial, false),
            Ablation::ContinuousZLearnedPrior => (LatentKind::Continuous, true),
            Ablation::ContinuousZNormalPrior => (LatentKind::Continuous, false),
            Ablation::NoLatent => (LatentKind::None, false),
        };
        ModelConfig {
            latent,
            learned_prior,
            ..base.clone()
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub weights: LossWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub sample: SampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            grad_clip: 1e-3,
            temperature: 0.5,
            weights: LossWeights::default(),
            steps: 5000,
            batch_size: 8,
            seed: 0,
            ablation: Ablation::SpatialZLearnedPrior,
            model: ModelConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let w = &self.weights;
        if [w.displacement, w.direct_corr, w.consistency, w.prior]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let m = &self.model;
        if m.hidden == 0 || m.knn == 0 || m.z_dim == 0 || !(m.encoder_radius > 0.0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        self.sample.validate()
    }

    /// Model configuration with the ablation applied.
    pub fn model_config(&self) -> ModelConfig {
        self.ablation.apply(&self.model)
    }
}

/// Loss terms of one sample on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub displacement: Var,
    pub direct_corr: Var,
    pub consistency: Var,
    pub prior: Var,
}

fn mean_distance(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let n = g.row_norm(d);
    g.mean(n)
}

fn scalar(g: &mut Graph, v: f32) -> Var {
    g.constant(Tensor::scalar(v))
}

/// `KL(N(mq, e^lq) ‖ N(mp, e^lp))` summed over dimensions.
fn gaussian_kl(g: &mut Graph, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
    let dims = g.shape(mq).1;
    let var_q = g.exp(lq);
    let diff = g.sub(mq, mp);
    let sq = g.mul(diff, diff);
    let num = g.add(var_q, sq);
    let neg_lp = g.scale(lp, -1.0);
    let inv_p = g.exp(neg_lp);
    let ratio = g.mul(num, inv_p);
    let logs = g.sub(lp, lq);
    let t = g.add(logs, ratio);
    let s = g.sum(t);
    let c = scalar(g, -(dims as f32));
    let s = g.add(s, c);
    g.scale(s, 0.5)
}

fn split_gaussian(g: &mut Graph, v: Var, z: usize) -> (Var, Var) {
    (g.slice_cols(v, 0, z), g.slice_cols(v, z, z))
}

/// Builds the training objective for one sample.
pub fn sample_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    config: &TrainConfig,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<SampleLoss> {
    let cfg = &model.config;
    let enc = model.encoder.fwd(g, cfg, &sample.demo);
    let ia = Rc::new(sample.demo.segment_indices(Segment::Action));
    let ib = Rc::new(sample.demo.segment_indices(Segment::Anchor));
    let la = g.gather_rows(enc.logits, ia.clone());
    let lb = g.gather_rows(enc.logits, ib.clone());
    let la = g.transpose(la);
    let lb = g.transpose(lb);

    let z = cfg.z_dim;
    let cond = match cfg.latent {
        LatentKind::Spatial => {
            let na = sample_gumbel(ia.len(), rng);
            let nb = sample_gumbel(ib.len(), rng);
            Conditioning::Spatial {
                weights_a: g.gumbel_softmax(la, &na, config.temperature, true),
                weights_b: g.gumbel_softmax(lb, &nb, config.temperature, true),
            }
        }
        LatentKind::Continuous => {
            let gauss = enc.gauss.ok_or_else(|| Error::Config("encoder has no Gaussian head".into()))?;
            let (mean, logvar) = split_gaussian(g, gauss, z);
            Conditioning::Continuous(g.reparameterize(mean, logvar, rng))
        }
        LatentKind::None => Conditioning::None,
    };

    let out = model.decoder.fwd(g, cfg, &sample.observation.cloud, cond)?;
    let target: Vec<_> = sample
        .observation
        .cloud
        .segment_points(Segment::Action)
        .iter()
        .map(|p| sample.ground_truth.apply_f32(p))
        .collect();
    let target = g.constant(Tensor::from_points(&target));
    let displacement = mean_distance(g, out.placed, target);
    let direct_corr = mean_distance(g, out.correspondences, target);
    let consistency = mean_distance(g, out.correspondences, out.placed);

    let prior = match (cfg.latent, &model.prior) {
        (LatentKind::Spatial, Some(net)) => {
            // Stop-gradient on the posterior: only the prior is pulled.
            let pv = net.fwd(g, cfg, &sample.prior_input);
            let mut total = scalar(g, 0.0);
            for (lq, lp) in [(la, pv.logits_a), (lb, pv.logits_b)] {
                let q = g.softmax_rows(lq);
                let q = g.detach(q);
                let lp = g.transpose(lp);
                let p = g.softmax_rows(lp);
                let j = g.jsd(q, p);
                total = g.add(total, j);
            }
            total
        }
        (LatentKind::Spatial, None) => {
            let mut total = scalar(g, 0.0);
            for lq in [la, lb] {
                let n = g.shape(lq).1;
                let q = g.softmax_rows(lq);
                let u = g.constant(Tensor::from_vec(1, n, vec![1.0 / n as f32; n]));
                let j = g.jsd(q, u);
                total = g.add(total, j);
            }
            total
        }
        (LatentKind::Continuous, prior_net) => {
            let gauss = enc.gauss.expect("checked above");
            match prior_net {
                Some(net) => {
                    let pv = net.fwd(g, cfg, &sample.prior_input);
                    let pg = pv.gauss.ok_or_else(|| Error::Config("prior has no Gaussian head".into()))?;
                    let q = g.detach(gauss);
                    let (mq, lq) = split_gaussian(g, q, z);
                    let (mp, lp) = split_gaussian(g, pg, z);
                    gaussian_kl(g, mq, lq, mp, lp)
                }
                None => {
                    let (mq, lq) = split_gaussian(g, gauss, z);
                    let zeros = g.constant(Tensor::zeros(1, z));
                    gaussian_kl(g, mq, lq, zeros, zeros)
                }
            }
        }
        (LatentKind::None, _) => scalar(g, 0.0),
    };

    let w = &config.weights;
    let mut total = g.scale(displacement, w.displacement as f32);
    for (v, wt) in [(direct_corr, w.direct_corr), (consistency, w.consistency), (prior, w.prior)] {
        let s = g.scale(v, wt as f32);
        total = g.add(total, s);
    }
    Ok(SampleLoss {
        total,
        displacement,
        direct_corr,
        consistency,
        prior,
    })
}

/// Model, optimizer and random stream of a training run.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    step: usize,
    /// Samples dropped because their rigid fit was degenerate.
    pub skipped: usize,
    /// Where a non-finite batch is dumped before aborting.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct DumpSample {
    record_seed: u64,
    mode_id: usize,
    losses: Option<LossReport>,
    observation: Vec<[f32; 4]>,
    demo: Vec<[f32; 4]>,
    ground_truth: [f64; 12],
}

fn rows(cloud: &crate::geometry::PointCloud) -> Vec<[f32; 4]> {
    cloud
        .points()
        .iter()
        .zip(cloud.segments())
        .map(|(p, s)| [p.x, p.y, p.z, if *s == Segment::Action { 0.0 } else { 1.0 }])
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model_config(), &mut rng);
        let optimizer = Adam::new(&model.store, config.learning_rate, Some(config.grad_clip));
        Ok(Self {
            model,
            config,
            optimizer,
            rng,
            step: 0,
            skipped: 0,
            dump_dir: None,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws a batch of fresh samples from `records`.
    pub fn draw_batch(&mut self, records: &[DemonstrationRecord], datagen: &DatagenConfig) -> Result<Vec<TrainingSample>> {
        if records.is_empty() {
            return Err(Error::Config("training needs at least one record".into()));
        }
        (0..self.config.batch_size)
            .map(|_| {
                let i = self.rng.gen_range(0..records.len());
                make_training_sample(&records[i], &self.config.sample, datagen, &mut self.rng)
            })
            .collect()
    }

    fn dump(&self, batch: &[TrainingSample], reports: &[Option<LossReport>]) -> String {
        let samples: Vec<DumpSample> = batch
            .iter()
            .zip(reports)
            .map(|(s, r)| DumpSample {
                record_seed: s.observation.record_seed,
                mode_id: s.observation.mode_id,
                losses: *r,
                observation: rows(&s.observation.cloud),
                demo: rows(&s.demo),
                ground_truth: s.ground_truth.to_array(),
            })
            .collect();
        let Some(dir) = &self.dump_dir else {
            return "no dump directory set".into();
        };
        let path = dir.join(format!("nonfinite_step{}.json", self.step));
        let written = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| Ok(serde_json::to_vec_pretty(&samples)?))
            .and_then(|bytes| Ok(std::fs::write(&path, bytes)?));
        match written {
            Ok(()) => format!("batch dumped to {}", path.display()),
            Err(e) => format!("batch dump failed: {e}"),
        }
    }

    /// One optimizer update on `batch`; returns the batch-mean losses.
    pub fn step(&mut self, batch: &[TrainingSample]) -> Result<LossReport> {
        let mut grads = Gradients::default();
        let mut reports: Vec<Option<LossReport>> = Vec::with_capacity(batch.len());
        for sample in batch {
            let mut g = Graph::new(&self.model.store);
            let loss = match sample_loss(&mut g, &self.model, &self.config, sample, &mut self.rng) {
                Ok(l) => l,
                Err(Error::DegenerateConfiguration(_)) => {
                    self.skipped += 1;
                    reports.push(None);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let v = |x: Var| g.scalar(x) as f64;
            let report = LossReport::new(
                v(loss.displacement),
                v(loss.direct_corr),
                v(loss.consistency),
                v(loss.prior),
                &self.config.weights,
            );
            reports.push(Some(report));
            if !report.is_finite() {
                let detail = self.dump(batch, &reports);
                return Err(Error::NonfiniteLoss {
                    step: self.step,
                    detail: format!("{report:?}; {detail}"),
                });
            }
            grads.merge(&g.backward(loss.total));
        }
        let done: Vec<LossReport> = reports.iter().flatten().copied().collect();
        if done.is_empty() {
            return Err(Error::DegenerateConfiguration(format!(
                "every sample of step {} had a degenerate fit",
                self.step
            )));
        }
        grads.scale(1.0 / done.len() as f32);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            let detail = self.dump(batch, &reports);
            return Err(Error::NonfiniteLoss {
                step: self.step,
                detail: format!("gradient norm {norm}; {detail}"),
            });
        }
        self.optimizer.step(&mut self.model.store, &grads);
        self.step += 1;
        Ok(LossReport::mean(&done))
    }

    /// Runs `steps` updates on fresh batches, writing one metrics CSV row per
    /// step when `metrics` is given.
    pub fn train(
        &mut self,
        records: &[DemonstrationRecord],
        datagen: &DatagenConfig,
        steps: usize,
        mut metrics: Option<&mut dyn Write>,
    ) -> Result<Vec<LossReport>> {
        if let Some(w) = metrics.as_deref_mut() {
            if self.step == 0 {
                writeln!(w, "{}", LossReport::CSV_HEADER)?;
            }
        }
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.draw_batch(records, datagen)?;
            let step = self.step;
            let report = self.step(&batch)?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", report.csv_row(step))?;
            }
            history.push(report);
        }
        Ok(history)
    }
}

/// Trains a model from scratch for `config.steps` steps.
pub fn train(
    config: &TrainConfig,
    records: &[DemonstrationRecord],
    datagen: &DatagenConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<(Model, Vec<LossReport>)> {
    let mut trainer = Trainer::new(config.clone())?;
    let history = trainer.train(records, datagen, config.steps, metrics)?;
    Ok((trainer.model, history))
}
