//! Semi-supervised fine-tuning: classifier head, mean teacher, and the
//! supervised plus consistency objective.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, TRANSFORMER_PREFIX};
use crate::error::{Error, Result};
use crate::evalkit::{score_clips, Metrics, PostProcessing};
use crate::mam::{ContextConfig, ContextNetwork};
use crate::numgrad::nn::{uniform, Linear};
use crate::numgrad::{AdamW, AdamWConfig, Array, Graph, ParamId, ParamStore, Var};
use crate::rng::substream;

pub const HEAD_PREFIX: &str = "head.";

/// Encoder and context network topped by a sigmoid classifier.
#[derive(Clone, Debug)]
pub struct SedModel {
    pub encoder: Encoder,
    pub context: ContextNetwork,
    pub head: Linear,
}

impl SedModel {
    /// Uses the same init substreams as [`crate::mam::MaskedModel`] for the
    /// shared parts, so parameter names and order line up.
    pub fn new(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        ctx: &ContextConfig,
        categories: usize,
        head_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if categories == 0 {
            return Err(Error::Config("classifier needs at least one category".into()));
        }
        let mut rng = substream(seed, "init", &[0]);
        let encoder = Encoder::new(store, enc, &mut rng)?;
        let mut rng = substream(seed, "init", &[1]);
        let context = ContextNetwork::new(store, enc.embed_dim, ctx, &mut rng)?;
        let mut rng = substream(seed, "init", &[3]);
        let weight = store.add("head.weight", uniform(enc.embed_dim, categories, head_scale, &mut rng))?;
        let bias = store.add("head.bias", Array::zeros(&[1, categories]))?;
        let head = Linear {
            weight,
            bias: Some(bias),
            in_dim: enc.embed_dim,
            out_dim: categories,
        };
        Ok(Self { encoder, context, head })
    }

    pub fn categories(&self) -> usize {
        self.head.out_dim
    }

    /// Context-network output, `T × D`.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, features: &Array) -> Result<Var> {
        let z = self.encoder.encode(g, store, features)?;
        self.context.forward(g, store, z)
    }

    pub fn classify(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let logits = self.head.forward(g, store, hidden)?;
        Ok(g.sigmoid(logits))
    }

    /// Frame probabilities, `T × C`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &Array) -> Result<Var> {
        let h = self.features(g, store, features)?;
        self.classify(g, store, h)
    }

    pub fn predict(&self, store: &ParamStore, features: &Array) -> Result<Array> {
        let mut g = Graph::inference();
        let p = self.forward(&mut g, store, features)?;
        Ok(g.value(p).clone())
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.params()
    }
}

pub fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

/// Builds a classifier model and loads every non-head parameter from
/// `pretrained` by name; anything else in `pretrained` (the predictor) is
/// dropped.
pub fn attach_classifier(
    pretrained: &ParamStore,
    enc: &EncoderConfig,
    ctx: &ContextConfig,
    categories: usize,
    head_scale: f64,
    seed: u64,
) -> Result<(SedModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = SedModel::new(&mut store, enc, ctx, categories, head_scale, seed)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        if is_head(&name) {
            continue;
        }
        let src = pretrained
            .id(&name)
            .ok_or_else(|| Error::Load(format!("checkpoint has no parameter {name}")))?;
        let value = pretrained.value(src);
        if value.shape() != store.value(id).shape() {
            return Err(Error::Load(format!(
                "parameter {name} has shape {:?} in checkpoint but {:?} in config",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value.clone();
    }
    Ok((model, store))
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("ema decay {alpha} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Contract("teacher and student parameter layouts differ".into()));
    }
    let beta = 1.0 - alpha;
    for id in student.ids() {
        let s = student.value(id).data();
        for (t, &s) in teacher.value_mut(id).data_mut().iter_mut().zip(s) {
            *t = alpha * *t + beta * s;
        }
    }
    Ok(())
}

/// Annotation available for a training clip.
#[derive(Clone, Debug, PartialEq)]
pub enum Supervision {
    /// `T × C` frame labels.
    Strong(Array),
    /// `1 × C` clip labels.
    Weak(Array),
    Unlabeled,
}

impl Supervision {
    pub fn is_labeled(&self) -> bool {
        !matches!(self, Supervision::Unlabeled)
    }

    pub fn weak_from_categories(categories: usize, present: &[usize]) -> Result<Self> {
        let mut v = Array::zeros(&[1, categories]);
        for &c in present {
            if c >= categories {
                return Err(Error::Data(format!("weak label {c} outside {categories} categories")));
            }
            v.set(0, c, 1.0);
        }
        Ok(Supervision::Weak(v))
    }
}

/// Mean BCE of frame probabilities against strong labels, or of their
/// per-category max against weak labels. `None` for unlabeled clips.
pub fn supervised_loss(g: &mut Graph, frame_probs: Var, labels: &Supervision) -> Result<Option<Var>> {
    let (t, c) = g.value(frame_probs).dims2();
    let loss = match labels {
        Supervision::Strong(y) => {
            if y.dims2() != (t, c) {
                return Err(Error::Data(format!(
                    "strong labels {:?} do not match predictions {t}x{c}",
                    y.shape()
                )));
            }
            let b = g.bce(frame_probs, y.clone())?;
            g.mean(b)
        }
        Supervision::Weak(y) => {
            if y.dims2() != (1, c) {
                return Err(Error::Data(format!("weak labels {:?} do not match {c} categories", y.shape())));
            }
            let clip = g.max_rows(frame_probs)?;
            let b = g.bce(clip, y.clone())?;
            g.mean(b)
        }
        Supervision::Unlabeled => return Ok(None),
    };
    Ok(Some(loss))
}

/// Mean squared error against constant teacher probabilities.
pub fn consistency_loss(g: &mut Graph, student: Var, teacher: &Array) -> Result<Var> {
    if g.value(student).dims2() != teacher.dims2() {
        return Err(Error::Contract(format!(
            "student {:?} and teacher {:?} shapes differ",
            g.value(student).shape(),
            teacher.shape()
        )));
    }
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Leading epochs in which only the classifier head trains.
    pub freeze_epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub adamw: AdamWConfig,
    /// Cosine decay of both learning rates over the unfrozen epochs.
    pub cosine_decay: bool,
    pub head_init_scale: f64,
    pub mean_teacher: bool,
    pub ema_decay: f64,
    pub consistency_weight: f64,
    pub consistency_rampup_epochs: usize,
    /// Apply the consistency term to labeled clips as well as unlabeled ones.
    pub consistency_on_labeled: bool,
    /// Unlabeled clips drawn afresh each epoch alongside every labeled clip;
    /// 0 uses all of them.
    pub unlabeled_per_epoch: usize,
    pub threshold: f64,
    pub median_window: usize,
    pub rho: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            freeze_epochs: 5,
            batch_size: 8,
            lr_backbone: 3e-3,
            lr_rest: 3e-3,
            adamw: AdamWConfig::default(),
            cosine_decay: false,
            head_init_scale: 0.01,
            mean_teacher: true,
            ema_decay: 0.999,
            consistency_weight: 2.0,
            consistency_rampup_epochs: 10,
            consistency_on_labeled: true,
            unlabeled_per_epoch: 40,
            threshold: 0.5,
            median_window: 7,
            rho: 0.5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune batch_size must be positive".into()));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::Config(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            )));
        }
        if !(self.lr_backbone > 0.0 && self.lr_rest > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(Error::Config("consistency_weight must be non-negative".into()));
        }
        if !(self.head_init_scale >= 0.0) {
            return Err(Error::Config("head_init_scale must be non-negative".into()));
        }
        if self.median_window.is_multiple_of(2) {
            return Err(Error::Config("median_window must be odd".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) || !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1) and rho in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn post_processing(&self) -> PostProcessing {
        PostProcessing {
            threshold: self.threshold,
            median_window: self.median_window,
            rho: self.rho,
        }
    }

    /// Linear ramp from 0 at epoch 0 to the full weight at the end of the
    /// ramp.
    pub fn consistency_at(&self, epoch: usize) -> f64 {
        if self.consistency_rampup_epochs == 0 {
            return self.consistency_weight;
        }
        self.consistency_weight * (epoch as f64 / self.consistency_rampup_epochs as f64).min(1.0)
    }

    /// Learning-rate multiplier for an epoch: 1 while frozen, then a half
    /// cosine over the remaining epochs when decay is on.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || epoch < self.freeze_epochs {
            return 1.0;
        }
        let span = (self.epochs - self.freeze_epochs) as f64;
        0.5 * (1.0 + (std::f64::consts::PI * (epoch - self.freeze_epochs) as f64 / span).cos())
    }

    /// Learning rate for a parameter, or `None` if it is frozen this epoch.
    pub fn lr(&self, name: &str, frozen: bool) -> Option<f64> {
        if is_head(name) {
            Some(self.lr_rest)
        } else if frozen {
            None
        } else if name.starts_with(TRANSFORMER_PREFIX) {
            Some(self.lr_backbone)
        } else {
            Some(self.lr_rest)
        }
    }
}

/// A training clip: `F × T` features and its annotation.
#[derive(Clone, Copy, Debug)]
pub struct TrainClip<'a> {
    pub features: &'a Array,
    pub labels: &'a Supervision,
}

/// A validation clip: `F × T` features and `T × C` truth.
#[derive(Clone, Copy, Debug)]
pub struct ValClip<'a> {
    pub features: &'a Array,
    pub truth: &'a Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub sup_loss: f64,
    pub cons_loss: f64,
    pub val: Metrics,
}

impl FinetuneLog {
    pub const CSV_HEADER: &'static str = "epoch,sup_loss,cons_loss,val_frame_f1,val_event_f1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{},{}",
            self.epoch, self.sup_loss, self.cons_loss, self.val.frame_macro_f1, self.val.event_f1
        )
    }
}

pub fn logs_to_csv(logs: &[FinetuneLog]) -> String {
    let mut s = String::from(FinetuneLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Student parameters at the best validation epoch.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_metrics: Metrics,
    /// Student and teacher at the end of training.
    pub student: ParamStore,
    pub teacher: Option<ParamStore>,
    pub optimizer: AdamW,
    pub logs: Vec<FinetuneLog>,
}

/// Scores the model on validation clips with the configured post-processing.
pub fn evaluate(model: &SedModel, store: &ParamStore, clips: &[ValClip<'_>], post: &PostProcessing) -> Result<Metrics> {
    let probs = clips
        .iter()
        .map(|c| model.predict(store, c.features))
        .collect::<Result<Vec<_>>>()?;
    score_clips(probs.iter().zip(clips.iter().map(|c| c.truth)), post)
}

fn hidden_cache(model: &SedModel, store: &ParamStore, features: &[&Array]) -> Result<Vec<Array>> {
    features
        .iter()
        .map(|f| {
            let mut g = Graph::inference();
            let h = model.features(&mut g, store, f)?;
            Ok(g.value(h).clone())
        })
        .collect()
}

fn head_only(model: &SedModel, store: &ParamStore, hidden: &Array) -> Result<Array> {
    let mut g = Graph::inference();
    let h = g.constant(hidden.clone());
    let p = model.classify(&mut g, store, h)?;
    Ok(g.value(p).clone())
}

/// Adds the terms in `vars` and divides by their count.
fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut total = first;
    for &v in rest {
        total = g.add(total, v)?;
    }
    Ok(Some(g.scale(total, 1.0 / vars.len() as f64)))
}

/// Trains `store` in place; returns the best-validation snapshot, the final
/// student and teacher, and one log row per epoch.
///
/// During freeze epochs the non-head parameters are constant, so their
/// context outputs are computed once and reused.
pub fn finetune(
    model: &SedModel,
    store: &mut ParamStore,
    train: &[TrainClip<'_>],
    val: &[ValClip<'_>],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if !train.iter().any(|c| c.labels.is_labeled()) {
        return Err(Error::Data("fine-tuning needs at least one labeled clip".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("fine-tuning needs validation clips for model selection".into()));
    }
    let post = cfg.post_processing();
    let non_head: Vec<ParamId> = store.ids().filter(|&id| !is_head(store.name(id))).collect();
    let mut opt = AdamW::new(store, cfg.adamw);
    let mut teacher = cfg.mean_teacher.then(|| store.clone());
    let mut train_cache: Option<Vec<Array>> = None;
    let mut val_cache: Option<Vec<Array>> = None;
    let mut best: Option<(ParamStore, usize, Metrics)> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let frozen = epoch < cfg.freeze_epochs;
        if frozen && train_cache.is_none() {
            let feats: Vec<&Array> = train.iter().map(|c| c.features).collect();
            train_cache = Some(hidden_cache(model, store, &feats)?);
            let feats: Vec<&Array> = val.iter().map(|c| c.features).collect();
            val_cache = Some(hidden_cache(model, store, &feats)?);
        }
        if !frozen {
            train_cache = None;
            val_cache = None;
        }
        let weight = cfg.consistency_at(epoch);
        let scale = cfg.lr_scale(epoch);
        let mut order: Vec<usize> = (0..train.len()).filter(|&i| train[i].labels.is_labeled()).collect();
        let mut unlabeled: Vec<usize> = (0..train.len()).filter(|&i| !train[i].labels.is_labeled()).collect();
        if cfg.unlabeled_per_epoch > 0 && cfg.unlabeled_per_epoch < unlabeled.len() {
            unlabeled.shuffle(&mut substream(seed, "finetune_unlabeled", &[epoch as u64]));
            unlabeled.truncate(cfg.unlabeled_per_epoch);
            unlabeled.sort_unstable();
        }
        order.extend(unlabeled);
        order.shuffle(&mut substream(seed, "finetune_shuffle", &[epoch as u64]));
        let (mut sup_sum, mut cons_sum, mut steps) = (0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let teacher_probs = match &teacher {
                Some(t) => batch
                    .iter()
                    .map(|&i| {
                        let wanted = cfg.consistency_on_labeled || !train[i].labels.is_labeled();
                        wanted.then(|| model.predict(t, train[i].features)).transpose()
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => vec![None; batch.len()],
            };
            store.zero_grad();
            let mut g = Graph::new();
            if frozen {
                g.freeze(non_head.iter().copied());
            }
            let (mut sup_terms, mut cons_terms) = (Vec::new(), Vec::new());
            for (&i, tp) in batch.iter().zip(&teacher_probs) {
                let probs = match &train_cache {
                    Some(cache) => {
                        let h = g.constant(cache[i].clone());
                        model.classify(&mut g, store, h)?
                    }
                    None => model.forward(&mut g, store, train[i].features)?,
                };
                if let Some(l) = supervised_loss(&mut g, probs, train[i].labels)? {
                    sup_terms.push(l);
                }
                if let Some(tp) = tp {
                    cons_terms.push(consistency_loss(&mut g, probs, tp)?);
                }
            }
            let sup = mean_of(&mut g, &sup_terms)?;
            let cons = mean_of(&mut g, &cons_terms)?;
            let sup_v = sup.map_or(0.0, |v| g.value(v).data()[0]);
            let cons_v = cons.map_or(0.0, |v| g.value(v).data()[0]);
            if !(sup_v.is_finite() && cons_v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite fine-tuning loss at epoch {epoch}")));
            }
            let loss = match (sup, cons) {
                (Some(s), Some(c)) => {
                    let wc = g.scale(c, weight);
                    g.add(s, wc)?
                }
                (Some(s), None) => s,
                (None, Some(c)) => g.scale(c, weight),
                (None, None) => continue,
            };
            g.backward_into(loss, store)?;
            opt.step(store, |_, name| cfg.lr(name, frozen).map(|lr| lr * scale))?;
            if let Some(t) = teacher.as_mut() {
                ema_update(t, store, cfg.ema_decay)?;
            }
            sup_sum += sup_v;
            cons_sum += cons_v;
            steps += 1;
        }

        let metrics = match &val_cache {
            Some(cache) => {
                let probs = cache.iter().map(|h| head_only(model, store, h)).collect::<Result<Vec<_>>>()?;
                score_clips(probs.iter().zip(val.iter().map(|c| c.truth)), &post)?
            }
            None => evaluate(model, store, val, &post)?,
        };
        let n = steps.max(1) as f64;
        logs.push(FinetuneLog {
            epoch,
            sup_loss: sup_sum / n,
            cons_loss: cons_sum / n,
            val: metrics,
        });
        if best.as_ref().is_none_or(|(_, _, m)| metrics.frame_macro_f1 > m.frame_macro_f1) {
            best = Some((store.clone(), epoch, metrics));
        }
    }

    let (best, best_epoch, best_metrics) = match best {
        Some(b) => b,
        None => {
            let m = evaluate(model, store, val, &post)?;
            (store.clone(), 0, m)
        }
    };
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        best_metrics,
        student: store.clone(),
        teacher,
        optimizer: opt,
        logs,
    })
}
