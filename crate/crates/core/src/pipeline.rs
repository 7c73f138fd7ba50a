//! End-to-end stages over a dataset on disk: the iterative E/M driver,
//! fine-tuning, evaluation, pseudo-label analysis and the experiment grid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::binio::write_file;
use crate::checkpoint::{Checkpoint, RngState, Stage};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    export_timeline, point_biserial_matrix, reorder_prototypes, score_clips, CorrelationMatrix, Metrics,
    PostProcessing,
};
use crate::finetune::{
    attach_classifier, finetune, logs_to_csv, FinetuneOutcome, SedModel, Supervision, TrainClip, ValClip,
};
use crate::mam::{pretrain, ContextConfig, EpochLog, LossKind, MaskedModel};
use crate::numgrad::{Array, ParamStore};
use crate::proto::{build_pseudo_labels, FittedPrototypes, PrototypeKind, PrototypeModel, PseudoLabelMatrix};
use crate::rng::substream;
use crate::synthgen::{build_dataset, load_dataset, ClipRecord, Dataset, Split};

/// File layout under a run's output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn iteration(&self, i: usize) -> PathBuf {
        self.root.join("pretrain").join(format!("iter{i}"))
    }

    pub fn checkpoint(&self, i: usize) -> PathBuf {
        self.iteration(i).join("checkpoint.ckpt")
    }

    pub fn pseudo_labels(&self, i: usize) -> PathBuf {
        self.iteration(i).join("pseudo_labels")
    }

    pub fn finetune(&self, tag: &str) -> PathBuf {
        self.root.join("finetune").join(tag)
    }

    pub fn analysis(&self, i: usize) -> PathBuf {
        self.root.join("analysis").join(format!("iter{i}"))
    }

    pub fn experiment(&self) -> PathBuf {
        self.root.join("experiment")
    }
}

/// Writes the effective config next to the outputs it produced.
pub fn echo_config(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_file(&paths.config(), cfg.to_toml()?.as_bytes())
}

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    build_dataset(&cfg.data, dir)
}

/// Loads a dataset and checks it fits the configured encoder.
pub fn open_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    if !dir.join(crate::synthgen::MANIFEST_FILE).exists() {
        return Err(Error::Data(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    let ds = load_dataset(dir)?;
    let g = ds.config();
    if g.freq_bins != cfg.encoder.freq_bins || g.frames > cfg.encoder.max_frames {
        return Err(Error::Data(format!(
            "dataset has {} bins x {} frames; encoder expects {} bins and at most {} frames",
            g.freq_bins, g.frames, cfg.encoder.freq_bins, cfg.encoder.max_frames
        )));
    }
    Ok(ds)
}

fn features_of<'a>(clips: &[&'a ClipRecord]) -> Vec<&'a Array> {
    clips.iter().map(|c| &c.clip.features).collect()
}

/// Pseudo labels from one E-step: prototypes fitted on the training clips,
/// then responsibilities for training and validation clips.
#[derive(Clone, Debug)]
pub struct EStep {
    pub prototypes: FittedPrototypes,
    /// Prototype file contents; K-means centroids are summarized by the
    /// per-cluster frequency and variance of their assigned frames.
    pub model_file: PrototypeModel,
    pub train_labels: Vec<PseudoLabelMatrix>,
    pub val_labels: Vec<PseudoLabelMatrix>,
}

/// Embeddings are the initial band-mean tokens at iteration 0 and encoder
/// outputs afterwards.
pub fn e_step(
    cfg: &RunConfig,
    model: &MaskedModel,
    store: &ParamStore,
    ds: &Dataset,
    iteration: usize,
    seed: u64,
) -> Result<EStep> {
    let embed = |f: &Array| -> Result<Array> {
        let z = if iteration == 0 {
            model.encoder.initial_embeddings(store, f)?
        } else {
            model.encoder.encode_array(store, f)?
        };
        Ok(z.embeddings)
    };
    let train: Vec<&ClipRecord> = ds.training().collect();
    let val: Vec<&ClipRecord> = ds.split(Split::Validation).collect();
    let train_z = features_of(&train).into_iter().map(embed).collect::<Result<Vec<_>>>()?;
    let val_z = features_of(&val).into_iter().map(embed).collect::<Result<Vec<_>>>()?;
    let mut fit_cfg = cfg.prototypes.gmm.clone();
    if cfg.prototypes.kind == PrototypeKind::Kmeans {
        fit_cfg.max_iters = cfg.prototypes.kmeans_max_iters;
    }
    let mut rng = substream(seed, "prototypes", &[iteration as u64]);
    let (prototypes, train_labels) =
        build_pseudo_labels(&train_z, cfg.prototypes.kind, cfg.prototypes.components, &mut rng, &fit_cfg)?;
    let val_labels = val_z.iter().map(|z| prototypes.pseudo_labels(z)).collect::<Result<Vec<_>>>()?;
    let model_file = match &prototypes {
        FittedPrototypes::Gmm(m) => m.clone(),
        FittedPrototypes::Kmeans(km) => {
            let refs: Vec<&Array> = train_z.iter().collect();
            km.summary(&Array::vstack(&refs)?, fit_cfg.variance_floor)?
        }
    };
    Ok(EStep {
        prototypes,
        model_file,
        train_labels,
        val_labels,
    })
}

#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub iteration: usize,
    /// Parameters after this iteration's M-step (untrained for 0).
    pub store: ParamStore,
    /// Pseudo labels computed from this iteration's encoder; the next
    /// M-step trains on them.
    pub estep: EStep,
    pub logs: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub model: MaskedModel,
    /// Index `i` holds iteration `i`, starting from the untrained model.
    pub iterations: Vec<IterationOutcome>,
}

fn epoch_logs_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

fn persist_iteration(
    cfg: &RunConfig,
    ds: &Dataset,
    paths: &Paths,
    it: &IterationOutcome,
    optimizer: Option<crate::numgrad::AdamW>,
    seed: u64,
) -> Result<()> {
    Checkpoint {
        stage: Stage::Pretrain(it.iteration),
        config: cfg.to_toml()?,
        rng: RngState {
            master_seed: seed,
            next_iteration: it.iteration as u64 + 1,
        },
        params: it.store.clone(),
        optimizer,
    }
    .save(&paths.checkpoint(it.iteration))?;
    it.estep.model_file.save(&paths.iteration(it.iteration).join("prototypes.bin"))?;
    let dir = paths.pseudo_labels(it.iteration);
    let train = ds.training().zip(&it.estep.train_labels);
    let val = ds.split(Split::Validation).zip(&it.estep.val_labels);
    for (rec, labels) in train.chain(val) {
        labels.save(&dir.join(format!("{}.psl", rec.id)))?;
    }
    if it.iteration > 0 {
        write_file(
            &paths.iteration(it.iteration).join("train_log.csv"),
            epoch_logs_csv(&it.logs).as_bytes(),
        )?;
    }
    Ok(())
}

/// Runs `cfg.iterations` E/M iterations from a freshly initialized model.
/// With `paths`, each iteration's checkpoint, prototypes, pseudo labels and
/// training log are written as soon as it finishes.
pub fn run_pretrain(cfg: &RunConfig, ds: &Dataset, seed: u64, paths: Option<&Paths>) -> Result<PretrainRun> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = MaskedModel::new(&mut store, &cfg.encoder, &cfg.context, seed)?;
    let train: Vec<&ClipRecord> = ds.training().collect();
    if train.is_empty() {
        return Err(Error::Data("dataset has no training clips".into()));
    }
    let feats = features_of(&train);
    let first = IterationOutcome {
        iteration: 0,
        store: store.clone(),
        estep: e_step(cfg, &model, &store, ds, 0, seed)?,
        logs: Vec::new(),
    };
    if let Some(p) = paths {
        persist_iteration(cfg, ds, p, &first, None, seed)?;
    }
    let mut iterations = vec![first];
    for it in 1..=cfg.iterations {
        let prev = &iterations[it - 1].estep;
        let (logs, opt) = pretrain(
            &model,
            &mut store,
            &feats,
            &prev.train_labels,
            prev.prototypes.means(),
            &cfg.pretrain,
            seed,
            it,
        )?;
        let outcome = IterationOutcome {
            iteration: it,
            store: store.clone(),
            estep: e_step(cfg, &model, &store, ds, it, seed)?,
            logs,
        };
        if let Some(p) = paths {
            persist_iteration(cfg, ds, p, &outcome, Some(opt), seed)?;
        }
        iterations.push(outcome);
    }
    Ok(PretrainRun { model, iterations })
}

/// Supervision for every training clip, in dataset order.
pub fn supervision(ds: &Dataset) -> Result<Vec<(&ClipRecord, Supervision)>> {
    let c = ds.config().categories;
    ds.training()
        .map(|rec| {
            let s = match rec.split {
                Split::Strong => Supervision::Strong(rec.clip.truth_frames()),
                Split::Weak => {
                    let w = rec
                        .weak_labels
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("weak clip {} has no clip labels", rec.id)))?;
                    Supervision::weak_from_categories(c, w)?
                }
                _ => Supervision::Unlabeled,
            };
            Ok((rec, s))
        })
        .collect()
}

pub fn validation_truth(ds: &Dataset) -> Vec<(&ClipRecord, Array)> {
    ds.split(Split::Validation).map(|r| (r, r.clip.truth_frames())).collect()
}

/// Attaches a classifier to `pretrained` and fine-tunes it on the dataset.
pub fn run_finetune(
    cfg: &RunConfig,
    ds: &Dataset,
    pretrained: &ParamStore,
    seed: u64,
) -> Result<(SedModel, FinetuneOutcome)> {
    let categories = ds.config().categories;
    let (model, mut store) = attach_classifier(
        pretrained,
        &cfg.encoder,
        &cfg.context,
        categories,
        cfg.finetune.head_init_scale,
        seed,
    )?;
    let sup = supervision(ds)?;
    let train: Vec<TrainClip<'_>> = sup
        .iter()
        .map(|(r, s)| TrainClip {
            features: &r.clip.features,
            labels: s,
        })
        .collect();
    let truth = validation_truth(ds);
    let val: Vec<ValClip<'_>> = truth
        .iter()
        .map(|(r, t)| ValClip {
            features: &r.clip.features,
            truth: t,
        })
        .collect();
    let outcome = finetune(&model, &mut store, &train, &val, &cfg.finetune, seed)?;
    Ok((model, outcome))
}

/// Writes the best model, the per-epoch metrics log and a short report.
pub fn save_finetune(cfg: &RunConfig, outcome: &FinetuneOutcome, dir: &Path, seed: u64) -> Result<()> {
    Checkpoint {
        stage: Stage::Finetuned,
        config: cfg.to_toml()?,
        rng: RngState {
            master_seed: seed,
            next_iteration: 0,
        },
        params: outcome.best.clone(),
        optimizer: None,
    }
    .save(&dir.join("model.ckpt"))?;
    write_file(&dir.join("metrics.csv"), logs_to_csv(&outcome.logs).as_bytes())?;
    let report = format!("best_epoch: {}\n{}", outcome.best_epoch, outcome.best_metrics.report());
    write_file(&dir.join("report.txt"), report.as_bytes())
}

/// Rebuilds a fine-tuned model from its parameters.
pub fn load_sed_model(cfg: &RunConfig, params: &ParamStore, categories: usize) -> Result<(SedModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = SedModel::new(&mut store, &cfg.encoder, &cfg.context, categories, 0.0, 0)?;
    if !store.same_layout(params) {
        return Err(Error::Load("checkpoint parameters do not match the configured classifier".into()));
    }
    Ok((model, params.clone()))
}

/// Raw frame probabilities for every clip of a split.
pub fn predict_split<'a>(
    model: &SedModel,
    store: &ParamStore,
    ds: &'a Dataset,
    split: Split,
) -> Result<Vec<(&'a ClipRecord, Array)>> {
    ds.split(split)
        .map(|r| Ok((r, model.predict(store, &r.clip.features)?)))
        .collect()
}

/// Frame macro-F1 and event F1 over a split that carries frame labels.
pub fn evaluate_split(
    predictions: &[(&ClipRecord, Array)],
    post: &PostProcessing,
) -> Result<Metrics> {
    if let Some((r, _)) = predictions.iter().find(|(r, _)| !matches!(r.split, Split::Strong | Split::Validation)) {
        return Err(Error::Data(format!("clip {} has no frame labels to evaluate against", r.id)));
    }
    let truth: Vec<Array> = predictions.iter().map(|(r, _)| r.clip.truth_frames()).collect();
    score_clips(predictions.iter().map(|(_, p)| p).zip(&truth), post)
}

/// `frame,p_0..p_{C-1}` rows of raw probabilities.
pub fn probabilities_csv(p: &Array) -> String {
    let mut s = String::from("frame");
    for c in 0..p.cols() {
        let _ = write!(s, ",p_{c}");
    }
    s.push('\n');
    for t in 0..p.rows() {
        let _ = write!(s, "{t}");
        for &v in p.row(t) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Correlation of pseudo labels with ground truth over labeled frames.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub raw: CorrelationMatrix,
    pub reordered: CorrelationMatrix,
    /// Original prototype index of each reordered column.
    pub permutation: Vec<usize>,
}

impl Analysis {
    /// Largest correlation of each category with any prototype.
    pub fn best_per_category(&self) -> Vec<f64> {
        (0..self.raw.categories())
            .map(|c| (0..self.raw.prototypes()).map(|k| self.raw.get(c, k)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Number of prototypes correlating with category `c` at `level` or more.
    pub fn prototypes_above(&self, c: usize, level: f64) -> usize {
        (0..self.raw.prototypes()).filter(|&k| self.raw.get(c, k) >= level).count()
    }
}

pub fn analyze(labels: &[&PseudoLabelMatrix], truths: &[&Array]) -> Result<Analysis> {
    if labels.len() != truths.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} pseudo-label files for {} labeled clips",
            labels.len(),
            truths.len()
        )));
    }
    for (l, t) in labels.iter().zip(truths) {
        if l.frames() != t.rows() {
            return Err(Error::Data("pseudo labels and truth differ in frame count".into()));
        }
    }
    let gammas: Vec<&Array> = labels.iter().map(|l| &l.gamma).collect();
    let raw = point_biserial_matrix(&Array::vstack(&gammas)?, &Array::vstack(truths)?, true)?;
    let (reordered, permutation) = reorder_prototypes(&raw);
    Ok(Analysis {
        raw,
        reordered,
        permutation,
    })
}

/// Validation clips with their pseudo labels read from `dir`.
pub fn load_validation_pseudo_labels<'a>(
    ds: &'a Dataset,
    dir: &Path,
) -> Result<Vec<(&'a ClipRecord, PseudoLabelMatrix)>> {
    ds.clips
        .iter()
        .filter(|r| r.split == Split::Validation)
        .map(|r| Ok((r, PseudoLabelMatrix::load(&dir.join(format!("{}.psl", r.id)))?)))
        .collect()
}

/// Writes the raw and reordered matrices, the permutation, and timelines
/// for the first `timelines` clips.
pub fn write_analysis(
    dir: &Path,
    analysis: &Analysis,
    clips: &[(&ClipRecord, PseudoLabelMatrix)],
    timelines: usize,
) -> Result<()> {
    let k = analysis.raw.prototypes();
    let identity: Vec<usize> = (0..k).collect();
    write_file(&dir.join("correlation_raw.csv"), analysis.raw.to_csv(&identity).as_bytes())?;
    write_file(
        &dir.join("correlation_reordered.csv"),
        analysis.reordered.to_csv(&analysis.permutation).as_bytes(),
    )?;
    let perm: Vec<String> = analysis.permutation.iter().map(|p| p.to_string()).collect();
    write_file(&dir.join("permutation.txt"), format!("{}\n", perm.join(",")).as_bytes())?;
    for (rec, labels) in clips.iter().take(timelines) {
        export_timeline(
            &dir.join("timelines").join(format!("{}.csv", rec.id)),
            &labels.gamma,
            &rec.clip.truth_frames(),
        )?;
    }
    Ok(())
}

/// Analysis of the validation pseudo labels held in memory by an E-step.
pub fn analyze_estep(ds: &Dataset, estep: &EStep) -> Result<Analysis> {
    let truth: Vec<Array> = ds.split(Split::Validation).map(|r| r.clip.truth_frames()).collect();
    let labels: Vec<&PseudoLabelMatrix> = estep.val_labels.iter().collect();
    analyze(&labels, &truth.iter().collect::<Vec<_>>())
}

/// One pretraining setup along the mask / prototype / loss axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub mask: bool,
    pub proto: PrototypeKind,
    pub loss: LossKind,
}

impl Variant {
    pub const FULL: Variant = Variant {
        mask: true,
        proto: PrototypeKind::Gmm,
        loss: LossKind::PrototypeBce,
    };

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if !self.mask {
            parts.push("no_mask");
        }
        if self.proto == PrototypeKind::Kmeans {
            parts.push("kmeans");
        }
        if self.loss == LossKind::InfoNce {
            parts.push("infonce");
        }
        if parts.is_empty() {
            "pmam".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.pretrain.mask.enabled = self.mask;
        c.prototypes.kind = self.proto;
        c.pretrain.loss.loss_kind = self.loss;
        c
    }

    pub fn all() -> Vec<Variant> {
        let mut v = Vec::new();
        for mask in [true, false] {
            for proto in [PrototypeKind::Gmm, PrototypeKind::Kmeans] {
                for loss in [LossKind::PrototypeBce, LossKind::InfoNce] {
                    v.push(Variant { mask, proto, loss });
                }
            }
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Condition {
    pub variant: Variant,
    /// Pretraining iterations before fine-tuning; 0 skips pretraining.
    pub iteration: usize,
}

impl Condition {
    pub fn label(&self) -> String {
        if self.iteration == 0 {
            "iter0".into()
        } else {
            format!("{}_iter{}", self.variant.name(), self.iteration)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// The iteration rows plus the three single-axis ablations.
    Tables,
    /// Every variant at every iteration.
    Full,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tables" => Ok(Self::Tables),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown grid '{other}' (expected tables or full)"))),
        }
    }
}

pub fn conditions(grid: Grid, iterations: usize) -> Vec<Condition> {
    let base = Condition {
        variant: Variant::FULL,
        iteration: 0,
    };
    let mut out = vec![base];
    match grid {
        Grid::Tables => {
            out.extend((1..=iterations).map(|iteration| Condition {
                variant: Variant::FULL,
                iteration,
            }));
            if iterations > 0 {
                let f = Variant::FULL;
                for variant in [
                    Variant { mask: false, ..f },
                    Variant {
                        proto: PrototypeKind::Kmeans,
                        ..f
                    },
                    Variant {
                        loss: LossKind::InfoNce,
                        ..f
                    },
                ] {
                    out.push(Condition { variant, iteration: iterations });
                }
            }
        }
        Grid::Full => {
            for variant in Variant::all() {
                out.extend((1..=iterations).map(|iteration| Condition { variant, iteration }));
            }
        }
    }
    out
}

/// Per-seed outcome of every condition.
#[derive(Clone, Debug)]
pub struct ExperimentTable {
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    /// `cells[c][s]`: metrics of condition `c` under seed `s`, or the error
    /// that stopped it.
    pub cells: Vec<Vec<std::result::Result<Metrics, String>>>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl ExperimentTable {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.conditions.iter().position(|c| c.label() == label)
    }

    /// Median over the seeds that completed.
    pub fn median(&self, condition: usize) -> Option<Metrics> {
        let ok: Vec<&Metrics> = self.cells[condition].iter().filter_map(|r| r.as_ref().ok()).collect();
        Some(Metrics {
            frame_macro_f1: median(ok.iter().map(|m| m.frame_macro_f1).collect())?,
            event_f1: median(ok.iter().map(|m| m.event_f1).collect())?,
        })
    }

    pub fn median_of(&self, label: &str) -> Option<Metrics> {
        self.median(self.index(label)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "condition,mask,prototypes,loss,iteration,seeds_ok,median_frame_f1,median_event_f1,frame_f1_per_seed,errors\n",
        );
        for (i, c) in self.conditions.iter().enumerate() {
            let cells = &self.cells[i];
            let ok = cells.iter().filter(|r| r.is_ok()).count();
            let med = self.median(i);
            let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
            let per_seed: Vec<String> = cells
                .iter()
                .map(|r| r.as_ref().map_or_else(|_| "failed".into(), |m| format!("{:.6}", m.frame_macro_f1)))
                .collect();
            let errors: Vec<String> = cells
                .iter()
                .zip(&self.seeds)
                .filter_map(|(r, seed)| r.as_ref().err().map(|e| format!("seed {seed}: {}", e.replace([',', '\n'], " "))))
                .collect();
            let v = c.variant;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.label(),
                if c.iteration == 0 { "-" } else if v.mask { "on" } else { "off" },
                if c.iteration == 0 { "-" } else if v.proto == PrototypeKind::Gmm { "gmm" } else { "kmeans" },
                if c.iteration == 0 { "-" } else if v.loss == LossKind::PrototypeBce { "bce" } else { "infonce" },
                c.iteration,
                ok,
                fmt(med.map(|m| m.frame_macro_f1)),
                fmt(med.map(|m| m.event_f1)),
                per_seed.join(";"),
                errors.join(";"),
            );
        }
        s
    }
}

/// Untrained pretraining parameters for `seed`, as the iteration-0 condition
/// fine-tunes from.
pub fn untrained_store(enc: &crate::encoder::EncoderConfig, ctx: &ContextConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    MaskedModel::new(&mut store, enc, ctx, seed)?;
    Ok(store)
}

/// Runs every condition under every seed. Pretraining is shared between
/// the iterations of one variant; failures are recorded per cell and the
/// run continues. `progress` receives one line per finished cell.
pub fn run_experiment(
    cfg: &RunConfig,
    ds: &Dataset,
    conditions: &[Condition],
    seeds: &[u64],
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<ExperimentTable> {
    cfg.validate()?;
    let mut cells = vec![Vec::with_capacity(seeds.len()); conditions.len()];
    let mut variants: Vec<Variant> = Vec::new();
    for c in conditions.iter().filter(|c| c.iteration > 0) {
        if !variants.contains(&c.variant) {
            variants.push(c.variant);
        }
    }
    for &seed in seeds {
        let mut results: Vec<Option<std::result::Result<Metrics, String>>> = vec![None; conditions.len()];
        let mut finish = |idx: usize, cfg: &RunConfig, store: &ParamStore| {
            let label = conditions[idx].label();
            let r = run_finetune(cfg, ds, store, seed).and_then(|(_, o)| {
                if let Some(dir) = out {
                    let d = dir.join(format!("seed{seed}")).join(&label);
                    write_file(&d.join("metrics.csv"), logs_to_csv(&o.logs).as_bytes())?;
                }
                Ok(o.best_metrics)
            });
            match &r {
                Ok(m) => progress(&format!(
                    "seed {seed} {label}: frame_f1 {:.4} event_f1 {:.4}",
                    m.frame_macro_f1, m.event_f1
                )),
                Err(e) => progress(&format!("seed {seed} {label}: failed: {e}")),
            }
            r.map_err(|e| e.to_string())
        };
        for (idx, c) in conditions.iter().enumerate().filter(|(_, c)| c.iteration == 0) {
            let vcfg = c.variant.apply(cfg);
            results[idx] = Some(match untrained_store(&vcfg.encoder, &vcfg.context, seed) {
                Ok(store) => finish(idx, &vcfg, &store),
                Err(e) => Err(e.to_string()),
            });
        }
        for v in &variants {
            let mine: Vec<usize> = (0..conditions.len())
                .filter(|&i| conditions[i].variant == *v && conditions[i].iteration > 0)
                .collect();
            let mut vcfg = v.apply(cfg);
            vcfg.iterations = mine.iter().map(|&i| conditions[i].iteration).max().unwrap_or(0);
            match run_pretrain(&vcfg, ds, seed, None) {
                Ok(run) => {
                    for &i in &mine {
                        let store = &run.iterations[conditions[i].iteration].store;
                        results[i] = Some(finish(i, &vcfg, store));
                    }
                }
                Err(e) => {
                    for &i in &mine {
                        results[i] = Some(Err(format!("pretraining failed: {e}")));
                    }
                }
            }
        }
        for (cell, r) in cells.iter_mut().zip(results) {
            cell.push(r.unwrap_or_else(|| Err("not run".into())));
        }
    }
    let table = ExperimentTable {
        conditions: conditions.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    };
    if let Some(dir) = out {
        write_file(&dir.join("results.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_grid_rows() {
        let labels: Vec<String> = conditions(Grid::Tables, 2).iter().map(|c| c.label()).collect();
        assert_eq!(
            labels,
            ["iter0", "pmam_iter1", "pmam_iter2", "no_mask_iter2", "kmeans_iter2", "infonce_iter2"]
        );
        assert_eq!(conditions(Grid::Full, 2).len(), 1 + 8 * 2);
        assert_eq!(conditions(Grid::Tables, 0).len(), 1);
    }

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn variant_config_changes_one_axis() {
        let base = RunConfig::default();
        let v = Variant {
            mask: false,
            ..Variant::FULL
        };
        let c = v.apply(&base);
        assert!(!c.pretrain.mask.enabled);
        assert_eq!(c.prototypes, base.prototypes);
        assert_eq!(c.pretrain.loss, base.pretrain.loss);
        assert_eq!(Variant::FULL.apply(&base), base);
    }
}
