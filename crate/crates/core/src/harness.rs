//! Experiment runner: variant training, evaluation, ablation and the files
//! each command emits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prnn_tensor::{func, ParameterStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Hyperparams, ModelConfig};
use crate::error::{invalid, io_err, Error, Result};
use crate::metrics::{mean_std, Confusion};
use crate::pipeline::checkpoint::{self, write_json};
use crate::pipeline::latent::BridgingMatrix;
use crate::pipeline::train::{run_learning, run_pretrain, run_refining, stage_seed, LogEntry, Split};
use crate::pipeline::{Sample, StageResult};
use crate::synth::{Dataset, SplitName, SynthConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRACES_FILE: &str = "traces.dat";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Model variants compared in the ablation, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Depth-only classification, no skeleton at any stage.
    VanillaCnnRnn,
    /// Multi-task learning from scratch, then refinement.
    PrnnNoPretrain,
    /// Pre-training with skeletons, then multi-task learning.
    PrnnNoRefine,
    /// Pre-training, multi-task learning and refinement.
    PrnnFull,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::VanillaCnnRnn,
        AblationVariant::PrnnNoPretrain,
        AblationVariant::PrnnNoRefine,
        AblationVariant::PrnnFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::VanillaCnnRnn => "vanilla_cnn_rnn",
            AblationVariant::PrnnNoPretrain => "prnn_no_pretrain",
            AblationVariant::PrnnNoRefine => "prnn_no_refine",
            AblationVariant::PrnnFull => "prnn_full",
        }
    }

    /// Stage names in execution order; these are also checkpoint directory names.
    pub fn stages(self) -> &'static [&'static str] {
        match self {
            AblationVariant::VanillaCnnRnn => &["vanilla"],
            AblationVariant::PrnnNoPretrain => &["learn", "refine"],
            AblationVariant::PrnnNoRefine => &["pretrain", "learn"],
            AblationVariant::PrnnFull => &["pretrain", "learn", "refine"],
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation {
                what: "variant",
                reason: format!(
                    "unknown variant {s:?} (expected one of {})",
                    Self::ALL.map(|v| v.as_str()).join(", ")
                ),
            })
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// Everything a run depends on. Serialized verbatim into the output
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: SynthConfig,
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    pub variant: AblationVariant,
    pub seed: u64,
    /// Seeds used by the ablation.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Dataset manifest used by train and ablate.
    pub manifest: Option<PathBuf>,
    /// Test sequences whose per-frame confidences go to the trace file.
    pub trace_sequences: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: SynthConfig::default(),
            model: ModelConfig::desk(SynthConfig::default().num_classes),
            hyper: Hyperparams::default(),
            variant: AblationVariant::PrnnFull,
            seed: 0,
            seeds: default_seeds(),
            manifest: None,
            trace_sequences: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = checkpoint::read_json(path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.hyper.validate()?;
        if self.model.num_classes != self.dataset.num_classes {
            return invalid(
                "experiment config",
                format!(
                    "model has K = {}, dataset config has K = {}",
                    self.model.num_classes, self.dataset.num_classes
                ),
            );
        }
        if self.seeds.is_empty() {
            return invalid("experiment config", "no ablation seeds");
        }
        Ok(())
    }

    fn manifest_path(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| Error::Validation {
            what: "experiment config",
            reason: "no dataset manifest given".into(),
        })
    }
}

/// Loaded splits for training and testing.
#[derive(Clone, Debug)]
pub struct Data {
    pub split: Split,
    /// Depth-only test sequences.
    pub test: Vec<Sample>,
}

impl Data {
    pub fn load(dataset: &Dataset, model: &ModelConfig) -> Result<Self> {
        Ok(Self {
            split: Split {
                train: dataset.training_samples(SplitName::Train, model)?,
                val: dataset.training_samples(SplitName::Val, model)?,
            },
            test: dataset.depth_samples(SplitName::Test, model)?,
        })
    }
}

/// Output of one trained stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub name: &'static str,
    pub params: ParameterStore,
    pub log: Vec<LogEntry>,
    pub bridging: Option<BridgingMatrix>,
}

impl StageOutput {
    fn plain(name: &'static str, r: StageResult) -> Self {
        Self {
            name,
            params: r.params,
            log: r.log,
            bridging: None,
        }
    }
}

/// Trains the requested variants for one seed. Stages shared between
/// variants (pre-training and learning for the two pre-trained variants)
/// are computed once; every stage uses its own derived seed, so results
/// equal those of standalone runs.
pub fn train_variants(
    data: &Data,
    model: &ModelConfig,
    hp: &Hyperparams,
    seed: u64,
    variants: &[AblationVariant],
) -> Result<BTreeMap<AblationVariant, Vec<StageOutput>>> {
    let split = &data.split;
    let long = hp.pretrain_epochs + hp.learn_epochs;
    let mut out = BTreeMap::new();
    let mut pretrained: Option<(StageOutput, StageOutput)> = None;
    for &v in variants {
        let stages = match v {
            AblationVariant::VanillaCnnRnn => {
                let r = run_pretrain(split, model, hp, long, false, stage_seed(seed, "vanilla"))?;
                vec![StageOutput::plain("vanilla", r)]
            }
            AblationVariant::PrnnNoPretrain => {
                let learn = run_learning(split, None, model, hp, long, stage_seed(seed, "learn"))?;
                let refine = run_refining(split, &learn.params, model, hp, stage_seed(seed, "refine"))?;
                vec![
                    StageOutput::plain("learn", learn),
                    refine_output(refine),
                ]
            }
            AblationVariant::PrnnNoRefine | AblationVariant::PrnnFull => {
                if pretrained.is_none() {
                    let pre = run_pretrain(split, model, hp, hp.pretrain_epochs, true, stage_seed(seed, "pretrain"))?;
                    let learn = run_learning(
                        split,
                        Some(&pre.params),
                        model,
                        hp,
                        hp.learn_epochs,
                        stage_seed(seed, "learn"),
                    )?;
                    pretrained = Some((StageOutput::plain("pretrain", pre), StageOutput::plain("learn", learn)));
                }
                let (pre, learn) = pretrained.clone().expect("set above");
                if v == AblationVariant::PrnnFull {
                    let refine = run_refining(split, &learn.params, model, hp, stage_seed(seed, "refine"))?;
                    vec![pre, learn, refine_output(refine)]
                } else {
                    vec![pre, learn]
                }
            }
        };
        out.insert(v, stages);
    }
    Ok(out)
}

fn refine_output(r: crate::pipeline::train::RefineResult) -> StageOutput {
    StageOutput {
        name: "refine",
        params: r.stage.params,
        log: r.stage.log,
        bridging: Some(r.bridging),
    }
}

/// Test-set predictions of a model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: Confusion,
    /// Per sequence: id, label and `[T, K]` per-frame distributions.
    pub traces: Vec<(String, usize, Tensor)>,
}

/// Evaluates on depth input only.
pub fn evaluate_depth(params: &ParameterStore, model: &ModelConfig, samples: &[Sample]) -> Result<Evaluation> {
    let mut truth = Vec::with_capacity(samples.len());
    let mut pred = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = crate::pipeline::train::predict(params, model, &s.frames, None)?;
        if !probs.all_finite() {
            return Err(Error::Numeric(format!("prediction for {}", s.id)));
        }
        let k = model.num_classes;
        truth.push(s.label);
        pred.push(func::argmax(&probs.data()[probs.len() - k..]));
        traces.push((s.id.clone(), s.label, probs));
    }
    Ok(Evaluation {
        confusion: Confusion::from_pairs(model.num_classes, &truth, &pred)?,
        traces,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub pretrain: Vec<f64>,
    pub learn: Vec<f64>,
    #[serde(rename = "refine_Q")]
    pub refine_q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: String,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub stage_losses: StageLosses,
}

impl Metrics {
    pub fn new(variant: &str, seed: u64, confusion: &Confusion, stages: &[StageOutput]) -> Self {
        let mut losses = StageLosses::default();
        for s in stages {
            match s.name {
                "pretrain" | "vanilla" => losses.pretrain = s.log.iter().map(|e| e.losses.train).collect(),
                "learn" => losses.learn = s.log.iter().map(|e| e.losses.train).collect(),
                "refine" => losses.refine_q = s.log.iter().filter_map(|e| e.q).collect(),
                _ => {}
            }
        }
        Self {
            variant: variant.to_string(),
            seed,
            mean_accuracy: confusion.mean_accuracy(),
            per_class_accuracy: confusion.per_class_accuracy(),
            confusion: confusion.counts.clone(),
            stage_losses: losses,
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

pub fn write_curves(path: &Path, stages: &[StageOutput]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["stage", "iteration", "loss_or_Q", "val_accuracy"])?;
    for s in stages {
        for e in &s.log {
            let value = if s.name == "refine" { e.q.unwrap_or(f64::NAN) } else { e.losses.train };
            w.write_record([
                s.name.to_string(),
                e.iteration.to_string(),
                value.to_string(),
                e.val_accuracy.to_string(),
            ])?;
        }
    }
    flush(w, path)
}

pub fn write_confusion(path: &Path, c: &Confusion) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..c.k).map(|i| i.to_string()));
    w.write_record(&header)?;
    for (i, row) in c.counts.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    flush(w, path)
}

/// One row per sequence and frame with the class distribution.
pub fn write_predictions(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = csv_writer(path)?;
    let k = eval.confusion.k;
    let mut header = vec!["id".to_string(), "label".into(), "frame".into()];
    header.extend((0..k).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (id, label, probs) in &eval.traces {
        for (t, row) in probs.data().chunks(k).enumerate() {
            let mut rec = vec![id.clone(), label.to_string(), t.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    flush(w, path)
}

/// Gnuplot data: one block per (variant, sequence) with columns
/// `frame p_true p_max`, blocks separated by two blank lines.
pub fn write_traces(path: &Path, blocks: &[(String, &Evaluation)], limit: usize) -> Result<()> {
    let mut text = String::from("# frame p_true p_max\n");
    for (name, eval) in blocks {
        let k = eval.confusion.k;
        for (id, label, probs) in eval.traces.iter().take(limit) {
            text.push_str(&format!("# {name} {id} label={label}\n"));
            for (t, row) in probs.data().chunks(k).enumerate() {
                let max = row.iter().copied().fold(f64::MIN, f64::max);
                text.push_str(&format!("{t} {} {max}\n", row[*label]));
            }
            text.push_str("\n\n");
        }
    }
    fs::write(path, text).map_err(io_err(path))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

/// Summary of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Metrics,
    pub stages: Vec<String>,
}

fn write_run(out: &Path, variant: AblationVariant, seed: u64, stages: &[StageOutput], eval: &Evaluation) -> Result<Metrics> {
    let metrics = Metrics::new(variant.as_str(), seed, &eval.confusion, stages);
    write_json(&out.join(METRICS_FILE), &metrics)?;
    write_curves(&out.join(CURVES_FILE), stages)?;
    write_confusion(&out.join(CONFUSION_FILE), &eval.confusion)?;
    Ok(metrics)
}

/// Trains the configured variant, checkpoints every stage and writes
/// metrics, learning curves, the confusion matrix and test traces.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let dataset = Dataset::open(cfg.manifest_path()?)?;
    let data = Data::load(&dataset, &cfg.model)?;
    prepare_out(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let mut runs = train_variants(&data, &cfg.model, &cfg.hyper, cfg.seed, &[cfg.variant])?;
    let stages = runs.remove(&cfg.variant).expect("variant trained");
    for s in &stages {
        checkpoint::save(
            &out.join(CHECKPOINT_DIR).join(s.name),
            &cfg.model,
            &s.params,
            s.bridging.as_ref(),
            &s.log,
        )?;
    }
    let last = stages.last().expect("at least one stage");
    let eval = evaluate_depth(&last.params, &cfg.model, &data.test)?;
    let metrics = write_run(out, cfg.variant, cfg.seed, &stages, &eval)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &eval)?;
    write_traces(
        &out.join(TRACES_FILE),
        &[(cfg.variant.as_str().to_string(), &eval)],
        cfg.trace_sequences,
    )?;
    Ok(TrainReport {
        metrics,
        stages: stages.iter().map(|s| s.name.to_string()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub sequences: usize,
    pub mean_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates a stage checkpoint on one split from depth frames alone.
pub fn cmd_eval(checkpoint_dir: &Path, manifest: &Path, split: SplitName, out: &Path) -> Result<EvalReport> {
    let ck = checkpoint::load(checkpoint_dir)?;
    let dataset = Dataset::open(manifest)?;
    let samples = dataset.depth_samples(split, &ck.model)?;
    let eval = evaluate_depth(&ck.params, &ck.model, &samples)?;
    prepare_out(out)?;
    let report = EvalReport {
        split: split.as_str().to_string(),
        sequences: samples.len(),
        mean_accuracy: eval.confusion.mean_accuracy(),
        per_class_accuracy: eval.confusion.per_class_accuracy(),
        confusion: eval.confusion.counts.clone(),
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    write_confusion(&out.join(CONFUSION_FILE), &eval.confusion)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &eval)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: AblationVariant,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
}

impl AblationReport {
    pub fn mean(&self, v: AblationVariant) -> f64 {
        self.summary.iter().find(|r| r.variant == v).map_or(f64::NAN, |r| r.mean)
    }
}

/// All four variants for every seed. Writes the per-run files under
/// `runs/<variant>/seed<seed>/`, the result table, the summary and the
/// per-frame confidence traces of the first seed.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let dataset = Dataset::open(cfg.manifest_path()?)?;
    let data = Data::load(&dataset, &cfg.model)?;
    prepare_out(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let mut rows = Vec::new();
    let mut trace_evals: Vec<(String, Evaluation)> = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let runs = train_variants(&data, &cfg.model, &cfg.hyper, seed, &AblationVariant::ALL)?;
        for (variant, stages) in runs {
            let last = stages.last().expect("at least one stage");
            let eval = evaluate_depth(&last.params, &cfg.model, &data.test)?;
            let dir = out.join("runs").join(variant.as_str()).join(format!("seed{seed}"));
            prepare_out(&dir)?;
            let metrics = write_run(&dir, variant, seed, &stages, &eval)?;
            log::info!("{variant} seed {seed}: {:.4}", metrics.mean_accuracy);
            rows.push(AblationRow {
                variant,
                seed,
                mean_accuracy: metrics.mean_accuracy,
            });
            if i == 0 {
                trace_evals.push((variant.as_str().to_string(), eval));
            }
        }
    }
    rows.sort_by_key(|r| (r.variant, cfg.seeds.iter().position(|&s| s == r.seed)));
    let summary: Vec<SummaryRow> = AblationVariant::ALL
        .iter()
        .map(|&v| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.mean_accuracy).collect();
            let (mean, std) = mean_std(&acc);
            SummaryRow {
                variant: v,
                runs: acc.len(),
                mean,
                std,
            }
        })
        .collect();

    let path = out.join(ABLATION_FILE);
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    flush(w, &path)?;
    let path = out.join(SUMMARY_FILE);
    let mut w = csv_writer(&path)?;
    for r in &summary {
        w.serialize(r)?;
    }
    flush(w, &path)?;
    let blocks: Vec<(String, &Evaluation)> = trace_evals.iter().map(|(n, e)| (n.clone(), e)).collect();
    write_traces(&out.join(TRACES_FILE), &blocks, cfg.trace_sequences)?;
    Ok(AblationReport { rows, summary })
}

/// Generates the dataset described by `cfg` into `out`.
pub fn cmd_gen_data(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    crate::synth::build_dataset(cfg, out)?;
    Ok(out.join(crate::synth::MANIFEST_FILE))
}
