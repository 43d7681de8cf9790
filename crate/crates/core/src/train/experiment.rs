//! Full training runs with periodic target-validation evaluation and a
//! metrics CSV.
//!
//! CSV columns, in order: `step, loss_total, loss_source, loss_target,
//! confidence, iou_<class>` for every class, `miou, attn_small,
//! attn_large`. Loss columns average the steps since the previous row and
//! are empty on the step-0 row; IoU columns are empty for classes absent
//! from both prediction and truth; attention columns are empty for
//! single-resolution variants.

use std::io::Write;

use rand::Rng;

use super::config::{EvalModel, TrainConfig};
use super::step::{step_rng, train_step, StepLosses, TrainBatch, TrainState};
use crate::data::metrics::ConfusionMatrix;
use crate::data::scene::{Dataset, Domain, LabelMap, Split, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::inference::{infer_image, InferenceConfig};
use crate::model::NetworkParams;
use crate::tensor::Tensor;

/// Classes whose pixels count as small structures for the attention
/// statistics.
pub const SMALL_CLASSES: [u8; 2] = [3, 4];
/// Class whose pixels count as large stuff.
pub const LARGE_CLASS: u8 = 1;

/// Tensors ready for training and evaluation.
pub struct PreparedData {
    pub source: Vec<(Tensor, Tensor)>,
    pub target: Vec<Tensor>,
    pub val: Vec<(Tensor, LabelMap)>,
    pub num_classes: usize,
}

fn batch_of(t: &Tensor) -> Tensor {
    let s = t.shape();
    t.clone().reshape(&[1, s[0], s[1], s[2]]).expect("CHW")
}

impl PreparedData {
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let c = NUM_CLASSES;
        let source =
            d.subset(Domain::Source, Split::Train)
                .into_iter()
                .map(|s| {
                    let l = s.label.as_ref().ok_or_else(|| {
                        Error::invalid("PreparedData", "source sample without label")
                    })?;
                    Ok((batch_of(&s.image.to_tensor()), batch_of(&l.one_hot(c))))
                })
                .collect::<Result<Vec<_>>>()?;
        let target = d
            .subset(Domain::Target, Split::Train)
            .into_iter()
            .map(|s| batch_of(&s.image.to_tensor()))
            .collect();
        let val = d
            .subset(Domain::Target, Split::Val)
            .into_iter()
            .map(|s| {
                let l = s.label.clone().ok_or_else(|| {
                    Error::invalid("PreparedData", "validation sample without label")
                })?;
                Ok((s.image.to_tensor(), l))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = Self {
            source,
            target,
            val,
            num_classes: c,
        };
        if p.source.is_empty() || p.target.is_empty() || p.val.is_empty() {
            return Err(Error::invalid(
                "PreparedData",
                "need source-train, target-train and target-val samples",
            ));
        }
        Ok(p)
    }

    /// Uniformly drawn (with replacement) source and target batch.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<TrainBatch> {
        let si: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..self.source.len()))
            .collect();
        let ti: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..self.target.len()))
            .collect();
        Ok(TrainBatch {
            source_images: Tensor::concat_batch(
                &si.iter().map(|&i| &self.source[i].0).collect::<Vec<_>>(),
            )?,
            source_labels: Tensor::concat_batch(
                &si.iter().map(|&i| &self.source[i].1).collect::<Vec<_>>(),
            )?,
            target_images: Tensor::concat_batch(
                &ti.iter().map(|&i| &self.target[i]).collect::<Vec<_>>(),
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Mean attention over small-structure pixels.
    pub attn_small: Option<f64>,
    /// Mean attention over large-stuff pixels.
    pub attn_large: Option<f64>,
}

/// Segments every validation image (up to `limit`, 0 = all) and scores it.
pub fn evaluate(
    params: &NetworkParams,
    val: &[(Tensor, LabelMap)],
    cfg: &InferenceConfig,
    limit: usize,
) -> Result<EvalResult> {
    let n = if limit == 0 {
        val.len()
    } else {
        limit.min(val.len())
    };
    let mut cm = ConfusionMatrix::new(params.num_classes());
    let (mut small, mut large) = ((0.0, 0usize), (0.0, 0usize));
    let mut has_att = false;
    for (x, label) in &val[..n] {
        let out = infer_image(params, x, cfg)?;
        cm.add(&out.classes, &label.classes)?;
        if let Some(a) = &out.attention {
            has_att = true;
            for (&c, &v) in label.classes.iter().zip(a) {
                if SMALL_CLASSES.contains(&c) {
                    small.0 += v;
                    small.1 += 1;
                } else if c == LARGE_CLASS {
                    large.0 += v;
                    large.1 += 1;
                }
            }
        }
    }
    let mean = |(s, k): (f64, usize)| (has_att && k > 0).then(|| s / k as f64);
    Ok(EvalResult {
        iou: cm.iou(),
        miou: cm.miou(),
        confusion: cm,
        attn_small: mean(small),
        attn_large: mean(large),
    })
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub losses: Option<StepLosses>,
    pub eval: EvalResult,
}

pub fn csv_header() -> String {
    let mut cols: Vec<String> = [
        "step",
        "loss_total",
        "loss_source",
        "loss_target",
        "confidence",
    ]
    .map(String::from)
    .to_vec();
    cols.extend(CLASS_NAMES.iter().map(|n| format!("iou_{n}")));
    cols.extend(["miou", "attn_small", "attn_large"].map(String::from));
    cols.join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = self.losses;
        let mut cols = vec![
            self.step.to_string(),
            opt(l.map(|l| l.total)),
            opt(l.map(|l| l.source)),
            opt(l.map(|l| l.target)),
            opt(l.map(|l| l.confidence)),
        ];
        cols.extend(self.eval.iou.iter().map(|v| opt(*v)));
        cols.push(format!("{:.6}", self.eval.miou));
        cols.push(opt(self.eval.attn_small));
        cols.push(opt(self.eval.attn_large));
        cols.join(",")
    }
}

pub struct RunResult {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
}

impl RunResult {
    pub fn final_eval(&self) -> &EvalResult {
        &self.rows.last().expect("at least one row").eval
    }
}

fn eval_params<'a>(state: &'a TrainState, cfg: &TrainConfig) -> &'a NetworkParams {
    match cfg.eval_model {
        EvalModel::Student => &state.student,
        EvalModel::Teacher => &state.teacher.params,
    }
}

fn mean_losses(acc: &[StepLosses]) -> Option<StepLosses> {
    if acc.is_empty() {
        return None;
    }
    let k = acc.len() as f64;
    let sum = |f: fn(&StepLosses) -> f64| acc.iter().map(f).sum::<f64>() / k;
    Some(StepLosses {
        source: sum(|l| l.source),
        target: sum(|l| l.target),
        total: sum(|l| l.total),
        confidence: sum(|l| l.confidence),
    })
}

/// Trains for `cfg.steps` steps, writing the header and one row per
/// evaluation to `csv`.
pub fn run_experiment(
    cfg: &TrainConfig,
    data: &PreparedData,
    csv: &mut dyn Write,
) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.model.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, data {}",
            cfg.model.num_classes, data.num_classes
        )));
    }
    let io = |e| Error::io("metrics csv", e);
    writeln!(csv, "{}", csv_header()).map_err(io)?;
    let mut state = TrainState::new(cfg, &mut step_rng(cfg.seed, usize::MAX))?;
    let inf = cfg.inference();
    let mut rows = Vec::new();
    let mut acc = Vec::new();
    let due =
        |s: usize| s == cfg.steps || (cfg.eval_interval > 0 && s.is_multiple_of(cfg.eval_interval));
    if due(0) {
        let row = MetricsRow {
            step: 0,
            losses: None,
            eval: evaluate(eval_params(&state, cfg), &data.val, &inf, cfg.eval_images)?,
        };
        writeln!(csv, "{}", row.to_csv()).map_err(io)?;
        rows.push(row);
    }
    for s in 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, s);
        let batch = data.sample_batch(cfg.batch_size, &mut rng)?;
        acc.push(train_step(&mut state, &batch, cfg, &mut rng)?);
        if due(s) {
            let row = MetricsRow {
                step: s,
                losses: mean_losses(&acc),
                eval: evaluate(eval_params(&state, cfg), &data.val, &inf, cfg.eval_images)?,
            };
            acc.clear();
            writeln!(csv, "{}", row.to_csv()).map_err(io)?;
            rows.push(row);
        }
    }
    csv.flush().map_err(io)?;
    Ok(RunResult { state, rows })
}
