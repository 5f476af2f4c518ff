//! Task heads on top of a token grid: attention pooling, box regression,
//! per-patch segmentation, classification, and box metrics. Includes the
//! small finetuning loop used to train a head (optionally with its encoder).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::epoch_batches;
use crate::numkernel::{
    AdamW, Bound, Graph, LrSchedule, ParamStore, Rng, ScheduleKind, Tensor, Var,
};
use crate::trace::{LossRecord, MetricRecord};
use crate::transformer::{self, init_linear, init_normal};
use crate::vit::{Encoder, GridVar, TokenGrid};

/// Box in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v)) && x0 <= x1 && y0 <= y1;
        if !ok {
            return Err(Error::Range(format!(
                "invalid box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 as f64 - self.x0 as f64) * (self.y1 as f64 - self.y0 as f64)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 as f64 + self.x1 as f64) / 2.0,
            (self.y0 as f64 + self.y1 as f64) / 2.0,
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 4], vec![self.x0, self.y0, self.x1, self.y1]).expect("four coordinates")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxMetrics {
    pub iou: f64,
    /// Gold center inside the predicted box, boundary inclusive.
    pub center_hit: bool,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) as f64 - a.x0.max(b.x0) as f64).max(0.0);
    let h = (a.y1.min(b.y1) as f64 - a.y0.max(b.y0) as f64).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn box_metrics(pred: &BBox, gold: &BBox) -> BoxMetrics {
    let (cx, cy) = gold.center();
    let center_hit = pred.x0 as f64 <= cx
        && cx <= pred.x1 as f64
        && pred.y0 as f64 <= cy
        && cy <= pred.y1 as f64;
    BoxMetrics {
        iou: iou(pred, gold),
        center_hit,
    }
}

/// Per-patch class logits, `[rows, cols, K + 1]`; the last class is the
/// no-label background.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub rows: usize,
    pub cols: usize,
    pub data: Tensor,
}

impl SegLogits {
    pub fn argmax(&self) -> Vec<usize> {
        let k = self.data.last_dim();
        self.data.data().chunks(k).map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadTask {
    #[serde(rename = "bbox")]
    BBox,
    /// `classes` labelled classes; one extra background class is added.
    Segmentation {
        classes: usize,
    },
    Classification {
        classes: usize,
    },
}

impl HeadTask {
    pub fn name(&self) -> &'static str {
        match self {
            HeadTask::BBox => "bbox",
            HeadTask::Segmentation { .. } => "segmentation",
            HeadTask::Classification { .. } => "classification",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadLabel {
    BBox(BBox),
    Patches(Vec<usize>),
    Class(usize),
}

#[derive(Clone, Debug)]
pub struct HeadSample {
    pub image: Tensor,
    pub label: HeadLabel,
}

/// Learned-query pooling parameters under `pool.`.
pub fn init_pool(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Result<()> {
    init_normal(store, "pool.query", &[1, dim], 0.02, rng)?;
    init_linear(store, "pool.key", dim, dim, rng)?;
    init_linear(store, "pool.value", dim, dim, rng)
}

/// Fresh head parameters for `task` on `dim`-wide tokens.
pub fn init_head(task: HeadTask, dim: usize, hidden: usize, rng: &mut Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let (prefix, out) = match task {
        HeadTask::BBox => ("bbox_head", 4),
        HeadTask::Segmentation { classes } => ("seg_head", classes + 1),
        HeadTask::Classification { classes } => ("cls_head", classes),
    };
    if !matches!(task, HeadTask::Segmentation { .. }) {
        init_pool(&mut store, dim, rng)?;
    }
    init_linear(&mut store, &format!("{prefix}.fc1"), dim, hidden, rng)?;
    init_linear(&mut store, &format!("{prefix}.fc2"), hidden, out, rng)?;
    store.set_meta("role", "head");
    store.set_meta("head_task", serde_json::to_string(&task)?);
    Ok(store)
}

/// Learned query attends over `[N, D]` tokens. Returns the pooled `[1, D]`
/// vector and the `[1, N]` attention weights.
pub fn attention_pool(g: &mut Graph, p: &Bound, tokens: Var) -> Result<(Var, Var)> {
    let d = g.shape(tokens)[1];
    let query = p.get("pool.query")?;
    let keys = transformer::linear(g, p, "pool.key", tokens)?;
    let values = transformer::linear(g, p, "pool.value", tokens)?;
    let kt = g.transpose(keys)?;
    let scores = g.matmul(query, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f32).sqrt());
    let weights = g.softmax(scores);
    let pooled = g.matmul(weights, values)?;
    Ok((pooled, weights))
}

/// Four sigmoid outputs, reordered so that `x0 ≤ x1` and `y0 ≤ y1`.
pub fn bbox_forward(g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
    let raw = transformer::mlp(g, p, "bbox_head", pooled)?;
    let s = g.sigmoid(raw);
    let mut first = Tensor::zeros(&[4, 2]);
    let mut second = Tensor::zeros(&[4, 2]);
    first.data_mut()[0] = 1.0; // column 0 -> slot 0
    first.data_mut()[3] = 1.0; // column 1 -> slot 1
    second.data_mut()[4] = 1.0; // column 2 -> slot 0
    second.data_mut()[7] = 1.0; // column 3 -> slot 1
    let (first, second) = (g.constant(first), g.constant(second));
    let a = g.matmul(s, first)?;
    let b = g.matmul(s, second)?;
    let lo = g.minimum(a, b)?;
    let hi = g.maximum(a, b)?;
    g.concat_cols(lo, hi)
}

pub fn seg_forward(g: &mut Graph, p: &Bound, grid: GridVar) -> Result<Var> {
    transformer::mlp(g, p, "seg_head", grid.var)
}

pub fn class_forward(g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
    transformer::mlp(g, p, "cls_head", pooled)
}

fn check_width(head: &ParamStore, name: &str, width: usize) -> Result<()> {
    let w = head.get(name)?;
    if w.shape()[0] != width {
        return Err(Error::Incompatible(format!(
            "`{name}` expects width {}, got {width}",
            w.shape()[0]
        )));
    }
    Ok(())
}

/// Pooled vector and attention weights for a grid.
pub fn pool_tokens(head: &ParamStore, grid: &TokenGrid) -> Result<(Tensor, Vec<f32>)> {
    let mut g = Graph::new();
    let p = head.bind(&mut g, false);
    let x = g.constant(grid.data.clone());
    let (pooled, w) = attention_pool(&mut g, &p, x)?;
    Ok((g.value(pooled).clone(), g.value(w).data().to_vec()))
}

pub fn predict_bbox(head: &ParamStore, pooled: &Tensor) -> Result<BBox> {
    check_width(head, "bbox_head.fc1.weight", pooled.last_dim())?;
    let mut g = Graph::new();
    let p = head.bind(&mut g, false);
    let x = g.constant(pooled.clone());
    let out = bbox_forward(&mut g, &p, x)?;
    let v = g.value(out).data();
    BBox::new(v[0], v[1], v[2], v[3])
}

pub fn predict_segmentation(head: &ParamStore, grid: &TokenGrid) -> Result<SegLogits> {
    check_width(head, "seg_head.fc1.weight", grid.dim())?;
    let mut g = Graph::new();
    let p = head.bind(&mut g, false);
    let x = g.constant(grid.data.clone());
    let out = seg_forward(
        &mut g,
        &p,
        GridVar {
            rows: grid.rows,
            cols: grid.cols,
            var: x,
        },
    )?;
    let logits = g.value(out).clone();
    let k = logits.last_dim();
    Ok(SegLogits {
        rows: grid.rows,
        cols: grid.cols,
        data: logits.reshape(&[grid.rows, grid.cols, k])?,
    })
}

pub fn predict_class(head: &ParamStore, pooled: &Tensor) -> Result<Tensor> {
    check_width(head, "cls_head.fc1.weight", pooled.last_dim())?;
    let mut g = Graph::new();
    let p = head.bind(&mut g, false);
    let x = g.constant(pooled.clone());
    let out = class_forward(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}

/// Task loss for one sample: smooth L1 on boxes, cross-entropy on patch labels
/// or image classes.
pub fn head_loss(
    g: &mut Graph,
    head: &Bound,
    task: HeadTask,
    grid: GridVar,
    label: &HeadLabel,
) -> Result<Var> {
    match (task, label) {
        (HeadTask::BBox, HeadLabel::BBox(b)) => {
            let (pooled, _) = attention_pool(g, head, grid.var)?;
            let pred = bbox_forward(g, head, pooled)?;
            let gold = g.constant(b.to_tensor());
            g.smooth_l1(pred, gold)
        }
        (HeadTask::Segmentation { .. }, HeadLabel::Patches(labels)) => {
            if labels.len() != grid.rows * grid.cols {
                return Err(Error::Geometry(format!(
                    "{} patch labels for a {}x{} grid",
                    labels.len(),
                    grid.rows,
                    grid.cols
                )));
            }
            let logits = seg_forward(g, head, grid)?;
            g.cross_entropy(logits, labels)
        }
        (HeadTask::Classification { .. }, HeadLabel::Class(c)) => {
            let (pooled, _) = attention_pool(g, head, grid.var)?;
            let logits = class_forward(g, head, pooled)?;
            g.cross_entropy(logits, &[*c])
        }
        (task, label) => Err(Error::Usage(format!(
            "label {label:?} does not fit task {task:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
    pub hidden: usize,
    /// Update encoder weights together with the head.
    pub train_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            hidden: 64,
            train_encoder: true,
        }
    }
}

pub struct FinetuneOutcome {
    pub encoder: ParamStore,
    pub head: ParamStore,
    pub trace: Vec<LossRecord>,
}

/// Trains `head` (and the encoder when configured) on `data` for a fixed
/// number of steps.
pub fn finetune_head(
    backbone: &dyn Encoder,
    mut encoder: ParamStore,
    mut head: ParamStore,
    task: HeadTask,
    data: &[HeadSample],
    config: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<FinetuneOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyInput(format!("{} training data", task.name())));
    }
    let schedule = LrSchedule {
        base_lr: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps: config.steps,
        kind: ScheduleKind::Cosine,
    };
    let mut enc_opt = AdamW::new(config.weight_decay);
    let mut head_opt = AdamW::new(config.weight_decay);
    let mut trace = Vec::with_capacity(config.steps);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for step in 0..config.steps {
        if queue.is_empty() {
            queue = epoch_batches(data.len(), config.batch_size, rng);
            queue.reverse();
        }
        let batch = queue.pop().expect("refilled above");
        let mut g = Graph::new();
        let eb = encoder.bind(&mut g, config.train_encoder);
        let hb = head.bind(&mut g, true);
        let mut total: Option<Var> = None;
        for &i in &batch {
            let grid = backbone.forward(&mut g, &eb, &data[i].image)?;
            let l = head_loss(&mut g, &hb, task, grid, &data[i].label)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: format!("finetune-{}", task.name()),
                step,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        let lr = schedule.at(step);
        head_opt.step(&mut head, &hb.collect_grads(&g, &grads), lr)?;
        if config.train_encoder {
            enc_opt.step(&mut encoder, &eb.collect_grads(&g, &grads), lr)?;
        }
        trace.push(LossRecord {
            step,
            loss: value,
            lr,
        });
    }
    Ok(FinetuneOutcome {
        encoder,
        head,
        trace,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub mean_iou: f64,
    pub center_accuracy: f64,
    /// Image accuracy (classification) or patch accuracy (segmentation).
    pub accuracy: f64,
}

impl Evaluation {
    pub fn records(&self, task: HeadTask, step: usize) -> Vec<MetricRecord> {
        let name = task.name().to_string();
        let pairs: &[(&str, f64)] = match task {
            HeadTask::BBox => &[
                ("mean_iou", self.mean_iou),
                ("center_accuracy", self.center_accuracy),
            ],
            _ => &[("accuracy", self.accuracy)],
        };
        pairs
            .iter()
            .map(|&(metric, value)| MetricRecord {
                task: name.clone(),
                step,
                metric: metric.into(),
                value,
            })
            .collect()
    }
}

/// Held-out metrics for a trained encoder and head.
pub fn evaluate(
    backbone: &dyn Encoder,
    encoder: &ParamStore,
    head: &ParamStore,
    task: HeadTask,
    data: &[HeadSample],
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation data".into()));
    }
    let mut iou_sum = 0.0;
    let mut hits = 0usize;
    let mut correct = 0usize;
    let mut counted = 0usize;
    for sample in data {
        let mut g = Graph::new();
        let eb = encoder.bind(&mut g, false);
        let grid = backbone.forward(&mut g, &eb, &sample.image)?.to_grid(&g);
        match (task, &sample.label) {
            (HeadTask::BBox, HeadLabel::BBox(gold)) => {
                let (pooled, _) = pool_tokens(head, &grid)?;
                let m = box_metrics(&predict_bbox(head, &pooled)?, gold);
                iou_sum += m.iou;
                hits += m.center_hit as usize;
                counted += 1;
            }
            (HeadTask::Segmentation { .. }, HeadLabel::Patches(labels)) => {
                let pred = predict_segmentation(head, &grid)?.argmax();
                correct += pred.iter().zip(labels).filter(|(a, b)| a == b).count();
                counted += labels.len();
            }
            (HeadTask::Classification { .. }, HeadLabel::Class(c)) => {
                let (pooled, _) = pool_tokens(head, &grid)?;
                correct += (argmax(predict_class(head, &pooled)?.data()) == *c) as usize;
                counted += 1;
            }
            (task, label) => {
                return Err(Error::Usage(format!(
                    "label {label:?} does not fit task {task:?}"
                )))
            }
        }
    }
    let n = counted.max(1) as f64;
    Ok(Evaluation {
        mean_iou: iou_sum / n,
        center_accuracy: hits as f64 / n,
        accuracy: correct as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f32, y0: f32, x1: f32, y1: f32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx(0.2, 0.2, 0.6, 0.7);
        let m = box_metrics(&a, &a);
        assert_eq!(m.iou, 1.0);
        assert!(m.center_hit);
        let m = box_metrics(&bx(0.0, 0.0, 0.1, 0.1), &bx(0.5, 0.5, 0.9, 0.9));
        assert_eq!(m.iou, 0.0);
        assert!(!m.center_hit);
        // (0,0,2,2) vs (1,1,3,3) on a 0..3 canvas
        let s = 1.0 / 3.0;
        let v = iou(&bx(0.0, 0.0, 2.0 * s, 2.0 * s), &bx(s, s, 1.0, 1.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn center_hit_is_boundary_inclusive_and_directional() {
        let pred = bx(0.0, 0.0, 0.5, 0.5);
        let gold = bx(0.0, 0.0, 1.0, 1.0);
        assert!(box_metrics(&pred, &gold).center_hit);
        assert!(box_metrics(&gold, &bx(0.6, 0.6, 1.0, 1.0)).center_hit);
        assert!(!box_metrics(&bx(0.6, 0.6, 1.0, 1.0), &pred).center_hit);
    }

    #[test]
    fn zero_area_union_is_zero_iou() {
        let p = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn bbox_rejects_bad_coordinates() {
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
    }

    #[test]
    fn zero_head_predicts_center_box() {
        let mut head = init_head(HeadTask::BBox, 8, 4, &mut Rng::new(0)).unwrap();
        for name in ["bbox_head.fc2.weight", "bbox_head.fc2.bias"] {
            let shape = head.get(name).unwrap().shape().to_vec();
            head.insert(name, Tensor::zeros(&shape)).unwrap();
        }
        let b = predict_bbox(&head, &Tensor::full(&[1, 8], 0.3)).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn single_token_pool_has_unit_weight() {
        let head = init_head(HeadTask::BBox, 8, 4, &mut Rng::new(0)).unwrap();
        let grid = TokenGrid::new(1, 1, Tensor::full(&[1, 8], 0.7)).unwrap();
        let (_, w) = pool_tokens(&head, &grid).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn hand_set_pool_scores() {
        // key = identity, query chosen so scores are (0, ln 3) after 1/sqrt(d) scaling
        let d = 2;
        let mut head = ParamStore::new();
        let q = 3f32.ln() * (d as f32).sqrt();
        head.insert("pool.query", Tensor::new(vec![1, 2], vec![0.0, q]).unwrap())
            .unwrap();
        head.insert("pool.key.weight", Tensor::eye(2)).unwrap();
        head.insert("pool.key.bias", Tensor::zeros(&[2])).unwrap();
        head.insert("pool.value.weight", Tensor::eye(2)).unwrap();
        head.insert("pool.value.bias", Tensor::zeros(&[2])).unwrap();
        let tokens = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let (_, w) = pool_tokens(&head, &TokenGrid::new(1, 2, tokens).unwrap()).unwrap();
        assert!(
            (w[0] - 0.25).abs() < 1e-6 && (w[1] - 0.75).abs() < 1e-6,
            "{w:?}"
        );
    }

    #[test]
    fn segmentation_shape_and_label_range() {
        let head = init_head(
            HeadTask::Segmentation { classes: 2 },
            8,
            4,
            &mut Rng::new(0),
        )
        .unwrap();
        let grid = TokenGrid::new(2, 3, Tensor::full(&[6, 8], 0.1)).unwrap();
        let logits = predict_segmentation(&head, &grid).unwrap();
        assert_eq!(logits.data.shape(), &[2, 3, 3]);

        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let x = g.constant(grid.data.clone());
        let gv = GridVar {
            rows: 2,
            cols: 3,
            var: x,
        };
        let err = head_loss(
            &mut g,
            &hb,
            HeadTask::Segmentation { classes: 2 },
            gv,
            &HeadLabel::Patches(vec![0, 1, 2, 3, 0, 0]),
        );
        assert!(matches!(
            err,
            Err(Error::ClassRange {
                index: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn class_argmax_shift_invariant() {
        let head = init_head(
            HeadTask::Classification { classes: 4 },
            8,
            4,
            &mut Rng::new(5),
        )
        .unwrap();
        let mut shifted = head.clone();
        let b = shifted.get("cls_head.fc2.bias").unwrap().map(|v| v + 3.5);
        shifted.insert("cls_head.fc2.bias", b).unwrap();
        let pooled =
            Tensor::new(vec![1, 8], (0..8).map(|i| i as f32 * 0.1 - 0.3).collect()).unwrap();
        let a = predict_class(&head, &pooled).unwrap();
        let s = predict_class(&shifted, &pooled).unwrap();
        assert_eq!(argmax(a.data()), argmax(s.data()));
    }

    #[test]
    fn symmetric_class_weights_give_equal_logits() {
        let mut head = init_head(
            HeadTask::Classification { classes: 2 },
            2,
            2,
            &mut Rng::new(5),
        )
        .unwrap();
        head.insert("cls_head.fc1.weight", Tensor::eye(2)).unwrap();
        head.insert(
            "cls_head.fc2.weight",
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let logits =
            predict_class(&head, &Tensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap()).unwrap();
        assert_eq!(logits.data()[0], logits.data()[1]);
    }

    #[test]
    fn uniform_segmentation_logits_give_ln3() {
        let mut head = init_head(
            HeadTask::Segmentation { classes: 2 },
            4,
            4,
            &mut Rng::new(0),
        )
        .unwrap();
        head.insert("seg_head.fc2.weight", Tensor::zeros(&[4, 3]))
            .unwrap();
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[4, 4], 0.2));
        let gv = GridVar {
            rows: 2,
            cols: 2,
            var: x,
        };
        let l = head_loss(
            &mut g,
            &hb,
            HeadTask::Segmentation { classes: 2 },
            gv,
            &HeadLabel::Patches(vec![0, 1, 2, 2]),
        )
        .unwrap();
        assert!((g.value(l).item() - 3f32.ln()).abs() < 1e-6);
    }
}
