//! Masked-autoencoder pretraining: random patch masking, an asymmetric
//! encoder/decoder, and two reconstruction objectives (per-patch normalized
//! targets and raw pixels).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    AdamW, Bound, Graph, LrSchedule, ParamStore, Rng, ScheduleKind, Tensor, Var,
};
use crate::trace::LossRecord;
use crate::transformer::{self, init_block, init_linear, init_norm, init_normal};
use crate::vit::{self, patchify, ViTConfig};

/// Stabilizer inside the per-patch normalization.
pub const NORM_PIX_EPS: f64 = 1e-6;

/// Prefix of every reconstruction-decoder parameter in an MAE store.
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set.
    pub fn from_masked(n_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n_patches];
        for &i in masked {
            if i >= n_patches || std::mem::replace(&mut is_masked[i], true) {
                return Err(Error::DegenerateMask(format!(
                    "invalid or repeated masked index {i}"
                )));
            }
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) =
            (0..n_patches).partition(|&i| is_masked[i]);
        if masked.is_empty() || visible.is_empty() {
            return Err(Error::DegenerateMask(format!(
                "{} of {n_patches} patches masked",
                masked.len()
            )));
        }
        Ok(Self {
            n_patches,
            masked,
            visible,
        })
    }

    pub fn ratio(&self) -> f32 {
        self.masked.len() as f32 / self.n_patches as f32
    }

    /// Position of each original patch in `visible ++ masked`.
    fn restore_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.n_patches];
        for (k, &i) in self.visible.iter().chain(&self.masked).enumerate() {
            order[i] = k;
        }
        order
    }
}

/// Uniformly random mask with `round(ratio · n)` masked patches.
pub fn sample_mask(n_patches: usize, ratio: f32, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) || n_patches < 2 {
        return Err(Error::DegenerateMask(format!(
            "ratio {ratio} over {n_patches} patches"
        )));
    }
    let k = (ratio as f64 * n_patches as f64).round() as usize;
    if k == 0 || k == n_patches {
        return Err(Error::DegenerateMask(format!(
            "ratio {ratio} masks {k} of {n_patches} patches"
        )));
    }
    MaskPlan::from_masked(n_patches, &rng.choose_indices(n_patches, k))
}

/// Per patch row: `(x − mean) / sqrt(var + 1e-6)`, population variance.
pub fn normalized_target(patches: &Tensor) -> Tensor {
    let d = patches.last_dim();
    let mut out = Vec::with_capacity(patches.len());
    for row in patches.data().chunks(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_PIX_EPS).sqrt();
        out.extend(row.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    Tensor::new(patches.shape().to_vec(), out).expect("same shape as input")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionTarget {
    /// Per-patch normalized pixels.
    Normalized,
    /// Raw pixels.
    #[default]
    Pixel,
}

/// Mean squared error over the masked rows of `pred` against `target`.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Tensor, plan: &MaskPlan) -> Result<Var> {
    if plan.masked.is_empty() {
        return Err(Error::DegenerateMask("no masked patches".into()));
    }
    if g.shape(pred) != target.shape() || target.rows() != plan.n_patches {
        return Err(Error::Geometry(format!(
            "prediction {:?} / target {:?} / plan over {} patches",
            g.shape(pred),
            target.shape(),
            plan.n_patches
        )));
    }
    let picked = g.gather_rows(pred, &plan.masked)?;
    let goal = g.constant(target.select_rows(&plan.masked)?);
    g.mse(picked, goal)
}

/// Reconstruction loss on the graph for either target kind.
pub fn mae_loss(
    g: &mut Graph,
    pred: Var,
    patches: &Tensor,
    plan: &MaskPlan,
    kind: ReconstructionTarget,
) -> Result<Var> {
    match kind {
        ReconstructionTarget::Pixel => masked_mse(g, pred, patches, plan),
        ReconstructionTarget::Normalized => masked_mse(g, pred, &normalized_target(patches), plan),
    }
}

fn eval_loss(
    pred: &Tensor,
    patches: &Tensor,
    plan: &MaskPlan,
    kind: ReconstructionTarget,
) -> Result<f32> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = mae_loss(&mut g, p, patches, plan, kind)?;
    Ok(g.value(l).item())
}

/// Loss against per-patch normalized targets, averaged per element then over
/// masked patches.
pub fn mae_loss_normalized(pred: &Tensor, patches: &Tensor, plan: &MaskPlan) -> Result<f32> {
    eval_loss(pred, patches, plan, ReconstructionTarget::Normalized)
}

/// Loss against raw pixel targets.
pub fn mae_loss_pixel(pred: &Tensor, patches: &Tensor, plan: &MaskPlan) -> Result<f32> {
    eval_loss(pred, patches, plan, ReconstructionTarget::Pixel)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MAEDecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MAEDecoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl MAEDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.dim == 0
            || self.heads == 0
            || self.mlp_ratio == 0
            || !self.dim.is_multiple_of(self.heads)
        {
            return Err(Error::Geometry(format!("invalid decoder config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MAETrainConfig {
    pub mask_ratio: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub target: ReconstructionTarget,
}

impl Default for MAETrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 16,
            schedule: ScheduleKind::Cosine,
            target: ReconstructionTarget::Pixel,
        }
    }
}

/// Large-scale reference hyperparameters, echoed into checkpoint metadata.
pub const REFERENCE_HPARAMS: &[(&str, &str)] = &[
    ("batch_size", "4096"),
    ("lr", "1e-5"),
    ("epochs", "25"),
    ("warmup_epochs", "5"),
    ("weight_decay", "0.05"),
    ("mask_ratio", "0.75"),
    ("schedule", "cosine"),
    ("decoder_depth", "4"),
    ("decoder_heads", "16"),
];

impl MAETrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Usage(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if self.warmup_epochs > self.epochs || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Usage(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// Fresh encoder plus `decoder.`-prefixed reconstruction decoder.
pub fn init_mae(
    encoder: &ViTConfig,
    decoder: &MAEDecoderConfig,
    rng: &mut Rng,
) -> Result<ParamStore> {
    decoder.validate()?;
    let mut store = vit::init_params(encoder, rng)?;
    let d = decoder.dim;
    init_linear(&mut store, "decoder.embed", encoder.dim, d, rng)?;
    init_normal(&mut store, "decoder.mask_token", &[1, d], 0.02, rng)?;
    init_normal(
        &mut store,
        "decoder.pos_embed",
        &[encoder.n_patches(), d],
        0.02,
        rng,
    )?;
    for i in 0..decoder.depth {
        init_block(
            &mut store,
            &format!("decoder.blocks.{i}"),
            d,
            d * decoder.mlp_ratio,
            rng,
        )?;
    }
    init_norm(&mut store, "decoder.norm", d)?;
    init_linear(&mut store, "decoder.pred", d, encoder.patch_dim(), rng)?;
    store.set_meta("role", "mae");
    store.set_meta("mae_decoder_config", serde_json::to_string(decoder)?);
    Ok(store)
}

/// Per-patch pixel predictions `[N, P]` for all patches. The encoder sees only
/// the visible patches; the decoder gets encoded tokens back in original order
/// with the mask token at masked slots, plus its own positional embeddings.
pub fn mae_forward(
    g: &mut Graph,
    p: &Bound,
    encoder: &ViTConfig,
    decoder: &MAEDecoderConfig,
    patches: &Tensor,
    plan: &MaskPlan,
) -> Result<Var> {
    let n = encoder.n_patches();
    if plan.n_patches != n || patches.shape() != [n, encoder.patch_dim()] {
        return Err(Error::Geometry(format!(
            "plan over {} patches, patches {:?}, encoder expects [{n}, {}]",
            plan.n_patches,
            patches.shape(),
            encoder.patch_dim()
        )));
    }
    let visible = g.constant(patches.select_rows(&plan.visible)?);
    let latent = vit::encode_tokens(g, p, encoder, visible, &plan.visible)?;

    let dp = p.scoped(DECODER_PREFIX);
    let x = transformer::linear(g, &dp, "embed", latent)?;
    let mask_token = dp.get("mask_token")?;
    let fill = g.gather_rows(mask_token, &vec![0; plan.masked.len()])?;
    let x = g.concat_rows(x, fill)?;
    let x = g.gather_rows(x, &plan.restore_order())?;
    let pos = dp.get("pos_embed")?;
    let mut x = g.add(x, pos)?;
    for i in 0..decoder.depth {
        x = transformer::block(g, &dp, &format!("blocks.{i}"), x, decoder.heads, false)?;
    }
    let x = transformer::norm(g, &dp, "norm", x)?;
    transformer::linear(g, &dp, "pred", x)
}

/// Inference wrapper around [`mae_forward`].
pub fn mae_predict(
    store: &ParamStore,
    encoder: &ViTConfig,
    decoder: &MAEDecoderConfig,
    image: &Tensor,
    plan: &MaskPlan,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let patches = patchify(image, encoder.patch_size)?;
    let out = mae_forward(&mut g, &p, encoder, decoder, &patches, plan)?;
    Ok(g.value(out).clone())
}

pub struct MaeOutcome {
    /// Encoder weights only; decoder entries are dropped.
    pub encoder: ParamStore,
    pub trace: Vec<LossRecord>,
}

/// Shuffled index batches for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs MAE pretraining from `params` (as built by [`init_mae`]) and returns
/// the encoder. Every step's mean batch loss and learning rate is recorded; a
/// non-finite loss stops training with [`Error::Divergence`].
pub fn train_mae(
    mut params: ParamStore,
    dataset: &[Tensor],
    encoder: &ViTConfig,
    decoder: &MAEDecoderConfig,
    config: &MAETrainConfig,
    rng: &mut Rng,
) -> Result<MaeOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("MAE dataset".into()));
    }
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let schedule = LrSchedule {
        base_lr: config.lr,
        warmup_steps: config.warmup_epochs * steps_per_epoch,
        total_steps: config.epochs * steps_per_epoch,
        kind: config.schedule,
    };
    let patches: Vec<Tensor> = dataset
        .iter()
        .map(|img| patchify(img, encoder.patch_size))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(config.weight_decay);
    let mut trace = Vec::with_capacity(schedule.total_steps);
    let mut step = 0;
    for _ in 0..config.epochs {
        for batch in epoch_batches(dataset.len(), config.batch_size, rng) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let mut total: Option<Var> = None;
            for &i in &batch {
                let plan = sample_mask(encoder.n_patches(), config.mask_ratio, rng)?;
                let pred = mae_forward(&mut g, &bound, encoder, decoder, &patches[i], &plan)?;
                let l = mae_loss(&mut g, pred, &patches[i], &plan, config.target)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = g.scale(
                total.expect("batches are non-empty"),
                1.0 / batch.len() as f32,
            );
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "mae".into(),
                    step,
                    loss: value,
                });
            }
            let grads = g.backward(loss)?;
            let grads = bound.collect_grads(&g, &grads);
            let lr = schedule.at(step);
            opt.step(&mut params, &grads, lr)?;
            trace.push(LossRecord {
                step,
                loss: value,
                lr,
            });
            step += 1;
        }
    }
    let mut encoder_store = params.without_prefix(DECODER_PREFIX);
    encoder_store.set_meta("role", "encoder");
    encoder_store.set_meta("stage", "mae");
    encoder_store.set_meta("mae_target", format!("{:?}", config.target).to_lowercase());
    encoder_store.set_meta("mae_train_config", serde_json::to_string(config)?);
    let reference: BTreeMap<&str, &str> = REFERENCE_HPARAMS.iter().copied().collect();
    encoder_store.set_meta("mae_reference_hparams", serde_json::to_string(&reference)?);
    Ok(MaeOutcome {
        encoder: encoder_store,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mask_counts() {
        let mut rng = Rng::new(0);
        let plan = sample_mask(100, 0.75, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 75);
        assert_eq!(plan.visible.len(), 25);
        let plan = sample_mask(2, 0.5, &mut rng).unwrap();
        assert_eq!((plan.masked.len(), plan.visible.len()), (1, 1));
    }

    #[test]
    fn degenerate_masks_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            sample_mask(4, 0.1, &mut rng),
            Err(Error::DegenerateMask(_))
        ));
        assert!(matches!(
            sample_mask(4, 0.9, &mut rng),
            Err(Error::DegenerateMask(_))
        ));
        assert!(sample_mask(1, 0.5, &mut rng).is_err());
        assert!(sample_mask(10, 1.0, &mut rng).is_err());
    }

    #[test]
    fn normalized_target_cases() {
        let c = normalized_target(&t(&[1, 3], &[0.7, 0.7, 0.7]));
        assert!(c.data().iter().all(|&v| v == 0.0));
        let y = normalized_target(&t(&[1, 2], &[1.0, 3.0]));
        let expect = (1.0 / (1.0f64 + 1e-6).sqrt()) as f32;
        assert_eq!(y.data(), &[-expect, expect]);
        assert!((expect - 0.9999995).abs() < 1e-7);
        assert_eq!(NORM_PIX_EPS, 1e-6);
    }

    #[test]
    fn hand_loss_values() {
        // one masked patch (index 0), pre-normalized target [-1, 1]
        let plan = MaskPlan::from_masked(2, &[0]).unwrap();
        let pred = Tensor::zeros(&[2, 2]);
        let x = t(&[2, 2], &[-1.0, 1.0, 9.0, 9.0]);
        assert_eq!(mae_loss_pixel(&pred, &x, &plan).unwrap(), 1.0);
        let x = t(&[2, 2], &[1.0, 1.0, 5.0, -5.0]);
        assert_eq!(mae_loss_pixel(&pred, &x, &plan).unwrap(), 1.0);
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let plan = MaskPlan::from_masked(3, &[0, 2]).unwrap();
        let x = t(&[3, 2], &[0.1, 0.5, 0.3, 0.3, 0.9, 0.2]);
        assert_eq!(mae_loss_pixel(&x, &x, &plan).unwrap(), 0.0);
        assert_eq!(
            mae_loss_normalized(&normalized_target(&x), &x, &plan).unwrap(),
            0.0
        );
    }

    #[test]
    fn visible_rows_do_not_matter() {
        let plan = MaskPlan::from_masked(3, &[1]).unwrap();
        let x = t(&[3, 2], &[0.1, 0.5, 0.3, 0.3, 0.9, 0.2]);
        let mut pred = Tensor::zeros(&[3, 2]);
        let a = mae_loss_pixel(&pred, &x, &plan).unwrap();
        pred.data_mut()[0] = 100.0;
        pred.data_mut()[5] = -3.0;
        assert_eq!(a, mae_loss_pixel(&pred, &x, &plan).unwrap());
    }

    #[test]
    fn plan_geometry_mismatch() {
        let enc = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let dec = MAEDecoderConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let store = init_mae(&enc, &dec, &mut Rng::new(1)).unwrap();
        let plan = MaskPlan::from_masked(5, &[0]).unwrap();
        let err = mae_predict(&store, &enc, &dec, &Tensor::zeros(&[8, 8, 1]), &plan).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }
}
