//! Weight-space merging of same-architecture encoders: learned per-tensor
//! coefficients trained by feature distillation, plus plain averaging and
//! diagonal-Fisher weighting.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::epoch_batches;
use crate::numkernel::{
    sigmoid, AdamW, Bound, Graph, LrSchedule, ParamStore, Rng, ScheduleKind, Tensor, Var,
};
use crate::trace::LossRecord;
use crate::vit::{Encoder, GridVar, TokenGrid};

/// Guards the Fisher-weighted mean against an all-zero denominator.
pub const FISHER_EPS: f64 = 1e-12;

/// `n ≥ 1` stores with identical names and shapes.
#[derive(Clone, Debug)]
pub struct TeacherSet {
    teachers: Vec<ParamStore>,
}

impl TeacherSet {
    pub fn new(teachers: Vec<ParamStore>) -> Result<Self> {
        let Some(first) = teachers.first() else {
            return Err(Error::EmptyInput("teacher set".into()));
        };
        for (i, t) in teachers.iter().enumerate().skip(1) {
            check_signature(first, t, i)?;
        }
        Ok(Self { teachers })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn stores(&self) -> &[ParamStore] {
        &self.teachers
    }

    pub fn first(&self) -> &ParamStore {
        &self.teachers[0]
    }

    pub fn hashes(&self) -> Vec<String> {
        self.teachers.iter().map(ParamStore::sha256).collect()
    }

    fn verify_unchanged(&self, before: &[String]) -> Result<()> {
        if self.hashes() != before {
            return Err(Error::Evaluation(
                "a teacher store changed during merging".into(),
            ));
        }
        Ok(())
    }
}

fn check_signature(a: &ParamStore, b: &ParamStore, index: usize) -> Result<()> {
    let (sa, sb) = (a.signature(), b.signature());
    for (x, y) in sa.iter().zip(&sb) {
        if x != y {
            return Err(Error::Incompatible(format!(
                "teacher {index}: parameter `{}` {:?} does not match `{}` {:?}",
                y.0, y.1, x.0, x.1
            )));
        }
    }
    if sa.len() != sb.len() {
        let longer = if sa.len() > sb.len() { &sa } else { &sb };
        let name = longer[sa.len().min(sb.len())].0;
        return Err(Error::Incompatible(format!(
            "teacher {index}: parameter `{name}` is not present in every teacher"
        )));
    }
    Ok(())
}

fn logit(a: f32) -> f32 {
    (a / (1.0 - a)).ln()
}

/// One merge weight per parameter tensor per teacher, in `[0, 1]`. Training
/// moves the unconstrained `raw` values with `α = sigmoid(raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeCoefficients {
    n: usize,
    alpha: BTreeMap<String, Vec<f32>>,
}

impl MergeCoefficients {
    /// Every weight set to `alpha`.
    pub fn uniform(teachers: &TeacherSet, alpha: f32) -> Result<Self> {
        let n = teachers.len();
        let map = teachers
            .first()
            .names()
            .map(|k| (k.to_string(), vec![alpha; n]))
            .collect();
        Self::from_alpha_map(map)
    }

    pub fn teachers(&self) -> usize {
        self.n
    }

    pub fn alphas(&self, name: &str) -> Option<&[f32]> {
        self.alpha.get(name).map(Vec::as_slice)
    }

    pub fn alpha_map(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.alpha
    }

    pub fn from_alpha_map(map: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let n = map.values().next().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::EmptyInput("merge coefficients".into()));
        }
        for (k, alphas) in &map {
            if alphas.len() != n || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Range(format!(
                    "coefficients for `{k}` must be {n} values in [0, 1]"
                )));
            }
        }
        Ok(Self { n, alpha: map })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.alpha)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_alpha_map(serde_json::from_str(text)?)
    }

    fn check_covers(&self, teachers: &TeacherSet) -> Result<()> {
        if self.n != teachers.len() {
            return Err(Error::Incompatible(format!(
                "coefficients for {} teachers, got {}",
                self.n,
                teachers.len()
            )));
        }
        for name in teachers.first().names() {
            if !self.alpha.contains_key(name) {
                return Err(Error::Incompatible(format!(
                    "no merge coefficients for `{name}`"
                )));
            }
        }
        if let Some(extra) = self.alpha.keys().find(|k| !teachers.first().contains(k)) {
            return Err(Error::Incompatible(format!(
                "coefficients name unknown parameter `{extra}`"
            )));
        }
        Ok(())
    }

    /// Unconstrained values as `[n]` tensors; 0 and 1 map to infinities.
    fn raw_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (k, a) in &self.alpha {
            s.insert(
                k.clone(),
                Tensor::new(vec![self.n], a.iter().map(|&x| logit(x)).collect())?,
            )?;
        }
        Ok(s)
    }

    fn from_raw_store(store: &ParamStore, n: usize) -> Self {
        let alpha = store
            .iter()
            .map(|(k, t)| {
                (
                    k.to_string(),
                    t.data().iter().map(|&x| sigmoid(x)).collect(),
                )
            })
            .collect();
        Self { n, alpha }
    }
}

/// `Σ_i α_i θ_i` per parameter name. Metadata is taken from the first teacher.
pub fn materialize(coeffs: &MergeCoefficients, teachers: &TeacherSet) -> Result<ParamStore> {
    coeffs.check_covers(teachers)?;
    let mut out = ParamStore::new();
    for (name, first) in teachers.first().iter() {
        let alphas = coeffs.alphas(name).expect("coverage checked");
        // same operation order as the graph path: α_0θ_0, then add α_iθ_i
        let mut acc: Vec<f32> = first.data().iter().map(|&v| v * alphas[0]).collect();
        for (t, &a) in teachers.stores().iter().zip(alphas).skip(1) {
            for (x, &v) in acc.iter_mut().zip(t.get(name)?.data()) {
                *x += v * a;
            }
        }
        out.insert(name, Tensor::new(first.shape().to_vec(), acc)?)?;
    }
    for (k, v) in teachers.first().metadata() {
        out.set_meta(k.clone(), v.clone());
    }
    Ok(out)
}

/// Plain mean of the teachers.
pub fn average_merge(teachers: &TeacherSet) -> Result<ParamStore> {
    let coeffs = MergeCoefficients::uniform(teachers, 1.0 / teachers.len() as f32)?;
    let mut out = materialize(&coeffs, teachers)?;
    out.set_meta("merge_method", "average");
    Ok(out)
}

/// Differentiable merged parameters bound on `g`; coefficients are tracked.
fn bind_merged(g: &mut Graph, teachers: &TeacherSet, raw: &Bound) -> Result<Bound> {
    let n = teachers.len();
    let mut out = Bound::new();
    for (name, first) in teachers.first().iter() {
        let r = raw.get(name)?;
        let a = g.sigmoid(r);
        let a = g.reshape(a, &[n, 1])?;
        let mut acc: Option<Var> = None;
        for (i, t) in teachers.stores().iter().enumerate() {
            let theta = g.constant(if i == 0 {
                first.clone()
            } else {
                t.get(name)?.clone()
            });
            let ai = g.gather_rows(a, &[i])?;
            let term = g.scale_by(theta, ai)?;
            acc = Some(match acc {
                Some(s) => g.add(s, term)?,
                None => term,
            });
        }
        out.insert(name, acc.expect("at least one teacher"));
    }
    Ok(out)
}

/// `(1/n) Σ_i mse(z, z_i)`.
pub fn distill_loss(g: &mut Graph, merged: Var, teachers: &[Var]) -> Result<Var> {
    if teachers.is_empty() {
        return Err(Error::EmptyInput("teacher features".into()));
    }
    let mut total: Option<Var> = None;
    for &t in teachers {
        if g.shape(t) != g.shape(merged) {
            return Err(Error::Geometry(format!(
                "merged features {:?} vs teacher features {:?}",
                g.shape(merged),
                g.shape(t)
            )));
        }
        let l = g.mse(merged, t)?;
        total = Some(match total {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / teachers.len() as f32))
}

/// [`distill_loss`] on token grids; grids must share rows, cols and width.
pub fn distill_loss_grids(merged: &TokenGrid, teachers: &[TokenGrid]) -> Result<f32> {
    for t in teachers {
        if (t.rows, t.cols) != (merged.rows, merged.cols) {
            return Err(Error::Geometry(format!(
                "merged grid {}x{} vs teacher grid {}x{}",
                merged.rows, merged.cols, t.rows, t.cols
            )));
        }
    }
    let mut g = Graph::new();
    let z = g.constant(merged.data.clone());
    let zs: Vec<Var> = teachers
        .iter()
        .map(|t| g.constant(t.data.clone()))
        .collect();
    let l = distill_loss(&mut g, z, &zs)?;
    Ok(g.value(l).item())
}

fn features(backbone: &dyn Encoder, store: &ParamStore, image: &Tensor) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    Ok(backbone.forward(&mut g, &p, image)?.to_grid(&g))
}

/// Mean distillation loss of `merged` against every teacher over `images`.
pub fn probe_distill_loss(
    backbone: &dyn Encoder,
    merged: &ParamStore,
    teachers: &TeacherSet,
    images: &[Tensor],
) -> Result<f32> {
    let targets = teacher_features(backbone, teachers, images)?;
    probe_loss_with(backbone, merged, &targets, images)
}

fn teacher_features(
    backbone: &dyn Encoder,
    teachers: &TeacherSet,
    images: &[Tensor],
) -> Result<Vec<Vec<TokenGrid>>> {
    images
        .iter()
        .map(|im| {
            teachers
                .stores()
                .iter()
                .map(|t| features(backbone, t, im))
                .collect()
        })
        .collect()
}

fn probe_loss_with(
    backbone: &dyn Encoder,
    merged: &ParamStore,
    targets: &[Vec<TokenGrid>],
    images: &[Tensor],
) -> Result<f32> {
    if images.is_empty() {
        return Err(Error::EmptyInput("probe images".into()));
    }
    let mut sum = 0.0f64;
    for (im, zs) in images.iter().zip(targets) {
        sum += distill_loss_grids(&features(backbone, merged, im)?, zs)? as f64;
    }
    Ok((sum / images.len() as f64) as f32)
}

/// Per-element mean squared gradient of `loss` over `probe`.
pub fn diagonal_fisher<L>(
    store: &ParamStore,
    probe: &[Tensor],
    loss: &L,
) -> Result<BTreeMap<String, Tensor>>
where
    L: Fn(&mut Graph, &Bound, &Tensor) -> Result<Var>,
{
    if probe.is_empty() {
        return Err(Error::EmptyInput("Fisher probe batch".into()));
    }
    let mut acc: BTreeMap<String, Vec<f64>> = store
        .iter()
        .map(|(k, t)| (k.to_string(), vec![0.0; t.len()]))
        .collect();
    for x in probe {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let l = loss(&mut g, &p, x)?;
        let grads = p.collect_grads(&g, &g.backward(l)?);
        for (k, gt) in grads {
            if !gt.is_finite() {
                return Err(Error::Evaluation(format!("non-finite gradient for `{k}`")));
            }
            for (a, &v) in acc
                .get_mut(&k)
                .expect("same names")
                .iter_mut()
                .zip(gt.data())
            {
                *a += v as f64 * v as f64;
            }
        }
    }
    let n = probe.len() as f64;
    acc.into_iter()
        .map(|(k, v)| {
            let shape = store.get(&k)?.shape().to_vec();
            Ok((
                k,
                Tensor::new(shape, v.into_iter().map(|x| (x / n) as f32).collect())?,
            ))
        })
        .collect()
}

/// Fisher-weighted mean `Σ F_i θ_i / (Σ F_i + ε)`, falling back to the plain
/// mean where every `F_i` is zero.
pub fn fisher_merge_from_fishers(
    teachers: &TeacherSet,
    fishers: &[BTreeMap<String, Tensor>],
) -> Result<ParamStore> {
    if fishers.len() != teachers.len() {
        return Err(Error::Incompatible(format!(
            "{} Fisher estimates for {} teachers",
            fishers.len(),
            teachers.len()
        )));
    }
    let n = teachers.len() as f64;
    let mut out = ParamStore::new();
    for (name, first) in teachers.first().iter() {
        let mut merged = Vec::with_capacity(first.len());
        let fs = fishers
            .iter()
            .map(|f| {
                let t = f
                    .get(name)
                    .ok_or_else(|| Error::MissingParam(name.to_string()))?;
                if t.shape() != first.shape() {
                    return Err(Error::dim("fisher_merge", first.shape(), t.shape()));
                }
                Ok(t.data())
            })
            .collect::<Result<Vec<_>>>()?;
        let thetas = teachers
            .stores()
            .iter()
            .map(|t| Ok(t.get(name)?.data()))
            .collect::<Result<Vec<_>>>()?;
        for e in 0..first.len() {
            let (mut num, mut den, mut mean) = (0.0f64, 0.0f64, 0.0f64);
            for (f, th) in fs.iter().zip(&thetas) {
                num += f[e] as f64 * th[e] as f64;
                den += f[e] as f64;
                mean += th[e] as f64;
            }
            merged.push(if den == 0.0 {
                mean / n
            } else {
                num / (den + FISHER_EPS)
            } as f32);
        }
        out.insert(name, Tensor::new(first.shape().to_vec(), merged)?)?;
    }
    for (k, v) in teachers.first().metadata() {
        out.set_meta(k.clone(), v.clone());
    }
    out.set_meta("merge_method", "fisher");
    Ok(out)
}

pub fn fisher_merge<L>(teachers: &TeacherSet, probe: &[Tensor], loss: &L) -> Result<ParamStore>
where
    L: Fn(&mut Graph, &Bound, &Tensor) -> Result<Var>,
{
    let before = teachers.hashes();
    let fishers = teachers
        .stores()
        .iter()
        .map(|t| diagonal_fisher(t, probe, loss))
        .collect::<Result<Vec<_>>>()?;
    let out = fisher_merge_from_fishers(teachers, &fishers)?;
    teachers.verify_unchanged(&before)?;
    Ok(out)
}

/// Label-free probe loss for Fisher estimates: half the mean squared feature.
pub fn feature_energy_loss<'a>(
    backbone: &'a dyn Encoder,
) -> impl Fn(&mut Graph, &Bound, &Tensor) -> Result<Var> + 'a {
    move |g, p, x| {
        let z = backbone.forward(g, p, x)?.var;
        let sq = g.mul(z, z)?;
        let m = g.mean(sq);
        Ok(g.scale(m, 0.5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Starting merge weight; `None` means `1/n`.
    pub init_alpha: Option<f32>,
}

impl Default for MergeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            warmup_steps: 0,
            init_alpha: None,
        }
    }
}

pub struct MergeOutcome {
    pub coefficients: MergeCoefficients,
    pub trace: Vec<LossRecord>,
    /// Full probe loss before training and after each epoch.
    pub epoch_losses: Vec<f32>,
    /// Index into `epoch_losses` of the returned coefficients.
    pub best: usize,
}

/// Learns merge coefficients by distilling every teacher's features into the
/// merged encoder over `images`. Teachers stay frozen; only coefficients
/// move. Returns the coefficients with the lowest full probe loss seen,
/// counting the initial state.
pub fn train_merge_coefficients(
    teachers: &TeacherSet,
    backbone: &dyn Encoder,
    images: &[Tensor],
    config: &MergeTrainConfig,
    rng: &mut Rng,
) -> Result<MergeOutcome> {
    if teachers.len() < 2 {
        return Err(Error::Usage(
            "learned merging needs at least two teachers".into(),
        ));
    }
    if images.is_empty() {
        return Err(Error::EmptyInput("distillation images".into()));
    }
    let before = teachers.hashes();
    let targets = teacher_features(backbone, teachers, images)?;
    let init = config.init_alpha.unwrap_or(1.0 / teachers.len() as f32);
    let mut coeffs = MergeCoefficients::uniform(teachers, init)?;
    let mut raw = coeffs.raw_store()?;
    let steps_per_epoch = images.len().div_ceil(config.batch_size.max(1));
    let schedule = LrSchedule {
        base_lr: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps: config.epochs * steps_per_epoch,
        kind: ScheduleKind::Cosine,
    };
    let mut opt = AdamW::new(0.0);
    let mut trace = Vec::new();
    let mut epoch_losses = vec![probe_loss_with(
        backbone,
        &materialize(&coeffs, teachers)?,
        &targets,
        images,
    )?];
    let mut best = (0, coeffs.clone());
    let mut step = 0;
    for _ in 0..config.epochs {
        for batch in epoch_batches(images.len(), config.batch_size, rng) {
            let mut g = Graph::new();
            let rb = raw.bind(&mut g, true);
            let merged = bind_merged(&mut g, teachers, &rb)?;
            let mut total: Option<Var> = None;
            for &i in &batch {
                let z: GridVar = backbone.forward(&mut g, &merged, &images[i])?;
                let zs: Vec<Var> = targets[i]
                    .iter()
                    .map(|t| g.constant(t.data.clone()))
                    .collect();
                let l = distill_loss(&mut g, z.var, &zs)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "merge".into(),
                    step,
                    loss: value,
                });
            }
            let grads = g.backward(loss)?;
            let lr = schedule.at(step);
            opt.step(&mut raw, &rb.collect_grads(&g, &grads), lr)?;
            trace.push(LossRecord {
                step,
                loss: value,
                lr,
            });
            step += 1;
        }
        coeffs = MergeCoefficients::from_raw_store(&raw, teachers.len());
        let l = probe_loss_with(backbone, &materialize(&coeffs, teachers)?, &targets, images)?;
        epoch_losses.push(l);
        if l < epoch_losses[best.0] {
            best = (epoch_losses.len() - 1, coeffs.clone());
        }
    }
    teachers.verify_unchanged(&before)?;
    Ok(MergeOutcome {
        coefficients: best.1,
        trace,
        epoch_losses,
        best: best.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    None,
    Average,
    Fisher,
    Learned,
}

impl MergeMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeMethod::None => "none",
            MergeMethod::Average => "average",
            MergeMethod::Fisher => "fisher",
            MergeMethod::Learned => "learned",
        }
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MergeMethod::None),
            "average" => Ok(MergeMethod::Average),
            "fisher" => Ok(MergeMethod::Fisher),
            "learned" => Ok(MergeMethod::Learned),
            other => Err(Error::Usage(format!(
                "unknown merge method `{other}` (expected none, average, fisher or learned)"
            ))),
        }
    }
}

pub struct MergeResult {
    pub store: ParamStore,
    pub coefficients: Option<MergeCoefficients>,
    pub trace: Vec<LossRecord>,
}

/// Dispatches to the selected merge. `None` returns the first teacher.
pub fn merge_pipeline(
    teachers: &TeacherSet,
    backbone: &dyn Encoder,
    images: &[Tensor],
    method: MergeMethod,
    config: &MergeTrainConfig,
    rng: &mut Rng,
) -> Result<MergeResult> {
    let before = teachers.hashes();
    let (mut store, coefficients, trace) = match method {
        MergeMethod::None => (teachers.first().clone(), None, Vec::new()),
        MergeMethod::Average => (average_merge(teachers)?, None, Vec::new()),
        MergeMethod::Fisher => (
            fisher_merge(teachers, images, &feature_energy_loss(backbone))?,
            None,
            Vec::new(),
        ),
        MergeMethod::Learned => {
            let out = train_merge_coefficients(teachers, backbone, images, config, rng)?;
            (
                materialize(&out.coefficients, teachers)?,
                Some(out.coefficients),
                out.trace,
            )
        }
    };
    teachers.verify_unchanged(&before)?;
    store.set_meta("merge_method", method.as_str());
    store.set_meta("merge_teachers", teachers.len().to_string());
    store.set_meta("stage", "merge");
    Ok(MergeResult {
        store,
        coefficients,
        trace,
    })
}

/// Toy encoder whose only weight is a scalar `gain`; each pixel becomes a
/// one-wide token scaled by it.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScalarGain;

impl ScalarGain {
    pub fn store(gain: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("gain", Tensor::scalar(gain)).expect("fresh store");
        s
    }
}

impl Encoder for ScalarGain {
    fn forward(&self, g: &mut Graph, params: &Bound, image: &Tensor) -> Result<GridVar> {
        let (h, w) = (image.shape()[0], image.len() / image.shape()[0]);
        let x = g.constant(image.clone().reshape(&[h * w, 1])?);
        let gain = params.get("gain")?;
        let var = g.scale_by(x, gain)?;
        Ok(GridVar {
            rows: h,
            cols: w,
            var,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(values: &[f32]) -> TeacherSet {
        TeacherSet::new(values.iter().map(|&v| ScalarGain::store(v)).collect()).unwrap()
    }

    fn coeffs_for(teachers: &TeacherSet, alphas: &[f32]) -> MergeCoefficients {
        let map = teachers
            .first()
            .names()
            .map(|k| (k.to_string(), alphas.to_vec()))
            .collect();
        MergeCoefficients::from_alpha_map(map).unwrap()
    }

    #[test]
    fn materialize_hand_cases() {
        let t = scalar_set(&[2.0, 4.0]);
        assert_eq!(
            materialize(&coeffs_for(&t, &[0.25, 0.5]), &t)
                .unwrap()
                .get("gain")
                .unwrap()
                .item(),
            2.5
        );
        assert_eq!(
            materialize(&coeffs_for(&t, &[0.0, 0.0]), &t)
                .unwrap()
                .get("gain")
                .unwrap()
                .item(),
            0.0
        );
        let one = scalar_set(&[-0.0]);
        let m = materialize(&coeffs_for(&one, &[1.0]), &one).unwrap();
        assert_eq!(m.get("gain").unwrap().item().to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn average_hand_case_and_symmetry() {
        assert_eq!(
            average_merge(&scalar_set(&[1.0, 3.0]))
                .unwrap()
                .get("gain")
                .unwrap()
                .item(),
            2.0
        );
        let a = average_merge(&scalar_set(&[1.0, 3.0, 0.5, -2.0])).unwrap();
        let b = average_merge(&scalar_set(&[-2.0, 0.5, 3.0, 1.0])).unwrap();
        assert!((a.get("gain").unwrap().item() - b.get("gain").unwrap().item()).abs() < 1e-7);
    }

    #[test]
    fn fisher_hand_case() {
        let t = scalar_set(&[1.0, 3.0]);
        let f = |v: f32| BTreeMap::from([("gain".to_string(), Tensor::scalar(v))]);
        // squared gradients of 1 and 2
        let m = fisher_merge_from_fishers(&t, &[f(1.0), f(4.0)]).unwrap();
        assert!((m.get("gain").unwrap().item() - 2.6).abs() < 1e-6);
        let zero = fisher_merge_from_fishers(&t, &[f(0.0), f(0.0)]).unwrap();
        assert_eq!(zero.get("gain").unwrap().item(), 2.0);
        let dominant = fisher_merge_from_fishers(&t, &[f(0.0), f(0.7)]).unwrap();
        assert_eq!(dominant.get("gain").unwrap().item(), 3.0);
    }

    #[test]
    fn fisher_of_scalar_gain_matches_hand_gradient() {
        // loss = 0.5 · mean((g·x)²), dL/dg = g · mean(x²) = 2 · 5
        let t = ScalarGain::store(2.0);
        let img = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        let f = diagonal_fisher(&t, &[img], &feature_energy_loss(&ScalarGain)).unwrap();
        assert!((f["gain"].item() - 100.0).abs() < 1e-3);
    }

    #[test]
    fn signature_mismatch_names_parameter() {
        let mut other = ScalarGain::store(1.0);
        other.insert("bias", Tensor::scalar(0.0)).unwrap();
        let err = TeacherSet::new(vec![ScalarGain::store(1.0), other]).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn distill_loss_cases() {
        let mut g = Graph::new();
        let z1 = g.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let z2 = g.constant(Tensor::new(vec![2, 2], vec![-1.0, 2.0, -0.5, -3.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let same = distill_loss(&mut g, z1, &[z1, z1]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let sym = distill_loss(&mut g, zero, &[z1, z2]).unwrap();
        let single = distill_loss(&mut g, zero, &[z1]).unwrap();
        assert_eq!(g.value(sym).item(), g.value(single).item());
        let bad = g.constant(Tensor::zeros(&[4, 1]));
        assert!(matches!(
            distill_loss(&mut g, zero, &[bad]),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn coefficient_json_round_trip() {
        let t = scalar_set(&[1.0, 2.0]);
        let c = coeffs_for(&t, &[0.25, 1.0]);
        let back = MergeCoefficients::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.alphas("gain").unwrap(), &[0.25, 1.0]);
    }

    #[test]
    fn unknown_method_is_usage_error() {
        assert!(matches!(
            "soup".parse::<MergeMethod>(),
            Err(Error::Usage(_))
        ));
        assert_eq!(
            "learned".parse::<MergeMethod>().unwrap(),
            MergeMethod::Learned
        );
    }

    #[test]
    fn scalar_gain_learns_midpoint() {
        let t = scalar_set(&[1.0, 3.0]);
        let mut rng = Rng::new(7);
        let images: Vec<Tensor> = (0..16)
            .map(|_| Tensor::new(vec![2, 2, 1], (0..4).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let cfg = MergeTrainConfig {
            epochs: 30,
            batch_size: 4,
            init_alpha: Some(0.2),
            ..Default::default()
        };
        let out = train_merge_coefficients(&t, &ScalarGain, &images, &cfg, &mut rng).unwrap();
        let gain = materialize(&out.coefficients, &t)
            .unwrap()
            .get("gain")
            .unwrap()
            .item();
        assert!((gain - 2.0).abs() < 0.05, "{gain}");
    }
}
