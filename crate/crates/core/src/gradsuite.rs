//! Seeded gradient checks of every differentiable op and every composite
//! training loss against central differences.

use crate::align::{
    ar_loss, glyph_ocr_samples, init_decoder, init_projector, projector_forward, ToyDecoderConfig,
};
use crate::heads::{head_loss, init_head, HeadLabel, HeadTask};
use crate::mae::{
    init_mae, mae_forward, mae_loss, MAEDecoderConfig, MaskPlan, ReconstructionTarget,
};
use crate::merge::distill_loss;
use crate::numkernel::{
    grad_check, grad_check_many, Bound, Graph, GridResample, ParamStore, Rng, Tensor, Var, LN_EPS,
};
use crate::synth;
use crate::vit::{self, patchify, ViTConfig};
use crate::Result;

/// Central-difference step for single ops, whose inputs lie in `[-1, 1]`.
pub const OP_STEP: f32 = 1e-3;
/// Step for the composite losses. Their error is dominated by truncation,
/// which shrinks as the step squared, while f32 rounding stays below 1e-4.
pub const COMPOSITE_STEP: f32 = 2e-3;
pub const TOLERANCE: f32 = 1e-3;

fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.normal() * scale).collect(),
    )
    .expect("length matches shape")
}

fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi)).collect(),
    )
    .expect("length matches shape")
}

fn unit(rng: &mut Rng, shape: &[usize]) -> Tensor {
    uniform_tensor(rng, shape, -1.0, 1.0)
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output element matters.
fn reduce(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn unary(
    rng: &mut Rng,
    shape: &[usize],
    out: &[usize],
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<f32> {
    let x = unit(rng, shape);
    let w = unit(rng, out);
    grad_check(
        |g, x| {
            let y = f(g, x)?;
            reduce(g, y, &w)
        },
        &x,
        OP_STEP,
    )
}

fn many(xs: Vec<Tensor>, w: Tensor, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f32> {
    grad_check_many(
        |g, v| {
            let y = f(g, v)?;
            reduce(g, y, &w)
        },
        &xs,
        OP_STEP,
    )
}

/// `b = a ± d` with `|d|` bounded away from zero, so element-wise min/max
/// never switch branch inside the difference stencil.
fn separated(rng: &mut Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let a = unit(rng, shape);
    let data: Vec<f32> = a
        .data()
        .iter()
        .map(|&v| {
            let d = rng.uniform(0.1, 1.0);
            if rng.below(2) == 0 {
                v + d
            } else {
                v - d
            }
        })
        .collect();
    (
        a,
        Tensor::new(shape.to_vec(), data).expect("length matches shape"),
    )
}

pub type CaseFn = fn(&mut Rng) -> Result<f32>;

/// Every differentiable graph op.
pub fn op_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add_broadcast", |r| {
            let xs = vec![unit(r, &[2, 3]), unit(r, &[3])];
            many(xs, unit(r, &[2, 3]), |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let xs = vec![unit(r, &[2, 3]), unit(r, &[2, 3])];
            many(xs, unit(r, &[2, 3]), |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let xs = vec![unit(r, &[3, 2]), unit(r, &[3, 2])];
            many(xs, unit(r, &[3, 2]), |g, v| g.mul(v[0], v[1]))
        }),
        ("minimum", |r| {
            let (a, b) = separated(r, &[3, 3]);
            many(vec![a, b], unit(r, &[3, 3]), |g, v| g.minimum(v[0], v[1]))
        }),
        ("maximum", |r| {
            let (a, b) = separated(r, &[3, 3]);
            many(vec![a, b], unit(r, &[3, 3]), |g, v| g.maximum(v[0], v[1]))
        }),
        ("scale", |r| {
            unary(r, &[2, 4], &[2, 4], |g, x| Ok(g.scale(x, -1.7)))
        }),
        ("scale_by", |r| {
            let xs = vec![unit(r, &[3, 2]), unit(r, &[1])];
            many(xs, unit(r, &[3, 2]), |g, v| g.scale_by(v[0], v[1]))
        }),
        ("matmul", |r| {
            let xs = vec![unit(r, &[2, 3]), unit(r, &[3, 4])];
            many(xs, unit(r, &[2, 4]), |g, v| g.matmul(v[0], v[1]))
        }),
        ("bmm", |r| {
            let xs = vec![unit(r, &[2, 2, 3]), unit(r, &[2, 3, 2])];
            many(xs, unit(r, &[2, 2, 2]), |g, v| g.bmm(v[0], v[1]))
        }),
        ("permute", |r| {
            unary(r, &[2, 3, 4], &[4, 2, 3], |g, x| g.permute(x, &[2, 0, 1]))
        }),
        ("transpose", |r| {
            unary(r, &[3, 4], &[4, 3], |g, x| g.transpose(x))
        }),
        ("reshape", |r| {
            unary(r, &[2, 6], &[3, 4], |g, x| g.reshape(x, &[3, 4]))
        }),
        ("softmax", |r| {
            unary(r, &[3, 5], &[3, 5], |g, x| Ok(g.softmax(x)))
        }),
        ("gelu", |r| unary(r, &[2, 5], &[2, 5], |g, x| Ok(g.gelu(x)))),
        ("sigmoid", |r| {
            unary(r, &[2, 5], &[2, 5], |g, x| Ok(g.sigmoid(x)))
        }),
        ("layer_norm", |r| {
            let xs = vec![unit(r, &[3, 6]), unit(r, &[6]), unit(r, &[6])];
            many(xs, unit(r, &[3, 6]), |g, v| {
                g.layer_norm(v[0], v[1], v[2], LN_EPS)
            })
        }),
        ("gather_rows", |r| {
            unary(r, &[4, 3], &[3, 3], |g, x| g.gather_rows(x, &[2, 0, 2]))
        }),
        ("concat_rows", |r| {
            let xs = vec![unit(r, &[2, 3]), unit(r, &[1, 3])];
            many(xs, unit(r, &[3, 3]), |g, v| g.concat_rows(v[0], v[1]))
        }),
        ("concat_cols", |r| {
            let xs = vec![unit(r, &[2, 3]), unit(r, &[2, 2])];
            many(xs, unit(r, &[2, 5]), |g, v| g.concat_cols(v[0], v[1]))
        }),
        ("sum", |r| unary(r, &[3, 4], &[1], |g, x| Ok(g.sum(x)))),
        ("mean", |r| unary(r, &[3, 4], &[1], |g, x| Ok(g.mean(x)))),
        ("mse", |r| {
            let xs = vec![unit(r, &[3, 4]), unit(r, &[3, 4])];
            grad_check_many(|g, v| g.mse(v[0], v[1]), &xs, OP_STEP)
        }),
        ("smooth_l1", |r| {
            // keep |pred - target| away from the kink at 1
            let pred = unit(r, &[3, 4]);
            let data: Vec<f32> = pred
                .data()
                .iter()
                .map(|&p| {
                    let d = if r.below(2) == 0 {
                        r.uniform(-0.9, 0.9)
                    } else {
                        r.uniform(1.1, 2.0)
                    };
                    p - d
                })
                .collect();
            let target = Tensor::new(vec![3, 4], data).expect("length matches shape");
            grad_check_many(|g, v| g.smooth_l1(v[0], v[1]), &[pred, target], OP_STEP)
        }),
        ("cross_entropy", |r| {
            let x = unit(r, &[4, 5]);
            let t: Vec<usize> = (0..4).map(|_| r.below(5)).collect();
            grad_check(|g, x| g.cross_entropy(x, &t), &x, OP_STEP)
        }),
        ("interpolate_up", |r| {
            let plan = GridResample::new(2, 3, 4, 5).expect("valid grids");
            unary(r, &[6, 4], &[20, 4], move |g, x| {
                g.interpolate(x, plan.clone())
            })
        }),
        ("interpolate_down", |r| {
            let plan = GridResample::new(4, 4, 3, 2).expect("valid grids");
            unary(r, &[16, 3], &[6, 3], move |g, x| {
                g.interpolate(x, plan.clone())
            })
        }),
    ]
}

pub fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    }
}

/// Binds `store` as constants except `name`, which becomes `x`.
fn bind_with(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Bound {
    let mut p = store.bind(g, false);
    p.insert(name, x);
    p
}

/// Adds `N(0, 0.3²)` noise to every entry. Fresh initializations put tiny
/// embeddings into layer norm, where the difference stencil is too coarse.
fn jitter(store: &ParamStore, rng: &mut Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        let data = v.data().iter().map(|&x| x + 0.3 * rng.normal()).collect();
        out.insert(
            k,
            Tensor::new(v.shape().to_vec(), data).expect("same shape"),
        )
        .expect("names are unique");
    }
    out
}

/// Picks one parameter of `store` among `names` and grad-checks `f` against
/// it, with the store jittered first.
fn check_param(
    rng: &mut Rng,
    store: &ParamStore,
    names: &[&str],
    f: impl Fn(&mut Graph, &Bound) -> Result<Var>,
) -> Result<f32> {
    let store = &jitter(store, rng);
    let name = names[rng.below(names.len())];
    let x = store.get(name)?.clone();
    grad_check(
        |g, x| {
            let p = bind_with(g, store, name, x);
            f(g, &p)
        },
        &x,
        COMPOSITE_STEP,
    )
}

fn mae_case(rng: &mut Rng, kind: ReconstructionTarget) -> Result<f32> {
    let enc = tiny_vit();
    let dec = MAEDecoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let store = init_mae(&enc, &dec, rng)?;
    let image = uniform_tensor(rng, &[8, 8, 1], 0.0, 1.0);
    let patches = patchify(&image, 4)?;
    let first = rng.below(4);
    let plan = MaskPlan::from_masked(4, &[first, (first + 1 + rng.below(3)) % 4])?;
    let names = [
        "patch_embed.weight",
        "pos_embed",
        "blocks.0.attn.q.weight",
        "blocks.0.mlp.fc1.weight",
        "decoder.embed.weight",
        "decoder.mask_token",
        "decoder.blocks.0.attn.v.weight",
        "decoder.pred.weight",
    ];
    check_param(rng, &store, &names, |g, p| {
        let pred = mae_forward(g, p, &enc, &dec, &patches, &plan)?;
        mae_loss(g, pred, &patches, &plan, kind)
    })
}

fn distill_case(rng: &mut Rng) -> Result<f32> {
    let cfg = tiny_vit();
    let image = uniform_tensor(rng, &[8, 8, 1], 0.0, 1.0);
    let teachers: Vec<ParamStore> = (0..2)
        .map(|_| vit::init_params(&cfg, rng))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = teachers
        .iter()
        .map(|t| vit::encode(t, &cfg, &image).map(|grid| grid.data))
        .collect::<Result<_>>()?;
    let student = vit::init_params(&cfg, rng)?;
    let names = [
        "patch_embed.weight",
        "blocks.0.attn.k.weight",
        "blocks.0.mlp.fc2.weight",
        "norm.gain",
    ];
    check_param(rng, &student, &names, |g, p| {
        let z = vit::encode_image_graph(g, p, &cfg, &image)?;
        let t: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
        distill_loss(g, z.var, &t)
    })
}

/// Distillation loss as a function of per-teacher coefficient logits on one
/// tensor, the path the coefficient trainer differentiates.
fn distill_coefficient_case(rng: &mut Rng) -> Result<f32> {
    let cfg = tiny_vit();
    let image = uniform_tensor(rng, &[8, 8, 1], 0.0, 1.0);
    let teachers: Vec<ParamStore> = (0..2)
        .map(|_| vit::init_params(&cfg, rng))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = teachers
        .iter()
        .map(|t| vit::encode(t, &cfg, &image).map(|grid| grid.data))
        .collect::<Result<_>>()?;
    let name = [
        "patch_embed.weight",
        "blocks.0.attn.q.weight",
        "blocks.0.mlp.fc1.weight",
    ][rng.below(3)];
    let raw = rand_tensor(rng, &[2, 1], 1.0);
    grad_check(
        |g, raw| {
            let alpha = g.sigmoid(raw);
            let mut p = teachers[0].bind(g, false);
            let mut merged: Option<Var> = None;
            for (i, t) in teachers.iter().enumerate() {
                let theta = g.constant(t.get(name)?.clone());
                let a = g.gather_rows(alpha, &[i])?;
                let a = g.reshape(a, &[1])?;
                let term = g.scale_by(theta, a)?;
                merged = Some(match merged {
                    Some(m) => g.add(m, term)?,
                    None => term,
                });
            }
            p.insert(name, merged.expect("two teachers"));
            let z = vit::encode_image_graph(g, &p, &cfg, &image)?;
            let t: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
            distill_loss(g, z.var, &t)
        },
        &raw,
        COMPOSITE_STEP,
    )
}

fn ar_case(rng: &mut Rng) -> Result<f32> {
    let cfg = tiny_vit();
    let dcfg = ToyDecoderConfig {
        dim: 8,
        max_sequence: 16,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    store.extend_prefixed("enc.", &vit::init_params(&cfg, rng)?)?;
    store.extend_prefixed("proj.", &init_projector(cfg.dim, dcfg.dim, rng)?)?;
    store.extend_prefixed("dec.", &init_decoder(&dcfg, rng)?)?;
    let sample = glyph_ocr_samples(1, 8, rng).remove(0);
    let image = sample.image.load()?;
    let tokens = sample.tokens();
    let mask = sample.loss_mask.clone();
    let names = [
        "enc.patch_embed.weight",
        "enc.blocks.0.attn.v.weight",
        "proj.projector.fc1.weight",
        "proj.projector.fc2.weight",
        "dec.blocks.0.attn.q.weight",
        "dec.blocks.0.mlp.fc2.weight",
        "dec.pos_embed",
    ];
    check_param(rng, &store, &names, |g, p| {
        let grid = vit::encode_image_graph(g, &p.scoped("enc."), &cfg, &image)?;
        let visual = projector_forward(g, &p.scoped("proj."), grid.var)?;
        ar_loss(g, &p.scoped("dec."), &dcfg, visual, &tokens, &mask)
    })
}

fn head_case(rng: &mut Rng, task: HeadTask) -> Result<f32> {
    let cfg = tiny_vit();
    let mut store = ParamStore::new();
    store.extend_prefixed("enc.", &vit::init_params(&cfg, rng)?)?;
    store.extend_prefixed("head.", &init_head(task, cfg.dim, 8, rng)?)?;
    let sample = synth::head_samples(task, 1, 8, cfg.grid(), rng)?.remove(0);
    let label: HeadLabel = sample.label.clone();
    let names: Vec<&str> = match task {
        HeadTask::BBox => vec![
            "enc.blocks.0.attn.q.weight",
            "head.pool.query",
            "head.pool.key.weight",
            "head.bbox_head.fc1.weight",
            "head.bbox_head.fc2.weight",
        ],
        HeadTask::Segmentation { .. } => vec![
            "enc.patch_embed.weight",
            "enc.blocks.0.mlp.fc1.weight",
            "head.seg_head.fc1.weight",
            "head.seg_head.fc2.weight",
        ],
        HeadTask::Classification { .. } => vec![
            "enc.blocks.0.attn.k.weight",
            "head.pool.value.weight",
            "head.cls_head.fc1.weight",
            "head.cls_head.fc2.weight",
        ],
    };
    check_param(rng, &store, &names, |g, p| {
        let grid = vit::encode_image_graph(g, &p.scoped("enc."), &cfg, &sample.image)?;
        head_loss(g, &p.scoped("head."), task, grid, &label)
    })
}

/// Every composite training loss, differentiated end to end.
pub fn composite_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("mae_normalized_target", |r| {
            mae_case(r, ReconstructionTarget::Normalized)
        }),
        ("mae_pixel_target", |r| {
            mae_case(r, ReconstructionTarget::Pixel)
        }),
        ("distill_encoder", distill_case),
        ("distill_coefficients", distill_coefficient_case),
        ("ar_loss", ar_case),
        ("bbox_head", |r| head_case(r, HeadTask::BBox)),
        ("segmentation_head", |r| {
            head_case(r, HeadTask::Segmentation { classes: 2 })
        }),
        ("classification_head", |r| {
            head_case(r, HeadTask::Classification { classes: 4 })
        }),
    ]
}

/// Worst error over `instances` seeded runs of one case.
pub fn run_case(name: &str, case: CaseFn, instances: usize) -> Result<f32> {
    let root = Rng::new(7);
    let mut worst = 0.0f32;
    for i in 0..instances {
        let mut rng = root.fork(&format!("{name}/{i}"));
        worst = worst.max(case(&mut rng)?);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub composite: bool,
    pub worst: f32,
}

/// Every op case, then every composite case, `instances` runs each.
pub fn run_suite(instances: usize) -> Result<Vec<CaseResult>> {
    let ops = op_cases().into_iter().map(|c| (c, false));
    let composites = composite_cases().into_iter().map(|c| (c, true));
    ops.chain(composites)
        .map(|((name, case), composite)| {
            Ok(CaseResult {
                name,
                composite,
                worst: run_case(name, case, instances)?,
            })
        })
        .collect()
}
