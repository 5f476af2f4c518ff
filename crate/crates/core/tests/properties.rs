mod common;

use docvit::align::{normalize_bbox, NormalizedBBox};
use docvit::fusion::fuse;
use docvit::harness::checkpoint::{decode, encode};
use docvit::harness::seed_everything;
use docvit::heads::{init_head, iou, pool_tokens, BBox, HeadTask};
use docvit::mae::{mae_loss_normalized, mae_loss_pixel, sample_mask, MaskPlan};
use docvit::merge::{distill_loss_grids, materialize, MergeCoefficients, TeacherSet};
use docvit::numkernel::{cross_entropy, matmul, mse, ParamStore, Rng, Tensor};
use docvit::patchstat::interpatch_std;
use docvit::vit::{self, interpolate_tokens, patchify, unpatchify, TokenGrid, ViTConfig};
use proptest::prelude::*;

use common::{rand_tensor, tiny_vit, uniform_tensor};

fn grid(rng: &mut Rng, rows: usize, cols: usize, dim: usize) -> TokenGrid {
    TokenGrid::new(rows, cols, rand_tensor(rng, &[rows * cols, dim], 1.0)).unwrap()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn small_config(seed: u64) -> ViTConfig {
    let mut cfg = tiny_vit();
    cfg.image_size = [8, 12, 16][(seed % 3) as usize];
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mse_is_zero_on_itself_and_symmetric(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7) {
        let mut rng = Rng::new(seed);
        let a = rand_tensor(&mut rng, &[rows, cols], 1.0);
        let b = rand_tensor(&mut rng, &[rows, cols], 1.0);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(mse(&a, &b).unwrap().to_bits(), mse(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn cross_entropy_falls_toward_zero_as_correct_logit_grows(seed in any::<u64>(), k in 2usize..8) {
        let mut rng = Rng::new(seed);
        let mut logits = rand_tensor(&mut rng, &[1, k], 1.0);
        let target = rng.below(k);
        let mut last = cross_entropy(&logits, &[target]).unwrap();
        for _ in 0..30 {
            logits.data_mut()[target] += 1.0;
            let l = cross_entropy(&logits, &[target]).unwrap();
            prop_assert!(l <= last);
            last = l;
        }
        prop_assert!(last < 1e-6);
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let cfg = tiny_vit();
        let params = vit::init_params(&cfg, &mut rng).unwrap();
        let image = uniform_tensor(&mut rng, &[8, 8, 1], 0.0, 1.0);
        let a = vit::encode(&params, &cfg, &image).unwrap();
        let b = vit::encode(&params, &cfg, &image).unwrap();
        prop_assert!(a.data.data().iter().zip(b.data.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let m = rand_tensor(&mut rng, &[8, 5], 1.0);
        prop_assert_eq!(matmul(&a.data, &m).unwrap(), matmul(&b.data, &m).unwrap());
    }

    #[test]
    fn patchify_round_trips(seed in any::<u64>(), gr in 1usize..4, gc in 1usize..4, p in 1usize..5, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let image = rand_tensor(&mut rng, &[gr * p, gc * p, c], 1.0);
        let patches = patchify(&image, p).unwrap();
        prop_assert_eq!(patches.shape(), &[gr * gc, p * p * c]);
        prop_assert_eq!(unpatchify(&patches, gr * p, gc * p, c, p).unwrap(), image);
    }

    #[test]
    fn full_encode_equals_all_visible_encode(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let cfg = small_config(seed);
        let params = vit::init_params(&cfg, &mut rng).unwrap();
        let image = uniform_tensor(&mut rng, &[cfg.image_size, cfg.image_size, 1], 0.0, 1.0);
        let full = vit::encode(&params, &cfg, &image).unwrap();
        let all: Vec<usize> = (0..cfg.n_patches()).collect();
        let visible = vit::encode_visible(&params, &cfg, &patchify(&image, cfg.patch_size).unwrap(), &all).unwrap();
        prop_assert_eq!(full.data, visible.data);
    }

    #[test]
    fn interpolation_commutes_with_channel_permutation(
        seed in any::<u64>(), r in 1usize..5, c in 1usize..5, tr in 1usize..7, tc in 1usize..7, d in 1usize..6,
    ) {
        let mut rng = Rng::new(seed);
        let g = grid(&mut rng, r, c, d);
        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor| {
            let data = (0..t.rows()).flat_map(|i| perm.iter().map(move |&j| t.row(i)[j])).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let permuted = TokenGrid::new(r, c, permute(&g.data)).unwrap();
        let a = interpolate_tokens(&permuted, tr, tc).unwrap();
        let b = interpolate_tokens(&g, tr, tc).unwrap();
        prop_assert_eq!(a.data, permute(&b.data));
    }

    #[test]
    fn constant_fields_survive_double_then_halve(value in -10.0f32..10.0, r in 1usize..5, c in 1usize..5, d in 1usize..4) {
        let g = TokenGrid::new(r, c, Tensor::full(&[r * c, d], value)).unwrap();
        let up = interpolate_tokens(&g, 2 * r, 2 * c).unwrap();
        let back = interpolate_tokens(&up, r, c).unwrap();
        prop_assert_eq!(back.data, g.data);
    }

    #[test]
    fn masks_partition_the_patches(seed in any::<u64>(), n in 2usize..200, ratio in 0.05f32..0.95) {
        let k = (ratio as f64 * n as f64).round() as usize;
        let mut rng = Rng::new(seed);
        match sample_mask(n, ratio, &mut rng) {
            Ok(plan) => {
                prop_assert_eq!(plan.masked.len(), k);
                let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(sample_mask(n, ratio, &mut Rng::new(seed)).unwrap(), plan);
            }
            Err(_) => prop_assert!(k == 0 || k == n),
        }
    }

    #[test]
    fn losses_ignore_masked_index_order(seed in any::<u64>(), n in 2usize..16, p in 1usize..10) {
        let mut rng = Rng::new(seed);
        let pred = rand_tensor(&mut rng, &[n, p], 1.0);
        let x = rand_tensor(&mut rng, &[n, p], 1.0);
        let k = 1 + rng.below(n - 1);
        let mut masked = rng.choose_indices(n, k);
        let a = MaskPlan::from_masked(n, &masked).unwrap();
        rng.shuffle(&mut masked);
        let b = MaskPlan::from_masked(n, &masked).unwrap();
        prop_assert_eq!(mae_loss_pixel(&pred, &x, &a).unwrap(), mae_loss_pixel(&pred, &x, &b).unwrap());
        prop_assert_eq!(mae_loss_normalized(&pred, &x, &a).unwrap(), mae_loss_normalized(&pred, &x, &b).unwrap());
    }

    #[test]
    fn patch_std_multiset_ignores_patch_order(seed in any::<u64>(), gr in 1usize..4, gc in 1usize..4) {
        let mut rng = Rng::new(seed);
        let p = 4;
        let image = uniform_tensor(&mut rng, &[gr * p, gc * p, 1], 0.0, 1.0);
        let patches = patchify(&image, p).unwrap();
        let mut order: Vec<usize> = (0..gr * gc).collect();
        rng.shuffle(&mut order);
        let shuffled = unpatchify(&patches.select_rows(&order).unwrap(), gr * p, gc * p, 1, p).unwrap();
        let a = sorted(interpatch_std(&image, p, true).unwrap());
        let b = sorted(interpatch_std(&shuffled, p, true).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn raw_patch_std_ignores_offsets(seed in any::<u64>(), offset in -0.5f32..0.5) {
        let mut rng = Rng::new(seed);
        let image = uniform_tensor(&mut rng, &[8, 8, 1], 0.0, 1.0);
        let a = interpatch_std(&image, 4, false).unwrap();
        let b = interpatch_std(&image.map(|v| v + offset), 4, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_boxes_are_ordered_in_range_and_idempotent(
        seed in any::<u64>(), w in 1.0f64..4000.0, h in 1.0f64..4000.0,
    ) {
        let mut rng = Rng::new(seed);
        let mut xs = [rng.uniform(0.0, 1.0) as f64 * w, rng.uniform(0.0, 1.0) as f64 * w];
        let mut ys = [rng.uniform(0.0, 1.0) as f64 * h, rng.uniform(0.0, 1.0) as f64 * h];
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let b = normalize_bbox([xs[0], ys[0], xs[1], ys[1]], w, h).unwrap();
        prop_assert!(b.x0 <= b.x1 && b.y0 <= b.y1 && b.x1 <= 999 && b.y1 <= 999);
        let again: NormalizedBBox =
            normalize_bbox([b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64], 1000.0, 1000.0).unwrap();
        prop_assert_eq!(again, b);
    }

    #[test]
    fn materialize_is_linear_in_each_teacher(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let store = |rng: &mut Rng| {
            let mut s = ParamStore::new();
            s.insert("w", rand_tensor(rng, &[3, 4], 1.0)).unwrap();
            s.insert("b", rand_tensor(rng, &[4], 1.0)).unwrap();
            s
        };
        let (t0, t1, d) = (store(&mut rng), store(&mut rng), store(&mut rng));
        let sum = {
            let mut s = ParamStore::new();
            for (k, v) in t0.iter() {
                let data = v.data().iter().zip(d.get(k).unwrap().data()).map(|(a, b)| a + b).collect();
                s.insert(k, Tensor::new(v.shape().to_vec(), data).unwrap()).unwrap();
            }
            s
        };
        let coeffs = MergeCoefficients::from_alpha_map(
            [("b", vec![rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]), ("w", vec![rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
        .unwrap();
        let base = materialize(&coeffs, &TeacherSet::new(vec![t0, t1.clone()]).unwrap()).unwrap();
        let shifted = materialize(&coeffs, &TeacherSet::new(vec![sum, t1]).unwrap()).unwrap();
        for (name, v) in base.iter() {
            let a0 = coeffs.alphas(name).unwrap()[0];
            for ((x, y), dv) in v.data().iter().zip(shifted.get(name).unwrap().data()).zip(d.get(name).unwrap().data()) {
                prop_assert!((y - (x + a0 * dv)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_teachers_with_unit_sum_reproduce_the_teacher(seed in any::<u64>(), a in 0.0f32..1.0) {
        let mut rng = Rng::new(seed);
        let cfg = tiny_vit();
        let t = vit::init_params(&cfg, &mut rng).unwrap();
        let set = TeacherSet::new(vec![t.clone(), t.clone()]).unwrap();
        let map = t.names().map(|k| (k.to_string(), vec![a, 1.0 - a])).collect();
        let merged = materialize(&MergeCoefficients::from_alpha_map(map).unwrap(), &set).unwrap();
        let image = uniform_tensor(&mut rng, &[8, 8, 1], 0.0, 1.0);
        let z = vit::encode(&merged, &cfg, &image).unwrap();
        let z0 = vit::encode(&t, &cfg, &image).unwrap();
        // a·θ + (1 − a)·θ can differ from θ by one rounding step
        prop_assert!(z.data.max_abs_diff(&z0.data) < 1e-5);
    }

    #[test]
    fn distill_loss_is_smallest_at_the_teacher_mean(seed in any::<u64>(), n in 1usize..5, tokens in 1usize..6, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let teachers: Vec<TokenGrid> = (0..n).map(|_| grid(&mut rng, 1, tokens, d)).collect();
        let len = tokens * d;
        let mean: Vec<f64> = (0..len)
            .map(|e| teachers.iter().map(|t| t.data.data()[e] as f64).sum::<f64>() / n as f64)
            .collect();
        let variance = (0..len)
            .map(|e| teachers.iter().map(|t| (t.data.data()[e] as f64 - mean[e]).powi(2)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / len as f64;
        let centre = TokenGrid::new(1, tokens, Tensor::new(vec![tokens, d], mean.iter().map(|&v| v as f32).collect()).unwrap()).unwrap();
        let at_mean = distill_loss_grids(&centre, &teachers).unwrap() as f64;
        prop_assert!((at_mean - variance).abs() < 1e-5 * (1.0 + variance));
        let elsewhere = grid(&mut rng, 1, tokens, d);
        prop_assert!(distill_loss_grids(&elsewhere, &teachers).unwrap() as f64 >= at_mean - 1e-6);
    }

    #[test]
    fn fused_width_is_the_sum(seed in any::<u64>(), r in 1usize..5, c in 1usize..5, sr in 1usize..7, sc in 1usize..7, dg in 1usize..6, ds in 1usize..6) {
        let mut rng = Rng::new(seed);
        let f = fuse(&grid(&mut rng, r, c, dg), &grid(&mut rng, sr, sc, ds)).unwrap();
        prop_assert_eq!((f.grid.rows, f.grid.cols, f.grid.dim()), (r, c, dg + ds));
    }

    #[test]
    fn matching_grids_fuse_the_same_either_way(seed in any::<u64>(), r in 1usize..4, c in 1usize..4, tr in 1usize..6, tc in 1usize..6) {
        let mut rng = Rng::new(seed);
        let (a, b) = (grid(&mut rng, r, c, 3), grid(&mut rng, r, c, 2));
        let fused_then_resampled = interpolate_tokens(&fuse(&a, &b).unwrap().grid, tr, tc).unwrap();
        let resampled_then_fused = fuse(&interpolate_tokens(&a, tr, tc).unwrap(), &interpolate_tokens(&b, tr, tc).unwrap()).unwrap();
        prop_assert_eq!(fused_then_resampled, resampled_then_fused.grid);
    }

    #[test]
    fn attention_pool_stays_in_the_value_hull(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = Rng::new(seed);
        let d = 6;
        let head = init_head(HeadTask::BBox, d, 8, &mut rng).unwrap();
        let tokens = grid(&mut rng, 1, n, d);
        let (pooled, weights) = pool_tokens(&head, &tokens).unwrap();
        prop_assert!((weights.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let values = matmul(&tokens.data, head.get("pool.value.weight").unwrap()).unwrap();
        let bias = head.get("pool.value.bias").unwrap().data();
        for j in 0..d {
            let col: Vec<f32> = (0..n).map(|i| values.row(i)[j] + bias[j]).collect();
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let v = pooled.data()[j];
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn iou_is_symmetric_and_one_only_on_equal_boxes(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let bbox = |rng: &mut Rng| {
            let (x0, y0) = (rng.uniform(0.0, 0.8), rng.uniform(0.0, 0.8));
            BBox::new(x0, y0, x0 + rng.uniform(0.01, 0.2), y0 + rng.uniform(0.01, 0.2)).unwrap()
        };
        let (a, b) = (bbox(&mut rng), bbox(&mut rng));
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        if a != b {
            prop_assert!(iou(&a, &b) < 1.0);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>(), entries in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        for i in 0..entries {
            let shape: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(5)).collect();
            let mut t = rand_tensor(&mut rng, &shape, 1e3);
            if i == 0 {
                t.data_mut()[0] = -0.0;
            }
            store.insert(format!("layer{i}.w"), t).unwrap();
        }
        store.set_meta("seed", seed.to_string());
        let bytes = encode(&store).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.sha256(), store.sha256());
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back.get("layer0.w").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
    }
}

/// Pearson chi-square statistic of a contingency table against independence.
fn independence_statistic(table: &[Vec<f64>]) -> f64 {
    let total: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / total;
            stat += (o - e).powi(2) / e;
        }
    }
    stat
}

#[test]
fn child_streams_pass_chi_square_checks() {
    // 0.99 quantiles of the chi-square distribution
    const DF9: f64 = 21.666;
    const DF81: f64 = 113.512;
    let tree = seed_everything(2024);
    let labels = ["mae", "align", "merge", "head", "data"];
    for pair in labels.windows(2) {
        let (mut a, mut b) = (tree.rng(pair[0]), tree.rng(pair[1]));
        let mut table = vec![vec![0.0; 10]; 10];
        let mut marginal = [0.0f64; 10];
        for _ in 0..10_000 {
            let (u, v) = (a.below(10), b.below(10));
            table[u][v] += 1.0;
            marginal[u] += 1.0;
        }
        let uniform: f64 = marginal
            .iter()
            .map(|&o| (o - 1000.0).powi(2) / 1000.0)
            .sum();
        assert!(uniform < DF9, "{} not uniform: {uniform}", pair[0]);
        let stat = independence_statistic(&table);
        assert!(
            stat < DF81,
            "{} and {} look dependent: {stat}",
            pair[0],
            pair[1]
        );
    }
}
