//! Property tests over the public API.

#![allow(clippy::needless_range_loop)]

mod common;

use cacgen_core::attention::{cac_cross_attention, cross_attention_baseline, AttentionLayerParams};
use cacgen_core::benchmark::color_palette;
use cacgen_core::diffusion::{blend, md_step_count, schedule_control, LatentGrid, StepKind};
use cacgen_core::eval::{
    composition_categorize, detection_metrics, iou, kid, segmentation_metrics, Category,
    CompositionSpec, Detection, DetectorConfig,
};
use cacgen_core::layout::{
    assemble_concat_mask, build_mask_pyramid, LabelGrid, LayerDims, LayerId, MaskPyramid,
};
use cacgen_core::numerics::{Grid, ResizeMode, RgbImage};
use cacgen_core::text::{
    concat_prompts, embed_tokens, tokenize, ConcatenatedPrompt, TokenizedPrompt, Vocabulary,
    TOY_OBJECT_CONCEPTS,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "red", "apple", "boat", "blue", "chair", "sky", "a", "photo", "of", "garden",
];

fn random_prompt(rng: &mut ChaCha8Rng, v: &Vocabulary) -> TokenizedPrompt {
    let n = rng.random_range(1..=3);
    let text: Vec<&str> = (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect();
    tokenize(&text.join(" "), v).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    Grid::from_vec(
        h,
        w,
        (0..h * w).map(|_| rng.random_range(0..2) as f64).collect(),
    )
    .unwrap()
}

struct Scene {
    caption: TokenizedPrompt,
    regions: Vec<TokenizedPrompt>,
    masks: Vec<Grid>,
    layer: LayerDims,
}

fn random_scene(seed: u64) -> Scene {
    let v = Vocabulary::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(4..=16), rng.random_range(4..=16));
    let k = rng.random_range(0..=3);
    Scene {
        caption: random_prompt(&mut rng, &v),
        regions: (0..k).map(|_| random_prompt(&mut rng, &v)).collect(),
        masks: (0..k).map(|_| random_grid(&mut rng, h, w)).collect(),
        layer: LayerDims {
            id: LayerId(2),
            height: rng.random_range(1..=h),
            width: rng.random_range(1..=w),
        },
    }
}

fn build(s: &Scene, order: &[usize], lambda_region: f64) -> (ConcatenatedPrompt, Vec<MaskPyramid>) {
    let v = Vocabulary::toy();
    let regions: Vec<_> = order.iter().map(|&i| s.regions[i].clone()).collect();
    let total = s.caption.len() + regions.iter().map(|r| r.len()).sum::<usize>();
    let prompt = concat_prompts(&s.caption, &regions, total + 3, 1.0, lambda_region, &v).unwrap();
    let pyramids = order
        .iter()
        .map(|&i| build_mask_pyramid(&s.masks[i], &[s.layer], ResizeMode::Nearest).unwrap())
        .collect();
    (prompt, pyramids)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_mask_shape_and_levels(seed in any::<u64>()) {
        let s = random_scene(seed);
        let (prompt, pyramids) = build(&s, &(0..s.regions.len()).collect::<Vec<_>>(), 10.0);
        let m = assemble_concat_mask(&pyramids, &prompt, s.layer).unwrap();
        let n: usize = s.caption.len() + s.regions.iter().map(|r| r.len()).sum::<usize>();
        prop_assert_eq!(prompt.total_len(), n);
        prop_assert_eq!(m.matrix.shape(), (s.layer.pixels(), n));
        prop_assert!(m.matrix.data().iter().all(|b| *b == 0.0 || *b == 1.0));
    }

    #[test]
    fn concat_mask_is_permutation_equivariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let s = random_scene(seed);
        let k = s.regions.len();
        let ident: Vec<usize> = (0..k).collect();
        let order = shuffled(k, perm_seed);
        let (p0, y0) = build(&s, &ident, 10.0);
        let (p1, y1) = build(&s, &order, 10.0);
        let m0 = assemble_concat_mask(&y0, &p0, s.layer).unwrap().matrix;
        let m1 = assemble_concat_mask(&y1, &p1, s.layer).unwrap().matrix;
        let cap = p0.segments()[0];
        prop_assert_eq!(m0.col_block(cap.start, cap.len()), m1.col_block(cap.start, cap.len()));
        for (pos, &i) in order.iter().enumerate() {
            let a = p0.segments()[i + 1];
            let b = p1.segments()[pos + 1];
            prop_assert_eq!(m0.col_block(a.start, a.len()), m1.col_block(b.start, b.len()));
        }
    }

    #[test]
    fn cac_row_sums_and_region_permutation(seed in any::<u64>(), perm_seed in any::<u64>(), lambda in 0.5f64..20.0) {
        let s = random_scene(seed);
        let v = Vocabulary::toy();
        let k = s.regions.len();
        let params = AttentionLayerParams::seeded(s.layer, 2, 4, 4, 6, v.embed_dim(), seed ^ 0x55);
        let z = common::random_matrix(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), s.layer.pixels(), 6);
        let run = |order: &[usize]| {
            let (p, y) = build(&s, order, lambda);
            let mask = assemble_concat_mask(&y, &p, s.layer).unwrap();
            let e = embed_tokens(p.unpadded(), &v);
            let (out, rec) = cac_cross_attention(&z, &p, &e, &mask, &params).unwrap();
            (out, rec, p)
        };
        let (out0, rec, p) = run(&(0..k).collect::<Vec<_>>());
        let max_lambda = p.lambdas().iter().cloned().fold(0.0, f64::max);
        for h in 0..rec.heads {
            let m = rec.head(h);
            for j in 0..m.rows() {
                let sum: f64 = m.row(j).iter().sum();
                prop_assert!(sum >= 0.0 && sum <= max_lambda * p.total_len() as f64);
            }
        }
        let (_, pre) = cross_attention_baseline(&z, &embed_tokens(p.unpadded(), &v), &params).unwrap();
        for h in 0..pre.heads {
            let m = pre.head(h);
            for j in 0..m.rows() {
                prop_assert!((m.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let (out1, _, _) = run(&shuffled(k, perm_seed));
        prop_assert!(out0.max_abs_diff(&out1) <= 1e-12, "diff {}", out0.max_abs_diff(&out1));
    }

    #[test]
    fn output_is_affine_in_one_lambda(seed in any::<u64>()) {
        let mut s = random_scene(seed);
        if s.regions.is_empty() {
            s.regions.push(tokenize("red apple", &Vocabulary::toy()).unwrap());
            s.masks.push(Grid::ones(4, 4));
            s.layer.height = s.layer.height.min(4);
            s.layer.width = s.layer.width.min(4);
        }
        let v = Vocabulary::toy();
        let (p, y) = build(&s, &(0..s.regions.len()).collect::<Vec<_>>(), 10.0);
        let mask = assemble_concat_mask(&y, &p, s.layer).unwrap();
        let e = embed_tokens(p.unpadded(), &v);
        let params = AttentionLayerParams::seeded(s.layer, 2, 4, 4, 6, v.embed_dim(), seed);
        let z = common::random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), s.layer.pixels(), 6);
        let col = p.segments()[1].start + 1;
        let at = |c: f64| {
            let mut l = p.lambdas().to_vec();
            l[col] = c;
            cac_cross_attention(&z, &p.with_lambdas(l).unwrap(), &e, &mask, &params).unwrap().0
        };
        let (a, b, c) = (at(1.0), at(4.0), at(7.0));
        // equal steps in λ give equal steps in the output
        for j in 0..a.rows() {
            for o in 0..a.cols() {
                let d1 = b.get(j, o) - a.get(j, o);
                let d2 = c.get(j, o) - b.get(j, o);
                prop_assert!((d1 - d2).abs() <= 1e-9 * (1.0 + d1.abs()));
            }
        }
    }

    #[test]
    fn schedule_partition(steps in 1usize..300, ratio in 0.0f64..=1.0) {
        let kinds: Vec<StepKind> = (1..=steps).rev().map(|t| schedule_control(t, steps, ratio)).collect();
        let md = kinds.iter().filter(|k| **k == StepKind::Md).count();
        prop_assert_eq!(md, md_step_count(steps, ratio));
        let exact = ratio * steps as f64;
        prop_assert!(md as f64 >= exact - 1e-6 && (md as f64) < exact + 1.0);
        // region-wise steps come first, at the highest noise
        prop_assert!(kinds.windows(2).all(|w| !(w[0] == StepKind::Cac && w[1] == StepKind::Md)));
    }

    #[test]
    fn blend_is_a_convex_combination(seed in any::<u64>(), branches in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ls: Vec<_> = (0..branches).map(|i| LatentGrid::gaussian(2, 3, 4, seed.wrapping_add(i as u64))).collect();
        let ws: Vec<Grid> = (0..branches)
            .map(|_| Grid::from_vec(3, 4, (0..12).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap())
            .collect();
        let out = blend(&ls, &ws.iter().collect::<Vec<_>>()).unwrap();
        for ch in 0..2 {
            for r in 0..3 {
                for c in 0..4 {
                    let total: f64 = ws.iter().map(|w| w.get(r, c)).sum();
                    let num: f64 = ls.iter().zip(&ws).map(|(l, w)| w.get(r, c) * l.get(ch, r, c)).sum();
                    let vals: Vec<f64> = ls.iter().map(|l| l.get(ch, r, c)).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let x = out.get(ch, r, c);
                    prop_assert!((x - num / total).abs() < 1e-12);
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }
}

// --- eval ----------------------------------------------------------------

/// Ground-truth boxes in separate cells of a 4x4 layout, so no box can
/// match two of them.
fn cell_boxes(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let classes = ["apple", "boat", "sky"];
    let mut cells: Vec<usize> = (0..16).collect();
    cells.shuffle(rng);
    cells
        .into_iter()
        .take(rng.random_range(1..8))
        .map(|cell| {
            let (x, y) = ((cell % 4) as f64 * 25.0, (cell / 4) as f64 * 25.0);
            let (w, h) = (rng.random_range(8.0..20.0), rng.random_range(8.0..20.0));
            Detection::new(
                [x + 2.0, y + 2.0, x + 2.0 + w, y + 2.0 + h],
                classes[rng.random_range(0..3)],
                1.0,
            )
        })
        .collect()
}

fn jittered(rng: &mut ChaCha8Rng, gts: &[Detection]) -> Vec<Detection> {
    let mut preds = Vec::new();
    for g in gts {
        if !rng.random_bool(0.8) {
            continue;
        }
        let b = g.bbox.map(|v| v + rng.random_range(-3.0..3.0));
        let score = [0.3, 0.6, 0.9][rng.random_range(0..3)];
        preds.push(Detection::new(
            [b[0], b[1], b[2].max(b[0] + 1.0), b[3].max(b[1] + 1.0)],
            g.concept.clone(),
            score,
        ));
    }
    for _ in 0..rng.random_range(0..3) {
        let (x, y) = (rng.random_range(0.0..90.0), rng.random_range(0.0..90.0));
        preds.push(Detection::new([x, y, x + 8.0, y + 8.0], "apple", 0.6));
    }
    preds
}

proptest! {
    #[test]
    fn detection_metrics_ignore_prediction_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = cell_boxes(&mut rng);
        let preds = jittered(&mut rng, &gts);
        let thr = cacgen_core::eval::coco_thresholds();
        let a = detection_metrics(&preds, &gts, &thr).unwrap();
        let mut p2 = preds.clone();
        p2.shuffle(&mut rng);
        let mut g2 = gts.clone();
        g2.shuffle(&mut rng);
        prop_assert_eq!(a, detection_metrics(&p2, &g2, &thr).unwrap());
        for v in [a.precision, a.recall, a.map50, a.map50_95] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn duplicate_prediction_never_raises_precision(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = cell_boxes(&mut rng);
        let mut preds = jittered(&mut rng, &gts);
        let before = detection_metrics(&preds, &gts, &[0.5]).unwrap();
        let hits: Vec<Detection> = preds
            .iter()
            .filter(|p| gts.iter().any(|g| g.concept == p.concept && iou(&g.bbox, &p.bbox) >= 0.5))
            .cloned()
            .collect();
        prop_assume!(!hits.is_empty());
        preds.push(hits[rng.random_range(0..hits.len())].clone());
        let after = detection_metrics(&preds, &gts, &[0.5]).unwrap();
        prop_assert!(after.precision <= before.precision);
        prop_assert_eq!(after.recall, before.recall);
    }

    #[test]
    fn kid_is_symmetric_and_order_free(seed in any::<u64>(), n in 2usize..8, m in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |k: usize| -> Vec<Vec<f64>> {
            (0..k).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (a, b) = (f(n), f(m));
        let ab = kid(&a, &b).unwrap();
        prop_assert_eq!(ab.to_bits(), kid(&b, &a).unwrap().to_bits());
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.reverse();
        b2.rotate_left(1);
        prop_assert_eq!(ab.to_bits(), kid(&a2, &b2).unwrap().to_bits());
        prop_assert!((ab - common::naive_kid(&a, &b)).abs() <= 1e-12);
    }

    #[test]
    fn iou_range_and_monotonicity(
        a in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..40.0, 1.0f64..40.0),
        b in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..40.0, 1.0f64..40.0),
        t in 0.0f64..=1.0,
    ) {
        let a = [a.0, a.1, a.0 + a.2, a.1 + a.3];
        let b = [b.0, b.1, b.0 + b.2, b.1 + b.3];
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        let inter = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
        prop_assume!(inter[0] < inter[2] && inter[1] < inter[3]);
        // shrink b toward the intersection: same overlap, smaller union
        let lerp = |x: f64, y: f64| x + t * (y - x);
        let shrunk = [lerp(b[0], inter[0]), lerp(b[1], inter[1]), lerp(b[2], inter[2]), lerp(b[3], inter[3])];
        prop_assert!(iou(&a, &shrunk) >= v - 1e-12);
    }

    #[test]
    fn balanced_confusion_gives_equal_accuracies(k in 2u32..6, n in 1usize..20, frac in 0.0f64..=1.0) {
        let correct = (frac * n as f64).floor() as usize;
        let (mut pred, mut gt) = (Vec::new(), Vec::new());
        for class in 0..k {
            for i in 0..n {
                gt.push(class);
                pred.push(if i < correct { class } else { (class + 1) % k });
            }
        }
        let len = gt.len();
        let s = segmentation_metrics(&LabelGrid::new(1, len, pred).unwrap(), &LabelGrid::new(1, len, gt).unwrap()).unwrap();
        prop_assert!((s.aacc - s.macc).abs() < 1e-12);
        prop_assert!((s.aacc - correct as f64 / n as f64).abs() < 1e-12);
    }
}

/// Components by union-find over the pixel grid, returning per blob its
/// color name, tight box and first raster index.
fn oracle_blobs(
    img: &RgbImage,
    names: &[(String, [f64; 3])],
    min_blob: usize,
) -> Vec<(String, [usize; 4], usize)> {
    let (h, w) = img.dims();
    let class: Vec<Option<usize>> = (0..h * w)
        .map(|j| names.iter().position(|(_, c)| *c == img.get(j / w, j % w)))
        .collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for j in 0..h * w {
        let Some(cj) = class[j] else { continue };
        for n in [
            (j % w + 1 < w).then(|| j + 1),
            (j / w + 1 < h).then(|| j + w),
        ]
        .into_iter()
        .flatten()
        {
            if class[n] == Some(cj) {
                let (a, b) = (find(&mut parent, j), find(&mut parent, n));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut blobs: std::collections::BTreeMap<usize, (usize, [usize; 4], usize)> =
        Default::default();
    for j in 0..h * w {
        if let Some(c) = class[j] {
            let root = find(&mut parent, j);
            let (r, col) = (j / w, j % w);
            let e = blobs
                .entry(root)
                .or_insert((c, [col, r, col + 1, r + 1], 0));
            e.1 = [
                e.1[0].min(col),
                e.1[1].min(r),
                e.1[2].max(col + 1),
                e.1[3].max(r + 1),
            ];
            e.2 += 1;
        }
    }
    blobs
        .into_iter()
        .filter(|(_, (_, _, n))| *n >= min_blob)
        .map(|(root, (c, b, _))| (names[c].0.clone(), b, root))
        .collect()
}

fn oracle_category(
    img: &RgbImage,
    spec: &CompositionSpec,
    names: &[(String, [f64; 3])],
) -> Category {
    let blobs = oracle_blobs(img, names, 8);
    let mid = img.width() as f64 / 2.0;
    let pick = |left: bool| {
        let mut best: Option<(usize, usize, &String)> = None;
        for (name, b, first) in &blobs {
            let cx = (b[0] + b[2]) as f64 / 2.0;
            if (cx < mid) != left {
                continue;
            }
            let area = (b[2] - b[0]) * (b[3] - b[1]);
            // ties go to the blob found later in raster order
            if best.is_none_or(|(ba, bf, _)| area > ba || (area == ba && *first > bf)) {
                best = Some((area, *first, name));
            }
        }
        best.map(|(_, _, n)| n.clone())
    };
    match (pick(true), pick(false)) {
        (Some(l), Some(r)) if l == spec.left.0 && r == spec.right.0 => Category::Correct,
        (Some(_), Some(_)) => Category::WrongColor,
        _ => Category::MissingObject,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composition_matches_pixel_oracle(seed in any::<u64>()) {
        let v = Vocabulary::toy();
        let palette = color_palette(&v).unwrap();
        let names: Vec<(String, [f64; 3])> = palette.iter().map(|(k, c)| (k.clone(), c.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::filled(24, 32, [0.5; 3]);
        for _ in 0..rng.random_range(0..4) {
            let (x, y) = (rng.random_range(0..28), rng.random_range(0..20));
            let (w, h) = (rng.random_range(1..12), rng.random_range(1..10));
            let c = names[rng.random_range(0..names.len())].1;
            img.fill_rect(x, y, (x + w).min(32), (y + h).min(24), c);
        }
        let pick = |rng: &mut ChaCha8Rng| names[rng.random_range(0..names.len())].0.clone();
        let spec = CompositionSpec {
            left: (pick(&mut rng), "chair".into()),
            right: (pick(&mut rng), "backpack".into()),
        };
        let got = composition_categorize(&img, &spec, &palette, DetectorConfig::default()).unwrap();
        prop_assert_eq!(got, oracle_category(&img, &spec, &names));
    }
}

#[test]
fn concept_words_embed_their_palette_color() {
    let v = Vocabulary::toy();
    for (word, color) in TOY_OBJECT_CONCEPTS {
        let t = tokenize(word, &v).unwrap();
        let row = embed_tokens(&t.content()[..1], &v);
        let code = v.palette()[*color].code();
        assert_eq!(&row.row(0)[..3], &code[..]);
        assert_eq!(embed_tokens(t.tokens(), &v), embed_tokens(t.tokens(), &v));
    }
}
