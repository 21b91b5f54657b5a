use mvt_core::dataset::{decode_pgm, downsample_avg, encode_pgm, preprocess_view, GrayImage, Label};
use mvt_core::metrics::{confusion, derived_metrics, empirical_auc};
use mvt_core::model::{forward_local, predict_logits, ModelConfig, ParamStore, Readout};
use mvt_core::tensor::{matmul, Graph, Tensor, Var};
use mvt_core::training::{evaluate, stratified_folds, PreparedCase};
use mvt_core::transformer::{
    attention_weights, multi_head_attention, scaled_dot_product_attention, transformer_block, AttentionParams,
    BlockParams,
};
use proptest::prelude::*;
use std::path::Path;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn vector(n: usize, range: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-range..range, n).prop_map(move |d| Tensor::new(vec![n], d).unwrap())
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(vec![perm.len(), c], data).unwrap()
}

fn small_cfg(readout: Readout) -> ModelConfig {
    let mut cfg = ModelConfig::toy().with_split(1, 1).with_readout(readout);
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.d_embed = 16;
    cfg.heads = 2;
    cfg
}

fn views(cfg: &ModelConfig) -> impl Strategy<Value = Vec<Tensor>> {
    let s = cfg.image_size;
    let c = cfg.channels;
    prop::collection::vec(prop::collection::vec(0.0..255.0f64, c * s * s), 4)
        .prop_map(move |vs| vs.into_iter().map(|d| Tensor::new(vec![c, s, s], d).unwrap()).collect())
}

fn attention(d: usize, heads: usize) -> impl Strategy<Value = AttentionParams> {
    (matrix(d, d, 0.5), matrix(d, d, 0.5), matrix(d, d, 0.5), matrix(d, d, 0.5))
        .prop_map(move |(q, k, v, o)| AttentionParams::new(q, k, v, o, heads).unwrap())
}

fn block(d: usize, heads: usize) -> impl Strategy<Value = BlockParams> {
    (
        attention(d, heads),
        vector(d, 1.5),
        vector(d, 0.5),
        vector(d, 1.5),
        vector(d, 0.5),
        matrix(d, 2 * d, 0.5),
        vector(2 * d, 0.5),
        matrix(2 * d, d, 0.5),
        vector(d, 0.5),
    )
        .prop_map(|(attention, g1, b1, g2, b2, w1, c1, w2, c2)| BlockParams {
            ln1_gamma: g1,
            ln1_beta: b1,
            attention,
            ln2_gamma: g2,
            ln2_beta: b2,
            mlp_w1: w1,
            mlp_b1: c1,
            mlp_w2: w2,
            mlp_b2: c2,
        })
}

fn run_block(p: &BlockParams, z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let pv = p.map("b", &mut |_, t| g.constant(t.clone()));
    let zv = g.constant(z.clone());
    let out = transformer_block(&mut g, zv, &pv).unwrap();
    g.value(out).clone()
}

fn run_msa(p: &AttentionParams, z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let pv = p.map("a", &mut |_, t| g.constant(t.clone()));
    let zv = g.constant(z.clone());
    let out = multi_head_attention(&mut g, zv, &pv).unwrap();
    g.value(out).clone()
}

fn gray(width: usize, height: usize, depth: u8) -> impl Strategy<Value = GrayImage> {
    let max = ((1u32 << depth) - 1) as u16;
    prop::collection::vec(0..=max, width * height).prop_map(move |px| GrayImage::new(width, height, depth, px).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c, 500.0))) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let y = g.value(s);
        let c = y.shape()[1];
        for row in y.data().chunks(c) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        x in (1usize..6, 2usize..17).prop_flat_map(|(r, c)| matrix(r, c, 10.0)),
    ) {
        let c = x.shape()[1];
        // Skip near-constant rows where eps dominates the variance.
        prop_assume!(x.data().chunks(c).all(|row| {
            let m = row.iter().sum::<f64>() / c as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64 > 1e-2
        }));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[c], 1.0));
        let beta = g.constant(Tensor::zeros(&[c]));
        let y = g.layer_norm_rows(xv, gamma, beta, 1e-6).unwrap();
        for row in g.value(y).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, k, n, p)| (matrix(m, k, 3.0), matrix(k, n, 3.0), matrix(n, p, 3.0))),
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn attention_weights_are_row_stochastic(
        (q, k) in (1usize..8, 1usize..8, 1usize..6).prop_flat_map(|(n, m, d)| (matrix(n, d, 4.0), matrix(m, d, 4.0))),
    ) {
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q), g.constant(k));
        let w = attention_weights(&mut g, qv, kv).unwrap();
        let m = g.shape(w)[1];
        for row in g.value(w).data().chunks(m) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_output_lies_in_value_hull(
        (q, k, v) in (1usize..8, 1usize..8, 1usize..5)
            .prop_flat_map(|(n, m, d)| (matrix(n, d, 3.0), matrix(m, d, 3.0), matrix(m, d, 10.0))),
    ) {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let out = scaled_dot_product_attention(&mut g, qv, kv, vv).unwrap();
        let d = v.shape()[1];
        for j in 0..d {
            let col: Vec<f64> = (0..v.shape()[0]).map(|i| v.at(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
            for i in 0..g.shape(out)[0] {
                let x = g.value(out).at(i, j);
                prop_assert!(lo <= x && x <= hi, "{} outside [{}, {}]", x, lo, hi);
            }
        }
    }

    #[test]
    fn block_preserves_shape(
        (p, z) in (1usize..10, prop::sample::select(vec![(4usize, 1usize), (4, 2), (6, 3), (8, 4)]))
            .prop_flat_map(|(n, (d, h))| (block(d, h), matrix(n, d, 2.0))),
    ) {
        let out = run_block(&p, &z);
        prop_assert_eq!(out.shape(), z.shape());
        prop_assert!(out.is_finite());
    }

    #[test]
    fn msa_is_permutation_equivariant(
        (p, z, perm) in (2usize..9).prop_flat_map(|n| {
            (attention(8, 2), matrix(n, 8, 2.0), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
    ) {
        let out = run_msa(&p, &z);
        let permuted = run_msa(&p, &permute_rows(&z, &perm));
        prop_assert!(permuted.max_abs_diff(&permute_rows(&out, &perm)) <= 1e-9);
    }

    #[test]
    fn block_is_permutation_equivariant(
        (p, z, perm) in (2usize..9).prop_flat_map(|n| {
            (block(8, 2), matrix(n, 8, 2.0), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
    ) {
        let out = run_block(&p, &z);
        let permuted = run_block(&p, &permute_rows(&z, &perm));
        prop_assert!(permuted.max_abs_diff(&permute_rows(&out, &perm)) <= 1e-9);
    }

    #[test]
    fn zero_output_projections_make_the_block_an_identity(
        (mut p, z) in (1usize..8).prop_flat_map(|n| (block(8, 4), matrix(n, 8, 3.0))),
    ) {
        p.attention.w_o = Tensor::zeros(&[8, 8]);
        p.mlp_w2 = Tensor::zeros(&[16, 8]);
        p.mlp_b2 = Tensor::zeros(&[8]);
        prop_assert_eq!(run_block(&p, &z), z);
    }
}

// Analytic gradients against central differences on small random composites
// of every differentiable op.
fn composite(g: &mut Graph, x: &[Var]) -> Var {
    let (inp, w, gamma, beta, bias, c) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let h = g.layer_norm_rows(inp, gamma, beta, 1e-6).unwrap();
    let h = g.matmul(h, w).unwrap();
    let h = g.add_row_bias(h, bias).unwrap();
    let h = g.gelu(h);
    let left = g.slice_cols(h, 0, 2).unwrap();
    let right = g.slice_cols(h, 2, 2).unwrap();
    let h = g.concat_cols(&[right, left]).unwrap();
    let s = g.softmax_rows(h).unwrap();
    let t = g.matmul_t(s, c).unwrap();
    let t = g.scale(t, 0.7);
    let m = g.mean_rows(t).unwrap();
    let top = g.rows(t, 0, 1).unwrap();
    let both = g.concat_rows(&[m, top]).unwrap();
    let prod = g.mul(both, both).unwrap();
    let summed = g.add(prod, both).unwrap();
    let flat = g.reshape(summed, &[2 * g.shape(summed)[1]]).unwrap();
    let xe = g.cross_entropy(flat, 1).unwrap();
    let total = g.sum(prod);
    g.add(xe, total).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composite_gradients_match_central_differences(
        params in (matrix(3, 5, 2.0), matrix(5, 4, 1.0), vector(5, 1.5), vector(5, 0.5), vector(4, 0.5), matrix(3, 4, 1.0)),
    ) {
        let (a, b, c, d, e, f) = params;
        let mut tensors = vec![a, b, c, d, e, f];
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = composite(&mut g, &vars);
        g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let loss = composite(&mut g, &vars);
            g.value(loss).data()[0]
        };
        let eps = 1e-5;
        for t in 0..tensors.len() {
            for i in 0..tensors[t].numel() {
                let orig = tensors[t].data()[i];
                tensors[t].data_mut()[i] = orig + eps;
                let plus = eval(&tensors);
                tensors[t].data_mut()[i] = orig - eps;
                let minus = eval(&tensors);
                tensors[t].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[t].data()[i];
                prop_assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                    "tensor {} element {}: analytic {} numeric {}", t, i, a, numeric
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn local_stage_commutes_with_view_swaps(
        seed in any::<u64>(),
        vs in views(&small_cfg(Readout::FirstClassToken)),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let cfg = small_cfg(Readout::FirstClassToken);
        let params = ParamStore::init(&cfg, seed).unwrap();
        let run = |vs: &[Tensor]| {
            let mut g = Graph::new();
            let p = params.register(&mut g, false);
            let out = forward_local(&mut g, vs, &p, &cfg).unwrap();
            out.iter().map(|&s| g.value(s).clone()).collect::<Vec<_>>()
        };
        let base = run(&vs);
        let swapped: Vec<Tensor> = perm.iter().map(|&i| vs[i].clone()).collect();
        let out = run(&swapped);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&out[k], &base[i]);
        }
    }

    #[test]
    fn mean_readout_ignores_view_order(
        seed in any::<u64>(),
        vs in views(&small_cfg(Readout::MeanClassTokens)),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let cfg = small_cfg(Readout::MeanClassTokens);
        let params = ParamStore::init(&cfg, seed).unwrap();
        let a = predict_logits(&params, &cfg, &vs).unwrap();
        let swapped: Vec<Tensor> = perm.iter().map(|&i| vs[i].clone()).collect();
        let b = predict_logits(&params, &cfg, &swapped).unwrap();
        prop_assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
    }

    #[test]
    fn first_readout_ignores_order_of_the_other_views(
        seed in any::<u64>(),
        vs in views(&small_cfg(Readout::FirstClassToken)),
        rest in Just(vec![1usize, 2, 3]).prop_shuffle(),
    ) {
        let cfg = small_cfg(Readout::FirstClassToken);
        let params = ParamStore::init(&cfg, seed).unwrap();
        let a = predict_logits(&params, &cfg, &vs).unwrap();
        let mut swapped = vec![vs[0].clone()];
        swapped.extend(rest.iter().map(|&i| vs[i].clone()));
        let b = predict_logits(&params, &cfg, &swapped).unwrap();
        prop_assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
    }

    #[test]
    fn predictions_follow_the_half_threshold(
        seed in any::<u64>(),
        cases in prop::collection::vec((views(&small_cfg(Readout::FirstClassToken)), any::<bool>()), 1..5),
    ) {
        let cfg = small_cfg(Readout::FirstClassToken);
        let params = ParamStore::init(&cfg, seed).unwrap();
        let prepared: Vec<PreparedCase> = cases
            .into_iter()
            .enumerate()
            .map(|(i, (views, m))| PreparedCase {
                case_id: format!("c{i}"),
                views,
                label: if m { Label::Malignant } else { Label::Benign },
            })
            .collect();
        for p in evaluate(&params, &cfg, &prepared).unwrap() {
            prop_assert!((0.0..=1.0).contains(&p.score));
            prop_assert_eq!(p.pred == 1, p.score > 0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocess_stays_in_range_and_keeps_order(
        (img, depth) in (1usize..40, 1usize..40, prop::sample::select(vec![8u8, 12, 16]))
            .prop_flat_map(|(w, h, d)| (gray(w, h, d), Just(d))),
        bump in any::<prop::sample::Index>(),
    ) {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 16;
        let out = preprocess_view(&img, &cfg).unwrap();
        prop_assert_eq!(out.shape(), &[1, 16, 16]);
        prop_assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));

        // Brightening one pixel never darkens any output pixel.
        let mut px = img.pixels().to_vec();
        let i = bump.index(px.len());
        let max = ((1u32 << depth) - 1) as u16;
        px[i] = max;
        let brighter = GrayImage::new(img.width(), img.height(), depth, px).unwrap();
        let out2 = preprocess_view(&brighter, &cfg).unwrap();
        prop_assert!(out.data().iter().zip(out2.data()).all(|(a, b)| b >= a));
    }

    #[test]
    fn downsampling_a_constant_image_is_constant(
        w in 1usize..30, h in 1usize..30, k in 1usize..8, v in 0u16..=255,
    ) {
        let img = GrayImage::new(w, h, 8, vec![v; w * h]).unwrap();
        let out = downsample_avg(&img, k).unwrap();
        prop_assert_eq!((out.width(), out.height()), (w.div_ceil(k), h.div_ceil(k)));
        prop_assert!(out.pixels().iter().all(|&p| p == v));
    }

    #[test]
    fn pgm_round_trips(img in (1usize..20, 1usize..20, 1u8..=16).prop_flat_map(|(w, h, d)| gray(w, h, d))) {
        let back = decode_pgm(&encode_pgm(&img), Path::new("mem.pgm")).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn accuracy_is_the_share_of_agreements(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..60),
    ) {
        let (pred, label): (Vec<u8>, Vec<u8>) = pairs.iter().cloned().unzip();
        let cm = confusion(&pred, &label).unwrap();
        prop_assert_eq!(cm.total(), pairs.len());
        let agree = pairs.iter().filter(|(p, l)| p == l).count();
        prop_assert_eq!(derived_metrics(&cm).accuracy, Some(agree as f64 / pairs.len() as f64));
        prop_assert_eq!(cm.tm + cm.tn, agree);
    }

    #[test]
    fn auc_matches_pairwise_count(
        cases in prop::collection::vec((0u8..6, any::<bool>()), 2..50),
    ) {
        let scores: Vec<f64> = cases.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<u8> = cases.iter().map(|(_, m)| u8::from(*m)).collect();
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
        prop_assume!(!pos.is_empty() && !neg.is_empty());
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (pos.len() * neg.len()) as f64;
        let got = empirical_auc(&scores, &labels).unwrap();
        prop_assert_eq!(got, want);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((empirical_auc(&flipped, &labels).unwrap() - (1.0 - want)).abs() < 1e-12);
    }

    #[test]
    fn stratified_folds_partition_and_balance(
        labels in prop::collection::vec(any::<bool>(), 10..80),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<Label> = labels.into_iter().map(|m| if m { Label::Malignant } else { Label::Benign }).collect();
        let n_pos = labels.iter().filter(|&&l| l == Label::Malignant).count();
        prop_assume!(n_pos >= k && labels.len() - n_pos >= k);
        let folds = stratified_folds(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().cloned().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        let pos: Vec<usize> = folds
            .iter()
            .map(|f| f.iter().filter(|&&i| labels[i] == Label::Malignant).count())
            .collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, stratified_folds(&labels, k, seed).unwrap());
    }
}
