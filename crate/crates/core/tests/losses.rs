use std::f64::consts::E;

use sparc_core::encoder::RawEmbeddings;
use sparc_core::losses::{
    alignment, compute_alignment, compute_loss, cross_attention, fine_grained_contrastive,
    global_contrastive, group_patches, sinkhorn_knopp, AlignmentMode, AttentionParams, LossConfig,
    LossParams, Objective, Threshold,
};
use sparc_core::CoreError;
use sparc_tensor::{Graph, Tensor};

fn fixed_cfg(objective: Objective) -> LossConfig {
    LossConfig {
        objective,
        learnable_temperature: false,
        temperature: 1.0,
        ..LossConfig::default()
    }
}

fn eval(raw: &RawEmbeddings, cfg: &LossConfig) -> (f64, std::collections::BTreeMap<String, f64>) {
    let mut g = Graph::new();
    let e = raw.bind(&mut g, false).unwrap();
    let lp = LossParams::fixed(&mut g, cfg.temperature);
    let out = compute_loss(&mut g, &e, &lp, cfg).unwrap();
    (out.value(&g), out.components)
}

/// Brute-force min-max / threshold / renormalize on one row.
fn alignment_oracle(row: &[f64], sigma: f64) -> Vec<f64> {
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = row.iter().map(|s| (s - lo) / (hi - lo)).collect();
    let kept: Vec<f64> = norm
        .iter()
        .map(|&s| if s < sigma { 0.0 } else { s })
        .collect();
    let total: f64 = kept.iter().sum();
    kept.iter().map(|s| s / total).collect()
}

#[test]
fn global_contrastive_orthonormal_pair() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::identity(2));
    let inv = g.scalar(1.0);
    let loss = global_contrastive(&mut g, x, x, inv).unwrap();
    let expected = -(E / (E + 1.0)).ln();
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
    assert!((expected - 0.3133).abs() < 1e-4);
}

#[test]
fn global_contrastive_equal_cosines_is_log_b() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(vec![2, 3]));
    let inv = g.scalar(1.0 / 0.07);
    let loss = global_contrastive(&mut g, x, x, inv).unwrap();
    assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn global_contrastive_decreases_with_matched_similarity() {
    let loss_at = |angle: f64| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let t = g.constant(
            Tensor::from_rows(&[vec![angle.cos(), angle.sin()], vec![-0.3, 1.0]]).unwrap(),
        );
        let inv = g.scalar(2.0);
        let l = global_contrastive(&mut g, v, t, inv).unwrap();
        g.value(l).item()
    };
    assert!(loss_at(0.1) < loss_at(0.5));
    assert!(loss_at(0.5) < loss_at(1.0));
}

#[test]
fn global_contrastive_needs_two_pairs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(vec![1, 3]));
    let inv = g.scalar(1.0);
    assert!(matches!(
        global_contrastive(&mut g, x, x, inv),
        Err(CoreError::TooFewPairs { .. })
    ));
}

#[test]
fn alignment_of_increasing_row() {
    let t = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let v = Tensor::from_rows(&[vec![0.2], vec![0.5], vec![0.8]]).unwrap();
    let al = compute_alignment(&t, &v, 1.0 / 3.0, AlignmentMode::SparseMinmax).unwrap();
    let expect_hat = [0.0, 0.5, 1.0];
    for (x, y) in al.s_hat.data().iter().zip(expect_hat) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(al.s_tilde, al.s_hat);
    let oracle = alignment_oracle(&[0.2, 0.5, 0.8], 1.0 / 3.0);
    for ((x, y), z) in
        al.a.data()
            .iter()
            .zip(&oracle)
            .zip([0.0, 1.0 / 3.0, 2.0 / 3.0])
    {
        assert!((x - y).abs() < 1e-12);
        assert!((x - z).abs() < 1e-12);
    }
}

#[test]
fn alignment_matches_oracle_on_random_rows() {
    let raw = RawEmbeddings::random(1, 5, 7, 4, &[5], 3);
    let t = raw.t.index_first(0);
    let v = raw.v.index_first(0);
    let sigma = 1.0 / 7.0;
    let al = compute_alignment(&t, &v, sigma, AlignmentMode::SparseMinmax).unwrap();
    for r in 0..5 {
        let oracle = alignment_oracle(al.s.row(r), sigma);
        for (x, y) in al.a.row(r).iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((al.a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // the row maximum always survives
        let best =
            al.s.row(r)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
        let j = al.s.row(r).iter().position(|&x| x == best).unwrap();
        assert!(al.a.row(r)[j] > 0.0);
    }
}

#[test]
fn constant_similarity_row_falls_back_to_uniform() {
    let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let v = Tensor::from_rows(&[vec![0.3, 1.0], vec![0.9, -1.0], vec![0.1, 2.0]]).unwrap();
    let al = compute_alignment(&t, &v, 1.0 / 3.0, AlignmentMode::SparseMinmax).unwrap();
    assert_eq!(al.s_hat.row(0), &[0.0, 0.0, 0.0]);
    assert_eq!(al.a.row(0), &[1.0 / 3.0; 3]);
    assert!((al.a.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_mode_on_zero_row_is_uniform() {
    let t = Tensor::from_rows(&[vec![0.0]]).unwrap();
    let v = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let al = compute_alignment(&t, &v, 0.5, AlignmentMode::Softmax).unwrap();
    for &x in al.a.data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(al.s_hat, al.a);
}

#[test]
fn threshold_rows_are_decoupled() {
    let raw = RawEmbeddings::random(1, 4, 6, 3, &[4], 8);
    let t = raw.t.index_first(0);
    let v = raw.v.index_first(0);
    let base = compute_alignment(&t, &v, 1.0 / 6.0, AlignmentMode::SparseMinmax).unwrap();
    let mut edited = t.clone();
    for c in 0..3 {
        edited.set(&[2, c], edited.get(&[2, c]) * -3.0 + 0.7);
    }
    let after = compute_alignment(&edited, &v, 1.0 / 6.0, AlignmentMode::SparseMinmax).unwrap();
    for r in [0, 1, 3] {
        assert_eq!(base.a.row(r), after.a.row(r));
    }
}

#[test]
fn tied_patches_share_weight_but_softmax_concentrates() {
    // one token, four patches: patches 1 and 2 tie at the maximum
    let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let v = Tensor::from_rows(&[
        vec![0.1, 1.0],
        vec![1.0, 0.0],
        vec![1.0, 0.5],
        vec![-0.4, 0.0],
    ])
    .unwrap();
    let al = compute_alignment(&t, &v, 0.25, AlignmentMode::SparseMinmax).unwrap();
    // patch 0 (normalized 5/14) also survives the threshold; the two tied
    // patches get equal, largest weight
    assert_eq!(al.a.row(0)[1], al.a.row(0)[2]);
    let exact = compute_alignment(
        &t,
        &Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.5],
            vec![0.0, 0.0],
        ])
        .unwrap(),
        0.25,
        AlignmentMode::SparseMinmax,
    )
    .unwrap();
    assert_eq!(exact.a.row(0), &[0.0, 0.5, 0.5, 0.0]);

    // softmax over growing logits: a small gap between the two best patches
    // turns into winner-takes-all
    let entropy = |row: &[f64]| {
        -row.iter()
            .filter(|&&a| a > 0.0)
            .map(|a| a * a.ln())
            .sum::<f64>()
    };
    let mut last = f64::INFINITY;
    for scale in [1.0, 4.0, 16.0, 64.0, 256.0] {
        let ts = Tensor::from_rows(&[vec![scale, 0.0]]).unwrap();
        let vs = Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.95, 0.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let sm = compute_alignment(&ts, &vs, 0.25, AlignmentMode::Softmax).unwrap();
        let h = entropy(sm.a.row(0));
        assert!(h < last);
        last = h;
    }
    assert!(last < 0.1);
}

#[test]
fn grouping_selects_and_matches_matmul() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
    let v =
        g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let c = group_patches(&mut g, a, v).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let am = RawEmbeddings::random(1, 1, 3, 4, &[1], 4).v.index_first(0);
    let vm = RawEmbeddings::random(1, 1, 4, 2, &[1], 5).v.index_first(0);
    let av = g.constant(am.clone());
    let vv = g.constant(vm.clone());
    let c = group_patches(&mut g, av, vv).unwrap();
    for l in 0..3 {
        for k in 0..2 {
            let expect: f64 = (0..4).map(|r| am.get(&[l, r]) * vm.get(&[r, k])).sum();
            assert!((g.value(c).get(&[l, k]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_weights_over_equal_patches_return_the_patch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::full(vec![2, 4], 0.25));
    let u = [0.3, -1.2, 2.0];
    let v = g.constant(Tensor::from_rows(&vec![u.to_vec(); 4]).unwrap());
    let c = group_patches(&mut g, a, v).unwrap();
    for l in 0..2 {
        for k in 0..3 {
            assert!((g.value(c).get(&[l, k]) - u[k]).abs() < 1e-15);
        }
    }
}

#[test]
fn fine_grained_orthonormal_and_identical() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let inv = g.scalar(1.0);
    let (loss, _) = fine_grained_contrastive(&mut g, x, x, &[2], inv).unwrap();
    assert!((g.value(loss).item() + (E / (E + 1.0)).ln()).abs() < 1e-12);

    // identical grouped embeddings: the softmax over them is uniform; with
    // identical tokens too, both directions give log L
    let c = g.constant(Tensor::full(vec![1, 3, 2], 0.5));
    let t = g.constant(Tensor::new(vec![1, 3, 2], vec![0.3, -0.2, 0.3, -0.2, 0.3, -0.2]).unwrap());
    let (loss, _) = fine_grained_contrastive(&mut g, c, t, &[3], inv).unwrap();
    assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn fine_grained_ignores_padding() {
    let raw = RawEmbeddings::random(3, 4, 5, 6, &[2, 4, 3], 9);
    let c = raw.t.map(|x| 0.5 * x + 0.1);
    let run = |c: &Tensor, t: &Tensor| {
        let mut g = Graph::new();
        let c = g.constant(c.clone());
        let t = g.constant(t.clone());
        let inv = g.scalar(1.0 / 0.07);
        let (loss, _) = fine_grained_contrastive(&mut g, c, t, &raw.lengths, inv).unwrap();
        g.value(loss).item()
    };
    let pad = |x: &Tensor, fill: f64| {
        let mut data = Vec::new();
        for i in 0..3 {
            data.extend_from_slice(x.index_first(i).data());
            data.extend(std::iter::repeat(fill).take(2 * 6));
        }
        Tensor::new(vec![3, 6, 6], data).unwrap()
    };
    let base = run(&c, &raw.t);
    let longer = run(&pad(&c, 9.0), &pad(&raw.t, -4.0));
    assert!((base - longer).abs() < 1e-12);
}

#[test]
fn sparc_without_fine_grained_term_is_clip() {
    let raw = RawEmbeddings::random(4, 3, 5, 6, &[3, 2, 3, 1], 11);
    let (clip, _) = eval(&raw, &fixed_cfg(Objective::Clip));
    let mut cfg = fixed_cfg(Objective::Sparc);
    cfg.lambda_f = 0.0;
    cfg.lambda_g = 1.0;
    let (sparc, _) = eval(&raw, &cfg);
    assert!((sparc - clip).abs() <= 1e-12);
    cfg.lambda_g = 0.5;
    let (half, _) = eval(&raw, &cfg);
    assert!((half - 0.5 * clip).abs() <= 1e-12);
}

#[test]
fn sparc_total_is_weighted_sum_of_components() {
    let raw = RawEmbeddings::random(3, 4, 5, 6, &[4, 2, 3], 12);
    let mut cfg = fixed_cfg(Objective::Sparc);
    cfg.lambda_g = 0.5;
    cfg.lambda_f = 1.0;
    let (total, parts) = eval(&raw, &cfg);
    assert!((total - (0.5 * parts["global"] + parts["fine_grained"])).abs() < 1e-12);
}

#[test]
fn no_sparsity_equals_zero_threshold() {
    let raw = RawEmbeddings::random(3, 4, 5, 6, &[4, 2, 3], 13);
    let (a, _) = eval(&raw, &fixed_cfg(Objective::SparcNoSparsity));
    let mut cfg = fixed_cfg(Objective::Sparc);
    cfg.sparsity_threshold = Threshold::Value(0.0);
    let (b, _) = eval(&raw, &cfg);
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn fine_grained_term_is_local_to_each_pair() {
    let raw = RawEmbeddings::random(4, 4, 5, 6, &[4, 2, 3, 3], 14);
    let terms = |r: &RawEmbeddings| {
        let mut g = Graph::new();
        let e = r.bind(&mut g, false).unwrap();
        let inv = g.scalar(1.0 / 0.07);
        let mut out = Vec::new();
        for i in 0..r.batch_size() {
            let t = e.tokens(&mut g, i).unwrap();
            let v = e.patches(&mut g, i).unwrap();
            let al = alignment(&mut g, t, v, 0.2, AlignmentMode::SparseMinmax).unwrap();
            let c = group_patches(&mut g, al.a, v).unwrap();
            let term = sparc_core::losses::fine_grained_pair(&mut g, c, t, inv).unwrap();
            out.push(g.value(term).item());
        }
        out
    };
    let full = terms(&raw);
    let alone = terms(&raw.subset(&[2]));
    assert_eq!(full[2].to_bits(), alone[0].to_bits());

    // perturbing another pair's patches leaves pair 2's term untouched
    let mut edited = raw.clone();
    for x in &mut edited.v.data_mut()[..5 * 6] {
        *x *= -1.7;
    }
    let after = terms(&edited);
    assert_eq!(after[2].to_bits(), full[2].to_bits());
    assert_ne!(after[0].to_bits(), full[0].to_bits());
}

#[test]
fn contrastive_losses_ignore_embedding_scale() {
    let raw = RawEmbeddings::random(3, 4, 5, 6, &[4, 3, 2], 15);
    let mut scaled = raw.clone();
    for t in [
        &mut scaled.v,
        &mut scaled.t,
        &mut scaled.v_bar,
        &mut scaled.t_bar,
    ] {
        *t = t.map(|x| x * 7.3);
    }
    for objective in [Objective::Clip, Objective::Sparc] {
        let cfg = LossConfig {
            temperature: 0.07,
            ..fixed_cfg(objective)
        };
        let (a, pa) = eval(&raw, &cfg);
        let (b, pb) = eval(&scaled, &cfg);
        assert!((pa["global"] - pb["global"]).abs() < 1e-9);
        if objective == Objective::Sparc {
            // min-max normalization also removes the raw-similarity scale
            assert!((pa["fine_grained"] - pb["fine_grained"]).abs() < 1e-9);
        }
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn filip_matched_tokens_give_unit_logits() {
    // image 0's patches coincide with text 0's tokens, image 1 with text 1's,
    // and the two sets are orthogonal
    let tau = 0.5;
    let v = Tensor::new(
        vec![2, 2, 4],
        vec![
            1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.,
        ],
    )
    .unwrap();
    let raw = RawEmbeddings {
        t: v.clone(),
        v,
        v_bar: Tensor::ones(vec![2, 4]),
        t_bar: Tensor::ones(vec![2, 4]),
        lengths: vec![2, 2],
    };
    let cfg = LossConfig {
        filip_token_drop: 0.0,
        temperature: tau,
        ..fixed_cfg(Objective::Filip)
    };
    let (loss, _) = eval(&raw, &cfg);
    let m = (1.0f64 / tau).exp();
    let expected = -(m / (m + 1.0)).ln();
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn filip_single_token_reduces_to_best_patch() {
    let raw = RawEmbeddings::random(3, 1, 4, 5, &[1, 1, 1], 16);
    let cfg = LossConfig {
        filip_token_drop: 0.0,
        ..fixed_cfg(Objective::Filip)
    };
    let (loss, _) = eval(&raw, &cfg);
    // text side: max over patches; image side: mean over patches of the
    // single token's cosine
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut text = [[0.0; 3]; 3];
    let mut image = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let tok = raw.t.index_first(j).data().to_vec();
            let sims: Vec<f64> = (0..4)
                .map(|p| cos(raw.v.index_first(i).index_first(p).data(), &tok))
                .collect();
            text[i][j] = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            image[i][j] = sims.iter().sum::<f64>() / 4.0;
        }
    }
    let lse = |xs: [f64; 3]| xs.iter().map(|x| x.exp()).sum::<f64>().ln();
    let mut expected = 0.0;
    for i in 0..3 {
        expected -= image[i][i] - lse(image[i]);
        expected -= text[i][i] - lse([text[0][i], text[1][i], text[2][i]]);
    }
    expected /= 6.0;
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn filip_token_drop_is_seeded() {
    let raw = RawEmbeddings::random(3, 5, 4, 5, &[5, 5, 5], 17);
    let cfg = fixed_cfg(Objective::Filip);
    assert_eq!(eval(&raw, &cfg).0.to_bits(), eval(&raw, &cfg).0.to_bits());
    let mut other = cfg.clone();
    other.seed = 99;
    assert_ne!(eval(&raw, &cfg).0, eval(&raw, &other).0);
}

#[test]
fn pacl_identical_patches_pool_to_that_patch() {
    let mut raw = RawEmbeddings::random(2, 2, 3, 4, &[2, 2], 18);
    // every patch of image 0 equals its first patch
    let first = raw.v.index_first(0).index_first(0);
    for p in 0..3 {
        for k in 0..4 {
            raw.v.set(&[0, p, k], first.data()[k]);
        }
    }
    let (loss, _) = eval(&raw, &fixed_cfg(Objective::Pacl));
    // same loss as PACL with a single patch per image
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
            * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let logit = |i: usize, j: usize| {
        let tb = raw.t_bar.index_first(j);
        if i == 0 {
            return cos(first.data(), tb.data());
        }
        let vi = raw.v.index_first(1);
        let w: Vec<f64> = (0..3)
            .map(|p| cos(vi.index_first(p).data(), tb.data()).exp())
            .collect();
        let z: f64 = w.iter().sum();
        let pooled: Vec<f64> = (0..4)
            .map(|k| (0..3).map(|p| w[p] / z * vi.get(&[p, k])).sum())
            .collect();
        cos(&pooled, tb.data())
    };
    let l = [[logit(0, 0), logit(0, 1)], [logit(1, 0), logit(1, 1)]];
    let lse2 = |a: f64, b: f64| (a.exp() + b.exp()).ln();
    let expected = -(l[0][0] - lse2(l[0][0], l[0][1]) + l[1][1] - lse2(l[1][0], l[1][1]) + l[0][0]
        - lse2(l[0][0], l[1][0])
        + l[1][1]
        - lse2(l[0][1], l[1][1]))
        / 4.0;
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn gloria_scaling_prevents_saturated_attention() {
    let raw = RawEmbeddings::random(2, 3, 6, 16, &[3, 3], 19);
    let mut big = raw.clone();
    for t in [&mut big.v, &mut big.t] {
        *t = t.map(|x| x * 8.0);
    }
    let entropy = |scale: bool| {
        let cfg = LossConfig {
            gloria_scale: scale,
            ..fixed_cfg(Objective::Gloria)
        };
        let mut g = Graph::new();
        let e = big.bind(&mut g, false).unwrap();
        let lp = LossParams::fixed(&mut g, 1.0);
        let out = compute_loss(&mut g, &e, &lp, &cfg).unwrap();
        out.diagnostics["attention_entropy"]
    };
    assert!(entropy(false) < 0.01);
    assert!(entropy(true) > 0.01);
}

#[test]
fn gloria_selection_limit() {
    // token 0 of each text equals one patch of its own image; others orthogonal
    let d = 4;
    let mut v = Tensor::zeros(vec![2, 2, d]);
    v.set(&[0, 0, 0], 30.0);
    v.set(&[0, 1, 1], 30.0);
    v.set(&[1, 0, 2], 30.0);
    v.set(&[1, 1, 3], 30.0);
    let mut t = Tensor::zeros(vec![2, 1, d]);
    t.set(&[0, 0, 0], 30.0);
    t.set(&[1, 0, 2], 30.0);
    let raw = RawEmbeddings {
        v,
        t,
        v_bar: Tensor::ones(vec![2, d]),
        t_bar: Tensor::ones(vec![2, d]),
        lengths: vec![1, 1],
    };
    let mut g = Graph::new();
    let e = raw.bind(&mut g, false).unwrap();
    let lp = LossParams::fixed(&mut g, 1.0);
    let out = compute_loss(&mut g, &e, &lp, &fixed_cfg(Objective::Gloria)).unwrap();
    // matched local logits 1, mismatched: context is a mix of orthogonal patches
    let local = out.components["local"];
    let m = E;
    assert!((local + (m / (m + 1.0)).ln()).abs() < 1e-6);
}

#[test]
fn cross_attention_selects_matching_patch() {
    let mut g = Graph::new();
    let eye = |g: &mut Graph| g.constant(Tensor::identity(3));
    let w = AttentionParams {
        wq: eye(&mut g),
        wk: eye(&mut g),
        wv: eye(&mut g),
        wo: eye(&mut g),
    };
    let token = g.constant(Tensor::from_rows(&[vec![0.0, 40.0, 0.0]]).unwrap());
    let patches = g.constant(
        Tensor::from_rows(&[
            vec![40.0, 0.0, 0.0],
            vec![0.0, 40.0, 0.0],
            vec![0.0, 0.0, 40.0],
        ])
        .unwrap(),
    );
    let ctx = cross_attention(&mut g, token, patches, &w).unwrap();
    let c = g.value(ctx);
    assert!((c.data()[1] - 40.0).abs() < 1e-6);
    assert!(c.data()[0].abs() < 1e-6 && c.data()[2].abs() < 1e-6);
}

#[test]
fn sinkhorn_examples() {
    let q = sinkhorn_knopp(&Tensor::zeros(vec![2, 2]), 0.05, 3).unwrap();
    assert_eq!(q.data(), &[0.5; 4]);

    // direct iteration on a random 3x2 input
    let scores = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.9, 0.1], vec![-0.4, 0.25]]).unwrap();
    let q = sinkhorn_knopp(&scores, 0.5, 3).unwrap();
    for r in 0..3 {
        assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut m: Vec<f64> = scores
        .data()
        .iter()
        .map(|s| ((s - 0.9) / 0.5).exp())
        .collect();
    for _ in 0..3 {
        for c in 0..2 {
            let s = m[c] + m[2 + c] + m[4 + c];
            for r in 0..3 {
                m[r * 2 + c] *= 1.5 / s;
            }
        }
        for r in 0..3 {
            let s = m[r * 2] + m[r * 2 + 1];
            m[r * 2] /= s;
            m[r * 2 + 1] /= s;
        }
    }
    for (a, b) in q.data().iter().zip(&m) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn sinkhorn_balances_columns() {
    let raw = RawEmbeddings::random(8, 1, 1, 4, &[1; 8], 20);
    let scores = raw.v_bar.map(|x| 0.1 * x.tanh());
    let q = sinkhorn_knopp(&scores, 0.05, 3).unwrap();
    for r in 0..8 {
        assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for c in 0..4 {
        let col: f64 = (0..8).map(|r| q.get(&[r, c])).sum();
        assert!((col - 2.0).abs() < 5e-2, "column {c} sums to {col}");
    }
}

#[test]
fn one_token_pairs_contribute_zero() {
    let raw = RawEmbeddings::random(2, 3, 4, 5, &[1, 1], 21);
    let (_, parts) = eval(&raw, &fixed_cfg(Objective::Sparc));
    assert_eq!(parts["fine_grained"], 0.0);
}

#[test]
fn unknown_objective_name_is_rejected() {
    assert!("sparcc".parse::<Objective>().is_err());
    for o in Objective::ALL {
        assert_eq!(o.name().parse::<Objective>().unwrap(), o);
    }
}
