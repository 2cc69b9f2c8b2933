use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rat_core::attention::{
    attention, attention_sublayer, gathered_region_attention, mh_masked_attention, rmsa_layer,
    wmsa_attention_sublayer, wmsa_layer, wmsa_layer_via_partition, AttnParams, ScaleMode,
    TransformerLayerParams,
};
use rat_core::gradcheck::{check_params, sample_coords, FD_EPS};
use rat_core::params::{ParamId, ParamStore};
use rat_core::region::AttentionBias;
use rat_core::{Graph, Real, Tensor};

fn randomize_biases<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") || store.name(id).ends_with(".shift") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::rand_uniform(&shape, -0.3, 0.3, rng);
        }
    }
}

fn attn_setup<T: Real>(c: usize, heads: usize, seed: u64) -> (ParamStore<T>, AttnParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = AttnParams::init(&mut store, "attn", c, heads, ScaleMode::HeadDim, &mut rng).unwrap();
    randomize_biases(&mut store, &mut rng);
    (store, p)
}

fn layer_setup<T: Real>(
    c: usize,
    heads: usize,
    seed: u64,
) -> (ParamStore<T>, TransformerLayerParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lp = TransformerLayerParams::init(
        &mut store,
        "layer",
        c,
        heads,
        4,
        ScaleMode::HeadDim,
        &mut rng,
    )
    .unwrap();
    randomize_biases(&mut store, &mut rng);
    (store, lp)
}

fn random_labels(n: usize, regions: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..regions)).collect()
}

fn linear_ref(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>())
        .collect()
}

#[test]
fn single_pixel_attention_is_value_then_output_projection() {
    let (store, p) = attn_setup::<f64>(8, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::rand_uniform(&[1, 8], -1.0, 1.0, &mut rng);
    let y = mh_masked_attention(&x, None, &store, &p).unwrap();
    let v = linear_ref(x.data(), store.get(p.wv), store.get(p.bv));
    let expected = linear_ref(&v, store.get(p.wo), store.get(p.bo));
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_head_without_bias_is_scaled_dot_product_attention() {
    let (store, p) = attn_setup::<f64>(6, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5;
    let x = Tensor::<f64>::rand_uniform(&[n, 6], -1.0, 1.0, &mut rng);
    let y = mh_masked_attention(&x, None, &store, &p).unwrap();

    // direct formula
    let rows: Vec<&[f64]> = x.data().chunks(6).collect();
    let q: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| linear_ref(r, store.get(p.wq), store.get(p.bq)))
        .collect();
    let k: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| linear_ref(r, store.get(p.wk), store.get(p.bk)))
        .collect();
    let v: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| linear_ref(r, store.get(p.wv), store.get(p.bv)))
        .collect();
    let mut oracle = Vec::new();
    for qi in &q {
        let s: Vec<f64> = (0..n)
            .map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 6f64.sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let o: Vec<f64> = (0..6)
            .map(|c| (0..n).map(|j| s[j].exp() / z * v[j][c]).sum())
            .collect();
        oracle.extend(linear_ref(&o, store.get(p.wo), store.get(p.bo)));
    }
    let oracle = Tensor::new(&[n, 6], oracle).unwrap();
    assert!(y.rel_inf_diff(&oracle, 1e-12).unwrap() < 1e-6);
}

#[test]
fn region_rows_ignore_other_regions() {
    let (store, p) = attn_setup::<f64>(8, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 20;
    let labels: Vec<u32> = (0..n).map(|i| (i % 3 == 0) as u32).collect();
    let bias = AttentionBias::new(labels.clone(), -1000.0);
    let x = Tensor::<f64>::rand_uniform(&[n, 8], -1.0, 1.0, &mut rng);
    let mut x2 = x.clone();
    for (i, &l) in labels.iter().enumerate() {
        if l == 1 {
            for c in 0..8 {
                x2.data_mut()[i * 8 + c] = rng.gen_range(-50.0..50.0);
            }
        }
    }
    let a = mh_masked_attention(&x, Some(&bias), &store, &p).unwrap();
    let b = mh_masked_attention(&x2, Some(&bias), &store, &p).unwrap();
    for i in (0..n).filter(|&i| labels[i] == 0) {
        for c in 0..8 {
            let (u, v) = (a.data()[i * 8 + c], b.data()[i * 8 + c]);
            assert!((u - v).abs() <= 1e-5 * u.abs().max(1e-3), "row {i}");
        }
    }
}

#[test]
fn gathered_single_region_matches_unmasked() {
    let (store, p) = attn_setup::<f64>(8, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::rand_uniform(&[17, 8], -1.0, 1.0, &mut rng);
    let g = gathered_region_attention(&x, &[0; 17], &store, &p).unwrap();
    let zero_bias = AttentionBias::new(vec![0; 17], -1000.0);
    let m = mh_masked_attention(&x, Some(&zero_bias), &store, &p).unwrap();
    let unmasked = mh_masked_attention(&x, None, &store, &p).unwrap();
    assert_eq!(m, unmasked);
    assert!(g.rel_inf_diff(&m, 1e-12).unwrap() < 1e-12);
}

#[test]
fn gathered_matches_masked_on_random_partitions() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(1..=64);
        let regions = rng.gen_range(1..=5);
        let (store, p) = attn_setup::<f32>(16, 4, seed);
        let x = Tensor::<f32>::rand_uniform(&[n, 16], -1.0, 1.0, &mut rng);
        let labels = random_labels(n, regions, &mut rng);
        let masked = mh_masked_attention(
            &x,
            Some(&AttentionBias::new(labels.clone(), -1000.0)),
            &store,
            &p,
        )
        .unwrap();
        let gathered = gathered_region_attention(&x, &labels, &store, &p).unwrap();
        let rel = masked.rel_inf_diff(&gathered, 1e-12).unwrap();
        assert!(rel <= 1e-5, "seed {seed}: {rel:e}");
    }
}

#[test]
fn permutation_equivariance() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let n = 40;
        let (store, p) = attn_setup::<f32>(8, 2, seed);
        let x = Tensor::<f32>::rand_uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let labels = random_labels(n, 4, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let px = Tensor::new(
            &[n, 8],
            perm.iter()
                .flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec())
                .collect(),
        )
        .unwrap();
        let plabels: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let unpermute = |y: &Tensor<f32>| {
            let mut out = vec![0.0f32; n * 8];
            for (k, &i) in perm.iter().enumerate() {
                out[i * 8..(i + 1) * 8].copy_from_slice(&y.data()[k * 8..(k + 1) * 8]);
            }
            Tensor::new(&[n, 8], out).unwrap()
        };

        let g = gathered_region_attention(&x, &labels, &store, &p).unwrap();
        let gp = unpermute(&gathered_region_attention(&px, &plabels, &store, &p).unwrap());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g), bits(&gp));

        let m = mh_masked_attention(
            &x,
            Some(&AttentionBias::new(labels.clone(), -1000.0)),
            &store,
            &p,
        )
        .unwrap();
        let mp = unpermute(
            &mh_masked_attention(&px, Some(&AttentionBias::new(plabels, -1000.0)), &store, &p)
                .unwrap(),
        );
        assert!(mp.rel_inf_diff(&m, 1e-12).unwrap() <= 1e-6);
    }
}

#[test]
fn rmsa_layer_is_identity_with_zeroed_residual_branches() {
    let (mut store, lp) = layer_setup::<f32>(16, 4, 9);
    for id in [lp.attn.wo, lp.attn.bo, lp.mlp.w2, lp.mlp.b2] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::<f32>::rand_uniform(&[12, 16], -1.0, 1.0, &mut rng);
    let bias = AttentionBias::new(random_labels(12, 3, &mut rng), -1000.0).materialize();
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = rmsa_layer(&mut g, &bind, xv, Some(&bias), &lp).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn rmsa_layer_single_region_equals_global() {
    let (store, lp) = layer_setup::<f32>(16, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f32>::rand_uniform(&[10, 16], -1.0, 1.0, &mut rng);
    let bias = AttentionBias::new(vec![5; 10], -1000.0).materialize();
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let xv = g.constant(x);
    let a = rmsa_layer(&mut g, &bind, xv, Some(&bias), &lp).unwrap();
    let b = rmsa_layer(&mut g, &bind, xv, None, &lp).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn rmsa_layer_gradients_match_finite_differences() {
    let (mut store, lp) = layer_setup::<f64>(8, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 9;
    let x_id = store.add("input", Tensor::rand_uniform(&[n, 8], -1.0, 1.0, &mut rng));
    let bias = AttentionBias::new(random_labels(n, 3, &mut rng), -1000.0).materialize::<f64>();
    let proj = Tensor::<f64>::rand_uniform(&[n, 8], -1.0, 1.0, &mut rng);
    let coords = sample_coords(&store, usize::MAX, &mut rng);
    let err = check_params(&store, &coords, FD_EPS, &|g, bind| {
        let y = rmsa_layer(g, bind, bind.var(x_id), Some(&bias), &lp)?;
        let r = g.constant(proj.clone());
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(err < 1e-3, "max rel err {err:e}");
}

#[test]
fn window_equal_to_feature_is_global_attention() {
    let (store, lp) = layer_setup::<f32>(16, 4, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::<f32>::rand_uniform(&[4, 4, 16], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let w = wmsa_layer(&mut g, &bind, xv, 4, &lp).unwrap();
    let flat = g.constant(x.reshape(&[16, 16]).unwrap());
    let global = rmsa_layer(&mut g, &bind, flat, None, &lp).unwrap();
    assert_eq!(g.value(w).data(), g.value(global).data());
}

#[test]
fn window_fast_path_matches_grid_partition_path() {
    for seed in 0..10 {
        let (store, lp) = layer_setup::<f32>(16, 4, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (h, w, win) = [(8, 8, 4), (8, 12, 4), (6, 4, 2)][seed as usize % 3];
        let x = Tensor::<f32>::rand_uniform(&[h, w, 16], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let xv = g.constant(x);
        let fast = wmsa_layer(&mut g, &bind, xv, win, &lp).unwrap();
        let slow = wmsa_layer_via_partition(&mut g, &bind, xv, win, -1000.0, &lp).unwrap();
        let rel = g.value(fast).rel_inf_diff(g.value(slow), 1e-12).unwrap();
        assert!(rel <= 1e-5, "seed {seed}: {rel:e}");
    }
}

#[test]
fn window_attention_isolates_windows() {
    let (store, lp) = layer_setup::<f32>(16, 4, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = Tensor::<f32>::rand_uniform(&[8, 8, 16], -1.0, 1.0, &mut rng);
    let mut x2 = x.clone();
    for i in 4..8 {
        for j in 4..8 {
            for c in 0..16 {
                x2.data_mut()[(i * 8 + j) * 16 + c] = rng.gen_range(-20.0..20.0);
            }
        }
    }
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let (a, b) = (g.constant(x), g.constant(x2));
    let ya = wmsa_attention_sublayer(&mut g, &bind, a, 4, &lp).unwrap();
    let yb = wmsa_attention_sublayer(&mut g, &bind, b, 4, &lp).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            for c in 0..16 {
                let k = (i * 8 + j) * 16 + c;
                let (u, v) = (g.value(ya).data()[k], g.value(yb).data()[k]);
                assert!((u - v).abs() <= 1e-5 * u.abs().max(1e-3));
            }
        }
    }
}

#[test]
fn attention_sublayer_rejects_bad_bias() {
    let (store, lp) = layer_setup::<f32>(8, 2, 19);
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[5, 8]));
    let bias = Tensor::<f32>::zeros(&[4, 4]);
    assert!(attention_sublayer(&mut g, &bind, x, Some(&bias), &lp).is_err());
    assert!(attention(&mut g, &bind, x, None, &lp.attn).is_ok());
}
