use proptest::prelude::*;

use super::*;
use crate::attention::causal_attention;
use crate::mixers::MixerKind;
use crate::numerics::{finite_difference_check_leaves, Tensor};

fn config(kind: MixerKind, ratio: Ratio, blocks: usize) -> HybridConfig {
    HybridConfig {
        kind,
        ratio,
        blocks,
        reference_ratio: 3,
        d_model: 8,
        heads: 2,
        seq_len: 6,
        vocab: 11,
        mlp_mult: 2,
    }
}

fn letters(s: &LayerSchedule) -> String {
    s.to_string()
}

#[test]
fn schedule_examples() {
    let c = config(MixerKind::Gla, Ratio::Mixed(3), 2);
    assert_eq!(letters(&build_schedule(&c).unwrap()), "LLLFLLLF");
    let c = config(MixerKind::Gla, Ratio::PureLinear, 2);
    assert_eq!(letters(&build_schedule(&c).unwrap()), "LLLLLLLL");
    let c = config(MixerKind::Gla, Ratio::FullTransformer, 2);
    assert_eq!(letters(&build_schedule(&c).unwrap()), "FFFFFFFF");
    let c = config(MixerKind::Gla, Ratio::Mixed(0), 2);
    assert!(matches!(build_schedule(&c), Err(HybridError::Config(_))));
}

#[test]
fn ratio_parsing_and_serde() {
    assert_eq!("3:1".parse::<Ratio>().unwrap(), Ratio::Mixed(3));
    assert_eq!("pure".parse::<Ratio>().unwrap(), Ratio::PureLinear);
    assert!("x".parse::<Ratio>().is_err());
    let c = config(MixerKind::Hgrn2, Ratio::FullTransformer, 1);
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<HybridConfig>(&json).unwrap(), c);
    let mixed: HybridConfig = serde_json::from_str(&json.replace("\"full_transformer\"", "6")).unwrap();
    assert_eq!(mixed.ratio, Ratio::Mixed(6));
    assert!(serde_json::from_str::<HybridConfig>(&json.replace("\"vocab\"", "\"vocabulary\"")).is_err());
}

#[test]
fn cache_examples() {
    let mut full = config(MixerKind::Gla, Ratio::FullTransformer, 6);
    full.d_model = 64;
    let hybrid = HybridConfig {
        ratio: Ratio::Mixed(3),
        ..full.clone()
    };
    let a = cache_report(&full, 128, 2).unwrap();
    let b = cache_report(&hybrid, 128, 2).unwrap();
    assert_eq!((a.full_layers, b.full_layers), (24, 6));
    assert_eq!(a.kv_cache_bytes, 4 * b.kv_cache_bytes);
    assert_eq!(a.kv_cache_bytes, 24 * 2 * 128 * 64 * 2);
    let doubled = cache_report(&hybrid, 256, 2).unwrap();
    assert_eq!(doubled.kv_cache_bytes, 2 * b.kv_cache_bytes);
    let pure = HybridConfig {
        ratio: Ratio::PureLinear,
        ..full
    };
    assert_eq!(cache_report(&pure, 16, 2).unwrap(), cache_report(&pure, 4096, 2).unwrap());
    assert_eq!(cache_report(&pure, 16, 2).unwrap().state_elements, 24 * 2 * 32 * 32);
}

proptest! {
    #[test]
    fn schedule_invariants(r in 1usize..8, n in 0usize..6) {
        let c = config(MixerKind::Gla, Ratio::Mixed(r), n);
        let s = build_schedule(&c).unwrap();
        prop_assert_eq!(s.len(), n * (r + 1));
        prop_assert_eq!(s.count(LayerKind::Full), n);
        let fulls: Vec<usize> = s.iter().enumerate().filter(|(_, k)| *k == LayerKind::Full).map(|(i, _)| i).collect();
        for (j, &i) in fulls.iter().enumerate() {
            prop_assert_eq!(i, j * (r + 1) + r);
        }
    }

    #[test]
    fn cache_monotone_in_length(r in 1usize..5, n in 0usize..4, len in 1usize..500, pure in any::<bool>()) {
        let ratio = if pure { Ratio::PureLinear } else { Ratio::Mixed(r) };
        let c = config(MixerKind::DeltaNet, ratio, n);
        let a = cache_report(&c, len, 2).unwrap();
        let b = cache_report(&c, len + 1, 2).unwrap();
        if a.full_layers > 0 {
            prop_assert!(b.kv_cache_bytes > a.kv_cache_bytes);
        } else {
            prop_assert_eq!(a.kv_cache_bytes, b.kv_cache_bytes);
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |i| (0..k).map(|j| a.at(&[i / n, j]) * b.at(&[j, i % n])).sum())
}

fn rms(x: &Tensor, gain: &Tensor) -> Tensor {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[rows, d], |i| {
        let r = i / d;
        let ms = (0..d).map(|c| x.at(&[r, c]).powi(2)).sum::<f64>() / d as f64;
        x.at(&[r, i % d]) / (ms + 1e-6).sqrt() * gain.data()[i % d]
    })
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

fn embed(model: &HybridModel, tokens: &[usize]) -> Tensor {
    let p = &model.params;
    let d = model.config.d_model;
    Tensor::from_fn(&[tokens.len(), d], |i| {
        let (t, c) = (i / d, i % d);
        p.get("embed").unwrap().at(&[tokens[t], c]) + p.get("pos").unwrap().at(&[t, c])
    })
}

fn head(model: &HybridModel, h: &Tensor) -> Tensor {
    let p = &model.params;
    matmul(&rms(h, p.get("final_norm").unwrap()), p.get("head").unwrap())
}

#[test]
fn depth_zero_model_is_embedding_then_head() {
    let c = config(MixerKind::Gla, Ratio::Mixed(3), 0);
    let model = HybridModel::init(&c, 3).unwrap();
    let tokens = [1, 5, 10, 0];
    let got = forward(&model, &tokens).unwrap();
    let expected = head(&model, &embed(&model, &tokens));
    assert!(got.rel_error(&expected).unwrap() <= 1e-12);
}

#[test]
fn full_transformer_matches_hand_assembly() {
    let c = config(MixerKind::Gla, Ratio::FullTransformer, 1);
    let model = HybridModel::init(&c, 5).unwrap();
    let tokens = [3, 1, 4, 1];
    let got = forward(&model, &tokens).unwrap();

    let p = &model.params;
    let (heads, d) = (c.heads, c.head_dim());
    let mut h = embed(&model, &tokens);
    for i in 0..model.schedule.len() {
        let w = |n: &str| p.get(&format!("layers.{i}.{n}")).unwrap();
        let n = rms(&h, w("norm1"));
        let (q, k, v) = (matmul(&n, w("attn.wq")), matmul(&n, w("attn.wk")), matmul(&n, w("attn.wv")));
        let head_cols = |m: &Tensor, hd: usize| Tensor::from_fn(&[4, d], |j| m.at(&[j / d, hd * d + j % d]));
        let mut mixed = Tensor::zeros(&[4, c.d_model]);
        for hd in 0..heads {
            let o = causal_attention(&head_cols(&q, hd), &head_cols(&k, hd), &head_cols(&v, hd)).unwrap();
            for t in 0..4 {
                for j in 0..d {
                    mixed.data_mut()[t * c.d_model + hd * d + j] = o.at(&[t, j]);
                }
            }
        }
        h = add(&h, &matmul(&mixed, w("wo")));
        let n = rms(&h, w("norm2"));
        let a = matmul(&n, w("mlp.w1"));
        let u = matmul(&n, w("mlp.w3"));
        let gated = Tensor::new(
            a.shape(),
            a.data().iter().zip(u.data()).map(|(&x, &y)| x / (1.0 + (-x).exp()) * y).collect(),
        )
        .unwrap();
        h = add(&h, &matmul(&gated, w("mlp.w2")));
    }
    let expected = head(&model, &h);
    assert!(got.rel_error(&expected).unwrap() <= 1e-12);
}

#[test]
fn linear_layer_uses_the_mixer_scan() {
    let c = HybridConfig {
        ratio: Ratio::PureLinear,
        reference_ratio: 1,
        ..config(MixerKind::GatedDeltaNet, Ratio::PureLinear, 1)
    };
    let mut model = HybridModel::init(&c, 8).unwrap();
    // zero the channel mixer and the second layer's output so only layer 0's
    // token mixer contributes
    for name in ["layers.0.mlp.w2", "layers.1.mlp.w2", "layers.1.wo"] {
        let t = model.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let tokens = [2, 7, 7, 1, 9];
    let got = forward(&model, &tokens).unwrap();
    let x = embed(&model, &tokens);
    let n = rms(&x, model.params.get("layers.0.norm1").unwrap());
    let mixer = model.mixer_params(0).unwrap();
    let o = crate::mixers::scan(&mixer, &n).unwrap();
    let h = add(&x, &matmul(&o, model.params.get("layers.0.wo").unwrap()));
    assert!(got.rel_error(&head(&model, &h)).unwrap() <= 1e-12);
}

#[test]
fn logits_are_causal_for_every_kind_and_ratio() {
    for kind in MixerKind::ALL {
        for ratio in [Ratio::Mixed(1), Ratio::PureLinear, Ratio::FullTransformer] {
            let c = HybridConfig {
                reference_ratio: 1,
                ..config(kind, ratio, 1)
            };
            let model = HybridModel::init(&c, 1).unwrap();
            let a = forward(&model, &[1, 2, 3, 4, 5]).unwrap();
            let b = forward(&model, &[1, 2, 3, 9, 5]).unwrap();
            let v = c.vocab;
            assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v], "{kind} {ratio}");
            assert_ne!(&a.data()[3 * v..4 * v], &b.data()[3 * v..4 * v], "{kind} {ratio}");
        }
    }
}

#[test]
fn out_of_range_tokens_are_rejected() {
    let model = HybridModel::init(&config(MixerKind::Hgrn, Ratio::Mixed(1), 1), 0).unwrap();
    assert!(matches!(forward(&model, &[11]), Err(HybridError::TokenOutOfRange { .. })));
    assert!(forward(&model, &[0; 7]).is_err());
}

#[test]
fn end_to_end_gradient_check() {
    let c = HybridConfig {
        kind: MixerKind::Rwkv6,
        ratio: Ratio::Mixed(1),
        blocks: 1,
        reference_ratio: 1,
        d_model: 16,
        heads: 2,
        seq_len: 8,
        vocab: 32,
        mlp_mult: 2,
    };
    let model = HybridModel::init(&c, 4).unwrap();
    let graph = ModelGraph::<f64>::build(&model, 1, 8).unwrap();
    let tokens: Vec<usize> = (0..8).map(|i| (i * 7 + 3) % 32).collect();
    let targets: Vec<i64> = (0..8).map(|i| if i % 3 == 0 { -1 } else { ((i * 5) % 32) as i64 }).collect();
    let b = graph.bind(&model.params, &tokens, &targets).unwrap();
    let report =
        finite_difference_check_leaves(&graph.graph, &b, graph.param_leaves(), 1e-5, 1e-4, Some(12)).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = config(MixerKind::RetNet, Ratio::Mixed(2), 1);
    let model = HybridModel::init(&c, 9).unwrap();
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.tensors.insert("adam.step", Tensor::scalar(12.0));
    ckpt.tensors.insert("odd", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ckpt).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.header.config, ckpt.header.config);
    assert_eq!(back.header.schedule, ckpt.header.schedule);
    assert_eq!(back.header.tensors, ckpt.tensors.len());
    for ((na, ta), (nb, tb)) in ckpt.tensors.iter().zip(back.tensors.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    assert_eq!(back.to_model().unwrap(), model);
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    assert!(read_checkpoint(&b"garbage\n"[..]).is_err());
}

#[test]
fn param_count_without_allocation_matches_init() {
    for kind in MixerKind::ALL {
        for ratio in [Ratio::Mixed(1), Ratio::Mixed(3), Ratio::PureLinear, Ratio::FullTransformer] {
            let c = config(kind, ratio, 2);
            let model = HybridModel::init(&c, 0).unwrap();
            assert_eq!(HybridModel::param_count_for(&c).unwrap(), model.param_count(), "{kind} {ratio}");
        }
    }
}
