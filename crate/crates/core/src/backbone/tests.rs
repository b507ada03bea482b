use super::*;
use rand::{Rng, SeedableRng};

fn tiny(cond: ConditionKind) -> UViTConfig {
    let mut c = UViTConfig::new(8, 1, 4, 3, 16, 32, 2, cond);
    c.diffusion_steps = 100;
    c
}

fn random_images(b: usize, cfg: &UViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * cfg.image_height * cfg.image_width * cfg.channels;
    Tensor::from_vec(
        &[b, cfg.image_height, cfg.image_width, cfg.channels],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Replaces every parameter with random values so no branch is trivially zero.
fn randomize(model: &mut UViTModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn combine_skip_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hm = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let zero = Tensor::zeros(&[3, 4]);
    assert_eq!(combine_skip(&hm, &zero, SkipMode::Add, None, None).unwrap(), hm);

    // [I | 0] selects the main branch.
    let mut w = Tensor::zeros(&[8, 4]);
    for i in 0..4 {
        w.data_mut()[i * 4 + i] = 1.0;
    }
    let hs = hm.scale(-3.0);
    let out = combine_skip(&hm, &hs, SkipMode::ConcatLinear, Some(&w), Some(&Tensor::zeros(&[4])))
        .unwrap();
    assert_eq!(out, hm);

    let wz = Tensor::zeros(&[4, 4]);
    let out = combine_skip(&hm, &hs, SkipMode::LinearAdd, Some(&wz), Some(&Tensor::zeros(&[4])))
        .unwrap();
    assert_eq!(out, hm);

    // add_linear with identity equals the sum.
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let out = combine_skip(&hm, &hs, SkipMode::AddLinear, Some(&eye), None).unwrap();
    assert_eq!(out, hm.add(&hs).unwrap());
}

#[test]
fn combine_skip_errors() {
    let a = Tensor::zeros(&[3, 4]);
    let b = Tensor::zeros(&[2, 4]);
    assert!(matches!(
        combine_skip(&a, &b, SkipMode::Add, None, None),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        combine_skip(&a, &a, SkipMode::None, None, None),
        Err(Error::Logic(_))
    ));
}

#[test]
fn ada_layer_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 6;
    let h = Tensor::from_vec(&[4, d], (0..4 * d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .unwrap();
    let temb = Tensor::from_vec(&[5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let w = Tensor::zeros(&[5, 2 * d]);

    // y_s = 1, y_b = 0: plain layer norm.
    let mut bias = Tensor::zeros(&[2 * d]);
    bias.data_mut()[..d].fill(1.0);
    let out = ada_layer_norm(&h, &temb, &w, &bias).unwrap();
    for (row_in, row_out) in h.data().chunks(d).zip(out.data().chunks(d)) {
        let mean = row_in.iter().sum::<f64>() / d as f64;
        let var = row_in.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (x, y) in row_in.iter().zip(row_out) {
            assert!((y - (x - mean) / (var + 1e-6).sqrt()).abs() < 1e-12);
        }
    }

    // y_s = 0: output is y_b everywhere.
    let mut bias = Tensor::zeros(&[2 * d]);
    for j in 0..d {
        bias.data_mut()[d + j] = j as f64;
    }
    let out = ada_layer_norm(&h, &temb, &w, &bias).unwrap();
    for row in out.data().chunks(d) {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, j as f64);
        }
    }

    // Constant tokens normalize to zero, leaving y_b.
    let flat = Tensor::full(&[2, d], 3.5);
    let mut bias = Tensor::full(&[2 * d], 2.0);
    bias.data_mut()[d..].fill(-0.25);
    let out = ada_layer_norm(&flat, &temb, &w, &bias).unwrap();
    assert!(out.data().iter().all(|v| (*v + 0.25).abs() < 1e-12));

    assert!(matches!(
        ada_layer_norm(&h, &temb, &Tensor::zeros(&[5, d]), &bias),
        Err(Error::Shape(_))
    ));
}

#[test]
fn hand_counted_toy_model() {
    let mut c = UViTConfig::new(1, 1, 1, 1, 2, 1, 1, ConditionKind::None);
    c.conv_mode = ConvMode::None;
    c.pos_embed_mode = PosEmbedMode::None;
    // patch embed 2+2, time 4+2, block (norms 8, qkv 12+6, proj 4+2,
    // fc1 2+1, fc2 2+2), final norm 4, head 2+1.
    let m = UViTModel::build(c.clone(), 0).unwrap();
    assert_eq!(m.count_params(), 56);
    assert_eq!(expected_param_count(&c), 56);
}

#[test]
fn build_is_deterministic_and_validated() {
    let c = tiny(ConditionKind::Class { num_classes: 3 });
    let a = UViTModel::build(c.clone(), 7).unwrap();
    let b = UViTModel::build(c.clone(), 7).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.tensor, pb.tensor);
    }
    let other = UViTModel::build(c.clone(), 8).unwrap();
    assert_ne!(a.param("pos_embed"), other.param("pos_embed"));
    assert_eq!(a.count_params(), expected_param_count(&c));

    let mut bad = c;
    bad.depth = 4;
    assert!(matches!(UViTModel::build(bad, 0), Err(Error::Config(_))));
}

#[test]
fn fresh_model_is_zero_function() {
    for conv in ConvMode::ALL {
        let mut c = tiny(ConditionKind::None);
        c.conv_mode = *conv;
        let m = UViTModel::build(c.clone(), 3).unwrap();
        let x = random_images(2, &c, 1);
        let out = m
            .forward(&x, &[5, 50], &[ConditionInput::Unconditional, ConditionInput::Unconditional])
            .unwrap();
        assert_eq!(out.max_abs(), 0.0, "{conv}");
    }
}

#[test]
fn forward_preserves_shape_for_every_variant() {
    let conds = [
        (ConditionKind::None, ConditionInput::Unconditional),
        (ConditionKind::Class { num_classes: 4 }, ConditionInput::Class(2)),
        (
            ConditionKind::Context {
                context_dim: 3,
                max_len: 4,
            },
            ConditionInput::context(
                Tensor::from_vec(&[4, 3], vec![1., 2., 3., 4., 5., 6., 0., 0., 0., 0., 0., 0.])
                    .unwrap(),
                2,
            )
            .unwrap(),
        ),
    ];
    for (kind, ci) in conds {
        for skip in SkipMode::ALL {
            for time in TimeMode::ALL {
                for conv in ConvMode::ALL {
                    for pe in PatchEmbedMode::ALL {
                        for pos in PosEmbedMode::ALL {
                            let mut c = tiny(kind);
                            c.skip_mode = *skip;
                            c.time_mode = *time;
                            c.conv_mode = *conv;
                            c.patch_embed_mode = *pe;
                            c.pos_embed_mode = *pos;
                            let mut m = UViTModel::build(c.clone(), 1).unwrap();
                            randomize(&mut m, 2);
                            let x = random_images(2, &c, 3);
                            let out = m.forward(&x, &[1, 100], &[ci.clone(), ci.clone()]).unwrap();
                            assert_eq!(out.shape(), x.shape());
                            assert!(out.all_finite());
                            let again = m.forward(&x, &[1, 100], &[ci.clone(), ci.clone()]).unwrap();
                            assert_eq!(out, again);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn forward_errors() {
    let c = tiny(ConditionKind::Class { num_classes: 3 });
    let m = UViTModel::build(c.clone(), 0).unwrap();
    let x = random_images(1, &c, 0);
    assert!(matches!(
        m.forward(&x, &[0], &[ConditionInput::Class(0)]),
        Err(Error::Index(_))
    ));
    assert!(matches!(
        m.forward(&x, &[101], &[ConditionInput::Class(0)]),
        Err(Error::Index(_))
    ));
    assert!(matches!(
        m.forward(&x, &[1], &[ConditionInput::Class(3)]),
        Err(Error::Conditioning(_))
    ));
    assert!(matches!(
        m.forward(&x, &[1], &[ConditionInput::Unconditional]),
        Err(Error::Conditioning(_))
    ));
    let wrong = Tensor::zeros(&[1, 4, 4, 1]);
    assert!(matches!(
        m.forward(&wrong, &[1], &[ConditionInput::Class(0)]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn skip_stack_is_lifo() {
    let mut c = tiny(ConditionKind::None);
    c.depth = 7;
    c.skip_mode = SkipMode::Add;
    let mut m = UViTModel::build(c.clone(), 0).unwrap();
    randomize(&mut m, 4);
    let x = random_images(1, &c, 5);

    // Identity blocks: first decoder input is twice the encoder output it pairs with.
    let hooks = ForwardHooks {
        blocks: BlockOverride::Identity,
        trace: Some(SkipTrace::default()),
    };
    let (_, hooks) = m
        .forward_with_hooks(&x, &[3], &[ConditionInput::Unconditional], hooks)
        .unwrap();
    let tr = hooks.trace.unwrap();
    let k = c.half_depth();
    assert_eq!(tr.decoder_inputs[0], tr.encoder_outputs[k - 1].scale(2.0));

    // Distinguishable blocks: decoder j pops encoder output k - j (0-based).
    let hooks = ForwardHooks {
        blocks: BlockOverride::AddLayerIndex,
        trace: Some(SkipTrace::default()),
    };
    let (_, hooks) = m
        .forward_with_hooks(&x, &[3], &[ConditionInput::Unconditional], hooks)
        .unwrap();
    let tr = hooks.trace.unwrap();
    assert_eq!(tr.encoder_outputs.len(), k);
    assert_eq!(tr.decoder_skip.len(), k);
    for j in 0..k {
        assert_eq!(tr.decoder_skip[j], tr.encoder_outputs[k - 1 - j]);
        assert_eq!(
            tr.decoder_inputs[j],
            tr.decoder_main[j].add(&tr.decoder_skip[j]).unwrap()
        );
    }
    for j in 1..k {
        assert_ne!(tr.encoder_outputs[j], tr.encoder_outputs[j - 1]);
    }
}

#[test]
fn patch_permutation_equivariance() {
    let mut c = UViTConfig::new(8, 2, 2, 3, 16, 32, 2, ConditionKind::Class { num_classes: 3 });
    c.diffusion_steps = 100;
    c.pos_embed_mode = PosEmbedMode::None;
    c.conv_mode = ConvMode::None;
    let mut m = UViTModel::build(c.clone(), 0).unwrap();
    randomize(&mut m, 9);
    let x = random_images(1, &c, 10);
    let cond = [ConditionInput::Class(1)];
    let out = m.forward(&x, &[40], &cond).unwrap();

    let n = c.num_patches();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(0, 5);
    let permute = |img: &Tensor| -> Tensor {
        let p = crate::tensor::patchify(img, 2).unwrap();
        let dim = p.shape()[2];
        let mut data = Vec::with_capacity(p.len());
        for &src in &perm {
            data.extend_from_slice(&p.data()[src * dim..(src + 1) * dim]);
        }
        let p = Tensor::from_vec(p.shape(), data).unwrap();
        crate::tensor::unpatchify(&p, 2, 8, 8, 2).unwrap()
    };
    let out_perm = m.forward(&permute(&x), &[40], &cond).unwrap();
    let expected = permute(&out);
    for (a, b) in out_perm.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn embed_condition_tokens() {
    let c = tiny(ConditionKind::Class { num_classes: 10 });
    let m = UViTModel::build(c, 0).unwrap();
    let a = m.embed_condition(&ConditionInput::Class(3)).unwrap();
    let b = m.embed_condition(&ConditionInput::Class(7)).unwrap();
    assert_eq!(a.shape(), &[1, 16]);
    assert_ne!(a, b);
    let null = m.embed_condition(&ConditionInput::Null).unwrap();
    let table = m.param("label_embed.weight").unwrap();
    assert_eq!(table.shape(), &[11, 16]);
    assert_eq!(null.data(), &table.data()[10 * 16..11 * 16]);

    let ctx_cfg = tiny(ConditionKind::Context {
        context_dim: 4,
        max_len: 8,
    });
    let m = UViTModel::build(ctx_cfg, 0).unwrap();
    let mut e = Tensor::zeros(&[8, 4]);
    for v in &mut e.data_mut()[..20] {
        *v = 0.5;
    }
    let toks = m
        .embed_condition(&ConditionInput::context(e, 5).unwrap())
        .unwrap();
    assert_eq!(toks.shape(), &[5, 16]);
    let null = m.embed_condition(&ConditionInput::Null).unwrap();
    assert_eq!(null.data(), m.param("context_null").unwrap().data());
    assert!(matches!(
        m.embed_condition(&ConditionInput::Class(0)),
        Err(Error::Conditioning(_))
    ));
}

#[test]
fn padded_context_does_not_leak() {
    // Changing nothing but the padding mask outcome: two contexts that agree
    // on valid rows give identical outputs regardless of max_len padding.
    let cfg = tiny(ConditionKind::Context {
        context_dim: 3,
        max_len: 4,
    });
    let mut m = UViTModel::build(cfg.clone(), 0).unwrap();
    randomize(&mut m, 11);
    let x = random_images(2, &cfg, 12);
    let mut e = Tensor::zeros(&[4, 3]);
    e.data_mut()[..3].copy_from_slice(&[0.2, -0.4, 0.9]);
    let short = ConditionInput::context(e, 1).unwrap();
    let mut full = Tensor::zeros(&[4, 3]);
    for v in full.data_mut() {
        *v = 0.3;
    }
    let long = ConditionInput::context(full, 4).unwrap();
    let together = m.forward(&x, &[10, 10], &[short.clone(), long]).unwrap();
    let alone = m
        .forward(&x.select(&[0]), &[10], &[short])
        .unwrap();
    for (a, b) in together.item(0).iter().zip(alone.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn timestep_embedding_is_linear_map_of_sinusoid() {
    let c = tiny(ConditionKind::None);
    let m = UViTModel::build(c, 0).unwrap();
    let a = m.timestep_embedding(1).unwrap();
    let b = m.timestep_embedding(2).unwrap();
    assert_eq!(a.shape(), &[16]);
    assert_ne!(a, b);
    assert_eq!(a, m.timestep_embedding(1).unwrap());
}

#[test]
fn table2_counts_within_tolerance() {
    for (cfg, target) in [
        (UViTConfig::small_cifar10(), 44e6),
        (UViTConfig::small_deep_text(), 58e6),
        (UViTConfig::mid_imagenet64(), 131e6),
        (UViTConfig::large_imagenet64(), 287e6),
    ] {
        let n = expected_param_count(&cfg) as f64;
        assert!((n / target - 1.0).abs() < 0.05, "{n} vs {target}");
    }
}
