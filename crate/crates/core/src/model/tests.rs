use rand::Rng;

use super::*;
use crate::numcore::gradcheck::{check, random_tensor, GradCheckOptions};
use crate::rng::stream;

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = stream(seed, "img");
    random_tensor(&[h, w, 3], 0.0, 1.0, &mut r)
}

/// Parameter count derived from the architecture description alone.
fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let norm = |c: usize| 2 * c;
    let mut total = 0;
    for l in 0..4 {
        let (cin, c, s) = (cfg.stage_in_channels(l), cfg.channels[l], cfg.patch_sizes[l]);
        total += lin(s * s * cin, c);
        if cfg.encoder_deformable {
            total += lin(9 * cin, 2 * s * s);
        }
        let red = cfg.reductions[l];
        let block = norm(c)
            + 4 * lin(c, c)
            + if red > 1 { lin(red * red * c, c) + norm(c) } else { 0 }
            + norm(c)
            + lin(c, c * cfg.mlp_ratio)
            + lin(c * cfg.mlp_ratio, c);
        total += cfg.depths[l] * block + norm(c);
    }
    let e = cfg.c_emb;
    for l in 0..4 {
        total += lin(9 * cfg.channels[l], e) + lin(9 * cfg.channels[l], 18);
        total += lin(e, e);
        if cfg.decoder == DecoderKind::Deformable {
            total += lin(9 * e, 2 * e.min(64));
        }
        total += 2 * lin(e, e);
    }
    total + norm(e) + lin(e, cfg.classes)
}

#[test]
fn nano_pyramid_shapes_on_panorama() {
    let m = Trans4Pass::new(ModelConfig::nano(5), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(64, 128, 1)).unwrap();
    let pyr = m.encode(&mut g, x).unwrap();
    let shapes: Vec<_> = pyr.features.iter().map(|&f| g.shape(f).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![16, 32, 16], vec![8, 16, 32], vec![4, 8, 48], vec![2, 4, 64]]
    );
    let dec = m.decode(&mut g, &pyr).unwrap();
    assert_eq!(g.shape(dec.logits_quarter), &[16, 32, 5]);
    assert_eq!(g.shape(dec.fused), &[16, 32, 32]);
}

#[test]
fn stage_one_alone() {
    let cfg = ModelConfig::nano(5);
    let m = Trans4Pass::new(cfg, 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(64, 128, 2)).unwrap();
    let mut attn = Vec::new();
    let y = m.encoder[0].forward(&mut g, &m.params, x, &mut attn).unwrap();
    assert_eq!(g.shape(y), &[16, 32, 16]);
}

#[test]
fn zero_input_is_finite_and_attention_rows_are_distributions() {
    let m = Trans4Pass::new(ModelConfig::nano(5), 3).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[32, 64, 3])).unwrap();
    let out = m.forward(&mut g, x).unwrap();
    assert!(g.value(out.logits).is_finite());

    let x = g.constant(image(32, 64, 4)).unwrap();
    let out = m.forward(&mut g, x).unwrap();
    assert_eq!(out.pyramid.attention.len(), 1 + 2 + 3 + 4);
    for &a in &out.pyramid.attention {
        let t = g.value(a);
        let cols = t.shape()[1];
        for row in t.data().chunks_exact(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn parameter_count_matches_analytic_formula() {
    for cfg in [
        ModelConfig::nano(5),
        ModelConfig {
            decoder: DecoderKind::Vanilla,
            encoder_deformable: false,
            ..ModelConfig::nano(3)
        },
        ModelConfig {
            depths: [2, 1, 2, 1],
            ..ModelConfig::nano(7)
        },
    ] {
        let m = Trans4Pass::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.param_count(), analytic_param_count(&cfg));
        let d = m.describe(64, 128).unwrap();
        let summed: usize = d
            .stages
            .iter()
            .map(|s| s.encoder_params + s.decoder_params)
            .sum::<usize>()
            + d.head_params;
        assert_eq!(summed, d.total_params);
    }
}

#[test]
fn tiny_config_builds_and_shapes_hold() {
    let cfg = ModelConfig::tiny(19);
    let m = Trans4Pass::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.param_count(), analytic_param_count(&cfg));
    let mut g = Graph::new();
    let x = g.constant(image(32, 64, 5)).unwrap();
    let out = m.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(out.pyramid.features[3]), &[1, 2, 512]);
    assert_eq!(g.shape(out.decoded.fused), &[8, 16, 128]);
    assert_eq!(g.shape(out.logits), &[32, 64, 19]);
}

#[test]
fn shapes_hold_across_input_sizes() {
    let m = Trans4Pass::new(ModelConfig::nano(4), 6).unwrap();
    for h in [32, 64, 96] {
        for w in [64, 128] {
            let mut g = Graph::new();
            let x = g.constant(image(h, w, 7)).unwrap();
            let out = m.forward(&mut g, x).unwrap();
            for (l, &f) in out.pyramid.features.iter().enumerate() {
                let s = m.cfg.strides[l];
                assert_eq!(g.shape(f), &[h / s, w / s, m.cfg.channels[l]]);
            }
            assert_eq!(g.shape(out.decoded.fused), &[h / 4, w / 4, 32]);
            assert_eq!(g.shape(out.logits), &[h, w, 4]);
            assert!(g.value(out.logits).is_finite());
            let labels = argmax_map(g.value(out.logits), None);
            assert!(labels.data.iter().all(|&l| l < 4));
        }
    }
    let mut g = Graph::new();
    let x = g.constant(image(48, 64, 1)).unwrap();
    assert!(matches!(m.forward(&mut g, x), Err(Error::Shape(_))));
}

#[test]
fn fused_features_equal_recomputed_stage_sum() {
    let m = Trans4Pass::new(ModelConfig::nano(5), 8).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(32, 64, 9)).unwrap();
    let out = m.forward(&mut g, x).unwrap();
    let mut manual = vec![0.0; g.value(out.decoded.fused).len()];
    for l in 0..4 {
        // recompute each stage independently from its encoder feature
        let mut g2 = Graph::new();
        let f = g2
            .constant(g.value(out.pyramid.features[l]).clone())
            .unwrap();
        let z = m.decoder[l].forward(&mut g2, &m.params, f).unwrap();
        let z = if l == 0 { z } else { g2.upsample_bilinear(z, 8, 16).unwrap() };
        assert!(g2.value(z).bit_eq(g.value(out.decoded.stage_embeds[l])));
        for (a, b) in manual.iter_mut().zip(g2.value(z).data()) {
            *a += b;
        }
    }
    let fused = g.value(out.decoded.fused).data();
    assert!(manual.iter().zip(fused).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn fuse_features_degenerate_cases() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 2, 3])).unwrap();
    let one = g.constant(Tensor::full(&[2, 2, 3], 1.5)).unwrap();
    let f = fuse_features(&mut g, &[z, z, z, z]).unwrap();
    assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    let f = fuse_features(&mut g, &[z, one, z, z]).unwrap();
    assert!(g.value(f).bit_eq(g.value(one)));
}

#[test]
fn zero_offset_dmlp_decoder_reproduces_vanilla_decoder() {
    let deformable = Trans4Pass::new(ModelConfig::nano(5), 10).unwrap();
    let vanilla = Trans4Pass::new(
        ModelConfig {
            decoder: DecoderKind::Vanilla,
            ..ModelConfig::nano(5)
        },
        10,
    )
    .unwrap();
    for id in vanilla.params.ids() {
        let name = vanilla.params.name(id);
        let other = deformable.params.find(name).unwrap();
        assert!(vanilla.params.get(id).bit_eq(deformable.params.get(other)));
    }
    let img = image(32, 64, 11);
    let run = |m: &Trans4Pass| {
        let mut g = Graph::new();
        let x = g.constant(img.clone()).unwrap();
        let out = m.forward(&mut g, x).unwrap();
        g.value(out.logits).clone()
    };
    assert!(run(&deformable).bit_eq(&run(&vanilla)));
}

#[test]
fn residual_only_decoder_is_projection_upsample_sum() {
    let mut m = Trans4Pass::new(ModelConfig::nano(5), 12).unwrap();
    let zero_names: Vec<_> = m
        .params
        .ids()
        .filter(|&id| {
            let n = m.params.name(id);
            n.starts_with("dec.") && (n.contains(".dmlp.fc.") || n.contains(".mlp.fc2."))
        })
        .collect();
    assert_eq!(zero_names.len(), 16);
    for id in zero_names {
        let shape = m.params.get(id).shape().to_vec();
        *m.params.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut g = Graph::new();
    let x = g.constant(image(32, 64, 13)).unwrap();
    let out = m.forward(&mut g, x).unwrap();
    let mut expect = vec![0.0; g.value(out.decoded.fused).len()];
    for l in 0..4 {
        let mut g2 = Graph::new();
        let f = g2
            .constant(g.value(out.pyramid.features[l]).clone())
            .unwrap();
        let z = m.decoder[l].embed.forward(&mut g2, &m.params, f).unwrap();
        let z = g2.upsample_bilinear(z, 8, 16).unwrap();
        for (a, b) in expect.iter_mut().zip(g2.value(z).data()) {
            *a += b;
        }
    }
    let got = g.value(out.decoded.fused).data();
    let err = expect
        .iter()
        .zip(got)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn construction_and_forward_are_deterministic() {
    let a = Trans4Pass::new(ModelConfig::nano(5), 14).unwrap();
    let b = Trans4Pass::new(ModelConfig::nano(5), 14).unwrap();
    let c = Trans4Pass::new(ModelConfig::nano(5), 15).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    let img = image(32, 64, 16);
    assert_eq!(a.predict(&img).unwrap(), b.predict(&img).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let m = Trans4Pass::new(ModelConfig::nano(5), 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = Trans4Pass::load(dir.path()).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.params, m.params);
}

#[test]
fn end_to_end_gradient_on_two_pixel_probe() {
    let mut m = Trans4Pass::new(ModelConfig::nano(3), 18).unwrap();
    // non-zero offsets keep sampling positions off the integer lattice
    let mut r = stream(19, "offsets");
    let ids: Vec<_> = m
        .params
        .ids()
        .filter(|&id| m.params.name(id).contains(".offset."))
        .collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v = r.gen_range(-0.05..0.05);
        }
    }
    let img = image(32, 32, 20);
    let probe = |g: &mut Graph, logits: Var| -> Result<Var> {
        // loss = logit(3, 5, class 1) − 0.5 · logit(20, 17, class 2)
        let l = g.reshape(logits, &[32 * 32 * 3])?;
        let w = Tensor::from_fn(&[32 * 32 * 3], |i| {
            if i == (3 * 32 + 5) * 3 + 1 {
                1.0
            } else if i == (20 * 32 + 17) * 3 + 2 {
                -0.5
            } else {
                0.0
            }
        });
        let w = g.constant(w)?;
        let p = g.mul(l, w)?;
        g.mean(p)
    };
    let rep = check(
        "model",
        &[img],
        |g, v| {
            let out = m.forward(g, v[0])?;
            probe(g, out.logits)
        },
        GradCheckOptions {
            max_coords: Some(40),
            floor: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
    assert!(rep.max_abs_grad > 0.0);
}
