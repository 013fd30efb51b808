use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::model::ModelConfig;
use crate::numcore::gradcheck::{check, random_tensor, GradCheckOptions};
use crate::panogeo::Domain;

fn rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}

fn labels(h: usize, w: usize, v: &[u8]) -> LabelMap {
    LabelMap::new(h, w, v.to_vec()).unwrap()
}

/// Neumaier-compensated sum.
fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Log-softmax of `row / t`, written out independently of the graph kernels.
fn log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
    let lse = m + ksum(row.iter().map(|v| (v / t - m).exp())).ln();
    row.iter().map(|v| v / t - lse).collect()
}

/// Per-pixel evaluation of the distillation objective.
fn mpa_oracle(f: &Tensor, fhat: &Tensor, mask: &[bool], y: &LabelMap, cfg: &AdaptConfig) -> f64 {
    let c = f.last_dim();
    let t = cfg.temperature;
    let (mut kl, mut ce) = (Vec::new(), Vec::new());
    for p in 0..mask.len() {
        if !mask[p] {
            continue;
        }
        let a = &f.data()[p * c..(p + 1) * c];
        let b = &fhat.data()[p * c..(p + 1) * c];
        let (lq, lr) = (log_softmax(a, t), log_softmax(b, t));
        kl.push(ksum((0..c).map(|j| lr[j].exp() * (lr[j] - lq[j]))));
        ce.push(-log_softmax(a, 1.0)[y.data[p] as usize]);
    }
    if kl.is_empty() {
        return 0.0;
    }
    let n = kl.len() as f64;
    cfg.lambda * t * t * ksum(kl) / n + (1.0 - cfg.lambda) * ksum(ce) / n
}

fn eval_loss(f: &Tensor, fhat: &Tensor, mask: &[bool], y: &LabelMap, cfg: &AdaptConfig) -> f64 {
    let mut g = Graph::new();
    let v = g.input(f.clone()).unwrap();
    let l = mpa_loss(&mut g, v, fhat, mask, y, cfg).unwrap();
    g.value(l).item()
}

#[test]
fn pseudo_labels_follow_argmax() {
    let mut logits = Tensor::zeros(&[2, 2, 3]);
    for (p, k) in [0usize, 2, 1, 2].iter().enumerate() {
        logits.data_mut()[p * 3 + k] = 5.0;
    }
    assert_eq!(pseudo_label(&logits, None).data, vec![0, 2, 1, 2]);
    let tie = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 2.0]).unwrap();
    assert_eq!(pseudo_label(&tie, None).data, vec![1]);
    assert!(pseudo_label(&logits, Some(1.1)).data.iter().all(|&l| l == IGNORE));
    // a confident pixel survives a moderate threshold, an ambiguous one does not
    let mixed = Tensor::new(&[1, 2, 2], vec![10.0, 0.0, 0.1, 0.0]).unwrap();
    assert_eq!(pseudo_label(&mixed, Some(0.9)).data, vec![0, IGNORE]);
}

proptest! {
    #[test]
    fn pseudo_labels_ignore_positive_rescaling(vals in proptest::collection::vec(-5.0f64..5.0, 12), s in 0.01f64..100.0) {
        let a = Tensor::new(&[2, 2, 3], vals.clone()).unwrap();
        let b = Tensor::new(&[2, 2, 3], vals.iter().map(|v| v * s).collect()).unwrap();
        prop_assert_eq!(pseudo_label(&a, None), pseudo_label(&b, None));
    }

    #[test]
    fn ema_stays_in_the_hull(init in -3.0f64..3.0, means in proptest::collection::vec(-3.0f64..3.0, 1..20), m in 0.5f64..0.9999) {
        let mut bank = PrototypeBank::new(1, 1, m);
        let mut s = ClassSums::new(1, 1);
        s.add(&Tensor::full(&[1, 1, 1], init), &labels(1, 1, &[0])).unwrap();
        bank.update(&s).unwrap();
        let (mut lo, mut hi) = (init, init);
        for v in means {
            let mut s = ClassSums::new(1, 1);
            s.add(&Tensor::full(&[1, 1, 1], v), &labels(1, 1, &[0])).unwrap();
            bank.update(&s).unwrap();
            lo = lo.min(v);
            hi = hi.max(v);
            let p = bank.prototype(0)[0];
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}

#[test]
fn single_class_pass_gives_global_mean() {
    let mut r = rng(1);
    let emb = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut r);
    let mut s = ClassSums::new(3, 5);
    s.add(&emb, &LabelMap::filled(3, 4, 0)).unwrap();
    let bank = PrototypeBank::from_sums(&s, 0.999);
    assert_eq!(bank.initialized, vec![true, false, false]);
    for c in 0..5 {
        let mean = ksum((0..12).map(|p| emb.data()[p * 5 + c])) / 12.0;
        assert!((bank.prototype(0)[c] - mean).abs() < 1e-14);
    }
    assert!(bank.prototype(1).iter().all(|&v| v == 0.0));
}

#[test]
fn disjoint_scenes_give_their_own_means_and_mixed_passes_weight_by_pixels() {
    let mut r = rng(2);
    let a = random_tensor(&[2, 2, 3], -1.0, 1.0, &mut r);
    let b = random_tensor(&[2, 3, 3], -1.0, 1.0, &mut r);
    let mut s = ClassSums::new(2, 3);
    s.add(&a, &LabelMap::filled(2, 2, 0)).unwrap();
    s.add(&b, &LabelMap::filled(2, 3, 1)).unwrap();
    let bank = PrototypeBank::from_sums(&s, 0.9);
    for c in 0..3 {
        let ma = ksum((0..4).map(|p| a.data()[p * 3 + c])) / 4.0;
        let mb = ksum((0..6).map(|p| b.data()[p * 3 + c])) / 6.0;
        assert!((bank.prototype(0)[c] - ma).abs() < 1e-14);
        assert!((bank.prototype(1)[c] - mb).abs() < 1e-14);
    }
    // mixed labels with ignore pixels: brute-force over all assigned pixels
    let la = labels(2, 2, &[0, 1, IGNORE, 1]);
    let lb = labels(2, 3, &[1, 1, 0, 0, IGNORE, 0]);
    let mut s = ClassSums::new(2, 3);
    s.add(&a, &la).unwrap();
    s.add(&b, &lb).unwrap();
    let bank = PrototypeBank::from_sums(&s, 0.9);
    for k in 0..2u8 {
        let mut pix = Vec::new();
        for (t, l) in [(&a, &la), (&b, &lb)] {
            for (p, &v) in l.data.iter().enumerate() {
                if v == k {
                    pix.push(&t.data()[p * 3..p * 3 + 3]);
                }
            }
        }
        for c in 0..3 {
            let m = ksum(pix.iter().map(|row| row[c])) / pix.len() as f64;
            assert!((bank.prototype(k as usize)[c] - m).abs() < 1e-14);
        }
    }
}

#[test]
fn ema_step_and_unrolled_sequence() {
    let one = |v: f64, k: u8| {
        let mut s = ClassSums::new(2, 1);
        s.add(&Tensor::full(&[1, 1, 1], v), &labels(1, 1, &[k])).unwrap();
        s
    };
    let mut bank = PrototypeBank::new(2, 1, 0.999);
    bank.update(&one(1.0, 0)).unwrap();
    assert_eq!(bank.prototype(0), &[1.0]);
    bank.update(&one(0.0, 0)).unwrap();
    assert!((bank.prototype(0)[0] - 0.999).abs() < 1e-15);
    assert!(!bank.initialized[1]);
    assert_eq!(bank.update_count, vec![2, 0]);

    let m = 0.999;
    let mut bank = PrototypeBank::new(2, 1, m);
    bank.update(&one(0.3, 0)).unwrap();
    bank.update(&one(4.0, 1)).unwrap();
    let seq = [2.0, -1.0, 0.5];
    for &v in &seq {
        bank.update(&one(v, 0)).unwrap();
    }
    let expect = m * m * m * 0.3 + m * m * (1.0 - m) * 2.0 + m * (1.0 - m) * -1.0 + (1.0 - m) * 0.5;
    assert!((bank.prototype(0)[0] - expect).abs() < 1e-12);
    assert_eq!(bank.prototype(1), &[4.0]);
}

#[test]
fn prototypical_maps_index_the_bank() {
    let mut bank = PrototypeBank::new(3, 2, 0.999);
    bank.prototypes = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    bank.initialized = vec![true, true, false];
    let (m, mask) = bank.prototypical_map(&LabelMap::filled(2, 2, 1));
    assert_eq!(m.data(), &[3.0, 4.0].repeat(4)[..]);
    assert!(mask.iter().all(|&b| b));
    let (m, mask) = bank.prototypical_map(&LabelMap::filled(2, 2, IGNORE));
    assert!(m.data().iter().all(|&v| v == 0.0) && mask.iter().all(|&b| !b));
    let checker = labels(2, 3, &[0, 1, 2, 1, 0, IGNORE]);
    let (m, mask) = bank.prototypical_map(&checker);
    for (p, &l) in checker.data.iter().enumerate() {
        let row = &m.data()[p * 2..p * 2 + 2];
        if l < 2 {
            assert_eq!(row, bank.prototype(l as usize));
            assert!(mask[p]);
        } else {
            assert_eq!(row, &[0.0, 0.0]);
            assert!(!mask[p]);
        }
    }
}

#[test]
fn loss_matches_independent_oracle() {
    let mut r = rng(3);
    let cfg = AdaptConfig::default();
    for trial in 0..5 {
        let f = random_tensor(&[2, 2, 4], -3.0, 3.0, &mut r);
        let fhat = random_tensor(&[2, 2, 4], -3.0, 3.0, &mut r);
        let y = labels(2, 2, &(0..4).map(|_| r.gen_range(0..3)).collect::<Vec<_>>());
        let mask = if trial == 0 { vec![true; 4] } else { vec![true, false, true, true] };
        let got = eval_loss(&f, &fhat, &mask, &y, &cfg);
        let want = mpa_oracle(&f, &fhat, &mask, &y, &cfg);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn loss_reductions() {
    let mut r = rng(4);
    let f = random_tensor(&[2, 3, 4], -2.0, 2.0, &mut r);
    let y = labels(2, 3, &[0, 1, 2, 3, 0, 1]);
    let mask = vec![true; 6];
    // identical maps and λ = 1: zero loss
    let cfg = AdaptConfig { lambda: 1.0, ..AdaptConfig::default() };
    assert!(eval_loss(&f, &f, &mask, &y, &cfg).abs() < 1e-15);
    // λ = 0: plain cross-entropy over the feature channels
    let cfg = AdaptConfig { lambda: 0.0, ..AdaptConfig::default() };
    let other = random_tensor(&[2, 3, 4], -2.0, 2.0, &mut r);
    let ce = ksum((0..6).map(|p| -log_softmax(&f.data()[p * 4..p * 4 + 4], 1.0)[y.data[p] as usize])) / 6.0;
    assert!((eval_loss(&f, &other, &mask, &y, &cfg) - ce).abs() < 1e-12);
    // nothing valid: zero
    assert_eq!(eval_loss(&f, &other, &[false; 6], &y, &AdaptConfig::default()), 0.0);
}

#[test]
fn kl_term_sign_and_temperature_limit() {
    let mut r = rng(5);
    let f = random_tensor(&[2, 2, 4], -2.0, 2.0, &mut r);
    let y = labels(2, 2, &[0, 1, 2, 3]);
    let kl = |fhat: &Tensor, t: f64| {
        let cfg = AdaptConfig { lambda: 1.0, temperature: t, ..AdaptConfig::default() };
        eval_loss(&f, fhat, &[true; 4], &y, &cfg) / (t * t)
    };
    assert_eq!(kl(&f, 20.0), 0.0);
    let mut shifted = f.clone();
    shifted.data_mut()[3] += 0.5;
    assert!(kl(&shifted, 20.0) > 0.0);
    let far = random_tensor(&[2, 2, 4], -2.0, 2.0, &mut r);
    assert!(kl(&far, 1.0) > 0.0);
    assert!(kl(&far, 1e6) < 1e-6);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let fhat = random_tensor(&[2, 3, 5], -1.0, 1.0, &mut r);
    let y = labels(2, 3, &[0, 4, 2, 1, IGNORE, 3]);
    let (_, mask) = {
        let mut bank = PrototypeBank::new(5, 5, 0.9);
        bank.initialized = vec![true; 5];
        bank.prototypical_map(&y)
    };
    let cfg = AdaptConfig { temperature: 2.0, ..AdaptConfig::default() };
    for seed in 0..5 {
        let f = random_tensor(&[2, 3, 5], -2.0, 2.0, &mut rng(10 + seed));
        let rep = check(
            "mpa_loss",
            &[f],
            |g, v| mpa_loss(g, v[0], &fhat, &mask, &y, &cfg),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

fn tiny_scene(id: &str, seed: u64, labelled: Option<u8>) -> LabeledScene {
    LabeledScene {
        id: id.into(),
        domain: if labelled.is_some() { Domain::Pinhole } else { Domain::Panorama },
        image: random_tensor(&[32, 32, 3], 0.0, 1.0, &mut rng(seed)),
        labels: labelled.map(|k| LabelMap::filled(32, 32, k)),
    }
}

#[test]
fn init_bank_pools_both_domains() {
    let model = Trans4Pass::new(ModelConfig::nano(3), 7).unwrap();
    let cfg = AdaptConfig::default();
    let src = vec![tiny_scene("s0", 1, Some(0)), tiny_scene("s1", 2, Some(0))];
    let tgt = vec![tiny_scene("t0", 3, None)];

    let only = init_bank(&model, &src, &[], &cfg).unwrap();
    assert_eq!(only.initialized, vec![true, false, false]);
    // class 0 prototype = mean of all fused pixels of both source scenes
    let mut all = Vec::new();
    for s in &src {
        let mut g = Graph::new();
        let x = g.constant(s.image.clone()).unwrap();
        let out = model.forward(&mut g, x).unwrap();
        all.extend_from_slice(g.value(out.decoded.fused).data());
    }
    let c = model.cfg.c_emb;
    let n = all.len() / c;
    for j in 0..c {
        let m = ksum((0..n).map(|p| all[p * c + j])) / n as f64;
        assert!((only.prototype(0)[j] - m).abs() < 1e-12);
    }

    let mutual = init_bank(&model, &src, &tgt, &cfg).unwrap();
    assert_ne!(only, mutual);
    let added: u64 = mutual.initialized.iter().filter(|&&b| b).count() as u64;
    assert!(added >= 1);
    // target labels, if any were supplied, are discarded
    let labelled_tgt = vec![tiny_scene("t0", 3, Some(2))];
    assert_eq!(init_bank(&model, &src, &labelled_tgt, &cfg).unwrap(), mutual);
}

#[test]
fn total_loss_accounting() {
    let model = Trans4Pass::new(ModelConfig::nano(5), 8).unwrap();
    let mut g = Graph::new();
    let mut fwd = |seed| {
        let x = g.constant(random_tensor(&[32, 32, 3], 0.0, 1.0, &mut rng(seed))).unwrap();
        model.forward(&mut g, x).unwrap()
    };
    let src = vec![fwd(1), fwd(2)];
    let tgt = vec![fwd(3), fwd(4)];
    let ys: Vec<LabelMap> = (0..2)
        .map(|i| LabelMap::new(32, 32, (0..1024).map(|p| ((p / 7 + i) % 5) as u8).collect()).unwrap())
        .collect();
    let pseudo: Vec<LabelMap> = tgt.iter().map(|o| pseudo_label(g.value(o.logits), None)).collect();
    let mut bank = PrototypeBank::new(5, 32, 0.999);
    for (o, y) in src.iter().zip(&ys) {
        let mut s = ClassSums::new(5, 32);
        s.add(g.value(o.decoded.fused), &labels_at(y, 8, 8)).unwrap();
        bank.update(&s).unwrap();
    }
    let sb = DomainBatch { outputs: &src, labels: &ys };
    let tb = DomainBatch { outputs: &tgt, labels: &pseudo };
    let both = Objective { ssl: true, mpa: true };
    let cfg = AdaptConfig { alpha: 0.5, ..AdaptConfig::default() };
    let (loss, parts) = total_loss(&mut g, &sb, &tb, Some(&bank), &cfg, both).unwrap();
    let sum = parts.seg + parts.ssl.unwrap() + parts.mpa_s.unwrap() + parts.mpa_t.unwrap();
    assert!((sum - parts.total).abs() < 1e-12);
    assert_eq!(g.value(loss).item(), parts.total);
    // freshly initialized logits are near uniform
    assert!((parts.seg - 5f64.ln()).abs() < 0.05, "{}", parts.seg);

    let zero = AdaptConfig { alpha: 0.0, ..AdaptConfig::default() };
    let (_, p0) = total_loss(&mut g, &sb, &tb, Some(&bank), &zero, both).unwrap();
    assert!((p0.total - (p0.seg + p0.ssl.unwrap())).abs() < 1e-15);
    let ssl_only = Objective { ssl: true, mpa: false };
    let (_, p1) = total_loss(&mut g, &sb, &tb, None, &cfg, ssl_only).unwrap();
    assert_eq!(p1.total, p0.total);
    assert!(p1.mpa_s.is_none());
    let err = total_loss(&mut g, &sb, &tb, None, &cfg, both).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn bank_checkpoint_round_trip() {
    let mut bank = PrototypeBank::new(4, 3, 0.99);
    let mut s = ClassSums::new(4, 3);
    s.add(&random_tensor(&[2, 2, 3], -1.0, 1.0, &mut rng(9)), &labels(2, 2, &[0, 0, 2, IGNORE])).unwrap();
    bank.update(&s).unwrap();
    bank.update(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bank.save(dir.path()).unwrap();
    assert_eq!(PrototypeBank::load(dir.path()).unwrap(), bank);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bank.json")).unwrap()).unwrap();
    assert_eq!(json["classes"]["2"]["update_count"], 2);
    assert_eq!(json["classes"]["1"]["initialized"], false);
    assert!(PrototypeBank::load(&dir.path().join("missing")).is_err());
}

#[test]
fn config_validation() {
    assert!(AdaptConfig::default().validate().is_ok());
    for bad in [
        AdaptConfig { temperature: 0.0, ..AdaptConfig::default() },
        AdaptConfig { lambda: 1.5, ..AdaptConfig::default() },
        AdaptConfig { alpha: -1.0, ..AdaptConfig::default() },
        AdaptConfig { momentum: 1.0, ..AdaptConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
