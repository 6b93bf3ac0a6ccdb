use rand::Rng as _;

use c2vae::model::*;
use c2vae::tensor::{Graph, Tensor, Var};
use c2vae::copula::coupled_sample;
use c2vae::rng::seeded;

fn small() -> ModelConfig {
    ModelConfig {
        input: 16,
        latent: 3,
        enc_hidden: vec![8, 8],
        dec_hidden: vec![8, 8],
        cls_hidden: vec![8, 8],
        cov_features: 6,
        gmm_components: 2,
    }
}

fn image(seed: u64, p: usize) -> Vec<f64> {
    let mut r = seeded(seed);
    (0..p).map(|_| if r.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn encode_contract() {
    let m = ModelBundle::init(small(), 1).unwrap();
    let x = image(0, 16);
    let q = m.encode(&x).unwrap();
    assert_eq!((q.mu.len(), q.logvar.len()), (3, 3));
    assert_eq!(q, m.encode(&x).unwrap());
    assert!(m.encode(&x[..15]).is_err());
}

#[test]
fn logvar_is_clamped() {
    let mut m = ModelBundle::init(small(), 1).unwrap();
    let last = m.encoder.layers.last_mut().unwrap();
    for j in 3..6 {
        last.bias.data_mut()[j] = if j == 3 { 1e3 } else { -1e3 };
    }
    let q = m.encode(&image(1, 16)).unwrap();
    assert_eq!(q.logvar[0], LOGVAR_CLAMP);
    assert_eq!(q.logvar[1], -LOGVAR_CLAMP);
    for s in q.std() {
        assert!((-5.0f64).exp() <= s && s <= 5f64.exp());
    }
}

#[test]
fn recorded_and_tape_free_passes_agree() {
    let m = ModelBundle::init(small(), 4).unwrap();
    let x = Tensor::new(vec![2, 16], [image(1, 16), image(2, 16)].concat()).unwrap();
    let (mu, lv) = m.encode_batch(&x).unwrap();
    let mut g = Graph::new();
    let p = m.encoder.bind(&mut g, false).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let post = m.encode_on(&mut g, &p, xv).unwrap();
    assert_eq!(g.value(post.mu), &mu);
    assert_eq!(g.value(post.logvar), &lv);
    let dp = m.decoder.bind(&mut g, false).unwrap();
    let logits = m.decode_on(&mut g, &dp, post.mu).unwrap();
    assert_eq!(g.value(logits), &m.decode_batch(&mu).unwrap());
}

#[test]
fn encoder_mean_gradient_matches_finite_differences() {
    let m = ModelBundle::init(small(), 2).unwrap();
    let x = Tensor::new(vec![1, 16], image(3, 16)).unwrap();
    let mut g = Graph::new();
    let p = m.encoder.bind(&mut g, true).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let post = m.encode_on(&mut g, &p, xv).unwrap();
    let loss = g.sum(post.mu, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.wrt(p[0]);
    let h = 1e-5;
    let f = |m: &ModelBundle| m.encode_batch(&x).unwrap().0.data().iter().sum::<f64>();
    let mut checked = 0;
    for idx in 0..m.encoder.layers[0].weight.len() {
        if gw.data()[idx] == 0.0 && checked > 20 {
            continue;
        }
        let mut plus = m.clone();
        plus.encoder.layers[0].weight.data_mut()[idx] += h;
        let mut minus = m.clone();
        minus.encoder.layers[0].weight.data_mut()[idx] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let a = gw.data()[idx];
        assert!(rel_err(a, fd) < 1e-4 || (a - fd).abs() < 1e-9, "w[{idx}]: {a} vs {fd}");
        checked += 1;
    }
}

#[test]
fn fresh_covariance_encoder_is_independence() {
    let m = ModelBundle::init(small(), 3).unwrap();
    let c = m.encode_cov(&image(4, 16)).unwrap();
    assert_eq!(c.sigma.len(), 9);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((c.sigma[i * 3 + j] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn covariance_encoder_sigma_has_unit_diagonal() {
    let mut m = ModelBundle::init(small(), 3).unwrap();
    let mut r = seeded(9);
    for v in m.cov_heads.v_weight.data_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    for s in 0..20 {
        let c = m.encode_cov(&image(s, 16)).unwrap();
        for i in 0..3 {
            assert!((c.sigma[i * 4] - 1.0).abs() < 1e-12);
        }
        assert!(c.sigma.iter().enumerate().any(|(p, &x)| p % 4 != 0 && x.abs() > 1e-6));
    }
}

/// Loss `Σ c ⊙ z_p` of a coupled sample whose `w`, `v` come from the covariance encoder.
fn coupled_loss(m: &ModelBundle, x: &Tensor, eps: &Tensor, c: &[f64], trainable: bool) -> (f64, Option<Tensor>) {
    let mut g = Graph::new();
    let ep = m.encoder.bind(&mut g, false).unwrap();
    let cp = m.bind_cov(&mut g, trainable).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let post = m.encode_on(&mut g, &ep, xv).unwrap();
    let half = g.mul_scalar(post.logvar, 0.5).unwrap();
    let sigma = g.exp(half).unwrap();
    let cv = m.copula_on(&mut g, &cp, xv).unwrap();
    let z = coupled_sample(&mut g, post.mu, sigma, cv.w, cv.v, eps).unwrap();
    let cvec = g.constant(Tensor::new(g.shape(z).to_vec(), c.to_vec()).unwrap()).unwrap();
    let prod = g.mul(z, cvec).unwrap();
    let loss = g.sum(prod, None).unwrap();
    let value = g.value(loss).item();
    let grad = trainable.then(|| g.backward(loss).unwrap().wrt(cp[0]));
    (value, grad)
}

#[test]
fn gradient_reaches_covariance_encoder_through_cholesky() {
    let mut m = ModelBundle::init(small(), 5).unwrap();
    let mut r = seeded(10);
    for v in m.cov_heads.v_weight.data_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    let x = Tensor::new(vec![2, 16], [image(5, 16), image(6, 16)].concat()).unwrap();
    let eps = Tensor::new(vec![2, 3], (0..6).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let c: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, grad) = coupled_loss(&m, &x, &eps, &c, true);
    let grad = grad.unwrap();
    let h = 1e-5;
    let mut nonzero = 0;
    for idx in (0..m.cov_encoder.layers[0].weight.len()).step_by(7) {
        let mut plus = m.clone();
        plus.cov_encoder.layers[0].weight.data_mut()[idx] += h;
        let mut minus = m.clone();
        minus.cov_encoder.layers[0].weight.data_mut()[idx] -= h;
        let fd = (coupled_loss(&plus, &x, &eps, &c, false).0 - coupled_loss(&minus, &x, &eps, &c, false).0) / (2.0 * h);
        let a = grad.data()[idx];
        assert!(rel_err(a, fd) < 1e-4 || (a - fd).abs() < 1e-9, "w[{idx}]: {a} vs {fd}");
        if fd.abs() > 1e-6 {
            nonzero += 1;
        }
    }
    assert!(nonzero > 0);
}

#[test]
fn gmm_heads_start_as_identical_components() {
    let m = ModelBundle::init(small(), 6).unwrap();
    let x = Tensor::new(vec![1, 16], image(7, 16)).unwrap();
    let mut g = Graph::new();
    let p = m.bind_cov(&mut g, false).unwrap();
    let xv = g.constant(x).unwrap();
    let gm = m.gmm_on(&mut g, &p, xv).unwrap();
    assert_eq!(g.value(gm.logits).data(), &[0.0, 0.0]);
    for c in 0..2 {
        assert!(g.value(gm.delta[c]).data().iter().all(|&v| v == 0.0));
        assert!(g.value(gm.log_scale[c]).data().iter().all(|&v| v == 0.0));
        assert!(g.value(gm.v[c]).data().iter().all(|&v| v == 0.0));
        assert!(g.value(gm.w[c]).data().iter().all(|&v| v > 0.0));
    }
    let plain = ModelBundle::init(ModelConfig { gmm_components: 0, ..small() }, 6).unwrap();
    let mut g = Graph::new();
    let p = plain.bind_cov(&mut g, false).unwrap();
    let xv = g.constant(Tensor::zeros(&[1, 16])).unwrap();
    assert!(plain.gmm_on(&mut g, &p, xv).is_err());
}

fn bce_sum(g: &mut Graph, logits: Var, x: Var) -> Var {
    let sp = g.softplus(logits).unwrap();
    let xl = g.mul(x, logits).unwrap();
    let nll = g.sub(sp, xl).unwrap();
    g.sum(nll, None).unwrap()
}

#[test]
fn decoder_contract_and_single_image_autoencoding() {
    let mut m = ModelBundle::init(small(), 7).unwrap();
    let logits = m.decode(&[0.3, -1.0, 2.0]).unwrap();
    assert_eq!(logits.len(), 16);
    assert!(logits.iter().map(|&l| c2vae::tensor::sigmoid(l)).all(|p| p > 0.0 && p < 1.0));
    assert!(m.decode(&[0.0; 2]).is_err());

    let x = Tensor::new(vec![1, 16], image(8, 16)).unwrap();
    let mut opt_e = AdamState::new(AdamConfig::with_lr(1e-2), &m.group(Group::Encoder));
    let mut opt_d = AdamState::new(AdamConfig::with_lr(1e-2), &m.group(Group::Decoder));
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new();
        let ep = m.encoder.bind(&mut g, true).unwrap();
        let dp = m.decoder.bind(&mut g, true).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let post = m.encode_on(&mut g, &ep, xv).unwrap();
        let logits = m.decode_on(&mut g, &dp, post.mu).unwrap();
        let loss = bce_sum(&mut g, logits, xv);
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        let ge: Vec<Tensor> = ep.iter().map(|&v| grads.wrt(v)).collect();
        let gd: Vec<Tensor> = dp.iter().map(|&v| grads.wrt(v)).collect();
        opt_e.update(&mut m.group_mut(Group::Encoder), &ge).unwrap();
        opt_d.update(&mut m.group_mut(Group::Decoder), &gd).unwrap();
    }
    assert!(losses[199] < 0.1 * losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn classifier_starts_at_chance() {
    let m = ModelBundle::init(small(), 8).unwrap();
    let z = [0.5, -2.0, 1.0];
    assert_eq!(m.classify(&z).unwrap(), 0.0);
    assert_eq!(c2vae::tensor::sigmoid(m.classify(&z).unwrap()), 0.5);
    assert_eq!(m.classify(&z).unwrap(), m.classify(&z).unwrap());
    assert!(m.classify(&[0.0; 4]).is_err());
}

#[test]
fn classifier_separates_toy_clusters() {
    let mut m = ModelBundle::init(small(), 9).unwrap();
    let mut r = seeded(11);
    let n = 64;
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-2), &m.group(Group::Classifier));
    let sample = |r: &mut c2vae::rng::Rng, centre: f64| -> Vec<f64> { (0..3).map(|_| centre + r.random_range(-0.5..0.5)).collect() };
    for _ in 0..200 {
        let pos: Vec<f64> = (0..n).flat_map(|_| sample(&mut r, 1.0)).collect();
        let neg: Vec<f64> = (0..n).flat_map(|_| sample(&mut r, -1.0)).collect();
        let mut g = Graph::new();
        let p = m.classifier.bind(&mut g, true).unwrap();
        let zq = g.constant(Tensor::new(vec![n, 3], pos).unwrap()).unwrap();
        let zp = g.constant(Tensor::new(vec![n, 3], neg).unwrap()).unwrap();
        let lq = m.classify_on(&mut g, &p, zq).unwrap();
        let lp = m.classify_on(&mut g, &p, zp).unwrap();
        let nq = g.neg(lq).unwrap();
        let a = g.softplus(nq).unwrap();
        let b = g.softplus(lp).unwrap();
        let sa = g.mean(a, None).unwrap();
        let sb = g.mean(b, None).unwrap();
        let loss = g.add(sa, sb).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs: Vec<Tensor> = p.iter().map(|&v| grads.wrt(v)).collect();
        opt.update(&mut m.group_mut(Group::Classifier), &gs).unwrap();
    }
    let mut correct = 0;
    for _ in 0..200 {
        correct += (m.classify(&sample(&mut r, 1.0)).unwrap() > 0.0) as usize;
        correct += (m.classify(&sample(&mut r, -1.0)).unwrap() < 0.0) as usize;
    }
    assert!(correct as f64 / 400.0 > 0.95, "accuracy {}", correct as f64 / 400.0);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
    let mut opt = AdamState::new(AdamConfig::default(), &[&p]);
    for _ in 0..5 {
        opt.update(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
    }
    assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn adam_first_step_is_lr() {
    let cfg = AdamConfig::with_lr(1e-3);
    let mut p = Tensor::vector(vec![0.5]);
    let mut opt = AdamState::new(cfg, &[&p]);
    opt.update(&mut [&mut p], &[Tensor::vector(vec![1.0])]).unwrap();
    // m̂ = v̂ = 1
    let want = 0.5 - cfg.lr * 1.0 / (1.0 + cfg.eps);
    assert!((p.data()[0] - want).abs() < 1e-15);
    assert_eq!(opt.step, 1);
}

#[test]
fn adam_minimizes_a_parabola() {
    let mut p = Tensor::vector(vec![1.0]);
    let mut opt = AdamState::new(AdamConfig::with_lr(0.01), &[&p]);
    let mut reached = None;
    for step in 1..=2000 {
        let g = Tensor::vector(vec![2.0 * p.data()[0]]);
        opt.update(&mut [&mut p], &[g]).unwrap();
        if p.data()[0].abs() < 0.01 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "theta = {}", p.data()[0]);
}

#[test]
fn adam_errors() {
    let mut p = Tensor::vector(vec![1.0, 2.0]);
    let mut opt = AdamState::new(AdamConfig::default(), &[&p]);
    assert!(opt.update(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    assert!(opt.update(&mut [&mut p], &[Tensor::vector(vec![f64::NAN, 0.0])]).is_err());
    assert!(opt.update(&mut [&mut p], &[]).is_err());
    assert_eq!(opt.step, 0);
    assert_eq!(p.data(), &[1.0, 2.0]);
}

#[test]
fn parameter_count_audit() {
    let cfg = ModelConfig::new(256, 10);
    let (p, d, h, f) = (256, 10, 256, 20);
    let encoder = (p * h + h) + (h * h + h) + (h * 2 * d + 2 * d);
    let cov = (p * h + h) + (h * h + h) + (h * f + f) + 2 * (f * d + d);
    let decoder = (d * h + h) + (h * h + h) + (h * p + p);
    let classifier = (d * h + h) + 3 * (h * h + h) + (h + 1);
    let m = ModelBundle::init(cfg.clone(), 0).unwrap();
    assert_eq!(m.param_count(), encoder + cov + decoder + classifier);
    assert_eq!(cfg.param_count().unwrap(), m.param_count());

    let k = 2;
    let gmm = ModelConfig { gmm_components: k, ..cfg };
    let extra = (f * k + k) + 4 * (f * k * d + k * d);
    assert_eq!(ModelBundle::init(gmm.clone(), 0).unwrap().param_count(), m.param_count() + extra);
    assert_eq!(gmm.param_count().unwrap(), m.param_count() + extra);
}

#[test]
fn invalid_configs() {
    assert!(ModelBundle::init(ModelConfig { latent: 0, ..small() }, 0).is_err());
    assert!(ModelBundle::init(ModelConfig { gmm_components: 1, ..small() }, 0).is_err());
    assert!(ModelBundle::init(ModelConfig { enc_hidden: vec![8, 0], ..small() }, 0).is_err());
    assert!(MlpSpec::new(vec![3], vec![]).is_err());
    assert!(MlpSpec::new(vec![3, 4], vec![]).is_err());
}

#[test]
fn init_is_deterministic_and_groups_are_named() {
    let a = ModelBundle::init(small(), 12).unwrap();
    assert_eq!(a, ModelBundle::init(small(), 12).unwrap());
    assert_ne!(a, ModelBundle::init(small(), 13).unwrap());
    for g in Group::ALL {
        assert_eq!(a.group_names(g).len(), a.group(g).len());
        assert_eq!(a.group_fingerprint(g), a.clone().group_fingerprint(g));
    }
    let mut b = a.clone();
    b.decoder.layers[1].bias.data_mut()[0] += 1e-12;
    assert_ne!(a.group_fingerprint(Group::Decoder), b.group_fingerprint(Group::Decoder));
    assert_eq!(a.group_fingerprint(Group::Encoder), b.group_fingerprint(Group::Encoder));
}

#[test]
fn checkpoint_round_trip() {
    let m = ModelBundle::init(small(), 14).unwrap();
    let ckpt = Checkpoint { model: m, step: 42, config: vec![("mode".into(), "c2vae".into()), ("gamma".into(), "6.4".into())] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest["step"], 42);
    assert_eq!(manifest["config_hash"], config_hash(&ckpt.config));
    assert_eq!(manifest["tensors"][0]["name"], "encoder.0.weight");

    let tampered = text.replace("6.4", "6.5");
    let mut bad = tampered.into_bytes();
    bad.extend_from_slice(&bytes[text.len()..]);
    std::fs::write(&path, &bad).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
