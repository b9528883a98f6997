use camodiff_core::networks::{CamoDiffusion, ModelConfig};
use camodiff_core::nn::VarStore;
use camodiff_core::optim::{AdamW, OptimizerConfig};
use camodiff_core::rng::{randn, rng_from};
use camodiff_core::Result;
use candle_core::{Device, Tensor, D};

fn model(seed: u64) -> (VarStore, CamoDiffusion) {
    let store = VarStore::new(seed, Device::Cpu);
    let model = CamoDiffusion::new(&store, &ModelConfig::default()).unwrap();
    (store, model)
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    randn(&mut rng_from(seed), shape, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
}

#[test]
fn default_model_is_desk_sized() {
    let (store, _) = model(0);
    let n = store.num_parameters();
    assert!(n > 100_000 && n < 10_000_000, "{n} parameters");
}

#[test]
fn pyramid_scales_halve_per_stage() -> Result<()> {
    let (_, m) = model(0);
    let img = normal(1, &[1, 3, 64, 64]);
    let xt = normal(2, &[1, 1, 64, 64]);
    let p = m.pyramid(&xt, &img, &[0.5])?;
    let chans = ModelConfig::default().atcn.stage_channels;
    for (i, (f, side)) in p.maps.iter().zip([16, 8, 4, 2]).enumerate() {
        assert_eq!(f.dims(), &[1, chans[i], side, side]);
        let v: Vec<f32> = f.flatten_all()?.to_vec1()?;
        assert!(v.iter().all(|x| x.is_finite()));
    }
    Ok(())
}

#[test]
fn zoe_embedding_ignores_mask_at_init() -> Result<()> {
    let (_, m) = model(3);
    let img = normal(1, &[1, 3, 64, 64]);
    let a = m.atcn().zoe_embed(&img, &normal(2, &[1, 1, 64, 64]))?;
    let b = m.atcn().zoe_embed(&img, &normal(3, &[1, 1, 64, 64]))?;
    assert_eq!(a.dims(), &[1, 256, 32]);
    assert!(max_abs_diff(&a, &b) < 1e-6);
    let pa = m.pyramid(&normal(2, &[1, 1, 64, 64]), &img, &[0.3])?;
    let pb = m.pyramid(&normal(3, &[1, 1, 64, 64]), &img, &[0.3])?;
    for (fa, fb) in pa.maps.iter().zip(&pb.maps) {
        assert!(max_abs_diff(fa, fb) < 1e-5);
    }
    Ok(())
}

#[test]
fn zoe_embedding_rejects_bad_shapes() {
    let (_, m) = model(0);
    let img = normal(1, &[1, 3, 62, 62]);
    assert!(m.atcn().zoe_embed(&img, &normal(2, &[1, 1, 62, 62])).is_err());
    let img = normal(1, &[1, 3, 64, 64]);
    assert!(m.atcn().zoe_embed(&img, &normal(2, &[1, 1, 32, 32])).is_err());
}

#[test]
fn mask_branch_matters_after_one_step() -> Result<()> {
    let (store, m) = model(4);
    let img = normal(1, &[1, 3, 64, 64]);
    let xa = normal(2, &[1, 1, 64, 64]);
    let xb = normal(3, &[1, 1, 64, 64]);
    let mut opt = AdamW::new(store.named_vars(), OptimizerConfig::default())?;
    let tokens = m.atcn().zoe_embed(&img, &xa)?;
    let loss = tokens.sqr()?.mean_all()?;
    opt.step(&loss.backward()?, 1e-2)?;
    let a = m.atcn().zoe_embed(&img, &xa)?;
    let b = m.atcn().zoe_embed(&img, &xb)?;
    assert!(max_abs_diff(&a, &b) > 1e-6);
    Ok(())
}

#[test]
fn time_tokens_are_deterministic_and_distinct() -> Result<()> {
    let (_, m) = model(0);
    let temb = m.time_embedding(&[0.05, 0.05, 0.95])?;
    for stage in 0..4 {
        let tok = m.atcn().time_token(stage, &temb)?;
        assert_eq!(tok.dims(), &[3, 1, ModelConfig::default().atcn.stage_channels[stage]]);
        assert_eq!(max_abs_diff(&tok.get(0)?, &tok.get(1)?), 0.0);
        assert!(max_abs_diff(&tok.get(0)?, &tok.get(2)?) > 0.0);
    }
    assert!(m.atcn().time_token(4, &temb).is_err());
    Ok(())
}

#[test]
fn local_emphasis_unifies_scale() -> Result<()> {
    let (_, m) = model(0);
    let p = m.pyramid(&normal(2, &[1, 1, 64, 64]), &normal(1, &[1, 3, 64, 64]), &[0.5])?;
    let up = m.fusion().upsample(&p)?;
    let width = m.fusion().width();
    for u in &up {
        assert_eq!(u.dims(), &[1, width, 16, 16]);
        let v: Vec<f32> = u.flatten_all()?.to_vec1()?;
        assert!(v.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }
    let z1 = m.fusion().fuse(&up)?;
    assert_eq!(z1.dims(), &[1, width, 16, 16]);
    assert!(m.fusion().fuse(&up[..3]).is_err());
    let mut mixed = up.clone();
    mixed[0] = mixed[0].narrow(2, 0, 8)?;
    assert!(m.fusion().fuse(&mixed).is_err());
    Ok(())
}

#[test]
fn fusion_is_sensitive_to_every_level() -> Result<()> {
    let (_, m) = model(5);
    let p = m.pyramid(&normal(2, &[1, 1, 64, 64]), &normal(1, &[1, 3, 64, 64]), &[0.5])?;
    let up = m.fusion().upsample(&p)?;
    let z1 = m.fusion().fuse(&up)?;
    for i in 0..4 {
        let mut ablated = up.clone();
        ablated[i] = ablated[i].zeros_like()?;
        assert!(max_abs_diff(&z1, &m.fusion().fuse(&ablated)?) > 1e-6, "level {}", i + 1);
    }
    Ok(())
}

#[test]
fn output_matches_mask_shape_and_range() -> Result<()> {
    let (_, m) = model(0);
    let xt = (normal(2, &[2, 1, 64, 64]) * 5.0)?;
    let out = m.forward(&xt, &normal(1, &[2, 3, 64, 64]), &[0.2, 0.8])?;
    assert_eq!(out.dims(), xt.dims());
    let v: Vec<f32> = out.flatten_all()?.to_vec1()?;
    assert!(v.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    assert!(m.forward(&xt, &normal(1, &[2, 3, 64, 64]), &[0.2]).is_err());
    Ok(())
}

#[test]
fn time_modulates_output() -> Result<()> {
    let (_, m) = model(0);
    let xt = normal(2, &[1, 1, 64, 64]);
    let img = normal(1, &[1, 3, 64, 64]);
    let a = m.forward(&xt, &img, &[0.1])?;
    let b = m.forward(&xt, &img, &[0.9])?;
    assert!(max_abs_diff(&a, &b) > 1e-6);
    assert_eq!(max_abs_diff(&a, &m.forward(&xt, &img, &[0.1])?), 0.0);
    Ok(())
}

#[test]
fn batch_items_are_independent() -> Result<()> {
    let (_, m) = model(0);
    let xt = normal(2, &[2, 1, 64, 64]);
    let img = normal(1, &[2, 3, 64, 64]);
    let both = m.forward(&xt, &img, &[0.3, 0.7])?;
    for (i, s) in [0.3, 0.7].into_iter().enumerate() {
        let one = m.forward(&xt.narrow(0, i, 1)?, &img.narrow(0, i, 1)?, &[s])?;
        assert!(max_abs_diff(&one, &both.narrow(0, i, 1)?) < 1e-5);
    }
    Ok(())
}

#[test]
fn gradient_reaches_every_parameter() -> Result<()> {
    let (store, m) = model(6);
    // One optimizer step first so the zero-initialized mask branch passes gradient
    // on to the layers behind it.
    let img = normal(1, &[2, 3, 64, 64]);
    let xt = normal(2, &[2, 1, 64, 64]);
    let target = normal(3, &[2, 1, 64, 64]).tanh()?;
    let mut opt = AdamW::new(store.named_vars(), OptimizerConfig::default())?;
    let loss = (m.forward(&xt, &img, &[0.3, 0.6])? - &target)?.sqr()?.mean_all()?;
    opt.step(&loss.backward()?, 1e-3)?;
    let loss = (m.forward(&xt, &img, &[0.3, 0.6])? - &target)?.sqr()?.mean_all()?;
    let grads = loss.backward()?;
    let mut missing = Vec::new();
    for (name, var) in store.named_vars() {
        let g = grads.get(var.as_tensor());
        let nonzero = match g {
            Some(g) => g.abs()?.flatten_all()?.max(D::Minus1)?.to_scalar::<f32>()? > 0.0,
            None => false,
        };
        if !nonzero {
            missing.push(name);
        }
    }
    assert!(missing.is_empty(), "no gradient for {missing:?}");
    Ok(())
}
