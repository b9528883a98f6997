//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use camodiff_core::ablation::score_maps;
use camodiff_core::config::RunConfig;
use camodiff_core::data::{make_synthetic, DatasetSample};
use camodiff_core::inference::{gt_of, mask_iou, write_png, Predictor, SamplePrediction};
use camodiff_core::losses::{boundary_weights, weighted_bce, weighted_iou};
use camodiff_core::metrics::{e_measure, mae, s_measure, weighted_f_measure, Scores};
use camodiff_core::networks::{CamoDiffusion, Denoiser, ModelConfig};
use camodiff_core::nn::VarStore;
use camodiff_core::rng::{randn, rng_from};
use camodiff_core::sampler::{consensus, majority_vote, run_chains, SampleMode};
use camodiff_core::schedule::{default_shift, NoiseSchedule, ScheduleKind};
use camodiff_core::trainer::{device_from_env, train_loop};
use camodiff_core::Result;
use candle_core::{DType, Device, Tensor, Var};
use ndarray::{array, Array2};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, elapsed: Duration, outcome: Result<Outcome>) -> bool {
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n} {:<4} {name} ({:.1} s): {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

// ------------------------------------------------------------------ 1

fn schedule_analytics() -> Result<Outcome> {
    let (mut mono, mut marginal, mut posterior, mut midpoint) = (true, 0f64, 0f64, 0f64);
    for t in [10, 1000] {
        for shift in [0.0, default_shift()] {
            let s = NoiseSchedule::new(ScheduleKind::SnrShifted, t, shift)?;
            for i in 1..=t {
                let (ab, prev) = (s.alpha_bar(i)?, s.alpha_bar(i - 1)?);
                mono &= ab < prev && ab > 0.0;
                let (a, b) = s.forward_marginal_params(i)?;
                marginal = marginal.max((a * a + b * b - 1.0).abs());
                let c = s.posterior_coeffs(i)?;
                posterior = posterior.max((c.c_xt * ab.sqrt() + c.c_x0 - prev.sqrt()).abs());
            }
            if shift == 0.0 {
                midpoint = midpoint.max((s.alpha_bar(t / 2)? - 0.5).abs());
            }
        }
    }
    Ok(Outcome {
        pass: mono && marginal < 1e-12 && posterior < 1e-9 && midpoint < 1e-9,
        detail: format!("monotone {mono}, max|a²+b²−1| {marginal:.1e}, max posterior err {posterior:.1e}, |ᾱ(½)−½| {midpoint:.1e}"),
    })
}

// ------------------------------------------------------------------ 2

/// Returns the true clean mask at every step.
struct Oracle {
    x0: Tensor,
}

impl Denoiser for Oracle {
    fn predict_x0(&self, _x_t: &Tensor, _image: &Tensor, _t: usize, _s: &NoiseSchedule) -> Result<Tensor> {
        Ok(self.x0.clone())
    }
}

/// Final chain states of the oracle run, one per seed.
fn oracle_chains(seeds: &[u64]) -> Result<(Vec<f32>, f32)> {
    let sample = &make_synthetic(&Default::default())?[0];
    let (h, w) = sample.mask.dim();
    let dev = Device::Cpu;
    let plane = sample.mask.iter().copied().collect::<Vec<f32>>();
    let x0 = Tensor::from_vec(plane.repeat(seeds.len()), (seeds.len(), 1, h, w), &dev)?;
    let images = Tensor::zeros((seeds.len(), 3, h, w), DType::F32, &dev)?;
    let schedule = NoiseSchedule::new(ScheduleKind::SnrShifted, 10, default_shift())?;
    let (_, last) = run_chains(&Oracle { x0: x0.clone() }, &images, &schedule, seeds)?;
    let err = (&last - &x0)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
    Ok((last.flatten_all()?.to_vec1()?, err))
}

fn oracle_recovery() -> Result<Outcome> {
    let (_, err) = oracle_chains(&[0, 1, 2])?;
    Ok(Outcome { pass: err < 1e-6, detail: format!("|final − x0|∞ = {err:.1e} over 3 chains") })
}

// ------------------------------------------------------------------ 3

fn zoe_invariance() -> Result<Outcome> {
    let store = VarStore::new(0, Device::Cpu);
    let model = CamoDiffusion::new(&store, &ModelConfig::default())?;
    let mut rng = rng_from(3);
    let image = randn(&mut rng, &[1, 3, 64, 64], &Device::Cpu)?;
    let xa = randn(&mut rng, &[1, 1, 64, 64], &Device::Cpu)?;
    let xb = (randn(&mut rng, &[1, 1, 64, 64], &Device::Cpu)? * 3.0)?;
    let pa = model.pyramid(&xa, &image, &[0.4])?;
    let pb = model.pyramid(&xb, &image, &[0.4])?;
    let mut diff = 0f32;
    for (a, b) in pa.maps.iter().zip(&pb.maps) {
        diff = diff.max((a - b)?.abs()?.flatten_all()?.max(0)?.to_scalar()?);
    }
    Ok(Outcome { pass: diff < 1e-5, detail: format!("max pyramid difference {diff:.1e}") })
}

// ------------------------------------------------------------------ 4

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

type LossFn = fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>;

fn loss_gradients() -> Result<Outcome> {
    let dev = Device::Cpu;
    let h = 1e-4;
    let mut rng = rng_from(4);
    let mut worst = [0f64; 2];
    let instances = 25;
    for _ in 0..instances {
        let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
        let g = Array2::from_shape_fn((4, 4), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let mut w = boundary_weights(g.view())?;
        w.mapv_inplace(|v| v * rng.random_range(0.5..1.5));
        let gt = Tensor::from_vec(g.iter().copied().collect::<Vec<f64>>(), (1, 1, 4, 4), &dev)?;
        let wt = Tensor::from_vec(w.iter().copied().collect::<Vec<f64>>(), (1, 1, 4, 4), &dev)?;
        let losses: [LossFn; 2] = [weighted_bce, weighted_iou];
        for (k, f) in losses.iter().enumerate() {
            let var = Var::from_tensor(&Tensor::from_vec(p.clone(), (1, 1, 4, 4), &dev)?)?;
            let loss = f(var.as_tensor(), &gt, &wt)?;
            let grads = loss.backward()?;
            let analytic: Vec<f64> = grads.get(var.as_tensor()).expect("gradient").flatten_all()?.to_vec1()?;
            let eval = |q: &[f64]| -> Result<f64> {
                let t = Tensor::from_vec(q.to_vec(), (1, 1, 4, 4), &dev)?;
                Ok(f(&t, &gt, &wt)?.to_scalar::<f64>()?)
            };
            let mut numeric = Vec::with_capacity(16);
            for i in 0..16 {
                let (mut up, mut down) = (p.clone(), p.clone());
                up[i] += h;
                down[i] -= h;
                numeric.push((eval(&up)? - eval(&down)?) / (2.0 * h));
            }
            worst[k] = worst[k].max(relative_error(&analytic, &numeric));
        }
    }
    Ok(Outcome {
        pass: worst[0] < 1e-3 && worst[1] < 1e-3,
        detail: format!("{instances} instances, worst relative error: w_bce {:.1e}, w_iou {:.1e}", worst[0], worst[1]),
    })
}

// ------------------------------------------------------------------ 5

fn cte_enumeration() -> Result<Outcome> {
    let mut mismatches = 0;
    for n in 1..=30usize {
        for k in 0..=n {
            // floor(k/n + 1/2) in exact integer arithmetic.
            let floor_vote = (2 * k + n) / (2 * n) == 1;
            let strict_or_tie = 2 * k > n || 2 * k == n;
            if floor_vote != strict_or_tie || majority_vote(k, n) != floor_vote {
                mismatches += 1;
            }
        }
    }
    let probs = vec![array![[0.8]], array![[0.7]], array![[0.3]]];
    let yes_yes_no = consensus(&[array![[true]], array![[true]], array![[false]]], &probs)?[[0, 0]];
    let yes_no_no = consensus(&[array![[true]], array![[false]], array![[false]]], &probs)?[[0, 0]];
    let want = (0.8 + 0.7 + 0.3) / 3.0;
    Ok(Outcome {
        pass: mismatches == 0 && yes_yes_no == want && (want - 0.6).abs() <= f64::EPSILON && yes_no_no == 0.0,
        detail: format!("{mismatches} vote mismatches for N ≤ 30, {{1,1,0}} → {yes_yes_no}, {{1,0,0}} → {yes_no_no}"),
    })
}

// ------------------------------------------------------------------ 6

fn metric_oracles() -> Result<Outcome> {
    let mut rng = rng_from(6);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (p, g) = common::random_pair(&mut rng, 16, 16);
        for (a, b) in [
            (mae(p.view(), g.view())?, common::mae(&p, &g)),
            (s_measure(p.view(), g.view())?, common::s_measure(&p, &g)),
            (weighted_f_measure(p.view(), g.view())?, common::weighted_f(&p, &g)),
            (e_measure(p.view(), g.view())?, common::e_measure(&p, &g)),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    let mut anchor = 0f64;
    for sample in make_synthetic(&Default::default())? {
        let g = gt_of(&sample);
        let s = Scores::compute(common::as_float(&g).view(), g.view())?;
        anchor = anchor.max(s.mae).max((1.0 - s.s_alpha).abs()).max((1.0 - s.f_beta_w).abs()).max((1.0 - s.e_phi).abs());
    }
    Ok(Outcome {
        pass: worst < 1e-6 && anchor <= 1e-12,
        detail: format!("max oracle difference {worst:.1e} on 100 pairs, max anchor deviation {anchor:.1e}"),
    })
}

// ------------------------------------------------------------- 7, 8, 9

struct DeskRun {
    data: Vec<DatasetSample>,
    cte: Vec<SamplePrediction>,
    t1: Vec<SamplePrediction>,
    train_time: Duration,
    sample_time: Duration,
    ablation_time: Duration,
}

fn desk_run(dir: &Path) -> Result<DeskRun> {
    let mut cfg = RunConfig::default();
    cfg.output.dir = dir.join("run");
    let (ckpt, train_time) = timed(|| train_loop(&cfg, None));
    let ckpt = camodiff_core::checkpoint::Checkpoint::load(&ckpt?, &Device::Cpu)?;
    let predictor = Predictor::from_checkpoint(&ckpt, None, device_from_env()?)?;
    let data = camodiff_core::trainer::load_training_set(&cfg, cfg.data.resolution)?;
    let seed = cfg.sampler.seed;
    let (cte, sample_time) = timed(|| predictor.predict(&data, SampleMode::Single, seed, cfg.sampler.batch_size));
    let (t1, ablation_time) = timed(|| predictor.with_steps(1)?.predict(&data, SampleMode::Single, seed, cfg.sampler.batch_size));
    let run = DeskRun { data, cte: cte?, t1: t1?, train_time, sample_time, ablation_time };
    for (sub, preds) in [("cte", &run.cte), ("final", &run.cte), ("t1", &run.t1)] {
        let out = dir.join("pred").join(sub);
        std::fs::create_dir_all(&out)?;
        for p in preds.iter() {
            let map = if sub == "final" { &p.final_x0 } else { &p.mask };
            write_png(&out.join(format!("{}.png", p.id)), map)?;
        }
    }
    Ok(run)
}

fn desk_overfit(run: &DeskRun) -> Result<Outcome> {
    let mut iou = 0.0;
    let mut err = 0.0;
    for (p, s) in run.cte.iter().zip(&run.data) {
        let g = gt_of(s);
        iou += mask_iou(&p.mask, &g)?;
        err += mae(p.mask.view(), g.view())?;
    }
    let n = run.data.len() as f64;
    let (iou, err) = (iou / n, err / n);
    let total = run.train_time + run.sample_time;
    Ok(Outcome {
        pass: iou >= 0.85 && err <= 0.05 && total <= Duration::from_secs(15 * 60),
        detail: format!(
            "{} images, mean IoU {iou:.4} (≥ 0.85), MAE {err:.4} (≤ 0.05), train {:.0} s + sample {:.1} s (≤ 900 s)",
            run.data.len(),
            run.train_time.as_secs_f64(),
            run.sample_time.as_secs_f64()
        ),
    })
}

fn ablation_trends(run: &DeskRun) -> Result<Outcome> {
    let maps = |preds: &[SamplePrediction], last: bool| -> Vec<Array2<f64>> {
        preds.iter().map(|p| if last { p.final_x0.clone() } else { p.mask.clone() }).collect()
    };
    let score = |maps: &[Array2<f64>]| -> Result<f64> {
        let refs: Vec<&Array2<f64>> = maps.iter().collect();
        Ok(score_maps(&refs, &run.data)?.0.mae)
    };
    let t10 = score(&maps(&run.cte, false))?;
    let t1 = score(&maps(&run.t1, false))?;
    let last = score(&maps(&run.cte, true))?;
    let extra = run.ablation_time;
    Ok(Outcome {
        pass: t10 <= t1 && t10 <= last && extra <= Duration::from_secs(5 * 60),
        detail: format!(
            "(a) MAE T=10 {t10:.4} vs T=1 {t1:.4}; (b) CTE {t10:.4} vs final x̂0 {last:.4}; extra {:.1} s (≤ 300 s)",
            extra.as_secs_f64()
        ),
    })
}

fn bits(preds: &[SamplePrediction]) -> Vec<u64> {
    preds
        .iter()
        .flat_map(|p| p.mask.iter().chain(p.final_x0.iter()).map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn same_files(a: &Path, b: &Path) -> Result<(usize, usize)> {
    let (mut same, mut total) = (0, 0);
    for sub in ["cte", "final", "t1"] {
        let mut names: Vec<_> = std::fs::read_dir(a.join("pred").join(sub))?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
        names.sort();
        for name in names {
            total += 1;
            let x = std::fs::read(a.join("pred").join(sub).join(&name))?;
            let y = std::fs::read(b.join("pred").join(sub).join(&name)).unwrap_or_default();
            same += usize::from(x == y);
        }
    }
    Ok((same, total))
}

fn reproducibility(first: &DeskRun, dirs: (&Path, &Path)) -> Result<Outcome> {
    let (oracle_a, _) = oracle_chains(&[0, 1, 2])?;
    let (oracle_b, _) = oracle_chains(&[0, 1, 2])?;
    let oracle_same = oracle_a.iter().map(|v| v.to_bits()).eq(oracle_b.iter().map(|v| v.to_bits()));
    let second = desk_run(dirs.1)?;
    let maps_same = bits(&first.cte) == bits(&second.cte) && bits(&first.t1) == bits(&second.t1);
    let (same, total) = same_files(dirs.0, dirs.1)?;
    Ok(Outcome {
        pass: oracle_same && maps_same && total > 0 && same == total,
        detail: format!("oracle chains identical {oracle_same}, prediction maps identical {maps_same}, {same}/{total} prediction files byte-identical"),
    })
}

fn main() -> ExitCode {
    // The harness passes flags such as `--list`; nothing to enumerate here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    let checks: [(usize, &str, fn() -> Result<Outcome>); 6] = [
        (1, "schedule analytics", schedule_analytics),
        (2, "oracle-denoiser recovery", oracle_recovery),
        (3, "ZOE initialization invariance", zoe_invariance),
        (4, "loss gradient checks", loss_gradients),
        (5, "CTE enumeration", cte_enumeration),
        (6, "metric oracles", metric_oracles),
    ];
    let limits = [1.0, 1.0, 10.0, 30.0, 1.0, 60.0];
    for ((n, name, f), limit) in checks.into_iter().zip(limits) {
        let (out, elapsed) = timed(f);
        let out = out.map(|mut o| {
            o.pass &= elapsed.as_secs_f64() < limit;
            o
        });
        ok &= report(n, name, elapsed, out);
    }

    let dir_a = tempfile::tempdir().expect("temporary directory");
    let dir_b = tempfile::tempdir().expect("temporary directory");
    let (first, elapsed) = timed(|| desk_run(dir_a.path()));
    match first {
        Ok(run) => {
            ok &= report(7, "desk-scale overfit", elapsed, desk_overfit(&run));
            ok &= report(8, "ablation trends", run.ablation_time, ablation_trends(&run));
            let (out, elapsed) = timed(|| reproducibility(&run, (dir_a.path(), dir_b.path())));
            ok &= report(9, "reproducibility", elapsed, out);
        }
        Err(e) => {
            for (n, name) in [(7, "desk-scale overfit"), (8, "ablation trends"), (9, "reproducibility")] {
                ok &= report(n, name, elapsed, Err(camodiff_core::Error::InvalidArgument(format!("desk run failed: {e}"))));
            }
        }
    }
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
