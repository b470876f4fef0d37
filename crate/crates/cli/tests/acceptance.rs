//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=4,8 cargo test --test acceptance` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use tempedit::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use tempedit::codec::{latent_frame_count, BlockMeanCodec, CodecConfig, FrameRole, LatentVideo, VideoCodec};
use tempedit::denoiser::{Denoiser, DenoiserConfig, FrameLayout, Prediction};
use tempedit::diagnostics::{convergence_slope, mean_and_variance, oracle_samples};
use tempedit::dmd::{distill_loop, DistillConfig, Prompt, RealScore};
use tempedit::flow::{
    flow_loss, loss_mask, noised_input, sample_loss_and_grad, sample_timestep, train_loop, FlowSample, FlowSource, LrDecay,
    ManifestSource, Mode, TrainConfig,
};
use tempedit::gradcheck::finite_diff_check;
use tempedit::metrics::{score_episode, EvalReport};
use tempedit::oracle::{mean_loss_floor, GaussianMixture, GaussianWorld, OracleWorld};
use tempedit::sampler::{sample, sample_latent, sample_latent_traced, sample_pair_latent, DenoiserField, SamplerConfig, Solver};
use tempedit::worldgen::{build_dataset, TaskKind, DEFAULT_CANVAS};
use tempedit::{CounterRng, ParamSet, Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Parameters with every entry moved off its initial value, so no gradient
/// is trivially zero.
fn randomized(params: &ParamSet, seed: u64, scale: f64) -> ParamSet {
    let mut rng = CounterRng::new(seed);
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let noise = rng.normal_tensor(t.shape().to_vec()).scale(scale);
        out.insert(name.clone(), t.add(&noise).unwrap());
    }
    out
}

fn stack(frames: &[&Tensor], roles: Vec<FrameRole>) -> LatentVideo {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    LatentVideo::new(Tensor::new(shape, data).unwrap(), roles).unwrap()
}

fn video_roles(reasoning: usize) -> Vec<FrameRole> {
    let mut r = vec![FrameRole::Condition];
    r.extend(std::iter::repeat_n(FrameRole::Reasoning, reasoning));
    r.push(FrameRole::Target);
    r
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let a = latent_frame_count(29)?;
    let b = latent_frame_count(1)?;
    let us = start.elapsed().as_micros();
    outcome(a == 8 && b == 1 && us < 1000, format!("latent_frame_count(29) = {a}, latent_frame_count(1) = {b}, {us} us"))
}

fn criterion_2() -> Result<Outcome> {
    let codec = BlockMeanCodec::new(CodecConfig { spatial_factor: 1, ..CodecConfig::default() })?;
    let mut rng = CounterRng::new(2);
    let mut exact = 0;
    for _ in 0..1000 {
        let c = Tensor::from_fn([3, 16, 16], |_| rng.uniform());
        let p = Tensor::from_fn([3, 16, 16], |_| rng.uniform());
        let back = codec.decode_edit(&codec.encode_pair(&c, &p)?)?;
        exact += usize::from(back.shape() == p.shape() && back.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    outcome(exact == 1000, format!("{exact}/1000 pairs decoded bit-exactly"))
}

fn criterion_3() -> Result<Outcome> {
    let den = Denoiser::new(DenoiserConfig { embed_dim: 8, layers: 1, heads: 1, patch_size: 2, vocab_size: 3, ..Default::default() })?;
    let params = randomized(&den.init(&mut CounterRng::new(3)), 4, 0.2);
    let mut rng = CounterRng::new(5);
    let mut worst: f64 = 0.0;
    for (roles, mode) in [(video_roles(0), Mode::Pair), (video_roles(6), Mode::Video)] {
        let frames = roles.len();
        let latent = LatentVideo::new(rng.normal_tensor([frames, 3, 4, 4]), roles.clone())?;
        let sample = FlowSample::new(latent.clone(), 2, mode)?;
        let eps = rng.normal_tensor([frames, 3, 4, 4]);
        let t = 0.37;
        let (_, analytic) = sample_loss_and_grad(&den, &params, &sample, &eps, t)?;
        // forward-only loss, independent of the tape's gradient path
        let layout = FrameLayout::from_roles(&roles, den.config().target_anchor)?;
        let zt = noised_input(&latent, &eps, t)?;
        let loss = |p: &ParamSet| {
            let pred = den.velocity_with_layout(p, &zt, t, 2, &layout)?;
            flow_loss(&pred, latent.tensor(), &eps, &loss_mask(&roles))
        };
        worst = worst.max(finite_diff_check(loss, &params, &analytic, 1e-5)?);
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over pair and 8-frame video losses (d=8, L=1)"))
}

fn criterion_4() -> Result<Outcome> {
    let world = OracleWorld::Gaussian(GaussianWorld::standard());
    let mut ok = true;
    let mut parts = vec![];
    for reason_steps in [0, 10] {
        // Euler at N = 50 under the shift-5 schedule shrinks the variance of
        // N(0, 1) to 0.903 for every seed (deterministic bias), so the
        // moment check uses the second-order solver
        let cfg = SamplerConfig { steps: 50, reason_steps, reason_len: 6, shift: 5.0, solver: Solver::Heun, seed: 40 };
        let xs = oracle_samples(&world, &cfg, 2000, &[3, 8, 8])?;
        let (m, v) = mean_and_variance(&xs);
        ok &= m.abs() < 0.02 && (v - 1.0).abs() < 0.05;
        parts.push(format!("N_r={reason_steps} (Heun, N=50, 2000 samples of 3x8x8): mean {m:+.4} var {v:.4}"));
    }
    let g = GaussianWorld::scalar(0.5, 2.0)?;
    let euler = convergence_slope(&g, Solver::Euler, 5.0, 200)?;
    let heun = convergence_slope(&g, Solver::Heun, 5.0, 200)?;
    ok &= (euler + 1.0).abs() <= 0.2 && (heun + 2.0).abs() <= 0.2;
    parts.push(format!("Euler slope {euler:.3}, Heun slope {heun:.3}"));
    outcome(ok, parts.join("; "))
}

fn criterion_5() -> Result<Outcome> {
    let den = Denoiser::new(DenoiserConfig { embed_dim: 16, layers: 1, heads: 2, patch_size: 2, ..Default::default() })?;
    let params = randomized(&den.init(&mut CounterRng::new(6)), 7, 0.3);
    let field = DenoiserField { denoiser: &den, params: &params, instruction: 3 };
    let (mut same, mut handoff) = (0, 0);
    for seed in 0..20u64 {
        let c = CounterRng::new(1000 + seed).normal_tensor([3, 8, 8]);
        let pair_cfg = SamplerConfig { steps: 50, reason_steps: 0, reason_len: 6, seed, ..Default::default() };
        let a = sample_latent(&field, &c, &pair_cfg)?;
        let b = sample_pair_latent(&field, &c, &pair_cfg)?;
        same += usize::from(a == b);
        let cfg = SamplerConfig { reason_steps: 10, ..pair_cfg };
        let trace = sample_latent_traced(&field, &c, &cfg)?;
        let full = trace.stage1_final.as_ref().expect("stage 1 ran");
        let expected = stack(&[&c, &full.frame(full.frame_count() - 1)?], video_roles(0));
        handoff += usize::from(full.frame_count() == 8 && trace.handoff == expected);
    }
    outcome(same == 20 && handoff == 20, format!("N_r=0 identical to pair sampler {same}/20, handoff = concat(c, z_full[-1]) {handoff}/20"))
}

/// Pairs and 8-frame videos whose non-condition frames are iid draws from
/// a Gaussian world; the condition frame is zero.
struct GaussianSource {
    world: GaussianWorld,
    shape: [usize; 3],
    size: usize,
}

impl GaussianSource {
    fn draw(&self, mode: Mode, index: usize) -> Result<FlowSample> {
        let roles = video_roles(if mode == Mode::Pair { 0 } else { 6 });
        let mut rng = CounterRng::new(index as u64).fork(if mode == Mode::Pair { "pair" } else { "video" });
        let n: usize = self.shape.iter().product();
        let mut data = vec![0.0; n];
        data.extend(self.world.sample([(roles.len() - 1) * n], &mut rng)?.into_data());
        let mut shape = vec![roles.len()];
        shape.extend_from_slice(&self.shape);
        FlowSample::new(LatentVideo::new(Tensor::new(shape, data)?, roles)?, 0, mode)
    }
}

impl FlowSource for GaussianSource {
    fn count(&self, _: Mode) -> usize {
        self.size
    }

    fn get(&self, mode: Mode, index: usize) -> Result<FlowSample> {
        self.draw(mode, index)
    }
}

fn criterion_6() -> Result<Outcome> {
    let world = GaussianWorld::scalar(0.5, 0.25)?;
    let source = GaussianSource { world: world.clone(), shape: [1, 4, 4], size: 100_000 };
    let den = Denoiser::new(DenoiserConfig {
        latent_channels: 1,
        embed_dim: 16,
        layers: 1,
        heads: 2,
        patch_size: 2,
        vocab_size: 1,
        time_embed_dim: 16,
        ..Default::default()
    })?;
    let mut params = den.init(&mut CounterRng::new(8));
    let cfg = TrainConfig { lr: 1e-2, steps: 500, batch_size: 8, lr_decay: LrDecay::Cosine, seed: 9, ..Default::default() };
    train_loop(&den, &mut params, &source, &cfg, CounterRng::new(10), |_, _, _| Ok(()))?;

    // held-out draws: indices past the training range, t from the training distribution
    let mut rng = CounterRng::new(11);
    let (mut loss, mut floor) = (0.0, 0.0);
    let n = 400;
    for i in 0..n {
        let sample = source.draw(Mode::Pair, 1_000_000 + i)?;
        let eps = rng.normal_tensor(sample.latent.tensor().shape().to_vec());
        let t = sample_timestep(&mut rng, cfg.shift);
        let roles = sample.latent.roles().to_vec();
        let layout = FrameLayout::from_roles(&roles, den.config().target_anchor)?;
        let pred = den.velocity_with_layout(&params, &noised_input(&sample.latent, &eps, t)?, t, 0, &layout)?;
        loss += flow_loss(&pred, sample.latent.tensor(), &eps, &loss_mask(&roles))?;
        floor += mean_loss_floor(&world, t);
    }
    let (loss, floor) = (loss / n as f64, floor / n as f64);
    let ratio = loss / floor;
    outcome(ratio <= 1.10, format!("held-out flow loss {loss:.4} vs analytic floor {floor:.4} (ratio {ratio:.3}, limit 1.10) after 500 steps"))
}

fn criterion_7() -> Result<Outcome> {
    let start = Instant::now();
    let counts: BTreeMap<TaskKind, usize> = [(TaskKind::Move, 1100), (TaskKind::Recolor, 1100)].into_iter().collect();
    let all = build_dataset(&counts, DEFAULT_CANVAS, 7);
    let (train, held) = (all.slice(0, 2000), all.slice(2000, 2200));
    let codec = BlockMeanCodec::new(CodecConfig::default())?;
    let den = Denoiser::new(DenoiserConfig::default())?;
    let mut params = den.init(&mut CounterRng::new(1));
    let cfg = TrainConfig { lr: 1e-3, steps: TRAIN_STEPS, mix: [1, 1], batch_size: 8, ..Default::default() };
    let source = ManifestSource { manifest: &train, codec: &codec };
    train_loop(&den, &mut params, &source, &cfg, CounterRng::new(2), |_, _, _| Ok(()))?;
    let trained = start.elapsed().as_secs();

    let mut reports = vec![];
    for reason_steps in [0, 10] {
        let mut scores = vec![];
        for i in 0..held.len() {
            let ep = held.episode(i)?;
            let sc = SamplerConfig { steps: 50, reason_steps, reason_len: 6, seed: i as u64, ..Default::default() };
            let out = sample(&den, &params, &codec, &ep.first_frame(), ep.instruction_id(), &sc)?;
            scores.push(score_episode(i, &out, &ep)?);
        }
        reports.push(EvalReport::from_scores(&scores, serde_json::json!({ "reason_steps": reason_steps }))?);
    }
    let move_rate = |r: &EvalReport| r.per_task.get(&TaskKind::Move).map_or(0.0, |m| m.rate);
    let (r0, r10) = (&reports[0], &reports[1]);
    let pass = r10.edit_success >= 0.8 && r10.identity_mse <= 1e-3 && move_rate(r10) >= move_rate(r0);
    outcome(
        pass,
        format!(
            "N_r=10: success {:.3}, identity MSE {:.2e}; N_r=0: success {:.3}, identity MSE {:.2e}; MOVE success {:.3} (N_r=10) vs {:.3} (N_r=0); {} train steps in {trained}s, total {}s",
            r10.edit_success,
            r10.identity_mse,
            r0.edit_success,
            r0.identity_mse,
            move_rate(r10),
            move_rate(r0),
            TRAIN_STEPS,
            start.elapsed().as_secs()
        ),
    )
}

/// Optimizer steps for the end-to-end run.
const TRAIN_STEPS: usize = 3000;

fn criterion_8() -> Result<Outcome> {
    let mixture = GaussianMixture::new(vec![0.3, 0.7], vec![-1.0, 2.0], vec![0.25, 0.25])?;
    let world = OracleWorld::Mixture(mixture.clone());
    let den = Denoiser::new(DenoiserConfig {
        latent_channels: 1,
        embed_dim: 16,
        layers: 1,
        heads: 2,
        patch_size: 1,
        vocab_size: 1,
        time_embed_dim: 16,
        // a zero condition frame carries nothing to copy
        prediction: Prediction::Velocity,
        ..Default::default()
    })?;
    let shape = [1, 1, 1];
    // teacher: the same network fitted to the mixture with the flow loss
    struct MixtureSource(GaussianMixture);
    impl FlowSource for MixtureSource {
        fn count(&self, _: Mode) -> usize {
            1 << 20
        }
        fn get(&self, mode: Mode, index: usize) -> Result<FlowSample> {
            let frames = if mode == Mode::Pair { 2 } else { 8 };
            let mut rng = CounterRng::new(index as u64).fork("mixture");
            let mut data = vec![0.0];
            data.extend(self.0.sample([frames - 1], &mut rng).into_data());
            let roles = video_roles(frames - 2);
            FlowSample::new(LatentVideo::new(Tensor::new([frames, 1, 1, 1], data)?, roles)?, 0, mode)
        }
    }
    let mut teacher = den.init(&mut CounterRng::new(12));
    let pre = TrainConfig { lr: 3e-3, steps: 1500, batch_size: 32, shift: 1.0, mix: [1000, 1], seed: 13, ..Default::default() };
    train_loop(&den, &mut teacher, &MixtureSource(mixture.clone()), &pre, CounterRng::new(13), |_, _, _| Ok(()))?;

    let moments = |params: &ParamSet, steps: usize| -> Result<(f64, f64)> {
        let field = DenoiserField { denoiser: &den, params, instruction: 0 };
        let c = Tensor::zeros(shape);
        let xs = (0..2000)
            .map(|i| {
                let cfg = SamplerConfig { steps, reason_steps: 0, reason_len: 0, shift: 1.0, solver: Solver::Euler, seed: 50_000 + i };
                Ok(sample_pair_latent(&field, &c, &cfg)?.frame(1)?.data()[0])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_and_variance(&xs))
    };
    let (tm, tv) = moments(&teacher, 50)?;

    let cfg = DistillConfig { student_steps: 8, update_ratio: 5, lr: 1e-4, fake_lr: 1e-3, steps: 300, batch_size: 32, shift: 1.0, seed: 14, ..Default::default() };
    let prompts = [Prompt { condition: Tensor::zeros(shape), instruction: 0 }];
    let out = distill_loop(&den, &RealScore::Oracle(&world), &teacher, &prompts, &cfg, |_| {})?;
    let (sm, sv) = moments(&out.student, 8)?;
    let (em, ev) = ((sm - tm).abs() / tm.abs(), (sv - tv).abs() / tv);
    let ratio_ok = out.fake_updates == 5 * out.student_updates;

    // zero gradient when the two scores agree
    let mut tape = tempedit::autodiff::Tape::new();
    let x = tempedit::dmd::record_student(&mut tape, &den, &out.student, &Tensor::zeros(shape), &Tensor::full(shape, 0.3), 0, &cfg)?;
    let s = CounterRng::new(15).normal_tensor(shape.to_vec());
    let g = tempedit::dmd::dmd_param_gradient(&tape, x, &s, &s, &out.student, 1)?;
    let zero = g.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0));

    outcome(
        em <= 0.10 && ev <= 0.10 && ratio_ok && zero,
        format!(
            "teacher (50 steps) mean {tm:.4} var {tv:.4}; 8-step student mean {sm:.4} var {sv:.4} (rel err {em:.3}, {ev:.3}); {} fake / {} student updates; zero gradient when s_fake = s_real: {zero}",
            out.fake_updates, out.student_updates
        ),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tempedit")).args(args).output().expect("binary runs")
}

/// Every file under `a` has an identical twin under `b`; CSV columns named
/// `wall_ms` are ignored.
fn same_tree(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut n = 0;
    for entry in fs::read_dir(a).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let (pa, pb) = (entry.path(), b.join(entry.file_name()));
        if pa.is_dir() {
            n += same_tree(&pa, &pb)?;
            continue;
        }
        let (x, y) = (fs::read(&pa).map_err(|e| e.to_string())?, fs::read(&pb).map_err(|e| format!("{}: {e}", pb.display()))?);
        let equal = if pa.extension().is_some_and(|e| e == "csv") { strip_wall(&x) == strip_wall(&y) } else { x == y };
        if !equal {
            return Err(format!("{} differs", pa.display()));
        }
        n += 1;
    }
    Ok(n)
}

fn strip_wall(bytes: &[u8]) -> Vec<Vec<String>> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let Some(header) = lines.next() else { return vec![] };
    let keep: Vec<bool> = header.iter().map(|h| h != "wall_ms").collect();
    std::iter::once(header.clone())
        .chain(lines)
        .map(|row| row.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| v).collect())
        .collect()
}

fn criterion_9() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let config = serde_json::json!({
        "denoiser": { "embed_dim": 8, "layers": 1, "heads": 1 },
        "data": { "counts": { "MOVE": 3, "RECOLOR": 3 }, "seed": 4 },
        "train": { "steps": 3, "batch_size": 2, "lr": 1e-3 },
        "checkpoint_every": 2,
        "sampler": { "steps": 6, "reason_steps": 2 },
        "distill": { "steps": 2, "batch_size": 2, "update_ratio": 2, "student_steps": 2 },
        "oracle_samples": 20
    });
    fs::write(p("config.json"), serde_json::to_vec_pretty(&config)?)?;
    let cfg = p("config.json");
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("data", vec!["gen-data".into(), "--config".into(), cfg.clone()]),
        ("train", vec!["train".into(), "--config".into(), cfg.clone(), "--manifest".into(), p("data")]),
        ("sample", vec!["sample".into(), "--config".into(), cfg.clone(), "--checkpoint".into(), p("train/checkpoint.ckpt"), "--manifest".into(), p("data"), "--episode".into(), "1".into()]),
        ("trajectory", vec!["trajectory".into(), "--config".into(), cfg.clone(), "--checkpoint".into(), p("train/checkpoint.ckpt"), "--manifest".into(), p("data"), "--reason-steps".into(), "6".into()]),
        ("distill", vec!["distill".into(), "--config".into(), cfg.clone(), "--checkpoint".into(), p("train/checkpoint.ckpt"), "--manifest".into(), p("data")]),
        ("eval", vec!["eval".into(), "--config".into(), cfg.clone(), "--checkpoint".into(), p("distill/student.ckpt"), "--manifest".into(), p("data")]),
        ("oracle", vec!["oracle-check".into(), "--config".into(), cfg.clone(), "--steps".into(), "10".into()]),
    ];
    let mut checked = 0;
    for (name, mut args) in runs {
        args.extend(["--out".to_string(), p(name)]);
        let first = run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
        if !first.status.success() {
            return outcome(false, format!("`{name}` failed: {}", String::from_utf8_lossy(&first.stderr)));
        }
        let replay_dir = p(&format!("{name}_replay"));
        let cmd = args[0].clone();
        let again = run_cli(&[&cmd, "--config", &p(&format!("{name}/repro.json")), "--out", &replay_dir]);
        if !again.status.success() {
            return outcome(false, format!("replay of `{name}` failed: {}", String::from_utf8_lossy(&again.stderr)));
        }
        match same_tree(&dir.path().join(name), Path::new(&replay_dir)) {
            Ok(n) => checked += n,
            Err(e) => return outcome(false, format!("replay of `{name}` not bit-identical: {e}")),
        }
    }

    let a = dir.path().join("train/checkpoint.ckpt");
    let loaded = load_checkpoint(&a)?;
    let b = dir.path().join("resaved.ckpt");
    save_checkpoint(&b, &loaded.params, &loaded.configs)?;
    let bytes_equal = fs::read(&a)? == fs::read(&b)?;
    let reencoded = encode_checkpoint(&decode_checkpoint(&fs::read(&b)?)?.params, &loaded.configs)? == fs::read(&a)?;
    outcome(
        bytes_equal && reencoded,
        format!("7 commands replayed from repro.json, {checked} output files identical (wall_ms column excluded); checkpoint save-load-save byte-identical: {bytes_equal}"),
    )
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, fn() -> Result<Outcome>); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = vec![];
    for (n, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let line = format!("criterion {n}: {} [{:.1}s] {detail}\n", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        // written past the test harness's output capture on purpose
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
