use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;
use tempedit::checkpoint::{load_checkpoint, save_checkpoint};
use tempedit::codec::ppm::{decode_ppm, encode_ppm};
use tempedit::codec::{BlockMeanCodec, LatentVideo, VideoCodec};
use tempedit::denoiser::{Denoiser, DenoiserConfig};
use tempedit::diagnostics;
use tempedit::dmd::{distill_loop, Prompt, RealScore, FAKE_PREFIX};
use tempedit::flow::{train_loop, ManifestSource};
use tempedit::metrics::{score_episode, EvalReport};
use tempedit::sampler::{build_schedule, sample_latent, sample_trajectory_latent, DenoiserField, OracleField, VelocityField};
use tempedit::worldgen::{build_dataset, Episode, Manifest};
use tempedit::{CounterRng, ParamSet, Tensor};

use crate::config::{write_json, write_repro, RunConfig};
use crate::{CliError, CliResult};

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(tempedit::Error::from)?;
    Ok(())
}

fn csv(path: &Path, header: &str) -> CliResult<fs::File> {
    let mut f = fs::File::create(path).map_err(tempedit::Error::from)?;
    writeln!(f, "{header}").map_err(tempedit::Error::from)?;
    Ok(f)
}

fn line(f: &mut fs::File, text: String) -> CliResult<()> {
    writeln!(f, "{text}").map_err(tempedit::Error::from)?;
    Ok(())
}

fn model_configs(cfg: &RunConfig, den: &DenoiserConfig) -> serde_json::Value {
    json!({ "denoiser": den, "codec": cfg.codec })
}

fn dataset(cfg: &RunConfig) -> CliResult<Manifest> {
    Ok(match &cfg.inputs.manifest {
        Some(dir) => Manifest::read_dir(dir)?,
        None => build_dataset(&cfg.data.counts, cfg.data.canvas, cfg.data.seed),
    })
}

struct Model {
    denoiser: Denoiser,
    params: ParamSet,
    codec: BlockMeanCodec,
}

/// Loads a checkpoint written by `train` or `distill`; a distilled
/// checkpoint's fake-score weights are skipped.
fn load_model(cfg: &RunConfig) -> CliResult<Model> {
    let path = cfg.inputs.checkpoint.as_ref().ok_or_else(|| CliError::Input("this command needs --checkpoint".into()))?;
    let ckpt = load_checkpoint(path)?;
    let field = |k: &str| ckpt.configs.get(k).cloned().ok_or_else(|| CliError::Input(format!("checkpoint has no '{k}' config")));
    let den_cfg: DenoiserConfig = serde_json::from_value(field("denoiser")?).map_err(tempedit::Error::from)?;
    let codec_cfg = serde_json::from_value(field("codec")?).map_err(tempedit::Error::from)?;
    let mut params = ParamSet::new();
    for (name, t) in ckpt.params.iter().filter(|(n, _)| !n.starts_with(FAKE_PREFIX)) {
        params.insert(name.clone(), t.clone());
    }
    Ok(Model { denoiser: Denoiser::new(den_cfg)?, params, codec: BlockMeanCodec::new(codec_cfg)? })
}

/// The condition for single-sample commands: an image file, a manifest
/// episode, or (oracle mode only) an all-zero latent frame.
struct Condition {
    latent: Tensor,
    instruction: usize,
    episode: Option<Episode>,
}

fn condition(cfg: &RunConfig, codec: &BlockMeanCodec) -> CliResult<Condition> {
    let encode = |frame: &Tensor| -> CliResult<Tensor> { Ok(codec.encode_condition(frame)?.frame(0)?) };
    if let Some(path) = &cfg.inputs.image {
        let frame = decode_ppm(&fs::read(path).map_err(tempedit::Error::from)?)?;
        return Ok(Condition { latent: encode(&frame)?, instruction: cfg.inputs.instruction, episode: None });
    }
    if cfg.inputs.manifest.is_some() {
        let ep = dataset(cfg)?.episode(cfg.inputs.episode)?;
        return Ok(Condition { latent: encode(&ep.first_frame())?, instruction: ep.instruction_id(), episode: Some(ep) });
    }
    if cfg.use_oracle {
        let shape = codec.latent_frame_shape(cfg.data.canvas.height, cfg.data.canvas.width)?;
        return Ok(Condition { latent: Tensor::zeros(shape.to_vec()), instruction: cfg.inputs.instruction, episode: None });
    }
    Err(CliError::Input("give --image with --instruction, or --manifest with --episode".into()))
}

fn save_latent(path: &Path, z: &LatentVideo) -> CliResult<()> {
    let mut p = ParamSet::new();
    p.insert("latent", z.tensor().clone());
    save_checkpoint(path, &p, &json!({ "roles": z.roles() }))?;
    Ok(())
}

pub fn gen_data(mut cfg: RunConfig, from_manifest: Option<std::path::PathBuf>, out: &Path) -> CliResult<()> {
    if from_manifest.is_some() {
        cfg.inputs.manifest = from_manifest;
    }
    cfg.inputs.resolve()?;
    prepare_out(out)?;
    let manifest = dataset(&cfg)?;
    manifest.write_dir(out, cfg.data.with_frames)?;
    write_repro(out, "gen-data", manifest.seed, vec![], &cfg)
}

pub fn train(mut cfg: RunConfig, out: &Path) -> CliResult<()> {
    cfg.inputs.resolve()?;
    cfg.train.validate()?;
    prepare_out(out)?;
    let manifest = dataset(&cfg)?;
    let codec = BlockMeanCodec::new(cfg.codec)?;
    let den = Denoiser::new(cfg.denoiser.clone())?;
    let root = CounterRng::new(cfg.train.seed);
    let mut params = den.init(&mut root.fork("init"));
    let source = ManifestSource { manifest: &manifest, codec: &codec };
    let meta = model_configs(&cfg, &cfg.denoiser);
    let mut log = csv(&out.join("train_log.csv"), "step,loss,mode_fraction,wall_ms")?;
    let start = Instant::now();
    let mut failure = None;
    train_loop(&den, &mut params, &source, &cfg.train, root.fork("batches"), |step, stats, params| {
        let mut record = || -> CliResult<()> {
            line(&mut log, format!("{step},{},{},{}", stats.loss, stats.pair_fraction, start.elapsed().as_millis()))?;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                save_checkpoint(&out.join(format!("step_{step:06}.ckpt")), params, &meta)?;
            }
            Ok(())
        };
        if let Err(e) = record() {
            failure.get_or_insert(e);
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_checkpoint(&out.join("checkpoint.ckpt"), &params, &meta)?;
    write_repro(out, "train", cfg.train.seed, vec![], &cfg)
}

/// Frames side by side in one image.
fn frame_strip(frames: &[Tensor]) -> CliResult<Tensor> {
    let shape = frames[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let total = w * frames.len();
    let mut data = vec![0.0; c * h * total];
    for (k, f) in frames.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                let src = &f.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                let dst = ch * h * total + y * total + k * w;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new([c, h, total], data)?)
}

pub fn sample(mut cfg: RunConfig, out: &Path, trajectory: bool) -> CliResult<()> {
    cfg.inputs.resolve()?;
    cfg.sampler.validate()?;
    prepare_out(out)?;
    let model = if cfg.use_oracle { None } else { Some(load_model(&cfg)?) };
    let codec = match &model {
        Some(m) => m.codec.clone(),
        None => BlockMeanCodec::new(cfg.codec)?,
    };
    let cond = condition(&cfg, &codec)?;
    let oracle_field = OracleField { world: &cfg.oracle };
    let model_field = model.as_ref().map(|m| DenoiserField { denoiser: &m.denoiser, params: &m.params, instruction: cond.instruction });
    let field: &dyn VelocityField = match &model_field {
        Some(f) => f,
        None => &oracle_field,
    };
    let name = if trajectory { "trajectory" } else { "sample" };
    if trajectory {
        let z = sample_trajectory_latent(field, &cond.latent, &cfg.sampler)?;
        save_latent(&out.join("latent.ckpt"), &z)?;
        let video = codec.decode(&z)?;
        let frames = (0..video.frame_count()).map(|i| video.frame(i)).collect::<Result<Vec<_>, _>>()?;
        fs::write(out.join("trajectory.ppm"), encode_ppm(&frame_strip(&frames)?)?).map_err(tempedit::Error::from)?;
        let index = json!({
            "file": "trajectory.ppm",
            "frames": frames.len(),
            "height": video.height(),
            "width": video.width(),
            "latent_roles": z.roles(),
        });
        write_json(&out.join("index.json"), &index)?;
    } else {
        let z = sample_latent(field, &cond.latent, &cfg.sampler)?;
        save_latent(&out.join("latent.ckpt"), &z)?;
        let frame = codec.decode_edit(&z)?;
        fs::write(out.join("output.ppm"), encode_ppm(&frame)?).map_err(tempedit::Error::from)?;
        if let Some(ep) = &cond.episode {
            write_json(&out.join("score.json"), &score_episode(cfg.inputs.episode, &frame, ep)?)?;
        }
    }
    let knots = build_schedule(cfg.sampler.steps, cfg.sampler.shift)?.knots;
    write_repro(out, name, cfg.sampler.seed, knots, &cfg)
}

pub fn distill(mut cfg: RunConfig, out: &Path) -> CliResult<()> {
    cfg.inputs.resolve()?;
    cfg.distill.validate()?;
    prepare_out(out)?;
    let model = load_model(&cfg)?;
    let prompts = if cfg.inputs.manifest.is_some() {
        let manifest = dataset(&cfg)?;
        let [a, b] = cfg.inputs.range.unwrap_or([0, manifest.len()]);
        (a..b.min(manifest.len()))
            .map(|i| {
                let ep = manifest.episode(i)?;
                Ok(Prompt { condition: model.codec.encode_condition(&ep.first_frame())?.frame(0)?, instruction: ep.instruction_id() })
            })
            .collect::<Result<Vec<_>, tempedit::Error>>()?
    } else {
        let shape = model.codec.latent_frame_shape(cfg.data.canvas.height, cfg.data.canvas.width)?;
        vec![Prompt { condition: Tensor::zeros(shape.to_vec()), instruction: cfg.inputs.instruction }]
    };
    let real = if cfg.use_oracle {
        RealScore::Oracle(&cfg.oracle)
    } else {
        RealScore::Teacher { denoiser: &model.denoiser, params: &model.params }
    };
    let mut log = csv(&out.join("distill_log.csv"), "cycle,student_loss_proxy,fake_loss,moment_error")?;
    let mut failure = None;
    let outcome = distill_loop(&model.denoiser, &real, &model.params, &prompts, &cfg.distill, |c| {
        let moment = c.moment_error.map(|m| m.to_string()).unwrap_or_default();
        if let Err(e) = line(&mut log, format!("{},{},{},{moment}", c.cycle, c.student_loss_proxy, c.fake_loss)) {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut stored = outcome.student.clone();
    stored.extend(outcome.fake.stored());
    let mut meta = model_configs(&cfg, model.denoiser.config());
    meta["codec"] = json!(model.codec.config());
    meta["distill"] = json!(cfg.distill);
    save_checkpoint(&out.join("student.ckpt"), &stored, &meta)?;
    let knots = build_schedule(cfg.distill.student_steps, cfg.distill.shift)?.knots;
    write_repro(out, "distill", cfg.distill.seed, knots, &cfg)
}

pub fn eval(mut cfg: RunConfig, out: &Path) -> CliResult<()> {
    cfg.inputs.resolve()?;
    cfg.sampler.validate()?;
    if cfg.use_oracle {
        return Err(CliError::Input("eval scores a checkpoint; use oracle-check for closed-form worlds".into()));
    }
    prepare_out(out)?;
    let model = load_model(&cfg)?;
    if cfg.inputs.manifest.is_none() {
        return Err(CliError::Input("eval needs --manifest".into()));
    }
    let manifest = dataset(&cfg)?;
    let [a, b] = cfg.inputs.range.unwrap_or([0, manifest.len()]);
    let ids: Vec<usize> = (a..b.min(manifest.len())).collect();
    let scores = ids
        .par_iter()
        .map(|&i| {
            let ep = manifest.episode(i)?;
            let field = DenoiserField { denoiser: &model.denoiser, params: &model.params, instruction: ep.instruction_id() };
            let mut sc = cfg.sampler.clone();
            sc.seed = cfg.sampler.seed.wrapping_add(i as u64);
            let c = model.codec.encode_condition(&ep.first_frame())?.frame(0)?;
            let frame = model.codec.decode_edit(&sample_latent(&field, &c, &sc)?)?;
            score_episode(i, &frame, &ep)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::from_scores(&scores, serde_json::to_value(&cfg).map_err(tempedit::Error::from)?)?;
    write_json(&out.join("report.json"), &report)?;
    let knots = build_schedule(cfg.sampler.steps, cfg.sampler.shift)?.knots;
    write_repro(out, "eval", cfg.sampler.seed, knots, &cfg)
}

pub fn oracle_check(cfg: RunConfig, out: &Path) -> CliResult<()> {
    prepare_out(out)?;
    let shape = BlockMeanCodec::new(cfg.codec)?.latent_frame_shape(cfg.data.canvas.height, cfg.data.canvas.width)?;
    let report = diagnostics::oracle_check(&cfg.oracle, &cfg.sampler, cfg.oracle_samples, &shape)?;
    write_json(&out.join("report.json"), &report)?;
    let knots = build_schedule(cfg.sampler.steps, cfg.sampler.shift)?.knots;
    write_repro(out, "oracle-check", cfg.sampler.seed, knots, &cfg)
}
