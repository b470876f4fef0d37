use std::collections::BTreeMap;

use proptest::prelude::*;
use tempedit::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use tempedit::codec::ppm::{decode_ppm, encode_ppm};
use tempedit::codec::{BlockMeanCodec, CodecConfig, VideoCodec};
use tempedit::denoiser::{Denoiser, DenoiserConfig};
use tempedit::flow::{shift_timestep, train_loop, ManifestSource, TrainConfig};
use tempedit::metrics::{score_episode, EvalReport};
use tempedit::sampler::{sample, SamplerConfig};
use tempedit::worldgen::{build_dataset, parse_manifest, TaskKind, DEFAULT_CANVAS};
use tempedit::{CounterRng, ParamSet, Tensor};

fn frame(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = CounterRng::new(seed);
    Tensor::from_fn([3, h, w], |_| rng.uniform())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_is_a_monotone_bijection(a in 0.0f64..=1.0, b in 0.0f64..=1.0, s in 1.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (fl, fh) = (shift_timestep(lo, s), shift_timestep(hi, s));
        prop_assert!(fl <= fh);
        prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        // inverse of the shift is the shift by 1/s
        prop_assert!((shift_timestep(fh, 1.0 / s) - hi).abs() < 1e-12);
    }

    #[test]
    fn pair_encoding_is_exact(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let codec = BlockMeanCodec::new(CodecConfig::default()).unwrap();
        let (c, p) = (frame(seed, h, w), frame(seed ^ 1, h, w));
        prop_assert_eq!(codec.decode_edit(&codec.encode_pair(&c, &p).unwrap()).unwrap(), p);
    }

    #[test]
    fn ppm_round_trips_quantized_frames(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let bytes = encode_ppm(&frame(seed, h, w)).unwrap();
        let once = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&once).unwrap(), bytes);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), sizes in prop::collection::vec(1usize..6, 1..5)) {
        let mut rng = CounterRng::new(seed);
        let mut ps = ParamSet::new();
        for (i, n) in sizes.iter().enumerate() {
            ps.insert(format!("p{i}"), rng.normal_tensor([*n, 2]));
        }
        let configs = serde_json::json!({ "seed": seed });
        let bytes = encode_checkpoint(&ps, &configs).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.params, &ps);
        prop_assert_eq!(encode_checkpoint(&back.params, &back.configs).unwrap(), bytes);
    }
}

#[test]
fn manifest_survives_json() {
    let counts: BTreeMap<TaskKind, usize> = [(TaskKind::Move, 3), (TaskKind::Recolor, 2), (TaskKind::Remove, 1)].into_iter().collect();
    let m = build_dataset(&counts, DEFAULT_CANVAS, 11);
    assert_eq!(m.len(), 6);
    let back = parse_manifest(m.to_json().unwrap().as_bytes()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.episode(4).unwrap().final_frame(), m.episode(4).unwrap().final_frame());
}

#[test]
fn train_save_load_sample_score() {
    let counts: BTreeMap<TaskKind, usize> = [(TaskKind::Move, 4), (TaskKind::Recolor, 4)].into_iter().collect();
    let data = build_dataset(&counts, DEFAULT_CANVAS, 3);
    let codec = BlockMeanCodec::new(CodecConfig::default()).unwrap();
    let den = Denoiser::new(DenoiserConfig { embed_dim: 8, layers: 1, heads: 1, ..Default::default() }).unwrap();
    let mut params = den.init(&mut CounterRng::new(0));
    let cfg = TrainConfig { lr: 1e-3, steps: 3, batch_size: 2, ..Default::default() };
    let mut losses = vec![];
    let source = ManifestSource { manifest: &data, codec: &codec };
    train_loop(&den, &mut params, &source, &cfg, CounterRng::new(1), |_, st, _| {
        losses.push(st.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &params, &serde_json::json!({})).unwrap();
    let loaded = load_checkpoint(&path).unwrap().params;
    assert_eq!(loaded, params);

    let sc = SamplerConfig { steps: 4, reason_steps: 2, ..Default::default() };
    let scores: Vec<_> = (0..data.len())
        .map(|i| {
            let ep = data.episode(i).unwrap();
            let out = sample(&den, &loaded, &codec, &ep.first_frame(), ep.instruction_id(), &SamplerConfig { seed: i as u64, ..sc.clone() }).unwrap();
            assert_eq!(out.shape(), ep.first_frame().shape());
            // same seed, same params: same output
            let again = sample(&den, &params, &codec, &ep.first_frame(), ep.instruction_id(), &SamplerConfig { seed: i as u64, ..sc.clone() }).unwrap();
            assert_eq!(out, again);
            score_episode(i, &out, &ep).unwrap()
        })
        .collect();
    let report = EvalReport::from_scores(&scores, serde_json::json!({})).unwrap();
    assert_eq!(report.episodes, data.len());
    assert!(report.identity_mse.is_finite() && (0.0..=1.0).contains(&report.edit_success));
}
