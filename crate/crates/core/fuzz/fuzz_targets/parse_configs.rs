#![no_main]

use libfuzzer_sys::fuzz_target;
use tempedit::denoiser::{Denoiser, DenoiserConfig};
use tempedit::dmd::DistillConfig;
use tempedit::flow::TrainConfig;
use tempedit::oracle::OracleWorld;
use tempedit::sampler::SamplerConfig;

// Config documents must either fail to parse, fail validation, or be usable.
fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<DenoiserConfig>(data) {
        if c.embed_dim <= 256 && c.layers <= 4 && c.vocab_size <= 1024 {
            let _ = Denoiser::new(c);
        }
    }
    if let Ok(c) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<SamplerConfig>(data) {
        if c.validate().is_ok() && c.steps <= 4096 {
            let _ = tempedit::sampler::build_schedule(c.steps, c.shift);
        }
    }
    if let Ok(c) = serde_json::from_slice::<DistillConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(w) = serde_json::from_slice::<OracleWorld>(data) {
        let _ = w.moments();
    }
});
