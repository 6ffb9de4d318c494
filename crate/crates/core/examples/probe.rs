use staa_core::downsampler::{downsample, Constraint};
use staa_core::metrics::psnr;
use staa_core::trainer::*;
use staa_core::upsampler::{trilinear_upscale, UpscaleConfig};
use staa_core::volume::VideoVolume;
use std::time::Instant;

fn main() {
    let corpus = synthetic_corpus(64, (16, 64, 64), 42).unwrap();
    for lr in [2e-4, 1e-3, 2e-3] {
        let mut up = UpscaleConfig::toy(2, 1, 2, 3);
        up.features = 12; up.rdb_count = 2; up.rdb_layers = 2; up.growth = 8;
        let cfg = TrainConfig {
            lr0: lr, total_steps: 2000, batch_size: 2, patch: (4, 24, 24), holdout: 8,
            downsampler: DownsamplerMode::Learned(Constraint::Softmax), val_every: 1000,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train_joint(&corpus, &up, &cfg).unwrap();
        let fb = filterbank_from_checkpoint(&out.checkpoint).unwrap();
        let val = &corpus[56..];
        let mut tri = 0.0;
        for scene in val {
            let down = downsample(scene, &fb).unwrap();
            let up3 = trilinear_upscale(&down.data, (2, 1), 2).unwrap();
            tri += psnr(&VideoVolume::new(up3, scene.fps).unwrap(), scene, 255.0).unwrap();
        }
        tri /= val.len() as f64;
        println!(
            "lr={lr:.0e}: val={:.3} (mid {:.3}) tri={:.3} margin={:+.3} dB  [{:.1} min]",
            out.final_val_psnr, out.rows[999].val_psnr.unwrap_or(0.0), tri,
            out.final_val_psnr - tri, t0.elapsed().as_secs_f64() / 60.0
        );
    }
}
