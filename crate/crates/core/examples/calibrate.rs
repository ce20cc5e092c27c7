//! Desk-scale calibration: trains the full model and the frozen-dynamic
//! ablation on the seed-42 synthetic scene and reports PSNR/DPSNR for both
//! on the training frames and on the held-out midpoint frames.
//!
//! ```text
//! cargo run --release --example calibrate -- [iterations] [output.txt]
//! ```

use std::fmt::Write as _;
use std::time::Instant;

use tkplanes::config::TrainConfig;
use tkplanes::dataset::{generate_synthetic, Split, SyntheticSceneSpec};
use tkplanes::eval::{evaluate, EvalFrame};
use tkplanes::train::{build_model, distinct_timestamps, train};

fn main() -> tkplanes::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(2000, |s| s.parse().expect("iteration count"));
    let out = args.next();

    let spec = SyntheticSceneSpec::desk(42);
    let scene = generate_synthetic(&spec)?;
    let frames = scene.frames(Split::Train);
    let val = scene.frames(Split::Val);
    let bounds = scene.manifest.scene_bounds()?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "scene: {}x{}, {} training frames, {} sprites, dynamic pixel ratio {:.4}",
        spec.width,
        spec.height,
        frames.len(),
        spec.sprites.len(),
        scene.dynamic_pixel_ratio
    );
    for freeze in [false, true] {
        let config = TrainConfig {
            iterations,
            seed: 42,
            freeze_dynamic: freeze,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let model = build_model(&config, spec.width, spec.height, bounds, distinct_timestamps(&frames))?;
        let outcome = train(model, &frames, &[], &config, None)?;
        let secs = start.elapsed().as_secs_f64();
        let score = |frames: &[tkplanes::dataset::Frame]| {
            let eval_frames: Vec<EvalFrame<'_>> = frames
                .iter()
                .map(|f| EvalFrame {
                    name: f.record.image.display().to_string(),
                    pose: &f.record.pose,
                    image: &f.image,
                    boxes: &f.record.boxes,
                })
                .collect();
            let r = evaluate(&outcome.model, &eval_frames, |_, _| {});
            (r.mean_psnr().unwrap_or(f64::NAN), r.mean_dpsnr().unwrap_or(f64::NAN))
        };
        let (tp, td) = score(&frames);
        let (vp, vd) = score(&val);
        let early = &outcome.log[..outcome.log.len().min(100)];
        let _ = writeln!(
            text,
            "{}: iterations {iterations}, train PSNR {tp:.3} dB, train DPSNR {td:.3} dB, val PSNR {vp:.3} dB, val DPSNR {vd:.3} dB, first loss {:.5}, final running loss {:.6}, {:.1} s",
            if freeze { "frozen dynamic planes" } else { "full model" },
            early.first().map_or(f64::NAN, |r| r.loss),
            outcome.info.running_loss,
            secs
        );
        print!("{}", text.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    }
    if let Some(path) = out {
        std::fs::write(&path, &text).map_err(|e| tkplanes::Error::Io {
            path: path.into(),
            source: e,
        })?;
    }
    Ok(())
}
