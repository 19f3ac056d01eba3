//! Synthetic clip generator: sinusoidal gratings and textured rectangles
//! moving with constant, known velocities. Everything is sampled from
//! analytic pattern functions at continuously shifted coordinates, so
//! subpixel motion is exact and no external data is needed.

use crate::error::Result;
use crate::pipeline::data::save_frame_png;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 16,
            frames_per_clip: 8,
            height: 64,
            width: 64,
            seed: 7,
        }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
    vx: f64,
    vy: f64,
}

struct MovingRect {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    vx: f64,
    vy: f64,
    tex_fx: f64,
    tex_fy: f64,
    tex_phase: f64,
    color: [f64; 3],
}

/// One clip's content: a moving grating background and one or two moving
/// textured rectangles.
struct Scene {
    background: Grating,
    detail: Grating,
    rects: Vec<MovingRect>,
    base: [f64; 3],
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Scene {
        let grating = |rng: &mut ChaCha8Rng, max_freq: f64, max_v: f64| Grating {
            fx: rng.gen_range(0.05..max_freq),
            fy: rng.gen_range(0.05..max_freq),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: rng.gen_range(0.1..0.25),
            vx: rng.gen_range(-max_v..max_v),
            vy: rng.gen_range(-max_v..max_v),
        };
        let n_rects = rng.gen_range(1..=2);
        let rects = (0..n_rects)
            .map(|_| MovingRect {
                cx: rng.gen_range(0.2 * w as f64..0.8 * w as f64),
                cy: rng.gen_range(0.2 * h as f64..0.8 * h as f64),
                half_w: rng.gen_range(0.1 * w as f64..0.22 * w as f64),
                half_h: rng.gen_range(0.1 * h as f64..0.22 * h as f64),
                vx: rng.gen_range(-2.0..2.0),
                vy: rng.gen_range(-2.0..2.0),
                tex_fx: rng.gen_range(0.2..0.7),
                tex_fy: rng.gen_range(0.2..0.7),
                tex_phase: rng.gen_range(0.0..std::f64::consts::TAU),
                color: [
                    rng.gen_range(0.3..0.9),
                    rng.gen_range(0.3..0.9),
                    rng.gen_range(0.3..0.9),
                ],
            })
            .collect();
        Scene {
            background: grating(rng, 0.35, 1.5),
            detail: grating(rng, 0.8, 1.5),
            rects,
            base: [
                rng.gen_range(0.35..0.65),
                rng.gen_range(0.35..0.65),
                rng.gen_range(0.35..0.65),
            ],
        }
    }

    fn render(&self, t: f64, h: usize, w: usize) -> Array3<f64> {
        let mut frame = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let bgx = x as f64 - self.background.vx * t;
                let bgy = y as f64 - self.background.vy * t;
                let bg = self.background.amp
                    * (self.background.fx * bgx + self.background.fy * bgy
                        + self.background.phase)
                        .sin();
                let dtl = 0.5
                    * self.detail.amp
                    * (self.detail.fx * bgx + self.detail.fy * bgy + self.detail.phase).cos();
                for c in 0..3 {
                    let tint = 1.0 - 0.15 * c as f64;
                    frame[[c, y, x]] = (self.base[c] + tint * (bg + dtl)).clamp(0.0, 1.0);
                }
                for rect in &self.rects {
                    let rx = x as f64 - (rect.cx + rect.vx * t);
                    let ry = y as f64 - (rect.cy + rect.vy * t);
                    if rx.abs() <= rect.half_w && ry.abs() <= rect.half_h {
                        let tex = 0.2
                            * ((rect.tex_fx * rx).sin() * (rect.tex_fy * ry).cos()
                                + (rect.tex_fx * 2.3 * rx + rect.tex_phase).sin())
                            / 2.0;
                        for c in 0..3 {
                            frame[[c, y, x]] = (rect.color[c] + tex).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        frame
    }
}

/// Renders one clip from a seeded generator.
pub fn synth_clip(
    rng: &mut ChaCha8Rng,
    frames: usize,
    h: usize,
    w: usize,
) -> Vec<Array3<f64>> {
    let scene = Scene::sample(rng, h, w);
    (0..frames).map(|i| scene.render(i as f64, h, w)).collect()
}

/// Writes `<root>/train/clip_###/frame_###.png` for `cfg.clips` clips and a
/// quarter as many held-out clips under `<root>/test/`.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let write_split = |name: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        for clip_idx in 0..count {
            let dir = root.join(name).join(format!("clip_{clip_idx:03}"));
            fs::create_dir_all(&dir)
                .map_err(|e| crate::error::Error::io(dir.display().to_string(), e))?;
            let frames = synth_clip(rng, cfg.frames_per_clip, cfg.height, cfg.width);
            for (i, frame) in frames.iter().enumerate() {
                save_frame_png(&dir.join(format!("frame_{i:03}.png")), frame)?;
            }
        }
        Ok(())
    };
    write_split("train", cfg.clips, &mut rng)?;
    write_split("test", (cfg.clips / 4).max(1), &mut rng)?;
    Ok(())
}
