use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::{MotionScenario, ObjectProgram, Segment};

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 5] = ["linear", "turns", "occlusion", "crowd", "uav-mix"];

const WIDTH: f64 = 1280.0;
const HEIGHT: f64 = 720.0;
const FRAMES: u32 = 150;
const DEG: f64 = PI / 180.0;

/// Builds a named scenario. Object programs are drawn from a stream derived
/// from `seed`; detection noise uses another one at generation time.
pub fn preset(name: &str, seed: u64) -> Result<MotionScenario> {
    let mut rng = SplitMix64::derived(seed, &format!("synth.program.{name}"));
    let rng = &mut rng;
    let (count, frames) = match name {
        "linear" | "turns" | "occlusion" => (10, FRAMES),
        "crowd" => (20, FRAMES),
        "uav-mix" => (14, FRAMES),
        _ => {
            return Err(Error::Scenario(format!(
                "unknown preset {name:?}; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let objects = (0..count)
        .map(|i| match name {
            "linear" => object(rng, vec![Segment::ConstantVelocity { frames }], vec![]),
            "turns" => {
                let segs = turning(rng, frames, 3.0, 15.0);
                object(rng, segs, vec![])
            }
            "occlusion" => {
                let segs = turning(rng, frames, 0.5, 3.0);
                let gaps = two_gaps(rng, frames);
                object(rng, segs, gaps)
            }
            "crowd" => crossing(rng, frames),
            _ => {
                let segs = mixed(rng, frames);
                let gaps = if i % 2 == 0 { two_gaps(rng, frames) } else { vec![] };
                object(rng, segs, gaps)
            }
        })
        .collect();
    Ok(MotionScenario {
        preset: name.to_string(),
        frames,
        width: WIDTH,
        height: HEIGHT,
        objects,
        sigma_det: 1.5,
        size_noise_rel: 0.05,
        p_miss: 0.05,
        fp_rate: 0.5,
        v_max: 15.0,
        seed,
    })
}

fn object(rng: &mut SplitMix64, segments: Vec<Segment>, occlusions: Vec<(u32, u32)>) -> ObjectProgram {
    let height = rng.uniform_range(24.0, 64.0);
    let aspect = rng.uniform_range(0.4, 1.2);
    let start = [rng.uniform_range(100.0, WIDTH - 100.0), rng.uniform_range(80.0, HEIGHT - 80.0)];
    let speed = rng.uniform_range(2.0, 8.0);
    let heading = rng.uniform_range(-PI, PI);
    ObjectProgram {
        start,
        velocity: [speed * heading.cos(), speed * heading.sin()],
        aspect,
        height,
        segments,
        occlusions,
    }
}

/// Splits `frames` into durations in `[lo, hi]` (the last one absorbs the rest).
fn durations(rng: &mut SplitMix64, frames: u32, lo: u32, hi: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut left = frames;
    while left > 0 {
        let d = (lo + rng.below((hi - lo + 1) as u64) as u32).min(left);
        out.push(d);
        left -= d;
    }
    out
}

/// Alternating straight and turning segments; turn rates in `[min, max]`
/// degrees per frame with random sign.
fn turning(rng: &mut SplitMix64, frames: u32, min_deg: f64, max_deg: f64) -> Vec<Segment> {
    durations(rng, frames, 10, 30)
        .into_iter()
        .enumerate()
        .map(|(k, d)| {
            if k % 2 == 0 {
                Segment::ConstantVelocity { frames: d }
            } else {
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                Segment::Turn {
                    frames: d,
                    rate: sign * rng.uniform_range(min_deg, max_deg) * DEG,
                }
            }
        })
        .collect()
}

fn mixed(rng: &mut SplitMix64, frames: u32) -> Vec<Segment> {
    let mut segs: Vec<Segment> = durations(rng, frames, 8, 25)
        .into_iter()
        .map(|d| match rng.below(4) {
            0 => Segment::ConstantVelocity { frames: d },
            1 => {
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                Segment::Turn {
                    frames: d,
                    rate: sign * rng.uniform_range(3.0, 15.0) * DEG,
                }
            }
            2 => Segment::Accel {
                frames: d,
                accel: [rng.uniform_range(-0.4, 0.4), rng.uniform_range(-0.4, 0.4)],
            },
            _ => Segment::Stop { frames: d },
        })
        .collect();
    // long stops are dull; cap them and keep moving afterwards
    let mut spill = 0;
    for s in &mut segs {
        if let Segment::Stop { frames } = s {
            spill += frames.saturating_sub(10);
            *frames = (*frames).min(10);
        }
    }
    if spill > 0 {
        segs.push(Segment::ConstantVelocity { frames: spill });
    }
    segs
}

/// Two invisible intervals of 10–20 frames, one in each half of the sequence.
fn two_gaps(rng: &mut SplitMix64, frames: u32) -> Vec<(u32, u32)> {
    let half = frames / 2;
    let first_len = 10 + rng.below(11) as u32;
    let second_len = 10 + rng.below(11) as u32;
    let first = 10 + rng.below((half - first_len - 10) as u64) as u32;
    let second = half + 5 + rng.below((frames - half - second_len - 10) as u64) as u32;
    vec![(first, first_len), (second, second_len)]
}

/// Object starting on a ring around the image center and heading across it.
fn crossing(rng: &mut SplitMix64, frames: u32) -> ObjectProgram {
    let mut o = object(rng, vec![Segment::ConstantVelocity { frames }], vec![]);
    let angle = rng.uniform_range(-PI, PI);
    let radius = rng.uniform_range(220.0, 320.0);
    o.start = [WIDTH / 2.0 + radius * angle.cos(), HEIGHT / 2.0 + radius * angle.sin()];
    let heading = angle + PI + rng.uniform_range(-0.3, 0.3);
    let speed = rng.uniform_range(2.0, 5.0);
    o.velocity = [speed * heading.cos(), speed * heading.sin()];
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let s = preset(name, 7).unwrap();
            s.validate().unwrap();
            assert_eq!(s.preset, name);
        }
        let err = preset("spiral", 1).unwrap_err().to_string();
        assert!(err.contains("uav-mix") && err.contains("linear"), "{err}");
    }
}
