//! Real-time feasibility benchmark: end-to-end latency of the deployable
//! estimation pipelines (frame preprocessing plus network inference).

use crate::data::STATE_DIM;
use crate::error::{Error, Result};
use crate::imgproc::{
    center_crop_resize, grayscale, spacetime_stack, GrayF, Image, PipeSpec, SpaceTimeSpec,
};
use crate::nets::{Network, Variant, IMAGE_CHANNELS, SEQ_LEN};
use crate::tensor::{Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

pub const DEFAULT_WARMUP: usize = 50;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchConfig {
    pub iterations: usize,
    pub warmup: usize,
    /// Recurrent variant: carry the hidden state across ticks instead of
    /// re-running the full window every tick.
    pub carry_state: bool,
    pub seed: u64,
    /// Raw camera resolution fed to the preprocessing stage.
    pub frame_width: usize,
    pub frame_height: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: 100,
            warmup: DEFAULT_WARMUP,
            carry_state: false,
            seed: 0,
            frame_width: 320,
            frame_height: 180,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<LatencyStats> {
        if samples_ms.is_empty() {
            return Err(Error::Usage(
                "latency stats need at least one sample".into(),
            ));
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        let n = sorted.len();
        Ok(LatencyStats {
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            p50_ms: sorted[n / 2],
            p99_ms: sorted[(n * 99 / 100).min(n - 1)],
            min_ms: sorted[0],
            max_ms: sorted[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
}

impl HostInfo {
    pub fn current() -> HostInfo {
        HostInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub pipeline: String,
    pub iterations: usize,
    pub warmup: usize,
    pub carry_state: bool,
    pub stats: LatencyStats,
    pub clock_resolution_ns: u64,
    /// Set when the measured medians are within two orders of magnitude
    /// of the clock resolution, making percentiles untrustworthy.
    pub clock_unreliable: bool,
    pub host: HostInfo,
}

/// Smallest observable nonzero tick of the monotonic clock, in
/// nanoseconds.
pub fn clock_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as u64);
    }
    best.max(1)
}

fn synthetic_frame(w: usize, h: usize, phase: usize) -> Image {
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            img.data[i] = ((x * 255 / w.max(1)) as u8).wrapping_add(phase as u8 * 17);
            img.data[i + 1] = (y * 200 / h.max(1)) as u8;
            img.data[i + 2] = (((x + y + phase * 5) % 255) as u8).wrapping_mul(1);
        }
    }
    img
}

fn synthetic_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..STATE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn finish(pipeline: &str, cfg: &BenchConfig, samples_ms: Vec<f64>) -> Result<BenchReport> {
    let stats = LatencyStats::from_samples(&samples_ms)?;
    let res_ns = clock_resolution_ns();
    let clock_unreliable = stats.p50_ms * 1e6 < res_ns as f64 * 100.0;
    Ok(BenchReport {
        pipeline: pipeline.to_string(),
        iterations: cfg.iterations,
        warmup: cfg.warmup,
        carry_state: cfg.carry_state,
        stats,
        clock_resolution_ns: res_ns,
        clock_unreliable,
        host: HostInfo::current(),
    })
}

/// Latency of the feedforward vision+state pipeline: crop, resize,
/// grayscale, spacetime stacking, and a full network forward per tick.
pub fn bench_feedforward(
    net: &mut Network,
    pipe: &PipeSpec,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if !net.variant().uses_images() {
        return Err(Error::Usage(
            "the benchmark covers the vision pipelines; the state-only variant has no image path"
                .into(),
        ));
    }
    if net.variant() == Variant::Rnn {
        return Err(Error::Usage(
            "use bench_recurrent for the recurrent variant".into(),
        ));
    }
    let st = SpaceTimeSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw: Vec<Image> = (0..8)
        .map(|i| synthetic_frame(cfg.frame_width, cfg.frame_height, i))
        .collect();

    // preallocated frame history ring; entries are overwritten in place
    let depth = st.required_history() + 1;
    let mut history: Vec<GrayF> = Vec::with_capacity(depth);
    for i in 0..depth {
        history.push(grayscale(&center_crop_resize(&raw[i % raw.len()], pipe)?));
    }
    let mean = GrayF::zeros(history[0].w, history[0].h);
    let state = synthetic_state(&mut rng);

    let mut samples = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.warmup + cfg.iterations {
        let frame = &raw[iter % raw.len()];
        let start = Instant::now();
        let gray = grayscale(&center_crop_resize(frame, pipe)?);
        let slot = iter % depth;
        history[slot].data.copy_from_slice(&gray.data);
        let tick = depth - 1;
        let ordered: Vec<GrayF> = (0..depth)
            .map(|k| history[(slot + 1 + k) % depth].clone())
            .collect();
        let stack = spacetime_stack(&ordered, tick, &st, &mean)?;
        let mut g = Graph::new();
        let (h, w) = (stack.shape[1], stack.shape[2]);
        let img = g.leaf(Tensor::new(vec![1, IMAGE_CHANNELS, h, w], stack.data)?);
        let s = if net.variant().uses_state() {
            Some(g.leaf(Tensor::new(vec![1, STATE_DIM], state.clone())?))
        } else {
            None
        };
        let (out, _) = net.forward(&mut g, Some(img), s, Mode::Eval)?;
        std::hint::black_box(g.value(out).data[0]);
        if iter >= cfg.warmup {
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    finish(net.variant().name(), cfg, samples)
}

/// Latency of the recurrent pipeline. With `carry_state` the hidden state
/// persists across ticks and each tick costs one encode plus one cell
/// update; without it, every tick replays the full window over cached
/// frame encodings, the way a stateless server would.
pub fn bench_recurrent(
    net: &mut Network,
    pipe: &PipeSpec,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if net.variant() != Variant::Rnn {
        return Err(Error::Usage(
            "bench_recurrent needs the recurrent variant".into(),
        ));
    }
    let st = SpaceTimeSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw: Vec<Image> = (0..8)
        .map(|i| synthetic_frame(cfg.frame_width, cfg.frame_height, i))
        .collect();
    let depth = st.required_history() + 1;
    let mut history: Vec<GrayF> = Vec::with_capacity(depth);
    for i in 0..depth {
        history.push(grayscale(&center_crop_resize(&raw[i % raw.len()], pipe)?));
    }
    let mean = GrayF::zeros(history[0].w, history[0].h);
    let state = synthetic_state(&mut rng);
    let hidden = crate::nets::HIDDEN_DIM;

    // carried values live outside any single graph
    let mut h_val = vec![0.0; hidden];
    let mut c_val = vec![0.0; hidden];
    // cached per-tick encodings for the stateless replay mode
    let mut enc_cache: Vec<Vec<f64>> = Vec::new();

    let mut samples = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.warmup + cfg.iterations {
        let frame = &raw[iter % raw.len()];
        let start = Instant::now();
        let gray = grayscale(&center_crop_resize(frame, pipe)?);
        let slot = iter % depth;
        history[slot].data.copy_from_slice(&gray.data);
        let ordered: Vec<GrayF> = (0..depth)
            .map(|k| history[(slot + 1 + k) % depth].clone())
            .collect();
        let stack = spacetime_stack(&ordered, depth - 1, &st, &mean)?;
        let mut g = Graph::new();
        let (sh, sw) = (stack.shape[1], stack.shape[2]);
        let img = g.leaf(Tensor::new(vec![1, IMAGE_CHANNELS, sh, sw], stack.data)?);
        let enc = net.encode_frame(&mut g, img, Mode::Eval)?;
        let s = g.leaf(Tensor::new(vec![1, STATE_DIM], state.clone())?);
        let out = if cfg.carry_state {
            let h = g.leaf(Tensor::new(vec![1, hidden], h_val.clone())?);
            let c = g.leaf(Tensor::new(vec![1, hidden], c_val.clone())?);
            let (out, h2, c2) = net.rnn_step_encoded(&mut g, enc, s, h, c)?;
            h_val.copy_from_slice(&g.value(h2).data);
            c_val.copy_from_slice(&g.value(c2).data);
            out
        } else {
            enc_cache.push(g.value(enc).data.clone());
            if enc_cache.len() > SEQ_LEN {
                enc_cache.remove(0);
            }
            // replay the full window from cached encodings, padding the
            // early ticks by repeating the oldest entry
            let mut h = g.leaf(Tensor::zeros(&[1, hidden]));
            let mut c = g.leaf(Tensor::zeros(&[1, hidden]));
            let mut out = enc;
            for k in 0..SEQ_LEN {
                let idx = if enc_cache.len() >= SEQ_LEN {
                    k
                } else {
                    k.saturating_sub(SEQ_LEN - enc_cache.len())
                        .min(enc_cache.len() - 1)
                };
                let e = g.leaf(Tensor::new(
                    vec![1, crate::nets::ENC_DIM],
                    enc_cache[idx].clone(),
                )?);
                let (o, h2, c2) = net.rnn_step_encoded(&mut g, e, s, h, c)?;
                out = o;
                h = h2;
                c = c2;
            }
            out
        };
        std::hint::black_box(g.value(out).data[0]);
        if iter >= cfg.warmup {
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    finish("rnn", cfg, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Variant;

    fn tiny_cfg() -> BenchConfig {
        BenchConfig {
            iterations: 4,
            warmup: 2,
            carry_state: false,
            seed: 1,
            frame_width: 96,
            frame_height: 54,
        }
    }

    #[test]
    fn latency_stats_match_hand_computation() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let s = LatencyStats::from_samples(&samples).unwrap();
        assert_eq!(s.mean_ms, 50.5);
        assert_eq!(s.p50_ms, 51.0); // index n/2 of the sorted list
        assert_eq!(s.p99_ms, 100.0);
        assert_eq!(s.min_ms, 1.0);
        assert_eq!(s.max_ms, 100.0);
        assert!(LatencyStats::from_samples(&[]).is_err());
    }

    #[test]
    fn feedforward_bench_runs_and_excludes_warmup() {
        let mut net = Network::build(Variant::Vs, 2);
        let pipe = PipeSpec {
            crop: 54,
            out_size: 16,
        };
        let report = bench_feedforward(&mut net, &pipe, &tiny_cfg()).unwrap();
        assert_eq!(report.iterations, 4);
        assert_eq!(report.warmup, 2);
        assert!(report.stats.mean_ms > 0.0);
        assert!(report.stats.p99_ms >= report.stats.p50_ms);
        assert!(report.clock_resolution_ns >= 1);
        assert_eq!(report.pipeline, "vs");
        assert!(report.host.logical_cpus >= 1);
    }

    #[test]
    fn state_only_variant_is_rejected() {
        let mut net = Network::build(Variant::S, 2);
        let pipe = PipeSpec {
            crop: 54,
            out_size: 16,
        };
        assert!(bench_feedforward(&mut net, &pipe, &tiny_cfg()).is_err());
    }

    #[test]
    fn recurrent_bench_carry_mode_is_faster_per_tick() {
        let mut net = Network::build(Variant::Rnn, 2);
        let pipe = PipeSpec {
            crop: 54,
            out_size: 16,
        };
        let mut cfg = tiny_cfg();
        let replay = bench_recurrent(&mut net, &pipe, &cfg).unwrap();
        cfg.carry_state = true;
        let carry = bench_recurrent(&mut net, &pipe, &cfg).unwrap();
        assert!(carry.carry_state);
        assert!(!replay.carry_state);
        // replaying 60 cell updates per tick must cost more than one
        assert!(
            replay.stats.p50_ms > carry.stats.p50_ms,
            "replay {} ms vs carry {} ms",
            replay.stats.p50_ms,
            carry.stats.p50_ms
        );
        assert!(bench_recurrent(&mut Network::build(Variant::V, 2), &pipe, &cfg).is_err());
    }

    #[test]
    fn clock_resolution_probe_is_sane() {
        let res = clock_resolution_ns();
        assert!(res >= 1);
        assert!(res < 10_000_000, "monotonic clock coarser than 10 ms");
    }
}
