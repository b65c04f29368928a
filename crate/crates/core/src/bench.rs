//! Analytic FLOP model, encoder throughput measurement and energy accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs; activations count 1 FLOP per
//! element. Only the encoder (the inference path) is counted.

use crate::error::{Error, Result};
use crate::nn::{ConvTrunk, KERNEL, PAD, STRIDE};
use crate::sim::Frame;
use crate::vae::{Vae, VaeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const WARMUP_FRAMES: usize = 20;
pub const MIN_FRAMES: usize = 100;

pub fn conv_flops(kh: usize, kw: usize, cin: usize, cout: usize, hout: usize, wout: usize) -> u64 {
    2 * (kh * kw * cin * cout * hout * wout) as u64
}

pub fn dense_flops(inputs: usize, outputs: usize) -> u64 {
    2 * (inputs * outputs) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub config_id: u8,
    pub width: usize,
    pub height: usize,
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

/// Encoder FLOPs per frame at `width × height` (padded as the model pads).
pub fn flop_count(config: &VaeConfig, width: usize, height: usize) -> FlopReport {
    let cfg = VaeConfig {
        input_width: width,
        input_height: height,
        ..*config
    };
    let (mut h, mut w) = cfg.padded();
    let mut cin = 3;
    let mut layers = Vec::new();
    for (i, cout) in ConvTrunk::widths(cfg.base_channels).into_iter().enumerate() {
        h = (h + 2 * PAD - KERNEL) / STRIDE + 1;
        w = (w + 2 * PAD - KERNEL) / STRIDE + 1;
        layers.push(LayerFlops {
            name: format!("conv{i}"),
            flops: conv_flops(KERNEL, KERNEL, cin, cout, h, w),
        });
        layers.push(LayerFlops {
            name: format!("relu{i}"),
            flops: (cout * h * w) as u64,
        });
        cin = cout;
    }
    let features = cin * h * w;
    for head in ["mu", "logvar"] {
        layers.push(LayerFlops {
            name: head.into(),
            flops: dense_flops(features, cfg.latent_dim),
        });
    }
    let total = layers.iter().map(|l| l.flops).sum();
    FlopReport {
        config_id: cfg.config_id,
        width,
        height,
        layers,
        total,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub n_frames: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub frame_rate: f64,
    pub gflops_per_s: f64,
}

impl ThroughputReport {
    /// Summarize per-frame latencies (milliseconds).
    pub fn from_samples(times_ms: &[f64], flops_per_frame: u64) -> Result<Self> {
        if times_ms.is_empty() || times_ms.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Domain("latency samples must be positive and finite".into()));
        }
        let mut sorted = times_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // nearest-rank percentile
        let p95_ms = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        let frame_rate = 1000.0 / median_ms;
        Ok(Self {
            n_frames: n,
            median_ms,
            p95_ms,
            frame_rate,
            gflops_per_s: flops_per_frame as f64 * frame_rate / 1e9,
        })
    }

    /// Report built from a published time/frame and performance figure.
    pub fn from_table(time_ms: f64, gflops_per_s: f64) -> Result<Self> {
        if !(time_ms > 0.0 && gflops_per_s >= 0.0) {
            return Err(Error::Domain(format!(
                "time {time_ms} ms and performance {gflops_per_s} GFLOP/s must be positive"
            )));
        }
        Ok(Self {
            n_frames: 0,
            median_ms: time_ms,
            p95_ms: time_ms,
            frame_rate: 1000.0 / time_ms,
            gflops_per_s,
        })
    }
}

/// Time single-frame encoder inference on seeded random frames.
pub fn measure_throughput(vae: &Vae, width: usize, height: usize, n_frames: usize, seed: u64) -> Result<ThroughputReport> {
    let cfg = vae.config();
    if (cfg.input_width, cfg.input_height) != (width, height) {
        return Err(Error::Config(format!(
            "encoder expects {}x{}, benchmark asked for {width}x{height}",
            cfg.input_width, cfg.input_height
        )));
    }
    if n_frames < MIN_FRAMES {
        return Err(Error::Usage(format!("need at least {MIN_FRAMES} timed frames, got {n_frames}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Frame> = (0..8)
        .map(|_| Frame::new(width, height, (0..width * height * 3).map(|_| rng.gen()).collect()))
        .collect::<Result<_>>()?;
    let mut times = Vec::with_capacity(n_frames);
    for i in 0..WARMUP_FRAMES + n_frames {
        let f = &frames[i % frames.len()];
        let start = Instant::now();
        let code = vae.encode(f)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(code);
        if i >= WARMUP_FRAMES {
            times.push(elapsed.max(1e-6));
        }
    }
    ThroughputReport::from_samples(&times, flop_count(cfg, width, height).total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub external_power_watts: f64,
    pub energy_per_frame_joules: f64,
    pub efficiency_gflops_per_watt: f64,
}

/// Energy per frame and GFLOPS/W from an externally measured power draw.
pub fn energy_accounting(throughput: &ThroughputReport, watts: f64) -> Result<EnergyReport> {
    if !(watts > 0.0 && watts.is_finite()) {
        return Err(Error::Domain(format!("power must be positive, got {watts} W")));
    }
    Ok(EnergyReport {
        external_power_watts: watts,
        energy_per_frame_joules: watts * throughput.median_ms / 1e3,
        efficiency_gflops_per_watt: throughput.gflops_per_s / watts,
    })
}

/// One bench CSV row; column names follow the hardware table layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_id: u8,
    pub width: usize,
    pub height: usize,
    pub cpu_freq: String,
    pub gpu_freq: String,
    pub power_mw: Option<f64>,
    pub time_per_frame_ms: f64,
    pub p95_ms: f64,
    pub frame_rate: f64,
    pub mflops_per_frame: f64,
    pub gflops_per_s: f64,
    pub energy_j: Option<f64>,
    pub gflops_per_w: Option<f64>,
}

impl BenchRow {
    pub fn new(flops: &FlopReport, t: &ThroughputReport, energy: Option<&EnergyReport>) -> Self {
        Self {
            config_id: flops.config_id,
            width: flops.width,
            height: flops.height,
            cpu_freq: "n/a".into(),
            gpu_freq: "n/a".into(),
            power_mw: energy.map(|e| e.external_power_watts * 1e3),
            time_per_frame_ms: t.median_ms,
            p95_ms: t.p95_ms,
            frame_rate: t.frame_rate,
            mflops_per_frame: flops.total as f64 / 1e6,
            gflops_per_s: t.gflops_per_s,
            energy_j: energy.map(|e| e.energy_per_frame_joules),
            gflops_per_w: energy.map(|e| e.efficiency_gflops_per_watt),
        }
    }
}
