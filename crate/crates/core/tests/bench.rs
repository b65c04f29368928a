use lsrl_core::bench::{
    conv_flops, dense_flops, energy_accounting, flop_count, measure_throughput, ThroughputReport,
};
use lsrl_core::{Error, Vae, VaeConfig};
use proptest::prelude::*;

#[test]
fn layer_formulas() {
    assert_eq!(dense_flops(640, 64), 81_920);
    assert_eq!(conv_flops(4, 4, 3, 8, 24, 32), 589_824);
}

/// Independent count for the 4-conv encoder plus both latent heads.
fn encoder_flops_oracle(c: usize, latent: usize, w: usize, h: usize) -> u64 {
    let (mut h, mut w) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
    let mut cin = 3u64;
    let mut total = 0u64;
    for cout in [c, 2 * c, 4 * c, 8 * c] {
        h /= 2;
        w /= 2;
        let outputs = (cout * h * w) as u64;
        total += 2 * 16 * cin * outputs + outputs;
        cin = cout as u64;
    }
    total + 2 * 2 * cin * (h * w) as u64 * latent as u64
}

#[test]
fn flop_report_sums_layers_and_matches_oracle() {
    for id in 1..=3 {
        for (w, h) in [(64, 48), (160, 120), (40, 30)] {
            let cfg = VaeConfig::preset(id, w, h).unwrap();
            let r = flop_count(&cfg, w, h);
            assert_eq!(r.total, r.layers.iter().map(|l| l.flops).sum::<u64>());
            assert_eq!(r.total, encoder_flops_oracle(cfg.base_channels, 64, w, h), "config {id} {w}x{h}");
        }
    }
}

#[test]
fn doubling_resolution_quadruples_flops() {
    let cfg = VaeConfig::preset(2, 64, 48).unwrap();
    let a = flop_count(&cfg, 64, 48).total as f64;
    let b = flop_count(&cfg, 128, 96).total as f64;
    assert!((b / a - 4.0).abs() < 0.05, "{}", b / a);
}

proptest! {
    #[test]
    fn flops_monotone_in_resolution_and_width(w in 16usize..200, h in 16usize..200, dw in 0usize..64, dh in 0usize..64) {
        let cfg = VaeConfig::preset(1, w, h).unwrap();
        prop_assert!(flop_count(&cfg, w + dw, h + dh).total >= flop_count(&cfg, w, h).total);
        let mut prev = 0;
        for id in 1..=3 {
            let t = flop_count(&VaeConfig::preset(id, w, h).unwrap(), w, h).total;
            prop_assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn frame_rate_identity(samples in prop::collection::vec(0.01f64..100.0, 1..200)) {
        let r = ThroughputReport::from_samples(&samples, 1_000_000).unwrap();
        prop_assert!((r.frame_rate * r.median_ms - 1000.0).abs() <= 1.0);
        prop_assert!(r.p95_ms >= r.median_ms);
    }
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs()
}

#[test]
fn energy_examples() {
    let bold = ThroughputReport::from_table(16.8, 0.949).unwrap();
    let e = energy_accounting(&bold, 1.7143).unwrap();
    assert!(within(e.energy_per_frame_joules, 0.029, 0.01), "{e:?}");
    assert!(within(e.efficiency_gflops_per_watt, 0.554, 0.01), "{e:?}");
    let row = ThroughputReport::from_table(19.4, 0.823).unwrap();
    let e = energy_accounting(&row, 1.6988).unwrap();
    assert!(within(e.efficiency_gflops_per_watt, 0.484, 0.01), "{e:?}");
    assert!(matches!(energy_accounting(&bold, 0.0), Err(Error::Domain(_))));
    assert!(matches!(energy_accounting(&bold, -1.0), Err(Error::Domain(_))));
}

#[test]
fn throughput_argument_errors() {
    let vae = Vae::new(VaeConfig::preset(1, 64, 48).unwrap(), 0).unwrap();
    assert!(matches!(measure_throughput(&vae, 160, 120, 100, 0), Err(Error::Config(_))));
    assert!(matches!(measure_throughput(&vae, 64, 48, 99, 0), Err(Error::Usage(_))));
}

#[test]
fn latency_tracks_compute() {
    let small = Vae::new(VaeConfig::preset(1, 64, 48).unwrap(), 0).unwrap();
    let large = Vae::new(VaeConfig::preset(3, 64, 48).unwrap(), 0).unwrap();
    let big_frames = Vae::new(VaeConfig::preset(1, 128, 96).unwrap(), 0).unwrap();
    let a = measure_throughput(&small, 64, 48, 100, 1).unwrap();
    let b = measure_throughput(&large, 64, 48, 100, 1).unwrap();
    let c = measure_throughput(&big_frames, 128, 96, 100, 1).unwrap();
    assert!(a.median_ms <= b.median_ms, "{a:?} vs {b:?}");
    assert!(a.median_ms < c.median_ms, "{a:?} vs {c:?}");
    assert!((a.frame_rate * a.median_ms - 1000.0).abs() <= 1.0);
}
