use moqae_core::quant::ModelShape;
use moqae_core::router::{ExpertSet, PlanConfig};
use moqae_wasm::demo::{memory_curve, round_trip, sample_signal, strategy_heatmap};

#[test]
fn round_trip_error_stays_within_half_a_step() {
    let x = sample_signal(256, 1);
    for bits in [2u8, 4, 8] {
        let r = round_trip(&x, 1, 256, bits, 32).unwrap();
        let mut worst = 0.0f64;
        for (g, orig) in x.chunks(32).enumerate() {
            let (lo, hi) = orig.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let step = (hi - lo) / ((1u32 << bits) - 1) as f64;
            for (i, v) in orig.iter().enumerate() {
                worst = worst.max((v - r.restored[g * 32 + i]).abs() / step);
            }
        }
        assert!(worst <= 0.5 + 1e-9, "{bits} bits: {worst}");
        assert!(r.packed_bytes < r.fp16_bytes);
    }
    let fp16 = round_trip(&x, 1, 256, 16, 32).unwrap();
    assert!(fp16.max_abs_error < 1e-2);
    assert_eq!(fp16.packed_bytes, 512);
}

#[test]
fn round_trip_rejects_bad_bits() {
    assert!(round_trip(&[1.0, 2.0], 1, 2, 3, 32).is_err());
}

#[test]
fn memory_curve_matches_closed_form() {
    let shape = ModelShape::llama2_13b();
    let c = memory_curve(&shape, 1000, 3, 4, None).unwrap();
    // 40 layers, width 5120, K and V.
    assert_eq!(c[6], 1000.0);
    assert_eq!(c[7], (1000u64 * 40 * 2 * 5120 * 2) as f64);
    assert_eq!(c[8], c[7] / 4.0);
    let with_meta = memory_curve(&shape, 1000, 3, 4, Some(32)).unwrap();
    assert!(with_meta[8] > c[8]);
}

#[test]
fn heatmap_shows_freezing_and_sharing() {
    let experts = ExpertSet::new(vec![16, 4, 2]).unwrap();
    let cfg = PlanConfig { chunk_size: 32, rf: true, rs_group_size: 3 };
    let h = strategy_heatmap(300, 8, cfg, &experts, 5).unwrap();
    assert_eq!((h.blocks, h.chunks), (8, 10));
    assert_eq!(h.invocations, 3 * 8);
    for b in 0..8 {
        let row = &h.origins[b * 10..(b + 1) * 10];
        assert_eq!(row[0], 1);
        assert_eq!(row[9], 2);
        let expect = if b % 3 == 0 { 0 } else { 3 };
        assert!(row[1..9].iter().all(|&o| o == expect));
        assert_eq!(&h.bits[b * 10..(b + 1) * 10], &h.bits[(b / 3) * 30..(b / 3) * 30 + 10]);
    }
    assert!(h.bits.iter().all(|b| [16, 4, 2].contains(b)));
    assert_eq!(h, strategy_heatmap(300, 8, cfg, &experts, 5).unwrap());

    let plain = strategy_heatmap(300, 8, PlanConfig { chunk_size: 32, rf: false, rs_group_size: 1 }, &experts, 5).unwrap();
    assert_eq!(plain.invocations, 9 * 8);
}
