use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lite3r::analysis::sensitivity_of;
use lite3r::checkpoint::Archive;
use lite3r::distill::attn_kd_loss;
use lite3r::fp8::{fake_quant, quantize_scaled, QuantAxis, FP8_MAX};
use lite3r::model::HookRecord;
use lite3r::sla::{attention_flops_breakdown, keep_count, top_k_mask, AttentionVariant};
use lite3r::tensor::{Tape, Tensor};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-100.0f32..100.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn top_k_keeps_k_largest(scores in matrix(6, 12), k_frac in 0.0f64..1.0) {
        let n = scores.cols();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mask = top_k_mask(&scores, k).unwrap();
        for r in 0..scores.rows() {
            prop_assert_eq!(mask.row_count(r), k);
            let kept_min = (0..n).filter(|&j| mask.get(r, j)).map(|j| scores.get(r, j)).fold(f32::INFINITY, f32::min);
            let dropped_max = (0..n).filter(|&j| !mask.get(r, j)).map(|j| scores.get(r, j)).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn keep_count_is_monotone_and_bounded(n in 1usize..4096, a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(keep_count(n, lo) <= keep_count(n, hi));
        prop_assert!((1..=n).contains(&keep_count(n, lo)));
        prop_assert_eq!(keep_count(n, 1.0), n);
    }

    #[test]
    fn dense_flops_equal_full_sla_score_and_mix(n in 1u64..5000, d in 1u64..512) {
        let dense = attention_flops_breakdown(n, d, 1.0, AttentionVariant::Dense);
        let sla = attention_flops_breakdown(n, d, 1.0, AttentionVariant::Sla);
        prop_assert_eq!(dense.total(), sla.score_and_mix());
    }

    #[test]
    fn sensitivity_sign_and_permutation_invariant(data in prop::collection::vec(-10.0f32..10.0, 2..400), seed in any::<u64>()) {
        let base = sensitivity_of(&data).unwrap();
        let neg: Vec<f32> = data.iter().map(|x| -x).collect();
        let mut shuffled = data.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for other in [sensitivity_of(&neg).unwrap(), sensitivity_of(&shuffled).unwrap()] {
            prop_assert_eq!(other.dyn_range, base.dyn_range);
            prop_assert!((other.kurtosis - base.kurtosis).abs() <= 1e-9 * base.kurtosis.max(1.0));
            prop_assert!((other.score - base.score).abs() <= 1e-9 * base.score.max(1.0));
        }
    }

    #[test]
    fn sensitivity_scaling_moves_only_dynamic_range(data in prop::collection::vec(-10.0f32..10.0, 2..400), c in 1.5f32..8.0) {
        let base = sensitivity_of(&data).unwrap();
        prop_assume!(base.dyn_range > 0.0);
        let scaled: Vec<f32> = data.iter().map(|x| x * c).collect();
        let s = sensitivity_of(&scaled).unwrap();
        prop_assert!(s.dyn_range > base.dyn_range);
        prop_assert!((s.kurtosis - base.kurtosis).abs() <= 1e-4 * base.kurtosis.max(1.0));
        prop_assert!((0.0..=1.0).contains(&s.outlier_frac));
    }

    #[test]
    fn kd_loss_nonnegative_and_zero_iff_equal(a in matrix(4, 4), shift in -3.0f32..3.0) {
        let rec = |t: Tensor| HookRecord { module: "m".into(), value: t, node: None };
        let b = a.map(|x| x + shift);
        let mut tape = Tape::new();
        let same = attn_kd_loss(&mut tape, &[rec(a.clone())], &[rec(a.clone())]).unwrap();
        prop_assert_eq!(tape.value(same).unwrap().item(), 0.0);
        let diff = attn_kd_loss(&mut tape, &[rec(a.clone())], &[rec(b.clone())]).unwrap();
        let v = tape.value(diff).unwrap().item();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, a.bit_eq(&b));
    }

    #[test]
    fn quantized_values_stay_inside_the_row_range(x in matrix(5, 9)) {
        for axis in [QuantAxis::PerOutputRow, QuantAxis::PerToken] {
            let q = quantize_scaled(&x, axis).unwrap();
            let dq = fake_quant(&x, axis).unwrap();
            prop_assert!(dq.bit_eq(&q.dequantize()));
            for r in 0..x.rows() {
                let row_max = x.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let s = q.scales()[r];
                prop_assert!(s > 0.0);
                for &v in dq.row(r) {
                    prop_assert!(v.abs() <= FP8_MAX * s * (1.0 + 1e-6));
                    prop_assert!(v.abs() <= row_max * (1.0 + 1e-6) + 1e-30);
                }
            }
        }
    }

    #[test]
    fn archive_roundtrip(entries in prop::collection::vec(matrix(3, 5), 0..5), flags in prop::collection::vec(any::<bool>(), 0..16)) {
        let mut a = Archive::new(serde_json::json!({"n": entries.len()}));
        for (i, t) in entries.iter().enumerate() {
            if i % 2 == 0 {
                a.push_f32(format!("t{i}"), t).unwrap();
            } else {
                a.push_fp8(format!("t{i}"), &quantize_scaled(t, QuantAxis::PerOutputRow).unwrap()).unwrap();
            }
        }
        a.push_bool("flags", &[flags.len()], flags.clone()).unwrap();
        let bytes = a.to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        for (i, t) in entries.iter().enumerate() {
            if i % 2 == 0 {
                let name = format!("t{i}");
                prop_assert!(back.tensor(&name).unwrap().bit_eq(t));
            }
        }
    }
}
