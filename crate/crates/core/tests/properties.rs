use proptest::prelude::*;

use asymkv::attention::{attention_step, attention_weights};
use asymkv::kvcache::flush_split;
use asymkv::numerics::{matmul, mse, softmax_rows};
use asymkv::policy::{estimate_memory, AsymConfig, ModelShape};
use asymkv::quantizer::{dequantize, pack_codes, quantize, unpack_codes, SUPPORTED_BITS};
use asymkv::{Axis, Matrix, QuantSpec};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn bits() -> impl Strategy<Value = u8> {
    prop::sample::select(SUPPORTED_BITS.to_vec())
}

fn axis() -> impl Strategy<Value = Axis> {
    prop_oneof![Just(Axis::PerToken), Just(Axis::PerChannel)]
}

proptest! {
    #[test]
    fn pack_unpack_identity(bits in bits(), n in 1usize..40, seed in any::<u64>()) {
        let top = (1u64 << bits) - 1;
        let len = n * (8 / bits as usize);
        let codes: Vec<u8> = (0..len as u64).map(|i| ((seed.rotate_left(i as u32 % 64) ^ i) & top) as u8).collect();
        let packed = pack_codes(&codes, bits).unwrap();
        prop_assert_eq!(unpack_codes(&packed, bits, len).unwrap(), codes);
    }

    #[test]
    fn round_trip_within_half_step(m in matrix(8, 8), bits in bits(), axis in axis(), gs in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let q = quantize(&m, QuantSpec::new(bits, axis, gs).unwrap()).unwrap();
        let back = dequantize(&q).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                prop_assert!((m.get(r, c) - back.get(r, c)).abs() <= q.scale_at(r, c) / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn per_channel_is_per_token_of_transpose(m in matrix(8, 4), bits in bits()) {
        let by_channel = dequantize(&quantize(&m, QuantSpec::new(bits, Axis::PerChannel, 4).unwrap()).unwrap()).unwrap();
        let by_token = dequantize(&quantize(&m.transpose(), QuantSpec::new(bits, Axis::PerToken, 4).unwrap()).unwrap()).unwrap();
        prop_assert_eq!(by_channel, by_token.transpose());
    }

    #[test]
    fn more_bits_never_hurt_on_average(m in matrix(8, 8), axis in axis()) {
        let errs: Vec<f64> = SUPPORTED_BITS
            .iter()
            .map(|&b| mse(&m, &dequantize(&quantize(&m, QuantSpec::new(b, axis, 8).unwrap()).unwrap()).unwrap()).unwrap())
            .collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(m in matrix(3, 7)) {
        let s = softmax_rows(&m);
        for r in 0..3 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn mse_symmetric_and_zero_on_self(a in matrix(3, 3), b in matrix(3, 3)) {
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn matmul_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = 1.0 + left.max_abs();
        prop_assert!(left.sub(&right).unwrap().max_abs() <= 1e-9 * scale);
    }

    #[test]
    fn attention_output_is_convex_combination(x in matrix(1, 4), k in matrix(6, 4), v in matrix(6, 4)) {
        let out = attention_step(&x, &k, &v).unwrap();
        let w = attention_weights(&x, &k).unwrap();
        prop_assert!((w.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|r| v.get(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.get(0, c) >= lo - 1e-9 && out.get(0, c) <= hi + 1e-9);
        }
    }

    #[test]
    fn flush_split_partitions_tokens(t in 0usize..500, r_groups in 0usize..4, gs in 1usize..16) {
        let (quantized, residual) = flush_split(t, r_groups * gs, gs);
        prop_assert_eq!(quantized + residual, t);
        prop_assert_eq!(quantized % gs, 0);
    }

    #[test]
    fn memory_linear_in_batch_and_mirror_symmetric(l_k in 0usize..=8, l_v in 0usize..=8, batch in 1usize..8) {
        let shape = ModelShape::new(8, 64, 8, 16);
        let at = |k: usize, v: usize, b: usize| {
            estimate_memory(&shape, &AsymConfig::new(k, v, 4, 2, 8), 128, b).unwrap().total_bytes
        };
        prop_assert_eq!(at(l_k, l_v, batch), batch as u64 * at(l_k, l_v, 1));
        prop_assert_eq!(at(l_k, l_v, 1), at(l_v, l_k, 1));
    }
}
