use proptest::prelude::*;

use vibekit::flowmatch::{fm_loss, interpolate, velocity_target, Schedule};
use vibekit::gclfa::{
    axis_range, build_dense_mask, gclfa_attention_with, gclfa_reference, mask_stats, CoarseSpec, ExecOptions,
    GridSize, RoPEParams, TokenGrid, WindowSpec,
};
use vibekit::hfato::{degrade, hf_energy, reconstruct_x0, DegradationConfig};
use vibekit::numcore::Upsample;
use vibekit::relay_lora::{merge, strip, Checkpoint, LoRAAdapter};
use vibekit::{Rng, Tensor};

/// Grid extent and an even window strictly inside it.
fn axis() -> impl Strategy<Value = (usize, usize)> {
    (3usize..14).prop_flat_map(|n| (Just(n), (1..=(n - 1) / 2).prop_map(|h| 2 * h)))
}

fn tensor(shape: [usize; 2], seed: u64) -> Tensor {
    Rng::new(seed).gaussian(shape, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_query_sees_a_full_window((h, wh) in axis(), (w, ww) in axis()) {
        let grid = GridSize::new(h, w).unwrap();
        let win = WindowSpec::new(wh, ww).unwrap();
        let mask = build_dense_mask(grid, win).unwrap();
        let n = grid.tokens();
        for q in 0..n {
            let row = &mask.data()[q * n..(q + 1) * n];
            prop_assert!(row[q] == 1.0, "a query always sees itself");
            let count = row.iter().filter(|&&m| m == 1.0).count();
            prop_assert_eq!(count, (wh + 1) * (ww + 1));
        }
    }

    #[test]
    fn axis_ranges_stay_in_bounds((n, win) in axis(), q_frac in 0.0..1.0f64) {
        let q = ((q_frac * n as f64) as usize).min(n - 1);
        let (lo, hi) = axis_range(q, n, win);
        prop_assert!(lo <= q && q <= hi && hi < n);
        prop_assert_eq!(hi - lo, win);
    }

    #[test]
    fn blocked_executor_matches_dense_oracle(
        (h, wh) in axis(), (w, ww) in axis(), pool in 1usize..4, d in 1usize..4, seed in any::<u64>(),
    ) {
        let grid = GridSize::new(h, w).unwrap();
        let coarse = CoarseSpec::new(pool).unwrap();
        prop_assume!(coarse.check(grid).is_ok());
        let win = WindowSpec::new(wh, ww).unwrap();
        let d = 4 * d;
        let mut rng = Rng::new(seed);
        let mut draw = || TokenGrid::new(grid, rng.gaussian([grid.tokens(), d], 1.0)).unwrap();
        let (q, k, v) = (draw(), draw(), draw());
        let rope = RoPEParams::default();
        let oracle = gclfa_reference(&q, &k, &v, win, coarse, rope).unwrap();
        let blocked = gclfa_attention_with(&q, &k, &v, win, coarse, rope, ExecOptions::default()).unwrap();
        prop_assert!(blocked.out.max_abs_diff(&oracle).unwrap() < 1e-9);
        prop_assert_eq!(blocked.maccs, mask_stats(grid, win, coarse, d).unwrap().flops_sparse);
    }

    #[test]
    fn strip_undoes_merge_bitwise(
        d_out in 2usize..9, d_in in 2usize..9, rank in 1usize..3, alpha in 0.5..8.0f64, seed in any::<u64>(),
    ) {
        let mut base = Checkpoint::new();
        base.insert("w", tensor([d_out, d_in], seed)).unwrap();
        base.insert("untouched", tensor([3, 3], seed ^ 1)).unwrap();
        let base = base.to_storage_precision();
        let ad = LoRAAdapter::new("w", tensor([rank, d_in], seed ^ 2), tensor([d_out, rank], seed ^ 3), alpha).unwrap();

        let merged = merge(&base, std::slice::from_ref(&ad)).unwrap();
        prop_assert_eq!(merged.get("untouched"), base.get("untouched"));
        let back = strip(&merged, std::slice::from_ref(&ad)).unwrap();
        for (name, t) in base.iter() {
            let b = back.get(name).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits(), "{}", name);
            }
        }
        prop_assert_eq!(back.meta("lora_merge_depth"), Some("0"));
    }

    #[test]
    fn delta_is_linear_in_b_and_alpha(
        d_out in 2usize..7, d_in in 2usize..7, alpha in 0.5..8.0f64, c in -3.0..3.0f64, seed in any::<u64>(),
    ) {
        let a = tensor([2, d_in], seed);
        let (b1, b2) = (tensor([d_out, 2], seed ^ 1), tensor([d_out, 2], seed ^ 2));
        let delta = |b: Tensor, al: f64| LoRAAdapter::new("w", a.clone(), b, al).unwrap().delta().unwrap();
        let lhs = delta(b1.axpy(c, &b2).unwrap(), alpha);
        let rhs = delta(b1.clone(), alpha).axpy(c, &delta(b2, alpha)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
        let doubled = delta(b1.clone(), 2.0 * alpha);
        prop_assert!(doubled.max_abs_diff(&delta(b1, alpha).scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn degradation_is_idempotent_and_keeps_block_means(
        hb in 1usize..6, wb in 1usize..6, factor in 1usize..4, bilinear in any::<bool>(), seed in any::<u64>(),
    ) {
        let (h, w) = (hb * factor, wb * factor);
        let x = tensor([h, w], seed);
        let nearest = DegradationConfig { factor, up: Upsample::Nearest };
        let once = degrade(&x, &nearest).unwrap();
        let twice = degrade(&once, &nearest).unwrap();
        prop_assert!(twice.max_abs_diff(&once).unwrap() < 1e-12);
        prop_assert!((once.mean() - x.mean()).abs() < 1e-12);

        // Every factor-by-factor block of the nearest result is constant at
        // the block mean of the input.
        for by in 0..hb {
            for bx in 0..wb {
                let mut sum = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += x.data()[(by * factor + dy) * w + bx * factor + dx];
                    }
                }
                let v = once.data()[by * factor * w + bx * factor];
                prop_assert!((v - sum / (factor * factor) as f64).abs() < 1e-12);
            }
        }

        if bilinear {
            let cfg = DegradationConfig { factor, up: Upsample::Bilinear };
            let up = degrade(&x, &cfg).unwrap();
            prop_assert_eq!(up.shape(), x.shape());
        }
    }

    #[test]
    fn constant_images_have_no_high_frequency(h in 3usize..10, w in 3usize..10, c in -5.0..5.0f64) {
        prop_assert_eq!(hf_energy(&Tensor::full([h, w], c)).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_inverts_the_interpolation(t in 0.0..=1.0f64, seed in any::<u64>()) {
        let x0 = tensor([4, 5], seed);
        let eps = tensor([4, 5], seed ^ 7);
        let xt = interpolate(&x0, &eps, t, Schedule::Linear).unwrap();
        let v = velocity_target(&x0, &eps).unwrap();
        let back = reconstruct_x0(&xt, &v, t).unwrap();
        prop_assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
    }

    #[test]
    fn interpolation_hits_both_endpoints(seed in any::<u64>()) {
        let x0 = tensor([3, 3], seed);
        let eps = tensor([3, 3], seed ^ 9);
        prop_assert_eq!(interpolate(&x0, &eps, 0.0, Schedule::Linear).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &eps, 1.0, Schedule::Linear).unwrap(), eps);
    }

    #[test]
    fn flow_loss_is_nonnegative_and_zero_on_target(weight in 0.01..10.0f64, seed in any::<u64>()) {
        let a = tensor([3, 4], seed);
        let b = tensor([3, 4], seed ^ 5);
        prop_assert!(fm_loss(&a, &b, weight).unwrap() >= 0.0);
        prop_assert_eq!(fm_loss(&a, &a, weight).unwrap(), 0.0);
        prop_assert!(fm_loss(&a, &b, 0.0).is_err());
    }

    #[test]
    fn checkpoints_round_trip_through_bytes(
        shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..5),
        key in "[a-z]{1,6}", value in "[ -~]{0,12}", seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let mut ckpt = Checkpoint::new();
        for (i, shape) in shapes.iter().enumerate() {
            ckpt.insert(format!("t{i}"), rng.gaussian(shape.clone(), 1.0)).unwrap();
        }
        ckpt.set_meta(key, value);
        let ckpt = ckpt.to_storage_precision();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
