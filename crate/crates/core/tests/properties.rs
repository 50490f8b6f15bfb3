//! Property tests over the latent, Fourier, guidance and engine invariants.

use patchwise::engine::{EngineConfig, EngineState, Selection};
use patchwise::guidance::{chess_mask_apply, chess_weight, fuse_spectra, FusionMode};
use patchwise::{fft2, ifft2, LatentGrid, NoiseSchedule, PatchRegion};
use proptest::prelude::*;

fn grid_strategy(max_c: usize, max_h: usize, max_w: usize) -> impl Strategy<Value = LatentGrid> {
    (1..=max_c, 1..=max_h, 1..=max_w).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-5.0f64..5.0, c * h * w)
            .prop_map(move |data| LatentGrid::new(c, h, w, data).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (LatentGrid, LatentGrid)> {
    (1usize..=3, 1usize..=9, 1usize..=9).prop_flat_map(|(c, h, w)| {
        let n = c * h * w;
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
            .prop_map(move |(a, b)| {
                (
                    LatentGrid::new(c, h, w, a).unwrap(),
                    LatentGrid::new(c, h, w, b).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn fft_roundtrip(x in grid_strategy(3, 12, 12)) {
        let back = ifft2(&fft2(&x)).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-6 * x.max_abs().max(1.0));
    }

    #[test]
    fn fft_linearity((x, y) in pair_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let combo = x.zip_map(&y, "combo", |u, v| a * u + b * v).unwrap();
        let lhs = fft2(&combo);
        let (fx, fy) = (fft2(&x), fft2(&y));
        let scale = lhs.data().iter().fold(1.0f64, |m, v| m.max(v.norm()));
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((l - (p * a + q * b)).norm() <= 1e-6 * scale);
        }
    }

    #[test]
    fn parseval(x in grid_strategy(2, 10, 10)) {
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = fft2(&x).data().iter().map(|v| v.norm_sqr()).sum::<f64>() / x.area() as f64;
        prop_assert!((energy - spec).abs() <= 1e-6 * energy.max(1e-12));
    }

    #[test]
    fn crop_paste_roundtrip(x in grid_strategy(3, 16, 16), seed in any::<u64>()) {
        let (h, w) = (x.height(), x.width());
        let ph = 1 + (seed as usize) % h;
        let pw = 1 + (seed as usize >> 8) % w;
        let top = (seed as usize >> 16) % (h - ph + 1);
        let left = (seed as usize >> 24) % (w - pw + 1);
        let region = PatchRegion::new(top, left, ph, pw);
        let mut y = x.clone();
        y.paste(&region, &x.crop(&region).unwrap()).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn fused_amplitude_preserved((z, g) in pair_strategy()) {
        let (fz, fg) = (fft2(&z), fft2(&g));
        let fused = fuse_spectra(&fz, &fg, FusionMode::Phase).unwrap();
        for (a, b) in fused.data().iter().zip(fz.data()) {
            prop_assert!((a.norm() - b.norm()).abs() <= 1e-6 * b.norm().max(1.0));
        }
    }

    #[test]
    fn mask_complementarity((a, b) in pair_strategy(), top in 0usize..50, left in 0usize..50) {
        let region = PatchRegion::new(top, left, a.height(), a.width());
        let ab = chess_mask_apply(&a, &b, &region).unwrap();
        let ba = chess_mask_apply(&b, &a, &region).unwrap();
        let sum = ab.zip_map(&ba, "sum", |x, y| x + y).unwrap();
        let want = a.zip_map(&b, "sum", |x, y| x + y).unwrap();
        prop_assert_eq!(sum, want);
        for r in 0..a.height() {
            for c in 0..a.width() {
                let lambda = chess_weight(top + r, left + c);
                let expect = if lambda == 1.0 { a.get(0, r, c) } else { b.get(0, r, c) };
                prop_assert_eq!(ab.get(0, r, c), expect);
            }
        }
    }

    #[test]
    fn ledger_full_after_coverage(h in 4usize..40, w in 4usize..40, seed in any::<u64>()) {
        let ph = 1 + (seed as usize) % h;
        let pw = 1 + (seed as usize >> 8) % w;
        let sched = NoiseSchedule::default_linear(5).unwrap();
        let cfg = EngineConfig::new(ph, pw).with_selection(Selection::Random);
        let mut st = EngineState::new(LatentGrid::zeros(1, h, w), sched, cfg, seed).unwrap();
        let mut pastes = 0;
        while !st.ledger().is_full() {
            let r = st.select_patch().unwrap();
            st.blend_paste(&r, &LatentGrid::zeros(1, ph, pw)).unwrap();
            pastes += 1;
            prop_assert!(pastes <= h * w);
        }
        prop_assert!(st.ledger().first_write_counts().iter().all(|&c| c == 1));
    }
}
