use proptest::prelude::*;
use sarreg::imagecore::{warp, warp_mask, DisplacementField, Image, InterpMode, SegMask};
use sarreg::metrics::{dice, hausdorff95, mad, mse_norm};

fn mask(h: usize, w: usize) -> impl Strategy<Value = SegMask> {
    proptest::collection::vec(any::<bool>(), h * w)
        .prop_map(move |v| SegMask::new(h, w, v.into_iter().map(u8::from).collect()).unwrap())
}

fn field(h: usize, w: usize, amp: f32) -> impl Strategy<Value = DisplacementField> {
    proptest::collection::vec((-amp..amp, -amp..amp), h * w).prop_map(move |v| {
        let (dr, dc) = v.into_iter().unzip();
        DisplacementField::new(h, w, dr, dc).unwrap()
    })
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(a in mask(8, 10), b in mask(8, 10)) {
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn surface_distances_are_symmetric(a in mask(9, 9), b in mask(9, 9)) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        prop_assert_eq!(hausdorff95(&a, &b).unwrap(), hausdorff95(&b, &a).unwrap());
        prop_assert_eq!(mad(&a, &b).unwrap(), mad(&b, &a).unwrap());
        prop_assert_eq!(hausdorff95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_norm_is_a_bounded_premetric(f in field(8, 8, 30.0), g in field(8, 8, 30.0), d in 1.0f64..20.0) {
        let v = mse_norm(&f, &g, d).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, mse_norm(&g, &f, d).unwrap());
        prop_assert_eq!(mse_norm(&f, &f, d).unwrap(), 0.0);
    }

    #[test]
    fn warps_preserve_range_and_binarity(f in field(8, 8, 6.0), m in mask(8, 8), seed in 0u32..1000) {
        let img = Image::from_fn(8, 8, |r, c| ((r * 31 + c * 17 + seed as usize) % 97) as f32 / 96.0).unwrap();
        let (lo, hi) = img.pixels().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for mode in [InterpMode::Bilinear, InterpMode::Nearest] {
            let out = warp(&img, &f, mode).unwrap();
            prop_assert!(out.pixels().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
        let wm = warp_mask(&m, &f).unwrap();
        prop_assert!(wm.pixels().iter().all(|&v| v <= 1));
        prop_assert_eq!(warp_mask(&m, &DisplacementField::zeros(8, 8)).unwrap(), m);
    }
}
