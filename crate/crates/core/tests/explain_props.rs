use proptest::prelude::*;
use viconex_core::explain::{
    fuse_pcam, fuse_vtc, normalize, refine_affinity, upsample_normalize, AffinityMatrix, LocalizationMap,
};

/// `M(i, j, c) = Σ_{k,l} A(i, j, k, l) · X(k, l, c)` with explicit grid indices.
fn four_index(aff: &AffinityMatrix, a: &LocalizationMap) -> Vec<f64> {
    let (n, c) = (a.height, a.concepts);
    let mut out = vec![0.0; n * n * c];
    for i in 0..n {
        for j in 0..n {
            for ci in 0..c {
                let mut s = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        s += aff.values[(i * n + j) * n * n + k * n + l] * a.get(k, l, ci);
                    }
                }
                out[(i * n + j) * c + ci] = s;
            }
        }
    }
    out
}

fn instance() -> impl Strategy<Value = (AffinityMatrix, LocalizationMap)> {
    (2usize..=4, 1usize..=3).prop_flat_map(|(n, c)| {
        let m = n * n;
        (
            prop::collection::vec(0.0f64..1.0, m * m),
            prop::collection::vec(0.0f64..2.0, m * c),
        )
            .prop_map(move |(a, v)| {
                (
                    AffinityMatrix::new(m, a).unwrap().row_normalize(),
                    LocalizationMap::new(n, n, c, v).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn refinement_matches_four_index_sum((aff, a) in instance()) {
        let fast = refine_affinity(&aff, &a).unwrap();
        for (x, y) in fast.values.iter().zip(four_index(&aff, &a)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn row_stochastic_refinement_keeps_channel_mean_for_symmetric_rows((_, a) in instance()) {
        // Doubly stochastic affinity: uniform mixture of identity and a cyclic shift.
        let m = a.height * a.width;
        let mut v = vec![0.0; m * m];
        for p in 0..m {
            v[p * m + p] += 0.5;
            v[p * m + (p + 1) % m] += 0.5;
        }
        let aff = AffinityMatrix::new(m, v).unwrap().row_normalize();
        let out = refine_affinity(&aff, &a).unwrap();
        for c in 0..a.concepts {
            let before: f64 = a.channel(c).iter().sum::<f64>() / m as f64;
            let after: f64 = out.channel(c).iter().sum::<f64>() / m as f64;
            prop_assert!((before - after).abs() < 1e-5);
        }
    }

    #[test]
    fn pipeline_scale_disappears_after_normalization(
        (aff, a_vc) in instance(),
        s in 0.01f64..100.0,
    ) {
        let pcam = LocalizationMap::new(
            a_vc.height,
            a_vc.width,
            a_vc.concepts,
            (0..a_vc.values.len()).map(|i| (i % 5) as f64 * 0.3).collect(),
        )
        .unwrap();
        let zero_text = LocalizationMap::zeros(a_vc.height, a_vc.width, a_vc.concepts);
        let run = |vc: &LocalizationMap| {
            let vtc = fuse_vtc(vc, Some(&zero_text)).unwrap();
            refine_affinity(&aff, &fuse_pcam(&pcam, &vtc).unwrap()).unwrap()
        };
        let base = run(&a_vc);
        let scaled = run(&a_vc.scaled(s));
        for (x, y) in base.values.iter().zip(&scaled.values) {
            prop_assert!((x * s - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        let (nb, ns) = (normalize(&base), normalize(&scaled));
        for (x, y) in nb.values.iter().zip(&ns.values) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn normalized_channels_span_unit_interval((_, a) in instance(), up in 0usize..3) {
        let size = a.height + up * a.height;
        let out = upsample_normalize(&a, size, size).unwrap();
        prop_assert!(out.normalized);
        for c in 0..a.concepts {
            let ch = out.channel(c);
            let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > 0.0 {
                prop_assert!(lo == 0.0 && (hi - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(ch.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn identity_and_zero_text_cases_are_exact() {
    let a = LocalizationMap::new(2, 2, 2, vec![0.1, 0.7, 0.2, 0.5, 0.9, 0.0, 0.3, 0.4]).unwrap();
    assert_eq!(refine_affinity(&AffinityMatrix::identity(4), &a).unwrap().values, a.values);
    let zero = LocalizationMap::zeros(2, 2, 2);
    assert_eq!(fuse_vtc(&a, Some(&zero)).unwrap().values, a.values);
    assert_eq!(fuse_vtc(&a, None).unwrap().values, a.values);
    let ones = LocalizationMap::new(2, 2, 2, vec![1.0; 8]).unwrap();
    assert_eq!(fuse_pcam(&ones, &a).unwrap().values, a.values);
}
