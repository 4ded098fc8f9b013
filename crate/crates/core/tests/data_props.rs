use proptest::prelude::*;
use stllm_df::data::cache::{self, CacheKey};
use stllm_df::data::{build_windows, fit_apply_normalizer, inject_missing, parse_timestamp, split_chronological, SeriesSource, SplitSpec, WindowSpec};
use stllm_df::{Error, Tensor};

fn series(steps: usize, nodes: usize, features: usize, salt: f64) -> SeriesSource {
    let v = Tensor::from_fn(&[steps, nodes, features], |i| (i as f64 * 0.37 + salt).sin() * 10.0 + i as f64 * 0.01);
    SeriesSource::new(v, None, parse_timestamp("2024-03-01 00:00").unwrap(), 5).unwrap()
}

/// Offsets a brute-force scan accepts: multiples of the stride whose
/// window fits entirely inside the series.
fn enumerate_offsets(steps: usize, spec: &WindowSpec) -> Vec<usize> {
    (0..steps)
        .filter(|o| o % spec.stride == 0 && o + spec.input_len + spec.output_len <= steps)
        .collect()
}

fn window_spec() -> impl Strategy<Value = WindowSpec> {
    (1usize..16, 1usize..16, 1usize..8).prop_map(|(input_len, output_len, stride)| WindowSpec {
        input_len,
        output_len,
        stride,
    })
}

fn ratios() -> impl Strategy<Value = [f64; 3]> {
    (0.4f64..0.8, 0.05f64..0.3).prop_map(|(a, b)| {
        let b = b.min(0.95 - a);
        [a, b, 1.0 - a - b]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn window_count_matches_enumeration(steps in 1usize..160, spec in window_spec()) {
        let src = series(steps, 2, 1, 0.0);
        let want = enumerate_offsets(steps, &spec);
        match build_windows(&src, &spec) {
            Ok(ds) => {
                let got: Vec<usize> = ds.samples.iter().map(|s| s.offset).collect();
                prop_assert_eq!(&got, &want);
                prop_assert_eq!(spec.count(steps), Some(want.len()));
                for s in &ds.samples {
                    prop_assert_eq!(s.input.data(), &src.values.data()[s.offset * 2..(s.offset + spec.input_len) * 2]);
                }
            }
            Err(e) => {
                prop_assert!(want.is_empty());
                prop_assert!(matches!(e, Error::InsufficientData { .. }), "{e:?}");
            }
        }
    }

    #[test]
    fn splits_never_leak_across_boundaries(steps in 80usize..400, spec in window_spec(), r in ratios()) {
        let src = series(steps, 1, 2, 1.0);
        let Ok(splits) = split_chronological(&src, &spec, &SplitSpec { ratios: r }) else {
            return Ok(());
        };
        let mut prev_end = 0;
        for ((_, ds), seg) in splits.parts().iter().zip(&splits.segments) {
            prop_assert_eq!(seg.start, prev_end);
            prev_end = seg.end;
            let touched = ds.step_range().unwrap();
            prop_assert!(touched.start >= seg.start && touched.end <= seg.end, "{touched:?} outside {seg:?}");
        }
        prop_assert_eq!(prev_end, steps);
        let last_train = splits.train.samples.iter().map(|s| s.offset + spec.span()).max().unwrap();
        let first_val = splits.val.samples.iter().map(|s| s.offset).min().unwrap();
        let last_val = splits.val.samples.iter().map(|s| s.offset + spec.span()).max().unwrap();
        let first_test = splits.test.samples.iter().map(|s| s.offset).min().unwrap();
        prop_assert!(last_train <= first_val && last_val <= first_test);
    }

    #[test]
    fn normalizer_ignores_everything_outside_train(steps in 120usize..300, r in ratios(), scale in 2.0f64..50.0) {
        let spec = WindowSpec { input_len: 4, output_len: 3, stride: 1 };
        let split = SplitSpec { ratios: r };
        let src = series(steps, 2, 2, 0.5);
        let Ok(raw) = split_chronological(&src, &spec, &split) else {
            return Ok(());
        };
        let cut = raw.segments[0].end * 4;
        let mut other = src.clone();
        for v in &mut other.values.data_mut()[cut..] {
            *v = *v * scale + 1000.0;
        }
        let raw_other = split_chronological(&other, &spec, &split).unwrap();
        let (a, na) = fit_apply_normalizer(&src, &raw).unwrap();
        let (b, nb) = fit_apply_normalizer(&other, &raw_other).unwrap();
        prop_assert!(na.to_tensor().bit_eq(&nb.to_tensor()));
        prop_assert_eq!(&a.train, &b.train);
    }

    #[test]
    fn cache_round_trip_is_bit_exact(steps in 60usize..200, spec in window_spec(), p in 0.0f64..0.3, seed in 0u64..1000) {
        let src = series(steps, 3, 2, seed as f64);
        let Ok(raw) = split_chronological(&src, &spec, &SplitSpec::default()) else {
            return Ok(());
        };
        let (mut splits, norm) = fit_apply_normalizer(&src, &raw).unwrap();
        splits.test = inject_missing(&splits.test, p, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = CacheKey { spec_hash: format!("spec{seed}"), source_hash: "src".into() };
        cache::save(dir.path(), &key, &splits, &norm).unwrap();
        let (back, nback) = cache::load(dir.path(), &key).unwrap().expect("cache hit");
        prop_assert_eq!(&back, &splits);
        for (x, y) in back.parts().iter().zip(splits.parts().iter()) {
            for (s, t) in x.1.samples.iter().zip(&y.1.samples) {
                prop_assert!(s.input.bit_eq(&t.input) && s.target.bit_eq(&t.target));
            }
        }
        prop_assert!(nback.to_tensor().bit_eq(&norm.to_tensor()));
    }
}
