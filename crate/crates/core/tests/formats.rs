use mvts::dataprep::{decode_windows, encode_windows, load_windows, save_windows, Provenance, Split, WindowSet};
use mvts::model::{ModelConfig, ModelParams};
use mvts::numerics::Tensor;
use mvts::training::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use mvts::Error;
use proptest::prelude::*;

fn bits(data: &[f32]) -> Vec<u32> {
    data.iter().map(|v| v.to_bits()).collect()
}

fn window_set() -> impl Strategy<Value = WindowSet> {
    (1usize..6, 1usize..5, 1usize..4).prop_flat_map(|(n, t, m)| {
        (
            proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n * t * m),
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(0u8..3, n),
        )
            .prop_map(move |(data, labels, splits)| {
                let provenance = (0..n).map(|i| Provenance { recording: format!("r{i}"), start: i * t }).collect();
                WindowSet::new(
                    Tensor::new(vec![n, t, m], data).unwrap(),
                    labels,
                    splits.into_iter().map(|c| Split::from_code(c).unwrap()).collect(),
                    provenance,
                )
                .unwrap()
            })
    })
}

fn params(seed: u64) -> ModelParams<f32> {
    let cfg = ModelConfig { seed, heads: 1 + (seed % 2) as usize, ..ModelConfig::tiny() };
    ModelParams::init(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_container_round_trips_every_bit(ws in window_set()) {
        let bytes = encode_windows(&ws);
        let back = decode_windows(&bytes).unwrap();
        prop_assert_eq!(bits(back.windows.data()), bits(ws.windows.data()));
        prop_assert_eq!(back.windows.shape(), ws.windows.shape());
        prop_assert_eq!(&back.labels, &ws.labels);
        prop_assert_eq!(&back.splits, &ws.splits);
        prop_assert_eq!(encode_windows(&back), bytes);
    }

    #[test]
    fn truncated_windows_containers_are_rejected(ws in window_set(), frac in 0.0f64..1.0) {
        let bytes = encode_windows(&ws);
        let cut = (bytes.len() as f64 * frac) as usize;
        match decode_windows(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => prop_assert!(offset <= cut as u64),
            other => prop_assert!(false, "cut {}: {:?}", cut, other.map(|w| w.len())),
        }
    }

    #[test]
    fn checkpoints_round_trip_every_bit(seed in 0u64..1000, noise in proptest::collection::vec(any::<u32>(), 8)) {
        let mut p = params(seed);
        // Arbitrary bit patterns, NaN payloads included.
        for ((_, t, _), raw) in p.named_tensors_mut().into_iter().zip(noise.iter().cycle()) {
            t.data_mut()[0] = f32::from_bits(*raw);
        }
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.config, &p.config);
        for ((na, a, _), (nb, b, _)) in p.named_tensors().into_iter().zip(back.named_tensors()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(bits(a.data()), bits(b.data()));
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_checkpoint_headers_are_rejected(seed in 0u64..100, pos in 0usize..6, byte in any::<u8>()) {
        let bytes = encode_checkpoint(&params(seed)).unwrap();
        prop_assume!(bytes[pos] != byte);
        let mut bad = bytes.clone();
        bad[pos] = byte;
        prop_assert!(decode_checkpoint(&bad).is_err());
    }
}

#[test]
fn files_round_trip_and_malformed_files_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = params(1);
    let ckpt = dir.path().join("m.ckpt");
    let bytes = save_checkpoint(&p, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&ckpt).unwrap(), p);

    let ws = WindowSet::new(
        Tensor::from_fn([3, 4, 2], |i| i as f32 * 0.25 - 1.0),
        vec![false, true, false],
        vec![Split::Train, Split::Val, Split::Test],
        (0..3).map(|i| Provenance { recording: "r".into(), start: i }).collect(),
    )
    .unwrap();
    let wpath = dir.path().join("w.bin");
    save_windows(&ws, &wpath, &Default::default()).unwrap();
    let back = load_windows(&wpath).unwrap();
    assert_eq!(bits(back.windows.data()), bits(ws.windows.data()));
    assert_eq!(back.provenance, ws.provenance);

    let wbytes = std::fs::read(&wpath).unwrap();
    for (path, full) in [(&ckpt, &bytes), (&wpath, &wbytes)] {
        std::fs::write(path, &full[..full.len() - 3]).unwrap();
        let err = if path == &ckpt {
            load_checkpoint(path).map(|_| ()).unwrap_err()
        } else {
            load_windows(path).map(|_| ()).unwrap_err()
        };
        assert_eq!(err.category().exit_code(), 2, "{err}");
    }
}
