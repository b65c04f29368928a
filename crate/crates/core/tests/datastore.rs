use lsrl_core::datastore::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_vae, read_dataset, save_checkpoint, save_vae,
    write_dataset, CheckpointHeader, FrameDataset, FrameSource, TensorEntry, CHECKPOINT_MAGIC, FRAMES_FILE,
};
use lsrl_core::tensor::NamedTensor;
use lsrl_core::{Error, Frame, ParamStore, Vae, VaeConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn random_frames(n: usize, w: usize, h: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Frame::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap())
        .collect()
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let frames = random_frames(10, 64, 48, 1);
    let ds = FrameDataset::from_frames(&frames, FrameSource::Scripted, "abc").unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.frames(), frames);
    assert_eq!(std::fs::read(dir.path().join(FRAMES_FILE)).unwrap().len(), 10 * 64 * 48 * 3);
    // no temp files left behind
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}

#[test]
fn truncated_blob_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = FrameDataset::from_frames(&random_frames(3, 16, 8, 2), FrameSource::Human, "h").unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join(FRAMES_FILE);
    let mut blob = std::fs::read(&path).unwrap();
    blob.pop();
    std::fs::write(&path, &blob).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Corruption(msg)) => {
            assert!(msg.contains(&(3 * 16 * 8 * 3 - 1).to_string()), "{msg}");
            assert!(msg.contains(&(3 * 16 * 8 * 3).to_string()), "{msg}");
        }
        other => panic!("expected corruption, got {other:?}"),
    }
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let ds = FrameDataset::from_frames(&[], FrameSource::Scripted, "").unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.manifest.count, 0);
}

#[test]
fn vae_checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.lsrl");
    let vae = Vae::new(VaeConfig::preset(1, 64, 48).unwrap(), 9).unwrap();
    save_vae(&vae, 9, &path).unwrap();
    let back = load_vae(&path).unwrap();
    assert_eq!(back.config(), vae.config());
    for (a, b) in vae.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        let (a, b): (Vec<u32>, Vec<u32>) = (
            a.value.iter().map(|v| v.to_bits()).collect(),
            b.value.iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
    assert_eq!(load_checkpoint(&path).unwrap().metadata["seed"], 9);
}

#[test]
fn loading_foreign_checkpoint_names_first_missing_tensor() {
    let vae = Vae::new(VaeConfig::preset(1, 64, 48).unwrap(), 0).unwrap();
    let mut store: ParamStore = ParamStore::new();
    store.add("actor.l0.weight", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    store.add("actor.l0.bias", &[2], vec![5.0, 6.0]).unwrap();
    let before = store.clone();
    match store.load_named(&vae.to_tensors()) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, "actor.l0.weight"),
        other => panic!("{other:?}"),
    }
    assert_eq!(store.to_named(), before.to_named());
}

#[test]
fn shape_mismatch_leaves_model_unchanged() {
    let mut store: ParamStore = ParamStore::new();
    store.add("a", &[2], vec![1.0, 2.0]).unwrap();
    store.add("b", &[3], vec![3.0, 4.0, 5.0]).unwrap();
    let before = store.to_named();
    let tensors = vec![
        NamedTensor {
            name: "a".into(),
            shape: vec![2],
            data: vec![9.0, 9.0],
        },
        NamedTensor {
            name: "b".into(),
            shape: vec![1, 3],
            data: vec![9.0, 9.0, 9.0],
        },
    ];
    assert!(matches!(store.load_named(&tensors), Err(Error::Shape { .. })));
    assert_eq!(store.to_named(), before);
}

fn handmade(entries: Vec<TensorEntry>, payload: &[u8], version: u32) -> Vec<u8> {
    let header = serde_json::to_vec(&CheckpointHeader {
        tensors: entries,
        metadata: json!({}),
    })
    .unwrap();
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

fn entry(name: &str, n: usize, offset: u64) -> TensorEntry {
    TensorEntry {
        name: name.into(),
        shape: vec![n],
        dtype: "f32".into(),
        offset,
        length: 4 * n as u64,
    }
}

#[test]
fn header_faults_are_distinct_errors() {
    let payload = [0u8; 16];
    let ok = handmade(vec![entry("a", 2, 0), entry("b", 2, 8)], &payload, 1);
    assert_eq!(decode_checkpoint(&ok).unwrap().tensors.len(), 2);

    let overlap = handmade(vec![entry("a", 2, 0), entry("b", 2, 4)], &payload[..12], 1);
    assert!(matches!(decode_checkpoint(&overlap), Err(Error::Corruption(m)) if m.contains("overlap")));

    let short_sum = handmade(vec![entry("a", 2, 0)], &payload, 1);
    assert!(matches!(decode_checkpoint(&short_sum), Err(Error::Corruption(_))));

    let past_end = handmade(vec![entry("a", 2, 0), entry("b", 2, 12)], &payload, 1);
    assert!(matches!(decode_checkpoint(&past_end), Err(Error::Corruption(_))));

    let dup = handmade(vec![entry("a", 2, 0), entry("a", 2, 8)], &payload, 1);
    assert!(matches!(decode_checkpoint(&dup), Err(Error::Corruption(_))));

    let version = handmade(vec![entry("a", 4, 0)], &payload, 2);
    assert!(matches!(
        decode_checkpoint(&version),
        Err(Error::UnsupportedVersion { found: 2, supported: 1 })
    ));

    let mut magic = ok.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic { .. })));

    assert!(matches!(decode_checkpoint(&ok[..10]), Err(Error::Corruption(_))));
}

#[test]
fn duplicate_names_rejected_on_save() {
    let t = NamedTensor {
        name: "x".into(),
        shape: vec![1],
        data: vec![0.0],
    };
    assert!(matches!(encode_checkpoint(&[t.clone(), t], &json!({})), Err(Error::Usage(_))));
}

fn tensor_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<u32>)>> {
    prop::collection::vec(
        prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (Just(shape), prop::collection::vec(any::<u32>(), n))
        }),
        0..6,
    )
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bitwise(specs in tensor_strategy(), seed in any::<u64>()) {
        // raw bit patterns, NaN payloads included
        let tensors: Vec<NamedTensor> = specs
            .into_iter()
            .enumerate()
            .map(|(i, (shape, bits))| NamedTensor {
                name: format!("t{i}"),
                shape,
                data: bits.into_iter().map(f32::from_bits).collect(),
            })
            .collect();
        let meta = json!({"seed": seed});
        let back = decode_checkpoint(&encode_checkpoint(&tensors, &meta).unwrap()).unwrap();
        prop_assert_eq!(back.metadata, meta);
        prop_assert_eq!(back.tensors.len(), tensors.len());
        for (a, b) in tensors.iter().zip(&back.tensors) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }

    #[test]
    fn dataset_round_trip_any_contents(n in 0usize..5, w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let frames = random_frames(n, w, h, seed);
        let ds = FrameDataset::from_frames(&frames, FrameSource::Human, "x").unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        prop_assert_eq!(back.blob(), ds.blob());
    }
}

#[test]
fn save_checkpoint_creates_parent_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b/c.lsrl");
    save_checkpoint(&[], &json!({"k": 1}), &path).unwrap();
    assert!(load_checkpoint(&path).unwrap().tensors.is_empty());
}
