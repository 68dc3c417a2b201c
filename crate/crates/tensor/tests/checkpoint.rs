use proptest::prelude::*;
use spach_tensor::checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
};
use spach_tensor::{AnyTensor, Tensor};

proptest! {
    #[test]
    fn write_then_read_is_identity(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 1..5),
        seed in any::<u32>(),
        as_f64 in any::<bool>(),
    ) {
        let entries: Vec<(String, AnyTensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("stage{i}.block0.weight");
                let f = |j: usize| ((seed as usize + j * 7919) % 1000) as f64 / 37.0 - 13.0;
                let t: AnyTensor = if as_f64 {
                    Tensor::<f64>::from_fn(s.clone(), f).unwrap().into()
                } else {
                    Tensor::<f32>::from_fn(s.clone(), |j| f(j) as f32).unwrap().into()
                };
                (name, t)
            })
            .collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        prop_assert_eq!(read_checkpoint(&buf[..]).unwrap(), entries);
    }
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.spt");
    let entries = vec![
        (
            "a".to_string(),
            AnyTensor::from(Tensor::from_vec([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()),
        ),
        ("ü".to_string(), AnyTensor::from(Tensor::scalar(0.5f64))),
    ];
    save_checkpoint(&path, &entries).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), entries);
}
