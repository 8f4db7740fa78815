mod common;

use common::*;
use mrp_core::checkpoint::{
    backbone_bytes, decode, encode, load_backbone, load_mrp, mrp_bytes, save_backbone, save_mrp, sha256_hex,
    trace_bytes, trace_from_bytes,
};
use mrp_core::diffusion::Policy;
use mrp_core::inference::spec_decode;
use mrp_core::mrp::{BoundHead, Objective};
use mrp_core::numerics::Tensor;
use mrp_core::Error;

fn f32_round(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f32 as f64).collect()
}

#[test]
fn backbone_round_trip_is_f32_exact() {
    let b = tiny_backbone(3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.mrpc");
    save_backbone(&p, &b).unwrap();
    let back = load_backbone(&p).unwrap();
    assert_eq!(back.config, b.config);
    for (x, y) in b.params.iter().zip(back.params.iter()) {
        assert_eq!(x.name, y.name);
        assert_eq!(f32_round(&x.value), y.value.data());
    }
    // A second save of the reloaded model reproduces the file.
    assert_eq!(backbone_bytes(&back).unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn mrp_round_trip_keeps_prefix_and_config() {
    let b = tiny_backbone(3);
    let g = noisy_head(&b, Objective::Direct, 5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.mrpc");
    save_mrp(&p, &g).unwrap();
    let back = load_mrp(&p).unwrap();
    assert_eq!(back.config, g.config);
    assert!(back.params.iter().all(|p| p.name.starts_with("mrp.")));
    assert_eq!(mrp_bytes(&back).unwrap(), std::fs::read(&p).unwrap());
    assert!(matches!(load_backbone(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn same_model_same_bytes() {
    let a = backbone_bytes(&tiny_backbone(9)).unwrap();
    let b = backbone_bytes(&tiny_backbone(9)).unwrap();
    assert_eq!(sha256_hex(&a), sha256_hex(&b));
    assert_ne!(a, backbone_bytes(&tiny_backbone(10)).unwrap());
}

#[test]
fn missing_file_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_backbone(&dir.path().join("nope.mrpc")),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn sha256_known_vector() {
    assert_eq!(
        sha256_hex(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn trace_round_trip() {
    let f = sharp_backbone(2);
    let g = noisy_head(&f, Objective::Residual, 8);
    let head = BoundHead { head: &g, backbone: &f };
    let x = &prompts(4, 1, 1)[0];
    let (_, _, trace) = spec_decode(&f, Some(&head), x, &Policy::Dynamic { tau: 0.9 }, 2, false).unwrap();
    let bytes = trace_bytes(&trace).unwrap();
    let back = trace_from_bytes(&bytes).unwrap();
    assert_eq!(back.steps.len(), trace.steps.len());
    for (a, b) in trace.steps.iter().zip(&back.steps) {
        assert_eq!((a.kind, a.block, &a.ids, &a.masked), (b.kind, b.block, &b.ids, &b.masked));
        assert_eq!((&a.revealed, &a.drafts, &a.accepted, &a.rejected), (&b.revealed, &b.drafts, &b.accepted, &b.rejected));
        assert_eq!(f32_round(&a.logits), b.logits.data());
        assert_eq!(f32_round(&a.h), b.h.data());
    }
}

#[test]
fn offsets_follow_header_order() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap();
    let bytes = encode(&[("a", &a), ("b", &b)], serde_json::Value::Null).unwrap();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert_eq!(header["tensors"][1]["offset"], 16);
    let (ts, _) = decode(&bytes).unwrap();
    assert_eq!(ts[1].1, b);
}
