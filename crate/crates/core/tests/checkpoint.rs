//! Checkpoint container behavior: bit-exact round trips, a readable header,
//! and located rejection of every corruption class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::tempdir;

use procdiff::checkpoint::{
    load_classifier, load_denoiser, save_classifier, save_denoiser, CHECKPOINT_MAGIC,
};
use procdiff::denoiser::{Denoiser, DenoiserConfig};
use procdiff::plan::{PlanMatrix, ProblemDims};
use procdiff::planner::TaskClassifier;
use procdiff::tensor::Tensor;

fn demo_denoiser() -> Denoiser {
    let config = DenoiserConfig {
        input_width: 9,
        horizon: 3,
        channels: vec![8, 12],
        time_embed_dim: 8,
        attention_enabled: true,
    };
    let mut net = Denoiser::new(config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, tensor) in net.params_mut() {
        for v in tensor.data_mut() {
            *v = 0.25 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    net
}

#[test]
fn denoiser_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = demo_denoiser();
    save_denoiser(&net, &path, None).unwrap();
    let loaded = load_denoiser(&path).unwrap();
    assert_eq!(loaded.config(), net.config());
    for ((name_a, pa), (name_b, pb)) in net.params().iter().zip(loaded.params().iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(pa.shape(), pb.shape());
        assert_eq!(pa.data(), pb.data(), "parameter {} changed", name_a);
    }
    // behavior carries over exactly, not just the stored numbers
    let dims = ProblemDims { horizon: 3, n_tasks: 2, n_actions: 4, obs_dim: 3 };
    let data: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = PlanMatrix::from_tensor(&dims, Tensor::new(&[3, 9], data).unwrap()).unwrap();
    let a = net.predict_x0(&x, 50).unwrap();
    let b = loaded.predict_x0(&x, 50).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn classifier_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cls.ckpt");
    let mut net = TaskClassifier::new(6, 4, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (_, tensor) in net.params_mut() {
        for v in tensor.data_mut() {
            *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    save_classifier(&net, &path, None).unwrap();
    let loaded = load_classifier(&path).unwrap();
    assert_eq!(loaded.obs_dim(), 6);
    assert_eq!(loaded.n_tasks(), 4);
    for ((_, pa), (_, pb)) in net.params().iter().zip(loaded.params().iter()) {
        assert_eq!(pa.data(), pb.data());
    }
    let o_s: Vec<f64> = (0..6).map(|i| 0.3 * i as f64).collect();
    let o_g: Vec<f64> = (0..6).map(|i| -0.1 * i as f64).collect();
    assert_eq!(net.predict(&o_s, &o_g).unwrap(), loaded.predict(&o_s, &o_g).unwrap());
}

#[test]
fn saved_files_are_byte_stable() {
    let dir = tempdir().unwrap();
    let net = demo_denoiser();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_denoiser(&net, &a, None).unwrap();
    save_denoiser(&net, &b, None).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn header_is_inspectable_without_the_loader() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = demo_denoiser();
    save_denoiser(&net, &path, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["kind"], "denoiser");
    assert_eq!(header["config"]["input_width"], 9);
    assert_eq!(header["config"]["attention_enabled"], true);
    let listed: Vec<&str> =
        header["params"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    let expected: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(listed, expected.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    // payload length is fully determined by the declared shapes
    let payload: usize = header["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            p["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).product::<usize>()
        })
        .sum::<usize>()
        * 8;
    assert_eq!(bytes.len(), 16 + header_len + payload);
}

#[test]
fn corrupted_files_are_rejected_with_located_diagnostics() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_denoiser(&demo_denoiser(), &path, None).unwrap();
    let clean = std::fs::read(&path).unwrap();

    // magic
    let mut bytes = clean.clone();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("magic"), "{}", err);

    // truncated payload
    let mut bytes = clean.clone();
    bytes.truncate(bytes.len() - 9);
    std::fs::write(&path, &bytes).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("file ends at"), "{}", err);

    // header JSON damage
    let mut bytes = clean.clone();
    bytes[16] = b'!';
    std::fs::write(&path, &bytes).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("header bytes 16.."), "{}", err);

    // header length pointing past the end
    let mut bytes = clean.clone();
    bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("header claims"), "{}", err);

    // trailing garbage
    let mut bytes = clean.clone();
    bytes.extend_from_slice(&[0u8; 5]);
    std::fs::write(&path, &bytes).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("5 trailing bytes"), "{}", err);

    // tiny file
    std::fs::write(&path, b"PD").unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("not a checkpoint"), "{}", err);

    // missing file
    let missing = dir.path().join("nope.ckpt");
    assert!(load_denoiser(&missing).is_err());
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cls.ckpt");
    let net = TaskClassifier::new(5, 2, 0).unwrap();
    save_classifier(&net, &path, None).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("task_classifier") && err.contains("denoiser"), "{}", err);
}

#[test]
fn tampered_header_shapes_are_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_denoiser(&demo_denoiser(), &path, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();

    // swap the first two parameter names so order no longer matches
    let params = header["params"].as_array_mut().unwrap();
    let first = params[0]["name"].clone();
    params[0]["name"] = params[1]["name"].clone();
    params[1]["name"] = first;
    let new_header = serde_json::to_vec(&header).unwrap();
    let mut tampered = Vec::new();
    tampered.extend_from_slice(&bytes[..8]);
    tampered.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
    tampered.extend_from_slice(&new_header);
    tampered.extend_from_slice(&bytes[16 + header_len..]);
    std::fs::write(&path, &tampered).unwrap();
    let err = load_denoiser(&path).unwrap_err().to_string();
    assert!(err.contains("where the model expects"), "{}", err);
}
