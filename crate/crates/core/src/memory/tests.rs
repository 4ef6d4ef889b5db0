use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{matmul, GruParams, Mask, Tensor};

fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

fn rand_qkv(d: usize, rng: &mut ChaCha8Rng) -> Qkv<Tensor<f64>> {
    Qkv { wq: rand_t(d, d, rng), wk: rand_t(d, d, rng), wv: rand_t(d, d, rng) }
}

fn identity_qkv(d: usize) -> Qkv<Tensor<f64>> {
    Qkv { wq: Tensor::identity(d), wk: Tensor::identity(d), wv: Tensor::identity(d) }
}

/// Naive single-head attention with an allow predicate.
fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, allow: impl Fn(usize, usize) -> bool) -> Tensor<f64> {
    let d = q.cols();
    let mut out = vec![0.0; q.rows() * v.cols()];
    for i in 0..q.rows() {
        let scores: Vec<f64> = (0..k.rows())
            .map(|j| (0..d).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = (0..k.rows()).filter(|&j| allow(i, j)).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = (0..k.rows()).map(|j| if allow(i, j) { (scores[j] - max).exp() } else { 0.0 }).collect();
        let z: f64 = w.iter().sum();
        for j in 0..k.rows() {
            for c in 0..v.cols() {
                out[i * v.cols() + c] += w[j] / z * v.get2(j, c);
            }
        }
    }
    Tensor::new(vec![q.rows(), v.cols()], out).unwrap()
}

fn state(m: Tensor<f64>, t: usize) -> MemoryState<f64> {
    MemoryState { m, t }
}

#[test]
fn mask_selects_text_positions() {
    use Modality::*;
    assert_eq!(build_memory_mask(&[Text, Text, Text, Image, Image]).visible, vec![true, true, true, false, false]);
    assert!(build_memory_mask(&[Text; 4]).visible.iter().all(|&v| v));
    let m = build_memory_mask(&[Image; 3]);
    assert_eq!(m.count(), 0);
}

#[test]
fn all_image_summary_falls_back_to_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = rand_t(3, 2, &mut rng);
    let mask = build_memory_mask(&[Modality::Image; 3]);
    let s = summarize(&state(rand_t(1, 2, &mut rng), 0), &h, &mask, &identity_qkv(2), 1).unwrap();
    let mean: Vec<f64> = (0..2).map(|c| (0..3).map(|r| h.get2(r, c)).sum::<f64>() / 3.0).collect();
    assert!((s.get2(0, 0) - mean[0]).abs() < 1e-12 && (s.get2(0, 1) - mean[1]).abs() < 1e-12);
}

#[test]
fn summary_ignores_image_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 4;
    let mask = build_memory_mask(&[Modality::Text, Modality::Text, Modality::Image, Modality::Image]);
    let proj = rand_qkv(d, &mut rng);
    let m = state(rand_t(1, d, &mut rng), 0);
    let h = rand_t(4, d, &mut rng);
    let mut h2 = h.clone();
    for v in &mut h2.data_mut()[2 * d..] {
        *v += 123.0;
    }
    let a = summarize(&m, &h, &mask, &proj, 2).unwrap();
    let b = summarize(&m, &h2, &mask, &proj, 2).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn single_text_token_summary_is_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let proj = rand_qkv(d, &mut rng);
    let h = rand_t(3, d, &mut rng);
    let mask = build_memory_mask(&[Modality::Image, Modality::Text, Modality::Image]);
    let s = summarize(&state(rand_t(1, d, &mut rng), 0), &h, &mask, &proj, 2).unwrap();
    let hv = matmul(&h, &proj.wv).unwrap();
    assert!(s.data().iter().zip(hv.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn summary_matches_masked_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 3;
    let proj = rand_qkv(d, &mut rng);
    let m = rand_t(2, d, &mut rng);
    let h = rand_t(5, d, &mut rng);
    let tags = [Modality::Text, Modality::Image, Modality::Text, Modality::Text, Modality::Image];
    let mask = build_memory_mask(&tags);
    let s = summarize(&state(m.clone(), 0), &h, &mask, &proj, 1).unwrap();
    let q = matmul(&m, &proj.wq).unwrap();
    let k = matmul(&h, &proj.wk).unwrap();
    let v = matmul(&h, &proj.wv).unwrap();
    let expect = naive_attention(&q, &k, &v, |_, j| mask.visible[j]);
    assert!(s.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn update_follows_gru_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = state(rand_t(1, 3, &mut rng), 2);
    let s = rand_t(1, 3, &mut rng);
    let next = update(&s, &m, &GruParams::zeros(3)).unwrap();
    assert_eq!(next.t, 3);
    assert!(next.m.data().iter().zip(m.m.data()).all(|(a, b)| (a - 0.5 * b).abs() < 1e-15));

    let mut carry = GruParams::zeros(3);
    carry.b_z = Tensor::full(&[3], -1e6);
    let frozen = update(&s, &m, &carry).unwrap();
    assert_eq!(frozen.m.data(), m.m.data());

    let p = GruParams::<Tensor<f64>>::zeros(3).map(|t| Tensor::randn(t.shape(), 1.0, &mut rng));
    let via_update = update(&s, &m, &p).unwrap();
    assert_eq!(via_update.m, crate::numerics::gru_cell(&s, &m.m, &p).unwrap());
}

#[test]
fn second_frame_bundle_is_first_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bank = MemoryBank::new();
    let m1 = rand_t(1, 4, &mut rng);
    bank.push(state(m1.clone(), 1)).unwrap();
    let proj = rand_qkv(4, &mut rng);
    assert_eq!(attentive_weight(&bank, 2, Some(&proj), 2).unwrap(), m1);
    assert_eq!(attentive_weight(&bank, 2, None, 2).unwrap(), m1);
}

#[test]
fn first_frame_has_no_bundle() {
    let bank = MemoryBank::<f64>::new();
    assert!(matches!(attentive_weight(&bank, 1, None, 1), Err(MemoryError::NoMemory(1))));
    let mut bank = MemoryBank::new();
    bank.push(state(Tensor::zeros(&[1, 2]), 1)).unwrap();
    assert!(matches!(attentive_weight(&bank, 3, None, 1), Err(MemoryError::BankLength { .. })));
    assert!(bank.push(state(Tensor::zeros(&[1, 2]), 1)).is_err());
}

#[test]
fn identical_history_stacks_twice() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = rand_t(1, 4, &mut rng);
    let mut bank = MemoryBank::new();
    for t in 1..=3 {
        bank.push(state(m.clone(), t)).unwrap();
    }
    let out = attentive_weight(&bank, 4, Some(&identity_qkv(4)), 2).unwrap();
    assert_eq!(out.shape(), &[2, 4]);
    assert!(out.row(1).iter().zip(m.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(out.row(0), m.data());
}

#[test]
fn fourth_frame_bundle_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 4;
    let proj = rand_qkv(d, &mut rng);
    let ms: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(1, d, &mut rng)).collect();
    let mut bank = MemoryBank::new();
    for (i, m) in ms.iter().enumerate() {
        bank.push(state(m.clone(), i + 1)).unwrap();
    }
    let out = attentive_weight(&bank, 4, Some(&proj), 1).unwrap();
    let past = Tensor::from_rows(&[ms[0].data().to_vec(), ms[1].data().to_vec()]).unwrap();
    let q = matmul(&ms[2], &proj.wq).unwrap();
    let k = matmul(&past, &proj.wk).unwrap();
    let v = matmul(&past, &proj.wv).unwrap();
    let bar = naive_attention(&q, &k, &v, |_, _| true);
    assert_eq!(out.row(0), ms[2].data());
    assert!(out.row(1).iter().zip(bar.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(attentive_weight(&bank, 4, None, 1).unwrap(), ms[2]);
}

#[test]
fn null_memory_rescales_self_attention() {
    // Zero memory rows have zero keys and values: each contributes score 0
    // and value 0, so the fused output is the plain self-attention output
    // scaled by the mass left on the hidden positions.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 3;
    let mut proj = rand_qkv(d, &mut rng);
    let h = rand_t(4, d, &mut rng);
    let m = Tensor::zeros(&[2, d]);
    let causal = Mask::from_fn(4, 4, |r, c| c <= r);
    let fused = fuse(&h, &m, &proj, Some(&causal), 1).unwrap();
    let (q, k, v) = (matmul(&h, &proj.wq).unwrap(), matmul(&h, &proj.wk).unwrap(), matmul(&h, &proj.wv).unwrap());
    let plain = naive_attention(&q, &k, &v, |r, c| c <= r);
    for r in 0..4 {
        let scores: Vec<f64> = (0..=r).map(|j| (0..d).map(|c| q.get2(r, c) * k.get2(j, c)).sum::<f64>() / (d as f64).sqrt()).collect();
        let hidden_mass: f64 = scores.iter().map(|s| s.exp()).sum();
        let keep = hidden_mass / (hidden_mass + 2.0);
        for c in 0..d {
            assert!((fused.get2(r, c) - keep * plain.get2(r, c)).abs() < 1e-12);
        }
    }
    // With a zero query projection every score is equal, which makes the
    // rescaling explicit: row r keeps (r+1)/(r+3) of the uniform average.
    proj.wq = Tensor::zeros(&[d, d]);
    let fused = fuse(&h, &m, &proj, Some(&causal), 1).unwrap();
    for r in 0..4 {
        let avg: f64 = (0..=r).map(|j| v.get2(j, 0)).sum::<f64>() / (r + 3) as f64;
        assert!((fused.get2(r, 0) - avg).abs() < 1e-12);
    }
}

#[test]
fn fuse_keeps_causality_and_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 4;
    let proj = rand_qkv(d, &mut rng);
    let h = rand_t(5, d, &mut rng);
    let m = rand_t(2, d, &mut rng);
    let causal = Mask::from_fn(5, 5, |r, c| c <= r);
    let fused = fuse(&h, &m, &proj, Some(&causal), 1).unwrap();

    let joint = Tensor::from_rows(&(0..5).map(|r| h.row(r).to_vec()).chain((0..2).map(|r| m.row(r).to_vec())).collect::<Vec<_>>()).unwrap();
    let q = matmul(&h, &proj.wq).unwrap();
    let k = matmul(&joint, &proj.wk).unwrap();
    let v = matmul(&joint, &proj.wv).unwrap();
    let expect = naive_attention(&q, &k, &v, |r, c| c >= 5 || c <= r);
    assert!(fused.max_abs_diff(&expect) < 1e-12);

    let mut h2 = h.clone();
    for v in &mut h2.data_mut()[3 * d..] {
        *v -= 7.0;
    }
    let fused2 = fuse(&h2, &m, &proj, Some(&causal), 1).unwrap();
    assert_eq!(&fused.data()[..3 * d], &fused2.data()[..3 * d]);
}

#[test]
fn topology_layer_sets() {
    assert_eq!(apply_topology(Topology::PartialLevel, 6), vec![5]);
    assert_eq!(apply_topology(Topology::AllLevel, 6), (0..6).collect::<Vec<_>>());
    assert!(apply_topology(Topology::None, 6).is_empty());
}

#[test]
fn memory_path_size() {
    let d = 8;
    assert_eq!(memory_param_count(d, 1, false), d + 13 * d * d + 5 * d);
    assert_eq!(memory_param_count(d, 2, true) - memory_param_count(d, 2, false), 3 * d * d);
}
