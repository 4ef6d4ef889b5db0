use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::Topology;
use crate::model::ModelConfig;
use crate::tokenizer::EOS;

fn cfg(topology: Topology) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        t_text: 5,
        t_image: 4,
        text_vocab: 9,
        codebook_size: 6,
        t_m: 1,
        frames: 3,
        topology,
        awm: true,
        memory_in_i2t: true,
        dropout: 0.0,
        init_std: 0.3,
    }
}

fn stories(n: usize, seed: u64) -> Vec<TrainStory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TrainStory {
            texts: (0..3)
                .map(|_| {
                    let len = rng.random_range(1..4);
                    let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(4..9)).collect();
                    t.push(EOS);
                    t
                })
                .collect(),
            images: (0..3).map(|_| (0..4).map(|_| rng.random_range(0..6)).collect()).collect(),
        })
        .collect()
}

fn train_cfg() -> TrainConfig {
    TrainConfig { batch_size: 2, lr: 1e-2, ..TrainConfig::desk() }
}

#[test]
fn uniform_head_gives_log_vocab_per_token() {
    let mut model = Model::<f64>::new(cfg(Topology::PartialLevel), 0).unwrap();
    model.zero_heads();
    let story = &stories(1, 1)[0];
    let mut g = Graph::with_params(&model.params);
    let u = loss_t2i(&mut g, &model, story).unwrap();
    for &f in &u.per_frame {
        assert!((g.value(f).item() - 4.0 * 6f64.ln()).abs() < 1e-12);
    }
    let u = loss_i2t(&mut g, &model, story).unwrap();
    for (f, text) in u.per_frame.iter().zip(&story.texts) {
        assert!((g.value(*f).item() - text.len() as f64 * 9f64.ln()).abs() < 1e-12);
    }
    let u = loss_pt2i(&mut g, &model, story, &vec![story.texts[0].clone(); 3]).unwrap();
    assert!((g.value(u.total).item() - 12.0 * 6f64.ln()).abs() < 1e-12);
}

#[test]
fn pseudo_equal_to_caption_matches_t2i() {
    let model = Model::<f64>::new(cfg(Topology::PartialLevel), 2).unwrap();
    let story = &stories(1, 3)[0];
    let mut g = Graph::with_params(&model.params);
    let a = loss_t2i(&mut g, &model, story).unwrap();
    let b = loss_pt2i(&mut g, &model, story, &story.texts).unwrap();
    assert_eq!(g.value(a.total).item(), g.value(b.total).item());
    assert!(matches!(
        loss_pt2i(&mut g, &model, story, &story.texts[..2]),
        Err(TrainError::MissingPseudoText { have: 2, frames: 3 })
    ));
}

#[test]
fn breakdown_is_additive() {
    let model = Model::<f64>::new(cfg(Topology::PartialLevel), 4).unwrap();
    let data = stories(3, 5);
    let mut t = Trainer::new(model, TrainConfig { lambda1: 0.7, lambda2: 0.3, ..train_cfg() }).unwrap();
    t.pseudo = Some(data.iter().map(|s| s.texts.iter().rev().cloned().collect()).collect());
    let (_, l) = t.gradients(&data, &[0, 1, 2]).unwrap();
    assert!((l.total - (l.t2i + 0.7 * l.i2t + 0.3 * l.pt2i)).abs() < 1e-9);
    assert_eq!(l.per_frame.len(), 9);
    let sum: f64 = l.per_frame.iter().map(|f| f.t2i).sum();
    assert!((sum / 9.0 - l.t2i).abs() < 1e-12);
}

#[test]
fn zero_weights_reduce_to_text_to_image() {
    let data = stories(4, 6);
    let model = Model::<f64>::new(cfg(Topology::PartialLevel), 7).unwrap();
    let mut a = Trainer::new(model.clone(), TrainConfig { lambda1: 0.0, lambda2: 0.0, ..train_cfg() }).unwrap();
    let mut b = Trainer::new(model, TrainConfig { bidirectional: false, ..train_cfg() }).unwrap();
    for _ in 0..4 {
        a.step(&data).unwrap();
        b.step(&data).unwrap();
    }
    for id in a.model.params.ids() {
        assert_eq!(a.model.params.get(id), b.model.params.get(id), "{}", a.model.params.name(id));
    }
}

#[test]
fn fixed_seed_runs_are_identical() {
    let data = stories(5, 8);
    let model_cfg = ModelConfig { dropout: 0.1, ..cfg(Topology::PartialLevel) };
    let run = || {
        let model = Model::<f32>::new(model_cfg.clone(), 9).unwrap();
        let mut t = Trainer::new(model, TrainConfig { augmentation: Augmentation::Online, warmup_epochs: 1, ..train_cfg() }).unwrap();
        for _ in 0..7 {
            t.step(&data).unwrap();
        }
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>(), b.model.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>());
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.pseudo, b.pseudo);
}

#[test]
fn parallel_workers_are_deterministic() {
    let data = stories(6, 10);
    let model = Model::<f64>::new(cfg(Topology::AllLevel), 11).unwrap();
    let run = |workers| {
        let t = Trainer::new(model.clone(), TrainConfig { workers, batch_size: 6, ..train_cfg() }).unwrap();
        t.gradients(&data, &[0, 1, 2, 3, 4, 5]).unwrap()
    };
    let (g1, l1) = run(1);
    let (g3, l3) = run(3);
    assert_eq!(run(3).0, g3);
    assert!((l1.total - l3.total).abs() < 1e-12);
    for (a, b) in g1.iter().zip(&g3) {
        if let (Some(a), Some(b)) = (a, b) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }
}

#[test]
fn online_pseudo_texts_start_after_warmup() {
    let data = stories(2, 12);
    let model = Model::<f64>::new(cfg(Topology::PartialLevel), 13).unwrap();
    let mut t = Trainer::new(model, TrainConfig { augmentation: Augmentation::Online, warmup_epochs: 2, ..train_cfg() }).unwrap();
    let e0 = t.train_epoch(&data, |_| {}).unwrap();
    assert_eq!(e0.pseudo_texts, 0);
    assert!(t.pseudo.is_none());
    t.train_epoch(&data, |_| {}).unwrap();
    let e2 = t.train_epoch(&data, |_| {}).unwrap();
    assert_eq!(e2.pseudo_texts, 6);
    assert!(t.pseudo.is_some());
}

#[test]
fn offline_texts_are_frozen_and_counted_once() {
    let data = stories(2, 14);
    let captioner = Model::<f64>::new(cfg(Topology::PartialLevel), 15).unwrap();
    let model = Model::<f64>::new(cfg(Topology::PartialLevel), 16).unwrap();
    let texts = offline_augment(&data, &captioner, &model).unwrap();
    let mut t = Trainer::new(model, TrainConfig { augmentation: Augmentation::Offline, ..train_cfg() }).unwrap();
    t.set_offline_texts(texts.clone());
    for _ in 0..3 {
        t.train_epoch(&data, |_| {}).unwrap();
        assert_eq!(t.pseudo.as_ref(), Some(&texts));
    }
    assert_eq!(t.pseudo_generated, 6);

    let other = Model::<f64>::new(ModelConfig { codebook_size: 7, ..cfg(Topology::None) }, 0).unwrap();
    assert!(matches!(offline_augment(&data, &other, &t.model), Err(TrainError::Incompatible(_))));
}

#[test]
fn frame_order_matters_only_with_memory() {
    let story = stories(1, 17).remove(0);
    let mut permuted = story.clone();
    permuted.texts.swap(0, 2);
    permuted.images.swap(0, 2);
    for (topology, sensitive) in [(Topology::PartialLevel, true), (Topology::None, false)] {
        let model = Model::<f64>::new(cfg(topology), 18).unwrap();
        let mut g = Graph::with_params(&model.params);
        let a = loss_t2i(&mut g, &model, &story).unwrap();
        let b = loss_t2i(&mut g, &model, &permuted).unwrap();
        let (va, vb) = (g.value(a.total).item(), g.value(b.total).item());
        assert_eq!((va - vb).abs() > 1e-9, sensitive, "{topology:?}");
        if !sensitive {
            assert_eq!(g.value(a.per_frame[0]).item(), g.value(b.per_frame[2]).item());
        }
    }
}

#[test]
fn alternate_mode_takes_two_optimizer_steps() {
    let data = stories(2, 19);
    let model = Model::<f64>::new(cfg(Topology::PartialLevel), 20).unwrap();
    let mut t = Trainer::new(model, TrainConfig { alternation: Alternation::Alternate, batch_size: 2, ..train_cfg() }).unwrap();
    t.step(&data).unwrap();
    assert_eq!(t.adam.step, 2);
    let mut t = Trainer::new(t.model.clone(), TrainConfig { alternation: Alternation::Alternate, lambda1: 0.0, batch_size: 2, ..train_cfg() }).unwrap();
    t.step(&data).unwrap();
    assert_eq!(t.adam.step, 1);
}
