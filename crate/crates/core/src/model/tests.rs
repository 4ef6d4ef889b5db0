use super::*;
use crate::memory::Topology;

fn tiny(topology: Topology, awm: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        t_text: 6,
        t_image: 4,
        text_vocab: 10,
        codebook_size: 5,
        t_m: 1,
        frames: 3,
        topology,
        awm,
        memory_in_i2t: true,
        dropout: 0.0,
        init_std: 0.5,
    }
}

fn logits(model: &Model<f64>, seq: &Sequence) -> Tensor<f64> {
    let mut g = Graph::with_params(&model.params);
    let out = model.forward(&mut g, seq, None).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn sequence_layouts() {
    let cfg = tiny(Topology::None, false);
    let s = Sequence::t2i(&cfg, &[5, 6, EOS], &[1, 2]).unwrap();
    assert_eq!(s.ids, vec![SOS, 5, 6, EOS, SOI, 11, 12]);
    assert_eq!(s.segment, vec![0, 0, 0, 0, 1, 1, 1]);
    assert_eq!(s.output_start, 4);
    assert!(s.mask.allowed(1, 3) && !s.mask.allowed(1, 4) && s.mask.allowed(5, 4) && !s.mask.allowed(5, 6));

    let s = Sequence::i2t(&cfg, &[0, 1, 2, 3], &[]).unwrap();
    assert_eq!(s.ids, vec![SOI, 10, 11, 12, 13, SOS]);
    assert_eq!(*s.ids.last().unwrap(), SOS);
    assert_eq!(s.modality.last(), Some(&Modality::Text));
    assert_eq!(Sequence::t2i(&cfg, &[EOS], &[]).unwrap().ids.last(), Some(&SOI));
}

#[test]
fn sequence_bounds() {
    let cfg = tiny(Topology::None, false);
    assert!(Sequence::t2i(&cfg, &[10], &[]).is_err());
    assert!(Sequence::t2i(&cfg, &[4; 7], &[]).is_err());
    assert!(Sequence::t2i(&cfg, &[EOS], &[5]).is_err());
    assert!(Sequence::t2i(&cfg, &[EOS], &[0; 4]).is_err());
    assert!(Sequence::i2t(&cfg, &[0; 5], &[]).is_err());
}

#[test]
fn direction_changes_segment_embedding() {
    let model = Model::<f64>::new(tiny(Topology::None, false), 1).unwrap();
    let cfg = &model.config;
    let a = Sequence::t2i(cfg, &[5, EOS], &[]).unwrap();
    let mut b = a.clone();
    b.segment = b.segment.iter().map(|s| 1 - s).collect();
    b.direction = Direction::I2t;
    let mut g = Graph::with_params(&model.params);
    let ea = model.embed(&mut g, &a).unwrap();
    let eb = model.embed(&mut g, &b).unwrap();
    assert!(g.value(ea).max_abs_diff(g.value(eb)) > 0.0);
}

#[test]
fn param_count_matches_closed_form() {
    for topology in [Topology::None, Topology::PartialLevel, Topology::AllLevel] {
        for awm in [false, true] {
            let cfg = tiny(topology, awm);
            let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(model.param_count(), cfg.param_count(), "{topology:?} awm={awm}");
        }
    }
}

#[test]
fn logits_are_causal() {
    let model = Model::<f64>::new(tiny(Topology::None, false), 2).unwrap();
    let cfg = &model.config;
    let a = logits(&model, &Sequence::t2i(cfg, &[4, 5, EOS], &[0, 1, 2]).unwrap());
    let b = logits(&model, &Sequence::t2i(cfg, &[4, 5, EOS], &[0, 3, 4]).unwrap());
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn forward_is_deterministic() {
    let model = Model::<f64>::new(tiny(Topology::None, false), 3).unwrap();
    let seq = Sequence::i2t(&model.config, &[0, 1, 2, 3], &[4, 5]).unwrap();
    assert_eq!(logits(&model, &seq), logits(&model, &seq));
}

#[test]
fn zero_heads_decode_lowest_index() {
    let mut model = Model::<f64>::new(tiny(Topology::PartialLevel, true), 4).unwrap();
    model.zero_heads();
    let gen = model.generate_image_tokens(&[4, EOS], None).unwrap();
    assert_eq!(gen.tokens.indices, vec![0; 4]);
    let text = model.generate_text_tokens(&[0, 1, 2, 3], None, 16).unwrap();
    // Lowest allowed text token is EOS, which stops decoding.
    assert_eq!(text.tokens.tokens(), &[EOS]);
    assert_eq!(text.tokens.indices.len(), model.config.t_text);
}

#[test]
fn text_generation_respects_cap() {
    let model = Model::<f64>::new(tiny(Topology::None, false), 5).unwrap();
    for cap in [0, 2, 100] {
        let gen = model.generate_text_tokens(&[0, 1, 2, 3], None, cap).unwrap();
        assert!(gen.tokens.len <= cap.min(model.config.t_text));
    }
}

#[test]
fn memory_chain_changes_later_frames() {
    let model = Model::<f64>::new(tiny(Topology::PartialLevel, true), 6).unwrap();
    let mut chain = model.new_chain::<Tensor<f64>>();
    let first = model.generate_image_tokens(&[4, EOS], Some(&chain)).unwrap();
    let mems = first.memories.unwrap();
    assert_eq!(mems.len(), 1);
    assert_eq!(mems[0].shape(), &[1, 8]);

    let seq = Sequence::t2i(&model.config, &[5, EOS], &[0, 1, 2]).unwrap();
    let run = |chain: &MemoryChain<Tensor<f64>>| {
        let mut g = Graph::with_params(&model.params);
        let c = chain.bind(&mut g).unwrap();
        let out = model.forward(&mut g, &seq, Some(&c)).unwrap();
        g.value(out.logits).clone()
    };
    let at_one = run(&chain);
    chain.push(mems);
    assert_eq!(chain.frame(), 2);
    assert!(run(&chain).max_abs_diff(&at_one) > 0.0);
}

#[test]
fn memory_layers_must_match() {
    let model = Model::<f64>::new(tiny(Topology::AllLevel, false), 7).unwrap();
    let seq = Sequence::t2i(&model.config, &[EOS], &[]).unwrap();
    let mut g = Graph::with_params(&model.params);
    let wrong = MemoryChain::<Var>::new(1);
    assert!(model.forward(&mut g, &seq, Some(&wrong)).is_err());
}

#[test]
fn argmax_ties_and_filter() {
    assert_eq!(argmax(&[1.0f64, 3.0, 3.0], |_| true), 1);
    assert_eq!(argmax(&[1.0f64, 3.0, 3.0], |i| i != 1), 2);
}

#[test]
fn paper_preset_size() {
    let cfg = ModelConfig::paper();
    let pma = cfg.param_count() as f64;
    assert!((pma / 95.8e6 - 1.0).abs() < 0.02, "{pma}");
    let all = ModelConfig { topology: Topology::AllLevel, ..cfg.clone() };
    assert!(all.param_count() > cfg.param_count());
}
