use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

use super::*;
use crate::autodiff::check::check_params;
use crate::autodiff::{AttnLayout, CopyLayout, Graph};
use crate::corpus::{ParallelCorpus, SentencePair, EOS};
use crate::retrieval::RetrievalIndex;
use crate::rng::Rng;

fn tiny(arch: Arch) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        src_layers: 1,
        mem_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        max_len: 40,
        ..ModelConfig::new(arch, 12)
    }
}

fn randomized(model: &mut Model<f64>, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        let is_gamma = model.params.name(id).ends_with("gamma");
        for v in model.params.get_mut(id).data_mut() {
            let r: f64 = rng.gen_range(-0.5..0.5);
            *v = if is_gamma { 1.0 + r } else { r };
        }
    }
}

fn example(source: &[u32], memories: &[(&[u32], &[u32])], target: &[u32]) -> Example {
    Example {
        source: source.to_vec(),
        memories: memories
            .iter()
            .map(|(s, t)| Memory {
                source: s.to_vec(),
                target: t.to_vec(),
            })
            .collect(),
        target: target.to_vec(),
    }
}

fn assert_distributions(rows: &[Vec<f64>]) {
    for r in rows {
        assert!(r.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn untrained_model_is_uniform() {
    let model = Model::<f64>::init(tiny(Arch::Vanilla), 1).unwrap();
    let ex = example(&[4, 5, 6], &[], &[7, 8]);
    let batch = Batch::new(&model.config, &[&ex]).unwrap();
    for row in model.distributions(&batch).unwrap() {
        for p in row {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
    }
}

#[test]
fn decoder_is_causal() {
    for arch in [Arch::Vanilla, Arch::SingleEnc, Arch::DualEnc] {
        let mut model = Model::<f64>::init(tiny(arch), 2).unwrap();
        randomized(&mut model, 3);
        let a = example(&[4, 5, 6], &[(&[4, 5], &[9, 10])], &[7, 8, 9, 10]);
        let mut b = a.clone();
        b.target[2] = 11;
        let da = model.distributions(&Batch::new(&model.config, &[&a]).unwrap()).unwrap();
        let db = model.distributions(&Batch::new(&model.config, &[&b]).unwrap()).unwrap();
        // Row t predicts target[t] from target[..t].
        for t in 0..=2 {
            assert_eq!(da[t], db[t], "{arch:?} row {t}");
        }
        assert_ne!(da[3], db[3]);
    }
}

#[test]
fn every_architecture_yields_distributions() {
    let cases = [
        example(&[4, 5, 6], &[], &[7, 8]),
        example(&[4], &[(&[4], &[7])], &[7]),
        example(&[4, 5, 6], &[(&[4, 5], &[9, 10]), (&[6], &[8, 11, 7])], &[7, 8, 9]),
        example(&[4, 5], &[(&[4, 5], &[])], &[7]),
    ];
    for arch in [Arch::Vanilla, Arch::SingleEnc, Arch::DualEnc] {
        let mut model = Model::<f64>::init(tiny(arch), 4).unwrap();
        randomized(&mut model, 5);
        for ex in &cases {
            let batch = Batch::new(&model.config, &[ex]).unwrap();
            assert_distributions(&model.distributions(&batch).unwrap());
        }
        let refs: Vec<&Example> = cases.iter().collect();
        let batch = Batch::new(&model.config, &refs).unwrap();
        assert_distributions(&model.distributions(&batch).unwrap());
    }
}

#[test]
fn single_encoder_input_layout() {
    let config = tiny(Arch::SingleEnc);
    let sep = config.sep().unwrap();
    assert_eq!(sep, 12);
    assert_eq!(config.vocab_size, 13);
    let empty = example(&[4, 5], &[], &[7]);
    let b = Batch::new(&config, &[&empty]).unwrap();
    assert_eq!(b.src_ids, vec![4, 5, sep]);

    let mut model = Model::<f64>::init(config.clone(), 6).unwrap();
    randomized(&mut model, 7);
    let vanilla_input = Batch {
        src_ids: vec![4, 5, sep],
        ..b.clone()
    };
    assert_eq!(
        model.distributions(&b).unwrap(),
        model.distributions(&vanilla_input).unwrap()
    );

    let ab = example(&[4], &[(&[5], &[6]), (&[7], &[8])], &[9]);
    let ba = example(&[4], &[(&[7], &[8]), (&[5], &[6])], &[9]);
    let (x, y) = (Batch::new(&config, &[&ab]).unwrap(), Batch::new(&config, &[&ba]).unwrap());
    assert_eq!(x.src_ids, vec![4, sep, 5, sep, 6, sep, 7, sep, 8, sep]);
    assert_ne!(x.src_ids, y.src_ids);
    assert_eq!(model.distributions(&x).unwrap(), model.distributions(&x).unwrap());

    let long = example(&[4; 30], &[(&[5; 10], &[6; 10])], &[9]);
    match Batch::new(&config, &[&long]) {
        Err(Error::TooLong { len, max, .. }) => assert_eq!((len, max), (53, 40)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tm_attention_examples() {
    let mut g = Graph::<f64>::new();
    // Scores are q . k with unit scale.
    let q = g.constant(Tensor::new(vec![1, 1], vec![libm::log(3.0)]).unwrap());
    let k = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
    let l = AttnLayout::new(1, 1, 2, 1, vec![true, true]);
    let a = g.attention_probs(q, k, &l).unwrap();
    let v = g.value(a).data();
    assert!((v[0] - 0.75).abs() < 1e-12 && (v[1] - 0.25).abs() < 1e-12);

    let k1 = g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
    let l1 = AttnLayout::new(1, 1, 1, 1, vec![true]);
    let a1 = g.attention_probs(q, k1, &l1).unwrap();
    assert_eq!(g.value(a1).data(), &[1.0]);

    let same = g.constant(Tensor::new(vec![3, 1], vec![0.7; 3]).unwrap());
    let l3 = AttnLayout::new(1, 1, 3, 1, vec![true; 3]);
    let a3 = g.attention_probs(q, same, &l3).unwrap();
    for p in g.value(a3).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn copy_distribution_examples() {
    let (the, cat) = (5u32, 6u32);
    let mut g = Graph::<f64>::new();
    let alpha = g.constant(Tensor::new(vec![1, 3], vec![0.5, 0.3, 0.2]).unwrap());
    let layout = CopyLayout {
        batch: 1,
        rows_per_batch: 1,
        mem_len: 3,
        tokens: vec![Some(the), Some(cat), Some(the)],
        vocab: 8,
    };
    let p = g.copy_scatter(alpha, &layout).unwrap();
    let v = g.value(p).data();
    assert!((v[the as usize] - 0.7).abs() < 1e-15);
    assert!((v[cat as usize] - 0.3).abs() < 1e-15);
    assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 2);

    // Random alpha against a brute-force per-vocabulary sum.
    let mut rng = Rng::seed_from_u64(9);
    let raw: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let alpha_v: Vec<f64> = raw.iter().map(|x| x / z).collect();
    let toks: Vec<u32> = (0..7).map(|_| rng.gen_range(0..5)).collect();
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![1, 7], alpha_v.clone()).unwrap());
    let layout = CopyLayout {
        batch: 1,
        rows_per_batch: 1,
        mem_len: 7,
        tokens: toks.iter().map(|t| Some(*t)).collect(),
        vocab: 5,
    };
    let p = g.copy_scatter(a, &layout).unwrap();
    for y in 0..5u32 {
        let brute: f64 = alpha_v.iter().zip(&toks).filter(|(_, t)| **t == y).map(|(a, _)| *a).sum();
        assert!((g.value(p).data()[y as usize] - brute).abs() < 1e-12);
    }
}

#[test]
fn gate_mixture_examples() {
    let mut g = Graph::<f64>::new();
    let p_nmt = g.constant(Tensor::new(vec![1, 2], vec![0.6, 0.4]).unwrap());
    let p_tm = g.constant(Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap());
    for (lam, expect) in [(0.0, [0.6, 0.4]), (1.0, [0.2, 0.8])] {
        let l = g.constant(Tensor::new(vec![1, 1], vec![lam]).unwrap());
        let m = gate_and_mix(&mut g, l, p_nmt, p_tm).unwrap();
        assert_eq!(g.value(m).data(), &expect);
    }
    let l = g.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let m = gate_and_mix(&mut g, l, p_nmt, p_tm).unwrap();
    let v = g.value(m).data();
    assert!((v[0] - 0.4).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15);
}

#[test]
fn empty_memory_forces_the_gate_shut() {
    let mut model = Model::<f64>::init(tiny(Arch::DualEnc), 10).unwrap();
    randomized(&mut model, 11);
    let with = example(&[4, 5], &[(&[4, 6], &[7, 8])], &[7, 8]);
    let without = example(&[4, 5], &[], &[7, 8]);
    let batch = Batch::new(&model.config, &[&with, &without]).unwrap();
    let mut g = Graph::new();
    let enc = model.encode_source(&mut g, &batch).unwrap();
    let h = model.decode(&mut g, &batch, enc).unwrap();
    let (mb, layout) = batch.mem.as_ref().unwrap();
    let mem = model.encode_memories(&mut g, mb).unwrap();
    let out = model.tm_head(&mut g, h, batch.tgt_len, mem, layout).unwrap();
    let lam = g.value(out.lambda).data();
    assert!(lam[..3].iter().all(|l| *l > 0.0 && *l < 1.0));
    assert!(lam[3..].iter().all(|l| *l == 0.0));
    let probs = g.value(out.probs).data();
    let nmt = g.value(out.p_nmt).data();
    assert_eq!(&probs[3 * 12..], &nmt[3 * 12..]);
    for row in g.value(out.alpha).data().chunks(4) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12 || s == 0.0);
    }
    // The memory-free example on its own goes through the plain softmax path.
    let alone = Batch::new(&model.config, &[&without]).unwrap();
    assert_eq!(model.distributions(&alone).unwrap()[0], probs[3 * 12..4 * 12].to_vec());
}

#[test]
fn dual_encoder_step_matches_finite_differences() {
    let mut model = Model::<f64>::init(tiny(Arch::DualEnc), 12).unwrap();
    randomized(&mut model, 13);
    let a = example(&[4, 5, 6], &[(&[4, 5], &[9, 10]), (&[6], &[8])], &[9, 10, 8]);
    let b = example(&[7, 4], &[], &[11]);
    let batch = Batch::new(&model.config, &[&a, &b]).unwrap();
    let report = check_params(&model.params, 6, |g, store| {
        let m = Model {
            params: store.clone(),
            ..model.clone()
        };
        m.loss(g, &batch, 0.1)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn copy_head_receives_gradient() {
    let mut model = Model::<f64>::init(tiny(Arch::DualEnc), 14).unwrap();
    randomized(&mut model, 15);
    let ex = example(&[4, 5], &[(&[4, 5], &[9, 10])], &[9, 10]);
    let batch = Batch::new(&model.config, &[&ex]).unwrap();
    let mut g = Graph::new();
    let loss = model.loss(&mut g, &batch, 0.0).unwrap();
    g.backward(loss).unwrap();
    model.params.accumulate_grads(&g);
    let tm = model.w.tm.clone().unwrap();
    for id in [tm.w_tm, tm.gate_w, tm.gate_b, tm.w_h] {
        assert!(model.params.grad(id).iter().any(|v| v.abs() > 1e-8), "{}", model.params.name(id));
    }
}

#[test]
fn overlong_inputs_are_rejected() {
    let config = tiny(Arch::Vanilla);
    let ex = example(&[4; 41], &[], &[5]);
    assert!(matches!(Batch::new(&config, &[&ex]), Err(Error::TooLong { .. })));
    let ex = example(&[4], &[], &[5; 40]);
    assert!(matches!(Batch::new(&config, &[&ex]), Err(Error::TooLong { .. })));
    let ex = example(&[4, 99], &[], &[5]);
    assert!(matches!(Batch::new(&config, &[&ex]), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn params_roundtrip_by_name() {
    let mut model = Model::<f64>::init(tiny(Arch::DualEnc), 16).unwrap();
    randomized(&mut model, 17);
    let back = Model::from_params(model.config.clone(), model.params.clone()).unwrap();
    let ex = example(&[4, 5], &[(&[4], &[9])], &[9]);
    let batch = Batch::new(&model.config, &[&ex]).unwrap();
    assert_eq!(model.distributions(&batch).unwrap(), back.distributions(&batch).unwrap());
    let other = Model::<f64>::init(tiny(Arch::Vanilla), 0).unwrap();
    assert!(Model::from_params(model.config.clone(), other.params).is_err());
}

fn copy_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|i| {
            let len = rng.gen_range(3..=6);
            let s: Vec<u32> = (0..len).map(|_| rng.gen_range(4..12)).collect();
            SentencePair {
                source: s.clone().into(),
                target: s.into(),
                pair_id: i as u32,
            }
        })
        .collect();
    ParallelCorpus::new(pairs).unwrap()
}

fn copy_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        ffn_dim: 64,
        src_layers: 1,
        mem_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        ..ModelConfig::new(Arch::Vanilla, 12)
    }
}

#[test]
fn vanilla_learns_to_copy() {
    let corpus = copy_corpus(200, 20);
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 3e-3,
        warmup: 100,
        ..TrainConfig::default()
    };
    let (ckpt, log) = train(copy_config(), &corpus, 0, None, &tc, 21).unwrap();
    let first: Vec<f64> = log.epochs[..5].iter().map(|e| e.loss).collect();
    assert!(first.windows(2).all(|w| w[1] < w[0]), "{first:?}");
    let model = ckpt.model.cast::<f64>();
    let mut wrong = 0;
    for p in corpus.pairs() {
        let ex = Example {
            source: p.source.0.clone(),
            memories: Vec::new(),
            target: p.target.0.clone(),
        };
        let rows = model.distributions(&Batch::new(&model.config, &[&ex]).unwrap()).unwrap();
        let mut expect = p.target.0.clone();
        expect.push(EOS);
        for (row, want) in rows.iter().zip(&expect) {
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if arg as u32 != *want {
                wrong += 1;
            }
        }
    }
    assert_eq!(wrong, 0);
}

#[test]
fn training_is_deterministic_and_checks_vocab() {
    let corpus = copy_corpus(40, 22);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let config = ModelConfig {
        dropout: 0.1,
        ..copy_config()
    };
    let (a, la) = train(config.clone(), &corpus, 7, None, &tc, 23).unwrap();
    let (b, lb) = train(config.clone(), &corpus, 7, None, &tc, 23).unwrap();
    assert_eq!(la.final_loss().unwrap().to_bits(), lb.final_loss().unwrap().to_bits());
    assert_eq!(a.model.params.get(a.model.w.out_w).data(), b.model.params.get(b.model.w.out_w).data());
    assert!(a.check_vocab(7).is_ok());
    assert!(matches!(a.check_vocab(8), Err(Error::VocabMismatch { .. })));
    let small = ModelConfig::new(Arch::Vanilla, 8);
    assert!(train(small, &corpus, 7, None, &tc, 23).is_err());
}

#[test]
fn single_multi_presents_each_pair_six_times() {
    let corpus = copy_corpus(30, 24);
    let index = RetrievalIndex::build(&corpus).unwrap();
    let tc = TrainConfig {
        mode: TrainMode::SingleMulti,
        ..TrainConfig::default()
    };
    let ex = train::expand_for_test(&corpus, Some(&index), &tc).unwrap();
    assert_eq!(ex.len(), 6 * corpus.len());
    for (i, chunk) in ex.chunks(6).enumerate() {
        assert!(chunk[5].memories.is_empty());
        assert!(chunk[..5].iter().all(|e| e.memories.len() <= 1));
        let pid = corpus.pairs()[i].pair_id;
        let own = index.get(pid).unwrap();
        assert!(chunk.iter().all(|e| e.memories.iter().all(|m| m.source != own.source.0)));
    }
    let topk = TrainConfig {
        mode: TrainMode::Topk(3),
        ..TrainConfig::default()
    };
    let ex = train::expand_for_test(&corpus, Some(&index), &topk).unwrap();
    assert_eq!(ex.len(), corpus.len());
    assert!(ex.iter().all(|e| e.memories.len() == 3));
    assert!(train::expand_for_test(&corpus, None, &topk).is_err());
}
