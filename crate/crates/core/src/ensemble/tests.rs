use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

use super::*;
use crate::corpus::{ParallelCorpus, SentencePair};
use crate::model::{train, Example, ModelConfig, TrainConfig, TrainMode};
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

fn randomize_store(store: &mut crate::autodiff::ParamStore<f64>, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let gamma = store.name(id).ends_with("gamma");
        for v in store.get_mut(id).data_mut() {
            let r: f64 = rng.gen_range(-0.5..0.5);
            *v = if gamma { 1.0 + r } else { r };
        }
    }
}

fn predictor(arch: Arch, seed: u64, random_net: bool) -> Predictor {
    let mut model = Model::<f64>::init(tiny(arch), seed).unwrap();
    randomize_store(&mut model.params, seed + 1);
    let mut net = WeightNet::<f64>::init(8, seed);
    if random_net {
        randomize_store(&mut net.params, seed + 2);
    }
    Predictor::new(model, Some(net)).unwrap()
}

fn mem(s: &[u32], t: &[u32]) -> Memory {
    Memory {
        source: s.to_vec(),
        target: t.to_vec(),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn assert_dist(d: &[f64]) {
    assert!(d.iter().all(|p| p.is_finite() && *p >= 0.0));
    assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn mixture_arithmetic() {
    let a = vec![0.8, 0.2];
    let b = vec![0.4, 0.6];
    let avg = mix(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
    assert!((avg[0] - 0.6).abs() < 1e-15 && (avg[1] - 0.4).abs() < 1e-15);
    let w = mix(&[a.clone(), b.clone()], &[0.75, 0.25]).unwrap();
    assert!((w[0] - 0.7).abs() < 1e-15 && (w[1] - 0.3).abs() < 1e-15);
    let third = 1.0 / 3.0;
    let same = mix(&[a.clone(), a.clone(), a.clone()], &[third; 3]).unwrap();
    assert_eq!(bits(&same), bits(&a));
    assert_eq!(mix(&[b.clone()], &[1.0]).unwrap(), b);
    assert!(mix(&[], &[]).is_err());
    assert!(mix(&[a], &[0.5, 0.5]).is_err());
    let s = softmax(&[0.0, 0.0, 0.0, 0.0]);
    assert!(s.iter().all(|w| *w == 0.25));
}

#[test]
fn base_without_memories_is_the_plain_model() {
    let pred = predictor(Arch::DualEnc, 1, false);
    let src = [4, 5, 6];
    let prefix = [7, 8];
    let got = pred.predict(Mode::Base, &src, &[], &prefix).unwrap();
    let ex = Example {
        source: src.to_vec(),
        memories: vec![],
        target: prefix.to_vec(),
    };
    let rows = pred.model.distributions(&crate::model::Batch::new(&pred.model.config, &[&ex]).unwrap()).unwrap();
    for (a, b) in got.iter().zip(&rows[2]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_dist(&got);
    assert_eq!(got, pred.predict(Mode::Base, &src, &[], &prefix).unwrap());
    assert_eq!(got, pred.predict(Mode::Single, &src, &[], &prefix).unwrap());
}

#[test]
fn single_is_base_with_one_memory() {
    let pred = predictor(Arch::DualEnc, 3, false);
    let z = mem(&[4, 5], &[9, 10]);
    let single = pred.predict(Mode::Single, &[4, 5, 6], &[z.clone(), mem(&[6], &[11])], &[9]).unwrap();
    let base = pred.predict(Mode::Base, &[4, 5, 6], &[z.clone()], &[9]).unwrap();
    assert_eq!(bits(&single), bits(&base));
    assert_dist(&single);
    let avg1 = pred.predict(Mode::Average, &[4, 5, 6], &[z], &[9]).unwrap();
    assert_eq!(bits(&avg1), bits(&single));
}

#[test]
fn ensemble_identities_are_bitwise() {
    let pred = predictor(Arch::DualEnc, 5, false);
    let src = [4, 5, 6, 7];
    let z = mem(&[4, 5, 8], &[9, 10, 11]);
    let single = pred.predict(Mode::Single, &src, &[z.clone()], &[9, 10]).unwrap();
    for k in 2..=5 {
        let copies = vec![z.clone(); k];
        let avg = pred.predict(Mode::Average, &src, &copies, &[9, 10]).unwrap();
        assert_eq!(bits(&avg), bits(&single), "K = {k}");
    }
    let zs = vec![z, mem(&[6], &[8, 7]), mem(&[4, 7], &[10])];
    let avg = pred.predict(Mode::Average, &src, &zs, &[9]).unwrap();
    let weighted = pred.predict(Mode::Weighted, &src, &zs, &[9]).unwrap();
    assert_eq!(bits(&avg), bits(&weighted));
    assert_dist(&avg);
}

#[test]
fn weights_follow_memory_permutations() {
    let pred = predictor(Arch::DualEnc, 7, true);
    let src = [4, 5, 6];
    let zs = vec![mem(&[4, 5], &[9]), mem(&[6], &[8, 7]), mem(&[4, 7], &[10, 11])];
    let perm = vec![zs[2].clone(), zs[0].clone(), zs[1].clone()];
    let p1 = pred.prepare(Mode::Weighted, &src, &zs).unwrap();
    let p2 = pred.prepare(Mode::Weighted, &src, &perm).unwrap();
    let w1 = pred.step_rows(&p1, &[9], &[1]).unwrap().remove(0).weights.unwrap();
    let w2 = pred.step_rows(&p2, &[9], &[1]).unwrap().remove(0).weights.unwrap();
    assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w1.iter().any(|w| (w - 1.0 / 3.0).abs() > 1e-6));
    for (a, b) in [(0, 2), (1, 0), (2, 1)] {
        assert!((w2[a] - w1[b]).abs() < 1e-12);
    }
}

#[test]
fn ensemble_preconditions() {
    let pred = predictor(Arch::DualEnc, 9, false);
    assert!(pred.prepare(Mode::Average, &[4], &[]).is_err());
    assert!(pred.prepare(Mode::Weighted, &[4], &[]).is_err());
    let bare = Predictor::new(pred.model.clone(), None).unwrap();
    assert!(bare.prepare(Mode::Weighted, &[4], &[mem(&[4], &[5])]).is_err());
    assert!(Predictor::new(pred.model.clone(), Some(WeightNet::init(16, 0))).is_err());
    let vanilla = predictor(Arch::Vanilla, 9, false);
    assert!(vanilla.prepare(Mode::Weighted, &[4], &[mem(&[4], &[5])]).is_err());
    assert!(Mode::parse("weighted").is_ok() && Mode::parse("median").is_err());
}

#[test]
fn randomized_inputs_give_distributions_in_every_mode() {
    let mut rng = Rng::seed_from_u64(11);
    for arch in [Arch::Vanilla, Arch::SingleEnc, Arch::DualEnc] {
        let pred = predictor(arch, 12, true);
        for _ in 0..20 {
            let src: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(4..12)).collect();
            let n = rng.gen_range(1..4);
            let zs: Vec<Memory> = (0..n)
                .map(|_| {
                    let s: Vec<u32> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..12)).collect();
                    let t: Vec<u32> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..12)).collect();
                    mem(&s, &t)
                })
                .collect();
            let prefix: Vec<u32> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(4..12)).collect();
            for mode in Mode::ALL {
                if mode == Mode::Weighted && arch != Arch::DualEnc {
                    continue;
                }
                assert_dist(&pred.predict(mode, &src, &zs, &prefix).unwrap());
            }
        }
    }
}

fn copy_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = Rng::seed_from_u64(seed);
    ParallelCorpus::new(
        (0..n)
            .map(|i| {
                let s: Vec<u32> = (0..rng.gen_range(3..=6)).map(|_| rng.gen_range(4..12)).collect();
                SentencePair {
                    source: s.clone().into(),
                    target: s.into(),
                    pair_id: i as u32,
                }
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn decoding_a_copy_model() {
    let corpus = copy_corpus(200, 20);
    let config = ModelConfig {
        d_model: 32,
        n_heads: 4,
        ffn_dim: 64,
        src_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        ..ModelConfig::new(Arch::Vanilla, 12)
    };
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 3e-3,
        warmup: 100,
        ..TrainConfig::default()
    };
    let (ckpt, _) = train(config, &corpus, 0, None, &tc, 21).unwrap();
    let pred = Predictor::new(ckpt.model.cast(), None).unwrap();
    for p in corpus.pairs().iter().take(40) {
        let g = translate(&pred, Mode::Base, &p.source, None, 0, Strategy::Greedy).unwrap();
        assert_eq!(g.tokens, p.target.0);
        assert!(g.finished);
        let b1 = translate(&pred, Mode::Base, &p.source, None, 0, Strategy::Beam(1)).unwrap();
        assert_eq!(b1, g);
        let b4 = translate(&pred, Mode::Base, &p.source, None, 0, Strategy::Beam(4)).unwrap();
        assert!(b4.score >= g.score);
    }
}

#[test]
fn beam_never_scores_below_greedy_on_a_random_model() {
    let pred = predictor(Arch::DualEnc, 30, true);
    let zs = vec![mem(&[4, 5], &[9, 10]), mem(&[6], &[8])];
    for mode in Mode::ALL {
        let p = pred.prepare(mode, &[4, 5, 6], &zs).unwrap();
        let g = decode(&pred, &p, Strategy::Greedy, 8).unwrap();
        let b1 = decode(&pred, &p, Strategy::Beam(1), 8).unwrap();
        let b4 = decode(&pred, &p, Strategy::Beam(4), 8).unwrap();
        assert_eq!(b1, g);
        assert!(b4.score >= g.score);
    }
}

fn tm_setup() -> (crate::model::Checkpoint, ParallelCorpus, RetrievalIndex) {
    let corpus = copy_corpus(60, 40);
    let index = RetrievalIndex::build(&corpus).unwrap();
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        src_layers: 1,
        mem_layers: 1,
        dec_layers: 1,
        ..ModelConfig::new(Arch::DualEnc, 12)
    };
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 16,
        mode: TrainMode::SingleMulti,
        ..TrainConfig::default()
    };
    let (ckpt, _) = train(config, &corpus, 3, Some(&index), &tc, 41).unwrap();
    let valid = copy_corpus(30, 42);
    (ckpt, valid, index)
}

#[test]
fn finetune_selects_by_heldout_loss() {
    let (ckpt, valid, index) = tm_setup();
    let cfg = FinetuneConfig {
        updates: 30,
        batch_size: 8,
        lr: 1e-3,
        warmup: 10,
        eval_every: 10,
        k: 3,
        ..FinetuneConfig::default()
    };
    let a = finetune_weighted(&ckpt, &valid, &index, &cfg, 5).unwrap();
    assert_eq!(a.curve.len(), 4);
    let chosen = a.curve.iter().find(|c| c.update == a.best_update).unwrap();
    assert!(chosen.heldout_loss <= a.curve[0].heldout_loss);
    assert!(a.curve.iter().all(|c| c.heldout_loss >= chosen.heldout_loss));
    let b = finetune_weighted(&ckpt, &valid, &index, &cfg, 5).unwrap();
    assert_eq!(a.curve, b.curve);

    let zero = finetune_weighted(&ckpt, &valid, &index, &FinetuneConfig { updates: 0, ..cfg.clone() }, 5).unwrap();
    assert_eq!(zero.best_update, 0);
    let pred = Predictor::new(zero.checkpoint.model.cast(), Some(zero.weightnet.cast())).unwrap();
    let p = valid.pairs()[0].clone();
    let zs = crate::model::memories_for(&index, &p.source, 3, None).unwrap();
    let prep = pred.prepare(Mode::Weighted, &p.source, &zs).unwrap();
    let out = pred.step_rows(&prep, &p.target, &[0, 1]).unwrap();
    for o in &out {
        assert!(o.weights.as_ref().unwrap().iter().all(|w| *w == 1.0 / 3.0));
    }
    let avg = pred.predict(Mode::Average, &p.source, &zs, &[]).unwrap();
    assert_eq!(bits(&avg), bits(&out[0].dist));

    let few = ParallelCorpus::new(valid.pairs()[..9].to_vec()).unwrap();
    assert!(finetune_weighted(&ckpt, &few, &index, &cfg, 5).is_err());
}

#[test]
fn batched_weighted_loss_matches_the_predictor() {
    let (ckpt, valid, index) = tm_setup();
    let model = ckpt.model.cast::<f64>();
    let mut net = WeightNet::<f64>::init(16, 1);
    randomize_store(&mut net.params, 2);
    let examples: Vec<Example> = valid.pairs()[..4]
        .iter()
        .enumerate()
        .map(|(i, p)| Example {
            source: p.source.0.clone(),
            memories: crate::model::memories_for(&index, &p.source, 1 + i % 3, None).unwrap(),
            target: p.target.0.clone(),
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let mut g = crate::autodiff::Graph::new();
    let loss = finetune::weighted_loss(&mut g, &model, &net, &refs, 0.0).unwrap();
    let pred = Predictor::new(model, Some(net)).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for e in &examples {
        let p = pred.prepare(Mode::Weighted, &e.source, &e.memories).unwrap();
        let rows = pred.score_rows(&p, &e.target).unwrap();
        let gold: Vec<u32> = e.target.iter().copied().chain([crate::corpus::EOS]).collect();
        for (r, y) in rows.iter().zip(&gold) {
            sum -= libm::log(r[*y as usize]);
            n += 1;
        }
    }
    assert!((g.value(loss).item() - sum / n as f64).abs() < 1e-9);
}
