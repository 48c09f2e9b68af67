//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{random_sample, rng, small_model};
use rand::Rng;
use sync_transformer::chunking::{latency, num_chunks, split_chunks, ChunkGeometry, FrontEndGeometry};
use sync_transformer::decoding::{
    beam_decode, beam_decode_features, greedy_decode, BeamConfig, ManualClock, ModelScorer, StreamDecoder,
};
use sync_transformer::diagnostics::{lattice_gradient_check, model_gradient_check, random_lattice};
use sync_transformer::lattice::{backward_pass, diagonal_identity_check, enumerate_paths, forward_pass, LatticeProbs};
use sync_transformer::model::{ModelConfig, SyncTransformer, Vocabulary};
use sync_transformer::train::{
    beam_cer, gen_synthetic_stream, greedy_cer, Checkpoint, RunConfig, TrainConfig, Trainer,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Path sum by explicit recursion over every alignment.
fn brute_force(p: &LatticeProbs, m: usize, u: usize) -> f64 {
    let last_chunk = m + 1 == p.chunks();
    let mut total = 0.0;
    if u < p.labels() {
        total += p.label(m, u).exp() * brute_force(p, m, u + 1);
    }
    if last_chunk {
        if u == p.labels() {
            total += p.blank(m, u).exp();
        }
    } else {
        total += p.blank(m, u).exp() * brute_force(p, m + 1, u);
    }
    total
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let (mut max_rel, mut max_oracle, mut n) = (0.0f64, 0.0f64, 0);
    for m in 1..=5 {
        for u in 0..=5 {
            for _ in 0..100 {
                let p = random_lattice(&mut r, m, u);
                let fwd = forward_pass(&p).unwrap().log_prob.exp();
                let paths = enumerate_paths(&p).unwrap().log_prob.exp();
                let oracle = brute_force(&p, 0, 0);
                max_rel = max_rel.max((fwd - paths).abs() / paths);
                max_oracle = max_oracle.max((fwd - oracle).abs() / oracle);
                n += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        max_rel <= 1e-10 && max_oracle <= 1e-10 && secs < 10.0,
        format!("{n} lattices, max rel vs enumeration {max_rel:.2e}, vs recursion {max_oracle:.2e}, {secs:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    for m in 1..=8 {
        for u in 0..=8 {
            for _ in 0..10 {
                let p = random_lattice(&mut r, m, u);
                let fwd = forward_pass(&p).unwrap();
                let beta = backward_pass(&p).unwrap();
                worst = worst.max(diagonal_identity_check(&fwd.alpha, &beta, fwd.log_prob));
            }
        }
    }
    check(worst <= 1e-9, format!("max diagonal deviation {worst:.2e} up to M=8, U=8"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = rng(103);
    let mut lattice_rel = 0.0f64;
    for m in 1..=5 {
        for u in 0..=5 {
            let p = random_lattice(&mut r, m, u);
            lattice_rel = lattice_rel.max(lattice_gradient_check(&p, 1e-6).unwrap().max_rel);
        }
    }
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_blocks: 1,
        n_dec_blocks: 1,
        d_in: 4,
        left_context: 3,
        chunk_len: 3,
        overlap: 1,
        vocab_size: 6,
        ffn_inner: 8,
        seed: 3,
    };
    let model = SyncTransformer::new(cfg.clone()).unwrap();
    let batch = vec![random_sample(&mut r, &cfg, 24, 2), random_sample(&mut r, &cfg, 17, 1)];
    let rep = model_gradient_check(&model, &batch, 1e-5, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(
        lattice_rel <= 1e-6 && rep.max_rel <= 1e-4 && secs < 120.0,
        format!(
            "lattice max rel {lattice_rel:.2e}; model max rel {:.2e} over {} parameters (worst {}); {secs:.1} s",
            rep.max_rel, rep.checked, rep.worst
        ),
    )
}

fn criterion_4() -> Outcome {
    let enumerate = |len: usize, w: usize, b: usize| {
        let mut starts = 1;
        let mut s = 0;
        while s + w < len {
            s += w - b;
            starts += 1;
        }
        starts
    };
    let mut r = rng(104);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let w = r.random_range(1..=64);
        let b = r.random_range(0..w);
        let len = r.random_range(w..=2000);
        let ranges = split_chunks(len, w, b).unwrap().ranges;
        if num_chunks(len, w, b).unwrap() != enumerate(len, w, b) || ranges.len() != enumerate(len, w, b) {
            mismatches += 1;
        }
    }
    let reference_point = [(10, 1), (100, 14), (101, 14), (102, 15)]
        .iter()
        .all(|&(len, m)| num_chunks(len, 10, 3).unwrap() == m && enumerate(len, 10, 3) == m);
    check(
        mismatches == 0 && reference_point,
        format!("1000 random (L, W, B): {mismatches} mismatches; W=10, B=3 point ok: {reference_point}"),
    )
}

fn criterion_5() -> Outcome {
    let model = small_model(105);
    let cfg = model.config().clone();
    let fe = model.front_end_geometry();
    let mut r = rng(105);
    let (mut worst, mut checked) = (0.0f64, 0);
    for _ in 0..5 {
        let frames = r.random_range(40..90);
        let s = random_sample(&mut r, &cfg, frames, 4);
        let (enc, chunks) = model.encode_offline(&s.features).unwrap();
        let lattice = model.lattice_probs_for(&s.features, &s.labels).unwrap();
        for (m, range) in chunks.ranges.iter().enumerate() {
            let first_future = fe.last_raw_needed(range.end - 1) + 1;
            for j in first_future..frames {
                let mut x = s.features.clone();
                let d = cfg.d_in;
                x.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|v| *v += r.random_range(-3.0..3.0));
                let (enc2, _) = model.encode_offline(&x).unwrap();
                worst = worst
                    .max(enc.row_range(range.start, range.end).max_abs_diff(&enc2.row_range(range.start, range.end)));
                let l2 = model.lattice_probs_for(&x, &s.labels).unwrap();
                for u in 0..=s.labels.len() {
                    worst = worst.max((lattice.blank(m, u) - l2.blank(m, u)).abs());
                    if u < s.labels.len() {
                        worst = worst.max((lattice.label(m, u) - l2.label(m, u)).abs());
                    }
                }
                checked += 1;
            }
        }
    }
    check(worst <= 1e-12, format!("{checked} future-frame perturbations, max change {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let model = small_model(106);
    let cfg = model.config().clone();
    let beam = BeamConfig::default();
    let mut r = rng(106);
    let (mut transcript_mismatch, mut worst, mut runs) = (0, 0.0f64, 0);
    for _ in 0..20 {
        let frames = r.random_range(16..72);
        let x = random_sample(&mut r, &cfg, frames, 0).features;
        let offline = beam_decode_features(&model, &x, &beam).unwrap().swap_remove(0);
        for k in 0..100 {
            let mut dec = StreamDecoder::new(&model, beam.clone(), Box::new(ManualClock::new())).unwrap();
            let mut symbols = Vec::new();
            let mut sent = 0;
            while sent < frames {
                let n = match k {
                    0 => frames,
                    1 => 1,
                    _ => r.random_range(1..=12).min(frames - sent),
                };
                let piece = &x.data()[sent * cfg.d_in..(sent + n) * cfg.d_in];
                symbols.extend(dec.push(piece).unwrap().into_iter().map(|e| e.symbol));
                sent += n;
            }
            let (tail, nbest) = dec.finish().unwrap();
            symbols.extend(tail.into_iter().map(|e| e.symbol));
            if symbols != offline.symbols || nbest[0].symbols != offline.symbols {
                transcript_mismatch += 1;
            }
            worst = worst.max((nbest[0].log_prob - offline.log_prob).abs());
            runs += 1;
        }
    }
    check(
        transcript_mismatch == 0 && worst <= 1e-10,
        format!("{runs} streamed decodes, {transcript_mismatch} transcript mismatches, max log_prob diff {worst:.2e}"),
    )
}

fn criterion_7() -> Outcome {
    let model = small_model(107);
    let cfg = model.config().clone();
    let five = BeamConfig::default();
    let mut r = rng(107);
    let (mut below, mut width_one_diff, mut margin) = (0, 0, f64::INFINITY);
    for _ in 0..100 {
        let frames = r.random_range(8..64);
        let x = random_sample(&mut r, &cfg, frames, 0).features;
        let scorer = ModelScorer::for_utterance(&model, &x).unwrap();
        let m = scorer.num_chunks();
        let g = greedy_decode(&scorer, m, five.max_symbols_per_chunk).unwrap();
        let best = beam_decode(&scorer, m, &five).unwrap().swap_remove(0);
        if best.log_prob < g.log_prob {
            below += 1;
        }
        margin = margin.min(best.log_prob - g.log_prob);
        if beam_decode(&scorer, m, &BeamConfig::greedy()).unwrap() != vec![g] {
            width_one_diff += 1;
        }
    }
    check(
        below == 0 && width_one_diff == 0,
        format!(
            "100 utterances: beam(5) below greedy {below}, min margin {margin:.3e}; width-1 differs {width_one_diff}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let m = &cfg.model;
    assert_eq!(
        (m.d_model, m.n_enc_blocks, m.n_dec_blocks, m.n_heads, m.vocab_size, m.chunk_len, m.overlap, m.left_context),
        (64, 2, 2, 4, 16, 4, 1, 8)
    );
    assert_eq!((cfg.synthetic.frames_per_symbol, cfg.train_samples, cfg.eval_samples), (8, 2000, 200));
    let train = gen_synthetic_stream(&cfg.synthetic, cfg.train_samples, 0).unwrap();
    let held_out = gen_synthetic_stream(&cfg.synthetic, cfg.eval_samples, 1).unwrap();
    let validation = gen_synthetic_stream(&cfg.synthetic, 100, 2).unwrap();
    let mut model = SyncTransformer::new(cfg.model.clone()).unwrap();
    let tc = TrainConfig { total_steps: 20_000, eval_interval: 250, ..cfg.train.clone() };
    let mut trainer = Trainer::new(tc, &model).unwrap();
    let cap = cfg.beam.max_symbols_per_chunk;
    trainer
        .run(&mut model, &train, |p, m| {
            let v = greedy_cer(m, &validation, cap)?;
            eprintln!("  criterion 8: step {} loss {:.4} validation CER {:.4}", p.step, p.loss, v);
            Ok(v <= 0.02)
        })
        .unwrap();
    let steps = trainer.step();
    let greedy = greedy_cer(&model, &held_out, cap).unwrap();
    let beam = beam_cer(&model, &held_out, &BeamConfig { width: 5, ..cfg.beam.clone() }).unwrap();
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(
        greedy <= 0.05 && beam <= greedy && steps <= 20_000 && mins <= 30.0,
        format!(
            "{steps} steps in {mins:.1} min; held-out greedy CER {:.2}%, beam(5) CER {:.2}%",
            greedy * 100.0,
            beam * 100.0
        ),
    )
}

fn criterion_9() -> Outcome {
    let down = FrontEndGeometry::standard().downsample();
    let l = latency(ChunkGeometry::new(10, 2).unwrap(), down, 10.0);
    check(
        l.chunk_ms == 400.0 && l.effective_ms == 320.0,
        format!("W=10 → {} ms; B=2 → effective {} ms", l.chunk_ms, l.effective_ms),
    )
}

fn criterion_10() -> Outcome {
    let cfg = RunConfig::default();
    let data = gen_synthetic_stream(&cfg.synthetic, 40, 0).unwrap();
    let vocab = Vocabulary::synthetic(cfg.model.vocab_size).unwrap();
    let tc = TrainConfig { batch_size: 4, total_steps: 6, warmup_steps: 10, ..cfg.train.clone() };
    let bits = |m: &SyncTransformer| -> Vec<u64> {
        m.params().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };

    let mut straight = SyncTransformer::new(cfg.model.clone()).unwrap();
    let mut t = Trainer::new(tc.clone(), &straight).unwrap();
    let full = t.run(&mut straight, &data, |_, _| Ok(false)).unwrap();

    let mut part = SyncTransformer::new(cfg.model.clone()).unwrap();
    let mut t = Trainer::new(TrainConfig { total_steps: 3, ..tc.clone() }, &part).unwrap();
    let mut losses = t.run(&mut part, &data, |_, _| Ok(false)).unwrap();
    let bytes = Checkpoint::new(&part, &vocab, Some(&t.optimizer.state)).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let lossless = ck.to_bytes() == bytes
        && ck.config == *part.config()
        && ck.vocab == vocab
        && ck.params.tensors().iter().zip(part.params().tensors()).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let (mut resumed, _, state) = ck.into_model().unwrap();
    let mut t = Trainer::resume(tc, &resumed, state.unwrap()).unwrap();
    losses.extend(t.run(&mut resumed, &data, |_, _| Ok(false)).unwrap());
    let same_losses = losses.iter().map(|l| l.to_bits()).eq(full.iter().map(|l| l.to_bits()));
    let same_params = bits(&resumed) == bits(&straight);
    check(
        lossless && same_losses && same_params,
        format!(
            "{} byte checkpoint bitwise lossless: {lossless}; 3+3 resumed steps match 6 straight: losses {same_losses}, parameters {same_params}",
            bytes.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("lattice oracle equivalence", criterion_1),
        ("diagonal identity", criterion_2),
        ("gradient checks", criterion_3),
        ("chunk-count formula", criterion_4),
        ("causality", criterion_5),
        ("streaming equivalence", criterion_6),
        ("beam dominance", criterion_7),
        ("end-to-end synthetic task", criterion_8),
        ("latency arithmetic", criterion_9),
        ("checkpoint round trip and resume", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
