use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sync_transformer::chunking::{latency, FrontEndGeometry};
use sync_transformer::decoding::{beam_decode_features, Clock, StreamDecoder, SystemClock};
use sync_transformer::diagnostics;
use sync_transformer::model::{ModelConfig, SyncTransformer, Vocabulary};
use sync_transformer::train::{
    beam_cer, gen_synthetic_stream, greedy_cer, load_dataset, read_manifest, Checkpoint, RunConfig, Sample, Trainer,
};

/// Frame shift of the raw features in milliseconds.
const FRAME_SHIFT_MS: f64 = 10.0;

#[derive(Parser)]
#[command(name = "synctf", version, about = "Chunk-synchronous streaming transducer toolkit")]
struct Cli {
    /// TOML run configuration ([model], [train], [beam], [synthetic]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to read (decode, eval) or to initialise from (train).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Tab-separated `feature-path<TAB>transcript` list; synthetic data otherwise.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output path (checkpoint for train, JSON lines otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data or a manifest and write a checkpoint.
    Train,
    /// Decode each utterance with beam search.
    Decode,
    /// Feed utterances in random fragments and print emissions as they occur.
    StreamDemo,
    /// Greedy and beam character error rate.
    EvalCer,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Compare the lattice forward pass with path enumeration.
    OracleCheck,
    /// Chunk and effective latency of the configured geometry.
    Latency,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e
                .chain()
                .find_map(|c| c.downcast_ref::<sync_transformer::Error>())
                .map(|e| e.category())
                .or_else(|| e.chain().find_map(|c| c.downcast_ref::<Usage>()).map(|_| "usage"))
                .unwrap_or("other");
            eprintln!("error[{category}]: {e:#}");
            println!("{}", json!({ "error": category, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.synthetic.seed = seed;
    }
    let mut out = Output::new(cli.out.as_deref(), matches!(cli.command, Command::Train))?;
    match cli.command {
        Command::Train => train(cli, &cfg),
        Command::Decode => decode(cli, &cfg, &mut out),
        Command::StreamDemo => stream_demo(cli, &cfg, &mut out),
        Command::EvalCer => eval_cer(cli, &cfg, &mut out),
        Command::Gradcheck => gradcheck(&cfg, &mut out),
        Command::OracleCheck => oracle_check(&cfg, &mut out),
        Command::Latency => latency_report(&cfg, &mut out),
    }
}

/// JSON-lines sink: `--out` file or stdout.
struct Output {
    file: Option<std::fs::File>,
}

impl Output {
    fn new(path: Option<&Path>, is_checkpoint: bool) -> Result<Self> {
        let file = match path {
            Some(p) if !is_checkpoint => {
                Some(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
            }
            _ => None,
        };
        Ok(Output { file })
    }

    fn line(&mut self, value: serde_json::Value) -> Result<()> {
        use std::io::Write;
        match &mut self.file {
            Some(f) => writeln!(f, "{value}")?,
            None => writeln!(std::io::stdout().lock(), "{value}")?,
        }
        Ok(())
    }
}

/// Missing or conflicting command-line arguments.
#[derive(Debug)]
struct Usage(&'static str);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0)
    }
}

impl std::error::Error for Usage {}

fn load_checkpoint(cli: &Cli) -> Result<(SyncTransformer, Vocabulary)> {
    let path = cli.checkpoint.as_ref().ok_or(Usage("--checkpoint is required"))?;
    let (model, vocab, _) =
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.into_model()?;
    Ok((model, vocab))
}

/// Manifest utterances, or the synthetic held-out set.
fn eval_data(cli: &Cli, cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    match &cli.manifest {
        Some(m) => Ok(load_dataset(&read_manifest(m)?, vocab)?),
        None => Ok(gen_synthetic_stream(&cfg.synthetic, cfg.eval_samples, 1)?),
    }
}

fn train(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let (train_set, validation, vocab, model_cfg) = match &cli.manifest {
        Some(m) => {
            let entries = read_manifest(m)?;
            let vocab = Vocabulary::from_transcripts(entries.iter().map(|e| e.transcript.as_str()))?;
            let mut data = load_dataset(&entries, &vocab)?;
            if data.len() < 2 {
                bail!(sync_transformer::Error::Data("manifest needs at least two utterances".into()));
            }
            let n_eval = (data.len() / 10).max(1);
            let held_out = data.split_off(data.len() - n_eval);
            let d_in = data[0].features.cols();
            let model_cfg = ModelConfig { vocab_size: vocab.len(), d_in, ..cfg.model.clone() };
            (data, held_out, vocab, model_cfg)
        }
        None => (
            gen_synthetic_stream(&cfg.synthetic, cfg.train_samples, 0)?,
            // Stream 1 is the held-out set of `eval-cer`; validate on stream 2.
            gen_synthetic_stream(&cfg.synthetic, cfg.eval_samples, 2)?,
            Vocabulary::synthetic(cfg.model.vocab_size)?,
            cfg.model.clone(),
        ),
    };

    let (mut model, mut trainer) = match &cli.checkpoint {
        Some(p) => {
            let (model, _, opt) = Checkpoint::load(p)?.into_model()?;
            if model.config().vocab_size != vocab.len() || model.config().d_in != model_cfg.d_in {
                bail!(sync_transformer::Error::Config(
                    "initial checkpoint does not match the data's vocabulary or feature width".into()
                ));
            }
            let trainer = match opt {
                Some(st) => Trainer::resume(cfg.train.clone(), &model, st)?,
                None => Trainer::new(cfg.train.clone(), &model)?,
            };
            (model, trainer)
        }
        None => {
            let model = SyncTransformer::new(model_cfg)?;
            let trainer = Trainer::new(cfg.train.clone(), &model)?;
            (model, trainer)
        }
    };

    let out_path = cli.out.clone().or_else(|| cfg.train.checkpoint.clone());
    let cap = cfg.beam.max_symbols_per_chunk;
    let target = cfg.train.target_cer;
    let mut last_cer = None;
    trainer.run(&mut model, &train_set, |p, m| {
        let cer = greedy_cer(m, &validation, cap)?;
        last_cer = Some(cer);
        println!("{}", json!({ "step": p.step, "loss": p.loss, "lr": p.lr, "greedy_cer": cer }));
        Ok(target.is_some_and(|t| cer <= t))
    })?;

    if let Some(path) = out_path {
        Checkpoint::new(&model, &vocab, Some(&trainer.optimizer.state)).save(&path)?;
        eprintln!("wrote {}", path.display());
    }
    if let Some(cer) = last_cer {
        eprintln!("final greedy CER {:.4} after {} steps", cer, trainer.step());
    }
    Ok(())
}

fn decode(cli: &Cli, cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let (model, vocab) = load_checkpoint(cli)?;
    for (i, s) in eval_data(cli, cfg, &vocab)?.iter().enumerate() {
        let best = beam_decode_features(&model, &s.features, &cfg.beam)?.swap_remove(0);
        out.line(json!({
            "utterance": i,
            "hypothesis": vocab.decode(&best.symbols),
            "reference": vocab.decode(&s.labels),
            "log_prob": best.log_prob,
        }))?;
    }
    Ok(())
}

fn stream_demo(cli: &Cli, cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let (model, vocab) = load_checkpoint(cli)?;
    let data = eval_data(cli, cfg, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    for (i, s) in data.iter().take(5).enumerate() {
        let clock = SystemClock::new();
        let mut dec = StreamDecoder::new(&model, cfg.beam.clone(), Box::new(clock.clone()))?;
        let d_in = s.features.cols();
        let mut t = 0;
        while t < s.features.rows() {
            let n = rng.random_range(1..=8).min(s.features.rows() - t);
            for e in dec.push(&s.features.data()[t * d_in..(t + n) * d_in])? {
                out.line(json!({ "utterance": i, "text": vocab.decode(&[e.symbol]), "emission": e }))?;
            }
            t += n;
        }
        let (tail, nbest) = dec.finish()?;
        for e in tail {
            out.line(json!({ "utterance": i, "text": vocab.decode(&[e.symbol]), "emission": e }))?;
        }
        out.line(json!({
            "utterance": i,
            "final": vocab.decode(&nbest[0].symbols),
            "log_prob": nbest[0].log_prob,
            "elapsed_ms": clock.now_ms(),
        }))?;
    }
    Ok(())
}

fn eval_cer(cli: &Cli, cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let (model, vocab) = load_checkpoint(cli)?;
    let data = eval_data(cli, cfg, &vocab)?;
    let greedy = greedy_cer(&model, &data, cfg.beam.max_symbols_per_chunk)?;
    let beam = beam_cer(&model, &data, &cfg.beam)?;
    out.line(json!({ "utterances": data.len(), "greedy_cer": greedy, "beam_cer": beam, "beam_width": cfg.beam.width }))
}

fn gradcheck(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    const LATTICE_TOL: f64 = 1e-6;
    const MODEL_TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut lattice_rel: f64 = 0.0;
    for (m, u) in [(1, 0), (2, 3), (4, 2), (5, 5)] {
        let probs = diagnostics::random_lattice(&mut rng, m, u);
        lattice_rel = lattice_rel.max(diagnostics::lattice_gradient_check(&probs, 1e-6)?.max_rel);
    }
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} lattice gradient: max rel deviation {lattice_rel:.3e} (tol {LATTICE_TOL:.0e})",
        verdict(lattice_rel <= LATTICE_TOL)
    );

    let tiny = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_blocks: 1,
        n_dec_blocks: 1,
        d_in: 4,
        left_context: 3,
        chunk_len: 3,
        overlap: 1,
        vocab_size: 6,
        ffn_inner: 6,
        seed: cfg.model.seed,
    };
    let model = SyncTransformer::new(tiny)?;
    let batch: Vec<Sample> = (0..2)
        .map(|i| {
            let t = 13 + 5 * i;
            let data = (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels = (0..2 + i).map(|_| rng.random_range(2..6)).collect();
            Sample { features: sync_transformer::tensor::Tensor::new(vec![t, 4], data).expect("sized"), labels }
        })
        .collect();
    let rep = diagnostics::model_gradient_check(&model, &batch, 1e-5, 1)?;
    println!(
        "{} model gradient: {} parameters, max rel deviation {:.3e} at {} (tol {MODEL_TOL:.0e})",
        verdict(rep.max_rel <= MODEL_TOL),
        rep.checked,
        rep.max_rel,
        rep.worst
    );
    out.line(json!({ "lattice_max_rel": lattice_rel, "model_max_rel": rep.max_rel, "model_max_abs": rep.max_abs }))?;
    if lattice_rel > LATTICE_TOL || rep.max_rel > MODEL_TOL {
        bail!(sync_transformer::Error::Numeric("gradient check failed".into()));
    }
    Ok(())
}

fn oracle_check(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let rep = diagnostics::lattice_oracle_check(&mut rng, 5, 5, 100)?;
    let ok_fwd = rep.max_rel <= 1e-10;
    let ok_diag = rep.max_diagonal <= 1e-9;
    println!(
        "{} forward vs enumeration: {} lattices, max rel deviation {:.3e}",
        if ok_fwd { "PASS" } else { "FAIL" },
        rep.lattices,
        rep.max_rel
    );
    println!("{} diagonal identity: max deviation {:.3e}", if ok_diag { "PASS" } else { "FAIL" }, rep.max_diagonal);
    out.line(json!({ "lattices": rep.lattices, "max_rel": rep.max_rel, "max_diagonal": rep.max_diagonal }))?;
    if !(ok_fwd && ok_diag) {
        bail!(sync_transformer::Error::Numeric("lattice oracle check failed".into()));
    }
    Ok(())
}

fn latency_report(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let geometry = cfg.model.geometry()?;
    let ds = FrontEndGeometry::standard().downsample();
    let l = latency(geometry, ds, FRAME_SHIFT_MS);
    out.line(json!({
        "chunk_len": geometry.chunk_len,
        "overlap": geometry.overlap,
        "downsample": ds,
        "frame_shift_ms": FRAME_SHIFT_MS,
        "chunk_ms": l.chunk_ms,
        "effective_ms": l.effective_ms,
    }))
}
