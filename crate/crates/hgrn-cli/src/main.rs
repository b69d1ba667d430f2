//! `hgrn` command-line harness: training runs, evaluation, extrapolation
//! sweeps, forget-gate statistics, scan benchmarking, gradient checking,
//! ablation suites, and token-mixing-matrix export.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use hgrn::checkpoint::{load_checkpoint, save_checkpoint};
use hgrn::config::RunConfig;
use hgrn::model::{
    bind_params, init_params, model_forward, InputGateMode, LowerBoundMode, ModelConfig,
    ModelParams,
};
use hgrn::scan::{
    parallel_scan, sequential_scan, theta_toeplitz_deviation, ComplexSeq, DecaySeq,
};
use hgrn::stats::collect_gate_stats;
use hgrn::tape::Tape;
use hgrn::tasks::{
    gen_sample, load_byte_corpus, CorpusSource, TaskKind, TaskSource, TaskSpec,
};
use hgrn::tensor::{Scalar, Tensor};
use hgrn::train::{
    evaluate_ppl, gradient_check_model, masked_accuracy, train, BatchSource, MetricsRecord,
    Sample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(name = "hgrn", about = "Gated linear-recurrence language model harness")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's train/task seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Float width for model math.
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: Precision,
    /// Output directory (default: $HGRN_OUT or ./hgrn-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model per the config; writes resolved config, metrics CSV,
    /// and best/final checkpoints.
    Train {
        /// Dotted-key overrides, e.g. model.lower_bound_mode=none
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate checkpoint perplexity on a byte corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 256)]
        seq_len: usize,
    },
    /// Evaluate perplexity at several inference lengths.
    Extrapolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
    },
    /// Per-layer forget-gate statistics over evaluation windows.
    GateStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 256)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        windows: usize,
    },
    /// Time the sequential and parallel scan paths.
    ScanBench {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Finite-difference check of the full model gradient (64-bit).
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train the base config plus a suite of structural variants.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Export token-mixing matrices (A = Lambda (*) Theta) to CSV.
    ExportMixing {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        /// Token source; random tokens from --seed when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match cli.precision {
        Precision::F32 => dispatch::<f32>(cli),
        Precision::F64 => dispatch::<f64>(cli),
    }
}

fn dispatch<T: Scalar>(cli: &Cli) -> anyhow::Result<ExitCode> {
    let out = out_dir(cli)?;
    match &cli.cmd {
        Cmd::Train { overrides } => {
            let cfg = load_config(cli, overrides)?;
            cmd_train::<T>(&cfg, &out)?;
        }
        Cmd::Eval {
            checkpoint,
            corpus,
            seq_len,
        } => cmd_eval::<T>(checkpoint, corpus, *seq_len, &out)?,
        Cmd::Extrapolate {
            checkpoint,
            corpus,
            lengths,
        } => cmd_extrapolate::<T>(checkpoint, corpus, lengths, &out)?,
        Cmd::GateStats {
            checkpoint,
            corpus,
            seq_len,
            windows,
        } => cmd_gate_stats::<T>(checkpoint, corpus, *seq_len, *windows, &out)?,
        Cmd::ScanBench {
            lengths,
            dim,
            repeats,
        } => cmd_scan_bench(lengths, *dim, *repeats, cli.seed.unwrap_or(0), &out)?,
        Cmd::Gradcheck { tolerance } => return cmd_gradcheck(*tolerance),
        Cmd::Ablate { suite, overrides } => {
            let cfg = load_config(cli, overrides)?;
            cmd_ablate::<T>(&cfg, suite, &out)?;
        }
        Cmd::ExportMixing {
            checkpoint,
            layer,
            dims,
            seq_len,
            corpus,
        } => cmd_export_mixing::<T>(
            checkpoint,
            *layer,
            dims,
            *seq_len,
            corpus.as_deref(),
            cli.seed.unwrap_or(0),
            &out,
        )?,
    }
    Ok(ExitCode::SUCCESS)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("HGRN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hgrn-out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Loads the run config; a missing file is a usage error (exit code 2).
fn load_config(cli: &Cli, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config is required for this command"))?;
    if !path.exists() {
        eprintln!("error: config file not found: {}", path.display());
        std::process::exit(2);
    }
    let mut pairs = Vec::new();
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| anyhow!("override {ov:?} is not KEY=VALUE"))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("train.seed".into(), seed.to_string()));
        pairs.push(("task.seed".into(), seed.to_string()));
    }
    Ok(RunConfig::from_file(path, &pairs)?)
}

/// Mean masked cross-entropy of fixed samples (no gradients).
fn eval_loss<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
    samples: &[Sample],
) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::<T>::new();
        let vars = bind_params(&mut tape, params, false);
        let out = model_forward(&mut tape, &vars, &s.tokens, mcfg)?;
        let loss = tape.cross_entropy(out.logits, &s.targets, &s.mask)?;
        total += tape.value(loss).data()[0].as_f64();
    }
    Ok(total / samples.len() as f64)
}

/// Held-out samples for synthetic tasks: indices far past anything the
/// training stream will reach.
fn val_samples(spec: &TaskSpec, count: usize) -> anyhow::Result<Vec<Sample>> {
    const VAL_BASE: u64 = 1 << 40;
    (0..count)
        .map(|i| Ok(gen_sample(spec, VAL_BASE + i as u64)?))
        .collect()
}

struct PreparedData {
    source: Box<dyn BatchSource>,
    val: ValData,
}

enum ValData {
    Samples(Vec<Sample>),
    Corpus(Vec<usize>),
}

fn prepare_data(cfg: &RunConfig) -> anyhow::Result<PreparedData> {
    if cfg.task.kind == TaskKind::ByteLm {
        let corpus_path = cfg
            .run
            .corpus
            .as_ref()
            .ok_or_else(|| anyhow!("byte_lm task requires run.corpus"))?;
        let (train_toks, val_toks) =
            load_byte_corpus(Path::new(corpus_path), cfg.run.split_ratio)?;
        Ok(PreparedData {
            source: Box::new(CorpusSource {
                corpus: train_toks,
                seq_len: cfg.train.seq_len,
                seed: cfg.train.seed,
            }),
            val: ValData::Corpus(val_toks),
        })
    } else {
        Ok(PreparedData {
            source: Box::new(TaskSource {
                spec: cfg.task.clone(),
            }),
            val: ValData::Samples(val_samples(&cfg.task, 32)?),
        })
    }
}

struct RunResult<T> {
    params: ModelParams<T>,
    records: Vec<MetricsRecord>,
    /// Masked accuracy for synthetic tasks, None for byte LM.
    accuracy: Option<f64>,
}

fn run_training<T: Scalar>(
    cfg: &RunConfig,
    dir: &Path,
    quiet: bool,
) -> anyhow::Result<RunResult<T>> {
    cfg.validate()?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml_string()?)?;
    let data = prepare_data(cfg)?;
    let mut params = init_params::<T>(&cfg.model, cfg.train.seed)?;
    let best = RefCell::new(f64::INFINITY);
    let best_path = dir.join("best.ckpt");
    let mcfg = cfg.model.clone();
    let val_seq = cfg.train.seq_len.min(cfg.model.seq_len_max);
    let mut eval_fn = |p: &ModelParams<T>| -> hgrn::Result<f64> {
        let loss = match &data.val {
            ValData::Samples(samples) => eval_loss(&mcfg, p, samples)
                .map_err(|e| hgrn::HgrnError::Contract(e.to_string()))?,
            ValData::Corpus(toks) => evaluate_ppl(&mcfg, p, toks, val_seq)?.0,
        };
        if loss < *best.borrow() {
            *best.borrow_mut() = loss;
            save_checkpoint(&best_path, &mcfg, p)?;
        }
        Ok(loss)
    };
    let mut print_rec = |rec: &MetricsRecord| {
        if !quiet {
            println!(
                "step {:>6}  train {:>9.4}  val {}  ppl {}  lr {:.3e}  {:>9.0} ms",
                rec.step,
                rec.train_loss,
                rec.val_loss.map_or("      - ".into(), |v| format!("{v:8.4}")),
                rec.val_ppl.map_or("      - ".into(), |v| format!("{v:8.2}")),
                rec.lr,
                rec.wall_ms
            );
        }
    };
    let records = train(
        &cfg.model,
        &cfg.train,
        &mut params,
        data.source.as_ref(),
        cfg.run.log_every,
        Some(&mut eval_fn),
        Some(&mut print_rec),
    )?;
    save_checkpoint(&dir.join("final.ckpt"), &cfg.model, &params)?;
    let mut csv = String::from(MetricsRecord::CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    let accuracy = match &data.val {
        ValData::Samples(samples) => Some(masked_accuracy(&cfg.model, &params, samples)?),
        ValData::Corpus(_) => None,
    };
    Ok(RunResult {
        params,
        records,
        accuracy,
    })
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let result = run_training::<T>(cfg, out, false)?;
    if let Some(acc) = result.accuracy {
        println!("final masked accuracy: {:.4}", acc);
    }
    if let Some(last) = result.records.last() {
        println!(
            "done: train loss {:.4}{}",
            last.train_loss,
            last.val_ppl
                .map_or(String::new(), |p| format!(", val ppl {p:.2}"))
        );
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(
    checkpoint: &Path,
    corpus: &Path,
    seq_len: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let (mcfg, params) = load_checkpoint::<T>(checkpoint)?;
    let (_, val) = load_byte_corpus(corpus, 0.0)?;
    let (loss, ppl) = evaluate_ppl(&mcfg, &params, &val, seq_len)?;
    println!("seq_len {seq_len}: loss {loss:.6} nats/token, ppl {ppl:.4}");
    std::fs::write(
        out.join("eval.csv"),
        format!("seq_len,loss,ppl\n{seq_len},{loss:.9},{ppl:.9}\n"),
    )?;
    Ok(())
}

fn cmd_extrapolate<T: Scalar>(
    checkpoint: &Path,
    corpus: &Path,
    lengths: &[usize],
    out: &Path,
) -> anyhow::Result<()> {
    if lengths.iter().any(|&l| l < 1) {
        bail!("lengths must be >= 1");
    }
    let (mcfg, params) = load_checkpoint::<T>(checkpoint)?;
    let (_, val) = load_byte_corpus(corpus, 0.0)?;
    let mut csv = String::from("length,loss,ppl\n");
    for &len in lengths {
        let (loss, ppl) = evaluate_ppl(&mcfg, &params, &val, len)?;
        println!("length {len:>6}: loss {loss:.6}, ppl {ppl:.4}");
        csv.push_str(&format!("{len},{loss:.9},{ppl:.9}\n"));
    }
    std::fs::write(out.join("extrapolate.csv"), csv)?;
    Ok(())
}

fn cmd_gate_stats<T: Scalar>(
    checkpoint: &Path,
    corpus: &Path,
    seq_len: usize,
    window_count: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let (mcfg, params) = load_checkpoint::<T>(checkpoint)?;
    let (_, toks) = load_byte_corpus(corpus, 0.0)?;
    if toks.len() < seq_len {
        bail!("corpus shorter than one window of {seq_len}");
    }
    let windows: Vec<Vec<usize>> = (0..window_count)
        .map(|i| (i * seq_len) % (toks.len() - seq_len + 1))
        .map(|s| toks[s..s + seq_len].to_vec())
        .collect();
    let stats = collect_gate_stats(&mcfg, &params, &windows)?;
    for l in &stats.layers {
        println!(
            "layer {}: mean {:.4}  median {:.4}  ({} values)",
            l.layer, l.mean, l.median, l.count
        );
    }
    std::fs::write(out.join("gate_stats.csv"), stats.to_csv())?;
    Ok(())
}

fn cmd_scan_bench(
    lengths: &[usize],
    dim: usize,
    repeats: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("length,sequential_ms,parallel_ms\n");
    for &n in lengths {
        let lambda = Tensor::<f64>::new(
            vec![n, dim],
            (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;
        let theta = Tensor::<f64>::uniform(vec![1, dim], 3.0, &mut rng);
        let decay = DecaySeq::new(lambda, theta)?;
        let c = ComplexSeq::new(
            Tensor::uniform(vec![n, dim], 1.0, &mut rng),
            Tensor::uniform(vec![n, dim], 1.0, &mut rng),
        )?;
        // numerical agreement gates the timing
        let hs = sequential_scan(&decay, &c, None)?;
        let hp = parallel_scan(&decay, &c)?;
        let mut max_diff = 0.0f64;
        for (a, b) in hs
            .re
            .data()
            .iter()
            .chain(hs.im.data())
            .zip(hp.re.data().iter().chain(hp.im.data()))
        {
            max_diff = max_diff.max((a - b).abs());
        }
        if max_diff > 1e-10 {
            bail!("scan paths disagree at n={n}: max diff {max_diff:.3e}");
        }
        let med = |f: &dyn Fn() -> ()| -> f64 {
            let mut times: Vec<f64> = (0..repeats.max(1))
                .map(|_| {
                    let t0 = Instant::now();
                    f();
                    t0.elapsed().as_secs_f64() * 1e3
                })
                .collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times[times.len() / 2]
        };
        let seq_ms = med(&|| {
            sequential_scan(&decay, &c, None).unwrap();
        });
        let par_ms = med(&|| {
            parallel_scan(&decay, &c).unwrap();
        });
        println!("n {n:>7}: sequential {seq_ms:.3} ms, parallel {par_ms:.3} ms");
        csv.push_str(&format!("{n},{seq_ms:.6},{par_ms:.6}\n"));
    }
    std::fs::write(out.join("scan_bench.csv"), csv)?;
    Ok(())
}

fn cmd_gradcheck(tolerance: f64) -> anyhow::Result<ExitCode> {
    let mcfg = ModelConfig {
        layers: 2,
        dim: 4,
        vocab_size: 11,
        glu_expansion: None,
        lower_bound_mode: LowerBoundMode::Monotone,
        use_complex: true,
        theta_data_dependent: false,
        input_gate: InputGateMode::Tied,
        use_output_gate: true,
        norm_eps: 1e-5,
        seq_len_max: 64,
    };
    let report = gradient_check_model::<f64>(&mcfg, 6, 0, tolerance)?;
    for (name, err) in &report.per_param {
        println!("{name:<28} max rel err {err:.3e}");
    }
    if report.passed() {
        println!("PASS (max relative error {:.3e})", report.max_error());
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAIL: {} parameters above tolerance {tolerance:.1e}: {:?}",
            report.failing().len(),
            report.failing()
        );
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_ablate<T: Scalar>(base: &RunConfig, suite: &str, out: &Path) -> anyhow::Result<()> {
    let variants: Vec<(&str, RunConfig)> = match suite {
        "lower_bound" => [
            ("monotone", LowerBoundMode::Monotone),
            ("none", LowerBoundMode::None),
            ("random", LowerBoundMode::Random),
            ("decreasing", LowerBoundMode::Decreasing),
            ("only", LowerBoundMode::Only),
        ]
        .into_iter()
        .map(|(name, mode)| {
            let mut cfg = base.clone();
            cfg.model.lower_bound_mode = mode;
            (name, cfg)
        })
        .collect(),
        "gates" => {
            let mut no_input = base.clone();
            no_input.model.input_gate = InputGateMode::One;
            let mut no_output = base.clone();
            no_output.model.use_output_gate = false;
            vec![
                ("full", base.clone()),
                ("no_input_gate", no_input),
                ("no_output_gate", no_output),
            ]
        }
        "complex" => {
            let mut real = base.clone();
            real.model.use_complex = false;
            let mut data_dep = base.clone();
            data_dep.model.theta_data_dependent = true;
            vec![
                ("complex", base.clone()),
                ("real", real),
                ("data_dependent_theta", data_dep),
            ]
        }
        other => bail!("unknown ablation suite {other:?} (lower_bound|gates|complex)"),
    };
    let mut csv = String::from("variant,train_loss,val_loss,accuracy,theta_toeplitz_dev\n");
    for (name, cfg) in &variants {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        let result = run_training::<T>(cfg, &dir, true)?;
        let last = result
            .records
            .last()
            .ok_or_else(|| anyhow!("no metrics recorded for {name}"))?;
        let dev = toeplitz_deviation_of_model(&cfg.model, &result.params)?;
        if *name == "data_dependent_theta" {
            // the whole point of this variant: relative-position structure breaks
            if dev.map_or(true, |d| d <= 1e-3) {
                bail!(
                    "data-dependent theta failed to break the Toeplitz structure (dev {dev:?})"
                );
            }
        }
        let acc = result
            .accuracy
            .map_or(String::new(), |a| format!("{a:.6}"));
        let dev_s = dev.map_or(String::new(), |d| format!("{d:.6e}"));
        println!(
            "{name:<22} train {:.4}  val {:.4}  acc {}  toeplitz_dev {}",
            last.train_loss,
            last.val_loss.unwrap_or(f64::NAN),
            if acc.is_empty() { "-" } else { &acc },
            if dev_s.is_empty() { "-" } else { &dev_s },
        );
        csv.push_str(&format!(
            "{name},{:.9},{:.9},{acc},{dev_s}\n",
            last.train_loss,
            last.val_loss.unwrap_or(f64::NAN),
        ));
    }
    std::fs::write(out.join(format!("ablate_{suite}.csv")), csv)?;
    Ok(())
}

/// Max Theta-diagonal deviation of layer 0, dim 0, on a short random
/// forward pass; None for real-valued models.
fn toeplitz_deviation_of_model<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
) -> anyhow::Result<Option<f64>> {
    if !mcfg.use_complex {
        return Ok(None);
    }
    let n = 24.min(mcfg.seq_len_max);
    let tokens: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % mcfg.vocab_size).collect();
    let decay = layer_decay_seq(mcfg, params, &tokens, 0)?;
    Ok(Some(theta_toeplitz_deviation(&decay, 0)?))
}

/// Runs a forward pass and reassembles one layer's decay sequence
/// (lambda and theta) for mixing-matrix materialization.
fn layer_decay_seq<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
    tokens: &[usize],
    layer: usize,
) -> anyhow::Result<DecaySeq<T>> {
    if layer >= mcfg.layers {
        bail!("layer {layer} out of range 0..{}", mcfg.layers);
    }
    if !mcfg.use_complex {
        bail!("mixing-matrix phase requires a complex-valued model");
    }
    let mut tape = Tape::<T>::new();
    let vars = bind_params(&mut tape, params, false);
    let out = model_forward(&mut tape, &vars, tokens, mcfg)?;
    let lambda = tape.value(out.lambdas[layer]).clone();
    let theta = tape
        .value(out.thetas[layer].ok_or_else(|| anyhow!("no theta recorded for layer {layer}"))?)
        .clone();
    Ok(DecaySeq::new(lambda, theta)?)
}

fn cmd_export_mixing<T: Scalar>(
    checkpoint: &Path,
    layer: usize,
    dims: &[usize],
    seq_len: usize,
    corpus: Option<&Path>,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    use rand::{Rng, SeedableRng};
    let (mcfg, params) = load_checkpoint::<T>(checkpoint)?;
    let tokens: Vec<usize> = match corpus {
        Some(path) => {
            let (_, toks) = load_byte_corpus(path, 0.0)?;
            if toks.len() < seq_len {
                bail!("corpus shorter than seq_len {seq_len}");
            }
            toks[..seq_len].to_vec()
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..seq_len)
                .map(|_| rng.gen_range(0..mcfg.vocab_size))
                .collect()
        }
    };
    let decay = layer_decay_seq(&mcfg, &params, &tokens, layer)?;
    for &dim in dims {
        let (lam_m, th_re, th_im) = hgrn::scan::mixing_matrix(&decay, dim, seq_len)?;
        let mut csv = String::from("t");
        for s in 0..seq_len {
            csv.push_str(&format!(",s{s}_re,s{s}_im"));
        }
        csv.push('\n');
        for t in 0..seq_len {
            csv.push_str(&t.to_string());
            for s in 0..seq_len {
                let m = lam_m.at2(t, s);
                csv.push_str(&format!(
                    ",{:.9},{:.9}",
                    (m * th_re.at2(t, s)).as_f64(),
                    (m * th_im.at2(t, s)).as_f64()
                ));
            }
            csv.push('\n');
        }
        let path = out.join(format!("mixing_layer{layer}_dim{dim}.csv"));
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
