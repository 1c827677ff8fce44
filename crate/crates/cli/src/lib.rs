//! Command implementations behind the `binarymos` binary.
//!
//! Every command is deterministic for a fixed `--seed`; `bench` timings are
//! the only output that varies between runs.

pub mod args;
pub mod runconfig;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use binarymos::checkpoint::{load_model, save_model, Checkpoint, DType};
use binarymos::kernels::{bench, BenchReport, KernelId, PackedBitMatrix, CSV_HEADER, PAPER_SHAPES};
use binarymos::memmodel::FootprintConfig;
use binarymos::train::{
    box_stats, distill, nll_total, pretrain, trace_projection, Scheme, ToyDecoder, TrainOutcome,
};
use binarymos::{Matrix, RngSeed};
use serde_json::{json, Value};

use crate::args::{
    BenchArgs, BinarizeArgs, Cli, Command, DistillArgs, EvalArgs, ExportArgs, FootprintArgs, RouterArgs,
};
use crate::runconfig::RunConfig;

pub const BUNDLED_7B: &str = include_str!("../specs/llama7b.spec");
pub const BUNDLED_13B: &str = include_str!("../specs/llama13b.spec");

/// Seed derivation shared by `binarize` and `distill`, so a zero-epoch
/// distillation reproduces `binarize` exactly.
const STUDENT_INIT_SALT: u64 = 3;

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let json = cli.json;
    match cli.command {
        Command::Footprint(a) => cmd_footprint(&a, json),
        Command::Binarize(a) => cmd_binarize(&a, seed.unwrap_or(0), json),
        Command::Distill(a) => cmd_distill(&a, seed, json),
        Command::Eval(a) => cmd_eval(&a, json),
        Command::Bench(a) => cmd_bench(&a, seed.unwrap_or(0), json),
        Command::RouterAnalyze(a) => cmd_router_analyze(&a, json),
        Command::Export(a) => cmd_export(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

/// The LLaMA-7B and 13B specs shipped with the binary, as one table.
pub fn bundled_footprint() -> Result<FootprintConfig> {
    let mut cfg = FootprintConfig::parse(BUNDLED_7B)?;
    let other = FootprintConfig::parse(BUNDLED_13B)?;
    cfg.models.extend(other.models);
    Ok(cfg)
}

pub fn cmd_footprint(a: &FootprintArgs, json: bool) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => FootprintConfig::load(p)?,
        None => bundled_footprint()?,
    };
    let table = cfg.table()?;
    let csv = table.to_csv();
    let text = table.to_text();
    if let Some(dir) = &a.out {
        write_file(&dir.join("footprint.csv"), &csv)?;
        write_file(&dir.join("footprint.txt"), &text)?;
    }
    match a.csv.as_deref() {
        Some(p) if p == Path::new("-") => print!("{csv}"),
        Some(p) => write_file(p, &csv)?,
        None => {}
    }
    let csv_on_stdout = a.csv.as_deref() == Some(Path::new("-"));
    if json {
        print_json(&serde_json::to_value(&table.rows)?);
    } else if !csv_on_stdout {
        print!("{text}");
    }
    Ok(())
}

fn relative_error(w: &Matrix, approx: &Matrix) -> f64 {
    let diff = w.sub(approx).expect("same projection shape");
    (diff.sum_sq() / w.sum_sq().max(f64::MIN_POSITIVE)).sqrt()
}

fn init_student(teacher: &ToyDecoder, scheme: Scheme, experts: usize, ratio: f64, seed: u64) -> Result<ToyDecoder> {
    let mut base = teacher.clone();
    base.config.salient_ratio = ratio;
    Ok(base.to_student(scheme, experts, RngSeed(seed).derive(STUDENT_INIT_SALT))?)
}

pub fn cmd_binarize(a: &BinarizeArgs, seed: u64, json: bool) -> Result<()> {
    let teacher = load_model(&a.checkpoint)?;
    let scheme: Scheme = a.scheme.parse()?;
    let student = init_student(&teacher, scheme, a.experts, a.salient_ratio, seed)?;
    let ck = save_model(&student, seed, &a.out)?;
    let deployed = ck.to_model()?;

    let mut csv = String::from("projection,n,m,rel_error\n");
    let mut errors = Vec::new();
    for i in 0..teacher.num_projections() {
        let w = &teacher.projection(i).expect("index in range").weight;
        let approx = deployed.projection(i).expect("same layout").reconstruction()?;
        let err = relative_error(w, &approx);
        errors.push(err);
        let _ = writeln!(csv, "{},{},{},{err:.6e}", ToyDecoder::projection_name(i), w.rows(), w.cols());
    }
    write_file(&a.out.join("reconstruction.csv"), &csv)?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    if json {
        print_json(&json!({
            "scheme": scheme,
            "experts": deployed.config.experts,
            "checkpoint": a.out,
            "mean_rel_error": mean,
            "rel_errors": errors,
        }));
    } else {
        println!(
            "{scheme} checkpoint written to {} (mean relative reconstruction error {mean:.4})",
            a.out.display()
        );
    }
    Ok(())
}

fn save_outcome(outcome: &TrainOutcome, dir: &Path, metrics: &Path) -> Result<()> {
    outcome.checkpoint.save(dir)?;
    write_file(metrics, outcome.metrics_jsonl())
}

pub fn cmd_distill(a: &DistillArgs, seed: Option<u64>, json: bool) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    if let Some(s) = seed {
        cfg.distill.seed = s;
    }
    if let Some(e) = a.experts {
        cfg.model.experts = e;
    }
    if let Some(n) = a.epochs {
        cfg.distill.epochs = n;
    }
    if let Some(s) = &a.scheme {
        cfg.model.scheme = s.parse()?;
    }
    cfg.model.validate()?;
    let (corpora, weights) = cfg.corpora(&base)?;

    for c in &corpora {
        if c.valid().len() >= 2 {
            write_file(&a.out.join("valid").join(format!("{}.txt", c.name())), c.valid())?;
        }
    }

    let teacher = if a.train_teacher {
        let mut tcfg = cfg.teacher.train.clone();
        tcfg.seed = cfg.distill.seed;
        let model_cfg = cfg.model.with_scheme(Scheme::Float, 1);
        eprintln!("pre-training teacher ({} epochs)", tcfg.epochs);
        let out = pretrain(&model_cfg, &tcfg, &corpora, &weights)?;
        save_outcome(&out, &a.out.join("teacher"), &a.out.join("teacher_metrics.jsonl"))?;
        eprintln!("teacher validation perplexity {:.4}", out.final_record.val_ppl);
        out.checkpoint.to_model()?
    } else {
        let path: PathBuf = match (&a.teacher, &cfg.teacher.path) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => base.join(p),
            (None, None) => bail!("no teacher: pass --teacher DIR, set teacher.path, or use --train-teacher"),
        };
        load_model(&path).with_context(|| format!("loading teacher {}", path.display()))?
    };

    eprintln!(
        "distilling {} student (e={}, {} epochs)",
        cfg.model.scheme, cfg.model.experts, cfg.distill.epochs
    );
    let out = distill(&teacher, &cfg.model, &cfg.distill, &corpora, &weights)?;
    save_outcome(&out, &a.out.join("student"), &a.out.join("metrics.jsonl"))?;
    let f = &out.final_record;
    if json {
        print_json(&serde_json::to_value(f)?);
    } else {
        println!(
            "student val ppl {:.4} (teacher {:.4}) after {} steps; checkpoint in {}",
            f.val_ppl,
            f.teacher_val_ppl.unwrap_or(f64::NAN),
            f.steps,
            a.out.join("student").display()
        );
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, json: bool) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let seq_len = a.seq_len.unwrap_or(model.config.seq_len);
    let mut nll = 0.0;
    let mut count = 0;
    for p in &a.text {
        let text = read_file(p)?;
        let (n, k) = nll_total(&model, &text, seq_len)?;
        nll += n;
        count += k;
    }
    ensure!(count > 0, "evaluation text needs at least two bytes");
    let ppl = (nll / count as f64).exp();
    if json {
        print_json(&json!({ "perplexity": ppl, "predictions": count, "nll": nll }));
    } else {
        println!("perplexity {ppl:.6} over {count} predictions");
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (n, m) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("shape '{s}' is not NxM"))?;
    let n: usize = n.trim().parse().with_context(|| format!("shape '{s}'"))?;
    let m: usize = m.trim().parse().with_context(|| format!("shape '{s}'"))?;
    ensure!(n > 0 && m > 0, "shape '{s}' has a zero dimension");
    Ok((n, m))
}

pub fn cmd_bench(a: &BenchArgs, seed: u64, json: bool) -> Result<()> {
    let kernels: Vec<KernelId> = if a.kernels.is_empty() {
        KernelId::ALL.to_vec()
    } else {
        a.kernels.iter().map(|k| k.parse()).collect::<binarymos::Result<_>>()?
    };
    let mut shapes: Vec<(usize, usize)> = Vec::new();
    if a.paper_shapes {
        shapes.extend(PAPER_SHAPES);
    }
    for s in &a.shapes {
        shapes.push(parse_shape(s)?);
    }
    if shapes.is_empty() {
        shapes.push((4096, 4096));
    }
    ensure!(
        a.reps >= binarymos::kernels::bench::MIN_REPS,
        "--reps must be at least {}",
        binarymos::kernels::bench::MIN_REPS
    );
    ensure!(
        a.warmup >= binarymos::kernels::bench::MIN_WARMUP,
        "--warmup must be at least {}",
        binarymos::kernels::bench::MIN_WARMUP
    );
    let mut reports: Vec<BenchReport> = Vec::new();
    for &(n, m) in &shapes {
        for &k in &kernels {
            let r = bench(k, n, m, a.experts, a.reps, a.warmup, RngSeed(seed))?;
            eprintln!("{k:>9} {n}x{m}: median {:.1} us", r.median_us);
            reports.push(r);
        }
    }
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None if !json => print!("{csv}"),
        None => {}
    }
    if json {
        print_json(&serde_json::to_value(&reports)?);
    }
    Ok(())
}

/// Path of the statistics file written next to the gate CSV.
pub fn stats_path(gates_csv: &Path) -> PathBuf {
    let stem = gates_csv.file_stem().and_then(|s| s.to_str()).unwrap_or("router");
    gates_csv.with_file_name(format!("{stem}.stats.csv"))
}

pub fn cmd_router_analyze(a: &RouterArgs, json: bool) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    ensure!(
        model.config.scheme == Scheme::Mos,
        "router analysis needs a mos checkpoint, got {}",
        model.config.scheme
    );
    let index = model.projection_index(&a.layer)?;
    let text = read_file(&a.text)?;
    let trace = trace_projection(&model, &text, index)?;
    let e = trace.gates.cols();

    let mut csv = String::from("token_index,byte");
    for g in 0..e {
        let _ = write!(csv, ",g{g}");
    }
    csv.push('\n');
    for (t, row) in trace.gates.row_iter().enumerate() {
        let _ = write!(csv, "{t},{}", text[t]);
        for g in row {
            let _ = write!(csv, ",{g:.17e}");
        }
        csv.push('\n');
    }
    write_file(&a.out, &csv)?;

    let mut stats = String::from(
        "scale,channel,count,mean,variance,min,q1,median,q3,max,whisker_low,whisker_high\n",
    );
    let mut variances = Vec::new();
    for (name, m) in [("s_in", &trace.s_in_hat), ("s_out", &trace.s_out_hat)] {
        for c in 0..a.channels.min(m.cols()) {
            let col: Vec<f64> = m.row_iter().map(|r| r[c]).collect();
            let b = box_stats(&col)?;
            variances.push(b.variance);
            let _ = writeln!(
                stats,
                "{name},{c},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                b.count, b.mean, b.variance, b.min, b.q1, b.median, b.q3, b.max, b.whisker_low, b.whisker_high
            );
        }
    }
    let stats_file = stats_path(&a.out);
    write_file(&stats_file, &stats)?;

    let gate_means: Vec<f64> = trace
        .gates
        .col_sums()
        .into_iter()
        .map(|s| s / trace.gates.rows() as f64)
        .collect();
    let max_variance = variances.iter().copied().fold(0.0, f64::max);
    if json {
        print_json(&json!({
            "projection": ToyDecoder::projection_name(index),
            "tokens": trace.gates.rows(),
            "gate_means": gate_means,
            "max_channel_variance": max_variance,
            "gates_csv": a.out,
            "stats_csv": stats_file,
        }));
    } else {
        println!(
            "{}: {} tokens, mean gates {:?}, max per-channel scale variance {max_variance:.3e}",
            ToyDecoder::projection_name(index),
            trace.gates.rows(),
            gate_means.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}

fn tensor_json(ck: &Checkpoint, name: &str) -> Result<Value> {
    let t = ck.tensor(name).with_context(|| format!("no tensor named '{name}'"))?;
    let raw = &ck.payload[t.offset as usize..(t.offset + t.nbytes) as usize];
    let body = match t.dtype {
        DType::F32 => json!({ "values": ck.f32_values(name)? }),
        DType::U8 => json!({ "values": raw }),
        DType::PackedBits => {
            let words: Vec<u64> = raw
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let bits = PackedBitMatrix::from_words(t.shape[0], t.shape[1], words)?;
            let rows: Vec<String> = (0..bits.rows())
                .map(|i| (0..bits.cols()).map(|j| if bits.get(i, j) { '1' } else { '0' }).collect())
                .collect();
            json!({ "bits": rows })
        }
    };
    let mut v = json!({ "name": t.name, "dtype": t.dtype, "shape": t.shape });
    v.as_object_mut()
        .expect("object literal")
        .extend(body.as_object().expect("object literal").clone());
    Ok(v)
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let tensors: Vec<Value> = match &a.tensor {
        Some(name) => vec![tensor_json(&ck, name)?],
        None => ck
            .manifest
            .tensors
            .iter()
            .map(|t| tensor_json(&ck, &t.name))
            .collect::<Result<_>>()?,
    };
    let doc = json!({
        "format": ck.manifest.format,
        "version": ck.manifest.version,
        "scheme": ck.manifest.scheme,
        "experts": ck.manifest.experts,
        "seed": ck.manifest.seed,
        "config": ck.manifest.config,
        "tensors": tensors,
    });
    let text = serde_json::to_string(&doc)?;
    match &a.out {
        Some(p) => write_file(p, text + "\n"),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
            Ok(())
        }
    }
}
