//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Set `BINARYMOS_SKIP_LATENCY=1` to skip the latency ordering check on a
//! busy machine. Criteria 6, 8 and 9 train desk-scale models through the
//! `binarymos` binary and take several minutes.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use binarymos::binarize::{
    binarize_absmean, fit_dual_scales, fit_dual_scales_traced, reconstruction_error, residual_binarize, static_forward,
};
use binarymos::kernels::{bench, fused_mos_gemv, KernelId, PackedBitMatrix};
use binarymos::memmodel::{mos_extra_params, CompressionTable};
use binarymos::mos::{init_from_pretrained_with_jitter, mos_forward, router_gate, MoSLinear, INIT_ALS_SWEEPS};
use binarymos::train::{ce_distill_loss, distill_step_grads, l2l_loss, total_loss, Scheme, ToyDecoder, ToyDecoderConfig};
use binarymos::{Matrix, RngSeed};

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
}

/// Deterministic size in `lo..=hi` for case `i` of stream `salt`.
fn size(i: u64, salt: u64, lo: usize, hi: usize) -> usize {
    let h = (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    lo + (h >> 33) as usize % (hi - lo + 1)
}

fn randn(rows: usize, cols: usize, std: f64, seed: RngSeed) -> Matrix {
    Matrix::random_normal(rows, cols, std, &mut seed.rng())
}

fn positive(rows: usize, cols: usize, seed: RngSeed) -> Matrix {
    Matrix::random_uniform(rows, cols, 0.05, 2.0, &mut seed.rng())
}

// ---------------------------------------------------------------- 1 and 2

const TABLE: [(&str, &str, f64, f64); 10] = [
    // model, method, published GB, tolerance as a fraction
    ("LLaMA-7B", "float16", 13.51, 0.02),
    ("LLaMA-13B", "float16", 26.20, 0.02),
    ("LLaMA-7B", "onebit", 1.37, 0.02),
    ("LLaMA-13B", "onebit", 2.29, 0.02),
    ("LLaMA-7B", "binarymos", 1.40, 0.02),
    ("LLaMA-13B", "binarymos", 2.33, 0.02),
    ("LLaMA-7B", "pbllm", 2.78, 0.10),
    ("LLaMA-13B", "pbllm", 5.02, 0.10),
    ("LLaMA-7B", "billm", 2.28, 0.10),
    ("LLaMA-13B", "billm", 4.06, 0.10),
];

const RATIOS: [(&str, &str, f64); 4] = [
    ("LLaMA-7B", "onebit", 9.86),
    ("LLaMA-13B", "onebit", 11.44),
    ("LLaMA-7B", "binarymos", 9.65),
    ("LLaMA-13B", "binarymos", 11.24),
];

fn bundled_table() -> Result<CompressionTable, String> {
    binarymos_cli::bundled_footprint()
        .and_then(|c| Ok(c.table()?))
        .map_err(|e| e.to_string())
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let table = bundled_table()?;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (model, method, gb, tol) in TABLE {
        let row = table.get(model, method).ok_or(format!("missing {model}/{method}"))?;
        let dev = (row.gigabytes / gb - 1.0).abs();
        worst = worst.max(dev / tol);
        if dev > tol {
            failures.push(format!("{model}/{method} {:.3} GB vs {gb}", row.gigabytes));
        }
    }
    for (model, method, ratio) in RATIOS {
        let row = table.get(model, method).ok_or(format!("missing {model}/{method}"))?;
        if (row.ratio - ratio).abs() > 0.2 {
            failures.push(format!("{model}/{method} ratio {:.3} vs {ratio}", row.ratio));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        failures.push(format!("took {secs:.2} s"));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("20 table cells in tolerance, worst at {:.0}% of its band, {secs:.3} s", worst * 100.0)
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let table = bundled_table()?;
    let mut ratios = Vec::new();
    for model in ["LLaMA-7B", "LLaMA-13B"] {
        let mos = table.get(model, "binarymos").ok_or("missing binarymos row")?.bytes;
        let one = table.get(model, "onebit").ok_or("missing onebit row")?.bytes;
        ratios.push(mos / one);
    }
    let extra = mos_extra_params(4096, 4096, 4);
    // (e − 1)(n + m) expert entries plus m·e router weights
    let oracle = 3 * (4096 + 4096) + 4096 * 4;
    let share = extra as f64 / (4096.0 * 4096.0) * 100.0;
    let secs = start.elapsed().as_secs_f64();
    check(
        ratios.iter().all(|&r| r <= 1.02) && extra == 40_960 && extra == oracle && secs < 1.0,
        format!(
            "binarymos/onebit bytes {:.4} (7B), {:.4} (13B); extra params {extra} = {share:.3}%",
            ratios[0], ratios[1]
        ),
    )
}

// ---------------------------------------------------------------- 3

/// `y = x · Wᵀ` by explicit loops.
fn dense_apply(x: &Matrix, w: &Matrix) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.rows() * w.rows());
    for t in 0..x.rows() {
        for i in 0..w.rows() {
            y.push((0..w.cols()).map(|j| x.get(t, j) * w.get(i, j)).sum());
        }
    }
    y
}

fn sign_of(b: &PackedBitMatrix, i: usize, j: usize) -> f64 {
    if b.get(i, j) {
        1.0
    } else {
        -1.0
    }
}

/// Per-token dense reconstruction of a MoS layer, from the definition.
fn mos_oracle(x: &Matrix, layer: &MoSLinear) -> Vec<f64> {
    let (n, m, e) = (layer.out_features(), layer.in_features(), layer.num_experts());
    let mut y = Vec::new();
    for t in 0..x.rows() {
        let logits: Vec<f64> = (0..e)
            .map(|k| (0..m).map(|j| x.get(t, j) * layer.router_w.get(j, k)).sum())
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let g: Vec<f64> = exps.iter().map(|v| v / z).collect();
        let s_in: Vec<f64> = (0..m).map(|j| (0..e).map(|k| g[k] * layer.s_in_experts.get(k, j)).sum()).collect();
        let s_out: Vec<f64> = (0..n).map(|i| (0..e).map(|k| g[k] * layer.s_out_experts.get(k, i)).sum()).collect();
        for i in 0..n {
            let acc: f64 = (0..m).map(|j| s_out[i] * sign_of(&layer.signs, i, j) * s_in[j] * x.get(t, j)).sum();
            y.push(acc);
        }
    }
    y
}

fn random_mos(n: usize, m: usize, e: usize, seed: RngSeed) -> MoSLinear {
    MoSLinear::new(
        PackedBitMatrix::sign_of(&randn(n, m, 1.0, seed.derive(1))),
        positive(e, m, seed.derive(2)),
        positive(e, n, seed.derive(3)),
        randn(m, e, 0.7, seed.derive(4)),
    )
    .expect("consistent shapes")
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    const CASES: u64 = 200;
    let (mut worst_a, mut worst_b, mut worst_c) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..CASES {
        let (n, m, k) = (size(i, 1, 1, 70), size(i, 2, 1, 150), size(i, 3, 1, 6));
        let seed = RngSeed(1000 + i);
        let x = randn(k, m, 1.0, seed.derive(9));

        let w = randn(n, m, 1.0, seed);
        let dual = fit_dual_scales(&w, 5).map_err(|e| e.to_string())?;
        let mut dense = Matrix::zeros(n, m);
        for r in 0..n {
            for c in 0..m {
                dense.set(r, c, dual.s_out[r] * sign_of(&dual.signs, r, c) * dual.s_in[c]);
            }
        }
        let factored = static_forward(&dual, &x).map_err(|e| e.to_string())?;
        worst_a = worst_a.max(rel_err(factored.data(), &dense_apply(&x, &dense)));

        let layer = random_mos(n, m, size(i, 4, 1, 6), seed.derive(5));
        let fused = mos_forward(&x, &layer).map_err(|e| e.to_string())?;
        worst_b = worst_b.max(rel_err(fused.data(), &mos_oracle(&x, &layer)));

        let x32: Vec<f32> = x.row(0).iter().map(|&v| v as f32).collect();
        let x_rounded = Matrix::row_vector(&x32.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let single = fused_mos_gemv(&x32, &layer).map_err(|e| e.to_string())?;
        let double = mos_forward(&x_rounded, &layer).map_err(|e| e.to_string())?;
        let single: Vec<f64> = single.iter().map(|&v| v as f64).collect();
        worst_c = worst_c.max(rel_err(&single, double.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_a <= 1e-10 && worst_b <= 1e-10 && worst_c <= 1e-5 && secs < 30.0,
        format!(
            "{CASES} cases each; worst rel err factored/dense {worst_a:.1e}, mos/per-token {worst_b:.1e}, \
             f32 fused/f64 {worst_c:.1e}; {secs:.1} s"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut grid_failures = 0;
    for s in 0..100u64 {
        let seed = RngSeed(2000 + s);
        let mut w = randn(6, 41, 1.0, seed);
        let shift = randn(6, 1, 2.0, seed.derive(1));
        for r in 0..6 {
            let mu = shift.get(r, 0);
            w.row_mut(r).iter_mut().for_each(|v| *v += mu);
        }
        let layer = binarize_absmean(&w).map_err(|e| e.to_string())?;
        for r in 0..6 {
            let mu = layer.offset[r];
            let signs: Vec<f64> = (0..41).map(|c| sign_of(&layer.signs, r, c)).collect();
            let err = |a: f64| -> f64 { w.row(r).iter().zip(&signs).map(|(v, s)| (v - mu - a * s).powi(2)).sum() };
            let top = w.row(r).iter().map(|v| (v - mu).abs()).fold(0.0, f64::max) * 2.0;
            let best_grid = (0..1000).map(|k| err(top * k as f64 / 999.0)).fold(f64::INFINITY, f64::min);
            if err(layer.alpha[r]) > best_grid * (1.0 + 1e-12) {
                grid_failures += 1;
            }
        }
    }

    let mut residual_failures = 0;
    for s in 0..50u64 {
        let w = randn(12, 37, 1.0, RngSeed(3000 + s));
        let res = residual_binarize(&w).map_err(|e| e.to_string())?;
        let abs = binarize_absmean(&w).map_err(|e| e.to_string())?;
        if reconstruction_error(&res, &w) > reconstruction_error(&abs, &w) * (1.0 + 1e-12) {
            residual_failures += 1;
        }
    }

    let mut als_failures = 0;
    let mut worst_rank1 = 0.0f64;
    for s in 0..50u64 {
        let seed = RngSeed(4000 + s);
        let w = randn(9, 23, 1.0, seed);
        let (_, objectives) = fit_dual_scales_traced(&w, 15).map_err(|e| e.to_string())?;
        if objectives.windows(2).any(|p| p[1] > p[0] * (1.0 + 1e-12) + 1e-15) {
            als_failures += 1;
        }
        let a = positive(9, 1, seed.derive(1));
        let b = positive(1, 23, seed.derive(2));
        let signs = randn(9, 23, 1.0, seed.derive(3));
        let mut rank1 = Matrix::zeros(9, 23);
        for r in 0..9 {
            for c in 0..23 {
                let sg = if signs.get(r, c) >= 0.0 { 1.0 } else { -1.0 };
                rank1.set(r, c, sg * a.get(r, 0) * b.get(0, c));
            }
        }
        let fit = fit_dual_scales(&rank1, 10).map_err(|e| e.to_string())?;
        let err = reconstruction_error(&fit, &rank1) / rank1.sum_sq();
        worst_rank1 = worst_rank1.max(err.sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        grid_failures == 0 && residual_failures == 0 && als_failures == 0 && worst_rank1 <= 1e-10 && secs < 60.0,
        format!(
            "grid losses {grid_failures}/600 rows, residual > absmean {residual_failures}/50, \
             ALS increases {als_failures}/50, rank-1 rel err {worst_rank1:.1e}; {secs:.1} s"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn fd_config(scheme: Scheme) -> ToyDecoderConfig {
    ToyDecoderConfig {
        vocab: 256,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 12,
        seq_len: 6,
        scheme,
        experts: 4,
        salient_ratio: 0.1,
    }
}

fn fd_loss(student: &ToyDecoder, teacher: &ToyDecoder, inputs: &[&[u8]], lambda: f64) -> f64 {
    let t = teacher.forward(inputs).expect("forward");
    let st = student.forward(inputs).expect("forward");
    let ce = ce_distill_loss(&t.logits, &st.logits).expect("ce");
    let l2l = l2l_loss(&t.hiddens, &st.hiddens).expect("l2l");
    total_loss(ce, l2l, lambda)
}

fn criterion_5() -> Verdict {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let teacher = ToyDecoder::new(&fd_config(Scheme::Float), RngSeed(51)).map_err(|e| e.to_string())?;
    // start the student away from the teacher so every gradient is non-trivial
    let mut shifted = teacher.clone();
    let noise = ToyDecoder::new(&fd_config(Scheme::Float), RngSeed(52)).map_err(|e| e.to_string())?;
    for (p, q) in shifted.params_mut().into_iter().zip(noise.params()) {
        p.axpy(0.3, q.1).map_err(|e| e.to_string())?;
    }
    let mut student = shifted.to_student(Scheme::Mos, 4, RngSeed(53)).map_err(|e| e.to_string())?;
    let routers: Vec<usize> = student
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.ends_with(".router"))
        .map(|(i, _)| i)
        .collect();
    for (k, &i) in routers.iter().enumerate() {
        let p = &mut student.params_mut()[i];
        let (r, c) = p.shape();
        **p = randn(r, c, 0.5, RngSeed(60 + k as u64));
    }

    let inputs: [&[u8]; 2] = [b"binary", b"scales"];
    let lambda = 10.0;
    let (_, _, grads) = distill_step_grads(&student, &teacher, &inputs, lambda).map_err(|e| e.to_string())?;
    let names: Vec<String> = student.params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Matrix> = grads.params().into_iter().map(|(_, m)| m.clone()).collect();
    let used: Vec<usize> = inputs.concat().into_iter().map(usize::from).collect();
    let mut probe = student.clone();
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    for (pi, name) in names.iter().enumerate() {
        if name.ends_with(".weight") {
            continue;
        }
        let cols = analytic[pi].cols();
        let len = analytic[pi].data().len();
        let idx: Vec<usize> = if name == "tok_emb" {
            used.iter().flat_map(|&t| (0..cols).map(move |j| t * cols + j)).collect()
        } else {
            (0..len).step_by((len / 120).max(1)).collect()
        };
        let (mut diff, mut norm) = (0.0, 0.0);
        for &j in &idx {
            let orig = probe.params_mut()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + STEP;
            let up = fd_loss(&probe, &teacher, &inputs, lambda);
            probe.params_mut()[pi].data_mut()[j] = orig - STEP;
            let down = fd_loss(&probe, &teacher, &inputs, lambda);
            probe.params_mut()[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = analytic[pi].data()[j];
            diff += (fd - an) * (fd - an);
            norm += fd.abs().max(an.abs()).powi(2);
        }
        if norm == 0.0 {
            return Err(format!("{name} has an identically zero gradient"));
        }
        let rel = (diff / norm).sqrt();
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
        tensors += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-4 && secs < 120.0,
        format!(
            "{tensors} smooth tensors of a 2-layer e=4 student; worst rel err {:.1e} ({}); {secs:.1} s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 6, 8, 9

const SEEDS: [u64; 3] = [0, 1, 2];

fn workdir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml")
}

fn binarymos(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_binarymos"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn student_run(experts: usize, seed: u64, tag: &str) -> Result<PathBuf, String> {
    let dir = workdir().join(format!("e{experts}-s{seed}{tag}"));
    let teacher = workdir().join("teacher-run/teacher");
    binarymos(&[
        "distill", "--config", p(&desk_config()), "--teacher", p(&teacher), "--experts", &experts.to_string(),
        "--seed", &seed.to_string(), "--out", p(&dir),
    ])?;
    Ok(dir)
}

fn final_ppl(run: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(run.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    let last: serde_json::Value = serde_json::from_str(text.lines().last().ok_or("empty metrics")?)
        .map_err(|e| e.to_string())?;
    last["val_ppl"].as_f64().ok_or_else(|| "no val_ppl".to_string())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let _ = std::fs::remove_dir_all(workdir());
    binarymos(&[
        "distill", "--config", p(&desk_config()), "--train-teacher", "--epochs", "0", "--out",
        p(&workdir().join("teacher-run")),
    ])?;
    let mut ppl = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        for (slot, e) in [(0, 1), (1, 4)] {
            ppl[slot].push(final_ppl(&student_run(e, seed, "")?)?);
        }
    }
    let per_seed = format!("e=1 {:.4?}, e=4 {:.4?}", ppl[0], ppl[1]);
    let (m1, m4) = (median(&mut ppl[0]), median(&mut ppl[1]));
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(
        m4 < m1 && mins <= 30.0,
        format!("median val ppl e=4 {m4:.4} vs e=1 {m1:.4} over seeds {SEEDS:?} ({per_seed}); {mins:.1} min"),
    )
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let (n, m) = (4096, 4096);
    let median = |k: KernelId| -> Result<f64, String> {
        bench(k, n, m, 4, 30, 5, RngSeed(0)).map(|r| r.median_us).map_err(|e| e.to_string())
    };
    let dense = median(KernelId::Dense)?;
    let onebit = median(KernelId::OneBit)?;
    let mos = median(KernelId::BinaryMoS)?;
    let pbllm = median(KernelId::PbLlm)?;
    let billm = median(KernelId::BiLlm)?;
    let secs = start.elapsed().as_secs_f64();
    check(
        mos <= 1.25 * onebit && onebit < dense && pbllm > onebit.max(mos).max(billm) && secs < 300.0,
        format!(
            "median us dense {dense:.0}, onebit {onebit:.0}, binarymos {mos:.0} ({:.3}x), billm {billm:.0}, \
             pbllm {pbllm:.0}; {secs:.0} s",
            mos / onebit
        ),
    )
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let mut worst_sum = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for i in 0..100u64 {
        let (k, m, e) = (size(i, 5, 1, 20), size(i, 6, 1, 80), size(i, 7, 1, 8));
        let x = randn(k, m, 3.0, RngSeed(5000 + i));
        let g = router_gate(&x, &randn(m, e, 2.0, RngSeed(6000 + i))).map_err(|e| e.to_string())?;
        for row in g.0.row_iter() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let u = router_gate(&x, &Matrix::zeros(m, e)).map_err(|e| e.to_string())?;
        for v in u.0.data() {
            worst_uniform = worst_uniform.max((v - 1.0 / e as f64).abs());
        }
    }
    let mut worst_e1 = 0.0f64;
    for i in 0..50u64 {
        let (n, m) = (size(i, 8, 1, 40), size(i, 9, 1, 90));
        let w = randn(n, m, 1.0, RngSeed(7000 + i));
        let x = randn(4, m, 1.0, RngSeed(8000 + i));
        let dual = fit_dual_scales(&w, INIT_ALS_SWEEPS).map_err(|e| e.to_string())?;
        let reference = static_forward(&dual, &x).map_err(|e| e.to_string())?;
        let wrapped = mos_forward(&x, &MoSLinear::from_dual(&dual)).map_err(|e| e.to_string())?;
        let fresh = init_from_pretrained_with_jitter(&w, 1, RngSeed(i), 0.0).map_err(|e| e.to_string())?;
        let fresh = mos_forward(&x, &fresh).map_err(|e| e.to_string())?;
        worst_e1 = worst_e1
            .max(rel_err(wrapped.data(), reference.data()))
            .max(rel_err(fresh.data(), reference.data()));
    }
    let unit_secs = start.elapsed().as_secs_f64();

    let run = workdir().join("e4-s0");
    let student = run.join("student");
    if !student.join("manifest.json").exists() {
        return Err("no trained e=4 checkpoint (criterion 6 did not produce one)".into());
    }
    let text = std::fs::read_dir(run.join("valid"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .min()
        .ok_or("no validation text")?;
    let gates_csv = workdir().join("router/gates.csv");
    binarymos(&[
        "router-analyze", "--checkpoint", p(&student), "--text", p(&text), "--layer", "blocks.0.q", "--out",
        p(&gates_csv),
    ])?;
    let stats = std::fs::read_to_string(binarymos_cli::stats_path(&gates_csv)).map_err(|e| e.to_string())?;
    let max_var = stats
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(4)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    check(
        worst_sum <= 1e-12 && worst_uniform <= 1e-12 && worst_e1 <= 1e-10 && max_var > 0.0 && unit_secs < 30.0,
        format!(
            "gate row sum err {worst_sum:.1e}, zero-router uniform err {worst_uniform:.1e}, e=1 vs dual \
             {worst_e1:.1e}, trained max per-token scale variance {max_var:.3e}; {unit_secs:.1} s"
        ),
    )
}

fn criterion_9() -> Verdict {
    let first = workdir().join("e4-s0");
    if !first.join("metrics.jsonl").exists() {
        return Err("no criterion-6 run to repeat".into());
    }
    let again = student_run(4, 0, "-rerun")?;
    let mut differing = Vec::new();
    for f in ["student/manifest.json", "student/tensors.bin", "metrics.jsonl"] {
        let a = std::fs::read(first.join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(again.join(f)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(f);
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            "seed-0 e=4 rerun: checkpoint and metrics log bit-identical".into()
        } else {
            format!("differs: {differing:?}")
        },
    )
}

fn main() {
    let skip_latency = std::env::var("BINARYMOS_SKIP_LATENCY").is_ok_and(|v| !v.is_empty() && v != "0");
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "memory model matches the published footprint table", criterion_1),
        (2, "mixture-of-scales overhead over one-bit storage", criterion_2),
        (3, "factored, fused and per-token forms agree", criterion_3),
        (4, "scale fits are optimal against oracles", criterion_4),
        (5, "reverse-mode gradients match finite differences", criterion_5),
        (6, "four experts beat one at desk scale", criterion_6),
        (7, "kernel latency ordering", criterion_7),
        (8, "router behavior", criterion_8),
        (9, "training is bit-reproducible", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if id == 7 && skip_latency {
            println!("SKIP [{id}] {name}: BINARYMOS_SKIP_LATENCY is set");
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS [{id}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
