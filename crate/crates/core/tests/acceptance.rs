//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tokgen_core::backbone::{encode_text, hr_forward, log_likelihood, lr_forward_with_hidden, upsample_context};
use tokgen_core::checkpoint::{load_checkpoint, save_checkpoint};
use tokgen_core::eval::{chance_alignment, eval_alignment, run_ablation, AblationPlan, Generator, VARIANTS};
use tokgen_core::gradcheck::{grad_check, tiny_config, LossTerm, DEFAULT_TOLERANCE};
use tokgen_core::latent::{film_params, kl_loss, prefix_embed};
use tokgen_core::metric::{adaptive_bandwidth, kernel_regress};
use tokgen_core::synth::{
    generate_ambiguous_benchmark, generate_dataset, Example, PromptSpec, Resolution, TokenGrid, NUM_COLORS,
};
use tokgen_core::trainer::{draw_noise, evaluate_batch, train, write_metrics, LossWeights, TrainConfig};
use tokgen_core::{Mat, Model, ModelConfig, ParamGroup, Trainer32};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn random_grid(rng: &mut ChaCha8Rng, res: Resolution) -> TokenGrid {
    let cells = (0..res.cells()).map(|_| rng.random_range(0..NUM_COLORS as u8)).collect();
    TokenGrid::new(res, cells).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng) -> PromptSpec {
    generate_dataset(1, rng.random(), 0.5).unwrap().remove(0).prompt
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let batch = generate_dataset(4, 3, 0.5).unwrap();
    let report = grad_check(&tiny_config(), &batch, DEFAULT_TOLERANCE, 0).unwrap();
    let elapsed = start.elapsed();
    let covered = LossTerm::ALL.iter().all(|t| report.entries.iter().any(|e| e.loss == *t));
    let worst = report
        .entries
        .iter()
        .filter(|e| !e.frozen)
        .map(|e| e.max_rel_error)
        .fold(0.0f64, f64::max);
    let failing: Vec<String> =
        report.entries.iter().filter(|e| !e.passed).map(|e| format!("{}/{}", e.loss.name(), e.group)).collect();
    outcome(
        report.passed && covered && elapsed < Duration::from_secs(120),
        format!("worst rel err {worst:.2e}, failing {failing:?}, {:.1}s", elapsed.as_secs_f64()),
    )
}

/// `E_q[log q(c) − log p(c)]` over `n` draws, per dimension.
fn kl_monte_carlo(mu: &[f64], log_var: &[f64], n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    for (&m, &lv) in mu.iter().zip(log_var) {
        let s = (0.5 * lv).exp();
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            let c = m + s * e;
            // log N(c; m, s²) − log N(c; 0, 1); the 2π terms cancel
            acc += -0.5 * lv - 0.5 * e * e + 0.5 * c * c;
        }
        total += acc / n as f64;
    }
    total
}

fn kl_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let closed = kl_loss(&mu, &lv).unwrap();
        let mc = kl_monte_carlo(&mu, &lv, 1_000_000, &mut rng);
        worst = worst.max((closed - mc).abs() / closed.abs());
    }
    let zero = kl_loss(&[0.0f64; 8], &[0.0; 8]).unwrap();
    let elapsed = start.elapsed();
    outcome(
        worst <= 0.01 && zero == 0.0 && elapsed < Duration::from_secs(60),
        format!("worst rel gap {worst:.2e}, KL(0,0) = {zero}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn naive_regress(z: &[[f64; 2]], y: &[f64], h: f64) -> Vec<f64> {
    let n = z.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            if i != j {
                let d2 = (z[i][0] - z[j][0]).powi(2) + (z[i][1] - z[j][1]).powi(2);
                let w = (-d2 / (2.0 * h * h)).exp();
                num += w * y[j];
                den += w;
            }
        }
        out[i] = num / den;
    }
    out
}

fn to_mat(z: &[[f64; 2]]) -> Mat<f64> {
    Mat::from_vec(z.len(), 2, z.iter().flatten().copied().collect())
}

fn kernel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut oracle_gap, mut inv_gap) = (0.0f64, 0.0f64);
    let mut convex = true;
    for b in 0..100 {
        let n = rng.random_range(2..=64);
        let z: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let h = if b % 2 == 0 { adaptive_bandwidth(&to_mat(&z)).unwrap() } else { rng.random_range(0.1..2.0) };
        let (yhat, _) = kernel_regress(&to_mat(&z), &y, h).unwrap();
        for (a, o) in yhat.iter().zip(naive_regress(&z, &y, h)) {
            oracle_gap = oracle_gap.max((a - o).abs());
        }
        for i in 0..n {
            let others = y.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v);
            let lo = others.clone().fold(f64::INFINITY, f64::min);
            let hi = others.fold(f64::NEG_INFINITY, f64::max);
            convex &= yhat[i] >= lo - 1e-15 && yhat[i] <= hi + 1e-15;
        }
        let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let shifted: Vec<[f64; 2]> = z.iter().map(|p| [p[0] + t[0], p[1] + t[1]]).collect();
        let alpha = rng.random_range(0.25..4.0);
        let scaled: Vec<[f64; 2]> = z.iter().map(|p| [p[0] * alpha, p[1] * alpha]).collect();
        let (ys, _) = kernel_regress(&to_mat(&shifted), &y, h).unwrap();
        let (ya, _) = kernel_regress(&to_mat(&scaled), &y, alpha * h).unwrap();
        for i in 0..n {
            inv_gap = inv_gap.max((ys[i] - yhat[i]).abs()).max((ya[i] - yhat[i]).abs());
        }
    }
    outcome(
        oracle_gap <= 1e-12 && inv_gap <= 1e-12 && convex,
        format!("oracle gap {oracle_gap:.1e}, invariance gap {inv_gap:.1e}, convex {convex}"),
    )
}

/// Sum of teacher-forced log-probabilities computed from the stage logits.
fn sequence_log_prob(model: &Model<f64>, ex: &Example, c: &[f64]) -> f64 {
    let e_t = encode_text(model, &ex.prompt.tokens).unwrap();
    let prefix = prefix_embed(model, c).unwrap();
    let (lr_logits, hidden) = lr_forward_with_hidden(model, &e_t, &prefix, &ex.lr).unwrap();
    let film = film_params(model, c).unwrap();
    let hr_logits = hr_forward(model, &ex.hr, &upsample_context(&hidden).unwrap(), Some(&film)).unwrap();
    let mut total = 0.0;
    for (logits, grid) in [(&lr_logits, &ex.lr), (&hr_logits, &ex.hr)] {
        for (i, &t) in grid.cells().iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += row[t as usize] - lse;
        }
    }
    total
}

fn additivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model: Model<f64> = Model::new(ModelConfig::tiny(), 4).unwrap();
    model.perturb(5, 0.3);
    let (mut split_gap, mut oracle_gap) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let prompt = random_prompt(&mut rng);
        let ex = Example {
            interpretation: prompt.interpretations[0],
            prompt,
            lr: random_grid(&mut rng, Resolution::Low),
            hr: random_grid(&mut rng, Resolution::High),
        };
        let c: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = log_likelihood(&model, &ex.lr, &ex.hr, &ex.prompt, Some(&c)).unwrap();
        split_gap = split_gap.max((r.log_p_total - (r.log_p_lr + r.log_p_hr)).abs());
        oracle_gap = oracle_gap.max((r.log_p_total - sequence_log_prob(&model, &ex, &c)).abs());
    }
    let fresh: Model<f64> = Model::new(ModelConfig::default(), 0).unwrap();
    let ex = &generate_dataset(1, 9, 0.0).unwrap()[0];
    let nll = -log_likelihood(&fresh, &ex.lr, &ex.hr, &ex.prompt, None).unwrap().log_p_total;
    let uniform = 80.0 * 8f64.ln();
    outcome(
        split_gap <= 1e-12 && oracle_gap <= 1e-12 && (nll - uniform).abs() <= 1e-6,
        format!(
            "split gap {split_gap:.1e}, logits-oracle gap {oracle_gap:.1e}, untrained NLL {nll:.6} vs {uniform:.6}"
        ),
    )
}

fn stage_logits(model: &Model<f32>, prompt: &PromptSpec, lr: &TokenGrid, hr: &TokenGrid, c: &[f32]) -> (Mat<f32>, Mat<f32>) {
    let e_t = encode_text(model, &prompt.tokens).unwrap();
    let prefix = prefix_embed(model, c).unwrap();
    let (lr_logits, hidden) = lr_forward_with_hidden(model, &e_t, &prefix, lr).unwrap();
    let film = film_params(model, c).unwrap();
    let hr_logits = hr_forward(model, hr, &upsample_context(&hidden).unwrap(), Some(&film)).unwrap();
    (lr_logits, hr_logits)
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model: Model<f32> = Model::new(ModelConfig::default(), 6).unwrap();
    model.perturb(7, 0.1);
    let mut violations = 0;
    for _ in 0..1000 {
        let prompt = random_prompt(&mut rng);
        let lr = random_grid(&mut rng, Resolution::Low);
        let hr = random_grid(&mut rng, Resolution::High);
        let c: Vec<f32> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (base_lr, base_hr) = stage_logits(&model, &prompt, &lr, &hr, &c);
        let high = rng.random_bool(0.5);
        let grid = if high { &hr } else { &lr };
        let pos = rng.random_range(0..grid.cells().len());
        let mut cells = grid.cells().to_vec();
        cells[pos] = (cells[pos] + rng.random_range(1..NUM_COLORS as u8)) % NUM_COLORS as u8;
        let changed = TokenGrid::new(grid.resolution(), cells).unwrap();
        let ok = if high {
            let (l, h) = stage_logits(&model, &prompt, &lr, &changed, &c);
            same_bits(l.data(), base_lr.data()) && (0..=pos).all(|i| same_bits(h.row(i), base_hr.row(i)))
        } else {
            let (l, _) = stage_logits(&model, &prompt, &changed, &hr, &c);
            (0..=pos).all(|i| same_bits(l.row(i), base_lr.row(i)))
        };
        violations += usize::from(!ok);
    }
    outcome(violations == 0, format!("{violations} of 1000 perturbations changed a past logit"))
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(1000, 10, 0.0).unwrap();
    let heldout = generate_dataset(200, 11, 0.0).unwrap();
    let cfg = TrainConfig { use_maer: false, use_ambiguity: false, steps: 2000, seed: 0, ..TrainConfig::default() };
    let (trainer, log) = train::<f32>(cfg, &data).unwrap();
    let first = log.first().unwrap().ar;
    let last = log.last().unwrap().ar;
    let drop = 1.0 - last / first;
    let align = eval_alignment(Generator::new(&trainer.model, false), &heldout, 0.0, 0).unwrap().mean;
    let prompts: Vec<PromptSpec> = heldout.iter().map(|e| e.prompt.clone()).collect();
    let chance = chance_alignment(&prompts, 64, 0);
    outcome(
        drop >= 0.5 && align >= 0.9 && align > chance,
        format!(
            "L_AR {first:.4} -> {last:.4} ({:.1}% drop), alignment {align:.4} vs chance {chance:.4}, {:.0}s",
            100.0 * drop,
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Ablation budget shared by the directional and diversity criteria.
const ABLATION_STEPS: u64 = 400;

fn ablation_criteria() -> (Outcome, Outcome) {
    let start = Instant::now();
    let train_set = generate_dataset(1000, 20, 0.5).unwrap();
    let heldout = generate_dataset(200, 21, 0.5).unwrap();
    let bench = generate_ambiguous_benchmark(200, 22).unwrap();
    let plan = AblationPlan {
        base: TrainConfig { steps: ABLATION_STEPS, log_interval: ABLATION_STEPS, ..TrainConfig::default() },
        train: &train_set,
        heldout: &heldout,
        benchmark: &bench,
        seeds: (0..5).collect(),
        k: 5,
    };
    let result = run_ablation(&plan).unwrap();
    let cell = |variant: &str, seed: u64| {
        result.cells.iter().find(|c| c.variant == variant && c.seed == seed).expect("cell present")
    };
    for row in &result.rows {
        println!(
            "  {:<10} alignment {:.4} ± {:.4}  nll {:.2}  distinct {:.3}  plausibility {:.3}",
            row.variant, row.alignment_mean, row.alignment_std, row.nll_mean, row.distinct_mean, row.plausibility_mean
        );
    }
    let failed: usize = result.rows.iter().map(|r| r.failed).sum();
    assert_eq!(result.rows.len(), VARIANTS.len());

    let wins = (0..5).filter(|&s| cell("full", s).alignment > cell("baseline", s).alignment).count();
    let gaps: Vec<String> =
        (0..5).map(|s| format!("{:+.4}", cell("full", s).alignment - cell("baseline", s).alignment)).collect();
    let directional = outcome(
        failed == 0 && wins >= 4,
        format!("full > baseline in {wins}/5 seeds (gaps {}), {:.0}s", gaps.join(" "), start.elapsed().as_secs_f64()),
    );

    let over_mean_mode = (0..5).all(|s| cell("full", s).mean_distinct > cell("full", s).mean_mode_distinct);
    let over_no_latent = (0..5).filter(|&s| cell("full", s).mean_distinct > cell("+MAER", s).mean_distinct).count();
    let plaus = (0..5).map(|s| cell("full", s).mean_plausibility).fold(f64::INFINITY, f64::min);
    let distinct: Vec<String> = (0..5).map(|s| format!("{:.3}", cell("full", s).mean_distinct)).collect();
    let diversity = outcome(
        failed == 0 && over_mean_mode && over_no_latent >= 4 && plaus >= 0.8,
        format!(
            "full distinct [{}], above mean mode in every seed: {over_mean_mode}, above no-latent variant in {over_no_latent}/5, min plausibility {plaus:.3}",
            distinct.join(", ")
        ),
    );
    (directional, diversity)
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig { steps: 12, batch_size: 8, log_interval: 1, seed, model: ModelConfig::tiny(), ..TrainConfig::default() }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(40, 30, 0.5).unwrap();
    let run = |name: &str| {
        let (t, log) = train::<f32>(small_config(3), &data).unwrap();
        let path = dir.path().join(name);
        write_metrics(&path, &log).unwrap();
        (t, std::fs::read(path).unwrap())
    };
    let (trainer, a) = run("a.jsonl");
    let (_, b) = run("b.jsonl");
    let ckpt = dir.path().join("t.ckpt");
    save_checkpoint(&ckpt, &trainer).unwrap();
    let back: Trainer32 = load_checkpoint(&ckpt).unwrap();
    let batch = &data[..8];
    let noise = draw_noise(8, batch.len(), 99, 0);
    let total = |t: &Trainer32| {
        evaluate_batch(&t.model, &t.config, batch, &noise, LossWeights::total(&t.config), false, None)
            .unwrap()
            .objective
    };
    let (l1, l2) = (total(&trainer), total(&back));
    outcome(
        a == b && !a.is_empty() && l1.to_bits() == l2.to_bits(),
        format!("metrics logs identical: {}, L_total {l1} vs reloaded {l2}", a == b),
    )
}

fn frozen_contract() -> Outcome {
    let data = generate_dataset(40, 31, 0.5).unwrap();
    let mut changed = Vec::new();
    for (use_maer, use_ambiguity) in VARIANTS {
        let cfg = TrainConfig { use_maer, use_ambiguity, ..small_config(4) };
        let init: Model<f32> = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let (trainer, _) = train::<f32>(cfg.clone(), &data).unwrap();
        for (id, p) in trainer.model.store.iter() {
            let group = trainer.model.group_of(id);
            if !matches!(group, ParamGroup::TextEncoder | ParamGroup::ImageEmbedder) {
                continue;
            }
            let before = init.store.value(id).data();
            if !p.frozen || !same_bits(before, p.value.data()) {
                changed.push(format!("{}:{}", cfg.variant_name(), p.name));
            }
        }
    }
    outcome(changed.is_empty(), format!("changed frozen arrays: {changed:?}"))
}

fn main() {
    // numeric arguments select criteria; none runs everything
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    let single: [(usize, &'static str, fn() -> Outcome); 6] = [
        (1, "gradient correctness", gradient_check),
        (2, "KL closed form vs Monte Carlo", kl_oracle),
        (3, "kernel regression oracle", kernel_oracle),
        (4, "likelihood additivity", additivity),
        (5, "causality", causality),
        (6, "convergence", convergence),
    ];
    for (n, name, f) in single {
        if wanted(n) {
            report(n, name, f());
        }
    }
    if wanted(7) || wanted(8) {
        let (directional, diversity) = ablation_criteria();
        report(7, "directional ablation", directional);
        report(8, "diversity", diversity);
    }
    if wanted(9) {
        report(9, "determinism and persistence", determinism());
    }
    if wanted(10) {
        report(10, "frozen components", frozen_contract());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
