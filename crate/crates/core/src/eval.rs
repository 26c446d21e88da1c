//! Evaluation harness: oracle alignment, interpretation clustering and
//! diversity, the four-variant ablation grid, and report files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Tape;
use crate::backbone::{encode_text, log_likelihood, sample};
use crate::error::{Error, Result};
use crate::forward::{forward_example, LatentInput};
use crate::latent::posterior;
use crate::metric::{MetricBatch, SoftGrid};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::{match_fraction, oracle_score, Example, Interpretation, PromptSpec, Resolution, TokenGrid, HR_CELLS};
use crate::trainer::{train, TrainConfig};

/// Minimum match fraction for a grid to count as an interpretation.
pub const TAU: f64 = 0.8;
pub const DEFAULT_K: usize = 5;
pub const PROXY_NOTE: &str = "diversity is an automated interpretation-cluster proxy, not a human judgment";

const EVAL_DOMAIN: u64 = 0x00e7_a15e;

/// A trained generator together with whether it carries the latent module.
#[derive(Clone, Copy)]
pub struct Generator<'m, T> {
    pub model: &'m Model<T>,
    pub use_latent: bool,
}

impl<'m, T: Scalar> Generator<'m, T> {
    pub fn new(model: &'m Model<T>, use_latent: bool) -> Self {
        Self { model, use_latent }
    }

    /// `c = μ` with the latent module, nothing without it.
    pub fn mean_mode(&self, prompt: &PromptSpec) -> Result<Option<Vec<T>>> {
        if !self.use_latent {
            return Ok(None);
        }
        Ok(Some(posterior(self.model, &encode_text(self.model, &prompt.tokens)?)?.mu))
    }

    pub fn decode(&self, prompt: &PromptSpec, temperature: f64, seed: u64) -> Result<(TokenGrid, TokenGrid)> {
        let c = self.mean_mode(prompt)?;
        sample(self.model, prompt, c.as_deref(), temperature, seed)
    }
}

fn item_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub mean: f64,
    pub scores: Vec<f64>,
    pub temperature: f64,
}

/// Mean-mode decode of every record, scored by the oracle.
pub fn eval_alignment<T: Scalar>(
    gen: Generator<'_, T>,
    dataset: &[Example],
    temperature: f64,
    seed: u64,
) -> Result<AlignmentReport> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for (i, ex) in dataset.iter().enumerate() {
        let (_, hr) = gen.decode(&ex.prompt, temperature, item_seed(seed, i))?;
        scores.push(oracle_score(&hr, &ex.prompt));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(AlignmentReport { mean, scores, temperature })
}

/// Monte-Carlo oracle score of uniformly random grids against the prompts.
pub fn chance_alignment(prompts: &[PromptSpec], samples_per_prompt: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_DOMAIN);
    let mut total = 0.0;
    for p in prompts {
        for _ in 0..samples_per_prompt {
            let cells = (0..HR_CELLS).map(|_| rng.random_range(0..8u8)).collect();
            total += oracle_score(&TokenGrid::new(Resolution::High, cells).expect("valid tokens"), p);
        }
    }
    total / (prompts.len() * samples_per_prompt) as f64
}

/// Mean per-record negative log-likelihood (nats over all 80 positions) in
/// mean mode.
pub fn mean_nll<T: Scalar>(gen: Generator<'_, T>, dataset: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in dataset {
        let c = gen.mean_mode(&ex.prompt)?;
        total -= log_likelihood(gen.model, &ex.lr, &ex.hr, &ex.prompt, c.as_deref())?.log_p_total.as_f64();
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Cluster {
    Interpretation(Interpretation),
    Implausible,
}

impl Cluster {
    pub fn label(&self) -> String {
        match self {
            Cluster::Interpretation(i) => i.to_string(),
            Cluster::Implausible => "implausible".into(),
        }
    }
}

/// Best-matching interpretation if it reaches [`TAU`]; ties go to the lowest
/// `(color, pattern)`.
pub fn assign_cluster(hr: &TokenGrid, prompt: &PromptSpec) -> Cluster {
    let mut interps = prompt.interpretations.clone();
    interps.sort();
    let mut best: Option<(Interpretation, f64)> = None;
    for i in interps {
        let f = match_fraction(hr, i);
        if best.is_none_or(|(_, b)| f > b) {
            best = Some((i, f));
        }
    }
    match best {
        Some((i, f)) if f >= TAU => Cluster::Interpretation(i),
        _ => Cluster::Implausible,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptDiversity {
    pub prompt: String,
    pub interpretations: usize,
    pub grids: Vec<String>,
    pub clusters: Vec<String>,
    pub distinct: usize,
    pub coverage: f64,
    pub plausibility: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiversityAggregate {
    pub samples_per_prompt: usize,
    pub mean_distinct: f64,
    pub coverage: f64,
    pub mean_plausibility: f64,
    pub frac_multi_cluster: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityReport {
    pub note: &'static str,
    pub sampled: DiversityAggregate,
    pub mean_mode: DiversityAggregate,
    pub prompts: Vec<PromptDiversity>,
}

fn summarize(prompt: &PromptSpec, grids: &[TokenGrid]) -> PromptDiversity {
    let clusters: Vec<Cluster> = grids.iter().map(|g| assign_cluster(g, prompt)).collect();
    let distinct: BTreeSet<Cluster> = clusters.iter().copied().collect();
    let plausible = distinct.iter().filter(|c| **c != Cluster::Implausible).count();
    PromptDiversity {
        prompt: prompt.text(),
        interpretations: prompt.interpretations.len(),
        grids: grids.iter().map(|g| g.cells().iter().map(|t| char::from(b'0' + t)).collect()).collect(),
        clusters: clusters.iter().map(Cluster::label).collect(),
        distinct: distinct.len(),
        coverage: plausible as f64 / prompt.interpretations.len() as f64,
        plausibility: grids.iter().map(|g| oracle_score(g, prompt)).collect(),
    }
}

fn aggregate(rows: &[PromptDiversity], k: usize) -> DiversityAggregate {
    let n = rows.len() as f64;
    let samples: usize = rows.iter().map(|r| r.plausibility.len()).sum();
    DiversityAggregate {
        samples_per_prompt: k,
        mean_distinct: rows.iter().map(|r| r.distinct as f64).sum::<f64>() / n,
        coverage: rows.iter().map(|r| r.coverage).sum::<f64>() / n,
        mean_plausibility: rows.iter().flat_map(|r| &r.plausibility).sum::<f64>() / samples as f64,
        frac_multi_cluster: rows.iter().filter(|r| r.distinct >= 2).count() as f64 / n,
    }
}

/// `k` temperature-0 decodes per prompt, each under its own draw
/// `c ~ q(c | T)`; without the latent module every decode uses no latent.
/// Also reports the single mean-mode decode per prompt.
pub fn eval_diversity<T: Scalar>(
    gen: Generator<'_, T>,
    benchmark: &[Example],
    k: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if k == 0 || benchmark.is_empty() {
        return Err(Error::Invalid("diversity needs k >= 1 and a non-empty benchmark".into()));
    }
    let mut sampled = Vec::with_capacity(benchmark.len());
    let mut mean_mode = Vec::with_capacity(benchmark.len());
    for (i, ex) in benchmark.iter().enumerate() {
        let prompt = &ex.prompt;
        let mut grids = Vec::with_capacity(k);
        if gen.use_latent {
            let post = posterior(gen.model, &encode_text(gen.model, &prompt.tokens)?)?;
            let sigma = post.sigma();
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed ^ EVAL_DOMAIN, i));
            for _ in 0..k {
                let c: Vec<T> = post
                    .mu
                    .iter()
                    .zip(&sigma)
                    .map(|(&m, &s)| m + s * T::lit(StandardNormal.sample(&mut rng)))
                    .collect();
                grids.push(sample(gen.model, prompt, Some(&c), 0.0, 0)?.1);
            }
        } else {
            for _ in 0..k {
                grids.push(sample(gen.model, prompt, None, 0.0, 0)?.1);
            }
        }
        sampled.push(summarize(prompt, &grids));
        mean_mode.push(summarize(prompt, &[gen.decode(prompt, 0.0, 0)?.1]));
    }
    Ok(DiversityReport {
        note: PROXY_NOTE,
        sampled: aggregate(&sampled, k),
        mean_mode: aggregate(&mean_mode, 1),
        prompts: sampled,
    })
}

/// Teacher-forced regularizer view of a batch in mean mode: the 2-D points
/// and their oracle targets.
pub fn metric_snapshot<T: Scalar>(gen: Generator<'_, T>, batch: &[Example]) -> Result<MetricBatch<T>> {
    let mut soft = Vec::with_capacity(batch.len());
    for ex in batch {
        let latent = if gen.use_latent { LatentInput::Mean } else { LatentInput::Absent };
        let mut tape = Tape::new(&gen.model.store);
        let nd = forward_example(gen.model, &mut tape, &ex.prompt.tokens, &ex.lr, &ex.hr, &latent, true);
        soft.push(SoftGrid::new(tape.value(nd.soft.expect("soft grid requested")).clone())?);
    }
    let prompts: Vec<PromptSpec> = batch.iter().map(|e| e.prompt.clone()).collect();
    MetricBatch::compute(gen.model, &soft, &prompts)
}

pub const VARIANTS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub alignment: f64,
    pub nll: f64,
    pub mean_distinct: f64,
    pub mean_plausibility: f64,
    pub mean_mode_distinct: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_maer: bool,
    pub use_ambiguity: bool,
    pub seeds: usize,
    pub failed: usize,
    pub alignment_mean: f64,
    pub alignment_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub distinct_mean: f64,
    pub distinct_std: f64,
    pub plausibility_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub note: &'static str,
    pub chance_alignment: f64,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
    /// Regularizer points of the full variant, first seed, on the held-out batch.
    pub z_scatter: Vec<ZPoint>,
}

/// Inputs of the ablation grid.
#[derive(Clone, Debug)]
pub struct AblationPlan<'a> {
    pub base: TrainConfig,
    pub train: &'a [Example],
    pub heldout: &'a [Example],
    pub benchmark: &'a [Example],
    pub seeds: Vec<u64>,
    pub k: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn run_cell(plan: &AblationPlan<'_>, cfg: TrainConfig) -> Result<(AblationCell, Option<Vec<ZPoint>>)> {
    let (trainer, _) = train::<f32>(cfg.clone(), plan.train)?;
    let gen = Generator::new(&trainer.model, cfg.use_ambiguity);
    let alignment = eval_alignment(gen, plan.heldout, 0.0, cfg.seed)?.mean;
    let nll = mean_nll(gen, plan.heldout)?;
    let div = eval_diversity(gen, plan.benchmark, plan.k, cfg.seed)?;
    let z = if cfg.use_maer && cfg.use_ambiguity {
        let n = plan.heldout.len().min(cfg.batch_size).max(2);
        let snap = metric_snapshot(gen, &plan.heldout[..n.min(plan.heldout.len())])?;
        Some(
            (0..snap.z.rows())
                .map(|i| ZPoint { x: snap.z.get(i, 0) as f64, y: snap.z.get(i, 1) as f64, score: snap.y[i] as f64 })
                .collect(),
        )
    } else {
        None
    };
    let cell = AblationCell {
        variant: cfg.variant_name().into(),
        seed: cfg.seed,
        alignment,
        nll,
        mean_distinct: div.sampled.mean_distinct,
        mean_plausibility: div.sampled.mean_plausibility,
        mean_mode_distinct: div.mean_mode.mean_distinct,
        error: None,
    };
    Ok((cell, z))
}

/// Trains and evaluates every `(seed, variant)` pair. A failing cell is
/// recorded with its error and excluded from its row's statistics.
pub fn run_ablation(plan: &AblationPlan<'_>) -> Result<AblationResult> {
    if plan.seeds.is_empty() {
        return Err(Error::Invalid("the ablation needs at least one seed".into()));
    }
    if plan.heldout.is_empty() || plan.benchmark.is_empty() {
        return Err(Error::Invalid("held-out set and benchmark must be non-empty".into()));
    }
    let mut cells = Vec::new();
    let mut z_scatter = Vec::new();
    for &seed in &plan.seeds {
        for (use_maer, use_ambiguity) in VARIANTS {
            let cfg = TrainConfig { seed, use_maer, use_ambiguity, ..plan.base.clone() };
            match run_cell(plan, cfg.clone()) {
                Ok((cell, z)) => {
                    if let (Some(z), true) = (z, z_scatter.is_empty()) {
                        z_scatter = z;
                    }
                    cells.push(cell);
                }
                Err(e) => cells.push(AblationCell {
                    variant: cfg.variant_name().into(),
                    seed,
                    alignment: f64::NAN,
                    nll: f64::NAN,
                    mean_distinct: f64::NAN,
                    mean_plausibility: f64::NAN,
                    mean_mode_distinct: f64::NAN,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    let rows = VARIANTS
        .iter()
        .map(|&(use_maer, use_ambiguity)| {
            let name = TrainConfig { use_maer, use_ambiguity, ..TrainConfig::default() }.variant_name();
            let ok: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == name && c.error.is_none()).collect();
            let col = |f: fn(&AblationCell) -> f64| ok.iter().map(|c| f(c)).collect::<Vec<f64>>();
            let (alignment_mean, alignment_std) = mean_std(&col(|c| c.alignment));
            let (nll_mean, nll_std) = mean_std(&col(|c| c.nll));
            let (distinct_mean, distinct_std) = mean_std(&col(|c| c.mean_distinct));
            AblationRow {
                variant: name.into(),
                use_maer,
                use_ambiguity,
                seeds: plan.seeds.len(),
                failed: plan.seeds.len() - ok.len(),
                alignment_mean,
                alignment_std,
                nll_mean,
                nll_std,
                distinct_mean,
                distinct_std,
                plausibility_mean: mean_std(&col(|c| c.mean_plausibility)).0,
            }
        })
        .collect();
    let prompts: Vec<PromptSpec> = plan.heldout.iter().map(|e| e.prompt.clone()).collect();
    Ok(AblationResult { note: PROXY_NOTE, chance_alignment: chance_alignment(&prompts, 20, 0), rows, cells, z_scatter })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn ablation_csv(result: &AblationResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "variant",
        "use_maer",
        "use_ambiguity",
        "seeds",
        "failed",
        "alignment_mean",
        "alignment_std",
        "nll_mean",
        "nll_std",
        "distinct_mean",
        "distinct_std",
        "plausibility_mean",
    ])
    .map_err(io)?;
    for r in &result.rows {
        w.write_record([
            r.variant.clone(),
            r.use_maer.to_string(),
            r.use_ambiguity.to_string(),
            r.seeds.to_string(),
            r.failed.to_string(),
            format!("{:.6}", r.alignment_mean),
            format!("{:.6}", r.alignment_std),
            format!("{:.6}", r.nll_mean),
            format!("{:.6}", r.nll_std),
            format!("{:.6}", r.distinct_mean),
            format!("{:.6}", r.distinct_std),
            format!("{:.6}", r.plausibility_mean),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// SVG scatter of the 2-D regularizer points, shaded from red (score 0) to
/// blue (score 1).
pub fn z_scatter_svg(points: &[ZPoint]) -> String {
    let (w, h, pad) = (400.0, 400.0, 20.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let sx = if x1 > x0 { (w - 2.0 * pad) / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { (h - 2.0 * pad) / (y1 - y0) } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for p in points {
        let cx = pad + (p.x - x0) * sx;
        let cy = h - pad - (p.y - y0) * sy;
        let r = (255.0 * (1.0 - p.score)).round() as u8;
        let b = (255.0 * p.score).round() as u8;
        let _ = writeln!(s, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="4" fill="rgb({r},0,{b})"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.json`, `<stem>.csv` and, when points exist, `<stem>.svg`.
pub fn emit_report(result: &AblationResult, dir: &Path, stem: &str) -> Result<()> {
    let json = serde_json::to_vec_pretty(result).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join(format!("{stem}.json")), &json)?;
    write_file(&dir.join(format!("{stem}.csv")), &ablation_csv(result)?)?;
    if !result.z_scatter.is_empty() {
        write_file(&dir.join(format!("{stem}.svg")), z_scatter_svg(&result.z_scatter).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_ambiguous_benchmark, generate_dataset, render_scene, words, Pattern, WHITE};

    #[test]
    fn cluster_examples() {
        let p = PromptSpec::new(words::WARM, Pattern::Solid).unwrap();
        let i = Interpretation { color: 1, pattern: Pattern::Solid };
        assert_eq!(assign_cluster(&render_scene(i), &p), Cluster::Interpretation(i));
        let black = TokenGrid::filled(Resolution::High, 6);
        assert_eq!(assign_cluster(&black, &p), Cluster::Implausible);
        // 54 red cells and 10 orange: 0.84 for red, 0.16 for orange
        let mut cells = vec![0u8; 64];
        cells[..10].iter_mut().for_each(|c| *c = 1);
        let g = TokenGrid::new(Resolution::High, cells).unwrap();
        assert!((match_fraction(&g, Interpretation { color: 0, pattern: Pattern::Solid }) - 54.0 / 64.0).abs() < 1e-12);
        assert_eq!(assign_cluster(&g, &p), Cluster::Interpretation(Interpretation { color: 0, pattern: Pattern::Solid }));
    }

    #[test]
    fn cluster_picks_the_best_match_above_threshold() {
        // about 0.84 against red stripes and 0.47 against black stripes
        let p = PromptSpec::new(words::ANY, Pattern::Stripes).unwrap();
        let red = render_scene(Interpretation { color: 0, pattern: Pattern::Stripes });
        let mut cells = red.cells().to_vec();
        // recolor some white cells to blue and some red cells to black
        let whites: Vec<usize> = (0..64).filter(|&k| cells[k] == WHITE).collect();
        for &k in &whites[..6] {
            cells[k] = 6;
        }
        let reds: Vec<usize> = (0..64).filter(|&k| cells[k] == 0).collect();
        for &k in &reds[..4] {
            cells[k] = 6;
        }
        let g = TokenGrid::new(Resolution::High, cells).unwrap();
        let i = Interpretation { color: 0, pattern: Pattern::Stripes };
        let fi = match_fraction(&g, i);
        assert!((fi - 54.0 / 64.0).abs() < 1e-12);
        assert!((match_fraction(&g, Interpretation { color: 6, pattern: Pattern::Stripes }) - 30.0 / 64.0).abs() < 1e-12);
        assert_eq!(assign_cluster(&g, &p), Cluster::Interpretation(i));
    }

    #[test]
    fn untrained_decodes_and_chance() {
        let m: Model<f64> = Model::new(ModelConfig::tiny(), 0).unwrap();
        let data = generate_dataset(30, 3, 0.0).unwrap();
        let prompts: Vec<PromptSpec> = data.iter().map(|e| e.prompt.clone()).collect();
        let chance = chance_alignment(&prompts, 200, 1);
        assert!((chance - 0.125).abs() < 0.01, "{chance}");
        let gen = Generator::new(&m, true);
        let sampled = eval_alignment(gen, &data, 1.0, 4).unwrap();
        assert!((sampled.mean - chance).abs() < 0.03, "{} vs {chance}", sampled.mean);
        assert_eq!(sampled, eval_alignment(gen, &data, 1.0, 4).unwrap());
        let nll = mean_nll(gen, &data).unwrap();
        assert!((nll - 80.0 * 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn diversity_bounds_without_latent() {
        let m: Model<f64> = Model::new(ModelConfig::tiny(), 0).unwrap();
        let bench = generate_ambiguous_benchmark(6, 2).unwrap();
        let r = eval_diversity(Generator::new(&m, false), &bench, 5, 0).unwrap();
        assert_eq!(r.sampled.mean_distinct, 1.0);
        assert_eq!(r.mean_mode.mean_distinct, 1.0);
        for p in &r.prompts {
            assert!(p.distinct <= 5 && p.distinct <= p.interpretations + 1);
            assert!((0.0..=1.0).contains(&p.coverage));
            assert!(p.plausibility.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn report_files_are_deterministic() {
        let result = AblationResult {
            note: PROXY_NOTE,
            chance_alignment: 0.125,
            rows: VARIANTS
                .iter()
                .map(|&(a, b)| AblationRow {
                    variant: TrainConfig { use_maer: a, use_ambiguity: b, ..TrainConfig::default() }.variant_name().into(),
                    use_maer: a,
                    use_ambiguity: b,
                    seeds: 1,
                    failed: 0,
                    alignment_mean: 0.5,
                    alignment_std: 0.0,
                    nll_mean: 10.0,
                    nll_std: 0.0,
                    distinct_mean: 1.0,
                    distinct_std: 0.0,
                    plausibility_mean: 0.9,
                })
                .collect(),
            cells: vec![],
            z_scatter: vec![ZPoint { x: 0.0, y: 1.0, score: 0.5 }, ZPoint { x: 2.0, y: -1.0, score: 1.0 }],
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&result, dir.path(), "a").unwrap();
        emit_report(&result, dir.path(), "b").unwrap();
        for ext in ["json", "csv", "svg"] {
            let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b);
        }
        let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let svg = std::fs::read_to_string(dir.path().join("a.svg")).unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(emit_report(&result, &dir.path().join("missing/dir"), "x").is_err());
    }
}
