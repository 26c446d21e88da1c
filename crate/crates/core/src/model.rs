//! Parameter layout of the full generator and the shared forward graph.
//!
//! Sequence layouts:
//! * LR stage, 22 rows: `[prefix, text₀..text₃, bos, x₀..x₁₅]`. Logits are
//!   read at rows `bos..x₁₄` (predicting `x₀..x₁₅`), the hidden states handed
//!   to the HR stage at rows `x₀..x₁₅`.
//! * HR stage, 64 rows: `[bos, y₀..y₆₂]`, each row also receiving the
//!   upsampled (and possibly FiLM-modulated) context of the cell it predicts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{gaussian, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{TokenGrid, HR_CELLS, HR_SIDE, LR_CELLS, LR_SIDE, NUM_COLORS, PROMPT_LEN, PROMPT_VOCAB};
use crate::tensor::Mat;

pub const IMAGE_VOCAB: usize = NUM_COLORS;
/// Token id of the stage-local beginning-of-sequence embedding.
pub const IMAGE_BOS: usize = NUM_COLORS;
pub const LR_SEQ: usize = 1 + PROMPT_LEN + 1 + LR_CELLS;
pub const LR_LOGIT_START: usize = 1 + PROMPT_LEN;
pub const LR_HIDDEN_START: usize = LR_LOGIT_START + 1;
pub const HR_SEQ: usize = HR_CELLS;
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub latent_dim: usize,
    pub posterior_hidden: usize,
    pub embed_dim: usize,
    pub proj_hidden: usize,
    /// Seed of the frozen text embedding table.
    pub text_seed: u64,
    /// Seed of the frozen image embedder.
    pub embedder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            latent_dim: 8,
            posterior_hidden: 64,
            embed_dim: 64,
            proj_hidden: 32,
            text_seed: 0x7e47,
            embedder_seed: 0xe1b3,
        }
    }
}

impl ModelConfig {
    /// Small float64 configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self { d_model: 16, n_layers: 1, n_heads: 4, d_ff: 32, posterior_hidden: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("latent_dim", self.latent_dim),
            ("posterior_hidden", self.posterior_hidden),
            ("embed_dim", self.embed_dim),
            ("proj_hidden", self.proj_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct StageIds {
    pub tok: ParamId,
    pub pos: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ModelIds {
    pub text: ParamId,
    pub lr: StageIds,
    pub hr: StageIds,
    pub posterior_hidden: LinearIds,
    pub posterior_out: LinearIds,
    pub prefix: LinearIds,
    pub film_gamma: LinearIds,
    pub film_beta: LinearIds,
    pub embedder: ParamId,
    pub proj_hidden: LinearIds,
    pub proj_out: LinearIds,
}

/// The whole generator: frozen text table, two AR stages, the ambiguity
/// latent heads, and the metric-regularizer embedder and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub(crate) ids: ModelIds,
}

/// Logical grouping of parameters used in reports and isolation checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextEncoder,
    LrStage,
    HrStage,
    Posterior,
    Prefix,
    Film,
    ImageEmbedder,
    Projection,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').take(2).collect::<Vec<_>>().as_slice() {
            ["text", ..] => ParamGroup::TextEncoder,
            ["lr", ..] => ParamGroup::LrStage,
            ["hr", ..] => ParamGroup::HrStage,
            ["latent", "posterior"] => ParamGroup::Posterior,
            ["latent", "prefix"] => ParamGroup::Prefix,
            ["latent", _] => ParamGroup::Film,
            ["metric", "embedder"] => ParamGroup::ImageEmbedder,
            _ => ParamGroup::Projection,
        }
    }

    /// Groups that only exist for the ambiguity latent.
    pub fn is_ambiguity(self) -> bool {
        matches!(self, ParamGroup::Posterior | ParamGroup::Prefix | ParamGroup::Film)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::LrStage => "lr_stage",
            ParamGroup::HrStage => "hr_stage",
            ParamGroup::Posterior => "posterior",
            ParamGroup::Prefix => "prefix",
            ParamGroup::Film => "film",
            ParamGroup::ImageEmbedder => "image_embedder",
            ParamGroup::Projection => "projection",
        }
    }
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let v = gaussian(&mut self.rng, rows, cols, std);
        self.store.add(name, v, false)
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Mat::filled(rows, cols, T::lit(v)), false)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> LinearIds {
        let std = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
        LinearIds {
            w: self.normal(&format!("{name}.w"), fan_in, fan_out, std),
            b: self.fill(&format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    fn stage(&mut self, prefix: &str, seq: usize, cfg: &ModelConfig) -> StageIds {
        let d = cfg.d_model;
        let tok = self.normal(&format!("{prefix}.tok"), IMAGE_VOCAB + 1, d, 1.0);
        let pos = self.normal(&format!("{prefix}.pos"), seq, d, 1.0);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.block{l}.{s}");
                let ln1_g = self.fill(&n("ln1.g"), 1, d, 1.0);
                let ln1_b = self.fill(&n("ln1.b"), 1, d, 0.0);
                let q = self.linear(&n("attn.q"), d, d, false);
                let k = self.linear(&n("attn.k"), d, d, false);
                let v = self.linear(&n("attn.v"), d, d, false);
                let o = self.linear(&n("attn.o"), d, d, false);
                let ln2_g = self.fill(&n("ln2.g"), 1, d, 1.0);
                let ln2_b = self.fill(&n("ln2.b"), 1, d, 0.0);
                let f1 = self.linear(&n("ff.1"), d, cfg.d_ff, false);
                let f2 = self.linear(&n("ff.2"), cfg.d_ff, d, false);
                BlockIds {
                    ln1_g,
                    ln1_b,
                    wq: q.w,
                    bq: q.b,
                    wk: k.w,
                    bk: k.b,
                    wv: v.w,
                    bv: v.b,
                    wo: o.w,
                    bo: o.b,
                    ln2_g,
                    ln2_b,
                    w1: f1.w,
                    b1: f1.b,
                    w2: f2.w,
                    b2: f2.b,
                }
            })
            .collect();
        let lnf_g = self.fill(&format!("{prefix}.lnf.g"), 1, d, 1.0);
        let lnf_b = self.fill(&format!("{prefix}.lnf.b"), 1, d, 0.0);
        // Zero output head: the untrained model predicts the uniform distribution.
        let head = self.linear(&format!("{prefix}.head"), d, IMAGE_VOCAB, true);
        StageIds { tok, pos, blocks, lnf_g, lnf_b, head_w: head.w, head_b: head.b }
    }
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`; frozen tables use the seeds
    /// recorded in `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let text = store.add(
            "text.table",
            gaussian(&mut ChaCha8Rng::seed_from_u64(config.text_seed), PROMPT_VOCAB, d, 1.0),
            true,
        );
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let lr = init.stage("lr", LR_SEQ, &config);
        let hr = init.stage("hr", HR_SEQ, &config);
        let posterior_hidden = init.linear("latent.posterior.hidden", d, config.posterior_hidden, false);
        let posterior_out = init.linear("latent.posterior.out", config.posterior_hidden, 2 * config.latent_dim, true);
        let prefix = init.linear("latent.prefix", config.latent_dim, d, false);
        let film_gamma = init.linear("latent.film_gamma", config.latent_dim, d, true);
        let film_beta = init.linear("latent.film_beta", config.latent_dim, d, true);
        let proj_hidden = init.linear("metric.proj.hidden", config.embed_dim, config.proj_hidden, false);
        let proj_out = init.linear("metric.proj.out", config.proj_hidden, 2, false);
        let flat = HR_CELLS * IMAGE_VOCAB;
        // Stored transposed (512 × embed_dim) so the embedding is a row-vector product.
        let embedder = store.add(
            "metric.embedder",
            gaussian(&mut ChaCha8Rng::seed_from_u64(config.embedder_seed), flat, config.embed_dim, (1.0 / flat as f64).sqrt()),
            true,
        );
        let ids = ModelIds {
            text,
            lr,
            hr,
            posterior_hidden,
            posterior_out,
            prefix,
            film_gamma,
            film_beta,
            embedder,
            proj_hidden,
            proj_out,
        };
        Ok(Self { config, store, ids })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.add(p.name.clone(), p.value.cast(), p.frozen);
        }
        Model { config: self.config.clone(), store, ids: self.ids.clone() }
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of(&self.store.get(id).name)
    }

    /// Adds `N(0, std²)` noise to every trainable parameter, including the
    /// zero-initialized heads; used to move a model off its symmetric start
    /// before finite-difference checks.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.store.iter_mut() {
            if p.frozen {
                continue;
            }
            let noise: Mat<T> = gaussian(&mut rng, p.value.rows(), p.value.cols(), std);
            p.value.add_assign(&noise);
        }
    }

    pub(crate) fn linear(&self, tape: &mut Tape<'_, T>, x: NodeId, l: &LinearIds) -> NodeId {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        tape.linear(x, w, Some(b))
    }

    fn block(&self, tape: &mut Tape<'_, T>, b: &BlockIds, x: NodeId) -> NodeId {
        let p = |tape: &mut Tape<'_, T>, id| tape.param(id);
        let (g1, b1) = (p(tape, b.ln1_g), p(tape, b.ln1_b));
        let h = tape.layer_norm(x, g1, b1);
        let (wq, bq, wk, bk, wv, bv) = (p(tape, b.wq), p(tape, b.bq), p(tape, b.wk), p(tape, b.bk), p(tape, b.wv), p(tape, b.bv));
        let q = tape.linear(h, wq, Some(bq));
        let k = tape.linear(h, wk, Some(bk));
        let v = tape.linear(h, wv, Some(bv));
        let a = tape.causal_attention(q, k, v, self.config.n_heads);
        let (wo, bo) = (p(tape, b.wo), p(tape, b.bo));
        let o = tape.linear(a, wo, Some(bo));
        let x = tape.add(x, o);
        let (g2, b2) = (p(tape, b.ln2_g), p(tape, b.ln2_b));
        let h = tape.layer_norm(x, g2, b2);
        let (w1, bb1, w2, bb2) = (p(tape, b.w1), p(tape, b.b1), p(tape, b.w2), p(tape, b.b2));
        let f = tape.linear(h, w1, Some(bb1));
        let f = tape.gelu(f);
        let f = tape.linear(f, w2, Some(bb2));
        tape.add(x, f)
    }

    /// Runs a stage's blocks and final layer norm; returns the hidden states.
    fn stage_body(&self, tape: &mut Tape<'_, T>, s: &StageIds, mut x: NodeId) -> NodeId {
        for b in &s.blocks {
            x = self.block(tape, b, x);
        }
        let g = tape.param(s.lnf_g);
        let bias = tape.param(s.lnf_b);
        tape.layer_norm(x, g, bias)
    }

    fn head(&self, tape: &mut Tape<'_, T>, s: &StageIds, hidden: NodeId) -> NodeId {
        let w = tape.param(s.head_w);
        let b = tape.param(s.head_b);
        tape.linear(hidden, w, Some(b))
    }

    pub(crate) fn text_rows(&self, tape: &mut Tape<'_, T>, prompt: &[u32; PROMPT_LEN]) -> NodeId {
        let table = tape.param(self.ids.text);
        let idx: Vec<usize> = prompt.iter().map(|&t| t as usize).collect();
        tape.gather_rows(table, &idx)
    }

    /// LR stage: returns `(logits 16×8, hidden 16×d)`.
    pub(crate) fn lr_stage(
        &self,
        tape: &mut Tape<'_, T>,
        prefix: NodeId,
        text: NodeId,
        x_lr: &TokenGrid,
    ) -> (NodeId, NodeId) {
        let s = &self.ids.lr;
        let tok_table = tape.param(s.tok);
        let mut ids = Vec::with_capacity(1 + LR_CELLS);
        ids.push(IMAGE_BOS);
        ids.extend(x_lr.cells().iter().map(|&c| c as usize));
        let tok = tape.gather_rows(tok_table, &ids);
        let seq = tape.concat_rows(&[prefix, text, tok]);
        let pos_table = tape.param(s.pos);
        let pos = tape.gather_rows(pos_table, &(0..LR_SEQ).collect::<Vec<_>>());
        let x = tape.add(seq, pos);
        let hidden = self.stage_body(tape, s, x);
        let logit_rows = tape.gather_rows(hidden, &(LR_LOGIT_START..LR_LOGIT_START + LR_CELLS).collect::<Vec<_>>());
        let logits = self.head(tape, s, logit_rows);
        let lr_hidden = tape.gather_rows(hidden, &(LR_HIDDEN_START..LR_SEQ).collect::<Vec<_>>());
        (logits, lr_hidden)
    }

    /// HR stage over a `64×d` context; returns logits `64×8`.
    pub(crate) fn hr_stage(&self, tape: &mut Tape<'_, T>, context: NodeId, x_hr: &TokenGrid) -> NodeId {
        let s = &self.ids.hr;
        let tok_table = tape.param(s.tok);
        let mut ids = Vec::with_capacity(HR_SEQ);
        ids.push(IMAGE_BOS);
        ids.extend(x_hr.cells()[..HR_SEQ - 1].iter().map(|&c| c as usize));
        let tok = tape.gather_rows(tok_table, &ids);
        let pos_table = tape.param(s.pos);
        let pos = tape.gather_rows(pos_table, &(0..HR_SEQ).collect::<Vec<_>>());
        let x = tape.add(tok, pos);
        let x = tape.add(x, context);
        let hidden = self.stage_body(tape, s, x);
        self.head(tape, s, hidden)
    }

    pub(crate) fn stage_ids(&self, high: bool) -> &StageIds {
        if high {
            &self.ids.hr
        } else {
            &self.ids.lr
        }
    }

    pub(crate) fn check_text(&self, e_t: &Mat<T>) -> Result<()> {
        if e_t.shape() != (PROMPT_LEN, self.config.d_model) {
            return Err(Error::shape("text embedding", format!("{PROMPT_LEN}x{}", self.config.d_model), format!("{:?}", e_t.shape())));
        }
        Ok(())
    }
}

/// HR cell `(r, c)` reads LR cell `(r / 2, c / 2)`.
pub fn upsample_index() -> Vec<usize> {
    (0..HR_CELLS)
        .map(|p| {
            let (r, c) = (p / HR_SIDE, p % HR_SIDE);
            (r / 2) * LR_SIDE + c / 2
        })
        .collect()
}

/// Incremental single-row execution of one stage with cached keys/values.
///
/// Uses the same row kernels as the tape forward, so pushing rows one at a
/// time reproduces the batched hidden states bit for bit.
pub(crate) struct IncrementalStage<'m, T: Scalar> {
    model: &'m Model<T>,
    stage: &'m StageIds,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<'m, T: Scalar> IncrementalStage<'m, T> {
    pub fn new(model: &'m Model<T>, high: bool) -> Self {
        let n = model.config.n_layers;
        Self { model, stage: model.stage_ids(high), keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    fn v(&self, id: ParamId) -> &'m Mat<T> {
        self.model.store.value(id)
    }

    /// Input row for a token embedding at the next position (plus `extra`,
    /// added after the positional embedding).
    pub fn token_row(&self, token: usize, extra: Option<&[T]>) -> Vec<T> {
        let mut row: Vec<T> = self.v(self.stage.tok).row(token).to_vec();
        for (r, &p) in row.iter_mut().zip(self.v(self.stage.pos).row(self.len)) {
            *r += p;
        }
        if let Some(e) = extra {
            for (r, &x) in row.iter_mut().zip(e) {
                *r += x;
            }
        }
        row
    }

    /// Input row for a raw embedding (prefix or text) at the next position.
    pub fn raw_row(&self, raw: &[T]) -> Vec<T> {
        raw.iter().zip(self.v(self.stage.pos).row(self.len)).map(|(&a, &p)| a + p).collect()
    }

    /// Consumes one input row; returns the final-layer-normed hidden state.
    pub fn push(&mut self, input: Vec<T>) -> Vec<T> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let i = self.len;
        let mut x = input;
        let mut xhat = vec![T::zero(); d];
        let mut h = vec![T::zero(); d];
        for (l, b) in self.stage.blocks.iter().enumerate() {
            crate::tensor::layer_norm_row(&x, self.v(b.ln1_g).data(), self.v(b.ln1_b).data(), &mut xhat, &mut h);
            let mut q = vec![T::zero(); d];
            let mut k = vec![T::zero(); d];
            let mut val = vec![T::zero(); d];
            crate::tensor::linear_row(&h, self.v(b.wq), Some(self.v(b.bq).data()), &mut q);
            crate::tensor::linear_row(&h, self.v(b.wk), Some(self.v(b.bk).data()), &mut k);
            crate::tensor::linear_row(&h, self.v(b.wv), Some(self.v(b.bv).data()), &mut val);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&val);
            let mut att = vec![T::zero(); d];
            let mut probs = vec![T::zero(); i + 1];
            let mut head_out = vec![T::zero(); dh];
            for hd in 0..cfg.n_heads {
                let off = hd * dh;
                let keys = crate::tensor::HeadView { buf: &self.keys[l], stride: d, offset: off, head_dim: dh };
                let values = crate::tensor::HeadView { buf: &self.values[l], stride: d, offset: off, head_dim: dh };
                crate::tensor::attend_row(&q[off..off + dh], i, keys, values, scale, &mut probs, &mut head_out);
                att[off..off + dh].copy_from_slice(&head_out);
            }
            let mut o = vec![T::zero(); d];
            crate::tensor::linear_row(&att, self.v(b.wo), Some(self.v(b.bo).data()), &mut o);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
            crate::tensor::layer_norm_row(&x, self.v(b.ln2_g).data(), self.v(b.ln2_b).data(), &mut xhat, &mut h);
            let mut f = vec![T::zero(); cfg.d_ff];
            crate::tensor::linear_row(&h, self.v(b.w1), Some(self.v(b.b1).data()), &mut f);
            f.iter_mut().for_each(|a| *a = crate::tensor::gelu(*a));
            let mut f2 = vec![T::zero(); d];
            crate::tensor::linear_row(&f, self.v(b.w2), Some(self.v(b.b2).data()), &mut f2);
            x.iter_mut().zip(&f2).for_each(|(a, &b)| *a += b);
        }
        let mut out = vec![T::zero(); d];
        crate::tensor::layer_norm_row(&x, self.v(self.stage.lnf_g).data(), self.v(self.stage.lnf_b).data(), &mut xhat, &mut out);
        self.len += 1;
        out
    }

    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); IMAGE_VOCAB];
        crate::tensor::linear_row(hidden, self.v(self.stage.head_w), Some(self.v(self.stage.head_b).data()), &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_groups() {
        let m: Model<f32> = Model::new(ModelConfig::tiny(), 1).unwrap();
        let mut frozen = Vec::new();
        for (id, p) in m.store.iter() {
            if p.frozen {
                frozen.push(m.group_of(id));
            }
        }
        assert_eq!(frozen, vec![ParamGroup::TextEncoder, ParamGroup::ImageEmbedder]);
        assert_eq!(ParamGroup::of("latent.film_beta.w"), ParamGroup::Film);
        assert_eq!(ParamGroup::of("metric.proj.out.b"), ParamGroup::Projection);
        assert_eq!(ParamGroup::of("hr.block0.attn.q.w"), ParamGroup::HrStage);
    }

    #[test]
    fn init_is_deterministic_and_precision_independent() {
        let a: Model<f64> = Model::new(ModelConfig::tiny(), 5).unwrap();
        let b: Model<f64> = Model::new(ModelConfig::tiny(), 5).unwrap();
        assert_eq!(a, b);
        let c: Model<f32> = Model::new(ModelConfig::tiny(), 5).unwrap();
        assert_eq!(a.cast::<f32>(), c);
        let d: Model<f64> = Model::new(ModelConfig::tiny(), 6).unwrap();
        assert_ne!(a, d);
        // frozen tables follow their own seeds, not the init seed
        assert_eq!(a.store.value(a.ids.text), d.store.value(d.ids.text));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { d_model: 10, n_heads: 4, ..ModelConfig::default() };
        assert!(matches!(Model::<f32>::new(bad, 0), Err(Error::Invalid(_))));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let idx = upsample_index();
        assert_eq!(idx.len(), 64);
        assert_eq!(&idx[0..2], &[0, 0]);
        assert_eq!(idx[8], 0);
        assert_eq!(idx[9], 0);
        assert_eq!(idx[63], 15);
        for lr in 0..16 {
            assert_eq!(idx.iter().filter(|&&i| i == lr).count(), 4);
        }
    }
}
