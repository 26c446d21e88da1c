//! Two-stage autoregressive generator: frozen text encoding, the LR and HR
//! causal stages, context upsampling, the likelihood, and ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::forward::{forward_example, LatentInput};
use crate::latent::{apply_film, film_params, posterior, prefix_embed, FilmParams};
use crate::model::{upsample_index, IncrementalStage, Model, IMAGE_BOS, IMAGE_VOCAB};
use crate::scalar::Scalar;
use crate::synth::{PromptSpec, Resolution, TokenGrid, HR_CELLS, LR_CELLS, PROMPT_LEN, PROMPT_VOCAB};
use crate::tensor::{argmax, log_softmax_row, Mat};

fn check_prompt(tokens: &[u32]) -> Result<[u32; PROMPT_LEN]> {
    if tokens.len() != PROMPT_LEN {
        return Err(Error::Prompt { position: tokens.len().min(PROMPT_LEN), reason: format!("expected {PROMPT_LEN} tokens") });
    }
    if let Some((pos, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= PROMPT_VOCAB) {
        return Err(Error::Prompt { position: pos, reason: format!("token id {t} is out of vocabulary") });
    }
    Ok([tokens[0], tokens[1], tokens[2], tokens[3]])
}

fn check_grid(grid: &TokenGrid, res: Resolution, what: &str) -> Result<()> {
    if grid.resolution() != res {
        return Err(Error::shape(what, format!("{res:?}"), format!("{:?}", grid.resolution())));
    }
    Ok(())
}

/// Rows of the frozen text table for the prompt (`4 × d_model`).
pub fn encode_text<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<Mat<T>> {
    let tokens = check_prompt(tokens)?;
    let mut tape = Tape::new(&model.store);
    let rows = model.text_rows(&mut tape, &tokens);
    Ok(tape.value(rows).clone())
}

/// Teacher-forced LR pass; returns `(logits 16×8, hidden 16×d_model)`.
pub fn lr_forward_with_hidden<T: Scalar>(
    model: &Model<T>,
    e_t: &Mat<T>,
    prefix: &[T],
    x_lr: &TokenGrid,
) -> Result<(Mat<T>, Mat<T>)> {
    model.check_text(e_t)?;
    if prefix.len() != model.config.d_model {
        return Err(Error::shape("prefix row", model.config.d_model, prefix.len()));
    }
    check_grid(x_lr, Resolution::Low, "x_lr")?;
    let mut tape = Tape::new(&model.store);
    let p = tape.constant(Mat::row_vector(prefix));
    let t = tape.constant(e_t.clone());
    let (logits, hidden) = model.lr_stage(&mut tape, p, t, x_lr);
    Ok((tape.value(logits).clone(), tape.value(hidden).clone()))
}

pub fn lr_forward<T: Scalar>(model: &Model<T>, e_t: &Mat<T>, prefix: &[T], x_lr: &TokenGrid) -> Result<Mat<T>> {
    Ok(lr_forward_with_hidden(model, e_t, prefix, x_lr)?.0)
}

/// Nearest-neighbor 2× replication of the 16 LR hidden rows onto the 64 HR cells.
pub fn upsample_context<T: Scalar>(lr_hidden: &Mat<T>) -> Result<Mat<T>> {
    if lr_hidden.rows() != LR_CELLS {
        return Err(Error::shape("lr_hidden rows", LR_CELLS, lr_hidden.rows()));
    }
    let idx = upsample_index();
    let mut out = Mat::zeros(HR_CELLS, lr_hidden.cols());
    for (p, &i) in idx.iter().enumerate() {
        out.row_mut(p).copy_from_slice(lr_hidden.row(i));
    }
    Ok(out)
}

/// Teacher-forced HR pass over a `64 × d_model` context, optionally FiLM-modulated first.
pub fn hr_forward<T: Scalar>(
    model: &Model<T>,
    x_hr: &TokenGrid,
    context: &Mat<T>,
    film: Option<&FilmParams<T>>,
) -> Result<Mat<T>> {
    check_grid(x_hr, Resolution::High, "x_hr")?;
    if context.shape() != (HR_CELLS, model.config.d_model) {
        return Err(Error::shape("context", format!("{HR_CELLS}x{}", model.config.d_model), format!("{:?}", context.shape())));
    }
    let ctx = match film {
        Some(f) => apply_film(context, f)?,
        None => context.clone(),
    };
    let mut tape = Tape::new(&model.store);
    let c = tape.constant(ctx);
    let logits = model.hr_stage(&mut tape, c, x_hr);
    Ok(tape.value(logits).clone())
}

/// Mean token cross-entropy over all 16 + 64 positions.
pub fn ar_loss<T: Scalar>(lr_logits: &Mat<T>, hr_logits: &Mat<T>, x_lr: &TokenGrid, x_hr: &TokenGrid) -> Result<T> {
    if lr_logits.shape() != (LR_CELLS, IMAGE_VOCAB) || hr_logits.shape() != (HR_CELLS, IMAGE_VOCAB) {
        return Err(Error::shape("logits", "16x8 and 64x8", format!("{:?} and {:?}", lr_logits.shape(), hr_logits.shape())));
    }
    check_grid(x_lr, Resolution::Low, "x_lr")?;
    check_grid(x_hr, Resolution::High, "x_hr")?;
    let mut total = T::zero();
    for (logits, grid) in [(lr_logits, x_lr), (hr_logits, x_hr)] {
        for (i, &t) in grid.cells().iter().enumerate() {
            total -= log_softmax_row(logits.row(i))[t as usize];
        }
    }
    Ok(total / T::lit((LR_CELLS + HR_CELLS) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodReport<T> {
    pub log_p_lr: T,
    pub log_p_hr: T,
    pub log_p_total: T,
}

/// `log P(x_lr | T) + log P(x_hr | x_lr, T)` under a fixed latent
/// (`None` runs the model without the latent module).
pub fn log_likelihood<T: Scalar>(
    model: &Model<T>,
    x_lr: &TokenGrid,
    x_hr: &TokenGrid,
    prompt: &PromptSpec,
    c: Option<&[T]>,
) -> Result<LikelihoodReport<T>> {
    check_grid(x_lr, Resolution::Low, "x_lr")?;
    check_grid(x_hr, Resolution::High, "x_hr")?;
    let latent = match c {
        Some(c) => {
            if c.len() != model.config.latent_dim {
                return Err(Error::shape("latent", model.config.latent_dim, c.len()));
            }
            LatentInput::Fixed(c.to_vec())
        }
        None => LatentInput::Absent,
    };
    let mut tape = Tape::new(&model.store);
    let nodes = forward_example(model, &mut tape, &prompt.tokens, x_lr, x_hr, &latent, false);
    let log_p_lr = -tape.value(nodes.lr_ce).item();
    let log_p_hr = -tape.value(nodes.hr_ce).item();
    Ok(LikelihoodReport { log_p_lr, log_p_hr, log_p_total: log_p_lr + log_p_hr })
}

/// `mu` of `q(c | T)` for the prompt (the mean-mode latent).
pub fn mean_latent<T: Scalar>(model: &Model<T>, prompt: &PromptSpec) -> Result<Vec<T>> {
    Ok(posterior(model, &encode_text(model, &prompt.tokens)?)?.mu)
}

fn pick<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u8 {
    if temperature == 0.0 {
        return argmax(logits) as u8;
    }
    let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = l.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i as u8;
        }
    }
    // u landed on the rounding slack at the top; take the last positive weight.
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0) as u8
}

/// Ancestral sampling: the LR grid is fully decoded before the HR grid.
/// `temperature == 0` decodes by argmax (lowest id on ties). `c = None`
/// decodes without the latent module.
pub fn sample<T: Scalar>(
    model: &Model<T>,
    prompt: &PromptSpec,
    c: Option<&[T]>,
    temperature: f64,
    seed: u64,
) -> Result<(TokenGrid, TokenGrid)> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature must be finite and non-negative, got {temperature}")));
    }
    let d = model.config.d_model;
    let e_t = encode_text(model, &prompt.tokens)?;
    let (prefix, film) = match c {
        Some(c) => (prefix_embed(model, c)?, Some(film_params(model, c)?)),
        None => (vec![T::zero(); d], None),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut lr = IncrementalStage::new(model, false);
    let row = lr.raw_row(&prefix);
    lr.push(row);
    for i in 0..PROMPT_LEN {
        let row = lr.raw_row(e_t.row(i));
        lr.push(row);
    }
    let mut hidden = lr.push(lr.token_row(IMAGE_BOS, None));
    let mut lr_cells = Vec::with_capacity(LR_CELLS);
    let mut lr_hidden = Mat::zeros(LR_CELLS, d);
    for i in 0..LR_CELLS {
        let tok = pick(&lr.logits(&hidden), temperature, &mut rng);
        lr_cells.push(tok);
        hidden = lr.push(lr.token_row(tok as usize, None));
        lr_hidden.row_mut(i).copy_from_slice(&hidden);
    }

    let mut context = upsample_context(&lr_hidden)?;
    if let Some(f) = &film {
        context = apply_film(&context, f)?;
    }
    let mut hr = IncrementalStage::new(model, true);
    let mut hr_cells = Vec::with_capacity(HR_CELLS);
    let mut prev = IMAGE_BOS;
    for p in 0..HR_CELLS {
        let hidden = hr.push(hr.token_row(prev, Some(context.row(p))));
        let tok = pick(&hr.logits(&hidden), temperature, &mut rng);
        hr_cells.push(tok);
        prev = tok as usize;
    }
    Ok((TokenGrid::new(Resolution::Low, lr_cells)?, TokenGrid::new(Resolution::High, hr_cells)?))
}
