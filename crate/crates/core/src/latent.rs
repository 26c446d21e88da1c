//! Text-conditional Gaussian latent: posterior encoder, reparameterized
//! sampling, the KL penalty, and the two injection paths (LR prefix row and
//! FiLM modulation of the HR context).

use crate::autodiff::{kl_closed_form, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, LOG_VAR_RANGE};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> Posterior<T> {
    pub fn sigma(&self) -> Vec<T> {
        self.log_var.iter().map(|&l| (l * T::lit(0.5)).exp()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
    pub eps: Vec<T>,
    pub c: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> FilmParams<T> {
    pub fn identity(d: usize) -> Self {
        Self { gamma: vec![T::one(); d], beta: vec![T::zero(); d] }
    }
}

pub fn clamp_log_var<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOG_VAR_RANGE.0)).min(T::lit(LOG_VAR_RANGE.1))
}

pub(crate) fn posterior_nodes<T: Scalar>(model: &Model<T>, tape: &mut Tape<'_, T>, text: NodeId) -> (NodeId, NodeId) {
    let l = model.config.latent_dim;
    let pooled = tape.mean_rows(text);
    let h = model.linear(tape, pooled, &model.ids.posterior_hidden);
    let h = tape.tanh(h);
    let out = model.linear(tape, h, &model.ids.posterior_out);
    let mu = tape.slice_cols(out, 0, l);
    let raw = tape.slice_cols(out, l, l);
    let log_var = tape.clamp(raw, T::lit(LOG_VAR_RANGE.0), T::lit(LOG_VAR_RANGE.1));
    (mu, log_var)
}

pub(crate) fn prefix_node<T: Scalar>(model: &Model<T>, tape: &mut Tape<'_, T>, c: NodeId) -> NodeId {
    model.linear(tape, c, &model.ids.prefix)
}

pub(crate) fn film_nodes<T: Scalar>(model: &Model<T>, tape: &mut Tape<'_, T>, c: NodeId) -> (NodeId, NodeId) {
    let g = model.linear(tape, c, &model.ids.film_gamma);
    let gamma = tape.add_const(g, T::one());
    let beta = model.linear(tape, c, &model.ids.film_beta);
    (gamma, beta)
}

pub(crate) fn apply_film_nodes<T: Scalar>(tape: &mut Tape<'_, T>, context: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    let scaled = tape.mul_row(context, gamma);
    tape.add_row(scaled, beta)
}

fn check_latent<T: Scalar>(model: &Model<T>, c: &[T]) -> Result<()> {
    if c.len() != model.config.latent_dim {
        return Err(Error::shape("latent", model.config.latent_dim, c.len()));
    }
    Ok(())
}

/// `(mu, log_var)` of `q(c | T)` from the mean-pooled text rows; `log_var`
/// is clamped to `[-10, 10]`.
pub fn posterior<T: Scalar>(model: &Model<T>, e_t: &Mat<T>) -> Result<Posterior<T>> {
    model.check_text(e_t)?;
    let mut tape = Tape::new(&model.store);
    let text = tape.constant(e_t.clone());
    let (mu, lv) = posterior_nodes(model, &mut tape, text);
    Ok(Posterior { mu: tape.value(mu).data().to_vec(), log_var: tape.value(lv).data().to_vec() })
}

/// `c = mu + exp(log_var / 2) ⊙ eps`; `eps = 0` gives the mean.
pub fn sample_latent<T: Scalar>(mu: &[T], log_var: &[T], eps: &[T]) -> Result<LatentSample<T>> {
    if mu.len() != log_var.len() || mu.len() != eps.len() {
        return Err(Error::shape("latent parameters", mu.len(), format!("{} / {}", log_var.len(), eps.len())));
    }
    let half = T::lit(0.5);
    let c = mu.iter().zip(log_var).zip(eps).map(|((&m, &l), &e)| m + (l * half).exp() * e).collect();
    Ok(LatentSample { mu: mu.to_vec(), log_var: log_var.to_vec(), eps: eps.to_vec(), c })
}

/// Closed-form `KL(N(mu, diag(exp(log_var))) ‖ N(0, I))`.
pub fn kl_loss<T: Scalar>(mu: &[T], log_var: &[T]) -> Result<T> {
    if mu.len() != log_var.len() {
        return Err(Error::shape("log_var", mu.len(), log_var.len()));
    }
    Ok(kl_closed_form(mu, log_var))
}

pub fn prefix_embed<T: Scalar>(model: &Model<T>, c: &[T]) -> Result<Vec<T>> {
    check_latent(model, c)?;
    let mut tape = Tape::new(&model.store);
    let cn = tape.constant(Mat::row_vector(c));
    let p = prefix_node(model, &mut tape, cn);
    Ok(tape.value(p).data().to_vec())
}

pub fn film_params<T: Scalar>(model: &Model<T>, c: &[T]) -> Result<FilmParams<T>> {
    check_latent(model, c)?;
    let mut tape = Tape::new(&model.store);
    let cn = tape.constant(Mat::row_vector(c));
    let (g, b) = film_nodes(model, &mut tape, cn);
    Ok(FilmParams { gamma: tape.value(g).data().to_vec(), beta: tape.value(b).data().to_vec() })
}

/// `out[p] = gamma ⊙ context[p] + beta` for every row.
pub fn apply_film<T: Scalar>(context: &Mat<T>, film: &FilmParams<T>) -> Result<Mat<T>> {
    let d = context.cols();
    if film.gamma.len() != d || film.beta.len() != d {
        return Err(Error::shape("film parameters", d, format!("{} / {}", film.gamma.len(), film.beta.len())));
    }
    let mut out = context.clone();
    for i in 0..out.rows() {
        for ((x, &g), &b) in out.row_mut(i).iter_mut().zip(&film.gamma).zip(&film.beta) {
            *x *= g;
            *x += b;
        }
    }
    Ok(out)
}
