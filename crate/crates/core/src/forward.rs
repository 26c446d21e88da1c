//! Teacher-forced forward graph of one example through every component.

use crate::autodiff::{NodeId, Tape};
use crate::latent::{apply_film_nodes, film_nodes, posterior_nodes, prefix_node};
use crate::model::{upsample_index, Model};
use crate::scalar::Scalar;
use crate::synth::{TokenGrid, PROMPT_LEN};
use crate::tensor::Mat;

/// How the ambiguity latent enters a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentInput<T> {
    /// Module disabled: zero prefix row, no FiLM.
    Absent,
    /// `c = mu` (mean mode).
    Mean,
    /// `c = mu + sigma ⊙ eps` with the given standard-normal draw.
    Noise(Vec<T>),
    /// A caller-supplied `c`, treated as a constant.
    Fixed(Vec<T>),
}

pub(crate) struct LatentNodes {
    pub c: NodeId,
    pub kl: NodeId,
}

pub(crate) struct ExampleNodes {
    pub latent: Option<LatentNodes>,
    pub lr_ce: NodeId,
    pub hr_ce: NodeId,
    /// Sum of the 80 token cross-entropies.
    pub ce_sum: NodeId,
    /// Softmax of the HR logits, present with `embedding`.
    pub soft: Option<NodeId>,
    /// Frozen image embedding of the teacher-forced soft grid (`1×embed_dim`).
    pub embedding: Option<NodeId>,
}

pub(crate) fn forward_example<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    prompt: &[u32; PROMPT_LEN],
    x_lr: &TokenGrid,
    x_hr: &TokenGrid,
    latent: &LatentInput<T>,
    with_embedding: bool,
) -> ExampleNodes {
    let d = model.config.d_model;
    let text = model.text_rows(tape, prompt);
    let latent_nodes = match latent {
        LatentInput::Absent => None,
        other => {
            let (mu, log_var) = posterior_nodes(model, tape, text);
            let c = match other {
                LatentInput::Mean => mu,
                LatentInput::Noise(eps) => tape.reparam(mu, log_var, eps),
                LatentInput::Fixed(c) => tape.constant(Mat::row_vector(c)),
                LatentInput::Absent => unreachable!(),
            };
            let kl = tape.kl_std_normal(mu, log_var);
            Some(LatentNodes { c, kl })
        }
    };
    let prefix = match &latent_nodes {
        Some(l) => prefix_node(model, tape, l.c),
        None => tape.constant(Mat::zeros(1, d)),
    };
    let (lr_logits, lr_hidden) = model.lr_stage(tape, prefix, text, x_lr);
    let mut context = tape.gather_rows(lr_hidden, &upsample_index());
    if let Some(l) = &latent_nodes {
        let (gamma, beta) = film_nodes(model, tape, l.c);
        context = apply_film_nodes(tape, context, gamma, beta);
    }
    let hr_logits = model.hr_stage(tape, context, x_hr);
    let lr_ce = tape.cross_entropy_sum(lr_logits, &x_lr.tokens());
    let hr_ce = tape.cross_entropy_sum(hr_logits, &x_hr.tokens());
    let ce_sum = tape.sum_scalars(&[lr_ce, hr_ce]);
    let (soft, embedding) = if with_embedding {
        let soft = tape.softmax(hr_logits);
        let (r, c) = tape.value(soft).shape();
        let flat = tape.reshape(soft, 1, r * c);
        let f = tape.param(model.ids.embedder);
        (Some(soft), Some(tape.matmul(flat, f)))
    } else {
        (None, None)
    };
    ExampleNodes { latent: latent_nodes, lr_ce, hr_ce, ce_sum, soft, embedding }
}
