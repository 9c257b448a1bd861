//! External domain router: an encoder with an n-way classification head,
//! either a full model or an adapter on a shared backbone.

use rmroute_autograd::rng;
use rmroute_autograd::{Graph, OptimizerState, TensorMap};
use serde::{Deserialize, Serialize};

use crate::data::RewardExample;
use crate::encoder::{
    encode_batch, head_outputs, init_with_head, score_sequences, tokenize, Batch, EncoderConfig,
    Mode, ModelWeights, Params, TokenSequence, Trainable, Vocab,
};
use crate::error::{Error, Result};
use crate::lora::{attach_adapter, AdapterSpec, AdapterWeights};
use crate::train::{run_epochs, TrainConfig, TrainReport};

/// Id under which a router adapter is registered.
pub const ROUTER_ADAPTER_ID: &str = "router";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub domain: String,
    pub index: usize,
    pub probabilities: Vec<f32>,
}

/// Softmax of `logits` (computed in f64) and the argmax of the resulting
/// probabilities; exact ties go to the lowest index.
pub fn decide(logits: &[f32], domains: &[String]) -> Result<RouterDecision> {
    if logits.len() != domains.len() || logits.is_empty() {
        return Err(Error::Config(format!(
            "router produced {} logits for {} domains",
            logits.len(),
            domains.len()
        )));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| f64::from(l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probabilities: Vec<f32> = exps.iter().map(|e| (e / z) as f32).collect();
    let mut index = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[index] {
            index = i;
        }
    }
    Ok(RouterDecision {
        domain: domains[index].clone(),
        index,
        probabilities,
    })
}

/// What the router reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterInput {
    /// Prompt followed by SEP.
    #[default]
    Prompt,
    /// Prompt, SEP, chosen response (ablation).
    PromptAndResponse,
}

pub fn router_tokens(
    prompt: &str,
    response: &str,
    input: RouterInput,
    vocab: &Vocab,
    max_len: usize,
) -> TokenSequence {
    match input {
        RouterInput::Prompt => tokenize(prompt, "", vocab, max_len),
        RouterInput::PromptAndResponse => tokenize(prompt, response, vocab, max_len),
    }
}

#[derive(Clone, Copy, Debug)]
pub enum RouterInit<'a> {
    Full(EncoderConfig),
    Adapter(&'a ModelWeights, &'a AdapterSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum RouterModel {
    Full(ModelWeights),
    /// Adapter with its own n-way head; scored on a shared backbone.
    Adapter(AdapterWeights),
}

impl RouterModel {
    pub fn content_hash(&self) -> String {
        match self {
            Self::Full(w) => w.content_hash(),
            Self::Adapter(a) => a.content_hash(),
        }
    }

    fn outputs(&self) -> Option<usize> {
        match self {
            Self::Full(w) => w.head_outputs(),
            Self::Adapter(a) => a.head_outputs(),
        }
    }

    /// Logits for a batch of router inputs. Adapter routers need `backbone`.
    pub fn logits(
        &self,
        backbone: Option<&ModelWeights>,
        seqs: &[&TokenSequence],
    ) -> Result<Vec<Vec<f32>>> {
        match self {
            Self::Full(w) => score_sequences(w, None, seqs),
            Self::Adapter(a) => {
                let base = backbone
                    .ok_or_else(|| Error::Config("adapter router needs its backbone".into()))?;
                score_sequences(base, Some(a), seqs)
            }
        }
    }
}

/// Seed for router initialization, kept apart from the reward-model seeds.
pub fn router_seed(seed: u64) -> u64 {
    rng::child_seed(seed, "router", 0)
}

/// Cross-entropy training of an n-way router over `domains`. The label of
/// an example is its domain's index.
pub fn train_router(
    data: &[RewardExample],
    domains: &[String],
    vocab: &Vocab,
    cfg: &TrainConfig,
    init: RouterInit<'_>,
    input: RouterInput,
) -> Result<(RouterModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("router training data".into()));
    }
    let mut present: Vec<String> = Vec::new();
    for e in data {
        if !present.contains(&e.domain) {
            present.push(e.domain.clone());
        }
    }
    if present.len() < 2 || domains.len() < 2 {
        return Err(Error::SingleDomain(present));
    }
    let labels: Vec<usize> =
        data.iter()
            .map(|e| {
                domains.iter().position(|d| *d == e.domain).ok_or_else(|| {
                    Error::InvalidData(vec![format!("unknown domain `{}`", e.domain)])
                })
            })
            .collect::<Result<_>>()?;
    let n = domains.len();
    let seed = router_seed(cfg.seed);
    let (mut model, backbone) = match init {
        RouterInit::Full(enc) => (RouterModel::Full(init_with_head(&enc, n, seed)?), None),
        RouterInit::Adapter(base, spec) => {
            let a = attach_adapter(base, spec, seed)?
                .with_head(base.config().hidden_dim, n, seed)?
                .with_id(ROUTER_ADAPTER_ID);
            (RouterModel::Adapter(a), Some(base))
        }
    };
    let enc = match (&model, backbone) {
        (RouterModel::Full(w), _) => *w.config(),
        (_, Some(b)) => *b.config(),
        _ => unreachable!("adapter router always has a backbone"),
    };
    let seqs: Vec<TokenSequence> = data
        .iter()
        .map(|e| router_tokens(&e.prompt, &e.chosen, input, vocab, enc.max_sequence_length))
        .collect();
    let mut opt = OptimizerState::new(cfg.adamw());
    let report = run_epochs(seqs.len(), cfg, |idx, rng| {
        let batch_seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch = Batch::pack(&batch_seqs, &enc)?;
        let mut g = Graph::new();
        let (loss, grads) = {
            let mut p = match (&model, backbone) {
                (RouterModel::Full(w), _) => Params::new(w.tensors(), None, Trainable::Base),
                (RouterModel::Adapter(a), Some(b)) => {
                    Params::new(b.tensors(), Some(a), Trainable::Adapter)
                }
                _ => unreachable!(),
            };
            let mut mode = Mode::train(rng);
            let pooled = encode_batch(&mut g, &mut p, &enc, &batch, &mut mode)?;
            let logits = head_outputs(&mut g, &mut p, pooled)?;
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            (g.item(loss), p.gradients(&g))
        };
        let names: Vec<String> = grads.keys().cloned().collect();
        let target: &mut TensorMap = match &mut model {
            RouterModel::Full(w) => w.tensors_mut(),
            RouterModel::Adapter(a) => a.tensors_mut(),
        };
        opt.step(target, &grads, &names)?;
        Ok(loss)
    })?;
    if model.outputs() != Some(n) {
        return Err(Error::Config(
            "router head width does not match domain count".into(),
        ));
    }
    Ok((model, report))
}

/// A router together with what it needs to turn text into a decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub model: RouterModel,
    pub domains: Vec<String>,
    pub input: RouterInput,
}

impl Router {
    pub fn new(model: RouterModel, domains: Vec<String>, input: RouterInput) -> Result<Self> {
        if model.outputs() != Some(domains.len()) {
            return Err(Error::Config(format!(
                "router head has {:?} outputs for {} domains",
                model.outputs(),
                domains.len()
            )));
        }
        Ok(Self {
            model,
            domains,
            input,
        })
    }

    /// Decisions for many prompts at once.
    pub fn route_batch(
        &self,
        backbone: Option<&ModelWeights>,
        vocab: &Vocab,
        inputs: &[(&str, &str)],
    ) -> Result<Vec<RouterDecision>> {
        let max_len = match (&self.model, backbone) {
            (RouterModel::Full(w), _) => w.config().max_sequence_length,
            (_, Some(b)) => b.config().max_sequence_length,
            _ => return Err(Error::Config("adapter router needs its backbone".into())),
        };
        let seqs: Vec<TokenSequence> = inputs
            .iter()
            .map(|(p, r)| router_tokens(p, r, self.input, vocab, max_len))
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let logits = self.model.logits(backbone, &refs)?;
        logits.iter().map(|l| decide(l, &self.domains)).collect()
    }

    /// Deterministic decision from the prompt (and, in the ablation mode,
    /// the response).
    pub fn route(
        &self,
        backbone: Option<&ModelWeights>,
        vocab: &Vocab,
        prompt: &str,
        response: &str,
    ) -> Result<RouterDecision> {
        Ok(self
            .route_batch(backbone, vocab, &[(prompt, response)])?
            .remove(0))
    }
}

/// Fraction of examples routed to their own domain.
pub fn routing_accuracy(decisions: &[RouterDecision], examples: &[RewardExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = decisions
        .iter()
        .zip(examples)
        .filter(|(d, e)| d.domain == e.domain)
        .count();
    hits as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let d = decide(&[1.0, 3.0, 3.0], &names(3)).unwrap();
        assert_eq!((d.index, d.domain.as_str()), (1, "d1"));
        let d = decide(&[0.0; 4], &names(4)).unwrap();
        assert_eq!(d.index, 0);
        assert!(d.probabilities.iter().all(|&p| p == 0.25));
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let d = decide(&[80.0, -80.0, 3.5, 0.0], &names(4)).unwrap();
        let s: f32 = d.probabilities.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
        assert_eq!(d.index, 0);
    }

    #[test]
    fn single_domain_is_rejected() {
        let ex = RewardExample {
            prompt: "p".into(),
            chosen: "a".into(),
            rejected: "b".into(),
            domain: "d0".into(),
        };
        let vocab = crate::encoder::build_vocab(&["p a b"], 16).unwrap();
        let err = train_router(
            &[ex],
            &names(2),
            &vocab,
            &TrainConfig::desk(crate::train::TrainMethod::Baseline, 0),
            RouterInit::Full(EncoderConfig::desk()),
            RouterInput::Prompt,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingleDomain(_)));
    }
}
