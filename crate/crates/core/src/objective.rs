//! Answer sequences, teacher-forced likelihoods, the answer-only training
//! loss, anomaly scores and evaluation metrics.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{embed, LanguageModel, LmVars, Vocabulary};
use crate::error::{Error, Result};
use crate::relgraph::Label;
use crate::tape::{Tape, Var};

/// Token sequences of the two answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSequences {
    pub fraud: Vec<usize>,
    pub normal: Vec<usize>,
}

impl TargetSequences {
    pub fn new(vocab: &Vocabulary, fraud_text: &str, normal_text: &str) -> Result<Self> {
        let fraud = vocab.encode(fraud_text)?;
        let normal = vocab.encode(normal_text)?;
        if fraud.is_empty() || normal.is_empty() {
            return Err(Error::Config("answer texts must not be empty".into()));
        }
        Ok(Self { fraud, normal })
    }

    pub fn get(&self, label: Label) -> Result<&[usize]> {
        match label {
            Label::Fraud => Ok(&self.fraud),
            Label::Normal => Ok(&self.normal),
            Label::Unlabeled => Err(Error::NoTarget),
        }
    }

    pub fn max_len(&self) -> usize {
        self.fraud.len().max(self.normal.len())
    }
}

/// Log-likelihood of `answer` after `input` on the tape, as a `1 × 1` var.
/// The gold prefix `answer[..j]` is fed back through the embedding table.
pub fn sequence_logprob_on_tape(
    tape: &mut Tape,
    model: &LanguageModel,
    vars: &LmVars,
    input: Var,
    answer: &[usize],
) -> Result<Var> {
    if answer.is_empty() {
        return Err(Error::Empty("answer sequence"));
    }
    let (len, _) = tape.shape(input);
    if len == 0 {
        return Err(Error::Empty("prompt"));
    }
    let vocab_size = model.embedding().vocab_size();
    if let Some(&bad) = answer.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::TokenIndex {
            index: bad,
            size: vocab_size,
        });
    }
    let full = if answer.len() > 1 {
        let prefix = tape.gather_rows(vars.embed, &answer[..answer.len() - 1]);
        tape.concat_rows(&[input, prefix])
    } else {
        input
    };
    let hidden = model.hidden_on_tape(tape, vars, full)?;
    let rows = tape.slice_rows(hidden, len - 1, len - 1 + answer.len());
    let logits = model.logits_on_tape(tape, vars, rows);
    let picks: Vec<(usize, usize)> = answer.iter().enumerate().map(|(j, &t)| (j, t)).collect();
    Ok(tape.log_softmax_pick(logits, &picks))
}

fn frozen(model: &LanguageModel) -> (Tape, LmVars) {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, &|_| false);
    (tape, vars)
}

/// `Σ_j log p(answer_j | input, answer_<j)`.
pub fn sequence_logprob(model: &LanguageModel, input: &Array2<f64>, answer: &[usize]) -> Result<f64> {
    let (mut tape, vars) = frozen(model);
    let x = tape.constant(input.clone());
    let lp = sequence_logprob_on_tape(&mut tape, model, &vars, x, answer)?;
    Ok(tape.scalar(lp))
}

/// `[log P(normal), log P(fraud)]`. Single-token answers share one forward
/// pass since both are read from the last prompt position.
pub fn answer_logprobs(model: &LanguageModel, input: &Array2<f64>, targets: &TargetSequences) -> Result<[f64; 2]> {
    if targets.fraud.len() == 1 && targets.normal.len() == 1 {
        let (mut tape, vars) = frozen(model);
        let x = tape.constant(input.clone());
        let hidden = model.hidden_on_tape(&mut tape, &vars, x)?;
        let len = input.nrows();
        if len == 0 {
            return Err(Error::Empty("prompt"));
        }
        let last = tape.slice_rows(hidden, len - 1, len);
        let logits = model.logits_on_tape(&mut tape, &vars, last);
        let normal = tape.log_softmax_pick(logits, &[(0, targets.normal[0])]);
        let fraud = tape.log_softmax_pick(logits, &[(0, targets.fraud[0])]);
        return Ok([tape.scalar(normal), tape.scalar(fraud)]);
    }
    Ok([
        sequence_logprob(model, input, &targets.normal)?,
        sequence_logprob(model, input, &targets.fraud)?,
    ])
}

/// `log P(fraud) - log P(normal)`.
pub fn score_from_logprobs(lp: [f64; 2]) -> f64 {
    lp[1] - lp[0]
}

/// Fraud only on a strictly positive margin; ties go to normal.
pub fn label_from_score(score: f64) -> Label {
    if score > 0.0 {
        Label::Fraud
    } else {
        Label::Normal
    }
}

pub fn anomaly_score(model: &LanguageModel, input: &Array2<f64>, targets: &TargetSequences) -> Result<f64> {
    Ok(score_from_logprobs(answer_logprobs(model, input, targets)?))
}

pub fn predict(model: &LanguageModel, input: &Array2<f64>, targets: &TargetSequences) -> Result<Label> {
    Ok(label_from_score(anomaly_score(model, input, targets)?))
}

/// Negative log-likelihood of the gold answer; prompt positions carry no
/// loss.
pub fn training_loss(model: &LanguageModel, input: &Array2<f64>, targets: &TargetSequences, y: Label) -> Result<f64> {
    Ok(-sequence_logprob(model, input, targets.get(y)?)?)
}

/// Per-position next-token supervision for the teacher-forced sequence
/// `prompt ++ answer[..N-1]`: `labels[k]` is the token expected after
/// position `k`. Prompt-internal positions are masked, so whatever
/// `prompt_labels` holds never reaches the loss.
pub fn supervision_labels(prompt_labels: &[i64], answer: &[usize]) -> Vec<Option<usize>> {
    let len = prompt_labels.len();
    let mut labels: Vec<Option<usize>> = vec![None; len + answer.len() - 1];
    for (j, &t) in answer.iter().enumerate() {
        labels[len - 1 + j] = Some(t);
    }
    labels
}

/// Masked next-token loss over an explicit embedding sequence: the sum of
/// `-log p(labels[k] | rows ≤ k)` over supervised positions.
pub fn masked_lm_loss(model: &LanguageModel, sequence: &Array2<f64>, labels: &[Option<usize>]) -> Result<f64> {
    if labels.len() != sequence.nrows() {
        return Err(Error::shape(
            "masked_lm_loss",
            format!("{} labels for {} positions", labels.len(), sequence.nrows()),
        ));
    }
    let picks: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(k, l)| l.map(|t| (k, t)))
        .collect();
    if picks.is_empty() {
        return Ok(0.0);
    }
    let (mut tape, vars) = frozen(model);
    let x = tape.constant(sequence.clone());
    let hidden = model.hidden_on_tape(&mut tape, &vars, x)?;
    let logits = model.logits_on_tape(&mut tape, &vars, hidden);
    let lp = tape.log_softmax_pick(logits, &picks);
    Ok(-tape.scalar(lp))
}

/// Training loss through the generic label-masking path, with arbitrary
/// supervision attached to the prompt positions.
pub fn training_loss_with_prompt_labels(
    model: &LanguageModel,
    input: &Array2<f64>,
    targets: &TargetSequences,
    y: Label,
    prompt_labels: &[i64],
) -> Result<f64> {
    if prompt_labels.len() != input.nrows() {
        return Err(Error::shape(
            "training_loss",
            format!("{} prompt labels for {} positions", prompt_labels.len(), input.nrows()),
        ));
    }
    let answer = targets.get(y)?;
    let prefix = embed(&answer[..answer.len() - 1], model.embedding())?;
    let sequence = concatenate(Axis(0), &[input.view(), prefix.view()])
        .map_err(|e| Error::shape("training_loss", e.to_string()))?;
    masked_lm_loss(model, &sequence, &supervision_labels(prompt_labels, answer))
}

/// Metrics with fraud as the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub recall: f64,
    pub g_mean: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_eval: usize,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U with mid-ranks).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "roc_auc");
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let hits = order[i..j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mid * hits as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

pub fn compute_metrics(scores: &[f64], predictions: &[Label], gold: &[Label]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if scores.len() != predictions.len() || scores.len() != gold.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!(
                "{} scores, {} predictions, {} labels",
                scores.len(),
                predictions.len(),
                gold.len()
            ),
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (i, (&p, &g)) in predictions.iter().zip(gold).enumerate() {
        match (p, g) {
            (_, Label::Unlabeled) => return Err(Error::Unlabeled(i)),
            (Label::Fraud, Label::Fraud) => tp += 1,
            (Label::Fraud, Label::Normal) => fp += 1,
            (_, Label::Normal) => tn += 1,
            (_, Label::Fraud) => fn_ += 1,
        }
    }
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let tnr = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
    let g_mean = recall.zip(tnr).map(|(a, b)| (a * b).sqrt());
    let positive: Vec<bool> = gold.iter().map(|&g| g == Label::Fraud).collect();
    let auc = roc_auc(scores, &positive).ok_or(Error::AucUndefined { recall, g_mean })?;
    Ok(EvalReport {
        auc,
        recall: recall.expect("both classes present"),
        g_mean: g_mean.expect("both classes present"),
        tp,
        fp,
        tn,
        fn_,
        n_eval: scores.len(),
    })
}
