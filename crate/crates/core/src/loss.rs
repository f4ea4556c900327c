//! Classification head, cross-entropy and the polarity-consistent
//! cross-entropy (PCCE).
//!
//! PCCE multiplies a sample's negative log-likelihood by `1 + λ` when the
//! predicted class and the ground truth sit on opposite sides of the
//! positive/negative polarity split. The gate is read off the current
//! argmax and treated as a constant weight in the backward pass.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Graph, Real, Tensor, Var};

/// Lower bound applied to probabilities before taking the log.
pub const LOG_FLOOR: Real = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

/// Ordered emotion classes with a polarity for each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmotionTaxonomy {
    classes: Vec<String>,
    polarity: Vec<Polarity>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    classes: Vec<String>,
    polarity: BTreeMap<String, Polarity>,
}

impl EmotionTaxonomy {
    pub fn new(classes: Vec<String>, polarity: &BTreeMap<String, Polarity>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("taxonomy has no classes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut pols = Vec::with_capacity(classes.len());
        for c in &classes {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class {c:?} listed twice")));
            }
            pols.push(
                *polarity
                    .get(c)
                    .ok_or_else(|| Error::Config(format!("class {c:?} has no polarity")))?,
            );
        }
        if let Some(extra) = polarity.keys().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!(
                "polarity given for unknown class {extra:?}"
            )));
        }
        Ok(Self {
            classes,
            polarity: pols,
        })
    }

    fn builtin(entries: &[(&str, Polarity)]) -> Self {
        Self {
            classes: entries.iter().map(|e| e.0.to_string()).collect(),
            polarity: entries.iter().map(|e| e.1).collect(),
        }
    }

    /// VideoEmotion-8 (Plutchik's eight categories).
    pub fn ve8() -> Self {
        use Polarity::*;
        Self::builtin(&[
            ("anger", Negative),
            ("anticipation", Positive),
            ("disgust", Negative),
            ("fear", Negative),
            ("joy", Positive),
            ("sadness", Negative),
            ("surprise", Positive),
            ("trust", Positive),
        ])
    }

    /// Ekman-6.
    pub fn e6() -> Self {
        use Polarity::*;
        Self::builtin(&[
            ("anger", Negative),
            ("disgust", Negative),
            ("fear", Negative),
            ("joy", Positive),
            ("sadness", Negative),
            ("surprise", Positive),
        ])
    }

    /// Built-in name (`ve8`, `e6`) or path to a taxonomy JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec.to_ascii_lowercase().as_str() {
            "ve8" | "ve-8" => Ok(Self::ve8()),
            "e6" | "e-6" => Ok(Self::e6()),
            _ => Self::load(spec),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TaxonomyFile = serde_json::from_str(text)?;
        Self::new(f.classes, &f.polarity)
    }

    pub fn to_json(&self) -> String {
        let f = TaxonomyFile {
            classes: self.classes.clone(),
            polarity: self
                .classes
                .iter()
                .cloned()
                .zip(self.polarity.iter().copied())
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("taxonomy serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_name(&self, idx: usize) -> Option<&str> {
        self.classes.get(idx).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn polarity(&self, idx: usize) -> Result<Polarity> {
        self.polarity.get(idx).copied().ok_or_else(|| {
            Error::Contract(format!(
                "class index {idx} out of range for {} classes",
                self.len()
            ))
        })
    }
}

/// `1` when the two classes have different polarity.
pub fn polarity_gate(predicted: usize, truth: usize, tax: &EmotionTaxonomy) -> Result<u8> {
    Ok(u8::from(tax.polarity(predicted)? != tax.polarity(truth)?))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Output of the classification head for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<Real>,
    pub probs: Vec<Real>,
    pub predicted: usize,
}

impl Prediction {
    pub fn from_logits(logits: &[Real]) -> Self {
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        Self {
            logits: logits.to_vec(),
            predicted: argmax(&probs),
            probs,
        }
    }

    /// One prediction per row of a `[N, C]` logit matrix.
    pub fn batch(logits: &Tensor) -> Vec<Self> {
        let c = logits.shape().last().copied().unwrap_or(1);
        logits.data().chunks(c).map(Self::from_logits).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: Real,
    pub taxonomy: EmotionTaxonomy,
}

impl LossConfig {
    pub fn new(lambda: Real, taxonomy: EmotionTaxonomy) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!(
                "penalty coefficient must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(Self { lambda, taxonomy })
    }
}

/// Which objective drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Pcce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Self::Ce),
            "pcce" => Ok(Self::Pcce),
            other => Err(Error::Config(format!("unknown loss {other:?}; expected ce or pcce"))),
        }
    }
}

fn check_labels(n: usize, labels: &[usize], classes: usize) -> Result<()> {
    if n != labels.len() {
        return Err(Error::Contract(format!(
            "{n} predictions but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn weighted_nll(batch: &[Prediction], labels: &[usize], weights: &[Real]) -> Real {
    let total: Real = batch
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, &y), w)| w * p.probs[y].max(LOG_FLOOR).ln())
        .sum();
    -total / batch.len() as Real
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy(batch: &[Prediction], labels: &[usize]) -> Result<Real> {
    let classes = batch.first().map_or(0, |p| p.probs.len());
    check_labels(batch.len(), labels, classes)?;
    Ok(weighted_nll(batch, labels, &vec![1.0; batch.len()]))
}

/// Per-sample factors `1 + λ·g(ŷ, y)`.
pub fn pcce_weights(batch: &[Prediction], labels: &[usize], cfg: &LossConfig) -> Result<Vec<Real>> {
    check_labels(batch.len(), labels, cfg.taxonomy.len())?;
    if let Some(p) = batch.iter().find(|p| p.probs.len() != cfg.taxonomy.len()) {
        return Err(Error::Contract(format!(
            "{} class scores for a {}-class taxonomy",
            p.probs.len(),
            cfg.taxonomy.len()
        )));
    }
    batch
        .iter()
        .zip(labels)
        .map(|(p, &y)| Ok(1.0 + cfg.lambda * Real::from(polarity_gate(p.predicted, y, &cfg.taxonomy)?)))
        .collect()
}

/// Polarity-consistent cross-entropy.
pub fn pcce(batch: &[Prediction], labels: &[usize], cfg: &LossConfig) -> Result<Real> {
    let w = pcce_weights(batch, labels, cfg)?;
    Ok(weighted_nll(batch, labels, &w))
}

/// Records `−(1/N)·Σ wᵢ·log pᵢ,yᵢ` on the graph for `[N, C]` logits.
/// The weights are constants.
pub fn weighted_nll_loss(g: &mut Graph, logits: Var, labels: &[usize], weights: &[Real]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("loss", format!("logits must be [N, C], got {shape:?}")));
    }
    check_labels(shape[0], labels, shape[1])?;
    if weights.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} sample weights for {} samples",
            weights.len(),
            labels.len()
        )));
    }
    let probs = g.softmax(logits)?;
    let picked = g.pick(probs, labels)?;
    let logp = g.log(picked, LOG_FLOOR)?;
    let w = g.constant(Tensor::new(&[weights.len()], weights.to_vec())?);
    let wl = g.mul(logp, w)?;
    let m = g.mean(wl)?;
    g.scale(m, -1.0)
}

/// Fully connected head `W·E + b` over rows of `E[N, D]`.
pub fn classify(g: &mut Graph, embedding: Var, weight: Var, bias: Var) -> Result<Var> {
    let (se, sw) = (g.shape(embedding).to_vec(), g.shape(weight).to_vec());
    if se.len() != 2 || sw.len() != 2 || se[1] != sw[1] || g.shape(bias) != [sw[0]] {
        return Err(Error::dim(
            "classify",
            format!(
                "embedding {se:?}, weight {sw:?}, bias {:?}",
                g.shape(bias)
            ),
        ));
    }
    let z = g.linear(embedding, weight)?;
    g.add_bias(z, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_json_round_trip() {
        let t = EmotionTaxonomy::ve8();
        assert_eq!(EmotionTaxonomy::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn taxonomy_rejects_missing_polarity() {
        let err = EmotionTaxonomy::from_json(r#"{"classes":["joy","fear"],"polarity":{"joy":"pos"}}"#);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn out_of_range_label_is_contract_error() {
        let p = vec![Prediction::from_logits(&[0.0, 0.0])];
        assert!(matches!(cross_entropy(&p, &[2]), Err(Error::Contract(_))));
        assert!(matches!(polarity_gate(0, 9, &EmotionTaxonomy::e6()), Err(Error::Contract(_))));
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(LossConfig::new(-0.5, EmotionTaxonomy::e6()).is_err());
    }
}
