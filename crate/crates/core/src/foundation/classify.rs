use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub scores: Vec<f64>,
    pub label: usize,
}

/// Cosine scores against each class prompt; argmax with the lowest index
/// winning ties. Inputs are expected to be unit-norm already.
pub fn classify_similarity(image: &Tensor, prompts: &[Tensor]) -> Result<Classification> {
    if prompts.is_empty() {
        return Err(Error::Contract(
            "classification needs at least one class prompt".into(),
        ));
    }
    let mut scores = Vec::with_capacity(prompts.len());
    for p in prompts {
        if p.shape() != image.shape() {
            return Err(Error::shape(
                "classify_similarity",
                image.shape(),
                p.shape(),
            ));
        }
        scores.push(image.data().iter().zip(p.data()).map(|(a, b)| a * b).sum());
    }
    let mut label = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[label] {
            label = i;
        }
    }
    Ok(Classification { scores, label })
}
