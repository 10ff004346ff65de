//! Fluency filter: grade every pseudo sentence with CIDEr against the frozen
//! captioner's prediction and keep the best one.

mod cider;
mod tokenize;

use serde::{Deserialize, Serialize};

pub use cider::{
    build_idf, cider, cider_d, cider_weighted, CiderParams, CiderVariant, IdfTable, NGramProfile,
    WeightedProfile, DEFAULT_SIGMA, MAX_N,
};
pub use tokenize::tokenize;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("idf corpus is empty")]
    EmptyCorpus,
    #[error("no candidates for image {0:?}")]
    NoCandidates(String),
    #[error("prediction for image {0:?} has no tokens")]
    EmptyPrediction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub selected_index: usize,
    pub selected_sentence: String,
}

/// Index of the maximum, lowest index on ties. `None` for an empty slice.
pub fn argmax_lowest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Score each candidate against the single prediction reference and select
/// the argmax.
pub fn select_best<S: AsRef<str>>(
    image_id: &str,
    candidates: &[S],
    prediction: &str,
    idf: &IdfTable,
    params: CiderParams,
) -> Result<FilterResult, FilterError> {
    if candidates.is_empty() {
        return Err(FilterError::NoCandidates(image_id.to_owned()));
    }
    let reference = NGramProfile::from_text(prediction);
    if reference.len == 0 {
        return Err(FilterError::EmptyPrediction(image_id.to_owned()));
    }
    let refs = [WeightedProfile::new(&reference, idf)];
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| cider_weighted(&WeightedProfile::from_text(c.as_ref(), idf), &refs, params))
        .collect();
    let selected_index = argmax_lowest(&scores).expect("non-empty");
    Ok(FilterResult {
        image_id: image_id.to_owned(),
        selected_sentence: candidates[selected_index].as_ref().to_owned(),
        scores,
        selected_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idf() -> IdfTable {
        build_idf(&[
            "a dog runs across the green field",
            "a cat sits on a sofa",
            "two people ride bikes downtown",
        ])
        .unwrap()
    }

    #[test]
    fn prediction_itself_wins() {
        let pred = "a dog runs across the green field";
        let r = select_best(
            "img",
            &[pred, "two people ride bikes downtown"],
            pred,
            &idf(),
            CiderParams::default(),
        )
        .unwrap();
        assert_eq!(r.selected_index, 0);
        assert_eq!(r.selected_sentence, pred);
        assert!(r.scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = "a cat sits";
        let r = select_best("img", &[c, c, c], "a cat sits on a sofa", &idf(), CiderParams::default())
            .unwrap();
        assert_eq!(r.selected_index, 0);
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_lowest(&[]), None);
    }

    #[test]
    fn error_paths() {
        let none: [&str; 0] = [];
        assert_eq!(
            select_best("img", &none, "a dog", &idf(), CiderParams::default()),
            Err(FilterError::NoCandidates("img".into()))
        );
        assert_eq!(
            select_best("img", &["a dog"], "?!", &idf(), CiderParams::default()),
            Err(FilterError::EmptyPrediction("img".into()))
        );
    }
}
