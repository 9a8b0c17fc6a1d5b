use serde::{Deserialize, Serialize};

use super::train::{example_gradient, example_loss};
use crate::corpus::{ColumnType, Example, SchemaStore, TableSchema};
use crate::encoder::PrecomputedEmbeddings;
use crate::encoder::{EncoderConfig, Vocab};
use crate::error::Result;
use crate::model::{Model, ModelConfig, TrainItem};
use crate::nn::Gradients;
use crate::sketch::{Aggregate, Operator, SqlQuery};

/// Denominator floor for [`relative_error`]; gradients smaller than this are
/// compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference check of the total teacher-forced loss gradient over
/// every scalar parameter of `model`.
pub fn grad_check(
    model: &Model,
    item: &TrainItem,
    emb: Option<&PrecomputedEmbeddings>,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = example_gradient(model, item, emb)?;
    compare(model, item, emb, step, &grads)
}

fn compare(
    model: &Model,
    item: &TrainItem,
    emb: Option<&PrecomputedEmbeddings>,
    step: f64,
    grads: &Gradients,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in model.params.ids().collect::<Vec<_>>() {
        for k in 0..model.params.get(id).len() {
            let orig = probe.params.get(id).data[k];
            probe.params.get_mut(id).data[k] = orig + step;
            let plus = example_loss(&probe, item, emb)?.total;
            probe.params.get_mut(id).data[k] = orig - step;
            let minus = example_loss(&probe, item, emb)?.total;
            probe.params.get_mut(id).data[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(id).data[k];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = err;
                report.worst_param = model.params.name(id).to_string();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Embedding and hidden width 8, a five-token question over two headers
/// whose gold query exercises every head.
pub fn tiny_grad_check_case(seed: u64) -> (Model, TrainItem) {
    let schema = TableSchema::new(
        "tiny",
        vec!["name".into(), "age".into()],
        vec![ColumnType::Text, ColumnType::Real],
    )
    .expect("valid schema");
    let gold = SqlQuery::new(Aggregate::Max, 1)
        .with_cond(0, Operator::Eq, "bob")
        .with_cond(1, Operator::Gt, "3");
    let example = Example::new("age of bob over 3", "tiny", gold);
    let mut schemas = SchemaStore::new();
    schemas.insert("tiny".into(), schema);
    let vocab = Vocab::build(["age", "of", "bob", "over", "3", "name"]);
    let config = ModelConfig {
        encoder: EncoderConfig::trainable(vocab.len(), 8, 8, seed),
        head_hidden: 8,
    };
    let model = Model::new(config, vocab).expect("valid tiny config");
    let item = model.train_item(&example, &schemas).expect("tiny example prepares");
    (model, item)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 4.0]), 0.5);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (model, item) = tiny_grad_check_case(1);
        let (_, mut grads) = example_gradient(&model, &item, None).unwrap();
        let id = model
            .params
            .ids()
            .find(|&id| model.params.name(id) == "sa.out.w")
            .unwrap();
        grads.tensors[id.0].data[0] *= 1.5;
        let r = compare(&model, &item, None, 1e-4, &grads).unwrap();
        assert!(r.max_relative_error > 1e-2, "{r:?}");
        assert_eq!(r.worst_param, "sa.out.w");
        assert_eq!(r.worst_index, 0);
    }
}
