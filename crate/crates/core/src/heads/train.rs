use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{breakdown, heads_graph, loss_graph, Conditioning, LossBreakdown, ValuePairs};
use crate::encoder::PrecomputedEmbeddings;
use crate::error::{Error, Result};
use crate::model::{Model, TrainItem};
use crate::nn::{Gradients, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// 0 gives plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            batch_size: 8,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss per epoch, measured on the fly before each update.
    pub loss_curve: Vec<f64>,
    /// Gold conditions without a token span (no value supervision).
    pub skipped_spans: usize,
}

/// Loss and parameter gradient for one example under teacher forcing.
pub(crate) fn example_gradient(
    model: &Model,
    item: &TrainItem,
    emb: Option<&PrecomputedEmbeddings>,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(&model.params);
    let (q, h) = model.encode_vars(&mut g, &item.prepared, emb)?;
    let pairs = item.gold.value_pairs();
    let vars = heads_graph(
        &mut g,
        model.heads(),
        q,
        h,
        Conditioning::Gold(item.gold.wn),
        ValuePairs::Only(&pairs),
    );
    let lv = loss_graph(&mut g, &vars, &item.gold);
    let b = breakdown(&g, &lv);
    if let Some((head, value)) = b.first_non_finite() {
        return Err(Error::NonFiniteLoss { head, value });
    }
    Ok((b, g.backward(lv.total)))
}

/// Teacher-forced loss without gradients.
pub fn example_loss(model: &Model, item: &TrainItem, emb: Option<&PrecomputedEmbeddings>) -> Result<LossBreakdown> {
    let mut g = Graph::new(&model.params);
    let (q, h) = model.encode_vars(&mut g, &item.prepared, emb)?;
    let pairs = item.gold.value_pairs();
    let vars = heads_graph(
        &mut g,
        model.heads(),
        q,
        h,
        Conditioning::Gold(item.gold.wn),
        ValuePairs::Only(&pairs),
    );
    let lv = loss_graph(&mut g, &vars, &item.gold);
    Ok(breakdown(&g, &lv))
}

/// Mini-batch gradient descent over `items`, reshuffled every epoch from
/// `config.seed`. `on_epoch` sees each epoch's index and mean loss.
pub fn train(
    model: &mut Model,
    items: &[TrainItem],
    emb: Option<&PrecomputedEmbeddings>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    assert!(config.batch_size > 0, "batch size must be positive");
    let skipped_spans = items.iter().map(|i| i.gold.missing_spans()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = model.params.zeros_like();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; items.len()];
        for batch in order.chunks(config.batch_size) {
            let mut total = model.params.zeros_like();
            for &i in batch {
                let (b, grad) = example_gradient(model, &items[i], emb)?;
                losses[i] = b.total;
                total.accumulate(&grad);
            }
            total.scale(1.0 / batch.len() as f64);
            if config.momentum > 0.0 {
                velocity.scale(config.momentum);
                velocity.accumulate(&total);
                apply(model, &velocity, config.lr);
            } else {
                apply(model, &total, config.lr);
            }
        }
        let mean = if items.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / items.len() as f64
        };
        on_epoch(epoch, mean);
        loss_curve.push(mean);
    }
    Ok(TrainReport {
        loss_curve,
        skipped_spans,
    })
}

fn apply(model: &mut Model, step: &Gradients, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let g = step.get(id);
        for (p, d) in model.params.get_mut(id).data.iter_mut().zip(&g.data) {
            *p -= lr * d;
        }
    }
}
