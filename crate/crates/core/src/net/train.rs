//! Alternating negative-batch / positive-bag training.
//!
//! Even steps draw a batch of negatives and take one optimizer step on
//! the mean focal loss; odd steps take one positive bag, gate its
//! instances on the current model's ce values, and step on the summed
//! active loss. Negatives and bags cycle through seeded shuffles, so a
//! run is fully determined by the schedule seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::OptimizerState;
use super::loss::{bag_loss, ce_pos_grad, loss_negative, loss_negative_grad};
use super::model::ScorerModel;
use super::NetError;
use crate::bagging::Patch;
use crate::par::par_map;

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub negative_batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { negative_batch_size: 32, max_steps: 4000, learning_rate: 1e-4, seed: 0 }
    }
}

/// Training inputs: a patch pool (borrowed, possibly scattered across
/// owners) with index lists for the positive bags and the negative pool.
pub struct TrainSet<'a> {
    pub patches: Vec<&'a Patch>,
    pub bags: Vec<Vec<usize>>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Negative,
    Positive,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    pub loss: f64,
    /// Active instance count for positive steps.
    pub active: Option<usize>,
    pub bag_size: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn mean_loss(&self, kind: StepKind, range: std::ops::Range<usize>) -> Option<f64> {
        let picked: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.kind == kind && range.contains(&s.step))
            .map(|s| s.loss)
            .collect();
        if picked.is_empty() {
            None
        } else {
            Some(picked.iter().sum::<f64>() / picked.len() as f64)
        }
    }
}

/// Endlessly cycling seeded shuffle over `0..len`.
struct ShuffledCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ShuffledCycle {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }
}

/// Fixed fan-out for gradient accumulation. Chunks are reduced in index
/// order, so the result is independent of thread count and scheduling.
const GRAD_CHUNKS: usize = 4;

/// Per-sample losses and gradients, accumulated per fixed chunk in
/// parallel and reduced in input order.
fn accumulate_batch(
    model: &ScorerModel,
    items: &[(usize, f64)], // (patch index, loss weight)
    patches: &[&Patch],
    grad_of_p: impl Fn(f64) -> f64 + Sync + Send,
    loss_of_p: impl Fn(f64) -> f64 + Sync + Send,
) -> (f64, Vec<f64>) {
    let chunk_len = items.len().div_ceil(GRAD_CHUNKS).max(1);
    let chunks: Vec<&[(usize, f64)]> = items.chunks(chunk_len).collect();
    let partial = par_map(&chunks, |chunk| {
        let mut grad = vec![0.0; model.param_count()];
        let mut loss = 0.0;
        for &(idx, weight) in *chunk {
            let trace = model
                .forward_trace(patches[idx])
                .expect("training patches match the model geometry");
            model.backward_into(&trace, weight * grad_of_p(trace.p), &mut grad);
            loss += weight * loss_of_p(trace.p);
        }
        (loss, grad)
    });
    let mut total_loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for (loss, g) in partial {
        total_loss += loss;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    (total_loss, grad)
}

/// Run the alternating schedule. The history records every step's loss
/// and, for positive steps, how many bag instances stayed active.
pub fn train(
    model: &mut ScorerModel,
    optimizer: &mut OptimizerState,
    set: &TrainSet,
    schedule: &TrainSchedule,
) -> Result<TrainHistory, NetError> {
    if set.bags.is_empty() || set.negatives.len() < schedule.negative_batch_size {
        return Err(NetError::InsufficientData {
            bags: set.bags.len(),
            negatives: set.negatives.len(),
            need: schedule.negative_batch_size,
        });
    }
    for bag in &set.bags {
        if bag.is_empty() {
            return Err(NetError::EmptyBag);
        }
    }
    let mut neg_cycle = ShuffledCycle::new(set.negatives.len(), schedule.seed ^ 0x6e65_67);
    let mut bag_cycle = ShuffledCycle::new(set.bags.len(), schedule.seed ^ 0x70_6f73);
    let mut history = TrainHistory::default();

    for step in 0..schedule.max_steps {
        if step % 2 == 0 {
            let batch: Vec<(usize, f64)> = (0..schedule.negative_batch_size)
                .map(|_| {
                    (set.negatives[neg_cycle.next_index()], 1.0 / schedule.negative_batch_size as f64)
                })
                .collect();
            let (loss, grad) =
                accumulate_batch(model, &batch, &set.patches, loss_negative_grad, loss_negative);
            optimizer.apply(model.params_mut(), &grad);
            history.steps.push(StepRecord {
                step,
                kind: StepKind::Negative,
                loss,
                active: None,
                bag_size: None,
            });
        } else {
            let bag = &set.bags[bag_cycle.next_index()];
            // fresh forward pass decides the gate before any update; the
            // traces are reused for backprop on the active instances
            let traces = par_map(bag, |&idx| {
                model
                    .forward_trace(set.patches[idx])
                    .expect("training patches match the model geometry")
            });
            let ps: Vec<f64> = traces.iter().map(|t| t.p).collect();
            let (total, mask) = bag_loss(&ps)?;
            let mut grad = vec![0.0; model.param_count()];
            let mut active = 0usize;
            for (trace, &keep) in traces.iter().zip(&mask) {
                if keep {
                    model.backward_into(trace, ce_pos_grad(trace.p), &mut grad);
                    active += 1;
                }
            }
            optimizer.apply(model.params_mut(), &grad);
            history.steps.push(StepRecord {
                step,
                kind: StepKind::Positive,
                loss: total,
                active: Some(active),
                bag_size: Some(bag.len()),
            });
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::Geometry;

    /// Separable toy data: positives carry a bright centered blob, with
    /// per-bag variation; negatives are dim noise.
    fn toy_set(seed: u64) -> (Vec<Patch>, Vec<Vec<usize>>, Vec<usize>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = 8;
        let mut patches = Vec::new();
        let mut bags = Vec::new();
        let mut negatives = Vec::new();
        for _bag in 0..12 {
            let members = rng.random_range(2..5);
            let mut idxs = Vec::new();
            for _ in 0..members {
                let mut data = vec![0.0f32; size * size];
                for y in 2..6 {
                    for x in 2..6 {
                        data[y * size + x] = 0.7 + rng.random_range(0.0..0.3f32);
                    }
                }
                for v in &mut data {
                    *v += rng.random_range(0.0..0.05f32);
                }
                idxs.push(patches.len());
                patches.push(Patch { size, channels: 1, data });
            }
            bags.push(idxs);
        }
        for _ in 0..120 {
            let data: Vec<f32> = (0..size * size).map(|_| rng.random_range(0.0..0.15f32)).collect();
            negatives.push(patches.len());
            patches.push(Patch { size, channels: 1, data });
        }
        (patches, bags, negatives)
    }

    fn toy_model(seed: u64) -> ScorerModel {
        use crate::net::LayerSpec;
        ScorerModel::new(
            Geometry { height: 8, width: 8, channels: 1 },
            &[
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Dense { width: 8 },
                LayerSpec::Dense { width: 1 },
            ],
            seed,
        )
    }

    #[test]
    fn insufficient_data_rejected() {
        let (patches, bags, _) = toy_set(1);
        let mut model = toy_model(1);
        let mut opt = OptimizerState::new(model.param_count(), 1e-3);
        let set = TrainSet { patches: patches.iter().collect(), bags, negatives: vec![0, 1] };
        let err = train(&mut model, &mut opt, &set, &TrainSchedule::default());
        assert!(matches!(err, Err(NetError::InsufficientData { .. })));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (patches, bags, negatives) = toy_set(2);
        let mut model = toy_model(2);
        let before = model.params().to_vec();
        let mut opt = OptimizerState::new(model.param_count(), 0.0);
        let set = TrainSet { patches: patches.iter().collect(), bags, negatives };
        let schedule = TrainSchedule { max_steps: 20, learning_rate: 0.0, ..Default::default() };
        train(&mut model, &mut opt, &set, &schedule).unwrap();
        assert_eq!(model.params(), &before[..], "parameters must be bit-identical");
    }

    #[test]
    fn same_seed_reproduces_history() {
        let (patches, bags, negatives) = toy_set(3);
        let schedule = TrainSchedule {
            max_steps: 30,
            learning_rate: 1e-3,
            seed: 9,
            ..Default::default()
        };
        let run = |_: ()| {
            let mut model = toy_model(3);
            let mut opt = OptimizerState::new(model.param_count(), schedule.learning_rate);
            let set = TrainSet {
                patches: patches.iter().collect(),
                bags: bags.clone(),
                negatives: negatives.clone(),
            };
            let hist = train(&mut model, &mut opt, &set, &schedule).unwrap();
            (model, hist)
        };
        let (m1, h1) = run(());
        let (m2, h2) = run(());
        assert_eq!(m1.params(), m2.params());
        assert_eq!(h1.steps.len(), h2.steps.len());
        for (a, b) in h1.steps.iter().zip(&h2.steps) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {} diverged", a.step);
            assert_eq!(a.active, b.active);
        }
    }

    #[test]
    fn alternation_is_strict() {
        let (patches, bags, negatives) = toy_set(4);
        let mut model = toy_model(4);
        let mut opt = OptimizerState::new(model.param_count(), 1e-3);
        let set = TrainSet { patches: patches.iter().collect(), bags, negatives };
        let schedule = TrainSchedule { max_steps: 10, learning_rate: 1e-3, ..Default::default() };
        let hist = train(&mut model, &mut opt, &set, &schedule).unwrap();
        for rec in &hist.steps {
            let expected =
                if rec.step % 2 == 0 { StepKind::Negative } else { StepKind::Positive };
            assert_eq!(rec.kind, expected);
            if rec.kind == StepKind::Positive {
                assert!(rec.active.unwrap() >= 1, "gate never empties a bag");
            }
        }
    }

    #[test]
    fn separable_toy_converges() {
        let (patches, bags, negatives) = toy_set(5);
        let mut model = toy_model(5);
        let mut opt = OptimizerState::new(model.param_count(), 3e-3);
        let set = TrainSet {
            patches: patches.iter().collect(),
            bags: bags.clone(),
            negatives: negatives.clone(),
        };
        let schedule = TrainSchedule {
            max_steps: 2400,
            learning_rate: 3e-3,
            seed: 5,
            ..Default::default()
        };
        train(&mut model, &mut opt, &set, &schedule).unwrap();
        let mean_neg: f64 = negatives
            .iter()
            .map(|&i| model.forward(&patches[i]).unwrap())
            .sum::<f64>()
            / negatives.len() as f64;
        assert!(mean_neg < 0.1, "negatives should score low, mean {mean_neg}");
        let confident = bags
            .iter()
            .filter(|bag| {
                bag.iter().any(|&i| model.forward(&patches[i]).unwrap() > 0.9)
            })
            .count();
        let ratio = confident as f64 / bags.len() as f64;
        assert!(ratio >= 0.98, "only {confident}/{} bags confident", bags.len());
    }
}
