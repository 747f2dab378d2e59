//! A task layer followed by an aggregator and classification head.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::{Dropout, LayerConfig, TaskLayer};
use crate::mil::{AggKind, AggOutput, Aggregator, AggregatorConfig};
use crate::params::{Ctx, Init, LoadInit, ParamStore, RandomInit};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer: LayerConfig,
    pub agg: AggregatorConfig,
}

impl ModelConfig {
    pub fn new(layer: LayerConfig, agg: AggKind, num_classes: usize) -> Self {
        let agg = AggregatorConfig::new(agg, layer.d_out, num_classes);
        ModelConfig { layer, agg }
    }

    pub fn num_classes(&self) -> usize {
        self.agg.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub layer: TaskLayer,
    pub agg: Aggregator,
    pub store: ParamStore<T>,
}

pub struct ModelOutput {
    /// Task-layer embeddings, `M×D_out`.
    pub embeddings: Var,
    pub agg: AggOutput,
}

impl<T: Real> Model<T> {
    pub fn build(cfg: &ModelConfig, init: &mut dyn Init<T>) -> Result<Self> {
        let mut store = ParamStore::new();
        let layer = TaskLayer::build(&cfg.layer, &mut store, init)?;
        let agg = Aggregator::build(&cfg.agg, &mut store, init)?;
        Ok(Model {
            cfg: cfg.clone(),
            layer,
            agg,
            store,
        })
    }

    /// Fresh parameters from the `init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut r = rng::child(seed, rng::stream::INIT);
        Self::build(cfg, &mut RandomInit { rng: &mut r })
    }

    /// Rebuilds the structure and takes every tensor from `source` by name.
    pub fn from_store(cfg: &ModelConfig, source: &ParamStore<T>) -> Result<Self> {
        Self::build(cfg, &mut LoadInit { source })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layer: self.layer.clone(),
            agg: self.agg.clone(),
            store: self.store.cast(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<ModelOutput> {
        let embeddings = self.layer.forward(ctx, x, drop)?;
        let agg = self.agg.forward(ctx, embeddings)?;
        Ok(ModelOutput { embeddings, agg })
    }

    /// Class probabilities in inference mode.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let mut r = rng::seeded(0);
        let mut ctx = Ctx::new(&self.store, false, false, &mut r);
        let xv = ctx.graph.constant(x.clone());
        let out = self.forward(&mut ctx, xv, Dropout::none())?;
        let p = ctx.graph.value(out.agg.logits).softmax(1)?;
        Ok(p.to_f64_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = ModelConfig::new(LayerConfig::new(LayerKind::Linear, 4, 3), AggKind::Mean, 2);
        let m = Model::<f32>::init(&cfg, 1).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, -1.0, 0.5, 2.0]]);
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reload_reproduces_parameters() {
        let cfg = ModelConfig::new(LayerConfig::new(LayerKind::SparseSoftmax, 4, 4), AggKind::Abmil, 3);
        let m = Model::<f32>::init(&cfg, 9).unwrap();
        let back = Model::from_store(&cfg, &m.store).unwrap();
        assert_eq!(back.store.tensors(), m.store.tensors());
        assert_eq!(Model::<f32>::init(&cfg, 9).unwrap().store.tensors(), m.store.tensors());
    }
}
