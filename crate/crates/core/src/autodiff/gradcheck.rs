use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Tensor};
use crate::params::ParameterStore;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per tensor; `None` checks all.
    pub coords_per_tensor: Option<usize>,
    /// Seed for choosing the sampled coordinates.
    pub seed: u64,
    /// Smallest denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: None,
            seed: 0,
            floor: 1.0,
        }
    }
}

/// Compares backward gradients against central differences.
///
/// `build` receives a fresh graph and the registered parameters (trainable
/// names as [`Graph::param`], everything else as constants) and returns the
/// scalar loss. The result is the maximum over the checked coordinates of
/// `|analytic - numeric| / max(floor, |numeric|)`.
pub fn grad_check<F, E>(
    build: F,
    params: &ParameterStore,
    trainable: &[String],
    options: &GradCheckOptions,
) -> Result<f64, E>
where
    F: Fn(&mut Graph, &BTreeMap<String, Tensor>) -> Result<Tensor, E>,
    E: From<AutodiffError>,
{
    let eval = |store: &ParameterStore, with_grad: bool| {
        let mut graph = Graph::new();
        let mut bound = BTreeMap::new();
        for (name, t) in store.iter() {
            let leaf = if with_grad && trainable.iter().any(|n| n == name) {
                graph.param(t)
            } else {
                graph.constant(t)
            };
            bound.insert(name.clone(), leaf);
        }
        let loss = build(&mut graph, &bound)?;
        Ok::<_, E>((graph, bound, loss))
    };

    let (graph, bound, loss) = eval(params, true)?;
    let grads = graph.backward(&loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let h = options.step;
    let mut worst: f64 = 0.0;

    for name in trainable {
        let leaf = &bound[name];
        let analytic = grads
            .get(leaf)
            .map(|t| t.to_vec())
            .unwrap_or_else(|| vec![0.0; leaf.len()]);
        let base = params.get(name).expect("trainable names come from the store");
        let coords: Vec<usize> = match options.coords_per_tensor {
            Some(k) if k < base.len() => sample(&mut rng, base.len(), k).into_vec(),
            _ => (0..base.len()).collect(),
        };
        for i in coords {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.perturb(name, i, h);
            minus.perturb(name, i, -h);
            let fp = eval(&plus, false)?.2.item();
            let fm = eval(&minus, false)?.2.item();
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(options.floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
