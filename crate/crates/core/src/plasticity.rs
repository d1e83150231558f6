//! Saliency bookkeeping, saliency-driven growth and two-step pruning.
//!
//! Saliency of a weight is `|dL/dw * w|`, summed over the mini-batches since
//! the last plasticity event and divided by the batch count. Growth scores sum
//! it over a unit (a filter's own weights, or a hidden neuron's fan-out
//! column); pruning scores use it per weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicNetwork, LayerKind, UnitParts};
use crate::nn::GradientBundle;

/// Per-weight `Σ |grad * weight|` since the last reset.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyLedger {
    revision: u64,
    /// One accumulator per network layer; empty for layers without weights.
    sums: Vec<Vec<f64>>,
    batch_count: u64,
}

impl SaliencyLedger {
    /// A zeroed ledger congruent with `net`'s current structure.
    pub fn new(net: &DynamicNetwork) -> Self {
        let sums = net
            .layers()
            .iter()
            .map(|n| vec![0.0; n.weights().map_or(0, |w| w.len())])
            .collect();
        Self {
            revision: net.revision(),
            sums,
            batch_count: 0,
        }
    }

    /// Rebuilds a ledger from stored parts (checkpoint loading).
    pub fn from_parts(net: &DynamicNetwork, sums: Vec<Vec<f64>>, batch_count: u64) -> Result<Self> {
        let fresh = Self::new(net);
        if sums.len() != fresh.sums.len() || sums.iter().zip(&fresh.sums).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::StaleLedger(
                "stored accumulators do not match the network".into(),
            ));
        }
        if sums.iter().flatten().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidInput("negative or NaN saliency accumulator".into()));
        }
        Ok(Self {
            sums,
            batch_count,
            ..fresh
        })
    }

    pub fn reset(&mut self, net: &DynamicNetwork) {
        *self = Self::new(net);
    }

    pub fn batch_count(&self) -> u64 {
        self.batch_count
    }

    /// Network revision the accumulators were laid out for.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Raw accumulator of layer `l` (empty for layers without weights).
    pub fn sums(&self, l: usize) -> &[f64] {
        self.sums.get(l).map_or(&[], |v| v.as_slice())
    }

    pub fn all_sums(&self) -> &[Vec<f64>] {
        &self.sums
    }

    fn check_fresh(&self, net: &DynamicNetwork) -> Result<()> {
        if self.revision != net.revision() {
            return Err(Error::StaleLedger(format!(
                "ledger built for revision {}, network is at revision {}",
                self.revision,
                net.revision()
            )));
        }
        Ok(())
    }

    fn check_scorable(&self, net: &DynamicNetwork) -> Result<()> {
        self.check_fresh(net)?;
        if self.batch_count == 0 {
            return Err(Error::Precondition("saliency ledger holds no batches".into()));
        }
        Ok(())
    }

    /// Adds `|grad * weight|` for every weight of every parameterized layer.
    pub fn accumulate(&mut self, net: &DynamicNetwork, grads: &[Option<GradientBundle>]) -> Result<()> {
        self.check_fresh(net)?;
        if grads.len() != net.layers().len() {
            return Err(Error::StaleLedger(format!(
                "{} gradient slots for {} layers",
                grads.len(),
                net.layers().len()
            )));
        }
        for (l, node) in net.layers().iter().enumerate() {
            let Some(w) = node.weights() else { continue };
            let g = grads[l]
                .as_ref()
                .ok_or_else(|| Error::dim(format!("missing gradient for layer {l}")))?;
            if g.d_weights.shape() != w.shape() || self.sums[l].len() != w.len() {
                return Err(Error::StaleLedger(format!(
                    "layer {l}: gradient {:?} vs weights {:?}",
                    g.d_weights.shape(),
                    w.shape()
                )));
            }
            for ((acc, &gw), &wv) in self.sums[l].iter_mut().zip(g.d_weights.data()).zip(w.data()) {
                *acc += (gw as f64 * wv as f64).abs();
            }
        }
        self.batch_count += 1;
        Ok(())
    }

    /// Mean per-filter saliency of conv layer `l`: sum over the filter's `I*K*K` weights.
    pub fn filter_growth_scores(&self, net: &DynamicNetwork, l: usize) -> Result<Vec<f64>> {
        self.check_scorable(net)?;
        let node = layer_of_kind(net, l, LayerKind::Conv)?;
        let fan_in = node.fan_in().expect("conv has weights");
        let n = self.batch_count as f64;
        Ok(self.sums[l].chunks(fan_in).map(|c| c.iter().sum::<f64>() / n).collect())
    }

    /// Mean per-neuron saliency of the hidden neurons produced by fc layer
    /// `l`: sum over each neuron's fan-out column in the next fc layer.
    pub fn neuron_growth_scores(&self, net: &DynamicNetwork, l: usize) -> Result<Vec<f64>> {
        self.check_scorable(net)?;
        let j = net.junction(l)?;
        let w = net.layer(j.outgoing).and_then(|n| n.weights()).expect("fc has weights");
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let acc = &self.sums[j.outgoing];
        let n = self.batch_count as f64;
        Ok((0..cols)
            .map(|i| (0..rows).map(|o| acc[o * cols + i]).sum::<f64>() / n)
            .collect())
    }

    /// Growth scores of the units of layer `l` (filters or hidden neurons).
    pub fn unit_growth_scores(&self, net: &DynamicNetwork, l: usize) -> Result<Vec<f64>> {
        match net.layer(l).map(|n| n.kind()) {
            Some(LayerKind::Conv) => self.filter_growth_scores(net, l),
            Some(LayerKind::Fc) => self.neuron_growth_scores(net, l),
            _ => Err(Error::structural(format!("layer {l} has no growable units"))),
        }
    }

    /// `(flat index, mean saliency)` for every unmasked weight of layer `l`.
    pub fn weight_prune_scores(&self, net: &DynamicNetwork, l: usize) -> Result<Vec<(usize, f64)>> {
        self.check_scorable(net)?;
        let mask = net
            .layer(l)
            .and_then(|n| n.mask())
            .ok_or_else(|| Error::structural(format!("layer {l} has no weights")))?;
        let n = self.batch_count as f64;
        Ok(self.sums[l]
            .iter()
            .enumerate()
            .filter(|&(i, _)| mask.is_active(i))
            .map(|(i, &s)| (i, s / n))
            .collect())
    }
}

fn layer_of_kind(net: &DynamicNetwork, l: usize, kind: LayerKind) -> Result<&crate::graph::LayerNode> {
    match net.layer(l) {
        Some(n) if n.kind() == kind => Ok(n),
        Some(n) => Err(Error::structural(format!(
            "layer {l} is {:?}, expected {kind:?}",
            n.kind()
        ))),
        None => Err(Error::structural(format!("layer {l} does not exist"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    #[default]
    Saliency,
    Random,
}

/// How the uniform perturbation is applied to a split tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// One scalar shared by every element of the tensor.
    Scalar,
    /// An independent draw per element.
    #[default]
    Element,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlasticityConfig {
    /// Fraction of each layer's units split per growth event.
    pub beta: f64,
    /// Scale applied to both halves of a split.
    pub sigma: f64,
    /// Half-range of the uniform noise.
    pub mu: f64,
    pub noise: NoiseMode,
    pub gamma_w: f64,
    pub gamma_f: f64,
    pub gamma_n: f64,
    pub selection_policy: SelectionPolicy,
    pub rng_seed: u64,
}

impl Default for PlasticityConfig {
    fn default() -> Self {
        Self {
            beta: 0.6,
            sigma: 0.5,
            mu: 0.1,
            noise: NoiseMode::Element,
            gamma_w: 0.5,
            gamma_f: 0.5,
            gamma_n: 0.5,
            selection_policy: SelectionPolicy::Saliency,
            rng_seed: 0,
        }
    }
}

impl PlasticityConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64, range: &str| Err(Error::Config(format!("{name} = {v} is outside {range}")));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta", self.beta, "(0, 1]");
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return bad("sigma", self.sigma, "(0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu", self.mu, "[0, 1]");
        }
        for (name, g) in [
            ("gamma_w", self.gamma_w),
            ("gamma_f", self.gamma_f),
            ("gamma_n", self.gamma_n),
        ] {
            if !(g > 0.0 && g < 1.0) {
                return bad(name, g, "(0, 1)");
            }
        }
        Ok(())
    }
}

/// `max(1, round_half_up(beta * n))`, capped at `n`.
pub fn selection_count(n: usize, beta: f64) -> usize {
    let c = (beta * n as f64 + 0.5).floor() as usize;
    c.max(1).min(n)
}

/// Picks the units to grow, returned in ascending index order.
///
/// The saliency policy takes the highest scores with ties going to the lower
/// index; the random policy samples the same count uniformly.
pub fn select_units<R: Rng + ?Sized>(scores: &[f64], beta: f64, policy: SelectionPolicy, rng: &mut R) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let count = selection_count(scores.len(), beta);
    let mut picked = match policy {
        SelectionPolicy::Saliency => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(count);
            order
        }
        SelectionPolicy::Random => rand::seq::index::sample(rng, scores.len(), count).into_vec(),
    };
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthEvent {
    pub epoch: usize,
    pub layer: usize,
    /// Indices (pre-growth) of the units that were split.
    pub units: Vec<usize>,
    pub width_before: usize,
    pub width_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStep {
    Weights,
    Units,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub layer: usize,
    pub step: PruneStep,
    /// Weight steps: flat indices zeroed. Unit steps: pre-removal unit indices removed.
    pub indices: Vec<usize>,
    pub width_before: usize,
    pub width_after: usize,
}

fn noise<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> f32 {
    (mu * (2.0 * rng.gen::<f64>() - 1.0)) as f32
}

/// `sigma * v + x` with `x` either one draw for the whole tensor or one per
/// element.
fn scaled<R: Rng + ?Sized>(values: &[f32], config: &PlasticityConfig, rng: &mut R) -> Vec<f32> {
    let sigma = config.sigma as f32;
    match config.noise {
        NoiseMode::Scalar => {
            let x = noise(config.mu, rng);
            values.iter().map(|&v| sigma * v + x).collect()
        }
        NoiseMode::Element => values.iter().map(|&v| sigma * v + noise(config.mu, rng)).collect(),
    }
}

/// Splits the given units of layer `l` (conv, or a hidden fc layer).
///
/// Units are processed in descending index order; each newborn is inserted
/// right after its parent and inherits the parent's masks. Noise is drawn for
/// the split tensor (newborn, then picked) followed by the mapped tensor.
pub fn grow_units<R: Rng + ?Sized>(
    net: &mut DynamicNetwork,
    l: usize,
    picked: &[usize],
    config: &PlasticityConfig,
    rng: &mut R,
) -> Result<GrowthEvent> {
    let kind = net
        .layer(l)
        .map(|n| n.kind())
        .ok_or_else(|| Error::structural(format!("layer {l} does not exist")))?;
    if kind == LayerKind::Fc {
        net.junction(l)?;
    } else if kind != LayerKind::Conv {
        return Err(Error::structural(format!("layer {l} has no growable units")));
    }
    let width_before = net.layer(l).and_then(|n| n.units()).expect("parameterized");
    if net.consumer_of(l).is_none() {
        return Err(Error::structural(format!("layer {l} is the class-output layer")));
    }
    let sigma = config.sigma as f32;
    let mut order = picked.to_vec();
    order.sort_unstable();
    order.dedup();
    for &j in order.iter().rev() {
        let parts = net.unit_parts(l, j)?;
        // Conv: the filter is split, its consumer slice is mapped.
        // Fc: the fan-out column is split, the fan-in row is mapped.
        let ((own_new, own_old), (cons_new, cons_old)) = match kind {
            LayerKind::Conv => {
                let own_new = scaled(&parts.own, config, rng);
                let own_old = scaled(&parts.own, config, rng);
                let cons_new = scaled(&parts.consumer, config, rng);
                let cons_old = scaled(&parts.consumer, config, rng);
                ((own_new, own_old), (cons_new, cons_old))
            }
            _ => {
                let cons_new = scaled(&parts.consumer, config, rng);
                let cons_old = scaled(&parts.consumer, config, rng);
                let own_new = scaled(&parts.own, config, rng);
                let own_old = scaled(&parts.own, config, rng);
                ((own_new, own_old), (cons_new, cons_old))
            }
        };
        let bias = sigma * parts.bias;
        net.write_unit(l, j, &own_old, bias, &cons_old)?;
        let newborn = UnitParts {
            own: own_new,
            own_mask: parts.own_mask,
            bias,
            consumer: cons_new,
            consumer_mask: parts.consumer_mask,
        };
        net.insert_unit(l, j + 1, &newborn)?;
    }
    let width_after = net.layer(l).and_then(|n| n.units()).expect("parameterized");
    Ok(GrowthEvent {
        epoch: 0,
        layer: l,
        units: order,
        width_before,
        width_after,
    })
}

/// Scores, selects and splits the units of one layer; the ledger must be
/// fresh and is reset afterwards.
pub fn grow_layer<R: Rng + ?Sized>(
    net: &mut DynamicNetwork,
    ledger: &mut SaliencyLedger,
    l: usize,
    config: &PlasticityConfig,
    rng: &mut R,
) -> Result<GrowthEvent> {
    if net.output_layer() == Some(l) {
        return Err(Error::structural(format!("layer {l} is the class-output layer")));
    }
    let scores = ledger.unit_growth_scores(net, l)?;
    let picked = select_units(&scores, config.beta, config.selection_policy, rng);
    let event = grow_units(net, l, &picked, config, rng)?;
    ledger.reset(net);
    Ok(event)
}

/// Grows every conv and hidden fc layer, input to output.
///
/// All layers are scored from the same ledger before any edit, since after
/// the first split the accumulators no longer line up with the network.
/// Growing layer `l` only reshapes the input side of its consumer, which
/// feeds neither the consumer's own ranking order nor any later selection.
pub fn grow_network<R: Rng + ?Sized>(
    net: &mut DynamicNetwork,
    ledger: &mut SaliencyLedger,
    config: &PlasticityConfig,
    rng: &mut R,
) -> Result<Vec<GrowthEvent>> {
    let layers = net.unit_layers();
    let mut selections = Vec::with_capacity(layers.len());
    for &l in &layers {
        let scores = ledger.unit_growth_scores(net, l)?;
        selections.push(select_units(&scores, config.beta, config.selection_policy, rng));
    }
    let mut events = Vec::with_capacity(layers.len());
    for (&l, picked) in layers.iter().zip(&selections) {
        events.push(grow_units(net, l, picked, config, rng)?);
    }
    ledger.reset(net);
    Ok(events)
}

/// Zeroes and permanently masks the `floor(gamma_w * active)` lowest-scoring
/// weights of layer `l`. Ties go to the lower flat index. Returns the
/// zeroed indices in ascending order.
pub fn prune_weights(net: &mut DynamicNetwork, l: usize, gamma_w: f64, scores: &[(usize, f64)]) -> Result<Vec<usize>> {
    let node = net
        .layer_mut(l)
        .ok_or_else(|| Error::structural(format!("layer {l} does not exist")))?;
    let (w, _, t) = node
        .parts_mut()
        .ok_or_else(|| Error::structural(format!("layer {l} has no weights")))?;
    let active = t.mask.active_count();
    let count = ((gamma_w * active as f64) + 1e-9).floor() as usize;
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .filter(|&(i, _)| i < t.mask.len() && t.mask.is_active(i))
        .collect();
    if ranked.len() != active {
        return Err(Error::Precondition(format!(
            "scores cover {} of {active} active weights in layer {l}",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut zeroed: Vec<usize> = ranked.iter().take(count).map(|&(i, _)| i).collect();
    zeroed.sort_unstable();
    for &i in &zeroed {
        t.mask.clear(i);
        w.data_mut()[i] = 0.0;
        t.velocity_w.data_mut()[i] = 0.0;
    }
    Ok(zeroed)
}

/// Zeroed fraction of each unit of layer `l`: a filter's own weights, or a
/// hidden neuron's fan-out column.
pub fn unit_sparsity(net: &DynamicNetwork, l: usize) -> Result<Vec<f64>> {
    let node = net
        .layer(l)
        .ok_or_else(|| Error::structural(format!("layer {l} does not exist")))?;
    match node.kind() {
        LayerKind::Conv => {
            let m = node.mask().expect("conv has a mask");
            let fan_in = node.fan_in().expect("conv has weights");
            Ok(m.bits()
                .chunks(fan_in)
                .map(|c| c.iter().filter(|&&b| !b).count() as f64 / fan_in as f64)
                .collect())
        }
        LayerKind::Fc => {
            let j = net.junction(l)?;
            let m = net.layer(j.outgoing).and_then(|n| n.mask()).expect("fc has a mask");
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            Ok((0..cols)
                .map(|i| (0..rows).filter(|&o| !m.is_active(o * cols + i)).count() as f64 / rows as f64)
                .collect())
        }
        _ => Err(Error::structural(format!("layer {l} has no units"))),
    }
}

/// Physically removes every unit whose sparsity exceeds its threshold
/// (`gamma_f` for filters, `gamma_n` for hidden neurons), layer by layer from
/// the input. Each layer keeps at least one unit (the least sparse one,
/// lower index on ties); the class-output layer is never touched.
pub fn prune_units(net: &mut DynamicNetwork, gamma_f: f64, gamma_n: f64) -> Result<Vec<PruneEvent>> {
    let mut events = Vec::new();
    for l in net.unit_layers() {
        let threshold = match net.layer(l).map(|n| n.kind()) {
            Some(LayerKind::Conv) => gamma_f,
            _ => gamma_n,
        };
        let sparsity = unit_sparsity(net, l)?;
        let mut doomed: Vec<usize> = (0..sparsity.len()).filter(|&u| sparsity[u] > threshold).collect();
        if doomed.len() == sparsity.len() {
            let keep = (0..sparsity.len())
                .min_by(|&a, &b| sparsity[a].total_cmp(&sparsity[b]).then(a.cmp(&b)))
                .expect("non-empty layer");
            doomed.retain(|&u| u != keep);
        }
        if doomed.is_empty() {
            continue;
        }
        let width_before = sparsity.len();
        for &u in doomed.iter().rev() {
            net.remove_unit(l, u)?;
        }
        events.push(PruneEvent {
            epoch: 0,
            layer: l,
            step: PruneStep::Units,
            width_before,
            width_after: width_before - doomed.len(),
            indices: doomed,
        });
    }
    Ok(events)
}

/// One pruning iteration: weight pruning in every parameterized layer, then a
/// unit-removal pass; the ledger is reset afterwards.
pub fn prune_network(
    net: &mut DynamicNetwork,
    ledger: &mut SaliencyLedger,
    config: &PlasticityConfig,
) -> Result<Vec<PruneEvent>> {
    let mut events = Vec::new();
    for l in net.param_layers() {
        let scores = ledger.weight_prune_scores(net, l)?;
        let width = net.layer(l).and_then(|n| n.units()).expect("parameterized");
        let zeroed = prune_weights(net, l, config.gamma_w, &scores)?;
        events.push(PruneEvent {
            epoch: 0,
            layer: l,
            step: PruneStep::Weights,
            indices: zeroed,
            width_before: width,
            width_after: width,
        });
    }
    events.extend(prune_units(net, config.gamma_f, config.gamma_n)?);
    ledger.reset(net);
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerSpec, NetworkSpec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn lenet(widths: [usize; 3]) -> DynamicNetwork {
        DynamicNetwork::build(&NetworkSpec::lenet5(widths[0], widths[1], widths[2], 10), &mut rng()).unwrap()
    }

    fn bundles(net: &DynamicNetwork, mut f: impl FnMut(usize, usize) -> f32) -> Vec<Option<GradientBundle>> {
        net.layers()
            .iter()
            .enumerate()
            .map(|(l, n)| {
                n.weights().map(|w| {
                    let data = (0..w.len()).map(|i| f(l, i)).collect();
                    GradientBundle {
                        d_input: Tensor::zeros(&[1]),
                        d_weights: Tensor::from_vec(w.shape(), data).unwrap(),
                        d_bias: Tensor::zeros(n.bias().unwrap().shape()),
                    }
                })
            })
            .collect()
    }

    /// conv(2 filters, 1x2x2 on 1x2x2 input) -> flatten -> fc(2) -> relu -> fc(3)
    fn toy() -> DynamicNetwork {
        let spec = NetworkSpec {
            input: (1, 2, 2),
            layers: vec![
                LayerSpec::Conv {
                    out: 2,
                    kernel: 2,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Flatten,
                LayerSpec::Fc { out: 2 },
                LayerSpec::Relu,
                LayerSpec::Fc { out: 3 },
            ],
        };
        DynamicNetwork::build(&spec, &mut rng()).unwrap()
    }

    fn set_weights(net: &mut DynamicNetwork, l: usize, values: &[f32]) {
        let (w, _, _) = net.layer_mut(l).unwrap().parts_mut().unwrap();
        w.data_mut().copy_from_slice(values);
    }

    #[test]
    fn zero_gradient_leaves_ledger_untouched() {
        let net = lenet([2, 3, 4]);
        let mut ledger = SaliencyLedger::new(&net);
        ledger.accumulate(&net, &bundles(&net, |_, _| 0.0)).unwrap();
        assert!(ledger.all_sums().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(ledger.batch_count(), 1);
    }

    #[test]
    fn two_batches_sum_and_sign_invariance() {
        let mut net = toy();
        set_weights(&mut net, 0, &[2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut a = SaliencyLedger::new(&net);
        let g = bundles(&net, |l, i| if l == 0 && i == 0 { 0.1 } else { 0.0 });
        a.accumulate(&net, &g).unwrap();
        a.accumulate(&net, &g).unwrap();
        assert!((a.sums(0)[0] - 0.4).abs() < 1e-7);

        let mut b = SaliencyLedger::new(&net);
        let neg = bundles(&net, |l, i| if l == 0 && i == 0 { -0.1 } else { 0.0 });
        b.accumulate(&net, &neg).unwrap();
        b.accumulate(&net, &neg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn filter_score_matches_expanded_sum() {
        let mut net = toy();
        set_weights(&mut net, 0, &[0.5, -0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let grads = [0.2f32, 0.2, -0.1, 0.3];
        let mut ledger = SaliencyLedger::new(&net);
        ledger
            .accumulate(&net, &bundles(&net, |l, i| if l == 0 { grads[i % 4] } else { 0.0 }))
            .unwrap();
        let gs = ledger.filter_growth_scores(&net, 0).unwrap();
        assert!((gs[0] - 0.3).abs() < 1e-7, "{gs:?}");
        assert_eq!(gs[1], 0.0);
    }

    #[test]
    fn neuron_score_uses_fan_out_column() {
        let mut net = toy();
        // outgoing fc is 3x2; neuron 0's column is rows 0..3 at col 0
        set_weights(&mut net, 4, &[2.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let g = [0.1f32, 9.0, -0.2, 9.0, 9.0, 9.0];
        let mut ledger = SaliencyLedger::new(&net);
        ledger
            .accumulate(&net, &bundles(&net, |l, i| if l == 4 { g[i] } else { 0.0 }))
            .unwrap();
        let gs = ledger.neuron_growth_scores(&net, 2).unwrap();
        assert!((gs[0] - 0.4).abs() < 1e-6);
        assert_eq!(gs[1], 0.0);
    }

    #[test]
    fn empty_and_stale_ledgers_are_rejected() {
        let mut net = lenet([2, 3, 4]);
        let mut ledger = SaliencyLedger::new(&net);
        assert!(matches!(
            ledger.filter_growth_scores(&net, 0),
            Err(Error::Precondition(_))
        ));
        ledger.accumulate(&net, &bundles(&net, |_, _| 1.0)).unwrap();
        net.remove_unit(0, 0).unwrap();
        assert!(matches!(
            ledger.filter_growth_scores(&net, 0),
            Err(Error::StaleLedger(_))
        ));
        assert!(matches!(
            ledger.accumulate(&net, &bundles(&net, |_, _| 1.0)),
            Err(Error::StaleLedger(_))
        ));
    }

    #[test]
    fn selection_examples() {
        let mut r = rng();
        assert_eq!(
            select_units(&[0.3, 0.9, 0.1, 0.5], 0.5, SelectionPolicy::Saliency, &mut r),
            vec![1, 3]
        );
        assert_eq!(
            select_units(&[1.0; 8], 0.6, SelectionPolicy::Saliency, &mut r),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(selection_count(8, 0.6), 5);
        assert_eq!(selection_count(13, 0.6), 8);
        assert_eq!(selection_count(3, 0.01), 1);
        let random = select_units(&[1.0; 8], 0.6, SelectionPolicy::Random, &mut r);
        assert_eq!(random.len(), 5);
        assert!(random.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pure_split_halves_and_duplicates() {
        let mut net = lenet([2, 3, 4]);
        {
            let (w, b, _) = net.layer_mut(0).unwrap().parts_mut().unwrap();
            w.data_mut()[0] = 0.8;
            b.data_mut()[0] = 0.6;
        }
        let before = net.unit_parts(0, 0).unwrap();
        let cfg = PlasticityConfig {
            mu: 0.0,
            sigma: 0.5,
            ..Default::default()
        };
        let ev = grow_units(&mut net, 0, &[0], &cfg, &mut rng()).unwrap();
        assert_eq!((ev.width_before, ev.width_after), (2, 3));
        let picked = net.unit_parts(0, 0).unwrap();
        let newborn = net.unit_parts(0, 1).unwrap();
        assert_eq!(picked.own[0], 0.4);
        assert_eq!(picked, newborn);
        assert_eq!(picked.bias, 0.3);
        for (a, b) in before.consumer.iter().zip(&picked.consumer) {
            assert_eq!(*b, 0.5 * a);
        }
        assert!(net.validate().is_empty());
    }

    #[test]
    fn hidden_fc_split() {
        let mut net = lenet([2, 3, 4]);
        let before = net.unit_parts(7, 2).unwrap();
        let cfg = PlasticityConfig {
            mu: 0.0,
            ..Default::default()
        };
        grow_units(&mut net, 7, &[2], &cfg, &mut rng()).unwrap();
        assert_eq!(net.describe().widths, vec![2, 3, 5, 10]);
        let a = net.unit_parts(7, 2).unwrap();
        let b = net.unit_parts(7, 3).unwrap();
        assert_eq!(a, b);
        for (x, y) in before.consumer.iter().zip(&a.consumer) {
            assert_eq!(*y, 0.5 * x);
        }
    }

    #[test]
    fn scalar_noise_is_shared_across_the_tensor() {
        let mut net = lenet([2, 3, 4]);
        let before = net.unit_parts(0, 1).unwrap();
        let cfg = PlasticityConfig {
            mu: 0.1,
            noise: NoiseMode::Scalar,
            ..Default::default()
        };
        grow_units(&mut net, 0, &[1], &cfg, &mut rng()).unwrap();
        for j in [1, 2] {
            let after = net.unit_parts(0, j).unwrap();
            let x = after.own[0] - 0.5 * before.own[0];
            assert!(x.abs() <= 0.1 + 1e-6);
            for (a, b) in after.own.iter().zip(&before.own) {
                assert!((a - 0.5 * b - x).abs() < 1e-6, "noise must be one scalar per tensor");
            }
        }
    }

    #[test]
    fn element_noise_varies_within_mu() {
        let mut net = lenet([2, 3, 4]);
        let before = net.unit_parts(0, 1).unwrap();
        let cfg = PlasticityConfig {
            mu: 0.1,
            ..Default::default()
        };
        grow_units(&mut net, 0, &[1], &cfg, &mut rng()).unwrap();
        let after = net.unit_parts(0, 2).unwrap();
        let x: Vec<f32> = after.own.iter().zip(&before.own).map(|(a, b)| a - 0.5 * b).collect();
        assert!(x.iter().all(|v| v.abs() <= 0.1 + 1e-6));
        assert!(x.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn output_layer_cannot_grow() {
        let mut net = lenet([2, 3, 4]);
        let mut ledger = SaliencyLedger::new(&net);
        ledger.accumulate(&net, &bundles(&net, |_, _| 1.0)).unwrap();
        let cfg = PlasticityConfig::default();
        assert!(matches!(
            grow_layer(&mut net, &mut ledger, 9, &cfg, &mut rng()),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn network_growth_widths() {
        let mut net = lenet([8, 16, 32]);
        let mut ledger = SaliencyLedger::new(&net);
        ledger.accumulate(&net, &bundles(&net, |_, i| (i % 7) as f32)).unwrap();
        let cfg = PlasticityConfig::default();
        let events = grow_network(&mut net, &mut ledger, &cfg, &mut rng()).unwrap();
        assert_eq!(events.len(), 3);
        assert_eq!(net.describe().widths, vec![13, 26, 51, 10]);
        assert!(net.validate().is_empty());
        assert_eq!(ledger.batch_count(), 0);
        ledger.accumulate(&net, &bundles(&net, |_, i| (i % 5) as f32)).unwrap();
        grow_network(&mut net, &mut ledger, &cfg, &mut rng()).unwrap();
        assert_eq!(net.describe().widths[0], 21);
    }

    #[test]
    fn weight_pruning_examples() {
        let mut net = toy();
        let scores = [
            (0, 0.4),
            (1, 0.1),
            (2, 0.3),
            (3, 0.2),
            (4, 1.0),
            (5, 1.0),
            (6, 1.0),
            (7, 1.0),
        ];
        let zeroed = prune_weights(&mut net, 0, 0.25, &scores).unwrap();
        assert_eq!(zeroed, vec![1, 3]);
        let w = net.layer(0).unwrap().weights().unwrap();
        assert_eq!((w.data()[1], w.data()[3]), (0.0, 0.0));
        let mask = net.layer(0).unwrap().mask().unwrap();
        assert!(!mask.is_active(1) && !mask.is_active(3));

        let before = net.clone();
        let rest: Vec<_> = scores.iter().copied().filter(|&(i, _)| i != 1 && i != 3).collect();
        assert!(prune_weights(&mut net, 0, 0.1, &rest).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn unit_pruning_threshold_is_strict() {
        let mut net = lenet([3, 3, 4]);
        // filter 0 of conv1: 16 of 25 zeroed -> 0.64 > 0.6; filter 1: exactly 15/25 = 0.6 -> kept
        let scores: Vec<(usize, f64)> = (0..75)
            .map(|i| (i, if i < 16 || (25..40).contains(&i) { 0.0 } else { 1.0 }))
            .collect();
        prune_weights(&mut net, 0, 31.0 / 75.0, &scores).unwrap();
        assert_eq!(unit_sparsity(&net, 0).unwrap()[..2], [0.64, 0.6]);
        let events = prune_units(&mut net, 0.6, 0.6).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].indices, vec![0]);
        assert_eq!(net.describe().widths, vec![2, 3, 4, 10]);
        assert!(net.validate().is_empty());
    }

    #[test]
    fn unit_floor_spares_least_sparse() {
        let mut net = lenet([2, 3, 4]);
        for l in net.param_layers() {
            let n = net.layer(l).unwrap().weights().unwrap().len();
            let scores: Vec<_> = (0..n).map(|i| (i, i as f64)).collect();
            prune_weights(&mut net, l, 0.9, &scores).unwrap();
        }
        prune_units(&mut net, 0.5, 0.5).unwrap();
        let widths = net.describe().widths;
        assert_eq!(widths[3], 10);
        assert!(widths.iter().all(|&w| w >= 1));
        assert!(net.validate().is_empty());
    }

    #[test]
    fn prune_network_shrinks_params() {
        let mut net = lenet([4, 6, 8]);
        let mut ledger = SaliencyLedger::new(&net);
        let mut r = rng();
        let g = bundles(&net, |_, _| r.gen_range(-1.0..1.0));
        ledger.accumulate(&net, &g).unwrap();
        let cfg = PlasticityConfig {
            gamma_w: 0.5,
            gamma_f: 0.5,
            gamma_n: 0.5,
            ..Default::default()
        };
        let before = net.describe();
        prune_network(&mut net, &mut ledger, &cfg).unwrap();
        let after = net.describe();
        assert!(after.effective_params < before.effective_params);
        assert!(net.validate().is_empty());
        ledger.accumulate(&net, &bundles(&net, |_, _| 1.0)).unwrap();
        prune_network(&mut net, &mut ledger, &cfg).unwrap();
        assert!(net.describe().effective_params < after.effective_params);
    }
}
