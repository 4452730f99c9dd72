//! Small fully connected network with rectifier hidden layers and a linear
//! output, trained with adaptive-moment updates.
//!
//! Batches are row-major `n x width` slices. Weights are stored input-major
//! (`weights[i * outputs + o]`) so the inner loops run over contiguous output
//! rows.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = libm::sqrt(6.0 / inputs as f64);
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn forward_into(&self, input: &[f64], n: usize, out: &mut Vec<f64>, rectify: bool) {
        out.clear();
        out.reserve(n * self.outputs);
        for row in input.chunks_exact(self.inputs).take(n) {
            let start = out.len();
            out.extend_from_slice(&self.biases);
            let acc = &mut out[start..];
            for (i, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let w = &self.weights[i * self.outputs..(i + 1) * self.outputs];
                for (a, &wo) in acc.iter_mut().zip(w) {
                    *a += x * wo;
                }
            }
            if rectify {
                for a in acc.iter_mut() {
                    if *a < 0.0 {
                        *a = 0.0;
                    }
                }
            }
        }
    }
}

/// Per-layer activations of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    n: usize,
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn batch_len(&self) -> usize {
        self.n
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input at least")
    }
}

/// Gradients shaped like the network's layers: `(weights, biases)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    /// Flat view in the same order as [`Mlp::param`].
    pub fn get(&self, mut index: usize) -> f64 {
        for (w, b) in &self.layers {
            if index < w.len() {
                return w[index];
            }
            index -= w.len();
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("gradient index out of range");
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(inputs);
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    /// Builds a network from explicit layers; adjacent widths must agree.
    pub fn from_layers(layers: Vec<Dense>) -> Option<Self> {
        let consistent = !layers.is_empty()
            && layers.windows(2).all(|w| w[0].outputs == w[1].inputs)
            && layers
                .iter()
                .all(|l| l.weights.len() == l.inputs * l.outputs && l.biases.len() == l.outputs);
        consistent.then_some(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (k, l) in self.layers.iter().enumerate() {
            if index < l.weights.len() {
                return (k, true, index);
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return (k, false, index);
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: layer by layer, weights before biases.
    pub fn param(&self, index: usize) -> f64 {
        let (k, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[k].weights[i]
        } else {
            self.layers[k].biases[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (k, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[k].weights[i] = value;
        } else {
            self.layers[k].biases[i] = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut trace = self.forward_batch(input, 1);
        trace.activations.pop().expect("output layer")
    }

    pub fn forward_batch(&self, input: &[f64], n: usize) -> Trace {
        assert_eq!(input.len(), n * self.inputs());
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward_into(&activations[k], n, &mut out, k != last);
            activations.push(out);
        }
        Trace { n, activations }
    }

    /// Backpropagates `grad_output` (dLoss/dOutput, `n x outputs`) through the
    /// pass recorded in `trace`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64]) -> Gradients {
        let n = trace.n;
        let mut delta = grad_output.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[k];
            let (ins, outs) = (layer.inputs, layer.outputs);
            let mut gw = vec![0.0; ins * outs];
            let mut gb = vec![0.0; outs];
            for b in 0..n {
                let d = &delta[b * outs..(b + 1) * outs];
                for (g, &v) in gb.iter_mut().zip(d) {
                    *g += v;
                }
                for (i, &x) in input[b * ins..(b + 1) * ins].iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    for (g, &v) in gw[i * outs..(i + 1) * outs].iter_mut().zip(d) {
                        *g += x * v;
                    }
                }
            }
            if k > 0 {
                // Hidden inputs are rectified outputs: zero means inactive.
                let mut prev = vec![0.0; n * ins];
                for b in 0..n {
                    let d = &delta[b * outs..(b + 1) * outs];
                    for i in 0..ins {
                        if input[b * ins + i] > 0.0 {
                            let w = &layer.weights[i * outs..(i + 1) * outs];
                            prev[b * ins + i] = w.iter().zip(d).map(|(w, d)| w * d).sum();
                        }
                    }
                }
                delta = prev;
            }
            layers.push((gw, gb));
        }
        layers.reverse();
        Gradients { layers }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let zeros: Vec<_> = net
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
            }
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[k];
            let (mw, mb) = &mut self.m[k];
            let (vw, vb) = &mut self.v[k];
            update(&mut layer.weights, gw, mw, vw);
            update(&mut layer.biases, gb, mb, vb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_forward() {
        let l1 = Dense { inputs: 2, outputs: 2, weights: vec![1.0, -1.0, 2.0, 0.5], biases: vec![0.0, 0.1] };
        let l2 = Dense { inputs: 2, outputs: 1, weights: vec![1.0, 2.0], biases: vec![-0.5] };
        let net = Mlp::from_layers(vec![l1, l2]).unwrap();
        // hidden = relu([1 + 4, -1 + 1 + 0.1]) = [5, 0.1]
        let y = net.forward(&[1.0, 2.0]);
        assert!((y[0] - (5.0 + 0.2 - 0.5)).abs() < 1e-12);
        // hidden = relu([-1 - 2, 1 - 0.5 + 0.1]) = [0, 0.6]
        let y = net.forward(&[-1.0, -1.0]);
        assert!((y[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Dense::new(3, 4, &mut rng);
        let b = Dense::new(5, 1, &mut rng);
        assert!(Mlp::from_layers(vec![a, b]).is_none());
    }

    #[test]
    fn flat_parameter_access_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(3, &[4], 2, &mut rng);
        assert_eq!(net.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        for i in 0..net.num_params() {
            net.set_param(i, i as f64);
        }
        for i in 0..net.num_params() {
            assert_eq!(net.param(i), i as f64);
        }
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(5, &[8, 8], 3, &mut rng);
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = net.forward_batch(&xs, 4);
        for b in 0..4 {
            let single = net.forward(&xs[b * 5..(b + 1) * 5]);
            assert_eq!(&trace.output()[b * 3..(b + 1) * 3], &single[..]);
        }
    }

    #[test]
    fn adam_reduces_a_regression_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Mlp::new(2, &[16], 1, &mut rng);
        let mut opt = Adam::new(&net, 1e-2);
        let xs: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let ys: Vec<f64> = xs.chunks(2).map(|p| p[0] * p[1]).collect();
        let loss = |net: &Mlp| {
            let t = net.forward_batch(&xs, 32);
            t.output().iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 32.0
        };
        let initial = loss(&net);
        for _ in 0..500 {
            let t = net.forward_batch(&xs, 32);
            let g: Vec<f64> = t.output().iter().zip(&ys).map(|(a, b)| 2.0 * (a - b) / 32.0).collect();
            let grads = net.backward(&t, &g);
            opt.step(&mut net, &grads);
        }
        assert!(loss(&net) < initial * 0.05);
    }
}
