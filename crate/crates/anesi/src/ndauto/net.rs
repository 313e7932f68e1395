//! Multi-layer perceptrons with ReLU hidden layers, built on the tape or
//! evaluated directly when no gradient is needed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::kernels;
use super::optim::{ParamBinding, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::AutoError;

/// Output head of an MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Probability vector over the output entries.
    Softmax,
    /// `(mean, log-std)` pair; the final layer must have width 2.
    Gaussian,
}

#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, head: Head) -> Self {
        Self {
            input,
            hidden,
            output,
            head,
        }
    }

    /// Layer widths including input and output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }

    fn layer_names(&self, prefix: &str) -> Vec<(String, String)> {
        (0..self.widths().len() - 1)
            .map(|l| (format!("{prefix}w{l}"), format!("{prefix}b{l}")))
            .collect()
    }
}

/// He-initialized weights, zero biases, registered under `prefix`.
pub fn init_mlp_params(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut impl Rng) {
    let widths = spec.widths();
    for (l, (wname, bname)) in spec.layer_names(prefix).into_iter().enumerate() {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        store.insert(wname, Tensor::matrix(fan_out, fan_in, data).expect("sized"));
        store.insert(bname, Tensor::zeros(vec![fan_out]));
    }
}

/// All-zero weights and biases (softmax head then yields a uniform vector).
pub fn init_mlp_zeros(store: &mut ParamStore, prefix: &str, spec: &MlpSpec) {
    let widths = spec.widths();
    for (l, (wname, bname)) in spec.layer_names(prefix).into_iter().enumerate() {
        store.insert(wname, Tensor::zeros(vec![widths[l + 1], widths[l]]));
        store.insert(bname, Tensor::zeros(vec![widths[l + 1]]));
    }
}

/// Pre-head activations on the tape.
pub fn mlp_logits(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    spec: &MlpSpec,
    input: NodeId,
) -> Result<NodeId, AutoError> {
    let names = spec.layer_names(prefix);
    let last = names.len() - 1;
    let mut h = input;
    for (l, (wname, bname)) in names.iter().enumerate() {
        let w = binding.node(wname)?;
        let b = binding.node(bname)?;
        let z = tape.matvec(w, h)?;
        h = tape.add(z, b)?;
        if l != last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Forward pass with the head applied. A softmax head returns a probability
/// vector; a gaussian head returns the raw `(mean, log-std)` pair.
pub fn mlp_forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    spec: &MlpSpec,
    input: NodeId,
) -> Result<NodeId, AutoError> {
    let logits = mlp_logits(tape, binding, prefix, spec, input)?;
    match spec.head {
        Head::Softmax => Ok(tape.softmax(logits)),
        Head::Gaussian => {
            if spec.output != 2 {
                return Err(AutoError::ShapeMismatch(format!(
                    "gaussian head needs output width 2, got {}",
                    spec.output
                )));
            }
            Ok(logits)
        }
    }
}

/// Gradient-free forward pass sharing kernels with the tape version, so both
/// routes agree bit-for-bit.
pub fn mlp_logits_direct(
    store: &ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    input: &[f64],
) -> Result<Vec<f64>, AutoError> {
    if input.len() != spec.input {
        return Err(AutoError::ShapeMismatch(format!(
            "mlp input width {} against spec {}",
            input.len(),
            spec.input
        )));
    }
    let names = spec.layer_names(prefix);
    let last = names.len() - 1;
    let mut h = input.to_vec();
    for (l, (wname, bname)) in names.iter().enumerate() {
        let w = store
            .get(wname)
            .ok_or_else(|| AutoError::UnknownParam(wname.clone()))?;
        let b = store
            .get(bname)
            .ok_or_else(|| AutoError::UnknownParam(bname.clone()))?;
        let rows = w.shape()[0];
        let cols = w.shape()[1];
        let mut z = vec![0.0; rows];
        kernels::matvec(w.data(), rows, cols, &h, &mut z);
        for (zv, bv) in z.iter_mut().zip(b.data()) {
            *zv += bv;
        }
        if l != last {
            let mut a = vec![0.0; rows];
            kernels::relu(&z, &mut a);
            h = a;
        } else {
            h = z;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn spec() -> MlpSpec {
        MlpSpec::new(5, vec![16, 16], 7, Head::Softmax)
    }

    #[test]
    fn zero_weights_softmax_head_is_uniform() {
        let mut store = ParamStore::new();
        let spec = spec();
        init_mlp_zeros(&mut store, "f.", &spec);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0, 0.5, 2.0, 9.0]));
        let out = mlp_forward(&mut tape, &binding, "f.", &spec, x).unwrap();
        for v in tape.value(out).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_head_sums_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let spec = spec();
        init_mlp_params(&mut store, "f.", &spec, &mut rng);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(Tensor::vector(vec![0.1, 0.2, -0.3, 0.4, 0.5]));
        let out = mlp_forward(&mut tape, &binding, "f.", &spec, x).unwrap();
        let s: f64 = tape.value(out).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn direct_and_tape_forward_agree_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let spec = spec();
        init_mlp_params(&mut store, "f.", &spec, &mut rng);
        let input = [0.3, -0.8, 1.2, 0.0, 2.5];

        let direct = mlp_logits_direct(&store, "f.", &spec, &input).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(Tensor::vector(input.to_vec()));
        let out = mlp_logits(&mut tape, &binding, "f.", &spec, x).unwrap();
        assert_eq!(tape.value(out).data(), direct.as_slice());
    }

    #[test]
    fn same_seed_same_network_bitwise() {
        let build = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let mut store = ParamStore::new();
            init_mlp_params(&mut store, "f.", &spec(), &mut rng);
            store
        };
        let a = build();
        let b = build();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "param {name}");
        }
    }

    #[test]
    fn gaussian_head_requires_width_two() {
        let mut store = ParamStore::new();
        let bad = MlpSpec::new(3, vec![4], 3, Head::Gaussian);
        init_mlp_zeros(&mut store, "g.", &bad);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(Tensor::vector(vec![0.0; 3]));
        assert!(mlp_forward(&mut tape, &binding, "g.", &bad, x).is_err());
    }
}
