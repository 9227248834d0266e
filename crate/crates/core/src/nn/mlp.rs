use rand::Rng as _;

use super::tape::{selu, Gradients, Tape, Var};
use crate::error::{check_finite, Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Dense layer computing `x · W + b` with `W` stored inputs×outputs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and bias.
    pub fn uniform(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-bound..=bound)).collect();
        Linear { inputs, outputs, weight, bias }
    }

    fn weight_matrix(&self) -> Matrix {
        Matrix::from_vec(self.inputs, self.outputs, self.weight.clone()).expect("layer shape")
    }
}

/// Multi-layer perceptron with SeLU on hidden layers and identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Linear>,
}

/// Tape handles for the weights and biases of each layer.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpParams {
    /// `depth` hidden layers of width `hidden`, then a linear output layer.
    pub fn new(input: usize, hidden: usize, depth: usize, output: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = input;
        for _ in 0..depth {
            layers.push(Linear::uniform(width, hidden, rng));
            width = hidden;
        }
        layers.push(Linear::uniform(width, output, rng));
        MlpParams { layers }
    }

    pub fn zeros(input: usize, hidden: usize, depth: usize, output: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = input;
        for _ in 0..depth {
            layers.push(Linear::zeros(width, hidden));
            width = hidden;
        }
        layers.push(Linear::zeros(width, output));
        MlpParams { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape(format!("layer {i}: buffers do not match {}x{}", l.inputs, l.outputs)));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Shape(format!(
                    "layer {i} takes {} inputs but layer {} emits {}",
                    l.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
            check_finite(&l.weight, "weight")?;
            check_finite(&l.bias, "bias")?;
        }
        Ok(MlpParams { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter buffers in canonical order: weight then bias, per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Order-sensitive FNV checksum over the parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Forward pass for one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_width()
            )));
        }
        check_finite(input, "input")?;
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch(&x).into_vec())
    }

    /// Forward pass for a batch (one sample per row).
    pub fn forward_batch(&self, input: &Matrix) -> Matrix {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight_matrix());
            let cols = z.cols();
            for row in z.data_mut().chunks_mut(cols) {
                for (x, b) in row.iter_mut().zip(&layer.bias) {
                    *x += b;
                }
            }
            if i != last {
                z.data_mut().iter_mut().for_each(|x| *x = selu(*x));
            }
            h = z;
        }
        h
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight_matrix());
                let b = tape.leaf(Matrix::from_vec(1, l.outputs, l.bias.clone()).expect("bias shape"));
                (w, b)
            })
            .collect();
        MlpVars { layers }
    }

    /// Records a forward pass on `tape` using previously registered parameters.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Var {
        let last = vars.layers.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if i == last { z } else { tape.selu(z) };
        }
        h
    }

    /// Gradient buffers in the order of [`MlpParams::tensors`].
    pub fn collect_grads(&self, grads: &Gradients, vars: &MlpVars) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .zip(&vars.layers)
            .flat_map(|(l, &(w, b))| [grads.flat_or_zeros(w, l.weight.len()), grads.flat_or_zeros(b, l.bias.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpParams::zeros(3, 8, 2, 2);
        assert_eq!(net.forward(&[1.0, -4.0, 2.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let layer = Linear { inputs: 2, outputs: 2, weight: vec![1.0, 0.0, 0.0, 1.0], bias: vec![0.0, 0.0] };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn depth_two_matches_scalar_recomputation() {
        let l1 = Linear { inputs: 1, outputs: 2, weight: vec![0.8, -1.5], bias: vec![0.1, 0.2] };
        let l2 = Linear { inputs: 2, outputs: 1, weight: vec![2.0, -0.5], bias: vec![0.3] };
        let net = MlpParams::from_layers(vec![l1, l2]).unwrap();
        let x = 0.5;
        // hand-rolled: h1 = selu(0.8*0.5+0.1) = selu(0.5), h2 = selu(-1.5*0.5+0.2) = selu(-0.55)
        let lambda = 1.0507009873554805;
        let alpha = 1.6732632423543772;
        let h1 = lambda * 0.5;
        let h2 = lambda * alpha * ((-0.55f64).exp() - 1.0);
        let expected = 2.0 * h1 - 0.5 * h2 + 0.3;
        let got = net.forward(&[x]).unwrap()[0];
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let net = MlpParams::zeros(2, 4, 1, 1);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        let bad = vec![Linear::zeros(2, 3), Linear::zeros(4, 1)];
        assert!(MlpParams::from_layers(bad).is_err());
    }

    #[test]
    fn tape_forward_equals_plain_forward() {
        let mut rng = stream(1, "mlp");
        let net = MlpParams::new(3, 16, 3, 2, &mut rng);
        let x = Matrix::from_rows(&[[0.1, -0.2, 0.3], [1.0, 2.0, -3.0]]).unwrap();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let xin = tape.leaf(x.clone());
        let out = net.forward_tape(&mut tape, &vars, xin);
        assert_eq!(tape.value(out), &net.forward_batch(&x));
    }

    #[test]
    fn init_is_seeded() {
        let a = MlpParams::new(5, 64, 3, 2, &mut stream(3, "init"));
        let b = MlpParams::new(5, 64, 3, 2, &mut stream(3, "init"));
        assert_eq!(a.checksum(), b.checksum());
        let bound = 1.0 / 5f64.sqrt();
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= bound));
        assert_eq!(a.num_params(), 5 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 2 + 2);
    }
}
