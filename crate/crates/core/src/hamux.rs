//! Energy hypergraphs of neuron layers joined by hypersynapses.
//!
//! The total energy is the sum of every layer's Legendre-dual energy and
//! every synapse energy. Each layer integrates
//! `tau dx/dt = I - x`, `I = -sum_s dE_s/dx_hat`, using only the signals of
//! the synapses it touches.

use crate::energies::{Energy, GradientReport, Separation};
use crate::error::{check_len, check_positive, AmError, Result};
use crate::neurons::NeuronLayer;
use crate::numeric::dot;
use crate::patterns::PatternMatrix;
use crate::transformer::{attention_energy_grad, hn_energy_grad, AttentionWeights, HnActivation};

#[derive(Debug, Clone, PartialEq)]
pub enum Hypersynapse {
    /// E = -g_a^T W g_b between two layers, W row-major `rows x cols`.
    Bilinear {
        w: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// E = -sum_mu F(<xi^mu, g>) on one layer.
    DenseAm {
        memories: PatternMatrix,
        f: Separation,
    },
    /// Energy attention over the token groups of one layer.
    Attention { weights: AttentionWeights },
    /// Hopfield module over the token groups of one layer.
    Hopfield {
        memories: PatternMatrix,
        g: HnActivation,
    },
}

impl Hypersynapse {
    fn arity(&self) -> usize {
        match self {
            Hypersynapse::Bilinear { .. } => 2,
            _ => 1,
        }
    }

    /// Energy and the gradient with respect to each connected activation.
    pub fn energy_grads(&self, acts: &[&[f64]], groups: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        match self {
            Hypersynapse::Bilinear { w, rows, cols } => {
                let (a, b) = (acts[0], acts[1]);
                let mut wb = vec![0.0; *rows];
                let mut wta = vec![0.0; *cols];
                for i in 0..*rows {
                    let row = &w[i * cols..(i + 1) * cols];
                    wb[i] = dot(row, b);
                    for j in 0..*cols {
                        wta[j] += row[j] * a[i];
                    }
                }
                let e = -dot(a, &wb);
                Ok((
                    e,
                    vec![
                        wb.iter().map(|x| -x).collect(),
                        wta.iter().map(|x| -x).collect(),
                    ],
                ))
            }
            Hypersynapse::DenseAm { memories, f } => {
                let g = acts[0];
                let mut e = 0.0;
                let mut grad = vec![0.0; g.len()];
                for p in memories.patterns() {
                    let m = dot(p, g);
                    e -= f.value(m);
                    let w = f.deriv(m);
                    for (o, x) in grad.iter_mut().zip(p) {
                        *o -= w * x;
                    }
                }
                Ok((e, vec![grad]))
            }
            Hypersynapse::Attention { weights } => {
                let (e, g) = attention_energy_grad(acts[0], groups[0], weights, None)?;
                Ok((e, vec![g]))
            }
            Hypersynapse::Hopfield { memories, g } => {
                let (e, gr) = hn_energy_grad(acts[0], groups[0], memories, *g)?;
                Ok((e, vec![gr]))
            }
        }
    }

    fn validate(&self, layers: &[&NeuronLayer]) -> Result<()> {
        if layers.len() != self.arity() {
            return Err(AmError::InvalidGraph(format!(
                "synapse connects {} layers, expected {}",
                layers.len(),
                self.arity()
            )));
        }
        let bad = |what: String| Err(AmError::InvalidGraph(what));
        match self {
            Hypersynapse::Bilinear { w, rows, cols } => {
                if w.len() != rows * cols || layers[0].dim != *rows || layers[1].dim != *cols {
                    return bad(format!(
                        "bilinear weight {rows}x{cols} does not fit layers of width {} and {}",
                        layers[0].dim, layers[1].dim
                    ));
                }
            }
            Hypersynapse::DenseAm { memories, .. } => {
                if memories.dim() != layers[0].dim {
                    return bad(format!(
                        "memories of width {} on a layer of width {}",
                        memories.dim(),
                        layers[0].dim
                    ));
                }
            }
            Hypersynapse::Attention { weights } => {
                if weights.d != layers[0].width() {
                    return bad(format!(
                        "attention width {} on tokens of width {}",
                        weights.d,
                        layers[0].width()
                    ));
                }
            }
            Hypersynapse::Hopfield { memories, .. } => {
                if memories.dim() != layers[0].width() {
                    return bad(format!(
                        "memories of width {} on tokens of width {}",
                        memories.dim(),
                        layers[0].width()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    pub synapse: Hypersynapse,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGraph {
    layers: Vec<NeuronLayer>,
    states: Vec<Vec<f64>>,
    synapses: Vec<Connection>,
}

impl EnergyGraph {
    /// Graph with the given layers, all states zero and no synapses.
    pub fn new(layers: Vec<NeuronLayer>) -> Self {
        let states = layers.iter().map(|l| vec![0.0; l.dim]).collect();
        Self {
            layers,
            states,
            synapses: Vec::new(),
        }
    }

    pub fn add_synapse(&mut self, synapse: Hypersynapse, layers: Vec<usize>) -> Result<()> {
        let mut refs = Vec::new();
        for &l in &layers {
            refs.push(
                self.layers
                    .get(l)
                    .ok_or_else(|| AmError::InvalidGraph(format!("no layer {l}")))?,
            );
        }
        synapse.validate(&refs)?;
        self.synapses.push(Connection { synapse, layers });
        Ok(())
    }

    pub fn layers(&self) -> &[NeuronLayer] {
        &self.layers
    }

    pub fn synapses(&self) -> &[Connection] {
        &self.synapses
    }

    pub fn state(&self, l: usize) -> &[f64] {
        &self.states[l]
    }

    pub fn set_state(&mut self, l: usize, x: Vec<f64>) -> Result<()> {
        let layer = self
            .layers
            .get(l)
            .ok_or_else(|| AmError::InvalidGraph(format!("no layer {l}")))?;
        check_len(layer.dim, x.len())?;
        self.states[l] = x;
        Ok(())
    }

    pub fn activations(&self) -> Result<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .zip(&self.states)
            .map(|(l, x)| l.activation(x))
            .collect()
    }

    fn synapse_terms(&self, acts: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut energy = 0.0;
        let mut grads: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.dim]).collect();
        for c in &self.synapses {
            let a: Vec<&[f64]> = c.layers.iter().map(|&l| acts[l].as_slice()).collect();
            let groups: Vec<usize> = c.layers.iter().map(|&l| self.layers[l].groups).collect();
            let (e, gs) = c.synapse.energy_grads(&a, &groups)?;
            energy += e;
            for (&l, g) in c.layers.iter().zip(gs) {
                for (o, v) in grads[l].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok((energy, grads))
    }

    /// Sum of layer dual energies and synapse energies.
    pub fn total_energy(&self) -> Result<f64> {
        let acts = self.activations()?;
        let mut e = self.synapse_terms(&acts)?.0;
        for (l, x) in self.layers.iter().zip(&self.states) {
            e += l.dual_energy(x)?;
        }
        Ok(e)
    }

    /// Synaptic input I_l = -sum_s dE_s/dg_l for every layer.
    pub fn inputs(&self) -> Result<Vec<Vec<f64>>> {
        let acts = self.activations()?;
        let (_, grads) = self.synapse_terms(&acts)?;
        Ok(grads
            .into_iter()
            .map(|g| g.into_iter().map(|v| -v).collect())
            .collect())
    }

    /// One explicit Euler step x <- x (1 - dt/tau) + (dt/tau) I on every
    /// layer at once. Requires dt <= tau for every layer.
    pub fn local_step(&mut self, dt: f64) -> Result<()> {
        check_positive(dt, "dt")?;
        if let Some(l) = self.layers.iter().find(|l| dt > l.tau) {
            return Err(AmError::OutOfRange(format!(
                "dt = {dt} exceeds tau = {} of layer {}",
                l.tau, l.name
            )));
        }
        let inputs = self.inputs()?;
        for ((x, l), inp) in self.states.iter_mut().zip(&self.layers).zip(inputs) {
            let r = dt / l.tau;
            for (xi, ii) in x.iter_mut().zip(inp) {
                *xi = *xi * (1.0 - r) + r * ii;
            }
        }
        Ok(())
    }

    /// Local step that halves dt (at most 40 times) until the total energy
    /// does not increase. Returns the step actually taken, 0 if none was.
    pub fn local_step_backtracking(&mut self, dt: f64) -> Result<f64> {
        let e0 = self.total_energy()?;
        let saved = self.states.clone();
        let mut h = dt;
        for _ in 0..=40 {
            self.local_step(h)?;
            if self.total_energy()? <= e0 {
                return Ok(h);
            }
            self.states = saved.clone();
            h *= 0.5;
        }
        Ok(0.0)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut o = vec![0];
        for l in &self.layers {
            o.push(o.last().unwrap() + l.dim);
        }
        o
    }

    pub fn flat_state(&self) -> Vec<f64> {
        self.states.concat()
    }

    pub fn set_flat_state(&mut self, v: &[f64]) -> Result<()> {
        let o = self.offsets();
        check_len(*o.last().unwrap(), v.len())?;
        for (l, x) in self.states.iter_mut().enumerate() {
            x.copy_from_slice(&v[o[l]..o[l + 1]]);
        }
        Ok(())
    }
}

/// The graph energy as a function of the concatenated internal states. Its
/// gradient in layer l is H_l (x_l - I_l), H_l the Lagrangian Hessian.
impl Energy for EnergyGraph {
    fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.dim).sum()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        let mut g = self.clone();
        g.set_flat_state(v)?;
        let energy = g.total_energy()?;
        let inputs = g.inputs()?;
        let mut gradient = Vec::with_capacity(v.len());
        for ((l, x), inp) in g.layers.iter().zip(&g.states).zip(inputs) {
            let diff: Vec<f64> = x.iter().zip(&inp).map(|(a, b)| a - b).collect();
            gradient.extend(l.hessian_vector(x, &diff)?);
        }
        Ok(GradientReport {
            energy,
            gradient,
            active_terms: None,
        })
    }
}
